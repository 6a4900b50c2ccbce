use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

fn hwc<T: Element>(op: &str, x: &Var<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::InvalidShape(format!("{op} needs [h, w, c], got {:?}", x.shape()))),
    }
}

/// `[h, w, c·s²] → [s·h, s·w, c]`; input channel `c·s² + i·s + j` lands at
/// sub-pixel `(i, j)`.
pub fn pixel_shuffle<T: Element>(x: &Var<T>, s: usize) -> Result<Var<T>> {
    let (h, w, cs) = hwc("pixel_shuffle", x)?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::shape("pixel_shuffle", x.shape(), &[s, s]));
    }
    let c = cs / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut index = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, i, xx, j) = (oy / s, oy % s, ox / s, ox % s);
            for ch in 0..c {
                index.push((y * w + xx) * cs + ch * s * s + i * s + j);
            }
        }
    }
    x.gather(index.into(), &[oh, ow, c])
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Var<T>, s: usize) -> Result<Var<T>> {
    let (oh, ow, c) = hwc("pixel_unshuffle", x)?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(Error::shape("pixel_unshuffle", x.shape(), &[s, s]));
    }
    let (h, w, cs) = (oh / s, ow / s, c * s * s);
    let mut index = Vec::with_capacity(oh * ow * c);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        index.push(((y * s + i) * ow + xx * s + j) * c + ch);
                    }
                }
            }
        }
    }
    x.gather(index.into(), &[h, w, cs])
}

/// Pixel order that lists the `w×w` windows of an `h×w` map in raster
/// order, each window's tokens in raster order.
pub fn window_order(h: usize, w: usize, win: usize) -> Result<Vec<usize>> {
    if win == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    if !h.is_multiple_of(win) || !w.is_multiple_of(win) {
        return Err(Error::InvalidShape(format!("{h}x{w} map is not divisible into {win}x{win} windows")));
    }
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for ty in 0..win {
                for tx in 0..win {
                    order.push((wy * win + ty) * w + wx * win + tx);
                }
            }
        }
    }
    Ok(order)
}

/// `[h, w, c] → [nW, win², c]`.
pub fn window_partition<T: Element>(x: &Var<T>, win: usize) -> Result<Var<T>> {
    let (h, w, c) = hwc("window_partition", x)?;
    let order = window_order(h, w, win)?;
    x.take_rows(order.into(), c, &[(h / win) * (w / win), win * win, c])
}

/// `[nW, win², c] → [h, w, c]`, inverse of [`window_partition`].
pub fn window_merge<T: Element>(x: &Var<T>, win: usize, h: usize, w: usize) -> Result<Var<T>> {
    let order = window_order(h, w, win)?;
    let c = *x.shape().last().ok_or_else(|| Error::InvalidShape("window_merge of a scalar".into()))?;
    if x.value().len() != h * w * c {
        return Err(Error::shape("window_merge", x.shape(), &[h, w, c]));
    }
    let mut inverse = vec![0; h * w];
    for (pos, &pix) in order.iter().enumerate() {
        inverse[pix] = pos;
    }
    x.take_rows(inverse.into(), c, &[h, w, c])
}

/// Means of non-overlapping `d×d` blocks: `[h, w, c] → [h/d, w/d, c]`.
pub fn avg_pool_downscale<T: Element>(x: &Var<T>, d: usize) -> Result<Var<T>> {
    hwc("avg_pool_downscale", x)?;
    x.avg_pool(d)
}

/// Mirror index for position `i` of an axis of length `n`, reflecting
/// without repeating the edge sample (`n, n+1, … → n−2, n−3, …`) and
/// bouncing back and forth when the pad exceeds the axis.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges: `[h, w, c] → [h+ph, w+pw, c]`.
pub fn pad_reflect<T: Element>(x: &Var<T>, ph: usize, pw: usize) -> Result<Var<T>> {
    let (h, w, c) = hwc("pad_reflect", x)?;
    if ph == 0 && pw == 0 {
        return Ok(x.clone());
    }
    let (nh, nw) = (h + ph, w + pw);
    let index: Rc<[usize]> = (0..nh * nw)
        .map(|p| reflect_index(p / nw, h) * w + reflect_index(p % nw, w))
        .collect();
    x.take_rows(index, c, &[nh, nw, c])
}

/// Pads up to the next multiple of `m` on both axes. Returns the padded map
/// and the original `(h, w)`.
pub fn pad_to_multiple<T: Element>(x: &Var<T>, m: usize) -> Result<(Var<T>, (usize, usize))> {
    let (h, w, _) = hwc("pad_to_multiple", x)?;
    if m == 0 {
        return Err(Error::Config("padding multiple must be positive".into()));
    }
    let padded = pad_reflect(x, h.next_multiple_of(m) - h, w.next_multiple_of(m) - w)?;
    Ok((padded, (h, w)))
}

/// Top-left `h×w` region.
pub fn crop<T: Element>(x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let (xh, xw, c) = hwc("crop", x)?;
    if h == 0 || w == 0 || h > xh || w > xw {
        return Err(Error::shape("crop", x.shape(), &[h, w, c]));
    }
    if (h, w) == (xh, xw) {
        return Ok(x.clone());
    }
    let index: Rc<[usize]> = (0..h * w).map(|p| (p / w) * xw + p % w).collect();
    x.take_rows(index, c, &[h, w, c])
}
