use super::image::{to_u8, ImageBuffer};
use crate::error::{Error, Result};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let (ax2, ax3) = (ax * ax, ax * ax * ax);
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source taps and normalized weights for one output sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Symmetric (edge-repeating) mirror of `i` into `0..n`.
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Per-output contributions along one axis. When shrinking, the kernel is
/// stretched by `1/scale` so it also low-pass filters.
pub fn contributions(in_len: usize, out_len: usize) -> Vec<Contribution> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = width.ceil() as i64 + 2;
    (0..out_len)
        .map(|o| {
            // Pixel-centre mapping: output centre o + 0.5 lands at u + 0.5.
            let u = (o as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as i64;
            let mut indices = Vec::with_capacity(taps as usize);
            let mut weights = Vec::with_capacity(taps as usize);
            for t in 0..taps {
                let j = left + t;
                let w = kscale * cubic(kscale * (u - j as f64));
                if w != 0.0 {
                    indices.push(mirror(j, in_len));
                    weights.push(w);
                }
            }
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            Contribution { indices, weights }
        })
        .collect()
}

/// Separable bicubic resampling: a vertical pass then a horizontal pass,
/// both in f64, with one rounding at the end.
pub fn bicubic_resize(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Contract(format!("resize to empty {out_w}x{out_h}")));
    }
    let (w, h) = (img.width(), img.height());
    if (w, h) == (out_w, out_h) {
        return Ok(img.clone());
    }
    let (cy, cx) = (contributions(h, out_h), contributions(w, out_w));
    let px = img.pixels();
    let mut tmp = vec![0.0f64; out_h * w * 3];
    for (oy, c) in cy.iter().enumerate() {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (&iy, &wt) in c.indices.iter().zip(&c.weights) {
                    acc += wt * px[(iy * w + x) * 3 + ch] as f64;
                }
                tmp[(oy * w + x) * 3 + ch] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for oy in 0..out_h {
        for c in &cx {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (&ix, &wt) in c.indices.iter().zip(&c.weights) {
                    acc += wt * tmp[(oy * w + ix) * 3 + ch];
                }
                out.push(to_u8(acc));
            }
        }
    }
    ImageBuffer::new(out_w, out_h, out)
}

/// Shrinks by an integer factor.
pub fn downscale(img: &ImageBuffer, s: usize) -> Result<ImageBuffer> {
    if s == 0 || !img.width().is_multiple_of(s) || !img.height().is_multiple_of(s) {
        return Err(Error::Data(format!("{}x{} image not divisible by {s}", img.width(), img.height())));
    }
    bicubic_resize(img, img.width() / s, img.height() / s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for (i, o) in [(8, 4), (10, 3), (7, 21), (64, 16), (5, 5), (3, 7)] {
            for c in contributions(i, o) {
                assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(c.indices.iter().all(|&j| j < i));
            }
        }
    }

    #[test]
    fn identity_and_constant() {
        let img = ImageBuffer::from_fn(5, 4, |x, y| [(x * 40) as u8, (y * 50) as u8, 9]).unwrap();
        assert_eq!(bicubic_resize(&img, 5, 4).unwrap(), img);
        let flat = ImageBuffer::from_fn(9, 7, |_, _| [17, 130, 250]).unwrap();
        for (w, h) in [(3, 2), (18, 14), (4, 11)] {
            let r = bicubic_resize(&flat, w, h).unwrap();
            assert!(r.pixels().chunks(3).all(|p| p == [17, 130, 250]));
        }
        assert!(matches!(bicubic_resize(&img, 0, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn kernel_shape() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-12);
    }
}
