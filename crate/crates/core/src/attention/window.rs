use super::{segmented_attention, split_qkv, Segment};
use crate::error::{Error, Result};
use crate::nn::{crop, pad_to_multiple, window_order};
use crate::tensor::{Element, Var};

/// Window self-attention on a packed `[h, w, 3C]` query/key/value map:
/// tokens attend only within their `win×win` window. Maps that do not tile
/// evenly are reflect-padded on the bottom/right and cropped afterwards.
/// `bias`, if given, is a `[heads, win², win²]` relative position bias.
/// Returns `[h, w, C]` before any output projection.
pub fn wsa<T: Element>(qkv: &Var<T>, heads: usize, win: usize, bias: Option<&Var<T>>) -> Result<Var<T>> {
    let [h, w, c3] = *qkv.shape() else {
        return Err(Error::InvalidShape(format!("wsa needs [h, w, 3C], got {:?}", qkv.shape())));
    };
    if win == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    let (padded, _) = pad_to_multiple(qkv, win)?;
    let (ph, pw) = (padded.shape()[0], padded.shape()[1]);
    let order = window_order(ph, pw, win)?;
    let mut inverse = vec![0; order.len()];
    for (pos, &pix) in order.iter().enumerate() {
        inverse[pix] = pos;
    }
    let n = ph * pw;
    let windowed = padded.take_rows(order.into(), c3, &[n, c3])?;
    let (q, k, v) = split_qkv(&windowed)?;
    let tokens = win * win;
    let segments: Vec<Segment> = (0..n / tokens).map(|i| Segment::square(i * tokens..(i + 1) * tokens)).collect();
    let out = segmented_attention(&q, &k, &v, heads, &segments, bias, false)?.out;
    let merged = out.take_rows(inverse.into(), c3 / 3, &[ph, pw, c3 / 3])?;
    crop(&merged, h, w)
}
