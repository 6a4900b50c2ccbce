//! Multi-head attention over token rows, plus the two local schemes built
//! on it: window self-attention ([`wsa`]) and category self-attention
//! ([`csa`]).
//!
//! All three reduce to one fused op, [`segmented_attention`], which runs
//! independent softmax attention inside each (query range, key range)
//! segment. Window and category attention gather tokens so that every
//! interaction set is contiguous, attend, and scatter back.

mod category;
mod window;

pub use category::{categorize, csa, sub_groups, CategoryAssignment, Orientation};
pub use window::wsa;

use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear};
use crate::par;
use crate::tensor::{gemm, macs, Element, Tensor, Var};

/// One independent attention problem: queries `q` attend to keys `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

impl Segment {
    /// Self-attention among rows `r`.
    pub fn square(r: Range<usize>) -> Self {
        Segment { q: r.clone(), k: r }
    }
}

/// Fused multi-head attention output.
pub struct Attended<T> {
    /// `[nq, C]`, heads concatenated along channels.
    pub out: Var<T>,
    /// Head-averaged pre-softmax logits `[nq, nk]` (scale and bias applied),
    /// when requested.
    pub logits: Option<Tensor<T>>,
}

fn last_dim<T: Element>(name: &str, x: &Var<T>) -> Result<(usize, usize)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::InvalidShape(format!("{name} must have a channel axis")))?;
    Ok((x.value().len() / c, c))
}

struct Geometry<T> {
    c: usize,
    dh: usize,
    scale: T,
}

impl<T: Element> Geometry<T> {
    /// `scale · q_h k_hᵀ (+ bias_h)` for one segment and head.
    fn scores(&self, q: &[T], k: &[T], seg: &Segment, h: usize, bias: Option<&[T]>) -> Vec<T> {
        let (nq, nk) = (seg.q.len(), seg.k.len());
        let c = self.c;
        let mut s = vec![T::zero(); nq * nk];
        gemm(
            nq,
            self.dh,
            nk,
            &q[seg.q.start * c + h * self.dh..],
            (c, 1),
            &k[seg.k.start * c + h * self.dh..],
            (1, c),
            T::zero(),
            &mut s,
            (nk, 1),
        );
        for x in &mut s {
            *x *= self.scale;
        }
        if let Some(b) = bias {
            for (x, &b) in s.iter_mut().zip(&b[h * nq * nk..(h + 1) * nq * nk]) {
                *x += b;
            }
        }
        s
    }
}

fn softmax_rows<T: Element>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Runs `softmax(scale · q_h k_hᵀ + bias_h) v_h` for every head `h` and
/// every segment, with `scale = 1/√(C/heads)`. Query rows outside every
/// segment produce zeros. `bias`, if given, has shape `[heads, nq, nk]`
/// and is added in every segment (all segments must then share that size).
pub fn segmented_attention<T: Element>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    segments: &[Segment],
    bias: Option<&Var<T>>,
    export_logits: bool,
) -> Result<Attended<T>> {
    let (nq, c) = last_dim("queries", q)?;
    let (nk, ck) = last_dim("keys", k)?;
    let (nv, cv) = last_dim("values", v)?;
    if ck != c || cv != c || nv != nk {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
    }
    if segments.is_empty() {
        return Err(Error::Contract("attention needs at least one segment".into()));
    }
    for s in segments {
        if s.k.is_empty() {
            return Err(Error::Contract("attention over zero keys".into()));
        }
        if s.q.is_empty() || s.q.end > nq || s.k.end > nk {
            return Err(Error::Contract(format!("segment {s:?} outside {nq} queries / {nk} keys")));
        }
        if let Some(b) = bias {
            if b.shape() != [heads, s.q.len(), s.k.len()] {
                return Err(Error::shape("attention bias", b.shape(), &[heads, s.q.len(), s.k.len()]));
            }
        }
    }
    if export_logits && segments.len() != 1 {
        return Err(Error::Contract("logit export needs a single segment".into()));
    }
    let dh = c / heads;
    let geo = Geometry {
        c,
        dh,
        scale: T::of(1.0 / (dh as f64).sqrt()),
    };
    macs::add_attention(segments.iter().map(|s| (2 * s.q.len() * s.k.len() * c) as u64).sum());

    let (qd, kd, vd) = (q.value().data(), k.value().data(), v.value().data());
    let bd = bias.map(|b| b.value().data());
    let tasks = segments.len() * heads;
    let results: Vec<(Vec<T>, Option<Vec<T>>)> = par::map_range(tasks, |t| {
        let (seg, h) = (&segments[t / heads], t % heads);
        let mut p = geo.scores(qd, kd, seg, h, bd);
        let logits = export_logits.then(|| p.clone());
        let (nq, nk) = (seg.q.len(), seg.k.len());
        softmax_rows(&mut p, nk);
        let mut o = vec![T::zero(); nq * dh];
        gemm(nq, nk, dh, &p, (nk, 1), &vd[seg.k.start * c + h * dh..], (c, 1), T::zero(), &mut o, (dh, 1));
        (o, logits)
    });

    let mut out = vec![T::zero(); nq * c];
    let mut logits = export_logits.then(|| vec![T::zero(); segments[0].q.len() * segments[0].k.len()]);
    let inv_heads = T::of(1.0 / heads as f64);
    for (t, (o, lg)) in results.into_iter().enumerate() {
        let (seg, h) = (&segments[t / heads], t % heads);
        for (r, row) in o.chunks_exact(dh).enumerate() {
            let dst = (seg.q.start + r) * c + h * dh;
            out[dst..dst + dh].copy_from_slice(row);
        }
        if let (Some(acc), Some(lg)) = (logits.as_mut(), lg) {
            for (a, x) in acc.iter_mut().zip(lg) {
                *a += x * inv_heads;
            }
        }
    }
    let logits = logits.map(|l| Tensor::raw(vec![segments[0].q.len(), segments[0].k.len()], l));
    let out_value = Tensor::raw(vec![nq, c], out);

    let (qv, kv, vv) = (q.value_rc(), k.value_rc(), v.value_rc());
    let bv = bias.map(Var::value_rc);
    let need = [q.is_tracked(), k.is_tracked(), v.is_tracked(), bias.is_some_and(Var::is_tracked)];
    let segs_rc: Rc<[Segment]> = segments.into();
    let mut inputs = vec![q, k, v];
    inputs.extend(bias);
    let out = Var::from_op("attention", out_value, &inputs, move |g| {
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let bd = bv.as_ref().map(|b| b.data());
        let segs: &[Segment] = &segs_rc;
        let parts: Vec<[Vec<T>; 4]> = par::map_range(segs.len() * heads, |t| {
            let (seg, h) = (&segs[t / heads], t % heads);
            let (nq, nk) = (seg.q.len(), seg.k.len());
            let mut p = geo.scores(qd, kd, seg, h, bd);
            softmax_rows(&mut p, nk);
            let go = &gd[seg.q.start * c + h * dh..];
            let mut dv = vec![T::zero(); nk * dh];
            gemm(nk, nq, dh, &p, (1, nk), go, (c, 1), T::zero(), &mut dv, (dh, 1));
            let mut ds = vec![T::zero(); nq * nk];
            gemm(nq, dh, nk, go, (c, 1), &vd[seg.k.start * c + h * dh..], (1, c), T::zero(), &mut ds, (nk, 1));
            for (dsr, pr) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in dsr.iter_mut().zip(pr) {
                    *d = pp * (*d - dot);
                }
            }
            let mut dq = vec![T::zero(); nq * dh];
            gemm(nq, nk, dh, &ds, (nk, 1), &kd[seg.k.start * c + h * dh..], (c, 1), T::zero(), &mut dq, (dh, 1));
            let mut dk = vec![T::zero(); nk * dh];
            gemm(nk, nq, dh, &ds, (1, nk), &qd[seg.q.start * c + h * dh..], (c, 1), T::zero(), &mut dk, (dh, 1));
            for x in dq.iter_mut().chain(dk.iter_mut()) {
                *x *= geo.scale;
            }
            [dq, dk, dv, if need[3] { ds } else { Vec::new() }]
        });
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut gb = bd.map(|b| vec![T::zero(); b.len()]);
        for (t, [dq, dk, dv, ds]) in parts.into_iter().enumerate() {
            let (seg, h) = (&segs[t / heads], t % heads);
            let scatter = |dst: &mut [T], start: usize, src: &[T]| {
                for (r, row) in src.chunks_exact(dh).enumerate() {
                    let o = (start + r) * c + h * dh;
                    for (d, &s) in dst[o..o + dh].iter_mut().zip(row) {
                        *d += s;
                    }
                }
            };
            scatter(&mut gq, seg.q.start, &dq);
            scatter(&mut gk, seg.k.start, &dk);
            scatter(&mut gv, seg.k.start, &dv);
            if let Some(gb) = gb.as_mut().filter(|_| need[3]) {
                let n = ds.len();
                for (d, &s) in gb[h * n..(h + 1) * n].iter_mut().zip(&ds) {
                    *d += s;
                }
            }
        }
        let mut grads = vec![
            need[0].then(|| Tensor::raw(qv.shape().to_vec(), gq)),
            need[1].then(|| Tensor::raw(kv.shape().to_vec(), gk)),
            need[2].then(|| Tensor::raw(vv.shape().to_vec(), gv)),
        ];
        if let Some(b) = &bv {
            grads.push(gb.filter(|_| need[3]).map(|d| Tensor::raw(b.shape().to_vec(), d)));
        }
        grads
    })?;
    Ok(Attended { out, logits })
}

/// Every query row attends to every key row, followed by an optional output
/// projection. Returns the `[nq, C]` output and the head-averaged
/// pre-softmax logits `[nq, nk]`.
pub fn multi_head_cross_attention<T: Element>(
    params: &Bound<T>,
    proj: Option<&Linear>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
) -> Result<(Var<T>, Tensor<T>)> {
    let (nq, _) = last_dim("queries", q)?;
    let (nk, _) = last_dim("keys", k)?;
    if nk == 0 {
        return Err(Error::Contract("attention over zero keys".into()));
    }
    let a = segmented_attention(q, k, v, heads, &[Segment { q: 0..nq, k: 0..nk }], None, true)?;
    let out = match proj {
        Some(p) => p.forward(params, &a.out)?,
        None => a.out,
    };
    Ok((out, a.logits.expect("requested")))
}

/// Splits a packed `[…, 3C]` projection into query, key and value.
pub fn split_qkv<T: Element>(qkv: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
    let c3 = *qkv.shape().last().ok_or_else(|| Error::InvalidShape("qkv of a scalar".into()))?;
    if c3 % 3 != 0 {
        return Err(Error::InvalidShape(format!("packed qkv width {c3} is not a multiple of 3")));
    }
    let c = c3 / 3;
    Ok((qkv.slice_last(0, c)?, qkv.slice_last(c, c)?, qkv.slice_last(2 * c, c)?))
}
