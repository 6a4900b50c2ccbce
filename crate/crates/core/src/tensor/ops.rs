//! Differentiable operations on [`Var`]. Each op computes its value eagerly
//! and, when any input is tracked, records a backward rule on that tape.

use std::rc::Rc;

use super::{gemm, macs, numel, Element, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

// ---------------------------------------------------------------------------
// broadcasting helpers

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of `shape` left-padded to `rank`; broadcast dims get 0.
fn aligned_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        let slot = rank - shape.len() + i;
        strides[slot] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Visits every output index with the matching flat offsets into two
/// broadcast operands.
fn for_each_pair(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    let n = numel(out_shape);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_apply<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = numel(out_shape);
    if a.shape() == out_shape && out_shape.ends_with(b.shape()) {
        let m = bd.len();
        return ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % m])).collect();
    }
    let rank = out_shape.len();
    let (sa, sb) = (aligned_strides(a.shape(), rank), aligned_strides(b.shape(), rank));
    let mut out = Vec::with_capacity(n);
    for_each_pair(out_shape, &sa, &sb, |_, ia, ib| out.push(f(ad[ia], bd[ib])));
    out
}

/// Sums a gradient of the broadcast output shape back down to `shape`.
fn reduce_to<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let gd = g.data();
    if g.shape().ends_with(shape) {
        let m = out.len();
        for (i, &x) in gd.iter().enumerate() {
            out[i % m] += x;
        }
    } else {
        let rank = g.rank();
        let st = aligned_strides(shape, rank);
        let zero = vec![0; rank];
        for_each_pair(g.shape(), &st, &zero, |o, it, _| out[it] += gd[o]);
    }
    Tensor::raw(shape.to_vec(), out)
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

impl<T: Element> Var<T> {
    fn binary(&self, other: &Var<T>, op: Bin) -> Result<Var<T>> {
        let name = match op {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
        };
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(name, self.shape(), other.shape()))?;
        let data = match op {
            Bin::Add => broadcast_apply(self.value(), other.value(), &out_shape, |x, y| x + y),
            Bin::Sub => broadcast_apply(self.value(), other.value(), &out_shape, |x, y| x - y),
            Bin::Mul => broadcast_apply(self.value(), other.value(), &out_shape, |x, y| x * y),
        };
        let value = Tensor::raw(out_shape.clone(), data);
        let (a, b) = (self.value_rc(), other.value_rc());
        let (need_a, need_b) = (self.is_tracked(), other.is_tracked());
        Var::from_op(name, value, &[self, other], move |g| {
            let ga = need_a.then(|| match op {
                Bin::Add | Bin::Sub => reduce_to(g, a.shape()),
                Bin::Mul => {
                    let t = Tensor::raw(g.shape().to_vec(), broadcast_apply(g, &b, g.shape(), |x, y| x * y));
                    reduce_to(&t, a.shape())
                }
            });
            let gb = need_b.then(|| match op {
                Bin::Add => reduce_to(g, b.shape()),
                Bin::Sub => reduce_to(&g.map(|x| -x), b.shape()),
                Bin::Mul => {
                    let t = Tensor::raw(g.shape().to_vec(), broadcast_apply(g, &a, g.shape(), |x, y| x * y));
                    reduce_to(&t, b.shape())
                }
            });
            vec![ga, gb]
        })
    }

    /// Element-wise sum with trailing-dimension broadcasting.
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(other, Bin::Mul)
    }

    /// Multiplies every element by `c`.
    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let c = T::of(c);
        let value = self.value().map(|x| x * c);
        Var::from_op("scale", value, &[self], move |g| vec![Some(g.map(|x| x * c))])
    }

    // -----------------------------------------------------------------------
    // matrix products

    fn matmul_impl(&self, other: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(name, &sa, &sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (kb, n) = if trans_b {
            (sb[rb - 1], sb[rb - 2])
        } else {
            (sb[rb - 2], sb[rb - 1])
        };
        if k != kb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let (batch_a, batch_b) = (&sa[..ra - 2], &sb[..rb - 2]);
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        // A plain matrix on the right lets every leading row of `a` share one product.
        let (nb, m) = if batch_b.is_empty() { (1, numel(&batch) * m) } else { (numel(&batch), m) };
        let mut offsets = Vec::with_capacity(nb);
        if batch_b.is_empty() {
            offsets.push((0, 0));
        } else {
            let r = batch.len();
            let (sta, stb) = (aligned_strides(batch_a, r), aligned_strides(batch_b, r));
            for_each_pair(&batch, &sta, &stb, |_, ia, ib| offsets.push((ia * m * k, ib * k * n)));
        }
        let b_view = if trans_b { (1, k) } else { (n, 1) };
        macs::add((nb * m * k * n) as u64);

        let (ad, bd) = (self.value().data(), other.value().data());
        let mut out = vec![T::zero(); nb * m * n];
        for (bi, &(oa, ob)) in offsets.iter().enumerate() {
            gemm(m, k, n, &ad[oa..], (k, 1), &bd[ob..], b_view, T::zero(), &mut out[bi * m * n..], (n, 1));
        }
        let value = Tensor::raw(out_shape, out);

        let (a, b) = (self.value_rc(), other.value_rc());
        let (need_a, need_b) = (self.is_tracked(), other.is_tracked());
        Var::from_op(name, value, &[self, other], move |g| {
            let gd = g.data();
            let ga = need_a.then(|| {
                let mut ga = vec![T::zero(); a.len()];
                for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                    // dA = dC · Bopᵀ
                    gemm(m, n, k, &gd[bi * m * n..], (n, 1), &b.data()[ob..], (b_view.1, b_view.0), T::one(), &mut ga[oa..], (k, 1));
                }
                Tensor::raw(a.shape().to_vec(), ga)
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); b.len()];
                for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                    // dBop = Aᵀ · dC, written through the same view as Bop.
                    gemm(k, m, n, &a.data()[oa..], (1, k), &gd[bi * m * n..], (n, 1), T::one(), &mut gb[ob..], b_view);
                }
                Tensor::raw(b.shape().to_vec(), gb)
            });
            vec![ga, gb]
        })
    }

    /// `[..., m, k] × [..., k, n] → [..., m, n]` with broadcast batch dims.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, false)
    }

    /// `[..., m, k] × [..., n, k]ᵀ → [..., m, n]`.
    pub fn matmul_t(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_impl(other, true)
    }

    // -----------------------------------------------------------------------
    // shape ops

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().clone().reshape(shape)?;
        let orig = self.shape().to_vec();
        Var::from_op("reshape", value, &[self], move |g| {
            vec![Some(Tensor::raw(orig.clone(), g.data().to_vec()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<T>> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape(format!("bad permutation {axes:?} for rank {rank}")));
        }
        let value = permute_tensor(self.value(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op("permute", value, &[self], move |g| vec![Some(permute_tensor(g, &inverse))])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::InvalidShape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Selects rows along axis 0. Indices may repeat; the backward pass
    /// scatter-adds.
    pub fn gather_rows(&self, index: Rc<[usize]>) -> Result<Var<T>> {
        let shape = self.shape();
        let Some((_, rest)) = shape.split_first() else {
            return Err(Error::InvalidShape("gather_rows on a scalar".into()));
        };
        let mut out_shape = vec![index.len()];
        out_shape.extend_from_slice(rest);
        self.take_rows(index, numel(rest), &out_shape)
    }

    /// Views the data as consecutive rows of `row` elements, picks rows by
    /// `index` and lays the result out as `shape`.
    pub fn take_rows(&self, index: Rc<[usize]>, row: usize, shape: &[usize]) -> Result<Var<T>> {
        let len = self.value().len();
        if row == 0 || !len.is_multiple_of(row) {
            return Err(Error::InvalidShape(format!("row width {row} does not divide {len} values")));
        }
        if index.is_empty() || numel(shape) != index.len() * row || shape.contains(&0) {
            return Err(Error::InvalidShape(format!("{} rows of {row} into {shape:?}", index.len())));
        }
        let rows = len / row;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of range for {rows} rows")));
        }
        let src = self.value().data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let in_shape = self.shape().to_vec();
        Var::from_op("take_rows", Tensor::raw(shape.to_vec(), out), &[self], move |g| {
            let mut gx = vec![T::zero(); len];
            for (r, &i) in index.iter().enumerate() {
                let dst = &mut gx[i * row..(i + 1) * row];
                for (d, &s) in dst.iter_mut().zip(&g.data()[r * row..(r + 1) * row]) {
                    *d += s;
                }
            }
            vec![Some(Tensor::raw(in_shape.clone(), gx))]
        })
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::InvalidShape("slice of a scalar".into()))?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape(format!("columns {start}..{} of {c}", start + len)));
        }
        let rows = self.value().len() / c;
        let src = self.value().data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        Var::from_op("slice_last", Tensor::raw(out_shape, out), &[self], move |g| {
            let mut gx = vec![T::zero(); rows * c];
            for r in 0..rows {
                gx[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::raw(shape.clone(), gx))]
        })
    }

    /// Flat element gather into a new shape.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != index.len() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!("{} indices for shape {shape:?}", index.len())));
        }
        let n = self.value().len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("element index {bad} out of range for {n}")));
        }
        let src = self.value().data();
        let value = Tensor::raw(shape.to_vec(), index.iter().map(|&i| src[i]).collect());
        let in_shape = self.shape().to_vec();
        Var::from_op("gather", value, &[self], move |g| {
            let mut gx = vec![T::zero(); n];
            for (&i, &v) in index.iter().zip(g.data()) {
                gx[i] += v;
            }
            vec![Some(Tensor::raw(in_shape.clone(), gx))]
        })
    }

    // -----------------------------------------------------------------------
    // non-linearities and normalization

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]));
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::raw(shape.clone(), y);
        let yv = Rc::new(value.clone());
        Var::from_op("softmax", value, &[self], move |g| {
            let (y, gd) = (yv.data(), g.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += gd[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = y[p] * (gd[p] - dot);
                    }
                }
            }
            vec![Some(Tensor::raw(shape.clone(), gx))]
        })
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Result<Var<T>> {
        let r = self.value().rank();
        if r == 0 {
            return Err(Error::InvalidShape("softmax of a scalar".into()));
        }
        self.softmax(r - 1)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Var<T>> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.value().map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        let x = self.value_rc();
        Var::from_op("gelu", value, &[self], move |g| {
            let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let gx = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                    g * (cdf + x * pdf)
                })
                .collect();
            vec![Some(Tensor::raw(x.shape().to_vec(), gx))]
        })
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// (biased) variance, then applies `gamma`/`beta`. `eps` sits inside the
    /// square root.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::InvalidShape("layer_norm of a scalar".into()))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("layer_norm", &shape, gamma.shape()));
        }
        let rows = self.value().len() / c;
        let x = self.value().data();
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let eps = T::of(eps);
        let inv_c = T::of(1.0 / c as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gm[j] + bt[j];
            }
        }
        let value = Tensor::raw(shape.clone(), y);
        let gamma_v = gamma.value_rc();
        let (need_x, need_g, need_b) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        Var::from_op("layer_norm", value, &[self, gamma, beta], move |g| {
            let gd = g.data();
            let gm = gamma_v.data();
            let gx = need_x.then(|| {
                let mut gx = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let (mut m1, mut m2) = (T::zero(), T::zero());
                    for j in 0..c {
                        let dh = gd[r * c + j] * gm[j];
                        m1 += dh;
                        m2 += dh * xhat[r * c + j];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        let dh = gd[r * c + j] * gm[j];
                        gx[r * c + j] = rstd[r] * (dh - m1 - xhat[r * c + j] * m2);
                    }
                }
                Tensor::raw(shape.clone(), gx)
            });
            let gg = need_g.then(|| {
                let mut gg = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += gd[r * c + j] * xhat[r * c + j];
                    }
                }
                Tensor::raw(vec![c], gg)
            });
            let gb = need_b.then(|| {
                let mut gb = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += gd[r * c + j];
                    }
                }
                Tensor::raw(vec![c], gb)
            });
            vec![gx, gg, gb]
        })
    }

    // -----------------------------------------------------------------------
    // spatial ops on feature maps `[h, w, c]`

    /// Extracts every 3×3 neighbourhood (zero outside the map):
    /// `[h, w, c] → [h, w, 9*c]`, column `(ky*3 + kx)*c + ch`.
    pub fn im2col3x3(&self) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidShape(format!("im2col3x3 needs [h, w, c], got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let x = self.value().data();
        let mut cols = vec![T::zero(); h * w * 9 * c];
        par::for_each_chunk_mut(&mut cols, w * 9 * c, |y, row| {
            for xx in 0..w {
                let dst = &mut row[xx * 9 * c..(xx + 1) * 9 * c];
                for t in 0..9 {
                    let (sy, sx) = (y as isize + t as isize / 3 - 1, xx as isize + t as isize % 3 - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let p = sy as usize * w + sx as usize;
                    dst[t * c..(t + 1) * c].copy_from_slice(&x[p * c..(p + 1) * c]);
                }
            }
        });
        let value = Tensor::raw(vec![h, w, 9 * c], cols);
        Var::from_op("im2col3x3", value, &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); h * w * c];
            par::for_each_chunk_mut(&mut gx, w * c, |y, row| {
                for xx in 0..w {
                    let dst = &mut row[xx * c..(xx + 1) * c];
                    for t in 0..9 {
                        // pixel q whose tap t reads (y, xx)
                        let (qy, qx) = (y as isize - (t as isize / 3 - 1), xx as isize - (t as isize % 3 - 1));
                        if qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize {
                            continue;
                        }
                        let q = qy as usize * w + qx as usize;
                        let src = &gd[q * 9 * c + t * c..q * 9 * c + (t + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
            vec![Some(Tensor::raw(vec![h, w, c], gx))]
        })
    }

    /// Mean over non-overlapping `d×d` blocks: `[h, w, c] → [h/d, w/d, c]`.
    pub fn avg_pool(&self, d: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if d == 0 {
            return Err(Error::Config("pooling factor must be positive".into()));
        }
        if shape.len() != 3 || !shape[0].is_multiple_of(d) || !shape[1].is_multiple_of(d) {
            return Err(Error::shape("avg_pool", shape, &[d, d]));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h / d, w / d);
        let x = self.value().data();
        let inv = T::of(1.0 / (d * d) as f64);
        let mut out = vec![T::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for dy in 0..d {
                    for dx in 0..d {
                        let p = (oy * d + dy) * w + ox * d + dx;
                        for (o, &v) in dst.iter_mut().zip(&x[p * c..(p + 1) * c]) {
                            *o += v;
                        }
                    }
                }
                for o in dst.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let value = Tensor::raw(vec![ho, wo, c], out);
        Var::from_op("avg_pool", value, &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); h * w * c];
            for y in 0..h {
                for xx in 0..w {
                    let q = (y / d) * wo + xx / d;
                    let p = y * w + xx;
                    for j in 0..c {
                        gx[p * c + j] = gd[q * c + j] * inv;
                    }
                }
            }
            vec![Some(Tensor::raw(vec![h, w, c], gx))]
        })
    }

    // -----------------------------------------------------------------------
    // reductions and losses

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<T>> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op("sum", value, &[self], move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean absolute error against `target` (same shape), as a rank-0 tensor.
    pub fn l1_loss(&self, target: &Var<T>) -> Result<Var<T>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("l1_loss", self.shape(), target.shape()));
        }
        let n = T::of(self.value().len() as f64);
        let (p, t) = (self.value_rc(), target.value_rc());
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total / n);
        let (need_p, need_t) = (self.is_tracked(), target.is_tracked());
        Var::from_op("l1_loss", value, &[self, target], move |g| {
            let s = g.data()[0] / n;
            let sign: Vec<T> = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = a - b;
                    if d > T::zero() {
                        s
                    } else if d < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let gt = need_t.then(|| Tensor::raw(p.shape().to_vec(), sign.iter().map(|&x| -x).collect()));
            let gp = need_p.then(|| Tensor::raw(p.shape().to_vec(), sign));
            vec![gp, gt]
        })
    }
}

fn permute_tensor<T: Element>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = aligned_strides_full(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for_each_pair(&out_shape, &src_strides, &zero, |_, i, _| out.push(src[i]));
    Tensor::raw(out_shape, out)
}

/// Plain row-major strides (no broadcast zeroing).
fn aligned_strides_full(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}
