use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-6;

/// Normal(0, std) samples redrawn until they fall within two deviations.
fn trunc_normal<T: Element, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

/// `y = x Wᵀ + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("{name}: linear dims must be positive")));
        }
        let weight = store.add(format!("{name}.weight"), trunc_normal(&[out_dim, in_dim], 0.02, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.matmul_t(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

/// Same-size 3×3 convolution (zero padding 1) on `[h, w, c]` maps.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3x3 {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::Config(format!("{name}: conv channels must be positive")));
        }
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_ch, in_ch, 3, 3], -bound, bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[out_ch], -bound, bound, rng));
        Ok(Conv3x3 {
            weight,
            bias,
            in_ch,
            out_ch,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * 9 + self.out_ch
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_ch {
            return Err(Error::shape("conv3x3", s, &[self.out_ch, self.in_ch, 3, 3]));
        }
        // [out, in, ky, kx] -> [out, (ky*3 + kx)*in + ch] to match im2col columns.
        let w = p
            .var(self.weight)
            .permute(&[0, 2, 3, 1])?
            .reshape(&[self.out_ch, 9 * self.in_ch])?;
        x.im2col3x3()?.matmul_t(&w)?.add(p.var(self.bias))
    }
}

/// Affine layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            weight: store.add(format!("{name}.weight"), Tensor::ones(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(p.var(self.weight), p.var(self.bias), LN_EPS)
    }
}

/// Two linear layers with GELU between: `C → hidden → C`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Ffn {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu()?)
    }
}

/// Learned per-head bias indexed by the relative offset of two tokens in a
/// `w×w` window.
#[derive(Debug, Clone)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub window: usize,
    pub heads: usize,
    index: Rc<[usize]>,
}

impl RelativePositionBias {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        window: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if window == 0 || heads == 0 {
            return Err(Error::Config(format!("{name}: window and heads must be positive")));
        }
        let span = 2 * window - 1;
        let table = store.add(format!("{name}.table"), trunc_normal(&[span * span, heads], 0.02, rng));
        let n = window * window;
        let mut index = vec![0; heads * n * n];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    let dy = i / window + window - 1 - j / window;
                    let dx = i % window + window - 1 - j % window;
                    index[(h * n + i) * n + j] = (dy * span + dx) * heads + h;
                }
            }
        }
        Ok(RelativePositionBias {
            table,
            window,
            heads,
            index: index.into(),
        })
    }

    pub fn param_count(&self) -> usize {
        (2 * self.window - 1).pow(2) * self.heads
    }

    /// Bias of shape `[heads, w², w²]`, shared by every window.
    pub fn forward<T: Element>(&self, p: &Bound<T>) -> Result<Var<T>> {
        let n = self.window * self.window;
        p.var(self.table).gather(self.index.clone(), &[self.heads, n, n])
    }
}
