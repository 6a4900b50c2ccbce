use rand::Rng;

use crate::attention::{categorize, csa, segmented_attention, wsa, CategoryAssignment, Orientation, Segment};
use crate::error::{Error, Result};
use crate::nn::{avg_pool_downscale, pad_to_multiple, Bound, Ffn, LayerNorm, Linear, ParamStore, RelativePositionBias};
use crate::tensor::{Element, Tensor, Var};

use super::ModelConfig;

/// What a global anchor prompting layer hands to the rest of its block and
/// to the next block of the same residual group.
#[derive(Clone)]
pub struct AnchorPromptState<T> {
    /// Anchor prompts `[M, C]`, `M = HW/d²`.
    pub p: Var<T>,
    /// Anchor-to-token similarity `[M, HW]`.
    pub m_coarse: Tensor<T>,
    /// Token-to-anchor similarity `[HW, M]`.
    pub m_fine: Tensor<T>,
    pub rg_index: usize,
    pub cpb_index: usize,
    /// Whether the previous block's prompts were blended in.
    pub carried: bool,
}

fn tokens<T: Element>(x: &Var<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::InvalidShape(format!("expected [h, w, c], got {:?}", x.shape()))),
    }
}

/// Global anchor prompting layer.
#[derive(Debug, Clone)]
pub struct Gapl {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub a: Linear,
    pub kp: Linear,
    pub vp: Linear,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub ffn: Ffn,
    pub heads: usize,
    pub downscale: usize,
    /// Weight of the previous block's prompts in the blend.
    pub alpha: f64,
}

impl Gapl {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), c, c, true, rng);
        let (q, k, v, a, kp, vp, proj) = (lin("q")?, lin("k")?, lin("v")?, lin("a")?, lin("kp")?, lin("vp")?, lin("proj")?);
        Ok(Gapl {
            q,
            k,
            v,
            a,
            kp,
            vp,
            proj,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            ffn: Ffn::new(store, &format!("{name}.ffn"), c, c * cfg.mlp_ratio, rng)?,
            heads: cfg.heads,
            downscale: cfg.downscale,
            alpha: cfg.alpha,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.a, &self.kp, &self.vp, &self.proj]
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + self.norm.param_count()
            + self.ffn.param_count()
    }

    /// Builds anchors from the pooled map, gathers anchor prompts from every
    /// token, optionally blends in the previous block's prompts, and lets
    /// every token attend to the prompted anchors.
    pub fn forward<T: Element>(
        &self,
        p: &Bound<T>,
        x: &Var<T>,
        prev: Option<&AnchorPromptState<T>>,
    ) -> Result<(Var<T>, AnchorPromptState<T>)> {
        let (h, w, c) = tokens(x)?;
        if h < self.downscale || w < self.downscale {
            return Err(Error::Contract(format!("{h}x{w} map is smaller than the anchor downscale {}", self.downscale)));
        }
        let (padded, _) = pad_to_multiple(x, self.downscale)?;
        let pooled = avg_pool_downscale(&padded, self.downscale)?;
        let m = pooled.shape()[0] * pooled.shape()[1];
        let anchors = self.a.forward(p, &pooled)?.reshape(&[m, c])?;
        let flat = x.reshape(&[h * w, c])?;
        let (q, k, v) = (self.q.forward(p, &flat)?, self.k.forward(p, &flat)?, self.v.forward(p, &flat)?);

        let gathered = segmented_attention(&anchors, &k, &v, self.heads, &[Segment { q: 0..m, k: 0..h * w }], None, true)?;
        let mut prompts = gathered.out;
        if let Some(prev) = prev {
            if prev.p.shape() != prompts.shape() {
                return Err(Error::Contract(format!(
                    "anchor prompts changed shape within a group: {:?} then {:?}",
                    prev.p.shape(),
                    prompts.shape()
                )));
            }
            prompts = prev.p.scale(self.alpha)?.add(&prompts.scale(1.0 - self.alpha)?)?;
        }
        let keys = self.kp.forward(p, &prompts)?.add(&anchors)?;
        let values = self.vp.forward(p, &prompts)?;
        let prompted = segmented_attention(&q, &keys, &values, self.heads, &[Segment { q: 0..h * w, k: 0..m }], None, true)?;

        let x1 = x.add(&self.proj.forward(p, &prompted.out)?.reshape(&[h, w, c])?)?;
        let out = x1.add(&self.ffn.forward(p, &self.norm.forward(p, &x1)?)?)?;
        let state = AnchorPromptState {
            p: prompts,
            m_coarse: gathered.logits.expect("requested"),
            m_fine: prompted.logits.expect("requested"),
            rg_index: prev.map_or(0, |s| s.rg_index),
            cpb_index: prev.map_or(0, |s| s.cpb_index + 1),
            carried: prev.is_some(),
        };
        Ok((out, state))
    }
}

/// Local prompting layer: window attention plus category attention driven
/// by a similarity map, sharing one query/key/value projection.
#[derive(Debug, Clone)]
pub struct Lpl {
    pub qkv: Linear,
    pub wsa_proj: Linear,
    pub csa_proj: Linear,
    pub rpb: Option<RelativePositionBias>,
    pub norm: LayerNorm,
    pub ffn: Ffn,
    pub heads: usize,
    pub window: usize,
    pub sub_size: usize,
    pub orientation: Orientation,
}

impl Lpl {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        orientation: Orientation,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(Lpl {
            qkv: Linear::new(store, &format!("{name}.qkv"), c, 3 * c, true, rng)?,
            wsa_proj: Linear::new(store, &format!("{name}.wsa.proj"), c, c, true, rng)?,
            csa_proj: Linear::new(store, &format!("{name}.csa.proj"), c, c, true, rng)?,
            rpb: if cfg.relative_position_bias {
                Some(RelativePositionBias::new(store, &format!("{name}.wsa.rpb"), cfg.window_size, cfg.heads, rng)?)
            } else {
                None
            },
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            ffn: Ffn::new(store, &format!("{name}.ffn"), c, c * cfg.mlp_ratio, rng)?,
            heads: cfg.heads,
            window: cfg.window_size,
            sub_size: cfg.sub_category_size,
            orientation,
        })
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count()
            + self.wsa_proj.param_count()
            + self.csa_proj.param_count()
            + self.rpb.as_ref().map_or(0, RelativePositionBias::param_count)
            + self.norm.param_count()
            + self.ffn.param_count()
    }

    /// `x + WSA(x) + CSA(x, categories of m)`, then a normalized FFN
    /// residual.
    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>, m: &Tensor<T>) -> Result<Var<T>> {
        self.forward_assigned(p, x, &categorize(m, self.orientation)?)
    }

    /// [`Lpl::forward`] with the categories given directly.
    pub fn forward_assigned<T: Element>(&self, p: &Bound<T>, x: &Var<T>, assignment: &CategoryAssignment) -> Result<Var<T>> {
        let (h, w, _) = tokens(x)?;
        if assignment.num_tokens() != h * w {
            return Err(Error::Contract(format!(
                "similarity map covers {} tokens, map has {}",
                assignment.num_tokens(),
                h * w
            )));
        }
        let qkv = self.qkv.forward(p, x)?;
        let bias = self.rpb.as_ref().map(|b| b.forward(p)).transpose()?;
        let local = self.wsa_proj.forward(p, &wsa(&qkv, self.heads, self.window, bias.as_ref())?)?;
        let grouped = self.csa_proj.forward(p, &csa(&qkv, self.heads, assignment, self.sub_size)?)?;
        let x1 = x.add(&local)?.add(&grouped)?;
        x1.add(&self.ffn.forward(p, &self.norm.forward(p, &x1)?)?)
    }
}

/// Cascade prompting block: one global layer, then coarse and fine local
/// layers.
#[derive(Debug, Clone)]
pub struct Cpb {
    pub gapl: Gapl,
    pub coarse: Lpl,
    pub fine: Lpl,
}

impl Cpb {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Cpb {
            gapl: Gapl::new(store, &format!("{name}.gapl"), cfg, rng)?,
            coarse: Lpl::new(store, &format!("{name}.lpl_coarse"), cfg, Orientation::Coarse, rng)?,
            fine: Lpl::new(store, &format!("{name}.lpl_fine"), cfg, Orientation::Fine, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.gapl.param_count() + self.coarse.param_count() + self.fine.param_count()
    }

    pub fn forward<T: Element>(
        &self,
        p: &Bound<T>,
        x: &Var<T>,
        prev: Option<&AnchorPromptState<T>>,
    ) -> Result<(Var<T>, AnchorPromptState<T>)> {
        let (xp, state) = self.gapl.forward(p, x, prev)?;
        let xc = self.coarse.forward(p, &xp, &state.m_coarse)?;
        let y = self.fine.forward(p, &xc, &state.m_fine)?;
        Ok((y, state))
    }

    /// [`Cpb::forward`] with optional fixed (coarse, fine) categories in
    /// place of the ones derived from the similarity maps. Returns the
    /// categories actually used.
    pub fn forward_frozen<T: Element>(
        &self,
        p: &Bound<T>,
        x: &Var<T>,
        prev: Option<&AnchorPromptState<T>>,
        frozen: Option<&(CategoryAssignment, CategoryAssignment)>,
    ) -> Result<(Var<T>, AnchorPromptState<T>, (CategoryAssignment, CategoryAssignment))> {
        let (xp, state) = self.gapl.forward(p, x, prev)?;
        let cats = match frozen {
            Some(c) => c.clone(),
            None => (
                categorize(&state.m_coarse, Orientation::Coarse)?,
                categorize(&state.m_fine, Orientation::Fine)?,
            ),
        };
        let xc = self.coarse.forward_assigned(p, &xp, &cats.0)?;
        let y = self.fine.forward_assigned(p, &xc, &cats.1)?;
        Ok((y, state, cats))
    }
}
