use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnchorPromptState, Cpb, ModelConfig};
use crate::attention::CategoryAssignment;
use crate::error::{Error, Result};
use crate::nn::{crop, pad_to_multiple, pixel_shuffle, Bound, Conv3x3, ParamStore};
use crate::tensor::{Element, Tensor, Var};

/// Fixed per-channel mean subtracted from the input and added back to the
/// output (the DIV2K training-set RGB mean).
pub const RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

/// `N` cascade prompting blocks and a closing convolution, with a skip
/// connection around the group.
#[derive(Debug, Clone)]
pub struct ResidualGroup {
    pub blocks: Vec<Cpb>,
    pub conv: Conv3x3,
}

/// Per-block record of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTrace {
    pub rg_index: usize,
    pub cpb_index: usize,
    /// Whether the block blended in the previous block's anchor prompts.
    pub carried: bool,
    /// Number of anchors (rows of the prompt matrix).
    pub anchors: usize,
}

/// The full network: shallow encoder, residual groups, trunk convolution,
/// global residual and a pixel-shuffle decoder.
#[derive(Debug, Clone)]
pub struct PromptSr<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    pub encoder: Conv3x3,
    pub groups: Vec<ResidualGroup>,
    pub trunk: Conv3x3,
    pub decoder: Conv3x3,
}

impl<T: Element> PromptSr<T> {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let encoder = Conv3x3::new(&mut store, "encoder", 3, c, &mut rng)?;
        let mut groups = Vec::with_capacity(config.num_rg);
        for i in 0..config.num_rg {
            let blocks = (0..config.cpb_per_rg)
                .map(|j| Cpb::new(&mut store, &format!("rg.{i}.cpb.{j}"), &config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let conv = Conv3x3::new(&mut store, &format!("rg.{i}.conv"), c, c, &mut rng)?;
            groups.push(ResidualGroup { blocks, conv });
        }
        let trunk = Conv3x3::new(&mut store, "trunk", c, c, &mut rng)?;
        let decoder = Conv3x3::new(&mut store, "decoder", c, 3 * config.scale * config.scale, &mut rng)?;
        Ok(PromptSr {
            config,
            params: store,
            encoder,
            groups,
            trunk,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same network in another precision.
    pub fn cast<U: Element>(&self) -> PromptSr<U> {
        PromptSr {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            groups: self.groups.clone(),
            trunk: self.trunk.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `[h, w, 3] → [s·h, s·w, 3]` in one pass (no tiling).
    pub fn forward(&self, p: &Bound<T>, img: &Var<T>) -> Result<Var<T>> {
        self.forward_traced(p, img).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, p: &Bound<T>, img: &Var<T>) -> Result<(Var<T>, Vec<BlockTrace>)> {
        self.forward_frozen(p, img, None).map(|(y, t, _)| (y, t))
    }

    /// Forward pass where every block's (coarse, fine) categories can be
    /// fixed in advance, one pair per block in execution order. Returns the
    /// pairs used. Fixing them makes the output a smooth function of the
    /// parameters, which finite-difference checks need.
    #[allow(clippy::type_complexity)]
    pub fn forward_frozen(
        &self,
        p: &Bound<T>,
        img: &Var<T>,
        frozen: Option<&[(CategoryAssignment, CategoryAssignment)]>,
    ) -> Result<(Var<T>, Vec<BlockTrace>, Vec<(CategoryAssignment, CategoryAssignment)>)> {
        let blocks = self.groups.iter().map(|g| g.blocks.len()).sum::<usize>();
        if let Some(f) = frozen {
            if f.len() != blocks {
                return Err(Error::Contract(format!("{} category pairs for {blocks} blocks", f.len())));
            }
        }
        let mut used = Vec::with_capacity(blocks);
        let (h, w) = match *img.shape() {
            [h, w, 3] => (h, w),
            _ => return Err(Error::InvalidShape(format!("expected [h, w, 3] image, got {:?}", img.shape()))),
        };
        if h == 0 || w == 0 {
            return Err(Error::Contract("empty image".into()));
        }
        let mean = Var::constant(Tensor::from_fn(&[3], |i| T::of(RGB_MEAN[i])));
        let (padded, _) = pad_to_multiple(&img.sub(&mean)?, self.config.pad_multiple())?;
        let x0 = self.encoder.forward(p, &padded)?;
        let mut x = x0.clone();
        let mut trace = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            let skip = x.clone();
            let mut state: Option<AnchorPromptState<T>> = None;
            for (j, block) in g.blocks.iter().enumerate() {
                let fixed = frozen.map(|f| &f[used.len()]);
                let (y, mut s, cats) = block.forward_frozen(p, &x, state.as_ref(), fixed)?;
                used.push(cats);
                s.rg_index = i;
                s.cpb_index = j;
                trace.push(BlockTrace {
                    rg_index: i,
                    cpb_index: j,
                    carried: s.carried,
                    anchors: s.p.shape()[0],
                });
                x = y;
                state = Some(s);
            }
            x = g.conv.forward(p, &x)?.add(&skip)?;
        }
        let x_df = self.trunk.forward(p, &x)?;
        let y = pixel_shuffle(&self.decoder.forward(p, &x_df.add(&x0)?)?, self.config.scale)?.add(&mean)?;
        let s = self.config.scale;
        Ok((crop(&y, s * h, s * w)?, trace, used))
    }

    /// Inference on a plain `[h, w, 3]` tensor, split into independent
    /// tiles of `config.tile` pixels when the image is larger than that.
    pub fn upscale(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.params.bind(None);
        let (h, w) = match *img.shape() {
            [h, w, 3] => (h, w),
            _ => return Err(Error::InvalidShape(format!("expected [h, w, 3] image, got {:?}", img.shape()))),
        };
        let t = self.config.tile;
        if t == 0 || (h <= t && w <= t) {
            return Ok(self.forward(&p, &Var::constant(img.clone()))?.value().clone());
        }
        let s = self.config.scale;
        let (oh, ow) = (s * h, s * w);
        let mut out = vec![T::zero(); oh * ow * 3];
        for (y0, th) in tile_spans(h, t) {
            for (x0, tw) in tile_spans(w, t) {
                let tile = Tensor::from_fn(&[th, tw, 3], |i| {
                    let (ty, tx, ch) = (i / (tw * 3), (i / 3) % tw, i % 3);
                    img.data()[((y0 + ty) * w + x0 + tx) * 3 + ch]
                });
                let sr = self.forward(&p, &Var::constant(tile))?;
                let sd = sr.value().data();
                for ty in 0..s * th {
                    let dst = ((s * y0 + ty) * ow + s * x0) * 3;
                    out[dst..dst + s * tw * 3].copy_from_slice(&sd[ty * s * tw * 3..(ty + 1) * s * tw * 3]);
                }
            }
        }
        Tensor::new(&[oh, ow, 3], out)
    }
}

/// `(start, len)` of consecutive tiles of at most `tile` covering `n`.
pub fn tile_spans(n: usize, tile: usize) -> Vec<(usize, usize)> {
    if tile == 0 || n <= tile {
        return vec![(0, n)];
    }
    (0..n).step_by(tile).map(|s| (s, tile.min(n - s))).collect()
}
