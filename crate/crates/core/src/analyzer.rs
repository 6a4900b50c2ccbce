//! Static parameter and multiply-add accounting.
//!
//! Counts follow the tensor engine exactly: every matrix product adds
//! `rows · inner · cols` and every attention call adds
//! `2 · queries · keys · channels`, so a static count equals the tally of
//! an instrumented forward pass on the same input.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{tile_spans, ModelConfig};

/// Printed at the top of every report.
pub const CONVENTION: &str = "one Multi-Add = one multiply-accumulate; counted: linear and 3x3 conv weight products \
(bias excluded), attention QK^T and softmax(.)V; not counted: softmax, norms, activations, residual adds, \
resampling; category attention at its sub-category upper bound unless observed pairs are given";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRecord {
    pub path: String,
    pub params: u64,
    pub multi_adds: u64,
}

/// Ordered per-layer costs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCostLedger {
    pub records: Vec<CostRecord>,
    /// LR input the multiply-adds refer to.
    pub input: (usize, usize),
}

impl OpCostLedger {
    pub fn total_params(&self) -> u64 {
        self.records.iter().map(|r| r.params).sum()
    }

    pub fn total_multi_adds(&self) -> u64 {
        self.records.iter().map(|r| r.multi_adds).sum()
    }

    /// `layer,params,multi_adds` rows and a closing `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,multi_adds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.path, r.params, r.multi_adds);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_multi_adds());
        s
    }

    /// Aligned table with the counting convention as a header. Only the
    /// totals are listed unless `per_layer`.
    pub fn to_text(&self, per_layer: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# convention: {CONVENTION}");
        let _ = writeln!(s, "# input: {}x{} LR", self.input.1, self.input.0);
        let rows: Vec<(&str, u64, u64)> = if per_layer {
            self.records.iter().map(|r| (r.path.as_str(), r.params, r.multi_adds)).collect()
        } else {
            Vec::new()
        };
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>18}", "layer", "params", "multi_adds");
        for (p, a, b) in rows {
            let _ = writeln!(s, "{p:<width$}  {a:>12}  {b:>18}");
        }
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>18}", "total", self.total_params(), self.total_multi_adds());
        let _ = writeln!(
            s,
            "# total: {:.1}K params, {:.2}G multi-adds",
            self.total_params() as f64 / 1e3,
            self.total_multi_adds() as f64 / 1e9
        );
        s
    }
}

/// How category attention is counted.
#[derive(Debug, Clone, Copy)]
pub enum CsaPairs<'a> {
    /// Worst case over categorizations: as many full sub-groups as fit.
    UpperBound,
    /// `Σ queries·keys` per category-attention call, in execution order, as
    /// recorded by an instrumented forward.
    Observed(&'a [u64]),
}

/// Largest `Σ len²` over sub-groups of at most `sub` tokens covering `n`.
pub fn csa_pair_bound(n: usize, sub: usize) -> u64 {
    let (full, rest) = (n / sub, n % sub);
    (full * sub * sub + rest * rest) as u64
}

pub fn linear_params(input: usize, output: usize, bias: bool) -> u64 {
    (input * output + if bias { output } else { 0 }) as u64
}

pub fn conv3x3_params(input: usize, output: usize) -> u64 {
    (9 * input * output + output) as u64
}

/// `out · H · W · in · 9`.
pub fn conv3x3_multi_adds(input: usize, output: usize, h: usize, w: usize) -> u64 {
    (output * h * w * input * 9) as u64
}

/// `QKᵀ` plus `softmax(·)V` for one attention call.
pub fn attention_multi_adds(queries: usize, keys: usize, channels: usize) -> u64 {
    (2 * queries * keys * channels) as u64
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

struct Builder<'a, 'b> {
    records: Vec<CostRecord>,
    pairs: CsaPairs<'a>,
    next_pair: &'b mut usize,
}

impl Builder<'_, '_> {
    fn push(&mut self, path: String, params: u64, multi_adds: u64) {
        self.records.push(CostRecord { path, params, multi_adds });
    }

    fn linear(&mut self, path: String, rows: usize, input: usize, output: usize) {
        self.push(path, linear_params(input, output, true), (rows * input * output) as u64);
    }

    fn ffn(&mut self, path: &str, rows: usize, c: usize, hidden: usize) {
        self.linear(format!("{path}.fc1"), rows, c, hidden);
        self.linear(format!("{path}.fc2"), rows, hidden, c);
    }

    fn csa_pairs(&mut self, n: usize, sub: usize) -> Result<u64> {
        match self.pairs {
            CsaPairs::UpperBound => Ok(csa_pair_bound(n, sub)),
            CsaPairs::Observed(v) => {
                let p = v.get(*self.next_pair).copied().ok_or_else(|| {
                    Error::Contract(format!("only {} observed category-attention calls", v.len()))
                })?;
                *self.next_pair += 1;
                Ok(p)
            }
        }
    }
}

/// Costs of one forward pass on an `h×w` LR input without tiling.
fn forward_costs(cfg: &ModelConfig, h: usize, w: usize, pairs: CsaPairs, next_pair: &mut usize) -> Result<Vec<CostRecord>> {
    let mut b = Builder { records: Vec::new(), pairs, next_pair };
    let m = cfg.pad_multiple();
    let (h, w) = (round_up(h, m), round_up(w, m));
    let n = h * w;
    let c = cfg.channels;
    let hidden = c * cfg.mlp_ratio;
    b.push("encoder".into(), conv3x3_params(3, c), conv3x3_multi_adds(3, c, h, w));
    for i in 0..cfg.num_rg {
        for j in 0..cfg.cpb_per_rg {
            let g = format!("rg.{i}.cpb.{j}.gapl");
            let d = cfg.downscale;
            let anchors = h.div_ceil(d) * w.div_ceil(d);
            for l in ["q", "k", "v"] {
                b.linear(format!("{g}.{l}"), n, c, c);
            }
            b.linear(format!("{g}.a"), anchors, c, c);
            b.push(format!("{g}.anchor_attention"), 0, attention_multi_adds(anchors, n, c));
            b.linear(format!("{g}.kp"), anchors, c, c);
            b.linear(format!("{g}.vp"), anchors, c, c);
            b.push(format!("{g}.prompt_attention"), 0, attention_multi_adds(n, anchors, c));
            b.linear(format!("{g}.proj"), n, c, c);
            b.push(format!("{g}.norm"), 2 * c as u64, 0);
            b.ffn(&format!("{g}.ffn"), n, c, hidden);
            for side in ["lpl_coarse", "lpl_fine"] {
                let l = format!("rg.{i}.cpb.{j}.{side}");
                let win = cfg.window_size;
                let (hp, wp) = (round_up(h, win), round_up(w, win));
                b.linear(format!("{l}.qkv"), n, c, 3 * c);
                b.push(format!("{l}.wsa"), 0, attention_multi_adds(hp * wp, win * win, c));
                if cfg.relative_position_bias {
                    b.push(format!("{l}.wsa.rpb"), ((2 * win - 1).pow(2) * cfg.heads) as u64, 0);
                }
                b.linear(format!("{l}.wsa.proj"), n, c, c);
                let pairs = b.csa_pairs(n, cfg.sub_category_size)?;
                b.push(format!("{l}.csa"), 0, 2 * pairs * c as u64);
                b.linear(format!("{l}.csa.proj"), n, c, c);
                b.push(format!("{l}.norm"), 2 * c as u64, 0);
                b.ffn(&format!("{l}.ffn"), n, c, hidden);
            }
        }
        b.push(format!("rg.{i}.conv"), conv3x3_params(c, c), conv3x3_multi_adds(c, c, h, w));
    }
    b.push("trunk".into(), conv3x3_params(c, c), conv3x3_multi_adds(c, c, h, w));
    let out = 3 * cfg.scale * cfg.scale;
    b.push("decoder".into(), conv3x3_params(c, out), conv3x3_multi_adds(c, out, h, w));
    Ok(b.records)
}

/// Per-layer ledger for inference on an `lr_h×lr_w` input, tiled and padded
/// the same way as `PromptSr::upscale`.
pub fn ledger(cfg: &ModelConfig, lr_h: usize, lr_w: usize, pairs: CsaPairs) -> Result<OpCostLedger> {
    cfg.validate()?;
    if lr_h == 0 || lr_w == 0 {
        return Err(Error::Contract("empty input".into()));
    }
    let t = cfg.tile;
    let (ys, xs) = if t == 0 || (lr_h <= t && lr_w <= t) {
        (vec![(0, lr_h)], vec![(0, lr_w)])
    } else {
        (tile_spans(lr_h, t), tile_spans(lr_w, t))
    };
    let mut next = 0;
    let mut acc: Option<Vec<CostRecord>> = None;
    for &(_, th) in &ys {
        for &(_, tw) in &xs {
            let recs = forward_costs(cfg, th, tw, pairs, &mut next)?;
            match acc.as_mut() {
                None => acc = Some(recs),
                Some(a) => {
                    for (dst, r) in a.iter_mut().zip(recs) {
                        dst.multi_adds += r.multi_adds;
                    }
                }
            }
        }
    }
    if let CsaPairs::Observed(v) = pairs {
        if next != v.len() {
            return Err(Error::Contract(format!("{} observed category-attention calls, {next} expected", v.len())));
        }
    }
    Ok(OpCostLedger {
        records: acc.expect("at least one tile"),
        input: (lr_h, lr_w),
    })
}

/// Trainable scalars of the network `cfg` describes.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(forward_costs(cfg, 1, 1, CsaPairs::UpperBound, &mut 0)?
        .iter()
        .map(|r| r.params)
        .sum())
}

/// Multiply-adds to produce an `hr_w×hr_h` output.
pub fn count_multi_adds(cfg: &ModelConfig, hr_w: usize, hr_h: usize) -> Result<u64> {
    let s = cfg.scale;
    if !hr_w.is_multiple_of(s) || !hr_h.is_multiple_of(s) {
        return Err(Error::Contract(format!("{hr_w}x{hr_h} output is not divisible by scale {s}")));
    }
    Ok(ledger(cfg, hr_h / s, hr_w / s, CsaPairs::UpperBound)?.total_multi_adds())
}

/// Attention mechanism probed for its scaling with map size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    /// Global self-attention over all tokens.
    Sa,
    /// Window self-attention with a fixed window.
    Wsa,
    /// Global anchor prompting with a fixed anchor grid.
    Gapl,
    /// Global anchor prompting with a fixed downscale factor.
    GaplFixedD,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Sa => "SA",
            Mechanism::Wsa => "WSA",
            Mechanism::Gapl => "GAPL",
            Mechanism::GaplFixedD => "GAPL(d fixed)",
        }
    }
}

/// Fixed quantities of a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSettings {
    pub channels: usize,
    pub window: usize,
    /// Anchor grid side for [`Mechanism::Gapl`].
    pub anchor_grid: usize,
    /// Downscale factor for [`Mechanism::GaplFixedD`].
    pub downscale: usize,
    pub mlp_ratio: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let r = ModelConfig::reference(4);
        ProbeSettings {
            channels: r.channels,
            window: r.window_size,
            anchor_grid: 16,
            downscale: r.downscale,
            mlp_ratio: r.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeRow {
    /// Map side; the map is `side×side` tokens.
    pub side: usize,
    pub anchors: usize,
    /// Attention products only.
    pub attention: u64,
    /// Attention plus the layer's projections (and FFN for GAPL).
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTable {
    pub mechanism: Mechanism,
    pub rows: Vec<ProbeRow>,
    /// Least-squares slope of log(attention) against log(tokens).
    pub slope: f64,
    pub r_squared: f64,
}

/// Layer costs at one map side. SA and WSA cover a qkv projection, the
/// attention and an output projection. GAPL covers its whole layer.
pub fn probe_row(mech: Mechanism, side: usize, ps: &ProbeSettings) -> Result<ProbeRow> {
    let c = ps.channels;
    let n = side * side;
    let lin = |rows: usize| (rows * c * c) as u64;
    let row = match mech {
        Mechanism::Sa => {
            let attention = attention_multi_adds(n, n, c);
            ProbeRow { side, anchors: 0, attention, total: attention + lin(n) * 4 }
        }
        Mechanism::Wsa => {
            let p = round_up(side, ps.window);
            let attention = attention_multi_adds(p * p, ps.window * ps.window, c);
            ProbeRow { side, anchors: 0, attention, total: attention + lin(n) * 4 }
        }
        Mechanism::Gapl | Mechanism::GaplFixedD => {
            let d = match mech {
                Mechanism::Gapl => {
                    if !side.is_multiple_of(ps.anchor_grid) {
                        return Err(Error::Contract(format!(
                            "side {side} is not a multiple of the anchor grid {}",
                            ps.anchor_grid
                        )));
                    }
                    side / ps.anchor_grid
                }
                _ => ps.downscale,
            };
            let m = side.div_ceil(d).pow(2);
            let attention = attention_multi_adds(m, n, c) + attention_multi_adds(n, m, c);
            let ffn = 2 * (n * c * c * ps.mlp_ratio) as u64;
            ProbeRow { side, anchors: m, attention, total: attention + lin(n) * 4 + lin(m) * 3 + ffn }
        }
    };
    Ok(row)
}

/// Counts at every side in `sides` and the log-log slope of the attention
/// term against the token count.
pub fn asymptotic_probe(mech: Mechanism, sides: &[usize], ps: &ProbeSettings) -> Result<ProbeTable> {
    if sides.len() < 3 {
        return Err(Error::Contract(format!("need at least 3 sizes, got {}", sides.len())));
    }
    if sides.windows(2).any(|w| w[0] >= w[1]) || sides[0] == 0 {
        return Err(Error::Contract("sizes must be positive and strictly increasing".into()));
    }
    let rows = sides.iter().map(|&s| probe_row(mech, s, ps)).collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (((r.side * r.side) as f64).ln(), (r.attention as f64).ln()))
        .collect();
    let (slope, r_squared) = fit_line(&pts);
    Ok(ProbeTable { mechanism: mech, rows, slope, r_squared })
}

/// Least-squares slope and coefficient of determination.
pub fn fit_line(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

impl ProbeTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mechanism,side,tokens,anchors,attention_multi_adds,total_multi_adds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.mechanism.name(),
                r.side,
                r.side * r.side,
                r.anchors,
                r.attention,
                r.total
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{}: slope {:.4}, R^2 {:.6}\n{:>6}  {:>8}  {:>8}  {:>16}  {:>16}\n",
            self.mechanism.name(),
            self.slope,
            self.r_squared,
            "side",
            "tokens",
            "anchors",
            "attention",
            "total"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6}  {:>8}  {:>8}  {:>16}  {:>16}",
                r.side,
                r.side * r.side,
                r.anchors,
                r.attention,
                r.total
            );
        }
        s
    }
}

/// `(d, params, multi-adds)` for each downscale factor in `ds`, everything
/// else taken from `base`.
pub fn downscale_ablation(base: &ModelConfig, ds: &[usize], hr_w: usize, hr_h: usize) -> Result<Vec<(usize, u64, u64)>> {
    ds.iter()
        .map(|&d| {
            let cfg = ModelConfig { downscale: d, ..base.clone() };
            Ok((d, count_params(&cfg)?, count_multi_adds(&cfg, hr_w, hr_h)?))
        })
        .collect()
}
