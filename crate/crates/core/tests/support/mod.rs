//! Brute-force oracles and seeded invariant checks shared by the test
//! targets. Everything here is written from the definitions, not from the
//! library's implementation.
#![allow(dead_code)]

use promptsr::attention::{categorize, csa, wsa, CategoryAssignment, Orientation};
use promptsr::data::{rgb_to_y, ImageBuffer};
use promptsr::model::{AnchorPromptState, Gapl, ModelConfig, PromptSr, RGB_MEAN};
use promptsr::nn::{crop, pad_to_multiple, pixel_shuffle, pixel_unshuffle, window_merge, window_partition, ParamStore};
use promptsr::tensor::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

// ---------------------------------------------------------------------------
// oracles

/// Rows `qs` attend to rows `ks`; `q`, `k`, `v` are row-major `[n, c]`.
pub fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], c: usize, heads: usize, qs: &[usize], ks: &[usize]) -> Vec<Vec<f64>> {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    qs.iter()
        .map(|&i| {
            let mut out = vec![0.0; c];
            for h in 0..heads {
                let logits: Vec<f64> = ks
                    .iter()
                    .map(|&j| (0..dh).map(|d| q[i * c + h * dh + d] * k[j * c + h * dh + d]).sum::<f64>() * scale)
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, &j) in e.iter().zip(ks) {
                    for d in 0..dh {
                        out[h * dh + d] += w / z * v[j * c + h * dh + d];
                    }
                }
            }
            out
        })
        .collect()
}

fn keys(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Edge-repeating reflection into `0..n`.
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D taps for output sample `o` of `out` from `inp` samples.
fn taps(o: usize, inp: usize, out: usize) -> Vec<(usize, f64)> {
    let s = out as f64 / inp as f64;
    let k = s.min(1.0);
    let centre = (o as f64 + 0.5) / s - 0.5;
    let reach = 2.0 / k;
    let mut t = Vec::new();
    let mut j = (centre - reach).floor() as i64 - 1;
    while (j as f64) <= centre + reach + 1.0 {
        let w = k * keys(k * (centre - j as f64));
        if w != 0.0 {
            t.push((reflect(j, inp as i64), w));
        }
        j += 1;
    }
    let z: f64 = t.iter().map(|p| p.1).sum();
    t.into_iter().map(|(i, w)| (i, w / z)).collect()
}

/// Cubic convolution (a = -0.5, widened when shrinking) as a direct 2-D
/// double sum per output pixel.
pub fn bicubic_oracle(img: &ImageBuffer, out_w: usize, out_h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(out_w, out_h, |ox, oy| {
        let (tx, ty) = (taps(ox, img.width(), out_w), taps(oy, img.height(), out_h));
        let mut px = [0u8; 3];
        for (ch, slot) in px.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(ix, wx) in &tx {
                let mut col = 0.0;
                for &(iy, wy) in &ty {
                    col += wy * img.pixel(ix, iy)[ch] as f64;
                }
                acc += wx * col;
            }
            *slot = acc.round().clamp(0.0, 255.0) as u8;
        }
        px
    })
    .unwrap()
}

fn y_of(p: [u8; 3]) -> f64 {
    16.0 + (65.738 * p[0] as f64 + 129.057 * p[1] as f64 + 25.064 * p[2] as f64) / 256.0
}

/// PSNR from a direct sum over the shaved Y planes.
pub fn psnr_oracle(a: &ImageBuffer, b: &ImageBuffer, crop: usize) -> f64 {
    let mut se = 0.0;
    let mut n = 0.0;
    for y in crop..a.height() - crop {
        for x in crop..a.width() - crop {
            let d = y_of(a.pixel(x, y)) - y_of(b.pixel(x, y));
            se += d * d;
            n += 1.0;
        }
    }
    10.0 * (255.0f64.powi(2) / (se / n)).log10()
}

/// SSIM by sliding an 11×11 Gaussian window over every valid position.
pub fn ssim_oracle(a: &ImageBuffer, b: &ImageBuffer, crop: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let (w, h) = (a.width() - 2 * crop, a.height() - 2 * crop);
    let mut total = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = g[i][j] / z;
                    let p = y_of(a.pixel(crop + x0 + j, crop + y0 + i));
                    let q = y_of(b.pixel(crop + x0 + j, crop + y0 + i));
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

pub fn random_image(w: usize, h: usize, r: &mut ChaCha8Rng) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [r.random(), r.random(), r.random()]).unwrap()
}

/// `(q, k, v)` columns of a `[n, 3c]` tensor as f64 rows.
pub fn split_cols(t: &Tensor<f32>, c: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = t.data();
    let n = d.len() / (3 * c);
    let pick = |off: usize| (0..n * c).map(|i| d[(i / c) * 3 * c + off + i % c] as f64).collect();
    (pick(0), pick(c), pick(2 * c))
}

// ---------------------------------------------------------------------------
// oracle checks on random instances

pub fn check_attention_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, c, heads) = (r.random_range(1..24), 8, [1, 2, 4][r.random_range(0..3)]);
    let qkv = Tensor::<f32>::randn(&[n, 3 * c], 1.0, &mut r);
    let v = Var::constant(qkv.clone());
    let (q, k, vv) = promptsr::attention::split_qkv(&v).map_err(|e| e.to_string())?;
    let seg = promptsr::attention::Segment::square(0..n);
    let out = promptsr::attention::segmented_attention(&q, &k, &vv, heads, &[seg], None, false).map_err(|e| e.to_string())?;
    let (qd, kd, vd) = split_cols(&qkv, c);
    let all: Vec<usize> = (0..n).collect();
    let want = attention_oracle(&qd, &kd, &vd, c, heads, &all, &all);
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let got = out.out.value().at(&[i, j]) as f64;
            ensure!((got - w).abs() <= 1e-5, "attention [{i},{j}]: {got} vs {w}");
        }
    }
    Ok(())
}

pub fn check_csa_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, c, heads, m) = (r.random_range(4..80), 8, 2, r.random_range(1..6));
    let sub = r.random_range(1..20);
    let assign: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let a = CategoryAssignment::new(assign.clone(), m).map_err(|e| e.to_string())?;
    let qkv = Tensor::<f32>::randn(&[n, 3 * c], 1.0, &mut r);
    let out = csa(&Var::constant(qkv.clone()), heads, &a, sub).map_err(|e| e.to_string())?;
    let (qd, kd, vd) = split_cols(&qkv, c);
    // Gather by category (raster order inside), chunk, attend, scatter back.
    for cat in 0..m {
        let members: Vec<usize> = (0..n).filter(|&t| assign[t] == cat).collect();
        for chunk in members.chunks(sub) {
            let want = attention_oracle(&qd, &kd, &vd, c, heads, chunk, chunk);
            for (row, &t) in want.iter().zip(chunk) {
                for (j, &w) in row.iter().enumerate() {
                    let got = out.value().at(&[t, j]) as f64;
                    ensure!((got - w).abs() <= 1e-5, "csa token {t} ch {j}: {got} vs {w}");
                }
            }
        }
    }
    Ok(())
}

pub fn check_bicubic_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let (w, h) = (r.random_range(2..14), r.random_range(2..14));
    let img = random_image(w, h, &mut r);
    let (ow, oh) = (r.random_range(1..24), r.random_range(1..24));
    let got = promptsr::data::bicubic_resize(&img, ow, oh).map_err(|e| e.to_string())?;
    let want = bicubic_oracle(&img, ow, oh);
    ensure!(got == want, "{w}x{h} -> {ow}x{oh}: pixels differ");
    Ok(())
}

pub fn check_psnr_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let (w, h) = (r.random_range(8..24), r.random_range(8..24));
    let a = random_image(w, h, &mut r);
    let b = random_image(w, h, &mut r);
    let crop = r.random_range(0..3);
    let got = promptsr::metrics::psnr_y(&a, &b, crop).map_err(|e| e.to_string())?;
    let want = psnr_oracle(&a, &b, crop);
    ensure!((got - want).abs() <= 1e-6, "psnr {got} vs {want}");
    Ok(())
}

pub fn check_ssim_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let a = random_image(32, 32, &mut r);
    // Correlated partner so the score is not near zero.
    let b = ImageBuffer::from_fn(32, 32, |x, y| {
        let p = a.pixel(x, y);
        let n: i32 = r.random_range(-40..40);
        p.map(|v| (v as i32 + n).clamp(0, 255) as u8)
    })
    .unwrap();
    let crop = r.random_range(0..4);
    let got = promptsr::metrics::ssim_y(&a, &b, crop).map_err(|e| e.to_string())?;
    let want = ssim_oracle(&a, &b, crop);
    ensure!((got - want).abs() <= 1e-6, "ssim {got} vs {want}");
    Ok(())
}

pub fn check_luma_oracle(seed: u64) -> Check {
    let mut r = rng(seed);
    let img = random_image(3, 2, &mut r);
    let y = rgb_to_y(&img);
    for yy in 0..2 {
        for x in 0..3 {
            let want = y_of(img.pixel(x, yy));
            ensure!((y.at(&[yy, x]) - want).abs() <= 1e-4, "luma {} vs {want}", y.at(&[yy, x]));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// invariants

pub fn check_softmax_normalized(seed: u64) -> Check {
    let mut r = rng(seed);
    let (rows, cols) = (r.random_range(1..10), r.random_range(1..40));
    let spread = r.random_range(0.1..30.0);
    let x = Var::constant(Tensor::<f32>::randn(&[rows, cols], spread, &mut r));
    let s = x.softmax_last().map_err(|e| e.to_string())?;
    for row in s.value().data().chunks(cols) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        ensure!((sum - 1.0).abs() <= 1e-5, "row sums to {sum}");
        ensure!(row.iter().all(|&v| (0.0..=1.0).contains(&v)), "entry outside [0,1]");
    }
    Ok(())
}

pub fn check_categorize_partition(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, n) = (r.random_range(1..12), r.random_range(1..200));
    let map = Tensor::<f32>::randn(&[m, n], 1.0, &mut r);
    let a = categorize(&map, Orientation::Coarse).map_err(|e| e.to_string())?;
    let mut seen = vec![0usize; n];
    for list in a.categories() {
        for t in list {
            seen[t] += 1;
        }
    }
    ensure!(seen.iter().all(|&c| c == 1), "token coverage {seen:?}");
    ensure!(a.categories().len() == m, "category count");
    Ok(())
}

pub fn check_categorize_scale_invariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let (m, n) = (r.random_range(1..12), r.random_range(1..200));
    let map = Tensor::<f64>::randn(&[n, m], 1.0, &mut r);
    let k = r.random_range(1e-3..1e3);
    let scaled = map.map(|v| v * k);
    {
        let o = Orientation::Fine;
        let a = categorize(&map, o).map_err(|e| e.to_string())?;
        let b = categorize(&scaled, o).map_err(|e| e.to_string())?;
        ensure!(a == b, "scaling by {k} changed categories");
    }
    let coarse = Tensor::<f64>::from_fn(&[m, n], |i| map.at(&[i % n, i / n]));
    let a = categorize(&coarse, Orientation::Coarse).map_err(|e| e.to_string())?;
    let b = categorize(&coarse.map(|v| v * k), Orientation::Coarse).map_err(|e| e.to_string())?;
    ensure!(a == b, "coarse: scaling by {k} changed categories");
    Ok(())
}

pub fn check_csa_non_interaction(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, c, m) = (r.random_range(4..60), 8, r.random_range(2..5));
    let assign: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let a = CategoryAssignment::new(assign.clone(), m).map_err(|e| e.to_string())?;
    let sub = r.random_range(1..16);
    let qkv = Tensor::<f32>::randn(&[n, 3 * c], 1.0, &mut r);
    let victim = r.random_range(0..n);
    let mut moved = qkv.clone().into_data();
    for j in 0..3 * c {
        moved[victim * 3 * c + j] += r.random_range(-5.0..5.0);
    }
    let base = csa(&Var::constant(qkv), 2, &a, sub).map_err(|e| e.to_string())?;
    let pert = csa(&Var::constant(Tensor::new(&[n, 3 * c], moved).unwrap()), 2, &a, sub).map_err(|e| e.to_string())?;
    for t in (0..n).filter(|&t| assign[t] != assign[victim]) {
        for j in 0..c {
            ensure!(base.value().at(&[t, j]) == pert.value().at(&[t, j]), "token {t} moved");
        }
    }
    Ok(())
}

pub fn check_wsa_non_interaction(seed: u64) -> Check {
    let mut r = rng(seed);
    let win = [2, 4][r.random_range(0..2)];
    let (h, w, c) = (win * r.random_range(1..4), win * r.random_range(1..4), 8);
    let qkv = Tensor::<f32>::randn(&[h, w, 3 * c], 1.0, &mut r);
    let (vy, vx) = (r.random_range(0..h), r.random_range(0..w));
    let mut moved = qkv.clone().into_data();
    for j in 0..3 * c {
        moved[(vy * w + vx) * 3 * c + j] *= -2.0;
    }
    let base = wsa(&Var::constant(qkv), 2, win, None).map_err(|e| e.to_string())?;
    let pert = wsa(&Var::constant(Tensor::new(&[h, w, 3 * c], moved).unwrap()), 2, win, None).map_err(|e| e.to_string())?;
    for y in 0..h {
        for x in 0..w {
            if (y / win, x / win) == (vy / win, vx / win) {
                continue;
            }
            for j in 0..c {
                ensure!(base.value().at(&[y, x, j]) == pert.value().at(&[y, x, j]), "({y},{x}) moved");
            }
        }
    }
    Ok(())
}

pub fn check_pixel_shuffle_bijective(seed: u64) -> Check {
    let mut r = rng(seed);
    let s = r.random_range(1..5);
    let (h, w, c) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..4));
    // Distinct values make any collision or loss visible.
    let x = Tensor::<f64>::from_fn(&[h, w, c * s * s], |i| i as f64);
    let y = pixel_shuffle(&Var::constant(x.clone()), s).map_err(|e| e.to_string())?;
    ensure!(y.shape() == [s * h, s * w, c], "shape {:?}", y.shape());
    let mut vals: Vec<f64> = y.value().data().to_vec();
    vals.sort_by(f64::total_cmp);
    ensure!(vals.iter().enumerate().all(|(i, &v)| v == i as f64), "not a permutation");
    let back = pixel_unshuffle(&y, s).map_err(|e| e.to_string())?;
    ensure!(back.value() == &x, "unshuffle(shuffle(x)) != x");
    Ok(())
}

pub fn check_window_round_trip(seed: u64) -> Check {
    let mut r = rng(seed);
    let win = r.random_range(1..5);
    let (h, w, c) = (win * r.random_range(1..5), win * r.random_range(1..5), r.random_range(1..4));
    let x = Tensor::<f32>::randn(&[h, w, c], 1.0, &mut r);
    let parts = window_partition(&Var::constant(x.clone()), win).map_err(|e| e.to_string())?;
    ensure!(parts.shape() == [h * w / (win * win), win * win, c], "shape {:?}", parts.shape());
    let back = window_merge(&parts, win, h, w).map_err(|e| e.to_string())?;
    ensure!(back.value() == &x, "round trip changed values");
    Ok(())
}

fn tiny_config(r: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        channels: 4,
        heads: 2,
        mlp_ratio: 1,
        window_size: 4,
        sub_category_size: r.random_range(2..9),
        downscale: 2,
        alpha: r.random_range(0.05..0.95),
        num_rg: 2,
        cpb_per_rg: 2,
        scale: 2,
        relative_position_bias: false,
        tile: 0,
    }
}

pub fn check_alpha_endpoints(seed: u64) -> Check {
    let mut r = rng(seed);
    let cfg = tiny_config(&mut r);
    let mut store = ParamStore::<f64>::new();
    let mut g = Gapl::new(&mut store, "g", &cfg, &mut r).map_err(|e| e.to_string())?;
    let p = store.bind(None);
    let side = 2 * r.random_range(1..5);
    let x = Var::constant(Tensor::<f64>::randn(&[side, side, 4], 1.0, &mut r));
    let (_, fresh) = g.forward(&p, &x, None).map_err(|e| e.to_string())?;
    let m = fresh.p.shape()[0];
    let prev = AnchorPromptState {
        p: Var::constant(Tensor::<f64>::randn(&[m, 4], 1.0, &mut r)),
        ..fresh.clone()
    };
    g.alpha = 0.0;
    let (_, s0) = g.forward(&p, &x, Some(&prev)).map_err(|e| e.to_string())?;
    ensure!(s0.p.value() == fresh.p.value(), "alpha = 0 did not keep the fresh prompts");
    g.alpha = 1.0;
    let (_, s1) = g.forward(&p, &x, Some(&prev)).map_err(|e| e.to_string())?;
    ensure!(s1.p.value() == prev.p.value(), "alpha = 1 did not keep the previous prompts");
    Ok(())
}

/// Re-runs the network block by block from its public parts, resetting the
/// prompt state at every group, and requires bit-identical output. Carrying
/// the state across groups instead must change the output.
pub fn check_rg_reset(seed: u64) -> Check {
    let mut r = rng(seed);
    let cfg = tiny_config(&mut r);
    let model = PromptSr::<f64>::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
    let p = model.params().bind(None);
    let (h, w) = (r.random_range(4..10), r.random_range(4..10));
    let img = Var::constant(Tensor::<f64>::uniform(&[h, w, 3], 0.0, 1.0, &mut r));
    let expect = model.forward(&p, &img).map_err(|e| e.to_string())?;
    let manual = |leak: bool| -> Result<Tensor<f64>, promptsr::Error> {
        let mean = Var::constant(Tensor::from_fn(&[3], |i| RGB_MEAN[i]));
        let (x, _) = pad_to_multiple(&img.sub(&mean)?, cfg.pad_multiple())?;
        let x0 = model.encoder.forward(&p, &x)?;
        let mut x = x0.clone();
        let mut state: Option<AnchorPromptState<f64>> = None;
        for g in &model.groups {
            if !leak {
                state = None;
            }
            let skip = x.clone();
            for b in &g.blocks {
                let (y, s) = b.forward(&p, &x, state.as_ref())?;
                x = y;
                state = Some(s);
            }
            x = g.conv.forward(&p, &x)?.add(&skip)?;
        }
        let y = model.decoder.forward(&p, &model.trunk.forward(&p, &x)?.add(&x0)?)?;
        let y = pixel_shuffle(&y, cfg.scale)?.add(&mean)?;
        Ok(crop(&y, 2 * h, 2 * w)?.value().clone())
    };
    let reset = manual(false).map_err(|e| e.to_string())?;
    ensure!(&reset == expect.value(), "block-by-block run with resets differs from the model");
    let leaked = manual(true).map_err(|e| e.to_string())?;
    ensure!(&leaked != expect.value(), "carrying prompts across groups had no effect");
    Ok(())
}

/// Every invariant of the suite, by name.
pub const INVARIANTS: &[(&str, fn(u64) -> Check)] = &[
    ("softmax normalization", check_softmax_normalized),
    ("categorize partition", check_categorize_partition),
    ("categorize positive-scale invariance", check_categorize_scale_invariance),
    ("CSA cross-category non-interaction", check_csa_non_interaction),
    ("WSA cross-window non-interaction", check_wsa_non_interaction),
    ("pixel-shuffle bijectivity", check_pixel_shuffle_bijective),
    ("window partition round trip", check_window_round_trip),
    ("anchor update alpha endpoints", check_alpha_endpoints),
    ("residual-group prompt reset", check_rg_reset),
];

/// Every randomized oracle comparison, by name.
pub const ORACLES: &[(&str, fn(u64) -> Check)] = &[
    ("attention vs loop", check_attention_oracle),
    ("CSA gather/scatter vs loop", check_csa_oracle),
    ("bicubic vs double loop", check_bicubic_oracle),
    ("PSNR vs direct sum", check_psnr_oracle),
    ("SSIM vs sliding window", check_ssim_oracle),
    ("luma vs formula", check_luma_oracle),
];

// ---------------------------------------------------------------------------
// gradient check

/// Small whole network: one group of one block, C = 8, two heads, anchor
/// downscale 4, window 4, ×2.
pub fn gradient_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        heads: 2,
        mlp_ratio: 2,
        window_size: 4,
        sub_category_size: 6,
        downscale: 4,
        alpha: 0.5,
        num_rg: 1,
        cpb_per_rg: 1,
        scale: 2,
        relative_position_bias: true,
        tile: 0,
    }
}

/// Relative L2 error of the analytic gradient of an L1 loss on an 8×8
/// input, with a target kept clear of the loss's kink, per parameter tensor, against central differences with step `h`.
/// The network runs in `T`; the differences are evaluated in f64 on the
/// same parameter values. Categories are an argmax, so they are frozen at
/// the base point, which is the smooth piece the analytic gradient
/// describes. Tensors whose true gradient vanishes are measured against a
/// floor of 1e-3 of the overall gradient norm.
pub fn gradient_errors<T: promptsr::tensor::Element>(h: f64, seed: u64) -> Vec<(String, f64)> {
    use promptsr::tensor::Tape;
    let model = PromptSr::<f64>::new(gradient_config(), seed).unwrap();
    let mut r = rng(seed);
    let img = Tensor::<f64>::uniform(&[8, 8, 3], 0.0, 1.0, &mut r);
    let (y0, _, cats) = model.forward_frozen(&model.params().bind(None), &Var::constant(img.clone()), None).unwrap();
    // |r| has a kink at r = 0; keep every residual at least 0.05 away from
    // it so a step of `h` never crosses it.
    let target = Tensor::from_fn(y0.shape(), |i| {
        let off = r.random_range(0.05..0.5);
        y0.value().data()[i] + if r.random::<bool>() { off } else { -off }
    });

    let net = model.cast::<T>();
    let tape = Tape::new();
    let p = net.params().bind(Some(&tape));
    let (y, _, _) = net.forward_frozen(&p, &Var::constant(img.cast()), Some(&cats)).unwrap();
    let loss = y.l1_loss(&Var::constant(target.cast())).unwrap();
    let grads = p.grads(&loss.backward().unwrap());

    let loss_at = |m: &PromptSr<f64>| {
        let (y, _, _) = m.forward_frozen(&m.params().bind(None), &Var::constant(img.clone()), Some(&cats)).unwrap();
        y.l1_loss(&Var::constant(target.clone())).unwrap().value().data()[0]
    };
    let base = net.cast::<f64>();
    let ids: Vec<_> = base.params().ids().collect();
    let mut numeric = Vec::new();
    for &id in &ids {
        let mut m = base.clone();
        let values = m.params().get(id).clone().into_data();
        let shape = m.params().get(id).shape().to_vec();
        let mut num = vec![0.0; values.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut eval = |delta: f64| {
                let mut d = values.clone();
                d[i] += delta;
                *m.params_mut().get_mut(id) = Tensor::new(&shape, d).unwrap();
                loss_at(&m)
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        numeric.push(num);
    }
    let global = numeric.iter().flatten().map(|n| n * n).sum::<f64>().sqrt();
    ids.iter()
        .zip(&grads)
        .zip(&numeric)
        .map(|((&id, g), num)| {
            let diff = g.data().iter().zip(num).map(|(&a, &n)| (a.as_f64() - n).powi(2)).sum::<f64>().sqrt();
            let norm = num.iter().map(|n| n * n).sum::<f64>().sqrt();
            (base.params().name(id).to_string(), diff / norm.max(1e-3 * global))
        })
        .collect()
}
