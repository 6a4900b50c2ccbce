//! PSNR and SSIM on the luma channel, with border shaving.

use std::fmt::Write as _;

use crate::data::{rgb_to_y, ImageBuffer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const PEAK: f64 = 255.0;

fn cropped_y(a: &ImageBuffer, b: &ImageBuffer, crop: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if 2 * crop >= a.width().min(a.height()) {
        return Err(Error::Contract(format!(
            "border {crop} leaves nothing of a {}x{} image",
            a.width(),
            a.height()
        )));
    }
    let shave = |img: &ImageBuffer| {
        let (w, h) = (img.width() - 2 * crop, img.height() - 2 * crop);
        let y = rgb_to_y(img);
        Tensor::from_fn(&[h, w], |i| y.at(&[i / w + crop, i % w + crop]))
    };
    Ok((shave(a), shave(b)))
}

/// Peak signal-to-noise ratio of the Y channels after removing `crop`
/// pixels from every side. Identical inputs give `f64::INFINITY`.
pub fn psnr_y(a: &ImageBuffer, b: &ImageBuffer, crop: usize) -> Result<f64> {
    let (ya, yb) = cropped_y(a, b, crop)?;
    let mse = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / ya.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// `10·log10(255² / mse)`, infinite at zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// Normalised 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of an `[h, w]` map.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = g.iter().enumerate().map(|(k, &t)| t * x[y * w + ox + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = g.iter().enumerate().map(|(k, &t)| t * rows[(oy + k) * ow + ox]).sum();
        }
    }
    out
}

/// Single-scale SSIM of the Y channels after removing `crop` pixels from
/// every side, averaged over every fully covered window position.
pub fn ssim_y(a: &ImageBuffer, b: &ImageBuffer, crop: usize) -> Result<f64> {
    let (ya, yb) = cropped_y(a, b, crop)?;
    let (h, w) = (ya.shape()[0], ya.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after cropping, got {w}x{h}"
        )));
    }
    let g = gaussian_taps();
    let (x, y) = (ya.data(), yb.data());
    let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&prod(|p, _| p * p), h, w, &g);
    let syy = filter_valid(&prod(|_, q| q * q), h, w, &g);
    let sxy = filter_valid(&prod(|p, q| p * q), h, w, &g);
    let (c1, c2) = ((K1 * PEAK).powi(2), (K2 * PEAK).powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus dataset means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub crop: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(crop: usize) -> Self {
        EvalReport { crop, rows: Vec::new() }
    }

    pub fn push(&mut self, image: impl Into<String>, sr: &ImageBuffer, hr: &ImageBuffer) -> Result<()> {
        let row = EvalRow {
            image: image.into(),
            psnr: psnr_y(sr, hr, self.crop)?,
            ssim: ssim_y(sr, hr, self.crop)?,
        };
        self.rows.push(row);
        Ok(())
    }

    /// Mean PSNR; infinite if any image matched exactly.
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// `image,psnr,ssim` rows followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.6}") };
        let mut s = String::from("image,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", r.image, fmt(r.psnr), r.ssim);
        }
        let _ = writeln!(s, "mean,{},{:.6}", fmt(self.mean_psnr()), self.mean_ssim());
        s
    }
}
