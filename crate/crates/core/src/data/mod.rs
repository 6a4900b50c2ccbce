//! Images, resampling, datasets, patch sampling and augmentation.

mod augment;
mod image;
mod manifest;
mod resize;
mod synth;

pub use augment::Dihedral;
pub use image::{decode_ppm, encode_ppm, rgb_to_y, ImageBuffer};
pub use manifest::{load_pair, Manifest, Record};
pub use resize::{bicubic_resize, contributions, cubic, downscale, Contribution};
pub use synth::synth_image;

use rand::Rng;

use crate::error::{Error, Result};

/// Aligned low/high-resolution training crops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPair {
    pub lr: ImageBuffer,
    pub hr: ImageBuffer,
    /// Top-left corner of the crop in the low-resolution image.
    pub origin: (usize, usize),
    pub transform: Dihedral,
}

/// Crops a `patch×patch` LR window at `(x, y)` and the matching
/// `s·patch` HR window at `(s·x, s·y)`.
pub fn crop_pair(
    hr: &ImageBuffer,
    lr: &ImageBuffer,
    x: usize,
    y: usize,
    patch: usize,
    s: usize,
) -> Result<(ImageBuffer, ImageBuffer)> {
    if hr.width() != s * lr.width() || hr.height() != s * lr.height() {
        return Err(Error::Data(format!(
            "HR {}x{} is not {s}x LR {}x{}",
            hr.width(),
            hr.height(),
            lr.width(),
            lr.height()
        )));
    }
    Ok((lr.crop(x, y, patch, patch)?, hr.crop(s * x, s * y, s * patch, s * patch)?))
}

/// Random aligned crop, optionally followed by a random dihedral transform
/// applied identically to both crops.
pub fn sample_patch<R: Rng + ?Sized>(
    hr: &ImageBuffer,
    lr: &ImageBuffer,
    patch: usize,
    s: usize,
    augment: bool,
    rng: &mut R,
) -> Result<PatchPair> {
    if patch == 0 || lr.width() < patch || lr.height() < patch {
        return Err(Error::Data(format!(
            "{}x{} image is smaller than a {patch}px patch",
            lr.width(),
            lr.height()
        )));
    }
    let x = rng.random_range(0..=lr.width() - patch);
    let y = rng.random_range(0..=lr.height() - patch);
    let (l, h) = crop_pair(hr, lr, x, y, patch, s)?;
    let transform = if augment {
        Dihedral::from_id(rng.random_range(0..8))
    } else {
        Dihedral::IDENTITY
    };
    Ok(PatchPair {
        lr: transform.apply(&l),
        hr: transform.apply(&h),
        origin: (x, y),
        transform,
    })
}
