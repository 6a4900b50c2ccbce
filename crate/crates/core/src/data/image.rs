use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// The `w×h` region with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Data(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        Self::from_fn(w, h, |cx, cy| self.pixel(x + cx, y + cy))
    }

    /// Largest top-left crop whose sides are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<Self> {
        let (w, h) = (self.width / s * s, self.height / s * s);
        if w == 0 || h == 0 {
            return Err(Error::Data(format!("{}x{} image is smaller than scale {s}", self.width, self.height)));
        }
        self.crop(0, 0, w, h)
    }

    /// `[h, w, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::of(self.pixels[i] as f64 / 255.0))
    }

    /// Inverse of [`ImageBuffer::to_tensor`]: scales by 255, rounds half
    /// away from zero and clamps.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let [h, w, 3] = *t.shape() else {
            return Err(Error::Data(format!("expected [h, w, 3] tensor, got {:?}", t.shape())));
        };
        let pixels = t.data().iter().map(|&v| to_u8(v.as_f64() * 255.0)).collect();
        Self::new(w, h, pixels)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&encode_ppm(self))?;
        Ok(())
    }
}

/// Rounds half away from zero and clamps to `[0, 255]`.
pub(crate) fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

/// Binary `P6` with maxval 255.
pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Format("not a binary PPM (P6) file".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad PPM {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    if bytes.len() < start + need {
        return Err(Error::Format(format!("PPM raster truncated: need {need} bytes")));
    }
    ImageBuffer::new(w, h, bytes[start..start + need].to_vec()).map_err(|e| Error::Format(e.to_string()))
}

/// Luma in BT.601 studio swing: `16 + (65.738 R + 129.057 G + 25.064 B) / 256`.
pub fn rgb_to_y(img: &ImageBuffer) -> Tensor<f64> {
    Tensor::from_fn(&[img.height, img.width], |i| {
        let p = &img.pixels[3 * i..3 * i + 3];
        16.0 + (65.738 * p[0] as f64 + 129.057 * p[1] as f64 + 25.064 * p[2] as f64) / 256.0
    })
}
