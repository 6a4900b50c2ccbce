use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `C`.
    pub mlp_ratio: usize,
    /// Window side `w` of window self-attention.
    pub window_size: usize,
    /// Largest group of same-category tokens that attend together.
    pub sub_category_size: usize,
    /// Anchor downscale factor `d`.
    pub downscale: usize,
    /// Anchor prompt carry-over weight.
    pub alpha: f64,
    /// Residual groups `K`.
    pub num_rg: usize,
    /// Cascade prompting blocks per residual group `N`.
    pub cpb_per_rg: usize,
    /// Upscaling factor `s`.
    pub scale: usize,
    /// Learned per-head relative position bias inside window attention.
    pub relative_position_bias: bool,
    /// Inference tile side in low-resolution pixels; 0 processes the whole
    /// image at once.
    pub tile: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference(4)
    }
}

impl ModelConfig {
    /// Full-size network at the given scale.
    pub fn reference(scale: usize) -> Self {
        ModelConfig {
            channels: 48,
            heads: 4,
            mlp_ratio: 1,
            window_size: 16,
            sub_category_size: 128,
            downscale: 8,
            alpha: 0.01,
            num_rg: 4,
            cpb_per_rg: 3,
            scale,
            relative_position_bias: false,
            tile: 64,
        }
    }

    /// The deeper variant with four blocks per group.
    pub fn reference_deep(scale: usize) -> Self {
        ModelConfig {
            cpb_per_rg: 4,
            ..Self::reference(scale)
        }
    }

    /// Small network for the 200-step overfitting run.
    pub fn desk(scale: usize) -> Self {
        ModelConfig {
            channels: 32,
            heads: 2,
            mlp_ratio: 1,
            window_size: 8,
            sub_category_size: 32,
            downscale: 8,
            alpha: 0.01,
            num_rg: 1,
            cpb_per_rg: 2,
            scale,
            relative_position_bias: false,
            tile: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("window_size", self.window_size),
            ("sub_category_size", self.sub_category_size),
            ("downscale", self.downscale),
            ("num_rg", self.num_rg),
            ("cpb_per_rg", self.cpb_per_rg),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(Error::Config(format!("scale {} not in {{2, 3, 4}}", self.scale)));
        }
        Ok(())
    }

    /// Spatial multiple every processed map is padded to.
    pub fn pad_multiple(&self) -> usize {
        lcm(self.window_size, self.downscale)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "mlp_ratio={}", self.mlp_ratio);
        let _ = writeln!(s, "window_size={}", self.window_size);
        let _ = writeln!(s, "sub_category_size={}", self.sub_category_size);
        let _ = writeln!(s, "downscale={}", self.downscale);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "num_rg={}", self.num_rg);
        let _ = writeln!(s, "cpb_per_rg={}", self.cpb_per_rg);
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "relative_position_bias={}", self.relative_position_bias);
        let _ = writeln!(s, "tile={}", self.tile);
        s
    }

    /// Applies `key=value` overrides on top of `self`. Unknown keys are left
    /// for the caller (returned).
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, v) in kv {
            match k.as_str() {
                "channels" => self.channels = parse(k, v)?,
                "heads" => self.heads = parse(k, v)?,
                "mlp_ratio" => self.mlp_ratio = parse(k, v)?,
                "window_size" => self.window_size = parse(k, v)?,
                "sub_category_size" => self.sub_category_size = parse(k, v)?,
                "downscale" => self.downscale = parse(k, v)?,
                "alpha" => self.alpha = parse(k, v)?,
                "num_rg" => self.num_rg = parse(k, v)?,
                "cpb_per_rg" => self.cpb_per_rg = parse(k, v)?,
                "scale" => self.scale = parse(k, v)?,
                "relative_position_bias" => self.relative_position_bias = parse(k, v)?,
                "tile" => self.tile = parse(k, v)?,
                _ => unknown.push(k.clone()),
            }
        }
        Ok(unknown)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut c = Self::reference(4);
        let unknown = c.apply_kv(&kv)?;
        if let Some(k) = unknown.first() {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::desk(3);
        c.alpha = 0.25;
        c.relative_position_bias = true;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::reference(4).validate().is_ok());
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::reference(2);
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.heads = 5));
        assert!(bad(|c| c.alpha = 1.0));
        assert!(bad(|c| c.scale = 5));
        assert!(bad(|c| c.downscale = 0));
        assert!(bad(|c| c.window_size = 0));
    }

    #[test]
    fn pad_multiple_is_lcm() {
        assert_eq!(ModelConfig::reference(4).pad_multiple(), 16);
        let c = ModelConfig {
            window_size: 6,
            downscale: 4,
            ..ModelConfig::reference(4)
        };
        assert_eq!(c.pad_multiple(), 12);
    }
}
