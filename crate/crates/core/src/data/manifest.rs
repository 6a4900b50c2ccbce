use std::fs;
use std::path::{Path, PathBuf};

use super::image::ImageBuffer;
use super::resize::downscale;
use crate::error::{Error, Result};

/// One `hr_path[<TAB>lr_path]` line, with paths resolved against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub hr: PathBuf,
    pub lr: Option<PathBuf>,
}

impl Record {
    /// File stem of the HR image, used as the row key in reports.
    pub fn name(&self) -> String {
        self.hr
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub scale: usize,
}

impl Manifest {
    /// Parses manifest text. Blank lines and lines starting with `#` are
    /// skipped. Relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Data("scale must be positive".into()));
        }
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let hr = cols.next().unwrap_or_default();
            let lr = cols.next();
            if hr.is_empty() || cols.next().is_some() || lr == Some("") {
                return Err(Error::Data(format!(
                    "manifest line {}: expected `hr_path[<TAB>lr_path]`",
                    n + 1
                )));
            }
            records.push(Record {
                hr: base.join(hr),
                lr: lr.map(|p| base.join(p)),
            });
        }
        Ok(Manifest { records, scale })
    }

    /// Reads and parses a manifest file and checks every referenced file
    /// exists.
    pub fn load(path: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let m = Manifest::parse(&text, base, scale)?;
        for r in &m.records {
            for p in std::iter::once(&r.hr).chain(r.lr.as_ref()) {
                if !p.is_file() {
                    return Err(Error::Data(format!("missing image {}", p.display())));
                }
            }
        }
        Ok(m)
    }

    /// Serializes with paths written as given.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.hr.to_string_lossy());
            if let Some(lr) = &r.lr {
                out.push('\t');
                out.push_str(&lr.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }
}

/// Loads an HR/LR pair. The HR image is cropped to a multiple of `scale`;
/// the LR image is read when listed and synthesized by bicubic downscaling
/// otherwise.
pub fn load_pair(record: &Record, scale: usize) -> Result<(ImageBuffer, ImageBuffer)> {
    let hr = ImageBuffer::read(&record.hr)?.crop_to_multiple(scale)?;
    let lr = match &record.lr {
        Some(p) => ImageBuffer::read(p)?,
        None => downscale(&hr, scale)?,
    };
    if lr.width() * scale != hr.width() || lr.height() * scale != hr.height() {
        return Err(Error::Data(format!(
            "{}: LR {}x{} does not match HR {}x{} at scale {scale}",
            record.hr.display(),
            lr.width(),
            lr.height(),
            hr.width(),
            hr.height()
        )));
    }
    Ok((hr, lr))
}
