use std::collections::HashSet;
use std::fmt;

use image::ImageFormat as CodecFormat;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fetch::{FetchResult, FetchStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageFormat {
    #[serde(rename = "PNG")]
    Png,
    #[serde(rename = "JPEG")]
    Jpeg,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpg",
        }
    }

    pub(crate) fn codec(self) -> CodecFormat {
        match self {
            ImageFormat::Png => CodecFormat::Png,
            ImageFormat::Jpeg => CodecFormat::Jpeg,
        }
    }
}

/// A decoded-once, accepted image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    /// Lowercase hex SHA-256 of `bytes`.
    pub id: String,
    pub source: String,
    /// Provenance only; never used as a label.
    pub keyword: Option<String>,
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub format: ImageFormat,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    Undecodable(String),
    TooSmall { width: u32, height: u32, min_dim: u32 },
    Duplicate(String),
    /// The fetch itself failed.
    Fetch(FetchStatus, String),
}

impl Rejection {
    pub fn label(&self) -> &'static str {
        match self {
            Rejection::Undecodable(_) => "undecodable",
            Rejection::TooSmall { .. } => "too-small",
            Rejection::Duplicate(_) => "duplicate",
            Rejection::Fetch(s, _) => s.label(),
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Undecodable(why) => write!(f, "undecodable: {why}"),
            Rejection::TooSmall { width, height, min_dim } => write!(f, "too-small: {width}x{height} below {min_dim}"),
            Rejection::Duplicate(id) => write!(f, "duplicate of {}", &id[..12.min(id.len())]),
            Rejection::Fetch(_, why) => f.write_str(why),
        }
    }
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Decodes `bytes` as PNG or JPEG, returning the format and dimensions.
pub fn probe(bytes: &[u8]) -> Result<(ImageFormat, u32, u32), String> {
    let format = match image::guess_format(bytes) {
        Ok(CodecFormat::Png) => ImageFormat::Png,
        Ok(CodecFormat::Jpeg) => ImageFormat::Jpeg,
        Ok(other) => return Err(format!("unsupported format {other:?}")),
        Err(e) => return Err(e.to_string()),
    };
    if format == ImageFormat::Jpeg && !jpeg_complete(bytes) {
        return Err("JPEG stream ends before the end-of-image marker".into());
    }
    let img = image::load_from_memory_with_format(bytes, format.codec()).map_err(|e| e.to_string())?;
    Ok((format, img.width(), img.height()))
}

/// The JPEG decoder pads truncated scans silently, so completeness is
/// checked by the end-of-image marker at the tail of the stream.
fn jpeg_complete(bytes: &[u8]) -> bool {
    bytes[bytes.len().saturating_sub(16)..].windows(2).any(|w| w == [0xFF, 0xD9])
}

/// Per-run quality gate: decodable PNG/JPEG, minimum side `min_dim`, and
/// content not seen earlier in the run.
#[derive(Clone, Debug)]
pub struct QualityChecker {
    min_dim: u32,
    seen: HashSet<String>,
}

impl QualityChecker {
    pub fn new(min_dim: u32) -> Self {
        Self { min_dim, seen: HashSet::new() }
    }

    /// Treats ids already in a pool as seen.
    pub fn with_seen(min_dim: u32, ids: impl IntoIterator<Item = String>) -> Self {
        Self { min_dim, seen: ids.into_iter().collect() }
    }

    pub fn check_bytes(&mut self, source: &str, keyword: Option<&str>, bytes: &[u8]) -> Result<ImageRecord, Rejection> {
        let (format, width, height) = probe(bytes).map_err(Rejection::Undecodable)?;
        if width.min(height) < self.min_dim {
            return Err(Rejection::TooSmall { width, height, min_dim: self.min_dim });
        }
        let id = content_id(bytes);
        if !self.seen.insert(id.clone()) {
            return Err(Rejection::Duplicate(id));
        }
        Ok(ImageRecord { id, source: source.to_string(), keyword: keyword.map(str::to_string), bytes: bytes.to_vec(), width, height, format })
    }

    pub fn check(&mut self, raw: &FetchResult) -> Result<ImageRecord, Rejection> {
        if raw.status != FetchStatus::Ok {
            return Err(Rejection::Fetch(raw.status, raw.reason.clone()));
        }
        self.check_bytes(&raw.source, raw.keyword.as_deref(), &raw.bytes)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use image::{ImageEncoder, RgbImage};

    pub(crate) fn png(w: u32, h: u32, seed: u8) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x as u8).wrapping_mul(7) ^ seed, (y as u8).wrapping_mul(3), seed]));
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(img.as_raw(), w, h, image::ExtendedColorType::Rgb8).unwrap();
        out
    }

    pub(crate) fn jpeg(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 5) as u8, (y * 5) as u8, 90]));
        let mut out = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 90).write_image(img.as_raw(), w, h, image::ExtendedColorType::Rgb8).unwrap();
        out
    }

    #[test]
    fn accepts_valid_images() {
        let mut q = QualityChecker::new(32);
        let r = q.check_bytes("a.png", Some("cat"), &png(40, 33, 1)).unwrap();
        assert_eq!((r.width, r.height, r.format), (40, 33, ImageFormat::Png));
        assert_eq!(r.id, content_id(&png(40, 33, 1)));
        assert_eq!(r.id.len(), 64);
        assert!(r.id.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(q.check_bytes("b.jpg", None, &jpeg(32, 32)).unwrap().format, ImageFormat::Jpeg);
    }

    #[test]
    fn rejects_truncated_jpeg() {
        let j = jpeg(64, 64);
        let mut q = QualityChecker::new(8);
        for cut in [j.len() / 2, j.len() - 2, 20] {
            assert_eq!(q.check_bytes("t.jpg", None, &j[..cut]).unwrap_err().label(), "undecodable", "cut {cut}");
        }
        let p = png(64, 64, 3);
        assert_eq!(q.check_bytes("t.png", None, &p[..p.len() / 2]).unwrap_err().label(), "undecodable");
        assert_eq!(q.check_bytes("n.txt", None, b"not an image").unwrap_err().label(), "undecodable");
    }

    #[test]
    fn rejects_small_and_duplicate() {
        let mut q = QualityChecker::new(32);
        assert_eq!(q.check_bytes("s.png", None, &png(8, 8, 0)).unwrap_err().label(), "too-small");
        let b = png(32, 32, 9);
        assert!(q.check_bytes("x.png", None, &b).is_ok());
        assert_eq!(q.check_bytes("y.png", None, &b).unwrap_err().label(), "duplicate");
    }
}
