//! IDX reader/writer (the MNIST distribution format). Gzip-compressed files
//! are detected by their magic bytes and inflated transparently.

use std::io::Read;
use std::path::Path;

use super::LoadError;
use crate::kernel::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with intensities in `[0, 1]`, stored row-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, labels: Option<Vec<u8>>) -> Result<Self, LoadError> {
        if height == 0 || width == 0 {
            return Err(LoadError::Invalid("image dimensions must be positive".into()));
        }
        if pixels.len() % (height * width) != 0 {
            return Err(LoadError::Invalid("pixel count is not a whole number of images".into()));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(LoadError::Invalid("intensity outside [0, 1]".into()));
        }
        let n = pixels.len() / (height * width);
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(LoadError::Invalid(format!("{} labels for {n} images", l.len())));
            }
        }
        Ok(ImageDataset {
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.height * self.width;
        &self.pixels[i * s..(i + 1) * s]
    }

    /// First `n` images (all of them if fewer).
    pub fn take(&self, n: usize) -> ImageDataset {
        let n = n.min(self.len());
        let s = self.height * self.width;
        ImageDataset {
            height: self.height,
            width: self.width,
            pixels: self.pixels[..n * s].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// `[n, 1, h, w]` view of images `idx`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.height * self.width);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), 1, self.height, self.width], data).expect("image geometry")
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, LoadError> {
    let raw = std::fs::read(path).map_err(|source| LoadError::Io {
        path: path.to_owned(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| LoadError::Io {
                path: path.to_owned(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn header(bytes: &[u8], what: &'static str, magic: u32, len: usize) -> Result<(), LoadError> {
    if bytes.len() < len {
        return Err(LoadError::Truncated {
            what,
            declared: len,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(LoadError::BadMagic {
            what,
            expected: magic,
            found,
        });
    }
    Ok(())
}

/// Returns `(n, rows, cols, bytes)` for an IDX3 ubyte image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), LoadError> {
    header(bytes, "idx images", IMAGES_MAGIC, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let declared = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != declared {
        return Err(LoadError::Truncated {
            what: "idx images",
            declared,
            actual: payload.len(),
        });
    }
    Ok((n, rows, cols, payload))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], LoadError> {
    header(bytes, "idx labels", LABELS_MAGIC, 8)?;
    let n = be_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(LoadError::Truncated {
            what: "idx labels",
            declared: n,
            actual: payload.len(),
        });
    }
    Ok(payload)
}

/// Loads an image file and, optionally, its label file; bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageDataset, LoadError> {
    let bytes = read_file(images_path)?;
    let (_, rows, cols, payload) = parse_idx_images(&bytes)?;
    let pixels = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let labels = match labels_path {
        Some(p) => Some(parse_idx_labels(&read_file(p)?)?.to_vec()),
        None => None,
    };
    ImageDataset::new(rows, cols, pixels, labels)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
