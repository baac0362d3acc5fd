//! Samples, dataset IO, synthetic data and augmentation.
//!
//! A dataset directory holds `images/<id>.ppm` (P6) and `masks/<id>.pgm` (P5).
//! Mask pixels above 127 are foreground.

pub mod augment;
pub mod edge;
pub mod netpbm;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub use augment::{augment, AugmentConfig};
pub use edge::{derive_edge_mask, DEFAULT_EDGE_WIDTH};
pub use synth::{synth_generate, write_synth_dataset, LesionParams, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: malformed header: {detail}")]
    Header { path: PathBuf, detail: String },
    #[error("sample {id}: image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    SizeMismatch {
        id: String,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("sample {id}: missing {what}")]
    MissingPair { id: String, what: &'static str },
    #[error("mask value {0} is not binary")]
    NonBinary(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One image with its segmentation and edge ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1,3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    /// `[1,1,H,W]`, values exactly 0 or 1.
    pub seg_mask: Tensor<f32>,
    /// `[1,1,H,W]`, derived from `seg_mask`.
    pub edge_mask: Tensor<f32>,
}

impl Sample {
    /// Build a sample, deriving the edge mask with band `edge_width`.
    pub fn new(id: String, image: Tensor<f32>, seg_mask: Tensor<f32>, edge_width: usize) -> Result<Sample, DataError> {
        let (is, ms) = (image.shape(), seg_mask.shape());
        if is.n() != 1 || is.c() != 3 || ms.n() != 1 || ms.c() != 1 {
            return Err(DataError::Invalid(format!("sample {id}: expected [1,3,H,W] image and [1,1,H,W] mask, got {is} and {ms}")));
        }
        if (is.h(), is.w()) != (ms.h(), ms.w()) {
            return Err(DataError::SizeMismatch {
                id,
                image_w: is.w(),
                image_h: is.h(),
                mask_w: ms.w(),
                mask_h: ms.h(),
            });
        }
        let edge_mask = derive_edge_mask(&seg_mask, edge_width)?;
        Ok(Sample {
            id,
            image,
            seg_mask,
            edge_mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }
}

/// SplitMix64 finaliser applied to `a + golden * (b + 1)`.
pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

fn read_pnm(path: &Path) -> Result<netpbm::Pnm, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    netpbm::decode(&bytes).map_err(|detail| DataError::Header {
        path: path.to_path_buf(),
        detail,
    })
}

fn scale(v: u8, maxval: u16) -> f32 {
    (v as f64 / maxval as f64) as f32
}

/// Read a P6 image as `[1,3,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let p = read_pnm(path)?;
    if p.channels != 3 {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            detail: "expected a P6 (RGB) image".into(),
        });
    }
    Ok(Tensor::from_fn(Shape::new(1, 3, p.height, p.width), |[_, c, y, x]| {
        scale(p.samples[(y * p.width + x) * 3 + c], p.maxval)
    }))
}

/// Read a P5 mask as `[1,1,H,W]`; pixel values above half of 255 are foreground.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>, DataError> {
    let p = read_pnm(path)?;
    if p.channels != 1 {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            detail: "expected a P5 (grayscale) mask".into(),
        });
    }
    let threshold = 127.0 * p.maxval as f64 / 255.0;
    Ok(Tensor::from_fn(Shape::new(1, 1, p.height, p.width), |[_, _, y, x]| {
        if p.samples[y * p.width + x] as f64 > threshold {
            1.0
        } else {
            0.0
        }
    }))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[1,1,H,W]` mask (or probability map) as P5.
pub fn save_mask(mask: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let s = mask.shape();
    if s.n() != 1 || s.c() != 1 {
        return Err(DataError::Invalid(format!("mask must be [1,1,H,W], got {s}")));
    }
    let bytes: Vec<u8> = mask.data().iter().map(|&v| to_byte(v)).collect();
    std::fs::write(path, netpbm::encode(s.w(), s.h(), 1, &bytes)).map_err(|e| DataError::io(path, e))
}

/// Write a `[1,3,H,W]` image as P6.
pub fn save_image(image: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let s = image.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(DataError::Invalid(format!("image must be [1,3,H,W], got {s}")));
    }
    let plane = s.plane();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_byte(image.data()[c * plane + i]));
        }
    }
    std::fs::write(path, netpbm::encode(s.w(), s.h(), 3, &bytes)).map_err(|e| DataError::io(path, e))
}

fn ids_with_ext(dir: &Path, ext: &str) -> Result<Vec<String>, DataError> {
    let mut ids = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load every `images/<id>.ppm` with its `masks/<id>.pgm`, sorted by id.
pub fn load_dataset(dir: &Path, edge_width: usize) -> Result<Vec<Sample>, DataError> {
    let images = ids_with_ext(&dir.join("images"), "ppm")?;
    let masks = ids_with_ext(&dir.join("masks"), "pgm")?;
    if let Some(id) = masks.iter().find(|m| images.binary_search(m).is_err()) {
        return Err(DataError::MissingPair {
            id: id.clone(),
            what: "image",
        });
    }
    images
        .into_iter()
        .map(|id| {
            let mask_path = dir.join("masks").join(format!("{id}.pgm"));
            if !mask_path.exists() {
                return Err(DataError::MissingPair { id, what: "mask" });
            }
            let image = load_image(&dir.join("images").join(format!("{id}.ppm")))?;
            let mask = load_mask(&mask_path)?;
            Sample::new(id, image, mask, edge_width)
        })
        .collect()
}

/// Write samples in the dataset layout understood by [`load_dataset`].
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<(), DataError> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| DataError::io(&p, e))?;
    }
    for s in samples {
        save_image(&s.image, &dir.join("images").join(format!("{}.ppm", s.id)))?;
        save_mask(&s.seg_mask, &dir.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    Ok(())
}
