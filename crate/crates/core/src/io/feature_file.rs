//! Binary slide feature container.
//!
//! ```text
//! offset          size      field
//! 0               4         magic "WSIF"
//! 4               2         version (u16 LE) = 1
//! 6               2         reserved, must be 0
//! 8               4         N_p, patch count (u32 LE, >= 1)
//! 12              4         d, embedding width (u32 LE, >= 1)
//! 16              4         patch stride in level-0 pixels (u32 LE, >= 1)
//! 20              4·N_p·d   features, f32 LE, row-major (one row per patch)
//! 20 + 4·N_p·d    8·N_p     coordinates, (x: u32 LE, y: u32 LE) per patch
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::PatchCoordinates;
use crate::tensor::Matrix;

use super::binary::{put_u16, put_u32, to_u32, Reader};

pub const FEATURE_MAGIC: &[u8; 4] = b"WSIF";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SlideFeatureFile {
    n_patches: usize,
    dim: usize,
    patch_stride: u32,
    payload: Vec<f32>,
    coords: Vec<(u32, u32)>,
}

impl SlideFeatureFile {
    pub fn new(
        dim: usize,
        patch_stride: u32,
        payload: Vec<f32>,
        coords: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let n_patches = coords.len();
        if n_patches == 0 || dim == 0 || patch_stride == 0 {
            return Err(Error::Validation(format!(
                "feature file needs N_p >= 1, d >= 1, stride >= 1 (got {n_patches}, {dim}, {patch_stride})"
            )));
        }
        if payload.len() != n_patches * dim {
            return Err(Error::Validation(format!(
                "payload has {} values, expected {n_patches} x {dim}",
                payload.len()
            )));
        }
        if payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("payload contains non-finite values".into()));
        }
        Ok(Self {
            n_patches,
            dim,
            patch_stride,
            payload,
            coords,
        })
    }

    /// Narrows a 64-bit feature matrix to the 32-bit storage format.
    pub fn from_matrix(features: &Matrix, coords: &PatchCoordinates) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} coordinates",
                features.rows(),
                coords.len()
            )));
        }
        Self::new(
            features.cols(),
            coords.patch_stride(),
            features.as_slice().iter().map(|&v| v as f32).collect(),
            coords.positions().to_vec(),
        )
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_stride(&self) -> u32 {
        self.patch_stride
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    pub fn coords(&self) -> &[(u32, u32)] {
        &self.coords
    }

    /// Features promoted to `f64`.
    pub fn features(&self) -> Matrix {
        Matrix::from_vec(
            self.n_patches,
            self.dim,
            self.payload.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("payload validated at construction")
    }

    pub fn coordinates(&self) -> Result<PatchCoordinates> {
        PatchCoordinates::new(self.coords.clone(), self.patch_stride)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out =
            Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.payload.len() + 8 * self.n_patches);
        out.extend_from_slice(FEATURE_MAGIC);
        put_u16(&mut out, FEATURE_VERSION);
        put_u16(&mut out, 0);
        put_u32(&mut out, to_u32(self.n_patches, "patch count")?);
        put_u32(&mut out, to_u32(self.dim, "feature width")?);
        put_u32(&mut out, self.patch_stride);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &(x, y) in &self.coords {
            put_u32(&mut out, x);
            put_u32(&mut out, y);
        }
        Ok(out)
    }

    /// Parses and validates the header before touching the payload.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != FEATURE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, not a slide feature file".into(),
            });
        }
        let version = r.u16("version")?;
        if version != FEATURE_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        if r.u16("reserved")? != 0 {
            return Err(Error::Format {
                offset: 6,
                message: "reserved header field is non-zero".into(),
            });
        }
        let n_patches = r.u32("patch count")? as usize;
        let dim = r.u32("feature width")? as usize;
        let patch_stride = r.u32("patch stride")?;
        if n_patches == 0 || dim == 0 || patch_stride == 0 {
            return Err(Error::Format {
                offset: 8,
                message: format!(
                    "header has N_p={n_patches}, d={dim}, stride={patch_stride}; all must be >= 1"
                ),
            });
        }
        let expected = n_patches
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(8 * n_patches))
            .and_then(|v| v.checked_add(FEATURE_HEADER_LEN))
            .ok_or_else(|| r.format_error("header sizes overflow"))?;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                message: format!(
                    "file length {} does not match header (expected {expected} bytes)",
                    bytes.len()
                ),
            });
        }
        let raw = r.take(4 * n_patches * dim, "payload")?;
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: (FEATURE_HEADER_LEN + 4 * pos) as u64,
                message: "non-finite feature value".into(),
            });
        }
        let mut coords = Vec::with_capacity(n_patches);
        for _ in 0..n_patches {
            coords.push((r.u32("x")?, r.u32("y")?));
        }
        Ok(Self {
            n_patches,
            dim,
            patch_stride,
            payload,
            coords,
        })
    }
}

pub fn write_feature_file(file: &SlideFeatureFile, path: &Path) -> Result<()> {
    let bytes = file.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<SlideFeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SlideFeatureFile::decode(&bytes)
}
