//! Dense 3D grids and their on-disk representation.
//!
//! A volume is stored as two files sharing a stem: `<stem>.raw` holds the
//! voxels as little-endian 32-bit values with axis 0 outermost, and
//! `<stem>.json` is a sidecar `{"shape":[a0,a1,a2],"dtype":..,"spacing":[s0,s1,s2]}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel element types that have a fixed 32-bit on-disk encoding.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + 'static {
    const DTYPE: &'static str;
    fn to_le(self) -> [u8; 4];
    fn from_le(bytes: [u8; 4]) -> Self;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "float32";
    fn to_le(self) -> [u8; 4] {
        self.to_le_bytes()
    }
    fn from_le(bytes: [u8; 4]) -> Self {
        f32::from_le_bytes(bytes)
    }
}

impl Voxel for u32 {
    const DTYPE: &'static str = "uint32";
    fn to_le(self) -> [u8; 4] {
        self.to_le_bytes()
    }
    fn from_le(bytes: [u8; 4]) -> Self {
        u32::from_le_bytes(bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            shape,
            spacing,
            data: vec![T::default(); shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Self {
        Self {
            shape,
            spacing,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "volume {shape:?} needs {expected} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    /// Copies the sub-volume `lo..=hi` (inclusive voxel indices).
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Self {
        let shape = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                let start = self.index(i, j, lo[2]);
                data.extend_from_slice(&self.data[start..start + shape[2]]);
            }
        }
        Self {
            shape,
            spacing: self.spacing,
            data,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 3],
    dtype: String,
    spacing: [f64; 3],
}

/// Paths of the raw payload and JSON sidecar for a volume stem.
pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("raw"), stem.with_extension("json"))
}

impl<T: Voxel> Volume<T> {
    /// Writes `<stem>.raw` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let (raw_path, json_path) = volume_paths(stem);
        if let Some(parent) = raw_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&v.to_le());
        }
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
        let sidecar = Sidecar {
            shape: self.shape,
            dtype: T::DTYPE.to_string(),
            spacing: self.spacing,
        };
        let json = serde_json::to_string(&sidecar).map_err(|e| Error::json(&json_path, e))?;
        fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (raw_path, json_path) = volume_paths(stem);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
        if sidecar.dtype != T::DTYPE {
            return Err(Error::VolumeFormat {
                path: json_path,
                message: format!("expected dtype {}, found {}", T::DTYPE, sidecar.dtype),
            });
        }
        let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let expected = sidecar.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::VolumeFormat {
                path: raw_path,
                message: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_le([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::from_vec(sidecar.shape, sidecar.spacing, data)
    }
}
