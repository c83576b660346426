//! Volumetric scan model and the `.vvol` on-disk format.
//!
//! Axis convention (fixed, no orientation matrix): `x` runs subject left to
//! right, `y` anterior to posterior (larger `y` is the subject's back) and `z`
//! caudal to cranial. Voxels are stored x-fastest, then y, then z.
//!
//! On disk a volume is a JSON header `<name>.vvol.json` next to the raw
//! little-endian int16 payload `<name>.vvol.raw`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;
pub const MIN_DIM: usize = 8;
pub const FORMAT_VERSION: u32 = 1;

const HEADER_SUFFIX: &str = ".vvol.json";
const RAW_SUFFIX: &str = ".vvol.raw";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("HU value {value} at voxel {index} outside [-1024, 3071]")]
    HuOutOfRange { index: usize, value: i16 },
    #[error("raw payload holds {actual} bytes, header requires {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("{plane:?} index {index} outside 0..{extent}")]
    SliceOutOfRange { plane: Plane, index: usize, extent: usize },
    #[error("header: {0}")]
    Header(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// `z` fixed; pixels indexed `(y, x)`.
    Axial,
    /// `y` fixed; pixels indexed `(z, x)`.
    Coronal,
    /// `x` fixed; pixels indexed `(z, y)`.
    Sagittal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<i16>) -> Result<Self, VolumeError> {
        let v = Self {
            dims,
            spacing_mm,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], hu: i16) -> Result<Self, VolumeError> {
        Self::new(dims, spacing_mm, vec![hu; dims.iter().product()])
    }

    /// Checks dims, spacing, payload length and the HU range.
    pub fn validate(&self) -> Result<(), VolumeError> {
        validate_geometry(self.dims, self.spacing_mm)?;
        let expected: usize = self.dims.iter().product();
        if self.voxels.len() != expected {
            return Err(VolumeError::SizeMismatch {
                expected: expected * 2,
                actual: self.voxels.len() * 2,
            });
        }
        if let Some((index, &value)) = self
            .voxels
            .iter()
            .enumerate()
            .find(|(_, &v)| !(HU_MIN..=HU_MAX).contains(&v))
        {
            return Err(VolumeError::HuOutOfRange { index, value });
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// One axial plane as a contiguous `ny × nx` slice.
    pub fn axial(&self, z: usize) -> &[i16] {
        let n = self.dims[0] * self.dims[1];
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Copies a 2D view. Rows run along the first free axis listed on
    /// [`Plane`], ascending; columns along the second.
    pub fn slice(&self, plane: Plane, index: usize) -> Result<SliceView, VolumeError> {
        let [nx, ny, nz] = self.dims;
        let extent = match plane {
            Plane::Axial => nz,
            Plane::Coronal => ny,
            Plane::Sagittal => nx,
        };
        if index >= extent {
            return Err(VolumeError::SliceOutOfRange { plane, index, extent });
        }
        let (rows, cols, pixels) = match plane {
            Plane::Axial => (ny, nx, self.axial(index).to_vec()),
            Plane::Coronal => {
                let mut p = Vec::with_capacity(nz * nx);
                for z in 0..nz {
                    let start = self.index(0, index, z);
                    p.extend_from_slice(&self.voxels[start..start + nx]);
                }
                (nz, nx, p)
            }
            Plane::Sagittal => {
                let mut p = Vec::with_capacity(nz * ny);
                for z in 0..nz {
                    for y in 0..ny {
                        p.push(self.get(index, y, z));
                    }
                }
                (nz, ny, p)
            }
        };
        Ok(SliceView {
            plane,
            index,
            rows,
            cols,
            pixels,
        })
    }

    /// Shifts the content by `dx` voxels along x, padding with `fill`.
    pub fn shifted_x(&self, dx: isize, fill: i16) -> Volume {
        let [nx, ny, nz] = self.dims;
        let mut voxels = vec![fill; self.voxels.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let src = x as isize - dx;
                    if src >= 0 && (src as usize) < nx {
                        voxels[self.index(x, y, z)] = self.get(src as usize, y, z);
                    }
                }
            }
        }
        Volume {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            voxels,
        }
    }
}

fn validate_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<(), VolumeError> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(VolumeError::Invalid(format!("dims {:?} must all be >= {}", dims, MIN_DIM)));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(VolumeError::Invalid(format!("spacing {:?} must all be > 0", spacing)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceView {
    pub plane: Plane,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<i16>,
}

impl SliceView {
    pub fn at(&self, row: usize, col: usize) -> i16 {
        self.pixels[row * self.cols + col]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

/// Resolves `<name>`, `<name>.vvol.json` or `<name>.vvol.raw` to the pair of
/// header and raw paths.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(HEADER_SUFFIX)
        .or_else(|| s.strip_suffix(RAW_SUFFIX))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}{HEADER_SUFFIX}")),
        PathBuf::from(format!("{stem}{RAW_SUFFIX}")),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let (header_path, raw_path) = volume_paths(path);
    let header_bytes = fs::read(&header_path).map_err(io_err(&header_path))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| VolumeError::Header(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(VolumeError::Header(format!("unsupported version {}", header.version)));
    }
    if header.dtype != "int16le" || header.order != "x-fastest" {
        return Err(VolumeError::Header(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    validate_geometry(header.dims, header.spacing_mm)?;
    let raw = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let expected = header.dims.iter().product::<usize>() * 2;
    if raw.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: raw.len(),
        });
    }
    let voxels = raw
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Volume::new(header.dims, header.spacing_mm, voxels)
}

pub fn header_json(v: &Volume) -> String {
    let header = Header {
        version: FORMAT_VERSION,
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        dtype: "int16le".into(),
        order: "x-fastest".into(),
    };
    let mut s = serde_json::to_string(&header).expect("header serializes");
    s.push('\n');
    s
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    v.validate()?;
    let (header_path, raw_path) = volume_paths(path);
    let mut raw = Vec::with_capacity(v.voxels.len() * 2);
    for hu in &v.voxels {
        raw.extend_from_slice(&hu.to_le_bytes());
    }
    write_atomic(&raw_path, &raw).map_err(io_err(&raw_path))?;
    write_atomic(&header_path, header_json(v).as_bytes()).map_err(io_err(&header_path))?;
    Ok(())
}
