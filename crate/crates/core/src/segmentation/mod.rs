//! Deterministic spine segmentation: body mask, spinal-cord tracking in axial
//! slices, the virtual sagittal section along the cord, column bounds and the
//! vertebra-scale patch sequence cut from it.

mod body;
mod column;
mod cord;
mod patches;
mod sagittal;

use std::path::PathBuf;

use thiserror::Error;

pub use body::{compute_body_mask, BodyMask};
pub use column::{segment_column, ColumnSegment};
pub use cord::{cord_deviation, locate_spinal_cord, CordDeviation, CordLine, CordPoint};
pub use patches::{
    encode_patch_file, extract_patches, normalize_hu, patch_count, read_patch_file, resample_bilinear, write_patch_file, Patch,
    PatchRect, PatchSequence, PATCH_FILE_SUFFIX, PATCH_PIXELS, PATCH_SIDE,
};
pub use sagittal::{build_virtual_sagittal, SagittalImage};

use crate::phantom::GroundTruth;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationConfig {
    pub bone_hu_threshold: f64,
    /// Voxels below this value count as canal content.
    pub canal_hu_max: f64,
    pub smoothing_window: usize,
    /// Largest per-slice change of the smoothed cord line, in voxels.
    pub max_cord_step: f64,
    /// Patch side as a multiple of the average column width.
    pub window_scale: f64,
    /// Patch stride as a multiple of the average column width.
    pub stride_scale: f64,
    pub hu_window: (f64, f64),
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            bone_hu_threshold: 200.0,
            canal_hu_max: 100.0,
            smoothing_window: 9,
            max_cord_step: 2.0,
            window_scale: 1.25,
            stride_scale: 0.5,
            hu_window: (-100.0, 1000.0),
        }
    }
}

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("no body found")]
    NoBody,
    #[error("body present on {present} of {total} slices, need at least half")]
    SparseBody { present: usize, total: usize },
    #[error("cord localization failed: canal found on {detected} of {total} slices")]
    CordNotFound { detected: usize, total: usize },
    #[error("column segmentation failed: bone found on {detected} of {total} rows")]
    ColumnNotFound { detected: usize, total: usize },
    #[error("column height {height:.1} shorter than one patch window {window:.1}")]
    ColumnTooShort { height: f64, window: f64 },
    #[error("patch file {path}: {reason}")]
    PatchFile { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SegmentationError {
    /// Pipeline stage the failure belongs to.
    pub fn stage(&self) -> &'static str {
        match self {
            SegmentationError::NoBody | SegmentationError::SparseBody { .. } => "body_mask",
            SegmentationError::CordNotFound { .. } => "cord",
            SegmentationError::ColumnNotFound { .. } => "column",
            _ => "patches",
        }
    }
}

/// Every intermediate product of segmenting one volume.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub cord: CordLine,
    pub sagittal: SagittalImage,
    pub column: ColumnSegment,
    pub patches: PatchSequence,
}

/// Runs all stages on one volume. Patches get labels when `truth` is given.
pub fn segment_volume(
    study_id: &str,
    volume: &Volume,
    config: &SegmentationConfig,
    truth: Option<&GroundTruth>,
) -> Result<Segmentation, SegmentationError> {
    let mask = compute_body_mask(volume)?;
    let cord = locate_spinal_cord(volume, &mask, config)?;
    let sagittal = build_virtual_sagittal(volume, &cord);
    let column = segment_column(&sagittal, config.bone_hu_threshold)?;
    let patches = extract_patches(study_id, &sagittal, &column, config, truth)?;
    Ok(Segmentation {
        cord,
        sagittal,
        column,
        patches,
    })
}
