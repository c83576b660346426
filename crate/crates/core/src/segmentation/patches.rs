use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::column::ColumnSegment;
use super::sagittal::SagittalImage;
use super::{SegmentationConfig, SegmentationError};
use crate::io::write_atomic;
use crate::phantom::GroundTruth;

pub const PATCH_SIDE: usize = 32;
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE;
pub const PATCH_FILE_SUFFIX: &str = ".vcfp";
/// Minimum share of a fractured vertebra's height a patch must cover to be positive.
pub const LABEL_OVERLAP: f64 = 0.5;

const MAGIC: &[u8; 4] = b"VCFP";
const VERSION: u16 = 1;
const UNLABELED: u8 = 255;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2;
const RECORD_LEN: usize = PATCH_PIXELS * 4 + 4;

/// Source window in volume voxel coordinates (`z` slices, `y` rows).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRect {
    pub z_min: f64,
    pub z_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl PatchRect {
    pub fn contains(&self, y: f64, z: f64) -> bool {
        (self.z_min..=self.z_max).contains(&z) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn z_overlap(&self, z_min: f64, z_max: f64) -> f64 {
        (self.z_max.min(z_max) - self.z_min.max(z_min)).max(0.0)
    }

    /// Volume `(y, z)` under the centre of patch pixel `(row, col)`.
    pub fn pixel_centre(&self, row: usize, col: usize) -> (f64, f64) {
        let dz = (self.z_max - self.z_min) / PATCH_SIDE as f64;
        let dy = (self.y_max - self.y_min) / PATCH_SIDE as f64;
        (self.y_min + (col as f64 + 0.5) * dy, self.z_max - (row as f64 + 0.5) * dz)
    }
}

/// A 32×32 patch in `[0, 1]`, row 0 cranial, column 0 anterior.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Vec<f32>,
    pub rect: Option<PatchRect>,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub study_id: String,
    /// Cranial to caudal.
    pub patches: Vec<Patch>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn normalize_hu(hu: f64, (lo, hi): (f64, f64)) -> f32 {
    ((hu.clamp(lo, hi) - lo) / (hi - lo)) as f32
}

/// Number of windows that fit a column of `height` rows.
pub fn patch_count(height: f64, window: f64, stride: f64) -> usize {
    if height < window {
        0
    } else {
        ((height - window) / stride).floor() as usize + 1
    }
}

/// Bilinear sample of a row-major image at continuous pixel-centre
/// coordinates, clamped to the border.
pub fn resample_bilinear(img: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| img[yy * w + xx] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Square windows of side `window_scale·w` on the column midline, stepped
/// cranial to caudal by `stride_scale·w`, centred so the leftover column is
/// split evenly between both ends.
pub fn extract_patches(
    study_id: &str,
    s: &SagittalImage,
    col: &ColumnSegment,
    config: &SegmentationConfig,
    truth: Option<&GroundTruth>,
) -> Result<PatchSequence, SegmentationError> {
    let w = col.average_width_w;
    let side = config.window_scale * w;
    let stride = config.stride_scale * w;
    let (first, last) = col.extent();
    let height = (last + 1 - first) as f64;
    let n = patch_count(height, side, stride);
    if n == 0 {
        return Err(SegmentationError::ColumnTooShort { height, window: side });
    }
    let offset = (height - side - (n - 1) as f64 * stride) / 2.0;
    let normalized: Vec<f32> = s.pixels.iter().map(|&h| normalize_hu(h as f64, config.hu_window)).collect();
    let step = side / PATCH_SIDE as f64;
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        // Continuous row coordinates: row r spans [r, r + 1).
        let top = (last + 1) as f64 - offset - i as f64 * stride;
        let bottom = top - side;
        let r_lo = bottom.floor().max(0.0) as usize;
        let r_hi = (top.ceil() as usize).min(s.rows).max(r_lo + 1);
        let centre = (r_lo..r_hi).map(|r| col.midline(r)).sum::<f64>() / (r_hi - r_lo) as f64 + 0.5;
        let left = centre - side / 2.0;
        let mut pixels = Vec::with_capacity(PATCH_PIXELS);
        for pr in 0..PATCH_SIDE {
            let row = top - (pr as f64 + 0.5) * step - 0.5;
            for pc in 0..PATCH_SIDE {
                let c = left + (pc as f64 + 0.5) * step - 0.5;
                pixels.push(resample_bilinear(&normalized, s.cols, s.rows, c, row));
            }
        }
        let rect = PatchRect {
            z_min: s.z_min as f64 + bottom - 0.5,
            z_max: s.z_min as f64 + top - 0.5,
            y_min: left - 0.5,
            y_max: left + side - 0.5,
        };
        let label = truth.map(|t| {
            t.fractured_boxes()
                .any(|b| rect.z_overlap(b.z_min, b.z_max) >= LABEL_OVERLAP * (b.z_max - b.z_min))
        });
        patches.push(Patch {
            pixels,
            rect: Some(rect),
            label,
        });
    }
    Ok(PatchSequence {
        study_id: study_id.to_string(),
        patches,
    })
}

pub fn encode_patch_file(seq: &PatchSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.len() * RECORD_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    out.extend_from_slice(&(PATCH_SIDE as u16).to_le_bytes());
    out.extend_from_slice(&(PATCH_SIDE as u16).to_le_bytes());
    for p in &seq.patches {
        assert_eq!(p.pixels.len(), PATCH_PIXELS, "patch must be 32x32");
        for v in &p.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match p.label {
            Some(true) => 1,
            Some(false) => 0,
            None => UNLABELED,
        });
        out.extend_from_slice(&[0; 3]);
    }
    out
}

pub fn write_patch_file(path: &Path, seq: &PatchSequence) -> Result<(), SegmentationError> {
    write_atomic(path, &encode_patch_file(seq)).map_err(|source| SegmentationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a patch file; the study id is the file name without its suffix.
pub fn read_patch_file(path: &Path) -> Result<PatchSequence, SegmentationError> {
    let bytes = fs::read(path).map_err(|source| SegmentationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| SegmentationError::PatchFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing VCFP header".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let (h, w) = (u16_at(10) as usize, u16_at(12) as usize);
    if (h, w) != (PATCH_SIDE, PATCH_SIDE) {
        return Err(bad(format!("patch size {h}x{w}, expected 32x32")));
    }
    let expected = HEADER_LEN + n * RECORD_LEN;
    if bytes.len() != expected {
        return Err(bad(format!("{} bytes, header implies {expected}", bytes.len())));
    }
    let mut patches = Vec::with_capacity(n);
    for rec in bytes[HEADER_LEN..].chunks_exact(RECORD_LEN) {
        let pixels: Vec<f32> = rec[..PATCH_PIXELS * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("pixel outside [0, 1]".into()));
        }
        let label = match rec[PATCH_PIXELS * 4] {
            0 => Some(false),
            1 => Some(true),
            UNLABELED => None,
            other => return Err(bad(format!("label byte {other}"))),
        };
        patches.push(Patch {
            pixels,
            rect: None,
            label,
        });
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let study_id = name.strip_suffix(PATCH_FILE_SUFFIX).unwrap_or(&name).to_string();
    Ok(PatchSequence { study_id, patches })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(hu: i16, rows: usize, cols: usize) -> (SagittalImage, ColumnSegment) {
        let s = SagittalImage {
            z_min: 0,
            rows,
            cols,
            pixels: vec![hu; rows * cols],
            x_source: vec![0; rows],
            cord_y: vec![cols as f64 - 2.0; rows],
        };
        let col = ColumnSegment {
            anterior: vec![4.0; rows],
            posterior: vec![11.0; rows],
            detected: vec![true; rows],
            average_width_w: 8.0,
            column_mask: vec![false; rows * cols],
            rows,
            cols,
        };
        (s, col)
    }

    #[test]
    fn clamp_bounds_give_flat_patches() {
        let cfg = SegmentationConfig::default();
        for (hu, expect) in [(-100, 0.0), (-500, 0.0), (1000, 1.0), (2000, 1.0)] {
            let (s, col) = constant_image(hu, 40, 20);
            let seq = extract_patches("s", &s, &col, &cfg, None).unwrap();
            assert!(seq.patches.iter().all(|p| p.pixels.iter().all(|&v| v == expect)));
        }
    }

    #[test]
    fn count_matches_formula_and_order_descends() {
        let cfg = SegmentationConfig::default();
        let (s, col) = constant_image(0, 40, 20);
        let seq = extract_patches("s", &s, &col, &cfg, None).unwrap();
        assert_eq!(seq.len(), ((40.0 - 10.0) / 4.0f64).floor() as usize + 1);
        for pair in seq.patches.windows(2) {
            let (a, b) = (pair[0].rect.unwrap(), pair[1].rect.unwrap());
            assert!(b.z_max < a.z_max);
            assert!((a.z_max - b.z_max - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn short_column_is_an_error() {
        let (s, col) = constant_image(0, 9, 20);
        let err = extract_patches("s", &s, &col, &SegmentationConfig::default(), None).unwrap_err();
        assert!(matches!(err, SegmentationError::ColumnTooShort { .. }));
    }

    #[test]
    fn bilinear_interpolates_and_clamps() {
        let img = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(resample_bilinear(&img, 2, 2, 0.5, 0.5), 1.5);
        assert_eq!(resample_bilinear(&img, 2, 2, -3.0, 9.0), 2.0);
    }

    #[test]
    fn patch_file_round_trip() {
        let mut pixels = vec![0.25f32; PATCH_PIXELS];
        pixels[5] = 1.0;
        let seq = PatchSequence {
            study_id: "study-0007".into(),
            patches: vec![
                Patch { pixels: pixels.clone(), rect: None, label: Some(true) },
                Patch { pixels, rect: None, label: None },
            ],
        };
        let bytes = encode_patch_file(&seq);
        assert_eq!(bytes.len(), 14 + 2 * 4100);
        assert_eq!(&bytes[..4], b"VCFP");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("study-0007{PATCH_FILE_SUFFIX}"));
        write_patch_file(&path, &seq).unwrap();
        assert_eq!(read_patch_file(&path).unwrap(), seq);
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_patch_file(&path), Err(SegmentationError::PatchFile { .. })));
    }
}
