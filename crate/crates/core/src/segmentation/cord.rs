use serde::{Deserialize, Serialize};

use super::body::BodyMask;
use super::{SegmentationConfig, SegmentationError};
use crate::phantom::GroundTruth;
use crate::volume::Volume;

const MIN_BONE_RUN: usize = 2;
const MIN_CANAL_VOXELS: usize = 2;
const MIN_CANAL_FRACTION: f64 = 0.6;
const MIN_BODY_SLICE_FRACTION: f64 = 0.5;
const MIN_DETECTION_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CordPoint {
    pub z: usize,
    pub x: f64,
    pub y: f64,
}

/// Smoothed cord position for every slice of `valid_range` (inclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CordLine {
    pub points: Vec<CordPoint>,
    pub valid_range: (usize, usize),
    /// Slices where the canal was detected directly rather than interpolated.
    pub detected: usize,
}

impl CordLine {
    pub fn at(&self, z: usize) -> Option<&CordPoint> {
        let (lo, hi) = self.valid_range;
        (lo..=hi).contains(&z).then(|| &self.points[z - lo])
    }
}

/// Runs of bone along a scan, as `[start, end)` positions in scan order.
fn bone_runs(bone: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bone.len() {
        if bone[i] {
            let start = i;
            while i < bone.len() && bone[i] {
                i += 1;
            }
            if i - start >= MIN_BONE_RUN {
                runs.push((start, i));
            }
        } else {
            i += 1;
        }
    }
    runs
}

/// Canal candidates on one axial slice: for each midline column, the gap
/// between the first two bone runs met scanning anteriorly from the back.
/// Returns `(x, gap centre y, weight)` per accepted column.
fn canal_columns(
    hu: &[i16],
    mask: &[bool],
    nx: usize,
    ny: usize,
    config: &SegmentationConfig,
) -> Vec<(usize, f64, usize)> {
    let cols: Vec<usize> = (0..nx).filter(|&x| (0..ny).any(|y| mask[y * nx + x])).collect();
    let (Some(&left), Some(&right)) = (cols.first(), cols.last()) else {
        return Vec::new();
    };
    let mid = (left + right) as f64 / 2.0;
    let band = (right - left + 1) as f64 / 4.0;
    let x_lo = (mid - band).ceil().max(0.0) as usize;
    let x_hi = ((mid + band).floor() as usize).min(nx - 1);
    let mut found = Vec::new();
    for x in x_lo..=x_hi {
        let Some(back) = (0..ny).rev().find(|&y| mask[y * nx + x]) else {
            continue;
        };
        // Scan position s corresponds to y = back - s.
        let scan: Vec<f64> = (0..=back).map(|s| hu[(back - s) * nx + x] as f64).collect();
        let bone: Vec<bool> = scan.iter().map(|&h| h >= config.bone_hu_threshold).collect();
        let runs = bone_runs(&bone);
        if runs.len() < 2 {
            continue;
        }
        let (gap_lo, gap_hi) = (runs[0].1, runs[1].0);
        let span = gap_hi - gap_lo;
        let soft: Vec<usize> = (gap_lo..gap_hi).filter(|&s| scan[s] < config.canal_hu_max).collect();
        if soft.len() < MIN_CANAL_VOXELS || (soft.len() as f64) < MIN_CANAL_FRACTION * span as f64 {
            continue;
        }
        let centre_s = soft.iter().sum::<usize>() as f64 / soft.len() as f64;
        found.push((x, back as f64 - centre_s, soft.len()));
    }
    found
}

fn detect_slice(hu: &[i16], mask: &[bool], nx: usize, ny: usize, config: &SegmentationConfig) -> Option<(f64, f64)> {
    let cols = canal_columns(hu, mask, nx, ny, config);
    let total: usize = cols.iter().map(|c| c.2).sum();
    if total == 0 {
        return None;
    }
    let w = total as f64;
    let x = cols.iter().map(|&(x, _, n)| x as f64 * n as f64).sum::<f64>() / w;
    let y = cols.iter().map(|&(_, y, n)| y * n as f64).sum::<f64>() / w;
    Some((x, y))
}

fn interpolate_gaps(values: &[Option<(f64, f64)>]) -> Vec<(f64, f64)> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let mut out = Vec::with_capacity(values.len());
    let mut k = 0;
    for i in 0..values.len() {
        if let Some(v) = values[i] {
            out.push(v);
            continue;
        }
        while k + 1 < known.len() && known[k + 1] < i {
            k += 1;
        }
        let (a, b) = (known[k], known[k + 1]);
        let (va, vb) = (values[a].unwrap(), values[b].unwrap());
        let t = (i - a) as f64 / (b - a) as f64;
        out.push((va.0 + t * (vb.0 - va.0), va.1 + t * (vb.1 - va.1)));
    }
    out
}

/// Centered moving average with the window truncated at the ends.
fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn clamp_steps(v: &mut [f64], max_step: f64) {
    for i in 1..v.len() {
        v[i] = v[i].clamp(v[i - 1] - max_step, v[i - 1] + max_step);
    }
}

/// Tracks the spinal canal slice by slice: from the posterior body boundary
/// near the midline, the first low-HU gap enclosed between two bone runs.
pub fn locate_spinal_cord(
    v: &Volume,
    mask: &BodyMask,
    config: &SegmentationConfig,
) -> Result<CordLine, SegmentationError> {
    let [nx, ny, nz] = v.dims();
    let present = mask.slices_with_body();
    if (present as f64) < MIN_BODY_SLICE_FRACTION * nz as f64 {
        return Err(SegmentationError::SparseBody { present, total: nz });
    }
    let raw: Vec<Option<(f64, f64)>> = (0..nz)
        .map(|z| detect_slice(v.axial(z), mask.slice(z), nx, ny, config))
        .collect();
    let detected = raw.iter().filter(|d| d.is_some()).count();
    if detected == 0 || (detected as f64) < MIN_DETECTION_FRACTION * nz as f64 {
        return Err(SegmentationError::CordNotFound { detected, total: nz });
    }
    let first = raw.iter().position(|d| d.is_some()).unwrap();
    let last = raw.iter().rposition(|d| d.is_some()).unwrap();
    let span = &raw[first..=last];
    let filled = interpolate_gaps(span);
    let xs: Vec<f64> = filled.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = filled.iter().map(|p| p.1).collect();
    let mut xs = moving_average(&xs, config.smoothing_window.max(1));
    let mut ys = moving_average(&ys, config.smoothing_window.max(1));
    clamp_steps(&mut xs, config.max_cord_step);
    clamp_steps(&mut ys, config.max_cord_step);
    let points = (0..xs.len())
        .map(|i| CordPoint {
            z: first + i,
            x: xs[i],
            y: ys[i],
        })
        .collect();
    Ok(CordLine {
        points,
        valid_range: (first, last),
        detected,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CordDeviation {
    pub mean: f64,
    pub max: f64,
    /// Slices present in both lines.
    pub compared: usize,
}

/// Euclidean in-plane distance to the ground-truth cord over shared slices.
pub fn cord_deviation(cord: &CordLine, truth: &GroundTruth) -> Option<CordDeviation> {
    let d: Vec<f64> = truth
        .cord_line
        .iter()
        .filter_map(|t| cord.at(t.z).map(|p| (p.x - t.x).hypot(p.y - t.y)))
        .collect();
    if d.is_empty() {
        return None;
    }
    Some(CordDeviation {
        mean: d.iter().sum::<f64>() / d.len() as f64,
        max: d.iter().cloned().fold(0.0, f64::max),
        compared: d.len(),
    })
}
