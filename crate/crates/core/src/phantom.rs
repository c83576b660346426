//! Procedural spine phantoms with known ground truth.
//!
//! Each vertebra is an elliptic-cylinder body (cortical shell around a
//! trabecular core) with a posterior arch ring around the spinal canal and a
//! short spinous process. The column follows a lateral sinusoid (scoliosis).
//! A fracture is a wedge: the superior endplate tilts so the anterior height
//! drops by the planned fraction while the posterior height is kept, and the
//! lost bone is replaced by soft tissue.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{write_manifest, Label, Sex, StudyRecord};
use crate::io::write_atomic;
use crate::volume::{save_volume, Volume, VolumeError, HU_MAX, HU_MIN};

pub mod tissue {
    pub const AIR: i16 = -1000;
    pub const SOFT: i16 = 40;
    pub const CANAL: i16 = 30;
    pub const TRABECULAR: i16 = 150;
    pub const CORTICAL: i16 = 600;
    pub const ARCH: i16 = 500;
    pub const ALL: [i16; 6] = [AIR, SOFT, CANAL, TRABECULAR, CORTICAL, ARCH];
}

/// Smallest height loss counted as a fracture (Genant grade 1).
pub const FRACTURE_THRESHOLD: f64 = 0.20;
pub const MAX_HEIGHT_LOSS: f64 = 0.60;
/// Required clearance between the anatomy and the volume border, in voxels.
pub const MARGIN_VOXELS: f64 = 4.0;

const SHELL_MM: f64 = 2.0;
const SPINOUS_LENGTH_MM: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("geometry does not fit the volume: {0}")]
    Overflow(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fracture {
    /// 0 is the most cranial vertebra.
    pub vertebra: usize,
    /// Fractional anterior height loss.
    pub height_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub vertebra_count: usize,
    pub vertebra_height_mm: f64,
    pub disc_height_mm: f64,
    /// Antero-posterior semi-axis of the vertebral body.
    pub body_radius_mm: f64,
    pub scoliosis_amplitude_mm: f64,
    pub scoliosis_period_mm: f64,
    pub fracture_plan: Vec<Fracture>,
    pub noise_sigma_hu: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96, 96, 192],
            spacing_mm: [1.5, 1.5, 1.5],
            vertebra_count: 10,
            vertebra_height_mm: 20.0,
            disc_height_mm: 6.0,
            body_radius_mm: 15.0,
            scoliosis_amplitude_mm: 0.0,
            scoliosis_period_mm: 160.0,
            fracture_plan: Vec::new(),
            noise_sigma_hu: 20.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CordPoint {
    pub z: usize,
    pub x: f64,
    pub y: f64,
}

/// Axis-aligned extent of a vertebral body in voxel coordinates (full,
/// unfractured height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertebraBox {
    pub z_min: f64,
    pub z_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractureLabel {
    pub fractured: bool,
    pub height_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cord_line: Vec<CordPoint>,
    /// `(x, y, z)` voxel coordinates.
    pub vertebra_centers: Vec<[f64; 3]>,
    pub vertebra_boxes: Vec<VertebraBox>,
    pub fracture_labels: Vec<FractureLabel>,
    pub study_label: bool,
}

impl GroundTruth {
    pub fn fractured_boxes(&self) -> impl Iterator<Item = &VertebraBox> {
        self.vertebra_boxes
            .iter()
            .zip(&self.fracture_labels)
            .filter(|(_, l)| l.fractured)
            .map(|(b, _)| b)
    }

    pub fn cord_at(&self, z: usize) -> Option<&CordPoint> {
        self.cord_line.iter().find(|p| p.z == z)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ground truth serializes");
        s.push('\n');
        s
    }
}

/// Millimetre geometry derived from a spec.
#[derive(Clone, Debug)]
pub struct Anatomy {
    pub torso_center: [f64; 2],
    pub torso_semi_axes: [f64; 2],
    pub body_center_y: f64,
    pub body_semi_axes: [f64; 2],
    pub canal_center_y: f64,
    pub canal_radius: f64,
    pub arch_thickness: f64,
    pub spinous_half_width: f64,
    pub column_bottom: f64,
    pub column_top: f64,
    pub center_x: f64,
    amplitude: f64,
    period: f64,
    vertebra_height: f64,
    pitch: f64,
    count: usize,
    height_loss: Vec<f64>,
}

impl Anatomy {
    pub fn new(spec: &PhantomSpec) -> Self {
        let [nx, ny, nz] = spec.dims;
        let [sx, sy, sz] = spec.spacing_mm;
        let torso_center = [(nx - 1) as f64 * sx / 2.0, (ny - 1) as f64 * sy / 2.0];
        let torso_semi_axes = [0.45 * nx as f64 * sx, 0.42 * ny as f64 * sy];
        let r = spec.body_radius_mm;
        let canal_radius = 0.4 * r;
        let canal_center_y = torso_center[1] + 0.5 * torso_semi_axes[1];
        let body_center_y = canal_center_y - canal_radius - r;
        let n = spec.vertebra_count;
        let total = n as f64 * spec.vertebra_height_mm + n.saturating_sub(1) as f64 * spec.disc_height_mm;
        let column_bottom = ((nz - 1) as f64 * sz - total) / 2.0;
        let mut height_loss = vec![0.0; n];
        for f in &spec.fracture_plan {
            if f.vertebra < n {
                height_loss[f.vertebra] = f.height_loss;
            }
        }
        Self {
            torso_center,
            torso_semi_axes,
            body_center_y,
            body_semi_axes: [1.25 * r, r],
            canal_center_y,
            canal_radius,
            arch_thickness: 0.27 * r,
            spinous_half_width: (0.75 * sx).max(2.0),
            column_bottom,
            column_top: column_bottom + total,
            center_x: torso_center[0],
            amplitude: spec.scoliosis_amplitude_mm,
            period: spec.scoliosis_period_mm,
            vertebra_height: spec.vertebra_height_mm,
            pitch: spec.vertebra_height_mm + spec.disc_height_mm,
            count: n,
            height_loss,
        }
    }

    /// Lateral position (mm) of the column axis at height `z_mm`.
    pub fn axis_x(&self, z_mm: f64) -> f64 {
        self.center_x
            + self.amplitude * (2.0 * std::f64::consts::PI * (z_mm - self.column_bottom) / self.period).sin()
    }

    /// `(bottom, top)` in mm of vertebra `k` at full (posterior) height.
    pub fn vertebra_span(&self, k: usize) -> (f64, f64) {
        let top = self.column_top - k as f64 * self.pitch;
        (top - self.vertebra_height, top)
    }

    fn vertebra_at(&self, z_mm: f64) -> Option<usize> {
        let k = ((self.column_top - z_mm) / self.pitch).floor();
        if k < 0.0 || k >= self.count as f64 {
            return None;
        }
        let k = k as usize;
        let (lo, hi) = self.vertebra_span(k);
        (z_mm >= lo && z_mm <= hi).then_some(k)
    }

    fn spine_outer_extent(&self) -> f64 {
        self.body_semi_axes[0].max(self.canal_radius + self.arch_thickness)
    }

    fn spinous_end(&self) -> f64 {
        self.canal_center_y + self.canal_radius + self.arch_thickness + SPINOUS_LENGTH_MM
    }

    /// Noiseless tissue value at a point in mm.
    pub fn tissue_at(&self, x: f64, y: f64, z: f64) -> i16 {
        let tx = (x - self.torso_center[0]) / self.torso_semi_axes[0];
        let ty = (y - self.torso_center[1]) / self.torso_semi_axes[1];
        if tx * tx + ty * ty > 1.0 {
            return tissue::AIR;
        }
        let ax = self.axis_x(z);
        if let Some(k) = self.vertebra_at(z) {
            let (bottom, top) = self.vertebra_span(k);
            let [rx, ry] = self.body_semi_axes;
            let ex = (x - ax) / rx;
            let ey = (y - self.body_center_y) / ry;
            let q = ex * ex + ey * ey;
            if q <= 1.0 {
                let anterior = ((self.body_center_y + ry - y) / (2.0 * ry)).clamp(0.0, 1.0);
                let eff_top = bottom + self.vertebra_height * (1.0 - self.height_loss[k] * anterior);
                if z <= eff_top {
                    let radial_margin = (1.0 - q.sqrt()) * rx.min(ry);
                    let shell = radial_margin < SHELL_MM || z - bottom < SHELL_MM || eff_top - z < SHELL_MM;
                    return if shell { tissue::CORTICAL } else { tissue::TRABECULAR };
                }
                return tissue::SOFT;
            }
            let d = (x - ax).hypot(y - self.canal_center_y);
            if d > self.canal_radius && d <= self.canal_radius + self.arch_thickness {
                return tissue::ARCH;
            }
            if (x - ax).abs() <= self.spinous_half_width
                && y >= self.canal_center_y + self.canal_radius
                && y <= self.spinous_end()
                && z <= top
            {
                return tissue::ARCH;
            }
        }
        if (x - ax).hypot(y - self.canal_center_y) <= self.canal_radius {
            return tissue::CANAL;
        }
        tissue::SOFT
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let spec_err = |m: String| Err(PhantomError::Spec(m));
        if self.dims.iter().any(|&d| d < crate::volume::MIN_DIM) {
            return spec_err(format!("dims {:?} too small", self.dims));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return spec_err(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.vertebra_count < 3 {
            return spec_err(format!("vertebra_count {} < 3", self.vertebra_count));
        }
        for (name, v) in [
            ("vertebra_height_mm", self.vertebra_height_mm),
            ("disc_height_mm", self.disc_height_mm),
            ("body_radius_mm", self.body_radius_mm),
            ("scoliosis_period_mm", self.scoliosis_period_mm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return spec_err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.scoliosis_amplitude_mm >= 0.0) || !(self.noise_sigma_hu >= 0.0) {
            return spec_err("scoliosis amplitude and noise sigma must be >= 0".into());
        }
        let mut seen = vec![false; self.vertebra_count];
        for f in &self.fracture_plan {
            if f.vertebra >= self.vertebra_count {
                return spec_err(format!("fracture at vertebra {} of {}", f.vertebra, self.vertebra_count));
            }
            if seen[f.vertebra] {
                return spec_err(format!("vertebra {} fractured twice", f.vertebra));
            }
            seen[f.vertebra] = true;
            if !(FRACTURE_THRESHOLD..=MAX_HEIGHT_LOSS).contains(&f.height_loss) {
                return spec_err(format!("height loss {} outside [0.20, 0.60]", f.height_loss));
            }
        }
        self.check_fit()
    }

    fn check_fit(&self) -> Result<(), PhantomError> {
        let a = Anatomy::new(self);
        let [nx, ny, nz] = self.dims;
        let [sx, sy, sz] = self.spacing_mm;
        let overflow = |m: String| Err(PhantomError::Overflow(m));
        let (z_lo, z_hi) = (MARGIN_VOXELS * sz, (nz as f64 - 1.0 - MARGIN_VOXELS) * sz);
        if a.column_bottom < z_lo || a.column_top > z_hi {
            return overflow(format!(
                "column spans {:.1}..{:.1} mm, allowed {:.1}..{:.1}",
                a.column_bottom, a.column_top, z_lo, z_hi
            ));
        }
        let lateral = a.spine_outer_extent() + self.scoliosis_amplitude_mm;
        let (x_lo, x_hi) = (MARGIN_VOXELS * sx, (nx as f64 - 1.0 - MARGIN_VOXELS) * sx);
        if a.center_x - lateral < x_lo || a.center_x + lateral > x_hi {
            return overflow(format!("lateral extent ±{lateral:.1} mm around x={:.1}", a.center_x));
        }
        let y_front = a.body_center_y - a.body_semi_axes[1];
        let y_back = a.spinous_end();
        if y_front < MARGIN_VOXELS * sy || y_back > (ny as f64 - 1.0 - MARGIN_VOXELS) * sy {
            return overflow(format!("spine spans y {y_front:.1}..{y_back:.1} mm"));
        }
        let torso_front = a.torso_center[1] - a.torso_semi_axes[1];
        let torso_back = a.torso_center[1] + a.torso_semi_axes[1];
        if y_front <= torso_front || y_back >= torso_back {
            return overflow("spine leaves the torso".into());
        }
        // Lateral tip of the spine at its widest must stay inside the torso ellipse.
        let ty = (a.canal_center_y - a.torso_center[1]) / a.torso_semi_axes[1];
        let half_width = a.torso_semi_axes[0] * (1.0 - ty * ty).max(0.0).sqrt();
        if lateral >= half_width {
            return overflow("spine wider than the torso at canal level".into());
        }
        Ok(())
    }
}

/// Renders the phantom and its ground truth. Deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, GroundTruth), PhantomError> {
    spec.validate()?;
    let anatomy = Anatomy::new(spec);
    let [nx, ny, nz] = spec.dims;
    let [sx, sy, sz] = spec.spacing_mm;
    let mut voxels = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        let z = k as f64 * sz;
        for j in 0..ny {
            let y = j as f64 * sy;
            for i in 0..nx {
                voxels.push(anatomy.tissue_at(i as f64 * sx, y, z));
            }
        }
    }
    if spec.noise_sigma_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma_hu).expect("finite sigma");
        for v in &mut voxels {
            let noisy = *v as f64 + normal.sample(&mut rng);
            *v = noisy.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16;
        }
    }
    let volume = Volume::new(spec.dims, spec.spacing_mm, voxels)?;
    Ok((volume, ground_truth(spec, &anatomy)))
}

fn ground_truth(spec: &PhantomSpec, a: &Anatomy) -> GroundTruth {
    let [sx, sy, sz] = spec.spacing_mm;
    let z_first = (a.column_bottom / sz).ceil() as usize;
    let z_last = (a.column_top / sz).floor() as usize;
    let cord_line = (z_first..=z_last)
        .map(|z| CordPoint {
            z,
            x: a.axis_x(z as f64 * sz) / sx,
            y: a.canal_center_y / sy,
        })
        .collect();
    let mut centers = Vec::new();
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    let ry = a.body_semi_axes[1];
    for k in 0..spec.vertebra_count {
        let (bottom, top) = a.vertebra_span(k);
        let loss = a.height_loss[k];
        // Mid-height of the body along its central (y = centre) line.
        let z_mid = bottom + spec.vertebra_height_mm * (1.0 - loss * 0.5) / 2.0;
        centers.push([a.axis_x(z_mid) / sx, a.body_center_y / sy, z_mid / sz]);
        boxes.push(VertebraBox {
            z_min: bottom / sz,
            z_max: top / sz,
            y_min: (a.body_center_y - ry) / sy,
            y_max: (a.body_center_y + ry) / sy,
        });
        labels.push(FractureLabel {
            fractured: loss >= FRACTURE_THRESHOLD,
            height_loss: loss,
        });
    }
    let study_label = labels.iter().any(|l| l.fractured);
    GroundTruth {
        cord_line,
        vertebra_centers: centers,
        vertebra_boxes: boxes,
        fracture_labels: labels,
        study_label,
    }
}

// ---- cohorts -------------------------------------------------------------

/// Age distribution `(mean, std)` per sex plus the female fraction, for one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDemographics {
    pub female_fraction: f64,
    pub female_age: (f64, f64),
    pub male_age: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicsModel {
    pub positive: ClassDemographics,
    pub negative: ClassDemographics,
}

impl Default for DemographicsModel {
    /// The unbalanced clinical shape: positives older and more often female.
    fn default() -> Self {
        Self {
            positive: ClassDemographics {
                female_fraction: 0.61,
                female_age: (73.0, 12.4),
                male_age: (66.8, 16.8),
            },
            negative: ClassDemographics {
                female_fraction: 0.47,
                female_age: (56.7, 17.4),
                male_age: (56.1, 17.9),
            },
        }
    }
}

impl DemographicsModel {
    pub fn sample(&self, positive: bool, rng: &mut impl Rng) -> (Sex, f64) {
        let class = if positive { &self.positive } else { &self.negative };
        let female = rng.random::<f64>() < class.female_fraction;
        let (mean, std) = if female { class.female_age } else { class.male_age };
        let age = Normal::new(mean, std.max(1e-9)).expect("finite").sample(rng);
        let age = (age.clamp(18.0, 110.0) * 10.0).round() / 10.0;
        (if female { Sex::F } else { Sex::M }, age)
    }
}

/// Per-study variation drawn around a base spec when building cohorts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortVariation {
    pub scoliosis_amplitude_mm: (f64, f64),
    pub scoliosis_period_mm: (f64, f64),
    pub noise_sigma_hu: (f64, f64),
    pub vertebra_height_mm: (f64, f64),
    pub body_radius_mm: (f64, f64),
    /// Probabilities of 1, 2, 3 fractures in a positive study.
    pub fracture_count_weights: [f64; 3],
    pub height_loss: (f64, f64),
}

impl Default for CohortVariation {
    fn default() -> Self {
        Self {
            scoliosis_amplitude_mm: (0.0, 10.0),
            scoliosis_period_mm: (140.0, 220.0),
            noise_sigma_hu: (10.0, 30.0),
            vertebra_height_mm: (18.0, 21.0),
            body_radius_mm: (13.5, 16.5),
            fracture_count_weights: [0.6, 0.3, 0.1],
            height_loss: (FRACTURE_THRESHOLD, MAX_HEIGHT_LOSS),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyPlan {
    pub record: StudyRecord,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortConfig {
    pub n_studies: usize,
    pub fracture_prevalence: f64,
    pub demographics: DemographicsModel,
    pub base: PhantomSpec,
    pub variation: CohortVariation,
    pub seed: u64,
    /// Prefix for generated study ids (`<prefix>-0000`).
    pub id_prefix: String,
}

impl CohortConfig {
    pub fn new(n_studies: usize, fracture_prevalence: f64, seed: u64) -> Self {
        Self {
            n_studies,
            fracture_prevalence,
            demographics: DemographicsModel::default(),
            base: PhantomSpec::default(),
            variation: CohortVariation::default(),
            seed,
            id_prefix: "study".into(),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws labels, demographics and phantom geometry for every study without
/// rendering anything. Deterministic in the config.
pub fn plan_cohort(config: &CohortConfig) -> Result<Vec<StudyPlan>, PhantomError> {
    if config.n_studies < 2 {
        return Err(PhantomError::Spec(format!("cohort needs >= 2 studies, got {}", config.n_studies)));
    }
    if !(0.0..=1.0).contains(&config.fracture_prevalence) {
        return Err(PhantomError::Spec(format!("prevalence {} outside [0, 1]", config.fracture_prevalence)));
    }
    let var = &config.variation;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plans = Vec::with_capacity(config.n_studies);
    for i in 0..config.n_studies {
        let positive = rng.random::<f64>() < config.fracture_prevalence;
        let (sex, age) = config.demographics.sample(positive, &mut rng);
        let mut spec = config.base.clone();
        spec.scoliosis_amplitude_mm = uniform(&mut rng, var.scoliosis_amplitude_mm);
        spec.scoliosis_period_mm = uniform(&mut rng, var.scoliosis_period_mm);
        spec.noise_sigma_hu = uniform(&mut rng, var.noise_sigma_hu);
        spec.vertebra_height_mm = uniform(&mut rng, var.vertebra_height_mm);
        spec.body_radius_mm = uniform(&mut rng, var.body_radius_mm);
        spec.seed = rng.random();
        spec.fracture_plan.clear();
        if positive {
            let w = var.fracture_count_weights;
            let u = rng.random::<f64>() * w.iter().sum::<f64>();
            let count = if u < w[0] { 1 } else if u < w[0] + w[1] { 2 } else { 3 };
            // End vertebrae sit at the column edges; fractures go in the interior.
            let interior: Vec<usize> = (1..spec.vertebra_count - 1).collect();
            let picks = rand::seq::index::sample(&mut rng, interior.len(), count.min(interior.len()));
            let mut chosen: Vec<usize> = picks.into_iter().map(|p| interior[p]).collect();
            chosen.sort_unstable();
            for vertebra in chosen {
                spec.fracture_plan.push(Fracture {
                    vertebra,
                    height_loss: uniform(&mut rng, var.height_loss),
                });
            }
        }
        spec.validate()?;
        let study_id = format!("{}-{:04}", config.id_prefix, i);
        plans.push(StudyPlan {
            record: StudyRecord {
                volume_path: format!("{study_id}.vvol.json"),
                study_id,
                age,
                sex,
                label: if positive { Label::Positive } else { Label::Negative },
            },
            spec,
        });
    }
    Ok(plans)
}

pub fn ground_truth_path(dir: &Path, study_id: &str) -> PathBuf {
    dir.join(format!("{study_id}.ground_truth.json"))
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Renders every planned study into `out_dir` (volume, header, ground truth)
/// and writes `manifest.csv`. Returns the manifest records.
pub fn generate_cohort(config: &CohortConfig, out_dir: &Path) -> Result<Vec<StudyRecord>, PhantomError> {
    let plans = plan_cohort(config)?;
    fs::create_dir_all(out_dir).map_err(|source| PhantomError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let results: Vec<Result<(), PhantomError>> = {
        use rayon::prelude::*;
        plans
            .par_iter()
            .map(|plan| {
                let (volume, truth) = generate_phantom(&plan.spec)?;
                save_volume(&volume, &out_dir.join(&plan.record.volume_path))?;
                let gt = ground_truth_path(out_dir, &plan.record.study_id);
                write_atomic(&gt, truth.to_json().as_bytes())
                    .map_err(|source| PhantomError::Io { path: gt, source })
            })
            .collect()
    };
    results.into_iter().collect::<Result<(), _>>()?;
    let records: Vec<StudyRecord> = plans.into_iter().map(|p| p.record).collect();
    write_manifest(&out_dir.join(MANIFEST_FILE), &records).map_err(|e| PhantomError::Manifest(e.to_string()))?;
    Ok(records)
}
