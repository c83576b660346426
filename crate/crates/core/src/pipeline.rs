//! Orchestration: per-study inference reports, cohort evaluation, training
//! data preparation and the occlusion heatmap.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vcf_nn::Checkpoint;

use crate::classifiers::{
    cnn_from_checkpoint, predict_study, rnn_from_checkpoint, score_sequence, ClassifierError, PatchCnn,
    ProbabilityVector, SequenceLstm,
};
use crate::cohort::{compute_metrics, read_manifest, resolve_volume, CohortError, Metrics, StudyRecord};
use crate::io::{encode_pgm, write_atomic};
use crate::phantom::{ground_truth_path, GroundTruth};
use crate::segmentation::{
    cord_deviation, segment_volume, CordDeviation, PatchRect, PatchSequence, Segmentation,
    SegmentationConfig, SegmentationError, PATCH_PIXELS, PATCH_SIDE,
};
use crate::volume::{load_volume, Volume, VolumeError};

pub const DECISION_THRESHOLD: f64 = crate::cohort::DECISION_THRESHOLD;
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORTS_DIR: &str = "reports";
pub const VOLUME_SUFFIX: &str = ".vvol.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("study {study_id}: {source} (stage {})", source.stage())]
    Segmentation {
        study_id: String,
        #[source]
        source: SegmentationError,
    },
    #[error("study {study_id}: inference failed: {reason}")]
    Inference { study_id: String, reason: String },
    #[error("cohort: {0}")]
    Cohort(#[from] CohortError),
}

impl PipelineError {
    /// Exactly one stage name per failure.
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Segmentation { source, .. } => source.stage(),
            PipelineError::Inference { .. } => "inference",
            PipelineError::Cohort(_) => "cohort",
        }
    }

    /// Process exit status: 2 for I/O, 3 for segmentation, 4 for inference.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io { .. } | PipelineError::Cohort(_) => 2,
            PipelineError::Segmentation { .. } => 3,
            PipelineError::Inference { .. } => 4,
        }
    }

    fn io(path: &Path, reason: impl ToString) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn inference(study_id: &str, e: ClassifierError) -> Self {
        PipelineError::Inference {
            study_id: study_id.to_string(),
            reason: e.to_string(),
        }
    }
}

fn read_volume(path: &Path) -> Result<Volume, PipelineError> {
    load_volume(path).map_err(|e| match e {
        VolumeError::Io { path, source } => PipelineError::io(&path, source),
        other => PipelineError::io(path, other),
    })
}

/// The two trained networks.
pub struct Models {
    pub cnn: PatchCnn<f32>,
    pub rnn: SequenceLstm<f32>,
}

impl Models {
    pub fn load(cnn_dir: &Path, rnn_dir: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            cnn: load_cnn(cnn_dir)?,
            rnn: load_rnn(rnn_dir)?,
        })
    }
}

pub fn load_cnn(dir: &Path) -> Result<PatchCnn<f32>, PipelineError> {
    let ckpt = Checkpoint::load(dir).map_err(|e| PipelineError::io(dir, e))?;
    cnn_from_checkpoint(&ckpt).map_err(|e| PipelineError::io(dir, e))
}

pub fn load_rnn(dir: &Path) -> Result<SequenceLstm<f32>, PipelineError> {
    let ckpt = Checkpoint::load(dir).map_err(|e| PipelineError::io(dir, e))?;
    rnn_from_checkpoint(&ckpt).map_err(|e| PipelineError::io(dir, e))
}

/// Study id of a `<id>.vvol.json` path, or the file stem otherwise.
pub fn study_id_from_path(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match name.strip_suffix(VOLUME_SUFFIX) {
        Some(id) => id.to_string(),
        None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(name),
    }
}

/// Ground truth stored next to a volume, when present.
pub fn load_ground_truth(volume_path: &Path, study_id: &str) -> Result<Option<GroundTruth>, PipelineError> {
    let dir = volume_path.parent().unwrap_or(Path::new(""));
    let path = ground_truth_path(dir, study_id);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| PipelineError::io(&path, e))
}

/// Loads a volume and its ground truth (if any) and runs segmentation.
pub fn segment_study(
    volume_path: &Path,
    config: &SegmentationConfig,
) -> Result<(Segmentation, Option<GroundTruth>), PipelineError> {
    let study_id = study_id_from_path(volume_path);
    let volume = read_volume(volume_path)?;
    let truth = load_ground_truth(volume_path, &study_id)?;
    let seg = segment_volume(&study_id, &volume, config, truth.as_ref())
        .map_err(|source| PipelineError::Segmentation { study_id, source })?;
    Ok((seg, truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub index: usize,
    pub probability: f64,
    pub rect: Option<PatchRect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub cord_deviation: Option<CordDeviation>,
    pub column_width: f64,
    pub patch_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub load: Duration,
    pub segmentation: Duration,
    pub inference: Duration,
}

/// One study's outcome. Timings stay out of the JSON so reports are
/// byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    pub probability: f64,
    pub decision: bool,
    pub patches: Vec<PatchReport>,
    pub segmentation: SegmentationSummary,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl StudyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores an already segmented study.
pub fn infer_segmentation(
    seg: &Segmentation,
    truth: Option<&GroundTruth>,
    models: &Models,
) -> Result<StudyReport, PipelineError> {
    let study_id = &seg.patches.study_id;
    let vector = score_sequence(&models.cnn, &seg.patches).map_err(|e| PipelineError::inference(study_id, e))?;
    let probability = predict_study(&models.rnn, &vector).map_err(|e| PipelineError::inference(study_id, e))?;
    if !probability.is_finite() {
        return Err(PipelineError::Inference {
            study_id: study_id.clone(),
            reason: "non-finite probability".into(),
        });
    }
    let patches = vector
        .probs
        .iter()
        .zip(&seg.patches.patches)
        .enumerate()
        .map(|(index, (&probability, p))| PatchReport {
            index,
            probability,
            rect: p.rect,
        })
        .collect();
    Ok(StudyReport {
        study_id: study_id.clone(),
        probability,
        decision: probability >= DECISION_THRESHOLD,
        patches,
        segmentation: SegmentationSummary {
            cord_deviation: truth.and_then(|t| cord_deviation(&seg.cord, t)),
            column_width: seg.column.average_width_w,
            patch_count: seg.patches.len(),
        },
        timings: StageTimings::default(),
    })
}

/// Segmentation, patch scoring and sequence classification of one volume.
pub fn run_study(
    volume_path: &Path,
    models: &Models,
    config: &SegmentationConfig,
) -> Result<StudyReport, PipelineError> {
    let t0 = Instant::now();
    let study_id = study_id_from_path(volume_path);
    let volume = read_volume(volume_path)?;
    let truth = load_ground_truth(volume_path, &study_id)?;
    let t1 = Instant::now();
    let seg = segment_volume(&study_id, &volume, config, truth.as_ref())
        .map_err(|source| PipelineError::Segmentation { study_id, source })?;
    let t2 = Instant::now();
    let mut report = infer_segmentation(&seg, truth.as_ref(), models)?;
    report.timings = StageTimings {
        load: t1 - t0,
        segmentation: t2 - t1,
        inference: t2.elapsed(),
    };
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub threshold: f64,
    pub studies: usize,
    pub metrics: Metrics,
}

pub struct Evaluation {
    pub metrics: Metrics,
    pub reports: Vec<StudyReport>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, bytes).map_err(|e| PipelineError::io(path, e))
}

/// Runs every manifest study, writes `reports/<id>.json` and `metrics.json`
/// under `out_dir`. The first failing study aborts the evaluation.
pub fn evaluate_cohort(
    manifest: &Path,
    models: &Models,
    config: &SegmentationConfig,
    out_dir: &Path,
) -> Result<Evaluation, PipelineError> {
    let records = read_manifest(manifest)?;
    let reports = records
        .par_iter()
        .map(|r| run_study(&resolve_volume(manifest, r), models, config))
        .collect::<Result<Vec<_>, _>>()?;
    write_evaluation(&records, reports, out_dir)
}

/// Metrics of reports against manifest labels, written to `out_dir`.
pub fn write_evaluation(
    records: &[StudyRecord],
    reports: Vec<StudyReport>,
    out_dir: &Path,
) -> Result<Evaluation, PipelineError> {
    let probs: Vec<f64> = reports.iter().map(|r| r.probability).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label.is_positive()).collect();
    let metrics = compute_metrics(&probs, &labels, DECISION_THRESHOLD)?;
    let reports_dir = out_dir.join(REPORTS_DIR);
    fs::create_dir_all(&reports_dir).map_err(|e| PipelineError::io(&reports_dir, e))?;
    for r in &reports {
        write_file(&reports_dir.join(format!("{}.json", r.study_id)), r.to_json().as_bytes())?;
    }
    let file = MetricsFile {
        threshold: DECISION_THRESHOLD,
        studies: reports.len(),
        metrics,
    };
    let json = serde_json::to_string_pretty(&file).expect("metrics serialize") + "\n";
    write_file(&out_dir.join(METRICS_FILE), json.as_bytes())?;
    Ok(Evaluation { metrics, reports })
}

/// Segments every manifest study (patches labelled when ground truth sits
/// next to the volume), in manifest order.
pub fn segment_manifest(
    manifest: &Path,
    config: &SegmentationConfig,
) -> Result<Vec<(StudyRecord, PatchSequence)>, PipelineError> {
    let records = read_manifest(manifest)?;
    records
        .into_par_iter()
        .map(|r| {
            let (seg, _) = segment_study(&resolve_volume(manifest, &r), config)?;
            Ok((r, seg.patches))
        })
        .collect()
}

/// CNN probability vectors; each takes its label from the patch labels.
pub fn score_sequences(cnn: &PatchCnn<f32>, seqs: &[PatchSequence]) -> Result<Vec<ProbabilityVector>, PipelineError> {
    seqs.par_iter()
        .map(|s| score_sequence(cnn, s).map_err(|e| PipelineError::inference(&s.study_id, e)))
        .collect()
}

/// CNN probability vectors labelled with the manifest's study labels.
pub fn score_cohort(
    cnn: &PatchCnn<f32>,
    studies: &[(StudyRecord, PatchSequence)],
) -> Result<Vec<ProbabilityVector>, PipelineError> {
    studies
        .par_iter()
        .map(|(r, s)| {
            let mut v = score_sequence(cnn, s).map_err(|e| PipelineError::inference(&s.study_id, e))?;
            v.label = Some(r.label.is_positive());
            Ok(v)
        })
        .collect()
}

pub const OCCLUSION_WINDOW: usize = 8;
pub const OCCLUSION_STRIDE: usize = 4;
pub const HEATMAP_GUARD: f64 = 1e-6;

/// Occlusion fill for a patch: its mean intensity.
pub fn occlusion_fill(patch: &[f32]) -> f32 {
    (patch.iter().map(|&v| v as f64).sum::<f64>() / patch.len().max(1) as f64) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub method: String,
    pub base_probability: f64,
    pub max_drop: f64,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i / self.width, i % self.width)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(self.width, self.height, &self.values, 0.0, 1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("heatmap serializes") + "\n"
    }
}

/// Occlusion sensitivity: each `window`×`window` square (moved by `stride`)
/// is replaced by `fill`; the drop in fracture probability is averaged over
/// every pixel the square covers, negatives clipped, and the map scaled by its
/// maximum. A map whose largest drop is below [`HEATMAP_GUARD`] is all zeros.
pub fn occlusion_heatmap(
    model: &PatchCnn<f32>,
    patch: &[f32],
    window: usize,
    stride: usize,
    fill: f32,
) -> Result<Heatmap, ClassifierError> {
    let side = PATCH_SIDE;
    if patch.len() != PATCH_PIXELS {
        return Err(ClassifierError::Shape(format!("patch has {} pixels, expected {PATCH_PIXELS}", patch.len())));
    }
    if window == 0 || window > side || stride == 0 {
        return Err(ClassifierError::Argument(format!("window {window}, stride {stride}")));
    }
    let mut origins: Vec<usize> = (0..=side - window).step_by(stride).collect();
    if origins.last() != Some(&(side - window)) {
        origins.push(side - window);
    }
    let mut occluded = Vec::with_capacity(origins.len() * origins.len());
    let mut squares = Vec::with_capacity(origins.len() * origins.len());
    for &r0 in &origins {
        for &c0 in &origins {
            let mut p = patch.to_vec();
            for r in r0..r0 + window {
                p[r * side + c0..r * side + c0 + window].fill(fill);
            }
            occluded.push(p);
            squares.push((r0, c0));
        }
    }
    let mut inputs: Vec<&[f32]> = vec![patch];
    inputs.extend(occluded.iter().map(|p| p.as_slice()));
    let probs = model.predict_batch(&inputs)?;
    let base = probs[0];
    let mut sum = vec![0.0; PATCH_PIXELS];
    let mut count = vec![0usize; PATCH_PIXELS];
    for (&(r0, c0), &p) in squares.iter().zip(&probs[1..]) {
        for r in r0..r0 + window {
            for c in c0..c0 + window {
                sum[r * side + c] += base - p;
                count[r * side + c] += 1;
            }
        }
    }
    let mut values: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| (s / n as f64).max(0.0)).collect();
    let max_drop = values.iter().copied().fold(0.0, f64::max);
    if max_drop < HEATMAP_GUARD {
        values.fill(0.0);
    } else {
        values.iter_mut().for_each(|v| *v /= max_drop);
    }
    Ok(Heatmap {
        width: side,
        height: side,
        method: format!("occlusion(window={window}, stride={stride}, fill={fill})"),
        base_probability: base,
        max_drop,
        values,
    })
}
