use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use vcf_core::classifiers::{
    history_csv, read_vectors, split_by_study, train_cnn, train_rnn, write_vectors, CnnConfig, LabeledPatch,
    RnnConfig,
};
use vcf_core::cohort::{balance_cohort, AGE_CALIPER, demographics, read_manifest, resolve_volume, write_manifest};
use vcf_core::io::write_atomic;
use vcf_core::phantom::{generate_cohort, CohortConfig, MANIFEST_FILE};
use vcf_core::pipeline::{
    evaluate_cohort, load_cnn, occlusion_heatmap, run_study, score_sequences, segment_study, occlusion_fill,
    Models, PipelineError, OCCLUSION_STRIDE, OCCLUSION_WINDOW,
};
use vcf_core::segmentation::{read_patch_file, write_patch_file, PatchSequence, SegmentationConfig, PATCH_FILE_SUFFIX};

#[derive(Parser)]
#[command(name = "vcf", version, about = "Vertebral compression fracture detection on CT volumes")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, env = "VCF_THREADS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom cohorts.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Segment one volume: cord line, virtual sagittal image, column and patches.
    Segment(VolumeOut),
    /// Extract the patch sequence of one volume into `<out>/<study>.vcfp`.
    Patches(VolumeOut),
    /// Train the patch CNN on a directory of labelled patch files.
    TrainCnn(TrainCnnArgs),
    /// Score patch files with a CNN checkpoint into a probability-vector CSV.
    Score(ScoreArgs),
    /// Train the sequence LSTM on probability vectors.
    TrainRnn(TrainRnnArgs),
    /// Run the full pipeline on one volume and write a JSON report.
    Infer(InferArgs),
    /// Evaluate a manifest: per-study reports and metrics.json.
    Eval(EvalArgs),
    /// Occlusion heatmap of one patch.
    Heatmap(HeatmapArgs),
    /// Age- and sex-matched balancing of a manifest.
    Balance(BalanceArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Generate a cohort of phantom volumes with ground truth and a manifest.
    Gen(PhantomGenArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    prevalence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "study")]
    prefix: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VolumeOut {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCnnArgs {
    #[arg(long)]
    patches_dir: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    cnn: PathBuf,
    /// A patch file or a directory of them.
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRnnArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    cnn: PathBuf,
    #[arg(long)]
    rnn: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cnn: PathBuf,
    #[arg(long)]
    rnn: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    cnn: PathBuf,
    #[arg(long)]
    patch_file: PathBuf,
    #[arg(long)]
    index: usize,
    /// Output directory for `heatmap-<index>.pgm` and `.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<PipelineError>())
        .map_or(1, |p| p.exit_code() as u8)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom(PhantomCommand::Gen(a)) => phantom_gen(a),
        Command::Segment(a) => segment(a),
        Command::Patches(a) => patches(a),
        Command::TrainCnn(a) => train_cnn_cmd(a),
        Command::Score(a) => score(a),
        Command::TrainRnn(a) => train_rnn_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Balance(a) => balance(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| PipelineError::Io {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })
        .map_err(Into::into)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
        .map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
        .map_err(Into::into)
}

fn io_error(path: &Path, e: impl ToString) -> anyhow::Error {
    PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
    .into()
}

fn phantom_gen(a: PhantomGenArgs) -> Result<()> {
    let mut config = CohortConfig::new(a.n, a.prevalence, a.seed);
    config.id_prefix = a.prefix;
    let records = generate_cohort(&config, &a.out).map_err(|e| io_error(&a.out, e))?;
    let positives = records.iter().filter(|r| r.label.is_positive()).count();
    println!("{} studies ({positives} positive) in {}", records.len(), a.out.display());
    Ok(())
}

fn segment(a: VolumeOut) -> Result<()> {
    let (seg, truth) = segment_study(&a.volume, &SegmentationConfig::default())?;
    create_dir(&a.out)?;
    let config = SegmentationConfig::default();
    write(&a.out.join("sagittal.pgm"), &seg.sagittal.to_pgm(config.hu_window.0, config.hu_window.1))?;
    write(&a.out.join("cord.json"), serde_json::to_string_pretty(&seg.cord)?.as_bytes())?;
    let (first, last) = seg.column.extent();
    let summary = serde_json::json!({
        "study_id": seg.patches.study_id,
        "cord_valid_range": seg.cord.valid_range,
        "cord_deviation": truth.as_ref().and_then(|t| vcf_core::segmentation::cord_deviation(&seg.cord, t)),
        "column_rows": [first, last],
        "column_width": seg.column.average_width_w,
        "patch_count": seg.patches.len(),
    });
    write(&a.out.join("segmentation.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write_patches(&a.out, &seg.patches)?;
    println!("{}: {} patches", seg.patches.study_id, seg.patches.len());
    Ok(())
}

fn write_patches(dir: &Path, seq: &PatchSequence) -> Result<PathBuf> {
    let path = dir.join(format!("{}{PATCH_FILE_SUFFIX}", seq.study_id));
    write_patch_file(&path, seq).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

fn patches(a: VolumeOut) -> Result<()> {
    let (seg, _) = segment_study(&a.volume, &SegmentationConfig::default())?;
    create_dir(&a.out)?;
    let path = write_patches(&a.out, &seg.patches)?;
    println!("{} patches -> {}", seg.patches.len(), path.display());
    Ok(())
}

/// Patch files of a directory in name order, or the single file given.
fn patch_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io_error(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(PATCH_FILE_SUFFIX))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(io_error(path, "no patch files"));
    }
    Ok(files)
}

fn read_sequences(path: &Path) -> Result<Vec<PatchSequence>> {
    patch_files(path)?
        .iter()
        .map(|f| read_patch_file(f).map_err(|e| io_error(f, e)))
        .collect()
}

fn train_cnn_cmd(a: TrainCnnArgs) -> Result<()> {
    let seqs = read_sequences(&a.patches_dir)?;
    let studies: Vec<(String, bool)> = seqs
        .iter()
        .map(|s| {
            let labels: Vec<bool> = s.patches.iter().filter_map(|p| p.label).collect();
            if labels.len() != s.len() {
                bail!("study {} has unlabelled patches", s.study_id);
            }
            Ok((s.study_id.clone(), labels.iter().any(|&l| l)))
        })
        .collect::<Result<_>>()?;
    let split = split_by_study(&studies, a.val_frac, a.seed)?;
    let pick = |ids: &[String]| -> Vec<LabeledPatch> {
        seqs.iter()
            .filter(|s| ids.binary_search(&s.study_id).is_ok())
            .flat_map(LabeledPatch::from_sequence)
            .collect()
    };
    let (train, val) = (pick(&split.train), pick(&split.val));
    log::info!("{} train patches, {} validation patches", train.len(), val.len());
    let config = CnnConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..CnnConfig::default()
    };
    let result = train_cnn(&train, &val, &config)?;
    result.checkpoint.save(&a.out).map_err(|e| io_error(&a.out, e))?;
    write(&a.out.join("history.csv"), history_csv(&result.history).as_bytes())?;
    let split_json = serde_json::json!({ "train": split.train, "val": split.val });
    write(&a.out.join("split.json"), serde_json::to_string_pretty(&split_json)?.as_bytes())?;
    if let Some(last) = result.history.last() {
        println!("epoch {}: train loss {:.4}, val acc {:?}", last.epoch, last.train_loss, last.val_acc);
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let cnn = load_cnn(&a.cnn)?;
    let seqs = read_sequences(&a.patches)?;
    let vectors = score_sequences(&cnn, &seqs)?;
    write_vectors(&a.out, &vectors).map_err(|e| io_error(&a.out, e))?;
    println!("{} studies scored -> {}", vectors.len(), a.out.display());
    Ok(())
}

fn train_rnn_cmd(a: TrainRnnArgs) -> Result<()> {
    let vectors = read_vectors(&a.vectors).map_err(|e| io_error(&a.vectors, e))?;
    let config = RnnConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..RnnConfig::default()
    };
    let result = train_rnn(&vectors, &config)?;
    result.checkpoint.save(&a.out).map_err(|e| io_error(&a.out, e))?;
    let losses: String = result.losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)).collect();
    write(&a.out.join("losses.csv"), format!("epoch,train_loss\n{losses}").as_bytes())?;
    println!("final train loss {:.4}", result.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let models = Models::load(&a.cnn, &a.rnn)?;
    match run_study(&a.volume, &models, &SegmentationConfig::default()) {
        Ok(report) => {
            write(&a.report, report.to_json().as_bytes())?;
            println!(
                "{}: probability {:.4}, {}",
                report.study_id,
                report.probability,
                if report.decision { "fracture" } else { "no fracture" }
            );
            Ok(())
        }
        Err(e) => {
            let failure = serde_json::json!({
                "volume": a.volume,
                "stage": e.stage(),
                "error": e.to_string(),
            });
            write(&a.report, (serde_json::to_string_pretty(&failure)? + "\n").as_bytes())?;
            Err(e.into())
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let models = Models::load(&a.cnn, &a.rnn)?;
    let ev = evaluate_cohort(&a.manifest, &models, &SegmentationConfig::default(), &a.out)?;
    let m = ev.metrics;
    println!(
        "{} studies: accuracy {:.4}, sensitivity {:.4}, specificity {:.4}",
        m.total(),
        m.accuracy,
        m.sensitivity,
        m.specificity
    );
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let cnn = load_cnn(&a.cnn)?;
    let seq = read_patch_file(&a.patch_file).map_err(|e| io_error(&a.patch_file, e))?;
    let Some(patch) = seq.patches.get(a.index) else {
        bail!("patch index {} out of range ({} patches)", a.index, seq.len());
    };
    let fill = occlusion_fill(&patch.pixels);
    let map = occlusion_heatmap(&cnn, &patch.pixels, OCCLUSION_WINDOW, OCCLUSION_STRIDE, fill)?;
    create_dir(&a.out)?;
    write(&a.out.join(format!("heatmap-{}.pgm", a.index)), &map.to_pgm())?;
    write(&a.out.join(format!("heatmap-{}.json", a.index)), map.to_json().as_bytes())?;
    let (r, c) = map.argmax();
    println!("base probability {:.4}, peak at row {r} col {c}", map.base_probability);
    Ok(())
}

fn balance(a: BalanceArgs) -> Result<()> {
    let records = read_manifest(&a.manifest).map_err(PipelineError::from)?;
    let mut balanced = balance_cohort(&records)?;
    if balanced.is_empty() {
        bail!("no positive and negative studies of the same sex within {AGE_CALIPER} years of each other");
    }
    let out = if a.out.extension().is_some() { a.out.clone() } else { a.out.join(MANIFEST_FILE) };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    for r in &mut balanced {
        let volume = resolve_volume(&a.manifest, r);
        r.volume_path = fs::canonicalize(&volume).unwrap_or(volume).to_string_lossy().into_owned();
    }
    write_manifest(&out, &balanced).map_err(|e| io_error(&out, e))?;
    let d = demographics(&balanced)?;
    match d.gaps() {
        Some((age, sex)) => println!(
            "{} of {} studies kept; age-mean gap {age:.2} years, sex gap {:.2} p.p.",
            balanced.len(),
            records.len(),
            sex * 100.0
        ),
        None => println!("{} of {} studies kept", balanced.len(), records.len()),
    }
    Ok(())
}
