//! `semicircle`: generate synthetic data, train, evaluate and score KITTI
//! label directories.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 on I/O
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use semicircle_core::eval::{aos, aos_curve, emit_report, evaluate, EvalReport, ReportFormat};
use semicircle_core::kitti::{filter_difficulty, load_label_dir, to_aos_input, DifficultyFilter, KittiRecord};
use semicircle_core::nn::Checkpoint;
use semicircle_core::synth::{self, generate, GeneratorSpec};
use semicircle_core::train::{resume, run, sha256_hex, write_log, RunConfig, RunOutcome};

#[derive(Parser)]
#[command(name = "semicircle", version, about = "Semicircle-pretrained orientation estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic orientation dataset.
    Gen(GenArgs),
    /// Train a model with a staged schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a report.
    Eval(EvalArgs),
    /// Average Orientation Similarity over KITTI label directories.
    KittiScore(KittiArgs),
    /// Re-render a JSON evaluation report as CSV or SVG.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Front/back asymmetry in [0, 1]; 0 makes the object half-turn symmetric.
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    /// Standard deviation of the pixel noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    side: usize,
    /// Orientations within this distance of 0 and π are not drawn.
    #[arg(long, default_value_t = 1e-3)]
    boundary_margin: f64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla, supervised (default) or semisupervised.
    #[arg(long)]
    mode: Option<String>,
    /// desk or paper.
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Dataset file to train on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory for checkpoints, the log and the run manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    image_side: Option<usize>,
    /// Batch size for every stage.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Mid-stage checkpoint cadence in iterations (0: stage boundaries only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Log cadence in iterations.
    #[arg(long)]
    log_every: Option<usize>,
    /// Trailing fraction of the dataset held out for the logged accuracy.
    #[arg(long)]
    holdout_fraction: Option<f64>,
    /// Semisupervised stage 3 trains on flip-consistency pseudo-labels only.
    #[arg(long)]
    pseudo_label_only: Option<bool>,
    #[arg(long)]
    stage1_lr: Option<f64>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage1_batch_size: Option<usize>,
    #[arg(long)]
    stage1_flip_augment: Option<bool>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    #[arg(long)]
    stage2_batch_size: Option<usize>,
    #[arg(long)]
    stage2_flip_augment: Option<bool>,
    #[arg(long)]
    stage3_lr: Option<f64>,
    #[arg(long)]
    stage3_iters: Option<usize>,
    #[arg(long)]
    stage3_batch_size: Option<usize>,
    #[arg(long)]
    stage3_flip_augment: Option<bool>,
    /// Continue from a checkpoint written by an earlier run with the same
    /// configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Report path. With several formats the extension is replaced per format.
    #[arg(long)]
    out: PathBuf,
    /// json, csv or svg; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', default_value = "json")]
    format: Vec<String>,
}

#[derive(Args)]
struct KittiArgs {
    /// Ground-truth label directory, one `<image id>.txt` per image.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Prediction directory with the same layout and a score column.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long, default_value = "Car")]
    class: String,
    /// easy, moderate or hard.
    #[arg(long, default_value = "moderate")]
    difficulty: String,
    /// Overrides the preset's minimum box height in pixels.
    #[arg(long)]
    min_height: Option<f64>,
    /// Overrides the preset's maximum occlusion level.
    #[arg(long)]
    max_occlusion: Option<i8>,
    /// Overrides the preset's maximum truncation.
    #[arg(long)]
    max_truncation: Option<f64>,
    /// Minimum 2D IoU for a match.
    #[arg(long, default_value_t = 0.7)]
    iou: f64,
    /// JSON report path.
    #[arg(long, default_value = "aos_report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report written by `eval`.
    #[arg(long)]
    input: PathBuf,
    /// json, csv or svg.
    #[arg(long)]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::KittiScore(a) => kitti_score(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<std::io::Error>()) {
        2
    } else {
        1
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = GeneratorSpec {
        image_side: a.side,
        count: a.count,
        asymmetry_kappa: a.kappa,
        noise_sigma: a.noise,
        seed: a.seed,
        boundary_margin: a.boundary_margin,
    };
    let data = generate(&spec)?;
    synth::save(&data, &a.out)?;
    println!("samples {}", data.len());
    println!("label_balance {:.4}", data.label_balance());
    Ok(())
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.clone();
        let n = |v: Option<usize>| v.map(|x| x.to_string());
        let f = |v: Option<f64>| v.map(|x| x.to_string());
        let b = |v: Option<bool>| v.map(|x| x.to_string());
        let p = |v: &Option<PathBuf>| v.as_ref().map(|x| x.display().to_string());
        put("mode", s(&self.mode));
        put("scale", s(&self.scale));
        put("seed", self.seed.map(|x| x.to_string()));
        put("optimizer", s(&self.optimizer));
        put("dataset", p(&self.dataset));
        put("out_dir", p(&self.out_dir));
        put("image_side", n(self.image_side));
        put("batch_size", n(self.batch_size));
        put("checkpoint_every", n(self.checkpoint_every));
        put("log_every", n(self.log_every));
        put("holdout_fraction", f(self.holdout_fraction));
        put("pseudo_label_only", b(self.pseudo_label_only));
        let stages = [
            (self.stage1_lr, self.stage1_iters, self.stage1_batch_size, self.stage1_flip_augment),
            (self.stage2_lr, self.stage2_iters, self.stage2_batch_size, self.stage2_flip_augment),
            (self.stage3_lr, self.stage3_iters, self.stage3_batch_size, self.stage3_flip_augment),
        ];
        for (i, (lr, iters, batch, flip)) in stages.into_iter().enumerate() {
            let id = i + 1;
            put(&format!("stage{id}.lr"), f(lr));
            put(&format!("stage{id}.iters"), n(iters));
            put(&format!("stage{id}.batch_size"), n(batch));
            put(&format!("stage{id}.flip_augment"), b(flip));
        }
        kv
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut text = String::from("mode = supervised\n");
        if let Some(path) = &self.config {
            text += &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.push('\n');
        }
        for (k, v) in &self.overrides() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let config = RunConfig::from_kv(&text)?;
        config.validate()?;
        Ok(config)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let config = a.resolve()?;
    let Some(dataset_path) = config.dataset.clone() else {
        bail!("no dataset given (use --dataset or a `dataset` key)");
    };
    let Some(out_dir) = config.out_dir.clone() else {
        bail!("no output directory given (use --out-dir or an `out_dir` key)");
    };
    let data = synth::load(&dataset_path)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let outcome = match &a.resume {
        Some(path) => resume(&Checkpoint::load(path)?, &config, &data)?,
        None => run(&config, &data)?,
    };
    if let Some(notice) = &outcome.notice {
        println!("{notice}");
        return Ok(());
    }
    let log_path = out_dir.join("train_log.csv");
    write_log(&outcome.log, &log_path)?;
    let manifest = manifest(&config, &outcome, &data.to_bytes(), a.resume.as_deref())?;
    write_file(&out_dir.join("manifest.json"), &manifest)?;
    for s in &outcome.stages {
        let end = outcome.log.stage_end(s.stage_id);
        println!(
            "stage {} done after {} iterations: total loss {}, held-out accuracy {}",
            s.stage_id,
            s.iterations,
            end.map_or("NA".into(), |r| format!("{:.4}", r.total)),
            end.and_then(|r| r.holdout_accuracy).map_or("NA".into(), |v| format!("{v:.4}"))
        );
    }
    println!("checkpoint {}", out_dir.join("final.ckpt").display());
    Ok(())
}

fn manifest(config: &RunConfig, outcome: &RunOutcome, dataset_bytes: &[u8], resumed: Option<&Path>) -> Result<String> {
    let stages: Vec<_> = outcome
        .stages
        .iter()
        .map(|s| {
            let plan = config.stages.iter().find(|p| p.stage_id == s.stage_id);
            json!({
                "stage_id": s.stage_id,
                "iterations": s.iterations,
                "losses": plan.map(|p| p.losses.describe()),
                "frozen": s.frozen_digests.iter().map(|(c, d)| json!({"component": c.name(), "sha256": d})).collect::<Vec<_>>(),
                "checkpoint": format!("stage{}.ckpt", s.stage_id),
            })
        })
        .collect();
    let value = json!({
        "config": serde_json::to_value(config)?,
        "config_text": config.to_kv(),
        "dataset_sha256": sha256_hex(dataset_bytes),
        "resumed_from": resumed.map(|p| p.display().to_string()),
        "stages": stages,
        "final_checkpoint": "final.ckpt",
        "final_checkpoint_sha256": outcome.stage_checkpoints.last().map(|(_, ck)| sha256_hex(&ck.to_bytes())),
        "log": "train_log.csv",
    });
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn formats(raw: &[String]) -> Result<Vec<ReportFormat>> {
    let mut out = Vec::new();
    for f in raw {
        let parsed: ReportFormat = f.parse()?;
        if !out.contains(&parsed) {
            out.push(parsed);
        }
    }
    if out.is_empty() {
        bail!("no report format given");
    }
    Ok(out)
}

fn extension(f: ReportFormat) -> &'static str {
    match f {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
        ReportFormat::Svg => "svg",
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let formats = formats(&a.format)?;
    let checkpoint = Checkpoint::load(&a.model)?;
    let data = synth::load(&a.data)?;
    let report = evaluate(&checkpoint.model, &data)?;
    for &f in &formats {
        let path = if formats.len() == 1 { a.out.clone() } else { a.out.with_extension(extension(f)) };
        emit_report(&report, f, &path)?;
    }
    print_report(&report);
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("samples {}", r.sample_count);
    println!("semicircle_accuracy {:.4}", r.semicircle_accuracy);
    println!("mean_abs_angular_error {:.4}", r.mean_abs_angular_error);
    println!("mean_sq_angular_error {:.4}", r.mean_sq_angular_error);
    println!("confusion_mass {:.4}", r.confusion_mass);
    println!("orientation_score {:.4}", r.orientation_score);
}

fn kitti_score(a: KittiArgs) -> Result<()> {
    let mut filter = match a.difficulty.as_str() {
        "easy" => DifficultyFilter::EASY,
        "moderate" => DifficultyFilter::MODERATE,
        "hard" => DifficultyFilter::HARD,
        other => bail!("unknown difficulty `{other}`; valid presets: easy, moderate, hard"),
    };
    if let Some(v) = a.min_height {
        filter.min_box_height = v;
    }
    if let Some(v) = a.max_occlusion {
        filter.max_occlusion = v;
    }
    if let Some(v) = a.max_truncation {
        filter.max_truncation = v;
    }
    filter.validate()?;
    let gt: BTreeMap<String, Vec<KittiRecord>> = load_label_dir(&a.gt_dir)?
        .into_iter()
        .map(|(id, records)| (id, filter_difficulty(&records, &filter)))
        .collect();
    let pred: BTreeMap<String, Vec<KittiRecord>> = load_label_dir(&a.pred_dir)?
        .into_iter()
        .map(|(id, mut records)| {
            records.retain(|r| r.height() >= filter.min_box_height);
            (id, records)
        })
        .collect();
    let input = to_aos_input(&gt, &pred, &a.class)?;
    let n_gt: usize = input.images.iter().map(|i| i.ground_truths.len()).sum();
    let n_pred: usize = input.images.iter().map(|i| i.predictions.len()).sum();
    if n_gt == 0 {
        bail!(
            "no `{}` ground truth left after the {} filter; nothing to score",
            a.class,
            a.difficulty
        );
    }
    let score = aos(&input, a.iou, 11)?;
    let curve = aos_curve(&input, a.iou)?;
    let (tp, mean_similarity) = match curve.last() {
        Some(last) => {
            let tp = (last.recall * n_gt as f64).round() as usize;
            let total = last.similarity_precision * curve.len() as f64;
            (tp, if tp > 0 { Some(total / tp as f64) } else { None })
        }
        None => (0, None),
    };
    let report = json!({
        "class": a.class,
        "difficulty": a.difficulty,
        "filter": {
            "min_box_height": filter.min_box_height,
            "max_occlusion": filter.max_occlusion,
            "max_truncation": filter.max_truncation,
        },
        "iou_threshold": a.iou,
        "images": input.images.len(),
        "ground_truths": n_gt,
        "predictions": n_pred,
        "true_positives": tp,
        "aos": score,
        "mean_orientation_similarity": mean_similarity,
    });
    write_file(&a.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!("aos {score:.6}");
    match mean_similarity {
        Some(s) => println!("mean_orientation_similarity {s:.6}"),
        None => println!("mean_orientation_similarity NA"),
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = EvalReport::from_json(&text)?;
    let format: ReportFormat = a.format.parse()?;
    emit_report(&report, format, &a.out)?;
    Ok(())
}
