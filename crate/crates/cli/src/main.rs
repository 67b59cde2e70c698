//! Single-binary command line: data generation, both training stages,
//! retrieval/grounding evaluation, mask inspection, and report emission.
//!
//! Exit codes: 0 success, 2 usage (clap), 3 invalid config, 4 missing
//! file/directory, 5 other runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use iapt_core::encoders::ModelState;
use iapt_core::error::Error as CoreError;
use iapt_core::eval::{
    eval_global_retrieval, eval_grounding, eval_instance_retrieval, grounding_finetune,
    grounding_metrics, GroundingConfig, RetrievalResult,
};
use iapt_core::masking::{build_mask, importance_scores};
use iapt_core::schema::{
    generate_scene, read_dataset, render_sample, write_dataset, write_vocab, GenConfig, Vocab,
};
use iapt_core::tape::Tape;
use iapt_core::training::{
    handoff_video_encoder, load_checkpoint, run_training, save_checkpoint, OptState, Stage,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "iapt", version, about = "instance-aware video-text pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRun {
    /// Training/eval config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this run
    #[arg(long)]
    out: PathBuf,
    /// Override the data seed from the config
    #[arg(long)]
    seed_data: Option<u64>,
    /// Override the init seed from the config
    #[arg(long)]
    seed_init: Option<u64>,
    /// Worker threads (execution is single-threaded for reproducibility;
    /// values > 1 are accepted and ignored)
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overwrite an existing run directory
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic shapes-world dataset
    GenData {
        #[arg(long)]
        scenes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Square canvas side in pixels
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        /// Exclude the held-out color/shape combination
        #[arg(long)]
        exclude_holdout: bool,
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: masked video feature modeling
    Pretrain {
        #[command(flatten)]
        common: CommonRun,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 2: instance-aware alignment
    Align {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to hand the video encoder off from
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Retrieval metrics over a checkpoint
    EvalRetrieval {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// global | instance | both
        #[arg(long, default_value = "both")]
        split: String,
    },
    /// Grounding head fine-tune plus IoU metrics
    EvalGrounding {
        #[command(flatten)]
        common: CommonRun,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
    },
    /// Dump per-token importance scores and mask decisions as CSV
    InspectMask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// sample_id to inspect (defaults to the first sample)
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        rho: f64,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect retrieval JSON files into one CSV table
    Report {
        /// retrieval.json files produced by eval-retrieval
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config_sha256: String,
    seed_data: u64,
    seed_init: u64,
    seed_dropout: u64,
    git_describe: String,
    wall_time_secs: f64,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn write_manifest(dir: &Path, command: &str, config_bytes: &[u8], seeds: (u64, u64, u64), started: Instant) -> Result<(), CoreError> {
    let manifest = RunManifest {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        config_sha256: sha256_hex(config_bytes),
        seed_data: seeds.0,
        seed_init: seeds.1,
        seed_dropout: seeds.2,
        git_describe: git_describe(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.join("run_manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CoreError> {
    if dir.join("run_manifest.json").exists() && !force {
        return Err(CoreError::Config(format!(
            "output directory {} already holds a run (use --force)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_train_config(common: &CommonRun) -> Result<(TrainConfig, Vec<u8>), CoreError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CoreError::Config("--config is required".into()))?;
    let bytes = fs::read(path)?;
    let mut cfg = TrainConfig::from_json(&String::from_utf8_lossy(&bytes))?;
    if let Some(s) = common.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = common.seed_init {
        cfg.seeds.init = s;
    }
    Ok((cfg, bytes))
}

fn load_vocab(data: &Path) -> Result<Vocab, CoreError> {
    let path = data.join("vocab.txt");
    if path.exists() {
        iapt_core::schema::read_vocab(&path)
    } else {
        Ok(Vocab::builtin())
    }
}

fn train(
    common: &CommonRun,
    data: &Path,
    stage: Stage,
    init: Option<&Path>,
) -> Result<(), CoreError> {
    let started = Instant::now();
    prepare_out(&common.out, common.force)?;
    let (mut cfg, cfg_bytes) = load_train_config(common)?;
    cfg.stage = stage;
    cfg.validate()?;
    let samples = read_dataset(data)?;
    let vocab = load_vocab(data)?;
    let mut state = ModelState::init(cfg.dims.clone(), cfg.seeds.init);
    if let Some(path) = init {
        handoff_video_encoder(path, &mut state)?;
    }
    let mut opt = OptState::new(&state.params);
    let mut log = fs::File::create(common.out.join("step_log.jsonl"))?;
    let mut best = f64::INFINITY;
    let every = cfg.checkpoint_every.max(1);
    let out = common.out.clone();
    let reports = run_training(&mut state, &mut opt, &samples, &cfg, &vocab, |step, report, st, op| {
        let line = serde_json::to_string(report).expect("report serializes");
        writeln!(log, "{line}").expect("step log writable");
        if step % every == 0 {
            save_checkpoint(st, Some(op), step as u64, &out.join(format!("ckpt_{step:06}.ckpt")))
                .expect("checkpoint writable");
        }
        let score = if stage == Stage::Pretrain { report.rec } else { report.total };
        if score < best {
            best = score;
            save_checkpoint(st, Some(op), step as u64, &out.join("best.ckpt"))
                .expect("checkpoint writable");
        }
    })?;
    save_checkpoint(&state, Some(&opt), reports.len() as u64, &common.out.join("final.ckpt"))?;
    write_manifest(
        &common.out,
        if stage == Stage::Pretrain { "pretrain" } else { "align" },
        &cfg_bytes,
        (cfg.seeds.data, cfg.seeds.init, cfg.seeds.dropout),
        started,
    )?;
    Ok(())
}

fn run() -> Result<(), CoreError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            scenes,
            seed,
            out,
            canvas,
            frames,
            max_objects,
            min_objects,
            exclude_holdout,
            force,
        } => {
            let started = Instant::now();
            let dataset_dir = out.join("dataset");
            if dataset_dir.join("manifest.jsonl").exists() && !force {
                return Err(CoreError::Config(format!(
                    "dataset already exists at {} (use --force)",
                    dataset_dir.display()
                )));
            }
            fs::create_dir_all(&dataset_dir)?;
            let gen = GenConfig {
                canvas: (canvas, canvas),
                frames,
                min_objects,
                max_objects,
                exclude_holdout,
                ..GenConfig::default()
            };
            let samples: Result<Vec<_>, _> = (0..scenes)
                .map(|i| generate_scene(seed.wrapping_add(i), &gen).map(|p| render_sample(&p)))
                .collect();
            let samples = samples?;
            write_dataset(&samples, &dataset_dir)?;
            write_vocab(&Vocab::builtin(), &dataset_dir.join("vocab.txt"))?;
            let cfg_bytes = serde_json::to_vec(&serde_json::json!({
                "scenes": scenes, "seed": seed, "canvas": canvas, "frames": frames,
                "min_objects": min_objects, "max_objects": max_objects,
                "exclude_holdout": exclude_holdout,
            }))?;
            write_manifest(&out, "gen-data", &cfg_bytes, (seed, 0, 0), started)?;
            Ok(())
        }
        Command::Pretrain { common, data } => train(&common, &data, Stage::Pretrain, None),
        Command::Align { common, data, init } => {
            train(&common, &data, Stage::Align, init.as_deref())
        }
        Command::EvalRetrieval { common, data, ckpt, split } => {
            let started = Instant::now();
            prepare_out(&common.out, common.force)?;
            let (state, _, _) = load_checkpoint(&ckpt)?;
            let samples = read_dataset(&data)?;
            let vocab = load_vocab(&data)?;
            let mut results: Vec<RetrievalResult> = Vec::new();
            if split == "global" || split == "both" {
                results.push(eval_global_retrieval(&state, &samples, &vocab)?);
            }
            if split == "instance" || split == "both" {
                results.push(eval_instance_retrieval(&state, &samples, &vocab)?);
            }
            if results.is_empty() {
                return Err(CoreError::Config(format!("unknown split {split}")));
            }
            let doc = serde_json::json!({
                "checkpoint": ckpt.display().to_string(),
                "pool": samples.len(),
                "results": results,
            });
            fs::write(common.out.join("retrieval.json"), serde_json::to_vec_pretty(&doc)?)?;
            let mut csv = String::from(RetrievalResult::csv_header());
            csv.push('\n');
            for r in &results {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            fs::write(common.out.join("retrieval.csv"), csv)?;
            write_manifest(&common.out, "eval-retrieval", &[], (0, 0, 0), started)?;
            Ok(())
        }
        Command::EvalGrounding { common, data, ckpt, steps, lr } => {
            let started = Instant::now();
            prepare_out(&common.out, common.force)?;
            let (mut state, _, _) = load_checkpoint(&ckpt)?;
            let samples = read_dataset(&data)?;
            let vocab = load_vocab(&data)?;
            let gcfg = GroundingConfig { steps, lr, ..GroundingConfig::default() };
            let losses = grounding_finetune(&mut state, &samples, &vocab, &gcfg)?;
            let preds = eval_grounding(&state, &samples, &vocab)?;
            let metrics = grounding_metrics(&preds, &[0.5, 0.7, 0.9])?;
            let doc = serde_json::json!({
                "checkpoint": ckpt.display().to_string(),
                "instances": preds.len(),
                "final_loss": losses.last(),
                "iou_at": metrics.iter().map(|(t, a)| serde_json::json!({"threshold": t, "accuracy": a})).collect::<Vec<_>>(),
                "predictions": preds,
            });
            fs::write(common.out.join("grounding.json"), serde_json::to_vec_pretty(&doc)?)?;
            write_manifest(&common.out, "eval-grounding", &[], (0, 0, 0), started)?;
            Ok(())
        }
        Command::InspectMask { data, ckpt, sample, rho, out } => {
            let (state, _, _) = load_checkpoint(&ckpt)?;
            let samples = read_dataset(&data)?;
            let s = match &sample {
                None => samples.first().ok_or(CoreError::EmptyDataset)?,
                Some(id) => samples
                    .iter()
                    .find(|s| &s.sample_id == id)
                    .ok_or_else(|| CoreError::Config(format!("sample {id} not found")))?,
            };
            let mut tape = Tape::new();
            let teacher = iapt_core::encoders::Bound::bind(&mut tape, &state.teacher, false);
            let (tokens, attn) =
                iapt_core::encoders::teacher_features(&mut tape, &teacher, &state.config, &s.frames)?;
            let scores = importance_scores(attn.matrix())?;
            let mask = build_mask(&scores, rho)?;
            let mut csv = String::from("token_index,frame,row,col,score,masked\n");
            for (i, pos) in tokens.positions.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{},{:.12},{}\n",
                    i, pos.frame, pos.row, pos.col, scores[i], mask.mask[i] as u8
                ));
            }
            match out {
                None => print!("{csv}"),
                Some(path) => fs::write(path, csv)?,
            }
            Ok(())
        }
        Command::Report { inputs, out } => {
            let mut csv = String::from(RetrievalResult::csv_header());
            csv.push('\n');
            for path in &inputs {
                let doc: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
                let results = doc
                    .get("results")
                    .and_then(|r| r.as_array())
                    .ok_or_else(|| CoreError::Config(format!("{} has no results", path.display())))?;
                for r in results {
                    let r: RetrievalResult = serde_json::from_value(r.clone())?;
                    csv.push_str(&r.csv_row());
                    csv.push('\n');
                }
            }
            fs::write(out, csv)?;
            Ok(())
        }
    }
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_)
        | CoreError::Json(_)
        | CoreError::NegativeWeight(_)
        | CoreError::BadMaskRatio(_)
        | CoreError::BadTemperature(_) => 3,
        CoreError::Io(_)
        | CoreError::MissingFrame(_)
        | CoreError::MissingHandoff(_)
        | CoreError::EmptyDataset => 4,
        _ => 5,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
