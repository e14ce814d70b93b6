//! Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arm::{run_reflection, timing_summary};
use crate::domain::{CaseRecord, StageLabel};
use crate::harness::{
    evaluate_case, load_manifest_auto, read_reflection_transcripts, read_report, run_eval, write_atomic, Backends,
    Mode, RunConfig, TraceLine,
};
use crate::lora::{toy_train, trajectory_csv, LoraLayer, Matrix, ToyLm, TrainConfig};
use crate::metrics::{render_fold_table, stratified_kfold};
use crate::prompt::FewShotBank;
use crate::review::{catalog_from_run_dir, serve, ReviewStore, ServeOptions};

#[derive(Debug, Parser)]
#[command(name = "pustage", version, about = "Pressure-ulcer staging with multimodal models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write stratified fold assignments as JSON
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print the per-stage train/test table to stderr
        #[arg(long)]
        table: bool,
    },
    /// Stage a single image
    Stage {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        note: Option<String>,
    },
    /// Run a full evaluation
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        parallel_folds: bool,
    },
    /// Re-render the report of a finished run
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train a LoRA layer on a toy next-token task and print the loss curve
    LoraDemo {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve the clinician review API for a finished run
    ServeReview {
        #[arg(long)]
        run_dir: PathBuf,
        /// Review log; defaults to reviews.jsonl in the run directory
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: SocketAddr,
        /// Environment variable holding the shared review token
        #[arg(long)]
        token_env: Option<String>,
        #[arg(long)]
        blind: bool,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Per-iteration latency table from reflection transcripts
    Timing {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    match command {
        Command::Split { manifest, k, seed, out: path, table } => {
            let m = load_manifest_auto(&manifest)?;
            let folds = stratified_kfold(&m, k, seed)?;
            let json = crate::harness::folds_json(&folds);
            match path {
                Some(p) => write_atomic(&p, json.as_bytes())?,
                None => out.write_all(json.as_bytes())?,
            }
            if table {
                err.write_all(render_fold_table(&m, &folds).as_bytes())?;
            }
            Ok(())
        }
        Command::Stage { image, config, mode, note } => stage(&image, &config, mode, note, out),
        Command::Eval { config, mode, output_dir, k, seed, parallelism, parallel_folds } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(k) = k {
                cfg.k_folds = k;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = parallelism {
                cfg.parallelism = p;
            }
            cfg.parallel_folds |= parallel_folds;
            let report = run_eval(&cfg)?;
            out.write_all(report.render_text().as_bytes())?;
            writeln!(out, "run directory: {}", cfg.output_dir.display())?;
            Ok(())
        }
        Command::Report { run_dir, json } => {
            let report = read_report(&run_dir)?;
            let text = if json { report.to_json() } else { report.render_text() };
            out.write_all(text.as_bytes())?;
            Ok(())
        }
        Command::LoraDemo { steps, lr, rank, dim, classes, seed, out: path, checkpoint } => {
            let task = ToyLm::classification_task(classes, 4, dim, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let w = Matrix::random(task.vocab_size(), dim, 0.3, &mut rng);
            let mut layer = LoraLayer::new(w, rank, &mut rng)?;
            let trajectory = toy_train(&mut layer, &task, &TrainConfig { steps, lr, ..Default::default() });
            let csv = trajectory_csv(&trajectory);
            match path {
                Some(p) => write_atomic(&p, csv.as_bytes())?,
                None => out.write_all(csv.as_bytes())?,
            }
            if let (Some(first), Some(last)) = (trajectory.first(), trajectory.last()) {
                writeln!(err, "loss {first:.6} -> {last:.6} over {steps} steps, {} trainable parameters", layer.trainable_params())?;
            }
            if let Some(p) = checkpoint {
                layer.save(&p)?;
            }
            Ok(())
        }
        Command::ServeReview { run_dir, log, addr, token_env, blind, ui_dir } => {
            let token = match token_env {
                Some(var) => Some(std::env::var(&var).map_err(|_| format!("environment variable {var} is not set"))?),
                None => None,
            };
            let cases = catalog_from_run_dir(&run_dir)?;
            let log = log.unwrap_or_else(|| run_dir.join("reviews.jsonl"));
            let store = ReviewStore::open(&log, cases)?;
            let transcripts = Some(run_dir.join("transcripts.jsonl"));
            let handle = serve(store, addr, ServeOptions { token, blind, ui_dir, transcripts })?;
            writeln!(err, "review service listening on {}", handle.base_url())?;
            handle.join()?;
            Ok(())
        }
        Command::Timing { transcripts, json } => {
            let summary = timing_summary(&read_reflection_transcripts(&transcripts)?);
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
            } else {
                out.write_all(summary.render().as_bytes())?;
            }
            Ok(())
        }
    }
}

fn stage(image: &Path, config: &Path, mode: Option<Mode>, note: Option<String>, out: &mut dyn Write) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let case_id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let case = CaseRecord {
        case_id: case_id.clone(),
        image_path: image.to_path_buf(),
        // unknown for a single image; prompts never read it
        true_stage: StageLabel::I,
        clinical_note: note.filter(|n| !n.trim().is_empty()),
        source_split: None,
    };
    let prompts = cfg.prompt_builder()?;
    let backends = Backends::from_config(&cfg)?;
    let bank = if cfg.mode == Mode::FewShot {
        let m = load_manifest_auto(&cfg.manifest_path)?;
        Some(FewShotBank::from_cases(cfg.few_shot_per_class, m.cases()))
    } else {
        None
    };
    let trace = if cfg.mode.uses_reflection() {
        TraceLine::Reflection { fold_id: 0, transcript: run_reflection(&prompts, &case, &backends.arm_config(&cfg)?)? }
    } else {
        evaluate_case(&cfg, &prompts, &backends, bank.as_ref(), 0, &case)?.1
    };
    let prediction = match &trace {
        TraceLine::Reflection { transcript, .. } => transcript.final_prediction.clone(),
        TraceLine::SingleShot { record, .. } => record.prediction.clone(),
    };
    let dir = cfg.output_dir.join("stage");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{case_id}.transcript.json"));
    write_atomic(&path, (serde_json::to_string_pretty(&trace)? + "\n").as_bytes())?;
    match prediction {
        Some(p) => {
            writeln!(out, "Stage: {}", p.stage.roman())?;
            writeln!(out, "Rationale: {}", p.rationale)?;
        }
        None => writeln!(out, "Stage: unparseable")?,
    }
    writeln!(out, "Transcript: {}", path.display())?;
    Ok(())
}
