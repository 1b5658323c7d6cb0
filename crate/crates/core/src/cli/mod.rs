//! Command-line surface: run configuration, run records, and the subcommands.

mod commands;
mod config;
mod record;
pub mod verify;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

pub use commands::{Context, TEACHER_METRICS_FILE};
pub use config::{
    split_validation, DataSection, DistillSection, EvalSection, ModelSection, RunConfigFile, Split, StreamFiles,
    TrainSection,
};
pub use record::{blob_hash, InputDigest, InputLog, RunError, RunRecord, RUN_RECORD_FILE};

use crate::error::{Error, Result};
use crate::teachers::Modality;

#[derive(Debug, Parser)]
#[command(
    name = "mmkd",
    version,
    about = "Multi-teacher knowledge distillation for game event detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (default output: data.corpus_dir).
    GenData,
    /// Cut raw streams into labelled windows (default output: data.corpus_dir).
    Segment,
    /// Fine-tune one teacher (default output: its distill.teacher_dirs entry).
    TrainTeacher {
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
    },
    /// Distil the configured teachers into a student (default output: distill.student_dir).
    Distill,
    /// Score a student checkpoint (default output: runs/evaluate).
    Evaluate,
    /// Distil and score one student per teacher subset (default output: runs/ablate).
    Ablate,
    /// Run the gradient, layer-map, loss, and metric self-checks (default output: runs/verify).
    Verify,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("expected audio, chat, or transcript, got `{s}`"))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Segment => "segment",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Distill => "distill",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Verify => "verify",
        }
    }

    fn default_out(&self, config: &RunConfigFile) -> Result<PathBuf> {
        Ok(match self {
            Command::GenData | Command::Segment => config.data.corpus_dir.clone(),
            Command::TrainTeacher { modality } => config.teacher_dir(*modality)?.to_path_buf(),
            Command::Distill => config.distill.student_dir.clone(),
            Command::Evaluate => "runs/evaluate".into(),
            Command::Ablate => "runs/ablate".into(),
            Command::Verify => "runs/verify".into(),
        })
    }
}

/// Outcome of one invocation.
#[derive(Debug)]
pub struct Invocation {
    pub record: RunRecord,
    pub record_path: Option<PathBuf>,
    pub error: Option<Error>,
}

impl Invocation {
    pub fn exit_code(&self) -> i32 {
        self.record.exit_status
    }
}

fn load_config(cli: &Cli, inputs: &mut InputLog) -> Result<RunConfigFile> {
    let mut config = match &cli.config {
        Some(path) => {
            let (cfg, text) = RunConfigFile::load(path)?;
            inputs.add_bytes(path, text.as_bytes());
            cfg
        }
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn dispatch(cli: &Cli, ctx: &mut Context) -> Result<()> {
    match &cli.command {
        Command::GenData => commands::gen_data(ctx),
        Command::Segment => commands::segment_streams(ctx),
        Command::TrainTeacher { modality } => commands::train_teacher(ctx, *modality),
        Command::Distill => commands::distill_student(ctx),
        Command::Evaluate => commands::evaluate(ctx),
        Command::Ablate => commands::ablate(ctx),
        Command::Verify => commands::verify(ctx, cli.seed.unwrap_or(0)),
    }
}

/// Runs `cli` and writes its run record, whether or not the command succeeded.
pub fn invoke(cli: &Cli) -> Invocation {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let mut inputs = InputLog::default();
    let config = load_config(cli, &mut inputs);
    let out = match &config {
        Ok(c) => cli.out.clone().map_or_else(|| cli.command.default_out(c), Ok),
        Err(_) => Ok(cli.out.clone().unwrap_or_else(|| "runs/failed".into())),
    };
    let (result, ctx) = match (config, out) {
        (Ok(config), Ok(out)) => {
            let mut ctx = Context {
                config,
                out,
                inputs,
                outputs: Vec::new(),
            };
            (dispatch(cli, &mut ctx), Some(ctx))
        }
        (Err(e), _) | (_, Err(e)) => (Err(e), None),
    };
    let out = ctx
        .as_ref()
        .map(|c| c.out.clone())
        .or_else(|| cli.out.clone())
        .unwrap_or_else(|| "runs/failed".into());
    let mut record = RunRecord {
        command: cli.command.name().to_string(),
        config: ctx
            .as_ref()
            .and_then(|c| serde_json::to_value(&c.config).ok())
            .unwrap_or(serde_json::Value::Null),
        input_hash: ctx.as_ref().map(|c| c.inputs.combined()).unwrap_or_default(),
        inputs: ctx.as_ref().map(|c| c.inputs.entries().to_vec()).unwrap_or_default(),
        started_unix_s: started,
        wall_clock_s: 0.0,
        outputs: ctx.map(|c| c.outputs).unwrap_or_default(),
        exit_status: result.as_ref().map_or_else(Error::exit_code, |_| 0),
        error: result.as_ref().err().map(|e| RunError {
            code: e.code().to_string(),
            message: e.to_string(),
        }),
    };
    record.wall_clock_s = clock.elapsed().as_secs_f64();
    let record_path = match record.write(&out) {
        Ok(p) => Some(p),
        Err(e) => {
            log::error!("could not write run record: {e}");
            None
        }
    };
    Invocation {
        record,
        record_path,
        error: result.err(),
    }
}

/// Process entry point: parses arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    let inv = invoke(&cli);
    if let Some(e) = &inv.error {
        eprintln!("{}", e.code());
        eprintln!("{e}");
    }
    inv.exit_code()
}
