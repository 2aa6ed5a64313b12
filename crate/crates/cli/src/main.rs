mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use midetr::decoder::{FusionKind, HeadMask};
use midetr::verify::GradScope;

use crate::config::{parse_assignment, RunConfig};
use crate::error::CliError;

/// Multi-inquiry DETR decoder: training, evaluation, ablations and
/// verification on a synthetic detection benchmark.
#[derive(Debug, Parser)]
#[command(name = "midetr", version)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Command,
}

/// Every flag here has a config-file key, shown in brackets.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; dotted keys such as `model.heads = 2`
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override any config key (repeatable), e.g. `--set train.optimizer.lr=2e-4`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Parent directory of run directories [out_dir]
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Training seed [train.seed]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Optimizer steps [train.steps]
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Inquiry heads per decoder layer [model.heads]
    #[arg(long, global = true)]
    heads: Option<usize>,

    /// Share one self-attention across the heads of a layer [model.lite]
    #[arg(long, global = true, value_name = "BOOL")]
    lite: Option<bool>,

    /// Query fusion [model.fusion]
    #[arg(long, global = true)]
    fusion: Option<FusionKind>,

    /// Encoder feature interaction [model.ufi]
    #[arg(long, global = true, value_name = "BOOL")]
    ufi: Option<bool>,

    /// Supervise every decoder layer [train.loss.aux]
    #[arg(long, global = true, value_name = "BOOL")]
    aux_loss: Option<bool>,

    /// Rescale fusion inputs when heads are masked [model.mask_rescale]
    #[arg(long, global = true, value_name = "BOOL")]
    mask_rescale: Option<bool>,

    /// Held-out scenes per evaluation [train.eval.n_scenes]
    #[arg(long, global = true)]
    eval_scenes: Option<usize>,

    /// Held-out stream seed [train.eval.seed]
    #[arg(long, global = true)]
    eval_seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let text = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        let mut overrides = self.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
        let flags: [(&str, Option<String>); 11] = [
            ("out_dir", self.out.as_ref().map(|p| toml_string(&p.to_string_lossy()))),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("train.steps", self.steps.map(|v| v.to_string())),
            ("model.heads", self.heads.map(|v| v.to_string())),
            ("model.lite", self.lite.map(|v| v.to_string())),
            ("model.fusion", self.fusion.map(|v| toml_string(v.as_str()))),
            ("model.ufi", self.ufi.map(|v| v.to_string())),
            ("train.loss.aux", self.aux_loss.map(|v| v.to_string())),
            ("model.mask_rescale", self.mask_rescale.map(|v| v.to_string())),
            ("train.eval.n_scenes", self.eval_scenes.map(|v| v.to_string())),
            ("train.eval.seed", self.eval_seed.map(|v| v.to_string())),
        ];
        overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        RunConfig::resolve(text.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference gradient checks
    Gradcheck {
        #[arg(long, value_parser = parse_scope)]
        scope: GradScope,
    },
    /// Train a detector; writes a checkpoint, trace and final evaluation
    Train {
        /// Continue from a checkpoint up to `train.steps`
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out stream
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Enabled heads as bits, e.g. 1010; all heads by default
        #[arg(long)]
        mask: Option<HeadMask>,
    },
    /// Ablation tables as CSV
    Ablate {
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Trained model for the `heads` protocol
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seeds per trained variant
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Head counts for the `head-number` protocol
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        ms: Vec<usize>,
        /// Evaluate every head subset instead of single heads plus all
        #[arg(long)]
        all_subsets: bool,
    },
    /// Closed-form and registry parameter counts
    Paramcount,
    /// Per-head top-k query embeddings of one scene, with PCA
    ExportQueries {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the held-out stream the scene is drawn from
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[arg(long, default_value_t = 0)]
        scene_index: u64,
        /// One-based decoder layer; the last by default
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Heads,
    HeadNumber,
    Components,
    Fusion,
}

fn parse_scope(s: &str) -> Result<GradScope, String> {
    s.parse().map_err(|e: midetr::Error| e.to_string())
}

fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("MIDETR_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("MIDETR_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = cli.config.resolve()?;
    match cli.command {
        Command::Gradcheck { scope } => commands::gradcheck(&cfg, scope),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()),
        Command::Eval { checkpoint, mask } => commands::eval(&cfg, &checkpoint, mask),
        Command::Ablate {
            protocol,
            checkpoint,
            seeds,
            ms,
            all_subsets,
        } => match protocol {
            Protocol::Heads => {
                let ckpt = checkpoint
                    .ok_or_else(|| CliError::Config("--protocol heads needs --checkpoint".into()))?;
                commands::ablate_heads(&cfg, &ckpt, all_subsets)
            }
            Protocol::HeadNumber => commands::ablate_trained(&cfg, "head-number", &seeds, &ms),
            Protocol::Components => commands::ablate_trained(&cfg, "components", &seeds, &ms),
            Protocol::Fusion => commands::ablate_trained(&cfg, "fusion", &seeds, &ms),
        },
        Command::Paramcount => commands::paramcount(&cfg),
        Command::ExportQueries {
            checkpoint,
            scene_seed,
            scene_index,
            layer,
            top_k,
        } => commands::export_queries(&cfg, &checkpoint, scene_seed, scene_index, layer, top_k),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
