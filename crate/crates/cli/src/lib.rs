//! `uno-lab`: command-line driver for the toy unified-model pipeline.

pub mod commands;
pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::{load_config, Resolved};
use uno_core::trainer::{thread_count, Stage};

#[derive(Debug, Parser)]
#[command(name = "uno-lab", version, about = "Toy unified multimodal model: data, training, evaluation and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one value, e.g. `--set uno.lambda1=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Artifact directory (default: `<run.out_dir>/<subcommand>`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a scene/edit manifest, the vocabulary and preview images.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        scenes: usize,
        #[arg(long, default_value_t = 64)]
        edits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        previews: usize,
    },
    /// Stage-0 training of both experts, then the caption sufficiency gate.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Joint post-training from a gated stage-0 checkpoint.
    Uno {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
    },
    /// Flow-matching-only post-training from a gated stage-0 checkpoint.
    Sft {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
    },
    /// Compositional text-to-image benchmark over the configured eval seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Editing benchmark over the configured eval seeds.
    EditEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Gradient cosines, latent PCA, finite differences and (with --init) the leakage probe.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Stage-0 checkpoint for the leakage probe.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
    },
    /// Post-train and evaluate every cell of the `[ablate]` grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
    },
    /// Dump a joint-layout attention mask, a scene and optionally a generated image.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Prompt text; defaults to a description of the sampled scene.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
    },
    /// Invariant suite; exits nonzero on any failure.
    Verify {
        /// Run only these checks (e.g. A1 A4).
        #[arg(long, num_args = 1..)]
        only: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Uno { .. } => "uno",
            Command::Sft { .. } => "sft",
            Command::Eval { .. } => "eval",
            Command::EditEval { .. } => "edit-eval",
            Command::Diagnose { .. } => "diagnose",
            Command::Ablate { .. } => "ablate",
            Command::Visualize { .. } => "visualize",
            Command::Verify { .. } => "verify",
        }
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Command::GenData { common, .. }
            | Command::Pretrain { common }
            | Command::Uno { common, .. }
            | Command::Sft { common, .. }
            | Command::Eval { common, .. }
            | Command::EditEval { common, .. }
            | Command::Diagnose { common, .. }
            | Command::Ablate { common, .. }
            | Command::Visualize { common, .. } => Some(common),
            Command::Verify { .. } => None,
        }
    }
}

fn init_threads(requested: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(thread_count(requested)).build_global();
}

fn out_dir(common: &Common, resolved: &Resolved, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| resolved.config.run.out_dir.join(name))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Runtime { kind: "io", message: format!("{} does not exist", path.display()) })
    }
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let Some(common) = cli.command.common() else {
        let Command::Verify { only } = &cli.command else { unreachable!("only verify lacks common flags") };
        init_threads(0);
        let checks = verify::run(only, |c| println!("{}", c.line()));
        if checks.is_empty() {
            return Err(CliError::Usage(format!("no check matches {only:?}")));
        }
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.id).collect();
        return if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::Runtime { kind: "verify", message: format!("failed checks: {}", failed.join(", ")) })
        };
    };
    let resolved = load_config(common.config.as_deref(), &common.overrides)?;
    init_threads(resolved.config.run.threads);
    let out = out_dir(common, &resolved, name);
    match &cli.command {
        Command::GenData { scenes, edits, seed, previews, .. } => commands::gen_data(&resolved, &out, *scenes, *edits, *seed, *previews),
        Command::Pretrain { .. } => commands::pretrain(&resolved, &out),
        Command::Uno { init, .. } => {
            require(init)?;
            commands::post_train(&resolved, &out, init, Stage::Uno).map(|_| ())
        }
        Command::Sft { init, .. } => {
            require(init)?;
            commands::post_train(&resolved, &out, init, Stage::Sft).map(|_| ())
        }
        Command::Eval { checkpoint, .. } => commands::eval(&resolved, &out, checkpoint, false),
        Command::EditEval { checkpoint, .. } => commands::eval(&resolved, &out, checkpoint, true),
        Command::Diagnose { checkpoint, init, .. } => commands::diagnose(&resolved, &out, checkpoint, init.as_deref()),
        Command::Ablate { init, .. } => commands::ablate(&resolved, &out, init),
        Command::Visualize { scene_seed, prompt, checkpoint, .. } => {
            commands::visualize(&resolved, &out, *scene_seed, prompt.as_deref(), checkpoint.as_deref())
        }
        Command::Verify { .. } => unreachable!("handled above"),
    }
}

/// Parses `argv` and runs it, returning the process exit code. Usage errors
/// print clap's text and return 2; failures print one JSON line to stderr.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.json());
            e.exit_code()
        }
    }
}
