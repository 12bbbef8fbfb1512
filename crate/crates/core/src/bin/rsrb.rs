use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rs_rainbow::harness::commands::config_for_checkpoint;
use rs_rainbow::harness::{cmd_eval, cmd_selftest, cmd_train, cmd_visualize, exit_code, CliError, Config, FrameSource, Scope};

#[derive(Parser)]
#[command(
    name = "rsrb",
    version,
    about = "Region-sensitive Rainbow agent on the PelletWorld grid game"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override configuration keys. Later layers win: defaults, then
/// the config file, then these.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// `key = value` file layered over the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must already exist
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    n_maps: Option<u64>,
    #[arg(long, value_parser = ["softmax", "sigmoid"])]
    norm_mode: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = ["overlay", "soft", "binary"])]
    mode: Option<String>,
    /// Evaluation episodes
    #[arg(long)]
    episodes: Option<u64>,
    /// Exploration rate of evaluation episodes
    #[arg(long)]
    epsilon: Option<f64>,
    /// Environment steps of training
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_parser = ["none", "uniform-gaze"])]
    ablation: Option<String>,
    /// Any other configuration key, as KEY=VALUE
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, mut config: Config) -> Result<Config, CliError> {
        let pairs: [(&str, Option<String>); 9] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("n_maps", self.n_maps.map(|v| v.to_string())),
            ("norm_mode", self.norm_mode.clone()),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("test_episodes", self.episodes.map(|v| v.to_string())),
            ("eval_epsilon", self.epsilon.map(|v| v.to_string())),
            ("total_steps", self.steps.map(|v| v.to_string())),
            ("ablation", self.ablation.clone()),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                config.set(key, &v, "command line")?;
            }
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s}")))?;
            config.set(k.trim(), v.trim(), "command line")?;
        }
        Ok(config)
    }

    fn config(&self) -> Result<Config, CliError> {
        let base = match &self.config {
            Some(p) => Config::from_file(p)?,
            None => Config::default(),
        };
        self.apply(base)
    }

    fn config_for(&self, ckpt: &Path) -> Result<Config, CliError> {
        self.apply(config_for_checkpoint(ckpt, self.config.as_deref())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and keep its best snapshot
    Train {
        #[command(flatten)]
        o: Overrides,
    },
    /// Evaluate a checkpoint
    Eval {
        checkpoint: PathBuf,
        /// Also record the first episode's frames into this directory
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Render gaze images for a recorded trajectory or a live episode
    Visualize {
        checkpoint: PathBuf,
        /// Recorded trajectory directory; without it a live episode is played
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run the built-in correctness checks
    Selftest {
        #[arg(default_value = "all", value_parser = ["grad", "replay", "projection", "env", "all"])]
        scope: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut log = io::stdout().lock();
    match cli.command {
        Command::Train { o } => cmd_train(&o.config()?, &o.out, &mut log),
        Command::Eval {
            checkpoint,
            trajectory,
            o,
        } => cmd_eval(
            &o.config_for(&checkpoint)?,
            &checkpoint,
            &o.out,
            trajectory.as_deref(),
            &mut log,
        ),
        Command::Visualize {
            checkpoint,
            trajectory,
            o,
        } => {
            let source = trajectory.map_or(FrameSource::Live, FrameSource::Trajectory);
            cmd_visualize(&o.config_for(&checkpoint)?, &checkpoint, &source, &o.out, &mut log)
        }
        Command::Selftest { scope } => {
            let scope: Scope = scope.parse().map_err(CliError::Usage)?;
            cmd_selftest(scope, &mut log)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("rsrb: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
