//! The `rsrb` subcommands, callable from tests without a process boundary.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::checkpoint::{self, CheckpointError};
use super::config::{Config, ConfigError};
use super::selftest::{self, Scope};
use crate::env::{
    episode_seed, read_trajectory, write_trajectory, ObjectClass, ObjectMasks, PelletWorld, StateStack, TrajectoryRecord,
};
use crate::gaze::{analyze_state, binarize, gaze_alignment, render, write_render, GazeError};
use crate::network::Network;
use crate::trainer::{eval_action, evaluate, run_training, TrainError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const EVAL_FILE: &str = "eval_episodes.csv";
pub const INDEX_FILE: &str = "index.csv";
pub const ALIGNMENT_FILE: &str = "alignment.csv";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unmet preconditions; nothing was written.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

pub fn exit_code(r: &Result<(), CliError>) -> i32 {
    r.as_ref().map_or_else(CliError::exit_code, |_| 0)
}

macro_rules! failed_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Failed(e.to_string())
            }
        }
    )*};
}

failed_from!(io::Error, TrainError, CheckpointError, GazeError);

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("output directory {} does not exist", dir.display())))
    }
}

/// Trains, writing the resolved configuration, the metrics log and the best
/// snapshot's parameters into `out`.
pub fn cmd_train(config: &Config, out: &Path, log: &mut dyn Write) -> Result<(), CliError> {
    require_dir(out)?;
    let cfg = config.trainer()?;
    fs::write(out.join(RESOLVED_FILE), config.resolved())?;
    let mut metrics = BufWriter::new(fs::File::create(out.join(METRICS_FILE))?);
    let run = run_training(&cfg, &mut metrics)?;
    metrics.flush()?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), &run.best.params)?;
    writeln!(
        log,
        "{} steps, {} updates; best snapshot at step {} scored {:.3}; wrote {}",
        run.env_steps,
        run.updates,
        run.best.env_step,
        run.best.score,
        out.display()
    )?;
    Ok(())
}

/// Base configuration for a checkpoint: the explicit file if given, else the
/// `config.resolved` saved next to the checkpoint, else the defaults.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> Result<Config, CliError> {
    if let Some(path) = explicit {
        return Ok(Config::from_file(path)?);
    }
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join(RESOLVED_FILE);
    if beside.is_file() {
        Ok(Config::from_file(&beside)?)
    } else {
        Ok(Config::default())
    }
}

fn load(config: &Config, ckpt: &Path) -> Result<Network<f32>, CliError> {
    let net_cfg = config.network()?;
    Ok(checkpoint::load_network(ckpt, net_cfg)?)
}

/// Runs the episode `evaluate` plays as episode 0 for `seed`, recording
/// every observed frame.
pub fn record_episode(net: &Network<f32>, config: &Config) -> Result<Vec<TrajectoryRecord>, CliError> {
    let cfg = config.trainer()?;
    let env_seed = episode_seed(cfg.seed, 0);
    let mut env = PelletWorld::with_protocol(env_seed, cfg.protocol());
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
    rng.set_stream(1);
    let mut records = vec![TrajectoryRecord {
        frame: env.state().latest().to_vec(),
        action: None,
        raw_reward: 0.0,
    }];
    while !env.is_done() {
        let a = eval_action(net, env.state(), cfg.eval_epsilon, &mut rng).map_err(TrainError::from)?;
        let o = env.step(a).map_err(TrainError::from)?;
        records.push(TrajectoryRecord {
            frame: env.state().latest().to_vec(),
            action: Some(a),
            raw_reward: o.raw_reward,
        });
    }
    Ok(records)
}

/// Evaluates a checkpoint for `test_episodes` episodes at `eval_epsilon`,
/// printing `mean ± std` and writing one CSV row per episode into `out`.
/// With `trajectory`, episode 0 is also saved there as frames.
pub fn cmd_eval(
    config: &Config,
    ckpt: &Path,
    out: &Path,
    trajectory: Option<&Path>,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    require_dir(out)?;
    let cfg = config.trainer()?;
    let net = load(config, ckpt)?;
    let report = evaluate(&net, cfg.test_episodes, cfg.eval_epsilon, cfg.seed, cfg.protocol())?;
    let mut csv = BufWriter::new(fs::File::create(out.join(EVAL_FILE))?);
    writeln!(csv, "episode,return,agent_steps,noops,frames")?;
    for i in 0..report.episodes() {
        writeln!(
            csv,
            "{i},{},{},{},{}",
            report.returns[i], report.agent_steps[i], report.noops[i], report.ticks[i]
        )?;
    }
    csv.flush()?;
    if let Some(dir) = trajectory {
        let records = record_episode(&net, config)?;
        let recorded: f64 = records.iter().map(|r| r.raw_reward).sum();
        if recorded != report.returns[0] {
            return Err(CliError::Failed("recorded episode diverged from the evaluation".into()));
        }
        write_trajectory(dir, &records)?;
    }
    writeln!(
        log,
        "{:.3} ± {:.3} over {} episodes (epsilon {}, seed {})",
        report.mean(),
        report.std(),
        report.episodes(),
        cfg.eval_epsilon,
        cfg.seed
    )?;
    Ok(())
}

/// Where `cmd_visualize` takes its frames from.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameSource {
    Trajectory(PathBuf),
    /// Play a fresh episode with the configured seed and epsilon.
    Live,
}

/// One `(stack, masks)` per visualized step.
fn collect_frames(net: &Network<f32>, config: &Config, source: &FrameSource) -> Result<Vec<(StateStack, ObjectMasks)>, CliError> {
    let limit = usize::try_from(config.uint("viz_frames")).unwrap_or(usize::MAX);
    match source {
        FrameSource::Trajectory(dir) => {
            let records = read_trajectory(dir)?;
            let mut out: Vec<(StateStack, ObjectMasks)> = Vec::with_capacity(records.len().min(limit));
            for r in records.into_iter().take(limit) {
                let stack = match out.last() {
                    None => StateStack::repeated(r.frame.clone()),
                    Some((prev, _)) => {
                        let mut s = prev.clone();
                        s.push(r.frame.clone());
                        s
                    }
                };
                out.push((stack, ObjectMasks::from_frame(&r.frame)));
            }
            Ok(out)
        }
        FrameSource::Live => {
            let cfg = config.trainer()?;
            let env_seed = episode_seed(cfg.seed, 0);
            let mut env = PelletWorld::with_protocol(env_seed, cfg.protocol());
            let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
            rng.set_stream(1);
            let mut out = Vec::new();
            while out.len() < limit {
                out.push((env.state().clone(), env.masks().clone()));
                if env.is_done() {
                    break;
                }
                let a = eval_action(net, env.state(), cfg.eval_epsilon, &mut rng).map_err(TrainError::from)?;
                env.step(a).map_err(TrainError::from)?;
            }
            Ok(out)
        }
    }
}

/// Counts from one visualization run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VizSummary {
    pub frames: usize,
    pub images: usize,
    pub forwards: usize,
    pub backwards: usize,
}

/// Renders every gaze of every frame in the configured mode and writes the
/// images, an index of them, and one alignment row per frame.
pub fn visualize(config: &Config, ckpt: &Path, source: &FrameSource, out: &Path) -> Result<VizSummary, CliError> {
    require_dir(out)?;
    let threshold = config.threshold()?;
    let mode = config.mode();
    let net = load(config, ckpt)?;
    let frames = collect_frames(&net, config, source)?;
    let n_maps = net.config().gaze_count();

    let mut index = BufWriter::new(fs::File::create(out.join(INDEX_FILE))?);
    writeln!(index, "frame,gaze,mode,file")?;
    let mut align = BufWriter::new(fs::File::create(out.join(ALIGNMENT_FILE))?);
    let mut header = vec!["frame".to_string(), "forwards".into(), "backwards".into()];
    for n in 0..n_maps {
        header.extend(ObjectClass::ALL.iter().map(|c| format!("g{n}_{}", c.name())));
        header.push(format!("g{n}_mask_px"));
    }
    header.extend(ObjectClass::ALL.iter().map(|c| format!("baseline_{}", c.name())));
    writeln!(align, "{}", header.join(","))?;

    let mut summary = VizSummary {
        frames: 0,
        images: 0,
        forwards: 0,
        backwards: 0,
    };
    for (i, (stack, masks)) in frames.iter().enumerate() {
        let fg = analyze_state(&net, stack, i)?;
        let pixels: Vec<f32> = stack.latest().iter().map(|&b| f32::from(b) / 255.0).collect();
        let mut row = vec![i.to_string(), fg.forwards.to_string(), fg.backwards.to_string()];
        let mut baselines = Vec::new();
        for (n, s) in fg.saliency.iter().enumerate() {
            let r = render(&pixels, s, (&fg.gazes[n], fg.grid.0, fg.grid.1), mode, threshold)?;
            let name = write_render(out, i, n, &r)?;
            writeln!(index, "{i},{n},{mode},{name}")?;
            let a = gaze_alignment(&s.values, masks);
            row.extend(a.iter().map(|c| format!("{:.6}", c.fraction)));
            row.push(binarize(&s.values, threshold)?.iter().filter(|&&m| m).count().to_string());
            baselines = a.iter().map(|c| format!("{:.6}", c.baseline)).collect();
            summary.images += 1;
        }
        row.extend(baselines);
        writeln!(align, "{}", row.join(","))?;
        summary.frames += 1;
        summary.forwards += fg.forwards;
        summary.backwards += fg.backwards;
    }
    index.flush()?;
    align.flush()?;
    Ok(summary)
}

pub fn cmd_visualize(
    config: &Config,
    ckpt: &Path,
    source: &FrameSource,
    out: &Path,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let s = visualize(config, ckpt, source, out)?;
    writeln!(
        log,
        "{} frames, {} images ({} forward and {} backward passes) in {}",
        s.frames,
        s.images,
        s.forwards,
        s.backwards,
        out.display()
    )?;
    Ok(())
}

pub fn cmd_selftest(scope: Scope, log: &mut dyn Write) -> Result<(), CliError> {
    let outcomes = selftest::run(scope);
    if selftest::report(&outcomes, log)? {
        Ok(())
    } else {
        Err(CliError::Failed(format!("selftest {scope} failed")))
    }
}
