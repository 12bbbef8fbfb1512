//! The single-threaded training loop and its metrics log.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, ActMode, Agent, EvalReport, TrainError, TrainerConfig};
use crate::env::{episode_seed, PelletWorld, FRAME_LEN};
use crate::network::ParamSet;
use crate::replay::{ReplayConfig, ReplayMemory};

pub const METRICS_HEADER: &str = "env_step,update,loss,eval_mean,eval_std,beta,wallclock_s";

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 13;

/// Best parameters seen at an evaluation point.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub params: ParamSet<f32>,
    /// Mean raw return over the evaluation episodes.
    pub score: f64,
    pub env_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub env_step: u64,
    pub action: usize,
    pub reward: f64,
    /// Update index and loss when this step triggered a gradient update.
    pub update: Option<(u64, f32)>,
    pub beta: f64,
    /// Raw return of the episode this step finished.
    pub episode_return: Option<f64>,
}

pub struct Trainer {
    cfg: TrainerConfig,
    agent: Agent,
    replay: ReplayMemory,
    env: PelletWorld,
    sample_rng: ChaCha8Rng,
    train_base: u64,
    episode: u64,
    env_steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::Config)?;
        let agent = Agent::new(&cfg)?;
        let replay = ReplayMemory::new(
            ReplayConfig {
                capacity: cfg.replay_capacity,
                n_step: cfg.n_step,
                gamma: cfg.gamma,
                omega: cfg.priority_exponent,
                eps_p: cfg.priority_eps,
            },
            FRAME_LEN,
        );
        let train_base = episode_seed(cfg.seed, TRAIN_STREAM);
        let env = PelletWorld::with_protocol(episode_seed(train_base, 0), cfg.protocol());
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_rng.set_stream(SAMPLE_STREAM);
        let mut t = Self {
            cfg,
            agent,
            replay,
            env,
            sample_rng,
            train_base,
            episode: 0,
            env_steps: 0,
        };
        t.replay.start_episode(t.env.state().latest());
        Ok(t)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn replay(&self) -> &ReplayMemory {
        &self.replay
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// One environment step, plus a gradient update every
    /// `steps_per_update` steps once the replay holds `train_start`
    /// transitions.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let action = self.agent.act(self.env.state(), ActMode::Train)?;
        let out = self.env.step(action)?;
        self.env_steps += 1;
        self.replay.append(action, out.reward, self.env.state().latest(), out.done)?;
        let episode_return = out.done.then(|| self.env.stats().raw_return);
        if out.done {
            self.episode += 1;
            self.env.reset(episode_seed(self.train_base, self.episode), self.cfg.noop_max);
            self.replay.start_episode(self.env.state().latest());
        }
        let beta = self.cfg.beta(self.env_steps);
        let mut update = None;
        if self.replay.len() >= self.cfg.train_start && self.env_steps.is_multiple_of(self.cfg.steps_per_update) {
            let stats = self
                .agent
                .learn(&mut self.replay, self.cfg.batch, beta, &mut self.sample_rng)?;
            update = Some((self.agent.updates(), stats.loss));
        }
        Ok(StepRecord {
            env_step: self.env_steps,
            action,
            reward: out.reward,
            update,
            beta,
            episode_return,
        })
    }

    /// Evaluation `index` of this run, over `eval_episodes` episodes.
    pub fn evaluate(&self, index: u64) -> Result<EvalReport, TrainError> {
        let seed = episode_seed(episode_seed(self.cfg.seed, EVAL_STREAM), index);
        evaluate(
            self.agent.online(),
            self.cfg.eval_episodes,
            self.cfg.eval_epsilon,
            seed,
            self.cfg.protocol(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub best: Snapshot,
    pub evals: Vec<(u64, EvalReport)>,
    pub updates: u64,
    pub target_syncs: u64,
    pub env_steps: u64,
}

fn opt(v: Option<impl ToString>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Full training run. Every `eval_every` steps, and once at the end, the
/// online network is evaluated and kept if it beats the best score so far.
/// Metrics rows are flushed as they are written.
pub fn run_training(cfg: &TrainerConfig, metrics: &mut dyn Write) -> Result<RunOutput, TrainError> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;
    let mut best: Option<Snapshot> = None;
    let mut evals = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0f64, 0u64);
    let mut last_update = 0;
    for _ in 0..cfg.total_steps {
        let rec = trainer.step()?;
        if let Some((u, loss)) = rec.update {
            loss_sum += f64::from(loss);
            loss_n += 1;
            last_update = u;
        }
        let step = rec.env_step;
        let eval_due = step % cfg.eval_every == 0 || step == cfg.total_steps;
        if !eval_due && step % cfg.log_every != 0 {
            continue;
        }
        let report = if eval_due {
            let r = trainer.evaluate(evals.len() as u64)?;
            if best.as_ref().is_none_or(|b| r.mean() > b.score) {
                best = Some(Snapshot {
                    params: trainer.agent().online().params().clone(),
                    score: r.mean(),
                    env_step: step,
                });
            }
            Some(r)
        } else {
            None
        };
        let loss = (loss_n > 0).then(|| loss_sum / loss_n as f64);
        let wall = cfg.log_wallclock.then(|| format!("{:.3}", start.elapsed().as_secs_f64()));
        writeln!(
            metrics,
            "{step},{last_update},{},{},{},{},{}",
            opt(loss),
            opt(report.as_ref().map(EvalReport::mean)),
            opt(report.as_ref().map(EvalReport::std)),
            rec.beta,
            opt(wall)
        )?;
        metrics.flush()?;
        (loss_sum, loss_n) = (0.0, 0);
        if let Some(r) = report {
            evals.push((step, r));
        }
    }
    Ok(RunOutput {
        best: best.expect("the final step always evaluates"),
        evals,
        updates: trainer.agent().updates(),
        target_syncs: trainer.agent().target_syncs(),
        env_steps: trainer.env_steps(),
    })
}
