//! Distributional double-Q learning with prioritized replay, plus acting,
//! evaluation and the training loop.

mod eval;
mod optim;
mod projection;
mod run;

use std::io;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{EnvError, Protocol, StateStack, FRAME_CAP, NOOP_MAX, N_ACTIONS};
use crate::network::{GradTarget, Network, NetworkConfig};
use crate::replay::{ReplayError, ReplayMemory, SampleId, SampledBatch};
use crate::tensor::{Real, Tensor, TensorError};

pub use eval::{eval_action, evaluate, evaluate_policy, random_policy, thread_limit_from_env, EvalReport};
pub use optim::{Adam, AdamConfig};
pub use projection::{project_brute_force, project_target, random_projection_case};
pub use run::{run_training, RunOutput, Snapshot, StepRecord, Trainer, METRICS_HEADER};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub network: NetworkConfig,
    pub gamma: f64,
    pub n_step: usize,
    pub batch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// In gradient updates.
    pub target_update_period: u64,
    /// Transitions stored before learning starts.
    pub train_start: usize,
    /// Environment steps per gradient update.
    pub steps_per_update: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub test_episodes: usize,
    pub eval_epsilon: f64,
    pub total_steps: u64,
    pub noop_max: usize,
    /// Frames per episode, no-op starts included.
    pub frame_cap: u64,
    pub replay_capacity: usize,
    pub priority_exponent: f64,
    pub priority_eps: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Environment steps between metrics rows (evaluations always log).
    pub log_every: u64,
    /// Fill the `wallclock_s` column; leaves logs non-reproducible.
    pub log_wallclock: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            gamma: 0.99,
            n_step: 3,
            batch: 32,
            lr: 6.25e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1.5e-4,
            grad_clip: 10.0,
            target_update_period: 2_000,
            train_start: 8_000,
            steps_per_update: 4,
            eval_every: 25_000,
            eval_episodes: 10,
            test_episodes: 200,
            eval_epsilon: 0.001,
            total_steps: 400_000,
            noop_max: NOOP_MAX,
            frame_cap: FRAME_CAP,
            replay_capacity: 1 << 17,
            priority_exponent: 0.5,
            priority_eps: 1e-6,
            beta_start: 0.4,
            beta_end: 1.0,
            log_every: 5_000,
            log_wallclock: false,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.network.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return Err(format!("eval_epsilon {} outside [0, 1]", self.eval_epsilon));
        }
        let positive = [
            ("n_step", self.n_step as f64),
            ("batch", self.batch as f64),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("target_update_period", self.target_update_period as f64),
            ("train_start", self.train_start as f64),
            ("steps_per_update", self.steps_per_update as f64),
            ("eval_every", self.eval_every as f64),
            ("eval_episodes", self.eval_episodes as f64),
            ("test_episodes", self.test_episodes as f64),
            ("total_steps", self.total_steps as f64),
            ("priority_exponent", self.priority_exponent),
            ("priority_eps", self.priority_eps),
            ("log_every", self.log_every as f64),
            ("frame_cap", self.frame_cap as f64),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
            return Err(format!("{name} must be positive"));
        }
        if !self.replay_capacity.is_power_of_two() {
            return Err(format!("replay_capacity {} is not a power of two", self.replay_capacity));
        }
        if self.train_start < self.batch || self.train_start > self.replay_capacity {
            return Err("train_start must lie between batch and replay_capacity".into());
        }
        if self.network.n_actions != N_ACTIONS {
            return Err(format!("PelletWorld has {N_ACTIONS} actions, not {}", self.network.n_actions));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            clip_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            noop_max: self.noop_max,
            frame_cap: self.frame_cap,
        }
    }

    /// Importance-sampling exponent after `step` environment steps.
    pub fn beta(&self, step: u64) -> f64 {
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

/// Which network a forward pass in the loss used, and what for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossCall {
    OnlineSelect,
    TargetEvaluate,
    OnlineLearn,
}

/// A learning minibatch. States are `(B, 4, H, W)`.
#[derive(Clone, Debug)]
pub struct LossBatch<T> {
    pub states: Arc<Tensor<T>>,
    pub next_states: Arc<Tensor<T>>,
    pub actions: Vec<usize>,
    pub returns: Vec<T>,
    pub gamma_n: Vec<T>,
    pub dones: Vec<bool>,
    pub weights: Vec<T>,
}

impl LossBatch<f32> {
    pub fn from_sample(sample: &SampledBatch, stack_shape: [usize; 3]) -> Result<Self, TensorError> {
        let shape = vec![sample.len(), stack_shape[0], stack_shape[1], stack_shape[2]];
        Ok(Self {
            states: Arc::new(Tensor::new(shape.clone(), sample.states.clone())?),
            next_states: Arc::new(Tensor::new(shape, sample.next_states.clone())?),
            actions: sample.actions.clone(),
            returns: sample.returns.iter().map(|&r| r as f32).collect(),
            gamma_n: sample.gamma_n.iter().map(|&g| g as f32).collect(),
            dones: sample.dones.clone(),
            weights: sample.weights.iter().map(|&w| w as f32).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// Mean of importance-weighted per-sample cross-entropies.
    pub loss: T,
    /// Unweighted per-sample cross-entropies; fed back as priorities.
    pub per_sample: Vec<T>,
    /// Aligned with the online network's parameter order.
    pub grads: Vec<Tensor<T>>,
    /// Projected target distributions, `B x K`.
    pub targets: Vec<T>,
    pub next_actions: Vec<usize>,
    pub calls: Vec<LossCall>,
}

/// Double-Q categorical loss. The next action comes from the online network,
/// its return distribution from the target network; both use whatever noise
/// they currently hold.
pub fn compute_loss<T: Real>(
    online: &Network<T>,
    target: &Network<T>,
    batch: &LossBatch<T>,
) -> Result<LossOutput<T>, TensorError> {
    let mut calls = Vec::with_capacity(3);
    let next_actions = online
        .forward(batch.next_states.clone(), true, GradTarget::None)?
        .greedy_actions();
    calls.push(LossCall::OnlineSelect);
    let next = target.forward(batch.next_states.clone(), true, GradTarget::None)?;
    calls.push(LossCall::TargetEvaluate);
    let cfg = target.config();
    let (a, k) = (cfg.n_actions, cfg.n_atoms);
    let probs = next.probs();
    let picked: Vec<T> = next_actions
        .iter()
        .enumerate()
        .flat_map(|(b, &act)| probs[(b * a + act) * k..(b * a + act + 1) * k].iter().copied())
        .collect();
    drop(next);
    let targets = project_target(
        &online.config().support(),
        &picked,
        &batch.returns,
        &batch.gamma_n,
        &batch.dones,
    );

    let mut f = online.forward(batch.states.clone(), true, GradTarget::Params)?;
    calls.push(LossCall::OnlineLearn);
    let ce = f.graph.cross_entropy(f.log_probs, &batch.actions, &targets, &batch.weights)?;
    let seed = Tensor::full(f.graph.value(ce).shape(), T::one());
    let mut grads = f.graph.backward(ce, seed)?;
    let per_sample = f.graph.per_sample_losses(ce).expect("cross-entropy node").to_vec();
    let loss = f.graph.value(ce).data()[0];
    let grads = f
        .params
        .iter()
        .zip(online.params().iter())
        .map(|(&id, (_, p))| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(LossOutput {
        loss,
        per_sample,
        grads,
        targets,
        next_actions,
        calls,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActMode {
    /// Greedy under freshly sampled parameter noise.
    Train,
    /// Noise off, epsilon-greedy.
    Eval { epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnStats {
    pub loss: f32,
    pub grad_norm: f64,
    pub ids: Vec<SampleId>,
    pub priorities: Vec<f64>,
}

pub struct Agent {
    online: Network<f32>,
    target: Network<f32>,
    optimizer: Adam,
    noise_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    target_period: u64,
    updates: u64,
    target_syncs: u64,
}

impl Agent {
    pub fn new(cfg: &TrainerConfig) -> Result<Self, TrainError> {
        let online = Network::new(cfg.network.clone(), cfg.seed).map_err(TrainError::Config)?;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        Ok(Self {
            target: online.clone(),
            optimizer: Adam::new(cfg.adam(), online.params()),
            online,
            noise_rng: stream(11),
            act_rng: stream(12),
            target_period: cfg.target_update_period,
            updates: 0,
            target_syncs: 0,
        })
    }

    pub fn online(&self) -> &Network<f32> {
        &self.online
    }

    pub fn target(&self) -> &Network<f32> {
        &self.target
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn target_syncs(&self) -> u64 {
        self.target_syncs
    }

    pub fn act(&mut self, state: &StateStack, mode: ActMode) -> Result<usize, TensorError> {
        match mode {
            ActMode::Train => {
                self.online.resample_noise(&mut self.noise_rng);
                let f = self.online.forward(Arc::new(state.to_tensor()), true, GradTarget::None)?;
                Ok(f.q_output(0).greedy())
            }
            ActMode::Eval { epsilon } => eval_action(&self.online, state, epsilon, &mut self.act_rng),
        }
    }

    /// Samples a minibatch, takes one optimizer step, feeds the per-sample
    /// losses back as priorities and syncs the target network on schedule.
    pub fn learn(
        &mut self,
        replay: &mut ReplayMemory,
        batch: usize,
        beta: f64,
        rng: &mut impl Rng,
    ) -> Result<LearnStats, TrainError> {
        let sample = replay.sample(batch, beta, rng)?;
        let lb = LossBatch::from_sample(&sample, self.online.config().input_shape)?;
        self.online.resample_noise(&mut self.noise_rng);
        self.target.resample_noise(&mut self.noise_rng);
        let out = compute_loss(&self.online, &self.target, &lb)?;
        let grad_norm = self.optimizer.step(self.online.params_mut(), &out.grads);
        let priorities: Vec<f64> = out.per_sample.iter().map(|&l| f64::from(l)).collect();
        replay.update_priorities(&sample.ids, &priorities);
        self.updates += 1;
        if self.updates.is_multiple_of(self.target_period) {
            self.sync_target();
        }
        Ok(LearnStats {
            loss: out.loss,
            grad_norm,
            ids: sample.ids,
            priorities,
        })
    }

    pub fn sync_target(&mut self) {
        self.target.set_params(self.online.params().clone());
        self.target_syncs += 1;
    }
}
