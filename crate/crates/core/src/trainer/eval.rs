//! Episode evaluation. Episodes run in parallel; each gets its own
//! environment seed and action RNG derived from `(seed, episode index)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{episode_seed, EnvError, PelletWorld, Protocol, StateStack, N_ACTIONS};
use crate::network::{GradTarget, Network};
use crate::par;
use crate::tensor::TensorError;

/// Noise-free epsilon-greedy action. A uniform draw decides exploration
/// first, so the RNG advances the same way whatever the network outputs.
pub fn eval_action(net: &Network<f32>, state: &StateStack, epsilon: f64, rng: &mut impl Rng) -> Result<usize, TensorError> {
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..N_ACTIONS));
    }
    let f = net.forward(Arc::new(state.to_tensor()), false, GradTarget::None)?;
    Ok(f.q_output(0).greedy())
}

pub fn random_policy(_: &PelletWorld, rng: &mut ChaCha8Rng) -> Result<usize, EnvError> {
    Ok(rng.random_range(0..N_ACTIONS))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    /// Unclipped episode returns, in episode order.
    pub returns: Vec<f64>,
    pub agent_steps: Vec<u64>,
    pub noops: Vec<u64>,
    pub ticks: Vec<u64>,
}

impl EvalReport {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / self.returns.len().max(1) as f64).sqrt()
    }
}

/// `RSRB_THREADS`, if set to a positive integer.
pub fn thread_limit_from_env() -> Option<usize> {
    std::env::var("RSRB_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

struct Episode {
    ret: f64,
    steps: u64,
    noops: u64,
    ticks: u64,
}

/// Runs `episodes` episodes of `policy` under `protocol`. Results do not
/// depend on thread count or scheduling.
pub fn evaluate_policy<P, E>(episodes: usize, protocol: Protocol, seed: u64, policy: P) -> Result<EvalReport, E>
where
    P: Fn(&PelletWorld, &mut ChaCha8Rng) -> Result<usize, E> + Sync,
    E: Send + From<EnvError>,
{
    let results = par::with_thread_limit(thread_limit_from_env(), || {
        par::map_indexed(episodes, |i| -> Result<Episode, E> {
            let env_seed = episode_seed(seed, i as u64);
            let mut env = PelletWorld::with_protocol(env_seed, protocol);
            let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
            rng.set_stream(1);
            while !env.is_done() {
                let a = policy(&env, &mut rng)?;
                env.step(a)?;
            }
            let s = env.stats();
            Ok(Episode {
                ret: s.raw_return,
                steps: s.agent_steps,
                noops: s.noops,
                ticks: env.world().ticks,
            })
        })
    });
    let mut report = EvalReport {
        seed,
        returns: Vec::with_capacity(episodes),
        agent_steps: Vec::with_capacity(episodes),
        noops: Vec::with_capacity(episodes),
        ticks: Vec::with_capacity(episodes),
    };
    for r in results {
        let e = r?;
        report.returns.push(e.ret);
        report.agent_steps.push(e.steps);
        report.noops.push(e.noops);
        report.ticks.push(e.ticks);
    }
    Ok(report)
}

/// Evaluates `net` with noise off and epsilon-greedy actions.
pub fn evaluate(
    net: &Network<f32>,
    episodes: usize,
    epsilon: f64,
    seed: u64,
    protocol: Protocol,
) -> Result<EvalReport, super::TrainError> {
    evaluate_policy(episodes, protocol, seed, |env: &PelletWorld, rng: &mut ChaCha8Rng| {
        eval_action(net, env.state(), epsilon, rng).map_err(super::TrainError::from)
    })
}
