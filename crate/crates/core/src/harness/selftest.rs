//! Verification suites run by `rsrb selftest`.
//!
//! Each check compares the implementation against an independent oracle:
//! central finite differences for gradients, a quadratic brute-force
//! projection, brute-force sums and exact proportions for the replay, and the
//! scripted player's recorded returns for the environment.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{
    scripted_action, EnvError, ObjectMasks, PelletWorld, Protocol, ACTION_REPEAT, FRAME_CAP, NOOP_MAX, N_ACTIONS,
    ORACLE_FIXTURE_RETURNS, ORACLE_FIXTURE_SEED,
};
use crate::network::{Network, NetworkConfig, NormMode};
use crate::replay::{NStepComposer, ReplayConfig, ReplayMemory, SumTree, STACK};
use crate::tensor::gradcheck::{finite_difference_check_sampled, GradCheck};
use crate::tensor::kernels::factorized_noise;
use crate::tensor::{Graph, NodeId, NoisyNodes, Result as TensorResult, Tensor};
use crate::trainer::{
    compute_loss, evaluate_policy, project_brute_force, project_target, random_projection_case, LossBatch, TrainerConfig,
};

/// Wall-clock budget for the whole of `selftest all`.
pub const BUDGET_SECS: f64 = 300.0;
pub const GRAD_STEP: f64 = 1e-5;
pub const KERNEL_TOL: f64 = 1e-4;
pub const RELU_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-3;
/// Random points per kernel.
pub const GRAD_POINTS: u64 = 100;
pub const PROJECTION_CASES: usize = 10_000;
pub const PROJECTION_TOL: f64 = 1e-9;
pub const TREE_OPS: usize = 1_000_000;
pub const CHI_SQUARE_DRAWS: usize = 60_000;
const PROJECTION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
pub const TOY_EPISODES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Grad,
    Replay,
    Projection,
    Env,
    All,
}

impl Scope {
    pub const SUITES: [Scope; 4] = [Scope::Grad, Scope::Replay, Scope::Projection, Scope::Env];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Grad => "grad",
            Scope::Replay => "replay",
            Scope::Projection => "projection",
            Scope::Env => "env",
            Scope::All => "all",
        })
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "grad" => Ok(Scope::Grad),
            "replay" => Ok(Scope::Replay),
            "projection" => Ok(Scope::Projection),
            "env" => Ok(Scope::Env),
            "all" => Ok(Scope::All),
            other => Err(format!("unknown suite {other:?} (grad, replay, projection, env or all)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub suite: Scope,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckResult = Result<String, String>;

fn timed(suite: Scope, name: &str, f: impl FnOnce() -> CheckResult) -> CheckOutcome {
    let start = Instant::now();
    let r = f();
    CheckOutcome {
        suite,
        name: name.to_string(),
        passed: r.is_ok(),
        detail: r.unwrap_or_else(|e| e),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn ensure(ok: bool, detail: String) -> CheckResult {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tensor_err(e: impl fmt::Display) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn noise_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| factorized_noise(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Worst finite-difference error of `op` over [`GRAD_POINTS`] random points.
/// `op` also receives the point index, to derive any fixed per-point data.
fn kernel_check<P, O>(tol: f64, point: P, op: O) -> CheckResult
where
    P: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    O: Fn(&mut Graph<f64>, &[NodeId], u64) -> TensorResult<NodeId>,
{
    let mut worst = 0.0f64;
    let mut coords = 0;
    for k in 0..GRAD_POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let p = point(&mut rng);
        let op_k = |g: &mut Graph<f64>, ids: &[NodeId]| op(g, ids, k);
        // the projection must not share the point's random stream
        let r = finite_difference_check_sampled(&op_k, &p, GRAD_STEP, k ^ PROJECTION_SALT, usize::MAX).map_err(tensor_err)?;
        worst = worst.max(r.max_rel_error);
        coords += r.coordinates;
    }
    ensure(
        worst <= tol,
        format!("max rel err {worst:.2e} (tol {tol:.0e}), {GRAD_POINTS} points, {coords} coordinates"),
    )
}

fn noisy_nodes(ids: &[NodeId]) -> NoisyNodes {
    NoisyNodes {
        mu_w: ids[1],
        sigma_w: ids[2],
        mu_b: ids[3],
        sigma_b: ids[4],
    }
}

fn noisy_point(batch: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    move |rng| {
        vec![
            uniform(rng, &[batch, 4], -1.0, 1.0),
            uniform(rng, &[5, 4], -1.0, 1.0),
            uniform(rng, &[5, 4], 0.0, 0.5),
            uniform(rng, &[5], -1.0, 1.0),
            uniform(rng, &[5], 0.0, 0.5),
        ]
    }
}

fn noisy_op(noise_on: bool) -> impl Fn(&mut Graph<f64>, &[NodeId], u64) -> TensorResult<NodeId> {
    move |g, ids, k| {
        let mut rng = ChaCha8Rng::seed_from_u64(k ^ 0x5eed);
        let (ei, eo) = (noise_vec(&mut rng, 4), noise_vec(&mut rng, 5));
        g.noisy_linear(ids[0], noisy_nodes(ids), noise_on.then_some((ei.as_slice(), eo.as_slice())))
    }
}

/// Gradients of a 1x1 convolution against the same map written as a linear
/// layer over sites, both by reverse mode.
fn conv1x1_matches_linear() -> CheckResult {
    let (c, h, w, o) = (3, 4, 5, 2);
    let sites = h * w;
    let mut worst = 0.0f64;
    for k in 0..GRAD_POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let x = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
        let kern = uniform(&mut rng, &[o, c, 1, 1], -1.0, 1.0);
        let b = uniform(&mut rng, &[o], -1.0, 1.0);
        let dy = uniform(&mut rng, &[o, h, w], -1.0, 1.0);

        let mut g = Graph::new();
        let ids = [g.leaf(x.clone(), true), g.leaf(kern.clone(), true), g.leaf(b.clone(), true)];
        let y = g.conv2d(ids[0], ids[1], ids[2], 1).map_err(tensor_err)?;
        let conv_y = g.value(y).clone();
        let grads = g.backward(y, dy.clone()).map_err(tensor_err)?;

        let xt = Tensor::from_fn(&[sites, c], |i| x.data()[(i % c) * sites + i / c]);
        let wt = kern.clone().reshape(&[o, c]).map_err(tensor_err)?;
        let dyt = Tensor::from_fn(&[sites, o], |i| dy.data()[(i % o) * sites + i / o]);
        let mut gl = Graph::new();
        let lids = [gl.leaf(xt, true), gl.leaf(wt, true), gl.leaf(b, true)];
        let yl = gl.linear(lids[0], lids[1], lids[2]).map_err(tensor_err)?;
        let lin_y = gl.value(yl).clone();
        let lgrads = gl.backward(yl, dyt).map_err(tensor_err)?;

        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // (sites, k) -> (k, sites)
        let transposed =
            |t: &Tensor<f64>, k: usize| -> Vec<f64> { (0..k * sites).map(|i| t.data()[(i % sites) * k + i / sites]).collect() };
        let gx = lgrads.get(lids[0]).expect("input gradient");
        worst = worst
            .max(diff(conv_y.data(), &transposed(&lin_y, o)))
            .max(diff(grads.get(ids[0]).expect("input gradient").data(), &transposed(gx, c)))
            .max(diff(
                grads.get(ids[1]).expect("kernel gradient").data(),
                lgrads.get(lids[1]).expect("weight gradient").data(),
            ))
            .max(diff(
                grads.get(ids[2]).expect("bias gradient").data(),
                lgrads.get(lids[2]).expect("bias gradient").data(),
            ));
    }
    ensure(
        worst <= 1e-12,
        format!("max |conv - linear| {worst:.2e} over values and all gradients, {GRAD_POINTS} points"),
    )
}

/// A 2-action, 3-atom network on 44 x 44 input, small enough for
/// exhaustive gradient checks.
pub fn micro_config() -> NetworkConfig {
    NetworkConfig {
        input_shape: [4, 44, 44],
        n_maps: 2,
        n_actions: 2,
        n_atoms: 3,
        v_min: -1.0,
        v_max: 1.0,
        hidden_width: 6,
        score_hidden: 5,
        ..NetworkConfig::default()
    }
}

/// Random minibatch for `cfg` with mixed terminal flags.
pub fn micro_batch(seed: u64, cfg: &NetworkConfig, batch: usize) -> LossBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = cfg.input_shape;
    let mut states = || Arc::new(Tensor::from_fn(&[batch, c, h, w], |_| rng.random::<f64>()));
    let (s, s2) = (states(), states());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    LossBatch {
        states: s,
        next_states: s2,
        actions: (0..batch).map(|_| rng.random_range(0..cfg.n_actions)).collect(),
        returns: (0..batch).map(|_| rng.random_range(-1.5..1.5)).collect(),
        gamma_n: vec![0.97; batch],
        dones: (0..batch).map(|i| i % 3 == 0).collect(),
        weights: (0..batch).map(|_| rng.random_range(0.2..1.0)).collect(),
    }
}

/// Finite differences of the full double-Q loss with respect to every
/// parameter tensor of the online network, `per_input` coordinates each.
/// The projected target is held fixed, as it is during learning.
pub fn end_to_end_loss_check(mode: NormMode, seed: u64, per_input: usize) -> Result<GradCheck, String> {
    let cfg = NetworkConfig {
        norm_mode: mode,
        ..micro_config()
    };
    let mut online = Network::<f64>::new(cfg.clone(), seed)?;
    let mut target = Network::<f64>::new(cfg.clone(), seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    online.resample_noise(&mut rng);
    target.resample_noise(&mut rng);
    let batch = micro_batch(seed, &cfg, 3);
    let out = compute_loss(&online, &target, &batch).map_err(tensor_err)?;
    let point: Vec<Tensor<f64>> = online.params().iter().map(|(_, t)| t.clone()).collect();
    let op = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let s = g.leaf(batch.states.clone(), false);
        let nodes = online.build(g, ids, s, true)?;
        g.cross_entropy(nodes.log_probs, &batch.actions, &out.targets, &batch.weights)
    };
    finite_difference_check_sampled(&op, &point, GRAD_STEP, seed, per_input).map_err(tensor_err)
}

fn end_to_end(mode: NormMode) -> CheckResult {
    let (mut worst, mut coords, mut skipped) = (0.0f64, 0, 0);
    for seed in 0..3 {
        let r = end_to_end_loss_check(mode, seed, 6)?;
        worst = worst.max(r.max_rel_error);
        coords += r.coordinates;
        skipped += r.skipped;
    }
    // a handful of kink crossings is expected; many would hide real errors
    ensure(
        worst <= END_TO_END_TOL && skipped * 10 <= coords + skipped,
        format!(
            "max rel err {worst:.2e} (tol {END_TO_END_TOL:.0e}), 3 networks, {coords} coordinates, {skipped} skipped at ReLU kinks"
        ),
    )
}

pub fn grad_suite() -> Vec<CheckOutcome> {
    let s = Scope::Grad;
    let u = uniform;
    vec![
        timed(s, "conv2d, stride 2, batched", || {
            kernel_check(
                KERNEL_TOL,
                |r| {
                    vec![
                        u(r, &[2, 2, 7, 7], -1.0, 1.0),
                        u(r, &[3, 2, 3, 3], -1.0, 1.0),
                        u(r, &[3], -1.0, 1.0),
                    ]
                },
                |g, ids, _| g.conv2d(ids[0], ids[1], ids[2], 2),
            )
        }),
        timed(s, "conv2d, stride 1, single state", || {
            kernel_check(
                KERNEL_TOL,
                |r| {
                    vec![
                        u(r, &[2, 5, 6], -1.0, 1.0),
                        u(r, &[2, 2, 2, 2], -1.0, 1.0),
                        u(r, &[2], -1.0, 1.0),
                    ]
                },
                |g, ids, _| g.conv2d(ids[0], ids[1], ids[2], 1),
            )
        }),
        timed(s, "conv2d 1x1 equals per-site linear", conv1x1_matches_linear),
        timed(s, "linear", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[3, 4], -1.0, 1.0), u(r, &[5, 4], -1.0, 1.0), u(r, &[5], -1.0, 1.0)],
                |g, ids, _| g.linear(ids[0], ids[1], ids[2]),
            )
        }),
        timed(s, "noisy_linear, noise on, factored path", || {
            kernel_check(KERNEL_TOL, noisy_point(2), noisy_op(true))
        }),
        timed(s, "noisy_linear, noise on, weight path", || {
            kernel_check(KERNEL_TOL, noisy_point(3), noisy_op(true))
        }),
        timed(s, "noisy_linear, noise off", || {
            kernel_check(KERNEL_TOL, noisy_point(3), noisy_op(false))
        }),
        timed(s, "relu away from the kink", || {
            kernel_check(
                RELU_TOL,
                |r| {
                    vec![Tensor::from_fn(&[4, 5], |_| {
                        let m = r.random_range(10.0 * GRAD_STEP..2.0);
                        if r.random_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    })]
                },
                |g, ids, _| g.relu(ids[0]),
            )
        }),
        timed(s, "elu", || {
            kernel_check(KERNEL_TOL, |r| vec![u(r, &[4, 5], -3.0, 3.0)], |g, ids, _| g.elu(ids[0]))
        }),
        timed(s, "sigmoid", || {
            kernel_check(KERNEL_TOL, |r| vec![u(r, &[4, 5], -4.0, 4.0)], |g, ids, _| g.sigmoid(ids[0]))
        }),
        timed(s, "l2_normalize_channels", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 3, 2, 2], -1.0, 1.0)],
                |g, ids, _| g.l2_normalize_channels(ids[0], 1e-12),
            )
        }),
        timed(s, "spatial_softmax", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 2, 3, 3], -2.0, 2.0)],
                |g, ids, _| g.spatial_softmax(ids[0]),
            )
        }),
        timed(s, "weight_aggregate", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 2, 3, 3], 0.0, 1.0), u(r, &[2, 4, 3, 3], -1.0, 1.0)],
                |g, ids, _| g.weight_aggregate(ids[0], ids[1]),
            )
        }),
        timed(s, "reshape", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 6], -1.0, 1.0)],
                |g, ids, _| g.reshape(ids[0], &[3, 4]),
            )
        }),
        timed(s, "dueling", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 3], -1.0, 1.0), u(r, &[2, 6], -1.0, 1.0)],
                |g, ids, _| g.dueling(ids[0], ids[1], 2),
            )
        }),
        timed(s, "log_softmax", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 3, 4], -2.0, 2.0)],
                |g, ids, _| g.log_softmax(ids[0]),
            )
        }),
        timed(s, "cross_entropy", || {
            kernel_check(
                KERNEL_TOL,
                |r| vec![u(r, &[2, 3, 4], -3.0, 0.0)],
                |g, ids, k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(k ^ 0xce);
                    let actions: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
                    let targets: Vec<f64> = (0..2)
                        .flat_map(|_| {
                            let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                            let s: f64 = raw.iter().sum();
                            raw.into_iter().map(move |x| x / s)
                        })
                        .collect();
                    let weights: Vec<f64> = (0..2).map(|_| rng.random_range(0.2..1.0)).collect();
                    g.cross_entropy(ids[0], &actions, &targets, &weights)
                },
            )
        }),
        timed(s, "end-to-end loss, softmax gazes", || end_to_end(NormMode::Softmax)),
        timed(s, "end-to-end loss, sigmoid gazes", || end_to_end(NormMode::Sigmoid)),
    ]
}

fn tree_mixed_ops() -> CheckResult {
    const CAP: usize = 1024;
    let mut tree = SumTree::new(CAP);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cursor = 0;
    let (mut worst_node, mut worst_root) = (0.0f64, 0.0f64);
    for op in 0..TREE_OPS {
        match rng.random_range(0..4) {
            0 => {
                tree.set(cursor, rng.random_range(0.0..10.0));
                cursor = (cursor + 1) % CAP;
            }
            1 => {
                tree.set(rng.random_range(0..CAP), rng.random::<f64>().powi(4) * 100.0);
            }
            2 => {
                tree.set(rng.random_range(0..CAP), 0.0);
            }
            _ => {
                let total = tree.total();
                if total > 0.0 {
                    let leaf = tree.find(rng.random_range(0.0..total));
                    if tree.get(leaf) <= 0.0 {
                        return Err(format!("op {op}: sampled empty leaf {leaf}"));
                    }
                }
            }
        }
        if op % 10_000 == 9_999 {
            worst_node = worst_node.max(tree.max_inconsistency());
            let brute: f64 = tree.leaves().iter().sum();
            worst_root = worst_root.max((tree.total() - brute).abs() / brute.max(f64::MIN_POSITIVE));
        }
    }
    ensure(
        worst_node <= 1e-6 && worst_root <= 1e-6,
        format!("{TREE_OPS} ops: max parent/child gap {worst_node:.1e}, max root vs brute-force sum {worst_root:.1e}"),
    )
}

/// Critical value of chi-square with 31 degrees of freedom at alpha = 0.01.
const CHI2_31_01: f64 = 52.191;

fn stratified_frequencies() -> CheckResult {
    const SLOTS: usize = 32;
    const BATCH: usize = 32;
    let mut m = ReplayMemory::new(
        ReplayConfig {
            capacity: SLOTS,
            n_step: 1,
            ..ReplayConfig::default()
        },
        1,
    );
    m.start_episode(&[0]);
    for i in 0..SLOTS {
        m.append(0, 0.0, &[i as u8], false).map_err(tensor_err)?;
    }
    let ids: Vec<_> = (0..SLOTS).map(|leaf| m.sample_id(leaf).expect("filled")).collect();
    let raw: Vec<f64> = (0..SLOTS)
        .map(|i| ((i % 7) + 1) as f64 * if i % 5 == 0 { 10.0 } else { 1.0 })
        .collect();
    m.update_priorities(&ids, &raw);
    let total = m.tree().total();
    let expected: Vec<f64> = m.tree().leaves().iter().map(|l| l / total).collect();
    let mut counts = [0f64; SLOTS];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let beta = 0.4;
    let mut weight_err = 0.0f64;
    for _ in 0..CHI_SQUARE_DRAWS / BATCH {
        let b = m.sample(BATCH, beta, &mut rng).map_err(tensor_err)?;
        let w: Vec<f64> = b
            .ids
            .iter()
            .map(|id| (SLOTS as f64 * expected[id.leaf]).powf(-beta))
            .collect();
        let max = w.iter().copied().fold(0.0, f64::max);
        for (i, id) in b.ids.iter().enumerate() {
            counts[id.leaf] += 1.0;
            weight_err = weight_err.max((b.weights[i] - w[i] / max).abs());
        }
    }
    let n = (CHI_SQUARE_DRAWS / BATCH * BATCH) as f64;
    let chi2: f64 = counts.iter().zip(&expected).map(|(c, p)| (c - n * p).powi(2) / (n * p)).sum();
    ensure(
        chi2 < CHI2_31_01 && weight_err <= 1e-12,
        format!("chi2 {chi2:.2} < {CHI2_31_01} (31 dof, alpha 0.01) over {n} draws; max IS-weight error {weight_err:.1e}"),
    )
}

fn n_step_reconstruction() -> CheckResult {
    let n = 3;
    let gamma = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for e in 0..TOY_EPISODES {
        let len = rng.random_range(1..=40usize);
        let rewards: Vec<f64> = (0..len).map(|_| f64::from(rng.random_range(-1i32..=1))).collect();
        let mut c = NStepComposer::new(n, gamma);
        let mut emitted = Vec::new();
        for (t, &r) in rewards.iter().enumerate() {
            emitted.extend(c.push(t, 0, r, t + 1, t + 1 == len));
        }
        if emitted.len() != len {
            return Err(format!("episode {e}: {} transitions for {len} steps", emitted.len()));
        }
        for (i, t) in emitted.iter().enumerate() {
            let k = n.min(len - i);
            let ret: f64 = (0..k).map(|j| gamma.powi(j as i32) * rewards[i + j]).sum();
            let ok = t.state == i
                && t.next_state == i + k
                && t.n_step_return == ret
                && t.gamma_n == gamma.powi(k as i32)
                && t.done == (i + n >= len);
            if !ok {
                return Err(format!("episode {e}, step {i}: {t:?}"));
            }
        }
        let episode: f64 = rewards.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum();
        let stitched: f64 = emitted
            .iter()
            .step_by(n)
            .enumerate()
            .map(|(j, t)| gamma.powi((j * n) as i32) * t.n_step_return)
            .sum();
        if stitched != episode {
            return Err(format!("episode {e}: stitched {stitched} != discounted return {episode}"));
        }
    }
    Ok(format!("{TOY_EPISODES} episodes, exact at gamma {gamma}"))
}

/// Transitions rebuilt from the frame ring against stacks stored naively.
fn frame_ring_matches_naive() -> CheckResult {
    const FRAME: usize = 3;
    let cfg = ReplayConfig {
        capacity: 4096,
        ..ReplayConfig::default()
    };
    let mut m = ReplayMemory::new(cfg.clone(), FRAME);
    let mut naive = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..TOY_EPISODES {
        let len = rng.random_range(1..=30usize);
        let mut frame = || -> Vec<u8> { (0..FRAME).map(|_| rng.random()).collect() };
        let first = frame();
        let steps: Vec<(usize, f64, Vec<u8>)> = (0..len).map(|_| (0, 0.0, frame())).collect();
        m.start_episode(&first);
        let mut c = NStepComposer::new(cfg.n_step, cfg.gamma);
        let mut stack: Vec<Vec<u8>> = vec![first; STACK];
        for (t, (_, _, f)) in steps.iter().enumerate() {
            let action = rng.random_range(0..N_ACTIONS);
            let reward = f64::from(rng.random_range(-1i32..=1));
            let done = t + 1 == len;
            m.append(action, reward, f, done).map_err(tensor_err)?;
            let state = stack.concat();
            stack.remove(0);
            stack.push(f.clone());
            naive.extend(c.push(state, action, reward, stack.concat(), done));
        }
    }
    for (leaf, want) in naive.iter().enumerate() {
        let got = m.transition(leaf).ok_or_else(|| format!("leaf {leaf} empty"))?.transition;
        if &got != want {
            return Err(format!("leaf {leaf} differs from naive storage"));
        }
    }
    Ok(format!("{} transitions from {TOY_EPISODES} episodes identical", naive.len()))
}

pub fn replay_suite() -> Vec<CheckOutcome> {
    let s = Scope::Replay;
    vec![
        timed(s, "sum-tree invariant under mixed operations", tree_mixed_ops),
        timed(s, "stratified sampling frequencies", stratified_frequencies),
        timed(s, "n-step returns reconstruct episode returns", n_step_reconstruction),
        timed(s, "frame-ring stacks equal naive stacks", frame_ring_matches_naive),
    ]
}

fn support(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

fn projection_cases(k: usize, lo: f64, hi: f64, cases: usize, seed: u64) -> Result<(f64, f64), String> {
    let z = support(k, lo, hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err, mut mass) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let (p, g, gn, done) = random_projection_case(&mut rng, k);
        let g = g * (hi - lo) / 20.0;
        let fast = project_target(&z, &p, &[g], &[gn], &[done]);
        if fast.iter().any(|m| m.is_nan() || *m < 0.0) {
            return Err(format!("negative or non-finite mass for g={g}, gamma_n={gn}, done={done}"));
        }
        let slow = project_brute_force(&z, &p, g, gn, done);
        err = err.max(fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        mass = mass.max((fast.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((err, mass))
}

pub fn projection_suite() -> Vec<CheckOutcome> {
    let s = Scope::Projection;
    vec![
        timed(s, "brute-force oracle, 51 atoms on [-10, 10]", || {
            let (err, mass) = projection_cases(51, -10.0, 10.0, PROJECTION_CASES, 0)?;
            ensure(
                err <= PROJECTION_TOL && mass <= PROJECTION_TOL,
                format!("{PROJECTION_CASES} cases: max abs err {err:.1e}, max mass error {mass:.1e}"),
            )
        }),
        timed(s, "brute-force oracle, small supports", || {
            let mut worst = (0.0f64, 0.0f64);
            for (i, (k, lo, hi)) in [(2, -1.0, 1.0), (3, -1.0, 1.0), (7, -2.0, 5.0), (11, 0.0, 1.0)]
                .into_iter()
                .enumerate()
            {
                let (e, m) = projection_cases(k, lo, hi, 1_000, 1 + i as u64)?;
                worst = (worst.0.max(e), worst.1.max(m));
            }
            ensure(
                worst.0 <= PROJECTION_TOL && worst.1 <= PROJECTION_TOL,
                format!("4000 cases: max abs err {:.1e}, max mass error {:.1e}", worst.0, worst.1),
            )
        }),
        timed(s, "fixed cases", || {
            let z = support(51, -10.0, 10.0);
            let p: Vec<f64> = (0..51).map(|i| (i + 1) as f64 / 1326.0).collect();
            let identity = project_target(&z, &p, &[0.0], &[1.0], &[false]);
            let id_err = identity.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let mid = project_target(&[-1.0, 0.0, 1.0], &[0.0, 1.0, 0.0], &[0.5], &[0.9], &[false]);
            ensure(
                id_err <= 1e-12 && mid == [0.0, 0.5, 0.5],
                format!("identity transport err {id_err:.1e}; midpoint split {mid:?}"),
            )
        }),
    ]
}

fn env_determinism() -> CheckResult {
    let rollout = |seed: u64| -> Result<Vec<(Vec<u8>, f64, bool)>, EnvError> {
        let mut env = PelletWorld::new(seed, NOOP_MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![(env.state().latest().to_vec(), 0.0, false)];
        while !env.is_done() && out.len() < 500 {
            let o = env.step(rng.random_range(0..N_ACTIONS))?;
            out.push((env.state().latest().to_vec(), o.raw_reward, o.done));
        }
        Ok(out)
    };
    for seed in 0..5 {
        let (a, b) = (rollout(seed).map_err(tensor_err)?, rollout(seed).map_err(tensor_err)?);
        if a != b {
            return Err(format!("seed {seed}: rollouts differ"));
        }
        if a == rollout(seed + 100).map_err(tensor_err)? {
            return Err(format!("seeds {seed} and {} coincide", seed + 100));
        }
    }
    Ok("5 seeds replay bit-identically; distinct seeds differ".into())
}

fn oracle_fixtures() -> CheckResult {
    let r = evaluate_policy(
        8,
        Protocol::default(),
        ORACLE_FIXTURE_SEED,
        |env: &PelletWorld, _: &mut ChaCha8Rng| Ok::<_, EnvError>(scripted_action(env.world())),
    )
    .map_err(tensor_err)?;
    ensure(
        r.returns == ORACLE_FIXTURE_RETURNS,
        format!("returns {:?} vs fixture {:?}", r.returns, ORACLE_FIXTURE_RETURNS),
    )
}

/// Runs random-policy episodes and checks every protocol counter.
fn protocol_counters() -> CheckResult {
    let cap = 600;
    let protocol = Protocol {
        noop_max: NOOP_MAX,
        frame_cap: cap,
    };
    let (mut truncated, mut max_noops, mut clipped) = (0, 0, 0);
    for e in 0..40u64 {
        let mut env = PelletWorld::with_protocol(e, protocol);
        let mut rng = ChaCha8Rng::seed_from_u64(e);
        max_noops = max_noops.max(env.stats().noops);
        if env.stats().noops > NOOP_MAX as u64 || env.world().ticks != env.stats().noops * ACTION_REPEAT as u64 {
            return Err(format!(
                "episode {e}: {} no-ops over {} ticks",
                env.stats().noops,
                env.world().ticks
            ));
        }
        while !env.is_done() {
            let before = env.world().ticks;
            let o = env.step(rng.random_range(0..N_ACTIONS)).map_err(tensor_err)?;
            let ticks = env.world().ticks - before;
            if ticks != o.ticks as u64 || (!o.done && o.ticks != ACTION_REPEAT) || o.ticks > ACTION_REPEAT {
                return Err(format!("episode {e}: {} ticks in one step", o.ticks));
            }
            if o.reward != o.raw_reward.clamp(-1.0, 1.0) {
                return Err(format!("episode {e}: reward {} from raw {}", o.reward, o.raw_reward));
            }
            clipped += usize::from(o.reward != o.raw_reward);
            if env.world().ticks > cap {
                return Err(format!("episode {e}: {} frames past the cap {cap}", env.world().ticks));
            }
            if o.truncated {
                truncated += 1;
                if env.world().ticks != cap {
                    return Err(format!("episode {e}: truncated at {} frames", env.world().ticks));
                }
            }
        }
    }
    let d = TrainerConfig::default();
    let constants = ACTION_REPEAT == 4
        && FRAME_CAP == 108_000
        && NOOP_MAX == 30
        && d.frame_cap == FRAME_CAP
        && d.noop_max == NOOP_MAX
        && d.eval_episodes == 10
        && d.test_episodes == 200
        && d.eval_epsilon == 0.001;
    ensure(
        constants && truncated > 0 && clipped > 0,
        format!(
            "repeat {ACTION_REPEAT}, cap {FRAME_CAP} frames, no-ops <= {NOOP_MAX} (max seen {max_noops}), eval {} episodes, test {} episodes, eps {}; {truncated} capped and {clipped} clipped steps in 40 episodes",
            d.eval_episodes, d.test_episodes, d.eval_epsilon
        ),
    )
}

fn masks_from_levels() -> CheckResult {
    let mut frames = 0;
    for seed in 0..5 {
        let mut env = PelletWorld::new(seed, NOOP_MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while !env.is_done() && frames < 1_000 {
            if &ObjectMasks::from_frame(env.state().latest()) != env.masks() {
                return Err(format!("seed {seed}: recovered masks differ after {frames} frames"));
            }
            env.step(rng.random_range(0..N_ACTIONS)).map_err(tensor_err)?;
            frames += 1;
        }
    }
    Ok(format!("{frames} frames"))
}

pub fn env_suite() -> Vec<CheckOutcome> {
    let s = Scope::Env;
    vec![
        timed(s, "seeded determinism", env_determinism),
        timed(s, "scripted oracle reproduces fixture returns", oracle_fixtures),
        timed(s, "protocol counters", protocol_counters),
        timed(s, "object masks recoverable from pixels", masks_from_levels),
    ]
}

pub fn run(scope: Scope) -> Vec<CheckOutcome> {
    let start = Instant::now();
    let suites: Vec<Scope> = if scope == Scope::All {
        Scope::SUITES.to_vec()
    } else {
        vec![scope]
    };
    let mut out = Vec::new();
    for s in suites {
        out.extend(match s {
            Scope::Grad => grad_suite(),
            Scope::Replay => replay_suite(),
            Scope::Projection => projection_suite(),
            Scope::Env => env_suite(),
            Scope::All => unreachable!("expanded above"),
        });
    }
    if scope == Scope::All {
        let secs = start.elapsed().as_secs_f64();
        out.push(CheckOutcome {
            suite: Scope::All,
            name: "time budget".into(),
            passed: secs < BUDGET_SECS,
            detail: format!("{secs:.1} s of {BUDGET_SECS} s"),
            seconds: 0.0,
        });
    }
    out
}

/// Per-check table followed by per-suite totals. Returns whether every
/// check passed.
pub fn report(outcomes: &[CheckOutcome], out: &mut dyn Write) -> io::Result<bool> {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(5).max(5);
    writeln!(
        out,
        "{:<10}  {:<width$}  {:<6}  {:>8}  detail",
        "suite", "check", "result", "time"
    )?;
    for o in outcomes {
        writeln!(
            out,
            "{:<10}  {:<width$}  {:<6}  {:>7.2}s  {}",
            o.suite.to_string(),
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.seconds,
            o.detail
        )?;
    }
    writeln!(out)?;
    let mut suites: Vec<Scope> = Vec::new();
    for o in outcomes {
        if !suites.contains(&o.suite) {
            suites.push(o.suite);
        }
    }
    for s in suites {
        let of: Vec<_> = outcomes.iter().filter(|o| o.suite == s).collect();
        let passed = of.iter().filter(|o| o.passed).count();
        let secs: f64 = of.iter().map(|o| o.seconds).sum();
        writeln!(
            out,
            "{:<10}  {}  {passed}/{} checks, {secs:.2}s",
            s.to_string(),
            if passed == of.len() { "PASS" } else { "FAIL" },
            of.len()
        )?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}
