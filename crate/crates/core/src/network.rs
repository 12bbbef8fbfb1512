//! The region-sensitive Rainbow network.
//!
//! Pipeline: three valid convolutions with ReLU produce the embedding `I`
//! (64 x 7 x 7 for 84 x 84 input), which is L2-normalized along channels.
//! Two 1x1 convolutions with an ELU between them score every site (`A`, one
//! map per gaze), the scores are normalized spatially (`P`), and the
//! embedding is reweighted and summed over gazes (`F = sum_n P_n * I`).
//! Dueling value/advantage streams of two noisy linear layers each emit atom
//! logits that are combined in logit space and softmaxed per action.
//!
//! Flattening is channel-major, `F[c, h, w]` at index `(c * H + h) * W + w`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::kernels::factorized_noise;
use crate::tensor::{argmax, shape_err, Graph, NodeId, NoisyNodes, Real, Result, Tensor};

/// L2 normalization guard added under the square root.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Softmax,
    Sigmoid,
}

impl FromStr for NormMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(format!("unknown norm mode {other:?} (softmax|sigmoid)")),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
        })
    }
}

/// How the embedding reaches the policy streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionModule {
    /// Learned score maps, normalized into gazes.
    Learned,
    /// A single fixed uniform gaze (`P = 1/sites`); the ablation baseline.
    Uniform,
    /// No module: the normalized embedding feeds the streams directly.
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub n_maps: usize,
    pub norm_mode: NormMode,
    pub region: RegionModule,
    pub n_actions: usize,
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Width of the first noisy layer in each policy stream.
    pub hidden_width: usize,
    /// Width of the 1x1-conv bottleneck in the region-sensitive module.
    pub score_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_shape: [4, 84, 84],
            n_maps: 2,
            norm_mode: NormMode::Softmax,
            region: RegionModule::Learned,
            n_actions: 5,
            n_atoms: 51,
            v_min: -10.0,
            v_max: 10.0,
            hidden_width: 512,
            score_hidden: 512,
        }
    }
}

/// `(out_channels, kernel, stride)` for the three encoder convolutions.
pub const ENCODER: [(usize, usize, usize); 3] = [(32, 8, 4), (64, 4, 2), (64, 3, 1)];

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.v_min >= self.v_max {
            return Err(format!("v_min {} must be below v_max {}", self.v_min, self.v_max));
        }
        if self.n_atoms < 2 {
            return Err("n_atoms must be at least 2".into());
        }
        if self.n_maps == 0 || self.n_actions == 0 || self.hidden_width == 0 || self.score_hidden == 0 {
            return Err("n_maps, n_actions, hidden_width and score_hidden must be positive".into());
        }
        if self.region == RegionModule::Uniform && self.n_maps != 1 {
            return Err("the uniform-gaze ablation uses exactly one map".into());
        }
        self.embedding_shape().map(|_| ())
    }

    /// `(channels, height, width)` of the encoder output.
    pub fn embedding_shape(&self) -> Result<[usize; 3], String> {
        let [mut c, mut h, mut w] = self.input_shape;
        for (o, k, s) in ENCODER {
            if h < k || w < k {
                return Err(format!("input {:?} too small for the encoder", self.input_shape));
            }
            c = o;
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
        }
        Ok([c, h, w])
    }

    pub fn gaze_count(&self) -> usize {
        match self.region {
            RegionModule::Learned => self.n_maps,
            RegionModule::Uniform => 1,
            RegionModule::Off => 0,
        }
    }

    pub fn support<T: Real>(&self) -> Vec<T> {
        let step = (self.v_max - self.v_min) / (self.n_atoms - 1) as f64;
        (0..self.n_atoms).map(|i| T::lit(self.v_min + step * i as f64)).collect()
    }
}

/// Ordered named parameters. The order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Arc<Tensor<T>>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self {
            entries: entries.into_iter().map(|(n, t)| (n, Arc::new(t))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.entries[i].1.as_ref())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn shared(&self, index: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[index].1)
    }

    /// Mutable access; copies the tensor first if a graph still shares it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[index].1)
    }

    /// Name and shape of every parameter, in order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), Arc::new(t.cast()))).collect(),
        }
    }
}

const NOISY_LAYERS: [&str; 4] = ["value.fc1", "value.fc2", "advantage.fc1", "advantage.fc2"];

/// Factorized noise of one noisy layer, already passed through
/// `sign(x) sqrt(|x|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise<T> {
    pub eps_in: Vec<T>,
    pub eps_out: Vec<T>,
}

/// Whether to record gradients for parameters, the input, or neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    None,
    Params,
    Input,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamSet<T>,
    noise: Vec<LayerNoise<T>>,
}

/// Per-action return distributions and their means for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct QOutput<T> {
    pub dist: Vec<Vec<T>>,
    pub q: Vec<T>,
    pub support: Vec<T>,
}

impl<T: Real> QOutput<T> {
    /// Greedy action; ties resolve to the lowest index.
    pub fn greedy(&self) -> usize {
        argmax(&self.q)
    }
}

/// Normalized gazes `P` for one state, `n_maps x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeMapSet<T> {
    pub values: Tensor<T>,
    pub mode: NormMode,
}

/// Nodes recorded by [`Network::build`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub embedding: NodeId,
    pub scores: Option<NodeId>,
    pub gaze: Option<NodeId>,
    pub aggregate: NodeId,
    pub log_probs: NodeId,
}

/// Everything a forward pass produced. The graph is kept for backward.
pub struct Forward<T> {
    pub graph: Graph<T>,
    pub input: NodeId,
    /// Parameter leaves, aligned with the network's `ParamSet` order.
    pub params: Vec<NodeId>,
    pub embedding: NodeId,
    pub scores: Option<NodeId>,
    pub gaze: Option<NodeId>,
    pub aggregate: NodeId,
    pub log_probs: NodeId,
    pub batch: usize,
    support: Vec<T>,
    actions: usize,
    atoms: usize,
}

impl<T: Real> Forward<T> {
    /// Probabilities `(B, A, K)`.
    pub fn probs(&self) -> Vec<T> {
        self.graph.value(self.log_probs).data().iter().map(|l| l.exp()).collect()
    }

    pub fn q_output(&self, sample: usize) -> QOutput<T> {
        let lp = self.graph.value(self.log_probs).data();
        let row = &lp[sample * self.actions * self.atoms..(sample + 1) * self.actions * self.atoms];
        let dist: Vec<Vec<T>> = row.chunks(self.atoms).map(|r| r.iter().map(|l| l.exp()).collect()).collect();
        let q = dist
            .iter()
            .map(|d| d.iter().zip(&self.support).map(|(&p, &z)| p * z).sum())
            .collect();
        QOutput {
            dist,
            q,
            support: self.support.clone(),
        }
    }

    /// Greedy action for every sample in the batch.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.batch).map(|b| self.q_output(b).greedy()).collect()
    }

    pub fn gaze_maps(&self, sample: usize, mode: NormMode) -> Option<GazeMapSet<T>> {
        self.gaze.map(|id| GazeMapSet {
            values: sample_of(self.graph.value(id), sample, self.batch),
            mode,
        })
    }

    pub fn score_maps(&self, sample: usize) -> Option<Tensor<T>> {
        self.scores.map(|id| sample_of(self.graph.value(id), sample, self.batch))
    }
}

fn sample_of<T: Real>(t: &Tensor<T>, sample: usize, batch: usize) -> Tensor<T> {
    let per = t.len() / batch;
    let shape = if t.rank() == 4 {
        t.shape()[1..].to_vec()
    } else {
        t.shape().to_vec()
    };
    Tensor::new(shape, t.data()[sample * per..(sample + 1) * per].to_vec()).expect("per-sample slice")
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    entries: Vec<(String, Tensor<f64>)>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.entries.push((name, t));
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        let bound = 1.0 / ((inp * k * k) as f64).sqrt();
        self.uniform(format!("{name}.weight"), &[out, inp, k, k], bound);
        self.uniform(format!("{name}.bias"), &[out], bound);
    }

    fn noisy(&mut self, name: &str, out: usize, inp: usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        self.uniform(format!("{name}.mu_w"), &[out, inp], bound);
        self.entries
            .push((format!("{name}.sigma_w"), Tensor::full(&[out, inp], 0.5 * bound)));
        self.uniform(format!("{name}.mu_b"), &[out], bound);
        self.entries
            .push((format!("{name}.sigma_b"), Tensor::full(&[out], 0.5 * bound)));
    }
}

impl<T: Real> Network<T> {
    /// Fresh parameters: mu terms and conv kernels uniform in
    /// `+-1/sqrt(fan_in)`, sigma terms `0.5/sqrt(fan_in)`, zero noise.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, String> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            entries: Vec::new(),
        };
        let mut c = config.input_shape[0];
        for (i, (o, k, _)) in ENCODER.iter().enumerate() {
            init.conv(&format!("encoder.conv{}", i + 1), *o, c, *k);
            c = *o;
        }
        if config.region == RegionModule::Learned {
            init.conv("region.conv1", config.score_hidden, c, 1);
            init.conv("region.conv2", config.n_maps, config.score_hidden, 1);
        }
        let [ec, eh, ew] = config.embedding_shape()?;
        let flat = ec * eh * ew;
        let (k, a, h) = (config.n_atoms, config.n_actions, config.hidden_width);
        init.noisy("value.fc1", h, flat);
        init.noisy("value.fc2", k, h);
        init.noisy("advantage.fc1", h, flat);
        init.noisy("advantage.fc2", a * k, h);
        let params = ParamSet::new(init.entries.into_iter().map(|(n, t)| (n, t.cast())).collect());
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking it against the manifest
    /// this configuration expects.
    pub fn from_params(config: NetworkConfig, params: ParamSet<T>) -> Result<Self, String> {
        config.validate()?;
        let expected = Self::expected_manifest(&config)?;
        let report = manifest_diff(&expected, &params.manifest());
        if !report.is_empty() {
            return Err(format!("parameter manifest mismatch:\n  {}", report.join("\n  ")));
        }
        let noise = NOISY_LAYERS
            .iter()
            .map(|layer| {
                let w = params.get(&format!("{layer}.mu_w")).expect("validated");
                LayerNoise {
                    eps_in: vec![T::zero(); w.shape()[1]],
                    eps_out: vec![T::zero(); w.shape()[0]],
                }
            })
            .collect();
        Ok(Self { config, params, noise })
    }

    /// Names and shapes the given configuration requires.
    pub fn expected_manifest(config: &NetworkConfig) -> Result<Vec<(String, Vec<usize>)>, String> {
        let mut m = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            m.push((format!("{name}.weight"), vec![o, i, k, k]));
            m.push((format!("{name}.bias"), vec![o]));
        };
        let mut c = config.input_shape[0];
        for (i, (o, k, _)) in ENCODER.iter().enumerate() {
            conv(&format!("encoder.conv{}", i + 1), *o, c, *k);
            c = *o;
        }
        if config.region == RegionModule::Learned {
            conv("region.conv1", config.score_hidden, c, 1);
            conv("region.conv2", config.n_maps, config.score_hidden, 1);
        }
        let [ec, eh, ew] = config.embedding_shape()?;
        let flat = ec * eh * ew;
        let (k, a, h) = (config.n_atoms, config.n_actions, config.hidden_width);
        for (name, out, inp) in [
            ("value.fc1", h, flat),
            ("value.fc2", k, h),
            ("advantage.fc1", h, flat),
            ("advantage.fc2", a * k, h),
        ] {
            m.push((format!("{name}.mu_w"), vec![out, inp]));
            m.push((format!("{name}.sigma_w"), vec![out, inp]));
            m.push((format!("{name}.mu_b"), vec![out]));
            m.push((format!("{name}.sigma_b"), vec![out]));
        }
        Ok(m)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) {
        assert_eq!(params.manifest(), self.params.manifest(), "parameter layout changed");
        self.params = params;
    }

    pub fn noise(&self) -> &[LayerNoise<T>] {
        &self.noise
    }

    pub fn set_noise(&mut self, noise: Vec<LayerNoise<T>>) {
        assert_eq!(noise.len(), self.noise.len());
        self.noise = noise;
    }

    /// Draws fresh factorized noise for every noisy layer.
    pub fn resample_noise(&mut self, rng: &mut impl Rng) {
        for n in &mut self.noise {
            for e in n.eps_in.iter_mut().chain(n.eps_out.iter_mut()) {
                let z: f64 = rng.sample(StandardNormal);
                *e = factorized_noise(T::lit(z));
            }
        }
    }

    fn param_node(&self, ids: &[NodeId], name: &str) -> NodeId {
        ids[self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn noisy_nodes(&self, ids: &[NodeId], layer: &str) -> NoisyNodes {
        NoisyNodes {
            mu_w: self.param_node(ids, &format!("{layer}.mu_w")),
            sigma_w: self.param_node(ids, &format!("{layer}.sigma_w")),
            mu_b: self.param_node(ids, &format!("{layer}.mu_b")),
            sigma_b: self.param_node(ids, &format!("{layer}.sigma_b")),
        }
    }

    /// Encoder followed by channel-wise L2 normalization.
    pub fn encode(&self, g: &mut Graph<T>, ids: &[NodeId], s: NodeId) -> Result<NodeId> {
        let mut x = s;
        for (i, (_, _, stride)) in ENCODER.iter().enumerate() {
            let name = format!("encoder.conv{}", i + 1);
            let (w, b) = (
                self.param_node(ids, &format!("{name}.weight")),
                self.param_node(ids, &format!("{name}.bias")),
            );
            x = g.conv2d(x, w, b, *stride)?;
            x = g.relu(x)?;
        }
        g.l2_normalize_channels(x, T::lit(L2_EPS))
    }

    /// Raw score maps `A`: 1x1 conv, ELU, 1x1 conv.
    pub fn region_scores(&self, g: &mut Graph<T>, ids: &[NodeId], embedding: NodeId) -> Result<NodeId> {
        let h = g.conv2d(
            embedding,
            self.param_node(ids, "region.conv1.weight"),
            self.param_node(ids, "region.conv1.bias"),
            1,
        )?;
        let h = g.elu(h)?;
        g.conv2d(
            h,
            self.param_node(ids, "region.conv2.weight"),
            self.param_node(ids, "region.conv2.bias"),
            1,
        )
    }

    pub fn normalize_scores(&self, g: &mut Graph<T>, scores: NodeId) -> Result<NodeId> {
        match self.config.norm_mode {
            NormMode::Softmax => g.spatial_softmax(scores),
            NormMode::Sigmoid => g.sigmoid(scores),
        }
    }

    /// Dueling noisy distributional heads over the flattened aggregate;
    /// returns per-action atom log-probabilities `(B, A, K)`.
    pub fn heads(&self, g: &mut Graph<T>, ids: &[NodeId], aggregate: NodeId, noise_on: bool) -> Result<NodeId> {
        let shape = g.value(aggregate).shape().to_vec();
        let batch = if shape.len() == 4 { shape[0] } else { 1 };
        let flat = g.value(aggregate).len() / batch;
        let f = g.reshape(aggregate, &[batch, flat])?;
        let stream = |g: &mut Graph<T>, prefix: &str, first: usize| -> Result<NodeId> {
            let n1 = &self.noise[first];
            let n2 = &self.noise[first + 1];
            let noise1 = noise_on.then_some((n1.eps_in.as_slice(), n1.eps_out.as_slice()));
            let noise2 = noise_on.then_some((n2.eps_in.as_slice(), n2.eps_out.as_slice()));
            let h = g.noisy_linear(f, self.noisy_nodes(ids, &format!("{prefix}.fc1")), noise1)?;
            let h = g.relu(h)?;
            g.noisy_linear(h, self.noisy_nodes(ids, &format!("{prefix}.fc2")), noise2)
        };
        let v = stream(g, "value", 0)?;
        let adv = stream(g, "advantage", 2)?;
        let logits = g.dueling(v, adv, self.config.n_actions)?;
        g.log_softmax(logits)
    }

    /// Records the whole pipeline on `g` for a `(B, 4, H, W)` input node,
    /// with `params` aligned to this network's `ParamSet`.
    pub fn build(&self, g: &mut Graph<T>, params: &[NodeId], input: NodeId, noise_on: bool) -> Result<ForwardNodes> {
        let shape = g.value(input).shape().to_vec();
        let embedding = self.encode(g, params, input)?;
        let [_, h, w] = self.config.embedding_shape().map_err(|e| crate::tensor::TensorError::Shape {
            op: "forward",
            expected: e,
            got: shape.clone(),
        })?;
        let (scores, gaze, aggregate) = match self.config.region {
            RegionModule::Learned => {
                let a = self.region_scores(g, params, embedding)?;
                let p = self.normalize_scores(g, a)?;
                let f = g.weight_aggregate(p, embedding)?;
                (Some(a), Some(p), f)
            }
            RegionModule::Uniform => {
                let sites = h * w;
                let p = g.leaf(Tensor::full(&[shape[0], 1, h, w], T::one() / T::lit(sites as f64)), false);
                let f = g.weight_aggregate(p, embedding)?;
                (None, Some(p), f)
            }
            RegionModule::Off => (None, None, embedding),
        };
        let log_probs = self.heads(g, params, aggregate, noise_on)?;
        Ok(ForwardNodes {
            embedding,
            scores,
            gaze,
            aggregate,
            log_probs,
        })
    }

    /// Full forward pass over a `(4, H, W)` state or a `(B, 4, H, W)` batch.
    pub fn forward(&self, states: Arc<Tensor<T>>, noise_on: bool, grad: GradTarget) -> Result<Forward<T>> {
        let shape = states.shape().to_vec();
        let (batch, stack) = match shape.len() {
            3 => (1, &shape[..]),
            4 => (shape[0], &shape[1..]),
            _ => return shape_err("forward", "state stack 4 x H x W or batch B x 4 x H x W", &shape),
        };
        if stack != self.config.input_shape {
            return shape_err("forward", format!("state stack {:?}", self.config.input_shape), &shape);
        }
        let states = if shape.len() == 3 {
            let mut batched = vec![1];
            batched.extend_from_slice(&shape);
            Arc::new((*states).clone().reshape(&batched)?)
        } else {
            states
        };
        let mut g = Graph::new();
        let input = g.leaf(states, grad == GradTarget::Input);
        let params: Vec<NodeId> = (0..self.params.len())
            .map(|i| g.leaf(self.params.shared(i), grad == GradTarget::Params))
            .collect();
        let ForwardNodes {
            embedding,
            scores,
            gaze,
            aggregate,
            log_probs,
        } = self.build(&mut g, &params, input, noise_on)?;
        Ok(Forward {
            graph: g,
            input,
            params,
            embedding,
            scores,
            gaze,
            aggregate,
            log_probs,
            batch,
            support: self.config.support(),
            actions: self.config.n_actions,
            atoms: self.config.n_atoms,
        })
    }
}

/// Itemized differences between an expected and an actual manifest.
pub fn manifest_diff(expected: &[(String, Vec<usize>)], actual: &[(String, Vec<usize>)]) -> Vec<String> {
    let mut report = Vec::new();
    for (name, shape) in expected {
        match actual.iter().find(|(n, _)| n == name) {
            None => report.push(format!("missing {name} {shape:?}")),
            Some((_, s)) if s != shape => report.push(format!("shape of {name}: expected {shape:?}, found {s:?}")),
            Some(_) => {}
        }
    }
    for (name, shape) in actual {
        if !expected.iter().any(|(n, _)| n == name) {
            report.push(format!("unexpected {name} {shape:?}"));
        }
    }
    if report.is_empty() && expected.iter().map(|e| &e.0).ne(actual.iter().map(|a| &a.0)) {
        report.push("parameter order differs".into());
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::selftest::micro_config;

    fn states<T: Real>(cfg: &NetworkConfig, batch: usize, seed: u64) -> Arc<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = cfg.input_shape;
        Arc::new(Tensor::from_fn(&[batch, c, h, w], |_| T::lit(rng.random::<f64>())))
    }

    fn run<T: Real>(net: &Network<T>, s: &Arc<Tensor<T>>, noise_on: bool) -> Forward<T> {
        net.forward(s.clone(), noise_on, GradTarget::None).unwrap()
    }

    #[test]
    fn shape_chain() {
        let cfg = NetworkConfig {
            n_maps: 3,
            hidden_width: 16,
            score_hidden: 8,
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.embedding_shape().unwrap(), [64, 7, 7]);
        let net = Network::<f32>::new(cfg.clone(), 0).unwrap();
        let f = run(&net, &states(&cfg, 2, 1), false);
        let shape = |id: NodeId| f.graph.value(id).shape().to_vec();
        assert_eq!(shape(f.embedding), [2, 64, 7, 7]);
        assert_eq!(shape(f.scores.unwrap()), [2, 3, 7, 7]);
        assert_eq!(shape(f.gaze.unwrap()), [2, 3, 7, 7]);
        assert_eq!(shape(f.aggregate), [2, 64, 7, 7]);
        assert_eq!(shape(f.log_probs), [2, 5, 51]);
        assert_eq!(f.gaze_maps(1, NormMode::Softmax).unwrap().values.shape(), [3, 7, 7]);

        // a single unbatched state goes through too
        let one = Arc::new(Tensor::from_fn(&[4, 84, 84], |i| (i % 7) as f32 / 7.0));
        assert_eq!(run(&net, &one, true).q_output(0).q.len(), 5);
        let bad = Arc::new(Tensor::<f32>::zeros(&[4, 80, 84]));
        assert!(net.forward(bad, false, GradTarget::None).is_err());
    }

    #[test]
    fn embedding_has_unit_channel_norm() {
        let cfg = micro_config();
        let net = Network::<f64>::new(cfg.clone(), 2).unwrap();
        let f = run(&net, &states(&cfg, 2, 3), false);
        let e = f.graph.value(f.embedding);
        let [b, c, h, w] = *e.shape() else { panic!() };
        for bi in 0..b {
            for s in 0..h * w {
                let n: f64 = (0..c).map(|ci| e.data()[(bi * c + ci) * h * w + s].powi(2)).sum();
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-9, "site {s}: {n}");
            }
        }
    }

    #[test]
    fn softmax_gazes_sum_to_one_and_sigmoid_stays_open() {
        for mode in [NormMode::Softmax, NormMode::Sigmoid] {
            let cfg = NetworkConfig {
                norm_mode: mode,
                n_maps: 4,
                hidden_width: 8,
                score_hidden: 8,
                ..NetworkConfig::default()
            };
            let net = Network::<f32>::new(cfg.clone(), 5).unwrap();
            let f = run(&net, &states(&cfg, 3, 6), false);
            let p = f.graph.value(f.gaze.unwrap());
            for map in p.data().chunks(49) {
                assert!(map.iter().all(|&v| v > 0.0 && v < 1.0));
                if mode == NormMode::Softmax {
                    let s: f32 = map.iter().sum();
                    assert!((s - 1.0).abs() <= 1e-6, "{s}");
                }
            }
        }
    }

    #[test]
    fn distributions_sum_to_one_under_noise() {
        let cfg = micro_config();
        let mut net = Network::<f32>::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = states(&cfg, 1, 9);
        let mut worst = 0.0f32;
        for _ in 0..1000 {
            net.resample_noise(&mut rng);
            for d in run(&net, &s, true).q_output(0).dist {
                assert!(d.iter().all(|&p| p >= 0.0));
                worst = worst.max((d.iter().sum::<f32>() - 1.0).abs());
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn zero_sigma_equals_noise_off_bitwise() {
        let cfg = micro_config();
        let mut net = Network::<f32>::new(cfg.clone(), 10).unwrap();
        for i in 0..net.params().len() {
            let name = net.params().names().nth(i).unwrap().to_string();
            if name.contains("sigma") {
                net.params_mut().tensor_mut(i).data_mut().fill(0.0);
            }
        }
        net.resample_noise(&mut ChaCha8Rng::seed_from_u64(11));
        for batch in [1, 4] {
            let s = states(&cfg, batch, 12);
            let on = run(&net, &s, true);
            let off = run(&net, &s, false);
            let (a, b) = (on.graph.value(on.log_probs).data(), off.graph.value(off.log_probs).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "batch {batch}");
        }
    }

    #[test]
    fn noise_changes_the_output() {
        let cfg = micro_config();
        let mut net = Network::<f64>::new(cfg.clone(), 13).unwrap();
        net.resample_noise(&mut ChaCha8Rng::seed_from_u64(14));
        let s = states(&cfg, 1, 15);
        assert_ne!(run(&net, &s, true).q_output(0).q, run(&net, &s, false).q_output(0).q);
    }

    /// A uniform gaze only rescales the embedding by `1/sites`, so it equals
    /// no module once the first layer absorbs that factor.
    #[test]
    fn uniform_gaze_matches_no_module_with_rescaled_weights() {
        let base = NetworkConfig {
            n_maps: 1,
            ..micro_config()
        };
        let uniform_cfg = NetworkConfig {
            region: RegionModule::Uniform,
            ..base.clone()
        };
        let off_cfg = NetworkConfig {
            region: RegionModule::Off,
            ..base.clone()
        };
        let [_, h, w] = base.embedding_shape().unwrap();
        let sites = (h * w) as f64;
        let uniform = Network::<f64>::new(uniform_cfg, 16).unwrap();
        let mut params = uniform.params().clone();
        for stream in ["value", "advantage"] {
            for part in ["mu_w", "sigma_w"] {
                let i = params.index_of(&format!("{stream}.fc1.{part}")).unwrap();
                params.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v /= sites);
            }
        }
        let mut off = Network::from_params(off_cfg, params).unwrap();
        off.set_noise(uniform.noise().to_vec());
        let s = states(&base, 6, 17);
        let (a, b) = (run(&uniform, &s, false), run(&off, &s, false));
        let (la, lb) = (a.graph.value(a.log_probs).data(), b.graph.value(b.log_probs).data());
        assert!(la.iter().zip(lb).all(|(x, y)| (x - y).abs() < 1e-9));
        assert_eq!(a.greedy_actions(), b.greedy_actions());
        assert!(b.gaze.is_none() && b.scores.is_none());
        assert!(a.scores.is_none());
    }

    /// The channel norm cancels any positive rescaling of the last encoder
    /// layer, since ReLU commutes with it.
    #[test]
    fn l2_norm_cancels_last_layer_scale() {
        let cfg = micro_config();
        let net = Network::<f64>::new(cfg.clone(), 18).unwrap();
        let mut scaled = net.clone();
        for name in ["encoder.conv3.weight", "encoder.conv3.bias"] {
            let i = scaled.params().index_of(name).unwrap();
            scaled
                .params_mut()
                .tensor_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 37.5);
        }
        let s = states(&cfg, 2, 19);
        let (a, b) = (run(&net, &s, false), run(&scaled, &s, false));
        let (la, lb) = (a.graph.value(a.log_probs).data(), b.graph.value(b.log_probs).data());
        assert!(la.iter().zip(lb).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn manifests() {
        let cfg = micro_config();
        let net = Network::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(net.params().manifest(), Network::<f32>::expected_manifest(&cfg).unwrap());
        assert!(net.params().get("region.conv2.weight").is_some());
        let off = NetworkConfig {
            region: RegionModule::Off,
            ..cfg.clone()
        };
        let off_manifest = Network::<f32>::expected_manifest(&off).unwrap();
        assert!(off_manifest.iter().all(|(n, _)| !n.starts_with("region")));
        let diff = manifest_diff(&off_manifest, &net.params().manifest());
        assert_eq!(diff.iter().filter(|d| d.starts_with("unexpected")).count(), 4);
        assert!(Network::<f32>::from_params(off, net.params().clone()).is_err());
        assert_eq!(cfg.gaze_count(), 2);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            NetworkConfig {
                v_min: 1.0,
                v_max: 1.0,
                ..micro_config()
            },
            NetworkConfig {
                n_maps: 0,
                ..micro_config()
            },
            NetworkConfig {
                region: RegionModule::Uniform,
                ..micro_config()
            },
            NetworkConfig {
                input_shape: [4, 20, 20],
                ..micro_config()
            },
        ];
        for cfg in bad {
            assert!(Network::<f32>::new(cfg, 0).is_err());
        }
    }
}
