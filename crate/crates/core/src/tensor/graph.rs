use std::cell::Cell;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{shape_err, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation record, including whatever the backward rule needs beyond the
/// input and output values.
#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    Conv2d {
        geom: ConvGeom,
    },
    Linear,
    /// `weight` caches the effective noisy weight when it was materialized.
    NoisyLinear {
        noise: Option<(Vec<T>, Vec<T>)>,
        weight: Option<Vec<T>>,
    },
    Relu,
    Elu,
    Sigmoid,
    L2NormChannels {
        channels: usize,
        sites: usize,
        norms: Vec<T>,
    },
    SpatialSoftmax {
        sites: usize,
    },
    WeightAggregate {
        maps: usize,
        channels: usize,
        sites: usize,
    },
    Reshape,
    Dueling {
        actions: usize,
        atoms: usize,
    },
    LogSoftmax {
        width: usize,
    },
    CrossEntropy {
        actions: Vec<usize>,
        targets: Vec<T>,
        weights: Vec<T>,
        per_sample: Vec<T>,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear => "linear",
            Op::NoisyLinear { .. } => "noisy_linear",
            Op::Relu => "relu",
            Op::Elu => "elu",
            Op::Sigmoid => "sigmoid",
            Op::L2NormChannels { .. } => "l2_normalize_channels",
            Op::SpatialSoftmax { .. } => "spatial_softmax",
            Op::WeightAggregate { .. } => "weight_aggregate",
            Op::Reshape => "reshape",
            Op::Dueling { .. } => "dueling",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

/// Parameter nodes of one noisy linear layer.
#[derive(Clone, Copy, Debug)]
pub struct NoisyNodes {
    pub mu_w: NodeId,
    pub sigma_w: NodeId,
    pub mu_b: NodeId,
    pub sigma_b: NodeId,
}

/// Forward trace in topological order. Every op appends one node whose
/// inputs already exist, so reverse index order is a valid backward order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_passes: Cell<usize>,
    last_visits: Cell<usize>,
}

/// Gradients of the leaves reached by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.leaves.get_mut(id.0).and_then(Option::take)
    }

    /// Nodes processed by the pass that produced these gradients.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_passes: Cell::new(0),
            last_visits: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every node in creation order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.len()).map(NodeId)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes.get()
    }

    pub fn last_visits(&self) -> usize {
        self.last_visits.get()
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> NodeId {
        let value = value.into();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        for id in [x, kernel, bias] {
            self.check(id)?;
        }
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let geom = ConvGeom::new(xv.shape(), kv.shape(), stride)?;
        if bv.shape() != [geom.out_ch] {
            return shape_err("conv2d", format!("bias of length {}", geom.out_ch), bv.shape());
        }
        let y = kernels::conv2d_forward(xv.data(), kv.data(), bv.data(), &geom);
        let shape = if xv.rank() == 3 {
            vec![geom.out_ch, geom.out_h, geom.out_w]
        } else {
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w]
        };
        self.push(Op::Conv2d { geom }, vec![x, kernel, bias], Tensor::new(shape, y)?)
    }

    fn linear_dims(&self, op: &'static str, x: NodeId, w: NodeId, b: NodeId) -> Result<(usize, usize, usize)> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let [out, inp] = *ws else {
            return shape_err(op, "weight out x in", ws);
        };
        let batch = match *xs {
            [n] if n == inp => 1,
            [bt, n] if n == inp => bt,
            _ => return shape_err(op, format!("input with trailing extent {inp}"), xs),
        };
        if bs != [out] {
            return shape_err(op, format!("bias of length {out}"), bs);
        }
        Ok((batch, inp, out))
    }

    fn linear_shape(&self, x: NodeId, out: usize) -> Vec<usize> {
        match self.value(x).shape() {
            [_] => vec![out],
            [b, _] => vec![*b, out],
            _ => unreachable!("validated by linear_dims"),
        }
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let (batch, inp, out) = self.linear_dims("linear", x, w, b)?;
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            inp,
            out,
        );
        let shape = self.linear_shape(x, out);
        self.push(Op::Linear, vec![x, w, b], Tensor::new(shape, y)?)
    }

    /// Noisy linear layer. `noise` is `(eps_in, eps_out)` after the
    /// factorization transform; `None` evaluates the mean weights only.
    pub fn noisy_linear(&mut self, x: NodeId, p: NoisyNodes, noise: Option<(&[T], &[T])>) -> Result<NodeId> {
        for id in [x, p.mu_w, p.sigma_w, p.mu_b, p.sigma_b] {
            self.check(id)?;
        }
        let (batch, inp, out) = self.linear_dims("noisy_linear", x, p.mu_w, p.mu_b)?;
        if self.value(p.sigma_w).shape() != [out, inp] || self.value(p.sigma_b).shape() != [out] {
            return shape_err(
                "noisy_linear",
                format!("sigma shapes [{out}, {inp}] and [{out}]"),
                self.value(p.sigma_w).shape(),
            );
        }
        let noise = match noise {
            Some((ei, eo)) => {
                if ei.len() != inp || eo.len() != out {
                    return shape_err(
                        "noisy_linear",
                        format!("noise vectors of length {inp} and {out}"),
                        &[ei.len(), eo.len()],
                    );
                }
                Some((ei.to_vec(), eo.to_vec()))
            }
            None => None,
        };
        let (x_data, mu_w, sigma_w) = (self.value(x).data(), self.value(p.mu_w).data(), self.value(p.sigma_w).data());
        let (mu_b, sigma_b) = (self.value(p.mu_b).data(), self.value(p.sigma_b).data());
        let (y, weight) = match &noise {
            None => (kernels::linear_forward(x_data, mu_w, mu_b, batch, inp, out), None),
            Some((ei, eo)) if batch <= kernels::SMALL_BATCH => (
                kernels::noisy_forward_factored(x_data, mu_w, sigma_w, mu_b, sigma_b, ei, eo, inp),
                None,
            ),
            Some((ei, eo)) => {
                let w = kernels::noisy_weight(mu_w, sigma_w, ei, eo);
                let b = kernels::noisy_bias(mu_b, sigma_b, eo);
                (kernels::linear_forward(x_data, &w, &b, batch, inp, out), Some(w))
            }
        };
        let shape = self.linear_shape(x, out);
        self.push(
            Op::NoisyLinear { noise, weight },
            vec![x, p.mu_w, p.sigma_w, p.mu_b, p.sigma_b],
            Tensor::new(shape, y)?,
        )
    }

    fn unary(&mut self, op: Op<T>, x: NodeId, f: impl Fn(T) -> T) -> Result<NodeId> {
        self.check(x)?;
        let y = self.value(x).map(f);
        self.push(op, vec![x], y)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x, kernels::relu)
    }

    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Elu, x, kernels::elu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, x, kernels::sigmoid)
    }

    /// Splits a `C x H x W` or `B x C x H x W` shape into `(channels, sites)`.
    fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [c, h, w] | [_, c, h, w] => Ok((c, h * w)),
            _ => shape_err(op, "C x H x W or B x C x H x W", shape),
        }
    }

    pub fn l2_normalize_channels(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (channels, sites) = Self::spatial("l2_normalize_channels", xv.shape())?;
        let (y, norms) = kernels::l2_normalize_channels(xv.data(), channels, sites, eps);
        let y = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(Op::L2NormChannels { channels, sites, norms }, vec![x], y)
    }

    /// Softmax over the spatial sites of every map independently.
    pub fn spatial_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (_, sites) = Self::spatial("spatial_softmax", xv.shape())?;
        let y = Tensor::new(xv.shape().to_vec(), kernels::softmax_rows(xv.data(), sites))?;
        self.push(Op::SpatialSoftmax { sites }, vec![x], y)
    }

    /// `F = sum_n P_n * I` with each `P_n` broadcast across channels.
    pub fn weight_aggregate(&mut self, p: NodeId, i: NodeId) -> Result<NodeId> {
        self.check(p)?;
        self.check(i)?;
        let (pv, iv) = (self.value(p), self.value(i));
        let (maps, p_sites) = Self::spatial("weight_aggregate", pv.shape())?;
        let (channels, sites) = Self::spatial("weight_aggregate", iv.shape())?;
        let same_batch = pv.rank() == iv.rank() && (pv.rank() == 3 || pv.shape()[0] == iv.shape()[0]);
        let (ps, is) = (pv.shape(), iv.shape());
        if p_sites != sites || !same_batch || ps[ps.len() - 2..] != is[is.len() - 2..] {
            return shape_err("weight_aggregate", format!("maps over the embedding grid {is:?}"), ps);
        }
        let f = kernels::weight_aggregate(pv.data(), iv.data(), maps, channels, sites);
        let f = Tensor::new(iv.shape().to_vec(), f)?;
        self.push(Op::WeightAggregate { maps, channels, sites }, vec![p, i], f)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let y = (*self.value(x)).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![x], y)
    }

    /// Combines value logits `(B, K)` and advantage logits `(B, A*K)` into
    /// per-action logits `(B, A, K)`.
    pub fn dueling(&mut self, value: NodeId, advantage: NodeId, actions: usize) -> Result<NodeId> {
        self.check(value)?;
        self.check(advantage)?;
        let (vv, av) = (self.value(value), self.value(advantage));
        let [batch, atoms] = *vv.shape() else {
            return shape_err("dueling", "value logits B x K", vv.shape());
        };
        if av.shape() != [batch, actions * atoms] {
            return shape_err(
                "dueling",
                format!("advantage logits [{batch}, {}]", actions * atoms),
                av.shape(),
            );
        }
        let y = kernels::dueling(vv.data(), av.data(), actions, atoms);
        let y = Tensor::new(vec![batch, actions, atoms], y)?;
        self.push(Op::Dueling { actions, atoms }, vec![value, advantage], y)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let width = *xv.shape().last().expect("tensors have rank >= 1");
        let y = Tensor::new(xv.shape().to_vec(), kernels::log_softmax_rows(xv.data(), width))?;
        self.push(Op::LogSoftmax { width }, vec![x], y)
    }

    /// Importance-weighted cross-entropy between target distributions and
    /// the log-probabilities of the taken actions:
    /// `(1/B) sum_b w_b * -sum_k m_bk log p(s_b, a_b)_k`.
    pub fn cross_entropy(&mut self, log_probs: NodeId, actions: &[usize], targets: &[T], weights: &[T]) -> Result<NodeId> {
        self.check(log_probs)?;
        let lp = self.value(log_probs);
        let [batch, n_actions, atoms] = *lp.shape() else {
            return shape_err("cross_entropy", "log-probabilities B x A x K", lp.shape());
        };
        if actions.len() != batch || weights.len() != batch || targets.len() != batch * atoms {
            return shape_err(
                "cross_entropy",
                format!("{batch} actions/weights and {batch}x{atoms} targets"),
                &[actions.len(), weights.len(), targets.len()],
            );
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
            return shape_err("cross_entropy", format!("actions below {n_actions}"), &[a]);
        }
        let per_sample: Vec<T> = (0..batch)
            .map(|b| {
                let row = &lp.data()[(b * n_actions + actions[b]) * atoms..][..atoms];
                -row.iter()
                    .zip(&targets[b * atoms..(b + 1) * atoms])
                    .map(|(&l, &m)| m * l)
                    .sum::<T>()
            })
            .collect();
        let total = per_sample.iter().zip(weights).map(|(&l, &w)| l * w).sum::<T>() / T::lit(batch as f64);
        self.push(
            Op::CrossEntropy {
                actions: actions.to_vec(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                per_sample,
            },
            vec![log_probs],
            Tensor::scalar(total),
        )
    }

    /// Unweighted per-sample losses recorded by a cross-entropy node.
    pub fn per_sample_losses(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes.get(id.0)?.op {
            Op::CrossEntropy { per_sample, .. } => Some(per_sample),
            _ => None,
        }
    }

    /// Reverse-mode pass from `seed` with upstream gradient `seed_grad`.
    ///
    /// Nodes are visited once each in reverse topological order; gradients
    /// accumulate at fan-out points. Only leaves keep their gradient.
    pub fn backward(&self, seed: NodeId, seed_grad: Tensor<T>) -> Result<Gradients<T>> {
        self.check(seed)?;
        if seed_grad.shape() != self.value(seed).shape() {
            return shape_err(
                "backward",
                format!("seed gradient shaped {:?}", self.value(seed).shape()),
                seed_grad.shape(),
            );
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=seed.0).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[seed.0] = Some(seed_grad.into_data());
        let mut visited = 0;
        for id in (0..=seed.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            visited += 1;
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), grad)?);
                continue;
            }
            let input_grads = self.node_backward(NodeId(id), &grad)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        self.backward_passes.set(self.backward_passes.get() + 1);
        self.last_visits.set(visited);
        Ok(Gradients { leaves, visited })
    }

    fn node_backward(&self, id: NodeId, dy: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let node = &self.nodes[id.0];
        let need = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let val = |k: usize| self.value(node.inputs[k]);
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { geom } => {
                let g = kernels::conv2d_backward(val(0).data(), val(1).data(), dy, geom, need(0), need(1) || need(2));
                vec![g.input, Some(g.kernel), Some(g.bias)]
            }
            Op::Linear => {
                let (batch, inp, out) = self.linear_dims("linear", node.inputs[0], node.inputs[1], node.inputs[2])?;
                let g = kernels::linear_backward(val(0).data(), val(1).data(), dy, batch, inp, out, need(0), need(1) || need(2));
                vec![g.input, Some(g.weight), Some(g.bias)]
            }
            Op::NoisyLinear { noise, weight } => {
                let (batch, inp, out) = self.linear_dims("noisy_linear", node.inputs[0], node.inputs[1], node.inputs[3])?;
                let (mu_w, sigma_w) = (val(1).data(), val(2).data());
                let dense = match (noise, weight) {
                    (None, _) => Some(mu_w),
                    (Some(_), Some(w)) => Some(w.as_slice()),
                    (Some(_), None) => None,
                };
                let need_params = (1..5).any(need);
                let g = kernels::linear_backward(
                    val(0).data(),
                    dense.unwrap_or(&[]),
                    dy,
                    batch,
                    inp,
                    out,
                    need(0) && dense.is_some(),
                    need_params,
                );
                let input = match dense {
                    Some(_) => g.input,
                    None if need(0) => {
                        let n = noise.as_ref().map(|(ei, eo)| (ei.as_slice(), eo.as_slice()));
                        Some(kernels::noisy_input_grad_factored(dy, mu_w, sigma_w, n, inp, out))
                    }
                    None => None,
                };
                let (sigma_w, sigma_b) = match noise {
                    Some((ei, eo)) if need_params => {
                        let mut dsw = g.weight.clone();
                        for (o, row) in dsw.chunks_mut(inp).enumerate() {
                            row.iter_mut().zip(ei).for_each(|(d, &e)| *d *= eo[o] * e);
                        }
                        let dsb = g.bias.iter().zip(eo).map(|(&d, &e)| d * e).collect();
                        (dsw, dsb)
                    }
                    _ => (vec![T::zero(); out * inp], vec![T::zero(); out]),
                };
                vec![input, Some(g.weight), Some(sigma_w), Some(g.bias), Some(sigma_b)]
            }
            Op::Relu => {
                let dx = val(0)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() });
                vec![Some(dx.collect())]
            }
            Op::Elu => {
                let dx = val(0).data().iter().zip(dy).map(|(&x, &d)| d * kernels::elu_grad(x));
                vec![Some(dx.collect())]
            }
            Op::Sigmoid => {
                let dx = y.data().iter().zip(dy).map(|(&s, &d)| d * s * (T::one() - s));
                vec![Some(dx.collect())]
            }
            Op::L2NormChannels { channels, sites, norms } => {
                vec![Some(kernels::l2_normalize_channels_backward(
                    y.data(),
                    norms,
                    dy,
                    *channels,
                    *sites,
                ))]
            }
            Op::SpatialSoftmax { sites } => vec![Some(kernels::softmax_rows_backward(y.data(), dy, *sites))],
            Op::WeightAggregate { maps, channels, sites } => {
                let (dp, di) = kernels::weight_aggregate_backward(val(0).data(), val(1).data(), dy, *maps, *channels, *sites);
                vec![Some(dp), Some(di)]
            }
            Op::Reshape => vec![Some(dy.to_vec())],
            Op::Dueling { actions, atoms } => {
                let (dv, da) = kernels::dueling_backward(dy, *actions, *atoms);
                vec![Some(dv), Some(da)]
            }
            Op::LogSoftmax { width } => vec![Some(kernels::log_softmax_rows_backward(y.data(), dy, *width))],
            Op::CrossEntropy {
                actions,
                targets,
                weights,
                ..
            } => {
                let lp = val(0);
                let [batch, n_actions, atoms] = *lp.shape() else {
                    unreachable!()
                };
                let scale = dy[0] / T::lit(batch as f64);
                let mut dx = vec![T::zero(); lp.len()];
                for b in 0..batch {
                    let row = (b * n_actions + actions[b]) * atoms;
                    for k in 0..atoms {
                        dx[row + k] = -scale * weights[b] * targets[b * atoms + k];
                    }
                }
                vec![Some(dx)]
            }
        }
        .into_iter()
        .enumerate()
        .map(|(k, g)| if need(k) { g } else { None })
        .collect())
    }
}
