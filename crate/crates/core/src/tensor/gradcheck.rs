//! Central finite-difference verification of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Op, Result, Tensor};

/// Builds a graph over the given inputs and returns the output node.
pub trait GradOp {
    fn build(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId>;
}

impl<F> GradOp for F
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
        self(g, inputs)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinate (input index, element) where the maximum occurred.
    pub worst: (usize, usize),
    /// Coordinates left out because the two probes straddle a ReLU kink.
    pub skipped: usize,
}

fn scalarize(g: &Graph<f64>, out: NodeId, projection: &[f64]) -> f64 {
    g.value(out).data().iter().zip(projection).map(|(a, b)| a * b).sum()
}

/// Which ReLU inputs are positive, over every ReLU in the graph.
fn relu_pattern(g: &Graph<f64>) -> Vec<bool> {
    let mut pattern = Vec::new();
    for id in g.node_ids() {
        if matches!(g.op(id), Op::Relu) {
            pattern.extend(g.value(g.inputs(id)[0]).data().iter().map(|&v| v > 0.0));
        }
    }
    pattern
}

fn evaluate(op: &dyn GradOp, point: &[Tensor<f64>], projection: &[f64]) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let ids: Vec<_> = point.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = op.build(&mut g, &ids)?;
    Ok((scalarize(&g, out, projection), relu_pattern(&g)))
}

/// Compares the analytic gradient of `sum(r * op(point))` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, where `r` is a fixed random
/// projection. Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`. Coordinates
/// whose probes put some ReLU input on different sides of zero are skipped,
/// since the difference quotient there spans the kink.
pub fn finite_difference_check(op: &dyn GradOp, point: &[Tensor<f64>], h: f64, seed: u64) -> Result<GradCheck> {
    finite_difference_check_sampled(op, point, h, seed, usize::MAX)
}

/// Like [`finite_difference_check`], but probes at most `per_input` randomly
/// chosen coordinates of each input.
pub fn finite_difference_check_sampled(
    op: &dyn GradOp,
    point: &[Tensor<f64>],
    h: f64,
    seed: u64,
    per_input: usize,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let ids: Vec<_> = point.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = op.build(&mut g, &ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let projection: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = g.backward(out, Tensor::new(shape, projection.clone())?)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: (0, 0),
        skipped: 0,
    };
    let mut probe = point.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let zeros = Tensor::zeros(point[k].shape());
        let analytic = grads.get(*id).unwrap_or(&zeros);
        let n = point[k].len();
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_input).into_vec()
        };
        for e in coords {
            let orig = point[k].data()[e];
            probe[k].data_mut()[e] = orig + h;
            let up = evaluate(op, &probe, &projection)?;
            probe[k].data_mut()[e] = orig - h;
            let down = evaluate(op, &probe, &projection)?;
            probe[k].data_mut()[e] = orig;
            if up.1 != down.1 {
                report.skipped += 1;
                continue;
            }
            let (up, down) = (up.0, down.0);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let point = vec![rand_t(&[2, 3]), rand_t(&[4, 3]), rand_t(&[4])];
        let op = |g: &mut Graph<f64>, ids: &[NodeId]| g.linear(ids[0], ids[1], ids[2]);
        let r = finite_difference_check(&op, &point, 1e-5, 0).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        assert_eq!(r.coordinates, 6 + 12 + 4);
    }

    #[test]
    fn sampled_check_limits_coordinates() {
        let point = vec![Tensor::from_fn(&[5, 6], |i| i as f64 * 0.1 - 1.0)];
        let op = |g: &mut Graph<f64>, ids: &[NodeId]| g.elu(ids[0]);
        let r = finite_difference_check_sampled(&op, &point, 1e-5, 1, 7).unwrap();
        assert_eq!(r.coordinates, 7);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
