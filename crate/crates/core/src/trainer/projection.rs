//! Categorical projection of a shifted, scaled return distribution back onto
//! the fixed support.

use rand::Rng;

use crate::tensor::Real;

/// Projects rows of `probs` (`B x K` over `support`) through
/// `Tz_j = clamp(g + (1 - done) * gamma_n * z_j, v_min, v_max)`, splitting
/// each `p_j` between the two atoms bracketing `Tz_j` in proportion to
/// proximity.
pub fn project_target<T: Real>(support: &[T], probs: &[T], returns: &[T], gamma_n: &[T], dones: &[bool]) -> Vec<T> {
    let k = support.len();
    assert!(k >= 2, "support needs at least two atoms");
    let batch = returns.len();
    assert_eq!(probs.len(), batch * k, "probs must be batch x atoms");
    assert!(gamma_n.len() == batch && dones.len() == batch);
    let (v_min, v_max) = (support[0], support[k - 1]);
    let dz = (v_max - v_min) / T::lit((k - 1) as f64);
    let top = T::lit((k - 1) as f64);
    let mut out = vec![T::zero(); batch * k];
    for b in 0..batch {
        let scale = if dones[b] { T::zero() } else { gamma_n[b] };
        let row = &probs[b * k..(b + 1) * k];
        let m = &mut out[b * k..(b + 1) * k];
        for (&z, &p) in support.iter().zip(row) {
            let tz = (returns[b] + scale * z).max(v_min).min(v_max);
            let pos = ((tz - v_min) / dz).max(T::zero()).min(top);
            let lo = pos.floor();
            let l = lo.as_f64() as usize;
            if l + 1 >= k {
                m[k - 1] += p;
                continue;
            }
            let frac = pos - lo;
            m[l] += p * (T::one() - frac);
            m[l + 1] += p * frac;
        }
    }
    out
}

/// Reference projection for one row: every target atom receives
/// `max(0, 1 - |Tz_j - z_i| / dz)` of every source mass `p_j`, summed over
/// all (source, atom) pairs. Quadratic, used only to check
/// [`project_target`].
pub fn project_brute_force(support: &[f64], p: &[f64], g: f64, gamma_n: f64, done: bool) -> Vec<f64> {
    let k = support.len();
    let dz = (support[k - 1] - support[0]) / (k - 1) as f64;
    let mut m = vec![0.0; k];
    for j in 0..k {
        let tz = (g + if done { 0.0 } else { gamma_n } * support[j]).clamp(support[0], support[k - 1]);
        for i in 0..k {
            m[i] += p[j] * (1.0 - (tz - support[i]).abs() / dz).max(0.0);
        }
    }
    m
}

/// A random projection case `(p, g, gamma_n, done)` with skewed `p` and
/// returns wide enough to exercise clamping at both ends.
pub fn random_projection_case(rng: &mut impl Rng, k: usize) -> (Vec<f64>, f64, f64, bool) {
    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
    let sum: f64 = raw.iter().sum();
    let p = raw.iter().map(|x| x / sum).collect();
    (
        p,
        rng.random_range(-15.0..15.0),
        rng.random_range(0.0..=1.0),
        rng.random_bool(0.2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn support(k: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    }

    #[test]
    fn identity_transport() {
        let z = support(51, -10.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, ..) = random_projection_case(&mut rng, 51);
        let m = project_target(&z, &p, &[0.0], &[1.0], &[false]);
        for (a, b) in m.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_splits_evenly() {
        let z = [-1.0, 0.0, 1.0];
        let m = project_target(&z, &[0.0, 1.0, 0.0], &[0.5], &[0.9], &[false]);
        assert_eq!(m, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn terminal_collapses_onto_return() {
        let z = support(51, -10.0, 10.0);
        let p = vec![1.0 / 51.0; 51];
        let m = project_target(&z, &p, &[2.0], &[0.97], &[true]);
        assert!((m[30] - 1.0).abs() < 1e-9, "{}", m[30]);
    }

    #[test]
    fn matches_brute_force() {
        let z = support(51, -10.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let (p, g, gn, done) = random_projection_case(&mut rng, 51);
            let fast = project_target(&z, &p, &[g], &[gn], &[done]);
            let slow = project_brute_force(&z, &p, g, gn, done);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9, "{err}");
            assert!((fast.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
