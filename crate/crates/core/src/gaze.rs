//! Gradient saliency of each gaze's strongest site, and the renders built on
//! it.
//!
//! For gaze `n`, the saliency is `dA_n[l*] / dS` with `l*` the site of the
//! largest raw score. One forward pass serves all gazes; each gaze costs one
//! backward pass. Perturbation-based saliency would instead need a forward
//! pass per perturbed patch, hundreds per frame.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::env::{ObjectClass, ObjectMasks, StateStack, FRAME_LEN, SIDE};
use crate::network::{Forward, GradTarget, Network, ENCODER};
use crate::pgm;
use crate::tensor::{argmax, Real, Tensor, TensorError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("gaze {index} out of range for {count} score maps")]
    MapIndex { index: usize, count: usize },
    #[error("network has no learned score maps")]
    NoScores,
    #[error("forward pass did not record input gradients")]
    NoInputGrad,
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RenderMode {
    /// Nearest-upsampled gaze blended over the frame.
    Overlay,
    /// Frame times saliency.
    Soft,
    /// Frame times thresholded saliency.
    #[default]
    Binary,
}

impl RenderMode {
    pub const ALL: [RenderMode; 3] = [RenderMode::Overlay, RenderMode::Soft, RenderMode::Binary];
}

impl fmt::Display for RenderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RenderMode::Overlay => "overlay",
            RenderMode::Soft => "soft",
            RenderMode::Binary => "binary",
        })
    }
}

impl FromStr for RenderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "overlay" => Ok(RenderMode::Overlay),
            "soft" => Ok(RenderMode::Soft),
            "binary" => Ok(RenderMode::Binary),
            other => Err(format!("unknown render mode {other:?} (expected overlay, soft or binary)")),
        }
    }
}

/// Normalized saliency of one gaze on one frame, `SIDE x SIDE` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Vec<f32>,
    pub map: usize,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeRender {
    pub mode: RenderMode,
    pub image: Vec<f32>,
}

/// Gradient of gaze `n`'s maximal raw score with respect to the input stack,
/// for sample 0 of `fwd`. Ties pick the lowest site index.
pub fn compute_saliency<T: Real>(fwd: &Forward<T>, n: usize) -> Result<Tensor<T>, GazeError> {
    let scores = fwd.scores.ok_or(GazeError::NoScores)?;
    let a = fwd.graph.value(scores);
    let count = a.shape()[1];
    if n >= count {
        return Err(GazeError::MapIndex { index: n, count });
    }
    let sites = a.shape()[2] * a.shape()[3];
    let offset = n * sites;
    let best = argmax(&a.data()[offset..offset + sites]);
    let mut seed = Tensor::zeros(a.shape());
    seed.data_mut()[offset + best] = T::one();
    let mut grads = fwd.graph.backward(scores, seed)?;
    let g = grads.take(fwd.input).ok_or(GazeError::NoInputGrad)?;
    let per = g.len() / fwd.batch;
    let shape = g.shape()[1..].to_vec();
    Ok(Tensor::new(shape, g.into_data()[..per].to_vec())?)
}

/// Max of absolute values over the stacked frames, then min-max scaled to
/// `[0, 1]`. A constant map normalizes to all zeros.
pub fn normalize_saliency<T: Real>(raw: &[T], frame_len: usize) -> Vec<f32> {
    assert!(
        frame_len > 0 && raw.len().is_multiple_of(frame_len),
        "raw saliency is a stack of frames"
    );
    let mut reduced = vec![0.0f32; frame_len];
    for frame in raw.chunks_exact(frame_len) {
        for (r, v) in reduced.iter_mut().zip(frame) {
            *r = r.max(v.abs().as_f64() as f32);
        }
    }
    let (lo, hi) = reduced
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return vec![0.0; frame_len];
    }
    reduced.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn check_threshold(threshold: f64) -> Result<(), GazeError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(GazeError::Threshold(threshold))
    }
}

pub fn binarize(values: &[f32], threshold: f64) -> Result<Vec<bool>, GazeError> {
    check_threshold(threshold)?;
    Ok(values.iter().map(|&v| f64::from(v) >= threshold).collect())
}

/// Nearest-neighbour upsampling of an `h x w` map to `SIDE x SIDE`.
pub fn upsample_nearest(map: &[f32], h: usize, w: usize) -> Vec<f32> {
    assert_eq!(map.len(), h * w);
    (0..FRAME_LEN)
        .map(|i| {
            let (y, x) = (i / SIDE, i % SIDE);
            map[(y * h / SIDE) * w + x * w / SIDE]
        })
        .collect()
}

/// Renders one gaze. `gaze` is that gaze's `h x w` weight map, used only
/// by the overlay, which rescales it so its peak is 1.
pub fn render(
    frame: &[f32],
    saliency: &SaliencyMap,
    gaze: (&[f32], usize, usize),
    mode: RenderMode,
    threshold: f64,
) -> Result<GazeRender, GazeError> {
    assert_eq!(frame.len(), FRAME_LEN);
    let image = match mode {
        RenderMode::Overlay => {
            let (map, h, w) = gaze;
            let peak = map.iter().copied().fold(0.0f32, f32::max);
            let scaled: Vec<f32> = map.iter().map(|&v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
            let up = upsample_nearest(&scaled, h, w);
            frame
                .iter()
                .zip(&up)
                .map(|(f, g)| (1.0 - OVERLAY_ALPHA) * f + OVERLAY_ALPHA * g)
                .collect()
        }
        RenderMode::Soft => frame.iter().zip(&saliency.values).map(|(f, s)| f * s).collect(),
        RenderMode::Binary => {
            let mask = binarize(&saliency.values, threshold)?;
            frame.iter().zip(mask).map(|(&f, m)| if m { f } else { 0.0 }).collect()
        }
    };
    Ok(GazeRender { mode, image })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAlignment {
    pub class: ObjectClass,
    /// Share of the total weight inside the class mask.
    pub fraction: f64,
    /// The share a spatially uniform weighting would give.
    pub baseline: f64,
}

/// Per-class share of `weights` (a saliency map, or a 0/1 mask).
pub fn gaze_alignment(weights: &[f32], masks: &ObjectMasks) -> Vec<ClassAlignment> {
    let total: f64 = weights.iter().map(|&w| f64::from(w)).sum();
    ObjectClass::ALL
        .into_iter()
        .map(|class| {
            let mask = masks.get(class);
            let inside: f64 = weights.iter().zip(mask).filter(|(_, &m)| m).map(|(&w, _)| f64::from(w)).sum();
            ClassAlignment {
                class,
                fraction: if total > 0.0 { inside / total } else { 0.0 },
                baseline: masks.count(class) as f64 / weights.len() as f64,
            }
        })
        .collect()
}

/// Input rows (or columns) that can influence embedding row `i`.
pub fn receptive_field(i: usize) -> Range<usize> {
    let (mut lo, mut hi) = (i, i);
    for &(_, k, s) in ENCODER.iter().rev() {
        lo *= s;
        hi = hi * s + k - 1;
    }
    lo..hi + 1
}

/// Everything the visualizer derives from one state.
#[derive(Clone, Debug)]
pub struct FrameGaze {
    pub saliency: Vec<SaliencyMap>,
    /// Normalized gaze weights, one `h x w` map per gaze.
    pub gazes: Vec<Vec<f32>>,
    pub grid: (usize, usize),
    pub forwards: usize,
    pub backwards: usize,
}

/// One noise-free forward pass, then one backward pass per gaze.
pub fn analyze_state(net: &Network<f32>, state: &StateStack, frame: usize) -> Result<FrameGaze, GazeError> {
    let fwd = net.forward(Arc::new(state.to_tensor()), false, GradTarget::Input)?;
    let scores = fwd.scores.ok_or(GazeError::NoScores)?;
    let shape = fwd.graph.value(scores).shape().to_vec();
    let (n_maps, h, w) = (shape[1], shape[2], shape[3]);
    let p = fwd.graph.value(fwd.gaze.expect("learned scores imply gazes")).data();
    let gazes = (0..n_maps).map(|n| p[n * h * w..(n + 1) * h * w].to_vec()).collect();
    let saliency = (0..n_maps)
        .map(|n| {
            let raw = compute_saliency(&fwd, n)?;
            Ok(SaliencyMap {
                values: normalize_saliency(raw.data(), FRAME_LEN),
                map: n,
                frame,
            })
        })
        .collect::<Result<Vec<_>, GazeError>>()?;
    Ok(FrameGaze {
        saliency,
        gazes,
        grid: (h, w),
        forwards: 1,
        backwards: fwd.graph.backward_passes(),
    })
}

pub fn render_file_name(frame: usize, n: usize, mode: RenderMode) -> String {
    format!("f{frame:06}_g{n}_{mode}.pgm")
}

/// Writes a render as PGM and returns its file name.
pub fn write_render(dir: &Path, frame: usize, n: usize, r: &GazeRender) -> Result<String, GazeError> {
    let name = render_file_name(frame, n, r.mode);
    let px: Vec<u8> = r.image.iter().map(|&v| pgm::quantize(v)).collect();
    pgm::write(&dir.join(&name), SIDE, SIDE, &px)?;
    Ok(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PelletWorld;
    use crate::network::NetworkConfig;
    use crate::tensor::Graph;
    use proptest::prelude::*;

    fn sal(values: Vec<f32>) -> SaliencyMap {
        SaliencyMap {
            values,
            map: 0,
            frame: 0,
        }
    }

    #[test]
    fn normalization_uses_absolute_values() {
        assert_eq!(normalize_saliency(&[0.0f64, 2.0, -4.0], 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_saliency(&[3.0f64; 8], 4), vec![0.0; 4]);
        // max over frames
        assert_eq!(normalize_saliency(&[0.0f64, 1.0, -3.0, 0.5], 2), vec![1.0, 0.0]);
    }

    #[test]
    fn binarize_threshold_rules() {
        assert_eq!(binarize(&[0.0, 0.3, 0.7, 1.0], 0.5).unwrap(), vec![false, false, true, true]);
        assert_eq!(binarize(&[0.0, 0.2, 0.0, 1.0], 1e-6).unwrap(), vec![false, true, false, true]);
        assert!(binarize(&[0.0; 4], 0.3).unwrap().iter().all(|&m| !m));
        assert!(binarize(&[0.5], 0.0).is_err() && binarize(&[0.5], 1.0).is_err());
    }

    #[test]
    fn render_modes() {
        let frame: Vec<f32> = (0..FRAME_LEN).map(|i| (i % 11) as f32 / 10.0).collect();
        let gaze = [1.0 / 49.0; 49];
        let ones = sal(vec![1.0; FRAME_LEN]);
        let zeros = sal(vec![0.0; FRAME_LEN]);
        let g = (&gaze[..], 7, 7);
        assert_eq!(render(&frame, &ones, g, RenderMode::Binary, 0.5).unwrap().image, frame);
        assert!(render(&frame, &zeros, g, RenderMode::Soft, 0.5)
            .unwrap()
            .image
            .iter()
            .all(|&v| v == 0.0));
        let overlay = render(&frame, &zeros, g, RenderMode::Overlay, 0.5).unwrap().image;
        assert!((overlay[5] - (0.5 * frame[5] + 0.5)).abs() < 1e-6);
        assert_eq!(RenderMode::default(), RenderMode::Binary);
    }

    #[test]
    fn binary_render_is_idempotent_in_the_mask() {
        let frame = vec![0.8f32; FRAME_LEN];
        let s = sal((0..FRAME_LEN).map(|i| (i % 17) as f32 / 16.0).collect());
        let mask = binarize(&s.values, 0.5).unwrap();
        let img = render(&frame, &s, (&[1.0; 49], 7, 7), RenderMode::Binary, 0.5).unwrap().image;
        let again: Vec<bool> = img.iter().map(|&v| v > 0.0).collect();
        assert_eq!(again, mask);
    }

    #[test]
    fn alignment_geometry() {
        let env = PelletWorld::new(4, 0);
        let masks = env.masks();
        let player: Vec<f32> = masks
            .get(ObjectClass::Player)
            .iter()
            .map(|&m| f32::from(u8::from(m)))
            .collect();
        let a = gaze_alignment(&player, masks);
        assert_eq!(a[0].class, ObjectClass::Player);
        assert_eq!(a[0].fraction, 1.0);
        assert!((a[0].baseline - 49.0 / 7056.0).abs() < 1e-12);
        let uniform = gaze_alignment(&vec![0.25; FRAME_LEN], masks);
        for c in uniform {
            assert!((c.fraction - c.baseline).abs() < 1e-12);
        }
    }

    #[test]
    fn receptive_field_of_encoder() {
        assert_eq!(receptive_field(0), 0..36);
        assert_eq!(receptive_field(6), 48..84);
    }

    #[test]
    fn saliency_is_local_and_costs_one_backward_per_gaze() {
        let net = Network::<f32>::new(NetworkConfig::default(), 3).unwrap();
        let env = PelletWorld::new(9, 0);
        let g = analyze_state(&net, env.state(), 0).unwrap();
        assert_eq!(g.saliency.len(), 2);
        assert_eq!((g.forwards, g.backwards), (1, 2));
        // recompute gaze 0's seed site and check nothing leaks outside its field
        let fwd = net
            .forward(Arc::new(env.state().to_tensor()), false, GradTarget::Input)
            .unwrap();
        let a = fwd.graph.value(fwd.scores.unwrap());
        let site = argmax(&a.data()[..49]);
        let raw = compute_saliency(&fwd, 0).unwrap();
        let (rows, cols) = (receptive_field(site / 7), receptive_field(site % 7));
        for (i, v) in raw.data().iter().enumerate() {
            let (y, x) = ((i % FRAME_LEN) / SIDE, i % SIDE);
            if !rows.contains(&y) || !cols.contains(&x) {
                assert_eq!(*v, 0.0, "gradient outside the receptive field at {y},{x}");
            }
        }
        assert!(matches!(compute_saliency(&fwd, 2), Err(GazeError::MapIndex { .. })));
    }

    #[test]
    fn linear_probe_gradient_is_its_weights() {
        // A = w . S on one site: the saliency seed returns w exactly
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::from_fn(&[1, 6], |i| i as f64), true);
        let w = g.leaf(
            Tensor::new(vec![1, 6], vec![0.5, -1.0, 0.0, 2.0, 0.25, -0.75]).unwrap(),
            false,
        );
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let a = g.linear(s, w, b).unwrap();
        let grads = g.backward(a, Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(grads.get(s).unwrap().data(), g.value(w).data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn normalized_range(raw in proptest::collection::vec(-1e3f64..1e3, 8..64)) {
            let n = raw.len() / 4 * 4;
            let out = normalize_saliency(&raw[..n], n / 4);
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
