//! Region-sensitive Rainbow: a distributional, dueling, noisy, prioritized
//! n-step double-Q agent whose policy sees the image embedding through learned
//! spatial importance maps, plus gradient-saliency visualization of those maps
//! on a deterministic pixel game with ground-truth object masks.

pub mod env;
pub mod gaze;
pub mod harness;
pub mod network;
pub mod par;
pub mod pgm;
pub mod replay;
pub mod tensor;
pub mod trainer;
