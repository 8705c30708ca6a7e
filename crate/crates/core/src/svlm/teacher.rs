use emoanon_numerics::Tensor;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::seed::rng;
use crate::worldsim::Emotion;

/// Frozen stand-in for a pretrained frame-level emotion encoder: a seeded
/// Gaussian projection of `[one-hot(emotion), (t + 1) / T]` to
/// `teacher_dim`. Returns `[frames, teacher_dim]`.
pub fn teacher_embed(emotion: Emotion, frames: usize, cfg: &ModelConfig) -> Tensor {
    let d = cfg.teacher_dim;
    let mut r = rng(cfg.teacher_seed);
    let proj: Vec<f64> = (0..(Emotion::COUNT + 1) * d)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    let class = &proj[emotion.index() * d..][..d];
    let phase = &proj[Emotion::COUNT * d..][..d];
    let mut out = Vec::with_capacity(frames * d);
    for t in 0..frames {
        let tau = (t + 1) as f64 / frames as f64;
        out.extend(class.iter().zip(phase).map(|(c, p)| c + tau * p));
    }
    Tensor::matrix(frames, d, out)
}
