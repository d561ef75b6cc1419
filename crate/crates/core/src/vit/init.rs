use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Float, Tensor};
use crate::vit::config::ModelConfig;
use crate::vit::params::{ParamKind, Params, UniversalWeights};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Samples from `N(0, std²)` conditioned on `|x| ≤ 2·std`.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Fresh universal weights: truncated-normal projections, tokens and position
/// table; zero biases and betas; unit gammas. Deterministic in `seed`.
pub fn init_weights<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<UniversalWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Params::shapes(cfg).map(|info, shape| match info.kind {
        ParamKind::Weight | ParamKind::Token => {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(truncated_normal(&mut rng, INIT_STD))).collect();
            Tensor::new(shape.clone(), data).expect("layout shape")
        }
        ParamKind::Bias | ParamKind::Beta => Tensor::zeros(shape),
        ParamKind::Gamma => Tensor::ones(shape),
    }))
}
