//! Multinomial no-U-turn Hamiltonian Monte Carlo with step-size and
//! diagonal-metric adaptation, plus split R-hat and ESS diagnostics.

mod adapt;
mod diagnostics;
mod draws;
mod nuts;

pub use diagnostics::{
    coordinate_diagnostic, effective_sample_size, split_rhat, CoordinateDiagnostic,
    DiagnosticsReport, ESS_THRESHOLD, RHAT_THRESHOLD,
};
pub use draws::{diagnostics, sample_posterior, DrawMatrix, PosteriorDraws};
pub use nuts::{ChainDraws, TransitionStats};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BayesRakeModel;

/// A differentiable log density over `R^dim`. Points outside the support
/// return `-inf`; the gradient is then unspecified.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for BayesRakeModel {
    fn dim(&self) -> usize {
        BayesRakeModel::dim(self)
    }

    fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        BayesRakeModel::logp_and_grad(self, x, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_depth: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            iters: 1000,
            seed: 0,
            target_accept: 0.8,
            max_depth: 10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.iters == 0 || self.max_depth == 0 {
            return Err(Error::Config(
                "chains, iters and max_depth must be at least 1".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept {} must lie in (0, 1)",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// RNG stream owned by one chain.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs `config.chains` independent chains in parallel. `init` draws the
/// starting point of a chain from that chain's RNG.
pub fn run_chains<M, F>(model: &M, init: F, config: &SamplerConfig) -> Result<Vec<ChainDraws>>
where
    M: LogDensity + ?Sized,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
{
    config.validate()?;
    (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(config.seed, chain);
            let x0 = init(chain, &mut rng)?;
            if x0.len() != model.dim() {
                return Err(Error::DimensionMismatch {
                    what: "initial point",
                    expected: model.dim(),
                    got: x0.len(),
                });
            }
            let mut g = vec![0.0; x0.len()];
            if !model.logp_and_grad(&x0, &mut g).is_finite() {
                return Err(Error::Initialization {
                    attempts: 1,
                    reason: format!("chain {chain} starts where the density is not finite"),
                });
            }
            Ok(nuts::run_chain(model, x0, config, &mut rng))
        })
        .collect()
}
