use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use super::{Design, OutcomeFamily, SoftFamily};
use crate::error::{Error, Result};
use crate::table::{LoadingMatrix, MarginSet};

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(inv_logit(x))` without underflow for large negative `x`.
#[inline]
pub fn log_inv_logit(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-cell inclusion probabilities `inv_logit(X alpha)`.
pub fn cell_propensity(design: &Design, alpha: &[f64]) -> Vec<f64> {
    design
        .linear_predictor(alpha)
        .into_iter()
        .map(inv_logit)
        .collect()
}

/// Poisson log-likelihood of sample cell counts with means
/// `n N_j p_j / sum(N p)`.
pub fn log_lik_inclusion(counts: &[u64], nhat: &[f64], p: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let n = n as f64;
    let s: f64 = nhat.iter().zip(p).map(|(a, b)| a * b).sum();
    let mut total = 0.0;
    for ((&k, &nj), &pj) in counts.iter().zip(nhat).zip(p) {
        let lambda = n * nj * pj / s;
        total += poisson_lpmf(k as f64, lambda);
    }
    total
}

/// Poisson log probability of the observed sample size given the expected
/// number of inclusions `sum_j N_j p_j`.
pub fn log_lik_sample_size(counts: &[u64], nhat: &[f64], p: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let s: f64 = nhat.iter().zip(p).map(|(a, b)| a * b).sum();
    poisson_lpmf(n as f64, s)
}

#[inline]
pub(crate) fn poisson_lpmf(k: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k * lambda.ln() - lambda - ln_gamma(k + 1.0)
}

/// Soft margin prior: each observed margin row is Poisson (or normal with
/// variance equal to the mean) around `(L N)_m`. Non-integer margins are
/// rounded for the Poisson family.
pub fn log_prior_margins_soft(
    nhat: &[f64],
    margins: &MarginSet,
    loading: &LoadingMatrix,
    family: SoftFamily,
) -> f64 {
    let mu = loading.apply(nhat);
    margins
        .stacked()
        .iter()
        .zip(&mu)
        .map(|(&obs, &m)| match family {
            SoftFamily::Poisson => poisson_lpmf(obs.round(), m),
            SoftFamily::Normal => normal_var_mean_lpdf(obs, m),
        })
        .sum()
}

pub(crate) fn normal_var_mean_lpdf(obs: f64, mu: f64) -> f64 {
    if mu == 0.0 {
        return if obs == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let r = obs - mu;
    -LN_SQRT_2PI - 0.5 * mu.ln() - r * r / (2.0 * mu)
}

/// One line per margin row that the Poisson family would round.
pub fn margin_rounding_warnings(margins: &MarginSet) -> Vec<String> {
    let mut out = Vec::new();
    for (t, term) in margins.terms().iter().enumerate() {
        for (r, &c) in term.counts().iter().enumerate() {
            if c.fract() != 0.0 {
                out.push(format!(
                    "margin {} = {} rounded to {} for the Poisson margin model",
                    margins.row_label(t, r),
                    c,
                    c.round()
                ));
            }
        }
    }
    out
}

/// Log normalizer of a Cauchy(location, scale) truncated to `(0, inf)`.
pub(crate) fn half_cauchy_log_norm(location: f64, scale: f64) -> f64 {
    let z = 0.5 + (location / scale).atan() / PI;
    -(scale * PI * z).ln()
}

/// Sum of truncated half-Cauchy log densities over the given counts.
pub fn log_prior_empty_cells(
    values: impl IntoIterator<Item = f64>,
    location: f64,
    scale: f64,
) -> f64 {
    let c = half_cauchy_log_norm(location, scale);
    values
        .into_iter()
        .map(|v| {
            if v < 0.0 {
                f64::NEG_INFINITY
            } else {
                let u = (v - location) / scale;
                c - (u * u).ln_1p()
            }
        })
        .sum()
}

/// Unit-level outcomes with the cell of each unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitOutcomes {
    pub unit_cells: Vec<usize>,
    pub y: Vec<f64>,
}

impl UnitOutcomes {
    pub fn new(unit_cells: Vec<usize>, y: Vec<f64>) -> Result<Self> {
        if unit_cells.len() != y.len() {
            return Err(Error::DimensionMismatch {
                what: "outcome values",
                expected: unit_cells.len(),
                got: y.len(),
            });
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite outcome {v}")));
        }
        Ok(Self { unit_cells, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cell_stats(&self, n_cells: usize) -> Result<Vec<CellStats>> {
        let mut sum = vec![0.0; n_cells];
        let mut m = vec![0usize; n_cells];
        for (&j, &y) in self.unit_cells.iter().zip(&self.y) {
            if j >= n_cells {
                return Err(Error::InvalidInput(format!(
                    "unit cell {j} out of range for {n_cells} cells"
                )));
            }
            sum[j] += y;
            m[j] += 1;
        }
        let mut stats: Vec<CellStats> = (0..n_cells)
            .map(|j| CellStats {
                m: m[j] as f64,
                sum: sum[j],
                mean: if m[j] > 0 { sum[j] / m[j] as f64 } else { 0.0 },
                ss: 0.0,
            })
            .collect();
        for (&j, &y) in self.unit_cells.iter().zip(&self.y) {
            let d = y - stats[j].mean;
            stats[j].ss += d * d;
        }
        Ok(stats)
    }
}

/// Sufficient statistics of the outcomes in one cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellStats {
    pub m: f64,
    pub sum: f64,
    pub mean: f64,
    /// Centered sum of squares.
    pub ss: f64,
}

/// Unit-by-unit outcome log-likelihood. `cell_param` is `theta_j` for the
/// continuous and binary families and the propensity `p_j` for the
/// reciprocal-propensity family; `sigma` is ignored for binary outcomes.
pub fn log_lik_outcome(
    family: OutcomeFamily,
    cell_param: &[f64],
    sigma: f64,
    data: &UnitOutcomes,
) -> f64 {
    if family != OutcomeFamily::Binary && !(sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (&j, &y) in data.unit_cells.iter().zip(&data.y) {
        let c = cell_param[j];
        total += match family {
            OutcomeFamily::Continuous => {
                let r = (y - c) / sigma;
                -LN_SQRT_2PI - sigma.ln() - 0.5 * r * r
            }
            OutcomeFamily::Binary => y * c - softplus(c),
            OutcomeFamily::ReciprocalPropensity => {
                let sd = sigma / c;
                let r = (y - 1.0 / c) / sd;
                -LN_SQRT_2PI - sd.ln() - 0.5 * r * r
            }
        };
    }
    total
}
