//! Joint log density of the margin model, the inclusion model and the
//! outcome model, with analytic gradients over unconstrained coordinates.

mod density;
mod design;
mod posterior;

pub use density::{
    cell_propensity, inv_logit, log_inv_logit, log_lik_inclusion, log_lik_outcome,
    log_lik_sample_size, log_prior_empty_cells, log_prior_margins_soft, margin_rounding_warnings,
    CellStats, UnitOutcomes,
};
pub use design::{Design, DesignSpec};
pub use posterior::{BayesRakeModel, Components, Derived, Layout};

use serde::{Deserialize, Serialize};

/// How the known margins enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Margins as noisy realizations with mean `L N`; sampled on `log N`.
    Soft,
    /// Exact margins; `N = N0 + C t` with an orthonormal null-space basis `C`.
    Basis,
    /// Exact margins; `N = N0 + P v` with the null-space projector `P`.
    Projection,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Soft => "soft",
            Method::Basis => "basis",
            Method::Projection => "projection",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "soft" => Ok(Method::Soft),
            "basis" => Ok(Method::Basis),
            "projection" => Ok(Method::Projection),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Distribution of an observed margin around `L N` under the soft method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftFamily {
    #[default]
    Poisson,
    /// Normal with variance equal to the mean.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    /// `y ~ N(theta_j, sigma^2)`.
    Continuous,
    /// `logit Pr(y = 1) = theta_j`.
    Binary,
    /// `y ~ N(1/p_j, sigma^2 / p_j^2)`, tied to the inclusion propensity.
    ReciprocalPropensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub family: OutcomeFamily,
    #[serde(default, flatten)]
    pub design: DesignSpec,
    /// Adds a cell-level effect `sigma_theta * z_j` to the regression mean.
    #[serde(default)]
    pub hierarchical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    /// Normal scale for every regression coefficient.
    pub coef_sd: f64,
    /// Half-normal scale for `sigma` and `sigma_theta`.
    pub scale_sd: f64,
    /// Half-Cauchy location for unsampled cells under the soft method.
    pub empty_location: f64,
    pub empty_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            coef_sd: 5.0,
            scale_sd: 5.0,
            empty_location: 10.0,
            empty_scale: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    #[serde(default)]
    pub soft_family: SoftFamily,
    #[serde(default)]
    pub inclusion: DesignSpec,
    #[serde(default)]
    pub outcome: Option<OutcomeSpec>,
    #[serde(default)]
    pub priors: Priors,
    /// Adds a Poisson likelihood for the total sample size given the
    /// expected number of inclusions.
    #[serde(default = "enabled")]
    pub sample_size_term: bool,
}

fn enabled() -> bool {
    true
}

impl ModelConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            soft_family: SoftFamily::default(),
            inclusion: DesignSpec::default(),
            outcome: None,
            priors: Priors::default(),
            sample_size_term: true,
        }
    }

    pub fn with_outcome(mut self, outcome: OutcomeSpec) -> Self {
        self.outcome = Some(outcome);
        self
    }
}
