use std::f64::consts::LN_2;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use super::density::{half_cauchy_log_norm, inv_logit, log_inv_logit, softplus, LN_SQRT_2PI};
use super::{
    margin_rounding_warnings, CellStats, Design, Method, ModelConfig, OutcomeFamily, SoftFamily,
    UnitOutcomes,
};
use crate::error::{Error, Result};
use crate::ipf::{ipf_rake, IpfOptions};
use crate::subspace::{default_anchor, null_space_basis, projection_matrix, Anchor};
use crate::table::{independence_init, CellTable, LoadingMatrix, MarginSet};

const INIT_ATTEMPTS: usize = 100;
const INIT_JITTER: f64 = 0.1;

/// Positions of each parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    method: Method,
    counts: Range<usize>,
    alpha: Range<usize>,
    beta: Range<usize>,
    log_sigma: Option<usize>,
    log_sigma_theta: Option<usize>,
    z: Range<usize>,
    names: Vec<String>,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// `log N` (soft), `t` (basis) or `v` (projection).
    pub fn counts(&self) -> Range<usize> {
        self.counts.clone()
    }

    pub fn alpha(&self) -> Range<usize> {
        self.alpha.clone()
    }

    pub fn beta(&self) -> Range<usize> {
        self.beta.clone()
    }

    pub fn log_sigma(&self) -> Option<usize> {
        self.log_sigma
    }

    pub fn log_sigma_theta(&self) -> Option<usize> {
        self.log_sigma_theta
    }

    pub fn z(&self) -> Range<usize> {
        self.z.clone()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// The log posterior split into its additive parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Components {
    pub margin: f64,
    pub empty_cells: f64,
    pub inclusion: f64,
    pub sample_size: f64,
    pub outcome: f64,
    pub priors: f64,
    pub jacobian: f64,
    pub total: f64,
}

impl Components {
    fn infeasible() -> Self {
        Self {
            total: f64::NEG_INFINITY,
            ..Self::default()
        }
    }

    fn finish(mut self) -> Self {
        self.total = self.margin
            + self.empty_cells
            + self.inclusion
            + self.sample_size
            + self.outcome
            + self.priors
            + self.jacobian;
        if self.total.is_nan() {
            self.total = f64::NEG_INFINITY;
        }
        self
    }
}

/// Quantities implied by one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    pub counts: Vec<f64>,
    pub propensity: Vec<f64>,
    /// Cell means on the outcome scale.
    pub cell_means: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum MarginModel {
    Soft {
        family: SoftFamily,
        observed: Vec<f64>,
        log_fact: f64,
    },
    Basis {
        anchor: DVector<f64>,
        basis: DMatrix<f64>,
    },
    Projection {
        anchor: DVector<f64>,
        projector: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
struct OutcomeModel {
    family: OutcomeFamily,
    design: Option<Design>,
    hierarchical: bool,
    stats: Vec<CellStats>,
    observed: Vec<usize>,
    mean: f64,
    sd: f64,
}

/// Joint posterior over cell counts, inclusion coefficients and outcome
/// parameters.
#[derive(Debug, Clone)]
pub struct BayesRakeModel {
    config: ModelConfig,
    table: CellTable,
    counts: Vec<f64>,
    n_total: f64,
    log_fact_counts: f64,
    empty: Vec<usize>,
    population: f64,
    loading: LoadingMatrix,
    margin: MarginModel,
    inclusion: Design,
    outcome: Option<OutcomeModel>,
    init_counts: Vec<f64>,
    layout: Layout,
    warnings: Vec<String>,
}

impl BayesRakeModel {
    pub fn new(
        config: ModelConfig,
        table: &CellTable,
        margins: &MarginSet,
        outcomes: Option<&UnitOutcomes>,
    ) -> Result<Self> {
        let j = table.n_cells();
        if table.n_total() == 0 {
            return Err(Error::InvalidInput("sample has no units".into()));
        }
        let loading = LoadingMatrix::for_margins(table, margins)?;
        let inclusion = Design::from_spec(table, &config.inclusion)?;
        let mut warnings = Vec::new();

        let outcome = match (&config.outcome, outcomes) {
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Config(
                    "outcome model configured without outcome data".into(),
                ))
            }
            (Some(spec), Some(data)) => {
                if data.is_empty() {
                    return Err(Error::InvalidInput("no outcome values".into()));
                }
                if spec.family == OutcomeFamily::Binary
                    && data.y.iter().any(|&y| y != 0.0 && y != 1.0)
                {
                    return Err(Error::InvalidInput(
                        "binary outcome values must be 0 or 1".into(),
                    ));
                }
                let stats = data.cell_stats(j)?;
                let n = data.len() as f64;
                let mean = data.y.iter().sum::<f64>() / n;
                let var = data.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
                let design = match spec.family {
                    OutcomeFamily::ReciprocalPropensity => None,
                    _ => Some(Design::from_spec(table, &spec.design)?),
                };
                Some(OutcomeModel {
                    family: spec.family,
                    design,
                    hierarchical: spec.hierarchical
                        && spec.family != OutcomeFamily::ReciprocalPropensity,
                    observed: (0..j).filter(|&c| stats[c].m > 0.0).collect(),
                    stats,
                    mean,
                    sd: var.sqrt(),
                })
            }
        };

        let init_counts = match ipf_rake(table, margins, &IpfOptions::default()) {
            Ok(r) if r.converged => r.fitted,
            _ => independence_init(margins, table)?,
        };

        let margin = match config.method {
            Method::Soft => {
                let stacked = margins.stacked();
                let observed: Vec<f64> = match config.soft_family {
                    SoftFamily::Poisson => {
                        warnings.extend(margin_rounding_warnings(margins));
                        stacked.iter().map(|v| v.round()).collect()
                    }
                    SoftFamily::Normal => stacked,
                };
                let log_fact = match config.soft_family {
                    SoftFamily::Poisson => observed.iter().map(|&m| ln_gamma(m + 1.0)).sum(),
                    SoftFamily::Normal => 0.0,
                };
                MarginModel::Soft {
                    family: config.soft_family,
                    observed,
                    log_fact,
                }
            }
            Method::Basis | Method::Projection => {
                let opts = IpfOptions {
                    tol: 1e-13,
                    max_iter: 10_000,
                };
                let anchor = default_anchor(table, margins, &opts)
                    .and_then(|a| Anchor::new(a, &loading, margins))
                    .map_err(|e| Error::Initialization {
                        attempts: 0,
                        reason: format!("no cell table reproduces the margins: {e}"),
                    })?;
                let anchor = DVector::from_column_slice(anchor.counts());
                let basis = null_space_basis(&loading);
                if config.method == Method::Basis {
                    MarginModel::Basis {
                        anchor,
                        basis: basis.matrix().clone(),
                    }
                } else {
                    let projector = if basis.d_null() == 0 {
                        DMatrix::zeros(j, j)
                    } else {
                        projection_matrix(&basis)?.matrix().clone()
                    };
                    MarginModel::Projection { anchor, projector }
                }
            }
        };

        let layout = build_layout(&config, table, &margin, &inclusion, outcome.as_ref());
        let counts = table.counts_f64();
        Ok(Self {
            log_fact_counts: counts.iter().map(|&c| ln_gamma(c + 1.0)).sum(),
            n_total: table.n_total() as f64,
            empty: table.empty_cells().collect(),
            population: margins.total(),
            counts,
            table: table.clone(),
            loading,
            margin,
            inclusion,
            outcome,
            init_counts,
            layout,
            warnings,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn table(&self) -> &CellTable {
        &self.table
    }

    pub fn loading(&self) -> &LoadingMatrix {
        &self.loading
    }

    /// Known population size `N`.
    pub fn population(&self) -> f64 {
        self.population
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn inclusion_design(&self) -> &Design {
        &self.inclusion
    }

    pub fn outcome_design(&self) -> Option<&Design> {
        self.outcome.as_ref().and_then(|o| o.design.as_ref())
    }

    pub fn outcome_family(&self) -> Option<OutcomeFamily> {
        self.outcome.as_ref().map(|o| o.family)
    }

    /// Feasible `N0` of the subspace methods.
    pub fn anchor(&self) -> Option<&[f64]> {
        match &self.margin {
            MarginModel::Soft { .. } => None,
            MarginModel::Basis { anchor, .. } | MarginModel::Projection { anchor, .. } => {
                Some(anchor.as_slice())
            }
        }
    }

    /// Null-space dimension of the loading matrix (basis method only).
    pub fn d_null(&self) -> Option<usize> {
        match &self.margin {
            MarginModel::Basis { basis, .. } => Some(basis.ncols()),
            _ => None,
        }
    }

    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        self.eval(x, None).total
    }

    pub fn components(&self, x: &[f64]) -> Result<Components> {
        self.check_dim(x)?;
        Ok(self.eval(x, None))
    }

    pub fn grad_log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut g = vec![0.0; self.dim()];
        let c = self.eval(x, Some(&mut g));
        if !c.total.is_finite() {
            return Err(Error::NonFiniteDensity);
        }
        Ok(g)
    }

    /// Log density with its gradient written into `grad`.
    pub fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad)).total
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Cell counts `N` implied by `x`; may contain negative entries for the
    /// subspace methods.
    pub fn cell_counts(&self, x: &[f64]) -> Vec<f64> {
        let xc = &x[self.layout.counts()];
        match &self.margin {
            MarginModel::Soft { .. } => xc.iter().map(|v| v.exp()).collect(),
            MarginModel::Basis { anchor, basis } => (anchor
                + basis * DVector::from_column_slice(xc))
            .data
            .into(),
            MarginModel::Projection { anchor, projector } => (anchor
                + projector * DVector::from_column_slice(xc))
            .data
            .into(),
        }
    }

    pub fn derived(&self, x: &[f64]) -> Derived {
        let counts = self.cell_counts(x);
        let eta = self.inclusion.linear_predictor(&x[self.layout.alpha()]);
        let propensity: Vec<f64> = eta.iter().map(|&e| inv_logit(e)).collect();
        let cell_means = self.outcome.as_ref().map(|o| match o.family {
            OutcomeFamily::ReciprocalPropensity => propensity.iter().map(|p| 1.0 / p).collect(),
            family => {
                let theta = self.theta(o, x);
                if family == OutcomeFamily::Binary {
                    theta.into_iter().map(inv_logit).collect()
                } else {
                    theta
                }
            }
        });
        Derived {
            counts,
            propensity,
            cell_means,
        }
    }

    fn theta(&self, o: &OutcomeModel, x: &[f64]) -> Vec<f64> {
        let design = o.design.as_ref().expect("regression outcome has a design");
        let mut theta = design.linear_predictor(&x[self.layout.beta()]);
        if let Some(i) = self.layout.log_sigma_theta {
            let s = x[i].exp();
            for (t, z) in theta.iter_mut().zip(&x[self.layout.z()]) {
                *t += s * z;
            }
        }
        theta
    }

    /// Jittered starting point with finite density.
    pub fn initial_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let mut reason = String::new();
        for _ in 0..INIT_ATTEMPTS {
            let x = self.draw_start(rng);
            let c = self.eval(&x, None);
            if c.total.is_finite() {
                return Ok(x);
            }
            reason = self.explain_infeasible(&x, &c);
        }
        Err(Error::Initialization {
            attempts: INIT_ATTEMPTS,
            reason,
        })
    }

    fn draw_start<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut jitter = || rng.random_range(-INIT_JITTER..INIT_JITTER);
        let lay = &self.layout;
        let mut x = vec![0.0; lay.dim()];
        match self.config.method {
            Method::Soft => {
                for (xi, &n) in x[lay.counts()].iter_mut().zip(&self.init_counts) {
                    *xi = n.max(0.5).ln() + jitter();
                }
            }
            Method::Basis | Method::Projection => {
                for xi in &mut x[lay.counts()] {
                    *xi = jitter();
                }
            }
        }
        let frac = (self.n_total / self.population.max(1.0)).clamp(1e-6, 1.0 - 1e-6);
        for (k, xi) in x[lay.alpha()].iter_mut().enumerate() {
            *xi = jitter() + if k == 0 { logit(frac) } else { 0.0 };
        }
        if let Some(o) = &self.outcome {
            let centre = match o.family {
                OutcomeFamily::Continuous => o.mean,
                OutcomeFamily::Binary => logit(o.mean.clamp(0.01, 0.99)),
                OutcomeFamily::ReciprocalPropensity => 0.0,
            };
            for (k, xi) in x[lay.beta()].iter_mut().enumerate() {
                *xi = jitter() + if k == 0 { centre } else { 0.0 };
            }
            if let Some(i) = lay.log_sigma {
                let scale = match o.family {
                    OutcomeFamily::Continuous => o.sd,
                    _ => o.sd * frac,
                };
                x[i] = jitter() + if scale > 0.0 { scale.ln() } else { 0.0 };
            }
            if let Some(i) = lay.log_sigma_theta {
                x[i] = jitter() + 0.5f64.ln();
            }
            for xi in &mut x[lay.z()] {
                *xi = jitter();
            }
        }
        x
    }

    fn explain_infeasible(&self, x: &[f64], c: &Components) -> String {
        let counts = self.cell_counts(x);
        if let Some((j, v)) = counts
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return format!(
                "cell count for {} is {v}, outside the nonnegative orthant",
                self.table.cell_label(j)
            );
        }
        let parts = [
            ("margin", c.margin),
            ("empty-cell prior", c.empty_cells),
            ("inclusion likelihood", c.inclusion),
            ("sample size likelihood", c.sample_size),
            ("outcome likelihood", c.outcome),
            ("coefficient priors", c.priors),
        ];
        match parts.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => format!("{name} term is {v}"),
            None => "log density is not finite".into(),
        }
    }

    fn eval(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> Components {
        let lay = &self.layout;
        let j_cells = self.counts.len();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let xc = &x[lay.counts()];
        let (counts, pv) = match &self.margin {
            MarginModel::Soft { .. } => (xc.iter().map(|v| v.exp()).collect::<Vec<_>>(), None),
            MarginModel::Basis { anchor, basis } => {
                let n = anchor + basis * DVector::from_column_slice(xc);
                (n.data.into(), None)
            }
            MarginModel::Projection { anchor, projector } => {
                let pv = projector * DVector::from_column_slice(xc);
                ((anchor + &pv).data.into(), Some(pv))
            }
        };
        if counts.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Components::infeasible();
        }

        let mut c = Components::default();
        let mut g_n = vec![0.0; j_cells];
        let mut g_eta = vec![0.0; j_cells];
        let pri = &self.config.priors;

        // margin model
        if let MarginModel::Soft {
            family,
            observed,
            log_fact,
        } = &self.margin
        {
            let mu = self.loading.apply(&counts);
            let mut d_mu = vec![0.0; mu.len()];
            let mut total = 0.0;
            for ((&obs, &m), d) in observed.iter().zip(&mu).zip(d_mu.iter_mut()) {
                if m == 0.0 {
                    if obs != 0.0 {
                        return Components::infeasible();
                    }
                    continue;
                }
                match family {
                    SoftFamily::Poisson => {
                        total += obs * m.ln() - m;
                        *d = obs / m - 1.0;
                    }
                    SoftFamily::Normal => {
                        let r = obs - m;
                        total += -LN_SQRT_2PI - 0.5 * m.ln() - r * r / (2.0 * m);
                        *d = -0.5 / m + r / m + r * r / (2.0 * m * m);
                    }
                }
            }
            c.margin = total - log_fact;
            for (g, v) in g_n.iter_mut().zip(self.loading.apply_transpose(&d_mu)) {
                *g += v;
            }

            let norm = half_cauchy_log_norm(pri.empty_location, pri.empty_scale);
            for &j in &self.empty {
                let u = (counts[j] - pri.empty_location) / pri.empty_scale;
                c.empty_cells += norm - (u * u).ln_1p();
                g_n[j] += -2.0 * u / (pri.empty_scale * (1.0 + u * u));
            }
        }

        // inclusion likelihood
        let eta = self.inclusion.linear_predictor(&x[lay.alpha()]);
        let p: Vec<f64> = eta.iter().map(|&e| inv_logit(e)).collect();
        let s: f64 = counts.iter().zip(&p).map(|(a, b)| a * b).sum();
        if !(s > 0.0) {
            return Components::infeasible();
        }
        let ln_ns = self.n_total.ln() - s.ln();
        let mut inc = -self.log_fact_counts;
        for j in 0..j_cells {
            let nj = self.counts[j];
            let lambda = self.n_total * counts[j] * p[j] / s;
            inc -= lambda;
            if nj > 0.0 {
                if counts[j] == 0.0 {
                    return Components::infeasible();
                }
                inc += nj * (ln_ns + counts[j].ln() + log_inv_logit(eta[j]));
                g_n[j] += nj / counts[j];
            }
            g_n[j] -= self.n_total * p[j] / s;
            g_eta[j] += (nj - lambda) * (1.0 - p[j]);
        }
        c.inclusion = inc;

        // total sample size, Poisson around the expected number of inclusions
        if self.config.sample_size_term {
            let n = self.n_total;
            c.sample_size = n * s.ln() - s - ln_gamma(n + 1.0);
            let k = n / s - 1.0;
            for j in 0..j_cells {
                g_n[j] += k * p[j];
                g_eta[j] += k * counts[j] * p[j] * (1.0 - p[j]);
            }
        }

        // outcome likelihood
        let mut g_log_sigma = 0.0;
        let mut g_log_sigma_theta = 0.0;
        if let Some(o) = &self.outcome {
            let sigma = lay.log_sigma.map(|i| x[i].exp()).unwrap_or(1.0);
            let mut total = 0.0;
            match o.family {
                OutcomeFamily::ReciprocalPropensity => {
                    let s2 = sigma * sigma;
                    let ln_sigma = sigma.ln();
                    for &j in &o.observed {
                        let CellStats { m, mean, ss, .. } = o.stats[j];
                        let pj = p[j];
                        let r = mean * pj - 1.0;
                        let q = ss * pj * pj + m * r * r;
                        total += -m * (LN_SQRT_2PI + ln_sigma) + m * log_inv_logit(eta[j])
                            - q / (2.0 * s2);
                        let dp = m / pj - (ss * pj + m * mean * r) / s2;
                        g_eta[j] += dp * pj * (1.0 - pj);
                        g_log_sigma += -m + q / s2;
                    }
                }
                family => {
                    let theta = self.theta(o, x);
                    let mut g_theta = vec![0.0; j_cells];
                    let s2 = sigma * sigma;
                    let ln_sigma = sigma.ln();
                    for &j in &o.observed {
                        let CellStats { m, sum, mean, ss } = o.stats[j];
                        let t = theta[j];
                        if family == OutcomeFamily::Continuous {
                            let q = ss + m * (mean - t) * (mean - t);
                            total += -m * (LN_SQRT_2PI + ln_sigma) - q / (2.0 * s2);
                            g_theta[j] = m * (mean - t) / s2;
                            g_log_sigma += -m + q / s2;
                        } else {
                            total += sum * t - m * softplus(t);
                            g_theta[j] = sum - m * inv_logit(t);
                        }
                    }
                    if let Some(g) = grad.as_deref_mut() {
                        o.design
                            .as_ref()
                            .expect("regression outcome has a design")
                            .accumulate_transpose(&g_theta, &mut g[lay.beta()]);
                        if let Some(i) = lay.log_sigma_theta {
                            let st = x[i].exp();
                            let z = &x[lay.z()];
                            for (k, gz) in g[lay.z()].iter_mut().enumerate() {
                                *gz += g_theta[k] * st;
                                g_log_sigma_theta += g_theta[k] * z[k] * st;
                            }
                        }
                    }
                }
            }
            c.outcome = total;
        }

        // coefficient and scale priors
        let sd = pri.coef_sd;
        let normal_const = -LN_SQRT_2PI - sd.ln();
        let mut pr = 0.0;
        for r in [lay.alpha(), lay.beta()] {
            for i in r {
                pr += normal_const - x[i] * x[i] / (2.0 * sd * sd);
                if let Some(g) = grad.as_deref_mut() {
                    g[i] -= x[i] / (sd * sd);
                }
            }
        }
        let half_const = LN_2 - LN_SQRT_2PI - pri.scale_sd.ln();
        let ss2 = pri.scale_sd * pri.scale_sd;
        for (idx, extra) in [
            (lay.log_sigma, g_log_sigma),
            (lay.log_sigma_theta, g_log_sigma_theta),
        ] {
            if let Some(i) = idx {
                let s = x[i].exp();
                pr += half_const - s * s / (2.0 * ss2) + x[i];
                if let Some(g) = grad.as_deref_mut() {
                    g[i] += extra - s * s / ss2 + 1.0;
                }
            }
        }
        for i in lay.z() {
            pr += -LN_SQRT_2PI - 0.5 * x[i] * x[i];
            if let Some(g) = grad.as_deref_mut() {
                g[i] -= x[i];
            }
        }
        // the projector ignores (I - P) v, so that component gets a unit normal
        let resid: Option<Vec<f64>> =
            pv.map(|pv| xc.iter().zip(pv.iter()).map(|(v, q)| v - q).collect());
        if let Some(r) = &resid {
            pr -= 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        }
        c.priors = pr;

        if self.config.method == Method::Soft {
            c.jacobian = xc.iter().sum();
        }

        if let Some(g) = grad {
            let gc = &mut g[lay.counts()];
            match &self.margin {
                MarginModel::Soft { .. } => {
                    for ((gi, &gn), &n) in gc.iter_mut().zip(&g_n).zip(&counts) {
                        *gi = gn * n + 1.0;
                    }
                }
                MarginModel::Basis { basis, .. } => {
                    let gt = basis.tr_mul(&DVector::from_column_slice(&g_n));
                    gc.copy_from_slice(gt.as_slice());
                }
                MarginModel::Projection { projector, .. } => {
                    let gv = projector * DVector::from_column_slice(&g_n);
                    let r = resid.as_ref().expect("projection residual");
                    for ((gi, &a), &b) in gc.iter_mut().zip(gv.iter()).zip(r) {
                        *gi = a - b;
                    }
                }
            }
            self.inclusion
                .accumulate_transpose(&g_eta, &mut g[lay.alpha()]);
        }
        c.finish()
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn build_layout(
    config: &ModelConfig,
    table: &CellTable,
    margin: &MarginModel,
    inclusion: &Design,
    outcome: Option<&OutcomeModel>,
) -> Layout {
    let mut names = Vec::new();
    let n_free = match margin {
        MarginModel::Soft { .. } => table.n_cells(),
        MarginModel::Basis { basis, .. } => basis.ncols(),
        MarginModel::Projection { .. } => table.n_cells(),
    };
    let prefix = match config.method {
        Method::Soft => "log_N",
        Method::Basis => "t",
        Method::Projection => "v",
    };
    for k in 0..n_free {
        names.push(format!("{prefix}[{k}]"));
    }
    let counts = 0..names.len();
    for n in inclusion.names() {
        names.push(format!("alpha[{n}]"));
    }
    let alpha = counts.end..names.len();
    let mut log_sigma = None;
    let mut log_sigma_theta = None;
    if let Some(o) = outcome {
        if let Some(d) = &o.design {
            for n in d.names() {
                names.push(format!("beta[{n}]"));
            }
        }
    }
    let beta = alpha.end..names.len();
    if let Some(o) = outcome {
        if o.family != OutcomeFamily::Binary {
            log_sigma = Some(names.len());
            names.push("log_sigma".into());
        }
        if o.hierarchical {
            log_sigma_theta = Some(names.len());
            names.push("log_sigma_theta".into());
        }
    }
    let z_start = names.len();
    if outcome.is_some_and(|o| o.hierarchical) {
        for k in 0..table.n_cells() {
            names.push(format!("z[{k}]"));
        }
    }
    Layout {
        method: config.method,
        counts,
        alpha,
        beta,
        log_sigma,
        log_sigma_theta,
        z: z_start..names.len(),
        names,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        log_lik_inclusion, log_lik_outcome, log_lik_sample_size, log_prior_empty_cells,
        log_prior_margins_soft, DesignSpec, OutcomeSpec, Priors,
    };
    use crate::table::RakingVariable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (CellTable, MarginSet, UnitOutcomes) {
        let vars = vec![
            RakingVariable::numbered("a", 3).unwrap(),
            RakingVariable::numbered("b", 2).unwrap(),
        ];
        // cell 4 (a=3, b=1) is empty
        let table = CellTable::from_counts(vars.clone(), vec![5, 3, 4, 6, 0, 2]).unwrap();
        let margins =
            MarginSet::one_way(&vars, vec![vec![300.0, 350.0, 150.0], vec![420.0, 380.0]]).unwrap();
        let mut cells = Vec::new();
        let mut y = Vec::new();
        for (j, &n) in table.counts().iter().enumerate() {
            for i in 0..n {
                cells.push(j);
                y.push(((i as usize + j) % 2) as f64);
            }
        }
        (table, margins, UnitOutcomes::new(cells, y).unwrap())
    }

    fn continuous(data: &UnitOutcomes) -> UnitOutcomes {
        let y = data
            .y
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 + v + 0.3 * (i % 3) as f64)
            .collect();
        UnitOutcomes::new(data.unit_cells.clone(), y).unwrap()
    }

    fn configs() -> Vec<(ModelConfig, bool)> {
        let mut out = Vec::new();
        for method in [Method::Soft, Method::Basis, Method::Projection] {
            out.push((ModelConfig::new(method), false));
            for (family, hierarchical) in [
                (OutcomeFamily::Binary, false),
                (OutcomeFamily::Binary, true),
                (OutcomeFamily::Continuous, true),
                (OutcomeFamily::ReciprocalPropensity, false),
            ] {
                let spec = OutcomeSpec {
                    family,
                    design: DesignSpec::default(),
                    hierarchical,
                };
                out.push((
                    ModelConfig::new(method).with_outcome(spec),
                    family != OutcomeFamily::Binary,
                ));
            }
        }
        let mut normal = ModelConfig::new(Method::Soft);
        normal.soft_family = SoftFamily::Normal;
        normal.inclusion = DesignSpec {
            interactions: vec![vec!["a".into(), "b".into()]],
        };
        out.push((normal, false));
        out
    }

    fn fd_check(model: &BayesRakeModel, x: &[f64]) {
        let g = model.grad_log_posterior(x).unwrap();
        for i in 0..x.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (model.log_posterior(&xp) - model.log_posterior(&xm)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1.0);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * scale,
                "{} {}: fd {fd} analytic {}",
                model.config().method,
                model.layout().names()[i],
                g[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (table, margins, bin) = fixture();
        let cont = continuous(&bin);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (config, use_cont) in configs() {
            let data = if use_cont { &cont } else { &bin };
            let model = BayesRakeModel::new(config, &table, &margins, Some(data)).unwrap();
            for _ in 0..10 {
                let x = model.initial_point(&mut rng).unwrap();
                fd_check(&model, &x);
            }
        }
    }

    #[test]
    fn log_density_is_sum_of_components() {
        let (table, margins, bin) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (config, _) in configs() {
            let cont = continuous(&bin);
            let data = match config.outcome.as_ref().map(|o| o.family) {
                Some(OutcomeFamily::Binary) => &bin,
                _ => &cont,
            };
            let model = BayesRakeModel::new(config, &table, &margins, Some(data)).unwrap();
            for _ in 0..5 {
                let x = model.initial_point(&mut rng).unwrap();
                let c = model.components(&x).unwrap();
                let sum = c.margin
                    + c.empty_cells
                    + c.inclusion
                    + c.sample_size
                    + c.outcome
                    + c.priors
                    + c.jacobian;
                assert_eq!(c.total, sum);
                assert_eq!(model.log_posterior(&x), c.total);
            }
        }
    }

    #[test]
    fn soft_components_match_standalone_operations() {
        let (table, margins, bin) = fixture();
        let spec = OutcomeSpec {
            family: OutcomeFamily::Binary,
            design: DesignSpec::default(),
            hierarchical: false,
        };
        let model = BayesRakeModel::new(
            ModelConfig::new(Method::Soft).with_outcome(spec),
            &table,
            &margins,
            Some(&bin),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = model.initial_point(&mut rng).unwrap();
        let c = model.components(&x).unwrap();
        let d = model.derived(&x);
        let tol = 1e-9;
        let margin =
            log_prior_margins_soft(&d.counts, &margins, model.loading(), SoftFamily::Poisson);
        assert!((c.margin - margin).abs() < tol);
        let empty = log_prior_empty_cells(table.empty_cells().map(|j| d.counts[j]), 10.0, 3.0);
        assert!((c.empty_cells - empty).abs() < tol);
        let inc = log_lik_inclusion(table.counts(), &d.counts, &d.propensity);
        assert!((c.inclusion - inc).abs() < tol);
        let size = log_lik_sample_size(table.counts(), &d.counts, &d.propensity);
        assert!((c.sample_size - size).abs() < tol);
        let theta = model
            .outcome_design()
            .unwrap()
            .linear_predictor(&x[model.layout().beta()]);
        let out = log_lik_outcome(OutcomeFamily::Binary, &theta, 1.0, &bin);
        assert!((c.outcome - out).abs() < tol);
        let phi: f64 = x[model.layout().counts()].iter().sum();
        assert_eq!(c.jacobian, phi);
    }

    #[test]
    fn two_by_two_end_to_end_oracle() {
        let vars = vec![
            RakingVariable::numbered("a", 2).unwrap(),
            RakingVariable::numbered("b", 2).unwrap(),
        ];
        let table = CellTable::from_counts(vars.clone(), vec![3, 0, 2, 5]).unwrap();
        let margins = MarginSet::one_way(&vars, vec![vec![60.0, 40.0], vec![70.0, 30.0]]).unwrap();
        let model =
            BayesRakeModel::new(ModelConfig::new(Method::Soft), &table, &margins, None).unwrap();
        let n_hat = [40.0, 21.0, 33.0, 9.0];
        let alpha = [-1.5, 0.4, -0.2];
        let mut x: Vec<f64> = n_hat.iter().map(|v: &f64| v.ln()).collect();
        x.extend(alpha);

        let lf = |k: f64| (1..=k as u64).map(|i| (i as f64).ln()).sum::<f64>();
        let pois = |k: f64, m: f64| k * m.ln() - m - lf(k);
        let mut oracle = 0.0;
        // margins: a = (61, 42), b = (73, 30)
        oracle += pois(60.0, 61.0) + pois(40.0, 42.0) + pois(70.0, 73.0) + pois(30.0, 30.0);
        // empty cell 1 under the truncated half-Cauchy
        let z = 0.5 + (10.0f64 / 3.0).atan() / std::f64::consts::PI;
        oracle += -(3.0 * std::f64::consts::PI * z * (1.0 + (11.0f64 / 3.0).powi(2))).ln();
        let p: Vec<f64> = [-1.5, -1.5 - 0.2, -1.5 + 0.4, -1.5 + 0.4 - 0.2]
            .iter()
            .map(|e: &f64| 1.0 / (1.0 + (-e).exp()))
            .collect();
        let s: f64 = n_hat.iter().zip(&p).map(|(a, b)| a * b).sum();
        for (j, &k) in [3.0, 0.0, 2.0, 5.0].iter().enumerate() {
            oracle += pois(k, 10.0 * n_hat[j] * p[j] / s);
        }
        oracle += pois(10.0, s);
        for a in alpha {
            oracle += -0.5 * (2.0 * std::f64::consts::PI * 25.0).ln() - a * a / 50.0;
        }
        oracle += n_hat.iter().map(|v| v.ln()).sum::<f64>();
        assert!((model.log_posterior(&x) - oracle).abs() < 1e-9);
    }

    #[test]
    fn jacobian_gradient_is_one() {
        let (table, margins, _) = fixture();
        let model =
            BayesRakeModel::new(ModelConfig::new(Method::Soft), &table, &margins, None).unwrap();
        let x = model
            .initial_point(&mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let full = model.grad_log_posterior(&x).unwrap();
        // remove every other term: what remains per phi_j is N_j * dlogp/dN_j
        let d = model.derived(&x);
        let mut g_n = vec![0.0; 6];
        for j in 0..6 {
            let mut xp = x.clone();
            let h = 1e-5 * d.counts[j];
            xp[j] = (d.counts[j] + h).ln();
            let mut xm = x.clone();
            xm[j] = (d.counts[j] - h).ln();
            let jac = xp[j] - xm[j];
            g_n[j] = (model.log_posterior(&xp) - model.log_posterior(&xm) - jac) / (2.0 * h);
        }
        for j in 0..6 {
            let rest = g_n[j] * d.counts[j];
            assert!(
                (full[j] - rest - 1.0).abs() < 1e-6 * rest.abs().max(1.0),
                "{} {}",
                full[j],
                rest
            );
        }
    }

    #[test]
    fn subspace_infeasible_point_is_neg_inf() {
        let (table, margins, _) = fixture();
        let model =
            BayesRakeModel::new(ModelConfig::new(Method::Basis), &table, &margins, None).unwrap();
        let mut x = vec![0.0; model.dim()];
        x[0] = 1e6;
        assert_eq!(model.log_posterior(&x), f64::NEG_INFINITY);
        assert!(matches!(
            model.grad_log_posterior(&x),
            Err(Error::NonFiniteDensity)
        ));
        x[0] = 0.0;
        assert!(model.log_posterior(&x).is_finite());
        let d = model.derived(&x);
        let fit = model.loading().apply(&d.counts);
        for (a, b) in fit.iter().zip(margins.stacked()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn inconsistent_margins_fail_initialization() {
        let (table, _, _) = fixture();
        let bad = MarginSet::one_way(
            table.variables(),
            vec![vec![300.0, 350.0, 150.0], vec![420.0, 500.0]],
        )
        .unwrap();
        for method in [Method::Basis, Method::Projection] {
            let err =
                BayesRakeModel::new(ModelConfig::new(method), &table, &bad, None).unwrap_err();
            assert!(matches!(err, Error::Initialization { .. }), "{err}");
        }
        // the soft method still has an interior
        let model =
            BayesRakeModel::new(ModelConfig::new(Method::Soft), &table, &bad, None).unwrap();
        assert!(model
            .initial_point(&mut ChaCha8Rng::seed_from_u64(0))
            .is_ok());
    }

    #[test]
    fn layout_names() {
        let (table, margins, bin) = fixture();
        let spec = OutcomeSpec {
            family: OutcomeFamily::Continuous,
            design: DesignSpec::default(),
            hierarchical: true,
        };
        let model = BayesRakeModel::new(
            ModelConfig::new(Method::Basis).with_outcome(spec),
            &table,
            &margins,
            Some(&continuous(&bin)),
        )
        .unwrap();
        let lay = model.layout();
        assert_eq!(model.d_null(), Some(2));
        assert_eq!(lay.names()[0], "t[0]");
        assert_eq!(lay.names()[lay.alpha().start], "alpha[(Intercept)]");
        assert_eq!(lay.names()[lay.beta().start + 1], "beta[a=2]");
        assert_eq!(lay.index_of("log_sigma"), lay.log_sigma());
        assert_eq!(lay.z().len(), 6);
        assert_eq!(lay.dim(), 2 + 4 + 4 + 2 + 6);
        let _ = Priors::default();
    }
}
