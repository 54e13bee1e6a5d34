//! Synthetic populations, repeated sampling and frequentist calibration of
//! raking against the Bayes-raking methods.

mod report;
pub mod scenarios;

pub use report::{metrics, EstimandMetrics, MethodSummary, ReplicationReport};

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_report, ipf_estimate, Domain, EstimateSummary};
use crate::ipf::{ipf_rake, rake_weights, IpfOptions};
use crate::model::{
    inv_logit, BayesRakeModel, Design, DesignSpec, Method, ModelConfig, OutcomeFamily, OutcomeSpec,
    Priors, SoftFamily, UnitOutcomes,
};
use crate::sampler::{diagnostics, sample_posterior, SamplerConfig};
use crate::table::{CellTable, MarginSet, RakingVariable};

/// One categorical covariate with its level probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub probs: Vec<f64>,
}

/// How covariates are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariates {
    /// Independent variables.
    Independent { variables: Vec<VariableSpec> },
    /// A joint distribution over cells (last variable fastest); the
    /// variables' own `probs` are ignored.
    Joint {
        variables: Vec<VariableSpec>,
        cell_probs: Vec<f64>,
    },
}

impl Covariates {
    fn variables(&self) -> &[VariableSpec] {
        match self {
            Covariates::Independent { variables } | Covariates::Joint { variables, .. } => {
                variables
            }
        }
    }
}

/// Regression coefficients by design column name, e.g. `"(Intercept)"`,
/// `"age=65+"` or `"age:pov=65+:low"`. Unnamed columns are 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    #[serde(default)]
    pub interactions: Vec<Vec<String>>,
    pub values: BTreeMap<String, f64>,
}

impl Coefficients {
    pub fn design_spec(&self) -> DesignSpec {
        DesignSpec {
            interactions: self.interactions.clone(),
        }
    }

    /// Coefficient vector aligned with `design`.
    pub fn vector(&self, design: &Design) -> Result<Vec<f64>> {
        let mut v = vec![0.0; design.n_coefs()];
        for (name, &value) in &self.values {
            let c = design.column(name).ok_or_else(|| {
                Error::Config(format!("coefficient `{name}` matches no design column"))
            })?;
            v[c] = value;
        }
        Ok(v)
    }
}

/// Outcome generating rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeRule {
    /// `logit Pr(y = 1) = X beta`.
    Logistic { coefs: Coefficients },
    /// `y = 1/p + e`, `e ~ N(0, (noise_sd / p)^2)`.
    ReciprocalPropensity { noise_sd: f64 },
}

impl OutcomeRule {
    pub fn family(&self) -> OutcomeFamily {
        match self {
            OutcomeRule::Logistic { .. } => OutcomeFamily::Binary,
            OutcomeRule::ReciprocalPropensity { .. } => OutcomeFamily::ReciprocalPropensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub covariates: Covariates,
    pub size: usize,
    pub inclusion: Coefficients,
    pub outcome: OutcomeRule,
    /// Margin terms treated as known, each a list of variable names.
    pub margins: Vec<Vec<String>>,
    pub seed: u64,
}

/// A finite population with unit-level covariate cells and outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub table: CellTable,
    pub unit_cells: Vec<usize>,
    pub y: Vec<f64>,
    /// Inclusion probability of each cell.
    pub propensity: Vec<f64>,
    pub margins: MarginSet,
}

impl Population {
    pub fn size(&self) -> usize {
        self.y.len()
    }

    /// Finite-population mean of `y` over `domain`; `None` if no unit is in it.
    pub fn domain_mean(&self, domain: &Domain) -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for (&j, &y) in self.unit_cells.iter().zip(&self.y) {
            if domain.contains(j) {
                s += y;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    }

    pub fn expected_sample_size(&self) -> f64 {
        self.unit_cells.iter().map(|&j| self.propensity[j]).sum()
    }
}

/// A realized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub table: CellTable,
    pub units: Vec<usize>,
    pub outcomes: UnitOutcomes,
}

fn normalized(probs: &[f64], what: &str) -> Result<Vec<f64>> {
    let s: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || !(s > 0.0) {
        return Err(Error::Config(format!(
            "{what}: probabilities must be nonnegative with positive sum"
        )));
    }
    Ok(probs.iter().map(|p| p / s).collect())
}

/// Draws covariates, inclusion probabilities and outcomes.
pub fn generate_population(spec: &PopulationSpec) -> Result<Population> {
    if spec.size == 0 {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    let specs = spec.covariates.variables();
    let variables: Vec<RakingVariable> = specs
        .iter()
        .map(|v| RakingVariable::new(v.name.clone(), v.levels.clone()))
        .collect::<Result<_>>()?;
    let shell = CellTable::empty(variables.clone())?;
    let j = shell.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let unit_cells: Vec<usize> = match &spec.covariates {
        Covariates::Independent { variables: vs } => {
            let mut dists = Vec::with_capacity(vs.len());
            for v in vs {
                if v.probs.len() != v.levels.len() {
                    return Err(Error::DimensionMismatch {
                        what: "level probabilities",
                        expected: v.levels.len(),
                        got: v.probs.len(),
                    });
                }
                let p = normalized(&v.probs, &v.name)?;
                dists.push(WeightedIndex::new(&p).map_err(|e| Error::Config(e.to_string()))?);
            }
            let mut levels = vec![0; vs.len()];
            (0..spec.size)
                .map(|_| {
                    for (l, d) in levels.iter_mut().zip(&dists) {
                        *l = d.sample(&mut rng);
                    }
                    shell.cell_index(&levels)
                })
                .collect::<Result<_>>()?
        }
        Covariates::Joint { cell_probs, .. } => {
            if cell_probs.len() != j {
                return Err(Error::DimensionMismatch {
                    what: "joint cell probabilities",
                    expected: j,
                    got: cell_probs.len(),
                });
            }
            let p = normalized(cell_probs, "joint table")?;
            let d = WeightedIndex::new(&p).map_err(|e| Error::Config(e.to_string()))?;
            (0..spec.size).map(|_| d.sample(&mut rng)).collect()
        }
    };
    let mut counts = vec![0u64; j];
    for &c in &unit_cells {
        counts[c] += 1;
    }
    let table = shell.with_counts(counts)?;

    let inc_design = Design::from_spec(&table, &spec.inclusion.design_spec())?;
    let alpha = spec.inclusion.vector(&inc_design)?;
    let propensity: Vec<f64> = inc_design
        .linear_predictor(&alpha)
        .into_iter()
        .map(inv_logit)
        .collect();

    let y: Vec<f64> = match &spec.outcome {
        OutcomeRule::Logistic { coefs } => {
            let d = Design::from_spec(&table, &coefs.design_spec())?;
            let beta = coefs.vector(&d)?;
            let pr: Vec<f64> = d
                .linear_predictor(&beta)
                .into_iter()
                .map(inv_logit)
                .collect();
            unit_cells
                .iter()
                .map(|&c| (rng.random::<f64>() < pr[c]) as u8 as f64)
                .collect()
        }
        OutcomeRule::ReciprocalPropensity { noise_sd } => unit_cells
            .iter()
            .map(|&c| {
                let e: f64 = rng.sample(StandardNormal);
                (1.0 + noise_sd * e) / propensity[c]
            })
            .collect(),
    };

    let mut terms = Vec::with_capacity(spec.margins.len());
    for names in &spec.margins {
        let mut idx = Vec::with_capacity(names.len());
        for n in names {
            idx.push(
                table
                    .variable_index(n)
                    .ok_or_else(|| Error::UnknownVariable(n.clone()))?,
            );
        }
        idx.sort_unstable();
        terms.push(idx);
    }
    let margins = MarginSet::from_cell_counts(&variables, &table.counts_f64(), &terms)?;
    Ok(Population {
        table,
        unit_cells,
        y,
        propensity,
        margins,
    })
}

/// Independent Bernoulli inclusion of every unit; `None` when nobody is
/// sampled.
pub fn draw_sample<R: Rng + ?Sized>(
    population: &Population,
    rng: &mut R,
) -> Result<Option<Sample>> {
    let mut units = Vec::new();
    for (i, &c) in population.unit_cells.iter().enumerate() {
        if rng.random::<f64>() < population.propensity[c] {
            units.push(i);
        }
    }
    if units.is_empty() {
        return Ok(None);
    }
    let cells: Vec<usize> = units.iter().map(|&i| population.unit_cells[i]).collect();
    let y: Vec<f64> = units.iter().map(|&i| population.y[i]).collect();
    let mut counts = vec![0u64; population.table.n_cells()];
    for &c in &cells {
        counts[c] += 1;
    }
    Ok(Some(Sample {
        table: population.table.with_counts(counts)?,
        units,
        outcomes: UnitOutcomes::new(cells, y)?,
    }))
}

/// An estimation method compared in a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMethod {
    Ipf,
    Soft,
    Basis,
    Projection,
}

impl SimMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMethod::Ipf => "ipf",
            SimMethod::Soft => "soft",
            SimMethod::Basis => "basis",
            SimMethod::Projection => "projection",
        }
    }

    fn bayes(self) -> Option<Method> {
        match self {
            SimMethod::Ipf => None,
            SimMethod::Soft => Some(Method::Soft),
            SimMethod::Basis => Some(Method::Basis),
            SimMethod::Projection => Some(Method::Projection),
        }
    }
}

impl std::fmt::Display for SimMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which domain means to estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimandSpec {
    pub overall: bool,
    /// Variables whose levels each define a domain.
    pub margins: Vec<String>,
    /// Variable groups whose level combinations each define a domain.
    pub interactions: Vec<Vec<String>>,
}

impl EstimandSpec {
    pub fn domains(&self, table: &CellTable) -> Result<Vec<Domain>> {
        let mut out = Vec::new();
        if self.overall {
            out.push(Domain::all(table));
        }
        for v in &self.margins {
            out.extend(Domain::margin_levels(table, v)?);
        }
        for g in &self.interactions {
            let names: Vec<&str> = g.iter().map(String::as_str).collect();
            out.extend(Domain::interaction_levels(table, &names)?);
        }
        Ok(out)
    }
}

/// Fitted-model settings shared by the Bayes methods of a scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSpec {
    pub soft_family: SoftFamily,
    /// Inclusion-model interactions; `None` reuses the generating ones.
    pub inclusion: Option<DesignSpec>,
    /// Outcome-model interactions; `None` reuses the generating ones.
    pub outcome: Option<DesignSpec>,
    pub priors: Priors,
}

/// Everything needed to run a replication study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub population: PopulationSpec,
    pub methods: Vec<SimMethod>,
    pub replicates: usize,
    pub estimands: EstimandSpec,
    #[serde(default)]
    pub fit: FitSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub ipf: IpfOptions,
    pub seed: u64,
}

impl Scenario {
    pub fn model_config(&self, method: Method) -> ModelConfig {
        let outcome_design = match &self.population.outcome {
            OutcomeRule::Logistic { coefs } => coefs.design_spec(),
            OutcomeRule::ReciprocalPropensity { .. } => DesignSpec::default(),
        };
        ModelConfig {
            method,
            soft_family: self.fit.soft_family,
            inclusion: self
                .fit
                .inclusion
                .clone()
                .unwrap_or_else(|| self.population.inclusion.design_spec()),
            outcome: Some(OutcomeSpec {
                family: self.population.outcome.family(),
                design: self.fit.outcome.clone().unwrap_or(outcome_design),
                hierarchical: false,
            }),
            priors: self.fit.priors.clone(),
            sample_size_term: true,
        }
    }
}

/// Result of one method on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    /// One entry per estimand; `None` where the estimand was not estimable.
    Estimates {
        values: Vec<Option<EstimateSummary>>,
        /// Sampler diagnostics flagged at least one coordinate.
        flagged: bool,
    },
    Failed(String),
}

/// All methods on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub index: usize,
    pub sample_size: usize,
    pub empty_cells: usize,
    /// Empty sample; nothing was fitted.
    pub skipped: bool,
    pub outcomes: Vec<MethodOutcome>,
}

/// Independent RNG stream for replicate `index`.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(index as u64);
    rng
}

/// Fits every method of `scenario` to one sample.
pub fn fit_methods(
    scenario: &Scenario,
    population: &Population,
    sample: &Sample,
    domains: &[Domain],
    sampler_seed: u64,
) -> Vec<MethodOutcome> {
    scenario
        .methods
        .iter()
        .map(
            |&m| match fit_one(scenario, population, sample, domains, m, sampler_seed) {
                Ok(o) => o,
                Err(e) => MethodOutcome::Failed(e.to_string()),
            },
        )
        .collect()
}

fn fit_one(
    scenario: &Scenario,
    population: &Population,
    sample: &Sample,
    domains: &[Domain],
    method: SimMethod,
    sampler_seed: u64,
) -> Result<MethodOutcome> {
    match method.bayes() {
        None => {
            let fit = ipf_rake(&sample.table, &population.margins, &scenario.ipf)?;
            let w = rake_weights(&fit, &sample.table)?;
            let values = domains
                .iter()
                .map(|d| ipf_estimate(&w, &sample.outcomes.unit_cells, &sample.outcomes.y, d))
                .collect();
            Ok(MethodOutcome::Estimates {
                values,
                flagged: false,
            })
        }
        Some(m) => {
            let model = BayesRakeModel::new(
                scenario.model_config(m),
                &sample.table,
                &population.margins,
                Some(&sample.outcomes),
            )?;
            let config = SamplerConfig {
                seed: sampler_seed,
                ..scenario.sampler.clone()
            };
            let draws = sample_posterior(&model, &config)?;
            let flagged = !diagnostics(&draws, config.max_depth).is_clean();
            let report = estimate_report(&draws, domains)?;
            let values = report
                .estimates
                .into_iter()
                .map(|e| (e.n_draws > 0).then_some(e))
                .collect();
            Ok(MethodOutcome::Estimates { values, flagged })
        }
    }
}

/// Runs one replicate: draw a sample, fit every method.
pub fn run_replicate(
    scenario: &Scenario,
    population: &Population,
    domains: &[Domain],
    index: usize,
) -> Result<ReplicateResult> {
    let mut rng = replicate_rng(scenario.seed, index);
    let sampler_seed = rng.next_u64();
    let Some(sample) = draw_sample(population, &mut rng)? else {
        return Ok(ReplicateResult {
            index,
            sample_size: 0,
            empty_cells: population.table.n_cells(),
            skipped: true,
            outcomes: Vec::new(),
        });
    };
    Ok(ReplicateResult {
        index,
        sample_size: sample.units.len(),
        empty_cells: sample.table.empty_cells().count(),
        skipped: false,
        outcomes: fit_methods(scenario, population, &sample, domains, sampler_seed),
    })
}

/// Generates the population, runs all replicates (in parallel) and
/// aggregates calibration metrics.
pub fn run_replications(scenario: &Scenario) -> Result<ReplicationReport> {
    if scenario.replicates < 2 {
        return Err(Error::Config("at least two replicates are required".into()));
    }
    if scenario.methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    scenario.sampler.validate()?;
    let population = generate_population(&scenario.population)?;
    let domains = scenario.estimands.domains(&population.table)?;
    if domains.is_empty() {
        return Err(Error::Config("no estimands requested".into()));
    }
    let results = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, &population, &domains, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationReport::aggregate(
        scenario,
        &population,
        &domains,
        &results,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_spec(size: usize, alpha0: f64) -> PopulationSpec {
        PopulationSpec {
            covariates: Covariates::Independent {
                variables: vec![
                    VariableSpec {
                        name: "a".into(),
                        levels: vec!["x".into(), "y".into()],
                        probs: vec![0.5, 0.5],
                    },
                    VariableSpec {
                        name: "b".into(),
                        levels: vec!["u".into(), "v".into(), "w".into()],
                        probs: vec![1.0, 1.0, 2.0],
                    },
                ],
            },
            size,
            inclusion: Coefficients {
                interactions: vec![],
                values: [("(Intercept)".to_string(), alpha0)].into(),
            },
            outcome: OutcomeRule::Logistic {
                coefs: Coefficients::default(),
            },
            margins: vec![vec!["a".into()], vec!["b".into()]],
            seed: 1,
        }
    }

    #[test]
    fn symmetric_binary_population() {
        let n = 200_000;
        let pop = generate_population(&binary_spec(n, 0.0)).unwrap();
        let all = Domain::all(&pop.table);
        let mean = pop.domain_mean(&all).unwrap();
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        assert!((pop.expected_sample_size() - n as f64 / 2.0).abs() < 1e-6);
        assert_eq!(pop.margins.total(), n as f64);
        let b = &pop.margins.terms()[1];
        assert!((b.counts()[2] / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn reciprocal_outcome_moments() {
        let mut spec = binary_spec(200_000, (0.1f64 / 0.9).ln());
        spec.outcome = OutcomeRule::ReciprocalPropensity { noise_sd: 1.0 };
        let pop = generate_population(&spec).unwrap();
        let n = pop.size() as f64;
        let mean = pop.y.iter().sum::<f64>() / n;
        let sd = (pop.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 10.0).abs() < 0.1, "{mean}");
        assert!((sd - 10.0).abs() < 0.1, "{sd}");
    }

    #[test]
    fn certain_and_impossible_inclusion() {
        let pop = generate_population(&binary_spec(500, 50.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = draw_sample(&pop, &mut rng).unwrap().unwrap();
        assert_eq!(s.units.len(), 500);
        assert_eq!(s.table.counts(), pop.table.counts());
        let pop = generate_population(&binary_spec(500, -800.0)).unwrap();
        assert!(draw_sample(&pop, &mut rng).unwrap().is_none());
    }

    #[test]
    fn sample_size_concentrates() {
        let pop = generate_population(&binary_spec(5000, -1.0)).unwrap();
        let mu = pop.expected_sample_size();
        let sd = pop
            .unit_cells
            .iter()
            .map(|&c| pop.propensity[c] * (1.0 - pop.propensity[c]))
            .sum::<f64>()
            .sqrt();
        for r in 0..200 {
            let mut rng = replicate_rng(3, r);
            let n = draw_sample(&pop, &mut rng).unwrap().unwrap().units.len() as f64;
            assert!((n - mu).abs() <= 4.0 * sd);
        }
    }

    #[test]
    fn unknown_coefficient_is_rejected() {
        let mut spec = binary_spec(10, 0.0);
        spec.inclusion.values.insert("a=z".into(), 1.0);
        assert!(matches!(generate_population(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn joint_covariates_follow_cell_probs() {
        let mut spec = binary_spec(60_000, 0.0);
        let variables = spec.covariates.variables().to_vec();
        spec.covariates = Covariates::Joint {
            variables,
            cell_probs: vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0],
        };
        let pop = generate_population(&spec).unwrap();
        let c = pop.table.counts();
        assert_eq!(c[1] + c[2] + c[3] + c[4], 0);
        assert!((c[5] as f64 / 60_000.0 - 2.0 / 3.0).abs() < 0.01);
    }
}
