use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use super::{MethodOutcome, Population, ReplicateResult, Scenario, SimMethod};
use crate::error::{Error, Result};
use crate::estimate::{Domain, EstimateSummary};

/// Repeated-sampling behaviour of one estimator for one estimand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimandMetrics {
    pub domain: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Root mean squared error with divisor equal to the number of estimates.
    pub rmse: f64,
    pub mean_se: f64,
    pub mean_ci_length: f64,
    pub coverage: f64,
    /// Replicates that produced an estimate.
    pub n: usize,
    /// Replicates where the estimand was not estimable.
    pub missing: usize,
}

/// Metrics over the available estimates; `missing` counts the `None`s.
pub fn metrics(domain: &str, estimates: &[Option<EstimateSummary>], truth: f64) -> EstimandMetrics {
    let got: Vec<&EstimateSummary> = estimates.iter().flatten().collect();
    let n = got.len();
    let avg = |f: &dyn Fn(&EstimateSummary) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            got.iter().map(|e| f(e)).sum::<f64>() / n as f64
        }
    };
    let mean_estimate = avg(&|e| e.mean);
    EstimandMetrics {
        domain: domain.to_string(),
        truth,
        mean_estimate,
        bias: mean_estimate - truth,
        rmse: avg(&|e| (e.mean - truth).powi(2)).sqrt(),
        mean_se: avg(&|e| e.se),
        mean_ci_length: avg(&|e| e.interval_length()),
        coverage: avg(&|e| e.covers(truth) as u8 as f64),
        n,
        missing: estimates.len() - n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: SimMethod,
    /// Replicates where fitting failed outright.
    pub failures: usize,
    /// Replicates whose sampler diagnostics flagged a coordinate. Their
    /// estimates are still included.
    pub flagged: usize,
    /// Distinct failure messages with their counts.
    pub failure_reasons: Vec<(String, usize)>,
    pub estimands: Vec<EstimandMetrics>,
}

impl MethodSummary {
    fn mean_of(&self, f: impl Fn(&EstimandMetrics) -> f64) -> f64 {
        let v: Vec<f64> = self
            .estimands
            .iter()
            .map(f)
            .filter(|x| x.is_finite())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_abs_bias(&self) -> f64 {
        self.mean_of(|m| m.bias.abs())
    }

    pub fn mean_rmse(&self) -> f64 {
        self.mean_of(|m| m.rmse)
    }

    pub fn mean_coverage(&self) -> f64 {
        self.mean_of(|m| m.coverage)
    }

    pub fn mean_ci_length(&self) -> f64 {
        self.mean_of(|m| m.mean_ci_length)
    }

    pub fn estimand(&self, domain: &str) -> Option<&EstimandMetrics> {
        self.estimands.iter().find(|m| m.domain == domain)
    }
}

/// Aggregated output of a replication study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub scenario: String,
    pub replicates: usize,
    pub population_size: usize,
    pub expected_sample_size: f64,
    pub mean_sample_size: f64,
    pub mean_empty_cells: f64,
    pub n_cells: usize,
    /// Replicates with an empty sample.
    pub skipped: usize,
    pub methods: Vec<MethodSummary>,
    pub notes: Vec<String>,
}

impl ReplicationReport {
    pub(super) fn aggregate(
        scenario: &Scenario,
        population: &Population,
        domains: &[Domain],
        results: &[ReplicateResult],
    ) -> Self {
        let fitted: Vec<&ReplicateResult> = results.iter().filter(|r| !r.skipped).collect();
        let nf = fitted.len().max(1) as f64;
        let truths: Vec<f64> = domains
            .iter()
            .map(|d| population.domain_mean(d).unwrap_or(f64::NAN))
            .collect();
        let methods = scenario
            .methods
            .iter()
            .enumerate()
            .map(|(k, &method)| {
                let mut failures = 0;
                let mut flagged = 0;
                let mut reasons: Vec<(String, usize)> = Vec::new();
                let mut per_domain: Vec<Vec<Option<EstimateSummary>>> =
                    vec![Vec::with_capacity(fitted.len()); domains.len()];
                for r in &fitted {
                    match &r.outcomes[k] {
                        MethodOutcome::Estimates { values, flagged: f } => {
                            flagged += *f as usize;
                            for (slot, v) in per_domain.iter_mut().zip(values) {
                                slot.push(v.clone());
                            }
                        }
                        MethodOutcome::Failed(msg) => {
                            failures += 1;
                            match reasons.iter_mut().find(|(m, _)| m == msg) {
                                Some((_, c)) => *c += 1,
                                None => reasons.push((msg.clone(), 1)),
                            }
                        }
                    }
                }
                let estimands = domains
                    .iter()
                    .zip(&per_domain)
                    .zip(&truths)
                    .map(|((d, est), &t)| metrics(d.name(), est, t))
                    .collect();
                MethodSummary {
                    method,
                    failures,
                    flagged,
                    failure_reasons: reasons,
                    estimands,
                }
            })
            .collect();
        let mut notes = Vec::new();
        if scenario.methods.contains(&SimMethod::Ipf) {
            notes.push(
                "ipf intervals: estimate +/- 1.96 linearization SE treating raked weights as fixed"
                    .to_string(),
            );
        }
        if scenario.methods.iter().any(|m| m.bayes().is_some()) {
            notes.push(format!(
                "bayes intervals: 2.5% and 97.5% posterior quantiles; {} chains x {} draws after {} warmup",
                scenario.sampler.chains, scenario.sampler.iters, scenario.sampler.warmup
            ));
        }
        Self {
            scenario: scenario.name.clone(),
            replicates: results.len(),
            population_size: population.size(),
            expected_sample_size: population.expected_sample_size(),
            mean_sample_size: fitted.iter().map(|r| r.sample_size as f64).sum::<f64>() / nf,
            mean_empty_cells: fitted.iter().map(|r| r.empty_cells as f64).sum::<f64>() / nf,
            n_cells: population.table.n_cells(),
            skipped: results.len() - fitted.len(),
            methods,
            notes,
        }
    }

    pub fn method(&self, method: SimMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// One row per method and estimand.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::InvalidInput(format!("writing report: {e}"));
        w.write_record([
            "method",
            "domain",
            "truth",
            "mean",
            "bias",
            "rmse",
            "se",
            "ci_length",
            "coverage",
            "n",
            "missing",
        ])
        .map_err(err)?;
        for m in &self.methods {
            for e in &m.estimands {
                w.write_record([
                    m.method.to_string(),
                    e.domain.clone(),
                    e.truth.to_string(),
                    e.mean_estimate.to_string(),
                    e.bias.to_string(),
                    e.rmse.to_string(),
                    e.mean_se.to_string(),
                    e.mean_ci_length.to_string(),
                    e.coverage.to_string(),
                    e.n.to_string(),
                    e.missing.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush()
            .map_err(|e| Error::InvalidInput(format!("writing report: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table with one block per method.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {}: {} replicates, population {}, mean sample {:.1}, mean empty cells {:.1} of {}",
            self.scenario,
            self.replicates,
            self.population_size,
            self.mean_sample_size,
            self.mean_empty_cells,
            self.n_cells
        );
        if self.skipped > 0 {
            let _ = writeln!(s, "{} replicates skipped (empty sample)", self.skipped);
        }
        let width = self
            .methods
            .iter()
            .flat_map(|m| m.estimands.iter().map(|e| e.domain.len()))
            .max()
            .unwrap_or(6)
            .max(6);
        for m in &self.methods {
            let _ = writeln!(
                s,
                "\n[{}] failures {}, flagged {}",
                m.method, m.failures, m.flagged
            );
            for (msg, c) in &m.failure_reasons {
                let _ = writeln!(s, "  {c} x {msg}");
            }
            let _ = writeln!(
                s,
                "{:<width$} {:>9} {:>9} {:>9} {:>9} {:>9} {:>14} {:>9}",
                "domain", "truth", "mean", "bias", "rmse", "se", "95% CI length", "coverage"
            );
            for e in &m.estimands {
                let _ = writeln!(
                    s,
                    "{:<width$} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>14.4} {:>9.3}",
                    e.domain,
                    e.truth,
                    e.mean_estimate,
                    e.bias,
                    e.rmse,
                    e.mean_se,
                    e.mean_ci_length,
                    e.coverage
                );
            }
            let _ = writeln!(
                s,
                "{:<width$} {:>9} {:>9} {:>9.4} {:>9.4} {:>9} {:>14.4} {:>9.3}",
                "average",
                "",
                "",
                m.mean_abs_bias(),
                m.mean_rmse(),
                "",
                m.mean_ci_length(),
                m.mean_coverage()
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "\nnote: {n}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(mean: f64, half: f64) -> Option<EstimateSummary> {
        Some(EstimateSummary {
            domain: "d".into(),
            mean,
            se: half / 2.0,
            lower: mean - half,
            upper: mean + half,
            n_draws: 1,
            n_missing: 0,
        })
    }

    #[test]
    fn symmetric_estimates() {
        let m = metrics("d", &[est(1.0, 0.5), est(3.0, 0.5)], 2.0);
        assert_eq!(m.bias, 0.0);
        assert_eq!(m.rmse, 1.0);
        assert_eq!(m.coverage, 0.0);
        assert_eq!(m.mean_ci_length, 1.0);
        assert_eq!(m.n, 2);
    }

    #[test]
    fn rmse_decomposes() {
        let xs = [0.3, 1.7, 2.2, -0.4, 5.0, 1.1];
        let e: Vec<_> = xs.iter().map(|&x| est(x, 1.0)).collect();
        let m = metrics("d", &e, 0.9);
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((m.rmse.powi(2) - (m.bias.powi(2) + var)).abs() < 1e-12);
    }

    #[test]
    fn coverage_counts_endpoints_and_skips_missing() {
        let e = [est(0.0, 1.0), est(2.0, 1.0), None, est(5.0, 1.0)];
        let m = metrics("d", &e, 1.0);
        assert_eq!(m.n, 3);
        assert_eq!(m.missing, 1);
        assert!((m.coverage - 2.0 / 3.0).abs() < 1e-15);
        let none = metrics("d", &[None, None], 1.0);
        assert!(none.bias.is_nan());
        assert_eq!(none.missing, 2);
    }
}
