//! MRP estimates of overall and domain means from posterior draws, and the
//! matching design-based estimates from raking weights.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipf::{weighted_domain_mean, RakeWeights};
use crate::sampler::{DrawMatrix, PosteriorDraws};
use crate::table::CellTable;

/// Normal quantile for central 95% intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// A named set of cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    name: String,
    cells: Vec<usize>,
}

impl Domain {
    pub fn new(name: impl Into<String>, mut cells: Vec<usize>, n_cells: usize) -> Result<Self> {
        let name = name.into();
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(Error::EmptyDomain(name));
        }
        if let Some(&c) = cells.iter().find(|&&c| c >= n_cells) {
            return Err(Error::InvalidInput(format!(
                "domain {name}: cell {c} out of range for {n_cells} cells"
            )));
        }
        Ok(Self { name, cells })
    }

    /// Every cell of the table.
    pub fn all(table: &CellTable) -> Self {
        Self {
            name: "overall".into(),
            cells: (0..table.n_cells()).collect(),
        }
    }

    /// Cells matching every `(variable, level)` pair, named like
    /// `age:pov=18-34:low`.
    pub fn from_levels<S: AsRef<str>>(table: &CellTable, pairs: &[(S, S)]) -> Result<Self> {
        if pairs.is_empty() {
            return Ok(Self::all(table));
        }
        let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());
        for (var, level) in pairs {
            let (var, level) = (var.as_ref(), level.as_ref());
            let k = table
                .variable_index(var)
                .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
            let l = table.variables()[k]
                .level_index(level)
                .ok_or_else(|| Error::UnknownLevel {
                    row: 0,
                    variable: var.to_string(),
                    label: level.to_string(),
                })?;
            fixed.push((k, l));
        }
        fixed.sort_unstable();
        fixed.dedup();
        let vars = table.variables();
        let name = format!(
            "{}={}",
            fixed
                .iter()
                .map(|&(k, _)| vars[k].name())
                .collect::<Vec<_>>()
                .join(":"),
            fixed
                .iter()
                .map(|&(k, l)| vars[k].levels()[l].as_str())
                .collect::<Vec<_>>()
                .join(":")
        );
        let cells = (0..table.n_cells())
            .filter(|&j| fixed.iter().all(|&(k, l)| table.level_of(j, k) == l))
            .collect();
        Self::new(name, cells, table.n_cells())
    }

    /// One domain per level of `variable`.
    pub fn margin_levels(table: &CellTable, variable: &str) -> Result<Vec<Self>> {
        Self::interaction_levels(table, &[variable])
    }

    /// One domain per level combination of `variables`, last varying
    /// fastest.
    pub fn interaction_levels(table: &CellTable, variables: &[&str]) -> Result<Vec<Self>> {
        let mut idx = Vec::with_capacity(variables.len());
        for v in variables {
            idx.push(
                table
                    .variable_index(v)
                    .ok_or_else(|| Error::UnknownVariable(v.to_string()))?,
            );
        }
        let vars = table.variables();
        let dims: Vec<usize> = idx.iter().map(|&k| vars[k].n_levels()).collect();
        let total: usize = dims.iter().product();
        let mut out = Vec::with_capacity(total);
        for mut r in 0..total {
            let mut levels = vec![0; dims.len()];
            for i in (0..dims.len()).rev() {
                levels[i] = r % dims[i];
                r /= dims[i];
            }
            let pairs: Vec<(&str, &str)> = idx
                .iter()
                .zip(&levels)
                .map(|(&k, &l)| (vars[k].name(), vars[k].levels()[l].as_str()))
                .collect();
            out.push(Self::from_levels(table, &pairs)?);
        }
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }
}

/// Summary of one estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub domain: String,
    pub mean: f64,
    /// Posterior standard deviation, or the linearization SE for raking.
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_draws: usize,
    /// Draws where the domain had zero estimated population.
    pub n_missing: usize,
}

impl EstimateSummary {
    pub fn interval_length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, standard deviation and central 95% quantile interval.
pub fn summarize(domain: &str, values: &[f64], n_missing: usize) -> EstimateSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    EstimateSummary {
        domain: domain.to_string(),
        mean,
        se: sd,
        lower: quantile(&sorted, 0.025),
        upper: quantile(&sorted, 0.975),
        n_draws: n,
        n_missing,
    }
}

/// Rescales every row to sum to `population`.
pub fn normalize_rows(counts: &mut DrawMatrix, population: f64) -> Result<()> {
    for i in 0..counts.n_draws() {
        let row = counts.row_mut(i);
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ZeroTotalDraw(i));
        }
        let f = population / s;
        for v in row.iter_mut() {
            *v *= f;
        }
    }
    Ok(())
}

/// Draws with every count vector rescaled to sum to `population`.
pub fn normalize_draws(mut draws: PosteriorDraws, population: f64) -> Result<PosteriorDraws> {
    normalize_rows(&mut draws.counts, population)?;
    draws.population = population;
    Ok(draws)
}

/// Per-draw `sum_D N theta / sum_D N`; `None` where the domain total is 0.
pub fn domain_draws(draws: &PosteriorDraws, domain: &Domain) -> Result<Vec<Option<f64>>> {
    let means = draws
        .cell_means
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("draws carry no cell means".into()))?;
    if domain.cells.last().is_some_and(|&c| c >= draws.n_cells()) {
        return Err(Error::InvalidInput(format!(
            "domain {} does not fit {} cells",
            domain.name,
            draws.n_cells()
        )));
    }
    Ok((0..draws.n_draws())
        .map(|i| {
            let n = draws.counts.row(i);
            let t = means.row(i);
            let (mut num, mut den) = (0.0, 0.0);
            for &j in &domain.cells {
                num += n[j] * t[j];
                den += n[j];
            }
            (den > 0.0).then(|| num / den)
        })
        .collect())
}

/// Poststratified domain mean summarized over draws.
pub fn mrp_estimate(draws: &PosteriorDraws, domain: &Domain) -> Result<EstimateSummary> {
    let per_draw = domain_draws(draws, domain)?;
    let values: Vec<f64> = per_draw.iter().flatten().copied().collect();
    Ok(summarize(
        &domain.name,
        &values,
        per_draw.len() - values.len(),
    ))
}

/// Raking estimate of a domain mean with a normal 95% interval; `None`
/// when no sampled unit falls in the domain.
pub fn ipf_estimate(
    weights: &RakeWeights,
    unit_cells: &[usize],
    y: &[f64],
    domain: &Domain,
) -> Option<EstimateSummary> {
    let w = weights.unit_weights(unit_cells);
    let m = weighted_domain_mean(&w, y, |i| domain.contains(unit_cells[i]))?;
    Some(EstimateSummary {
        domain: domain.name.clone(),
        mean: m.estimate,
        se: m.se,
        lower: m.estimate - Z_95 * m.se,
        upper: m.estimate + Z_95 * m.se,
        n_draws: 0,
        n_missing: 0,
    })
}

/// Estimates for a list of domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: String,
    pub estimates: Vec<EstimateSummary>,
}

impl EstimateReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::InvalidInput(format!("writing estimates: {e}"));
        w.write_record([
            "method",
            "domain",
            "mean",
            "se",
            "lower",
            "upper",
            "n_draws",
            "n_missing",
        ])
        .map_err(err)?;
        for e in &self.estimates {
            w.write_record([
                self.method.clone(),
                e.domain.clone(),
                e.mean.to_string(),
                e.se.to_string(),
                e.lower.to_string(),
                e.upper.to_string(),
                e.n_draws.to_string(),
                e.n_missing.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidInput(format!("writing estimates: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// [`mrp_estimate`] for each domain, in order.
pub fn estimate_report(draws: &PosteriorDraws, domains: &[Domain]) -> Result<EstimateReport> {
    let estimates = domains
        .par_iter()
        .map(|d| mrp_estimate(draws, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimateReport {
        method: draws.method.to_string(),
        estimates,
    })
}
