use std::io::Write;

use serde::Serialize;

use super::diagnostics::{coordinate_diagnostic, DiagnosticsReport};
use super::{run_chains, ChainDraws, SamplerConfig, TransitionStats};
use crate::error::{Error, Result};
use crate::estimate::normalize_rows;
use crate::model::{BayesRakeModel, Method};

/// Row-major matrix with one row per draw.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DrawMatrix {
    width: usize,
    data: Vec<f64>,
}

impl DrawMatrix {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        let mut m = Self::new(width);
        for r in rows {
            m.push(&r)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::DimensionMismatch {
                what: "draw row",
                expected: self.width,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_draws(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.width.max(1))
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows().map(|r| r[k]).collect()
    }

    pub fn column_mean(&self, k: usize) -> f64 {
        self.rows().map(|r| r[k]).sum::<f64>() / self.n_draws() as f64
    }
}

/// Posterior sample of a Bayes-raking fit. Draw `i` belongs to chain
/// `i / iters`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub method: Method,
    pub chains: usize,
    pub iters: usize,
    pub names: Vec<String>,
    pub params: DrawMatrix,
    /// Cell counts rescaled to sum to `population`.
    pub counts: DrawMatrix,
    pub propensity: DrawMatrix,
    /// Cell means on the outcome scale.
    pub cell_means: Option<DrawMatrix>,
    pub population: f64,
    pub stats: Vec<TransitionStats>,
    pub step_sizes: Vec<f64>,
    pub warmup_divergences: usize,
}

impl PosteriorDraws {
    /// Draws assembled from derived quantities only, e.g. for
    /// post-processing externally produced samples. Counts are normalized.
    pub fn from_cells(
        method: Method,
        counts: Vec<Vec<f64>>,
        cell_means: Option<Vec<Vec<f64>>>,
        population: f64,
    ) -> Result<Self> {
        let n = counts.len();
        let mut counts = DrawMatrix::from_rows(counts)?;
        normalize_rows(&mut counts, population)?;
        let cell_means = cell_means.map(DrawMatrix::from_rows).transpose()?;
        if let Some(m) = &cell_means {
            if m.n_draws() != n || m.width() != counts.width() {
                return Err(Error::DimensionMismatch {
                    what: "cell means",
                    expected: n * counts.width(),
                    got: m.n_draws() * m.width(),
                });
            }
        }
        Ok(Self {
            method,
            chains: 1,
            iters: n,
            names: Vec::new(),
            params: DrawMatrix::new(0),
            propensity: DrawMatrix::new(counts.width()),
            counts,
            cell_means,
            population,
            stats: vec![TransitionStats::default(); n],
            step_sizes: vec![],
            warmup_divergences: 0,
        })
    }

    pub fn n_draws(&self) -> usize {
        self.counts.n_draws()
    }

    pub fn n_cells(&self) -> usize {
        self.counts.width()
    }

    /// Values of parameter `k` split by chain.
    pub fn chain_columns(&self, k: usize) -> Vec<Vec<f64>> {
        let col = self.params.column(k);
        col.chunks(self.iters).map(|c| c.to_vec()).collect()
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    /// One row per draw: sampler statistics, parameters, then `N`, `p` and
    /// cell means per cell.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("writing draws: {e}"));
        let mut header: Vec<String> = [
            "chain",
            "draw",
            "lp__",
            "accept_stat",
            "stepsize",
            "treedepth",
            "n_leapfrog",
            "divergent",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.names.iter().cloned());
        let j = self.n_cells();
        header.extend((0..j).map(|c| format!("N[{c}]")));
        if self.propensity.n_draws() > 0 {
            header.extend((0..j).map(|c| format!("p[{c}]")));
        }
        if self.cell_means.is_some() {
            header.extend((0..j).map(|c| format!("theta[{c}]")));
        }
        w.write_record(&header).map_err(csv_err)?;
        let iters = self.iters.max(1);
        for i in 0..self.n_draws() {
            let s = &self.stats[i];
            let mut rec: Vec<String> = vec![
                (i / iters).to_string(),
                (i % iters).to_string(),
                s.log_density.to_string(),
                s.accept_stat.to_string(),
                s.step_size.to_string(),
                s.tree_depth.to_string(),
                s.n_leapfrog.to_string(),
                (s.divergent as u8).to_string(),
            ];
            if self.params.width() > 0 {
                rec.extend(self.params.row(i).iter().map(f64::to_string));
            }
            rec.extend(self.counts.row(i).iter().map(f64::to_string));
            if self.propensity.n_draws() > 0 {
                rec.extend(self.propensity.row(i).iter().map(f64::to_string));
            }
            if let Some(m) = &self.cell_means {
                rec.extend(m.row(i).iter().map(f64::to_string));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidInput(format!("writing draws: {e}")))?;
        Ok(())
    }
}

/// Fits `model` with NUTS and returns normalized draws.
pub fn sample_posterior(model: &BayesRakeModel, config: &SamplerConfig) -> Result<PosteriorDraws> {
    let chains = run_chains(model, |_, rng| model.initial_point(rng), config)?;
    assemble(model, config, chains)
}

fn assemble(
    model: &BayesRakeModel,
    config: &SamplerConfig,
    chains: Vec<ChainDraws>,
) -> Result<PosteriorDraws> {
    let j = model.table().n_cells();
    let mut params = DrawMatrix::new(model.dim());
    let mut counts = DrawMatrix::new(j);
    let mut propensity = DrawMatrix::new(j);
    let mut cell_means = model.outcome_family().map(|_| DrawMatrix::new(j));
    let mut stats = Vec::with_capacity(config.chains * config.iters);
    for c in &chains {
        for i in 0..c.n_draws() {
            let x = c.draw(i);
            let d = model.derived(x);
            params.push(x)?;
            counts.push(&d.counts)?;
            propensity.push(&d.propensity)?;
            if let (Some(m), Some(v)) = (cell_means.as_mut(), d.cell_means.as_ref()) {
                m.push(v)?;
            }
        }
        stats.extend_from_slice(&c.stats);
    }
    normalize_rows(&mut counts, model.population())?;
    Ok(PosteriorDraws {
        method: model.config().method,
        chains: config.chains,
        iters: config.iters,
        names: model.layout().names().to_vec(),
        params,
        counts,
        propensity,
        cell_means,
        population: model.population(),
        stats,
        step_sizes: chains.iter().map(|c| c.step_size).collect(),
        warmup_divergences: chains.iter().map(|c| c.warmup_divergences).sum(),
    })
}

/// Split R-hat and ESS for every parameter, with sampler statistics.
pub fn diagnostics(draws: &PosteriorDraws, max_depth: usize) -> DiagnosticsReport {
    let coordinates: Vec<_> = (0..draws.params.width())
        .map(|k| {
            let cols = draws.chain_columns(k);
            let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            coordinate_diagnostic(&draws.names[k], &refs)
        })
        .collect();
    let n = draws.stats.len().max(1) as f64;
    let divergences = draws.divergences();
    let infeasible: usize = draws.stats.iter().map(|s| s.infeasible_steps).sum();
    let leapfrogs: usize = draws.stats.iter().map(|s| s.n_leapfrog).sum();
    DiagnosticsReport {
        chains: draws.chains,
        draws_per_chain: draws.iters,
        rhat_available: draws.chains >= 2,
        max_rhat: coordinates
            .iter()
            .filter_map(|c| c.rhat)
            .filter(|r| !r.is_nan())
            .reduce(f64::max),
        min_ess: coordinates.iter().filter_map(|c| c.ess).reduce(f64::min),
        n_flagged: coordinates.iter().filter(|c| c.flagged).count(),
        coordinates,
        divergences,
        divergence_rate: divergences as f64 / n,
        infeasible_steps: infeasible,
        infeasible_rate: infeasible as f64 / leapfrogs.max(1) as f64,
        max_depth_hits: draws
            .stats
            .iter()
            .filter(|s| s.tree_depth >= max_depth)
            .count(),
        mean_accept_stat: draws.stats.iter().map(|s| s.accept_stat).sum::<f64>() / n,
    }
}
