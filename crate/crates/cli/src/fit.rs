use std::path::PathBuf;

use bayesrake::estimate::{estimate_report, ipf_estimate, summarize};
use bayesrake::io::{read_margins, read_microdata, Microdata};
use bayesrake::ipf::rake_weights;
use bayesrake::model::DesignSpec;
use bayesrake::sampler::diagnostics;
use bayesrake::table::check_margin_consistency;
use bayesrake::{
    ipf_rake, sample_posterior, BayesRakeModel, Domain, EstimateReport, MarginSet, Method,
    OutcomeFamily, OutcomeSpec,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, ErrorKind};
use crate::output::OutputDir;

#[derive(Serialize)]
struct IpfCell {
    cell: usize,
    label: String,
    sample_count: u64,
    fitted: f64,
    weight: Option<f64>,
}

#[derive(Serialize)]
struct IpfOutput {
    converged: bool,
    iterations: usize,
    max_deviation: f64,
    term_deviation: Vec<f64>,
    kl: f64,
    undefined_weights: usize,
    cells: Vec<IpfCell>,
}

/// Fits the configured method and writes estimates, diagnostics and a
/// manifest into `config.out`. Returns the written files.
pub fn run(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut config = config.clone().resolve()?;
    for p in [&mut config.data, &mut config.margins] {
        *p = std::path::absolute(&*p).map_err(|e| CliError::io(p, e))?;
    }
    let margins = read_margins(&config.margins).map_err(CliError::reading(&config.margins))?;
    let data = read_microdata(&config.data, margins.variables())
        .map_err(CliError::reading(&config.data))?;
    let domains = config.domains(&data.table).map_err(CliError::config)?;
    match config.method.bayes() {
        None => run_ipf(&config, &margins, &data, &domains),
        Some(method) => {
            match (&config.model.outcome, &data.outcome) {
                (None, Some(_)) => {
                    config.model.outcome = Some(OutcomeSpec {
                        family: OutcomeFamily::Continuous,
                        design: DesignSpec::default(),
                        hierarchical: false,
                    })
                }
                (Some(_), None) => {
                    return Err(CliError::parse(
                        &config.data,
                        "an outcome model is configured but the data has no `outcome` column",
                    ))
                }
                _ => {}
            }
            run_bayes(&config, method, &margins, &data, &domains)
        }
    }
}

fn run_ipf(
    config: &RunConfig,
    margins: &MarginSet,
    data: &Microdata,
    domains: &[Domain],
) -> Result<Vec<PathBuf>, CliError> {
    let table = &data.table;
    let result = ipf_rake(table, margins, &config.ipf)?;
    let weights = rake_weights(&result, table).ok();
    if weights.is_none() {
        eprintln!(
            "warning: raking did not converge after {} iterations (max deviation {:e}); no weights or estimates",
            result.iterations, result.max_deviation
        );
    }
    let cells = (0..table.n_cells())
        .map(|j| IpfCell {
            cell: j,
            label: table.cell_label(j),
            sample_count: table.count(j),
            fitted: result.fitted[j],
            weight: weights.as_ref().and_then(|w| w.weights[j]),
        })
        .collect();
    let mut out = OutputDir::create(&config.out)?;
    out.write_json(
        "ipf.json",
        &IpfOutput {
            converged: result.converged,
            iterations: result.iterations,
            max_deviation: result.max_deviation,
            term_deviation: result.term_deviation.clone(),
            kl: result.kl,
            undefined_weights: weights.as_ref().map_or(0, |w| w.undefined),
            cells,
        },
    )?;
    let mut details = serde_json::json!({ "converged": result.converged });
    if let Some(w) = &weights {
        let unit_w = w.unit_weights(&data.unit_cells);
        out.write_with("weights.csv", |buf| {
            let mut c = csv::Writer::from_writer(buf);
            let err = |e: csv::Error| bayesrake::Error::InvalidInput(e.to_string());
            c.write_record(["unit", "cell", "weight"]).map_err(err)?;
            for (i, (&cell, wt)) in data.unit_cells.iter().zip(&unit_w).enumerate() {
                c.write_record([i.to_string(), cell.to_string(), wt.to_string()])
                    .map_err(err)?;
            }
            c.flush()
                .map_err(|e| bayesrake::Error::InvalidInput(e.to_string()))
        })?;
        if let Some(y) = &data.outcome {
            let mut estimates = Vec::new();
            let mut empty = Vec::new();
            for d in domains {
                match ipf_estimate(w, &data.unit_cells, y, d) {
                    Some(e) => estimates.push(e),
                    None => empty.push(d.name().to_string()),
                }
            }
            let report = EstimateReport {
                method: "ipf".into(),
                estimates,
            };
            write_estimates(&mut out, &report)?;
            details["domains_without_units"] = serde_json::json!(empty);
        }
    }
    out.finish("ipf", config, &[&config.data, &config.margins], details)
}

fn run_bayes(
    config: &RunConfig,
    method: Method,
    margins: &MarginSet,
    data: &Microdata,
    domains: &[Domain],
) -> Result<Vec<PathBuf>, CliError> {
    let sampler = config
        .sampler
        .clone()
        .expect("resolved Bayes config has a sampler");
    if method != Method::Soft {
        let check = check_margin_consistency(margins);
        if !check.consistent {
            return Err(CliError::new(
                ErrorKind::Infeasible,
                format!(
                    "margins disagree by up to {} (tolerance {}); no table satisfies them exactly",
                    check.max_deviation, check.tolerance
                ),
            ));
        }
    }
    let outcomes = data
        .outcomes()
        .transpose()
        .map_err(CliError::reading(&config.data))?;
    let model = BayesRakeModel::new(
        config.model.model_config(method),
        &data.table,
        margins,
        outcomes.as_ref(),
    )?;
    for w in model.warnings() {
        eprintln!("warning: {w}");
    }
    let draws = sample_posterior(&model, &sampler)?;
    let diag = diagnostics(&draws, sampler.max_depth);
    if !diag.is_clean() {
        eprintln!(
            "warning: {} coordinates flagged (max R-hat {:?}, min ESS {:?})",
            diag.n_flagged, diag.max_rhat, diag.min_ess
        );
    }

    let mut out = OutputDir::create(&config.out)?;
    out.write_json("diagnostics.json", &diag)?;
    let table = &data.table;
    out.write_with("cells.csv", |buf| {
        let mut c = csv::Writer::from_writer(buf);
        let err = |e: csv::Error| bayesrake::Error::InvalidInput(e.to_string());
        c.write_record([
            "cell",
            "label",
            "sample_count",
            "mean",
            "sd",
            "lower",
            "upper",
        ])
        .map_err(err)?;
        for j in 0..table.n_cells() {
            let s = summarize("", &draws.counts.column(j), 0);
            c.write_record([
                j.to_string(),
                table.cell_label(j),
                table.count(j).to_string(),
                s.mean.to_string(),
                s.se.to_string(),
                s.lower.to_string(),
                s.upper.to_string(),
            ])
            .map_err(err)?;
        }
        c.flush()
            .map_err(|e| bayesrake::Error::InvalidInput(e.to_string()))
    })?;
    if draws.cell_means.is_some() {
        write_estimates(&mut out, &estimate_report(&draws, domains)?)?;
    }
    if config.save_draws {
        out.write_with("draws.csv", |buf| draws.write_csv(buf))?;
    }
    out.write("run.toml", config.to_toml())?;
    let details = serde_json::json!({
        "flagged_coordinates": diag.n_flagged,
        "max_rhat": diag.max_rhat,
        "min_ess": diag.min_ess,
        "divergences": diag.divergences,
        "warnings": model.warnings(),
    });
    out.finish("bayes", config, &[&config.data, &config.margins], details)
}

fn write_estimates(out: &mut OutputDir, report: &EstimateReport) -> Result<(), CliError> {
    out.write_with("estimates.csv", |buf| report.write_csv(buf))?;
    out.write_json("estimates.json", report)
}
