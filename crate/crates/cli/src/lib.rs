//! Command-line front end: `ipf`, `bayes`, `simulate` and `diagnose`.
//!
//! Every command writes its artifacts plus a `manifest.json` into the
//! output directory. Failures print a JSON error record on stderr (and
//! into `error.json` when the output directory is writable) and map to
//! exit codes 2 (input), 3 (infeasible margins), 4 (sampler
//! initialization) or 1.

mod config;
mod diagnose;
mod error;
mod fit;
mod output;
mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use bayesrake::model::{DesignSpec, SoftFamily};
use bayesrake::{OutcomeFamily, OutcomeSpec};
use clap::{Args, Parser, Subcommand};

pub use config::{parse_domain, FitMethod, ModelBlock, RunConfig, SCHEMA_VERSION};
pub use error::{CliError, ErrorKind};
pub use fit::run;

#[derive(Debug, Parser)]
#[command(
    name = "bayesrake",
    version,
    about = "Raking and Bayesian raking for survey calibration"
)]
pub struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for chains and replicates (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rake the sample to the margins by iterative proportional fitting.
    Ipf(IpfArgs),
    /// Fit a Bayesian raking model and estimate domain means.
    Bayes(BayesArgs),
    /// Run a repeated-sampling study.
    Simulate(SimulateArgs),
    /// Convergence diagnostics for a draws file.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Microdata CSV: one column per margin variable, optional `outcome`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Margins CSV with columns `variable,level,count`.
    #[arg(long)]
    pub margins: Option<PathBuf>,
    /// Run configuration (TOML), or a manifest from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Domain to estimate, e.g. `age=65+,sex=f`, or `all`.
    #[arg(long = "domain", value_parser = parse_domain)]
    pub domains: Vec<std::collections::BTreeMap<String, String>>,
    /// Estimate every level of a variable or combination, e.g. `age:pov`.
    #[arg(long)]
    pub by: Vec<String>,
}

#[derive(Debug, Args)]
pub struct IpfArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Relative margin tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BayesArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_parser = ["soft", "basis", "projection"])]
    pub method: Option<String>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub target_accept: Option<f64>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Outcome family; defaults to continuous when the data has an outcome.
    #[arg(long, value_parser = ["continuous", "binary", "reciprocal_propensity"])]
    pub outcome: Option<String>,
    /// Add a cell-level random effect to the outcome model.
    #[arg(long)]
    pub hierarchical: bool,
    /// Inclusion-model interaction, e.g. `age:pov`.
    #[arg(long)]
    pub interaction: Vec<String>,
    /// Outcome-model interaction, e.g. `age:sex`.
    #[arg(long)]
    pub outcome_interaction: Vec<String>,
    /// Soft-method margin distribution.
    #[arg(long, value_parser = ["poisson", "normal"])]
    pub soft_family: Option<String>,
    /// Write every draw to `draws.csv`.
    #[arg(long)]
    pub draws: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name or a scenario TOML file.
    pub scenario: String,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Print the resolved scenario as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Draws CSV written by `bayes --draws`.
    pub draws: PathBuf,
    /// Tree depth limit used by the sampler.
    #[arg(long, default_value_t = 10)]
    pub max_depth: usize,
}

fn split_terms(terms: &[String]) -> Vec<Vec<String>> {
    terms
        .iter()
        .map(|t| t.split(':').map(str::to_string).collect())
        .collect()
}

fn base_config(cli: &Cli, input: &InputArgs, method: FitMethod) -> Result<RunConfig, CliError> {
    let mut c = match &input.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone().ok_or_else(|| {
                    CliError::config(format!("--{flag} is required without --config"))
                })
            };
            RunConfig::new(
                need(&input.data, "data")?,
                need(&input.margins, "margins")?,
                method,
            )
        }
    };
    if let Some(p) = &input.data {
        c.data = p.clone();
    }
    if let Some(p) = &input.margins {
        c.margins = p.clone();
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out = o.clone();
    }
    if !input.domains.is_empty() {
        c.domains = input.domains.clone();
    }
    if !input.by.is_empty() {
        c.by = input.by.clone();
    }
    Ok(c)
}

fn ipf_config(cli: &Cli, a: &IpfArgs) -> Result<RunConfig, CliError> {
    let mut c = base_config(cli, &a.input, FitMethod::Ipf)?;
    c.method = FitMethod::Ipf;
    c.sampler = None;
    if let Some(t) = a.tol {
        c.ipf.tol = t;
    }
    if let Some(k) = a.max_iter {
        c.ipf.max_iter = k;
    }
    c.resolve()
}

fn bayes_config(cli: &Cli, a: &BayesArgs) -> Result<RunConfig, CliError> {
    let mut c = base_config(cli, &a.input, FitMethod::Soft)?;
    if let Some(m) = &a.method {
        c.method = match m.as_str() {
            "basis" => FitMethod::Basis,
            "projection" => FitMethod::Projection,
            _ => FitMethod::Soft,
        };
    }
    if c.method == FitMethod::Ipf {
        return Err(CliError::config("use the ipf command for raking"));
    }
    let mut s = c.sampler.take().unwrap_or_default();
    s.chains = a.chains.unwrap_or(s.chains);
    s.warmup = a.warmup.unwrap_or(s.warmup);
    s.iters = a.iters.unwrap_or(s.iters);
    s.target_accept = a.target_accept.unwrap_or(s.target_accept);
    s.max_depth = a.max_depth.unwrap_or(s.max_depth);
    c.sampler = Some(s);
    if let Some(f) = &a.soft_family {
        c.model.soft_family = if f == "normal" {
            SoftFamily::Normal
        } else {
            SoftFamily::Poisson
        };
    }
    if !a.interaction.is_empty() {
        c.model.inclusion = DesignSpec {
            interactions: split_terms(&a.interaction),
        };
    }
    if let Some(f) = &a.outcome {
        let family = match f.as_str() {
            "binary" => OutcomeFamily::Binary,
            "reciprocal_propensity" => OutcomeFamily::ReciprocalPropensity,
            _ => OutcomeFamily::Continuous,
        };
        c.model.outcome = Some(OutcomeSpec {
            family,
            design: DesignSpec::default(),
            hierarchical: false,
        });
    }
    if let Some(o) = &mut c.model.outcome {
        if !a.outcome_interaction.is_empty() {
            o.design.interactions = split_terms(&a.outcome_interaction);
        }
        o.hierarchical |= a.hierarchical;
    }
    c.save_draws |= a.draws;
    c.resolve()
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    match &cli.command {
        Command::Ipf(a) => run(&ipf_config(cli, a)?),
        Command::Bayes(a) => run(&bayes_config(cli, a)?),
        Command::Simulate(a) => simulate::simulate(cli, a),
        Command::Diagnose(a) => diagnose::diagnose(cli, a),
    }
}

fn output_dir(cli: &Cli) -> Option<PathBuf> {
    if let Some(o) = &cli.out {
        return Some(o.clone());
    }
    match &cli.command {
        Command::Ipf(IpfArgs { input, .. }) | Command::Bayes(BayesArgs { input, .. }) => input
            .config
            .as_deref()
            .and_then(|p| RunConfig::load(p).ok())
            .map(|c| c.out),
        _ => None,
    }
}

fn report_error(cli: Option<&Cli>, err: &CliError) {
    let record = err.record();
    eprintln!("{record}");
    if let Some(dir) = cli.and_then(output_dir) {
        if std::fs::create_dir_all(&dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(CliError::config(format!("--threads {n}: {e}"))),
        },
        None => execute(&cli),
    };
    match result {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            report_error(Some(&cli), &e);
            e.exit_code()
        }
    }
}
