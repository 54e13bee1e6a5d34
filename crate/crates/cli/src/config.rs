use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bayesrake::ipf::IpfOptions;
use bayesrake::model::{DesignSpec, Priors, SoftFamily};
use bayesrake::table::CellTable;
use bayesrake::{Domain, Method, ModelConfig, OutcomeSpec, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Version of the run configuration and manifest layout.
pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Ipf,
    Soft,
    Basis,
    Projection,
}

impl FitMethod {
    pub fn bayes(self) -> Option<Method> {
        match self {
            FitMethod::Ipf => None,
            FitMethod::Soft => Some(Method::Soft),
            FitMethod::Basis => Some(Method::Basis),
            FitMethod::Projection => Some(Method::Projection),
        }
    }
}

/// Model settings shared by the Bayes methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default)]
    pub soft_family: SoftFamily,
    #[serde(default)]
    pub inclusion: DesignSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeSpec>,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default = "enabled")]
    pub sample_size_term: bool,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            soft_family: SoftFamily::default(),
            inclusion: DesignSpec::default(),
            outcome: None,
            priors: Priors::default(),
            sample_size_term: true,
        }
    }
}

impl ModelBlock {
    pub fn model_config(&self, method: Method) -> ModelConfig {
        ModelConfig {
            method,
            soft_family: self.soft_family,
            inclusion: self.inclusion.clone(),
            outcome: self.outcome.clone(),
            priors: self.priors.clone(),
            sample_size_term: self.sample_size_term,
        }
    }
}

/// Everything needed to reproduce one `ipf` or `bayes` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub data: PathBuf,
    pub margins: PathBuf,
    pub method: FitMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerConfig>,
    #[serde(default)]
    pub ipf: IpfOptions,
    /// Single domains as `{variable = level}` tables; an empty table is the
    /// whole population.
    #[serde(default)]
    pub domains: Vec<BTreeMap<String, String>>,
    /// Every level (combination) of each entry, e.g. `"age"` or `"age:pov"`.
    #[serde(default)]
    pub by: Vec<String>,
    /// Write every posterior draw to `draws.csv`.
    #[serde(default)]
    pub save_draws: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("bayesrake-out")
}

impl RunConfig {
    pub fn new(data: PathBuf, margins: PathBuf, method: FitMethod) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data,
            margins,
            method,
            seed: 0,
            out: default_out(),
            model: ModelBlock::default(),
            sampler: None,
            ipf: IpfOptions::default(),
            domains: Vec::new(),
            by: Vec::new(),
            save_draws: false,
        }
    }

    /// Reads a TOML run configuration, or the `config` of a JSON manifest.
    /// Relative input paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))?;
            let inner = manifest
                .get("config")
                .cloned()
                .ok_or_else(|| CliError::parse(path, "manifest has no `config` entry"))?;
            serde_json::from_value(inner).map_err(|e| CliError::parse(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::parse(path, e))?
        };
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::parse(
                path,
                format!(
                    "schema version {} is not supported (expected {SCHEMA_VERSION})",
                    config.schema_version
                ),
            ));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data, &mut config.margins] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Checks method-specific requirements and fills the sampler block for
    /// Bayes methods.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        match self.method.bayes() {
            Some(_) => {
                let mut s = self.sampler.take().unwrap_or_default();
                s.seed = self.seed;
                s.validate().map_err(CliError::config)?;
                self.sampler = Some(s);
            }
            None => {
                if self.sampler.is_some() {
                    return Err(CliError::config(
                        "a sampler block only applies to Bayes methods",
                    ));
                }
            }
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Requested domains; the whole population and every margin variable's
    /// levels when none are given.
    pub fn domains(&self, table: &CellTable) -> bayesrake::Result<Vec<Domain>> {
        let mut out = Vec::new();
        if self.domains.is_empty() && self.by.is_empty() {
            out.push(Domain::all(table));
            for v in table.variables() {
                out.extend(Domain::margin_levels(table, v.name())?);
            }
            return Ok(out);
        }
        for d in &self.domains {
            let pairs: Vec<(&str, &str)> =
                d.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            out.push(Domain::from_levels(table, &pairs)?);
        }
        for by in &self.by {
            let vars: Vec<&str> = by.split(':').collect();
            out.extend(Domain::interaction_levels(table, &vars)?);
        }
        Ok(out)
    }
}

/// Parses `age=18-34,pov=lt50` into a domain table; `all` is the whole
/// population.
pub fn parse_domain(text: &str) -> Result<BTreeMap<String, String>, String> {
    if text == "all" {
        return Ok(BTreeMap::new());
    }
    text.split(',')
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected variable=level, got {pair:?}"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}
