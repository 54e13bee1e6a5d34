use std::path::{Path, PathBuf};

use bayesrake::sim::scenarios::{builtin, BUILTIN};
use bayesrake::{run_replications, Scenario};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::CliError;
use crate::output::OutputDir;
use crate::{Cli, SimulateArgs};

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Scenario file layout: the scenario fields plus a schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(flatten)]
    pub scenario: Scenario,
}

pub fn load_scenario(name: &str) -> Result<Scenario, CliError> {
    if let Some(s) = builtin(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.exists() && !name.ends_with(".toml") {
        return Err(CliError::config(format!(
            "{name:?} is neither a built-in scenario ({}) nor a file",
            BUILTIN.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: ScenarioFile = toml::from_str(&text).map_err(|e| CliError::parse(path, e))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CliError::parse(
            path,
            format!("schema version {} is not supported", file.schema_version),
        ));
    }
    Ok(file.scenario)
}

pub fn scenario_toml(scenario: &Scenario) -> String {
    toml::to_string(&ScenarioFile {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.clone(),
    })
    .expect("scenario serializes")
}

pub fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(s) = cli.seed {
        scenario.seed = s;
    }
    if let Some(r) = args.replicates {
        scenario.replicates = r;
    }
    let s = &mut scenario.sampler;
    s.chains = args.chains.unwrap_or(s.chains);
    s.warmup = args.warmup.unwrap_or(s.warmup);
    s.iters = args.iters.unwrap_or(s.iters);
    if args.dump_config {
        print!("{}", scenario_toml(&scenario));
        return Ok(Vec::new());
    }
    let report = run_replications(&scenario)?;
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("bayesrake-{}", scenario.name)));
    let mut out = OutputDir::create(&dir)?;
    let text = report.to_text();
    print!("{text}");
    out.write("summary.txt", &text)?;
    out.write_with("report.csv", |buf| report.write_csv(buf))?;
    out.write("report.json", report.to_json()? + "\n")?;
    out.write("scenario.toml", scenario_toml(&scenario))?;
    let details = serde_json::json!({
        "replicates": report.replicates,
        "skipped": report.skipped,
        "mean_sample_size": report.mean_sample_size,
    });
    let inputs: Vec<&Path> = match builtin(&args.scenario) {
        Some(_) => vec![],
        None => vec![Path::new(&args.scenario)],
    };
    out.finish(
        "simulate",
        &ScenarioFile {
            schema_version: SCHEMA_VERSION,
            scenario,
        },
        &inputs,
        details,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenarios_round_trip_through_toml() {
        for name in BUILTIN {
            let s = builtin(name).unwrap();
            let text = scenario_toml(&s);
            let back: ScenarioFile = toml::from_str(&text).unwrap();
            assert_eq!(back.scenario, s, "{name}");
        }
    }

    #[test]
    fn unknown_scenario_is_an_input_error() {
        let e = load_scenario("no-such-study").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
