//! Built-in simulation scenarios.

use std::collections::BTreeMap;

use super::{
    Coefficients, Covariates, EstimandSpec, FitSpec, OutcomeRule, PopulationSpec, Scenario,
    SimMethod, VariableSpec,
};
use crate::ipf::IpfOptions;
use crate::sampler::SamplerConfig;

/// Sampler settings used by the built-in scenarios.
pub fn study_sampler() -> SamplerConfig {
    SamplerConfig {
        chains: 2,
        warmup: 500,
        iters: 500,
        ..SamplerConfig::default()
    }
}

fn var(name: &str, levels: &[&str], probs: &[f64]) -> VariableSpec {
    VariableSpec {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
        probs: probs.to_vec(),
    }
}

fn coefs(interactions: &[&[&str]], values: &[(&str, f64)]) -> Coefficients {
    Coefficients {
        interactions: interactions
            .iter()
            .map(|g| g.iter().map(|s| s.to_string()).collect())
            .collect(),
        values: values
            .iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<_, _>>(),
    }
}

const AGE: [&str; 5] = ["18-34", "35-44", "45-54", "55-64", "65+"];
const POV: [&str; 5] = ["lt50", "50-100", "100-200", "200-300", "300plus"];

/// Five one-way margins over 1000 cells with a few hundred respondents, a
/// binary outcome and main-effects inclusion. Compares raking with the
/// soft method on the overall mean and 46 subgroup means.
pub fn sparse_table() -> Scenario {
    let variables = vec![
        var("age", &AGE, &[0.33, 0.18, 0.18, 0.15, 0.16]),
        var(
            "race",
            &["white", "black", "asian", "hispanic", "other"],
            &[0.35, 0.22, 0.13, 0.25, 0.05],
        ),
        var(
            "edu",
            &["lt-hs", "hs", "some-college", "ba-plus"],
            &[0.20, 0.25, 0.22, 0.33],
        ),
        var("sex", &["male", "female"], &[0.47, 0.53]),
        var("pov", &POV, &[0.06, 0.10, 0.17, 0.15, 0.52]),
    ];
    let inclusion = coefs(
        &[],
        &[
            ("(Intercept)", -4.31),
            ("age=35-44", 0.26),
            ("age=45-54", 0.46),
            ("age=55-64", 0.57),
            ("age=65+", 0.51),
            ("race=black", 0.43),
            ("race=asian", -0.84),
            ("race=hispanic", 1.13),
            ("race=other", 0.68),
            ("edu=hs", 0.47),
            ("edu=some-college", 0.64),
            ("edu=ba-plus", 1.19),
            ("sex=female", 0.32),
            ("pov=50-100", 0.0),
            ("pov=100-200", -0.26),
            ("pov=200-300", -0.46),
            ("pov=300plus", -0.48),
        ],
    );
    let outcome = coefs(
        &[],
        &[
            ("(Intercept)", 0.85),
            ("age=35-44", 0.41),
            ("age=45-54", 0.48),
            ("age=65+", -0.63),
            ("race=black", 1.0),
            ("race=hispanic", 1.14),
            ("race=other", 1.28),
            ("edu=ba-plus", -0.81),
            ("sex=female", 0.31),
            ("pov=50-100", -0.61),
            ("pov=200-300", -0.78),
            ("pov=300plus", -1.38),
        ],
    );
    let names = ["age", "race", "edu", "sex", "pov"];
    Scenario {
        name: "sparse-table".into(),
        population: PopulationSpec {
            covariates: Covariates::Independent { variables },
            size: 20_000,
            inclusion,
            outcome: OutcomeRule::Logistic { coefs: outcome },
            margins: names.iter().map(|n| vec![n.to_string()]).collect(),
            seed: 20_240_601,
        },
        methods: vec![SimMethod::Ipf, SimMethod::Soft],
        replicates: 100,
        estimands: EstimandSpec {
            overall: true,
            margins: names.iter().map(|n| n.to_string()).collect(),
            interactions: vec![vec!["age".into(), "pov".into()]],
        },
        fit: FitSpec::default(),
        sampler: study_sampler(),
        ipf: IpfOptions::default(),
        seed: 11,
    }
}

/// Centered integer scores `0..n` shifted to mean zero.
fn scores(n: usize) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    (0..n).map(|i| i as f64 - c).collect()
}

/// Joint distribution of age, pov and number of children with all three
/// pairwise associations, cells in age, pov, cld order.
pub fn dependent_joint_probs() -> Vec<f64> {
    let age_main = [0.30, 0.20, 0.20, 0.15, 0.15];
    let pov_main = [0.10, 0.12, 0.20, 0.18, 0.40];
    let cld_main = [0.45, 0.22, 0.20, 0.13];
    let (sa, sp, sc) = (scores(5), scores(5), scores(4));
    let mut out = Vec::with_capacity(100);
    for a in 0..5 {
        for p in 0..5 {
            for c in 0..4 {
                let lin = 0.15 * sa[a] * sp[p] - 0.20 * sp[p] * sc[c] - 0.25 * sa[a] * sc[c];
                out.push(age_main[a] * pov_main[p] * cld_main[c] * lin.exp());
            }
        }
    }
    let s: f64 = out.iter().sum();
    out.iter().map(|v| v / s).collect()
}

/// Two-way margins `age:pov` and `pov:cld`, inclusion depending on both
/// interactions, and an outcome equal to the inverse inclusion
/// probability plus noise. Compares raking with all three Bayes methods.
pub fn dependent_raking() -> Scenario {
    let cld = ["0", "1", "2", "3+"];
    let flat = |n: usize| vec![1.0 / n as f64; n];
    let variables = vec![
        var("age", &AGE, &flat(5)),
        var("pov", &POV, &flat(5)),
        var("cld", &cld, &flat(4)),
    ];
    let inclusion = coefs(
        &[&["age", "pov"], &["pov", "cld"]],
        &[
            ("(Intercept)", -3.45),
            ("age=45-54", 0.53),
            ("age=55-64", 0.32),
            ("age=65+", 0.76),
            ("pov=50-100", 0.12),
            ("pov=300plus", -0.30),
            ("cld=1", 0.48),
            ("cld=2", 0.17),
            ("cld=3+", -0.17),
            ("age:pov=65+:50-100", -0.87),
            ("age:pov=65+:300plus", -0.30),
            ("pov:cld=50-100:1", -0.52),
            ("pov:cld=300plus:3+", 0.46),
        ],
    );
    let margins = vec![
        vec!["age".to_string(), "pov".to_string()],
        vec!["pov".to_string(), "cld".to_string()],
    ];
    Scenario {
        name: "dependent-raking".into(),
        population: PopulationSpec {
            covariates: Covariates::Joint {
                variables,
                cell_probs: dependent_joint_probs(),
            },
            size: 50_000,
            inclusion,
            outcome: OutcomeRule::ReciprocalPropensity { noise_sd: 1.0 },
            margins,
            seed: 20_240_602,
        },
        methods: vec![
            SimMethod::Ipf,
            SimMethod::Soft,
            SimMethod::Basis,
            SimMethod::Projection,
        ],
        replicates: 100,
        estimands: EstimandSpec {
            overall: true,
            margins: vec!["age".into(), "pov".into(), "cld".into()],
            interactions: vec![vec!["pov".into(), "cld".into()]],
        },
        fit: FitSpec::default(),
        sampler: study_sampler(),
        ipf: IpfOptions::default(),
        seed: 12,
    }
}

/// Looks up a built-in scenario by name.
pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "sparse-table" => Some(sparse_table()),
        "dependent-raking" => Some(dependent_raking()),
        _ => None,
    }
}

pub const BUILTIN: [&str; 2] = ["sparse-table", "dependent-raking"];
