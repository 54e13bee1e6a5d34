//! Fixtures shared by the benchmarks.

use bayesrake::sim::scenarios::{dependent_raking, sparse_table};
use bayesrake::sim::{draw_sample, generate_population, Sample};
use bayesrake::{MarginSet, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A population, its margins and one sample drawn from it.
pub struct Fixture {
    pub scenario: Scenario,
    pub margins: MarginSet,
    pub sample: Sample,
}

fn fixture(scenario: Scenario, seed: u64) -> Fixture {
    let pop = generate_population(&scenario.population).expect("population");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = loop {
        if let Some(s) = draw_sample(&pop, &mut rng).expect("sample") {
            break s;
        }
    };
    Fixture {
        margins: pop.margins.clone(),
        scenario,
        sample,
    }
}

/// Five one-way margins over 1000 cells, a few hundred respondents.
pub fn sparse() -> Fixture {
    fixture(sparse_table(), 1)
}

/// Two two-way margins over 100 cells.
pub fn dependent() -> Fixture {
    fixture(dependent_raking(), 2)
}
