//! Survey calibration by raking and Bayesian raking.
//!
//! * [`table`]: poststratification cells, known margins, loading matrix.
//! * [`io`]: CSV readers for microdata and margins.
//! * [`ipf`]: classical raking by iterative proportional fitting.
//! * [`subspace`]: null-space bases and projectors for the hard-constraint
//!   estimators.
//! * [`model`]: joint log density of margins, inclusion and outcomes.
//! * [`sampler`]: NUTS with adaptation and convergence diagnostics.
//! * [`estimate`]: poststratified domain means from posterior draws.
//! * [`sim`]: synthetic populations and repeated-sampling calibration.

pub mod error;
pub mod estimate;
pub mod io;
pub mod ipf;
pub mod model;
pub mod sampler;
pub mod sim;
pub mod subspace;
pub mod table;

pub use error::{Error, Result};
pub use estimate::{mrp_estimate, Domain, EstimateReport, EstimateSummary};
pub use ipf::{ipf_rake, IpfOptions, RakeResult};
pub use model::{BayesRakeModel, Method, ModelConfig, OutcomeFamily, OutcomeSpec, UnitOutcomes};
pub use sampler::{sample_posterior, PosteriorDraws, SamplerConfig};
pub use sim::{run_replications, ReplicationReport, Scenario, SimMethod};
pub use table::{CellTable, LoadingMatrix, MarginSet, RakingVariable};
