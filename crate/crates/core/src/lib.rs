pub mod certificates;
pub mod error;
pub mod experiments;
pub mod nonlinearity;
pub mod numeric;
pub mod particle_sim;
pub mod pde;
pub mod rng;

pub use error::{Error, Result};
pub use nonlinearity::{Nonlinearity, SpeedPair, VotingRule};
pub use particle_sim::{Estimate, SimConfig, TrialOutcome};
pub use pde::{Field, Grid, Reaction, SolverConfig};
pub use certificates::{CertificateReport, HFunction, PiecewiseFn};
pub use experiments::{ExperimentConfig, ExperimentKind, RunSummary};
