//! Simulation and analysis of mean-field inclusion processes with a slow phase.

pub mod configuration;
pub mod fenwick;
pub mod harness;
pub mod kingman;
pub mod model;
pub mod moments;
pub mod ode;
pub mod pd;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod verify;

pub use configuration::{Configuration, ConfigurationError, EmbeddedState, OccupationHistogram};
pub use kingman::KingmanVector;
pub use model::{ControlState, ModelError, ModelParams, RateSpec, RateTable};
pub use rng::SimRng;
pub use sim::{InitialCondition, Observable, ObservationSeries, SimError, SimState};
pub use harness::{run, ExperimentConfig, ExperimentKind, HarnessError, RunResult};
pub use moments::{MomentSystem, MonomialIndex};
pub use verify::{run_suite, VerifyOptions, VerifyReport};
