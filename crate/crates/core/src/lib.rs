//! Near-field, spatially non-stationary wideband XL-MIMO channel simulation
//! and sparse Bayesian channel estimation.
//!
//! The crate covers the full pipeline used by the benchmark CLI:
//!
//! * [`channel`] builds per-path geometry and assembles the antenna by
//!   subcarrier channel;
//! * [`transform`] provides the angular-delay dictionaries, the hybrid
//!   combiner and the Kronecker measurement operator with its factored SVD;
//! * [`uamp`] is the unitary AMP measurement module with a pluggable prior;
//! * [`mrf`] is the clustered-support prior;
//! * [`baselines`] holds greedy pursuit and the uncoupled learner;
//! * [`state_evolution`] predicts the effective noise per iteration;
//! * [`experiment`] runs seeded Monte-Carlo sweeps and writes results.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mrf;
pub mod state_evolution;
pub mod transform;
pub mod uamp;

pub use error::{Error, Result};
pub use linalg::{CMatrix, RMatrix, C64};

pub use baselines::{somp_estimate, uamp_sbl_twolayer, GreedyConfig, GreedyOutput};
pub use channel::{
    assemble_channel, generate_scene, ArrayGeometry, Mechanism, OfdmGrid, PathParams, SceneConfig,
    SpatialFrequencyChannel, VisibilityRegion,
};
pub use experiment::{
    build_trial, dump_trajectory, run_algorithm, run_experiment, Algorithm, ExperimentConfig,
    ExperimentKind, ResultRecord,
};
pub use mrf::{MrfMessageGrid, MrfParams, MrfPrior};
pub use state_evolution::{build_mmse_table, se_trajectory, MmseTable};
pub use transform::{AngularDelayChannel, Dictionary, MeasurementOperator, UnitaryOperator};
pub use uamp::{Prior, PriorMessage, UampConfig, UampOutput, UampState};
