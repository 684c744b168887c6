//! Evolution strategy state-space chains: raw and normalized dynamics for a
//! covariance-adapting ES and a step-size-adapting ES, their deterministic
//! control model (selection densities, steering paths, rank checks), and
//! Monte Carlo estimators for convergence rates and stability diagnostics.

pub mod analysis;
pub mod chains;
pub mod control;
pub mod error;
pub mod kernels;
pub mod matrix;
pub mod objective;
pub mod rng;

pub use analysis::{
    cma_cr_increment, cr_estimate, cr_estimate_with, csa_cr_increment, drift_estimate,
    ergodic_average, log_progress_decomposition, DecompositionReport, DriftRow, EstimatorResult,
    StepSource,
};
pub use chains::{
    cma_alpha, cma_chain_step, cma_f, csa_alpha, csa_chain_step, csa_f, normalize_raw_cma,
    normalize_raw_csa, verify_conjugacy_cma, verify_conjugacy_csa, ConjugacyReport,
    NormalizedCmaState, NormalizedCsaState, SelectedSteps, DIVERGENCE_GUARD,
};
pub use control::{
    closure_membership, extended_density, extended_map, extended_trajectory, q_estimate,
    rank_condition_check, selection_density, steer_cma, steer_csa, ChainKind, ChainState,
    ClosureVerdict, ControlPath, DensityValue, QEstimate, QTable, RankReport,
    SelectionDensityEvaluator,
};
pub use error::{EsError, Result};
pub use kernels::{
    cma_raw_step, csa_raw_step, expected_chi_norm, rank_offspring, sample_population, select,
    sigma_multiplier, ESParams, RawCmaState, RawCsaState, SampleBlock, Transform,
};
pub use matrix::{SpdMatrix, UnitDetSpd};
pub use objective::{make_builtin, Objective};
pub use rng::GaussianStream;
