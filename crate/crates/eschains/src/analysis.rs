//! Convergence-rate estimation and stability diagnostics.
//!
//! The per-step log-progress of the raw CMA mean splits into a z-increment
//! term and a covariance log-determinant term; time-averaging the latter
//! gives the convergence-rate (CR) estimator. Ergodic averages with
//! batch-means errors and a Monte Carlo drift-ratio diagnostic complete the
//! toolbox.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chains::{
    cma_alpha, cma_f, csa_alpha, normalize_raw_cma, NormalizedCmaState, SelectedSteps,
};
use crate::control::{ChainKind, ChainState};
use crate::error::{EsError, Result};
use crate::kernels::{cma_raw_step, sample_population, sigma_multiplier, ESParams, RawCmaState};
use crate::objective::Objective;
use crate::rng::GaussianStream;

/// Point estimate with standard error and central 95% interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub ci95: (f64, f64),
}

impl EstimatorResult {
    pub fn new(mean: f64, std_error: f64, n: usize) -> Self {
        EstimatorResult {
            mean,
            std_error,
            n,
            ci95: (mean - 1.96 * std_error, mean + 1.96 * std_error),
        }
    }
}

/// Per-step CR increment for the CMA chain:
/// -(1/2d) log det((1-c) I + c sum w_i v_i v_i^T).
pub fn cma_cr_increment(params: &ESParams, steps: &SelectedSteps) -> f64 {
    let d = params.d;
    let m = DMatrix::identity(d, d) * (1.0 - params.c) + params.outer_sum(&steps.vectors()) * params.c;
    -m.lu().determinant().ln() / (2.0 * d as f64)
}

/// Per-step CR increment for the step-size chain: -log of the sigma multiplier.
pub fn csa_cr_increment(params: &ESParams, steps: &SelectedSteps) -> f64 {
    -sigma_multiplier(params, &params.recombine(&steps.vectors())).ln()
}

/// Three-term report of the log-progress identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// (1/T) log(|m_T| / |m_0|) from the raw chain.
    pub direct: f64,
    /// Telescoping z-increment term from the conjugate normalized chain.
    pub z_term: f64,
    /// (1/2dT) sum of covariance log-determinants.
    pub det_term: f64,
    /// direct - (z_term + det_term); an algebraic identity up to round-off.
    pub difference: f64,
}

/// Runs the raw CMA chain and its conjugate normalized chain on identical
/// sample blocks and reports both sides of the log-progress identity.
pub fn log_progress_decomposition(
    params: &ESParams,
    f: &Objective,
    raw0: &RawCmaState,
    t_steps: usize,
    seed: u64,
) -> Result<DecompositionReport> {
    assert!(t_steps >= 1);
    if raw0.m.norm() == 0.0 {
        return Err(EsError::ZeroNorm { step: 0 });
    }
    let x_star = DVector::zeros(params.d);
    let mut raw = raw0.clone();
    let mut norm = normalize_raw_cma(&raw, &x_star);
    let mut rng = GaussianStream::new(seed);
    let mut det_sum = 0.0;
    let z0_norm = norm.z.norm();
    for k in 0..t_steps {
        let block = sample_population(params, &mut rng);
        raw = cma_raw_step(params, &raw, f, &block)?;
        let sel = cma_alpha(params, &norm, &block, f)?;
        det_sum += -2.0 * (params.d as f64) * cma_cr_increment(params, &sel);
        norm = cma_f(params, &norm, &sel);
        if norm.z.norm() == 0.0 {
            return Err(EsError::ZeroNorm { step: k });
        }
    }
    let t = t_steps as f64;
    let direct = (raw.m.norm() / raw0.m.norm()).ln() / t;
    let z_term = (norm.z.norm() / z0_norm).ln() / t;
    let det_term = det_sum / (2.0 * params.d as f64 * t);
    Ok(DecompositionReport {
        direct,
        z_term,
        det_term,
        difference: direct - (z_term + det_term),
    })
}

/// How selected steps are produced during estimation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSource {
    /// Sample a population and select through the objective.
    Sampled,
    /// Degenerate stub: every selected step is zero (calibration runs).
    ForcedZero,
}

/// Time-averaged CR estimate over independent replicas; the standard error
/// is taken across replica means.
pub fn cr_estimate(
    kind: ChainKind,
    params: &ESParams,
    f: &Objective,
    burn_in: usize,
    t_steps: usize,
    replicas: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    cr_estimate_with(kind, params, f, burn_in, t_steps, replicas, seed, StepSource::Sampled)
}

#[allow(clippy::too_many_arguments)]
pub fn cr_estimate_with(
    kind: ChainKind,
    params: &ESParams,
    f: &Objective,
    burn_in: usize,
    t_steps: usize,
    replicas: usize,
    seed: u64,
    source: StepSource,
) -> Result<EstimatorResult> {
    assert!(t_steps >= 1 && replicas >= 1);
    let mut means = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let mut rng = GaussianStream::with_stream(seed, r as u64);
        let mut state = initial_state(kind, params, &mut rng);
        let mut acc = 0.0;
        for k in 0..burn_in + t_steps {
            let sel = match source {
                StepSource::Sampled => select_steps(params, f, &state, &mut rng, k)?,
                StepSource::ForcedZero => SelectedSteps::zeros(params.d, params.mu),
            };
            if k >= burn_in {
                acc += match kind {
                    ChainKind::Cma => cma_cr_increment(params, &sel),
                    ChainKind::Csa => csa_cr_increment(params, &sel),
                };
            }
            state = state.transition(params, &sel);
            check_guard(&state, k)?;
        }
        means.push(acc / t_steps as f64);
    }
    Ok(aggregate(&means))
}

fn initial_state(kind: ChainKind, params: &ESParams, rng: &mut GaussianStream) -> ChainState {
    let z = rng.normal_vector(params.d);
    match kind {
        ChainKind::Cma => ChainState::Cma(NormalizedCmaState {
            z,
            sigma: crate::matrix::UnitDetSpd::identity(params.d),
        }),
        ChainKind::Csa => ChainState::Csa(crate::chains::NormalizedCsaState { z }),
    }
}

fn select_steps(
    params: &ESParams,
    f: &Objective,
    state: &ChainState,
    rng: &mut GaussianStream,
    _step: usize,
) -> Result<SelectedSteps> {
    let block = sample_population(params, rng);
    match state {
        ChainState::Cma(s) => cma_alpha(params, s, &block, f),
        ChainState::Csa(s) => csa_alpha(params, s, &block, f),
    }
}

fn check_guard(state: &ChainState, step: usize) -> Result<()> {
    let norm = state.z().norm();
    if !norm.is_finite() || norm > crate::chains::DIVERGENCE_GUARD {
        return Err(EsError::Divergence {
            step,
            norm,
            guard: crate::chains::DIVERGENCE_GUARD,
        });
    }
    Ok(())
}

fn aggregate(means: &[f64]) -> EstimatorResult {
    let n = means.len();
    let mean = means.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    EstimatorResult::new(mean, se, n)
}

pub const DEFAULT_BATCH_COUNT: usize = 20;

/// (1/T) sum of g over the chain after burn-in, with a batch-means standard
/// error (20 batches by default).
pub fn ergodic_average(
    kind: ChainKind,
    params: &ESParams,
    f: &Objective,
    g: &dyn Fn(&ChainState) -> f64,
    burn_in: usize,
    t_steps: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    ergodic_average_with_batches(kind, params, f, g, burn_in, t_steps, seed, DEFAULT_BATCH_COUNT)
}

#[allow(clippy::too_many_arguments)]
pub fn ergodic_average_with_batches(
    kind: ChainKind,
    params: &ESParams,
    f: &Objective,
    g: &dyn Fn(&ChainState) -> f64,
    burn_in: usize,
    t_steps: usize,
    seed: u64,
    batches: usize,
) -> Result<EstimatorResult> {
    assert!(t_steps >= batches && batches >= 2);
    let mut rng = GaussianStream::new(seed);
    let mut state = initial_state(kind, params, &mut rng);
    let mut values = Vec::with_capacity(t_steps);
    for k in 0..burn_in + t_steps {
        let sel = select_steps(params, f, &state, &mut rng, k)?;
        state = state.transition(params, &sel);
        check_guard(&state, k)?;
        if k >= burn_in {
            let v = g(&state);
            if !v.is_finite() {
                return Err(EsError::NonFiniteFunctional { step: k });
            }
            values.push(v);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // batch means: split the series into `batches` contiguous blocks
    let batch_len = values.len() / batches;
    let batch_means: Vec<f64> = (0..batches)
        .map(|b| {
            let chunk = &values[b * batch_len..(b + 1) * batch_len];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    let bm = batch_means.iter().sum::<f64>() / batches as f64;
    let var = batch_means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (batches - 1) as f64;
    let se = (var / batches as f64).sqrt();
    Ok(EstimatorResult::new(mean, se, values.len()))
}

/// One row of the drift diagnostic table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftRow {
    pub v_at_state: f64,
    pub ratio: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Monte Carlo estimate of E[V(next)] / V(x) at each probe state: a
/// diagnostic for a geometric drift inequality, not a proof of one.
pub fn drift_estimate(
    params: &ESParams,
    f: &Objective,
    v_fn: &dyn Fn(&ChainState) -> f64,
    probe_states: &[ChainState],
    mc_per_state: usize,
    seed: u64,
) -> Result<Vec<DriftRow>> {
    assert!(mc_per_state >= 1);
    let mut rows = Vec::with_capacity(probe_states.len());
    for (i, x) in probe_states.iter().enumerate() {
        let vx = v_fn(x);
        assert!(vx > 0.0, "V must be positive on probe states");
        let mut rng = GaussianStream::with_stream(seed, i as u64);
        let mut vals = Vec::with_capacity(mc_per_state);
        for k in 0..mc_per_state {
            let sel = select_steps(params, f, x, &mut rng, k)?;
            let next = x.transition(params, &sel);
            let v = v_fn(&next);
            if !v.is_finite() {
                return Err(EsError::NonFiniteFunctional { step: k });
            }
            vals.push(v / vx);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var =
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1).max(1) as f64;
        rows.push(DriftRow {
            v_at_state: vx,
            ratio: mean,
            std_error: (var / vals.len() as f64).sqrt(),
            n: vals.len(),
        });
    }
    Ok(rows)
}
