//! Normalized Markov chains of both strategies.
//!
//! The raw CMA state (m, C) is quotiented by scale into (z, Sigma) with
//! det Sigma = 1, and the raw step-size state (m, sigma) into z = m / sigma.
//! Each chain is driven by a selection map `alpha` (rank, keep the mu best
//! raw samples) and a deterministic transition map `F`; this module provides
//! both maps and the conjugacy check against the raw processes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{EsError, Result};
use crate::kernels::{
    cma_raw_step, csa_raw_step, rank_offspring, select, sigma_multiplier, ESParams, RawCmaState,
    RawCsaState, SampleBlock, Transform,
};
use crate::matrix::{symmetrize, SpdMatrix, UnitDetSpd};
use crate::objective::Objective;
use crate::rng::GaussianStream;

/// Norm guard: beyond this the run is reported as divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// State of the normalized CMA chain: z and a unit-determinant Sigma.
#[derive(Debug, Clone)]
pub struct NormalizedCmaState {
    pub z: DVector<f64>,
    pub sigma: UnitDetSpd,
}

impl NormalizedCmaState {
    pub fn origin(d: usize) -> Self {
        NormalizedCmaState {
            z: DVector::zeros(d),
            sigma: UnitDetSpd::identity(d),
        }
    }
}

/// State of the normalized step-size chain.
#[derive(Debug, Clone)]
pub struct NormalizedCsaState {
    pub z: DVector<f64>,
}

/// The mu selected steps, in ranking order; an element of W = R^(d x mu).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedSteps {
    pub v: Vec<Vec<f64>>,
}

impl SelectedSteps {
    pub fn from_vectors(v: Vec<DVector<f64>>) -> Self {
        SelectedSteps {
            v: v.into_iter().map(|x| x.as_slice().to_vec()).collect(),
        }
    }

    pub fn zeros(d: usize, mu: usize) -> Self {
        SelectedSteps {
            v: vec![vec![0.0; d]; mu],
        }
    }

    /// mu copies of a single vector (tie-degenerate steering step).
    pub fn repeated(u: &DVector<f64>, mu: usize) -> Self {
        SelectedSteps {
            v: vec![u.as_slice().to_vec(); mu],
        }
    }

    pub fn vectors(&self) -> Vec<DVector<f64>> {
        self.v.iter().map(|x| DVector::from_vec(x.clone())).collect()
    }

    pub fn mu(&self) -> usize {
        self.v.len()
    }

    pub fn dim(&self) -> usize {
        self.v.first().map_or(0, |x| x.len())
    }
}

/// Selection map of the normalized CMA chain: ranks z + sqrt(Sigma) u_i and
/// returns the mu best raw samples in order.
pub fn cma_alpha(
    params: &ESParams,
    state: &NormalizedCmaState,
    block: &SampleBlock,
    f: &Objective,
) -> Result<SelectedSteps> {
    let sqrt_sigma = state.sigma.as_spd().sqrt();
    let order = rank_offspring(f, &state.z, Transform::SpdSqrt(&sqrt_sigma), block)?;
    Ok(SelectedSteps::from_vectors(select(params, block, &order)))
}

/// Transition map of the normalized CMA chain.
///
/// K = (1-c) Sigma + c sqrt(Sigma) (sum w_i v_i v_i^T) sqrt(Sigma);
/// z' = (z + sqrt(Sigma) sum w_i v_i) / R(K)^(1/2); Sigma' = K / R(K).
pub fn cma_f(params: &ESParams, state: &NormalizedCmaState, steps: &SelectedSteps) -> NormalizedCmaState {
    let v = steps.vectors();
    let sqrt_sigma = state.sigma.as_spd().sqrt();
    let outer = params.outer_sum(&v);
    let k = state.sigma.matrix() * (1.0 - params.c)
        + (sqrt_sigma.matrix() * outer * sqrt_sigma.matrix()) * params.c;
    let k = SpdMatrix::new(symmetrize(&k)).expect("K is SPD for c in (0,1)");
    let (sigma_next, r) = k.unit_det_normalize();
    let z_next = (&state.z + sqrt_sigma.apply(&params.recombine(&v))) / r.sqrt();
    NormalizedCmaState {
        z: z_next,
        sigma: sigma_next,
    }
}

/// Selection map of the normalized step-size chain (Sigma fixed to I).
pub fn csa_alpha(
    params: &ESParams,
    state: &NormalizedCsaState,
    block: &SampleBlock,
    f: &Objective,
) -> Result<SelectedSteps> {
    let order = rank_offspring(f, &state.z, Transform::Scalar(1.0), block)?;
    Ok(SelectedSteps::from_vectors(select(params, block, &order)))
}

/// Transition map of the normalized step-size chain:
/// z' = (z + sum w_i v_i) / (sigma multiplier of the recombined step).
pub fn csa_f(params: &ESParams, state: &NormalizedCsaState, steps: &SelectedSteps) -> NormalizedCsaState {
    let step = params.recombine(&steps.vectors());
    NormalizedCsaState {
        z: (&state.z + &step) / sigma_multiplier(params, &step),
    }
}

/// Quotients a raw CMA state by scale: z = (m - x*) / sqrt(R(C)), Sigma = C / R(C).
pub fn normalize_raw_cma(raw: &RawCmaState, x_star: &DVector<f64>) -> NormalizedCmaState {
    let (sigma, r) = raw.c_mat.unit_det_normalize();
    NormalizedCmaState {
        z: (&raw.m - x_star) / r.sqrt(),
        sigma,
    }
}

/// Quotients a raw step-size state: z = (m - x*) / sigma.
pub fn normalize_raw_csa(raw: &RawCsaState, x_star: &DVector<f64>) -> NormalizedCsaState {
    NormalizedCsaState {
        z: (&raw.m - x_star) / raw.sigma,
    }
}

fn guard(z: &DVector<f64>, step: usize) -> Result<()> {
    let norm = z.norm();
    if !norm.is_finite() || norm > DIVERGENCE_GUARD {
        return Err(EsError::Divergence {
            step,
            norm,
            guard: DIVERGENCE_GUARD,
        });
    }
    Ok(())
}

/// One sampled step of the normalized CMA chain, with divergence guard.
pub fn cma_chain_step(
    params: &ESParams,
    state: &NormalizedCmaState,
    f: &Objective,
    rng: &mut GaussianStream,
    step: usize,
) -> Result<(NormalizedCmaState, SelectedSteps, SampleBlock)> {
    let block = crate::kernels::sample_population(params, rng);
    let steps = cma_alpha(params, state, &block, f)?;
    let next = cma_f(params, state, &steps);
    guard(&next.z, step)?;
    Ok((next, steps, block))
}

/// One sampled step of the normalized step-size chain, with divergence guard.
pub fn csa_chain_step(
    params: &ESParams,
    state: &NormalizedCsaState,
    f: &Objective,
    rng: &mut GaussianStream,
    step: usize,
) -> Result<(NormalizedCsaState, SelectedSteps, SampleBlock)> {
    let block = crate::kernels::sample_population(params, rng);
    let steps = csa_alpha(params, state, &block, f)?;
    let next = csa_f(params, state, &steps);
    guard(&next.z, step)?;
    Ok((next, steps, block))
}

/// Distance used by the conjugacy check: max of the Euclidean distance on z
/// and the Frobenius distance on Sigma.
pub fn cma_state_distance(a: &NormalizedCmaState, b: &NormalizedCmaState) -> f64 {
    let dz = (&a.z - &b.z).norm();
    let ds = (a.sigma.matrix() - b.sigma.matrix()).norm();
    dz.max(ds)
}

/// Report of a same-seed dual run of the raw and normalized chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub steps: usize,
    pub max_deviation: f64,
    pub max_det_error: f64,
    pub passed: bool,
}

/// Runs the raw CMA chain and the normalized chain on identical sample
/// blocks and reports the maximal deviation between the normalized raw state
/// and the chain state. Requires f scaling-invariant w.r.t. `x_star`.
pub fn verify_conjugacy_cma(
    params: &ESParams,
    f: &Objective,
    raw0: &RawCmaState,
    x_star: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<ConjugacyReport> {
    let mut rng = GaussianStream::new(seed);
    let mut raw = raw0.clone();
    let mut norm = normalize_raw_cma(&raw, x_star);
    let mut max_dev: f64 = 0.0;
    let mut max_det_err: f64 = 0.0;
    for k in 0..steps {
        let block = crate::kernels::sample_population(params, &mut rng);
        raw = cma_raw_step(params, &raw, f, &block)?;
        let steps_sel = cma_alpha(params, &norm, &block, f)?;
        norm = cma_f(params, &norm, &steps_sel);
        guard(&norm.z, k)?;
        max_dev = max_dev.max(cma_state_distance(&normalize_raw_cma(&raw, x_star), &norm));
        let det = norm.sigma.matrix().clone().lu().determinant();
        max_det_err = max_det_err.max((det - 1.0).abs());
    }
    Ok(ConjugacyReport {
        steps,
        max_deviation: max_dev,
        max_det_error: max_det_err,
        passed: max_dev < 1e-8,
    })
}

/// Same-seed dual run for the step-size chain.
pub fn verify_conjugacy_csa(
    params: &ESParams,
    f: &Objective,
    raw0: &RawCsaState,
    x_star: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<ConjugacyReport> {
    let mut rng = GaussianStream::new(seed);
    let mut raw = raw0.clone();
    let mut norm = normalize_raw_csa(&raw, x_star);
    let mut max_dev: f64 = 0.0;
    for k in 0..steps {
        let block = crate::kernels::sample_population(params, &mut rng);
        raw = csa_raw_step(params, &raw, f, &block)?;
        let steps_sel = csa_alpha(params, &norm, &block, f)?;
        norm = csa_f(params, &norm, &steps_sel);
        guard(&norm.z, k)?;
        max_dev = max_dev.max((&normalize_raw_csa(&raw, x_star).z - &norm.z).norm());
    }
    Ok(ConjugacyReport {
        steps,
        max_deviation: max_dev,
        max_det_error: 0.0,
        passed: max_dev < 1e-8,
    })
}
