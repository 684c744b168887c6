//! Deterministic control model for both normalized chains.
//!
//! A control path is a finite sequence of selected-step blocks; folding the
//! chain's transition map over it gives the extended transition map. Paths
//! carry an extended density (product of per-step selection densities), and
//! the control set at a state is the set of paths with positive density.
//! This module provides the density machinery, membership verdicts for the
//! closure of the control set, constructive steering paths to the distinguished
//! states (0, I) and 0, and the finite-difference rank surrogate for the
//! controllability condition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chains::{cma_f, csa_f, NormalizedCmaState, NormalizedCsaState, SelectedSteps};
use crate::error::{EsError, Result};
use crate::kernels::{select, ESParams};
use crate::matrix::{
    numeric_jacobian, numeric_rank, symmetrize, tangent_project, SpdMatrix, UnitDetSpd,
    DEFAULT_FD_STEP, DEFAULT_RANK_TOL,
};
use crate::objective::Objective;
use crate::rng::GaussianStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Cma,
    Csa,
}

/// State of either normalized chain, for chain-generic operations.
#[derive(Debug, Clone)]
pub enum ChainState {
    Cma(NormalizedCmaState),
    Csa(NormalizedCsaState),
}

impl ChainState {
    pub fn kind(&self) -> ChainKind {
        match self {
            ChainState::Cma(_) => ChainKind::Cma,
            ChainState::Csa(_) => ChainKind::Csa,
        }
    }

    pub fn dim(&self) -> usize {
        self.z().len()
    }

    pub fn z(&self) -> &DVector<f64> {
        match self {
            ChainState::Cma(s) => &s.z,
            ChainState::Csa(s) => &s.z,
        }
    }

    /// The distinguished target state: (0, I) for CMA, 0 for the step-size chain.
    pub fn target(kind: ChainKind, d: usize) -> ChainState {
        match kind {
            ChainKind::Cma => ChainState::Cma(NormalizedCmaState::origin(d)),
            ChainKind::Csa => ChainState::Csa(NormalizedCsaState { z: DVector::zeros(d) }),
        }
    }

    /// One application of the chain's transition map.
    pub fn transition(&self, params: &ESParams, steps: &SelectedSteps) -> ChainState {
        match self {
            ChainState::Cma(s) => ChainState::Cma(cma_f(params, s, steps)),
            ChainState::Csa(s) => ChainState::Csa(csa_f(params, s, steps)),
        }
    }

    /// Distance to another state: Euclidean on z, plus Frobenius on Sigma.
    pub fn distance(&self, other: &ChainState) -> f64 {
        match (self, other) {
            (ChainState::Cma(a), ChainState::Cma(b)) => {
                crate::chains::cma_state_distance(a, b)
            }
            (ChainState::Csa(a), ChainState::Csa(b)) => (&a.z - &b.z).norm(),
            _ => panic!("state kinds differ"),
        }
    }
}

/// z + sqrt(Sigma) u for CMA, z + u for the step-size chain, with the
/// square root precomputed once.
pub struct CandidateMap {
    center: DVector<f64>,
    sqrt_sigma: Option<SpdMatrix>,
}

impl CandidateMap {
    pub fn new(state: &ChainState) -> Self {
        match state {
            ChainState::Cma(s) => CandidateMap {
                center: s.z.clone(),
                sqrt_sigma: Some(s.sigma.as_spd().sqrt()),
            },
            ChainState::Csa(s) => CandidateMap {
                center: s.z.clone(),
                sqrt_sigma: None,
            },
        }
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.sqrt_sigma {
            Some(s) => &self.center + s.apply(u),
            None => &self.center + u,
        }
    }
}

/// A finite sequence of selected-step blocks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlPath {
    pub steps: Vec<SelectedSteps>,
}

impl ControlPath {
    pub fn new(steps: Vec<SelectedSteps>) -> Self {
        ControlPath { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.steps.iter().all(|s| s.v.iter().flatten().all(|x| x.is_finite()))
    }

    /// Flattens to (step, selected index, component) coordinate order.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.steps.iter().flat_map(|s| s.v.iter().flatten().copied()).collect())
    }

    pub fn from_vector(x: &DVector<f64>, k: usize, mu: usize, d: usize) -> Self {
        assert_eq!(x.len(), k * mu * d);
        let mut steps = Vec::with_capacity(k);
        for t in 0..k {
            let mut v = Vec::with_capacity(mu);
            for i in 0..mu {
                let base = (t * mu + i) * d;
                v.push(x.as_slice()[base..base + d].to_vec());
            }
            steps.push(SelectedSteps { v });
        }
        ControlPath { steps }
    }
}

/// Folds the transition map over the path; the empty path returns the state.
pub fn extended_map(params: &ESParams, x: &ChainState, path: &ControlPath) -> ChainState {
    let mut state = x.clone();
    for steps in &path.steps {
        state = state.transition(params, steps);
    }
    state
}

/// All intermediate states x = S^0, S^1, ..., S^k along the path.
pub fn extended_trajectory(params: &ESParams, x: &ChainState, path: &ControlPath) -> Vec<ChainState> {
    let mut states = Vec::with_capacity(path.len() + 1);
    states.push(x.clone());
    for steps in &path.steps {
        states.push(states.last().unwrap().transition(params, steps));
    }
    states
}

/// A nonnegative density value carried in log space; log_value is -inf at 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityValue {
    pub value: f64,
    pub log_value: f64,
}

impl DensityValue {
    pub fn zero() -> Self {
        DensityValue {
            value: 0.0,
            log_value: f64::NEG_INFINITY,
        }
    }

    pub fn from_log(log_value: f64) -> Self {
        DensityValue {
            value: log_value.exp(),
            log_value,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.value > 0.0
    }
}

/// Monte Carlo estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QEstimate {
    pub q: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Monte Carlo fraction of standard-normal candidates strictly better than
/// the candidate at u.
pub fn q_estimate(
    f: &Objective,
    state: &ChainState,
    u: &DVector<f64>,
    mc_samples: usize,
    rng: &mut GaussianStream,
) -> QEstimate {
    assert!(mc_samples >= 1);
    let cmap = CandidateMap::new(state);
    let threshold = f.eval(&cmap.apply(u));
    let d = state.dim();
    let mut hits = 0usize;
    for _ in 0..mc_samples {
        let xi = rng.normal_vector(d);
        if f.eval(&cmap.apply(&xi)) < threshold {
            hits += 1;
        }
    }
    let q = hits as f64 / mc_samples as f64;
    QEstimate {
        q,
        std_error: (q * (1.0 - q) / mc_samples as f64).sqrt(),
        n: mc_samples,
    }
}

/// Sorted table of objective values at standard-normal candidates; turns the
/// Q integral into a binary search, so one table serves many density
/// evaluations at the same state.
pub struct QTable {
    sorted_values: Vec<f64>,
}

impl QTable {
    pub fn build(f: &Objective, cmap: &CandidateMap, d: usize, n: usize, rng: &mut GaussianStream) -> Self {
        let mut vals: Vec<f64> = (0..n).map(|_| f.eval(&cmap.apply(&rng.normal_vector(d)))).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        QTable { sorted_values: vals }
    }

    /// Fraction of table values strictly below the given objective value.
    pub fn q(&self, value: f64) -> f64 {
        let idx = self.sorted_values.partition_point(|&x| x < value);
        idx as f64 / self.sorted_values.len() as f64
    }

    pub fn n(&self) -> usize {
        self.sorted_values.len()
    }
}

fn log_gaussian_density(v: &DVector<f64>) -> f64 {
    let d = v.len() as f64;
    -0.5 * v.norm_squared() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

fn log_falling_factorial(lambda: usize, mu: usize) -> f64 {
    ((lambda - mu + 1)..=lambda).map(|k| (k as f64).ln()).sum()
}

/// Reusable selection-density evaluator at a fixed state.
pub struct SelectionDensityEvaluator<'a> {
    params: &'a ESParams,
    f: &'a Objective,
    cmap: CandidateMap,
    table: QTable,
}

impl<'a> SelectionDensityEvaluator<'a> {
    pub fn new(
        params: &'a ESParams,
        f: &'a Objective,
        state: &ChainState,
        mc_samples: usize,
        rng: &mut GaussianStream,
    ) -> Self {
        let cmap = CandidateMap::new(state);
        let table = QTable::build(f, &cmap, state.dim(), mc_samples, rng);
        SelectionDensityEvaluator {
            params,
            f,
            cmap,
            table,
        }
    }

    /// Density of a selected-step block at the evaluator's state:
    /// prefactor * strict-order indicator * (1 - Q(v_mu))^(lambda - mu)
    /// * product of Gaussian densities.
    pub fn density(&self, steps: &SelectedSteps) -> DensityValue {
        let v = steps.vectors();
        assert_eq!(v.len(), self.params.mu);
        let values: Vec<f64> = v.iter().map(|vi| self.f.eval(&self.cmap.apply(vi))).collect();
        if values.windows(2).any(|w| !(w[0] < w[1])) {
            return DensityValue::zero();
        }
        let q = self.table.q(*values.last().unwrap());
        let tail = self.params.lambda - self.params.mu;
        if tail > 0 && q >= 1.0 {
            return DensityValue::zero();
        }
        let mut log_p = log_falling_factorial(self.params.lambda, self.params.mu);
        log_p += tail as f64 * (1.0 - q).ln();
        for vi in &v {
            log_p += log_gaussian_density(vi);
        }
        DensityValue::from_log(log_p)
    }
}

/// One-shot selection density at a state; builds a fresh Q table of
/// `mc_samples` candidates. Requires mc_samples >= 1000.
pub fn selection_density(
    params: &ESParams,
    f: &Objective,
    state: &ChainState,
    steps: &SelectedSteps,
    mc_samples: usize,
    rng: &mut GaussianStream,
) -> DensityValue {
    assert!(mc_samples >= 1000, "mc_samples must be >= 1000");
    SelectionDensityEvaluator::new(params, f, state, mc_samples, rng).density(steps)
}

/// Extended density of a path: log-space product of per-step selection
/// densities along the extended-map trajectory.
pub fn extended_density(
    params: &ESParams,
    f: &Objective,
    x: &ChainState,
    path: &ControlPath,
    mc_samples: usize,
    rng: &mut GaussianStream,
) -> DensityValue {
    let mut state = x.clone();
    let mut log_p = 0.0;
    for steps in &path.steps {
        let dv = SelectionDensityEvaluator::new(params, f, &state, mc_samples, rng).density(steps);
        if !dv.is_positive() {
            return DensityValue::zero();
        }
        log_p += dv.log_value;
        state = state.transition(params, steps);
    }
    DensityValue::from_log(log_p)
}

/// Membership verdict for a path w.r.t. the closure of the control set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClosureVerdict {
    /// The path itself has positive density.
    Member,
    /// Some perturbation within the given radius has positive density;
    /// expected for tie-degenerate steering paths.
    ClosureMember,
    /// No perturbation found; flags a level-set assumption failure.
    NotFound,
}

/// Checks whether a path lies in the control set or its closure, by testing
/// the path itself and then `trials` uniform perturbations of radius
/// at most epsilon per coordinate.
pub fn closure_membership(
    params: &ESParams,
    f: &Objective,
    x: &ChainState,
    path: &ControlPath,
    epsilon: f64,
    trials: usize,
    mc_samples: usize,
    rng: &mut GaussianStream,
) -> ClosureVerdict {
    assert!(epsilon > 0.0);
    if extended_density(params, f, x, path, mc_samples, rng).is_positive() {
        return ClosureVerdict::Member;
    }
    let base = path.to_vector();
    let (k, mu, d) = (path.len(), params.mu, params.d);
    for _ in 0..trials {
        let perturbed = DVector::from_fn(base.len(), |i, _| {
            base[i] + epsilon * (2.0 * rng.uniform() - 1.0)
        });
        let p = ControlPath::from_vector(&perturbed, k, mu, d);
        if extended_density(params, f, x, &p, mc_samples, rng).is_positive() {
            return ClosureVerdict::ClosureMember;
        }
    }
    ClosureVerdict::NotFound
}

/// Steering path for the step-size chain: one recentering step lands at 0,
/// exactly in exact arithmetic.
pub fn steer_csa(params: &ESParams, start: &NormalizedCsaState) -> ControlPath {
    ControlPath::new(vec![SelectedSteps::repeated(&(-&start.z), params.mu)])
}

const STEER_BISECTION_ITERS: usize = 120;
const STEER_MAX_DOUBLINGS: u32 = 60;

/// Steering path of length 2d - 1 for the CMA chain from `start` to (0, I).
///
/// Step 1 recenters z to 0. Then d - 1 rounds follow, each a kick along the
/// eigendirection of the smallest eigenvalue (with magnitude chosen by
/// bisection so the raised eigenvalue matches the largest one) followed by a
/// recentering step. Once all eigenvalues are equal, unit-determinant
/// normalization forces Sigma = I.
pub fn steer_cma(params: &ESParams, start: &NormalizedCmaState, tol: f64) -> Result<ControlPath> {
    let d = params.d;
    let mut path = Vec::with_capacity(2 * d - 1);
    let mut state = start.clone();

    let recenter = |state: &NormalizedCmaState| -> SelectedSteps {
        SelectedSteps::repeated(&(-(state.sigma.as_spd().inv_sqrt().apply(&state.z))), params.mu)
    };

    let v1 = recenter(&state);
    state = cma_f(params, &state, &v1);
    path.push(v1);

    for _ in 0..d.saturating_sub(1) {
        let (eigvals, eigvecs) = state.sigma.as_spd().eigen();
        let e_max = eigvecs.column(0).into_owned();
        let e_min = eigvecs.column(d - 1).into_owned();
        let inv_sqrt = state.sigma.as_spd().inv_sqrt();

        // gap between the kicked eigendirection and the current largest one,
        // after a kick of magnitude kappa plus a recentering step
        let round = |kappa: f64| -> (NormalizedCmaState, SelectedSteps, SelectedSteps) {
            let kick = SelectedSteps::repeated(&(inv_sqrt.apply(&e_min) * -kappa), params.mu);
            let mid = cma_f(params, &state, &kick);
            let rec = recenter(&mid);
            (cma_f(params, &mid, &rec), kick, rec)
        };
        let gap = |kappa: f64| -> f64 {
            let (end, _, _) = round(kappa);
            let along_min = (e_min.transpose() * end.sigma.matrix() * &e_min)[(0, 0)];
            let along_max = (e_max.transpose() * end.sigma.matrix() * &e_max)[(0, 0)];
            along_min - along_max
        };

        let kappa = if eigvals[0] - eigvals[d - 1] <= 1e-14 {
            0.0
        } else {
            let mut hi = 1.0;
            let mut doublings = 0;
            while gap(hi) < 0.0 {
                hi *= 2.0;
                doublings += 1;
                if doublings > STEER_MAX_DOUBLINGS {
                    return Err(EsError::RootFind {
                        upper: hi,
                        doublings,
                    });
                }
            }
            let mut lo = 0.0;
            for _ in 0..STEER_BISECTION_ITERS {
                let mid = 0.5 * (lo + hi);
                if gap(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };

        let (end, kick, rec) = round(kappa);
        state = end;
        path.push(kick);
        path.push(rec);
    }

    let path = ControlPath::new(path);
    let err = state.z.norm().max((state.sigma.matrix() - DMatrix::identity(d, d)).norm());
    if err > tol {
        return Err(EsError::SteeringTolerance { err, tol });
    }
    Ok(path)
}

fn flatten_state(state: &ChainState) -> DVector<f64> {
    match state {
        ChainState::Csa(s) => s.z.clone(),
        ChainState::Cma(s) => {
            let d = s.z.len();
            let mut out = Vec::with_capacity(d + d * (d + 1) / 2);
            out.extend_from_slice(s.z.as_slice());
            for i in 0..d {
                for j in i..d {
                    out.push(s.sigma.matrix()[(i, j)]);
                }
            }
            DVector::from_vec(out)
        }
    }
}

fn upper_triangle_to_symmetric(coords: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = coords[idx];
            m[(j, i)] = coords[idx];
            idx += 1;
        }
    }
    m
}

/// Dimension of the tangent space at the endpoint: d + d(d+1)/2 - 1 for the
/// CMA chain, d for the step-size chain.
pub fn full_rank_target(kind: ChainKind, d: usize) -> usize {
    match kind {
        ChainKind::Cma => d + d * (d + 1) / 2 - 1,
        ChainKind::Csa => d,
    }
}

/// Constructive path length from the surjectivity argument: k0(k0 - 1) + 1
/// with k0 = d(d+1)/2 for CMA; 1 for the step-size chain.
pub fn default_rank_path_length(kind: ChainKind, d: usize) -> usize {
    match kind {
        ChainKind::Cma => {
            let k0 = d * (d + 1) / 2;
            k0 * (k0 - 1) + 1
        }
        ChainKind::Csa => 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub best_rank: usize,
    pub target_rank: usize,
    pub full_rank: bool,
    pub paths_tried: usize,
    pub path_length: usize,
}

/// Finite-difference Jacobian of the extended map w.r.t. every path
/// coordinate, composed with the tangent projection at the endpoint (CMA),
/// as a matrix ready for a rank computation.
pub fn extended_map_jacobian(
    params: &ESParams,
    x: &ChainState,
    path: &ControlPath,
    fd_step: f64,
) -> DMatrix<f64> {
    let k = path.len();
    let (mu, d) = (params.mu, params.d);
    let base = path.to_vector();
    let mut eval = |p: &DVector<f64>| {
        flatten_state(&extended_map(params, x, &ControlPath::from_vector(p, k, mu, d)))
    };
    let jac = numeric_jacobian(&mut eval, &base, fd_step);
    match x.kind() {
        ChainKind::Csa => jac,
        ChainKind::Cma => {
            let endpoint = extended_map(params, x, path);
            let sigma_end = match &endpoint {
                ChainState::Cma(s) => s.sigma.clone(),
                _ => unreachable!(),
            };
            project_cma_jacobian(&jac, &sigma_end, d)
        }
    }
}

fn project_cma_jacobian(jac: &DMatrix<f64>, sigma_end: &UnitDetSpd, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(jac.nrows(), jac.ncols());
    for col in 0..jac.ncols() {
        let c = jac.column(col);
        let dz = DVector::from_fn(d, |i, _| c[i]);
        let dh = upper_triangle_to_symmetric(&c.as_slice()[d..], d);
        let t = tangent_project(sigma_end, dz, &symmetrize(&dh));
        for i in 0..d {
            out[(i, col)] = t.h_z[i];
        }
        let mut idx = d;
        for i in 0..d {
            for j in i..d {
                out[(idx, col)] = t.h_sigma[(i, j)];
                idx += 1;
            }
        }
    }
    out
}

fn sample_positive_density_path(
    params: &ESParams,
    f: &Objective,
    x: &ChainState,
    k: usize,
    rng: &mut GaussianStream,
) -> Option<ControlPath> {
    let mut state = x.clone();
    let mut steps = Vec::with_capacity(k);
    for _ in 0..k {
        let block = crate::kernels::sample_population(params, rng);
        let cmap = CandidateMap::new(&state);
        let mut values: Vec<f64> = Vec::with_capacity(params.lambda);
        for u in &block.u {
            let y = f.eval(&cmap.apply(u));
            if !y.is_finite() {
                return None;
            }
            values.push(y);
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
        // strict ordering of the selected mu values is required for positive density
        let selected_vals: Vec<f64> = order[..params.mu].iter().map(|&i| values[i]).collect();
        if selected_vals.windows(2).any(|w| !(w[0] < w[1])) {
            return None;
        }
        let sel = SelectedSteps::from_vectors(select(params, &block, &order));
        state = state.transition(params, &sel);
        steps.push(sel);
    }
    Some(ControlPath::new(steps))
}

/// Samples positive-density paths of length `k` from the chain's own
/// dynamics and reports the best numerical rank of the projected
/// finite-difference Jacobian over the attempts.
#[allow(clippy::too_many_arguments)]
pub fn rank_condition_check(
    params: &ESParams,
    f: &Objective,
    x: &ChainState,
    k: usize,
    n_paths: usize,
    fd_step: f64,
    rank_tol: f64,
    rng: &mut GaussianStream,
) -> Result<RankReport> {
    assert!(k >= 1);
    let target = full_rank_target(x.kind(), params.d);
    let mut best = 0usize;
    let mut found_any = false;
    for _ in 0..n_paths {
        let Some(path) = sample_positive_density_path(params, f, x, k, rng) else {
            continue;
        };
        found_any = true;
        let jac = extended_map_jacobian(params, x, &path, fd_step);
        best = best.max(numeric_rank(&jac, rank_tol));
        if best >= target {
            break;
        }
    }
    if !found_any {
        return Err(EsError::NoPositivePath { attempts: n_paths });
    }
    Ok(RankReport {
        best_rank: best,
        target_rank: target,
        full_rank: best >= target,
        paths_tried: n_paths,
        path_length: k,
    })
}

/// Rank of the projected Jacobian at one given path (no sampling); used for
/// closed-form comparisons and dimension-count checks.
pub fn rank_at_path(
    params: &ESParams,
    x: &ChainState,
    path: &ControlPath,
    fd_step: f64,
    rank_tol: f64,
) -> usize {
    numeric_rank(&extended_map_jacobian(params, x, path, fd_step), rank_tol)
}

/// Default finite-difference and rank tolerances bundled for callers.
pub fn default_fd_step() -> f64 {
    DEFAULT_FD_STEP
}

pub fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}
