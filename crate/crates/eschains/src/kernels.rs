//! Raw (unnormalized) algorithm steps shared by both evolution strategies:
//! population sampling, comparison-based ranking with a deterministic
//! tie-break, the CMA mean/covariance update and the step-size update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{EsError, Result};
use crate::matrix::{symmetrize, SpdMatrix};
use crate::objective::Objective;
use crate::rng::GaussianStream;

/// Strategy parameters, validated on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ESParams {
    pub d: usize,
    pub lambda: usize,
    pub mu: usize,
    /// Nonincreasing, strictly positive, summing to 1.
    pub weights: Vec<f64>,
    /// Covariance learning rate, strictly inside (0, 1).
    pub c: f64,
    /// Step-size damping.
    pub d_sigma: f64,
    /// Defaults to sum of squared weights; overridable.
    pub mu_eff: f64,
}

impl ESParams {
    pub fn new(d: usize, lambda: usize, mu: usize, weights: Vec<f64>, c: f64, d_sigma: f64) -> Result<Self> {
        let mu_eff = weights.iter().map(|w| w * w).sum();
        Self::with_mu_eff(d, lambda, mu, weights, c, d_sigma, mu_eff)
    }

    pub fn with_mu_eff(
        d: usize,
        lambda: usize,
        mu: usize,
        weights: Vec<f64>,
        c: f64,
        d_sigma: f64,
        mu_eff: f64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(EsError::invalid("d", "dimension must be >= 1"));
        }
        if lambda < 2 {
            return Err(EsError::invalid("lambda", "population size must be >= 2"));
        }
        if mu == 0 || mu > lambda {
            return Err(EsError::invalid("mu", "must satisfy 1 <= mu <= lambda"));
        }
        if weights.len() != mu {
            return Err(EsError::invalid("weights", "length must equal mu"));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(EsError::invalid("weights", "must be strictly positive"));
        }
        if weights.windows(2).any(|w| w[0] < w[1]) {
            return Err(EsError::invalid("weights", "must be nonincreasing"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(EsError::invalid("weights", "must sum to 1 within 1e-12"));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(EsError::invalid("c", "must lie strictly inside (0, 1)"));
        }
        if d_sigma <= 0.0 {
            return Err(EsError::invalid("d_sigma", "must be positive"));
        }
        if mu_eff <= 0.0 {
            return Err(EsError::invalid("mu_eff", "must be positive"));
        }
        Ok(ESParams {
            d,
            lambda,
            mu,
            weights,
            c,
            d_sigma,
            mu_eff,
        })
    }

    /// Equal weights 1/mu; convenient default for experiments.
    pub fn equal_weights(d: usize, lambda: usize, mu: usize, c: f64, d_sigma: f64) -> Result<Self> {
        Self::new(d, lambda, mu, vec![1.0 / mu as f64; mu], c, d_sigma)
    }

    /// Weighted recombination of the first mu vectors: sum of w_i v_i.
    pub fn recombine(&self, v: &[DVector<f64>]) -> DVector<f64> {
        let mut acc = DVector::zeros(self.d);
        for (w, vi) in self.weights.iter().zip(v) {
            acc += vi * *w;
        }
        acc
    }

    /// Weighted outer-product sum: sum of w_i v_i v_i^T.
    pub fn outer_sum(&self, v: &[DVector<f64>]) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.d, self.d);
        for (w, vi) in self.weights.iter().zip(v) {
            acc += vi * vi.transpose() * *w;
        }
        acc
    }
}

/// CMA state before normalization: mean and full covariance.
#[derive(Debug, Clone)]
pub struct RawCmaState {
    pub m: DVector<f64>,
    pub c_mat: SpdMatrix,
}

/// Step-size ES state before normalization: mean and step-size.
#[derive(Debug, Clone)]
pub struct RawCsaState {
    pub m: DVector<f64>,
    pub sigma: f64,
}

/// One population of lambda i.i.d. standard-normal d-vectors.
#[derive(Debug, Clone)]
pub struct SampleBlock {
    pub u: Vec<DVector<f64>>,
}

pub fn sample_population(params: &ESParams, rng: &mut GaussianStream) -> SampleBlock {
    SampleBlock {
        u: (0..params.lambda).map(|_| rng.normal_vector(params.d)).collect(),
    }
}

/// How a raw sample is mapped to a candidate solution.
pub enum Transform<'a> {
    SpdSqrt(&'a SpdMatrix),
    Scalar(f64),
}

impl Transform<'_> {
    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Transform::SpdSqrt(s) => s.apply(u),
            Transform::Scalar(sigma) => u * *sigma,
        }
    }
}

/// Ranks offspring center + T u_i by objective value, ascending.
///
/// Ties are broken by original index: a stable sort on the values, so equal
/// f-values keep their sampling order. Non-finite values are an error.
pub fn rank_offspring(
    f: &Objective,
    center: &DVector<f64>,
    transform: Transform<'_>,
    block: &SampleBlock,
) -> Result<Vec<usize>> {
    let mut values = Vec::with_capacity(block.u.len());
    for (i, u) in block.u.iter().enumerate() {
        let y = f.eval(&(center + transform.apply(u)));
        if !y.is_finite() {
            return Err(EsError::NonFiniteObjective { value: y, index: i });
        }
        values.push(y);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    Ok(order)
}

/// Selects the mu best raw samples according to a ranking permutation.
pub fn select(params: &ESParams, block: &SampleBlock, order: &[usize]) -> Vec<DVector<f64>> {
    order[..params.mu].iter().map(|&i| block.u[i].clone()).collect()
}

/// One step of the CMA variant: weighted mean shift and rank-mu covariance update.
pub fn cma_raw_step(
    params: &ESParams,
    state: &RawCmaState,
    f: &Objective,
    block: &SampleBlock,
) -> Result<RawCmaState> {
    let sqrt_c = state.c_mat.sqrt();
    let order = rank_offspring(f, &state.m, Transform::SpdSqrt(&sqrt_c), block)?;
    let sel = select(params, block, &order);

    let m_next = &state.m + sqrt_c.apply(&params.recombine(&sel));
    let outer = params.outer_sum(&sel);
    let c_next = state.c_mat.matrix() * (1.0 - params.c)
        + (sqrt_c.matrix() * outer * sqrt_c.matrix()) * params.c;
    Ok(RawCmaState {
        m: m_next,
        c_mat: SpdMatrix::new(symmetrize(&c_next)).expect("update preserves positive definiteness"),
    })
}

/// One step of the step-size ES: mean shift and multiplicative step-size update.
pub fn csa_raw_step(
    params: &ESParams,
    state: &RawCsaState,
    f: &Objective,
    block: &SampleBlock,
) -> Result<RawCsaState> {
    let order = rank_offspring(f, &state.m, Transform::Scalar(state.sigma), block)?;
    let sel = select(params, block, &order);
    let step = params.recombine(&sel);
    let m_next = &state.m + &step * state.sigma;
    let sigma_next = state.sigma * sigma_multiplier(params, &step);
    Ok(RawCsaState {
        m: m_next,
        sigma: sigma_next,
    })
}

/// exp((1/d_sigma)(sqrt(mu_eff) |step| / E|N(0,I)| - 1)), the step-size factor.
pub fn sigma_multiplier(params: &ESParams, step: &DVector<f64>) -> f64 {
    let ratio = params.mu_eff.sqrt() * step.norm() / expected_chi_norm(params.d);
    ((ratio - 1.0) / params.d_sigma).exp()
}

/// E |N(0, I_d)| = sqrt(2) Gamma((d+1)/2) / Gamma(d/2), via log-gamma.
pub fn expected_chi_norm(d: usize) -> f64 {
    assert!(d >= 1);
    let d = d as f64;
    (0.5 * std::f64::consts::LN_2 + ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::make_builtin;

    fn params(d: usize) -> ESParams {
        ESParams::equal_weights(d, 4, 2, 0.3, 1.0).unwrap()
    }

    #[test]
    fn param_validation() {
        assert!(ESParams::new(2, 4, 2, vec![0.5, 0.5], 0.3, 1.0).is_ok());
        assert!(ESParams::new(2, 1, 1, vec![1.0], 0.3, 1.0).is_err()); // lambda < 2
        assert!(ESParams::new(2, 4, 2, vec![0.3, 0.7], 0.3, 1.0).is_err()); // increasing
        assert!(ESParams::new(2, 4, 2, vec![0.6, 0.5], 0.3, 1.0).is_err()); // sum != 1
        assert!(ESParams::new(2, 4, 2, vec![0.5, 0.5], 1.0, 1.0).is_err()); // c on boundary
        assert!(ESParams::new(2, 4, 5, vec![0.2; 5], 0.3, 1.0).is_err()); // mu > lambda
    }

    #[test]
    fn mu_eff_default_is_sum_of_squares() {
        let p = ESParams::new(2, 4, 2, vec![0.7, 0.3], 0.3, 1.0).unwrap();
        assert!((p.mu_eff - (0.49 + 0.09)).abs() < 1e-15);
        let p = ESParams::with_mu_eff(2, 4, 2, vec![0.7, 0.3], 0.3, 1.0, 2.5).unwrap();
        assert_eq!(p.mu_eff, 2.5);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = params(3);
        let b1 = sample_population(&p, &mut GaussianStream::new(5));
        let b2 = sample_population(&p, &mut GaussianStream::new(5));
        for (u, v) in b1.u.iter().zip(&b2.u) {
            assert_eq!(u, v);
        }
    }

    #[test]
    fn ranking_sorts_and_breaks_ties_by_index() {
        // values (3, 1, 2) -> order (1, 2, 0)
        let f = Objective::new("x1", 1, |x| x[0]);
        let block = SampleBlock {
            u: vec![
                DVector::from_vec(vec![3.0]),
                DVector::from_vec(vec![1.0]),
                DVector::from_vec(vec![2.0]),
            ],
        };
        let order = rank_offspring(&f, &DVector::zeros(1), Transform::Scalar(1.0), &block).unwrap();
        assert_eq!(order, vec![1, 2, 0]);

        // all equal -> identity permutation
        let g = Objective::new("const", 1, |_| 0.0);
        let order = rank_offspring(&g, &DVector::zeros(1), Transform::Scalar(1.0), &block).unwrap();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn ranking_matches_brute_force_oracle() {
        // independent oracle: exhaustive comparison sort with the same tie rule
        let mut rng = GaussianStream::new(6);
        for _ in 0..1000 {
            let vals: Vec<f64> = (0..6).map(|_| (rng.normal() * 3.0).round()).collect();
            let vals2 = vals.clone();
            let f = Objective::new("lookup", 1, move |x| vals2[x[0] as usize]);
            let block = SampleBlock {
                u: (0..6).map(|i| DVector::from_vec(vec![i as f64])).collect(),
            };
            let order =
                rank_offspring(&f, &DVector::zeros(1), Transform::Scalar(1.0), &block).unwrap();
            let mut oracle: Vec<usize> = (0..6).collect();
            oracle.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap().then(i.cmp(&j)));
            assert_eq!(order, oracle);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = Objective::new("bad", 1, |_| f64::NAN);
        let block = SampleBlock {
            u: vec![DVector::zeros(1), DVector::zeros(1)],
        };
        assert!(rank_offspring(&f, &DVector::zeros(1), Transform::Scalar(1.0), &block).is_err());
    }

    #[test]
    fn cma_step_zero_samples() {
        let p = params(3);
        let f = make_builtin("sphere", 3, None).unwrap();
        let state = RawCmaState {
            m: DVector::from_vec(vec![1.0, -2.0, 0.5]),
            c_mat: SpdMatrix::identity(3),
        };
        let block = SampleBlock {
            u: vec![DVector::zeros(3); 4],
        };
        let next = cma_raw_step(&p, &state, &f, &block).unwrap();
        assert_eq!(next.m, state.m);
        let expected = DMatrix::identity(3, 3) * (1.0 - p.c);
        assert!((next.c_mat.matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn cma_step_single_direction() {
        // c = 0.5, C = I, single selected u = e1 -> C' = diag(1, 0.5, ..., 0.5)
        let p = ESParams::new(3, 2, 1, vec![1.0], 0.5, 1.0).unwrap();
        let f = make_builtin("linear", 3, Some(&[-1.0, 0.0, 0.0])).unwrap();
        // e1 minimizes -x1 among {e1, 0}; selected u = e1
        let block = SampleBlock {
            u: vec![DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::zeros(3)],
        };
        let state = RawCmaState {
            m: DVector::zeros(3),
            c_mat: SpdMatrix::identity(3),
        };
        let next = cma_raw_step(&p, &state, &f, &block).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.5]));
        assert!((next.c_mat.matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn determinant_ratio_bound_along_random_steps() {
        let p = params(5);
        let f = make_builtin("sphere", 5, None).unwrap();
        let mut rng = GaussianStream::new(7);
        let mut state = RawCmaState {
            m: DVector::from_element(5, 1.0),
            c_mat: SpdMatrix::identity(5),
        };
        for _ in 0..50 {
            let block = sample_population(&p, &mut rng);
            let next = cma_raw_step(&p, &state, &f, &block).unwrap();
            let ratio = next.c_mat.det_root() / state.c_mat.det_root();
            let max_norm_sq = block.u.iter().map(|u| u.norm_squared()).fold(0.0, f64::max);
            assert!(ratio >= 1.0 - p.c - 1e-12);
            assert!(ratio <= 1.0 - p.c + p.c * max_norm_sq + 1e-12);
            // SPD preserved: min eigenvalue >= (1-c) min eigenvalue of C
            let (prev_eigs, _) = state.c_mat.eigen();
            let (next_eigs, _) = next.c_mat.eigen();
            assert!(next_eigs.min() >= (1.0 - p.c) * prev_eigs.min() - 1e-12);
            state = next;
        }
    }

    #[test]
    fn csa_step_zero_samples() {
        let p = params(3);
        let f = make_builtin("sphere", 3, None).unwrap();
        let state = RawCsaState {
            m: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            sigma: 2.0,
        };
        let block = SampleBlock {
            u: vec![DVector::zeros(3); 4],
        };
        let next = csa_raw_step(&p, &state, &f, &block).unwrap();
        assert_eq!(next.m, state.m);
        let expected = 2.0 * (-1.0 / p.d_sigma).exp();
        assert!((next.sigma - expected).abs() < 1e-15);
    }

    #[test]
    fn csa_sigma_fixed_point_at_expected_norm() {
        // |sqrt(mu_eff) sum w_i u| equal to E|N(0,I)| leaves sigma unchanged
        let p = ESParams::new(2, 2, 1, vec![1.0], 0.3, 1.0).unwrap();
        let target = expected_chi_norm(2) / p.mu_eff.sqrt();
        let step = DVector::from_vec(vec![target, 0.0]);
        assert!((sigma_multiplier(&p, &step) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn csa_contracts_near_optimum_on_sphere() {
        // sign check only: tracking the optimum, log sigma ratios drift negative
        let d = 5;
        let p = ESParams::equal_weights(d, 10, 5, 0.3, 1.0).unwrap();
        let f = make_builtin("sphere", d, None).unwrap();
        let mut rng = GaussianStream::new(8);
        let mut state = RawCsaState {
            m: DVector::from_element(d, 1.0),
            sigma: 1.0,
        };
        let mut ratios = Vec::new();
        for _ in 0..500 {
            let block = sample_population(&p, &mut rng);
            let next = csa_raw_step(&p, &state, &f, &block).unwrap();
            ratios.push((next.sigma / state.sigma).ln());
            state = next;
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ratios[ratios.len() / 2] < 0.0);
    }

    #[test]
    fn expected_chi_norm_values() {
        // Monte Carlo oracle values, and the exact small-d closed forms
        assert!((expected_chi_norm(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((expected_chi_norm(1) - 0.7978845608).abs() < 1e-9);
        assert!((expected_chi_norm(2) - 1.2533141373).abs() < 1e-9);
    }

    #[test]
    fn expected_chi_norm_monotone_below_sqrt_d() {
        let mut prev = 0.0;
        for d in 1..=100 {
            let e = expected_chi_norm(d);
            assert!(e > prev);
            assert!(e < (d as f64).sqrt());
            prev = e;
        }
    }

    #[test]
    fn expected_chi_norm_monte_carlo() {
        let mut rng = GaussianStream::new(9);
        for d in [1usize, 2] {
            let n = 2_000_000usize;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let x = rng.normal_vector(d).norm();
                sum += x;
                sum_sq += x * x;
            }
            let mean = sum / n as f64;
            let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (expected_chi_norm(d) - mean).abs() < 3.0 * se + 1e-6,
                "d={d}: {mean} vs {}",
                expected_chi_norm(d)
            );
        }
    }
}
