//! Python bindings for the evolution-strategy chain library.
//!
//! Exposes parameter construction, normalized chain runs, steering paths,
//! selection-probability estimates, and the convergence-rate estimator.

use nalgebra::DVector;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use eschains::{
    cr_estimate, extended_map, make_builtin, q_estimate, steer_cma, steer_csa,
    verify_conjugacy_cma, ChainKind, ChainState, ESParams, GaussianStream, NormalizedCmaState,
    NormalizedCsaState, RawCmaState, SpdMatrix, UnitDetSpd,
};

fn to_py_err(e: eschains::EsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<ChainKind> {
    match kind {
        "cma" => Ok(ChainKind::Cma),
        "csa" => Ok(ChainKind::Csa),
        other => Err(PyValueError::new_err(format!("unknown chain kind {other:?}"))),
    }
}

#[pyclass(name = "Params")]
#[derive(Clone)]
struct PyParams {
    inner: ESParams,
}

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (d, lambda_, mu, c, d_sigma, weights = None, mu_eff = None))]
    fn new(
        d: usize,
        lambda_: usize,
        mu: usize,
        c: f64,
        d_sigma: f64,
        weights: Option<Vec<f64>>,
        mu_eff: Option<f64>,
    ) -> PyResult<Self> {
        let w = weights.unwrap_or_else(|| vec![1.0 / mu as f64; mu]);
        let inner = match mu_eff {
            Some(me) => ESParams::with_mu_eff(d, lambda_, mu, w, c, d_sigma, me),
            None => ESParams::new(d, lambda_, mu, w, c, d_sigma),
        }
        .map_err(to_py_err)?;
        Ok(PyParams { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn mu_eff(&self) -> f64 {
        self.inner.mu_eff
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Params(d={}, lambda={}, mu={}, c={}, d_sigma={})",
            self.inner.d, self.inner.lambda, self.inner.mu, self.inner.c, self.inner.d_sigma
        )
    }
}

/// Runs the normalized chain for `steps` steps from the default start and
/// returns the z trajectory as a list of lists.
#[pyfunction]
fn run_chain(
    kind: &str,
    params: &PyParams,
    objective: &str,
    seed: u64,
    steps: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let kind = parse_kind(kind)?;
    let p = &params.inner;
    let f = make_builtin(objective, p.d, None).map_err(to_py_err)?;
    let mut rng = GaussianStream::new(seed);
    let mut out = Vec::with_capacity(steps + 1);
    match kind {
        ChainKind::Cma => {
            let mut s = NormalizedCmaState {
                z: DVector::from_element(p.d, 1.0),
                sigma: UnitDetSpd::identity(p.d),
            };
            out.push(s.z.iter().copied().collect());
            for k in 0..steps {
                let (next, _, _) =
                    eschains::cma_chain_step(p, &s, &f, &mut rng, k).map_err(to_py_err)?;
                s = next;
                out.push(s.z.iter().copied().collect());
            }
        }
        ChainKind::Csa => {
            let mut s = NormalizedCsaState {
                z: DVector::from_element(p.d, 1.0),
            };
            out.push(s.z.iter().copied().collect());
            for k in 0..steps {
                let (next, _, _) =
                    eschains::csa_chain_step(p, &s, &f, &mut rng, k).map_err(to_py_err)?;
                s = next;
                out.push(s.z.iter().copied().collect());
            }
        }
    }
    Ok(out)
}

/// Steering path to the attractor; returns (path, endpoint_error) where the
/// path is a list of steps, each a list of mu selected d-vectors.
#[pyfunction]
#[pyo3(signature = (kind, params, z, sigma = None))]
fn steer(
    kind: &str,
    params: &PyParams,
    z: Vec<f64>,
    sigma: Option<Vec<Vec<f64>>>,
) -> PyResult<(Vec<Vec<Vec<f64>>>, f64)> {
    let kind = parse_kind(kind)?;
    let p = &params.inner;
    if z.len() != p.d {
        return Err(PyValueError::new_err("z must have length d"));
    }
    let z = DVector::from_vec(z);
    let (start, path) = match kind {
        ChainKind::Cma => {
            let mat = match sigma {
                Some(rows) => {
                    let m = nalgebra::DMatrix::from_fn(p.d, p.d, |i, j| rows[i][j]);
                    let spd = SpdMatrix::new(m).map_err(to_py_err)?;
                    UnitDetSpd::new(spd.unit_det_normalize().0.as_spd().clone())
                }
                None => UnitDetSpd::identity(p.d),
            };
            let s = NormalizedCmaState { z, sigma: mat };
            let path = steer_cma(p, &s, 1e-9).map_err(to_py_err)?;
            (ChainState::Cma(s), path)
        }
        ChainKind::Csa => {
            let s = NormalizedCsaState { z };
            let path = steer_csa(p, &s);
            (ChainState::Csa(s), path)
        }
    };
    let err = extended_map(p, &start, &path).distance(&ChainState::target(kind, p.d));
    let steps = path
        .steps
        .iter()
        .map(|s| s.v.clone())
        .collect::<Vec<Vec<Vec<f64>>>>();
    Ok((steps, err))
}

/// Convergence-rate estimate; returns (mean, std_error, ci_low, ci_high).
#[pyfunction]
fn cr(
    kind: &str,
    params: &PyParams,
    objective: &str,
    burn_in: usize,
    steps: usize,
    replicas: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64, f64)> {
    let kind = parse_kind(kind)?;
    let p = &params.inner;
    let f = make_builtin(objective, p.d, None).map_err(to_py_err)?;
    let e = cr_estimate(kind, p, &f, burn_in, steps, replicas, seed).map_err(to_py_err)?;
    Ok((e.mean, e.std_error, e.ci95.0, e.ci95.1))
}

/// Probability that a fresh standard-normal candidate beats the candidate
/// at u, at the attractor state; returns (q, std_error).
#[pyfunction]
fn selection_q(objective: &str, u: Vec<f64>, samples: usize, seed: u64) -> PyResult<(f64, f64)> {
    let d = u.len();
    let f = make_builtin(objective, d, None).map_err(to_py_err)?;
    let state = ChainState::target(ChainKind::Cma, d);
    let mut rng = GaussianStream::new(seed);
    let est = q_estimate(&f, &state, &DVector::from_vec(u), samples, &mut rng);
    Ok((est.q, est.std_error))
}

/// Max deviation between the normalized raw trajectory and the normalized
/// chain over `steps` steps with a shared seed.
#[pyfunction]
fn conjugacy_deviation(
    params: &PyParams,
    objective: &str,
    steps: usize,
    seed: u64,
) -> PyResult<f64> {
    let p = &params.inner;
    let f = make_builtin(objective, p.d, None).map_err(to_py_err)?;
    let raw0 = RawCmaState {
        m: DVector::from_element(p.d, 1.0),
        c_mat: SpdMatrix::identity(p.d),
    };
    let rep = verify_conjugacy_cma(p, &f, &raw0, &DVector::zeros(p.d), steps, seed)
        .map_err(to_py_err)?;
    Ok(rep.max_deviation)
}

#[pymodule]
fn eschains_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(run_chain, m)?)?;
    m.add_function(wrap_pyfunction!(steer, m)?)?;
    m.add_function(wrap_pyfunction!(cr, m)?)?;
    m.add_function(wrap_pyfunction!(selection_q, m)?)?;
    m.add_function(wrap_pyfunction!(conjugacy_deviation, m)?)?;
    Ok(())
}
