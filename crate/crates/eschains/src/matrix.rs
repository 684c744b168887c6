//! Dense symmetric/SPD matrix kernel.
//!
//! Covers every matrix primitive the chains and the control model need:
//! SPD square roots, determinant-root normalization onto the unit-determinant
//! manifold, tangent-space projection, central-difference Jacobians and
//! numerical rank via SVD.

use nalgebra::{DMatrix, DVector};

use crate::error::{EsError, Result};

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const UNIT_DET_TOL: f64 = 1e-10;
pub const DEFAULT_RANK_TOL: f64 = 1e-6;
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Symmetric positive definite matrix. Symmetrized on construction,
/// rejected if any eigenvalue is not strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        assert_eq!(a.nrows(), a.ncols(), "square matrix required");
        let sym = symmetrize(&a);
        let eigs = sym.clone().symmetric_eigen().eigenvalues;
        let min_eig = eigs.min();
        if !(min_eig > 0.0) || !eigs.iter().all(|e| e.is_finite()) {
            return Err(EsError::NotSpd { min_eig });
        }
        Ok(SpdMatrix { mat: sym })
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix {
            mat: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    /// Sorted-descending eigenvalues and matching eigenvectors (columns).
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        let eig = self.mat.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let vals = DVector::from_fn(self.dim(), |i, _| eig.eigenvalues[order[i]]);
        let vecs = DMatrix::from_fn(self.dim(), self.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
        (vals, vecs)
    }

    /// The unique SPD square root, via eigendecomposition.
    pub fn sqrt(&self) -> SpdMatrix {
        self.map_eigenvalues(f64::sqrt)
    }

    /// The inverse SPD square root.
    pub fn inv_sqrt(&self) -> SpdMatrix {
        self.map_eigenvalues(|e| 1.0 / e.sqrt())
    }

    pub fn inverse(&self) -> SpdMatrix {
        self.map_eigenvalues(|e| 1.0 / e)
    }

    fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> SpdMatrix {
        let (vals, vecs) = self.eigen();
        let diag = DMatrix::from_diagonal(&vals.map(f));
        SpdMatrix {
            mat: symmetrize(&(&vecs * diag * vecs.transpose())),
        }
    }

    /// det(A)^(1/d) as exp of the mean log-eigenvalue; overflow-free for large d.
    pub fn det_root(&self) -> f64 {
        let (vals, _) = self.eigen();
        (vals.iter().map(|e| e.ln()).sum::<f64>() / self.dim() as f64).exp()
    }

    /// Splits A into (A / R(A), R(A)) with R the determinant root.
    pub fn unit_det_normalize(&self) -> (UnitDetSpd, f64) {
        let r = self.det_root();
        (
            UnitDetSpd {
                inner: SpdMatrix {
                    mat: &self.mat / r,
                },
            },
            r,
        )
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.mat * v
    }
}

/// SPD matrix on the unit-determinant manifold, renormalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDetSpd {
    inner: SpdMatrix,
}

impl UnitDetSpd {
    pub fn new(a: SpdMatrix) -> Self {
        a.unit_det_normalize().0
    }

    pub fn identity(d: usize) -> Self {
        UnitDetSpd {
            inner: SpdMatrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn as_spd(&self) -> &SpdMatrix {
        &self.inner
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.inner.matrix()
    }
}

/// Element of the tangent space R^d x ker(D det) at a unit-determinant base
/// point: a free vector part and a symmetric part H with trace(Sigma^-1 H) = 0.
#[derive(Debug, Clone)]
pub struct TangentVector {
    pub h_z: DVector<f64>,
    pub h_sigma: DMatrix<f64>,
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// SPD square root as a free function.
pub fn spd_sqrt(a: &SpdMatrix) -> SpdMatrix {
    a.sqrt()
}

pub fn det_root(a: &SpdMatrix) -> f64 {
    a.det_root()
}

pub fn unit_det_normalize(a: &SpdMatrix) -> (UnitDetSpd, f64) {
    a.unit_det_normalize()
}

/// Projects (h_z, H) onto the tangent space at Sigma by removing the
/// component along Sigma: H - (trace(Sigma^-1 H)/d) Sigma.
pub fn tangent_project(sigma: &UnitDetSpd, h_z: DVector<f64>, h: &DMatrix<f64>) -> TangentVector {
    let d = sigma.dim() as f64;
    let h = symmetrize(h);
    let t = (sigma.as_spd().inverse().matrix() * &h).trace();
    TangentVector {
        h_z,
        h_sigma: &h - sigma.matrix() * (t / d),
    }
}

/// Central-difference Jacobian of `f` at `x`, one column per coordinate.
pub fn numeric_jacobian(
    f: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    assert!(h > 0.0);
    let m = x.len();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

/// Count of singular values above `tol` times the largest one.
pub fn numeric_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    assert!(tol > 0.0);
    let svals = m.clone().svd(false, false).singular_values;
    let top = svals.max();
    if top == 0.0 || !top.is_finite() {
        return 0;
    }
    svals.iter().filter(|&&s| s > tol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;
    use approx::assert_abs_diff_eq;

    fn random_spd(d: usize, rng: &mut GaussianStream) -> SpdMatrix {
        // A = B B^T + I guarantees strict positive definiteness
        let b = DMatrix::from_fn(d, d, |_, _| rng.normal());
        SpdMatrix::new(&b * b.transpose() + DMatrix::identity(d, d)).unwrap()
    }

    fn frob(a: &DMatrix<f64>) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn rejects_non_spd() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(SpdMatrix::new(a).is_err());
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SpdMatrix::new(sing).is_err());
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i2 = SpdMatrix::identity(2);
        assert_abs_diff_eq!(frob(&(spd_sqrt(&i2).matrix() - i2.matrix())), 0.0, epsilon = 1e-14);

        let a = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        let s = spd_sqrt(&a);
        assert_abs_diff_eq!(s.matrix()[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.matrix()[(1, 1)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_reconstructs_random_spd() {
        let mut rng = GaussianStream::new(1);
        for d in [2, 5, 20] {
            let a = random_spd(d, &mut rng);
            let s = spd_sqrt(&a);
            let back = s.matrix() * s.matrix();
            let rel = frob(&(&back - a.matrix())) / frob(a.matrix());
            assert!(rel < 1e-10, "d={d} rel={rel:.3e}");
        }
    }

    #[test]
    fn det_root_cases() {
        assert_abs_diff_eq!(det_root(&SpdMatrix::identity(4)), 1.0, epsilon = 1e-12);
        let two_i = SpdMatrix::new(DMatrix::identity(2, 2) * 2.0).unwrap();
        assert_abs_diff_eq!(det_root(&two_i), 2.0, epsilon = 1e-12);

        // LU determinant oracle on a random SPD matrix
        let mut rng = GaussianStream::new(2);
        let a = random_spd(6, &mut rng);
        let det_lu = a.matrix().clone().lu().determinant();
        let r = det_root(&a);
        assert!((r.powi(6) - det_lu).abs() / det_lu < 1e-10);
    }

    #[test]
    fn unit_det_normalize_cases() {
        let (u, r) = unit_det_normalize(&SpdMatrix::identity(3));
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frob(&(u.matrix() - DMatrix::identity(3, 3))), 0.0, epsilon = 1e-12);

        let (u, r) = unit_det_normalize(&SpdMatrix::new(DMatrix::identity(3, 3) * 3.0).unwrap());
        assert_abs_diff_eq!(r, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frob(&(u.matrix() - DMatrix::identity(3, 3))), 0.0, epsilon = 1e-12);

        let mut rng = GaussianStream::new(3);
        let (u, _) = unit_det_normalize(&random_spd(7, &mut rng));
        let det = u.matrix().clone().lu().determinant();
        assert!((det - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tangent_project_cases() {
        let d = 3;
        let id = UnitDetSpd::identity(d);
        // I at base I projects to zero
        let t = tangent_project(&id, DVector::zeros(d), &DMatrix::identity(d, d));
        assert_abs_diff_eq!(frob(&t.h_sigma), 0.0, epsilon = 1e-12);

        // traceless H at base I is unchanged
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, -1.0]);
        let t = tangent_project(&UnitDetSpd::identity(2), DVector::zeros(2), &h);
        assert_abs_diff_eq!(frob(&(&t.h_sigma - &h)), 0.0, epsilon = 1e-12);

        // random base point: trace(Sigma^-1 output) = 0, and idempotence
        let mut rng = GaussianStream::new(4);
        let sigma = UnitDetSpd::new(random_spd(4, &mut rng));
        let h = {
            let b = DMatrix::from_fn(4, 4, |_, _| rng.normal());
            symmetrize(&b)
        };
        let t = tangent_project(&sigma, DVector::zeros(4), &h);
        let trace = (sigma.as_spd().inverse().matrix() * &t.h_sigma).trace();
        assert!(trace.abs() < 1e-10);
        let t2 = tangent_project(&sigma, DVector::zeros(4), &t.h_sigma);
        assert!(frob(&(&t2.h_sigma - &t.h_sigma)) < 1e-12);
    }

    #[test]
    fn jacobian_exact_on_linear_maps() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.5]);
        let m2 = m.clone();
        let mut f = move |x: &DVector<f64>| &m2 * x;
        let j = numeric_jacobian(&mut f, &DVector::from_vec(vec![0.3, -0.7, 1.1]), 1e-5);
        // central differences are exact on linear maps up to cancellation noise
        assert!(frob(&(&j - &m)) < 1e-10);
    }

    #[test]
    fn jacobian_scalar_square() {
        let mut f = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0]]);
        let j = numeric_jacobian(&mut f, &DVector::from_vec(vec![3.0]), 1e-5);
        assert!((j[(0, 0)] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_second_order_convergence() {
        // cubic map: truncation error O(h^2), so halving h divides error by ~4
        let mut f = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0] * x[0]]);
        let x = DVector::from_vec(vec![1.0]);
        let err = |h: f64| {
            let mut f2 = |x: &DVector<f64>| f(x);
            (numeric_jacobian(&mut f2, &x, h)[(0, 0)] - 3.0).abs()
        };
        let ratio = err(1e-3) / err(5e-4);
        assert!((2.5..6.0).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn rank_cases() {
        assert_eq!(numeric_rank(&DMatrix::zeros(3, 3), DEFAULT_RANK_TOL), 0);
        assert_eq!(numeric_rank(&DMatrix::identity(3, 3), DEFAULT_RANK_TOL), 3);

        // rank-2 by construction: u v^T + w x^T with independent vectors
        let u = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let v = DVector::from_vec(vec![0.5, 1.0, 0.0]);
        let w = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![2.0, -1.0, 1.0]);
        let m = u * v.transpose() + w * x.transpose();
        assert_eq!(numeric_rank(&m, DEFAULT_RANK_TOL), 2);
    }
}
