//! Covariance matrices and the SPD factor/solve routines behind every gain
//! computation.

use serde::{Deserialize, Serialize};

use super::{Mat, NumericsError, Result};

/// Diagonal jitter tried, in order, when a Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-9, 1e-6];

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

/// A square symmetric positive-semidefinite matrix.
///
/// Construction through [`CovMat::new`] validates the invariants; the
/// unchecked constructor exists for hot paths whose output is validated by
/// the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovMat(Mat);

impl CovMat {
    pub fn new(m: Mat) -> Result<Self> {
        check_cov(&m, "covariance")?;
        Ok(Self(m))
    }

    pub fn new_unchecked(m: Mat) -> Self {
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(Mat::identity(n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self(Mat::identity(n).scale(s))
    }

    /// Diagonal covariance; entries must be nonnegative.
    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::new(Mat::diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn check(&self, name: &str) -> Result<()> {
        check_cov(&self.0, name)
    }
}

impl AsRef<Mat> for CovMat {
    fn as_ref(&self) -> &Mat {
        &self.0
    }
}

/// Validates the symmetry and PSD-within-jitter invariants.
pub fn check_cov(m: &Mat, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(NumericsError::Shape {
            op: "covariance",
            left: m.shape(),
            right: m.shape(),
        });
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite(name.to_string()));
    }
    let scale = 1.0 + m.max_abs();
    let mut asym: f64 = 0.0;
    for i in 0..m.rows() {
        for j in 0..i {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(NumericsError::NotSymmetric {
            name: name.to_string(),
            asymmetry: asym,
        });
    }
    let min_eig = min_eigenvalue(m);
    let tol = -PSD_TOL * (1.0 + m.trace() / m.rows().max(1) as f64);
    if min_eig < tol {
        return Err(NumericsError::NotPsd {
            name: name.to_string(),
            min_eigenvalue: min_eig,
        });
    }
    Ok(())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    let sym = symmetric_part(m);
    let eig = nalgebra::SymmetricEigen::new(sym.to_nalgebra());
    eig.eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn symmetric_part(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Returns `(m + mᵀ)/2`, with negative eigenvalues clamped to zero only when
/// the symmetric part fails the PSD tolerance.
pub fn symmetrize_psd(m: &Mat) -> Result<CovMat> {
    if !m.is_square() {
        return Err(NumericsError::Shape {
            op: "symmetrize_psd",
            left: m.shape(),
            right: m.shape(),
        });
    }
    let sym = symmetric_part(m);
    let tol = -PSD_TOL * (1.0 + sym.trace() / sym.rows().max(1) as f64);
    let eig = nalgebra::SymmetricEigen::new(sym.to_nalgebra());
    if eig.eigenvalues.iter().all(|v| *v >= tol) {
        return Ok(CovMat(sym));
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&clamped)
        * eig.eigenvectors.transpose();
    Ok(CovMat(symmetric_part(&Mat::from_nalgebra(&rebuilt))))
}

/// Lower-triangular Cholesky factor of `a + jitter·I`.
pub(crate) fn cholesky_with_jitter(a: &Mat, jitter: f64) -> Option<Mat> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Cholesky factor, escalating through [`JITTER_LADDER`] on failure.
pub fn cholesky(a: &Mat, name: &str) -> Result<Mat> {
    if !a.is_square() {
        return Err(NumericsError::Shape {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    JITTER_LADDER
        .iter()
        .find_map(|j| cholesky_with_jitter(a, *j))
        .ok_or_else(|| NumericsError::Singular(name.to_string()))
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub(crate) fn cholesky_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `a·x = b` for symmetric positive-definite `a` without forming the
/// inverse.
pub fn solve_spd(a: &Mat, b: &Mat, name: &str) -> Result<Mat> {
    if b.rows() != a.rows() {
        return Err(NumericsError::Shape {
            op: "solve_spd",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let l = cholesky(a, name)?;
    Ok(cholesky_solve(&l, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let g = Mat::from_vec(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        g.matmul(&g.transpose())
            .unwrap()
            .add(&Mat::identity(n).scale(0.1))
            .unwrap()
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let b = Mat::col(&[1.0, -2.0, 3.0]);
        assert_eq!(solve_spd(&Mat::identity(3), &b, "I").unwrap(), b);
    }

    #[test]
    fn diagonal_solve() {
        let x = solve_spd(&Mat::diag(&[2.0, 4.0]), &Mat::col(&[2.0, 8.0]), "D").unwrap();
        assert!(x.max_abs_diff(&Mat::col(&[1.0, 2.0])) < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = random_spd(4, &mut rng);
            let b =
                Mat::from_vec(4, 2, (0..8).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
            let x = solve_spd(&a, &b, "a").unwrap();
            let resid = a.matmul(&x).unwrap().max_abs_diff(&b);
            assert!(resid < 1e-9 * (1.0 + b.max_abs()), "residual {resid}");
        }
    }

    #[test]
    fn singular_matrix_names_offender() {
        let a = Mat::from_rows(&[[1.0, 2.0], [2.0, -10.0]]);
        match solve_spd(&a, &Mat::col(&[1.0, 1.0]), "P_z") {
            Err(NumericsError::Singular(name)) => assert_eq!(name, "P_z"),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(cholesky(&a, "rank1").is_ok());
    }

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let m = Mat::from_rows(&[[1.0, 0.5], [0.49, 1.0]]);
        let c = symmetrize_psd(&m).unwrap();
        let want = Mat::from_rows(&[[1.0, 0.495], [0.495, 1.0]]);
        assert!(c.as_mat().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn symmetrize_leaves_spd_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(3, &mut rng);
        let c = symmetrize_psd(&a).unwrap();
        assert!(c.as_mat().max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn symmetrize_clamps_negative_eigenvalue() {
        // Q diag(2, 1, -1e-3) Qᵀ with a rotation Q.
        let (c, s) = (0.6f64, 0.8f64);
        let q = Mat::from_rows(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
        let m = q
            .matmul(&Mat::diag(&[2.0, 1.0, -1e-3]))
            .unwrap()
            .matmul(&q.transpose())
            .unwrap();
        assert!(min_eigenvalue(&m) < -9e-4);
        let fixed = symmetrize_psd(&m).unwrap();
        assert!(min_eigenvalue(fixed.as_mat()) >= -1e-14);
        fixed.check("fixed").unwrap();
    }

    #[test]
    fn check_rejects_asymmetric_and_indefinite() {
        let asym = Mat::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(
            check_cov(&asym, "x"),
            Err(NumericsError::NotSymmetric { .. })
        ));
        assert!(matches!(
            check_cov(&Mat::diag(&[1.0, -0.1]), "x"),
            Err(NumericsError::NotPsd { .. })
        ));
        assert!(symmetrize_psd(&Mat::zeros(2, 3)).is_err());
    }
}
