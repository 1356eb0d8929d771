use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{cholesky, solve_spd, symmetrize_psd, CovMat, Mat};
use crate::ssm::{draw, noise_factor, NominalModel};
use crate::{Error, Result};

/// Gaussian state belief `(x̂, P)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Mat,
    pub cov: CovMat,
}

impl GaussianBelief {
    pub fn new(mean: Mat, cov: CovMat) -> Self {
        Self { mean, cov }
    }

    /// Initial belief centred on `x0 + e`, `e ~ N(0, p0)`, with covariance
    /// `p0`. The draw depends only on `(seed, id)`.
    pub fn perturbed(x0: &Mat, p0: &CovMat, seed: u64, id: u64) -> Result<Self> {
        let mix = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);
        let e = draw(&mut rng, &noise_factor(p0)?);
        Ok(Self {
            mean: x0.add(&e)?,
            cov: p0.clone(),
        })
    }
}

/// Kalman filter step. Only defined for models with linear `f` and `h`.
pub fn kf_step(b: &GaussianBelief, m: &NominalModel, z: &Mat) -> Result<GaussianBelief> {
    if m.linear_matrices().is_none() {
        return Err(Error::Inapplicable(
            "the Kalman filter needs linear dynamics and observation".into(),
        ));
    }
    ekf_step(b, m, z)
}

/// Extended Kalman filter step: first-order propagation through `f` and `h`.
pub fn ekf_step(b: &GaussianBelief, m: &NominalModel, z: &Mat) -> Result<GaussianBelief> {
    let f_jac = m.f_jacobian(&b.mean)?;
    let x_pred = m.f(&b.mean)?;
    let p_pred = f_jac
        .matmul(b.cov.as_mat())?
        .matmul(&f_jac.transpose())?
        .add(m.q.as_mat())?;

    let h_jac = m.h_jacobian(&x_pred)?;
    let z_pred = m.h(&x_pred)?;
    let p_xz = p_pred.matmul(&h_jac.transpose())?;
    let p_z = h_jac.matmul(&p_xz)?.add(m.r.as_mat())?;
    let p_z = symmetrize_psd(&p_z)?;
    update(x_pred, p_pred, p_xz, p_z.as_mat(), &z.sub(&z_pred)?)
}

/// Shared measurement update given predicted moments.
fn update(
    x_pred: Mat,
    p_pred: Mat,
    p_xz: Mat,
    p_z: &Mat,
    innovation: &Mat,
) -> Result<GaussianBelief> {
    // gain_t = (P_z)⁻¹ P_xzᵀ, so K = gain_tᵀ.
    let gain_t = solve_spd(p_z, &p_xz.transpose(), "innovation covariance")?;
    let mean = x_pred.add(&gain_t.transpose().matmul(innovation)?)?;
    let cov = p_pred.sub(&p_xz.matmul(&gain_t)?)?;
    Ok(GaussianBelief {
        mean,
        cov: symmetrize_psd(&cov)?,
    })
}

/// Unscented transform scaling parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

struct SigmaPoints {
    points: Vec<Mat>,
    wm: Vec<f64>,
    wc: Vec<f64>,
}

fn sigma_points(mean: &Mat, cov: &Mat, p: &UkfParams) -> Result<SigmaPoints> {
    let n = mean.rows();
    let nf = n as f64;
    let lambda = p.alpha * p.alpha * (nf + p.kappa) - nf;
    let spread = nf + lambda;
    let l = cholesky(&cov.scale(spread), "sigma-point covariance")?;
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mean.clone());
    for sign in [1.0, -1.0] {
        for j in 0..n {
            let mut pt = mean.clone();
            for i in 0..n {
                pt[(i, 0)] += sign * l[(i, j)];
            }
            points.push(pt);
        }
    }
    let w = 1.0 / (2.0 * spread);
    let mut wm = vec![w; 2 * n + 1];
    let mut wc = wm.clone();
    wm[0] = lambda / spread;
    wc[0] = lambda / spread + (1.0 - p.alpha * p.alpha + p.beta);
    Ok(SigmaPoints { points, wm, wc })
}

fn weighted_mean(ys: &[Mat], w: &[f64]) -> Mat {
    let mut out = Mat::zeros(ys[0].rows(), 1);
    for (y, wi) in ys.iter().zip(w) {
        out.add_assign(&y.scale(*wi));
    }
    out
}

fn weighted_cross(a: &[Mat], am: &Mat, b: &[Mat], bm: &Mat, w: &[f64]) -> Result<Mat> {
    let mut out = Mat::zeros(am.rows(), bm.rows());
    for ((ai, bi), wi) in a.iter().zip(b).zip(w) {
        let da = ai.sub(am)?;
        let db = bi.sub(bm)?;
        out.add_assign(&da.matmul(&db.transpose())?.scale(*wi));
    }
    Ok(out)
}

/// Unscented Kalman filter step with `2n+1` sigma points.
pub fn ukf_step(
    b: &GaussianBelief,
    m: &NominalModel,
    z: &Mat,
    params: &UkfParams,
) -> Result<GaussianBelief> {
    let sp = sigma_points(&b.mean, b.cov.as_mat(), params)?;
    let fx: Vec<Mat> = sp.points.iter().map(|x| m.f(x)).collect::<Result<_>>()?;
    let x_pred = weighted_mean(&fx, &sp.wm);
    let p_pred = weighted_cross(&fx, &x_pred, &fx, &x_pred, &sp.wc)?.add(m.q.as_mat())?;
    let p_pred = symmetrize_psd(&p_pred)?;

    let sp = sigma_points(&x_pred, p_pred.as_mat(), params)?;
    let hx: Vec<Mat> = sp.points.iter().map(|x| m.h(x)).collect::<Result<_>>()?;
    let z_pred = weighted_mean(&hx, &sp.wm);
    let p_z = weighted_cross(&hx, &z_pred, &hx, &z_pred, &sp.wc)?.add(m.r.as_mat())?;
    let p_z = symmetrize_psd(&p_z)?;
    let p_xz = weighted_cross(&sp.points, &x_pred, &hx, &z_pred, &sp.wc)?;
    update(
        x_pred,
        p_pred.into_mat(),
        p_xz,
        p_z.as_mat(),
        &z.sub(&z_pred)?,
    )
}

/// Predicted measurement mean and covariance of the unscented transform of
/// `h` under `N(mean, cov)`, without measurement noise.
pub fn unscented_measurement(
    mean: &Mat,
    cov: &Mat,
    h: impl Fn(&Mat) -> Result<Mat>,
    params: &UkfParams,
) -> Result<(Mat, Mat)> {
    let sp = sigma_points(mean, cov, params)?;
    let hx: Vec<Mat> = sp.points.iter().map(h).collect::<Result<_>>()?;
    let z = weighted_mean(&hx, &sp.wm);
    let p = weighted_cross(&hx, &z, &hx, &z, &sp.wc)?;
    Ok((z, p))
}
