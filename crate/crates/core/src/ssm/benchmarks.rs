//! Benchmark model pieces and the mismatch scenarios built from them.

use serde::{Deserialize, Serialize};

use super::model::{Dynamics, NominalModel, Observation};
use super::scenario::{Scenario, TrueProcess};
use crate::numerics::{CovMat, Mat};
use crate::{Error, Result};

/// Lorenz coefficients as they enter `A(x)`: row 0 uses `SIGMA`, row 1
/// `BETA`, row 2 `RHO`. The naming swaps the conventional roles of rho and
/// beta, but the resulting matrix is the standard chaotic system.
pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 8.0 / 3.0;
pub const LORENZ_BETA: f64 = 28.0;

/// Planar rotation by `theta_deg` degrees.
pub fn rotation2(theta_deg: f64) -> Mat {
    let (s, c) = theta_deg.to_radians().sin_cos();
    Mat::from_rows(&[[c, -s], [s, c]])
}

/// `F` and `H` of the linear benchmark for `d = d_x = d_z`.
///
/// `F[i][j] = 1` when `i == j` or `i == 0`; `H[i][j] = 1` when
/// `i == d - 1 - j` or `i == 0` (zero-based).
pub fn linear_benchmark_matrices(d: usize) -> (Mat, Mat) {
    let mut f = Mat::zeros(d, d);
    let mut h = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i == j || i == 0 {
                f[(i, j)] = 1.0;
            }
            if i + j == d - 1 || i == 0 {
                h[(i, j)] = 1.0;
            }
        }
    }
    (f, h)
}

/// `A(x)` of the Lorenz system; depends on `x` only through `x[0]`.
pub fn lorenz_a(x: &Mat) -> Result<Mat> {
    if x.shape() != (3, 1) {
        return Err(Error::Config(format!(
            "Lorenz state must be 3x1, got {:?}",
            x.shape()
        )));
    }
    let x1 = x[(0, 0)];
    Ok(Mat::from_rows(&[
        [-LORENZ_SIGMA, LORENZ_SIGMA, 0.0],
        [LORENZ_BETA, -1.0, -x1],
        [0.0, x1, -LORENZ_RHO],
    ]))
}

/// `dA/dx[0]`.
pub(crate) fn lorenz_a_sensitivity() -> Mat {
    Mat::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
}

/// Discrete transition `F(x) = I + Σ_{j=1..order} (A(x) dt)^j / j!`.
pub fn lorenz_transition(x: &Mat, dt: f64, order: usize) -> Result<Mat> {
    if order == 0 || !(dt > 0.0) {
        return Err(Error::Config(format!(
            "Lorenz series needs order >= 1 and dt > 0 (order = {order}, dt = {dt})"
        )));
    }
    let m = lorenz_a(x)?.scale(dt);
    let mut term = Mat::identity(3);
    let mut out = Mat::identity(3);
    for j in 1..=order {
        term = term.matmul(&m)?.scale(1.0 / j as f64);
        out.add_assign(&term);
    }
    Ok(out)
}

/// Range and azimuth `[sqrt(x²+y²), atan2(y, x)]` of the leading position.
pub fn radar_h(x: &Mat) -> Result<Mat> {
    let (px, py) = radar_position(x)?;
    Ok(Mat::col(&[px.hypot(py), py.atan2(px)]))
}

/// Analytic Jacobian of [`radar_h`], `2 x d_x`.
pub fn radar_jacobian(x: &Mat) -> Result<Mat> {
    let (px, py) = radar_position(x)?;
    let r2 = px * px + py * py;
    let r = r2.sqrt();
    let mut jac = Mat::zeros(2, x.rows());
    jac[(0, 0)] = px / r;
    jac[(0, 1)] = py / r;
    jac[(1, 0)] = -py / r2;
    jac[(1, 1)] = px / r2;
    Ok(jac)
}

fn radar_position(x: &Mat) -> Result<(f64, f64)> {
    if x.cols() != 1 || x.rows() < 2 {
        return Err(Error::Config(format!(
            "radar state must be a column with >= 2 rows, got {:?}",
            x.shape()
        )));
    }
    let (px, py) = (x[(0, 0)], x[(1, 0)]);
    if px == 0.0 && py == 0.0 {
        return Err(Error::DegenerateGeometry(
            "radar measurement undefined at the sensor origin".into(),
        ));
    }
    Ok((px, py))
}

/// Constant-velocity transition for `[x, y, vx, vy]`.
pub fn cv_model(dt: f64) -> Mat {
    Mat::from_rows(&[
        [1.0, 0.0, dt, 0.0],
        [0.0, 1.0, 0.0, dt],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
}

/// Measurement matrix selecting the velocity of `[x, y, vx, vy]`.
pub fn cv_velocity_observation() -> Mat {
    Mat::from_rows(&[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
}

/// Rotated linear benchmark: data from `F, H`, filter given `T F, T H`.
pub fn linear_benchmark(
    theta_deg: f64,
    q: f64,
    r: f64,
    horizon: usize,
) -> (Scenario, NominalModel) {
    let (f, h) = linear_benchmark_matrices(2);
    let t = rotation2(theta_deg);
    let scenario = Scenario {
        name: format!("linear(theta={theta_deg})"),
        truth: TrueProcess::Linear {
            f: f.clone(),
            h: h.clone(),
        },
        process_noise: CovMat::scaled_identity(2, q * q),
        measurement_noise: CovMat::scaled_identity(2, r * r),
        horizon,
        x0_mean: vec![0.0; 2],
        x0_cov: CovMat::identity(2),
    };
    let nominal = NominalModel {
        dynamics: Dynamics::Linear {
            f: t.matmul(&f).expect("2x2"),
        },
        observation: Observation::Linear {
            h: t.matmul(&h).expect("2x2"),
        },
        q: CovMat::scaled_identity(2, q * q),
        r: CovMat::scaled_identity(2, r * r),
    };
    (scenario, nominal)
}

/// Parameters of the Lorenz mismatch benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzSetup {
    pub theta_deg: f64,
    pub q: f64,
    pub r: f64,
    pub horizon: usize,
    pub dt: f64,
    pub order_true: usize,
    pub order_nominal: usize,
}

impl Default for LorenzSetup {
    fn default() -> Self {
        Self {
            theta_deg: 10.0,
            q: 0.1,
            r: 1.0,
            horizon: 200,
            dt: 0.005,
            order_true: 5,
            order_nominal: 1,
        }
    }
}

/// Identity observation of the Lorenz state with the (x1, x2) plane rotated.
pub fn lorenz_rotated_observation(theta_deg: f64) -> Mat {
    let t = rotation2(theta_deg);
    Mat::from_rows(&[
        [t[(0, 0)], t[(0, 1)], 0.0],
        [t[(1, 0)], t[(1, 1)], 0.0],
        [0.0, 0.0, 1.0],
    ])
}

/// Lorenz benchmark: data from the high-order series with a rotated
/// observation, filter given the low-order series and identity observation.
pub fn lorenz_benchmark(setup: &LorenzSetup) -> (Scenario, NominalModel) {
    let scenario = Scenario {
        name: format!(
            "lorenz(theta={}, J={}/{})",
            setup.theta_deg, setup.order_true, setup.order_nominal
        ),
        truth: TrueProcess::Lorenz {
            dt: setup.dt,
            order: setup.order_true,
            h: lorenz_rotated_observation(setup.theta_deg),
        },
        process_noise: CovMat::scaled_identity(3, setup.q * setup.q),
        measurement_noise: CovMat::scaled_identity(3, setup.r * setup.r),
        horizon: setup.horizon,
        x0_mean: vec![1.0; 3],
        x0_cov: CovMat::scaled_identity(3, 0.1),
    };
    let nominal = NominalModel {
        dynamics: Dynamics::Lorenz {
            dt: setup.dt,
            order: setup.order_nominal,
        },
        observation: Observation::Linear {
            h: Mat::identity(3),
        },
        q: CovMat::scaled_identity(3, setup.q * setup.q),
        r: CovMat::scaled_identity(3, setup.r * setup.r),
    };
    (scenario, nominal)
}

/// Parameters of the maneuvering-target radar benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarSetup {
    pub dt: f64,
    pub q: f64,
    pub sigma_d: f64,
    pub sigma_mu_deg: f64,
    pub horizon: usize,
    pub turn_rate_deg: f64,
    pub segment: usize,
}

impl Default for RadarSetup {
    fn default() -> Self {
        Self {
            dt: 4.0,
            q: 10f64.sqrt(),
            sigma_d: 50.0,
            sigma_mu_deg: 0.1,
            horizon: 50,
            turn_rate_deg: 3.0,
            segment: 10,
        }
    }
}

/// Constant-velocity filter with radar measurements against a target that
/// alternates straight flight and coordinated turns.
pub fn radar_benchmark(setup: &RadarSetup) -> (Scenario, NominalModel) {
    let r = CovMat::new_unchecked(Mat::diag(&[
        setup.sigma_d.powi(2),
        setup.sigma_mu_deg.to_radians().powi(2),
    ]));
    let scenario = Scenario {
        name: format!(
            "radar(sigma_d={}, sigma_mu={})",
            setup.sigma_d, setup.sigma_mu_deg
        ),
        truth: TrueProcess::Maneuvering {
            dt: setup.dt,
            turn_rate_deg: setup.turn_rate_deg,
            segment: setup.segment,
        },
        process_noise: CovMat::scaled_identity(4, setup.q * setup.q),
        measurement_noise: r.clone(),
        horizon: setup.horizon,
        x0_mean: vec![20_000.0, 10_000.0, -150.0, 0.0],
        x0_cov: CovMat::new_unchecked(Mat::diag(&[1e4, 1e4, 100.0, 100.0])),
    };
    let nominal = NominalModel {
        dynamics: Dynamics::Linear {
            f: cv_model(setup.dt),
        },
        observation: Observation::Radar { d_x: 4 },
        q: CovMat::scaled_identity(4, setup.q * setup.q),
        r,
    };
    (scenario, nominal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_cases() {
        assert!(rotation2(0.0).max_abs_diff(&Mat::identity(2)) < 1e-15);
        let quarter = Mat::from_rows(&[[0.0, -1.0], [1.0, 0.0]]);
        assert!(rotation2(90.0).max_abs_diff(&quarter) < 1e-15);
        let ten = Mat::from_rows(&[[0.9848, -0.1736], [0.1736, 0.9848]]);
        assert!(rotation2(10.0).max_abs_diff(&ten) < 1e-4);
    }

    #[test]
    fn linear_matrices_at_two() {
        let (f, h) = linear_benchmark_matrices(2);
        assert_eq!(f, Mat::from_rows(&[[1.0, 1.0], [0.0, 1.0]]));
        assert_eq!(h, Mat::from_rows(&[[1.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn zero_rotation_gives_true_model() {
        let (scenario, nominal) = linear_benchmark(0.0, 1.0, 1.0, 20);
        assert_eq!(scenario.accurate_model().unwrap(), nominal);
    }

    #[test]
    fn lorenz_a_at_origin() {
        let a = lorenz_a(&Mat::col(&[0.0, 0.0, 0.0])).unwrap();
        let want = Mat::from_rows(&[
            [-10.0, 10.0, 0.0],
            [28.0, -1.0, 0.0],
            [0.0, 0.0, -8.0 / 3.0],
        ]);
        assert!(a.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn lorenz_first_order_truncation() {
        let x = Mat::col(&[2.0, -1.0, 3.0]);
        let f = lorenz_transition(&x, 0.02, 1).unwrap();
        let want = Mat::identity(3)
            .add(&lorenz_a(&x).unwrap().scale(0.02))
            .unwrap();
        assert!(f.max_abs_diff(&want) < 1e-15);
    }

    /// Term-by-term partial sum with each power formed from scratch.
    fn series_oracle(x: &Mat, dt: f64, order: usize) -> Mat {
        let m = lorenz_a(x).unwrap().scale(dt);
        let mut sum = Mat::identity(3);
        for j in 1..=order {
            let mut power = Mat::identity(3);
            for _ in 0..j {
                power = power.matmul(&m).unwrap();
            }
            let fact: f64 = (1..=j).map(|v| v as f64).product();
            sum = sum.add(&power.scale(1.0 / fact)).unwrap();
        }
        sum
    }

    #[test]
    fn lorenz_series_matches_oracle() {
        let x = Mat::col(&[1.0, 1.0, 1.0]);
        let f = lorenz_transition(&x, 0.02, 5).unwrap();
        assert!(f.max_abs_diff(&series_oracle(&x, 0.02, 5)) < 1e-14);
        let y = Mat::col(&[-7.5, 3.25, 21.0]);
        for order in 1..=8 {
            let f = lorenz_transition(&y, 0.05, order).unwrap();
            assert!(f.max_abs_diff(&series_oracle(&y, 0.05, order)) < 1e-13);
        }
    }

    #[test]
    fn radar_cases() {
        let z = radar_h(&Mat::col(&[3.0, 4.0, 0.0, 0.0])).unwrap();
        assert!((z[(0, 0)] - 5.0).abs() < 1e-15);
        assert!((z[(1, 0)] - (4.0f64 / 3.0).atan()).abs() < 1e-15);
        let z = radar_h(&Mat::col(&[1.0, 0.0])).unwrap();
        assert_eq!(z, Mat::col(&[1.0, 0.0]));
        assert!(matches!(
            radar_h(&Mat::col(&[0.0, 0.0, 1.0, 1.0])),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn cv_cases() {
        assert_eq!(
            cv_model(1.0),
            Mat::from_rows(&[
                [1.0, 0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0, 1.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ])
        );
        assert_eq!(cv_model(0.0), Mat::identity(4));
        let moved = cv_model(1.0)
            .matmul(&Mat::col(&[0.0, 0.0, 1.0, 2.0]))
            .unwrap();
        assert_eq!(moved.rows_range(0, 2), Mat::col(&[1.0, 2.0]));
    }
}
