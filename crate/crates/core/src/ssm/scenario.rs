//! True generative processes and trajectory simulation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryItem;
use super::lorenz_transition;
use super::model::{Dynamics, NominalModel, Observation};
use crate::numerics::{cholesky, CovMat, Mat};
use crate::Result;

/// The data-generating process, which the filters never see directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueProcess {
    Linear {
        f: Mat,
        h: Mat,
    },
    Lorenz {
        dt: f64,
        order: usize,
        h: Mat,
    },
    /// Alternates straight flight, a left turn, straight flight and a right
    /// turn, each lasting `segment` steps. The turn in force depends on how
    /// long the trajectory has been running, so the process is not Markov in
    /// the state alone.
    Maneuvering {
        dt: f64,
        turn_rate_deg: f64,
        segment: usize,
    },
}

impl TrueProcess {
    /// Noise-free next state given the full history `x_0..x_{k-1}`.
    pub fn step(&self, history: &[Mat]) -> Result<Mat> {
        let last = history.last().expect("history holds at least x0");
        match self {
            TrueProcess::Linear { f, .. } => Ok(f.matmul(last)?),
            TrueProcess::Lorenz { dt, order, .. } => {
                Ok(lorenz_transition(last, *dt, *order)?.matmul(last)?)
            }
            TrueProcess::Maneuvering {
                dt,
                turn_rate_deg,
                segment,
            } => {
                let k = history.len();
                let phase = ((k - 1) / (*segment).max(1)) % 4;
                let omega = match phase {
                    1 => turn_rate_deg.to_radians(),
                    3 => -turn_rate_deg.to_radians(),
                    _ => 0.0,
                };
                Ok(coordinated_turn(*dt, omega).matmul(last)?)
            }
        }
    }

    /// Noise-free measurement of `x`.
    pub fn measure(&self, x: &Mat) -> Result<Mat> {
        match self {
            TrueProcess::Linear { h, .. } | TrueProcess::Lorenz { h, .. } => Ok(h.matmul(x)?),
            TrueProcess::Maneuvering { .. } => super::radar_h(x),
        }
    }
}

/// Coordinated-turn transition for `[x, y, vx, vy]` at turn rate `omega` (rad/s).
pub fn coordinated_turn(dt: f64, omega: f64) -> Mat {
    if omega.abs() < 1e-12 {
        return super::cv_model(dt);
    }
    let (s, c) = (omega * dt).sin_cos();
    Mat::from_rows(&[
        [1.0, 0.0, s / omega, -(1.0 - c) / omega],
        [0.0, 1.0, (1.0 - c) / omega, s / omega],
        [0.0, 0.0, c, -s],
        [0.0, 0.0, s, c],
    ])
}

/// A complete data-generating setup: process, noise levels, horizon and
/// initial-state distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub truth: TrueProcess,
    pub process_noise: CovMat,
    pub measurement_noise: CovMat,
    pub horizon: usize,
    pub x0_mean: Vec<f64>,
    pub x0_cov: CovMat,
}

impl Scenario {
    pub fn d_x(&self) -> usize {
        self.process_noise.dim()
    }

    pub fn d_z(&self) -> usize {
        self.measurement_noise.dim()
    }

    /// The nominal model that coincides with the truth, when the truth is
    /// expressible as one.
    pub fn accurate_model(&self) -> Option<NominalModel> {
        let (dynamics, observation) = match &self.truth {
            TrueProcess::Linear { f, h } => (
                Dynamics::Linear { f: f.clone() },
                Observation::Linear { h: h.clone() },
            ),
            TrueProcess::Lorenz { dt, order, h } => (
                Dynamics::Lorenz {
                    dt: *dt,
                    order: *order,
                },
                Observation::Linear { h: h.clone() },
            ),
            TrueProcess::Maneuvering { .. } => return None,
        };
        Some(NominalModel {
            dynamics,
            observation,
            q: self.process_noise.clone(),
            r: self.measurement_noise.clone(),
        })
    }
}

/// Square-root factor used to draw `N(0, cov)`; exact zeros stay zero.
pub(crate) fn noise_factor(cov: &CovMat) -> Result<Mat> {
    let m = cov.as_mat();
    let n = m.rows();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0));
    if diagonal {
        return Ok(Mat::diag(
            &m.diagonal()
                .iter()
                .map(|v| v.max(0.0).sqrt())
                .collect::<Vec<_>>(),
        ));
    }
    Ok(cholesky(m, "noise covariance")?)
}

pub(crate) fn draw(rng: &mut impl rand::Rng, factor: &Mat) -> Mat {
    let n = factor.cols();
    let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    factor.matmul(&Mat::col(&e)).expect("factor is square")
}

/// Simulates one trajectory `x_0..x_K`, `z_0..z_K`. A pure function of the
/// scenario and the seed.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<TrajectoryItem> {
    simulate_with_id(scenario, seed, 0)
}

pub(crate) fn simulate_with_id(scenario: &Scenario, seed: u64, id: u64) -> Result<TrajectoryItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_factor = noise_factor(&scenario.process_noise)?;
    let v_factor = noise_factor(&scenario.measurement_noise)?;
    let x0_factor = noise_factor(&scenario.x0_cov)?;

    let x0 = Mat::col(&scenario.x0_mean).add(&draw(&mut rng, &x0_factor))?;
    let mut history = Vec::with_capacity(scenario.horizon + 1);
    let mut measurements = Vec::with_capacity(scenario.horizon + 1);
    measurements.push(
        scenario
            .truth
            .measure(&x0)?
            .add(&draw(&mut rng, &v_factor))?,
    );
    history.push(x0);
    for _ in 0..scenario.horizon {
        let x = scenario
            .truth
            .step(&history)?
            .add(&draw(&mut rng, &w_factor))?;
        let z = scenario
            .truth
            .measure(&x)?
            .add(&draw(&mut rng, &v_factor))?;
        history.push(x);
        measurements.push(z);
    }
    TrajectoryItem::from_columns(id, &history, &measurements)
}

/// Simulates `count` trajectories with per-item seeds drawn from `seed`.
pub fn generate(scenario: &Scenario, count: usize, seed: u64) -> Result<Vec<TrajectoryItem>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| simulate_with_id(scenario, master.next_u64(), i as u64))
        .collect()
}
