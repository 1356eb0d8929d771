//! Classical filters and error metrics.

mod gaussian;
pub mod metrics;
mod particle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gaussian::{ekf_step, kf_step, ukf_step, unscented_measurement, GaussianBelief, UkfParams};
pub use metrics::{mse_db, rmse, to_db, ErrorAccumulator, ZERO_ERROR_DB};
pub use particle::{pf_step, systematic_resample, ParticleBelief};

use crate::numerics::{CovMat, Mat};
use crate::ssm::{NominalModel, TrajectoryItem};
use crate::{Error, Result};

/// Reference filter choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Kf,
    Ekf,
    Ukf(UkfParams),
    Pf { particles: usize },
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Kf => "kf",
            Baseline::Ekf => "ekf",
            Baseline::Ukf(_) => "ukf",
            Baseline::Pf { .. } => "pf",
        }
    }
}

/// How every filter's starting belief is derived from a trajectory: the true
/// initial state plus a `N(0, p0)` draw keyed by `(seed, item id)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialBelief {
    pub p0: CovMat,
    pub seed: u64,
}

impl InitialBelief {
    pub fn unit(d_x: usize, seed: u64) -> Self {
        Self {
            p0: CovMat::identity(d_x),
            seed,
        }
    }

    pub fn for_item(&self, item: &TrajectoryItem) -> Result<GaussianBelief> {
        if self.p0.dim() != item.d_x() {
            return Err(Error::Config(format!(
                "initial covariance is {}x{} but trajectories have d_x = {}",
                self.p0.dim(),
                self.p0.dim(),
                item.d_x()
            )));
        }
        GaussianBelief::perturbed(&item.state(0), &self.p0, self.seed, item.id)
    }
}

/// Runs a baseline over one trajectory. Returns the `K x d_x` posterior
/// means for `k = 1..=K`.
pub fn run_baseline(
    item: &TrajectoryItem,
    model: &NominalModel,
    baseline: &Baseline,
    init: &InitialBelief,
) -> Result<Mat> {
    let seed = init.seed;
    let init = init.for_item(item)?;
    let k_max = item.horizon();
    let mut rows = Vec::with_capacity(k_max);
    match baseline {
        Baseline::Pf { particles } => {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_add(item.id.wrapping_mul(0xA24B_AED4_963E_E407)),
            );
            let mut b = ParticleBelief::from_gaussian(&init, *particles, &mut rng)?;
            for k in 1..=k_max {
                b = pf_step(&b, model, &item.measurement(k), &mut rng).map_err(|e| e.at_step(k))?;
                rows.push(b.mean());
            }
        }
        _ => {
            let mut b = init;
            for k in 1..=k_max {
                let z = item.measurement(k);
                b = match baseline {
                    Baseline::Kf => kf_step(&b, model, &z),
                    Baseline::Ekf => ekf_step(&b, model, &z),
                    Baseline::Ukf(p) => ukf_step(&b, model, &z, p),
                    Baseline::Pf { .. } => unreachable!(),
                }
                .map_err(|e| e.at_step(k))?;
                rows.push(b.mean.clone());
            }
        }
    }
    stack_rows(&rows)
}

/// Stacks column vectors as the rows of a matrix.
pub fn stack_rows(cols: &[Mat]) -> Result<Mat> {
    let first = cols.first().ok_or(Error::Empty("no estimates to stack"))?;
    let d = first.rows();
    let mut data = Vec::with_capacity(cols.len() * d);
    for c in cols {
        data.extend_from_slice(c.as_slice());
    }
    Ok(Mat::from_vec(cols.len(), d, data)?)
}

/// Ground-truth states for `k = 1..=K` as a `K x d_x` matrix.
pub fn truth_rows(item: &TrajectoryItem) -> Mat {
    item.states.rows_range(1, item.horizon())
}
