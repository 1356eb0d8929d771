//! Estimation-error metrics.
//!
//! `M_x` is the squared Euclidean error averaged over trajectories and time
//! steps (the trace of the averaged error outer product).

use serde::{Deserialize, Serialize};

use crate::numerics::Mat;
use crate::{Error, Result};

/// dB value reported for an exactly zero error.
pub const ZERO_ERROR_DB: f64 = -300.0;

/// Running sum of squared errors. Accumulators over disjoint sample sets
/// combine by [`ErrorAccumulator::merge`], which weights by counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorAccumulator {
    pub sum_sq: f64,
    /// Number of (trajectory, time step) pairs.
    pub count: usize,
}

impl ErrorAccumulator {
    /// Adds one trajectory, rows are time steps.
    pub fn add(&mut self, estimates: &Mat, truths: &Mat, mask: Option<&[usize]>) -> Result<()> {
        if estimates.shape() != truths.shape() {
            return Err(Error::Config(format!(
                "estimate shape {:?} does not match truth shape {:?}",
                estimates.shape(),
                truths.shape()
            )));
        }
        for k in 0..estimates.rows() {
            let (e, t) = (estimates.row(k), truths.row(k));
            self.sum_sq += match mask {
                Some(idx) => idx.iter().map(|i| (e[*i] - t[*i]).powi(2)).sum::<f64>(),
                None => e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            };
        }
        self.count += estimates.rows();
        Ok(())
    }

    pub fn merge(&mut self, other: &ErrorAccumulator) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn mse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Empty("no samples for the error metric"));
        }
        Ok(self.sum_sq / self.count as f64)
    }

    pub fn mse_db(&self) -> Result<f64> {
        Ok(to_db(self.mse()?))
    }

    pub fn rmse(&self) -> Result<f64> {
        Ok(self.mse()?.sqrt())
    }
}

pub fn to_db(mse: f64) -> f64 {
    if mse == 0.0 {
        ZERO_ERROR_DB
    } else {
        10.0 * mse.log10()
    }
}

fn accumulate(
    estimates: &[Mat],
    truths: &[Mat],
    mask: Option<&[usize]>,
) -> Result<ErrorAccumulator> {
    if estimates.len() != truths.len() {
        return Err(Error::Config(format!(
            "{} estimate trajectories vs {} truth trajectories",
            estimates.len(),
            truths.len()
        )));
    }
    let mut acc = ErrorAccumulator::default();
    for (e, t) in estimates.iter().zip(truths) {
        acc.add(e, t, mask)?;
    }
    Ok(acc)
}

/// `10 log10(M_x)` over trajectories given as `K x d_x` matrices.
pub fn mse_db(estimates: &[Mat], truths: &[Mat]) -> Result<f64> {
    accumulate(estimates, truths, None)?.mse_db()
}

/// `sqrt(M_x)` restricted to the state components in `mask` (all when `None`).
pub fn rmse(estimates: &[Mat], truths: &[Mat], mask: Option<&[usize]>) -> Result<f64> {
    accumulate(estimates, truths, mask)?.rmse()
}
