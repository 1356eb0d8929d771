use serde::{Deserialize, Serialize};

use crate::filters::{run_baseline, truth_rows, Baseline, ErrorAccumulator, InitialBelief};
use crate::gated::{filter_trajectory, GateMask, GateParams};
use crate::numerics::Mat;
use crate::ssm::{NominalModel, TrajectoryItem};
use crate::{Error, Result};

/// Summary line for one estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub name: String,
    pub mse_db: f64,
    pub rmse_full: f64,
    pub rmse_position: f64,
    pub n_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub id: u64,
    pub mse: f64,
    pub mse_position: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub summary: MethodMetrics,
    pub per_trajectory: Vec<TrajectoryMetrics>,
    pub full: ErrorAccumulator,
    pub position: ErrorAccumulator,
}

/// Scores `K x d_x` estimates against the items' true states. `position`
/// lists the state components counted as position; all components when
/// `None`.
pub fn score(
    name: &str,
    items: &[TrajectoryItem],
    estimates: &[Mat],
    position: Option<&[usize]>,
) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation split has no trajectories"));
    }
    if items.len() != estimates.len() {
        return Err(Error::Config(format!(
            "{} items but {} estimate sets",
            items.len(),
            estimates.len()
        )));
    }
    let mut full = ErrorAccumulator::default();
    let mut pos = ErrorAccumulator::default();
    let mut per_trajectory = Vec::with_capacity(items.len());
    for (item, est) in items.iter().zip(estimates) {
        let truth = truth_rows(item);
        let mut f = ErrorAccumulator::default();
        let mut p = ErrorAccumulator::default();
        f.add(est, &truth, None)?;
        p.add(est, &truth, position)?;
        per_trajectory.push(TrajectoryMetrics {
            id: item.id,
            mse: f.mse()?,
            mse_position: p.mse()?,
        });
        full.merge(&f);
        pos.merge(&p);
    }
    Ok(Evaluation {
        summary: MethodMetrics {
            name: name.to_string(),
            mse_db: full.mse_db()?,
            rmse_full: full.rmse()?,
            rmse_position: pos.rmse()?,
            n_trajectories: items.len(),
        },
        per_trajectory,
        full,
        position: pos,
    })
}

/// Runs the gated filter over every item and scores it.
pub fn evaluate(
    name: &str,
    params: &GateParams,
    model: &NominalModel,
    items: &[TrajectoryItem],
    init: &InitialBelief,
    mask: GateMask,
    position: Option<&[usize]>,
) -> Result<Evaluation> {
    let estimates = items
        .iter()
        .map(|item| {
            let zs: Vec<Mat> = (1..=item.horizon()).map(|k| item.measurement(k)).collect();
            Ok(filter_trajectory(params, model, &zs, &init.for_item(item)?, mask)?.means)
        })
        .collect::<Result<Vec<_>>>()?;
    score(name, items, &estimates, position)
}

/// Runs a classical filter over every item and scores it.
pub fn evaluate_baseline(
    baseline: &Baseline,
    model: &NominalModel,
    items: &[TrajectoryItem],
    init: &InitialBelief,
    position: Option<&[usize]>,
) -> Result<Evaluation> {
    let estimates = items
        .iter()
        .map(|item| run_baseline(item, model, baseline, init))
        .collect::<Result<Vec<_>>>()?;
    score(baseline.name(), items, &estimates, position)
}
