use crate::filters::GaussianBelief;
use crate::gated::{unroll, GateMask, GateParams, ParamVars};
use crate::numerics::{Mat, Tape, Var};
use crate::ssm::{NominalModel, TrajectoryItem};
use crate::{Error, Result};

/// Records `(1/K) Σ_k ‖x̂_k − x_k‖² + τ ‖Φ‖²` on `tape` and returns
/// `(loss, data term)`.
pub fn loss_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &GateParams,
    model: &NominalModel,
    item: &TrajectoryItem,
    init: &GaussianBelief,
    mask: GateMask,
    tau: f64,
) -> Result<(Var, Var)> {
    let zs: Vec<Mat> = (1..=item.horizon()).map(|k| item.measurement(k)).collect();
    let states = unroll(tape, pv, params, model, &zs, init, mask)?;
    let mut total: Option<Var> = None;
    for (i, s) in states.iter().enumerate() {
        let truth = tape.leaf(item.state(i + 1));
        let err = tape.sub(s.mean, truth)?;
        let sq = tape.sum_squares(err);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let total = total.ok_or(Error::Empty("trajectory has no time steps"))?;
    let data = tape.scale(total, 1.0 / states.len() as f64);
    if tau == 0.0 {
        return Ok((data, data));
    }
    let mut reg: Option<Var> = None;
    for v in pv.all() {
        let sq = tape.sum_squares(v);
        reg = Some(match reg {
            None => sq,
            Some(r) => tape.add(r, sq)?,
        });
    }
    let reg = tape.scale(reg.expect("24 tensors"), tau);
    Ok((tape.add(data, reg)?, data))
}

/// Loss of one trajectory.
pub fn loss_trajectory(
    params: &GateParams,
    model: &NominalModel,
    item: &TrajectoryItem,
    init: &GaussianBelief,
    mask: GateMask,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let (loss, _) = loss_on_tape(&mut tape, &pv, params, model, item, init, mask, tau)?;
    Ok(tape.scalar(loss))
}

/// Loss of one trajectory with its gradient in [`GateParams::tensors`] order.
pub struct LossGradient {
    pub loss: f64,
    pub data_term: f64,
    pub gradient: Vec<Mat>,
}

pub fn loss_and_gradient(
    params: &GateParams,
    model: &NominalModel,
    item: &TrajectoryItem,
    init: &GaussianBelief,
    mask: GateMask,
    tau: f64,
) -> Result<LossGradient> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let (loss, data) = loss_on_tape(&mut tape, &pv, params, model, item, init, mask, tau)?;
    let mut grads = tape.backward(loss)?;
    Ok(LossGradient {
        loss: tape.scalar(loss),
        data_term: tape.scalar(data),
        gradient: pv.all().into_iter().map(|v| grads.take(v)).collect(),
    })
}

/// Mean of per-trajectory losses. `inits[j]` is the starting belief of
/// `items[j]`.
pub fn loss_batch(
    params: &GateParams,
    model: &NominalModel,
    items: &[&TrajectoryItem],
    inits: &[GaussianBelief],
    mask: GateMask,
    tau: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("loss over an empty batch"));
    }
    let mut sum = 0.0;
    for (item, init) in items.iter().zip(inits) {
        sum += loss_trajectory(params, model, item, init, mask, tau)?;
    }
    Ok(sum / items.len() as f64)
}
