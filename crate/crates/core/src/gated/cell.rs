use serde::{Deserialize, Serialize};

use super::params::{BlockId, GateParams, ParamVars};
use crate::filters::GaussianBelief;
use crate::numerics::{CovMat, Mat, Tape, Var};
use crate::ssm::NominalModel;
use crate::{Error, Result};

/// Floor added to every learned variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Which gated units are active. A disabled unit falls back to the plain
/// extended-Kalman behaviour for its part of the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateMask {
    pub use_mug: bool,
    pub use_spg: bool,
    pub use_sug: bool,
}

impl GateMask {
    pub const FULL: GateMask = GateMask {
        use_mug: true,
        use_spg: true,
        use_sug: true,
    };
    pub const NONE: GateMask = GateMask {
        use_mug: false,
        use_spg: false,
        use_sug: false,
    };

    /// Full mask and the three single-unit ablations, with their labels.
    pub fn ablations() -> [(&'static str, GateMask); 4] {
        [
            ("full", GateMask::FULL),
            (
                "no_mug",
                GateMask {
                    use_mug: false,
                    ..GateMask::FULL
                },
            ),
            (
                "no_spg",
                GateMask {
                    use_spg: false,
                    ..GateMask::FULL
                },
            ),
            (
                "no_sug",
                GateMask {
                    use_sug: false,
                    ..GateMask::FULL
                },
            ),
        ]
    }
}

impl Default for GateMask {
    fn default() -> Self {
        GateMask::FULL
    }
}

/// Recurrent memory: value and diagonal spread, both `d_c x 1`.
#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    pub value: Var,
    pub spread: Var,
}

/// Posterior belief and memory carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub mean: Var,
    pub cov: Var,
    pub memory: MemoryVars,
}

/// Intermediate quantities of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub x_pred: Var,
    pub p_pred: Var,
    pub delta_f: Option<Var>,
    pub p_f: Option<Var>,
    pub delta_h: Option<Var>,
    pub p_h: Option<Var>,
    pub p_z: Var,
}

/// `w2 tanh(w1 i + b1) + b2` on the tape.
pub fn nn_forward(tape: &mut Tape, pv: &ParamVars, id: BlockId, input: Var) -> Result<Var> {
    let b = pv.block(id);
    let pre = tape.matmul(b.w1, input)?;
    let pre = tape.add(pre, b.b1)?;
    let hidden = tape.tanh(pre);
    let out = tape.matmul(b.w2, hidden)?;
    Ok(tape.add(out, b.b2)?)
}

/// `softplus(raw) + floor` as a column of variances.
fn variance_head(tape: &mut Tape, raw: Var) -> Result<Var> {
    let sp = tape.softplus(raw);
    let floor = tape.leaf(Mat::filled(tape.value(raw).rows(), 1, VARIANCE_FLOOR));
    Ok(tape.add(sp, floor)?)
}

/// Brings a state vector to unit scale: by its own largest entry, or by the
/// fixed reciprocal scales when given.
pub fn normalize_state(tape: &mut Tape, x: Var, inv_scale: Option<Var>) -> Result<Var> {
    match inv_scale {
        None => Ok(tape.max_normalize(x)),
        Some(s) => Ok(tape.hadamard(x, s)?),
    }
}

pub fn mug_input(
    tape: &mut Tape,
    memory: MemoryVars,
    x_post: Var,
    inv_scale: Option<Var>,
) -> Result<Var> {
    let mem = tape.concat(&[memory.value, memory.spread])?;
    let squashed = tape.sigmoid(mem);
    let state = normalize_state(tape, x_post, inv_scale)?;
    Ok(tape.concat(&[squashed, state])?)
}

pub fn spg_input(tape: &mut Tape, memory: MemoryVars) -> Result<Var> {
    let mem = tape.concat(&[memory.value, memory.spread])?;
    Ok(tape.sigmoid(mem))
}

pub fn sug_input(tape: &mut Tape, x_pred: Var, inv_scale: Option<Var>) -> Result<Var> {
    normalize_state(tape, x_pred, inv_scale)
}

/// Memory `c = 0`, unit spread.
pub fn initial_memory(tape: &mut Tape, d_c: usize) -> MemoryVars {
    MemoryVars {
        value: tape.leaf(Mat::zeros(d_c, 1)),
        spread: tape.leaf(Mat::filled(d_c, 1, 1.0)),
    }
}

pub fn memory_update_gate(
    tape: &mut Tape,
    pv: &ParamVars,
    d_c: usize,
    memory: MemoryVars,
    x_post: Var,
    mask: GateMask,
) -> Result<MemoryVars> {
    if !mask.use_mug {
        return Ok(initial_memory(tape, d_c));
    }
    let input = mug_input(tape, memory, x_post, pv.inv_scale)?;
    let value = nn_forward(tape, pv, BlockId::C1, input)?;
    let raw = nn_forward(tape, pv, BlockId::C2, input)?;
    Ok(MemoryVars {
        value,
        spread: variance_head(tape, raw)?,
    })
}

/// Prediction `f(x) + Δf`, `F P Fᵀ + Q + diag(p_f)`.
pub fn state_prediction_gate(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &NominalModel,
    mean: Var,
    cov: Var,
    memory: MemoryVars,
    mask: GateMask,
) -> Result<(Var, Var, Option<(Var, Var)>)> {
    let (fx, jac) = model.f_on_tape(tape, mean)?;
    let jac_t = tape.transpose(jac);
    let p = tape.matmul(jac, cov)?;
    let p = tape.matmul(p, jac_t)?;
    let q = tape.leaf(model.q.as_mat().clone());
    let p = tape.add(p, q)?;
    if !mask.use_spg {
        return Ok((fx, p, None));
    }
    let input = spg_input(tape, memory)?;
    let delta = nn_forward(tape, pv, BlockId::F1, input)?;
    let raw = nn_forward(tape, pv, BlockId::F2, input)?;
    let var = variance_head(tape, raw)?;
    let x_pred = tape.add(fx, delta)?;
    let var_m = tape.diag(var)?;
    let p_pred = tape.add(p, var_m)?;
    Ok((x_pred, p_pred, Some((delta, var))))
}

/// Update with `ẑ = h(x) + Δh`, `Pz = H P Hᵀ + R + diag(p_h)`, `Pxz = P Hᵀ`.
/// Returns `(mean, cov, Pz, (Δh, p_h))`.
#[allow(clippy::type_complexity)]
pub fn state_update_gate(
    tape: &mut Tape,
    pv: &ParamVars,
    model: &NominalModel,
    x_pred: Var,
    p_pred: Var,
    z: Var,
    mask: GateMask,
) -> Result<(Var, Var, Var, Option<(Var, Var)>)> {
    let (hx, jac) = model.h_on_tape(tape, x_pred)?;
    let jac_t = tape.transpose(jac);
    let p_xz = tape.matmul(p_pred, jac_t)?;
    let p_z = tape.matmul(jac, p_xz)?;
    let r = tape.leaf(model.r.as_mat().clone());
    let mut p_z = tape.add(p_z, r)?;
    let mut z_pred = hx;
    let mut heads = None;
    if mask.use_sug {
        let input = sug_input(tape, x_pred, pv.inv_scale)?;
        let delta = nn_forward(tape, pv, BlockId::H1, input)?;
        let raw = nn_forward(tape, pv, BlockId::H2, input)?;
        let var = variance_head(tape, raw)?;
        z_pred = tape.add(hx, delta)?;
        let var_m = tape.diag(var)?;
        p_z = tape.add(p_z, var_m)?;
        heads = Some((delta, var));
    }
    let p_z = tape.symmetrize(p_z)?;
    let p_xz_t = tape.transpose(p_xz);
    let gain_t = tape.solve_spd(p_z, p_xz_t, "Pz")?;
    let innovation = tape.sub(z, z_pred)?;
    let gain = tape.transpose(gain_t);
    let correction = tape.matmul(gain, innovation)?;
    let mean = tape.add(x_pred, correction)?;
    let reduction = tape.matmul(p_xz, gain_t)?;
    let cov = tape.sub(p_pred, reduction)?;
    let cov = tape.symmetrize(cov)?;
    Ok((mean, cov, p_z, heads))
}

/// One MUG → SPG → SUG step.
pub fn step(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &GateParams,
    model: &NominalModel,
    prev: CellState,
    z: Var,
    mask: GateMask,
) -> Result<(CellState, StepVars)> {
    let d_c = params.dims().d_c;
    let memory = memory_update_gate(tape, pv, d_c, prev.memory, prev.mean, mask)?;
    let (x_pred, p_pred, spg) =
        state_prediction_gate(tape, pv, model, prev.mean, prev.cov, memory, mask)?;
    let (mean, cov, p_z, sug) = state_update_gate(tape, pv, model, x_pred, p_pred, z, mask)?;
    let vars = StepVars {
        x_pred,
        p_pred,
        delta_f: spg.map(|s| s.0),
        p_f: spg.map(|s| s.1),
        delta_h: sug.map(|s| s.0),
        p_h: sug.map(|s| s.1),
        p_z,
    };
    Ok((CellState { mean, cov, memory }, vars))
}

/// Records the whole recursion on one tape and returns the per-step states.
/// `measurements` holds `z_1..z_K`.
pub fn unroll(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &GateParams,
    model: &NominalModel,
    measurements: &[Mat],
    init: &GaussianBelief,
    mask: GateMask,
) -> Result<Vec<CellState>> {
    check_dims(params, model, init)?;
    let mut state = CellState {
        mean: tape.leaf(init.mean.clone()),
        cov: tape.leaf(init.cov.as_mat().clone()),
        memory: initial_memory(tape, params.dims().d_c),
    };
    let mut out = Vec::with_capacity(measurements.len());
    for (i, z) in measurements.iter().enumerate() {
        let z = tape.leaf(z.clone());
        state = step(tape, pv, params, model, state, z, mask)
            .map_err(|e| e.at_step(i + 1))?
            .0;
        out.push(state);
    }
    Ok(out)
}

fn check_dims(params: &GateParams, model: &NominalModel, init: &GaussianBelief) -> Result<()> {
    let d = params.dims();
    if d.d_x != model.d_x() || d.d_z != model.d_z() || init.mean.rows() != d.d_x {
        return Err(Error::Config(format!(
            "gate dims (d_x={}, d_z={}) do not match the model (d_x={}, d_z={}) or initial belief ({} rows)",
            d.d_x,
            d.d_z,
            model.d_x(),
            model.d_z(),
            init.mean.rows()
        )));
    }
    Ok(())
}

/// Values produced at one step, for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub x_pred: Mat,
    pub p_pred: CovMat,
    pub memory: Mat,
    pub memory_spread: CovMat,
    pub delta_f: Option<Mat>,
    pub p_f: Option<CovMat>,
    pub delta_h: Option<Mat>,
    pub p_h: Option<CovMat>,
    pub p_z: CovMat,
}

/// Output of [`filter_trajectory`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRun {
    /// `K x d_x`, row `k-1` is the posterior mean at step `k`.
    pub means: Mat,
    pub covs: Vec<CovMat>,
    pub steps: Vec<StepRecord>,
}

impl FilterRun {
    /// Every emitted covariance, labelled by step and name.
    pub fn covariances(&self) -> impl Iterator<Item = (usize, &'static str, &CovMat)> + '_ {
        self.covs
            .iter()
            .zip(&self.steps)
            .enumerate()
            .flat_map(|(i, (p, s))| {
                let k = i + 1;
                let mut v = vec![
                    (k, "P_post", p),
                    (k, "P_pred", &s.p_pred),
                    (k, "P_c", &s.memory_spread),
                    (k, "P_z", &s.p_z),
                ];
                if let Some(c) = &s.p_f {
                    v.push((k, "P_f", c));
                }
                if let Some(c) = &s.p_h {
                    v.push((k, "P_h", c));
                }
                v
            })
    }
}

/// Runs the gated filter forward over `z_1..z_K`. Each step lives on its
/// own short tape, so memory does not grow with `K` beyond the outputs.
pub fn filter_trajectory(
    params: &GateParams,
    model: &NominalModel,
    measurements: &[Mat],
    init: &GaussianBelief,
    mask: GateMask,
) -> Result<FilterRun> {
    if measurements.is_empty() {
        return Err(Error::Empty("no measurements to filter"));
    }
    check_dims(params, model, init)?;
    let d_c = params.dims().d_c;
    let mut mean = init.mean.clone();
    let mut cov = init.cov.as_mat().clone();
    let mut memory = (Mat::zeros(d_c, 1), Mat::filled(d_c, 1, 1.0));
    let mut means = Vec::with_capacity(measurements.len());
    let mut covs = Vec::with_capacity(measurements.len());
    let mut steps = Vec::with_capacity(measurements.len());
    for (i, z) in measurements.iter().enumerate() {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let prev = CellState {
            mean: tape.leaf(mean),
            cov: tape.leaf(cov),
            memory: MemoryVars {
                value: tape.leaf(memory.0),
                spread: tape.leaf(memory.1),
            },
        };
        let z = tape.leaf(z.clone());
        let (next, vars) =
            step(&mut tape, &pv, params, model, prev, z, mask).map_err(|e| e.at_step(i + 1))?;
        let val = |v: Var| tape.value(v).clone();
        let cov_of = |v: Var| CovMat::new_unchecked(tape.value(v).clone());
        let diag_of = |v: Var| CovMat::new_unchecked(Mat::diag(tape.value(v).as_slice()));
        mean = val(next.mean);
        cov = val(next.cov);
        memory = (val(next.memory.value), val(next.memory.spread));
        if !mean.is_finite() || !cov.is_finite() {
            return Err(Error::from(crate::numerics::NumericsError::NonFinite(
                format!("posterior at step {}", i + 1),
            )));
        }
        steps.push(StepRecord {
            x_pred: val(vars.x_pred),
            p_pred: cov_of(vars.p_pred),
            memory: memory.0.clone(),
            memory_spread: diag_of(next.memory.spread),
            delta_f: vars.delta_f.map(val),
            p_f: vars.p_f.map(diag_of),
            delta_h: vars.delta_h.map(val),
            p_h: vars.p_h.map(diag_of),
            p_z: cov_of(vars.p_z),
        });
        means.push(mean.clone());
        covs.push(CovMat::new_unchecked(cov.clone()));
    }
    Ok(FilterRun {
        means: crate::filters::stack_rows(&means)?,
        covs,
        steps,
    })
}

/// Plain-value wrappers around the input builders.
pub fn build_input_mug(memory: &Mat, spread: &Mat, x_post: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let m = MemoryVars {
        value: tape.leaf(memory.clone()),
        spread: tape.leaf(spread.clone()),
    };
    let x = tape.leaf(x_post.clone());
    let out = mug_input(&mut tape, m, x, None)?;
    Ok(tape.value(out).clone())
}

pub fn build_input_spg(memory: &Mat, spread: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let m = MemoryVars {
        value: tape.leaf(memory.clone()),
        spread: tape.leaf(spread.clone()),
    };
    let out = spg_input(&mut tape, m)?;
    Ok(tape.value(out).clone())
}

pub fn build_input_sug(x_pred: &Mat) -> Mat {
    let mut tape = Tape::new();
    let x = tape.leaf(x_pred.clone());
    let out = sug_input(&mut tape, x, None).expect("max normalization is shape-free");
    tape.value(out).clone()
}
