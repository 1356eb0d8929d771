use serde::{Deserialize, Serialize};

use super::benchmarks::{lorenz_a, lorenz_a_sensitivity, radar_h, radar_jacobian};
use crate::numerics::{CovMat, Mat, Tape, Var};
use crate::{Error, Result};

/// Nominal state-evolution function handed to a filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    /// `x' = F x`.
    Linear { f: Mat },
    /// `x' = F(x) x` with `F(x)` the order-`order` series of `exp(A(x) dt)`.
    Lorenz { dt: f64, order: usize },
}

/// Nominal measurement function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    /// `z = H x`.
    Linear { h: Mat },
    /// Range and azimuth of the leading two state components.
    Radar { d_x: usize },
}

/// The prior state-space model a filter works with: `f`, `h`, their
/// Jacobians and the noise covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalModel {
    pub dynamics: Dynamics,
    pub observation: Observation,
    pub q: CovMat,
    pub r: CovMat,
}

impl NominalModel {
    pub fn d_x(&self) -> usize {
        self.q.dim()
    }

    pub fn d_z(&self) -> usize {
        self.r.dim()
    }

    /// Linear dynamics and observation: the Kalman filter applies exactly.
    pub fn linear_matrices(&self) -> Option<(&Mat, &Mat)> {
        match (&self.dynamics, &self.observation) {
            (Dynamics::Linear { f }, Observation::Linear { h }) => Some((f, h)),
            _ => None,
        }
    }

    pub fn f(&self, x: &Mat) -> Result<Mat> {
        match &self.dynamics {
            Dynamics::Linear { f } => Ok(f.matmul(x)?),
            Dynamics::Lorenz { dt, order } => {
                Ok(super::lorenz_transition(x, *dt, *order)?.matmul(x)?)
            }
        }
    }

    pub fn f_jacobian(&self, x: &Mat) -> Result<Mat> {
        match &self.dynamics {
            Dynamics::Linear { f } => Ok(f.clone()),
            Dynamics::Lorenz { dt, order } => lorenz_jacobian(x, *dt, *order),
        }
    }

    pub fn h(&self, x: &Mat) -> Result<Mat> {
        match &self.observation {
            Observation::Linear { h } => Ok(h.matmul(x)?),
            Observation::Radar { .. } => radar_h(x),
        }
    }

    pub fn h_jacobian(&self, x: &Mat) -> Result<Mat> {
        match &self.observation {
            Observation::Linear { h } => Ok(h.clone()),
            Observation::Radar { .. } => radar_jacobian(x),
        }
    }

    /// Records `f(x)` and its Jacobian at `x` on the tape. Both depend on `x`
    /// differentiably for nonlinear dynamics.
    pub fn f_on_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        match &self.dynamics {
            Dynamics::Linear { f } => {
                let fm = tape.leaf(f.clone());
                let fx = tape.matmul(fm, x)?;
                Ok((fx, fm))
            }
            Dynamics::Lorenz { dt, order } => lorenz_on_tape(tape, x, *dt, *order),
        }
    }

    /// Records `h(x)` and its Jacobian at `x` on the tape.
    pub fn h_on_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        match &self.observation {
            Observation::Linear { h } => {
                let hm = tape.leaf(h.clone());
                let hx = tape.matmul(hm, x)?;
                Ok((hx, hm))
            }
            Observation::Radar { .. } => {
                let xv = tape.value(x).clone();
                let hv = radar_h(&xv)?;
                let jv = radar_jacobian(&xv)?;
                let hx = tape.custom(&[x], hv, radar_h_vjp);
                let jac = tape.custom(&[x], jv, radar_jacobian_vjp);
                Ok((hx, jac))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.q.check("Q")?;
        self.r.check("R")?;
        let (d_x, d_z) = (self.d_x(), self.d_z());
        match &self.dynamics {
            Dynamics::Linear { f } if f.shape() != (d_x, d_x) => {
                return Err(Error::Config(format!(
                    "F is {:?}, expected {:?}",
                    f.shape(),
                    (d_x, d_x)
                )))
            }
            Dynamics::Lorenz { .. } if d_x != 3 => {
                return Err(Error::Config(format!(
                    "Lorenz dynamics need d_x = 3, got {d_x}"
                )))
            }
            _ => {}
        }
        match &self.observation {
            Observation::Linear { h } if h.shape() != (d_z, d_x) => Err(Error::Config(format!(
                "H is {:?}, expected {:?}",
                h.shape(),
                (d_z, d_x)
            ))),
            Observation::Radar { d_x: rd } if *rd != d_x || d_z != 2 || d_x < 2 => {
                Err(Error::Config(format!(
                    "radar observation needs d_z = 2 and d_x >= 2 (d_x = {d_x}, d_z = {d_z})"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Jacobian of `x -> F(x) x` for the truncated Lorenz series.
///
/// `F(x)` depends on `x` only through `x[0]`, so the Jacobian is
/// `F(x) + (dF/dx0 · x) e0ᵀ` with `dF/dx0 = Σ_j dt^j/j! Σ_i M^i B M^(j-1-i)`.
pub(crate) fn lorenz_jacobian(x: &Mat, dt: f64, order: usize) -> Result<Mat> {
    let m = lorenz_a(x)?.scale(dt);
    let b = lorenz_a_sensitivity().scale(dt);
    let n = 3;
    let mut powers = vec![Mat::identity(n)];
    for j in 1..order {
        powers.push(powers[j - 1].matmul(&m)?);
    }
    let mut f = Mat::identity(n);
    let mut df = Mat::zeros(n, n);
    let mut fact = 1.0;
    for j in 1..=order {
        fact *= j as f64;
        f.add_assign(&powers[j - 1].matmul(&m)?.scale(1.0 / fact));
        for i in 0..j {
            let term = powers[i].matmul(&b)?.matmul(&powers[j - 1 - i])?;
            df.add_assign(&term.scale(1.0 / fact));
        }
    }
    let dfx = df.matmul(x)?;
    for r in 0..n {
        f[(r, 0)] += dfx[(r, 0)];
    }
    Ok(f)
}

fn lorenz_on_tape(tape: &mut Tape, x: Var, dt: f64, order: usize) -> Result<(Var, Var)> {
    let n = 3;
    let x0 = tape.entry(x, 0, 0)?;
    let base = tape.leaf(lorenz_a(&Mat::zeros(n, 1))?.scale(dt));
    let b = tape.leaf(lorenz_a_sensitivity().scale(dt));
    let shift = tape.scale_by(x0, b)?;
    let m = tape.add(base, shift)?;

    let eye = tape.leaf(Mat::identity(n));
    let mut powers = vec![eye];
    for j in 1..=order {
        let p = tape.matmul(powers[j - 1], m)?;
        powers.push(p);
    }
    let mut f = eye;
    let mut df: Option<Var> = None;
    let mut fact = 1.0;
    for j in 1..=order {
        fact *= j as f64;
        let term = tape.scale(powers[j], 1.0 / fact);
        f = tape.add(f, term)?;
        for i in 0..j {
            let left = tape.matmul(powers[i], b)?;
            let t = tape.matmul(left, powers[j - 1 - i])?;
            let t = tape.scale(t, 1.0 / fact);
            df = Some(match df {
                Some(acc) => tape.add(acc, t)?,
                None => t,
            });
        }
    }
    let fx = tape.matmul(f, x)?;
    let dfx = tape.matmul(df.expect("order >= 1"), x)?;
    let e0 = tape.leaf(Mat::from_rows(&[[1.0, 0.0, 0.0]]));
    let outer = tape.matmul(dfx, e0)?;
    let jac = tape.add(f, outer)?;
    Ok((fx, jac))
}

fn radar_h_vjp(inputs: &[&Mat], _out: &Mat, g: &Mat) -> Vec<Mat> {
    let x = inputs[0];
    let jac = radar_jacobian(x).expect("radar geometry checked on forward pass");
    vec![jac
        .transpose()
        .matmul(g)
        .expect("shapes fixed by forward pass")]
}

fn radar_jacobian_vjp(inputs: &[&Mat], _out: &Mat, g: &Mat) -> Vec<Mat> {
    let x = inputs[0];
    let (px, py) = (x[(0, 0)], x[(1, 0)]);
    let r2 = px * px + py * py;
    let r = r2.sqrt();
    let r3 = r2 * r;
    let r4 = r2 * r2;
    // Partial derivatives of J00 = x/r, J01 = y/r, J10 = -y/r², J11 = x/r².
    let d = [
        [(py * py / r3, -px * py / r3), (-px * py / r3, px * px / r3)],
        [
            (2.0 * px * py / r4, (py * py - px * px) / r4),
            ((py * py - px * px) / r4, -2.0 * px * py / r4),
        ],
    ];
    let mut dx = Mat::zeros(x.rows(), 1);
    for (i, row) in d.iter().enumerate() {
        for (j, (ddx, ddy)) in row.iter().enumerate() {
            dx[(0, 0)] += g[(i, j)] * ddx;
            dx[(1, 0)] += g[(i, j)] * ddy;
        }
    }
    vec![dx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::ssm::lorenz_transition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_jacobian(f: impl Fn(&Mat) -> Mat, x: &Mat, h: f64) -> Mat {
        let n = x.rows();
        let m = f(x).rows();
        let mut jac = Mat::zeros(m, n);
        for j in 0..n {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[(j, 0)] += h;
            dn[(j, 0)] -= h;
            let d = f(&up).sub(&f(&dn)).unwrap().scale(0.5 / h);
            for i in 0..m {
                jac[(i, j)] = d[(i, 0)];
            }
        }
        jac
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        a.max_abs_diff(b) / (1.0 + b.max_abs())
    }

    fn lorenz_model(order: usize) -> NominalModel {
        NominalModel {
            dynamics: Dynamics::Lorenz { dt: 0.02, order },
            observation: Observation::Linear {
                h: Mat::identity(3),
            },
            q: CovMat::identity(3),
            r: CovMat::identity(3),
        }
    }

    #[test]
    fn lorenz_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for order in [1, 2, 5] {
            let model = lorenz_model(order);
            for _ in 0..100 {
                let x = Mat::col(&[
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(0.0..40.0),
                ]);
                let analytic = model.f_jacobian(&x).unwrap();
                let numeric = central_jacobian(|v| model.f(v).unwrap(), &x, 1e-5);
                assert!(rel_err(&analytic, &numeric) < 1e-5);
            }
        }
    }

    #[test]
    fn lorenz_tape_matches_plain_evaluation() {
        let model = lorenz_model(5);
        let x = Mat::col(&[1.5, -2.0, 20.0]);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let (fx, jac) = model.f_on_tape(&mut t, xv).unwrap();
        let want_f = lorenz_transition(&x, 0.02, 5).unwrap().matmul(&x).unwrap();
        assert!(t.value(fx).max_abs_diff(&want_f) < 1e-12);
        assert!(t.value(jac).max_abs_diff(&model.f_jacobian(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn lorenz_tape_gradients() {
        let model = lorenz_model(3);
        let w = Mat::from_rows(&[[0.3, -1.0, 0.5], [0.2, 0.1, -0.4], [1.0, 0.0, 0.7]]);
        let err = grad_check::<_, Error>(
            |t, p| {
                let (fx, jac) = model.f_on_tape(t, p[0])?;
                let wv = t.leaf(w.clone());
                let prod = t.matmul(wv, jac)?;
                let a = t.sum_squares(prod);
                let b = t.sum_squares(fx);
                Ok(t.add(a, b)?)
            },
            &[Mat::col(&[1.2, -0.7, 2.5])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn radar_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = Mat::col(&[
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ]);
            if x[(0, 0)].hypot(x[(1, 0)]) < 1.0 {
                continue;
            }
            let analytic = radar_jacobian(&x).unwrap();
            let numeric = central_jacobian(|v| radar_h(v).unwrap(), &x, 1e-6);
            assert!(rel_err(&analytic, &numeric) < 1e-6);
        }
    }

    #[test]
    fn radar_tape_gradients() {
        let model = NominalModel {
            dynamics: Dynamics::Linear {
                f: Mat::identity(4),
            },
            observation: Observation::Radar { d_x: 4 },
            q: CovMat::identity(4),
            r: CovMat::identity(2),
        };
        let err = grad_check::<_, Error>(
            |t, p| {
                let (hx, jac) = model.h_on_tape(t, p[0])?;
                let a = t.sum_squares(hx);
                let jt = t.transpose(jac);
                let jj = t.matmul(jac, jt)?;
                let b = t.sum(jj);
                let b = t.scale(b, 100.0);
                Ok(t.add(a, b)?)
            },
            &[Mat::col(&[3.0, 4.0, 1.0, -1.0])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
