//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node caches its forward value. Scalars are `1 x 1` matrices. A tape
//! is built fresh for each trajectory and discarded after [`Tape::backward`].

use super::cov::{cholesky, cholesky_solve};
use super::{Mat, NumericsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a custom node: given the input values, the
/// node's output value and its adjoint, returns one adjoint per input.
pub type VjpFn = fn(inputs: &[&Mat], output: &Mat, adjoint: &Mat) -> Vec<Mat>;

const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Diag(Var),
    DiagPart(Var),
    Concat(Vec<Var>),
    Entry(Var, usize, usize),
    MaxNormalize(Var, Option<usize>),
    SolveSpd { a: Var, b: Var, factor: Mat },
    Sum(Var),
    SumSquares(Var),
    Symmetrize(Var),
    Custom(Vec<Var>, VjpFn),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
}

/// Append-only computation graph. Parents always precede children.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar root.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Mat>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Mat {
        &self.adjoints[v.0]
    }

    pub fn take(&mut self, v: Var) -> Mat {
        std::mem::replace(&mut self.adjoints[v.0], Mat::zeros(0, 0))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, l: &Mat, r: &Mat) -> NumericsError {
    NumericsError::Shape {
        op,
        left: l.shape(),
        right: r.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Input node: a parameter or a constant. Leaves receive adjoints either way.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    /// Multiplies matrix `m` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, s: Var, m: Var) -> Result<Var> {
        let sv = self.value(s).to_scalar()?;
        let value = self.value(m).scale(sv);
        Ok(self.push(Op::ScaleBy(s, m), value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus(a), value)
    }

    /// Column vector to diagonal matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.cols() != 1 {
            return Err(shape_err("diag", v, v));
        }
        let value = Mat::diag(v.as_slice());
        Ok(self.push(Op::Diag(a), value))
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag_part(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_square() {
            return Err(shape_err("diag_part", v, v));
        }
        let value = Mat::col(&v.diagonal());
        Ok(self.push(Op::DiagPart(a), value))
    }

    /// Vertical concatenation of column vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        if let Some(bad) = mats.iter().find(|m| m.cols() != 1) {
            return Err(shape_err("concat", bad, bad));
        }
        let value = Mat::vstack(&mats)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    pub fn entry(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let v = self.value(a);
        if i >= v.rows() || j >= v.cols() {
            return Err(shape_err("entry", v, &Mat::zeros(i + 1, j + 1)));
        }
        let value = Mat::scalar(v[(i, j)]);
        Ok(self.push(Op::Entry(a, i, j), value))
    }

    /// `v / max(max|v_i|, 1e-8)`.
    pub fn max_normalize(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (arg, m) = v
            .as_slice()
            .iter()
            .enumerate()
            .fold((None, 0.0f64), |(ai, am), (i, x)| {
                if x.abs() > am {
                    (Some(i), x.abs())
                } else {
                    (ai, am)
                }
            });
        let (arg, denom) = if m > NORMALIZE_EPS {
            (arg, m)
        } else {
            (None, NORMALIZE_EPS)
        };
        let value = v.scale(1.0 / denom);
        self.push(Op::MaxNormalize(a, arg), value)
    }

    /// `a⁻¹ b` for SPD `a` via Cholesky with jitter escalation.
    pub fn solve_spd(&mut self, a: Var, b: Var, name: &str) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if !am.is_square() || bm.rows() != am.rows() {
            return Err(shape_err("solve_spd", am, bm));
        }
        let factor = cholesky(am, name)?;
        let value = cholesky_solve(&factor, bm);
        Ok(self.push(Op::SolveSpd { a, b, factor }, value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum_squares());
        self.push(Op::SumSquares(a), value)
    }

    /// `(a + aᵀ) / 2`.
    pub fn symmetrize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if !v.is_square() {
            return Err(shape_err("symmetrize", v, v));
        }
        let value = v.add(&v.transpose())?.scale(0.5);
        Ok(self.push(Op::Symmetrize(a), value))
    }

    /// Registers a node whose value was computed outside the tape, together
    /// with its vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Mat, vjp: VjpFn) -> Var {
        self.push(Op::Custom(inputs.to_vec(), vjp), value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(NumericsError::NotScalar(root_value.shape()));
        }
        let mut adj: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows(), n.value.cols()))
            .collect();
        let mut live = vec![false; self.nodes.len()];
        adj[root.0] = Mat::scalar(1.0);
        live[root.0] = true;

        for idx in (0..=root.0).rev() {
            if !live[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut adj[idx], Mat::zeros(0, 0));
            let acc = |v: Var, d: Mat, adj: &mut Vec<Mat>, live: &mut Vec<bool>| {
                adj[v.0].add_assign(&d);
                live[v.0] = true;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    acc(*a, da, &mut adj, &mut live);
                    acc(*b, db, &mut adj, &mut live);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut adj, &mut live);
                    acc(*b, g.clone(), &mut adj, &mut live);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut adj, &mut live);
                    acc(*b, g.scale(-1.0), &mut adj, &mut live);
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    acc(*a, da, &mut adj, &mut live);
                    acc(*b, db, &mut adj, &mut live);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut adj, &mut live),
                Op::ScaleBy(s, m) => {
                    let ds = g.hadamard(self.value(*m))?.sum();
                    let sv = self.value(*s).as_slice()[0];
                    acc(*s, Mat::scalar(ds), &mut adj, &mut live);
                    acc(*m, g.scale(sv), &mut adj, &mut live);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut adj, &mut live),
                Op::Tanh(a) => {
                    let d = g.hadamard(&node.value.map(|y| 1.0 - y * y))?;
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::Sigmoid(a) => {
                    let d = g.hadamard(&node.value.map(|y| y * (1.0 - y)))?;
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::Softplus(a) => {
                    let d = g.hadamard(&self.value(*a).map(sigmoid))?;
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::Diag(a) => acc(*a, Mat::col(&g.diagonal()), &mut adj, &mut live),
                Op::DiagPart(a) => acc(*a, Mat::diag(g.as_slice()), &mut adj, &mut live),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).rows();
                        acc(*p, g.rows_range(offset, n), &mut adj, &mut live);
                        offset += n;
                    }
                }
                Op::Entry(a, i, j) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows(), src.cols());
                    d[(*i, *j)] = g.as_slice()[0];
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::MaxNormalize(a, arg) => {
                    let x = self.value(*a);
                    let d = match arg {
                        None => g.scale(1.0 / NORMALIZE_EPS),
                        Some(j) => {
                            let xj = x.as_slice()[*j];
                            let m = xj.abs();
                            let mut d = g.scale(1.0 / m);
                            let dot: f64 = g
                                .as_slice()
                                .iter()
                                .zip(x.as_slice())
                                .map(|(a, b)| a * b)
                                .sum();
                            d.as_mut_slice()[*j] -= xj.signum() * dot / (m * m);
                            d
                        }
                    };
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::SolveSpd { a, b, factor } => {
                    // X = A⁻¹B:  B̄ = A⁻¹X̄,  Ā = -B̄Xᵀ (symmetrized; A is symmetric).
                    let db = cholesky_solve(factor, &g);
                    let outer = db.matmul(&node.value.transpose())?;
                    let da = outer.add(&outer.transpose())?.scale(-0.5);
                    acc(*a, da, &mut adj, &mut live);
                    acc(*b, db, &mut adj, &mut live);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let d = Mat::filled(src.rows(), src.cols(), g.as_slice()[0]);
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::SumSquares(a) => {
                    let d = self.value(*a).scale(2.0 * g.as_slice()[0]);
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::Symmetrize(a) => {
                    let d = g.add(&g.transpose())?.scale(0.5);
                    acc(*a, d, &mut adj, &mut live);
                }
                Op::Custom(inputs, vjp) => {
                    let vals: Vec<&Mat> = inputs.iter().map(|v| self.value(*v)).collect();
                    let ds = vjp(&vals, &node.value, &g);
                    debug_assert_eq!(ds.len(), inputs.len());
                    for (v, d) in inputs.iter().zip(ds) {
                        acc(*v, d, &mut adj, &mut live);
                    }
                }
            }
            adj[idx] = g;
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `params`. Returns
/// the maximum over all parameter entries of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`; any non-finite
/// value yields `f64::INFINITY`.
pub fn grad_check<F, E>(f: F, params: &[Mat], step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |ps: &[Mat]| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).to_scalar()?)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Mat> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..params[pi].len() {
            let orig = params[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Ok(f64::INFINITY);
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_sum_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let x = t.leaf(Mat::col(&[0.5, -2.0]));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        let want = Mat::from_rows(&[[0.5, -2.0], [0.5, -2.0], [0.5, -2.0]]);
        assert_eq!(g.get(w), &want);
        assert_eq!(g.get(s), &Mat::scalar(1.0));
    }

    #[test]
    fn tanh_times_constant() {
        let mut t = Tape::new();
        let w = t.leaf(Mat::scalar(0.3));
        let v = t.leaf(Mat::scalar(-1.7));
        let th = t.tanh(w);
        let y = t.hadamard(th, v).unwrap();
        let g = t.backward(y).unwrap();
        let want = (1.0 - 0.3f64.tanh().powi(2)) * -1.7;
        assert!((g.get(w).as_slice()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn unused_nodes_have_zero_adjoint() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::col(&[1.0, 2.0]));
        let unused = t.tanh(a);
        let s = t.sum_squares(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), &Mat::zeros(2, 1));
        assert_eq!(g.get(a), &Mat::col(&[2.0, 4.0]));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::col(&[1.0, 2.0]));
        assert!(matches!(
            t.backward(a),
            Err(NumericsError::NotScalar((2, 1)))
        ));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 3);
        let x = rand_mat(&mut rng, 3, 1);
        let err = grad_check::<_, NumericsError>(
            |t, p| {
                let ax = t.matmul(p[0], p[1])?;
                Ok(t.sum_squares(ax))
            },
            &[a, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn two_layer_tanh_network_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_mat(&mut rng, 5, 3),
            rand_mat(&mut rng, 5, 1),
            rand_mat(&mut rng, 2, 5),
            rand_mat(&mut rng, 2, 1),
        ];
        let input = rand_mat(&mut rng, 3, 1);
        let err = grad_check::<_, NumericsError>(
            |t, p| {
                let i = t.leaf(input.clone());
                let h = t.matmul(p[0], i)?;
                let h = t.add(h, p[1])?;
                let h = t.tanh(h);
                let o = t.matmul(p[2], h)?;
                let o = t.add(o, p[3])?;
                Ok(t.sum_squares(o))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    /// Every primitive composed the way the filter uses it.
    #[test]
    fn composite_ops_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = rand_mat(&mut rng, 3, 3);
        let v = Mat::col(&[0.4, -1.3, 0.7]);
        let b = rand_mat(&mut rng, 3, 2);
        let s = Mat::scalar(0.8);
        let err = grad_check::<_, NumericsError>(
            |t, p| {
                let gt = t.transpose(p[0]);
                let a = t.matmul(p[0], gt)?;
                let sp = t.softplus(p[1]);
                let d = t.diag(sp)?;
                let a = t.add(a, d)?;
                let a = t.symmetrize(a)?;
                let x = t.solve_spd(a, p[2], "a")?;
                let n = t.max_normalize(p[1]);
                let sg = t.sigmoid(n);
                let dp = t.diag_part(a)?;
                let c = t.concat(&[sg, dp])?;
                let e = t.entry(p[1], 1, 0)?;
                let c = t.scale_by(p[3], c)?;
                let c = t.scale_by(e, c)?;
                let l1 = t.sum_squares(x);
                let l2 = t.sum(c);
                let l = t.sub(l1, l2)?;
                Ok(t.scale(l, 0.5))
            },
            &[g, v, b, s],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let a = t.leaf(Mat::from_rows(&[[2.0, 0.3], [0.3, 1.0]]));
            let b = t.leaf(Mat::col(&[1.0, 0.25]));
            let x = t.solve_spd(a, b, "a").unwrap();
            let y = t.tanh(x);
            let s = t.sum_squares(y);
            let g = t.backward(s).unwrap();
            (t.value(s).clone(), g.get(a).clone())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.as_slice()[0].to_bits(), v2.as_slice()[0].to_bits());
        assert_eq!(g1, g2);
    }
}
