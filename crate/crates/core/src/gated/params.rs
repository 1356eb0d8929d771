use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Mat, Tape, Var};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// The six networks: memory value/spread, evolution mismatch value/spread,
/// observation mismatch value/spread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockId {
    C1,
    C2,
    F1,
    F2,
    H1,
    H2,
}

impl BlockId {
    pub const ALL: [BlockId; 6] = [
        BlockId::C1,
        BlockId::C2,
        BlockId::F1,
        BlockId::F2,
        BlockId::H1,
        BlockId::H2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::C1 => "c1",
            BlockId::C2 => "c2",
            BlockId::F1 => "f1",
            BlockId::F2 => "f2",
            BlockId::H1 => "h1",
            BlockId::H2 => "h2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDims {
    pub d_x: usize,
    pub d_z: usize,
    pub d_c: usize,
    pub hidden: usize,
}

impl GateDims {
    /// Memory twice the state size, 32 hidden units.
    pub fn with_defaults(d_x: usize, d_z: usize) -> Self {
        Self {
            d_x,
            d_z,
            d_c: 2 * d_x,
            hidden: 32,
        }
    }

    /// `(input, output)` length of a block.
    pub fn io(&self, id: BlockId) -> (usize, usize) {
        match id {
            BlockId::C1 | BlockId::C2 => (2 * self.d_c + self.d_x, self.d_c),
            BlockId::F1 | BlockId::F2 => (2 * self.d_c, self.d_x),
            BlockId::H1 | BlockId::H2 => (self.d_x, self.d_z),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_z == 0 || self.d_c == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "all gate dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Two-layer tanh network `w2 tanh(w1 i + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl Block {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Mat::zeros(hidden, input),
            b1: Mat::zeros(hidden, 1),
            w2: Mat::zeros(output, hidden),
            b2: Mat::zeros(output, 1),
        }
    }

    fn uniform(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut fill = |rows, cols, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Mat::from_vec(rows, cols, data).expect("length matches")
        };
        Self {
            w1: fill(hidden, input, input),
            b1: fill(hidden, 1, input),
            w2: fill(output, hidden, hidden),
            b2: fill(output, 1, hidden),
        }
    }

    pub fn forward(&self, input: &Mat) -> Result<Mat> {
        let hidden = self.w1.matmul(input)?.add(&self.b1)?.map(f64::tanh);
        Ok(self.w2.matmul(&hidden)?.add(&self.b2)?)
    }

    pub fn tensors(&self) -> [&Mat; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// How state vectors are brought to unit scale before entering a network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateScaling {
    /// Divide by the vector's own largest absolute entry.
    #[default]
    PerVector,
    /// Divide componentwise by fixed positive scales.
    Fixed { scale: Vec<f64> },
}

impl StateScaling {
    /// Componentwise largest absolute value over the given state rows.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a Mat>) -> Result<Self> {
        let mut scale: Vec<f64> = Vec::new();
        for m in states {
            if scale.is_empty() {
                scale = vec![0.0; m.cols()];
            }
            for r in 0..m.rows() {
                for (s, v) in scale.iter_mut().zip(m.row(r)) {
                    *s = s.max(v.abs());
                }
            }
        }
        if scale.is_empty() {
            return Err(Error::Empty("no states to fit a scaling on"));
        }
        Ok(StateScaling::Fixed {
            scale: scale.into_iter().map(|s| s.max(1e-8)).collect(),
        })
    }

    fn validate(&self, d_x: usize) -> Result<()> {
        if let StateScaling::Fixed { scale } = self {
            if scale.len() != d_x || scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Config(format!(
                    "fixed state scaling needs {d_x} positive finite entries, got {scale:?}"
                )));
            }
        }
        Ok(())
    }
}

/// All trainable parameters of the gated filter, plus the fixed input
/// scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    dims: GateDims,
    blocks: [Block; 6],
    scaling: StateScaling,
}

impl GateParams {
    pub fn zeros(dims: GateDims) -> Result<Self> {
        dims.validate()?;
        let blocks = BlockId::ALL.map(|id| {
            let (i, o) = dims.io(id);
            Block::zeros(i, dims.hidden, o)
        });
        Ok(Self {
            dims,
            blocks,
            scaling: StateScaling::PerVector,
        })
    }

    /// Uniform in `±1/sqrt(fan_in)` for every tensor, reproducible from `seed`.
    pub fn init(dims: GateDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = BlockId::ALL.map(|id| {
            let (i, o) = dims.io(id);
            Block::uniform(i, dims.hidden, o, &mut rng)
        });
        Ok(Self {
            dims,
            blocks,
            scaling: StateScaling::PerVector,
        })
    }

    pub fn with_scaling(mut self, scaling: StateScaling) -> Result<Self> {
        scaling.validate(self.dims.d_x)?;
        self.scaling = scaling;
        Ok(self)
    }

    pub fn scaling(&self) -> &StateScaling {
        &self.scaling
    }

    pub fn dims(&self) -> GateDims {
        self.dims
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.index()]
    }

    /// Replaces one block after checking its shapes.
    pub fn set_block(&mut self, id: BlockId, block: Block) -> Result<()> {
        let (i, o) = self.dims.io(id);
        let h = self.dims.hidden;
        let expected = [(h, i), (h, 1), (o, h), (o, 1)];
        for (t, e) in block.tensors().iter().zip(expected) {
            if t.shape() != e {
                return Err(Error::Config(format!(
                    "block {} tensor shape {:?}, expected {:?}",
                    id.name(),
                    t.shape(),
                    e
                )));
            }
        }
        self.blocks[id.index()] = block;
        Ok(())
    }

    /// The 24 tensors in block order, each as `w1, b1, w2, b2`.
    pub fn tensors(&self) -> Vec<&Mat> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.tensors_mut())
            .collect()
    }

    /// Rebuilds parameters from tensors in [`GateParams::tensors`] order.
    pub fn from_tensors(dims: GateDims, scaling: StateScaling, tensors: Vec<Mat>) -> Result<Self> {
        let mut out = Self::zeros(dims)?.with_scaling(scaling)?;
        if tensors.len() != 24 {
            return Err(Error::Config(format!(
                "expected 24 tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        for id in BlockId::ALL {
            let block = Block {
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
            };
            out.set_block(id, block)?;
        }
        Ok(out)
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Places every tensor on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let blocks = self.blocks.each_ref().map(|b| BlockVars {
            w1: tape.leaf(b.w1.clone()),
            b1: tape.leaf(b.b1.clone()),
            w2: tape.leaf(b.w2.clone()),
            b2: tape.leaf(b.b2.clone()),
        });
        let inv_scale = self.inv_scale_leaf(tape);
        ParamVars { blocks, inv_scale }
    }

    fn inv_scale_leaf(&self, tape: &mut Tape) -> Option<Var> {
        match &self.scaling {
            StateScaling::PerVector => None,
            StateScaling::Fixed { scale } => {
                Some(tape.leaf(Mat::col(&scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>())))
            }
        }
    }

    /// Handles for parameters already placed on `tape` as `vars`, in
    /// [`GateParams::tensors`] order.
    pub fn vars_from(&self, tape: &mut Tape, vars: &[Var]) -> Result<ParamVars> {
        if vars.len() != 24 {
            return Err(Error::Config(format!(
                "expected 24 parameter handles, got {}",
                vars.len()
            )));
        }
        let blocks = std::array::from_fn(|i| BlockVars {
            w1: vars[4 * i],
            b1: vars[4 * i + 1],
            w2: vars[4 * i + 2],
            b2: vars[4 * i + 3],
        });
        Ok(ParamVars {
            blocks,
            inv_scale: self.inv_scale_leaf(tape),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let blocks = BlockId::ALL
            .iter()
            .map(|id| {
                let b = self.block(*id);
                (
                    id.name().to_string(),
                    BlockRecord {
                        w1: b.w1.as_slice().to_vec(),
                        b1: b.b1.as_slice().to_vec(),
                        w2: b.w2.as_slice().to_vec(),
                        b2: b.b2.as_slice().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            blocks,
            state_scaling: self.scaling.clone(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        let dims = c.dims;
        let mut out = Self::zeros(dims)?.with_scaling(c.state_scaling.clone())?;
        for id in BlockId::ALL {
            let rec = c.blocks.get(id.name()).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing block {}", id.name()))
            })?;
            let (i, o) = dims.io(id);
            let h = dims.hidden;
            let tensor = |data: &Vec<f64>, rows, cols, what: &str| {
                Mat::from_vec(rows, cols, data.clone()).map_err(|_| {
                    Error::Config(format!(
                        "block {} {what}: expected {} values, got {}",
                        id.name(),
                        rows * cols,
                        data.len()
                    ))
                })
            };
            let block = Block {
                w1: tensor(&rec.w1, h, i, "W1")?,
                b1: tensor(&rec.b1, h, 1, "b1")?,
                w2: tensor(&rec.w2, o, h, "W2")?,
                b2: tensor(&rec.b2, o, 1, "b2")?,
            };
            out.set_block(id, block)?;
        }
        if !out.is_finite() {
            return Err(Error::Config(
                "checkpoint contains non-finite values".into(),
            ));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = crate::json::to_string(&self.to_checkpoint())
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let c: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&c)
    }
}

/// On-disk form of [`GateParams`]; matrices are flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: GateDims,
    pub blocks: std::collections::BTreeMap<String, BlockRecord>,
    #[serde(default)]
    pub state_scaling: StateScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    #[serde(rename = "W1")]
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles of a [`GateParams`], same layout.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    blocks: [BlockVars; 6],
    /// Reciprocal fixed scales, when the scaling is fixed.
    pub inv_scale: Option<Var>,
}

impl ParamVars {
    pub fn block(&self, id: BlockId) -> BlockVars {
        self.blocks[id.index()]
    }

    /// Handles in [`GateParams::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| [b.w1, b.b1, b.w2, b.b2])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> GateDims {
        GateDims::with_defaults(2, 2)
    }

    #[test]
    fn block_shapes() {
        let p = GateParams::init(dims(), 0).unwrap();
        assert_eq!(p.block(BlockId::C1).w1.shape(), (32, 10));
        assert_eq!(p.block(BlockId::C2).w2.shape(), (4, 32));
        assert_eq!(p.block(BlockId::F1).w1.shape(), (32, 8));
        assert_eq!(p.block(BlockId::H2).w1.shape(), (32, 2));
        assert_eq!(p.block(BlockId::H2).b2.shape(), (2, 1));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = GateParams::init(dims(), 9).unwrap();
        for id in BlockId::ALL {
            let b = p.block(id);
            let bound_in = 1.0 / (b.w1.cols() as f64).sqrt();
            let bound_h = 1.0 / 32f64.sqrt();
            assert!(b.w1.max_abs() <= bound_in && b.b1.max_abs() <= bound_in);
            assert!(b.w2.max_abs() <= bound_h && b.b2.max_abs() <= bound_h);
        }
        assert_eq!(p, GateParams::init(dims(), 9).unwrap());
        assert_ne!(p, GateParams::init(dims(), 10).unwrap());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let b = Block::zeros(3, 4, 2);
        assert_eq!(
            b.forward(&Mat::col(&[1.0, 2.0, 3.0])).unwrap(),
            Mat::zeros(2, 1)
        );
    }

    #[test]
    fn bias_passes_through() {
        let mut b = Block::zeros(2, 2, 2);
        b.w2 = Mat::identity(2);
        b.b2 = Mat::col(&[0.3, -0.7]);
        assert_eq!(
            b.forward(&Mat::col(&[5.0, 6.0])).unwrap(),
            Mat::col(&[0.3, -0.7])
        );
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let p = GateParams::init(
            GateDims {
                d_x: 3,
                d_z: 2,
                d_c: 2,
                hidden: 5,
            },
            4,
        )
        .unwrap();
        let b = p.block(BlockId::F1);
        let input = [0.2, -0.4, 0.9, 0.1];
        let mut expected = [0.0; 3];
        for (o, e) in expected.iter_mut().enumerate() {
            let mut acc = b.b2.as_slice()[o];
            for h in 0..5 {
                let mut pre = b.b1.as_slice()[h];
                for (i, v) in input.iter().enumerate() {
                    pre += b.w1.as_slice()[h * 4 + i] * v;
                }
                acc += b.w2.as_slice()[o * 5 + h] * pre.tanh();
            }
            *e = acc;
        }
        let got = b.forward(&Mat::col(&input)).unwrap();
        for (g, e) in got.as_slice().iter().zip(expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = GateParams::init(dims(), 3).unwrap();
        let text = crate::json::to_string(&p.to_checkpoint()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["dims"]["d_c"], 4);
        assert_eq!(v["blocks"]["c1"]["W1"].as_array().unwrap().len(), 320);
        let back = GateParams::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_rejects_wrong_lengths_and_versions() {
        let p = GateParams::init(dims(), 3).unwrap();
        let mut c = p.to_checkpoint();
        c.blocks.get_mut("h1").unwrap().b1.pop();
        assert!(matches!(
            GateParams::from_checkpoint(&c),
            Err(Error::Config(_))
        ));
        let mut c = p.to_checkpoint();
        c.version = 99;
        assert!(GateParams::from_checkpoint(&c).is_err());
        let mut c = p.to_checkpoint();
        c.blocks.remove("f2");
        assert!(GateParams::from_checkpoint(&c).is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let p = GateParams::init(dims(), 1).unwrap();
        let back = GateParams::from_tensors(
            p.dims(),
            StateScaling::PerVector,
            p.tensors().into_iter().cloned().collect(),
        )
        .unwrap();
        assert_eq!(back, p);
        assert_eq!(
            p.count(),
            p.tensors().iter().map(|t| t.len()).sum::<usize>()
        );
    }
}
