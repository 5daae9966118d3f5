//! Attention layers over `(H, W, D, C)` volumes.
//!
//! * [`window_attention`]: multi-head self-attention restricted to the
//!   directional windows of one [`Direction`].
//! * [`NdaLayer`]: channel groups receive progressively longer chains of
//!   directional attentions.
//! * [`CdaLayer`]: one directional attention per channel group, with a
//!   depthwise convolution applied to the qkv features.
//! * [`DwinBlock`]: pre-norm residual stack NDA, MLP, CDA, MLP.
//! * [`GsaBlock`]: two global self-attention units over the flattened volume.

mod cda;
mod dwin;
mod gsa;
mod nda;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use cda::CdaLayer;
pub use dwin::DwinBlock;
pub use gsa::{GsaBlock, SaUnit};
pub use nda::NdaLayer;

use crate::error::{Error, Result};
use crate::nn::{join, Bindings, Linear, ParamSpec};
use crate::windowing::{partition_var, reverse_var, Direction, WindowPlan, WindowSpec};
use crate::{Scalar, Tape, Var};

/// A permutation of the three directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[Direction; 3]", into = "[Direction; 3]")]
pub struct AttentionOrder([Direction; 3]);

impl AttentionOrder {
    pub fn new(order: [Direction; 3]) -> Result<Self> {
        let distinct = order[0] != order[1] && order[1] != order[2] && order[0] != order[2];
        if !distinct {
            return Err(Error::Config(format!(
                "attention order must be a permutation of horizontal, vertical, depthwise; got {order:?}"
            )));
        }
        Ok(Self(order))
    }

    pub fn directions(&self) -> [Direction; 3] {
        self.0
    }

    /// All six orders, lexicographic in the `Direction` declaration order.
    pub fn all() -> Vec<AttentionOrder> {
        use Direction::*;
        [
            [Horizontal, Vertical, Depthwise],
            [Horizontal, Depthwise, Vertical],
            [Vertical, Horizontal, Depthwise],
            [Vertical, Depthwise, Horizontal],
            [Depthwise, Horizontal, Vertical],
            [Depthwise, Vertical, Horizontal],
        ]
        .into_iter()
        .map(AttentionOrder)
        .collect()
    }
}

impl Default for AttentionOrder {
    fn default() -> Self {
        Self([Direction::Depthwise, Direction::Horizontal, Direction::Vertical])
    }
}

impl TryFrom<[Direction; 3]> for AttentionOrder {
    type Error = Error;
    fn try_from(order: [Direction; 3]) -> Result<Self> {
        Self::new(order)
    }
}

impl From<AttentionOrder> for [Direction; 3] {
    fn from(o: AttentionOrder) -> Self {
        o.0
    }
}

impl fmt::Display for AttentionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.0[0], self.0[1], self.0[2])
    }
}

/// How deep each NDA channel group's attention chain is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdaNesting {
    /// Group `i` (1-based) attends along the first `i` directions.
    #[default]
    Progressive,
    /// Every group attends along all three directions.
    Uniform3,
}

impl NdaNesting {
    pub fn depth(self, group: usize) -> usize {
        match self {
            NdaNesting::Progressive => group + 1,
            NdaNesting::Uniform3 => 3,
        }
    }
}

impl fmt::Display for NdaNesting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NdaNesting::Progressive => "progressive",
            NdaNesting::Uniform3 => "uniform3",
        })
    }
}

/// Per-block hyperparameters shared by the Dwin and GSA blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSettings {
    pub window: WindowSpec,
    pub order: AttentionOrder,
    pub nesting: NdaNesting,
    /// Heads inside each directional attention of a channel group.
    pub dwin_heads: usize,
    pub gsa_heads: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
}

impl Default for BlockSettings {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            order: AttentionOrder::default(),
            nesting: NdaNesting::default(),
            dwin_heads: 2,
            gsa_heads: 4,
            mlp_ratio: 4,
            conv_kernel: 5,
        }
    }
}

/// Bias-free query/key/value/output projections of one attention.
#[derive(Clone, Debug)]
pub struct Projections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Projections {
    pub fn new(prefix: &str, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{c} channels at {prefix} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(&join(prefix, "wq"), c, c, false),
            wk: Linear::new(&join(prefix, "wk"), c, c, false),
            wv: Linear::new(&join(prefix, "wv"), c, c, false),
            wo: Linear::new(&join(prefix, "wo"), c, c, false),
            heads,
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            l.specs(out);
        }
    }

    /// Attention over rows already grouped as `[B, T, C]`, then `wo`.
    pub fn attend<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, tokens: Var) -> Result<Var> {
        let q = self.wq.forward(tape, p, tokens)?;
        let k = self.wk.forward(tape, p, tokens)?;
        let v = self.wv.forward(tape, p, tokens)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.wo.forward(tape, p, a)
    }
}

pub(crate) fn spatial_dims(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        &[h, w, d, c] => Ok([h, w, d, c]),
        _ => Err(Error::invalid(op, format!("expected (H,W,D,C), got {shape:?}"))),
    }
}

/// Directional window attention. Each window attends within itself only;
/// windows are scattered back to the volume layout before `wo`.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    x: Var,
    direction: Direction,
    spec: WindowSpec,
    proj: &Projections,
) -> Result<Var> {
    let [h, w, d, _] = spatial_dims(tape.shape(x), "window_attention")?;
    let plan = WindowPlan::new([h, w, d], direction, spec)?;
    let tokens = partition_var(tape, x, &plan)?;
    let q = proj.wq.forward(tape, p, tokens)?;
    let k = proj.wk.forward(tape, p, tokens)?;
    let v = proj.wv.forward(tape, p, tokens)?;
    let a = tape.attention(q, k, v, proj.heads)?;
    let a = reverse_var(tape, a, &plan)?;
    proj.wo.forward(tape, p, a)
}

/// Attention on precomputed q, k, v volumes along one direction.
pub(crate) fn directional_qkv_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    direction: Direction,
    spec: WindowSpec,
    heads: usize,
) -> Result<Var> {
    let [h, w, d, _] = spatial_dims(tape.shape(q), "directional_attention")?;
    let plan = WindowPlan::new([h, w, d], direction, spec)?;
    let qw = partition_var(tape, q, &plan)?;
    let kw = partition_var(tape, k, &plan)?;
    let vw = partition_var(tape, v, &plan)?;
    let a = tape.attention(qw, kw, vw, heads)?;
    reverse_var(tape, a, &plan)
}

/// Pre-norm residual: `x + f(norm(x))`.
pub(crate) fn residual<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let y = f(tape, x)?;
    tape.add(x, y)
}
