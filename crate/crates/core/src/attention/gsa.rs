use super::{residual, spatial_dims, BlockSettings, Projections};
use crate::error::Result;
use crate::nn::{join, Bindings, LayerNorm, Mlp, ParamSpec};
use crate::{Scalar, Tape, Var};

/// One pre-norm self-attention unit over a token sequence `[1, N, C]`.
#[derive(Clone, Debug)]
pub struct SaUnit {
    pub norm1: LayerNorm,
    pub attn: Projections,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SaUnit {
    pub fn new(prefix: &str, channels: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&join(prefix, "norm1"), channels),
            attn: Projections::new(&join(prefix, "attn"), channels, heads)?,
            norm2: LayerNorm::new(&join(prefix, "norm2"), channels),
            mlp: Mlp::new(&join(prefix, "mlp"), channels, mlp_ratio),
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.attn.specs(out);
        self.norm2.specs(out);
        self.mlp.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let a = residual(tape, x, |t, v| {
            let n = self.norm1.forward(t, p, v)?;
            self.attn.attend(t, p, n)
        })?;
        residual(tape, a, |t, v| {
            let n = self.norm2.forward(t, p, v)?;
            self.mlp.forward(t, p, n)
        })
    }
}

/// Global self-attention block: the volume is flattened to `N = H·W·D`
/// tokens, passed through two [`SaUnit`]s and folded back.
#[derive(Clone, Debug)]
pub struct GsaBlock {
    pub units: Vec<SaUnit>,
}

impl GsaBlock {
    pub const UNITS: usize = 2;

    pub fn new(prefix: &str, channels: usize, s: &BlockSettings) -> Result<Self> {
        let units = (0..Self::UNITS)
            .map(|i| SaUnit::new(&join(prefix, &format!("sa{i}")), channels, s.gsa_heads, s.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self { units })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.units.iter().for_each(|u| u.specs(out));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let [h, w, d, c] = spatial_dims(tape.shape(x), "gsa_block")?;
        let mut seq = tape.reshape(x, &[1, h * w * d, c])?;
        for unit in &self.units {
            seq = unit.forward(tape, p, seq)?;
        }
        tape.reshape(seq, &[h, w, d, c])
    }
}
