use super::{residual, BlockSettings, CdaLayer, NdaLayer};
use crate::error::Result;
use crate::nn::{join, Bindings, LayerNorm, Mlp, ParamSpec};
use crate::{Scalar, Tape, Var};

/// Directional-window block:
///
/// ```text
/// a = x + NDA(norm1(x))
/// b = a + MLP1(norm2(a))
/// c = b + CDA(norm3(b))
/// y = c + MLP2(norm4(c))
/// ```
#[derive(Clone, Debug)]
pub struct DwinBlock {
    pub norm1: LayerNorm,
    pub nda: NdaLayer,
    pub norm2: LayerNorm,
    pub mlp1: Mlp,
    pub norm3: LayerNorm,
    pub cda: CdaLayer,
    pub norm4: LayerNorm,
    pub mlp2: Mlp,
}

impl DwinBlock {
    pub fn new(prefix: &str, channels: usize, s: &BlockSettings) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&join(prefix, "norm1"), channels),
            nda: NdaLayer::new(&join(prefix, "nda"), channels, s.window, s.order, s.nesting, s.dwin_heads)?,
            norm2: LayerNorm::new(&join(prefix, "norm2"), channels),
            mlp1: Mlp::new(&join(prefix, "mlp1"), channels, s.mlp_ratio),
            norm3: LayerNorm::new(&join(prefix, "norm3"), channels),
            cda: CdaLayer::new(&join(prefix, "cda"), channels, s.window, s.order, s.dwin_heads, s.conv_kernel)?,
            norm4: LayerNorm::new(&join(prefix, "norm4"), channels),
            mlp2: Mlp::new(&join(prefix, "mlp2"), channels, s.mlp_ratio),
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.nda.specs(out);
        self.norm2.specs(out);
        self.mlp1.specs(out);
        self.norm3.specs(out);
        self.cda.specs(out);
        self.norm4.specs(out);
        self.mlp2.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let a = residual(tape, x, |t, v| {
            let n = self.norm1.forward(t, p, v)?;
            self.nda.forward(t, p, n)
        })?;
        let b = residual(tape, a, |t, v| {
            let n = self.norm2.forward(t, p, v)?;
            self.mlp1.forward(t, p, n)
        })?;
        let c = residual(tape, b, |t, v| {
            let n = self.norm3.forward(t, p, v)?;
            self.cda.forward(t, p, n)
        })?;
        residual(tape, c, |t, v| {
            let n = self.norm4.forward(t, p, v)?;
            self.mlp2.forward(t, p, n)
        })
    }
}
