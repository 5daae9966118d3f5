use super::{window_attention, AttentionOrder, NdaNesting, Projections};
use crate::error::{Error, Result};
use crate::nn::{join, Bindings, Linear, ParamSpec};
use crate::windowing::{split_channel_groups_var, WindowSpec};
use crate::{Scalar, Tape, Var};

/// Nested directional attention over three channel groups.
///
/// Group `i` runs its own chain of directional window attentions, applied in
/// `order`, to its running features. Chain length follows `nesting`. The
/// group outputs are concatenated and mixed by a `C × C` projection.
#[derive(Clone, Debug)]
pub struct NdaLayer {
    pub channels: usize,
    pub window: WindowSpec,
    pub order: AttentionOrder,
    pub nesting: NdaNesting,
    /// `chains[g][j]` is the `j`-th attention of group `g`.
    pub chains: Vec<Vec<Projections>>,
    pub proj: Linear,
}

impl NdaLayer {
    pub fn new(
        prefix: &str,
        channels: usize,
        window: WindowSpec,
        order: AttentionOrder,
        nesting: NdaNesting,
        heads: usize,
    ) -> Result<Self> {
        if channels % 3 != 0 {
            return Err(Error::Config(format!("NDA at {prefix}: {channels} channels not divisible by 3")));
        }
        let cg = channels / 3;
        let mut chains = Vec::with_capacity(3);
        for g in 0..3 {
            let chain = (0..nesting.depth(g))
                .map(|j| Projections::new(&join(prefix, &format!("g{g}.a{j}")), cg, heads))
                .collect::<Result<Vec<_>>>()?;
            chains.push(chain);
        }
        Ok(Self {
            channels,
            window,
            order,
            nesting,
            chains,
            proj: Linear::new(&join(prefix, "proj"), channels, channels, true),
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        for chain in &self.chains {
            for p in chain {
                p.specs(out);
            }
        }
        self.proj.specs(out);
    }

    /// Per-group outputs before concatenation and projection.
    pub fn forward_groups<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Vec<Var>> {
        let groups = split_channel_groups_var(tape, x, 3)?;
        let dirs = self.order.directions();
        let mut outs = Vec::with_capacity(3);
        for (g, mut h) in groups.into_iter().enumerate() {
            for (j, proj) in self.chains[g].iter().enumerate() {
                h = window_attention(tape, p, h, dirs[j % 3], self.window, proj)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let groups = self.forward_groups(tape, p, x)?;
        let cat = tape.concat_lastdim(&groups)?;
        self.proj.forward(tape, p, cat)
    }
}
