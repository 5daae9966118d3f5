use super::{directional_qkv_attention, AttentionOrder};
use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, join, Bindings, Init, Linear, ParamSpec};
use crate::windowing::{split_channel_groups_var, WindowSpec};
use crate::{Scalar, Tape, Var};

/// Convolutional directional attention.
///
/// `qkv = dwconv(linear(x))`; channel group `i` of q, k and v attends along
/// `order[i]` only. Groups are concatenated and projected.
#[derive(Clone, Debug)]
pub struct CdaLayer {
    pub channels: usize,
    pub window: WindowSpec,
    pub order: AttentionOrder,
    pub heads: usize,
    pub qkv: Linear,
    /// Depthwise kernel `[k, k, k, 3C]`.
    pub kernel: String,
    pub kernel_size: usize,
    pub proj: Linear,
}

impl CdaLayer {
    pub fn new(
        prefix: &str,
        channels: usize,
        window: WindowSpec,
        order: AttentionOrder,
        heads: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        if channels % 3 != 0 {
            return Err(Error::Config(format!("CDA at {prefix}: {channels} channels not divisible by 3")));
        }
        let cg = channels / 3;
        if heads == 0 || cg % heads != 0 {
            return Err(Error::Config(format!(
                "CDA at {prefix}: group width {cg} not divisible by {heads} heads"
            )));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!("CDA at {prefix}: conv kernel {kernel_size} must be odd")));
        }
        Ok(Self {
            channels,
            window,
            order,
            heads,
            qkv: Linear::new(&join(prefix, "qkv"), channels, 3 * channels, true),
            kernel: join(prefix, "dwconv"),
            kernel_size,
            proj: Linear::new(&join(prefix, "proj"), channels, channels, true),
        })
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.qkv.specs(out);
        let k = self.kernel_size;
        out.push(ParamSpec {
            path: self.kernel.clone(),
            shape: vec![k, k, k, 3 * self.channels],
            init: Init::Uniform(fan_in_bound(k * k * k)),
        });
        self.proj.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let c = self.channels;
        let qkv = self.qkv.forward(tape, p, x)?;
        let qkv = tape.depthwise_conv3d(qkv, p.get(&self.kernel)?)?;
        let parts = tape.split_lastdim(qkv, &[c, c, c])?;
        let qs = split_channel_groups_var(tape, parts[0], 3)?;
        let ks = split_channel_groups_var(tape, parts[1], 3)?;
        let vs = split_channel_groups_var(tape, parts[2], 3)?;
        let dirs = self.order.directions();
        let mut outs = Vec::with_capacity(3);
        for g in 0..3 {
            outs.push(directional_qkv_attention(
                tape, qs[g], ks[g], vs[g], dirs[g], self.window, self.heads,
            )?);
        }
        let cat = tape.concat_lastdim(&outs)?;
        self.proj.forward(tape, p, cat)
    }
}
