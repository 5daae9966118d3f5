//! The hierarchical encoder-decoder segmentation network.
//!
//! ```text
//! x (H,W,D,in) ─ stem ─ enc0 ─ down1 ─ enc1 ─ down2 ─ enc2 ─ down3 ─ enc3
//!                         │              │              │             │
//!  logits ─ head ─ dec0 ─(+)─ up0 ─ dec1 ─(+)─ up1 ─ dec2 ─(+)─ up2 ──┘
//! ```
//!
//! Stage `i` runs at `1/2^(i+1)` of the input resolution with `C_i` channels.
//! The stem and every downsampling step merge 2×2×2 neighbourhoods into one
//! token and project with a linear layer followed by layer norm. Upsampling is
//! nearest-neighbour ×2 followed by a pointwise projection to the skip's
//! channel count. Decoder stage `i` repeats encoder stage `i`'s block kind.

mod checkpoint;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta};

use crate::attention::{AttentionOrder, BlockSettings, DwinBlock, GsaBlock, NdaNesting};
use crate::error::{Error, Result};
use crate::nn::{join, Bindings, LayerNorm, Linear, ParamSpec, ParamStore};
use crate::volume::LabelVolume;
use crate::windowing::WindowSpec;
use crate::{Scalar, Tape, Tensor, Var};

pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Dwin,
    Gsa,
    /// Accepted by the config, rejected when the model is built.
    Swin,
    /// Accepted by the config, rejected when the model is built.
    Cswin,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Dwin => "dwin",
            BlockKind::Gsa => "gsa",
            BlockKind::Swin => "swin",
            BlockKind::Cswin => "cswin",
        })
    }
}

/// How the last decoder stage is brought back to input resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Pointwise linear `C1 → 8K`, then each voxel's 8 sub-voxel logit
    /// vectors are laid out over its 2×2×2 children.
    #[default]
    PatchExpand,
    /// Nearest-neighbour ×2, then pointwise linear `C1 → K`.
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_shape: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_patch: usize,
    pub stage_channels: [usize; STAGES],
    pub stage_block_kinds: [BlockKind; STAGES],
    pub blocks_per_stage: [usize; STAGES],
    pub stage_windows: [WindowSpec; STAGES],
    pub order: AttentionOrder,
    pub nda_nesting: NdaNesting,
    pub dwin_heads: usize,
    pub gsa_heads: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [32, 32, 32],
            in_channels: 1,
            num_classes: 3,
            stem_patch: 2,
            stage_channels: [24, 48, 96, 192],
            stage_block_kinds: [BlockKind::Dwin, BlockKind::Dwin, BlockKind::Gsa, BlockKind::Gsa],
            blocks_per_stage: [1; STAGES],
            stage_windows: [WindowSpec::default(); STAGES],
            order: AttentionOrder::default(),
            nda_nesting: NdaNesting::default(),
            dwin_heads: 2,
            gsa_heads: 4,
            mlp_ratio: 4,
            conv_kernel: 5,
            head: HeadKind::default(),
        }
    }
}

impl ModelConfig {
    /// 16³ input with channels `[6, 12, 24, 48]`, for gradient checks.
    pub fn micro() -> Self {
        Self {
            input_shape: [16, 16, 16],
            stage_channels: [6, 12, 24, 48],
            ..Self::default()
        }
    }

    /// Resolution of each encoder stage.
    pub fn stage_shapes(&self) -> [[usize; 3]; STAGES] {
        let mut out = [[0; 3]; STAGES];
        for (i, s) in out.iter_mut().enumerate() {
            *s = self.input_shape.map(|e| e >> (i + 1));
        }
        out
    }

    pub fn block_settings(&self, stage: usize) -> BlockSettings {
        BlockSettings {
            window: self.stage_windows[stage],
            order: self.order,
            nesting: self.nda_nesting,
            dwin_heads: self.dwin_heads,
            gsa_heads: self.gsa_heads,
            mlp_ratio: self.mlp_ratio,
            conv_kernel: self.conv_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.stem_patch != 2 {
            return err(format!("stem_patch must be 2, got {}", self.stem_patch));
        }
        let factor = 1usize << STAGES;
        if let Some(&e) = self.input_shape.iter().find(|&&e| e == 0 || e % factor != 0) {
            return err(format!(
                "input_shape {:?}: every extent must be a positive multiple of {factor}, found {e}",
                self.input_shape
            ));
        }
        if self.in_channels == 0 {
            return err("in_channels must be >= 1".into());
        }
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be >= 1".into());
        }
        if self.dwin_heads == 0 || self.gsa_heads == 0 {
            return err("head counts must be >= 1".into());
        }
        if self.conv_kernel % 2 == 0 {
            return err(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        for i in 0..STAGES {
            let c = self.stage_channels[i];
            if c == 0 {
                return err(format!("stage_channels[{i}] must be >= 1"));
            }
            if self.blocks_per_stage[i] == 0 {
                return err(format!("blocks_per_stage[{i}] must be >= 1"));
            }
            self.stage_windows[i]
                .validate()
                .map_err(|e| Error::Config(format!("stage_windows[{i}]: {e}")))?;
            match self.stage_block_kinds[i] {
                BlockKind::Dwin => {
                    if c % 3 != 0 || (c / 3) % self.dwin_heads != 0 {
                        return err(format!(
                            "stage_channels[{i}] = {c} must split into 3 groups divisible by dwin_heads = {}",
                            self.dwin_heads
                        ));
                    }
                }
                BlockKind::Gsa => {
                    if c % self.gsa_heads != 0 {
                        return err(format!(
                            "stage_channels[{i}] = {c} must be divisible by gsa_heads = {}",
                            self.gsa_heads
                        ));
                    }
                }
                BlockKind::Swin | BlockKind::Cswin => {}
            }
        }
        Ok(())
    }
}

/// Parameter count per layer, in closed form.
pub mod count {
    use super::*;

    pub fn linear(cin: usize, cout: usize, bias: bool) -> usize {
        cin * cout + if bias { cout } else { 0 }
    }

    pub fn layer_norm(c: usize) -> usize {
        2 * c
    }

    /// `2rC² + rC + C`
    pub fn mlp(c: usize, ratio: usize) -> usize {
        linear(c, ratio * c, true) + linear(ratio * c, c, true)
    }

    /// Four bias-free `Cg × Cg` projections.
    pub fn projections(cg: usize) -> usize {
        4 * cg * cg
    }

    /// `Σ_g depth(g) · 4(C/3)² + C² + C`
    pub fn nda(c: usize, nesting: NdaNesting) -> usize {
        (0..3).map(|g| nesting.depth(g) * projections(c / 3)).sum::<usize>() + linear(c, c, true)
    }

    /// `3C² + 3C + 3Ck³ + C² + C`
    pub fn cda(c: usize, kernel: usize) -> usize {
        linear(c, 3 * c, true) + kernel.pow(3) * 3 * c + linear(c, c, true)
    }

    pub fn dwin_block(c: usize, cfg: &ModelConfig) -> usize {
        4 * layer_norm(c) + nda(c, cfg.nda_nesting) + cda(c, cfg.conv_kernel) + 2 * mlp(c, cfg.mlp_ratio)
    }

    pub fn sa_unit(c: usize, ratio: usize) -> usize {
        2 * layer_norm(c) + projections(c) + mlp(c, ratio)
    }

    pub fn gsa_block(c: usize, ratio: usize) -> usize {
        GsaBlock::UNITS * sa_unit(c, ratio)
    }

    pub fn block(kind: BlockKind, c: usize, cfg: &ModelConfig) -> Result<usize> {
        match kind {
            BlockKind::Dwin => Ok(dwin_block(c, cfg)),
            BlockKind::Gsa => Ok(gsa_block(c, cfg.mlp_ratio)),
            BlockKind::Swin => Err(Error::UnimplementedBaseline("swin")),
            BlockKind::Cswin => Err(Error::UnimplementedBaseline("cswin")),
        }
    }

    /// `8·in·C1 + C1 + 2C1`
    pub fn stem(in_channels: usize, c1: usize) -> usize {
        linear(8 * in_channels, c1, true) + layer_norm(c1)
    }

    pub fn downsample(cin: usize, cout: usize) -> usize {
        linear(8 * cin, cout, true) + layer_norm(cout)
    }

    pub fn upsample(cin: usize, cout: usize) -> usize {
        linear(cin, cout, true)
    }

    pub fn head(c1: usize, k: usize, kind: HeadKind) -> usize {
        match kind {
            HeadKind::PatchExpand => linear(c1, 8 * k, true),
            HeadKind::Nearest => linear(c1, k, true),
        }
    }
}

/// Total trainable scalars of the model described by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let c = cfg.stage_channels;
    let mut n = count::stem(cfg.in_channels, c[0]);
    for i in 0..STAGES {
        let per = count::block(cfg.stage_block_kinds[i], c[i], cfg)?;
        n += per * cfg.blocks_per_stage[i];
        if i > 0 {
            n += count::downsample(c[i - 1], c[i]);
        }
        if i < STAGES - 1 {
            n += per * cfg.blocks_per_stage[i] + count::upsample(c[i + 1], c[i]);
        }
    }
    Ok(n + count::head(c[0], cfg.num_classes, cfg.head))
}

#[derive(Clone, Debug)]
pub enum StageBlock {
    Dwin(DwinBlock),
    Gsa(GsaBlock),
}

impl StageBlock {
    fn new(prefix: &str, kind: BlockKind, c: usize, s: &BlockSettings) -> Result<Self> {
        match kind {
            BlockKind::Dwin => Ok(StageBlock::Dwin(DwinBlock::new(prefix, c, s)?)),
            BlockKind::Gsa => Ok(StageBlock::Gsa(GsaBlock::new(prefix, c, s)?)),
            BlockKind::Swin => Err(Error::UnimplementedBaseline("swin")),
            BlockKind::Cswin => Err(Error::UnimplementedBaseline("cswin")),
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            StageBlock::Dwin(b) => b.specs(out),
            StageBlock::Gsa(b) => b.specs(out),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        match self {
            StageBlock::Dwin(b) => b.forward(tape, p, x),
            StageBlock::Gsa(b) => b.forward(tape, p, x),
        }
    }
}

/// Row index turning `[H, W, D, C]` into `[H/2, W/2, D/2, 8, C]`.
/// Sub-voxel `(a, b, c)` of each 2×2×2 cell sits at slot `4a + 2b + c`.
pub fn space_to_depth_index(shape: [usize; 3]) -> Arc<Vec<u32>> {
    let [h, w, d] = shape;
    let mut idx = Vec::with_capacity(h * w * d);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for l in 0..d / 2 {
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            idx.push((((2 * i + a) * w + 2 * j + b) * d + 2 * l + c) as u32);
                        }
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// Inverse layout of [`space_to_depth_index`]: `[h, w, d, 8, C]` rows back to `[2h, 2w, 2d, C]`.
pub fn depth_to_space_index(shape: [usize; 3]) -> Arc<Vec<u32>> {
    let [h, w, d] = shape;
    let mut idx = Vec::with_capacity(8 * h * w * d);
    for i in 0..2 * h {
        for j in 0..2 * w {
            for l in 0..2 * d {
                let cell = ((i / 2) * w + j / 2) * d + l / 2;
                let slot = (i % 2) * 4 + (j % 2) * 2 + l % 2;
                idx.push((cell * 8 + slot) as u32);
            }
        }
    }
    Arc::new(idx)
}

fn spatial(tape_shape: &[usize], op: &'static str) -> Result<([usize; 3], usize)> {
    match tape_shape {
        [h, w, d, c] => Ok(([*h, *w, *d], *c)),
        _ => Err(Error::invalid(op, format!("expected (H,W,D,C), got {tape_shape:?}"))),
    }
}

pub fn space_to_depth<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (s, c) = spatial(tape.shape(x), "space_to_depth")?;
    if s.iter().any(|e| e % 2 != 0) {
        return Err(Error::Config(format!("2x2x2 patch merge needs even extents, got {s:?}")));
    }
    let out = [s[0] / 2, s[1] / 2, s[2] / 2];
    let rows = tape.gather_rows(x, space_to_depth_index(s), &[out[0], out[1], out[2], 8, c])?;
    tape.reshape(rows, &[out[0], out[1], out[2], 8 * c])
}

pub fn depth_to_space<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (s, c8) = spatial(tape.shape(x), "depth_to_space")?;
    if c8 % 8 != 0 {
        return Err(Error::invalid("depth_to_space", format!("channels {c8} not divisible by 8")));
    }
    let c = c8 / 8;
    let rows = tape.reshape(x, &[s[0] * s[1] * s[2] * 8, c])?;
    tape.gather_rows(rows, depth_to_space_index(s), &[2 * s[0], 2 * s[1], 2 * s[2], c])
}

/// 2×2×2 patch merge, linear projection, layer norm. Used for the stem and
/// for every downsampling step.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchMerge {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            proj: Linear::new(&join(prefix, "proj"), 8 * cin, cout, true),
            norm: LayerNorm::new(&join(prefix, "norm"), cout),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj.specs(out);
        self.norm.specs(out);
    }

    /// Merge and projection only.
    pub fn forward_pre_norm<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let merged = space_to_depth(tape, x)?;
        self.proj.forward(tape, p, merged)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.forward_pre_norm(tape, p, x)?;
        self.norm.forward(tape, p, y)
    }
}

/// Nearest ×2 upsampling followed by a pointwise projection.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub proj: Linear,
}

impl Upsample {
    pub fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            proj: Linear::new(&join(prefix, "proj"), cin, cout, true),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj.specs(out);
    }

    /// Projects each voxel, then replicates it over its 2×2×2 children.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.proj.forward(tape, p, x)?;
        tape.upsample2x(y)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub proj: Linear,
}

impl Head {
    pub fn new(prefix: &str, c1: usize, k: usize, kind: HeadKind) -> Self {
        let cout = match kind {
            HeadKind::PatchExpand => 8 * k,
            HeadKind::Nearest => k,
        };
        Self {
            kind,
            proj: Linear::new(&join(prefix, "proj"), c1, cout, true),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj.specs(out);
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.proj.forward(tape, p, x)?;
        match self.kind {
            HeadKind::PatchExpand => depth_to_space(tape, y),
            HeadKind::Nearest => tape.upsample2x(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: PatchMerge,
    pub encoders: Vec<Vec<StageBlock>>,
    /// `downs[i - 1]` feeds stage `i`.
    pub downs: Vec<PatchMerge>,
    /// `ups[i]` maps stage `i + 1` features to stage `i`.
    pub ups: Vec<Upsample>,
    /// `decoders[i]` runs at stage `i`'s resolution, `i < 3`.
    pub decoders: Vec<Vec<StageBlock>>,
    pub head: Head,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stage_channels;
        let stage = |name: &str, i: usize| -> Result<Vec<StageBlock>> {
            let s = config.block_settings(i);
            (0..config.blocks_per_stage[i])
                .map(|b| StageBlock::new(&format!("{name}{i}.b{b}"), config.stage_block_kinds[i], c[i], &s))
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            stem: PatchMerge::new("stem", config.in_channels, c[0]),
            encoders: (0..STAGES).map(|i| stage("enc", i)).collect::<Result<_>>()?,
            downs: (1..STAGES).map(|i| PatchMerge::new(&format!("down{i}"), c[i - 1], c[i])).collect(),
            ups: (0..STAGES - 1).map(|i| Upsample::new(&format!("up{i}"), c[i + 1], c[i])).collect(),
            decoders: (0..STAGES - 1).map(|i| stage("dec", i)).collect::<Result<_>>()?,
            head: Head::new("head", c[0], config.num_classes, config.head),
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.stem.specs(&mut out);
        for (i, blocks) in self.encoders.iter().enumerate() {
            if i > 0 {
                self.downs[i - 1].specs(&mut out);
            }
            blocks.iter().for_each(|b| b.specs(&mut out));
        }
        for i in (0..STAGES - 1).rev() {
            self.ups[i].specs(&mut out);
            self.decoders[i].iter().for_each(|b| b.specs(&mut out));
        }
        self.head.specs(&mut out);
        out
    }

    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<f32>> {
        ParamStore::from_specs(&self.specs(), rng)
    }

    /// Returns the encoder stage outputs and the logits.
    pub fn forward_with_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        x: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let s = tape.shape(x);
        let expected = [
            self.config.input_shape[0],
            self.config.input_shape[1],
            self.config.input_shape[2],
            self.config.in_channels,
        ];
        if s != expected {
            return Err(Error::shape("network", s, &expected));
        }
        let mut feats = Vec::with_capacity(STAGES);
        let mut h = self.stem.forward(tape, p, x)?;
        for (i, blocks) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = self.downs[i - 1].forward(tape, p, h)?;
            }
            for b in blocks {
                h = b.forward(tape, p, h)?;
            }
            feats.push(h);
        }
        for i in (0..STAGES - 1).rev() {
            let up = self.ups[i].forward(tape, p, h)?;
            h = tape.add(up, feats[i])?;
            for b in &self.decoders[i] {
                h = b.forward(tape, p, h)?;
            }
        }
        let logits = self.head.forward(tape, p, h)?;
        Ok((feats, logits))
    }

    /// `[H, W, D, in] → [H, W, D, K]` logits.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        Ok(self.forward_with_features(tape, p, x)?.1)
    }

    /// Forward pass without gradient bookkeeping for parameters.
    pub fn logits<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<LabelVolume> {
        let logits = self.logits(params, image)?;
        argmax_labels(&logits)
    }
}

/// Per-voxel argmax over the last axis of `[H, W, D, K]`; ties pick the lowest class.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<LabelVolume> {
    let (s, k) = spatial(logits.shape(), "argmax")?;
    let data = logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if v.as_f64() > row[best].as_f64() {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    LabelVolume::new(s, data)
}
