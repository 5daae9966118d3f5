//! Architecture summary: stage table, token counts, parameters, attention FLOPs.

use std::fmt::Write;

use dwinkit_core::attention::NdaNesting;
use dwinkit_core::network::{param_count, BlockKind, ModelConfig, STAGES};
use dwinkit_core::windowing::{Direction, WindowPlan, WindowSpec};
use dwinkit_core::Result;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    /// `enc0`..`enc3`, then `dec2`..`dec0`.
    pub name: String,
    pub resolution: [usize; 3],
    pub channels: usize,
    pub kind: BlockKind,
    pub blocks: usize,
    /// Dwin stages only.
    pub window: Option<WindowSpec>,
    /// `(direction, tokens per window, windows)` for Dwin stages; one
    /// global entry with `direction = None` for GSA stages.
    pub tokens: Vec<TokenCount>,
    /// Estimated attention FLOPs of one block: `2 · tokens² · channels`
    /// summed over every window of every attention the block runs.
    pub attention_flops_per_block: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenCount {
    pub direction: Option<Direction>,
    pub tokens: usize,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inspection {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stages: Vec<StageRow>,
    pub param_count: usize,
    pub total_attention_flops: u64,
}

fn window_flops(plan: &WindowPlan, channels: usize) -> u64 {
    let t = plan.tokens_per_window() as u64;
    plan.num_windows() as u64 * 2 * t * t * channels as u64
}

fn stage_row(cfg: &ModelConfig, name: String, stage: usize) -> Result<StageRow> {
    let res = cfg.stage_shapes()[stage];
    let c = cfg.stage_channels[stage];
    let kind = cfg.stage_block_kinds[stage];
    let spec = cfg.stage_windows[stage];
    let (window, tokens, flops) = match kind {
        BlockKind::Dwin => {
            let order = cfg.order.directions();
            let plan = |d: Direction| WindowPlan::new(res, d, spec);
            let mut tokens = Vec::new();
            for d in order {
                let p = plan(d)?;
                tokens.push(TokenCount {
                    direction: Some(d),
                    tokens: p.tokens_per_window(),
                    windows: p.num_windows(),
                });
            }
            let cg = c / 3;
            let mut flops = 0;
            for g in 0..3 {
                let depth = match cfg.nda_nesting {
                    NdaNesting::Progressive => g + 1,
                    NdaNesting::Uniform3 => 3,
                };
                for &d in &order[..depth] {
                    flops += window_flops(&plan(d)?, cg);
                }
            }
            for &d in &order {
                flops += window_flops(&plan(d)?, cg);
            }
            (Some(spec), tokens, flops)
        }
        _ => {
            let n: usize = res.iter().product();
            let units = dwinkit_core::attention::GsaBlock::UNITS as u64;
            let tokens = vec![TokenCount {
                direction: None,
                tokens: n,
                windows: 1,
            }];
            (None, tokens, units * 2 * (n as u64).pow(2) * c as u64)
        }
    };
    Ok(StageRow {
        name,
        resolution: res,
        channels: c,
        kind,
        blocks: cfg.blocks_per_stage[stage],
        window,
        tokens,
        attention_flops_per_block: flops,
    })
}

pub fn inspect(cfg: &ModelConfig) -> Result<Inspection> {
    let params = param_count(cfg)?;
    let mut stages = Vec::new();
    for i in 0..STAGES {
        stages.push(stage_row(cfg, format!("enc{i}"), i)?);
    }
    for i in (0..STAGES - 1).rev() {
        stages.push(stage_row(cfg, format!("dec{i}"), i)?);
    }
    let total = stages.iter().map(|s| s.attention_flops_per_block * s.blocks as u64).sum();
    Ok(Inspection {
        input_shape: cfg.input_shape,
        num_classes: cfg.num_classes,
        stages,
        param_count: params,
        total_attention_flops: total,
    })
}

impl Inspection {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let [h, w, d] = self.input_shape;
        writeln!(s, "input {h}x{w}x{d}, {} classes", self.num_classes).unwrap();
        writeln!(
            s,
            "{:<6} {:>12} {:>8} {:>6} {:>7} {:>9}  {:<44} {:>16}",
            "stage", "resolution", "channels", "kind", "blocks", "window", "tokens/window (windows)", "attn FLOPs/block"
        )
        .unwrap();
        for r in &self.stages {
            let [a, b, c] = r.resolution;
            let window = r.window.map(|w| format!("{}x{}x{}", w.wh, w.ww, w.wd)).unwrap_or_else(|| "-".into());
            let tokens = r
                .tokens
                .iter()
                .map(|t| match t.direction {
                    Some(d) => format!("{}:{} ({})", &d.to_string()[..1], t.tokens, t.windows),
                    None => format!("global:{}", t.tokens),
                })
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(
                s,
                "{:<6} {:>12} {:>8} {:>6} {:>7} {:>9}  {:<44} {:>16}",
                r.name,
                format!("{a}x{b}x{c}"),
                r.channels,
                r.kind.to_string(),
                r.blocks,
                window,
                tokens,
                r.attention_flops_per_block
            )
            .unwrap();
        }
        writeln!(s, "parameters {}", self.param_count).unwrap();
        writeln!(s, "attention FLOPs (all blocks) {}", self.total_attention_flops).unwrap();
        s
    }
}
