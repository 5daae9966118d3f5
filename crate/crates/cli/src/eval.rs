//! Checkpoint evaluation.

use std::path::Path;

use anyhow::{Context, Result};
use dwinkit_core::metrics::SegMetricsReport;
use dwinkit_core::network::{Checkpoint, Network};
use dwinkit_core::nn::ParamStore;
use dwinkit_core::synth::VolumeSample;
use dwinkit_core::volume::LabelVolume;

pub const METRICS_FILE: &str = "metrics.json";

/// Per-class metrics averaged over `samples`, predicting by per-voxel argmax.
pub fn evaluate(net: &Network, params: &ParamStore<f32>, samples: &[VolumeSample], k: usize) -> Result<SegMetricsReport> {
    let preds = samples
        .iter()
        .map(|s| Ok(net.predict(params, &s.image)?))
        .collect::<Result<Vec<_>>>()?;
    score(&preds, samples, k)
}

/// Averages per-sample reports of `preds` against the samples' labels.
pub fn score(preds: &[LabelVolume], samples: &[VolumeSample], k: usize) -> Result<SegMetricsReport> {
    anyhow::ensure!(!samples.is_empty(), "nothing to evaluate");
    let reports = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| Ok(SegMetricsReport::compute(p, &s.labels, k)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegMetricsReport::average(&reports).expect("non-empty"))
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Network)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let net = ckpt
        .network()
        .with_context(|| format!("checkpoint {} does not match its own config", path.display()))?;
    Ok((ckpt, net))
}
