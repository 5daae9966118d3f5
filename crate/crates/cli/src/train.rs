//! SGD training loop with poly learning-rate decay.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dwinkit_core::losses::segmentation_loss;
use dwinkit_core::network::{Checkpoint, Network};
use dwinkit_core::nn::ParamStore;
use dwinkit_core::synth::{flip, VolumeSample};
use dwinkit_core::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerConfig, RunConfig};
use crate::dataset;
use crate::eval::evaluate;

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.dwck")
}

/// One row of `train_log.csv`. `val_dsc` is empty except at evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub lr: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
    pub params: ParamStore<f32>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn last_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("training always writes a checkpoint")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64, index: u64) -> Pcg64 {
    Pcg64::seed_from_u64(splitmix(splitmix(seed ^ tag).wrapping_add(index)))
}

const TAG_INIT: u64 = 0x1;
const TAG_EPOCH: u64 = 0x2;
const TAG_FLIP: u64 = 0x3;

/// Training-set indices for `step`: consecutive slices of one seeded
/// permutation per epoch.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|b| {
            let global = step * batch as u64 + b;
            let (epoch, pos) = (global / n as u64, (global % n as u64) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream(seed, TAG_EPOCH, epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos]
        })
        .collect()
}

/// Parameters drawn from the training seed.
pub fn init_params(net: &Network, seed: u64) -> Result<ParamStore<f32>> {
    Ok(net.init_params(&mut stream(seed, TAG_INIT, 0))?)
}

struct SampleResult {
    grads: ParamStore<f32>,
    loss: f64,
    dice: f64,
    ce: f64,
}

fn forward_backward(net: &Network, params: &ParamStore<f32>, sample: &VolumeSample) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let x = tape.constant(sample.image.clone());
    let logits = net.forward(&mut tape, &p, x)?;
    let terms = segmentation_loss(&mut tape, logits, &sample.labels)?;
    let scalar = |v| tape.value(v).data()[0] as f64;
    let (loss, dice, ce) = (scalar(terms.total), scalar(terms.dice), scalar(terms.ce));
    tape.backward(terms.total)?;
    Ok(SampleResult {
        grads: p.grads(&tape),
        loss,
        dice,
        ce,
    })
}

/// SGD with momentum and L2 weight decay folded into the gradient
/// (`g ← g + λp`), optionally Nesterov, after an optional global-norm clip.
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<f32>) -> Self {
        Self {
            cfg,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64) {
        let mut scale = 1.0f64;
        if let Some(clip) = self.cfg.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data().iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let (mu, wd, nesterov) = (self.cfg.momentum as f32, self.cfg.weight_decay as f32, self.cfg.nesterov);
        let (lr, scale) = (lr as f32, scale as f32);
        for (((_, p), (_, g)), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.velocity) {
            let pd = p.data_mut();
            for ((pv, &gv), vv) in pd.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let grad = gv * scale + wd * *pv;
                *vv = mu * *vv + grad;
                let update = if nesterov { grad + mu * *vv } else { *vv };
                *pv -= lr * update;
            }
        }
    }
}

fn average_grads(results: &[SampleResult]) -> ParamStore<f32> {
    let inv = 1.0 / results.len() as f32;
    let mut acc = results[0].grads.clone();
    for r in &results[1..] {
        for ((_, a), (_, g)) in acc.iter_mut().zip(r.grads.iter()) {
            for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    for (_, a) in acc.iter_mut() {
        for x in a.data_mut() {
            *x *= inv;
        }
    }
    acc
}

/// Loads the dataset named by `cfg.data.dir` and trains, writing every
/// artefact into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = dataset::load(cfg)?;
    train_on(cfg, &data.train, &data.val, out, |_| {})
}

/// Trains on in-memory samples. `progress` sees every log row as it is written.
pub fn train_on(
    cfg: &RunConfig,
    train: &[VolumeSample],
    val: &[VolumeSample],
    out: &Path,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t0 = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;

    let net = Network::new(&cfg.model)?;
    let tc = &cfg.training;
    let mut params = init_params(&net, tc.seed)?;
    let mut opt = Sgd::new(cfg.optimizer.clone(), &params);
    let mut log = csv::WriterBuilder::new().has_headers(false).from_path(out.join(LOG_FILE))?;
    log.write_record(["step", "loss", "dice_loss", "ce_loss", "lr", "val_dsc"])?;
    log.flush()?;

    let save = |params: &ParamStore<f32>, step: u64| -> Result<PathBuf> {
        let path = out.join(checkpoint_name(step));
        Checkpoint::new(cfg.model.clone(), step, tc.seed, params.clone()).save(&path)?;
        Ok(path)
    };

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    if tc.steps == 0 {
        checkpoints.push(save(&params, 0)?);
    }
    for step in 0..tc.steps {
        let lr = cfg.optimizer.schedule.lr(cfg.optimizer.lr, step, tc.steps);
        let batch: Vec<VolumeSample> = batch_indices(tc.seed, step, tc.batch_size, train.len())
            .into_iter()
            .enumerate()
            .map(|(b, i)| augment(&train[i], cfg.data.augment_flip, tc.seed, step * tc.batch_size as u64 + b as u64))
            .collect();
        let results: Vec<SampleResult> = if cfg.strict_determinism {
            batch.iter().map(|s| forward_backward(&net, &params, s)).collect::<Result<_>>()
        } else {
            batch.par_iter().map(|s| forward_backward(&net, &params, s)).collect::<Result<_>>()
        }
        .with_context(|| format!("training diverged at step {}", step + 1))?;
        let n = results.len() as f64;
        let mean = |f: fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        let (loss, dice, ce) = (mean(|r| r.loss), mean(|r| r.dice), mean(|r| r.ce));
        if !loss.is_finite() {
            bail!("non-finite loss {loss} at step {}", step + 1);
        }
        let grads = average_grads(&results);
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            bail!("non-finite gradient at step {}", step + 1);
        }
        opt.step(&mut params, &grads, lr);

        let done = step + 1;
        let eval_now = done % tc.eval_every == 0 || done == tc.steps;
        let val_dsc = if eval_now && !val.is_empty() {
            Some(evaluate(&net, &params, val, cfg.model.num_classes)?.mean_foreground.dsc)
        } else {
            None
        };
        let row = LogRow {
            step: done,
            loss,
            dice_loss: dice,
            ce_loss: ce,
            lr,
            val_dsc,
        };
        log.serialize(&row)?;
        log.flush()?;
        progress(&row);
        rows.push(row);
        if eval_now {
            checkpoints.push(save(&params, done)?);
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        rows,
        checkpoints,
        params,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn augment(sample: &VolumeSample, mask: [bool; 3], seed: u64, index: u64) -> VolumeSample {
    if !mask.iter().any(|&m| m) {
        return sample.clone();
    }
    let mut rng = stream(seed, TAG_FLIP, index);
    let mut axes = [false; 3];
    for a in 0..3 {
        let coin = rng.random_bool(0.5);
        axes[a] = mask[a] && coin;
    }
    flip(sample, axes)
}

/// Writes `text` to `path` and flushes it.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Parses a `train_log.csv`.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
