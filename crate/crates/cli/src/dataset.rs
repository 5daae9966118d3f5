//! Dataset generation and loading against a run configuration.

use std::path::Path;

use anyhow::{Context, Result};
use dwinkit_core::synth::{write_dataset, Manifest, VolumeSample, MANIFEST_FILE};

use crate::config::{ConfigError, RunConfig};

pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<VolumeSample>,
    pub val: Vec<VolumeSample>,
}

/// Writes the train and validation volumes described by `cfg.data` into `dir`.
pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    let d = &cfg.data;
    write_dataset(dir, d.seed, d.n_train, d.n_val, d.shape, d.num_classes, d.objects_per_class)
        .with_context(|| format!("cannot write dataset to {}", dir.display()))
}

/// Errors unless the manifest describes volumes the configured model accepts.
pub fn check_manifest(cfg: &RunConfig, m: &Manifest) -> std::result::Result<(), ConfigError> {
    if m.shape != cfg.model.input_shape {
        return Err(ConfigError(format!(
            "dataset volumes are {:?}, model.input_shape is {:?}",
            m.shape, cfg.model.input_shape
        )));
    }
    if m.num_classes != cfg.model.num_classes {
        return Err(ConfigError(format!(
            "dataset has {} classes, model.num_classes is {}",
            m.num_classes, cfg.model.num_classes
        )));
    }
    Ok(())
}

pub fn load_dir(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(ConfigError(format!("no dataset at {} (run `dwinkit gen` first)", dir.display())).into());
    }
    let manifest = Manifest::load(dir).with_context(|| format!("cannot read manifest in {}", dir.display()))?;
    check_manifest(cfg, &manifest)?;
    let train = manifest.load_split(dir, &manifest.train)?;
    let val = manifest.load_split(dir, &manifest.val)?;
    Ok(Dataset { manifest, train, val })
}

pub fn load(cfg: &RunConfig) -> Result<Dataset> {
    load_dir(cfg, &cfg.data.dir)
}
