//! Procedural labelled volumes and the on-disk volume format.
//!
//! # Random stream
//!
//! Every sample is drawn from `rand_pcg::Pcg64` (PCG XSL RR 128/64) seeded
//! with `Pcg64::seed_from_u64(seed)`. The generator has state multiplier
//! `0x2360_ed05_1fc6_5da4_4385_df64_9fcc_f645` and the stream increment is
//! derived from the seed by `SeedableRng::seed_from_u64`, which expands the
//! `u64` with PCG32 into 32 bytes of state and increment. Sample `i` of a
//! dataset uses seed `data_seed + i` for training samples and
//! `data_seed + 1_000_000 + i` for validation samples.
//!
//! Draw order: the background intensity, then for each foreground class in
//! increasing order the object count, then per object its shape kind,
//! centre, radii and intensity. The object list is then shuffled and
//! painted in order, so later objects overwrite earlier ones. Gaussian noise
//! is drawn last, one value per voxel in H-major order.
//!
//! # File format
//!
//! Little-endian, 32-byte header: magic `DWVL`, version `u32 = 1`, then
//! `H, W, D, C` as `u32`, a dtype byte (1 = `f32` image, 2 = `u16` labels)
//! and seven zero bytes. Raw data follows, H-major and channel-minor. A
//! sample is an `.img` and `.lbl` file sharing a basename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flip_buffer, LabelVolume};
use crate::Tensor;

pub const NOISE_STD: f64 = 0.05;
pub const MIN_EXTENT: usize = 16;
const RADIUS_RANGE: (f64, f64) = (0.15, 0.3);
const CENTRE_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    Box,
}

/// One painted object, in voxel-index coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub class: u16,
    pub kind: ShapeKind,
    pub centre: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl SynthObject {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        let rel = |a: usize| (p[a] as f64 - self.centre[a]) / self.radii[a];
        match self.kind {
            ShapeKind::Ellipsoid => (0..3).map(|a| rel(a) * rel(a)).sum::<f64>() <= 1.0,
            ShapeKind::Box => (0..3).all(|a| rel(a).abs() <= 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[H, W, D, 1]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
    /// Generation seed; `None` for samples read back from disk.
    pub seed: Option<u64>,
    /// Objects in paint order; empty for samples read back from disk.
    pub objects: Vec<SynthObject>,
}

impl VolumeSample {
    pub fn shape(&self) -> [usize; 3] {
        self.labels.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectsPerClass {
    pub min: usize,
    pub max: usize,
}

impl Default for ObjectsPerClass {
    fn default() -> Self {
        Self { min: 1, max: 2 }
    }
}

/// Lower edge of the intensity band of `class`: `[(c + 0.2)/K, (c + 0.8)/K]`.
pub fn intensity_band(class: u16, num_classes: usize) -> (f64, f64) {
    let k = num_classes as f64;
    ((class as f64 + 0.2) / k, (class as f64 + 0.8) / k)
}

pub fn generate(seed: u64, shape: [usize; 3], num_classes: usize, objects: ObjectsPerClass) -> Result<VolumeSample> {
    if num_classes < 2 || num_classes > u16::MAX as usize {
        return Err(Error::invalid("generate", format!("num_classes must be in 2..=65535, got {num_classes}")));
    }
    if shape.iter().any(|&e| e < MIN_EXTENT) {
        return Err(Error::invalid("generate", format!("every extent must be >= {MIN_EXTENT}, got {shape:?}")));
    }
    if objects.min > objects.max {
        return Err(Error::invalid("generate", format!("objects_per_class min {} > max {}", objects.min, objects.max)));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let (lo, hi) = intensity_band(0, num_classes);
    let background = rng.random_range(lo..=hi);

    let mut list = Vec::new();
    for class in 1..num_classes as u16 {
        let count = rng.random_range(objects.min..=objects.max);
        for _ in 0..count {
            let kind = if rng.random_bool(0.5) { ShapeKind::Ellipsoid } else { ShapeKind::Box };
            let mut centre = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                let e = shape[a] as f64;
                centre[a] = rng.random_range(CENTRE_RANGE.0 * e..=CENTRE_RANGE.1 * e);
            }
            for a in 0..3 {
                let e = shape[a] as f64;
                radii[a] = rng.random_range(RADIUS_RANGE.0 * e..=RADIUS_RANGE.1 * e);
            }
            let (lo, hi) = intensity_band(class, num_classes);
            let intensity = rng.random_range(lo..=hi);
            list.push(SynthObject {
                class,
                kind,
                centre,
                radii,
                intensity,
            });
        }
    }
    list.shuffle(&mut rng);

    let [h, w, d] = shape;
    let n = h * w * d;
    let mut labels = vec![0u16; n];
    let mut clean = vec![background; n];
    for obj in &list {
        for i in 0..h {
            for j in 0..w {
                for l in 0..d {
                    if obj.contains([i, j, l]) {
                        let v = (i * w + j) * d + l;
                        labels[v] = obj.class;
                        clean[v] = obj.intensity;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let image: Vec<f32> = clean
        .iter()
        .map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(VolumeSample {
        image: Tensor::new(vec![h, w, d, 1], image)?,
        labels: LabelVolume::new(shape, labels)?,
        seed: Some(seed),
        objects: list,
    })
}

/// Mirrors image and labels along the axes set in `axes`.
pub fn flip(sample: &VolumeSample, axes: [bool; 3]) -> VolumeSample {
    let shape = sample.shape();
    let c = sample.image.shape()[3];
    let image = flip_buffer(sample.image.data(), shape, c, axes);
    VolumeSample {
        image: Tensor::new(sample.image.shape().to_vec(), image).expect("same shape"),
        labels: sample.labels.flipped(axes),
        seed: sample.seed,
        objects: Vec::new(),
    }
}

/// Flips each axis selected by `mask` with probability 1/2, decided by `seed`.
/// Returns the flipped sample and the axes actually mirrored.
pub fn augment_flip(sample: &VolumeSample, mask: [bool; 3], seed: u64) -> (VolumeSample, [bool; 3]) {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut axes = [false; 3];
    for a in 0..3 {
        let coin = rng.random_bool(0.5);
        axes[a] = mask[a] && coin;
    }
    (flip(sample, axes), axes)
}

const MAGIC: &[u8; 4] = b"DWVL";
const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U16: u8 = 2;

fn header(dims: [usize; 4], dtype: u8) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format {
            offset: 8,
            msg: format!("extent {d} does not fit in u32"),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype);
    out.extend_from_slice(&[0u8; 7]);
    Ok(out)
}

pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::invalid("write_volume", format!("image must be (H,W,D,C), got {s:?}")));
    }
    let mut out = header([s[0], s[1], s[2], s[3]], DTYPE_F32)?;
    out.reserve(image.len() * 4);
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &LabelVolume) -> Result<Vec<u8>> {
    let [h, w, d] = labels.shape();
    let mut out = header([h, w, d, 1], DTYPE_U16)?;
    out.reserve(labels.len() * 2);
    for v in labels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Parses a header and returns `(dims, dtype, payload)`.
fn decode_header(bytes: &[u8]) -> Result<([usize; 4], u8, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected \"DWVL\"", &bytes[0..4]),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32_at(bytes, 8 + 4 * i) as usize;
        if *d == 0 {
            return Err(Error::Format {
                offset: 8 + 4 * i as u64,
                msg: "zero extent".into(),
            });
        }
    }
    let dtype = bytes[24];
    if let Some(i) = bytes[25..32].iter().position(|&b| b != 0) {
        return Err(Error::Format {
            offset: 25 + i as u64,
            msg: "reserved header bytes must be zero".into(),
        });
    }
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U16 => 2,
        other => {
            return Err(Error::Format {
                offset: 24,
                msg: format!("unknown dtype code {other}"),
            })
        }
    };
    let expected = dims
        .iter()
        .try_fold(width as u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&n| n <= usize::MAX as u64)
        .ok_or_else(|| Error::Format {
            offset: 8,
            msg: format!("dims {dims:?} overflow the addressable size"),
        })?;
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u64) < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated data: {} of {expected} bytes", payload.len()),
        });
    }
    if payload.len() as u64 > expected {
        return Err(Error::Format {
            offset: HEADER_LEN as u64 + expected,
            msg: "trailing bytes after data".into(),
        });
    }
    Ok((dims, dtype, payload))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, dtype, payload) = decode_header(bytes)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: 24,
            msg: format!("expected f32 image (dtype 1), found dtype {dtype}"),
        });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelVolume> {
    let (dims, dtype, payload) = decode_header(bytes)?;
    if dtype != DTYPE_U16 {
        return Err(Error::Format {
            offset: 24,
            msg: format!("expected u16 labels (dtype 2), found dtype {dtype}"),
        });
    }
    if dims[3] != 1 {
        return Err(Error::Format {
            offset: 20,
            msg: format!("label volumes have one channel, found {}", dims[3]),
        });
    }
    let data = payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
    LabelVolume::new([dims[0], dims[1], dims[2]], data)
}

pub fn image_path(base: &Path) -> PathBuf {
    base.with_extension("img")
}

pub fn label_path(base: &Path) -> PathBuf {
    base.with_extension("lbl")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes `<base>.img` and `<base>.lbl`.
pub fn write_volume(base: &Path, sample: &VolumeSample) -> Result<()> {
    if sample.image.shape()[..3] != sample.labels.shape() {
        return Err(Error::shape("write_volume", sample.image.shape(), &sample.labels.shape()));
    }
    write_file(&image_path(base), &encode_image(&sample.image)?)?;
    write_file(&label_path(base), &encode_labels(&sample.labels)?)
}

pub fn read_volume(base: &Path) -> Result<VolumeSample> {
    let image = decode_image(&fs::read(image_path(base))?)?;
    let labels = decode_labels(&fs::read(label_path(base))?)?;
    if image.shape()[..3] != labels.shape() {
        return Err(Error::shape("read_volume", image.shape(), &labels.shape()));
    }
    Ok(VolumeSample {
        image,
        labels,
        seed: None,
        objects: Vec::new(),
    })
}

/// Dataset index written next to the volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub objects_per_class: ObjectsPerClass,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Basename relative to the dataset directory.
    pub name: String,
    pub seed: u64,
    pub image: String,
    pub labels: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_split(&self, dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<VolumeSample>> {
        entries
            .iter()
            .map(|e| {
                let mut s = read_volume(&dir.join(&e.name))?;
                if s.shape() != self.shape {
                    return Err(Error::Config(format!(
                        "{} has shape {:?}, manifest says {:?}",
                        e.name,
                        s.shape(),
                        self.shape
                    )));
                }
                s.labels.check_classes(self.num_classes)?;
                s.seed = Some(e.seed);
                Ok(s)
            })
            .collect()
    }
}

/// Generates and writes a full train/val dataset, returning its manifest.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    n_train: usize,
    n_val: usize,
    shape: [usize; 3],
    num_classes: usize,
    objects: ObjectsPerClass,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let split = |prefix: &str, n: usize, offset: u64| -> Result<Vec<ManifestEntry>> {
        (0..n)
            .map(|i| {
                let s = seed.wrapping_add(offset).wrapping_add(i as u64);
                let sample = generate(s, shape, num_classes, objects)?;
                let name = format!("{prefix}_{i:04}");
                write_volume(&dir.join(&name), &sample)?;
                Ok(ManifestEntry {
                    image: format!("{name}.img"),
                    labels: format!("{name}.lbl"),
                    name,
                    seed: s,
                })
            })
            .collect()
    };
    let train = split("train", n_train, 0)?;
    let val = split("val", n_val, VAL_SEED_OFFSET)?;
    let manifest = Manifest {
        num_classes,
        shape,
        objects_per_class: objects,
        train,
        val,
    };
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}
