//! Overlap and surface-distance metrics on label volumes.
//!
//! Surfaces are the mask voxels with at least one 6-neighbour outside the
//! mask; positions beyond the volume border count as outside. HD95 pools the
//! nearest-surface distances from both directions and takes the 95th
//! percentile with linear interpolation between order statistics.

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

fn check_shapes(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("metric", &pred.shape(), &gt.shape()));
    }
    Ok(())
}

fn counts(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> (usize, usize, usize) {
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    (p, g, both)
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both are empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g, both) = counts(pred, gt, class);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`, 1 when both are empty.
pub fn jaccard(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g, both) = counts(pred, gt, class);
    let union = p + g - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

/// Surface voxels of a boolean mask over `shape`.
pub fn surface(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [h, w, d] = shape;
    let idx = |i: usize, j: usize, l: usize| (i * w + j) * d + l;
    let mut out = vec![false; mask.len()];
    for i in 0..h {
        for j in 0..w {
            for l in 0..d {
                let v = idx(i, j, l);
                if !mask[v] {
                    continue;
                }
                out[v] = i == 0
                    || i + 1 == h
                    || j == 0
                    || j + 1 == w
                    || l == 0
                    || l + 1 == d
                    || !mask[idx(i - 1, j, l)]
                    || !mask[idx(i + 1, j, l)]
                    || !mask[idx(i, j - 1, l)]
                    || !mask[idx(i, j + 1, l)]
                    || !mask[idx(i, j, l - 1)]
                    || !mask[idx(i, j, l + 1)];
            }
        }
    }
    out
}

const FAR: f64 = 1e30;

/// 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let intersect = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *o = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true` voxel.
pub fn squared_distance_transform(seeds: &[bool], shape: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = shape;
    let mut g: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let longest = h.max(w).max(d);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [w * d, d, 1];
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        for start in 0..g.len() {
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            for q in 0..n {
                f[q] = g[start + q * stride];
            }
            edt_1d(&f[..n], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
            for q in 0..n {
                g[start + q * stride] = out[q];
            }
        }
    }
    g
}

/// Linear-interpolation percentile of unsorted values, `q ∈ [0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Directed and reverse surface distances pooled, 95th percentile.
/// `None` when either mask is empty.
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let shape = pred.shape();
    let (pm, gm) = (pred.mask(class), gt.mask(class));
    if !pm.iter().any(|&b| b) || !gm.iter().any(|&b| b) {
        return Ok(None);
    }
    let (ps, gs) = (surface(&pm, shape), surface(&gm, shape));
    let to_g = squared_distance_transform(&gs, shape);
    let to_p = squared_distance_transform(&ps, shape);
    let mut pooled: Vec<f64> = ps
        .iter()
        .zip(&to_g)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d.sqrt())
        .chain(gs.iter().zip(&to_p).filter(|(&s, _)| s).map(|(_, &d)| d.sqrt()))
        .collect();
    Ok(Some(percentile(&mut pooled, 95.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    /// `None` (JSON `null`) when the class is absent from either volume.
    pub hd95: Option<f64>,
    pub jaccard: f64,
}

/// Per-class metrics for classes `0..K` and foreground (`1..K`) means.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_foreground: ClassMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl SegMetricsReport {
    pub fn compute(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<Self> {
        let classes = (0..num_classes as u16)
            .map(|c| {
                Ok(ClassMetrics {
                    dsc: dsc(pred, gt, c)?,
                    hd95: hd95(pred, gt, c)?,
                    jaccard: jaccard(pred, gt, c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_classes(classes))
    }

    /// Averages per-class entries over several samples, then recomputes the means.
    /// A class's hd95 mean skips samples where it is undefined.
    pub fn average(reports: &[SegMetricsReport]) -> Option<Self> {
        let k = reports.first()?.classes.len();
        let classes = (0..k)
            .map(|c| ClassMetrics {
                dsc: mean(reports.iter().map(|r| r.classes[c].dsc)).unwrap(),
                hd95: mean(reports.iter().filter_map(|r| r.classes[c].hd95)),
                jaccard: mean(reports.iter().map(|r| r.classes[c].jaccard)).unwrap(),
            })
            .collect();
        Some(Self::from_classes(classes))
    }

    pub fn from_classes(classes: Vec<ClassMetrics>) -> Self {
        let fg = classes.get(1..).unwrap_or(&[]);
        let mean_foreground = ClassMetrics {
            dsc: mean(fg.iter().map(|m| m.dsc)).unwrap_or(f64::NAN),
            hd95: mean(fg.iter().filter_map(|m| m.hd95)),
            jaccard: mean(fg.iter().map(|m| m.jaccard)).unwrap_or(f64::NAN),
        };
        Self { classes, mean_foreground }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::invalid("metrics_report", "top level must be an object"))?;
        let mean_foreground: ClassMetrics = serde_json::from_value(
            obj.get("mean_foreground")
                .cloned()
                .ok_or_else(|| Error::invalid("metrics_report", "missing mean_foreground"))?,
        )?;
        let mut classes = Vec::new();
        for c in 0.. {
            match obj.get(&c.to_string()) {
                Some(v) => classes.push(serde_json::from_value(v.clone())?),
                None => break,
            }
        }
        if classes.len() + 1 != obj.len() {
            return Err(Error::invalid("metrics_report", "class ids must be contiguous from 0"));
        }
        Ok(Self { classes, mean_foreground })
    }
}

impl Serialize for SegMetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.classes.len() + 1))?;
        for (c, m) in self.classes.iter().enumerate() {
            map.serialize_entry(&c.to_string(), m)?;
        }
        map.serialize_entry("mean_foreground", &self.mean_foreground)?;
        map.end()
    }
}
