#![allow(dead_code)]

use dwinkit_core::nn::{ParamSpec, ParamStore};
use dwinkit_core::volume::LabelVolume;
use dwinkit_core::windowing::Direction;
use dwinkit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

pub fn store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    ParamStore::from_specs(specs, &mut rng(seed)).unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Row-major `[rows, cin] · [cin, cout]`.
pub fn matmul(x: &[f64], w: &[f64], rows: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for j in 0..cout {
            let mut s = 0.0;
            for i in 0..cin {
                s += x[r * cin + i] * w[i * cout + j];
            }
            out[r * cout + j] = s;
        }
    }
    out
}

pub fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Plain multi-head softmax attention over `n` tokens of width `c`.
pub fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize, heads: usize) -> Vec<f64> {
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..hd).map(|d| q[i * c + h * hd + d] * k[j * c + h * hd + d]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..hd {
                out[i * c + h * hd + d] = (0..n).map(|j| e[j] / z * v[j * c + h * hd + d]).sum();
            }
        }
    }
    out
}

fn coords(idx: usize, shape: [usize; 3]) -> [usize; 3] {
    [idx / (shape[1] * shape[2]), (idx / shape[2]) % shape[1], idx % shape[2]]
}

fn tiled(dir: Direction) -> [usize; 2] {
    match dir {
        Direction::Horizontal => [1, 2],
        Direction::Vertical => [0, 2],
        Direction::Depthwise => [0, 1],
    }
}

/// Voxels sharing a directional window with `voxel` (divisible shapes only).
pub fn window_members(dir: Direction, win: [usize; 3], shape: [usize; 3], voxel: usize) -> Vec<usize> {
    let p = coords(voxel, shape);
    let n = shape.iter().product();
    (0..n)
        .filter(|&u| {
            let c = coords(u, shape);
            tiled(dir).iter().all(|&a| c[a] / win[a].min(shape[a]) == p[a] / win[a].min(shape[a]))
        })
        .collect()
}

/// Directional window attention on projected q/k/v volumes `[n, c]`, by
/// enumerating each voxel's window members.
pub fn naive_directional(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    shape: [usize; 3],
    c: usize,
    heads: usize,
    dir: Direction,
    win: [usize; 3],
) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let members = window_members(dir, win, shape, i);
        let pos = members.iter().position(|&u| u == i).unwrap();
        let pick = |x: &[f64]| members.iter().flat_map(|&u| x[u * c..(u + 1) * c].to_vec()).collect::<Vec<_>>();
        let r = naive_attention(&pick(q), &pick(k), &pick(v), members.len(), c, heads);
        out[i * c..(i + 1) * c].copy_from_slice(&r[pos * c..(pos + 1) * c]);
    }
    out
}

/// Mean over each voxel's directional window.
pub fn window_mean(x: &[f64], shape: [usize; 3], c: usize, dir: Direction, win: [usize; 3]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let members = window_members(dir, win, shape, i);
        for ch in 0..c {
            out[i * c + ch] = members.iter().map(|&u| x[u * c + ch]).sum::<f64>() / members.len() as f64;
        }
    }
    out
}

/// Channel slice `[lo, hi)` of a `[n, c]` buffer.
pub fn channels(x: &[f64], c: usize, lo: usize, hi: usize) -> Vec<f64> {
    x.chunks(c).flat_map(|r| r[lo..hi].to_vec()).collect()
}

pub fn concat(parts: &[Vec<f64>], widths: &[usize]) -> Vec<f64> {
    let n = parts[0].len() / widths[0];
    let mut out = Vec::new();
    for r in 0..n {
        for (p, &w) in parts.iter().zip(widths) {
            out.extend_from_slice(&p[r * w..(r + 1) * w]);
        }
    }
    out
}

pub fn layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gamma[i] + beta[i]);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// All-pairs surface distances, written independently of the library.
pub fn hd95_oracle(p: &LabelVolume, g: &LabelVolume, c: u16) -> Option<f64> {
    let [h, w, d] = p.shape();
    let surf = |v: &LabelVolume| -> Vec<[i64; 3]> {
        let inside = |i: i64, j: i64, l: i64| {
            i >= 0 && j >= 0 && l >= 0 && i < h as i64 && j < w as i64 && l < d as i64 && v.get(i as usize, j as usize, l as usize) == c
        };
        let mut out = Vec::new();
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                for l in 0..d as i64 {
                    if !inside(i, j, l) {
                        continue;
                    }
                    let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                    if n6.iter().any(|&(a, b, e)| !inside(i + a, j + b, l + e)) {
                        out.push([i, j, l]);
                    }
                }
            }
        }
        out
    };
    let (sp, sg) = (surf(p), surf(g));
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let nearest = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|a| {
                let m = to.iter().map(|b| (0..3).map(|k| (a[k] - b[k]).pow(2)).sum::<i64>()).min().unwrap();
                (m as f64).sqrt()
            })
            .collect()
    };
    let mut all = nearest(&sp, &sg);
    all.extend(nearest(&sg, &sp));
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(all[lo] + (all[hi] - all[lo]) * (pos - lo as f64))
}

/// Random binary mask, sometimes with a solid box so it has an interior.
pub fn blob_masks(shape: [usize; 3], seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let density: f64 = r.random_range(0.05..0.6);
    let mut data: Vec<u16> = (0..n).map(|_| r.random_bool(density) as u16).collect();
    if r.random_bool(0.5) {
        let v = LabelVolume::new(shape, data.clone()).unwrap();
        let lo = [r.random_range(0..shape[0]), r.random_range(0..shape[1]), r.random_range(0..shape[2])];
        for i in lo[0]..shape[0].min(lo[0] + 5) {
            for j in lo[1]..shape[1].min(lo[1] + 5) {
                for l in lo[2]..shape[2].min(lo[2] + 5) {
                    data[v.index(i, j, l)] = 1;
                }
            }
        }
    }
    LabelVolume::new(shape, data).unwrap()
}

