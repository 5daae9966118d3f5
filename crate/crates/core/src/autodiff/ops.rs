//! Forward rules for every primitive.

use std::sync::Arc;

use rayon::prelude::*;

use super::region::copy_region;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{numel, Scalar, Tensor};

/// Marks rows of a [`Tape::gather_rows`] index that produce zeros.
pub const PAD_ROW: u32 = u32::MAX;

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, kind: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(op, value, kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let value = self.value(a).map(|x| x * s);
        self.push("scale", value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let value = self.value(a).map(|x| x + s);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    /// Batched matrix product `[..., M, K] × [..., K, N]` with broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            batch.push(x.max(y));
        }
        let nb = numel(&batch);
        let (mut a_offsets, mut b_offsets) = (Vec::with_capacity(nb), Vec::with_capacity(nb));
        let (sta, stb) = (crate::tensor::strides_of(&pa), crate::tensor::strides_of(&pb));
        for flat in 0..nb {
            let (mut rem, mut oa, mut ob) = (flat, 0, 0);
            for axis in (0..rank).rev() {
                let i = rem % batch[axis];
                rem /= batch[axis];
                if pa[axis] != 1 {
                    oa += i * sta[axis];
                }
                if pb[axis] != 1 {
                    ob += i * stb[axis];
                }
            }
            a_offsets.push(oa * m * k);
            b_offsets.push(ob * k * n);
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); nb * m * n];
        for (i, c) in out.chunks_exact_mut(m * n).enumerate() {
            kernels::gemm_nn(
                &va[a_offsets[i]..a_offsets[i] + m * k],
                &vb[b_offsets[i]..b_offsets[i] + k * n],
                c,
                m,
                k,
                n,
                false,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Tensor::from_parts(shape, out);
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                a_offsets,
                b_offsets,
            },
        )
    }

    /// Affine map over the last axis: `x · w + b` with `w: [Cin, Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let cin = *sx.last().expect("tensors have rank >= 1");
        if sw.len() != 2 || sw[0] != cin {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let cout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear", &sw, self.shape(b)));
            }
        }
        let rows = numel(&sx) / cin;
        let mut out = vec![T::zero(); rows * cout];
        kernels::gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, cin, cout, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                kernels::add_into(bias, row);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        self.push("linear", Tensor::from_parts(shape, out), Op::Linear { x, w, b })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let mut out = v.to_vec();
        out.chunks_exact_mut(n).for_each(softmax_row);
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("softmax_lastdim", value, Op::Softmax(x))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let mut out = v.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&r| (r - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|r| *r -= lse);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("log_softmax_lastdim", value, Op::LogSoftmax(x))
    }

    /// Normalization over the last axis followed by a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_usize(c);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let rows = xs.len() / c;
        let mut out = vec![T::zero(); xs.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        for (r, (xr, yr)) in xs.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            let mu = kernels::sum(xr) * inv_c;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            for (((y, &xv), &gv), &bv) in yr.iter_mut().zip(xr).zip(g).zip(b) {
                *y = (xv - mu) * rs * gv + bv;
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        let value = Tensor::from_parts(sx, out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        let value = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).fast_tanh()));
        self.push("gelu", value, Op::Gelu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_lastdim", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_lastdim", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = vec![T::zero(); rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat_lastdim", Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()))
    }

    /// Hyper-rectangular sub-block `[start, start + len)` on every axis.
    pub fn crop(&mut self, x: Var, start: &[usize], len: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if start.len() != sx.len()
            || len.len() != sx.len()
            || start.iter().zip(len).zip(&sx).any(|((&s, &l), &e)| l == 0 || s + l > e)
        {
            return Err(Error::shape("crop", &sx, len));
        }
        let mut out = vec![T::zero(); numel(len)];
        let zeros = vec![0; sx.len()];
        copy_region(self.value(x).data(), &sx, start, &mut out, len, &zeros, len, false);
        self.push(
            "crop",
            Tensor::from_parts(len.to_vec(), out),
            Op::Crop {
                x,
                start: start.to_vec(),
            },
        )
    }

    /// `[start, start + len)` along a single axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::invalid("slice", format!("axis {axis} out of range for {sx:?}")));
        }
        let mut starts = vec![0; sx.len()];
        let mut lens = sx.clone();
        starts[axis] = start;
        lens[axis] = len;
        self.crop(x, &starts, &lens)
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split_lastdim(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let sx = self.shape(x).to_vec();
        let last = sx.len() - 1;
        if widths.iter().sum::<usize>() != sx[last] {
            return Err(Error::shape("split_lastdim", &sx, widths));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice(x, last, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Zero padding with `before[i]` / `after[i]` elements on axis `i`.
    pub fn pad(&mut self, x: Var, before: &[usize], after: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if before.len() != sx.len() || after.len() != sx.len() {
            return Err(Error::shape("pad", &sx, before));
        }
        let shape: Vec<usize> = sx.iter().zip(before).zip(after).map(|((s, b), a)| s + b + a).collect();
        let mut out = vec![T::zero(); numel(&shape)];
        let zeros = vec![0; sx.len()];
        copy_region(self.value(x).data(), &sx, &zeros, &mut out, &shape, before, &sx, false);
        self.push(
            "pad",
            Tensor::from_parts(shape, out),
            Op::Pad {
                x,
                before: before.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / T::from_usize(v.len());
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums over every axis except the last: `[..., C] -> [C]`.
    pub fn sum_leading(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape().last().unwrap();
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks_exact(c) {
            kernels::add_into(row, &mut out);
        }
        self.push("sum_leading", Tensor::from_parts(vec![c], out), Op::SumLeading(x))
    }

    /// Nearest-neighbour ×2 upsampling of the spatial axes of `[H, W, D, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("upsample2x", format!("expected (H,W,D,C), got {s:?}")));
        }
        let (h, w, d, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); 8 * src.len()];
        let (w2, d2) = (2 * w, 2 * d);
        for (oh, plane) in out.chunks_exact_mut(w2 * d2 * c).enumerate() {
            for ow in 0..w2 {
                for od in 0..d2 {
                    let si = (((oh / 2) * w + ow / 2) * d + od / 2) * c;
                    let oi = (ow * d2 + od) * c;
                    plane[oi..oi + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let value = Tensor::from_parts(vec![2 * h, w2, d2, c], out);
        self.push("upsample2x", value, Op::Upsample2x(x))
    }

    /// Same-padded per-channel 3D convolution, `x: [H,W,D,C]`, `kernel: [k,k,k,C]`, odd `k`.
    pub fn depthwise_conv3d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let g = self.conv_geom(x, kernel)?;
        let out = kernels::depthwise_conv3d(self.value(x).data(), self.value(kernel).data(), g);
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push("depthwise_conv3d", value, Op::DepthwiseConv3d { x, kernel })
    }

    pub(crate) fn conv_geom(&self, x: Var, kernel: Var) -> Result<ConvGeom> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 || sk[3] != sx[3] || sk[0] != sk[1] || sk[1] != sk[2] {
            return Err(Error::shape("depthwise_conv3d", sx, sk));
        }
        if sk[0] % 2 == 0 {
            return Err(Error::invalid("depthwise_conv3d", format!("kernel extent {} must be odd", sk[0])));
        }
        Ok(ConvGeom {
            h: sx[0],
            w: sx[1],
            d: sx[2],
            c: sx[3],
            k: sk[0],
        })
    }

    /// Row gather over the last axis: `out[r] = x[index[r]]`, or zeros for [`PAD_ROW`].
    /// `x` is viewed as `[rows, C]`; the result is reshaped to `out_shape`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        let rows = numel(&sx) / c;
        if numel(out_shape) != index.len() * c || *out_shape.last().unwrap_or(&0) != c {
            return Err(Error::shape("gather_rows", &sx, out_shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != PAD_ROW && i as usize >= rows) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * c];
        for (dst, &i) in out.chunks_exact_mut(c).zip(index.iter()) {
            if i != PAD_ROW {
                let i = i as usize;
                dst.copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_parts(out_shape.to_vec(), out);
        self.push("gather_rows", value, Op::GatherRows { x, index })
    }

    /// Fused multi-head scaled dot-product attention over independent groups.
    ///
    /// `q`, `k`, `v`: `[B, T, C]` with the channel axis split into `heads`
    /// contiguous sub-ranges. For every group `b` and head `h`:
    /// `softmax(q kᵀ / sqrt(C / heads)) v`, heads merged back in place.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("attention", format!("expected [B,T,C], got {s:?}")));
        }
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (b, t, c) = (s[0], s[1], s[2]);
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid("attention", format!("{c} channels not divisible by {heads} heads")));
        }
        let hd = c / heads;
        let scale = T::one() / T::from_usize(hd).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); b * t * c];
        let mut probs = vec![T::zero(); b * heads * t * t];
        out.par_chunks_mut(t * c)
            .zip(probs.par_chunks_mut(heads * t * t))
            .enumerate()
            .for_each(|(bi, (o, p))| {
                let base = bi * t * c;
                let (qb, kb, vb) = (&qd[base..base + t * c], &kd[base..base + t * c], &vd[base..base + t * c]);
                let mut kt = vec![T::zero(); hd * t];
                let mut vt = vec![T::zero(); hd * t];
                for h in 0..heads {
                    transpose_head(kb, &mut kt, t, c, h * hd, hd);
                    transpose_head(vb, &mut vt, t, c, h * hd, hd);
                    let ph = &mut p[h * t * t..(h + 1) * t * t];
                    for (i, row) in ph.chunks_exact_mut(t).enumerate() {
                        let qi = &qb[i * c + h * hd..i * c + (h + 1) * hd];
                        let max = kernels::scores_row(qi, &kt, t, scale, row);
                        softmax_shifted(row, max);
                        for dd in 0..hd {
                            o[i * c + h * hd + dd] = kernels::dot(row, &vt[dd * t..(dd + 1) * t]);
                        }
                    }
                }
            });
        let value = Tensor::from_parts(s, out);
        self.push("attention", value, Op::Attention { q, k, v, heads, probs })
    }
}

/// Copies channels `[off, off + hd)` of a `[t, c]` block into `dst: [hd, t]`.
#[inline]
pub(crate) fn transpose_head<T: Scalar>(src: &[T], dst: &mut [T], t: usize, c: usize, off: usize, hd: usize) {
    for i in 0..t {
        for dd in 0..hd {
            dst[dd * t + i] = src[i * c + off + dd];
        }
    }
}

#[inline]
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = kernels::max(row);
    softmax_shifted(row, max);
}

/// Softmax of a row whose maximum is already known.
#[inline]
fn softmax_shifted<T: Scalar>(row: &mut [T], max: T) {
    for r in row.iter_mut() {
        *r -= max;
    }
    T::exp_slice(row);
    let inv = T::one() / kernels::sum(row);
    row.iter_mut().for_each(|r| *r *= inv);
}
