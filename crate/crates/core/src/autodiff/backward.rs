//! Vector-Jacobian products for every primitive.

use rayon::prelude::*;

use super::ops::{transpose_head, GELU_A, GELU_C, PAD_ROW};
use super::region::copy_region;
use super::{Op, Tape, Var};
use crate::tensor::kernels;
use crate::tensor::{numel, Scalar};

type Contribs<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Tape<T> {
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data_of(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub(super) fn grad_rule(&self, i: usize, g: &[T]) -> Contribs<T> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.data_of(*a), self.data_of(*b));
                let mut out = Vec::new();
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&gv, &bv)| gv * bv).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(va).map(|(&gv, &av)| gv * av).collect()));
                }
                out
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.data_of(*a), self.data_of(*b));
                let mut out = Vec::new();
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&gv, &bv)| gv / bv).collect()));
                }
                if self.needs(*b) {
                    let gb = g
                        .iter()
                        .zip(va)
                        .zip(vb)
                        .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                        .collect();
                    out.push((*b, gb));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&v| v * *s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                a_offsets,
                b_offsets,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.data_of(*a), self.data_of(*b));
                let mut out = Vec::new();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for (bi, gc) in g.chunks_exact(m * n).enumerate() {
                        let (oa, ob) = (a_offsets[bi], b_offsets[bi]);
                        kernels::gemm_nt(gc, &vb[ob..ob + k * n], &mut ga[oa..oa + m * k], m, n, k, true);
                    }
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for (bi, gc) in g.chunks_exact(m * n).enumerate() {
                        let (oa, ob) = (a_offsets[bi], b_offsets[bi]);
                        kernels::gemm_tn(&va[oa..oa + m * k], gc, &mut gb[ob..ob + k * n], k, m, n, true);
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let vw = self.data_of(*w);
                let sw = self.nodes[w.0].value.shape();
                let (cin, cout) = (sw[0], sw[1]);
                let rows = g.len() / cout;
                let mut out = Vec::new();
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    kernels::gemm_nt(g, vw, &mut gx, rows, cout, cin, false);
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    kernels::gemm_tn(self.data_of(*x), g, &mut gw, cin, rows, cout, false);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); cout];
                        for row in g.chunks_exact(cout) {
                            kernels::add_into(row, &mut gb);
                        }
                        out.push((*b, gb));
                    }
                }
                out
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let d = kernels::dot(gr, yr);
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - d);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let total = kernels::sum(gr);
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let c = *node.value.shape().last().unwrap();
                let xs = self.data_of(*x);
                let gam = self.data_of(*gamma);
                let inv_c = T::one() / T::from_usize(c);
                let mut gx = vec![T::zero(); xs.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, ((xr, gr), out)) in xs
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gam[j];
                    }
                    let m1 = kernels::sum(&dxhat) * inv_c;
                    let m2 = kernels::dot(&dxhat, &xhat) * inv_c;
                    for j in 0..c {
                        out[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                    kernels::fma_into(gr, &xhat, &mut gg);
                    kernels::add_into(gr, &mut gbeta);
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Gelu(x) => {
                let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let gx = g
                    .iter()
                    .zip(self.data_of(*x))
                    .map(|(&gv, &v)| {
                        let t = (c * (v + a * v * v * v)).fast_tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        gv * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let inv = kernels::invert_perm(perm);
                vec![(*x, kernels::permute(g, node.value.shape(), &inv))]
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut col = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = *self.nodes[p.0].value.shape().last().unwrap();
                    if self.needs(p) {
                        let mut gp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        out.push((p, gp));
                    }
                    col += w;
                }
                out
            }
            Op::Crop { x, start } => {
                let sx = self.nodes[x.0].value.shape();
                let mut gx = vec![T::zero(); numel(sx)];
                let zeros = vec![0; sx.len()];
                let sy = node.value.shape();
                copy_region(g, sy, &zeros, &mut gx, sx, start, sy, true);
                vec![(*x, gx)]
            }
            Op::Pad { x, before } => {
                let sx = self.nodes[x.0].value.shape();
                let mut gx = vec![T::zero(); numel(sx)];
                let zeros = vec![0; sx.len()];
                copy_region(g, node.value.shape(), before, &mut gx, sx, &zeros, sx, false);
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.data_of(*x).len()])],
            Op::Mean(x) => {
                let n = self.data_of(*x).len();
                vec![(*x, vec![g[0] / T::from_usize(n); n])]
            }
            Op::SumLeading(x) => {
                let n = self.data_of(*x).len();
                let c = g.len();
                let mut gx = Vec::with_capacity(n);
                for _ in 0..n / c {
                    gx.extend_from_slice(g);
                }
                vec![(*x, gx)]
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                let (w, d, c) = (s[1], s[2], s[3]);
                let (w2, d2) = (2 * w, 2 * d);
                let mut gx = vec![T::zero(); numel(s)];
                for (oh, plane) in g.chunks_exact(w2 * d2 * c).enumerate() {
                    for ow in 0..w2 {
                        for od in 0..d2 {
                            let si = (((oh / 2) * w + ow / 2) * d + od / 2) * c;
                            let oi = (ow * d2 + od) * c;
                            kernels::add_into(&plane[oi..oi + c], &mut gx[si..si + c]);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::DepthwiseConv3d { x, kernel } => {
                let geom = self.conv_geom(*x, *kernel).expect("validated in forward");
                let mut out = Vec::new();
                if self.needs(*x) {
                    out.push((*x, kernels::depthwise_conv3d_grad_input(g, self.data_of(*kernel), geom)));
                }
                if self.needs(*kernel) {
                    out.push((*kernel, kernels::depthwise_conv3d_grad_kernel(self.data_of(*x), g, geom)));
                }
                out
            }
            Op::GatherRows { x, index } => {
                let c = *node.value.shape().last().unwrap();
                let mut gx = vec![T::zero(); self.data_of(*x).len()];
                for (gr, &i) in g.chunks_exact(c).zip(index.iter()) {
                    if i != PAD_ROW {
                        let i = i as usize;
                        kernels::add_into(gr, &mut gx[i * c..(i + 1) * c]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_vjp(node.value.shape(), *q, *k, *v, *heads, probs, g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(&self, shape: &[usize], q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T]) -> Contribs<T> {
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        let hd = c / heads;
        let scale = T::one() / T::from_usize(hd).sqrt();
        let (qd, kd, vd) = (self.data_of(q), self.data_of(k), self.data_of(v));
        let mut gq = vec![T::zero(); b * t * c];
        let mut gk = vec![T::zero(); b * t * c];
        let mut gv = vec![T::zero(); b * t * c];
        gq.par_chunks_mut(t * c)
            .zip(gk.par_chunks_mut(t * c))
            .zip(gv.par_chunks_mut(t * c))
            .enumerate()
            .for_each(|(bi, ((gqb, gkb), gvb))| {
                let base = bi * t * c;
                let (qb, kb, vb) = (&qd[base..base + t * c], &kd[base..base + t * c], &vd[base..base + t * c]);
                let gb = &g[base..base + t * c];
                let mut kt = vec![T::zero(); hd * t];
                let mut vt = vec![T::zero(); hd * t];
                let mut dkt = vec![T::zero(); hd * t];
                let mut dvt = vec![T::zero(); hd * t];
                let mut ds = vec![T::zero(); t];
                for h in 0..heads {
                    let off = h * hd;
                    transpose_head(kb, &mut kt, t, c, off, hd);
                    transpose_head(vb, &mut vt, t, c, off, hd);
                    dkt.fill(T::zero());
                    dvt.fill(T::zero());
                    let ph = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                    for (i, p) in ph.chunks_exact(t).enumerate() {
                        let go = &gb[i * c + off..i * c + off + hd];
                        let qi = &qb[i * c + off..i * c + off + hd];
                        ds.fill(T::zero());
                        for dd in 0..hd {
                            kernels::axpy(go[dd], p, &mut dvt[dd * t..(dd + 1) * t]);
                            kernels::axpy(go[dd], &vt[dd * t..(dd + 1) * t], &mut ds);
                        }
                        let centre = kernels::dot(&ds, p);
                        for (dv, &pv) in ds.iter_mut().zip(p) {
                            *dv = pv * (*dv - centre) * scale;
                        }
                        for dd in 0..hd {
                            gqb[i * c + off + dd] = kernels::dot(&ds, &kt[dd * t..(dd + 1) * t]);
                            kernels::axpy(qi[dd], &ds, &mut dkt[dd * t..(dd + 1) * t]);
                        }
                    }
                    for j in 0..t {
                        for dd in 0..hd {
                            gkb[j * c + off + dd] = dkt[dd * t + j];
                            gvb[j * c + off + dd] = dvt[dd * t + j];
                        }
                    }
                }
            });
        vec![(q, gq), (k, gk), (v, gv)]
    }
}
