//! Raw buffer kernels shared by the forward and backward rules.
//!
//! Every reduction here runs in a fixed order that depends only on the
//! operand shapes, never on how rows are split across threads. Results are
//! therefore bit-identical for any `DWINKIT_THREADS` setting.

use rayon::prelude::*;

use super::Scalar;

const LANES: usize = 8;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn fold_lanes<T: Scalar>(acc: [T; LANES]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = fold_lanes(acc);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let rest = ca.remainder();
    for x in ca {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut s = fold_lanes(acc);
    for &x in rest {
        s += x;
    }
    s
}

/// Largest element; `-inf` for an empty slice.
#[inline]
pub fn max<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let ca = a.chunks_exact(LANES);
    let rest = ca.remainder();
    for x in ca {
        for l in 0..LANES {
            acc[l] = if x[l] > acc[l] { x[l] } else { acc[l] };
        }
    }
    let mut m = acc.into_iter().fold(T::neg_infinity(), T::max);
    for &x in rest {
        m = m.max(x);
    }
    m
}

/// `row[j] = scale · Σ_p q[p] · kt[p·t + j]` for a `[hd, t]` transposed key
/// block; returns `max_j row[j]`.
#[inline]
pub fn scores_row<T: Scalar>(q: &[T], kt: &[T], t: usize, scale: T, row: &mut [T]) -> T {
    debug_assert_eq!(row.len(), t);
    debug_assert_eq!(kt.len(), q.len() * t);
    let mut best = [T::neg_infinity(); LANES];
    let full = t - t % LANES;
    for j in (0..full).step_by(LANES) {
        let mut acc = [T::zero(); LANES];
        for (p, &qv) in q.iter().enumerate() {
            let k = &kt[p * t + j..p * t + j + LANES];
            for l in 0..LANES {
                acc[l] += qv * k[l];
            }
        }
        for l in 0..LANES {
            let v = acc[l] * scale;
            row[j + l] = v;
            best[l] = if v > best[l] { v } else { best[l] };
        }
    }
    let mut m = best.into_iter().fold(T::neg_infinity(), T::max);
    for j in full..t {
        let mut acc = T::zero();
        for (p, &qv) in q.iter().enumerate() {
            acc += qv * kt[p * t + j];
        }
        row[j] = acc * scale;
        m = m.max(row[j]);
    }
    m
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `y += a * b` elementwise.
#[inline]
pub fn fma_into<T: Scalar>(a: &[T], b: &[T], y: &mut [T]) {
    debug_assert_eq!(a.len(), y.len());
    debug_assert_eq!(b.len(), y.len());
    for ((yv, &av), &bv) in y.iter_mut().zip(a).zip(b) {
        *yv += av * bv;
    }
}

#[inline]
pub fn add_into<T: Scalar>(x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

fn rows_per_task(rows: usize, work_per_row: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    if threads == 1 || rows * work_per_row < PAR_THRESHOLD {
        return rows.max(1);
    }
    rows.div_ceil(threads * 4).max(1)
}

/// `c[m,n] (+)= a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let chunk = rows_per_task(m, k * n);
    let body = |(ci, c_chunk): (usize, &mut [T])| {
        let row0 = ci * chunk;
        for (r, c_row) in c_chunk.chunks_exact_mut(n).enumerate() {
            if !accumulate {
                c_row.fill(T::zero());
            }
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                axpy(av, &b[p * n..(p + 1) * n], c_row);
            }
        }
    };
    if chunk >= m {
        body((0, c));
    } else {
        c.par_chunks_mut(chunk * n).enumerate().for_each(body);
    }
}

/// `c[m,n] (+)= a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let chunk = rows_per_task(m, k * n);
    let body = |(ci, c_chunk): (usize, &mut [T])| {
        let row0 = ci * chunk;
        for (r, c_row) in c_chunk.chunks_exact_mut(n).enumerate() {
            let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
            for (j, cv) in c_row.iter_mut().enumerate() {
                let d = dot(a_row, &b[j * k..(j + 1) * k]);
                if accumulate {
                    *cv += d;
                } else {
                    *cv = d;
                }
            }
        }
    };
    if chunk >= m {
        body((0, c));
    } else {
        c.par_chunks_mut(chunk * n).enumerate().for_each(body);
    }
}

/// `c[m,n] (+)= a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let chunk = rows_per_task(m, k * n);
    let body = |(ci, c_chunk): (usize, &mut [T])| {
        let row0 = ci * chunk;
        if !accumulate {
            c_chunk.fill(T::zero());
        }
        let rows = c_chunk.len() / n;
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let a_row = &a[p * m + row0..p * m + row0 + rows];
            for (c_row, &av) in c_chunk.chunks_exact_mut(n).zip(a_row) {
                axpy(av, b_row, c_row);
            }
        }
    };
    if chunk >= m {
        body((0, c));
    } else {
        c.par_chunks_mut(chunk * n).enumerate().for_each(body);
    }
}

/// Generic axis permutation of a contiguous buffer.
pub fn permute<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = super::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    // Innermost run is contiguous when the last axis stays last.
    let (outer_rank, run) = if perm[rank - 1] == rank - 1 {
        (rank - 1, shape[rank - 1])
    } else {
        (rank, 1)
    };
    let mut idx = vec![0usize; outer_rank];
    let mut offset = 0usize;
    loop {
        if run == 1 {
            out.push(src[offset]);
        } else {
            out.extend_from_slice(&src[offset..offset + run]);
        }
        let mut axis = outer_rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Inverse of a permutation vector.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a same-padded depthwise 3D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub c: usize,
    pub k: usize,
}

impl ConvGeom {
    #[inline]
    fn voxel(&self, h: usize, w: usize, d: usize) -> usize {
        ((h * self.w + w) * self.d + d) * self.c
    }

    #[inline]
    fn tap(&self, i: usize, j: usize, l: usize) -> usize {
        ((i * self.k + j) * self.k + l) * self.c
    }

    /// Source index along one axis for output position `o` and tap `t`, if in bounds.
    #[inline]
    fn src(o: usize, t: usize, pad: usize, extent: usize) -> Option<usize> {
        let s = (o + t).checked_sub(pad)?;
        (s < extent).then_some(s)
    }

    fn plane(&self) -> usize {
        self.w * self.d * self.c
    }
}

/// `out[p] = Σ_t x[p + t - pad] · kernel[t]` per channel with zero padding.
pub fn depthwise_conv3d<T: Scalar>(x: &[T], kernel: &[T], g: ConvGeom) -> Vec<T> {
    let pad = g.k / 2;
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(g.plane()).enumerate().for_each(|(h, plane)| {
        for w in 0..g.w {
            for d in 0..g.d {
                let o = (w * g.d + d) * g.c;
                let out_row = &mut plane[o..o + g.c];
                for i in 0..g.k {
                    let Some(sh) = ConvGeom::src(h, i, pad, g.h) else { continue };
                    for j in 0..g.k {
                        let Some(sw) = ConvGeom::src(w, j, pad, g.w) else { continue };
                        for l in 0..g.k {
                            let Some(sd) = ConvGeom::src(d, l, pad, g.d) else { continue };
                            let xi = g.voxel(sh, sw, sd);
                            let ki = g.tap(i, j, l);
                            fma_into(&x[xi..xi + g.c], &kernel[ki..ki + g.c], out_row);
                        }
                    }
                }
            }
        }
    });
    out
}

/// Input gradient of [`depthwise_conv3d`] (correlation with the flipped kernel).
pub fn depthwise_conv3d_grad_input<T: Scalar>(dy: &[T], kernel: &[T], g: ConvGeom) -> Vec<T> {
    let pad = g.k / 2;
    let mut dx = vec![T::zero(); dy.len()];
    dx.par_chunks_mut(g.plane()).enumerate().for_each(|(sh, plane)| {
        for sw in 0..g.w {
            for sd in 0..g.d {
                let o = (sw * g.d + sd) * g.c;
                let dx_row = &mut plane[o..o + g.c];
                // x[s] feeds out[s + pad - t] through tap t.
                for i in 0..g.k {
                    let Some(h) = (sh + pad).checked_sub(i).filter(|&v| v < g.h) else { continue };
                    for j in 0..g.k {
                        let Some(w) = (sw + pad).checked_sub(j).filter(|&v| v < g.w) else { continue };
                        for l in 0..g.k {
                            let Some(d) = (sd + pad).checked_sub(l).filter(|&v| v < g.d) else { continue };
                            let yi = g.voxel(h, w, d);
                            let ki = g.tap(i, j, l);
                            fma_into(&dy[yi..yi + g.c], &kernel[ki..ki + g.c], dx_row);
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Kernel gradient of [`depthwise_conv3d`].
pub fn depthwise_conv3d_grad_kernel<T: Scalar>(x: &[T], dy: &[T], g: ConvGeom) -> Vec<T> {
    let pad = g.k / 2;
    let mut dk = vec![T::zero(); g.k * g.k * g.k * g.c];
    dk.par_chunks_mut(g.c).enumerate().for_each(|(t, dk_row)| {
        let i = t / (g.k * g.k);
        let j = (t / g.k) % g.k;
        let l = t % g.k;
        for h in 0..g.h {
            let Some(sh) = ConvGeom::src(h, i, pad, g.h) else { continue };
            for w in 0..g.w {
                let Some(sw) = ConvGeom::src(w, j, pad, g.w) else { continue };
                for d in 0..g.d {
                    let Some(sd) = ConvGeom::src(d, l, pad, g.d) else { continue };
                    let xi = g.voxel(sh, sw, sd);
                    let yi = g.voxel(h, w, d);
                    fma_into(&x[xi..xi + g.c], &dy[yi..yi + g.c], dk_row);
                }
            }
        }
    });
    dk
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (7, 13, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 7) as f64) * 0.5).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n, false);
        assert_eq!(c, want);

        let bt = transpose(&b, k, n);
        gemm_nt(&a, &bt, &mut c, m, k, n, false);
        assert_eq!(c, want);

        let at = transpose(&a, m, k);
        gemm_tn(&at, &b, &mut c, m, k, n, false);
        assert_eq!(c, want);

        gemm_tn(&at, &b, &mut c, m, k, n, true);
        let doubled: Vec<f64> = want.iter().map(|v| v * 2.0).collect();
        assert_eq!(c, doubled);
    }

    #[test]
    fn dot_and_sum_handle_remainders() {
        let a: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_eq!(sum(&a), 190.0);
        assert_eq!(dot(&a, &a), (1..=19).map(|v| (v * v) as f64).sum::<f64>());
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute(&src, &shape, &[2, 0, 1]);
        // out[k, i, j] = src[i, j, k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], src[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &invert_perm(&[2, 0, 1]));
        assert_eq!(back, src);
    }
}
