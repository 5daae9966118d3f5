use crate::tensor::{strides_of, Scalar};

/// Copies the hyper-rectangle `extent` starting at `src_start` in `src` to
/// `dst_start` in `dst`. With `accumulate` the values are added instead.
#[allow(clippy::too_many_arguments)]
pub(crate) fn copy_region<T: Scalar>(
    src: &[T],
    src_shape: &[usize],
    src_start: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    dst_start: &[usize],
    extent: &[usize],
    accumulate: bool,
) {
    let rank = src_shape.len();
    if rank == 0 || extent.contains(&0) {
        return;
    }
    let ss = strides_of(src_shape);
    let ds = strides_of(dst_shape);
    let run = extent[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    loop {
        let mut so = src_start[rank - 1];
        let mut dof = dst_start[rank - 1];
        for a in 0..rank - 1 {
            so += (src_start[a] + idx[a]) * ss[a];
            dof += (dst_start[a] + idx[a]) * ds[a];
        }
        let s = &src[so..so + run];
        let d = &mut dst[dof..dof + run];
        if accumulate {
            crate::tensor::kernels::add_into(s, d);
        } else {
            d.copy_from_slice(s);
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < extent[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
