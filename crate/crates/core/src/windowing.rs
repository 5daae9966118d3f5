//! Directional window partitioning of `(H, W, D, C)` volumes.
//!
//! A directional window keeps one spatial axis at full extent and tiles the
//! other two: horizontal windows are `H × ww × wd`, vertical windows are
//! `wh × W × wd`, depthwise windows are `wh × ww × D`. Axes that do not divide
//! evenly are zero-padded on the high side; window extents larger than the
//! axis are clamped to the axis.
//!
//! Windows are ordered lexicographically over the window grid of the two
//! tiled axes (H before W before D). Inside a window, tokens are ordered by
//! the full-axis index first, then by the local coordinates of the tiled axes
//! in H, W, D order.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::PAD_ROW;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Horizontal,
    Vertical,
    Depthwise,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Horizontal, Direction::Vertical, Direction::Depthwise];

    /// Spatial axis that is never windowed: H=0, W=1, D=2.
    pub fn full_axis(self) -> usize {
        match self {
            Direction::Horizontal => 0,
            Direction::Vertical => 1,
            Direction::Depthwise => 2,
        }
    }

    /// The two tiled axes, in H→W→D order.
    pub fn tiled_axes(self) -> [usize; 2] {
        match self {
            Direction::Horizontal => [1, 2],
            Direction::Vertical => [0, 2],
            Direction::Depthwise => [0, 1],
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
            Direction::Depthwise => "depthwise",
        })
    }
}

/// Window extents along H, W and D. For each direction only the two tiled
/// axes are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub wh: usize,
    pub ww: usize,
    pub wd: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { wh: 4, ww: 4, wd: 4 }
    }
}

impl WindowSpec {
    pub fn new(wh: usize, ww: usize, wd: usize) -> Result<Self> {
        let spec = Self { wh, ww, wd };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(w: usize) -> Result<Self> {
        Self::new(w, w, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wh == 0 || self.ww == 0 || self.wd == 0 {
            return Err(Error::Config(format!("window extents must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    fn extent(&self, axis: usize) -> usize {
        [self.wh, self.ww, self.wd][axis]
    }
}

/// Index bookkeeping for one (shape, direction, spec) triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub direction: Direction,
    pub spec: WindowSpec,
    pub original: [usize; 3],
    pub padded: [usize; 3],
    /// Per-axis window extent after clamping; the full axis spans its extent.
    pub window: [usize; 3],
}

impl WindowPlan {
    pub fn new(shape: [usize; 3], direction: Direction, spec: WindowSpec) -> Result<Self> {
        spec.validate()?;
        if shape.contains(&0) {
            return Err(Error::invalid("window_plan", format!("empty spatial shape {shape:?}")));
        }
        let mut window = shape;
        let mut padded = shape;
        for axis in direction.tiled_axes() {
            let w = spec.extent(axis).min(shape[axis]);
            window[axis] = w;
            padded[axis] = shape[axis].div_ceil(w) * w;
        }
        Ok(Self {
            direction,
            spec,
            original: shape,
            padded,
            window,
        })
    }

    pub fn pad_amounts(&self) -> [usize; 3] {
        [
            self.padded[0] - self.original[0],
            self.padded[1] - self.original[1],
            self.padded[2] - self.original[2],
        ]
    }

    /// Windows along each tiled axis.
    fn grid(&self) -> [usize; 2] {
        let [a, b] = self.direction.tiled_axes();
        [self.padded[a] / self.window[a], self.padded[b] / self.window[b]]
    }

    pub fn num_windows(&self) -> usize {
        let [ga, gb] = self.grid();
        ga * gb
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    fn voxel(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.original[1] + w) * self.original[2] + d
    }

    /// Source voxel of every `(window, token)` row; padding rows map to the pad marker.
    pub fn gather_index(&self) -> Vec<u32> {
        let full = self.direction.full_axis();
        let [a, b] = self.direction.tiled_axes();
        let [_, gb] = self.grid();
        let (wa, wb) = (self.window[a], self.window[b]);
        let mut index = Vec::with_capacity(self.num_windows() * self.tokens_per_window());
        for n in 0..self.num_windows() {
            let (ia, ib) = (n / gb, n % gb);
            for f in 0..self.original[full] {
                for la in 0..wa {
                    for lb in 0..wb {
                        let mut pos = [0usize; 3];
                        pos[full] = f;
                        pos[a] = ia * wa + la;
                        pos[b] = ib * wb + lb;
                        if pos[a] < self.original[a] && pos[b] < self.original[b] {
                            index.push(self.voxel(pos[0], pos[1], pos[2]) as u32);
                        } else {
                            index.push(PAD_ROW);
                        }
                    }
                }
            }
        }
        index
    }

    /// Row of the window tensor holding each original voxel.
    pub fn scatter_index(&self) -> Vec<u32> {
        let total: usize = self.original.iter().product();
        let mut index = vec![0u32; total];
        for (row, &src) in self.gather_index().iter().enumerate() {
            if src != PAD_ROW {
                index[src as usize] = row as u32;
            }
        }
        index
    }
}

/// A volume partitioned into directional windows, plus what is needed to undo it.
#[derive(Clone, Debug)]
pub struct DirectionalVolumeSet<T: Scalar = f32> {
    /// `[num_windows, tokens_per_window, C]`
    pub windows: Tensor<T>,
    pub direction: Direction,
    pub spec: WindowSpec,
    pub original_shape: [usize; 4],
    pub pad_amounts: [usize; 3],
}

fn spatial(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        &[h, w, d, c] => Ok([h, w, d, c]),
        _ => Err(Error::invalid(op, format!("expected rank-4 (H,W,D,C), got {shape:?}"))),
    }
}

fn gather<T: Scalar>(src: &[T], c: usize, index: &[u32]) -> Vec<T> {
    let mut out = vec![T::zero(); index.len() * c];
    for (dst, &i) in out.chunks_exact_mut(c).zip(index) {
        if i != PAD_ROW {
            let i = i as usize;
            dst.copy_from_slice(&src[i * c..(i + 1) * c]);
        }
    }
    out
}

pub fn partition<T: Scalar>(x: &Tensor<T>, direction: Direction, spec: WindowSpec) -> Result<DirectionalVolumeSet<T>> {
    let [h, w, d, c] = spatial(x.shape(), "partition")?;
    let plan = WindowPlan::new([h, w, d], direction, spec)?;
    let data = gather(x.data(), c, &plan.gather_index());
    let windows = Tensor::new(vec![plan.num_windows(), plan.tokens_per_window(), c], data)?;
    Ok(DirectionalVolumeSet {
        windows,
        direction,
        spec,
        original_shape: [h, w, d, c],
        pad_amounts: plan.pad_amounts(),
    })
}

pub fn reverse<T: Scalar>(set: &DirectionalVolumeSet<T>) -> Result<Tensor<T>> {
    let [h, w, d, c] = set.original_shape;
    let plan = WindowPlan::new([h, w, d], set.direction, set.spec)?;
    let expected = [plan.num_windows(), plan.tokens_per_window(), c];
    if set.windows.shape() != expected || set.pad_amounts != plan.pad_amounts() {
        return Err(Error::invalid(
            "reverse",
            format!(
                "inconsistent metadata: windows {:?} / pads {:?}, plan expects {:?} / {:?}",
                set.windows.shape(),
                set.pad_amounts,
                expected,
                plan.pad_amounts()
            ),
        ));
    }
    let data = gather(set.windows.data(), c, &plan.scatter_index());
    Tensor::new(vec![h, w, d, c], data)
}

/// Differentiable partition: `[H,W,D,C] -> [num_windows, tokens, C]`.
pub fn partition_var<T: Scalar>(tape: &mut Tape<T>, x: Var, plan: &WindowPlan) -> Result<Var> {
    let [h, w, d, c] = spatial(tape.shape(x), "partition")?;
    if [h, w, d] != plan.original {
        return Err(Error::shape("partition", tape.shape(x), &plan.original));
    }
    let index = Arc::new(plan.gather_index());
    tape.gather_rows(x, index, &[plan.num_windows(), plan.tokens_per_window(), c])
}

/// Differentiable inverse of [`partition_var`], cropping the padding.
pub fn reverse_var<T: Scalar>(tape: &mut Tape<T>, windows: Var, plan: &WindowPlan) -> Result<Var> {
    let c = *tape.shape(windows).last().unwrap();
    let expected = [plan.num_windows(), plan.tokens_per_window(), c];
    if tape.shape(windows) != expected {
        return Err(Error::shape("reverse", tape.shape(windows), &expected));
    }
    let [h, w, d] = plan.original;
    let index = Arc::new(plan.scatter_index());
    tape.gather_rows(windows, index, &[h, w, d, c])
}

fn group_width(c: usize, n: usize) -> Result<usize> {
    if n == 0 || c % n != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split into {n} equal groups")));
    }
    Ok(c / n)
}

/// Splits the channel axis into `n` contiguous equal groups.
pub fn split_channel_groups<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Vec<Tensor<T>>> {
    let c = *x.shape().last().unwrap();
    let g = group_width(c, n)?;
    let rows = x.len() / c;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut data = Vec::with_capacity(rows * g);
        for row in x.data().chunks_exact(c) {
            data.extend_from_slice(&row[i * g..(i + 1) * g]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = g;
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn split_channel_groups_var<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Vec<Var>> {
    let c = *tape.shape(x).last().unwrap();
    let g = group_width(c, n)?;
    tape.split_lastdim(x, &vec![g; n])
}
