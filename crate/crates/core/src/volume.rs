//! Integer label volumes.

use crate::error::{Error, Result};

/// Class ids over an `(H, W, D)` grid, H-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u16>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("label_volume", format!("zero extent in {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("label_volume", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], class: u16) -> Self {
        Self {
            shape,
            data: vec![class; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.shape[1] + w) * self.shape[2] + d
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u16 {
        self.data[self.index(h, w, d)]
    }

    pub fn mask(&self, class: u16) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn count(&self, class: u16) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn max_class(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Errors if any label is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= num_classes) {
            Some(i) => Err(Error::invalid(
                "labels",
                format!("label {} at voxel {i} out of range for {num_classes} classes", self.data[i]),
            )),
            None => Ok(()),
        }
    }
}

/// Mirrors an H-major `(H, W, D, C)` buffer along the axes set in `axes`.
pub fn flip_buffer<T: Copy>(data: &[T], shape: [usize; 3], channels: usize, axes: [bool; 3]) -> Vec<T> {
    let [h, w, d] = shape;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..h {
        let si = if axes[0] { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if axes[1] { w - 1 - j } else { j };
            for l in 0..d {
                let sl = if axes[2] { d - 1 - l } else { l };
                let src = ((si * w + sj) * d + sl) * channels;
                out.extend_from_slice(&data[src..src + channels]);
            }
        }
    }
    out
}

impl LabelVolume {
    pub fn flipped(&self, axes: [bool; 3]) -> Self {
        Self {
            shape: self.shape,
            data: flip_buffer(&self.data, self.shape, 1, axes),
        }
    }
}
