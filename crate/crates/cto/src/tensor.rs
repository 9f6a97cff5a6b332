//! Dense channel-major tensors on 2D grids, shared by the convolution
//! machinery, the autodiff tape and the model. Layout is
//! `data[(c * rows + j) * cols + i]`.

use crate::error::{invalid, Result};
use crate::grid::{Image, Sinogram};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self { channels, rows, cols, data: vec![0.0; channels * rows * cols] }
    }

    pub fn from_data(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * rows * cols {
            return Err(invalid(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                rows,
                cols
            )));
        }
        Ok(Self { channels, rows, cols, data })
    }

    /// Scalar wrapped as a 1x1x1 tensor.
    pub fn scalar(value: f64) -> Self {
        Self { channels: 1, rows: 1, cols: 1, data: vec![value] }
    }

    pub fn scalar_value(&self) -> f64 {
        self.data[0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, j: usize, i: usize) -> f64 {
        self.data[(c * self.rows + j) * self.cols + i]
    }

    #[inline]
    pub fn set(&mut self, c: usize, j: usize, i: usize, v: f64) {
        self.data[(c * self.rows + j) * self.cols + i] = v;
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.rows == other.rows && self.cols == other.cols
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            channels: 1,
            rows: img.height(),
            cols: img.width(),
            data: img.values().to_vec(),
        }
    }

    pub fn into_image(self, spacing: f64) -> Result<Image> {
        if self.channels != 1 {
            return Err(invalid("expected a single-channel tensor for an image"));
        }
        Image::new(self.cols, self.rows, spacing, self.data)
    }

    /// Sinogram as a 1-channel tensor with rows = views, cols = detectors.
    pub fn from_sinogram(sino: &Sinogram) -> Self {
        Self {
            channels: 1,
            rows: sino.view_count(),
            cols: sino.det_count(),
            data: sino.values().to_vec(),
        }
    }
}

/// Visits the (source index, weight) taps of one bilinear-resampled output
/// plane sample, cell-edge aligned with clamped boundaries. Shared by the
/// image resampler and its transpose so the pair stays exactly adjoint.
#[inline]
pub(crate) fn for_each_resample_tap(
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
    out_j: usize,
    out_i: usize,
    mut visit: impl FnMut(usize, f64),
) {
    let sy = rows as f64 / out_rows as f64;
    let sx = cols as f64 / out_cols as f64;
    let v = (out_j as f64 + 0.5) * sy - 0.5;
    let u = (out_i as f64 + 0.5) * sx - 0.5;
    let j0 = v.floor();
    let i0 = u.floor();
    let fv = v - j0;
    let fu = u - i0;
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let (j0, i0) = (j0 as isize, i0 as isize);
    visit(clamp(j0, rows) * cols + clamp(i0, cols), (1.0 - fu) * (1.0 - fv));
    visit(clamp(j0, rows) * cols + clamp(i0 + 1, cols), fu * (1.0 - fv));
    visit(clamp(j0 + 1, rows) * cols + clamp(i0, cols), (1.0 - fu) * fv);
    visit(clamp(j0 + 1, rows) * cols + clamp(i0 + 1, cols), fu * fv);
}

pub(crate) fn resample_plane(
    src: &[f64],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_rows * out_cols];
    for j in 0..out_rows {
        for i in 0..out_cols {
            let mut acc = 0.0;
            for_each_resample_tap(rows, cols, out_rows, out_cols, j, i, |idx, w| {
                acc += w * src[idx];
            });
            out[j * out_cols + i] = acc;
        }
    }
    out
}

pub(crate) fn resample_plane_transpose(
    upstream: &[f64],
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f64> {
    let mut grad = vec![0.0; rows * cols];
    for j in 0..out_rows {
        for i in 0..out_cols {
            let g = upstream[j * out_cols + i];
            if g != 0.0 {
                for_each_resample_tap(rows, cols, out_rows, out_cols, j, i, |idx, w| {
                    grad[idx] += w * g;
                });
            }
        }
    }
    grad
}
