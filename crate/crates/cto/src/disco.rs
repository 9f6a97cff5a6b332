//! Discrete-continuous convolutions: compact-support kernels expressed in a
//! fixed piecewise-linear basis with learnable coefficients, discretized on
//! whatever grid the data arrives on.
//!
//! A kernel lives on the disk of radius `cutoff` in the normalized `[0,1]^2`
//! domain (images map their full extent onto the unit square; sinograms map
//! `θ/period` and the detector axis onto it). Discretization enumerates the
//! input lattice points inside the cutoff disk around each output point and
//! weights them by the cell-area quadrature `q = 1 / (rows * cols)`, so the
//! receptive field is a fixed physical region and refining the grid converges
//! to the continuous integral.
//!
//! Boundary handling realizes the sinogram symmetries: `FlippedCircular` on
//! the view-angle axis wraps rows while reversing the detector axis, the
//! discrete form of `p(θ+π, r) = p(θ, -r)`.

use rayon::prelude::*;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Kernel basis
// ---------------------------------------------------------------------------

/// Geometry of the piecewise-linear kernel basis: one isotropic hat plus
/// `rings` rings of `per_ring` angular hats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisConfig {
    /// Kernel support radius in normalized domain units.
    pub cutoff: f64,
    pub rings: usize,
    pub per_ring: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { cutoff: 0.02, rings: 5, per_ring: 7 }
    }
}

/// Evaluable basis set. Basis 0 is an isotropic radial hat peaking at the
/// origin and vanishing at one ring spacing. Basis `(k, m)` is the product of
/// a radial hat centered at `k * cutoff / rings` (half-width one ring
/// spacing) and a periodic angular hat centered at `2π m / per_ring`
/// (half-width one slot spacing). Angles are measured from the first (row)
/// axis toward the second (column) axis, so reversing the column axis
/// negates the angle.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBasis {
    cfg: BasisConfig,
}

impl KernelBasis {
    pub fn new(cfg: BasisConfig) -> Result<Self> {
        if !(cfg.cutoff > 0.0) || !cfg.cutoff.is_finite() {
            return Err(invalid("basis cutoff must be positive"));
        }
        if cfg.rings == 0 || cfg.per_ring == 0 {
            return Err(invalid("basis needs at least one ring and one slot"));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> BasisConfig {
        self.cfg
    }

    pub fn cutoff(&self) -> f64 {
        self.cfg.cutoff
    }

    /// Total basis function count `1 + rings * per_ring`.
    pub fn len(&self) -> usize {
        1 + self.cfg.rings * self.cfg.per_ring
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Evaluates every basis function at the offset `(d0, d1)` (row axis,
    /// column axis). `out` must hold `self.len()` values.
    pub fn eval(&self, d0: f64, d1: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        out.fill(0.0);
        let rho = (d0 * d0 + d1 * d1).sqrt();
        let cutoff = self.cfg.cutoff;
        if rho > cutoff {
            return;
        }
        let ring_spacing = cutoff / self.cfg.rings as f64;
        out[0] = (1.0 - rho / ring_spacing).max(0.0);
        if rho == 0.0 {
            return;
        }
        let beta = d1.atan2(d0);
        let slot_spacing = std::f64::consts::TAU / self.cfg.per_ring as f64;
        for k in 1..=self.cfg.rings {
            let radial = (1.0 - (rho - k as f64 * ring_spacing).abs() / ring_spacing).max(0.0);
            if radial == 0.0 {
                continue;
            }
            for m in 0..self.cfg.per_ring {
                let center = m as f64 * slot_spacing;
                let mut delta = (beta - center).rem_euclid(std::f64::consts::TAU);
                if delta > std::f64::consts::PI {
                    delta -= std::f64::consts::TAU;
                }
                let angular = (1.0 - delta.abs() / slot_spacing).max(0.0);
                if angular > 0.0 {
                    out[1 + (k - 1) * self.cfg.per_ring + m] = radial * angular;
                }
            }
        }
    }

    pub fn eval_vec(&self, d0: f64, d1: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval(d0, d1, &mut out);
        out
    }

    /// Index of the anisotropic basis on ring `k` (1-based), slot `m`.
    pub fn index_of(&self, ring: usize, slot: usize) -> usize {
        debug_assert!(ring >= 1 && ring <= self.cfg.rings && slot < self.cfg.per_ring);
        1 + (ring - 1) * self.cfg.per_ring + slot
    }

    /// Slot pairs `(m, per_ring - m)` exchanged when the column axis is
    /// reversed; coefficients tied across each pair make the kernel symmetric
    /// under that reflection.
    pub fn reflection_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for m in 1..=(self.cfg.per_ring - 1) / 2 {
            pairs.push((m, self.cfg.per_ring - m));
        }
        pairs
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Function-space kernel bank: one coefficient vector per (output, input)
/// channel pair over a shared basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoKernel {
    pub basis: KernelBasis,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Layout `[out][in][basis]`.
    pub coeffs: Vec<f64>,
}

impl DiscoKernel {
    pub fn new(
        basis: KernelBasis,
        in_channels: usize,
        out_channels: usize,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(invalid("kernel channel counts must be positive"));
        }
        if coeffs.len() != in_channels * out_channels * basis.len() {
            return Err(invalid(format!(
                "kernel coefficient count {} does not match {}x{}x{}",
                coeffs.len(),
                out_channels,
                in_channels,
                basis.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(invalid("kernel coefficients must be finite"));
        }
        Ok(Self { basis, in_channels, out_channels, coeffs })
    }

    pub fn zeros(basis: KernelBasis, in_channels: usize, out_channels: usize) -> Self {
        let n = in_channels * out_channels * basis.len();
        Self { basis, in_channels, out_channels, coeffs: vec![0.0; n] }
    }

    #[inline]
    pub fn pair_coeffs(&self, out_c: usize, in_c: usize) -> &[f64] {
        let l = self.basis.len();
        let start = (out_c * self.in_channels + in_c) * l;
        &self.coeffs[start..start + l]
    }

    /// Ties every reflection-paired slot to the pair mean, making each
    /// channel-pair kernel symmetric under column-axis reversal.
    pub fn symmetrize_columns(&mut self) {
        let l = self.basis.len();
        let pairs = self.basis.reflection_pairs();
        let rings = self.basis.config().rings;
        for chunk in self.coeffs.chunks_exact_mut(l) {
            for ring in 1..=rings {
                for &(a, b) in &pairs {
                    let ia = self.basis.index_of(ring, a);
                    let ib = self.basis.index_of(ring, b);
                    let mean = 0.5 * (chunk[ia] + chunk[ib]);
                    chunk[ia] = mean;
                    chunk[ib] = mean;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadKind {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
    Circular,
    /// Wrap rows, reversing the column axis on each wrap. Only meaningful on
    /// the view-angle axis of sinogram-shaped tensors.
    FlippedCircular,
}

/// Per-axis padding policy; `row` applies to the first (view/`y`) axis and
/// `col` to the second (detector/`x`) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadSpec {
    pub row: PadKind,
    pub col: PadKind,
}

impl PadSpec {
    pub fn new(row: PadKind, col: PadKind) -> Result<Self> {
        if col == PadKind::FlippedCircular {
            return Err(invalid("flipped circular padding applies only to the view-angle axis"));
        }
        Ok(Self { row, col })
    }

    pub const ZERO: PadSpec = PadSpec { row: PadKind::Zero, col: PadKind::Zero };
    /// Sinogram policy: flip-aware wrap in the view angle, mirror along the
    /// detector.
    pub const SINOGRAM: PadSpec = PadSpec { row: PadKind::FlippedCircular, col: PadKind::Reflect };
}

#[inline]
fn reflect_index(idx: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = idx.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Resolves a virtual `(row, col)` index into the concrete grid under the
/// padding policy; `None` means a zero-padded (absent) sample.
#[inline]
fn resolve(j: isize, i: isize, rows: usize, cols: usize, pad: PadSpec) -> Option<(usize, usize)> {
    let (j_res, flip) = match pad.row {
        PadKind::Zero => {
            if j < 0 || j >= rows as isize {
                return None;
            }
            (j as usize, false)
        }
        PadKind::Reflect => (reflect_index(j, rows), false),
        PadKind::Circular => (j.rem_euclid(rows as isize) as usize, false),
        PadKind::FlippedCircular => {
            let wraps = j.div_euclid(rows as isize);
            (j.rem_euclid(rows as isize) as usize, wraps.rem_euclid(2) == 1)
        }
    };
    // A row that wrapped across the period boundary sees the column axis
    // reversed; apply the reversal to the virtual coordinate before the
    // column policy folds it into range.
    let i = if flip { cols as isize - 1 - i } else { i };
    let i_res = match pad.col {
        PadKind::Zero => {
            if i < 0 || i >= cols as isize {
                return None;
            }
            i as usize
        }
        PadKind::Reflect => reflect_index(i, cols),
        PadKind::Circular => i.rem_euclid(cols as isize) as usize,
        PadKind::FlippedCircular => unreachable!("rejected by PadSpec::new"),
    };
    Some((j_res, i_res))
}

/// Materialized padding of every channel by `margin_row` / `margin_col`.
pub fn pad(t: &Tensor, pad_spec: PadSpec, margin_row: usize, margin_col: usize) -> Result<Tensor> {
    if margin_row > t.rows || margin_col > t.cols {
        return Err(invalid("padding margin exceeds tensor dimensions"));
    }
    let rows = t.rows + 2 * margin_row;
    let cols = t.cols + 2 * margin_col;
    let mut out = Tensor::zeros(t.channels, rows, cols);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for j in 0..rows {
            let jj = j as isize - margin_row as isize;
            for i in 0..cols {
                let ii = i as isize - margin_col as isize;
                if let Some((sj, si)) = resolve(jj, ii, t.rows, t.cols, pad_spec) {
                    dst[j * cols + i] = src[sj * t.cols + si];
                }
            }
        }
    }
    Ok(out)
}

/// Shift by `k` rows with the flip-aware wrap: rows crossing the period
/// boundary come back reversed along the column axis. This is the discrete
/// action of an in-plane rotation on a sinogram.
pub fn flip_aware_shift(t: &Tensor, k: isize) -> Tensor {
    let mut out = Tensor::zeros(t.channels, t.rows, t.cols);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for j in 0..t.rows {
            let virt = j as isize - k;
            let wraps = virt.div_euclid(t.rows as isize);
            let sj = virt.rem_euclid(t.rows as isize) as usize;
            let flip = wraps.rem_euclid(2) == 1;
            for i in 0..t.cols {
                let si = if flip { t.cols - 1 - i } else { i };
                dst[j * t.cols + i] = src[sj * t.cols + si];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Discretization tables
// ---------------------------------------------------------------------------

/// Grid a tensor lives on, mapped onto the normalized unit square with
/// samples at cell centers `((j+0.5)/rows, (i+0.5)/cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cell_area(&self) -> f64 {
        1.0 / (self.rows as f64 * self.cols as f64)
    }

    fn point(&self, j: usize, i: usize) -> (f64, f64) {
        ((j as f64 + 0.5) / self.rows as f64, (i as f64 + 0.5) / self.cols as f64)
    }
}

enum TableKind {
    /// Equal in/out grids: one shared integer-offset stencil.
    Stencil { offsets: Vec<(i32, i32)>, basis_values: Vec<f64> },
    /// General grids: per-output-point entries.
    General { row_ptr: Vec<usize>, inputs: Vec<u32>, basis_values: Vec<f64> },
}

/// Coefficient-independent discretization of a basis on an (input grid,
/// output grid, padding) triple: which input points fall inside the cutoff
/// disk of each output point, and the basis values at those offsets scaled
/// by the quadrature weight.
pub struct DiscoTable {
    pub in_grid: GridSpec,
    pub out_grid: GridSpec,
    pub pad: PadSpec,
    basis_len: usize,
    kind: TableKind,
}

impl DiscoTable {
    pub fn build(
        basis: &KernelBasis,
        in_grid: GridSpec,
        out_grid: GridSpec,
        pad: PadSpec,
    ) -> Result<Self> {
        if in_grid.rows == 0 || in_grid.cols == 0 || out_grid.rows == 0 || out_grid.cols == 0 {
            return Err(invalid("disco grids must be non-empty"));
        }
        let l = basis.len();
        let q = in_grid.cell_area();
        if in_grid == out_grid {
            let cutoff = basis.cutoff();
            let max_dj = (cutoff * in_grid.rows as f64).floor() as i32;
            let max_di = (cutoff * in_grid.cols as f64).floor() as i32;
            let mut offsets = Vec::new();
            let mut basis_values = Vec::new();
            let mut scratch = vec![0.0; l];
            for dj in -max_dj..=max_dj {
                for di in -max_di..=max_di {
                    let d0 = dj as f64 / in_grid.rows as f64;
                    let d1 = di as f64 / in_grid.cols as f64;
                    if (d0 * d0 + d1 * d1).sqrt() > cutoff {
                        continue;
                    }
                    basis.eval(d0, d1, &mut scratch);
                    offsets.push((dj, di));
                    basis_values.extend(scratch.iter().map(|v| v * q));
                }
            }
            Ok(Self {
                in_grid,
                out_grid,
                pad,
                basis_len: l,
                kind: TableKind::Stencil { offsets, basis_values },
            })
        } else {
            let cutoff = basis.cutoff();
            let mut row_ptr = Vec::with_capacity(out_grid.rows * out_grid.cols + 1);
            let mut inputs = Vec::new();
            let mut basis_values = Vec::new();
            let mut scratch = vec![0.0; l];
            row_ptr.push(0);
            for jo in 0..out_grid.rows {
                for io in 0..out_grid.cols {
                    let (v0, v1) = out_grid.point(jo, io);
                    let j_lo = ((v0 - cutoff) * in_grid.rows as f64 - 0.5).floor() as isize;
                    let j_hi = ((v0 + cutoff) * in_grid.rows as f64 - 0.5).ceil() as isize;
                    let i_lo = ((v1 - cutoff) * in_grid.cols as f64 - 0.5).floor() as isize;
                    let i_hi = ((v1 + cutoff) * in_grid.cols as f64 - 0.5).ceil() as isize;
                    for jj in j_lo..=j_hi {
                        for ii in i_lo..=i_hi {
                            // Offsets use the virtual (unfolded) coordinate;
                            // data comes from the resolved index.
                            let u0 = (jj as f64 + 0.5) / in_grid.rows as f64;
                            let u1 = (ii as f64 + 0.5) / in_grid.cols as f64;
                            let d0 = u0 - v0;
                            let d1 = u1 - v1;
                            if (d0 * d0 + d1 * d1).sqrt() > cutoff {
                                continue;
                            }
                            let Some((rj, ri)) = resolve(jj, ii, in_grid.rows, in_grid.cols, pad)
                            else {
                                continue;
                            };
                            basis.eval(d0, d1, &mut scratch);
                            if scratch.iter().all(|&v| v == 0.0) {
                                continue;
                            }
                            inputs.push((rj * in_grid.cols + ri) as u32);
                            basis_values.extend(scratch.iter().map(|v| v * q));
                        }
                    }
                    row_ptr.push(inputs.len());
                }
            }
            Ok(Self {
                in_grid,
                out_grid,
                pad,
                basis_len: l,
                kind: TableKind::General { row_ptr, inputs, basis_values },
            })
        }
    }

    pub fn basis_len(&self) -> usize {
        self.basis_len
    }

    /// Number of taps in the shared stencil (same-grid tables).
    pub fn stencil_size(&self) -> Option<usize> {
        match &self.kind {
            TableKind::Stencil { offsets, .. } => Some(offsets.len()),
            TableKind::General { .. } => None,
        }
    }

    /// Quadrature mass of each basis function on the input grid: the
    /// discrete estimate of `∫ κ_ℓ`. Stencil tables sum the shared taps;
    /// general tables report the mean row mass.
    pub fn basis_masses(&self) -> Vec<f64> {
        let l = self.basis_len;
        let mut masses = vec![0.0; l];
        match &self.kind {
            TableKind::Stencil { basis_values, .. } => {
                for tap in basis_values.chunks_exact(l) {
                    for (m, b) in masses.iter_mut().zip(tap) {
                        *m += b;
                    }
                }
            }
            TableKind::General { row_ptr, basis_values, .. } => {
                for entry in basis_values.chunks_exact(l) {
                    for (m, b) in masses.iter_mut().zip(entry) {
                        *m += b;
                    }
                }
                let rows = (row_ptr.len() - 1).max(1) as f64;
                for m in masses.iter_mut() {
                    *m /= rows;
                }
            }
        }
        masses
    }

    /// Contracts basis values with per-pair coefficients: `pairs x taps`
    /// weights, quadrature included.
    fn contract(&self, kernel: &DiscoKernel) -> Vec<f64> {
        let l = self.basis_len;
        let pairs = kernel.out_channels * kernel.in_channels;
        match &self.kind {
            TableKind::Stencil { basis_values, offsets } => {
                let taps = offsets.len();
                let mut w = vec![0.0; pairs * taps];
                for p in 0..pairs {
                    let coeffs = &kernel.coeffs[p * l..(p + 1) * l];
                    let dst = &mut w[p * taps..(p + 1) * taps];
                    for (t, wt) in dst.iter_mut().enumerate() {
                        let basis = &basis_values[t * l..(t + 1) * l];
                        *wt = basis.iter().zip(coeffs).map(|(b, c)| b * c).sum();
                    }
                }
                w
            }
            TableKind::General { inputs, basis_values, .. } => {
                let taps = inputs.len();
                let mut w = vec![0.0; pairs * taps];
                for p in 0..pairs {
                    let coeffs = &kernel.coeffs[p * l..(p + 1) * l];
                    let dst = &mut w[p * taps..(p + 1) * taps];
                    for (t, wt) in dst.iter_mut().enumerate() {
                        let basis = &basis_values[t * l..(t + 1) * l];
                        *wt = basis.iter().zip(coeffs).map(|(b, c)| b * c).sum();
                    }
                }
                w
            }
        }
    }

    fn check_input(&self, kernel: &DiscoKernel, input: &Tensor) -> Result<()> {
        if kernel.basis.len() != self.basis_len {
            return Err(invalid("kernel basis does not match the table"));
        }
        if input.channels != kernel.in_channels
            || input.rows != self.in_grid.rows
            || input.cols != self.in_grid.cols
        {
            return Err(invalid(format!(
                "disco input {}x{}x{} does not match kernel/table {}x{}x{}",
                input.channels,
                input.rows,
                input.cols,
                kernel.in_channels,
                self.in_grid.rows,
                self.in_grid.cols
            )));
        }
        Ok(())
    }

    /// Discrete convolution `out[o] = Σ_i W_(o,i) * in[i]`.
    pub fn apply(&self, kernel: &DiscoKernel, input: &Tensor) -> Result<Tensor> {
        self.check_input(kernel, input)?;
        let weights = self.contract(kernel);
        let mut out = Tensor::zeros(kernel.out_channels, self.out_grid.rows, self.out_grid.cols);
        let out_plane = self.out_grid.rows * self.out_grid.cols;
        let in_ch = kernel.in_channels;
        match &self.kind {
            TableKind::Stencil { offsets, .. } => {
                let taps = offsets.len();
                let rows = self.out_grid.rows;
                let cols = self.out_grid.cols;
                let pad_spec = self.pad;
                out.data
                    .par_chunks_mut(out_plane)
                    .enumerate()
                    .for_each(|(o, plane)| {
                        for ic in 0..in_ch {
                            let w = &weights[(o * in_ch + ic) * taps..(o * in_ch + ic + 1) * taps];
                            let src = input.channel(ic);
                            stencil_gather(plane, src, rows, cols, offsets, w, pad_spec);
                        }
                    });
            }
            TableKind::General { row_ptr, inputs, .. } => {
                out.data
                    .par_chunks_mut(out_plane)
                    .enumerate()
                    .for_each(|(o, plane)| {
                        for ic in 0..in_ch {
                            let taps = inputs.len();
                            let w = &weights[(o * in_ch + ic) * taps..(o * in_ch + ic + 1) * taps];
                            let src = input.channel(ic);
                            for (pt, acc) in plane.iter_mut().enumerate() {
                                let mut s = 0.0;
                                for e in row_ptr[pt]..row_ptr[pt + 1] {
                                    s += w[e] * src[inputs[e] as usize];
                                }
                                *acc += s;
                            }
                        }
                    });
            }
        }
        Ok(out)
    }

    /// Exact transpose of [`apply`] with respect to the input: scatters
    /// upstream gradients back through the same (point, tap, weight) triples.
    pub fn input_gradient(&self, kernel: &DiscoKernel, upstream: &Tensor) -> Result<Tensor> {
        if upstream.channels != kernel.out_channels
            || upstream.rows != self.out_grid.rows
            || upstream.cols != self.out_grid.cols
        {
            return Err(invalid("upstream gradient shape mismatch"));
        }
        let weights = self.contract(kernel);
        let mut grad = Tensor::zeros(kernel.in_channels, self.in_grid.rows, self.in_grid.cols);
        let in_plane = self.in_grid.rows * self.in_grid.cols;
        let out_ch = kernel.out_channels;
        let in_ch = kernel.in_channels;
        match &self.kind {
            TableKind::Stencil { offsets, .. } => {
                let taps = offsets.len();
                let rows = self.out_grid.rows;
                let cols = self.out_grid.cols;
                let pad_spec = self.pad;
                grad.data
                    .par_chunks_mut(in_plane)
                    .enumerate()
                    .for_each(|(ic, plane)| {
                        for o in 0..out_ch {
                            let w = &weights[(o * in_ch + ic) * taps..(o * in_ch + ic + 1) * taps];
                            let up = upstream.channel(o);
                            for j in 0..rows {
                                for i in 0..cols {
                                    let g = up[j * cols + i];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for (t, &(dj, di)) in offsets.iter().enumerate() {
                                        if let Some((sj, si)) = resolve(
                                            j as isize + dj as isize,
                                            i as isize + di as isize,
                                            rows,
                                            cols,
                                            pad_spec,
                                        ) {
                                            plane[sj * cols + si] += w[t] * g;
                                        }
                                    }
                                }
                            }
                        }
                    });
            }
            TableKind::General { row_ptr, inputs, .. } => {
                grad.data
                    .par_chunks_mut(in_plane)
                    .enumerate()
                    .for_each(|(ic, plane)| {
                        let taps = inputs.len();
                        for o in 0..out_ch {
                            let w = &weights[(o * in_ch + ic) * taps..(o * in_ch + ic + 1) * taps];
                            let up = upstream.channel(o);
                            for (pt, &g) in up.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                for e in row_ptr[pt]..row_ptr[pt + 1] {
                                    plane[inputs[e] as usize] += w[e] * g;
                                }
                            }
                        }
                    });
            }
        }
        Ok(grad)
    }

    /// Gradient of the convolution with respect to the kernel coefficients:
    /// the basis-weighted correlation of input and upstream gradient,
    /// returned in kernel coefficient layout.
    pub fn coeff_gradient(
        &self,
        kernel: &DiscoKernel,
        input: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<f64>> {
        self.check_input(kernel, input)?;
        let l = self.basis_len;
        let in_ch = kernel.in_channels;
        let pairs: Vec<(usize, usize)> = (0..kernel.out_channels)
            .flat_map(|o| (0..in_ch).map(move |ic| (o, ic)))
            .collect();
        let grads: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|&(o, ic)| {
                let mut acc = vec![0.0; l];
                let up = upstream.channel(o);
                let src = input.channel(ic);
                match &self.kind {
                    TableKind::Stencil { offsets, basis_values } => {
                        let rows = self.out_grid.rows;
                        let cols = self.out_grid.cols;
                        for (t, &(dj, di)) in offsets.iter().enumerate() {
                            let mut corr = 0.0;
                            for j in 0..rows {
                                for i in 0..cols {
                                    if let Some((sj, si)) = resolve(
                                        j as isize + dj as isize,
                                        i as isize + di as isize,
                                        rows,
                                        cols,
                                        self.pad,
                                    ) {
                                        corr += up[j * cols + i] * src[sj * cols + si];
                                    }
                                }
                            }
                            let basis = &basis_values[t * l..(t + 1) * l];
                            for (a, b) in acc.iter_mut().zip(basis) {
                                *a += b * corr;
                            }
                        }
                    }
                    TableKind::General { row_ptr, inputs, basis_values } => {
                        for (pt, &g) in up.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            for e in row_ptr[pt]..row_ptr[pt + 1] {
                                let basis = &basis_values[e * l..(e + 1) * l];
                                let x = src[inputs[e] as usize];
                                for (a, b) in acc.iter_mut().zip(basis) {
                                    *a += b * g * x;
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = Vec::with_capacity(pairs.len() * l);
        for g in grads {
            out.extend(g);
        }
        Ok(out)
    }
}

#[inline]
fn stencil_gather(
    plane: &mut [f64],
    src: &[f64],
    rows: usize,
    cols: usize,
    offsets: &[(i32, i32)],
    weights: &[f64],
    pad_spec: PadSpec,
) {
    // Interior fast path: every tap lands in range.
    let max_dj = offsets.iter().map(|o| o.0.abs()).max().unwrap_or(0) as usize;
    let max_di = offsets.iter().map(|o| o.1.abs()).max().unwrap_or(0) as usize;
    let interior = rows > 2 * max_dj && cols > 2 * max_di;
    let flat: Vec<isize> =
        offsets.iter().map(|&(dj, di)| dj as isize * cols as isize + di as isize).collect();
    for j in 0..rows {
        let j_interior = interior && j >= max_dj && j < rows - max_dj;
        for i in 0..cols {
            let base = (j * cols + i) as isize;
            let mut acc = 0.0;
            if j_interior && i >= max_di && i < cols - max_di {
                for (off, &w) in flat.iter().zip(weights) {
                    acc += w * src[(base + off) as usize];
                }
            } else {
                for (t, &(dj, di)) in offsets.iter().enumerate() {
                    if let Some((sj, si)) = resolve(
                        j as isize + dj as isize,
                        i as isize + di as isize,
                        rows,
                        cols,
                        pad_spec,
                    ) {
                        acc += weights[t] * src[sj * cols + si];
                    }
                }
            }
            plane[j * cols + i] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Contracted operator (sparse-table view)
// ---------------------------------------------------------------------------

/// A kernel discretized on concrete grids: the sparse map from input samples
/// to output samples with weights `κ(u_j - v_i) * q_j` already contracted
/// over the basis.
pub struct DiscreteOperator {
    table: Arc<DiscoTable>,
    kernel: DiscoKernel,
}

/// Discretizes `kernel` for an input grid, output grid and padding policy.
pub fn discretize(
    kernel: &DiscoKernel,
    in_grid: GridSpec,
    out_grid: GridSpec,
    pad: PadSpec,
) -> Result<DiscreteOperator> {
    let table = DiscoTable::build(&kernel.basis, in_grid, out_grid, pad)?;
    Ok(DiscreteOperator { table: Arc::new(table), kernel: kernel.clone() })
}

impl DiscreteOperator {
    pub fn from_table(table: Arc<DiscoTable>, kernel: DiscoKernel) -> Result<Self> {
        if table.basis_len != kernel.basis.len() {
            return Err(invalid("kernel basis does not match the table"));
        }
        Ok(Self { table, kernel })
    }

    pub fn table(&self) -> &DiscoTable {
        &self.table
    }

    pub fn kernel(&self) -> &DiscoKernel {
        &self.kernel
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        self.table.apply(&self.kernel, input)
    }

    /// Sparse row of the operator for one output point and channel pair:
    /// `(input flat index, weight)` entries, zero-weight taps included.
    pub fn row(&self, out_c: usize, in_c: usize, point: usize) -> Vec<(usize, f64)> {
        let l = self.table.basis_len;
        let coeffs = self.kernel.pair_coeffs(out_c, in_c);
        let mut entries = Vec::new();
        match &self.table.kind {
            TableKind::Stencil { offsets, basis_values } => {
                let rows = self.table.out_grid.rows;
                let cols = self.table.out_grid.cols;
                let (j, i) = (point / cols, point % cols);
                for (t, &(dj, di)) in offsets.iter().enumerate() {
                    if let Some((sj, si)) = resolve(
                        j as isize + dj as isize,
                        i as isize + di as isize,
                        rows,
                        cols,
                        self.table.pad,
                    ) {
                        let basis = &basis_values[t * l..(t + 1) * l];
                        let w: f64 = basis.iter().zip(coeffs).map(|(b, c)| b * c).sum();
                        entries.push((sj * cols + si, w));
                    }
                }
            }
            TableKind::General { row_ptr, inputs, basis_values } => {
                for e in row_ptr[point]..row_ptr[point + 1] {
                    let basis = &basis_values[e * l..(e + 1) * l];
                    let w: f64 = basis.iter().zip(coeffs).map(|(b, c)| b * c).sum();
                    entries.push((inputs[e] as usize, w));
                }
            }
        }
        entries
    }
}
