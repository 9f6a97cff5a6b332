//! Tape-based reverse-mode differentiation over the toolkit's operator set.
//!
//! Values are computed eagerly as operations are recorded; `grad` replays the
//! tape backward, propagating adjoints. Linear operators backpropagate
//! through their exact transposes (the projector pair are each other's
//! transposes; convolutions scatter through the same weight tables they
//! gathered with), so gradients are exact rather than approximate.
//!
//! Complex data never appears on the tape: the detector-axis Fourier pair
//! carries spectra as (real, imaginary) channel pairs. The forward transform
//! is the unnormalized centered DFT and the inverse carries the `1/N`
//! factor; the backward rules below account for that normalization
//! explicitly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::disco::{DiscoKernel, DiscoTable, KernelBasis};
use crate::error::{invalid, Error, Result};
use crate::fourier::{centered_dft, centered_idft};
use crate::grid::{apply_mask, Image, SampleMask, Sinogram};
use crate::projector::ProjectorConfig;
use crate::tensor::{resample_plane, resample_plane_transpose, Tensor};

// ---------------------------------------------------------------------------
// Parameter trees
// ---------------------------------------------------------------------------

/// Named flat parameter leaves with a stable (sorted) ordering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree {
    leaves: BTreeMap<String, Vec<f64>>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter leaf {name}")));
        }
        self.leaves.insert(name, values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.leaves.get(name).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.leaves.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.leaves.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn value_count(&self) -> usize {
        self.leaves.values().map(|v| v.len()).sum()
    }

    /// Concatenation of all leaves in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.value_count());
        for v in self.leaves.values() {
            out.extend_from_slice(v);
        }
        out
    }

    /// Rebuilds a tree with this tree's structure from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamTree> {
        if flat.len() != self.value_count() {
            return Err(invalid(format!(
                "flat vector length {} does not match tree size {}",
                flat.len(),
                self.value_count()
            )));
        }
        let mut out = ParamTree::new();
        let mut offset = 0;
        for (name, v) in &self.leaves {
            out.leaves.insert(name.clone(), flat[offset..offset + v.len()].to_vec());
            offset += v.len();
        }
        Ok(out)
    }

    /// Same-structure tree of zeros.
    pub fn zeros_like(&self) -> ParamTree {
        let mut out = ParamTree::new();
        for (name, v) in &self.leaves {
            out.leaves.insert(name.clone(), vec![0.0; v.len()]);
        }
        out
    }

    /// Adds `other` into `self`; leaves missing from `other` are untouched.
    pub fn accumulate(&mut self, other: &ParamTree) -> Result<()> {
        for (name, grad) in &other.leaves {
            let Some(dst) = self.leaves.get_mut(name) else {
                return Err(invalid(format!("unknown parameter leaf {name}")));
            };
            if dst.len() != grad.len() {
                return Err(invalid(format!("leaf {name} size mismatch")));
            }
            for (d, g) in dst.iter_mut().zip(grad) {
                *d += g;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamTree,
    v: ParamTree,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamTree) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Gradients missing a leaf are
/// treated as zero for that leaf (moments still decay).
pub fn adam_step(
    params: &mut ParamTree,
    grads: &ParamTree,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g_leaf = grads.get(name);
        let m = state.m.get_mut(name).ok_or_else(|| invalid("adam state out of sync"))?;
        let v = state.v.get_mut(name).ok_or_else(|| invalid("adam state out of sync"))?;
        for idx in 0..p.len() {
            let g = g_leaf.map_or(0.0, |l| l[idx]);
            m[idx] = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * g;
            v[idx] = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[idx] / bc1;
            let v_hat = v[idx] / bc2;
            p[idx] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise scaling of `x` by the 1x1x1 node `s`.
    Scale { x: NodeId, s: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    Relu(NodeId),
    /// `out[o] = Σ_i w[o,i] in[i] + b[o]` per grid point.
    ChannelMix { x: NodeId, w: NodeId, b: NodeId },
    DiscoApply { x: NodeId, coeffs: NodeId, table: Arc<DiscoTable>, basis: KernelBasis, in_ch: usize, out_ch: usize },
    /// 2x2 average pooling.
    Down2(NodeId),
    /// 2x nearest-neighbor upsampling.
    Up2(NodeId),
    /// Centered DFT along the detector axis: 1 real channel in, (re, im) out.
    FftR(NodeId),
    /// Inverse centered DFT (1/N normalized): (re, im) in, real part out.
    IfftR(NodeId),
    ProjForward { x: NodeId, proj: Arc<ProjectorConfig>, mask: Option<Arc<SampleMask>> },
    ProjAdjoint { y: NodeId, proj: Arc<ProjectorConfig>, mask: Option<Arc<SampleMask>> },
    /// Ramp-filtered backprojection of a full-grid sinogram.
    FbpInit { y: NodeId, proj: Arc<ProjectorConfig>, pad_factor: usize },
    ResampleBilinear { x: NodeId, rows: usize, cols: usize },
    /// Shape metadata change; data order is untouched.
    Reshape(NodeId),
    MseLoss(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation; values are evaluated at record time and `grad`
/// replays the trace in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Registers a named parameter leaf; `grad` reports into this name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(value, Op::Param(name.into()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("add shape mismatch"));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor { channels: va.channels, rows: va.rows, cols: va.cols, data };
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("sub shape mismatch"));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let value = Tensor { channels: va.channels, rows: va.rows, cols: va.cols, data };
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let vs = &self.nodes[s.0].value;
        if vs.len() != 1 {
            return Err(invalid("scale factor must be a scalar node"));
        }
        let c = vs.scalar_value();
        let vx = &self.nodes[x.0].value;
        let value = Tensor {
            channels: vx.channels,
            rows: vx.rows,
            cols: vx.cols,
            data: vx.data.iter().map(|v| c * v).collect(),
        };
        Ok(self.push(value, Op::Scale { x, s }))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let value = Tensor {
            channels: vx.channels,
            rows: vx.rows,
            cols: vx.cols,
            data: vx.data.iter().map(|v| c * v).collect(),
        };
        self.push(value, Op::ScaleConst { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let value = Tensor {
            channels: vx.channels,
            rows: vx.rows,
            cols: vx.cols,
            data: vx.data.iter().map(|v| v.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(x))
    }

    /// Pointwise channel mix. `w` is an `out_ch x in_ch` matrix stored as a
    /// `(1, out_ch, in_ch)` tensor; `b` holds `out_ch` biases.
    pub fn channel_mix(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) =
            (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let out_ch = vw.rows;
        let in_ch = vw.cols;
        if vw.channels != 1 || vx.channels != in_ch || vb.len() != out_ch {
            return Err(invalid("channel mix shape mismatch"));
        }
        let plane = vx.plane();
        let mut value = Tensor::zeros(out_ch, vx.rows, vx.cols);
        for o in 0..out_ch {
            let bias = vb.data[o];
            let dst = value.channel_mut(o);
            dst.fill(bias);
            for i in 0..in_ch {
                let wv = vw.data[o * in_ch + i];
                if wv != 0.0 {
                    let src = vx.channel(i);
                    for p in 0..plane {
                        dst[p] += wv * src[p];
                    }
                }
            }
        }
        Ok(self.push(value, Op::ChannelMix { x, w, b }))
    }

    /// Discrete-continuous convolution of `x` by the kernel whose
    /// coefficients live in node `coeffs` (layout `[out][in][basis]`).
    pub fn disco_apply(
        &mut self,
        x: NodeId,
        coeffs: NodeId,
        table: Arc<DiscoTable>,
        basis: KernelBasis,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<NodeId> {
        let kernel = self.kernel_from(coeffs, &basis, in_ch, out_ch)?;
        let value = table.apply(&kernel, &self.nodes[x.0].value)?;
        Ok(self.push(value, Op::DiscoApply { x, coeffs, table, basis, in_ch, out_ch }))
    }

    fn kernel_from(
        &self,
        coeffs: NodeId,
        basis: &KernelBasis,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<DiscoKernel> {
        DiscoKernel::new(
            basis.clone(),
            in_ch,
            out_ch,
            self.nodes[coeffs.0].value.data.clone(),
        )
    }

    pub fn downsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.rows % 2 != 0 || vx.cols % 2 != 0 {
            return Err(invalid("downsample requires even dimensions"));
        }
        let (rows, cols) = (vx.rows / 2, vx.cols / 2);
        let mut value = Tensor::zeros(vx.channels, rows, cols);
        for c in 0..vx.channels {
            let src = vx.channel(c);
            let dst = value.channel_mut(c);
            for j in 0..rows {
                for i in 0..cols {
                    dst[j * cols + i] = 0.25
                        * (src[(2 * j) * vx.cols + 2 * i]
                            + src[(2 * j) * vx.cols + 2 * i + 1]
                            + src[(2 * j + 1) * vx.cols + 2 * i]
                            + src[(2 * j + 1) * vx.cols + 2 * i + 1]);
                }
            }
        }
        Ok(self.push(value, Op::Down2(x)))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (rows, cols) = (vx.rows * 2, vx.cols * 2);
        let mut value = Tensor::zeros(vx.channels, rows, cols);
        for c in 0..vx.channels {
            let src = vx.channel(c);
            let dst = value.channel_mut(c);
            for j in 0..rows {
                for i in 0..cols {
                    dst[j * cols + i] = src[(j / 2) * vx.cols + i / 2];
                }
            }
        }
        self.push(value, Op::Up2(x))
    }

    pub fn fft_r(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.channels != 1 {
            return Err(invalid("fft_r expects one real channel"));
        }
        let mut value = Tensor::zeros(2, vx.rows, vx.cols);
        for j in 0..vx.rows {
            let row: Vec<Complex<f64>> = (0..vx.cols)
                .map(|i| Complex::new(vx.data[j * vx.cols + i], 0.0))
                .collect();
            let spec = centered_dft(&row);
            for i in 0..vx.cols {
                value.set(0, j, i, spec[i].re);
                value.set(1, j, i, spec[i].im);
            }
        }
        Ok(self.push(value, Op::FftR(x)))
    }

    pub fn ifft_r(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.channels != 2 {
            return Err(invalid("ifft_r expects (re, im) channels"));
        }
        let mut value = Tensor::zeros(1, vx.rows, vx.cols);
        for j in 0..vx.rows {
            let row: Vec<Complex<f64>> = (0..vx.cols)
                .map(|i| Complex::new(vx.get(0, j, i), vx.get(1, j, i)))
                .collect();
            let spatial = centered_idft(&row);
            for i in 0..vx.cols {
                value.set(0, j, i, spatial[i].re);
            }
        }
        Ok(self.push(value, Op::IfftR(x)))
    }

    fn image_from(&self, x: NodeId, proj: &ProjectorConfig) -> Result<Image> {
        let vx = &self.nodes[x.0].value;
        if vx.channels != 1 {
            return Err(invalid("projector ops expect one channel"));
        }
        Image::new(vx.cols, vx.rows, proj.spacing(), vx.data.clone())
    }

    fn sinogram_from(
        &self,
        y: NodeId,
        proj: &ProjectorConfig,
        mask: Option<&SampleMask>,
    ) -> Result<Sinogram> {
        let vy = &self.nodes[y.0].value;
        if vy.channels != 1 {
            return Err(invalid("projector ops expect one channel"));
        }
        let angle_set = match mask {
            Some(m) => proj.angle_set().restrict(m)?,
            None => proj.angle_set().clone(),
        };
        if vy.rows != angle_set.len() || vy.cols != proj.det_count() {
            return Err(invalid("sinogram tensor does not match projector grid"));
        }
        Sinogram::new(angle_set, proj.det_count(), proj.det_spacing(), vy.data.clone())
    }

    fn embed_rows(
        compact: &Tensor,
        mask: &SampleMask,
        full_views: usize,
    ) -> Tensor {
        let mut full = Tensor::zeros(1, full_views, compact.cols);
        for (row, &k) in mask.kept_indices().iter().enumerate() {
            let src = &compact.data[row * compact.cols..(row + 1) * compact.cols];
            full.data[k * compact.cols..(k + 1) * compact.cols].copy_from_slice(src);
        }
        full
    }

    /// Masked forward projection `M R x`: full-grid projection with only the
    /// kept rows returned when a mask is present.
    pub fn proj_forward(
        &mut self,
        x: NodeId,
        proj: Arc<ProjectorConfig>,
        mask: Option<Arc<SampleMask>>,
    ) -> Result<NodeId> {
        let img = self.image_from(x, &proj)?;
        let sino = proj.forward(&img)?;
        let sino = match &mask {
            Some(m) => apply_mask(&sino, m)?,
            None => sino,
        };
        let value = Tensor::from_sinogram(&sino);
        Ok(self.push(value, Op::ProjForward { x, proj, mask }))
    }

    /// Transpose of [`Self::proj_forward`]: embeds masked rows at zero and
    /// applies the full-grid adjoint.
    pub fn proj_adjoint(
        &mut self,
        y: NodeId,
        proj: Arc<ProjectorConfig>,
        mask: Option<Arc<SampleMask>>,
    ) -> Result<NodeId> {
        let vy = &self.nodes[y.0].value;
        let full = match &mask {
            Some(m) => {
                m.validate(proj.view_count())?;
                if vy.rows != m.len() {
                    return Err(invalid("masked sinogram row count mismatch"));
                }
                Self::embed_rows(vy, m, proj.view_count())
            }
            None => vy.clone(),
        };
        let sino = Sinogram::new(
            proj.angle_set().clone(),
            proj.det_count(),
            proj.det_spacing(),
            full.data,
        )?;
        let img = proj.adjoint(&sino)?;
        let value = Tensor::from_image(&img);
        Ok(self.push(value, Op::ProjAdjoint { y, proj, mask }))
    }

    /// Differentiable filtered backprojection of a full-grid sinogram,
    /// used as the unrolled model's initialization.
    pub fn fbp_init(
        &mut self,
        y: NodeId,
        proj: Arc<ProjectorConfig>,
        pad_factor: usize,
    ) -> Result<NodeId> {
        let sino = self.sinogram_from(y, &proj, None)?;
        let cfg = crate::classical::FbpConfig {
            filter: crate::classical::FbpFilter::Ramp,
            pad_factor,
        };
        let img = crate::classical::fbp(&cfg, &proj, &sino)?;
        let value = Tensor::from_image(&img);
        Ok(self.push(value, Op::FbpInit { y, proj, pad_factor }))
    }

    pub fn resample_bilinear(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if rows < 2 || cols < 2 {
            return Err(invalid("resample target must be at least 2x2"));
        }
        let vx = &self.nodes[x.0].value;
        let mut value = Tensor::zeros(vx.channels, rows, cols);
        for c in 0..vx.channels {
            let out = resample_plane(vx.channel(c), vx.rows, vx.cols, rows, cols);
            value.channel_mut(c).copy_from_slice(&out);
        }
        Ok(self.push(value, Op::ResampleBilinear { x, rows, cols }))
    }

    /// Reinterprets a node with new shape metadata (element count must
    /// match); gradients flow through unchanged.
    pub fn reshape(
        &mut self,
        x: NodeId,
        channels: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        if vx.len() != channels * rows * cols {
            return Err(invalid("reshape element count mismatch"));
        }
        let value = Tensor { channels, rows, cols, data: vx.data.clone() };
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Mean squared error between two same-shape tensors; the scalar loss
    /// node for `grad`.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(invalid("mse shape mismatch"));
        }
        let n = va.len() as f64;
        let mse =
            va.data.iter().zip(&vb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(mse), Op::MseLoss(a, b)))
    }

    /// Reverse-mode gradients of the scalar `loss` node with respect to every
    /// parameter leaf recorded on the tape.
    pub fn grad(&self, loss: NodeId) -> Result<ParamTree> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid("loss node must be scalar"));
        }
        let mut adjoints: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads = ParamTree::new();

        for id in (0..=loss.0).rev() {
            let Some(up) = adjoints[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Constant => {}
                Op::Param(name) =>

 {
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&up.data) {
                                *a += g;
                            }
                        }
                        None => grads.insert(name.clone(), up.data.clone())?,
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, up.clone());
                    accumulate(&mut adjoints, *b, up);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, up.clone());
                    accumulate(&mut adjoints, *b, negate(up));
                }
                Op::Scale { x, s } => {
                    let c = self.nodes[s.0].value.scalar_value();
                    let vx = &self.nodes[x.0].value;
                    let s_grad: f64 = up.data.iter().zip(&vx.data).map(|(g, v)| g * v).sum();
                    accumulate(&mut adjoints, *s, Tensor::scalar(s_grad));
                    accumulate(&mut adjoints, *x, scale_tensor(up, c));
                }
                Op::ScaleConst { x, c } => {
                    accumulate(&mut adjoints, *x, scale_tensor(up, *c));
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[x.0].value;
                    let data = up
                        .data
                        .iter()
                        .zip(&vx.data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut adjoints,
                        *x,
                        Tensor { channels: up.channels, rows: up.rows, cols: up.cols, data },
                    );
                }
                Op::ChannelMix { x, w, b } => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (out_ch, in_ch) = (vw.rows, vw.cols);
                    let plane = vx.plane();
                    let mut gx = Tensor::zeros(in_ch, vx.rows, vx.cols);
                    let mut gw = Tensor::zeros(1, out_ch, in_ch);
                    let mut gb = Tensor::zeros(1, 1, out_ch);
                    for o in 0..out_ch {
                        let gout = up.channel(o);
                        gb.data[o] = gout.iter().sum();
                        for i in 0..in_ch {
                            let wv = vw.data[o * in_ch + i];
                            let src = vx.channel(i);
                            let dst = gx.channel_mut(i);
                            let mut acc = 0.0;
                            for p in 0..plane {
                                dst[p] += wv * gout[p];
                                acc += gout[p] * src[p];
                            }
                            gw.data[o * in_ch + i] = acc;
                        }
                    }
                    accumulate(&mut adjoints, *x, gx);
                    accumulate(&mut adjoints, *w, gw);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::DiscoApply { x, coeffs, table, basis, in_ch, out_ch } => {
                    let kernel = self.kernel_from(*coeffs, basis, *in_ch, *out_ch)?;
                    let vx = &self.nodes[x.0].value;
                    let gx = table.input_gradient(&kernel, &up)?;
                    let gc = table.coeff_gradient(&kernel, vx, &up)?;
                    let coeff_grad = Tensor::from_data(1, 1, gc.len(), gc)?;
                    accumulate(&mut adjoints, *x, gx);
                    accumulate(&mut adjoints, *coeffs, coeff_grad);
                }
                Op::Down2(x) => {
                    let vx = &self.nodes[x.0].value;
                    let mut gx = Tensor::zeros(vx.channels, vx.rows, vx.cols);
                    for c in 0..vx.channels {
                        let gup = up.channel(c);
                        let dst = gx.channel_mut(c);
                        for j in 0..up.rows {
                            for i in 0..up.cols {
                                let g = 0.25 * gup[j * up.cols + i];
                                dst[(2 * j) * vx.cols + 2 * i] += g;
                                dst[(2 * j) * vx.cols + 2 * i + 1] += g;
                                dst[(2 * j + 1) * vx.cols + 2 * i] += g;
                                dst[(2 * j + 1) * vx.cols + 2 * i + 1] += g;
                            }
                        }
                    }
                    accumulate(&mut adjoints, *x, gx);
                }
                Op::Up2(x) => {
                    let vx = &self.nodes[x.0].value;
                    let mut gx = Tensor::zeros(vx.channels, vx.rows, vx.cols);
                    for c in 0..vx.channels {
                        let gup = up.channel(c);
                        let dst = gx.channel_mut(c);
                        for j in 0..up.rows {
                            for i in 0..up.cols {
                                dst[(j / 2) * vx.cols + i / 2] += gup[j * up.cols + i];
                            }
                        }
                    }
                    accumulate(&mut adjoints, *x, gx);
                }
                Op::FftR(x) => {
                    // y = G x with G the symmetric centered DFT;
                    // x̄ = Re(G ȳ_re) + Im(G ȳ_im).
                    let vx = &self.nodes[x.0].value;
                    let mut gx = Tensor::zeros(1, vx.rows, vx.cols);
                    for j in 0..vx.rows {
                        let re_row: Vec<Complex<f64>> = (0..vx.cols)
                            .map(|i| Complex::new(up.get(0, j, i), 0.0))
                            .collect();
                        let im_row: Vec<Complex<f64>> = (0..vx.cols)
                            .map(|i| Complex::new(up.get(1, j, i), 0.0))
                            .collect();
                        let t_re = centered_dft(&re_row);
                        let t_im = centered_dft(&im_row);
                        for i in 0..vx.cols {
                            gx.set(0, j, i, t_re[i].re + t_im[i].im);
                        }
                    }
                    accumulate(&mut adjoints, *x, gx);
                }
                Op::IfftR(x) => {
                    // y = Re(G⁻¹ z); with G⁻¹ = conj(G)/N symmetric:
                    // z̄ = (Re(G⁻¹ ȳ), -Im(G⁻¹ ȳ)).
                    let vx = &self.nodes[x.0].value;
                    let mut gx = Tensor::zeros(2, vx.rows, vx.cols);
                    for j in 0..vx.rows {
                        let row: Vec<Complex<f64>> = (0..vx.cols)
                            .map(|i| Complex::new(up.get(0, j, i), 0.0))
                            .collect();
                        let t = centered_idft(&row);
                        for i in 0..vx.cols {
                            gx.set(0, j, i, t[i].re);
                            gx.set(1, j, i, -t[i].im);
                        }
                    }
                    accumulate(&mut adjoints, *x, gx);
                }
                Op::ProjForward { x, proj, mask } => {
                    let full = match mask {
                        Some(m) => Self::embed_rows(&up, m, proj.view_count()),
                        None => up,
                    };
                    let sino = Sinogram::new(
                        proj.angle_set().clone(),
                        proj.det_count(),
                        proj.det_spacing(),
                        full.data,
                    )?;
                    let img = proj.adjoint(&sino)?;
                    accumulate(&mut adjoints, *x, Tensor::from_image(&img));
                }
                Op::ProjAdjoint { y, proj, mask } => {
                    let img = Image::new(
                        proj.image_width(),
                        proj.image_height(),
                        proj.spacing(),
                        up.data,
                    )?;
                    let sino = proj.forward(&img)?;
                    let sino = match mask {
                        Some(m) => apply_mask(&sino, m)?,
                        None => sino,
                    };
                    accumulate(&mut adjoints, *y, Tensor::from_sinogram(&sino));
                }
                Op::FbpInit { y, proj, pad_factor } => {
                    // FBP = c A* F with F the (symmetric) ramp convolution,
                    // so FBPᵀ = c F A.
                    let img = Image::new(
                        proj.image_width(),
                        proj.image_height(),
                        proj.spacing(),
                        up.data,
                    )?;
                    let sino = proj.forward(&img)?;
                    let filtered = crate::classical::ramp_filter_rows(&sino, *pad_factor);
                    let views = proj.view_count() as f64;
                    let scale = std::f64::consts::PI * proj.det_spacing()
                        / (views * proj.spacing() * proj.spacing());
                    let mut gy = Tensor::from_sinogram(&filtered);
                    for v in gy.data.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut adjoints, *y, gy);
                }
                Op::ResampleBilinear { x, rows, cols } => {
                    let vx = &self.nodes[x.0].value;
                    let mut gx = Tensor::zeros(vx.channels, vx.rows, vx.cols);
                    for c in 0..vx.channels {
                        let g = resample_plane_transpose(
                            up.channel(c),
                            vx.rows,
                            vx.cols,
                            *rows,
                            *cols,
                        );
                        gx.channel_mut(c).copy_from_slice(&g);
                    }
                    accumulate(&mut adjoints, *x, gx);
                }
                Op::Reshape(x) => {
                    let vx = &self.nodes[x.0].value;
                    let gx = Tensor {
                        channels: vx.channels,
                        rows: vx.rows,
                        cols: vx.cols,
                        data: up.data,
                    };
                    accumulate(&mut adjoints, *x, gx);
                }
                Op::MseLoss(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let g = up.scalar_value();
                    let n = va.len() as f64;
                    let diff: Vec<f64> = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| 2.0 * g * (x - y) / n)
                        .collect();
                    let ga = Tensor {
                        channels: va.channels,
                        rows: va.rows,
                        cols: va.cols,
                        data: diff.clone(),
                    };
                    let gb = Tensor {
                        channels: va.channels,
                        rows: va.rows,
                        cols: va.cols,
                        data: diff.into_iter().map(|d| -d).collect(),
                    };
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, grad: Tensor) {
    match &mut adjoints[id.0] {
        Some(existing) => {
            debug_assert!(existing.same_shape(&grad));
            for (e, g) in existing.data.iter_mut().zip(&grad.data) {
                *e += g;
            }
        }
        slot => *slot = Some(grad),
    }
}

fn negate(mut t: Tensor) -> Tensor {
    for v in t.data.iter_mut() {
        *v = -*v;
    }
    t
}

fn scale_tensor(mut t: Tensor, c: f64) -> Tensor {
    for v in t.data.iter_mut() {
        *v *= c;
    }
    t
}

/// Convenience: the error raised when a tape op is asked for an unsupported
/// configuration ends up as `Internal` so callers can distinguish tape bugs
/// from user input problems.
pub fn internal(msg: impl Into<String>) -> Error {
    Error::Internal(msg.into())
}
