//! Model assembly: sinogram operator, unrolled cascades, reconstruction
//! entry points and zero-shot super-resolution.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamTree, Tape};
use crate::error::{invalid, Result};
use crate::grid::{AngleSet, Image, SampleMask, Sinogram};
use crate::projector::ProjectorConfig;
use crate::tensor::Tensor;

use super::udno::{ParamBinder, TableCache, UdnoNet};
use super::{CtoConfig, UdnoConfig};

/// How image-space kernels transfer to a finer inference grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuperresKernels {
    /// Re-discretize the function-space kernels on the fine grid (same
    /// physical cutoff, more taps).
    Rediscretize,
    /// Ablation: keep the trained pixel support and weights, shrinking the
    /// physical receptive field (what a pixel-space convolution does).
    FixedPixel,
}

/// Runtime model: configuration, full-acquisition projector and the
/// per-operator discretization tables.
pub struct CtoModel {
    cfg: CtoConfig,
    proj: Arc<ProjectorConfig>,
    nos_spatial: UdnoNet,
    nos_freq: UdnoNet,
    noi: Vec<UdnoNet>,
}

impl CtoModel {
    pub fn new(cfg: CtoConfig) -> Result<Self> {
        cfg.validate()?;
        let proj = Arc::new(ProjectorConfig::new(
            cfg.image_size,
            cfg.image_size,
            cfg.image_spacing,
            AngleSet::uniform(cfg.full_views, std::f64::consts::PI)?,
            cfg.det_count,
            cfg.det_spacing,
            cfg.step_fraction,
        )?);
        let mut cache = TableCache::default();
        let nos_spatial = UdnoNet::new(
            &cfg.nos_spatial,
            "nos.spatial",
            cfg.full_views,
            cfg.det_count,
            &mut cache,
        )?;
        let nos_freq =
            UdnoNet::new(&cfg.nos_freq, "nos.freq", cfg.full_views, cfg.det_count, &mut cache)?;
        let noi = (0..cfg.cascades)
            .map(|t| {
                UdnoNet::new(
                    &cfg.noi,
                    format!("cascade{t}.noi"),
                    cfg.image_size,
                    cfg.image_size,
                    &mut cache,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, proj, nos_spatial, nos_freq, noi })
    }

    pub fn config(&self) -> &CtoConfig {
        &self.cfg
    }

    /// Full-acquisition projector (all views).
    pub fn projector(&self) -> &Arc<ProjectorConfig> {
        &self.proj
    }

    pub fn nos_spatial(&self) -> &UdnoNet {
        &self.nos_spatial
    }

    pub fn nos_freq(&self) -> &UdnoNet {
        &self.nos_freq
    }

    pub fn noi(&self, cascade: usize) -> &UdnoNet {
        &self.noi[cascade]
    }

    /// Parameter leaves with correct shapes, all zeros (and η/λ zero).
    /// Used for structural validation and as a deterministic template.
    pub fn param_template(&self) -> Result<ParamTree> {
        use rand::SeedableRng;
        let mut params = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.nos_spatial.init_params(&mut params, &mut rng)?;
        self.nos_freq.init_params(&mut params, &mut rng)?;
        for net in &self.noi {
            net.init_params(&mut params, &mut rng)?;
        }
        for t in 0..self.cfg.cascades {
            params.insert(format!("cascade{t}.eta"), vec![0.0])?;
            params.insert(format!("cascade{t}.lambda"), vec![0.0])?;
        }
        Ok(params.zeros_like())
    }

    /// Fresh random parameters. The data-consistency weight starts at
    /// `0.5 / ||A||²` (power-iteration estimate) unless pinned in the
    /// config, keeping the first unrolled step contractive.
    pub fn init_params(&self, seed: u64) -> Result<ParamTree> {
        use rand::SeedableRng;
        let mut params = ParamTree::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.nos_spatial.init_params(&mut params, &mut rng)?;
        self.nos_freq.init_params(&mut params, &mut rng)?;
        for net in &self.noi {
            net.init_params(&mut params, &mut rng)?;
        }
        let eta0 = match self.cfg.eta_init {
            Some(e) => e,
            None => 0.5 / self.proj.norm_squared_estimate(20, 7)?.max(1e-12),
        };
        for t in 0..self.cfg.cascades {
            params.insert(format!("cascade{t}.eta"), vec![eta0])?;
            params.insert(format!("cascade{t}.lambda"), vec![self.cfg.lambda_init])?;
        }
        Ok(params)
    }

    /// Ties reflection-paired slots in both sinogram branches, making NO_s
    /// equivariant under flip-aware view shifts.
    pub fn symmetrize_sinogram_kernels(&self, params: &mut ParamTree) -> Result<()> {
        self.nos_spatial.symmetrize_kernels(params)?;
        self.nos_freq.symmetrize_kernels(params)
    }

    /// Zero-fills a (possibly subsampled) sinogram onto the full acquisition
    /// grid and recovers the view mask.
    pub fn embed_input(&self, sino: &Sinogram) -> Result<(Tensor, Arc<SampleMask>)> {
        if sino.det_count() != self.cfg.det_count {
            return Err(invalid(format!(
                "sinogram has {} detectors, model expects {}",
                sino.det_count(),
                self.cfg.det_count
            )));
        }
        if sino.det_spacing().to_bits() != self.cfg.det_spacing.to_bits() {
            return Err(invalid("sinogram detector spacing does not match the model"));
        }
        let mask = SampleMask::match_subset(self.proj.angle_set(), sino.angle_set())?;
        let mut full = Tensor::zeros(1, self.cfg.full_views, self.cfg.det_count);
        for (row, &k) in mask.kept_indices().iter().enumerate() {
            full.data[k * self.cfg.det_count..(k + 1) * self.cfg.det_count]
                .copy_from_slice(sino.row(row));
        }
        Ok((full, Arc::new(mask)))
    }

    /// Sinogram-space operator: mean of the spatial branch and the
    /// detector-frequency branch.
    pub fn nos_forward_tape(
        &self,
        tape: &mut Tape,
        binder: &ParamBinder,
        sino_full: NodeId,
    ) -> Result<NodeId> {
        let spatial = self.nos_spatial.forward(tape, binder, sino_full)?;
        let spectrum = tape.fft_r(sino_full)?;
        let freq = self.nos_freq.forward(tape, binder, spectrum)?;
        let freq_sino = tape.ifft_r(freq)?;
        let sum = tape.add(spatial, freq_sino)?;
        tape.scale_const(sum, 0.5)
            .pipe_ok()
    }

    /// One unrolled cascade:
    /// `x - η_t A*(A x - p̃) + λ_t NO_i(x)`.
    #[allow(clippy::too_many_arguments)]
    fn cascade_step(
        &self,
        tape: &mut Tape,
        binder: &ParamBinder,
        t: usize,
        x: NodeId,
        measured: NodeId,
        proj: &Arc<ProjectorConfig>,
        mask: &Arc<SampleMask>,
        noi: &UdnoNet,
    ) -> Result<NodeId> {
        let ax = tape.proj_forward(x, proj.clone(), Some(mask.clone()))?;
        let resid = tape.sub(ax, measured)?;
        let back = tape.proj_adjoint(resid, proj.clone(), Some(mask.clone()))?;
        let eta = binder.get(&format!("cascade{t}.eta"))?;
        let lambda = binder.get(&format!("cascade{t}.lambda"))?;
        let dc = tape.scale(back, eta)?;
        let x_dc = tape.sub(x, dc)?;
        let refined = noi.forward(tape, binder, x)?;
        let reg = tape.scale(refined, lambda)?;
        tape.add(x_dc, reg)
    }

    /// Records the full reconstruction onto `tape` and returns the output
    /// image node. Accepts any view subset of the configured acquisition.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParamTree,
        sino: &Sinogram,
    ) -> Result<NodeId> {
        let binder = ParamBinder::bind(tape, params);
        self.assemble(tape, &binder, sino, &self.noi, None)
    }

    fn assemble(
        &self,
        tape: &mut Tape,
        binder: &ParamBinder,
        sino: &Sinogram,
        noi_nets: &[UdnoNet],
        fine: Option<&Arc<ProjectorConfig>>,
    ) -> Result<NodeId> {
        let (full, mask) = self.embed_input(sino)?;
        let sino_full = tape.constant(full);
        let estimate = self.nos_forward_tape(tape, binder, sino_full)?;
        let mut x = tape.fbp_init(estimate, self.proj.clone(), self.cfg.fbp_pad_factor)?;
        let cascade_proj = match fine {
            Some(p) => {
                let target = p.image_height();
                x = tape.resample_bilinear(x, target, p.image_width())?;
                p.clone()
            }
            None => self.proj.clone(),
        };
        let measured = tape.constant(Tensor::from_sinogram(sino));
        for (t, noi) in noi_nets.iter().enumerate() {
            x = self.cascade_step(tape, binder, t, x, measured, &cascade_proj, &mask, noi)?;
        }
        Ok(x)
    }

    /// End-to-end reconstruction at the training resolution.
    pub fn reconstruct(&self, params: &ParamTree, sino: &Sinogram) -> Result<Image> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, params, sino)?;
        tape.value(out).clone().into_image(self.cfg.image_spacing)
    }

    /// Zero-shot super-resolution: the sinogram operator and initialization
    /// run at the training resolution, the intermediate image is bilinearly
    /// upsampled by `scale`, and the cascades run on the fine grid with a
    /// matching projector. Kernel transfer follows `kernels`.
    pub fn reconstruct_superres(
        &self,
        params: &ParamTree,
        sino: &Sinogram,
        scale: usize,
        kernels: SuperresKernels,
    ) -> Result<Image> {
        if scale < 2 {
            return Err(invalid("super-resolution scale must be at least 2"));
        }
        let fine_size = self.cfg.image_size * scale;
        let fine_spacing = self.cfg.image_spacing / scale as f64;
        let fine_proj = Arc::new(ProjectorConfig::new(
            fine_size,
            fine_size,
            fine_spacing,
            self.proj.angle_set().clone(),
            self.cfg.det_count,
            self.cfg.det_spacing,
            self.cfg.step_fraction,
        )?);
        let noi_cfg = match kernels {
            SuperresKernels::Rediscretize => self.cfg.noi.clone(),
            SuperresKernels::FixedPixel => UdnoConfig {
                cutoff: self.cfg.noi.cutoff / scale as f64,
                ..self.cfg.noi.clone()
            },
        };
        let mut cache = TableCache::default();
        let noi_fine = (0..self.cfg.cascades)
            .map(|t| {
                UdnoNet::new(&noi_cfg, format!("cascade{t}.noi"), fine_size, fine_size, &mut cache)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let mut binder = ParamBinder::bind(&mut tape, params);
        if kernels == SuperresKernels::FixedPixel {
            // Keeping the pixel stencil constant means keeping the discrete
            // weights θ·κ·q constant; q shrinks by scale², so the
            // coefficients grow by scale² to compensate.
            let gain = (scale * scale) as f64;
            let names: Vec<String> = params
                .iter()
                .filter(|(name, _)| name.contains(".noi.") && name.ends_with(".disco"))
                .map(|(name, _)| name.to_string())
                .collect();
            for name in names {
                let values = params.get(&name).unwrap();
                let scaled: Vec<f64> = values.iter().map(|v| v * gain).collect();
                let t = Tensor::from_data(1, 1, scaled.len(), scaled)?;
                binder.override_leaf(&mut tape, &name, t);
            }
        }
        let out = self.assemble(&mut tape, &binder, sino, &noi_fine, Some(&fine_proj))?;
        tape.value(out).clone().into_image(fine_spacing)
    }
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl PipeOk for NodeId {}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::ParamTree;
    use crate::grid::apply_mask;
    use crate::model::PadPolicy;
    use crate::phantom::{rasterize, PhantomSpec};
    use rand::{Rng, SeedableRng};

    /// Parameters that make one UDNO the exact identity map: the first
    /// encoder block splits each input channel into (+x, -x), every later
    /// touched block is a delta kernel, the deep path is zeroed, and the
    /// head recombines relu(x) - relu(-x) = x.
    pub fn set_identity_params(net: &UdnoNet, params: &mut ParamTree) {
        let cfg = net.config().clone();
        assert!(cfg.hidden >= 2 * cfg.in_channels && cfg.in_channels == cfg.out_channels);
        let l = net.basis().len();
        let c = cfg.hidden;
        // Delta kernels need the isotropic hat to cover only the self tap.
        assert_eq!(net.level_table(0).stencil_size().map(|_| ()), Some(()));
        let grid_rows = net.level_table(0).in_grid.rows;
        let grid_cols = net.level_table(0).in_grid.cols;
        let q = 1.0 / (grid_rows as f64 * grid_cols as f64);
        let delta = 1.0 / q;
        let prefix = net.prefix().to_string();

        let set = |params: &mut ParamTree, name: String, values: Vec<f64>| {
            let leaf = params.get_mut(&name).expect("leaf exists");
            assert_eq!(leaf.len(), values.len(), "{name}");
            leaf.copy_from_slice(&values);
        };

        // enc0.b0: disco (in -> hidden) splits channels into +/- pairs.
        let mut coeffs = vec![0.0; c * cfg.in_channels * l];
        for ch in 0..cfg.in_channels {
            coeffs[((2 * ch) * cfg.in_channels + ch) * l] = delta;
            coeffs[((2 * ch + 1) * cfg.in_channels + ch) * l] = -delta;
        }
        set(params, format!("{prefix}.enc0.b0.disco"), coeffs);
        let mut eye = vec![0.0; c * c];
        for k in 0..c {
            eye[k * c + k] = 1.0;
        }
        set(params, format!("{prefix}.enc0.b0.mix_w"), eye.clone());

        // enc0.b1 and both dec0 blocks: per-channel delta kernels.
        let mut keep = vec![0.0; c * c * l];
        for k in 0..c {
            keep[(k * c + k) * l] = delta;
        }
        for name in ["enc0.b1", "dec0.b0", "dec0.b1"] {
            set(params, format!("{prefix}.{name}.disco"), keep.clone());
            set(params, format!("{prefix}.{name}.mix_w"), eye.clone());
        }

        // Head: out_c = relu(x_c) - relu(-x_c).
        let mut head = vec![0.0; cfg.out_channels * c];
        for ch in 0..cfg.out_channels {
            head[ch * c + 2 * ch] = 1.0;
            head[ch * c + 2 * ch + 1] = -1.0;
        }
        set(params, format!("{prefix}.head_w"), head);
        // Every other leaf of this net stays zero (deep path contributes
        // nothing); callers start from a zeroed tree.
    }

    fn mini_model() -> CtoModel {
        CtoModel::new(CtoConfig::mini()).unwrap()
    }

    #[test]
    fn zero_everything_reconstructs_zero() {
        let model = mini_model();
        let params = model.param_template().unwrap();
        let sino = Sinogram::zeros(
            model.projector().angle_set().clone(),
            model.config().det_count,
            model.config().det_spacing,
        )
        .unwrap();
        let img = model.reconstruct(&params, &sino).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_fixed_across_view_counts() {
        let model = mini_model();
        let params = model.init_params(11).unwrap();
        let phantom = rasterize(
            &PhantomSpec::shepp_logan(),
            model.config().image_size,
            model.config().image_size,
            model.config().image_spacing,
        )
        .unwrap();
        let full = model.projector().forward(&phantom).unwrap();
        for views in [15usize, 30, 60] {
            let mask = SampleMask::uniform_stride(60, views).unwrap();
            let sub = apply_mask(&full, &mask).unwrap();
            let img = model.reconstruct(&params, &sub).unwrap();
            assert_eq!((img.width(), img.height()), (64, 64));
        }
    }

    #[test]
    fn unknown_angles_rejected() {
        let model = mini_model();
        let params = model.param_template().unwrap();
        let alien = Sinogram::zeros(
            AngleSet::uniform(45, std::f64::consts::PI).unwrap(),
            model.config().det_count,
            model.config().det_spacing,
        )
        .unwrap();
        assert!(model.reconstruct(&params, &alien).is_err());
    }

    #[test]
    fn nos_identity_params_pass_input_through() {
        let model = mini_model();
        let mut params = model.param_template().unwrap();
        tests_helpers::seed_eta_lambda(&mut params, model.config().cascades, 0.0, 0.0);
        set_identity_params(model.nos_spatial(), &mut params);
        set_identity_params(model.nos_freq(), &mut params);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> =
            (0..60 * 96).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
        let input = Tensor::from_data(1, 60, 96, data).unwrap();
        let mut tape = Tape::new();
        let binder = ParamBinder::bind(&mut tape, &params);
        let sino_node = tape.constant(input.clone());
        let out = model.nos_forward_tape(&mut tape, &binder, sino_node).unwrap();
        let v = tape.value(out);
        let max_diff = v
            .data
            .iter()
            .zip(&input.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "identity branches drifted {max_diff}");
    }

    #[test]
    fn nos_zero_spatial_identity_freq_halves_input() {
        let model = mini_model();
        let mut params = model.param_template().unwrap();
        set_identity_params(model.nos_freq(), &mut params);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..60 * 96).map(|_| rng.random::<f64>()).collect();
        let input = Tensor::from_data(1, 60, 96, data).unwrap();
        let mut tape = Tape::new();
        let binder = ParamBinder::bind(&mut tape, &params);
        let sino_node = tape.constant(input.clone());
        let out = model.nos_forward_tape(&mut tape, &binder, sino_node).unwrap();
        let v = tape.value(out);
        for (a, b) in v.data.iter().zip(&input.data) {
            assert!((a - 0.5 * b).abs() < 1e-9, "{a} vs {}", 0.5 * b);
        }
    }

    #[test]
    fn zero_dc_and_reg_keep_initialization() {
        let model = mini_model();
        let mut params = model.init_params(5).unwrap();
        tests_helpers::seed_eta_lambda(&mut params, model.config().cascades, 0.0, 0.0);
        let phantom = rasterize(&PhantomSpec::disk(0.6, 0.5), 64, 64, 2.0 / 64.0).unwrap();
        let sino = model.projector().forward(&phantom).unwrap();
        // Cascades are inert, so the output equals the FBP initialization of
        // the sinogram-operator estimate.
        let mut tape = Tape::new();
        let binder = ParamBinder::bind(&mut tape, &params);
        let (full, _) = model.embed_input(&sino).unwrap();
        let node = tape.constant(full);
        let est = model.nos_forward_tape(&mut tape, &binder, node).unwrap();
        let x0 = tape.fbp_init(est, model.projector().clone(), 2).unwrap();
        let expected = tape.value(x0).clone();
        let out = model.reconstruct(&params, &sino).unwrap();
        for (a, b) in out.values().iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_dc_step_reduces_residual() {
        let model = mini_model();
        let mut params = model.param_template().unwrap();
        let norm2 = model.projector().norm_squared_estimate(20, 3).unwrap();
        tests_helpers::seed_eta_lambda(&mut params, model.config().cascades, 0.1 / norm2, 0.0);
        let phantom = rasterize(&PhantomSpec::shepp_logan(), 64, 64, 2.0 / 64.0).unwrap();
        let full = model.projector().forward(&phantom).unwrap();
        let mask = SampleMask::uniform_stride(60, 30).unwrap();
        let sub = apply_mask(&full, &mask).unwrap();
        let proj_sub = model.projector().restricted(&mask).unwrap();
        // With zero parameters the initialization is zero, so one cascade is
        // a pure gradient step from zero toward the data.
        let out = model.reconstruct(&params, &sub).unwrap();
        let resid_before: f64 = sub.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let fwd = proj_sub.forward(&out).unwrap();
        let resid_after: f64 = fwd
            .values()
            .iter()
            .zip(sub.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            resid_after <= resid_before,
            "dc step increased residual: {resid_before} -> {resid_after}"
        );
    }

    #[test]
    fn superres_with_inert_cascades_is_upsampled_initialization() {
        let model = mini_model();
        let mut params = model.init_params(9).unwrap();
        tests_helpers::seed_eta_lambda(&mut params, model.config().cascades, 0.0, 0.0);
        let phantom = rasterize(&PhantomSpec::disk(0.5, 0.4), 64, 64, 2.0 / 64.0).unwrap();
        let sino = model.projector().forward(&phantom).unwrap();
        let base = model.reconstruct(&params, &sino).unwrap();
        let fine = model
            .reconstruct_superres(&params, &sino, 2, SuperresKernels::Rediscretize)
            .unwrap();
        let expected = crate::grid::resample_bilinear(&base, 128, 128).unwrap();
        for (a, b) in fine.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn superres_kernel_support_scales_with_grid() {
        let model = mini_model();
        let base_taps = model.noi(0).level_table(0).stencil_size().unwrap();
        let mut cache = TableCache::default();
        let fine_net =
            UdnoNet::new(&model.config().noi, "probe", 128, 128, &mut cache).unwrap();
        let fine_taps = fine_net.level_table(0).stencil_size().unwrap();
        let ratio = fine_taps as f64 / base_taps as f64;
        assert!(
            ratio > 3.0 && ratio < 5.0,
            "pixel support should quadruple at 2x resolution, got {ratio}"
        );
    }

    pub(crate) mod tests_helpers {
        use crate::autodiff::ParamTree;

        pub fn seed_eta_lambda(params: &mut ParamTree, cascades: usize, eta: f64, lambda: f64) {
            for t in 0..cascades {
                params.get_mut(&format!("cascade{t}.eta")).unwrap()[0] = eta;
                params.get_mut(&format!("cascade{t}.lambda")).unwrap()[0] = lambda;
            }
        }
    }
}
