//! The unrolled neural-operator reconstruction model (CTO): a sinogram-space
//! operator with spatial and frequency branches, followed by cascades that
//! alternate an image-space operator with a data-consistency step,
//!
//! `x^{t+1} = x^t - η^t A*(A x^t - p̃) + λ^t NO_i(x^t)`.
//!
//! Every convolution is a DISCO layer whose kernel lives in function space,
//! so the same parameters discretize onto any grid: different view counts
//! enter through the sampling mask, and finer image grids through kernel
//! re-discretization.

mod cto;
mod io;
mod train;
mod udno;

pub use cto::{CtoModel, SuperresKernels};
pub use io::{load_model, save_model};
pub use train::{random_phantom_spec, train, TrainConfig, TrainHistory, TrainSample};
pub use udno::{ParamBinder, UdnoNet};

use serde::{Deserialize, Serialize};

use crate::disco::{BasisConfig, PadKind, PadSpec};
use crate::error::{invalid, Result};

/// Which boundary policy a UDNO applies on its grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    /// Zero padding on both Cartesian image axes.
    Image,
    /// Flip-aware circular wrap along the view angle, mirror along the
    /// detector: the rotation-equivariant sinogram policy.
    Sinogram,
    /// Ablation: plain zero padding along the view angle, mirror along the
    /// detector.
    SinogramZeroTheta,
}

impl PadPolicy {
    pub fn pad_spec(self) -> PadSpec {
        match self {
            PadPolicy::Image => PadSpec::ZERO,
            PadPolicy::Sinogram => PadSpec::SINOGRAM,
            PadPolicy::SinogramZeroTheta => PadSpec { row: PadKind::Zero, col: PadKind::Reflect },
        }
    }
}

/// U-shaped DISCO network configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdnoConfig {
    /// Encoder-decoder pooling depth; grid dimensions must divide `2^levels`.
    pub levels: usize,
    /// Hidden channel width.
    pub hidden: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub cutoff: f64,
    pub rings: usize,
    pub per_ring: usize,
    pub pad: PadPolicy,
}

impl UdnoConfig {
    pub fn basis_config(&self) -> BasisConfig {
        BasisConfig { cutoff: self.cutoff, rings: self.rings, per_ring: self.per_ring }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("udno needs at least one level"));
        }
        if self.hidden == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid("udno channel counts must be positive"));
        }
        if !(self.cutoff > 0.0) {
            return Err(invalid("udno cutoff must be positive"));
        }
        Ok(())
    }
}

/// Full model configuration: acquisition geometry plus the three operator
/// families and the unrolling depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtoConfig {
    /// Square reconstruction grid edge length.
    pub image_size: usize,
    pub image_spacing: f64,
    /// Full acquisition view count over `[0, π)`; subsampled inputs are
    /// zero-filled onto this grid before the sinogram operator.
    pub full_views: usize,
    pub det_count: usize,
    pub det_spacing: f64,
    pub step_fraction: f64,
    pub cascades: usize,
    pub nos_spatial: UdnoConfig,
    pub nos_freq: UdnoConfig,
    pub noi: UdnoConfig,
    pub fbp_pad_factor: usize,
    /// Initial data-consistency weight; `None` derives `0.5 / ||A||^2` from
    /// a power-iteration estimate at parameter-initialization time.
    pub eta_init: Option<f64>,
    pub lambda_init: f64,
}

impl CtoConfig {
    /// Desk-scale configuration: 64x64 images, 60-view acquisition with 96
    /// detectors, 2-level UDNOs with 8 hidden channels.
    pub fn mini() -> Self {
        let size = 64usize;
        let spacing = 2.0 / size as f64;
        let det_count = 96usize;
        let diagonal = (2.0f64).sqrt() * size as f64 * spacing;
        let sino_udno = UdnoConfig {
            levels: 2,
            hidden: 8,
            in_channels: 1,
            out_channels: 1,
            cutoff: 0.05,
            rings: 5,
            per_ring: 7,
            pad: PadPolicy::Sinogram,
        };
        Self {
            image_size: size,
            image_spacing: spacing,
            full_views: 60,
            det_count,
            det_spacing: diagonal / det_count as f64,
            step_fraction: 0.5,
            cascades: 3,
            nos_spatial: sino_udno.clone(),
            nos_freq: UdnoConfig { in_channels: 2, out_channels: 2, ..sino_udno.clone() },
            noi: UdnoConfig { pad: PadPolicy::Image, ..sino_udno },
            fbp_pad_factor: 2,
            eta_init: None,
            lambda_init: 1.0,
        }
    }

    /// Full-scale configuration matching the published acquisition layout:
    /// 256x256 images, 720 views, 300 detectors, 4-level 32-channel UDNOs
    /// with cutoff 0.02. Not exercised by the test gates.
    pub fn full_scale() -> Self {
        let size = 256usize;
        let spacing = 2.0 / size as f64;
        let det_count = 300usize;
        let diagonal = (2.0f64).sqrt() * size as f64 * spacing;
        let sino_udno = UdnoConfig {
            levels: 4,
            hidden: 32,
            in_channels: 1,
            out_channels: 1,
            cutoff: 0.02,
            rings: 5,
            per_ring: 7,
            pad: PadPolicy::Sinogram,
        };
        Self {
            image_size: size,
            image_spacing: spacing,
            full_views: 720,
            det_count,
            det_spacing: diagonal / det_count as f64,
            step_fraction: 0.5,
            cascades: 3,
            nos_spatial: sino_udno.clone(),
            nos_freq: UdnoConfig { in_channels: 2, out_channels: 2, ..sino_udno.clone() },
            noi: UdnoConfig { pad: PadPolicy::Image, ..sino_udno },
            fbp_pad_factor: 2,
            eta_init: None,
            lambda_init: 1.0,
        }
    }

    /// Same model with plain zero padding along the view axis (the
    /// rotation-equivariance ablation).
    pub fn with_zero_theta_padding(mut self) -> Self {
        self.nos_spatial.pad = PadPolicy::SinogramZeroTheta;
        self.nos_freq.pad = PadPolicy::SinogramZeroTheta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || self.det_count == 0 || self.full_views == 0 {
            return Err(invalid("degenerate model geometry"));
        }
        if self.cascades == 0 {
            return Err(invalid("model needs at least one cascade"));
        }
        if self.fbp_pad_factor < 2 {
            return Err(invalid("fbp pad factor must be at least 2"));
        }
        self.nos_spatial.validate()?;
        self.nos_freq.validate()?;
        self.noi.validate()?;
        for (name, udno, rows, cols) in [
            ("nos_spatial", &self.nos_spatial, self.full_views, self.det_count),
            ("nos_freq", &self.nos_freq, self.full_views, self.det_count),
            ("noi", &self.noi, self.image_size, self.image_size),
        ] {
            let div = 1usize << udno.levels;
            if rows % div != 0 || cols % div != 0 {
                return Err(invalid(format!(
                    "{name}: grid {rows}x{cols} not divisible by 2^levels = {div}"
                )));
            }
        }
        if self.nos_spatial.in_channels != 1
            || self.nos_spatial.out_channels != 1
            || self.nos_freq.in_channels != 2
            || self.nos_freq.out_channels != 2
            || self.noi.in_channels != 1
            || self.noi.out_channels != 1
        {
            return Err(invalid("operator channel counts are fixed by the architecture"));
        }
        Ok(())
    }

    /// Canonical text form embedded in model files.
    pub fn to_canonical_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| crate::error::Error::Format(e.to_string()))
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let cfg: CtoConfig =
            toml::from_str(text).map_err(|e| crate::error::Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
