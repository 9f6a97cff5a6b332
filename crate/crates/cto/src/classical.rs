//! Learning-free reconstruction baselines: filtered backprojection and SART.

use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::error::{invalid, Result};
use crate::fourier::fft_inplace;
use crate::grid::{Image, Sinogram};
use crate::projector::ProjectorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    /// `H(ν) = |ν|` in the detector frequency domain.
    Ramp,
    /// Plain normalized backprojection, no filtering.
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct FbpConfig {
    pub filter: FbpFilter,
    /// Rows are zero-padded to `pad_factor * det_count`, rounded up to a
    /// power of two, before filtering.
    pub pad_factor: usize,
}

impl Default for FbpConfig {
    fn default() -> Self {
        Self { filter: FbpFilter::Ramp, pad_factor: 2 }
    }
}

impl FbpConfig {
    fn validate(&self) -> Result<()> {
        if self.pad_factor < 2 {
            return Err(invalid("fbp pad factor must be at least 2"));
        }
        Ok(())
    }
}

/// Ramp-filters each sinogram row in the frequency domain.
///
/// The padded row is transformed, multiplied by `|ν|` in physical units
/// (cycles per length), inverse transformed and cropped. Combined with the
/// `1/P` inverse normalization this approximates the continuous filtered
/// projection `∫ |ν| P(ν) exp(2πiνr) dν`.
pub fn ramp_filter_rows(sino: &Sinogram, pad_factor: usize) -> Sinogram {
    let det = sino.det_count();
    let padded = (pad_factor * det).next_power_of_two();
    let filter = ramp_response(padded, sino.det_spacing());
    let mut out = sino.clone();
    out.values_mut().par_chunks_mut(det).for_each(|row| {
        let filtered = filter_padded_row(row, &filter);
        row.copy_from_slice(&filtered[..det]);
    });
    out
}

/// `|ν|` on the padded FFT frequency grid, in cycles per length.
pub(crate) fn ramp_response(padded: usize, det_spacing: f64) -> Vec<f64> {
    (0..padded)
        .map(|q| {
            let idx = if q <= padded / 2 { q } else { padded - q };
            idx as f64 / (padded as f64 * det_spacing)
        })
        .collect()
}

/// Zero-pads one row to the response length, filters in frequency and
/// returns the full padded spatial result.
pub(crate) fn filter_padded_row(row: &[f64], response: &[f64]) -> Vec<f64> {
    let padded = response.len();
    let mut buf = vec![Complex::new(0.0, 0.0); padded];
    for (b, &v) in buf.iter_mut().zip(row.iter()) {
        *b = Complex::new(v, 0.0);
    }
    fft_inplace(&mut buf, false);
    for (b, &h) in buf.iter_mut().zip(response) {
        *b *= h;
    }
    fft_inplace(&mut buf, true);
    let scale = 1.0 / padded as f64;
    buf.iter().map(|b| b.re * scale).collect()
}

/// Filtered backprojection.
///
/// Backprojection runs through the projector adjoint; the quadrature
/// constant `π · det_spacing / (views · spacing²)` makes the composition
/// approximate the continuous inverse Radon transform (the adjoint carries
/// a factor `spacing² / det_spacing` per view, and the angular integral over
/// `[0, π)` contributes `π / views`).
pub fn fbp(cfg: &FbpConfig, proj: &ProjectorConfig, sino: &Sinogram) -> Result<Image> {
    cfg.validate()?;
    proj.check_sinogram(sino)?;
    let filtered = match cfg.filter {
        FbpFilter::Ramp => ramp_filter_rows(sino, cfg.pad_factor),
        FbpFilter::None => sino.clone(),
    };
    let mut img = proj.adjoint(&filtered)?;
    let views = proj.view_count() as f64;
    let scale =
        std::f64::consts::PI * proj.det_spacing() / (views * proj.spacing() * proj.spacing());
    for v in img.values_mut() {
        *v *= scale;
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy)]
pub struct SartConfig {
    pub iterations: usize,
    pub relaxation: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for SartConfig {
    fn default() -> Self {
        // One initial sweep plus four refinements; relaxation matches the
        // common library default; clip bounds are the valid attenuation
        // range for per-cm tissue values.
        Self { iterations: 5, relaxation: 0.15, clip_min: 0.0, clip_max: 0.549 }
    }
}

impl SartConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(invalid("sart needs at least one sweep"));
        }
        if !(self.relaxation >= 0.0 && self.relaxation < 2.0) {
            return Err(invalid("sart relaxation must lie in [0, 2)"));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(invalid("sart clip range is empty"));
        }
        Ok(())
    }
}

/// Simultaneous algebraic reconstruction: per view, relaxed row-normalized
/// residual updates in ascending angle order, clipping after every sweep.
pub fn sart(
    cfg: &SartConfig,
    proj: &ProjectorConfig,
    sino: &Sinogram,
    init: Option<&Image>,
) -> Result<Image> {
    cfg.validate()?;
    proj.check_sinogram(sino)?;
    let mut x = match init {
        Some(img) => {
            proj.check_image(img)?;
            img.clone()
        }
        None => Image::zeros(proj.image_width(), proj.image_height(), proj.spacing())?,
    };
    if cfg.relaxation == 0.0 {
        return Ok(x);
    }
    let det = proj.det_count();
    let mut residual = vec![0.0f64; det];
    for _sweep in 0..cfg.iterations {
        for k in 0..proj.view_count() {
            // Gather pass: forward value and weight sum per ray.
            for d in 0..det {
                let mut f = 0.0;
                let mut wsum = 0.0;
                {
                    let values = x.values();
                    proj.for_each_ray_sample(k, d, |pix, wt| {
                        f += wt * values[pix];
                        wsum += wt;
                    });
                }
                residual[d] = if wsum > 1e-12 { (sino.get(k, d) - f) / wsum } else { 0.0 };
            }
            // Scatter pass with the same weights.
            let relax = cfg.relaxation;
            let values = x.values_mut();
            for d in 0..det {
                let upd = relax * residual[d];
                if upd != 0.0 {
                    proj.for_each_ray_sample(k, d, |pix, wt| values[pix] += wt * upd);
                }
            }
        }
        for v in x.values_mut() {
            *v = v.clamp(cfg.clip_min, cfg.clip_max);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{rasterize, PhantomSpec};

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn ramp_filter_removes_dc() {
        // H(0) = 0, so the filtered padded signal has exactly zero mean.
        let response = ramp_response(32, 0.5);
        assert_eq!(response[0], 0.0);
        let row = vec![3.0; 16];
        let filtered = filter_padded_row(&row, &response);
        let sum: f64 = filtered.iter().sum();
        assert!(sum.abs() < 1e-10, "dc leak {sum}");
    }

    #[test]
    fn fbp_recovers_unit_disk_density() {
        let size = 128;
        let spacing = 2.0 / size as f64;
        let proj = ProjectorConfig::parallel(size, spacing, 180, 192).unwrap();
        let spec = PhantomSpec::disk(0.6, 1.0);
        let sino =
            crate::phantom::analytic_sinogram(&spec, proj.angle_set(), 192, proj.det_spacing())
                .unwrap();
        let recon = fbp(&FbpConfig::default(), &proj, &sino).unwrap();
        // Interior of the disk should sit near density 1.
        let mut interior = Vec::new();
        for j in 0..size {
            for i in 0..size {
                let (x, y) = (recon.x_of(i), recon.y_of(j));
                if x * x + y * y < 0.4 * 0.4 {
                    interior.push(recon.get(i, j));
                }
            }
        }
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "disk interior mean {mean}");
    }

    #[test]
    fn fbp_is_linear_in_the_sinogram() {
        let proj = ProjectorConfig::parallel(32, 2.0 / 32.0, 24, 48).unwrap();
        let spec_a = PhantomSpec::disk(0.5, 1.0);
        let spec_b = PhantomSpec::shepp_logan();
        let s1 = crate::phantom::analytic_sinogram(&spec_a, proj.angle_set(), 48, proj.det_spacing())
            .unwrap();
        let s2 = crate::phantom::analytic_sinogram(&spec_b, proj.angle_set(), 48, proj.det_spacing())
            .unwrap();
        let (a, b) = (0.8, -0.45);
        let mixed = Sinogram::new(
            proj.angle_set().clone(),
            48,
            proj.det_spacing(),
            s1.values().iter().zip(s2.values()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let cfg = FbpConfig::default();
        let f1 = fbp(&cfg, &proj, &s1).unwrap();
        let f2 = fbp(&cfg, &proj, &s2).unwrap();
        let fm = fbp(&cfg, &proj, &mixed).unwrap();
        let combo: Vec<f64> =
            f1.values().iter().zip(f2.values()).map(|(u, v)| a * u + b * v).collect();
        let rel = l2(fm.values(), &combo)
            / combo.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        assert!(rel < 1e-10, "fbp linearity violation {rel}");
    }

    #[test]
    fn sart_fixed_point_when_data_consistent() {
        let size = 32;
        let spacing = 2.0 / size as f64;
        let proj = ProjectorConfig::parallel(size, spacing, 24, 48).unwrap();
        let x0 = rasterize(&PhantomSpec::disk(0.5, 0.3), size, size, spacing).unwrap();
        let sino = proj.forward(&x0).unwrap();
        let out = sart(&SartConfig::default(), &proj, &sino, Some(&x0)).unwrap();
        assert_eq!(out.values(), x0.values());
    }

    #[test]
    fn sart_zero_relaxation_returns_init() {
        let proj = ProjectorConfig::parallel(16, 1.0 / 8.0, 8, 24).unwrap();
        let init = Image::from_fn(16, 16, 1.0 / 8.0, |x, y| 0.7 + x - y).unwrap();
        let sino = Sinogram::zeros(proj.angle_set().clone(), 24, proj.det_spacing()).unwrap();
        let cfg = SartConfig { relaxation: 0.0, ..SartConfig::default() };
        let out = sart(&cfg, &proj, &sino, Some(&init)).unwrap();
        assert_eq!(out.values(), init.values());
    }

    #[test]
    fn sart_residual_non_increasing_and_clipped() {
        let size = 64;
        let spacing = 2.0 / size as f64;
        let proj = ProjectorConfig::parallel(size, spacing, 72, 96).unwrap();
        let phantom = rasterize(&PhantomSpec::disk(0.7, 0.4), size, size, spacing).unwrap();
        let sino = proj.forward(&phantom).unwrap();
        let mut residuals = Vec::new();
        for sweeps in 1..=5 {
            let cfg = SartConfig { iterations: sweeps, ..SartConfig::default() };
            let recon = sart(&cfg, &proj, &sino, None).unwrap();
            let fwd = proj.forward(&recon).unwrap();
            residuals.push(l2(fwd.values(), sino.values()));
            assert!(recon.values().iter().all(|&v| (0.0..=0.549).contains(&v)));
        }
        for pair in residuals.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "sart residual increased: {residuals:?}"
            );
        }
    }
}
