//! Image-quality metrics: PSNR, SSIM and RMSE on the Hounsfield scale.

use crate::error::{invalid, Result};
use crate::grid::Image;

/// PSNR outcome; `exact` marks a zero-MSE comparison, reported as the capped
/// value 99 dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub exact: bool,
}

pub const PSNR_CAP_DB: f64 = 99.0;

fn check_dims(test: &Image, reference: &Image) -> Result<()> {
    if test.width() != reference.width() || test.height() != reference.height() {
        return Err(invalid("metric inputs must share dimensions"));
    }
    Ok(())
}

pub fn psnr(test: &Image, reference: &Image, peak: f64) -> Result<Psnr> {
    check_dims(test, reference)?;
    if !(peak > 0.0) {
        return Err(invalid("psnr peak must be positive"));
    }
    let n = test.values().len() as f64;
    let mse: f64 = test
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, exact: true });
    }
    Ok(Psnr { db: (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB), exact: false })
}

/// PSNR with the conventional default peak: the reference image maximum.
pub fn psnr_ref_peak(test: &Image, reference: &Image) -> Result<Psnr> {
    let peak = reference.values().iter().cloned().fold(f64::MIN, f64::max);
    psnr(test, reference, if peak > 0.0 { peak } else { 1.0 })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean local SSIM with an 11x11 Gaussian window (σ = 1.5) and symmetric
/// (edge-mirroring) boundary handling.
pub fn ssim(test: &Image, reference: &Image, peak: f64) -> Result<f64> {
    check_dims(test, reference)?;
    if !(peak > 0.0) {
        return Err(invalid("ssim peak must be positive"));
    }
    let (w, h) = (test.width(), test.height());
    let window = gaussian_window();

    let mu1 = filter(test.values(), w, h, &window);
    let mu2 = filter(reference.values(), w, h, &window);
    let sq = |vals: &[f64]| -> Vec<f64> { vals.iter().map(|v| v * v).collect() };
    let e11 = filter(&sq(test.values()), w, h, &window);
    let e22 = filter(&sq(reference.values()), w, h, &window);
    let prod: Vec<f64> =
        test.values().iter().zip(reference.values()).map(|(a, b)| a * b).collect();
    let e12 = filter(&prod, w, h, &window);

    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut acc = 0.0;
    for i in 0..w * h {
        let (m1, m2) = (mu1[i], mu2[i]);
        let v1 = e11[i] - m1 * m1;
        let v2 = e22[i] - m2 * m2;
        let cov = e12[i] - m1 * m2;
        acc += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
            / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
    }
    Ok(acc / (w * h) as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut win = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in win.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in win.iter_mut() {
        *v /= sum;
    }
    win
}

/// Separable windowed mean with symmetric boundary extension
/// (`[a b c] -> ... b a | a b c | c b ...`).
fn filter(values: &[f64], w: usize, h: usize, window: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW / 2;
    let reflect = |idx: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = idx;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut rows = vec![0.0f64; w * h];
    for j in 0..h {
        for i in 0..w {
            let mut acc = 0.0;
            for (t, wt) in window.iter().enumerate() {
                let src = reflect(i as isize + t as isize - half as isize, w);
                acc += wt * values[j * w + src];
            }
            rows[j * w + i] = acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for j in 0..h {
        for i in 0..w {
            let mut acc = 0.0;
            for (t, wt) in window.iter().enumerate() {
                let src = reflect(j as isize + t as isize - half as isize, h);
                acc += wt * rows[src * w + i];
            }
            out[j * w + i] = acc;
        }
    }
    out
}

/// Root-mean-square error after converting both images to Hounsfield units
/// with `HU(μ) = 1000 (μ - μ_water) / μ_water`.
pub fn rmse_hu(test: &Image, reference: &Image, mu_water: f64) -> Result<f64> {
    check_dims(test, reference)?;
    if !(mu_water > 0.0) {
        return Err(invalid("mu_water must be positive"));
    }
    let scale = 1000.0 / mu_water;
    let n = test.values().len() as f64;
    let acc: f64 = test
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| {
            let d = scale * (a - b);
            d * d
        })
        .sum();
    Ok((acc / n).sqrt())
}

/// Per-image metric triple.
#[derive(Debug, Clone, Copy)]
pub struct MetricSample {
    pub psnr: Psnr,
    pub ssim: f64,
    pub rmse_hu: f64,
}

pub fn evaluate(test: &Image, reference: &Image, mu_water: f64) -> Result<MetricSample> {
    Ok(MetricSample {
        psnr: psnr_ref_peak(test, reference)?,
        ssim: {
            let peak = reference.values().iter().cloned().fold(f64::MIN, f64::max);
            ssim(test, reference, if peak > 0.0 { peak } else { 1.0 })?
        },
        rmse_hu: rmse_hu(test, reference, mu_water)?,
    })
}

/// Aggregate over an evaluation set.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    samples: Vec<MetricSample>,
}

impl MetricReport {
    pub fn push(&mut self, sample: MetricSample) {
        self.samples.push(sample);
    }

    pub fn samples(&self) -> &[MetricSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.psnr.db))
    }

    /// Machine-readable key-value lines: `name mean std count`.
    pub fn to_key_value(&self) -> String {
        let n = self.samples.len();
        let stats = |vals: Vec<f64>| -> (f64, f64) {
            let m = mean(vals.iter().cloned());
            let var = if n > 1 {
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)
            } else {
                0.0
            };
            (m, var.sqrt())
        };
        let (pm, ps) = stats(self.samples.iter().map(|s| s.psnr.db).collect());
        let (sm, ss) = stats(self.samples.iter().map(|s| s.ssim).collect());
        let (rm, rs) = stats(self.samples.iter().map(|s| s.rmse_hu).collect());
        format!(
            "psnr_db {pm:.6} {ps:.6} {n}\nssim {sm:.6} {ss:.6} {n}\nrmse_hu {rm:.6} {rs:.6} {n}\n"
        )
    }
}

fn mean(vals: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in vals {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
