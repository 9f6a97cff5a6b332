//! FFT helpers shared by the ramp filter, the frequency-branch operator and
//! the projection-slice diagnostic.
//!
//! The 1D transforms here are *centered*: bin `q` of an `n`-point transform
//! holds the frequency `(q - (n-1)/2) / (n * spacing)`, mirroring the
//! symmetric detector grid. With both grids symmetric about zero, reversing
//! the input axis reverses the output axis with no phase residue, which is
//! what lets the detector-axis flip identity survive a round trip through
//! the frequency domain.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::grid::Image;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Unnormalized standard DFT (or its unnormalized inverse) in place.
pub fn fft_inplace(buf: &mut [Complex<f64>], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let fft = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        fft.process(buf);
    });
}

/// Frequency of centered bin `q` for an `n`-point grid with sample pitch
/// `spacing`.
#[inline]
pub fn centered_freq(q: usize, n: usize, spacing: f64) -> f64 {
    (q as f64 - (n as f64 - 1.0) / 2.0) / (n as f64 * spacing)
}

/// Centered DFT: `X_q = Σ_d x_d exp(-2πi (q-c)(d-c)/n)` with `c = (n-1)/2`.
///
/// Computed as phase pre/post twiddles around a standard FFT. The matrix is
/// symmetric and unitary up to `n`, so [`centered_idft`] with the `1/n`
/// factor inverts it exactly.
pub fn centered_dft(input: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = input.len();
    let c = (n as f64 - 1.0) / 2.0;
    let tau = std::f64::consts::TAU;
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|d| input[d] * Complex::from_polar(1.0, tau * c * d as f64 / n as f64))
        .collect();
    fft_inplace(&mut buf, false);
    let global = Complex::from_polar(1.0, -tau * c * c / n as f64);
    for (q, v) in buf.iter_mut().enumerate() {
        *v *= global * Complex::from_polar(1.0, tau * c * q as f64 / n as f64);
    }
    buf
}

/// Inverse of [`centered_dft`], including the `1/n` normalization.
pub fn centered_idft(input: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let n = input.len();
    let c = (n as f64 - 1.0) / 2.0;
    let tau = std::f64::consts::TAU;
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|q| input[q] * Complex::from_polar(1.0, -tau * c * q as f64 / n as f64))
        .collect();
    fft_inplace(&mut buf, true);
    let global = Complex::from_polar(1.0, tau * c * c / n as f64);
    let scale = 1.0 / n as f64;
    for (d, v) in buf.iter_mut().enumerate() {
        *v *= global * Complex::from_polar(1.0, -tau * c * d as f64 / n as f64) * scale;
    }
    buf
}

/// Physical spectrum of one real sinogram row: `Δr` times the centered DFT,
/// i.e. a Riemann estimate of the continuous transform at the centered
/// frequency bins.
pub fn centered_spectrum_row(row: &[f64], spacing: f64) -> Vec<Complex<f64>> {
    let input: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut out = centered_dft(&input);
    for v in out.iter_mut() {
        *v *= spacing;
    }
    out
}

/// Zero-padded 2D image spectrum on a centered frequency grid, with the
/// pixel-center origin phase folded in so values estimate the continuous
/// transform of the origin-centered image.
pub struct CenteredSpectrum2 {
    size: usize,
    freq_step: f64,
    data: Vec<Complex<f64>>,
}

impl CenteredSpectrum2 {
    /// Bilinear sample at physical frequency `(nu_x, nu_y)`; zero outside
    /// the covered square.
    pub fn sample(&self, nu_x: f64, nu_y: f64) -> Complex<f64> {
        let p = self.size as f64;
        let ax = nu_x / self.freq_step + p / 2.0;
        let ay = nu_y / self.freq_step + p / 2.0;
        if ax < 0.0 || ay < 0.0 || ax > p - 1.0 || ay > p - 1.0 {
            return Complex::new(0.0, 0.0);
        }
        let i0 = ax.floor() as usize;
        let j0 = ay.floor() as usize;
        let i1 = (i0 + 1).min(self.size - 1);
        let j1 = (j0 + 1).min(self.size - 1);
        let fu = ax - i0 as f64;
        let fv = ay - j0 as f64;
        let at = |i: usize, j: usize| self.data[j * self.size + i];
        at(i0, j0) * (1.0 - fu) * (1.0 - fv)
            + at(i1, j0) * fu * (1.0 - fv)
            + at(i0, j1) * (1.0 - fu) * fv
            + at(i1, j1) * fu * fv
    }

    pub fn freq_step(&self) -> f64 {
        self.freq_step
    }
}

/// 2D FFT of the zero-padded image, reorganized onto a centered grid.
/// `pad_factor` controls the frequency sampling density.
pub fn image_spectrum(img: &Image, pad_factor: usize) -> CenteredSpectrum2 {
    let w = img.width();
    let h = img.height();
    let s = img.spacing();
    let p = (pad_factor.max(1) * w.max(h)).next_power_of_two();
    let mut grid = vec![Complex::new(0.0, 0.0); p * p];
    for j in 0..h {
        for i in 0..w {
            grid[j * p + i] = Complex::new(img.get(i, j), 0.0);
        }
    }
    fft2_inplace(&mut grid, p);

    let freq_step = 1.0 / (p as f64 * s);
    let tau = std::f64::consts::TAU;
    let cx = (w as f64 - 1.0) / 2.0 * s;
    let cy = (h as f64 - 1.0) / 2.0 * s;
    let cell = s * s;
    let mut data = vec![Complex::new(0.0, 0.0); p * p];
    for b in 0..p {
        let qy = (b + p - p / 2) % p;
        let nu_y = (b as f64 - (p / 2) as f64) * freq_step;
        for a in 0..p {
            let qx = (a + p - p / 2) % p;
            let nu_x = (a as f64 - (p / 2) as f64) * freq_step;
            let phase = Complex::from_polar(1.0, tau * (nu_x * cx + nu_y * cy));
            data[b * p + a] = grid[qy * p + qx] * phase * cell;
        }
    }
    CenteredSpectrum2 { size: p, freq_step, data }
}

fn fft2_inplace(grid: &mut [Complex<f64>], p: usize) {
    PLANNER.with(|planner| {
        let fft = planner.borrow_mut().plan_fft_forward(p);
        for row in grid.chunks_exact_mut(p) {
            fft.process(row);
        }
    });
    // Columns via transpose, row FFT, transpose back.
    transpose(grid, p);
    PLANNER.with(|planner| {
        let fft = planner.borrow_mut().plan_fft_forward(p);
        for row in grid.chunks_exact_mut(p) {
            fft.process(row);
        }
    });
    transpose(grid, p);
}

fn transpose(grid: &mut [Complex<f64>], p: usize) {
    for j in 0..p {
        for i in (j + 1)..p {
            grid.swap(j * p + i, i * p + j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_roundtrip() {
        let x: Vec<Complex<f64>> =
            (0..17).map(|i| Complex::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let back = centered_idft(&centered_dft(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn centered_dft_matches_direct_sum() {
        let n = 12;
        let x: Vec<Complex<f64>> =
            (0..n).map(|i| Complex::new(0.3 * i as f64, (i as f64).cos())).collect();
        let fast = centered_dft(&x);
        let c = (n as f64 - 1.0) / 2.0;
        for q in 0..n {
            let mut direct = Complex::new(0.0, 0.0);
            for (d, v) in x.iter().enumerate() {
                let ph = -std::f64::consts::TAU * (q as f64 - c) * (d as f64 - c) / n as f64;
                direct += v * Complex::from_polar(1.0, ph);
            }
            assert!((fast[q] - direct).norm() < 1e-10, "bin {q}");
        }
    }

    #[test]
    fn centered_dft_commutes_with_flip() {
        let n = 16;
        let x: Vec<Complex<f64>> =
            (0..n).map(|i| Complex::new((i as f64 * 0.7).sin(), 0.1 * i as f64)).collect();
        let flipped: Vec<Complex<f64>> = x.iter().rev().cloned().collect();
        let a = centered_dft(&flipped);
        let b: Vec<Complex<f64>> = centered_dft(&x).into_iter().rev().collect();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).norm() < 1e-12);
        }
    }

    #[test]
    fn gaussian_image_spectrum_matches_analytic() {
        // f(x, y) = exp(-|p|^2 / (2σ^2)) has transform
        // 2πσ^2 exp(-2π^2 σ^2 |ν|^2).
        let size = 64;
        let s = 2.0 / size as f64;
        let sigma = 4.0 * s;
        let img = Image::from_fn(size, size, s, |x, y| {
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .unwrap();
        let spec = image_spectrum(&img, 4);
        let peak = 2.0 * std::f64::consts::PI * sigma * sigma;
        for &(nx, ny) in &[(0.0, 0.0), (1.5, 0.0), (0.0, -2.0), (2.0, 2.0)] {
            let analytic = peak
                * (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * (nx * nx + ny * ny))
                    .exp();
            let got = spec.sample(nx, ny);
            assert!(
                (got.re - analytic).abs() < 2e-3 * peak && got.im.abs() < 1e-6,
                "spectrum at ({nx},{ny}): {got} vs {analytic}"
            );
        }
    }
}
