//! Analytic ellipse phantoms with closed-form sinograms.
//!
//! An ellipse's parallel-beam projection has an exact chord-length formula,
//! so phantoms double as the ground-truth oracle for the discrete projector
//! and as the training/evaluation data generator. The canonical phantom is
//! the standard 10-ellipse Shepp-Logan head (modified high-contrast
//! densities) on the `[-1, 1]^2` domain.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{format_err, invalid, Result};
use crate::grid::{AngleSet, Image, Sinogram};

/// Additive ellipse: `density` inside, 0 outside. `rotation` is the
/// counterclockwise angle of the `a` semi-axis from the x axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub density: f64,
}

impl Ellipse {
    pub fn new(center: (f64, f64), semi_axes: (f64, f64), rotation: f64, density: f64) -> Result<Self> {
        if !(semi_axes.0 > 0.0) || !(semi_axes.1 > 0.0) {
            return Err(invalid("ellipse semi-axes must be positive"));
        }
        Ok(Self { center, semi_axes, rotation, density })
    }

    /// Boundary points count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let (sin, cos) = self.rotation.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let (a, b) = self.semi_axes;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }

    /// Exact line integral along the ray at view angle `theta`, offset `r`.
    ///
    /// The ray is `{ r * n + t * d }` with normal `n = (cos θ, sin θ)` and
    /// direction `d = (-sin θ, cos θ)`. For semi-axes `(a, b)` rotated by α,
    /// the half-width of the projected ellipse at view γ = θ - α is
    /// `h = sqrt(a² cos²γ + b² sin²γ)` and the chord is
    /// `2 ρ a b sqrt(h² - s²) / h²` for `|s| < h`, where `s` is the ray
    /// offset relative to the projected center.
    pub fn projection(&self, theta: f64, r: f64) -> f64 {
        let (a, b) = self.semi_axes;
        let gamma = theta - self.rotation;
        let (sg, cg) = gamma.sin_cos();
        let h2 = a * a * cg * cg + b * b * sg * sg;
        let (st, ct) = theta.sin_cos();
        let s = r - (self.center.0 * ct + self.center.1 * st);
        let rem = h2 - s * s;
        if rem <= 0.0 {
            return 0.0;
        }
        2.0 * self.density * a * b * rem.sqrt() / h2
    }

    /// The same ellipse after rotating the whole plane by `phi` about the
    /// origin.
    pub fn rotated(&self, phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            center: (
                self.center.0 * c - self.center.1 * s,
                self.center.0 * s + self.center.1 * c,
            ),
            semi_axes: self.semi_axes,
            rotation: self.rotation + phi,
            density: self.density,
        }
    }
}

/// Ordered ellipse list; projections and rasterizations sum contributions in
/// list order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn new(ellipses: Vec<Ellipse>) -> Result<Self> {
        if ellipses.is_empty() {
            return Err(invalid("phantom must contain at least one ellipse"));
        }
        Ok(Self { ellipses })
    }

    /// Standard 10-ellipse Shepp-Logan head phantom on `[-1, 1]^2` with the
    /// modified (high-contrast) densities.
    pub fn shepp_logan() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let table: [(f64, f64, f64, f64, f64, f64); 10] = [
            // (x0, y0, a, b, alpha_deg, density)
            (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
            (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
            (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
            (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
            (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
            (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
            (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
            (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
            (0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
            (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
        ];
        let ellipses = table
            .iter()
            .map(|&(x0, y0, a, b, alpha, rho)| Ellipse {
                center: (x0, y0),
                semi_axes: (a, b),
                rotation: alpha * deg,
                density: rho,
            })
            .collect();
        Self { ellipses }
    }

    /// Disk of radius `radius` and density `rho` centered at the origin.
    pub fn disk(radius: f64, rho: f64) -> Self {
        Self {
            ellipses: vec![Ellipse {
                center: (0.0, 0.0),
                semi_axes: (radius, radius),
                rotation: 0.0,
                density: rho,
            }],
        }
    }

    pub fn ellipses(&self) -> &[Ellipse] {
        &self.ellipses
    }

    pub fn rotated(&self, phi: f64) -> Self {
        Self { ellipses: self.ellipses.iter().map(|e| e.rotated(phi)).collect() }
    }
}

/// Samples the indicator-density sum at every pixel center.
pub fn rasterize(spec: &PhantomSpec, width: usize, height: usize, spacing: f64) -> Result<Image> {
    if width < 2 || height < 2 {
        return Err(invalid("phantom raster dimensions must be at least 2"));
    }
    Image::from_fn(width, height, spacing, |x, y| {
        let mut v = 0.0;
        for e in &spec.ellipses {
            if e.contains(x, y) {
                v += e.density;
            }
        }
        v
    })
}

/// Closed-form projection of the whole phantom at one ray.
pub fn analytic_projection(spec: &PhantomSpec, theta: f64, r: f64) -> f64 {
    spec.ellipses.iter().map(|e| e.projection(theta, r)).sum()
}

/// Tabulates [`analytic_projection`] on a sinogram grid.
pub fn analytic_sinogram(
    spec: &PhantomSpec,
    angle_set: &AngleSet,
    det_count: usize,
    det_spacing: f64,
) -> Result<Sinogram> {
    let mut values = Vec::with_capacity(angle_set.len() * det_count);
    let half = (det_count as f64 - 1.0) / 2.0;
    for &theta in angle_set.angles() {
        for d in 0..det_count {
            let r = (d as f64 - half) * det_spacing;
            values.push(analytic_projection(spec, theta, r));
        }
    }
    Sinogram::new(angle_set.clone(), det_count, det_spacing, values)
}

// ---------------------------------------------------------------------------
// Text format: one ellipse per line, `x0 y0 a b alpha rho`, '#' comments.
// ---------------------------------------------------------------------------

pub fn parse_phantom_spec(text: &str) -> Result<PhantomSpec> {
    let mut ellipses = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(format_err(format!(
                "phantom spec line {}: expected 6 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut nums = [0.0f64; 6];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| {
                format_err(format!("phantom spec line {}: {e}", lineno + 1))
            })?;
        }
        let [x0, y0, a, b, alpha, rho] = nums;
        ellipses.push(
            Ellipse::new((x0, y0), (a, b), alpha, rho)
                .map_err(|e| format_err(e.to_string()))?,
        );
    }
    PhantomSpec::new(ellipses).map_err(|e| format_err(e.to_string()))
}

pub fn read_phantom_spec(path: impl AsRef<Path>) -> Result<PhantomSpec> {
    parse_phantom_spec(&std::fs::read_to_string(path)?)
}

pub fn write_phantom_spec(path: impl AsRef<Path>, spec: &PhantomSpec) -> Result<()> {
    let mut text = String::from("# x0 y0 a b alpha rho\n");
    for e in spec.ellipses() {
        writeln!(
            text,
            "{} {} {} {} {} {}",
            e.center.0, e.center.1, e.semi_axes.0, e.semi_axes.1, e.rotation, e.density
        )
        .expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn rasterize_far_outside_is_zero() {
        let spec = PhantomSpec::disk(0.1, 1.0);
        let img = rasterize(&spec, 8, 8, 1.0).unwrap();
        // Corner pixel sits at (-3.5, -3.5), far outside the radius-0.1 disk.
        assert_eq!(img.get(0, 0), 0.0);
    }

    #[test]
    fn rasterize_unit_disk_indicator() {
        let spec = PhantomSpec::disk(1.0, 1.0);
        // 65 samples at spacing 1/16 put grid points exactly on the origin.
        let img = rasterize(&spec, 65, 65, 1.0 / 16.0).unwrap();
        assert_eq!(img.get(32, 32), 1.0);
        let i_two = 32 + 32; // x = 2.0
        assert_eq!(img.get(i_two, 32), 0.0);
    }

    #[test]
    fn shepp_logan_center_matches_indicator_sum() {
        let spec = PhantomSpec::shepp_logan();
        let img = rasterize(&spec, 256, 256, 2.0 / 256.0).unwrap();
        let (i, j) = (128usize, 128usize);
        let (x, y) = (img.x_of(i), img.y_of(j));
        let expected: f64 = spec
            .ellipses()
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.density)
            .sum();
        assert_eq!(img.get(i, j), expected);
        // The head interior at the center is ellipse 1 + ellipse 2.
        assert!((expected - 0.2).abs() < 1e-12);
    }

    #[test]
    fn unit_disk_central_chord() {
        let spec = PhantomSpec::disk(1.0, 1.0);
        for k in 0..8 {
            let theta = k as f64 * PI / 8.0;
            assert!((analytic_projection(&spec, theta, 0.0) - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_disk_misses_outside_support() {
        let spec = PhantomSpec::disk(1.0, 1.0);
        assert_eq!(analytic_projection(&spec, 0.3, 1.0), 0.0);
        assert_eq!(analytic_projection(&spec, 1.2, -1.5), 0.0);
    }

    #[test]
    fn unit_disk_chord_at_offset() {
        let spec = PhantomSpec::disk(1.0, 1.0);
        // 2 * sqrt(1 - 0.36) = 1.6
        assert!((analytic_projection(&spec, 0.7, 0.6) - 1.6).abs() < 1e-14);
    }

    #[test]
    fn projection_is_linear_in_ellipses() {
        let e1 = Ellipse::new((0.1, -0.2), (0.5, 0.3), 0.4, 0.7).unwrap();
        let e2 = Ellipse::new((-0.3, 0.0), (0.2, 0.6), -0.9, -0.4).unwrap();
        let union = PhantomSpec::new(vec![e1, e2]).unwrap();
        for (theta, r) in [(0.0, 0.1), (1.1, -0.4), (2.5, 0.0)] {
            let sum = e1.projection(theta, r) + e2.projection(theta, r);
            assert_eq!(analytic_projection(&union, theta, r), sum);
        }
    }

    #[test]
    fn disk_sinogram_rows_identical() {
        let spec = PhantomSpec::disk(0.8, 1.0);
        let angles = AngleSet::uniform(12, PI).unwrap();
        let sino = analytic_sinogram(&spec, &angles, 32, 0.07).unwrap();
        let first = sino.row(0).to_vec();
        for k in 1..12 {
            for (a, b) in sino.row(k).iter().zip(&first) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_far_spec_gives_zero_sinogram() {
        // A phantom whose support misses every ray.
        let spec = PhantomSpec::new(vec![
            Ellipse::new((50.0, 50.0), (0.1, 0.1), 0.0, 1.0).unwrap(),
        ])
        .unwrap();
        let angles = AngleSet::uniform(4, PI).unwrap();
        let sino = analytic_sinogram(&spec, &angles, 8, 0.25).unwrap();
        assert!(sino.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pi_flip_rows_reverse_exactly() {
        let spec = PhantomSpec::shepp_logan();
        let angles = AngleSet::uniform(16, 2.0 * PI).unwrap();
        let det = 21;
        let sino = analytic_sinogram(&spec, &angles, det, 0.11).unwrap();
        for k in 0..8 {
            let row = sino.row(k);
            let flipped = sino.row(k + 8);
            for d in 0..det {
                let diff = (row[d] - flipped[det - 1 - d]).abs();
                assert!(diff < 1e-12, "pi-flip mismatch at view {k} det {d}: {diff}");
            }
        }
    }

    #[test]
    fn rotation_shifts_view_angle() {
        let spec = PhantomSpec::new(vec![
            Ellipse::new((0.3, -0.1), (0.4, 0.15), 0.7, 1.0).unwrap(),
            Ellipse::new((-0.2, 0.25), (0.1, 0.3), -0.2, 0.5).unwrap(),
        ])
        .unwrap();
        let phi = 0.37;
        let rotated = spec.rotated(phi);
        for (theta, r) in [(1.0, 0.2), (2.4, -0.35), (0.1, 0.0)] {
            let lhs = analytic_projection(&rotated, theta, r);
            let rhs = analytic_projection(&spec, theta - phi, r);
            assert!((lhs - rhs).abs() < 1e-12, "rotation covariance: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn mass_conservation_across_angles() {
        let spec = PhantomSpec::disk(1.0, 1.0);
        let det_spacing = 1.0 / 64.0;
        let det_count = 161; // covers [-1.25, 1.25]
        let mass = |theta: f64| -> f64 {
            let half = (det_count as f64 - 1.0) / 2.0;
            let f = |d: usize| analytic_projection(&spec, theta, (d as f64 - half) * det_spacing);
            let mut sum = 0.5 * (f(0) + f(det_count - 1));
            for d in 1..det_count - 1 {
                sum += f(d);
            }
            sum * det_spacing
        };
        let m0 = mass(0.0);
        for k in 1..10 {
            let m = mass(k as f64 * PI / 10.0);
            assert!((m - m0).abs() < 1e-6, "mass drift {}", (m - m0).abs());
        }
    }

    #[test]
    fn spec_text_roundtrip() {
        let spec = PhantomSpec::shepp_logan();
        let dir = std::env::temp_dir().join("cto_phantom_spec");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sl.txt");
        write_phantom_spec(&path, &spec).unwrap();
        let back = read_phantom_spec(&path).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_text_rejects_bad_lines() {
        assert!(parse_phantom_spec("0 0 1 1 0").is_err());
        assert!(parse_phantom_spec("0 0 1 1 0 x").is_err());
        assert!(parse_phantom_spec("# only a comment\n").is_err());
        assert!(parse_phantom_spec("0 0 1 1 0 1 # trailing comment\n").is_ok());
    }
}
