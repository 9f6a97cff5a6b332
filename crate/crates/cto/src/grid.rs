//! Grid-sampled function containers shared by every stage of the pipeline:
//! attenuation images on Cartesian grids, sinograms on (view angle, detector)
//! grids, view-angle sets, angle subsampling masks, and the binary grid file
//! format.
//!
//! Coordinate convention: the physical domain is centered at the origin and
//! samples sit at pixel centers, so image sample `(i, j)` lies at
//! `((i - (w-1)/2) * spacing, (j - (h-1)/2) * spacing)` and detector bin `d`
//! lies at `r = (d - (det_count-1)/2) * det_spacing`. Image rotations about
//! the grid center and sinogram view shifts stay exactly aligned under this
//! convention.
//!
//! All values are `f64` and containers are immutable in normal use; the
//! deterministic noise generator is ChaCha8 (a seekable counter-based stream
//! cipher RNG), seeded explicitly everywhere randomness appears.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{format_err, invalid, Result};

/// Scalar attenuation field on a uniform, origin-centered Cartesian grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(invalid(format!("image spacing must be positive, got {spacing}")));
        }
        if values.len() != width * height {
            return Err(invalid(format!(
                "image value count {} does not match {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image values must be finite"));
        }
        Ok(Self { width, height, spacing, values })
    }

    pub fn zeros(width: usize, height: usize, spacing: f64) -> Result<Self> {
        Self::new(width, height, spacing, vec![0.0; width * height])
    }

    /// Samples `f(x, y)` at every pixel center.
    pub fn from_fn(
        width: usize,
        height: usize,
        spacing: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        for j in 0..height {
            let y = (j as f64 - cy) * spacing;
            for i in 0..width {
                let x = (i as f64 - cx) * spacing;
                values.push(f(x, y));
            }
        }
        Self::new(width, height, spacing, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw samples; callers must keep values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    /// Physical x coordinate of column `i`.
    #[inline]
    pub fn x_of(&self, i: usize) -> f64 {
        (i as f64 - (self.width as f64 - 1.0) / 2.0) * self.spacing
    }

    /// Physical y coordinate of row `j`.
    #[inline]
    pub fn y_of(&self, j: usize) -> f64 {
        (j as f64 - (self.height as f64 - 1.0) / 2.0) * self.spacing
    }

    /// Length of the grid diagonal, the span a detector row must cover.
    pub fn diagonal(&self) -> f64 {
        let w = self.width as f64 * self.spacing;
        let h = self.height as f64 * self.spacing;
        (w * w + h * h).sqrt()
    }
}

/// Strictly increasing view angles over an angular period (π for parallel
/// beam; 2π only for the flip-periodicity diagnostics).
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    angles: Vec<f64>,
    period: f64,
    uniform: bool,
}

/// Angle `k` of a uniform `count`-view acquisition over `period`.
///
/// Every uniform angle in the toolkit funnels through this formula so that
/// equal angles compare bit-equal regardless of which grid produced them.
#[inline]
pub fn uniform_angle(k: usize, count: usize, period: f64) -> f64 {
    (period * k as f64) / count as f64
}

impl AngleSet {
    /// `count` angles uniformly covering `[0, period)`.
    pub fn uniform(count: usize, period: f64) -> Result<Self> {
        if count == 0 {
            return Err(invalid("angle count must be positive"));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(invalid("angular period must be positive"));
        }
        let angles = (0..count).map(|k| uniform_angle(k, count, period)).collect();
        Ok(Self { angles, period, uniform: true })
    }

    pub fn explicit(angles: Vec<f64>, period: f64) -> Result<Self> {
        if angles.is_empty() {
            return Err(invalid("angle set must be non-empty"));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(invalid("angular period must be positive"));
        }
        for pair in angles.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(invalid("angles must be strictly increasing"));
            }
        }
        if angles[0] < 0.0 || *angles.last().unwrap() >= period {
            return Err(invalid("angles must lie in [0, period)"));
        }
        let uniform = angles
            .iter()
            .enumerate()
            .all(|(k, a)| a.to_bits() == uniform_angle(k, angles.len(), period).to_bits());
        Ok(Self { angles, period, uniform })
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angle(&self, k: usize) -> f64 {
        self.angles[k]
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Restriction to the kept indices of `mask`.
    pub fn restrict(&self, mask: &SampleMask) -> Result<Self> {
        mask.validate(self.len())?;
        let angles: Vec<f64> = mask.kept_indices().iter().map(|&k| self.angles[k]).collect();
        let uniform = self.uniform && mask.is_uniform_stride(self.len());
        Ok(Self { angles, period: self.period, uniform })
    }
}

/// Projection data on an (angle, detector) grid, row-major `[angle][detector]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    angle_set: AngleSet,
    det_count: usize,
    det_spacing: f64,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(
        angle_set: AngleSet,
        det_count: usize,
        det_spacing: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if det_count == 0 {
            return Err(invalid("detector count must be positive"));
        }
        if !(det_spacing > 0.0) || !det_spacing.is_finite() {
            return Err(invalid("detector spacing must be positive"));
        }
        if values.len() != angle_set.len() * det_count {
            return Err(invalid(format!(
                "sinogram value count {} does not match {} views x {} detectors",
                values.len(),
                angle_set.len(),
                det_count
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sinogram values must be finite"));
        }
        Ok(Self { angle_set, det_count, det_spacing, values })
    }

    pub fn zeros(angle_set: AngleSet, det_count: usize, det_spacing: f64) -> Result<Self> {
        let n = angle_set.len() * det_count;
        Self::new(angle_set, det_count, det_spacing, vec![0.0; n])
    }

    pub fn angle_set(&self) -> &AngleSet {
        &self.angle_set
    }

    pub fn view_count(&self) -> usize {
        self.angle_set.len()
    }

    pub fn det_count(&self) -> usize {
        self.det_count
    }

    pub fn det_spacing(&self) -> f64 {
        self.det_spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, view: usize, det: usize) -> f64 {
        self.values[view * self.det_count + det]
    }

    pub fn row(&self, view: usize) -> &[f64] {
        &self.values[view * self.det_count..(view + 1) * self.det_count]
    }

    /// Signed detector coordinate of bin `d`; the grid is symmetric about 0.
    #[inline]
    pub fn r_of(&self, d: usize) -> f64 {
        (d as f64 - (self.det_count as f64 - 1.0) / 2.0) * self.det_spacing
    }
}

/// Subset of view-angle indices kept by the subsampling operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMask {
    kept: Vec<usize>,
}

impl SampleMask {
    pub fn from_indices(kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(invalid("sample mask must keep at least one view"));
        }
        for pair in kept.windows(2) {
            if pair[0] >= pair[1] {
                return Err(invalid("mask indices must be strictly increasing"));
            }
        }
        Ok(Self { kept })
    }

    /// Identity mask over `count` views.
    pub fn full(count: usize) -> Result<Self> {
        Self::from_indices((0..count).collect())
    }

    /// Uniform-stride mask keeping `keep` of `total` views; `keep` must
    /// divide `total`.
    pub fn uniform_stride(total: usize, keep: usize) -> Result<Self> {
        if keep == 0 || keep > total {
            return Err(invalid(format!("cannot keep {keep} of {total} views")));
        }
        if total % keep != 0 {
            return Err(invalid(format!(
                "kept view count {keep} must divide the full view count {total}"
            )));
        }
        let stride = total / keep;
        Self::from_indices((0..keep).map(|k| k * stride).collect())
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        match self.kept.last() {
            Some(&last) if last >= total => Err(invalid(format!(
                "mask index {last} out of range for {total} views"
            ))),
            _ => Ok(()),
        }
    }

    /// Recovers the mask mapping `sub`'s angles into `full` by exact (bit)
    /// angle equality; all uniform angles funnel through [`uniform_angle`],
    /// so subsets produced by [`apply_mask`] always match.
    pub fn match_subset(full: &AngleSet, sub: &AngleSet) -> Result<SampleMask> {
        let mut kept = Vec::with_capacity(sub.len());
        let mut i = 0usize;
        for &a in sub.angles() {
            while i < full.len() && full.angle(i).to_bits() != a.to_bits() {
                i += 1;
            }
            if i == full.len() {
                return Err(invalid(
                    "sub-sinogram view angles are not a subset of the acquisition angle set",
                ));
            }
            kept.push(i);
            i += 1;
        }
        SampleMask::from_indices(kept)
    }

    /// True when the mask is `0, s, 2s, ...` with `s * len == total`.
    pub fn is_uniform_stride(&self, total: usize) -> bool {
        if total % self.kept.len() != 0 {
            return false;
        }
        let stride = total / self.kept.len();
        self.kept.iter().enumerate().all(|(k, &idx)| idx == k * stride)
    }
}

/// Keeps exactly the masked rows of a full sinogram, in order.
pub fn apply_mask(full: &Sinogram, mask: &SampleMask) -> Result<Sinogram> {
    let angle_set = full.angle_set().restrict(mask)?;
    let mut values = Vec::with_capacity(mask.len() * full.det_count());
    for &k in mask.kept_indices() {
        values.extend_from_slice(full.row(k));
    }
    Sinogram::new(angle_set, full.det_count(), full.det_spacing(), values)
}

/// Bilinear resampling onto a `new_width` x `new_height` grid covering the
/// same physical extent (cell-edge aligned); boundary samples clamp to the
/// edge pixels. Exact on affine functions at interior samples.
pub fn resample_bilinear(img: &Image, new_width: usize, new_height: usize) -> Result<Image> {
    if new_width < 2 || new_height < 2 {
        return Err(invalid("resample target dimensions must be at least 2"));
    }
    if new_width == img.width() && new_height == img.height() {
        return Ok(img.clone());
    }
    let values = crate::tensor::resample_plane(
        img.values(),
        img.height(),
        img.width(),
        new_height,
        new_width,
    );
    let spacing = img.spacing() * img.width() as f64 / new_width as f64;
    Image::new(new_width, new_height, spacing, values)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma`; the same
/// `(input, sigma, seed)` triple always produces bit-identical output.
pub fn add_gaussian_noise(sino: &Sinogram, sigma: f64, seed: u64) -> Result<Sinogram> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid("noise sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(sino.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let values = sino
        .values()
        .iter()
        .map(|&v| {
            let z: f64 = normal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    Sinogram::new(sino.angle_set().clone(), sino.det_count(), sino.det_spacing(), values)
}

// ---------------------------------------------------------------------------
// Binary grid files: magic "CTOG", little-endian throughout.
// ---------------------------------------------------------------------------

const GRID_MAGIC: &[u8; 4] = b"CTOG";
const GRID_VERSION: u32 = 1;
const KIND_IMAGE: u8 = 0;
const KIND_SINOGRAM: u8 = 1;

/// Either grid payload a `.ctog` file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum GridFile {
    Image(Image),
    Sinogram(Sinogram),
}

impl GridFile {
    pub fn into_image(self) -> Result<Image> {
        match self {
            GridFile::Image(img) => Ok(img),
            GridFile::Sinogram(_) => Err(invalid("expected an image grid file, found a sinogram")),
        }
    }

    pub fn into_sinogram(self) -> Result<Sinogram> {
        match self {
            GridFile::Sinogram(s) => Ok(s),
            GridFile::Image(_) => Err(invalid("expected a sinogram grid file, found an image")),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err("truncated grid file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err("dimension overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn checked_count(a: u32, b: u32) -> Result<usize> {
    (a as usize)
        .checked_mul(b as usize)
        .filter(|&n| n <= usize::MAX / 8)
        .ok_or_else(|| format_err("grid dimensions overflow"))
}

pub fn write_grid_file(path: impl AsRef<Path>, grid: &GridFile) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    match grid {
        GridFile::Image(img) => {
            out.push(KIND_IMAGE);
            out.extend_from_slice(&(img.width() as u32).to_le_bytes());
            out.extend_from_slice(&(img.height() as u32).to_le_bytes());
            out.extend_from_slice(&img.spacing().to_le_bytes());
            for v in img.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GridFile::Sinogram(sino) => {
            out.push(KIND_SINOGRAM);
            out.extend_from_slice(&(sino.view_count() as u32).to_le_bytes());
            out.extend_from_slice(&(sino.det_count() as u32).to_le_bytes());
            out.extend_from_slice(&sino.det_spacing().to_le_bytes());
            out.extend_from_slice(&sino.angle_set().period().to_le_bytes());
            for a in sino.angle_set().angles() {
                out.extend_from_slice(&a.to_le_bytes());
            }
            for v in sino.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_grid_file(path: impl AsRef<Path>) -> Result<GridFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(4)? != GRID_MAGIC {
        return Err(format_err("bad magic bytes, not a grid file"));
    }
    let version = cur.u32()?;
    if version != GRID_VERSION {
        return Err(format_err(format!("unsupported grid file version {version}")));
    }
    let kind = cur.u8()?;
    let grid = match kind {
        KIND_IMAGE => {
            let width = cur.u32()?;
            let height = cur.u32()?;
            let spacing = cur.f64()?;
            let n = checked_count(width, height)?;
            let values = cur.f64_vec(n)?;
            GridFile::Image(
                Image::new(width as usize, height as usize, spacing, values)
                    .map_err(|e| format_err(e.to_string()))?,
            )
        }
        KIND_SINOGRAM => {
            let angle_count = cur.u32()?;
            let det_count = cur.u32()?;
            let det_spacing = cur.f64()?;
            let period = cur.f64()?;
            let angles = cur.f64_vec(angle_count as usize)?;
            let n = checked_count(angle_count, det_count)?;
            let values = cur.f64_vec(n)?;
            let angle_set =
                AngleSet::explicit(angles, period).map_err(|e| format_err(e.to_string()))?;
            GridFile::Sinogram(
                Sinogram::new(angle_set, det_count as usize, det_spacing, values)
                    .map_err(|e| format_err(e.to_string()))?,
            )
        }
        other => return Err(format_err(format!("unknown grid kind {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(format_err("trailing bytes after grid payload"));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants() {
        assert!(Image::new(2, 2, 1.0, vec![0.0; 3]).is_err());
        assert!(Image::new(2, 2, 0.0, vec![0.0; 4]).is_err());
        assert!(Image::new(2, 2, 1.0, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        let img = Image::new(3, 3, 2.0, vec![0.0; 9]).unwrap();
        assert_eq!(img.x_of(1), 0.0);
        assert_eq!(img.y_of(0), -2.0);
    }

    #[test]
    fn resample_constant_any_size() {
        let img = Image::new(5, 7, 1.0, vec![1.0; 35]).unwrap();
        let out = resample_bilinear(&img, 13, 3).unwrap();
        assert!(out.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn resample_identity_size() {
        let img = Image::from_fn(8, 8, 1.0, |x, y| x * 0.3 + y * y).unwrap();
        let out = resample_bilinear(&img, 8, 8).unwrap();
        assert_eq!(out.values(), img.values());
    }

    #[test]
    fn resample_exact_on_linear_ramp_interior() {
        let img = Image::from_fn(8, 8, 1.0, |x, _| x).unwrap();
        let out = resample_bilinear(&img, 16, 16).unwrap();
        // Interior target samples interpolate strictly inside the source grid.
        for j in 2..14 {
            for i in 2..14 {
                let x = out.x_of(i);
                assert!(
                    (out.get(i, j) - x).abs() < 1e-12,
                    "ramp mismatch at ({i},{j}): {} vs {x}",
                    out.get(i, j)
                );
            }
        }
    }

    #[test]
    fn resample_rejects_degenerate_target() {
        let img = Image::zeros(4, 4, 1.0).unwrap();
        assert!(resample_bilinear(&img, 1, 8).is_err());
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let sino = Sinogram::new(
            AngleSet::uniform(4, std::f64::consts::PI).unwrap(),
            3,
            1.0,
            (0..12).map(|i| i as f64).collect(),
        )
        .unwrap();
        let out = add_gaussian_noise(&sino, 0.0, 7).unwrap();
        assert_eq!(out.values(), sino.values());
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let sino = Sinogram::zeros(AngleSet::uniform(10, std::f64::consts::PI).unwrap(), 16, 1.0)
            .unwrap();
        let a = add_gaussian_noise(&sino, 0.3, 42).unwrap();
        let b = add_gaussian_noise(&sino, 0.3, 42).unwrap();
        let c = add_gaussian_noise(&sino, 0.3, 43).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn noise_sample_std_matches_sigma() {
        let n = 1_000_000usize;
        let sino =
            Sinogram::zeros(AngleSet::uniform(1000, std::f64::consts::PI).unwrap(), 1000, 1.0)
                .unwrap();
        let noisy = add_gaussian_noise(&sino, 0.1, 1).unwrap();
        let mean: f64 = noisy.values().iter().sum::<f64>() / n as f64;
        let var: f64 =
            noisy.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.01, "sample std {std}");
    }

    #[test]
    fn mask_identity_roundtrip() {
        let sino = Sinogram::new(
            AngleSet::uniform(6, std::f64::consts::PI).unwrap(),
            2,
            1.0,
            (0..12).map(|i| i as f64).collect(),
        )
        .unwrap();
        let mask = SampleMask::full(6).unwrap();
        let out = apply_mask(&sino, &mask).unwrap();
        assert_eq!(out, sino);
        assert!(out.angle_set().is_uniform());
    }

    #[test]
    fn mask_every_40th_of_720() {
        let sino =
            Sinogram::zeros(AngleSet::uniform(720, std::f64::consts::PI).unwrap(), 4, 1.0).unwrap();
        let mask = SampleMask::uniform_stride(720, 18).unwrap();
        assert_eq!(mask.kept_indices()[1], 40);
        let sub = apply_mask(&sino, &mask).unwrap();
        assert_eq!(sub.view_count(), 18);
        assert!(sub.angle_set().is_uniform());
    }

    #[test]
    fn mask_single_view() {
        let sino = Sinogram::new(
            AngleSet::uniform(3, std::f64::consts::PI).unwrap(),
            2,
            1.0,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let mask = SampleMask::from_indices(vec![0]).unwrap();
        let sub = apply_mask(&sino, &mask).unwrap();
        assert_eq!(sub.view_count(), 1);
        assert_eq!(sub.values(), &[1.0, 2.0]);
    }

    #[test]
    fn mask_out_of_range_rejected() {
        let sino =
            Sinogram::zeros(AngleSet::uniform(3, std::f64::consts::PI).unwrap(), 2, 1.0).unwrap();
        let mask = SampleMask::from_indices(vec![0, 3]).unwrap();
        assert!(apply_mask(&sino, &mask).is_err());
    }

    #[test]
    fn stride_mask_requires_divisor() {
        assert!(SampleMask::uniform_stride(720, 7).is_err());
        assert!(SampleMask::uniform_stride(720, 72).is_ok());
    }

    #[test]
    fn grid_file_roundtrip_image() {
        let dir = std::env::temp_dir().join("cto_grid_test_img");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.ctog");
        let img = Image::from_fn(4, 4, 0.5, |x, y| x + 10.0 * y).unwrap();
        write_grid_file(&path, &GridFile::Image(img.clone())).unwrap();
        let back = read_grid_file(&path).unwrap().into_image().unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grid_file_roundtrip_sinogram_bits() {
        let dir = std::env::temp_dir().join("cto_grid_test_sino");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.ctog");
        let mut sino =
            Sinogram::zeros(AngleSet::uniform(5, std::f64::consts::PI).unwrap(), 7, 0.31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in sino.values_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        write_grid_file(&path, &GridFile::Sinogram(sino.clone())).unwrap();
        let back = read_grid_file(&path).unwrap().into_sinogram().unwrap();
        assert_eq!(back.values().len(), sino.values().len());
        for (a, b) in back.values().iter().zip(sino.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(back.angle_set().is_uniform());
    }

    #[test]
    fn grid_file_bad_magic() {
        let dir = std::env::temp_dir().join("cto_grid_test_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ctog");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        match read_grid_file(&path) {
            Err(crate::error::Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn grid_file_truncated() {
        let dir = std::env::temp_dir().join("cto_grid_test_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ctog");
        let img = Image::zeros(4, 4, 1.0).unwrap();
        write_grid_file(&path, &GridFile::Image(img)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_grid_file(&path) {
            Err(crate::error::Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
