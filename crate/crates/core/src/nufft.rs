//! Kaiser–Bessel gridding NUFFT on a square grid, its exact adjoint,
//! sample-location gradients, PSFs, and a direct NDFT reference.
//!
//! Pixel `(iy, ix)` sits at centered coordinate `(ix - N/2, iy - N/2)` and
//! sample `j` at normalized frequency `k_j ∈ [-0.5, 0.5)²`:
//! `s_j = Σ_x img(x) · exp(-i2π k_j·x)`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GriddingConfig {
    pub oversampling: f64,
    pub kernel_width: usize,
    /// Kaiser–Bessel shape; `None` derives it from width and oversampling.
    #[serde(default)]
    pub kernel_beta: Option<f64>,
}

impl Default for GriddingConfig {
    fn default() -> Self {
        Self {
            oversampling: 2.0,
            kernel_width: 6,
            kernel_beta: None,
        }
    }
}

impl GriddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.oversampling >= 1.25) {
            return Err(Error::invalid("gridding.oversampling must be >= 1.25"));
        }
        if self.kernel_width < 2 {
            return Err(Error::invalid("gridding.kernel_width must be >= 2"));
        }
        if let Some(b) = self.kernel_beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::invalid("gridding.kernel_beta must be > 0"));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.kernel_beta.unwrap_or_else(|| {
            let w = self.kernel_width as f64;
            let a = self.oversampling;
            PI * ((w / a).powi(2) * (a - 0.5).powi(2) - 0.8).max(0.0).sqrt()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    grid: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn zeros(grid: usize) -> Self {
        Self {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid * grid],
        }
    }

    pub fn new(grid: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != grid * grid {
            return Err(Error::shape(
                "ComplexImage::new",
                format!("{} values for grid {grid}", data.len()),
            ));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("image values must be finite"));
        }
        Ok(Self { grid, data })
    }

    pub fn from_real(grid: usize, re: &[f64]) -> Result<Self> {
        Self::new(grid, re.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn abs(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    /// Multiply every pixel by its centered coordinate along `axis` (0 = x).
    pub fn coordinate_weighted(&self, axis: usize) -> Self {
        let n = self.grid;
        let half = (n / 2) as f64;
        let mut out = self.clone();
        for iy in 0..n {
            for ix in 0..n {
                let c = if axis == 0 {
                    ix as f64 - half
                } else {
                    iy as f64 - half
                };
                out.data[iy * n + ix] *= c;
            }
        }
        out
    }
}

fn check_points(points: &[[f64; 2]]) -> Result<()> {
    for (j, p) in points.iter().enumerate() {
        for &c in p {
            if !(-0.5..0.5).contains(&c) {
                return Err(Error::invalid(format!(
                    "sample {j} at ({}, {}) is outside [-0.5, 0.5)",
                    p[0], p[1]
                )));
            }
        }
    }
    Ok(())
}

fn centered(n: usize) -> impl Iterator<Item = f64> {
    let half = (n / 2) as f64;
    (0..n).map(move |i| i as f64 - half)
}

/// Direct evaluation of the forward sum.
pub fn ndft_forward(image: &ComplexImage, points: &[[f64; 2]]) -> Vec<Complex64> {
    let n = image.grid;
    let coords: Vec<f64> = centered(n).collect();
    points
        .iter()
        .map(|k| {
            let ex: Vec<Complex64> = coords
                .iter()
                .map(|&x| Complex64::from_polar(1.0, -2.0 * PI * k[0] * x))
                .collect();
            let mut acc = Complex64::new(0.0, 0.0);
            for (iy, &y) in coords.iter().enumerate() {
                let ey = Complex64::from_polar(1.0, -2.0 * PI * k[1] * y);
                let row = &image.data[iy * n..(iy + 1) * n];
                let mut r = Complex64::new(0.0, 0.0);
                for (v, e) in row.iter().zip(&ex) {
                    r += v * e;
                }
                acc += r * ey;
            }
            acc
        })
        .collect()
}

/// Direct conjugate transpose of [`ndft_forward`].
pub fn ndft_adjoint(samples: &[Complex64], points: &[[f64; 2]], grid: usize) -> ComplexImage {
    let coords: Vec<f64> = centered(grid).collect();
    let mut img = ComplexImage::zeros(grid);
    for (s, k) in samples.iter().zip(points) {
        let ex: Vec<Complex64> = coords
            .iter()
            .map(|&x| Complex64::from_polar(1.0, 2.0 * PI * k[0] * x))
            .collect();
        for (iy, &y) in coords.iter().enumerate() {
            let sy = s * Complex64::from_polar(1.0, 2.0 * PI * k[1] * y);
            for (ix, e) in ex.iter().enumerate() {
                img.data[iy * grid + ix] += sy * e;
            }
        }
    }
    img
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

/// Precomputed interpolation footprint of a point set.
#[derive(Clone, Debug)]
pub struct Interp {
    n_points: usize,
    taps: usize,
    start: Vec<[i64; 2]>,
    /// `n_points × 2 × taps` kernel weights (x taps then y taps).
    weights: Vec<f64>,
}

impl Interp {
    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }
}

/// Gridding plan for one image size and configuration.
#[derive(Clone)]
pub struct NufftPlan {
    grid: usize,
    m: usize,
    width: usize,
    beta: f64,
    /// Deapodization divisor per centered coordinate.
    deapod: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for NufftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NufftPlan")
            .field("grid", &self.grid)
            .field("oversampled", &self.m)
            .field("width", &self.width)
            .field("beta", &self.beta)
            .finish()
    }
}

impl NufftPlan {
    pub fn new(grid: usize, cfg: &GriddingConfig) -> Result<Self> {
        cfg.validate()?;
        if grid < 2 || !grid.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "grid must be even and >= 2, got {grid}"
            )));
        }
        let mut m = (cfg.oversampling * grid as f64).ceil() as usize;
        m += m % 2;
        let width = cfg.kernel_width;
        let beta = cfg.beta();
        let w = width as f64;
        let deapod = centered(grid)
            .map(|x| {
                let xi = x / m as f64;
                let z = PI * w * xi;
                let arg = beta * beta - z * z;
                let kb = if arg > 0.0 {
                    let r = arg.sqrt();
                    w * r.sinh() / r
                } else if arg < 0.0 {
                    let r = (-arg).sqrt();
                    w * r.sin() / r
                } else {
                    w
                };
                let pedestal = if z == 0.0 { w } else { w * z.sin() / z };
                kb - pedestal
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            grid,
            m,
            width,
            beta,
            deapod,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn oversampled(&self) -> usize {
        self.m
    }

    fn kernel(&self, v: f64) -> f64 {
        let r = 2.0 * v / self.width as f64;
        let s = 1.0 - r * r;
        if s < 0.0 {
            0.0
        } else {
            bessel_i0(self.beta * s.sqrt()) - 1.0
        }
    }

    pub fn prepare(&self, points: &[[f64; 2]]) -> Result<Interp> {
        check_points(points)?;
        let taps = self.width + 1;
        let half = self.width as f64 / 2.0;
        let mut start = Vec::with_capacity(points.len());
        let mut weights = vec![0.0; points.len() * 2 * taps];
        for (j, k) in points.iter().enumerate() {
            let mut s = [0i64; 2];
            for d in 0..2 {
                let u = k[d] * self.m as f64;
                let lo = (u - half).ceil();
                s[d] = lo as i64;
                let w = &mut weights[(j * 2 + d) * taps..(j * 2 + d + 1) * taps];
                for (t, wt) in w.iter_mut().enumerate() {
                    *wt = self.kernel(u - (lo + t as f64));
                }
            }
            start.push(s);
        }
        Ok(Interp {
            n_points: points.len(),
            taps,
            start,
            weights,
        })
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(buf);
        transpose(buf, self.m);
        plan.process(buf);
        transpose(buf, self.m);
    }

    fn wrap(&self, i: i64) -> usize {
        i.rem_euclid(self.m as i64) as usize
    }

    fn check_grid(&self, image: &ComplexImage) -> Result<()> {
        if image.grid != self.grid {
            return Err(Error::shape(
                "nufft",
                format!("image grid {} vs plan grid {}", image.grid, self.grid),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, interp: &Interp, image: &ComplexImage) -> Result<Vec<Complex64>> {
        self.check_grid(image)?;
        let (n, m) = (self.grid, self.m);
        let mut g = vec![Complex64::new(0.0, 0.0); m * m];
        for iy in 0..n {
            let gy = self.wrap(iy as i64 - (n / 2) as i64);
            for ix in 0..n {
                let gx = self.wrap(ix as i64 - (n / 2) as i64);
                g[gy * m + gx] = image.data[iy * n + ix] / (self.deapod[iy] * self.deapod[ix]);
            }
        }
        self.fft2(&mut g, false);
        let taps = interp.taps;
        let mut out = Vec::with_capacity(interp.n_points);
        let mut cols = vec![0usize; taps];
        for j in 0..interp.n_points {
            let [sx, sy] = interp.start[j];
            let wx = &interp.weights[j * 2 * taps..(j * 2 + 1) * taps];
            let wy = &interp.weights[(j * 2 + 1) * taps..(j * 2 + 2) * taps];
            for (b, c) in cols.iter_mut().enumerate() {
                *c = self.wrap(sx + b as i64);
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (a, &wya) in wy.iter().enumerate() {
                if wya == 0.0 {
                    continue;
                }
                let row = &g[self.wrap(sy + a as i64) * m..][..m];
                let mut r = Complex64::new(0.0, 0.0);
                for (&c, &wxb) in cols.iter().zip(wx) {
                    r += row[c] * wxb;
                }
                acc += r * wya;
            }
            out.push(acc);
        }
        Ok(out)
    }

    pub fn adjoint(&self, interp: &Interp, samples: &[Complex64]) -> Result<ComplexImage> {
        if samples.len() != interp.n_points {
            return Err(Error::shape(
                "nufft_adjoint",
                format!("{} samples for {} points", samples.len(), interp.n_points),
            ));
        }
        let (n, m) = (self.grid, self.m);
        let taps = interp.taps;
        let mut g = vec![Complex64::new(0.0, 0.0); m * m];
        let mut cols = vec![0usize; taps];
        for (j, &s) in samples.iter().enumerate() {
            let [sx, sy] = interp.start[j];
            let wx = &interp.weights[j * 2 * taps..(j * 2 + 1) * taps];
            let wy = &interp.weights[(j * 2 + 1) * taps..(j * 2 + 2) * taps];
            for (b, c) in cols.iter_mut().enumerate() {
                *c = self.wrap(sx + b as i64);
            }
            for (a, &wya) in wy.iter().enumerate() {
                if wya == 0.0 {
                    continue;
                }
                let sa = s * wya;
                let r0 = self.wrap(sy + a as i64) * m;
                for (&c, &wxb) in cols.iter().zip(wx) {
                    g[r0 + c] += sa * wxb;
                }
            }
        }
        self.fft2(&mut g, true);
        let mut img = ComplexImage::zeros(n);
        for iy in 0..n {
            let gy = self.wrap(iy as i64 - (n / 2) as i64);
            for ix in 0..n {
                let gx = self.wrap(ix as i64 - (n / 2) as i64);
                img.data[iy * n + ix] = g[gy * m + gx] / (self.deapod[iy] * self.deapod[ix]);
            }
        }
        Ok(img)
    }

    /// `∂L/∂k_j` for `s = forward(image)` given `cot_j = ∂L/∂Re s_j + i ∂L/∂Im s_j`.
    pub fn forward_point_grad(
        &self,
        interp: &Interp,
        image: &ComplexImage,
        cot: &[Complex64],
    ) -> Result<Vec<[f64; 2]>> {
        if cot.len() != interp.n_points {
            return Err(Error::shape(
                "nufft_point_grad",
                format!("{} cotangents for {} points", cot.len(), interp.n_points),
            ));
        }
        let fx = self.forward(interp, &image.coordinate_weighted(0))?;
        let fy = self.forward(interp, &image.coordinate_weighted(1))?;
        let m2pi = Complex64::new(0.0, -2.0 * PI);
        Ok((0..cot.len())
            .map(|j| {
                let c = cot[j].conj();
                [(c * m2pi * fx[j]).re, (c * m2pi * fy[j]).re]
            })
            .collect())
    }

    /// `∂L/∂k_j` for `img = adjoint(samples)` given the per-pixel complex
    /// cotangent of the image.
    pub fn adjoint_point_grad(
        &self,
        interp: &Interp,
        samples: &[Complex64],
        cot_image: &ComplexImage,
    ) -> Result<Vec<[f64; 2]>> {
        if samples.len() != interp.n_points {
            return Err(Error::shape(
                "nufft_point_grad",
                format!("{} samples for {} points", samples.len(), interp.n_points),
            ));
        }
        let fx = self.forward(interp, &cot_image.coordinate_weighted(0))?;
        let fy = self.forward(interp, &cot_image.coordinate_weighted(1))?;
        let p2pi = Complex64::new(0.0, 2.0 * PI);
        Ok((0..samples.len())
            .map(|j| {
                let y = samples[j] * p2pi;
                [(y * fx[j].conj()).re, (y * fy[j].conj()).re]
            })
            .collect())
    }
}

fn transpose(buf: &mut [Complex64], m: usize) {
    for r in 0..m {
        for c in (r + 1)..m {
            buf.swap(r * m + c, c * m + r);
        }
    }
}

pub fn nufft_forward(
    image: &ComplexImage,
    points: &[[f64; 2]],
    cfg: &GriddingConfig,
) -> Result<Vec<Complex64>> {
    let plan = NufftPlan::new(image.grid, cfg)?;
    let interp = plan.prepare(points)?;
    plan.forward(&interp, image)
}

pub fn nufft_adjoint(
    samples: &[Complex64],
    points: &[[f64; 2]],
    grid: usize,
    cfg: &GriddingConfig,
) -> Result<ComplexImage> {
    let plan = NufftPlan::new(grid, cfg)?;
    let interp = plan.prepare(points)?;
    plan.adjoint(&interp, samples)
}

pub fn nufft_point_grad(
    image: &ComplexImage,
    points: &[[f64; 2]],
    cotangent: &[Complex64],
    cfg: &GriddingConfig,
) -> Result<Vec<[f64; 2]>> {
    let plan = NufftPlan::new(image.grid, cfg)?;
    let interp = plan.prepare(points)?;
    plan.forward_point_grad(&interp, image, cotangent)
}

/// Radial ramp weights `|k|`, rescaled to unit maximum.
pub fn ramp_dcf(points: &[[f64; 2]]) -> Vec<f64> {
    let r: Vec<f64> = points
        .iter()
        .map(|k| (k[0] * k[0] + k[1] * k[1]).sqrt())
        .collect();
    let mx = r.iter().cloned().fold(0.0, f64::max);
    if mx == 0.0 {
        return vec![1.0; points.len()];
    }
    r.into_iter().map(|v| v / mx).collect()
}

/// Peak-normalized magnitude of the adjoint applied to unit samples.
pub fn psf(points: &[[f64; 2]], grid: usize, cfg: &GriddingConfig) -> Result<Vec<f64>> {
    psf_weighted(points, None, grid, cfg)
}

/// [`psf`] with optional per-sample density weights.
pub fn psf_weighted(
    points: &[[f64; 2]],
    weights: Option<&[f64]>,
    grid: usize,
    cfg: &GriddingConfig,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::invalid("psf needs at least one sample"));
    }
    let samples: Vec<Complex64> = match weights {
        Some(w) => {
            if w.len() != points.len() {
                return Err(Error::shape(
                    "psf",
                    format!("{} weights for {} points", w.len(), points.len()),
                ));
            }
            w.iter().map(|&v| Complex64::new(v, 0.0)).collect()
        }
        None => vec![Complex64::new(1.0, 0.0); points.len()],
    };
    let img = nufft_adjoint(&samples, points, grid, cfg)?;
    let mag = img.abs();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::invalid("psf is identically zero"));
    }
    Ok(mag.into_iter().map(|v| v / peak).collect())
}

/// Azimuthally averaged profile of a centered `grid × grid` image, binned
/// by rounded radius.
pub fn radial_profile(img: &[f64], grid: usize) -> Vec<f64> {
    let half = (grid / 2) as f64;
    let nbins = grid / 2 + 1;
    let mut sum = vec![0.0; nbins];
    let mut cnt = vec![0usize; nbins];
    for iy in 0..grid {
        for ix in 0..grid {
            let r = ((ix as f64 - half).powi(2) + (iy as f64 - half).powi(2))
                .sqrt()
                .round() as usize;
            if r < nbins {
                sum[r] += img[iy * grid + ix];
                cnt[r] += 1;
            }
        }
    }
    sum.iter()
        .zip(&cnt)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// Radius of the first local minimum of the radial profile, i.e. the edge
/// of the main lobe. Falls back to 1 when the profile never turns up.
pub fn main_lobe_radius(psf: &[f64], grid: usize) -> usize {
    let prof = radial_profile(psf, grid);
    for r in 1..prof.len().saturating_sub(1) {
        if prof[r] <= prof[r - 1] && prof[r] < prof[r + 1] {
            return r;
        }
    }
    1
}

/// Largest PSF value outside the main lobe (pixels at rounded radius
/// `>= main_lobe_radius`).
pub fn peak_side_lobe(psf: &[f64], grid: usize) -> f64 {
    let r0 = main_lobe_radius(psf, grid) as f64;
    max_outside_radius(psf, grid, r0)
}

/// Largest value at rounded radius `>= r0` from the center pixel.
pub fn max_outside_radius(img: &[f64], grid: usize, r0: f64) -> f64 {
    let half = (grid / 2) as f64;
    let mut mx: f64 = 0.0;
    for iy in 0..grid {
        for ix in 0..grid {
            let r = ((ix as f64 - half).powi(2) + (iy as f64 - half).powi(2))
                .sqrt()
                .round();
            if r >= r0 {
                mx = mx.max(img[iy * grid + ix]);
            }
        }
    }
    mx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(n: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::new(
            n,
            (0..n * n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn rand_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
            .collect()
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    fn cartesian(n: usize) -> Vec<[f64; 2]> {
        let mut p = Vec::new();
        for iy in 0..n {
            for ix in 0..n {
                p.push([
                    (ix as f64 - (n / 2) as f64) / n as f64,
                    (iy as f64 - (n / 2) as f64) / n as f64,
                ]);
            }
        }
        p
    }

    #[test]
    fn bessel_reference_values() {
        assert_eq!(bessel_i0(0.0), 1.0);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-15);
        assert!((bessel_i0(10.0) / 2815.716628466254 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ndft_identities() {
        let img = rand_image(8, 1);
        let s = ndft_forward(&img, &[[0.0, 0.0]]);
        let sum: Complex64 = img.data().iter().sum();
        assert!((s[0] - sum).norm() < 1e-12);

        let mut delta = ComplexImage::zeros(8);
        delta.data_mut()[4 * 8 + 4] = Complex64::new(1.0, 0.0);
        for v in ndft_forward(&delta, &rand_points(20, 2)) {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }

        let pts = cartesian(8);
        let s = ndft_forward(&img, &pts);
        let es: f64 = s.iter().map(|v| v.norm_sqr()).sum();
        let ei: f64 = img.data().iter().map(|v| v.norm_sqr()).sum();
        assert!((es - 64.0 * ei).abs() < 1e-9 * es);
    }

    #[test]
    fn forward_matches_oracle() {
        let img = rand_image(16, 3);
        let pts = rand_points(200, 4);
        let f = nufft_forward(&img, &pts, &GriddingConfig::default()).unwrap();
        let e = rel_err(&f, &ndft_forward(&img, &pts));
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn zero_and_linearity() {
        let cfg = GriddingConfig::default();
        let pts = rand_points(50, 5);
        assert!(nufft_forward(&ComplexImage::zeros(16), &pts, &cfg)
            .unwrap()
            .iter()
            .all(|v| v.norm() == 0.0));
        let a = rand_image(16, 6);
        let b = rand_image(16, 7);
        let alpha = Complex64::new(0.3, -1.2);
        let mix = ComplexImage::new(
            16,
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| alpha * x + y)
                .collect(),
        )
        .unwrap();
        let fa = nufft_forward(&a, &pts, &cfg).unwrap();
        let fb = nufft_forward(&b, &pts, &cfg).unwrap();
        let fm = nufft_forward(&mix, &pts, &cfg).unwrap();
        for j in 0..pts.len() {
            assert!((fm[j] - (alpha * fa[j] + fb[j])).norm() <= 1e-12 * fm[j].norm().max(1.0));
        }
    }

    #[test]
    fn adjoint_identity_and_oracle() {
        let cfg = GriddingConfig::default();
        let plan = NufftPlan::new(16, &cfg).unwrap();
        let pts = rand_points(150, 8);
        let it = plan.prepare(&pts).unwrap();
        let x = rand_image(16, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y: Vec<Complex64> = (0..150)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let fx = plan.forward(&it, &x).unwrap();
        let fhy = plan.adjoint(&it, &y).unwrap();
        let lhs: Complex64 = fx.iter().zip(&y).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex64 = x
            .data()
            .iter()
            .zip(fhy.data())
            .map(|(a, b)| a * b.conj())
            .sum();
        assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm());
        let e = rel_err(fhy.data(), ndft_adjoint(&y, &pts, 16).data());
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn dc_sample_gives_constant_image() {
        let img = nufft_adjoint(
            &[Complex64::new(1.0, 0.0)],
            &[[0.0, 0.0]],
            16,
            &GriddingConfig::default(),
        )
        .unwrap();
        for v in img.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-4);
        }
    }

    #[test]
    fn error_shrinks_with_width() {
        let img = rand_image(16, 11);
        let pts = rand_points(100, 12);
        let exact = ndft_forward(&img, &pts);
        let errs: Vec<f64> = [2, 4, 6]
            .iter()
            .map(|&w| {
                let cfg = GriddingConfig {
                    kernel_width: w,
                    ..GriddingConfig::default()
                };
                rel_err(&nufft_forward(&img, &pts, &cfg).unwrap(), &exact)
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn rejects_out_of_band() {
        let cfg = GriddingConfig::default();
        assert!(nufft_forward(&rand_image(8, 1), &[[0.5, 0.0]], &cfg).is_err());
        assert!(nufft_forward(&rand_image(8, 1), &[[0.0, -0.51]], &cfg).is_err());
        assert!(nufft_adjoint(
            &[Complex64::new(1.0, 0.0)],
            &[[0.0, 0.0], [0.1, 0.1]],
            8,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn point_grad_matches_exact_derivative() {
        // Loss |s_j|² summed; finite differences of the direct sum.
        let cfg = GriddingConfig::default();
        let img = rand_image(16, 13);
        let pts = rand_points(30, 14);
        let s = nufft_forward(&img, &pts, &cfg).unwrap();
        let cot: Vec<Complex64> = s.iter().map(|v| 2.0 * v).collect();
        let g = nufft_point_grad(&img, &pts, &cot, &cfg).unwrap();
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..pts.len() {
            for d in 0..2 {
                let mut p = pts[j];
                p[d] += h;
                let up = ndft_forward(&img, &[p])[0].norm_sqr();
                p[d] -= 2.0 * h;
                let dn = ndft_forward(&img, &[p])[0].norm_sqr();
                let fd = (up - dn) / (2.0 * h);
                num += (fd - g[j][d]).powi(2);
                den += fd * fd;
            }
        }
        let e = (num / den).sqrt();
        assert!(e <= 1e-4, "relative error {e}");
    }

    #[test]
    fn point_grad_degenerate_cases() {
        let cfg = GriddingConfig::default();
        let ones = ComplexImage::from_real(8, &[1.0; 64]).unwrap();
        let s = nufft_forward(&ones, &[[0.0, 0.0]], &cfg).unwrap();
        let g = nufft_point_grad(&ones, &[[0.0, 0.0]], &[2.0 * s[0]], &cfg).unwrap();
        assert!(g[0][0].abs() < 1e-6 && g[0][1].abs() < 1e-6);
        let pts = rand_points(5, 1);
        let z = vec![Complex64::new(0.0, 0.0); 5];
        let g = nufft_point_grad(&rand_image(8, 2), &pts, &z, &cfg).unwrap();
        assert!(g.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn adjoint_point_grad_matches_finite_differences() {
        // L = Σ_x Re(conj(W(x)) · img(x)), img = adjoint(y) at points k.
        let cfg = GriddingConfig::default();
        let n = 16;
        let plan = NufftPlan::new(n, &cfg).unwrap();
        let pts = rand_points(12, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let y: Vec<Complex64> = (0..12)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let w = rand_image(n, 22);
        let it = plan.prepare(&pts).unwrap();
        let g = plan.adjoint_point_grad(&it, &y, &w).unwrap();
        let loss = |p: &[[f64; 2]]| -> f64 {
            let img = ndft_adjoint(&y, p, n);
            img.data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| (b.conj() * a).re)
                .sum()
        };
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..pts.len() {
            for d in 0..2 {
                let mut p = pts.clone();
                p[j][d] += h;
                let up = loss(&p);
                p[j][d] -= 2.0 * h;
                let dn = loss(&p);
                let fd = (up - dn) / (2.0 * h);
                num += (fd - g[j][d]).powi(2);
                den += fd * fd;
            }
        }
        let e = (num / den).sqrt();
        assert!(e <= 1e-4, "relative error {e}");
    }

    #[test]
    fn psf_cartesian_delta_and_center_peak() {
        let n = 16;
        let p = psf(&cartesian(n), n, &GriddingConfig::default()).unwrap();
        let c = (n / 2) * n + n / 2;
        assert!((p[c] - 1.0).abs() < 1e-12);
        let off = p
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != c)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        assert!(off <= 1e-6, "{off}");

        let p = psf(&rand_points(300, 30), n, &GriddingConfig::default()).unwrap();
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, c);
    }
}
