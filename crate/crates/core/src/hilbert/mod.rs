//! Discretized L²(0,1) and L²((0,1)²) on uniform periodic grids.
//!
//! Inner products use the rectangle rule with weight `1/n` per point (`1/n²`
//! in 2D), which is exact for trigonometric polynomials below the Nyquist
//! mode. Spectra are stored with the `1/n` normalization, so `c_k` are the
//! Fourier coefficients of the trigonometric interpolant and Parseval holds
//! against the discrete H-norm.

mod basis;
pub mod fft;

pub use basis::{RealBasis1D, RealBasis2D};

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use num_complex::Complex64;

use crate::error::{check_dim, Error, Result};
use fft::FftPlan;

fn validate_grid_size(n: usize) -> Result<()> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::Parameter(alloc::format!(
            "grid size must be even and at least 4, got {n}"
        )));
    }
    Ok(())
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(alloc::format!(
            "{what} has a non-finite value at index {i}"
        ))),
    }
}

/// Uniform periodic grid on [0, 1) with `n` points `t_i = i/n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid1D {
    n: usize,
}

impl Grid1D {
    pub fn new(n: usize) -> Result<Self> {
        validate_grid_size(n)?;
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    /// Highest mode that can be represented (the Nyquist mode).
    pub fn nyquist(&self) -> usize {
        self.n / 2
    }
}

/// Uniform periodic `n×n` grid on [0, 1)².
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid2D {
    n: usize,
}

impl Grid2D {
    pub fn new(n: usize) -> Result<Self> {
        validate_grid_size(n)?;
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nyquist(&self) -> usize {
        self.n / 2
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Samples `u(t_i)` of a periodic function on a [`Grid1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field1D {
    grid: Grid1D,
    values: Vec<f64>,
}

impl Field1D {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        check_dim("Field1D::new", grid.n(), values.len())?;
        ensure_finite(&values, "field")?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n()],
        }
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n()).map(|i| f(grid.point(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn same_grid(&self, other: &Self) -> Result<()> {
        check_dim("1D grid", self.grid.n(), other.grid.n())
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        Ok(weighted_dot(&self.values, &other.values, self.grid.spacing()))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(weighted_dot(&self.values, &self.values, self.grid.spacing()))
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        Ok(libm::sqrt(weighted_sq_dist(
            &self.values,
            &other.values,
            self.grid.spacing(),
        )))
    }

    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Self {
            grid: self.grid,
            values,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }
}

/// Samples `u(x_i, y_j)` stored row-major with index `i*n + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    grid: Grid2D,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        check_dim("Field2D::new", grid.len(), values.len())?;
        ensure_finite(&values, "field")?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n();
        let h = grid.spacing();
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i as f64 * h, j as f64 * h));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn weight(&self) -> f64 {
        let h = self.grid.spacing();
        h * h
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        check_dim("2D grid", self.grid.n(), other.grid.n())?;
        Ok(weighted_dot(&self.values, &other.values, self.weight()))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(weighted_dot(&self.values, &self.values, self.weight()))
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        check_dim("2D grid", self.grid.n(), other.grid.n())?;
        Ok(libm::sqrt(weighted_sq_dist(
            &self.values,
            &other.values,
            self.weight(),
        )))
    }
}

pub(crate) fn weighted_dot(a: &[f64], b: &[f64], w: f64) -> f64 {
    w * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

pub(crate) fn weighted_sq_dist(a: &[f64], b: &[f64], w: f64) -> f64 {
    w * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Half spectrum of a real field: `coeffs[k]` for `k = 0..=n/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum1D {
    grid: Grid1D,
    coeffs: Vec<Complex64>,
}

impl Spectrum1D {
    pub fn new(grid: Grid1D, coeffs: Vec<Complex64>) -> Result<Self> {
        check_dim("Spectrum1D::new", grid.n() / 2 + 1, coeffs.len())?;
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Multiplicity of mode `k` in the full spectrum (1 for the mean and
    /// Nyquist modes, 2 otherwise).
    pub fn multiplicity(&self, k: usize) -> f64 {
        if k == 0 || k == self.grid.nyquist() {
            1.0
        } else {
            2.0
        }
    }

    /// `Σ multiplicity(k)·|c_k|²`, equal to the squared H-norm of the field.
    pub fn energy(&self) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| self.multiplicity(k) * c.norm_sqr())
            .sum()
    }
}

pub fn inner_product(u: &Field1D, v: &Field1D) -> Result<f64> {
    u.inner(v)
}

pub fn norm(u: &Field1D) -> f64 {
    u.norm()
}

pub fn distance(u: &Field1D, v: &Field1D) -> Result<f64> {
    u.distance(v)
}

pub fn fft(u: &Field1D) -> Spectrum1D {
    let n = u.grid.n();
    let full = FftPlan::new(n).forward_real(&u.values);
    let scale = 1.0 / n as f64;
    let mut coeffs: Vec<Complex64> = full[..=n / 2].iter().map(|c| c * scale).collect();
    coeffs[0].im = 0.0;
    coeffs[n / 2].im = 0.0;
    Spectrum1D {
        grid: u.grid,
        coeffs,
    }
}

pub fn ifft(s: &Spectrum1D) -> Field1D {
    let n = s.grid.n();
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[0] = Complex64::new(s.coeffs[0].re, 0.0);
    for k in 1..n / 2 {
        full[k] = s.coeffs[k];
        full[n - k] = s.coeffs[k].conj();
    }
    full[n / 2] = Complex64::new(s.coeffs[n / 2].re, 0.0);
    FftPlan::new(n).inverse(&mut full);
    Field1D {
        grid: s.grid,
        values: full.iter().map(|c| c.re).collect(),
    }
}

/// Symbol actually applied at mode `k`: at the mean and Nyquist modes a real
/// field only sees the real part of `σ_k`.
pub fn effective_symbol(grid: Grid1D, k: usize, sigma: Complex64) -> Complex64 {
    if k == 0 || k == grid.nyquist() {
        Complex64::new(sigma.re, 0.0)
    } else {
        sigma
    }
}

/// Applies the Fourier multiplier `σ_k` on modes `0..=n/2`.
pub fn apply_multiplier(u: &Field1D, symbol: impl Fn(usize) -> Complex64) -> Field1D {
    let mut s = fft(u);
    let grid = s.grid;
    for (k, c) in s.coeffs.iter_mut().enumerate() {
        *c *= effective_symbol(grid, k, symbol(k));
    }
    ifft(&s)
}

/// Periodic derivative: mode `k` multiplied by `2πik`.
pub fn spectral_derivative(u: &Field1D) -> Field1D {
    apply_multiplier(u, |k| Complex64::new(0.0, TAU * k as f64))
}

fn check_cutoff(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n / 2 {
        return Err(Error::Parameter(alloc::format!(
            "mode cutoff must satisfy 0 < m <= n/2 = {}, got {m}",
            n / 2
        )));
    }
    Ok(())
}

/// Coordinates of `u` in the orthonormal basis `1, √2cos(2πkt), √2sin(2πkt)`,
/// `k = 1..=m`, laid out as `[c0, a1, b1, ..., am, bm]` (width `2m+1`).
pub fn truncate_modes(u: &Field1D, m: usize) -> Result<Vec<f64>> {
    check_cutoff(m, u.grid.n())?;
    Ok(RealBasis1D::new(u.grid.n(), m).analyze(&u.values))
}

/// Inverse of [`truncate_modes`]: zero-pads the missing modes and synthesizes.
pub fn reconstruct(c: &[f64], grid: Grid1D) -> Result<Field1D> {
    if c.len() % 2 == 0 {
        return Err(Error::Parameter(alloc::format!(
            "coefficient vector must have odd width 2m+1, got {}",
            c.len()
        )));
    }
    let m = (c.len() - 1) / 2;
    check_cutoff(m, grid.n())?;
    let values = RealBasis1D::new(grid.n(), m).synthesize(c);
    Field1D::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use core::f64::consts::PI;

    fn grid(n: usize) -> Grid1D {
        Grid1D::new(n).unwrap()
    }

    fn random_field(n: usize, s: &mut Stream) -> Field1D {
        Field1D::new(grid(n), (0..n).map(|_| s.normal()).collect()).unwrap()
    }

    fn band_limited(n: usize, top: usize, s: &mut Stream) -> Field1D {
        let coeffs: Vec<(f64, f64)> = (0..=top).map(|_| (s.normal(), s.normal())).collect();
        Field1D::from_fn(grid(n), |t| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, (a, b))| a * libm::cos(TAU * k as f64 * t) + b * libm::sin(TAU * k as f64 * t))
                .sum()
        })
    }

    #[test]
    fn grid_rejects_odd_and_small() {
        assert!(Grid1D::new(3).is_err());
        assert!(Grid1D::new(7).is_err());
        assert!(Grid1D::new(2).is_err());
        let g = grid(64);
        assert_eq!(g.spacing() * 64.0, 1.0);
    }

    #[test]
    fn field_rejects_bad_values() {
        assert!(Field1D::new(grid(4), vec![0.0; 3]).is_err());
        assert!(Field1D::new(grid(4), vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn inner_product_examples() {
        let g = grid(64);
        let s = Field1D::from_fn(g, |t| libm::sin(TAU * t));
        let c = Field1D::from_fn(g, |t| libm::cos(TAU * t));
        let one = Field1D::from_fn(g, |_| 1.0);
        assert!((inner_product(&s, &s).unwrap() - 0.5).abs() < 1e-14);
        assert!(inner_product(&s, &c).unwrap().abs() < 1e-12);
        assert!((inner_product(&one, &one).unwrap() - 1.0).abs() < 1e-14);
        let other = Field1D::zeros(grid(32));
        assert!(matches!(inner_product(&s, &other), Err(Error::Dimension { .. })));
    }

    #[test]
    fn norm_examples() {
        let u = Field1D::from_fn(grid(128), |t| libm::sin(2.0 * TAU * t));
        assert!((norm(&u) - 1.0 / libm::sqrt(2.0)).abs() < 1e-10);
        assert_eq!(norm(&Field1D::zeros(grid(8))), 0.0);
        assert_eq!(distance(&u, &u).unwrap(), 0.0);
    }

    #[test]
    fn fft_examples() {
        let g = grid(64);
        let c = Field1D::from_fn(g, |t| libm::cos(TAU * t));
        let s = fft(&c);
        for (k, coef) in s.coeffs().iter().enumerate() {
            if k == 1 {
                assert!((coef.re - 0.5).abs() < 1e-14 && coef.im.abs() < 1e-14);
            } else {
                assert!(coef.norm() < 1e-14, "mode {k}");
            }
        }
        let constant = Field1D::from_fn(g, |_| 2.5);
        let s = fft(&constant);
        assert!((s.coeffs()[0].re - 2.5).abs() < 1e-14);
        assert!(s.coeffs()[1..].iter().all(|c| c.norm() < 1e-14));

        let mut st = Stream::new(1);
        let u = random_field(64, &mut st);
        let back = ifft(&fft(&u));
        let err = u
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12, "round trip {err}");
    }

    #[test]
    fn parseval_on_random_fields() {
        let mut st = Stream::new(2);
        for n in [8, 64, 128, 12] {
            for _ in 0..20 {
                let u = random_field(n, &mut st);
                let e = u.norm() * u.norm();
                assert!((e - fft(&u).energy()).abs() <= 1e-12 * e);
            }
        }
    }

    #[test]
    fn derivative_examples() {
        let g = grid(64);
        let u = Field1D::from_fn(g, |t| libm::sin(3.0 * TAU * t));
        let du = spectral_derivative(&u);
        let expect = Field1D::from_fn(g, |t| 6.0 * PI * libm::cos(6.0 * PI * t));
        assert!(du.distance(&expect).unwrap() < 1e-9);
        assert!((du.norm() - 6.0 * PI / libm::sqrt(2.0)).abs() < 1e-9);

        let c = spectral_derivative(&Field1D::from_fn(g, |_| 4.0));
        assert!(c.norm() < 1e-13);

        // v_n = (1/n) sin(nπt) is periodic on [0,1] for even n.
        for n in [4usize, 8, 16, 32] {
            let v = Field1D::from_fn(grid(512), |t| libm::sin(n as f64 * PI * t) / n as f64);
            let dv = spectral_derivative(&v);
            assert!((dv.norm() - PI / libm::sqrt(2.0)).abs() < 1e-6, "n={n}");
        }
    }

    #[test]
    fn derivative_is_skew_adjoint() {
        let mut st = Stream::new(3);
        for _ in 0..20 {
            let u = band_limited(64, 20, &mut st);
            let v = band_limited(64, 20, &mut st);
            let lhs = spectral_derivative(&u).inner(&v).unwrap()
                + u.inner(&spectral_derivative(&v)).unwrap();
            assert!(lhs.abs() <= 1e-10, "{lhs}");
        }
    }

    #[test]
    fn truncation_examples() {
        let g = grid(64);
        let u = Field1D::from_fn(g, |t| libm::sin(TAU * t) + libm::cos(2.0 * TAU * t));
        let back = reconstruct(&truncate_modes(&u, 4).unwrap(), g).unwrap();
        assert!(back.distance(&u).unwrap() <= 1e-12);

        assert!(truncate_modes(&u, 0).is_err());
        assert!(truncate_modes(&u, 33).is_err());
        assert!(reconstruct(&[0.0; 4], g).is_err());

        let mut st = Stream::new(4);
        for _ in 0..100 {
            let u = random_field(64, &mut st);
            let c = truncate_modes(&u, 10).unwrap();
            let cn = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>());
            assert!(cn <= u.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn truncation_error_decreases_with_cutoff() {
        let mut st = Stream::new(5);
        let u = band_limited(128, 30, &mut st);
        // Tail energy oracle: sum of squared coefficients above the cutoff.
        let tail = |m: usize| {
            let s = fft(&u);
            libm::sqrt(
                (m + 1..=64)
                    .map(|k| s.multiplicity(k) * s.coeffs()[k].norm_sqr())
                    .sum::<f64>(),
            )
        };
        let mut prev = f64::INFINITY;
        for m in [8usize, 12, 16, 24, 29] {
            let err = reconstruct(&truncate_modes(&u, m).unwrap(), u.grid())
                .unwrap()
                .distance(&u)
                .unwrap();
            assert!(err > 0.0);
            assert!((err - tail(m)).abs() < 1e-10);
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn nyquist_cutoff_is_isometric() {
        let mut st = Stream::new(6);
        let u = random_field(16, &mut st);
        let c = truncate_modes(&u, 8).unwrap();
        let cn = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>());
        assert!((cn - u.norm()).abs() < 1e-12);
        let back = reconstruct(&c, u.grid()).unwrap();
        assert!(back.distance(&u).unwrap() < 1e-12);
    }
}
