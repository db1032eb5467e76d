//! Random Fourier-series inputs and datasets `{(u_j, A(u_j))}`.
//!
//! Draw order for one 1D field: the mode count `K`, then per mode the
//! frequency `n_j`, then `a_j`, `b_j`. For one 2D field: `K`, then per mode
//! `k_j`, `l_j`, `a_j`, `b_j`, `c_j`, `d_j`. Sample `j` of a dataset uses the
//! sub-stream [`Stream::substream`]`(seed, j)`, so samples can be generated in
//! any order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::error::{check_dim, Error, Result};
use crate::hilbert::{Field1D, Field2D, Grid1D, Grid2D};
use crate::operators::{self, Element, OperatorSpec};
use crate::rng::Stream;

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: usize) -> bool {
        self.min <= v && v <= self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct FourierFieldConfig {
    /// 1 or 2.
    pub dim: u8,
    /// Grid points per axis.
    pub grid_n: usize,
    /// Range of the number of modes `K` per sample.
    pub modes: IntRange,
    /// Frequency range `{n_min..n_max}` (per axis in 2D).
    pub freq: IntRange,
    /// Decay exponent β.
    pub beta: f64,
    pub seed: u64,
}

impl FourierFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::Config(format!("dim must be 1 or 2, got {}", self.dim)));
        }
        Grid1D::new(self.grid_n).map_err(|e| Error::Config(format!("grid_n: {e}")))?;
        if !(1 <= self.modes.min && self.modes.min <= self.modes.max) {
            return Err(Error::Config(format!(
                "modes: need 1 <= min <= max, got {}..{}",
                self.modes.min, self.modes.max
            )));
        }
        if !(1 <= self.freq.min && self.freq.min <= self.freq.max) {
            return Err(Error::Config(format!(
                "freq: need 1 <= min <= max, got {}..{}",
                self.freq.min, self.freq.max
            )));
        }
        let nyquist = self.grid_n / 2;
        if self.freq.max > nyquist {
            return Err(Error::Config(format!(
                "freq.max: frequency {} is above the Nyquist mode {nyquist} of grid {}",
                self.freq.max, self.grid_n
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// One term `n^{-β}(a sin(2πnt) + b cos(2πnt))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode1D {
    pub n: usize,
    pub a: f64,
    pub b: f64,
}

/// One term `|(k,l)|^{-β}[a sin sin + b sin cos + c cos sin + d cos cos]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode2D {
    pub k: usize,
    pub l: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

// sin and cos of 2π·freq·i/n for i in 0..n, with the phase reduced mod n.
fn trig_table(n: usize, freq: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|i| {
            let phase = TAU * ((freq * i) % n) as f64 / n as f64;
            (libm::sin(phase), libm::cos(phase))
        })
        .unzip()
}

pub fn fourier_field_1d(grid: Grid1D, modes: &[Mode1D], beta: f64) -> Result<Field1D> {
    let n = grid.n();
    let mut values = alloc::vec![0.0; n];
    for m in modes {
        if m.n == 0 || m.n > grid.nyquist() {
            return Err(Error::Config(format!("frequency {} outside 1..={}", m.n, grid.nyquist())));
        }
        let decay = libm::pow(m.n as f64, -beta);
        let (s, c) = trig_table(n, m.n);
        for i in 0..n {
            values[i] += decay * (m.a * s[i] + m.b * c[i]);
        }
    }
    Field1D::new(grid, values)
}

pub fn fourier_field_2d(grid: Grid2D, modes: &[Mode2D], beta: f64) -> Result<Field2D> {
    let n = grid.n();
    let mut values = alloc::vec![0.0; n * n];
    for m in modes {
        for f in [m.k, m.l] {
            if f == 0 || f > grid.nyquist() {
                return Err(Error::Config(format!("frequency {f} outside 1..={}", grid.nyquist())));
            }
        }
        let decay = libm::pow(libm::hypot(m.k as f64, m.l as f64), -beta);
        let (sx, cx) = trig_table(n, m.k);
        let (sy, cy) = trig_table(n, m.l);
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] += decay
                    * (m.a * sx[i] * sy[j] + m.b * sx[i] * cy[j] + m.c * cx[i] * sy[j] + m.d * cx[i] * cy[j]);
            }
        }
    }
    Field2D::new(grid, values)
}

fn require_dim(cfg: &FourierFieldConfig, dim: u8) -> Result<()> {
    cfg.validate()?;
    if cfg.dim != dim {
        return Err(Error::Config(format!("config has dim {}, sampler needs {dim}", cfg.dim)));
    }
    Ok(())
}

pub fn sample_field_1d(cfg: &FourierFieldConfig, rng: &mut Stream) -> Result<Field1D> {
    require_dim(cfg, 1)?;
    let count = rng.int_inclusive(cfg.modes.min, cfg.modes.max);
    let modes: Vec<Mode1D> = (0..count)
        .map(|_| {
            let n = rng.int_inclusive(cfg.freq.min, cfg.freq.max);
            let a = rng.normal();
            let b = rng.normal();
            Mode1D { n, a, b }
        })
        .collect();
    fourier_field_1d(Grid1D::new(cfg.grid_n)?, &modes, cfg.beta)
}

pub fn sample_field_2d(cfg: &FourierFieldConfig, rng: &mut Stream) -> Result<Field2D> {
    require_dim(cfg, 2)?;
    let count = rng.int_inclusive(cfg.modes.min, cfg.modes.max);
    let modes: Vec<Mode2D> = (0..count)
        .map(|_| {
            let k = rng.int_inclusive(cfg.freq.min, cfg.freq.max);
            let l = rng.int_inclusive(cfg.freq.min, cfg.freq.max);
            let a = rng.normal();
            let b = rng.normal();
            let c = rng.normal();
            let d = rng.normal();
            Mode2D { k, l, a, b, c, d }
        })
        .collect();
    fourier_field_2d(Grid2D::new(cfg.grid_n)?, &modes, cfg.beta)
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Manifest {
    pub operator: OperatorSpec,
    pub config: FourierFieldConfig,
    pub count: usize,
    pub created_by_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Element>,
    pub targets: Vec<Element>,
    pub manifest: Manifest,
}

impl Dataset {
    /// Assembles a dataset from parts, checking lengths and a shared grid.
    pub fn new(inputs: Vec<Element>, targets: Vec<Element>, manifest: Manifest) -> Result<Self> {
        check_dim("dataset targets", inputs.len(), targets.len())?;
        check_dim("dataset manifest count", manifest.count, inputs.len())?;
        let expected = match manifest.config.dim {
            1 => manifest.config.grid_n,
            _ => manifest.config.grid_n * manifest.config.grid_n,
        };
        for (i, (u, y)) in inputs.iter().zip(&targets).enumerate() {
            let found = if u.len() != expected { u.len() } else { y.len() };
            if found != expected || u.kind() != y.kind() {
                return Err(Error::Parameter(format!(
                    "sample {i} does not live on the dataset grid (expected {expected} values, found {found})"
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> u8 {
        self.manifest.config.dim
    }

    pub fn grid_n(&self) -> usize {
        self.manifest.config.grid_n
    }

    /// Samples with the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.count = indices.len();
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            manifest,
        }
    }
}

/// Draws input `j` of a dataset from its own sub-stream.
pub fn sample_input(cfg: &FourierFieldConfig, j: usize) -> Result<Element> {
    let mut rng = Stream::substream(cfg.seed, j as u64);
    Ok(match cfg.dim {
        1 => Element::Field1(sample_field_1d(cfg, &mut rng)?),
        _ => Element::Field2(sample_field_2d(cfg, &mut rng)?),
    })
}

pub fn build_dataset(a: &OperatorSpec, cfg: &FourierFieldConfig, count: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Parameter("dataset needs at least one sample".into()));
    }
    cfg.validate()?;
    a.validate()?;
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for j in 0..count {
        let u = sample_input(cfg, j)?;
        targets.push(operators::apply(a, &u)?);
        inputs.push(u);
    }
    Dataset::new(
        inputs,
        targets,
        Manifest {
            operator: a.clone(),
            config: cfg.clone(),
            count,
            created_by_version: String::from(env!("CARGO_PKG_VERSION")),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{fft, spectral_derivative};
    use num_complex::Complex64;

    fn cfg1(grid_n: usize, modes: (usize, usize), freq: (usize, usize), beta: f64, seed: u64) -> FourierFieldConfig {
        FourierFieldConfig {
            dim: 1,
            grid_n,
            modes: IntRange::new(modes.0, modes.1),
            freq: IntRange::new(freq.0, freq.1),
            beta,
            seed,
        }
    }

    #[test]
    fn single_mode_field_matches_closed_form() {
        let grid = Grid1D::new(128).unwrap();
        let u = fourier_field_1d(grid, &[Mode1D { n: 6, a: 1.0, b: 0.0 }], 0.5).unwrap();
        let s = libm::pow(6.0, -0.5);
        for (i, v) in u.values().iter().enumerate() {
            assert!((v - s * libm::sin(12.0 * core::f64::consts::PI * grid.point(i))).abs() < 1e-12);
        }
        assert!((u.norm() - s / libm::sqrt(2.0)).abs() < 1e-12);
    }

    #[test]
    fn unit_mode_2d_field() {
        let grid = Grid2D::new(32).unwrap();
        let m = Mode2D { k: 9, l: 9, a: 1.0, b: 1.0, c: 0.0, d: 0.0 };
        let u = fourier_field_2d(grid, &[m], 0.0).unwrap();
        let h = grid.spacing();
        for i in 0..32 {
            for j in 0..32 {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let e = libm::sin(TAU * 9.0 * x) * (libm::sin(TAU * 9.0 * y) + libm::cos(TAU * 9.0 * y));
                assert!((u.values()[i * 32 + j] - e).abs() < 1e-12);
            }
        }
        // Two orthogonal unit products, each of squared norm 1/4.
        assert!((u.norm() - libm::sqrt(0.5)).abs() < 1e-12);
        let zero = Mode2D { k: 3, l: 4, a: 0.0, b: 0.0, c: 0.0, d: 0.0 };
        assert!(fourier_field_2d(grid, &[zero], 1.0).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = cfg1(64, (3, 6), (2, 30), 0.5, 9);
        let a = sample_field_1d(&c, &mut Stream::new(4)).unwrap();
        let b = sample_field_1d(&c, &mut Stream::new(4)).unwrap();
        assert_eq!(a, b);
        let c2 = FourierFieldConfig { dim: 2, grid_n: 16, ..c };
        let c2 = FourierFieldConfig { freq: IntRange::new(2, 6), ..c2 };
        assert_eq!(
            sample_field_2d(&c2, &mut Stream::new(4)).unwrap(),
            sample_field_2d(&c2, &mut Stream::new(4)).unwrap()
        );
    }

    #[test]
    fn config_errors() {
        assert!(matches!(cfg1(64, (1, 1), (2, 40), 0.0, 0).validate(), Err(Error::Config(_))));
        assert!(cfg1(64, (0, 1), (2, 4), 0.0, 0).validate().is_err());
        assert!(cfg1(64, (2, 1), (2, 4), 0.0, 0).validate().is_err());
        assert!(cfg1(64, (1, 1), (2, 4), -1.0, 0).validate().is_err());
        assert!(cfg1(64, (1, 1), (2, 32), 0.0, 0).validate().is_ok());
        let grid = Grid1D::new(16).unwrap();
        assert!(fourier_field_1d(grid, &[Mode1D { n: 9, a: 1.0, b: 0.0 }], 0.0).is_err());
    }

    #[test]
    fn undecayed_norm_statistics_match_mode_energies() {
        // Each mode contributes (a² + b²)/2 with E = 1; distinct frequencies are
        // orthogonal, coinciding ones add coherently, so E‖u‖² = E[K] exactly.
        let c = cfg1(64, (1, 4), (2, 30), 0.0, 77);
        let draws = 10_000;
        let mut rng = Stream::new(c.seed);
        let mean: f64 = (0..draws)
            .map(|_| {
                let u = sample_field_1d(&c, &mut rng).unwrap();
                u.norm() * u.norm()
            })
            .sum::<f64>()
            / draws as f64;
        // E[K] = 2.5; sd of ‖u‖² is roughly 2, so 4 standard errors ≈ 0.08.
        assert!((mean - 2.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn energy_stays_inside_the_frequency_band() {
        let c = cfg1(128, (3, 6), (5, 20), 0.5, 3);
        for j in 0..50 {
            let u = sample_input(&c, j).unwrap();
            let s = fft(u.as_field1().unwrap());
            let total = s.energy();
            let band: f64 = (5..=20).map(|k| s.multiplicity(k) * s.coeffs()[k].norm_sqr()).sum();
            assert!(band >= (1.0 - 1e-10) * total);
        }
    }

    #[test]
    fn train_and_test_2d_spectra_are_disjoint() {
        let train = FourierFieldConfig {
            dim: 2,
            grid_n: 32,
            modes: IntRange::new(1, 8),
            freq: IntRange::new(2, 6),
            beta: 0.0,
            seed: 1,
        };
        let test = FourierFieldConfig { freq: IntRange::new(9, 16), seed: 2, ..train.clone() };
        let mut rng = Stream::new(5);
        let basis_support = |cfg: &FourierFieldConfig, rng: &mut Stream| {
            let u = sample_field_2d(cfg, rng).unwrap();
            let n = 32;
            let mut buf: Vec<Complex64> = u.values().iter().map(|v| Complex64::new(*v, 0.0)).collect();
            let plan = crate::hilbert::fft::FftPlan::new(n);
            crate::hilbert::fft::transform_2d(&plan, &mut buf, false);
            let mut modes = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if buf[i * n + j].norm() > 1e-8 {
                        let f = |k: usize| if k > n / 2 { n - k } else { k };
                        modes.push((f(i), f(j)));
                    }
                }
            }
            modes
        };
        for _ in 0..20 {
            assert!(basis_support(&train, &mut rng).iter().all(|&(k, l)| (2..=6).contains(&k) && (2..=6).contains(&l)));
            assert!(basis_support(&test, &mut rng).iter().all(|&(k, l)| (9..=16).contains(&k) && (9..=16).contains(&l)));
        }
    }

    #[test]
    fn derivative_dataset_targets_follow_the_symbol() {
        let c = cfg1(64, (3, 6), (2, 30), 0.5, 11);
        let ds = build_dataset(&OperatorSpec::DerivativePeriodic1D, &c, 4).unwrap();
        assert_eq!(ds.len(), 4);
        for (u, y) in ds.inputs.iter().zip(&ds.targets) {
            let su = fft(u.as_field1().unwrap());
            let sy = fft(y.as_field1().unwrap());
            for k in 0..32 {
                let expect = su.coeffs()[k] * Complex64::new(0.0, TAU * k as f64);
                assert!((sy.coeffs()[k] - expect).norm() < 1e-9 * (1.0 + expect.norm()));
            }
            assert_eq!(y.as_field1().unwrap(), &spectral_derivative(u.as_field1().unwrap()));
        }
        let again = build_dataset(&OperatorSpec::DerivativePeriodic1D, &c, 4).unwrap();
        assert_eq!(ds, again);
        assert!(build_dataset(&OperatorSpec::DerivativePeriodic1D, &c, 0).is_err());
    }
}
