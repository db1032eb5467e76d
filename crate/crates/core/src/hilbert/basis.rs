use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::SQRT_2;
use num_complex::Complex64;

use super::fft::FftPlan;

/// Orthonormal real trigonometric basis truncated at mode `m` on an `n`-point
/// grid. `analyze` is the orthogonal projection onto its span in coordinates
/// and `synthesize` is its adjoint, so both are 1-Lipschitz and
/// `synthesize ∘ analyze` is the band-limit projection.
#[derive(Debug, Clone)]
pub struct RealBasis1D {
    n: usize,
    m: usize,
    plan: FftPlan,
}

impl RealBasis1D {
    pub fn new(n: usize, m: usize) -> Self {
        assert!(m >= 1 && m <= n / 2, "cutoff out of range");
        Self {
            n,
            m,
            plan: FftPlan::new(n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cutoff(&self) -> usize {
        self.m
    }

    pub fn width(&self) -> usize {
        2 * self.m + 1
    }

    pub fn analyze(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.analyze_into(values, &mut out);
        out
    }

    pub fn analyze_into(&self, values: &[f64], out: &mut [f64]) {
        let n = self.n;
        let spec = self.plan.forward_real(values);
        let scale = 1.0 / n as f64;
        out[0] = spec[0].re * scale;
        for k in 1..=self.m {
            let c = spec[k] * scale;
            if 2 * k == n {
                out[2 * k - 1] = c.re;
                out[2 * k] = 0.0;
            } else {
                out[2 * k - 1] = SQRT_2 * c.re;
                out[2 * k] = -SQRT_2 * c.im;
            }
        }
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.synthesize_into(coeffs, &mut out);
        out
    }

    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut spec = vec![Complex64::new(0.0, 0.0); n];
        spec[0] = Complex64::new(coeffs[0], 0.0);
        for k in 1..=self.m {
            let (a, b) = (coeffs[2 * k - 1], coeffs[2 * k]);
            if 2 * k == n {
                spec[k] = Complex64::new(a, 0.0);
            } else {
                let c = Complex64::new(a, -b) / SQRT_2;
                spec[k] = c;
                spec[n - k] = c.conj();
            }
        }
        self.plan.inverse(&mut spec);
        for (o, c) in out.iter_mut().zip(&spec) {
            *o = c.re;
        }
    }
}

/// Tensor product of two [`RealBasis1D`]; feature `(a, b)` sits at `a*w + b`
/// where `a` indexes the x-direction and `b` the y-direction.
#[derive(Debug, Clone)]
pub struct RealBasis2D {
    line: RealBasis1D,
}

impl RealBasis2D {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            line: RealBasis1D::new(n, m),
        }
    }

    pub fn n(&self) -> usize {
        self.line.n
    }

    pub fn cutoff(&self) -> usize {
        self.line.m
    }

    pub fn width(&self) -> usize {
        let w = self.line.width();
        w * w
    }

    pub fn analyze(&self, values: &[f64]) -> Vec<f64> {
        let n = self.line.n;
        let w = self.line.width();
        // Along x for every fixed y.
        let mut partial = vec![0.0; w * n];
        let mut col = vec![0.0; n];
        let mut feat = vec![0.0; w];
        for j in 0..n {
            for i in 0..n {
                col[i] = values[i * n + j];
            }
            self.line.analyze_into(&col, &mut feat);
            for a in 0..w {
                partial[a * n + j] = feat[a];
            }
        }
        let mut out = vec![0.0; w * w];
        for a in 0..w {
            self.line
                .analyze_into(&partial[a * n..(a + 1) * n], &mut out[a * w..(a + 1) * w]);
        }
        out
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.line.n;
        let w = self.line.width();
        let mut partial = vec![0.0; w * n];
        for a in 0..w {
            self.line
                .synthesize_into(&coeffs[a * w..(a + 1) * w], &mut partial[a * n..(a + 1) * n]);
        }
        let mut out = vec![0.0; n * n];
        let mut feat = vec![0.0; w];
        let mut col = vec![0.0; n];
        for j in 0..n {
            for a in 0..w {
                feat[a] = partial[a * n + j];
            }
            self.line.synthesize_into(&feat, &mut col);
            for i in 0..n {
                out[i * n + j] = col[i];
            }
        }
        out
    }
}
