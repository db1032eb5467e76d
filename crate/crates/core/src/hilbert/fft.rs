//! Complex discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 transform; any other length
//! falls back to a direct O(n²) sum over a precomputed root table. Both
//! directions are unnormalized: `forward` uses `exp(-2πi jk/n)` and `inverse`
//! uses `exp(+2πi jk/n)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use num_complex::Complex64;

#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    /// `roots[k] = exp(-2πi k/n)` for `k < n`.
    roots: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let roots = (0..n)
            .map(|k| {
                let theta = -TAU * k as f64 / n as f64;
                Complex64::new(libm::cos(theta), libm::sin(theta))
            })
            .collect();
        let bitrev = if n.is_power_of_two() {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect()
        } else {
            Vec::new()
        };
        Self { n, roots, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }

    fn root(&self, k: usize, inverse: bool) -> Complex64 {
        let w = self.roots[k % self.n];
        if inverse {
            w.conj()
        } else {
            w
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.n, "FFT buffer length");
        if self.n.is_power_of_two() {
            self.radix2(buf, inverse);
        } else {
            self.direct(buf, inverse);
        }
    }

    fn radix2(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.root(k * stride, inverse);
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len *= 2;
        }
    }

    fn direct(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let input = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, x) in input.iter().enumerate() {
                acc += *x * self.root((j * k) % n, inverse);
            }
            *out = acc;
        }
    }

    /// Forward transform of a real signal.
    pub fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }
}

/// Separable 2D transform of an `n×n` row-major buffer.
pub fn transform_2d(plan: &FftPlan, buf: &mut [Complex64], inverse: bool) {
    let n = plan.len();
    assert_eq!(buf.len(), n * n);
    for row in buf.chunks_mut(n) {
        plan.transform(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        plan.transform(&mut col, inverse);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
}
