//! Target operators, their resolvents `J_λ = (I + λA)⁻¹`, Yosida
//! approximations `A_λ = (I − J_λ)/λ`, and graph sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;
use num_complex::Complex64;

use crate::error::{check_dim, Error, Result};
use crate::hilbert::{self, Field1D, Field2D, Grid1D, Grid2D};

/// A point of H: a scalar (H = ℝ), a 1D field or a 2D field.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Scalar(f64),
    Field1(Field1D),
    Field2(Field2D),
}

impl Element {
    pub fn kind(&self) -> &'static str {
        match self {
            Element::Scalar(_) => "scalar",
            Element::Field1(_) => "1D field",
            Element::Field2(_) => "2D field",
        }
    }

    /// Number of stored values (1 for scalars).
    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Element::Scalar(x) => core::slice::from_ref(x),
            Element::Field1(f) => f.values(),
            Element::Field2(f) => f.values(),
        }
    }

    /// Quadrature weight of each stored value in the H inner product.
    pub fn weight(&self) -> f64 {
        match self {
            Element::Scalar(_) => 1.0,
            Element::Field1(f) => f.grid().spacing(),
            Element::Field2(f) => {
                let h = f.grid().spacing();
                h * h
            }
        }
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        match (self, other) {
            (Element::Scalar(_), Element::Scalar(_)) => Ok(()),
            (Element::Field1(a), Element::Field1(b)) => {
                check_dim("1D grid", a.grid().n(), b.grid().n())
            }
            (Element::Field2(a), Element::Field2(b)) => {
                check_dim("2D grid", a.grid().n(), b.grid().n())
            }
            _ => Err(Error::Parameter(format!(
                "cannot combine a {} with a {}",
                self.kind(),
                other.kind()
            ))),
        }
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.compatible(other)?;
        Ok(hilbert::weighted_dot(self.values(), other.values(), self.weight()))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(hilbert::weighted_dot(self.values(), self.values(), self.weight()))
    }

    pub fn sq_distance(&self, other: &Self) -> Result<f64> {
        self.compatible(other)?;
        Ok(hilbert::weighted_sq_dist(self.values(), other.values(), self.weight()))
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        Ok(libm::sqrt(self.sq_distance(other)?))
    }

    /// Same shape as `self`, values replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Ok(match self {
            Element::Scalar(_) => {
                check_dim("scalar", 1, values.len())?;
                Element::Scalar(values[0])
            }
            Element::Field1(f) => Element::Field1(Field1D::new(f.grid(), values)?),
            Element::Field2(f) => Element::Field2(Field2D::new(f.grid(), values)?),
        })
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.compatible(other)?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + alpha * b)
            .collect();
        self.with_values(values)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let values = self.values().iter().map(|v| alpha * v).collect();
        self.with_values(values).expect("same shape")
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Element::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_field1(&self) -> Option<&Field1D> {
        match self {
            Element::Field1(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_field2(&self) -> Option<&Field2D> {
        match self {
            Element::Field2(f) => Some(f),
            _ => None,
        }
    }
}

impl From<f64> for Element {
    fn from(x: f64) -> Self {
        Element::Scalar(x)
    }
}

impl From<Field1D> for Element {
    fn from(f: Field1D) -> Self {
        Element::Field1(f)
    }
}

impl From<Field2D> for Element {
    fn from(f: Field2D) -> Self {
        Element::Field2(f)
    }
}

/// Default regularization inside `|∇u|_ε = sqrt(|∇u|² + ε²)`.
pub const DEFAULT_PLAPLACE_EPS: f64 = 1e-8;
/// Iteration cap of the p-Laplacian resolvent solver.
pub const RESOLVENT_MAX_ITERS: usize = 5000;
/// Default gradient-norm tolerance of the p-Laplacian resolvent solver.
pub const RESOLVENT_DEFAULT_TOL: f64 = 1e-7;

/// Target operator descriptions.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OperatorSpec {
    /// `u ↦ u'` on periodic 1D fields.
    DerivativePeriodic1D,
    /// `u ↦ −div(|∇u|_ε^{p−2} ∇u)` on periodic 2D fields.
    PLaplacian2D { p: f64, eps: f64 },
    /// `x ↦ ∂|x|` on ℝ.
    AbsSubdifferential,
    /// Monotone but not maximal: `{0}` for `x<0`, `{0,1}` at 0, `{1}` for `x>0`.
    StepOperator,
    /// Fourier multiplier on 1D fields, one `[re, im]` per mode `0..=n/2`.
    SpectralMultiplier1D { multiplier: Vec<[f64; 2]> },
}

impl OperatorSpec {
    pub fn plaplacian(p: f64) -> Self {
        OperatorSpec::PLaplacian2D {
            p,
            eps: DEFAULT_PLAPLACE_EPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OperatorSpec::DerivativePeriodic1D => "derivative_periodic_1d",
            OperatorSpec::PLaplacian2D { .. } => "plaplacian_2d",
            OperatorSpec::AbsSubdifferential => "abs_subdifferential",
            OperatorSpec::StepOperator => "step_operator",
            OperatorSpec::SpectralMultiplier1D { .. } => "spectral_multiplier_1d",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OperatorSpec::PLaplacian2D { p, eps } => {
                if !(*p > 1.0 && p.is_finite()) {
                    return Err(Error::Parameter(format!("p-Laplacian needs p > 1, got {p}")));
                }
                if !(*eps >= 0.0 && eps.is_finite()) {
                    return Err(Error::Parameter(format!("p-Laplacian needs eps >= 0, got {eps}")));
                }
                Ok(())
            }
            OperatorSpec::SpectralMultiplier1D { multiplier } => {
                if multiplier.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("multiplier has non-finite entries".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// True for operators offering a resolvent (the maximally monotone ones).
    pub fn has_resolvent(&self) -> bool {
        !matches!(self, OperatorSpec::StepOperator)
    }

    fn symbol(&self, grid: Grid1D) -> Result<Vec<Complex64>> {
        let modes = grid.nyquist() + 1;
        let raw: Vec<Complex64> = match self {
            OperatorSpec::DerivativePeriodic1D => (0..modes)
                .map(|k| Complex64::new(0.0, TAU * k as f64))
                .collect(),
            OperatorSpec::SpectralMultiplier1D { multiplier } => {
                check_dim("multiplier length", modes, multiplier.len())?;
                multiplier.iter().map(|[re, im]| Complex64::new(*re, *im)).collect()
            }
            _ => return Err(Error::Capability(format!("{} is not a Fourier multiplier", self.name()))),
        };
        Ok(raw
            .into_iter()
            .enumerate()
            .map(|(k, s)| hilbert::effective_symbol(grid, k, s))
            .collect())
    }
}

/// Outcome of a resolvent solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventSolveReport {
    pub iterations: usize,
    /// `‖u + λA(u) − z‖_H` (distance to `λA(u)` for set-valued `A`).
    pub residual: f64,
    pub converged: bool,
}

fn require_finite(u: &Element) -> Result<()> {
    if u.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {} input", u.kind())))
    }
}

fn wrong_input(a: &OperatorSpec, u: &Element) -> Error {
    Error::Parameter(format!("{} cannot act on a {}", a.name(), u.kind()))
}

fn sign_min_norm(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates `A(u)`, returning the minimal-norm element `A⁰(u)` where `A` is
/// set-valued.
pub fn apply(a: &OperatorSpec, u: &Element) -> Result<Element> {
    a.validate()?;
    require_finite(u)?;
    match (a, u) {
        (OperatorSpec::DerivativePeriodic1D, Element::Field1(f)) => {
            Ok(Element::Field1(hilbert::spectral_derivative(f)))
        }
        (OperatorSpec::SpectralMultiplier1D { .. }, Element::Field1(f)) => {
            let sym = a.symbol(f.grid())?;
            Ok(Element::Field1(hilbert::apply_multiplier(f, |k| sym[k])))
        }
        (OperatorSpec::PLaplacian2D { p, eps }, Element::Field2(f)) => {
            let values = plaplacian_apply(f.grid(), f.values(), *p, *eps);
            Ok(Element::Field2(Field2D::new(f.grid(), values)?))
        }
        (OperatorSpec::AbsSubdifferential, Element::Scalar(x)) => Ok(Element::Scalar(sign_min_norm(*x))),
        (OperatorSpec::StepOperator, Element::Scalar(x)) => {
            Ok(Element::Scalar(if *x > 0.0 { 1.0 } else { 0.0 }))
        }
        _ => Err(wrong_input(a, u)),
    }
}

/// Forward-difference gradient `(∂x u, ∂y u)` on the periodic grid.
fn forward_gradient(n: usize, h: f64, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    for i in 0..n {
        let ip = (i + 1) % n;
        for j in 0..n {
            let jp = (j + 1) % n;
            let c = u[i * n + j];
            gx[i * n + j] = (u[ip * n + j] - c) / h;
            gy[i * n + j] = (u[i * n + jp] - c) / h;
        }
    }
    (gx, gy)
}

/// `−div F` with the backward-difference divergence, the negative adjoint of
/// [`forward_gradient`].
fn neg_divergence(n: usize, h: f64, fx: &[f64], fy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let im = (i + n - 1) % n;
        for j in 0..n {
            let jm = (j + n - 1) % n;
            let div = (fx[i * n + j] - fx[im * n + j]) / h + (fy[i * n + j] - fy[i * n + jm]) / h;
            out[i * n + j] = -div;
        }
    }
    out
}

fn plaplacian_apply(grid: Grid2D, u: &[f64], p: f64, eps: f64) -> Vec<f64> {
    let n = grid.n();
    let h = grid.spacing();
    let (mut gx, mut gy) = forward_gradient(n, h, u);
    for (x, y) in gx.iter_mut().zip(gy.iter_mut()) {
        let mag2 = *x * *x + *y * *y + eps * eps;
        let coef = if mag2 == 0.0 { 0.0 } else { libm::pow(mag2, 0.5 * (p - 2.0)) };
        *x *= coef;
        *y *= coef;
    }
    neg_divergence(n, h, &gx, &gy)
}

/// Discrete energy `J(u) = (1/p) Σ h² (|∇u|² + ε²)^{p/2}`; its H-gradient is
/// the discrete p-Laplacian.
pub fn plaplacian_energy(grid: Grid2D, u: &[f64], p: f64, eps: f64) -> f64 {
    let n = grid.n();
    let h = grid.spacing();
    let (gx, gy) = forward_gradient(n, h, u);
    let total: f64 = gx
        .iter()
        .zip(&gy)
        .map(|(x, y)| libm::pow(x * x + y * y + eps * eps, 0.5 * p))
        .sum();
    h * h * total / p
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("resolvent parameter must be > 0, got {lambda}")))
    }
}

/// Solves `u + λA(u) ∋ z`.
pub fn resolvent(
    a: &OperatorSpec,
    lambda: f64,
    z: &Element,
    tol: f64,
) -> Result<(Element, ResolventSolveReport)> {
    a.validate()?;
    check_lambda(lambda)?;
    require_finite(z)?;
    match (a, z) {
        (OperatorSpec::DerivativePeriodic1D | OperatorSpec::SpectralMultiplier1D { .. }, Element::Field1(f)) => {
            let sym = a.symbol(f.grid())?;
            let mut spec = hilbert::fft(f);
            for (c, s) in spec.coeffs_mut().iter_mut().zip(&sym) {
                let denom = Complex64::new(1.0, 0.0) + *s * lambda;
                if denom.norm() == 0.0 {
                    return Err(Error::Numeric("1 + λσ_k vanishes".into()));
                }
                *c /= denom;
            }
            let u = Element::Field1(hilbert::ifft(&spec));
            let residual = linear_residual(a, lambda, &u, z)?;
            Ok((
                u,
                ResolventSolveReport {
                    iterations: 1,
                    residual,
                    converged: residual <= tol,
                },
            ))
        }
        (OperatorSpec::AbsSubdifferential, Element::Scalar(x)) => {
            let u = sign_min_norm(*x) * (x.abs() - lambda).max(0.0);
            let residual = if u != 0.0 {
                (u + lambda * sign_min_norm(u) - x).abs()
            } else {
                (x.abs() - lambda).max(0.0)
            };
            Ok((
                Element::Scalar(u),
                ResolventSolveReport {
                    iterations: 0,
                    residual,
                    converged: residual <= tol,
                },
            ))
        }
        (OperatorSpec::PLaplacian2D { p, eps }, Element::Field2(f)) => {
            let (u, report) = plaplacian_resolvent(f, lambda, *p, *eps, tol);
            Ok((Element::Field2(u), report))
        }
        (OperatorSpec::StepOperator, _) => Err(Error::Capability(
            "the step operator is not maximally monotone; no resolvent is offered".into(),
        )),
        _ => Err(wrong_input(a, z)),
    }
}

fn linear_residual(a: &OperatorSpec, lambda: f64, u: &Element, z: &Element) -> Result<f64> {
    let au = apply(a, u)?;
    u.axpy(lambda, &au)?.distance(z)
}

/// Gradient descent with Armijo backtracking on
/// `½‖u − z‖² + λ J_{p,ε}(u)`, measured in the H inner product.
fn plaplacian_resolvent(z: &Field2D, lambda: f64, p: f64, eps: f64, tol: f64) -> (Field2D, ResolventSolveReport) {
    let grid = z.grid();
    let w = {
        let h = grid.spacing();
        h * h
    };
    let zv = z.values();
    let objective = |u: &[f64]| {
        0.5 * hilbert::weighted_sq_dist(u, zv, w) + lambda * plaplacian_energy(grid, u, p, eps)
    };
    let gradient = |u: &[f64]| {
        let au = plaplacian_apply(grid, u, p, eps);
        u.iter()
            .zip(zv)
            .zip(&au)
            .map(|((ui, zi), ai)| ui - zi + lambda * ai)
            .collect::<Vec<f64>>()
    };

    let mut u = zv.to_vec();
    let mut f = objective(&u);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut g = gradient(&u);
    let mut gnorm2 = hilbert::weighted_dot(&g, &g, w);
    while libm::sqrt(gnorm2) > tol && iterations < RESOLVENT_MAX_ITERS {
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(&g).map(|(ui, gi)| ui - step * gi).collect();
            let ft = objective(&trial);
            // Slack of a few ulps keeps the search moving once `f` stalls at
            // rounding level while the gradient is still above `tol`.
            if ft <= f - 1e-4 * step * gnorm2 + 4.0 * f64::EPSILON * f.abs() {
                u = trial;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        g = gradient(&u);
        gnorm2 = hilbert::weighted_dot(&g, &g, w);
        step = (step * 2.0).min(1.0);
    }
    let residual = libm::sqrt(gnorm2);
    let field = Field2D::new(grid, u).expect("finite iterates");
    (
        field,
        ResolventSolveReport {
            iterations,
            residual,
            converged: residual <= tol,
        },
    )
}

/// `A_λ(z) = (z − J_λ z)/λ`.
pub fn yosida(a: &OperatorSpec, lambda: f64, z: &Element, tol: f64) -> Result<Element> {
    let (u, _) = resolvent(a, lambda, z, tol)?;
    if let (OperatorSpec::AbsSubdifferential, Element::Scalar(x)) = (a, z) {
        // Closed form clamp(x/λ, −1, 1): exactly sign(x) once λ ≤ |x|.
        return Ok(Element::Scalar((x / lambda).clamp(-1.0, 1.0)));
    }
    Ok(z.axpy(-1.0, &u)?.scaled(1.0 / lambda))
}

/// Finite sample of an operator graph in H×H.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub pairs: Vec<(Element, Element)>,
    pub label: String,
}

impl GraphSample {
    pub fn new(pairs: Vec<(Element, Element)>, label: impl Into<String>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Parameter("a graph sample needs at least one pair".into()));
        }
        let (x0, y0) = &pairs[0];
        for (x, y) in &pairs {
            x.compatible(x0)?;
            y.compatible(y0)?;
        }
        Ok(Self {
            pairs,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Scalar graph from `(x, y)` points.
    pub fn scalar(points: impl IntoIterator<Item = (f64, f64)>, label: impl Into<String>) -> Result<Self> {
        Self::new(
            points
                .into_iter()
                .map(|(x, y)| (Element::Scalar(x), Element::Scalar(y)))
                .collect(),
            label,
        )
    }
}

/// How to sample a graph.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleMode {
    /// One pair `(u, A⁰(u))` per input.
    MinNorm,
    /// Every `(u, v)` with `v` on the given output grid and `v ∈ A(u)`
    /// (scalar operators only).
    SetValued(Vec<f64>),
}

const MEMBERSHIP_TOL: f64 = 1e-12;

fn scalar_contains(a: &OperatorSpec, x: f64, v: f64) -> Result<bool> {
    let near = |t: f64| (v - t).abs() <= MEMBERSHIP_TOL;
    Ok(match a {
        OperatorSpec::AbsSubdifferential => {
            if x == 0.0 {
                (-1.0 - MEMBERSHIP_TOL..=1.0 + MEMBERSHIP_TOL).contains(&v)
            } else {
                near(sign_min_norm(x))
            }
        }
        OperatorSpec::StepOperator => {
            if x < 0.0 {
                near(0.0)
            } else if x > 0.0 {
                near(1.0)
            } else {
                near(0.0) || near(1.0)
            }
        }
        _ => {
            return Err(Error::Capability(format!(
                "set-valued sampling is only offered for scalar operators, not {}",
                a.name()
            )))
        }
    })
}

pub fn sample_graph(a: &OperatorSpec, inputs: &[Element], mode: &SampleMode) -> Result<GraphSample> {
    let mut pairs = Vec::new();
    match mode {
        SampleMode::MinNorm => {
            for u in inputs {
                pairs.push((u.clone(), apply(a, u)?));
            }
        }
        SampleMode::SetValued(outputs) => {
            for u in inputs {
                let x = u.as_scalar().ok_or_else(|| {
                    Error::Capability(format!(
                        "set-valued sampling is only offered for scalar inputs, got a {}",
                        u.kind()
                    ))
                })?;
                for &v in outputs {
                    if scalar_contains(a, x, v)? {
                        pairs.push((u.clone(), Element::Scalar(v)));
                    }
                }
            }
        }
    }
    let label = match mode {
        SampleMode::MinNorm => format!("{} (min-norm)", a.name()),
        SampleMode::SetValued(_) => format!("{} (set-valued)", a.name()),
    };
    GraphSample::new(pairs, label)
}
