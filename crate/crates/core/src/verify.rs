//! Numerical checks of the counterexamples and convergence statements:
//! each verifier computes the quantitative ingredients of an argument and
//! passes or fails on fixed tolerances.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::graphdist::{graph_distance, sampling_resolution, CompactWindow};
use crate::hilbert::fft::{transform_2d, FftPlan};
use crate::hilbert::{spectral_derivative, Field1D, Grid1D, RealBasis1D, RealBasis2D};
use crate::operators::{apply, sample_graph, yosida, Element, GraphSample, OperatorSpec, SampleMode};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerifyOutcome {
    pub name: String,
    pub quantities: Vec<(String, f64)>,
    pub pass: bool,
    pub detail: String,
}

impl VerifyOutcome {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            quantities: Vec::new(),
            pass: true,
            detail: String::new(),
        }
    }

    fn record(&mut self, key: impl Into<String>, value: f64) {
        self.quantities.push((key.into(), value));
    }

    /// Value of the first quantity called `key`.
    pub fn quantity(&self, key: &str) -> Option<f64> {
        self.quantities.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.pass = false;
            if !self.detail.is_empty() {
                self.detail.push_str("; ");
            }
            self.detail.push_str("FAILED ");
            self.detail.push_str(&what.into());
        }
    }

    fn note(&mut self, text: &str) {
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(text);
    }
}

/// `v_n(x) = sin(nπx)/n` for even `n`: `‖v_n‖ → 0` while `‖v_n'‖ = π/√2`.
pub fn verify_uniform_counterexample(n_list: &[usize], grid_n: usize) -> Result<VerifyOutcome> {
    let grid = Grid1D::new(grid_n)?;
    let mut out = VerifyOutcome::new("uniform_counterexample");
    let target = PI / SQRT_2;
    out.record("lower_bound", target - 1.0);
    if n_list.is_empty() {
        out.note("warning: empty n list, nothing to check");
        return Ok(out);
    }
    let mut prev = f64::INFINITY;
    for &n in n_list {
        // sin(nπx) has frequency n/2 on the unit period.
        if n == 0 || n % 2 != 0 || n / 2 > grid.nyquist() {
            return Err(Error::Parameter(format!(
                "n = {n} must be even and at most twice the Nyquist frequency {}",
                grid.nyquist()
            )));
        }
        let v = Field1D::from_fn(grid, |x| libm::sin(n as f64 * PI * x) / n as f64);
        let dv = spectral_derivative(&v);
        let (nv, ndv) = (v.norm(), dv.norm());
        out.record(format!("norm_v_{n}"), nv);
        out.record(format!("norm_Av_{n}"), ndv);
        out.check(nv <= (1.0 + 1e-6) / (n as f64 * SQRT_2), format!("‖v_{n}‖ = {nv} above 1/(n√2)"));
        out.check((ndv - target).abs() <= 1e-4, format!("‖A v_{n}‖ = {ndv} differs from π/√2"));
        out.check(nv < prev, format!("‖v_{n}‖ does not decrease"));
        prev = nv;
    }
    out.note("checks the quantities of the argument (‖v_n‖ → 0, ‖A v_n‖ = π/√2), not non-existence itself");
    Ok(out)
}

/// Sum of `n^{-s}` for `n > big`, bracketed by integrals.
fn zeta_tail_bounds(s: f64, big: usize) -> (f64, f64) {
    let lo = libm::pow(big as f64 + 1.0, 1.0 - s) / (s - 1.0);
    let hi = libm::pow(big as f64, 1.0 - s) / (s - 1.0);
    (lo, hi)
}

/// `u_n(x) = sin(2πnx)/√n`: `‖A u_n‖ = √(2n)π`, and the weighted series
/// `Σ w_n (‖A u_n‖/2)^p` with `w_n = c/n^{1+p/2}` diverges like the harmonic series.
pub fn verify_lp_counterexample(n_partial: usize, p: f64, grid_n: usize) -> Result<VerifyOutcome> {
    if !(p >= 1.0) {
        return Err(Error::Parameter(format!("p must be at least 1, got {p}")));
    }
    if n_partial < 4 {
        return Err(Error::Parameter(format!("need at least 4 partial-sum terms, got {n_partial}")));
    }
    let grid = Grid1D::new(grid_n)?;
    let mut out = VerifyOutcome::new("lp_counterexample");
    let top = grid.nyquist().min(32);
    for n in 2..=top {
        let u = Field1D::from_fn(grid, |x| libm::sin(2.0 * PI * n as f64 * x) / libm::sqrt(n as f64));
        let au = spectral_derivative(&u).norm();
        let exact = libm::sqrt(2.0 * n as f64) * PI;
        out.check((au - exact).abs() <= 1e-3 * exact, format!("‖A u_{n}‖ = {au}, expected {exact}"));
        if n == 8 {
            out.record("norm_Au_8", au);
        }
    }
    // c normalizes Σ_{n≥2} w_n = 1; the tail beyond `big` is bracketed.
    let s = 1.0 + p / 2.0;
    let big = 1_000_000;
    let partial: f64 = (2..=big).rev().map(|n| libm::pow(n as f64, -s)).sum();
    let (tlo, thi) = zeta_tail_bounds(s, big);
    let c = 1.0 / (partial + 0.5 * (tlo + thi));
    let norm_err = (c * (partial + tlo) - 1.0).abs().max((c * (partial + thi) - 1.0).abs());
    out.record("c", c);
    out.record("weights_partial_sum", c * partial);
    out.record("normalization_error", norm_err);
    out.check(norm_err <= 1e-6, format!("Σ w_n = 1 only within {norm_err}"));

    let term = |n: usize| {
        let w = c * libm::pow(n as f64, -s);
        w * libm::pow(libm::sqrt(2.0 * n as f64) * PI / 2.0, p)
    };
    let mut sums = vec![0.0; 2 * n_partial + 1];
    for n in 2..=2 * n_partial {
        sums[n] = sums[n - 1] + term(n);
    }
    let harmonic = |m: usize| (1..=m).map(|k| 1.0 / k as f64).sum::<f64>();
    let ratio = sums[2 * n_partial] / sums[n_partial];
    let expected = (harmonic(2 * n_partial) - 1.0) / (harmonic(n_partial) - 1.0);
    out.record("partial_sum", sums[n_partial]);
    out.record("doubling_ratio", ratio);
    out.record("harmonic_ratio", expected);
    out.check((ratio / expected - 1.0).abs() <= 0.05, format!("S_2N/S_N = {ratio} vs harmonic {expected}"));
    if n_partial >= 1000 {
        let r = sums[1000] / sums[100];
        out.record("s1000_over_s100", r);
        if p == 2.0 {
            out.check(r > 1.3, format!("S_1000/S_100 = {r} shows no log growth"));
        }
    }
    out.note("partial sums grow without bound (harmonic rate); divergence itself is an analytic statement");
    Ok(out)
}

/// Samples `x ↦ f(x)` on `[lo, hi]` so that consecutive graph points are at
/// most `step` apart (bisecting steep stretches).
pub fn sample_curve(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> Vec<(f64, f64)> {
    let count = libm::ceil((hi - lo) / step) as usize;
    let mut pts = Vec::with_capacity(count + 1);
    let mut prev = (lo, f(lo));
    pts.push(prev);
    for i in 1..=count {
        let x = if i == count { hi } else { lo + i as f64 * step };
        let next = (x, f(x));
        refine(&f, prev, next, step, 0, &mut pts);
        pts.push(next);
        prev = next;
    }
    pts
}

fn refine(f: &impl Fn(f64) -> f64, a: (f64, f64), b: (f64, f64), step: f64, depth: u32, out: &mut Vec<(f64, f64)>) {
    if depth >= 48 || libm::hypot(b.0 - a.0, b.1 - a.1) <= step {
        return;
    }
    let xm = 0.5 * (a.0 + b.0);
    let m = (xm, f(xm));
    refine(f, a, m, step, depth + 1, out);
    out.push(m);
    refine(f, m, b, step, depth + 1, out);
}

fn grid_points(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = libm::round((hi - lo) / step) as usize;
    (0..=count).map(|i| lo + i as f64 * step).collect()
}

fn sigmoid(s: f64) -> impl Fn(f64) -> f64 {
    move |x| 1.0 / (1.0 + libm::exp(-s * x))
}

/// Graph of the step operator on `[lo, hi]`; `maximal` fills `[0, 1]` at 0
/// instead of `{0, 1}`.
fn step_graph(lo: f64, hi: f64, step: f64, maximal: bool) -> Result<GraphSample> {
    let mut pairs: Vec<(f64, f64)> = grid_points(lo, hi, step)
        .into_iter()
        .filter(|&x| x != 0.0)
        .map(|x| (x, if x > 0.0 { 1.0 } else { 0.0 }))
        .collect();
    if maximal {
        pairs.extend(grid_points(0.0, 1.0, step).into_iter().map(|y| (0.0, y)));
    } else {
        pairs.extend([(0.0, 0.0), (0.0, 1.0)]);
    }
    GraphSample::scalar(pairs, if maximal { "maximal step" } else { "step" })
}

/// Sigmoids `1/(1+e^{−sx})` against the step operator on `K = [−R, R]²`.
pub fn verify_step_counterexample(slopes: &[f64], radius: f64, step: f64) -> Result<VerifyOutcome> {
    if slopes.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::Parameter("slopes must be finite and non-negative".into()));
    }
    if !(radius > 0.0 && step > 0.0) {
        return Err(Error::Parameter(format!("radius and step must be positive, got {radius}, {step}")));
    }
    let window = CompactWindow::bounded(radius, radius)?;
    let mut out = VerifyOutcome::new("step_counterexample");
    // The opposing graphs extend past K so the inf is not truncated.
    let plain = step_graph(-radius - 1.0, radius + 1.0, step, false)?;
    let maximal = step_graph(-radius - 1.0, radius + 1.0, step, true)?;
    let bound = 0.5 - step - 1e-6;
    for &s in slopes {
        let curve = GraphSample::scalar(sample_curve(sigmoid(s), -radius - 1.0, radius + 1.0, step), "sigmoid")?;
        let d = graph_distance(&curve, &plain, &window)?;
        let dmax = graph_distance(&curve, &maximal, &window)?;
        out.record(format!("d_step_s{s}"), d);
        out.record(format!("d_maximal_s{s}"), dmax);
        out.check(d >= bound, format!("slope {s}: distance {d} below 0.5 − step"));
    }
    out.note(
        "every continuous family crosses height 1/2 near 0 and stays 1/2 away from the non-maximal step; \
         sigmoids represent that family, and the maximal extension is approached instead",
    );
    Ok(out)
}

/// `d_{gph,K}(A_λ, A)` for a scalar operator over decreasing `λ`; passes when
/// the sequence decreases strictly and ends within `final_tol`.
pub fn verify_yosida_graph_convergence(
    a: &OperatorSpec,
    lambdas: &[f64],
    window: &CompactWindow,
    step: f64,
    final_tol: f64,
) -> Result<VerifyOutcome> {
    let (r_in, r_out) = match window {
        CompactWindow::Bounded {
            input_radius,
            output_radius,
        } => (*input_radius, *output_radius),
        CompactWindow::Unbounded => {
            return Err(Error::Parameter("graph convergence is checked on a bounded window".into()))
        }
    };
    if !a.has_resolvent() {
        return Err(Error::Capability(format!("{} has no resolvent", a.name())));
    }
    let (lo, hi) = (-r_in - 1.0, r_in + 1.0);
    let target = scalar_graph_of(a, lo, hi, r_out + 1.0, step)?;
    let mut out = VerifyOutcome::new("yosida_graph_convergence");
    let mut prev = f64::INFINITY;
    let mut last = 0.0;
    for &lambda in lambdas {
        let err = RefCell::new(None);
        let pts = sample_curve(
            |x| match yosida(a, lambda, &Element::Scalar(x), 1e-12) {
                Ok(v) => v.as_scalar().unwrap_or(f64::NAN),
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            },
            lo,
            hi,
            step,
        );
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        let approx = GraphSample::scalar(pts, "yosida")?;
        let d = graph_distance(&approx, &target, window)?;
        out.record(format!("d_lambda_{lambda}"), d);
        out.check(d < prev, format!("distance at λ = {lambda} does not decrease ({d} ≥ {prev})"));
        prev = d;
        last = d;
    }
    let resolution = sampling_resolution(&target)?;
    out.record("resolution", resolution);
    if !lambdas.is_empty() {
        out.check(last <= final_tol, format!("final distance {last} above {final_tol}"));
        out.check(
            last <= 2.0 * resolution,
            format!("final distance {last} above twice the sampling resolution {resolution}"),
        );
    }
    Ok(out)
}

/// Scalar graph with set-valued points filled in at `step`.
fn scalar_graph_of(a: &OperatorSpec, lo: f64, hi: f64, out_radius: f64, step: f64) -> Result<GraphSample> {
    let xs: Vec<Element> = grid_points(lo, hi, step).into_iter().map(Element::Scalar).collect();
    sample_graph(a, &xs, &SampleMode::SetValued(grid_points(-out_radius, out_radius, step)))
}

/// Output-side excess `max_i ‖A_λ u_i − A u_i‖` for a linear 1D operator over
/// decreasing `λ`; passes when it decreases strictly (or is identically 0).
pub fn verify_yosida_field_convergence(a: &OperatorSpec, lambdas: &[f64], fields: &[Field1D]) -> Result<VerifyOutcome> {
    let mut out = VerifyOutcome::new("yosida_field_convergence");
    let mut prev = f64::INFINITY;
    for &lambda in lambdas {
        let mut worst: f64 = 0.0;
        for u in fields {
            let e = Element::Field1(u.clone());
            let d = yosida(a, lambda, &e, 1e-12)?.distance(&apply(a, &e)?)?;
            worst = worst.max(d);
        }
        out.record(format!("excess_lambda_{lambda}"), worst);
        let ok = worst < prev || (worst <= 1e-12 && prev <= 1e-12);
        out.check(ok, format!("excess at λ = {lambda} does not decrease ({worst} ≥ {prev})"));
        prev = worst;
    }
    Ok(out)
}

/// Largest frequency carried by a field (Chebyshev index in 2D), ignoring
/// coefficients below `1e-9` of the largest one.
pub fn top_frequency(u: &Element) -> Result<usize> {
    let (n, dim) = match u {
        Element::Field1(f) => (f.grid().n(), 1),
        Element::Field2(f) => (f.grid().n(), 2),
        Element::Scalar(_) => return Err(Error::Capability("scalars carry no frequencies".into())),
    };
    let plan = FftPlan::new(n);
    let mut buf: Vec<Complex64> = u.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if dim == 1 {
        plan.forward(&mut buf);
    } else {
        transform_2d(&plan, &mut buf, false);
    }
    let peak = buf.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let signed = |k: usize| if k <= n / 2 { k } else { n - k };
    let mut top = 0;
    for (idx, c) in buf.iter().enumerate() {
        if c.norm() > 1e-9 * peak {
            let k = if dim == 1 {
                signed(idx)
            } else {
                signed(idx / n).max(signed(idx % n))
            };
            top = top.max(k);
        }
    }
    Ok(top)
}

/// Projection residual `‖u − D_m E_m u‖` and encoder `E_m u` for one field.
fn project(u: &Element, m: usize) -> Result<(f64, Vec<f64>)> {
    let (coeffs, back) = match u {
        Element::Field1(f) => {
            let b = RealBasis1D::new(f.grid().n(), m);
            let c = b.analyze(f.values());
            let back = b.synthesize(&c);
            (c, back)
        }
        Element::Field2(f) => {
            let b = RealBasis2D::new(f.grid().n(), m);
            let c = b.analyze(f.values());
            let back = b.synthesize(&c);
            (c, back)
        }
        Element::Scalar(_) => return Err(Error::Capability("encoders act on fields".into())),
    };
    Ok((u.distance(&u.with_values(back)?)?, coeffs))
}

/// `C_B(w_m) = sup_u ‖u − D_m E_m u‖` over the sample for each cutoff,
/// `R_K = sup ‖y‖` over `outputs`, and the encoder Lipschitz ratio.
pub fn measure_edap_error(inputs: &[Element], outputs: &[Element], m_list: &[usize]) -> Result<VerifyOutcome> {
    if inputs.is_empty() {
        return Err(Error::Parameter("EDAP measurement needs a non-empty sample".into()));
    }
    let mut out = VerifyOutcome::new("edap_error");
    let r_k = outputs.iter().map(Element::norm).fold(0.0, f64::max);
    out.record("R_K", r_k);
    if m_list.is_empty() {
        out.note("warning: empty cutoff list, nothing to check");
        return Ok(out);
    }
    let mut band = 0;
    for u in inputs {
        band = band.max(top_frequency(u)?);
    }
    out.record("sample_band", band as f64);
    let mut prev = f64::INFINITY;
    let mut worst_ratio: f64 = 0.0;
    for &m in m_list {
        let mut c_b: f64 = 0.0;
        let mut codes = Vec::with_capacity(inputs.len());
        for u in inputs {
            let (r, c) = project(u, m)?;
            c_b = c_b.max(r);
            codes.push(c);
        }
        for i in 0..inputs.len() {
            for j in i + 1..inputs.len() {
                let du = inputs[i].distance(&inputs[j])?;
                let dc = libm::sqrt(codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
                if du > 0.0 {
                    worst_ratio = worst_ratio.max(dc / du);
                }
            }
        }
        out.record(format!("C_B_m{m}"), c_b);
        out.check(c_b <= prev * (1.0 + 1e-12) + 1e-15, format!("C_B increases at m = {m}"));
        if m >= band {
            out.check(c_b <= 1e-12, format!("C_B = {c_b} at m = {m} beyond the sample band {band}"));
        }
        prev = c_b;
    }
    out.record("encoder_lipschitz", worst_ratio);
    out.check(worst_ratio <= 1.0 + 1e-12, format!("encoder ratio {worst_ratio} exceeds 1"));
    Ok(out)
}

/// Names accepted by [`run_named`].
pub const VERIFIER_NAMES: [&str; 6] = [
    "uniform_counterexample",
    "lp_counterexample",
    "step_counterexample",
    "yosida_graph_convergence",
    "yosida_field_convergence",
    "edap_error",
];

/// Runs one verifier with its standard settings.
pub fn run_named(name: &str) -> Result<VerifyOutcome> {
    match name {
        "uniform_counterexample" => {
            let ns: Vec<usize> = (2..=16).map(|k| 2 * k).collect();
            verify_uniform_counterexample(&ns, 512)
        }
        "lp_counterexample" => verify_lp_counterexample(1000, 2.0, 128),
        "step_counterexample" => verify_step_counterexample(&[0.0, 1.0, 10.0, 100.0, 1000.0], 1.0, 1e-3),
        "yosida_graph_convergence" => verify_yosida_graph_convergence(
            &OperatorSpec::AbsSubdifferential,
            &[0.5, 0.2, 0.05, 0.01],
            &CompactWindow::bounded(2.0, 1.5)?,
            0.01,
            0.03,
        ),
        "yosida_field_convergence" => {
            let fields = band_limited_fields(20, 64, 8, 7);
            verify_yosida_field_convergence(&OperatorSpec::DerivativePeriodic1D, &[0.3, 0.1, 0.03], &fields)
        }
        "edap_error" => {
            let cfg = crate::datagen::FourierFieldConfig {
                dim: 1,
                grid_n: 128,
                modes: crate::datagen::IntRange::new(3, 6),
                freq: crate::datagen::IntRange::new(2, 30),
                beta: 0.5,
                seed: 11,
            };
            let data = crate::datagen::build_dataset(&OperatorSpec::DerivativePeriodic1D, &cfg, 40)?;
            measure_edap_error(&data.inputs, &data.targets, &[4, 8, 16, 32, 64])
        }
        other => Err(Error::Config(format!(
            "unknown verifier '{other}'; expected one of {}",
            VERIFIER_NAMES.join(", ")
        ))),
    }
}

/// Seeded random trigonometric fields with frequencies `1..=band`.
pub fn band_limited_fields(count: usize, n: usize, band: usize, seed: u64) -> Vec<Field1D> {
    let grid = Grid1D::new(n).expect("valid grid");
    let mut rng = crate::rng::Stream::new(seed);
    (0..count)
        .map(|_| {
            let coeffs: Vec<(f64, f64)> = (0..band).map(|_| (rng.normal(), rng.normal())).collect();
            Field1D::from_fn(grid, |x| {
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let w = 2.0 * PI * (k + 1) as f64 * x;
                        a * libm::sin(w) + b * libm::cos(w)
                    })
                    .sum()
            })
        })
        .collect()
}

pub fn run_all() -> Vec<(String, Result<VerifyOutcome>)> {
    VERIFIER_NAMES.iter().map(|n| (n.to_string(), run_named(n))).collect()
}
