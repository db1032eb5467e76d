//! Local graph distance between sampled operator graphs, the weighted
//! pairwise matrix `d_ij`, and its hard and log-sum-exp (soft) reductions.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_dim, Error, Result};
use crate::operators::{Element, GraphSample};

/// Window `K = {(u, v) : ‖u‖ ≤ R_u, ‖v‖ ≤ R_v}` of H×H.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CompactWindow {
    Bounded { input_radius: f64, output_radius: f64 },
    Unbounded,
}

impl CompactWindow {
    pub fn bounded(input_radius: f64, output_radius: f64) -> Result<Self> {
        if !(input_radius > 0.0 && output_radius > 0.0) {
            return Err(Error::Parameter(format!(
                "window radii must be positive, got ({input_radius}, {output_radius})"
            )));
        }
        Ok(CompactWindow::Bounded {
            input_radius,
            output_radius,
        })
    }

    pub fn contains(&self, u: &Element, v: &Element) -> bool {
        match self {
            CompactWindow::Unbounded => true,
            CompactWindow::Bounded {
                input_radius,
                output_radius,
            } => u.norm() <= *input_radius && v.norm() <= *output_radius,
        }
    }
}

fn product_distance(a: &(Element, Element), b: &(Element, Element)) -> Result<f64> {
    Ok(libm::sqrt(a.0.sq_distance(&b.0)? + a.1.sq_distance(&b.1)?))
}

/// `h_K(X, Y)`: sup over `X ∩ K` of the distance to all of `Y` (0 if `X ∩ K` is empty).
pub fn one_sided_excess(x: &GraphSample, y: &GraphSample, window: &CompactWindow) -> Result<f64> {
    let mut sup: Option<f64> = None;
    for p in x.pairs.iter().filter(|(u, v)| window.contains(u, v)) {
        let mut inf = f64::INFINITY;
        for q in &y.pairs {
            inf = inf.min(product_distance(p, q)?);
        }
        if y.pairs.is_empty() {
            return Err(Error::Undefined("excess over an empty graph sample".into()));
        }
        sup = Some(sup.map_or(inf, |s: f64| s.max(inf)));
    }
    Ok(sup.unwrap_or(0.0))
}

/// `d_{gph,K}(X, Y) = max{h_K(X, Y), h_K(Y, X)}`.
pub fn graph_distance(x: &GraphSample, y: &GraphSample, window: &CompactWindow) -> Result<f64> {
    Ok(one_sided_excess(x, y, window)?.max(one_sided_excess(y, x, window)?))
}

/// Largest nearest-neighbour gap inside a sample: the scale below which two
/// finite samples of the same continuum graph cannot be told apart.
pub fn sampling_resolution(x: &GraphSample) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, p) in x.pairs.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in x.pairs.iter().enumerate() {
            if i != j {
                best = best.min(product_distance(p, q)?);
            }
        }
        if best.is_finite() {
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// Row-major `N×M` matrix of
/// `d_ij = sqrt(w1‖u_i − u_j‖² + w2‖y_i − ŷ_j‖²)`; rows index true pairs,
/// columns index model pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDistances {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    pub w1: f64,
    pub w2: f64,
}

impl PairwiseDistances {
    pub fn from_matrix(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        check_dim("pairwise matrix", rows * cols, matrix.len())?;
        if let Some(bad) = matrix.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!("pairwise distance {bad} is not finite and nonnegative")));
        }
        Ok(Self {
            rows,
            cols,
            matrix,
            w1: f64::NAN,
            w2: f64::NAN,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.matrix
    }
}

pub fn pairwise(
    inputs_i: &[Element],
    targets_i: &[Element],
    inputs_j: &[Element],
    predictions_j: &[Element],
    w1: f64,
    w2: f64,
) -> Result<PairwiseDistances> {
    check_dim("pairwise rows", inputs_i.len(), targets_i.len())?;
    check_dim("pairwise columns", inputs_j.len(), predictions_j.len())?;
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(Error::Parameter(format!("weights must be nonnegative, got ({w1}, {w2})")));
    }
    let (rows, cols) = (inputs_i.len(), inputs_j.len());
    let mut matrix = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let din = inputs_i[i].sq_distance(&inputs_j[j])?;
            let dout = targets_i[i].sq_distance(&predictions_j[j])?;
            matrix.push(libm::sqrt(w1 * din + w2 * dout));
        }
    }
    let mut d = PairwiseDistances::from_matrix(rows, cols, matrix)?;
    d.w1 = w1;
    d.w2 = w2;
    Ok(d)
}

/// Smallest admissible temperature.
pub const MIN_TEMPERATURE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SoftGraphParams {
    pub tau_in: f64,
    pub tau_out: f64,
    pub w1: f64,
    pub w2: f64,
}

impl SoftGraphParams {
    pub fn new(tau_in: f64, tau_out: f64, w1: f64, w2: f64) -> Result<Self> {
        let p = Self {
            tau_in,
            tau_out,
            w1,
            w2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_in >= MIN_TEMPERATURE && self.tau_out >= MIN_TEMPERATURE) {
            return Err(Error::Parameter(format!(
                "temperatures must be at least {MIN_TEMPERATURE}, got ({}, {})",
                self.tau_in, self.tau_out
            )));
        }
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::Parameter(format!(
                "graph weights must be nonnegative, got ({}, {})",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

/// `τ log Σ exp(x/τ)`, stabilized by subtracting the maximum.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone, tau: f64) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.map(|x| libm::exp((x - max) / tau)).sum();
    max + tau * libm::log(s)
}

/// `−τ log Σ exp(−x/τ)`.
pub fn soft_min(xs: impl Iterator<Item = f64> + Clone, tau: f64) -> f64 {
    -log_sum_exp(xs.map(|x| -x), tau)
}

/// Returns `(H, H')`: soft-max over rows (resp. columns) of the soft-min along
/// each row (resp. column).
pub fn soft_graph_terms(d: &PairwiseDistances, params: &SoftGraphParams) -> (f64, f64) {
    let (rows, cols) = (d.rows, d.cols);
    let row_mins: Vec<f64> = (0..rows)
        .map(|i| soft_min((0..cols).map(|j| d.get(i, j)), params.tau_in))
        .collect();
    let col_mins: Vec<f64> = (0..cols)
        .map(|j| soft_min((0..rows).map(|i| d.get(i, j)), params.tau_in))
        .collect();
    (
        log_sum_exp(row_mins.iter().copied(), params.tau_out),
        log_sum_exp(col_mins.iter().copied(), params.tau_out),
    )
}

/// `max{H, H'}`.
pub fn soft_graph_distance(d: &PairwiseDistances, params: &SoftGraphParams) -> f64 {
    let (h, h2) = soft_graph_terms(d, params);
    h.max(h2)
}

/// `max{ max_i min_j d_ij, max_j min_i d_ij }`.
pub fn hard_graph_metric(d: &PairwiseDistances) -> Result<f64> {
    if d.rows == 0 || d.cols == 0 {
        return Err(Error::Undefined("graph metric of an empty matrix".into()));
    }
    let row = (0..d.rows)
        .map(|i| (0..d.cols).map(|j| d.get(i, j)).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let col = (0..d.cols)
        .map(|j| (0..d.rows).map(|i| d.get(i, j)).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(row.max(col))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{sample_graph, yosida, OperatorSpec, SampleMode};
    use crate::rng::Stream;
    use alloc::vec;

    fn scalar_graph(points: &[(f64, f64)]) -> GraphSample {
        GraphSample::scalar(points.iter().copied(), "test").unwrap()
    }

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = libm::round((hi - lo) / step) as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    }

    // Uniform inputs plus the steep segment `|x| ≤ λ`, sampled in output
    // units so the slope-1/λ piece is resolved as finely as the rest.
    fn yosida_graph(lam: f64) -> GraphSample {
        let a = OperatorSpec::AbsSubdifferential;
        let mut xs = grid(-2.0, 2.0, 0.01);
        xs.extend(grid(-1.0, 1.0, 0.01).into_iter().map(|v| lam * v));
        GraphSample::scalar(
            xs.into_iter()
                .map(|x| (x, yosida(&a, lam, &x.into(), 0.0).unwrap().as_scalar().unwrap())),
            "yosida",
        )
        .unwrap()
    }

    fn abs_graph() -> GraphSample {
        let a = OperatorSpec::AbsSubdifferential;
        let mut inputs: Vec<Element> = grid(-2.0, 2.0, 0.01).into_iter().map(Element::Scalar).collect();
        inputs.retain(|x| x.as_scalar().unwrap() != 0.0);
        let mut g = sample_graph(&a, &inputs, &SampleMode::MinNorm).unwrap();
        let seg = sample_graph(&a, &[Element::Scalar(0.0)], &SampleMode::SetValued(grid(-1.0, 1.0, 0.01))).unwrap();
        g.pairs.extend(seg.pairs);
        g
    }

    #[test]
    fn excess_examples() {
        let x = scalar_graph(&[(0.0, 0.0), (1.0, 2.0)]);
        assert_eq!(one_sided_excess(&x, &x, &CompactWindow::Unbounded).unwrap(), 0.0);
        let a = scalar_graph(&[(0.0, 0.0)]);
        let b = scalar_graph(&[(0.0, 1.0)]);
        assert_eq!(one_sided_excess(&a, &b, &CompactWindow::Unbounded).unwrap(), 1.0);
        let far = CompactWindow::bounded(0.5, 0.5).unwrap();
        let outside = scalar_graph(&[(3.0, 3.0)]);
        assert_eq!(one_sided_excess(&outside, &b, &far).unwrap(), 0.0);
        assert!(CompactWindow::bounded(0.0, 1.0).is_err());
    }

    #[test]
    fn yosida_graph_is_within_lambda_of_subdifferential() {
        let e = one_sided_excess(&yosida_graph(0.1), &abs_graph(), &CompactWindow::Unbounded).unwrap();
        // Brute-force oracle over all pairs.
        let x = yosida_graph(0.1);
        let y = abs_graph();
        let mut oracle: f64 = 0.0;
        for (u, v) in &x.pairs {
            let (u, v) = (u.as_scalar().unwrap(), v.as_scalar().unwrap());
            let best = y
                .pairs
                .iter()
                .map(|(p, q)| libm::hypot(u - p.as_scalar().unwrap(), v - q.as_scalar().unwrap()))
                .fold(f64::INFINITY, f64::min);
            oracle = oracle.max(best);
        }
        assert_eq!(e, oracle);
        assert!(e <= 0.11, "{e}");
    }

    #[test]
    fn graph_distance_examples() {
        let x = scalar_graph(&[(-1.0, 0.3), (0.0, 0.3), (1.0, 0.3)]);
        assert_eq!(graph_distance(&x, &x, &CompactWindow::Unbounded).unwrap(), 0.0);
        let y = scalar_graph(&[(-1.0, -0.4), (0.0, -0.4), (1.0, -0.4)]);
        let d = graph_distance(&x, &y, &CompactWindow::Unbounded).unwrap();
        assert!((d - 0.7).abs() < 1e-15);

        let window = CompactWindow::bounded(2.0, 1.5).unwrap();
        let target = abs_graph();
        let ds: Vec<f64> = [0.5, 0.1, 0.02]
            .iter()
            .map(|&l| graph_distance(&yosida_graph(l), &target, &window).unwrap())
            .collect();
        assert!(ds[0] > ds[1] && ds[1] > ds[2], "{ds:?}");
    }

    #[test]
    fn enlarging_the_window_never_decreases_the_excess() {
        let x = yosida_graph(0.3);
        let y = abs_graph();
        let mut prev = 0.0;
        for r in [0.1, 0.3, 0.7, 1.2, 2.5] {
            let e = one_sided_excess(&x, &y, &CompactWindow::bounded(r, r).unwrap()).unwrap();
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn pairwise_examples() {
        let s = |v: &[f64]| v.iter().map(|&x| Element::Scalar(x)).collect::<Vec<_>>();
        let d = pairwise(&s(&[0.0]), &s(&[1.0]), &s(&[0.0]), &s(&[1.0]), 1.0, 1.0).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        let u = s(&[0.0, 1.0]);
        let d = pairwise(&u, &u, &u, &u, 1.0, 1.0).unwrap();
        let r2 = libm::sqrt(2.0);
        assert_eq!(d.as_slice(), &[0.0, r2, r2, 0.0]);
        assert_eq!(hard_graph_metric(&d).unwrap(), 0.0);
        let d = pairwise(&u, &s(&[0.0, 3.0]), &u, &s(&[1.0, 1.0]), 0.0, 4.0).unwrap();
        assert_eq!(d.as_slice(), &[2.0, 2.0, 4.0, 4.0]);
        assert!(pairwise(&u, &s(&[0.0]), &u, &u, 1.0, 1.0).is_err());
    }

    #[test]
    fn soft_graph_examples() {
        let p = SoftGraphParams::new(0.1, 0.1, 1.0, 1.0).unwrap();
        let d = PairwiseDistances::from_matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(soft_graph_distance(&d, &p), 0.0);
        assert_eq!(hard_graph_metric(&PairwiseDistances::from_matrix(1, 1, vec![1.0]).unwrap()).unwrap(), 1.0);
        let sm = soft_min([1.0, 2.0, 3.0].into_iter(), 1e-3);
        assert!((sm - 1.0).abs() < 1e-9);
        assert!(SoftGraphParams::new(1e-10, 1.0, 1.0, 1.0).is_err());
        assert!(hard_graph_metric(&PairwiseDistances::from_matrix(0, 0, vec![]).unwrap()).is_err());
    }

    #[test]
    fn soft_graph_brackets_hard_metric() {
        let mut s = Stream::new(12);
        for trial in 0..100 {
            let (r, c) = if trial % 2 == 0 { (8, 8) } else { (3 + trial % 5, 6) };
            let m: Vec<f64> = (0..r * c).map(|_| 3.0 * s.uniform()).collect();
            let d = PairwiseDistances::from_matrix(r, c, m).unwrap();
            let tau = 0.1;
            let p = SoftGraphParams::new(tau, tau, 1.0, 1.0).unwrap();
            let hard = hard_graph_metric(&d).unwrap();
            let soft = soft_graph_distance(&d, &p);
            let slack = 2.0 * tau * libm::log(r.max(c) as f64);
            assert!(soft >= hard - slack - 1e-12 && soft <= hard + slack + 1e-12);
        }
    }

    #[test]
    fn sampling_resolution_of_uniform_line() {
        let g = scalar_graph(&[(0.0, 0.0), (0.5, 0.0), (1.5, 0.0)]);
        assert_eq!(sampling_resolution(&g).unwrap(), 1.0);
    }
}
