//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the nodes in reverse once and returns the adjoint of every node.
//! Tapes are cheap and meant to be rebuilt for every training step.
//!
//! ```
//! use mgl_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
//! let y = tape.square_norm(x, 1.0).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
//! ```

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Floor applied under square roots, see [`Tape::sqrt_floor`].
pub const SQRT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                context: "Tensor::new",
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor entry {i} is not finite")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension {
                context: "Tensor::reshaped",
                expected,
                found: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed real-linear map acting on the trailing axis, with its exact
/// Euclidean adjoint.
pub trait LinearOp {
    fn name(&self) -> &'static str;
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    /// Writes `y = L x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// Writes `x = Lᵀ y`.
    fn adjoint(&self, y: &[f64], x: &mut [f64]);
    /// Row-major `[out_len, in_len]` matrix of the map, when it is cheap to
    /// hold; batched applications then go through a single GEMM.
    fn matrix(&self) -> Option<&[f64]> {
        None
    }
}

/// Strided view of a matrix inside a slice: `(offset, row stride, col stride)`.
type View = (usize, usize, usize);

fn span(rows: usize, cols: usize, (off, rs, cs): View) -> usize {
    off + (rows - 1) * rs + (cols - 1) * cs
}

/// `C ← C + α·A·B` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_view(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], va: View, b: &[f64], vb: View, c: &mut [f64], vc: View) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(span(m, k, va) < a.len() && span(k, n, vb) < b.len() && span(m, n, vc) < c.len());
    // SAFETY: the assert keeps every strided access inside the slices, and
    // `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.0),
            va.1 as isize,
            va.2 as isize,
            b.as_ptr().add(vb.0),
            vb.1 as isize,
            vb.2 as isize,
            1.0,
            c.as_mut_ptr().add(vc.0),
            vc.1 as isize,
            vc.2 as isize,
        );
    }
}

/// `C ← C + A·B` with `A`, `B` given as `(row stride, col stride)` and `C`
/// contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    gemm_view(m, k, n, 1.0, a, (0, rsa, csa), b, (0, rsb, csb), c, (0, n, 1));
}

/// Complex `C ← C + op(A)·op(B)` on interleaved `(re, im)` storage; views
/// point at real parts, `conj_*` conjugates the operand.
#[allow(clippy::too_many_arguments)]
fn cgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    va: View,
    conj_a: bool,
    b: &[f64],
    vb: View,
    conj_b: bool,
    c: &mut [f64],
    vc: View,
) {
    let sa = if conj_a { -1.0 } else { 1.0 };
    let sb = if conj_b { -1.0 } else { 1.0 };
    let im = |v: View| (v.0 + 1, v.1, v.2);
    gemm_view(m, k, n, 1.0, a, va, b, vb, c, vc);
    gemm_view(m, k, n, -sa * sb, a, im(va), b, im(vb), c, vc);
    gemm_view(m, k, n, sb, a, va, b, im(vb), c, im(vc));
    gemm_view(m, k, n, sa, a, im(va), b, vb, c, im(vc));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    All,
    /// Reduce along rows (result has one entry per column).
    Rows,
    /// Reduce along columns (result has one entry per row).
    Cols,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Rc<Vec<f64>>),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    ChannelMix(Var, Var),
    ChannelBias(Var, Var),
    ComplexModeMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Square(Var),
    SqrtFloor(Var),
    Sum(Var),
    SquareNorm(Var, f64),
    RowSquareNorms(Var, f64),
    PairwiseSqDist(Var, Var, f64),
    LogSumExp(Var, Axis, f64),
    SliceCols(Var, usize),
    ConcatCols(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    Reshape(Var),
    Linear(Var, Rc<dyn LinearOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Max(..) => "max",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::ChannelMix(..) => "channel_mix",
            Op::ChannelBias(..) => "channel_bias",
            Op::ComplexModeMul(..) => "complex_mode_mul",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::SqrtFloor(..) => "sqrt_floor",
            Op::Sum(..) => "sum",
            Op::SquareNorm(..) => "square_norm",
            Op::RowSquareNorms(..) => "row_square_norms",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Linear(..) => "linear",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Adjoints of every node after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
    cdf + x * pdf
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "node {} ({}) produced a non-finite value at entry {i}",
                self.nodes.len(),
                op.name()
            )));
        }
        self.nodes.push(Node {
            op,
            value: Tensor { shape, data },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Parameter(format!(
                "{context}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rank2(&self, v: Var, context: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Parameter(format!("{context}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn rank3(&self, v: Var, context: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(Error::Parameter(format!("{context}: expected rank 3, got shape {s:?}"))),
        }
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        self.push(op, self.shape(a).to_vec(), data)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        self.push(op, self.shape(x).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Max(a, b), f64::max)
    }

    /// `x + b` with `b` broadcast along the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(b).len();
        let last = self.shape(x).last().copied().unwrap_or(0);
        if last != n {
            return Err(Error::Dimension {
                context: "add_bias",
                expected: last,
                found: n,
            });
        }
        let bias = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, v)| v + bias[i % n]).collect();
        self.push(Op::AddBias(x, b), self.shape(x).to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddConst(x), |v| v + c)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Dimension {
                context: "mul_const",
                expected: self.value(x).len(),
                found: c.len(),
            });
        }
        let data = self.data(x).iter().zip(&c).map(|(v, w)| v * w).collect();
        self.push(Op::MulConst(x, Rc::new(c)), self.shape(x).to_vec(), data)
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                context: "matmul inner dimension",
                expected: k,
                found: k2,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out);
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    /// `[m,k]·[n,k]ᵀ`, the layout of a dense layer `x Wᵀ`.
    pub fn matmul_nt(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul_nt")?;
        let (n, k2) = self.rank2(w, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                context: "matmul_nt inner dimension",
                expected: k,
                found: k2,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(w), (1, k), &mut out);
        self.push(Op::MatMulNT(a, w), vec![m, n], out)
    }

    /// `[B,Cin,P]` mixed by `[Cout,Cin]` at every position.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, ci, p) = self.rank3(x, "channel_mix")?;
        let (co, ci2) = self.rank2(w, "channel_mix")?;
        if ci != ci2 {
            return Err(Error::Dimension {
                context: "channel_mix channels",
                expected: ci,
                found: ci2,
            });
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; b * co * p];
        for s in 0..b {
            let src = &xd[s * ci * p..(s + 1) * ci * p];
            gemm(co, ci, p, wd, (ci, 1), src, (p, 1), &mut out[s * co * p..(s + 1) * co * p]);
        }
        self.push(Op::ChannelMix(x, w), vec![b, co, p], out)
    }

    /// `[B,C,P] + b[C]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, p) = self.rank3(x, "channel_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::Dimension {
                context: "channel_bias",
                expected: c,
                found: self.value(bias).len(),
            });
        }
        let bd = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(idx, v)| v + bd[(idx / p) % c])
            .collect();
        self.push(Op::ChannelBias(x, bias), vec![b, c, p], data)
    }

    /// Per-mode complex channel mixing. `x` is `[B,Cin,K,2]` and `w` is
    /// `[Cin,Cout,K,2]`, the trailing axis holding `(re, im)`; returns
    /// `out[b,o,k] = Σ_i x[b,i,k]·w[i,o,k]`.
    pub fn complex_mode_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, ci, k) = match *self.shape(x) {
            [b, ci, k, 2] => (b, ci, k),
            ref s => return Err(Error::Parameter(format!("complex_mode_mul: bad input shape {s:?}"))),
        };
        let co = match *self.shape(w) {
            [ci2, co, k2, 2] if ci2 == ci && k2 == k => co,
            ref s => return Err(Error::Parameter(format!("complex_mode_mul: bad weight shape {s:?}"))),
        };
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![0.0; b * co * k * 2];
        // One [B,Ci]·[Ci,Co] complex product per mode.
        for m in 0..k {
            let vx = (2 * m, ci * k * 2, k * 2);
            let vw = (2 * m, co * k * 2, k * 2);
            let vo = (2 * m, co * k * 2, k * 2);
            cgemm(b, ci, co, xd, vx, false, wd, vw, false, &mut out, vo);
        }
        self.push(Op::ComplexModeMul(x, w), vec![b, co, k, 2], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Exact GeLU `x Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), libm::tanh)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `sqrt(max(x, 1e-12))`; the derivative is zero below the floor, which
    /// selects the zero subgradient of `‖·‖` at coincident points.
    pub fn sqrt_floor(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::SqrtFloor(x), |v| libm::sqrt(v.max(SQRT_FLOOR)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s])
    }

    /// `weight · Σ x²`.
    pub fn square_norm(&mut self, x: Var, weight: f64) -> Result<Var> {
        let s = weight * self.data(x).iter().map(|v| v * v).sum::<f64>();
        self.push(Op::SquareNorm(x, weight), vec![1], vec![s])
    }

    /// `weight · Σ_j x_ij²` for every leading index `i` (trailing axis reduced).
    pub fn row_square_norms(&mut self, x: Var, weight: f64) -> Result<Var> {
        let rows = *self.shape(x).first().unwrap_or(&0);
        let cols = if rows == 0 { 0 } else { self.value(x).len() / rows };
        let data = self
            .data(x)
            .chunks(cols.max(1))
            .take(rows)
            .map(|r| weight * r.iter().map(|v| v * v).sum::<f64>())
            .collect();
        self.push(Op::RowSquareNorms(x, weight), vec![rows], data)
    }

    /// `weight · ‖a_i − b_j‖²` for rows of `a` (`[N, ...]`) and `b` (`[M, ...]`).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        let n = *self.shape(a).first().unwrap_or(&0);
        let m = *self.shape(b).first().unwrap_or(&0);
        if n == 0 || m == 0 || self.value(a).len() / n != self.value(b).len() / m {
            return Err(Error::Parameter(format!(
                "pairwise_sq_dist: incompatible shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let p = self.value(a).len() / n;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &ad[i * p..(i + 1) * p];
            for j in 0..m {
                let bj = &bd[j * p..(j + 1) * p];
                out[i * m + j] = weight * ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
        }
        self.push(Op::PairwiseSqDist(a, b, weight), vec![n, m], out)
    }

    /// `τ log Σ exp(x/τ)` over the chosen axis of a matrix (or every entry
    /// with [`Axis::All`]), stabilized by the running maximum.
    pub fn log_sum_exp(&mut self, x: Var, axis: Axis, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("log_sum_exp temperature must be positive, got {tau}")));
        }
        let lse = |vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = vals.collect();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = v.iter().map(|x| libm::exp((x - max) / tau)).sum();
            max + tau * libm::log(s)
        };
        let (shape, data) = match axis {
            Axis::All => (vec![1], vec![lse(&mut self.data(x).iter().copied())]),
            Axis::Rows | Axis::Cols => {
                let (r, c) = self.rank2(x, "log_sum_exp")?;
                let d = self.data(x);
                if axis == Axis::Cols {
                    (vec![r], (0..r).map(|i| lse(&mut d[i * c..(i + 1) * c].iter().copied())).collect())
                } else {
                    (vec![c], (0..c).map(|j| lse(&mut (0..r).map(|i| d[i * c + j]))).collect())
                }
            }
        };
        self.push(Op::LogSumExp(x, axis, tau), shape, data)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension {
                context: "slice_cols end",
                expected: c,
                found: start + len,
            });
        }
        let d = self.data(x);
        let data = (0..r).flat_map(|i| d[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push(Op::SliceCols(x, start), vec![r, len], data)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, ca) = self.rank2(a, "concat_cols")?;
        let (r2, cb) = self.rank2(b, "concat_cols")?;
        if r != r2 {
            return Err(Error::Dimension {
                context: "concat_cols rows",
                expected: r,
                found: r2,
            });
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let data = (0..r)
            .flat_map(|i| ad[i * ca..(i + 1) * ca].iter().chain(&bd[i * cb..(i + 1) * cb]).copied())
            .collect();
        self.push(Op::ConcatCols(a, b), vec![r, ca + cb], data)
    }

    /// Leading-axis slices `x[idx[0]], x[idx[1]], ...`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let rows = *self.shape(x).first().unwrap_or(&0);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Parameter(format!("gather_rows: index {bad} out of {rows} rows")));
        }
        let p = self.value(x).len() / rows.max(1);
        let d = self.data(x);
        let data = idx.iter().flat_map(|&i| d[i * p..(i + 1) * p].iter().copied()).collect();
        let mut shape = self.shape(x).to_vec();
        shape[0] = idx.len();
        self.push(Op::GatherRows(x, Rc::new(idx)), shape, data)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let expected: usize = shape.iter().product();
        if expected != self.value(x).len() {
            return Err(Error::Dimension {
                context: "reshape",
                expected,
                found: self.value(x).len(),
            });
        }
        let data = self.data(x).to_vec();
        self.push(Op::Reshape(x), shape, data)
    }

    /// Applies a fixed linear map to every trailing-axis slice of `x`.
    pub fn linear(&mut self, x: Var, op: Rc<dyn LinearOp>) -> Result<Var> {
        let inl = op.in_len();
        let last = self.shape(x).last().copied().unwrap_or(0);
        if last != inl {
            return Err(Error::Dimension {
                context: "linear map input",
                expected: inl,
                found: last,
            });
        }
        let outl = op.out_len();
        let count = self.value(x).len() / inl.max(1);
        let mut out = vec![0.0; count * outl];
        if let Some(mat) = op.matrix() {
            gemm(count, inl, outl, self.data(x), (inl, 1), mat, (1, inl), &mut out);
        } else {
            for (src, dst) in self.data(x).chunks(inl).zip(out.chunks_mut(outl)) {
                op.apply(src, dst);
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = outl;
        self.push(Op::Linear(x, op), shape, out)
    }

    /// Adjoints of every node with respect to the one-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Parameter(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (d, v) in accumulate(&mut grads[a.0], len(*a)).iter_mut().zip(g) {
                    *d += v;
                }
                for (d, v) in accumulate(&mut grads[b.0], len(*b)).iter_mut().zip(g) {
                    *d += sign * v;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                for ((d, v), y) in accumulate(&mut grads[a.0], ad.len()).iter_mut().zip(g).zip(&bd) {
                    *d += v * y;
                }
                for ((d, v), x) in accumulate(&mut grads[b.0], bd.len()).iter_mut().zip(g).zip(&ad) {
                    *d += v * x;
                }
            }
            Op::Max(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let take_a: Vec<bool> = ad.iter().zip(bd).map(|(x, y)| x >= y).collect();
                for ((d, v), t) in accumulate(&mut grads[a.0], ad.len()).iter_mut().zip(g).zip(&take_a) {
                    if *t {
                        *d += v;
                    }
                }
                for ((d, v), t) in accumulate(&mut grads[b.0], bd.len()).iter_mut().zip(g).zip(&take_a) {
                    if !*t {
                        *d += v;
                    }
                }
            }
            Op::AddBias(x, b) => {
                for (d, v) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += v;
                }
                let n = len(*b);
                let gb = accumulate(&mut grads[b.0], n);
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
            }
            Op::Scale(x, c) => {
                for (d, v) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += c * v;
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                for (d, v) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::MulConst(x, c) => {
                for ((d, v), w) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g).zip(c.iter()) {
                    *d += v * w;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                // ga += g·Bᵀ, gb += Aᵀ·g
                gemm(m, n, k, g, (n, 1), bd, (1, n), accumulate(&mut grads[a.0], m * k));
                gemm(k, m, n, ad, (1, k), g, (n, 1), accumulate(&mut grads[b.0], k * n));
            }
            Op::MatMulNT(a, w) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*w)[0];
                let (ad, wd) = (self.data(*a), self.data(*w));
                // ga += g·W, gw += gᵀ·A
                gemm(m, n, k, g, (n, 1), wd, (k, 1), accumulate(&mut grads[a.0], m * k));
                gemm(n, m, k, g, (1, n), ad, (k, 1), accumulate(&mut grads[w.0], n * k));
            }
            Op::ChannelMix(x, w) => {
                let (b, ci, p) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let co = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                // Per sample: gx_s += Wᵀ·g_s, gw += g_s·x_sᵀ.
                let gx = accumulate(&mut grads[x.0], b * ci * p);
                for s in 0..b {
                    let gs = &g[s * co * p..(s + 1) * co * p];
                    gemm(ci, co, p, wd, (1, ci), gs, (p, 1), &mut gx[s * ci * p..(s + 1) * ci * p]);
                }
                let gw = accumulate(&mut grads[w.0], co * ci);
                for s in 0..b {
                    let gs = &g[s * co * p..(s + 1) * co * p];
                    let xs = &xd[s * ci * p..(s + 1) * ci * p];
                    gemm(co, p, ci, gs, (p, 1), xs, (1, p), gw);
                }
            }
            Op::ChannelBias(x, bias) => {
                let (c, p) = (self.shape(*x)[1], self.shape(*x)[2]);
                for (d, v) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                    *d += v;
                }
                let gb = accumulate(&mut grads[bias.0], c);
                for (idx, v) in g.iter().enumerate() {
                    gb[(idx / p) % c] += v;
                }
            }
            Op::ComplexModeMul(x, w) => {
                let (b, ci, k) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let co = self.shape(*w)[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                // With complex adjoints g: dx = Σ_o g·conj(w), dw = Σ_b conj(x)·g.
                let gx = accumulate(&mut grads[x.0], xd.len());
                for m in 0..k {
                    let vg = (2 * m, co * k * 2, k * 2);
                    let vwt = (2 * m, k * 2, co * k * 2);
                    cgemm(b, co, ci, g, vg, false, wd, vwt, true, gx, (2 * m, ci * k * 2, k * 2));
                }
                let gw = accumulate(&mut grads[w.0], wd.len());
                for m in 0..k {
                    let vxt = (2 * m, k * 2, ci * k * 2);
                    let vg = (2 * m, co * k * 2, k * 2);
                    cgemm(ci, b, co, xd, vxt, true, g, vg, false, gw, (2 * m, co * k * 2, k * 2));
                }
            }
            Op::Relu(x) | Op::Gelu(x) | Op::Tanh(x) | Op::Square(x) | Op::SqrtFloor(x) => {
                let xd = self.data(*x);
                let yd = node.value.data();
                let gx = accumulate(&mut grads[x.0], xd.len());
                for i in 0..xd.len() {
                    let dydx = match node.op {
                        Op::Relu(_) => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Gelu(_) => gelu_grad(xd[i]),
                        Op::Tanh(_) => 1.0 - yd[i] * yd[i],
                        Op::Square(_) => 2.0 * xd[i],
                        _ => {
                            if xd[i] > SQRT_FLOOR {
                                0.5 / yd[i]
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * dydx;
                }
            }
            Op::Sum(x) => {
                for d in accumulate(&mut grads[x.0], len(*x)).iter_mut() {
                    *d += g[0];
                }
            }
            Op::SquareNorm(x, w) => {
                let xd = self.data(*x);
                for (d, v) in accumulate(&mut grads[x.0], xd.len()).iter_mut().zip(xd) {
                    *d += 2.0 * w * v * g[0];
                }
            }
            Op::RowSquareNorms(x, w) => {
                let xd = self.data(*x);
                let rows = g.len();
                let cols = xd.len() / rows.max(1);
                let gx = accumulate(&mut grads[x.0], xd.len());
                for (i, (d, v)) in gx.iter_mut().zip(xd).enumerate() {
                    *d += 2.0 * w * v * g[i / cols];
                }
            }
            Op::PairwiseSqDist(a, b, w) => {
                let (n, m) = (self.shape(*a)[0], self.shape(*b)[0]);
                let p = len(*a) / n;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; n * p];
                let mut gb = vec![0.0; m * p];
                for i in 0..n {
                    for j in 0..m {
                        let c = 2.0 * w * g[i * m + j];
                        if c == 0.0 {
                            continue;
                        }
                        for t in 0..p {
                            let diff = c * (ad[i * p + t] - bd[j * p + t]);
                            ga[i * p + t] += diff;
                            gb[j * p + t] -= diff;
                        }
                    }
                }
                for (d, v) in accumulate(&mut grads[a.0], n * p).iter_mut().zip(&ga) {
                    *d += v;
                }
                for (d, v) in accumulate(&mut grads[b.0], m * p).iter_mut().zip(&gb) {
                    *d += v;
                }
            }
            Op::LogSumExp(x, axis, tau) => {
                // Softmax weights exp((x − y)/τ) are at most 1 because y ≥ max x.
                let xd = self.data(*x);
                let yd = node.value.data();
                let gx = accumulate(&mut grads[x.0], xd.len());
                match axis {
                    Axis::All => {
                        for (d, v) in gx.iter_mut().zip(xd) {
                            *d += g[0] * libm::exp((v - yd[0]) / tau);
                        }
                    }
                    Axis::Cols => {
                        let c = xd.len() / yd.len();
                        for (idx, (d, v)) in gx.iter_mut().zip(xd).enumerate() {
                            let i = idx / c;
                            *d += g[i] * libm::exp((v - yd[i]) / tau);
                        }
                    }
                    Axis::Rows => {
                        let c = yd.len();
                        for (idx, (d, v)) in gx.iter_mut().zip(xd).enumerate() {
                            let j = idx % c;
                            *d += g[j] * libm::exp((v - yd[j]) / tau);
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.shape(*x)[1];
                let (r, l) = (node.value.shape()[0], node.value.shape()[1]);
                let gx = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..l {
                        gx[i * c + start + j] += g[i * l + j];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let cb = self.shape(*b)[1];
                let ga = accumulate(&mut grads[a.0], r * ca);
                for i in 0..r {
                    for j in 0..ca {
                        ga[i * ca + j] += g[i * (ca + cb) + j];
                    }
                }
                let gb = accumulate(&mut grads[b.0], r * cb);
                for i in 0..r {
                    for j in 0..cb {
                        gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let p = g.len() / idx.len().max(1);
                let gx = accumulate(&mut grads[x.0], len(*x));
                for (r, &i) in idx.iter().enumerate() {
                    for t in 0..p {
                        gx[i * p + t] += g[r * p + t];
                    }
                }
            }
            Op::Linear(x, op) => {
                let (inl, outl) = (op.in_len(), op.out_len());
                let gx = accumulate(&mut grads[x.0], len(*x));
                if let Some(mat) = op.matrix() {
                    gemm(gx.len() / inl.max(1), outl, inl, g, (outl, 1), mat, (inl, 1), gx);
                    return;
                }
                let mut tmp = vec![0.0; inl];
                for (src, dst) in g.chunks(outl).zip(gx.chunks_mut(inl)) {
                    op.adjoint(src, &mut tmp);
                    for (d, v) in dst.iter_mut().zip(&tmp) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Worst relative discrepancy between the tape gradient of `f` at `x` and
/// central differences with step `h`.
///
/// Each coordinate's error `|g_i − fd_i|` is divided by `‖fd‖_∞ + 1e-8`, the
/// size of the whole gradient: coordinates whose true derivative is far below
/// that scale are then judged against the rounding floor `ε|f|/h` of the
/// difference quotient rather than against their own vanishing magnitude.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let y = f(&mut tape, v)?;
        tape.value(y)
            .item()
            .ok_or_else(|| Error::Parameter("grad_check needs a scalar-valued function".into()))
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v)?;
    let g = tape.backward(y)?.get_or_zeros(v, x.len());
    let mut fd = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = eval(&probe)?;
        probe.data[i] = orig - h;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        fd[i] = (up - down) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-8;
    Ok(g.iter().zip(&fd).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max))
}
