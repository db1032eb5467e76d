//! Encoder–decoder operator models `D ∘ φ ∘ E` and their structured forms.
//!
//! `E` takes coordinates in the orthonormal real trigonometric basis up to
//! the cutoff and `D` synthesizes them back, so both are 1-Lipschitz and
//! vanish at 0. The core `φ` is either an MLP on those coordinates or a stack
//! of spectral layers acting on the band-limited field `D(E(u))` (whose output
//! is projected back through `E`).
//!
//! Structured forms wrap the same core `R̂`:
//! - penalty: `Ŝ(u) = u − λR̂(u)` and `Â(u) = (u − Ŝ(u))/λ`;
//! - hard: `S = D∘ψ∘E` with every weight of `ψ` normalized to operator norm
//!   at most 1 and ReLU activations, and `B(u) = (u − S(u))/(2λ)`, which is
//!   monotone because `S` is nonexpansive.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::autodiff::{Gradients, LinearOp, Tape, Tensor, Var};
use crate::error::{check_dim, Error, Result};
use crate::hilbert::{Field1D, Field2D, Grid1D, Grid2D, RealBasis1D, RealBasis2D};
use crate::operators::Element;
use crate::rng::Stream;

/// Power-iteration steps per [`Model::spectral_normalize`] call.
pub const POWER_ITERS: usize = 30;
/// Extra power-iteration steps allowed until the estimate settles.
pub const POWER_ITERS_EXTRA: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub enum CoreSpec {
    /// Dense layers on the `w_m` coordinates; `hidden` lists the inner widths.
    Mlp { hidden: Vec<usize>, activation: Activation },
    /// Lifting to `channels`, `layers` spectral layers keeping `modes`
    /// frequencies per axis, projection back to one channel.
    SpectralStack {
        layers: usize,
        modes: usize,
        channels: usize,
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", rename_all = "snake_case"))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub enum Structure {
    /// `Â = D∘φ∘E`.
    Plain,
    /// `Â = (u − Ŝ)/λ` with `Ŝ = u − λR̂`.
    Penalty { lambda: f64 },
    /// `B = (u − S)/(2λ)` with `S` nonexpansive by construction.
    Hard { lambda: f64 },
}

impl Structure {
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Structure::Plain => None,
            Structure::Penalty { lambda } | Structure::Hard { lambda } => Some(*lambda),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Structure::Plain => "plain",
            Structure::Penalty { .. } => "penalty",
            Structure::Hard { .. } => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelSpec {
    pub dim: u8,
    pub grid_n: usize,
    /// Mode cutoff `m` of the encoder.
    pub cutoff: usize,
    pub core: CoreSpec,
    pub structure: Structure,
}

impl ModelSpec {
    /// Width `w_m` of the encoder output: `2m+1` in 1D, `(2m+1)²` in 2D.
    pub fn width(&self) -> usize {
        let w = 2 * self.cutoff + 1;
        if self.dim == 1 {
            w
        } else {
            w * w
        }
    }

    /// Values per field: `n` in 1D, `n²` in 2D.
    pub fn field_len(&self) -> usize {
        if self.dim == 1 {
            self.grid_n
        } else {
            self.grid_n * self.grid_n
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::Config(format!("model dim must be 1 or 2, got {}", self.dim)));
        }
        Grid1D::new(self.grid_n).map_err(|e| Error::Config(format!("model grid_n: {e}")))?;
        if self.cutoff == 0 || self.cutoff > self.grid_n / 2 {
            return Err(Error::Config(format!(
                "model cutoff: need 1 <= m <= {} for grid {}, got {}",
                self.grid_n / 2,
                self.grid_n,
                self.cutoff
            )));
        }
        match &self.core {
            CoreSpec::Mlp { hidden, .. } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("mlp hidden widths must be positive".into()));
                }
            }
            CoreSpec::SpectralStack {
                layers,
                modes,
                channels,
                ..
            } => {
                if *layers == 0 || *channels == 0 || *modes == 0 || *modes > self.grid_n / 2 {
                    return Err(Error::Config(format!(
                        "spectral stack needs layers, channels >= 1 and 1 <= modes <= {}",
                        self.grid_n / 2
                    )));
                }
            }
        }
        if let Some(lambda) = self.structure.lambda() {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("structure lambda must be positive, got {lambda}")));
            }
        }
        if let Structure::Hard { .. } = self.structure {
            match &self.core {
                CoreSpec::Mlp {
                    activation: Activation::Relu,
                    ..
                } => {}
                CoreSpec::Mlp { .. } => {
                    return Err(Error::Config("hard mode needs 1-Lipschitz (relu) activations".into()))
                }
                CoreSpec::SpectralStack { .. } => {
                    return Err(Error::Capability(
                        "hard mode is only available with an mlp core".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Basis {
    One(RealBasis1D),
    Two(RealBasis2D),
}

impl Basis {
    fn new(dim: u8, n: usize, m: usize) -> Self {
        if dim == 1 {
            Basis::One(RealBasis1D::new(n, m))
        } else {
            Basis::Two(RealBasis2D::new(n, m))
        }
    }

    fn field_len(&self) -> usize {
        match self {
            Basis::One(b) => b.n(),
            Basis::Two(b) => b.n() * b.n(),
        }
    }

    fn width(&self) -> usize {
        match self {
            Basis::One(b) => b.width(),
            Basis::Two(b) => b.width(),
        }
    }

    fn analyze(&self, x: &[f64], y: &mut [f64]) {
        match self {
            Basis::One(b) => b.analyze_into(x, y),
            Basis::Two(b) => y.copy_from_slice(&b.analyze(x)),
        }
    }

    fn synthesize(&self, y: &[f64], x: &mut [f64]) {
        match self {
            Basis::One(b) => b.synthesize_into(y, x),
            Basis::Two(b) => x.copy_from_slice(&b.synthesize(y)),
        }
    }
}

/// The encoder `E_m` as a tape map; its adjoint is `D_m/|grid|`.
struct Encoder(Rc<Basis>);

/// The decoder `D_m` as a tape map; its adjoint is `|grid|·E_m`.
struct Decoder(Rc<Basis>);

impl LinearOp for Encoder {
    fn name(&self) -> &'static str {
        "encoder"
    }
    fn in_len(&self) -> usize {
        self.0.field_len()
    }
    fn out_len(&self) -> usize {
        self.0.width()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.analyze(x, y);
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        self.0.synthesize(y, x);
        let h = 1.0 / self.0.field_len() as f64;
        x.iter_mut().for_each(|v| *v *= h);
    }
}

impl LinearOp for Decoder {
    fn name(&self) -> &'static str {
        "decoder"
    }
    fn in_len(&self) -> usize {
        self.0.width()
    }
    fn out_len(&self) -> usize {
        self.0.field_len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.synthesize(x, y);
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        self.0.analyze(y, x);
        let p = self.0.field_len() as f64;
        x.iter_mut().for_each(|v| *v *= p);
    }
}

/// A fixed linear map materialized as a row-major `[out, in]` matrix.
struct DenseMap {
    name: &'static str,
    rows: usize,
    cols: usize,
    m: Vec<f64>,
}

// Dense copies are only kept below this many entries.
const DENSE_LIMIT: usize = 1 << 18;

impl DenseMap {
    fn of(op: &dyn LinearOp) -> Self {
        let (rows, cols) = (op.out_len(), op.in_len());
        let mut m = vec![0.0; rows * cols];
        let mut e = vec![0.0; cols];
        let mut col = vec![0.0; rows];
        for j in 0..cols {
            e[j] = 1.0;
            op.apply(&e, &mut col);
            e[j] = 0.0;
            for i in 0..rows {
                m[i * cols + j] = col[i];
            }
        }
        Self {
            name: op.name(),
            rows,
            cols,
            m,
        }
    }

    /// `op` itself, or its dense copy when that is small enough.
    fn wrap(op: Rc<dyn LinearOp>) -> Rc<dyn LinearOp> {
        if op.in_len() * op.out_len() <= DENSE_LIMIT {
            Rc::new(Self::of(&*op))
        } else {
            op
        }
    }
}

impl LinearOp for DenseMap {
    fn name(&self) -> &'static str {
        self.name
    }
    fn in_len(&self) -> usize {
        self.cols
    }
    fn out_len(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.m[i * self.cols..(i + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        for (i, yi) in y.iter().enumerate() {
            for (xj, a) in x.iter_mut().zip(&self.m[i * self.cols..(i + 1) * self.cols]) {
                *xj += a * yi;
            }
        }
    }
    fn matrix(&self) -> Option<&[f64]> {
        Some(&self.m)
    }
}

/// The fixed linear maps a model records on the tape.
#[derive(Clone)]
struct Maps {
    enc: Rc<dyn LinearOp>,
    dec: Rc<dyn LinearOp>,
    modes: Option<(Rc<dyn LinearOp>, Rc<dyn LinearOp>, usize)>,
}

/// Retained complex Fourier modes of a spectral layer with their sampled
/// `cos`/`sin` tables. 1D keeps `k = 0..=M`; 2D keeps `k_x ∈ {−M..M}` (mod n)
/// and `k_y = 0..=M`, the other half-plane following from realness.
struct ModeSet {
    dim: u8,
    n: usize,
    kx: Vec<usize>,
    ky: Vec<usize>,
    cos_x: Vec<f64>,
    sin_x: Vec<f64>,
    cos_y: Vec<f64>,
    sin_y: Vec<f64>,
}

fn trig(freqs: &[usize], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut c = Vec::with_capacity(freqs.len() * n);
    let mut s = Vec::with_capacity(freqs.len() * n);
    for &f in freqs {
        for j in 0..n {
            let phase = TAU * ((f * j) % n) as f64 / n as f64;
            c.push(libm::cos(phase));
            s.push(libm::sin(phase));
        }
    }
    (c, s)
}

impl ModeSet {
    fn new(dim: u8, n: usize, m: usize) -> Self {
        let low: Vec<usize> = (0..=m).collect();
        let kx = if dim == 1 {
            low.clone()
        } else {
            let mut k = low.clone();
            k.extend((1..=m).map(|t| n - t).filter(|&f| f > m));
            k
        };
        let ky = if dim == 1 { Vec::new() } else { low };
        let (cos_x, sin_x) = trig(&kx, n);
        let (cos_y, sin_y) = trig(&ky, n);
        Self {
            dim,
            n,
            kx,
            ky,
            cos_x,
            sin_x,
            cos_y,
            sin_y,
        }
    }

    fn count(&self) -> usize {
        if self.dim == 1 {
            self.kx.len()
        } else {
            self.kx.len() * self.ky.len()
        }
    }

    fn field_len(&self) -> usize {
        if self.dim == 1 {
            self.n
        } else {
            self.n * self.n
        }
    }

    // Multiplicity of a half-spectrum mode in the real synthesis.
    fn half_weight(&self, k: usize) -> f64 {
        if k == 0 || 2 * k == self.n {
            1.0
        } else {
            2.0
        }
    }
}

/// Field → retained complex coefficients `(1/|grid|) Σ u e^{−2πi k·x}`, as
/// `(re, im)` pairs.
struct ModesForward(Rc<ModeSet>);

/// Retained coefficients → real field, `Re Σ h_k c_k e^{2πi k·x}` with the
/// half-spectrum multiplicities `h_k`.
struct ModesInverse(Rc<ModeSet>);

impl LinearOp for ModesForward {
    fn name(&self) -> &'static str {
        "modes_forward"
    }
    fn in_len(&self) -> usize {
        self.0.field_len()
    }
    fn out_len(&self) -> usize {
        2 * self.0.count()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = &*self.0;
        let n = s.n;
        if s.dim == 1 {
            let h = 1.0 / n as f64;
            for (k, out) in y.chunks_mut(2).enumerate() {
                let (c, sn) = (&s.cos_x[k * n..(k + 1) * n], &s.sin_x[k * n..(k + 1) * n]);
                out[0] = h * x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                out[1] = -h * x.iter().zip(sn).map(|(a, b)| a * b).sum::<f64>();
            }
            return;
        }
        let by = s.ky.len();
        let h = 1.0 / (n * n) as f64;
        let mut f1 = vec![0.0; n * by * 2];
        for i in 0..n {
            let row = &x[i * n..(i + 1) * n];
            for b in 0..by {
                let (c, sn) = (&s.cos_y[b * n..(b + 1) * n], &s.sin_y[b * n..(b + 1) * n]);
                f1[(i * by + b) * 2] = row.iter().zip(c).map(|(a, v)| a * v).sum();
                f1[(i * by + b) * 2 + 1] = -row.iter().zip(sn).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        for (a, _) in s.kx.iter().enumerate() {
            for b in 0..by {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    let (cx, sx) = (s.cos_x[a * n + i], s.sin_x[a * n + i]);
                    let (fr, fi) = (f1[(i * by + b) * 2], f1[(i * by + b) * 2 + 1]);
                    re += fr * cx + fi * sx;
                    im += fi * cx - fr * sx;
                }
                y[(a * by + b) * 2] = h * re;
                y[(a * by + b) * 2 + 1] = h * im;
            }
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let s = &*self.0;
        let n = s.n;
        x.iter_mut().for_each(|v| *v = 0.0);
        if s.dim == 1 {
            let h = 1.0 / n as f64;
            for (k, g) in y.chunks(2).enumerate() {
                for j in 0..n {
                    x[j] += h * (g[0] * s.cos_x[k * n + j] - g[1] * s.sin_x[k * n + j]);
                }
            }
            return;
        }
        let by = s.ky.len();
        let h = 1.0 / (n * n) as f64;
        let mut h1 = vec![0.0; n * by * 2];
        for (a, _) in s.kx.iter().enumerate() {
            for b in 0..by {
                let (gr, gi) = (y[(a * by + b) * 2], y[(a * by + b) * 2 + 1]);
                for i in 0..n {
                    let (cx, sx) = (s.cos_x[a * n + i], s.sin_x[a * n + i]);
                    h1[(i * by + b) * 2] += h * (gr * cx - gi * sx);
                    h1[(i * by + b) * 2 + 1] += h * (gi * cx + gr * sx);
                }
            }
        }
        for i in 0..n {
            for b in 0..by {
                let (hr, hi) = (h1[(i * by + b) * 2], h1[(i * by + b) * 2 + 1]);
                for j in 0..n {
                    x[i * n + j] += hr * s.cos_y[b * n + j] - hi * s.sin_y[b * n + j];
                }
            }
        }
    }
}

impl LinearOp for ModesInverse {
    fn name(&self) -> &'static str {
        "modes_inverse"
    }
    fn in_len(&self) -> usize {
        2 * self.0.count()
    }
    fn out_len(&self) -> usize {
        self.0.field_len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = &*self.0;
        let n = s.n;
        y.iter_mut().for_each(|v| *v = 0.0);
        if s.dim == 1 {
            for (k, c) in x.chunks(2).enumerate() {
                let w = s.half_weight(s.kx[k]);
                for j in 0..n {
                    y[j] += w * (c[0] * s.cos_x[k * n + j] - c[1] * s.sin_x[k * n + j]);
                }
            }
            return;
        }
        let by = s.ky.len();
        let mut p = vec![0.0; n * by * 2];
        for (a, _) in s.kx.iter().enumerate() {
            for b in 0..by {
                let (cr, ci) = (x[(a * by + b) * 2], x[(a * by + b) * 2 + 1]);
                for i in 0..n {
                    let (cx, sx) = (s.cos_x[a * n + i], s.sin_x[a * n + i]);
                    p[(i * by + b) * 2] += cr * cx - ci * sx;
                    p[(i * by + b) * 2 + 1] += ci * cx + cr * sx;
                }
            }
        }
        for i in 0..n {
            for b in 0..by {
                let w = s.half_weight(s.ky[b]);
                let (pr, pi) = (p[(i * by + b) * 2], p[(i * by + b) * 2 + 1]);
                for j in 0..n {
                    y[i * n + j] += w * (pr * s.cos_y[b * n + j] - pi * s.sin_y[b * n + j]);
                }
            }
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let s = &*self.0;
        let n = s.n;
        if s.dim == 1 {
            for (k, c) in x.chunks_mut(2).enumerate() {
                let w = s.half_weight(s.kx[k]);
                c[0] = w * y.iter().zip(&s.cos_x[k * n..(k + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                c[1] = -w * y.iter().zip(&s.sin_x[k * n..(k + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
            }
            return;
        }
        let by = s.ky.len();
        let mut q = vec![0.0; n * by * 2];
        for i in 0..n {
            let row = &y[i * n..(i + 1) * n];
            for b in 0..by {
                let w = s.half_weight(s.ky[b]);
                q[(i * by + b) * 2] = w * row.iter().zip(&s.cos_y[b * n..(b + 1) * n]).map(|(a, v)| a * v).sum::<f64>();
                q[(i * by + b) * 2 + 1] =
                    -w * row.iter().zip(&s.sin_y[b * n..(b + 1) * n]).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        for (a, _) in s.kx.iter().enumerate() {
            for b in 0..by {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    let (cx, sx) = (s.cos_x[a * n + i], s.sin_x[a * n + i]);
                    let (qr, qi) = (q[(i * by + b) * 2], q[(i * by + b) * 2 + 1]);
                    re += qr * cx + qi * sx;
                    im += qi * cx - qr * sx;
                }
                x[(a * by + b) * 2] = re;
                x[(a * by + b) * 2 + 1] = im;
            }
        }
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether hard mode normalizes this tensor as an operator.
    pub is_operator: bool,
}

/// Nodes produced by one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Model output `Â(u)` (or `B(u)`), shape `[B, field_len]`.
    pub output: Var,
    /// `Ŝ(u)` in penalty mode, `S(u)` in hard mode.
    pub s_map: Option<Var>,
    /// Core output `R̂(u)` (or `S(u)` in hard mode).
    pub core: Var,
}

#[derive(Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Vec<ParamInfo>,
    params: Vec<Tensor>,
    power: Vec<Vec<f64>>,
    maps: Maps,
}

impl core::fmt::Debug for Model {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("param_count", &self.param_count())
            .finish()
    }
}

fn uniform_tensor(shape: Vec<usize>, bound: f64, rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape, data).expect("finite initial parameters")
}

impl Model {
    /// Builds a model with seeded initialization: matrices and biases
    /// uniform in `±1/√fan_in`, spectral blocks uniform in `±1/(C·M)`.
    /// Hard-mode models are spectrally normalized before being returned.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Stream::new(seed);
        let basis = Rc::new(Basis::new(spec.dim, spec.grid_n, spec.cutoff));
        let w = spec.width();
        let mut layout = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, bound: f64, is_operator: bool, rng: &mut Stream| {
            params.push(uniform_tensor(shape.clone(), bound, rng));
            layout.push(ParamInfo { name, shape, is_operator });
        };
        let mut modes = None;
        match &spec.core {
            CoreSpec::Mlp { hidden, .. } => {
                let mut widths = vec![w];
                widths.extend(hidden.iter().copied());
                widths.push(w);
                for l in 0..widths.len() - 1 {
                    let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                    let bound = 1.0 / libm::sqrt(fan_in as f64);
                    push(format!("mlp.{l}.weight"), vec![fan_out, fan_in], bound, true, &mut rng);
                    push(format!("mlp.{l}.bias"), vec![fan_out], bound, false, &mut rng);
                }
            }
            CoreSpec::SpectralStack {
                layers,
                modes: m,
                channels: c,
                ..
            } => {
                let set = Rc::new(ModeSet::new(spec.dim, spec.grid_n, *m));
                let k = set.count();
                modes = Some((
                    DenseMap::wrap(Rc::new(ModesForward(set.clone()))),
                    DenseMap::wrap(Rc::new(ModesInverse(set))),
                    k,
                ));
                push("lift.weight".into(), vec![*c, 1], 1.0, true, &mut rng);
                push("lift.bias".into(), vec![*c], 1.0, false, &mut rng);
                let cb = 1.0 / libm::sqrt(*c as f64);
                for l in 0..*layers {
                    let sb = 1.0 / (*c * *m) as f64;
                    push(format!("spectral.{l}.modes"), vec![*c, *c, k, 2], sb, true, &mut rng);
                    push(format!("spectral.{l}.weight"), vec![*c, *c], cb, true, &mut rng);
                    push(format!("spectral.{l}.bias"), vec![*c], cb, false, &mut rng);
                }
                push("proj.weight".into(), vec![1, *c], cb, true, &mut rng);
                push("proj.bias".into(), vec![1], cb, false, &mut rng);
            }
        }
        let power = layout
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cols = if p.shape.len() == 2 { p.shape[1] } else { 0 };
                let mut s = Stream::substream(seed ^ 0x5eed, i as u64);
                (0..cols).map(|_| s.normal()).collect()
            })
            .collect();
        let mut model = Self {
            spec,
            layout,
            params,
            power,
            maps: Maps {
                enc: DenseMap::wrap(Rc::new(Encoder(basis.clone()))),
                dec: DenseMap::wrap(Rc::new(Decoder(basis))),
                modes,
            },
        };
        if let Structure::Hard { .. } = model.spec.structure {
            model.spectral_normalize()?;
        }
        Ok(model)
    }

    /// Rebuilds a model from its spec and a flat parameter vector.
    pub fn from_params(spec: ModelSpec, flat: &[f64]) -> Result<Self> {
        let mut m = Self::new(spec, 0)?;
        m.set_params(flat)?;
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn param_tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in layout order.
    pub fn params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("Model::set_params", self.param_count(), flat.len())?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        let mut offset = 0;
        for t in &mut self.params {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every parameter tensor as a leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Flat gradient in layout order (zeros for unreached parameters).
    pub fn flat_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (t, v) in self.params.iter().zip(vars) {
            out.extend(grads.get_or_zeros(*v, t.len()));
        }
        out
    }

    fn activation(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let act = match &self.spec.core {
            CoreSpec::Mlp { activation, .. } | CoreSpec::SpectralStack { activation, .. } => *activation,
        };
        match act {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }

    /// `D∘φ∘E` applied to a batch `[B, field_len]`.
    fn core_forward(&self, tape: &mut Tape, p: &[Var], u: Var) -> Result<Var> {
        let enc = self.maps.enc.clone();
        let dec = self.maps.dec.clone();
        let batch = tape.shape(u)[0];
        let coords = tape.linear(u, enc.clone())?;
        let coords = match &self.spec.core {
            CoreSpec::Mlp { .. } => {
                let layers = p.len() / 2;
                let mut h = coords;
                for l in 0..layers {
                    h = tape.matmul_nt(h, p[2 * l])?;
                    h = tape.add_bias(h, p[2 * l + 1])?;
                    if l + 1 < layers {
                        h = self.activation(tape, h)?;
                    }
                }
                h
            }
            CoreSpec::SpectralStack { layers, channels, .. } => {
                let (fwd, inv, k) = self.maps.modes.clone().expect("spectral stack has modes");
                let plen = self.spec.field_len();
                let c = *channels;
                let field = tape.linear(coords, dec.clone())?;
                let field = tape.reshape(field, vec![batch, 1, plen])?;
                let mut v = tape.channel_mix(field, p[0])?;
                v = tape.channel_bias(v, p[1])?;
                for l in 0..*layers {
                    let (rw, ww, wb) = (p[2 + 3 * l], p[3 + 3 * l], p[4 + 3 * l]);
                    let spec = tape.linear(v, fwd.clone())?;
                    let spec = tape.reshape(spec, vec![batch, c, k, 2])?;
                    let spec = tape.complex_mode_mul(spec, rw)?;
                    let spec = tape.reshape(spec, vec![batch, c, 2 * k])?;
                    let spec = tape.linear(spec, inv.clone())?;
                    let local = tape.channel_mix(v, ww)?;
                    let local = tape.channel_bias(local, wb)?;
                    v = tape.add(spec, local)?;
                    if l + 1 < *layers {
                        v = self.activation(tape, v)?;
                    }
                }
                let np = p.len();
                let out = tape.channel_mix(v, p[np - 2])?;
                let out = tape.channel_bias(out, p[np - 1])?;
                let out = tape.reshape(out, vec![batch, plen])?;
                tape.linear(out, enc)?
            }
        };
        tape.linear(coords, dec)
    }

    /// Records a batched forward pass. `u` holds the inputs as `[B, field_len]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], u: Var) -> Result<ForwardVars> {
        check_dim("Model::forward_on_tape params", self.params.len(), params.len())?;
        match tape.shape(u) {
            [_, p] if *p == self.spec.field_len() => {}
            s => {
                return Err(Error::Parameter(format!(
                    "model expects inputs of shape [B, {}], got {s:?}",
                    self.spec.field_len()
                )))
            }
        }
        let core = self.core_forward(tape, params, u)?;
        Ok(match self.spec.structure {
            Structure::Plain => ForwardVars {
                output: core,
                s_map: None,
                core,
            },
            Structure::Penalty { lambda } => {
                let lr = tape.scale(core, lambda)?;
                let s = tape.sub(u, lr)?;
                let diff = tape.sub(u, s)?;
                let output = tape.scale(diff, 1.0 / lambda)?;
                ForwardVars {
                    output,
                    s_map: Some(s),
                    core,
                }
            }
            Structure::Hard { lambda } => {
                let diff = tape.sub(u, core)?;
                let output = tape.scale(diff, 0.5 / lambda)?;
                ForwardVars {
                    output,
                    s_map: Some(core),
                    core,
                }
            }
        })
    }

    /// Stacks fields into a `[B, field_len]` tensor.
    pub fn stack(&self, inputs: &[Element]) -> Result<Tensor> {
        let p = self.spec.field_len();
        let mut data = Vec::with_capacity(inputs.len() * p);
        for u in inputs {
            let ok = matches!(
                (self.spec.dim, u),
                (1, Element::Field1(_)) | (2, Element::Field2(_))
            );
            if !ok || u.len() != p {
                return Err(Error::Parameter(format!(
                    "model on a {}D grid of {} cannot take a {} of length {}",
                    self.spec.dim,
                    self.spec.grid_n,
                    u.kind(),
                    u.len()
                )));
            }
            data.extend_from_slice(u.values());
        }
        Tensor::new(vec![inputs.len(), p], data)
    }

    /// Splits a `[B, field_len]` tensor back into fields.
    pub fn unstack(&self, t: &Tensor) -> Result<Vec<Element>> {
        let p = self.spec.field_len();
        t.data()
            .chunks(p)
            .map(|c| -> Result<Element> {
                Ok(if self.spec.dim == 1 {
                    Element::Field1(Field1D::new(Grid1D::new(self.spec.grid_n)?, c.to_vec())?)
                } else {
                    Element::Field2(Field2D::new(Grid2D::new(self.spec.grid_n)?, c.to_vec())?)
                })
            })
            .collect()
    }

    fn run(&self, inputs: &[Element], pick: impl Fn(&ForwardVars) -> Var) -> Result<Vec<Element>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        let u = tape.leaf(self.stack(inputs)?);
        let f = self.forward_on_tape(&mut tape, &params, u)?;
        self.unstack(tape.value(pick(&f)))
    }

    pub fn forward_batch(&self, inputs: &[Element]) -> Result<Vec<Element>> {
        self.run(inputs, |f| f.output)
    }

    pub fn forward(&self, u: &Element) -> Result<Element> {
        Ok(self.forward_batch(core::slice::from_ref(u))?.remove(0))
    }

    /// Core outputs `R̂(u)` (or `S(u)` in hard mode).
    pub fn core_batch(&self, inputs: &[Element]) -> Result<Vec<Element>> {
        self.run(inputs, |f| f.core)
    }

    /// `Ŝ(u)` (penalty) or `S(u)` (hard); capability error for plain models.
    pub fn s_map_batch(&self, inputs: &[Element]) -> Result<Vec<Element>> {
        if self.spec.structure == Structure::Plain {
            return Err(Error::Capability("plain models have no S-map".into()));
        }
        self.run(inputs, |f| f.s_map.expect("structured model"))
    }

    /// Divides every operator-valued weight by `max(1, σ_max)`, with `σ_max`
    /// from power iteration warm-started at the previous call's vector
    /// ([`POWER_ITERS`] steps, extended by up to [`POWER_ITERS_EXTRA`] until
    /// the estimate settles to 1e-13 relative). Returns the estimates taken
    /// before normalization. Only hard-mode models may be normalized.
    pub fn spectral_normalize(&mut self) -> Result<Vec<f64>> {
        if !matches!(self.spec.structure, Structure::Hard { .. }) {
            return Err(Error::Capability("spectral normalization is for hard-mode models".into()));
        }
        let mut sigmas = Vec::new();
        for (i, info) in self.layout.iter().enumerate() {
            if !info.is_operator {
                continue;
            }
            let (rows, cols) = (info.shape[0], info.shape[1]);
            let sigma = power_iteration(self.params[i].data(), rows, cols, &mut self.power[i]);
            if sigma > 1.0 {
                self.params[i].data_mut().iter_mut().for_each(|v| *v /= sigma);
            }
            sigmas.push(sigma);
        }
        Ok(sigmas)
    }
}

/// Largest singular value of a row-major `rows×cols` matrix by power
/// iteration on `WᵀW`, continuing from `v` (updated in place).
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, v: &mut Vec<f64>) -> f64 {
    if v.len() != cols || v.iter().all(|x| *x == 0.0) {
        *v = vec![1.0; cols];
    }
    let mut wv = vec![0.0; rows];
    let mut sigma = 0.0;
    for it in 0..POWER_ITERS + POWER_ITERS_EXTRA {
        let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        for r in 0..rows {
            wv[r] = w[r * cols..(r + 1) * cols].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        let next = libm::sqrt(wv.iter().map(|x| x * x).sum::<f64>());
        let settled = (next - sigma).abs() <= 1e-13 * next;
        sigma = next;
        for (c, x) in v.iter_mut().enumerate() {
            *x = (0..rows).map(|r| w[r * cols + c] * wv[r]).sum();
        }
        if it + 1 >= POWER_ITERS && settled {
            break;
        }
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::hilbert::{reconstruct, truncate_modes};

    fn mlp_spec(n: usize, m: usize, hidden: Vec<usize>, structure: Structure, act: Activation) -> ModelSpec {
        ModelSpec {
            dim: 1,
            grid_n: n,
            cutoff: m,
            core: CoreSpec::Mlp { hidden, activation: act },
            structure,
        }
    }

    fn random_field(n: usize, s: &mut Stream) -> Element {
        Element::Field1(Field1D::new(Grid1D::new(n).unwrap(), (0..n).map(|_| s.normal()).collect()).unwrap())
    }

    fn band_limited(n: usize, top: usize, s: &mut Stream) -> Element {
        let c: Vec<f64> = (0..2 * top + 1).map(|_| s.normal()).collect();
        Element::Field1(reconstruct(&c, Grid1D::new(n).unwrap()).unwrap())
    }

    fn adjoint_gap(op: &dyn LinearOp, s: &mut Stream) -> f64 {
        let x: Vec<f64> = (0..op.in_len()).map(|_| s.normal()).collect();
        let y: Vec<f64> = (0..op.out_len()).map(|_| s.normal()).collect();
        let mut lx = vec![0.0; op.out_len()];
        let mut ly = vec![0.0; op.in_len()];
        op.apply(&x, &mut lx);
        op.adjoint(&y, &mut ly);
        let a: f64 = lx.iter().zip(&y).map(|(p, q)| p * q).sum();
        let b: f64 = x.iter().zip(&ly).map(|(p, q)| p * q).sum();
        (a - b).abs() / (1.0 + a.abs())
    }

    #[test]
    fn tape_maps_have_exact_adjoints() {
        let mut s = Stream::new(1);
        for (dim, n, m) in [(1u8, 16usize, 5usize), (1, 16, 8), (2, 8, 3), (2, 8, 4)] {
            let basis = Rc::new(Basis::new(dim, n, m));
            assert!(adjoint_gap(&Encoder(basis.clone()), &mut s) < 1e-12);
            assert!(adjoint_gap(&Decoder(basis), &mut s) < 1e-12);
            let set = Rc::new(ModeSet::new(dim, n, m));
            assert!(adjoint_gap(&ModesForward(set.clone()), &mut s) < 1e-12);
            assert!(adjoint_gap(&ModesInverse(set), &mut s) < 1e-12);
        }
    }

    #[test]
    fn mode_transforms_invert_on_their_band() {
        let mut s = Stream::new(2);
        for (dim, n, m) in [(1u8, 16usize, 8usize), (2, 8, 4), (2, 8, 2)] {
            let set = Rc::new(ModeSet::new(dim, n, m));
            let basis = Basis::new(dim, n, m);
            // A field inside the band: project noise with the real basis.
            let noise: Vec<f64> = (0..basis.field_len()).map(|_| s.normal()).collect();
            let mut c = vec![0.0; basis.width()];
            basis.analyze(&noise, &mut c);
            let mut u = vec![0.0; basis.field_len()];
            basis.synthesize(&c, &mut u);
            let mut coeffs = vec![0.0; 2 * set.count()];
            ModesForward(set.clone()).apply(&u, &mut coeffs);
            let mut back = vec![0.0; basis.field_len()];
            ModesInverse(set).apply(&coeffs, &mut back);
            for (a, b) in u.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12, "{dim} {n} {m}");
            }
        }
    }

    #[test]
    fn identity_core_is_the_band_projection() {
        let n = 32;
        let m = 6;
        let spec = mlp_spec(n, m, vec![], Structure::Plain, Activation::Gelu);
        let mut model = Model::new(spec, 0).unwrap();
        let w = 2 * m + 1;
        let mut flat = vec![0.0; model.param_count()];
        for i in 0..w {
            flat[i * w + i] = 1.0;
        }
        model.set_params(&flat).unwrap();
        let mut s = Stream::new(3);
        let u = band_limited(n, m, &mut s);
        let out = model.forward(&u).unwrap();
        assert!(out.distance(&u).unwrap() < 1e-12);
        let v = random_field(n, &mut s);
        let proj = reconstruct(&truncate_modes(v.as_field1().unwrap(), m).unwrap(), Grid1D::new(n).unwrap()).unwrap();
        assert!(model.forward(&v).unwrap().distance(&Element::Field1(proj)).unwrap() < 1e-12);
    }

    #[test]
    fn zero_cores() {
        let n = 16;
        let mut s = Stream::new(4);
        let u = random_field(n, &mut s);
        let mut plain = Model::new(mlp_spec(n, 4, vec![8], Structure::Plain, Activation::Gelu), 1).unwrap();
        plain.set_params(&vec![0.0; plain.param_count()]).unwrap();
        assert!(plain.forward(&u).unwrap().norm() == 0.0);
        let lambda = 0.01;
        let spec = mlp_spec(n, 4, vec![8], Structure::Hard { lambda }, Activation::Relu);
        let mut hard = Model::new(spec, 1).unwrap();
        hard.set_params(&vec![0.0; hard.param_count()]).unwrap();
        let expect = u.scaled(0.5 / lambda);
        assert!(hard.forward(&u).unwrap().distance(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn penalty_output_equals_core_output() {
        let mut s = Stream::new(5);
        let spec = mlp_spec(32, 8, vec![20, 20], Structure::Penalty { lambda: 0.01 }, Activation::Gelu);
        let model = Model::new(spec, 2).unwrap();
        let inputs: Vec<Element> = (0..6).map(|_| band_limited(32, 8, &mut s)).collect();
        let out = model.forward_batch(&inputs).unwrap();
        let core = model.core_batch(&inputs).unwrap();
        for (a, b) in out.iter().zip(&core) {
            assert!(a.distance(b).unwrap() <= 1e-12 * (1.0 + b.norm()));
        }
        let s_map = model.s_map_batch(&inputs).unwrap();
        for ((u, sv), r) in inputs.iter().zip(&s_map).zip(&core) {
            assert!(sv.distance(&u.axpy(-0.01, r).unwrap()).unwrap() < 1e-12);
        }
    }

    #[test]
    fn outputs_depend_only_on_the_encoded_band() {
        let n = 32;
        let m = 5;
        let mut s = Stream::new(6);
        for spec in [
            mlp_spec(n, m, vec![16], Structure::Plain, Activation::Gelu),
            ModelSpec {
                core: CoreSpec::SpectralStack {
                    layers: 2,
                    modes: 4,
                    channels: 3,
                    activation: Activation::Gelu,
                },
                ..mlp_spec(n, m, vec![], Structure::Plain, Activation::Gelu)
            },
        ] {
            let model = Model::new(spec, 3).unwrap();
            let u = band_limited(n, m, &mut s);
            // Modes 7..=9 are orthogonal to the encoded band.
            let mut c = vec![0.0; 19];
            for v in c.iter_mut().skip(13) {
                *v = s.normal();
            }
            let high = Element::Field1(reconstruct(&c, Grid1D::new(n).unwrap()).unwrap());
            let a = model.forward(&u).unwrap();
            let b = model.forward(&u.axpy(1.0, &high).unwrap()).unwrap();
            assert!(a.distance(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip_and_count() {
        let spec = mlp_spec(64, 10, vec![100, 100], Structure::Plain, Activation::Gelu);
        let w = 21;
        let model = Model::new(spec.clone(), 7).unwrap();
        assert_eq!(model.param_count(), w * 100 + 100 + 100 * 100 + 100 + 100 * w + w);
        let mut s = Stream::new(8);
        let u = random_field(64, &mut s);
        let copy = Model::from_params(spec, &model.params()).unwrap();
        assert_eq!(copy.forward(&u).unwrap(), model.forward(&u).unwrap());
        let mut wrong = model.clone();
        assert!(wrong.set_params(&[1.0]).is_err());
    }

    #[test]
    fn bias_perturbation_moves_one_coordinate() {
        let spec = mlp_spec(32, 6, vec![10], Structure::Plain, Activation::Gelu);
        let model = Model::new(spec, 9).unwrap();
        let mut s = Stream::new(10);
        let u = random_field(32, &mut s);
        let mut flat = model.params();
        let last_bias = flat.len() - 13 + 4;
        flat[last_bias] += 1e-3;
        let mut moved = model.clone();
        moved.set_params(&flat).unwrap();
        let a = truncate_modes(model.forward(&u).unwrap().as_field1().unwrap(), 6).unwrap();
        let b = truncate_modes(moved.forward(&u).unwrap().as_field1().unwrap(), 6).unwrap();
        for k in 0..13 {
            let d = (a[k] - b[k]).abs();
            if k == 4 {
                assert!((d - 1e-3).abs() < 1e-12);
            } else {
                assert!(d < 1e-13);
            }
        }
    }

    #[test]
    fn model_gradients_pass_grad_check() {
        let mut s = Stream::new(11);
        let specs = [
            mlp_spec(16, 4, vec![6], Structure::Penalty { lambda: 0.1 }, Activation::Gelu),
            mlp_spec(16, 4, vec![6], Structure::Hard { lambda: 0.1 }, Activation::Relu),
            ModelSpec {
                dim: 2,
                grid_n: 8,
                cutoff: 3,
                core: CoreSpec::SpectralStack {
                    layers: 2,
                    modes: 2,
                    channels: 2,
                    activation: Activation::Gelu,
                },
                structure: Structure::Plain,
            },
        ];
        for spec in specs {
            let model = Model::new(spec.clone(), 12).unwrap();
            let inputs: Vec<Element> = (0..3)
                .map(|_| {
                    if spec.dim == 1 {
                        random_field(16, &mut s)
                    } else {
                        Element::Field2(
                            Field2D::new(Grid2D::new(8).unwrap(), (0..64).map(|_| s.normal()).collect()).unwrap(),
                        )
                    }
                })
                .collect();
            let batch = model.stack(&inputs).unwrap();
            let flat = Tensor::vector(model.params());
            let f = |t: &mut Tape, v: Var| -> Result<Var> {
                // Unflatten the probe vector into per-tensor leaves.
                let mut vars = Vec::new();
                let mut off = 0;
                for p in model.param_tensors() {
                    let idx: Vec<usize> = (off..off + p.len()).collect();
                    let g = t.gather_rows(v, idx)?;
                    vars.push(t.reshape(g, p.shape().to_vec())?);
                    off += p.len();
                }
                let u = t.leaf(batch.clone());
                let out = model.forward_on_tape(t, &vars, u)?;
                t.square_norm(out.output, 1.0)
            };
            let err = grad_check(f, &flat, 1e-6).unwrap();
            assert!(err < 1e-5, "{:?}: {err}", spec.core);
        }
    }

    #[test]
    fn spectral_normalization_halves_a_known_norm() {
        let spec = mlp_spec(16, 2, vec![], Structure::Hard { lambda: 0.1 }, Activation::Relu);
        let mut model = Model::new(spec, 0).unwrap();
        let mut flat = vec![0.0; model.param_count()];
        for i in 0..5 {
            flat[i * 5 + i] = if i == 2 { 2.0 } else { 0.5 };
        }
        model.set_params(&flat).unwrap();
        let sig = model.spectral_normalize().unwrap();
        assert!((sig[0] - 2.0).abs() < 1e-12);
        let w = &model.params()[..25];
        assert!((w[12] - 1.0).abs() < 1e-12 && (w[0] - 0.25).abs() < 1e-12);
        // Already contractive: untouched.
        let before = model.params();
        model.spectral_normalize().unwrap();
        assert_eq!(before, model.params());
        let mut plain = Model::new(mlp_spec(16, 2, vec![], Structure::Plain, Activation::Gelu), 0).unwrap();
        assert!(plain.spectral_normalize().is_err());
    }

    // Independent σ_max: Jacobi eigenvalues of WᵀW.
    fn jacobi_sigma_max(w: &[f64], rows: usize, cols: usize) -> f64 {
        let mut a = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                a[i * cols + j] = (0..rows).map(|r| w[r * cols + i] * w[r * cols + j]).sum();
            }
        }
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..cols {
                for q in p + 1..cols {
                    off += a[p * cols + q] * a[p * cols + q];
                    if a[p * cols + q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * cols + q] - a[p * cols + p]) / (2.0 * a[p * cols + q]);
                    let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / libm::sqrt(t * t + 1.0);
                    let s = t * c;
                    for k in 0..cols {
                        let (akp, akq) = (a[k * cols + p], a[k * cols + q]);
                        a[k * cols + p] = c * akp - s * akq;
                        a[k * cols + q] = s * akp + c * akq;
                    }
                    for k in 0..cols {
                        let (apk, aqk) = (a[p * cols + k], a[q * cols + k]);
                        a[p * cols + k] = c * apk - s * aqk;
                        a[q * cols + k] = s * apk + c * aqk;
                    }
                }
            }
            if off < 1e-30 {
                break;
            }
        }
        libm::sqrt((0..cols).map(|i| a[i * cols + i]).fold(0.0, f64::max))
    }

    #[test]
    fn hard_mode_layers_are_contractions_and_s_is_nonexpansive() {
        let spec = mlp_spec(32, 6, vec![24, 24], Structure::Hard { lambda: 0.01 }, Activation::Relu);
        let model = Model::new(spec, 13).unwrap();
        for (info, t) in model.layout().iter().zip(model.param_tensors()) {
            if info.is_operator {
                let sigma = jacobi_sigma_max(t.data(), info.shape[0], info.shape[1]);
                assert!(sigma <= 1.0 + 1e-6, "{}: {sigma}", info.name);
            }
        }
        let mut s = Stream::new(14);
        let us: Vec<Element> = (0..400).map(|_| random_field(32, &mut s).scaled(3.0)).collect();
        let ss = model.s_map_batch(&us).unwrap();
        let bs = model.forward_batch(&us).unwrap();
        for p in 0..200 {
            let (i, j) = (2 * p, 2 * p + 1);
            let du = us[i].distance(&us[j]).unwrap();
            assert!(ss[i].distance(&ss[j]).unwrap() <= du * (1.0 + 1e-5));
            let m = bs[i].axpy(-1.0, &bs[j]).unwrap().inner(&us[i].axpy(-1.0, &us[j]).unwrap()).unwrap();
            assert!(m >= -1e-9);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = mlp_spec(16, 9, vec![], Structure::Plain, Activation::Gelu);
        assert!(matches!(Model::new(bad, 0), Err(Error::Config(_))));
        let gelu_hard = mlp_spec(16, 4, vec![], Structure::Hard { lambda: 0.1 }, Activation::Gelu);
        assert!(Model::new(gelu_hard, 0).is_err());
        let stack_hard = ModelSpec {
            core: CoreSpec::SpectralStack {
                layers: 1,
                modes: 2,
                channels: 2,
                activation: Activation::Relu,
            },
            ..mlp_spec(16, 4, vec![], Structure::Hard { lambda: 0.1 }, Activation::Relu)
        };
        assert!(matches!(Model::new(stack_hard, 0), Err(Error::Capability(_))));
        let neg = mlp_spec(16, 4, vec![], Structure::Penalty { lambda: -1.0 }, Activation::Gelu);
        assert!(Model::new(neg, 0).is_err());
    }
}
