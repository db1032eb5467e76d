//! Losses, Adam with global-norm clipping, and the mini-batch training loop.
//!
//! All losses are computed per mini-batch with H-norms (rectangle-rule
//! weights), and all of them are differentiable tape composites, so the same
//! code computes values for evaluation and gradients for training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{grad_check, Axis, Tape, Tensor, Var};
use crate::datagen::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::graphdist::SoftGraphParams;
use crate::model::{Model, Structure};
use crate::operators::Element;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub enum LossKind {
    L2,
    SoftLinf {
        tau_inf: f64,
    },
    SoftGraph {
        params: SoftGraphParams,
    },
    SoftGraphStructured {
        params: SoftGraphParams,
        gamma: f64,
        n_nonexp_pairs: usize,
    },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::SoftLinf { .. } => "soft_linf",
            LossKind::SoftGraph { .. } => "soft_graph",
            LossKind::SoftGraphStructured { .. } => "soft_graph_structured",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossKind::L2 => Ok(()),
            LossKind::SoftLinf { tau_inf } => {
                if *tau_inf > 0.0 && tau_inf.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("tau_inf must be positive, got {tau_inf}")))
                }
            }
            LossKind::SoftGraph { params } => params.validate(),
            LossKind::SoftGraphStructured {
                params,
                gamma,
                n_nonexp_pairs,
            } => {
                params.validate()?;
                if !(*gamma >= 0.0 && gamma.is_finite()) {
                    return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
                }
                if *n_nonexp_pairs == 0 {
                    return Err(Error::Config("n_nonexp_pairs must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Run the finite-difference self-test of the loss before training.
    pub grad_check_gate: bool,
}

impl TrainConfig {
    /// Optimizer defaults with the given loss and seed.
    pub fn new(loss: LossKind, seed: u64) -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            clip_threshold: 1.0,
            loss,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_check_gate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("clip_threshold", self.clip_threshold),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// `Σ_j ‖y_j − ŷ_j‖²` with H-weight `h`; `y`, `ŷ` are `[B, P]`.
pub fn l2_on_tape(tape: &mut Tape, y: Var, yhat: Var, h: f64) -> Result<Var> {
    let r = tape.sub(y, yhat)?;
    tape.square_norm(r, h)
}

/// `τ log Σ_j exp(‖y_j − ŷ_j‖/τ)`.
pub fn soft_linf_on_tape(tape: &mut Tape, y: Var, yhat: Var, h: f64, tau: f64) -> Result<Var> {
    let r = tape.sub(y, yhat)?;
    let sq = tape.row_square_norms(r, h)?;
    let norms = tape.sqrt_floor(sq)?;
    tape.log_sum_exp(norms, Axis::All, tau)
}

/// Soft graph distance over the batch pairwise matrix
/// `d_ij = sqrt(w1‖u_i − u_j‖² + w2‖y_i − ŷ_j‖²)`. Only `ŷ` should carry
/// gradients; `u` and `y` are expected to be constant leaves.
pub fn soft_graph_on_tape(
    tape: &mut Tape,
    u: Var,
    y: Var,
    yhat: Var,
    h: f64,
    params: &SoftGraphParams,
) -> Result<Var> {
    params.validate()?;
    let din = tape.pairwise_sq_dist(u, u, params.w1 * h)?;
    let dout = tape.pairwise_sq_dist(y, yhat, params.w2 * h)?;
    let sum = tape.add(din, dout)?;
    let d = tape.sqrt_floor(sum)?;
    let neg = tape.scale(d, -1.0)?;
    // Soft minimum along each row (over model pairs j) and each column.
    let row_lse = tape.log_sum_exp(neg, Axis::Cols, params.tau_in)?;
    let row_min = tape.scale(row_lse, -1.0)?;
    let col_lse = tape.log_sum_exp(neg, Axis::Rows, params.tau_in)?;
    let col_min = tape.scale(col_lse, -1.0)?;
    let hh = tape.log_sum_exp(row_min, Axis::All, params.tau_out)?;
    let hh2 = tape.log_sum_exp(col_min, Axis::All, params.tau_out)?;
    tape.maximum(hh, hh2)
}

/// Index pairs for the nonexpansiveness penalty: uniform with replacement,
/// rejecting pairs with identical inputs. `None` when every input coincides.
pub fn sample_pairs(inputs: &[Element], n_pairs: usize, rng: &mut Stream) -> Option<Vec<(usize, usize)>> {
    let b = inputs.len();
    let distinct = (1..b).any(|i| inputs[i] != inputs[0]);
    if !distinct {
        return None;
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let p = rng.index(b);
        let q = rng.index(b);
        if inputs[p] != inputs[q] {
            pairs.push((p, q));
        }
    }
    Some(pairs)
}

/// `Σ_(p,q) max(0, ‖S(u_p) − S(u_q)‖/‖u_p − u_q‖ − 1)²` over the given pairs;
/// `s` is `[B, P]`.
pub fn nonexp_on_tape(
    tape: &mut Tape,
    s: Var,
    inputs: &[Element],
    pairs: &[(usize, usize)],
    h: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let mut inv = Vec::with_capacity(pairs.len());
    for &(p, q) in pairs {
        let du = inputs[p].distance(&inputs[q])?;
        if du == 0.0 {
            return Err(Error::Parameter(format!("pair ({p}, {q}) has identical inputs")));
        }
        inv.push(1.0 / du);
    }
    let sp = tape.gather_rows(s, pairs.iter().map(|x| x.0).collect())?;
    let sq = tape.gather_rows(s, pairs.iter().map(|x| x.1).collect())?;
    let diff = tape.sub(sp, sq)?;
    let sqn = tape.row_square_norms(diff, h)?;
    let norms = tape.sqrt_floor(sqn)?;
    let ratio = tape.mul_const(norms, inv)?;
    let excess = tape.add_const(ratio, -1.0)?;
    let excess = tape.relu(excess)?;
    let excess = tape.square(excess)?;
    tape.sum(excess)
}

fn stacked(items: &[Element]) -> Result<(Tensor, f64)> {
    let first = items
        .first()
        .ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let p = first.len();
    let mut data = Vec::with_capacity(items.len() * p);
    for e in items {
        check_dim("batch element", p, e.len())?;
        data.extend_from_slice(e.values());
    }
    Ok((Tensor::matrix(items.len(), p, data)?, first.weight()))
}

fn scalar_loss(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).data()[0])
}

pub fn loss_l2(targets: &[Element], predictions: &[Element]) -> Result<f64> {
    check_dim("loss_l2 batch", targets.len(), predictions.len())?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let (y, h) = stacked(targets)?;
    let (yhat, _) = stacked(predictions)?;
    scalar_loss(|t| {
        let (a, b) = (t.leaf(y), t.leaf(yhat));
        l2_on_tape(t, a, b, h)
    })
}

pub fn loss_soft_linf(targets: &[Element], predictions: &[Element], tau_inf: f64) -> Result<f64> {
    check_dim("loss_soft_linf batch", targets.len(), predictions.len())?;
    let (y, h) = stacked(targets)?;
    let (yhat, _) = stacked(predictions)?;
    scalar_loss(|t| {
        let (a, b) = (t.leaf(y), t.leaf(yhat));
        soft_linf_on_tape(t, a, b, h, tau_inf)
    })
}

pub fn loss_soft_graph(
    inputs: &[Element],
    targets: &[Element],
    predictions: &[Element],
    params: &SoftGraphParams,
) -> Result<f64> {
    check_dim("loss_soft_graph targets", inputs.len(), targets.len())?;
    check_dim("loss_soft_graph predictions", inputs.len(), predictions.len())?;
    let (u, h) = stacked(inputs)?;
    let (y, _) = stacked(targets)?;
    let (yhat, _) = stacked(predictions)?;
    scalar_loss(|t| {
        let (a, b, c) = (t.leaf(u), t.leaf(y), t.leaf(yhat));
        soft_graph_on_tape(t, a, b, c, h, params)
    })
}

/// Nonexpansiveness penalty of `s_map` on pairs drawn from `inputs`; a batch
/// of identical inputs gives 0 and `degenerate = true`.
pub fn loss_nonexp(
    s_map: impl Fn(&[Element]) -> Result<Vec<Element>>,
    inputs: &[Element],
    rng: &mut Stream,
    n_pairs: usize,
) -> Result<NonexpValue> {
    if n_pairs == 0 {
        return Err(Error::Parameter("n_pairs must be at least 1".into()));
    }
    let Some(pairs) = sample_pairs(inputs, n_pairs, rng) else {
        return Ok(NonexpValue {
            value: 0.0,
            degenerate: true,
        });
    };
    let outputs = s_map(inputs)?;
    let (s, _) = stacked(&outputs)?;
    let h = inputs[0].weight();
    let value = scalar_loss(|t| {
        let sv = t.leaf(s);
        nonexp_on_tape(t, sv, inputs, &pairs, h)
    })?;
    Ok(NonexpValue {
        value,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonexpValue {
    pub value: f64,
    pub degenerate: bool,
}

/// First and second Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One Adam step with global-norm clipping and decoupled weight decay
/// `p ← p − lr·wd·p`. A non-finite gradient aborts the step untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<StepInfo> {
    check_dim("adam_step grads", params.len(), grads.len())?;
    check_dim("adam_step state", params.len(), state.m.len())?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i} is not finite; step aborted")));
    }
    let norm = libm::sqrt(grads.iter().map(|g| g * g).sum::<f64>());
    let clipped = norm > cfg.clip_threshold;
    let scale = if clipped { cfg.clip_threshold / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * cfg.weight_decay * params[i];
        params[i] -= cfg.learning_rate * mhat / (libm::sqrt(vhat) + cfg.epsilon);
    }
    Ok(StepInfo {
        grad_norm: norm,
        clipped,
    })
}

/// Records the configured loss for one batch; returns the loss node.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    params: &[Var],
    inputs: &[Element],
    targets: &[Element],
    loss: &LossKind,
    rng: &mut Stream,
) -> Result<Var> {
    let (u, h) = stacked(inputs)?;
    let (y, _) = stacked(targets)?;
    let u = tape.leaf(u);
    let y = tape.leaf(y);
    let f = model.forward_on_tape(tape, params, u)?;
    match loss {
        LossKind::L2 => l2_on_tape(tape, y, f.output, h),
        LossKind::SoftLinf { tau_inf } => soft_linf_on_tape(tape, y, f.output, h, *tau_inf),
        LossKind::SoftGraph { params } => soft_graph_on_tape(tape, u, y, f.output, h, params),
        LossKind::SoftGraphStructured {
            params,
            gamma,
            n_nonexp_pairs,
        } => {
            let g = soft_graph_on_tape(tape, u, y, f.output, h, params)?;
            let s = f.s_map.ok_or_else(|| {
                Error::Capability("the structured graph loss needs a penalty- or hard-mode model".into())
            })?;
            let pen = match sample_pairs(inputs, *n_nonexp_pairs, rng) {
                Some(pairs) => nonexp_on_tape(tape, s, inputs, &pairs, h)?,
                None => tape.leaf(Tensor::scalar(0.0)),
            };
            let pen = tape.scale(pen, *gamma)?;
            tape.add(g, pen)
        }
    }
}

/// Largest finite-difference discrepancy of the configured loss, checked as
/// a function of the predictions (and of the S-map outputs for the
/// structured loss) on the first few training samples.
pub fn loss_grad_check(model: &Model, data: &Dataset, loss: &LossKind, seed: u64) -> Result<f64> {
    let count = data.len().min(4);
    if count == 0 {
        return Err(Error::Parameter("empty dataset".into()));
    }
    let inputs = &data.inputs[..count];
    let targets = &data.targets[..count];
    let preds = model.forward_batch(inputs)?;
    let (u, h) = stacked(inputs)?;
    let (y, _) = stacked(targets)?;
    let (yhat, _) = stacked(&preds)?;
    let h_step = 1e-5 * (1.0 + yhat.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let err = match loss {
        LossKind::L2 => grad_check(
            |t, v| {
                let yv = t.leaf(y.clone());
                l2_on_tape(t, yv, v, h)
            },
            &yhat,
            h_step,
        )?,
        LossKind::SoftLinf { tau_inf } => grad_check(
            |t, v| {
                let yv = t.leaf(y.clone());
                soft_linf_on_tape(t, yv, v, h, *tau_inf)
            },
            &yhat,
            h_step,
        )?,
        LossKind::SoftGraph { params } | LossKind::SoftGraphStructured { params, .. } => grad_check(
            |t, v| {
                let (uv, yv) = (t.leaf(u.clone()), t.leaf(y.clone()));
                soft_graph_on_tape(t, uv, yv, v, h, params)
            },
            &yhat,
            h_step,
        )?,
    };
    let mut worst = err;
    if let LossKind::SoftGraphStructured { n_nonexp_pairs, .. } = loss {
        let s = model.s_map_batch(inputs)?;
        let (sv, _) = stacked(&s)?;
        let mut rng = Stream::new(seed);
        if let Some(pairs) = sample_pairs(inputs, (*n_nonexp_pairs).min(16), &mut rng) {
            let step = 1e-5 * (1.0 + sv.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            let e = grad_check(|t, v| nonexp_on_tape(t, v, inputs, &pairs, h), &sv, step)?;
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Threshold of the startup gradient self-test.
pub const GRAD_GATE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch losses.
    pub loss: f64,
    /// Wall time of the epoch in milliseconds (0 without a clock).
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub final_params: Vec<f64>,
    /// Result of the gradient self-test, if it ran.
    pub grad_check_error: Option<f64>,
}

impl RunHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<RunHistory> {
    train_with_clock(model, data, cfg, None)
}

/// [`train`] with an optional millisecond clock for the wall-time column.
pub fn train_with_clock(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    clock: Option<&dyn Fn() -> f64>,
) -> Result<RunHistory> {
    cfg.validate()?;
    let spec = model.spec();
    if data.dim() != spec.dim || data.grid_n() != spec.grid_n {
        return Err(Error::Parameter(format!(
            "dataset ({}D, grid {}) does not match the model ({}D, grid {})",
            data.dim(),
            data.grid_n(),
            spec.dim,
            spec.grid_n
        )));
    }
    if data.is_empty() {
        return Err(Error::Parameter("cannot train on an empty dataset".into()));
    }
    if matches!(cfg.loss, LossKind::SoftGraphStructured { .. }) && spec.structure == Structure::Plain {
        return Err(Error::Capability(
            "the structured graph loss needs a penalty- or hard-mode model".into(),
        ));
    }
    let hard = matches!(spec.structure, Structure::Hard { .. });
    let mut history = RunHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        final_params: model.params(),
        grad_check_error: None,
    };
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if cfg.grad_check_gate {
        let err = loss_grad_check(model, data, &cfg.loss, cfg.seed)?;
        history.grad_check_error = Some(err);
        if !(err <= GRAD_GATE_TOL) {
            return Err(Error::Numeric(format!(
                "{} loss failed the gradient self-test: relative error {err:.3e} > {GRAD_GATE_TOL:e}",
                cfg.loss.name()
            )));
        }
    }
    let mut state = AdamState::new(model.param_count());
    let mut params = model.params();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = clock.map(|c| c());
        let mut shuffle = Stream::substream(cfg.seed, epoch as u64);
        order.sort_unstable();
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Element> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
            let targets: Vec<Element> = chunk.iter().map(|&i| data.targets[i].clone()).collect();
            let mut pair_rng = Stream::substream(shuffle_seed(cfg.seed, epoch), b as u64);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let loss = batch_loss_on_tape(&mut tape, model, &vars, &inputs, &targets, &cfg.loss, &mut pair_rng)?;
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            let g = model.flat_grads(&grads, &vars);
            adam_step(&mut params, &g, &mut state, cfg)?;
            model.set_params(&params)?;
            if hard {
                model.spectral_normalize()?;
                params = model.params();
            }
            total += value;
            batches += 1;
        }
        let wall_ms = match (clock, start) {
            (Some(c), Some(s)) => c() - s,
            _ => 0.0,
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: total / batches as f64,
            wall_ms,
        });
    }
    history.final_params = model.params();
    Ok(history)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    crate::rng::substream_seed(seed ^ 0xA5A5_A5A5_A5A5_A5A5, epoch as u64)
}
