//! Test-set evaluation: accuracy, graph distance and monotonicity metrics.

use alloc::format;
use alloc::vec::Vec;

use crate::datagen::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::graphdist::{hard_graph_metric, pairwise};
use crate::model::Model;
use crate::operators::{apply, Element, OperatorSpec};
use crate::rng::Stream;

/// Inner products `m_pq` with `|m_pq|` at most this are not counted as
/// violations in `mono_frac`.
pub const MONO_TOL: f64 = 1e-10;

/// Anything that maps a batch of inputs to predictions.
pub trait Predictor {
    fn predict(&self, inputs: &[Element]) -> Result<Vec<Element>>;
}

impl Predictor for Model {
    fn predict(&self, inputs: &[Element]) -> Result<Vec<Element>> {
        self.forward_batch(inputs)
    }
}

/// The true operator used as a model.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePredictor(pub OperatorSpec);

impl Predictor for OraclePredictor {
    fn predict(&self, inputs: &[Element]) -> Result<Vec<Element>> {
        inputs.iter().map(|u| apply(&self.0, u)).collect()
    }
}

impl<F> Predictor for F
where
    F: Fn(&[Element]) -> Result<Vec<Element>>,
{
    fn predict(&self, inputs: &[Element]) -> Result<Vec<Element>> {
        self(inputs)
    }
}

/// Where the monotonicity pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum MonoSource<'a> {
    Test,
    /// Training inputs.
    Train(&'a [Element]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EvalSettings {
    pub mono_pairs: usize,
    pub seed: u64,
    /// Weights of the training graph distance.
    pub w1: f64,
    pub w2: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub test_mse: f64,
    pub mean_rel_l2: f64,
    pub worst_rel_l2: f64,
    pub test_graph: f64,
    pub test_graph_unit: f64,
    pub mono_mean_viol: f64,
    pub mono_worst_signed: f64,
    pub mono_worst_violation: f64,
    pub mono_frac: f64,
    pub n_test: usize,
    pub n_mono_pairs: usize,
    /// Samples left out of the relative errors for having a zero target.
    pub n_zero_targets: usize,
    /// `true` when monotonicity pairs were drawn from the training inputs.
    pub mono_on_train: bool,
}

/// Metric column names in table order.
pub const METRIC_COLUMNS: [&str; 9] = [
    "test_mse",
    "mean_rel_l2",
    "worst_rel_l2",
    "test_graph",
    "test_graph_unit",
    "mono_mean_viol",
    "mono_worst_signed",
    "mono_worst_violation",
    "mono_frac",
];

impl EvalReport {
    /// Metric values in [`METRIC_COLUMNS`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.test_mse,
            self.mean_rel_l2,
            self.worst_rel_l2,
            self.test_graph,
            self.test_graph_unit,
            self.mono_mean_viol,
            self.mono_worst_signed,
            self.mono_worst_violation,
            self.mono_frac,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonoStats {
    pub mean_viol: f64,
    pub worst_signed: f64,
    pub worst_violation: f64,
    pub frac: f64,
    pub pairs: usize,
}

/// `count` distinct unordered index pairs out of `n` items, or all of them
/// when fewer exist.
pub fn distinct_pairs(n: usize, count: usize, rng: &mut Stream) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    let mut ids: Vec<usize> = (0..total).collect();
    if count < total {
        // Partial Fisher-Yates: the first `count` slots end up uniform.
        for i in 0..count {
            let j = i + rng.index(total - i);
            ids.swap(i, j);
        }
        ids.truncate(count);
    }
    ids.into_iter().map(|id| pair_from_index(n, id)).collect()
}

// Inverse of the row-major enumeration of {(p, q) : p < q < n}.
fn pair_from_index(n: usize, mut id: usize) -> (usize, usize) {
    let mut p = 0;
    while id >= n - 1 - p {
        id -= n - 1 - p;
        p += 1;
    }
    (p, p + 1 + id)
}

/// Statistics of `m_pq = ⟨u_p − u_q, Â(u_p) − Â(u_q)⟩` over the given pairs.
pub fn monotonicity(inputs: &[Element], outputs: &[Element], pairs: &[(usize, usize)]) -> Result<MonoStats> {
    let mut sum_viol = 0.0;
    let mut worst_signed = f64::INFINITY;
    let mut worst_violation: f64 = 0.0;
    let mut violating = 0usize;
    for &(p, q) in pairs {
        let du = inputs[p].axpy(-1.0, &inputs[q])?;
        let dy = outputs[p].axpy(-1.0, &outputs[q])?;
        let m = du.inner(&dy)?;
        let viol = (-m).max(0.0);
        sum_viol += viol;
        worst_violation = worst_violation.max(viol);
        worst_signed = worst_signed.min(m);
        if m < -MONO_TOL {
            violating += 1;
        }
    }
    let n = pairs.len();
    if n == 0 {
        return Ok(MonoStats {
            mean_viol: 0.0,
            worst_signed: 0.0,
            worst_violation: 0.0,
            frac: 0.0,
            pairs: 0,
        });
    }
    Ok(MonoStats {
        mean_viol: sum_viol / n as f64,
        worst_signed,
        worst_violation,
        frac: violating as f64 / n as f64,
        pairs: n,
    })
}

pub fn evaluate(
    model: &dyn Predictor,
    test: &Dataset,
    settings: &EvalSettings,
    mono_source: MonoSource<'_>,
) -> Result<EvalReport> {
    evaluate_samples(model, &test.inputs, &test.targets, settings, mono_source)
}

/// [`evaluate`] on bare input/target lists.
pub fn evaluate_samples(
    model: &dyn Predictor,
    inputs: &[Element],
    targets: &[Element],
    settings: &EvalSettings,
    mono_source: MonoSource<'_>,
) -> Result<EvalReport> {
    check_dim("evaluate targets", inputs.len(), targets.len())?;
    if inputs.is_empty() {
        return Err(Error::Parameter("evaluation needs a non-empty test set".into()));
    }
    let preds = model.predict(inputs)?;
    check_dim("evaluate predictions", inputs.len(), preds.len())?;
    let n = inputs.len();
    let mut sq_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut rel_worst: f64 = 0.0;
    let mut zero = 0usize;
    for (y, yh) in targets.iter().zip(&preds) {
        let e2 = y.sq_distance(yh)?;
        sq_sum += e2;
        let ny = y.norm();
        if ny == 0.0 {
            zero += 1;
            continue;
        }
        let rel = libm::sqrt(e2) / ny;
        rel_sum += rel;
        rel_worst = rel_worst.max(rel);
    }
    if zero == n {
        return Err(Error::Undefined("every test target is zero; relative errors are undefined".into()));
    }
    let d = pairwise(inputs, targets, inputs, &preds, settings.w1, settings.w2)?;
    let test_graph = hard_graph_metric(&d)?;
    let d_unit = pairwise(inputs, targets, inputs, &preds, 1.0, 1.0)?;
    let test_graph_unit = hard_graph_metric(&d_unit)?;

    let mut rng = Stream::new(settings.seed);
    let (mono, on_train) = match mono_source {
        MonoSource::Test => {
            let pairs = distinct_pairs(n, settings.mono_pairs, &mut rng);
            (monotonicity(inputs, &preds, &pairs)?, false)
        }
        MonoSource::Train(train) => {
            let out = model.predict(train)?;
            let pairs = distinct_pairs(train.len(), settings.mono_pairs, &mut rng);
            (monotonicity(train, &out, &pairs)?, true)
        }
    };
    Ok(EvalReport {
        test_mse: sq_sum / n as f64,
        mean_rel_l2: rel_sum / (n - zero) as f64,
        worst_rel_l2: rel_worst,
        test_graph,
        test_graph_unit,
        mono_mean_viol: mono.mean_viol,
        mono_worst_signed: mono.worst_signed,
        mono_worst_violation: mono.worst_violation,
        mono_frac: mono.frac,
        n_test: n,
        n_mono_pairs: mono.pairs,
        n_zero_targets: zero,
        mono_on_train: on_train,
    })
}

/// Mean and population standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-column mean ± std over reports, in [`METRIC_COLUMNS`] order.
pub fn aggregate(reports: &[EvalReport]) -> Result<[MeanStd; 9]> {
    if reports.is_empty() {
        return Err(Error::Parameter(format!("cannot aggregate {} reports", 0)));
    }
    let n = reports.len() as f64;
    let mut out = [MeanStd { mean: 0.0, std: 0.0 }; 9];
    for (c, slot) in out.iter_mut().enumerate() {
        let mean = reports.iter().map(|r| r.values()[c]).sum::<f64>() / n;
        let var = reports.iter().map(|r| { let d = r.values()[c] - mean; d * d }).sum::<f64>() / n;
        *slot = MeanStd {
            mean,
            std: libm::sqrt(var),
        };
    }
    Ok(out)
}
