//! Run configuration: table presets, `--scale` arithmetic, JSON loading
//! with field paths in errors, and cross-field validation.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mgl_core::datagen::{FourierFieldConfig, IntRange};
use mgl_core::graphdist::SoftGraphParams;
use mgl_core::metrics::EvalSettings;
use mgl_core::model::{Activation, CoreSpec, ModelSpec, Structure};
use mgl_core::operators::OperatorSpec;
use mgl_core::train::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// `u ↦ u'` on periodic 1D fields.
    #[value(alias = "derivative")]
    Derivative1d,
    /// p-Laplacian on periodic 2D fields.
    #[value(alias = "plaplacian")]
    Plaplacian2d,
}

impl Task {
    pub fn dim(self) -> u8 {
        match self {
            Task::Derivative1d => 1,
            Task::Plaplacian2d => 2,
        }
    }

    /// Table whose hyperparameters this task uses.
    pub fn table(self) -> u8 {
        match self {
            Task::Derivative1d => 1,
            Task::Plaplacian2d => 2,
        }
    }
}

/// Which objective (and model form) a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    L2,
    Linf,
    Graph,
    #[value(alias = "graph_structured")]
    GraphStructured,
}

impl Variant {
    /// Row order of the results tables.
    pub const ALL: [Variant; 4] = [Variant::L2, Variant::Linf, Variant::Graph, Variant::GraphStructured];

    pub fn name(self) -> &'static str {
        match self {
            Variant::L2 => "l2",
            Variant::Linf => "linf",
            Variant::Graph => "graph",
            Variant::GraphStructured => "graph_structured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    /// `Â = (u − Ŝ)/λ` with the nonexpansiveness penalty, on the main core.
    Penalty,
    /// `B = (u − S)/(2λ)` with a spectrally normalized ReLU MLP `S`.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonoPairs {
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub train: FourierFieldConfig,
    pub test: FourierFieldConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder cutoff `m`.
    pub cutoff: usize,
    /// Core of the plain and penalty-mode models.
    pub core: CoreSpec,
    /// Core `ψ` of the hard-mode nonexpansive map.
    pub hard_core: CoreSpec,
    pub structure: StructureMode,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_check_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau_inf: f64,
    pub tau_in: f64,
    pub tau_out: f64,
    pub w1: f64,
    pub w2: f64,
    pub gamma: f64,
    pub n_nonexp_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mono_pairs: usize,
    pub mono_source: MonoPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Exponent of the p-Laplacian task (ignored for the derivative task).
    pub p: f64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub out_dir: String,
    pub seeds: Vec<u64>,
}

fn scaled_count(full: usize, scale: f64) -> usize {
    ((full as f64 * scale).round() as usize).max(1)
}

/// Epochs scale with `--scale` but never drop below 30 (or the full count if smaller).
pub fn scaled_epochs(full: usize, scale: f64) -> usize {
    ((full as f64 * scale).round() as usize).max(full.min(MIN_EPOCHS))
}

/// Floor on scaled epoch counts.
pub const MIN_EPOCHS: usize = 30;

/// Smallest power-of-two grid whose Nyquist frequency covers `fmax`.
fn nyquist_grid(fmax: usize) -> usize {
    (2 * fmax).next_power_of_two().max(8)
}

/// Channels of the spectral core: full width at scale ≥ 1, else 32.
fn scaled_width(full: usize, scale: f64) -> usize {
    if scale >= 1.0 {
        full
    } else {
        full.min(32)
    }
}

impl RunConfig {
    /// Table 1 (derivative) or Table 2 (p-Laplacian) settings at `scale`.
    pub fn preset(task: Task, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            bail!("scale must be positive, got {scale}");
        }
        let cfg = match task {
            Task::Derivative1d => {
                let fmax = 30;
                let grid = if scale >= 1.0 { 128 } else { nyquist_grid(fmax).min(128) };
                let modes = 34.min(grid / 2);
                let field = |seed| FourierFieldConfig {
                    dim: 1,
                    grid_n: grid,
                    modes: IntRange::new(3, 6),
                    freq: IntRange::new(2, fmax),
                    beta: 0.5,
                    seed,
                };
                RunConfig {
                    task,
                    p: 2.0,
                    data: DataConfig {
                        n_train: scaled_count(2000, scale),
                        n_test: scaled_count(400, scale),
                        train: field(1),
                        test: field(2),
                    },
                    model: ModelConfig {
                        cutoff: modes,
                        core: CoreSpec::SpectralStack {
                            layers: 3,
                            modes,
                            channels: scaled_width(100, scale),
                            activation: Activation::Gelu,
                        },
                        hard_core: CoreSpec::Mlp {
                            hidden: vec![100, 100],
                            activation: Activation::Relu,
                        },
                        structure: StructureMode::Penalty,
                        lambda: 0.01,
                    },
                    optim: OptimConfig {
                        epochs: scaled_epochs(80, scale),
                        batch_size: 64,
                        learning_rate: 2e-3,
                        weight_decay: 1e-6,
                        clip_threshold: 1.0,
                        beta1: 0.9,
                        beta2: 0.999,
                        epsilon: 1e-8,
                        grad_check_gate: true,
                    },
                    loss: LossConfig {
                        tau_inf: 0.02,
                        tau_in: 0.01,
                        tau_out: 0.01,
                        w1: 0.5,
                        w2: 1.0,
                        gamma: 0.01,
                        n_nonexp_pairs: 512,
                    },
                    eval: EvalConfig {
                        mono_pairs: 128 * 128,
                        mono_source: MonoPairs::Test,
                    },
                    out_dir: "runs/table1".into(),
                    seeds: vec![0, 1, 2, 3],
                }
            }
            Task::Plaplacian2d => {
                let grid = 32;
                let modes = 16;
                let field = |lo, hi, seed| FourierFieldConfig {
                    dim: 2,
                    grid_n: grid,
                    modes: IntRange::new(1, 8),
                    freq: IntRange::new(lo, hi),
                    beta: 0.0,
                    seed,
                };
                RunConfig {
                    task,
                    p: 1.2,
                    data: DataConfig {
                        n_train: scaled_count(2000, scale),
                        n_test: scaled_count(400, scale),
                        train: field(2, 6, 1),
                        test: field(9, 16, 2),
                    },
                    model: ModelConfig {
                        cutoff: modes,
                        core: CoreSpec::SpectralStack {
                            layers: 3,
                            modes,
                            channels: scaled_width(96, scale),
                            activation: Activation::Gelu,
                        },
                        hard_core: CoreSpec::Mlp {
                            hidden: vec![96, 96],
                            activation: Activation::Relu,
                        },
                        structure: StructureMode::Penalty,
                        lambda: 7e-3,
                    },
                    optim: OptimConfig {
                        epochs: scaled_epochs(100, scale),
                        batch_size: 32,
                        learning_rate: 3e-4,
                        weight_decay: 1e-6,
                        clip_threshold: 0.3,
                        beta1: 0.9,
                        beta2: 0.999,
                        epsilon: 1e-8,
                        grad_check_gate: true,
                    },
                    loss: LossConfig {
                        tau_inf: 0.1,
                        tau_in: 1e-4,
                        tau_out: 1e-4,
                        w1: 1e-4,
                        w2: 1.0,
                        gamma: 2e-5,
                        n_nonexp_pairs: 64,
                    },
                    eval: EvalConfig {
                        mono_pairs: 5000,
                        mono_source: MonoPairs::Test,
                    },
                    out_dir: "runs/table2".into(),
                    seeds: vec![0, 1, 2, 3],
                }
            }
        };
        Ok(cfg)
    }

    /// Resolves a config: the preset of the task (flag, else file, else
    /// `default_task`) at `scale`, then the JSON file at `path`, then `flags`.
    pub fn load(
        task_flag: Option<Task>,
        default_task: Task,
        scale: f64,
        path: Option<&Path>,
        flags: Value,
    ) -> Result<Self> {
        let file = match path {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let v: Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {} as JSON", path.display()))?;
                Some(v)
            }
            None => None,
        };
        let file_task = match file.as_ref().and_then(|f| f.get("task")) {
            Some(t) => Some(serde_json::from_value(t.clone()).context("field `task`")?),
            None => None,
        };
        let task = task_flag.or(file_task).unwrap_or(default_task);
        let mut overlay = file.unwrap_or_else(|| Value::Object(Default::default()));
        merge(&mut overlay, flags);
        if let Value::Object(m) = &mut overlay {
            m.insert("task".into(), serde_json::to_value(task)?);
        }
        let cfg = Self::from_overlay(Self::preset(task, scale)?, overlay);
        match path {
            Some(p) => cfg.with_context(|| format!("invalid config {}", p.display())),
            None => cfg,
        }
    }

    /// Merges `overlay` onto `base` (objects key by key, everything else
    /// replaced) and validates the result.
    pub fn from_overlay(base: Self, overlay: Value) -> Result<Self> {
        let mut value = serde_json::to_value(&base)?;
        merge(&mut value, overlay);
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("field `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let dim = self.task.dim();
        for (name, f) in [("data.train", &self.data.train), ("data.test", &self.data.test)] {
            if f.dim != dim {
                bail!("field `{name}.dim`: task {:?} needs dim {dim}, got {}", self.task, f.dim);
            }
            f.validate().map_err(|e| anyhow::anyhow!("field `{name}`: {e}"))?;
        }
        if self.data.train.grid_n != self.data.test.grid_n {
            bail!(
                "field `data.test.grid_n`: train and test grids differ ({} vs {})",
                self.data.train.grid_n,
                self.data.test.grid_n
            );
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            bail!("field `data.n_train`/`data.n_test`: sample counts must be positive");
        }
        let nyq = self.data.train.grid_n / 2;
        if self.model.cutoff > nyq {
            bail!("field `model.cutoff`: {} exceeds the Nyquist frequency {nyq}", self.model.cutoff);
        }
        let fmax = self.data.train.freq.max.max(self.data.test.freq.max);
        if self.model.cutoff < fmax.min(nyq) && self.task == Task::Derivative1d {
            bail!(
                "field `model.cutoff`: {} lies below the data frequency range (max {fmax})",
                self.model.cutoff
            );
        }
        if let CoreSpec::SpectralStack { modes, .. } = self.model.core {
            if modes > nyq {
                bail!("field `model.core.modes`: {modes} exceeds the Nyquist frequency {nyq}");
            }
        }
        if !matches!(self.model.hard_core, CoreSpec::Mlp { activation: Activation::Relu, .. }) {
            bail!("field `model.hard_core`: hard mode needs an MLP core with ReLU activations");
        }
        if !(self.model.lambda > 0.0 && self.model.lambda.is_finite()) {
            bail!("field `model.lambda`: must be positive, got {}", self.model.lambda);
        }
        if self.task == Task::Plaplacian2d && !(self.p > 1.0) {
            bail!("field `p`: p-Laplacian needs p > 1, got {}", self.p);
        }
        if self.seeds.is_empty() {
            bail!("field `seeds`: at least one seed is required");
        }
        for v in Variant::ALL {
            self.loss(v).validate().map_err(|e| anyhow::anyhow!("field `loss`: {e}"))?;
            self.model_spec(v)
                .validate()
                .map_err(|e| anyhow::anyhow!("field `model`: {e}"))?;
        }
        self.train_config(Variant::L2, 0)
            .validate()
            .map_err(|e| anyhow::anyhow!("field `optim`: {e}"))?;
        Ok(())
    }

    pub fn operator(&self) -> OperatorSpec {
        match self.task {
            Task::Derivative1d => OperatorSpec::DerivativePeriodic1D,
            Task::Plaplacian2d => OperatorSpec::plaplacian(self.p),
        }
    }

    pub fn graph_params(&self) -> SoftGraphParams {
        SoftGraphParams {
            tau_in: self.loss.tau_in,
            tau_out: self.loss.tau_out,
            w1: self.loss.w1,
            w2: self.loss.w2,
        }
    }

    pub fn loss(&self, variant: Variant) -> LossKind {
        match variant {
            Variant::L2 => LossKind::L2,
            Variant::Linf => LossKind::SoftLinf {
                tau_inf: self.loss.tau_inf,
            },
            Variant::Graph => LossKind::SoftGraph {
                params: self.graph_params(),
            },
            Variant::GraphStructured => LossKind::SoftGraphStructured {
                params: self.graph_params(),
                gamma: self.loss.gamma,
                n_nonexp_pairs: self.loss.n_nonexp_pairs,
            },
        }
    }

    pub fn model_spec(&self, variant: Variant) -> ModelSpec {
        let (core, structure) = match (variant, self.model.structure) {
            (Variant::GraphStructured, StructureMode::Penalty) => (
                self.model.core.clone(),
                Structure::Penalty {
                    lambda: self.model.lambda,
                },
            ),
            (Variant::GraphStructured, StructureMode::Hard) => (
                self.model.hard_core.clone(),
                Structure::Hard {
                    lambda: self.model.lambda,
                },
            ),
            _ => (self.model.core.clone(), Structure::Plain),
        };
        ModelSpec {
            dim: self.task.dim(),
            grid_n: self.data.train.grid_n,
            cutoff: self.model.cutoff,
            core,
            structure,
        }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let o = &self.optim;
        TrainConfig {
            epochs: o.epochs,
            batch_size: o.batch_size,
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            clip_threshold: o.clip_threshold,
            loss: self.loss(variant),
            seed,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            grad_check_gate: o.grad_check_gate,
        }
    }

    pub fn eval_settings(&self, seed: u64) -> EvalSettings {
        EvalSettings {
            mono_pairs: self.eval.mono_pairs,
            seed,
            w1: self.loss.w1,
            w2: self.loss.w2,
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // Tagged enums switching variant are replaced wholesale.
                    Some(slot) if !tag_changes(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn tag_changes(base: &Value, overlay: &Value) -> bool {
    ["kind", "mode"].iter().any(|tag| match (base.get(tag), overlay.get(tag)) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn desk_scale_arithmetic() {
        let c = RunConfig::preset(Task::Derivative1d, 0.125).unwrap();
        assert_eq!((c.data.n_train, c.data.n_test, c.data.train.grid_n), (250, 50, 64));
        assert_eq!(c.optim.epochs, 30);
        assert_eq!(c.model.cutoff, 32);
        let full = RunConfig::preset(Task::Derivative1d, 1.0).unwrap();
        assert_eq!((full.data.n_train, full.data.train.grid_n, full.optim.epochs), (2000, 128, 80));
        assert_eq!(full.model.cutoff, 34);
        let p = RunConfig::preset(Task::Plaplacian2d, 0.125).unwrap();
        assert_eq!((p.data.train.grid_n, p.data.test.freq.max, p.optim.epochs), (32, 16, 30));
        for c in [c, full, p] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn overlay_merges_and_names_fields() {
        let base = RunConfig::preset(Task::Derivative1d, 0.125).unwrap();
        let c = RunConfig::from_overlay(base.clone(), json!({"optim": {"epochs": 3}, "seeds": [7]})).unwrap();
        assert_eq!(c.optim.epochs, 3);
        assert_eq!(c.optim.batch_size, 64);
        assert_eq!(c.seeds, vec![7]);
        let err = RunConfig::from_overlay(base.clone(), json!({"optim": {"epochs": "x"}})).unwrap_err();
        assert!(format!("{err:#}").contains("optim.epochs"), "{err:#}");
        let err = RunConfig::from_overlay(base.clone(), json!({"data": {"train": {"freq": {"min": 2, "max": 40}}}}))
            .unwrap_err();
        assert!(format!("{err:#}").contains("data.train"), "{err:#}");
        let err = RunConfig::from_overlay(base.clone(), json!({"model": {"cutoff": 40}})).unwrap_err();
        assert!(format!("{err:#}").contains("model.cutoff"), "{err:#}");
        let err = RunConfig::from_overlay(base.clone(), json!({"optim": {"epoch": 3}})).unwrap_err();
        assert!(format!("{err:#}").contains("epoch"), "{err:#}");
        let mlp = RunConfig::from_overlay(
            base,
            json!({"model": {"core": {"kind": "mlp", "hidden": [8], "activation": "gelu"}}}),
        )
        .unwrap();
        assert!(matches!(mlp.model.core, CoreSpec::Mlp { .. }));
    }
}
