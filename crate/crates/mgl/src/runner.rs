//! Data generation, training and evaluation runs, the reproduce sweep, and
//! the worker pool they share.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use mgl_core::datagen::{build_dataset, Dataset};
use mgl_core::metrics::{aggregate, evaluate, EvalReport, MeanStd, MonoSource};
use mgl_core::model::Model;
use mgl_core::train::{train_with_clock, RunHistory};
use serde::Serialize;

use crate::config::{MonoPairs, RunConfig, Variant};
use crate::io;

pub const TRAIN_FILE: &str = "train.mgld";
pub const TEST_FILE: &str = "test.mgld";

/// Worker count: `MGL_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MGL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Maps `f` over `jobs` on up to `threads` workers; results keep job order.
pub fn parallel_map<T, R, F>(jobs: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("job ran")).collect()
}

/// Train and test sets of a config.
pub fn generate(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let op = cfg.operator();
    let train = build_dataset(&op, &cfg.data.train, cfg.data.n_train).context("generating the training set")?;
    let test = build_dataset(&op, &cfg.data.test, cfg.data.n_test).context("generating the test set")?;
    Ok((train, test))
}

/// Writes `train.mgld` and `test.mgld` (with manifests) into `dir`.
pub fn write_datasets(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    io::write_dataset(&dir.join(TRAIN_FILE), train)?;
    io::write_dataset(&dir.join(TEST_FILE), test)?;
    Ok(())
}

pub fn train_run(cfg: &RunConfig, variant: Variant, seed: u64, data: &Dataset) -> Result<(Model, RunHistory)> {
    let mut model = Model::new(cfg.model_spec(variant), seed)?;
    let tcfg = cfg.train_config(variant, seed);
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64() * 1e3;
    let history = train_with_clock(&mut model, data, &tcfg, Some(&clock))
        .with_context(|| format!("training {} (seed {seed})", variant.name()))?;
    Ok((model, history))
}

pub fn eval_run(cfg: &RunConfig, model: &Model, seed: u64, train: &Dataset, test: &Dataset) -> Result<EvalReport> {
    let source = match cfg.eval.mono_source {
        MonoPairs::Test => MonoSource::Test,
        MonoPairs::Train => MonoSource::Train(&train.inputs),
    };
    Ok(evaluate(model, test, &cfg.eval_settings(seed), source)?)
}

/// Writes `history.csv` and `checkpoint.mglc` into `dir`.
pub fn write_run(dir: &Path, model: &Model, history: &RunHistory) -> Result<()> {
    io::write_text(&dir.join("history.csv"), &io::history_csv(history))?;
    io::write_checkpoint(&dir.join("checkpoint.mglc"), model)?;
    Ok(())
}

/// Writes `metrics.json` and `metrics.csv` into `dir`.
pub fn write_metrics(dir: &Path, report: &EvalReport) -> Result<()> {
    io::write_json(&dir.join("metrics.json"), report)?;
    io::write_text(&dir.join("metrics.csv"), &io::metrics_csv(&[], &[(vec![], report.clone())]))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: f64,
    pub initial_loss: f64,
}

/// Outcome of the ranking check on per-seed metrics.
#[derive(Debug, Clone, Serialize)]
pub struct RankingCheck {
    pub seeds: usize,
    pub required: usize,
    /// Seeds where the graph loss beats ℓ² on Test Graph.
    pub graph_wins: usize,
    /// Seeds where graph+structure beats ℓ² on mono_frac.
    pub mono_wins: usize,
    pub graph_pass: bool,
    pub mono_pass: bool,
}

impl RankingCheck {
    pub fn pass(&self) -> bool {
        self.graph_pass && self.mono_pass
    }

    /// Wins needed: three quarters of the seeds, rounded up.
    pub fn from_runs(runs: &[RunResult], seeds: &[u64]) -> Self {
        let get = |v: Variant, s: u64| runs.iter().find(|r| r.variant == v && r.seed == s).map(|r| &r.report);
        let mut graph_wins = 0;
        let mut mono_wins = 0;
        for &s in seeds {
            if let (Some(l2), Some(g)) = (get(Variant::L2, s), get(Variant::Graph, s)) {
                graph_wins += usize::from(g.test_graph < l2.test_graph);
            }
            if let (Some(l2), Some(g)) = (get(Variant::L2, s), get(Variant::GraphStructured, s)) {
                mono_wins += usize::from(g.mono_frac < l2.mono_frac);
            }
        }
        let required = (3 * seeds.len()).div_ceil(4);
        Self {
            seeds: seeds.len(),
            required,
            graph_wins,
            mono_wins,
            graph_pass: graph_wins >= required,
            mono_pass: mono_wins >= required,
        }
    }

    pub fn lines(&self) -> [String; 2] {
        let verdict = |ok| if ok { "PASS" } else { "FAIL" };
        [
            format!(
                "[{}] graph loss Test Graph < l2 Test Graph in {}/{} seeds (need {})",
                verdict(self.graph_pass),
                self.graph_wins,
                self.seeds,
                self.required
            ),
            format!(
                "[{}] graph+structure mono_frac < l2 mono_frac in {}/{} seeds (need {})",
                verdict(self.mono_pass),
                self.mono_wins,
                self.seeds,
                self.required
            ),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReproduceSummary {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<(String, [MeanStd; 9])>,
    pub ranking: RankingCheck,
}

/// All four variants × `cfg.seeds` on one pair of datasets. Writes
/// `data/`, `runs/<variant>_s<seed>/`, `metrics.csv`, `aggregate_table.csv`
/// and `ranking.json` under `out` when given.
pub fn reproduce(cfg: &RunConfig, out: Option<&Path>, threads: usize, log: bool) -> Result<ReproduceSummary> {
    let (train, test) = generate(cfg)?;
    if let Some(out) = out {
        write_datasets(&out.join("data"), &train, &test)?;
        io::write_json(&out.join("config.json"), cfg)?;
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = parallel_map(jobs, threads, |&(variant, seed)| -> Result<RunResult> {
        let t0 = Instant::now();
        let (model, history) = train_run(cfg, variant, seed, &train)?;
        let report = eval_run(cfg, &model, seed, &train, &test)?;
        if let Some(out) = out {
            let dir = run_dir(out, variant, seed);
            write_run(&dir, &model, &history)?;
            write_metrics(&dir, &report)?;
        }
        let losses = history.losses();
        if log {
            eprintln!(
                "{:>16} seed {seed}: test_graph {:.4} mono_frac {:.4} test_mse {:.4e} ({:.1}s)",
                variant.name(),
                report.test_graph,
                report.mono_frac,
                report.test_mse,
                t0.elapsed().as_secs_f64()
            );
        }
        Ok(RunResult {
            variant,
            seed,
            report,
            initial_loss: losses.first().copied().unwrap_or(f64::NAN),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
        })
    });
    let runs: Vec<RunResult> = results.into_iter().collect::<Result<_>>()?;
    let mut agg = Vec::new();
    for v in Variant::ALL {
        let reports: Vec<EvalReport> = runs.iter().filter(|r| r.variant == v).map(|r| r.report.clone()).collect();
        agg.push((v.name().to_string(), aggregate(&reports)?));
    }
    let ranking = RankingCheck::from_runs(&runs, &cfg.seeds);
    if let Some(out) = out {
        let rows: Vec<(Vec<String>, EvalReport)> = runs
            .iter()
            .map(|r| (vec![r.variant.name().to_string(), r.seed.to_string()], r.report.clone()))
            .collect();
        io::write_text(&out.join("metrics.csv"), &io::metrics_csv(&["variant", "seed"], &rows))?;
        io::write_text(&out.join("aggregate_table.csv"), &io::aggregate_csv(&agg))?;
        io::write_json(&out.join("ranking.json"), &ranking)?;
    }
    Ok(ReproduceSummary {
        runs,
        aggregate: agg,
        ranking,
    })
}

pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{}_s{seed}", variant.name()))
}
