use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mgl::config::{RunConfig, StructureMode, Task, Variant};
use mgl::io;
use mgl::runner::{self, TEST_FILE, TRAIN_FILE};
use mgl_core::datagen::{Dataset, Manifest};
use mgl_core::graphdist::{graph_distance, CompactWindow};
use mgl_core::operators::{yosida, Element, GraphSample, OperatorSpec};
use mgl_core::verify::{self, VerifyOutcome, VERIFIER_NAMES};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mgl", version, about = "Learning maximally monotone operators through graph distances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config; missing fields come from the task preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Multiplies sample counts and epochs of the preset.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test datasets with manifests.
    Gen {
        #[arg(long)]
        task: Option<Task>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seed of the training set (the test set uses seed + 1).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes history.csv, checkpoint.mglc and run.json.
    Train {
        /// Directory holding train.mgld.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        loss: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        structure: Option<StructureMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained run on a test set; writes metrics.json and metrics.csv.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Directory holding test.mgld (and train.mgld).
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Yosida approximation A_λ of an operator, applied to inputs.
    Yosida {
        #[arg(long, value_enum)]
        op: OpName,
        #[arg(long)]
        lambda: f64,
        /// Comma-separated scalars, or a dataset file whose inputs are used.
        #[arg(long, allow_hyphen_values = true)]
        input: String,
        /// Exponent of the p-Laplacian.
        #[arg(long, default_value_t = 1.2)]
        p: f64,
        /// Output dataset (inputs, A_λ(inputs)) for field inputs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Local graph distance between two sampled graphs (datasets or x,y CSV files).
    Graphdist {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// `R_in,R_out` radii of the window K, or `none` for all pairs.
        #[arg(long, default_value = "none")]
        window: String,
    },
    /// Run numerical verifiers; prints one line each and writes a JSON report.
    Verify {
        #[arg(long)]
        all: bool,
        names: Vec<String>,
        #[arg(long, default_value = "verify.json")]
        out: PathBuf,
    },
    /// All four variants × seeds, aggregated table and ranking check.
    Reproduce {
        #[arg(long, default_value_t = 1)]
        table: u8,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Number of seeds (0, 1, …); overrides the config seed list.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum)]
        structure: Option<StructureMode>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OpName {
    Abs,
    Step,
    Derivative,
    Plaplacian,
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    variant: Variant,
    seed: u64,
    config: RunConfig,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { task, cfg, seed, out } => {
            let flags = match seed {
                Some(s) => json!({"data": {"train": {"seed": s}, "test": {"seed": s + 1}}}),
                None => json!({}),
            };
            let cfg = RunConfig::load(task, Task::Derivative1d, cfg.scale, cfg.config.as_deref(), flags)?;
            let (train, test) = runner::generate(&cfg)?;
            runner::write_datasets(&out, &train, &test)?;
            io::write_json(&out.join("config.json"), &cfg)?;
            println!(
                "wrote {} train / {} test samples (grid {}) to {}",
                train.len(),
                test.len(),
                train.grid_n(),
                out.display()
            );
        }
        Command::Train {
            data,
            loss,
            seed,
            out,
            cfg,
            structure,
            epochs,
        } => {
            let train = io::read_dataset(&data.join(TRAIN_FILE))?;
            let task = task_of(&train)?;
            let mut flags = json!({});
            if let Some(s) = structure {
                flags["model"] = json!({"structure": s});
            }
            if let Some(e) = epochs {
                flags["optim"] = json!({"epochs": e});
            }
            let mut config = RunConfig::load(Some(task), task, cfg.scale, cfg.config.as_deref(), flags)?;
            // The data on disk defines the grid and sample settings.
            config.data.train = train.manifest.config.clone();
            config.data.n_train = train.len();
            if let OperatorSpec::PLaplacian2D { p, .. } = train.manifest.operator {
                config.p = p;
            }
            config.validate().context("config does not fit the dataset")?;
            let (model, history) = runner::train_run(&config, loss, seed, &train)?;
            runner::write_run(&out, &model, &history)?;
            io::write_json(
                &out.join("run.json"),
                &RunFile {
                    variant: loss,
                    seed,
                    config,
                },
            )?;
            let l = history.losses();
            match (l.first(), l.last()) {
                (Some(a), Some(b)) => println!("{}: loss {a:.4e} -> {b:.4e} over {} epochs", loss.name(), l.len()),
                _ => println!("{}: no epochs run", loss.name()),
            }
        }
        Command::Eval { run, data, out } => {
            let rf: RunFile = serde_json::from_str(
                &std::fs::read_to_string(run.join("run.json")).with_context(|| format!("reading {}/run.json", run.display()))?,
            )?;
            let model = io::read_checkpoint(&run.join("checkpoint.mglc"))?;
            let test = io::read_dataset(&data.join(TEST_FILE))?;
            let train_path = data.join(TRAIN_FILE);
            let train = if train_path.exists() { io::read_dataset(&train_path)? } else { test.clone() };
            let report = runner::eval_run(&rf.config, &model, rf.seed, &train, &test)?;
            let out = out.unwrap_or(run);
            runner::write_metrics(&out, &report)?;
            for (k, v) in mgl_core::metrics::METRIC_COLUMNS.iter().zip(report.values()) {
                println!("{k:>22} {v:.6e}");
            }
        }
        Command::Yosida {
            op,
            lambda,
            input,
            p,
            out,
        } => yosida_cmd(op, lambda, &input, p, out.as_deref())?,
        Command::Graphdist { a, b, window } => {
            let window = parse_window(&window)?;
            let d = graph_distance(&read_graph(&a)?, &read_graph(&b)?, &window)?;
            println!("{d}");
        }
        Command::Verify { all, names, out } => {
            let names: Vec<String> = if all || names.is_empty() {
                VERIFIER_NAMES.iter().map(|s| s.to_string()).collect()
            } else {
                names
            };
            let results = runner::parallel_map(names, runner::worker_threads(), |n| verify::run_named(n));
            let mut outcomes: Vec<VerifyOutcome> = Vec::new();
            for r in results {
                outcomes.push(r?);
            }
            for o in &outcomes {
                println!("[{}] {} {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            io::write_json(&out, &outcomes)?;
            if outcomes.iter().any(|o| !o.pass) {
                bail!("some verifiers failed");
            }
        }
        Command::Reproduce {
            table,
            scale,
            seeds,
            structure,
            config,
            out,
        } => {
            let task = match table {
                1 => Task::Derivative1d,
                2 => Task::Plaplacian2d,
                t => bail!("--table must be 1 or 2, got {t}"),
            };
            let mut flags = json!({});
            if let Some(n) = seeds {
                flags["seeds"] = json!((0..n as u64).collect::<Vec<_>>());
            }
            if let Some(s) = structure {
                flags["model"] = json!({"structure": s});
            }
            let cfg = RunConfig::load(Some(task), task, scale, config.as_deref(), flags)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let threads = runner::worker_threads();
            eprintln!(
                "reproduce table {table}: {} variants x {} seeds, {} train / {} test samples, grid {}, {} epochs, {threads} worker(s)",
                Variant::ALL.len(),
                cfg.seeds.len(),
                cfg.data.n_train,
                cfg.data.n_test,
                cfg.data.train.grid_n,
                cfg.optim.epochs
            );
            let summary = runner::reproduce(&cfg, Some(&out), threads, true)?;
            print!("{}", io::aggregate_csv(&summary.aggregate));
            for line in summary.ranking.lines() {
                println!("{line}");
            }
            println!("ranking check: {}", if summary.ranking.pass() { "PASS" } else { "FAIL" });
            println!("results in {}", out.display());
        }
    }
    Ok(())
}

fn task_of(data: &Dataset) -> Result<Task> {
    match data.manifest.operator {
        OperatorSpec::DerivativePeriodic1D => Ok(Task::Derivative1d),
        OperatorSpec::PLaplacian2D { .. } => Ok(Task::Plaplacian2d),
        ref other => bail!("no training task for datasets of {}", other.name()),
    }
}

fn operator(op: OpName, p: f64) -> OperatorSpec {
    match op {
        OpName::Abs => OperatorSpec::AbsSubdifferential,
        OpName::Step => OperatorSpec::StepOperator,
        OpName::Derivative => OperatorSpec::DerivativePeriodic1D,
        OpName::Plaplacian => OperatorSpec::plaplacian(p),
    }
}

fn yosida_cmd(op: OpName, lambda: f64, input: &str, p: f64, out: Option<&Path>) -> Result<()> {
    let a = operator(op, p);
    let scalars: Option<Vec<f64>> = input.split(',').map(|s| s.trim().parse().ok()).collect();
    if let Some(xs) = scalars {
        for x in xs {
            let y = yosida(&a, lambda, &Element::Scalar(x), mgl_core::operators::RESOLVENT_DEFAULT_TOL)?;
            println!("{x},{}", y.as_scalar().unwrap_or(f64::NAN));
        }
        return Ok(());
    }
    let data = io::read_dataset(Path::new(input))?;
    let outputs = data
        .inputs
        .iter()
        .map(|u| yosida(&a, lambda, u, mgl_core::operators::RESOLVENT_DEFAULT_TOL))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        operator: a,
        ..data.manifest.clone()
    };
    let result = Dataset::new(data.inputs, outputs, manifest)?;
    let out = out.context("field inputs need --out for the resulting dataset")?;
    io::write_dataset(out, &result)?;
    println!("wrote {} pairs (u, A_λ u) with λ = {lambda} to {}", result.len(), out.display());
    Ok(())
}

fn parse_window(s: &str) -> Result<CompactWindow> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(CompactWindow::Unbounded);
    }
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b] = parts.as_slice() else {
        bail!("--window expects `R_in,R_out` or `none`, got `{s}`");
    };
    Ok(CompactWindow::bounded(a.trim().parse()?, b.trim().parse()?)?)
}

fn read_graph(path: &Path) -> Result<GraphSample> {
    let label = path.display().to_string();
    if path.extension().is_some_and(|e| e == "csv") {
        return Ok(GraphSample::scalar(io::read_scalar_pairs(path)?, label)?);
    }
    let d = io::read_dataset(path)?;
    Ok(GraphSample::new(d.inputs.into_iter().zip(d.targets).collect(), label)?)
}
