//! Command-line front end: train, predict, summary, shap and simulate.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::parse_formula;
use crate::interpret::{self, ShapMode};
use crate::io::persist::{self, ModelState};
use crate::io::simulate::{simulate, SimSpec};
use crate::io::{load_csv, write_csv, ColumnTable, LoadOptions};
use crate::model::{Model, ModelConfig};
use crate::trainer::{fit_logged, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "lmmnet", version, about = "Mixed-effects neural networks for grouped tabular data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and save it as a bundle directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        formula: String,
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out CSV enabling early stopping.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Line-delimited JSON epoch log.
        #[arg(long)]
        log_file: Option<PathBuf>,
        #[arg(long)]
        impute_mean: bool,
    },
    /// Write point predictions, optionally with Monte Carlo intervals.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Miscoverage level, e.g. 0.1 for 90% intervals.
        #[arg(long)]
        interval: Option<f64>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Intervals for the mean only, without observation noise.
        #[arg(long)]
        no_noise: bool,
        #[arg(long)]
        impute_mean: bool,
    },
    /// Print fixed effects, variance components and information criteria.
    Summary {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        outcome: usize,
        #[arg(long, default_value_t = 0)]
        column: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        impute_mean: bool,
    },
    /// Shapley attributions of the fixed features and random terms.
    Shap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ShapModeArg::Exact)]
        mode: ShapModeArg,
        #[arg(long)]
        background: Option<PathBuf>,
        /// Antithetic permutation pairs in sampled mode.
        #[arg(long, default_value_t = 64)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        outcome: usize,
        #[arg(long, default_value_t = 0)]
        column: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full report, standard errors and edge importances included, as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        impute_mean: bool,
    },
    /// Generate a synthetic dataset.
    Simulate {
        /// lmm, sleepstudy_like, sem_chain or spatial.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON simulation parameters overriding the defaults of `kind`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Ground truth as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ShapModeArg {
    Exact,
    Sampled,
}

/// Contents of `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_table(path: &Path, config: &ModelConfig, targets: Vec<String>, impute_mean: bool) -> Result<ColumnTable> {
    let opts = LoadOptions { targets, impute_mean };
    let (table, report) = load_csv(path, &config.schema, &opts)?;
    if report.dropped_missing_target > 0 {
        eprintln!("{}: dropped {} rows with a missing target", path.display(), report.dropped_missing_target);
    }
    if report.imputed_cells > 0 {
        eprintln!("{}: imputed {} missing cells", path.display(), report.imputed_cells);
    }
    Ok(table)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    persist::write_atomic(path, text.as_bytes())
}

fn table_csv(table: &ColumnTable) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

fn train(
    data: &Path,
    formula: &str,
    config: Option<&Path>,
    out: &Path,
    val: Option<&Path>,
    log_file: Option<&Path>,
    impute_mean: bool,
) -> Result<()> {
    let mut run: RunConfig = match config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    run.model.formula = formula.to_string();
    run.train.validate()?;
    let ast = parse_formula(formula)?;
    let targets: Vec<String> = run
        .model
        .resolved_outcomes(&ast)?
        .into_iter()
        .flat_map(|o| o.targets)
        .collect();
    let train_data = load_table(data, &run.model, targets.clone(), impute_mean)?;
    let val_data = val.map(|p| load_table(p, &run.model, targets, impute_mean)).transpose()?;
    let mut model = Model::build(run.model.clone(), &train_data, run.train.seed)?;
    let mut log = match log_file {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let report = fit_logged(
        &mut model,
        &train_data,
        val_data.as_ref(),
        &run.train,
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let (Some(w), Some(p)) = (log.as_mut(), log_file) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let last = report.epochs.last().map(|e| e.train.total).unwrap_or(f64::NAN);
    persist::save_model(
        &ModelState {
            model,
            train_config: Some(run.train),
            fit: Some(report.clone()),
        },
        out,
    )?;
    println!(
        "trained {} epochs, final loss {last:.6}{}; saved to {}",
        report.epochs.len(),
        report.best_val_loss.map(|v| format!(", best validation loss {v:.6}")).unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn column_name(outcome: &str, j: usize, width: usize) -> String {
    if width == 1 {
        outcome.to_string()
    } else {
        format!("{outcome}_{j}")
    }
}

#[allow(clippy::too_many_arguments)]
fn predict(
    model_dir: &Path,
    data: &Path,
    out: &Path,
    interval: Option<f64>,
    samples: usize,
    seed: u64,
    noise: bool,
    impute_mean: bool,
) -> Result<()> {
    let state = persist::load_model(model_dir)?;
    let model = &state.model;
    let table = load_table(data, &model.config, Vec::new(), impute_mean)?;
    let preds = interpret::predict_point(model, &table)?;
    let mut result = ColumnTable::new();
    for (k, p) in preds.iter().enumerate() {
        for j in 0..p.mean.cols() {
            result.push(&column_name(&p.outcome, j, p.mean.cols()), crate::io::Column::Numeric(p.mean.col(j)))?;
        }
        if let Some(cls) = &p.class {
            let labels: Vec<String> = cls
                .iter()
                .map(|&c| {
                    model.meta.target_levels[k]
                        .as_ref()
                        .and_then(|l| l.label(c).map(str::to_string))
                        .unwrap_or_else(|| c.to_string())
                })
                .collect();
            result = result.with_text(&format!("{}_class", p.outcome), labels)?;
        }
    }
    if let Some(alpha) = interval {
        for iv in interpret::predict_interval(model, &table, samples, alpha, noise, seed)? {
            let w = iv.point.cols();
            for j in 0..w {
                let name = column_name(&iv.outcome, j, w);
                result.push(&format!("{name}_lower"), crate::io::Column::Numeric(iv.lower.col(j)))?;
                result.push(&format!("{name}_upper"), crate::io::Column::Numeric(iv.upper.col(j)))?;
            }
        }
    }
    write_text(out, &table_csv(&result)?)?;
    println!("wrote {} predictions to {}", table.n_rows(), out.display());
    Ok(())
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            data,
            formula,
            config,
            out,
            val,
            log_file,
            impute_mean,
        } => train(
            &data,
            &formula,
            config.as_deref(),
            &out,
            val.as_deref(),
            log_file.as_deref(),
            impute_mean,
        ),
        Command::Predict {
            model,
            data,
            out,
            interval,
            samples,
            seed,
            no_noise,
            impute_mean,
        } => predict(&model, &data, &out, interval, samples, seed, !no_noise, impute_mean),
        Command::Summary {
            model,
            data,
            outcome,
            column,
            out,
            json,
            impute_mean,
        } => {
            let state = persist::load_model(&model)?;
            let table = load_table(&data, &state.model.config, Vec::new(), impute_mean)?;
            let s = interpret::summary(&state.model, &table, outcome, column)?;
            print!("{}", s.render());
            if let Some(out) = out {
                write_text(&out, &s.to_csv()?)?;
            }
            if let Some(p) = json {
                write_text(&p, &serde_json::to_string_pretty(&s)?)?;
            }
            Ok(())
        }
        Command::Shap {
            model,
            data,
            mode,
            background,
            permutations,
            outcome,
            column,
            seed,
            out,
            json,
            impute_mean,
        } => {
            let state = persist::load_model(&model)?;
            let cfg = &state.model.config;
            let table = load_table(&data, cfg, Vec::new(), impute_mean)?;
            let bg = background
                .map(|p| load_table(&p, cfg, Vec::new(), impute_mean))
                .transpose()?;
            let mode = match mode {
                ShapModeArg::Exact => ShapMode::Exact,
                ShapModeArg::Sampled => ShapMode::Sampled,
            };
            let report = interpret::shapley_values(
                &state.model,
                &table,
                outcome,
                column,
                mode,
                bg.as_ref(),
                permutations,
                seed,
            )?;
            let csv = report.to_csv()?;
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
            if let Some(p) = json {
                write_text(&p, &serde_json::to_string_pretty(&report)?)?;
            }
            for (t, c) in report.random_terms.iter().zip(&report.random_contribution) {
                eprintln!("mean |contribution| of {t}: {c:.6}");
            }
            Ok(())
        }
        Command::Simulate {
            kind,
            seed,
            out,
            params,
            truth,
        } => {
            let spec = match params {
                Some(p) => {
                    let mut value: serde_json::Value = read_json(&p)?;
                    if let Some(obj) = value.as_object_mut() {
                        obj.insert("kind".into(), serde_json::Value::String(kind.clone()));
                    }
                    serde_json::from_value(value)?
                }
                None => SimSpec::from_kind(&kind)?,
            };
            let sim = simulate(&spec, seed)?;
            write_text(&out, &table_csv(&sim.data)?)?;
            if let Some(t) = truth {
                write_text(&t, &serde_json::to_string_pretty(&sim.truth)?)?;
            }
            println!("wrote {} rows to {}", sim.data.n_rows(), out.display());
            Ok(())
        }
    }
}
