use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use ttgp::checkpoint::{load_checkpoint, save_checkpoint};
use ttgp::data::{csv_has_header, load_csv, load_libsvm, prepare, RawTable, TaskKind};
use ttgp::demo::{load_tensor, rank_study, synthetic_tensor};
use ttgp::model::{Parameterization, TtGpModel};
use ttgp::train::{clamped_fraction, evaluate as evaluate_model, history_csv, r_squared, train as train_model, TrainConfig};
use ttgp::{Error, Result};

use crate::{DataArgs, DemoArgs, EvaluateArgs, Format, PredictArgs, Task, TrainArgs};

/// Rows per prediction call; bounds memory on large inputs.
const PREDICT_CHUNK: usize = 4096;

pub fn train(a: &TrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(Error::Config(format!(
            "--test-fraction {} must lie in [0, 1)",
            a.test_fraction
        )));
    }
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        m0: a.m0,
        tt_rank: a.tt_rank,
        embed_dim: a.embed_dim,
        lengthscale: a.lengthscale,
        noise: a.noise,
        tied_lengthscales: a.tied_lengthscales,
        per_class_kernels: a.per_class_kernels,
        parameterization: if a.direct {
            Parameterization::Direct
        } else {
            Parameterization::Whitened
        },
        eval_every: a.eval_every,
        hyper_lr_drop_after: a.hyper_lr_drop_after,
        workers: a.workers,
        ..TrainConfig::default()
    };
    config.validate()?;
    if a.per_class_kernels && a.task == Task::Regression {
        return Err(Error::Config("--per-class-kernels needs --task classification".into()));
    }

    let task = task_kind(a.task);
    let raw = load_labelled(&a.input)?;
    let (train_set, test_set) = prepare(raw, task, a.test_fraction, a.seed)?;
    log::info!(
        "{} training rows, {} held-out rows, {} features",
        train_set.len(),
        test_set.as_ref().map_or(0, |t| t.len()),
        train_set.num_features
    );
    let outcome = train_model(&train_set, test_set.as_ref(), &config)?;
    let eval_set = test_set.as_ref().unwrap_or(&train_set);
    let metric = match outcome.best_metric {
        Some(m) => m,
        None => evaluate_model(&outcome.model, eval_set)?,
    };
    let clamped = clamped_fraction(&outcome.model, eval_set)?;
    if clamped > 0.0 {
        log::warn!("{:.2}% of evaluation points fall outside the grid interior", 100.0 * clamped);
    }

    if let Some(path) = &a.metrics_out {
        write_file(path, &history_csv(&outcome.history))?;
    }
    if let Some(path) = &a.checkpoint {
        save_checkpoint(&outcome.model, Some(&outcome.state), path)?;
        let manifest = json!({
            "command": "train",
            "version": env!("CARGO_PKG_VERSION"),
            "data": a.input.data,
            "format": format_name(a.input.format),
            "label_col": a.input.label_col,
            "task": task,
            "test_fraction": a.test_fraction,
            "train_rows": train_set.len(),
            "test_rows": test_set.as_ref().map_or(0, |t| t.len()),
            "num_features": train_set.num_features,
            "config": config,
            "checkpoint": path,
            "metrics_out": a.metrics_out,
            "metric_name": metric_name(task),
            "metric": metric,
        });
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidInput(format!("cannot encode manifest: {e}")))?;
        write_file(&manifest_path(path), &(text + "\n"))?;
    }
    println!(
        "{}={metric} epochs={} train_rows={} heldout_rows={}",
        metric_name(task),
        a.epochs,
        train_set.len(),
        test_set.as_ref().map_or(0, |t| t.len())
    );
    println!("metric={metric}");
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let dim = model.input_dim();
    let rows = load_features(&a.input, dim)?;
    let mut out = String::new();
    match model.task() {
        TaskKind::Regression => {
            out.push_str("mean,variance\n");
            for chunk in rows.chunks(PREDICT_CHUNK) {
                let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
                let (means, vars) = model.predict_regression(&refs)?;
                for (m, v) in means.iter().zip(&vars) {
                    let _ = writeln!(out, "{m},{v}");
                }
            }
        }
        TaskKind::Classification => {
            out.push_str("label");
            for v in &model.label_values {
                let _ = write!(out, ",score_{v}");
            }
            out.push('\n');
            for chunk in rows.chunks(PREDICT_CHUNK) {
                let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
                let (labels, scores) = model.predict_classification(&refs)?;
                for (l, s) in labels.iter().zip(&scores) {
                    let _ = write!(out, "{}", label_value(&model, *l));
                    for p in s {
                        let _ = write!(out, ",{p}");
                    }
                    out.push('\n');
                }
            }
        }
    }
    match &a.output {
        Some(path) => write_file(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let raw = load_labelled(&a.input)?;
    if raw.is_empty() {
        return Err(Error::Data {
            path: Some(a.input.data.clone()),
            line: None,
            message: "no rows to evaluate".into(),
        });
    }
    check_width(raw.num_features, model.input_dim(), &a.input.data)?;
    let rows: Vec<&[f64]> = (0..raw.len()).map(|i| raw.row(i)).collect();
    let metric = match model.task() {
        TaskKind::Regression => {
            let (means, _) = model.predict_regression(&rows)?;
            r_squared(&raw.targets, &means)
        }
        TaskKind::Classification => {
            let (labels, _) = model.predict_classification(&rows)?;
            let hits = labels
                .iter()
                .zip(&raw.targets)
                .filter(|(&l, &t)| label_value(&model, l) == t)
                .count();
            hits as f64 / raw.len() as f64
        }
    };
    println!("{}={metric} rows={}", metric_name(model.task()), raw.len());
    println!("metric={metric}");
    Ok(())
}

pub fn ttsvd_demo(a: &DemoArgs) -> Result<()> {
    let tensor = match &a.tensor {
        Some(path) => load_tensor(path)?,
        None => synthetic_tensor(a.dims, a.m0, a.noise, a.seed)?,
    };
    let rows = rank_study(&tensor, a.max_rank)?;
    let mut out = String::from("r,mse,cosine\n");
    for r in &rows {
        let _ = writeln!(out, "{},{:e},{}", r.rank, r.mse, r.cosine);
    }
    match &a.output {
        Some(path) => write_file(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn task_kind(t: Task) -> TaskKind {
    match t {
        Task::Regression => TaskKind::Regression,
        Task::Classification => TaskKind::Classification,
    }
}

fn metric_name(t: TaskKind) -> &'static str {
    match t {
        TaskKind::Regression => "r2",
        TaskKind::Classification => "accuracy",
    }
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Libsvm => "libsvm",
    }
}

fn label_value(model: &TtGpModel, class: usize) -> f64 {
    model.label_values.get(class).copied().unwrap_or(class as f64)
}

/// `model.ckpt` → `model.manifest.json`
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest.json")
}

fn load_labelled(input: &DataArgs) -> Result<RawTable> {
    match input.format {
        Format::Csv => {
            let header = csv_has_header(&input.data)?;
            load_csv(&input.data, input.label_col, header, true)
        }
        Format::Libsvm => {
            reject_label_col(input)?;
            load_libsvm(&input.data, None)
        }
    }
}

/// Feature rows for prediction. A CSV may carry one extra column (the label,
/// `--label-col` or last), which is dropped.
fn load_features(input: &DataArgs, dim: usize) -> Result<Vec<Vec<f64>>> {
    let raw = match input.format {
        Format::Libsvm => {
            reject_label_col(input)?;
            load_libsvm(&input.data, Some(dim))?
        }
        Format::Csv => {
            let header = csv_has_header(&input.data)?;
            let table = load_csv(&input.data, None, header, false)?;
            if table.is_empty() {
                return Ok(Vec::new());
            }
            let width = table.num_features;
            if width == dim && input.label_col.is_none() {
                table
            } else if width == dim + 1 {
                let label = input.label_col.unwrap_or(dim);
                if label > dim {
                    return Err(Error::Config(format!("--label-col {label} is out of range for {width} columns")));
                }
                let features = (0..table.len())
                    .flat_map(|i| {
                        let row = table.row(i);
                        row.iter().enumerate().filter(move |(j, _)| *j != label).map(|(_, &v)| v)
                    })
                    .collect();
                RawTable {
                    num_features: dim,
                    features,
                    targets: vec![0.0; table.len()],
                }
            } else {
                return Err(Error::Data {
                    path: Some(input.data.clone()),
                    line: None,
                    message: format!(
                        "model expects D = {dim} features (or {} columns with a label), file has {width}",
                        dim + 1
                    ),
                });
            }
        }
    };
    check_width(raw.num_features, dim, &input.data)?;
    Ok((0..raw.len()).map(|i| raw.row(i).to_vec()).collect())
}

fn check_width(found: usize, dim: usize, path: &Path) -> Result<()> {
    if found != dim {
        return Err(Error::Data {
            path: Some(path.to_path_buf()),
            line: None,
            message: format!("model expects D = {dim} features, file has {found}"),
        });
    }
    Ok(())
}

fn reject_label_col(input: &DataArgs) -> Result<()> {
    match input.label_col {
        Some(_) => Err(Error::Config("--label-col applies to CSV input only".into())),
        None => Ok(()),
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
