//! Overlay plots and a summary table over several run directories.
//!
//! Plots (SVG, one per metric, every run overlaid):
//! `train_<kl|rec|total|lambda|p_tf>.svg` against step, `diversity.svg`
//! against step, and for anticipation runs `accuracy_per_frame.svg` and
//! `accuracy_pooled.svg` against the number of observed frames.
//!
//! `summary.tsv` has exactly the columns in [`SUMMARY_COLUMNS`], `-` where a
//! run has no value.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use serde_json::{Map, Value};

use crate::config::{RunConfig, Task};
use crate::record::{read_metrics, series, RunDir, METRICS_FILE};
use crate::train::TAIL_FRACTION;

pub const SUMMARY_COLUMNS: [&str; 16] = [
    "run",
    "task",
    "scheme",
    "loss",
    "config_hash",
    "steps",
    "final_kl",
    "final_rec",
    "diversity",
    "quality",
    "context",
    "is_mean",
    "is_std",
    "best_of_k_error",
    "early_accuracy",
    "final_accuracy",
];

const TRAIN_METRICS: [&str; 5] = ["kl", "rec", "total", "lambda", "p_tf"];

struct Run {
    name: String,
    cfg: RunConfig,
    rows: Vec<Map<String, Value>>,
}

impl Run {
    fn last_eval(&self) -> Option<&Map<String, Value>> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.get("kind").and_then(Value::as_str) == Some("eval"))
    }
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub plots: Vec<PathBuf>,
    pub table: PathBuf,
    pub table_text: String,
}

fn load_run(dir: &Path) -> Result<Run> {
    let (_, cfg) = RunDir::open(dir)?;
    let rows = read_metrics(&dir.join(METRICS_FILE))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Run { name, cfg, rows })
}

fn tail_mean(points: &[(f64, f64)]) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let n = ((TAIL_FRACTION * points.len() as f64).ceil() as usize).clamp(1, points.len());
    Some(points[points.len() - n..].iter().map(|p| p.1).sum::<f64>() / n as f64)
}

fn summary_row(run: &Run) -> Vec<String> {
    let eval = run.last_eval();
    let num = |k: &str| -> String {
        eval.and_then(|e| e.get(k))
            .and_then(Value::as_f64)
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into())
    };
    let tail = |k: &str| {
        tail_mean(&series(&run.rows, "train", k))
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into())
    };
    let motion = run.cfg.task == Task::Motion;
    let steps = run
        .rows
        .iter()
        .filter(|r| r.get("kind").and_then(Value::as_str) == Some("train"))
        .count();
    vec![
        run.name.clone(),
        format!("{:?}", run.cfg.task).to_lowercase(),
        if motion { run.cfg.scheme.clone() } else { "-".into() },
        if motion { "-".into() } else { format!("{:?}", run.cfg.loss).to_lowercase() },
        run.cfg.hash()[..12].to_string(),
        steps.to_string(),
        if motion { tail("kl") } else { "-".into() },
        if motion { tail("rec") } else { "-".into() },
        num("diversity"),
        num("quality"),
        num("context"),
        num("is_mean"),
        num("is_std"),
        num("best_of_k_error"),
        num("early_accuracy"),
        num("final_accuracy"),
    ]
}

fn overlay(path: &Path, title: &str, x_label: &str, lines: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = lines.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow::anyhow!("plotting {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(title)
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (name, p)) in lines.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

fn array_curve(row: &Map<String, Value>, key: &str) -> Option<Vec<(f64, f64)>> {
    let a = row.get(key)?.as_array()?;
    a.iter()
        .enumerate()
        .map(|(i, v)| Some(((i + 1) as f64, v.as_f64()?)))
        .collect()
}

/// Reads every run, writes plots and `summary.tsv` into `out`.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if run_dirs.is_empty() {
        bail!("usage: report needs at least one run directory");
    }
    let runs = run_dirs
        .iter()
        .map(|d| load_run(d).with_context(|| format!("loading run {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut plots = Vec::new();
    let mut emit = |file: String, title: &str, x: &str, lines: Vec<(String, Vec<(f64, f64)>)>| -> Result<()> {
        let lines: Vec<_> = lines.into_iter().filter(|(_, p)| !p.is_empty()).collect();
        if lines.is_empty() {
            return Ok(());
        }
        let path = out.join(file);
        overlay(&path, title, x, &lines)?;
        plots.push(path);
        Ok(())
    };
    let motion: Vec<&Run> = runs.iter().filter(|r| r.cfg.task == Task::Motion).collect();
    for m in TRAIN_METRICS {
        let lines = motion
            .iter()
            .map(|r| (r.name.clone(), series(&r.rows, "train", m)))
            .collect();
        emit(format!("train_{m}.svg"), m, "step", lines)?;
    }
    let lines = motion
        .iter()
        .map(|r| (r.name.clone(), series(&r.rows, "curve", "diversity")))
        .collect();
    emit("diversity.svg".into(), "diversity", "step", lines)?;
    for (key, file) in [
        ("accuracy_per_frame", "accuracy_per_frame.svg"),
        ("accuracy_pooled", "accuracy_pooled.svg"),
    ] {
        let lines = runs
            .iter()
            .filter_map(|r| Some((r.name.clone(), array_curve(r.last_eval()?, key)?)))
            .collect();
        emit(file.into(), key, "observed frames", lines)?;
    }

    let mut text = SUMMARY_COLUMNS.join("\t") + "\n";
    for r in &runs {
        text.push_str(&summary_row(r).join("\t"));
        text.push('\n');
    }
    let table = out.join("summary.tsv");
    fs::write(&table, &text)?;
    Ok(ReportOutput {
        plots,
        table,
        table_text: text,
    })
}
