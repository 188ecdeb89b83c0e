//! Run directories and their append-only metric log.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.txt          canonical config (see `RunConfig::to_text`)
//! run.json            config hash, code version, task
//! metrics.jsonl       one JSON object per step, curve point, checkpoint or eval
//! checkpoints/        step_NNNNNNN.ckpt files and final.ckpt
//! ```
//!
//! Every metrics row has `kind`, `step` and `wall_s` (seconds since the
//! command started). Rows are only ever appended.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Wall-clock field of every metrics row.
pub const WALL_FIELD: &str = "wall_s";

pub fn code_version() -> String {
    format!("stochseq {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub version: String,
    pub task: String,
}

/// Handle on a run directory, with its log clock.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    started: Instant,
}

impl RunDir {
    /// Creates a fresh run directory. Refuses one that already holds a run.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        if root.join(METRICS_FILE).exists() || root.join(CONFIG_FILE).exists() {
            bail!(
                "{} already holds a run; pick a new --out",
                root.display()
            );
        }
        fs::create_dir_all(root.join(CHECKPOINT_DIR))
            .with_context(|| format!("creating {}", root.display()))?;
        let header = format!("# {}\n# hash {}\n", code_version(), cfg.hash());
        fs::write(root.join(CONFIG_FILE), header + &cfg.to_text())?;
        let info = RunInfo {
            config_hash: cfg.hash(),
            version: code_version(),
            task: serde_json::to_value(cfg.task)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
        };
        fs::write(root.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
        Ok(Self {
            root: root.to_path_buf(),
            started: Instant::now(),
        })
    }

    /// Opens an existing run for appending.
    pub fn open(root: &Path) -> Result<(Self, RunConfig)> {
        let cfg = RunConfig::load(&root.join(CONFIG_FILE))
            .with_context(|| format!("{} is not a run directory", root.display()))?;
        Ok((
            Self {
                root: root.to_path_buf(),
                started: Instant::now(),
            },
            cfg,
        ))
    }

    pub fn checkpoint_path(&self, step: Option<u64>) -> PathBuf {
        let name = match step {
            Some(s) => format!("step_{s:07}.ckpt"),
            None => "final.ckpt".into(),
        };
        self.root.join(CHECKPOINT_DIR).join(name)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    /// Appends `{kind, step, wall_s, ..fields}`.
    pub fn log(&self, kind: &str, step: u64, fields: &impl Serialize) -> Result<()> {
        let mut row = Map::new();
        row.insert("kind".into(), kind.into());
        row.insert("step".into(), step.into());
        row.insert(WALL_FIELD.into(), self.started.elapsed().as_secs_f64().into());
        match serde_json::to_value(fields)? {
            Value::Object(m) => row.extend(m),
            Value::Null => {}
            other => bail!("metric fields must be an object, got {other}"),
        }
        stochseq::metrics::MetricReport::append_jsonl(&self.metrics_path(), &Value::Object(row))?;
        Ok(())
    }
}

/// All rows of a metrics log, in order.
pub fn read_metrics(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?
        {
            Value::Object(m) => rows.push(m),
            _ => bail!("{}:{}: not an object", path.display(), i + 1),
        }
    }
    Ok(rows)
}

/// The log without its wall-clock fields, one line per row: the part of a
/// run that is a pure function of the config.
pub fn deterministic_view(path: &Path) -> Result<String> {
    let mut out = String::new();
    for mut row in read_metrics(path)? {
        row.remove(WALL_FIELD);
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    Ok(out)
}

/// Numeric field `key` of the rows of `kind`, as `(step, value)`.
pub fn series(rows: &[Map<String, Value>], kind: &str, key: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.get("kind").and_then(Value::as_str) == Some(kind))
        .filter_map(|r| {
            Some((
                r.get("step")?.as_f64()?,
                r.get(key)?.as_f64()?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_rows_carry_step_and_clock() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let run = RunDir::create(&root, &RunConfig::default()).unwrap();
        run.log("train", 0, &serde_json::json!({"kl": 0.5})).unwrap();
        run.log("train", 1, &serde_json::json!({"kl": 0.25})).unwrap();
        let rows = read_metrics(&run.metrics_path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.contains_key("step") && r.contains_key(WALL_FIELD)));
        assert_eq!(series(&rows, "train", "kl"), vec![(0.0, 0.5), (1.0, 0.25)]);
        assert!(!deterministic_view(&run.metrics_path()).unwrap().contains(WALL_FIELD));
        assert!(RunDir::create(&root, &RunConfig::default()).is_err());
        let (_, cfg) = RunDir::open(&root).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }
}
