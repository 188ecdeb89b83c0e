//! `synth`, `sample` and `eval`; `train` lives in [`crate::train`] and
//! `report` in [`crate::report`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use stochseq::cvae::{Checkpoint, MotionModel};
use stochseq::seqdata::{
    generate_synthetic_dataset, synthetic_skeleton, write_dataset, write_pose_sequences,
    DatasetMeta,
};

use crate::anticipate::AnticipationModel;
use crate::config::{RunConfig, Task};
use crate::evaluate::{evaluate_motion, Evaluation};
use crate::record::{RunDir, CHECKPOINT_DIR};
use crate::train::{
    anticipation_data, anticipation_eval_row, anticipation_summary, load_motion_data, rng,
    stream,
};

fn ensure_fresh(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("{} exists and is not empty", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Writes the configured synthetic motion dataset to `out`; returns its hash.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<String> {
    if cfg.task != Task::Motion {
        bail!("synth writes motion datasets; the anticipation task is generated in memory");
    }
    cfg.validate()?;
    ensure_fresh(out)?;
    let spec = cfg.synthetic_spec();
    let split = generate_synthetic_dataset(&spec)?;
    write_dataset(
        out,
        &DatasetMeta::from_spec(&spec),
        &synthetic_skeleton(cfg.joints),
        &split,
    )?;
    dataset_hash(out)
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and contents, in path order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f)?);
        h.update([0]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Config stored in a checkpoint by `train`.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let text = ck
        .meta
        .extra
        .get("config")
        .and_then(Value::as_str)
        .context("checkpoint carries no run config")?;
    Ok(RunConfig::parse(text, Path::new("<checkpoint>"))?)
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub k: usize,
    /// Emit the single deterministic mode prediction instead of samples.
    pub mode: bool,
    pub seed: u64,
    /// Dataset to condition on; defaults to the checkpoint's own.
    pub data_dir: Option<PathBuf>,
    /// Use at most this many test conditions.
    pub conditions: Option<usize>,
}

/// Writes `cond_NNNN/observed.txt` plus `sample_NNN.txt` (or `mode.txt`)
/// per test condition. Returns the number of sequence files produced.
pub fn cmd_sample(req: &SampleRequest) -> Result<usize> {
    let ck = Checkpoint::load(&req.checkpoint)?;
    let mut cfg = checkpoint_config(&ck)?;
    if let Some(d) = &req.data_dir {
        cfg.data_dir = d.display().to_string();
    }
    if !req.mode && req.k == 0 {
        bail!("--k must be at least 1");
    }
    let model = MotionModel::from_checkpoint(&ck)?;
    let data = load_motion_data(&cfg)?;
    let limit = req.conditions.unwrap_or(usize::MAX);
    let conds: Vec<_> = data.split.test.iter().take(limit).collect();
    if conds.is_empty() {
        bail!("the dataset has no test conditions");
    }
    ensure_fresh(&req.out)?;
    let mut r = rng(req.seed, stream::SAMPLE);
    let mut written = 0;
    for (i, c) in conds.iter().enumerate() {
        let dir = req.out.join(format!("cond_{i:04}"));
        fs::create_dir_all(&dir)?;
        write_pose_sequences(&dir.join("observed.txt"), std::slice::from_ref(&c.observed))?;
        if req.mode {
            write_pose_sequences(&dir.join("mode.txt"), &[model.mode_decode(&c.observed)?])?;
            written += 1;
            continue;
        }
        let draws = model.sample(&[&c.observed], req.k, &mut r)?.remove(0);
        for (j, s) in draws.iter().enumerate() {
            write_pose_sequences(&dir.join(format!("sample_{j:03}.txt")), std::slice::from_ref(s))?;
            written += 1;
        }
    }
    let manifest = json!({
        "checkpoint": req.checkpoint.display().to_string(),
        "k": if req.mode { 1 } else { req.k },
        "mode": req.mode,
        "seed": req.seed,
        "conditions": conds.len(),
    });
    fs::write(req.out.join("samples.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(written)
}

/// Evaluates a run's checkpoint (its final one by default) and appends an
/// `eval` row to the run's metrics log. Returns the appended fields.
pub fn cmd_eval(run_dir: &Path, checkpoint: Option<&Path>, k: Option<usize>) -> Result<Value> {
    let (run, mut cfg) = RunDir::open(run_dir)?;
    if let Some(k) = k {
        cfg.k = k;
    }
    if cfg.k < 2 {
        bail!("--k must be at least 2 (diversity compares pairs of samples)");
    }
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.checkpoint_path(None));
    let ck = Checkpoint::load(&ck_path)?;
    let step = ck.meta.extra.get("step").and_then(Value::as_u64).unwrap_or(0);
    let rel = ck_path
        .strip_prefix(&run.root)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| ck_path.clone());
    let mut row = match cfg.task {
        Task::Motion => {
            let model = MotionModel::from_checkpoint(&ck)?;
            let data = load_motion_data(&cfg)?;
            let mut r = rng(cfg.eval_seed, stream::EVAL);
            let ev: Evaluation = evaluate_motion(
                &model,
                &data.split,
                data.meta.num_modes,
                cfg.k,
                &cfg.classifier_arch(),
                &mut r,
            )?;
            serde_json::to_value(ev)?
        }
        Task::Anticipation => {
            let model = AnticipationModel::from_checkpoint(&ck)?;
            let (_, test) = anticipation_data(&cfg)?;
            anticipation_eval_row(&anticipation_summary(&model, &test, Vec::new())?)
        }
    };
    row["checkpoint"] = json!(rel.display().to_string());
    run.log("eval", step, &row)?;
    Ok(row)
}

/// Final checkpoint of a run directory.
pub fn final_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join("final.ckpt")
}
