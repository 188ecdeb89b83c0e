//! Training loops for both tasks.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use stochseq::cvae::{ConditioningScheme, MotionBatch, MotionModel, StepOptions};
use stochseq::kinematics::Skeleton;
use stochseq::losses::AnnealSchedule;
use stochseq::metrics::{diversity, SampleSet};
use stochseq::nn::Adam;
use stochseq::perturb::{curriculum_step, CurriculumState};
use stochseq::recnet::{teacher_forcing_prob, TeacherForcingSchedule};
use stochseq::seqdata::{
    generate_anticipation_dataset, generate_synthetic_dataset, read_dataset, synthetic_skeleton,
    DatasetMeta, DatasetSplit, LabeledSequence, MotionSample,
};

use crate::anticipate::{AccuracyCurves, AnticipationModel};
use crate::config::{RunConfig, Task};
use crate::record::RunDir;

/// Share of the first frames over which early accuracy is averaged.
pub const EARLY_FRACTION: f64 = 0.2;
/// Share of the last steps averaged for the converged training losses.
pub const TAIL_FRACTION: f64 = 0.05;

/// RNG streams of one run, so evaluation draws never shift training draws.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const CURVE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const SAMPLE: u64 = 5;
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub struct MotionData {
    pub meta: DatasetMeta,
    pub skeleton: Skeleton,
    pub split: DatasetSplit,
}

/// Reads the configured dataset directory, or synthesizes the dataset the
/// config describes when there is none.
pub fn load_motion_data(cfg: &RunConfig) -> Result<MotionData> {
    let spec = cfg.synthetic_spec();
    let Some(dir) = cfg.resolved_data_dir() else {
        return Ok(MotionData {
            meta: DatasetMeta::from_spec(&spec),
            skeleton: synthetic_skeleton(cfg.joints),
            split: generate_synthetic_dataset(&spec)?,
        });
    };
    let (meta, skeleton, split) =
        read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let want = (cfg.joints, cfg.obs_len, cfg.fut_len, cfg.num_modes);
    let got = (meta.joints, meta.obs_len, meta.fut_len, meta.num_modes);
    if want != got {
        bail!(
            "config/dataset mismatch: config has (joints, obs_len, fut_len, num_modes) = {want:?}, {} has {got:?}",
            dir.display()
        );
    }
    if split.train.len() < cfg.batch {
        bail!(
            "dataset {} has {} training samples, fewer than batch {}",
            dir.display(),
            split.train.len(),
            cfg.batch
        );
    }
    Ok(MotionData {
        meta,
        skeleton,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionSummary {
    pub steps: u64,
    /// Mean over the last [`TAIL_FRACTION`] of steps.
    pub final_kl: f64,
    pub final_rec: f64,
    pub lambda_first: f64,
    pub lambda_last: f64,
    /// `(step, diversity)` at every curve point.
    pub diversity_curve: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnticipationSummary {
    pub epoch_losses: Vec<f64>,
    pub curves: AccuracyCurves,
    pub early_per_frame: f64,
    pub early_pooled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum TrainSummary {
    Motion(MotionSummary),
    Anticipation(AnticipationSummary),
}

/// Validates `cfg`, creates its run directory and trains.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = RunDir::create(Path::new(&cfg.out), cfg)?;
    match cfg.task {
        Task::Motion => {
            let data = load_motion_data(cfg)?;
            train_motion(cfg, &data, &run).map(TrainSummary::Motion)
        }
        Task::Anticipation => train_anticipation(cfg, &run).map(TrainSummary::Anticipation),
    }
}

fn initial_curriculum(cfg: &RunConfig, scheme: ConditioningScheme) -> CurriculumState {
    match scheme {
        ConditioningScheme::MixAndMatch { alpha } => CurriculumState::new(
            cfg.hidden,
            alpha,
            (2.0 * cfg.curriculum_fraction * cfg.steps as f64).round() as u64,
        ),
        _ => CurriculumState::fully_random(1, 0.0),
    }
}

/// Mean diversity of `k` draws on each condition.
pub fn mean_diversity(
    model: &MotionModel,
    conditions: &[&MotionSample],
    k: usize,
    curriculum: Option<&CurriculumState>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let obs: Vec<_> = conditions.iter().map(|s| &s.observed).collect();
    let draws = match curriculum {
        Some(c) => model.sample_with_curriculum(&obs, k, c, rng)?,
        None => model.sample(&obs, k, rng)?,
    };
    let mut total = 0.0;
    for (i, samples) in draws.into_iter().enumerate() {
        total += diversity(&SampleSet::new(i, samples, None, None)?)?;
    }
    Ok(total / conditions.len() as f64)
}

#[derive(Serialize)]
struct StepRow {
    total: f64,
    rec: f64,
    kl: f64,
    lambda: f64,
    p_tf: f64,
    c: Option<usize>,
    grad_norm: f64,
    parts: Vec<(String, f64)>,
}

pub fn train_motion(cfg: &RunConfig, data: &MotionData, run: &RunDir) -> Result<MotionSummary> {
    let mcfg = cfg.motion_config()?;
    let scheme = mcfg.scheme;
    let mut model = MotionModel::new(mcfg, data.skeleton.clone(), &mut rng(cfg.seed, stream::INIT))?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut train_rng = rng(cfg.seed, stream::TRAIN);
    let mut curve_rng = rng(cfg.seed, stream::CURVE);
    let anneal = AnnealSchedule::for_run(cfg.steps, cfg.anneal_fraction);
    let tf = TeacherForcingSchedule::over_epochs(cfg.tf_fraction * cfg.steps as f64);
    let mut curriculum = initial_curriculum(cfg, scheme);
    let is_mnm = matches!(scheme, ConditioningScheme::MixAndMatch { .. });
    let curve_conditions: Vec<&MotionSample> = data
        .split
        .test
        .iter()
        .chain(&data.split.val)
        .take(cfg.eval_conditions)
        .collect();
    if curve_conditions.is_empty() {
        bail!("dataset has no test or validation samples for the diversity curve");
    }

    let train = &data.split.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut pos = order.len();
    let tail_from = cfg.steps - ((TAIL_FRACTION * cfg.steps as f64).ceil() as u64).clamp(1, cfg.steps);
    let (mut kl_tail, mut rec_tail) = (0.0, 0.0);
    let mut lambda_first = f64::NAN;
    let mut lambda_last = f64::NAN;
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        if pos + cfg.batch > order.len() {
            order.shuffle(&mut train_rng);
            pos = 0;
        }
        let picked = &order[pos..pos + cfg.batch];
        pos += cfg.batch;
        let obs: Vec<_> = picked.iter().map(|&i| &train[i].observed).collect();
        let fut: Vec<_> = picked.iter().map(|&i| &train[i].future).collect();
        let batch = MotionBatch::new(&obs, &fut)?;
        curriculum = curriculum_step(curriculum, step);
        let opts = StepOptions {
            p_tf: teacher_forcing_prob(step as f64, &tf),
            lambda: anneal.weight(step),
            curriculum,
            clip_norm: cfg.clip_norm,
        };
        let rep = model.train_step(&mut adam, &batch, &opts, &mut train_rng)?;
        let l = &rep.loss;
        run.log(
            "train",
            step,
            &StepRow {
                total: l.total,
                rec: l.reconstruction,
                kl: l.kl,
                lambda: l.lambda,
                p_tf: opts.p_tf,
                c: is_mnm.then_some(curriculum.c),
                grad_norm: rep.grad_norm,
                parts: l.parts.clone(),
            },
        )?;
        if step == 0 {
            lambda_first = l.lambda;
        }
        lambda_last = l.lambda;
        if step >= tail_from {
            kl_tail += l.kl;
            rec_tail += l.reconstruction;
        }
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let cur = is_mnm.then_some(&curriculum);
            let d = mean_diversity(&model, &curve_conditions, cfg.k, cur, &mut curve_rng)?;
            run.log("curve", done, &json!({ "diversity": d, "k": cfg.k }))?;
            curve.push((done, d));
        }
        if done % cfg.checkpoint_every == 0 && done != cfg.steps {
            save_motion(&model, cfg, run, done, Some(done))?;
        }
    }
    save_motion(&model, cfg, run, cfg.steps, None)?;
    let n_tail = (cfg.steps - tail_from) as f64;
    Ok(MotionSummary {
        steps: cfg.steps,
        final_kl: kl_tail / n_tail,
        final_rec: rec_tail / n_tail,
        lambda_first,
        lambda_last,
        diversity_curve: curve,
    })
}

fn save_motion(
    model: &MotionModel,
    cfg: &RunConfig,
    run: &RunDir,
    step: u64,
    name: Option<u64>,
) -> Result<()> {
    let path = run.checkpoint_path(name);
    model.save(&path, checkpoint_extra(cfg, step))?;
    run.log("checkpoint", step, &json!({ "path": relative(&path, &run.root) }))
}

/// Metadata stored beside the weights: the step and the full config.
pub fn checkpoint_extra(cfg: &RunConfig, step: u64) -> serde_json::Value {
    json!({ "step": step, "config": cfg.to_text(), "config_hash": cfg.hash() })
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .display()
        .to_string()
}

/// Train and test sequences of the anticipation task.
pub fn anticipation_data(cfg: &RunConfig) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    let mut all = generate_anticipation_dataset(&cfg.anticipation_spec())?;
    let test = all.split_off(cfg.sequences - cfg.anticipation_split());
    Ok((all, test))
}

pub fn train_anticipation(cfg: &RunConfig, run: &RunDir) -> Result<AnticipationSummary> {
    let (train, test) = anticipation_data(cfg)?;
    let trainer = cfg.anticipation_trainer();
    let mut model = AnticipationModel::new(
        cfg.feature_dim,
        cfg.classes,
        &trainer,
        &mut rng(cfg.seed, stream::INIT),
    );
    let mut train_rng = rng(cfg.seed, stream::TRAIN);
    let objective = cfg.loss.objective();
    // one epoch at a time so each is logged as it finishes
    let one = crate::anticipate::AnticipationTrainer {
        epochs: 1,
        ..trainer.clone()
    };
    let mut losses = Vec::with_capacity(trainer.epochs);
    let mut adam = Adam::new(&model.params, trainer.lr);
    for epoch in 0..trainer.epochs as u64 {
        let l = model.fit_with(&train, objective, &one, &mut adam, &mut train_rng)?[0];
        run.log("train", epoch + 1, &json!({ "loss": l }))?;
        losses.push(l);
        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 && done != trainer.epochs as u64 {
            save_anticipation(&model, cfg, run, done, Some(done))?;
        }
    }
    let epochs = trainer.epochs as u64;
    save_anticipation(&model, cfg, run, epochs, None)?;
    let summary = anticipation_summary(&model, &test, losses)?;
    run.log("eval", epochs, &anticipation_eval_row(&summary))?;
    Ok(summary)
}

pub fn anticipation_summary(
    model: &AnticipationModel,
    test: &[LabeledSequence],
    epoch_losses: Vec<f64>,
) -> Result<AnticipationSummary> {
    let curves = model.accuracy_curves(test)?;
    Ok(AnticipationSummary {
        early_per_frame: AccuracyCurves::early(&curves.per_frame, EARLY_FRACTION),
        early_pooled: AccuracyCurves::early(&curves.pooled, EARLY_FRACTION),
        curves,
        epoch_losses,
    })
}

pub fn anticipation_eval_row(s: &AnticipationSummary) -> serde_json::Value {
    json!({
        "accuracy_per_frame": s.curves.per_frame,
        "accuracy_pooled": s.curves.pooled,
        "early_accuracy": s.early_per_frame,
        "early_accuracy_pooled": s.early_pooled,
        "final_accuracy": s.curves.per_frame.last(),
    })
}

fn save_anticipation(
    model: &AnticipationModel,
    cfg: &RunConfig,
    run: &RunDir,
    step: u64,
    name: Option<u64>,
) -> Result<()> {
    let path = run.checkpoint_path(name);
    model.to_checkpoint(checkpoint_extra(cfg, step)).save(&path)?;
    run.log("checkpoint", step, &json!({ "path": relative(&path, &run.root) }))
}
