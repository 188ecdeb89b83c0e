//! Per-frame action anticipation on feature sequences: training a recurrent
//! classifier under one of the anticipation objectives and measuring accuracy
//! as a function of the number of observed frames.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use stochseq::cvae::{Checkpoint, CheckpointMeta};
use stochseq::graph::{Graph, ParamSet, Var};
use stochseq::losses::{anticipation_objective_var, AnticipationObjective};
use stochseq::nn::{clip_global_norm, Adam, CellKind};
use stochseq::recnet::{temporal_average_pool, FrameClassifier};
use stochseq::seqdata::LabeledSequence;
use stochseq::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AnticipationTrainer {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub cell: CellKind,
}

impl Default for AnticipationTrainer {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 30,
            batch: 32,
            lr: 3e-3,
            clip_norm: 5.0,
            cell: CellKind::Gru,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnticipationModel {
    pub params: ParamSet,
    pub net: FrameClassifier,
    pub arch: ClassifierShape,
}

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub cell: CellKind,
}

const CHECKPOINT_MODEL: &str = "anticipation_classifier";

/// Accuracy after observing `t + 1` frames, per-frame and with the
/// predictions averaged over the frames seen so far.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyCurves {
    pub per_frame: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl AccuracyCurves {
    /// Mean of `curve` over the first `ceil(fraction·T)` frames.
    pub fn early(curve: &[f64], fraction: f64) -> f64 {
        let n = ((fraction * curve.len() as f64).ceil() as usize).clamp(1, curve.len().max(1));
        curve[..n].iter().sum::<f64>() / n as f64
    }
}

fn frame_inputs(g: &mut Graph, seqs: &[&LabeledSequence]) -> Vec<Var> {
    let (frames, dim) = seqs[0].features.dim();
    (0..frames)
        .map(|t| {
            let x = ndarray::Array2::from_shape_fn((seqs.len(), dim), |(b, d)| {
                seqs[b].features[[t, d]]
            });
            g.input(x)
        })
        .collect()
}

fn check_shapes(data: &[LabeledSequence], classes: usize) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty anticipation dataset".into()))?;
    if data.iter().any(|s| s.features.dim() != first.features.dim()) {
        return Err(Error::ShapeMismatch(
            "anticipation sequences need one shape".into(),
        ));
    }
    if let Some(s) = data.iter().find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes,
        });
    }
    Ok(())
}

impl AnticipationModel {
    pub fn new(input: usize, classes: usize, trainer: &AnticipationTrainer, rng: &mut impl Rng) -> Self {
        Self::with_shape(
            ClassifierShape {
                input,
                hidden: trainer.hidden,
                classes,
                cell: trainer.cell,
            },
            rng,
        )
    }

    pub fn with_shape(arch: ClassifierShape, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let net = FrameClassifier::new(
            &mut params,
            "anticipation",
            arch.cell,
            arch.input,
            arch.hidden,
            arch.classes,
            rng,
        );
        Self { params, net, arch }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: CHECKPOINT_MODEL.into(),
                config: serde_json::to_value(self.arch).expect("serializable shape"),
                skeleton: String::new(),
                extra,
                tensors: Vec::new(),
            },
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.model != CHECKPOINT_MODEL {
            return Err(Error::Checkpoint(format!(
                "not an anticipation classifier: {}",
                ck.meta.model
            )));
        }
        let arch: ClassifierShape = serde_json::from_value(ck.meta.config.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut m = Self::with_shape(arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        m.params.assign_from(&ck.params).map_err(Error::Checkpoint)?;
        Ok(m)
    }

    /// Trains in place; returns the mean objective of each epoch.
    pub fn fit(
        &mut self,
        train: &[LabeledSequence],
        objective: AnticipationObjective,
        trainer: &AnticipationTrainer,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let mut adam = Adam::new(&self.params, trainer.lr);
        self.fit_with(train, objective, trainer, &mut adam, rng)
    }

    /// [`AnticipationModel::fit`] continuing from an existing optimizer state.
    pub fn fit_with(
        &mut self,
        train: &[LabeledSequence],
        objective: AnticipationObjective,
        trainer: &AnticipationTrainer,
        adam: &mut Adam,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        check_shapes(train, self.net.classes)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(trainer.epochs);
        for _ in 0..trainer.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(trainer.batch.max(1)) {
                let seqs: Vec<&LabeledSequence> = chunk.iter().map(|&i| &train[i]).collect();
                let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
                let mut g = Graph::with_params(&self.params);
                let inputs = frame_inputs(&mut g, &seqs);
                let probs = self.net.forward(&mut g, &inputs);
                let loss = anticipation_objective_var(&mut g, &probs, &labels, objective)?;
                total += g.scalar(loss);
                batches += 1;
                let mut grads = g.backward(loss).params(&self.params);
                clip_global_norm(&mut grads, trainer.clip_norm);
                adam.update(&mut self.params, &grads);
            }
            history.push(total / batches.max(1) as f64);
        }
        Ok(history)
    }

    /// Per-frame class probabilities of every sequence, each `T×N`.
    pub fn predict(&self, data: &[LabeledSequence]) -> Result<Vec<ndarray::Array2<f64>>> {
        check_shapes(data, self.net.classes)?;
        let seqs: Vec<&LabeledSequence> = data.iter().collect();
        let mut g = Graph::with_params(&self.params);
        let inputs = frame_inputs(&mut g, &seqs);
        let probs: Vec<_> = self
            .net
            .forward(&mut g, &inputs)
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect();
        Ok((0..seqs.len())
            .map(|b| {
                ndarray::Array2::from_shape_fn((probs.len(), self.net.classes), |(t, k)| {
                    probs[t][[b, k]]
                })
            })
            .collect())
    }

    pub fn accuracy_curves(&self, test: &[LabeledSequence]) -> Result<AccuracyCurves> {
        let preds = self.predict(test)?;
        let frames = preds[0].nrows();
        let mut per_frame = vec![0.0; frames];
        let mut pooled = vec![0.0; frames];
        for (p, s) in preds.iter().zip(test) {
            for t in 0..frames {
                if argmax(p.row(t).iter().copied()) == s.label {
                    per_frame[t] += 1.0;
                }
                let avg = temporal_average_pool(p, t + 1)?;
                if argmax(avg.into_iter()) == s.label {
                    pooled[t] += 1.0;
                }
            }
        }
        let n = test.len() as f64;
        per_frame.iter_mut().chain(pooled.iter_mut()).for_each(|v| *v /= n);
        Ok(AccuracyCurves { per_frame, pooled })
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
