//! Evaluation of stochastic predictions: diversity, quality, context,
//! conditional inception score and best-of-K error, plus the recurrent
//! sequence classifiers that quality and context rely on.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamSet, Tensor};
use crate::kinematics::{euler_angle_error, PoseSequence};
use crate::nn::{clip_global_norm, Adam, CellKind};
use crate::recnet::{frames_to_tensors, FrameClassifier};

/// `K` generated continuations of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub condition_id: usize,
    pub samples: Vec<PoseSequence>,
    pub ground_truth: Option<PoseSequence>,
    /// Mode or action label of the condition, when known.
    pub label: Option<usize>,
}

impl SampleSet {
    pub fn new(
        condition_id: usize,
        samples: Vec<PoseSequence>,
        ground_truth: Option<PoseSequence>,
        label: Option<usize>,
    ) -> Result<Self> {
        let shape = |s: &PoseSequence| (s.len(), s.joint_count);
        if let Some(first) = samples.first() {
            let want = shape(first);
            if samples
                .iter()
                .chain(ground_truth.as_ref())
                .any(|s| shape(s) != want)
            {
                return Err(Error::ShapeMismatch(
                    "samples of one set must share a shape".into(),
                ));
            }
        }
        Ok(Self {
            condition_id,
            samples,
            ground_truth,
            label,
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance over all unordered pairs of flattened samples.
pub fn diversity(ss: &SampleSet) -> Result<f64> {
    if ss.k() < 2 {
        return Err(Error::InvalidParameter(format!(
            "diversity needs K >= 2, got {}",
            ss.k()
        )));
    }
    let flat: Vec<Vec<f64>> = ss.samples.iter().map(PoseSequence::to_flat).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..flat.len() {
        for j in i + 1..flat.len() {
            total += l2(&flat[i], &flat[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Anything that maps sequences to class distributions.
pub trait SequenceScorer {
    fn classes(&self) -> usize;
    fn predict(&self, seqs: &[&PoseSequence]) -> Result<Vec<Vec<f64>>>;
}

/// Class index of real sequences for quality classifiers.
pub const REAL: usize = 0;
/// Class index of generated sequences for quality classifiers.
pub const FAKE: usize = 1;

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// `1 − accuracy` of a real-vs-generated classifier on the generated set.
pub fn quality(classifier: &impl SequenceScorer, generated: &[&PoseSequence]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::MissingInput("no generated sequences".into()));
    }
    let probs = classifier.predict(generated)?;
    let caught = probs.iter().filter(|p| argmax(p) == FAKE).count();
    Ok(1.0 - caught as f64 / generated.len() as f64)
}

/// Mean per-class accuracy of argmax predictions over every sample,
/// against the label of its condition.
pub fn context(classifier: &impl SequenceScorer, sets: &[SampleSet]) -> Result<f64> {
    let n = classifier.classes();
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    for s in sets {
        let label = s
            .label
            .ok_or_else(|| Error::MissingInput(format!("label of condition {}", s.condition_id)))?;
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        let refs: Vec<&PoseSequence> = s.samples.iter().collect();
        for p in classifier.predict(&refs)? {
            totals[label] += 1;
            if argmax(&p) == label {
                hits[label] += 1;
            }
        }
    }
    let per_class: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    if per_class.is_empty() {
        return Err(Error::MissingInput("no samples".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn kl_discrete(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// `exp(mean_i KL(p_i ‖ p̄))` over the given predictive distributions.
pub fn inception_score(probs: &[Vec<f64>]) -> f64 {
    if probs.is_empty() {
        return 1.0;
    }
    let n = probs[0].len();
    let mut mean = vec![0.0; n];
    for p in probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    let kl = probs.iter().map(|p| kl_discrete(p, &mean)).sum::<f64>() / probs.len() as f64;
    // the mutual information lies in [0, ln n]; rounding can step just outside
    kl.clamp(0.0, (n as f64).ln()).exp()
}

/// Per-condition inception score; returns mean and population std over conditions.
pub fn conditional_is(classifier: &impl SequenceScorer, sets: &[SampleSet]) -> Result<(f64, f64)> {
    if sets.is_empty() {
        return Err(Error::MissingInput("no sample sets".into()));
    }
    let scores = sets
        .iter()
        .map(|s| {
            let refs: Vec<&PoseSequence> = s.samples.iter().collect();
            Ok(inception_score(&classifier.predict(&refs)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_std(&scores))
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Per-frame error used by [`best_of_k_error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// L2 over concatenated ZYX Euler angles.
    #[default]
    EulerAngle,
    /// L2 over the raw quaternion coordinates.
    Raw,
}

fn horizon_error(pred: &PoseSequence, gt: &PoseSequence, metric: ErrorMetric) -> Result<f64> {
    let per_frame = match metric {
        ErrorMetric::EulerAngle => euler_angle_error(pred, gt)?,
        ErrorMetric::Raw => {
            if pred.len() != gt.len() || pred.joint_count != gt.joint_count {
                return Err(Error::ShapeMismatch(
                    "prediction and ground truth differ in shape".into(),
                ));
            }
            pred.frames
                .iter()
                .zip(&gt.frames)
                .map(|(a, b)| l2(&a.to_flat(), &b.to_flat()))
                .collect()
        }
    };
    Ok(per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64)
}

/// Smallest horizon-averaged error among the samples.
pub fn best_of_k_error(ss: &SampleSet, metric: ErrorMetric) -> Result<f64> {
    let gt = ss
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::MissingInput("ground truth".into()))?;
    if ss.samples.is_empty() {
        return Err(Error::MissingInput("no samples".into()));
    }
    ss.samples
        .iter()
        .map(|s| horizon_error(s, gt, metric))
        .try_fold(f64::INFINITY, |best, e| e.map(|e| best.min(e)))
}

/// One evaluation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub diversity: f64,
    pub quality: f64,
    pub context: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub best_of_k_error: f64,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable report")
    }

    /// Appends a record as one JSON line.
    pub fn append_jsonl(path: &Path, record: &impl Serialize) -> Result<()> {
        let line =
            serde_json::to_string(record).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }
}

/// Size and optimization knobs of a [`SequenceClassifier`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub test_fraction: f64,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 30,
            batch: 32,
            lr: 3e-3,
            test_fraction: 0.25,
        }
    }
}

/// GRU over flattened quaternion frames with a softmax on the last state.
#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    pub params: ParamSet,
    pub net: FrameClassifier,
}

impl SequenceClassifier {
    pub fn new(joints: usize, classes: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let net = FrameClassifier::new(
            &mut params,
            "clf",
            CellKind::Gru,
            4 * joints,
            hidden,
            classes,
            rng,
        );
        Self { params, net }
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        seqs: &[&PoseSequence],
        labels: &[usize],
    ) -> crate::graph::Var {
        let inputs: Vec<_> = frames_to_tensors(seqs)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let probs = *self
            .net
            .forward(g, &inputs)
            .last()
            .expect("non-empty sequences");
        let mut y = Tensor::zeros((seqs.len(), self.net.classes));
        for (i, &l) in labels.iter().enumerate() {
            y[[i, l]] = 1.0;
        }
        let y = g.constant(y);
        let pc = g.clamp(probs, 1e-12, f64::INFINITY);
        let lp = g.log(pc);
        let picked = g.mul(lp, y);
        let s = g.sum(picked);
        g.scale(s, -1.0 / seqs.len() as f64)
    }

    pub fn fit(
        &mut self,
        seqs: &[&PoseSequence],
        labels: &[usize],
        arch: &ClassifierArch,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if seqs.len() != labels.len() || seqs.is_empty() {
            return Err(Error::ShapeMismatch("need one label per sequence".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.net.classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: self.net.classes,
            });
        }
        let mut adam = Adam::new(&self.params, arch.lr);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        for _ in 0..arch.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(arch.batch.max(1)) {
                let bs: Vec<&PoseSequence> = chunk.iter().map(|&i| seqs[i]).collect();
                let bl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::with_params(&self.params);
                let loss = self.batch_loss(&mut g, &bs, &bl);
                let mut grads = g.backward(loss).params(&self.params);
                clip_global_norm(&mut grads, 5.0);
                adam.update(&mut self.params, &grads);
            }
        }
        Ok(())
    }

    pub fn accuracy(&self, seqs: &[&PoseSequence], labels: &[usize]) -> Result<f64> {
        let probs = self.predict(seqs)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count();
        Ok(hits as f64 / seqs.len().max(1) as f64)
    }
}

impl SequenceScorer for SequenceClassifier {
    fn classes(&self) -> usize {
        self.net.classes
    }

    fn predict(&self, seqs: &[&PoseSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(512) {
            if chunk
                .iter()
                .any(|s| s.len() != chunk[0].len() || s.is_empty())
            {
                return Err(Error::ShapeMismatch(
                    "classifier batches need equal non-zero lengths".into(),
                ));
            }
            let mut g = Graph::with_params(&self.params);
            let inputs: Vec<_> = frames_to_tensors(chunk)
                .into_iter()
                .map(|t| g.constant(t))
                .collect();
            let last = *self.net.forward(&mut g, &inputs).last().expect("frames");
            out.extend(g.value(last).rows().into_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

/// Trained real-vs-generated discriminator and its held-out accuracy.
#[derive(Debug, Clone)]
pub struct QualityClassifier {
    pub classifier: SequenceClassifier,
    pub test_accuracy: f64,
}

impl SequenceScorer for QualityClassifier {
    fn classes(&self) -> usize {
        2
    }

    fn predict(&self, seqs: &[&PoseSequence]) -> Result<Vec<Vec<f64>>> {
        self.classifier.predict(seqs)
    }
}

fn labeled<'a>(
    real: &[&'a PoseSequence],
    fake: &[&'a PoseSequence],
) -> (Vec<&'a PoseSequence>, Vec<usize>) {
    let seqs = real.iter().chain(fake).copied().collect();
    let labels = std::iter::repeat_n(REAL, real.len())
        .chain(std::iter::repeat_n(FAKE, fake.len()))
        .collect();
    (seqs, labels)
}

/// Balances real and fake by truncating the larger set, holds out
/// `arch.test_fraction` of each, and trains a binary classifier.
pub fn train_quality_classifier(
    real: &[&PoseSequence],
    fake: &[&PoseSequence],
    arch: &ClassifierArch,
    rng: &mut impl Rng,
) -> Result<QualityClassifier> {
    let n = real.len().min(fake.len());
    if n < 2 {
        return Err(Error::MissingInput(
            "quality classifier needs at least 2 sequences per class".into(),
        ));
    }
    let joints = real[0].joint_count;
    let mut r: Vec<&PoseSequence> = real.to_vec();
    let mut f: Vec<&PoseSequence> = fake.to_vec();
    r.shuffle(rng);
    f.shuffle(rng);
    r.truncate(n);
    f.truncate(n);
    let n_test = ((arch.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (r_test, r_train) = r.split_at(n_test);
    let (f_test, f_train) = f.split_at(n_test);
    let (train_x, train_y) = labeled(r_train, f_train);
    let (test_x, test_y) = labeled(r_test, f_test);
    let mut clf = SequenceClassifier::new(joints, 2, arch.hidden, rng);
    clf.fit(&train_x, &train_y, arch, rng)?;
    let test_accuracy = clf.accuracy(&test_x, &test_y)?;
    Ok(QualityClassifier {
        classifier: clf,
        test_accuracy,
    })
}
