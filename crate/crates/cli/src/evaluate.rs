//! Scoring a trained motion model on its dataset.

use rand::Rng;
use serde::Serialize;

use stochseq::cvae::MotionModel;
use stochseq::kinematics::PoseSequence;
use stochseq::metrics::{
    best_of_k_error, conditional_is, context, diversity, quality, train_quality_classifier,
    ClassifierArch, ErrorMetric, MetricReport, SampleSet, SequenceClassifier,
};
use stochseq::seqdata::DatasetSplit;
use stochseq::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    #[serde(flatten)]
    pub report: MetricReport,
    pub k: usize,
    pub conditions: usize,
    /// Held-out accuracy of the real-vs-generated classifier.
    pub quality_classifier_accuracy: f64,
    /// Accuracy of the mode classifier on real test futures.
    pub mode_classifier_accuracy: f64,
}

/// Draws `k` futures per test condition and computes every metric.
///
/// The mode classifier behind context and the inception score is trained on
/// real training futures. The real-vs-generated classifier is trained on
/// training futures against one generated future per training condition,
/// then scored on the generated test futures.
pub fn evaluate_motion(
    model: &MotionModel,
    split: &DatasetSplit,
    num_modes: usize,
    k: usize,
    arch: &ClassifierArch,
    rng: &mut impl Rng,
) -> Result<Evaluation> {
    if split.test.is_empty() || split.train.len() < 2 {
        return Err(Error::MissingInput(
            "evaluation needs test samples and at least 2 training samples".into(),
        ));
    }
    let obs: Vec<&PoseSequence> = split.test.iter().map(|s| &s.observed).collect();
    let draws = model.sample(&obs, k, rng)?;
    let sets = draws
        .into_iter()
        .zip(&split.test)
        .enumerate()
        .map(|(i, (samples, s))| {
            SampleSet::new(i, samples, Some(s.future.clone()), Some(s.mode_label))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = sets.len() as f64;
    let mut div = 0.0;
    let mut bok = 0.0;
    for s in &sets {
        div += diversity(s)?;
        bok += best_of_k_error(s, ErrorMetric::EulerAngle)?;
    }

    let joints = model.config.joints;
    let train_fut: Vec<&PoseSequence> = split.train.iter().map(|s| &s.future).collect();
    let train_labels: Vec<usize> = split.train.iter().map(|s| s.mode_label).collect();
    let mut modes = SequenceClassifier::new(joints, num_modes, arch.hidden, rng);
    modes.fit(&train_fut, &train_labels, arch, rng)?;
    let test_fut: Vec<&PoseSequence> = split.test.iter().map(|s| &s.future).collect();
    let test_labels: Vec<usize> = split.test.iter().map(|s| s.mode_label).collect();
    let mode_classifier_accuracy = modes.accuracy(&test_fut, &test_labels)?;
    let ctx = context(&modes, &sets)?;
    let (is_mean, is_std) = conditional_is(&modes, &sets)?;

    let train_obs: Vec<&PoseSequence> = split.train.iter().map(|s| &s.observed).collect();
    let fake: Vec<PoseSequence> = model
        .sample(&train_obs, 1, rng)?
        .into_iter()
        .flatten()
        .collect();
    let fake_refs: Vec<&PoseSequence> = fake.iter().collect();
    let qc = train_quality_classifier(&train_fut, &fake_refs, arch, rng)?;
    let generated: Vec<&PoseSequence> = sets.iter().flat_map(|s| &s.samples).collect();
    let q = quality(&qc.classifier, &generated)?;

    Ok(Evaluation {
        report: MetricReport {
            diversity: div / n,
            quality: q,
            context: ctx,
            is_mean,
            is_std,
            best_of_k_error: bok / n,
        },
        k,
        conditions: sets.len(),
        quality_classifier_accuracy: qc.test_accuracy,
        mode_classifier_accuracy,
    })
}
