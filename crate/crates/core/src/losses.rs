//! Training objectives: the anticipation loss family, pose reconstruction
//! losses, Gaussian KL terms and the KL annealing schedule.
//!
//! Every loss has a graph form (operating on [`Var`]s, batch-mean reduced)
//! used for training and a plain form over domain types that evaluates the
//! same graph.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cvae::GaussianParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::kinematics::{PoseSequence, Skeleton};

/// Lower bound applied to the argument of every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Per-frame weight `w(t)`, with `t` the 1-based frame index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSchedule {
    /// `w(t) = 1` at the last frame, 0 elsewhere.
    ConstantLastFrame,
    /// `w(t) = t / T`.
    Linear,
    /// `w(t) = e^(αt-β) / (1 + e^(αt-β))`.
    Sigmoid { alpha: f64, beta: f64 },
    /// `w(t) = e^-(T-t)`.
    Exponential,
}

impl WeightSchedule {
    pub const DRIVING: WeightSchedule = WeightSchedule::Sigmoid {
        alpha: 3.0,
        beta: 6.0,
    };

    pub fn weight(&self, t: usize, len: usize) -> f64 {
        debug_assert!(t >= 1 && t <= len);
        let (t, len) = (t as f64, len as f64);
        match *self {
            WeightSchedule::ConstantLastFrame => {
                if t == len {
                    1.0
                } else {
                    0.0
                }
            }
            WeightSchedule::Linear => t / len,
            WeightSchedule::Sigmoid { alpha, beta } => {
                let a = alpha * t - beta;
                1.0 / (1.0 + (-a).exp())
            }
            WeightSchedule::Exponential => (-(len - t)).exp(),
        }
    }

    pub fn weights(&self, len: usize) -> Vec<f64> {
        (1..=len).map(|t| self.weight(t, len)).collect()
    }
}

/// Class probabilities per frame, `T×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    probs: Array2<f64>,
}

impl PredictionSequence {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidProbabilities("empty prediction".into()));
        }
        for (t, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidProbabilities(format!(
                    "frame {t} has entries outside [0,1]"
                )));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidProbabilities(format!(
                    "frame {t} sums to {s}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Logistic KL weight `λ(step) = 1 / (1 + e^-(k·(step - midpoint)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub midpoint_step: f64,
    pub steepness: f64,
}

impl AnnealSchedule {
    pub fn new(midpoint_step: f64, steepness: f64) -> Result<Self> {
        let s = Self {
            midpoint_step,
            steepness,
        };
        if !(steepness > 0.0) || !midpoint_step.is_finite() {
            return Err(Error::InvalidParameter(
                "anneal steepness must be positive".into(),
            ));
        }
        if s.weight(0) >= 0.01 {
            return Err(Error::InvalidParameter(format!(
                "anneal weight at step 0 is {} (needs < 0.01)",
                s.weight(0)
            )));
        }
        Ok(s)
    }

    /// Midpoint at `fraction` of the run, saturated well before the end.
    pub fn for_run(total_steps: u64, fraction: f64) -> Self {
        let midpoint = (total_steps as f64 * fraction).max(1.0);
        Self {
            midpoint_step: midpoint,
            steepness: 10.0 / midpoint,
        }
    }

    pub fn weight(&self, step: u64) -> f64 {
        let a = self.steepness * (step as f64 - self.midpoint_step);
        1.0 / (1.0 + (-a).exp())
    }
}

pub fn kl_anneal_weight(step: u64, sched: &AnnealSchedule) -> f64 {
    sched.weight(step)
}

/// The classification objectives compared for anticipation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum AnticipationObjective {
    /// False negatives weighted 1, false positives by the schedule.
    Anticipation(WeightSchedule),
    Ce,
    Ece,
    Lgl,
}

/// `(Σ_k y log p, Σ_k (1-y) log(1-p))` per row, each `B×1`.
fn binary_terms(g: &mut Graph, p: Var, onehot: Var) -> (Var, Var) {
    let pc = g.clamp(p, PROB_EPS, f64::INFINITY);
    let logp = g.log(pc);
    let q = g.one_minus(p);
    let qc = g.clamp(q, PROB_EPS, f64::INFINITY);
    let logq = g.log(qc);
    let not_y = g.one_minus(onehot);
    let pos = g.mul(onehot, logp);
    let neg = g.mul(not_y, logq);
    (g.sum_cols(pos), g.sum_cols(neg))
}

fn onehot(batch: usize, classes: usize, labels: &[usize]) -> Result<Tensor> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch {batch}",
            labels.len()
        )));
    }
    let mut y = Tensor::zeros((batch, classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        y[[i, l]] = 1.0;
    }
    Ok(y)
}

/// Batch-mean anticipation objective over per-frame probabilities `frames[t]` (`B×N`).
pub fn anticipation_objective_var(
    g: &mut Graph,
    frames: &[Var],
    labels: &[usize],
    objective: AnticipationObjective,
) -> Result<Var> {
    let len = frames.len();
    if len == 0 {
        return Err(Error::ShapeMismatch("no frames".into()));
    }
    let (batch, classes) = g.shape(frames[0]);
    let y = g.constant(onehot(batch, classes, labels)?);
    let mut total: Option<Var> = None;
    for (idx, &p) in frames.iter().enumerate() {
        let t = idx + 1;
        // coefficients on the false-negative and false-positive sums
        let (a, b) = match objective {
            AnticipationObjective::Anticipation(s) => (1.0, s.weight(t, len)),
            AnticipationObjective::Ce => {
                if t == len {
                    (1.0, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            AnticipationObjective::Ece => {
                let w = (-((len - t) as f64)).exp();
                (w, w)
            }
            AnticipationObjective::Lgl => {
                let w = t as f64 / len as f64;
                (w, w)
            }
        };
        if a == 0.0 && b == 0.0 {
            continue;
        }
        let (pos, neg) = binary_terms(g, p, y);
        let pa = g.scale(pos, a);
        let nb = g.scale(neg, b);
        let term = g.add(pa, nb);
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let total = total.expect("the last frame always contributes");
    let norm = match objective {
        AnticipationObjective::Anticipation(_) => -1.0 / classes as f64,
        _ => -1.0,
    };
    let scaled = g.scale(total, norm);
    Ok(g.mean(scaled))
}

fn prediction_frames(g: &mut Graph, pred: &PredictionSequence) -> Vec<Var> {
    pred.probs
        .rows()
        .into_iter()
        .map(|r| g.constant(r.to_owned().insert_axis(ndarray::Axis(0))))
        .collect()
}

fn eval_objective(
    pred: &PredictionSequence,
    label: usize,
    objective: AnticipationObjective,
) -> Result<f64> {
    let mut g = Graph::new();
    let frames = prediction_frames(&mut g, pred);
    let l = anticipation_objective_var(&mut g, &frames, &[label], objective)?;
    Ok(g.scalar(l))
}

/// `-(1/N) Σ_k Σ_t [y log ŷ + w(t)(1-y) log(1-ŷ)]`.
pub fn anticipation_loss(
    pred: &PredictionSequence,
    label: usize,
    schedule: WeightSchedule,
) -> Result<f64> {
    eval_objective(pred, label, AnticipationObjective::Anticipation(schedule))
}

/// Binary cross-entropy summed over classes at the last frame only.
pub fn ce_loss(pred: &PredictionSequence, label: usize) -> Result<f64> {
    eval_objective(pred, label, AnticipationObjective::Ce)
}

/// `Σ_t e^-(T-t) CE_t`.
pub fn ece_loss(pred: &PredictionSequence, label: usize) -> Result<f64> {
    eval_objective(pred, label, AnticipationObjective::Ece)
}

/// `Σ_t (t/T) CE_t`.
pub fn lgl_loss(pred: &PredictionSequence, label: usize) -> Result<f64> {
    eval_objective(pred, label, AnticipationObjective::Lgl)
}

/// Squared quaternion error summed over frames and joints, batch mean.
/// Each frame is `B×4J`.
pub fn rot_loss_var(g: &mut Graph, pred: &[Var], gt: &[Var]) -> Var {
    assert_eq!(pred.len(), gt.len(), "frame count mismatch");
    let batch = g.shape(pred[0]).0 as f64;
    let mut sums = Vec::with_capacity(pred.len());
    for (&p, &q) in pred.iter().zip(gt) {
        let d = g.sub(p, q);
        let sq = g.square(d);
        sums.push(g.sum(sq));
    }
    let total = sum_vars(g, &sums);
    g.scale(total, 1.0 / batch)
}

/// Squared joint-position error after root alignment, batch mean.
pub fn skl_loss_var(g: &mut Graph, pred: &[Var], gt: &[Var], skel: &Arc<Skeleton>) -> Var {
    assert_eq!(pred.len(), gt.len(), "frame count mismatch");
    let batch = g.shape(pred[0]).0 as f64;
    let mut sums = Vec::with_capacity(pred.len());
    for (&p, &q) in pred.iter().zip(gt) {
        let pp = g.forward_kinematics(p, skel.clone(), true);
        let qp = g.forward_kinematics(q, skel.clone(), true);
        let d = g.sub(pp, qp);
        let sq = g.square(d);
        sums.push(g.sum(sq));
    }
    let total = sum_vars(g, &sums);
    g.scale(total, 1.0 / batch)
}

pub(crate) fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut it = vars.iter();
    let mut acc = *it.next().expect("at least one term");
    for &v in it {
        acc = g.add(acc, v);
    }
    acc
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))` per row, batch mean. `mu`, `sigma` are `B×d`.
pub fn kl_standard_var(g: &mut Graph, mu: Var, sigma: Var) -> Var {
    let batch = g.shape(mu).0 as f64;
    let s2 = g.square(sigma);
    let log_s2 = g.log(s2);
    let mu2 = g.square(mu);
    let a = g.add_scalar(log_s2, 1.0);
    let b = g.sub(a, mu2);
    let c = g.sub(b, s2);
    let total = g.sum(c);
    g.scale(total, -0.5 / batch)
}

/// KL between the composed posterior `N(μ + σ⊙μc, diag (σ⊙σc)²)` and
/// `N(μc, diag σc²)`:
/// `½ Σ [-log σ² - 1 + σ² + (μ + (σ-1)⊙μc)² / σc²]`, batch mean.
pub fn lcp_kl_var(g: &mut Graph, mu: Var, sigma: Var, mu_c: Var, sigma_c: Var) -> Var {
    let batch = g.shape(mu).0 as f64;
    let s2 = g.square(sigma);
    let log_s2 = g.log(s2);
    let sm1 = g.add_scalar(sigma, -1.0);
    let shift = g.mul(sm1, mu_c);
    let dm = g.add(mu, shift);
    let dm2 = g.square(dm);
    let sc2 = g.square(sigma_c);
    let maha = g.div(dm2, sc2);
    let a = g.sub(s2, log_s2);
    let b = g.add_scalar(a, -1.0);
    let c = g.add(b, maha);
    let total = g.sum(c);
    g.scale(total, 0.5 / batch)
}

fn seq_to_var(g: &mut Graph, seq: &PoseSequence) -> Vec<Var> {
    seq.frames
        .iter()
        .map(|f| {
            let flat = f.to_flat();
            g.constant(Tensor::from_shape_vec((1, flat.len()), flat).expect("flat pose"))
        })
        .collect()
}

fn check_same_shape(pred: &PoseSequence, gt: &PoseSequence) -> Result<()> {
    if pred.len() != gt.len() || pred.joint_count != gt.joint_count {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.len(),
            pred.joint_count,
            gt.len(),
            gt.joint_count
        )));
    }
    if pred.is_empty() {
        return Err(Error::ShapeMismatch("empty sequences".into()));
    }
    Ok(())
}

/// `Σ_frames Σ_joints ‖q̂ - q‖²`.
pub fn rot_loss(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mut g = Graph::new();
    let p = seq_to_var(&mut g, pred);
    let q = seq_to_var(&mut g, gt);
    let l = rot_loss_var(&mut g, &p, &q);
    Ok(g.scalar(l))
}

/// `Σ_frames Σ_joints ‖p̂ - p‖²` on root-aligned forward kinematics.
pub fn skl_loss(pred: &PoseSequence, gt: &PoseSequence, skel: &Skeleton) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.joint_count != skel.joint_count() {
        return Err(Error::ShapeMismatch(format!(
            "sequence has {} joints, skeleton {}",
            pred.joint_count,
            skel.joint_count()
        )));
    }
    let skel = Arc::new(skel.clone());
    let mut g = Graph::new();
    let p = seq_to_var(&mut g, pred);
    let q = seq_to_var(&mut g, gt);
    let l = skl_loss_var(&mut g, &p, &q, &skel);
    Ok(g.scalar(l))
}

/// `-½ Σ_j (1 + log σ_j² - μ_j² - σ_j²)`.
pub fn gaussian_kl_standard(p: &GaussianParams) -> f64 {
    -0.5 * p
        .mu
        .iter()
        .zip(&p.sigma)
        .map(|(m, s)| 1.0 + (s * s).ln() - m * m - s * s)
        .sum::<f64>()
}

/// `½[log |Σ₂|/|Σ₁| - d + tr{Σ₂⁻¹Σ₁} + (μ₂-μ₁)ᵀΣ₂⁻¹(μ₂-μ₁)]` for diagonal covariances.
pub fn gaussian_kl_general(p1: &GaussianParams, p2: &GaussianParams) -> Result<f64> {
    if p1.dim() != p2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "dimensions {} and {}",
            p1.dim(),
            p2.dim()
        )));
    }
    let mut acc = 0.0;
    for j in 0..p1.dim() {
        let v1 = p1.sigma[j] * p1.sigma[j];
        let v2 = p2.sigma[j] * p2.sigma[j];
        let dm = p2.mu[j] - p1.mu[j];
        acc += (v2 / v1).ln() - 1.0 + v1 / v2 + dm * dm / v2;
    }
    Ok(0.5 * acc)
}

/// KL of the composed data posterior against the condition posterior.
pub fn lcp_kl(post: &GaussianParams, cond: &GaussianParams) -> Result<f64> {
    if post.dim() != cond.dim() {
        return Err(Error::ShapeMismatch(format!(
            "dimensions {} and {}",
            post.dim(),
            cond.dim()
        )));
    }
    let row = |v: &[f64]| Tensor::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
    let mut g = Graph::new();
    let mu = g.constant(row(&post.mu));
    let sigma = g.constant(row(&post.sigma));
    let mu_c = g.constant(row(&cond.mu));
    let sigma_c = g.constant(row(&cond.sigma));
    let l = lcp_kl_var(&mut g, mu, sigma, mu_c, sigma_c);
    Ok(g.scalar(l))
}

/// Variable-level terms of one motion objective.
#[derive(Debug, Clone, Copy)]
pub enum MotionTerms {
    /// Data reconstruction (rot + skl) and posterior KL to `N(0, I)`.
    Standard { rot: Var, skl: Var, kl: Option<Var> },
    /// Condition and data reconstructions with both KL terms.
    Lcp {
        rec_cs: Var,
        rec_lcp: Var,
        kl_cs: Var,
        kl_lcp: Var,
    },
}

/// Scalar contributions of a [`composite_motion_loss`]; `parts` sum to `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub parts: Vec<(String, f64)>,
    /// Unweighted KL (sum of both terms for the learned-prior variant).
    pub kl: f64,
    pub reconstruction: f64,
    pub lambda: f64,
}

/// `mean(rot + skl) + λ·KL`, or `λ(KL_cs + KL_lcp) + rec_cs + rec_lcp`.
pub fn composite_motion_loss(
    g: &mut Graph,
    terms: MotionTerms,
    lambda: f64,
) -> (Var, LossBreakdown) {
    match terms {
        MotionTerms::Standard { rot, skl, kl } => {
            let rec = g.add(rot, skl);
            let mut parts = vec![
                ("rot".to_string(), g.scalar(rot)),
                ("skl".to_string(), g.scalar(skl)),
            ];
            let (total, kl_value) = match kl {
                Some(kl) => {
                    let w = g.scale(kl, lambda);
                    parts.push(("kl".to_string(), g.scalar(w)));
                    (g.add(rec, w), g.scalar(kl))
                }
                None => (rec, 0.0),
            };
            let report = LossBreakdown {
                total: g.scalar(total),
                reconstruction: g.scalar(rec),
                parts,
                kl: kl_value,
                lambda,
            };
            (total, report)
        }
        MotionTerms::Lcp {
            rec_cs,
            rec_lcp,
            kl_cs,
            kl_lcp,
        } => {
            let kl = g.add(kl_cs, kl_lcp);
            let wk = g.scale(kl, lambda);
            let rec = g.add(rec_cs, rec_lcp);
            let total = g.add(wk, rec);
            let parts = vec![
                ("kl_cs".to_string(), lambda * g.scalar(kl_cs)),
                ("kl_lcp".to_string(), lambda * g.scalar(kl_lcp)),
                ("rec_cs".to_string(), g.scalar(rec_cs)),
                ("rec_lcp".to_string(), g.scalar(rec_lcp)),
            ];
            let report = LossBreakdown {
                total: g.scalar(total),
                reconstruction: g.scalar(rec),
                parts,
                kl: g.scalar(kl),
                lambda,
            };
            (total, report)
        }
    }
}
