//! Recurrent encoders and decoders, the teacher-forcing schedule, the
//! two-stage and multi-modal classifiers, and temporal average pooling.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::kinematics::{normalize_quaternion, Pose, PoseSequence, Quaternion};
use crate::losses::{anticipation_objective_var, AnticipationObjective};
use crate::nn::{init_uniform, Cell, CellKind, Linear, RecurrentState};

/// Probability of feeding ground truth, decreasing linearly per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingSchedule {
    pub p0: f64,
    pub decay_per_epoch: f64,
    pub floor: f64,
}

impl TeacherForcingSchedule {
    pub fn linear(decay_per_epoch: f64) -> Self {
        Self {
            p0: 1.0,
            decay_per_epoch,
            floor: 0.0,
        }
    }

    /// Reaches zero after `epochs` epochs.
    pub fn over_epochs(epochs: f64) -> Self {
        Self::linear(1.0 / epochs.max(f64::MIN_POSITIVE))
    }
}

pub fn teacher_forcing_prob(epoch: f64, sched: &TeacherForcingSchedule) -> f64 {
    (sched.p0 - sched.decay_per_epoch * epoch).clamp(sched.floor, sched.p0)
}

/// Runs `cell` over `inputs` (each `B×D`) and returns the final state.
pub fn encode_sequence(
    g: &mut Graph,
    cell: &Cell,
    inputs: &[Var],
    init: Option<RecurrentState>,
) -> RecurrentState {
    encode_states(g, cell, inputs, init)
        .pop()
        .unwrap_or_else(|| {
            let batch = 1;
            cell.zero_state(g, batch)
        })
}

/// Every intermediate state of [`encode_sequence`], one per input frame.
pub fn encode_states(
    g: &mut Graph,
    cell: &Cell,
    inputs: &[Var],
    init: Option<RecurrentState>,
) -> Vec<RecurrentState> {
    let Some(&first) = inputs.first() else {
        return init.into_iter().collect();
    };
    let batch = g.shape(first).0;
    let mut state = init.unwrap_or_else(|| cell.zero_state(g, batch));
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = cell.step(g, x, state);
        out.push(state);
    }
    out
}

/// Autoregressive quaternion decoder: `q̂ = normalize(x_prev + head(h))`.
#[derive(Debug, Clone)]
pub struct PoseDecoder {
    pub cell: Cell,
    pub head: Linear,
    pub joints: usize,
}

impl PoseDecoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        kind: CellKind,
        joints: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cell = Cell::new(kind, ps, &format!("{name}.cell"), 4 * joints, hidden, rng);
        let head = Linear::new(ps, &format!("{name}.head"), hidden, 4 * joints, rng);
        Self { cell, head, joints }
    }
}

/// Rolls out `length` frames from `h_init` (`B×H`) and `seed_pose` (`B×4J`).
/// At each step the next input is the ground-truth frame with probability
/// `p_tf`, otherwise the model's own output.
#[allow(clippy::too_many_arguments)]
pub fn decode_sequence(
    g: &mut Graph,
    dec: &PoseDecoder,
    h_init: Var,
    seed_pose: Var,
    length: usize,
    p_tf: f64,
    rng: &mut impl Rng,
    gt: Option<&[Var]>,
) -> Result<Vec<Var>> {
    if !(0.0..=1.0).contains(&p_tf) {
        return Err(Error::InvalidParameter(format!(
            "teacher forcing probability {p_tf}"
        )));
    }
    if p_tf > 0.0 {
        match gt {
            None => {
                return Err(Error::MissingInput(
                    "ground truth required when teacher forcing".into(),
                ))
            }
            Some(gt) if gt.len() < length => {
                return Err(Error::ShapeMismatch(format!(
                    "{} ground-truth frames for length {length}",
                    gt.len()
                )))
            }
            _ => {}
        }
    }
    let mut state = dec.cell.state_from_hidden(g, h_init);
    let mut input = seed_pose;
    let mut out = Vec::with_capacity(length);
    for i in 0..length {
        state = dec.cell.step(g, input, state);
        let delta = dec.head.forward(g, state.h);
        let raw = g.add(input, delta);
        let q = g.normalize_groups(raw, 4);
        out.push(q);
        let forced = p_tf >= 1.0 || (p_tf > 0.0 && rng.random::<f64>() < p_tf);
        input = match (forced, gt) {
            (true, Some(gt)) => gt[i],
            _ => q,
        };
    }
    Ok(out)
}

/// Stacks one frame of each sequence into a `B×4J` tensor.
pub fn frames_to_tensors(seqs: &[&PoseSequence]) -> Vec<Tensor> {
    let len = seqs.first().map_or(0, |s| s.len());
    let width = seqs.first().map_or(0, |s| 4 * s.joint_count);
    (0..len)
        .map(|t| {
            let mut m = Tensor::zeros((seqs.len(), width));
            for (b, s) in seqs.iter().enumerate() {
                for (k, v) in s.frames[t].to_flat().into_iter().enumerate() {
                    m[[b, k]] = v;
                }
            }
            m
        })
        .collect()
}

/// Splits per-frame `B×4J` values back into `B` canonicalized sequences.
pub fn tensors_to_sequences(frames: &[&Tensor], joints: usize) -> Result<Vec<PoseSequence>> {
    let batch = frames.first().map_or(0, |f| f.nrows());
    (0..batch)
        .map(|b| {
            let poses = frames
                .iter()
                .map(|f| {
                    let rotations = (0..joints)
                        .map(|j| {
                            let q = Quaternion::new(
                                f[[b, 4 * j]],
                                f[[b, 4 * j + 1]],
                                f[[b, 4 * j + 2]],
                                f[[b, 4 * j + 3]],
                            );
                            normalize_quaternion(q)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Pose { rotations })
                })
                .collect::<Result<Vec<_>>>()?;
            PoseSequence::new(joints, poses)
        })
        .collect()
}

/// Recurrent classifier emitting a class distribution at every frame.
#[derive(Debug, Clone)]
pub struct FrameClassifier {
    pub cell: Cell,
    pub head: Linear,
    pub classes: usize,
}

impl FrameClassifier {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            cell: Cell::new(kind, ps, &format!("{name}.cell"), input, hidden, rng),
            head: Linear::new(ps, &format!("{name}.head"), hidden, classes, rng),
            classes,
        }
    }

    /// Per-frame probabilities, each `B×N`.
    pub fn forward(&self, g: &mut Graph, inputs: &[Var]) -> Vec<Var> {
        encode_states(g, &self.cell, inputs, None)
            .into_iter()
            .map(|s| {
                let logits = self.head.forward(g, s.h);
                g.softmax(logits)
            })
            .collect()
    }
}

/// Two-stage classifier: context features first, then the stage-1 hidden
/// state concatenated with action features.
#[derive(Debug, Clone)]
pub struct MsLstm {
    pub stage1: Cell,
    pub head1: Linear,
    pub stage2: Cell,
    pub head2: Linear,
    pub feature_dim: usize,
}

impl MsLstm {
    pub fn new(
        ps: &mut ParamSet,
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            stage1: Cell::new(CellKind::Lstm, ps, "ms.stage1", feature_dim, hidden, rng),
            head1: Linear::new(ps, "ms.head1", hidden, classes, rng),
            stage2: Cell::new(
                CellKind::Lstm,
                ps,
                "ms.stage2",
                hidden + feature_dim,
                hidden,
                rng,
            ),
            head2: Linear::new(ps, "ms.head2", hidden, classes, rng),
            feature_dim,
        }
    }

    pub fn stage2_input_width(&self) -> usize {
        self.stage2.input_size()
    }
}

/// Per-frame stage predictions of an [`MsLstm`].
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub stage1: Vec<Var>,
    pub stage2: Vec<Var>,
}

pub fn ms_lstm_forward(
    g: &mut Graph,
    model: &MsLstm,
    context: &[Var],
    action: &[Var],
) -> Result<StageOutputs> {
    if context.len() != action.len() || context.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} context frames vs {} action frames",
            context.len(),
            action.len()
        )));
    }
    let s1 = encode_states(g, &model.stage1, context, None);
    let mut stage1 = Vec::with_capacity(s1.len());
    let mut stage2 = Vec::with_capacity(s1.len());
    let batch = g.shape(context[0]).0;
    let mut st2 = model.stage2.zero_state(g, batch);
    for (s, &a) in s1.iter().zip(action) {
        let l1 = model.head1.forward(g, s.h);
        stage1.push(g.softmax(l1));
        let x = g.concat(&[s.h, a]);
        st2 = model.stage2.step(g, x, st2);
        let l2 = model.head2.forward(g, st2.h);
        stage2.push(g.softmax(l2));
    }
    Ok(StageOutputs { stage1, stage2 })
}

/// Mean of the per-stage objectives.
pub fn ms_lstm_loss(
    g: &mut Graph,
    out: &StageOutputs,
    labels: &[usize],
    objective: AnticipationObjective,
) -> Result<Var> {
    let a = anticipation_objective_var(g, &out.stage1, labels, objective)?;
    let b = anticipation_objective_var(g, &out.stage2, labels, objective)?;
    let s = g.add(a, b);
    Ok(g.scale(s, 0.5))
}

/// Time-distributed pooling over the modality axis: `Σ_m w_m h_m + b`.
#[derive(Debug, Clone)]
pub struct FcPool {
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
}

impl FcPool {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = (0..inputs)
            .map(|m| ps.add(format!("{name}.w{m}"), init_uniform(rng, 1, 1, inputs)))
            .collect();
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros((1, hidden)));
        Self { weights, bias }
    }

    pub fn forward(&self, g: &mut Graph, rows: &[Var]) -> Var {
        assert_eq!(rows.len(), self.weights.len(), "modality count mismatch");
        let mut acc = g.param(self.bias);
        for (&h, &w) in rows.iter().zip(&self.weights) {
            let w = g.param(w);
            let t = g.mul(h, w);
            acc = g.add(acc, t);
        }
        acc
    }
}

/// Multi-modal fusion: FC-Pool, a second recurrent layer, a skip stack of
/// the recurrent output with the original hiddens, and a final FC-Pool.
#[derive(Debug, Clone)]
pub struct MmLstmFusion {
    pub pool1: FcPool,
    pub recurrent: Cell,
    pub pool2: FcPool,
    pub modalities: usize,
    pub hidden: usize,
}

impl MmLstmFusion {
    pub fn new(
        ps: &mut ParamSet,
        modalities: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if modalities < 2 {
            return Err(Error::InvalidParameter(
                "fusion needs at least two modalities".into(),
            ));
        }
        Ok(Self {
            pool1: FcPool::new(ps, "mm.pool1", modalities, hidden, rng),
            recurrent: Cell::new(CellKind::Lstm, ps, "mm.lstm", hidden, hidden, rng),
            pool2: FcPool::new(ps, "mm.pool2", modalities + 1, hidden, rng),
            modalities,
            hidden,
        })
    }
}

/// One fusion step.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// The `M+1` stacked rows fed to the second pooling layer.
    pub stacked: Vec<Var>,
    pub fused: Var,
    pub state: RecurrentState,
}

/// Fuses `M` per-modality hiddens (each `B×H`) into one `B×H` representation.
pub fn mm_lstm_fuse(
    g: &mut Graph,
    fusion: &MmLstmFusion,
    modal_hiddens: &[Var],
    state: Option<RecurrentState>,
) -> Result<FusionOutput> {
    if modal_hiddens.len() != fusion.modalities {
        return Err(Error::ShapeMismatch(format!(
            "{} modalities for a fusion of {}",
            modal_hiddens.len(),
            fusion.modalities
        )));
    }
    let batch = g.shape(modal_hiddens[0]).0;
    let pooled = fusion.pool1.forward(g, modal_hiddens);
    let st = state.unwrap_or_else(|| fusion.recurrent.zero_state(g, batch));
    let st = fusion.recurrent.step(g, pooled, st);
    let mut stacked = Vec::with_capacity(fusion.modalities + 1);
    stacked.push(st.h);
    stacked.extend_from_slice(modal_hiddens);
    let fused = fusion.pool2.forward(g, &stacked);
    Ok(FusionOutput {
        stacked,
        fused,
        state: st,
    })
}

/// Mean of the first `t` rows.
pub fn temporal_average_pool(per_frame_probs: &Array2<f64>, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > per_frame_probs.nrows() {
        return Err(Error::InvalidParameter(format!(
            "pool length {t} for {} frames",
            per_frame_probs.nrows()
        )));
    }
    let n = per_frame_probs.ncols();
    let mut out = vec![0.0; n];
    for row in per_frame_probs.rows().into_iter().take(t) {
        for (o, &p) in out.iter_mut().zip(row) {
            *o += p;
        }
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}
