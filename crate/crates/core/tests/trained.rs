//! Small end-to-end trainings that check behaviour rather than algebra.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stochseq::cvae::{ConditioningScheme, MotionBatch, MotionConfig, MotionModel, StepOptions};
use stochseq::graph::{Graph, ParamSet, Var};
use stochseq::losses::{anticipation_objective_var, AnticipationObjective, WeightSchedule};
use stochseq::metrics::{best_of_k_error, ErrorMetric, SampleSet};
use stochseq::nn::{clip_global_norm, Adam, CellKind};
use stochseq::perturb::CurriculumState;
use stochseq::recnet::{ms_lstm_forward, ms_lstm_loss, FrameClassifier, MsLstm};
use stochseq::seqdata::{generate_synthetic_dataset, synthetic_skeleton, SyntheticSpec};

const OBJ: AnticipationObjective = AnticipationObjective::Anticipation(WeightSchedule::Linear);

/// Context features identify only the pair `{0,1}` or `{2,3}`; action
/// features identify the class.
fn two_stream_data(n: usize, frames: usize, rng: &mut impl Rng) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let mut noisy = |hot: &dyn Fn(usize) -> usize| {
        (0..frames)
            .map(|_| {
                Array2::from_shape_fn((n, 4), |(b, d)| {
                    let z: f64 = StandardNormal.sample(rng);
                    f64::from(u8::from(d == hot(labels[b]))) + 0.3 * z
                })
            })
            .collect::<Vec<_>>()
    };
    let context = noisy(&|l| l / 2);
    let action = noisy(&|l| l);
    (context, action, labels)
}

fn fit(ps: &mut ParamSet, steps: usize, mut loss: impl FnMut(&mut Graph) -> Var) {
    let mut adam = Adam::new(ps, 1e-2);
    for _ in 0..steps {
        let mut g = Graph::with_params(ps);
        let l = loss(&mut g);
        let mut grads = g.backward(l).params(ps);
        clip_global_norm(&mut grads, 5.0);
        adam.update(ps, &grads);
    }
}

fn last_frame_accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &l)| {
            let best = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|p| p.0);
            best == Some(l)
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn second_stage_uses_action_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (ctx_tr, act_tr, y_tr) = two_stream_data(128, 5, &mut rng);
    let (ctx_te, act_te, y_te) = two_stream_data(256, 5, &mut rng);

    let mut ps = ParamSet::new();
    let ms = MsLstm::new(&mut ps, 4, 16, 4, &mut rng);
    assert_eq!(ms.stage2_input_width(), 20);
    fit(&mut ps, 150, |g| {
        let c: Vec<Var> = ctx_tr.iter().map(|x| g.input(x.clone())).collect();
        let a: Vec<Var> = act_tr.iter().map(|x| g.input(x.clone())).collect();
        let out = ms_lstm_forward(g, &ms, &c, &a).unwrap();
        ms_lstm_loss(g, &out, &y_tr, OBJ).unwrap()
    });

    let mut cps = ParamSet::new();
    let ctx_only = FrameClassifier::new(&mut cps, "ctx", CellKind::Lstm, 4, 16, 4, &mut rng);
    fit(&mut cps, 150, |g| {
        let c: Vec<Var> = ctx_tr.iter().map(|x| g.input(x.clone())).collect();
        let p = ctx_only.forward(g, &c);
        anticipation_objective_var(g, &p, &y_tr, OBJ).unwrap()
    });

    let mut g = Graph::with_params(&ps);
    let c: Vec<Var> = ctx_te.iter().map(|x| g.input(x.clone())).collect();
    let a: Vec<Var> = act_te.iter().map(|x| g.input(x.clone())).collect();
    let out = ms_lstm_forward(&mut g, &ms, &c, &a).unwrap();
    let two_stage = last_frame_accuracy(g.value(*out.stage2.last().unwrap()), &y_te);
    let stage1 = last_frame_accuracy(g.value(*out.stage1.last().unwrap()), &y_te);

    let mut g = Graph::with_params(&cps);
    let c: Vec<Var> = ctx_te.iter().map(|x| g.input(x.clone())).collect();
    let p = ctx_only.forward(&mut g, &c);
    let context = last_frame_accuracy(g.value(*p.last().unwrap()), &y_te);

    // context alone caps out near one half
    assert!(context < 0.65, "context-only accuracy {context}");
    assert!(stage1 < 0.65, "stage-1 accuracy {stage1}");
    assert!(two_stage > context + 0.25, "two-stage {two_stage} vs context {context}");
}

#[test]
fn mode_prediction_beats_the_typical_sample() {
    let spec = SyntheticSpec {
        joint_count: 3,
        num_families: 8,
        samples_per_family: 8,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic_dataset(&spec).unwrap();
    let config = MotionConfig {
        scheme: ConditioningScheme::Lcp,
        joints: 3,
        obs_len: spec.obs_len,
        fut_len: spec.fut_len,
        hidden: 32,
        embed: 16,
        latent: 8,
        cell: CellKind::Gru,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = MotionModel::new(config, synthetic_skeleton(3), &mut rng).unwrap();
    let mut adam = Adam::new(&model.params, 1e-3);
    let steps = 300;
    for step in 0..steps {
        let idx: Vec<usize> = (0..16).map(|_| rng.random_range(0..data.train.len())).collect();
        let obs: Vec<_> = idx.iter().map(|&i| &data.train[i].observed).collect();
        let fut: Vec<_> = idx.iter().map(|&i| &data.train[i].future).collect();
        let batch = MotionBatch::new(&obs, &fut).unwrap();
        let opts = StepOptions {
            p_tf: (1.0 - step as f64 / 30.0).max(0.0),
            lambda: (step as f64 / 100.0).min(1.0),
            curriculum: CurriculumState::fully_random(32, 0.5),
            clip_norm: 5.0,
        };
        model.train_step(&mut adam, &batch, &opts, &mut rng).unwrap();
    }

    let (mut mode_err, mut median_err) = (0.0, 0.0);
    let conds: Vec<_> = data.test.iter().chain(&data.val).collect();
    for c in &conds {
        let gt = Some(c.future.clone());
        let mode = model.mode_decode(&c.observed).unwrap();
        mode_err += best_of_k_error(&SampleSet::new(0, vec![mode], gt.clone(), None).unwrap(), ErrorMetric::EulerAngle).unwrap();
        let mut errs: Vec<f64> = model
            .sample(&[&c.observed], 50, &mut rng)
            .unwrap()
            .remove(0)
            .into_iter()
            .map(|s| best_of_k_error(&SampleSet::new(0, vec![s], gt.clone(), None).unwrap(), ErrorMetric::EulerAngle).unwrap())
            .collect();
        errs.sort_by(f64::total_cmp);
        median_err += 0.5 * (errs[24] + errs[25]);
    }
    let n = conds.len() as f64;
    let (mode_err, median_err) = (mode_err / n, median_err / n);
    assert!(mode_err <= median_err, "mode {mode_err} vs median sample {median_err}");
}
