use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use stochseq::cam::{cam_map, ClassWeights, FeatureMap};
use stochseq::cvae::{extended_reparameterize, reparameterize, GaussianParams};
use stochseq::graph::Graph;
use stochseq::kinematics::{
    align_root, forward_kinematics, Pose, PoseSequence, Quaternion, Skeleton,
};
use stochseq::losses::{
    anticipation_loss, ce_loss, ece_loss, gaussian_kl_general, lcp_kl, lgl_loss, rot_loss,
    skl_loss, PredictionSequence, WeightSchedule, PROB_EPS,
};
use stochseq::metrics::{
    best_of_k_error, diversity, inception_score, ErrorMetric, SampleSet,
};
use stochseq::nn::CellKind;
use stochseq::perturb::{resample, sample_mask, sampled_count, CurriculumState};
use stochseq::recnet::{
    decode_sequence, mm_lstm_fuse, temporal_average_pool, MmLstmFusion, PoseDecoder,
};
use stochseq::seqdata::{generate_synthetic_dataset, SyntheticSpec};

fn unit_quat() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-2)
        .prop_map(|a| Quaternion::from_array(a).normalize().unwrap())
}

fn pose(joints: usize) -> impl Strategy<Value = Pose> {
    prop::collection::vec(unit_quat(), joints).prop_map(|rotations| Pose { rotations })
}

fn sequence(joints: usize, len: usize) -> impl Strategy<Value = PoseSequence> {
    prop::collection::vec(pose(joints), len).prop_map(move |f| PoseSequence::new(joints, f).unwrap())
}

/// Random row-stochastic `T×N` matrix via softmax of uniform logits.
fn prediction(frames: usize, classes: usize) -> impl Strategy<Value = PredictionSequence> {
    prop::collection::vec(-3.0f64..3.0, frames * classes).prop_map(move |l| {
        let mut p = Array2::from_shape_vec((frames, classes), l).unwrap();
        for mut row in p.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        PredictionSequence::new(p).unwrap()
    })
}

fn gaussian(dim: usize) -> impl Strategy<Value = GaussianParams> {
    (
        prop::collection::vec(-2.0f64..2.0, dim),
        prop::collection::vec(0.2f64..2.0, dim),
    )
        .prop_map(|(m, s)| GaussianParams::new(m, s).unwrap())
}

fn hub(joints: usize) -> Skeleton {
    let parents: Vec<i64> = (0..joints as i64).map(|j| j.min(1) - 1).collect();
    let offsets = (0..joints)
        .map(|j| if j == 0 { [0.0; 3] } else { [1.0, 0.5, 0.0] })
        .collect();
    Skeleton::new(&parents, offsets).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthetic_data_is_deterministic_unimodal_and_unit_norm(seed in 0u64..1000, modes in 1usize..5) {
        let spec = SyntheticSpec {
            seed,
            num_modes: modes,
            num_families: 3,
            samples_per_family: 4,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic_dataset(&spec).unwrap();
        let b = generate_synthetic_dataset(&spec).unwrap();
        let text = |d: &stochseq::seqdata::DatasetSplit| {
            d.all().map(|s| s.to_text()).collect::<String>()
        };
        prop_assert_eq!(text(&a), text(&b));
        let mut futures: HashMap<String, String> = HashMap::new();
        for s in a.all() {
            let key = format!("{:?}", s.observed.to_flat());
            let fut = format!("{:?}", s.future.to_flat());
            if let Some(prev) = futures.insert(key, fut.clone()) {
                prop_assert_eq!(prev, fut);
            }
            for q in s.observed.frames.iter().chain(&s.future.frames).flat_map(|p| &p.rotations) {
                prop_assert!((q.norm() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fk_ignores_quaternion_sign(p in pose(4), flips in prop::collection::vec(any::<bool>(), 4)) {
        let skel = hub(4);
        let mut q = p.clone();
        for (r, f) in q.rotations.iter_mut().zip(&flips) {
            if *f {
                *r = r.neg();
            }
        }
        let a = forward_kinematics(&skel, &p).unwrap();
        let b = forward_kinematics(&skel, &q).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for c in 0..3 {
                prop_assert!((x[c] - y[c]).abs() < 1e-12);
            }
        }
        let once = align_root(&p);
        prop_assert_eq!(align_root(&once), once);
    }

    #[test]
    fn identity_chain_positions(n in 1usize..12) {
        let skel = Skeleton::chain(n, [1.0, 0.0, 0.0]);
        let pos = forward_kinematics(&skel, &Pose::identity(n)).unwrap();
        // the root sits at the origin and joint k one unit further along x
        for (k, p) in pos.iter().enumerate() {
            prop_assert_eq!(*p, [k as f64, 0.0, 0.0]);
        }
    }

    #[test]
    fn anticipation_losses_nonnegative_and_zero_when_perfect(
        pred in prediction(5, 3),
        label in 0usize..3,
    ) {
        let sched = [
            WeightSchedule::Linear,
            WeightSchedule::DRIVING,
            WeightSchedule::Exponential,
            WeightSchedule::ConstantLastFrame,
        ];
        for s in sched {
            prop_assert!(anticipation_loss(&pred, label, s).unwrap() >= 0.0);
        }
        for l in [ce_loss(&pred, label), ece_loss(&pred, label), lgl_loss(&pred, label)] {
            prop_assert!(l.unwrap() >= 0.0);
        }
        let mut onehot = Array2::zeros((5, 3));
        onehot.column_mut(label).fill(1.0);
        let perfect = PredictionSequence::new(onehot).unwrap();
        // clamping at ε leaves a residue of order ε
        prop_assert!(anticipation_loss(&perfect, label, WeightSchedule::Linear).unwrap() < 10.0 * PROB_EPS);
        prop_assert!(ce_loss(&perfect, label).unwrap() < 10.0 * PROB_EPS);
    }

    #[test]
    fn ours_and_lgl_differ_only_in_the_weighted_term(pred in prediction(6, 4), label in 0usize..4) {
        let p = pred.probs();
        let (t_len, n) = p.dim();
        let (mut fn_sum, mut fp_w, mut fn_w) = (0.0, 0.0, 0.0);
        for t in 0..t_len {
            let w = (t + 1) as f64 / t_len as f64;
            for k in 0..n {
                let v = p[[t, k]].clamp(PROB_EPS, 1.0 - PROB_EPS);
                if k == label {
                    fn_sum += v.ln();
                    fn_w += w * v.ln();
                } else {
                    fp_w += w * (1.0 - v).ln();
                }
            }
        }
        let ours = anticipation_loss(&pred, label, WeightSchedule::Linear).unwrap();
        let lgl = lgl_loss(&pred, label).unwrap();
        prop_assert!((ours - (-(fn_sum + fp_w) / n as f64)).abs() < 1e-10);
        prop_assert!((lgl - (-(fn_w + fp_w))).abs() < 1e-10);
    }

    #[test]
    fn pose_losses_nonnegative_and_zero_at_gt(a in sequence(3, 4), b in sequence(3, 4)) {
        let skel = hub(3);
        prop_assert!(rot_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(skl_loss(&a, &b, &skel).unwrap() >= 0.0);
        prop_assert_eq!(rot_loss(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(skl_loss(&a, &a, &skel).unwrap(), 0.0);
    }

    #[test]
    fn linear_and_sigmoid_weights_are_monotone(len in 1usize..40, alpha in 0.1f64..5.0, beta in -5.0f64..10.0) {
        for s in [WeightSchedule::Linear, WeightSchedule::Sigmoid { alpha, beta }] {
            let w = s.weights(len);
            prop_assert!(w.windows(2).all(|p| p[1] >= p[0]));
            prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn lcp_kl_is_the_general_kl_of_the_composition(post in gaussian(5), cond in gaussian(5)) {
        let composed = GaussianParams::new(
            (0..5).map(|j| post.mu[j] + post.sigma[j] * cond.mu[j]).collect(),
            (0..5).map(|j| post.sigma[j] * cond.sigma[j]).collect(),
        ).unwrap();
        let want = gaussian_kl_general(&composed, &cond).unwrap();
        prop_assert!((lcp_kl(&post, &cond).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn resample_roles_swap_with_the_mask(
        seed in 0u64..1000,
        len in 1usize..40,
        alpha in 0.0f64..=1.0,
        c in 0usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let curr = CurriculumState { c, ..CurriculumState::new(len, alpha, 100) };
        let mask = sample_mask(len, alpha, &mut rng, &curr).unwrap();
        prop_assert_eq!(mask.sampled.len(), sampled_count(len, alpha));
        let a: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..len).map(|i| -(i as f64) - 1.0).collect();
        prop_assert_eq!(
            resample(&b, &a, &mask).unwrap(),
            resample(&a, &b, &mask.inverted()).unwrap()
        );
        prop_assert_eq!(resample(&a, &a, &mask).unwrap(), a.clone());
        prop_assert_eq!(&mask.inverted().inverted().sampled, &mask.sampled);
    }

    #[test]
    fn reparameterization_is_a_pure_function(p in gaussian(4), eps in prop::collection::vec(-3.0f64..3.0, 4)) {
        prop_assert_eq!(reparameterize(&p, &eps).unwrap(), reparameterize(&p, &eps).unwrap());
        let zc = reparameterize(&p, &eps).unwrap();
        prop_assert_eq!(extended_reparameterize(&p, &zc).unwrap(), extended_reparameterize(&p, &zc).unwrap());
    }

    #[test]
    fn decoder_outputs_unit_quaternions(seed in 0u64..500, p_tf in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = stochseq::graph::ParamSet::new();
        let dec = PoseDecoder::new(&mut ps, "dec", CellKind::Gru, 2, 5, &mut rng);
        let mut g = Graph::with_params(&ps);
        let h = g.constant(Array2::from_shape_fn((3, 5), |_| StandardNormal.sample(&mut rng)));
        let seed_pose = g.constant(Array2::from_shape_fn((3, 8), |(_, c)| if c % 4 == 0 { 1.0 } else { 0.0 }));
        let gt: Vec<_> = (0..4).map(|_| seed_pose).collect();
        let out = decode_sequence(&mut g, &dec, h, seed_pose, 4, p_tf, &mut rng, Some(&gt)).unwrap();
        prop_assert_eq!(out.len(), 4);
        for f in out {
            let v = g.value(f);
            for r in 0..3 {
                for j in 0..2 {
                    let n: f64 = (0..4).map(|c| v[[r, 4 * j + c]].powi(2)).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pooling_stays_on_the_simplex(pred in prediction(7, 3), t in 1usize..=7) {
        let v = temporal_average_pool(pred.probs(), t).unwrap();
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn fusion_output_width_ignores_modality_count(m in 2usize..6, hidden in 1usize..6, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = stochseq::graph::ParamSet::new();
        let fusion = MmLstmFusion::new(&mut ps, m, hidden, &mut rng).unwrap();
        let mut g = Graph::with_params(&ps);
        let hs: Vec<_> = (0..m)
            .map(|_| g.constant(Array2::from_shape_fn((2, hidden), |_| StandardNormal.sample(&mut rng))))
            .collect();
        let out = mm_lstm_fuse(&mut g, &fusion, &hs, None).unwrap();
        prop_assert_eq!(g.shape(out.fused), (2, hidden));
        prop_assert_eq!(out.stacked.len(), m + 1);
    }

    #[test]
    fn cam_is_linear(vals in prop::collection::vec(0.0f64..3.0, 2 * 3 * 2), w in prop::collection::vec(-1.0f64..1.0, 4), a in 0.0f64..5.0) {
        let fm = FeatureMap::new(ndarray::Array3::from_shape_vec((2, 3, 2), vals).unwrap()).unwrap();
        let cw = ClassWeights::new(Array2::from_shape_vec((2, 2), w).unwrap()).unwrap();
        for k in 0..2 {
            let lhs = cam_map(&fm.scaled(a).unwrap(), &cw, k).unwrap();
            let rhs = cam_map(&fm, &cw, k).unwrap() * a;
            prop_assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn diversity_permutation_and_scale(samples in prop::collection::vec(sequence(2, 3), 2..6), scale in 0.1f64..4.0, rot in 0usize..6) {
        let base = diversity(&SampleSet::new(0, samples.clone(), None, None).unwrap()).unwrap();
        let mut shuffled = samples.clone();
        let k = shuffled.len();
        shuffled.rotate_left(rot % k);
        shuffled.swap(0, k - 1);
        let perm = diversity(&SampleSet::new(0, shuffled, None, None).unwrap()).unwrap();
        prop_assert!((base - perm).abs() < 1e-12);
        let scaled: Vec<PoseSequence> = samples
            .iter()
            .map(|s| PoseSequence::from_flat(2, &s.to_flat().iter().map(|v| v * scale).collect::<Vec<_>>()))
            .collect();
        let d = diversity(&SampleSet::new(0, scaled, None, None).unwrap()).unwrap();
        prop_assert!((d - scale * base).abs() < 1e-9 * (1.0 + base * scale));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn best_of_k_shrinks_on_supersets(samples in prop::collection::vec(sequence(2, 3), 1..8), gt in sequence(2, 3), cut in 1usize..8) {
        let cut = cut.min(samples.len());
        let set = |s: &[PoseSequence]| SampleSet::new(0, s.to_vec(), Some(gt.clone()), None).unwrap();
        for m in [ErrorMetric::EulerAngle, ErrorMetric::Raw] {
            let sub = best_of_k_error(&set(&samples[..cut]), m).unwrap();
            let all = best_of_k_error(&set(&samples), m).unwrap();
            prop_assert!(all <= sub);
        }
    }

    #[test]
    fn inception_score_is_bounded(rows in prop::collection::vec(prediction(1, 4), 1..20)) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|p| p.probs().row(0).to_vec()).collect();
        let is = inception_score(&probs);
        prop_assert!((1.0..=4.0).contains(&is));
    }
}

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov distribution tail `P(K > λ)`.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        p += 2.0 * (-1.0f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn extended_reparameterization_marginals_pass_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for set in 0..5 {
        let dim = 3;
        let post = GaussianParams::new(
            (0..dim).map(|j| 0.5 * j as f64 - 0.7 + 0.1 * set as f64).collect(),
            (0..dim).map(|j| 0.4 + 0.3 * j as f64).collect(),
        )
        .unwrap();
        let cond = GaussianParams::new(
            (0..dim).map(|j| 1.0 - 0.6 * j as f64).collect(),
            (0..dim).map(|j| 1.5 - 0.4 * j as f64 + 0.05 * set as f64).collect(),
        )
        .unwrap();
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let zc = reparameterize(&cond, &eps).unwrap();
                extended_reparameterize(&post, &zc).unwrap()
            })
            .collect();
        for j in 0..dim {
            let law = Normal::new(
                post.mu[j] + post.sigma[j] * cond.mu[j],
                post.sigma[j] * cond.sigma[j],
            )
            .unwrap();
            let d = ks_statistic(draws.iter().map(|z| z[j]).collect(), |x| law.cdf(x));
            let p = ks_p_value(d, n);
            assert!(p > 0.01, "set {set} dim {j}: D = {d}, p = {p}");
        }
    }
}

#[test]
fn ks_rejects_a_shifted_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs: Vec<f64> = (0..10_000)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 + z
        })
        .collect();
    let law = Normal::new(0.0, 1.0).unwrap();
    assert!(ks_p_value(ks_statistic(xs, |x| law.cdf(x)), 10_000) < 0.01);
}
