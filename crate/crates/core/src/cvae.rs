//! Conditioning schemes for sequence CVAEs: concatenation, additive
//! projection, Mix-and-Match and the learned conditional prior (CS-VAE
//! feeding LCP-VAE through the extended reparameterization), plus the
//! motion model that wires them to recurrent encoders/decoders and its
//! checkpoint format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamSet, Tensor, Var};
use crate::kinematics::{PoseSequence, Quaternion, Skeleton};
use crate::losses::{
    composite_motion_loss, kl_standard_var, lcp_kl_var, rot_loss_var, skl_loss_var, LossBreakdown,
    MotionTerms,
};
use crate::nn::{clip_global_norm, Adam, Cell, CellKind, Linear};
use crate::perturb::{resample_var, sample_mask, sampled_count, CurriculumState, IndexMask};
use crate::recnet::{
    decode_sequence, encode_sequence, frames_to_tensors, tensors_to_sequences, PoseDecoder,
};

/// Lower bound added to every standard deviation head.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian `N(μ, diag σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::ShapeMismatch(format!(
                "mu has {} entries, sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidParameter("sigma must be positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_dims(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// `z = μ + σ⊙ε`.
pub fn reparameterize(p: &GaussianParams, eps: &[f64]) -> Result<Vec<f64>> {
    check_dims("noise dimension", p.dim(), eps.len())?;
    Ok(p.mu
        .iter()
        .zip(&p.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// `z = μ + σ⊙z_c`, which for `z_c ~ N(μc, σc²)` is `N(μ + σ⊙μc, (σ⊙σc)²)`.
pub fn extended_reparameterize(p: &GaussianParams, z_c: &[f64]) -> Result<Vec<f64>> {
    check_dims("condition latent dimension", p.dim(), z_c.len())?;
    Ok(p.mu
        .iter()
        .zip(&p.sigma)
        .zip(z_c)
        .map(|((m, s), z)| m + s * z)
        .collect())
}

/// `h + W z` with `W` of shape `L×d`.
pub fn additive_projection_perturb(h: &[f64], z: &[f64], w: &Array2<f64>) -> Result<Vec<f64>> {
    check_dims("projection rows", w.nrows(), h.len())?;
    check_dims("projection cols", w.ncols(), z.len())?;
    Ok(h.iter()
        .zip(w.rows())
        .map(|(hi, row)| hi + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
        .collect())
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// How the condition enters the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningScheme {
    Concat,
    AdditiveProjection,
    MixAndMatch { alpha: f64 },
    Lcp,
}

impl ConditioningScheme {
    /// Command-line name.
    pub fn name(&self) -> &'static str {
        match self {
            ConditioningScheme::Concat => "concat",
            ConditioningScheme::AdditiveProjection => "addproj",
            ConditioningScheme::MixAndMatch { .. } => "mnm",
            ConditioningScheme::Lcp => "lcp",
        }
    }

    pub fn parse(name: &str, alpha: f64) -> Result<Self> {
        match name {
            "concat" => Ok(ConditioningScheme::Concat),
            "addproj" => Ok(ConditioningScheme::AdditiveProjection),
            "mnm" => {
                if !(0.0..1.0).contains(&alpha) {
                    return Err(Error::InvalidParameter(format!(
                        "mix-and-match alpha {alpha} outside [0,1)"
                    )));
                }
                Ok(ConditioningScheme::MixAndMatch { alpha })
            }
            "lcp" => Ok(ConditioningScheme::Lcp),
            other => Err(Error::InvalidParameter(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Graph-side Gaussian heads, each `B×d`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    pub fn row(&self, g: &Graph, r: usize) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).row(r).to_vec(),
            sigma: g.value(self.sigma).row(r).to_vec(),
        }
    }
}

pub fn reparameterize_var(g: &mut Graph, p: &GaussianVars, eps: Var) -> Var {
    let se = g.mul(p.sigma, eps);
    g.add(p.mu, se)
}

pub fn extended_reparameterize_var(g: &mut Graph, p: &GaussianVars, z_c: Var) -> Var {
    reparameterize_var(g, p, z_c)
}

/// Encoder `x → ReLU embedding → (μ, softplus σ)` and decoder `tanh(FC)`.
#[derive(Debug, Clone)]
pub struct VaeBundle {
    pub embed: Linear,
    pub mu: Linear,
    pub sigma: Linear,
    pub decoder: Linear,
    pub latent: usize,
}

impl VaeBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        embed: usize,
        latent: usize,
        decoder_input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            embed: Linear::new(ps, &format!("{name}.embed"), input, embed, rng),
            mu: Linear::new(ps, &format!("{name}.mu"), embed, latent, rng),
            sigma: Linear::new(ps, &format!("{name}.sigma"), embed, latent, rng),
            decoder: Linear::new(ps, &format!("{name}.decoder"), decoder_input, output, rng),
            latent,
        }
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> GaussianVars {
        let e = self.embed.forward(g, x);
        let e = g.relu(e);
        let mu = self.mu.forward(g, e);
        let s = self.sigma.forward(g, e);
        let s = g.softplus(s);
        let sigma = g.add_scalar(s, SIGMA_FLOOR);
        GaussianVars { mu, sigma }
    }

    pub fn decode(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.decoder.forward(g, x);
        g.tanh(y)
    }
}

fn ensure_finite(g: &Graph, vars: &[Var], what: &str) -> Result<()> {
    if vars
        .iter()
        .any(|&v| g.value(v).iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Condition posterior, its sample and the decoded condition representation.
#[derive(Debug, Clone, Copy)]
pub struct CsOutput {
    pub params: GaussianVars,
    pub z_c: Var,
    pub reconstruction: Var,
}

pub fn cs_vae_forward(
    g: &mut Graph,
    condition: Var,
    bundle: &VaeBundle,
    rng: &mut impl Rng,
) -> Result<CsOutput> {
    let params = bundle.encode(g, condition);
    let (rows, d) = g.shape(params.mu);
    let eps = g.constant(standard_normal(rng, rows, d));
    let z_c = reparameterize_var(g, &params, eps);
    let reconstruction = bundle.decode(g, z_c);
    ensure_finite(
        g,
        &[params.mu, params.sigma, reconstruction],
        "condition VAE",
    )?;
    Ok(CsOutput {
        params,
        z_c,
        reconstruction,
    })
}

/// Data posterior composed with the condition posterior.
#[derive(Debug, Clone, Copy)]
pub struct LcpOutput {
    pub params: GaussianVars,
    pub z: Var,
    pub reconstruction: Var,
    /// KL of the condition posterior to `N(0, I)`.
    pub kl_cs: Var,
    /// KL of the composed posterior to the (frozen) condition posterior.
    pub kl_lcp: Var,
}

/// Values of the condition posterior that the data VAE treats as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCondition {
    pub z_c: Tensor,
    pub mu_c: Tensor,
    pub sigma_c: Tensor,
}

/// Encodes `[data ‖ condition]`, samples `z = μ + σ⊙z_c` and decodes `z` alone.
/// The condition-side quantities enter as constants so no gradient reaches
/// the condition VAE through this path.
pub fn lcp_vae_forward(
    g: &mut Graph,
    data: Var,
    condition: Var,
    cs: Option<&CsOutput>,
    bundle: &VaeBundle,
) -> Result<LcpOutput> {
    lcp_vae_forward_frozen(g, data, condition, cs, bundle, None)
}

/// [`lcp_vae_forward`] with the constant condition-side values supplied
/// explicitly instead of copied from `cs`. Finite-difference checks use this
/// to hold the stop-gradient inputs fixed while parameters move.
pub fn lcp_vae_forward_frozen(
    g: &mut Graph,
    data: Var,
    condition: Var,
    cs: Option<&CsOutput>,
    bundle: &VaeBundle,
    frozen: Option<&FrozenCondition>,
) -> Result<LcpOutput> {
    let cs = cs.ok_or_else(|| Error::MissingInput("condition VAE outputs".into()))?;
    let x = g.concat(&[data, condition]);
    let params = bundle.encode(g, x);
    let (z_c, mu_c, sigma_c) = match frozen {
        Some(f) => (
            g.constant(f.z_c.clone()),
            g.constant(f.mu_c.clone()),
            g.constant(f.sigma_c.clone()),
        ),
        None => (
            g.detach(cs.z_c),
            g.detach(cs.params.mu),
            g.detach(cs.params.sigma),
        ),
    };
    let z = extended_reparameterize_var(g, &params, z_c);
    let reconstruction = bundle.decode(g, z);
    let kl_cs = kl_standard_var(g, cs.params.mu, cs.params.sigma);
    let kl_lcp = lcp_kl_var(g, params.mu, params.sigma, mu_c, sigma_c);
    ensure_finite(g, &[params.mu, params.sigma, reconstruction], "data VAE")?;
    Ok(LcpOutput {
        params,
        z,
        reconstruction,
        kl_cs,
        kl_lcp,
    })
}

/// Architecture of a [`MotionModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    pub scheme: ConditioningScheme,
    pub joints: usize,
    pub obs_len: usize,
    pub fut_len: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Latent width; Mix-and-Match derives it from `alpha` instead.
    pub latent: usize,
    pub cell: CellKind,
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.hidden == 0 || self.embed == 0 || self.latent == 0 {
            return Err(Error::InvalidSpec(
                "model dimensions must be positive".into(),
            ));
        }
        if self.obs_len < 2 || self.fut_len == 0 {
            return Err(Error::InvalidSpec(
                "need at least 2 observed and 1 future frame".into(),
            ));
        }
        if let ConditioningScheme::MixAndMatch { alpha } = self.scheme {
            let k = sampled_count(self.hidden, alpha);
            if k == 0 || k == self.hidden {
                return Err(Error::InvalidSpec(format!(
                    "alpha {alpha} leaves no room on one side of a {}-wide hidden state",
                    self.hidden
                )));
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        match self.scheme {
            ConditioningScheme::MixAndMatch { alpha } => {
                self.hidden - sampled_count(self.hidden, alpha)
            }
            _ => self.latent,
        }
    }
}

#[derive(Debug, Clone)]
enum SchemeModules {
    Concat {
        vae: VaeBundle,
    },
    AdditiveProjection {
        proj: Linear,
    },
    MixAndMatch {
        alpha: f64,
        vae: VaeBundle,
        res1: Linear,
        res2: Linear,
        shortcut: Linear,
    },
    Lcp {
        cs: VaeBundle,
        cs_decoder: PoseDecoder,
        lcp: VaeBundle,
    },
}

/// Per-step training knobs.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub p_tf: f64,
    pub lambda: f64,
    pub curriculum: CurriculumState,
    pub clip_norm: f64,
}

/// Losses and diagnostics of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub mask: Option<Vec<usize>>,
}

/// Objective of one batch, before backpropagation.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub total: Var,
    pub loss: LossBreakdown,
    pub mask: Option<IndexMask>,
    /// Constant condition-side values used by the learned-prior scheme.
    pub frozen: Option<FrozenCondition>,
}

/// Observed and future frames of a batch, each `B×4J` per frame.
#[derive(Debug, Clone)]
pub struct MotionBatch {
    pub observed: Vec<Tensor>,
    pub future: Vec<Tensor>,
}

impl MotionBatch {
    pub fn new(observed: &[&PoseSequence], future: &[&PoseSequence]) -> Result<Self> {
        if observed.len() != future.len() || observed.is_empty() {
            return Err(Error::ShapeMismatch(
                "batch needs matching non-empty observed and future lists".into(),
            ));
        }
        Ok(Self {
            observed: frames_to_tensors(observed),
            future: frames_to_tensors(future),
        })
    }

    pub fn size(&self) -> usize {
        self.observed[0].nrows()
    }
}

/// Sequence-to-sequence CVAE for motion continuation.
#[derive(Debug, Clone)]
pub struct MotionModel {
    pub config: MotionConfig,
    pub skeleton: Arc<Skeleton>,
    pub params: ParamSet,
    encoder: Cell,
    decoder: PoseDecoder,
    modules: SchemeModules,
}

struct Encoded {
    h_t: Var,
    h_full: Option<Var>,
    seed: Var,
}

impl MotionModel {
    pub fn new(config: MotionConfig, skeleton: Skeleton, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if skeleton.joint_count() != config.joints {
            return Err(Error::InvalidSpec(format!(
                "skeleton has {} joints, model {}",
                skeleton.joint_count(),
                config.joints
            )));
        }
        let mut ps = ParamSet::new();
        let (l, e, j) = (config.hidden, config.embed, config.joints);
        let d = config.latent_dim();
        let encoder = Cell::new(config.cell, &mut ps, "encoder", 4 * j, l, rng);
        let decoder = PoseDecoder::new(&mut ps, "decoder", config.cell, j, l, rng);
        let modules = match config.scheme {
            ConditioningScheme::Concat => SchemeModules::Concat {
                vae: VaeBundle::new(&mut ps, "vae", 2 * l, e, d, l + d, l, rng),
            },
            ConditioningScheme::AdditiveProjection => SchemeModules::AdditiveProjection {
                proj: Linear::without_bias(&mut ps, "proj", d, l, rng),
            },
            ConditioningScheme::MixAndMatch { alpha } => {
                let k = sampled_count(l, alpha);
                SchemeModules::MixAndMatch {
                    alpha,
                    vae: VaeBundle::new(&mut ps, "vae", l, e, d, l, l, rng),
                    res1: Linear::new(&mut ps, "res1", l, l, rng),
                    res2: Linear::new(&mut ps, "res2", l, k, rng),
                    shortcut: Linear::without_bias(&mut ps, "shortcut", l, k, rng),
                }
            }
            ConditioningScheme::Lcp => SchemeModules::Lcp {
                cs: VaeBundle::new(&mut ps, "cs", l, e, d, d, l, rng),
                cs_decoder: PoseDecoder::new(&mut ps, "cs_decoder", config.cell, j, l, rng),
                lcp: VaeBundle::new(&mut ps, "lcp", 2 * l, e, d, d, l, rng),
            },
        };
        Ok(Self {
            config,
            skeleton: Arc::new(skeleton),
            params: ps,
            encoder,
            decoder,
            modules,
        })
    }

    fn encode(
        &self,
        g: &mut Graph,
        observed: &[Tensor],
        future: Option<&[Tensor]>,
    ) -> (Encoded, Vec<Var>, Vec<Var>) {
        let obs: Vec<Var> = observed.iter().map(|t| g.constant(t.clone())).collect();
        let state = encode_sequence(g, &self.encoder, &obs, None);
        let fut: Vec<Var> = future
            .map(|f| f.iter().map(|t| g.constant(t.clone())).collect())
            .unwrap_or_default();
        let h_full =
            (!fut.is_empty()).then(|| encode_sequence(g, &self.encoder, &fut, Some(state)).h);
        let seed = *obs.last().expect("observed frames");
        (
            Encoded {
                h_t: state.h,
                h_full,
                seed,
            },
            obs,
            fut,
        )
    }

    /// Mix-and-Match fusion: `h_t` on the sampled set, the latent on the
    /// complement, a residual block reducing the mix to the sampled width
    /// and written back onto the sampled set, then `h_t` on the complement.
    /// The shortcut is a learned projection; an identity copy of `h_t` would
    /// let the decoder bypass the perturbation.
    fn mnm_decode_init(&self, g: &mut Graph, h_t: Var, z: Var, mask: &IndexMask) -> Var {
        let SchemeModules::MixAndMatch {
            vae,
            res1,
            res2,
            shortcut,
            ..
        } = &self.modules
        else {
            unreachable!("mix-and-match modules")
        };
        let l = self.config.hidden;
        let keep = g.constant(mask.indicator());
        let kept = g.mul(h_t, keep);
        let p_out = g.constant(IndexMask::scatter_matrix(&mask.complement, l));
        let z_full = g.matmul(z, p_out);
        let v = g.add(kept, z_full);
        let a = res1.forward(g, v);
        let a = g.relu(a);
        let b = res2.forward(g, a);
        let skip = shortcut.forward(g, v);
        let r = g.add(b, skip);
        let p_in = g.constant(IndexMask::scatter_matrix(&mask.sampled, l));
        let r_full = g.matmul(r, p_in);
        let other = g.constant(mask.indicator().mapv(|x| 1.0 - x));
        let rest = g.mul(h_t, other);
        let fused = g.add(r_full, rest);
        vae.decode(g, fused)
    }

    fn reconstruction(&self, g: &mut Graph, pred: &[Var], gt: &[Var]) -> (Var, Var) {
        let rot = rot_loss_var(g, pred, gt);
        let skl = skl_loss_var(g, pred, gt, &self.skeleton);
        (rot, skl)
    }

    /// Builds the training objective for `batch` on `g`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        batch: &MotionBatch,
        opts: &StepOptions,
        rng: &mut impl Rng,
    ) -> Result<TrainOutput> {
        self.forward_train_frozen(g, batch, opts, rng, None)
    }

    /// [`MotionModel::forward_train`] with the learned-prior stop-gradient
    /// inputs pinned to `frozen` (ignored by the other schemes).
    pub fn forward_train_frozen(
        &self,
        g: &mut Graph,
        batch: &MotionBatch,
        opts: &StepOptions,
        rng: &mut impl Rng,
        frozen: Option<&FrozenCondition>,
    ) -> Result<TrainOutput> {
        let (enc, obs, fut) = self.encode(g, &batch.observed, Some(&batch.future));
        let h_full = enc.h_full.expect("future frames");
        let rows = batch.size();
        let mut mask_used = None;
        let mut frozen_used = None;
        let (init, kl, lcp_parts) = match &self.modules {
            SchemeModules::Concat { vae } => {
                let x = g.concat(&[enc.h_t, h_full]);
                let q = vae.encode(g, x);
                let eps = g.constant(standard_normal(rng, rows, vae.latent));
                let z = reparameterize_var(g, &q, eps);
                let dx = g.concat(&[enc.h_t, z]);
                let kl = kl_standard_var(g, q.mu, q.sigma);
                (vae.decode(g, dx), Some(kl), None)
            }
            SchemeModules::AdditiveProjection { proj } => {
                let z = g.constant(standard_normal(rng, rows, self.config.latent));
                let wz = proj.forward(g, z);
                (g.add(enc.h_t, wz), None, None)
            }
            SchemeModules::MixAndMatch { alpha, vae, .. } => {
                let mask = sample_mask(self.config.hidden, *alpha, rng, &opts.curriculum)?;
                let x = resample_var(g, enc.h_t, h_full, &mask);
                let q = vae.encode(g, x);
                let eps = g.constant(standard_normal(rng, rows, vae.latent));
                let z = reparameterize_var(g, &q, eps);
                let init = self.mnm_decode_init(g, enc.h_t, z, &mask);
                let kl = kl_standard_var(g, q.mu, q.sigma);
                mask_used = Some(mask);
                (init, Some(kl), None)
            }
            SchemeModules::Lcp {
                cs,
                cs_decoder,
                lcp,
            } => {
                let cs_out = cs_vae_forward(g, enc.h_t, cs, rng)?;
                let ident = g.constant(identity_rows(rows, self.config.joints));
                let past = decode_sequence(
                    g,
                    cs_decoder,
                    cs_out.reconstruction,
                    ident,
                    self.config.obs_len,
                    opts.p_tf,
                    rng,
                    Some(&obs),
                )?;
                let (rot_cs, skl_cs) = self.reconstruction(g, &past, &obs);
                let rec_cs = g.add(rot_cs, skl_cs);
                let out = lcp_vae_forward_frozen(g, h_full, enc.h_t, Some(&cs_out), lcp, frozen)?;
                frozen_used = Some(match frozen {
                    Some(f) => f.clone(),
                    None => FrozenCondition {
                        z_c: g.value(cs_out.z_c).clone(),
                        mu_c: g.value(cs_out.params.mu).clone(),
                        sigma_c: g.value(cs_out.params.sigma).clone(),
                    },
                });
                (
                    out.reconstruction,
                    None,
                    Some((rec_cs, out.kl_cs, out.kl_lcp)),
                )
            }
        };
        let pred = decode_sequence(
            g,
            &self.decoder,
            init,
            enc.seed,
            self.config.fut_len,
            opts.p_tf,
            rng,
            Some(&fut),
        )?;
        let (rot, skl) = self.reconstruction(g, &pred, &fut);
        let terms = match lcp_parts {
            Some((rec_cs, kl_cs, kl_lcp)) => {
                let rec_lcp = g.add(rot, skl);
                MotionTerms::Lcp {
                    rec_cs,
                    rec_lcp,
                    kl_cs,
                    kl_lcp,
                }
            }
            None => MotionTerms::Standard { rot, skl, kl },
        };
        let (total, report) = composite_motion_loss(g, terms, opts.lambda);
        Ok(TrainOutput {
            total,
            loss: report,
            mask: mask_used,
            frozen: frozen_used,
        })
    }

    /// One optimizer step on `batch`.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        batch: &MotionBatch,
        opts: &StepOptions,
        rng: &mut impl Rng,
    ) -> Result<StepReport> {
        let mut g = Graph::with_params(&self.params);
        let TrainOutput {
            total, loss, mask, ..
        } = self.forward_train(&mut g, batch, opts, rng)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = g.backward(total);
        let mut grads = grads.params(&self.params);
        let grad_norm = clip_global_norm(&mut grads, opts.clip_norm);
        adam.update(&mut self.params, &grads);
        Ok(StepReport {
            loss,
            grad_norm,
            mask: mask.map(|m| m.sampled),
        })
    }

    fn decode_from(
        &self,
        g: &mut Graph,
        init: Var,
        seed: Var,
        rng: &mut impl Rng,
    ) -> Result<Vec<PoseSequence>> {
        let frames = decode_sequence(
            g,
            &self.decoder,
            init,
            seed,
            self.config.fut_len,
            0.0,
            rng,
            None,
        )?;
        let values: Vec<&Tensor> = frames.iter().map(|&f| g.value(f)).collect();
        tensors_to_sequences(&values, self.config.joints)
    }

    /// Draws `k` futures for each observed prefix; result is per condition.
    pub fn sample(
        &self,
        observed: &[&PoseSequence],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<PoseSequence>>> {
        if k == 0 || observed.is_empty() {
            return Ok(vec![Vec::new(); observed.len()]);
        }
        let repeated: Vec<&PoseSequence> = observed
            .iter()
            .flat_map(|s| std::iter::repeat_n(*s, k))
            .collect();
        self.check_observed(&repeated)?;
        let rows = repeated.len();
        let mut g = Graph::with_params(&self.params);
        let (enc, _, _) = self.encode(&mut g, &frames_to_tensors(&repeated), None);
        let init = match &self.modules {
            SchemeModules::Concat { vae } => {
                let z = g.constant(standard_normal(rng, rows, vae.latent));
                let dx = g.concat(&[enc.h_t, z]);
                vae.decode(&mut g, dx)
            }
            SchemeModules::AdditiveProjection { proj } => {
                let z = g.constant(standard_normal(rng, rows, self.config.latent));
                let wz = proj.forward(&mut g, z);
                g.add(enc.h_t, wz)
            }
            SchemeModules::MixAndMatch { alpha, .. } => {
                let st = CurriculumState::fully_random(self.config.hidden, *alpha);
                return self.sample_mnm(observed, k, &st, rng);
            }
            SchemeModules::Lcp { cs, lcp, .. } => {
                let cs_out = cs_vae_forward(&mut g, enc.h_t, cs, rng)?;
                lcp.decode(&mut g, cs_out.z_c)
            }
        };
        let seqs = self.decode_from(&mut g, init, enc.seed, rng)?;
        Ok(seqs.chunks(k).map(|c| c.to_vec()).collect())
    }

    /// Like [`MotionModel::sample`], but Mix-and-Match masks follow `curriculum`
    /// instead of being fully random. Used for curves over training, where a
    /// checkpoint is sampled the way it is being trained. Other schemes ignore
    /// the argument.
    pub fn sample_with_curriculum(
        &self,
        observed: &[&PoseSequence],
        k: usize,
        curriculum: &CurriculumState,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<PoseSequence>>> {
        match self.modules {
            SchemeModules::MixAndMatch { .. } if k > 0 && !observed.is_empty() => {
                self.check_observed(observed)?;
                self.sample_mnm(observed, k, curriculum, rng)
            }
            _ => self.sample(observed, k, rng),
        }
    }

    /// Every one of the `k` draws gets its own mask, shared across conditions.
    fn sample_mnm(
        &self,
        observed: &[&PoseSequence],
        k: usize,
        st: &CurriculumState,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<PoseSequence>>> {
        let SchemeModules::MixAndMatch { alpha, vae, .. } = &self.modules else {
            unreachable!("mix-and-match modules")
        };
        let frames = frames_to_tensors(observed);
        let mut out = vec![Vec::with_capacity(k); observed.len()];
        for _ in 0..k {
            let mut g = Graph::with_params(&self.params);
            let (enc, _, _) = self.encode(&mut g, &frames, None);
            let mask = sample_mask(self.config.hidden, *alpha, rng, st)?;
            let z = g.constant(standard_normal(rng, observed.len(), vae.latent));
            let init = self.mnm_decode_init(&mut g, enc.h_t, z, &mask);
            for (o, s) in out.iter_mut().zip(self.decode_from(&mut g, init, enc.seed, rng)?) {
                o.push(s);
            }
        }
        Ok(out)
    }

    /// Deterministic future with the latent at its distribution mode.
    pub fn mode_decode(&self, observed: &PoseSequence) -> Result<PoseSequence> {
        self.check_observed(&[observed])?;
        let mut g = Graph::with_params(&self.params);
        let (enc, _, _) = self.encode(&mut g, &frames_to_tensors(&[observed]), None);
        let d = self.config.latent_dim();
        let init = match &self.modules {
            SchemeModules::Concat { vae } => {
                let z = g.constant(Tensor::zeros((1, d)));
                let dx = g.concat(&[enc.h_t, z]);
                vae.decode(&mut g, dx)
            }
            SchemeModules::AdditiveProjection { .. } => enc.h_t,
            SchemeModules::MixAndMatch { alpha, .. } => {
                let mask = IndexMask::prefix(self.config.hidden, *alpha)?;
                let z = g.constant(Tensor::zeros((1, d)));
                self.mnm_decode_init(&mut g, enc.h_t, z, &mask)
            }
            SchemeModules::Lcp { cs, lcp, .. } => {
                let q = cs.encode(&mut g, enc.h_t);
                lcp.decode(&mut g, q.mu)
            }
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self
            .decode_from(&mut g, init, enc.seed, &mut rng)?
            .remove(0))
    }

    fn check_observed(&self, observed: &[&PoseSequence]) -> Result<()> {
        for s in observed {
            if s.joint_count != self.config.joints || s.len() < 1 {
                return Err(Error::ShapeMismatch(format!(
                    "observed sequence {}x{} for a {}-joint model",
                    s.len(),
                    s.joint_count,
                    self.config.joints
                )));
            }
        }
        Ok(())
    }

    /// Total KL at a batch without updating anything (posterior means used).
    pub fn evaluate(
        &self,
        batch: &MotionBatch,
        lambda: f64,
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown> {
        let opts = StepOptions {
            p_tf: 0.0,
            lambda,
            curriculum: match self.config.scheme {
                ConditioningScheme::MixAndMatch { alpha } => {
                    CurriculumState::fully_random(self.config.hidden, alpha)
                }
                _ => CurriculumState::fully_random(1, 0.0),
            },
            clip_norm: f64::INFINITY,
        };
        let mut g = Graph::with_params(&self.params);
        Ok(self.forward_train(&mut g, batch, &opts, rng)?.loss)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: "motion_cvae".into(),
                config: serde_json::to_value(&self.config).expect("serializable config"),
                skeleton: self.skeleton.to_text(),
                extra,
                tensors: Vec::new(),
            },
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.model != "motion_cvae" {
            return Err(Error::Checkpoint(format!(
                "not a motion model: {}",
                ck.meta.model
            )));
        }
        let config: MotionConfig = serde_json::from_value(ck.meta.config.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let skel = Skeleton::parse(&ck.meta.skeleton)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, skel, &mut rng)?;
        model
            .params
            .assign_from(&ck.params)
            .map_err(Error::Checkpoint)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck.meta.extra))
    }
}

fn identity_rows(rows: usize, joints: usize) -> Tensor {
    let mut t = Tensor::zeros((rows, 4 * joints));
    for r in 0..rows {
        for j in 0..joints {
            t[[r, 4 * j]] = Quaternion::IDENTITY.w;
        }
    }
    t
}

const MAGIC: &[u8; 8] = b"SSQCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: String,
    pub config: serde_json::Value,
    pub skeleton: String,
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Parameter tensors plus the metadata needed to rebuild the model.
///
/// Layout: the 8-byte magic `SSQCKPT1`, a little-endian `u64` byte length,
/// that many bytes of JSON metadata, then every tensor's values as
/// little-endian `f64` in row-major order, in metadata order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.tensors = self
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect();
        let json = serde_json::to_vec(&meta).expect("serializable metadata");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + n)
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut pos = 16 + n;
        let mut params = ParamSet::new();
        for e in &meta.tensors {
            let count = e.rows * e.cols;
            let raw = bytes
                .get(pos..pos + 8 * count)
                .ok_or_else(|| bad(&format!("truncated tensor {}", e.name)))?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(
                e.name.clone(),
                Tensor::from_shape_vec((e.rows, e.cols), vals).expect("shape"),
            );
            pos += 8 * count;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
