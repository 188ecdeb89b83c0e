//! Run configuration: a flat `key=value` text file with typed values.
//!
//! Every key has a default. Keys are the field names of [`RunConfig`];
//! `#` starts a comment line. The canonical text written into a run
//! directory lists every key in sorted order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use stochseq::cvae::{ConditioningScheme, MotionConfig};
use stochseq::losses::{AnticipationObjective, WeightSchedule};
use stochseq::metrics::ClassifierArch;
use stochseq::nn::CellKind;
use stochseq::seqdata::{AnticipationSpec, SyntheticSpec};

use crate::anticipate::AnticipationTrainer;

pub const DATA_DIR_ENV: &str = "STOCHSEQ_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Motion,
    Anticipation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// False positives down-weighted by `t/T`.
    Ours,
    Ce,
    Ece,
    Lgl,
    /// [`LossKind::Ours`] with the sigmoid weight `α=3, β=6`.
    Sigmoid,
}

impl LossKind {
    pub fn objective(self) -> AnticipationObjective {
        match self {
            LossKind::Ours => AnticipationObjective::Anticipation(WeightSchedule::Linear),
            LossKind::Sigmoid => AnticipationObjective::Anticipation(WeightSchedule::DRIVING),
            LossKind::Ce => AnticipationObjective::Ce,
            LossKind::Ece => AnticipationObjective::Ece,
            LossKind::Lgl => AnticipationObjective::Lgl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Gru,
    Lstm,
}

impl From<Cell> for CellKind {
    fn from(c: Cell) -> Self {
        match c {
            Cell::Gru => CellKind::Gru,
            Cell::Lstm => CellKind::Lstm,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Syntax {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    // conditioning and objective
    pub scheme: String,
    pub alpha: f64,
    pub loss: LossKind,
    // seeds and paths
    pub seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
    /// Dataset directory; empty means `$STOCHSEQ_DATA_DIR`, or an in-memory
    /// synthetic dataset when that is unset too.
    pub data_dir: String,
    pub out: String,
    // model
    pub hidden: usize,
    pub embed: usize,
    pub latent: usize,
    pub cell: Cell,
    // optimizer and schedules
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Fraction of the run at which the KL weight crosses 0.5.
    pub anneal_fraction: f64,
    /// Fraction of the run over which teacher forcing decays to 0.
    pub tf_fraction: f64,
    /// Fraction of the run after which mixing masks are fully random.
    pub curriculum_fraction: f64,
    // logging
    pub eval_every: u64,
    pub eval_conditions: usize,
    pub checkpoint_every: u64,
    // evaluation
    pub k: usize,
    pub classifier_hidden: usize,
    pub classifier_epochs: usize,
    // synthetic motion data
    pub num_modes: usize,
    pub obs_len: usize,
    pub fut_len: usize,
    pub joints: usize,
    pub noise_std: f64,
    pub families: usize,
    pub samples_per_family: usize,
    pub cue_frames: usize,
    // synthetic anticipation data and its classifier
    pub classes: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub sequences: usize,
    pub late_fraction: f64,
    pub early_strength: f64,
    pub late_strength: f64,
    pub feature_noise: f64,
    pub test_fraction: f64,
    pub epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Motion,
            scheme: "mnm".into(),
            alpha: 0.5,
            loss: LossKind::Ours,
            seed: 0,
            data_seed: 0,
            eval_seed: 0,
            data_dir: String::new(),
            out: "runs/default".into(),
            hidden: 128,
            embed: 64,
            latent: 16,
            cell: Cell::Gru,
            steps: 6000,
            batch: 16,
            lr: 1e-3,
            clip_norm: 5.0,
            anneal_fraction: 0.1,
            tf_fraction: 0.1,
            curriculum_fraction: 0.5,
            eval_every: 300,
            eval_conditions: 32,
            checkpoint_every: 1000,
            k: 10,
            classifier_hidden: 32,
            classifier_epochs: 30,
            num_modes: 4,
            obs_len: 16,
            fut_len: 24,
            joints: 10,
            noise_std: 0.05,
            families: 16,
            samples_per_family: 16,
            cue_frames: 8,
            classes: 4,
            frames: 20,
            feature_dim: 8,
            sequences: 1024,
            late_fraction: 0.3,
            early_strength: 0.3,
            late_strength: 2.0,
            feature_noise: 1.0,
            test_fraction: 0.5,
            epochs: 30,
        }
    }
}

fn to_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("serializable config") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    }
}

/// Converts `raw` to the JSON type of the default value of the same key.
fn typed(key: &str, raw: &str, like: &Value) -> Result<Value, ConfigError> {
    let bad = |msg: &str| ConfigError::BadValue {
        key: key.into(),
        msg: format!("{msg}, got `{raw}`"),
    };
    match like {
        Value::String(_) => Ok(Value::String(raw.into())),
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| bad("expected a non-negative integer")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::from)
            .ok_or_else(|| bad("expected a finite number")),
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::from)
            .map_err(|_| bad("expected true or false")),
        _ => Err(bad("unsupported type")),
    }
}

fn from_map(map: Map<String, Value>) -> Result<RunConfig, ConfigError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError::BadValue {
        key: "?".into(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    /// Applies `key=value` overrides on top of `self`.
    pub fn with_overrides<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, ConfigError> {
        let mut map = to_map(self);
        for (k, v) in pairs {
            let like = map
                .get(k)
                .ok_or_else(|| ConfigError::UnknownKey(k.into()))?;
            let val = typed(k, v, like)?;
            // round-trip each key on its own so errors name it
            let mut probe = map.clone();
            probe.insert(k.into(), val.clone());
            from_map(probe).map_err(|e| match e {
                ConfigError::BadValue { msg, .. } => ConfigError::BadValue { key: k.into(), msg },
                other => other,
            })?;
            map.insert(k.into(), val);
        }
        from_map(map)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !seen.insert(*k)) {
            return Err(ConfigError::Invalid(format!("key `{k}` given twice")));
        }
        Self::default().with_overrides(pairs)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Sorted `key=value` lines; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in to_map(self) {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// SHA-256 of [`RunConfig::to_text`], hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn conditioning(&self) -> Result<ConditioningScheme, ConfigError> {
        ConditioningScheme::parse(&self.scheme, self.alpha)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Explicit dataset directory, falling back to the environment.
    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        if !self.data_dir.is_empty() {
            return Some(PathBuf::from(&self.data_dir));
        }
        std::env::var_os(DATA_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_modes: self.num_modes,
            obs_len: self.obs_len,
            fut_len: self.fut_len,
            joint_count: self.joints,
            noise_std: self.noise_std,
            seed: self.data_seed,
            num_families: self.families,
            samples_per_family: self.samples_per_family,
            cue_frames: self.cue_frames,
            ..SyntheticSpec::default()
        }
    }

    pub fn motion_config(&self) -> Result<MotionConfig, ConfigError> {
        Ok(MotionConfig {
            scheme: self.conditioning()?,
            joints: self.joints,
            obs_len: self.obs_len,
            fut_len: self.fut_len,
            hidden: self.hidden,
            embed: self.embed,
            latent: self.latent,
            cell: self.cell.into(),
        })
    }

    pub fn anticipation_spec(&self) -> AnticipationSpec {
        AnticipationSpec {
            classes: self.classes,
            frames: self.frames,
            feature_dim: self.feature_dim,
            sequences: self.sequences,
            late_fraction: self.late_fraction,
            early_strength: self.early_strength,
            late_strength: self.late_strength,
            noise_std: self.feature_noise,
            seed: self.data_seed,
        }
    }

    pub fn anticipation_trainer(&self) -> AnticipationTrainer {
        AnticipationTrainer {
            hidden: self.hidden,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            clip_norm: self.clip_norm,
            cell: self.cell.into(),
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch {
            hidden: self.classifier_hidden,
            epochs: self.classifier_epochs,
            ..ClassifierArch::default()
        }
    }

    /// Checks every knob before any work is done.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let fraction = |v: f64| v > 0.0 && v <= 1.0;
        if self.batch == 0 || !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("batch, lr and clip_norm must be positive".into());
        }
        if self.k < 2 {
            return bad(format!("k = {} (diversity needs at least 2 samples)", self.k));
        }
        match self.task {
            Task::Motion => {
                if self.steps == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
                    return bad("steps, eval_every and checkpoint_every must be positive".into());
                }
                for (name, v) in [
                    ("anneal_fraction", self.anneal_fraction),
                    ("tf_fraction", self.tf_fraction),
                    ("curriculum_fraction", self.curriculum_fraction),
                ] {
                    if !fraction(v) {
                        return bad(format!("{name} = {v} must be in (0, 1]"));
                    }
                }
                if self.eval_conditions == 0 {
                    return bad("eval_conditions must be positive".into());
                }
                self.synthetic_spec()
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                self.motion_config()?
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            Task::Anticipation => {
                if self.epochs == 0 || self.hidden == 0 {
                    return bad("epochs and hidden must be positive".into());
                }
                if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
                    return bad(format!("test_fraction = {} must be in (0, 1)", self.test_fraction));
                }
                if self.classes < 2 || self.frames == 0 || self.feature_dim == 0 {
                    return bad("anticipation needs 2+ classes and non-empty features".into());
                }
                let n_test = self.anticipation_split();
                if n_test == 0 || n_test >= self.sequences {
                    return bad("both anticipation splits must be non-empty".into());
                }
                if !(0.0..=1.0).contains(&self.late_fraction) {
                    return bad(format!("late_fraction {}", self.late_fraction));
                }
            }
        }
        Ok(())
    }

    /// Number of anticipation test sequences.
    pub fn anticipation_split(&self) -> usize {
        (self.test_fraction * self.sequences as f64).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::default()
            .with_overrides([("scheme", "lcp"), ("alpha", "0.25"), ("data_dir", "/tmp/x y")])
            .unwrap();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn values_are_typed() {
        let d = RunConfig::default();
        assert!(matches!(
            d.with_overrides([("steps", "-3")]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            d.with_overrides([("alpha", "nan")]),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            d.with_overrides([("loss", "hinge")]),
            Err(ConfigError::BadValue { key, .. }) if key == "loss"
        ));
        assert!(matches!(
            d.with_overrides([("stepz", "3")]),
            Err(ConfigError::UnknownKey(_))
        ));
        let c = d.with_overrides([("lr", "1"), ("loss", "sigmoid")]).unwrap();
        assert_eq!(c.lr, 1.0);
        assert_eq!(c.loss, LossKind::Sigmoid);
    }

    #[test]
    fn comments_and_duplicates() {
        let p = Path::new("c");
        let c = RunConfig::parse("# note\n\nseed = 7\n", p).unwrap();
        assert_eq!(c.seed, 7);
        assert!(RunConfig::parse("seed=1\nseed=2\n", p).is_err());
        assert!(matches!(
            RunConfig::parse("seed\n", p),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let d = RunConfig::default();
        for (k, v) in [
            ("k", "1"),
            ("scheme", "vq"),
            ("tf_fraction", "0"),
            ("cue_frames", "16"),
            ("alpha", "1"),
        ] {
            assert!(d.with_overrides([(k, v)]).unwrap().validate().is_err(), "{k}={v}");
        }
        let a = d.with_overrides([("task", "anticipation")]).unwrap();
        assert!(a.validate().is_ok());
        assert!(a.with_overrides([("test_fraction", "1")]).unwrap().validate().is_err());
    }

    #[test]
    fn loss_names_map_to_objectives() {
        assert_eq!(
            LossKind::Ours.objective(),
            AnticipationObjective::Anticipation(WeightSchedule::Linear)
        );
        assert_eq!(LossKind::Ce.objective(), AnticipationObjective::Ce);
    }
}
