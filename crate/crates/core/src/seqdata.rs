//! Synthetic condition→future motion datasets, the anticipation toy task,
//! pose-sequence text files and dataset directories.
//!
//! A synthetic sample rotates every joint about a fixed axis by a sinusoid
//! whose frequency drifts from a family-wide base value to a mode-specific
//! value during the last `cue_frames` observed frames and stays there for
//! the whole future. The observed prefix therefore carries a cue that
//! determines the future, while different samples of one family realize
//! different futures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    normalize_quaternion, Mat3, Pose, PoseSequence, Quaternion, Skeleton, Vec3,
};

/// Parameters of the synthetic motion generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_modes: usize,
    pub obs_len: usize,
    pub fut_len: usize,
    pub joint_count: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub num_families: usize,
    pub samples_per_family: usize,
    /// Observed frames over which the frequency moves to its mode value.
    pub cue_frames: usize,
    /// Train/val/test fractions.
    pub fractions: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_modes: 4,
            obs_len: 16,
            fut_len: 24,
            joint_count: 3,
            noise_std: 0.05,
            seed: 0,
            num_families: 16,
            samples_per_family: 16,
            cue_frames: 8,
            fractions: [0.7, 0.15, 0.15],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_modes == 0
            || self.joint_count == 0
            || self.num_families == 0
            || self.samples_per_family == 0
        {
            return bad("counts must be positive".into());
        }
        if self.obs_len < 2 {
            return bad(format!("obs_len {} < 2", self.obs_len));
        }
        if self.fut_len == 0 {
            return bad("fut_len must be at least 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        if self.cue_frames == 0 || self.cue_frames >= self.obs_len {
            return bad(format!(
                "cue_frames {} must be in 1..obs_len",
                self.cue_frames
            ));
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions {:?} must sum to 1",
                self.fractions
            ));
        }
        Ok(())
    }
}

/// Observed prefix, future continuation and generator-side mode label.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub observed: PoseSequence,
    pub future: PoseSequence,
    pub mode_label: usize,
}

impl MotionSample {
    pub fn new(observed: PoseSequence, future: PoseSequence, mode_label: usize) -> Result<Self> {
        if observed.joint_count != future.joint_count {
            return Err(Error::ShapeMismatch(format!(
                "observed has {} joints, future {}",
                observed.joint_count, future.joint_count
            )));
        }
        Ok(Self {
            observed,
            future,
            mode_label,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.observed.joint_count
    }

    /// Header line followed by one quaternion frame per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "joints={} encoding=quat observed={} label={}\n",
            self.joint_count(),
            self.observed.len(),
            self.mode_label
        );
        for f in self.observed.frames.iter().chain(&self.future.frames) {
            let vals: Vec<String> = f.to_flat().iter().map(|v| v.to_string()).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !is_blank(l));
        let (row, header) = lines
            .next()
            .ok_or_else(|| malformed(path, 1, "missing header"))?;
        let kv = parse_header(header, path, row + 1)?;
        let get = |k: &str| -> Result<usize> {
            kv.iter()
                .find(|(key, _)| key == k)
                .ok_or_else(|| malformed(path, row + 1, &format!("header lacks {k}")))?
                .1
                .parse()
                .map_err(|_| malformed(path, row + 1, &format!("bad {k}")))
        };
        let joints = get("joints")?;
        let observed = get("observed")?;
        let label = get("label")?;
        let layout = PoseLayout::quaternions(joints);
        let mut frames = Vec::new();
        for (i, line) in lines {
            frames.push(parse_frame(line, &layout, path, i + 1)?);
        }
        if frames.len() <= observed {
            return Err(malformed(
                path,
                row + 1,
                "fewer frames than the observed length",
            ));
        }
        let future = frames.split_off(observed);
        MotionSample::new(
            PoseSequence::new(joints, frames)?,
            PoseSequence::new(joints, future)?,
            label,
        )
    }
}

/// Disjoint train/val/test lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<MotionSample>,
    pub val: Vec<MotionSample>,
    pub test: Vec<MotionSample>,
    pub fractions: [f64; 3],
}

impl DatasetSplit {
    pub fn all(&self) -> impl Iterator<Item = &MotionSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-family trajectory parameters; joint `j` rotates about `axes[j]`.
struct Family {
    amplitude: Vec<f64>,
    base_freq: Vec<f64>,
    phase: Vec<f64>,
    // per mode, per joint
    mode_freq: Vec<Vec<f64>>,
    mode_amp: Vec<Vec<f64>>,
}

fn joint_axis(j: usize) -> Vec3 {
    match j % 3 {
        0 => [0.0, 0.0, 1.0],
        1 => [0.0, 1.0, 0.0],
        _ => [0.0, 0.6, 0.8],
    }
}

fn family_params(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Family {
    let j = spec.joint_count;
    let amplitude: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..1.1)).collect();
    let base_freq: Vec<f64> = (0..j).map(|_| rng.random_range(0.15..0.3)).collect();
    let phase: Vec<f64> = (0..j)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let spread = (spec.num_modes.max(2) - 1) as f64;
    let mode_freq = (0..spec.num_modes)
        .map(|m| {
            base_freq
                .iter()
                .map(|&w| {
                    if spec.num_modes == 1 {
                        w
                    } else {
                        w * (0.4 + 1.6 * m as f64 / spread)
                    }
                })
                .collect()
        })
        .collect();
    let mode_amp = (0..spec.num_modes)
        .map(|m| {
            amplitude
                .iter()
                .map(|&a| {
                    if spec.num_modes == 1 {
                        a
                    } else {
                        a * (0.7 + 0.6 * ((m * 5 + 2) % spec.num_modes) as f64 / spread)
                    }
                })
                .collect()
        })
        .collect();
    Family {
        amplitude,
        base_freq,
        phase,
        mode_freq,
        mode_amp,
    }
}

fn synth_sample(
    spec: &SyntheticSpec,
    fam: &Family,
    mode: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MotionSample> {
    let total = spec.obs_len + spec.fut_len;
    let ramp_start = spec.obs_len - spec.cue_frames;
    let jit = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let joints = spec.joint_count;
    let phase0: Vec<f64> = fam.phase.iter().map(|p| p + jit.sample(rng)).collect();
    let amp_jit: Vec<f64> = (0..joints).map(|_| 1.0 + jit.sample(rng)).collect();
    let mut phase = phase0;
    let mut frames = Vec::with_capacity(total);
    for t in 0..total {
        // ramp weight: 0 before the cue window, 1 from the last observed frame on
        let r = if t < ramp_start {
            0.0
        } else {
            ((t - ramp_start + 1) as f64 / spec.cue_frames as f64).min(1.0)
        };
        let rotations = (0..joints)
            .map(|j| {
                let w = (1.0 - r) * fam.base_freq[j] + r * fam.mode_freq[mode][j];
                let a = ((1.0 - r) * fam.amplitude[j] + r * fam.mode_amp[mode][j]) * amp_jit[j];
                phase[j] += w;
                let angle = (a * phase[j].sin()).clamp(-3.0, 3.0);
                Quaternion::from_axis_angle(joint_axis(j), angle)
            })
            .collect();
        frames.push(Pose { rotations });
    }
    let future = frames.split_off(spec.obs_len);
    MotionSample::new(
        PoseSequence::new(joints, frames)?,
        PoseSequence::new(joints, future)?,
        mode,
    )
}

/// Generates the dataset; families use independent random streams.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.num_families * spec.samples_per_family);
    for f in 0..spec.num_families {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(f as u64 + 1);
        let fam = family_params(spec, &mut rng);
        for s in 0..spec.samples_per_family {
            samples.push(synth_sample(spec, &fam, s % spec.num_modes, &mut rng)?);
        }
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let n = samples.len();
    let n_train = (spec.fractions[0] * n as f64).round() as usize;
    let n_val = ((spec.fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<MotionSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<MotionSample> {
        idx.iter()
            .map(|&i| slots[i].take().expect("unique"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        val,
        test,
        fractions: spec.fractions,
    })
}

/// Hub skeleton for the synthetic joints: a root at the origin with every
/// other joint one unit away along x, so positional errors do not compound
/// down a long chain.
pub fn synthetic_skeleton(joints: usize) -> Skeleton {
    let parents: Vec<i64> = (0..joints as i64).map(|j| j.min(1) - 1).collect();
    let offsets = (0..joints)
        .map(|j| if j == 0 { [0.0; 3] } else { [1.0, 0.0, 0.0] })
        .collect();
    Skeleton::new(&parents, offsets).expect("hub skeleton is valid")
}

/// Per-joint rotation encoding of a pose file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationEncoding {
    /// `w x y z` per joint.
    Quat,
    /// Row-major 3×3 rotation matrix per joint.
    Rotmat,
}

impl RotationEncoding {
    pub fn width(self) -> usize {
        match self {
            RotationEncoding::Quat => 4,
            RotationEncoding::Rotmat => 9,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "quat" => Some(RotationEncoding::Quat),
            "rotmat" => Some(RotationEncoding::Rotmat),
            _ => None,
        }
    }
}

/// Shape of a pose file. Without `frames_per_sequence`, blank lines
/// separate sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseLayout {
    pub joints: usize,
    pub encoding: RotationEncoding,
    pub frames_per_sequence: Option<usize>,
}

impl PoseLayout {
    pub fn quaternions(joints: usize) -> Self {
        Self {
            joints,
            encoding: RotationEncoding::Quat,
            frames_per_sequence: None,
        }
    }
}

fn malformed(path: &Path, row: usize, msg: &str) -> Error {
    Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        msg: msg.to_string(),
    }
}

fn is_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn parse_header(line: &str, path: &Path, row: usize) -> Result<Vec<(String, String)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| malformed(path, row, &format!("bad header token {tok:?}")))
        })
        .collect()
}

fn parse_frame(line: &str, layout: &PoseLayout, path: &Path, row: usize) -> Result<Pose> {
    let vals = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| malformed(path, row, &format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let width = layout.encoding.width();
    if vals.len() != width * layout.joints {
        return Err(malformed(
            path,
            row,
            &format!(
                "expected {} values, found {}",
                width * layout.joints,
                vals.len()
            ),
        ));
    }
    let rotations = vals
        .chunks_exact(width)
        .map(|c| {
            let q = match layout.encoding {
                RotationEncoding::Quat => Quaternion::new(c[0], c[1], c[2], c[3]),
                RotationEncoding::Rotmat => {
                    let m: Mat3 = [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]];
                    Quaternion::from_rotation_matrix(&m)
                        .map_err(|e| malformed(path, row, &e.to_string()))?
                }
            };
            canonical(q).map_err(|e| malformed(path, row, &e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pose { rotations })
}

/// Unit quaternions are kept bit-for-bit (up to the hemisphere sign);
/// anything else is normalized.
fn canonical(q: Quaternion) -> Result<Quaternion> {
    if (q.norm() - 1.0).abs() <= 1e-12 {
        return Ok(if q.w < 0.0 { q.neg() } else { q });
    }
    normalize_quaternion(q)
}

/// Reads pose sequences from a text file.
///
/// Lines starting with `#` are comments. A leading `key=value` header is
/// checked against `layout`. Every other line is one frame.
pub fn load_pose_sequences(path: &Path, layout: &PoseLayout) -> Result<Vec<PoseSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seqs = Vec::new();
    let mut current: Vec<Pose> = Vec::new();
    let flush = |current: &mut Vec<Pose>, seqs: &mut Vec<PoseSequence>| -> Result<()> {
        if !current.is_empty() {
            seqs.push(PoseSequence::new(layout.joints, std::mem::take(current))?);
        }
        Ok(())
    };
    let mut seen_data = false;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let t = line.trim();
        if t.starts_with('#') {
            continue;
        }
        if t.is_empty() {
            if layout.frames_per_sequence.is_none() {
                flush(&mut current, &mut seqs)?;
            }
            continue;
        }
        if t.contains('=') {
            if seen_data {
                return Err(malformed(path, row, "header after data"));
            }
            for (k, v) in parse_header(t, path, row)? {
                let ok = match k.as_str() {
                    "joints" => v.parse::<usize>().ok() == Some(layout.joints),
                    "encoding" => RotationEncoding::parse(&v) == Some(layout.encoding),
                    _ => true,
                };
                if !ok {
                    return Err(malformed(
                        path,
                        row,
                        &format!("header {k}={v} does not match the layout"),
                    ));
                }
            }
            continue;
        }
        seen_data = true;
        current.push(parse_frame(t, layout, path, row)?);
        if let Some(n) = layout.frames_per_sequence {
            if current.len() == n {
                flush(&mut current, &mut seqs)?;
            }
        }
    }
    if let Some(n) = layout.frames_per_sequence {
        if !current.is_empty() {
            return Err(malformed(
                path,
                text.lines().count(),
                &format!("trailing sequence has {} of {n} frames", current.len()),
            ));
        }
    }
    flush(&mut current, &mut seqs)?;
    Ok(seqs)
}

/// Writes sequences in the format read by [`load_pose_sequences`].
pub fn write_pose_sequences(path: &Path, seqs: &[PoseSequence]) -> Result<()> {
    let joints = seqs.first().map_or(0, |s| s.joint_count);
    let mut s = format!("joints={joints} encoding=quat\n");
    for (i, seq) in seqs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for f in &seq.frames {
            let vals: Vec<String> = f.to_flat().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Sliding windows `[i, i+t)` observed and `[i+t, i+total)` future.
pub fn window_sequence(
    seq: &PoseSequence,
    obs: usize,
    total: usize,
    stride: usize,
) -> Result<Vec<MotionSample>> {
    if stride == 0 || obs == 0 || obs >= total {
        return Err(Error::InvalidParameter(format!(
            "window needs stride >= 1 and 0 < t < T (t={obs}, T={total}, stride={stride})"
        )));
    }
    if seq.len() < total {
        return Ok(Vec::new());
    }
    (0..=seq.len() - total)
        .step_by(stride)
        .map(|i| MotionSample::new(seq.slice(i..i + obs), seq.slice(i + obs..i + total), 0))
        .collect()
}

/// Header of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub joints: usize,
    pub obs_len: usize,
    pub fut_len: usize,
    pub num_modes: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl DatasetMeta {
    pub fn from_spec(spec: &SyntheticSpec) -> Self {
        Self {
            joints: spec.joint_count,
            obs_len: spec.obs_len,
            fut_len: spec.fut_len,
            num_modes: spec.num_modes,
            seed: spec.seed,
            noise_std: spec.noise_std,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "joints={}\nobs_len={}\nfut_len={}\nnum_modes={}\nlabels={}\nseed={}\nnoise_std={}\n",
            self.joints,
            self.obs_len,
            self.fut_len,
            self.num_modes,
            (0..self.num_modes)
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.seed,
            self.noise_std
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if is_blank(line) {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(path, i + 1, "expected key=value"))?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        fn field<T: std::str::FromStr>(
            kv: &std::collections::BTreeMap<String, (usize, String)>,
            k: &str,
            path: &Path,
        ) -> Result<T> {
            let (row, v) = kv
                .get(k)
                .ok_or_else(|| malformed(path, 0, &format!("missing {k}")))?;
            v.parse()
                .map_err(|_| malformed(path, *row, &format!("bad value for {k}")))
        }
        Ok(Self {
            joints: field(&kv, "joints", path)?,
            obs_len: field(&kv, "obs_len", path)?,
            fut_len: field(&kv, "fut_len", path)?,
            num_modes: field(&kv, "num_modes", path)?,
            seed: field(&kv, "seed", path)?,
            noise_std: field(&kv, "noise_std", path)?,
        })
    }
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `meta`, `skeleton` and numbered sample files under `train/`, `val/`, `test/`.
pub fn write_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    skeleton: &Skeleton,
    split: &DatasetSplit,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| Error::io(&p, e));
    write(dir.join("meta"), meta.to_text())?;
    write(dir.join("skeleton"), skeleton.to_text())?;
    for (name, samples) in SPLITS.iter().zip([&split.train, &split.val, &split.test]) {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, s) in samples.iter().enumerate() {
            write(sub.join(format!("{i:06}.txt")), s.to_text())?;
        }
    }
    Ok(())
}

/// Reads a directory produced by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Skeleton, DatasetSplit)> {
    let meta_path = dir.join("meta");
    let meta = DatasetMeta::parse(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        &meta_path,
    )?;
    let skel_path = dir.join("skeleton");
    let skeleton = if skel_path.exists() {
        Skeleton::load(&skel_path)?
    } else {
        synthetic_skeleton(meta.joints)
    };
    let mut parts: Vec<Vec<MotionSample>> = Vec::new();
    for name in SPLITS {
        let sub = dir.join(name);
        let mut files: Vec<PathBuf> = match fs::read_dir(&sub) {
            Ok(rd) => rd
                .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(&sub, e)))
                .collect::<Result<_>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&sub, e)),
        };
        files.retain(|p| p.extension().is_some_and(|e| e == "txt"));
        files.sort();
        let samples = files
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let s = MotionSample::from_text(&text, p)?;
                if s.joint_count() != meta.joints
                    || s.observed.len() != meta.obs_len
                    || s.future.len() != meta.fut_len
                {
                    return Err(Error::ShapeMismatch(format!(
                        "{} does not match the dataset meta",
                        p.display()
                    )));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        parts.push(samples);
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    let n = (train.len() + val.len() + test.len()).max(1) as f64;
    let fractions = [
        train.len() as f64 / n,
        val.len() as f64 / n,
        test.len() as f64 / n,
    ];
    Ok((
        meta,
        skeleton,
        DatasetSplit {
            train,
            val,
            test,
            fractions,
        },
    ))
}

/// Parameters of the synthetic anticipation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipationSpec {
    pub classes: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub sequences: usize,
    /// Fraction of trailing frames that carry the strong class signal.
    pub late_fraction: f64,
    /// Class signal amplitude before the late segment.
    pub early_strength: f64,
    pub late_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for AnticipationSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            frames: 20,
            feature_dim: 8,
            sequences: 256,
            late_fraction: 0.3,
            early_strength: 0.3,
            late_strength: 2.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Per-frame feature sequence (`T×D`) with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub features: Array2<f64>,
    pub label: usize,
}

/// Class prototypes plus Gaussian noise. The last `late_fraction` of frames
/// carry a strong prototype; earlier frames a weak one drawn independently,
/// so reading the early cue is never a by-product of reading the late one.
pub fn generate_anticipation_dataset(spec: &AnticipationSpec) -> Result<Vec<LabeledSequence>> {
    if spec.classes < 2
        || spec.frames == 0
        || spec.feature_dim == 0
        || !(0.0..=1.0).contains(&spec.late_fraction)
    {
        return Err(Error::InvalidSpec("anticipation spec out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit_protos = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.feature_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let protos = unit_protos(&mut rng);
    let early = unit_protos(&mut rng);
    let late_start = spec.frames - (spec.late_fraction * spec.frames as f64).round() as usize;
    Ok((0..spec.sequences)
        .map(|i| {
            let label = i % spec.classes;
            let features = Array2::from_shape_fn((spec.frames, spec.feature_dim), |(t, d)| {
                if t >= late_start {
                    spec.late_strength * protos[label][d]
                } else {
                    spec.early_strength * early[label][d]
                }
            }) + Array2::from_shape_simple_fn(
                (spec.frames, spec.feature_dim),
                || spec.noise_std * rng.sample::<f64, _>(StandardNormal),
            );
            LabeledSequence { features, label }
        })
        .collect())
}
