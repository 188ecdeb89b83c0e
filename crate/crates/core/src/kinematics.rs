//! Quaternion algebra, skeletons and forward kinematics.
//!
//! Joint 0 is always the root of a [`Skeleton`]. A joint's rotation orients
//! its own bone: `p[j] = p[parent] + G[j]·offset[j]` with
//! `G[j] = G[parent]·R(q[j])`. Euler angles use the intrinsic Z-Y-X (yaw,
//! pitch, roll) convention throughout.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Rotation as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit quaternion in the `w >= 0` hemisphere.
    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n <= 1e-12 {
            return Err(Error::DegenerateRotation(n));
        }
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(Self::new(self.w * s, self.x * s, self.y * s, self.z * s))
    }

    pub fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, axis[0] * s, axis[1] * s, axis[2] * s)
    }

    /// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let qz = Self::from_axis_angle([0.0, 0.0, 1.0], yaw);
        let qy = Self::from_axis_angle([0.0, 1.0, 0.0], pitch);
        let qx = Self::from_axis_angle([1.0, 0.0, 0.0], roll);
        qz.mul(qy).mul(qx)
    }

    /// `(yaw, pitch, roll)`; pitch is clamped at the gimbal.
    pub fn to_euler_zyx(self) -> Vec3 {
        let Quaternion { w, x, y, z } = self;
        let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
        let pitch = (2.0 * (w * y - x * z)).clamp(-1.0, 1.0).asin();
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        [yaw, pitch, roll]
    }

    pub fn to_rotation_matrix(self) -> Mat3 {
        quat_to_mat(&self.to_array())
    }

    /// Normalized quaternion of a rotation matrix.
    pub fn from_rotation_matrix(m: &Mat3) -> Result<Self> {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        if !q.norm().is_finite() {
            return Err(Error::DegenerateRotation(f64::NAN));
        }
        q.normalize()
    }
}

/// Free-function form of [`Quaternion::normalize`].
pub fn normalize_quaternion(q: Quaternion) -> Result<Quaternion> {
    q.normalize()
}

/// Rotation matrix of `(w, x, y, z)` without normalizing.
pub(crate) fn quat_to_mat(q: &[f64]) -> Mat3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the matrix of [`quat_to_mat`] back to the quaternion.
fn quat_to_mat_backward(q: &[f64], g: &Mat3) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw =
        2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let dy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let dz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [dw, dx, dy, dz]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_mul_t_left(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[k][i] * b[k][j]).sum();
        }
    }
    out
}

fn mat_mul_t_right(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[j][k]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Kinematic tree with per-joint bone offsets; joint 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    order: Vec<usize>,
}

impl Skeleton {
    /// `parents[j] < 0` marks the root, which must be joint 0.
    pub fn new(parents: &[i64], offsets: Vec<Vec3>) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if offsets.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} parents but {} offsets",
                n,
                offsets.len()
            )));
        }
        let mut ps = Vec::with_capacity(n);
        for (j, &p) in parents.iter().enumerate() {
            if p < 0 {
                ps.push(None);
            } else if (p as usize) >= n || p as usize == j {
                return Err(Error::InvalidSkeleton(format!(
                    "joint {j} has invalid parent {p}"
                )));
            } else {
                ps.push(Some(p as usize));
            }
        }
        let roots = ps.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::InvalidSkeleton(format!(
                "expected one root, found {roots}"
            )));
        }
        if ps[0].is_some() {
            return Err(Error::InvalidSkeleton("root must be joint 0".into()));
        }
        // Breadth-first from the root; joints never reached sit on a cycle.
        let mut order = vec![0];
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            for (j, p) in ps.iter().enumerate() {
                if *p == Some(cur) {
                    order.push(j);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidSkeleton(
                "parent array contains a cycle".into(),
            ));
        }
        Ok(Self {
            parents: ps,
            offsets,
            order,
        })
    }

    /// Serial chain where every bone is `offset`.
    pub fn chain(joints: usize, offset: Vec3) -> Self {
        let parents = (0..joints as i64).map(|j| j - 1).collect::<Vec<_>>();
        Self::new(&parents, vec![offset; joints]).expect("chain skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> Vec3 {
        self.offsets[j]
    }

    /// Joints ordered parents-first.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Parses `index parent ox oy oz` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, i64, Vec3)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks = line.split_whitespace().collect::<Vec<_>>();
            let bad = |msg: &str| Error::MalformedRow {
                path: "<skeleton>".into(),
                row: lineno,
                msg: msg.to_string(),
            };
            if toks.len() != 5 {
                return Err(bad("expected `index parent ox oy oz`"));
            }
            let idx: usize = toks[0].parse().map_err(|_| bad("bad index"))?;
            let parent: i64 = toks[1].parse().map_err(|_| bad("bad parent"))?;
            let mut off = [0.0; 3];
            for k in 0..3 {
                off[k] = toks[2 + k].parse().map_err(|_| bad("bad offset"))?;
            }
            rows.push((idx, parent, off));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::InvalidSkeleton(
                "joint indices must be 0..J without gaps".into(),
            ));
        }
        let parents = rows.iter().map(|r| r.1).collect::<Vec<_>>();
        let offsets = rows.iter().map(|r| r.2).collect();
        Self::new(&parents, offsets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for j in 0..self.joint_count() {
            let p = self.parents[j].map(|p| p as i64).unwrap_or(-1);
            let o = self.offsets[j];
            s.push_str(&format!("{} {} {} {} {}\n", j, p, o[0], o[1], o[2]));
        }
        s
    }
}

/// Rotations of every joint at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotations: Vec<Quaternion>,
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Self {
            rotations: vec![Quaternion::IDENTITY; joints],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Flattened `(w, x, y, z)` per joint.
    pub fn to_flat(&self) -> Vec<f64> {
        self.rotations.iter().flat_map(|q| q.to_array()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self {
            rotations: flat
                .chunks_exact(4)
                .map(|c| Quaternion::new(c[0], c[1], c[2], c[3]))
                .collect(),
        }
    }
}

/// Time-ordered poses sharing one joint count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub joint_count: usize,
    pub frames: Vec<Pose>,
}

impl PoseSequence {
    pub fn new(joint_count: usize, frames: Vec<Pose>) -> Result<Self> {
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.joint_count() != joint_count)
        {
            return Err(Error::ShapeMismatch(format!(
                "frame {i} has {} joints, expected {joint_count}",
                f.joint_count()
            )));
        }
        Ok(Self {
            joint_count,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `range` as a new sequence.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            joint_count: self.joint_count,
            frames: self.frames[range].to_vec(),
        }
    }

    /// Row-major `frames × joints × 4`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.to_flat()).collect()
    }

    pub fn from_flat(joint_count: usize, flat: &[f64]) -> Self {
        Self {
            joint_count,
            frames: flat
                .chunks_exact(4 * joint_count)
                .map(Pose::from_flat)
                .collect(),
        }
    }
}

/// Joint positions for flattened quaternions `q` (length `4J`), root at the origin.
pub(crate) fn fk_raw(skel: &Skeleton, q: &[f64], align_root: bool) -> Vec<Vec3> {
    let n = skel.joint_count();
    let mut pos = vec![[0.0; 3]; n];
    let mut global = vec![IDENTITY3; n];
    for &j in skel.order() {
        let local = if j == 0 && align_root {
            IDENTITY3
        } else {
            quat_to_mat(&q[4 * j..4 * j + 4])
        };
        match skel.parents[j] {
            None => global[j] = local,
            Some(p) => {
                global[j] = mat_mul(&global[p], &local);
                let d = mat_vec(&global[j], &skel.offsets[j]);
                pos[j] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
            }
        }
    }
    pos
}

/// Vector-Jacobian product of [`fk_raw`] with respect to `q`.
pub(crate) fn fk_raw_backward(
    skel: &Skeleton,
    q: &[f64],
    grad_pos: &[Vec3],
    align_root: bool,
) -> Vec<[f64; 4]> {
    let n = skel.joint_count();
    let mut local = vec![IDENTITY3; n];
    let mut global = vec![IDENTITY3; n];
    for &j in skel.order() {
        local[j] = if j == 0 && align_root {
            IDENTITY3
        } else {
            quat_to_mat(&q[4 * j..4 * j + 4])
        };
        global[j] = match skel.parents[j] {
            None => local[j],
            Some(p) => mat_mul(&global[p], &local[j]),
        };
    }
    let mut gp = grad_pos.to_vec();
    let mut gg = vec![[[0.0; 3]; 3]; n];
    let mut gq = vec![[0.0; 4]; n];
    for &j in skel.order().iter().rev() {
        let grad_local = match skel.parents[j] {
            None => gg[j],
            Some(p) => {
                let o = skel.offsets[j];
                for a in 0..3 {
                    gp[p][a] += gp[j][a];
                    for b in 0..3 {
                        gg[j][a][b] += gp[j][a] * o[b];
                    }
                }
                let to_parent = mat_mul_t_right(&gg[j], &local[j]);
                for a in 0..3 {
                    for b in 0..3 {
                        gg[p][a][b] += to_parent[a][b];
                    }
                }
                mat_mul_t_left(&global[p], &gg[j])
            }
        };
        if !(j == 0 && align_root) {
            gq[j] = quat_to_mat_backward(&q[4 * j..4 * j + 4], &grad_local);
        }
    }
    gq
}

/// Joint positions of `pose`; the root sits at the origin.
pub fn forward_kinematics(skel: &Skeleton, pose: &Pose) -> Result<Vec<Vec3>> {
    if pose.joint_count() != skel.joint_count() {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, skeleton {}",
            pose.joint_count(),
            skel.joint_count()
        )));
    }
    Ok(fk_raw(skel, &pose.to_flat(), false))
}

/// Copy of `pose` with the root rotation reset to the identity.
pub fn align_root(pose: &Pose) -> Pose {
    let mut out = pose.clone();
    if let Some(r) = out.rotations.first_mut() {
        *r = Quaternion::IDENTITY;
    }
    out
}

/// Per-frame L2 distance between the concatenated ZYX Euler angles of all joints.
pub fn euler_angle_error(pred: &PoseSequence, gt: &PoseSequence) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.joint_count != gt.joint_count {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.len(),
            pred.joint_count,
            gt.len(),
            gt.joint_count
        )));
    }
    Ok(pred
        .frames
        .iter()
        .zip(&gt.frames)
        .map(|(p, g)| {
            p.rotations
                .iter()
                .zip(&g.rotations)
                .map(|(a, b)| {
                    let (ea, eb) = (a.to_euler_zyx(), b.to_euler_zyx());
                    (0..3).map(|k| (ea[k] - eb[k]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}
