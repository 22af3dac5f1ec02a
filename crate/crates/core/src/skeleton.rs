//! Tree-structured kinematic chain: topology, forward kinematics and
//! position Jacobians.
//!
//! Each joint sits at `parent_position + parent_rotation · (direction · length)`
//! and its own DOFs rotate everything below it. The root joint's
//! `direction · length` is its reference position; a `Free` root adds a
//! translation and an exponential-map orientation on top of it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_KEYPOINTS: usize = 18;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("pose has {got} coordinates, model expects {expected}")]
    PoseLength { expected: usize, got: usize },
    #[error("pose contains non-finite coordinates")]
    NonFinitePose,
    #[error("unknown joint or keypoint label `{0}`")]
    UnknownLabel(String),
    #[error("link `{name}` has invalid length {value}")]
    InvalidLength { name: String, value: f64 },
    #[error("no length given for link `{0}`")]
    MissingLength(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed skeleton file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// The 18 detector keypoints in canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Keypoint {
    Nose,
    Neck,
    RShoulder,
    LShoulder,
    RElbow,
    LElbow,
    RWrist,
    LWrist,
    RHip,
    LHip,
    RKnee,
    LKnee,
    RAnkle,
    LAnkle,
    REye,
    LEye,
    REar,
    LEar,
}

impl Keypoint {
    pub const ALL: [Keypoint; NUM_KEYPOINTS] = [
        Keypoint::Nose,
        Keypoint::Neck,
        Keypoint::RShoulder,
        Keypoint::LShoulder,
        Keypoint::RElbow,
        Keypoint::LElbow,
        Keypoint::RWrist,
        Keypoint::LWrist,
        Keypoint::RHip,
        Keypoint::LHip,
        Keypoint::RKnee,
        Keypoint::LKnee,
        Keypoint::RAnkle,
        Keypoint::LAnkle,
        Keypoint::REye,
        Keypoint::LEye,
        Keypoint::REar,
        Keypoint::LEar,
    ];

    const NAMES: [&'static str; NUM_KEYPOINTS] = [
        "nose",
        "neck",
        "r_shoulder",
        "l_shoulder",
        "r_elbow",
        "l_elbow",
        "r_wrist",
        "l_wrist",
        "r_hip",
        "l_hip",
        "r_knee",
        "l_knee",
        "r_ankle",
        "l_ankle",
        "r_eye",
        "l_eye",
        "r_ear",
        "l_ear",
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Keypoint> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| Self::ALL[i])
    }

    /// Hips, knees and ankles.
    pub fn is_lower_body(self) -> bool {
        matches!(
            self,
            Keypoint::RHip | Keypoint::LHip | Keypoint::RKnee | Keypoint::LKnee | Keypoint::RAnkle | Keypoint::LAnkle
        )
    }
}

impl fmt::Display for Keypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dof {
    /// Translation (3) followed by exponential-map orientation (3).
    Free,
    /// Exponential-map rotation vector.
    Ball,
    Hinge { axis: Vector3<f64>, limits: Option<(f64, f64)> },
    /// Rotation about `axes[0]` then about the (rotated) `axes[1]`.
    Universal { axes: [Vector3<f64>; 2] },
    Fixed,
}

impl Dof {
    pub fn count(&self) -> usize {
        match self {
            Dof::Free => 6,
            Dof::Ball => 3,
            Dof::Hinge { .. } => 1,
            Dof::Universal { .. } => 2,
            Dof::Fixed => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKind {
    Translation,
    Rotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Unit direction of the link from the parent, in the parent's frame.
    pub direction: Vector3<f64>,
    pub length: f64,
    pub dof: Dof,
}

/// Where a keypoint is attached: a joint plus a fixed offset in that joint's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub joint: usize,
    pub offset: Vector3<f64>,
}

/// Generalized coordinates of a skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose(pub DVector<f64>);

impl Pose {
    pub fn zeros(n: usize) -> Pose {
        Pose(DVector::zeros(n))
    }

    pub fn from_slice(q: &[f64]) -> Pose {
        Pose(DVector::from_column_slice(q))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// World positions of every joint and every keypoint, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub joints: Vec<Vector3<f64>>,
    pub keypoints: [Vector3<f64>; NUM_KEYPOINTS],
}

impl JointPositions {
    pub fn keypoint(&self, k: Keypoint) -> Vector3<f64> {
        self.keypoints[k.index()]
    }

    pub fn mid_hip(&self) -> Vector3<f64> {
        (self.keypoint(Keypoint::RHip) + self.keypoint(Keypoint::LHip)) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    joints: Vec<Joint>,
    keypoints: Vec<Attachment>,
    dof_start: Vec<usize>,
    total_dof: usize,
    /// Ancestors of each joint, root first, the joint itself last.
    chains: Vec<Vec<usize>>,
}

struct Kinematics {
    pos: Vec<Vector3<f64>>,
    rot: Vec<Matrix3<f64>>,
    /// World rotation axis of every rotational DOF (zero for translations).
    axes: Vec<Vector3<f64>>,
}

fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3): `d exp(v)/dv_k = [J_l(v) e_k]× exp(v)`.
fn left_jacobian_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

fn wrap_rotation_vector(v: &mut [f64]) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > std::f64::consts::PI {
        let s = 1.0 - 2.0 * std::f64::consts::PI / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

impl SkeletonModel {
    pub fn new(joints: Vec<Joint>, keypoints: Vec<Attachment>) -> Result<SkeletonModel, SkeletonError> {
        if joints.is_empty() {
            return Err(SkeletonError::Topology("no joints".into()));
        }
        if keypoints.len() != NUM_KEYPOINTS {
            return Err(SkeletonError::Topology(format!("expected {NUM_KEYPOINTS} keypoints, got {}", keypoints.len())));
        }
        let mut names = std::collections::HashSet::new();
        let mut dof_start = Vec::with_capacity(joints.len());
        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(joints.len());
        let mut total = 0;
        for (i, j) in joints.iter().enumerate() {
            if !names.insert(j.name.as_str()) {
                return Err(SkeletonError::Topology(format!("duplicate joint name `{}`", j.name)));
            }
            match (i, j.parent) {
                (0, None) => chains.push(vec![0]),
                (0, Some(_)) => return Err(SkeletonError::Topology("first joint must be the root".into())),
                (_, None) => return Err(SkeletonError::Topology(format!("second root `{}`", j.name))),
                (_, Some(p)) if p >= i => {
                    return Err(SkeletonError::Topology(format!("joint `{}` listed before its parent", j.name)))
                }
                (_, Some(p)) => {
                    let mut c = chains[p].clone();
                    c.push(i);
                    chains.push(c);
                }
            }
            if !(j.length.is_finite() && j.length > 0.0) {
                return Err(SkeletonError::InvalidLength { name: j.name.clone(), value: j.length });
            }
            if (j.direction.norm() - 1.0).abs() > 1e-9 {
                return Err(SkeletonError::Topology(format!("joint `{}` direction is not a unit vector", j.name)));
            }
            if matches!(j.dof, Dof::Free) && i != 0 {
                return Err(SkeletonError::Topology("only the root may be free".into()));
            }
            dof_start.push(total);
            total += j.dof.count();
        }
        for a in &keypoints {
            if a.joint >= joints.len() {
                return Err(SkeletonError::Topology("keypoint attached to missing joint".into()));
            }
        }
        Ok(SkeletonModel { joints, keypoints, dof_start, total_dof: total, chains })
    }

    /// The default 40-DOF human model in an upright T-pose, facing +y with z up
    /// (subject's right is +x).
    ///
    /// DOF allocation: pelvis 6, waist/chest/neck/head 3 each, per arm
    /// shoulder 3 + elbow 1 + wrist 1, per leg hip 3 + knee 1 + ankle 2.
    pub fn human40() -> SkeletonModel {
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        let mut joints = Vec::new();
        let mut add = |name: &str, parent: Option<usize>, offset: Vector3<f64>, dof: Dof| {
            joints.push(Joint {
                name: name.to_string(),
                parent,
                direction: offset.normalize(),
                length: offset.norm(),
                dof,
            });
            joints.len() - 1
        };
        let pelvis = add("pelvis", None, z * 950.0, Dof::Free);
        let waist = add("waist", Some(pelvis), z * 100.0, Dof::Ball);
        let chest = add("chest", Some(waist), z * 250.0, Dof::Ball);
        let neck = add("neck", Some(chest), z * 200.0, Dof::Ball);
        let head = add("head", Some(neck), z * 100.0, Dof::Ball);
        let hinge = |axis: Vector3<f64>| Dof::Hinge { axis, limits: None };
        let r_sh = add("r_shoulder", Some(chest), Vector3::new(180.0, 0.0, 170.0), Dof::Ball);
        let r_el = add("r_elbow", Some(r_sh), x * 300.0, hinge(z));
        let r_wr = add("r_wrist", Some(r_el), x * 250.0, hinge(y));
        let l_sh = add("l_shoulder", Some(chest), Vector3::new(-180.0, 0.0, 170.0), Dof::Ball);
        let l_el = add("l_elbow", Some(l_sh), -x * 300.0, hinge(-z));
        let l_wr = add("l_wrist", Some(l_el), -x * 250.0, hinge(-y));
        let r_hip = add("r_hip", Some(pelvis), x * 90.0, Dof::Ball);
        let r_kn = add("r_knee", Some(r_hip), -z * 420.0, hinge(-x));
        let r_an = add("r_ankle", Some(r_kn), -z * 400.0, Dof::Universal { axes: [-x, y] });
        let l_hip = add("l_hip", Some(pelvis), -x * 90.0, Dof::Ball);
        let l_kn = add("l_knee", Some(l_hip), -z * 420.0, hinge(-x));
        let l_an = add("l_ankle", Some(l_kn), -z * 400.0, Dof::Universal { axes: [-x, y] });

        let at = |joint: usize| Attachment { joint, offset: Vector3::zeros() };
        let on_head = |o: Vector3<f64>| Attachment { joint: head, offset: o };
        let keypoints = vec![
            on_head(Vector3::new(0.0, 95.0, 40.0)),
            at(neck),
            at(r_sh),
            at(l_sh),
            at(r_el),
            at(l_el),
            at(r_wr),
            at(l_wr),
            at(r_hip),
            at(l_hip),
            at(r_kn),
            at(l_kn),
            at(r_an),
            at(l_an),
            on_head(Vector3::new(32.0, 80.0, 75.0)),
            on_head(Vector3::new(-32.0, 80.0, 75.0)),
            on_head(Vector3::new(75.0, 0.0, 55.0)),
            on_head(Vector3::new(-75.0, 0.0, 55.0)),
        ];
        let model = SkeletonModel::new(joints, keypoints).expect("built-in model is valid");
        debug_assert_eq!(model.total_dof(), 40);
        model
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn attachment(&self, k: Keypoint) -> &Attachment {
        &self.keypoints[k.index()]
    }

    pub fn total_dof(&self) -> usize {
        self.total_dof
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn dof_range(&self, joint: usize) -> Range<usize> {
        let s = self.dof_start[joint];
        s..s + self.joints[joint].dof.count()
    }

    pub fn dof_kinds(&self) -> Vec<DofKind> {
        let mut kinds = vec![DofKind::Rotation; self.total_dof];
        for (i, j) in self.joints.iter().enumerate() {
            if j.dof == Dof::Free {
                let s = self.dof_start[i];
                kinds[s..s + 3].fill(DofKind::Translation);
            }
        }
        kinds
    }

    /// `joint.k` for every DOF, in pose order.
    pub fn dof_names(&self) -> Vec<String> {
        self.joints
            .iter()
            .flat_map(|j| (0..j.dof.count()).map(move |k| format!("{}.{k}", j.name)))
            .collect()
    }

    pub fn zero_pose(&self) -> Pose {
        Pose::zeros(self.total_dof)
    }

    /// Non-root links as `(parent, child, length)`.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.joints.iter().enumerate().filter_map(|(i, j)| j.parent.map(|p| (p, i, j.length)))
    }

    pub fn link_lengths(&self) -> BTreeMap<String, f64> {
        self.joints.iter().skip(1).map(|j| (j.name.clone(), j.length)).collect()
    }

    /// Returns a copy with new link lengths; every non-root joint must be given.
    pub fn with_link_lengths(&self, lengths: &BTreeMap<String, f64>) -> Result<SkeletonModel, SkeletonError> {
        for name in lengths.keys() {
            match self.joint_index(name) {
                Some(0) | None => return Err(SkeletonError::UnknownLabel(name.clone())),
                Some(_) => {}
            }
        }
        let mut out = self.clone();
        for j in out.joints.iter_mut().skip(1) {
            let len = *lengths.get(&j.name).ok_or_else(|| SkeletonError::MissingLength(j.name.clone()))?;
            if !(len.is_finite() && len > 0.0) {
                return Err(SkeletonError::InvalidLength { name: j.name.clone(), value: len });
            }
            j.length = len;
        }
        Ok(out)
    }

    /// Returns a copy with new fixed offsets for the given keypoints.
    pub fn with_keypoint_offsets(&self, offsets: &[(Keypoint, Vector3<f64>)]) -> SkeletonModel {
        let mut out = self.clone();
        for (k, o) in offsets {
            out.keypoints[k.index()].offset = *o;
        }
        out
    }

    fn check_pose(&self, pose: &Pose) -> Result<(), SkeletonError> {
        if pose.len() != self.total_dof {
            return Err(SkeletonError::PoseLength { expected: self.total_dof, got: pose.len() });
        }
        if pose.0.iter().any(|v| !v.is_finite()) {
            return Err(SkeletonError::NonFinitePose);
        }
        Ok(())
    }

    fn evaluate(&self, q: &[f64]) -> Kinematics {
        let n = self.joints.len();
        let mut pos = Vec::with_capacity(n);
        let mut rot: Vec<Matrix3<f64>> = Vec::with_capacity(n);
        let mut axes = vec![Vector3::zeros(); self.total_dof];
        for (i, j) in self.joints.iter().enumerate() {
            let o = self.dof_start[i];
            let (base, parent_rot) = match j.parent {
                Some(p) => (pos[p] + rot[p] * (j.direction * j.length), rot[p]),
                None => (j.direction * j.length, Matrix3::identity()),
            };
            let (p, local) = match &j.dof {
                Dof::Free => {
                    let v = Vector3::new(q[o + 3], q[o + 4], q[o + 5]);
                    let jl = left_jacobian_so3(&v);
                    for k in 0..3 {
                        axes[o + 3 + k] = jl.column(k).into_owned();
                    }
                    (base + Vector3::new(q[o], q[o + 1], q[o + 2]), exp_so3(&v))
                }
                Dof::Ball => {
                    let v = Vector3::new(q[o], q[o + 1], q[o + 2]);
                    let jl = parent_rot * left_jacobian_so3(&v);
                    for k in 0..3 {
                        axes[o + k] = jl.column(k).into_owned();
                    }
                    (base, exp_so3(&v))
                }
                Dof::Hinge { axis, .. } => {
                    axes[o] = parent_rot * axis;
                    (base, exp_so3(&(axis * q[o])))
                }
                Dof::Universal { axes: [a0, a1] } => {
                    let r0 = exp_so3(&(a0 * q[o]));
                    axes[o] = parent_rot * a0;
                    axes[o + 1] = parent_rot * r0 * a1;
                    (base, r0 * exp_so3(&(a1 * q[o + 1])))
                }
                Dof::Fixed => (base, Matrix3::identity()),
            };
            pos.push(p);
            rot.push(parent_rot * local);
        }
        Kinematics { pos, rot, axes }
    }

    fn positions_from(&self, kin: &Kinematics) -> JointPositions {
        let keypoints = std::array::from_fn(|i| {
            let a = &self.keypoints[i];
            kin.pos[a.joint] + kin.rot[a.joint] * a.offset
        });
        JointPositions { joints: kin.pos.clone(), keypoints }
    }

    pub fn forward_kinematics(&self, pose: &Pose) -> Result<JointPositions, SkeletonError> {
        self.check_pose(pose)?;
        Ok(self.positions_from(&self.evaluate(pose.as_slice())))
    }

    /// World rotation of every joint frame.
    pub fn joint_rotations(&self, pose: &Pose) -> Result<Vec<Matrix3<f64>>, SkeletonError> {
        self.check_pose(pose)?;
        Ok(self.evaluate(pose.as_slice()).rot)
    }

    fn point_jacobian(&self, kin: &Kinematics, joint: usize, point: &Vector3<f64>) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.total_dof);
        for &a in &self.chains[joint] {
            let r = self.dof_range(a);
            let is_free = self.joints[a].dof == Dof::Free;
            let lever = point - kin.pos[a];
            for (k, d) in r.enumerate() {
                let col = if is_free && k < 3 { Vector3::ith(k, 1.0) } else { kin.axes[d].cross(&lever) };
                jac.set_column(d, &col);
            }
        }
        jac
    }

    /// `∂position/∂q` (3 × total_dof) of a keypoint or joint given by name.
    pub fn jacobian(&self, pose: &Pose, target: &str) -> Result<Matrix3xX<f64>, SkeletonError> {
        self.check_pose(pose)?;
        let kin = self.evaluate(pose.as_slice());
        if let Some(k) = Keypoint::from_name(target) {
            let a = &self.keypoints[k.index()];
            let p = kin.pos[a.joint] + kin.rot[a.joint] * a.offset;
            return Ok(self.point_jacobian(&kin, a.joint, &p));
        }
        let j = self.joint_index(target).ok_or_else(|| SkeletonError::UnknownLabel(target.to_string()))?;
        Ok(self.point_jacobian(&kin, j, &kin.pos[j]))
    }

    /// Keypoint positions together with the stacked `(3·18) × total_dof`
    /// keypoint Jacobian.
    pub fn keypoint_jacobian(&self, pose: &Pose) -> Result<(JointPositions, DMatrix<f64>), SkeletonError> {
        self.check_pose(pose)?;
        let kin = self.evaluate(pose.as_slice());
        let positions = self.positions_from(&kin);
        let mut stacked = DMatrix::zeros(3 * NUM_KEYPOINTS, self.total_dof);
        for (i, a) in self.keypoints.iter().enumerate() {
            let jac = self.point_jacobian(&kin, a.joint, &positions.keypoints[i]);
            stacked.rows_mut(3 * i, 3).copy_from(&jac);
        }
        Ok((positions, stacked))
    }

    /// Re-expresses every rotation vector with norm above π by its equivalent
    /// of norm below π. FK output is unchanged.
    pub fn normalize_pose(&self, pose: &mut Pose) {
        for (i, j) in self.joints.iter().enumerate() {
            let s = self.dof_start[i];
            match j.dof {
                Dof::Free => wrap_rotation_vector(&mut pose.0.as_mut_slice()[s + 3..s + 6]),
                Dof::Ball => wrap_rotation_vector(&mut pose.0.as_mut_slice()[s..s + 3]),
                _ => {}
            }
        }
    }

    /// Clamps hinge angles into their configured limits.
    pub fn clamp_limits(&self, pose: &mut Pose) {
        for (i, j) in self.joints.iter().enumerate() {
            if let Dof::Hinge { limits: Some((lo, hi)), .. } = j.dof {
                let d = self.dof_start[i];
                pose.0[d] = pose.0[d].clamp(lo, hi);
            }
        }
    }

    pub fn to_json(&self, init: Option<&InitRecord>) -> String {
        let file = SkeletonFile {
            joints: self
                .joints
                .iter()
                .map(|j| JointRecord {
                    name: j.name.clone(),
                    parent: j.parent.map(|p| self.joints[p].name.clone()),
                    direction: [j.direction.x, j.direction.y, j.direction.z],
                    length: j.length,
                    dof: DofRecord::from(&j.dof),
                })
                .collect(),
            keypoints: Keypoint::ALL
                .iter()
                .map(|k| {
                    let a = &self.keypoints[k.index()];
                    (
                        k.name().to_string(),
                        AttachmentRecord {
                            joint: self.joints[a.joint].name.clone(),
                            offset: [a.offset.x, a.offset.y, a.offset.z],
                        },
                    )
                })
                .collect(),
            init: init.cloned(),
        };
        serde_json::to_string_pretty(&file).expect("skeleton serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<(SkeletonModel, Option<InitRecord>), SkeletonError> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        let index_of = |name: &str| file.joints.iter().position(|j| j.name == name);
        let mut joints = Vec::with_capacity(file.joints.len());
        for rec in &file.joints {
            let parent = match &rec.parent {
                Some(p) => Some(index_of(p).ok_or_else(|| SkeletonError::UnknownLabel(p.clone()))?),
                None => None,
            };
            joints.push(Joint {
                name: rec.name.clone(),
                parent,
                direction: Vector3::from(rec.direction),
                length: rec.length,
                dof: rec.dof.to_dof(),
            });
        }
        let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
        for k in Keypoint::ALL {
            let rec = file
                .keypoints
                .get(k.name())
                .ok_or_else(|| SkeletonError::Topology(format!("keypoint `{k}` missing")))?;
            let joint = index_of(&rec.joint).ok_or_else(|| SkeletonError::UnknownLabel(rec.joint.clone()))?;
            keypoints.push(Attachment { joint, offset: Vector3::from(rec.offset) });
        }
        if file.keypoints.len() != NUM_KEYPOINTS {
            let extra = file.keypoints.keys().find(|n| Keypoint::from_name(n).is_none()).cloned().unwrap_or_default();
            return Err(SkeletonError::UnknownLabel(extra));
        }
        let model = SkeletonModel::new(joints, keypoints)?;
        if let Some(init) = &file.init {
            if init.pose.len() != model.total_dof {
                return Err(SkeletonError::PoseLength { expected: model.total_dof, got: init.pose.len() });
            }
        }
        Ok((model, file.init))
    }

    pub fn load(path: &Path) -> Result<(SkeletonModel, Option<InitRecord>), SkeletonError> {
        let text = fs::read_to_string(path).map_err(|source| SkeletonError::Io { path: path.display().to_string(), source })?;
        SkeletonModel::from_json(&text)
    }

    pub fn save(&self, path: &Path, init: Option<&InitRecord>) -> Result<(), SkeletonError> {
        crate::io::write_atomic(path, self.to_json(init).as_bytes())
            .map_err(|source| SkeletonError::Io { path: path.display().to_string(), source })
    }
}

/// Initialization result stored alongside an identified skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub frame: u32,
    pub pose: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    joints: Vec<JointRecord>,
    keypoints: BTreeMap<String, AttachmentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init: Option<InitRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRecord {
    name: String,
    parent: Option<String>,
    direction: [f64; 3],
    length: f64,
    dof: DofRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttachmentRecord {
    joint: String,
    offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum DofRecord {
    Free,
    Ball,
    Hinge {
        axis: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limits: Option<[f64; 2]>,
    },
    Universal {
        axes: [[f64; 3]; 2],
    },
    Fixed,
}

impl From<&Dof> for DofRecord {
    fn from(d: &Dof) -> DofRecord {
        let arr = |v: &Vector3<f64>| [v.x, v.y, v.z];
        match d {
            Dof::Free => DofRecord::Free,
            Dof::Ball => DofRecord::Ball,
            Dof::Hinge { axis, limits } => DofRecord::Hinge { axis: arr(axis), limits: limits.map(|(a, b)| [a, b]) },
            Dof::Universal { axes } => DofRecord::Universal { axes: [arr(&axes[0]), arr(&axes[1])] },
            Dof::Fixed => DofRecord::Fixed,
        }
    }
}

impl DofRecord {
    fn to_dof(&self) -> Dof {
        match self {
            DofRecord::Free => Dof::Free,
            DofRecord::Ball => Dof::Ball,
            DofRecord::Hinge { axis, limits } => Dof::Hinge { axis: Vector3::from(*axis), limits: limits.map(|[a, b]| (a, b)) },
            DofRecord::Universal { axes } => Dof::Universal { axes: [Vector3::from(axes[0]), Vector3::from(axes[1])] },
            DofRecord::Fixed => Dof::Fixed,
        }
    }
}
