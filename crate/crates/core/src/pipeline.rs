//! End-to-end reconstruction: initialization from heatmap centroids, then the
//! per-frame loop of lattice search, weighted IK, and smoothing with a second
//! IK pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, CameraRig};
use crate::ik::{self, IkError, IkSettings};
use crate::io::write_atomic;
use crate::pcm::{PcmError, PcmProvider, DEFAULT_CENTROID_FLOOR};
use crate::skeleton::{JointPositions, Keypoint, Pose, SkeletonError, SkeletonModel, NUM_KEYPOINTS};
use crate::smooth::{self, design_biquad, FilterMode, FilterSpec, FilterState, SmoothError};
use crate::tracker::{
    build_markers, pcm_weight, plan_rotations, Diagnostic, FrameEvidence, LatticeConfig, TrackerError,
    VirtualMarkerSet,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Pcm(#[from] PcmError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Ik(#[from] IkError),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("triangulation needs at least 2 rays, got {0}")]
    TooFewRays(usize),
    #[error("degenerate ray geometry (eigenvalue ratio {0:e})")]
    DegenerateRays(f64),
    #[error("camera {0} is not in the rig")]
    UnknownCamera(u32),
    #[error("initialization failed after scanning {frames} frames; worst keypoints: {}", worst_list(.worst))]
    InitFailed { frames: usize, worst: Vec<(Keypoint, usize)> },
    #[error("no frames to track in {0:?}")]
    EmptyRange(std::ops::Range<u32>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn worst_list(worst: &[(Keypoint, usize)]) -> String {
    worst.iter().map(|(k, n)| format!("{k} (failed in {n} frames)")).collect::<Vec<_>>().join(", ")
}

/// Settings of the centroid-agreement initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSettings {
    pub centroid_floor: f64,
    /// A frame agrees when every keypoint's RMS ray distance is below this.
    pub agreement_residual_mm: f64,
    pub min_agreement_frames: usize,
}

impl Default for InitSettings {
    fn default() -> InitSettings {
        InitSettings { centroid_floor: DEFAULT_CENTROID_FLOOR, agreement_residual_mm: 10.0, min_agreement_frames: 5 }
    }
}

/// Which previous-frame positions the lattice is centered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeCenter {
    /// Final (smoothed, stage-2) positions.
    Smoothed,
    /// Raw stage-1 IK positions.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lattice: LatticeConfig,
    pub ik: IkSettings,
    pub filter: FilterSpec,
    pub init: InitSettings,
    pub lattice_center: LatticeCenter,
    /// Markers with weight below this fraction of the camera count are
    /// flagged low-confidence (they still enter the solve).
    pub low_confidence_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            lattice: LatticeConfig::default(),
            ik: IkSettings::default(),
            filter: FilterSpec::default(),
            init: InitSettings::default(),
            lattice_center: LatticeCenter::Smoothed,
            low_confidence_fraction: 0.05,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.lattice.validate()?;
        self.ik.validate()?;
        design_biquad(&self.filter)?;
        let i = &self.init;
        if !(i.agreement_residual_mm.is_finite() && i.agreement_residual_mm > 0.0) {
            return Err(PipelineError::Config("agreement residual must be positive".into()));
        }
        if !(0.0..1.0).contains(&i.centroid_floor) {
            return Err(PipelineError::Config("centroid floor must lie in [0, 1)".into()));
        }
        if i.min_agreement_frames < 1 {
            return Err(PipelineError::Config("at least one agreement frame is required".into()));
        }
        if !(self.low_confidence_fraction.is_finite() && self.low_confidence_fraction >= 0.0) {
            return Err(PipelineError::Config("low-confidence fraction must be non-negative".into()));
        }
        Ok(())
    }
}

/// Least-squares intersection of back-projected rays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// Root-mean-square distance from `point` to the rays, mm.
    pub residual: f64,
}

/// Smallest-to-largest eigenvalue ratio of the normal matrix below which the
/// rays are treated as parallel.
const DEGENERATE_RATIO: f64 = 1e-6;

/// Point minimizing the summed squared distances to rays `(origin, unit direction)`.
pub fn triangulate_rays(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Triangulation, PipelineError> {
    if rays.len() < 2 {
        return Err(PipelineError::TooFewRays(rays.len()));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, d) in rays {
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c;
    }
    let eig = a.symmetric_eigenvalues();
    let ratio = eig.min() / eig.max();
    if !(ratio > DEGENERATE_RATIO) {
        return Err(PipelineError::DegenerateRays(ratio));
    }
    let point = a.cholesky().ok_or(PipelineError::DegenerateRays(ratio))?.solve(&b);
    let ss: f64 = rays.iter().map(|(c, d)| ((point - c) - d * d.dot(&(point - c))).norm_squared()).sum();
    Ok(Triangulation { point, residual: (ss / rays.len() as f64).sqrt() })
}

/// Triangulates one point from `(camera id, pixel)` observations.
/// `undistort` removes lens distortion from the pixels first.
pub fn triangulate(rig: &CameraRig, pixels: &[(u32, Vector2<f64>)], undistort: bool) -> Result<Triangulation, PipelineError> {
    let rays = pixels
        .iter()
        .map(|(id, px)| {
            let cam = rig.camera(*id).ok_or(PipelineError::UnknownCamera(*id))?;
            Ok((cam.center(), cam.ray_direction(px, undistort)))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    triangulate_rays(&rays)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Triangulated centroids of one frame; `None` for keypoints seen by fewer
/// than two cameras or whose rays are degenerate.
pub fn triangulate_centroids(
    provider: &dyn PcmProvider,
    rig: &CameraRig,
    frame_index: u32,
    floor: f64,
) -> Result<Vec<Option<Triangulation>>, PipelineError> {
    let mut rays: Vec<Vec<(Vector3<f64>, Vector3<f64>)>> = vec![Vec::new(); NUM_KEYPOINTS];
    for cam in rig.cameras() {
        let frame = provider.frame(cam.id, frame_index, 0)?;
        for k in Keypoint::ALL {
            if let Some(px) = frame.centroid(k, floor) {
                rays[k.index()].push((cam.center(), cam.ray_direction(&px, !frame.meta.undistorted)));
            }
        }
    }
    Ok(rays.iter().map(|r| triangulate_rays(r).ok()).collect())
}

/// Link lengths implied by one frame of keypoint positions. Trunk and head
/// links keep the template's proportions, scaled to the measured hip-center to
/// neck distance.
pub fn measure_links(template: &SkeletonModel, kp: &[Vector3<f64>; NUM_KEYPOINTS]) -> Result<BTreeMap<String, f64>, PipelineError> {
    let mut t = template.link_lengths();
    let get = |t: &BTreeMap<String, f64>, name: &str| {
        t.get(name).copied().ok_or_else(|| PipelineError::Config(format!("skeleton template lacks joint `{name}`")))
    };
    let p = |k: Keypoint| kp[k.index()];
    let mid_hip = (p(Keypoint::RHip) + p(Keypoint::LHip)) * 0.5;
    let trunk = p(Keypoint::Neck) - mid_hip;
    let (waist, chest, neck) = (get(&t, "waist")?, get(&t, "chest")?, get(&t, "neck")?);
    let scale = trunk.norm() / (waist + chest + neck);
    let chest_pos = mid_hip + trunk * ((waist + chest) / (waist + chest + neck));
    for name in ["waist", "chest", "neck", "head"] {
        let v = get(&t, name)? * scale;
        t.insert(name.into(), v);
    }
    let hip_half = (p(Keypoint::RHip) - p(Keypoint::LHip)).norm() * 0.5;
    let pairs: [(&str, f64); 12] = [
        ("r_shoulder", (p(Keypoint::RShoulder) - chest_pos).norm()),
        ("l_shoulder", (p(Keypoint::LShoulder) - chest_pos).norm()),
        ("r_elbow", (p(Keypoint::RElbow) - p(Keypoint::RShoulder)).norm()),
        ("l_elbow", (p(Keypoint::LElbow) - p(Keypoint::LShoulder)).norm()),
        ("r_wrist", (p(Keypoint::RWrist) - p(Keypoint::RElbow)).norm()),
        ("l_wrist", (p(Keypoint::LWrist) - p(Keypoint::LElbow)).norm()),
        ("r_hip", hip_half),
        ("l_hip", hip_half),
        ("r_knee", (p(Keypoint::RKnee) - p(Keypoint::RHip)).norm()),
        ("l_knee", (p(Keypoint::LKnee) - p(Keypoint::LHip)).norm()),
        ("r_ankle", (p(Keypoint::RAnkle) - p(Keypoint::RKnee)).norm()),
        ("l_ankle", (p(Keypoint::LAnkle) - p(Keypoint::LKnee)).norm()),
    ];
    for (name, v) in pairs {
        get(&t, name)?;
        t.insert(name.into(), v);
    }
    Ok(t)
}

/// Rough pose for the IK seed: root placed and oriented from the hips and
/// neck, shoulders and hips pointed at their children.
pub fn seed_pose(model: &SkeletonModel, kp: &[Vector3<f64>; NUM_KEYPOINTS]) -> Result<Pose, PipelineError> {
    let p = |k: Keypoint| kp[k.index()];
    let mut q = model.zero_pose();
    let zero = model.forward_kinematics(&q)?;
    let x_ref = (zero.keypoint(Keypoint::RHip) - zero.keypoint(Keypoint::LHip)).normalize();
    let z_ref = (zero.keypoint(Keypoint::Neck) - zero.mid_hip()).normalize();
    let frame = |x: Vector3<f64>, z: Vector3<f64>| {
        let x = x.normalize();
        let z = (z - x * x.dot(&z)).normalize();
        Matrix3::from_columns(&[x, z.cross(&x), z])
    };
    let mid_hip = (p(Keypoint::RHip) + p(Keypoint::LHip)) * 0.5;
    let r_obs = frame(p(Keypoint::RHip) - p(Keypoint::LHip), p(Keypoint::Neck) - mid_hip);
    let r_ref = frame(x_ref, z_ref);
    let root = Rotation3::from_matrix(&(r_obs * r_ref.transpose())).scaled_axis();
    let range = model.dof_range(0);
    let t = mid_hip - zero.mid_hip();
    q.0.as_mut_slice()[range.start..range.start + 6].copy_from_slice(&[t.x, t.y, t.z, root.x, root.y, root.z]);

    let aim = [
        ("r_shoulder", Keypoint::RElbow),
        ("l_shoulder", Keypoint::LElbow),
        ("r_hip", Keypoint::RKnee),
        ("l_hip", Keypoint::LKnee),
    ];
    for (name, child) in aim {
        let Some(j) = model.joint_index(name) else { continue };
        let child_joint = model.attachment(child).joint;
        let rots = model.joint_rotations(&q)?;
        let pos = model.forward_kinematics(&q)?;
        let here = pos.joints[j];
        // child direction in the joint's own frame at zero local rotation
        let parent_rot = model.joints()[j].parent.map(|pi| rots[pi]).unwrap_or_else(Matrix3::identity);
        let c = &model.joints()[child_joint];
        let want = parent_rot.transpose() * (p(child) - here);
        if want.norm() < 1e-9 {
            continue;
        }
        let r = Rotation3::rotation_between(&c.direction, &want.normalize()).unwrap_or_else(Rotation3::identity);
        let v = r.scaled_axis();
        let s = model.dof_range(j).start;
        q.0.as_mut_slice()[s..s + 3].copy_from_slice(&[v.x, v.y, v.z]);
    }
    Ok(q)
}

/// Result of the initialization step.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub model: SkeletonModel,
    pub pose: Pose,
    pub positions: JointPositions,
    /// Frame the initial pose belongs to (the last agreement frame).
    pub frame: u32,
    pub agreement_frames: Vec<u32>,
}

fn init_ik_settings(base: &IkSettings) -> IkSettings {
    IkSettings { max_iterations: base.max_iterations.max(300), residual_tolerance: 1e-10, step_tolerance: 1e-10, ..base.clone() }
}

/// Identifies link lengths and head-point offsets from a run of frames whose
/// centroids agree in 3D, and fits the initial pose.
pub fn initialize(
    provider: &dyn PcmProvider,
    rig: &CameraRig,
    template: &SkeletonModel,
    settings: &InitSettings,
    ik_settings: &IkSettings,
) -> Result<Initialization, PipelineError> {
    let range = provider.frame_range();
    let mut failures = [0usize; NUM_KEYPOINTS];
    let mut run: Vec<(u32, [Vector3<f64>; NUM_KEYPOINTS])> = Vec::new();
    let mut scanned = 0;
    let need = settings.min_agreement_frames.max(1);
    for f in range.clone() {
        scanned += 1;
        let tri = triangulate_centroids(provider, rig, f, settings.centroid_floor)?;
        let mut agree = true;
        for (i, t) in tri.iter().enumerate() {
            if !matches!(t, Some(t) if t.residual < settings.agreement_residual_mm) {
                failures[i] += 1;
                agree = false;
            }
        }
        if !agree {
            run.clear();
            continue;
        }
        run.push((f, std::array::from_fn(|i| tri[i].unwrap().point)));
        if run.len() == need {
            break;
        }
    }
    if run.len() < need {
        let mut worst: Vec<(Keypoint, usize)> =
            Keypoint::ALL.iter().map(|&k| (k, failures[k.index()])).filter(|(_, n)| *n > 0).collect();
        worst.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.index().cmp(&b.0.index())));
        worst.truncate(5);
        return Err(PipelineError::InitFailed { frames: scanned, worst });
    }
    info!("initialization agreement on frames {}..={}", run[0].0, run[need - 1].0);

    let mut per_link: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (_, kp) in &run {
        for (name, v) in measure_links(template, kp)? {
            per_link.entry(name).or_default().push(v);
        }
    }
    let lengths: BTreeMap<String, f64> = per_link.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect();
    let sized = template.with_link_lengths(&lengths)?;

    // Fit every agreement frame, then identify the fixed keypoint offsets in
    // their joints' frames.
    let ik_init = init_ik_settings(ik_settings);
    let offset_keys: Vec<Keypoint> =
        Keypoint::ALL.into_iter().filter(|&k| template.attachment(k).offset.norm() > 0.0).collect();
    let mut offsets: Vec<[Vec<f64>; 3]> = vec![Default::default(); offset_keys.len()];
    let mut q = seed_pose(&sized, &run[0].1)?;
    for (_, kp) in &run {
        q = ik::solve(&sized, &q, &ik::uniform_targets(kp), &ik_init)?.pose;
        let rots = sized.joint_rotations(&q)?;
        let pos = sized.forward_kinematics(&q)?;
        for (slot, &k) in offsets.iter_mut().zip(&offset_keys) {
            let j = sized.attachment(k).joint;
            let local = rots[j].transpose() * (kp[k.index()] - pos.joints[j]);
            for c in 0..3 {
                slot[c].push(local[c]);
            }
        }
    }
    let new_offsets: Vec<(Keypoint, Vector3<f64>)> = offset_keys
        .iter()
        .zip(offsets.iter_mut())
        .map(|(&k, s)| (k, Vector3::new(median(&mut s[0]), median(&mut s[1]), median(&mut s[2]))))
        .collect();
    let model = sized.with_keypoint_offsets(&new_offsets);
    let (frame, last) = run[need - 1];
    let sol = ik::solve(&model, &q, &ik::uniform_targets(&last), &ik_init)?;
    let positions = model.forward_kinematics(&sol.pose)?;
    debug!("initial fit objective {:.4} mm²", sol.objective);
    Ok(Initialization {
        model,
        pose: sol.pose,
        positions,
        frame,
        agreement_frames: run.iter().map(|r| r.0).collect(),
    })
}

/// One tracked frame.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame: u32,
    /// Final (stage-2) pose.
    pub pose: Pose,
    pub stage1_pose: Pose,
    pub stage1: JointPositions,
    pub stage2: JointPositions,
    pub markers: VirtualMarkerSet,
    /// Rotation (degrees) used for lower-body maps, per camera in rig order.
    pub rotations: Vec<i32>,
    pub no_evidence: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl FrameRecord {
    pub fn score(&self) -> f64 {
        self.markers.total_score()
    }
}

/// A tracked sequence with enough context to write its output files.
#[derive(Debug, Clone)]
pub struct MotionSequence {
    pub sample_rate_hz: f64,
    pub camera_ids: Vec<u32>,
    pub frames: Vec<FrameRecord>,
}

fn fmt_row(out: &mut String, fields: std::fmt::Arguments) {
    out.write_fmt(fields).unwrap();
    out.push('\n');
}

impl MotionSequence {
    fn time(&self, frame: u32) -> f64 {
        frame as f64 / self.sample_rate_hz
    }

    /// `frame,time_s,label,x_mm,y_mm,z_mm,weight,stage` for both stages.
    pub fn positions_csv(&self) -> String {
        let mut s = String::from("frame,time_s,label,x_mm,y_mm,z_mm,weight,stage\n");
        for r in &self.frames {
            let t = self.time(r.frame);
            for (stage, pos) in [("stage1", &r.stage1), ("stage2", &r.stage2)] {
                for k in Keypoint::ALL {
                    let p = pos.keypoint(k);
                    let w = r.markers.markers[k.index()].weight;
                    fmt_row(&mut s, format_args!("{},{t},{k},{},{},{},{w},{stage}", r.frame, p.x, p.y, p.z));
                }
            }
        }
        s
    }

    /// `frame,time_s,q0..qN` with the stage-2 pose.
    pub fn pose_csv(&self) -> String {
        let n = self.frames.first().map(|r| r.pose.len()).unwrap_or(0);
        let mut s = String::from("frame,time_s");
        for i in 0..n {
            let _ = write!(s, ",q{i}");
        }
        s.push('\n');
        for r in &self.frames {
            let _ = write!(s, "{},{}", r.frame, self.time(r.frame));
            for v in r.pose.as_slice() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// `frame,time_s,pcm_score_total,no_evidence,rot_cam{id}…`
    pub fn frames_csv(&self) -> String {
        let mut s = String::from("frame,time_s,pcm_score_total,no_evidence");
        for id in &self.camera_ids {
            let _ = write!(s, ",rot_cam{id}");
        }
        s.push('\n');
        for r in &self.frames {
            let _ = write!(s, "{},{},{},{}", r.frame, self.time(r.frame), r.score(), r.no_evidence as u8);
            for a in &r.rotations {
                let _ = write!(s, ",{a}");
            }
            s.push('\n');
        }
        s
    }

    /// Per-frame, per-keypoint lattice offsets, weights and camera samples.
    pub fn diagnostics_csv(&self, rig: &CameraRig) -> String {
        let mut s = VirtualMarkerSet::diagnostics_header(rig);
        s.push('\n');
        for r in &self.frames {
            for row in r.markers.diagnostics_rows(r.frame) {
                s.push_str(&row);
                s.push('\n');
            }
        }
        s
    }

    /// Run metadata: configuration echo, link lengths and frame span.
    pub fn metadata_json(&self, config: &PipelineConfig, model: &SkeletonModel) -> String {
        let no_evidence: Vec<u32> = self.frames.iter().filter(|r| r.no_evidence).map(|r| r.frame).collect();
        let fallbacks = self
            .frames
            .iter()
            .flat_map(|r| &r.diagnostics)
            .filter(|d| matches!(d, Diagnostic::RotationFallback { .. }))
            .count();
        let v = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "link_lengths_mm": model.link_lengths(),
            "camera_ids": self.camera_ids,
            "first_frame": self.frames.first().map(|r| r.frame),
            "last_frame": self.frames.last().map(|r| r.frame),
            "no_evidence_frames": no_evidence,
            "rotation_fallbacks": fallbacks,
        });
        serde_json::to_string_pretty(&v).unwrap() + "\n"
    }

    /// Writes `positions.csv`, `pose.csv`, `frames.csv`, `diagnostics.csv`
    /// and `run.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path, rig: &CameraRig, config: &PipelineConfig, model: &SkeletonModel) -> Result<(), PipelineError> {
        let files = [
            ("positions.csv", self.positions_csv()),
            ("pose.csv", self.pose_csv()),
            ("frames.csv", self.frames_csv()),
            ("diagnostics.csv", self.diagnostics_csv(rig)),
            ("run.json", self.metadata_json(config, model)),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes()).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }

    /// Final keypoint positions per frame.
    pub fn keypoint_track(&self) -> Vec<(u32, [Vector3<f64>; NUM_KEYPOINTS])> {
        self.frames.iter().map(|r| (r.frame, r.stage2.keypoints)).collect()
    }
}

struct Stage1 {
    markers: VirtualMarkerSet,
    pose: Pose,
    positions: JointPositions,
    rotations: Vec<i32>,
    no_evidence: bool,
    diagnostics: Vec<Diagnostic>,
}

/// Lattice search and stage-1 solve for one frame.
#[allow(clippy::too_many_arguments)]
fn stage1(
    provider: &dyn PcmProvider,
    rig: &CameraRig,
    model: &SkeletonModel,
    frame: u32,
    centers: &JointPositions,
    tilt_from: &JointPositions,
    warm: &Pose,
    config: &PipelineConfig,
) -> Result<Stage1, PipelineError> {
    let (plan, mut diagnostics) = plan_rotations(tilt_from, rig, &config.lattice);
    let (evidence, d) = FrameEvidence::load(provider, rig, frame, Some(&plan))?;
    diagnostics.extend(d);
    let low = config.low_confidence_fraction * rig.len() as f64;
    let markers = build_markers(&evidence, &centers.keypoints, &config.lattice, low);
    let sol = ik::solve(model, warm, &markers.targets(), &config.ik)?;
    if sol.no_evidence {
        warn!("frame {frame}: no heatmap evidence, holding the previous pose");
    }
    let positions = model.forward_kinematics(&sol.pose)?;
    Ok(Stage1 {
        rotations: evidence.rotations_used(),
        markers,
        pose: sol.pose,
        positions,
        no_evidence: sol.no_evidence,
        diagnostics,
    })
}

/// Tracks frames `start.0 + 1 .. end` from the initial pose at `start.0`.
/// The initial frame is the first record of the result.
pub fn track(
    provider: &dyn PcmProvider,
    rig: &CameraRig,
    model: &SkeletonModel,
    start: (u32, &Pose),
    end: u32,
    config: &PipelineConfig,
) -> Result<MotionSequence, PipelineError> {
    config.validate()?;
    let (t0, pose0) = start;
    if end <= t0 {
        return Err(PipelineError::EmptyRange(t0..end));
    }
    let pos0 = model.forward_kinematics(pose0)?;
    let (evidence, _) = FrameEvidence::load(provider, rig, t0, None)?;
    let markers0 = VirtualMarkerSet {
        markers: Keypoint::ALL
            .iter()
            .map(|&k| {
                let p = pos0.keypoint(k);
                let (weight, samples) = pcm_weight(&evidence, k, &p);
                crate::tracker::Marker {
                    position: p,
                    weight,
                    offset: [0; 3],
                    samples,
                    low_confidence: weight < config.low_confidence_fraction * rig.len() as f64,
                }
            })
            .collect(),
    };
    let first = FrameRecord {
        frame: t0,
        pose: pose0.clone(),
        stage1_pose: pose0.clone(),
        stage1: pos0.clone(),
        stage2: pos0.clone(),
        markers: markers0,
        rotations: vec![0; rig.len()],
        no_evidence: false,
        diagnostics: Vec::new(),
    };
    let coeffs = design_biquad(&config.filter)?;
    let frames = match config.filter.mode {
        FilterMode::Causal => track_causal(provider, rig, model, first, end, config, coeffs)?,
        FilterMode::Offline => track_offline(provider, rig, model, first, end, config, coeffs)?,
    };
    Ok(MotionSequence {
        sample_rate_hz: config.filter.sample_rate_hz,
        camera_ids: rig.cameras().iter().map(|c| c.id).collect(),
        frames,
    })
}

fn track_causal(
    provider: &dyn PcmProvider,
    rig: &CameraRig,
    model: &SkeletonModel,
    first: FrameRecord,
    end: u32,
    config: &PipelineConfig,
    coeffs: smooth::Biquad,
) -> Result<Vec<FrameRecord>, PipelineError> {
    let mut filter = FilterState::new(coeffs, NUM_KEYPOINTS);
    filter.prime(&first.stage2.keypoints)?;
    let mut out = vec![first];
    for t in out[0].frame + 1..end {
        let prev = out.last().unwrap();
        let centers = match config.lattice_center {
            LatticeCenter::Smoothed => &prev.stage2,
            LatticeCenter::Raw => &prev.stage1,
        };
        let s1 = stage1(provider, rig, model, t, centers, &prev.stage2, &prev.pose, config)?;
        let (pose, stage2) = if s1.no_evidence {
            // hold the last pose and restart the filter there
            filter.prime(&prev.stage2.keypoints)?;
            (prev.pose.clone(), prev.stage2.clone())
        } else {
            let (sol, _) = smooth::smooth_and_refit(model, &s1.pose, &mut filter, &config.ik)?;
            let pos = model.forward_kinematics(&sol.pose)?;
            (sol.pose, pos)
        };
        let rec = FrameRecord {
            frame: t,
            pose,
            stage1_pose: s1.pose,
            stage1: s1.positions,
            stage2,
            markers: s1.markers,
            rotations: s1.rotations,
            no_evidence: s1.no_evidence,
            diagnostics: s1.diagnostics,
        };
        out.push(rec);
    }
    Ok(out)
}

/// Two passes: stage 1 over the whole range (lattice centered on the previous
/// stage-1 positions), zero-phase filtering, then stage-2 solves.
fn track_offline(
    provider: &dyn PcmProvider,
    rig: &CameraRig,
    model: &SkeletonModel,
    first: FrameRecord,
    end: u32,
    config: &PipelineConfig,
    coeffs: smooth::Biquad,
) -> Result<Vec<FrameRecord>, PipelineError> {
    let mut out = vec![first];
    for t in out[0].frame + 1..end {
        let prev = out.last().unwrap();
        let s1 = stage1(provider, rig, model, t, &prev.stage1, &prev.stage1, &prev.stage1_pose, config)?;
        out.push(FrameRecord {
            frame: t,
            pose: s1.pose.clone(),
            stage1_pose: s1.pose,
            stage1: s1.positions.clone(),
            stage2: s1.positions,
            markers: s1.markers,
            rotations: s1.rotations,
            no_evidence: s1.no_evidence,
            diagnostics: s1.diagnostics,
        });
    }
    let series: Vec<Vec<Vector3<f64>>> = out.iter().map(|r| r.stage1.keypoints.to_vec()).collect();
    let smoothed = smooth::filtfilt_points(&coeffs, &series);
    for (r, targets) in out.iter_mut().zip(&smoothed) {
        let sol = smooth::refit(model, &r.stage1_pose, targets, &config.ik)?;
        r.stage2 = model.forward_kinematics(&sol.pose)?;
        r.pose = sol.pose;
    }
    Ok(out)
}
