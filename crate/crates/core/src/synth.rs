//! Synthetic multi-camera scenes: a parametric ground-truth motion, a virtual
//! camera ring, and Gaussian heatmaps rendered from the projected keypoints,
//! with optional noise and a tilt-dependent lower-body attenuation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{rotate_pixel, CalibError, Camera, CameraRig, Projection};
use crate::io::write_atomic;
use crate::pcm::{quantize_rotation, DirPcmStore, FrameMeta, HeatmapFrame, PcmError, PcmProvider};
use crate::skeleton::{JointPositions, Keypoint, Pose, SkeletonError, SkeletonModel};
use crate::tracker::trunk_tilt;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Spec(String),
    #[error("frame {frame} outside the scene's {frames} frames")]
    FrameOutOfRange { frame: u32, frames: u32 },
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Pcm(#[from] PcmError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scene parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Cameras evenly spaced on a horizontal circle, all looking at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub count: u32,
    pub radius_mm: f64,
    pub height_mm: f64,
    pub target_mm: [f64; 3],
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
    /// Azimuth of the first camera; the default puts four cameras in the
    /// corners of a room.
    pub start_azimuth_deg: f64,
}

impl Default for RigSpec {
    fn default() -> RigSpec {
        RigSpec {
            count: 4,
            radius_mm: 2970.0,
            height_mm: 1500.0,
            target_mm: [0.0, 0.0, 900.0],
            focal_px: 800.0,
            width: 1024,
            height: 768,
            start_azimuth_deg: 45.0,
        }
    }
}

impl RigSpec {
    pub fn build(&self) -> Result<CameraRig, SynthError> {
        let target = Vector3::from(self.target_mm);
        let cams = (0..self.count)
            .map(|i| {
                let az = (self.start_azimuth_deg + 360.0 * i as f64 / self.count as f64).to_radians();
                let pos = Vector3::new(self.radius_mm * az.cos(), self.radius_mm * az.sin(), self.height_mm);
                Camera::look_at(i, (self.width, self.height), self.focal_px, pos, target)
            })
            .collect();
        Ok(CameraRig::new(cams)?)
    }
}

/// One scalar trajectory of a DOF over time (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Curve {
    Constant { value: f64 },
    Sine { offset: f64, amplitude: f64, freq_hz: f64, phase_rad: f64 },
    Linear { start: f64, rate_per_s: f64 },
    /// Smooth (half-cosine) transition from `from` to `to` between the two times.
    Ramp { start_s: f64, end_s: f64, from: f64, to: f64 },
    /// Catmull–Rom spline through the knots, constant outside them.
    Spline { times_s: Vec<f64>, values: Vec<f64> },
}

impl Curve {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Curve::Constant { value } => *value,
            Curve::Sine { offset, amplitude, freq_hz, phase_rad } => {
                offset + amplitude * (2.0 * PI * freq_hz * t + phase_rad).sin()
            }
            Curve::Linear { start, rate_per_s } => start + rate_per_s * t,
            Curve::Ramp { start_s, end_s, from, to } => {
                let u = ((t - start_s) / (end_s - start_s)).clamp(0.0, 1.0);
                from + (to - from) * 0.5 * (1.0 - (PI * u).cos())
            }
            Curve::Spline { times_s, values } => catmull_rom(times_s, values, t),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Curve::Ramp { start_s, end_s, .. } if !(end_s > start_s) => Err("ramp end must follow its start".into()),
            Curve::Spline { times_s, values } => {
                if times_s.len() < 2 || times_s.len() != values.len() {
                    return Err("spline needs at least two knots with one value each".into());
                }
                if times_s.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err("spline knot times must increase".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn catmull_rom(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    let n = ts.len();
    if t <= ts[0] {
        return vs[0];
    }
    if t >= ts[n - 1] {
        return vs[n - 1];
    }
    let i = ts.windows(2).position(|w| t < w[1]).unwrap();
    let h = ts[i + 1] - ts[i];
    // finite-difference tangents (value per second), one-sided at the ends
    let tangent = |j: usize| {
        let (a, b) = (j.saturating_sub(1), (j + 1).min(n - 1));
        (vs[b] - vs[a]) / (ts[b] - ts[a])
    };
    let (m0, m1) = (tangent(i) * h, tangent(i + 1) * h);
    let u = (t - ts[i]) / h;
    let (u2, u3) = (u * u, u * u * u);
    (2.0 * u3 - 3.0 * u2 + 1.0) * vs[i] + (u3 - 2.0 * u2 + u) * m0 + (-2.0 * u3 + 3.0 * u2) * vs[i + 1] + (u3 - u2) * m1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Stationary,
    Walk,
    Handstand,
    Cartwheel,
}

fn sine(amplitude: f64, freq_hz: f64, phase_rad: f64, offset: f64) -> Curve {
    Curve::Sine { offset, amplitude, freq_hz, phase_rad }
}

fn constant(value: f64) -> Curve {
    Curve::Constant { value }
}

impl Preset {
    /// Curves keyed by DOF name (`joint.k`).
    pub fn curves(self) -> BTreeMap<String, Curve> {
        let mut c = BTreeMap::new();
        let mut put = |k: &str, v: Curve| {
            c.insert(k.to_string(), v);
        };
        // relaxed arms: rotated down from the T-pose, elbows slightly bent
        put("r_shoulder.1", constant(1.2));
        put("l_shoulder.1", constant(-1.2));
        put("r_elbow.0", constant(0.3));
        put("l_elbow.0", constant(0.3));
        match self {
            Preset::Stationary => {}
            Preset::Walk => {
                // slow stroll: 0.5 Hz stride, 100 mm/s forward
                let f = 0.5;
                put("pelvis.1", Curve::Linear { start: -250.0, rate_per_s: 100.0 });
                put("pelvis.2", sine(8.0, 2.0 * f, 0.0, 0.0));
                put("waist.2", sine(0.06, f, PI, 0.0));
                put("r_hip.0", sine(0.15, f, 0.0, 0.0));
                put("l_hip.0", sine(0.15, f, PI, 0.0));
                put("r_knee.0", sine(0.12, f, -PI / 2.0, 0.2));
                put("l_knee.0", sine(0.12, f, PI / 2.0, 0.2));
                put("r_ankle.0", sine(0.06, f, PI / 2.0, 0.0));
                put("l_ankle.0", sine(0.06, f, -PI / 2.0, 0.0));
                put("r_shoulder.0", sine(0.12, f, PI, 0.0));
                put("l_shoulder.0", sine(0.12, f, 0.0, 0.0));
            }
            Preset::Handstand => {
                // upright for 1 s, inverts slowly over 7 s, then holds with
                // gentle leg motion
                put("pelvis.3", Curve::Ramp { start_s: 1.0, end_s: 8.0, from: 0.0, to: PI });
                put("r_hip.0", sine(0.1, 0.2, 0.0, 0.0));
                put("l_hip.0", sine(0.1, 0.2, PI, 0.0));
                put("r_knee.0", sine(0.1, 0.2, 0.0, 0.2));
                put("l_knee.0", sine(0.1, 0.2, PI, 0.2));
                put("r_shoulder.1", constant(-0.2));
                put("l_shoulder.1", constant(0.2));
            }
            Preset::Cartwheel => {
                // one turn about the facing axis every 4 s while moving sideways
                put("pelvis.4", Curve::Linear { start: 0.0, rate_per_s: -PI / 2.0 });
                put("pelvis.0", Curve::Linear { start: -300.0, rate_per_s: 150.0 });
                put("r_shoulder.1", constant(-0.1));
                put("l_shoulder.1", constant(0.1));
                put("r_hip.1", constant(-0.3));
                put("l_hip.1", constant(0.3));
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSpec {
    pub preset: Option<Preset>,
    /// Per-DOF curves; override or extend the preset's.
    pub curves: BTreeMap<String, Curve>,
}

impl Default for MotionSpec {
    fn default() -> MotionSpec {
        MotionSpec { preset: Some(Preset::Stationary), curves: BTreeMap::new() }
    }
}

/// Heatmap rendering noise. All draws are seeded per
/// `(seed, frame, camera, keypoint, rotation)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub seed: u64,
    /// Standard deviation of the peak position, image px.
    pub jitter_px: f64,
    /// Relative standard deviation of the peak amplitude.
    pub amplitude: f64,
    /// Probability of a spurious second peak in a channel.
    pub false_peak_rate: f64,
    pub false_peak_amplitude: f64,
    /// Spurious peaks land uniformly within this distance of the true one.
    pub false_peak_radius_px: f64,
}

impl Default for NoiseSpec {
    fn default() -> NoiseSpec {
        NoiseSpec {
            seed: 0,
            jitter_px: 0.0,
            amplitude: 0.0,
            false_peak_rate: 0.0,
            false_peak_amplitude: 0.5,
            false_peak_radius_px: 40.0,
        }
    }
}

/// Lower-body peak attenuation as a function of the trunk tilt seen in the
/// rendered image: 1 up to `onset_deg`, then linear down to `floor` at 180°.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltBias {
    pub enabled: bool,
    pub onset_deg: f64,
    pub floor: f64,
}

impl Default for TiltBias {
    fn default() -> TiltBias {
        TiltBias { enabled: false, onset_deg: 45.0, floor: 0.15 }
    }
}

impl TiltBias {
    pub fn multiplier(&self, tilt_deg: f64) -> f64 {
        let a = tilt_deg.abs().min(180.0);
        if !self.enabled || a <= self.onset_deg {
            1.0
        } else {
            1.0 - (1.0 - self.floor) * (a - self.onset_deg) / (180.0 - self.onset_deg)
        }
    }
}

/// Which rotated renders [`generate`] writes besides rotation 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum RotationRenders {
    None,
    /// Angles a tracker would plan from the previous frame's true pose, plus
    /// a band of neighbouring whole degrees.
    Planned { threshold_deg: f64, band_deg: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: u32,
    pub sample_rate_hz: f64,
    pub rig: RigSpec,
    /// Subject link lengths (mm); missing links keep the template value.
    pub link_lengths: BTreeMap<String, f64>,
    pub motion: MotionSpec,
    /// Gaussian spread in image pixels.
    pub sigma_px: f64,
    /// Heatmap cells per image pixel.
    pub heatmap_scale: f32,
    pub noise: NoiseSpec,
    pub tilt_bias: TiltBias,
    pub rotations: RotationRenders,
}

/// Default subject: a little taller in the legs and shorter in the arms than
/// the template, trunk scaled uniformly.
fn default_subject() -> BTreeMap<String, f64> {
    let template = SkeletonModel::human40().link_lengths();
    let factor = |name: &str| match name {
        "waist" | "chest" | "neck" | "head" => 1.04,
        "r_shoulder" | "l_shoulder" => 1.08,
        "r_elbow" | "l_elbow" | "r_wrist" | "l_wrist" => 0.95,
        "r_hip" | "l_hip" => 1.1,
        _ => 1.06,
    };
    template.into_iter().map(|(k, v)| (k.clone(), v * factor(&k))).collect()
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            frames: 300,
            sample_rate_hz: 60.0,
            rig: RigSpec::default(),
            link_lengths: default_subject(),
            motion: MotionSpec::default(),
            sigma_px: 8.0,
            heatmap_scale: 0.25,
            noise: NoiseSpec::default(),
            tilt_bias: TiltBias::default(),
            rotations: RotationRenders::None,
        }
    }
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<SceneSpec, SynthError> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization cannot fail") + "\n"
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.frames == 0 {
            return bad("frame count must be positive");
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad("sample rate must be positive");
        }
        if self.rig.count < 2 {
            return bad("at least two cameras are required");
        }
        if !(self.sigma_px.is_finite() && self.sigma_px > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.heatmap_scale.is_finite() && self.heatmap_scale > 0.0) {
            return bad("heatmap scale must be positive");
        }
        let n = &self.noise;
        if !(n.jitter_px >= 0.0 && n.amplitude >= 0.0 && unit(n.false_peak_rate) && unit(n.false_peak_amplitude)) {
            return bad("noise parameters out of range");
        }
        if !(n.false_peak_radius_px >= 0.0) {
            return bad("false-peak radius must be non-negative");
        }
        let b = &self.tilt_bias;
        if !(unit(b.floor) && b.onset_deg >= 0.0 && b.onset_deg < 180.0) {
            return bad("tilt bias multipliers must lie in [0, 1] with onset below 180°");
        }
        for (name, c) in self.curves() {
            c.validate().map_err(|m| SynthError::Spec(format!("curve `{name}`: {m}")))?;
        }
        Ok(())
    }

    fn curves(&self) -> BTreeMap<String, Curve> {
        let mut c = self.motion.preset.map(Preset::curves).unwrap_or_default();
        c.extend(self.motion.curves.clone());
        c
    }
}

/// A ready-to-render scene; also a [`PcmProvider`] that renders any frame and
/// rotation on demand.
#[derive(Debug, Clone)]
pub struct Scene {
    spec: SceneSpec,
    rig: CameraRig,
    subject: SkeletonModel,
    /// `(dof index, curve)`
    curves: Vec<(usize, Curve)>,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Scene, SynthError> {
        spec.validate()?;
        let template = SkeletonModel::human40();
        let mut lengths = template.link_lengths();
        for (k, v) in &spec.link_lengths {
            if !lengths.contains_key(k) {
                return Err(SynthError::Spec(format!("unknown link `{k}`")));
            }
            lengths.insert(k.clone(), *v);
        }
        let subject = template.with_link_lengths(&lengths)?;
        let names = subject.dof_names();
        let curves = spec
            .curves()
            .into_iter()
            .map(|(name, c)| {
                let i = names.iter().position(|n| *n == name).ok_or_else(|| SynthError::Spec(format!("unknown DOF `{name}`")))?;
                Ok((i, c))
            })
            .collect::<Result<_, SynthError>>()?;
        let rig = spec.rig.build()?;
        Ok(Scene { spec, rig, subject, curves })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    /// The skeleton the scene is generated with (true link lengths).
    pub fn subject(&self) -> &SkeletonModel {
        &self.subject
    }

    fn check_frame(&self, frame: u32) -> Result<(), SynthError> {
        if frame >= self.spec.frames {
            return Err(SynthError::FrameOutOfRange { frame, frames: self.spec.frames });
        }
        Ok(())
    }

    pub fn pose(&self, frame: u32) -> Result<Pose, SynthError> {
        self.check_frame(frame)?;
        let t = frame as f64 / self.spec.sample_rate_hz;
        let mut q = self.subject.zero_pose();
        for (i, c) in &self.curves {
            q.0[*i] = c.eval(t);
        }
        Ok(q)
    }

    pub fn positions(&self, frame: u32) -> Result<JointPositions, SynthError> {
        Ok(self.subject.forward_kinematics(&self.pose(frame)?)?)
    }

    /// Renders camera `camera_id` at `frame` on the image rotated by `rotation_deg`.
    pub fn render(&self, camera_id: u32, frame: u32, rotation_deg: i32) -> Result<HeatmapFrame, SynthError> {
        let cam = self.rig.camera(camera_id).ok_or(SynthError::Spec(format!("no camera {camera_id}")))?;
        let positions = self.positions(frame)?;
        let scale = self.spec.heatmap_scale;
        let grid = |n: u32| ((n as f64 * scale as f64).round() as u32).max(1);
        let meta = FrameMeta {
            camera_id,
            frame_index: frame,
            rotation_deg: rotation_deg as f32,
            width: grid(cam.width),
            height: grid(cam.height),
            scale,
            undistorted: !cam.has_distortion(),
        };
        let mut out = HeatmapFrame::zeros(meta)?;
        let center = cam.image_center();
        let to_image = |p: &Vector3<f64>| -> Option<Vector2<f64>> {
            match cam.project(p) {
                Ok(Projection::InFront(px)) => Some(rotate_pixel(&px, rotation_deg as f64, &center)),
                _ => None,
            }
        };
        let tilt = match (to_image(&positions.keypoint(Keypoint::Neck)), to_image(&positions.mid_hip())) {
            (Some(n), Some(h)) => trunk_tilt(&n, &h).ok(),
            _ => None,
        };
        let lower_gain = tilt.map(|t| self.spec.tilt_bias.multiplier(t)).unwrap_or(1.0);
        let noise = &self.spec.noise;
        for k in Keypoint::ALL {
            let Some(px) = to_image(&positions.keypoint(k)) else { continue };
            let mut rng = channel_rng(noise.seed, frame, camera_id, k, rotation_deg);
            let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
            let jitter = Vector2::new(normal(&mut rng), normal(&mut rng)) * noise.jitter_px;
            let gain = if k.is_lower_body() { lower_gain } else { 1.0 };
            let amp = (gain * (1.0 + noise.amplitude * normal(&mut rng))).clamp(0.0, 1.0);
            let mut peaks = vec![(px + jitter, amp)];
            if rng.random::<f64>() < noise.false_peak_rate {
                let r = noise.false_peak_radius_px * rng.random::<f64>().sqrt();
                let a = rng.random::<f64>() * 2.0 * PI;
                peaks.push((px + Vector2::new(r * a.cos(), r * a.sin()), noise.false_peak_amplitude));
            }
            render_channel(&mut out, k, &peaks, self.spec.sigma_px)?;
        }
        Ok(out)
    }

    /// Rotation angles a tracker following the true motion would request for
    /// `frame` (planned from `frame − 1`), per camera.
    pub fn planned_rotations(&self, frame: u32, threshold_deg: f64) -> Result<Vec<i32>, SynthError> {
        let positions = self.positions(frame.saturating_sub(1))?;
        Ok(self
            .rig
            .cameras()
            .iter()
            .map(|cam| {
                let px = |p: Vector3<f64>| cam.project(&p).ok().and_then(|pr| pr.pixel());
                match (px(positions.keypoint(Keypoint::Neck)), px(positions.mid_hip())) {
                    (Some(n), Some(h)) => match trunk_tilt(&n, &h) {
                        Ok(t) if t.abs() >= threshold_deg => quantize_rotation(t),
                        _ => 0,
                    },
                    _ => 0,
                }
            })
            .collect())
    }
}

fn channel_rng(seed: u64, frame: u32, camera: u32, k: Keypoint, rotation: i32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = (rotation.rem_euclid(360)) as u64;
    rng.set_stream(((frame as u64) << 32) | ((camera as u64 & 0xfff) << 20) | ((k.index() as u64) << 12) | rot);
    rng
}

/// Writes the max of truncated (6σ) Gaussians into one channel.
fn render_channel(out: &mut HeatmapFrame, k: Keypoint, peaks: &[(Vector2<f64>, f64)], sigma_px: f64) -> Result<(), PcmError> {
    let s = out.meta.scale as f64;
    let sigma = sigma_px * s;
    let reach = 6.0 * sigma;
    let (w, h) = (out.width() as i64, out.height() as i64);
    let mut lo = (i64::MAX, i64::MAX);
    let mut hi = (i64::MIN, i64::MIN);
    for (c, a) in peaks {
        if *a <= 0.0 {
            continue;
        }
        let c = c * s;
        lo = (lo.0.min((c.x - reach).ceil() as i64), lo.1.min((c.y - reach).ceil() as i64));
        hi = (hi.0.max((c.x + reach).floor() as i64), hi.1.max((c.y + reach).floor() as i64));
    }
    let (x0, y0) = (lo.0.max(0), lo.1.max(0));
    let (x1, y1) = (hi.0.min(w - 1), hi.1.min(h - 1));
    if x1 < x0 || y1 < y0 {
        return Ok(());
    }
    let (ww, hh) = ((x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32);
    let mut data = vec![0f32; (ww * hh) as usize];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (c, a) in peaks {
        let c = c * s;
        for y in 0..hh {
            for x in 0..ww {
                let d = Vector2::new((x0 + x as i64) as f64 - c.x, (y0 + y as i64) as f64 - c.y);
                if d.norm() > reach {
                    continue;
                }
                let v = (a * (-d.norm_squared() * inv).exp()).clamp(0.0, 1.0) as f32;
                let cell = &mut data[(y * ww + x) as usize];
                *cell = cell.max(v);
            }
        }
    }
    out.set_window(k, (x0 as u32, y0 as u32), (ww, hh), data)
}

impl PcmProvider for Scene {
    fn frame(&self, camera_id: u32, frame_index: u32, rotation_deg: i32) -> Result<Arc<HeatmapFrame>, PcmError> {
        if frame_index >= self.spec.frames || self.rig.camera(camera_id).is_none() {
            return Err(PcmError::FrameMissing { camera: camera_id, frame: frame_index });
        }
        self.render(camera_id, frame_index, rotation_deg).map(Arc::new).map_err(|e| match e {
            SynthError::Pcm(p) => p,
            _ => PcmError::FrameMissing { camera: camera_id, frame: frame_index },
        })
    }

    fn frame_range(&self) -> Range<u32> {
        0..self.spec.frames
    }
}

/// Ground-truth keypoint and joint positions of one frame.
pub fn ground_truth_positions(spec: &SceneSpec, frame: u32) -> Result<JointPositions, SynthError> {
    Scene::new(spec.clone())?.positions(frame)
}

/// `frame,time_s,label,x_mm,y_mm,z_mm,weight,stage` rows for the true motion.
pub fn truth_positions_csv(scene: &Scene) -> Result<String, SynthError> {
    let mut s = String::from("frame,time_s,label,x_mm,y_mm,z_mm,weight,stage\n");
    for f in 0..scene.spec.frames {
        let t = f as f64 / scene.spec.sample_rate_hz;
        let pos = scene.positions(f)?;
        for k in Keypoint::ALL {
            let p = pos.keypoint(k);
            let _ = writeln!(s, "{f},{t},{k},{},{},{},1,truth", p.x, p.y, p.z);
        }
    }
    Ok(s)
}

/// `frame,time_s,q0..qN` for the true motion.
pub fn truth_pose_csv(scene: &Scene) -> Result<String, SynthError> {
    let n = scene.subject.total_dof();
    let mut s = String::from("frame,time_s");
    for i in 0..n {
        let _ = write!(s, ",q{i}");
    }
    s.push('\n');
    for f in 0..scene.spec.frames {
        let _ = write!(s, "{f},{}", f as f64 / scene.spec.sample_rate_hz);
        for v in scene.pose(f)?.as_slice() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// What [`generate`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateReport {
    pub pcm_files: usize,
    pub rotated_files: usize,
    pub calib: PathBuf,
    pub pcm_dir: PathBuf,
    pub skeleton: PathBuf,
}

/// Writes a complete dataset under `out`: `calib.json`, `skeleton.json` (the
/// template, without the subject's lengths), `scene.json`, ground truth
/// (`truth_positions.csv`, `truth_pose.csv`) and `pcm/`.
pub fn generate(spec: &SceneSpec, out: &Path) -> Result<GenerateReport, SynthError> {
    let scene = Scene::new(spec.clone())?;
    let io = |path: PathBuf, body: String| {
        write_atomic(&path, body.as_bytes()).map_err(|source| SynthError::Io { path: path.display().to_string(), source })
    };
    let calib = out.join("calib.json");
    io(calib.clone(), scene.rig.to_json())?;
    let skeleton = out.join("skeleton.json");
    io(skeleton.clone(), SkeletonModel::human40().to_json(None) + "\n")?;
    io(out.join("scene.json"), spec.to_json())?;
    io(out.join("truth_positions.csv"), truth_positions_csv(&scene)?)?;
    io(out.join("truth_pose.csv"), truth_pose_csv(&scene)?)?;

    let pcm_dir = out.join("pcm");
    let mut jobs: Vec<(u32, u32, i32)> = Vec::new();
    for f in 0..spec.frames {
        let planned = match &spec.rotations {
            RotationRenders::None => vec![0; scene.rig.len()],
            RotationRenders::Planned { threshold_deg, .. } => scene.planned_rotations(f, *threshold_deg)?,
        };
        for (cam, rot) in scene.rig.cameras().iter().zip(planned) {
            jobs.push((cam.id, f, 0));
            if let (RotationRenders::Planned { band_deg, .. }, true) = (&spec.rotations, rot != 0) {
                let band = *band_deg as i32;
                let mut angles: Vec<i32> =
                    (-band..=band).map(|d| quantize_rotation((rot + d) as f64)).filter(|&a| a != 0).collect();
                angles.sort_unstable();
                angles.dedup();
                jobs.extend(angles.into_iter().map(|a| (cam.id, f, a)));
            }
        }
    }
    jobs.par_iter().try_for_each(|&(cam, f, rot)| -> Result<(), SynthError> {
        DirPcmStore::store(&pcm_dir, &scene.render(cam, f, rot)?)?;
        Ok(())
    })?;
    let rotated = jobs.iter().filter(|j| j.2 != 0).count();
    Ok(GenerateReport { pcm_files: jobs.len(), rotated_files: rotated, calib, pcm_dir, skeleton })
}

/// Subject link lengths of a scene, for comparison with identified values.
pub fn subject_lengths(spec: &SceneSpec) -> Result<BTreeMap<String, f64>, SynthError> {
    Ok(Scene::new(spec.clone())?.subject.link_lengths())
}
