//! Temporal smoothing of keypoint trajectories and the second IK pass that
//! projects the smoothed positions back onto the skeleton.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ik::{self, IkError, IkSettings, IkSolution};
use crate::skeleton::{Pose, SkeletonModel, NUM_KEYPOINTS};

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist_hz} Hz)")]
    Cutoff { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("sample rate must be positive")]
    SampleRate,
    #[error("non-finite filter input")]
    NonFinite,
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error(transparent)]
    Ik(#[from] IkError),
    #[error(transparent)]
    Skeleton(#[from] crate::skeleton::SkeletonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Causal,
    /// Forward-backward (zero-phase); needs the whole sequence.
    Offline,
}

/// Second-order low-pass specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    pub mode: FilterMode,
}

impl Default for FilterSpec {
    fn default() -> FilterSpec {
        FilterSpec { cutoff_hz: 5.0, sample_rate_hz: 60.0, mode: FilterMode::Causal }
    }
}

/// `y = b0·x + b1·x₁ + b2·x₂ − a1·y₁ − a2·y₂`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// |H(e^{jω})| at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, self.b[1] * s1 + self.b[2] * s2);
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Butterworth low-pass biquad via the bilinear transform with pre-warping.
pub fn design_biquad(spec: &FilterSpec) -> Result<Biquad, SmoothError> {
    if !(spec.sample_rate_hz.is_finite() && spec.sample_rate_hz > 0.0) {
        return Err(SmoothError::SampleRate);
    }
    let nyquist = spec.sample_rate_hz / 2.0;
    if !(spec.cutoff_hz > 0.0 && spec.cutoff_hz < nyquist) {
        return Err(SmoothError::Cutoff { cutoff_hz: spec.cutoff_hz, nyquist_hz: nyquist });
    }
    let k = (std::f64::consts::PI * spec.cutoff_hz / spec.sample_rate_hz).tan();
    let k2 = k * k;
    let sqrt2 = std::f64::consts::SQRT_2;
    let norm = 1.0 / (1.0 + sqrt2 * k + k2);
    let b0 = k2 * norm;
    Ok(Biquad { b: [b0, 2.0 * b0, b0], a: [2.0 * (k2 - 1.0) * norm, (1.0 - sqrt2 * k + k2) * norm] })
}

/// Delay registers of one scalar channel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChannelState {
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
    primed: bool,
}

impl ChannelState {
    /// Fills every register with `x`.
    pub fn prime(&mut self, x: f64) {
        *self = ChannelState { x1: x, x2: x, y1: x, y2: x, primed: true };
    }

    pub fn step(&mut self, f: &Biquad, x: f64) -> f64 {
        if !self.primed {
            self.prime(x);
            return x;
        }
        let y = f.b[0] * x + f.b[1] * self.x1 + f.b[2] * self.x2 - f.a[0] * self.y1 - f.a[1] * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Filter registers for a set of 3D points (three scalar channels each).
#[derive(Debug, Clone)]
pub struct FilterState {
    coeffs: Biquad,
    channels: Vec<[ChannelState; 3]>,
}

impl FilterState {
    pub fn new(coeffs: Biquad, points: usize) -> FilterState {
        FilterState { coeffs, channels: vec![[ChannelState::default(); 3]; points] }
    }

    pub fn coeffs(&self) -> &Biquad {
        &self.coeffs
    }

    pub fn prime(&mut self, points: &[Vector3<f64>]) -> Result<(), SmoothError> {
        self.check(points)?;
        for (ch, p) in self.channels.iter_mut().zip(points) {
            for k in 0..3 {
                ch[k].prime(p[k]);
            }
        }
        Ok(())
    }

    fn check(&self, points: &[Vector3<f64>]) -> Result<(), SmoothError> {
        if points.len() != self.channels.len() {
            return Err(SmoothError::ChannelCount { expected: self.channels.len(), got: points.len() });
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(SmoothError::NonFinite);
        }
        Ok(())
    }

    /// One difference-equation step per channel; unprimed channels prime on
    /// their first sample and pass it through. The state is left untouched on
    /// error.
    pub fn step(&mut self, points: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>, SmoothError> {
        self.check(points)?;
        let f = self.coeffs;
        Ok(self
            .channels
            .iter_mut()
            .zip(points)
            .map(|(ch, p)| Vector3::new(ch[0].step(&f, p.x), ch[1].step(&f, p.y), ch[2].step(&f, p.z)))
            .collect())
    }
}

/// Applies the biquad to a whole series, primed with its first sample.
pub fn filter_series(f: &Biquad, x: &[f64]) -> Vec<f64> {
    let mut st = ChannelState::default();
    x.iter().map(|&v| st.step(f, v)).collect()
}

/// Zero-phase forward-backward filtering, each pass primed with its first sample.
pub fn filtfilt(f: &Biquad, x: &[f64]) -> Vec<f64> {
    let mut fwd = filter_series(f, x);
    fwd.reverse();
    let mut out = filter_series(f, &fwd);
    out.reverse();
    out
}

/// Zero-phase smoothing of point trajectories (`series[frame][point]`).
pub fn filtfilt_points(f: &Biquad, series: &[Vec<Vector3<f64>>]) -> Vec<Vec<Vector3<f64>>> {
    let Some(first) = series.first() else { return Vec::new() };
    let mut out = vec![vec![Vector3::zeros(); first.len()]; series.len()];
    for p in 0..first.len() {
        for k in 0..3 {
            let x: Vec<f64> = series.iter().map(|fr| fr[p][k]).collect();
            for (t, v) in filtfilt(f, &x).into_iter().enumerate() {
                out[t][p][k] = v;
            }
        }
    }
    out
}

/// Stage-2 solve against already-smoothed keypoint positions (uniform weights),
/// warm-started at the stage-1 pose.
pub fn refit(
    model: &SkeletonModel,
    q_stage1: &Pose,
    smoothed: &[Vector3<f64>],
    ik_settings: &IkSettings,
) -> Result<IkSolution, SmoothError> {
    if smoothed.len() != NUM_KEYPOINTS {
        return Err(SmoothError::ChannelCount { expected: NUM_KEYPOINTS, got: smoothed.len() });
    }
    let arr: [Vector3<f64>; NUM_KEYPOINTS] = std::array::from_fn(|i| smoothed[i]);
    Ok(ik::solve(model, q_stage1, &ik::uniform_targets(&arr), ik_settings)?)
}

/// Filters this frame's stage-1 keypoints and re-solves IK on the result,
/// returning the stage-2 solution and the smoothed targets.
pub fn smooth_and_refit(
    model: &SkeletonModel,
    q_stage1: &Pose,
    state: &mut FilterState,
    ik_settings: &IkSettings,
) -> Result<(IkSolution, Vec<Vector3<f64>>), SmoothError> {
    let positions = model.forward_kinematics(q_stage1)?;
    let smoothed = state.step(&positions.keypoints)?;
    let sol = refit(model, q_stage1, &smoothed, ik_settings)?;
    Ok((sol, smoothed))
}
