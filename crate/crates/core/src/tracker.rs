//! Per-frame search for probable keypoint positions on a cubic lattice,
//! confidence weights for the resulting virtual markers, and trunk-tilt
//! driven rotation planning.

use std::sync::Arc;

use log::warn;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{CalibError, Camera, CameraRig, Projection};
use crate::ik::Target;
use crate::pcm::{quantize_rotation, sample_in_frame, HeatmapFrame, PcmError, PcmProvider};
use crate::skeleton::{JointPositions, Keypoint, NUM_KEYPOINTS};

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error(transparent)]
    Pcm(#[from] PcmError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("trunk tilt undefined: neck and hip center project to the same pixel")]
    DegenerateTilt,
    #[error("invalid lattice configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    /// Lattice unit distance in mm.
    pub spacing_mm: f64,
    /// Half extent: the lattice has `(2k+1)³` points.
    pub half_extent: u32,
    pub tilt_threshold_deg: f64,
    pub rotation_enabled: bool,
}

impl Default for LatticeConfig {
    fn default() -> LatticeConfig {
        LatticeConfig { spacing_mm: 10.0, half_extent: 3, tilt_threshold_deg: 45.0, rotation_enabled: false }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(TrackerError::Config("spacing must be positive"));
        }
        if self.half_extent < 1 {
            return Err(TrackerError::Config("half extent must be at least 1"));
        }
        if !(self.tilt_threshold_deg > 0.0 && self.tilt_threshold_deg < 180.0) {
            return Err(TrackerError::Config("tilt threshold must lie in (0, 180)"));
        }
        Ok(())
    }
}

/// One virtual marker: the lattice winner for a keypoint and its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub position: Vector3<f64>,
    pub weight: f64,
    /// Lattice offset `(a, b, c)` from the search center.
    pub offset: [i32; 3],
    /// Per-camera confidence at `position`, in rig order.
    pub samples: Vec<f64>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMarkerSet {
    pub markers: Vec<Marker>,
}

impl VirtualMarkerSet {
    pub fn targets(&self) -> Vec<Target> {
        self.markers.iter().map(|m| Target { position: m.position, weight: m.weight }).collect()
    }

    pub fn weights(&self) -> [f64; NUM_KEYPOINTS] {
        std::array::from_fn(|i| self.markers[i].weight)
    }

    pub fn total_score(&self) -> f64 {
        self.markers.iter().map(|m| m.weight).sum()
    }

    pub fn diagnostics_header(rig: &CameraRig) -> String {
        let mut h = String::from("frame,label,a,b,c,weight,low_confidence");
        for c in rig.cameras() {
            h.push_str(&format!(",sample_cam{}", c.id));
        }
        h
    }

    /// One CSV row per keypoint, matching [`VirtualMarkerSet::diagnostics_header`].
    pub fn diagnostics_rows(&self, frame: u32) -> Vec<String> {
        Keypoint::ALL
            .iter()
            .zip(&self.markers)
            .map(|(k, m)| {
                let mut row = format!(
                    "{frame},{k},{},{},{},{},{}",
                    m.offset[0], m.offset[1], m.offset[2], m.weight, m.low_confidence as u8
                );
                for s in &m.samples {
                    row.push_str(&format!(",{s}"));
                }
                row
            })
            .collect()
    }
}

/// Something that went wrong but did not stop the frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    RotationFallback { camera: u32, frame: u32, rotation: i32 },
    TiltUndefined { camera: u32 },
}

/// Per-camera heatmaps of one frame, with the rotated maps used for
/// lower-body keypoints where a rotation is planned.
pub struct FrameEvidence<'a> {
    rig: &'a CameraRig,
    plain: Vec<Arc<HeatmapFrame>>,
    rotated: Vec<Option<Arc<HeatmapFrame>>>,
}

impl<'a> FrameEvidence<'a> {
    /// Fetches the frame's maps. `rotations` holds one planned angle per
    /// camera (degrees, 0 for none); a missing rotated map falls back to the
    /// plain one with a diagnostic.
    pub fn load(
        provider: &dyn PcmProvider,
        rig: &'a CameraRig,
        frame_index: u32,
        rotations: Option<&[f64]>,
    ) -> Result<(FrameEvidence<'a>, Vec<Diagnostic>), TrackerError> {
        let mut plain = Vec::with_capacity(rig.len());
        let mut rotated = Vec::with_capacity(rig.len());
        let mut diags = Vec::new();
        for (i, cam) in rig.cameras().iter().enumerate() {
            plain.push(provider.frame(cam.id, frame_index, 0)?);
            let key = rotations.map(|r| quantize_rotation(r[i])).unwrap_or(0);
            if key == 0 {
                rotated.push(None);
                continue;
            }
            match provider.frame(cam.id, frame_index, key) {
                Ok(f) => rotated.push(Some(f)),
                Err(PcmError::RotationUnavailable { .. }) => {
                    warn!("camera {} frame {frame_index}: rotation {key} unavailable, using rotation 0", cam.id);
                    diags.push(Diagnostic::RotationFallback { camera: cam.id, frame: frame_index, rotation: key });
                    rotated.push(None);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok((FrameEvidence { rig, plain, rotated }, diags))
    }

    pub fn rig(&self) -> &CameraRig {
        self.rig
    }

    /// Rotation actually used for lower-body keypoints, per camera.
    pub fn rotations_used(&self) -> Vec<i32> {
        self.rotated
            .iter()
            .map(|r| r.as_ref().map(|f| quantize_rotation(f.meta.rotation_deg as f64)).unwrap_or(0))
            .collect()
    }

    fn frame_for(&self, cam: usize, label: Keypoint) -> &HeatmapFrame {
        match (&self.rotated[cam], label.is_lower_body()) {
            (Some(f), true) => f,
            _ => &self.plain[cam],
        }
    }

    /// Confidence of `label` in camera `cam` at a world point; zero when the
    /// point is behind the camera or projects off the map.
    pub fn camera_sample(&self, cam: usize, label: Keypoint, point: &Vector3<f64>) -> f64 {
        let camera: &Camera = &self.rig.cameras()[cam];
        let frame = self.frame_for(cam, label);
        match camera.project_with(point, !frame.meta.undistorted) {
            Ok(Projection::InFront(px)) => sample_in_frame(frame, camera, label, &px),
            _ => 0.0,
        }
    }

    /// Sum of per-camera confidences at a world point.
    pub fn score(&self, label: Keypoint, point: &Vector3<f64>) -> f64 {
        (0..self.rig.len()).map(|c| self.camera_sample(c, label, point)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeResult {
    pub position: Vector3<f64>,
    pub offset: [i32; 3],
    pub score: f64,
}

/// Exhaustive search of the `(2k+1)³` lattice around `center`. Ties go to
/// the smallest Chebyshev distance from the center, then to the
/// lexicographically smallest `(a, b, c)`.
pub fn lattice_search(evidence: &FrameEvidence, label: Keypoint, center: &Vector3<f64>, cfg: &LatticeConfig) -> LatticeResult {
    let k = cfg.half_extent as i32;
    let s = cfg.spacing_mm;
    let mut best = LatticeResult { position: *center, offset: [0; 3], score: f64::NEG_INFINITY };
    let mut best_key = (i32::MAX, [i32::MAX; 3]);
    for a in -k..=k {
        for b in -k..=k {
            for c in -k..=k {
                let p = center + Vector3::new(a as f64, b as f64, c as f64) * s;
                let score = evidence.score(label, &p);
                let key = (a.abs().max(b.abs()).max(c.abs()), [a, b, c]);
                if score > best.score || (score == best.score && key < best_key) {
                    best = LatticeResult { position: p, offset: [a, b, c], score };
                    best_key = key;
                }
            }
        }
    }
    best
}

/// Confidence weight of a predicted position and its per-camera terms.
pub fn pcm_weight(evidence: &FrameEvidence, label: Keypoint, position: &Vector3<f64>) -> (f64, Vec<f64>) {
    let samples: Vec<f64> = (0..evidence.rig.len()).map(|c| evidence.camera_sample(c, label, position)).collect();
    (samples.iter().sum(), samples)
}

/// Lattice search and weighting for every keypoint. Keypoints whose weight
/// falls below `low_confidence_below` are flagged but kept.
pub fn build_markers(
    evidence: &FrameEvidence,
    centers: &[Vector3<f64>; NUM_KEYPOINTS],
    cfg: &LatticeConfig,
    low_confidence_below: f64,
) -> VirtualMarkerSet {
    let markers = Keypoint::ALL
        .par_iter()
        .map(|&k| {
            let found = lattice_search(evidence, k, &centers[k.index()], cfg);
            let (weight, samples) = pcm_weight(evidence, k, &found.position);
            Marker {
                position: found.position,
                weight,
                offset: found.offset,
                samples,
                low_confidence: weight < low_confidence_below,
            }
        })
        .collect();
    VirtualMarkerSet { markers }
}

/// Signed image-plane angle (degrees, in (−180, 180]) of the hip→neck vector
/// from the image up direction. Rotating the image by this angle with
/// [`crate::calib::rotate_pixel`] brings the trunk upright.
pub fn trunk_tilt(neck_px: &Vector2<f64>, midhip_px: &Vector2<f64>) -> Result<f64, TrackerError> {
    let d = neck_px - midhip_px;
    if !(d.x.is_finite() && d.y.is_finite()) || d.norm() == 0.0 {
        return Err(TrackerError::DegenerateTilt);
    }
    let t = (-d.x).atan2(-d.y).to_degrees();
    Ok(if t <= -180.0 { t + 360.0 } else { t })
}

/// Per-camera image rotation for the next frame's lower-body maps, from the
/// current neck and hip-center positions. Cameras below the tilt threshold,
/// or where the trunk cannot be projected, get 0.
pub fn plan_rotations(positions: &JointPositions, rig: &CameraRig, cfg: &LatticeConfig) -> (Vec<f64>, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    if !cfg.rotation_enabled {
        return (vec![0.0; rig.len()], diags);
    }
    let neck = positions.keypoint(Keypoint::Neck);
    let hip = positions.mid_hip();
    let angles = rig
        .cameras()
        .iter()
        .map(|cam| {
            let tilt = match (cam.project(&neck), cam.project(&hip)) {
                (Ok(Projection::InFront(n)), Ok(Projection::InFront(h))) => trunk_tilt(&n, &h).ok(),
                _ => None,
            };
            match tilt {
                Some(t) if t.abs() >= cfg.tilt_threshold_deg => t,
                Some(_) => 0.0,
                None => {
                    diags.push(Diagnostic::TiltUndefined { camera: cam.id });
                    0.0
                }
            }
        })
        .collect();
    (angles, diags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::rotate_pixel;
    use crate::pcm::{FrameMeta, MemoryPcmStore};

    fn rig() -> CameraRig {
        let target = Vector3::new(0.0, 0.0, 1000.0);
        CameraRig::new(vec![
            Camera::look_at(0, (640, 480), 600.0, Vector3::new(0.0, -3000.0, 1200.0), target),
            Camera::look_at(1, (640, 480), 600.0, Vector3::new(3000.0, 0.0, 1200.0), target),
        ])
        .unwrap()
    }

    fn gaussian(frame: &mut HeatmapFrame, label: Keypoint, center: Option<Vector2<f64>>, sigma: f64) {
        let (w, h) = (frame.width(), frame.height());
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| match center {
                Some(c) => (-(Vector2::new(x as f64, y as f64) - c).norm_squared() / (2.0 * sigma * sigma)).exp() as f32,
                None => 0.0,
            })
            .collect();
        frame.set_window(label, (0, 0), (w, h), data).unwrap();
    }

    fn store_with_point(rig: &CameraRig, label: Keypoint, point: Option<Vector3<f64>>) -> MemoryPcmStore {
        let mut store = MemoryPcmStore::new();
        for cam in rig.cameras() {
            let meta = FrameMeta { camera_id: cam.id, frame_index: 1, rotation_deg: 0.0, width: 640, height: 480, scale: 1.0, undistorted: true };
            let mut f = HeatmapFrame::zeros(meta).unwrap();
            if let Some(p) = point {
                gaussian(&mut f, label, cam.project(&p).unwrap().pixel(), 6.0);
            }
            store.insert(f);
        }
        store
    }

    #[test]
    fn zero_evidence_keeps_center() {
        let rig = rig();
        let store = store_with_point(&rig, Keypoint::Neck, None);
        let (ev, _) = FrameEvidence::load(&store, &rig, 1, None).unwrap();
        let cfg = LatticeConfig { half_extent: 1, ..LatticeConfig::default() };
        let c = Vector3::new(10.0, 20.0, 1000.0);
        let r = lattice_search(&ev, Keypoint::Neck, &c, &cfg);
        assert_eq!(r.position, c);
        assert_eq!(r.offset, [0, 0, 0]);
        assert_eq!(pcm_weight(&ev, Keypoint::Neck, &c).0, 0.0);
    }

    #[test]
    fn follows_one_lattice_step() {
        let rig = rig();
        let prev = Vector3::new(0.0, 0.0, 1000.0);
        let cfg = LatticeConfig::default();
        let truth = prev + Vector3::new(cfg.spacing_mm, 0.0, 0.0);
        let store = store_with_point(&rig, Keypoint::LWrist, Some(truth));
        let (ev, _) = FrameEvidence::load(&store, &rig, 1, None).unwrap();
        let r = lattice_search(&ev, Keypoint::LWrist, &prev, &cfg);
        assert_eq!(r.offset, [1, 0, 0]);
        assert!(r.score > 1.95 && r.score <= 2.0);
    }

    #[test]
    fn missing_plain_frame_is_an_error() {
        let rig = rig();
        let store = store_with_point(&rig, Keypoint::Neck, None);
        assert!(matches!(FrameEvidence::load(&store, &rig, 2, None), Err(TrackerError::Pcm(PcmError::FrameMissing { .. }))));
    }

    #[test]
    fn missing_rotation_falls_back() {
        let rig = rig();
        let store = store_with_point(&rig, Keypoint::RKnee, Some(Vector3::new(0.0, 0.0, 900.0)));
        let (ev, diags) = FrameEvidence::load(&store, &rig, 1, Some(&[170.0, 0.0])).unwrap();
        assert_eq!(diags, vec![Diagnostic::RotationFallback { camera: 0, frame: 1, rotation: 170 }]);
        assert_eq!(ev.rotations_used(), vec![0, 0]);
    }

    #[test]
    fn rotated_maps_used_for_lower_body_only() {
        let rig = rig();
        let point = Vector3::new(30.0, 0.0, 700.0);
        let mut store = MemoryPcmStore::new();
        for cam in rig.cameras() {
            for rot in [0.0f32, 180.0] {
                let meta = FrameMeta { camera_id: cam.id, frame_index: 1, rotation_deg: rot, width: 640, height: 480, scale: 1.0, undistorted: true };
                let mut f = HeatmapFrame::zeros(meta).unwrap();
                let px = cam.project(&point).unwrap().pixel().unwrap();
                let px = rotate_pixel(&px, rot as f64, &cam.image_center());
                gaussian(&mut f, Keypoint::RKnee, Some(px), 6.0);
                // the neck only exists in the unrotated maps
                if rot == 0.0 {
                    gaussian(&mut f, Keypoint::Neck, Some(px), 6.0);
                }
                store.insert(f);
            }
        }
        let (ev, diags) = FrameEvidence::load(&store, &rig, 1, Some(&[180.0, 180.0])).unwrap();
        assert!(diags.is_empty());
        assert_eq!(ev.rotations_used(), vec![180, 180]);
        assert!(ev.score(Keypoint::RKnee, &point) > 1.95);
        assert!(ev.score(Keypoint::Neck, &point) > 1.95);
    }

    #[test]
    fn trunk_tilt_examples() {
        let t = |n: (f64, f64), h: (f64, f64)| trunk_tilt(&Vector2::new(n.0, n.1), &Vector2::new(h.0, h.1)).unwrap();
        assert_eq!(t((100.0, 50.0), (100.0, 150.0)), 0.0);
        assert!((t((200.0, 100.0), (100.0, 100.0)) + 90.0).abs() < 1e-12);
        assert!((t((200.0, 100.0), (100.0, 200.0)) + 45.0).abs() < 1e-12);
        assert_eq!(t((100.0, 150.0), (100.0, 50.0)), 180.0);
        assert!(matches!(trunk_tilt(&Vector2::new(1.0, 1.0), &Vector2::new(1.0, 1.0)), Err(TrackerError::DegenerateTilt)));
    }

    #[test]
    fn tilt_angle_uprights_the_trunk() {
        let c = Vector2::new(320.0, 240.0);
        for (n, h) in [((200.0, 100.0), (100.0, 200.0)), ((50.0, 300.0), (120.0, 100.0)), ((300.0, 90.0), (310.0, 300.0))] {
            let (n, h) = (Vector2::new(n.0, n.1), Vector2::new(h.0, h.1));
            let t = trunk_tilt(&n, &h).unwrap();
            let after = trunk_tilt(&rotate_pixel(&n, t, &c), &rotate_pixel(&h, t, &c)).unwrap();
            assert!(after.abs() < 1e-9, "{after}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LatticeConfig::default().validate().is_ok());
        assert!(LatticeConfig { half_extent: 0, ..LatticeConfig::default() }.validate().is_err());
        assert!(LatticeConfig { spacing_mm: 0.0, ..LatticeConfig::default() }.validate().is_err());
        assert!(LatticeConfig { tilt_threshold_deg: 180.0, ..LatticeConfig::default() }.validate().is_err());
    }
}
