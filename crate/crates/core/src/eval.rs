//! Accuracy metrics against ground truth: MPJPE and 3D-PCK over body-part
//! groups, plus the per-frame series and summary outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::skeleton::{Keypoint, NUM_KEYPOINTS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame {0} has no ground truth")]
    FrameMismatch(u32),
    #[error("no frames to evaluate")]
    Empty,
    #[error("threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Format { line: u64, msg: String },
    #[error("frame {frame} lacks keypoint {label}")]
    MissingLabel { frame: u32, label: Keypoint },
}

/// A named set of keypoints metrics are pooled over.
#[derive(Debug, Clone, PartialEq)]
pub struct PartGroup {
    pub name: &'static str,
    pub labels: Vec<Keypoint>,
}

impl PartGroup {
    pub fn head() -> PartGroup {
        use Keypoint::*;
        PartGroup { name: "head", labels: vec![Nose, REar, LEar] }
    }

    pub fn upper_body() -> PartGroup {
        use Keypoint::*;
        PartGroup { name: "upper_body", labels: vec![Neck, RShoulder, LShoulder, RElbow, LElbow, RWrist, LWrist] }
    }

    pub fn lower_body() -> PartGroup {
        use Keypoint::*;
        PartGroup { name: "lower_body", labels: vec![RHip, LHip, RKnee, LKnee, RAnkle, LAnkle] }
    }

    /// Union of the other groups (eyes excluded).
    pub fn total() -> PartGroup {
        let mut labels = PartGroup::head().labels;
        labels.extend(PartGroup::upper_body().labels);
        labels.extend(PartGroup::lower_body().labels);
        labels.sort_by_key(|k| k.index());
        PartGroup { name: "total", labels }
    }

    pub fn presets() -> [PartGroup; 4] {
        [PartGroup::head(), PartGroup::upper_body(), PartGroup::lower_body(), PartGroup::total()]
    }
}

/// Keypoint positions per frame.
pub type Track = BTreeMap<u32, [Vector3<f64>; NUM_KEYPOINTS]>;

/// Euclidean errors of every `(frame, keypoint)` pair of the group, frame-major.
pub fn errors(pred: &Track, gt: &Track, group: &PartGroup) -> Result<Vec<f64>, EvalError> {
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = Vec::with_capacity(pred.len() * group.labels.len());
    for (f, p) in pred {
        let g = gt.get(f).ok_or(EvalError::FrameMismatch(*f))?;
        out.extend(group.labels.iter().map(|k| (p[k.index()] - g[k.index()]).norm()));
    }
    Ok(out)
}

/// Mean per-joint position error pooled over all `(frame, joint)` pairs, mm.
pub fn mpjpe(pred: &Track, gt: &Track, group: &PartGroup) -> Result<f64, EvalError> {
    let e = errors(pred, gt, group)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of `(frame, joint)` pairs with error strictly below `tau_mm`.
pub fn pck3d(pred: &Track, gt: &Track, group: &PartGroup, tau_mm: f64) -> Result<f64, EvalError> {
    if !(tau_mm.is_finite() && tau_mm > 0.0) {
        return Err(EvalError::Threshold(tau_mm));
    }
    let e = errors(pred, gt, group)?;
    Ok(100.0 * e.iter().filter(|&&v| v < tau_mm).count() as f64 / e.len() as f64)
}

pub const PCK_THRESHOLDS_MM: [f64; 3] = [50.0, 100.0, 150.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub mpjpe_mm: f64,
    /// Keyed by threshold in mm.
    pub pck: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub frames: usize,
    pub first_frame: u32,
    pub last_frame: u32,
    pub groups: BTreeMap<String, GroupSummary>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialization cannot fail") + "\n"
    }
}

pub fn summarize(pred: &Track, gt: &Track) -> Result<Summary, EvalError> {
    let mut groups = BTreeMap::new();
    for g in PartGroup::presets() {
        let mut pck = BTreeMap::new();
        for tau in PCK_THRESHOLDS_MM {
            pck.insert(format!("{tau}"), pck3d(pred, gt, &g, tau)?);
        }
        groups.insert(g.name.to_string(), GroupSummary { mpjpe_mm: mpjpe(pred, gt, &g)?, pck });
    }
    Ok(Summary {
        frames: pred.len(),
        first_frame: *pred.keys().next().unwrap(),
        last_frame: *pred.keys().next_back().unwrap(),
        groups,
    })
}

/// Per-frame tracking facts read back from a run's frame table.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameInfo {
    pub pcm_score_total: f64,
    pub rotated_cameras: u32,
}

pub const SERIES_HEADER: &str = "frame,mpjpe_total_mm,mpjpe_lowerbody_mm,pcm_score_total,rotated_cameras";

/// Per-frame error and score series; frames missing from `info` get zeros.
pub fn series_csv(pred: &Track, gt: &Track, info: &BTreeMap<u32, FrameInfo>) -> Result<String, EvalError> {
    let (total, lower) = (PartGroup::total(), PartGroup::lower_body());
    let mut s = String::from(SERIES_HEADER);
    s.push('\n');
    for (&f, p) in pred {
        let one: Track = BTreeMap::from([(f, *p)]);
        let i = info.get(&f).copied().unwrap_or_default();
        let _ = writeln!(
            s,
            "{f},{},{},{},{}",
            mpjpe(&one, gt, &total)?,
            mpjpe(&one, gt, &lower)?,
            i.pcm_score_total,
            i.rotated_cameras
        );
    }
    Ok(s)
}

fn field<'a>(rec: &'a csv::StringRecord, headers: &csv::StringRecord, name: &str) -> Result<&'a str, EvalError> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let i = headers.iter().position(|h| h == name).ok_or_else(|| EvalError::Format { line: 1, msg: format!("missing column `{name}`") })?;
    rec.get(i).ok_or_else(|| EvalError::Format { line, msg: format!("missing value for `{name}`") })
}

fn number<T: std::str::FromStr>(rec: &csv::StringRecord, headers: &csv::StringRecord, name: &str) -> Result<T, EvalError> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    field(rec, headers, name)?.parse().map_err(|_| EvalError::Format { line, msg: format!("bad `{name}`") })
}

/// Reads a positions table (`frame,time_s,label,x_mm,y_mm,z_mm,weight,stage`),
/// keeping rows of the given stage.
pub fn read_positions_csv(text: &str, stage: &str) -> Result<Track, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut partial: BTreeMap<u32, [Option<Vector3<f64>>; NUM_KEYPOINTS]> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if field(&rec, &headers, "stage")? != stage {
            continue;
        }
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let label = field(&rec, &headers, "label")?;
        let k = Keypoint::from_name(label).ok_or_else(|| EvalError::Format { line, msg: format!("unknown label `{label}`") })?;
        let f: u32 = number(&rec, &headers, "frame")?;
        let p = Vector3::new(number(&rec, &headers, "x_mm")?, number(&rec, &headers, "y_mm")?, number(&rec, &headers, "z_mm")?);
        partial.entry(f).or_default()[k.index()] = Some(p);
    }
    partial
        .into_iter()
        .map(|(f, ps)| {
            let mut out = [Vector3::zeros(); NUM_KEYPOINTS];
            for k in Keypoint::ALL {
                out[k.index()] = ps[k.index()].ok_or(EvalError::MissingLabel { frame: f, label: k })?;
            }
            Ok((f, out))
        })
        .collect()
}

/// Reads a frame table (`frame,time_s,pcm_score_total,no_evidence,rot_cam…`).
pub fn read_frames_csv(text: &str) -> Result<BTreeMap<u32, FrameInfo>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let rot_cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.starts_with("rot_cam")).map(|(i, _)| i).collect();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let rotated = rot_cols
            .iter()
            .map(|&i| rec.get(i).unwrap_or("0").parse::<i32>().map_err(|_| EvalError::Format { line, msg: "bad rotation".into() }))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|&a| a != 0)
            .count() as u32;
        out.insert(
            number(&rec, &headers, "frame")?,
            FrameInfo { pcm_score_total: number(&rec, &headers, "pcm_score_total")?, rotated_cameras: rotated },
        );
    }
    Ok(out)
}
