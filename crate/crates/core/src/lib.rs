//! Multi-camera motion capture from per-camera part confidence maps.
//!
//! The flow is: [`pipeline::initialize`] identifies the subject's link lengths
//! from heatmap centroids, then [`pipeline::track`] runs, per frame, a lattice
//! search over the heatmaps ([`tracker`]), a weighted IK solve ([`ik`]),
//! low-pass filtering of the result and a second IK pass ([`smooth`]).
//! [`synth`] renders synthetic scenes with known ground truth and [`eval`]
//! scores reconstructions against it.

// `!(x > lo)` style guards are deliberate: they reject NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod eval;
pub mod ik;
pub mod io;
pub mod pcm;
pub mod pipeline;
pub mod skeleton;
pub mod smooth;
pub mod synth;
pub mod tracker;

pub use calib::{load_rig, Camera, CameraRig, Projection};
pub use eval::{mpjpe, pck3d, PartGroup, Track};
pub use ik::{IkSettings, IkSolution, Target};
pub use pcm::{DirPcmStore, FrameMeta, HeatmapFrame, MemoryPcmStore, PcmProvider};
pub use pipeline::{initialize, track, Initialization, MotionSequence, PipelineConfig, PipelineError};
pub use skeleton::{JointPositions, Keypoint, Pose, SkeletonModel, NUM_KEYPOINTS};
pub use smooth::{FilterMode, FilterSpec};
pub use synth::{Scene, SceneSpec};
pub use tracker::{LatticeConfig, VirtualMarkerSet};
