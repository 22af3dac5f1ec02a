//! Shared fixtures for the benchmarks: a rendered walk scene and a tracker
//! state taken from its ground truth.

use mocapfuse::ik::Target;
use mocapfuse::synth::Preset;
use mocapfuse::{JointPositions, Pose, Scene, SceneSpec, SkeletonModel};

/// Walk scene at full heatmap resolution, as used for accuracy runs.
pub fn walk_scene(frames: u32) -> Scene {
    let mut spec = SceneSpec { frames, heatmap_scale: 1.0, ..SceneSpec::default() };
    spec.motion.preset = Some(Preset::Walk);
    Scene::new(spec).expect("default walk scene is valid")
}

/// Subject model, truth pose and truth positions of one frame.
pub fn truth(scene: &Scene, frame: u32) -> (SkeletonModel, Pose, JointPositions) {
    let pose = scene.pose(frame).expect("frame in range");
    let positions = scene.positions(frame).expect("frame in range");
    (scene.subject().clone(), pose, positions)
}

/// Unit-weight targets displaced from `positions` by a fixed pattern, so a
/// solve has real work to do.
pub fn perturbed_targets(positions: &JointPositions, magnitude_mm: f64) -> Vec<Target> {
    positions
        .keypoints
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = (i as f64 * 1.7).sin();
            let c = (i as f64 * 0.9).cos();
            Target { position: p + nalgebra::Vector3::new(s, c, s * c) * magnitude_mm, weight: 1.0 }
        })
        .collect()
}
