//! Shared fixtures for the benchmarks.

use posefuse::synth::{make_dataset, MultiPoseDataset, SynthConfig};

/// Two placements at the default resolution and cloud size.
pub fn two_pose_fixture(views_per_pose: usize) -> MultiPoseDataset {
    let cfg = SynthConfig {
        views_per_pose,
        ..Default::default()
    };
    make_dataset(&cfg).expect("fixture dataset")
}
