//! Registration of camera sets captured across several object poses into a
//! single model frame, using a splat model rendered from the main pose.

pub mod complete;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod selection;
pub mod synth;

pub use complete::{
    balanced_schedule, finetune_splats, iterate_auxiliary_poses, SampleSchedule, TrainConfig,
};
pub use error::{Error, Result};
pub use fusion::{
    global_register, silhouette_consensus_fusion, FusionParams, FusionResult, MaskMap,
};
pub use geometry::{
    align_pose_pair, pair_scale, CameraIntrinsics, CameraPose, PoseSet, Rotation, Sim3, Vec3,
};
pub use pipeline::{run_on_dataset, run_pipeline, PipelineConfig, PipelineRun};
pub use refine::{
    local_refine, refine_photometric, refine_silhouette, ImageMap, RefineConfig, RefineOutcome,
};
pub use render::{RgbImage, SilhouetteMask, SoftOccupancy, Splat, SplatCloud};
pub use selection::{
    select_mixed_set, DescriptorSet, MixedPoseSelection, PosePrediction, SelectionParams,
};
