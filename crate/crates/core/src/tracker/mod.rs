//! Decoder stack, tracking paradigms, and track update.

pub mod encoding;
pub mod forward;
pub mod model;
pub mod update;

pub use forward::{
    association_head, box_target_params, decode_box, decode_span, detection_reference_grid,
    edge_augmented_cross_attention, forward_frame, masked_self_attention, obs_locality_bias,
    observation_cross_attention, sample_detection_refs, task_heads, DnInput, FrameInput,
    FrameOutput, LayerPreds, OBS_SIGMA_COARSE, OBS_SIGMA_FINE,
};
pub use model::{
    load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file, BoundParams,
    CheckpointError, Paradigm, TrackerConfig, TrackerModel,
};
pub use update::{update_tracks, FrameEstimates, FrameReport, Track, TrackState};
