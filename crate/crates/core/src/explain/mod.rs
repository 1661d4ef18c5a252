//! Class activation maps, masked-retraining validation and overlays.

pub mod cam;
pub mod render;
pub mod validate;

pub use cam::{compute_cam, mask_dataset, mask_trial, raw_cam, CamMap};
pub use render::{cam_overlay_svg, ramp_color, render_cam_overlay, Overlay};
pub use validate::{compare_runs, fold_artifact_hash, validate_cams, CamValidation, MetricComparison};
