//! Image scores, detection and localization metrics, reports and overlays.

mod metrics;
mod report;
mod synthetic;

pub use metrics::{auroc, average_precision, image_score, iou, smoothed_max, ScoreAccumulator, SCORE_WINDOW};
pub use report::{
    emit_overlays, evaluate_dataset, heatmap, infer_maps, write_map, EvalAccumulator, EvalReport, ImageScore,
};
pub use synthetic::{evaluate_latent_injections, evaluate_refinement, RefinementEval, SyntheticEval};
