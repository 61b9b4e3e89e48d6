//! Training losses and evaluation metrics.

mod losses;
mod metrics;

pub use losses::{cross_entropy, dice_loss, edge_bce, total_loss, LossWeights, DICE_EPS, PROB_CLAMP};
pub use metrics::{
    boundary_f1, boundary_f1_class, boundary_f1_masks, dice_coefficient, iou, miou, MetricAccumulator,
    MetricReport, MetricRow, BOUNDARY_TOLERANCE, TSV_HEADER,
};
