//! Boundary-weighted dice + cross-entropy training loss, DSC/IoU metrics and
//! the evaluation report.

mod loss;
mod metrics;
mod report;

pub use loss::{
    boundary_mask, boundary_weight_map, boundary_weight_map_with, dice_loss, total_loss,
    total_loss_and_grad, weighted_ce_loss, LossParts, WeightMap, DEFAULT_BOUNDARY_WEIGHT,
    DICE_EPS,
};
pub use metrics::{dsc, dsc_with, iou, iou_with, EmptyPolicy};
pub use report::{aggregate_report, ImageScore, MetricsReport, ReportRow, OVERALL_LABEL, REPORT_COLUMNS};
