//! Segmentation metrics, agreement statistics and reporting.

mod metrics;
pub mod plots;
mod report;
mod stats;

pub use metrics::{
    avg_transverse_thickness, connected_components, dice_score, directed_surface_distances, hausdorff95,
    hausdorff_max, percentile, squared_distance_transform, surface_voxels, transverse_projection, Connectivity,
    HausdorffMode, Projection,
};
pub use report::{
    evaluate_case, evaluate_test_set, read_cases_csv, CaseMetrics, EvalOptions, MetricsReport, CSV_COLUMNS,
};
pub use stats::{bland_altman, BlandAltmanStats, Summary, LOA_Z};
