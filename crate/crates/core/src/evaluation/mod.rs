//! Detection metrics and analyses: AP at IoU 0.5, proposal recall quality,
//! an error taxonomy of top-ranked detections, target-scale sweeps, ablation
//! tables and SVG charts.

mod analysis;
mod ap;
mod report;
pub mod svg;

pub use analysis::{
    categorize_detections, classify_overlap, proposal_mean_best_overlap, ErrorKind, ErrorTaxonomy, CORRECT_IOU,
    MISLOCALIZED_IOU,
};
pub use ap::{average_precision, match_detections, ScoredBox};
pub use report::{
    ablation_table, class_name, detect_dataset, evaluate_detections, evaluate_model, ground_truth, propose_dataset,
    rescale_dataset, scale_sweep, sweep_csv, AblationRow, AblationTable, ClassAp, EvalReport, ScalePoint, SWEEP_HEADER,
};

/// Proposals per image for the mean-best-overlap measure.
pub const DEFAULT_TOP_P: usize = 64;
/// Top-ranked detections examined by the error taxonomy.
pub const DEFAULT_TOP_R: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Data(#[from] crate::synthdata::DataError),
    #[error("no result for ablation row {0}")]
    MissingRow(String),
    #[error("{0}")]
    Input(String),
}
