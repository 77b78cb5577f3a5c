//! Experiment grid and the statistics run over its records.

pub mod grid;
pub mod ols;
pub mod plot;
pub mod triage;

use thiserror::Error;

pub use grid::{check_complete, missing_cells, run_grid, ExperimentRecord, GridCell, GridRun, GridSpec};
pub use ols::{least_squares, ols_fit, ols_fits, Coefficient, RegressionFit};
pub use triage::{
    association_table, confusion_matrix, read_predictions_csv, threshold_for_accuracy, top_confident_errors, triage_curve,
    write_predictions_csv, ConfidentError, ConfusionMatrix, PredictionRow, ThresholdChoice, TriageCurve,
};

use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("grid incomplete, {} cells missing", missing.len())]
    PartialGrid { missing: Vec<String> },
    #[error("asked for {requested} errors, only {} exist", found.len())]
    FewerThanK { requested: usize, found: Vec<ConfidentError> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
