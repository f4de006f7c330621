//! Training, evaluation and the experiment drivers.

mod experiments;
mod gradcheck;
mod model;
mod train;

pub use experiments::{ablate, load_eval_dataset, parse_grid, profile, rows_csv, DataSplits, ProfileRow};
pub use gradcheck::{gradcheck, toy_config, toy_sequence, GradcheckRun, ProbeMode, GradcheckSummary, GRADCHECK_TOL};
pub use model::{EspPct, FrameTrace, LossPart, LossValue, Prediction, SelectionSignature};
pub use train::{dataset_shape, evaluate, mean_loss, train, train_observed, EpochLog, Metrics, TrainedModel, PURITY_THRESHOLD};
