//! Linear probing, classification metrics, stratified folds and the paired
//! t-test comparison of methods.

mod experiment;
mod folds;
mod metrics;
mod probe;
mod stats;

pub use experiment::{
    run_experiment, Checkpoint, ExperimentReport, FoldResult, MeanStd, Metrics, Summary, TaskConfig,
};
pub use folds::{make_folds, FoldPlan, Stratum};
pub use metrics::{auroc, average_precision, macro_ap, macro_auroc, mann_whitney_u2, mean_ap, pearson};
pub use probe::{loss_and_grad, train_probe, train_probe_with, LinearProbe, ProbeConfig};
pub use stats::{bh_adjust, compare_methods, paired_t_test, PValueMatrix, PairedTTest, P_FLOOR};
