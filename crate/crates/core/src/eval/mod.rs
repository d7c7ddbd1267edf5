//! Leave-one-person-out evaluation of the adaptation experiments.

pub mod experiments;
pub mod lopocv;
pub mod output;
pub mod spec;
pub mod split;
pub mod suite;
pub mod summary;

pub use experiments::{
    run_batch_da, run_fold, run_lower_baseline, run_online, run_supervised_baseline, run_upper_baseline, FoldResult,
    WindowRecord,
};
pub use lopocv::{fold_key, fold_model, lopocv, momentum_sweep, FoldCache, SweepEntry};
pub use output::{folds_csv, write_run, RunManifest};
pub use spec::{ExperimentKind, ExperimentSpec};
pub use split::{split_indices, stratified_split};
pub use summary::{mean, median, run_id, summarize, RunResults, SliceStats, SummaryRow, SummaryTable};
