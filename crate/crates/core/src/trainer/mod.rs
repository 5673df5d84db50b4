//! Optimization loop, Adam, and the leave-one-domain-out harnesses.

mod adam;
mod config;
mod protocol;
mod train;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use config::{
    PretrainConfig, TrainConfig, DEFAULT_LR, DEFAULT_RANK, DEFAULT_VAL_FRACTION, FULL_SCALE_ITERATIONS, N_SEARCH_SPACE,
};
pub use protocol::{
    ablate, ablation_variants, effective_jobs, leave_one_domain_out, mean_stderr, run_one, run_parallel, select_n,
    sweep_n, AblationRow, DomainSummary, LodoResult, RunRecord, SweepResult, SweepRow, THREADS_ENV,
};
pub use train::{accuracy, check_frozen, pretrain_base, train, HistoryRow, PretrainOutcome, TrainOutcome, TrainSplit};
