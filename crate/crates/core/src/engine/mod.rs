//! Cost model, iteration schedules and multi-epoch runs.

mod cost;
mod run;
mod schedule;

pub use cost::{
    ring_allreduce_time, transfer_time, CostModel, TransitionOverhead, TransitionOverheads,
    REFERENCE_FORWARD_COST,
};
pub use run::{
    iteration_setup, simulate, simulate_run, speedup_breakdown, BreakdownRow, CacheEvent,
    CacheEventKind, Comparison, EpochDetail, EpochRow, Features, RunOutcome, RunReport, Scenario,
    TimelineEntry,
};
pub use schedule::{
    elastic_stages, exposed_comm, micro_batch_sizes, schedule_iteration, static_stages, Block,
    BlockKind, Bucket, FrozenInput, IterationSchedule, IterationSetup, StageLoad, StageWork,
};
