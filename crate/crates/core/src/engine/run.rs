//! Multi-epoch elastic training runs.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::cost::{CostModel, TransitionOverheads};
use super::schedule::{
    elastic_stages, schedule_iteration, static_stages, FrozenInput, IterationSchedule,
    IterationSetup, StageLoad,
};
use crate::autocache::{should_cache, CacheConfig, CacheMode, CacheState, TierAction, TierSimulator};
use crate::autodp::{node_subset_len, shard_sizes, transition, Topology, TransitionContext, TransitionLog};
use crate::autopipe::{
    load_balance, optimal_chunks, try_compress, BalanceCriterion, ChunkProfile, CompressionStep,
    PartitionPlan,
};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::freeze::{next_frozen_count, FreezeState, GradNormSource};
use crate::model::{m_partition, ClusterSpec, ModelSpec, TrainingConfig};

/// Fully resolved inputs of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub training: TrainingConfig,
    pub cost: CostModel,
    pub overheads: TransitionOverheads,
    pub cache: CacheConfig,
    pub criterion: BalanceCriterion,
    pub norms: GradNormSource,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        self.training.validate(&self.cluster)?;
        self.cost.validate()?;
        self.overheads.validate()?;
        self.cache.validate()?;
        if let BalanceCriterion::MeanPlusVariance { unit_params } = self.criterion {
            if !(unit_params.is_finite() && unit_params > 0.0) {
                return Err(Error::config(
                    "partition.unit_params",
                    "must be a positive finite number",
                ));
            }
        }
        Ok(())
    }
}

/// Which parts of the elastic system are switched on. Enabling a feature
/// enables everything it builds on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub freeze: bool,
    pub autopipe: bool,
    pub autodp: bool,
    pub autocache: bool,
}

impl Features {
    pub const BASELINE: Features = Features {
        freeze: false,
        autopipe: false,
        autodp: false,
        autocache: false,
    };
    pub const FREEZE_ONLY: Features = Features {
        freeze: true,
        ..Features::BASELINE
    };
    pub const ALL: Features = Features {
        freeze: true,
        autopipe: true,
        autodp: true,
        autocache: true,
    };

    /// Fills in implied features.
    pub fn normalized(mut self) -> Self {
        if self.autodp || self.autocache {
            self.autopipe = true;
        }
        if self.autopipe {
            self.freeze = true;
        }
        self
    }

    /// The cumulative ladder baseline, freeze, +autopipe, +autodp, +autocache.
    pub fn ladder() -> Vec<Features> {
        let pipe = Features {
            autopipe: true,
            ..Features::FREEZE_ONLY
        };
        let dp = Features { autodp: true, ..pipe };
        vec![Features::BASELINE, Features::FREEZE_ONLY, pipe, dp, Features::ALL]
    }

    pub fn label(&self) -> String {
        let f = self.normalized();
        if f == Features::BASELINE {
            return "baseline".into();
        }
        if f == Features::ALL {
            return "all".into();
        }
        let mut parts = vec!["freeze"];
        for (on, name) in [(f.autopipe, "autopipe"), (f.autodp, "autodp"), (f.autocache, "autocache")] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

impl FromStr for Features {
    type Err = Error;

    /// Comma-separated list of `baseline`, `all`, `freeze_only`, `autopipe`,
    /// `autodp`, `autocache`, each optionally prefixed with `+`.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = Features::BASELINE;
        let mut any = false;
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            any = true;
            match token.trim_start_matches('+') {
                "baseline" | "none" => {}
                "all" => f = Features::ALL,
                "freeze_only" | "freeze" => f.freeze = true,
                "autopipe" => f.autopipe = true,
                "autodp" => f.autodp = true,
                "autocache" => f.autocache = true,
                other => {
                    return Err(Error::config(
                        "flags",
                        format!("unknown feature flag `{other}`"),
                    ))
                }
            }
        }
        if !any {
            return Err(Error::config("flags", "empty feature list"));
        }
        Ok(f.normalized())
    }
}

impl fmt::Display for Features {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One row of the run report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub frozen_layers: usize,
    pub pipeline_length: usize,
    pub replicas: usize,
    pub micro_batches: usize,
    pub iterations: u64,
    pub iteration_time: f64,
    pub epoch_time: f64,
    /// Samples per second across all replicas.
    pub throughput: f64,
    /// Mean per-device idle time in one iteration.
    pub bubble_time: f64,
    /// AllReduce wall-clock time in one iteration.
    pub comm_time: f64,
    pub exposed_comm_time: f64,
    pub cache_enabled: bool,
    pub cache_stall: f64,
    pub transition_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub features: Features,
    pub rows: Vec<EpochRow>,
}

impl RunReport {
    pub fn total_time(&self) -> f64 {
        self.rows.iter().map(|r| r.epoch_time).sum()
    }

    pub fn total_samples(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iterations as f64 * r.replicas as f64)
            .sum()
    }

    /// Share of wall-clock time spent in gradient AllReduce.
    pub fn comm_ratio(&self) -> f64 {
        let comm: f64 = self
            .rows
            .iter()
            .map(|r| r.iterations as f64 * r.comm_time)
            .sum();
        comm / self.total_time()
    }

    pub fn pipeline_lengths(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.pipeline_length).collect()
    }
}

/// A block of one epoch's representative iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub device: usize,
    pub kind: &'static str,
    pub start_s: f64,
    pub end_s: f64,
    pub tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheEventKind {
    Enable,
    Transition,
    Prefetch,
    Evict,
    Stall,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheEvent {
    pub epoch: usize,
    pub event: CacheEventKind,
    pub bytes: u64,
    pub duration: f64,
}

/// Per-epoch internals kept for inspection.
#[derive(Debug, Clone)]
pub struct EpochDetail {
    pub plan: PartitionPlan,
    pub setup: IterationSetup,
    pub chunks: ChunkProfile,
    pub schedule: IterationSchedule,
    pub compression: Vec<CompressionStep>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub details: Vec<EpochDetail>,
    pub transitions: Vec<TransitionLog>,
    pub cache_events: Vec<CacheEvent>,
    /// `M_GPU^(0)`: largest effective stage of the initial plan.
    pub max_effective_0: f64,
    pub cache: Option<CacheState>,
}

impl RunOutcome {
    pub fn timeline(&self) -> Vec<TimelineEntry> {
        self.details
            .iter()
            .enumerate()
            .flat_map(|(epoch, d)| {
                d.schedule.blocks.iter().map(move |b| TimelineEntry {
                    device: b.device,
                    kind: kind_name(b.kind),
                    start_s: b.start,
                    end_s: b.end,
                    tag: format!("epoch{epoch} {}", b.tag()),
                })
            })
            .collect()
    }
}

fn kind_name(kind: super::schedule::BlockKind) -> &'static str {
    use super::schedule::BlockKind::*;
    match kind {
        Forward => "F",
        Backward => "B",
        Update => "U",
        Transfer | GradTransfer => "XFER",
        AllReduce => "AR",
        CacheRead | CacheWrite => "CACHE",
    }
}

/// Runs every epoch of `scenario` with the given features.
pub fn simulate(scenario: &Scenario, features: Features, exec: Execution) -> Result<RunOutcome> {
    scenario.validate()?;
    let features = features.normalized();
    let model = &scenario.model;
    let cluster = &scenario.cluster;
    let training = &scenario.training;
    let layers = model.layer_count();
    let lambda = training.lambda_frozen;

    let k0 = training.pipeline_length(cluster);
    let mut topology = Topology::new(cluster.clone(), k0)?;
    let plan0 = load_balance(&m_partition(model, 0)?, k0, lambda, scenario.criterion)?;
    let m0 = plan0.max_effective();
    let mut k = k0;

    let node_samples: Vec<u64> = (0..cluster.nodes)
        .map(|n| node_subset_len(training.dataset_size, cluster.nodes, n))
        .collect();
    let cache_on = features.autocache && scenario.cache.mode != CacheMode::Off;
    let mut cache = cache_on.then(|| match scenario.cache.mode {
        CacheMode::Forced => CacheState::with_inputs(&node_samples),
        _ => CacheState::empty(cluster.nodes),
    });

    let mut freeze = FreezeState::new(training.alpha)?;
    let mut frozen = 0usize;
    let mut steps_done = 0u64;
    let mut rows = Vec::with_capacity(training.epochs);
    let mut details = Vec::with_capacity(training.epochs);
    let mut transitions = Vec::new();
    let mut cache_events = Vec::new();

    for epoch in 0..training.epochs {
        if features.freeze && epoch > 0 && epoch % training.freeze_check_interval == 0 {
            let t = freeze.next_timestep();
            let norms = scenario.norms.norms(epoch - 1, t, layers)?;
            frozen = next_frozen_count(&mut freeze, &norms, layers)?;
        }

        let mut overhead = 0.0;
        if epoch == 0 {
            overhead += scenario.overheads.lookup(0, k0);
        }

        let (plan, compression) = if features.autopipe {
            let seq = m_partition(model, frozen)?;
            // Without elastic replicas a shorter pipeline only idles GPUs, so
            // only compress when there are fewer active sublayers than stages.
            let limit = if features.autodp { m0 } else { f64::NEG_INFINITY };
            let c = try_compress(&seq, k, lambda, limit, scenario.criterion)?;
            for s in &c.steps {
                overhead += scenario.overheads.lookup(s.from, s.to);
            }
            (c.plan, c.steps)
        } else {
            (plan0.clone(), Vec::new())
        };
        let new_k = plan.len();
        if features.autodp && new_k != k {
            let ctx = TransitionContext {
                epoch,
                lr_step: steps_done,
                frozen_layers: frozen,
                weights_version: steps_done,
            };
            let (next, messages) = transition(&topology, new_k, ctx)?;
            info!(
                "epoch {epoch}: pipelines {k} -> {new_k} GPUs, replicas {} -> {}",
                topology.replicas(),
                next.replicas()
            );
            transitions.push(TransitionLog::new(epoch, k, new_k, messages));
            topology = next;
        }
        k = new_k;
        let replicas = topology.replicas();

        let mut input = FrozenInput::default();
        let mut cache_enabled = false;
        if let Some(state) = cache.as_mut() {
            let mb = training.batch_size as f64 / k as f64;
            let decision = should_cache(frozen, model, &scenario.cost, &scenario.cache, mb, node_samples[0]);
            let forced = scenario.cache.mode == CacheMode::Forced;
            if decision.enable || forced {
                let old = state.boundary();
                let was_enabled = state.enabled();
                let tc = state.transition(frozen, model, &node_samples)?;
                input = FrozenInput {
                    read_layer: old,
                    write_layer: (old != Some(frozen)).then_some(frozen),
                };
                cache_enabled = true;
                let samples: u64 = node_samples.iter().sum();
                if !was_enabled {
                    cache_events.push(CacheEvent {
                        epoch,
                        event: CacheEventKind::Enable,
                        bytes: 0,
                        duration: 0.0,
                    });
                }
                if !tc.is_zero() {
                    cache_events.push(CacheEvent {
                        epoch,
                        event: CacheEventKind::Transition,
                        bytes: tc.write_bytes * samples,
                        duration: tc.seconds(
                            &scenario.cost,
                            scenario.cache.host_bandwidth,
                            scenario.cache.host_bandwidth,
                        ) * samples as f64,
                    });
                }
                debug!(
                    "epoch {epoch}: cache read {:.4}s vs forward {:.4}s per micro-batch",
                    decision.read_time, decision.forward_time
                );
            }
        }

        let bucket = scenario.cost.bucket_bytes;
        let (stages, compute_scale) = if features.autopipe {
            (elastic_stages(&plan, model, input, bucket), 1.0)
        } else {
            let f = if features.freeze { frozen } else { 0 };
            let scale = if f > 0 { scenario.cost.freeze_only_slowdown } else { 1.0 };
            (static_stages(&plan, model, f, bucket), scale)
        };
        let setup = iteration_setup(scenario, stages, compute_scale, &topology);
        let chunks = optimal_chunks(&setup, exec)?;
        let schedule = schedule_iteration(&setup, chunks.chosen)?;

        let iterations = match training.iterations_per_epoch {
            Some(n) => n,
            None => {
                let largest = shard_sizes(training.dataset_size, &topology)?
                    .into_iter()
                    .map(|(_, n)| n)
                    .max()
                    .unwrap_or(0);
                largest.div_ceil(training.batch_size)
            }
        };

        let mut stall = 0.0;
        if let Some(layer) = input.read_layer {
            let batch_bytes = model.layer_input_bytes(layer) * training.batch_size;
            let per_node = topology.active_per_node() as u64;
            let batches = (iterations * per_node) as usize;
            let mut sim = TierSimulator::new(batches, batch_bytes, &scenario.cache)?;
            if sim.spills() {
                for i in 0..batches {
                    let demand = (i as u64 / per_node) as f64 * schedule.makespan;
                    let step = sim.advance(i, demand)?;
                    for a in step.actions {
                        let (event, bytes, duration) = match a {
                            TierAction::Prefetch { start, end, bytes, .. } => {
                                (CacheEventKind::Prefetch, bytes, end - start)
                            }
                            TierAction::Evict { bytes, .. } => (CacheEventKind::Evict, bytes, 0.0),
                        };
                        cache_events.push(CacheEvent {
                            epoch,
                            event,
                            bytes,
                            duration,
                        });
                    }
                }
                stall = sim.total_stall();
                if stall > 0.0 {
                    cache_events.push(CacheEvent {
                        epoch,
                        event: CacheEventKind::Stall,
                        bytes: 0,
                        duration: stall,
                    });
                }
            }
        }

        let iteration_time = schedule.makespan;
        let epoch_time = iterations as f64 * iteration_time + overhead + stall;
        steps_done += iterations;
        rows.push(EpochRow {
            epoch,
            frozen_layers: frozen,
            pipeline_length: k,
            replicas,
            micro_batches: chunks.chosen,
            iterations,
            iteration_time,
            epoch_time,
            throughput: (replicas as u64 * training.batch_size) as f64 / iteration_time,
            bubble_time: schedule.mean_bubble(),
            comm_time: schedule.comm_time,
            exposed_comm_time: super::schedule::exposed_comm(&schedule),
            cache_enabled,
            cache_stall: stall,
            transition_overhead: overhead,
        });
        details.push(EpochDetail {
            plan,
            setup,
            chunks,
            schedule,
            compression,
        });
    }

    Ok(RunOutcome {
        report: RunReport { features, rows },
        details,
        transitions,
        cache_events,
        max_effective_0: m0,
        cache,
    })
}

/// Binds stage loads to the scenario's cost model and the current topology.
pub fn iteration_setup(
    scenario: &Scenario,
    stages: Vec<StageLoad>,
    compute_scale: f64,
    topology: &Topology,
) -> IterationSetup {
    IterationSetup {
        stages,
        batch_size: scenario.training.batch_size,
        integer_microbatches: scenario.training.integer_microbatches,
        cost: scenario.cost,
        compute_scale,
        link_bandwidth: scenario.cluster.intra_node_bandwidth,
        replicas: topology.replicas(),
        allreduce_bandwidth: topology.allreduce_bandwidth(),
        cache_read_bandwidth: scenario.cache.host_bandwidth,
        cache_write_bandwidth: scenario.cache.host_bandwidth,
        cache_read_latency_s: scenario.cache.ipc_latency_s,
    }
}

/// A featured run next to the static baseline on the same scenario.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: RunReport,
    pub run: RunOutcome,
}

impl Comparison {
    /// Baseline wall-clock time over the featured run's.
    pub fn speedup(&self) -> f64 {
        self.baseline.total_time() / self.run.report.total_time()
    }
}

pub fn simulate_run(scenario: &Scenario, features: Features, exec: Execution) -> Result<Comparison> {
    let baseline = simulate(scenario, Features::BASELINE, exec)?.report;
    let run = simulate(scenario, features, exec)?;
    Ok(Comparison { baseline, run })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownRow {
    pub features: String,
    pub total_time: f64,
    /// Dataset passes per wall-clock second, in samples/s.
    pub throughput: f64,
    pub speedup: f64,
}

/// Runs each feature combination and reports throughput relative to the
/// first entry.
pub fn speedup_breakdown(
    scenario: &Scenario,
    combos: &[Features],
    exec: Execution,
) -> Result<Vec<BreakdownRow>> {
    if combos.is_empty() {
        return Err(Error::config("flags", "no feature combinations given"));
    }
    let reports = exec::try_map(exec, combos, |f| {
        simulate(scenario, *f, Execution::Sequential).map(|o| o.report)
    })?;
    let work = scenario.training.dataset_size as f64 * scenario.training.epochs as f64;
    let reference = reports[0].total_time();
    Ok(combos
        .iter()
        .zip(&reports)
        .map(|(f, r)| BreakdownRow {
            features: f.label(),
            total_time: r.total_time(),
            throughput: work / r.total_time(),
            speedup: reference / r.total_time(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_and_imply() {
        let f: Features = "autodp".parse().unwrap();
        assert!(f.freeze && f.autopipe && f.autodp && !f.autocache);
        assert_eq!("baseline".parse::<Features>().unwrap(), Features::BASELINE);
        assert_eq!("all".parse::<Features>().unwrap(), Features::ALL);
        assert_eq!("freeze_only".parse::<Features>().unwrap(), Features::FREEZE_ONLY);
        assert_eq!("+autopipe,+autocache".parse::<Features>().unwrap().label(), "freeze+autopipe+autocache");
        assert!("warp".parse::<Features>().is_err());
        assert!("".parse::<Features>().is_err());
    }

    #[test]
    fn ladder_is_cumulative() {
        let l = Features::ladder();
        assert_eq!(l.first(), Some(&Features::BASELINE));
        assert_eq!(l.last(), Some(&Features::ALL));
        assert_eq!(l.len(), 5);
    }
}
