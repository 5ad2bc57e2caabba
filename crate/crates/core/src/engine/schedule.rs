//! Synchronous GPipe schedule for one training iteration of one pipeline.

use serde::Serialize;

use super::cost::{ring_allreduce_time, CostModel};
use crate::autopipe::PartitionPlan;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockKind {
    /// Forward of one micro-batch on one stage.
    #[serde(rename = "F")]
    Forward,
    /// Backward of one micro-batch on one stage.
    #[serde(rename = "B")]
    Backward,
    /// Optimizer step.
    #[serde(rename = "U")]
    Update,
    /// Activation sent to the next stage.
    #[serde(rename = "XFER")]
    Transfer,
    /// Gradient sent to the previous stage.
    #[serde(rename = "XFER")]
    GradTransfer,
    /// One gradient bucket's ring AllReduce.
    #[serde(rename = "AR")]
    AllReduce,
    /// Cached activations read ahead of a forward.
    #[serde(rename = "CACHE")]
    CacheRead,
    /// Asynchronous write of new boundary activations.
    #[serde(rename = "CACHE")]
    CacheWrite,
}

impl BlockKind {
    /// Blocks that occupy the device's compute stream.
    pub fn occupies_device(self) -> bool {
        matches!(
            self,
            BlockKind::Forward | BlockKind::Backward | BlockKind::Update | BlockKind::CacheRead
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub device: usize,
    pub kind: BlockKind,
    /// Micro-batch for compute, transfer and cache blocks; bucket for AllReduce.
    pub index: usize,
    pub start: f64,
    pub end: f64,
}

impl Block {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn tag(&self) -> String {
        match self.kind {
            BlockKind::Forward | BlockKind::Backward | BlockKind::CacheRead => {
                format!("mb{}", self.index)
            }
            BlockKind::Transfer => format!("act mb{} {}->{}", self.index, self.device, self.device + 1),
            BlockKind::GradTransfer => {
                format!("grad mb{} {}->{}", self.index, self.device, self.device - 1)
            }
            BlockKind::AllReduce => format!("bucket{}", self.index),
            BlockKind::Update => "update".to_string(),
            BlockKind::CacheWrite => format!("write mb{}", self.index),
        }
    }
}

/// Gradient bucket in launch order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bucket {
    pub bytes: u64,
    /// Fraction of the stage's backward work done when this bucket's
    /// gradients are complete.
    pub ready_fraction: f64,
}

/// Work assigned to one pipeline stage, per sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageLoad {
    pub forward_params: u64,
    /// Frozen parameters run forward without building a backward graph.
    pub frozen_forward_params: u64,
    pub backward_params: u64,
    pub update_params: u64,
    pub buckets: Vec<Bucket>,
    pub cache_read_bytes: u64,
    pub cache_write_bytes: u64,
    /// Activation bytes handed to the next stage.
    pub output_bytes: u64,
}

/// One sublayer's role on its stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageWork {
    pub params: u64,
    pub backward: bool,
    pub synced: bool,
}

impl StageLoad {
    /// Builds a stage from its sublayers in forward order. Buckets fill in
    /// reverse order as backward reaches each synced sublayer.
    pub fn from_work(work: &[StageWork], bytes_per_param: u64, bucket_bytes: u64) -> StageLoad {
        let forward_params = work.iter().map(|w| w.params).sum();
        let backward_params: u64 = work.iter().filter(|w| w.backward).map(|w| w.params).sum();
        let update_params = work.iter().filter(|w| w.synced).map(|w| w.params).sum();
        let mut buckets = Vec::new();
        let mut done = 0u64;
        let mut pending = 0u64;
        for w in work.iter().rev() {
            if w.backward {
                done += w.params;
            }
            if w.synced {
                pending += w.params * bytes_per_param;
                if pending >= bucket_bytes {
                    buckets.push(Bucket {
                        bytes: pending,
                        ready_fraction: fraction(done, backward_params),
                    });
                    pending = 0;
                }
            }
        }
        if pending > 0 {
            let last_synced = work
                .iter()
                .rev()
                .scan(0u64, |acc, w| {
                    if w.backward {
                        *acc += w.params;
                    }
                    Some((*acc, w.synced))
                })
                .filter(|&(_, s)| s)
                .last()
                .map_or(backward_params, |(d, _)| d);
            buckets.push(Bucket {
                bytes: pending,
                ready_fraction: fraction(last_synced, backward_params),
            });
        }
        StageLoad {
            forward_params,
            frozen_forward_params: 0,
            backward_params,
            update_params,
            buckets,
            cache_read_bytes: 0,
            cache_write_bytes: 0,
            output_bytes: 0,
        }
    }

    pub fn sync_bytes(&self) -> u64 {
        self.buckets.iter().map(|b| b.bytes).sum()
    }
}

fn fraction(done: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        done as f64 / total as f64
    }
}

/// How stage 0 obtains the input of the first active layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FrozenInput {
    /// Layer whose input activations are read from the cache; frozen layers
    /// from here to the frozen boundary are run forward. `None` runs the
    /// whole frozen prefix from the raw input.
    pub read_layer: Option<usize>,
    /// Layer whose input activations are written to the cache.
    pub write_layer: Option<usize>,
}

/// Stages of a pipeline rebuilt around the frozen prefix: only active
/// sublayers are partitioned, the frozen block runs forward-only on stage 0.
pub fn elastic_stages(
    plan: &PartitionPlan,
    model: &ModelSpec,
    input: FrozenInput,
    bucket_bytes: u64,
) -> Vec<StageLoad> {
    let bpp = model.bytes_per_param();
    let frozen = plan.frozen_layers();
    (0..plan.len())
        .map(|k| {
            let work: Vec<StageWork> = plan
                .stage_sublayers(k)
                .iter()
                .map(|s| StageWork {
                    params: s.params,
                    backward: true,
                    synced: true,
                })
                .collect();
            let mut stage = StageLoad::from_work(&work, bpp, bucket_bytes);
            if k == 0 {
                let from = input.read_layer.unwrap_or(0);
                stage.frozen_forward_params = model.range_params(from, frozen);
                if let Some(layer) = input.read_layer {
                    stage.cache_read_bytes = model.layer_input_bytes(layer);
                }
                if let Some(layer) = input.write_layer {
                    stage.cache_write_bytes = model.layer_input_bytes(layer);
                }
            }
            if k + 1 < plan.len() {
                stage.output_bytes = model.activation_bytes(plan.stage_end_boundary(k));
            }
            stage
        })
        .collect()
}

/// Stages of a fixed pipeline built over the whole model. Layers below
/// `frozen_layers` still run forward and backward but skip the update and
/// gradient synchronization.
pub fn static_stages(
    plan: &PartitionPlan,
    model: &ModelSpec,
    frozen_layers: usize,
    bucket_bytes: u64,
) -> Vec<StageLoad> {
    let bpp = model.bytes_per_param();
    (0..plan.len())
        .map(|k| {
            let work: Vec<StageWork> = plan
                .stage_sublayers(k)
                .iter()
                .map(|s| StageWork {
                    params: s.params,
                    backward: true,
                    synced: s.layer >= frozen_layers,
                })
                .collect();
            let mut stage = StageLoad::from_work(&work, bpp, bucket_bytes);
            if k + 1 < plan.len() {
                stage.output_bytes = model.activation_bytes(plan.stage_end_boundary(k));
            }
            stage
        })
        .collect()
}

/// Everything needed to time one iteration except the micro-batch count.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSetup {
    pub stages: Vec<StageLoad>,
    pub batch_size: u64,
    pub integer_microbatches: bool,
    pub cost: CostModel,
    /// Multiplier on forward and backward compute.
    pub compute_scale: f64,
    /// Bandwidth between neighbouring stages.
    pub link_bandwidth: f64,
    /// Data-parallel width `R`.
    pub replicas: usize,
    /// Bottleneck bandwidth of the replica ring.
    pub allreduce_bandwidth: f64,
    pub cache_read_bandwidth: f64,
    pub cache_write_bandwidth: f64,
    pub cache_read_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationSchedule {
    pub micro_batches: usize,
    pub blocks: Vec<Block>,
    pub makespan: f64,
    /// Per-device busy time of the compute stream.
    pub busy: Vec<f64>,
    /// Per-device idle time: `makespan − busy`.
    pub bubble: Vec<f64>,
    /// AllReduce time seen by the busiest device: the union of that
    /// device's AllReduce intervals, maximised over devices.
    pub comm_time: f64,
    /// Makespan the same schedule would have without AllReduce.
    pub compute_makespan: f64,
}

impl IterationSchedule {
    pub fn pipeline_length(&self) -> usize {
        self.busy.len()
    }

    pub fn total_bubble(&self) -> f64 {
        self.bubble.iter().sum()
    }

    pub fn mean_bubble(&self) -> f64 {
        self.total_bubble() / self.bubble.len() as f64
    }

    pub fn blocks_of(&self, device: usize, kind: BlockKind) -> impl Iterator<Item = &Block> + '_ {
        self.blocks
            .iter()
            .filter(move |b| b.device == device && b.kind == kind)
    }
}

/// Makespan minus the makespan with every AllReduce removed.
pub fn exposed_comm(schedule: &IterationSchedule) -> f64 {
    (schedule.makespan - schedule.compute_makespan).max(0.0)
}

/// Micro-batch sizes: equal fractions, or whole samples with the remainder
/// spread over the first micro-batches.
pub fn micro_batch_sizes(batch: u64, m: usize, integer: bool) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::domain("micro-batch count must be at least 1"));
    }
    if !integer {
        return Ok(vec![batch as f64 / m as f64; m]);
    }
    if m as u64 > batch {
        return Err(Error::domain(format!(
            "{m} whole micro-batches do not fit a batch of {batch}"
        )));
    }
    let base = batch / m as u64;
    let extra = (batch % m as u64) as usize;
    Ok((0..m)
        .map(|i| (base + u64::from(i < extra)) as f64)
        .collect())
}

/// Builds the synchronous schedule: all forwards in micro-batch order, then
/// all backwards in reverse order, bucketed AllReduce on a separate track,
/// then the update.
pub fn schedule_iteration(setup: &IterationSetup, m: usize) -> Result<IterationSchedule> {
    let k = setup.stages.len();
    if k == 0 {
        return Err(Error::domain("pipeline has no stages"));
    }
    let mbs = micro_batch_sizes(setup.batch_size, m, setup.integer_microbatches)?;
    let c = &setup.cost;
    let mut blocks = Vec::with_capacity(k * (3 * m + 2));
    let mut busy = vec![0.0; k];
    let mut device_free = vec![0.0f64; k];
    let mut fwd_link_free = vec![0.0f64; k];
    let mut bwd_link_free = vec![0.0f64; k];
    let mut write_free = 0.0f64;
    let mut last_forward = vec![0.0f64; m];

    let push = |blocks: &mut Vec<Block>, device, kind, index, start: f64, end: f64| {
        blocks.push(Block {
            device,
            kind,
            index,
            start,
            end,
        });
        end
    };

    for (b, &mb) in mbs.iter().enumerate() {
        let mut ready = 0.0f64;
        for (d, st) in setup.stages.iter().enumerate() {
            let mut t = device_free[d].max(ready);
            if st.cache_read_bytes > 0 {
                let dur = st.cache_read_bytes as f64 * mb / setup.cache_read_bandwidth
                    + setup.cache_read_latency_s;
                t = push(&mut blocks, d, BlockKind::CacheRead, b, t, t + dur);
                busy[d] += dur;
            }
            let dur = setup.compute_scale
                * (c.forward_time(st.forward_params, mb) + c.frozen_forward_time(st.frozen_forward_params, mb))
                + c.microbatch_overhead_s;
            let end = push(&mut blocks, d, BlockKind::Forward, b, t, t + dur);
            busy[d] += dur;
            device_free[d] = end;
            if st.cache_write_bytes > 0 {
                let s = end.max(write_free);
                let dur = st.cache_write_bytes as f64 * mb / setup.cache_write_bandwidth;
                write_free = push(&mut blocks, d, BlockKind::CacheWrite, b, s, s + dur);
            }
            if d + 1 < k {
                let s = end.max(fwd_link_free[d]);
                let dur = st.output_bytes as f64 * mb / setup.link_bandwidth + c.link_latency_s;
                ready = push(&mut blocks, d, BlockKind::Transfer, b, s, s + dur);
                fwd_link_free[d] = ready;
            } else {
                last_forward[b] = end;
            }
        }
    }

    let mut last_backward = vec![(0.0f64, 0.0f64); k];
    for (b, &mb) in mbs.iter().enumerate().rev() {
        let mut ready = last_forward[b];
        for d in (0..k).rev() {
            let st = &setup.stages[d];
            let t = device_free[d].max(ready);
            let dur = setup.compute_scale * c.backward_ratio * c.forward_time(st.backward_params, mb)
                + c.microbatch_overhead_s;
            let end = push(&mut blocks, d, BlockKind::Backward, b, t, t + dur);
            busy[d] += dur;
            device_free[d] = end;
            if b == 0 {
                last_backward[d] = (t, end);
            }
            if d > 0 {
                let s = end.max(bwd_link_free[d]);
                let bytes = setup.stages[d - 1].output_bytes as f64;
                let dur = bytes * mb / setup.link_bandwidth + c.link_latency_s;
                ready = push(&mut blocks, d, BlockKind::GradTransfer, b, s, s + dur);
                bwd_link_free[d] = ready;
            }
        }
    }

    let mut comm_time = 0.0f64;
    let mut makespan = 0.0f64;
    let mut compute_makespan = 0.0f64;
    for (d, st) in setup.stages.iter().enumerate() {
        let (bs, be) = last_backward[d];
        let mut track = 0.0f64;
        let mut ar_intervals = Vec::new();
        if setup.replicas > 1 {
            for (i, bucket) in st.buckets.iter().enumerate() {
                let ready = bs + (be - bs) * bucket.ready_fraction;
                let s = ready.max(track);
                let dur = ring_allreduce_time(
                    bucket.bytes as f64,
                    setup.replicas,
                    setup.allreduce_bandwidth,
                    c.allreduce_latency_s,
                );
                track = push(&mut blocks, d, BlockKind::AllReduce, i, s, s + dur);
                ar_intervals.push((s, track));
            }
        }
        comm_time = comm_time.max(union_length(&mut ar_intervals));
        let dur = c.update_cost * st.update_params as f64;
        let us = be.max(track);
        let ue = push(&mut blocks, d, BlockKind::Update, 0, us, us + dur);
        busy[d] += dur;
        makespan = makespan.max(ue);
        compute_makespan = compute_makespan.max(be + dur);
    }

    let bubble = busy.iter().map(|b| (makespan - b).max(0.0)).collect();
    Ok(IterationSchedule {
        micro_batches: m,
        blocks,
        makespan,
        busy,
        bubble,
        comm_time,
        compute_makespan,
    })
}

fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for &(s, e) in intervals.iter() {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_setup(k: usize, update: u64) -> IterationSetup {
        let stage = StageLoad {
            forward_params: 1,
            frozen_forward_params: 0,
            backward_params: 1,
            update_params: update,
            buckets: vec![Bucket {
                bytes: 1,
                ready_fraction: 1.0,
            }],
            cache_read_bytes: 0,
            cache_write_bytes: 0,
            output_bytes: 0,
        };
        IterationSetup {
            stages: vec![stage; k],
            batch_size: 1,
            integer_microbatches: false,
            cost: CostModel {
                forward_cost: 1.0,
                backward_ratio: 1.0,
                frozen_forward_ratio: 1.0,
                update_cost: 1.0,
                microbatch_overhead_s: 0.0,
                link_latency_s: 0.0,
                allreduce_latency_s: 0.0,
                bucket_bytes: 1,
                freeze_only_slowdown: 1.0,
            },
            compute_scale: 1.0,
            link_bandwidth: 1.0,
            replicas: 1,
            allreduce_bandwidth: 1.0,
            cache_read_bandwidth: 1.0,
            cache_write_bandwidth: 1.0,
            cache_read_latency_s: 0.0,
        }
    }

    #[test]
    fn balanced_pipeline_bubble() {
        // K = 4, M = 4, one unit per forward and backward micro-batch.
        let mut setup = unit_setup(4, 0);
        setup.batch_size = 4;
        let s = schedule_iteration(&setup, 4).unwrap();
        assert_eq!(s.makespan, 14.0);
        for b in &s.bubble {
            assert_eq!(*b, 6.0);
        }
        assert_eq!(exposed_comm(&s), 0.0);
    }

    #[test]
    fn single_stage_has_no_bubble() {
        let s = schedule_iteration(&unit_setup(1, 0), 7).unwrap();
        assert!(s.bubble[0].abs() < 1e-12);
    }

    #[test]
    fn no_allreduce_without_replicas() {
        let s = schedule_iteration(&unit_setup(2, 3), 2).unwrap();
        assert!(s.blocks.iter().all(|b| b.kind != BlockKind::AllReduce));
        assert_eq!(s.comm_time, 0.0);
    }

    #[test]
    fn zero_micro_batches_is_an_error() {
        assert!(schedule_iteration(&unit_setup(2, 0), 0).is_err());
    }

    #[test]
    fn integer_micro_batches_spread_remainder() {
        assert_eq!(micro_batch_sizes(10, 4, true).unwrap(), vec![3.0, 3.0, 2.0, 2.0]);
        assert!(micro_batch_sizes(3, 4, true).is_err());
        assert_eq!(micro_batch_sizes(3, 4, false).unwrap(), vec![0.75; 4]);
    }

    #[test]
    fn buckets_fill_in_reverse() {
        let work = [
            StageWork { params: 10, backward: true, synced: false },
            StageWork { params: 10, backward: true, synced: true },
            StageWork { params: 20, backward: true, synced: true },
        ];
        let st = StageLoad::from_work(&work, 1, 15);
        assert_eq!(st.buckets.len(), 2);
        assert_eq!(st.buckets[0], Bucket { bytes: 20, ready_fraction: 0.5 });
        assert_eq!(st.buckets[1], Bucket { bytes: 10, ready_fraction: 0.75 });
        assert_eq!(st.update_params, 30);
        assert_eq!(st.backward_params, 40);
    }

    #[test]
    fn union_merges_overlaps() {
        let mut v = vec![(0.0, 2.0), (1.0, 3.0), (5.0, 6.0)];
        assert_eq!(union_length(&mut v), 4.0);
    }
}
