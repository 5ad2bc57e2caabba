//! Cross-pipeline activation cache: when to enable it, what a boundary move
//! costs, and the host/disk sliding-window tier model.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::CostModel;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Never cache.
    Off,
    /// Cache once the profiler says reading beats recomputing.
    #[default]
    Auto,
    /// Cache from the first epoch regardless of the profiler, starting from
    /// the raw inputs.
    Forced,
}

/// Tier parameters of the shared cache daemon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub mode: CacheMode,
    /// Host-memory read/write bandwidth per node, bytes/s.
    pub host_bandwidth: f64,
    /// Disk bandwidth per node, bytes/s.
    pub disk_bandwidth: f64,
    /// Host memory available to the cache per node.
    pub host_capacity_bytes: u64,
    /// Batches per disk prefetch.
    pub block_batches: usize,
    /// Daemon access latency per read.
    pub ipc_latency_s: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            mode: CacheMode::Auto,
            host_bandwidth: 6.0e9,
            disk_bandwidth: 1.0e9,
            host_capacity_bytes: 512 << 30,
            block_batches: 16,
            ipc_latency_s: 0.0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("cache.host_bandwidth", self.host_bandwidth),
            ("cache.disk_bandwidth", self.disk_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        if self.block_batches == 0 {
            return Err(Error::config("cache.block_batches", "must be at least 1"));
        }
        if !(self.ipc_latency_s.is_finite() && self.ipc_latency_s >= 0.0) {
            return Err(Error::config(
                "cache.ipc_latency_s",
                "must be a non-negative finite number",
            ));
        }
        Ok(())
    }

    /// Read bandwidth of the tier that holds `node_bytes` of activations.
    pub fn tier_bandwidth(&self, node_bytes: u64) -> f64 {
        if node_bytes <= self.host_capacity_bytes {
            self.host_bandwidth
        } else {
            self.disk_bandwidth
        }
    }
}

/// Profiler verdict for one frozen boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacheDecision {
    pub enable: bool,
    /// Seconds to read one micro-batch of boundary activations.
    pub read_time: f64,
    /// Seconds to run one micro-batch through the frozen prefix.
    pub forward_time: f64,
}

/// Compares reading layer-`frozen_layers` inputs from the cache against
/// recomputing the frozen prefix, for a micro-batch of `micro_batch`
/// samples. `node_samples` sizes the per-node store to pick the tier.
pub fn should_cache(
    frozen_layers: usize,
    model: &ModelSpec,
    cost: &CostModel,
    cache: &CacheConfig,
    micro_batch: f64,
    node_samples: u64,
) -> CacheDecision {
    let bytes = model.layer_input_bytes(frozen_layers);
    let bandwidth = cache.tier_bandwidth(bytes.saturating_mul(node_samples));
    let read_time = bytes as f64 * micro_batch / bandwidth + cache.ipc_latency_s;
    let forward_time = cost.frozen_forward_time(model.prefix_params(frozen_layers), micro_batch);
    CacheDecision {
        enable: read_time < forward_time,
        read_time,
        forward_time,
    }
}

/// Smallest frozen count at which the profiler enables caching.
pub fn enable_threshold(
    model: &ModelSpec,
    cost: &CostModel,
    cache: &CacheConfig,
    micro_batch: f64,
    node_samples: u64,
) -> Option<usize> {
    (0..=model.layer_count())
        .find(|&f| should_cache(f, model, cost, cache, micro_batch, node_samples).enable)
}

/// Per-sample cost of moving the cached boundary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TransitionCost {
    pub read_bytes: u64,
    pub forward_params: u64,
    pub write_bytes: u64,
}

impl TransitionCost {
    pub fn seconds(&self, cost: &CostModel, read_bandwidth: f64, write_bandwidth: f64) -> f64 {
        self.read_bytes as f64 / read_bandwidth
            + cost.frozen_forward_time(self.forward_params, 1.0)
            + self.write_bytes as f64 / write_bandwidth
    }

    pub fn is_zero(&self) -> bool {
        *self == TransitionCost::default()
    }
}

/// What the cache holds and how much frozen forward work it has charged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheState {
    /// Layer whose inputs are stored; `None` while the cache is empty.
    boundary: Option<usize>,
    /// Samples with stored activations, per node.
    presence: Vec<u64>,
    /// Frozen layer forwards charged per sample through the cache path.
    charged_layers: usize,
}

impl CacheState {
    pub fn empty(nodes: usize) -> Self {
        CacheState {
            boundary: None,
            presence: vec![0; nodes],
            charged_layers: 0,
        }
    }

    /// A cache pre-filled with raw inputs (boundary 0).
    pub fn with_inputs(node_samples: &[u64]) -> Self {
        CacheState {
            boundary: Some(0),
            presence: node_samples.to_vec(),
            charged_layers: 0,
        }
    }

    pub fn boundary(&self) -> Option<usize> {
        self.boundary
    }

    pub fn enabled(&self) -> bool {
        self.boundary.is_some()
    }

    pub fn presence(&self) -> &[u64] {
        &self.presence
    }

    pub fn charged_layers(&self) -> usize {
        self.charged_layers
    }

    /// Moves the boundary to `new_boundary`, filling every node's samples.
    /// Reads the old boundary (if any), runs the layers in between and writes
    /// the new boundary; an unchanged boundary costs nothing.
    pub fn transition(
        &mut self,
        new_boundary: usize,
        model: &ModelSpec,
        node_samples: &[u64],
    ) -> Result<TransitionCost> {
        if new_boundary > model.layer_count() {
            return Err(Error::domain(format!(
                "cache boundary {new_boundary} exceeds layer count {}",
                model.layer_count()
            )));
        }
        if node_samples.len() != self.presence.len() {
            return Err(Error::domain("node count changed under the cache"));
        }
        if let Some(old) = self.boundary {
            if new_boundary < old {
                return Err(Error::domain(format!(
                    "cache boundary cannot move back from {old} to {new_boundary}"
                )));
            }
            if new_boundary == old {
                return Ok(TransitionCost::default());
            }
        }
        let from = self.boundary.unwrap_or(0);
        let cost = TransitionCost {
            read_bytes: self.boundary.map_or(0, |b| model.layer_input_bytes(b)),
            forward_params: model.range_params(from, new_boundary),
            write_bytes: model.layer_input_bytes(new_boundary),
        };
        self.charged_layers += new_boundary - from;
        self.boundary = Some(new_boundary);
        self.presence.copy_from_slice(node_samples);
        Ok(cost)
    }
}

/// Functional form of [`CacheState::transition`].
pub fn cache_transition(
    state: &CacheState,
    new_boundary: usize,
    model: &ModelSpec,
    node_samples: &[u64],
) -> Result<(CacheState, TransitionCost)> {
    let mut next = state.clone();
    let cost = next.transition(new_boundary, model, node_samples)?;
    Ok((next, cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum TierAction {
    Prefetch {
        block: usize,
        start: f64,
        end: f64,
        bytes: u64,
    },
    Evict {
        block: usize,
        bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowStep {
    pub actions: Vec<TierAction>,
    pub stall: f64,
}

/// Host-memory sliding window over one node's cached batches, refilled from
/// disk one block at a time.
#[derive(Debug, Clone)]
pub struct TierSimulator {
    total_batches: usize,
    block_batches: usize,
    window_blocks: usize,
    batch_bytes: u64,
    disk_bandwidth: f64,
    /// Resident or in-flight blocks with their ready times.
    resident: VecDeque<(usize, f64)>,
    next_fetch: usize,
    disk_free: f64,
    delay: f64,
    peak_bytes: u64,
    capacity: u64,
}

impl TierSimulator {
    /// The first window is resident at the start of the epoch (it was just
    /// written by the previous pass).
    pub fn new(total_batches: usize, batch_bytes: u64, cache: &CacheConfig) -> Result<Self> {
        let block_batches = cache.block_batches;
        let window_batches = cache
            .host_capacity_bytes
            .checked_div(batch_bytes)
            .map_or(usize::MAX, |w| w.min(usize::MAX as u64) as usize);
        let window_blocks = window_batches / block_batches;
        let total_blocks = total_batches.div_ceil(block_batches);
        if window_blocks == 0 && total_blocks > 0 {
            return Err(Error::config(
                "cache.host_capacity_bytes",
                "host tier cannot hold a single prefetch block",
            ));
        }
        let mut sim = TierSimulator {
            total_batches,
            block_batches,
            window_blocks,
            batch_bytes,
            disk_bandwidth: cache.disk_bandwidth,
            resident: VecDeque::new(),
            next_fetch: 0,
            disk_free: 0.0,
            delay: 0.0,
            peak_bytes: 0,
            capacity: cache.host_capacity_bytes,
        };
        while sim.next_fetch < total_blocks.min(window_blocks) {
            sim.resident.push_back((sim.next_fetch, 0.0));
            sim.next_fetch += 1;
        }
        sim.note_peak();
        Ok(sim)
    }

    pub fn window_blocks(&self) -> usize {
        self.window_blocks
    }

    pub fn spills(&self) -> bool {
        self.total_batches.div_ceil(self.block_batches) > self.window_blocks
    }

    /// Largest resident-plus-in-flight footprint seen so far.
    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn total_stall(&self) -> f64 {
        self.delay
    }

    fn block_bytes(&self, block: usize) -> u64 {
        let first = block * self.block_batches;
        let batches = self.block_batches.min(self.total_batches - first);
        batches as u64 * self.batch_bytes
    }

    fn resident_bytes(&self) -> u64 {
        self.resident.iter().map(|&(b, _)| self.block_bytes(b)).sum()
    }

    fn note_peak(&mut self) {
        let bytes = self.resident_bytes();
        debug_assert!(bytes <= self.capacity);
        self.peak_bytes = self.peak_bytes.max(bytes);
    }

    /// Consumes batch `batch`, which the trainer wants at `demand` seconds
    /// into the epoch (before accounting for earlier stalls).
    pub fn advance(&mut self, batch: usize, demand: f64) -> Result<WindowStep> {
        if batch >= self.total_batches {
            return Err(Error::domain(format!(
                "batch {batch} outside epoch of {} batches",
                self.total_batches
            )));
        }
        let now = demand + self.delay;
        let block = batch / self.block_batches;
        let mut step = WindowStep::default();
        while let Some(&(front, _)) = self.resident.front() {
            if front >= block {
                break;
            }
            self.resident.pop_front();
            step.actions.push(TierAction::Evict {
                block: front,
                bytes: self.block_bytes(front),
            });
        }
        let total_blocks = self.total_batches.div_ceil(self.block_batches);
        while self.resident.len() < self.window_blocks && self.next_fetch < total_blocks {
            let b = self.next_fetch;
            let bytes = self.block_bytes(b);
            let start = self.disk_free.max(now);
            let end = start + bytes as f64 / self.disk_bandwidth;
            self.disk_free = end;
            self.resident.push_back((b, end));
            self.next_fetch += 1;
            step.actions.push(TierAction::Prefetch {
                block: b,
                start,
                end,
                bytes,
            });
        }
        self.note_peak();
        let ready = self
            .resident
            .iter()
            .find(|&&(b, _)| b == block)
            .map(|&(_, t)| t)
            .ok_or_else(|| Error::domain(format!("block {block} was never fetched")))?;
        step.stall = (ready - now).max(0.0);
        self.delay += step.stall;
        Ok(step)
    }
}
