use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-operation time constants. Bandwidths live in [`ClusterSpec`] and the
/// cache tiers in [`CacheConfig`].
///
/// [`ClusterSpec`]: crate::model::ClusterSpec
/// [`CacheConfig`]: crate::autocache::CacheConfig
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// `c_fwd`: forward seconds per parameter per sample.
    pub forward_cost: f64,
    /// `β`: backward time as a multiple of forward time.
    pub backward_ratio: f64,
    /// Cost of a gradient-free forward through frozen layers relative to a
    /// training forward. With `β = 2`, a ratio of 0.5 makes a frozen layer
    /// cost 1/6 of an active one.
    pub frozen_forward_ratio: f64,
    /// `c_upd`: optimizer seconds per active parameter.
    pub update_cost: f64,
    /// Fixed launch cost added to every forward and backward block.
    pub microbatch_overhead_s: f64,
    /// Latency added to every point-to-point activation or gradient transfer.
    pub link_latency_s: f64,
    /// Latency added to every AllReduce bucket.
    pub allreduce_latency_s: f64,
    /// Gradient bucket capacity.
    pub bucket_bytes: u64,
    /// Compute multiplier applied when layers are frozen but the pipeline is
    /// not rebuilt around them (allocator churn).
    pub freeze_only_slowdown: f64,
}

/// One transformer layer of 12M parameters takes about 35 ms forward at a
/// pipeline batch of 300 samples.
pub const REFERENCE_FORWARD_COST: f64 = 0.035 / (12.0e6 * 300.0);

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            forward_cost: REFERENCE_FORWARD_COST,
            backward_ratio: 2.0,
            frozen_forward_ratio: 0.5,
            update_cost: 4.0e-11,
            microbatch_overhead_s: 1.0e-3,
            link_latency_s: 0.0,
            allreduce_latency_s: 0.0,
            bucket_bytes: 25_000_000,
            freeze_only_slowdown: 1.05,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cost.forward_cost", self.forward_cost),
            ("cost.backward_ratio", self.backward_ratio),
            ("cost.frozen_forward_ratio", self.frozen_forward_ratio),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        let non_negative = [
            ("cost.update_cost", self.update_cost),
            ("cost.microbatch_overhead_s", self.microbatch_overhead_s),
            ("cost.link_latency_s", self.link_latency_s),
            ("cost.allreduce_latency_s", self.allreduce_latency_s),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be a non-negative finite number"));
            }
        }
        if self.bucket_bytes == 0 {
            return Err(Error::config("cost.bucket_bytes", "must be positive"));
        }
        if !(self.freeze_only_slowdown.is_finite() && self.freeze_only_slowdown >= 1.0) {
            return Err(Error::config("cost.freeze_only_slowdown", "must be at least 1"));
        }
        Ok(())
    }

    /// Forward seconds for `params` parameters over `samples` samples, without
    /// the per-block overhead.
    pub fn forward_time(&self, params: u64, samples: f64) -> f64 {
        self.forward_cost * params as f64 * samples
    }

    /// Gradient-free forward seconds through frozen parameters.
    pub fn frozen_forward_time(&self, params: u64, samples: f64) -> f64 {
        self.frozen_forward_ratio * self.forward_time(params, samples)
    }
}

/// `bytes / bandwidth + latency`.
pub fn transfer_time(bytes: f64, bandwidth: f64, latency: f64) -> f64 {
    bytes / bandwidth + latency
}

/// Ring AllReduce over `replicas` members: `2(R−1)/R · bytes / bandwidth`.
pub fn ring_allreduce_time(bytes: f64, replicas: usize, bandwidth: f64, latency: f64) -> f64 {
    if replicas <= 1 {
        return 0.0;
    }
    let r = replicas as f64;
    2.0 * (r - 1.0) / r * bytes / bandwidth + latency
}

/// Fixed cost of rebuilding pipelines when the length changes `from → to`.
/// `from = 0` denotes initial construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionOverhead {
    pub from: usize,
    pub to: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionOverheads {
    pub table: Vec<TransitionOverhead>,
    /// Charged for any transition missing from the table.
    pub fallback_s: f64,
}

impl Default for TransitionOverheads {
    fn default() -> Self {
        let entry = |from, to, seconds| TransitionOverhead { from, to, seconds };
        TransitionOverheads {
            table: vec![
                entry(0, 8, 18.2),
                entry(8, 4, 10.2),
                entry(4, 2, 5.5),
                entry(2, 1, 9.5),
            ],
            fallback_s: 0.0,
        }
    }
}

impl TransitionOverheads {
    pub fn zero() -> Self {
        TransitionOverheads {
            table: Vec::new(),
            fallback_s: 0.0,
        }
    }

    pub fn lookup(&self, from: usize, to: usize) -> f64 {
        self.table
            .iter()
            .find(|e| e.from == from && e.to == to)
            .map_or(self.fallback_s, |e| e.seconds)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.fallback_s) {
            return Err(Error::config(
                "transition_overheads.fallback_s",
                "must be a non-negative finite number",
            ));
        }
        for (i, e) in self.table.iter().enumerate() {
            if !ok(e.seconds) {
                return Err(Error::config(
                    format!("transition_overheads.table[{i}].seconds"),
                    "must be a non-negative finite number",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip_connection_copy_takes_about_40ms() {
        let bytes = 1024.0 * 512.0 * 300.0 * 4.0;
        let t = transfer_time(bytes, 15.754e9, 0.0);
        assert!((0.038..=0.042).contains(&t), "{t}");
        assert_eq!(transfer_time(0.0, 1.0, 0.25), 0.25);
    }

    #[test]
    fn reference_layer_forward_is_35ms() {
        let t = CostModel::default().forward_time(12_000_000, 300.0);
        assert!((t - 0.035).abs() < 1e-12);
    }

    #[test]
    fn ring_allreduce_closed_form() {
        assert_eq!(ring_allreduce_time(1e9, 1, 1e9, 0.5), 0.0);
        assert!((ring_allreduce_time(1e9, 2, 1e9, 0.0) - 1.0).abs() < 1e-12);
        assert!((ring_allreduce_time(1e9, 4, 1e9, 0.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn overhead_lookup_falls_back() {
        let t = TransitionOverheads::default();
        assert_eq!(t.lookup(8, 4), 10.2);
        assert_eq!(t.lookup(8, 2), 0.0);
    }
}
