//! Elastic pipelining: frozen-aware greedy partitioning, pipeline compression
//! and micro-batch count search.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::{schedule_iteration, IterationSetup};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{Sublayer, SublayerSeq};

/// How much a partition may overshoot its target mean before it stops growing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum BalanceCriterion {
    /// `mean + stddev(remaining sizes) / partitions_left`.
    #[default]
    MeanPlusStddev,
    /// `mean + var(remaining sizes) / partitions_left`, with sizes measured in
    /// `unit_params` parameters. `unit_params = 1` is the literal formula.
    MeanPlusVariance {
        #[serde(default = "one")]
        unit_params: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl BalanceCriterion {
    fn slack(&self, remaining: &[u64], parts_left: usize) -> f64 {
        if remaining.is_empty() {
            return 0.0;
        }
        match *self {
            BalanceCriterion::MeanPlusStddev => {
                population_variance(remaining, 1.0).sqrt() / parts_left as f64
            }
            BalanceCriterion::MeanPlusVariance { unit_params } => {
                population_variance(remaining, unit_params) * unit_params / parts_left as f64
            }
        }
    }
}

fn population_variance(xs: &[u64], unit: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64 / unit).sum::<f64>() / n;
    xs.iter()
        .map(|&x| {
            let d = x as f64 / unit - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Contiguous assignment of active sublayers to `K` pipeline stages. The
/// frozen block lives on stage 0 and is charged there at `λ · S_frozen`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    spans: Vec<Range<usize>>,
    sublayers: Vec<Sublayer>,
    frozen_layers: usize,
    frozen_params: u64,
    lambda_frozen: f64,
}

impl PartitionPlan {
    /// Builds a plan from explicit spans, checking they tile the sequence.
    pub fn from_spans(seq: &SublayerSeq, spans: Vec<Range<usize>>, lambda_frozen: f64) -> Result<Self> {
        let mut next = 0;
        for s in &spans {
            if s.start != next || s.end < s.start {
                return Err(Error::domain("spans must be contiguous and ordered"));
            }
            next = s.end;
        }
        if next != seq.len() || spans.is_empty() {
            return Err(Error::domain("spans must cover the active sequence"));
        }
        Ok(PartitionPlan {
            spans,
            sublayers: seq.sublayers().to_vec(),
            frozen_layers: seq.frozen_layers(),
            frozen_params: seq.frozen_params(),
            lambda_frozen,
        })
    }

    /// Pipeline length `K`.
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn sublayers(&self) -> &[Sublayer] {
        &self.sublayers
    }

    pub fn stage_sublayers(&self, stage: usize) -> &[Sublayer] {
        &self.sublayers[self.spans[stage].clone()]
    }

    pub fn frozen_layers(&self) -> usize {
        self.frozen_layers
    }

    pub fn frozen_params(&self) -> u64 {
        self.frozen_params
    }

    pub fn lambda_frozen(&self) -> f64 {
        self.lambda_frozen
    }

    /// `B_L`: sublayers per stage.
    pub fn sublayer_counts(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.len()).collect()
    }

    /// `B_S`: raw active parameters per stage.
    pub fn raw_sizes(&self) -> Vec<u64> {
        (0..self.len())
            .map(|k| self.stage_sublayers(k).iter().map(|s| s.params).sum())
            .collect()
    }

    /// Stage sizes with `λ · S_frozen` added to stage 0.
    pub fn effective_sizes(&self) -> Vec<f64> {
        let mut sizes: Vec<f64> = self.raw_sizes().into_iter().map(|s| s as f64).collect();
        sizes[0] += self.frozen_discounted();
        sizes
    }

    pub fn frozen_discounted(&self) -> f64 {
        self.lambda_frozen * self.frozen_params as f64
    }

    /// Memory proxy `M_GPU`: largest effective stage size.
    pub fn max_effective(&self) -> f64 {
        self.effective_sizes().into_iter().fold(0.0, f64::max)
    }

    pub fn active_params(&self) -> u64 {
        self.sublayers.iter().map(|s| s.params).sum()
    }

    /// Global sublayer index (into the full `2L` sequence) where stage `k` ends.
    pub fn stage_end_boundary(&self, stage: usize) -> usize {
        2 * self.frozen_layers + self.spans[stage].end
    }
}

/// Greedy left-to-right balancing.
///
/// Stage `k` targets `mean = remaining_effective / (K − k)` and keeps taking
/// sublayers while its effective size stays within `mean + slack`. Every
/// stage takes at least one sublayer and leaves at least one for each later
/// stage; the last stage takes whatever is left.
pub fn load_balance(
    seq: &SublayerSeq,
    partitions: usize,
    lambda_frozen: f64,
    criterion: BalanceCriterion,
) -> Result<PartitionPlan> {
    let n = seq.len();
    if partitions == 0 {
        return Err(Error::domain("pipeline length must be at least 1"));
    }
    if partitions > n.max(1) {
        return Err(Error::Infeasible {
            partitions,
            sublayers: n,
        });
    }
    let sizes = seq.sizes();
    let frozen = lambda_frozen * seq.frozen_params() as f64;
    let mut remaining = seq.active_params() as f64 + frozen;
    let mut spans = Vec::with_capacity(partitions);
    let mut start = 0;
    for k in 0..partitions {
        let parts_left = partitions - k;
        let end = if parts_left == 1 {
            n
        } else {
            let threshold = remaining / parts_left as f64 + criterion.slack(&sizes[start..], parts_left);
            let last_allowed = n - (parts_left - 1);
            let mut size = if k == 0 { frozen } else { 0.0 };
            let mut end = start;
            while end < last_allowed {
                let grown = size + sizes[end] as f64;
                if end > start && grown > threshold {
                    break;
                }
                size = grown;
                end += 1;
            }
            end
        };
        let taken: u64 = sizes[start..end].iter().sum();
        remaining -= taken as f64 + if k == 0 { frozen } else { 0.0 };
        spans.push(start..end);
        start = end;
    }
    PartitionPlan::from_spans(seq, spans, lambda_frozen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionStep {
    pub from: usize,
    pub to: usize,
    /// The longer pipeline had more stages than active sublayers, so halving
    /// was required regardless of the memory criterion.
    pub forced: bool,
    /// `M_GPU^(T)` of the accepted plan.
    pub max_effective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compression {
    pub pipeline_length: usize,
    pub plan: PartitionPlan,
    pub steps: Vec<CompressionStep>,
}

/// Halves the pipeline while the halved plan's largest effective stage fits
/// within the `T = 0` memory proxy `max_effective_0`.
pub fn try_compress(
    seq: &SublayerSeq,
    current: usize,
    lambda_frozen: f64,
    max_effective_0: f64,
    criterion: BalanceCriterion,
) -> Result<Compression> {
    if current == 0 || !current.is_power_of_two() {
        return Err(Error::domain(format!(
            "pipeline length {current} is not a power of two"
        )));
    }
    let mut k = current;
    let mut steps = Vec::new();
    while k > seq.len().max(1) {
        let plan = load_balance(seq, k / 2, lambda_frozen, criterion);
        steps.push(CompressionStep {
            from: k,
            to: k / 2,
            forced: true,
            max_effective: plan.map(|p| p.max_effective()).unwrap_or(f64::NAN),
        });
        k /= 2;
    }
    let mut plan = load_balance(seq, k, lambda_frozen, criterion)?;
    while k >= 2 {
        let halved = load_balance(seq, k / 2, lambda_frozen, criterion)?;
        let mem = halved.max_effective();
        if mem > max_effective_0 {
            break;
        }
        steps.push(CompressionStep {
            from: k,
            to: k / 2,
            forced: false,
            max_effective: mem,
        });
        k /= 2;
        plan = halved;
    }
    Ok(Compression {
        pipeline_length: k,
        plan,
        steps,
    })
}

/// Modeled iteration time for each candidate micro-batch count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkProfile {
    pub pipeline_length: usize,
    pub candidates: Vec<(usize, f64)>,
    pub chosen: usize,
    pub chosen_time: f64,
}

impl ChunkProfile {
    pub fn time_for(&self, m: usize) -> Option<f64> {
        self.candidates.iter().find(|(c, _)| *c == m).map(|&(_, t)| t)
    }
}

/// Candidate micro-batch counts `K ..= 6K`.
pub fn chunk_candidates(pipeline_length: usize) -> Vec<usize> {
    (pipeline_length..=6 * pipeline_length).collect()
}

/// Profiles every `M` in `K ..= 6K` and picks the fastest (ties to smaller `M`).
pub fn optimal_chunks(setup: &IterationSetup, exec: Execution) -> Result<ChunkProfile> {
    let k = setup.stages.len();
    let mut candidates = chunk_candidates(k);
    if setup.integer_microbatches {
        candidates.retain(|&m| m as u64 <= setup.batch_size);
        if candidates.is_empty() {
            candidates.push(setup.batch_size.max(1) as usize);
        }
    }
    let times = exec::try_map(exec, &candidates, |&m| {
        schedule_iteration(setup, m).map(|s| (m, s.makespan))
    })?;
    let (chosen, chosen_time) = times
        .iter()
        .copied()
        .fold(None, |best: Option<(usize, f64)>, (m, t)| match best {
            Some((_, bt)) if t >= bt => best,
            _ => Some((m, t)),
        })
        .expect("candidate set is never empty");
    Ok(ChunkProfile {
        pipeline_length: k,
        candidates: times,
        chosen,
        chosen_time,
    })
}
