//! Elastic data parallelism: active-rank membership, the transition message
//! protocol and per-node dataset sharding.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autopipe::PartitionPlan;
use crate::error::{Error, Result};
use crate::model::{ClusterSpec, SublayerKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankInfo {
    pub rank: usize,
    pub node: usize,
    pub local: usize,
}

/// Cluster-wide process layout. Rank `r` lives on node `r / I` at local
/// index `r % I`; with pipeline length `K` the ranks whose local index is a
/// multiple of `K` drive one pipeline each over GPUs `[local, local + K)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Topology {
    cluster: ClusterSpec,
    pipeline_length: usize,
    active: BTreeSet<usize>,
    training_group: Vec<usize>,
    generation: u64,
}

impl Topology {
    pub fn new(cluster: ClusterSpec, pipeline_length: usize) -> Result<Self> {
        check_length(&cluster, pipeline_length)?;
        let active: BTreeSet<usize> = (0..cluster.total_gpus())
            .filter(|r| (r % cluster.gpus_per_node).is_multiple_of(pipeline_length))
            .collect();
        let training_group = active.iter().copied().collect();
        Ok(Topology {
            cluster,
            pipeline_length,
            active,
            training_group,
            generation: 0,
        })
    }

    pub fn cluster(&self) -> &ClusterSpec {
        &self.cluster
    }

    pub fn pipeline_length(&self) -> usize {
        self.pipeline_length
    }

    /// Data-parallel width `R`.
    pub fn replicas(&self) -> usize {
        self.active.len()
    }

    pub fn active_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.iter().copied()
    }

    pub fn is_active(&self, rank: usize) -> bool {
        self.active.contains(&rank)
    }

    /// Every rank; control traffic flows over this group.
    pub fn message_group(&self) -> Range<usize> {
        0..self.cluster.total_gpus()
    }

    /// Active ranks that synchronize gradients, rebuilt on every transition.
    pub fn training_group(&self) -> &[usize] {
        &self.training_group
    }

    /// Number of times the training group has been rebuilt.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn rank_info(&self, rank: usize) -> RankInfo {
        let i = self.cluster.gpus_per_node;
        RankInfo {
            rank,
            node: rank / i,
            local: rank % i,
        }
    }

    /// Local GPUs used by the pipeline of an active rank.
    pub fn gpu_span(&self, rank: usize) -> Option<Range<usize>> {
        self.is_active(rank).then(|| {
            let local = self.rank_info(rank).local;
            local..local + self.pipeline_length
        })
    }

    pub fn active_per_node(&self) -> usize {
        self.cluster.gpus_per_node / self.pipeline_length
    }

    pub fn node_active_ranks(&self, node: usize) -> Vec<usize> {
        self.active
            .iter()
            .copied()
            .filter(|&r| self.rank_info(r).node == node)
            .collect()
    }

    /// True when the training group crosses a machine boundary.
    pub fn spans_nodes(&self) -> bool {
        let mut nodes = self.active.iter().map(|&r| self.rank_info(r).node);
        match nodes.next() {
            Some(first) => nodes.any(|n| n != first),
            None => false,
        }
    }

    /// Bottleneck bandwidth of the gradient ring.
    pub fn allreduce_bandwidth(&self) -> f64 {
        if self.spans_nodes() {
            self.cluster.inter_node_bandwidth
        } else {
            self.cluster.intra_node_bandwidth
        }
    }

    /// Checks the layout invariants: membership rule, `R = N·I/K` and that
    /// the active spans tile every node's GPUs exactly once.
    pub fn validate(&self) -> Result<()> {
        let c = &self.cluster;
        let k = self.pipeline_length;
        if self.replicas() != c.nodes * c.gpus_per_node / k {
            return Err(Error::domain("replica count does not match N·I/K"));
        }
        for r in 0..c.total_gpus() {
            if self.is_active(r) != self.rank_info(r).local.is_multiple_of(k) {
                return Err(Error::domain(format!("rank {r} has the wrong membership")));
            }
        }
        for node in 0..c.nodes {
            let mut covered = vec![0u32; c.gpus_per_node];
            for r in self.node_active_ranks(node) {
                for g in self.gpu_span(r).expect("active rank has a span") {
                    covered[g] += 1;
                }
            }
            if covered.iter().any(|&n| n != 1) {
                return Err(Error::domain(format!("GPU spans on node {node} do not tile")));
            }
        }
        if self.training_group != self.active.iter().copied().collect::<Vec<_>>() {
            return Err(Error::domain("training group differs from the active set"));
        }
        Ok(())
    }
}

fn check_length(cluster: &ClusterSpec, k: usize) -> Result<()> {
    if k == 0 || !k.is_power_of_two() || !cluster.gpus_per_node.is_multiple_of(k) {
        return Err(Error::domain(format!(
            "pipeline length {k} must be a power of two dividing {} GPUs per node",
            cluster.gpus_per_node
        )));
    }
    Ok(())
}

/// State handed from an active rank to a rank it activates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionMessage {
    pub from_rank: usize,
    pub to_rank: usize,
    pub epoch: usize,
    pub lr_step: u64,
    pub frozen_layers: usize,
    pub pipeline_length: usize,
    pub gpu_span: Range<usize>,
    pub weights_version: u64,
}

/// Training progress shipped with every transition message.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransitionContext {
    pub epoch: usize,
    pub lr_step: u64,
    pub frozen_layers: usize,
    pub weights_version: u64,
}

/// Shrinks pipelines to `new_k` and widens data parallelism. Each old
/// active rank `r` activates `r + j·new_k` for `j = 1 .. old_k/new_k`.
pub fn transition(
    topology: &Topology,
    new_k: usize,
    ctx: TransitionContext,
) -> Result<(Topology, Vec<TransitionMessage>)> {
    let old_k = topology.pipeline_length;
    if new_k > old_k {
        return Err(Error::Unsupported(format!(
            "pipeline length cannot grow from {old_k} to {new_k}"
        )));
    }
    check_length(&topology.cluster, new_k)?;
    if new_k == old_k {
        return Ok((topology.clone(), Vec::new()));
    }
    let mut next = Topology::new(topology.cluster.clone(), new_k)?;
    next.generation = topology.generation + 1;
    let mut messages = Vec::new();
    for &r in &topology.active {
        for j in 1..old_k / new_k {
            let to = r + j * new_k;
            messages.push(TransitionMessage {
                from_rank: r,
                to_rank: to,
                epoch: ctx.epoch,
                lr_step: ctx.lr_step,
                frozen_layers: ctx.frozen_layers,
                pipeline_length: new_k,
                gpu_span: next.gpu_span(to).expect("activated rank is active"),
                weights_version: ctx.weights_version,
            });
        }
    }
    Ok((next, messages))
}

/// One line of the transition log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionLog {
    pub epoch: usize,
    #[serde(rename = "old_K")]
    pub old_k: usize,
    #[serde(rename = "new_K")]
    pub new_k: usize,
    pub activated_ranks: Vec<usize>,
    pub messages: Vec<TransitionMessage>,
}

impl TransitionLog {
    pub fn new(epoch: usize, old_k: usize, new_k: usize, messages: Vec<TransitionMessage>) -> Self {
        TransitionLog {
            epoch,
            old_k,
            new_k,
            activated_ranks: messages.iter().map(|m| m.to_rank).collect(),
            messages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shard {
    pub rank: usize,
    pub node: usize,
    pub samples: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShardAssignment {
    pub epoch: usize,
    pub seed: u64,
    pub shards: Vec<Shard>,
}

impl ShardAssignment {
    pub fn shard(&self, rank: usize) -> Option<&Shard> {
        self.shards.iter().find(|s| s.rank == rank)
    }
}

/// Samples `{i : i mod N = node}`, fixed for the whole run.
pub fn node_subset_len(dataset_size: u64, nodes: usize, node: usize) -> u64 {
    let n = nodes as u64;
    dataset_size / n + u64::from((node as u64) < dataset_size % n)
}

fn check_dataset(dataset_size: u64, topology: &Topology) -> Result<()> {
    if dataset_size < topology.replicas() as u64 {
        return Err(Error::domain(format!(
            "dataset of {dataset_size} samples cannot feed {} replicas",
            topology.replicas()
        )));
    }
    Ok(())
}

/// Shard sizes per active rank, without materializing sample indices.
pub fn shard_sizes(dataset_size: u64, topology: &Topology) -> Result<Vec<(usize, u64)>> {
    check_dataset(dataset_size, topology)?;
    let nodes = topology.cluster.nodes;
    let mut out = Vec::with_capacity(topology.replicas());
    for node in 0..nodes {
        let ranks = topology.node_active_ranks(node);
        let len = node_subset_len(dataset_size, nodes, node);
        let a = ranks.len() as u64;
        for (i, r) in ranks.into_iter().enumerate() {
            out.push((r, len / a + u64::from((i as u64) < len % a)));
        }
    }
    Ok(out)
}

/// Shuffles each node's fixed subset with a stream keyed by
/// `(seed, epoch, node)` and splits it contiguously among the node's active
/// ranks, the first `len mod a` shards taking one extra sample.
pub fn redistribute(
    dataset_size: u64,
    topology: &Topology,
    epoch: usize,
    seed: u64,
) -> Result<ShardAssignment> {
    check_dataset(dataset_size, topology)?;
    let nodes = topology.cluster.nodes;
    let mut shards = Vec::with_capacity(topology.replicas());
    for node in 0..nodes {
        let mut subset: Vec<u64> = (node as u64..dataset_size).step_by(nodes).collect();
        let mut stream = rng::stream(seed, &[epoch as u64, node as u64]);
        subset.shuffle(&mut stream);
        let ranks = topology.node_active_ranks(node);
        let a = ranks.len();
        let (base, extra) = (subset.len() / a, subset.len() % a);
        let mut start = 0;
        for (i, rank) in ranks.into_iter().enumerate() {
            let len = base + usize::from(i < extra);
            shards.push(Shard {
                rank,
                node,
                samples: subset[start..start + len].to_vec(),
            });
            start += len;
        }
    }
    Ok(ShardAssignment {
        epoch,
        seed,
        shards,
    })
}

/// Parameters that take part in gradient synchronization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncSet {
    pub sublayers: Vec<(usize, SublayerKind)>,
    pub params: u64,
}

impl SyncSet {
    pub fn bytes(&self, bytes_per_param: u64) -> u64 {
        self.params * bytes_per_param
    }
}

/// The active sublayers of a plan; the frozen block is never synchronized.
pub fn ddp_skip_set(plan: &PartitionPlan) -> SyncSet {
    SyncSet {
        sublayers: plan.sublayers().iter().map(|s| (s.layer, s.kind)).collect(),
        params: plan.active_params(),
    }
}
