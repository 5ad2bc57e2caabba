//! Property tests over randomized inputs.

mod common;

use proptest::prelude::*;

use eps_core::autocache::{enable_threshold, CacheConfig, CacheMode};
use eps_core::autodp::{redistribute, shard_sizes, transition, Topology, TransitionContext};
use eps_core::autopipe::{load_balance, BalanceCriterion};
use eps_core::config::{GradNormConfig, ProfileName, ScenarioConfig};
use eps_core::engine::{
    elastic_stages, schedule_iteration, static_stages, BlockKind, CostModel, Features, FrozenInput,
    IterationSchedule, IterationSetup, StageLoad,
};
use eps_core::freeze::{next_frozen_count, FreezeState, GradNormVector};
use eps_core::model::{
    m_partition, ActivationProfile, ClusterSpec, LayerProfile, ModelSpec, SublayerSeq,
};

fn model_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        prop::collection::vec((1u64..50, 1u64..50), 1..=12),
        1u64..4096,
    )
        .prop_map(|(layers, act)| {
            let layers = layers
                .into_iter()
                .map(|(a, m)| LayerProfile {
                    attention_params: a * 100_000,
                    mlp_params: m * 100_000,
                })
                .collect();
            ModelSpec::new("random", layers, ActivationProfile::Uniform(act * 1024), 4).unwrap()
        })
}

fn largest_pow2_at_most(n: usize) -> usize {
    1 << n.max(1).ilog2()
}

fn setup_for(stages: Vec<StageLoad>, batch: u64, replicas: usize, overhead: f64) -> IterationSetup {
    IterationSetup {
        stages,
        batch_size: batch,
        integer_microbatches: false,
        cost: CostModel {
            microbatch_overhead_s: overhead,
            link_latency_s: 1e-4,
            allreduce_latency_s: 1e-4,
            ..CostModel::default()
        },
        compute_scale: 1.0,
        link_bandwidth: 15.754e9,
        replicas,
        allreduce_bandwidth: 5e9,
        cache_read_bandwidth: 6e9,
        cache_write_bandwidth: 6e9,
        cache_read_latency_s: 1e-5,
    }
}

fn find(s: &IterationSchedule, device: usize, kind: BlockKind, index: usize) -> Option<(f64, f64)> {
    s.blocks
        .iter()
        .find(|b| b.device == device && b.kind == kind && b.index == index)
        .map(|b| (b.start, b.end))
}

const EPS: f64 = 1e-12;

fn check_legal(s: &IterationSchedule) -> Result<(), TestCaseError> {
    let k = s.pipeline_length();
    let m = s.micro_batches;
    for b in 0..m {
        for d in 0..k {
            let (fs, fe) = find(s, d, BlockKind::Forward, b).expect("forward block");
            let (bs, _) = find(s, d, BlockKind::Backward, b).expect("backward block");
            if d > 0 {
                let (_, xe) = find(s, d - 1, BlockKind::Transfer, b).expect("activation transfer");
                prop_assert!(fs + EPS >= xe, "F[{d},{b}] starts before its input arrives");
            } else if let Some((_, ce)) = find(s, 0, BlockKind::CacheRead, b) {
                prop_assert!(fs + EPS >= ce, "F[0,{b}] starts before its cache read");
            }
            if d + 1 < k {
                let (_, ge) = find(s, d + 1, BlockKind::GradTransfer, b).expect("gradient transfer");
                prop_assert!(bs + EPS >= ge, "B[{d},{b}] starts before its gradient arrives");
            } else {
                prop_assert!(bs + EPS >= fe, "B[{d},{b}] starts before its forward ends");
            }
        }
    }
    for d in 0..k {
        let mut compute: Vec<(f64, f64)> = s
            .blocks
            .iter()
            .filter(|x| x.device == d && x.kind.occupies_device())
            .map(|x| (x.start, x.end))
            .collect();
        compute.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in compute.windows(2) {
            prop_assert!(w[1].0 + EPS >= w[0].1, "compute blocks overlap on device {d}");
        }
        let last_forward = s.blocks_of(d, BlockKind::Forward).map(|x| x.end).fold(0.0, f64::max);
        let first_backward = s.blocks_of(d, BlockKind::Backward).map(|x| x.start).fold(f64::INFINITY, f64::min);
        prop_assert!(first_backward + EPS >= last_forward, "device {d} starts backward before its forwards end");

        let ars: Vec<_> = s.blocks_of(d, BlockKind::AllReduce).collect();
        for w in ars.windows(2) {
            prop_assert!(w[1].index == w[0].index + 1 && w[1].start + EPS >= w[0].end);
        }
        let (us, ue) = find(s, d, BlockKind::Update, 0).expect("update block");
        let last_b = s.blocks_of(d, BlockKind::Backward).map(|x| x.end).fold(0.0, f64::max);
        let last_ar = ars.iter().map(|x| x.end).fold(0.0, f64::max);
        prop_assert!(us + EPS >= last_b && us + EPS >= last_ar, "U[{d}] starts too early");
        prop_assert!(ue <= s.makespan + EPS);
    }
    for (d, &idle) in s.bubble.iter().enumerate() {
        prop_assert!(idle >= -EPS && (idle + s.busy[d] - s.makespan).abs() < 1e-9);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partitions_cover_and_discount(
        sizes in prop::collection::vec(1u64..1_000_000, 1..40),
        k_exp in 0u32..4,
        lambda in 0.01f64..=1.0,
        frozen_params in 0u64..50_000_000,
        variance in any::<bool>(),
    ) {
        let k = (1usize << k_exp).min(largest_pow2_at_most(sizes.len()));
        let seq = SublayerSeq::from_sizes(3, frozen_params, &sizes);
        let criterion = if variance {
            BalanceCriterion::MeanPlusVariance { unit_params: 1.0 }
        } else {
            BalanceCriterion::MeanPlusStddev
        };
        let plan = load_balance(&seq, k, lambda, criterion).unwrap();
        prop_assert_eq!(plan.len(), k);
        prop_assert_eq!(plan.sublayer_counts().iter().sum::<usize>(), sizes.len());
        prop_assert!(plan.sublayer_counts().iter().all(|&c| c >= 1));
        prop_assert_eq!(plan.raw_sizes().iter().sum::<u64>(), sizes.iter().sum::<u64>());
        let eff = plan.effective_sizes();
        let expected0 = plan.raw_sizes()[0] as f64 + lambda * frozen_params as f64;
        prop_assert!((eff[0] - expected0).abs() <= 1e-9 * expected0.max(1.0));
    }

    #[test]
    fn schedules_are_legal(
        model in model_strategy(),
        frozen_frac in 0.0f64..1.0,
        k_exp in 0u32..4,
        m in 1usize..=48,
        replicas in 1usize..=8,
        batch in 1u64..512,
        read in prop::option::of(0.0f64..1.0),
        overhead in 0.0f64..1e-3,
        elastic in any::<bool>(),
    ) {
        let layers = model.layer_count();
        let frozen = ((layers as f64) * frozen_frac) as usize;
        let stages = if elastic {
            let seq = m_partition(&model, frozen).unwrap();
            let k = (1usize << k_exp).min(largest_pow2_at_most(seq.len()));
            let plan = load_balance(&seq, k, 1.0 / 6.0, BalanceCriterion::default()).unwrap();
            let input = FrozenInput {
                read_layer: read.map(|r| ((frozen as f64) * r) as usize),
                write_layer: read.map(|_| frozen),
            };
            elastic_stages(&plan, &model, input, 25_000_000)
        } else {
            let seq = m_partition(&model, 0).unwrap();
            let k = (1usize << k_exp).min(largest_pow2_at_most(seq.len()));
            let plan = load_balance(&seq, k, 1.0 / 6.0, BalanceCriterion::default()).unwrap();
            static_stages(&plan, &model, frozen, 25_000_000)
        };
        let setup = setup_for(stages, batch, replicas, overhead);
        let s = schedule_iteration(&setup, m).unwrap();
        check_legal(&s)?;
        if replicas == 1 {
            prop_assert_eq!(s.blocks.iter().filter(|b| b.kind == BlockKind::AllReduce).count(), 0);
        }
    }

    #[test]
    fn compute_work_is_conserved(
        model in model_strategy(),
        k_exp in 0u32..4,
        m1 in 1usize..=48,
        m2 in 1usize..=48,
    ) {
        let seq = m_partition(&model, 0).unwrap();
        let total = |k: usize, m: usize| {
            let plan = load_balance(&seq, k, 1.0 / 6.0, BalanceCriterion::default()).unwrap();
            let stages = static_stages(&plan, &model, 0, 25_000_000);
            let s = schedule_iteration(&setup_for(stages, 256, 1, 0.0), m).unwrap();
            s.busy.iter().sum::<f64>()
        };
        let k = (1usize << k_exp).min(largest_pow2_at_most(seq.len()));
        let a = total(k, m1);
        let b = total(k, m2);
        let c = total(1, m1);
        prop_assert!((a - b).abs() <= 1e-9 * a);
        prop_assert!((a - c).abs() <= 1e-9 * a);
    }

    #[test]
    fn freezing_is_monotone_and_alpha_dominant(
        layers in 2usize..30,
        a1 in 0.05f64..0.95,
        a2 in 0.05f64..0.95,
        norms in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 30), 1..15),
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let mut s_lo = FreezeState::new(lo).unwrap();
        let mut s_hi = FreezeState::new(hi).unwrap();
        let mut prev = (0, 0);
        for (i, row) in norms.iter().enumerate() {
            let g = GradNormVector::new(i + 1, row[..layers].to_vec()).unwrap();
            let f_lo = next_frozen_count(&mut s_lo, &g, layers).unwrap();
            let f_hi = next_frozen_count(&mut s_hi, &g, layers).unwrap();
            prop_assert!(f_lo >= prev.0 && f_hi >= prev.1, "frozen count decreased");
            prop_assert!(f_lo <= layers && f_hi <= layers);
            prev = (f_lo, f_hi);
        }
        // Dominance holds when the norms never bind: strictly decreasing norms.
        let mut s_lo = FreezeState::new(lo).unwrap();
        let mut s_hi = FreezeState::new(hi).unwrap();
        for t in 1..=norms.len() {
            let g = GradNormVector::new(t, (0..layers).map(|l| (layers - l) as f64).collect()).unwrap();
            let f_lo = next_frozen_count(&mut s_lo, &g, layers).unwrap();
            let f_hi = next_frozen_count(&mut s_hi, &g, layers).unwrap();
            prop_assert!(f_hi >= f_lo);
        }
    }

    #[test]
    fn topology_invariants_hold_through_shrinking(
        nodes in 1usize..=4,
        gpus_exp in 0u32..=4,
        steps in 0usize..=4,
    ) {
        let gpus = 1usize << gpus_exp;
        let cluster = ClusterSpec {
            nodes,
            gpus_per_node: gpus,
            gpu_memory_bytes: 1 << 34,
            intra_node_bandwidth: 1e10,
            inter_node_bandwidth: 1e9,
        };
        let mut topo = Topology::new(cluster, gpus).unwrap();
        topo.validate().unwrap();
        for _ in 0..steps {
            let k = topo.pipeline_length();
            if k == 1 {
                prop_assert!(transition(&topo, 2, TransitionContext::default()).is_err());
                break;
            }
            let (next, messages) = transition(&topo, k / 2, TransitionContext::default()).unwrap();
            next.validate().unwrap();
            prop_assert_eq!(next.replicas(), 2 * topo.replicas());
            prop_assert_eq!(messages.len(), next.replicas() - topo.replicas());
            let mut targets: Vec<usize> = messages.iter().map(|m| m.to_rank).collect();
            targets.sort_unstable();
            targets.dedup();
            prop_assert_eq!(targets.len(), messages.len());
            for m in &messages {
                prop_assert!(topo.is_active(m.from_rank) && next.is_active(m.to_rank));
                prop_assert!(!topo.is_active(m.to_rank));
            }
            prop_assert!(next.generation() > topo.generation());
            topo = next;
        }
    }

    #[test]
    fn shards_partition_each_node(
        nodes in 1usize..=3,
        k_exp in 0u32..=3,
        dataset in 64u64..5000,
        epoch in 0usize..5,
        seed in any::<u64>(),
    ) {
        let cluster = ClusterSpec {
            nodes,
            gpus_per_node: 8,
            gpu_memory_bytes: 1 << 34,
            intra_node_bandwidth: 1e10,
            inter_node_bandwidth: 1e9,
        };
        let topo = Topology::new(cluster, 1 << k_exp).unwrap();
        let a = redistribute(dataset, &topo, epoch, seed).unwrap();
        prop_assert_eq!(&a, &redistribute(dataset, &topo, epoch, seed).unwrap());
        let sizes = shard_sizes(dataset, &topo).unwrap();
        let mut all: Vec<u64> = Vec::new();
        for shard in &a.shards {
            prop_assert!(shard.samples.iter().all(|&i| i % nodes as u64 == shard.node as u64));
            let expected = sizes.iter().find(|(r, _)| *r == shard.rank).unwrap().1;
            prop_assert_eq!(shard.samples.len() as u64, expected);
            all.extend(&shard.samples);
        }
        for node in 0..nodes {
            let lens: Vec<usize> = a.shards.iter().filter(|s| s.node == node).map(|s| s.samples.len()).collect();
            prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
        all.sort_unstable();
        prop_assert_eq!(all, (0..dataset).collect::<Vec<_>>());
    }

    #[test]
    fn faster_host_tier_never_raises_threshold(bw in 1e8f64..5e10) {
        let model = eps_core::model::preset("ViT-B/16").unwrap();
        let cost = CostModel::default();
        let slow = CacheConfig { host_bandwidth: bw, ..CacheConfig::default() };
        let fast = CacheConfig { host_bandwidth: 2.0 * bw, ..CacheConfig::default() };
        let t_slow = enable_threshold(&model, &cost, &slow, 50.0, 1000).unwrap_or(usize::MAX);
        let t_fast = enable_threshold(&model, &cost, &fast, 50.0, 1000).unwrap_or(usize::MAX);
        prop_assert!(t_fast <= t_slow);
    }

    #[test]
    fn config_round_trips(
        alpha in 0.01f64..0.99,
        batch in 1u64..1024,
        epochs in 1usize..20,
        seed in any::<u64>(),
        early in any::<bool>(),
        flags in (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
        mode in prop::sample::select(vec![CacheMode::Off, CacheMode::Auto, CacheMode::Forced]),
        unit in prop::option::of(1.0f64..1e7),
    ) {
        let text = std::fs::read_to_string(common::configs_dir().join("vit_reference.json")).unwrap();
        let mut cfg = ScenarioConfig::from_json(&text).unwrap();
        cfg.training.alpha = alpha;
        cfg.training.batch_size = batch;
        cfg.training.epochs = epochs;
        cfg.seed = seed;
        cfg.features = Features { freeze: flags.0, autopipe: flags.1, autodp: flags.2, autocache: flags.3 };
        cfg.cache.mode = mode;
        if let Some(unit_params) = unit {
            cfg.partition = BalanceCriterion::MeanPlusVariance { unit_params };
        }
        if early {
            cfg.grad_norms = GradNormConfig::Synthetic {
                profile: ProfileName::EarlyRandom,
                switchover: Some(4),
                seed: Some(seed ^ 1),
                decay: Some(0.8),
            };
        }
        let json = cfg.to_json().unwrap();
        let back = ScenarioConfig::from_json(&json).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json().unwrap(), json);
    }
}
