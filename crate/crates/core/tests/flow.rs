use ctdg_core::flow::{empirical_flow, empirical_flow_with, expected_flow, flow_profile, FlowMode};
use ctdg_core::graph::Distance;
use ctdg_core::model::{init_params, Aggregator, ModelConfig, ModelParams, NodeStateTable, Projection};
use ctdg_core::numerics::{distance, DenseMatrix};
use ctdg_core::{EventRecord, TemporalGraph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_states(rng: &mut ChaCha8Rng, n: usize, h: usize) -> NodeStateTable {
    let s = (0..n).map(|_| (0..h).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
    NodeStateTable::from_states(s, vec![0.0; n], 1.0).unwrap()
}

fn random_log(rng: &mut ChaCha8Rng, n: usize, m: usize, family: usize) -> TemporalGraph {
    let mut events = Vec::new();
    for i in 0..m {
        let (a, b) = match family {
            // Path-like: mostly local hops.
            0 => {
                let a = rng.gen_range(0..n - 1);
                (a, a + 1)
            }
            // Star-like: hub 0 plus a few random edges.
            1 => {
                if rng.gen_bool(0.7) {
                    (0, rng.gen_range(1..n))
                } else {
                    let a = rng.gen_range(1..n);
                    (a, 1 + (a + rng.gen_range(0..n - 2)) % (n - 1))
                }
            }
            // Uniform random pairs.
            _ => {
                let a = rng.gen_range(0..n);
                (a, (a + rng.gen_range(1..n)) % n)
            }
        };
        if a != b {
            events.push(EventRecord::new(a, b, (i + 1) as f64).with_features(vec![rng.gen_range(-1.0..1.0)]));
        }
    }
    TemporalGraph::from_events(n, 1, events).unwrap()
}

/// Memory map that copies `s_u`, so events leave memory unchanged.
fn copying_memory(p: &mut ModelParams, h: usize) {
    let cols = p.mem_weight.cols();
    let mut m = DenseMatrix::zeros(h, cols);
    for k in 0..h {
        m.set(k, k, 1.0);
    }
    p.mem_weight = m;
}

#[test]
fn frozen_model_has_zero_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_log(&mut rng, 12, 40, 2);
    for agg in [Aggregator::Gcn, Aggregator::Attention] {
        let mut c = ModelConfig::theorem_mode(agg, 2, 3);
        c.projection = Projection::None;
        let mut p = init_params(&c, 1, 3);
        p.time_weight.scale_in_place(0.0);
        copying_memory(&mut p, 3);
        let st = random_states(&mut rng, 12, 3);
        let r = empirical_flow_with(&g, 30, &p, &c, &st, FlowMode::Static).unwrap();
        assert!(r.displacement.iter().all(|&d| d == 0.0));
    }
}

#[test]
fn one_layer_flow_stays_within_one_hop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_log(&mut rng, 30, 40, 2);
    let mut c = ModelConfig::theorem_mode(Aggregator::Gcn, 1, 4);
    c.projection = Projection::None;
    let p = init_params(&c, 1, 5);
    let st = random_states(&mut rng, 30, 4);
    for ev in 0..40.min(g.event_count()) {
        let r = empirical_flow(&g, ev, &p, &c, &st).unwrap();
        for u in 0..30 {
            if !r.distance[u].within(1) {
                assert_eq!(r.displacement[u], 0.0);
            }
        }
    }
}

#[test]
fn star_center_outmoves_every_other_leaf() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<EventRecord> = (1..10).map(|v| EventRecord::new(0, v, v as f64)).collect();
        let leaf = rng.gen_range(1..10);
        events.push(EventRecord::new(0, leaf, 20.0));
        let g = TemporalGraph::from_events(10, 0, events).unwrap();
        for agg in [Aggregator::Gcn, Aggregator::Attention] {
            let c = ModelConfig::theorem_mode(agg, 2, 4);
            let mut p = init_params(&c, 0, seed);
            // Slow drift, so leaves move mostly through the center.
            let wt = ctdg_core::numerics::spectral_norm_default(&p.time_weight).unwrap();
            p.time_weight.scale_in_place(0.05 / wt);
            let st = random_states(&mut rng, 10, 4);
            let r = empirical_flow(&g, 9, &p, &c, &st).unwrap();
            for v in (1..10).filter(|&v| v != leaf) {
                assert!(r.displacement[0] >= r.displacement[v], "seed {seed} {agg:?} leaf {v}");
            }
        }
    }
}

#[test]
fn buckets_partition_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_log(&mut rng, 25, 30, 0);
    let c = ModelConfig::theorem_mode(Aggregator::Attention, 2, 3);
    let p = init_params(&c, 1, 2);
    let st = random_states(&mut rng, 25, 3);
    let r = empirical_flow(&g, 20, &p, &c, &st).unwrap();
    assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), 25);
    assert!(r.displacement.iter().all(|&d| d >= 0.0));
    assert_eq!(r.buckets[0].hop, Distance::Hops(0));
    assert_eq!(r.buckets[0].count, 2);
}

fn models_by_layers(agg: Aggregator, seed: u64) -> Vec<(ModelConfig, ModelParams)> {
    let mut top = ModelConfig::theorem_mode(agg, 3, 4);
    top.projection = Projection::None;
    let full = init_params(&top, 1, seed);
    (1..=3)
        .map(|l| {
            let mut c = top.clone();
            c.layers = l;
            let mut p = full.clone();
            p.layers.truncate(l);
            (c, p)
        })
        .collect()
}

#[test]
fn profile_covers_buckets_and_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_log(&mut rng, 30, 60, 2);
    let st = random_states(&mut rng, 30, 4);
    let stream: Vec<usize> = (40..g.event_count()).collect();
    let prof = flow_profile(&g, &stream, &models_by_layers(Aggregator::Gcn, 3), &st).unwrap();
    for l in 1..=3 {
        let block: Vec<_> = prof.rows.iter().filter(|r| r.layers == l).collect();
        let top = block.iter().map(|r| r.normalized_mean).fold(0.0, f64::max);
        assert_eq!(top, 1.0);
        assert_eq!(block.iter().map(|r| r.count).sum::<usize>(), 30 * stream.len());
    }
    let f: Vec<f64> = prof.nonzero_fraction.iter().map(|x| x.1).collect();
    assert!(f.windows(2).all(|w| w[0] <= w[1]), "{f:?}");
    assert!(prof.to_csv().starts_with("L,hop_distance,mean_disp,max_disp,normalized_mean,count\n"));

    // A single event and model still yields a row per bucket present.
    let models = models_by_layers(Aggregator::Attention, 1);
    let one = flow_profile(&g, &[50], &models[..1], &st).unwrap();
    let (c, p) = &models[0];
    let r = &ctdg_core::flow::stream_reports(&g, &[50], p, c, &st, FlowMode::Insert).unwrap()[0];
    assert_eq!(one.rows.len(), r.buckets.len());
}

#[test]
fn reach_grows_with_depth_on_fixtures() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let g = random_log(&mut rng, 40, 80, (seed % 3) as usize);
        let st = random_states(&mut rng, 40, 4);
        let stream: Vec<usize> = (60..g.event_count()).collect();
        for agg in [Aggregator::Gcn, Aggregator::Attention] {
            let models = models_by_layers(agg, seed);
            let mut prev: Option<Vec<bool>> = None;
            for (c, p) in &models {
                let reports = ctdg_core::flow::stream_reports(&g, &stream, p, c, &st, FlowMode::Insert).unwrap();
                let moved: Vec<bool> = reports.iter().flat_map(|r| r.displacement.iter().map(|&d| d > 0.0)).collect();
                if let Some(prev) = &prev {
                    assert!(prev.iter().zip(&moved).all(|(a, b)| !a || *b), "seed {seed} {agg:?}");
                }
                prev = Some(moved);
            }
        }
    }
}

#[test]
fn expected_flow_estimates() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_log(&mut rng, 20, 620, 2);
    let c = ModelConfig::theorem_mode(Aggregator::Gcn, 2, 3);
    let p = init_params(&c, 1, 8);
    let st = random_states(&mut rng, 20, 3);
    let stream: Vec<usize> = (0..g.event_count()).collect();
    assert!(expected_flow(&g, &[], &p, &c, &st, 10, 1).is_err());

    let exact = expected_flow(&g, &stream, &p, &c, &st, usize::MAX, 0).unwrap();
    let reports = ctdg_core::flow::stream_reports(&g, &stream, &p, &c, &st, FlowMode::Insert).unwrap();
    let all: Vec<f64> = reports.iter().flat_map(|r| r.displacement.clone()).collect();
    assert_eq!(exact.samples, all.len());
    assert!((exact.mean - all.iter().sum::<f64>() / all.len() as f64).abs() < 1e-15);

    let a = expected_flow(&g, &stream, &p, &c, &st, 10_000, 1).unwrap();
    let b = expected_flow(&g, &stream, &p, &c, &st, 10_000, 2).unwrap();
    assert_eq!(a, expected_flow(&g, &stream, &p, &c, &st, 10_000, 1).unwrap());
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 3.0 * se);
    assert!((a.mean - exact.mean).abs() <= 3.0 * a.std_error);

    let mut frozen = c.clone();
    frozen.projection = Projection::None;
    let zero = ModelParams::zeros(&frozen, 1);
    let zs = NodeStateTable::new(20, 3, 1.0);
    assert_eq!(expected_flow(&g, &stream[..50], &zero, &frozen, &zs, 100, 3).unwrap().mean, 0.0);
}

proptest! {
    #[test]
    fn displacement_metric_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let d = distance(&a, &b);
        prop_assert_eq!(d, distance(&b, &a));
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d == 0.0, a == b);
    }
}
