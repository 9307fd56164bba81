use std::collections::{BTreeMap, HashSet};

use ctdg_core::model::{Aggregator, MemoryKind, ModelConfig, Projection, TimeNorm};
use ctdg_core::numerics::Activation;
use ctdg_core::synth::{
    gen_bipartite, gen_long_range, gen_sbm_ctdg, labels_to_csv, read_labels_csv, surprise_index, BipartiteSpec,
    DatasetSpec, GroundTruth, LabelRule, LongRangeSpec, SbmSpec,
};
use ctdg_core::train::{evaluate, train, Task, TaskData, TrainConfig};
use ctdg_core::{CtdgError, EventLog, EventRecord};
use proptest::prelude::*;

fn small_sbm(seed: u64) -> SbmSpec {
    SbmSpec {
        communities: 10,
        community_size: 10,
        p_intra: 0.25,
        p_inter: 0.5,
        pairs_per_step: 2,
        horizon_range: (6, 20),
        steps: 20,
        seed,
    }
}

#[test]
fn sbm_density_one_gives_complete_communities() {
    let spec = SbmSpec {
        communities: 2,
        community_size: 3,
        p_intra: 1.0,
        p_inter: 0.0,
        pairs_per_step: 1,
        horizon_range: (1, 2),
        steps: 1,
        seed: 3,
    };
    let (log, truth) = gen_sbm_ctdg(&spec).unwrap();
    let pairs: Vec<_> = log.events().iter().map(EventRecord::pair).collect();
    assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
    assert!(log.events().iter().all(|e| e.time == 0.0));
    assert_eq!(truth.membership, vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn default_sbm_has_three_thousand_nodes() {
    let spec = SbmSpec::default();
    assert_eq!(spec.n(), 3000);
    let (log, truth) = gen_sbm_ctdg(&spec).unwrap();
    assert_eq!(log.n(), 3000);
    assert_eq!(truth.membership.len(), 3000);
}

#[test]
fn intra_frequency_is_binomial() {
    let (mut hits, mut trials) = (0usize, 0usize);
    for seed in 0..20 {
        let spec = small_sbm(seed);
        let (log, _) = gen_sbm_ctdg(&spec).unwrap();
        hits += log.events().iter().filter(|e| e.time == 0.0).count();
        trials += spec.communities * spec.community_size * (spec.community_size - 1) / 2;
    }
    let (n, p) = (trials as f64, 0.25);
    let sd = (n * p * (1.0 - p)).sqrt();
    assert!((hits as f64 - n * p).abs() < 3.0 * sd, "{hits} of {trials}");
}

#[test]
fn sbm_events_follow_ground_truth() {
    let spec = small_sbm(7);
    let (log, truth) = gen_sbm_ctdg(&spec).unwrap();
    let nb = spec.community_size;

    // Membership is a partition into equal blocks.
    for c in 0..spec.communities {
        assert_eq!(truth.members(c), (c * nb..(c + 1) * nb).collect::<Vec<_>>());
    }

    let mut live: HashSet<(usize, usize, usize)> = HashSet::new();
    for a in &truth.active {
        assert!(a.comm_a < a.comm_b);
        live.insert((a.timestep, a.comm_a, a.comm_b));
    }
    for e in log.events() {
        let (ca, cb) = (truth.membership[e.src], truth.membership[e.dst]);
        if e.time == 0.0 {
            assert_eq!(ca, cb);
        } else {
            assert_ne!(ca, cb);
            assert!(live.contains(&(e.time as usize, ca.min(cb), ca.max(cb))));
        }
    }
}

#[test]
fn relevances_match_horizons() {
    for seed in 0..5 {
        let spec = small_sbm(seed);
        let (log, truth) = gen_sbm_ctdg(&spec).unwrap();
        let mut runs: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for a in &truth.active {
            runs.entry((a.comm_a, a.comm_b)).or_default().push((a.timestep, a.relevance));
        }
        // k fresh pairs each step.
        let mut starts = vec![0; spec.steps + 1];
        for steps in runs.values() {
            starts[steps[0].0] += 1;
        }
        assert!(starts[1..].iter().all(|&s| s == spec.pairs_per_step));

        let mut expected = 0.0;
        for steps in runs.values() {
            let (first, rel) = steps[0];
            let h = spec.p_inter / rel;
            assert!((h - h.round()).abs() < 1e-9);
            let h = h.round() as usize;
            assert!((spec.horizon_range.0..spec.horizon_range.1).contains(&h));
            let want: Vec<usize> = (first..(first + h).min(spec.steps + 1)).collect();
            assert_eq!(steps.iter().map(|s| s.0).collect::<Vec<_>>(), want);
            assert!(steps.iter().all(|s| s.1 == rel));
            expected += rel * (spec.community_size * spec.community_size * steps.len()) as f64;
        }
        let cross = log.events().iter().filter(|e| e.time > 0.0).count() as f64;
        assert!((cross - expected).abs() < 4.0 * expected.sqrt(), "{cross} vs {expected}");

        for t in truth.timesteps() {
            let all = truth.relevance_at(t);
            assert_eq!(all.len(), spec.communities * (spec.communities - 1) / 2);
            assert!(all.iter().all(|&(_, r)| r >= 0.0));
        }
    }
}

#[test]
fn infeasible_sbm_is_rejected() {
    let spec = SbmSpec {
        pairs_per_step: 3,
        steps: 16,
        ..small_sbm(0)
    };
    assert!(matches!(gen_sbm_ctdg(&spec), Err(CtdgError::Infeasible(_))));
    let spec = SbmSpec {
        pairs_per_step: 3,
        steps: 15,
        ..small_sbm(0)
    };
    assert!(gen_sbm_ctdg(&spec).is_ok());
    assert!(gen_sbm_ctdg(&SbmSpec { p_inter: 1.5, ..small_sbm(0) }).is_err());
    assert!(gen_sbm_ctdg(&SbmSpec { horizon_range: (5, 5), ..small_sbm(0) }).is_err());
}

#[test]
fn generators_are_deterministic() {
    assert_eq!(gen_sbm_ctdg(&small_sbm(4)).unwrap(), gen_sbm_ctdg(&small_sbm(4)).unwrap());
    assert_ne!(gen_sbm_ctdg(&small_sbm(4)).unwrap().0, gen_sbm_ctdg(&small_sbm(5)).unwrap().0);

    let lr = LongRangeSpec { chains: 100, seed: 9, ..Default::default() };
    assert_eq!(gen_long_range(&lr).unwrap(), gen_long_range(&lr).unwrap());
    let other = LongRangeSpec { seed: 10, ..lr.clone() };
    assert_ne!(gen_long_range(&lr).unwrap(), gen_long_range(&other).unwrap());

    let bp = bipartite(0.5, 1);
    assert_eq!(gen_bipartite(&bp).unwrap(), gen_bipartite(&bp).unwrap());
}

#[test]
fn long_range_layout() {
    for rule in [LabelRule::Sign, LabelRule::Match] {
        let spec = LongRangeSpec { label_rule: rule, ..Default::default() };
        let (log, labels) = gen_long_range(&spec).unwrap();
        assert!(log.len() >= 5000);
        assert_eq!(labels.len(), spec.chains);
        let ones = labels.iter().filter(|l| l.label == 1).count() as f64 / labels.len() as f64;
        assert!((0.45..=0.55).contains(&ones), "{ones}");

        let per = spec.nodes_per_chain();
        let ev = log.events();
        assert!(ev.windows(2).all(|w| w[0].time < w[1].time));
        for l in &labels {
            let e = &ev[l.event_idx];
            let c = e.src / per;
            assert_eq!((e.src, e.dst), (c * per, c * per + per - 1));
            assert_eq!(e.features, vec![0.0]);
            // The deciding attribute sits on the far end of the chain.
            let attr = ev[..l.event_idx]
                .iter()
                .find(|a| a.src == c * per + spec.chain_len - 1 && a.dst == c * per + spec.chain_len)
                .expect("attribute event precedes the query");
            let want = match rule {
                LabelRule::Sign => if l.label == 1 { 1.0 } else { -1.0 },
                LabelRule::Match => {
                    let own = ev[..l.event_idx]
                        .iter()
                        .find(|a| (a.src, a.dst) == (e.src, e.dst))
                        .expect("own attribute precedes the query");
                    if l.label == 1 { own.features[0] } else { -own.features[0] }
                }
            };
            assert_eq!(attr.features, vec![want]);
        }
    }
    assert!(gen_long_range(&LongRangeSpec { chain_len: 2, ..Default::default() }).is_err());
}

#[test]
fn one_layer_cannot_see_two_hops() {
    let spec = LongRangeSpec {
        chains: 2000,
        chain_len: 3,
        horizon: 1000.0,
        label_rule: LabelRule::Sign,
        interleave: 200,
        seed: 5,
    };
    let (log, labels) = gen_long_range(&spec).unwrap();
    let data = TaskData { labels: Some(&labels), truth: None };
    let tc = TrainConfig {
        lr: 0.01,
        epochs: 5,
        batch_size: 200,
        task: Task::EdgeAuc,
        ..Default::default()
    };
    let cfg = ModelConfig {
        layers: 1,
        hidden_dim: 8,
        aggregator: Aggregator::Attention,
        memory: MemoryKind::Gated,
        projection: Projection::Linear,
        activation: Activation::Tanh,
        norm_cap: 5.0,
        neighbor_k: 10,
        use_edge_features: true,
        time_norm: TimeNorm::Auto,
    };
    let out = train(&log, &cfg, &tc, data).unwrap();
    let m = evaluate(&log, &out.params, &out.config, &tc, data).unwrap();
    assert!((m.value - 0.5).abs() < 0.1, "{}", m.value);
}

fn bipartite(repeat_prob: f64, seed: u64) -> BipartiteSpec {
    BipartiteSpec {
        users: 1000,
        items: 1000,
        events: 2000,
        repeat_prob,
        warmup: 100,
        mean_gap: 1.0,
        seed,
    }
}

// Straight set difference over the events on each side of the split.
fn naive_surprise(log: &EventLog, split: f64) -> f64 {
    let ev = log.events();
    let mut train: Vec<(usize, usize)> = Vec::new();
    let mut test: Vec<(usize, usize)> = Vec::new();
    for e in ev {
        let side = if e.time <= split { &mut train } else { &mut test };
        if !side.contains(&e.pair()) {
            side.push(e.pair());
        }
    }
    test.iter().filter(|p| !train.contains(p)).count() as f64 / test.len() as f64
}

#[test]
fn bipartite_partition_and_surprise() {
    for seed in 0..3 {
        let log = gen_bipartite(&bipartite(1.0, seed)).unwrap();
        let users = 1000;
        assert!(log.events().iter().all(|e| e.src < users && e.dst >= users));
        let split = log.events()[500].time;
        assert_eq!(surprise_index(&log, split).unwrap(), 0.0);

        let log = gen_bipartite(&bipartite(0.0, seed)).unwrap();
        let split = log.events()[1000].time;
        let s = surprise_index(&log, split).unwrap();
        assert!(s > 0.99, "{s}");
        assert_eq!(s, naive_surprise(&log, split));

        let log = gen_bipartite(&bipartite(0.6, seed)).unwrap();
        let split = log.events()[1400].time;
        assert_eq!(surprise_index(&log, split).unwrap(), naive_surprise(&log, split));
    }
    assert!(gen_bipartite(&bipartite(1.5, 0)).is_err());
}

#[test]
fn surprise_fixture() {
    let pairs = [(0, 5), (1, 5), (2, 6), (0, 6), (0, 5), (5, 0), (3, 7), (3, 7), (1, 6), (2, 6)];
    let events = pairs
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| EventRecord::new(a, b, (i + 1) as f64))
        .collect();
    let log = EventLog::new(8, 0, events).unwrap();
    // Test side {05, 37, 16, 26}; 37 and 16 are new.
    assert_eq!(surprise_index(&log, 4.0).unwrap(), 0.5);
    assert_eq!(surprise_index(&log, 1.0).unwrap(), naive_surprise(&log, 1.0));
    assert!(surprise_index(&log, 10.0).is_err());
    assert!(surprise_index(&log, 0.5).is_err());
    assert!(surprise_index(&log, 11.0).is_err());
    assert!(surprise_index(&EventLog::empty(2, 0), 0.0).is_err());
}

#[test]
fn csv_round_trips() {
    let spec = small_sbm(2);
    let (log, truth) = gen_sbm_ctdg(&spec).unwrap();
    let back = GroundTruth::read_csv(truth.to_csv_string().as_bytes(), 10, 10).unwrap();
    assert_eq!(back, truth);
    assert!(truth.to_csv_string().starts_with("timestep,comm_a,comm_b,relevance\n"));
    let relog = EventLog::read_csv(log.to_csv_string().as_bytes(), Some(log.n())).unwrap();
    assert_eq!(relog, log);

    let (_, labels) = gen_long_range(&LongRangeSpec { chains: 50, ..Default::default() }).unwrap();
    let csv = labels_to_csv(&labels);
    assert!(csv.starts_with("event_idx,label\n"));
    assert_eq!(read_labels_csv(csv.as_bytes()).unwrap(), labels);
}

#[test]
fn dataset_specs_parse_strictly() {
    let json = r#"{"kind": "sbm", "communities": 10, "community_size": 10, "p_intra": 0.25,
        "p_inter": 0.5, "pairs_per_step": 2, "steps": 20, "seed": 3}"#;
    let spec: DatasetSpec = serde_json::from_str(json).unwrap();
    assert_eq!(spec, DatasetSpec::Sbm(SbmSpec { seed: 3, ..small_sbm(0) }));
    let data = spec.generate().unwrap();
    assert!(data.truth.is_some() && data.labels.is_none());

    let typo = json.replace("\"steps\"", "\"stepz\"");
    assert!(serde_json::from_str::<DatasetSpec>(&typo).is_err());

    let mut lr: DatasetSpec = serde_json::from_str(r#"{"kind": "long_range", "chains": 20, "chain_len": 4,
        "horizon": 100.0, "label_rule": "sign"}"#)
    .unwrap();
    lr.set_seed(11);
    assert_eq!(lr.seed(), 11);
    assert!(lr.generate().unwrap().labels.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sbm_invariants_hold(seed in 0u64..1000, k in 1usize..4, lo in 1usize..6, span in 1usize..8, p in 0.0f64..1.0) {
        let spec = SbmSpec {
            communities: 8,
            community_size: 4,
            p_intra: p,
            p_inter: p,
            pairs_per_step: k,
            horizon_range: (lo, lo + span),
            steps: 28 / k,
            seed,
        };
        let (log, truth) = gen_sbm_ctdg(&spec).unwrap();
        prop_assert_eq!(log.n(), 32);
        prop_assert!(truth.active.iter().all(|a| a.relevance >= 0.0));
        let mut seen = vec![false; 32];
        for c in 0..8 {
            for u in truth.members(c) {
                prop_assert!(!seen[u]);
                seen[u] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn surprise_is_a_fraction(seed in 0u64..500, r in 0.0f64..1.0, cut in 1usize..199) {
        let spec = BipartiteSpec { users: 20, items: 20, events: 200, repeat_prob: r, warmup: 0, mean_gap: 1.0, seed };
        let log = gen_bipartite(&spec).unwrap();
        let split = log.events()[cut].time;
        prop_assume!(split < log.events()[199].time);
        let s = surprise_index(&log, split).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, naive_surprise(&log, split));
    }
}
