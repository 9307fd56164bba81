use ctdg_core::model::{
    init_params, Aggregator, MemoryKind, ModelConfig, ModelParams, NodeStateTable, ParamKey, Projection, TimeNorm,
};
use ctdg_core::numerics::Activation;
use ctdg_core::synth::{gen_bipartite, gen_long_range, BipartiteSpec, LabelRule, LongRangeSpec};
use ctdg_core::train::{
    batch_loss, bce_loss, evaluate_span, evaluate_with, grad, grad_scaled, negative_sample, train, train_with_split,
    Batch, NegativeMode, Split, Task, TaskData, TrainConfig,
};
use ctdg_core::{EventLog, EventRecord, TemporalGraph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_log(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> EventLog {
    let mut t = 0.0;
    let events = (0..m)
        .map(|_| {
            t += rng.gen_range(0.1..2.0);
            let a = rng.gen_range(0..n);
            let b = (a + rng.gen_range(1..n)) % n;
            EventRecord::new(a, b, t).with_features((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect();
    EventLog::new(n, d, events).unwrap()
}

fn config(agg: Aggregator, layers: usize, h: usize, memory: MemoryKind, edge: bool) -> ModelConfig {
    ModelConfig {
        layers,
        hidden_dim: h,
        aggregator: agg,
        memory,
        projection: Projection::Linear,
        activation: Activation::Tanh,
        norm_cap: 2.0,
        neighbor_k: 4,
        use_edge_features: edge,
        time_norm: TimeNorm::Scale { scale: 3.0 },
    }
}

struct Fixture {
    g: TemporalGraph,
    config: ModelConfig,
    params: ModelParams,
    states: NodeStateTable,
    batch: Batch,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(5..9);
    let log = random_log(&mut rng, n, 30, 2);
    let g = TemporalGraph::from_events(n, 2, log.events().to_vec()).unwrap();
    let agg = [Aggregator::Gcn, Aggregator::Attention, Aggregator::None][seed as usize % 3];
    let memory = if seed % 2 == 0 { MemoryKind::Gated } else { MemoryKind::Identity };
    let h = rng.gen_range(2..=8);
    let config = config(agg, rng.gen_range(1..=2), h, memory, seed % 4 < 2);
    let mut params = init_params(&config, 2, seed);
    // Nonzero biases so every block is exercised.
    for key in [ParamKey::MemBias, ParamKey::GateBias, ParamKey::DecB1, ParamKey::DecB2] {
        for v in params.block_mut(key).values_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let states = NodeStateTable::from_states(
        (0..n).map(|_| (0..h).map(|_| rng.gen_range(-0.4..0.4)).collect()).collect(),
        vec![0.0; n],
        config.norm_cap,
    )
    .unwrap();
    let batch = Batch {
        pending: 10..20,
        query_time: g.event_time(25),
        positives: (20..26).map(|i| (g.event(i).src, g.event(i).dst)).collect(),
        negatives: (20..26).map(|i| (g.event(i).src, (g.event(i).src + 1) % n)).collect(),
    };
    Fixture {
        g,
        config,
        params,
        states,
        batch,
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let eps = 1e-5;
    for seed in 0..20 {
        let f = fixture(seed);
        let (loss, analytic) = grad(&f.params, &f.batch, &f.g, &f.config, &f.states).unwrap();
        let direct = batch_loss(&f.params, &f.batch, &f.g, &f.config, &f.states).unwrap();
        assert!((loss - direct).abs() < 1e-12);
        for key in f.params.active_keys(&f.config) {
            let a = analytic.block(key).values().to_vec();
            let mut numeric = vec![0.0; a.len()];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let mut p = f.params.clone();
                p.block_mut(key).values_mut()[k] += eps;
                let up = batch_loss(&p, &f.batch, &f.g, &f.config, &f.states).unwrap();
                p.block_mut(key).values_mut()[k] -= 2.0 * eps;
                let down = batch_loss(&p, &f.batch, &f.g, &f.config, &f.states).unwrap();
                *slot = (up - down) / (2.0 * eps);
            }
            let scale = a.iter().chain(&numeric).fold(0.0f64, |m, x| m.max(x.abs()));
            let err = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if scale > 1e-9 {
                assert!(err / scale < 1e-4, "seed {seed} {}: {err} vs {scale}", key.name());
            }
        }
    }
}

#[test]
fn gradient_is_linear_in_loss_scale() {
    let f = fixture(3);
    let (_, g1) = grad(&f.params, &f.batch, &f.g, &f.config, &f.states).unwrap();
    let (_, g3) = grad_scaled(&f.params, &f.batch, &f.g, &f.config, &f.states, 3.0).unwrap();
    for key in f.params.keys() {
        for (a, b) in g1.block(key).values().iter().zip(g3.block(key).values()) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn zero_model_is_stationary() {
    let f = fixture(4);
    let zero = ModelParams::zeros(&f.config, 2);
    let states = NodeStateTable::new(f.g.n(), f.config.hidden_dim, f.config.norm_cap);
    let (loss, g) = grad(&zero, &f.batch, &f.g, &f.config, &states).unwrap();
    assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    for key in zero.keys() {
        assert!(g.block(key).values().iter().all(|&x| x.abs() < 1e-15), "{}", key.name());
    }
}

#[test]
fn bce_examples() {
    assert!((bce_loss(&[0.0, 0.0], &[0.0]).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_loss(&[800.0], &[-800.0]).unwrap() < 1e-300);
    let (p, n) = ([0.3, -1.2], [0.5, 2.0, -0.1]);
    let direct = -((1.0 / (1.0 + (-0.3f64).exp())).ln() + (1.0 / (1.0 + 1.2f64.exp())).ln()) / 2.0
        - ((1.0 - 1.0 / (1.0 + (-0.5f64).exp())).ln()
            + (1.0 - 1.0 / (1.0 + (-2.0f64).exp())).ln()
            + (1.0 - 1.0 / (1.0 + 0.1f64.exp())).ln())
            / 3.0;
    assert!((bce_loss(&p, &n).unwrap() - direct).abs() < 1e-12);
    assert!(bce_loss(&[], &[1.0]).is_err());
}

#[test]
fn negative_sampling_cases() {
    let log = EventLog::new(3, 0, vec![EventRecord::new(0, 1, 1.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(negative_sample(&log, 0, 50, &mut rng, NegativeMode::Uniform)
        .unwrap()
        .iter()
        .all(|&v| v == 2));
    let two = EventLog::new(2, 0, vec![EventRecord::new(0, 1, 1.0)]).unwrap();
    assert!(negative_sample(&two, 0, 1, &mut rng, NegativeMode::Uniform).is_err());

    let bip = EventLog::new(10, 0, vec![EventRecord::new(1, 6, 1.0)]).unwrap();
    let s = negative_sample(&bip, 0, 1000, &mut rng, NegativeMode::Bipartite { users: 4 }).unwrap();
    assert!(s.iter().all(|&v| (4..10).contains(&v) && v != 6));

    // Uniform over the 8 valid destinations: per-bin counts within 3 sigma.
    let log = EventLog::new(10, 0, vec![EventRecord::new(2, 7, 1.0)]).unwrap();
    let draws = 100_000;
    let s = negative_sample(&log, 0, draws, &mut rng, NegativeMode::Uniform).unwrap();
    let mut counts = [0usize; 10];
    for v in s {
        counts[v] += 1;
    }
    assert_eq!(counts[2] + counts[7], 0);
    let p = 1.0 / 8.0;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (v, &c) in counts.iter().enumerate().filter(|(v, _)| *v != 2 && *v != 7) {
        assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd, "node {v}: {c}");
    }
}

fn small_train_config(task: Task) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 20,
        epochs: 5,
        patience: 5,
        task,
        ..Default::default()
    }
}

fn bipartite_log(seed: u64) -> EventLog {
    gen_bipartite(&BipartiteSpec {
        users: 8,
        items: 8,
        events: 200,
        repeat_prob: 0.9,
        warmup: 20,
        mean_gap: 1.0,
        seed,
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_keeps_initial_params() {
    let log = bipartite_log(1);
    let c = config(Aggregator::Attention, 1, 4, MemoryKind::Gated, false);
    let mut tc = small_train_config(Task::LinkAuc);
    tc.lr = 0.0;
    tc.epochs = 2;
    let out = train(&log, &c, &tc, TaskData::default()).unwrap();
    assert_eq!(out.params, init_params(&c, 0, tc.seed));
}

#[test]
fn training_loss_drops_and_runs_repeat() {
    let log = bipartite_log(2);
    let c = config(Aggregator::Attention, 1, 8, MemoryKind::Gated, false);
    let mut tc = small_train_config(Task::LinkAuc);
    tc.negatives = NegativeMode::Bipartite { users: 8 };
    let out = train(&log, &c, &tc, TaskData::default()).unwrap();
    assert_eq!(out.trace.len(), 5);
    let first = out.trace[0].train_loss;
    let last = out.trace[4].train_loss;
    assert!(last < first, "{first} -> {last}");
    let again = train(&log, &c, &tc, TaskData::default()).unwrap();
    assert_eq!(out.params, again.params);
    let strip = |t: &[ctdg_core::train::TraceRow]| t.iter().map(|r| (r.epoch, r.train_loss, r.val_metric)).collect::<Vec<_>>();
    assert_eq!(strip(&out.trace), strip(&again.trace));
}

#[test]
fn later_events_never_influence_training() {
    let log = bipartite_log(3);
    let c = config(Aggregator::Gcn, 2, 4, MemoryKind::Identity, false);
    let tc = small_train_config(Task::LinkMrr);
    let split = Split::new(140, 170, 200).unwrap();
    let full = train_with_split(&log, &c, &tc, TaskData::default(), split).unwrap();
    let cut = log.prefix(170);
    let short = train_with_split(&cut, &c, &tc, TaskData::default(), Split::new(140, 170, 170).unwrap()).unwrap();
    assert_eq!(full.params, short.params);
    assert_eq!(full.best_val, short.best_val);
}

#[test]
fn divergence_is_reported() {
    let log = bipartite_log(4);
    let c = config(Aggregator::Gcn, 1, 4, MemoryKind::Identity, false);
    let mut tc = small_train_config(Task::LinkAuc);
    tc.lr = 1e308;
    assert!(matches!(
        train(&log, &c, &tc, TaskData::default()),
        Err(ctdg_core::CtdgError::Diverged { .. })
    ));
}

#[test]
fn oracle_and_random_scorers() {
    let log = bipartite_log(5);
    let mut tc = small_train_config(Task::LinkAuc);
    tc.eval_neg = 5;
    let span = 100..200;
    let ev = log.events().to_vec();
    // Knows which pairs occur in the batch being scored.
    let mut oracle = |upto: usize, _: f64, pairs: &[(usize, usize)]| {
        let truth: Vec<(usize, usize)> = ev[upto..(upto + tc.batch_size).min(200)]
            .iter()
            .map(|e| (e.src, e.dst))
            .collect();
        pairs.iter().map(|p| if truth.contains(p) { 1.0 } else { 0.0 }).collect::<Vec<f64>>()
    };
    let a = evaluate_with(&log, &mut oracle, span.clone(), &tc, TaskData::default()).unwrap();
    assert!(a > 0.9, "{a}");

    let unique = gen_bipartite(&BipartiteSpec {
        users: 50,
        items: 5000,
        events: 300,
        repeat_prob: 0.0,
        warmup: 0,
        mean_gap: 1.0,
        seed: 1,
    })
    .unwrap();
    let next: Vec<(usize, usize)> = unique.events().iter().map(|e| (e.src, e.dst)).collect();
    // Candidates arrive in groups of eval_neg + 1 per event.
    let group = 21;
    let mut perfect = |upto: usize, _: f64, pairs: &[(usize, usize)]| {
        (0..pairs.len())
            .map(|j| if pairs[j] == next[upto + j / group] { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    for task in [Task::LinkAuc, Task::LinkMrr] {
        let mut tc = small_train_config(task);
        tc.eval_neg = group - 1;
        let v = evaluate_with(&unique, &mut perfect, 0..300, &tc, TaskData::default()).unwrap();
        assert_eq!(v, 1.0, "{task:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut random = |_: usize, _: f64, pairs: &[(usize, usize)]| pairs.iter().map(|_| rng.gen::<f64>()).collect::<Vec<f64>>();
    let mut tc = small_train_config(Task::LinkAuc);
    tc.eval_neg = 50;
    // 200 positives x 50 negatives = 10^4 comparisons.
    let r = evaluate_with(&unique, &mut random, 100..300, &tc, TaskData::default()).unwrap();
    assert!((r - 0.5).abs() < 0.02, "{r}");
}

#[test]
fn edge_labels_drive_training_on_chains() {
    let spec = LongRangeSpec {
        chains: 300,
        chain_len: 3,
        horizon: 1000.0,
        label_rule: LabelRule::Sign,
        interleave: 60,
        seed: 2,
    };
    let (log, labels) = gen_long_range(&spec).unwrap();
    let data = TaskData {
        labels: Some(&labels),
        truth: None,
    };
    let mut tc = small_train_config(Task::EdgeAuc);
    tc.batch_size = 50;
    tc.epochs = 15;
    let mut c = config(Aggregator::Attention, 2, 8, MemoryKind::Gated, false);
    c.time_norm = TimeNorm::Auto;
    let out = train(&log, &c, &tc, data).unwrap();
    assert!(matches!(out.config.time_norm, TimeNorm::Scale { .. }));
    let split = Split::from_fractions(log.len(), tc.split).unwrap();
    let m = evaluate_span(&log, &out.params, &out.config, &tc, data, split.test(), "test").unwrap();
    assert!(m.value > 0.9, "{}", m.value);
    assert!(train(&log, &c, &tc, TaskData::default()).is_err());
}

proptest! {
    #[test]
    fn bce_is_nonnegative_and_monotone(p in -30.0f64..30.0, n in -30.0f64..30.0, d in 0.0f64..5.0) {
        let l = bce_loss(&[p], &[n]).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(bce_loss(&[p + d], &[n]).unwrap() <= l);
        prop_assert!(bce_loss(&[p], &[n - d]).unwrap() <= l);
    }
}
