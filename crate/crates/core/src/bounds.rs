//! Closed-form upper bounds on per-event embedding displacement, and a fuzz
//! harness that checks measured flow against them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CtdgError, Result};
use crate::events::EventRecord;
use crate::flow::{empirical_flow_with, FlowMode};
use crate::graph::{Distance, TemporalGraph};
use crate::model::{init_params, Aggregator, EventUpdate, ModelConfig, ModelParams, NodeStateTable};
use crate::numerics::{norm, spectral_norm_default};

/// Which side of the `L` versus `d(u, i)` split a node falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// `L >= d(u, i)`: the event node is inside the receptive field.
    Near,
    /// `L < d(u, i)`.
    Far,
}

impl Case {
    pub fn of(distance: Distance, layers: usize) -> Case {
        if distance.within(layers) {
            Case::Near
        } else {
            Case::Far
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Case::Near => "near",
            Case::Far => "far",
        }
    }
}

fn check_non_negative(values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !(*v >= 0.0) || !v.is_finite() {
            return Err(CtdgError::InvalidParameter(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
    }
    Ok(())
}

/// GCN bound: far `ŵ_u‖W_t‖Π‖W^(l)‖`, near `Π‖W^(l)‖(ŵ_u‖W_t‖ + ŵ_{u,i}Δs_i)`.
pub fn gcn_bound(
    case: Case,
    walk_sum: f64,
    pair_weight: f64,
    layer_norms: &[f64],
    time_norm: f64,
    memory_delta: f64,
) -> Result<f64> {
    check_non_negative(&[
        ("walk sum", walk_sum),
        ("pair weight", pair_weight),
        ("time weight norm", time_norm),
        ("memory delta", memory_delta),
    ])?;
    for &n in layer_norms {
        check_non_negative(&[("layer norm", n)])?;
    }
    let prod: f64 = layer_norms.iter().product();
    Ok(match case {
        Case::Far => walk_sum * time_norm * prod,
        Case::Near => prod * (walk_sum * time_norm + pair_weight * memory_delta),
    })
}

/// Attention bound: far `deg(u)(‖W_t‖ + B(‖W_t‖² + edge))`, near adds `Δs_i`.
/// `edge_term` is `‖w_2‖(‖e‖² + Δt²)` when edge features are used.
pub fn attention_bound(
    case: Case,
    degree: usize,
    time_norm: f64,
    norm_cap: f64,
    memory_delta: f64,
    edge_term: Option<f64>,
) -> Result<f64> {
    let edge = edge_term.unwrap_or(0.0);
    check_non_negative(&[
        ("time weight norm", time_norm),
        ("memory delta", memory_delta),
        ("edge term", edge),
    ])?;
    if !(norm_cap > 0.0) {
        return Err(CtdgError::InvalidParameter(format!("norm cap must be positive, got {norm_cap}")));
    }
    let far = degree as f64 * (time_norm + norm_cap * (time_norm * time_norm + edge));
    Ok(match case {
        Case::Far => far,
        Case::Near => far + memory_delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BoundOutcome {
    /// The node is an event endpoint; the bounds say nothing about it.
    NotCovered,
    Covered { case: Case, gamma: f64 },
}

/// Everything the bounds need about one event, computed once.
pub struct BoundContext {
    config: ModelConfig,
    endpoints: [usize; 2],
    deltas: [f64; 2],
    layer_norms: Vec<f64>,
    time_norm: f64,
    edge_term: Option<f64>,
    walk_sums: Vec<f64>,
    pair_weights: [Vec<f64>; 2],
    distances: [Vec<Distance>; 2],
    degrees: Vec<usize>,
}

impl BoundContext {
    /// Structure comes from the snapshot that includes the event.
    pub fn new(
        g: &TemporalGraph,
        event: usize,
        params: &ModelParams,
        config: &ModelConfig,
        update: &EventUpdate,
    ) -> Result<Self> {
        config.check_theorem_mode()?;
        let l = config.layers;
        let layer_norms = params
            .layers
            .iter()
            .map(spectral_norm_default)
            .collect::<Result<Vec<f64>>>()?;
        let time_norm = spectral_norm_default(&params.time_weight)?;
        let rec = g.event(event);
        let mut edge_term = None;
        if config.aggregator == Aggregator::Attention {
            let w = norm(params.attn_vector.values());
            let limit = time_norm / (8.0 * l as f64 * config.norm_cap);
            if layer_norms.iter().any(|&n| n > 1.0) || w > limit {
                return Err(CtdgError::Inadmissible(format!(
                    "attention bound needs every layer norm <= 1 and attention vector norm <= {limit:.3e}; got layers {layer_norms:?}, vector {w:.3e}"
                )));
            }
            if config.use_edge_features {
                let prev = if event == 0 { 0.0 } else { g.event_time(event - 1) };
                let dt = config.time_norm.apply(rec.time - prev);
                let e = rec.signed_features();
                let e2: f64 = e.iter().map(|x| x * x).sum();
                edge_term = Some(norm(params.edge_weight.values()) * (e2 + dt * dt));
            }
        }
        let snap = g.through(event);
        let adj = snap.normalized_adjacency();
        let endpoints = [rec.src, rec.dst];
        Ok(Self {
            config: config.clone(),
            endpoints,
            deltas: [update.delta(rec.src), update.delta(rec.dst)],
            layer_norms,
            time_norm,
            edge_term,
            walk_sums: adj.walk_sums(l),
            pair_weights: [adj.pair_weights_to(rec.src, l), adj.pair_weights_to(rec.dst, l)],
            distances: [snap.distances_from(rec.src), snap.distances_from(rec.dst)],
            degrees: snap.degrees(),
        })
    }

    pub fn distance(&self, u: usize) -> Distance {
        self.distances[0][u].min(self.distances[1][u])
    }

    /// Sum of the per-endpoint bounds; the case tag is near if either endpoint is.
    pub fn bound(&self, u: usize) -> Result<BoundOutcome> {
        if self.endpoints.contains(&u) {
            return Ok(BoundOutcome::NotCovered);
        }
        let l = self.config.layers;
        let mut gamma = 0.0;
        for k in 0..2 {
            let case = Case::of(self.distances[k][u], l);
            gamma += match self.config.aggregator {
                Aggregator::Gcn => gcn_bound(
                    case,
                    self.walk_sums[u],
                    self.pair_weights[k][u],
                    &self.layer_norms,
                    self.time_norm,
                    self.deltas[k],
                )?,
                Aggregator::Attention => attention_bound(
                    case,
                    self.degrees[u],
                    self.time_norm,
                    self.config.norm_cap,
                    self.deltas[k],
                    self.edge_term,
                )?,
                Aggregator::None => unreachable!("rejected by theorem mode check"),
            };
        }
        Ok(BoundOutcome::Covered {
            case: Case::of(self.distance(u), l),
            gamma,
        })
    }
}

pub fn bound_for(
    g: &TemporalGraph,
    event: usize,
    u: usize,
    params: &ModelParams,
    config: &ModelConfig,
    update: &EventUpdate,
) -> Result<BoundOutcome> {
    g.check_node(u)?;
    BoundContext::new(g, event, params, config, update)?.bound(u)
}

/// Flow exceeding `γ(1 + 1e-9) + 1e-12` is a violation.
pub fn is_violation(flow: f64, gamma: f64) -> bool {
    flow > gamma * (1.0 + 1e-9) + 1e-12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    ErdosRenyi,
    Star,
    Path,
    Barbell,
    Sbm,
}

impl GraphFamily {
    pub const ALL: [GraphFamily; 5] = [
        GraphFamily::ErdosRenyi,
        GraphFamily::Star,
        GraphFamily::Path,
        GraphFamily::Barbell,
        GraphFamily::Sbm,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub trials: usize,
    pub aggregator: Aggregator,
    #[serde(default)]
    pub edge_features: bool,
    #[serde(default = "default_families")]
    pub families: Vec<GraphFamily>,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    #[serde(default = "default_max_layers")]
    pub max_layers: usize,
    #[serde(default)]
    pub mode: VerifyMode,
    pub seed: u64,
    /// Multiplies every γ; only for exercising the violation detector.
    #[serde(default = "one")]
    pub gamma_scale: f64,
}

/// Structure semantics used when measuring flow during verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    /// Structure held fixed across the event (the bounds' assumption).
    #[default]
    Static,
    /// The event's edge is absent from the pre-event graph.
    Insert,
}

fn default_families() -> Vec<GraphFamily> {
    GraphFamily::ALL.to_vec()
}
fn default_max_nodes() -> usize {
    50
}
fn default_max_layers() -> usize {
    3
}
fn one() -> f64 {
    1.0
}

impl VerifySpec {
    pub fn new(trials: usize, aggregator: Aggregator, edge_features: bool, seed: u64) -> Self {
        Self {
            trials,
            aggregator,
            edge_features,
            families: default_families(),
            max_nodes: default_max_nodes(),
            max_layers: default_max_layers(),
            mode: VerifyMode::Static,
            seed,
            gamma_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CtdgError::InvalidParameter(m.into()));
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if self.families.is_empty() {
            return bad("at least one graph family is required");
        }
        if self.max_nodes < 4 {
            return bad("max_nodes must be >= 4");
        }
        if self.max_layers == 0 {
            return bad("max_layers must be >= 1");
        }
        if self.aggregator == Aggregator::None {
            return Err(CtdgError::NotTheoremMode("aggregator must be gcn or attention".into()));
        }
        if !(self.gamma_scale > 0.0) {
            return bad("gamma_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRecord {
    pub trial: usize,
    pub event: usize,
    pub node: usize,
    pub case: Case,
    pub gamma: f64,
    pub flow: f64,
    pub gap: f64,
    /// `log10(gap)`, absent when the gap is not positive.
    pub log10_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseSummary {
    pub count: usize,
    pub violations: usize,
    /// Quantiles of `log10_gap` at [`QUANTILE_LEVELS`].
    pub log10_gap_quantiles: Vec<f64>,
    pub median_log10_gap: Option<f64>,
}

pub const QUANTILE_LEVELS: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSummary {
    pub trials: usize,
    pub records: usize,
    pub violations: usize,
    pub min_gap: f64,
    pub median_gap: f64,
    pub quantile_levels: Vec<f64>,
    pub near: CaseSummary,
    pub far: CaseSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub spec: VerifySpec,
    pub summary: BoundSummary,
    pub records: Vec<BoundRecord>,
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,event,node,case,gamma,flow,gap,log10_gap\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{:e},{:e},{:e},{}\n",
                r.trial,
                r.event,
                r.node,
                r.case.as_str(),
                r.gamma,
                r.flow,
                r.gap,
                r.log10_gap.map_or(String::new(), |x| format!("{x:e}"))
            ));
        }
        s
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn case_summary(records: &[BoundRecord], case: Case) -> CaseSummary {
    let mine: Vec<&BoundRecord> = records.iter().filter(|r| r.case == case).collect();
    let mut logs: Vec<f64> = mine.iter().filter_map(|r| r.log10_gap).collect();
    logs.sort_by(f64::total_cmp);
    CaseSummary {
        count: mine.len(),
        violations: mine.iter().filter(|r| is_violation(r.flow, r.gamma)).count(),
        log10_gap_quantiles: if logs.is_empty() {
            Vec::new()
        } else {
            QUANTILE_LEVELS.iter().map(|&q| quantile(&logs, q)).collect()
        },
        median_log10_gap: (!logs.is_empty()).then(|| quantile(&logs, 0.5)),
    }
}

/// A connected random graph of the given family, as (a, b) pairs.
fn family_edges(family: GraphFamily, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    match family {
        GraphFamily::ErdosRenyi => {
            let p = rng.gen_range(0.05..0.4);
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(p) {
                        edges.push((a, b));
                    }
                }
            }
        }
        GraphFamily::Star => edges.extend((1..n).map(|v| (0, v))),
        GraphFamily::Path => edges.extend((1..n).map(|v| (v - 1, v))),
        GraphFamily::Barbell => {
            let k = (n / 3).max(2);
            for a in 0..k {
                for b in a + 1..k {
                    edges.push((a, b));
                    edges.push((n - 1 - a, n - 1 - b));
                }
            }
            for v in k..n - k {
                edges.push((v - 1, v));
            }
            edges.push((n - k - 1, n - k));
        }
        GraphFamily::Sbm => {
            let blocks = rng.gen_range(2..=4usize);
            let (pin, pout) = (rng.gen_range(0.3..0.9), rng.gen_range(0.0..0.1));
            for a in 0..n {
                for b in a + 1..n {
                    let p = if a % blocks == b % blocks { pin } else { pout };
                    if rng.gen_bool(p) {
                        edges.push((a, b));
                    }
                }
            }
        }
    }
    connect_components(n, &mut edges);
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Links components in order so the graph is connected.
fn connect_components(n: usize, edges: &mut Vec<(usize, usize)>) {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut x = x;
        while p[x] != r {
            let next = p[x];
            p[x] = r;
            x = next;
        }
        r
    }
    for &(a, b) in edges.iter() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let mut prev_root = find(&mut parent, 0);
    for v in 1..n {
        let r = find(&mut parent, v);
        if r != prev_root {
            edges.push((v - 1, v));
            parent[r] = prev_root;
        }
        prev_root = find(&mut parent, v);
    }
}

/// One random theorem-mode instance: graph, params, states and the measured event.
pub struct Trial {
    pub graph: TemporalGraph,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub states: NodeStateTable,
    pub event: usize,
}

fn rescale_to(m: &mut crate::numerics::DenseMatrix, target: f64) {
    if let Ok(s) = spectral_norm_default(m) {
        if s > 0.0 {
            m.scale_in_place(target / s);
        }
    }
}

/// Builds trial `trial` of `spec`; each trial owns a ChaCha stream.
pub fn sample_trial(spec: &VerifySpec, trial: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(trial as u64);
    let family = spec.families[trial % spec.families.len()];
    let n = rng.gen_range(4..=spec.max_nodes);
    let mut edges = family_edges(family, n, &mut rng);
    edges.shuffle(&mut rng);
    // A few repeated interactions exercise multi-edges and truncation.
    let repeats = rng.gen_range(0..=edges.len() / 4);
    for _ in 0..repeats {
        let e = edges[rng.gen_range(0..edges.len())];
        edges.push(e);
    }
    let d = if spec.edge_features { 2 } else { 0 };
    let mut events: Vec<EventRecord> = edges
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            EventRecord::new(a, b, (i + 1) as f64)
                .with_features((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect();
    let src = rng.gen_range(0..n);
    let dst = (src + rng.gen_range(1..n)) % n;
    let t_last = events.len() as f64 + rng.gen_range(0.5..3.0);
    events.push(
        EventRecord::new(src, dst, t_last).with_features((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
    );
    let event = events.len() - 1;
    let graph = TemporalGraph::from_events(n, d, events).expect("generated log is valid");

    let layers = rng.gen_range(1..=spec.max_layers);
    let hidden = rng.gen_range(2..=6);
    let mut config = ModelConfig::theorem_mode(spec.aggregator, layers, hidden);
    config.use_edge_features = spec.edge_features;
    config.norm_cap = rng.gen_range(0.3..=1.0);
    config.neighbor_k = if rng.gen_bool(0.5) { 10 } else { rng.gen_range(1..=10) };

    let mut params = init_params(&config, d, rng.gen());
    let wt = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.5) };
    rescale_to(&mut params.time_weight, wt);
    if wt == 0.0 {
        params.time_weight.scale_in_place(0.0);
    }
    for m in params.layers.iter_mut() {
        let target = match spec.aggregator {
            Aggregator::Attention => rng.gen_range(0.1..0.999),
            _ => rng.gen_range(0.1..2.5),
        };
        rescale_to(m, target);
    }
    params.mem_weight.scale_in_place(rng.gen_range(0.0..3.0));
    for v in params.mem_bias.values_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    if spec.aggregator == Aggregator::Attention {
        let limit = wt / (8.0 * layers as f64 * config.norm_cap);
        let w = norm(params.attn_vector.values());
        let target = limit * rng.gen_range(0.0..0.999);
        if w > 0.0 {
            params.attn_vector.scale_in_place(target / w);
        }
        params.edge_weight.scale_in_place(rng.gen_range(0.0..3.0));
    }

    let states: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = norm(&v);
            let target = config.norm_cap * rng.gen_range(0.0..=1.0);
            if r > 0.0 {
                v.iter().map(|x| x * target / r).collect()
            } else {
                v
            }
        })
        .collect();
    let last: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..t_last)).collect();
    let states = NodeStateTable::from_states(states, last, config.norm_cap).expect("consistent shapes");
    Trial {
        graph,
        config,
        params,
        states,
        event,
    }
}

/// Measured flow against γ for every non-endpoint node of one trial.
pub fn run_trial(spec: &VerifySpec, trial: usize) -> Result<Vec<BoundRecord>> {
    let t = sample_trial(spec, trial);
    let mode = match spec.mode {
        VerifyMode::Static => FlowMode::Static,
        VerifyMode::Insert => FlowMode::Insert,
    };
    let report = empirical_flow_with(&t.graph, t.event, &t.params, &t.config, &t.states, mode)?;
    let ctx = BoundContext::new(&t.graph, t.event, &t.params, &t.config, &report.update)?;
    let mut out = Vec::new();
    for u in 0..t.graph.n() {
        if let BoundOutcome::Covered { case, gamma } = ctx.bound(u)? {
            let gamma = gamma * spec.gamma_scale;
            let flow = report.displacement[u];
            let gap = gamma - flow;
            out.push(BoundRecord {
                trial,
                event: t.event,
                node: u,
                case,
                gamma,
                flow,
                gap,
                log10_gap: (gap > 0.0).then(|| gap.log10()),
            });
        }
    }
    Ok(out)
}

pub fn verify_bounds(spec: &VerifySpec) -> Result<BoundReport> {
    spec.validate()?;
    let per_trial: Vec<Result<Vec<BoundRecord>>> =
        (0..spec.trials).into_par_iter().map(|i| run_trial(spec, i)).collect();
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    let mut gaps: Vec<f64> = records.iter().map(|r| r.gap).collect();
    gaps.sort_by(f64::total_cmp);
    let summary = BoundSummary {
        trials: spec.trials,
        records: records.len(),
        violations: records.iter().filter(|r| is_violation(r.flow, r.gamma)).count(),
        min_gap: gaps.first().copied().unwrap_or(f64::NAN),
        median_gap: if gaps.is_empty() { f64::NAN } else { quantile(&gaps, 0.5) },
        quantile_levels: QUANTILE_LEVELS.to_vec(),
        near: case_summary(&records, Case::Near),
        far: case_summary(&records, Case::Far),
    };
    Ok(BoundReport {
        spec: spec.clone(),
        summary,
        records,
    })
}
