use std::collections::HashMap;

use super::ops::{Eval, Ops};
use super::params::{ModelParams, ParamKey};
use super::state::NodeStateTable;
use super::{Aggregator, MemoryKind, ModelConfig, Projection, ATTENTION_LOGIT_SLOPE};
use crate::error::{CtdgError, Result};
use crate::events::EventRecord;
use crate::graph::{Snapshot, TemporalGraph};
use crate::numerics::{distance, Activation};

/// Memory update on `[s_u ‖ s_v ‖ Δt ‖ e]`, clipped to the norm cap.
pub(crate) fn mem_update_ops<O: Ops>(
    ops: &mut O,
    config: &ModelConfig,
    s_u: &O::V,
    s_v: &O::V,
    dt_norm: f64,
    e_feat: &[f64],
) -> O::V {
    let mut extra = Vec::with_capacity(1 + e_feat.len());
    extra.push(dt_norm);
    extra.extend_from_slice(e_feat);
    let extra = ops.input(extra);
    let raw = ops.concat(&[s_u.clone(), s_v.clone(), extra]);
    let lin = ops.matvec(ParamKey::MemWeight, &raw);
    let bias = ops.param(ParamKey::MemBias);
    let pre = ops.add(&lin, &bias);
    let out = match config.memory {
        MemoryKind::Identity => pre,
        MemoryKind::Gated => {
            let gl = ops.matvec(ParamKey::GateWeight, &raw);
            let gb = ops.param(ParamKey::GateBias);
            let gsum = ops.add(&gl, &gb);
            let gate = ops.sigmoid(&gsum);
            let cand = ops.act(&pre, Activation::Tanh);
            ops.blend(&gate, &cand, s_u)
        }
    };
    ops.clip(&out, config.norm_cap)
}

/// `clip(s + Δt·W_t s)` for linear projection, `s` otherwise.
pub(crate) fn project_ops<O: Ops>(ops: &mut O, config: &ModelConfig, s: &O::V, dt_norm: f64) -> O::V {
    match config.projection {
        Projection::None => s.clone(),
        Projection::Linear => {
            if dt_norm == 0.0 {
                return s.clone();
            }
            let ws = ops.matvec(ParamKey::TimeWeight, s);
            let moved = ops.lincomb(&[(1.0, s.clone()), (dt_norm, ws)]);
            ops.clip(&moved, config.norm_cap)
        }
    }
}

/// `σ(W^(l) Σ c_v h_v)`.
fn gcn_combine<O: Ops>(ops: &mut O, config: &ModelConfig, layer: usize, terms: &[(f64, O::V)]) -> O::V {
    let agg = ops.lincomb(terms);
    let z = ops.matvec(ParamKey::Layer(layer), &agg);
    ops.act(&z, config.activation)
}

struct AttnItem<V> {
    h0: V,
    edge: Vec<f64>,
    prev: V,
}

/// `σ(W^(l) Σ α_j h_j)` with `α = softmax(lrelu(wᵀ[h0_u, h0_j] + w_2ᵀ[e ‖ Δt]))`;
/// an empty neighborhood falls back to `σ(W^(l) h_u)`.
fn attention_combine<O: Ops>(
    ops: &mut O,
    config: &ModelConfig,
    layer: usize,
    h0_u: &O::V,
    self_prev: &O::V,
    items: &[AttnItem<O::V>],
) -> O::V {
    if items.is_empty() {
        let z = ops.matvec(ParamKey::Layer(layer), self_prev);
        return ops.act(&z, config.activation);
    }
    let logit_act = Activation::LeakyRelu {
        slope: ATTENTION_LOGIT_SLOPE,
    };
    let mut logits = Vec::with_capacity(items.len());
    for it in items {
        let pair = ops.concat(&[h0_u.clone(), it.h0.clone()]);
        let mut e = ops.matvec(ParamKey::AttnVector, &pair);
        if config.use_edge_features {
            let inp = ops.input(it.edge.clone());
            let ew = ops.matvec(ParamKey::EdgeWeight, &inp);
            e = ops.add(&e, &ew);
        }
        logits.push(ops.act(&e, logit_act));
    }
    let logits = ops.concat(&logits);
    let alpha = ops.softmax(&logits);
    let prevs: Vec<O::V> = items.iter().map(|it| it.prev.clone()).collect();
    let agg = ops.weighted_sum(&alpha, &prevs);
    let z = ops.matvec(ParamKey::Layer(layer), &agg);
    ops.act(&z, config.activation)
}

/// Lazily evaluates final-layer embeddings on one snapshot, memoizing every
/// `(layer, node)` representation so shared receptive fields are computed once.
pub struct Forward<'g, O: Ops> {
    snap: Snapshot<'g>,
    config: &'g ModelConfig,
    query_time: f64,
    memo: HashMap<(usize, usize), O::V>,
    degrees: HashMap<usize, usize>,
}

pub type H0Fn<'a, O> = dyn FnMut(&mut O, usize) -> <O as Ops>::V + 'a;

impl<'g, O: Ops> Forward<'g, O> {
    pub fn new(snap: Snapshot<'g>, config: &'g ModelConfig, query_time: f64) -> Self {
        Self {
            snap,
            config,
            query_time,
            memo: HashMap::new(),
            degrees: HashMap::new(),
        }
    }

    /// Final-layer embedding of `u`; `h0` supplies initial representations.
    pub fn embed(&mut self, ops: &mut O, h0: &mut H0Fn<'_, O>, u: usize) -> O::V {
        let top = match self.config.aggregator {
            Aggregator::None => 0,
            _ => self.config.layers,
        };
        self.hidden(ops, h0, u, top)
    }

    fn degree(&mut self, v: usize) -> usize {
        let snap = self.snap;
        *self.degrees.entry(v).or_insert_with(|| snap.degree(v))
    }

    fn hidden(&mut self, ops: &mut O, h0: &mut H0Fn<'_, O>, u: usize, layer: usize) -> O::V {
        if let Some(v) = self.memo.get(&(layer, u)) {
            return v.clone();
        }
        let out = if layer == 0 {
            h0(ops, u)
        } else {
            let nb = self.snap.neighborhood(u, self.config.neighbor_k);
            match self.config.aggregator {
                Aggregator::Gcn => {
                    let mut ids: Vec<usize> = nb.iter().map(|x| x.neighbor).collect();
                    ids.push(u);
                    ids.sort_unstable();
                    ids.dedup();
                    let du = self.degree(u) as f64;
                    let mut terms = Vec::with_capacity(ids.len());
                    for v in ids {
                        let dv = self.degree(v) as f64;
                        let c = 1.0 / ((1.0 + du) * (1.0 + dv)).sqrt();
                        terms.push((c, self.hidden(ops, h0, v, layer - 1)));
                    }
                    gcn_combine(ops, self.config, layer - 1, &terms)
                }
                Aggregator::Attention => {
                    let h0_u = self.hidden(ops, h0, u, 0);
                    let self_prev = self.hidden(ops, h0, u, layer - 1);
                    let g = self.snap.graph();
                    let mut items = Vec::with_capacity(nb.len());
                    for x in &nb {
                        let mut edge = g.edge_features(x.event).to_vec();
                        edge.push(self.config.time_norm.apply(self.query_time - x.time));
                        items.push(AttnItem {
                            h0: self.hidden(ops, h0, x.neighbor, 0),
                            edge,
                            prev: self.hidden(ops, h0, x.neighbor, layer - 1),
                        });
                    }
                    attention_combine(ops, self.config, layer - 1, &h0_u, &self_prev, &items)
                }
                Aggregator::None => unreachable!("no layers without an aggregator"),
            }
        };
        self.memo.insert((layer, u), out.clone());
        out
    }
}

fn check_dim(what: &str, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(CtdgError::ShapeMismatch(format!(
            "{what} has dimension {}, expected {dim}",
            v.len()
        )));
    }
    Ok(())
}

/// Memory update for one endpoint; `dt` is raw elapsed time.
pub fn mem_update(
    s_u: &[f64],
    s_v: &[f64],
    dt: f64,
    e_feat: &[f64],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let h = config.hidden_dim;
    check_dim("s_u", s_u, h)?;
    check_dim("s_v", s_v, h)?;
    check_dim("edge features", e_feat, params.feature_dim)?;
    if !(dt >= 0.0) {
        return Err(CtdgError::InvalidParameter(format!("elapsed time must be >= 0, got {dt}")));
    }
    let mut ops = Eval::new(params);
    Ok(mem_update_ops(
        &mut ops,
        config,
        &s_u.to_vec(),
        &s_v.to_vec(),
        config.time_norm.apply(dt),
        e_feat,
    ))
}

pub fn temporal_project(s_u: &[f64], dt_norm: f64, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    check_dim("state", s_u, config.hidden_dim)?;
    if !(0.0..=1.0).contains(&dt_norm) {
        return Err(CtdgError::InvalidParameter(format!(
            "normalized elapsed time must lie in [0, 1], got {dt_norm}"
        )));
    }
    let mut ops = Eval::new(params);
    Ok(project_ops(&mut ops, config, &s_u.to_vec(), dt_norm))
}

/// One GCN layer over every node of the snapshot at `t`. `layer_idx` is zero-based.
pub fn gcn_layer(
    g: &TemporalGraph,
    t: f64,
    reps: &[Vec<f64>],
    layer_idx: usize,
    params: &ModelParams,
    config: &ModelConfig,
) -> Vec<Vec<f64>> {
    let snap = g.at(t);
    let deg = snap.degrees();
    let mut ops = Eval::new(params);
    (0..g.n())
        .map(|u| {
            let mut ids: Vec<usize> = snap
                .neighborhood(u, config.neighbor_k)
                .iter()
                .map(|x| x.neighbor)
                .collect();
            ids.push(u);
            ids.sort_unstable();
            ids.dedup();
            let terms: Vec<(f64, Vec<f64>)> = ids
                .iter()
                .map(|&v| {
                    let c = 1.0 / ((1.0 + deg[u] as f64) * (1.0 + deg[v] as f64)).sqrt();
                    (c, reps[v].clone())
                })
                .collect();
            gcn_combine(&mut ops, config, layer_idx, &terms)
        })
        .collect()
}

/// One attention layer; logits compare the initial representations `h0`.
pub fn attention_layer(
    g: &TemporalGraph,
    t: f64,
    reps: &[Vec<f64>],
    h0: &[Vec<f64>],
    layer_idx: usize,
    params: &ModelParams,
    config: &ModelConfig,
) -> Vec<Vec<f64>> {
    let snap = g.at(t);
    let mut ops = Eval::new(params);
    (0..g.n())
        .map(|u| {
            let items: Vec<AttnItem<Vec<f64>>> = snap
                .neighborhood(u, config.neighbor_k)
                .iter()
                .map(|x| {
                    let mut edge = g.edge_features(x.event).to_vec();
                    edge.push(config.time_norm.apply(t - x.time));
                    AttnItem {
                        h0: h0[x.neighbor].clone(),
                        edge,
                        prev: reps[x.neighbor].clone(),
                    }
                })
                .collect();
            attention_combine(&mut ops, config, layer_idx, &h0[u], &reps[u], &items)
        })
        .collect()
}

/// Final-layer embeddings of every node from given initial representations.
pub fn embed_from_h0(
    snap: Snapshot<'_>,
    query_time: f64,
    h0: &[Vec<f64>],
    params: &ModelParams,
    config: &ModelConfig,
) -> Vec<Vec<f64>> {
    let mut ops = Eval::new(params);
    let mut fwd: Forward<'_, Eval<'_>> = Forward::new(snap, config, query_time);
    let mut init = |_: &mut Eval<'_>, v: usize| h0[v].clone();
    (0..snap.n()).map(|u| fwd.embed(&mut ops, &mut init, u)).collect()
}

/// `f_u(G_t)` for all `u`: project each memory by its own elapsed time, then aggregate.
pub fn embed(
    g: &TemporalGraph,
    t: f64,
    params: &ModelParams,
    config: &ModelConfig,
    states: &NodeStateTable,
) -> Vec<Vec<f64>> {
    let mut ops = Eval::new(params);
    let h0: Vec<Vec<f64>> = (0..g.n())
        .map(|u| {
            let dt = config.time_norm.apply(t - states.last_update(u));
            project_ops(&mut ops, config, &states.memory(u).to_vec(), dt)
        })
        .collect();
    embed_from_h0(g.at(t), t, &h0, params, config)
}

/// Memory deltas recorded by [`apply_event`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventUpdate {
    pub src: usize,
    pub dst: usize,
    /// `‖s'_src − s_src‖`.
    pub src_delta: f64,
    pub dst_delta: f64,
}

impl EventUpdate {
    pub fn delta(&self, u: usize) -> f64 {
        if u == self.src {
            self.src_delta
        } else if u == self.dst {
            self.dst_delta
        } else {
            0.0
        }
    }
}

/// Updates both endpoint memories from their pre-event states.
pub fn apply_event(
    states: &mut NodeStateTable,
    event: &EventRecord,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<EventUpdate> {
    for u in [event.src, event.dst] {
        if u >= states.n() {
            return Err(CtdgError::NodeOutOfRange { node: u, n: states.n() });
        }
        let last = states.last_update(u);
        if event.time < last {
            return Err(CtdgError::TimeRegression {
                node: u,
                time: event.time,
                last,
            });
        }
    }
    let e = event.signed_features();
    let su = states.memory(event.src).to_vec();
    let sv = states.memory(event.dst).to_vec();
    let new_u = mem_update(&su, &sv, event.time - states.last_update(event.src), &e, params, config)?;
    let new_v = mem_update(&sv, &su, event.time - states.last_update(event.dst), &e, params, config)?;
    let update = EventUpdate {
        src: event.src,
        dst: event.dst,
        src_delta: distance(&new_u, &su),
        dst_delta: distance(&new_v, &sv),
    };
    states.set(event.src, new_u, event.time);
    states.set(event.dst, new_v, event.time);
    Ok(update)
}
