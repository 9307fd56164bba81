//! Self-supervised next-event training, gradients, and evaluation over a
//! chronological split.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtdgError, Result};
use crate::events::{EventLog, EventRecord};
use crate::graph::TemporalGraph;
use crate::metrics::{auc, mrr, ndcg, RankedQuery};
use crate::model::{
    apply_event, init_params, mem_update_ops, project_ops, Eval, Forward, ModelConfig, ModelParams,
    NodeStateTable, Ops, ParamKey, Tape, TimeNorm,
};
use crate::numerics::{log_sigmoid, sigmoid};
use crate::synth::{EdgeLabel, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Positives vs sampled negatives over the span.
    LinkAuc,
    /// Rank of the true destination among sampled candidates.
    LinkMrr,
    /// Community pairs ranked per timestep against ground truth.
    CommunityNdcg,
    /// Labeled events classified by the link score; trains on the labels.
    EdgeAuc,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::LinkAuc => "link_auc",
            Task::LinkMrr => "link_mrr",
            Task::CommunityNdcg => "community_ndcg",
            Task::EdgeAuc => "edge_auc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NegativeMode {
    #[default]
    Uniform,
    /// Nodes `0..users` are users; destinations are drawn from the rest.
    Bipartite { users: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Negatives per positive during training.
    pub n_neg: usize,
    /// Negatives per positive during evaluation.
    pub eval_neg: usize,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub task: Task,
    pub negatives: NegativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 200,
            epochs: 30,
            patience: 5,
            n_neg: 1,
            eval_neg: 20,
            split: (0.7, 0.15, 0.15),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            task: Task::LinkAuc,
            negatives: NegativeMode::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtdgError::InvalidParameter(m));
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|x| !(*x >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 || a == 0.0 {
            return bad(format!("split fractions {:?} must be >= 0, sum to 1, with a train share", self.split));
        }
        if self.patience == 0 || self.batch_size == 0 || self.n_neg == 0 || self.eval_neg == 0 {
            return bad("patience, batch_size, n_neg and eval_neg must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("moment parameters must satisfy 0 <= beta < 1 and eps > 0".into());
        }
        Ok(())
    }
}

/// Chronological split by event index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl Split {
    pub fn from_fractions(len: usize, split: (f64, f64, f64)) -> Result<Self> {
        let train_end = ((len as f64 * split.0).round() as usize).clamp(1, len);
        let val_end = ((len as f64 * (split.0 + split.1)).round() as usize).clamp(train_end, len);
        Self::new(train_end, val_end, len)
    }

    pub fn new(train_end: usize, val_end: usize, len: usize) -> Result<Self> {
        if train_end == 0 || train_end > val_end || val_end > len {
            return Err(CtdgError::InvalidParameter(format!(
                "bad split {train_end} <= {val_end} <= {len}"
            )));
        }
        Ok(Self { train_end, val_end, len })
    }

    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.len
    }
}

/// Destinations for `event` drawn uniformly from valid nodes: not the
/// source, not the true destination, and on the item side in bipartite mode.
pub fn negative_sample<R: Rng>(
    log: &EventLog,
    event: usize,
    n_neg: usize,
    rng: &mut R,
    mode: NegativeMode,
) -> Result<Vec<usize>> {
    let e = log
        .events()
        .get(event)
        .ok_or_else(|| CtdgError::InvalidParameter(format!("event {event} out of range")))?;
    sample_destinations(log.n(), e, n_neg, rng, mode)
}

fn sample_destinations<R: Rng>(
    n: usize,
    e: &EventRecord,
    n_neg: usize,
    rng: &mut R,
    mode: NegativeMode,
) -> Result<Vec<usize>> {
    if n_neg == 0 {
        return Err(CtdgError::InvalidParameter("n_neg must be >= 1".into()));
    }
    let lo = match mode {
        NegativeMode::Uniform => 0,
        NegativeMode::Bipartite { users } => users,
    };
    let excluded: Vec<usize> = {
        let mut x: Vec<usize> = [e.src, e.dst].into_iter().filter(|&v| v >= lo && v < n).collect();
        x.sort_unstable();
        x.dedup();
        x
    };
    let pool = n.saturating_sub(lo).saturating_sub(excluded.len());
    if pool == 0 {
        return Err(CtdgError::InvalidParameter(format!(
            "no valid negative destination for event {}->{}",
            e.src, e.dst
        )));
    }
    Ok((0..n_neg)
        .map(|_| {
            // Index into the pool, then skip over the excluded ids.
            let mut v = lo + rng.gen_range(0..pool);
            for &x in &excluded {
                if v >= x {
                    v += 1;
                }
            }
            v
        })
        .collect())
}

/// `mean(−log σ(pos)) + mean(−log(1 − σ(neg)))`.
pub fn bce_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(CtdgError::Empty("bce needs positive and negative logits".into()));
    }
    let p = pos.iter().map(|&x| -log_sigmoid(x)).sum::<f64>() / pos.len() as f64;
    let n = neg.iter().map(|&x| -log_sigmoid(-x)).sum::<f64>() / neg.len() as f64;
    Ok(p + n)
}

/// Link head: two affine maps around the model activation.
pub(crate) fn decode<O: Ops>(ops: &mut O, config: &ModelConfig, hu: &O::V, hv: &O::V) -> O::V {
    let z = ops.concat(&[hu.clone(), hv.clone()]);
    let a = ops.matvec(ParamKey::DecW1, &z);
    let b = ops.param(ParamKey::DecB1);
    let s = ops.add(&a, &b);
    let r = ops.act(&s, config.activation);
    let o = ops.matvec(ParamKey::DecW2, &r);
    let b2 = ops.param(ParamKey::DecB2);
    ops.add(&o, &b2)
}

pub fn decoder_logit(hu: &[f64], hv: &[f64], params: &ModelParams, config: &ModelConfig) -> f64 {
    let mut ops = Eval::new(params);
    decode(&mut ops, config, &hu.to_vec(), &hv.to_vec())[0]
}

/// One training step's inputs. `pending` events are applied to memory
/// inside the differentiated computation; structure covers events before
/// `pending.end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pending: Range<usize>,
    pub query_time: f64,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

type MemMap<V> = BTreeMap<usize, (V, f64)>;

/// Applies `events` in order on top of `states` inside `ops`.
fn pending_memory<O: Ops>(
    ops: &mut O,
    config: &ModelConfig,
    states: &NodeStateTable,
    events: &[EventRecord],
) -> MemMap<O::V> {
    let mut mem: MemMap<O::V> = BTreeMap::new();
    for e in events {
        let cur = |ops: &mut O, u: usize| match mem.get(&u) {
            Some((v, t)) => (v.clone(), *t),
            None => (ops.input(states.memory(u).to_vec()), states.last_update(u)),
        };
        let (su, tu) = cur(ops, e.src);
        let (sv, tv) = cur(ops, e.dst);
        let feat = e.signed_features();
        let nu = mem_update_ops(ops, config, &su, &sv, config.time_norm.apply(e.time - tu), &feat);
        let nv = mem_update_ops(ops, config, &sv, &su, config.time_norm.apply(e.time - tv), &feat);
        mem.insert(e.src, (nu, e.time));
        mem.insert(e.dst, (nv, e.time));
    }
    mem
}

/// Logits for `pairs` plus the post-pending memory nodes.
fn batch_logits<O: Ops>(
    ops: &mut O,
    g: &TemporalGraph,
    config: &ModelConfig,
    states: &NodeStateTable,
    pending: Range<usize>,
    query_time: f64,
    pairs: &[(usize, usize)],
) -> (Vec<O::V>, MemMap<O::V>) {
    let mem = pending_memory(ops, config, states, &g.events()[pending.clone()]);
    let mut fwd: Forward<'_, O> = Forward::new(g.before(pending.end), config, query_time);
    let mut h0 = |ops: &mut O, u: usize| {
        let (s, last) = match mem.get(&u) {
            Some((v, t)) => (v.clone(), *t),
            None => (ops.input(states.memory(u).to_vec()), states.last_update(u)),
        };
        project_ops(ops, config, &s, config.time_norm.apply(query_time - last))
    };
    let logits = pairs
        .iter()
        .map(|&(u, v)| {
            let hu = fwd.embed(ops, &mut h0, u);
            let hv = fwd.embed(ops, &mut h0, v);
            decode(ops, config, &hu, &hv)
        })
        .collect();
    drop(fwd);
    (logits, mem)
}

fn check_batch(g: &TemporalGraph, states: &NodeStateTable, batch: &Batch) -> Result<()> {
    if batch.pending.end > g.event_count() || batch.pending.start > batch.pending.end {
        return Err(CtdgError::InvalidParameter(format!("pending range {:?} out of bounds", batch.pending)));
    }
    if states.n() != g.n() {
        return Err(CtdgError::ShapeMismatch(format!("{} states for {} nodes", states.n(), g.n())));
    }
    for &(u, v) in batch.positives.iter().chain(&batch.negatives) {
        g.check_node(u)?;
        g.check_node(v)?;
    }
    Ok(())
}

/// BCE of one batch, without gradients.
pub fn batch_loss(
    params: &ModelParams,
    batch: &Batch,
    g: &TemporalGraph,
    config: &ModelConfig,
    states: &NodeStateTable,
) -> Result<f64> {
    check_batch(g, states, batch)?;
    let mut ops = Eval::new(params);
    let pairs: Vec<_> = batch.positives.iter().chain(&batch.negatives).copied().collect();
    let (logits, _) = batch_logits(&mut ops, g, config, states, batch.pending.clone(), batch.query_time, &pairs);
    let flat: Vec<f64> = logits.iter().map(|l| l[0]).collect();
    let (p, n) = flat.split_at(batch.positives.len());
    bce_loss(p, n)
}

/// Loss and exact gradient of the batch BCE with respect to every block.
pub fn grad(
    params: &ModelParams,
    batch: &Batch,
    g: &TemporalGraph,
    config: &ModelConfig,
    states: &NodeStateTable,
) -> Result<(f64, ModelParams)> {
    grad_scaled(params, batch, g, config, states, 1.0)
}

/// Gradient of `scale · loss`.
pub fn grad_scaled(
    params: &ModelParams,
    batch: &Batch,
    g: &TemporalGraph,
    config: &ModelConfig,
    states: &NodeStateTable,
    scale: f64,
) -> Result<(f64, ModelParams)> {
    let (loss, grads, _) = grad_and_memory(params, batch, g, config, states, scale)?;
    Ok((loss, grads))
}

fn grad_and_memory(
    params: &ModelParams,
    batch: &Batch,
    g: &TemporalGraph,
    config: &ModelConfig,
    states: &NodeStateTable,
    scale: f64,
) -> Result<(f64, ModelParams, Vec<(usize, Vec<f64>, f64)>)> {
    check_batch(g, states, batch)?;
    let mut tape = Tape::new(params);
    let pairs: Vec<_> = batch.positives.iter().chain(&batch.negatives).copied().collect();
    let (logits, mem) = batch_logits(&mut tape, g, config, states, batch.pending.clone(), batch.query_time, &pairs);
    let values: Vec<f64> = logits.iter().map(|l| tape.value(l)[0]).collect();
    let (p, n) = values.split_at(batch.positives.len());
    let loss = bce_loss(p, n)?;
    let (np, nn) = (p.len() as f64, n.len() as f64);
    let seeds: Vec<(usize, Vec<f64>)> = logits
        .iter()
        .zip(&values)
        .enumerate()
        .map(|(i, (&node, &x))| {
            let d = if i < p.len() { (sigmoid(x) - 1.0) / np } else { sigmoid(x) / nn };
            (node, vec![scale * d])
        })
        .collect();
    let grads = tape.backward(&seeds);
    let memory = mem.iter().map(|(&u, (v, t))| (u, tape.value(v).to_vec(), *t)).collect();
    Ok((scale * loss, grads, memory))
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(p: &ModelParams) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, tc: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - tc.beta1.powi(self.t);
        let c2 = 1.0 - tc.beta2.powi(self.t);
        for key in params.keys() {
            let g = grads.block(key).values();
            let m = self.m.block_mut(key).values_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = tc.beta1 * *mi + (1.0 - tc.beta1) * gi;
            }
            let v = self.v.block_mut(key).values_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = tc.beta2 * *vi + (1.0 - tc.beta2) * gi * gi;
            }
            let (m, v) = (self.m.block(key).values(), self.v.block(key).values());
            for ((p, mi), vi) in params.block_mut(key).values_mut().iter_mut().zip(m).zip(v) {
                *p -= tc.lr * (mi / c1) / ((vi / c2).sqrt() + tc.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Config with the time normalization resolved on the training span.
    pub config: ModelConfig,
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Trace CSV; `with_timing = false` zeroes the wall-clock column so the
/// text is reproducible.
pub fn trace_to_csv(trace: &[TraceRow], with_timing: bool) -> String {
    let mut s = String::from("epoch,train_loss,val_metric,elapsed_s\n");
    for r in trace {
        let el = if with_timing { r.elapsed_s } else { 0.0 };
        s.push_str(&format!("{},{:e},{:e},{:.3}\n", r.epoch, r.train_loss, r.val_metric, el));
    }
    s
}

/// Extra inputs some tasks need.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskData<'a> {
    pub labels: Option<&'a [EdgeLabel]>,
    pub truth: Option<&'a GroundTruth>,
}

fn label_map(data: TaskData<'_>, task: Task) -> Result<HashMap<usize, bool>> {
    if task != Task::EdgeAuc {
        return Ok(HashMap::new());
    }
    let labels = data
        .labels
        .ok_or_else(|| CtdgError::MissingGroundTruth("edge_auc needs event labels".into()))?;
    Ok(labels.iter().map(|l| (l.event_idx, l.label == 1)).collect())
}

fn resolve_time_norm(config: &ModelConfig, events: &[EventRecord], n: usize) -> ModelConfig {
    let mut c = config.clone();
    if c.time_norm == TimeNorm::Auto {
        c.time_norm = TimeNorm::fit(events, n);
    }
    c
}

fn chunks(span: Range<usize>, size: usize) -> impl Iterator<Item = Range<usize>> {
    let end = span.end;
    span.step_by(size).map(move |a| a..(a + size).min(end))
}

pub fn train(log: &EventLog, config: &ModelConfig, tc: &TrainConfig, data: TaskData<'_>) -> Result<TrainOutcome> {
    tc.validate()?;
    let split = Split::from_fractions(log.len(), tc.split)?;
    train_with_split(log, config, tc, data, split)
}

/// Adam over chronological batches of the training span, early stopping on
/// the validation metric. Events after `split.val_end` are never read.
pub fn train_with_split(
    log: &EventLog,
    config: &ModelConfig,
    tc: &TrainConfig,
    data: TaskData<'_>,
    split: Split,
) -> Result<TrainOutcome> {
    tc.validate()?;
    config.validate()?;
    if split.val_end > log.len() {
        return Err(CtdgError::InvalidParameter("split exceeds log".into()));
    }
    let events = &log.events()[..split.val_end];
    let g = TemporalGraph::from_events(log.n(), log.feature_dim(), events.to_vec())?;
    let config = resolve_time_norm(config, &events[..split.train_end], log.n());
    let labels = label_map(data, tc.task)?;
    let mut params = init_params(&config, log.feature_dim(), tc.seed);
    let mut adam = Adam::new(&params);
    let start = Instant::now();

    let mut trace = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut stale = 0;
    for epoch in 1..=tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        let mut states = NodeStateTable::new(log.n(), config.hidden_dim, config.norm_cap);
        let mut pending = 0..0;
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for (bi, span) in chunks(split.train(), tc.batch_size).enumerate() {
            let batch = make_batch(&g, span.clone(), pending.clone(), tc, &labels, &mut rng)?;
            if batch.positives.is_empty() || batch.negatives.is_empty() {
                commit(&mut states, &g, pending.clone(), &params, &config)?;
            } else {
                let (loss, grads, memory) = grad_and_memory(&params, &batch, &g, &config, &states, 1.0)?;
                if !loss.is_finite() {
                    return Err(CtdgError::Diverged { epoch, batch: bi, loss });
                }
                for (u, s, t) in memory {
                    states.set(u, s, t);
                }
                adam.step(&mut params, &grads, tc);
                if !params.is_finite() {
                    return Err(CtdgError::Diverged { epoch, batch: bi, loss: f64::NAN });
                }
                loss_sum += loss;
                steps += 1;
            }
            pending = span;
        }
        commit(&mut states, &g, pending, &params, &config)?;
        let val = if split.val().is_empty() {
            -loss_sum / steps.max(1) as f64
        } else {
            let mut scorer = ModelScorer::resume(&g, &params, &config, states, split.train_end);
            evaluate_with(log, &mut scorer, split.val(), tc, data)?
        };
        trace.push(TraceRow {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_metric: val,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        if val > best.0 {
            best = (val, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                break;
            }
        }
    }
    let (best_val, best_epoch, params) = best;
    Ok(TrainOutcome {
        config,
        params,
        trace,
        best_epoch,
        best_val,
    })
}

fn commit(
    states: &mut NodeStateTable,
    g: &TemporalGraph,
    span: Range<usize>,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<()> {
    for i in span {
        apply_event(states, g.event(i), params, config)?;
    }
    Ok(())
}

fn make_batch(
    g: &TemporalGraph,
    span: Range<usize>,
    pending: Range<usize>,
    tc: &TrainConfig,
    labels: &HashMap<usize, bool>,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let query_time = g.event_time(span.end - 1);
    let (mut positives, mut negatives) = (Vec::new(), Vec::new());
    for i in span {
        let e = g.event(i);
        if tc.task == Task::EdgeAuc {
            match labels.get(&i) {
                Some(true) => positives.push((e.src, e.dst)),
                Some(false) => negatives.push((e.src, e.dst)),
                None => {}
            }
        } else {
            positives.push((e.src, e.dst));
            for v in sample_destinations(g.n(), e, tc.n_neg, rng, tc.negatives)? {
                negatives.push((e.src, v));
            }
        }
    }
    Ok(Batch {
        pending,
        query_time,
        positives,
        negatives,
    })
}

/// Link scores for candidate pairs once every event before `upto` is known.
pub trait LinkScorer {
    fn score(&mut self, upto: usize, query_time: f64, pairs: &[(usize, usize)]) -> Result<Vec<f64>>;
}

impl<F> LinkScorer for F
where
    F: FnMut(usize, f64, &[(usize, usize)]) -> Vec<f64>,
{
    fn score(&mut self, upto: usize, query_time: f64, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        Ok(self(upto, query_time, pairs))
    }
}

/// Streams a trained model forward, applying events as they are revealed.
pub struct ModelScorer<'a> {
    g: &'a TemporalGraph,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    states: NodeStateTable,
    applied: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(g: &'a TemporalGraph, params: &'a ModelParams, config: &'a ModelConfig) -> Self {
        let states = NodeStateTable::new(g.n(), config.hidden_dim, config.norm_cap);
        Self::resume(g, params, config, states, 0)
    }

    /// Continues from `states`, which already reflect events before `applied`.
    pub fn resume(
        g: &'a TemporalGraph,
        params: &'a ModelParams,
        config: &'a ModelConfig,
        states: NodeStateTable,
        applied: usize,
    ) -> Self {
        Self {
            g,
            params,
            config,
            states,
            applied,
        }
    }
}

impl LinkScorer for ModelScorer<'_> {
    fn score(&mut self, upto: usize, query_time: f64, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        if upto < self.applied || upto > self.g.event_count() {
            return Err(CtdgError::InvalidParameter(format!(
                "scorer at event {} cannot move to {upto}",
                self.applied
            )));
        }
        commit(&mut self.states, self.g, self.applied..upto, self.params, self.config)?;
        self.applied = upto;
        for &(u, v) in pairs {
            self.g.check_node(u)?;
            self.g.check_node(v)?;
        }
        let mut ops = Eval::new(self.params);
        let (logits, _) = batch_logits(&mut ops, self.g, self.config, &self.states, upto..upto, query_time, pairs);
        Ok(logits.into_iter().map(|l| l[0]).collect())
    }
}

fn eval_rng(tc: &TrainConfig, span: &Range<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x6576_616c);
    rng.set_stream(span.start as u64);
    rng
}

/// Task metric over `span`, querying the scorer batch by batch.
pub fn evaluate_with<S: LinkScorer>(
    log: &EventLog,
    scorer: &mut S,
    span: Range<usize>,
    tc: &TrainConfig,
    data: TaskData<'_>,
) -> Result<f64> {
    if span.is_empty() || span.end > log.len() {
        return Err(CtdgError::Empty(format!("evaluation span {span:?}")));
    }
    let ev = log.events();
    let mut rng = eval_rng(tc, &span);
    match tc.task {
        Task::LinkAuc | Task::LinkMrr => {
            let (mut scores, mut flags, mut queries) = (Vec::new(), Vec::new(), Vec::new());
            for b in chunks(span.clone(), tc.batch_size) {
                let mut pairs = Vec::new();
                for i in b.clone() {
                    let e = &ev[i];
                    for v in sample_destinations(log.n(), e, tc.eval_neg, &mut rng, tc.negatives)? {
                        pairs.push((e.src, v));
                    }
                    // True destination last, so ties rank it below negatives.
                    pairs.push((e.src, e.dst));
                }
                let s = scorer.score(b.start, ev[b.end - 1].time, &pairs)?;
                for q in s.chunks(tc.eval_neg + 1) {
                    if tc.task == Task::LinkAuc {
                        scores.extend_from_slice(q);
                        flags.extend((0..q.len()).map(|k| k == tc.eval_neg));
                    } else {
                        let mut rel = vec![0.0; q.len()];
                        rel[tc.eval_neg] = 1.0;
                        queries.push(RankedQuery::new(q.to_vec(), rel)?);
                    }
                }
            }
            if tc.task == Task::LinkAuc {
                auc(&scores, &flags)
            } else {
                mrr(&queries)
            }
        }
        Task::EdgeAuc => {
            let labels = label_map(data, Task::EdgeAuc)?;
            let (mut scores, mut flags) = (Vec::new(), Vec::new());
            for b in chunks(span.clone(), tc.batch_size) {
                let idx: Vec<usize> = b.clone().filter(|i| labels.contains_key(i)).collect();
                if idx.is_empty() {
                    continue;
                }
                let pairs: Vec<_> = idx.iter().map(|&i| (ev[i].src, ev[i].dst)).collect();
                scores.extend(scorer.score(b.start, ev[b.end - 1].time, &pairs)?);
                flags.extend(idx.iter().map(|i| labels[i]));
            }
            auc(&scores, &flags)
        }
        Task::CommunityNdcg => {
            let truth = data
                .truth
                .ok_or_else(|| CtdgError::MissingGroundTruth("community_ndcg needs ground truth".into()))?;
            community_ndcg(log, scorer, span, truth)
        }
    }
}

/// For each timestep starting inside `span` with at least two active
/// community pairs, scores those pairs by the mean link probability over
/// their cross node pairs, using only events of earlier timesteps, and takes
/// NDCG against the true sampling densities.
fn community_ndcg<S: LinkScorer>(log: &EventLog, scorer: &mut S, span: Range<usize>, truth: &GroundTruth) -> Result<f64> {
    let ev = log.events();
    let members: Vec<Vec<usize>> = (0..truth.communities).map(|c| truth.members(c)).collect();
    let mut values = Vec::new();
    let mut i = span.start;
    while i < span.end {
        let t = ev[i].time;
        let first = i == 0 || ev[i - 1].time < t;
        let next = i + ev[i..span.end].partition_point(|e| e.time <= t);
        let active: Vec<_> = if first && t >= 0.0 && t.fract() == 0.0 {
            truth.active.iter().filter(|p| p.timestep == t as usize).collect()
        } else {
            Vec::new()
        };
        if active.len() >= 2 {
            let mut pairs = Vec::new();
            for p in &active {
                for &u in &members[p.comm_a] {
                    for &v in &members[p.comm_b] {
                        pairs.push((u, v));
                    }
                }
            }
            let s = scorer.score(i, t, &pairs)?;
            let mut off = 0;
            let mut pair_scores = Vec::with_capacity(active.len());
            for p in &active {
                let k = members[p.comm_a].len() * members[p.comm_b].len();
                pair_scores.push(s[off..off + k].iter().map(|&x| sigmoid(x)).sum::<f64>() / k.max(1) as f64);
                off += k;
            }
            let q = RankedQuery::new(pair_scores, active.iter().map(|p| p.relevance).collect())?;
            values.push(ndcg(&q, None)?);
        }
        i = next;
    }
    if values.is_empty() {
        return Err(CtdgError::Empty("no timestep with two active pairs starts inside the span".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricBundle {
    pub task: Task,
    pub split: String,
    pub value: f64,
    pub span: (usize, usize),
}

/// Test-span metric of trained parameters, streaming the whole prefix.
pub fn evaluate(
    log: &EventLog,
    params: &ModelParams,
    config: &ModelConfig,
    tc: &TrainConfig,
    data: TaskData<'_>,
) -> Result<MetricBundle> {
    tc.validate()?;
    let split = Split::from_fractions(log.len(), tc.split)?;
    evaluate_span(log, params, config, tc, data, split.test(), "test")
}

pub fn evaluate_span(
    log: &EventLog,
    params: &ModelParams,
    config: &ModelConfig,
    tc: &TrainConfig,
    data: TaskData<'_>,
    span: Range<usize>,
    name: &str,
) -> Result<MetricBundle> {
    params.check_shapes(config)?;
    let g = TemporalGraph::from_events(log.n(), log.feature_dim(), log.events().to_vec())?;
    let mut scorer = ModelScorer::new(&g, params, config);
    let value = evaluate_with(log, &mut scorer, span.clone(), tc, data)?;
    Ok(MetricBundle {
        task: tc.task,
        split: name.to_string(),
        value,
        span: (span.start, span.end),
    })
}
