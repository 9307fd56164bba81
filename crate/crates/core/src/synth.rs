//! Synthetic event streams with known structure: community SBM streams,
//! long-range chain labels, and bipartite user/item streams.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtdgError, Result};
use crate::events::{EventLog, EventRecord};

fn default_horizon_range() -> (usize, usize) {
    (6, 20)
}

/// Community stream parameters. Communities are dense at t = 0 and pairs of
/// communities get connected over random horizons afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub communities: usize,
    pub community_size: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Community pairs drawn per timestep.
    pub pairs_per_step: usize,
    /// Connection horizon drawn uniformly from `[lo, hi)`.
    #[serde(default = "default_horizon_range")]
    pub horizon_range: (usize, usize),
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            communities: 100,
            community_size: 30,
            p_intra: 0.25,
            p_inter: 0.025,
            pairs_per_step: 4,
            horizon_range: default_horizon_range(),
            steps: 100,
            seed: 0,
        }
    }
}

impl SbmSpec {
    pub fn n(&self) -> usize {
        self.communities * self.community_size
    }

    pub fn pair_count(&self) -> usize {
        self.communities * self.communities.saturating_sub(1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtdgError::InvalidParameter(m));
        if self.communities < 2 || self.community_size < 1 {
            return bad("need at least 2 communities of at least 1 node".into());
        }
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.pairs_per_step == 0 {
            return bad("pairs_per_step must be >= 1".into());
        }
        let (lo, hi) = self.horizon_range;
        if lo == 0 || lo >= hi {
            return bad(format!("horizon range [{lo}, {hi}) is empty or starts at 0"));
        }
        if self.pairs_per_step * self.steps > self.pair_count() {
            return Err(CtdgError::Infeasible(format!(
                "{} pairs per step over {} steps needs {} community pairs, only {} exist",
                self.pairs_per_step,
                self.steps,
                self.pairs_per_step * self.steps,
                self.pair_count()
            )));
        }
        Ok(())
    }
}

/// One community pair active at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivePair {
    pub timestep: usize,
    pub comm_a: usize,
    pub comm_b: usize,
    /// Per-step connection probability of each cross node pair.
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Community of each node.
    pub membership: Vec<usize>,
    pub communities: usize,
    /// Sorted by timestep, then draw order.
    pub active: Vec<ActivePair>,
}

impl GroundTruth {
    /// Contiguous blocks of `community_size` nodes.
    pub fn contiguous(communities: usize, community_size: usize, active: Vec<ActivePair>) -> Self {
        Self {
            membership: (0..communities * community_size).map(|u| u / community_size).collect(),
            communities,
            active,
        }
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.membership.len()).filter(|&u| self.membership[u] == c).collect()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.active.iter().map(|a| a.timestep).collect();
        t.dedup();
        t
    }

    /// Relevance of every community pair `(a < b)` at `timestep`, in
    /// lexicographic pair order; inactive pairs get 0.
    pub fn relevance_at(&self, timestep: usize) -> Vec<((usize, usize), f64)> {
        let mut out = Vec::with_capacity(self.communities * (self.communities - 1) / 2);
        for a in 0..self.communities {
            for b in a + 1..self.communities {
                out.push(((a, b), 0.0));
            }
        }
        for p in self.active.iter().filter(|p| p.timestep == timestep) {
            let (a, b) = (p.comm_a.min(p.comm_b), p.comm_a.max(p.comm_b));
            let idx = out.iter().position(|x| x.0 == (a, b)).expect("pair in range");
            out[idx].1 = p.relevance;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "timestep,comm_a,comm_b,relevance")?;
        for p in &self.active {
            writeln!(w, "{},{},{},{}", p.timestep, p.comm_a, p.comm_b, p.relevance)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Reads the sidecar; membership comes from the generating spec.
    pub fn read_csv<R: Read>(reader: R, communities: usize, community_size: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| CtdgError::Csv { line: 1, reason: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        if header != ["timestep", "comm_a", "comm_b", "relevance"] {
            return Err(CtdgError::Csv {
                line: 1,
                reason: format!("unexpected header {}", header.join(",")),
            });
        }
        let mut active = Vec::new();
        for row in rdr.deserialize::<ActivePair>() {
            let p = row.map_err(|e| CtdgError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            if p.comm_a >= communities || p.comm_b >= communities || p.relevance < 0.0 {
                return Err(CtdgError::Csv {
                    line: 0,
                    reason: format!("bad ground-truth row {p:?}"),
                });
            }
            active.push(p);
        }
        Ok(Self::contiguous(communities, community_size, active))
    }
}

pub fn gen_sbm_ctdg(spec: &SbmSpec) -> Result<(EventLog, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nb = spec.community_size;
    let mut events = Vec::new();
    for c in 0..spec.communities {
        for i in 0..nb {
            for j in i + 1..nb {
                if rng.gen_bool(spec.p_intra) {
                    events.push(EventRecord::new(c * nb + i, c * nb + j, 0.0));
                }
            }
        }
    }

    let mut undrawn: Vec<(usize, usize)> = Vec::with_capacity(spec.pair_count());
    for a in 0..spec.communities {
        for b in a + 1..spec.communities {
            undrawn.push((a, b));
        }
    }
    // (a, b, last active step, per-step density)
    let mut live: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut active = Vec::new();
    for t in 1..=spec.steps {
        for _ in 0..spec.pairs_per_step {
            let (a, b) = undrawn.swap_remove(rng.gen_range(0..undrawn.len()));
            let horizon = rng.gen_range(spec.horizon_range.0..spec.horizon_range.1);
            live.push((a, b, t + horizon - 1, spec.p_inter / horizon as f64));
        }
        live.retain(|x| x.2 >= t);
        for &(a, b, _, p) in &live {
            active.push(ActivePair {
                timestep: t,
                comm_a: a,
                comm_b: b,
                relevance: p,
            });
            for i in 0..nb {
                for j in 0..nb {
                    if rng.gen_bool(p) {
                        events.push(EventRecord::new(a * nb + i, b * nb + j, t as f64));
                    }
                }
            }
        }
    }
    let log = EventLog::new(spec.n(), 0, events)?;
    Ok((log, GroundTruth::contiguous(spec.communities, nb, active)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Label is the sign of the attribute at the far end of the chain.
    Sign,
    /// Label says whether the far attribute equals the query node's own.
    Match,
}

fn default_interleave() -> usize {
    256
}

/// Chains `q - x1 - ... - x_{len-1}`; the far node receives an attribute
/// after the chain is built, then `q` fires a labeled query event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongRangeSpec {
    pub chains: usize,
    pub chain_len: usize,
    pub horizon: f64,
    pub label_rule: LabelRule,
    /// Chains built side by side; consecutive steps of one chain sit this
    /// many events apart, so they never share a training batch.
    #[serde(default = "default_interleave")]
    pub interleave: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LongRangeSpec {
    fn default() -> Self {
        Self {
            chains: 1000,
            chain_len: 4,
            horizon: 10_000.0,
            label_rule: LabelRule::Match,
            interleave: default_interleave(),
            seed: 0,
        }
    }
}

impl LongRangeSpec {
    /// Nodes per chain: the path, the far attribute leaf and the query partner.
    pub fn nodes_per_chain(&self) -> usize {
        self.chain_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain_len < 3 {
            return Err(CtdgError::InvalidParameter("chain_len must be >= 3".into()));
        }
        if self.chains == 0 || self.interleave == 0 {
            return Err(CtdgError::InvalidParameter("chains and interleave must be >= 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(CtdgError::InvalidParameter("horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeLabel {
    pub event_idx: usize,
    pub label: u8,
}

pub fn labels_to_csv(labels: &[EdgeLabel]) -> String {
    let mut s = String::from("event_idx,label\n");
    for l in labels {
        s.push_str(&format!("{},{}\n", l.event_idx, l.label));
    }
    s
}

pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<EdgeLabel>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<EdgeLabel>() {
        let l = row.map_err(|e| CtdgError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        if l.label > 1 {
            return Err(CtdgError::Csv {
                line: 0,
                reason: format!("label must be 0 or 1, got {}", l.label),
            });
        }
        out.push(l);
    }
    Ok(out)
}

/// Edge features carry the attribute (±1) on attribute events and 0
/// elsewhere. Events come in topological-temporal order within each block:
/// chain steps outward from `q`, then attributes, then queries.
pub fn gen_long_range(spec: &LongRangeSpec) -> Result<(EventLog, Vec<EdgeLabel>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u8> = (0..spec.chains).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let own: Vec<f64> = (0..spec.chains)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();

    let per = spec.nodes_per_chain();
    let len = spec.chain_len;
    // (src, dst, feature, label)
    let mut rows: Vec<(usize, usize, f64, Option<u8>)> = Vec::new();
    for start in (0..spec.chains).step_by(spec.interleave) {
        let block = start..(start + spec.interleave).min(spec.chains);
        for k in 0..len - 1 {
            for c in block.clone() {
                rows.push((c * per + k, c * per + k + 1, 0.0, None));
            }
        }
        for c in block.clone() {
            let (far, leaf, partner) = (c * per + len - 1, c * per + len, c * per + len + 1);
            let label = labels[c];
            let attr = match spec.label_rule {
                LabelRule::Sign => if label == 1 { 1.0 } else { -1.0 },
                LabelRule::Match => if label == 1 { own[c] } else { -own[c] },
            };
            rows.push((far, leaf, attr, None));
            if spec.label_rule == LabelRule::Match {
                rows.push((c * per, partner, own[c], None));
            }
        }
        for c in block {
            rows.push((c * per, c * per + len + 1, 0.0, Some(labels[c])));
        }
    }

    let m = rows.len() as f64;
    let mut events = Vec::with_capacity(rows.len());
    let mut out = Vec::with_capacity(spec.chains);
    for (i, (s, d, f, label)) in rows.into_iter().enumerate() {
        let t = spec.horizon * (i + 1) as f64 / m;
        events.push(EventRecord::new(s, d, t).with_features(vec![f]));
        if let Some(label) = label {
            out.push(EdgeLabel { event_idx: i, label });
        }
    }
    Ok((EventLog::new(spec.chains * per, 1, events)?, out))
}

fn default_mean_gap() -> f64 {
    1.0
}

/// Users are nodes `0..users`, items follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BipartiteSpec {
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub repeat_prob: f64,
    /// Leading events that always draw a fresh pair.
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "default_mean_gap")]
    pub mean_gap: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BipartiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(CtdgError::InvalidParameter("need at least one user and one item".into()));
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return Err(CtdgError::InvalidParameter(format!(
                "repeat_prob = {} outside [0, 1]",
                self.repeat_prob
            )));
        }
        if !(self.mean_gap > 0.0 && self.mean_gap.is_finite()) {
            return Err(CtdgError::InvalidParameter("mean_gap must be positive".into()));
        }
        Ok(())
    }
}

/// Each event repeats a seen pair with probability `repeat_prob`, otherwise
/// draws a uniform user/item pair. Gaps are exponential.
pub fn gen_bipartite(spec: &BipartiteSpec) -> Result<EventLog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: Vec<(usize, usize)> = Vec::new();
    let mut seen_set = HashSet::new();
    let mut t = 0.0;
    let mut events = Vec::with_capacity(spec.events);
    for i in 0..spec.events {
        t += -spec.mean_gap * (1.0 - rng.gen::<f64>()).ln();
        let repeat = i >= spec.warmup && !seen.is_empty() && rng.gen_bool(spec.repeat_prob);
        let (u, v) = if repeat {
            seen[rng.gen_range(0..seen.len())]
        } else {
            (rng.gen_range(0..spec.users), spec.users + rng.gen_range(0..spec.items))
        };
        if seen_set.insert((u, v)) {
            seen.push((u, v));
        }
        events.push(EventRecord::new(u, v, t));
    }
    EventLog::new(spec.users + spec.items, 0, events)
}

/// Fraction of distinct unordered pairs after `split_time` that never occur
/// at or before it.
pub fn surprise_index(log: &EventLog, split_time: f64) -> Result<f64> {
    let ev = log.events();
    let (Some(first), Some(last)) = (ev.first(), ev.last()) else {
        return Err(CtdgError::Empty("event log".into()));
    };
    if !(first.time..=last.time).contains(&split_time) {
        return Err(CtdgError::InvalidParameter(format!(
            "split time {split_time} outside [{}, {}]",
            first.time, last.time
        )));
    }
    let cut = log.count_until(split_time);
    let train: HashSet<(usize, usize)> = ev[..cut].iter().map(EventRecord::pair).collect();
    let test: HashSet<(usize, usize)> = ev[cut..].iter().map(EventRecord::pair).collect();
    if test.is_empty() {
        return Err(CtdgError::Empty("no events after the split".into()));
    }
    Ok(test.difference(&train).count() as f64 / test.len() as f64)
}

/// Dataset description as stored in spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Sbm(SbmSpec),
    LongRange(LongRangeSpec),
    Bipartite(BipartiteSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub log: EventLog,
    pub truth: Option<GroundTruth>,
    pub labels: Option<Vec<EdgeLabel>>,
}

impl DatasetSpec {
    pub fn seed(&self) -> u64 {
        match self {
            Self::Sbm(s) => s.seed,
            Self::LongRange(s) => s.seed,
            Self::Bipartite(s) => s.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::Sbm(s) => s.seed = seed,
            Self::LongRange(s) => s.seed = seed,
            Self::Bipartite(s) => s.seed = seed,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        Ok(match self {
            Self::Sbm(s) => {
                let (log, truth) = gen_sbm_ctdg(s)?;
                Dataset { log, truth: Some(truth), labels: None }
            }
            Self::LongRange(s) => {
                let (log, labels) = gen_long_range(s)?;
                Dataset { log, truth: None, labels: Some(labels) }
            }
            Self::Bipartite(s) => Dataset {
                log: gen_bipartite(s)?,
                truth: None,
                labels: None,
            },
        })
    }
}
