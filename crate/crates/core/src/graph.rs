//! Time-indexed adjacency over a fixed node set.
//!
//! Every event contributes one [`Interaction`] to each endpoint's list, so the
//! lists are symmetric and, because the log is time-sorted with insertion
//! order as tie-break, each list is ordered by event index and by time at
//! once. A [`Snapshot`] is therefore just an event-index cutoff.

use std::collections::VecDeque;

use crate::error::{CtdgError, Result};
use crate::events::{EventLog, EventRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub neighbor: usize,
    pub event: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    n: usize,
    feature_dim: usize,
    adjacency: Vec<Vec<Interaction>>,
    event_times: Vec<f64>,
    edge_features: Vec<Vec<f64>>,
    events: Vec<EventRecord>,
}

/// Hop distance; `Unreachable` orders after every finite distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Distance {
    Hops(usize),
    Unreachable,
}

impl Distance {
    pub fn hops(self) -> Option<usize> {
        match self {
            Distance::Hops(h) => Some(h),
            Distance::Unreachable => None,
        }
    }

    /// `true` when the distance is at most `l` hops.
    pub fn within(self, l: usize) -> bool {
        matches!(self, Distance::Hops(h) if h <= l)
    }
}

impl serde::Serialize for Distance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Distance::Hops(h) => s.serialize_u64(*h as u64),
            Distance::Unreachable => s.serialize_str("inf"),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Distance::Hops(h) => write!(f, "{h}"),
            Distance::Unreachable => write!(f, "inf"),
        }
    }
}

pub fn build_graph(log: &EventLog) -> TemporalGraph {
    TemporalGraph::build(log.n(), log.feature_dim(), log.events())
}

impl TemporalGraph {
    fn build(n: usize, feature_dim: usize, events: &[EventRecord]) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        let mut event_times = Vec::with_capacity(events.len());
        let mut edge_features = Vec::with_capacity(events.len());
        for (idx, e) in events.iter().enumerate() {
            adjacency[e.src].push(Interaction {
                neighbor: e.dst,
                event: idx,
                time: e.time,
            });
            adjacency[e.dst].push(Interaction {
                neighbor: e.src,
                event: idx,
                time: e.time,
            });
            event_times.push(e.time);
            edge_features.push(e.signed_features());
        }
        Self {
            n,
            feature_dim,
            adjacency,
            event_times,
            edge_features,
            events: events.to_vec(),
        }
    }

    /// Validates the raw events first; unsorted input reports the first inversion.
    pub fn from_events(n: usize, feature_dim: usize, events: Vec<EventRecord>) -> Result<Self> {
        let log = EventLog::new(n, feature_dim, events)?;
        Ok(build_graph(&log))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn event_count(&self) -> usize {
        self.event_times.len()
    }

    pub fn event(&self, event: usize) -> &EventRecord {
        &self.events[event]
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn event_time(&self, event: usize) -> f64 {
        self.event_times[event]
    }

    /// Sign-adjusted features of an event.
    pub fn edge_features(&self, event: usize) -> &[f64] {
        &self.edge_features[event]
    }

    pub fn interactions(&self, u: usize) -> &[Interaction] {
        &self.adjacency[u]
    }

    pub fn check_node(&self, u: usize) -> Result<()> {
        if u >= self.n {
            Err(CtdgError::NodeOutOfRange { node: u, n: self.n })
        } else {
            Ok(())
        }
    }

    /// Events with `time <= t`.
    pub fn at(&self, t: f64) -> Snapshot<'_> {
        let limit = self.event_times.partition_point(|&x| x <= t);
        Snapshot { graph: self, limit }
    }

    /// Events strictly before `event`.
    pub fn before(&self, event: usize) -> Snapshot<'_> {
        Snapshot {
            graph: self,
            limit: event.min(self.event_count()),
        }
    }

    /// Events up to and including `event`.
    pub fn through(&self, event: usize) -> Snapshot<'_> {
        Snapshot {
            graph: self,
            limit: (event + 1).min(self.event_count()),
        }
    }

    pub fn full(&self) -> Snapshot<'_> {
        Snapshot {
            graph: self,
            limit: self.event_count(),
        }
    }
}

/// Read-only view of the graph restricted to events with index `< limit`.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'g> {
    graph: &'g TemporalGraph,
    limit: usize,
}

impl<'g> Snapshot<'g> {
    pub fn graph(&self) -> &'g TemporalGraph {
        self.graph
    }

    pub fn n(&self) -> usize {
        self.graph.n
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Interactions of `u` inside the snapshot, oldest first.
    pub fn interactions(&self, u: usize) -> &'g [Interaction] {
        let list = &self.graph.adjacency[u];
        let end = list.partition_point(|x| x.event < self.limit);
        &list[..end]
    }

    /// The `k` most recent interactions of `u`, newest first.
    ///
    /// Equal timestamps are ordered by neighbor id and then by edge features,
    /// so the result does not depend on how simultaneous events were stored.
    pub fn neighborhood(&self, u: usize, k: usize) -> Vec<Interaction> {
        let list = self.interactions(u);
        if k == 0 || list.is_empty() {
            return Vec::new();
        }
        let start = if list.len() <= k {
            0
        } else {
            let cut = list[list.len() - k].time;
            list.partition_point(|x| x.time < cut)
        };
        let mut out: Vec<Interaction> = list[start..].to_vec();
        let g = self.graph;
        out.sort_by(|a, b| {
            b.time
                .total_cmp(&a.time)
                .then(a.neighbor.cmp(&b.neighbor))
                .then_with(|| {
                    let (fa, fb) = (g.edge_features(a.event), g.edge_features(b.event));
                    fa.iter()
                        .zip(fb)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then(a.event.cmp(&b.event))
        });
        out.truncate(k);
        out
    }

    /// Distinct neighbors, ascending.
    pub fn neighbors(&self, u: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.interactions(u).iter().map(|x| x.neighbor).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors(u).len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|u| self.degree(u)).collect()
    }

    /// BFS hop distances from `u`.
    pub fn distances_from(&self, u: usize) -> Vec<Distance> {
        self.distances_from_set(&[u])
    }

    /// BFS hop distances to the nearest of several sources.
    pub fn distances_from_set(&self, sources: &[usize]) -> Vec<Distance> {
        let n = self.n();
        let mut dist = vec![Distance::Unreachable; n];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] == Distance::Unreachable {
                dist[s] = Distance::Hops(0);
                queue.push_back(s);
            }
        }
        let adj: Vec<Vec<usize>> = (0..n).map(|v| self.neighbors(v)).collect();
        while let Some(v) = queue.pop_front() {
            let Distance::Hops(d) = dist[v] else { unreachable!() };
            for &w in &adj[v] {
                if dist[w] == Distance::Unreachable {
                    dist[w] = Distance::Hops(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn distance(&self, u: usize, v: usize) -> Distance {
        self.distances_from(u)[v]
    }

    pub fn normalized_adjacency(&self) -> NormalizedAdjacency {
        NormalizedAdjacency::from_snapshot(self)
    }
}

/// Self-loop augmented, symmetrically normalized adjacency `Â` with entries
/// `1/√((1+deg a)(1+deg b))` for `b ∈ N(a) ∪ {a}`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormalizedAdjacency {
    pub fn from_snapshot(s: &Snapshot<'_>) -> Self {
        let neighbors: Vec<Vec<usize>> = (0..s.n()).map(|u| s.neighbors(u)).collect();
        let deg: Vec<f64> = neighbors.iter().map(|nb| nb.len() as f64).collect();
        let rows = neighbors
            .iter()
            .enumerate()
            .map(|(a, nb)| {
                let mut row: Vec<(usize, f64)> = nb
                    .iter()
                    .chain(std::iter::once(&a))
                    .map(|&b| (b, 1.0 / ((1.0 + deg[a]) * (1.0 + deg[b])).sqrt()))
                    .collect();
                row.sort_by_key(|&(b, _)| b);
                row
            })
            .collect();
        Self { rows }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, a: usize) -> &[(usize, f64)] {
        &self.rows[a]
    }

    /// `Â x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(b, w)| w * x[b]).sum())
            .collect()
    }

    /// `Â^L 1` for every node.
    pub fn walk_sums(&self, l: usize) -> Vec<f64> {
        let mut x = vec![1.0; self.n()];
        for _ in 0..l {
            x = self.apply(&x);
        }
        x
    }

    /// Column `i` of `Â^L`; by symmetry entry `u` equals `(Â^L)_{u,i}`.
    pub fn pair_weights_to(&self, i: usize, l: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.n()];
        x[i] = 1.0;
        for _ in 0..l {
            x = self.apply(&x);
        }
        x
    }
}

pub fn temporal_neighborhood(
    g: &TemporalGraph,
    u: usize,
    t: f64,
    k: usize,
) -> Result<Vec<(usize, &[f64], f64)>> {
    g.check_node(u)?;
    if k == 0 {
        return Err(CtdgError::InvalidParameter("neighborhood size must be >= 1".into()));
    }
    Ok(g
        .at(t)
        .neighborhood(u, k)
        .into_iter()
        .map(|x| (x.neighbor, g.edge_features(x.event), x.time))
        .collect())
}

pub fn degree_at(g: &TemporalGraph, u: usize, t: f64) -> Result<usize> {
    g.check_node(u)?;
    Ok(g.at(t).degree(u))
}

pub fn shortest_path_distance(g: &TemporalGraph, u: usize, v: usize, t: f64) -> Result<Distance> {
    g.check_node(u)?;
    g.check_node(v)?;
    Ok(g.at(t).distance(u, v))
}

/// `ŵ_u = (Â^L 1)_u` on the snapshot at `t`; `L = 0` gives 1.
pub fn normalized_walk_sum(g: &TemporalGraph, u: usize, l: usize, t: f64) -> Result<f64> {
    g.check_node(u)?;
    Ok(g.at(t).normalized_adjacency().walk_sums(l)[u])
}

/// `ŵ_{u,i} = (Â^L)_{u,i}`; zero whenever `L < d(u, i)`.
pub fn normalized_pair_weight(g: &TemporalGraph, u: usize, i: usize, l: usize, t: f64) -> Result<f64> {
    g.check_node(u)?;
    g.check_node(i)?;
    Ok(g.at(t).normalized_adjacency().pair_weights_to(i, l)[u])
}
