//! Empirical information flow: how far each node's final embedding moves
//! when one event is processed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CtdgError, Result};
use crate::graph::{Distance, TemporalGraph};
use crate::model::{apply_event, embed_from_h0, temporal_project, EventUpdate, ModelConfig, ModelParams, NodeStateTable};
use crate::numerics::distance;

/// Which structure the pre-event embedding sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowMode {
    /// Pre-event embeddings use the graph without the new edge.
    #[default]
    Insert,
    /// Both embeddings use the graph with the new edge, so only the memory
    /// and projection channels move representations.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowBucket {
    pub hop: Distance,
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowReport {
    pub event: usize,
    /// `d_Y(f_u(G_{t+1}), f_u(G_t))` per node.
    pub displacement: Vec<f64>,
    /// Hop distance to the nearest endpoint.
    pub distance: Vec<Distance>,
    pub buckets: Vec<FlowBucket>,
    pub update: EventUpdate,
}

impl FlowReport {
    pub fn nonzero_count(&self) -> usize {
        self.displacement.iter().filter(|&&d| d > 0.0).count()
    }
}

pub fn empirical_flow(
    g: &TemporalGraph,
    event: usize,
    params: &ModelParams,
    config: &ModelConfig,
    states: &NodeStateTable,
) -> Result<FlowReport> {
    empirical_flow_with(g, event, params, config, states, FlowMode::Insert)
}

/// Embedding displacement caused by event `event`, with `states` current just
/// before it. Both embeddings are evaluated at the event time; inactive nodes
/// advance by the normalized gap since the previous event.
pub fn empirical_flow_with(
    g: &TemporalGraph,
    event: usize,
    params: &ModelParams,
    config: &ModelConfig,
    states: &NodeStateTable,
    mode: FlowMode,
) -> Result<FlowReport> {
    if event >= g.event_count() {
        return Err(CtdgError::InvalidParameter(format!(
            "event {event} out of range ({} events)",
            g.event_count()
        )));
    }
    let rec = g.event(event);
    let t = rec.time;
    let prev = if event == 0 { 0.0 } else { g.event_time(event - 1) };
    let step = config.time_norm.apply(t - prev);

    let pre_h0: Vec<Vec<f64>> = states.memories().to_vec();
    let mut after = states.clone();
    let update = apply_event(&mut after, rec, params, config)?;
    let mut post_h0 = Vec::with_capacity(g.n());
    for u in 0..g.n() {
        if u == rec.src || u == rec.dst {
            post_h0.push(after.memory(u).to_vec());
        } else {
            post_h0.push(temporal_project(states.memory(u), step, params, config)?);
        }
    }

    let post_snap = g.through(event);
    let pre_snap = match mode {
        FlowMode::Insert => g.before(event),
        FlowMode::Static => post_snap,
    };
    let pre = embed_from_h0(pre_snap, t, &pre_h0, params, config);
    let post = embed_from_h0(post_snap, t, &post_h0, params, config);
    let displacement: Vec<f64> = pre.iter().zip(&post).map(|(a, b)| distance(a, b)).collect();
    let dist = post_snap.distances_from_set(&[rec.src, rec.dst]);
    let buckets = bucketize(displacement.iter().copied().zip(dist.iter().copied()));
    Ok(FlowReport {
        event,
        displacement,
        distance: dist,
        buckets,
        update,
    })
}

fn bucketize(items: impl Iterator<Item = (f64, Distance)>) -> Vec<FlowBucket> {
    let mut acc: BTreeMap<Distance, (usize, f64, f64)> = BTreeMap::new();
    for (d, hop) in items {
        let e = acc.entry(hop).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += d;
        e.2 = e.2.max(d);
    }
    acc.into_iter()
        .map(|(hop, (count, sum, max))| FlowBucket {
            hop,
            count,
            mean: sum / count as f64,
            max,
        })
        .collect()
}

/// Flow reports for the events in `stream`, replaying every event from the
/// start of the log so states are current before each measured event.
pub fn stream_reports(
    g: &TemporalGraph,
    stream: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    initial: &NodeStateTable,
    mode: FlowMode,
) -> Result<Vec<FlowReport>> {
    let mut wanted: Vec<usize> = stream.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let Some(&last) = wanted.last() else {
        return Ok(Vec::new());
    };
    if last >= g.event_count() {
        return Err(CtdgError::InvalidParameter(format!("event {last} out of range")));
    }
    let mut states = initial.clone();
    let mut out = Vec::with_capacity(wanted.len());
    let mut next = 0;
    for idx in 0..=last {
        if wanted[next] == idx {
            out.push(empirical_flow_with(g, idx, params, config, &states, mode)?);
            next += 1;
        }
        apply_event(&mut states, g.event(idx), params, config)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub layers: usize,
    pub hop: Distance,
    pub mean_disp: f64,
    pub max_disp: f64,
    pub normalized_mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowProfile {
    pub rows: Vec<ProfileRow>,
    /// Per layer count, the fraction of measured (event, node) pairs that moved.
    pub nonzero_fraction: Vec<(usize, f64)>,
}

impl FlowProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("L,hop_distance,mean_disp,max_disp,normalized_mean,count\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                r.layers, r.hop, r.mean_disp, r.max_disp, r.normalized_mean, r.count
            ));
        }
        s
    }
}

/// Hop-bucketed mean displacement per model, normalized by each model's
/// largest bucket mean.
pub fn flow_profile(
    g: &TemporalGraph,
    stream: &[usize],
    models: &[(ModelConfig, ModelParams)],
    initial: &NodeStateTable,
) -> Result<FlowProfile> {
    let mut rows = Vec::new();
    let mut nonzero_fraction = Vec::new();
    for (config, params) in models {
        let reports = stream_reports(g, stream, params, config, initial, FlowMode::Insert)?;
        let pairs = reports
            .iter()
            .flat_map(|r| r.displacement.iter().copied().zip(r.distance.iter().copied()));
        let buckets = bucketize(pairs);
        let top = buckets.iter().map(|b| b.mean).fold(0.0, f64::max);
        for b in buckets {
            rows.push(ProfileRow {
                layers: config.layers,
                hop: b.hop,
                mean_disp: b.mean,
                max_disp: b.max,
                normalized_mean: if top > 0.0 { b.mean / top } else { 0.0 },
                count: b.count,
            });
        }
        let total: usize = reports.iter().map(|r| r.displacement.len()).sum();
        let moved: usize = reports.iter().map(|r| r.nonzero_count()).sum();
        nonzero_fraction.push((config.layers, moved as f64 / total.max(1) as f64));
    }
    Ok(FlowProfile { rows, nonzero_fraction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `E_u[d_Y]` over (event, node) pairs drawn
/// uniformly without replacement; asking for every pair gives the exact mean.
#[allow(clippy::too_many_arguments)]
pub fn expected_flow(
    g: &TemporalGraph,
    stream: &[usize],
    params: &ModelParams,
    config: &ModelConfig,
    initial: &NodeStateTable,
    samples: usize,
    seed: u64,
) -> Result<FlowEstimate> {
    if stream.is_empty() {
        return Err(CtdgError::Empty("event stream".into()));
    }
    if samples == 0 {
        return Err(CtdgError::InvalidParameter("samples must be >= 1".into()));
    }
    let reports = stream_reports(g, stream, params, config, initial, FlowMode::Insert)?;
    let all: Vec<f64> = reports.iter().flat_map(|r| r.displacement.iter().copied()).collect();
    let picked: Vec<f64> = if samples >= all.len() {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, all.len(), samples)
            .into_iter()
            .map(|i| all[i])
            .collect()
    };
    let k = picked.len() as f64;
    let mean = picked.iter().sum::<f64>() / k;
    let var = if picked.len() > 1 {
        picked.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(FlowEstimate {
        mean,
        std_error: (var / k).sqrt(),
        samples: picked.len(),
    })
}
