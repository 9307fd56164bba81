use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctdg_core::bounds::verify_bounds;
use ctdg_core::flow::flow_profile;
use ctdg_core::model::{init_params, ModelConfig, ModelParams, NodeStateTable, RunTag, TimeNorm};
use ctdg_core::synth::{read_labels_csv, DatasetSpec, EdgeLabel, GroundTruth};
use ctdg_core::train::{evaluate_span, trace_to_csv, train, MetricBundle, Split, TaskData, TrainConfig};
use ctdg_core::{CtdgError, EventLog, TemporalGraph};
use serde::Serialize;

use crate::config::{require, ExperimentConfig, Section};
use crate::output::{OutputEntry, RunDir};
use crate::{CliError, Command, Invocation};

/// What a finished command reports back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub outputs: Vec<OutputEntry>,
    pub message: String,
}

pub fn run(cmd: Command, inv: &Invocation) -> Result<RunSummary, CliError> {
    let mut cfg = ExperimentConfig::load(&inv.config)?;
    if let Some(s) = inv.seed {
        cfg.seed = s;
    }
    let out = match (&inv.out, &cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => cfg.resolve(o),
        (None, None) => return Err(CliError::BadInput("no output directory: pass --out or set `out`".into())),
    };
    if inv.seeds == 0 {
        return Err(CliError::BadInput("--seeds must be >= 1".into()));
    }
    if inv.seeds > 1 && !matches!(cmd, Command::Train | Command::Eval) {
        return Err(CliError::BadInput(format!("`{}` runs a single seed", cmd.as_str())));
    }
    match cmd {
        Command::Gen => gen(&cfg, &out),
        Command::Train => train_cmd(&cfg, &out, inv.seeds),
        Command::Eval => eval_cmd(&cfg, &out, inv.seeds),
        Command::VerifyBounds => verify_cmd(&cfg, &out),
        Command::FlowProfile => flow_cmd(&cfg, &out),
    }
}

struct Loaded {
    log: EventLog,
    truth: Option<GroundTruth>,
    labels: Option<Vec<EdgeLabel>>,
}

impl Loaded {
    fn task_data(&self) -> TaskData<'_> {
        TaskData {
            labels: self.labels.as_deref(),
            truth: self.truth.as_ref(),
        }
    }
}

#[derive(Serialize)]
struct DatasetInfo<'a> {
    fingerprint: &'a str,
    seed: u64,
    kind: &'static str,
    nodes: usize,
    events: usize,
    feature_dim: usize,
}

fn kind(spec: &DatasetSpec) -> &'static str {
    match spec {
        DatasetSpec::Sbm(_) => "sbm",
        DatasetSpec::LongRange(_) => "long_range",
        DatasetSpec::Bipartite(_) => "bipartite",
    }
}

fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    cfg.only("gen", &[Section::Dataset])?;
    let mut cfg = cfg.clone();
    let spec = cfg
        .dataset
        .as_mut()
        .ok_or_else(|| CliError::BadInput("`gen` needs a `dataset` section".into()))?;
    spec.set_seed(cfg.seed);
    let data = spec.generate()?;
    let kind = kind(spec);
    let fp = cfg.fingerprint();
    let mut dir = RunDir::create(out, &fp)?;
    dir.write_csv("events.csv", cfg.seed, &data.log.to_csv_string())?;
    if let Some(t) = &data.truth {
        dir.write_csv("ground_truth.csv", cfg.seed, &t.to_csv_string())?;
    }
    if let Some(l) = &data.labels {
        dir.write_csv("labels.csv", cfg.seed, &ctdg_core::synth::labels_to_csv(l))?;
    }
    dir.write_json(
        "dataset.json",
        &DatasetInfo {
            fingerprint: &fp,
            seed: cfg.seed,
            kind,
            nodes: data.log.n(),
            events: data.log.len(),
            feature_dim: data.log.feature_dim(),
        },
    )?;
    let message = format!("{} events over {} nodes", data.log.len(), data.log.n());
    let outputs = dir.finish("gen", cfg.seed, &cfg)?;
    Ok(RunSummary {
        out: out.to_path_buf(),
        outputs,
        message,
    })
}

fn missing(path: &Path) -> CliError {
    CliError::BadInput(format!("dataset not found: {}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::BadInput(format!("cannot read {}: {e}", path.display())))
}

/// Reads a `gen` directory or a bare event CSV.
fn load_path(path: &Path) -> Result<Loaded, CliError> {
    if !path.exists() {
        return Err(missing(path));
    }
    if path.is_file() {
        let log = EventLog::read_csv(read_text(path)?.as_bytes(), None)?;
        return Ok(Loaded {
            log,
            truth: None,
            labels: None,
        });
    }
    let manifest: serde_json::Value = serde_json::from_str(&read_text(&path.join("manifest.json"))?)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", path.join("manifest.json").display())))?;
    let spec: DatasetSpec = serde_json::from_value(manifest["config"]["dataset"].clone())
        .map_err(|e| CliError::BadInput(format!("{}: no dataset spec ({e})", path.display())))?;
    let info: serde_json::Value = serde_json::from_str(&read_text(&path.join("dataset.json"))?)
        .map_err(|e| CliError::BadInput(e.to_string()))?;
    let nodes = info["nodes"].as_u64().map(|n| n as usize);
    let events = path.join("events.csv");
    if !events.exists() {
        return Err(missing(&events));
    }
    let log = EventLog::read_csv(read_text(&events)?.as_bytes(), nodes)?;
    let truth = match (&spec, path.join("ground_truth.csv")) {
        (DatasetSpec::Sbm(s), p) if p.exists() => {
            Some(GroundTruth::read_csv(read_text(&p)?.as_bytes(), s.communities, s.community_size)?)
        }
        _ => None,
    };
    let lp = path.join("labels.csv");
    let labels = if lp.exists() {
        Some(read_labels_csv(read_text(&lp)?.as_bytes())?)
    } else {
        None
    };
    Ok(Loaded { log, truth, labels })
}

enum Source {
    Inline(DatasetSpec),
    Fixed(Loaded),
}

impl Source {
    fn new(cfg: &ExperimentConfig, command: &str) -> Result<Self, CliError> {
        match (&cfg.dataset, &cfg.data) {
            (Some(spec), None) => Ok(Source::Inline(spec.clone())),
            (None, Some(p)) => Ok(Source::Fixed(load_path(&cfg.resolve(p))?)),
            _ => Err(CliError::BadInput(format!(
                "`{command}` needs exactly one of `dataset` or `data`"
            ))),
        }
    }

    /// Inline specs are redrawn with each run seed; files stay fixed.
    fn get(&self, seed: u64) -> Result<std::borrow::Cow<'_, Loaded>, CliError> {
        match self {
            Source::Fixed(l) => Ok(std::borrow::Cow::Borrowed(l)),
            Source::Inline(spec) => {
                let mut spec = spec.clone();
                spec.set_seed(seed);
                let d = spec.generate()?;
                Ok(std::borrow::Cow::Owned(Loaded {
                    log: d.log,
                    truth: d.truth,
                    labels: d.labels,
                }))
            }
        }
    }
}

impl Clone for Loaded {
    fn clone(&self) -> Self {
        Loaded {
            log: self.log.clone(),
            truth: self.truth.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, values }
    }
}

#[derive(Serialize)]
struct Failure {
    seed: u64,
    error: String,
}

#[derive(Serialize)]
struct Summary<'a> {
    fingerprint: &'a str,
    seed: u64,
    label: &'a str,
    task: &'static str,
    seeds: Vec<u64>,
    completed: Vec<u64>,
    metrics: BTreeMap<String, Stat>,
    failed: Vec<Failure>,
}

#[derive(Serialize)]
struct SeedMetrics<'a> {
    fingerprint: &'a str,
    seed: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    metrics: Vec<MetricBundle>,
}

#[derive(Serialize)]
struct Timing {
    seed: u64,
    elapsed_s: Vec<f64>,
}

/// Collects per-seed values into the sweep summary.
struct Sweep {
    task: &'static str,
    seeds: Vec<u64>,
    completed: Vec<u64>,
    values: BTreeMap<String, Vec<f64>>,
    failed: Vec<Failure>,
}

impl Sweep {
    fn new(task: &'static str, master: u64, k: usize) -> Self {
        Sweep {
            task,
            seeds: (0..k as u64).map(|i| master + i).collect(),
            completed: Vec::new(),
            values: BTreeMap::new(),
            failed: Vec::new(),
        }
    }

    fn record(&mut self, seed: u64, metrics: &[MetricBundle]) {
        self.completed.push(seed);
        for m in metrics {
            self.values
                .entry(format!("{}_{}", m.split, m.task.as_str()))
                .or_default()
                .push(m.value);
        }
    }

    fn finish(self, dir: &mut RunDir, cfg: &ExperimentConfig, fp: &str) -> Result<String, CliError> {
        let metrics: BTreeMap<String, Stat> = self.values.into_iter().map(|(k, v)| (k, Stat::of(v))).collect();
        let message = metrics
            .iter()
            .map(|(k, s)| format!("{k} {:.4} ± {:.4}", s.mean, s.std))
            .collect::<Vec<_>>()
            .join(", ");
        let n_failed = self.failed.len();
        let all_failed = self.completed.is_empty();
        dir.write_json(
            "summary.json",
            &Summary {
                fingerprint: fp,
                seed: cfg.seed,
                label: &cfg.label,
                task: self.task,
                seeds: self.seeds,
                completed: self.completed,
                metrics,
                failed: self.failed,
            },
        )?;
        if all_failed {
            return Err(CliError::Internal(format!("all {n_failed} run(s) failed")));
        }
        Ok(message)
    }
}

/// Fits `Auto` time normalization on the training span, as training does.
fn resolve_time_norm(config: &ModelConfig, log: &EventLog, tc: &TrainConfig) -> Result<ModelConfig, CliError> {
    let mut c = config.clone();
    if c.time_norm == TimeNorm::Auto {
        let split = Split::from_fractions(log.len(), tc.split)?;
        c.time_norm = TimeNorm::fit(&log.events()[split.train()], log.n());
    }
    Ok(c)
}

fn both_spans(
    log: &EventLog,
    params: &ModelParams,
    config: &ModelConfig,
    tc: &TrainConfig,
    data: TaskData<'_>,
) -> Result<Vec<MetricBundle>, CliError> {
    let split = Split::from_fractions(log.len(), tc.split)?;
    let mut out = Vec::new();
    if !split.val().is_empty() {
        out.push(evaluate_span(log, params, config, tc, data, split.val(), "val")?);
    }
    out.push(evaluate_span(log, params, config, tc, data, split.test(), "test")?);
    Ok(out)
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path, k: usize) -> Result<RunSummary, CliError> {
    cfg.only("train", &[Section::Dataset, Section::Data, Section::Model, Section::Train])?;
    let model = require(&cfg.model, "model", "train")?;
    let tc0 = require(&cfg.train, "train", "train")?;
    model.validate()?;
    tc0.validate()?;
    let source = Source::new(cfg, "train")?;
    let fp = cfg.fingerprint();
    let mut dir = RunDir::create(out, &fp)?;
    let mut sweep = Sweep::new(tc0.task.as_str(), cfg.seed, k);
    for seed in sweep.seeds.clone() {
        let data = source.get(seed)?;
        let mut tc = tc0.clone();
        tc.seed = seed;
        let sub = format!("seed_{seed}");
        match train(&data.log, model, &tc, data.task_data()) {
            Ok(res) => {
                let metrics = both_spans(&data.log, &res.params, &res.config, &tc, data.task_data())?;
                let tag = RunTag {
                    fingerprint: fp.clone(),
                    seed,
                };
                dir.write(
                    &format!("{sub}/params.json"),
                    res.params.to_json_tagged(&res.config, Some(&tag)).as_bytes(),
                )?;
                dir.write_csv(&format!("{sub}/trace.csv"), seed, &trace_to_csv(&res.trace, false))?;
                dir.write_json(
                    &format!("{sub}/metrics.json"),
                    &SeedMetrics {
                        fingerprint: &fp,
                        seed,
                        status: "ok",
                        error: None,
                        best_epoch: Some(res.best_epoch),
                        metrics: metrics.clone(),
                    },
                )?;
                let timing = Timing {
                    seed,
                    elapsed_s: res.trace.iter().map(|r| r.elapsed_s).collect(),
                };
                dir.write_untracked(
                    &format!("{sub}/timing.json"),
                    serde_json::to_string_pretty(&timing).expect("timing serializes").as_bytes(),
                )?;
                sweep.record(seed, &metrics);
            }
            Err(e @ CtdgError::Diverged { .. }) => {
                dir.write_json(
                    &format!("{sub}/metrics.json"),
                    &SeedMetrics {
                        fingerprint: &fp,
                        seed,
                        status: "diverged",
                        error: Some(e.to_string()),
                        best_epoch: None,
                        metrics: Vec::new(),
                    },
                )?;
                sweep.failed.push(Failure {
                    seed,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    finish_sweep(sweep, dir, cfg, &fp, "train", out)
}

fn finish_sweep(
    sweep: Sweep,
    mut dir: RunDir,
    cfg: &ExperimentConfig,
    fp: &str,
    command: &str,
    out: &Path,
) -> Result<RunSummary, CliError> {
    let result = sweep.finish(&mut dir, cfg, fp);
    let outputs = dir.finish(command, cfg.seed, cfg)?;
    Ok(RunSummary {
        out: out.to_path_buf(),
        outputs,
        message: result?,
    })
}

fn eval_cmd(cfg: &ExperimentConfig, out: &Path, k: usize) -> Result<RunSummary, CliError> {
    cfg.only(
        "eval",
        &[Section::Dataset, Section::Data, Section::Model, Section::Train, Section::Params],
    )?;
    let tc0 = require(&cfg.train, "train", "eval")?;
    tc0.validate()?;
    let saved = match (&cfg.params, &cfg.model) {
        (Some(p), None) => Some(read_params(&cfg.resolve(p))?),
        (None, Some(m)) => {
            m.validate()?;
            None
        }
        _ => return Err(CliError::BadInput("`eval` needs exactly one of `params` or `model`".into())),
    };
    let source = Source::new(cfg, "eval")?;
    let fp = cfg.fingerprint();
    let mut dir = RunDir::create(out, &fp)?;
    let mut sweep = Sweep::new(tc0.task.as_str(), cfg.seed, k);
    for seed in sweep.seeds.clone() {
        let data = source.get(seed)?;
        let mut tc = tc0.clone();
        tc.seed = seed;
        // Without saved parameters, score with a fresh random model.
        let (config, params) = match &saved {
            Some((c, p)) => (c.clone(), p.clone()),
            None => {
                let c = resolve_time_norm(cfg.model.as_ref().expect("checked above"), &data.log, &tc)?;
                let p = init_params(&c, data.log.feature_dim(), seed);
                (c, p)
            }
        };
        let metrics = both_spans(&data.log, &params, &config, &tc, data.task_data())?;
        dir.write_json(
            &format!("seed_{seed}/metrics.json"),
            &SeedMetrics {
                fingerprint: &fp,
                seed,
                status: "ok",
                error: None,
                best_epoch: None,
                metrics: metrics.clone(),
            },
        )?;
        sweep.record(seed, &metrics);
    }
    finish_sweep(sweep, dir, cfg, &fp, "eval", out)
}

fn read_params(path: &Path) -> Result<(ModelConfig, ModelParams), CliError> {
    if !path.exists() {
        return Err(CliError::BadInput(format!("parameter file not found: {}", path.display())));
    }
    Ok(ModelParams::from_json(&read_text(path)?)?)
}

#[derive(Serialize)]
struct BoundReportFile<'a> {
    fingerprint: &'a str,
    seed: u64,
    spec: &'a ctdg_core::bounds::VerifySpec,
    summary: &'a ctdg_core::bounds::BoundSummary,
}

fn verify_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    cfg.only("verify-bounds", &[Section::Verify])?;
    let mut spec = require(&cfg.verify, "verify", "verify-bounds")?.clone();
    spec.seed = cfg.seed;
    let report = verify_bounds(&spec)?;
    let fp = cfg.fingerprint();
    let mut dir = RunDir::create(out, &fp)?;
    dir.write_json(
        "bound_report.json",
        &BoundReportFile {
            fingerprint: &fp,
            seed: cfg.seed,
            spec: &report.spec,
            summary: &report.summary,
        },
    )?;
    dir.write_csv("bound_records.csv", cfg.seed, &report.to_csv())?;
    let outputs = dir.finish("verify-bounds", cfg.seed, cfg)?;
    let s = &report.summary;
    if s.violations > 0 {
        return Err(CliError::Violations(s.violations));
    }
    Ok(RunSummary {
        out: out.to_path_buf(),
        outputs,
        message: format!(
            "{} records ({} near, {} far), 0 violations, min gap {:e}",
            s.records, s.near.count, s.far.count, s.min_gap
        ),
    })
}

#[derive(Serialize)]
struct Reach {
    layers: usize,
    nonzero_fraction: f64,
}

#[derive(Serialize)]
struct FlowSummary<'a> {
    fingerprint: &'a str,
    seed: u64,
    events: (usize, usize),
    trained: bool,
    reach: Vec<Reach>,
}

fn flow_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    cfg.only(
        "flow-profile",
        &[Section::Dataset, Section::Data, Section::Model, Section::Params, Section::Flow],
    )?;
    let spec = require(&cfg.flow, "flow", "flow-profile")?;
    if spec.layers.is_empty() || spec.layers.contains(&0) || spec.events == 0 {
        return Err(CliError::BadInput("flow needs layer counts >= 1 and events >= 1".into()));
    }
    let top_l = *spec.layers.iter().max().expect("non-empty");
    let source = Source::new(cfg, "flow-profile")?;
    let data = source.get(cfg.seed)?;
    let log = &data.log;
    let start = log.len().saturating_sub(spec.events);
    if start == log.len() {
        return Err(CliError::BadInput("event log is empty".into()));
    }

    let (top, full) = match (&cfg.params, &cfg.model) {
        (Some(p), None) => {
            let (c, p) = read_params(&cfg.resolve(p))?;
            if top_l > c.layers {
                return Err(CliError::BadInput(format!(
                    "saved model has {} layer(s), profile asks for {top_l}",
                    c.layers
                )));
            }
            (c, p)
        }
        (None, Some(m)) => {
            let mut c = m.clone();
            c.layers = top_l;
            c.validate()?;
            if c.time_norm == TimeNorm::Auto {
                c.time_norm = TimeNorm::fit(&log.events()[..start], log.n());
            }
            let p = init_params(&c, log.feature_dim(), cfg.seed);
            (c, p)
        }
        _ => return Err(CliError::BadInput("`flow-profile` needs exactly one of `params` or `model`".into())),
    };
    let models: Vec<(ModelConfig, ModelParams)> = spec
        .layers
        .iter()
        .map(|&l| {
            let mut c = top.clone();
            c.layers = l;
            let mut p = full.clone();
            p.layers.truncate(l);
            (c, p)
        })
        .collect();

    // The prefix is replayed inside the profile, so memory starts empty.
    let states = NodeStateTable::new(log.n(), top.hidden_dim, top.norm_cap);
    let g = TemporalGraph::from_events(log.n(), log.feature_dim(), log.events().to_vec())?;
    let stream: Vec<usize> = (start..log.len()).collect();
    let profile = flow_profile(&g, &stream, &models, &states)?;

    let fp = cfg.fingerprint();
    let mut dir = RunDir::create(out, &fp)?;
    dir.write_csv("flow_profile.csv", cfg.seed, &profile.to_csv())?;
    let reach: Vec<Reach> = profile
        .nonzero_fraction
        .iter()
        .map(|&(layers, f)| Reach {
            layers,
            nonzero_fraction: f,
        })
        .collect();
    let message = reach
        .iter()
        .map(|r| format!("L={} moved {:.3}", r.layers, r.nonzero_fraction))
        .collect::<Vec<_>>()
        .join(", ");
    dir.write_json(
        "flow_summary.json",
        &FlowSummary {
            fingerprint: &fp,
            seed: cfg.seed,
            events: (start, log.len()),
            trained: cfg.params.is_some(),
            reach,
        },
    )?;
    let outputs = dir.finish("flow-profile", cfg.seed, cfg)?;
    Ok(RunSummary {
        out: out.to_path_buf(),
        outputs,
        message,
    })
}
