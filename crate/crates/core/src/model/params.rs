use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Aggregator, MemoryKind, ModelConfig, Projection};
use crate::error::{CtdgError, Result};
use crate::numerics::DenseMatrix;

/// Names one parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Layer(usize),
    TimeWeight,
    AttnVector,
    EdgeWeight,
    MemWeight,
    MemBias,
    GateWeight,
    GateBias,
    DecW1,
    DecB1,
    DecW2,
    DecB2,
}

impl ParamKey {
    pub fn name(&self) -> String {
        match self {
            ParamKey::Layer(l) => format!("layer_{l}"),
            ParamKey::TimeWeight => "time_weight".into(),
            ParamKey::AttnVector => "attn_vector".into(),
            ParamKey::EdgeWeight => "edge_weight".into(),
            ParamKey::MemWeight => "mem_weight".into(),
            ParamKey::MemBias => "mem_bias".into(),
            ParamKey::GateWeight => "gate_weight".into(),
            ParamKey::GateBias => "gate_bias".into(),
            ParamKey::DecW1 => "dec_w1".into(),
            ParamKey::DecB1 => "dec_b1".into(),
            ParamKey::DecW2 => "dec_w2".into(),
            ParamKey::DecB2 => "dec_b2".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if let Some(l) = s.strip_prefix("layer_") {
            return l.parse().ok().map(ParamKey::Layer);
        }
        Some(match s {
            "time_weight" => ParamKey::TimeWeight,
            "attn_vector" => ParamKey::AttnVector,
            "edge_weight" => ParamKey::EdgeWeight,
            "mem_weight" => ParamKey::MemWeight,
            "mem_bias" => ParamKey::MemBias,
            "gate_weight" => ParamKey::GateWeight,
            "gate_bias" => ParamKey::GateBias,
            "dec_w1" => ParamKey::DecW1,
            "dec_b1" => ParamKey::DecB1,
            "dec_w2" => ParamKey::DecW2,
            "dec_b2" => ParamKey::DecB2,
            _ => return None,
        })
    }

    fn is_bias(&self) -> bool {
        matches!(
            self,
            ParamKey::MemBias | ParamKey::GateBias | ParamKey::DecB1 | ParamKey::DecB2
        )
    }
}

/// Every learnable block. Vectors are stored as single-row (or single-column
/// for biases) matrices so gradients share one container type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub feature_dim: usize,
    pub layers: Vec<DenseMatrix>,
    pub time_weight: DenseMatrix,
    pub attn_vector: DenseMatrix,
    pub edge_weight: DenseMatrix,
    pub mem_weight: DenseMatrix,
    pub mem_bias: DenseMatrix,
    pub gate_weight: DenseMatrix,
    pub gate_bias: DenseMatrix,
    pub dec_w1: DenseMatrix,
    pub dec_b1: DenseMatrix,
    pub dec_w2: DenseMatrix,
    pub dec_b2: DenseMatrix,
}

fn shape_of(key: ParamKey, h: usize, d: usize) -> (usize, usize) {
    let raw = 2 * h + 1 + d;
    match key {
        ParamKey::Layer(_) | ParamKey::TimeWeight => (h, h),
        ParamKey::AttnVector => (1, 2 * h),
        ParamKey::EdgeWeight => (1, d + 1),
        ParamKey::MemWeight => (h, raw),
        ParamKey::MemBias => (h, 1),
        ParamKey::GateWeight => (1, raw),
        ParamKey::GateBias => (1, 1),
        ParamKey::DecW1 => (h, 2 * h),
        ParamKey::DecB1 => (h, 1),
        ParamKey::DecW2 => (1, h),
        ParamKey::DecB2 => (1, 1),
    }
}

fn all_keys(layers: usize) -> Vec<ParamKey> {
    let mut keys: Vec<ParamKey> = (0..layers).map(ParamKey::Layer).collect();
    keys.extend([
        ParamKey::TimeWeight,
        ParamKey::AttnVector,
        ParamKey::EdgeWeight,
        ParamKey::MemWeight,
        ParamKey::MemBias,
        ParamKey::GateWeight,
        ParamKey::GateBias,
        ParamKey::DecW1,
        ParamKey::DecB1,
        ParamKey::DecW2,
        ParamKey::DecB2,
    ]);
    keys
}

/// Glorot-uniform weights, zero biases; deterministic in `(config, feature_dim, seed)`.
pub fn init_params(config: &ModelConfig, feature_dim: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(config, feature_dim);
    for key in all_keys(config.layers) {
        if key.is_bias() {
            continue;
        }
        let m = p.block_mut(key);
        let (rows, cols) = m.shape();
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        for v in m.values_mut() {
            *v = rng.gen_range(-limit..=limit);
        }
    }
    p
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig, feature_dim: usize) -> Self {
        let h = config.hidden_dim;
        let z = |k| {
            let (r, c) = shape_of(k, h, feature_dim);
            DenseMatrix::zeros(r, c)
        };
        Self {
            feature_dim,
            layers: (0..config.layers).map(|l| z(ParamKey::Layer(l))).collect(),
            time_weight: z(ParamKey::TimeWeight),
            attn_vector: z(ParamKey::AttnVector),
            edge_weight: z(ParamKey::EdgeWeight),
            mem_weight: z(ParamKey::MemWeight),
            mem_bias: z(ParamKey::MemBias),
            gate_weight: z(ParamKey::GateWeight),
            gate_bias: z(ParamKey::GateBias),
            dec_w1: z(ParamKey::DecW1),
            dec_b1: z(ParamKey::DecB1),
            dec_w2: z(ParamKey::DecW2),
            dec_b2: z(ParamKey::DecB2),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for key in z.keys() {
            z.block_mut(key).values_mut().fill(0.0);
        }
        z
    }

    pub fn hidden_dim(&self) -> usize {
        self.time_weight.rows()
    }

    pub fn block(&self, key: ParamKey) -> &DenseMatrix {
        match key {
            ParamKey::Layer(l) => &self.layers[l],
            ParamKey::TimeWeight => &self.time_weight,
            ParamKey::AttnVector => &self.attn_vector,
            ParamKey::EdgeWeight => &self.edge_weight,
            ParamKey::MemWeight => &self.mem_weight,
            ParamKey::MemBias => &self.mem_bias,
            ParamKey::GateWeight => &self.gate_weight,
            ParamKey::GateBias => &self.gate_bias,
            ParamKey::DecW1 => &self.dec_w1,
            ParamKey::DecB1 => &self.dec_b1,
            ParamKey::DecW2 => &self.dec_w2,
            ParamKey::DecB2 => &self.dec_b2,
        }
    }

    pub fn block_mut(&mut self, key: ParamKey) -> &mut DenseMatrix {
        match key {
            ParamKey::Layer(l) => &mut self.layers[l],
            ParamKey::TimeWeight => &mut self.time_weight,
            ParamKey::AttnVector => &mut self.attn_vector,
            ParamKey::EdgeWeight => &mut self.edge_weight,
            ParamKey::MemWeight => &mut self.mem_weight,
            ParamKey::MemBias => &mut self.mem_bias,
            ParamKey::GateWeight => &mut self.gate_weight,
            ParamKey::GateBias => &mut self.gate_bias,
            ParamKey::DecW1 => &mut self.dec_w1,
            ParamKey::DecB1 => &mut self.dec_b1,
            ParamKey::DecW2 => &mut self.dec_w2,
            ParamKey::DecB2 => &mut self.dec_b2,
        }
    }

    /// Every stored block, in a fixed order.
    pub fn keys(&self) -> Vec<ParamKey> {
        all_keys(self.layers.len())
    }

    /// Blocks that influence the output under `config`.
    pub fn active_keys(&self, config: &ModelConfig) -> Vec<ParamKey> {
        self.keys()
            .into_iter()
            .filter(|k| match k {
                ParamKey::Layer(_) => config.aggregator != Aggregator::None,
                ParamKey::TimeWeight => config.projection == Projection::Linear,
                ParamKey::AttnVector => config.aggregator == Aggregator::Attention,
                ParamKey::EdgeWeight => {
                    config.aggregator == Aggregator::Attention && config.use_edge_features
                }
                ParamKey::GateWeight | ParamKey::GateBias => config.memory == MemoryKind::Gated,
                _ => true,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.keys()
            .into_iter()
            .all(|k| self.block(k).values().iter().all(|v| v.is_finite()))
    }

    /// Checks every block against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.layers {
            return Err(CtdgError::ShapeMismatch(format!(
                "{} layer blocks for a {}-layer config",
                self.layers.len(),
                config.layers
            )));
        }
        for key in self.keys() {
            let want = shape_of(key, config.hidden_dim, self.feature_dim);
            let got = self.block(key).shape();
            if got != want {
                return Err(CtdgError::ShapeMismatch(format!(
                    "{} is {got:?}, expected {want:?}",
                    key.name()
                )));
            }
        }
        Ok(())
    }

    /// JSON container with exact hex-encoded `f64` bits and a config fingerprint.
    pub fn to_json(&self, config: &ModelConfig) -> String {
        self.to_json_tagged(config, None)
    }

    /// As [`to_json`](Self::to_json), recording which run produced the file.
    pub fn to_json_tagged(&self, config: &ModelConfig, run: Option<&RunTag>) -> String {
        let file = ParamFile {
            format: PARAM_FORMAT.into(),
            run: run.cloned(),
            config_fingerprint: config.fingerprint(),
            config: config.clone(),
            feature_dim: self.feature_dim,
            blocks: self
                .keys()
                .into_iter()
                .map(|k| {
                    let m = self.block(k);
                    BlockEntry {
                        name: k.name(),
                        rows: m.rows(),
                        cols: m.cols(),
                        values: m
                            .values()
                            .iter()
                            .map(|v| format!("{:016x}", v.to_bits()))
                            .collect(),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<(ModelConfig, ModelParams)> {
        let bad = |m: String| CtdgError::ParamFile(m);
        let file: ParamFile = serde_json::from_str(text)?;
        if file.format != PARAM_FORMAT {
            return Err(bad(format!("unknown format {:?}", file.format)));
        }
        if file.config.fingerprint() != file.config_fingerprint {
            return Err(bad("config fingerprint does not match embedded config".into()));
        }
        file.config.validate()?;
        let mut p = ModelParams::zeros(&file.config, file.feature_dim);
        let mut seen = std::collections::BTreeSet::new();
        for b in file.blocks {
            let key = ParamKey::parse(&b.name).ok_or_else(|| bad(format!("unknown block {}", b.name)))?;
            if matches!(key, ParamKey::Layer(l) if l >= file.config.layers) {
                return Err(bad(format!("block {} exceeds layer count", b.name)));
            }
            let values = b
                .values
                .iter()
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| bad(format!("bad hex value {h:?} in {}", b.name)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let m = DenseMatrix::new(b.rows, b.cols, values)?;
            if m.shape() != p.block(key).shape() {
                return Err(CtdgError::ShapeMismatch(format!(
                    "{} is {:?}, expected {:?}",
                    b.name,
                    m.shape(),
                    p.block(key).shape()
                )));
            }
            *p.block_mut(key) = m;
            seen.insert(key);
        }
        if seen.len() != p.keys().len() {
            return Err(bad("missing parameter blocks".into()));
        }
        Ok((file.config, p))
    }
}

/// Experiment fingerprint and seed carried by saved parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunTag {
    pub fingerprint: String,
    pub seed: u64,
}

const PARAM_FORMAT: &str = "ctdg-params/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamFile {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<RunTag>,
    config_fingerprint: String,
    config: ModelConfig,
    feature_dim: usize,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<String>,
}
