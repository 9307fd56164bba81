//! Temporal message passing model: memory updates for event endpoints,
//! temporal projection for inactive nodes, and `L` GCN-like or attention
//! layers over the truncated temporal neighborhood.

mod forward;
mod ops;
mod params;
mod state;

pub use forward::{
    apply_event, attention_layer, embed, embed_from_h0, gcn_layer, mem_update, temporal_project,
    EventUpdate, Forward, H0Fn,
};
pub(crate) use forward::{mem_update_ops, project_ops};
pub use ops::{Eval, Ops, Tape};
pub use params::{init_params, ModelParams, ParamKey, RunTag};
pub use state::NodeStateTable;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CtdgError, Result};
use crate::numerics::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Gcn,
    Attention,
    /// No message passing: the embedding is the projected memory.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Identity,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    None,
    Linear,
}

/// Maps raw elapsed time to the `[0, 1]` step used by projection and memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeNorm {
    /// Any positive elapsed time is one full step.
    Unit,
    /// `clamp(dt / scale, 0, 1)`.
    Scale { scale: f64 },
    /// Scale fitted on training data (95th percentile of per-node gaps).
    /// Behaves like `Unit` until resolved.
    #[default]
    Auto,
}

impl TimeNorm {
    #[inline]
    pub fn apply(&self, dt: f64) -> f64 {
        let dt = dt.max(0.0);
        match *self {
            TimeNorm::Unit | TimeNorm::Auto => {
                if dt > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            TimeNorm::Scale { scale } => (dt / scale).clamp(0.0, 1.0),
        }
    }

    /// Fits a scale from the per-node inter-event gaps of `events`.
    pub fn fit(events: &[crate::events::EventRecord], n: usize) -> TimeNorm {
        let mut last = vec![f64::NAN; n];
        let mut gaps = Vec::new();
        for e in events {
            for u in [e.src, e.dst] {
                if !last[u].is_nan() {
                    gaps.push(e.time - last[u]);
                }
                last[u] = e.time;
            }
        }
        gaps.retain(|&g| g > 0.0);
        if gaps.is_empty() {
            return TimeNorm::Unit;
        }
        gaps.sort_by(f64::total_cmp);
        let idx = ((gaps.len() as f64 * 0.95).ceil() as usize).clamp(1, gaps.len()) - 1;
        TimeNorm::Scale { scale: gaps[idx] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub aggregator: Aggregator,
    pub memory: MemoryKind,
    pub projection: Projection,
    pub activation: Activation,
    /// Norm cap on memory states and initial representations.
    pub norm_cap: f64,
    #[serde(default = "default_neighbor_k")]
    pub neighbor_k: usize,
    #[serde(default)]
    pub use_edge_features: bool,
    #[serde(default)]
    pub time_norm: TimeNorm,
}

fn default_neighbor_k() -> usize {
    10
}

/// Slope of the leaky relu applied to attention logits.
pub const ATTENTION_LOGIT_SLOPE: f64 = 0.2;

impl ModelConfig {
    /// The configuration matching the assumptions under which the flow bounds hold.
    pub fn theorem_mode(aggregator: Aggregator, layers: usize, hidden_dim: usize) -> Self {
        Self {
            layers,
            hidden_dim,
            aggregator,
            memory: MemoryKind::Identity,
            projection: Projection::Linear,
            activation: Activation::LeakyRelu { slope: 0.01 },
            norm_cap: 1.0,
            neighbor_k: 10,
            use_edge_features: false,
            time_norm: TimeNorm::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtdgError::InvalidParameter(m));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if !(self.norm_cap > 0.0 && self.norm_cap.is_finite()) {
            return bad(format!("norm_cap must be positive, got {}", self.norm_cap));
        }
        if self.neighbor_k == 0 {
            return bad("neighbor_k must be >= 1".into());
        }
        if let TimeNorm::Scale { scale } = self.time_norm {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad(format!("time scale must be positive, got {scale}"));
            }
        }
        self.activation.validate()
    }

    /// Checks the theorem-mode assumptions; the bounds are only claimed there.
    pub fn check_theorem_mode(&self) -> Result<()> {
        self.validate()?;
        let mut why = Vec::new();
        if self.projection != Projection::Linear {
            why.push("projection must be linear");
        }
        if self.memory != MemoryKind::Identity {
            why.push("memory must be identity");
        }
        if self.time_norm != TimeNorm::Unit {
            why.push("time_norm must be unit");
        }
        if self.norm_cap > 1.0 {
            why.push("norm_cap must be <= 1");
        }
        if self.aggregator == Aggregator::None {
            why.push("aggregator must be gcn or attention");
        }
        if why.is_empty() {
            Ok(())
        } else {
            Err(CtdgError::NotTheoremMode(why.join("; ")))
        }
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_norm_variants() {
        assert_eq!(TimeNorm::Unit.apply(0.0), 0.0);
        assert_eq!(TimeNorm::Unit.apply(1e-9), 1.0);
        let s = TimeNorm::Scale { scale: 4.0 };
        assert_eq!(s.apply(2.0), 0.5);
        assert_eq!(s.apply(40.0), 1.0);
        assert_eq!(s.apply(-1.0), 0.0);
    }

    #[test]
    fn fitted_scale_is_gap_percentile() {
        use crate::events::EventRecord;
        let events: Vec<_> = (0..21).map(|i| EventRecord::new(0, 1, i as f64)).collect();
        assert_eq!(TimeNorm::fit(&events, 2), TimeNorm::Scale { scale: 1.0 });
        assert_eq!(TimeNorm::fit(&events[..1], 2), TimeNorm::Unit);
    }

    #[test]
    fn theorem_mode_checks() {
        let c = ModelConfig::theorem_mode(Aggregator::Gcn, 2, 4);
        c.check_theorem_mode().unwrap();
        let mut bad = c.clone();
        bad.memory = MemoryKind::Gated;
        assert!(matches!(bad.check_theorem_mode(), Err(CtdgError::NotTheoremMode(_))));
        let mut bad = c.clone();
        bad.norm_cap = 2.0;
        assert!(bad.check_theorem_mode().is_err());
        assert_ne!(c.fingerprint(), bad.fingerprint());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let c = ModelConfig::theorem_mode(Aggregator::Attention, 1, 3);
        let mut v = serde_json::to_value(&c).unwrap();
        let back: ModelConfig = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, c);
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
