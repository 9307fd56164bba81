use crate::error::{CtdgError, Result};
use crate::numerics::norm_clip;

/// Per-node memory vectors and the time of each node's last update.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStateTable {
    memory: Vec<Vec<f64>>,
    last_update: Vec<f64>,
    norm_cap: f64,
}

impl NodeStateTable {
    /// Zero memory, last update at time 0.
    pub fn new(n: usize, hidden_dim: usize, norm_cap: f64) -> Self {
        Self {
            memory: vec![vec![0.0; hidden_dim]; n],
            last_update: vec![0.0; n],
            norm_cap,
        }
    }

    /// Builds a table from explicit states; each is clipped to the cap.
    pub fn from_states(states: Vec<Vec<f64>>, last_update: Vec<f64>, norm_cap: f64) -> Result<Self> {
        if states.len() != last_update.len() {
            return Err(CtdgError::ShapeMismatch(format!(
                "{} states but {} timestamps",
                states.len(),
                last_update.len()
            )));
        }
        if let Some(first) = states.first() {
            if states.iter().any(|s| s.len() != first.len()) {
                return Err(CtdgError::ShapeMismatch("state dimensions differ".into()));
            }
        }
        Ok(Self {
            memory: states.iter().map(|s| norm_clip(s, norm_cap)).collect(),
            last_update,
            norm_cap,
        })
    }

    pub fn n(&self) -> usize {
        self.memory.len()
    }

    pub fn norm_cap(&self) -> f64 {
        self.norm_cap
    }

    pub fn memory(&self, u: usize) -> &[f64] {
        &self.memory[u]
    }

    pub fn last_update(&self, u: usize) -> f64 {
        self.last_update[u]
    }

    pub fn memories(&self) -> &[Vec<f64>] {
        &self.memory
    }

    /// Stores a new state (clipped) and update time.
    pub fn set(&mut self, u: usize, state: Vec<f64>, time: f64) {
        self.memory[u] = norm_clip(&state, self.norm_cap);
        self.last_update[u] = time;
    }
}
