//! Continuous-time dynamic graph laboratory: event logs, a temporal message
//! passing model, information-flow measurement and bounds, synthetic data,
//! self-supervised training and ranking metrics.

pub mod error;
pub mod bounds;
pub mod events;
pub mod flow;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{CtdgError, Result};
pub use events::{EventLog, EventRecord, Sign};
pub use graph::{build_graph, Distance, Snapshot, TemporalGraph};
pub use numerics::{Activation, DenseMatrix, DenseVector};
