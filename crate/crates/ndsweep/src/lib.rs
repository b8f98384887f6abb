//! Small CNN training library built around nested dropout on conv
//! layers with unit sweeping, for discovering how many filters a layer
//! actually needs from a single training run.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod nested;
pub mod network;
pub mod plot;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use experiment::{select_capacity, CapacityCurve, CurveRow, ExperimentConfig};
pub use nested::{NdMode, NestedDropoutState};
pub use network::{EvalMask, Network, NetworkSpec};
pub use solver::{SolverConfig, TrainState};
pub use tensor::Tensor;
