//! Recurrent-network laboratory: plain, leaky, gated and LSTM cells trained
//! with exact backpropagation through time, gate-bias initialization
//! policies (including chrono initialization), RMSprop with a plateau
//! schedule, and seeded synthetic benchmarks for time warping and long-term
//! dependencies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod cli;
pub mod error;
pub mod exec;
pub mod init;
pub mod numerics;
pub mod optim;
pub mod tasks;
pub mod train;

pub use cells::{Arch, Batch, CellParams, CellState, Gate, Network, OutputKind, ParamSet, Readout};
pub use error::{Error, Result};
pub use exec::Exec;
pub use init::InitPolicy;
pub use numerics::{Matrix, Rng};
pub use optim::{LrSchedule, RmsProp};
pub use tasks::{Dataset, TaskSample, TaskSpec};
pub use train::{Budget, MetricsLog, Record, TrainConfig};
