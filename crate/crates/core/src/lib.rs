//! Multi-instance learning benchmark engine.
//!
//! * [`diffcore`]: dense reverse-mode differentiation used by every model.
//! * [`data`]: synthetic bag generation, poisoning, and the `MILB` container.
//! * [`models`]: mi-Net, gated-attention ABMIL and FocusMIL.
//! * [`train`]: losses, AdamW/SGD and seeded multi-run training.
//! * [`metrics`]: AUC, AUCPR, F1/accuracy, FROC and t-intervals.
//! * [`experiment`]: the `gen`/`train`/`eval`/`audit` workflows behind the CLI.

pub mod data;
pub mod diffcore;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod presets;
pub mod rng;
pub mod train;

pub use exec::Execution;
