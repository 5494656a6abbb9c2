//! Detect which modules of a modular dynamical simulation workflow changed
//! behavior between two versions, from a single run in which module versions
//! are switched per time step according to a design of experiments.

pub mod baselines;
pub mod dmd;
pub mod doe;
pub mod embedding;
pub mod error;
pub mod linalg;
pub mod mixed_dmd;
pub mod nodyn;
pub mod report;
pub mod sim;
pub mod table;

pub use error::{Error, Result};
pub use table::{ColumnKind, DataTable};
