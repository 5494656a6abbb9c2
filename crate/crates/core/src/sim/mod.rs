//! Discrete-time electric-vehicle powertrain workflow with per-step switching
//! of each module between its reference and updated parameter variant.

mod config;
mod cycle;
mod model;
mod simulate;
mod state;

pub use config::{
    default_perturbations, GlobalConstants, ModuleDef, Perturbation, VersionVector,
    WorkflowConfig, BATTERY, DRIVELINE, GLIDER, MOTOR,
};
pub use cycle::{DrivingCycle, Phase};
pub use model::step;
pub use simulate::{
    boolean_column, internal_columns, one_step_from, simulate, state_columns, state_from_row,
    Versions,
};
pub use state::{WorkflowState, INTERNAL_NAMES, STATE_NAMES};
