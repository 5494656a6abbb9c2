use std::collections::HashMap;

use super::config::{Resolved, VersionVector, WorkflowConfig};
use super::cycle::DrivingCycle;
use super::model::advance;
use super::state::{all_column_names, WorkflowState, INTERNAL_NAMES, STATE_NAMES};
use crate::error::{Error, Result};
use crate::table::{DataTable, BOOLEAN_PREFIX, SETPOINT};

/// Version vectors driving a simulation: one for the whole run, or one per step.
#[derive(Debug, Clone, Copy)]
pub enum Versions<'a> {
    Constant(&'a VersionVector),
    PerStep(&'a [VersionVector]),
}

impl Versions<'_> {
    fn at(&self, t: usize) -> &VersionVector {
        match self {
            Versions::Constant(v) => v,
            Versions::PerStep(steps) => &steps[t],
        }
    }
}

pub fn boolean_column(module: &str) -> String {
    format!("{BOOLEAN_PREFIX}{module}")
}

/// Run the workflow over the cycle.
///
/// Row `t` holds the state after `t` steps (row 0 is the vehicle at rest),
/// the setpoint applied during the transition `t → t+1`, and the version
/// vector used for that same transition.
pub fn simulate(
    config: &WorkflowConfig,
    cycle: &DrivingCycle,
    versions: Versions<'_>,
) -> Result<DataTable> {
    config.validate()?;
    cycle.validate()?;
    if cycle.dt != config.dt {
        return Err(Error::Config(format!(
            "cycle dt {} differs from workflow dt {}",
            cycle.dt, config.dt
        )));
    }
    let n = cycle.len();
    let m = config.module_count();
    if let Versions::PerStep(steps) = versions {
        if steps.len() != n {
            return Err(Error::Config(format!(
                "schedule has {} steps, cycle has {n}",
                steps.len()
            )));
        }
    }

    let mut cache: HashMap<u64, Resolved> = HashMap::new();
    let reference = config.resolve(&VersionVector::reference(m))?;
    let mut state = WorkflowState::at_rest(
        config.constants.initial_soc,
        reference.open_circuit_voltage,
    );

    let mut rows: Vec<[f64; 16]> = Vec::with_capacity(n);
    for t in 0..n {
        rows.push(state.to_array());
        if t + 1 == n {
            break;
        }
        let v = versions.at(t);
        let params = match cache.get(&v.bits()) {
            Some(p) => *p,
            None => {
                let p = config.resolve(v)?;
                cache.insert(v.bits(), p);
                p
            }
        };
        state = advance(
            &state,
            cycle.speed_setpoint[t],
            &params,
            &config.constants,
            cycle.dt,
        )
        .map_err(|e| e.at_step(t + 1))?;
    }

    let mut columns = vec![(SETPOINT.to_string(), cycle.speed_setpoint.clone())];
    for (k, name) in all_column_names().into_iter().enumerate() {
        columns.push((name, rows.iter().map(|r| r[k]).collect()));
    }
    for (j, module) in config.modules.iter().enumerate() {
        let col = (0..n)
            .map(|t| if versions.at(t).0[j] { 1.0 } else { 0.0 })
            .collect();
        columns.push((boolean_column(&module.name), col));
    }
    DataTable::from_columns((0..n).collect(), columns)
}

/// Rebuild the full workflow state stored in row `row` of `table`.
pub fn state_from_row(table: &DataTable, row: usize) -> Result<WorkflowState> {
    let required: Vec<String> = all_column_names();
    table.require(&required)?;
    let mut v = [0.0; 16];
    for (k, name) in required.iter().enumerate() {
        v[k] = table.get(row, name)?;
    }
    Ok(WorkflowState::from_array(&v))
}

/// One transition of the workflow started from a stored table row.
pub fn one_step_from(
    table: &DataTable,
    row: usize,
    setpoint: f64,
    versions: &VersionVector,
    config: &WorkflowConfig,
) -> Result<WorkflowState> {
    let state = state_from_row(table, row)?;
    let params = config.resolve(versions)?;
    advance(&state, setpoint, &params, &config.constants, config.dt)
        .map_err(|e| e.at_step(row + 1))
}

/// Names of exported physical state columns.
pub fn state_columns() -> Vec<String> {
    STATE_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn internal_columns() -> Vec<String> {
    INTERNAL_NAMES.iter().map(|s| s.to_string()).collect()
}
