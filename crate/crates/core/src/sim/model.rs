//! Discrete-time powertrain physics.
//!
//! Module order within a step: Motor (PI speed controller and torque limit)
//! → Driveline (torque to wheel force, friction brakes) → Glider (longitudinal
//! dynamics) → Driveline (wheel speed back to motor speed) → Motor (power
//! and losses) → Battery (current, losses, terminal voltage, charge).

use super::config::{GlobalConstants, Resolved, VersionVector, WorkflowConfig};
use super::state::WorkflowState;
use crate::error::{Error, Result};

/// Advance `state` by one time step under the module versions selected by
/// `versions`.
pub fn step(
    state: &WorkflowState,
    setpoint: f64,
    versions: &VersionVector,
    config: &WorkflowConfig,
) -> Result<WorkflowState> {
    let params = config.resolve(versions)?;
    advance(state, setpoint, &params, &config.constants, config.dt)
}

pub(crate) fn advance(
    s: &WorkflowState,
    setpoint: f64,
    p: &Resolved,
    c: &GlobalConstants,
    dt: f64,
) -> Result<WorkflowState> {
    let v = s.vehicle_speed;
    let force_per_torque = p.efficiency * p.gear_ratio / c.wheel_radius;

    // Motor: PI speed controller with conditional integration.
    let err = setpoint - v;
    let candidate = s.pi_integral + err * dt;
    let demand = p.kp * err + p.ki * candidate;
    let (torque, brake) = actuate(demand, p, c, force_per_torque);
    let drive_saturated = demand > p.max_torque && err > 0.0;
    let brake_saturated = brake >= c.max_brake_force && err < 0.0;
    let pi_integral = if drive_saturated || brake_saturated {
        s.pi_integral
    } else {
        candidate
    };
    let demand = p.kp * err + p.ki * pi_integral;
    let (torque, brake) = if pi_integral == candidate {
        (torque, brake)
    } else {
        actuate(demand, p, c, force_per_torque)
    };

    // Driveline: net force at the wheels.
    let net_force = force_per_torque * torque - brake;

    // Glider: semi-implicit Euler on vehicle speed; the vehicle never reverses.
    let rolling = p.rolling_resistance * c.vehicle_mass * c.gravity * sign(v);
    let aero = 0.5 * c.air_density * p.drag_area * v * v.abs();
    let accel = (net_force - rolling - aero) / c.vehicle_mass;
    let speed = (v + accel * dt).max(0.0);
    let tractive_power = net_force * speed;

    // Driveline → Motor: shaft speed, output power and losses.
    let omega = p.gear_ratio * speed / c.wheel_radius;
    let motor_power = torque * omega;
    let motor_losses = p.loss_torque_coeff * torque * torque + p.loss_speed_coeff * omega.abs();

    // Battery: fixed open-circuit voltage, resistive losses.
    let current = (motor_power + motor_losses) / p.open_circuit_voltage;
    let battery_losses = p.internal_resistance * current * current;
    let soc = (s.soc - current * dt / p.capacity).clamp(0.0, 1.0);

    let next = WorkflowState {
        soc,
        battery_power_losses: battery_losses,
        battery_energy_losses: s.battery_energy_losses + battery_losses * dt,
        terminal_voltage: p.open_circuit_voltage - p.internal_resistance * current,
        motor_power_output: motor_power,
        motor_power_losses: motor_losses,
        motor_energy_losses: s.motor_energy_losses + motor_losses * dt,
        motor_torque: torque,
        motor_speed: omega,
        net_tractive_force: net_force,
        propelling_energy: s.propelling_energy + tractive_power.max(0.0) * dt,
        tractive_power,
        braking_energy: s.braking_energy + (-tractive_power).max(0.0) * dt,
        position: s.position + speed * dt,
        vehicle_speed: speed,
        pi_integral,
    };
    match next.first_non_finite() {
        Some(name) => Err(Error::Divergence {
            variable: name.to_string(),
            step: 0,
        }),
        None => Ok(next),
    }
}

/// Split a torque demand into motor torque and friction-brake force.
fn actuate(demand: f64, p: &Resolved, c: &GlobalConstants, force_per_torque: f64) -> (f64, f64) {
    let lower = if c.regenerative_braking {
        -p.max_torque
    } else {
        0.0
    };
    let torque = demand.clamp(lower, p.max_torque);
    // Brakes supply whatever deceleration the motor cannot.
    let shortfall = force_per_torque * (torque - demand);
    (torque, shortfall.clamp(0.0, c.max_brake_force))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
