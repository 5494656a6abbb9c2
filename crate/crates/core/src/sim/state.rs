use serde::{Deserialize, Serialize};

/// Exported physical variables, in table column order.
pub const STATE_NAMES: [&str; 14] = [
    "B_SOC",
    "B_PowerLosses",
    "B_EnergyLosses",
    "B_VoltageAtTerminals",
    "M_PowerOutput",
    "M_PowerLosses",
    "M_EnergyLosses",
    "M_NetTorque",
    "D_MotorSpeed",
    "D_NetTractiveForce",
    "G_PropellingEnergy",
    "G_TractivePower",
    "G_BrakingEnergy",
    "G_Position",
];

/// Integrator states exported so a run can be restarted from any row.
pub const INTERNAL_NAMES: [&str; 2] = ["int_VehicleSpeed", "int_PiIntegral"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkflowState {
    pub soc: f64,
    pub battery_power_losses: f64,
    pub battery_energy_losses: f64,
    pub terminal_voltage: f64,
    pub motor_power_output: f64,
    pub motor_power_losses: f64,
    pub motor_energy_losses: f64,
    pub motor_torque: f64,
    pub motor_speed: f64,
    pub net_tractive_force: f64,
    pub propelling_energy: f64,
    pub tractive_power: f64,
    pub braking_energy: f64,
    pub position: f64,
    pub vehicle_speed: f64,
    pub pi_integral: f64,
}

impl WorkflowState {
    /// Vehicle at rest with the given charge and open-circuit terminal voltage.
    pub fn at_rest(soc: f64, open_circuit_voltage: f64) -> Self {
        WorkflowState {
            soc,
            terminal_voltage: open_circuit_voltage,
            ..Default::default()
        }
    }

    /// Values in `STATE_NAMES` order followed by `INTERNAL_NAMES` order.
    pub fn to_array(&self) -> [f64; 16] {
        [
            self.soc,
            self.battery_power_losses,
            self.battery_energy_losses,
            self.terminal_voltage,
            self.motor_power_output,
            self.motor_power_losses,
            self.motor_energy_losses,
            self.motor_torque,
            self.motor_speed,
            self.net_tractive_force,
            self.propelling_energy,
            self.tractive_power,
            self.braking_energy,
            self.position,
            self.vehicle_speed,
            self.pi_integral,
        ]
    }

    pub fn from_array(v: &[f64; 16]) -> Self {
        WorkflowState {
            soc: v[0],
            battery_power_losses: v[1],
            battery_energy_losses: v[2],
            terminal_voltage: v[3],
            motor_power_output: v[4],
            motor_power_losses: v[5],
            motor_energy_losses: v[6],
            motor_torque: v[7],
            motor_speed: v[8],
            net_tractive_force: v[9],
            propelling_energy: v[10],
            tractive_power: v[11],
            braking_energy: v[12],
            position: v[13],
            vehicle_speed: v[14],
            pi_integral: v[15],
        }
    }

    /// Name of the first non-finite variable, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.to_array()
            .iter()
            .zip(STATE_NAMES.iter().chain(INTERNAL_NAMES.iter()))
            .find(|(v, _)| !v.is_finite())
            .map(|(_, n)| *n)
    }
}

pub fn all_column_names() -> Vec<String> {
    STATE_NAMES
        .iter()
        .chain(INTERNAL_NAMES.iter())
        .map(|s| s.to_string())
        .collect()
}
