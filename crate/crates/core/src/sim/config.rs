use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BATTERY: &str = "Battery";
pub const MOTOR: &str = "Motor";
pub const DRIVELINE: &str = "Driveline";
pub const GLIDER: &str = "Glider";

/// One module of the workflow with its reference and updated parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDef {
    pub name: String,
    /// The parameter whose variation represents a version change.
    pub key_parameter: String,
    pub params_ref: BTreeMap<String, f64>,
    pub params_updated: BTreeMap<String, f64>,
}

impl ModuleDef {
    fn new(name: &str, key: &str, params: &[(&str, f64)]) -> Self {
        let params: BTreeMap<String, f64> =
            params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        ModuleDef {
            name: name.into(),
            key_parameter: key.into(),
            params_updated: params.clone(),
            params_ref: params,
        }
    }

    pub fn params(&self, updated: bool) -> &BTreeMap<String, f64> {
        if updated {
            &self.params_updated
        } else {
            &self.params_ref
        }
    }

    pub fn is_perturbed(&self) -> bool {
        self.params_ref != self.params_updated
    }
}

/// Vehicle-level constants shared by every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalConstants {
    pub vehicle_mass: f64,
    pub wheel_radius: f64,
    pub gravity: f64,
    pub air_density: f64,
    pub max_brake_force: f64,
    pub initial_soc: f64,
    pub regenerative_braking: bool,
}

impl Default for GlobalConstants {
    fn default() -> Self {
        GlobalConstants {
            vehicle_mass: 1600.0,
            wheel_radius: 0.3,
            gravity: 9.81,
            air_density: 1.2,
            max_brake_force: 1600.0 * 9.81,
            initial_soc: 0.9,
            regenerative_braking: false,
        }
    }
}

/// Boolean vector selecting, per module, the reference (`false`) or updated
/// (`true`) parameter variant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VersionVector(pub Vec<bool>);

impl VersionVector {
    pub fn reference(m: usize) -> Self {
        VersionVector(vec![false; m])
    }

    pub fn updated(m: usize) -> Self {
        VersionVector(vec![true; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (j, &b)| acc | ((b as u64) << j))
    }

    pub fn support(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub modules: Vec<ModuleDef>,
    pub dt: f64,
    pub constants: GlobalConstants,
}

/// A multiplicative parameter change applied to a module's updated variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub module: String,
    pub parameter: String,
    pub relative_delta: f64,
}

impl Perturbation {
    pub fn new(module: &str, parameter: &str, relative_delta: f64) -> Self {
        Perturbation {
            module: module.into(),
            parameter: parameter.into(),
            relative_delta,
        }
    }
}

/// Typed view of one module-version combination, resolved once per
/// version vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Resolved {
    pub internal_resistance: f64,
    pub open_circuit_voltage: f64,
    pub capacity: f64,
    pub max_torque: f64,
    pub loss_torque_coeff: f64,
    pub loss_speed_coeff: f64,
    pub kp: f64,
    pub ki: f64,
    pub gear_ratio: f64,
    pub efficiency: f64,
    pub rolling_resistance: f64,
    pub drag_area: f64,
}

impl Default for WorkflowConfig {
    /// The compact-EV test case with all modules on identical variants.
    fn default() -> Self {
        WorkflowConfig {
            modules: vec![
                ModuleDef::new(
                    BATTERY,
                    "internal_resistance",
                    &[
                        ("internal_resistance", 0.05),
                        ("open_circuit_voltage", 350.0),
                        ("capacity", 1.44e5),
                    ],
                ),
                ModuleDef::new(
                    MOTOR,
                    "max_torque",
                    &[
                        ("max_torque", 250.0),
                        ("loss_torque_coeff", 0.02),
                        ("loss_speed_coeff", 0.1),
                        ("kp", 800.0),
                        ("ki", 40.0),
                    ],
                ),
                ModuleDef::new(
                    DRIVELINE,
                    "gear_ratio",
                    &[("gear_ratio", 9.0), ("efficiency", 0.97)],
                ),
                ModuleDef::new(
                    GLIDER,
                    "rolling_resistance",
                    &[("rolling_resistance", 0.01), ("drag_area", 0.6)],
                ),
            ],
            dt: 0.1,
            constants: GlobalConstants::default(),
        }
    }
}

impl WorkflowConfig {
    /// The default test case: Battery resistance +10 %, Motor max torque +10 %.
    pub fn test_case() -> Self {
        WorkflowConfig::default()
            .build_w1(&default_perturbations())
            .expect("default perturbations name existing parameters")
    }

    pub fn module_names(&self) -> Vec<String> {
        self.modules.iter().map(|m| m.name.clone()).collect()
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    pub fn module_index(&self, name: &str) -> Result<usize> {
        self.modules
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModule(name.into()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.modules.is_empty() {
            return Err(Error::Config("workflow needs at least one module".into()));
        }
        let c = &self.constants;
        for (name, v) in [
            ("vehicle_mass", c.vehicle_mass),
            ("wheel_radius", c.wheel_radius),
            ("gravity", c.gravity),
            ("air_density", c.air_density),
            ("max_brake_force", c.max_brake_force),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&c.initial_soc) {
            return Err(Error::Config("initial_soc must lie in [0, 1]".into()));
        }
        let mut names: Vec<&str> = self.modules.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("module names must be unique".into()));
        }
        // Every version combination must resolve.
        self.resolve(&VersionVector::reference(self.module_count()))?;
        self.resolve(&VersionVector::updated(self.module_count()))?;
        Ok(())
    }

    /// Return a copy whose updated variants carry the multiplicative deltas.
    /// Reference parameters are never touched; modules not listed keep
    /// `params_updated == params_ref`.
    pub fn build_w1(&self, perturbations: &[Perturbation]) -> Result<WorkflowConfig> {
        let mut out = self.clone();
        for m in &mut out.modules {
            m.params_updated = m.params_ref.clone();
        }
        for p in perturbations {
            let idx = out.module_index(&p.module)?;
            let module = &mut out.modules[idx];
            let reference = *module.params_ref.get(&p.parameter).ok_or_else(|| {
                Error::UnknownParameter {
                    module: p.module.clone(),
                    parameter: p.parameter.clone(),
                }
            })?;
            let updated = module.params_updated.get_mut(&p.parameter).unwrap();
            *updated = reference * (1.0 + p.relative_delta);
        }
        Ok(out)
    }

    pub(crate) fn resolve(&self, versions: &VersionVector) -> Result<Resolved> {
        if versions.len() != self.module_count() {
            return Err(Error::Config(format!(
                "version vector has {} entries for {} modules",
                versions.len(),
                self.module_count()
            )));
        }
        let lookup = |module: &str, param: &str| -> Result<f64> {
            let idx = self.module_index(module)?;
            self.modules[idx]
                .params(versions.0[idx])
                .get(param)
                .copied()
                .ok_or_else(|| Error::UnknownParameter {
                    module: module.into(),
                    parameter: param.into(),
                })
        };
        Ok(Resolved {
            internal_resistance: lookup(BATTERY, "internal_resistance")?,
            open_circuit_voltage: lookup(BATTERY, "open_circuit_voltage")?,
            capacity: lookup(BATTERY, "capacity")?,
            max_torque: lookup(MOTOR, "max_torque")?,
            loss_torque_coeff: lookup(MOTOR, "loss_torque_coeff")?,
            loss_speed_coeff: lookup(MOTOR, "loss_speed_coeff")?,
            kp: lookup(MOTOR, "kp")?,
            ki: lookup(MOTOR, "ki")?,
            gear_ratio: lookup(DRIVELINE, "gear_ratio")?,
            efficiency: lookup(DRIVELINE, "efficiency")?,
            rolling_resistance: lookup(GLIDER, "rolling_resistance")?,
            drag_area: lookup(GLIDER, "drag_area")?,
        })
    }
}

pub fn default_perturbations() -> Vec<Perturbation> {
    vec![
        Perturbation::new(BATTERY, "internal_resistance", 0.10),
        Perturbation::new(MOTOR, "max_torque", 0.10),
    ]
}
