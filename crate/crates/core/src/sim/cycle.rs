use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{DataTable, SETPOINT};

/// Imposed speed-setpoint trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingCycle {
    pub dt: f64,
    pub speed_setpoint: Vec<f64>,
}

/// Ramp to `target` (m/s) at `rate` (m/s²), then hold for `hold` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub target: f64,
    pub rate: f64,
    pub hold: f64,
}

const fn phase(target: f64, rate: f64, hold: f64) -> Phase {
    Phase { target, rate, hold }
}

/// Accelerate–cruise–decelerate pattern; rates above ~4.5 m/s² drive the
/// reference motor into its torque limit.
const DEFAULT_PATTERN: [Phase; 12] = [
    phase(14.0, 2.0, 6.0),
    phase(24.0, 1.2, 10.0),
    phase(8.0, 2.5, 5.0),
    phase(26.0, 6.0, 8.0),
    phase(0.0, 3.0, 4.0),
    phase(18.0, 7.0, 9.0),
    phase(30.0, 1.5, 12.0),
    phase(12.0, 2.0, 6.0),
    phase(22.0, 5.5, 7.0),
    phase(4.0, 3.5, 5.0),
    phase(16.0, 6.5, 8.0),
    phase(0.0, 2.5, 6.0),
];

impl DrivingCycle {
    pub fn new(dt: f64, speed_setpoint: Vec<f64>) -> Result<Self> {
        let cycle = DrivingCycle { dt, speed_setpoint };
        cycle.validate()?;
        Ok(cycle)
    }

    pub fn len(&self) -> usize {
        self.speed_setpoint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speed_setpoint.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config("cycle dt must be > 0".into()));
        }
        if self.speed_setpoint.is_empty() {
            return Err(Error::Config("cycle must have at least one step".into()));
        }
        if let Some((i, v)) = self
            .speed_setpoint
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::Config(format!("setpoint at step {i} is {v}; must be finite and >= 0")));
        }
        Ok(())
    }

    /// Lay the phases out repeatedly until `n` steps are filled.
    pub fn from_phases(phases: &[Phase], n: usize, dt: f64) -> Result<Self> {
        if phases.is_empty() || n == 0 {
            return Err(Error::Config("at least one phase and one step required".into()));
        }
        if let Some(ph) = phases.iter().find(|p| !(p.rate > 0.0 && p.target >= 0.0 && p.hold >= 0.0)) {
            return Err(Error::Config(format!("invalid phase {ph:?}")));
        }
        let mut out = Vec::with_capacity(n);
        let mut speed = 0.0f64;
        'fill: loop {
            let before = out.len();
            for ph in phases {
                let delta = ph.rate * dt;
                while speed != ph.target {
                    speed = if (ph.target - speed).abs() <= delta * (1.0 + 1e-9) {
                        ph.target
                    } else {
                        speed + delta.copysign(ph.target - speed)
                    };
                    out.push(speed);
                    if out.len() == n {
                        break 'fill;
                    }
                }
                let hold_steps = (ph.hold / dt).round() as usize;
                for _ in 0..hold_steps {
                    out.push(speed);
                    if out.len() == n {
                        break 'fill;
                    }
                }
            }
            if out.len() == before {
                return Err(Error::Config("phases never advance the cycle".into()));
            }
        }
        DrivingCycle::new(dt, out)
    }

    /// The built-in test cycle: 5960 steps of 0.1 s.
    pub fn default_cycle() -> Self {
        Self::from_phases(&DEFAULT_PATTERN, 5960, 0.1).expect("default pattern is valid")
    }

    /// Random ramp/hold cycle, reproducible from `seed`.
    pub fn random(n: usize, dt: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<Phase> = (0..16)
            .map(|_| Phase {
                target: if rng.random_bool(0.15) { 0.0 } else { rng.random_range(2.0..35.0) },
                rate: rng.random_range(0.5..8.0),
                hold: rng.random_range(1.0..15.0),
            })
            .collect();
        Self::from_phases(&phases, n, dt).expect("random phases are valid")
    }

    pub fn from_table(table: &DataTable, dt: f64) -> Result<Self> {
        DrivingCycle::new(dt, table.column(SETPOINT)?.to_vec())
    }
}
