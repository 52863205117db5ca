//! Per-time-step power model of a multirotor drone.
//!
//! The physical model gives hover and forward-flight power from airframe
//! parameters. The simulator itself never uses those numbers directly: it runs
//! on a fixed, proportionally scaled triple returned by [`scaled_rates`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("induced-velocity solver did not converge (last residual {residual:e})")]
    SolverFailure { residual: f64 },
}

/// Airframe and environment parameters of a drone.
///
/// Defaults are the published base case for a small package-delivery
/// quadcopter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsParams {
    pub rotor_diameter_m: f64,
    /// Total mass including battery and payload facilities.
    pub drone_mass_kg: f64,
    pub ground_speed_mps: f64,
    pub pitch_angle_rad: f64,
    pub power_efficiency: f64,
    pub air_density_kgpm3: f64,
    pub rotor_count: u32,
    pub drag_force_n: f64,
    pub gravity_mps2: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            rotor_diameter_m: 0.254,
            drone_mass_kg: 2.07,
            ground_speed_mps: 10.0,
            pitch_angle_rad: 0.0139,
            power_efficiency: 0.7,
            air_density_kgpm3: 1.2193,
            rotor_count: 4,
            drag_force_n: 0.0,
            gravity_mps2: 9.81,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        fn positive(name: &'static str, value: f64) -> Result<(), EnergyError> {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(EnergyError::InvalidParameter {
                    name,
                    value,
                    reason: "must be finite and strictly positive",
                })
            }
        }
        positive("rotor_diameter_m", self.rotor_diameter_m)?;
        positive("drone_mass_kg", self.drone_mass_kg)?;
        positive("ground_speed_mps", self.ground_speed_mps)?;
        positive("air_density_kgpm3", self.air_density_kgpm3)?;
        positive("gravity_mps2", self.gravity_mps2)?;
        positive("power_efficiency", self.power_efficiency)?;
        if self.power_efficiency > 1.0 {
            return Err(EnergyError::InvalidParameter {
                name: "power_efficiency",
                value: self.power_efficiency,
                reason: "must lie in (0, 1]",
            });
        }
        if self.rotor_count == 0 {
            return Err(EnergyError::InvalidParameter {
                name: "rotor_count",
                value: 0.0,
                reason: "must be a positive integer",
            });
        }
        if !(self.drag_force_n.is_finite() && self.drag_force_n >= 0.0) {
            return Err(EnergyError::InvalidParameter {
                name: "drag_force_n",
                value: self.drag_force_n,
                reason: "must be finite and non-negative",
            });
        }
        if !(self.pitch_angle_rad.is_finite()
            && self.pitch_angle_rad >= 0.0
            && self.pitch_angle_rad < PI / 2.0)
        {
            return Err(EnergyError::InvalidParameter {
                name: "pitch_angle_rad",
                value: self.pitch_angle_rad,
                reason: "must lie in [0, pi/2)",
            });
        }
        Ok(())
    }

    /// Weight plus drag, the force the rotors must balance.
    fn thrust(&self) -> f64 {
        self.drone_mass_kg * self.gravity_mps2 + self.drag_force_n
    }

    fn disk_term(&self) -> f64 {
        PI * f64::from(self.rotor_count) * self.rotor_diameter_m.powi(2) * self.air_density_kgpm3
    }

    /// Right-hand side of the induced-velocity fixed-point equation.
    pub fn induced_velocity_rhs(&self, induced: f64) -> f64 {
        let v = self.ground_speed_mps;
        let (sin_a, cos_a) = self.pitch_angle_rad.sin_cos();
        let horizontal = v * cos_a;
        let vertical = v * sin_a + induced;
        2.0 * self.thrust() / (self.disk_term() * horizontal.hypot(vertical))
    }
}

/// Energy drawn per simulation time step by each activity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRates {
    pub hover: f64,
    pub forward: f64,
    pub facilities: f64,
}

/// The rates every simulation runs on: hover 4, forward 2.5, facilities 3.
pub const fn scaled_rates() -> PowerRates {
    PowerRates {
        hover: 4.0,
        forward: 2.5,
        facilities: 3.0,
    }
}

const BISECTION_CAP: usize = 400;
const RESIDUAL_TOLERANCE: f64 = 1e-9;

/// Solves the induced velocity `v_s` by bisection on the strictly increasing
/// residual `v_s - rhs(v_s)`.
pub fn solve_induced_velocity(params: &PhysicsParams) -> Result<f64, EnergyError> {
    params.validate()?;
    let residual = |vs: f64| vs - params.induced_velocity_rhs(vs);

    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    let mut grow = 0;
    while residual(hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 1100 || !hi.is_finite() {
            return Err(EnergyError::SolverFailure {
                residual: residual(lo),
            });
        }
    }

    for _ in 0..BISECTION_CAP {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let vs = 0.5 * (lo + hi);
    let r = residual(vs);
    if r.abs() <= RESIDUAL_TOLERANCE * vs.max(1.0) {
        Ok(vs)
    } else {
        Err(EnergyError::SolverFailure { residual: r })
    }
}

pub fn hover_power(params: &PhysicsParams) -> Result<f64, EnergyError> {
    params.validate()?;
    Ok(params.thrust().powf(1.5) / (params.power_efficiency * (0.5 * params.disk_term()).sqrt()))
}

pub fn forward_power(params: &PhysicsParams, induced_velocity: f64) -> Result<f64, EnergyError> {
    params.validate()?;
    if !(induced_velocity.is_finite() && induced_velocity > 0.0) {
        return Err(EnergyError::InvalidParameter {
            name: "induced_velocity",
            value: induced_velocity,
            reason: "must be finite and strictly positive",
        });
    }
    let climb = params.ground_speed_mps * params.pitch_angle_rad.sin();
    Ok(params.thrust() * (climb + induced_velocity) / params.power_efficiency)
}

/// Physical rates for a parameter set. Facilities draw depends on the payload
/// and has no physical model, so it is carried through from the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhysicalRates {
    pub induced_velocity: f64,
    pub hover: f64,
    pub forward: f64,
}

pub fn physical_rates(params: &PhysicsParams) -> Result<PhysicalRates, EnergyError> {
    let induced_velocity = solve_induced_velocity(params)?;
    Ok(PhysicalRates {
        induced_velocity,
        hover: hover_power(params)?,
        forward: forward_power(params, induced_velocity)?,
    })
}
