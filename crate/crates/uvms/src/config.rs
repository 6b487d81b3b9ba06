//! Declarative scenario files: serde structures, invariant validation
//! (errors name the offending field), and assembly into a runnable
//! [`Scenario`](crate::sim::Scenario).

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PlaneObstacle;
use crate::model::{UvmsModel, UvmsState};
use crate::ocp::OcpConfig;
use crate::sim::{ContactModelParams, FaultWindow, Scenario};
use crate::solver::SolverConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse scenario file: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

/// Initial (or target) configuration of the system. Velocities default to
/// rest; joint angles default to a neutral folded posture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    #[serde(default)]
    pub position: [f64; 3],
    #[serde(default)]
    pub orientation: [f64; 3],
    #[serde(default)]
    pub joint_angles: Vec<f64>,
    #[serde(default)]
    pub linear_velocity: [f64; 3],
    #[serde(default)]
    pub angular_velocity: [f64; 3],
    #[serde(default)]
    pub joint_rates: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneConfig {
    pub normal: [f64; 3],
    pub offset: f64,
    #[serde(default = "default_friction")]
    pub friction: f64,
}

fn default_friction() -> f64 {
    0.4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub vehicle_wrench_scale: f64,
}

/// Controller knobs exposed to scenario files; everything else keeps the
/// library defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub n_p: usize,
    pub dt_nom: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub d_safe: f64,
    pub contact_force_max: f64,
    pub max_iterations: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let ocp = OcpConfig::defaults(3);
        Self {
            n_p: ocp.n_p,
            dt_nom: ocp.dt_nom,
            dt_min: ocp.dt_bounds.0,
            dt_max: ocp.dt_bounds.1,
            d_safe: ocp.d_safe,
            contact_force_max: ocp.contact_force_max,
            max_iterations: SolverConfig::default().max_iterations,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    pub stiffness: f64,
    pub damping: f64,
    pub regularization_velocity: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        let p = ContactModelParams::default();
        Self {
            stiffness: p.stiffness,
            damping: p.damping,
            regularization_velocity: p.regularization_velocity,
        }
    }
}

/// Plant-side model mismatch multipliers; both default to exact match.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub drag_scale: f64,
    pub added_mass_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { drag_scale: 1.0, added_mass_scale: 1.0 }
    }
}

/// One scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration: f64,
    #[serde(default = "default_substep")]
    pub plant_substep: f64,
    #[serde(default)]
    pub current: [f64; 3],
    pub initial: StateConfig,
    pub target: StateConfig,
    pub planes: Vec<PlaneConfig>,
    #[serde(default)]
    pub faults: Vec<FaultConfig>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub contact: ContactConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_substep() -> f64 {
    0.005
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serialization")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let model = UvmsModel::default_article();
        let n_links = model.n_links();
        if self.name.is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration", "must be finite and nonnegative"));
        }
        if !(self.plant_substep > 0.0) {
            return Err(invalid("plant_substep", "must be positive"));
        }
        if self.plant_substep > self.controller.dt_nom {
            return Err(invalid("plant_substep", "must not exceed controller.dt_nom"));
        }
        if self.current.iter().any(|v| !v.is_finite()) {
            return Err(invalid("current", "components must be finite"));
        }

        for (label, state) in [("initial", &self.initial), ("target", &self.target)] {
            let all = state
                .position
                .iter()
                .chain(&state.orientation)
                .chain(&state.linear_velocity)
                .chain(&state.angular_velocity)
                .chain(&state.joint_angles)
                .chain(&state.joint_rates);
            if all.into_iter().any(|v| !v.is_finite()) {
                return Err(invalid(label, "entries must be finite"));
            }
            resolve_joints(&format!("{label}.joint_angles"), &state.joint_angles, n_links)?;
            resolve_joints(&format!("{label}.joint_rates"), &state.joint_rates, n_links)?;
        }

        if self.planes.is_empty() {
            return Err(invalid("planes", "at least one plane obstacle is required"));
        }
        for (i, p) in self.planes.iter().enumerate() {
            let n = Vector3::from(p.normal);
            if !(n.norm() > 1e-9) || n.iter().any(|v| !v.is_finite()) {
                return Err(invalid(&format!("planes[{i}].normal"), "must be a nonzero vector"));
            }
            if !p.offset.is_finite() {
                return Err(invalid(&format!("planes[{i}].offset"), "must be finite"));
            }
            if !(p.friction > 0.0) {
                return Err(invalid(&format!("planes[{i}].friction"), "must be positive"));
            }
        }

        for (i, f) in self.faults.iter().enumerate() {
            if !(f.start >= 0.0 && f.end > f.start) {
                return Err(invalid(
                    &format!("faults[{i}]"),
                    "window must satisfy 0 <= start < end",
                ));
            }
            if !(0.0..=1.0).contains(&f.vehicle_wrench_scale) {
                return Err(invalid(
                    &format!("faults[{i}].vehicle_wrench_scale"),
                    "must lie in [0, 1]",
                ));
            }
        }

        let c = &self.controller;
        if c.n_p < 1 {
            return Err(invalid("controller.n_p", "must be at least 1"));
        }
        if !(c.dt_min > 0.0 && c.dt_min <= c.dt_max) {
            return Err(invalid("controller.dt_min", "bounds must satisfy 0 < dt_min <= dt_max"));
        }
        if !(c.dt_nom >= c.dt_min && c.dt_nom <= c.dt_max) {
            return Err(invalid("controller.dt_nom", "must lie within [dt_min, dt_max]"));
        }
        if !(c.d_safe >= 0.0) {
            return Err(invalid("controller.d_safe", "must be nonnegative"));
        }
        if !(c.contact_force_max > 0.0) {
            return Err(invalid("controller.contact_force_max", "must be positive"));
        }
        if c.max_iterations == 0 {
            return Err(invalid("controller.max_iterations", "must be positive"));
        }

        if !(self.contact.stiffness > 0.0) {
            return Err(invalid("contact.stiffness", "must be positive"));
        }
        if !(self.contact.damping > 0.0) {
            return Err(invalid("contact.damping", "must be positive"));
        }
        if !(self.contact.regularization_velocity > 0.0) {
            return Err(invalid("contact.regularization_velocity", "must be positive"));
        }

        if !(self.model.drag_scale > 0.0) {
            return Err(invalid("model.drag_scale", "must be positive"));
        }
        if !(self.model.added_mass_scale > 0.0) {
            return Err(invalid("model.added_mass_scale", "must be positive"));
        }

        // Joint-limit check needs the resolved angles.
        let (lo, hi) = (model.joint_lower_limits(), model.joint_upper_limits());
        let q = resolve_joints("initial.joint_angles", &self.initial.joint_angles, n_links)?;
        for j in 0..n_links {
            if q[j] < lo[j] || q[j] > hi[j] {
                return Err(invalid(
                    &format!("initial.joint_angles[{j}]"),
                    "outside joint limits",
                ));
            }
        }
        resolve_joints("target.joint_angles", &self.target.joint_angles, n_links)?;
        Ok(())
    }

    /// Assemble the runnable scenario. Validation runs first.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        self.validate()?;
        let mut model = UvmsModel::default_article();
        model.current = Vector3::from(self.current);
        let mut plant_model = model.clone();
        plant_model.vehicle_drag_linear *= self.model.drag_scale;
        plant_model.vehicle_drag_angular *= self.model.drag_scale;
        plant_model.vehicle_added_mass_linear *= self.model.added_mass_scale;
        plant_model.vehicle_added_mass_angular *= self.model.added_mass_scale;

        let n_links = model.n_links();
        let initial_state = state_from_config(&self.initial, n_links)?;
        let target = state_from_config(&self.target, n_links)?;

        let planes = self
            .planes
            .iter()
            .map(|p| PlaneObstacle::new(Vector3::from(p.normal), p.offset, p.friction))
            .collect();

        let mut ocp = OcpConfig::defaults(n_links);
        ocp.n_p = self.controller.n_p;
        ocp.dt_nom = self.controller.dt_nom;
        ocp.dt_bounds = (self.controller.dt_min, self.controller.dt_max);
        ocp.d_safe = self.controller.d_safe;
        ocp.contact_force_max = self.controller.contact_force_max;
        let mut solver = SolverConfig::default();
        solver.max_iterations = self.controller.max_iterations;

        Ok(Scenario {
            name: self.name.clone(),
            model,
            plant_model,
            initial_state,
            reference: target.to_vector(),
            planes,
            faults: self
                .faults
                .iter()
                .map(|f| FaultWindow {
                    start: f.start,
                    end: f.end,
                    vehicle_wrench_scale: f.vehicle_wrench_scale,
                })
                .collect(),
            ocp,
            solver,
            contact: ContactModelParams {
                stiffness: self.contact.stiffness,
                damping: self.contact.damping,
                regularization_velocity: self.contact.regularization_velocity,
            },
            duration: self.duration,
            plant_substep: self.plant_substep,
        })
    }
}

fn resolve_joints(field: &str, values: &[f64], n_links: usize) -> Result<DVector<f64>, ConfigError> {
    if values.is_empty() {
        return Ok(DVector::zeros(n_links));
    }
    if values.len() != n_links {
        return Err(invalid(field, format!("expected {n_links} entries, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(values))
}

fn state_from_config(cfg: &StateConfig, n_links: usize) -> Result<UvmsState, ConfigError> {
    let mut h = UvmsState::zero(n_links);
    h.position = Vector3::from(cfg.position);
    h.orientation = Vector3::from(cfg.orientation);
    h.joint_angles = resolve_joints("joint_angles", &cfg.joint_angles, n_links)?;
    h.linear_velocity = Vector3::from(cfg.linear_velocity);
    h.angular_velocity = Vector3::from(cfg.angular_velocity);
    h.joint_rates = resolve_joints("joint_rates", &cfg.joint_rates, n_links)?;
    if !h.is_finite() {
        return Err(invalid("state", "entries must be finite"));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
name = "head-on"
duration = 20.0

[initial]
position = [0.0, 0.0, 0.0]
linear_velocity = [0.6, 0.0, 0.0]

[target]
position = [4.0, 0.0, 0.0]

[[planes]]
normal = [-1.0, 0.0, 0.0]
offset = 3.0
friction = 0.4

[controller]
n_p = 8
dt_nom = 0.1
"#;

    #[test]
    fn parses_and_builds_a_valid_scenario() {
        let cfg = ScenarioConfig::from_toml_str(GOOD).unwrap();
        let scenario = cfg.build().unwrap();
        assert_eq!(scenario.name, "head-on");
        assert_eq!(scenario.planes.len(), 1);
        assert_eq!(scenario.ocp.n_p, 8);
        assert!((scenario.initial_state.linear_velocity.x - 0.6).abs() < 1e-12);
        assert_eq!(scenario.reference[0], 4.0);
        // Defaults filled in.
        assert!((scenario.contact.stiffness - 5e4).abs() < 1e-9);
        assert!((scenario.plant_substep - 0.005).abs() < 1e-12);
    }

    #[test]
    fn errors_name_the_offending_field() {
        let bad = GOOD.replace("normal = [-1.0, 0.0, 0.0]", "normal = [0.0, 0.0, 0.0]");
        let err = ScenarioConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("planes[0].normal"), "got: {err}");

        let bad = GOOD.replace("duration = 20.0", "duration = -1.0");
        let err = ScenarioConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("duration"), "got: {err}");

        let bad = GOOD.replace("n_p = 8", "n_p = 0");
        let err = ScenarioConfig::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("controller.n_p"), "got: {err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = format!("{GOOD}\nbogus_key = 1\n");
        assert!(matches!(
            ScenarioConfig::from_toml_str(&bad),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::from_toml_str(GOOD).unwrap();
        let text = cfg.to_toml_string();
        let again = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(again.name, cfg.name);
        assert_eq!(again.controller.n_p, cfg.controller.n_p);
        assert_eq!(again.planes[0].offset, cfg.planes[0].offset);
    }
}
