//! Case configuration file (TOML).
//!
//! ```toml
//! name = "cavity"
//!
//! [physics]
//! nu = 0.01
//! rho = 1000.0
//!
//! [scheme]
//! convection = "upwind"
//! nonorth_correction = false
//!
//! [solvers]
//! cg_tol = 1e-6
//! bicgstab_tol = 1e-8
//! max_iters = 1000
//!
//! [coupling]
//! algorithm = "simple"
//! alpha_u = 0.7
//! alpha_p = 0.3
//!
//! [io]
//! write_interval = 0
//!
//! [[boundary]]
//! patch = "lid"
//! velocity = { type = "fixed_value", value = [1.0, 0.0, 0.0] }
//! pressure = { type = "zero_gradient" }
//! ```
//!
//! Unknown keys are rejected. Patches of kind `empty` need no `[[boundary]]`
//! entry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingConfig;
use crate::fvm::{BoundaryCondition, SchemeConfig};
use crate::linsolve::SolveConfig;
use crate::mesh::{Mesh, PatchKind};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub physics: Physics,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub solvers: SolverSettings,
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub io: IoSettings,
    #[serde(default)]
    pub boundary: Vec<BoundarySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Physics {
    /// Kinematic viscosity, m^2/s.
    pub nu: f64,
    /// Density, kg/m^3. Only used to turn inlet mass flows into velocities.
    pub rho: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self { nu: 0.01, rho: 1000.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub cg_tol: f64,
    pub bicgstab_tol: f64,
    pub max_iters: usize,
    /// Time the kernel groups inside every linear solve.
    pub record_stages: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { cg_tol: 1e-6, bicgstab_tol: 1e-8, max_iters: 1000, record_stages: true }
    }
}

impl SolverSettings {
    pub fn cg(&self) -> SolveConfig {
        SolveConfig {
            tolerance: self.cg_tol,
            abs_tolerance: 0.0,
            max_iters: self.max_iters,
            record_stages: self.record_stages,
        }
    }

    pub fn bicgstab(&self) -> SolveConfig {
        SolveConfig { tolerance: self.bicgstab_tol, ..self.cg() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSettings {
    /// Write a VTK snapshot every this many iterations or steps; 0 writes the
    /// final state only.
    pub write_interval: usize,
    pub sample: Vec<SampleLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleLine {
    pub name: String,
    /// `"U"` or `"p"`.
    pub field: String,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub patch: String,
    pub velocity: VelocitySpec,
    pub pressure: PressureSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocitySpec {
    FixedValue {
        value: [f64; 3],
    },
    TimedInlet {
        u0: f64,
        frequency: f64,
    },
    ZeroGradient,
    NoSlip,
    /// Inlet mass flow in kg/s; the density comes from `[physics]`.
    FixedMassFlow {
        mass_flow: f64,
    },
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PressureSpec {
    FixedValue { value: f64 },
    ZeroGradient,
    Empty,
}

impl VelocitySpec {
    fn to_bc(self, rho: f64) -> BoundaryCondition<Vec3> {
        match self {
            Self::FixedValue { value } => BoundaryCondition::FixedValue(Vec3::from(value)),
            Self::TimedInlet { u0, frequency } => BoundaryCondition::TimedInlet { u0, frequency },
            Self::ZeroGradient => BoundaryCondition::ZeroGradient,
            Self::NoSlip => BoundaryCondition::NoSlip,
            Self::FixedMassFlow { mass_flow } => BoundaryCondition::FixedMassFlow { mass_flow, rho },
            Self::Empty => BoundaryCondition::Empty,
        }
    }
}

impl PressureSpec {
    fn to_bc(self) -> BoundaryCondition<f64> {
        match self {
            Self::FixedValue { value } => BoundaryCondition::FixedPressure(value),
            Self::ZeroGradient => BoundaryCondition::ZeroGradient,
            Self::Empty => BoundaryCondition::Empty,
        }
    }
}

fn positive(name: &str, value: f64) -> Result<(), ConfigError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {value}")))
    }
}

impl CaseConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_toml_str(&text, &path.display().to_string())?)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("physics.nu", self.physics.nu)?;
        positive("physics.rho", self.physics.rho)?;
        positive("solvers.cg_tol", self.solvers.cg_tol)?;
        positive("solvers.bicgstab_tol", self.solvers.bicgstab_tol)?;
        if self.solvers.max_iters == 0 {
            return Err(ConfigError::Invalid("solvers.max_iters must be at least 1".into()));
        }
        self.scheme.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.coupling.validate()?;
        for line in &self.io.sample {
            if line.field != "U" && line.field != "p" {
                return Err(ConfigError::Invalid(format!("sample `{}`: unknown field `{}`", line.name, line.field)));
            }
            if line.points == 0 {
                return Err(ConfigError::Invalid(format!("sample `{}`: points must be at least 1", line.name)));
            }
        }
        Ok(())
    }

    /// Velocity and pressure conditions ordered like the mesh patches.
    #[allow(clippy::type_complexity)]
    pub fn boundary_conditions(
        &self,
        mesh: &Mesh,
    ) -> Result<(Vec<BoundaryCondition<Vec3>>, Vec<BoundaryCondition<f64>>), ConfigError> {
        for spec in &self.boundary {
            if mesh.patch_by_name(&spec.patch).is_none() {
                return Err(ConfigError::Invalid(format!("boundary entry for unknown patch `{}`", spec.patch)));
            }
        }
        let mut u = Vec::with_capacity(mesh.patches().len());
        let mut p = Vec::with_capacity(mesh.patches().len());
        for patch in mesh.patches() {
            let mut specs = self.boundary.iter().filter(|b| b.patch == patch.name);
            match (specs.next(), specs.next()) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::Invalid(format!("patch `{}` has several boundary entries", patch.name)))
                }
                (Some(spec), None) => {
                    u.push(spec.velocity.to_bc(self.physics.rho));
                    p.push(spec.pressure.to_bc());
                }
                (None, _) if patch.kind == PatchKind::Empty => {
                    u.push(BoundaryCondition::Empty);
                    p.push(BoundaryCondition::Empty);
                }
                (None, _) => return Err(ConfigError::Invalid(format!("patch `{}` has no boundary entry", patch.name))),
            }
        }
        Ok((u, p))
    }
}
