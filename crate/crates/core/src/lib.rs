//! Fluid–rigid-body cloud simulation with restricted test functions.

pub mod config;
pub mod constitutive;
pub mod error;
pub mod field_grid;
pub mod fsi_solver;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod output;
pub mod restriction;
pub mod rigid_bodies;

pub use config::{parse_config, ScenarioConfig};
pub use constitutive::{GrowthBounds, Potential};
pub use error::{ConfigError, Error, Result};
pub use field_grid::{Grid2, ScalarField, TensorField, VecField};
pub use fsi_solver::{EnergyRecord, SimState, SolverOptions};
pub use geometry::{Sym2, Vec2};
pub use harness::{StudyPlan, StudyResult};
pub use restriction::{NormReport, PropertyReport, RestrictionConfig};
pub use rigid_bodies::{BodyState, Cloud, Shape};
