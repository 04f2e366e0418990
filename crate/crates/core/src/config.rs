//! TOML scenario configuration. Unknown keys are rejected; see the README for the schema.

use crate::constitutive::Potential;
use crate::error::{ConfigError, Error, Result};
use crate::field_grid::Grid2;
use crate::fsi_solver::{stable_dt, SimState, SolverOptions};
use crate::geometry::Vec2;
use crate::harness::{InitialVelocity, Placement, StudyPlan};
use crate::rigid_bodies::{BodyState, Cloud};
use serde::Deserialize;

/// Safety factor on the CFL limit when `time.dt` is omitted.
pub const DEFAULT_CFL_SAFETY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridSection,
    pub fluid: FluidSection,
    #[serde(default)]
    pub initial: InitialSection,
    pub time: TimeSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub bodies: Option<Vec<BodySection>>,
    pub study: Option<StudySection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: Option<usize>,
    #[serde(default = "one")]
    pub lx: f64,
    pub ly: Option<f64>,
    #[serde(default)]
    pub origin: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidSection {
    #[serde(default = "one")]
    pub rho_f: f64,
    #[serde(default)]
    pub g: [f64; 2],
    pub potential: PotentialSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSection {
    Newtonian { mu: f64 },
    PowerLaw { alpha: f64, beta: f64, p: f64 },
    Bingham { yield_stress: f64, mu: f64 },
}

impl PotentialSection {
    pub fn potential(&self) -> Potential {
        match *self {
            PotentialSection::Newtonian { mu } => Potential::Newtonian { mu },
            PotentialSection::PowerLaw { alpha, beta, p } => Potential::PowerLaw { alpha, beta, p },
            PotentialSection::Bingham { yield_stress, mu } => Potential::Bingham { yield_stress, mu },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSection {
    Rest,
    Vortex {
        #[serde(default = "half")]
        amplitude: f64,
    },
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection::Vortex { amplitude: 0.5 }
    }
}

impl InitialSection {
    pub fn velocity(&self) -> InitialVelocity {
        match *self {
            InitialSection::Rest => InitialVelocity::Rest,
            InitialSection::Vortex { amplitude } => InitialVelocity::Vortex { amplitude },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(rename = "T")]
    pub t_end: f64,
    /// Filled from the CFL limit of the initial state when absent.
    pub dt: Option<f64>,
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub picard_max_iter: usize,
    pub picard_tol: f64,
    pub projection_tol: f64,
    pub bingham_eps: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = SolverOptions::default();
        SolverSection {
            picard_max_iter: o.picard_max_iter,
            picard_tol: o.picard_tol,
            projection_tol: o.projection_tol,
            bingham_eps: o.bingham_eps,
        }
    }
}

impl SolverSection {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            picard_max_iter: self.picard_max_iter,
            picard_tol: self.picard_tol,
            projection_tol: self.projection_tol,
            bingham_eps: self.bingham_eps,
            ..SolverOptions::default()
        }
    }
}

/// A disc (`radius`) or a convex polygon (`vertices` relative to `center`).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySection {
    pub center: [f64; 2],
    pub radius: Option<f64>,
    pub vertices: Option<Vec<[f64; 2]>>,
    pub density: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    Lattice,
    Random,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    #[serde(rename = "A", default = "two")]
    pub a: f64,
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "lattice")]
    pub placement: PlacementKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub heavy_beta: f64,
    #[serde(default = "two")]
    pub body_density: f64,
    #[serde(default = "two")]
    pub q: f64,
    #[serde(default = "ten")]
    pub density_bound: f64,
    #[serde(default = "one")]
    pub shape_lambda: f64,
    #[serde(default = "two")]
    pub shape_beta: f64,
    #[serde(default = "kappa")]
    pub radius_scale: f64,
    #[serde(default = "four")]
    pub min_cells: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn four() -> f64 {
    4.0
}
fn ten() -> f64 {
    10.0
}
fn half() -> f64 {
    0.5
}
fn kappa() -> f64 {
    0.75
}
fn lattice() -> PlacementKind {
    PlacementKind::Lattice
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> std::result::Result<ScenarioConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        if let Some(key) = msg.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
            let full = if path == "." || path.is_empty() { key.to_string() } else { path };
            return ConfigError::UnknownKey { path: full };
        }
        let at = match (inner.span(), path.as_str()) {
            (Some(span), "." | "") => {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}")
            }
            (Some(span), p) => {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                format!("{p} (line {line})")
            }
            (None, p) => p.to_string(),
        };
        ConfigError::Parse { path: at, message: msg.trim().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(path: &str, v: f64) -> std::result::Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(path, format!("must be positive and finite, got {v}")))
    }
}

fn finite(path: &str, v: f64) -> std::result::Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(path, format!("must be finite, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let g = &self.grid;
        if g.nx < 8 {
            return Err(ConfigError::invalid("grid.nx", format!("need at least 8 cells, got {}", g.nx)));
        }
        if let Some(ny) = g.ny {
            if ny < 8 {
                return Err(ConfigError::invalid("grid.ny", format!("need at least 8 cells, got {ny}")));
            }
        }
        positive("grid.lx", g.lx)?;
        if let Some(ly) = g.ly {
            positive("grid.ly", ly)?;
        }
        finite("grid.origin", g.origin[0])?;
        finite("grid.origin", g.origin[1])?;
        if self.grid().is_err() {
            return Err(ConfigError::invalid("grid", "cells must be square: lx / nx must equal ly / ny"));
        }

        positive("fluid.rho_f", self.fluid.rho_f)?;
        finite("fluid.g", self.fluid.g[0])?;
        finite("fluid.g", self.fluid.g[1])?;
        if let Err((key, why)) = self.fluid.potential.potential().check() {
            return Err(ConfigError::invalid(format!("fluid.potential.{key}"), why));
        }
        if let InitialSection::Vortex { amplitude } = self.initial {
            finite("initial.amplitude", amplitude)?;
        }

        positive("time.T", self.time.t_end)?;
        if let Some(dt) = self.time.dt {
            positive("time.dt", dt)?;
        }

        let s = &self.solver;
        if s.picard_max_iter == 0 {
            return Err(ConfigError::invalid("solver.picard_max_iter", "must be at least 1"));
        }
        positive("solver.picard_tol", s.picard_tol)?;
        positive("solver.projection_tol", s.projection_tol)?;
        positive("solver.bingham_eps", s.bingham_eps)?;

        match (&self.bodies, &self.study) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::invalid("bodies", "give either a bodies list or a [study] section, not both"))
            }
            (None, None) => {
                return Err(ConfigError::invalid("bodies", "one of a bodies list or a [study] section is required"))
            }
            (Some(bodies), None) => {
                for (k, b) in bodies.iter().enumerate() {
                    let at = |f: &str| format!("bodies[{k}].{f}");
                    finite(&at("center"), b.center[0])?;
                    finite(&at("center"), b.center[1])?;
                    positive(&at("density"), b.density)?;
                    finite(&at("velocity"), b.velocity[0])?;
                    finite(&at("velocity"), b.velocity[1])?;
                    finite(&at("omega"), b.omega)?;
                    match (b.radius, &b.vertices) {
                        (Some(r), None) => positive(&at("radius"), r)?,
                        (None, Some(v)) => {
                            if v.len() < 3 {
                                return Err(ConfigError::invalid(at("vertices"), "need at least 3 vertices"));
                            }
                        }
                        _ => return Err(ConfigError::invalid(at("radius"), "give exactly one of radius or vertices")),
                    }
                    if let Err(e) = body_state(b) {
                        return Err(ConfigError::invalid(format!("bodies[{k}]"), e.to_string()));
                    }
                }
            }
            (None, Some(st)) => {
                if !(st.a > 1.0 && st.a.is_finite()) {
                    return Err(ConfigError::invalid("study.A", format!("must exceed 1, got {}", st.a)));
                }
                if st.n_list.is_empty() || st.n_list.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(ConfigError::invalid("study.N_list", "must be non-empty and strictly ascending"));
                }
                if !(st.q > 1.0 && st.q.is_finite()) {
                    return Err(ConfigError::invalid("study.q", format!("must exceed 1, got {}", st.q)));
                }
                positive("study.body_density", st.body_density)?;
                positive("study.density_bound", st.density_bound)?;
                positive("study.shape_lambda", st.shape_lambda)?;
                positive("study.radius_scale", st.radius_scale)?;
                positive("study.min_cells", st.min_cells)?;
                finite("study.heavy_beta", st.heavy_beta)?;
                finite("study.shape_beta", st.shape_beta)?;
                if self.time.dt.is_none() {
                    return Err(ConfigError::invalid("time.dt", "studies need an explicit dt shared by all runs"));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid2> {
        let g = &self.grid;
        let ny = g.ny.unwrap_or(g.nx);
        let ly = g.ly.unwrap_or(g.lx * ny as f64 / g.nx as f64);
        Grid2::new(g.nx, ny, g.lx, ly, Vec2::from(g.origin))
    }

    pub fn potential(&self) -> Potential {
        self.fluid.potential.potential()
    }

    pub fn gravity(&self) -> Vec2 {
        Vec2::from(self.fluid.g)
    }

    /// Initial state of a `bodies` scenario, with velocities from the `[initial]` section.
    pub fn initial_state(&self) -> Result<SimState> {
        let bodies = self
            .bodies
            .as_ref()
            .ok_or_else(|| Error::Config(ConfigError::invalid("bodies", "this configuration describes a study")))?;
        let grid = self.grid()?;
        let cloud = Cloud::sorted(bodies.iter().map(body_state).collect::<Result<Vec<_>>>()?);
        let u0 = self.initial.velocity().field(grid);
        Ok(SimState::new(u0, cloud, self.potential(), self.fluid.rho_f, self.gravity())?
            .with_options(self.solver.options()))
    }

    /// `time.dt`, or the CFL limit of `s` times [`DEFAULT_CFL_SAFETY`], capped at `T`.
    pub fn time_step(&self, s: &SimState) -> f64 {
        self.time.dt.unwrap_or_else(|| stable_dt(s, DEFAULT_CFL_SAFETY).min(self.time.t_end))
    }

    pub fn study_plan(&self) -> Result<StudyPlan> {
        let st = self
            .study
            .as_ref()
            .ok_or_else(|| Error::Config(ConfigError::invalid("study", "this configuration lists explicit bodies")))?;
        let dt = self.time.dt.ok_or_else(|| Error::Config(ConfigError::invalid("time.dt", "required for studies")))?;
        Ok(StudyPlan {
            a: st.a,
            n_list: st.n_list.clone(),
            potential: self.potential(),
            q: st.q,
            grid: self.grid()?,
            t_end: self.time.t_end,
            dt,
            rho_f: self.fluid.rho_f,
            g: self.gravity(),
            u0: self.initial.velocity(),
            placement: match st.placement {
                PlacementKind::Lattice => Placement::Lattice,
                PlacementKind::Random => Placement::Random { seed: st.seed },
            },
            body_density: st.body_density,
            heavy_beta: st.heavy_beta,
            density_bound: st.density_bound,
            shape_lambda: st.shape_lambda,
            shape_beta: st.shape_beta,
            radius_scale: st.radius_scale,
            min_cells: st.min_cells,
            snapshot_every: self.time.snapshot_every,
            options: self.solver.options(),
        })
    }
}

fn body_state(b: &BodySection) -> Result<BodyState> {
    let c = Vec2::from(b.center);
    let body = match (b.radius, &b.vertices) {
        (Some(r), None) => BodyState::disc(c, r, b.density)?,
        (None, Some(v)) => BodyState::polygon(c, v.iter().map(|p| Vec2::from(*p)).collect(), b.density)?,
        _ => return Err(Error::InvalidArgument("give exactly one of radius or vertices".into())),
    };
    Ok(body.with_velocity(Vec2::from(b.velocity), b.omega))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[grid]
nx = 32

[fluid.potential]
kind = "newtonian"
mu = 1e-3

[time]
T = 0.1

[[bodies]]
center = [0.5, 0.5]
radius = 0.1
density = 2.0
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.grid().unwrap(), Grid2::square(32, 1.0).unwrap());
        assert_eq!(c.fluid.rho_f, 1.0);
        assert_eq!(c.initial, InitialSection::Vortex { amplitude: 0.5 });
        assert_eq!(c.solver.options(), SolverOptions::default());
        let s = c.initial_state().unwrap();
        let dt = c.time_step(&s);
        assert!(dt > 0.0 && crate::fsi_solver::check_cfl(&s, dt).is_ok());
    }

    #[test]
    fn negative_density_is_named() {
        let text = MINIMAL.replace("[fluid.potential]", "[fluid]\nrho_f = -1.0\n[fluid.potential]");
        let e = parse_config(&text).unwrap_err();
        assert!(e.to_string().starts_with("invalid value fluid.rho_f"), "{e}");
    }

    #[test]
    fn unknown_key_is_reported_with_path() {
        let text = MINIMAL.replace("nx = 32", "nx = 32\nnz = 4");
        let e = parse_config(&text).unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey { path: "grid.nz".into() });
        assert!(e.to_string().starts_with("unknown key"));
    }

    #[test]
    fn syntax_error_is_a_parse_error() {
        let e = parse_config("[grid\nnx = 3").unwrap_err();
        assert!(e.to_string().starts_with("parse error at"), "{e}");
    }

    #[test]
    fn wrong_type_reports_its_path() {
        let e = parse_config(&MINIMAL.replace("nx = 32", "nx = \"many\"")).unwrap_err();
        assert!(e.to_string().starts_with("parse error at grid.nx"), "{e}");
    }

    #[test]
    fn both_bodies_and_study_are_rejected() {
        let text = format!("{MINIMAL}\n[study]\nN_list = [1, 2]\n");
        let e = parse_config(&text).unwrap_err();
        assert!(e.to_string().contains("not both"), "{e}");
        let e = parse_config(&text.replace("[[bodies]]", "[[ignored]]")).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { .. }), "{e}");
    }

    #[test]
    fn neither_bodies_nor_study_is_rejected() {
        let text = MINIMAL.split("[[bodies]]").next().unwrap();
        assert!(parse_config(text).unwrap_err().to_string().contains("required"));
    }

    #[test]
    fn empty_body_list_counts_as_bodies() {
        let text = format!("bodies = []\n{}", MINIMAL.split("[[bodies]]").next().unwrap());
        let c = parse_config(&text).unwrap();
        assert!(c.initial_state().unwrap().cloud.is_empty());
    }

    #[test]
    fn unknown_potential_kind_is_rejected() {
        let e = parse_config(&MINIMAL.replace("\"newtonian\"", "\"oldtonian\"")).unwrap_err();
        assert!(e.to_string().contains("fluid.potential"), "{e}");
    }

    #[test]
    fn potential_parameters_are_validated() {
        let text = MINIMAL.replace("kind = \"newtonian\"\nmu = 1e-3", "kind = \"power_law\"\nalpha = 1.0\nbeta = 1.0\np = 1.5");
        let e = parse_config(&text).unwrap_err();
        assert!(e.to_string().starts_with("invalid value fluid.potential.p"), "{e}");
    }

    #[test]
    fn study_section_maps_to_plan() {
        let text = format!(
            "{}\n[study]\nA = 3.0\nN_list = [1, 2, 4]\nplacement = \"random\"\nseed = 9\n",
            MINIMAL.split("[[bodies]]").next().unwrap().replace("T = 0.1", "T = 0.1\ndt = 1e-3")
        );
        let plan = parse_config(&text).unwrap().study_plan().unwrap();
        assert_eq!(plan.a, 3.0);
        assert_eq!(plan.n_list, vec![1, 2, 4]);
        assert_eq!(plan.placement, Placement::Random { seed: 9 });
        assert_eq!(plan.dt, 1e-3);
    }

    #[test]
    fn study_requires_ascending_list_and_dt() {
        let base = MINIMAL.split("[[bodies]]").next().unwrap();
        let e = parse_config(&format!("{base}\n[study]\nN_list = [2, 1]\n")).unwrap_err();
        assert!(e.to_string().contains("study.N_list") || e.to_string().contains("time.dt"), "{e}");
        let e = parse_config(&format!("{}\n[study]\nN_list = [1]\n", base)).unwrap_err();
        assert!(e.to_string().starts_with("invalid value time.dt"), "{e}");
    }
}
