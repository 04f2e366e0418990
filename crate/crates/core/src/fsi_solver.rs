//! Time stepping for the coupled fluid / rigid-body system on a MAC grid.
//!
//! One step of size `dt`:
//! 1. semi-Lagrangian advection of the velocity (RK2 backtrace, bilinear sampling);
//! 2. implicit viscous update `(M/dt + K(ν)) u = M u*/dt` where `K = Σᵀ W Σ` is assembled
//!    from the staggered strain `Σ` and `W` holds the secant viscosity `ν(|D|)`; the
//!    nonlinearity is resolved by Picard iteration with Anderson mixing, split into
//!    implicit sub-steps if the full step stalls;
//! 3. `u += dt g`;
//! 4. density-weighted projection onto fields that are discretely solenoidal, vanish on
//!    wall-normal faces and are rigid on every body;
//! 5. per body in ascending radius order: rigid fit, overwrite, explicit advance;
//! 6. re-rasterization of the density.
//!
//! `M` is the lumped face mass `ρ_face h²`. Kinetic energy is measured in the same norm, so
//! substeps 2 and 4 never increase it.

use crate::constitutive::{conjugate, eval_potential, stress_select, Potential};
use crate::error::{Error, Result};
use crate::field_grid::{divergence, sym_gradient_with, Grid2, ScalarField, TensorField, VecField, WallRule};
use crate::geometry::{Sym2, Vec2};
use crate::linalg::{pcg, FivePoint, Multigrid, Tolerance};
use crate::restriction::{apply_rn, RestrictionConfig};
use crate::rigid_bodies::{
    check_inside, face_density, fit_rigid, project_to_rigid, rigid_basis, solve3, BodyMap, Cloud, FLUID,
};
use rayon::prelude::*;
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Regularization of `|D|` in the Bingham secant viscosity.
    pub bingham_eps: f64,
    pub picard_max_iter: usize,
    /// Relative fixed-point increment `|u_{k+1} − u_k| / |u_{k+1}|` of the viscous iteration.
    pub picard_tol: f64,
    /// Projection stops when `max |div u| ≤ projection_tol`.
    pub projection_tol: f64,
    pub max_linear_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            bingham_eps: 1e-6,
            picard_max_iter: 20,
            picard_tol: 1e-6,
            projection_tol: 1e-8,
            max_linear_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub t: f64,
    pub u: VecField,
    /// Projection pressure `λ/dt` of the last step.
    pub pressure: ScalarField,
    pub rho: ScalarField,
    pub rho_f: f64,
    pub cloud: Cloud,
    pub map: BodyMap,
    pub potential: Potential,
    pub g: Vec2,
    pub options: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyRecord {
    pub t: f64,
    /// `½ Σ ρ_face u² h²`.
    pub kinetic: f64,
    pub dissipation_f: f64,
    pub dissipation_fstar: f64,
    /// `∫ ρ g·u`.
    pub work: f64,
    /// `∫ F(D) + F*(S) − S:D` with `S` the exact selection.
    pub fenchel_gap_total: f64,
}

/// Per-step solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// `max |div u|` after the projection.
    pub max_divergence: f64,
    /// Fixed-point iterations summed over the viscous sub-steps.
    pub picard_iterations: usize,
    pub viscous_residual: f64,
    /// Implicit viscous sub-steps taken (1 unless the full step stalled).
    pub viscous_substeps: usize,
    pub projection_iterations: usize,
}

impl SimState {
    /// Rasterizes the cloud and makes `u0` admissible: wall-normal faces are zeroed, body
    /// faces take the bodies' rigid velocities and the result is projected. Body velocities
    /// are then re-read from the projected field.
    pub fn new(u0: VecField, cloud: Cloud, potential: Potential, rho_f: f64, g: Vec2) -> Result<Self> {
        potential.validate()?;
        if !(rho_f > 0.0 && rho_f.is_finite()) {
            return Err(Error::InvalidArgument(format!("fluid density must be positive, got {rho_f}")));
        }
        if !g.is_finite() || !u0.is_finite() {
            return Err(Error::InvalidArgument("initial velocity and body force must be finite".into()));
        }
        let grid = u0.grid;
        for (k, b) in cloud.bodies.iter().enumerate() {
            check_inside(b, &grid, k)?;
            let cells = crate::rigid_bodies::body_indicator(b, &grid).data.iter().filter(|v| **v > 0.0).count();
            if cells < 4 {
                return Err(Error::DegenerateBody { cells });
            }
        }
        let map = BodyMap::new(&cloud, &grid);
        let rho = map.density(&cloud, rho_f);
        let mut u = u0;
        zero_walls(&mut u);
        for (k, b) in cloud.bodies.iter().enumerate() {
            for_owned_faces(&map, k as u32, |axis, i, j, idx| {
                let w = b.rigid_velocity_at(grid.face_pos(axis, i, j));
                u.component_mut(axis)[idx] = w.component(axis);
            });
        }
        let mut s = SimState {
            t: 0.0,
            pressure: ScalarField::zeros(grid),
            u,
            rho,
            rho_f,
            cloud,
            map,
            potential,
            g,
            options: SolverOptions::default(),
        };
        let (_, q) = project(&mut s.u, &s.map, &s.rho, &s.cloud, s.options, None)?;
        for (b, qb) in s.cloud.bodies.iter_mut().zip(q) {
            if let Some((y, w)) = qb {
                b.y = y;
                b.omega = w;
            }
        }
        Ok(s)
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn grid(&self) -> Grid2 {
        self.u.grid
    }

    /// Advances by `dt` in place.
    pub fn advance(&mut self, dt: f64) -> Result<StepStats> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        check_cfl(self, dt)?;
        let grid = self.grid();
        let mut stats = StepStats::default();

        let mut u = advect(&self.u, dt);

        let (picard, residual, substeps) = viscous_update(&mut u, &self.rho, &self.potential, dt, self.options)?;
        stats.picard_iterations = picard;
        stats.viscous_residual = residual;
        stats.viscous_substeps = substeps;

        if self.g != Vec2::ZERO {
            u.u.iter_mut().for_each(|x| *x += dt * self.g.x);
            u.v.iter_mut().for_each(|x| *x += dt * self.g.y);
            zero_walls(&mut u);
        }

        let mut guess: Vec<f64> = self.pressure.data.iter().map(|p| p * dt).collect();
        let (iters, _) = project(&mut u, &self.map, &self.rho, &self.cloud, self.options, Some(&mut guess))?;
        stats.projection_iterations = iters;
        self.pressure.data = guess.iter().map(|l| l / dt).collect();
        stats.max_divergence = divergence(&u).max_abs();

        for k in 0..self.cloud.len() {
            let body = &self.cloud.bodies[k];
            let mut faces = Vec::new();
            for_owned_faces(&self.map, k as u32, |axis, i, j, _| faces.push((axis, i, j)));
            let fit = if faces.is_empty() { None } else { fit_rigid(&u, &self.rho, body.h, faces.iter().copied()) };
            let (y, omega) = match fit {
                Some(f) => f,
                // entirely covered by a larger body: moves with whatever covers it
                None => project_to_rigid(&u, body, &self.rho)?,
            };
            for &(axis, i, j) in &faces {
                let idx = if axis == 0 { grid.uf(i, j) } else { grid.vf(i, j) };
                let w = y + (grid.face_pos(axis, i, j) - body.h).perp() * omega;
                u.component_mut(axis)[idx] = w.component(axis);
            }
            self.cloud.bodies[k] = crate::rigid_bodies::advance_body_indexed(body, y, omega, dt, &grid, k)?;
        }

        self.u = u;
        self.map = BodyMap::new(&self.cloud, &grid);
        self.rho = self.map.density(&self.cloud, self.rho_f);
        self.t += dt;
        Ok(stats)
    }
}

/// One step on a copy.
pub fn step(s: &SimState, dt: f64) -> Result<SimState> {
    let mut out = s.clone();
    out.advance(dt)?;
    Ok(out)
}

fn zero_walls(u: &mut VecField) {
    let g = u.grid;
    for j in 0..g.ny() {
        u.u[g.uf(0, j)] = 0.0;
        u.u[g.uf(g.nx(), j)] = 0.0;
    }
    for i in 0..g.nx() {
        u.v[g.vf(i, 0)] = 0.0;
        u.v[g.vf(i, g.ny())] = 0.0;
    }
}

/// Calls `f(axis, i, j, flat_index)` for every face owned by body `owner`.
fn for_owned_faces(map: &BodyMap, owner: u32, mut f: impl FnMut(usize, usize, usize, usize)) {
    let g = map.grid;
    for j in 0..g.ny() {
        for i in 0..=g.nx() {
            let k = g.uf(i, j);
            if map.uface[k] == owner {
                f(0, i, j, k);
            }
        }
    }
    for j in 0..=g.ny() {
        for i in 0..g.nx() {
            let k = g.vf(i, j);
            if map.vface[k] == owner {
                f(1, i, j, k);
            }
        }
    }
}

/// Largest viscosity an explicit diffusion step would see; the Bingham yield term is not
/// counted.
pub fn effective_viscosity(s: &SimState) -> f64 {
    let d = sym_gradient_with(&s.u, WallRule::NoSlip);
    (0..d.xx.len()).fold(0.0, |m: f64, c| m.max(s.potential.flow_viscosity(d.get(c).norm())))
}

/// `dt ≤ 0.5 h / max|u|` and `dt ≤ 0.25 h² ρ_min / μ_eff`.
pub fn check_cfl(s: &SimState, dt: f64) -> Result<()> {
    let h = s.grid().h();
    let umax = s.u.max_abs();
    if umax > 0.0 && dt > 0.5 * h / umax {
        return Err(Error::CflViolated(format!(
            "dt = {dt} exceeds advective limit 0.5 h / max|u| = {}",
            0.5 * h / umax
        )));
    }
    let mu = effective_viscosity(s);
    let rho_min = s.rho.min();
    if mu > 0.0 && dt > 0.25 * h * h * rho_min / mu {
        return Err(Error::CflViolated(format!(
            "dt = {dt} exceeds viscous limit 0.25 h² ρ_min / μ_eff = {} (μ_eff = {mu})",
            0.25 * h * h * rho_min / mu
        )));
    }
    Ok(())
}

/// `safety` times the largest step [`check_cfl`] accepts for `s`; infinite at rest with
/// zero viscosity.
pub fn stable_dt(s: &SimState, safety: f64) -> f64 {
    let h = s.grid().h();
    let umax = s.u.max_abs();
    let mu = effective_viscosity(s);
    let adv = if umax > 0.0 { 0.5 * h / umax } else { f64::INFINITY };
    let visc = if mu > 0.0 { 0.25 * h * h * s.rho.min() / mu } else { f64::INFINITY };
    safety * adv.min(visc)
}

/// Semi-Lagrangian advection of every interior face value.
pub fn advect(u: &VecField, dt: f64) -> VecField {
    let g = u.grid;
    let mut out = VecField::zeros(g);
    for axis in 0..2 {
        let (cols, _) = g.face_dims(axis);
        out.component_mut(axis).par_chunks_mut(cols).enumerate().for_each(|(j, row)| {
            for (i, val) in row.iter_mut().enumerate() {
                let wall = if axis == 0 { i == 0 || i == g.nx() } else { j == 0 || j == g.ny() };
                if wall {
                    continue;
                }
                let x = g.face_pos(axis, i, j);
                let mid = x - u.sample(x) * (0.5 * dt);
                let dep = x - u.sample(mid) * dt;
                *val = if axis == 0 { u.sample_u(dep) } else { u.sample_v(dep) };
            }
        });
    }
    out
}

/// `K = Σᵀ W Σ` on the flattened face vector `[u; v]` with Dirichlet wall-normal faces.
struct ViscousOperator {
    grid: Grid2,
    /// Lumped mass over `dt`, per face.
    mass: Vec<f64>,
    wall: Vec<bool>,
    nu_cell: Vec<f64>,
    nu_node: Vec<f64>,
}

impl ViscousOperator {
    fn new(grid: Grid2, rho: &ScalarField, dt: f64) -> Self {
        let nu = grid.n_ufaces();
        let mut mass = vec![0.0; nu + grid.n_vfaces()];
        let mut wall = vec![false; mass.len()];
        for j in 0..grid.ny() {
            for i in 0..=grid.nx() {
                let k = grid.uf(i, j);
                mass[k] = face_density(rho, 0, i, j) / dt;
                wall[k] = i == 0 || i == grid.nx();
            }
        }
        for j in 0..=grid.ny() {
            for i in 0..grid.nx() {
                let k = nu + grid.vf(i, j);
                mass[k] = face_density(rho, 1, i, j) / dt;
                wall[k] = j == 0 || j == grid.ny();
            }
        }
        ViscousOperator {
            grid,
            mass,
            wall,
            nu_cell: vec![0.0; grid.n_cells()],
            nu_node: vec![0.0; grid.n_nodes()],
        }
    }

    fn set_viscosity(&mut self, u: &VecField, pot: &Potential, eps: f64) {
        let g = self.grid;
        let d = sym_gradient_with(u, WallRule::NoSlip);
        for (c, nu) in self.nu_cell.iter_mut().enumerate() {
            *nu = pot.secant_viscosity(d.get(c).norm(), eps);
        }
        for j in 0..=g.ny() {
            for i in 0..=g.nx() {
                let (mut s, mut n) = (0.0, 0.0);
                for (ci, cj) in [(i as isize - 1, j as isize - 1), (i as isize, j as isize - 1), (i as isize - 1, j as isize), (i as isize, j as isize)] {
                    if ci >= 0 && cj >= 0 && (ci as usize) < g.nx() && (cj as usize) < g.ny() {
                        s += self.nu_cell[g.cell(ci as usize, cj as usize)];
                        n += 1.0;
                    }
                }
                self.nu_node[g.node(i, j)] = s / n;
            }
        }
    }

    /// Off-diagonal strain stencil at node `(i, j)` as `(flat index, coefficient)`; the
    /// strain is `½ Σ c·x / h`. No-slip ghosts double the one-sided entries.
    fn node_stencil(&self, i: usize, j: usize) -> ([(usize, f64); 4], usize) {
        let g = self.grid;
        let nu = g.n_ufaces();
        let mut st = [(0usize, 0.0f64); 4];
        let mut n = 0;
        if i > 0 && i < g.nx() {
            match (j > 0, j < g.ny()) {
                (true, true) => {
                    st[n] = (g.uf(i, j), 1.0);
                    st[n + 1] = (g.uf(i, j - 1), -1.0);
                    n += 2;
                }
                (false, true) => {
                    st[n] = (g.uf(i, j), 2.0);
                    n += 1;
                }
                (true, false) => {
                    st[n] = (g.uf(i, j - 1), -2.0);
                    n += 1;
                }
                (false, false) => {}
            }
        }
        if j > 0 && j < g.ny() {
            match (i > 0, i < g.nx()) {
                (true, true) => {
                    st[n] = (nu + g.vf(i, j), 1.0);
                    st[n + 1] = (nu + g.vf(i - 1, j), -1.0);
                    n += 2;
                }
                (false, true) => {
                    st[n] = (nu + g.vf(i, j), 2.0);
                    n += 1;
                }
                (true, false) => {
                    st[n] = (nu + g.vf(i - 1, j), -2.0);
                    n += 1;
                }
                (false, false) => {}
            }
        }
        (st, n)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = self.grid;
        let nu = g.n_ufaces();
        let ih2 = 1.0 / (g.h() * g.h());
        let xv = |k: usize| if self.wall[k] { 0.0 } else { x[k] };
        for k in 0..y.len() {
            y[k] = self.mass[k] * x[k];
        }
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let w = 2.0 * self.nu_cell[g.cell(i, j)] * ih2;
                let (a, b) = (g.uf(i, j), g.uf(i + 1, j));
                let d = w * (xv(b) - xv(a));
                y[b] += d;
                y[a] -= d;
                let (a, b) = (nu + g.vf(i, j), nu + g.vf(i, j + 1));
                let d = w * (xv(b) - xv(a));
                y[b] += d;
                y[a] -= d;
            }
        }
        for j in 0..=g.ny() {
            for i in 0..=g.nx() {
                let (st, n) = self.node_stencil(i, j);
                if n == 0 {
                    continue;
                }
                let s: f64 = st[..n].iter().map(|&(k, c)| c * xv(k)).sum();
                let w = self.nu_node[g.node(i, j)] * ih2 * s;
                for &(k, c) in &st[..n] {
                    y[k] += w * c;
                }
            }
        }
        for k in 0..y.len() {
            if self.wall[k] {
                y[k] = self.mass[k] * x[k];
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let g = self.grid;
        let nu = g.n_ufaces();
        let ih2 = 1.0 / (g.h() * g.h());
        let mut d = self.mass.clone();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let w = 2.0 * self.nu_cell[g.cell(i, j)] * ih2;
                for k in [g.uf(i, j), g.uf(i + 1, j), nu + g.vf(i, j), nu + g.vf(i, j + 1)] {
                    d[k] += w;
                }
            }
        }
        for j in 0..=g.ny() {
            for i in 0..=g.nx() {
                let (st, n) = self.node_stencil(i, j);
                for &(k, c) in &st[..n] {
                    d[k] += self.nu_node[g.node(i, j)] * ih2 * c * c;
                }
            }
        }
        for k in 0..d.len() {
            if self.wall[k] {
                d[k] = self.mass[k];
            }
        }
        d
    }
}

fn flatten(u: &VecField) -> Vec<f64> {
    let mut x = u.u.clone();
    x.extend_from_slice(&u.v);
    x
}

fn unflatten(x: &[f64], u: &mut VecField) {
    let n = u.u.len();
    u.u.copy_from_slice(&x[..n]);
    u.v.copy_from_slice(&x[n..]);
}

fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Anderson mixing of fixed-point updates: keeps the last `depth` pairs
/// `(G(x_k), G(x_k) − x_k)` and returns `G(x_k) − ΔG γ` with `γ` minimizing
/// `|f_k − ΔF γ|`.
struct Anderson {
    depth: usize,
    g: VecDeque<Vec<f64>>,
    f: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson { depth, g: VecDeque::new(), f: VecDeque::new() }
    }

    fn reset(&mut self) {
        self.g.clear();
        self.f.clear();
    }

    fn next(&mut self, gk: Vec<f64>, fk: Vec<f64>) -> Vec<f64> {
        self.g.push_back(gk);
        self.f.push_back(fk);
        if self.g.len() > self.depth + 1 {
            self.g.pop_front();
            self.f.pop_front();
        }
        let m = self.g.len() - 1;
        let last = self.g.len() - 1;
        if m == 0 {
            return self.g[last].clone();
        }
        let n = self.g[0].len();
        let df: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|k| self.f[j + 1][k] - self.f[j][k]).collect()).collect();
        let mut a = vec![vec![0.0; m + 1]; m];
        for r in 0..m {
            for c in 0..m {
                a[r][c] = df[r].iter().zip(&df[c]).map(|(x, y)| x * y).sum();
            }
            a[r][m] = df[r].iter().zip(&self.f[last]).map(|(x, y)| x * y).sum();
        }
        let scale = (0..m).map(|r| a[r][r]).fold(0.0, f64::max);
        for (r, row) in a.iter_mut().enumerate() {
            row[r] += 1e-12 * scale;
        }
        let Some(gamma) = gauss(a) else {
            self.reset();
            return self.g_last_or_empty(n);
        };
        let mut x = self.g[last].clone();
        for (j, gj) in gamma.iter().enumerate() {
            for k in 0..n {
                x[k] -= gj * (self.g[j + 1][k] - self.g[j][k]);
            }
        }
        x
    }

    fn g_last_or_empty(&self, n: usize) -> Vec<f64> {
        self.g.back().cloned().unwrap_or_else(|| vec![0.0; n])
    }
}

/// Gaussian elimination with partial pivoting on an augmented `m × (m+1)` system.
fn gauss(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let m = a.len();
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if !(a[p][c].abs() > 0.0) {
            return None;
        }
        a.swap(c, p);
        for r in c + 1..m {
            let f = a[r][c] / a[c][c];
            for k in c..=m {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|k| a[r][k] * x[k]).sum();
        x[r] = (a[r][m] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Most implicit viscous sub-steps tried when a full-step fixed point stalls.
pub const MAX_VISCOUS_SUBSTEPS: usize = 8;

/// Backward-Euler viscous update over `dt`. A stalled fixed point is retried as 2, 4, …,
/// [`MAX_VISCOUS_SUBSTEPS`] implicit sub-steps; each keeps the iteration cap and is
/// dissipative on its own. Returns (iterations, last residual, sub-steps).
fn viscous_update(
    u: &mut VecField,
    rho: &ScalarField,
    pot: &Potential,
    dt: f64,
    opts: SolverOptions,
) -> Result<(usize, f64, usize)> {
    let start = u.clone();
    let mut spent = 0;
    let mut k = 1;
    loop {
        let mut w = start.clone();
        let mut total = 0;
        let mut outcome = Ok(0.0);
        for _ in 0..k {
            match viscous_solve(&mut w, rho, pot, dt / k as f64, opts) {
                Ok((it, res)) => {
                    total += it;
                    outcome = Ok(res);
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        match outcome {
            Ok(res) => {
                *u = w;
                return Ok((spent + total, res, k));
            }
            Err(Error::ViscousStalled { iterations, .. }) if k < MAX_VISCOUS_SUBSTEPS => {
                spent += total + iterations;
                k *= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Picard iteration for `(M/dt + K(ν(u))) u = M u*/dt`, in place, accelerated by Anderson
/// mixing. Returns the number of linear solves and the final relative residual
/// `|b − A(ν(u))u| / |b|`.
fn viscous_solve(
    u: &mut VecField,
    rho: &ScalarField,
    pot: &Potential,
    dt: f64,
    opts: SolverOptions,
) -> Result<(usize, f64)> {
    let grid = u.grid;
    let mut op = ViscousOperator::new(grid, rho, dt);
    let b: Vec<f64> = flatten(u).iter().zip(&op.mass).map(|(x, m)| x * m).collect();
    let bn = norm2(&b);
    if bn == 0.0 {
        return Ok((0, 0.0));
    }
    let mut x = flatten(u);
    let mut field = u.clone();
    let mut mixer = Anderson::new(5);
    let mut last = f64::INFINITY;
    for it in 1..=opts.picard_max_iter {
        unflatten(&x, &mut field);
        op.set_viscosity(&field, pot, opts.bingham_eps);
        let diag = op.diagonal();
        let mut y = x.clone();
        let rep = pcg(
            |p, q| op.apply(p, q),
            |r, z| {
                for k in 0..r.len() {
                    z[k] = r[k] / diag[k];
                }
            },
            &b,
            &mut y,
            Tolerance { rel_l2: 1e-3 * opts.picard_tol, abs_inf: 0.0, max_iter: opts.max_linear_iter },
        );
        if !rep.converged {
            return Err(Error::LinearSolve {
                context: "viscous update",
                residual: rep.residual_l2 / bn,
                iterations: rep.iterations,
            });
        }
        let f: Vec<f64> = y.iter().zip(&x).map(|(y, x)| y - x).collect();
        let yn = norm2(&y);
        // A constant viscosity makes the first solve exact.
        let res = if yn == 0.0 || matches!(pot, Potential::Newtonian { .. }) { 0.0 } else { norm2(&f) / yn };
        if res <= opts.picard_tol {
            unflatten(&y, u);
            return Ok((it, res));
        }
        if res > 2.0 * last {
            mixer.reset();
        }
        last = last.min(res);
        if it == opts.picard_max_iter {
            return Err(Error::ViscousStalled { residual: res, iterations: it });
        }
        x = mixer.next(y, f);
    }
    unreachable!()
}

/// Rigid-motion block of one body in the projection.
struct RigidBlock {
    gram_inv: [[f64; 3]; 3],
    /// `(cell, h Σ ±Φ)` for cells whose divergence sees this body's faces.
    rows: Vec<(usize, [f64; 3])>,
    faces: Vec<(usize, usize, usize)>,
    center: Vec2,
}

fn inv3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut out = [[0.0; 3]; 3];
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let col = solve3(m, e)?;
        for r in 0..3 {
            out[r][c] = col[r];
        }
    }
    Some(out)
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// Density-weighted projection of `u` onto `{div u = 0, u = 0 on wall-normal faces, u rigid
/// on each body's faces}`, in place.
///
/// With flux-form divergence `D` and lumped mass `M = ρ_face h²` the multiplier solves
/// `(D_f M_f⁻¹ D_fᵀ + Σ_b B_b G_b⁻¹ B_bᵀ) λ = −D ū` on every cell not interior to a single
/// body, where `B_b = D Φ_b`, `G_b = Φ_bᵀ M Φ_b` and `ū` holds the fluid faces of `u` and the
/// rigid fit on body faces. `guess` is the warm start for `λ` and receives the solution.
/// Returns the PCG iteration count and the rigid motion `(Y, ω)` of each body that owns
/// faces.
#[allow(clippy::type_complexity)]
fn project(
    u: &mut VecField,
    map: &BodyMap,
    rho: &ScalarField,
    cloud: &Cloud,
    opts: SolverOptions,
    guess: Option<&mut Vec<f64>>,
) -> Result<(usize, Vec<Option<(Vec2, f64)>>)> {
    let g = u.grid;
    let h = g.h();
    let n = g.n_cells();
    zero_walls(u);

    // rigid blocks
    let mut blocks: Vec<Option<RigidBlock>> = Vec::with_capacity(cloud.len());
    let mut rowsum = vec![[0.0f64; 3]; n];
    let mut touched: Vec<usize> = Vec::new();
    for (k, b) in cloud.bodies.iter().enumerate() {
        let mut faces = Vec::new();
        for_owned_faces(map, k as u32, |axis, i, j, _| faces.push((axis, i, j)));
        if faces.is_empty() {
            blocks.push(None);
            continue;
        }
        let mut gram = [[0.0; 3]; 3];
        for &(axis, i, j) in &faces {
            let phi = rigid_basis(axis, g.face_pos(axis, i, j), b.h);
            let m = face_density(rho, axis, i, j) * h * h;
            for r in 0..3 {
                for c in 0..3 {
                    gram[r][c] += m * phi[r] * phi[c];
                }
            }
            let (lo, hi) = if axis == 0 {
                ((i > 0).then(|| g.cell(i - 1, j)), (i < g.nx()).then(|| g.cell(i, j)))
            } else {
                ((j > 0).then(|| g.cell(i, j - 1)), (j < g.ny()).then(|| g.cell(i, j)))
            };
            // the face is the east/north face of `lo` (+) and the west/south face of `hi` (−)
            for (cell, sign) in [(lo, 1.0), (hi, -1.0)] {
                if let Some(c) = cell {
                    if rowsum[c] == [0.0; 3] {
                        touched.push(c);
                    }
                    for r in 0..3 {
                        rowsum[c][r] += sign * h * phi[r];
                    }
                }
            }
        }
        let gram_inv = inv3(gram).ok_or(Error::DegenerateBody { cells: map.cells_per_body[k] })?;
        touched.sort_unstable();
        touched.dedup();
        let rows: Vec<(usize, [f64; 3])> =
            touched.iter().filter(|&&c| rowsum[c] != [0.0; 3]).map(|&c| (c, rowsum[c])).collect();
        for &c in &touched {
            rowsum[c] = [0.0; 3];
        }
        touched.clear();
        blocks.push(Some(RigidBlock { gram_inv, rows, faces, center: b.h }));
    }

    // ū: rigid fit on body faces
    let mut fits: Vec<Option<[f64; 3]>> = Vec::with_capacity(blocks.len());
    for blk in &blocks {
        let Some(blk) = blk else {
            fits.push(None);
            continue;
        };
        let mut rhs = [0.0; 3];
        for &(axis, i, j) in &blk.faces {
            let phi = rigid_basis(axis, g.face_pos(axis, i, j), blk.center);
            let m = face_density(rho, axis, i, j) * h * h;
            let val = u.component(axis)[if axis == 0 { g.uf(i, j) } else { g.vf(i, j) }];
            for r in 0..3 {
                rhs[r] += m * phi[r] * val;
            }
        }
        let q = mat3(&blk.gram_inv, rhs);
        write_rigid(u, blk, q);
        fits.push(Some(q));
    }

    // fluid five-point part
    let mut a = FivePoint::new(g.nx(), g.ny());
    let mut parent: Vec<usize> = (0..n).collect();
    for j in 0..g.ny() {
        for i in 1..g.nx() {
            if map.uface[g.uf(i, j)] == FLUID {
                let c = g.cell(i - 1, j);
                a.add_edge(c, false, 1.0 / face_density(rho, 0, i, j));
                a.active[c] = true;
                a.active[c + 1] = true;
                union(&mut parent, c, c + 1);
            }
        }
    }
    for j in 1..g.ny() {
        for i in 0..g.nx() {
            if map.vface[g.vf(i, j)] == FLUID {
                let c = g.cell(i, j - 1);
                a.add_edge(c, true, 1.0 / face_density(rho, 1, i, j));
                a.active[c] = true;
                a.active[c + g.nx()] = true;
                union(&mut parent, c, c + g.nx());
            }
        }
    }
    let mut pre = a.clone();
    for blk in blocks.iter().flatten() {
        for &(c, r) in &blk.rows {
            a.active[c] = true;
            pre.active[c] = true;
            pre.diag[c] += dot3(r, mat3(&blk.gram_inv, r));
            union(&mut parent, c, blk.rows[0].0);
        }
    }

    let div = divergence(u);
    let mut b: Vec<f64> = (0..n).map(|c| if a.active[c] { -div.data[c] * h * h } else { 0.0 }).collect();
    // remove the mean per connected component
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for c in 0..n {
        if a.active[c] {
            let r = find(&mut parent, c);
            sum[r] += b[c];
            cnt[r] += 1;
        }
    }
    for c in 0..n {
        if a.active[c] {
            let r = find(&mut parent, c);
            b[c] -= sum[r] / cnt[r] as f64;
        }
    }

    let mg = Multigrid::new(&pre, 1.8);
    let mut lambda = match &guess {
        Some(x) if x.len() == n => (0..n).map(|c| if a.active[c] { x[c] } else { 0.0 }).collect(),
        _ => vec![0.0; n],
    };
    let mut tmp3: Vec<[f64; 3]> = vec![[0.0; 3]; blocks.len()];
    let rep = pcg(
        |x, y| {
            a.apply(x, y);
            for (blk, t) in blocks.iter().zip(tmp3.iter_mut()) {
                let Some(blk) = blk else { continue };
                let mut s = [0.0; 3];
                for &(c, r) in &blk.rows {
                    for k in 0..3 {
                        s[k] += r[k] * x[c];
                    }
                }
                *t = mat3(&blk.gram_inv, s);
                for &(c, r) in &blk.rows {
                    y[c] += dot3(r, *t);
                }
            }
        },
        |r, z| mg.apply(r, z),
        &b,
        &mut lambda,
        Tolerance { rel_l2: 0.0, abs_inf: opts.projection_tol * h * h, max_iter: opts.max_linear_iter },
    );
    if !rep.converged {
        return Err(Error::LinearSolve {
            context: "pressure projection",
            residual: rep.residual_inf / (h * h),
            iterations: rep.iterations,
        });
    }

    // u_f += M_f⁻¹ D_fᵀ λ
    for j in 0..g.ny() {
        for i in 1..g.nx() {
            let k = g.uf(i, j);
            if map.uface[k] == FLUID {
                u.u[k] += (lambda[g.cell(i - 1, j)] - lambda[g.cell(i, j)]) / (face_density(rho, 0, i, j) * h);
            }
        }
    }
    for j in 1..g.ny() {
        for i in 0..g.nx() {
            let k = g.vf(i, j);
            if map.vface[k] == FLUID {
                u.v[k] += (lambda[g.cell(i, j - 1)] - lambda[g.cell(i, j)]) / (face_density(rho, 1, i, j) * h);
            }
        }
    }
    let mut motions = Vec::with_capacity(blocks.len());
    for (blk, fit) in blocks.iter().zip(&fits) {
        let (Some(blk), Some(q0)) = (blk, fit) else {
            motions.push(None);
            continue;
        };
        let mut s = [0.0; 3];
        for &(c, r) in &blk.rows {
            for k in 0..3 {
                s[k] += r[k] * lambda[c];
            }
        }
        let dq = mat3(&blk.gram_inv, s);
        let q = [q0[0] + dq[0], q0[1] + dq[1], q0[2] + dq[2]];
        write_rigid(u, blk, q);
        motions.push(Some((Vec2::new(q[0], q[1]), q[2])));
    }
    if let Some(x) = guess {
        *x = lambda;
    }
    Ok((rep.iterations, motions))
}

fn write_rigid(u: &mut VecField, blk: &RigidBlock, q: [f64; 3]) {
    let g = u.grid;
    for &(axis, i, j) in &blk.faces {
        let phi = rigid_basis(axis, g.face_pos(axis, i, j), blk.center);
        let idx = if axis == 0 { g.uf(i, j) } else { g.vf(i, j) };
        u.component_mut(axis)[idx] = dot3(phi, q);
    }
}

/// `½ Σ ρ_face u² h²` over all faces.
pub fn kinetic_energy(u: &VecField, rho: &ScalarField) -> f64 {
    let g = u.grid;
    let mut e = 0.0;
    for axis in 0..2 {
        let (cols, rows) = g.face_dims(axis);
        let c = u.component(axis);
        for j in 0..rows {
            for i in 0..cols {
                let v = c[j * cols + i];
                if v != 0.0 {
                    e += face_density(rho, axis, i, j) * v * v;
                }
            }
        }
    }
    0.5 * e * g.h() * g.h()
}

/// Energy and duality diagnostics of a state. Strain is cell-centred with no-slip walls.
pub fn energy_record(s: &SimState) -> EnergyRecord {
    let g = s.grid();
    let h2 = g.h() * g.h();
    let d = sym_gradient_with(&s.u, WallRule::NoSlip);
    let pot = s.potential;
    // Fixed chunks summed in order keep the totals independent of the thread count.
    let n = d.xx.len();
    let parts: Vec<(f64, f64, f64)> = (0..n.div_ceil(4096))
        .into_par_iter()
        .map(|k| {
            let mut acc = (0.0, 0.0, 0.0);
            for c in k * 4096..n.min((k + 1) * 4096) {
                let dc = d.get(c);
                let sc = stress_select(&pot, dc);
                let (a, b) = (eval_potential(&pot, dc), conjugate(&pot, sc));
                acc.0 += a;
                acc.1 += b;
                acc.2 += a + b - sc.ddot(dc);
            }
            acc
        })
        .collect();
    let (f, fs, gap) = parts.iter().fold((0.0, 0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2));
    let mut work = 0.0;
    for axis in 0..2 {
        let gc = s.g.component(axis);
        if gc == 0.0 {
            continue;
        }
        let (cols, rows) = g.face_dims(axis);
        let c = s.u.component(axis);
        for j in 0..rows {
            for i in 0..cols {
                work += face_density(&s.rho, axis, i, j) * gc * c[j * cols + i];
            }
        }
    }
    EnergyRecord {
        t: s.t,
        kinetic: kinetic_energy(&s.u, &s.rho),
        dissipation_f: f * h2,
        dissipation_fstar: fs * h2,
        work: work * h2,
        fenchel_gap_total: gap * h2,
    }
}

/// Receives the state at the start of a run and after every step.
pub trait Observer {
    fn start(&mut self, _s: &SimState) -> Result<()> {
        Ok(())
    }
    fn step(&mut self, s: &SimState, record: &EnergyRecord, stats: &StepStats) -> Result<()>;
}

impl Observer for () {
    fn step(&mut self, _: &SimState, _: &EnergyRecord, _: &StepStats) -> Result<()> {
        Ok(())
    }
}

/// Steps of size `dt` up to `t_end` (the last one shortened if needed).
pub fn run(
    s0: SimState,
    t_end: f64,
    dt: f64,
    observer: &mut dyn Observer,
) -> Result<(SimState, Vec<EnergyRecord>)> {
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time must be non-negative, got {t_end}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut s = s0;
    let mut records = Vec::new();
    observer.start(&s)?;
    let t0 = s.t;
    let steps = step_count(t_end, dt);
    for k in 0..steps {
        let target = if k + 1 == steps { t0 + t_end } else { t0 + (k + 1) as f64 * dt };
        let stats = s.advance(target - s.t)?;
        s.t = target;
        let rec = energy_record(&s);
        observer.step(&s, &rec, &stats)?;
        records.push(rec);
    }
    Ok((s, records))
}

/// Number of steps `run` takes for `t_end` at `dt`.
pub fn step_count(t_end: f64, dt: f64) -> usize {
    if t_end <= 0.0 {
        0
    } else {
        ((t_end / dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Discrete energy inequality defect
/// `kinetic(T) + Σ dt (F + F*) − kinetic(0) − Σ dt work`; non-positive when the inequality
/// holds.
pub fn energy_defect(initial: &EnergyRecord, records: &[EnergyRecord]) -> f64 {
    let mut acc = 0.0;
    let mut t = initial.t;
    for r in records {
        let dt = r.t - t;
        acc += dt * (r.dissipation_f + r.dissipation_fstar - r.work);
        t = r.t;
    }
    records.last().map_or(0.0, |r| r.kinetic) + acc - if records.is_empty() { 0.0 } else { initial.kinetic }
}

/// A stored state: enough to evaluate the weak momentum balance.
#[derive(Debug, Clone)]
pub struct Frame {
    pub t: f64,
    pub u: VecField,
    pub rho: ScalarField,
    pub cloud: Cloud,
}

impl Frame {
    pub fn of(s: &SimState) -> Self {
        Frame { t: s.t, u: s.u.clone(), rho: s.rho.clone(), cloud: s.cloud.clone() }
    }
}

/// Frames of a run, including the initial state.
#[derive(Debug, Clone)]
pub struct History {
    pub potential: Potential,
    pub g: Vec2,
    pub frames: Vec<Frame>,
    every: usize,
    count: usize,
}

impl History {
    /// Keeps every `every`-th step.
    pub fn new(potential: Potential, g: Vec2, every: usize) -> Self {
        History { potential, g, frames: Vec::new(), every: every.max(1), count: 0 }
    }
}

impl Observer for History {
    fn start(&mut self, s: &SimState) -> Result<()> {
        self.frames.push(Frame::of(s));
        Ok(())
    }
    fn step(&mut self, s: &SimState, _: &EnergyRecord, _: &StepStats) -> Result<()> {
        self.count += 1;
        if self.count % self.every == 0 {
            self.frames.push(Frame::of(s));
        }
        Ok(())
    }
}

/// Test functions for the weak momentum balance.
#[derive(Debug, Clone)]
pub enum TestFunction {
    /// Used as is; must have zero symmetric gradient near every body in every frame.
    Fixed(VecField),
    /// Passed through the restriction cascade of each frame's cloud (radii enlarged by two
    /// cells), hence time dependent.
    Restricted(VecField),
}

/// Left minus right side of the weak momentum balance
/// `[∫ρu·φ]₀ᵀ = ∫₀ᵀ∫ ρu·∂ₜφ + ρ(u⊗u):Dφ − S:Dφ + ρg·φ`,
/// together with the sum of the magnitudes of its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakResidual {
    pub residual: f64,
    pub magnitude: f64,
}

impl WeakResidual {
    pub fn relative(&self) -> f64 {
        if self.magnitude > 0.0 {
            self.residual.abs() / self.magnitude
        } else {
            self.residual.abs()
        }
    }
}

fn face_inner(a: &VecField, b: &VecField, rho: &ScalarField) -> f64 {
    let g = a.grid;
    let mut s = 0.0;
    for axis in 0..2 {
        let (cols, rows) = g.face_dims(axis);
        let (x, y) = (a.component(axis), b.component(axis));
        for j in 0..rows {
            for i in 0..cols {
                let k = j * cols + i;
                if x[k] != 0.0 && y[k] != 0.0 {
                    s += face_density(rho, axis, i, j) * x[k] * y[k];
                }
            }
        }
    }
    s * g.h() * g.h()
}

fn test_field(phi: &TestFunction, frame: &Frame) -> Result<VecField> {
    match phi {
        TestFunction::Fixed(p) => {
            let d = sym_gradient_with(p, WallRule::NoSlip);
            let g = p.grid;
            let scale = 1.0 + d.max_norm();
            for (k, b) in frame.cloud.bodies.iter().enumerate() {
                let reach = b.bounding_radius() + 2.0 * g.h();
                let (i0, i1, j0, j1) = g.cell_window(b.h, reach);
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        if (g.cell_center(i, j) - b.h).norm() <= reach && d.get(g.cell(i, j)).norm() > 1e-8 * scale {
                            return Err(Error::TestClass(format!(
                                "symmetric gradient of the test function is {} on body {k} at t = {}",
                                d.get(g.cell(i, j)).norm(),
                                frame.t
                            )));
                        }
                    }
                }
            }
            Ok(p.clone())
        }
        TestFunction::Restricted(p) => {
            if frame.cloud.is_empty() {
                return Ok(p.clone());
            }
            let h = p.grid.h();
            let cfg = RestrictionConfig::new(
                frame.cloud.bodies.iter().map(|b| b.h).collect(),
                frame.cloud.bodies.iter().map(|b| b.bounding_radius() + 2.0 * h).collect(),
            )?;
            apply_rn(p, &cfg)
        }
    }
}

/// Integrand of the space-time part at one frame, and its absolute parts.
fn weak_integrand(hist: &History, frame: &Frame, phi: &VecField, dphi_dt: &VecField) -> (f64, f64) {
    let g = phi.grid;
    let h2 = g.h() * g.h();
    let dp = sym_gradient_with(phi, WallRule::NoSlip);
    let du = sym_gradient_with(&frame.u, WallRule::NoSlip);
    let (cu, cv) = frame.u.cell_centered();
    let mut conv = 0.0;
    let mut visc = 0.0;
    for c in 0..g.n_cells() {
        let dpc = dp.get(c);
        let r = frame.rho.data[c];
        let uu = Sym2::new(cu[c] * cu[c], cv[c] * cv[c], cu[c] * cv[c]);
        conv += r * uu.ddot(dpc);
        visc += stress_select(&hist.potential, du.get(c)).ddot(dpc);
    }
    let time = face_inner(&frame.u, dphi_dt, &frame.rho);
    let grav = face_inner(&VecField::constant(g, hist.g), phi, &frame.rho);
    let (conv, visc) = (conv * h2, visc * h2);
    (time + conv - visc + grav, time.abs() + conv.abs() + visc.abs() + grav.abs())
}

/// Residual of the weak momentum balance over a recorded run (trapezoidal rule in time).
pub fn weak_form_residual(hist: &History, phi: &TestFunction) -> Result<WeakResidual> {
    let fr = &hist.frames;
    if fr.len() < 2 {
        return Ok(WeakResidual { residual: 0.0, magnitude: 0.0 });
    }
    let phis: Vec<VecField> = fr.iter().map(|f| test_field(phi, f)).collect::<Result<_>>()?;
    let grid = phis[0].grid;
    let dphi: Vec<VecField> = (0..fr.len())
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(fr.len() - 1));
            let mut d = &phis[b] - &phis[a];
            let span = fr[b].t - fr[a].t;
            if span > 0.0 {
                d.scale(1.0 / span);
            } else {
                d = VecField::zeros(grid);
            }
            d
        })
        .collect();
    let vals: Vec<(f64, f64)> =
        (0..fr.len()).map(|k| weak_integrand(hist, &fr[k], &phis[k], &dphi[k])).collect();
    let (mut integral, mut mag) = (0.0, 0.0);
    for k in 1..fr.len() {
        let dt = fr[k].t - fr[k - 1].t;
        integral += 0.5 * dt * (vals[k].0 + vals[k - 1].0);
        mag += 0.5 * dt * (vals[k].1 + vals[k - 1].1);
    }
    let last = fr.len() - 1;
    let m1 = face_inner(&fr[last].u, &phis[last], &fr[last].rho);
    let m0 = face_inner(&fr[0].u, &phis[0], &fr[0].rho);
    Ok(WeakResidual { residual: (m1 - m0) - integral, magnitude: mag + m1.abs() + m0.abs() })
}

/// Symmetric gradient of `u` with no-slip walls; exposed for metrics.
pub fn strain(u: &VecField) -> TensorField {
    sym_gradient_with(u, WallRule::NoSlip)
}
