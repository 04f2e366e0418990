//! Scenario families with shrinking clouds of discs, the N-body versus body-free
//! comparison, and the capacity probe.
//!
//! For each `N` the cloud has `N` equal discs of radius
//! `r_N = L · min(κ (A^{−N}/N)^{1/2}, 0.25 / ⌈√N⌉)` in a box of side `L`, so the packing
//! volume satisfies `A^N vol[N] ≤ κ²`. The second bound keeps every disc inside its lattice
//! cell. Every run is compared with the body-free run started from the same velocity.

mod capacity;

pub use capacity::{capacity_probe, capacity_report, CapacityReport, CAPACITY_TOL};

use crate::constitutive::Potential;
use crate::error::{Error, Result};
use crate::field_grid::{sym_gradient_with, Grid2, LpNorm, VecField, WallRule};
use crate::fsi_solver::{
    energy_defect, energy_record, SolverOptions, run, step_count, EnergyRecord, Observer, SimState, StepStats,
};
use crate::geometry::Vec2;
use crate::output::{write_energy_csv, write_study_csv, SnapshotWriter, StudyCsvRow};
use crate::rigid_bodies::{BodyState, Cloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::sync::Arc;

/// Fraction of a lattice cell's half-width a disc may fill.
pub const LATTICE_FILL: f64 = 0.5;

/// Environment variable holding the number of concurrent study runs.
pub const WORKERS_ENV: &str = "FSICLOUD_WORKERS";

/// Reference frames kept for the space-time error integrals.
const METRIC_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Row-major on a `⌈√N⌉ × ⌈√N⌉` lattice of cell centres.
    Lattice,
    /// Uniform rejection sampling, seeded by `seed + N`.
    Random { seed: u64 },
}

/// Solenoidal initial velocity shared by every run of a study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialVelocity {
    Rest,
    /// Stream function `a sin²(πx̂) sin²(πŷ) / π` in box coordinates `x̂, ŷ ∈ [0, 1]`.
    Vortex { amplitude: f64 },
}

impl InitialVelocity {
    pub fn field(&self, grid: Grid2) -> VecField {
        match *self {
            InitialVelocity::Rest => VecField::zeros(grid),
            InitialVelocity::Vortex { amplitude } => {
                let (o, lx, ly) = (grid.origin(), grid.lx(), grid.ly());
                VecField::from_stream(grid, move |p| {
                    let sx = (std::f64::consts::PI * (p.x - o.x) / lx).sin();
                    let sy = (std::f64::consts::PI * (p.y - o.y) / ly).sin();
                    amplitude * sx * sx * sy * sy / std::f64::consts::PI
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPlan {
    /// Packing base `A > 1`.
    pub a: f64,
    pub n_list: Vec<usize>,
    pub potential: Potential,
    /// Density integrability exponent `q > 1`.
    pub q: f64,
    pub grid: Grid2,
    pub t_end: f64,
    pub dt: f64,
    pub rho_f: f64,
    pub g: Vec2,
    pub u0: InitialVelocity,
    pub placement: Placement,
    /// Body density at `N = 1`; `ρ_{n,N} = body_density · N^heavy_beta`.
    pub body_density: f64,
    pub heavy_beta: f64,
    /// Bound on `ρ_f^q |Ω_f| + Σ ρ_n^q |S_n|`.
    pub density_bound: f64,
    /// Shape constants in `λ r^β ≤ |S_n|`, checked when `p = d`.
    pub shape_lambda: f64,
    pub shape_beta: f64,
    /// `κ` in the radius rule.
    pub radius_scale: f64,
    /// Smallest resolvable radius in cells.
    pub min_cells: f64,
    /// Snapshot cadence in steps for study runs written to disk; 0 disables.
    pub snapshot_every: usize,
    pub options: SolverOptions,
}

impl StudyPlan {
    /// Defaults for a unit box: Newtonian `μ = 10⁻³`, `A = 2`, lattice placement.
    pub fn new(grid: Grid2, n_list: Vec<usize>) -> Self {
        StudyPlan {
            a: 2.0,
            n_list,
            potential: Potential::Newtonian { mu: 1e-3 },
            q: 2.0,
            grid,
            t_end: 0.5,
            dt: 2e-3,
            rho_f: 1.0,
            g: Vec2::ZERO,
            u0: InitialVelocity::Vortex { amplitude: 0.5 },
            placement: Placement::Lattice,
            body_density: 2.0,
            heavy_beta: 0.0,
            density_bound: 10.0,
            shape_lambda: 1.0,
            shape_beta: 2.0,
            radius_scale: 0.75,
            min_cells: 4.0,
            snapshot_every: 0,
            options: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} out of range: {v}")));
        if !(self.a > 1.0 && self.a.is_finite()) {
            return bad("A must exceed 1;", self.a);
        }
        if !(self.q > 1.0 && self.q.is_finite()) {
            return bad("q must exceed 1;", self.q);
        }
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!("N list must be non-empty and ascending, got {:?}", self.n_list)));
        }
        for (what, v) in [
            ("t_end", self.t_end),
            ("dt", self.dt),
            ("rho_f", self.rho_f),
            ("body_density", self.body_density),
            ("density_bound", self.density_bound),
            ("shape_lambda", self.shape_lambda),
            ("radius_scale", self.radius_scale),
            ("min_cells", self.min_cells),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(what, v);
            }
        }
        if !self.heavy_beta.is_finite() || !self.shape_beta.is_finite() {
            return bad("heavy_beta / shape_beta", self.heavy_beta);
        }
        self.potential.validate()
    }

    fn side(&self) -> f64 {
        self.grid.lx().min(self.grid.ly())
    }

    /// Radius of each of the `n` equal discs, in domain units.
    pub fn equal_radius(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let raw = (self.a.powf(-(n as f64)) / n as f64).sqrt();
        let m = (n as f64).sqrt().ceil();
        (self.radius_scale * raw).min(0.5 * LATTICE_FILL / m) * self.side()
    }

    /// `vol[N] = Σ (r_n / L)²`.
    pub fn packing_volume(&self, radii: &[f64]) -> f64 {
        let l = self.side();
        radii.iter().map(|r| (r / l).powi(2)).sum()
    }

    pub fn min_radius(&self) -> f64 {
        self.min_cells * self.grid.h()
    }

    /// Largest `N` such that every `N' ≤ N` has resolvable equal radii.
    pub fn max_feasible_n(&self) -> usize {
        let min = self.min_radius();
        (1..=100_000).take_while(|&n| self.equal_radius(n) >= min).last().unwrap_or(0)
    }

    pub fn density(&self, n: usize) -> f64 {
        self.body_density * (n.max(1) as f64).powf(self.heavy_beta)
    }
}

fn place(plan: &StudyPlan, radii: &[f64]) -> Result<Vec<Vec2>> {
    let g = plan.grid;
    let (o, h) = (g.origin(), g.h());
    let n = radii.len();
    match plan.placement {
        Placement::Lattice => {
            let m = (n as f64).sqrt().ceil() as usize;
            let (sx, sy) = (g.lx() / m as f64, g.ly() / m as f64);
            let room = 0.5 * sx.min(sy) - h;
            radii
                .iter()
                .enumerate()
                .map(|(k, &r)| {
                    if r > room {
                        return Err(Error::Placement(format!(
                            "radius {r} does not fit a lattice cell of half-width {}",
                            0.5 * sx.min(sy)
                        )));
                    }
                    Ok(Vec2::new(o.x + (k % m) as f64 * sx + 0.5 * sx, o.y + (k / m) as f64 * sy + 0.5 * sy))
                })
                .collect()
        }
        Placement::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n as u64));
            let gap = 2.0 * h;
            // Largest first so small discs fill the gaps.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]));
            let mut placed = vec![Vec2::ZERO; n];
            for &k in &order {
                let r = radii[k];
                let lo = r + gap;
                if 2.0 * lo >= g.lx().min(g.ly()) {
                    return Err(Error::Placement(format!("radius {r} does not fit the domain")));
                }
                let mut found = None;
                for _ in 0..100_000 {
                    let c = Vec2::new(o.x + rng.gen_range(lo..g.lx() - lo), o.y + rng.gen_range(lo..g.ly() - lo));
                    if order
                        .iter()
                        .take_while(|&&j| j != k)
                        .all(|&j| (placed[j] - c).norm() >= radii[j] + r + gap)
                    {
                        found = Some(c);
                        break;
                    }
                }
                let c = found.ok_or_else(|| {
                    Error::Placement(format!("no free position for body {k} of radius {r} after 100000 draws"))
                })?;
                placed[k] = c;
            }
            Ok(placed)
        }
    }
}

/// The `N`-disc scenario of `plan` (equal radii, body-free for `N = 0`).
pub fn build_scenario(plan: &StudyPlan, n: usize) -> Result<SimState> {
    let r = plan.equal_radius(n);
    if n > 0 && r < plan.min_radius() {
        return Err(Error::UnresolvableRadius {
            n,
            radius: r,
            min_radius: plan.min_radius(),
            max_feasible: plan.max_feasible_n(),
        });
    }
    build_scenario_with_radii(plan, &vec![r; n])
}

/// Scenario with the given disc radii, in body order. Checks the hypotheses it can
/// decide mechanically and names the first one that fails.
pub fn build_scenario_with_radii(plan: &StudyPlan, radii: &[f64]) -> Result<SimState> {
    plan.validate()?;
    let n = radii.len();
    if let Some(r) = radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::hypothesis("w10a", format!("body radius must be positive, got {r}")));
    }
    if let Some(k) = radii.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::hypothesis(
            "i1",
            format!("radii must be ascending, r[{k}] = {} > r[{}] = {}", radii[k], k + 1, radii[k + 1]),
        ));
    }
    let vol = plan.packing_volume(radii);
    let scaled = plan.a.powf(n as f64) * vol;
    if scaled > 1.0 + 1e-12 {
        return Err(Error::hypothesis(
            "w14",
            format!("A^N vol[N] = {scaled:.6} exceeds 1 (A = {}, N = {n}, vol[N] = {vol:.6e})", plan.a),
        ));
    }
    if let Some(&r) = radii.first() {
        if r < plan.min_radius() {
            return Err(Error::UnresolvableRadius {
                n,
                radius: r,
                min_radius: plan.min_radius(),
                max_feasible: plan.max_feasible_n(),
            });
        }
    }
    let u0 = plan.u0.field(plan.grid);
    let centers = place(plan, radii)?;
    let rho = plan.density(n);
    let bodies = centers
        .iter()
        .zip(radii)
        .map(|(c, r)| Ok(BodyState::disc(*c, *r, rho)?.with_velocity(u0.sample(*c), 0.0)))
        .collect::<Result<Vec<_>>>()?;
    check_shape(plan, &bodies)?;
    check_density(plan, &bodies)?;
    let cloud = Cloud::new(bodies)?;
    Ok(SimState::new(u0, cloud, plan.potential, plan.rho_f, plan.g)?.with_options(plan.options))
}

fn check_shape(plan: &StudyPlan, bodies: &[BodyState]) -> Result<()> {
    for (k, b) in bodies.iter().enumerate() {
        if !(b.area() > 0.0) {
            return Err(Error::hypothesis("w10a", format!("body {k} has zero area")));
        }
    }
    if plan.potential.exponent() != 2.0 {
        return Ok(());
    }
    if plan.shape_beta < 2.0 {
        return Err(Error::hypothesis("w10", format!("β = {} is below d = 2", plan.shape_beta)));
    }
    let l = plan.side();
    for (k, b) in bodies.iter().enumerate() {
        let r = b.bounding_radius() / l;
        let area = b.area() / (l * l);
        if plan.shape_lambda * r.powf(plan.shape_beta) > area * (1.0 + 1e-12) {
            return Err(Error::hypothesis(
                "w10",
                format!(
                    "body {k}: λ r^β = {:.6e} exceeds |S| = {area:.6e} (λ = {}, β = {})",
                    plan.shape_lambda * r.powf(plan.shape_beta),
                    plan.shape_lambda,
                    plan.shape_beta
                ),
            ));
        }
    }
    Ok(())
}

fn check_density(plan: &StudyPlan, bodies: &[BodyState]) -> Result<()> {
    let solid: f64 = bodies.iter().map(|b| b.area()).sum();
    let fluid = plan.grid.area() - solid;
    let total = plan.rho_f.powf(plan.q) * fluid + bodies.iter().map(|b| b.density.powf(plan.q) * b.area()).sum::<f64>();
    if total > plan.density_bound {
        return Err(Error::hypothesis(
            "w9",
            format!("ρ_f^q|Ω_f| + Σ ρ_n^q|S_n| = {total:.6} exceeds the bound {} (q = {})", plan.density_bound, plan.q),
        ));
    }
    Ok(())
}

/// Metrics of one `N`-body run against the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    /// `‖u_N − u_ref‖_{L²((0,T)×Ω)}`.
    pub err_l2: f64,
    /// `‖D u_N − D u_ref‖_{L^p((0,T)×Ω)}` with `p` the potential's exponent.
    pub err_grad_lp: f64,
    /// Energy inequality defect divided by the initial kinetic energy; `≤ 0` when the
    /// discrete inequality holds.
    pub energy_drift: f64,
    pub max_gap: f64,
    /// `max_t max_n |Y_n|`, logged for the rigid-velocity bound.
    pub max_rigid_speed: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub radius: f64,
    pub vol_n: f64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

impl StudyRow {
    pub fn csv(&self) -> StudyCsvRow {
        let nan = f64::NAN;
        let m = self.outcome.as_ref().ok();
        StudyCsvRow {
            n: self.n,
            vol_n: self.vol_n,
            err_l2: m.map_or(nan, |m| m.err_l2),
            err_grad_lp: m.map_or(nan, |m| m.err_grad_lp),
            energy_drift: m.map_or(nan, |m| m.energy_drift),
            max_gap: m.map_or(nan, |m| m.max_gap),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceInfo {
    pub steps: usize,
    pub samples: usize,
    pub kinetic_start: f64,
    pub kinetic_end: f64,
    pub energy_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub reference: ReferenceInfo,
    pub max_feasible_n: usize,
}

impl StudyResult {
    pub fn row(&self, n: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.n == n)
    }
}

/// Velocity frames of the reference run at the sampled steps.
struct Reference {
    stride: usize,
    steps: usize,
    frames: Vec<(f64, VecField)>,
}

impl Reference {
    fn sampled(&self, step: usize) -> bool {
        step % self.stride == 0 || step == self.steps
    }
}

struct RefRecorder {
    reference: Reference,
    step: usize,
}

impl Observer for RefRecorder {
    fn start(&mut self, s: &SimState) -> Result<()> {
        self.reference.frames.push((s.t, s.u.clone()));
        Ok(())
    }

    fn step(&mut self, s: &SimState, _: &EnergyRecord, _: &StepStats) -> Result<()> {
        self.step += 1;
        if self.reference.sampled(self.step) {
            self.reference.frames.push((s.t, s.u.clone()));
        }
        Ok(())
    }
}

/// Accumulates trapezoidal space-time error integrals against the reference.
struct Comparison {
    reference: Arc<Reference>,
    p: f64,
    step: usize,
    frame: usize,
    last: Option<(f64, f64, f64)>,
    l2: f64,
    grad: f64,
    max_speed: f64,
    initial: Option<EnergyRecord>,
    records: Vec<EnergyRecord>,
    snapshots: Option<SnapshotWriter>,
}

impl Comparison {
    fn sample(&mut self, s: &SimState) -> Result<()> {
        let (t, ref_u) = &self.reference.frames[self.frame];
        if (t - s.t).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(Error::InvalidArgument(format!("time axes differ: {} vs {t}", s.t)));
        }
        self.frame += 1;
        let diff = &s.u - ref_u;
        let e2 = diff.lp_norm(2.0)?.powi(2);
        let ep = sym_gradient_with(&diff, WallRule::NoSlip).lp_norm(self.p)?.powf(self.p);
        if let Some((t0, a0, b0)) = self.last {
            let dt = s.t - t0;
            self.l2 += 0.5 * dt * (a0 + e2);
            self.grad += 0.5 * dt * (b0 + ep);
        }
        self.last = Some((s.t, e2, ep));
        Ok(())
    }

    fn track(&mut self, s: &SimState) {
        for b in &s.cloud.bodies {
            self.max_speed = self.max_speed.max(b.y.norm());
        }
    }
}

impl Observer for Comparison {
    fn start(&mut self, s: &SimState) -> Result<()> {
        self.initial = Some(energy_record(s));
        self.track(s);
        if let Some(w) = self.snapshots.as_mut() {
            w.start(s)?;
        }
        self.sample(s)
    }

    fn step(&mut self, s: &SimState, rec: &EnergyRecord, stats: &StepStats) -> Result<()> {
        self.step += 1;
        self.records.push(*rec);
        self.track(s);
        if let Some(w) = self.snapshots.as_mut() {
            w.step(s, rec, stats)?;
        }
        if self.reference.sampled(self.step) {
            self.sample(s)?;
        }
        Ok(())
    }
}

/// Number of concurrent runs: `FSICLOUD_WORKERS` if set to a positive integer, else the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn relative_drift(initial: &EnergyRecord, records: &[EnergyRecord]) -> f64 {
    energy_defect(initial, records) / initial.kinetic.max(f64::MIN_POSITIVE)
}

fn compare_run(
    plan: &StudyPlan,
    n: usize,
    reference: &Arc<Reference>,
    dir: Option<&Path>,
) -> Result<RunMetrics> {
    let s0 = build_scenario(plan, n)?;
    let snapshots = match dir {
        Some(d) if plan.snapshot_every > 0 => Some(SnapshotWriter::new(d.join("snapshots"), plan.snapshot_every)?),
        _ => None,
    };
    let mut cmp = Comparison {
        reference: Arc::clone(reference),
        p: plan.potential.exponent(),
        step: 0,
        frame: 0,
        last: None,
        l2: 0.0,
        grad: 0.0,
        max_speed: 0.0,
        initial: None,
        records: Vec::new(),
        snapshots,
    };
    run(s0, plan.t_end, plan.dt, &mut cmp)?;
    let initial = cmp.initial.expect("start was observed");
    if let Some(d) = dir {
        let mut all = vec![initial];
        all.extend_from_slice(&cmp.records);
        write_energy_csv(&d.join("energy.csv"), &all)?;
    }
    Ok(RunMetrics {
        err_l2: cmp.l2.sqrt(),
        err_grad_lp: cmp.grad.powf(1.0 / cmp.p),
        energy_drift: relative_drift(&initial, &cmp.records),
        max_gap: cmp.records.iter().map(|r| r.fenchel_gap_total).fold(0.0, f64::max),
        max_rigid_speed: cmp.max_speed,
        steps: cmp.step,
    })
}

/// Runs the body-free reference, then every `N` of the plan concurrently, and compares.
/// Failures of individual runs are recorded in their rows.
pub fn run_study(plan: &StudyPlan) -> Result<StudyResult> {
    run_study_in(plan, None)
}

/// As [`run_study`]; with `out` set, writes `study.csv`, `reference/energy.csv` and one
/// `run_N<NNN>/` directory per `N` with `energy.csv` and snapshots.
pub fn run_study_in(plan: &StudyPlan, out: Option<&Path>) -> Result<StudyResult> {
    plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| study_body(plan, out))
}

fn study_body(plan: &StudyPlan, out: Option<&Path>) -> Result<StudyResult> {
    let steps = step_count(plan.t_end, plan.dt);
    let stride = steps.div_ceil(METRIC_SAMPLES).max(1);
    let s0 = build_scenario(plan, 0)?;
    let initial = energy_record(&s0);
    let mut rec = RefRecorder { reference: Reference { stride, steps, frames: Vec::new() }, step: 0 };
    let snap_dir = out.map(|d| d.join("reference"));
    let (_, records) = match (&snap_dir, plan.snapshot_every) {
        (Some(d), every) if every > 0 => {
            struct Both<'a>(&'a mut RefRecorder, SnapshotWriter);
            impl Observer for Both<'_> {
                fn start(&mut self, s: &SimState) -> Result<()> {
                    self.0.start(s)?;
                    self.1.start(s)
                }
                fn step(&mut self, s: &SimState, r: &EnergyRecord, st: &StepStats) -> Result<()> {
                    self.0.step(s, r, st)?;
                    self.1.step(s, r, st)
                }
            }
            let w = SnapshotWriter::new(d.join("snapshots"), every)?;
            run(s0, plan.t_end, plan.dt, &mut Both(&mut rec, w))?
        }
        _ => run(s0, plan.t_end, plan.dt, &mut rec)?,
    };
    if let Some(d) = &snap_dir {
        std::fs::create_dir_all(d)?;
        let mut all = vec![initial];
        all.extend_from_slice(&records);
        write_energy_csv(&d.join("energy.csv"), &all)?;
    }
    let reference_info = ReferenceInfo {
        steps,
        samples: rec.reference.frames.len(),
        kinetic_start: initial.kinetic,
        kinetic_end: records.last().map_or(initial.kinetic, |r| r.kinetic),
        energy_drift: relative_drift(&initial, &records),
    };
    let reference = Arc::new(rec.reference);

    let rows: Vec<StudyRow> = plan
        .n_list
        .par_iter()
        .map(|&n| {
            let radius = plan.equal_radius(n);
            let dir = out.map(|d| d.join(format!("run_N{n:03}")));
            let outcome = (|| {
                if let Some(d) = &dir {
                    std::fs::create_dir_all(d)?;
                }
                compare_run(plan, n, &reference, dir.as_deref())
            })()
            .map_err(|e| e.to_string());
            StudyRow { n, radius, vol_n: plan.packing_volume(&vec![radius; n]), outcome }
        })
        .collect();
    let result = StudyResult { rows, reference: reference_info, max_feasible_n: plan.max_feasible_n() };
    if let Some(d) = out {
        let csv: Vec<StudyCsvRow> = result.rows.iter().map(StudyRow::csv).collect();
        write_study_csv(&d.join("study.csv"), &csv)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(n: usize) -> StudyPlan {
        StudyPlan::new(Grid2::square(n, 1.0).unwrap(), vec![1, 2, 4])
    }

    #[test]
    fn raw_radius_arithmetic() {
        // (A^{-N}/N)^{1/2} before scaling and clamping.
        let mut p = plan(256);
        p.radius_scale = 1.0;
        p.grid = Grid2::square(256, 100.0).unwrap();
        assert!((p.equal_radius(4) / 100.0 - 0.125).abs() < 1e-15);
        assert!((p.equal_radius(1) / 100.0 - 0.25).abs() < 1e-15, "N = 1 is clamped by the lattice");
    }

    #[test]
    fn packing_volume_respects_base() {
        let p = plan(256);
        for n in 1..=8 {
            let r = p.equal_radius(n);
            let scaled = p.a.powi(n as i32) * p.packing_volume(&vec![r; n]);
            assert!(scaled <= p.radius_scale.powi(2) + 1e-12, "N = {n}: {scaled}");
        }
    }

    #[test]
    fn headline_grid_resolves_eight_discs() {
        let p = plan(256);
        assert!(p.max_feasible_n() >= 8);
        assert!(p.equal_radius(8) >= 4.0 * p.grid.h());
        assert!(p.equal_radius(p.max_feasible_n() + 1) < 4.0 * p.grid.h());
    }

    #[test]
    fn unresolvable_radius_reports_cap() {
        let p = plan(64);
        let cap = p.max_feasible_n();
        match build_scenario(&p, cap + 1).unwrap_err() {
            Error::UnresolvableRadius { max_feasible, n, .. } => {
                assert_eq!(max_feasible, cap);
                assert_eq!(n, cap + 1);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn lattice_centres_are_inside_and_disjoint() {
        let p = plan(128);
        for n in [1, 2, 3, 5, 6] {
            let r = p.equal_radius(n);
            let c = place(&p, &vec![r; n]).unwrap();
            for (a, ca) in c.iter().enumerate() {
                assert!(p.grid.boundary_distance(*ca) > r);
                for cb in &c[a + 1..] {
                    assert!((*ca - *cb).norm() > 2.0 * r);
                }
            }
        }
    }

    #[test]
    fn random_placement_is_seeded() {
        let mut p = plan(128);
        p.placement = Placement::Random { seed: 7 };
        let r = vec![0.05; 5];
        assert_eq!(place(&p, &r).unwrap(), place(&p, &r).unwrap());
        p.placement = Placement::Random { seed: 8 };
        let other = place(&p, &r).unwrap();
        p.placement = Placement::Random { seed: 7 };
        assert_ne!(place(&p, &r).unwrap(), other);
    }

    #[test]
    fn worker_env_is_honoured() {
        // Only checks parsing; the variable is not touched to keep tests independent.
        assert!(worker_count() >= 1);
    }
}
