#![allow(dead_code)]

use fsicloud::field_grid::{Grid2, VecField};
use fsicloud::geometry::Vec2;
use fsicloud::restriction::{default_sampler, properties_of, apply_rn, RestrictionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn unit_grid(n: usize) -> Grid2 {
    Grid2::square(n, 1.0).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn point<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Vec2 {
    Vec2::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

/// Two bodies with `|h₁ − h₂| + 2r₁ ≤ 5r₂`: the second stage's ball swallows the first.
pub fn nested_pair<R: Rng>(rng: &mut R) -> RestrictionConfig {
    let r1 = rng.gen_range(0.02..0.03);
    let r2 = rng.gen_range(r1..0.04);
    let h2 = point(rng, 0.35, 0.65);
    let reach = 0.9 * (5.0 * r2 - 2.0 * r1);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let d = rng.gen_range(0.0..reach);
    let h1 = h2 + Vec2::new(d * dir.cos(), d * dir.sin());
    RestrictionConfig::new(vec![h1, h2], vec![r1, r2]).unwrap()
}

/// One to three bodies with ascending radii and centres anywhere in `[0.15, 0.85]²`.
pub fn scattered<R: Rng>(rng: &mut R) -> RestrictionConfig {
    let n = rng.gen_range(1..=3);
    let mut radii: Vec<f64> = (0..n).map(|_| rng.gen_range(0.022..0.035)).collect();
    radii.sort_by(f64::total_cmp);
    let centers = (0..n).map(|_| point(rng, 0.15, 0.85)).collect();
    RestrictionConfig::new(centers, radii).unwrap()
}

pub fn is_nested(cfg: &RestrictionConfig) -> bool {
    let (c, r) = (cfg.centers(), cfg.radii());
    (1..cfg.len()).any(|i| (0..i).any(|k| (c[k] - c[i]).norm() + 2.0 * r[k] <= 5.0 * r[i]))
}

/// `configs` configurations, the first `nested` of them nested pairs.
pub fn suite_configs(seed: u64, configs: usize, nested: usize) -> Vec<RestrictionConfig> {
    let mut rng = rng(seed);
    (0..configs).map(|k| if k < nested { nested_pair(&mut rng) } else { scattered(&mut rng) }).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteReport {
    pub applications: usize,
    pub nested_configs: usize,
    pub max_divergence: f64,
    pub locality_exact: bool,
    pub constancy: f64,
}

/// Applies `R_N` of every configuration to `fields` random solenoidal fields on an `n²`
/// grid and keeps the worst property values.
pub fn restriction_suite(n: usize, configs: &[RestrictionConfig], fields: usize, seed: u64) -> SuiteReport {
    let g = unit_grid(n);
    let reports: Vec<_> = configs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(ci, cfg)| {
            let sampler = default_sampler(cfg);
            (0..fields).map(move |t| (ci, cfg, sampler, t))
        })
        .map(|(ci, cfg, sampler, t)| {
            let u = sampler.sample(&g, &mut rng(seed ^ ((ci as u64) << 32) ^ t as u64));
            let out = apply_rn(&u, cfg).unwrap();
            properties_of(&u, &out, cfg)
        })
        .collect();
    let mut rep = SuiteReport {
        applications: reports.len(),
        nested_configs: configs.iter().filter(|c| is_nested(c)).count(),
        locality_exact: true,
        ..Default::default()
    };
    for r in reports {
        rep.max_divergence = rep.max_divergence.max(r.max_divergence);
        rep.locality_exact &= r.locality_exact;
        rep.constancy = rep.constancy.max(r.constancy);
    }
    rep
}

/// Discrete L² norm of a face field.
pub fn l2(u: &VecField) -> f64 {
    u.dot(u).sqrt()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HDerivativeReport {
    /// Worst `‖analytic − fd‖₂ / ‖fd‖₂` over fields and directions.
    pub rel_error: f64,
    /// Largest `|analytic|` on faces outside `B_{2r}(h)`.
    pub outside: f64,
}

/// Compares `h_derivative` with the central difference of `apply_r` in the centre, step
/// `h_grid / 4`, on `trials` random solenoidal fields.
pub fn h_derivative_check(n: usize, r: f64, trials: usize, seed: u64) -> HDerivativeReport {
    use fsicloud::field_grid::SolenoidalSampler;
    use fsicloud::restriction::{apply_r, h_derivative};
    let g = unit_grid(n);
    let h = Vec2::new(0.5, 0.5);
    let sampler = SolenoidalSampler { center: h, support: 0.4, wavelength: 0.25, modes: 8 };
    let delta = g.h() / 4.0;
    let rows: Vec<HDerivativeReport> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let u = sampler.sample(&g, &mut rng(seed + t as u64));
            let an = h_derivative(&u, h, r).unwrap();
            let mut rep = HDerivativeReport::default();
            for (k, a) in an.iter().enumerate() {
                let e = Vec2::unit(k) * delta;
                let mut fd = &apply_r(&u, h + e, r).unwrap() - &apply_r(&u, h - e, r).unwrap();
                fd.scale(0.5 / delta);
                rep.rel_error = rep.rel_error.max(l2(&(a - &fd)) / l2(&fd));
                for comp in 0..2 {
                    let (cols, rows) = g.face_dims(comp);
                    for j in 0..rows {
                        for i in 0..cols {
                            if (g.face_pos(comp, i, j) - h).norm() >= 2.0 * r {
                                rep.outside = rep.outside.max(a.component(comp)[j * cols + i].abs());
                            }
                        }
                    }
                }
            }
            rep
        })
        .collect();
    rows.into_iter().fold(HDerivativeReport::default(), |a, b| HDerivativeReport {
        rel_error: a.rel_error.max(b.rel_error),
        outside: a.outside.max(b.outside),
    })
}

use fsicloud::constitutive::{fenchel_gap, stress_select, Potential};
use fsicloud::geometry::Sym2;

pub fn random_potential<R: Rng>(rng: &mut R) -> Potential {
    match rng.gen_range(0..3) {
        0 => Potential::newtonian(rng.gen_range(0.05..2.0)).unwrap(),
        1 => Potential::power_law(rng.gen_range(0.0..1.0), rng.gen_range(0.05..2.0), rng.gen_range(2.0..4.0)).unwrap(),
        _ => Potential::bingham(rng.gen_range(0.05..2.0), rng.gen_range(0.05..2.0)).unwrap(),
    }
}

pub fn random_sym<R: Rng>(rng: &mut R, scale: f64) -> Sym2 {
    Sym2::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))
}

#[derive(Debug, Clone, Copy)]
pub struct DualityReport {
    /// Largest `|gap(D, S(D))|`.
    pub selected: f64,
    /// Smallest `gap(D, S)` over unrelated `S`.
    pub unrelated: f64,
}

/// Fenchel gaps over `count` random (potential, D, S) triples.
pub fn duality_sweep(count: usize, seed: u64) -> DualityReport {
    let mut rng = rng(seed);
    let mut rep = DualityReport { selected: 0.0, unrelated: f64::INFINITY };
    for _ in 0..count {
        let pot = random_potential(&mut rng);
        let d = random_sym(&mut rng, 2.0);
        let s = random_sym(&mut rng, 4.0);
        rep.selected = rep.selected.max(fenchel_gap(&pot, d, stress_select(&pot, d)).abs());
        rep.unrelated = rep.unrelated.min(fenchel_gap(&pot, d, s));
    }
    rep
}

/// `sup_{t ≥ 0} (s t − φ(t))` by dense sampling on `[0, t_max]`.
pub fn sampled_conjugate(pot: &Potential, s: f64, t_max: f64, samples: usize) -> f64 {
    (0..=samples)
        .map(|k| {
            let t = t_max * k as f64 / samples as f64;
            s * t - pot.profile(t)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

use fsicloud::fsi_solver::{energy_defect, energy_record, run, EnergyRecord, Observer, SimState, StepStats};
use fsicloud::harness::InitialVelocity;
use fsicloud::rigid_bodies::{BodyState, Cloud};

#[derive(Debug, Clone, Copy)]
pub struct SanityReport {
    pub steps: usize,
    /// Largest relative kinetic energy increase over one step (0 when monotone).
    pub worst_rise: f64,
    pub max_divergence: f64,
    pub defect: f64,
    pub kinetic0: f64,
    pub kinetic_end: f64,
}

#[derive(Default)]
struct Watch {
    last: f64,
    worst_rise: f64,
    max_divergence: f64,
    steps: usize,
}

impl Observer for Watch {
    fn step(&mut self, _: &SimState, r: &EnergyRecord, st: &StepStats) -> fsicloud::error::Result<()> {
        self.worst_rise = self.worst_rise.max((r.kinetic - self.last) / self.last);
        self.last = r.kinetic;
        self.max_divergence = self.max_divergence.max(st.max_divergence);
        self.steps += 1;
        Ok(())
    }
}

pub fn vortex_state(n: usize, bodies: Vec<BodyState>, pot: Potential, g: Vec2, amplitude: f64) -> SimState {
    let grid = unit_grid(n);
    SimState::new(InitialVelocity::Vortex { amplitude }.field(grid), Cloud::sorted(bodies), pot, 1.0, g).unwrap()
}

/// Runs a vortex with the given bodies and `g = 0`, watching energy and divergence.
pub fn sanity_run(n: usize, bodies: Vec<BodyState>, pot: Potential, t_end: f64, dt: f64) -> SanityReport {
    let s0 = vortex_state(n, bodies, pot, Vec2::ZERO, 1.0);
    let e0 = energy_record(&s0);
    let mut w = Watch { last: e0.kinetic, ..Default::default() };
    let (_, recs) = run(s0, t_end, dt, &mut w).unwrap();
    SanityReport {
        steps: w.steps,
        worst_rise: w.worst_rise.max(0.0),
        max_divergence: w.max_divergence,
        defect: energy_defect(&e0, &recs),
        kinetic0: e0.kinetic,
        kinetic_end: recs.last().map_or(e0.kinetic, |r| r.kinetic),
    }
}

/// The g = 0 configurations the sanity criterion covers: body-free, two discs of unequal
/// density, power-law and Bingham fluids.
pub fn sanity_cases() -> Vec<(&'static str, Vec<BodyState>, Potential)> {
    let discs = || {
        vec![
            BodyState::disc(Vec2::new(0.3, 0.5), 0.08, 2.0).unwrap(),
            BodyState::disc(Vec2::new(0.7, 0.5), 0.06, 0.5).unwrap(),
        ]
    };
    vec![
        ("newtonian, no bodies", vec![], Potential::newtonian(1e-3).unwrap()),
        ("newtonian, two discs", discs(), Potential::newtonian(1e-3).unwrap()),
        ("power law p=3, two discs", discs(), Potential::power_law(1e-3, 2e-5, 3.0).unwrap()),
        ("bingham, two discs", discs(), Potential::bingham(1e-3, 1e-3).unwrap()),
    ]
}

/// Body-free Newtonian vortex at `n` and `4n` cells per side with a common `dt`; returns
/// the discrete L² distance of the coarse field to the fine one sampled at coarse faces.
pub fn self_convergence_error(n: usize, t_end: f64, dt: f64) -> f64 {
    let pot = Potential::newtonian(1e-3).unwrap();
    let coarse = run(vortex_state(n, vec![], pot, Vec2::ZERO, 0.5), t_end, dt, &mut ()).unwrap().0.u;
    let fine = run(vortex_state(4 * n, vec![], pot, Vec2::ZERO, 0.5), t_end, dt, &mut ()).unwrap().0.u;
    let g = coarse.grid;
    let mut diff = coarse.clone();
    for comp in 0..2 {
        let (cols, rows) = g.face_dims(comp);
        for j in 0..rows {
            for i in 0..cols {
                let x = g.face_pos(comp, i, j);
                diff.component_mut(comp)[j * cols + i] -= fine.sample(x).component(comp);
            }
        }
    }
    l2(&diff)
}

use fsicloud::harness::StudyPlan;

/// Plans and radii that each break exactly one mechanically checkable hypothesis, named
/// by the first field.
pub fn hypothesis_violations() -> Vec<(&'static str, StudyPlan, Vec<f64>)> {
    let base = StudyPlan::new(unit_grid(64), vec![1, 2]);
    let mut shape = base.clone();
    shape.shape_lambda = 4.0;
    let mut exponent = base.clone();
    exponent.shape_beta = 1.5;
    let mut heavy = base.clone();
    heavy.body_density = 40.0;
    vec![
        ("i1", base.clone(), vec![0.1, 0.08]),
        ("w14", base.clone(), vec![0.1; 8]),
        ("w10", shape, vec![0.1, 0.12]),
        ("w10", exponent, vec![0.1]),
        ("w9", heavy, vec![0.1, 0.12]),
    ]
}
