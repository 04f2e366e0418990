//! Solenoidal restriction operators.
//!
//! `R_r(h)` maps a divergence-free field `φ` to a divergence-free field that is constant on
//! `B_r(h)` and equal to `φ` outside `B_{2r}(h)`:
//!
//! ```text
//! E[φ](x)  = avg_{B_r(h)} φ · H(2 − |x−h|/r) + φ(x) · H(|x−h|/r − 1)
//! R[φ]     = E[φ] − B[div E[φ]]
//! ```
//!
//! where `B` is a right inverse of the divergence supported in the annulus
//! `B_{2r}(h) \ B_r(h)`. The N-body operator `R_N` composes single-ball operators with
//! cascade radii `5^{n−1} r_n`, largest index applied first.
//!
//! Discrete realization on the MAC grid:
//! - `E` is evaluated per face; the ball average weights faces by
//!   `clamp(½ + (r − d)/h, 0, 1)` so the operator depends continuously on `h` and `r`.
//! - `B` is the weighted minimum-norm solution `v = W Gλ` of `div v = f`, with face weights
//!   `w(t) = b(t)²`, `b(t) = 4(t−1)(t_out−t)/(t_out−1)²`, on `1 < t < t_out` and zero elsewhere,
//!   `t_out = max(2 − h_grid/r, 1.8)`. Faces in `B_r(h)` and outside `B_{t_out r}(h)` are
//!   never touched.
//! - Balls reaching past the grid are handled on a zero-padded copy.

use crate::error::{Error, Result};
use crate::field_grid::{
    ball_average_with, divergence, grad_lp_norm_masked, lp_norm_masked, BallWeight, Grid2, LpNorm, ScalarField,
    SolenoidalSampler, VecField,
};
use crate::geometry::Vec2;
use crate::linalg::{pcg, FivePoint, Mic0, Tolerance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::VecDeque;

/// Smooth step `H` with `H = 0` on `(−∞, ¼]`, `H = 1` on `[¾, ∞)` and `H'(z) = H'(1−z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Cutoff {
    /// `3s² − 2s³` with `s = 2z − ½`. C¹, exactly symmetric.
    #[default]
    Polynomial,
    /// `e(s)/(e(s) + e(1−s))` with `e(s) = exp(−1/s)`. C^∞.
    SmoothExp,
}

impl Cutoff {
    pub fn value(self, z: f64) -> f64 {
        let s = 2.0 * z - 0.5;
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        match self {
            Cutoff::Polynomial => s * s * (3.0 - 2.0 * s),
            Cutoff::SmoothExp => {
                let a = (-1.0 / s).exp();
                let b = (-1.0 / (1.0 - s)).exp();
                a / (a + b)
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        let s = 2.0 * z - 0.5;
        if s <= 0.0 || s >= 1.0 {
            return 0.0;
        }
        match self {
            Cutoff::Polynomial => 12.0 * s * (1.0 - s),
            Cutoff::SmoothExp => {
                let a = (-1.0 / s).exp();
                let b = (-1.0 / (1.0 - s)).exp();
                let da = a / (s * s);
                let db = -b / ((1.0 - s) * (1.0 - s));
                2.0 * (da * (a + b) - a * (da + db)) / ((a + b) * (a + b))
            }
        }
    }
}

/// Centres and ascending radii of an N-body restriction cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictionConfig {
    centers: Vec<Vec2>,
    radii: Vec<f64>,
    pub cutoff: Cutoff,
}

impl RestrictionConfig {
    pub fn new(centers: Vec<Vec2>, radii: Vec<f64>) -> Result<Self> {
        if centers.len() != radii.len() {
            return Err(Error::InvalidArgument(format!(
                "{} centres but {} radii",
                centers.len(),
                radii.len()
            )));
        }
        if let Some(r) = radii.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!("radii must be positive, got {r}")));
        }
        if let Some(k) = radii.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::hypothesis(
                "i1",
                format!("radii must be ascending, r[{}] = {} > r[{}] = {}", k, radii[k], k + 1, radii[k + 1]),
            ));
        }
        Ok(RestrictionConfig { centers, radii, cutoff: Cutoff::default() })
    }

    pub fn single(center: Vec2, radius: f64) -> Result<Self> {
        RestrictionConfig::new(vec![center], vec![radius])
    }

    pub fn with_cutoff(mut self, cutoff: Cutoff) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn centers(&self) -> &[Vec2] {
        &self.centers
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// `5^n r_n` for the zero-based stage index `n`.
    pub fn cascade_radius(&self, n: usize) -> f64 {
        5f64.powi(n as i32) * self.radii[n]
    }

    /// `x ∈ ∪ B_{2·5^{n−1} r_n}(h_n)`.
    pub fn influences(&self, x: Vec2) -> bool {
        (0..self.len()).any(|n| (x - self.centers[n]).norm() < 2.0 * self.cascade_radius(n))
    }

    pub fn r_min(&self) -> f64 {
        self.radii.first().copied().unwrap_or(0.0)
    }
}

/// Annulus face weight as a function of `t = |x − h|/r`.
#[inline]
fn annulus_weight(t: f64, t_out: f64) -> f64 {
    if t <= 1.0 || t >= t_out {
        0.0
    } else {
        let b = 4.0 * (t - 1.0) * (t_out - t) / ((t_out - 1.0) * (t_out - 1.0));
        b * b
    }
}

#[inline]
fn outer_edge(grid: &Grid2, r: f64) -> f64 {
    (2.0 - grid.h() / r).max(1.8)
}

fn check_resolved(grid: &Grid2, r: f64) -> Result<()> {
    if r < 2.0 * grid.h() {
        Err(Error::UnresolvedAnnulus { radius: r, h: grid.h() })
    } else {
        Ok(())
    }
}

/// Smallest lattice-aligned padding of `grid` such that every `B_reach(c)` fits with a
/// three-cell margin.
fn padding_for(grid: &Grid2, balls: impl Iterator<Item = (Vec2, f64)>) -> usize {
    let h = grid.h();
    balls
        .map(|(c, reach)| {
            let short = reach + 3.0 * h - grid.boundary_distance(c);
            if short > 0.0 {
                (short / h).ceil() as usize + 1
            } else {
                0
            }
        })
        .max()
        .unwrap_or(0)
}

/// Runs `f` on a zero-extended copy of `u` large enough for all balls, then crops.
fn on_padded(
    u: &VecField,
    balls: impl Iterator<Item = (Vec2, f64)>,
    f: impl FnOnce(&mut VecField) -> Result<()>,
) -> Result<VecField> {
    let pad = padding_for(&u.grid, balls);
    if pad == 0 {
        let mut out = u.clone();
        f(&mut out)?;
        Ok(out)
    } else {
        let big = u.grid.padded(pad);
        let mut w = u.transfer(&big)?;
        f(&mut w)?;
        w.transfer(&u.grid)
    }
}

/// `E_r` about `center`, in place. Requires `B_{2r}(center)` inside the grid.
fn extend_in_place(u: &mut VecField, center: Vec2, r: f64, cutoff: Cutoff) -> Result<()> {
    let avg = ball_average_with(u, center, r, BallWeight::SoftEdge)?;
    let g = u.grid;
    let (i0, i1, j0, j1) = g.cell_window(center, 2.0 * r);
    for comp in 0..2 {
        let (cols, rows) = g.face_dims(comp);
        let a = avg.component(comp);
        let data = u.component_mut(comp);
        for j in j0..=(j1 + 1).min(rows - 1) {
            for i in i0..=(i1 + 1).min(cols - 1) {
                let t = (g.face_pos(comp, i, j) - center).norm() / r;
                if t < 2.0 {
                    let k = j * cols + i;
                    data[k] = a * cutoff.value(2.0 - t) + data[k] * cutoff.value(t - 1.0);
                }
            }
        }
    }
    Ok(())
}

/// Local annulus system: cells in a window, face weights, and the connected pieces.
struct Annulus {
    i0: usize,
    j0: usize,
    wnx: usize,
    wny: usize,
    op: FivePoint,
    /// weights of u faces `(i0+a, j0+b)`, `a ∈ 0..=wnx`, and of v faces
    wu: Vec<f64>,
    wv: Vec<f64>,
}

impl Annulus {
    fn build(g: &Grid2, center: Vec2, r: f64) -> Annulus {
        let t_out = outer_edge(g, r);
        let (i0, i1, j0, j1) = g.cell_window(center, 2.0 * r);
        let (wnx, wny) = (i1 - i0 + 1, j1 - j0 + 1);
        let mut op = FivePoint::new(wnx, wny);
        let mut wu = vec![0.0; (wnx + 1) * wny];
        let mut wv = vec![0.0; wnx * (wny + 1)];
        for b in 0..wny {
            for a in 1..wnx {
                let t = (g.u_pos(i0 + a, j0 + b) - center).norm() / r;
                let w = annulus_weight(t, t_out);
                if w > 0.0 {
                    wu[b * (wnx + 1) + a] = w;
                    let k = b * wnx + a - 1;
                    op.add_edge(k, false, w);
                    op.active[k] = true;
                    op.active[k + 1] = true;
                }
            }
        }
        for b in 1..wny {
            for a in 0..wnx {
                let t = (g.v_pos(i0 + a, j0 + b) - center).norm() / r;
                let w = annulus_weight(t, t_out);
                if w > 0.0 {
                    wv[b * wnx + a] = w;
                    let k = (b - 1) * wnx + a;
                    op.add_edge(k, true, w);
                    op.active[k] = true;
                    op.active[k + wnx] = true;
                }
            }
        }
        Annulus { i0, j0, wnx, wny, op, wu, wv }
    }

    /// Connected components of the active cells (label per cell, `usize::MAX` if inactive).
    fn components(&self) -> (Vec<usize>, usize) {
        let n = self.wnx * self.wny;
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for s in 0..n {
            if !self.op.active[s] || label[s] != usize::MAX {
                continue;
            }
            label[s] = count;
            queue.push_back(s);
            while let Some(k) = queue.pop_front() {
                let a = k % self.wnx;
                let mut visit = |m: usize, w: f64| {
                    if w > 0.0 && label[m] == usize::MAX {
                        label[m] = count;
                        queue.push_back(m);
                    }
                };
                let b = k / self.wnx;
                if a + 1 < self.wnx {
                    visit(k + 1, self.wu[b * (self.wnx + 1) + a + 1]);
                }
                if a > 0 {
                    visit(k - 1, self.wu[b * (self.wnx + 1) + a]);
                }
                if b + 1 < self.wny {
                    visit(k + self.wnx, self.wv[(b + 1) * self.wnx + a]);
                }
                if b > 0 {
                    visit(k - self.wnx, self.wv[b * self.wnx + a]);
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// Solves `div v = f` on the active cells and subtracts `v` from `u`.
    /// `f` is indexed on the window.
    fn correct(&self, u: &mut VecField, f: &[f64]) -> Result<()> {
        let g = u.grid;
        let h = g.h();
        let (label, count) = self.components();
        let mut net = vec![0.0; count];
        let mut size = vec![0usize; count];
        let l1: f64 = f.iter().enumerate().filter(|(k, _)| label[*k] != usize::MAX).map(|(_, v)| v.abs()).sum();
        for (k, &c) in label.iter().enumerate() {
            if c != usize::MAX {
                net[c] += f[k];
                size[c] += 1;
            }
        }
        // Rounding in the window divergence of a field of size |u| is about eps·|u|/h per
        // cell, so a field that nearly vanishes on the annulus has no meaningful relative mean.
        let active = size.iter().sum::<usize>() as f64;
        let noise = 1e-13 * active.sqrt() * u.max_abs() / h;
        let tol = 1e-8 * l1 + noise;
        if let Some(bad) = net.iter().find(|s| s.abs() > tol) {
            return Err(Error::IncompatibleMean { net: *bad, tol });
        }
        if l1 == 0.0 {
            return Ok(());
        }
        let mut rhs = vec![0.0; f.len()];
        let mut fmax: f64 = 0.0;
        for (k, &c) in label.iter().enumerate() {
            if c != usize::MAX {
                rhs[k] = -h * (f[k] - net[c] / size[c] as f64);
                fmax = fmax.max(f[k].abs());
            }
        }
        let pre = Mic0::new(&self.op, 0.97, 0.25);
        let mut lambda = vec![0.0; f.len()];
        let tol = Tolerance { rel_l2: 1e-13, abs_inf: 1e-13 * h * fmax, max_iter: 20 * f.len() + 200 };
        // The operator is singular (constants on each piece); keeping the preconditioned
        // residual mean-free stops search directions drifting into the null space.
        let deflated = |r: &[f64], z: &mut [f64]| {
            pre.apply(r, z);
            let mut mean = vec![0.0; count];
            for (k, &c) in label.iter().enumerate() {
                if c != usize::MAX {
                    mean[c] += z[k];
                }
            }
            for (m, &n) in mean.iter_mut().zip(&size) {
                *m /= n as f64;
            }
            for (k, &c) in label.iter().enumerate() {
                if c != usize::MAX {
                    z[k] -= mean[c];
                }
            }
        };
        let rep = pcg(|x, y| self.op.apply(x, y), deflated, &rhs, &mut lambda, tol);
        if !rep.converged && rep.residual_inf > h * (1e-9 * fmax + noise) {
            return Err(Error::LinearSolve {
                context: "annulus divergence solve",
                residual: rep.residual_inf,
                iterations: rep.iterations,
            });
        }
        let (wnx, wny) = (self.wnx, self.wny);
        for b in 0..wny {
            for a in 1..wnx {
                let w = self.wu[b * (wnx + 1) + a];
                if w > 0.0 {
                    let k = b * wnx + a;
                    let idx = g.uf(self.i0 + a, self.j0 + b);
                    u.u[idx] -= w * (lambda[k] - lambda[k - 1]);
                }
            }
        }
        for b in 1..wny {
            for a in 0..wnx {
                let w = self.wv[b * wnx + a];
                if w > 0.0 {
                    let k = b * wnx + a;
                    let idx = g.vf(self.i0 + a, self.j0 + b);
                    u.v[idx] -= w * (lambda[k] - lambda[k - wnx]);
                }
            }
        }
        Ok(())
    }

    fn window_divergence(&self, u: &VecField) -> Vec<f64> {
        let g = u.grid;
        let inv_h = 1.0 / g.h();
        let mut f = vec![0.0; self.wnx * self.wny];
        for b in 0..self.wny {
            for a in 0..self.wnx {
                let (i, j) = (self.i0 + a, self.j0 + b);
                f[b * self.wnx + a] =
                    (u.u[g.uf(i + 1, j)] - u.u[g.uf(i, j)] + u.v[g.vf(i, j + 1)] - u.v[g.vf(i, j)]) * inv_h;
            }
        }
        f
    }
}

fn restrict_in_place(u: &mut VecField, center: Vec2, r: f64, cutoff: Cutoff) -> Result<()> {
    check_resolved(&u.grid, r)?;
    extend_in_place(u, center, r, cutoff)?;
    let ann = Annulus::build(&u.grid, center, r);
    let mut f = ann.window_divergence(u);
    // cells off the annulus carry the input's own (vanishing) divergence
    for (k, v) in f.iter_mut().enumerate() {
        if !ann.op.active[k] {
            *v = 0.0;
        }
    }
    ann.correct(u, &f)
}

/// `E_r` about `center`.
pub fn apply_e(u: &VecField, center: Vec2, r: f64, cutoff: Cutoff) -> Result<VecField> {
    check_resolved(&u.grid, r)?;
    on_padded(u, std::iter::once((center, 2.0 * r)), |w| extend_in_place(w, center, r, cutoff))
}

/// Right inverse of the divergence on the annulus `B_{2r}(center) \ B_r(center)`.
///
/// `f` must vanish off the annulus cells and have zero mean on each connected piece.
pub fn bogovskii_annulus(f: &ScalarField, r: f64, center: Vec2) -> Result<VecField> {
    check_resolved(&f.grid, r)?;
    let g0 = f.grid;
    let pad = padding_for(&g0, std::iter::once((center, 2.0 * r)));
    let g = g0.padded(pad);
    let fp = if pad == 0 { f.clone() } else { f.transfer(&g)? };
    let ann = Annulus::build(&g, center, r);
    let mut local = vec![0.0; ann.wnx * ann.wny];
    let mut outside = 0.0f64;
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let v = fp.at(i, j);
            let inside = i >= ann.i0 && j >= ann.j0 && i < ann.i0 + ann.wnx && j < ann.j0 + ann.wny && {
                let k = (j - ann.j0) * ann.wnx + (i - ann.i0);
                local[k] = v;
                ann.op.active[k]
            };
            if !inside {
                outside = outside.max(v.abs());
            }
        }
    }
    if outside > 0.0 {
        return Err(Error::InvalidArgument(format!("source is nonzero off the annulus (max {outside:e})")));
    }
    let mut v = VecField::zeros(g);
    ann.correct(&mut v, &local)?;
    v.scale(-1.0);
    v.transfer(&g0)
}

/// `R_r(h)[u]` with the default cutoff.
pub fn apply_r(u: &VecField, h: Vec2, r: f64) -> Result<VecField> {
    apply_r_with(u, h, r, Cutoff::default())
}

pub fn apply_r_with(u: &VecField, h: Vec2, r: f64, cutoff: Cutoff) -> Result<VecField> {
    check_resolved(&u.grid, r)?;
    on_padded(u, std::iter::once((h, 2.0 * r)), |w| restrict_in_place(w, h, r, cutoff))
}

/// `R_N = R_{r₁}(h₁) ∘ R_{5r₂}(h₂) ∘ … ∘ R_{5^{N−1} r_N}(h_N)`.
pub fn apply_rn(u: &VecField, cfg: &RestrictionConfig) -> Result<VecField> {
    for n in 0..cfg.len() {
        check_resolved(&u.grid, cfg.cascade_radius(n))?;
    }
    let balls = (0..cfg.len()).map(|n| (cfg.centers[n], 2.0 * cfg.cascade_radius(n)));
    on_padded(u, balls, |w| {
        for n in (0..cfg.len()).rev() {
            restrict_in_place(w, cfg.centers[n], cfg.cascade_radius(n), cfg.cutoff)?;
        }
        Ok(())
    })
}

/// `∇_h R_r(h)[u]`, one field per direction `k` of `h`:
/// `∂_{h_k} R_r(h)[u] = R_r(h)[∂_k u] − ∂_k(R_r(h)[u])`.
///
/// Differences are centred on each face lattice. The result vanishes identically outside
/// `B_{2r}(h)` whenever `r ≥ 5 h_grid`.
pub fn h_derivative(u: &VecField, h: Vec2, r: f64) -> Result<[VecField; 2]> {
    let ru = apply_r(u, h, r)?;
    let mut out = [VecField::zeros(u.grid), VecField::zeros(u.grid)];
    for (k, o) in out.iter_mut().enumerate() {
        let mut a = apply_r(&u.partial(k), h, r)?;
        a.axpy(-1.0, &ru.partial(k));
        *o = a;
    }
    Ok(out)
}

/// Property measurements of one application of `R_N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyReport {
    /// `max |div R_N[u]|`.
    pub max_divergence: f64,
    /// Every face outside `∪ B_{2·5^{n−1} r_n}(h_n)` is bitwise unchanged.
    pub locality_exact: bool,
    /// Largest per-ball, per-component standard deviation over faces in `B_{r_n}(h_n)`,
    /// divided by `1 + ‖u‖∞`.
    pub constancy: f64,
}

impl PropertyReport {
    pub fn passes(&self) -> bool {
        self.max_divergence <= 1e-7 && self.locality_exact && self.constancy <= 1e-8
    }
}

/// Standard deviation of the face samples of each component inside `B_r(c)`.
pub fn ball_spread(u: &VecField, c: Vec2, r: f64) -> f64 {
    let g = u.grid;
    let mut worst: f64 = 0.0;
    for comp in 0..2 {
        let (cols, rows) = g.face_dims(comp);
        let a = u.component(comp);
        let (i0, i1, j0, j1) = g.cell_window(c, r);
        let mut vals = Vec::new();
        for j in j0..=(j1 + 1).min(rows - 1) {
            for i in i0..=(i1 + 1).min(cols - 1) {
                if (g.face_pos(comp, i, j) - c).norm() < r {
                    vals.push(a[j * cols + i]);
                }
            }
        }
        if vals.len() > 1 {
            // Two passes: E[v²] − mean² cancels to ~1e-8 relative for constant samples.
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            worst = worst.max(var.sqrt());
        }
    }
    worst
}

pub fn check_properties(u: &VecField, cfg: &RestrictionConfig) -> Result<PropertyReport> {
    let out = apply_rn(u, cfg)?;
    Ok(properties_of(u, &out, cfg))
}

pub fn properties_of(u: &VecField, out: &VecField, cfg: &RestrictionConfig) -> PropertyReport {
    let g = u.grid;
    let mut locality_exact = true;
    for comp in 0..2 {
        let (cols, rows) = g.face_dims(comp);
        let (a, b) = (u.component(comp), out.component(comp));
        for j in 0..rows {
            for i in 0..cols {
                let k = j * cols + i;
                if a[k].to_bits() != b[k].to_bits() && !cfg.influences(g.face_pos(comp, i, j)) {
                    locality_exact = false;
                }
            }
        }
    }
    let scale = 1.0 + u.max_abs();
    let constancy = (0..cfg.len())
        .map(|n| ball_spread(out, cfg.centers()[n], cfg.radii()[n]) / scale)
        .fold(0.0, f64::max);
    PropertyReport { max_divergence: divergence(out).max_abs(), locality_exact, constancy }
}

/// Empirical operator norms of `R_N` over a family of test fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormReport {
    pub n_bodies: usize,
    pub p: f64,
    pub r_min: f64,
    /// `max ‖R_N φ‖_p / ‖φ‖_p`.
    pub ratio_l: f64,
    /// `max ‖∇R_N φ‖_p / ‖∇φ‖_p`.
    pub ratio_w: f64,
    /// `max ‖R_N φ − φ‖_p / ‖φ‖_{L^p(U)}`, `U = ∪ B_{2·5^{n−1} r_n}(h_n)`.
    pub err_ratio_l: f64,
    /// `max ‖∇(R_N φ − φ)‖_p / ‖∇φ‖_{L^p(U)}`.
    pub err_ratio_w: f64,
    /// `(max of the four ratios)^{1/N}`.
    pub c_estimate: f64,
    /// `max{c^p, 5^d}`.
    pub a1_estimate: f64,
    pub trials: usize,
    /// Ratios skipped because numerator and denominator both vanished.
    pub skipped: usize,
}

fn ratio(num: f64, den: f64, zero: f64) -> Option<f64> {
    if den <= zero {
        if num <= zero {
            None
        } else {
            Some(f64::INFINITY)
        }
    } else {
        Some(num / den)
    }
}

/// Norm ratios of `R_N` over the given fields.
pub fn measure_ratios(cfg: &RestrictionConfig, fields: &[VecField], p: f64) -> Result<NormReport> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument("need at least one test field".into()));
    }
    let rows: Vec<Result<[Option<f64>; 4]>> = fields
        .par_iter()
        .map(|phi| {
            let out = apply_rn(phi, cfg)?;
            let err = &out - phi;
            let base = phi.lp_norm(p)?;
            let zero_l = 1e-13 * (1.0 + base);
            let zero_w = zero_l / phi.grid.h();
            let in_u = |x: Vec2| cfg.influences(x);
            let l = ratio(out.lp_norm(p)?, base, zero_l).or(Some(1.0));
            let w = ratio(
                grad_lp_norm_masked(&out, p, |_| true)?,
                grad_lp_norm_masked(phi, p, |_| true)?,
                zero_w,
            )
            .or(Some(1.0));
            let el = ratio(err.lp_norm(p)?, lp_norm_masked(phi, p, in_u)?, zero_l);
            let ew = ratio(grad_lp_norm_masked(&err, p, |_| true)?, grad_lp_norm_masked(phi, p, in_u)?, zero_w);
            Ok([l, w, el, ew])
        })
        .collect();
    let mut best = [0.0f64; 4];
    let mut skipped = 0;
    for row in rows {
        for (b, v) in best.iter_mut().zip(row?) {
            match v {
                Some(v) => *b = b.max(v),
                None => skipped += 1,
            }
        }
    }
    let n = cfg.len().max(1);
    let c = best.iter().copied().fold(0.0, f64::max).powf(1.0 / n as f64);
    Ok(NormReport {
        n_bodies: cfg.len(),
        p,
        r_min: cfg.r_min(),
        ratio_l: best[0],
        ratio_w: best[1],
        err_ratio_l: best[2],
        err_ratio_w: best[3],
        c_estimate: c,
        a1_estimate: c.powf(p).max(25.0),
        trials: fields.len(),
        skipped,
    })
}

/// Sampler whose fields cover every cascade ball and vary on the scale of the smallest
/// radius.
pub fn default_sampler(cfg: &RestrictionConfig) -> SolenoidalSampler {
    let n = cfg.len().max(1) as f64;
    let c = cfg.centers().iter().fold(Vec2::ZERO, |a, b| a + *b) * (1.0 / n);
    let reach = (0..cfg.len()).map(|k| (cfg.centers()[k] - c).norm() + 2.0 * cfg.cascade_radius(k)).fold(0.0, f64::max);
    SolenoidalSampler { center: c, support: 1.5 * reach, wavelength: 2.0 * cfg.r_min(), modes: 8 }
}

/// Norm ratios over `trials` random solenoidal fields on `grid` (seeded, reproducible).
pub fn measure_operator_norms(
    cfg: &RestrictionConfig,
    grid: &Grid2,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<NormReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let sampler = default_sampler(cfg);
    let fields: Vec<VecField> = (0..trials)
        .map(|t| sampler.sample(grid, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64))))
        .collect();
    measure_ratios(cfg, &fields, p)
}

/// Worst property values of `R_N` over `trials` random solenoidal fields on `grid`, drawn
/// as in [`measure_operator_norms`].
pub fn property_suite(cfg: &RestrictionConfig, grid: &Grid2, trials: usize, seed: u64) -> Result<PropertyReport> {
    let sampler = default_sampler(cfg);
    let reports: Vec<Result<PropertyReport>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let u = sampler.sample(grid, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64)));
            Ok(properties_of(&u, &apply_rn(&u, cfg)?, cfg))
        })
        .collect();
    let mut worst = PropertyReport { max_divergence: 0.0, locality_exact: true, constancy: 0.0 };
    for r in reports {
        let r = r?;
        worst.max_divergence = worst.max_divergence.max(r.max_divergence);
        worst.locality_exact &= r.locality_exact;
        worst.constancy = worst.constancy.max(r.constancy);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_symmetry_on_dense_sample() {
        for cut in [Cutoff::Polynomial, Cutoff::SmoothExp] {
            for k in 0..=2000 {
                let z = -0.5 + 2.0 * k as f64 / 2000.0;
                let (a, b) = (cut.value(z), cut.value(1.0 - z));
                assert!((0.0..=1.0).contains(&a));
                assert!((a + b - 1.0).abs() < 1e-12, "{cut:?} {z}");
                assert!((cut.derivative(z) - cut.derivative(1.0 - z)).abs() < 1e-12, "{cut:?} {z}");
            }
            assert_eq!(cut.value(0.25), 0.0);
            assert_eq!(cut.value(0.75), 1.0);
        }
    }

    #[test]
    fn cutoff_derivative_matches_difference_quotient() {
        for cut in [Cutoff::Polynomial, Cutoff::SmoothExp] {
            for z in [0.3, 0.45, 0.5, 0.61, 0.7] {
                let d = 1e-6;
                let fd = (cut.value(z + d) - cut.value(z - d)) / (2.0 * d);
                assert!((fd - cut.derivative(z)).abs() < 1e-6, "{cut:?} {z}");
            }
        }
    }

    #[test]
    fn config_rejects_descending_radii() {
        let e = RestrictionConfig::new(vec![Vec2::ZERO; 2], vec![0.2, 0.1]).unwrap_err();
        assert!(e.to_string().contains("(i1)"));
    }

    #[test]
    fn annulus_weights_vanish_off_the_open_annulus() {
        assert_eq!(annulus_weight(1.0, 1.9), 0.0);
        assert_eq!(annulus_weight(1.9, 1.9), 0.0);
        assert!((annulus_weight(1.45, 1.9) - 1.0).abs() < 1e-14);
    }
}
