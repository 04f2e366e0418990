//! Discrete p-capacity of a union of balls: minimize `∫|∇v|^p` over continuous piecewise
//! linear `v` on the node lattice (each cell split along its rising diagonal), with
//! `v = 1` on the balls and `v = 0` on the outer boundary.
//!
//! `p = 2` is a single linear solve. For `p > 2` the convex functional is minimized by
//! Newton's method with a backtracking line search, started from the `p = 2` minimizer.

use crate::error::{Error, Result};
use crate::field_grid::Grid2;
use crate::linalg::{pcg, FivePoint, Multigrid, Tolerance};
use crate::restriction::RestrictionConfig;

/// Newton stops when the decrement `−∇E·s` falls below `CAPACITY_TOL · E`.
pub const CAPACITY_TOL: f64 = 1e-6;

/// Result of one probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityReport {
    pub capacity: f64,
    pub newton_iterations: usize,
    pub decrement: f64,
}

struct Lattice {
    nx: usize,
    ny: usize,
    h: f64,
    p: f64,
    /// Per node: `None` free, `Some(value)` prescribed.
    fixed: Vec<Option<f64>>,
}

/// Triangle energies depend on one horizontal and one vertical edge difference:
/// lower-right triangle of cell `(i, j)` on `H(i, j)` and `V(i+1, j)`, upper-left on
/// `H(i, j+1)` and `V(i, j)`, where `H(i, j) = v(i+1, j) − v(i, j)` and
/// `V(i, j) = v(i, j+1) − v(i, j)`.
struct Edges {
    hor: Vec<f64>,
    ver: Vec<f64>,
}

impl Lattice {
    fn nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    fn hidx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    fn vidx(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    fn edges(&self, v: &[f64]) -> Edges {
        let (nx, ny) = (self.nx, self.ny);
        let mut hor = vec![0.0; nx * (ny + 1)];
        let mut ver = vec![0.0; (nx + 1) * ny];
        for j in 0..=ny {
            for i in 0..nx {
                hor[self.hidx(i, j)] = v[self.node(i + 1, j)] - v[self.node(i, j)];
            }
        }
        for j in 0..ny {
            for i in 0..=nx {
                ver[self.vidx(i, j)] = v[self.node(i, j + 1)] - v[self.node(i, j)];
            }
        }
        Edges { hor, ver }
    }

    /// Visits both triangles of every cell with their `(H index, V index)`.
    fn for_triangles(&self, mut f: impl FnMut(usize, usize)) {
        for j in 0..self.ny {
            for i in 0..self.nx {
                f(self.hidx(i, j), self.vidx(i + 1, j));
                f(self.hidx(i, j + 1), self.vidx(i, j));
            }
        }
    }

    /// `(h²/2)·|d/h|^p` summed, i.e. the exact integral of `|∇v|^p`.
    fn energy(&self, e: &Edges) -> f64 {
        let scale = 0.5 * self.h.powf(2.0 - self.p);
        let mut sum = 0.0;
        self.for_triangles(|a, b| {
            let t = e.hor[a].hypot(e.ver[b]);
            sum += t.powf(self.p);
        });
        scale * sum
    }

    /// Scatters edge-space values back to nodes (transpose of the difference map).
    fn gather(&self, gh: &[f64], gv: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for j in 0..=ny {
            for i in 0..=nx {
                let k = self.node(i, j);
                if self.fixed[k].is_some() {
                    out[k] = 0.0;
                    continue;
                }
                let mut s = 0.0;
                if i > 0 {
                    s += gh[self.hidx(i - 1, j)];
                }
                if i < nx {
                    s -= gh[self.hidx(i, j)];
                }
                if j > 0 {
                    s += gv[self.vidx(i, j - 1)];
                }
                if j < ny {
                    s -= gv[self.vidx(i, j)];
                }
                out[k] = s;
            }
        }
    }

    fn gradient(&self, e: &Edges, out: &mut [f64]) {
        let scale = 0.5 * self.h.powf(2.0 - self.p) * self.p;
        let mut gh = vec![0.0; e.hor.len()];
        let mut gv = vec![0.0; e.ver.len()];
        self.for_triangles(|a, b| {
            let t = e.hor[a].hypot(e.ver[b]);
            let c = scale * t.powf(self.p - 2.0);
            gh[a] += c * e.hor[a];
            gv[b] += c * e.ver[b];
        });
        self.gather(&gh, &gv, out);
    }
}

/// Per-triangle Hessian blocks in edge-difference coordinates, `[haa, hbb, hab]`.
struct Hessian {
    blocks: Vec<[f64; 3]>,
}

impl Hessian {
    fn new(lat: &Lattice, e: &Edges) -> Self {
        let p = lat.p;
        let scale = 0.5 * lat.h.powf(2.0 - p) * p;
        let tmax = e.hor.iter().chain(&e.ver).fold(0.0f64, |m, v| m.max(v.abs()));
        // A floor on |d| keeps flat triangles from making the Hessian singular; the line
        // search uses the exact energy, so the minimizer is unaffected.
        let floor = 1e-3 * tmax;
        let mut blocks = Vec::with_capacity(2 * lat.nx * lat.ny);
        lat.for_triangles(|a, b| {
            let (x, y) = (e.hor[a], e.ver[b]);
            let t = x.hypot(y);
            let c = scale * t.max(floor).powf(p - 2.0);
            let (ux, uy) = if t > 0.0 { (x / t, y / t) } else { (0.0, 0.0) };
            blocks.push([c * (1.0 + (p - 2.0) * ux * ux), c * (1.0 + (p - 2.0) * uy * uy), c * (p - 2.0) * ux * uy]);
        });
        Hessian { blocks }
    }

    fn apply(&self, lat: &Lattice, s: &[f64], out: &mut [f64]) {
        let e = lat.edges(s);
        let mut gh = vec![0.0; e.hor.len()];
        let mut gv = vec![0.0; e.ver.len()];
        let mut t = 0;
        lat.for_triangles(|a, b| {
            let [haa, hbb, hab] = self.blocks[t];
            t += 1;
            gh[a] += haa * e.hor[a] + hab * e.ver[b];
            gv[b] += hab * e.hor[a] + hbb * e.ver[b];
        });
        lat.gather(&gh, &gv, out);
    }

    /// Five-point bound `diag(haa + |hab|, hbb + |hab|) ≽ H_T` per triangle, restricted to
    /// free nodes.
    fn five_point(&self, lat: &Lattice) -> FivePoint {
        let (nx, ny) = (lat.nx, lat.ny);
        let mut wh = vec![0.0; nx * (ny + 1)];
        let mut wv = vec![0.0; (nx + 1) * ny];
        let mut t = 0;
        lat.for_triangles(|a, b| {
            let [haa, hbb, hab] = self.blocks[t];
            t += 1;
            wh[a] += haa + hab.abs();
            wv[b] += hbb + hab.abs();
        });
        edge_operator(lat, &wh, &wv)
    }
}

fn edge_operator(lat: &Lattice, wh: &[f64], wv: &[f64]) -> FivePoint {
    let (nx, ny) = (lat.nx, lat.ny);
    let mut a = FivePoint::new(nx + 1, ny + 1);
    for k in 0..lat.nodes() {
        a.active[k] = lat.fixed[k].is_none();
    }
    let link = |a: &mut FivePoint, m: usize, n: usize, vertical: bool, w: f64| {
        match (a.active[m], a.active[n]) {
            (true, true) => a.add_edge(m, vertical, w),
            (true, false) => a.diag[m] += w,
            (false, true) => a.diag[n] += w,
            (false, false) => {}
        }
    };
    for j in 0..=ny {
        for i in 0..nx {
            link(&mut a, lat.node(i, j), lat.node(i + 1, j), false, wh[lat.hidx(i, j)]);
        }
    }
    for j in 0..ny {
        for i in 0..=nx {
            link(&mut a, lat.node(i, j), lat.node(i, j + 1), true, wv[lat.vidx(i, j)]);
        }
    }
    a
}

fn solve(a: &FivePoint, apply: impl FnMut(&[f64], &mut [f64]), b: &[f64], x: &mut [f64], rel: f64) -> Result<()> {
    let mg = Multigrid::new(a, 1.8);
    let rep = pcg(apply, |r, z| mg.apply(r, z), b, x, Tolerance { rel_l2: rel, abs_inf: 0.0, max_iter: 2000 });
    if rep.converged {
        Ok(())
    } else {
        Err(Error::LinearSolve { context: "capacity", residual: rep.residual_l2, iterations: rep.iterations })
    }
}

/// Discrete p-capacity of the balls of `cfg` in the rectangle of `grid`, on its node
/// lattice. An empty configuration has capacity 0.
pub fn capacity_probe(p: f64, cfg: &RestrictionConfig, grid: &Grid2) -> Result<f64> {
    capacity_report(p, cfg, grid).map(|r| r.capacity)
}

pub fn capacity_report(p: f64, cfg: &RestrictionConfig, grid: &Grid2) -> Result<CapacityReport> {
    if !(p >= 2.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("capacity exponent must be at least 2, got {p}")));
    }
    if cfg.is_empty() {
        return Ok(CapacityReport { capacity: 0.0, newton_iterations: 0, decrement: 0.0 });
    }
    for (c, r) in cfg.centers().iter().zip(cfg.radii()) {
        if grid.boundary_distance(*c) <= *r + grid.h() {
            return Err(Error::InvalidArgument(format!(
                "ball at ({}, {}) with radius {r} touches the outer boundary",
                c.x, c.y
            )));
        }
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut fixed = vec![None; (nx + 1) * (ny + 1)];
    let mut inside = 0;
    for j in 0..=ny {
        for i in 0..=nx {
            let k = grid.node(i, j);
            if i == 0 || j == 0 || i == nx || j == ny {
                fixed[k] = Some(0.0);
            } else {
                let x = grid.node_pos(i, j);
                if cfg.centers().iter().zip(cfg.radii()).any(|(c, r)| (x - *c).norm() <= *r) {
                    fixed[k] = Some(1.0);
                    inside += 1;
                }
            }
        }
    }
    if inside == 0 {
        return Err(Error::InvalidArgument("no lattice node lies inside the balls".into()));
    }
    let lat = Lattice { nx, ny, h: grid.h(), p, fixed };
    let n = lat.nodes();
    let mut v: Vec<f64> = lat.fixed.iter().map(|f| f.unwrap_or(0.0)).collect();

    // p = 2 start: Laplace problem with the fixed values as lifting.
    let ones_h = vec![1.0; nx * (ny + 1)];
    let ones_v = vec![1.0; (nx + 1) * ny];
    let lap = edge_operator(&lat, &ones_h, &ones_v);
    let mut rhs = vec![0.0; n];
    {
        let quad = Lattice { p: 2.0, fixed: lat.fixed.clone(), ..lat };
        let e = quad.edges(&v);
        quad.gradient(&e, &mut rhs);
        // gradient of ∫|∇v|² is 2·K v; the free part of −K·lifting is the right-hand side.
        rhs.iter_mut().for_each(|r| *r *= -0.5);
        let mut dv = vec![0.0; n];
        solve(&lap, |x, y| lap.apply(x, y), &rhs, &mut dv, 1e-10)?;
        for k in 0..n {
            if lat.fixed[k].is_none() {
                v[k] += dv[k];
            }
        }
    }
    let mut e = lat.edges(&v);
    let mut energy = lat.energy(&e);
    if p == 2.0 {
        return Ok(CapacityReport { capacity: energy, newton_iterations: 0, decrement: 0.0 });
    }

    let mut grad = vec![0.0; n];
    let mut decrement = f64::INFINITY;
    for it in 1..=100 {
        lat.gradient(&e, &mut grad);
        let hess = Hessian::new(&lat, &e);
        let pre = hess.five_point(&lat);
        let b: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut s = vec![0.0; n];
        solve(&pre, |x, y| hess.apply(&lat, x, y), &b, &mut s, 1e-3)?;
        let slope: f64 = grad.iter().zip(&s).map(|(g, s)| g * s).sum();
        decrement = -slope;
        if decrement <= CAPACITY_TOL * energy {
            return Ok(CapacityReport { capacity: energy, newton_iterations: it - 1, decrement });
        }
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = v.iter().zip(&s).map(|(v, s)| v + step * s).collect();
            let et = lat.edges(&trial);
            let en = lat.energy(&et);
            if en <= energy + 1e-4 * step * slope {
                v = trial;
                e = et;
                energy = en;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                return Ok(CapacityReport { capacity: energy, newton_iterations: it, decrement });
            }
        }
    }
    Err(Error::LinearSolve { context: "capacity Newton", residual: decrement, iterations: 100 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;

    fn ball(r: f64, n: usize) -> (RestrictionConfig, Grid2) {
        (RestrictionConfig::single(Vec2::new(0.5, 0.5), r).unwrap(), Grid2::square(n, 1.0).unwrap())
    }

    #[test]
    fn empty_cloud_has_zero_capacity() {
        let cfg = RestrictionConfig::new(vec![], vec![]).unwrap();
        assert_eq!(capacity_probe(3.0, &cfg, &Grid2::square(16, 1.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn rejects_sub_quadratic_exponent() {
        let (cfg, g) = ball(0.1, 32);
        assert!(capacity_probe(1.5, &cfg, &g).is_err());
    }

    #[test]
    fn newton_gradient_matches_finite_differences() {
        let lat = Lattice { nx: 3, ny: 3, h: 0.25, p: 3.0, fixed: vec![None; 16] };
        let v: Vec<f64> = (0..16).map(|k| ((k * 7 % 5) as f64) * 0.1).collect();
        let mut g = vec![0.0; 16];
        lat.gradient(&lat.edges(&v), &mut g);
        for k in 0..16 {
            let mut a = v.clone();
            let mut b = v.clone();
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (lat.energy(&lat.edges(&a)) - lat.energy(&lat.edges(&b))) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn quadratic_capacity_of_annulus_is_close_to_log_formula() {
        // Dirichlet energy between a ball and the square is bracketed by the two annuli
        // with outer radii 0.5 and 0.5·√2.
        let (cfg, g) = ball(0.1, 128);
        let c = capacity_probe(2.0, &cfg, &g).unwrap();
        let lo = 2.0 * std::f64::consts::PI / (0.5f64 * 2f64.sqrt() / 0.1).ln();
        let hi = 2.0 * std::f64::consts::PI / (0.5f64 / 0.1).ln();
        assert!(c > 0.95 * lo && c < 1.05 * hi, "{lo} {c} {hi}");
    }

    #[test]
    fn cubic_capacity_is_bracketed_by_radial_formula() {
        // Radial minimizer for p = 3: cap = (π/2) / (√R − √r)².
        let (cfg, g) = ball(0.1, 128);
        let c = capacity_probe(3.0, &cfg, &g).unwrap();
        let f = |big: f64| std::f64::consts::FRAC_PI_2 / (big.sqrt() - 0.1f64.sqrt()).powi(2);
        assert!(c > 0.95 * f(0.5 * 2f64.sqrt()) && c < 1.05 * f(0.5), "{c}");
    }
}
