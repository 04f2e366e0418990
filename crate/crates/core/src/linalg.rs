//! Matrix-free preconditioned conjugate gradients and a MIC(0) preconditioner for
//! five-point operators on structured index sets.

/// Stop when `‖r‖₂ ≤ rel_l2·‖b‖₂` or `‖r‖∞ ≤ abs_inf`.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel_l2: f64,
    pub abs_inf: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual_l2: f64,
    pub residual_inf: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Preconditioned CG for a symmetric positive (semi-)definite operator. `x` holds the
/// initial guess on entry.
pub fn pcg(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: Tolerance,
) -> SolveReport {
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut ap = vec![0.0; n];
    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let bnorm = dot(b, b).sqrt();
    let done = |r: &[f64]| {
        let l2 = dot(r, r).sqrt();
        let li = inf_norm(r);
        (l2, li, l2 <= tol.rel_l2 * bnorm || li <= tol.abs_inf)
    };
    let (mut l2, mut li, mut ok) = done(&r);
    if ok {
        return SolveReport { iterations: 0, residual_l2: l2, residual_inf: li, converged: true };
    }
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut it = 0;
    while it < tol.max_iter {
        it += 1;
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        (l2, li, ok) = done(&r);
        if ok {
            break;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    SolveReport { iterations: it, residual_l2: l2, residual_inf: li, converged: ok }
}

/// Symmetric five-point operator on an `nx × ny` lattice restricted to `active` entries.
///
/// `east[k]` couples `k` with `k + 1`, `north[k]` couples `k` with `k + nx`; both hold the
/// (non-positive) matrix entry. Couplings touching inactive entries must be zero.
#[derive(Debug, Clone)]
pub struct FivePoint {
    pub nx: usize,
    pub ny: usize,
    pub diag: Vec<f64>,
    pub east: Vec<f64>,
    pub north: Vec<f64>,
    pub active: Vec<bool>,
}

impl FivePoint {
    pub fn new(nx: usize, ny: usize) -> Self {
        let n = nx * ny;
        FivePoint { nx, ny, diag: vec![0.0; n], east: vec![0.0; n], north: vec![0.0; n], active: vec![false; n] }
    }

    /// Adds a graph-Laplacian edge of weight `w` between `a` and `a + 1` (`vertical = false`)
    /// or `a` and `a + nx`.
    pub fn add_edge(&mut self, a: usize, vertical: bool, w: f64) {
        let b = if vertical { a + self.nx } else { a + 1 };
        self.diag[a] += w;
        self.diag[b] += w;
        if vertical {
            self.north[a] -= w;
        } else {
            self.east[a] -= w;
        }
    }

    /// `y = A x`; rows of inactive entries are zero.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for j in 0..ny {
            let row = j * nx;
            for i in 0..nx {
                let k = row + i;
                let mut s = self.diag[k] * x[k];
                if i + 1 < nx {
                    s += self.east[k] * x[k + 1];
                }
                if i > 0 {
                    s += self.east[k - 1] * x[k - 1];
                }
                if j + 1 < ny {
                    s += self.north[k] * x[k + nx];
                }
                if j > 0 {
                    s += self.north[k - nx] * x[k - nx];
                }
                y[k] = if self.active[k] { s } else { 0.0 };
            }
        }
    }
}

/// Modified incomplete Cholesky with zero fill.
#[derive(Debug, Clone)]
pub struct Mic0 {
    nx: usize,
    ny: usize,
    /// `1/√e_k`; `1` on active entries without a usable pivot, `0` on inactive ones.
    precon: Vec<f64>,
    /// `east[k]·precon[k]` and `north[k]·precon[k]`.
    east_p: Vec<f64>,
    north_p: Vec<f64>,
}

impl Mic0 {
    pub fn new(a: &FivePoint, tau: f64, sigma: f64) -> Self {
        let nx = a.nx;
        let n = a.diag.len();
        let mut precon = vec![0.0; n];
        for k in 0..n {
            if !a.active[k] {
                continue;
            }
            let d = a.diag[k];
            if d <= 0.0 {
                precon[k] = 1.0;
                continue;
            }
            let mut e = d;
            if k % nx > 0 {
                let l = k - 1;
                let p = precon[l];
                e -= (a.east[l] * p).powi(2) + tau * a.east[l] * a.north[l] * p * p;
            }
            if k >= nx {
                let b = k - nx;
                let p = precon[b];
                e -= (a.north[b] * p).powi(2) + tau * a.north[b] * a.east[b] * p * p;
            }
            if e < sigma * d {
                e = d;
            }
            precon[k] = 1.0 / e.sqrt();
        }
        let east_p = (0..n).map(|k| if k % nx + 1 < nx { a.east[k] * precon[k] } else { 0.0 }).collect();
        let north_p = (0..n).map(|k| if k + nx < n { a.north[k] * precon[k] } else { 0.0 }).collect();
        Mic0 { nx, ny: a.ny, precon, east_p, north_p }
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for j in 0..ny {
            let row = j * nx;
            for i in 0..nx {
                let k = row + i;
                let mut t = r[k];
                if i > 0 {
                    t -= self.east_p[k - 1] * z[k - 1];
                }
                if j > 0 {
                    t -= self.north_p[k - nx] * z[k - nx];
                }
                z[k] = t * self.precon[k];
            }
        }
        for j in (0..ny).rev() {
            let row = j * nx;
            for i in (0..nx).rev() {
                let k = row + i;
                let mut t = z[k];
                if i + 1 < nx {
                    t -= self.east_p[k] * z[k + 1];
                }
                if j + 1 < ny {
                    t -= self.north_p[k] * z[k + nx];
                }
                z[k] = t * self.precon[k];
            }
        }
    }
}

/// Symmetric V-cycle on a hierarchy of 2×2 cell aggregates with Galerkin coarse operators.
///
/// Forward Gauss–Seidel before and backward Gauss–Seidel after each coarse correction
/// keep the cycle symmetric, so it can precondition CG. The piecewise-constant
/// prolongation is scaled by `over` to compensate for its poor energy.
#[derive(Debug, Clone)]
pub struct Multigrid {
    levels: Vec<FivePoint>,
    over: f64,
}

impl Multigrid {
    pub fn new(a: &FivePoint, over: f64) -> Self {
        let mut levels = vec![a.clone()];
        loop {
            let f = levels.last().unwrap();
            if f.nx <= 4 || f.ny <= 4 {
                break;
            }
            let c = coarsen(f);
            levels.push(c);
        }
        Multigrid { levels, over }
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = 0.0);
        self.cycle(0, r, z);
    }

    fn cycle(&self, l: usize, b: &[f64], x: &mut [f64]) {
        let a = &self.levels[l];
        if l + 1 == self.levels.len() {
            for _ in 0..30 {
                gauss_seidel(a, b, x, false);
                gauss_seidel(a, b, x, true);
            }
            return;
        }
        gauss_seidel(a, b, x, false);
        let mut r = vec![0.0; b.len()];
        a.apply(x, &mut r);
        for k in 0..r.len() {
            r[k] = if a.active[k] { b[k] - r[k] } else { 0.0 };
        }
        let c = &self.levels[l + 1];
        let mut rc = vec![0.0; c.diag.len()];
        for j in 0..a.ny {
            for i in 0..a.nx {
                rc[(j / 2).min(c.ny - 1) * c.nx + (i / 2).min(c.nx - 1)] += r[j * a.nx + i];
            }
        }
        let mut xc = vec![0.0; rc.len()];
        self.cycle(l + 1, &rc, &mut xc);
        for j in 0..a.ny {
            for i in 0..a.nx {
                let k = j * a.nx + i;
                if a.active[k] {
                    x[k] += self.over * xc[(j / 2).min(c.ny - 1) * c.nx + (i / 2).min(c.nx - 1)];
                }
            }
        }
        gauss_seidel(a, b, x, true);
    }
}

fn gauss_seidel(a: &FivePoint, b: &[f64], x: &mut [f64], backward: bool) {
    let (nx, ny) = (a.nx, a.ny);
    let mut relax = |k: usize| {
        if !a.active[k] || a.diag[k] <= 0.0 {
            return;
        }
        let (i, j) = (k % nx, k / nx);
        let mut s = b[k];
        if i + 1 < nx {
            s -= a.east[k] * x[k + 1];
        }
        if i > 0 {
            s -= a.east[k - 1] * x[k - 1];
        }
        if j + 1 < ny {
            s -= a.north[k] * x[k + nx];
        }
        if j > 0 {
            s -= a.north[k - nx] * x[k - nx];
        }
        x[k] = s / a.diag[k];
    };
    if backward {
        (0..nx * ny).rev().for_each(&mut relax);
    } else {
        (0..nx * ny).for_each(&mut relax);
    }
}

/// Galerkin coarse operator `Pᵀ A P` for piecewise-constant `P` on 2×2 aggregates (odd
/// trailing rows and columns join the last aggregate).
fn coarsen(f: &FivePoint) -> FivePoint {
    let (cnx, cny) = (f.nx / 2, f.ny / 2);
    let mut c = FivePoint::new(cnx, cny);
    let agg = |i: usize, j: usize| (j / 2).min(cny - 1) * cnx + (i / 2).min(cnx - 1);
    for j in 0..f.ny {
        for i in 0..f.nx {
            let k = j * f.nx + i;
            if !f.active[k] {
                continue;
            }
            let a = agg(i, j);
            c.active[a] = true;
            c.diag[a] += f.diag[k];
            if i + 1 < f.nx {
                let b = agg(i + 1, j);
                let w = f.east[k];
                if b == a {
                    c.diag[a] += 2.0 * w;
                } else {
                    c.east[a] += w;
                }
            }
            if j + 1 < f.ny {
                let b = agg(i, j + 1);
                let w = f.north[k];
                if b == a {
                    c.diag[a] += 2.0 * w;
                } else {
                    c.north[a] += w;
                }
            }
        }
    }
    c
}
