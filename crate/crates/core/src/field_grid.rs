//! Uniform 2D grids, MAC-staggered fields and the discrete calculus on them.
//!
//! Layout on an `nx × ny` grid with spacing `h` and lower-left corner `o`:
//!
//! | entity      | position                      | index range          | flat index      |
//! |-------------|-------------------------------|----------------------|-----------------|
//! | cell (i,j)  | `o + ((i+½)h, (j+½)h)`        | `i<nx, j<ny`         | `j*nx + i`      |
//! | u face      | `o + (i h, (j+½)h)`           | `i<=nx, j<ny`        | `j*(nx+1) + i`  |
//! | v face      | `o + ((i+½)h, j h)`           | `i<nx, j<=ny`        | `j*nx + i`      |
//! | node        | `o + (i h, j h)`              | `i<=nx, j<=ny`       | `j*(nx+1) + i`  |

use crate::error::{Error, Result};
use crate::geometry::{Sym2, Vec2};
use rand::Rng;
use std::ops::{Add, Mul, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2 {
    nx: usize,
    ny: usize,
    h: f64,
    origin: Vec2,
}

impl Grid2 {
    /// Square cells are enforced: `lx/nx` must equal `ly/ny`.
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, origin: Vec2) -> Result<Self> {
        if nx < 8 || ny < 8 {
            return Err(Error::InvalidArgument(format!("grid needs at least 8 cells per side, got {nx}x{ny}")));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::InvalidArgument(format!("domain lengths must be positive, got {lx} x {ly}")));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        let h = lx / nx as f64;
        if ((ly / ny as f64) - h).abs() > 1e-9 * h {
            return Err(Error::InvalidArgument(format!(
                "cells must be square: lx/nx = {h}, ly/ny = {}",
                ly / ny as f64
            )));
        }
        Ok(Grid2 { nx, ny, h, origin })
    }

    /// `n × n` cells on `[0, l]²`.
    pub fn square(n: usize, l: f64) -> Result<Self> {
        Grid2::new(n, n, l, l, Vec2::ZERO)
    }

    /// Same spacing, `pad` extra cells on every side.
    pub fn padded(&self, pad: usize) -> Grid2 {
        let p = pad as f64 * self.h;
        Grid2 {
            nx: self.nx + 2 * pad,
            ny: self.ny + 2 * pad,
            h: self.h,
            origin: self.origin - Vec2::new(p, p),
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.h
    }
    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.h
    }
    pub fn origin(&self) -> Vec2 {
        self.origin
    }
    pub fn area(&self) -> f64 {
        self.lx() * self.ly()
    }
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }
    pub fn n_ufaces(&self) -> usize {
        (self.nx + 1) * self.ny
    }
    pub fn n_vfaces(&self) -> usize {
        self.nx * (self.ny + 1)
    }
    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    #[inline]
    pub fn uf(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }
    #[inline]
    pub fn vf(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new((i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h)
    }
    pub fn u_pos(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new(i as f64 * self.h, (j as f64 + 0.5) * self.h)
    }
    pub fn v_pos(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new((i as f64 + 0.5) * self.h, j as f64 * self.h)
    }
    pub fn node_pos(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new(i as f64 * self.h, j as f64 * self.h)
    }

    /// Face position of component `axis` (0 = u, 1 = v).
    pub fn face_pos(&self, axis: usize, i: usize, j: usize) -> Vec2 {
        if axis == 0 {
            self.u_pos(i, j)
        } else {
            self.v_pos(i, j)
        }
    }

    /// `(columns, rows)` of the face array of component `axis`.
    pub fn face_dims(&self, axis: usize) -> (usize, usize) {
        if axis == 0 {
            (self.nx + 1, self.ny)
        } else {
            (self.nx, self.ny + 1)
        }
    }

    /// Distance from `p` to the domain boundary (negative outside).
    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        let a = p - self.origin;
        a.x.min(a.y).min(self.lx() - a.x).min(self.ly() - a.y)
    }

    /// Integer cell offset of `other`'s origin relative to ours, when both grids share `h`
    /// and their lattices line up.
    pub fn lattice_offset(&self, other: &Grid2) -> Option<(isize, isize)> {
        if (self.h - other.h).abs() > 1e-12 * self.h {
            return None;
        }
        let d = (other.origin - self.origin) * (1.0 / self.h);
        let (ox, oy) = (d.x.round(), d.y.round());
        if (d.x - ox).abs() > 1e-6 || (d.y - oy).abs() > 1e-6 {
            return None;
        }
        Some((ox as isize, oy as isize))
    }

    /// Inclusive index window of cells whose centres may lie within `radius` of `c`.
    pub fn cell_window(&self, c: Vec2, radius: f64) -> (usize, usize, usize, usize) {
        let lo = (c - self.origin) * (1.0 / self.h) - Vec2::new(radius / self.h + 1.0, radius / self.h + 1.0);
        let hi = (c - self.origin) * (1.0 / self.h) + Vec2::new(radius / self.h + 1.0, radius / self.h + 1.0);
        let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n);
        (
            clampi(lo.x, self.nx - 1),
            clampi(hi.x, self.nx - 1),
            clampi(lo.y, self.ny - 1),
            clampi(hi.y, self.ny - 1),
        )
    }
}

/// One value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid2) -> Self {
        ScalarField { data: vec![0.0; grid.n_cells()], grid }
    }

    pub fn constant(grid: Grid2, c: f64) -> Self {
        ScalarField { data: vec![c; grid.n_cells()], grid }
    }

    pub fn from_fn(grid: Grid2, f: impl Fn(Vec2) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.n_cells());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                data.push(f(grid.cell_center(i, j)));
            }
        }
        ScalarField { grid, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[self.grid.cell(i, j)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `∫ f` with cell quadrature.
    pub fn integral(&self) -> f64 {
        self.sum() * self.grid.h * self.grid.h
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy onto another lattice-aligned grid, zero where the source has no cell.
    pub fn transfer(&self, target: &Grid2) -> Result<ScalarField> {
        let (ox, oy) = target
            .lattice_offset(&self.grid)
            .ok_or_else(|| Error::InvalidArgument("grids are not lattice aligned".into()))?;
        let mut out = ScalarField::zeros(*target);
        for j in 0..self.grid.ny {
            for i in 0..self.grid.nx {
                let (ti, tj) = (i as isize + ox, j as isize + oy);
                if ti >= 0 && tj >= 0 && (ti as usize) < target.nx && (tj as usize) < target.ny {
                    out.data[target.cell(ti as usize, tj as usize)] = self.at(i, j);
                }
            }
        }
        Ok(out)
    }
}

/// MAC-staggered vector field: `u` on vertical faces, `v` on horizontal faces.
#[derive(Debug, Clone, PartialEq)]
pub struct VecField {
    pub grid: Grid2,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VecField {
    pub fn zeros(grid: Grid2) -> Self {
        VecField { u: vec![0.0; grid.n_ufaces()], v: vec![0.0; grid.n_vfaces()], grid }
    }

    pub fn constant(grid: Grid2, c: Vec2) -> Self {
        VecField { u: vec![c.x; grid.n_ufaces()], v: vec![c.y; grid.n_vfaces()], grid }
    }

    /// Samples `f(x).x` at u faces and `f(x).y` at v faces.
    pub fn from_fn(grid: Grid2, f: impl Fn(Vec2) -> Vec2) -> Self {
        let mut out = VecField::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                out.u[grid.uf(i, j)] = f(grid.u_pos(i, j)).x;
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                out.v[grid.vf(i, j)] = f(grid.v_pos(i, j)).y;
            }
        }
        out
    }

    /// Discrete curl of a node stream function: `u = ∂ψ/∂y`, `v = −∂ψ/∂x`.
    /// The result is divergence free up to rounding.
    pub fn from_node_stream(grid: Grid2, psi: &[f64]) -> Self {
        assert_eq!(psi.len(), grid.n_nodes());
        let inv_h = 1.0 / grid.h;
        let mut out = VecField::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                out.u[grid.uf(i, j)] = (psi[grid.node(i, j + 1)] - psi[grid.node(i, j)]) * inv_h;
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                out.v[grid.vf(i, j)] = -(psi[grid.node(i + 1, j)] - psi[grid.node(i, j)]) * inv_h;
            }
        }
        out
    }

    pub fn from_stream(grid: Grid2, psi: impl Fn(Vec2) -> f64) -> Self {
        let mut nodes = Vec::with_capacity(grid.n_nodes());
        for j in 0..=grid.ny {
            for i in 0..=grid.nx {
                nodes.push(psi(grid.node_pos(i, j)));
            }
        }
        VecField::from_node_stream(grid, &nodes)
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        if axis == 0 {
            &self.u
        } else {
            &self.v
        }
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut Vec<f64> {
        if axis == 0 {
            &mut self.u
        } else {
            &mut self.v
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(self.v.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.u.iter_mut().chain(self.v.iter_mut()).for_each(|v| *v *= s);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &VecField) {
        debug_assert_eq!(self.grid, other.grid);
        for (x, y) in self.u.iter_mut().zip(&other.u) {
            *x += a * y;
        }
        for (x, y) in self.v.iter_mut().zip(&other.v) {
            *x += a * y;
        }
    }

    /// Face-sum inner product `Σ u·u' h²`.
    pub fn dot(&self, other: &VecField) -> f64 {
        let s: f64 = self.u.iter().zip(&other.u).map(|(a, b)| a * b).sum::<f64>()
            + self.v.iter().zip(&other.v).map(|(a, b)| a * b).sum::<f64>();
        s * self.grid.h * self.grid.h
    }

    /// Value of the `u` array with no-slip ghost rows (`j = -1`, `j = ny` mirror with sign flip).
    #[inline]
    fn u_ghost(&self, i: usize, j: isize) -> f64 {
        let g = &self.grid;
        if j < 0 {
            -self.u[g.uf(i, 0)]
        } else if j as usize >= g.ny {
            -self.u[g.uf(i, g.ny - 1)]
        } else {
            self.u[g.uf(i, j as usize)]
        }
    }

    #[inline]
    fn v_ghost(&self, i: isize, j: usize) -> f64 {
        let g = &self.grid;
        if i < 0 {
            -self.v[g.vf(0, j)]
        } else if i as usize >= g.nx {
            -self.v[g.vf(g.nx - 1, j)]
        } else {
            self.v[g.vf(i as usize, j)]
        }
    }

    /// Bilinear interpolation of both components at `p`, clamped into the domain, using
    /// no-slip ghost values for the tangential component next to walls.
    pub fn sample(&self, p: Vec2) -> Vec2 {
        Vec2::new(self.sample_u(p), self.sample_v(p))
    }

    pub fn sample_u(&self, p: Vec2) -> f64 {
        let g = &self.grid;
        let q = (p - g.origin) * (1.0 / g.h);
        let fx = q.x.clamp(0.0, g.nx as f64);
        let fy = (q.y.clamp(0.0, g.ny as f64)) - 0.5;
        let i0 = (fx.floor() as usize).min(g.nx - 1);
        let tx = fx - i0 as f64;
        let j0 = (fy.floor() as isize).clamp(-1, g.ny as isize - 1);
        let ty = fy - j0 as f64;
        let a = self.u_ghost(i0, j0) * (1.0 - tx) + self.u_ghost(i0 + 1, j0) * tx;
        let b = self.u_ghost(i0, j0 + 1) * (1.0 - tx) + self.u_ghost(i0 + 1, j0 + 1) * tx;
        a * (1.0 - ty) + b * ty
    }

    pub fn sample_v(&self, p: Vec2) -> f64 {
        let g = &self.grid;
        let q = (p - g.origin) * (1.0 / g.h);
        let fx = (q.x.clamp(0.0, g.nx as f64)) - 0.5;
        let fy = q.y.clamp(0.0, g.ny as f64);
        let j0 = (fy.floor() as usize).min(g.ny - 1);
        let ty = fy - j0 as f64;
        let i0 = (fx.floor() as isize).clamp(-1, g.nx as isize - 1);
        let tx = fx - i0 as f64;
        let a = self.v_ghost(i0, j0) * (1.0 - ty) + self.v_ghost(i0, j0 + 1) * ty;
        let b = self.v_ghost(i0 + 1, j0) * (1.0 - ty) + self.v_ghost(i0 + 1, j0 + 1) * ty;
        a * (1.0 - tx) + b * tx
    }

    /// Cell-centred components (average of the two adjacent faces).
    pub fn cell_centered(&self) -> (Vec<f64>, Vec<f64>) {
        let g = &self.grid;
        let mut cu = vec![0.0; g.n_cells()];
        let mut cv = vec![0.0; g.n_cells()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.cell(i, j);
                cu[c] = 0.5 * (self.u[g.uf(i, j)] + self.u[g.uf(i + 1, j)]);
                cv[c] = 0.5 * (self.v[g.vf(i, j)] + self.v[g.vf(i, j + 1)]);
            }
        }
        (cu, cv)
    }

    /// Centred difference `∂_axis` of each component on its own face lattice, zero
    /// extension past the array ends. Commutes with [`divergence`], so it maps discretely
    /// solenoidal, compactly supported fields to discretely solenoidal fields.
    pub fn partial(&self, axis: usize) -> VecField {
        let g = self.grid;
        let mut out = VecField::zeros(g);
        let s = 0.5 / g.h;
        for comp in 0..2 {
            let (cols, rows) = g.face_dims(comp);
            let src = self.component(comp);
            let dst = out.component_mut(comp);
            let at = |i: isize, j: isize| -> f64 {
                if i < 0 || j < 0 || i as usize >= cols || j as usize >= rows {
                    0.0
                } else {
                    src[j as usize * cols + i as usize]
                }
            };
            for j in 0..rows as isize {
                for i in 0..cols as isize {
                    let d = if axis == 0 { at(i + 1, j) - at(i - 1, j) } else { at(i, j + 1) - at(i, j - 1) };
                    dst[j as usize * cols + i as usize] = d * s;
                }
            }
        }
        out
    }

    /// Copy onto another lattice-aligned grid (embedding or cropping), zero where the source
    /// has no face.
    pub fn transfer(&self, target: &Grid2) -> Result<VecField> {
        let (ox, oy) = target
            .lattice_offset(&self.grid)
            .ok_or_else(|| Error::InvalidArgument("grids are not lattice aligned".into()))?;
        let mut out = VecField::zeros(*target);
        for comp in 0..2 {
            let (sc, sr) = self.grid.face_dims(comp);
            let (tc, tr) = target.face_dims(comp);
            let src = self.component(comp);
            let dst = out.component_mut(comp);
            for j in 0..sr {
                let tj = j as isize + oy;
                if tj < 0 || tj as usize >= tr {
                    continue;
                }
                for i in 0..sc {
                    let ti = i as isize + ox;
                    if ti < 0 || ti as usize >= tc {
                        continue;
                    }
                    dst[tj as usize * tc + ti as usize] = src[j * sc + i];
                }
            }
        }
        Ok(out)
    }
}

impl Add<&VecField> for &VecField {
    type Output = VecField;
    fn add(self, o: &VecField) -> VecField {
        let mut r = self.clone();
        r.axpy(1.0, o);
        r
    }
}

impl Sub<&VecField> for &VecField {
    type Output = VecField;
    fn sub(self, o: &VecField) -> VecField {
        let mut r = self.clone();
        r.axpy(-1.0, o);
        r
    }
}

impl Mul<f64> for &VecField {
    type Output = VecField;
    fn mul(self, s: f64) -> VecField {
        let mut r = self.clone();
        r.scale(s);
        r
    }
}

/// Cell-centred symmetric tensor field.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub grid: Grid2,
    pub xx: Vec<f64>,
    pub yy: Vec<f64>,
    pub xy: Vec<f64>,
}

impl TensorField {
    pub fn zeros(grid: Grid2) -> Self {
        let n = grid.n_cells();
        TensorField { grid, xx: vec![0.0; n], yy: vec![0.0; n], xy: vec![0.0; n] }
    }

    pub fn get(&self, c: usize) -> Sym2 {
        Sym2::new(self.xx[c], self.yy[c], self.xy[c])
    }

    pub fn set(&mut self, c: usize, s: Sym2) {
        self.xx[c] = s.xx;
        self.yy[c] = s.yy;
        self.xy[c] = s.xy;
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.xx.len()).fold(0.0, |m, c| m.max(self.get(c).norm()))
    }
}

/// How the symmetric gradient treats the tangential component beyond the walls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WallRule {
    /// Mirror without sign change (zero normal derivative). Constants have zero gradient.
    #[default]
    Free,
    /// Mirror with sign flip, so the tangential velocity vanishes on the wall.
    NoSlip,
}

/// Symmetric gradient with [`WallRule::Free`] walls.
///
/// Diagonal entries are the face differences at cell centres; the off-diagonal entry is
/// computed at nodes and averaged over the four corners of each cell.
pub fn sym_gradient(u: &VecField) -> TensorField {
    sym_gradient_with(u, WallRule::Free)
}

pub fn sym_gradient_with(u: &VecField, wall: WallRule) -> TensorField {
    let g = u.grid;
    let inv_h = 1.0 / g.h;
    let d12 = strain_nodes(u, wall);
    let mut out = TensorField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = g.cell(i, j);
            out.xx[c] = (u.u[g.uf(i + 1, j)] - u.u[g.uf(i, j)]) * inv_h;
            out.yy[c] = (u.v[g.vf(i, j + 1)] - u.v[g.vf(i, j)]) * inv_h;
            out.xy[c] = 0.25
                * (d12[g.node(i, j)] + d12[g.node(i + 1, j)] + d12[g.node(i, j + 1)] + d12[g.node(i + 1, j + 1)]);
        }
    }
    out
}

/// Off-diagonal strain `½(∂u/∂y + ∂v/∂x)` at every node.
pub fn strain_nodes(u: &VecField, wall: WallRule) -> Vec<f64> {
    let g = u.grid;
    let inv_h = 1.0 / g.h;
    let sign = match wall {
        WallRule::Free => 1.0,
        WallRule::NoSlip => -1.0,
    };
    let uat = |i: usize, j: isize| -> f64 {
        if j < 0 {
            sign * u.u[g.uf(i, 0)]
        } else if j as usize >= g.ny {
            sign * u.u[g.uf(i, g.ny - 1)]
        } else {
            u.u[g.uf(i, j as usize)]
        }
    };
    let vat = |i: isize, j: usize| -> f64 {
        if i < 0 {
            sign * u.v[g.vf(0, j)]
        } else if i as usize >= g.nx {
            sign * u.v[g.vf(g.nx - 1, j)]
        } else {
            u.v[g.vf(i as usize, j)]
        }
    };
    let mut out = vec![0.0; g.n_nodes()];
    for j in 0..=g.ny {
        for i in 0..=g.nx {
            let dudy = (uat(i, j as isize) - uat(i, j as isize - 1)) * inv_h;
            let dvdx = (vat(i as isize, j) - vat(i as isize - 1, j)) * inv_h;
            out[g.node(i, j)] = 0.5 * (dudy + dvdx);
        }
    }
    out
}

/// Cell-centred divergence; the negative adjoint of [`gradient`] on fields whose
/// wall-normal faces vanish.
pub fn divergence(u: &VecField) -> ScalarField {
    let g = u.grid;
    let inv_h = 1.0 / g.h;
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            out.data[g.cell(i, j)] = (u.u[g.uf(i + 1, j)] - u.u[g.uf(i, j)] + u.v[g.vf(i, j + 1)] - u.v[g.vf(i, j)]) * inv_h;
        }
    }
    out
}

/// Face gradient of a cell field; wall-normal faces are zero.
pub fn gradient(q: &ScalarField) -> VecField {
    let g = q.grid;
    let inv_h = 1.0 / g.h;
    let mut out = VecField::zeros(g);
    for j in 0..g.ny {
        for i in 1..g.nx {
            out.u[g.uf(i, j)] = (q.at(i, j) - q.at(i - 1, j)) * inv_h;
        }
    }
    for j in 1..g.ny {
        for i in 0..g.nx {
            out.v[g.vf(i, j)] = (q.at(i, j) - q.at(i, j - 1)) * inv_h;
        }
    }
    out
}

/// Five-point Neumann Laplacian, identical to `divergence(gradient(q))`.
pub fn laplacian(q: &ScalarField) -> ScalarField {
    let g = q.grid;
    let inv_h2 = 1.0 / (g.h * g.h);
    let mut out = ScalarField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let c = q.at(i, j);
            let mut s = 0.0;
            if i > 0 {
                s += q.at(i - 1, j) - c;
            }
            if i + 1 < g.nx {
                s += q.at(i + 1, j) - c;
            }
            if j > 0 {
                s += q.at(i, j - 1) - c;
            }
            if j + 1 < g.ny {
                s += q.at(i, j + 1) - c;
            }
            out.data[g.cell(i, j)] = s * inv_h2;
        }
    }
    out
}

/// Discrete `L^p` norms `(Σ |value|^p h²)^{1/p}`; `p = ∞` gives the max.
///
/// For a [`VecField`] every face sample counts as one value; for a [`TensorField`] the value
/// is the pointwise Frobenius norm.
pub trait LpNorm {
    fn lp_norm(&self, p: f64) -> Result<f64>;
}

fn check_p(p: f64) -> Result<()> {
    if p >= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lp_norm needs p >= 1, got {p}")))
    }
}

fn accumulate(values: impl Iterator<Item = f64>, p: f64, h: f64) -> f64 {
    if p.is_infinite() {
        values.fold(0.0, |m, v| m.max(v.abs()))
    } else if p == 2.0 {
        (values.map(|v| v * v).sum::<f64>() * h * h).sqrt()
    } else {
        (values.map(|v| v.abs().powf(p)).sum::<f64>() * h * h).powf(1.0 / p)
    }
}

impl LpNorm for ScalarField {
    fn lp_norm(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        Ok(accumulate(self.data.iter().copied(), p, self.grid.h))
    }
}

impl LpNorm for VecField {
    fn lp_norm(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        Ok(accumulate(self.u.iter().chain(self.v.iter()).copied(), p, self.grid.h))
    }
}

impl LpNorm for TensorField {
    fn lp_norm(&self, p: f64) -> Result<f64> {
        check_p(p)?;
        Ok(accumulate((0..self.xx.len()).map(|c| self.get(c).norm()), p, self.grid.h))
    }
}

pub fn lp_norm<F: LpNorm + ?Sized>(f: &F, p: f64) -> Result<f64> {
    f.lp_norm(p)
}

/// `L^p` norm of the face samples whose positions satisfy `mask`.
pub fn lp_norm_masked(u: &VecField, p: f64, mask: impl Fn(Vec2) -> bool) -> Result<f64> {
    check_p(p)?;
    let g = u.grid;
    let mut vals = Vec::new();
    for comp in 0..2 {
        let (cols, rows) = g.face_dims(comp);
        let a = u.component(comp);
        for j in 0..rows {
            for i in 0..cols {
                if mask(g.face_pos(comp, i, j)) {
                    vals.push(a[j * cols + i]);
                }
            }
        }
    }
    Ok(accumulate(vals.into_iter(), p, g.h))
}

/// `L^p` norm of the full discrete gradient of `u`, sampled where `mask` holds.
///
/// `∂u/∂x` and `∂v/∂y` live at cell centres, `∂u/∂y` and `∂v/∂x` at interior nodes. Only
/// differences between stored samples are used, so constants have zero gradient.
pub fn grad_lp_norm_masked(u: &VecField, p: f64, mask: impl Fn(Vec2) -> bool) -> Result<f64> {
    check_p(p)?;
    let g = u.grid;
    let inv_h = 1.0 / g.h;
    let mut vals = Vec::with_capacity(4 * g.n_cells());
    for j in 0..g.ny {
        for i in 0..g.nx {
            if mask(g.cell_center(i, j)) {
                vals.push((u.u[g.uf(i + 1, j)] - u.u[g.uf(i, j)]) * inv_h);
                vals.push((u.v[g.vf(i, j + 1)] - u.v[g.vf(i, j)]) * inv_h);
            }
        }
    }
    for j in 1..g.ny {
        for i in 0..=g.nx {
            if mask(g.node_pos(i, j)) {
                vals.push((u.u[g.uf(i, j)] - u.u[g.uf(i, j - 1)]) * inv_h);
            }
        }
    }
    for j in 0..=g.ny {
        for i in 1..g.nx {
            if mask(g.node_pos(i, j)) {
                vals.push((u.v[g.vf(i, j)] - u.v[g.vf(i - 1, j)]) * inv_h);
            }
        }
    }
    Ok(accumulate(vals.into_iter(), p, g.h))
}

pub fn grad_lp_norm(u: &VecField, p: f64) -> Result<f64> {
    grad_lp_norm_masked(u, p, |_| true)
}

/// Membership rule for [`ball_average_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BallWeight {
    /// Cells whose centres lie in the closed ball, cell-centred values, weight 1.
    #[default]
    Sharp,
    /// Face samples of each component with weight `clamp(½ + (r − d)/h, 0, 1)`, `d` the
    /// distance to the centre. Continuous in the centre and radius.
    SoftEdge,
}

/// Mean of `u` over the cells whose centres lie in `B_radius(center)`.
pub fn ball_average(u: &VecField, center: Vec2, radius: f64) -> Result<Vec2> {
    ball_average_with(u, center, radius, BallWeight::Sharp)
}

pub fn ball_average_with(u: &VecField, center: Vec2, radius: f64, weight: BallWeight) -> Result<Vec2> {
    let g = u.grid;
    let empty = || Error::EmptyBall { cx: center.x, cy: center.y, radius };
    if !(radius > 0.0) {
        return Err(empty());
    }
    let (i0, i1, j0, j1) = g.cell_window(center, radius + g.h);
    match weight {
        BallWeight::Sharp => {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    if (g.cell_center(i, j) - center).norm() <= radius {
                        sx += 0.5 * (u.u[g.uf(i, j)] + u.u[g.uf(i + 1, j)]);
                        sy += 0.5 * (u.v[g.vf(i, j)] + u.v[g.vf(i, j + 1)]);
                        n += 1;
                    }
                }
            }
            if n == 0 {
                return Err(empty());
            }
            Ok(Vec2::new(sx / n as f64, sy / n as f64))
        }
        BallWeight::SoftEdge => {
            let mut out = [0.0; 2];
            for (comp, o) in out.iter_mut().enumerate() {
                let (cols, rows) = g.face_dims(comp);
                let a = u.component(comp);
                let (mut s, mut w) = (0.0, 0.0);
                for j in j0..=(j1 + 1).min(rows - 1) {
                    for i in i0..=(i1 + 1).min(cols - 1) {
                        let d = (g.face_pos(comp, i, j) - center).norm();
                        let wt = soft_weight(radius, d, g.h);
                        if wt > 0.0 {
                            s += wt * a[j * cols + i];
                            w += wt;
                        }
                    }
                }
                if w == 0.0 {
                    return Err(empty());
                }
                *o = s / w;
            }
            Ok(Vec2::new(out[0], out[1]))
        }
    }
}

#[inline]
pub(crate) fn soft_weight(radius: f64, d: f64, h: f64) -> f64 {
    (0.5 + (radius - d) / h).clamp(0.0, 1.0)
}

/// Random divergence-free fields built as the discrete curl of a windowed random stream
/// function. Support is the disc `B_support(center)`. The stream function is tapered to
/// zero within half a wavelength of the walls, so the zero extension beyond the box is
/// solenoidal too.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolenoidalSampler {
    pub center: Vec2,
    pub support: f64,
    /// Typical wavelength of the Fourier modes.
    pub wavelength: f64,
    pub modes: usize,
}

impl SolenoidalSampler {
    pub fn sample<R: Rng + ?Sized>(&self, grid: &Grid2, rng: &mut R) -> VecField {
        let modes: Vec<(Vec2, f64, f64)> = (0..self.modes.max(1))
            .map(|_| {
                let k = std::f64::consts::TAU / self.wavelength * rng.gen_range(0.5..1.5);
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(-1.0..1.0) / k;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (Vec2::new(k * dir.cos(), k * dir.sin()), amp, phase)
            })
            .collect();
        let (c, r) = (self.center, self.support);
        let band = 0.5 * self.wavelength;
        VecField::from_stream(*grid, |x| {
            let rho2 = (x - c).dot(x - c) / (r * r);
            if rho2 >= 1.0 {
                return 0.0;
            }
            let z = (grid.boundary_distance(x) / band).clamp(0.0, 1.0);
            let w = (1.0 - rho2).powi(3) * z * z * (3.0 - 2.0 * z);
            let s: f64 = modes.iter().map(|(k, a, ph)| a * (k.dot(x - c) + ph).cos()).sum();
            w * s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Grid2 {
        Grid2::square(n, 1.0).unwrap()
    }

    #[test]
    fn grid_rejects_non_square_cells_and_tiny_grids() {
        assert!(Grid2::new(16, 16, 1.0, 2.0, Vec2::ZERO).is_err());
        assert!(Grid2::new(4, 4, 1.0, 1.0, Vec2::ZERO).is_err());
        assert!(Grid2::new(16, 32, 1.0, 2.0, Vec2::ZERO).is_ok());
    }

    #[test]
    fn constant_field_has_zero_strain_and_divergence() {
        let g = unit(16);
        let u = VecField::constant(g, Vec2::new(0.3, -0.7));
        let d = sym_gradient(&u);
        assert_eq!(d.max_norm(), 0.0);
        assert_eq!(divergence(&u).max_abs(), 0.0);
    }

    #[test]
    fn linear_shear_has_unit_off_diagonal() {
        let g = unit(32);
        let u = VecField::from_fn(g, |x| Vec2::new(x.y, x.x));
        let d = sym_gradient(&u);
        for j in 1..g.ny() - 1 {
            for i in 1..g.nx() - 1 {
                let s = d.get(g.cell(i, j));
                assert!((s.xy - 1.0).abs() < 1e-12 && s.xx.abs() < 1e-12 && s.yy.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_of_linear_fields() {
        let g = unit(20);
        let a = VecField::from_fn(g, |x| Vec2::new(x.x, -x.y));
        assert!(divergence(&a).max_abs() < 1e-12);
        let b = VecField::from_fn(g, |x| Vec2::new(x.x, x.y));
        assert!(divergence(&b).data.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn norms_of_simple_fields() {
        let g = unit(16);
        assert_eq!(ScalarField::zeros(g).lp_norm(3.0).unwrap(), 0.0);
        assert!((ScalarField::constant(g, 1.0).lp_norm(2.0).unwrap() - 1.0).abs() < 1e-14);
        assert!(ScalarField::zeros(g).lp_norm(0.5).is_err());
        let f = ScalarField::from_fn(g, |x| x.x - 2.0 * x.y);
        assert_eq!(f.lp_norm(f64::INFINITY).unwrap(), f.max_abs());
    }

    #[test]
    fn stream_function_fields_are_solenoidal() {
        let g = unit(64);
        let s = SolenoidalSampler { center: Vec2::new(0.5, 0.5), support: 0.4, wavelength: 0.2, modes: 6 };
        let u = s.sample(&g, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(u.max_abs() > 0.1);
        assert!(divergence(&u).max_abs() < 1e-10);
        // compact support: nothing on faces far from the window
        let far = lp_norm_masked(&u, f64::INFINITY, |x| (x - s.center).norm() > s.support + 2.0 * g.h()).unwrap();
        assert_eq!(far, 0.0);
    }

    #[test]
    fn ball_average_rotation_is_zero_and_constant_is_kept() {
        let g = Grid2::new(64, 64, 2.0, 2.0, Vec2::new(-1.0, -1.0)).unwrap();
        let rot = VecField::from_fn(g, |x| Vec2::new(-x.y, x.x));
        for w in [BallWeight::Sharp, BallWeight::SoftEdge] {
            let a = ball_average_with(&rot, Vec2::ZERO, 0.37, w).unwrap();
            assert!(a.norm() < 1e-12, "{w:?}: {a:?}");
            let c = VecField::constant(g, Vec2::new(2.0, -1.0));
            let b = ball_average_with(&c, Vec2::new(0.1, 0.2), 0.3, w).unwrap();
            assert!((b - Vec2::new(2.0, -1.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn ball_average_errors_on_empty_ball() {
        let g = unit(16);
        let u = VecField::zeros(g);
        let e = ball_average(&u, Vec2::new(0.5, 0.5), 0.01).unwrap_err();
        assert!(e.to_string().contains("empty ball"));
    }

    #[test]
    fn transfer_round_trip() {
        let g = unit(16);
        let u = VecField::from_fn(g, |x| Vec2::new(x.x * x.y, x.x - x.y));
        let big = g.padded(5);
        let back = u.transfer(&big).unwrap().transfer(&g).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn sampling_reproduces_face_values_and_vanishes_on_walls() {
        let g = unit(16);
        let u = VecField::from_fn(g, |x| Vec2::new((x.x * 3.0).sin(), x.x * x.y));
        for (i, j) in [(3, 4), (0, 7), (16, 2)] {
            assert!((u.sample_u(g.u_pos(i, j)) - u.u[g.uf(i, j)]).abs() < 1e-14);
        }
        // tangential component is zero on the wall by the ghost rule
        assert!(u.sample_u(Vec2::new(0.3, 0.0)).abs() < 1e-14);
        assert!(u.sample_v(Vec2::new(1.0, 0.4)).abs() < 1e-14);
    }
}
