//! Rigid bodies: geometry, kinematic state, rasterization onto the grid and the projection
//! of a velocity field onto rigid motions.
//!
//! A body is rasterized by cell centres. A face belongs to a body when one of its two
//! adjacent cells does; when the two cells belong to different bodies the later body in
//! the cloud (the larger one) wins, the same for cells covered twice.

use crate::error::{Error, Result};
use crate::field_grid::{Grid2, ScalarField, VecField};
use crate::geometry::Vec2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { radius: f64 },
    /// Vertices in the body frame, counter-clockwise, centroid at the origin.
    Polygon { vertices: Vec<Vec2> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyState {
    pub shape: Shape,
    /// Barycentre.
    pub h: Vec2,
    pub theta: f64,
    /// Translational velocity.
    pub y: Vec2,
    pub omega: f64,
    pub density: f64,
}

fn polygon_moments(v: &[Vec2]) -> (f64, Vec2, f64) {
    // signed area, centroid, polar second moment about the origin
    let (mut a, mut cx, mut cy, mut ip) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..v.len() {
        let (p, q) = (v[k], v[(k + 1) % v.len()]);
        let c = p.cross(q);
        a += c;
        cx += (p.x + q.x) * c;
        cy += (p.y + q.y) * c;
        ip += c * (p.x * p.x + p.x * q.x + q.x * q.x + p.y * p.y + p.y * q.y + q.y * q.y);
    }
    let a = 0.5 * a;
    (a, Vec2::new(cx / (6.0 * a), cy / (6.0 * a)), ip / 12.0)
}

impl BodyState {
    pub fn disc(center: Vec2, radius: f64, density: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::hypothesis("w10a", format!("disc radius must be positive, got {radius}")));
        }
        BodyState::checked(Shape::Disc { radius }, center, density)
    }

    /// Polygon with vertices given relative to `center`; the barycentre is recomputed and
    /// the vertex list stored relative to it.
    pub fn polygon(center: Vec2, vertices: Vec<Vec2>, density: f64) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument("polygon needs at least 3 vertices".into()));
        }
        let (area, centroid, _) = polygon_moments(&vertices);
        if !(area.abs() > 1e-14) {
            return Err(Error::hypothesis("w10a", "polygon has zero area"));
        }
        let mut local: Vec<Vec2> = vertices.iter().map(|v| *v - centroid).collect();
        if area < 0.0 {
            local.reverse();
        }
        BodyState::checked(Shape::Polygon { vertices: local }, center + centroid, density)
    }

    fn checked(shape: Shape, h: Vec2, density: f64) -> Result<Self> {
        if !(density > 0.0 && density.is_finite()) {
            return Err(Error::InvalidArgument(format!("body density must be positive, got {density}")));
        }
        if !h.is_finite() {
            return Err(Error::InvalidArgument("body centre must be finite".into()));
        }
        Ok(BodyState { shape, h, theta: 0.0, y: Vec2::ZERO, omega: 0.0, density })
    }

    pub fn with_velocity(mut self, y: Vec2, omega: f64) -> Self {
        self.y = y;
        self.omega = omega;
        self
    }

    /// `|S|`.
    pub fn area(&self) -> f64 {
        match &self.shape {
            Shape::Disc { radius } => std::f64::consts::PI * radius * radius,
            Shape::Polygon { vertices } => polygon_moments(vertices).0.abs(),
        }
    }

    pub fn mass(&self) -> f64 {
        self.density * self.area()
    }

    /// `J = ρ ∫_S |x − h|²`.
    pub fn inertia(&self) -> f64 {
        match &self.shape {
            Shape::Disc { radius } => 0.5 * self.density * std::f64::consts::PI * radius.powi(4),
            Shape::Polygon { vertices } => self.density * polygon_moments(vertices).2.abs(),
        }
    }

    /// Radius `r` of the smallest ball about `h` containing the body.
    pub fn bounding_radius(&self) -> f64 {
        match &self.shape {
            Shape::Disc { radius } => *radius,
            Shape::Polygon { vertices } => vertices.iter().map(|v| v.norm()).fold(0.0, f64::max),
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.h;
        match &self.shape {
            Shape::Disc { radius } => d.dot(d) < radius * radius,
            Shape::Polygon { vertices } => {
                let q = d.rotate(-self.theta);
                let mut inside = false;
                let n = vertices.len();
                for k in 0..n {
                    let (a, b) = (vertices[k], vertices[(k + n - 1) % n]);
                    if (a.y > q.y) != (b.y > q.y) && q.x < (b.x - a.x) * (q.y - a.y) / (b.y - a.y) + a.x {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// `Y + ω ∧ (x − h)`.
    pub fn rigid_velocity_at(&self, x: Vec2) -> Vec2 {
        self.y + (x - self.h).perp() * self.omega
    }
}

/// Cells whose centres lie in `b`.
pub fn body_indicator(b: &BodyState, g: &Grid2) -> ScalarField {
    let mut out = ScalarField::zeros(*g);
    let (i0, i1, j0, j1) = g.cell_window(b.h, b.bounding_radius());
    for j in j0..=j1 {
        for i in i0..=i1 {
            if b.contains(g.cell_center(i, j)) {
                out.data[g.cell(i, j)] = 1.0;
            }
        }
    }
    out
}

/// `Y + ω ∧ (x − h)` on the faces of the body's cells, zero elsewhere.
pub fn rigid_velocity(b: &BodyState, g: &Grid2) -> VecField {
    let ind = body_indicator(b, g);
    let mut out = VecField::zeros(*g);
    for j in 0..g.ny() {
        for i in 0..=g.nx() {
            let l = i > 0 && ind.at(i - 1, j) > 0.0;
            let r = i < g.nx() && ind.at(i, j) > 0.0;
            if l || r {
                out.u[g.uf(i, j)] = b.rigid_velocity_at(g.u_pos(i, j)).x;
            }
        }
    }
    for j in 0..=g.ny() {
        for i in 0..g.nx() {
            let d = j > 0 && ind.at(i, j - 1) > 0.0;
            let t = j < g.ny() && ind.at(i, j) > 0.0;
            if d || t {
                out.v[g.vf(i, j)] = b.rigid_velocity_at(g.v_pos(i, j)).y;
            }
        }
    }
    out
}

/// Bodies ordered by ascending bounding radius.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cloud {
    pub bodies: Vec<BodyState>,
}

impl Cloud {
    /// Rejects bodies that are not in ascending radius order.
    pub fn new(bodies: Vec<BodyState>) -> Result<Self> {
        if let Some(k) = bodies.windows(2).position(|w| w[1].bounding_radius() < w[0].bounding_radius()) {
            return Err(Error::hypothesis(
                "i1",
                format!(
                    "body radii must be ascending, r[{k}] = {} > r[{}] = {}",
                    bodies[k].bounding_radius(),
                    k + 1,
                    bodies[k + 1].bounding_radius()
                ),
            ));
        }
        Ok(Cloud { bodies })
    }

    /// Stable sort by bounding radius.
    pub fn sorted(mut bodies: Vec<BodyState>) -> Self {
        bodies.sort_by(|a, b| a.bounding_radius().total_cmp(&b.bounding_radius()));
        Cloud { bodies }
    }

    pub fn len(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bodies.is_empty()
    }

    /// `vol[N] = Σ r_n^d` with `d = 2`.
    pub fn packing_volume(&self) -> f64 {
        self.bodies.iter().map(|b| b.bounding_radius().powi(2)).sum()
    }
}

/// Marker for fluid in ownership arrays.
pub const FLUID: u32 = u32::MAX;

/// Cell and face ownership of a cloud on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMap {
    pub grid: Grid2,
    pub cell: Vec<u32>,
    pub uface: Vec<u32>,
    pub vface: Vec<u32>,
    pub cells_per_body: Vec<usize>,
}

impl BodyMap {
    pub fn new(cloud: &Cloud, g: &Grid2) -> Self {
        let mut cell = vec![FLUID; g.n_cells()];
        for (k, b) in cloud.bodies.iter().enumerate() {
            let (i0, i1, j0, j1) = g.cell_window(b.h, b.bounding_radius());
            for j in j0..=j1 {
                for i in i0..=i1 {
                    if b.contains(g.cell_center(i, j)) {
                        cell[g.cell(i, j)] = k as u32;
                    }
                }
            }
        }
        let pick = |a: u32, b: u32| match (a, b) {
            (FLUID, x) | (x, FLUID) => x,
            (x, y) => x.max(y),
        };
        let mut uface = vec![FLUID; g.n_ufaces()];
        for j in 0..g.ny() {
            for i in 1..g.nx() {
                uface[g.uf(i, j)] = pick(cell[g.cell(i - 1, j)], cell[g.cell(i, j)]);
            }
        }
        let mut vface = vec![FLUID; g.n_vfaces()];
        for j in 1..g.ny() {
            for i in 0..g.nx() {
                vface[g.vf(i, j)] = pick(cell[g.cell(i, j - 1)], cell[g.cell(i, j)]);
            }
        }
        let mut cells_per_body = vec![0; cloud.len()];
        for &c in &cell {
            if c != FLUID {
                cells_per_body[c as usize] += 1;
            }
        }
        BodyMap { grid: *g, cell, uface, vface, cells_per_body }
    }

    /// `ρ_f` on fluid cells, the body density on body cells.
    pub fn density(&self, cloud: &Cloud, rho_f: f64) -> ScalarField {
        let mut rho = ScalarField::constant(self.grid, rho_f);
        for (r, &c) in rho.data.iter_mut().zip(&self.cell) {
            if c != FLUID {
                *r = cloud.bodies[c as usize].density;
            }
        }
        rho
    }

    pub fn face_owner(&self, axis: usize, k: usize) -> u32 {
        if axis == 0 {
            self.uface[k]
        } else {
            self.vface[k]
        }
    }
}

/// Face density: mean of the two adjacent cells (the single interior neighbour on walls).
pub fn face_density(rho: &ScalarField, axis: usize, i: usize, j: usize) -> f64 {
    let g = rho.grid;
    let (a, b) = if axis == 0 {
        (if i > 0 { Some(rho.at(i - 1, j)) } else { None }, if i < g.nx() { Some(rho.at(i, j)) } else { None })
    } else {
        (if j > 0 { Some(rho.at(i, j - 1)) } else { None }, if j < g.ny() { Some(rho.at(i, j)) } else { None })
    };
    match (a, b) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.0,
    }
}

/// Rigid-motion basis row at a face: `u ≈ Φ·(Y₁, Y₂, ω)`.
#[inline]
pub(crate) fn rigid_basis(axis: usize, x: Vec2, h: Vec2) -> [f64; 3] {
    if axis == 0 {
        [1.0, 0.0, -(x.y - h.y)]
    } else {
        [0.0, 1.0, x.x - h.x]
    }
}

pub(crate) fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(d.abs() > 1e-14 * scale.powi(3)) {
        return None;
    }
    let mut x = [0.0; 3];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = b[r];
        }
        *xk = det(mk) / d;
    }
    Some(x)
}

/// Density-weighted least-squares fit of a rigid motion to `u` over the given faces.
pub(crate) fn fit_rigid(
    u: &VecField,
    rho: &ScalarField,
    h: Vec2,
    faces: impl Iterator<Item = (usize, usize, usize)>,
) -> Option<(Vec2, f64)> {
    let g = u.grid;
    let mut m = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for (axis, i, j) in faces {
        let x = g.face_pos(axis, i, j);
        let w = face_density(rho, axis, i, j);
        let phi = rigid_basis(axis, x, h);
        let val = if axis == 0 { u.u[g.uf(i, j)] } else { u.v[g.vf(i, j)] };
        for r in 0..3 {
            rhs[r] += w * phi[r] * val;
            for c in 0..3 {
                m[r][c] += w * phi[r] * phi[c];
            }
        }
    }
    solve3(m, rhs).map(|q| (Vec2::new(q[0], q[1]), q[2]))
}

/// Faces adjacent to at least one cell of `b`.
fn body_faces(b: &BodyState, g: &Grid2) -> (Vec<(usize, usize, usize)>, usize) {
    let ind = body_indicator(b, g);
    let cells = ind.data.iter().filter(|v| **v > 0.0).count();
    let mut faces = Vec::new();
    let (i0, i1, j0, j1) = g.cell_window(b.h, b.bounding_radius());
    for j in j0..=j1 {
        for i in i0..=(i1 + 1).min(g.nx()) {
            if (i > 0 && ind.at(i - 1, j) > 0.0) || (i < g.nx() && ind.at(i, j) > 0.0) {
                faces.push((0, i, j));
            }
        }
    }
    for j in j0..=(j1 + 1).min(g.ny()) {
        for i in i0..=i1 {
            if (j > 0 && ind.at(i, j - 1) > 0.0) || (j < g.ny() && ind.at(i, j) > 0.0) {
                faces.push((1, i, j));
            }
        }
    }
    (faces, cells)
}

/// Rigid motion `(Y, ω)` closest to `u` over the body in the density-weighted `L²` sense.
///
/// Solves the 3x3 normal equations over the body's faces. On a body whose discrete
/// first moments vanish this is `Y = ∫ρu / ∫ρ`, `ω = ∫ρ (x−h)∧u / J`. Rigid fields are
/// reproduced exactly.
pub fn project_to_rigid(u: &VecField, b: &BodyState, rho: &ScalarField) -> Result<(Vec2, f64)> {
    let (faces, cells) = body_faces(b, &u.grid);
    if cells < 4 {
        return Err(Error::DegenerateBody { cells });
    }
    fit_rigid(u, rho, b.h, faces.into_iter()).ok_or(Error::DegenerateBody { cells })
}

/// Moves the body by one explicit step and stores the new velocities.
pub fn advance_body(b: &BodyState, y: Vec2, omega: f64, dt: f64, domain: &Grid2) -> Result<BodyState> {
    advance_body_indexed(b, y, omega, dt, domain, 0)
}

pub(crate) fn advance_body_indexed(
    b: &BodyState,
    y: Vec2,
    omega: f64,
    dt: f64,
    domain: &Grid2,
    index: usize,
) -> Result<BodyState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut out = b.clone();
    out.h = b.h + y * dt;
    out.theta = b.theta + omega * dt;
    out.y = y;
    out.omega = omega;
    check_inside(&out, domain, index)?;
    Ok(out)
}

/// Keeps at least one cell between the body's bounding ball and the walls.
pub fn check_inside(b: &BodyState, domain: &Grid2, index: usize) -> Result<()> {
    let r = b.bounding_radius();
    if domain.boundary_distance(b.h) < r + domain.h() || !b.h.is_finite() {
        return Err(Error::BodyExitsDomain { index, x: b.h.x, y: b.h.y, radius: r });
    }
    Ok(())
}

/// Every cell centre of the body lies within its bounding radius of the barycentre.
pub fn check_containment(b: &BodyState, g: &Grid2) -> bool {
    let ind = body_indicator(b, g);
    let r = b.bounding_radius();
    (0..g.ny()).all(|j| (0..g.nx()).all(|i| ind.at(i, j) == 0.0 || (g.cell_center(i, j) - b.h).norm() <= r))
}
