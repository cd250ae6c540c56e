//! Affine bodies in the plane: rest geometry, mass properties, and the
//! per-body terms of the implicit-Euler incremental potential.
//!
//! A body's configuration is the 6-vector `q = [p_x, p_y, A00, A01, A10, A11]`
//! and a rest point `x̄` maps to `x = A x̄ + p`. Vertex trajectories are
//! therefore linear in `q`, which is what makes the CCD exact.

use std::ops::Range;

use nalgebra::{Matrix2, Matrix2x6, Matrix6, SymmetricEigen, Vector2, Vector6};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Dof = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Identity configuration: no translation, `A = I`.
pub fn identity_dof() -> Dof {
    Dof::new(0.0, 0.0, 1.0, 0.0, 0.0, 1.0)
}

/// Configuration placing the rest frame at `p` rotated by `angle`.
pub fn placed_dof(p: Vec2, angle: f64) -> Dof {
    let (s, c) = angle.sin_cos();
    Dof::new(p.x, p.y, c, -s, s, c)
}

pub fn translation(q: &Dof) -> Vec2 {
    Vec2::new(q[0], q[1])
}

pub fn linear_part(q: &Dof) -> Matrix2<f64> {
    Matrix2::new(q[2], q[3], q[4], q[5])
}

/// Jacobian of `x = A x̄ + p` with respect to `q`; constant in `q`.
pub fn jacobian(rest: &Vec2) -> Matrix2x6<f64> {
    Matrix2x6::new(
        1.0, 0.0, rest.x, rest.y, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, rest.x, rest.y,
    )
}

#[inline]
pub fn world_point(q: &Dof, rest: &Vec2) -> Vec2 {
    Vec2::new(
        q[2] * rest.x + q[3] * rest.y + q[0],
        q[4] * rest.x + q[5] * rest.y + q[1],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BodyId(pub u32);

/// Exact area moments of a positively oriented polygon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub area: f64,
    /// `∫x`, `∫y`
    pub first: Vec2,
    /// `[[∫x², ∫xy], [∫xy, ∫y²]]`
    pub second: Matrix2<f64>,
}

impl Moments {
    fn zero() -> Self {
        Self {
            area: 0.0,
            first: Vec2::zeros(),
            second: Matrix2::zeros(),
        }
    }

    fn add(&mut self, other: &Moments) {
        self.area += other.area;
        self.first += other.first;
        self.second += other.second;
    }

    pub fn centroid(&self) -> Vec2 {
        self.first / self.area
    }
}

/// Green's-theorem moments of one polygon loop. Clockwise loops give a negative area.
pub fn polygon_moments(vertices: &[Vec2]) -> Moments {
    let n = vertices.len();
    let mut m = Moments::zero();
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let cross = a.x * b.y - b.x * a.y;
        m.area += cross;
        m.first.x += (a.x + b.x) * cross;
        m.first.y += (a.y + b.y) * cross;
        m.second[(0, 0)] += (a.x * a.x + a.x * b.x + b.x * b.x) * cross;
        m.second[(1, 1)] += (a.y * a.y + a.y * b.y + b.y * b.y) * cross;
        m.second[(0, 1)] += (a.x * b.y + 2.0 * a.x * a.y + 2.0 * b.x * b.y + b.x * a.y) * cross;
    }
    m.area /= 2.0;
    m.first /= 6.0;
    m.second[(0, 0)] /= 12.0;
    m.second[(1, 1)] /= 12.0;
    m.second[(0, 1)] /= 24.0;
    m.second[(1, 0)] = m.second[(0, 1)];
    m
}

fn loop_is_convex(vertices: &[Vec2]) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    (0..n).all(|i| {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let c = vertices[(i + 2) % n];
        let e0 = b - a;
        let e1 = c - b;
        e0.x * e1.y - e0.y * e1.x >= 0.0
    })
}

fn summed_moments(loops: &[Vec<Vec2>]) -> Result<Moments> {
    let mut total = Moments::zero();
    for lp in loops {
        let m = polygon_moments(lp);
        if !(m.area > 0.0) {
            return Err(Error::DegeneratePolygon { area: m.area });
        }
        total.add(&m);
    }
    if !(total.area > 0.0) {
        return Err(Error::DegeneratePolygon { area: total.area });
    }
    Ok(total)
}

/// Mass and generalized mass matrix `M = ∫ρ JᵀJ` from exact polygon moments.
pub fn build_mass_matrix(loops: &[Vec<Vec2>], density: f64) -> Result<(f64, Mat6)> {
    if !(density > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "density must be positive, got {density}"
        )));
    }
    let m = summed_moments(loops)?;
    Ok(mass_matrix_from_moments(&m, density))
}

fn mass_matrix_from_moments(m: &Moments, density: f64) -> (f64, Mat6) {
    let mass = density * m.area;
    let fx = density * m.first.x;
    let fy = density * m.first.y;
    let sxx = density * m.second[(0, 0)];
    let sxy = density * m.second[(0, 1)];
    let syy = density * m.second[(1, 1)];
    let mut mm = Mat6::zeros();
    mm[(0, 0)] = mass;
    mm[(1, 1)] = mass;
    mm[(0, 2)] = fx;
    mm[(0, 3)] = fy;
    mm[(1, 4)] = fx;
    mm[(1, 5)] = fy;
    mm[(2, 2)] = sxx;
    mm[(2, 3)] = sxy;
    mm[(3, 3)] = syy;
    mm[(4, 4)] = sxx;
    mm[(4, 5)] = sxy;
    mm[(5, 5)] = syy;
    for i in 0..6 {
        for j in 0..i {
            mm[(i, j)] = mm[(j, i)];
        }
    }
    (mass, mm)
}

/// One near-rigid body with affine kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBody {
    pub id: BodyId,
    pub rest_vertices: Vec<Vec2>,
    /// Vertex ranges of the convex loops making up the body.
    pub loops: Vec<Range<usize>>,
    pub edges: Vec<[usize; 2]>,
    pub q: Dof,
    pub q_dot: Dof,
    pub density: f64,
    pub mass: f64,
    pub mass_matrix: Mat6,
    pub rest_area: f64,
    /// Per-body override of the orthogonality stiffness.
    pub arap_stiffness: Option<f64>,
    pub is_static: bool,
}

impl AffineBody {
    /// Builds a body whose rest frame is exactly `loops`; `q` starts at identity.
    pub fn new(id: BodyId, loops: Vec<Vec<Vec2>>, density: f64, is_static: bool) -> Result<Self> {
        for (i, lp) in loops.iter().enumerate() {
            if !loop_is_convex(lp) {
                return Err(Error::NonConvexLoop { loop_index: i });
            }
        }
        let moments = summed_moments(&loops)?;
        let (mass, mass_matrix) = mass_matrix_from_moments(&moments, density);
        let mut rest_vertices = Vec::new();
        let mut ranges = Vec::new();
        let mut edges = Vec::new();
        for lp in &loops {
            let start = rest_vertices.len();
            rest_vertices.extend_from_slice(lp);
            let end = rest_vertices.len();
            for k in start..end {
                edges.push([k, if k + 1 == end { start } else { k + 1 }]);
            }
            ranges.push(start..end);
        }
        Ok(Self {
            id,
            rest_vertices,
            loops: ranges,
            edges,
            q: identity_dof(),
            q_dot: Dof::zeros(),
            density,
            mass,
            mass_matrix,
            rest_area: moments.area,
            arap_stiffness: None,
            is_static,
        })
    }

    /// Builds a body from world-space loops. The rest frame is recentred on the
    /// centroid so the mass matrix is block diagonal, and `q` places it back.
    pub fn from_world(
        id: BodyId,
        loops: Vec<Vec<Vec2>>,
        density: f64,
        is_static: bool,
    ) -> Result<Self> {
        let c = summed_moments(&loops)?.centroid();
        let centred = loops
            .iter()
            .map(|lp| lp.iter().map(|v| v - c).collect())
            .collect();
        let mut body = Self::new(id, centred, density, is_static)?;
        body.q = placed_dof(c, 0.0);
        Ok(body)
    }

    pub fn world_vertices(&self, q: &Dof) -> Vec<Vec2> {
        self.rest_vertices
            .iter()
            .map(|v| world_point(q, v))
            .collect()
    }

    pub fn loop_vertices(&self, q: &Dof) -> Vec<Vec<Vec2>> {
        self.loops
            .iter()
            .map(|r| {
                self.rest_vertices[r.clone()]
                    .iter()
                    .map(|v| world_point(q, v))
                    .collect()
            })
            .collect()
    }

    /// World-space centre of mass.
    pub fn centroid(&self, q: &Dof) -> Vec2 {
        let rest = Vec2::new(self.mass_matrix[(0, 2)], self.mass_matrix[(0, 3)]) / self.mass;
        world_point(q, &rest)
    }

    /// Diagonal of the world-space bounding box, used by the overlap-width rule.
    pub fn bbox_diagonal(&self, q: &Dof) -> f64 {
        let pts = self.world_vertices(q);
        let (mut lo, mut hi) = (pts[0], pts[0]);
        for p in &pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }

    /// Maximum vertex speed for generalized velocity `q_dot`.
    pub fn max_vertex_speed(&self, q_dot: &Dof) -> f64 {
        self.rest_vertices
            .iter()
            .map(|v| (jacobian(v) * q_dot).norm())
            .fold(0.0, f64::max)
    }

    pub fn arap_kappa(&self, default: f64) -> f64 {
        self.arap_stiffness.unwrap_or(default)
    }
}

/// Generalized force of a uniform acceleration field: `∫ρ Jᵀ g = M [g; 0]`.
pub fn gravity_force(mass_matrix: &Mat6, g: &Vec2) -> Dof {
    mass_matrix * Dof::new(g.x, g.y, 0.0, 0.0, 0.0, 0.0)
}

/// `q̃ = q + h q̇ + h² M⁻¹ f_ext`.
pub fn predicted_position(
    q: &Dof,
    q_dot: &Dof,
    f_ext: &Dof,
    h: f64,
    mass_matrix: &Mat6,
) -> Result<Dof> {
    let chol = mass_matrix.cholesky().ok_or(Error::SingularMassMatrix)?;
    Ok(q + q_dot * h + chol.solve(f_ext) * (h * h))
}

/// Value, gradient and Hessian of one per-body energy term.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyEnergy {
    pub value: f64,
    pub gradient: Dof,
    pub hessian: Mat6,
}

/// `½ (q − q̃)ᵀ M (q − q̃)`
pub fn inertia_energy(q: &Dof, q_tilde: &Dof, mass_matrix: &Mat6) -> BodyEnergy {
    let dq = q - q_tilde;
    let gradient = mass_matrix * dq;
    BodyEnergy {
        value: 0.5 * dq.dot(&gradient),
        gradient,
        hessian: *mass_matrix,
    }
}

/// Orthogonality potential `κ · area · ‖AᵀA − I‖²_F` over the linear slots.
pub fn arap_energy(q: &Dof, kappa: f64, rest_area: f64) -> BodyEnergy {
    let a = linear_part(q);
    let c = a.transpose() * a - Matrix2::identity();
    let k = kappa * rest_area;
    let value = k * c.norm_squared();
    let g = a * c * (4.0 * k);
    let mut gradient = Dof::zeros();
    gradient[2] = g[(0, 0)];
    gradient[3] = g[(0, 1)];
    gradient[4] = g[(1, 0)];
    gradient[5] = g[(1, 1)];

    let mut hessian = Mat6::zeros();
    for col in 0..4 {
        let mut e = Matrix2::zeros();
        e[(col / 2, col % 2)] = 1.0;
        let dc = e.transpose() * a + a.transpose() * e;
        let dg = (e * c + a * dc) * (4.0 * k);
        hessian[(2, col + 2)] = dg[(0, 0)];
        hessian[(3, col + 2)] = dg[(0, 1)];
        hessian[(4, col + 2)] = dg[(1, 0)];
        hessian[(5, col + 2)] = dg[(1, 1)];
    }
    BodyEnergy {
        value,
        gradient,
        hessian,
    }
}

/// Log barrier `−κ (d − d̂)² ln(d / d̂)` on `(0, d̂)`, zero beyond.
/// Returns the value and its first two derivatives in `d`.
pub fn barrier_energy(d: f64, d_hat: f64, kappa: f64) -> Result<(f64, f64, f64)> {
    if !(d > 0.0) {
        return Err(Error::BarrierDomain { d });
    }
    if d >= d_hat {
        return Ok((0.0, 0.0, 0.0));
    }
    let diff = d - d_hat;
    let ln = (d / d_hat).ln();
    let value = -kappa * diff * diff * ln;
    let d1 = -kappa * (2.0 * diff * ln + diff * diff / d);
    let d2 = -kappa * (2.0 * ln + 4.0 * diff / d - diff * diff / (d * d));
    Ok((value, d1, d2))
}

/// Clamps the eigenvalues of a symmetric matrix at zero.
pub fn project_psd(m: &Mat6) -> Mat6 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    v * Mat6::from_diagonal(&clamped) * v.transpose()
}

/// Time stepping and contact parameters shared by every worker.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub h: f64,
    pub gravity: Vec2,
    pub kappa_arap: f64,
    pub kappa_barrier: f64,
    pub d_hat: f64,
    pub theta: f64,
    pub scene_scale: f64,
    /// Inner Newton iteration cap per local solve.
    pub newton_max_iters: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            h: 0.01,
            gravity: Vec2::new(0.0, -9.81),
            kappa_arap: 1e9,
            kappa_barrier: 5e5,
            d_hat: 1e-3,
            theta: 1e-3,
            scene_scale: 1.0,
            newton_max_iters: 32,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!(
                "{what} must be positive, got {v}"
            )))
        };
        if !(self.h > 0.0) {
            return bad("h", self.h);
        }
        if !(self.d_hat > 0.0) {
            return bad("d_hat", self.d_hat);
        }
        if !(self.theta > 0.0) {
            return bad("theta", self.theta);
        }
        if !(self.scene_scale > 0.0) {
            return bad("scene_scale", self.scene_scale);
        }
        if self.kappa_arap < 0.0 || self.kappa_barrier < 0.0 {
            return Err(Error::InvalidParameter(
                "stiffness must be non-negative".into(),
            ));
        }
        if self.newton_max_iters == 0 {
            return Err(Error::InvalidParameter(
                "newton_max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Inner Newton tolerance `θ·h·l` for step size `h`.
    pub fn newton_tolerance(&self, h: f64) -> f64 {
        self.theta * h * self.scene_scale
    }
}

/// Unit square centred at the origin, counter-clockwise.
pub fn unit_square() -> Vec<Vec2> {
    vec![
        Vec2::new(-0.5, -0.5),
        Vec2::new(0.5, -0.5),
        Vec2::new(0.5, 0.5),
        Vec2::new(-0.5, 0.5),
    ]
}

/// Regular polygon with `sides` vertices on a circle of `radius`.
pub fn regular_polygon(sides: usize, radius: f64, phase: f64) -> Vec<Vec2> {
    (0..sides)
        .map(|k| {
            let t = phase + std::f64::consts::TAU * k as f64 / sides as f64;
            Vec2::new(radius * t.cos(), radius * t.sin())
        })
        .collect()
}

/// Axis-aligned rectangle with the given corners, counter-clockwise.
pub fn rectangle(lo: Vec2, hi: Vec2) -> Vec<Vec2> {
    vec![lo, Vec2::new(hi.x, lo.y), hi, Vec2::new(lo.x, hi.y)]
}
