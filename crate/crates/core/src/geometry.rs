//! Point–edge proximity, broad/narrow phase, continuous collision detection
//! and a brute-force interpenetration test for affine polygon bodies.
//!
//! Bodies are addressed by their index in the slice passed to each query.
//! Callers keep that slice sorted by [`BodyId`] so index order is id order.

use nalgebra::{Matrix2, Matrix6, Vector6};

use crate::body::{world_point, AffineBody, BodyId, Dof, Vec2};
use crate::error::{Error, Result};

/// Fraction of the first impact time returned by [`ccd_toi`].
pub const CCD_SAFETY: f64 = 0.9;

/// Slack on the segment parameter when confirming a collinearity root.
const SEGMENT_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vec2,
    pub hi: Vec2,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            lo: Vec2::repeat(f64::INFINITY),
            hi: Vec2::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vec2>) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec2) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    pub fn merge(&self, o: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.inf(&o.lo),
            hi: self.hi.sup(&o.hi),
        }
    }

    pub fn inflate(&self, r: f64) -> Aabb {
        Aabb {
            lo: self.lo.add_scalar(-r),
            hi: self.hi.add_scalar(r),
        }
    }

    /// Closed overlap test.
    pub fn overlaps(&self, o: &Aabb) -> bool {
        self.lo.x <= o.hi.x && o.lo.x <= self.hi.x && self.lo.y <= o.hi.y && o.lo.y <= self.hi.y
    }

    pub fn width(&self) -> f64 {
        self.hi.x - self.lo.x
    }

    pub fn diagonal(&self) -> f64 {
        (self.hi - self.lo).norm()
    }
}

/// Distance from `p` to segment `[e0, e1]` with derivatives in the stacked
/// coordinates `(p, e0, e1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEdgeDistance {
    pub d: f64,
    pub gradient: Vector6<f64>,
    pub hessian: Matrix6<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    E0,
    E1,
    Interior,
}

fn region(p: &Vec2, e0: &Vec2, e1: &Vec2) -> Region {
    let e = e1 - e0;
    let t = (p - e0).dot(&e) / e.norm_squared();
    if t <= 0.0 {
        Region::E0
    } else if t >= 1.0 {
        Region::E1
    } else {
        Region::Interior
    }
}

#[inline]
fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Unsigned point–segment distance.
pub fn point_edge_distance_value(p: &Vec2, e0: &Vec2, e1: &Vec2) -> f64 {
    match region(p, e0, e1) {
        Region::E0 => (p - e0).norm(),
        Region::E1 => (p - e1).norm(),
        Region::Interior => {
            let e = e1 - e0;
            cross(&e, &(p - e0)).abs() / e.norm()
        }
    }
}

/// Point–segment distance with gradient and Hessian of the active region.
pub fn point_edge_distance(p: &Vec2, e0: &Vec2, e1: &Vec2) -> PointEdgeDistance {
    let mut gradient = Vector6::zeros();
    let mut hessian = Matrix6::zeros();
    match region(p, e0, e1) {
        r @ (Region::E0 | Region::E1) => {
            let (e, slot) = if r == Region::E0 { (e0, 2) } else { (e1, 4) };
            let diff = p - e;
            let d = diff.norm();
            let n = diff / d;
            let h = (Matrix2::identity() - n * n.transpose()) / d;
            gradient.fixed_rows_mut::<2>(0).copy_from(&n);
            gradient.fixed_rows_mut::<2>(slot).copy_from(&-n);
            hessian.fixed_view_mut::<2, 2>(0, 0).copy_from(&h);
            hessian.fixed_view_mut::<2, 2>(slot, slot).copy_from(&h);
            hessian.fixed_view_mut::<2, 2>(0, slot).copy_from(&-h);
            hessian.fixed_view_mut::<2, 2>(slot, 0).copy_from(&-h);
            PointEdgeDistance {
                d,
                gradient,
                hessian,
            }
        }
        Region::Interior => {
            let e = e1 - e0;
            let c = cross(&e, &(p - e0));
            let sigma = c.signum();
            let s = e.norm_squared();
            let g = s.powf(-0.5);

            let grad_c = Vector6::new(
                e0.y - e1.y,
                e1.x - e0.x,
                e1.y - p.y,
                p.x - e1.x,
                p.y - e0.y,
                e0.x - p.x,
            );
            let skew = Matrix2::new(0.0, 1.0, -1.0, 0.0);
            let mut hess_c = Matrix6::zeros();
            // Bilinear blocks of the three cross products (e1,p), (e0,e1), (p,e0).
            for (a, b) in [(4, 0), (2, 4), (0, 2)] {
                hess_c.fixed_view_mut::<2, 2>(a, b).copy_from(&skew);
                hess_c
                    .fixed_view_mut::<2, 2>(b, a)
                    .copy_from(&skew.transpose());
            }

            let mut grad_s = Vector6::zeros();
            grad_s.fixed_rows_mut::<2>(2).copy_from(&(-2.0 * e));
            grad_s.fixed_rows_mut::<2>(4).copy_from(&(2.0 * e));
            let mut hess_s = Matrix6::zeros();
            let i2 = Matrix2::identity() * 2.0;
            hess_s.fixed_view_mut::<2, 2>(2, 2).copy_from(&i2);
            hess_s.fixed_view_mut::<2, 2>(4, 4).copy_from(&i2);
            hess_s.fixed_view_mut::<2, 2>(2, 4).copy_from(&-i2);
            hess_s.fixed_view_mut::<2, 2>(4, 2).copy_from(&-i2);

            let grad_g = grad_s * (-0.5 * s.powf(-1.5));
            let hess_g =
                grad_s * grad_s.transpose() * (0.75 * s.powf(-2.5)) - hess_s * (0.5 * s.powf(-1.5));

            gradient = (grad_c * g + grad_g * c) * sigma;
            hessian = (hess_c * g
                + grad_c * grad_g.transpose()
                + grad_g * grad_c.transpose()
                + hess_g * c)
                * sigma;
            PointEdgeDistance {
                d: c.abs() * g,
                gradient,
                hessian,
            }
        }
    }
}

/// A point of body `a` against an edge of body `b` (indices into the body slice).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Candidate {
    pub a: usize,
    pub b: usize,
    pub point: usize,
    pub edge: usize,
}

/// A retained point–edge contact.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPair {
    pub body_a: BodyId,
    pub body_b: BodyId,
    pub a: usize,
    pub b: usize,
    pub point_index: usize,
    pub edge_index: usize,
    pub d: f64,
    /// Number of workers that see this contact.
    pub kappa_c: f64,
}

impl ContactPair {
    pub fn candidate(&self) -> Candidate {
        Candidate {
            a: self.a,
            b: self.b,
            point: self.point_index,
            edge: self.edge_index,
        }
    }
}

/// World vertices of every body, indexed like the body slice.
pub fn world_vertices(bodies: &[AffineBody], configs: &[Dof]) -> Vec<Vec<Vec2>> {
    bodies
        .iter()
        .zip(configs)
        .map(|(b, q)| b.world_vertices(q))
        .collect()
}

fn edge_aabb(verts: &[Vec2], edge: [usize; 2]) -> Aabb {
    Aabb::from_points([&verts[edge[0]], &verts[edge[1]]])
}

fn collect_pairs(
    bodies: &[AffineBody],
    point_boxes: &[Vec<Aabb>],
    edge_boxes: &[Vec<Aabb>],
    body_boxes: &[Aabb],
    inflation: f64,
) -> Vec<Candidate> {
    let n = bodies.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        body_boxes[i]
            .lo
            .x
            .total_cmp(&body_boxes[j].lo.x)
            .then(i.cmp(&j))
    });

    let mut out = Vec::new();
    let push_dir = |pa: usize, eb: usize, out: &mut Vec<Candidate>| {
        let eb_box = body_boxes[eb].inflate(inflation);
        for (vi, vbox) in point_boxes[pa].iter().enumerate() {
            let vb = vbox.inflate(inflation);
            if !vb.overlaps(&eb_box) {
                continue;
            }
            for (ei, ebox) in edge_boxes[eb].iter().enumerate() {
                if vb.overlaps(ebox) {
                    out.push(Candidate {
                        a: pa,
                        b: eb,
                        point: vi,
                        edge: ei,
                    });
                }
            }
        }
    };
    for (k, &i) in order.iter().enumerate() {
        let bi = body_boxes[i].inflate(inflation);
        for &j in &order[k + 1..] {
            let bj = body_boxes[j].inflate(inflation);
            if bj.lo.x > bi.hi.x {
                break;
            }
            if !bi.overlaps(&bj) || (bodies[i].is_static && bodies[j].is_static) {
                continue;
            }
            push_dir(i, j, &mut out);
            push_dir(j, i, &mut out);
        }
    }
    out.sort_unstable();
    out
}

/// Point–edge candidates whose `inflation`-grown AABBs overlap at `configs`.
/// Pairs between two static bodies are never reported.
pub fn broad_phase(bodies: &[AffineBody], configs: &[Dof], inflation: f64) -> Vec<Candidate> {
    let verts = world_vertices(bodies, configs);
    let point_boxes: Vec<Vec<Aabb>> = verts
        .iter()
        .map(|vs| vs.iter().map(|v| Aabb { lo: *v, hi: *v }).collect())
        .collect();
    let edge_boxes: Vec<Vec<Aabb>> = bodies
        .iter()
        .zip(&verts)
        .map(|(b, vs)| b.edges.iter().map(|&e| edge_aabb(vs, e)).collect())
        .collect();
    let body_boxes: Vec<Aabb> = verts.iter().map(|vs| Aabb::from_points(vs)).collect();
    collect_pairs(bodies, &point_boxes, &edge_boxes, &body_boxes, inflation)
}

/// Like [`broad_phase`] but over the boxes swept from `start` to `end`.
pub fn broad_phase_swept(
    bodies: &[AffineBody],
    start: &[Dof],
    end: &[Dof],
    inflation: f64,
) -> Vec<Candidate> {
    let v0 = world_vertices(bodies, start);
    let v1 = world_vertices(bodies, end);
    let point_boxes: Vec<Vec<Aabb>> = v0
        .iter()
        .zip(&v1)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(p, q)| Aabb::from_points([p, q]))
                .collect()
        })
        .collect();
    let edge_boxes: Vec<Vec<Aabb>> = bodies
        .iter()
        .enumerate()
        .map(|(i, b)| {
            b.edges
                .iter()
                .map(|&e| edge_aabb(&v0[i], e).merge(&edge_aabb(&v1[i], e)))
                .collect()
        })
        .collect();
    let body_boxes: Vec<Aabb> = v0
        .iter()
        .zip(&v1)
        .map(|(a, b)| Aabb::from_points(a).merge(&Aabb::from_points(b)))
        .collect();
    collect_pairs(bodies, &point_boxes, &edge_boxes, &body_boxes, inflation)
}

/// Keeps the candidates whose exact distance is below `d_hat`.
pub fn narrow_phase(
    candidates: &[Candidate],
    bodies: &[AffineBody],
    configs: &[Dof],
    d_hat: f64,
) -> Vec<ContactPair> {
    candidates
        .iter()
        .filter_map(|c| {
            let d = candidate_distance(c, bodies, configs);
            (d < d_hat).then(|| ContactPair {
                body_a: bodies[c.a].id,
                body_b: bodies[c.b].id,
                a: c.a,
                b: c.b,
                point_index: c.point,
                edge_index: c.edge,
                d,
                kappa_c: 1.0,
            })
        })
        .collect()
}

/// World positions `(p, e0, e1)` of a candidate.
pub fn candidate_points(c: &Candidate, bodies: &[AffineBody], configs: &[Dof]) -> [Vec2; 3] {
    let ba = &bodies[c.a];
    let bb = &bodies[c.b];
    let [i0, i1] = bb.edges[c.edge];
    [
        world_point(&configs[c.a], &ba.rest_vertices[c.point]),
        world_point(&configs[c.b], &bb.rest_vertices[i0]),
        world_point(&configs[c.b], &bb.rest_vertices[i1]),
    ]
}

pub fn candidate_distance(c: &Candidate, bodies: &[AffineBody], configs: &[Dof]) -> f64 {
    let [p, e0, e1] = candidate_points(c, bodies, configs);
    point_edge_distance_value(&p, &e0, &e1)
}

/// Roots of `a t² + b t + c` in `[0, 1]`, ascending, bracketed from the left.
/// Each returned value is a point at or before a sign change (or exact zero),
/// so the true root is never undershot by more than bisection precision.
fn quadratic_roots_unit(a: f64, b: f64, c: f64) -> Vec<f64> {
    let f = |t: f64| (a * t + b) * t + c;
    let mut knots = vec![0.0];
    if a != 0.0 {
        let tc = -b / (2.0 * a);
        if tc > 0.0 && tc < 1.0 {
            knots.push(tc);
        }
    }
    knots.push(1.0);
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (flo, fhi) = (f(lo), f(hi));
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if fhi == 0.0 {
            roots.push(hi);
            continue;
        }
        if flo.signum() == fhi.signum() {
            continue;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let fm = f(mid);
            if fm == 0.0 {
                lo = mid;
                break;
            }
            if fm.signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        roots.push(lo);
    }
    roots.dedup();
    roots
}

/// Earliest `t ∈ [0, 1]` at which the moving point touches the moving segment.
fn point_edge_impact(p: [Vec2; 2], e0: [Vec2; 2], e1: [Vec2; 2]) -> Option<f64> {
    let ev0 = e1[0] - e0[0];
    let de = (e1[1] - e0[1]) - ev0;
    let r0 = p[0] - e0[0];
    let dr = (p[1] - e0[1]) - r0;

    let a = cross(&de, &dr);
    let b = cross(&ev0, &dr) + cross(&de, &r0);
    let c = cross(&ev0, &r0);

    let at = |t: f64| (ev0 + de * t, r0 + dr * t);
    let scale = (ev0.norm() + de.norm()) * (r0.norm() + dr.norm());
    let collinear_always =
        a.abs() <= 1e-13 * scale && b.abs() <= 1e-13 * scale && c.abs() <= 1e-13 * scale;

    if !collinear_always {
        for t in quadratic_roots_unit(a, b, c) {
            let (e, r) = at(t);
            let ee = e.norm_squared();
            if ee == 0.0 {
                if r.norm() <= SEGMENT_SLACK * scale.sqrt() {
                    return Some(t);
                }
                continue;
            }
            let s = r.dot(&e) / ee;
            if (-SEGMENT_SLACK..=1.0 + SEGMENT_SLACK).contains(&s) {
                return Some(t);
            }
        }
        return None;
    }

    // Motion stays on the supporting line: impact when the point reaches an endpoint.
    let mut best: Option<f64> = None;
    for (rr0, rdr) in [(r0, dr), (r0 - ev0, dr - de)] {
        let qa = rdr.dot(&de);
        let qb = rdr.dot(&ev0) + rr0.dot(&de);
        let qc = rr0.dot(&ev0);
        for t in quadratic_roots_unit(qa, qb, qc) {
            let rt = rr0 + rdr * t;
            if rt.norm() <= SEGMENT_SLACK * scale.sqrt().max(1e-12) {
                best = Some(best.map_or(t, |x: f64| x.min(t)));
                break;
            }
        }
    }
    best
}

/// Conservative time of impact along the linear DoF path `start → end`.
/// Returns `1.0` when no candidate pair collides, otherwise
/// `CCD_SAFETY × first impact`.
pub fn ccd_toi(
    bodies: &[AffineBody],
    start: &[Dof],
    end: &[Dof],
    candidates: &[Candidate],
) -> Result<f64> {
    let mut first = f64::INFINITY;
    for c in candidates {
        let [p0, a0, b0] = candidate_points(c, bodies, start);
        let d0 = point_edge_distance_value(&p0, &a0, &b0);
        if !(d0 > 0.0) {
            return Err(Error::StartIntersecting {
                body_a: bodies[c.a].id,
                body_b: bodies[c.b].id,
                d: d0,
            });
        }
        let [p1, a1, b1] = candidate_points(c, bodies, end);
        if let Some(t) = point_edge_impact([p0, p1], [a0, a1], [b0, b1]) {
            first = first.min(t);
        }
    }
    if first.is_finite() {
        Ok((CCD_SAFETY * first).clamp(0.0, 1.0))
    } else {
        Ok(1.0)
    }
}

/// Strict overlap of two convex loops by separating axes; touching loops do not overlap.
pub fn convex_loops_overlap(p: &[Vec2], q: &[Vec2]) -> bool {
    for poly in [p, q] {
        let n = poly.len();
        for i in 0..n {
            let e = poly[(i + 1) % n] - poly[i];
            let axis = Vec2::new(-e.y, e.x);
            if axis.norm_squared() == 0.0 {
                continue;
            }
            let proj = |pts: &[Vec2]| {
                pts.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        let s = axis.dot(v);
                        (lo.min(s), hi.max(s))
                    })
            };
            let (plo, phi) = proj(p);
            let (qlo, qhi) = proj(q);
            if phi <= qlo || qhi <= plo {
                return false;
            }
        }
    }
    true
}

/// Whether any two bodies (not both static) have intersecting interiors.
pub fn intersection_test(bodies: &[AffineBody], configs: &[Dof]) -> bool {
    let loops: Vec<Vec<Vec<Vec2>>> = bodies
        .iter()
        .zip(configs)
        .map(|(b, q)| b.loop_vertices(q))
        .collect();
    let boxes: Vec<Aabb> = loops
        .iter()
        .map(|ls| {
            ls.iter().flatten().fold(Aabb::empty(), |mut a, v| {
                a.grow(v);
                a
            })
        })
        .collect();
    for i in 0..bodies.len() {
        for j in i + 1..bodies.len() {
            if (bodies[i].is_static && bodies[j].is_static) || !boxes[i].overlaps(&boxes[j]) {
                continue;
            }
            for li in &loops[i] {
                for lj in &loops[j] {
                    if convex_loops_overlap(li, lj) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Smallest point–edge distance between distinct bodies (not both static).
pub fn min_separation(bodies: &[AffineBody], configs: &[Dof]) -> f64 {
    broad_phase(bodies, configs, f64::INFINITY)
        .iter()
        .map(|c| candidate_distance(c, bodies, configs))
        .fold(f64::INFINITY, f64::min)
}
