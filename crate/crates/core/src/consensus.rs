//! Consensus ADMM bookkeeping above the local solve: slab partitioning with
//! overlap, replica counts, the z/u updates, residuals, stopping, penalty
//! policy, the CCD merge gate and adaptive time stepping.

use crate::body::{AffineBody, BodyId, Dof, Vec2};
use crate::error::{Error, Result};
use crate::geometry::{broad_phase_swept, ccd_toi, Aabb};

/// Overlap-width factor on `v_max·h`.
pub const OVERLAP_ALPHA: f64 = 2.0;

/// Tolerance on replica agreement of `q̃` at frame start.
pub const WARM_START_TOL: f64 = 1e-10;

/// Boundary line between worker `i` and worker `i + 1`; `normal` points from `i` to `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub point: Vec2,
    pub normal: Vec2,
}

impl Plane {
    pub fn vertical(x: f64) -> Self {
        Self {
            point: Vec2::new(x, 0.0),
            normal: Vec2::new(1.0, 0.0),
        }
    }

    pub fn signed_distance(&self, x: &Vec2) -> f64 {
        (x - self.point).dot(&self.normal)
    }

    /// Interval of signed distances covered by a box.
    pub fn project(&self, b: &Aabb) -> (f64, f64) {
        let corners = [
            b.lo,
            Vec2::new(b.hi.x, b.lo.y),
            b.hi,
            Vec2::new(b.lo.x, b.hi.y),
        ];
        corners
            .iter()
            .map(|c| self.signed_distance(c))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s), hi.max(s))
            })
    }
}

/// Assignment of bodies to workers for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionLayout {
    pub n_workers: usize,
    pub planes: Vec<Plane>,
    /// Overlap width, shared by every interface.
    pub w: f64,
    /// Holder mask per body, indexed like the scene's body list.
    pub holders: Vec<u64>,
    pub body_ids: Vec<BodyId>,
    pub is_static: Vec<bool>,
}

pub fn all_workers_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

impl PartitionLayout {
    /// Layout where one worker holds everything.
    pub fn single(bodies: &[AffineBody]) -> Self {
        Self {
            n_workers: 1,
            planes: Vec::new(),
            w: 0.0,
            holders: vec![1; bodies.len()],
            body_ids: bodies.iter().map(|b| b.id).collect(),
            is_static: bodies.iter().map(|b| b.is_static).collect(),
        }
    }

    pub fn kappa_b(&self, body: usize) -> u32 {
        self.holders[body].count_ones()
    }

    pub fn holds(&self, worker: usize, body: usize) -> bool {
        self.holders[body] & (1 << worker) != 0
    }

    /// Body indices held by `worker`, ascending.
    pub fn held_by(&self, worker: usize) -> Vec<usize> {
        (0..self.holders.len())
            .filter(|&b| self.holds(worker, b))
            .collect()
    }

    /// Dynamic bodies held by `worker` and at least one other worker.
    pub fn shared(&self, worker: usize) -> Vec<usize> {
        self.held_by(worker)
            .into_iter()
            .filter(|&b| !self.is_static[b] && self.kappa_b(b) > 1)
            .collect()
    }

    /// Dynamic bodies held by exactly `worker`.
    pub fn internal(&self, worker: usize) -> Vec<usize> {
        self.held_by(worker)
            .into_iter()
            .filter(|&b| !self.is_static[b] && self.kappa_b(b) == 1)
            .collect()
    }

    /// Dynamic bodies held by both `i` and `j`.
    pub fn shared_between(&self, i: usize, j: usize) -> Vec<usize> {
        let m = (1u64 << i) | (1u64 << j);
        (0..self.holders.len())
            .filter(|&b| !self.is_static[b] && self.holders[b] & m == m)
            .collect()
    }

    /// Workers sharing at least one dynamic body with `worker`.
    pub fn neighbors(&self, worker: usize) -> Vec<usize> {
        (0..self.n_workers)
            .filter(|&j| j != worker && !self.shared_between(worker, j).is_empty())
            .collect()
    }
}

fn inflated_box(body: &AffineBody, d_hat: f64) -> Aabb {
    Aabb::from_points(&body.world_vertices(&body.q)).inflate(d_hat)
}

/// Overlap width `max(α·v_max·h, w_min)`; `w_min` defaults to the smallest
/// dynamic-body bounding-box diagonal.
pub fn overlap_width(bodies: &[AffineBody], h: f64, w_min: Option<f64>) -> f64 {
    let dynamic = bodies.iter().filter(|b| !b.is_static);
    let v_max = dynamic
        .clone()
        .map(|b| b.max_vertex_speed(&b.q_dot))
        .fold(0.0, f64::max);
    let w_min = w_min.unwrap_or_else(|| {
        let m = dynamic
            .map(|b| b.bbox_diagonal(&b.q))
            .fold(f64::INFINITY, f64::min);
        if m.is_finite() {
            m
        } else {
            0.0
        }
    });
    (OVERLAP_ALPHA * v_max * h).max(w_min)
}

/// Splits the scene into `planes.len() + 1` slabs. A dynamic body is shared
/// across an interface when its `d_hat`-inflated box meets the slab of
/// half-width `w/2` around that plane; otherwise it belongs to the slab
/// containing its centroid. Static bodies are held by every worker.
pub fn partition_scene(
    bodies: &[AffineBody],
    planes: &[Plane],
    h: f64,
    w_min: Option<f64>,
    d_hat: f64,
) -> Result<PartitionLayout> {
    let n_workers = planes.len() + 1;
    if n_workers > 64 {
        return Err(Error::Partition(format!(
            "at most 64 workers supported, got {n_workers}"
        )));
    }
    for p in planes {
        if (p.normal.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::Partition("plane normals must be unit length".into()));
        }
    }
    for w in planes.windows(2) {
        if (w[0].normal - w[1].normal).norm() > 1e-12 || w[1].signed_distance(&w[0].point) >= 0.0 {
            return Err(Error::Partition(
                "planes must be parallel and strictly ordered".into(),
            ));
        }
    }
    let w = overlap_width(bodies, h, w_min);
    let boxes: Vec<Aabb> = bodies.iter().map(|b| inflated_box(b, d_hat)).collect();

    if planes.len() >= 2 {
        let widest = bodies
            .iter()
            .zip(&boxes)
            .filter(|(b, _)| !b.is_static)
            .map(|(_, bx)| {
                let (lo, hi) = planes[0].project(bx);
                hi - lo
            })
            .fold(0.0, f64::max);
        for (k, pair) in planes.windows(2).enumerate() {
            let width = pair[0].signed_distance(&pair[1].point);
            if width < widest + w {
                return Err(Error::Partition(format!(
                    "region {} is {width:.4} wide, narrower than body extent {widest:.4} plus overlap {w:.4}",
                    k + 1
                )));
            }
        }
    }

    let all = all_workers_mask(n_workers);
    let holders = bodies
        .iter()
        .zip(&boxes)
        .map(|(b, bx)| {
            if b.is_static {
                return all;
            }
            let c = b.centroid(&b.q);
            let centroid_region = planes
                .iter()
                .filter(|p| p.signed_distance(&c) > 0.0)
                .count();
            let mut mask = 1u64 << centroid_region;
            for (j, p) in planes.iter().enumerate() {
                let (lo, hi) = p.project(bx);
                if lo <= 0.5 * w && hi >= -0.5 * w {
                    mask |= 0b11 << j;
                }
            }
            mask
        })
        .collect();
    Ok(PartitionLayout {
        n_workers,
        planes: planes.to_vec(),
        w,
        holders,
        body_ids: bodies.iter().map(|b| b.id).collect(),
        is_static: bodies.iter().map(|b| b.is_static).collect(),
    })
}

/// Number of workers holding both bodies of a contact.
pub fn contact_replication(holders_a: u64, holders_b: u64, a: BodyId, b: BodyId) -> Result<u32> {
    match (holders_a & holders_b).count_ones() {
        0 => Err(Error::UnseenContact {
            body_a: a,
            body_b: b,
        }),
        k => Ok(k),
    }
}

/// Penalty-weighted mean of `q + u` over the replicas, summed in the given order.
pub fn consensus_update(replicas: &[(Dof, f64)]) -> Dof {
    let mut num = Dof::zeros();
    let mut den = 0.0;
    for (v, rho) in replicas {
        num += v * *rho;
        den += rho;
    }
    num / den
}

/// `u + q − z`
pub fn dual_update(u: &Dof, q: &Dof, z: &Dof) -> Dof {
    u + q - z
}

/// Keeps `ρu` fixed when the penalty changes from `rho_old` to `rho_new`.
pub fn rescale_dual(u: &Dof, rho_old: f64, rho_new: f64) -> Dof {
    u * (rho_old / rho_new)
}

/// Replica states and consensus iterates of one shared body.
#[derive(Debug, Clone)]
pub struct ResidualInput<'a> {
    pub replicas: &'a [Dof],
    pub z_new: Dof,
    pub z_old: Dof,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Residuals {
    pub r_inf: f64,
    pub s_inf: f64,
}

impl Residuals {
    pub fn combine(&self, o: &Residuals) -> Residuals {
        Residuals {
            r_inf: self.r_inf.max(o.r_inf),
            s_inf: self.s_inf.max(o.s_inf),
        }
    }
}

/// Per-body `‖r_b‖∞` (worst replica) and `‖s_b‖∞`.
pub fn body_residuals(input: &ResidualInput<'_>) -> Residuals {
    let r_inf = input
        .replicas
        .iter()
        .map(|q| (q - input.z_new).amax())
        .fold(0.0, f64::max);
    Residuals {
        r_inf,
        s_inf: (input.z_new - input.z_old).amax(),
    }
}

/// Global maxima over all shared bodies.
pub fn compute_residuals(inputs: &[ResidualInput<'_>]) -> Residuals {
    inputs
        .iter()
        .map(body_residuals)
        .fold(Residuals::default(), |a, b| a.combine(&b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlDecision {
    Continue,
    End,
}

/// `x / (h·l)`, the scale-free form of a displacement.
pub fn normalized(x: f64, h: f64, l: f64) -> f64 {
    x / (h * l)
}

/// Ends the frame once every normalized metric is strictly below `θ` and
/// every worker's merge gate reported TOI = 1.
pub fn check_stopping(
    dq_inf: &[f64],
    r_inf: f64,
    s_inf: f64,
    tois: &[f64],
    h: f64,
    l: f64,
    theta: f64,
) -> ControlDecision {
    let below = |x: f64| normalized(x, h, l) < theta;
    let dq_ok = dq_inf.iter().all(|&d| below(d));
    if dq_ok && below(r_inf) && below(s_inf) && tois.iter().all(|&t| t == 1.0) {
        ControlDecision::End
    } else {
        ControlDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptParams {
    pub beta: f64,
    pub tau: f64,
    pub mu: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Residual-driven adaptation on or off.
    pub adaptive: bool,
}

impl Default for AdaptParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            tau: 2.0,
            mu: 5.0,
            sigma_min: 0.001,
            sigma_max: 1000.0,
            adaptive: true,
        }
    }
}

impl AdaptParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.tau > 1.0 && self.mu > 1.0) {
            return Err(Error::InvalidParameter("tau and mu must exceed 1".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0 && self.sigma_max > 1.0) {
            return Err(Error::InvalidParameter(
                "need 0 < sigma_min < 1 < sigma_max".into(),
            ));
        }
        Ok(())
    }
}

/// Mass-aware initial penalty `β·m_b`.
pub fn init_rho(mass: f64, beta: f64) -> Result<f64> {
    if !(mass > 0.0 && beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "init_rho needs positive mass and beta, got {mass}, {beta}"
        )));
    }
    Ok(beta * mass)
}

/// Residual-balancing update of one body's penalty, clamped around `rho0`.
pub fn adapt_rho(rho: f64, r: f64, s: f64, p: &AdaptParams, rho0: f64) -> f64 {
    let next = if r > p.mu * s {
        rho * p.tau
    } else if s > p.mu * r {
        rho / p.tau
    } else {
        rho
    };
    next.clamp(p.sigma_min * rho0, p.sigma_max * rho0)
}

/// Replaces every shared block with its consensus target.
pub fn merge_target(q: &[Dof], targets: &[Option<Dof>]) -> Vec<Dof> {
    q.iter()
        .zip(targets)
        .map(|(qi, t)| t.unwrap_or(*qi))
        .collect()
}

/// TOI of moving the worker's state onto the consensus targets. The gate
/// passes iff the result is exactly 1.
pub fn merge_ccd_gate(bodies: &[AffineBody], q: &[Dof], targets: &[Option<Dof>]) -> Result<f64> {
    let q_hat = merge_target(q, targets);
    if q_hat == q {
        return Ok(1.0);
    }
    let cands = broad_phase_swept(bodies, q, &q_hat, 0.0);
    ccd_toi(bodies, q, &q_hat, &cands)
}

/// Commits the consensus targets and returns `(q_final, q_dot)` with the
/// backward-difference velocity `(q_final − q_start)/h`.
pub fn finalize_merge(
    q: &[Dof],
    targets: &[Option<Dof>],
    q_start: &[Dof],
    h: f64,
    gate_toi: f64,
) -> Result<(Vec<Dof>, Vec<Dof>)> {
    if gate_toi != 1.0 {
        return Err(Error::GateNotPassed { toi: gate_toi });
    }
    let q_final = merge_target(q, targets);
    let q_dot = q_final
        .iter()
        .zip(q_start)
        .map(|(a, b)| (a - b) / h)
        .collect();
    Ok((q_final, q_dot))
}

/// Halving/doubling step-size policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepController {
    pub h0: f64,
    pub h: f64,
    /// Current number of halvings below `h0`.
    pub level: u32,
    pub max_halvings: u32,
}

impl TimestepController {
    pub fn new(h0: f64) -> Self {
        Self {
            h0,
            h: h0,
            level: 0,
            max_halvings: 4,
        }
    }

    /// Halves `h` after a failed frame.
    pub fn on_failure(&mut self) -> Result<f64> {
        if self.level >= self.max_halvings {
            return Err(Error::TimestepExhausted {
                halvings: self.level,
            });
        }
        self.level += 1;
        self.h = self.h0 / f64::from(1u32 << self.level);
        Ok(self.h)
    }

    /// Doubles `h` back toward `h0` after a committed frame.
    pub fn on_success(&mut self) -> f64 {
        if self.level > 0 {
            self.level -= 1;
            self.h = self.h0 / f64::from(1u32 << self.level);
        }
        self.h
    }
}

/// Frame-start consensus state of a shared body: `z¹ = q̃`, `u¹ = 0`.
/// All replicas must agree on `q̃`.
pub fn warm_start(id: BodyId, replica_q_tilde: &[Dof]) -> Result<(Dof, Dof)> {
    let first = replica_q_tilde.first().ok_or(Error::MissingAnchor(id))?;
    for q in &replica_q_tilde[1..] {
        let diff = (q - first).amax();
        if diff > WARM_START_TOL {
            return Err(Error::ReplicaMismatch { id, diff });
        }
    }
    Ok((*first, Dof::zeros()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{placed_dof, unit_square};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sq(id: u32, x: f64, y: f64) -> AffineBody {
        let mut b = AffineBody::new(BodyId(id), vec![unit_square()], 1.0, false).unwrap();
        b.q = placed_dof(Vec2::new(x, y), 0.0);
        b
    }

    #[test]
    fn body_on_plane_is_shared() {
        let bodies = vec![sq(0, 0.0, 0.0), sq(1, -5.0, 0.0), sq(2, 5.0, 0.0)];
        let l = partition_scene(&bodies, &[Plane::vertical(0.0)], 0.01, None, 1e-3).unwrap();
        assert_eq!(l.kappa_b(0), 2);
        assert_eq!(l.holders[1], 0b01);
        assert_eq!(l.holders[2], 0b10);
        assert_eq!(l.shared(0), vec![0]);
        assert_eq!(l.internal(1), vec![2]);
        assert_eq!(l.neighbors(0), vec![1]);
    }

    #[test]
    fn resting_scene_uses_minimum_width() {
        let bodies = vec![sq(0, 0.0, 0.0), sq(1, 3.0, 0.0)];
        let l = partition_scene(&bodies, &[Plane::vertical(1.5)], 0.01, None, 1e-3).unwrap();
        assert_relative_eq!(l.w, 2f64.sqrt(), epsilon = 1e-12);
        let mut fast = bodies.clone();
        fast[0].q_dot = Dof::new(200.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let l = partition_scene(&fast, &[Plane::vertical(1.5)], 0.01, None, 1e-3).unwrap();
        assert_relative_eq!(l.w, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn too_narrow_region_rejected() {
        let bodies = vec![sq(0, 0.0, 0.0)];
        let planes = [Plane::vertical(-0.5), Plane::vertical(0.5)];
        assert!(matches!(
            partition_scene(&bodies, &planes, 0.01, None, 1e-3),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn replication_counts() {
        let (a, b) = (BodyId(0), BodyId(1));
        assert_eq!(contact_replication(0b01, 0b01, a, b).unwrap(), 1);
        assert_eq!(contact_replication(0b11, 0b11, a, b).unwrap(), 2);
        assert_eq!(contact_replication(0b01, 0b11, a, b).unwrap(), 1);
        assert!(matches!(
            contact_replication(0b01, 0b10, a, b),
            Err(Error::UnseenContact { .. })
        ));
    }

    #[test]
    fn consensus_examples() {
        let a = Dof::repeat(1.0);
        let b = Dof::repeat(3.0);
        assert_eq!(consensus_update(&[(a, 2.0), (b, 2.0)]), Dof::repeat(2.0));
        assert_eq!(
            consensus_update(&[(Dof::zeros(), 1.0), (Dof::repeat(4.0), 3.0)]),
            Dof::repeat(3.0)
        );
        assert_eq!(consensus_update(&[(a, 7.0)]), a);
    }

    /// Golden-section search on `[lo, hi]` driven by a comparator
    /// `before(a, b)` = "f(a) < f(b)".
    fn golden_section(before: impl Fn(f64, f64) -> bool, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        for _ in 0..200 {
            if before(x1, x2) {
                hi = x2;
                x2 = x1;
                x1 = hi - g * (hi - lo);
            } else {
                lo = x1;
                x1 = x2;
                x2 = lo + g * (hi - lo);
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn consensus_matches_golden_section() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.gen_range(1..5);
            let reps: Vec<(Dof, f64)> = (0..n)
                .map(|_| {
                    (
                        Dof::from_fn(|_, _| rng.gen_range(-2.0..2.0)),
                        rng.gen_range(0.1..10.0),
                    )
                })
                .collect();
            let z = consensus_update(&reps);
            let grad: Dof = reps.iter().map(|(v, r)| (z - v) * *r).sum();
            assert!(grad.amax() < 1e-12);
            for k in 0..6 {
                // f(a) − f(b) = ½(a − b) Σ ρ (a + b − 2v), free of cancellation near the minimum.
                let before = |a: f64, b: f64| {
                    let s: f64 = reps.iter().map(|(v, r)| r * (a + b - 2.0 * v[k])).sum();
                    (a - b) * s < 0.0
                };
                let x = golden_section(before, -3.0, 3.0);
                assert!((x - z[k]).abs() < 1e-9, "{x} vs {}", z[k]);
            }
        }
    }

    #[test]
    fn dual_examples() {
        let z = Dof::repeat(1.0);
        assert_eq!(dual_update(&Dof::zeros(), &z, &z), Dof::zeros());
        let d = Dof::new(0.1, 0.2, 0.0, 0.0, 0.0, -0.3);
        assert_relative_eq!(dual_update(&Dof::zeros(), &(z + d), &z), d, epsilon = 1e-15);
        let mut u = Dof::repeat(0.5);
        for _ in 0..7 {
            u = dual_update(&u, &(z + d), &z);
        }
        assert_relative_eq!(u, Dof::repeat(0.5) + d * 7.0, epsilon = 1e-14);
    }

    #[test]
    fn dual_bookkeeping_identity() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let q: Vec<Dof> = (0..3).map(|_| Dof::from_fn(|_, _| rng.gen())).collect();
        let u: Vec<Dof> = (0..3).map(|_| Dof::from_fn(|_, _| rng.gen())).collect();
        let rho = [1.0, 2.0, 3.0];
        let z = consensus_update(&(0..3).map(|i| (q[i] + u[i], rho[i])).collect::<Vec<_>>());
        let before: Dof = (0..3).map(|i| u[i] * rho[i]).sum();
        let after: Dof = (0..3).map(|i| dual_update(&u[i], &q[i], &z) * rho[i]).sum();
        let expected: Dof = (0..3).map(|i| (q[i] - z) * rho[i]).sum();
        assert_relative_eq!(after - before, expected, epsilon = 1e-12);
    }

    #[test]
    fn residual_examples() {
        let z = Dof::repeat(1.0);
        let reps = [z, z];
        let r = compute_residuals(&[ResidualInput {
            replicas: &reps,
            z_new: z,
            z_old: z,
        }]);
        assert_eq!(
            r,
            Residuals {
                r_inf: 0.0,
                s_inf: 0.0
            }
        );
    }

    #[test]
    fn residual_maxima_match_enumeration() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        for _ in 0..50 {
            let reps: Vec<Vec<Dof>> = (0..3)
                .map(|_| {
                    (0..2)
                        .map(|_| Dof::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
                        .collect()
                })
                .collect();
            let zs: Vec<(Dof, Dof)> = (0..3)
                .map(|_| {
                    (
                        Dof::from_fn(|_, _| rng.gen()),
                        Dof::from_fn(|_, _| rng.gen()),
                    )
                })
                .collect();
            let inputs: Vec<ResidualInput> = (0..3)
                .map(|b| ResidualInput {
                    replicas: &reps[b],
                    z_new: zs[b].0,
                    z_old: zs[b].1,
                })
                .collect();
            let got = compute_residuals(&inputs);
            let mut r = 0.0f64;
            let mut s = 0.0f64;
            for b in 0..3 {
                for k in 0..6 {
                    for q in &reps[b] {
                        r = r.max((q[k] - zs[b].0[k]).abs());
                    }
                    s = s.max((zs[b].0[k] - zs[b].1[k]).abs());
                }
            }
            assert_eq!(got.r_inf, r);
            assert_eq!(got.s_inf, s);
        }
    }

    #[test]
    fn stopping_examples() {
        let (h, l, th) = (0.01, 1.0, 1e-3);
        assert_eq!(
            check_stopping(&[0.0, 0.0], 0.0, 0.0, &[1.0, 1.0], h, l, th),
            ControlDecision::End
        );
        assert_eq!(
            check_stopping(&[0.0, 0.0], 0.0, 0.0, &[1.0, 0.7], h, l, th),
            ControlDecision::Continue
        );
        // r/(h·l) equal to θ in floating point.
        let r = 1e-5;
        assert_eq!(normalized(r, h, l), th);
        assert_eq!(
            check_stopping(&[0.0], r, 0.0, &[1.0], h, l, th),
            ControlDecision::Continue
        );
    }

    #[test]
    fn rho_examples() {
        assert_eq!(init_rho(100.0, 1.0).unwrap(), 100.0);
        assert_eq!(init_rho(100.0, 0.01).unwrap(), 1.0);
        let sweep: Vec<f64> = [0.01, 0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&b| init_rho(3.0, b).unwrap())
            .collect();
        for w in sweep.windows(2) {
            assert_relative_eq!(w[1] / w[0], 10.0, max_relative = 1e-12);
        }
        let p = AdaptParams::default();
        assert_eq!(adapt_rho(1.0, 10.0, 1.0, &p, 1.0), 2.0);
        assert_eq!(adapt_rho(1.0, 1.0, 10.0, &p, 1.0), 0.5);
        assert_eq!(adapt_rho(1.0, 3.0, 3.0, &p, 1.0), 1.0);
        assert_eq!(adapt_rho(1000.0, 1e6, 1.0, &p, 1.0), 1000.0);
        assert_eq!(adapt_rho(0.001, 1.0, 1e6, &p, 1.0), 0.001);
    }

    #[test]
    fn gate_examples() {
        let bodies = vec![sq(0, 0.0, 0.0), sq(1, 3.0, 0.0)];
        let q: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        assert_eq!(
            merge_ccd_gate(&bodies, &q, &[Some(q[0]), None]).unwrap(),
            1.0
        );
        // Far from anything: any target is safe.
        let far = placed_dof(Vec2::new(-4.0, 7.0), 0.3);
        assert_eq!(
            merge_ccd_gate(&bodies, &q, &[Some(far), None]).unwrap(),
            1.0
        );
        // Target drags the shared body through the internal one.
        let through = placed_dof(Vec2::new(6.0, 0.0), 0.0);
        let toi = merge_ccd_gate(&bodies, &q, &[Some(through), None]).unwrap();
        assert!(toi < 1.0);
        let merged = merge_target(&q, &[Some(through), None]);
        let mut hit = false;
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            let qt: Vec<Dof> = q
                .iter()
                .zip(&merged)
                .map(|(a, b)| a + (b - a) * t)
                .collect();
            if crate::geometry::intersection_test(&bodies, &qt) {
                hit = true;
                assert!(toi <= t);
                break;
            }
        }
        assert!(hit);
    }

    #[test]
    fn finalize_examples() {
        let bodies = vec![sq(0, 0.0, 0.0), sq(1, 3.0, 0.0)];
        let q: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        let (qf, _) = finalize_merge(&q, &[Some(q[0]), None], &q, 0.01, 1.0).unwrap();
        assert_eq!(qf, q);
        let moved = q[0] + Dof::new(0.02, 0.0, 0.0, 0.0, 0.0, 0.0);
        let (_, v) = finalize_merge(&q, &[Some(moved), None], &q, 0.01, 1.0).unwrap();
        assert_relative_eq!(v[0][0], 2.0, epsilon = 1e-12);
        assert_eq!(v[1], Dof::zeros());
        assert!(matches!(
            finalize_merge(&q, &[None, None], &q, 0.01, 0.9),
            Err(Error::GateNotPassed { .. })
        ));
    }

    #[test]
    fn midpoint_merge_is_intersection_free() {
        let bodies = vec![sq(0, 0.0, 0.0), sq(1, 1.5, 0.0)];
        let mut q: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        let a = placed_dof(Vec2::new(-0.1, 0.0), 0.0);
        let b = placed_dof(Vec2::new(0.1, 0.0), 0.0);
        let z = consensus_update(&[(a, 1.0), (b, 1.0)]);
        q[0] = a;
        let toi = merge_ccd_gate(&bodies, &q, &[Some(z), None]).unwrap();
        let (qf, _) = finalize_merge(&q, &[Some(z), None], &q, 0.01, toi).unwrap();
        assert!(!crate::geometry::intersection_test(&bodies, &qf));
    }

    #[test]
    fn timestep_policy() {
        let mut t = TimestepController::new(0.02);
        assert_eq!(t.on_success(), 0.02);
        assert_eq!(t.on_failure().unwrap(), 0.01);
        assert_eq!(t.on_success(), 0.02);
        for _ in 0..4 {
            t.on_failure().unwrap();
        }
        assert_eq!(t.h, 0.02 / 16.0);
        assert!(matches!(
            t.on_failure(),
            Err(Error::TimestepExhausted { halvings: 4 })
        ));
    }

    #[test]
    fn warm_start_examples() {
        let q = Dof::repeat(0.25);
        assert_eq!(warm_start(BodyId(0), &[q, q]).unwrap(), (q, Dof::zeros()));
        let off = q + Dof::repeat(1e-6);
        assert!(matches!(
            warm_start(BodyId(0), &[q, off]),
            Err(Error::ReplicaMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn stopping_is_monotone(
            dq in 0.0..2e-5f64, r in 0.0..2e-5f64, s in 0.0..2e-5f64,
            shrink in 0.0..1.0f64, toi in prop::sample::select(vec![1.0, 0.5]),
        ) {
            let (h, l, th) = (0.01, 1.0, 1e-3);
            let before = check_stopping(&[dq], r, s, &[toi], h, l, th);
            let after = check_stopping(&[dq * shrink], r * shrink, s * shrink, &[toi], h, l, th);
            if before == ControlDecision::End {
                prop_assert_eq!(after, ControlDecision::End);
            }
        }

        #[test]
        fn rho_stays_clamped(rho_exp in -3.0..3.0f64, r in 0.0..10.0f64, s in 0.0..10.0f64) {
            let p = AdaptParams::default();
            let rho0 = 2.0;
            let rho = rho0 * 10f64.powf(rho_exp);
            let next = adapt_rho(rho, r, s, &p, rho0);
            prop_assert!(next >= p.sigma_min * rho0 && next <= p.sigma_max * rho0);
        }
    }
}
