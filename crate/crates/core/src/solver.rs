//! Local incremental-potential objective and its projected-Newton minimizer.
//!
//! The objective over the bodies held by one worker is
//!
//! ```text
//! Σ_b (1/κ_b)(½‖q_b − q̃_b‖²_M + h² E_arap(q_b)) − h² Σ_b f_bᵀ q_b
//!   + h² Σ_c (1/κ_c) b(d_c) + Σ_{shared b} (ρ_b/2)‖q_b − z_b + u_b‖²
//! ```
//!
//! where `κ_b` counts the workers holding body `b`, `κ_c` the workers holding
//! both bodies of contact `c`, and `f_b` is an optional bias force. With one
//! worker and no anchors this is the plain implicit-Euler step.

use std::ops::AddAssign;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix6, SMatrix};

use crate::body::{
    arap_energy, barrier_energy, inertia_energy, jacobian, project_psd, AffineBody, Dof, SimParams,
};
use crate::error::{Error, Result};
use crate::geometry::{
    broad_phase, broad_phase_swept, candidate_points, ccd_toi, narrow_phase, point_edge_distance,
    point_edge_distance_value, Candidate, ContactPair,
};

/// Smallest line-search step before the solve is declared stalled.
pub const MIN_STEP: f64 = 1e-12;

/// Consensus anchor of a shared body: target `z`, scaled dual `u`, penalty `ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub z: Dof,
    pub u: Dof,
    pub rho: f64,
}

/// Value, gradient and Hessian of the objective over the free DoFs.
#[derive(Debug, Clone)]
pub struct EnergyTerm {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    /// `‖α Δq‖∞` of the last accepted step.
    pub final_update_inf: f64,
    /// `‖Δq‖∞` of the last Newton direction, before line search.
    pub final_direction_inf: f64,
    pub converged: bool,
    pub line_search_steps: usize,
    pub active_contacts: usize,
    pub candidates: usize,
    pub collision_seconds: f64,
    pub solve_seconds: f64,
}

/// Number of workers set in a holder mask.
pub fn replica_count(mask: u64) -> f64 {
    mask.count_ones() as f64
}

#[derive(Debug, Clone)]
pub struct LocalObjective<'a> {
    pub bodies: &'a [AffineBody],
    pub q_tilde: Vec<Dof>,
    /// Bit `i` set when worker `i` holds the body.
    pub holders: Vec<u64>,
    pub anchors: Vec<Option<Anchor>>,
    pub bias: Vec<Dof>,
    pub params: &'a SimParams,
    pub h: f64,
    dof_offset: Vec<Option<usize>>,
    n_dof: usize,
}

impl<'a> LocalObjective<'a> {
    /// Builds the objective. Every non-static body held by more than one
    /// worker needs an anchor.
    pub fn assemble(
        bodies: &'a [AffineBody],
        q_tilde: Vec<Dof>,
        holders: Vec<u64>,
        anchors: Vec<Option<Anchor>>,
        bias: Vec<Dof>,
        params: &'a SimParams,
        h: f64,
    ) -> Result<Self> {
        let n = bodies.len();
        for len in [q_tilde.len(), holders.len(), anchors.len(), bias.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        let mut dof_offset = Vec::with_capacity(n);
        let mut n_dof = 0;
        for (i, b) in bodies.iter().enumerate() {
            if b.is_static {
                dof_offset.push(None);
                continue;
            }
            if holders[i].count_ones() == 0 {
                return Err(Error::InvalidParameter(format!(
                    "body {:?} has no holder",
                    b.id
                )));
            }
            if holders[i].count_ones() > 1 && anchors[i].is_none() {
                return Err(Error::MissingAnchor(b.id));
            }
            dof_offset.push(Some(n_dof));
            n_dof += 6;
        }
        Ok(Self {
            bodies,
            q_tilde,
            holders,
            anchors,
            bias,
            params,
            h,
            dof_offset,
            n_dof,
        })
    }

    /// Objective for a single domain holding every body: no anchors, no bias.
    pub fn single_domain(
        bodies: &'a [AffineBody],
        q_tilde: Vec<Dof>,
        params: &'a SimParams,
        h: f64,
    ) -> Result<Self> {
        let n = bodies.len();
        Self::assemble(
            bodies,
            q_tilde,
            vec![1; n],
            vec![None; n],
            vec![Dof::zeros(); n],
            params,
            h,
        )
    }

    pub fn dof_count(&self) -> usize {
        self.n_dof
    }

    pub fn kappa_b(&self, i: usize) -> f64 {
        replica_count(self.holders[i])
    }

    pub fn kappa_c(&self, a: usize, b: usize) -> f64 {
        replica_count(self.holders[a] & self.holders[b]).max(1.0)
    }

    fn kappa_arap(&self, i: usize) -> f64 {
        self.bodies[i].arap_kappa(self.params.kappa_arap)
    }

    fn body_value(&self, i: usize, q: &Dof) -> f64 {
        let b = &self.bodies[i];
        let h2 = self.h * self.h;
        let mut v = (inertia_energy(q, &self.q_tilde[i], &b.mass_matrix).value
            + h2 * arap_energy(q, self.kappa_arap(i), b.rest_area).value)
            / self.kappa_b(i)
            - h2 * self.bias[i].dot(q);
        if let Some(a) = &self.anchors[i] {
            v += 0.5 * a.rho * (q - a.z + a.u).norm_squared();
        }
        v
    }

    fn contact_value(&self, c: &Candidate, q: &[Dof]) -> Result<f64> {
        let [p, e0, e1] = candidate_points(c, self.bodies, q);
        let d = point_edge_distance_value(&p, &e0, &e1);
        let (b, _, _) = barrier_energy(d, self.params.d_hat, self.params.kappa_barrier)?;
        Ok(self.h * self.h * b / self.kappa_c(c.a, c.b))
    }

    /// Objective value using `candidates` as a superset of the active contacts.
    pub fn value_with(&self, q: &[Dof], candidates: &[Candidate]) -> Result<f64> {
        let mut v = 0.0;
        for i in 0..self.bodies.len() {
            if !self.bodies[i].is_static {
                v += self.body_value(i, &q[i]);
            }
        }
        for c in candidates {
            v += self.contact_value(c, q)?;
        }
        Ok(v)
    }

    pub fn value(&self, q: &[Dof]) -> Result<f64> {
        let cands = broad_phase(self.bodies, q, self.params.d_hat);
        self.value_with(q, &cands)
    }

    /// Active contacts at `q` with their replication weights.
    pub fn contacts(&self, q: &[Dof]) -> Vec<ContactPair> {
        let cands = broad_phase(self.bodies, q, self.params.d_hat);
        let mut pairs = narrow_phase(&cands, self.bodies, q, self.params.d_hat);
        for p in &mut pairs {
            p.kappa_c = self.kappa_c(p.a, p.b);
        }
        pairs
    }

    /// Gradient and Hessian at `q`; with `project` every per-body and
    /// per-contact block is clamped to be positive semidefinite.
    pub fn evaluate(
        &self,
        q: &[Dof],
        contacts: &[ContactPair],
        project: bool,
    ) -> Result<EnergyTerm> {
        let n = self.n_dof;
        let h2 = self.h * self.h;
        let mut value = 0.0;
        let mut gradient = DVector::zeros(n);
        let mut hessian = DMatrix::zeros(n, n);

        for (i, b) in self.bodies.iter().enumerate() {
            let Some(o) = self.dof_offset[i] else {
                continue;
            };
            let w = 1.0 / self.kappa_b(i);
            let inertia = inertia_energy(&q[i], &self.q_tilde[i], &b.mass_matrix);
            let arap = arap_energy(&q[i], self.kappa_arap(i), b.rest_area);
            value += w * (inertia.value + h2 * arap.value) - h2 * self.bias[i].dot(&q[i]);
            let mut g = (inertia.gradient + arap.gradient * h2) * w - self.bias[i] * h2;
            let mut hb = (inertia.hessian + arap.hessian * h2) * w;
            if let Some(a) = &self.anchors[i] {
                let r = q[i] - a.z + a.u;
                value += 0.5 * a.rho * r.norm_squared();
                g += r * a.rho;
                hb += Matrix6::identity() * a.rho;
            }
            if project {
                hb = project_psd(&hb);
            }
            gradient.fixed_rows_mut::<6>(o).add_assign(&g);
            hessian.fixed_view_mut::<6, 6>(o, o).add_assign(&hb);
        }

        for c in contacts {
            let cand = c.candidate();
            let [p, e0, e1] = candidate_points(&cand, self.bodies, q);
            let dist = point_edge_distance(&p, &e0, &e1);
            let (bv, b1, b2) =
                barrier_energy(dist.d, self.params.d_hat, self.params.kappa_barrier)?;
            let w = h2 / self.kappa_c(c.a, c.b);
            value += w * bv;
            let gw = dist.gradient * (w * b1);
            let mut hw = (dist.gradient * dist.gradient.transpose() * b2 + dist.hessian * b1) * w;
            if project {
                hw = project_psd(&hw);
            }
            // Stacked world coordinates (p, e0, e1) as a function of (q_a, q_b).
            let ba = &self.bodies[c.a];
            let bb = &self.bodies[c.b];
            let [i0, i1] = bb.edges[c.edge_index];
            let mut jc = SMatrix::<f64, 6, 12>::zeros();
            let jp: Matrix2x6<f64> = jacobian(&ba.rest_vertices[c.point_index]);
            jc.fixed_view_mut::<2, 6>(0, 0).copy_from(&jp);
            jc.fixed_view_mut::<2, 6>(2, 6)
                .copy_from(&jacobian(&bb.rest_vertices[i0]));
            jc.fixed_view_mut::<2, 6>(4, 6)
                .copy_from(&jacobian(&bb.rest_vertices[i1]));
            let gq = jc.transpose() * gw;
            let hq = jc.transpose() * hw * jc;
            let slots = [
                (self.dof_offset[c.a], 0usize),
                (self.dof_offset[c.b], 6usize),
            ];
            for &(oi, si) in &slots {
                let Some(oi) = oi else { continue };
                gradient
                    .fixed_rows_mut::<6>(oi)
                    .add_assign(&gq.fixed_rows::<6>(si));
                for &(oj, sj) in &slots {
                    let Some(oj) = oj else { continue };
                    hessian
                        .fixed_view_mut::<6, 6>(oi, oj)
                        .add_assign(&hq.fixed_view::<6, 6>(si, sj));
                }
            }
        }
        Ok(EnergyTerm {
            value,
            gradient,
            hessian,
        })
    }

    pub fn gather(&self, q: &[Dof]) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_dof);
        for (i, o) in self.dof_offset.iter().enumerate() {
            if let Some(o) = o {
                x.fixed_rows_mut::<6>(*o).copy_from(&q[i]);
            }
        }
        x
    }

    /// Adds `alpha · dx` to the free bodies of `q`.
    pub fn step(&self, q: &[Dof], dx: &DVector<f64>, alpha: f64) -> Vec<Dof> {
        q.iter()
            .zip(&self.dof_offset)
            .map(|(qi, o)| match o {
                Some(o) => qi + dx.fixed_rows::<6>(*o) * alpha,
                None => *qi,
            })
            .collect()
    }
}

/// Regularized Cholesky solve of `(H + εI) Δ = −g` with `ε = 1e-8·tr(H)/n`.
fn newton_direction(term: EnergyTerm) -> Result<DVector<f64>> {
    let n = term.gradient.len();
    let mut hess = term.hessian;
    let eps = 1e-8 * hess.trace() / n as f64;
    for k in 0..n {
        hess[(k, k)] += eps;
    }
    let chol = hess
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("Newton system is not positive definite".into()))?;
    Ok(chol.solve(&(-term.gradient)))
}

/// Projected Newton with CCD-limited backtracking line search. Every
/// iterate stays penetration-free. Stops once the direction satisfies `‖Δq‖∞ < tol` or after
/// `max_iters` iterations.
pub fn newton_solve(
    obj: &LocalObjective<'_>,
    q_init: &[Dof],
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<Dof>, NewtonReport)> {
    let started = Instant::now();
    let mut report = NewtonReport::default();
    let mut q = q_init.to_vec();
    if obj.dof_count() == 0 {
        report.converged = true;
        return Ok((q, report));
    }
    let d_hat = obj.params.d_hat;
    for iter in 0..max_iters {
        let t0 = Instant::now();
        let cands = broad_phase(obj.bodies, &q, d_hat);
        let mut contacts = narrow_phase(&cands, obj.bodies, &q, d_hat);
        for c in &mut contacts {
            c.kappa_c = obj.kappa_c(c.a, c.b);
        }
        report.collision_seconds += t0.elapsed().as_secs_f64();
        report.active_contacts = contacts.len();
        report.candidates = cands.len();

        let term = obj.evaluate(&q, &contacts, true)?;
        let dx = newton_direction(term)?;

        let t1 = Instant::now();
        let q_full = obj.step(&q, &dx, 1.0);
        let swept = broad_phase_swept(obj.bodies, &q, &q_full, d_hat);
        let alpha_max = ccd_toi(obj.bodies, &q, &q_full, &swept)?;
        report.collision_seconds += t1.elapsed().as_secs_f64();

        let e0 = obj.value_with(&q, &swept)?;
        let mut alpha = alpha_max;
        let q_next = loop {
            if alpha < MIN_STEP {
                return Err(Error::LineSearchStalled {
                    alpha,
                    iteration: iter,
                });
            }
            let trial = obj.step(&q, &dx, alpha);
            match obj.value_with(&trial, &swept) {
                Ok(e) if e <= e0 => break trial,
                Ok(_) | Err(Error::BarrierDomain { .. }) => {
                    alpha *= 0.5;
                    report.line_search_steps += 1;
                }
                Err(e) => return Err(e),
            }
        };
        q = q_next;
        report.iterations = iter + 1;
        report.final_update_inf = alpha * dx.amax();
        report.final_direction_inf = dx.amax();
        if report.final_direction_inf < tol {
            report.converged = true;
            break;
        }
    }
    report.solve_seconds = started.elapsed().as_secs_f64();
    Ok((q, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{
        gravity_force, placed_dof, predicted_position, rectangle, unit_square, BodyId, Vec2,
    };
    use crate::geometry::intersection_test;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn params() -> SimParams {
        SimParams {
            kappa_arap: 1e4,
            kappa_barrier: 1e3,
            d_hat: 1e-2,
            ..SimParams::default()
        }
    }

    fn square(id: u32, at: Vec2, is_static: bool) -> AffineBody {
        let mut b = AffineBody::new(BodyId(id), vec![unit_square()], 1.0, is_static).unwrap();
        b.q = placed_dof(at, 0.0);
        b
    }

    fn floor_scene() -> Vec<AffineBody> {
        let mut floor = AffineBody::new(
            BodyId(0),
            vec![rectangle(Vec2::new(-5.0, -1.0), Vec2::new(5.0, 0.0))],
            1.0,
            true,
        )
        .unwrap();
        floor.q = placed_dof(Vec2::zeros(), 0.0);
        vec![floor, square(1, Vec2::new(0.0, 0.5 + 5e-3), false)]
    }

    #[test]
    fn missing_anchor_rejected() {
        let bodies = vec![square(0, Vec2::zeros(), false)];
        let p = params();
        let err = LocalObjective::assemble(
            &bodies,
            vec![bodies[0].q],
            vec![0b11],
            vec![None],
            vec![Dof::zeros()],
            &p,
            0.01,
        );
        assert!(matches!(err, Err(Error::MissingAnchor(BodyId(0)))));
    }

    #[test]
    fn no_contacts_no_anchors_is_inertia_plus_arap() {
        let bodies = vec![
            square(0, Vec2::zeros(), false),
            square(1, Vec2::new(3.0, 0.0), false),
        ];
        let p = params();
        let h = 0.01;
        let qt: Vec<Dof> = bodies
            .iter()
            .map(|b| b.q + Dof::new(0.1, 0.0, 0.01, 0.0, 0.0, 0.0))
            .collect();
        let obj = LocalObjective::single_domain(&bodies, qt.clone(), &p, h).unwrap();
        let q: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        let expected: f64 = bodies
            .iter()
            .zip(&qt)
            .map(|(b, t)| {
                inertia_energy(&b.q, t, &b.mass_matrix).value
                    + h * h * arap_energy(&b.q, p.kappa_arap, b.rest_area).value
            })
            .sum();
        assert_relative_eq!(obj.value(&q).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn anchor_at_consensus_adds_nothing() {
        let bodies = vec![square(0, Vec2::zeros(), false)];
        let p = params();
        let q = bodies[0].q;
        let anchored = LocalObjective::assemble(
            &bodies,
            vec![q],
            vec![0b11],
            vec![Some(Anchor {
                z: q,
                u: Dof::zeros(),
                rho: 5.0,
            })],
            vec![Dof::zeros()],
            &p,
            0.01,
        )
        .unwrap();
        assert_eq!(anchored.body_value(0, &q), 0.0);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        let p = params();
        let bodies = floor_scene();
        let h = 0.01;
        let mut trials = 0;
        while trials < 200 {
            let q: Vec<Dof> = bodies
                .iter()
                .map(|b| {
                    if b.is_static {
                        b.q
                    } else {
                        let mut d = Dof::from_fn(|_, _| rng.gen_range(-0.02..0.02));
                        d[1] = rng.gen_range(-0.004..0.004);
                        b.q + d
                    }
                })
                .collect();
            if intersection_test(&bodies, &q) || crate::geometry::min_separation(&bodies, &q) < 1e-3
            {
                continue;
            }
            trials += 1;
            let anchor = Anchor {
                z: q[1] + Dof::from_fn(|_, _| rng.gen_range(-0.1..0.1)),
                u: Dof::zeros(),
                rho: 3.0,
            };
            let obj = LocalObjective::assemble(
                &bodies,
                bodies.iter().map(|b| b.q).collect(),
                vec![0b11, 0b11],
                vec![None, Some(anchor)],
                vec![Dof::zeros(), Dof::new(1.0, 2.0, 0.0, 0.0, 0.0, 0.0)],
                &p,
                h,
            )
            .unwrap();
            let contacts = obj.contacts(&q);
            let term = obj.evaluate(&q, &contacts, false).unwrap();
            assert_relative_eq!(term.value, obj.value(&q).unwrap(), max_relative = 1e-12);
            let eps = 1e-7;
            for k in 0..6 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[1][k] += eps;
                qm[1][k] -= eps;
                let cp = obj.contacts(&qp);
                let cm = obj.contacts(&qm);
                let fd = (obj.value(&qp).unwrap() - obj.value(&qm).unwrap()) / (2.0 * eps);
                let g = term.gradient[k];
                assert!(
                    (fd - g).abs() <= 1e-4 * g.abs().max(1e-2),
                    "grad {k}: fd {fd} vs {g}"
                );
                let gp = obj.evaluate(&qp, &cp, false).unwrap().gradient;
                let gm = obj.evaluate(&qm, &cm, false).unwrap().gradient;
                let col = (gp - gm) / (2.0 * eps);
                let err = (&col - term.hessian.column(k)).norm();
                assert!(
                    err <= 1e-3 * term.hessian.column(k).norm().max(1.0),
                    "hess col {k}: {err}"
                );
            }
        }
    }

    #[test]
    fn already_at_minimum_takes_one_step() {
        let bodies = vec![square(0, Vec2::zeros(), false)];
        let p = params();
        let obj = LocalObjective::single_domain(&bodies, vec![bodies[0].q], &p, 0.01).unwrap();
        let (q, rep) = newton_solve(&obj, &[bodies[0].q], 32, 1e-9).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.final_update_inf < 1e-12);
        assert_relative_eq!(q[0], bodies[0].q, epsilon = 1e-12);
    }

    #[test]
    fn strong_anchor_pulls_to_target() {
        let bodies = vec![square(0, Vec2::zeros(), false)];
        let p = params();
        let z = placed_dof(Vec2::new(0.3, -0.2), 0.1);
        let u = Dof::new(0.01, 0.0, 0.0, 0.0, 0.0, 0.0);
        let obj = LocalObjective::assemble(
            &bodies,
            vec![bodies[0].q],
            vec![0b11],
            vec![Some(Anchor {
                z,
                u,
                rho: 1e6 * bodies[0].mass,
            })],
            vec![Dof::zeros()],
            &p,
            0.01,
        )
        .unwrap();
        let (q, _) = newton_solve(&obj, &[bodies[0].q], 32, 1e-12).unwrap();
        let target = z - u;
        assert!((q[0] - target).norm() / target.norm() < 1e-3);
    }

    /// Vertical force balance of a square resting on the floor, solved by bisection.
    fn equilibrium_gap(p: &SimParams, q_tilde_y: f64, mass: f64, h: f64, y0: f64) -> f64 {
        // The two bottom corners each touch the floor edge in its interior.
        let f = |gap: f64| {
            let (_, b1, _) = barrier_energy(gap, p.d_hat, p.kappa_barrier).unwrap();
            mass * (y0 + gap - q_tilde_y) + h * h * 2.0 * b1
        };
        let (mut lo, mut hi) = (1e-12, p.d_hat);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn falling_body_settles_on_floor() {
        // Stiff enough that the corners' compression of the linear part is negligible.
        let p = SimParams {
            kappa_arap: 1e12,
            ..params()
        };
        let h = 0.01;
        let bodies = floor_scene();
        let b = &bodies[1];
        let f = gravity_force(&b.mass_matrix, &p.gravity);
        let q_dot = Dof::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0);
        let qt1 = predicted_position(&b.q, &q_dot, &f, h, &b.mass_matrix).unwrap();
        let q0: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        let obj = LocalObjective::single_domain(&bodies, vec![bodies[0].q, qt1], &p, h).unwrap();
        let (q, rep) = newton_solve(&obj, &q0, 100, 1e-14).unwrap();
        assert!(!intersection_test(&bodies, &q));
        let gap = q[1][1] - 0.5;
        assert!(gap > 0.0);
        let term = obj.evaluate(&q, &obj.contacts(&q), false).unwrap();
        assert!(
            term.gradient.amax() < 1e-6 * b.mass * 9.81,
            "{} after {:?}",
            term.gradient.amax(),
            rep
        );
        let oracle = equilibrium_gap(&p, qt1[1], b.mass, h, 0.5);
        assert_relative_eq!(gap, oracle, max_relative = 1e-6);
    }

    #[test]
    fn iterates_never_increase_objective() {
        let p = params();
        let h = 0.01;
        let bodies = floor_scene();
        let qt = vec![
            bodies[0].q,
            bodies[1].q + Dof::new(0.05, -0.2, 0.0, 0.0, 0.0, 0.0),
        ];
        let obj = LocalObjective::single_domain(&bodies, qt, &p, h).unwrap();
        let mut q: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        let mut last = obj.value(&q).unwrap();
        for _ in 0..10 {
            let (next, _) = newton_solve(&obj, &q, 1, 0.0).unwrap();
            let v = obj.value(&next).unwrap();
            assert!(v <= last);
            assert!(!intersection_test(&bodies, &next));
            last = v;
            q = next;
        }
    }
}
