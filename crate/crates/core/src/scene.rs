//! Scene description and the single-domain implicit-Euler step.

use crate::body::{gravity_force, predicted_position, AffineBody, BodyId, Dof, SimParams, Vec2};
use crate::consensus::{finalize_merge, normalized, AdaptParams, Plane};
use crate::error::{Error, Result};
use crate::geometry::intersection_test;
use crate::solver::{newton_solve, LocalObjective, NewtonReport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmParams {
    /// ADMM iteration cap per frame attempt.
    pub max_iters: usize,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self { max_iters: 300 }
    }
}

/// Equal and opposite forces on the replicas of a shared body: the lowest
/// holder gets `+force`, the highest `−force`, others nothing. The forces
/// cancel in the global objective and only affect consensus dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaBias {
    pub body: BodyId,
    pub force: Vec2,
    /// Active while the frame index is below this.
    pub until_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Sorted by id.
    pub bodies: Vec<AffineBody>,
    pub params: SimParams,
    pub adapt: AdaptParams,
    pub admm: AdmmParams,
    pub planes: Vec<Plane>,
    pub w_min: Option<f64>,
    pub replica_bias: Vec<ReplicaBias>,
}

impl Scene {
    pub fn new(mut bodies: Vec<AffineBody>, params: SimParams) -> Self {
        bodies.sort_by_key(|b| b.id);
        Self {
            bodies,
            params,
            adapt: AdaptParams::default(),
            admm: AdmmParams::default(),
            planes: Vec::new(),
            w_min: None,
            replica_bias: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.adapt.validate()?;
        for w in self.bodies.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::InvalidParameter(format!(
                    "body ids must be unique and sorted near {:?}",
                    w[1].id
                )));
            }
        }
        if intersection_test(&self.bodies, &self.configs()) {
            return Err(Error::InvalidParameter(
                "initial configuration has intersecting bodies".into(),
            ));
        }
        if self.admm.max_iters < 2 {
            return Err(Error::InvalidParameter(
                "ADMM cap must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn configs(&self) -> Vec<Dof> {
        self.bodies.iter().map(|b| b.q).collect()
    }

    pub fn velocities(&self) -> Vec<Dof> {
        self.bodies.iter().map(|b| b.q_dot).collect()
    }

    pub fn index_of(&self, id: BodyId) -> Option<usize> {
        self.bodies.binary_search_by_key(&id, |b| b.id).ok()
    }

    pub fn total_dynamic(&self) -> usize {
        self.bodies.iter().filter(|b| !b.is_static).count()
    }
}

/// Predicted position of one body under gravity; static bodies stay put.
pub fn predict(body: &AffineBody, q: &Dof, q_dot: &Dof, params: &SimParams, h: f64) -> Result<Dof> {
    if body.is_static {
        return Ok(*q);
    }
    let f = gravity_force(&body.mass_matrix, &params.gravity);
    predicted_position(q, q_dot, &f, h, &body.mass_matrix)
}

/// Work counters of one committed step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Newton solves run (one per ADMM iteration on a worker).
    pub solves: usize,
    pub newton_iterations: usize,
    pub last: NewtonReport,
}

/// Whether a Newton update is small enough to end the frame.
pub fn update_converged(dq_inf: f64, h: f64, params: &SimParams) -> bool {
    normalized(dq_inf, h, params.scene_scale) < params.theta
}

/// One implicit-Euler step of the whole scene without any partitioning.
/// Repeats the capped Newton solve until its last update is below the
/// normalized threshold, exactly like a lone worker would. At `max_solves`
/// the current iterate is committed, as a worker does at the ADMM cap.
pub fn single_domain_step(
    bodies: &[AffineBody],
    q: &[Dof],
    q_dot: &[Dof],
    params: &SimParams,
    h: f64,
    max_solves: usize,
) -> Result<(Vec<Dof>, Vec<Dof>, StepStats)> {
    let q_tilde = bodies
        .iter()
        .zip(q.iter().zip(q_dot))
        .map(|(b, (qi, vi))| predict(b, qi, vi, params, h))
        .collect::<Result<Vec<_>>>()?;
    let obj = LocalObjective::single_domain(bodies, q_tilde, params, h)?;
    let tol = params.newton_tolerance(h);
    let mut cur = q.to_vec();
    let mut stats = StepStats::default();
    loop {
        let (next, rep) = newton_solve(&obj, &cur, params.newton_max_iters, tol)?;
        cur = next;
        stats.solves += 1;
        stats.newton_iterations += rep.iterations;
        let done = update_converged(rep.final_direction_inf, h, params);
        stats.last = rep;
        if done || stats.solves >= max_solves {
            break;
        }
    }
    let none = vec![None; bodies.len()];
    let (q_final, q_dot_final) = finalize_merge(&cur, &none, q, h, 1.0)?;
    Ok((q_final, q_dot_final, stats))
}
