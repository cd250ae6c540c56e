//! Single-domain reference trajectories.

use dabd_core::body::Dof;
use dabd_core::scene::{single_domain_step, Scene, StepStats};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub frame: usize,
    pub q: Vec<Dof>,
    pub q_dot: Vec<Dof>,
    pub solves: usize,
    pub newton_iterations: usize,
}

/// Steps the whole scene without partitioning, committing at the ADMM cap
/// like a lone worker does.
pub fn run_reference(scene: &Scene, frames: usize) -> Result<Vec<ReferenceFrame>> {
    let mut q = scene.configs();
    let mut q_dot = scene.velocities();
    let mut out = Vec::with_capacity(frames);
    if scene.bodies.is_empty() {
        return Ok(out);
    }
    for frame in 0..frames {
        let (qn, vn, stats) = reference_step(scene, &q, &q_dot, scene.params.h)?;
        q = qn;
        q_dot = vn;
        out.push(ReferenceFrame {
            frame,
            q: q.clone(),
            q_dot: q_dot.clone(),
            solves: stats.solves,
            newton_iterations: stats.newton_iterations,
        });
    }
    Ok(out)
}

/// One reference step from an arbitrary start with step size `h`.
pub fn reference_step(
    scene: &Scene,
    q: &[Dof],
    q_dot: &[Dof],
    h: f64,
) -> Result<(Vec<Dof>, Vec<Dof>, StepStats)> {
    Ok(single_domain_step(
        &scene.bodies,
        q,
        q_dot,
        &scene.params,
        h,
        scene.admm.max_iters,
    )?)
}
