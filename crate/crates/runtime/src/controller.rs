//! Controller side: partitioning, global stopping decisions, commits,
//! adaptive time stepping and boundary balancing.

use std::sync::Arc;

use dabd_core::balance::{balance_factor, Balancer, BalancerParams};
use dabd_core::body::Dof;
use dabd_core::consensus::{
    check_stopping, partition_scene, ControlDecision, PartitionLayout, Plane, TimestepController,
};
use dabd_core::geometry::Aabb;
use dabd_core::scene::Scene;
use dabd_core::Error;

use crate::error::{Result, RuntimeError};
use crate::message::{
    BalanceUpdate, BodyState, ControlSignal, FrameCommit, FrameStart, IterationReport, Signal,
    WorkerStats,
};

/// Per-worker cost fed to the balancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimingSource {
    /// Newton iterations times held dynamic bodies; deterministic.
    #[default]
    WorkUnits,
    /// Measured solve and collision seconds.
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub n_workers: usize,
    pub frames: usize,
    pub timing: TimingSource,
    pub balancer: Option<BalancerParams>,
}

impl ControllerConfig {
    pub fn new(n_workers: usize, frames: usize) -> Self {
        Self {
            n_workers,
            frames,
            timing: TimingSource::WorkUnits,
            balancer: None,
        }
    }
}

/// One row per consensus iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub frame: u64,
    pub attempt: u32,
    pub k: u32,
    pub h: f64,
    pub dq_inf: Vec<f64>,
    pub r_inf: f64,
    pub s_inf: f64,
    pub min_toi: f64,
    pub newton_iterations: Vec<u32>,
    pub work: Vec<f64>,
    pub contacts: u32,
    pub candidates: u32,
    pub t_solve: Vec<f64>,
    pub t_coll: Vec<f64>,
    pub t_sync: Vec<f64>,
    pub decision: Signal,
}

/// Outcome of one committed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: u64,
    pub h: f64,
    /// Attempts used, 1 when the first try committed.
    pub attempts: u32,
    /// ADMM iterations of the committed attempt.
    pub iterations: u32,
    /// Committed at the iteration cap with every gate passed.
    pub forced: bool,
    pub q: Vec<Dof>,
    pub q_dot: Vec<Dof>,
    pub workers: Vec<WorkerStats>,
    pub planes: Vec<Plane>,
    pub w: f64,
    pub balance_factor: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub frames: Vec<FrameRecord>,
    pub iterations: Vec<IterationRow>,
}

pub struct ControllerCore {
    pub config: ControllerConfig,
    scene: Arc<Scene>,
    pub q: Vec<Dof>,
    pub q_dot: Vec<Dof>,
    pub planes: Vec<Plane>,
    pub timestep: TimestepController,
    balancer: Option<Balancer>,
    frame: u64,
    attempt: u32,
    k: u32,
    forced: bool,
    layout: Option<PartitionLayout>,
    pub transcript: Transcript,
}

fn protocol(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::Protocol(msg.into())
}

impl ControllerCore {
    pub fn new(scene: Arc<Scene>, config: ControllerConfig) -> Result<Self> {
        scene.validate()?;
        if config.n_workers == 0 || config.n_workers > 64 {
            return Err(protocol(format!(
                "worker count {} outside 1..=64",
                config.n_workers
            )));
        }
        if scene.planes.len() + 1 != config.n_workers {
            return Err(protocol(format!(
                "{} planes cannot split the scene among {} workers",
                scene.planes.len(),
                config.n_workers
            )));
        }
        let balancer = config.balancer.map(|p| Balancer::new(p, config.n_workers));
        Ok(Self {
            q: scene.configs(),
            q_dot: scene.velocities(),
            planes: scene.planes.clone(),
            timestep: TimestepController::new(scene.params.h),
            balancer,
            frame: 0,
            attempt: 0,
            k: 0,
            forced: false,
            layout: None,
            transcript: Transcript::default(),
            config,
            scene,
        })
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn done(&self) -> bool {
        self.frame as usize >= self.config.frames
    }

    pub fn layout(&self) -> Option<&PartitionLayout> {
        self.layout.as_ref()
    }

    /// Partitions the current state and builds each worker's frame start.
    pub fn begin_frame(&mut self) -> Result<Vec<FrameStart>> {
        let mut bodies = self.scene.bodies.clone();
        for (b, (q, v)) in bodies.iter_mut().zip(self.q.iter().zip(&self.q_dot)) {
            b.q = *q;
            b.q_dot = *v;
        }
        let h = self.timestep.h;
        let layout = partition_scene(
            &bodies,
            &self.planes,
            h,
            self.scene.w_min,
            self.scene.params.d_hat,
        )?;
        let starts = (0..self.config.n_workers)
            .map(|i| FrameStart {
                frame: self.frame,
                attempt: self.attempt,
                h,
                w: layout.w,
                planes: self.planes.clone(),
                holders: layout.holders.clone(),
                states: layout
                    .held_by(i)
                    .into_iter()
                    .filter(|&b| !bodies[b].is_static)
                    .map(|b| BodyState {
                        id: bodies[b].id,
                        q: self.q[b],
                        q_dot: self.q_dot[b],
                    })
                    .collect(),
            })
            .collect();
        self.layout = Some(layout);
        self.k = 1;
        self.forced = false;
        Ok(starts)
    }

    /// Global stopping check over one round of reports, in worker order.
    pub fn decide(&mut self, reports: &[IterationReport]) -> Result<ControlSignal> {
        if reports.len() != self.config.n_workers {
            return Err(protocol(format!(
                "{} reports for {} workers",
                reports.len(),
                self.config.n_workers
            )));
        }
        for (i, r) in reports.iter().enumerate() {
            if r.worker as usize != i
                || r.frame != self.frame
                || r.attempt != self.attempt
                || r.k != self.k
            {
                return Err(protocol(format!(
                    "stale report from worker {} for {}/{}/{}, expected {}/{}/{}",
                    r.worker, r.frame, r.attempt, r.k, self.frame, self.attempt, self.k
                )));
            }
        }
        let p = &self.scene.params;
        let h = self.timestep.h;
        let dq: Vec<f64> = reports.iter().map(|r| r.dq_inf).collect();
        let r_inf = reports.iter().map(|r| r.r_inf).fold(0.0, f64::max);
        let s_inf = reports.iter().map(|r| r.s_inf).fold(0.0, f64::max);
        let tois: Vec<f64> = reports.iter().map(|r| r.toi).collect();
        let gates_pass = tois.iter().all(|&t| t == 1.0);
        let signal = match check_stopping(&dq, r_inf, s_inf, &tois, h, p.scene_scale, p.theta) {
            ControlDecision::End => Signal::End,
            ControlDecision::Continue if self.k as usize >= self.scene.admm.max_iters => {
                if gates_pass {
                    self.forced = true;
                    log::warn!("frame {} committed at the iteration cap", self.frame);
                    Signal::End
                } else {
                    let h_new = self.timestep.on_failure().map_err(RuntimeError::from)?;
                    log::warn!(
                        "frame {} blocked at the iteration cap, retrying with h = {h_new}",
                        self.frame
                    );
                    Signal::AbortRetry { h: h_new }
                }
            }
            ControlDecision::Continue => Signal::Continue,
        };
        self.transcript.iterations.push(IterationRow {
            frame: self.frame,
            attempt: self.attempt,
            k: self.k,
            h,
            dq_inf: dq,
            r_inf,
            s_inf,
            min_toi: tois.iter().cloned().fold(1.0, f64::min),
            newton_iterations: reports.iter().map(|r| r.newton_iterations).collect(),
            work: reports.iter().map(|r| r.work).collect(),
            contacts: reports.iter().map(|r| r.contacts).sum(),
            candidates: reports.iter().map(|r| r.candidates).sum(),
            t_solve: reports.iter().map(|r| r.t_solve).collect(),
            t_coll: reports.iter().map(|r| r.t_coll).collect(),
            t_sync: reports.iter().map(|r| r.t_sync).collect(),
            decision: signal,
        });
        let sig = ControlSignal {
            frame: self.frame,
            attempt: self.attempt,
            k: self.k,
            signal,
        };
        match signal {
            Signal::Continue => self.k += 1,
            Signal::AbortRetry { .. } => self.attempt += 1,
            Signal::End => {}
        }
        Ok(sig)
    }

    /// Checks replica agreement, stores the merged state and moves the planes.
    pub fn commit(&mut self, commits: &[FrameCommit]) -> Result<(FrameRecord, Vec<BalanceUpdate>)> {
        let layout = self
            .layout
            .take()
            .ok_or_else(|| protocol("commit without an active frame"))?;
        if commits.len() != self.config.n_workers {
            return Err(protocol(format!(
                "{} commits for {} workers",
                commits.len(),
                self.config.n_workers
            )));
        }
        let n = self.scene.bodies.len();
        let mut q: Vec<Option<(Dof, Dof)>> = vec![None; n];
        for (i, c) in commits.iter().enumerate() {
            if c.worker as usize != i || c.frame != self.frame || c.attempt != self.attempt {
                return Err(protocol(format!(
                    "stale commit from worker {} for frame {}/{}",
                    c.worker, c.frame, c.attempt
                )));
            }
            let held: Vec<usize> = layout
                .held_by(i)
                .into_iter()
                .filter(|&b| !layout.is_static[b])
                .collect();
            if held.len() != c.states.len() {
                return Err(protocol(format!(
                    "worker {i} committed {} bodies, holds {}",
                    c.states.len(),
                    held.len()
                )));
            }
            for (&b, s) in held.iter().zip(&c.states) {
                if s.id != layout.body_ids[b] {
                    return Err(protocol(format!(
                        "worker {i} committed {:?} in place of {:?}",
                        s.id, layout.body_ids[b]
                    )));
                }
                match q[b] {
                    None => q[b] = Some((s.q, s.q_dot)),
                    Some((q0, v0)) if q0 == s.q && v0 == s.q_dot => {}
                    Some((q0, _)) => {
                        return Err(Error::ReplicaMismatch {
                            id: s.id,
                            diff: (q0 - s.q).amax(),
                        }
                        .into());
                    }
                }
            }
        }
        for (b, slot) in q.iter().enumerate() {
            match slot {
                Some((qb, vb)) => {
                    self.q[b] = *qb;
                    self.q_dot[b] = *vb;
                }
                None if layout.is_static[b] => {}
                None => {
                    return Err(protocol(format!(
                        "no worker committed body {:?}",
                        layout.body_ids[b]
                    )))
                }
            }
        }
        let times: Vec<f64> = commits
            .iter()
            .map(|c| match self.config.timing {
                TimingSource::WorkUnits => c.stats.work.max(1.0),
                TimingSource::Wall => (c.stats.t_solve + c.stats.t_coll).max(1e-9),
            })
            .collect();
        let record = FrameRecord {
            frame: self.frame,
            h: self.timestep.h,
            attempts: self.attempt + 1,
            iterations: self.k,
            forced: self.forced,
            q: self.q.clone(),
            q_dot: self.q_dot.clone(),
            workers: commits.iter().map(|c| c.stats).collect(),
            planes: self.planes.clone(),
            w: layout.w,
            balance_factor: balance_factor(&times),
        };
        let mut updates = Vec::new();
        let min_gap = self.widest_extent() + 2.0 * layout.w;
        if let Some(bal) = self.balancer.as_mut() {
            bal.observe(&times)?;
            let shifts = bal.rebalance(&mut self.planes, layout.w, min_gap)?;
            updates = shifts
                .into_iter()
                .enumerate()
                .map(|(i, dp)| BalanceUpdate {
                    frame: self.frame,
                    interface: i as u32,
                    dp,
                })
                .collect();
        }
        self.timestep.on_success();
        self.frame += 1;
        self.attempt = 0;
        self.k = 0;
        self.transcript.frames.push(record.clone());
        Ok((record, updates))
    }

    fn widest_extent(&self) -> f64 {
        let Some(p) = self.planes.first() else {
            return 0.0;
        };
        self.scene
            .bodies
            .iter()
            .zip(&self.q)
            .filter(|(b, _)| !b.is_static)
            .map(|(b, q)| {
                let (lo, hi) = p.project(
                    &Aabb::from_points(&b.world_vertices(q)).inflate(self.scene.params.d_hat),
                );
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}
