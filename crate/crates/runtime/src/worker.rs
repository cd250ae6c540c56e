//! One worker's side of the consensus loop, independent of how messages travel.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use dabd_core::body::{gravity_force, predicted_position, AffineBody, BodyId, Dof};
use dabd_core::consensus::{
    adapt_rho, consensus_update, dual_update, finalize_merge, init_rho, merge_ccd_gate,
    rescale_dual, warm_start,
};
use dabd_core::scene::{predict, Scene};
use dabd_core::solver::{newton_solve, Anchor, LocalObjective, NewtonReport};
use dabd_core::Error;

use crate::error::{Result, RuntimeError};
use crate::message::{
    BodyState, ControlSignal, FetchSharedReply, FetchSharedRequest, FetchedBody, FrameCommit,
    FrameStart, IterShared, IterationReport, Message, SharedEntry, Signal, WorkerStats,
};
use crate::transport::{Peer, Transport};

#[derive(Debug, Clone)]
struct SharedSlot {
    /// Index into the worker's local body list.
    local: usize,
    holders: u64,
    z: Dof,
    u: Dof,
    rho: f64,
    rho0: f64,
    r_inf: f64,
    s_inf: f64,
}

#[derive(Debug, Clone)]
struct FrameState {
    frame: u64,
    attempt: u32,
    h: f64,
    k: u32,
    /// Scene indices of the held bodies, ascending.
    global: Vec<usize>,
    bodies: Vec<AffineBody>,
    holders: Vec<u64>,
    q_start: Vec<Dof>,
    q_tilde: Vec<Dof>,
    q: Vec<Dof>,
    bias: Vec<Dof>,
    shared: Vec<SharedSlot>,
    neighbors: Vec<usize>,
    inbox: BTreeMap<usize, IterShared>,
    fetched: BTreeSet<usize>,
    dynamic: usize,
    last: NewtonReport,
    gate_toi: f64,
    stats: WorkerStats,
    sync_since_report: f64,
}

/// What the worker does after a control signal.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Continue,
    Commit(FrameCommit),
    Aborted,
}

pub struct WorkerCore {
    pub id: usize,
    pub n_workers: usize,
    scene: Arc<Scene>,
    state: Option<FrameState>,
}

fn protocol(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::Protocol(msg.into())
}

impl WorkerCore {
    pub fn new(id: usize, n_workers: usize, scene: Arc<Scene>) -> Result<Self> {
        if id >= n_workers || n_workers > 64 {
            return Err(protocol(format!(
                "worker {id} outside a cluster of {n_workers}"
            )));
        }
        Ok(Self {
            id,
            n_workers,
            scene,
            state: None,
        })
    }

    fn st(&self) -> Result<&FrameState> {
        self.state
            .as_ref()
            .ok_or_else(|| protocol(format!("worker {} has no active frame", self.id)))
    }

    fn st_mut(&mut self) -> Result<&mut FrameState> {
        let id = self.id;
        self.state
            .as_mut()
            .ok_or_else(|| protocol(format!("worker {id} has no active frame")))
    }

    fn check_counters(&self, frame: u64, attempt: u32, what: &str) -> Result<()> {
        let st = self.st()?;
        if frame != st.frame || attempt != st.attempt {
            return Err(protocol(format!(
                "stale {what}: frame {frame}/{attempt}, expected {}/{}",
                st.frame, st.attempt
            )));
        }
        Ok(())
    }

    pub fn frame(&self) -> Option<(u64, u32, u32)> {
        self.state.as_ref().map(|s| (s.frame, s.attempt, s.k))
    }

    pub fn neighbors(&self) -> Vec<usize> {
        self.state
            .as_ref()
            .map(|s| s.neighbors.clone())
            .unwrap_or_default()
    }

    /// Local body indices held by both this worker and `j`, ascending.
    fn shared_with(st: &FrameState, j: usize) -> Vec<usize> {
        st.shared
            .iter()
            .filter(|s| s.holders & (1 << j) != 0)
            .map(|s| s.local)
            .collect()
    }

    fn slot(st: &FrameState, local: usize) -> &SharedSlot {
        st.shared
            .iter()
            .find(|s| s.local == local)
            .expect("shared slot")
    }

    /// Builds local data, predicted positions and the initial consensus state.
    pub fn start_frame(&mut self, fs: &FrameStart) -> Result<()> {
        let scene = &self.scene;
        if fs.holders.len() != scene.bodies.len() {
            return Err(protocol(format!(
                "holder list has {} entries for {} bodies",
                fs.holders.len(),
                scene.bodies.len()
            )));
        }
        let bit = 1u64 << self.id;
        let global: Vec<usize> = (0..scene.bodies.len())
            .filter(|&b| fs.holders[b] & bit != 0)
            .collect();
        let mut states = fs.states.iter();
        let mut bodies = Vec::with_capacity(global.len());
        for &g in &global {
            let mut b = scene.bodies[g].clone();
            if !b.is_static {
                let s = states
                    .next()
                    .ok_or_else(|| protocol(format!("no state for body {:?}", b.id)))?;
                if s.id != b.id {
                    return Err(protocol(format!(
                        "state for {:?} where {:?} was expected",
                        s.id, b.id
                    )));
                }
                b.q = s.q;
                b.q_dot = s.q_dot;
            }
            bodies.push(b);
        }
        if states.next().is_some() {
            return Err(protocol(
                "frame start carries states for bodies this worker does not hold",
            ));
        }
        let params = &scene.params;
        let q_start: Vec<Dof> = bodies.iter().map(|b| b.q).collect();
        let q_tilde = bodies
            .iter()
            .map(|b| predict(b, &b.q, &b.q_dot, params, fs.h))
            .collect::<dabd_core::Result<Vec<_>>>()?;
        let holders: Vec<u64> = global.iter().map(|&g| fs.holders[g]).collect();

        let mut shared = Vec::new();
        let mut bias = vec![Dof::zeros(); bodies.len()];
        let mut neighbor_mask = 0u64;
        for (l, b) in bodies.iter().enumerate() {
            if b.is_static || holders[l].count_ones() < 2 {
                continue;
            }
            neighbor_mask |= holders[l];
            let rho0 = init_rho(b.mass, scene.adapt.beta)?;
            shared.push(SharedSlot {
                local: l,
                holders: holders[l],
                z: q_tilde[l],
                u: Dof::zeros(),
                rho: rho0,
                rho0,
                r_inf: 0.0,
                s_inf: 0.0,
            });
            for rb in scene
                .replica_bias
                .iter()
                .filter(|rb| rb.body == b.id && fs.frame < rb.until_frame as u64)
            {
                let lowest = holders[l].trailing_zeros() as usize;
                let highest = 63 - holders[l].leading_zeros() as usize;
                let sign = if self.id == lowest {
                    1.0
                } else if self.id == highest {
                    -1.0
                } else {
                    0.0
                };
                bias[l] += gravity_force(&b.mass_matrix, &(rb.force * (sign / b.mass)));
            }
        }
        let neighbors = (0..self.n_workers)
            .filter(|&j| j != self.id && neighbor_mask & (1 << j) != 0)
            .collect();
        let dynamic = bodies.iter().filter(|b| !b.is_static).count();
        self.state = Some(FrameState {
            frame: fs.frame,
            attempt: fs.attempt,
            h: fs.h,
            k: 0,
            global,
            q: q_start.clone(),
            bodies,
            holders,
            q_start,
            q_tilde,
            bias,
            shared,
            neighbors,
            inbox: BTreeMap::new(),
            fetched: BTreeSet::new(),
            dynamic,
            last: NewtonReport::default(),
            gate_toi: 1.0,
            stats: WorkerStats {
                bodies: dynamic as u32,
                ..Default::default()
            },
            sync_since_report: 0.0,
        });
        Ok(())
    }

    pub fn fetch_request(&self, to: usize) -> Result<FetchSharedRequest> {
        let st = self.st()?;
        Ok(FetchSharedRequest {
            frame: st.frame,
            attempt: st.attempt,
            from: self.id as u32,
            to: to as u32,
        })
    }

    /// Frame-start state of every body shared with the requester.
    pub fn answer_fetch(&self, req: &FetchSharedRequest) -> Result<FetchSharedReply> {
        self.check_counters(req.frame, req.attempt, "fetch request")?;
        if req.to as usize != self.id {
            return Err(protocol(format!(
                "fetch request for worker {} reached {}",
                req.to, self.id
            )));
        }
        let st = self.st()?;
        let bodies = Self::shared_with(st, req.from as usize)
            .into_iter()
            .map(|l| {
                let b = &st.bodies[l];
                FetchedBody {
                    id: b.id,
                    mass_matrix: b.mass_matrix,
                    mesh: b.id.0,
                    q: b.q,
                    q_dot: b.q_dot,
                }
            })
            .collect();
        Ok(FetchSharedReply {
            frame: st.frame,
            attempt: st.attempt,
            from: self.id as u32,
            bodies,
        })
    }

    /// Checks a neighbour's view of the shared bodies against the local one.
    pub fn accept_fetch(&mut self, rep: &FetchSharedReply) -> Result<()> {
        self.check_counters(rep.frame, rep.attempt, "fetch reply")?;
        let scene = Arc::clone(&self.scene);
        let params = &scene.params;
        let st = self.st_mut()?;
        let from = rep.from as usize;
        let mine = Self::shared_with(st, from);
        if mine.len() != rep.bodies.len() {
            return Err(protocol(format!(
                "worker {from} shares {} bodies, expected {}",
                rep.bodies.len(),
                mine.len()
            )));
        }
        for (&l, fb) in mine.iter().zip(&rep.bodies) {
            let b = &st.bodies[l];
            if fb.id != b.id || fb.mesh != b.id.0 || fb.mass_matrix != b.mass_matrix {
                return Err(protocol(format!(
                    "body set mismatch with worker {from} at {:?}",
                    fb.id
                )));
            }
            let theirs = if b.is_static {
                fb.q
            } else {
                let f = gravity_force(&fb.mass_matrix, &params.gravity);
                predicted_position(&fb.q, &fb.q_dot, &f, st.h, &fb.mass_matrix)?
            };
            warm_start(b.id, &[st.q_tilde[l], theirs])?;
            if fb.q != b.q || fb.q_dot != b.q_dot {
                let diff = (fb.q - b.q).amax().max((fb.q_dot - b.q_dot).amax());
                return Err(Error::ReplicaMismatch { id: b.id, diff }.into());
            }
        }
        st.fetched.insert(from);
        Ok(())
    }

    /// Local Newton solve against the current consensus anchors.
    pub fn local_solve(&mut self) -> Result<()> {
        let scene = Arc::clone(&self.scene);
        let st = self.st_mut()?;
        if st.fetched.len() != st.neighbors.len() {
            return Err(protocol(
                "local solve before every neighbour answered the fetch",
            ));
        }
        let mut anchors = vec![None; st.bodies.len()];
        for s in &st.shared {
            anchors[s.local] = Some(Anchor {
                z: s.z,
                u: s.u,
                rho: s.rho,
            });
        }
        let obj = LocalObjective::assemble(
            &st.bodies,
            st.q_tilde.clone(),
            st.holders.clone(),
            anchors,
            st.bias.clone(),
            &scene.params,
            st.h,
        )?;
        let tol = scene.params.newton_tolerance(st.h);
        let (q, rep) = newton_solve(&obj, &st.q, scene.params.newton_max_iters, tol)?;
        st.q = q;
        st.k += 1;
        st.stats.solves += 1;
        st.stats.newton_iterations += rep.iterations as u32;
        st.stats.work += (rep.iterations * st.dynamic) as f64;
        st.stats.t_solve += rep.solve_seconds;
        st.stats.t_coll += rep.collision_seconds;
        st.last = rep;
        st.inbox.clear();
        Ok(())
    }

    /// This worker's replicas, duals and penalties for bodies shared with `to`.
    pub fn shared_payload(&self, to: usize) -> Result<IterShared> {
        let st = self.st()?;
        let bodies = Self::shared_with(st, to)
            .into_iter()
            .map(|l| {
                let s = Self::slot(st, l);
                SharedEntry {
                    id: st.bodies[l].id,
                    q: st.q[l],
                    rho: s.rho,
                    u: s.u,
                }
            })
            .collect();
        Ok(IterShared {
            frame: st.frame,
            attempt: st.attempt,
            k: st.k,
            from: self.id as u32,
            bodies,
        })
    }

    pub fn accept_shared(&mut self, msg: IterShared) -> Result<()> {
        self.check_counters(msg.frame, msg.attempt, "shared payload")?;
        let st = self.st_mut()?;
        let from = msg.from as usize;
        if msg.k != st.k {
            return Err(protocol(format!(
                "shared payload for iteration {} during iteration {}",
                msg.k, st.k
            )));
        }
        if !st.neighbors.contains(&from) || st.inbox.contains_key(&from) {
            return Err(protocol(format!(
                "unexpected shared payload from worker {from}"
            )));
        }
        let ids: Vec<BodyId> = Self::shared_with(st, from)
            .iter()
            .map(|&l| st.bodies[l].id)
            .collect();
        let got: Vec<BodyId> = msg.bodies.iter().map(|e| e.id).collect();
        if ids != got {
            return Err(protocol(format!(
                "shared body set with worker {from} differs: {got:?} vs {ids:?}"
            )));
        }
        st.inbox.insert(from, msg);
        Ok(())
    }

    /// Consensus and dual updates, residuals and the merge gate for the
    /// current iteration.
    pub fn consensus_round(&mut self) -> Result<IterationReport> {
        let id = self.id;
        let n = self.n_workers;
        let st = self.st_mut()?;
        if st.inbox.len() != st.neighbors.len() {
            return Err(protocol(format!(
                "worker {id} missing shared payloads for iteration {}",
                st.k
            )));
        }
        let (mut r_all, mut s_all) = (0.0f64, 0.0f64);
        for si in 0..st.shared.len() {
            let slot = &st.shared[si];
            let l = slot.local;
            let bid = st.bodies[l].id;
            let mut reps: Vec<(Dof, Dof, f64)> = Vec::new();
            for w in (0..n).filter(|w| slot.holders & (1 << w) != 0) {
                if w == id {
                    reps.push((st.q[l], slot.u, slot.rho));
                } else {
                    let e = st.inbox[&w]
                        .bodies
                        .iter()
                        .find(|e| e.id == bid)
                        .expect("validated payload");
                    reps.push((e.q, e.u, e.rho));
                }
            }
            let pairs: Vec<(Dof, f64)> = reps.iter().map(|(q, u, rho)| (q + u, *rho)).collect();
            let z_new = consensus_update(&pairs);
            let r = reps
                .iter()
                .map(|(q, _, _)| (q - z_new).amax())
                .fold(0.0, f64::max);
            let s = (z_new - slot.z).amax();
            let slot = &mut st.shared[si];
            slot.u = dual_update(&slot.u, &st.q[l], &z_new);
            slot.z = z_new;
            slot.r_inf = r;
            slot.s_inf = s;
            r_all = r_all.max(r);
            s_all = s_all.max(s);
        }
        let targets = Self::targets(st);
        st.gate_toi = merge_ccd_gate(&st.bodies, &st.q, &targets)?;
        let report = IterationReport {
            frame: st.frame,
            attempt: st.attempt,
            k: st.k,
            worker: id as u32,
            dq_inf: st.last.final_direction_inf,
            r_inf: r_all,
            s_inf: s_all,
            toi: st.gate_toi,
            newton_iterations: st.last.iterations as u32,
            work: (st.last.iterations * st.dynamic) as f64,
            contacts: st.last.active_contacts as u32,
            candidates: st.last.candidates as u32,
            t_solve: st.last.solve_seconds,
            t_coll: st.last.collision_seconds,
            t_sync: st.sync_since_report,
        };
        st.sync_since_report = 0.0;
        Ok(report)
    }

    fn targets(st: &FrameState) -> Vec<Option<Dof>> {
        let mut t = vec![None; st.bodies.len()];
        for s in &st.shared {
            t[s.local] = Some(s.z);
        }
        t
    }

    /// Handles the controller's decision for the current iteration.
    pub fn apply_signal(&mut self, sig: &ControlSignal) -> Result<Outcome> {
        self.check_counters(sig.frame, sig.attempt, "control signal")?;
        let st = self.st()?;
        if sig.k != st.k {
            return Err(protocol(format!(
                "signal for iteration {} during iteration {}",
                sig.k, st.k
            )));
        }
        match sig.signal {
            Signal::End => {
                let st = self.state.take().expect("active frame");
                let targets = Self::targets(&st);
                let (q_final, q_dot) =
                    finalize_merge(&st.q, &targets, &st.q_start, st.h, st.gate_toi)?;
                let states = (0..st.bodies.len())
                    .filter(|&l| !st.bodies[l].is_static)
                    .map(|l| BodyState {
                        id: st.bodies[l].id,
                        q: q_final[l],
                        q_dot: q_dot[l],
                    })
                    .collect();
                Ok(Outcome::Commit(FrameCommit {
                    frame: st.frame,
                    attempt: st.attempt,
                    worker: self.id as u32,
                    states,
                    stats: st.stats,
                }))
            }
            Signal::AbortRetry { .. } => {
                self.state = None;
                Ok(Outcome::Aborted)
            }
            Signal::Continue => {
                let adapt = self.scene.adapt;
                let st = self.st_mut()?;
                if adapt.adaptive {
                    for s in &mut st.shared {
                        let next = adapt_rho(s.rho, s.r_inf, s.s_inf, &adapt, s.rho0);
                        if next != s.rho {
                            s.u = rescale_dual(&s.u, s.rho, next);
                            s.rho = next;
                        }
                    }
                }
                self.local_solve()?;
                Ok(Outcome::Continue)
            }
        }
    }

    pub fn add_sync_time(&mut self, seconds: f64) {
        if let Some(st) = self.state.as_mut() {
            st.sync_since_report += seconds;
            st.stats.t_sync += seconds;
        }
    }

    /// Candidate global state: own iterate for internal bodies, the
    /// consensus value for shared ones. Pairs of scene index and state.
    pub fn estimate(&self) -> Vec<(usize, Dof, bool)> {
        let Some(st) = self.state.as_ref() else {
            return Vec::new();
        };
        (0..st.bodies.len())
            .filter(|&l| !st.bodies[l].is_static)
            .map(|l| match st.shared.iter().find(|s| s.local == l) {
                Some(s) => (st.global[l], s.z, true),
                None => (st.global[l], st.q[l], false),
            })
            .collect()
    }

    /// Current penalties of the shared bodies, by body id.
    pub fn penalties(&self) -> Vec<(BodyId, f64)> {
        self.state
            .as_ref()
            .map(|st| {
                st.shared
                    .iter()
                    .map(|s| (st.bodies[s.local].id, s.rho))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Frame-start fetch: request, answer, then verify, in that order per neighbour.
fn fetch_phase<T: Transport>(core: &mut WorkerCore, t: &mut T) -> Result<()> {
    let neighbors = core.neighbors();
    for &j in &neighbors {
        t.send(
            Peer::Worker(j),
            &Message::FetchSharedRequest(core.fetch_request(j)?),
        )?;
    }
    for &j in &neighbors {
        let req = match timed_recv(core, t, Peer::Worker(j))? {
            Message::FetchSharedRequest(r) => r,
            other => {
                return Err(protocol(format!(
                    "expected fetch request from worker {j}, got {}",
                    other.kind()
                )))
            }
        };
        t.send(
            Peer::Worker(j),
            &Message::FetchSharedReply(core.answer_fetch(&req)?),
        )?;
    }
    for &j in &neighbors {
        match timed_recv(core, t, Peer::Worker(j))? {
            Message::FetchSharedReply(r) => core.accept_fetch(&r)?,
            other => {
                return Err(protocol(format!(
                    "expected fetch reply from worker {j}, got {}",
                    other.kind()
                )))
            }
        }
    }
    Ok(())
}

fn timed_recv<T: Transport>(core: &mut WorkerCore, t: &mut T, from: Peer) -> Result<Message> {
    let t0 = Instant::now();
    let m = t.recv(from)?;
    core.add_sync_time(t0.elapsed().as_secs_f64());
    Ok(m)
}

fn exchange_phase<T: Transport>(core: &mut WorkerCore, t: &mut T) -> Result<()> {
    let neighbors = core.neighbors();
    for &j in &neighbors {
        t.send(
            Peer::Worker(j),
            &Message::IterShared(core.shared_payload(j)?),
        )?;
    }
    for &j in &neighbors {
        match timed_recv(core, t, Peer::Worker(j))? {
            Message::IterShared(s) => core.accept_shared(s)?,
            other => {
                return Err(protocol(format!(
                    "expected shared payload from worker {j}, got {}",
                    other.kind()
                )))
            }
        }
    }
    Ok(())
}

fn serve<T: Transport>(core: &mut WorkerCore, t: &mut T) -> Result<u64> {
    let mut committed = 0;
    loop {
        let fs = match t.recv(Peer::Controller)? {
            Message::FrameStart(fs) => fs,
            Message::BalanceUpdate(b) => {
                log::debug!(
                    "worker {}: interface {} moved by {}",
                    core.id,
                    b.interface,
                    b.dp
                );
                continue;
            }
            Message::Shutdown { .. } => return Ok(committed),
            other => {
                return Err(protocol(format!(
                    "expected frame start, got {}",
                    other.kind()
                )))
            }
        };
        core.start_frame(&fs)?;
        fetch_phase(core, t)?;
        core.local_solve()?;
        loop {
            exchange_phase(core, t)?;
            let report = core.consensus_round()?;
            t.send(Peer::Controller, &Message::IterationReport(report))?;
            let sig = match timed_recv(core, t, Peer::Controller)? {
                Message::ControlSignal(s) => s,
                Message::Shutdown { reason } => return Err(RuntimeError::Aborted(reason)),
                other => {
                    return Err(protocol(format!(
                        "expected control signal, got {}",
                        other.kind()
                    )))
                }
            };
            match core.apply_signal(&sig)? {
                Outcome::Continue => {}
                Outcome::Commit(c) => {
                    t.send(Peer::Controller, &Message::FrameCommit(c))?;
                    committed += 1;
                    break;
                }
                Outcome::Aborted => break,
            }
        }
    }
}

/// Serves frames until the controller shuts the run down. On failure the
/// controller is told why before the error is returned.
pub fn run_worker<T: Transport>(core: &mut WorkerCore, t: &mut T) -> Result<u64> {
    let out = serve(core, t);
    if let Err(e) = &out {
        log::error!("worker {} failed: {e}", core.id);
        let _ = t.send(
            Peer::Controller,
            &Message::Shutdown {
                reason: format!("worker {}: {e}", core.id),
            },
        );
    }
    out
}
