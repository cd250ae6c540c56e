//! Ways to run a controller and its workers: threads over a transport, or
//! all roles interleaved on the calling thread.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dabd_core::body::Dof;
use dabd_core::scene::Scene;

use crate::controller::{ControllerConfig, ControllerCore, Transcript};
use crate::error::{Result, RuntimeError};
use crate::message::{FrameCommit, IterationReport, Message, Signal};
use crate::transport::{InProcTransport, Peer, TcpTransport, Transport, DEFAULT_TIMEOUT};
use crate::worker::{run_worker, Outcome, WorkerCore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    Tcp,
}

fn recv_report<T: Transport>(t: &mut T, i: usize) -> Result<IterationReport> {
    match t.recv(Peer::Worker(i))? {
        Message::IterationReport(r) => Ok(r),
        Message::Shutdown { reason } => Err(RuntimeError::Aborted(reason)),
        other => Err(RuntimeError::Protocol(format!(
            "expected report from worker {i}, got {}",
            other.kind()
        ))),
    }
}

fn recv_commit<T: Transport>(t: &mut T, i: usize) -> Result<FrameCommit> {
    match t.recv(Peer::Worker(i))? {
        Message::FrameCommit(c) => Ok(c),
        Message::Shutdown { reason } => Err(RuntimeError::Aborted(reason)),
        other => Err(RuntimeError::Protocol(format!(
            "expected commit from worker {i}, got {}",
            other.kind()
        ))),
    }
}

fn broadcast<T: Transport>(t: &mut T, n: usize, msg: &Message) -> Result<()> {
    (0..n).try_for_each(|i| t.send(Peer::Worker(i), msg))
}

fn drive<T: Transport>(ctrl: &mut ControllerCore, t: &mut T) -> Result<()> {
    let n = ctrl.config.n_workers;
    while !ctrl.done() {
        let starts = ctrl.begin_frame()?;
        for (i, fs) in starts.into_iter().enumerate() {
            t.send(Peer::Worker(i), &Message::FrameStart(fs))?;
        }
        loop {
            let reports = (0..n)
                .map(|i| recv_report(t, i))
                .collect::<Result<Vec<_>>>()?;
            let sig = ctrl.decide(&reports)?;
            broadcast(t, n, &Message::ControlSignal(sig))?;
            match sig.signal {
                Signal::Continue => {}
                Signal::AbortRetry { .. } => break,
                Signal::End => {
                    let commits = (0..n)
                        .map(|i| recv_commit(t, i))
                        .collect::<Result<Vec<_>>>()?;
                    let (_, updates) = ctrl.commit(&commits)?;
                    for u in updates {
                        broadcast(t, n, &Message::BalanceUpdate(u))?;
                    }
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Runs the controller loop over `t`, shutting workers down afterwards.
pub fn run_controller<T: Transport>(ctrl: &mut ControllerCore, t: &mut T) -> Result<()> {
    let out = drive(ctrl, t);
    let reason = match &out {
        Ok(()) => "run complete".to_string(),
        Err(e) => format!("controller: {e}"),
    };
    let _ = broadcast(t, ctrl.config.n_workers, &Message::Shutdown { reason });
    out
}

fn join_workers(handles: Vec<thread::JoinHandle<Result<u64>>>) -> Result<()> {
    let mut first = Ok(());
    for h in handles {
        let r = h
            .join()
            .map_err(|_| RuntimeError::Aborted("worker thread panicked".into()))?;
        if let (Ok(()), Err(e)) = (&first, r) {
            first = Err(e);
        }
    }
    first
}

/// Controller on the calling thread and one thread per worker.
pub fn run_threaded(
    scene: Arc<Scene>,
    config: ControllerConfig,
    kind: TransportKind,
) -> Result<Transcript> {
    run_threaded_with_timeout(scene, config, kind, DEFAULT_TIMEOUT)
}

pub fn run_threaded_with_timeout(
    scene: Arc<Scene>,
    config: ControllerConfig,
    kind: TransportKind,
    timeout: Duration,
) -> Result<Transcript> {
    let n = config.n_workers;
    let mut ctrl = ControllerCore::new(Arc::clone(&scene), config)?;
    let cores = (0..n)
        .map(|i| WorkerCore::new(i, n, Arc::clone(&scene)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = match kind {
        TransportKind::InProc => {
            let mut ends = InProcTransport::mesh(n).into_iter();
            let mut ctrl_end = ends.next().expect("controller endpoint");
            ctrl_end.timeout = timeout;
            let handles: Vec<_> = cores
                .into_iter()
                .zip(ends)
                .map(|(mut core, mut t)| {
                    t.timeout = timeout;
                    thread::spawn(move || run_worker(&mut core, &mut t))
                })
                .collect();
            let out = run_controller(&mut ctrl, &mut ctrl_end);
            drop(ctrl_end);
            (out, join_workers(handles))
        }
        TransportKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?.to_string();
            let handles: Vec<_> = cores
                .into_iter()
                .map(|mut core| {
                    let addr = addr.clone();
                    thread::spawn(move || {
                        let mut t =
                            TcpTransport::worker(core.id, n, &addr, "127.0.0.1:0", timeout)?;
                        run_worker(&mut core, &mut t)
                    })
                })
                .collect();
            let out = TcpTransport::controller(&listener, n, timeout)
                .and_then(|mut t| run_controller(&mut ctrl, &mut t));
            (out, join_workers(handles))
        }
    };
    match outcome {
        (Err(e), _) | (Ok(()), Err(e)) => Err(e),
        (Ok(()), Ok(())) => Ok(ctrl.transcript),
    }
}

/// Controller over TCP, waiting for `config.n_workers` external workers on `listen`.
pub fn serve_controller(
    scene: Arc<Scene>,
    config: ControllerConfig,
    listen: &str,
) -> Result<Transcript> {
    let listener = TcpListener::bind(listen)?;
    log::info!("controller listening on {}", listener.local_addr()?);
    let n = config.n_workers;
    let mut ctrl = ControllerCore::new(scene, config)?;
    let mut t = TcpTransport::controller(&listener, n, DEFAULT_TIMEOUT)?;
    run_controller(&mut ctrl, &mut t)?;
    Ok(ctrl.transcript)
}

/// One worker connecting to a remote controller.
pub fn serve_worker(
    scene: Arc<Scene>,
    id: usize,
    n: usize,
    controller: &str,
    listen: &str,
) -> Result<u64> {
    let mut core = WorkerCore::new(id, n, scene)?;
    let mut t = TcpTransport::worker(id, n, controller, listen, DEFAULT_TIMEOUT)?;
    run_worker(&mut core, &mut t)
}

/// State seen after one consensus round.
pub struct IterationView<'a> {
    pub frame: u64,
    pub attempt: u32,
    pub k: u32,
    pub h: f64,
    /// Start-of-frame state of every body.
    pub q_start: &'a [Dof],
    pub q_dot_start: &'a [Dof],
    /// Candidate global state: internal bodies at their worker's iterate,
    /// shared bodies at their consensus value.
    pub estimate: &'a [Dof],
}

/// Runs every role on the calling thread, in worker order, exchanging the
/// same messages a threaded run would.
pub fn run_sequential(
    scene: Arc<Scene>,
    config: ControllerConfig,
    mut observer: Option<&mut dyn FnMut(&IterationView<'_>)>,
) -> Result<Transcript> {
    let n = config.n_workers;
    let mut ctrl = ControllerCore::new(Arc::clone(&scene), config)?;
    let mut workers = (0..n)
        .map(|i| WorkerCore::new(i, n, Arc::clone(&scene)))
        .collect::<Result<Vec<_>>>()?;
    while !ctrl.done() {
        let q_start = ctrl.q.clone();
        let q_dot_start = ctrl.q_dot.clone();
        let starts = ctrl.begin_frame()?;
        for (w, fs) in workers.iter_mut().zip(&starts) {
            w.start_frame(fs)?;
        }
        let mut requests = vec![Vec::new(); n];
        for w in &workers {
            for j in w.neighbors() {
                requests[j].push(w.fetch_request(j)?);
            }
        }
        let mut replies = vec![Vec::new(); n];
        for (j, reqs) in requests.iter().enumerate() {
            for r in reqs {
                replies[r.from as usize].push(workers[j].answer_fetch(r)?);
            }
        }
        for (w, reps) in workers.iter_mut().zip(&replies) {
            let mut reps = reps.clone();
            reps.sort_by_key(|r| r.from);
            for r in &reps {
                w.accept_fetch(r)?;
            }
        }
        for w in &mut workers {
            w.local_solve()?;
        }
        loop {
            let payloads = workers
                .iter()
                .map(|w| {
                    w.neighbors()
                        .into_iter()
                        .map(|j| w.shared_payload(j))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, list) in payloads.into_iter().enumerate() {
                for (j, p) in workers[i].neighbors().into_iter().zip(list) {
                    debug_assert_eq!(p.from as usize, i);
                    workers[j].accept_shared(p)?;
                }
            }
            let reports = workers
                .iter_mut()
                .map(|w| w.consensus_round())
                .collect::<Result<Vec<_>>>()?;
            if let Some(obs) = observer.as_deref_mut() {
                let mut est = q_start.clone();
                let mut set = vec![false; est.len()];
                for w in &workers {
                    for (b, q, _) in w.estimate() {
                        if !set[b] {
                            est[b] = q;
                            set[b] = true;
                        }
                    }
                }
                let (frame, attempt, k) = workers[0].frame().expect("active frame");
                obs(&IterationView {
                    frame,
                    attempt,
                    k,
                    h: ctrl.timestep.h,
                    q_start: &q_start,
                    q_dot_start: &q_dot_start,
                    estimate: &est,
                });
            }
            let sig = ctrl.decide(&reports)?;
            let mut commits = Vec::new();
            for w in &mut workers {
                match w.apply_signal(&sig)? {
                    Outcome::Commit(c) => commits.push(c),
                    Outcome::Continue | Outcome::Aborted => {}
                }
            }
            match sig.signal {
                Signal::Continue => {}
                Signal::AbortRetry { .. } => break,
                Signal::End => {
                    ctrl.commit(&commits)?;
                    break;
                }
            }
        }
    }
    Ok(ctrl.transcript)
}
