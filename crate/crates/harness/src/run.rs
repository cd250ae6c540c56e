//! Distributed runs with metrics, snapshots and reference comparison.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use dabd_core::body::Dof;
use dabd_core::geometry::intersection_test;
use dabd_core::scene::Scene;
use dabd_runtime::driver::{run_sequential, run_threaded, IterationView, TransportKind};
use dabd_runtime::{ControllerConfig, Transcript};
use serde::{Deserialize, Serialize};

use crate::config::{PartitionConfig, SceneConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{mse_to_reference, records, write_csv, MetricsRecord};
use crate::reference::{reference_step, run_reference};
use crate::snapshot::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every role on the calling thread; enables per-iteration MSE.
    Sequential,
    InProc,
    Tcp,
}

impl std::str::FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Mode::Sequential),
            "inproc" => Ok(Mode::InProc),
            "tcp" => Ok(Mode::Tcp),
            other => Err(HarnessError::Config(format!("unknown transport {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: Mode,
    /// Reference step per frame from the committed start.
    pub commit_mse: bool,
    /// Reference comparison after every ADMM iteration (sequential mode only).
    pub iteration_mse: bool,
    /// Intersection test on every committed state.
    pub audit: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::InProc,
            commit_mse: false,
            iteration_mse: false,
            audit: false,
        }
    }
}

/// Aggregates of one run, written to `summary.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scene: String,
    pub workers: usize,
    pub frames: usize,
    /// ADMM iterations per committed frame, aborted attempts included.
    pub mean_admm_iterations: f64,
    pub max_admm_iterations: u32,
    pub forced_frames: usize,
    pub retried_frames: usize,
    pub min_h: f64,
    pub mean_newton_iterations: f64,
    /// Mean over frames of the largest per-worker work (Newton iterations × bodies).
    pub mean_max_worker_work: f64,
    pub max_commit_mse: Option<f64>,
    pub mean_commit_mse: Option<f64>,
    pub intersecting_frames: Option<usize>,
    pub mean_balance_factor: f64,
}

pub struct RunOutput {
    pub scene: Arc<Scene>,
    pub transcript: Transcript,
    pub records: Vec<MetricsRecord>,
    /// MSE of each committed frame against a reference step from the same start.
    pub commit_mse: Vec<f64>,
    /// Per-iteration MSE by `(frame, attempt, k)`.
    pub iteration_mse: HashMap<(u64, u32, u32), f64>,
    pub intersecting: Vec<u64>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn snapshots(&self) -> Vec<Snapshot> {
        self.transcript
            .frames
            .iter()
            .map(|f| Snapshot {
                frame: f.frame,
                q: f.q.clone(),
                q_dot: f.q_dot.clone(),
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(
            std::fs::File::create(dir.join("metrics.csv"))?,
            &self.records,
        )?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary)?,
        )?;
        for s in self.snapshots() {
            s.write(dir)?;
        }
        Ok(())
    }
}

/// Replaces the partition with `n − 1` vertical planes evenly splitting the
/// horizontal extent of the dynamic bodies.
pub fn repartition(config: &mut SceneConfig, n: usize) -> Result<()> {
    if config.workers() == n {
        return Ok(());
    }
    let bodies = config.build_bodies()?;
    let xs = bodies
        .iter()
        .filter(|b| !b.is_static)
        .flat_map(|b| b.world_vertices(&b.q))
        .map(|p| p.x);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    config.partition = PartitionConfig::slabs(n, lo, hi, config.partition.w_min);
    Ok(())
}

fn start_states(scene: &Scene, t: &Transcript, frame: usize) -> (Vec<Dof>, Vec<Dof>) {
    match frame {
        0 => (scene.configs(), scene.velocities()),
        f => (t.frames[f - 1].q.clone(), t.frames[f - 1].q_dot.clone()),
    }
}

pub fn run_distributed(config: &SceneConfig, opts: RunOptions) -> Result<RunOutput> {
    let scene = Arc::new(config.build()?);
    let n = config.workers();
    let mut cc = ControllerConfig::new(n, config.frames);
    cc.balancer = config.balancer.as_ref().and_then(|b| b.params());
    let mut iteration_mse = HashMap::new();
    let transcript = match opts.mode {
        Mode::Sequential if opts.iteration_mse => {
            let mut cache: HashMap<(u64, u32), Vec<Dof>> = HashMap::new();
            let mut failure = None;
            let mut obs = |v: &IterationView<'_>| {
                if failure.is_some() {
                    return;
                }
                let key = (v.frame, v.attempt);
                if !cache.contains_key(&key) {
                    match reference_step(&scene, v.q_start, v.q_dot_start, v.h) {
                        Ok((q, _, _)) => {
                            cache.insert(key, q);
                        }
                        Err(e) => {
                            failure = Some(e);
                            return;
                        }
                    }
                }
                if let Ok(m) = mse_to_reference(v.estimate, &cache[&key]) {
                    iteration_mse.insert((v.frame, v.attempt, v.k), m);
                }
            };
            let t = run_sequential(Arc::clone(&scene), cc, Some(&mut obs))?;
            if let Some(e) = failure {
                return Err(e);
            }
            t
        }
        Mode::Sequential => run_sequential(Arc::clone(&scene), cc, None)?,
        Mode::InProc => run_threaded(Arc::clone(&scene), cc, TransportKind::InProc)?,
        Mode::Tcp => run_threaded(Arc::clone(&scene), cc, TransportKind::Tcp)?,
    };
    let mut commit_mse = Vec::new();
    if opts.commit_mse {
        for (i, f) in transcript.frames.iter().enumerate() {
            let (q0, v0) = start_states(&scene, &transcript, i);
            let (q_ref, _, _) = reference_step(&scene, &q0, &v0, f.h)?;
            commit_mse.push(mse_to_reference(&f.q, &q_ref)?);
        }
    }
    let intersecting: Vec<u64> = if opts.audit {
        transcript
            .frames
            .iter()
            .filter(|f| intersection_test(&scene.bodies, &f.q))
            .map(|f| f.frame)
            .collect()
    } else {
        Vec::new()
    };
    let mut mse_by_row = iteration_mse.clone();
    for (f, m) in transcript.frames.iter().zip(&commit_mse) {
        mse_by_row
            .entry((f.frame, f.attempts - 1, f.iterations))
            .or_insert(*m);
    }
    let records = records(&transcript, &mse_by_row);
    let summary = summarize(
        &config.name,
        n,
        &transcript,
        &commit_mse,
        opts.audit.then_some(intersecting.len()),
    );
    Ok(RunOutput {
        scene,
        transcript,
        records,
        commit_mse,
        iteration_mse,
        intersecting,
        summary,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(
    name: &str,
    workers: usize,
    t: &Transcript,
    commit_mse: &[f64],
    intersecting_frames: Option<usize>,
) -> RunSummary {
    let frames = t.frames.len();
    let per_frame = |f: u64| t.iterations.iter().filter(|r| r.frame == f).count() as f64;
    RunSummary {
        scene: name.to_string(),
        workers,
        frames,
        mean_admm_iterations: mean(t.frames.iter().map(|f| per_frame(f.frame))),
        max_admm_iterations: t.frames.iter().map(|f| f.iterations).max().unwrap_or(0),
        forced_frames: t.frames.iter().filter(|f| f.forced).count(),
        retried_frames: t.frames.iter().filter(|f| f.attempts > 1).count(),
        min_h: t.frames.iter().map(|f| f.h).fold(f64::INFINITY, f64::min),
        mean_newton_iterations: mean(
            t.frames
                .iter()
                .map(|f| f.workers.iter().map(|w| w.newton_iterations as f64).sum()),
        ),
        mean_max_worker_work: mean(
            t.frames
                .iter()
                .map(|f| f.workers.iter().map(|w| w.work).fold(0.0, f64::max)),
        ),
        max_commit_mse: (!commit_mse.is_empty())
            .then(|| commit_mse.iter().cloned().fold(0.0, f64::max)),
        mean_commit_mse: (!commit_mse.is_empty()).then(|| mean(commit_mse.iter().cloned())),
        intersecting_frames,
        mean_balance_factor: mean(t.frames.iter().map(|f| f.balance_factor)),
    }
}

/// Reference trajectory written in the same layout as a distributed run.
pub fn write_reference(config: &SceneConfig, dir: &Path) -> Result<Vec<Snapshot>> {
    let scene = config.build()?;
    let traj = run_reference(&scene, config.frames)?;
    std::fs::create_dir_all(dir)?;
    let snaps: Vec<Snapshot> = traj
        .into_iter()
        .map(|f| Snapshot {
            frame: f.frame as u64,
            q: f.q,
            q_dot: f.q_dot,
        })
        .collect();
    for s in &snaps {
        s.write(dir)?;
    }
    Ok(snaps)
}
