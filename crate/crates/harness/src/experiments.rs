//! Experiment drivers: penalty sweep, adaptation ablation, scaling and
//! penetration audit. Each returns its table and can write it as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SceneConfig;
use crate::error::{HarnessError, Result};
use crate::run::{run_distributed, Mode, RunOptions, RunSummary};
use crate::scenarios::{self, BETA_LEVELS, DENSITY_LEVELS, SCENARIO_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    BetaSweep,
    Ablation,
    Scaling,
    Audit,
}

impl std::str::FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta-sweep" => Ok(Self::BetaSweep),
            "ablation" => Ok(Self::Ablation),
            "scaling" => Ok(Self::Scaling),
            "audit" => Ok(Self::Audit),
            other => Err(HarnessError::Config(format!(
                "unknown experiment {other:?}"
            ))),
        }
    }
}

/// Shared knobs of every driver.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub frames: usize,
    pub theta: Option<f64>,
    pub seed: Option<u64>,
    pub mode: Mode,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            frames: 20,
            theta: None,
            seed: None,
            mode: Mode::Sequential,
        }
    }
}

impl ExperimentOptions {
    fn apply(&self, c: &mut SceneConfig) {
        c.frames = self.frames;
        if let Some(t) = self.theta {
            c.sim.theta = t;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
    }

    fn run(&self, mut c: SceneConfig, audit: bool) -> Result<RunSummary> {
        self.apply(&mut c);
        log::info!("running {} ({} frames)", c.name, c.frames);
        let out = run_distributed(
            &c,
            RunOptions {
                mode: self.mode,
                audit,
                ..RunOptions::default()
            },
        )?;
        Ok(out.summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub density: f64,
    pub beta: f64,
    pub mean_admm_iterations: f64,
}

pub fn beta_sweep(opts: &ExperimentOptions) -> Result<Vec<BetaRow>> {
    let mut rows = Vec::new();
    for (c, density) in scenarios::density_sweep().into_iter().zip(DENSITY_LEVELS) {
        for beta in BETA_LEVELS {
            let mut c = c.clone();
            c.adapt.beta = beta;
            c.name = format!("{}-beta-{beta}", c.name);
            let s = opts.run(c, false)?;
            rows.push(BetaRow {
                density,
                beta,
                mean_admm_iterations: s.mean_admm_iterations,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub density: f64,
    pub fixed: f64,
    pub adaptive: f64,
    /// `1 − adaptive/fixed`.
    pub reduction: f64,
}

pub fn ablation(opts: &ExperimentOptions) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (c, density) in scenarios::density_sweep().into_iter().zip(DENSITY_LEVELS) {
        let mut runs = [0.0; 2];
        for (slot, adaptive) in runs.iter_mut().zip([false, true]) {
            let mut c = c.clone();
            c.adapt.adaptive = adaptive;
            *slot = opts.run(c, false)?.mean_admm_iterations;
        }
        let [fixed, adaptive] = runs;
        rows.push(AblationRow {
            density,
            fixed,
            adaptive,
            reduction: 1.0 - adaptive / fixed,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub workers: usize,
    pub bodies: usize,
    pub mean_admm_iterations: f64,
    pub mean_newton_iterations: f64,
    pub mean_max_worker_work: f64,
    /// Largest per-worker work relative to the single-worker run.
    pub work_ratio: f64,
    pub t_solve: f64,
    pub t_coll: f64,
    pub t_sync: f64,
    pub t_frame: f64,
}

/// The same `bodies`-body drop grid split over each worker count.
pub fn scaling(
    opts: &ExperimentOptions,
    workers: &[usize],
    bodies_per_slab_at_max: usize,
) -> Result<Vec<ScalingRow>> {
    let n_max = workers.iter().copied().max().unwrap_or(1);
    let base = scenarios::drop_grid(n_max, bodies_per_slab_at_max);
    let mut rows: Vec<ScalingRow> = Vec::new();
    for &n in workers {
        let mut c = base.clone();
        c.name = format!("drop-grid-{n}-of-{n_max}");
        c.partition =
            crate::config::PartitionConfig::slabs(n, 0.0, n_max as f64, c.partition.w_min);
        opts.apply(&mut c);
        let t0 = std::time::Instant::now();
        let out = run_distributed(
            &c,
            RunOptions {
                mode: opts.mode,
                ..RunOptions::default()
            },
        )?;
        let wall = t0.elapsed().as_secs_f64();
        let frames = out.transcript.frames.len().max(1) as f64;
        let per_frame_max = |f: fn(&dabd_runtime::message::WorkerStats) -> f64| {
            out.transcript
                .frames
                .iter()
                .map(|fr| fr.workers.iter().map(f).fold(0.0, f64::max))
                .sum::<f64>()
                / frames
        };
        let s = &out.summary;
        let single = rows
            .iter()
            .find(|r| r.workers == 1)
            .map(|r| r.mean_max_worker_work);
        rows.push(ScalingRow {
            workers: n,
            bodies: out.scene.total_dynamic(),
            mean_admm_iterations: s.mean_admm_iterations,
            mean_newton_iterations: s.mean_newton_iterations,
            mean_max_worker_work: s.mean_max_worker_work,
            work_ratio: single.map_or(1.0, |w| s.mean_max_worker_work / w),
            t_solve: per_frame_max(|w| w.t_solve),
            t_coll: per_frame_max(|w| w.t_coll),
            t_sync: per_frame_max(|w| w.t_sync),
            t_frame: wall / frames,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub scenario: String,
    pub frames: usize,
    pub intersecting_frames: usize,
    pub retried_frames: usize,
    pub forced_frames: usize,
    pub min_h: f64,
}

/// Every scenario generator, with each density level of the sweep.
pub fn audit(opts: &ExperimentOptions) -> Result<Vec<AuditRow>> {
    let mut configs = Vec::new();
    for name in SCENARIO_NAMES {
        if name == "density-sweep" {
            configs.extend(scenarios::density_sweep());
        } else {
            configs.push(scenarios::by_name(name)?);
        }
    }
    let mut rows = Vec::new();
    for c in configs {
        let scenario = c.name.clone();
        let s = opts.run(c, true)?;
        rows.push(AuditRow {
            scenario,
            frames: s.frames,
            intersecting_frames: s.intersecting_frames.unwrap_or(0),
            retried_frames: s.retried_frames,
            forced_frames: s.forced_frames,
            min_h: s.min_h,
        });
    }
    Ok(rows)
}

/// Runs one experiment and writes `summary.json` into `out`.
pub fn run_experiment(
    which: Experiment,
    opts: &ExperimentOptions,
    out: &Path,
) -> Result<serde_json::Value> {
    let value = match which {
        Experiment::BetaSweep => serde_json::to_value(beta_sweep(opts)?)?,
        Experiment::Ablation => serde_json::to_value(ablation(opts)?)?,
        Experiment::Scaling => serde_json::to_value(scaling(opts, &[1, 2, 4], 8)?)?,
        Experiment::Audit => {
            let rows = audit(opts)?;
            if let Some(r) = rows.iter().find(|r| r.intersecting_frames > 0) {
                log::error!(
                    "{} intersects in {} frames",
                    r.scenario,
                    r.intersecting_frames
                );
            }
            serde_json::to_value(rows)?
        }
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&value)?,
    )?;
    Ok(value)
}
