use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dabd_harness::experiments::{run_experiment, Experiment, ExperimentOptions};
use dabd_harness::run::{repartition, run_distributed, write_reference, Mode, RunOptions};
use dabd_harness::{scenarios, SceneConfig};

#[derive(Parser)]
#[command(name = "dabd", about = "Distributed affine-body contact simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Distributed run of a scene file.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// inproc, tcp or sequential.
        #[arg(long, default_value = "inproc")]
        transport: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Compare every committed frame with a reference step.
        #[arg(long)]
        mse: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Single-domain reference trajectory of a scene file.
    Reference {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Writes a built-in scenario as a scene file.
    Scenario {
        /// funnel, drop-grid, density-sweep, blocked-merge or heterogeneous.
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    Experiment {
        /// beta-sweep, ablation, scaling or audit.
        which: Experiment,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(path: &PathBuf, o: &Overrides) -> anyhow::Result<SceneConfig> {
    let mut c = SceneConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(f) = o.frames {
        c.frames = f;
    }
    if let Some(t) = o.theta {
        c.sim.theta = t;
    }
    Ok(c)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate {
            scene,
            workers,
            transport,
            out,
            mse,
            overrides,
        } => {
            let mut c = load(&scene, &overrides)?;
            if let Some(n) = workers {
                repartition(&mut c, n)?;
            }
            let opts = RunOptions {
                mode: transport,
                commit_mse: mse,
                iteration_mse: mse,
                audit: true,
            };
            let run = run_distributed(&c, opts)?;
            run.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
        }
        Command::Reference {
            scene,
            out,
            overrides,
        } => {
            let c = load(&scene, &overrides)?;
            let snaps = write_reference(&c, &out)?;
            println!("wrote {} frames to {}", snaps.len(), out.display());
        }
        Command::Scenario { name, out } => {
            let c = scenarios::by_name(&name)?;
            std::fs::write(&out, c.to_json())?;
        }
        Command::Experiment {
            which,
            out,
            overrides,
        } => {
            let mut opts = ExperimentOptions {
                theta: overrides.theta,
                seed: overrides.seed,
                ..Default::default()
            };
            if let Some(f) = overrides.frames {
                opts.frames = f;
            }
            let v = run_experiment(which, &opts, &out)?;
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
}
