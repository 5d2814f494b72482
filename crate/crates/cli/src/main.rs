use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;

use rom_core::closure::{
    build_dataset, fit_quadratic_ansatz_dataset, ClosureDataset, ClosurePair, QuadraticAnsatz, SplitSpec,
};
use rom_core::fom::{run_case, CaseConfig, SnapshotSet};
use rom_core::metrics::{emit_reports, load_report};
use rom_core::nn::{self, Batch, ClosureNets, OperatorNet, TrainConfig, TrainMode};
use rom_core::operators::{assemble, assemble_for_parameter, BoundarySpec, Dims, ReducedOperatorSet};
use rom_core::pipeline::{run_experiment, subset, Bases, ExperimentConfig};
use rom_core::pod::project;
use rom_core::solver::{
    self, ClosureMode, Context, NetClosure, NetViscosity, NoClosure, QuadraticClosure, RomState, SolverConfig,
};

#[derive(Parser)]
#[command(name = "rom", version, about = "Data-driven closure reduced-order models")]
struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file for the stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full-order surrogate and store a snapshot archive.
    Generate,
    /// Compute velocity, pressure and eddy-viscosity bases.
    Pod {
        #[arg(long)]
        snapshots: PathBuf,
        /// Parameter indices to use (default: all).
        #[arg(long, value_delimiter = ',')]
        params: Vec<usize>,
        /// Leading frames per parameter to use.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Assemble reduced operators.
    Assemble {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        bases: PathBuf,
        /// N_u,N_p,N_nut
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 10.0)]
        tau: f64,
        /// Parameter index to assemble at (deformed families).
        #[arg(long)]
        param: Option<usize>,
    },
    /// Build the closure dataset from two operator sets.
    Extract {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        bases: PathBuf,
        #[arg(long)]
        ops_small: PathBuf,
        #[arg(long)]
        ops_big: PathBuf,
        #[arg(long, value_delimiter = ',')]
        train: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        test: Vec<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train G, M, the coupled pair, or fit the quadratic ansatz.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// G | M | star | quadratic
        #[arg(long)]
        target: String,
        /// Directory holding a pre-trained g/ (star only).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Solve the reduced system for one parameter.
    Solve {
        #[arg(long)]
        ops: PathBuf,
        #[arg(long)]
        nets: PathBuf,
        #[arg(long, default_value = "none")]
        mode: String,
        /// Physical parameter (viscosity) or deformation vector.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Vec<f64>,
        /// Snapshot archive and bases providing the initial state.
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        bases: PathBuf,
        #[arg(long)]
        steady: bool,
    },
    /// Recompute gains and statistics of a report and re-emit its files.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run every stage from one experiment configuration.
    Experiment,
}

fn read_config<T: DeserializeOwned>(path: Option<&Path>) -> Result<Option<T>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Some(serde_json::from_str(&s).with_context(|| format!("parsing {}", p.display()))?))
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
}

fn nearest_group(set: &SnapshotSet, mu: &[f64]) -> Result<usize> {
    let d = |p: &[f64]| p.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..set.params.len())
        .min_by(|&a, &b| d(&set.params[a]).total_cmp(&d(&set.params[b])))
        .ok_or_else(|| anyhow!("snapshot archive has no parameters"))
}

fn run(cli: &Cli) -> Result<()> {
    let out = out_dir(cli)?;
    match &cli.cmd {
        Cmd::Generate => {
            let mut cfg: CaseConfig =
                read_config(cli.config.as_deref())?.ok_or_else(|| anyhow!("generate needs --config"))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let set = run_case(&cfg)?;
            set.save(out)?;
            info!("{} frames written to {}", set.frames.len(), out.display());
        }
        Cmd::Pod { snapshots, params, frames } => {
            let set = SnapshotSet::load(snapshots)?;
            let groups: Vec<usize> = if params.is_empty() { (0..set.params.len()).collect() } else { params.clone() };
            let bases = Bases::compute(&subset(&set, &groups, *frames))?;
            bases.save(out)?;
            info!("ranks u={} p={} nut={}", bases.u.rank(), bases.p.rank(), bases.nut.rank());
        }
        Cmd::Assemble { snapshots, bases, dims, tau, param } => {
            let set = SnapshotSet::load(snapshots)?;
            let b = Bases::load(bases)?;
            let &[nu, np, nnut] = dims.as_slice() else {
                bail!("--dims takes three values N_u,N_p,N_nut");
            };
            let dims = Dims::new(nu, np, nnut);
            let boundary = BoundarySpec::lid(set.lid_velocity, *tau)?;
            let ops = match param {
                Some(k) => {
                    let mu = set.params.get(*k).ok_or_else(|| anyhow!("no parameter {k}"))?;
                    assemble_for_parameter(&b.u, &b.p, &b.nut, &set.grid, mu, &boundary, dims)?
                }
                None if set.is_geometric() => bail!("deformed families need --param"),
                None => assemble(&b.u, &b.p, &b.nut, &set.grid, &boundary, dims, vec![])?,
            };
            ops.save(out, &boundary, 1.0)?;
        }
        Cmd::Extract { snapshots, bases, ops_small, ops_big, train, test, frames } => {
            let set = SnapshotSet::load(snapshots)?;
            let b = Bases::load(bases)?;
            let (small, _, _) = ReducedOperatorSet::load(ops_small)?;
            let (big, _, _) = ReducedOperatorSet::load(ops_big)?;
            let k = big.dims.nu as f64 / small.dims.nu as f64;
            let pair = ClosurePair::new(small, big)?;
            let all: Vec<usize> = (0..set.params.len()).collect();
            let win = subset(&set, &all, *frames);
            let split = SplitSpec { train: train.clone(), test: test.clone() };
            let ds = build_dataset(&win, &b.u, &b.nut, &[pair], split, k)?;
            ds.save(out)?;
            info!("{} samples", ds.samples.len());
        }
        Cmd::Train { dataset, target, pretrained } => {
            let ds = ClosureDataset::load(dataset)?;
            let mut cfg: TrainConfig = read_config(cli.config.as_deref())?.unwrap_or_default();
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            train_stage(&ds, target, pretrained.as_deref(), &cfg, out)?;
        }
        Cmd::Solve { ops, nets, mode, mu, snapshots, bases, steady } => {
            let mode: ClosureMode = mode.parse()?;
            let (ops, boundary, _) = ReducedOperatorSet::load(ops)?;
            let nets_loaded = ClosureNets::load(nets)?;
            let set = SnapshotSet::load(snapshots)?;
            let b = Bases::load(bases)?;
            let cfg: SolverConfig = read_config(cli.config.as_deref())?.unwrap_or_default();
            let gi = nearest_group(&set, mu)?;
            let frames = set.group_frames(gi);
            let init = if *steady { *frames.last().unwrap() } else { frames[0] };
            let state0 = RomState { a: project(&init.u, &b.u, ops.dims.nu)?, b: project(&init.p, &b.p, ops.dims.np)? };
            let visc = NetViscosity(&nets_loaded);
            let none = NoClosure(ops.dims.total());
            let net = NetClosure(&nets_loaded);
            let qa;
            let quad;
            let closure: &dyn solver::Closure = match mode {
                ClosureMode::None => &none,
                ClosureMode::Dd | ClosureMode::DdStar => &net,
                ClosureMode::Quadratic => {
                    qa = QuadraticAnsatz::load(&nets.join("quadratic"))?;
                    quad = QuadraticClosure(&qa);
                    &quad
                }
            };
            let nu = if *steady { set.nu } else { *mu.first().ok_or_else(|| anyhow!("--mu needs the viscosity"))? };
            let ctx = Context { ops: &ops, boundary: &boundary, nu, viscosity: &visc, closure, config: &cfg };
            if *steady {
                let o = solver::solve_steady(&state0, mu, &ctx)?;
                let traj = solver::RomTrajectory {
                    times: vec![0.0],
                    states: vec![o.state],
                    steps: vec![],
                    mu_phys: mu.clone(),
                };
                traj.save(out, &cfg, mode)?;
                info!("steady solve converged in {} iterations (residual {:e})", o.iterations, o.residual);
            } else {
                let traj = solver::solve_unsteady(&state0, init.t, mu, &ctx)?;
                traj.save(out, &cfg, mode)?;
                let bad = traj.steps.iter().filter(|s| !s.converged).count();
                if bad > 0 {
                    bail!("{bad} of {} steps did not converge", traj.steps.len());
                }
            }
        }
        Cmd::Report { input } => {
            let mut r = load_report(input)?;
            r.compute_gains("ev-rom")?;
            emit_reports(&r, out)?;
        }
        Cmd::Experiment => {
            let mut cfg: ExperimentConfig =
                read_config(cli.config.as_deref())?.ok_or_else(|| anyhow!("experiment needs --config"))?;
            if let Some(s) = cli.seed {
                cfg.case.seed = s;
                cfg.train.seed = s;
            }
            let res = run_experiment(&cfg, Some(out))?;
            for g in res.report.gain_records() {
                println!("{} {} {} {} {:.6}", g.regime, g.field, g.split, g.method, g.value);
            }
            if !res.all_converged {
                bail!("some online steps did not converge");
            }
        }
    }
    Ok(())
}

fn train_stage(
    ds: &ClosureDataset,
    target: &str,
    pretrained: Option<&Path>,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let arch = Default::default();
    let d = ds.dims;
    let nmu = ds.mu_len();
    let train_idx = ds.train_indices();
    let test_idx = ds.test_indices();
    let tb = Batch::from_dataset(ds, &train_idx)?;
    let vb = if test_idx.is_empty() { None } else { Some(Batch::from_dataset(ds, &test_idx)?) };
    let report = match target {
        "G" => {
            let mut g = OperatorNet::deeponet(d.nu, nmu, d.nnut, &arch, cfg.seed)?;
            let r = nn::train(TrainMode::StandardG, Some(&mut g), None, &tb, vb.as_ref(), cfg)?;
            nn::save_weights(&g, &out.join("g"), Some(&ds.norm))?;
            r
        }
        "M" => {
            let mut m = OperatorNet::mionet(d.nu, d.nnut, nmu, d.total(), &arch, cfg.seed.wrapping_add(1))?;
            let r = nn::train(TrainMode::StandardM, None, Some(&mut m), &tb, vb.as_ref(), cfg)?;
            nn::save_weights(&m, &out.join("m"), Some(&ds.norm))?;
            r
        }
        "star" => {
            let src = pretrained.ok_or_else(|| anyhow!("star training needs --pretrained <dir with g/>"))?;
            let (mut g, _) = nn::load_weights(&src.join("g"))?;
            let mut m = OperatorNet::mionet(d.nu, d.nnut, nmu, d.total(), &arch, cfg.seed.wrapping_add(1))?;
            let r = nn::train(TrainMode::CoupledStar, Some(&mut g), Some(&mut m), &tb, vb.as_ref(), cfg)?;
            nn::save_weights(&g, &out.join("g"), Some(&ds.norm))?;
            nn::save_weights(&m, &out.join("m"), Some(&ds.norm))?;
            r
        }
        "quadratic" => {
            let qa = fit_quadratic_ansatz_dataset(ds, &train_idx)?;
            qa.save(&out.join("quadratic"))?;
            return Ok(());
        }
        other => bail!("unknown target {other:?} (expected G, M, star or quadratic)"),
    };
    rom_core::archive::write_json(&out.join(format!("train_report_{target}.json")), &report)?;
    println!("final train loss {:.6e}, test {:?}", report.final_train, report.final_test);
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
