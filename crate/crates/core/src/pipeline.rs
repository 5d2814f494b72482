//! End-to-end experiment: snapshots, bases, operators, closure data,
//! training, online solves and reports.

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::closure::{build_dataset, ClosureDataset, ClosurePair, SplitSpec};
use crate::error::{Result, RomError};
use crate::fom::{run_case, CaseConfig, CaseFamily, SnapshotSet};
use crate::metrics::{self, emit_reports, ErrorSeries, GainKind, RegimeInfo, Report};
use crate::nn::{self, Architecture, Batch, ClosureNets, OperatorNet, TrainConfig, TrainMode, TrainReport};
use crate::operators::{assemble, assemble_for_parameter, BoundarySpec, Dims, ReducedOperatorSet};
use crate::pod::{
    basis_from_snapshots, project, reconstruct, select_modes_by_energy, FieldKind, InnerProduct, PodBasis,
};
use crate::solver::{self, ClosureMode, Context, NetClosure, NetViscosity, NoClosure, RomState, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegimeSpec {
    Energy { energy: f64 },
    Dims { nu: usize, np: usize, nnut: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: CaseConfig,
    /// Indices into `case.params`.
    pub train_params: Vec<usize>,
    pub test_params: Vec<usize>,
    /// Frames per parameter used for bases and training (unsteady); the
    /// online solve runs over all `case.frames`.
    #[serde(default)]
    pub train_frames: Option<usize>,
    pub regimes: Vec<RegimeSpec>,
    /// Ratio of big to small dimensions.
    #[serde(default = "d_k")]
    pub k: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default)]
    pub arch: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Reduced time steps per stored frame interval.
    #[serde(default = "d_one")]
    pub substeps: usize,
}

fn d_k() -> f64 {
    2.0
}
fn d_tau() -> f64 {
    10.0
}
fn d_one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_params.is_empty() {
            return Err(RomError::EmptySplit("train"));
        }
        if self.train_params.iter().any(|p| self.test_params.contains(p)) {
            return Err(RomError::Config("train and test parameters overlap".into()));
        }
        if self.regimes.is_empty() {
            return Err(RomError::Config("no modal regimes configured".into()));
        }
        if !(self.k >= 1.0) {
            return Err(RomError::Config(format!("big-to-small ratio {} below 1", self.k)));
        }
        if self.substeps == 0 {
            return Err(RomError::Config("substeps must be positive".into()));
        }
        Ok(())
    }

    fn window(&self) -> usize {
        self.train_frames.unwrap_or(self.case.frames).min(self.case.frames)
    }
}

/// First `frames` frames of each group in `groups`.
pub fn subset(set: &SnapshotSet, groups: &[usize], frames: Option<usize>) -> SnapshotSet {
    let mut out = set.clone();
    out.frames.clear();
    out.group.clear();
    for &g in groups {
        for (k, f) in set.group_frames(g).into_iter().enumerate() {
            if frames.is_some_and(|n| k >= n) {
                break;
            }
            out.frames.push(f.clone());
            out.group.push(g);
        }
    }
    out
}

pub struct Bases {
    pub u: PodBasis,
    pub p: PodBasis,
    pub nut: PodBasis,
}

impl Bases {
    /// Bases at full numerical rank.
    pub fn compute(set: &SnapshotSet) -> Result<Self> {
        let full = |kind| match basis_from_snapshots(set, kind, set.frames.len()) {
            Err(RomError::RankDeficient { achievable, .. }) => basis_from_snapshots(set, kind, achievable),
            r => r,
        };
        Ok(Self { u: full(FieldKind::U)?, p: full(FieldKind::P)?, nut: full(FieldKind::Nut)? })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.u.save(&dir.join("u"))?;
        self.p.save(&dir.join("p"))?;
        self.nut.save(&dir.join("nut"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            u: PodBasis::load(&dir.join("u"))?,
            p: PodBasis::load(&dir.join("p"))?,
            nut: PodBasis::load(&dir.join("nut"))?,
        })
    }

    pub fn select(&self, spec: &RegimeSpec) -> Result<Dims> {
        match *spec {
            RegimeSpec::Energy { energy } => Ok(Dims::new(
                select_modes_by_energy(&self.u.spectrum(), energy)?,
                select_modes_by_energy(&self.p.spectrum(), energy)?,
                select_modes_by_energy(&self.nut.spectrum(), energy)?,
            )),
            RegimeSpec::Dims { nu, np, nnut } => {
                for (n, b) in [(nu, &self.u), (np, &self.p), (nnut, &self.nut)] {
                    if n > b.rank() {
                        return Err(RomError::RankDeficient { requested: n, achievable: b.rank() });
                    }
                }
                Ok(Dims::new(nu, np, nnut))
            }
        }
    }

    /// `min(k N, rank)` per velocity and pressure; eddy viscosity unchanged.
    pub fn big_dims(&self, dims: Dims, k: f64) -> Dims {
        let up = |n: usize, r: usize| (((n as f64) * k).round() as usize).clamp(n, r.max(n));
        Dims::new(up(dims.nu, self.u.rank()), up(dims.np, self.p.rank()), dims.nnut)
    }
}

/// Operators at the small and big dimensions, one pair per parameter for
/// geometric families.
pub fn operator_pairs(
    set: &SnapshotSet,
    bases: &Bases,
    boundary: &BoundarySpec,
    dims: Dims,
    big: Dims,
) -> Result<Vec<ClosurePair>> {
    let make = |big_ops: ReducedOperatorSet| -> Result<ClosurePair> {
        let small = big_ops.leading(dims)?;
        ClosurePair::new(small, big_ops)
    };
    if set.is_geometric() {
        set.params
            .iter()
            .map(|mu| make(assemble_for_parameter(&bases.u, &bases.p, &bases.nut, &set.grid, mu, boundary, big)?))
            .collect()
    } else {
        Ok(vec![make(assemble(&bases.u, &bases.p, &bases.nut, &set.grid, boundary, big, vec![])?)?])
    }
}

pub struct TrainedModels {
    pub dd: ClosureNets,
    pub star: ClosureNets,
    pub reports: Vec<TrainReport>,
}

pub fn train_models(ds: &ClosureDataset, arch: &Architecture, cfg: &TrainConfig) -> Result<TrainedModels> {
    let train_idx = ds.train_indices();
    let test_idx = ds.test_indices();
    let tb = Batch::from_dataset(ds, &train_idx)?;
    let vb = if test_idx.is_empty() { None } else { Some(Batch::from_dataset(ds, &test_idx)?) };
    let d = ds.dims;
    let nmu = ds.mu_len();
    let mut g = OperatorNet::deeponet(d.nu, nmu, d.nnut, arch, cfg.seed)?;
    let mut m = OperatorNet::mionet(d.nu, d.nnut, nmu, d.total(), arch, cfg.seed.wrapping_add(1))?;
    let rg = nn::train(TrainMode::StandardG, Some(&mut g), None, &tb, vb.as_ref(), cfg)?;
    let rm = nn::train(TrainMode::StandardM, None, Some(&mut m), &tb, vb.as_ref(), cfg)?;
    let mut g_star = g.clone();
    let mut m_star = OperatorNet::mionet(d.nu, d.nnut, nmu, d.total(), arch, cfg.seed.wrapping_add(1))?;
    let rs = nn::train(TrainMode::CoupledStar, Some(&mut g_star), Some(&mut m_star), &tb, vb.as_ref(), cfg)?;
    Ok(TrainedModels {
        dd: ClosureNets { g, m, norm: ds.norm.clone() },
        star: ClosureNets { g: g_star, m: m_star, norm: ds.norm.clone() },
        reports: vec![rg, rm, rs],
    })
}

impl ClosureNets {
    pub fn save(&self, dir: &Path) -> Result<()> {
        nn::save_weights(&self.g, &dir.join("g"), Some(&self.norm))?;
        nn::save_weights(&self.m, &dir.join("m"), Some(&self.norm))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (g, norm) = nn::load_weights(&dir.join("g"))?;
        let (m, _) = nn::load_weights(&dir.join("m"))?;
        let norm = norm.ok_or_else(|| RomError::format(dir.join("g"), "weights carry no normalization"))?;
        Ok(Self { g, m, norm })
    }
}

/// Reduced fields of one online solution at one node.
pub struct RomFields {
    pub u: DVector<f64>,
    pub p: DVector<f64>,
    pub nut: DVector<f64>,
}

pub fn rom_fields(state: &RomState, g: &DVector<f64>, bases: &Bases) -> Result<RomFields> {
    Ok(RomFields {
        u: reconstruct(state.a.as_slice(), &bases.u)?,
        p: reconstruct(state.b.as_slice(), &bases.p)?,
        nut: reconstruct(g.as_slice(), &bases.nut)?,
    })
}

pub fn method_name(mode: ClosureMode) -> &'static str {
    match mode {
        ClosureMode::None => "ev-rom",
        ClosureMode::Dd => "dd",
        ClosureMode::DdStar => "dd-star",
        ClosureMode::Quadratic => "quadratic",
    }
}

pub struct ExperimentOutput {
    pub report: Report,
    pub train_reports: Vec<(String, Vec<TrainReport>)>,
    /// Whether every online step of every solve converged.
    pub all_converged: bool,
}

struct Layout(Option<PathBuf>);

impl Layout {
    fn dir(&self, rel: &str) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(rel))
    }
}

/// Converged snapshot of the training parameter closest to `gi`.
fn nearest_converged<'a>(set: &'a SnapshotSet, train: &[usize], gi: usize) -> &'a crate::fom::FieldFrame {
    let dist = |k: usize| -> f64 { set.params[k].iter().zip(&set.params[gi]).map(|(a, b)| (a - b).powi(2)).sum() };
    let best = train.iter().copied().min_by(|&x, &y| dist(x).total_cmp(&dist(y))).unwrap_or(gi);
    set.group_frames(best).last().unwrap()
}

/// Runs every stage; when `out` is given all artifacts are written below it.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let lay = Layout(out.map(Path::to_path_buf));
    let set = run_case(&cfg.case)?;
    if let Some(d) = lay.dir("snapshots") {
        set.save(&d)?;
    }
    let unsteady = cfg.case.case == CaseFamily::UnsteadyChannel;
    let window = if unsteady { Some(cfg.window()) } else { None };
    let training = subset(&set, &cfg.train_params, window);
    let bases = Bases::compute(&training)?;
    if let Some(d) = lay.dir("bases") {
        bases.save(&d)?;
    }
    let boundary = BoundarySpec::lid(cfg.case.lid_velocity, cfg.tau)?;
    let mut all: Vec<usize> = cfg.train_params.clone();
    all.extend(&cfg.test_params);
    let windowed = subset(&set, &(0..set.params.len()).collect::<Vec<_>>(), window);
    let split = SplitSpec { train: cfg.train_params.clone(), test: cfg.test_params.clone() };

    let kind = if unsteady { GainKind::Unsteady } else { GainKind::Steady };
    let t_end = set.frames.iter().map(|f| f.t).fold(0.0, f64::max);
    let mut report = Report::new(kind, if unsteady { Some([0.0, t_end]) } else { None });
    let mut train_reports = Vec::new();
    let mut all_converged = true;

    for (ri, spec) in cfg.regimes.iter().enumerate() {
        let name = format!("r{ri}");
        let dims = bases.select(spec)?;
        let big = bases.big_dims(dims, cfg.k);
        info!("regime {name}: dims {dims:?}, big {big:?}");
        report.regimes.push(RegimeInfo {
            name: name.clone(),
            dims: [dims.nu, dims.np, dims.nnut],
            big_dims: [big.nu, big.np, big.nnut],
            energy: match spec {
                RegimeSpec::Energy { energy } => Some(*energy),
                _ => None,
            },
        });
        let pairs = operator_pairs(&set, &bases, &boundary, dims, big)?;
        if let Some(d) = lay.dir(&format!("ops/{name}")) {
            for (k, p) in pairs.iter().enumerate() {
                p.small.save(&d.join(format!("small_{k}")), &boundary, cfg.k)?;
                p.big.save(&d.join(format!("big_{k}")), &boundary, cfg.k)?;
            }
        }
        let ds = build_dataset(&windowed, &bases.u, &bases.nut, &pairs, split.clone(), cfg.k)?;
        if let Some(d) = lay.dir(&format!("dataset/{name}")) {
            ds.save(&d)?;
        }
        let models = train_models(&ds, &cfg.arch, &cfg.train)?;
        if let Some(d) = lay.dir(&format!("nets/{name}")) {
            models.dd.save(&d.join("dd"))?;
            models.star.save(&d.join("dd-star"))?;
            let tr = d.join("train_reports.json");
            crate::archive::write_json(&tr, &models.reports)?;
        }

        let ctx_for = |gi: usize| -> &ReducedOperatorSet {
            if pairs.len() == 1 {
                &pairs[0].small
            } else {
                &pairs[gi].small
            }
        };
        for &gi in &all {
            let split_name = if cfg.train_params.contains(&gi) { "train" } else { "test" };
            let frames = set.group_frames(gi);
            let grid = set.grid_for(&set.params[gi])?;
            let ips = [
                InnerProduct::for_field(&grid, FieldKind::U),
                InnerProduct::for_field(&grid, FieldKind::P),
                InnerProduct::for_field(&grid, FieldKind::Nut),
            ];
            let ops = ctx_for(gi);
            let nu = if unsteady { set.params[gi][0] } else { set.nu };
            let mu_phys: Vec<f64> = if unsteady { vec![nu] } else { set.params[gi].clone() };
            let init = if unsteady { frames[0] } else { nearest_converged(&set, &cfg.train_params, gi) };
            let a0 = project(&init.u, &bases.u, dims.nu)?;
            let b0 = project(&init.p, &bases.p, dims.np)?;
            let state0 = RomState { a: a0, b: b0 };

            // projection errors
            let mut proj = [vec![], vec![], vec![]];
            let targets: Vec<&crate::fom::FieldFrame> =
                if unsteady { frames.clone() } else { vec![*frames.last().unwrap()] };
            for f in &targets {
                let fields = [(&f.u, &bases.u, dims.nu), (&f.p, &bases.p, dims.np), (&f.nut, &bases.nut, dims.nnut)];
                for (k, (x, b, n)) in fields.iter().enumerate() {
                    let c = project(x, b, *n)?;
                    let r = reconstruct(c.as_slice(), b)?;
                    proj[k].push(metrics::relative_error(r.as_slice(), x, &ips[k])?);
                }
            }
            let times: Vec<f64> = targets.iter().map(|f| f.t).collect();
            let push = |report: &mut Report, method: &str, vals: [Vec<f64>; 3]| {
                for (k, field) in ["u", "p", "nut"].iter().enumerate() {
                    report.errors.push(ErrorSeries {
                        regime: name.clone(),
                        method: method.into(),
                        field: (*field).into(),
                        split: split_name.into(),
                        param: gi,
                        mu: set.params[gi].clone(),
                        times: times.clone(),
                        values: vals[k].clone(),
                    });
                }
            };
            push(&mut report, "projection", proj);

            for mode in [ClosureMode::None, ClosureMode::Dd, ClosureMode::DdStar] {
                let nets = if mode == ClosureMode::DdStar { &models.star } else { &models.dd };
                let visc = NetViscosity(nets);
                let none = NoClosure(dims.total());
                let net_closure = NetClosure(nets);
                let closure: &dyn solver::Closure = if mode == ClosureMode::None { &none } else { &net_closure };
                let mut scfg = cfg.solver.clone();
                let mut errs = [vec![], vec![], vec![]];
                let states: Vec<(RomState, Vec<f64>)> = if unsteady {
                    scfg.dt = cfg.case.dt * cfg.case.stride as f64 / cfg.substeps as f64;
                    scfg.steps = (frames.len() - 1) * cfg.substeps;
                    let ctx = Context { ops, boundary: &boundary, nu, viscosity: &visc, closure, config: &scfg };
                    let traj = solver::solve_unsteady(&state0, init.t, &mu_phys, &ctx)?;
                    all_converged &= traj.all_converged();
                    if let Some(d) = lay.dir(&format!("trajectories/{name}/{}/param_{gi}", method_name(mode))) {
                        traj.save(&d, &scfg, mode)?;
                    }
                    (0..frames.len())
                        .map(|k| {
                            let n = k * cfg.substeps;
                            let mut mu = vec![traj.times[n]];
                            mu.extend_from_slice(&mu_phys);
                            (traj.states[n].clone(), mu)
                        })
                        .collect()
                } else {
                    let ctx = Context { ops, boundary: &boundary, nu, viscosity: &visc, closure, config: &scfg };
                    let o = solver::newton_solve(&state0, &ctx, &mu_phys, None)?;
                    all_converged &= o.converged;
                    vec![(o.state, mu_phys.clone())]
                };
                for ((s, mu), f) in states.iter().zip(&targets) {
                    let g = nets.predict_g(s.a.as_slice(), mu)?;
                    let rf = rom_fields(s, &g, &bases)?;
                    errs[0].push(metrics::relative_error(rf.u.as_slice(), &f.u, &ips[0])?);
                    errs[1].push(metrics::relative_error(rf.p.as_slice(), &f.p, &ips[1])?);
                    errs[2].push(metrics::relative_error(rf.nut.as_slice(), &f.nut, &ips[2])?);
                }
                push(&mut report, method_name(mode), errs);
            }
        }
        train_reports.push((name, models.reports));
    }
    report.compute_gains(method_name(ClosureMode::None))?;
    if let Some(d) = lay.dir("report") {
        emit_reports(&report, &d)?;
    }
    Ok(ExperimentOutput { report, train_reports, all_converged })
}
