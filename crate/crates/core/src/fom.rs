//! Full-order surrogate: a lid-driven channel (periodic in x) advanced with a
//! semi-implicit momentum step and a weak pressure Poisson equation, plus
//! a Smagorinsky-type algebraic eddy viscosity.

use std::f64::consts::PI;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::error::{Result, RomError};
use crate::grid::GridSpec;
use crate::linalg::{conjugate_gradient, norm2, Csr};
use crate::stencil::{Stencils, VelField};

pub const CFL_LIMIT: f64 = 0.4;
pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const DEFAULT_CS: f64 = 0.17;
const FRAME_MAGIC: &[u8; 4] = b"ROMS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldFrame {
    /// x-component block followed by y-component block.
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub nut: Vec<f64>,
    pub t: f64,
    pub mu: Vec<f64>,
}

impl FieldFrame {
    pub fn zeros(grid: &GridSpec, mu: Vec<f64>) -> Self {
        let nc = grid.ncells();
        Self { u: vec![0.0; 2 * nc], p: vec![0.0; nc], nut: vec![0.0; nc], t: 0.0, mu }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotKind {
    Steady,
    Unsteady,
    SteadyWithIntermediates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    /// Reference grid (mid-configuration for deformed families).
    pub grid: GridSpec,
    pub frames: Vec<FieldFrame>,
    pub params: Vec<Vec<f64>>,
    /// Index of the parameter each frame belongs to.
    pub group: Vec<usize>,
    pub kind: SnapshotKind,
    pub stride: usize,
    pub seed: u64,
    pub lid_velocity: f64,
    /// Viscosity of the steady family (unsteady families carry it in `mu`).
    pub nu: f64,
}

impl SnapshotSet {
    /// Frames of one parameter group, time ordered.
    pub fn group_frames(&self, g: usize) -> Vec<&FieldFrame> {
        self.frames.iter().zip(&self.group).filter(|(_, &k)| k == g).map(|(f, _)| f).collect()
    }

    pub fn is_geometric(&self) -> bool {
        self.kind != SnapshotKind::Unsteady
    }

    /// Grid on which a parameter group lives.
    pub fn grid_for(&self, param: &[f64]) -> Result<GridSpec> {
        if self.is_geometric() {
            self.grid.with_deformation(param)
        } else {
            Ok(self.grid.clone())
        }
    }
}

/// Algebraic eddy viscosity `(cs * delta)^2 |grad u + grad u^T|_F`.
pub fn compute_eddy_viscosity(u: &VelField, st: &Stencils, cs: f64) -> Vec<f64> {
    st.strain_norm(u)
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let d = cs * st.grid.filter_width(c);
            d * d * s
        })
        .collect()
}

/// Right-hand side of the weak pressure equation.
pub fn pressure_rhs(u: &VelField, nut: &[f64], st: &Stencils, nu: f64) -> Vec<f64> {
    let conv = st.convection(u, u);
    let turb = st.turbulent_diffusion(u, nut);
    let f = [
        turb[0].iter().zip(&conv[0]).map(|(t, c)| t - c).collect::<Vec<_>>(),
        turb[1].iter().zip(&conv[1]).map(|(t, c)| t - c).collect::<Vec<_>>(),
    ];
    let mut rhs = st.weak_divergence(&f);
    let wall = st.wall_curl_term(u);
    for (r, w) in rhs.iter_mut().zip(&wall) {
        *r += nu * w;
    }
    rhs
}

/// Solves `A p = rhs` with `A` the pressure stiffness, pinning `p = 0` at cell 0.
pub fn solve_pressure_system(st: &Stencils, rhs: &[f64]) -> Result<Vec<f64>> {
    let nc = st.grid.ncells();
    let mut active = vec![true; nc];
    active[0] = false;
    let p = conjugate_gradient(&st.stiff_n, rhs, None, &active, 1e-13, 20 * nc)?;
    let ap = st.stiff_n.matvec(&p);
    let res: Vec<f64> = ap.iter().zip(rhs).map(|(a, b)| a - b).collect();
    let scale = norm2(rhs).max(f64::MIN_POSITIVE);
    let rel = norm2(&res) / scale;
    if rel > 1e-9 && norm2(rhs) > 0.0 {
        return Err(RomError::LinearSolver { iterations: 20 * nc, residual: rel });
    }
    Ok(p)
}

pub fn solve_pressure_poisson(u: &VelField, nut: &[f64], st: &Stencils, nu: f64) -> Result<Vec<f64>> {
    solve_pressure_system(st, &pressure_rhs(u, nut, st, nu))
}

/// Cached semi-implicit stepper for one grid, viscosity and time step.
pub struct FomSolver {
    pub st: Stencils,
    pub nu: f64,
    pub dt: f64,
    pub lid: f64,
    pub cs: f64,
    implicit: Csr,
}

impl FomSolver {
    pub fn new(grid: &GridSpec, nu: f64, dt: f64, lid: f64, cs: f64) -> Result<Self> {
        if !(dt > 0.0) || !(nu > 0.0) {
            return Err(RomError::Config(format!("need dt > 0 and nu > 0, got dt={dt}, nu={nu}")));
        }
        let st = Stencils::new(grid);
        let nc = grid.ncells();
        let mut trip = Vec::new();
        for r in 0..nc {
            trip.push((r, r, grid.cell_areas[r]));
            for (c, v) in st.stiff_d.row(r) {
                if c < nc {
                    trip.push((r, c, dt * nu * v));
                }
            }
        }
        let implicit = Csr::from_triplets(nc, nc, &trip);
        Ok(Self { st, nu, dt, lid, cs, implicit })
    }

    pub fn velocity(&self, frame: &FieldFrame) -> VelField {
        VelField::from_frame(&self.st.grid, &frame.u, self.lid)
    }

    /// Completes a frame whose velocity is set: eddy viscosity and pressure.
    pub fn close_frame(&self, frame: &mut FieldFrame) -> Result<()> {
        let u = self.velocity(frame);
        frame.nut = compute_eddy_viscosity(&u, &self.st, self.cs);
        frame.p = solve_pressure_poisson(&u, &frame.nut, &self.st, self.nu)?;
        Ok(())
    }

    /// Explicit part of the momentum update (everything but `nu lap u`).
    pub fn explicit_rate(&self, u: &VelField, p: &[f64], nut: &[f64]) -> [Vec<f64>; 2] {
        let st = &self.st;
        let conv = st.convection(u, u);
        let (px, py) = st.grad_n(p);
        let bt = st.transpose_gradient_div(u, None);
        let turb = st.turbulent_diffusion(u, nut);
        let gp = [px, py];
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for a in 0..2 {
            out[a] = (0..conv[a].len()).map(|k| -conv[a][k] - gp[a][k] + self.nu * bt[a][k] + turb[a][k]).collect();
        }
        out
    }

    pub fn step(&self, state: &FieldFrame, step_index: usize) -> Result<FieldFrame> {
        let st = &self.st;
        let g = &st.grid;
        let nc = g.ncells();
        let u = self.velocity(state);
        let courant = st.courant(&u, self.dt);
        if courant > CFL_LIMIT {
            return Err(RomError::CflViolation { dt: self.dt, courant, limit: CFL_LIMIT });
        }
        let rate = self.explicit_rate(&u, &state.p, &state.nut);
        let mut new_u = vec![0.0; 2 * nc];
        for a in 0..2 {
            let (cur, top) = if a == 0 { (&u.x, &u.top_x) } else { (&u.y, &u.top_y) };
            let mut ext = vec![0.0; nc];
            ext.extend_from_slice(top);
            let trace = st.stiff_d.matvec(&ext);
            let rhs: Vec<f64> = (0..nc)
                .map(|k| g.cell_areas[k] * (cur[k] + self.dt * rate[a][k]) - self.dt * self.nu * trace[k])
                .collect();
            let sol = conjugate_gradient(&self.implicit, &rhs, Some(cur), &vec![true; nc], 1e-14, 10 * nc)?;
            new_u[a * nc..(a + 1) * nc].copy_from_slice(&sol);
        }
        let mut next =
            FieldFrame { u: new_u, p: Vec::new(), nut: Vec::new(), t: state.t + self.dt, mu: state.mu.clone() };
        let un = norm2(&next.u);
        if !un.is_finite() || un > DIVERGENCE_LIMIT {
            return Err(RomError::Diverged { step: step_index, field: "u", norm: un });
        }
        self.close_frame(&mut next)?;
        let pn = norm2(&next.p);
        if !pn.is_finite() || pn > DIVERGENCE_LIMIT {
            return Err(RomError::Diverged { step: step_index, field: "p", norm: pn });
        }
        Ok(next)
    }
}

/// One semi-implicit step from `state`, with `p` and `nut` of `state` used
/// for the explicit terms.
pub fn step_fom(state: &FieldFrame, grid: &GridSpec, nu: f64, dt: f64, lid: f64) -> Result<FieldFrame> {
    FomSolver::new(grid, nu, dt, lid, DEFAULT_CS)?.step(state, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseFamily {
    UnsteadyChannel,
    SteadyDeformed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub case: CaseFamily,
    #[serde(default = "d_n")]
    pub nx: usize,
    #[serde(default = "d_n")]
    pub ny: usize,
    #[serde(default = "d_one")]
    pub lx: f64,
    #[serde(default = "d_one")]
    pub ly: f64,
    #[serde(default = "d_one")]
    pub lid_velocity: f64,
    /// Unsteady: `[nu]` per entry. Steady-deformed: the deformation vector.
    pub params: Vec<Vec<f64>>,
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Time steps between stored frames.
    #[serde(default = "d_stride")]
    pub stride: usize,
    /// Frames per parameter (unsteady).
    #[serde(default = "d_frames")]
    pub frames: usize,
    /// Steady stopping tolerance on the relative velocity change.
    #[serde(default = "d_tol")]
    pub tolerance: f64,
    #[serde(default = "d_max_steps")]
    pub max_steps: usize,
    /// Viscosity of the steady family.
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default = "d_cs")]
    pub cs: f64,
    /// Amplitude of the initial vortex perturbation (unsteady).
    #[serde(default = "d_pert")]
    pub perturbation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_n() -> usize {
    16
}
fn d_one() -> f64 {
    1.0
}
fn d_dt() -> f64 {
    0.005
}
fn d_stride() -> usize {
    4
}
fn d_frames() -> usize {
    50
}
fn d_tol() -> f64 {
    1e-8
}
fn d_max_steps() -> usize {
    20000
}
fn d_nu() -> f64 {
    0.05
}
fn d_cs() -> f64 {
    DEFAULT_CS
}
fn d_pert() -> f64 {
    0.3
}

impl CaseConfig {
    pub fn unsteady(params: Vec<f64>, frames: usize, stride: usize, seed: u64) -> Self {
        Self {
            case: CaseFamily::UnsteadyChannel,
            nx: d_n(),
            ny: d_n(),
            lx: 1.0,
            ly: 1.0,
            lid_velocity: 1.0,
            params: params.into_iter().map(|n| vec![n]).collect(),
            dt: d_dt(),
            stride,
            frames,
            tolerance: d_tol(),
            max_steps: d_max_steps(),
            nu: d_nu(),
            cs: DEFAULT_CS,
            perturbation: d_pert(),
            seed,
        }
    }

    pub fn steady_deformed(params: Vec<Vec<f64>>, stride: usize, seed: u64) -> Self {
        Self { case: CaseFamily::SteadyDeformed, dt: 0.02, params, ..Self::unsteady(vec![], 0, stride, seed) }
    }
}

/// Divergence-free initial state: Couette profile plus a seeded sum of
/// stream-function vortices `psi = A sin(2 pi m x / lx + theta) sin^2(pi y / ly)`.
pub fn initial_velocity(grid: &GridSpec, lid: f64, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64, f64)> = (1..=3)
        .map(|m| {
            let a = amplitude * rng.random_range(0.5..1.0) / m as f64;
            let th = rng.random_range(0.0..2.0 * PI);
            (m as f64, a, th)
        })
        .collect();
    let nc = grid.ncells();
    let mut u = vec![0.0; 2 * nc];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let (x, y) = grid.cell_center(i, j);
            let ytop = grid.ly * grid.h(x);
            let c = grid.idx(i, j);
            u[c] = lid * y / ytop;
            for &(m, a, th) in &modes {
                let kx = 2.0 * PI * m / grid.lx;
                let ky = PI / ytop;
                let arg = kx * x + th;
                // psi_y and -psi_x
                u[c] += a * arg.sin() * ky * (2.0 * ky * y).sin();
                u[nc + c] -= a * kx * arg.cos() * (ky * y).sin().powi(2);
            }
        }
    }
    u
}

pub fn run_case(config: &CaseConfig) -> Result<SnapshotSet> {
    if config.params.is_empty() {
        return Err(RomError::Config("empty parameter list".into()));
    }
    if config.stride == 0 {
        return Err(RomError::Config("stride must be positive".into()));
    }
    match config.case {
        CaseFamily::UnsteadyChannel => run_unsteady(config),
        CaseFamily::SteadyDeformed => run_steady(config),
    }
}

fn run_unsteady(cfg: &CaseConfig) -> Result<SnapshotSet> {
    if cfg.frames == 0 {
        return Err(RomError::Config("frames must be positive".into()));
    }
    let grid = GridSpec::new(cfg.nx, cfg.ny, cfg.lx, cfg.ly, &[], false)?;
    let u0 = initial_velocity(&grid, cfg.lid_velocity, cfg.perturbation, cfg.seed);
    let mut frames = Vec::new();
    let mut group = Vec::new();
    for (gi, param) in cfg.params.iter().enumerate() {
        let nu = *param.first().ok_or_else(|| RomError::Config("unsteady parameters need a viscosity".into()))?;
        let solver = FomSolver::new(&grid, nu, cfg.dt, cfg.lid_velocity, cfg.cs)?;
        let mut state = FieldFrame { u: u0.clone(), p: vec![], nut: vec![], t: 0.0, mu: vec![0.0, nu] };
        solver.close_frame(&mut state)?;
        let mut step = 0;
        for k in 0..cfg.frames {
            if k > 0 {
                for _ in 0..cfg.stride {
                    step += 1;
                    state = solver.step(&state, step)?;
                }
                state.t = step as f64 * cfg.dt;
            }
            let mut f = state.clone();
            f.mu = vec![f.t, nu];
            frames.push(f);
            group.push(gi);
        }
        info!("unsteady nu={nu}: {} frames up to t={:.4}", cfg.frames, state.t);
    }
    Ok(SnapshotSet {
        grid,
        frames,
        params: cfg.params.clone(),
        group,
        kind: SnapshotKind::Unsteady,
        stride: cfg.stride,
        seed: cfg.seed,
        lid_velocity: cfg.lid_velocity,
        nu: cfg.nu,
    })
}

/// Arithmetic mean of the parameter vectors.
pub fn mid_configuration(params: &[Vec<f64>]) -> Vec<f64> {
    let n = params.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut m = vec![0.0; n];
    for p in params {
        for (k, v) in p.iter().enumerate() {
            m[k] += v;
        }
    }
    m.iter().map(|v| v / params.len() as f64).collect()
}

fn run_steady(cfg: &CaseConfig) -> Result<SnapshotSet> {
    let mid = mid_configuration(&cfg.params);
    let ref_grid = GridSpec::new(cfg.nx, cfg.ny, cfg.lx, cfg.ly, &mid, false)?;
    let mut frames = Vec::new();
    let mut group = Vec::new();
    for (gi, param) in cfg.params.iter().enumerate() {
        let grid = ref_grid.with_deformation(param)?;
        let solver = FomSolver::new(&grid, cfg.nu, cfg.dt, cfg.lid_velocity, cfg.cs)?;
        let mut state = FieldFrame::zeros(&grid, param.clone());
        solver.close_frame(&mut state)?;
        let mut change = f64::INFINITY;
        let mut step = 0;
        loop {
            if step >= cfg.max_steps {
                return Err(RomError::SteadyNotConverged { steps: step, change });
            }
            step += 1;
            let next = solver.step(&state, step)?;
            let du: Vec<f64> = next.u.iter().zip(&state.u).map(|(a, b)| a - b).collect();
            let base = norm2(&state.u);
            change = if base > 0.0 { norm2(&du) / base } else { f64::INFINITY };
            state = next;
            if change <= cfg.tolerance {
                break;
            }
            if step % cfg.stride == 0 {
                let mut f = state.clone();
                f.mu = param.clone();
                frames.push(f);
                group.push(gi);
            }
        }
        let mut f = state.clone();
        f.mu = param.clone();
        frames.push(f);
        group.push(gi);
        debug!("steady mu={param:?}: converged after {step} steps (change {change:e})");
        info!("steady mu={param:?}: {step} steps");
    }
    Ok(SnapshotSet {
        grid: ref_grid,
        frames,
        params: cfg.params.clone(),
        group,
        kind: SnapshotKind::SteadyWithIntermediates,
        stride: cfg.stride,
        seed: cfg.seed,
        lid_velocity: cfg.lid_velocity,
        nu: cfg.nu,
    })
}

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    format: String,
    grid: GridSpec,
    params: Vec<Vec<f64>>,
    group: Vec<usize>,
    stride: usize,
    kind: SnapshotKind,
    seed: u64,
    lid_velocity: f64,
    nu: f64,
    frames: usize,
    mu_len: Vec<usize>,
}

fn frame_file(k: usize) -> String {
    format!("frame_{k:05}.bin")
}

impl SnapshotSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::ensure_dir(dir)?;
        let manifest = SnapshotManifest {
            format: FORMAT_VERSION.into(),
            grid: self.grid.clone(),
            params: self.params.clone(),
            group: self.group.clone(),
            stride: self.stride,
            kind: self.kind,
            seed: self.seed,
            lid_velocity: self.lid_velocity,
            nu: self.nu,
            frames: self.frames.len(),
            mu_len: self.frames.iter().map(|f| f.mu.len()).collect(),
        };
        archive::write_json(&dir.join("manifest.json"), &manifest)?;
        for (k, f) in self.frames.iter().enumerate() {
            let mut data = Vec::with_capacity(f.u.len() + 2 * f.p.len() + 1 + f.mu.len());
            data.extend_from_slice(&f.u);
            data.extend_from_slice(&f.p);
            data.extend_from_slice(&f.nut);
            data.push(f.t);
            data.extend_from_slice(&f.mu);
            archive::write_blob(&dir.join(frame_file(k)), FRAME_MAGIC, &data)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: SnapshotManifest = archive::read_json(&mpath)?;
        archive::check_version(&mpath, &m.format)?;
        let nc = m.grid.nx * m.grid.ny;
        let mut frames = Vec::with_capacity(m.frames);
        for k in 0..m.frames {
            let path = dir.join(frame_file(k));
            let data = archive::read_blob(&path, FRAME_MAGIC)?;
            let nmu = m.mu_len[k];
            if data.len() != 4 * nc + 1 + nmu {
                return Err(RomError::format(
                    &path,
                    format!("expected {} values, got {}", 4 * nc + 1 + nmu, data.len()),
                ));
            }
            frames.push(FieldFrame {
                u: data[..2 * nc].to_vec(),
                p: data[2 * nc..3 * nc].to_vec(),
                nut: data[3 * nc..4 * nc].to_vec(),
                t: data[4 * nc],
                mu: data[4 * nc + 1..].to_vec(),
            });
        }
        let grid = GridSpec::new(m.grid.nx, m.grid.ny, m.grid.lx, m.grid.ly, &m.grid.deformation, m.grid.y_periodic)?;
        Ok(Self {
            grid,
            frames,
            params: m.params,
            group: m.group,
            kind: m.kind,
            stride: m.stride,
            seed: m.seed,
            lid_velocity: m.lid_velocity,
            nu: m.nu,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn zero_state_is_a_fixed_point() {
        let g = build_grid(8, 8, 1.0, 1.0, &[]).unwrap();
        let s = FomSolver::new(&g, 0.01, 0.01, 0.0, DEFAULT_CS).unwrap();
        let mut f = FieldFrame::zeros(&g, vec![]);
        for k in 0..5 {
            f = s.step(&f, k).unwrap();
        }
        assert!(f.u.iter().chain(&f.p).chain(&f.nut).all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_flow_on_periodic_variant_is_unchanged() {
        let g = GridSpec::periodic(8, 8, 1.0, 1.0).unwrap();
        let nc = g.ncells();
        let s = FomSolver::new(&g, 0.01, 0.01, 0.0, DEFAULT_CS).unwrap();
        let mut f = FieldFrame::zeros(&g, vec![]);
        f.u[..nc].fill(0.7);
        s.close_frame(&mut f).unwrap();
        let n = s.step(&f, 0).unwrap();
        for (a, b) in n.u.iter().zip(&f.u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eddy_viscosity_of_uniform_shear() {
        let g = build_grid(8, 8, 1.0, 1.0, &[]).unwrap();
        let st = Stencils::new(&g);
        let gamma = 2.0;
        let mut u = VelField::zeros(&g);
        for j in 0..8 {
            for i in 0..8 {
                u.x[g.idx(i, j)] = gamma * g.cell_center(i, j).1;
            }
        }
        u.top_x.fill(gamma);
        let nut = compute_eddy_viscosity(&u, &st, 0.17);
        let delta = 1.0 / 8.0;
        let expected = (0.17 * delta) * (0.17 * delta) * gamma * 2f64.sqrt();
        for j in 1..7 {
            for i in 0..8 {
                assert!((nut[g.idx(i, j)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = build_grid(8, 8, 1.0, 1.0, &[]).unwrap();
        let s = FomSolver::new(&g, 0.01, 0.5, 1.0, DEFAULT_CS).unwrap();
        let mut f = FieldFrame::zeros(&g, vec![]);
        f.u.fill(1.0);
        assert!(matches!(s.step(&f, 0), Err(RomError::CflViolation { .. })));
    }

    #[test]
    fn rejects_empty_parameter_list() {
        let cfg = CaseConfig::unsteady(vec![], 10, 1, 0);
        assert!(matches!(run_case(&cfg), Err(RomError::Config(_))));
    }
}
