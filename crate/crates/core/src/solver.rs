//! Reduced residuals with optional learned closure, damped Newton, and the
//! steady and unsteady online solvers.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::closure::{evaluate_quadratic_ansatz, QuadraticAnsatz};
use crate::error::{Result, RomError};
use crate::nn::ClosureNets;
use crate::operators::{penalty_contribution, BoundarySpec, ReducedOperatorSet};

#[derive(Clone, Debug, PartialEq)]
pub struct RomState {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
}

impl RomState {
    pub fn zeros(nu: usize, np: usize) -> Self {
        Self { a: DVector::zeros(nu), b: DVector::zeros(np) }
    }

    fn stack(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.a.len() + self.b.len());
        x.rows_mut(0, self.a.len()).copy_from(&self.a);
        x.rows_mut(self.a.len(), self.b.len()).copy_from(&self.b);
        x
    }

    fn unstack(x: &DVector<f64>, nu: usize) -> Self {
        Self { a: x.rows(0, nu).into_owned(), b: x.rows(nu, x.len() - nu).into_owned() }
    }
}

/// Eddy-viscosity coefficients `g(a, mu)`.
pub trait EddyViscosity {
    fn coefficients(&self, a: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>>;
}

/// Correction `(tau_u, tau_p)` given `a`, `g` and `mu`.
pub trait Closure {
    fn correction(&self, a: &DVector<f64>, g: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>>;
}

/// Fixed coefficients, independent of the state.
pub struct ConstantViscosity(pub DVector<f64>);

impl EddyViscosity for ConstantViscosity {
    fn coefficients(&self, _: &DVector<f64>, _: &[f64]) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}

pub struct NetViscosity<'a>(pub &'a ClosureNets);

impl EddyViscosity for NetViscosity<'_> {
    fn coefficients(&self, a: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>> {
        self.0.predict_g(a.as_slice(), mu)
    }
}

pub struct NoClosure(pub usize);

impl Closure for NoClosure {
    fn correction(&self, _: &DVector<f64>, _: &DVector<f64>, _: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.0))
    }
}

pub struct NetClosure<'a>(pub &'a ClosureNets);

impl Closure for NetClosure<'_> {
    fn correction(&self, a: &DVector<f64>, g: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>> {
        self.0.predict_tau(a.as_slice(), g.as_slice(), mu)
    }
}

pub struct QuadraticClosure<'a>(pub &'a QuadraticAnsatz);

impl Closure for QuadraticClosure<'_> {
    fn correction(&self, a: &DVector<f64>, _: &DVector<f64>, _: &[f64]) -> Result<DVector<f64>> {
        Ok(evaluate_quadratic_ansatz(self.0, a.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClosureMode {
    None,
    Dd,
    DdStar,
    Quadratic,
}

impl std::str::FromStr for ClosureMode {
    type Err = RomError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "dd" => Ok(Self::Dd),
            "dd-star" => Ok(Self::DdStar),
            "quadratic" => Ok(Self::Quadratic),
            _ => Err(RomError::Config(format!("unknown closure mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    FirstOrder,
    SecondOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub scheme: TimeScheme,
    pub dt: f64,
    pub steps: usize,
    /// Reciprocal condition number below which the Jacobian counts as singular.
    pub rcond_min: f64,
    pub fd_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 50,
            max_halvings: 8,
            scheme: TimeScheme::SecondOrder,
            dt: 0.02,
            steps: 49,
            rcond_min: 1e-14,
            fd_step: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, unsteady: bool) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(RomError::Config("Newton tolerance must be positive".into()));
        }
        if unsteady && !(self.dt > 0.0) {
            return Err(RomError::Config("time step must be positive".into()));
        }
        Ok(())
    }
}

/// Coefficients `(c0, c1, c2)` with `adot = (c0 a_{n+1} + c1 a_n + c2 a_{n-1}) / dt`.
pub fn bdf_coefficients(scheme: TimeScheme) -> [f64; 3] {
    match scheme {
        TimeScheme::FirstOrder => [1.0, -1.0, 0.0],
        TimeScheme::SecondOrder => [1.5, -2.0, 0.5],
    }
}

/// Discrete time derivative at the newest entry of `history` (oldest first).
pub fn time_derivative(history: &[DVector<f64>], scheme: TimeScheme, dt: f64) -> Result<DVector<f64>> {
    let need = match scheme {
        TimeScheme::FirstOrder => 2,
        TimeScheme::SecondOrder => 3,
    };
    if history.len() < need {
        return Err(RomError::Config(format!("{scheme:?} needs {need} history entries, got {}", history.len())));
    }
    let n = history.len();
    let c = bdf_coefficients(scheme);
    let mut d = &history[n - 1] * c[0] + &history[n - 2] * c[1];
    if need == 3 {
        d += &history[n - 3] * c[2];
    }
    Ok(d / dt)
}

/// Reduced residual of the momentum and pressure equations.
#[allow(clippy::too_many_arguments)]
pub fn residual(
    state: &RomState,
    adot: &DVector<f64>,
    g: &DVector<f64>,
    tau: &DVector<f64>,
    ops: &ReducedOperatorSet,
    boundary: &BoundarySpec,
    nu: f64,
) -> DVector<f64> {
    let (a, b) = (&state.a, &state.b);
    let (n_u, n_p) = (ops.dims.nu, ops.dims.np);
    let (t12, t34) = ops.turbulence_sums();
    let mom = -(&ops.m * adot) + (&ops.b + &ops.bt) * a * nu - ops.c.contract(a.as_slice(), a.as_slice())
        + t12.contract(g.as_slice(), a.as_slice())
        - &ops.h * b
        + penalty_contribution(a, ops, boundary)
        + tau.rows(0, n_u);
    let pre = &ops.d * b + ops.g.contract(a.as_slice(), a.as_slice())
        - t34.contract(g.as_slice(), a.as_slice())
        - &ops.n * a * nu
        - &ops.l
        + tau.rows(n_u, n_p);
    let mut r = DVector::zeros(n_u + n_p);
    r.rows_mut(0, n_u).copy_from(&mom);
    r.rows_mut(n_u, n_p).copy_from(&pre);
    r
}

/// Everything a Newton solve needs beyond the state.
pub struct Context<'a> {
    pub ops: &'a ReducedOperatorSet,
    pub boundary: &'a BoundarySpec,
    pub nu: f64,
    pub viscosity: &'a dyn EddyViscosity,
    pub closure: &'a dyn Closure,
    pub config: &'a SolverConfig,
}

/// Implicit time data: `adot = (c0 a + hist) / dt`; steady solves use `None`.
#[derive(Clone, Debug)]
pub struct TimeTerm {
    pub c0: f64,
    pub hist: DVector<f64>,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonOutcome {
    pub state: RomState,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

struct Cached {
    t12: crate::linalg::Tensor3,
    t34: crate::linalg::Tensor3,
    e_sum: DMatrix<f64>,
}

impl Context<'_> {
    fn cached(&self) -> Cached {
        let (t12, t34) = self.ops.turbulence_sums();
        let nu = self.ops.dims.nu;
        let e_sum = self.ops.e_k.iter().fold(DMatrix::zeros(nu, nu), |s, e| s + e) * self.boundary.tau;
        Cached { t12, t34, e_sum }
    }

    fn adot(&self, a: &DVector<f64>, time: Option<&TimeTerm>) -> DVector<f64> {
        match time {
            Some(t) => (a * t.c0 + &t.hist) / t.dt,
            None => DVector::zeros(a.len()),
        }
    }

    /// Residual plus the network-dependent part, evaluated at `x`.
    fn eval(&self, x: &DVector<f64>, mu: &[f64], time: Option<&TimeTerm>) -> Result<DVector<f64>> {
        let s = RomState::unstack(x, self.ops.dims.nu);
        let g = self.viscosity.coefficients(&s.a, mu)?;
        let tau = self.closure.correction(&s.a, &g, mu)?;
        Ok(residual(&s, &self.adot(&s.a, time), &g, &tau, self.ops, self.boundary, self.nu))
    }

    /// Terms that depend on `a` only through the networks, with the explicit
    /// `a` factor frozen at `a0`.
    fn network_part(&self, c: &Cached, a: &DVector<f64>, a0: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>> {
        let (n_u, n_p) = (self.ops.dims.nu, self.ops.dims.np);
        let g = self.viscosity.coefficients(a, mu)?;
        let tau = self.closure.correction(a, &g, mu)?;
        let mut v = tau;
        let m = c.t12.contract(g.as_slice(), a0.as_slice());
        let p = c.t34.contract(g.as_slice(), a0.as_slice());
        for i in 0..n_u {
            v[i] += m[i];
        }
        for i in 0..n_p {
            v[n_u + i] -= p[i];
        }
        Ok(v)
    }

    fn jacobian(&self, c: &Cached, x: &DVector<f64>, mu: &[f64], time: Option<&TimeTerm>) -> Result<DMatrix<f64>> {
        let ops = self.ops;
        let (n_u, n_p) = (ops.dims.nu, ops.dims.np);
        let n = n_u + n_p;
        let s = RomState::unstack(x, n_u);
        let a = s.a.as_slice();
        let g = self.viscosity.coefficients(&s.a, mu)?;
        let mut j = DMatrix::zeros(n, n);
        let mut juu = (&ops.b + &ops.bt) * self.nu - ops.c.contract_first(a) - ops.c.contract_second(a)
            + c.t12.contract_first(g.as_slice())
            - &c.e_sum;
        if let Some(t) = time {
            juu -= &ops.m * (t.c0 / t.dt);
        }
        let jpu =
            ops.g.contract_first(a) + ops.g.contract_second(a) - c.t34.contract_first(g.as_slice()) - &ops.n * self.nu;
        j.view_mut((0, 0), (n_u, n_u)).copy_from(&juu);
        j.view_mut((0, n_u), (n_u, n_p)).copy_from(&(-&ops.h));
        j.view_mut((n_u, 0), (n_p, n_u)).copy_from(&jpu);
        j.view_mut((n_u, n_u), (n_p, n_p)).copy_from(&ops.d);

        let base = self.network_part(c, &s.a, &s.a, mu)?;
        for k in 0..n_u {
            let h = self.config.fd_step * (1.0 + s.a[k].abs());
            let mut ap = s.a.clone();
            ap[k] += h;
            let col = (self.network_part(c, &ap, &s.a, mu)? - &base) / h;
            for i in 0..n {
                j[(i, k)] += col[i];
            }
        }
        Ok(j)
    }
}

/// Damped Newton on the reduced residual. Stops at `tolerance` (2-norm) or
/// after `max_iterations`; step lengths are halved up to `max_halvings`
/// times until the residual decreases.
pub fn newton_solve(initial: &RomState, ctx: &Context, mu: &[f64], time: Option<&TimeTerm>) -> Result<NewtonOutcome> {
    let cfg = ctx.config;
    let n_u = ctx.ops.dims.nu;
    if initial.a.len() != n_u || initial.b.len() != ctx.ops.dims.np {
        return Err(RomError::DimensionMismatch("initial state does not match the operators".into()));
    }
    let cache = ctx.cached();
    let mut x = initial.stack();
    let mut r = ctx.eval(&x, mu, time)?;
    let mut rn = r.norm();
    let mut it = 0;
    while rn > cfg.tolerance && rn.is_finite() && it < cfg.max_iterations {
        let j = ctx.jacobian(&cache, &x, mu, time)?;
        let svd = j.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
        if !(rcond >= cfg.rcond_min) {
            return Err(RomError::SingularJacobian { rcond, residual: rn });
        }
        let dx = match j.lu().solve(&r) {
            Some(d) => -d,
            None => return Err(RomError::SingularJacobian { rcond, residual: rn }),
        };
        it += 1;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_halvings {
            let xt = &x + &dx * lambda;
            let rt = ctx.eval(&xt, mu, time)?;
            let rtn = rt.norm();
            if rtn.is_finite() && rtn < rn {
                x = xt;
                r = rt;
                rn = rtn;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            debug!("newton: no decrease after {} halvings at residual {rn:e}", cfg.max_halvings);
            break;
        }
    }
    let converged = rn <= cfg.tolerance;
    Ok(NewtonOutcome { state: RomState::unstack(&x, n_u), iterations: it, residual: rn, converged })
}

/// Steady solve from `initial` (projected coefficients of a snapshot).
pub fn solve_steady(initial: &RomState, mu: &[f64], ctx: &Context) -> Result<NewtonOutcome> {
    ctx.config.validate(false)?;
    let out = newton_solve(initial, ctx, mu, None)?;
    if !out.converged {
        return Err(RomError::NewtonNotConverged { iterations: out.iterations, residual: out.residual });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Set when the Jacobian was singular; the previous state is carried.
    pub singular: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RomTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<RomState>,
    /// One entry per time step (`states.len() - 1`).
    pub steps: Vec<StepInfo>,
    pub mu_phys: Vec<f64>,
}

impl RomTrajectory {
    pub fn all_converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }
}

/// Time-stepping from `initial` at `t0`. The network parameter at each step
/// is `[t_{n+1}, mu_phys...]` and Newton is warm-started from the previous
/// solution. Non-converged steps are flagged and the run continues.
pub fn solve_unsteady(initial: &RomState, t0: f64, mu_phys: &[f64], ctx: &Context) -> Result<RomTrajectory> {
    let cfg = ctx.config;
    cfg.validate(true)?;
    let mut times = vec![t0];
    let mut states = vec![initial.clone()];
    let mut steps = Vec::with_capacity(cfg.steps);
    for n in 0..cfg.steps {
        let t = t0 + (n + 1) as f64 * cfg.dt;
        let scheme = if n == 0 { TimeScheme::FirstOrder } else { cfg.scheme };
        let c = bdf_coefficients(scheme);
        let cur = &states[n].a;
        let mut hist = cur * c[1];
        if scheme == TimeScheme::SecondOrder {
            hist += &states[n - 1].a * c[2];
        }
        let time = TimeTerm { c0: c[0], hist, dt: cfg.dt };
        let mut mu = vec![t];
        mu.extend_from_slice(mu_phys);
        let info = match newton_solve(&states[n], ctx, &mu, Some(&time)) {
            Ok(o) => {
                if !o.converged {
                    warn!("step {} (t={t:.4}): Newton stopped at residual {:e}", n + 1, o.residual);
                }
                states.push(o.state);
                StepInfo { iterations: o.iterations, residual: o.residual, converged: o.converged, singular: false }
            }
            Err(RomError::SingularJacobian { residual, .. }) => {
                warn!("step {} (t={t:.4}): singular Jacobian", n + 1);
                states.push(states[n].clone());
                StepInfo { iterations: 0, residual, converged: false, singular: true }
            }
            Err(e) => return Err(e),
        };
        steps.push(info);
        times.push(t);
    }
    Ok(RomTrajectory { times, states, steps, mu_phys: mu_phys.to_vec() })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryManifest {
    format: String,
    config: SolverConfig,
    mode: ClosureMode,
    mu: Vec<f64>,
    nu: usize,
    np: usize,
    nodes: usize,
    steps: Vec<StepInfo>,
    record: String,
}

const TRAJ_MAGIC: &[u8; 4] = b"ROMT";

impl RomTrajectory {
    pub fn save(&self, dir: &Path, config: &SolverConfig, mode: ClosureMode) -> Result<()> {
        archive::ensure_dir(dir)?;
        let (n_u, n_p) = (self.states[0].a.len(), self.states[0].b.len());
        archive::write_json(
            &dir.join("manifest.json"),
            &TrajectoryManifest {
                format: FORMAT_VERSION.into(),
                config: config.clone(),
                mode,
                mu: self.mu_phys.clone(),
                nu: n_u,
                np: n_p,
                nodes: self.states.len(),
                steps: self.steps.clone(),
                record: "t | a | b".into(),
            },
        )?;
        let mut v = Vec::new();
        for (t, s) in self.times.iter().zip(&self.states) {
            v.push(*t);
            v.extend_from_slice(s.a.as_slice());
            v.extend_from_slice(s.b.as_slice());
        }
        archive::write_blob(&dir.join("trajectory.bin"), TRAJ_MAGIC, &v)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: TrajectoryManifest = archive::read_json(&mpath)?;
        archive::check_version(&mpath, &m.format)?;
        let bpath = dir.join("trajectory.bin");
        let v = archive::read_blob(&bpath, TRAJ_MAGIC)?;
        let w = 1 + m.nu + m.np;
        if v.len() != w * m.nodes {
            return Err(RomError::format(bpath, "record count does not match the manifest"));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for r in v.chunks_exact(w) {
            times.push(r[0]);
            states.push(RomState {
                a: DVector::from_column_slice(&r[1..1 + m.nu]),
                b: DVector::from_column_slice(&r[1 + m.nu..]),
            });
        }
        Ok(Self { times, states, steps: m.steps, mu_phys: m.mu })
    }
}
