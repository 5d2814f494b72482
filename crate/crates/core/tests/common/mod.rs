#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rom_core::linalg::Tensor3;
use rom_core::operators::{BoundarySpec, Dims, ReducedOperatorSet};
use rom_core::solver::{solve_unsteady, ConstantViscosity, Context, NoClosure, RomState, SolverConfig, TimeScheme};

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| s * rng.random_range(-1.0..1.0))
}

fn rand_tensor(rng: &mut ChaCha8Rng, d: [usize; 3], s: f64) -> Tensor3 {
    let n = d[0] * d[1] * d[2];
    Tensor3::from_vec(d, (0..n).map(|_| s * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random but well-posed operators: dissipative momentum block, invertible
/// pressure block, one lid boundary built from a sampled trace matrix.
pub fn synthetic_ops(dims: Dims, seed: u64) -> ReducedOperatorSet {
    let Dims { nu, np, nnut } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::identity(nu, nu);
    let b = -DMatrix::identity(nu, nu) * 2.0 + rand_mat(&mut rng, nu, nu, 0.2);
    let bt = rand_mat(&mut rng, nu, nu, 0.2);
    let h = rand_mat(&mut rng, nu, np, 0.3);
    let d = DMatrix::identity(np, np) * 2.0 + rand_mat(&mut rng, np, np, 0.2);
    let n = rand_mat(&mut rng, np, nu, 0.3);
    let c = rand_tensor(&mut rng, [nu, nu, nu], 0.3);
    let g = rand_tensor(&mut rng, [np, nu, nu], 0.3);
    let ct1 = rand_tensor(&mut rng, [nu, nnut, nu], 0.3);
    let ct2 = rand_tensor(&mut rng, [nu, nnut, nu], 0.3);
    let ct3 = rand_tensor(&mut rng, [np, nnut, nu], 0.3);
    let ct4 = rand_tensor(&mut rng, [np, nnut, nu], 0.3);
    let nodes = 7;
    let t = rand_mat(&mut rng, nodes, nu, 1.0);
    let w: Vec<f64> = (0..nodes).map(|_| rng.random_range(0.05..0.2)).collect();
    let wd = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
    let e = t.transpose() * &wd * &t;
    let dk = t.transpose() * DVector::from_vec(w.clone());
    ReducedOperatorSet {
        m,
        b,
        bt,
        h,
        d,
        n,
        c,
        g,
        ct1,
        ct2,
        ct3,
        ct4,
        l: DVector::zeros(np),
        e_k: vec![e],
        d_k: vec![dk],
        dims,
        mu: vec![],
        boundary_length: vec![w.iter().sum()],
    }
}

/// Momentum and pressure residual written out index by index.
#[allow(clippy::too_many_arguments)]
pub fn loop_residual(
    ops: &ReducedOperatorSet,
    bc: &BoundarySpec,
    nu_visc: f64,
    a: &[f64],
    b: &[f64],
    adot: &[f64],
    g: &[f64],
) -> Vec<f64> {
    let Dims { nu, np, nnut } = ops.dims;
    let mut r = vec![0.0; nu + np];
    for i in 0..nu {
        let mut s = 0.0;
        for j in 0..nu {
            s -= ops.m[(i, j)] * adot[j];
            s += nu_visc * (ops.b[(i, j)] + ops.bt[(i, j)]) * a[j];
            for k in 0..nu {
                s -= ops.c.get(i, j, k) * a[j] * a[k];
            }
        }
        for j in 0..nnut {
            for k in 0..nu {
                s += (ops.ct1.get(i, j, k) + ops.ct2.get(i, j, k)) * g[j] * a[k];
            }
        }
        for j in 0..np {
            s -= ops.h[(i, j)] * b[j];
        }
        for (q, (e, d)) in ops.e_k.iter().zip(&ops.d_k).enumerate() {
            let mut ea = 0.0;
            for j in 0..nu {
                ea += e[(i, j)] * a[j];
            }
            s += bc.tau * (bc.values[q] * d[i] - ea);
        }
        r[i] = s;
    }
    for i in 0..np {
        let mut s = 0.0;
        for j in 0..np {
            s += ops.d[(i, j)] * b[j];
        }
        for j in 0..nu {
            for k in 0..nu {
                s += ops.g.get(i, j, k) * a[j] * a[k];
            }
            s -= nu_visc * ops.n[(i, j)] * a[j];
        }
        for j in 0..nnut {
            for k in 0..nu {
                s -= (ops.ct3.get(i, j, k) + ops.ct4.get(i, j, k)) * g[j] * a[k];
            }
        }
        r[nu + i] = s - ops.l[i];
    }
    r
}

pub type ViscosityFn<'a> = &'a dyn Fn(&[f64], &[f64]) -> Vec<f64>;

/// EV-ROM time integration: first step backward Euler, then BDF2, each step
/// solved by full Newton with a central-difference Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn reference_trajectory(
    ops: &ReducedOperatorSet,
    bc: &BoundarySpec,
    nu_visc: f64,
    g_of: ViscosityFn,
    mu_phys: &[f64],
    a0: &[f64],
    b0: &[f64],
    t0: f64,
    dt: f64,
    steps: usize,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (nu, np) = (ops.dims.nu, ops.dims.np);
    let n = nu + np;
    let mut out = vec![(a0.to_vec(), b0.to_vec())];
    for s in 0..steps {
        let t = t0 + (s + 1) as f64 * dt;
        let mut mu = vec![t];
        mu.extend_from_slice(mu_phys);
        let an = out[s].0.clone();
        let am = if s > 0 { Some(out[s - 1].0.clone()) } else { None };
        let f = |x: &[f64]| -> Vec<f64> {
            let a = &x[..nu];
            let adot: Vec<f64> = match &am {
                None => (0..nu).map(|i| (a[i] - an[i]) / dt).collect(),
                Some(am) => (0..nu).map(|i| (3.0 * a[i] - 4.0 * an[i] + am[i]) / (2.0 * dt)).collect(),
            };
            let g = g_of(a, &mu);
            loop_residual(ops, bc, nu_visc, a, &x[nu..], &adot, &g)
        };
        let mut x: Vec<f64> = out[s].0.iter().chain(&out[s].1).copied().collect();
        for _ in 0..60 {
            let r = f(&x);
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn < 1e-14 {
                break;
            }
            let mut j = DMatrix::zeros(n, n);
            for c in 0..n {
                let h = 1e-6 * (1.0 + x[c].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let (fp, fm) = (f(&xp), f(&xm));
                for i in 0..n {
                    j[(i, c)] = (fp[i] - fm[i]) / (2.0 * h);
                }
            }
            let dx = j.lu().solve(&DVector::from_vec(r)).expect("reference Jacobian is singular");
            for i in 0..n {
                x[i] -= dx[i];
            }
        }
        out.push((x[..nu].to_vec(), x[nu..].to_vec()));
    }
    out
}

/// Copy of `ops` with every quadratic tensor zeroed.
pub fn linearized(mut ops: ReducedOperatorSet) -> ReducedOperatorSet {
    let Dims { nu, np, nnut } = ops.dims;
    ops.c = Tensor3::zeros(nu, nu, nu);
    ops.g = Tensor3::zeros(np, nu, nu);
    ops.ct1 = Tensor3::zeros(nu, nnut, nu);
    ops.ct2 = Tensor3::zeros(nu, nnut, nu);
    ops.ct3 = Tensor3::zeros(np, nnut, nu);
    ops.ct4 = Tensor3::zeros(np, nnut, nu);
    ops
}

/// `a' = A a` with `A` a damped rotation; returns the error at `t = 1`.
pub fn manufactured_error(scheme: TimeScheme, dt: f64) -> f64 {
    let dims = Dims::new(2, 1, 1);
    let mut ops = linearized(synthetic_ops(dims, 7));
    ops.m = DMatrix::identity(2, 2);
    ops.b = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -1.0]);
    ops.bt = DMatrix::zeros(2, 2);
    ops.h = DMatrix::zeros(2, 1);
    ops.n = DMatrix::zeros(1, 2);
    ops.d = DMatrix::identity(1, 1);
    ops.e_k.clear();
    ops.d_k.clear();
    ops.boundary_length.clear();
    let bc = BoundarySpec { ids: vec![], values: vec![], tau: 1.0 };
    let steps = (1.0 / dt).round() as usize;
    let cfg = SolverConfig { tolerance: 1e-14, dt, steps, scheme, ..SolverConfig::default() };
    let visc = ConstantViscosity(DVector::zeros(1));
    let ctx = Context { ops: &ops, boundary: &bc, nu: 1.0, viscosity: &visc, closure: &NoClosure(3), config: &cfg };
    let init = RomState { a: DVector::from_vec(vec![1.0, 0.0]), b: DVector::zeros(1) };
    let traj = solve_unsteady(&init, 0.0, &[], &ctx).unwrap();
    let a = &traj.states[steps].a;
    let t: f64 = 1.0;
    let exact = [(-t).exp() * (2.0 * t).cos(), -(-t).exp() * (2.0 * t).sin()];
    ((a[0] - exact[0]).powi(2) + (a[1] - exact[1]).powi(2)).sqrt()
}
