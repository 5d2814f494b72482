use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::operator::OperatorNet;
use crate::closure::ClosureDataset;
use crate::error::{Result, RomError};

/// Normalized training tensors, one sample per row.
#[derive(Clone, Debug)]
pub struct Batch {
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub tau: DMatrix<f64>,
    /// Sensitivity of the normalized correction to the normalized `g`, per sample.
    pub sens: Vec<DMatrix<f64>>,
}

impl Batch {
    pub fn from_dataset(ds: &ClosureDataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(RomError::EmptySplit("batch"));
        }
        let n = indices.len();
        let nrm = &ds.norm;
        let rows = |f: &dyn Fn(usize) -> Vec<f64>, w: usize| {
            let mut m = DMatrix::zeros(n, w);
            for (r, &i) in indices.iter().enumerate() {
                for (c, v) in f(i).into_iter().enumerate() {
                    m[(r, c)] = v;
                }
            }
            m
        };
        let s = &ds.samples;
        let nmu = ds.mu_len();
        let nout = ds.dims.total();
        let a = rows(&|i| nrm.a.normalize(&s[i].a_proj), ds.dims.nu);
        let g = rows(&|i| nrm.g.normalize(&s[i].g_proj), ds.dims.nnut);
        let mu = rows(&|i| nrm.mu.normalize(&s[i].mu), nmu);
        let tau = rows(&|i| nrm.tau.normalize(&s[i].tau_exact), nout);
        let sens = indices
            .iter()
            .map(|&i| {
                let j = s[i].sens_matrix();
                DMatrix::from_fn(nout, ds.dims.nnut, |r, c| j[(r, c)] * nrm.g.scale[c] / nrm.tau.scale[r])
            })
            .collect();
        Ok(Self { a, g, mu, tau, sens })
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    /// Normalized correction with `g` in place of the projected coefficients.
    pub fn tau_target(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let mut t = self.tau.clone();
        for r in 0..self.len() {
            let dg = (g.row(r) - self.g.row(r)).transpose();
            let dt = &self.sens[r] * dg;
            for c in 0..t.ncols() {
                t[(r, c)] += dt[c];
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    G,
    M,
    MG,
    Star,
}

/// Mean over samples of the squared row norms.
pub fn mean_sq(r: &DMatrix<f64>) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>() / r.nrows() as f64
}

pub fn loss_g(g: &OperatorNet, b: &Batch) -> Result<f64> {
    let out = g.forward(&[&b.a, &b.mu])?;
    Ok(mean_sq(&(out - &b.g)))
}

pub fn loss_m(m: &OperatorNet, b: &Batch) -> Result<f64> {
    let out = m.forward(&[&b.a, &b.g, &b.mu])?;
    Ok(mean_sq(&(out - &b.tau)))
}

pub fn loss_mg(m: &OperatorNet, g: &OperatorNet, b: &Batch) -> Result<f64> {
    let gh = g.forward(&[&b.a, &b.mu])?;
    let out = m.forward(&[&b.a, &gh, &b.mu])?;
    Ok(mean_sq(&(out - b.tau_target(&gh))))
}

pub fn loss_star(m: &OperatorNet, g: &OperatorNet, b: &Batch) -> Result<f64> {
    Ok(loss_m(m, b)? + loss_g(g, b)? + loss_mg(m, g, b)?)
}

pub struct LossGrad {
    pub loss: f64,
    pub grad_g: Option<Vec<f64>>,
    pub grad_m: Option<Vec<f64>>,
}

fn need<'a>(o: Option<&'a OperatorNet>, kind: LossKind, name: &str) -> Result<&'a OperatorNet> {
    o.ok_or_else(|| RomError::Config(format!("loss {kind:?} needs network {name}")))
}

/// Loss value and analytic parameter gradients. `g` is used by `G`, `MG`
/// and `Star`; `m` by `M`, `MG` and `Star`.
pub fn loss_and_grad(kind: LossKind, g: Option<&OperatorNet>, m: Option<&OperatorNet>, b: &Batch) -> Result<LossGrad> {
    let n = b.len() as f64;
    let mut out = LossGrad { loss: 0.0, grad_g: None, grad_m: None };
    let mut gg = g.map(|g| vec![0.0; g.param_count()]);
    let mut gm = m.map(|m| vec![0.0; m.param_count()]);
    let use_g = matches!(kind, LossKind::G | LossKind::Star);
    let use_m = matches!(kind, LossKind::M | LossKind::Star);
    let use_mg = matches!(kind, LossKind::MG | LossKind::Star);

    if use_g {
        let g = need(g, kind, "G")?;
        let (y, c) = g.forward_cached(&[&b.a, &b.mu])?;
        let r = y - &b.g;
        out.loss += mean_sq(&r);
        g.backward(&c, &(r * (2.0 / n)), gg.as_mut().unwrap());
    }
    if use_m {
        let m = need(m, kind, "M")?;
        let (y, c) = m.forward_cached(&[&b.a, &b.g, &b.mu])?;
        let r = y - &b.tau;
        out.loss += mean_sq(&r);
        m.backward(&c, &(r * (2.0 / n)), gm.as_mut().unwrap());
    }
    if use_mg {
        let (g, m) = (need(g, kind, "G")?, need(m, kind, "M")?);
        let (gh, cg) = g.forward_cached(&[&b.a, &b.mu])?;
        let (y, cm) = m.forward_cached(&[&b.a, &gh, &b.mu])?;
        let r = y - b.tau_target(&gh);
        out.loss += mean_sq(&r);
        let dr = r * (2.0 / n);
        let d_in = m.backward(&cm, &dr, gm.as_mut().unwrap());
        let mut d_g = d_in[1].clone();
        for s in 0..b.len() {
            let back = b.sens[s].transpose() * dr.row(s).transpose();
            for c in 0..d_g.ncols() {
                d_g[(s, c)] -= back[c];
            }
        }
        g.backward(&cg, &d_g, gg.as_mut().unwrap());
    }
    if use_g || use_mg {
        out.grad_g = gg;
    }
    if use_m || use_mg {
        out.grad_m = gm;
    }
    Ok(out)
}

/// Central-difference check of `loss_and_grad` on every weight. Deviations
/// are relative to `max(|analytic|, |fd|, 1e-4 max|analytic|)`.
pub fn grad_check(
    kind: LossKind,
    g: Option<&OperatorNet>,
    m: Option<&OperatorNet>,
    b: &Batch,
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(RomError::Config(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let an = loss_and_grad(kind, g, m, b)?;
    let value =
        |g: Option<&OperatorNet>, m: Option<&OperatorNet>| -> Result<f64> { Ok(loss_and_grad(kind, g, m, b)?.loss) };
    let mut worst: f64 = 0.0;
    let mut check = |analytic: &[f64], perturb: &mut dyn FnMut(usize, f64) -> Result<f64>| -> Result<()> {
        let scale = analytic.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for (k, &a) in analytic.iter().enumerate() {
            let fd = (perturb(k, eps)? - perturb(k, -eps)?) / (2.0 * eps);
            let denom = a.abs().max(fd.abs()).max(1e-4 * scale).max(f64::MIN_POSITIVE);
            worst = worst.max((a - fd).abs() / denom);
        }
        Ok(())
    };
    if let (Some(grad), Some(gnet)) = (&an.grad_g, g) {
        let base = gnet.flat_params();
        let mut work = gnet.clone();
        check(grad, &mut |k, h| {
            let mut p = base.clone();
            p[k] += h;
            work.set_flat_params(&p);
            value(Some(&work), m)
        })?;
    }
    if let (Some(grad), Some(mnet)) = (&an.grad_m, m) {
        let base = mnet.flat_params();
        let mut work = mnet.clone();
        check(grad, &mut |k, h| {
            let mut p = base.clone();
            p[k] += h;
            work.set_flat_params(&p);
            value(g, Some(&work))
        })?;
    }
    Ok(worst)
}
