use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::loss::{self, loss_and_grad, Batch, LossKind};
use super::operator::OperatorNet;
use crate::error::{Result, RomError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub n_step: usize,
    pub coupled_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20000,
            lr: 1e-3,
            gamma: 0.2,
            n_step: 3000,
            coupled_epochs: 20000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.n_step == 0 {
            return Err(RomError::Config("epochs and n_step must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RomError::Config(format!("decay factor {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// `lr * gamma^floor(epoch / n_step)`, by repeated multiplication.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for _ in 0..epoch / self.n_step {
            lr *= self.gamma;
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    StandardG,
    StandardM,
    CoupledStar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub final_train: f64,
    pub final_test: Option<f64>,
}

impl TrainReport {
    pub fn running_min(&self) -> Vec<f64> {
        let mut m = f64::INFINITY;
        self.loss_history
            .iter()
            .map(|&v| {
                m = m.min(v);
                m
            })
            .collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * grad[k];
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

fn eval(kind: LossKind, g: Option<&OperatorNet>, m: Option<&OperatorNet>, b: &Batch) -> Result<f64> {
    match kind {
        LossKind::G => loss::loss_g(g.unwrap(), b),
        LossKind::M => loss::loss_m(m.unwrap(), b),
        LossKind::MG => loss::loss_mg(m.unwrap(), g.unwrap(), b),
        LossKind::Star => loss::loss_star(m.unwrap(), g.unwrap(), b),
    }
}

/// Full-batch Adam. `StandardG` updates `g` on its own loss, `StandardM`
/// updates `m` on projected inputs, `CoupledStar` updates both (with a
/// pre-trained `g`) for `coupled_epochs`.
pub fn train(
    mode: TrainMode,
    g: Option<&mut OperatorNet>,
    m: Option<&mut OperatorNet>,
    train_batch: &Batch,
    test_batch: Option<&Batch>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let missing = |n: &str| RomError::Config(format!("training mode {mode:?} needs network {n}"));
    let (kind, epochs, mut g, mut m) = match mode {
        TrainMode::StandardG => (LossKind::G, cfg.epochs, Some(g.ok_or_else(|| missing("G"))?), None),
        TrainMode::StandardM => (LossKind::M, cfg.epochs, None, Some(m.ok_or_else(|| missing("M"))?)),
        TrainMode::CoupledStar => (
            LossKind::Star,
            cfg.coupled_epochs,
            Some(g.ok_or_else(|| missing("G"))?),
            Some(m.ok_or_else(|| missing("M"))?),
        ),
    };
    if epochs == 0 {
        return Err(RomError::Config("epochs must be positive".into()));
    }
    let mut adam_g = g.as_ref().map(|n| Adam::new(n.param_count()));
    let mut adam_m = m.as_ref().map(|n| Adam::new(n.param_count()));
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lg = loss_and_grad(kind, g.as_deref(), m.as_deref(), train_batch)?;
        if !lg.loss.is_finite() {
            return Err(RomError::NonFiniteLoss { epoch });
        }
        history.push(lg.loss);
        let lr = cfg.learning_rate(epoch);
        if let (Some(net), Some(grad), Some(opt)) = (g.as_deref_mut(), &lg.grad_g, adam_g.as_mut()) {
            let mut p = net.flat_params();
            opt.step(cfg, lr, &mut p, grad);
            net.set_flat_params(&p);
        }
        if let (Some(net), Some(grad), Some(opt)) = (m.as_deref_mut(), &lg.grad_m, adam_m.as_mut()) {
            let mut p = net.flat_params();
            opt.step(cfg, lr, &mut p, grad);
            net.set_flat_params(&p);
        }
        if epoch % 1000 == 0 {
            debug!("{mode:?} epoch {epoch}: loss {:.6e}, lr {lr:e}", lg.loss);
        }
    }
    let final_train = eval(kind, g.as_deref(), m.as_deref(), train_batch)?;
    if !final_train.is_finite() {
        return Err(RomError::NonFiniteLoss { epoch: epochs });
    }
    let final_test = test_batch.map(|b| eval(kind, g.as_deref(), m.as_deref(), b)).transpose()?;
    info!("{mode:?}: final train loss {final_train:.4e}, test {final_test:?}");
    Ok(TrainReport { mode, epochs, loss_history: history, final_train, final_test })
}
