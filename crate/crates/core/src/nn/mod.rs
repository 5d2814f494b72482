//! Dense Softplus networks, the DeepONet `G` and MIONet `M` operator
//! networks, their losses and training.

pub mod dense;
pub mod io;
pub mod loss;
pub mod operator;
pub mod train;

use nalgebra::{DMatrix, DVector};

pub use dense::DenseNet;
pub use io::{load_weights, save_weights};
pub use loss::{grad_check, loss_and_grad, loss_g, loss_m, loss_mg, loss_star, Batch, LossKind};
pub use operator::{Architecture, NetKind, OperatorNet};
pub use train::{train, TrainConfig, TrainMode, TrainReport};

use crate::closure::Normalization;
use crate::error::Result;

/// Trained `G` and `M` with the normalization they were trained under;
/// maps raw coefficients to raw coefficients.
#[derive(Clone, Debug)]
pub struct ClosureNets {
    pub g: OperatorNet,
    pub m: OperatorNet,
    pub norm: Normalization,
}

fn row(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v)
}

impl ClosureNets {
    pub fn predict_g(&self, a: &[f64], mu: &[f64]) -> Result<DVector<f64>> {
        let y = self.g.forward(&[&row(&self.norm.a.normalize(a)), &row(&self.norm.mu.normalize(mu))])?;
        Ok(DVector::from_vec(self.norm.g.denormalize(y.row(0).transpose().as_slice())))
    }

    pub fn predict_tau(&self, a: &[f64], g: &[f64], mu: &[f64]) -> Result<DVector<f64>> {
        let y = self.m.forward(&[
            &row(&self.norm.a.normalize(a)),
            &row(&self.norm.g.normalize(g)),
            &row(&self.norm.mu.normalize(mu)),
        ])?;
        Ok(DVector::from_vec(self.norm.tau.denormalize(y.row(0).transpose().as_slice())))
    }
}
