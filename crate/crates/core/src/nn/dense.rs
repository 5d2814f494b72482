use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RomError};

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected net. Parameters are stored flat, layer by layer, as the
/// row-major weight matrix (out x in) followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

/// Pre-activations of every layer and the input, kept for backprop.
pub struct DenseCache {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl DenseNet {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(RomError::DimensionMismatch(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self { widths: widths.to_vec(), params: vec![0.0; param_count(widths)] })
    }

    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut o = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in &mut net.params[o..o + w[0] * w[1]] {
                *v = rng.random_range(-bound..bound);
            }
            o += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn nlayers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer(&self, l: usize) -> (usize, DMatrix<f64>, &[f64]) {
        let o: usize = self.widths[..l + 1].windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let w = DMatrix::from_row_slice(n_out, n_in, &self.params[o..o + n_in * n_out]);
        (o, w, &self.params[o + n_in * n_out..o + n_in * n_out + n_out])
    }

    /// `x` holds one sample per row.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DenseCache)> {
        if x.ncols() != self.input_width() {
            return Err(RomError::DimensionMismatch(format!(
                "net expects {} inputs, got {}",
                self.input_width(),
                x.ncols()
            )));
        }
        let mut pre = Vec::with_capacity(self.nlayers());
        let mut h = x.clone();
        for l in 0..self.nlayers() {
            let (_, w, b) = self.layer(l);
            let mut z = &h * w.transpose();
            for mut row in z.row_iter_mut() {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            h = if l + 1 < self.nlayers() { z.map(softplus) } else { z.clone() };
            pre.push(z);
        }
        Ok((h, DenseCache { input: x.clone(), pre }))
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &DenseCache, d_out: &DMatrix<f64>, grad: &mut [f64]) -> DMatrix<f64> {
        let nl = self.nlayers();
        let mut delta = d_out.clone();
        for l in (0..nl).rev() {
            let (o, w, _) = self.layer(l);
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let h_in = if l == 0 { cache.input.clone() } else { cache.pre[l - 1].map(softplus) };
            let gw = delta.transpose() * &h_in;
            for r in 0..n_out {
                for c in 0..n_in {
                    grad[o + r * n_in + c] += gw[(r, c)];
                }
                grad[o + n_in * n_out + r] += delta.column(r).sum();
            }
            let mut d_in = &delta * &w;
            if l > 0 {
                d_in.zip_apply(&cache.pre[l - 1], |d, z| *d *= sigmoid(z));
            }
            delta = d_in;
        }
        delta
    }
}
