use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{DenseCache, DenseNet};
use crate::error::{Result, RomError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    /// DeepONet: branch on `a`, trunk on `mu`, output `g`.
    #[serde(rename = "G")]
    DeepOnet,
    /// MIONet: branches on `a` and `g`, trunk on `mu`, output `tau`.
    #[serde(rename = "M")]
    MioNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub sub_output: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: vec![20, 20, 20], sub_output: 20 }
    }
}

/// Input sub-networks whose outputs are concatenated and passed through a
/// reduction net.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorNet {
    pub kind: NetKind,
    pub subnets: Vec<DenseNet>,
    pub reduction: DenseNet,
    pub seed: u64,
}

pub struct OperatorCache {
    subs: Vec<DenseCache>,
    red: DenseCache,
}

fn widths(input: usize, arch: &Architecture, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(&arch.hidden);
    w.push(output);
    w
}

impl OperatorNet {
    pub fn new(kind: NetKind, inputs: &[usize], output: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        let expected = match kind {
            NetKind::DeepOnet => 2,
            NetKind::MioNet => 3,
        };
        if inputs.len() != expected {
            return Err(RomError::DimensionMismatch(format!("{kind:?} takes {expected} inputs")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subnets = inputs
            .iter()
            .map(|&n| DenseNet::init(&widths(n, arch, arch.sub_output), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let reduction = DenseNet::init(&widths(arch.sub_output * inputs.len(), arch, output), &mut rng)?;
        Ok(Self { kind, subnets, reduction, seed })
    }

    /// `G(a, mu) -> g`.
    pub fn deeponet(nu: usize, nmu: usize, nnut: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        Self::new(NetKind::DeepOnet, &[nu, nmu], nnut, arch, seed)
    }

    /// `M(a, g, mu) -> tau`.
    pub fn mionet(nu: usize, nnut: usize, nmu: usize, nout: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        Self::new(NetKind::MioNet, &[nu, nnut, nmu], nout, arch, seed)
    }

    pub fn input_widths(&self) -> Vec<usize> {
        self.subnets.iter().map(|s| s.input_width()).collect()
    }

    pub fn output_width(&self) -> usize {
        self.reduction.output_width()
    }

    pub fn forward(&self, inputs: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(inputs)?.0)
    }

    pub fn forward_cached(&self, inputs: &[&DMatrix<f64>]) -> Result<(DMatrix<f64>, OperatorCache)> {
        if inputs.len() != self.subnets.len() {
            return Err(RomError::DimensionMismatch(format!(
                "expected {} inputs, got {}",
                self.subnets.len(),
                inputs.len()
            )));
        }
        let n = inputs[0].nrows();
        if inputs.iter().any(|x| x.nrows() != n) {
            return Err(RomError::DimensionMismatch("inputs differ in sample count".into()));
        }
        let mut outs = Vec::new();
        let mut subs = Vec::new();
        for (net, x) in self.subnets.iter().zip(inputs) {
            let (o, c) = net.forward_cached(x)?;
            outs.push(o);
            subs.push(c);
        }
        let width: usize = outs.iter().map(|o| o.ncols()).sum();
        let mut cat = DMatrix::zeros(n, width);
        let mut c0 = 0;
        for o in &outs {
            cat.columns_mut(c0, o.ncols()).copy_from(o);
            c0 += o.ncols();
        }
        let (y, red) = self.reduction.forward_cached(&cat)?;
        Ok((y, OperatorCache { subs, red }))
    }

    pub fn param_count(&self) -> usize {
        self.subnets.iter().map(|s| s.params.len()).sum::<usize>() + self.reduction.params.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for s in &self.subnets {
            v.extend_from_slice(&s.params);
        }
        v.extend_from_slice(&self.reduction.params);
        v
    }

    pub fn set_flat_params(&mut self, v: &[f64]) {
        let mut o = 0;
        for s in self.subnets.iter_mut().chain(std::iter::once(&mut self.reduction)) {
            let n = s.params.len();
            s.params.copy_from_slice(&v[o..o + n]);
            o += n;
        }
    }

    /// Accumulates into the flat gradient `grad`; returns the input gradients.
    pub fn backward(&self, cache: &OperatorCache, d_out: &DMatrix<f64>, grad: &mut [f64]) -> Vec<DMatrix<f64>> {
        let red_off = self.param_count() - self.reduction.params.len();
        let d_cat = self.reduction.backward(&cache.red, d_out, &mut grad[red_off..]);
        let mut o = 0;
        let mut c0 = 0;
        let mut d_inputs = Vec::new();
        for (net, c) in self.subnets.iter().zip(&cache.subs) {
            let w = net.output_width();
            let d = d_cat.columns(c0, w).into_owned();
            let n = net.params.len();
            d_inputs.push(net.backward(c, &d, &mut grad[o..o + n]));
            o += n;
            c0 += w;
        }
        d_inputs
    }

    /// Zeroes the output layer of the reduction net.
    pub fn zero_output_layer(&mut self) {
        let w = &self.reduction.widths;
        let (n_in, n_out) = (w[w.len() - 2], w[w.len() - 1]);
        let len = self.reduction.params.len();
        for v in &mut self.reduction.params[len - n_in * n_out - n_out..] {
            *v = 0.0;
        }
    }
}
