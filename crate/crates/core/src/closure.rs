//! Exact closure terms from two-resolution operator evaluations, the
//! training dataset built from them, and the quadratic-ansatz baseline.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::error::{Result, RomError};
use crate::fom::SnapshotSet;
use crate::linalg::Tensor3;
use crate::operators::{Dims, ReducedOperatorSet};
use crate::pod::{project, PodBasis};

/// `[-a^T C a + g^T (C_T1 + C_T2) a ; a^T G a - g^T (C_T3 + C_T4) a]`, the
/// turbulence terms only when `with_turbulence` is set.
pub fn evaluate_operator(
    a: &DVector<f64>,
    g: &DVector<f64>,
    ops: &ReducedOperatorSet,
    with_turbulence: bool,
) -> DVector<f64> {
    let Dims { nu, np, .. } = ops.dims;
    let mut out = DVector::zeros(nu + np);
    let mom = ops.c.contract(a.as_slice(), a.as_slice());
    let pre = ops.g.contract(a.as_slice(), a.as_slice());
    for i in 0..nu {
        out[i] = -mom[i];
    }
    for i in 0..np {
        out[nu + i] = pre[i];
    }
    if with_turbulence {
        let t12 = ops.ct1.contract(g.as_slice(), a.as_slice()) + ops.ct2.contract(g.as_slice(), a.as_slice());
        let t34 = ops.ct3.contract(g.as_slice(), a.as_slice()) + ops.ct4.contract(g.as_slice(), a.as_slice());
        for i in 0..nu {
            out[i] += t12[i];
        }
        for i in 0..np {
            out[nu + i] -= t34[i];
        }
    }
    out
}

/// Keeps the first `small.nu` momentum and first `small.np` pressure entries.
pub fn truncate(v: &DVector<f64>, big: Dims, small: Dims) -> DVector<f64> {
    let mut out = DVector::zeros(small.total());
    for i in 0..small.nu {
        out[i] = v[i];
    }
    for i in 0..small.np {
        out[small.nu + i] = v[big.nu + i];
    }
    out
}

/// Small and big operator sets sharing hierarchical bases.
#[derive(Clone, Debug)]
pub struct ClosurePair {
    pub small: ReducedOperatorSet,
    pub big: ReducedOperatorSet,
    /// `(C_T1+C_T2, C_T3+C_T4)` at both resolutions.
    t_small: (Tensor3, Tensor3),
    t_big: (Tensor3, Tensor3),
}

impl ClosurePair {
    pub fn new(small: ReducedOperatorSet, big: ReducedOperatorSet) -> Result<Self> {
        let (s, b) = (small.dims, big.dims);
        if b.nu < s.nu || b.np < s.np {
            return Err(RomError::DimensionMismatch(format!("big dims {b:?} smaller than {s:?}")));
        }
        if b.nnut != s.nnut {
            return Err(RomError::DimensionMismatch(format!(
                "eddy-viscosity dimension must agree ({} vs {})",
                s.nnut, b.nnut
            )));
        }
        let lc = big.c.leading(s.nu, s.nu, s.nu);
        let lg = big.g.leading(s.np, s.nu, s.nu);
        let scale = big.c.max_abs().max(big.g.max_abs()).max(1.0);
        let dc = lc.max_abs_diff(&small.c);
        let dg = lg.max_abs_diff(&small.g);
        if dc > 1e-12 * scale || dg > 1e-12 * scale {
            return Err(RomError::NonHierarchical(format!("leading blocks differ by {:e} (C) and {:e} (G)", dc, dg)));
        }
        let t_small = small.turbulence_sums();
        let t_big = big.turbulence_sums();
        Ok(Self { small, big, t_small, t_big })
    }

    /// `tau = truncate(C_big(a_hat, g)) - C_small(a, g)` with `a` the leading part of `a_hat`.
    pub fn exact_correction(&self, a_hat: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let a = a_hat.rows(0, self.small.dims.nu).into_owned();
        let big = evaluate_operator(a_hat, g, &self.big, true);
        truncate(&big, self.big.dims, self.small.dims) - evaluate_operator(&a, g, &self.small, true)
    }

    /// `d tau / d g`; the correction is affine in `g`.
    pub fn sensitivity(&self, a_hat: &DVector<f64>) -> DMatrix<f64> {
        let s = self.small.dims;
        let a = a_hat.rows(0, s.nu).into_owned();
        let big12 = self.t_big.0.contract_second(a_hat.as_slice());
        let big34 = self.t_big.1.contract_second(a_hat.as_slice());
        let sm12 = self.t_small.0.contract_second(a.as_slice());
        let sm34 = self.t_small.1.contract_second(a.as_slice());
        let mut j = DMatrix::zeros(s.total(), s.nnut);
        for k in 0..s.nnut {
            for i in 0..s.nu {
                j[(i, k)] = big12[(i, k)] - sm12[(i, k)];
            }
            for i in 0..s.np {
                j[(s.nu + i, k)] = -(big34[(i, k)] - sm34[(i, k)]);
            }
        }
        j
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureSample {
    pub a_proj: Vec<f64>,
    pub g_proj: Vec<f64>,
    pub mu: Vec<f64>,
    pub tau_exact: Vec<f64>,
    /// `d tau / d g`, row-major `(N_u + N_p) x N_nut`.
    pub sensitivity: Vec<f64>,
}

impl ClosureSample {
    pub fn sens_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.tau_exact.len(), self.g_proj.len(), &self.sensitivity)
    }

    /// Exact correction with eddy-viscosity coefficients `g` in place of `g_proj`.
    pub fn tau_at(&self, g: &[f64]) -> Vec<f64> {
        let (n, m) = (self.tau_exact.len(), self.g_proj.len());
        (0..n)
            .map(|i| {
                self.tau_exact[i] + (0..m).map(|k| self.sensitivity[i * m + k] * (g[k] - self.g_proj[k])).sum::<f64>()
            })
            .collect()
    }
}

/// Per-channel affine map `x_n = (x - offset) / scale` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ChannelNorm {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Self {
        let mut lo = vec![f64::INFINITY; width];
        let mut hi = vec![f64::NEG_INFINITY; width];
        for r in rows {
            for k in 0..width {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
        let mut offset = vec![0.0; width];
        let mut scale = vec![1.0; width];
        for k in 0..width {
            if !lo[k].is_finite() {
                continue;
            }
            offset[k] = 0.5 * (hi[k] + lo[k]);
            let half = 0.5 * (hi[k] - lo[k]);
            if half > 1e-14 * hi[k].abs().max(lo[k].abs()).max(1e-300) {
                scale[k] = half;
            }
        }
        Self { offset, scale }
    }

    pub fn identity(width: usize) -> Self {
        Self { offset: vec![0.0; width], scale: vec![1.0; width] }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.offset).zip(&self.scale).map(|((v, o), s)| (v - o) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.offset).zip(&self.scale).map(|((v, o), s)| v * s + o).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub a: ChannelNorm,
    pub g: ChannelNorm,
    pub mu: ChannelNorm,
    pub tau: ChannelNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Indices into the snapshot set's parameter list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureDataset {
    pub dims: Dims,
    pub k: f64,
    pub samples: Vec<ClosureSample>,
    /// Parameter-group index of each sample.
    pub group: Vec<usize>,
    pub split: SplitSpec,
    pub norm: Normalization,
}

impl ClosureDataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split.train.contains(&self.group[i])).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split.test.contains(&self.group[i])).collect()
    }

    pub fn mu_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.mu.len())
    }
}

/// One sample per frame. `pairs` holds either a single shared pair or one
/// pair per parameter group (geometric families).
pub fn build_dataset(
    set: &SnapshotSet,
    ub: &PodBasis,
    nb: &PodBasis,
    pairs: &[ClosurePair],
    split: SplitSpec,
    k: f64,
) -> Result<ClosureDataset> {
    if pairs.is_empty() {
        return Err(RomError::Config("no operator pairs given".into()));
    }
    if split.train.is_empty() {
        return Err(RomError::EmptySplit("train"));
    }
    if split.train.iter().any(|p| split.test.contains(p)) {
        return Err(RomError::Config("train and test parameters overlap".into()));
    }
    let np_ = set.params.len();
    if split.train.iter().chain(&split.test).any(|&p| p >= np_) {
        return Err(RomError::Config("split refers to an unknown parameter".into()));
    }
    let dims = pairs[0].small.dims;
    let nu_big = pairs[0].big.dims.nu;
    let mut samples = Vec::with_capacity(set.frames.len());
    for (f, &gi) in set.frames.iter().zip(&set.group) {
        let pair = if pairs.len() == 1 { &pairs[0] } else { &pairs[gi] };
        let a_hat = project(&f.u, ub, nu_big)?;
        let g = project(&f.nut, nb, dims.nnut)?;
        let tau = pair.exact_correction(&a_hat, &g);
        let sens = pair.sensitivity(&a_hat);
        samples.push(ClosureSample {
            a_proj: a_hat.as_slice()[..dims.nu].to_vec(),
            g_proj: g.as_slice().to_vec(),
            mu: f.mu.clone(),
            tau_exact: tau.as_slice().to_vec(),
            sensitivity: sens.transpose().as_slice().to_vec(),
        });
    }
    let train: Vec<&ClosureSample> =
        samples.iter().zip(&set.group).filter(|(_, g)| split.train.contains(g)).map(|(s, _)| s).collect();
    if train.is_empty() {
        return Err(RomError::EmptySplit("train"));
    }
    let nmu = train[0].mu.len();
    let norm = Normalization {
        a: ChannelNorm::fit(train.iter().map(|s| s.a_proj.as_slice()), dims.nu),
        g: ChannelNorm::fit(train.iter().map(|s| s.g_proj.as_slice()), dims.nnut),
        mu: ChannelNorm::fit(train.iter().map(|s| s.mu.as_slice()), nmu),
        tau: ChannelNorm::fit(train.iter().map(|s| s.tau_exact.as_slice()), dims.total()),
    };
    Ok(ClosureDataset { dims, k, samples, group: set.group.clone(), split, norm })
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    dims: Dims,
    k: f64,
    split: SplitSpec,
    normalization: Normalization,
    samples: usize,
    mu_len: usize,
    group: Vec<usize>,
    record: String,
}

const DATA_MAGIC: &[u8; 4] = b"ROMD";

impl ClosureDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::ensure_dir(dir)?;
        archive::write_json(
            &dir.join("manifest.json"),
            &DatasetManifest {
                format: FORMAT_VERSION.into(),
                dims: self.dims,
                k: self.k,
                split: self.split.clone(),
                normalization: self.norm.clone(),
                samples: self.samples.len(),
                mu_len: self.mu_len(),
                group: self.group.clone(),
                record: "a_proj | g_proj | mu | tau_exact".into(),
            },
        )?;
        let mut rec = Vec::new();
        let mut sens = Vec::new();
        for s in &self.samples {
            rec.extend_from_slice(&s.a_proj);
            rec.extend_from_slice(&s.g_proj);
            rec.extend_from_slice(&s.mu);
            rec.extend_from_slice(&s.tau_exact);
            sens.extend_from_slice(&s.sensitivity);
        }
        archive::write_blob(&dir.join("samples.bin"), DATA_MAGIC, &rec)?;
        archive::write_blob(&dir.join("sensitivity.bin"), DATA_MAGIC, &sens)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: DatasetManifest = archive::read_json(&mpath)?;
        archive::check_version(&mpath, &m.format)?;
        let Dims { nu, np, nnut } = m.dims;
        let width = nu + nnut + m.mu_len + nu + np;
        let swidth = (nu + np) * nnut;
        let rpath = dir.join("samples.bin");
        let rec = archive::read_blob(&rpath, DATA_MAGIC)?;
        let sens = archive::read_blob(&dir.join("sensitivity.bin"), DATA_MAGIC)?;
        if rec.len() != width * m.samples || sens.len() != swidth * m.samples {
            return Err(RomError::format(rpath, "sample block size does not match the manifest"));
        }
        let samples = (0..m.samples)
            .map(|i| {
                let r = &rec[i * width..(i + 1) * width];
                let mut o = 0;
                let mut take = |n: usize| {
                    let v = r[o..o + n].to_vec();
                    o += n;
                    v
                };
                ClosureSample {
                    a_proj: take(nu),
                    g_proj: take(nnut),
                    mu: take(m.mu_len),
                    tau_exact: take(nu + np),
                    sensitivity: sens[i * swidth..(i + 1) * swidth].to_vec(),
                }
            })
            .collect();
        Ok(Self { dims: m.dims, k: m.k, samples, group: m.group, split: m.split, norm: m.normalization })
    }
}

/// `M(a) = A (a, 0) + (a, 0)^T B (a, 0)` over `N_u + N_p` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticAnsatz {
    pub nu: usize,
    pub a_tilde: DMatrix<f64>,
    pub b_tilde: Tensor3,
    /// Fewer samples than monomial features at fit time.
    pub underdetermined: bool,
}

/// Singular values below this fraction of the largest are dropped.
pub const RCOND: f64 = 1e-12;

fn features(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut z = a.to_vec();
    for i in 0..n {
        for j in i..n {
            z.push(a[i] * a[j]);
        }
    }
    z
}

/// Least squares over the monomials `(a_i, a_i a_j)` by SVD of the feature
/// matrix, minimum-norm when the samples do not determine every coefficient.
pub fn fit_quadratic_ansatz(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<QuadraticAnsatz> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(RomError::EmptySplit("train"));
    }
    let nu = inputs[0].len();
    let nout = targets[0].len();
    let nf = nu + nu * (nu + 1) / 2;
    let x = DMatrix::from_fn(inputs.len(), nf, |r, c| features(&inputs[r])[c]);
    let y = DMatrix::from_fn(targets.len(), nout, |r, c| targets[r][c]);
    let underdetermined = inputs.len() < nf;
    if underdetermined {
        warn!("quadratic ansatz: {} samples for {} features", inputs.len(), nf);
    }
    let svd = x.svd(true, true);
    let tol = RCOND * svd.singular_values.max();
    let theta = svd.solve(&y, tol).map_err(|e| RomError::Config(format!("quadratic ansatz fit failed: {e}")))?;
    let n = nout.max(nu);
    let mut a_tilde = DMatrix::zeros(nout, n);
    let mut b_tilde = Tensor3::zeros(nout, n, n);
    for o in 0..nout {
        for i in 0..nu {
            a_tilde[(o, i)] = theta[(i, o)];
        }
        let mut f = nu;
        for i in 0..nu {
            for j in i..nu {
                let v = theta[(f, o)];
                if i == j {
                    b_tilde.set(o, i, i, v);
                } else {
                    b_tilde.set(o, i, j, 0.5 * v);
                    b_tilde.set(o, j, i, 0.5 * v);
                }
                f += 1;
            }
        }
    }
    Ok(QuadraticAnsatz { nu, a_tilde, b_tilde, underdetermined })
}

#[derive(Serialize, Deserialize)]
struct AnsatzManifest {
    format: String,
    nu: usize,
    outputs: usize,
    width: usize,
    underdetermined: bool,
    /// The ansatz acts on the velocity coefficients padded with zeros.
    input: String,
}

const ANSATZ_MAGIC: &[u8; 4] = b"ROMQ";

impl QuadraticAnsatz {
    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::ensure_dir(dir)?;
        archive::write_json(
            &dir.join("manifest.json"),
            &AnsatzManifest {
                format: FORMAT_VERSION.into(),
                nu: self.nu,
                outputs: self.a_tilde.nrows(),
                width: self.a_tilde.ncols(),
                underdetermined: self.underdetermined,
                input: "zero-padded (a, 0)".into(),
            },
        )?;
        archive::write_blob(&dir.join("a_tilde.bin"), ANSATZ_MAGIC, self.a_tilde.transpose().as_slice())?;
        archive::write_blob(&dir.join("b_tilde.bin"), ANSATZ_MAGIC, self.b_tilde.data())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: AnsatzManifest = archive::read_json(&mpath)?;
        archive::check_version(&mpath, &m.format)?;
        let a = archive::read_blob(&dir.join("a_tilde.bin"), ANSATZ_MAGIC)?;
        if a.len() != m.outputs * m.width {
            return Err(RomError::format(dir.join("a_tilde.bin"), "size does not match the manifest"));
        }
        let b = archive::read_blob(&dir.join("b_tilde.bin"), ANSATZ_MAGIC)?;
        let b_tilde = Tensor3::from_vec([m.outputs, m.width, m.width], b)
            .map_err(|e| RomError::format(dir.join("b_tilde.bin"), e.to_string()))?;
        Ok(Self {
            nu: m.nu,
            a_tilde: DMatrix::from_row_slice(m.outputs, m.width, &a),
            b_tilde,
            underdetermined: m.underdetermined,
        })
    }
}

pub fn fit_quadratic_ansatz_dataset(ds: &ClosureDataset, indices: &[usize]) -> Result<QuadraticAnsatz> {
    let mu0 = indices.first().map(|&i| ds.samples[i].mu.get(1..).unwrap_or(&[]).to_vec());
    if indices.iter().any(|&i| Some(ds.samples[i].mu.get(1..).unwrap_or(&[]).to_vec()) != mu0) {
        return Err(RomError::Config("the quadratic ansatz needs a single physical parameter (time only)".into()));
    }
    let a: Vec<Vec<f64>> = indices.iter().map(|&i| ds.samples[i].a_proj.clone()).collect();
    let t: Vec<Vec<f64>> = indices.iter().map(|&i| ds.samples[i].tau_exact.clone()).collect();
    fit_quadratic_ansatz(&a, &t)
}

pub fn evaluate_quadratic_ansatz(qa: &QuadraticAnsatz, a: &[f64]) -> DVector<f64> {
    let n = qa.a_tilde.ncols();
    let mut pad = vec![0.0; n];
    pad[..a.len()].copy_from_slice(a);
    let lin = &qa.a_tilde * DVector::from_column_slice(&pad);
    lin + qa.b_tilde.contract(&pad, &pad)
}
