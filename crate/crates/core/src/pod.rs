//! POD by the method of snapshots under a mass-weighted inner product.
//!
//! Velocity modes carry a lid trace: the same linear combination of the
//! snapshot traces as of the interior values. Traces do not enter the inner
//! product.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::error::{Result, RomError};
use crate::fom::SnapshotSet;
use crate::grid::GridSpec;
use crate::stencil::VelField;

pub const EIGEN_FLOOR: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    U,
    P,
    Nut,
}

impl std::str::FromStr for FieldKind {
    type Err = RomError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u" => Ok(FieldKind::U),
            "p" => Ok(FieldKind::P),
            "nut" => Ok(FieldKind::Nut),
            _ => Err(RomError::Config(format!("unknown field kind {s:?} (expected u, p or nut)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerProduct {
    pub weights: Vec<f64>,
}

impl InnerProduct {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(RomError::Config("inner-product weights must be positive".into()));
        }
        Ok(Self { weights })
    }

    /// Cell areas, repeated per velocity component.
    pub fn for_field(grid: &GridSpec, kind: FieldKind) -> Self {
        let w = match kind {
            FieldKind::U => [grid.cell_areas.clone(), grid.cell_areas.clone()].concat(),
            _ => grid.cell_areas.clone(),
        };
        Self { weights: w }
    }

    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        crate::linalg::wdot(&self.weights, a, b)
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).sqrt()
    }

    pub fn checksum(&self) -> String {
        archive::f64_checksum(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub field_kind: FieldKind,
    /// One mode per column.
    pub modes: DMatrix<f64>,
    /// Lid traces `[top_x; top_y]` per mode (velocity only).
    pub traces: Option<DMatrix<f64>>,
    /// All eigenvalues above the floor, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub ip: InnerProduct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergySpectrum {
    pub cumulative: Vec<f64>,
}

impl EnergySpectrum {
    pub fn from_eigenvalues(ev: &[f64]) -> Self {
        let total: f64 = ev.iter().sum();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = ev
            .iter()
            .map(|v| {
                acc += v;
                if total > 0.0 {
                    acc / total
                } else {
                    1.0
                }
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Self { cumulative }
    }
}

/// Snapshot matrix of one field (one column per frame) and, for velocity,
/// the matching lid-trace matrix.
pub fn snapshot_matrix(set: &SnapshotSet, kind: FieldKind) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let cols: Vec<&Vec<f64>> = set
        .frames
        .iter()
        .map(|f| match kind {
            FieldKind::U => &f.u,
            FieldKind::P => &f.p,
            FieldKind::Nut => &f.nut,
        })
        .collect();
    let n = cols.first().map_or(0, |c| c.len());
    let s = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    let traces = (kind == FieldKind::U).then(|| {
        let nx = set.grid.nx;
        DMatrix::from_fn(2 * nx, cols.len(), |r, _| if r < nx { set.lid_velocity } else { 0.0 })
    });
    (s, traces)
}

/// `K_ij = s_i^T diag(w) s_j`.
pub fn correlation_matrix(s: &DMatrix<f64>, ip: &InnerProduct) -> Result<DMatrix<f64>> {
    if s.nrows() != ip.weights.len() {
        return Err(RomError::DimensionMismatch(format!(
            "snapshots have {} dofs, inner product {}",
            s.nrows(),
            ip.weights.len()
        )));
    }
    let ws = DMatrix::from_fn(s.nrows(), s.ncols(), |r, c| ip.weights[r] * s[(r, c)]);
    let k = s.transpose() * ws;
    // exact symmetry
    Ok(DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| if i <= j { k[(i, j)] } else { k[(j, i)] }))
}

pub fn compute_basis(
    k: &DMatrix<f64>,
    s: &DMatrix<f64>,
    traces: Option<&DMatrix<f64>>,
    ip: &InnerProduct,
    kind: FieldKind,
    rank: usize,
) -> Result<PodBasis> {
    if k.nrows() != s.ncols() || k.ncols() != s.ncols() {
        return Err(RomError::DimensionMismatch("correlation matrix does not match snapshots".into()));
    }
    let eig = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lmax = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let kept: Vec<usize> =
        order.into_iter().take_while(|&i| lmax > 0.0 && eig.eigenvalues[i] > EIGEN_FLOOR * lmax).collect();
    if rank > kept.len() {
        return Err(RomError::RankDeficient { requested: rank, achievable: kept.len() });
    }
    let n = s.nrows();
    let nt = traces.map_or(0, |t| t.nrows());
    let mut modes = DMatrix::zeros(n, rank);
    let mut tmodes = DMatrix::zeros(nt, rank);
    for m in 0..rank {
        let idx = kept[m];
        let lam = eig.eigenvalues[idx];
        let v = eig.eigenvectors.column(idx);
        let mut phi: DVector<f64> = s * v / lam.sqrt();
        let mut tr: DVector<f64> = match traces {
            Some(t) => t * v / lam.sqrt(),
            None => DVector::zeros(0),
        };
        // modified Gram-Schmidt against the previous modes, twice
        for _ in 0..2 {
            for q in 0..m {
                let prev = modes.column(q);
                let c = ip.dot(phi.as_slice(), prev.as_slice());
                phi -= c * prev;
                if nt > 0 {
                    tr -= c * tmodes.column(q);
                }
            }
        }
        let norm = ip.norm(phi.as_slice());
        phi /= norm;
        tr /= norm;
        let (imax, _) = phi.iter().enumerate().fold(
            (0, 0.0),
            |(bi, bv), (i, x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            },
        );
        if phi[imax] < 0.0 {
            phi = -phi;
            tr = -tr;
        }
        modes.set_column(m, &phi);
        if nt > 0 {
            tmodes.set_column(m, &tr);
        }
    }
    Ok(PodBasis {
        field_kind: kind,
        modes,
        traces: traces.map(|_| tmodes),
        eigenvalues: kept.iter().map(|&i| eig.eigenvalues[i]).collect(),
        ip: ip.clone(),
    })
}

/// Convenience: basis of one field of a snapshot set.
pub fn basis_from_snapshots(set: &SnapshotSet, kind: FieldKind, rank: usize) -> Result<PodBasis> {
    let ip = InnerProduct::for_field(&set.grid, kind);
    let (s, t) = snapshot_matrix(set, kind);
    let k = correlation_matrix(&s, &ip)?;
    compute_basis(&k, &s, t.as_ref(), &ip, kind, rank)
}

pub fn select_modes_by_energy(spectrum: &EnergySpectrum, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(RomError::Config(format!("energy threshold {threshold} outside (0, 1]")));
    }
    Ok(spectrum.cumulative.iter().position(|&c| c >= threshold).map_or(spectrum.cumulative.len(), |k| k + 1))
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn spectrum(&self) -> EnergySpectrum {
        EnergySpectrum::from_eigenvalues(&self.eigenvalues)
    }

    /// Leading `n` modes.
    pub fn truncate(&self, n: usize) -> Result<PodBasis> {
        if n > self.rank() {
            return Err(RomError::RankDeficient { requested: n, achievable: self.rank() });
        }
        Ok(PodBasis {
            field_kind: self.field_kind,
            modes: self.modes.columns(0, n).into_owned(),
            traces: self.traces.as_ref().map(|t| t.columns(0, n).into_owned()),
            eigenvalues: self.eigenvalues.clone(),
            ip: self.ip.clone(),
        })
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        let n = self.modes.nrows();
        &self.modes.as_slice()[k * n..(k + 1) * n]
    }

    /// Velocity mode as a field with its lid trace.
    pub fn vel_mode(&self, grid: &GridSpec, k: usize) -> VelField {
        let mut ext = self.mode(k).to_vec();
        match &self.traces {
            Some(t) => ext.extend(t.column(k).iter()),
            None => ext.extend(std::iter::repeat_n(0.0, 2 * grid.nx)),
        }
        VelField::from_extended(grid, &ext)
    }

    /// Largest entry of `modes^T W modes - I`.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.rank();
        let mut m: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let v = self.ip.dot(self.mode(i), self.mode(j)) - if i == j { 1.0 } else { 0.0 };
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// `a_i = (field, phi_i)` for the first `n` modes.
pub fn project(field: &[f64], basis: &PodBasis, n: usize) -> Result<DVector<f64>> {
    if n > basis.rank() {
        return Err(RomError::RankDeficient { requested: n, achievable: basis.rank() });
    }
    if field.len() != basis.modes.nrows() {
        return Err(RomError::DimensionMismatch(format!(
            "field has {} dofs, basis {}",
            field.len(),
            basis.modes.nrows()
        )));
    }
    Ok(DVector::from_fn(n, |i, _| basis.ip.dot(field, basis.mode(i))))
}

pub fn reconstruct(coeffs: &[f64], basis: &PodBasis) -> Result<DVector<f64>> {
    if coeffs.len() > basis.rank() {
        return Err(RomError::DimensionMismatch(format!(
            "{} coefficients for a rank-{} basis",
            coeffs.len(),
            basis.rank()
        )));
    }
    let mut out = DVector::zeros(basis.modes.nrows());
    for (k, a) in coeffs.iter().enumerate() {
        out += *a * basis.modes.column(k);
    }
    Ok(out)
}

/// Lid trace of the reconstructed velocity.
pub fn reconstruct_trace(coeffs: &[f64], basis: &PodBasis) -> Option<DVector<f64>> {
    basis.traces.as_ref().map(|t| {
        let mut out = DVector::zeros(t.nrows());
        for (k, a) in coeffs.iter().enumerate() {
            out += *a * t.column(k);
        }
        out
    })
}

#[derive(Serialize, Deserialize)]
struct BasisManifest {
    format: String,
    field_kind: FieldKind,
    rank: usize,
    ndof: usize,
    eigenvalues: Vec<f64>,
    inner_product_checksum: String,
    mean_subtracted: bool,
    has_traces: bool,
}

const MODE_MAGIC: &[u8; 4] = b"ROMS";
const AUX_MAGIC: &[u8; 4] = b"ROMB";

impl PodBasis {
    /// Modes are written one file each in the snapshot frame layout, with the
    /// mode in its field's slot, zeros elsewhere, `t` = mode index and no `mu`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::ensure_dir(dir)?;
        let n = self.modes.nrows();
        let nc = match self.field_kind {
            FieldKind::U => n / 2,
            _ => n,
        };
        let m = BasisManifest {
            format: FORMAT_VERSION.into(),
            field_kind: self.field_kind,
            rank: self.rank(),
            ndof: n,
            eigenvalues: self.eigenvalues.clone(),
            inner_product_checksum: self.ip.checksum(),
            mean_subtracted: false,
            has_traces: self.traces.is_some(),
        };
        archive::write_json(&dir.join("manifest.json"), &m)?;
        for k in 0..self.rank() {
            let mut frame = vec![0.0; 4 * nc + 1];
            let off = match self.field_kind {
                FieldKind::U => 0,
                FieldKind::P => 2 * nc,
                FieldKind::Nut => 3 * nc,
            };
            frame[off..off + n].copy_from_slice(self.mode(k));
            frame[4 * nc] = k as f64;
            archive::write_blob(&dir.join(format!("mode_{k:04}.bin")), MODE_MAGIC, &frame)?;
        }
        archive::write_blob(&dir.join("weights.bin"), AUX_MAGIC, &self.ip.weights)?;
        if let Some(t) = &self.traces {
            archive::write_blob(&dir.join("traces.bin"), AUX_MAGIC, t.as_slice())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: BasisManifest = archive::read_json(&mpath)?;
        archive::check_version(&mpath, &m.format)?;
        let weights = archive::read_blob(&dir.join("weights.bin"), AUX_MAGIC)?;
        let ip = InnerProduct::new(weights)?;
        if ip.checksum() != m.inner_product_checksum {
            return Err(RomError::format(&mpath, "inner-product checksum mismatch"));
        }
        let n = m.ndof;
        let nc = if m.field_kind == FieldKind::U { n / 2 } else { n };
        let off = match m.field_kind {
            FieldKind::U => 0,
            FieldKind::P => 2 * nc,
            FieldKind::Nut => 3 * nc,
        };
        let mut modes = DMatrix::zeros(n, m.rank);
        for k in 0..m.rank {
            let p = dir.join(format!("mode_{k:04}.bin"));
            let f = archive::read_blob(&p, MODE_MAGIC)?;
            if f.len() != 4 * nc + 1 {
                return Err(RomError::format(&p, "mode file has wrong length"));
            }
            modes.column_mut(k).copy_from_slice(&f[off..off + n]);
        }
        let traces = if m.has_traces {
            let t = archive::read_blob(&dir.join("traces.bin"), AUX_MAGIC)?;
            if m.rank == 0 || t.len() % m.rank != 0 {
                return Err(RomError::format(dir.join("traces.bin"), "trace block has wrong length"));
            }
            Some(DMatrix::from_column_slice(t.len() / m.rank, m.rank, &t))
        } else {
            None
        };
        Ok(Self { field_kind: m.field_kind, modes, traces, eigenvalues: m.eigenvalues, ip })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_ip(n: usize) -> InnerProduct {
        InnerProduct::new(vec![1.0; n]).unwrap()
    }

    #[test]
    fn single_snapshot() {
        let s = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let ip = unit_ip(4);
        let k = correlation_matrix(&s, &ip).unwrap();
        assert_eq!(k[(0, 0)], 4.0);
        let b = compute_basis(&k, &s, None, &ip, FieldKind::P, 1).unwrap();
        assert!((b.eigenvalues[0] - 4.0).abs() < 1e-14);
        for v in b.modes.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(matches!(
            compute_basis(&k, &s, None, &ip, FieldKind::P, 2),
            Err(RomError::RankDeficient { requested: 2, achievable: 1 })
        ));
    }

    #[test]
    fn orthogonal_equal_norm_snapshots() {
        let s = DMatrix::from_column_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let ip = unit_ip(3);
        let k = correlation_matrix(&s, &ip).unwrap();
        assert_eq!(k[(0, 1)], 0.0);
        let b = compute_basis(&k, &s, None, &ip, FieldKind::P, 2).unwrap();
        assert!((b.eigenvalues[0] - b.eigenvalues[1]).abs() < 1e-14);
        let c = b.spectrum().cumulative;
        assert!((c[0] - 0.5).abs() < 1e-14 && c[1] == 1.0);
    }

    #[test]
    fn energy_selection() {
        let sp = EnergySpectrum { cumulative: vec![0.96, 0.995, 0.999, 1.0] };
        assert_eq!(select_modes_by_energy(&sp, 0.99).unwrap(), 2);
        assert_eq!(select_modes_by_energy(&sp, 1.0).unwrap(), 4);
        assert!(select_modes_by_energy(&sp, 0.0).is_err());
    }
}
