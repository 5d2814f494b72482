//! Galerkin operators of the reduced momentum and pressure equations,
//! assembled with the same stencils as the full-order surrogate.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::error::{Result, RomError};
use crate::grid::GridSpec;
use crate::linalg::Tensor3;
use crate::pod::{FieldKind, PodBasis};
use crate::stencil::{Stencils, VelField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nu: usize,
    pub np: usize,
    pub nnut: usize,
}

impl Dims {
    pub fn new(nu: usize, np: usize, nnut: usize) -> Self {
        Self { nu, np, nnut }
    }

    pub fn total(&self) -> usize {
        self.nu + self.np
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub ids: Vec<String>,
    /// Prescribed tangential velocity per boundary.
    pub values: Vec<f64>,
    pub tau: f64,
}

impl BoundarySpec {
    pub fn lid(value: f64, tau: f64) -> Result<Self> {
        let b = Self { ids: vec!["lid".into()], values: vec![value], tau };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(RomError::Config(format!("penalty weight must be positive, got {}", self.tau)));
        }
        if self.ids.len() != self.values.len() {
            return Err(RomError::Config("boundary ids and values differ in length".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedOperatorSet {
    pub m: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bt: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub c: Tensor3,
    pub g: Tensor3,
    pub ct1: Tensor3,
    pub ct2: Tensor3,
    pub ct3: Tensor3,
    pub ct4: Tensor3,
    pub l: DVector<f64>,
    pub e_k: Vec<DMatrix<f64>>,
    pub d_k: Vec<DVector<f64>>,
    pub dims: Dims,
    pub mu: Vec<f64>,
    /// Length of each Dirichlet boundary.
    pub boundary_length: Vec<f64>,
}

fn check_basis(basis: &PodBasis, kind: FieldKind, n: usize, ndof: usize) -> Result<()> {
    if basis.field_kind != kind {
        return Err(RomError::DimensionMismatch(format!("expected a {kind:?} basis, got {:?}", basis.field_kind)));
    }
    if basis.modes.nrows() != ndof {
        return Err(RomError::DimensionMismatch(format!(
            "{kind:?} basis has {} dofs, grid needs {ndof}",
            basis.modes.nrows()
        )));
    }
    if n > basis.rank() {
        return Err(RomError::RankDeficient { requested: n, achievable: basis.rank() });
    }
    Ok(())
}

fn wdot2(w: &[f64], a: &[Vec<f64>; 2], b: &VelField) -> f64 {
    let mut s = 0.0;
    for (k, wk) in w.iter().enumerate() {
        s += wk * (a[0][k] * b.x[k] + a[1][k] * b.y[k]);
    }
    s
}

fn scale2(nut: &[f64], v: &[Vec<f64>; 2]) -> [Vec<f64>; 2] {
    [v[0].iter().zip(nut).map(|(a, n)| a * n).collect(), v[1].iter().zip(nut).map(|(a, n)| a * n).collect()]
}

/// Assembles every operator at dimensions `dims` on `grid`. The modes are
/// used as nodal vectors of `grid` (index correspondence with the reference
/// grid they were computed on).
pub fn assemble(
    ub: &PodBasis,
    pb: &PodBasis,
    nb: &PodBasis,
    grid: &GridSpec,
    boundary: &BoundarySpec,
    dims: Dims,
    mu: Vec<f64>,
) -> Result<ReducedOperatorSet> {
    boundary.validate()?;
    let nc = grid.ncells();
    check_basis(ub, FieldKind::U, dims.nu, 2 * nc)?;
    check_basis(pb, FieldKind::P, dims.np, nc)?;
    check_basis(nb, FieldKind::Nut, dims.nnut, nc)?;
    if boundary.ids.len() != 1 && !grid.y_periodic {
        return Err(RomError::Config("the channel has exactly one Dirichlet boundary (the lid)".into()));
    }
    let st = Stencils::new(grid);
    let w = &grid.cell_areas;
    let Dims { nu, np, nnut } = dims;

    let phi: Vec<VelField> = (0..nu).map(|k| ub.vel_mode(grid, k)).collect();
    let chi: Vec<&[f64]> = (0..np).map(|k| pb.mode(k)).collect();
    let eta: Vec<&[f64]> = (0..nnut).map(|k| nb.mode(k)).collect();
    // weighted face gradients of the pressure modes
    let gchi: Vec<Vec<f64>> =
        chi.iter().map(|q| st.face_grad_n.matvec(q).iter().zip(&st.face_w).map(|(g, w)| g * w).collect()).collect();
    let pair = |i: usize, f: &[Vec<f64>; 2]| -> f64 {
        let fnorm = st.face_normal(f);
        gchi[i].iter().zip(&fnorm).map(|(a, b)| a * b).sum()
    };

    let mut m = DMatrix::zeros(nu, nu);
    let mut b = DMatrix::zeros(nu, nu);
    let mut bt = DMatrix::zeros(nu, nu);
    let lap: Vec<[Vec<f64>; 2]> = phi.iter().map(|p| st.vector_laplacian(p)).collect();
    for j in 0..nu {
        let tg = st.transpose_gradient_div(&phi[j], None);
        for i in 0..nu {
            m[(i, j)] = (0..nc).map(|q| w[q] * (phi[j].x[q] * phi[i].x[q] + phi[j].y[q] * phi[i].y[q])).sum();
            b[(i, j)] = wdot2(w, &lap[j], &phi[i]);
            bt[(i, j)] = wdot2(w, &tg, &phi[i]);
        }
    }

    let mut h = DMatrix::zeros(nu, np);
    for j in 0..np {
        let (gx, gy) = st.grad_n(chi[j]);
        let gp = [gx, gy];
        for i in 0..nu {
            h[(i, j)] = wdot2(w, &gp, &phi[i]);
        }
    }

    let mut d = DMatrix::zeros(np, np);
    for j in 0..np {
        let a = st.stiff_n.matvec(chi[j]);
        for i in 0..np {
            d[(i, j)] = crate::linalg::dot(chi[i], &a);
        }
    }
    let d = DMatrix::from_fn(np, np, |i, j| 0.5 * (d[(i, j)] + d[(j, i)]));

    let mut n = DMatrix::zeros(np, nu);
    for j in 0..nu {
        let wc = st.wall_curl_term(&phi[j]);
        for i in 0..np {
            n[(i, j)] = crate::linalg::dot(chi[i], &wc);
        }
    }

    let mut c = Tensor3::zeros(nu, nu, nu);
    let mut g = Tensor3::zeros(np, nu, nu);
    for j in 0..nu {
        for k in 0..nu {
            let f = st.convection(&phi[j], &phi[k]);
            for i in 0..nu {
                c.set(i, j, k, wdot2(w, &f, &phi[i]));
            }
            for i in 0..np {
                g.set(i, j, k, pair(i, &f));
            }
        }
    }

    let mut ct1 = Tensor3::zeros(nu, nnut, nu);
    let mut ct2 = Tensor3::zeros(nu, nnut, nu);
    let mut ct3 = Tensor3::zeros(np, nnut, nu);
    let mut ct4 = Tensor3::zeros(np, nnut, nu);
    for j in 0..nnut {
        for k in 0..nu {
            let f1 = scale2(eta[j], &lap[k]);
            let f2 = st.transpose_gradient_div(&phi[k], Some(eta[j]));
            for i in 0..nu {
                ct1.set(i, j, k, wdot2(w, &f1, &phi[i]));
                ct2.set(i, j, k, wdot2(w, &f2, &phi[i]));
            }
            for i in 0..np {
                ct3.set(i, j, k, pair(i, &f1));
                ct4.set(i, j, k, pair(i, &f2));
            }
        }
    }

    let (e_k, d_k, boundary_length) = if grid.y_periodic {
        (vec![], vec![], vec![])
    } else {
        let ds = grid.lid_edge_lengths();
        let mut e = DMatrix::zeros(nu, nu);
        let mut dv = DVector::zeros(nu);
        for i in 0..nu {
            for j in 0..nu {
                e[(i, j)] = (0..grid.nx)
                    .map(|q| ds[q] * (phi[i].top_x[q] * phi[j].top_x[q] + phi[i].top_y[q] * phi[j].top_y[q]))
                    .sum();
            }
            dv[i] = (0..grid.nx).map(|q| ds[q] * phi[i].top_x[q]).sum();
        }
        let e = DMatrix::from_fn(nu, nu, |i, j| if i <= j { e[(i, j)] } else { e[(j, i)] });
        (vec![e], vec![dv], vec![ds.iter().sum()])
    };

    Ok(ReducedOperatorSet {
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
        e_k,
        d_k,
        dims,
        mu,
        boundary_length,
    })
}

/// Rebuilds the grid at `mu_g` and assembles there.
pub fn assemble_for_parameter(
    ub: &PodBasis,
    pb: &PodBasis,
    nb: &PodBasis,
    reference: &GridSpec,
    mu_g: &[f64],
    boundary: &BoundarySpec,
    dims: Dims,
) -> Result<ReducedOperatorSet> {
    let grid = reference.with_deformation(mu_g)?;
    assemble(ub, pb, nb, &grid, boundary, dims, mu_g.to_vec())
}

/// `tau * sum_k (U_k D^k - E^k a)`.
pub fn penalty_contribution(a: &DVector<f64>, ops: &ReducedOperatorSet, boundary: &BoundarySpec) -> DVector<f64> {
    let mut out = DVector::zeros(a.len());
    for (k, (e, d)) in ops.e_k.iter().zip(&ops.d_k).enumerate() {
        out += boundary.values[k] * d - e * a;
    }
    out * boundary.tau
}

/// RMS mismatch between the reduced lid trace and the prescribed value,
/// `sqrt(int |u - U e_x|^2 ds / |Gamma|)`.
pub fn boundary_mismatch(a: &DVector<f64>, ops: &ReducedOperatorSet, boundary: &BoundarySpec) -> f64 {
    let mut s = 0.0;
    let mut len = 0.0;
    for (k, (e, d)) in ops.e_k.iter().zip(&ops.d_k).enumerate() {
        let u = boundary.values[k];
        s += a.dot(&(e * a)) - 2.0 * u * d.dot(a) + u * u * ops.boundary_length[k];
        len += ops.boundary_length[k];
    }
    if len > 0.0 {
        (s.max(0.0) / len).sqrt()
    } else {
        0.0
    }
}

fn lead(m: &DMatrix<f64>, r: usize, c: usize) -> DMatrix<f64> {
    m.view((0, 0), (r, c)).into_owned()
}

impl ReducedOperatorSet {
    /// Leading sub-blocks at smaller dimensions.
    pub fn leading(&self, dims: Dims) -> Result<Self> {
        let s = self.dims;
        if dims.nu > s.nu || dims.np > s.np || dims.nnut > s.nnut {
            return Err(RomError::DimensionMismatch(format!("{dims:?} exceeds {s:?}")));
        }
        let Dims { nu, np, nnut } = dims;
        Ok(Self {
            m: lead(&self.m, nu, nu),
            b: lead(&self.b, nu, nu),
            bt: lead(&self.bt, nu, nu),
            h: lead(&self.h, nu, np),
            d: lead(&self.d, np, np),
            n: lead(&self.n, np, nu),
            c: self.c.leading(nu, nu, nu),
            g: self.g.leading(np, nu, nu),
            ct1: self.ct1.leading(nu, nnut, nu),
            ct2: self.ct2.leading(nu, nnut, nu),
            ct3: self.ct3.leading(np, nnut, nu),
            ct4: self.ct4.leading(np, nnut, nu),
            l: self.l.rows(0, np).into_owned(),
            e_k: self.e_k.iter().map(|e| lead(e, nu, nu)).collect(),
            d_k: self.d_k.iter().map(|d| d.rows(0, nu).into_owned()).collect(),
            dims,
            mu: self.mu.clone(),
            boundary_length: self.boundary_length.clone(),
        })
    }

    /// `C_T1 + C_T2` and `C_T3 + C_T4`.
    pub fn turbulence_sums(&self) -> (Tensor3, Tensor3) {
        (self.ct1.add(&self.ct2), self.ct3.add(&self.ct4))
    }
}

#[derive(Serialize, Deserialize)]
struct OperatorManifest {
    format: String,
    dims: Dims,
    mu: Vec<f64>,
    tau: f64,
    k: f64,
    boundary: BoundarySpec,
    boundary_length: Vec<f64>,
    /// The boundary flux tensor is undefined; L is stored as zero.
    l_assembled_as_zero: bool,
}

const OP_MAGIC: &[u8; 4] = b"ROMO";

fn mat_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn mat_from_row_major(path: &Path, r: usize, c: usize, v: Vec<f64>) -> Result<DMatrix<f64>> {
    if v.len() != r * c {
        return Err(RomError::format(path, format!("expected {}x{} entries, got {}", r, c, v.len())));
    }
    Ok(DMatrix::from_row_slice(r, c, &v))
}

impl ReducedOperatorSet {
    pub fn save(&self, dir: &Path, boundary: &BoundarySpec, k: f64) -> Result<()> {
        archive::ensure_dir(dir)?;
        archive::write_json(
            &dir.join("manifest.json"),
            &OperatorManifest {
                format: FORMAT_VERSION.into(),
                dims: self.dims,
                mu: self.mu.clone(),
                tau: boundary.tau,
                k,
                boundary: boundary.clone(),
                boundary_length: self.boundary_length.clone(),
                l_assembled_as_zero: true,
            },
        )?;
        let w = |name: &str, data: &[f64]| archive::write_blob(&dir.join(format!("{name}.bin")), OP_MAGIC, data);
        w("M", &mat_row_major(&self.m))?;
        w("B", &mat_row_major(&self.b))?;
        w("BT", &mat_row_major(&self.bt))?;
        w("H", &mat_row_major(&self.h))?;
        w("D", &mat_row_major(&self.d))?;
        w("N", &mat_row_major(&self.n))?;
        w("L", self.l.as_slice())?;
        w("C", self.c.data())?;
        w("G", self.g.data())?;
        w("CT1", self.ct1.data())?;
        w("CT2", self.ct2.data())?;
        w("CT3", self.ct3.data())?;
        w("CT4", self.ct4.data())?;
        for (q, (e, d)) in self.e_k.iter().zip(&self.d_k).enumerate() {
            w(&format!("E{q}"), &mat_row_major(e))?;
            w(&format!("Dk{q}"), d.as_slice())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, BoundarySpec, f64)> {
        let mpath = dir.join("manifest.json");
        let man: OperatorManifest = archive::read_json(&mpath)?;
        archive::check_version(&mpath, &man.format)?;
        let Dims { nu, np, nnut } = man.dims;
        let r = |name: &str| {
            let p = dir.join(format!("{name}.bin"));
            archive::read_blob(&p, OP_MAGIC).map(|v| (p, v))
        };
        let mat = |name: &str, a: usize, b: usize| -> Result<DMatrix<f64>> {
            let (p, v) = r(name)?;
            mat_from_row_major(&p, a, b, v)
        };
        let ten = |name: &str, a: usize, b: usize, c: usize| -> Result<Tensor3> {
            let (p, v) = r(name)?;
            Tensor3::from_vec([a, b, c], v).map_err(|e| RomError::format(p, e.to_string()))
        };
        let nb = man.boundary.ids.len().min(man.boundary_length.len());
        let mut e_k = Vec::new();
        let mut d_k = Vec::new();
        for q in 0..nb {
            e_k.push(mat(&format!("E{q}"), nu, nu)?);
            let (p, v) = r(&format!("Dk{q}"))?;
            if v.len() != nu {
                return Err(RomError::format(p, "wrong boundary vector length"));
            }
            d_k.push(DVector::from_vec(v));
        }
        let (lp, l) = r("L")?;
        if l.len() != np {
            return Err(RomError::format(lp, "wrong L length"));
        }
        let ops = Self {
            m: mat("M", nu, nu)?,
            b: mat("B", nu, nu)?,
            bt: mat("BT", nu, nu)?,
            h: mat("H", nu, np)?,
            d: mat("D", np, np)?,
            n: mat("N", np, nu)?,
            c: ten("C", nu, nu, nu)?,
            g: ten("G", np, nu, nu)?,
            ct1: ten("CT1", nu, nnut, nu)?,
            ct2: ten("CT2", nu, nnut, nu)?,
            ct3: ten("CT3", np, nnut, nu)?,
            ct4: ten("CT4", np, nnut, nu)?,
            l: DVector::from_vec(l),
            e_k,
            d_k,
            dims: man.dims,
            mu: man.mu,
            boundary_length: man.boundary_length,
        };
        Ok((ops, man.boundary, man.k))
    }
}
