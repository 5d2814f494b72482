//! Finite-difference operators on the mapped channel grid.
//!
//! Everything is cell-centred. Physical derivatives use the chain rule of the
//! map `y = eta h(xi)`: `d/dx = d/dxi - s d/deta`, `d/dy = (1/h) d/deta`,
//! with `s = eta h'(xi) / h(xi)`. Velocity components are Dirichlet at the
//! walls (zero at the bottom, a per-column trace at the lid); pressure and
//! eddy viscosity are treated with zero normal gradient.
//!
//! Face layout: `nc` xi-faces (east face of each cell) followed by
//! `(ny + 1) * nx` eta-faces (face `jf` sits below cell row `jf`).

use crate::grid::GridSpec;
use crate::linalg::Csr;

/// Velocity field with its lid trace. The bottom wall trace is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VelField {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub top_x: Vec<f64>,
    pub top_y: Vec<f64>,
}

impl VelField {
    pub fn zeros(g: &GridSpec) -> Self {
        let (nc, nx) = (g.ncells(), g.nx);
        Self { x: vec![0.0; nc], y: vec![0.0; nc], top_x: vec![0.0; nx], top_y: vec![0.0; nx] }
    }

    /// Frame layout (x block then y block) plus a uniform lid velocity.
    pub fn from_frame(g: &GridSpec, u: &[f64], lid: f64) -> Self {
        let nc = g.ncells();
        Self { x: u[..nc].to_vec(), y: u[nc..2 * nc].to_vec(), top_x: vec![lid; g.nx], top_y: vec![0.0; g.nx] }
    }

    /// Interior values followed by the lid trace, `[x, y, top_x, top_y]`.
    pub fn to_extended(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * (self.x.len() + self.top_x.len()));
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.y);
        v.extend_from_slice(&self.top_x);
        v.extend_from_slice(&self.top_y);
        v
    }

    pub fn from_extended(g: &GridSpec, v: &[f64]) -> Self {
        let (nc, nx) = (g.ncells(), g.nx);
        Self {
            x: v[..nc].to_vec(),
            y: v[nc..2 * nc].to_vec(),
            top_x: v[2 * nc..2 * nc + nx].to_vec(),
            top_y: v[2 * nc + nx..2 * nc + 2 * nx].to_vec(),
        }
    }

    pub fn interior(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.extend_from_slice(&self.y);
        v
    }

    fn comp(&self, a: usize) -> (&[f64], &[f64]) {
        if a == 0 {
            (&self.x, &self.top_x)
        } else {
            (&self.y, &self.top_y)
        }
    }

    fn ext(&self, a: usize) -> Vec<f64> {
        let (q, t) = self.comp(a);
        let mut v = q.to_vec();
        v.extend_from_slice(t);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wall {
    /// Zero at the bottom, extra trace columns at the lid.
    Dirichlet,
    /// Zero normal gradient.
    Neumann,
}

/// Precomputed operators for one grid.
#[derive(Clone, Debug)]
pub struct Stencils {
    pub grid: GridSpec,
    pub nfaces: usize,
    /// Face weights (area units).
    pub face_w: Vec<f64>,
    /// Face gradients: x-derivative on xi-faces, y-derivative on eta-faces.
    pub face_grad_d: Csr,
    pub face_grad_n: Csr,
    /// `G^T W_f G` rows for interior cells, Dirichlet columns include the lid trace.
    pub stiff_d: Csr,
    pub stiff_n: Csr,
    /// Cell gradient, rows `[d/dx; d/dy]`.
    pub cell_grad_d: Csr,
    pub cell_grad_n: Csr,
    /// Tangential derivative of a Neumann scalar times edge length, one row
    /// per wall edge (lid edges first, then bottom edges).
    pub wall_tangent: Csr,
    h_c: Vec<f64>,
    dh_c: Vec<f64>,
    h_xf: Vec<f64>,
}

impl Stencils {
    pub fn new(grid: &GridSpec) -> Self {
        let g = grid.clone();
        let (nx, ny, nc) = (g.nx, g.ny, g.ncells());
        let nfaces = nc + (ny + 1) * nx;
        let h_c: Vec<f64> = (0..nx).map(|i| g.h(g.xi_center(i))).collect();
        let dh_c: Vec<f64> = (0..nx).map(|i| g.dh(g.xi_center(i))).collect();
        let h_xf: Vec<f64> = (0..nx).map(|i| g.h((i + 1) as f64 * g.dxi())).collect();

        let mut face_w = vec![0.0; nfaces];
        for j in 0..ny {
            for i in 0..nx {
                let c = g.idx(i, j);
                face_w[c] = 0.5 * (g.cell_areas[c] + g.cell_areas[g.idx(g.east(i), j)]);
            }
        }
        for jf in 0..=ny {
            for i in 0..nx {
                let f = nc + jf * nx + i;
                face_w[f] = if g.y_periodic {
                    if jf == ny {
                        0.0
                    } else {
                        let below = g.idx(i, (jf + ny - 1) % ny);
                        0.5 * (g.cell_areas[below] + g.cell_areas[g.idx(i, jf % ny)])
                    }
                } else if jf == 0 {
                    0.5 * g.cell_areas[g.idx(i, 0)]
                } else if jf == ny {
                    0.5 * g.cell_areas[g.idx(i, ny - 1)]
                } else {
                    0.5 * (g.cell_areas[g.idx(i, jf - 1)] + g.cell_areas[g.idx(i, jf)])
                };
            }
        }

        let mut st = Stencils {
            grid: g,
            nfaces,
            face_w,
            face_grad_d: Csr::from_triplets(0, 0, &[]),
            face_grad_n: Csr::from_triplets(0, 0, &[]),
            stiff_d: Csr::from_triplets(0, 0, &[]),
            stiff_n: Csr::from_triplets(0, 0, &[]),
            cell_grad_d: Csr::from_triplets(0, 0, &[]),
            cell_grad_n: Csr::from_triplets(0, 0, &[]),
            wall_tangent: Csr::from_triplets(0, 0, &[]),
            h_c,
            dh_c,
            h_xf,
        };
        st.cell_grad_d = st.build_cell_grad(Wall::Dirichlet);
        st.cell_grad_n = st.build_cell_grad(Wall::Neumann);
        st.face_grad_d = st.build_face_grad(Wall::Dirichlet);
        st.face_grad_n = st.build_face_grad(Wall::Neumann);
        st.stiff_d = st.face_grad_d.gram(&st.face_w, nc);
        st.stiff_n = st.face_grad_n.gram(&st.face_w, nc);
        st.wall_tangent = st.build_wall_tangent();
        st
    }

    fn ncols(&self, wall: Wall) -> usize {
        match wall {
            Wall::Dirichlet => self.grid.ncells() + self.grid.nx,
            Wall::Neumann => self.grid.ncells(),
        }
    }

    #[inline]
    fn slope(&self, i: usize, eta: f64) -> f64 {
        eta * self.dh_c[i] / self.h_c[i]
    }

    /// Linear stencil of the value on eta-face `jf` of column `i`.
    fn eta_face_value(&self, i: usize, jf: usize, wall: Wall) -> Vec<(usize, f64)> {
        let g = &self.grid;
        let (ny, nc) = (g.ny, g.ncells());
        if g.y_periodic {
            let below = g.idx(i, (jf + ny - 1) % ny);
            return vec![(below, 0.5), (g.idx(i, jf % ny), 0.5)];
        }
        if jf == 0 {
            match wall {
                Wall::Dirichlet => vec![],
                Wall::Neumann => vec![(g.idx(i, 0), 1.0)],
            }
        } else if jf == ny {
            match wall {
                Wall::Dirichlet => vec![(nc + i, 1.0)],
                Wall::Neumann => vec![(g.idx(i, ny - 1), 1.0)],
            }
        } else {
            vec![(g.idx(i, jf - 1), 0.5), (g.idx(i, jf), 0.5)]
        }
    }

    /// Central eta-derivative of cell (i, j) through face values.
    fn eta_diff(&self, i: usize, j: usize, wall: Wall) -> Vec<(usize, f64)> {
        let de = self.grid.deta();
        let mut out: Vec<(usize, f64)> =
            self.eta_face_value(i, j + 1, wall).into_iter().map(|(c, v)| (c, v / de)).collect();
        out.extend(self.eta_face_value(i, j, wall).into_iter().map(|(c, v)| (c, -v / de)));
        out
    }

    fn xi_diff(&self, i: usize, j: usize) -> Vec<(usize, f64)> {
        let g = &self.grid;
        let d = 2.0 * g.dxi();
        vec![(g.idx(g.east(i), j), 1.0 / d), (g.idx(g.west(i), j), -1.0 / d)]
    }

    fn build_cell_grad(&self, wall: Wall) -> Csr {
        let g = &self.grid;
        let nc = g.ncells();
        let mut trip = Vec::new();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.idx(i, j);
                let s = self.slope(i, g.eta_center(j));
                let qe = self.eta_diff(i, j, wall);
                for (col, v) in self.xi_diff(i, j) {
                    trip.push((c, col, v));
                }
                for &(col, v) in &qe {
                    trip.push((c, col, -s * v));
                    trip.push((nc + c, col, v / self.h_c[i]));
                }
            }
        }
        Csr::from_triplets(2 * nc, self.ncols(wall), &trip)
    }

    fn build_face_grad(&self, wall: Wall) -> Csr {
        let g = &self.grid;
        let (nx, ny, nc) = (g.nx, g.ny, g.ncells());
        let (dxi, de) = (g.dxi(), g.deta());
        let mut trip = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                let f = g.idx(i, j);
                let e = g.east(i);
                let xf = (i + 1) as f64 * dxi;
                let s = g.eta_center(j) * g.dh(xf) / self.h_xf[i];
                trip.push((f, g.idx(e, j), 1.0 / dxi));
                trip.push((f, g.idx(i, j), -1.0 / dxi));
                for (col, v) in self.eta_diff(i, j, wall).into_iter().chain(self.eta_diff(e, j, wall)) {
                    trip.push((f, col, -0.5 * s * v));
                }
            }
        }
        for jf in 0..=ny {
            for i in 0..nx {
                let f = nc + jf * nx + i;
                let inv = 1.0 / self.h_c[i];
                if g.y_periodic {
                    if jf < ny {
                        let below = g.idx(i, (jf + ny - 1) % ny);
                        trip.push((f, g.idx(i, jf), inv / de));
                        trip.push((f, below, -inv / de));
                    }
                } else if jf == 0 {
                    if wall == Wall::Dirichlet {
                        trip.push((f, g.idx(i, 0), 2.0 * inv / de));
                    }
                } else if jf == ny {
                    if wall == Wall::Dirichlet {
                        trip.push((f, nc + i, 2.0 * inv / de));
                        trip.push((f, g.idx(i, ny - 1), -2.0 * inv / de));
                    }
                } else {
                    trip.push((f, g.idx(i, jf), inv / de));
                    trip.push((f, g.idx(i, jf - 1), -inv / de));
                }
            }
        }
        Csr::from_triplets(self.nfaces, self.ncols(wall), &trip)
    }

    fn build_wall_tangent(&self) -> Csr {
        let g = &self.grid;
        let (nx, ny, nc) = (g.nx, g.ny, g.ncells());
        if g.y_periodic {
            return Csr::from_triplets(0, nc, &[]);
        }
        let cg = &self.cell_grad_n;
        let mut trip = Vec::new();
        for i in 0..nx {
            // lid edge: outward normal n = (-dy, dxi)/ds, so ds (n x grad q) = -(dxi q_x + dy q_y)
            let c = g.idx(i, ny - 1);
            let dy = g.vertex(i + 1, ny).1 - g.vertex(i, ny).1;
            for (col, v) in cg.row(c) {
                trip.push((i, col, -g.dxi() * v));
            }
            for (col, v) in cg.row(nc + c) {
                trip.push((i, col, -dy * v));
            }
            // bottom edge: n = (0, -1), ds (n x grad q) = dxi q_x
            let c = g.idx(i, 0);
            for (col, v) in cg.row(c) {
                trip.push((nx + i, col, g.dxi() * v));
            }
        }
        Csr::from_triplets(2 * nx, nc, &trip)
    }

    // ---- field operations -------------------------------------------------

    /// Cell gradient of a Dirichlet scalar `[interior, lid trace]`.
    pub fn grad_d(&self, ext: &[f64]) -> (Vec<f64>, Vec<f64>) {
        split2(self.cell_grad_d.matvec(ext))
    }

    /// Cell gradient of a zero-normal-gradient scalar.
    pub fn grad_n(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        split2(self.cell_grad_n.matvec(q))
    }

    /// Velocity gradient tensor `[[ux_x, ux_y], [uy_x, uy_y]]`, each per cell.
    pub fn velocity_gradient(&self, u: &VelField) -> [[Vec<f64>; 2]; 2] {
        let (ux_x, ux_y) = self.grad_d(&u.ext(0));
        let (uy_x, uy_y) = self.grad_d(&u.ext(1));
        [[ux_x, ux_y], [uy_x, uy_y]]
    }

    /// Discrete Laplacian of a Dirichlet scalar.
    pub fn laplacian_d(&self, ext: &[f64]) -> Vec<f64> {
        let a = self.stiff_d.matvec(ext);
        a.iter().zip(&self.grid.cell_areas).map(|(a, w)| -a / w).collect()
    }

    pub fn laplacian_n(&self, q: &[f64]) -> Vec<f64> {
        let a = self.stiff_n.matvec(q);
        a.iter().zip(&self.grid.cell_areas).map(|(a, w)| -a / w).collect()
    }

    pub fn vector_laplacian(&self, u: &VelField) -> [Vec<f64>; 2] {
        [self.laplacian_d(&u.ext(0)), self.laplacian_d(&u.ext(1))]
    }

    /// Face values of a cell field: xi-faces by averaging, eta-faces by
    /// averaging inside and `wall` at the boundaries (`None` copies the
    /// adjacent cell value, `Some(top)` means zero bottom and `top` at the lid).
    fn face_values(&self, q: &[f64], top: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let g = &self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let mut xf = vec![0.0; g.ncells()];
        for j in 0..ny {
            for i in 0..nx {
                xf[g.idx(i, j)] = 0.5 * (q[g.idx(i, j)] + q[g.idx(g.east(i), j)]);
            }
        }
        let mut ef = vec![0.0; (ny + 1) * nx];
        for jf in 0..=ny {
            for i in 0..nx {
                ef[jf * nx + i] = if g.y_periodic {
                    0.5 * (q[g.idx(i, (jf + ny - 1) % ny)] + q[g.idx(i, jf % ny)])
                } else if jf == 0 {
                    if top.is_some() {
                        0.0
                    } else {
                        q[g.idx(i, 0)]
                    }
                } else if jf == ny {
                    match top {
                        Some(t) => t[i],
                        None => q[g.idx(i, ny - 1)],
                    }
                } else {
                    0.5 * (q[g.idx(i, jf - 1)] + q[g.idx(i, jf)])
                };
            }
        }
        (xf, ef)
    }

    /// Conservative divergence from face values of a vector field `F`:
    /// `fx_xi` (x-component on xi-faces), `fx_eta`, `fy_eta` (on eta-faces).
    fn div_faces(&self, fx_xi: &[f64], fx_eta: &[f64], fy_eta: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let (nx, ny) = (g.nx, g.ny);
        let (dxi, de) = (g.dxi(), g.deta());
        let mut out = vec![0.0; g.ncells()];
        let phi_eta = |i: usize, jf: usize| {
            let k = jf * nx + i;
            -(jf as f64 * de) * self.dh_c[i] * fx_eta[k] + fy_eta[k]
        };
        for j in 0..ny {
            for i in 0..nx {
                let c = g.idx(i, j);
                let w = g.west(i);
                let fe = self.h_xf[i] * fx_xi[c];
                let fw = self.h_xf[w] * fx_xi[g.idx(w, j)];
                let top = if g.y_periodic && j + 1 == ny { phi_eta(i, 0) } else { phi_eta(i, j + 1) };
                let bot = phi_eta(i, j);
                out[c] = ((fe - fw) / dxi + (top - bot) / de) / self.h_c[i];
            }
        }
        out
    }

    /// Divergence of a cell vector field with zero-gradient extrapolation to
    /// the walls.
    pub fn divergence_n(&self, fx: &[f64], fy: &[f64]) -> Vec<f64> {
        let (fx_xi, fx_eta) = self.face_values(fx, None);
        let (_, fy_eta) = self.face_values(fy, None);
        self.div_faces(&fx_xi, &fx_eta, &fy_eta)
    }

    /// Convective term `div(u (x) v)`, component `a` = `d_b (u_b v_a)`.
    pub fn convection(&self, u: &VelField, v: &VelField) -> [Vec<f64>; 2] {
        let (ux_xi, ux_eta) = self.face_values(&u.x, Some(&u.top_x));
        let (_, uy_eta) = self.face_values(&u.y, Some(&u.top_y));
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (a, o) in out.iter_mut().enumerate() {
            let (q, t) = v.comp(a);
            let (v_xi, v_eta) = self.face_values(q, Some(t));
            let fx_xi: Vec<f64> = ux_xi.iter().zip(&v_xi).map(|(p, q)| p * q).collect();
            let fx_eta: Vec<f64> = ux_eta.iter().zip(&v_eta).map(|(p, q)| p * q).collect();
            let fy_eta: Vec<f64> = uy_eta.iter().zip(&v_eta).map(|(p, q)| p * q).collect();
            *o = self.div_faces(&fx_xi, &fx_eta, &fy_eta);
        }
        out
    }

    /// `div(nu (grad u)^T)`, component `a` = `d_b (nu d_a u_b)`. With `nu = None`
    /// the weight is one.
    pub fn transpose_gradient_div(&self, u: &VelField, nu: Option<&[f64]>) -> [Vec<f64>; 2] {
        let gu = self.velocity_gradient(u);
        let w = |k: usize, v: f64| nu.map_or(v, |n| n[k] * v);
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (a, o) in out.iter_mut().enumerate() {
            // flux component b is d_a u_b
            let fx: Vec<f64> = gu[0][a].iter().enumerate().map(|(k, &v)| w(k, v)).collect();
            let fy: Vec<f64> = gu[1][a].iter().enumerate().map(|(k, &v)| w(k, v)).collect();
            *o = self.divergence_n(&fx, &fy);
        }
        out
    }

    /// Turbulent diffusion `nu_t lap(u) + div(nu_t (grad u)^T)`.
    pub fn turbulent_diffusion(&self, u: &VelField, nut: &[f64]) -> [Vec<f64>; 2] {
        let lap = self.vector_laplacian(u);
        let tg = self.transpose_gradient_div(u, Some(nut));
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for a in 0..2 {
            out[a] = lap[a].iter().zip(nut).zip(&tg[a]).map(|((l, n), t)| n * l + t).collect();
        }
        out
    }

    /// Face-normal projection of a cell vector field: x on xi-faces, y on
    /// interior eta-faces.
    pub fn face_normal(&self, f: &[Vec<f64>; 2]) -> Vec<f64> {
        let (fx_xi, _) = self.face_values(&f[0], None);
        let (_, fy_eta) = self.face_values(&f[1], None);
        let mut out = fx_xi;
        out.extend(fy_eta);
        out
    }

    /// Discrete `(grad q, f)` pairing for a Neumann scalar `q` and a cell vector field.
    pub fn grad_pairing(&self, q: &[f64], f: &[Vec<f64>; 2]) -> f64 {
        let gq = self.face_grad_n.matvec(q);
        let fn_ = self.face_normal(f);
        gq.iter().zip(&fn_).zip(&self.face_w).map(|((a, b), w)| a * b * w).sum()
    }

    /// Weighted right-hand side `G^T W_f P_f f` of the weak pressure equation.
    pub fn weak_divergence(&self, f: &[Vec<f64>; 2]) -> Vec<f64> {
        let fn_ = self.face_normal(f);
        let wf: Vec<f64> = fn_.iter().zip(&self.face_w).map(|(a, w)| a * w).collect();
        self.face_grad_n.transpose_matvec(&wf)
    }

    /// Vorticity `d_x u_y - d_y u_x` per cell.
    pub fn vorticity(&self, u: &VelField) -> Vec<f64> {
        let gu = self.velocity_gradient(u);
        gu[1][0].iter().zip(&gu[0][1]).map(|(a, b)| a - b).collect()
    }

    /// Wall term `(n x grad q, curl u)_Gamma` as a vector over cells.
    pub fn wall_curl_term(&self, u: &VelField) -> Vec<f64> {
        let g = &self.grid;
        if g.y_periodic {
            return vec![0.0; g.ncells()];
        }
        let w = self.vorticity(u);
        let (nx, ny) = (g.nx, g.ny);
        let mut edge = vec![0.0; 2 * nx];
        for i in 0..nx {
            edge[i] = w[g.idx(i, ny - 1)];
            edge[nx + i] = w[g.idx(i, 0)];
        }
        self.wall_tangent.transpose_matvec(&edge)
    }

    /// Strain-rate Frobenius norm `|grad u + grad u^T|_F` per cell.
    pub fn strain_norm(&self, u: &VelField) -> Vec<f64> {
        let gu = self.velocity_gradient(u);
        (0..self.grid.ncells())
            .map(|k| {
                let sxx = 2.0 * gu[0][0][k];
                let syy = 2.0 * gu[1][1][k];
                let sxy = gu[0][1][k] + gu[1][0][k];
                (sxx * sxx + syy * syy + 2.0 * sxy * sxy).sqrt()
            })
            .collect()
    }

    /// Courant number `dt * max(|u_x|/dx + |u_y|/dy)`.
    pub fn courant(&self, u: &VelField, dt: f64) -> f64 {
        let g = &self.grid;
        let mut m: f64 = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.idx(i, j);
                let dy = g.deta() * self.h_c[i];
                m = m.max(u.x[c].abs() / g.dxi() + u.y[c].abs() / dy);
            }
        }
        m * dt
    }
}

fn split2(v: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = v.len() / 2;
    let mut a = v;
    let b = a.split_off(n);
    (a, b)
}
