//! Structured channel grid, periodic in x, with an optional smooth lid
//! deformation `y = eta * h(xi)`, `h(xi) = 1 + sum_k mu_k sin^2(k pi xi / lx)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RomError};

/// Admissible box for each deformation amplitude.
pub const DEFORMATION_BOUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub deformation: Vec<f64>,
    /// Fully periodic variant (no walls). Only allowed undeformed.
    #[serde(default)]
    pub y_periodic: bool,
    pub cell_areas: Vec<f64>,
}

pub fn build_grid(nx: usize, ny: usize, lx: f64, ly: f64, mu_g: &[f64]) -> Result<GridSpec> {
    GridSpec::new(nx, ny, lx, ly, mu_g, false)
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, mu_g: &[f64], y_periodic: bool) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(RomError::InvalidGrid(format!("need at least 4x4 cells, got {nx}x{ny}")));
        }
        if !(lx > 0.0 && ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
            return Err(RomError::InvalidGrid(format!("extents must be positive, got {lx} x {ly}")));
        }
        for (index, &value) in mu_g.iter().enumerate() {
            if !value.is_finite() || value.abs() > DEFORMATION_BOUND {
                return Err(RomError::DeformationOutOfRange { index, value, bound: DEFORMATION_BOUND });
            }
        }
        if y_periodic && mu_g.iter().any(|&m| m != 0.0) {
            return Err(RomError::InvalidGrid("the periodic variant cannot be deformed".into()));
        }
        let mut g = GridSpec { nx, ny, lx, ly, deformation: mu_g.to_vec(), y_periodic, cell_areas: Vec::new() };
        let mut areas = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let area = g.quad_area(i, j);
                if !(area > 0.0) {
                    return Err(RomError::NonPositiveArea { i, j, area });
                }
                areas.push(area);
            }
        }
        g.cell_areas = areas;
        Ok(g)
    }

    pub fn periodic(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        Self::new(nx, ny, lx, ly, &[], true)
    }

    /// Same layout, different deformation.
    pub fn with_deformation(&self, mu_g: &[f64]) -> Result<Self> {
        Self::new(self.nx, self.ny, self.lx, self.ly, mu_g, self.y_periodic)
    }

    #[inline]
    pub fn ncells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn dxi(&self) -> f64 {
        self.lx / self.nx as f64
    }

    #[inline]
    pub fn deta(&self) -> f64 {
        self.ly / self.ny as f64
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn east(&self, i: usize) -> usize {
        (i + 1) % self.nx
    }

    #[inline]
    pub fn west(&self, i: usize) -> usize {
        (i + self.nx - 1) % self.nx
    }

    /// Lid height factor.
    pub fn h(&self, xi: f64) -> f64 {
        1.0 + self
            .deformation
            .iter()
            .enumerate()
            .map(|(k, m)| m * (((k + 1) as f64) * PI * xi / self.lx).sin().powi(2))
            .sum::<f64>()
    }

    pub fn dh(&self, xi: f64) -> f64 {
        self.deformation
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let w = ((k + 1) as f64) * PI / self.lx;
                m * w * (2.0 * w * xi).sin()
            })
            .sum()
    }

    #[inline]
    pub fn xi_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dxi()
    }

    #[inline]
    pub fn eta_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.deta()
    }

    /// Physical vertex (i, j) with 0 <= i <= nx, 0 <= j <= ny.
    pub fn vertex(&self, i: usize, j: usize) -> (f64, f64) {
        let xi = i as f64 * self.dxi();
        (xi, j as f64 * self.deta() * self.h(xi))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let xi = self.xi_center(i);
        (xi, self.eta_center(j) * self.h(xi))
    }

    // shoelace area of the mapped quadrilateral
    fn quad_area(&self, i: usize, j: usize) -> f64 {
        let p = [self.vertex(i, j), self.vertex(i + 1, j), self.vertex(i + 1, j + 1), self.vertex(i, j + 1)];
        let mut s = 0.0;
        for k in 0..4 {
            let (x0, y0) = p[k];
            let (x1, y1) = p[(k + 1) % 4];
            s += x0 * y1 - x1 * y0;
        }
        0.5 * s
    }

    pub fn total_area(&self) -> f64 {
        self.cell_areas.iter().sum()
    }

    /// Physical length of each lid edge (one per column).
    pub fn lid_edge_lengths(&self) -> Vec<f64> {
        (0..self.nx)
            .map(|i| {
                let (x0, y0) = self.vertex(i, self.ny);
                let (x1, y1) = self.vertex(i + 1, self.ny);
                ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
            })
            .collect()
    }

    /// Characteristic cell size used by the eddy-viscosity model.
    pub fn filter_width(&self, c: usize) -> f64 {
        self.cell_areas[c].sqrt()
    }
}
