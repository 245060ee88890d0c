//! Capillary geometry, the Neumann spectrum of the cross-section and the interface-fitted grid.

use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Csr;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum CrossSection {
    Interval { l: f64 },
    Rectangle { l1: f64, l2: f64 },
}

/// The capillary `G × (−h̲, h̄)` with the flat reference interface `Σ = G × {0}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CapillaryGeometry {
    pub cross_section: CrossSection,
    pub h_lower: f64,
    pub h_upper: f64,
}

/// Relative tolerance for merging coincident eigenvalues of the rectangle.
const COINCIDENCE_RTOL: f64 = 1e-12;

impl CapillaryGeometry {
    pub fn interval(l: f64, h_lower: f64, h_upper: f64) -> Self {
        CapillaryGeometry {
            cross_section: CrossSection::Interval { l },
            h_lower,
            h_upper,
        }
    }

    pub fn rectangle(l1: f64, l2: f64, h_lower: f64, h_upper: f64) -> Self {
        CapillaryGeometry {
            cross_section: CrossSection::Rectangle { l1, l2 },
            h_lower,
            h_upper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lens: Vec<f64> = match self.cross_section {
            CrossSection::Interval { l } => vec![l],
            CrossSection::Rectangle { l1, l2 } => vec![l1, l2],
        };
        for v in lens.iter().chain([self.h_lower, self.h_upper].iter()) {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("geometry lengths must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Measure `|G|` of the cross-section.
    pub fn area(&self) -> f64 {
        match self.cross_section {
            CrossSection::Interval { l } => l,
            CrossSection::Rectangle { l1, l2 } => l1 * l2,
        }
    }

    /// First `count` distinct eigenvalues of `−Δ_N` on `G` with multiplicities, starting at 0.
    pub fn neumann_eigenvalues(&self, count: usize) -> Vec<(f64, usize)> {
        match self.cross_section {
            CrossSection::Interval { l } => (0..count)
                .map(|n| (((n as f64) * PI / l).powi(2), 1))
                .collect(),
            CrossSection::Rectangle { l1, l2 } => {
                if count == 0 {
                    return Vec::new();
                }
                // The count-th distinct value is at most ((count−1)π/L)² for L = max(L₁, L₂).
                let lmax = l1.max(l2);
                let bound = (((count - 1) as f64) * PI / lmax).powi(2) * (1.0 + 1e-9);
                let n1max = (bound.sqrt() * l1 / PI).floor() as usize + 1;
                let n2max = (bound.sqrt() * l2 / PI).floor() as usize + 1;
                let mut vals = Vec::new();
                for n1 in 0..=n1max {
                    for n2 in 0..=n2max {
                        let mu = ((n1 as f64) * PI / l1).powi(2) + ((n2 as f64) * PI / l2).powi(2);
                        if mu <= bound {
                            vals.push(mu);
                        }
                    }
                }
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut out: Vec<(f64, usize)> = Vec::new();
                for v in vals {
                    match out.last_mut() {
                        Some((last, m)) if (v - *last).abs() <= COINCIDENCE_RTOL * v.max(1.0) => *m += 1,
                        _ => out.push((v, 1)),
                    }
                }
                out.truncate(count);
                out
            }
        }
    }

    /// Smallest nontrivial Neumann eigenvalue `μ₁`.
    pub fn mu1(&self) -> f64 {
        self.neumann_eigenvalues(2)[1].0
    }
}

/// Resolution of the tensor grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Resolution {
    pub nx: usize,
    /// Cells in the second cross-section direction; ignored for intervals.
    pub ny_cross: usize,
    pub n_below: usize,
    pub n_above: usize,
}

/// One discrete Neumann mode on the G-mesh.
#[derive(Clone, Debug)]
pub struct GMode {
    /// Integer wave numbers `(l₁, l₂)`; `l₂ = 0` on intervals.
    pub index: (usize, usize),
    /// Discrete eigenvalue `ξ²` of `Θ⁻¹K_x`.
    pub xi2: f64,
    /// Continuous eigenvalue `μ` of `−Δ_N` this mode approximates.
    pub mu: f64,
    /// Nodal values, normalised so that `Σ θ v² = 1`.
    pub values: Vec<f64>,
}

/// Interface-fitted tensor grid on the reference domain.
///
/// Layout of the full unknown vector: phase-1 bulk levels `j = 0..n_below` (y-major, each level
/// holding all G-nodes), phase-2 bulk levels `j = 1..=n_above`, then the traces `w⁻`, `w⁺`
/// on `Σ`, then the heights `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub geom: CapillaryGeometry,
    pub res: Resolution,
    /// G-mesh node coordinates `(x₁, x₂)`; `x₂ = 0` on intervals.
    pub g_nodes: Vec<(f64, f64)>,
    /// Trapezoid weights of the G-mesh.
    pub theta: Vec<f64>,
    pub dx: f64,
    pub dx2: f64,
    pub dy_below: f64,
    pub dy_above: f64,
    /// y-coordinates of phase 1 nodes, from `−h̲` up to the trace at 0.
    pub y_below: Vec<f64>,
    /// y-coordinates of phase 2 nodes, from the trace at 0 up to `h̄`.
    pub y_above: Vec<f64>,
}

impl Grid {
    pub fn build(geom: &CapillaryGeometry, res: Resolution) -> Result<Grid> {
        geom.validate()?;
        let rect = matches!(geom.cross_section, CrossSection::Rectangle { .. });
        if res.nx < 4 || res.n_below < 4 || res.n_above < 4 || (rect && res.ny_cross < 4) {
            return Err(Error::Config(format!(
                "all cell counts must be at least 4, got nx={}, ny_cross={}, n_below={}, n_above={}",
                res.nx, res.ny_cross, res.n_below, res.n_above
            )));
        }
        let (l1, l2, ny) = match geom.cross_section {
            CrossSection::Interval { l } => (l, 0.0, 0),
            CrossSection::Rectangle { l1, l2 } => (l1, l2, res.ny_cross),
        };
        let dx = l1 / res.nx as f64;
        let dx2 = if rect { l2 / ny as f64 } else { 0.0 };
        let mut g_nodes = Vec::new();
        let mut theta = Vec::new();
        let tw = |i: usize, n: usize, d: f64| if i == 0 || i == n { 0.5 * d } else { d };
        for iy in 0..=ny {
            for ix in 0..=res.nx {
                g_nodes.push((ix as f64 * dx, iy as f64 * dx2));
                let w = tw(ix, res.nx, dx) * if rect { tw(iy, ny, dx2) } else { 1.0 };
                theta.push(w);
            }
        }
        let dy_below = geom.h_lower / res.n_below as f64;
        let dy_above = geom.h_upper / res.n_above as f64;
        let y_below = (0..=res.n_below)
            .map(|j| if j == res.n_below { 0.0 } else { -geom.h_lower + j as f64 * dy_below })
            .collect();
        let y_above = (0..=res.n_above)
            .map(|j| if j == res.n_above { geom.h_upper } else { j as f64 * dy_above })
            .collect();
        let grid = Grid {
            geom: *geom,
            res,
            g_nodes,
            theta,
            dx,
            dx2,
            dy_below,
            dy_above,
            y_below,
            y_above,
        };
        Ok(grid)
    }

    pub fn is_interval(&self) -> bool {
        matches!(self.geom.cross_section, CrossSection::Interval { .. })
    }

    /// Number of G-mesh nodes.
    pub fn n_g(&self) -> usize {
        self.g_nodes.len()
    }

    /// Bulk (non-trace) node count.
    pub fn n_bulk(&self) -> usize {
        self.n_g() * (self.res.n_below + self.res.n_above)
    }

    pub fn n_traces(&self) -> usize {
        2 * self.n_g()
    }

    /// Total unknowns `(w bulk, w⁻, w⁺, h)`.
    pub fn n_unknowns(&self) -> usize {
        self.n_bulk() + self.n_traces() + self.n_g()
    }

    /// Nodes along y in a phase including its trace: `n_below + 1` or `n_above + 1`.
    pub fn ny_phase(&self, phase: usize) -> usize {
        if phase == 1 {
            self.res.n_below + 1
        } else {
            self.res.n_above + 1
        }
    }

    pub fn y_phase(&self, phase: usize) -> &[f64] {
        if phase == 1 {
            &self.y_below
        } else {
            &self.y_above
        }
    }

    pub fn dy_phase(&self, phase: usize) -> f64 {
        if phase == 1 {
            self.dy_below
        } else {
            self.dy_above
        }
    }

    /// Global index of the `w` value at G-node `ig`, local y-node `j` of `phase`.
    ///
    /// Phase 1: `j = n_below` is the trace `w⁻`. Phase 2: `j = 0` is the trace `w⁺`.
    pub fn w_index(&self, phase: usize, ig: usize, j: usize) -> usize {
        let ng = self.n_g();
        let nb = self.res.n_below;
        match phase {
            1 if j < nb => j * ng + ig,
            1 => self.n_bulk() + ig,
            _ if j == 0 => self.n_bulk() + ng + ig,
            _ => (nb + j - 1) * ng + ig,
        }
    }

    pub fn h_index(&self, ig: usize) -> usize {
        self.n_bulk() + self.n_traces() + ig
    }

    /// Trapezoid weights along y for `phase`.
    pub fn omega(&self, phase: usize) -> Vec<f64> {
        let n = self.ny_phase(phase);
        let d = self.dy_phase(phase);
        (0..n)
            .map(|j| if j == 0 || j == n - 1 { 0.5 * d } else { d })
            .collect()
    }

    /// P1 Neumann stiffness `K_x` on the G-mesh: `gᵀK_xg = ∫|∇_x g|²` for the
    /// piecewise-(bi)linear interpolant, lumped in the second direction on rectangles.
    pub fn stiffness_x(&self) -> Csr {
        let mut t = Vec::new();
        let nx = self.res.nx;
        let (nyn, rect) = if self.is_interval() { (1, false) } else { (self.res.ny_cross + 1, true) };
        let tw = |i: usize, n: usize, d: f64| if i == 0 || i == n { 0.5 * d } else { d };
        for iy in 0..nyn {
            let wy = if rect { tw(iy, nyn - 1, self.dx2) } else { 1.0 };
            for ix in 0..nx {
                let a = iy * (nx + 1) + ix;
                let c = wy / self.dx;
                t.push((a, a, c));
                t.push((a + 1, a + 1, c));
                t.push((a, a + 1, -c));
                t.push((a + 1, a, -c));
            }
        }
        if rect {
            let ny = self.res.ny_cross;
            for ix in 0..=nx {
                let wx = tw(ix, nx, self.dx);
                for iy in 0..ny {
                    let a = iy * (nx + 1) + ix;
                    let b = a + nx + 1;
                    let c = wx / self.dx2;
                    t.push((a, a, c));
                    t.push((b, b, c));
                    t.push((a, b, -c));
                    t.push((b, a, -c));
                }
            }
        }
        Csr::from_triplets(self.n_g(), self.n_g(), &t)
    }

    /// Complete basis of discrete Neumann modes, sorted by `ξ²` then index.
    ///
    /// These are exact generalized eigenvectors `K_x v = ξ² Θ v` of the lumped P1 operator.
    pub fn g_modes(&self) -> Vec<GMode> {
        let nx = self.res.nx;
        let (l1, l2, ny) = match self.geom.cross_section {
            CrossSection::Interval { l } => (l, 1.0, 0),
            CrossSection::Rectangle { l1, l2 } => (l1, l2, self.res.ny_cross),
        };
        let xi = |l: usize, n: usize, d: f64, len: f64| {
            if n == 0 {
                0.0
            } else {
                (4.0 / (d * d)) * (l as f64 * PI * d / (2.0 * len)).sin().powi(2)
            }
        };
        let mut modes = Vec::new();
        for m2 in 0..=ny {
            for m1 in 0..=nx {
                let xi2 = xi(m1, nx, self.dx, l1) + xi(m2, ny, self.dx2, l2);
                let mu = (m1 as f64 * PI / l1).powi(2)
                    + if ny > 0 { (m2 as f64 * PI / l2).powi(2) } else { 0.0 };
                let mut values: Vec<f64> = self
                    .g_nodes
                    .iter()
                    .map(|&(x1, x2)| {
                        (m1 as f64 * PI * x1 / l1).cos()
                            * if ny > 0 { (m2 as f64 * PI * x2 / l2).cos() } else { 1.0 }
                    })
                    .collect();
                let nrm: f64 = values
                    .iter()
                    .zip(&self.theta)
                    .map(|(v, w)| w * v * v)
                    .sum::<f64>()
                    .sqrt();
                values.iter_mut().for_each(|v| *v /= nrm);
                modes.push(GMode {
                    index: (m1, m2),
                    xi2,
                    mu,
                    values,
                });
            }
        }
        modes.sort_by(|a, b| {
            a.xi2
                .partial_cmp(&b.xi2)
                .unwrap()
                .then(a.index.cmp(&b.index))
        });
        modes
    }

    /// Discrete Neumann eigenvalues `ξ²` of the G-mesh (with repetition), ascending.
    pub fn discrete_neumann_eigenvalues(&self) -> Vec<f64> {
        self.g_modes().iter().map(|m| m.xi2).collect()
    }
}
