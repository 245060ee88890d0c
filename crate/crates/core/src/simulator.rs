//! Nonlinear evolution of the two-phase system on the fixed reference domain.
//!
//! The interface is the graph `Y = h(x)` over the equilibrium level. The moving domain is
//! pulled back through `θ_h(x, y) = (x, y + χ(y)h(x))` with a quintic cut-off `χ`, so the
//! interface sits at `y = 0`. The scaling is `π ≡ 1`: the unknown is the pressure itself.
//!
//! Mass is balanced on vertex-centred dual cells of the reference grid (ALE form):
//! `d/dt ∫ ρJ + ∮ ρ(Dθ)^{−1}(u − ∂_tθ)·J n = 0`, `J = 1 + χ′h`, with Darcy's law written as
//! `u = −kρ∇μ`, `μ = φ(ρ) + γY`, so hydrostatic columns have zero discrete flux.
//! Nodal `J` is the exact dual-cell height ratio, which makes the discrete geometric
//! conservation law hold identically. Phase masses are conserved to solver tolerance.
//!
//! Case (i): the ALE flux through `y = 0` vanishes on each side. Case (ii): the two interface
//! half-cells share one balance and `[[φ(ρ)]] = 0`. Both cases close with the Laplace–Young law
//! `[[p]] = σ (h_x/√(1+h_x²))_x`.
//!
//! Time stepping is backward Euler solved by a chord iteration with a coloured finite-difference
//! Jacobian. Only interval cross-sections are supported.

use serde::Serialize;

use crate::eos::FreeEnergySpec;
use crate::equilibria::{Case, FlatEquilibrium};
use crate::error::{Error, Result};
use crate::geometry::{Grid, Resolution};
use crate::numerics::SparseLu;

/// Scaled residual above which an initial-state condition counts as violated.
pub const COMPATIBILITY_TOL: f64 = 1e-6;

/// Quintic smoothstep `S(s) = 6s⁵ − 15s⁴ + 10s³` and `S′`, clamped to `[0, 1]`.
fn smoothstep(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0)
    } else {
        let s2 = s * s;
        ((s2 * s * (10.0 - 15.0 * s + 6.0 * s2)).min(1.0), 30.0 * s2 * (1.0 - s) * (1.0 - s))
    }
}

/// Cut-off `χ` on `[−H₁, H₂]`: 1 on `(−H₁/3, H₂/3)`, 0 outside `(−2H₁/3, 2H₂/3)`, C².
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Cutoff {
    pub h1: f64,
    pub h2: f64,
}

impl Cutoff {
    pub fn eval(&self, y: f64) -> (f64, f64) {
        if y <= 0.0 {
            let w = self.h1 / 3.0;
            let (s, ds) = smoothstep((y + 2.0 * w) / w);
            (s, ds / w)
        } else {
            let w = self.h2 / 3.0;
            let (s, ds) = smoothstep((2.0 * w - y) / w);
            (s, -ds / w)
        }
    }

    /// `|χ′|_∞ = (15/8)·3/min(H₁, H₂)`.
    pub fn max_slope(&self) -> f64 {
        45.0 / (8.0 * self.h1.min(self.h2))
    }

    /// Largest admissible `|h|_∞`: `min(H₁, H₂)/3` and `1/(2|χ′|_∞)`.
    pub fn height_bound(&self) -> f64 {
        (self.h1.min(self.h2) / 3.0).min(0.5 / self.max_slope())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    ConvergedToEquilibrium,
    GrowingPerturbation,
    ReachedTEnd,
    StepFailureCascade,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum Scheme {
    /// Backward Euler, coupled, solved to tolerance by a chord iteration.
    BackwardEuler,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    /// Neumann mode index `n` of the initial height perturbation `ε cos(nπx/L)`.
    pub mode: usize,
    pub amplitude: f64,
    /// Record a snapshot every this many steps (0 disables snapshots).
    pub output_every: usize,
    /// Convergence when the scaled `‖∂_t(p, h)‖_∞` drops below this.
    pub stall_tol: f64,
    /// Chord iteration stops when the scaled update is below this.
    pub newton_tol: f64,
    pub max_halvings: u32,
    /// Stop with `GrowingPerturbation` once `‖h‖_∞` exceeds this fraction of the bound.
    pub growth_stop_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-2,
            t_end: 1.0,
            scheme: Scheme::BackwardEuler,
            mode: 1,
            amplitude: 1e-3,
            output_every: 0,
            stall_tol: 1e-9,
            newton_tol: 1e-12,
            max_halvings: 10,
            growth_stop_fraction: 0.1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::Config("dt and t_end must be positive".into()));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::Config("amplitude must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Pressure at every node (grid ordering) and the height on the G-mesh, at time `t`.
#[derive(Clone, Debug)]
pub struct SimState {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub t: f64,
    pub energy: f64,
    /// Rounding scale of `energy`: `ε_mach √N` times the sum of absolute contributions.
    pub energy_roundoff: f64,
    pub dissipation: f64,
    pub masses: [f64; 2],
    /// `‖h − h̄‖₂` with `h̄` the mean height.
    pub h_dev_l2: f64,
    pub h_dev_max: f64,
    /// `‖h‖_∞`, the distance of the interface from its equilibrium level.
    pub h_max: f64,
    pub grad_h_l2: f64,
    pub velocity_l2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompatibilityReport {
    pub residuals: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthFit {
    pub rate: f64,
    pub r_squared: f64,
    pub window: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub trace: Vec<Diagnostics>,
    pub snapshots: Vec<SimState>,
    pub final_state: SimState,
    pub verdict: Verdict,
    pub steps: usize,
    pub halvings: usize,
}

#[derive(Clone, Debug)]
struct NodeGeom {
    y: f64,
    chi: f64,
    dchi: f64,
    /// `χ(e⁺) − χ(e⁻)` over the dual cell.
    dchi_cell: f64,
    omega: f64,
}

/// Node-level quantities of a state.
struct Fields {
    rho: Vec<f64>,
    mu: Vec<f64>,
    jac: Vec<f64>,
    h: Vec<f64>,
    hx: Vec<f64>,
    mux: Vec<f64>,
    muy: Vec<f64>,
}

pub struct Simulator {
    pub eq: FlatEquilibrium,
    pub sigma: f64,
    pub grid: Grid,
    pub cutoff: Cutoff,
    nodes: [Vec<NodeGeom>; 2],
    /// Unified column layout: phase 1 j = 0..=nb, then phase 2 j = 0..=na.
    n1d: usize,
    nb1: usize,
    p_scale: f64,
    lu: Option<(SparseLu, f64)>,
}

impl Simulator {
    pub fn new(eq: &FlatEquilibrium, sigma: f64, res: Resolution) -> Result<Simulator> {
        let grid = Grid::build(&eq.shifted_geometry(), res)?;
        if !grid.is_interval() {
            return Err(Error::Config("the simulator supports interval cross-sections only".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma={sigma} must be positive")));
        }
        let cutoff = Cutoff {
            h1: grid.geom.h_lower,
            h2: grid.geom.h_upper,
        };
        let mut nodes: [Vec<NodeGeom>; 2] = [Vec::new(), Vec::new()];
        for ph in [1, 2] {
            let y = grid.y_phase(ph);
            let om = grid.omega(ph);
            let n = y.len();
            let d = grid.dy_phase(ph);
            for j in 0..n {
                let lo = if j == 0 { y[0] } else { y[j] - 0.5 * d };
                let hi = if j == n - 1 { y[n - 1] } else { y[j] + 0.5 * d };
                let (chi, dchi) = cutoff.eval(y[j]);
                nodes[ph - 1].push(NodeGeom {
                    y: y[j],
                    chi,
                    dchi,
                    dchi_cell: cutoff.eval(hi).0 - cutoff.eval(lo).0,
                    omega: om[j],
                });
            }
        }
        let nb1 = grid.ny_phase(1);
        let n1d = nb1 + grid.ny_phase(2);
        Ok(Simulator {
            eq: eq.clone(),
            sigma,
            grid,
            cutoff,
            nodes,
            n1d,
            nb1,
            p_scale: eq.p_b,
            lu: None,
        })
    }

    fn spec(&self, ph: usize) -> &FreeEnergySpec {
        self.eq.system.spec(ph)
    }

    fn col(&self, c: usize) -> (usize, usize) {
        if c < self.nb1 {
            (1, c)
        } else {
            (2, c - self.nb1)
        }
    }

    fn idx(&self, c: usize, ig: usize) -> usize {
        let (ph, j) = self.col(c);
        self.grid.w_index(ph, ig, j)
    }

    fn node(&self, c: usize) -> &NodeGeom {
        let (ph, j) = self.col(c);
        &self.nodes[ph - 1][j]
    }

    pub fn n_unknowns(&self) -> usize {
        self.grid.n_unknowns()
    }

    pub fn heights<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.grid.h_index(0)..]
    }

    /// The equilibrium itself: hydrostatic nodal pressures, flat interface.
    pub fn equilibrium_state(&self) -> Result<SimState> {
        let mut x = vec![0.0; self.n_unknowns()];
        for c in 0..self.n1d {
            let (ph, _) = self.col(c);
            let p = self.eq.state_shifted(ph, self.node(c).y)?.0;
            for ig in 0..self.grid.n_g() {
                x[self.idx(c, ig)] = p;
            }
        }
        Ok(SimState { t: 0.0, x })
    }

    /// Discrete curvature flux `h_x/√(1 + h_x²)` on the G-mesh faces.
    fn curvature_faces(&self, h: &[f64]) -> Vec<f64> {
        let dx = self.grid.dx;
        h.windows(2)
            .map(|w| {
                let s = (w[1] - w[0]) / dx;
                s / (1.0 + s * s).sqrt()
            })
            .collect()
    }

    /// `θ_i σ div(β∇h)` at G-node `i` in weak (flux-difference) form.
    fn surface_force(&self, h: &[f64]) -> Vec<f64> {
        let g = self.curvature_faces(h);
        let ng = h.len();
        (0..ng)
            .map(|i| {
                let right = if i + 1 < ng { g[i] } else { 0.0 };
                let left = if i > 0 { g[i - 1] } else { 0.0 };
                self.sigma * (right - left)
            })
            .collect()
    }

    /// Hydrostatic-column initial data: `h = ε cos(nπx/L)`; in each column the potential
    /// `μ = φ(ρ) + γY` is constant per phase with levels fixed by the interface laws.
    pub fn perturbed_state(&self, mode: usize, amplitude: f64) -> Result<SimState> {
        self.perturbed_state_modes(&[(mode, amplitude)])
    }

    /// As [`Simulator::perturbed_state`] with `h = Σ ε_n cos(nπx/L)` over `(n, ε_n)`.
    pub fn perturbed_state_modes(&self, modes: &[(usize, f64)]) -> Result<SimState> {
        let ng = self.grid.n_g();
        let l = self.grid.g_nodes[ng - 1].0;
        let h: Vec<f64> = self
            .grid
            .g_nodes
            .iter()
            .map(|&(x, _)| {
                modes
                    .iter()
                    .map(|&(n, a)| a * (n as f64 * std::f64::consts::PI * x / l).cos())
                    .sum()
            })
            .collect();
        if h.iter().fold(0.0f64, |m, v| m.max(v.abs())) >= self.cutoff.height_bound() {
            return Err(Error::Config("perturbation violates the diffeomorphism bound".into()));
        }
        let force = self.surface_force(&h);
        let (s1, s2) = (self.spec(1), self.spec(2));
        let gamma = self.eq.gamma();
        let (_, rho_eq_minus, _) = self.eq.state_shifted(1, 0.0)?;
        let level1_eq = s1.phi_unchecked(rho_eq_minus);
        let mut x = vec![0.0; self.n_unknowns()];
        for ig in 0..ng {
            let jump = force[ig] / self.grid.theta[ig];
            let (l1, l2) = match self.eq.case {
                Case::I => {
                    let rho_m = s1.inverse_phi(level1_eq - gamma * h[ig])?;
                    let p_plus = s1.p_unchecked(rho_m) + jump;
                    let rho_p = s2.density_from_pressure(p_plus)?;
                    (level1_eq, s2.phi_unchecked(rho_p) + gamma * h[ig])
                }
                Case::II => {
                    // Common level a with p₂(a − γh) − p₁(a − γh) = jump; increasing in a
                    // when [[ρ]] > 0 and decreasing otherwise, solved by secant iteration.
                    let f = |a: f64| -> Result<f64> {
                        let r1 = s1.inverse_phi(a - gamma * h[ig])?;
                        let r2 = s2.inverse_phi(a - gamma * h[ig])?;
                        Ok(s2.p_unchecked(r2) - s1.p_unchecked(r1) - jump)
                    };
                    let mut a0 = level1_eq;
                    let mut a1 = level1_eq + 1e-6 * level1_eq.abs().max(1.0);
                    let mut f0 = f(a0)?;
                    for _ in 0..60 {
                        let f1 = f(a1)?;
                        if f1 == 0.0 || (a1 - a0).abs() <= 1e-15 * a1.abs().max(1.0) {
                            break;
                        }
                        let a2 = a1 - f1 * (a1 - a0) / (f1 - f0);
                        a0 = a1;
                        f0 = f1;
                        a1 = a2;
                    }
                    (a1, a1)
                }
            };
            for c in 0..self.n1d {
                let (ph, _) = self.col(c);
                let nd = self.node(c);
                let yy = nd.y + nd.chi * h[ig];
                let (spec, lev) = if ph == 1 { (s1, l1) } else { (s2, l2) };
                let rho = spec.inverse_phi(lev - gamma * yy)?;
                x[self.idx(c, ig)] = spec.p_unchecked(rho);
            }
            x[self.grid.h_index(ig)] = h[ig];
        }
        Ok(SimState { t: 0.0, x })
    }

    fn fields(&self, x: &[f64]) -> Result<Fields> {
        let ng = self.grid.n_g();
        let n = self.n_unknowns();
        let gamma = self.eq.gamma();
        let h: Vec<f64> = x[self.grid.h_index(0)..].to_vec();
        let bound = self.cutoff.height_bound();
        if let Some(v) = h.iter().find(|v| !(v.abs() < bound)) {
            return Err(Error::StepFailure(format!(
                "height {v} violates the diffeomorphism bound {bound}"
            )));
        }
        let mut rho = vec![0.0; n];
        let mut mu = vec![0.0; n];
        let mut jac = vec![0.0; n];
        for c in 0..self.n1d {
            let (ph, _) = self.col(c);
            let spec = self.spec(ph);
            let nd = self.node(c);
            for ig in 0..ng {
                let i = self.idx(c, ig);
                let p = x[i];
                let r = spec
                    .density_from_pressure(p)
                    .map_err(|e| Error::StepFailure(format!("pressure left the admissible range: {e}")))?;
                rho[i] = r;
                mu[i] = spec.phi_unchecked(r) + gamma * (nd.y + nd.chi * h[ig]);
                jac[i] = 1.0 + h[ig] * nd.dchi_cell / nd.omega;
            }
        }
        let dx = self.grid.dx;
        let hx: Vec<f64> = (0..ng)
            .map(|i| {
                if i == 0 || i == ng - 1 {
                    0.0
                } else {
                    (h[i + 1] - h[i - 1]) / (2.0 * dx)
                }
            })
            .collect();
        let mut mux = vec![0.0; n];
        let mut muy = vec![0.0; n];
        for c in 0..self.n1d {
            let (ph, j) = self.col(c);
            let ny = self.grid.ny_phase(ph);
            let dy = self.grid.dy_phase(ph);
            for ig in 0..ng {
                let i = self.idx(c, ig);
                mux[i] = if ig == 0 || ig == ng - 1 {
                    0.0
                } else {
                    (mu[self.idx(c, ig + 1)] - mu[self.idx(c, ig - 1)]) / (2.0 * dx)
                };
                let m = |jj: usize| mu[self.grid.w_index(ph, ig, jj)];
                muy[i] = if j == 0 {
                    (-3.0 * m(0) + 4.0 * m(1) - m(2)) / (2.0 * dy)
                } else if j == ny - 1 {
                    (3.0 * m(j) - 4.0 * m(j - 1) + m(j - 2)) / (2.0 * dy)
                } else {
                    (m(j + 1) - m(j - 1)) / (2.0 * dy)
                };
            }
        }
        Ok(Fields {
            rho,
            mu,
            jac,
            h,
            hx,
            mux,
            muy,
        })
    }

    /// Mass `A_i ρ_i J_i` of every dual cell.
    fn cell_masses(&self, f: &Fields) -> Vec<f64> {
        let mut m = vec![0.0; self.n_unknowns()];
        for c in 0..self.n1d {
            let nd = self.node(c);
            for ig in 0..self.grid.n_g() {
                let i = self.idx(c, ig);
                m[i] = self.grid.theta[ig] * nd.omega * f.rho[i] * f.jac[i];
            }
        }
        m
    }

    /// Backward-Euler residual for the new state `x` given the old cell masses and heights.
    fn residual(&self, x: &[f64], old_mass: &[f64], old_h: &[f64], dt: f64) -> Result<Vec<f64>> {
        let f = self.fields(x)?;
        let grid = &self.grid;
        let ng = grid.n_g();
        let dx = grid.dx;
        let mass = self.cell_masses(&f);
        let mut r: Vec<f64> = mass.iter().zip(old_mass).map(|(a, b)| a - b).collect();
        let ht: Vec<f64> = f.h.iter().zip(old_h).map(|(a, b)| (a - b) / dt).collect();
        for c in 0..self.n1d {
            let (ph, j) = self.col(c);
            let k = self.spec(ph).k;
            let ny = grid.ny_phase(ph);
            let dy = grid.dy_phase(ph);
            let nd = self.node(c);
            // Vertical face between j and j+1.
            if j + 1 < ny {
                let c2 = c + 1;
                let nd2 = self.node(c2);
                let yf = 0.5 * (nd.y + nd2.y);
                let chi_f = self.cutoff.eval(yf).0;
                for ig in 0..ng {
                    let (i0, i1) = (self.idx(c, ig), self.idx(c2, ig));
                    let rho_f = 0.5 * (f.rho[i0] + f.rho[i1]);
                    let jf = 1.0 + f.h[ig] * (nd2.chi - nd.chi) / dy;
                    let muy = (f.mu[i1] - f.mu[i0]) / dy;
                    let mux = 0.5 * (f.mux[i0] + f.mux[i1]);
                    let a = chi_f * f.hx[ig];
                    let flux = -k * rho_f * rho_f * ((1.0 + a * a) * muy / jf - a * mux) - rho_f * chi_f * ht[ig];
                    let t = dt * grid.theta[ig] * flux;
                    r[i0] += t;
                    r[i1] -= t;
                }
            }
            // Horizontal faces at this level.
            for ig in 0..ng - 1 {
                let (i0, i1) = (self.idx(c, ig), self.idx(c, ig + 1));
                let rho_f = 0.5 * (f.rho[i0] + f.rho[i1]);
                let jf = 0.5 * (f.jac[i0] + f.jac[i1]);
                let mux = (f.mu[i1] - f.mu[i0]) / dx;
                let muy = 0.5 * (f.muy[i0] + f.muy[i1]);
                let hx = (f.h[ig + 1] - f.h[ig]) / dx;
                let flux = -k * rho_f * rho_f * (jf * mux - nd.chi * hx * muy);
                let t = dt * nd.omega * flux;
                r[i0] += t;
                r[i1] -= t;
            }
        }
        let force = self.surface_force(&f.h);
        let (cm, cp) = (self.nb1 - 1, self.nb1);
        for ig in 0..ng {
            let (im, ip) = (self.idx(cm, ig), self.idx(cp, ig));
            if self.eq.case == Case::II {
                r[im] += r[ip];
                r[ip] = self.spec(2).phi_unchecked(f.rho[ip]) - self.spec(1).phi_unchecked(f.rho[im]);
            }
            r[grid.h_index(ig)] = grid.theta[ig] * (x[ip] - x[im]) - force[ig];
        }
        Ok(r)
    }

    fn scales(&self) -> Vec<f64> {
        let hs = self.cutoff.h1.min(self.cutoff.h2);
        let mut s = vec![self.p_scale; self.n_unknowns()];
        for ig in 0..self.grid.n_g() {
            s[self.grid.h_index(ig)] = hs;
        }
        s
    }

    /// Coloured forward-difference Jacobian. Unknown `(c, ig)` touches rows within
    /// `|Δig| ≤ 2`, `|Δc| ≤ 3`; heights touch rows within `|Δig| ≤ 2`.
    fn jacobian(&self, x: &[f64], old_mass: &[f64], old_h: &[f64], dt: f64) -> Result<Vec<(usize, usize, f64)>> {
        let n = self.n_unknowns();
        let ng = self.grid.n_g();
        let r0 = self.residual(x, old_mass, old_h, dt)?;
        let scales = self.scales();
        let mut owner_col = vec![(0usize, 0usize); n];
        for c in 0..self.n1d {
            for ig in 0..ng {
                owner_col[self.idx(c, ig)] = (c, ig);
            }
        }
        let mut trip = Vec::new();
        let (pc, pg) = (7usize, 5usize);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for a in 0..pg {
            for b in 0..pc {
                let g: Vec<usize> = (0..self.n1d)
                    .filter(|c| c % pc == b)
                    .flat_map(|c| (0..ng).filter(move |ig| ig % pg == a).map(move |ig| (c, ig)))
                    .map(|(c, ig)| self.idx(c, ig))
                    .collect();
                if !g.is_empty() {
                    groups.push(g);
                }
            }
        }
        for a in 0..pg {
            let g: Vec<usize> = (0..ng).filter(|ig| ig % pg == a).map(|ig| self.grid.h_index(ig)).collect();
            if !g.is_empty() {
                groups.push(g);
            }
        }
        let row_pos = |row: usize| -> (Option<usize>, usize) {
            if row >= self.grid.h_index(0) {
                (None, row - self.grid.h_index(0))
            } else {
                (Some(owner_col[row].0), owner_col[row].1)
            }
        };
        for g in groups {
            let mut xp = x.to_vec();
            let mut steps = Vec::with_capacity(g.len());
            for &i in &g {
                let e = 1e-7 * x[i].abs().max(scales[i]);
                xp[i] += e;
                steps.push(e);
            }
            let r1 = self.residual(&xp, old_mass, old_h, dt)?;
            for row in 0..n {
                let d = r1[row] - r0[row];
                if d == 0.0 {
                    continue;
                }
                let (rc, rg) = row_pos(row);
                // The unique member of the group that can reach this row.
                let hit = g.iter().zip(&steps).find(|(&i, _)| {
                    if i >= self.grid.h_index(0) {
                        let ig = i - self.grid.h_index(0);
                        ig.abs_diff(rg) <= 2
                    } else {
                        let (c, ig) = owner_col[i];
                        let near = match rc {
                            Some(rc) => c.abs_diff(rc) <= 3,
                            // Laplace–Young rows see only the two trace columns.
                            None => c + 1 == self.nb1 || c == self.nb1,
                        };
                        ig.abs_diff(rg) <= 2 && near
                    }
                });
                if let Some((&i, &e)) = hit {
                    trip.push((row, i, d / e));
                }
            }
        }
        Ok(trip)
    }

    /// One backward-Euler step of size `dt`; the Jacobian factorisation is reused across
    /// steps and refreshed when the chord iteration stalls.
    pub fn step(&mut self, state: &SimState, dt: f64, cfg: &SimConfig) -> Result<SimState> {
        let f0 = self.fields(&state.x)?;
        let old_mass = self.cell_masses(&f0);
        let old_h = f0.h.clone();
        let scales = self.scales();
        let mut refreshes = 0;
        let mut x = state.x.clone();
        if self.lu.as_ref().map_or(true, |(_, d)| *d != dt) {
            self.refresh(&x, &old_mass, &old_h, dt)?;
            refreshes += 1;
        }
        loop {
            let mut converged = false;
            let mut last = f64::INFINITY;
            let mut ok = true;
            for _ in 0..25 {
                let r = match self.residual(&x, &old_mass, &old_h, dt) {
                    Ok(r) => r,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                };
                let delta = self.lu.as_ref().unwrap().0.solve(&r);
                let size = delta.iter().zip(&scales).fold(0.0f64, |m, (d, s)| m.max((d / s).abs()));
                if !size.is_finite() || size > 0.9 * last && size > 1e3 * cfg.newton_tol {
                    ok = false;
                    break;
                }
                for (xi, di) in x.iter_mut().zip(&delta) {
                    *xi -= di;
                }
                last = size;
                if size <= cfg.newton_tol {
                    converged = true;
                    break;
                }
            }
            if converged && ok {
                return Ok(SimState { t: state.t + dt, x });
            }
            if refreshes >= 3 {
                return Err(Error::StepFailure(format!("chord iteration failed at t={} dt={dt}", state.t)));
            }
            x = state.x.clone();
            // Refresh around the best available iterate: the previous state.
            self.refresh(&x, &old_mass, &old_h, dt)?;
            refreshes += 1;
        }
    }

    fn refresh(&mut self, x: &[f64], old_mass: &[f64], old_h: &[f64], dt: f64) -> Result<()> {
        let trip = self.jacobian(x, old_mass, old_h, dt)?;
        let lu = SparseLu::factor(self.n_unknowns(), &trip)
            .ok_or_else(|| Error::StepFailure("singular step Jacobian".into()))?;
        self.lu = Some((lu, dt));
        Ok(())
    }

    pub fn diagnostics(&self, state: &SimState) -> Result<Diagnostics> {
        let f = self.fields(&state.x)?;
        let grid = &self.grid;
        let ng = grid.n_g();
        let gamma = self.eq.gamma();
        let mut energy = 0.0;
        let mut energy_abs = 0.0;
        let mut diss = 0.0;
        let mut vel = 0.0;
        let mut masses = [0.0; 2];
        for c in 0..self.n1d {
            let (ph, _) = self.col(c);
            let spec = self.spec(ph);
            let nd = self.node(c);
            for ig in 0..ng {
                let i = self.idx(c, ig);
                let w = grid.theta[ig] * nd.omega * f.jac[i];
                let rho = f.rho[i];
                let yy = nd.y + nd.chi * f.h[ig] + self.eq.h;
                let e = w * (rho * spec.psi(rho) + gamma * rho * yy);
                energy += e;
                energy_abs += e.abs();
                masses[ph - 1] += w * rho;
                let jn = 1.0 + nd.dchi * f.h[ig];
                let gx = f.mux[i] - nd.chi * f.hx[ig] * f.muy[i] / jn;
                let gy = f.muy[i] / jn;
                let g2 = gx * gx + gy * gy;
                diss -= w * spec.k * rho * rho * g2;
                vel += w * spec.k * spec.k * rho * rho * g2;
            }
        }
        let faces = self.curvature_faces(&f.h);
        for g in &faces {
            // √(1 + h_x²) from h_x/√(1 + h_x²).
            let e = self.sigma * grid.dx / (1.0 - g * g).sqrt();
            energy += e;
            energy_abs += e;
        }
        let area: f64 = grid.theta.iter().sum();
        let mean = f.h.iter().zip(&grid.theta).map(|(h, t)| h * t).sum::<f64>() / area;
        let h_dev_l2 = f.h.iter().zip(&grid.theta).map(|(h, t)| t * (h - mean).powi(2)).sum::<f64>().sqrt();
        let h_dev_max = f.h.iter().fold(0.0f64, |m, h| m.max((h - mean).abs()));
        let grad_h_l2 = f
            .h
            .windows(2)
            .map(|w| ((w[1] - w[0]) / grid.dx).powi(2) * grid.dx)
            .sum::<f64>()
            .sqrt();
        Ok(Diagnostics {
            t: state.t,
            energy,
            energy_roundoff: f64::EPSILON * (self.n_unknowns() as f64).sqrt() * energy_abs,
            dissipation: diss,
            masses,
            h_dev_l2,
            h_dev_max,
            h_max: f.h.iter().fold(0.0f64, |m, h| m.max(h.abs())),
            grad_h_l2,
            velocity_l2: vel.sqrt(),
        })
    }

    /// Discrete residual of each compatibility condition, scaled to be dimensionless.
    pub fn compatibility_residuals(&self, state: &SimState) -> Result<CompatibilityReport> {
        let f = self.fields(&state.x)?;
        let grid = &self.grid;
        let ng = grid.n_g();
        let gamma = self.eq.gamma();
        let h_ref = self.cutoff.h1.min(self.cutoff.h2);
        let mu_scale = if gamma > 0.0 {
            gamma
        } else {
            f.mu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300) / h_ref
        };
        let mut out = Vec::new();
        // Outer walls: ∂_Y p + γρ = ρ ∂_Y μ = 0 at bottom and top.
        let mut outer: f64 = 0.0;
        for ig in 0..ng {
            for (ph, j) in [(1, 0), (2, grid.ny_phase(2) - 1)] {
                let i = grid.w_index(ph, ig, j);
                outer = outer.max(f.muy[i].abs() / mu_scale);
            }
        }
        out.push(("outer_boundary".to_string(), outer));
        let force = self.surface_force(&f.h);
        let (cm, cp) = (self.nb1 - 1, self.nb1);
        let mut ly: f64 = 0.0;
        for ig in 0..ng {
            let jump = state.x[self.idx(cp, ig)] - state.x[self.idx(cm, ig)];
            ly = ly.max((jump - force[ig] / grid.theta[ig]).abs() / self.p_scale);
        }
        out.push(("laplace_young".to_string(), ly));
        let h = &f.h;
        let dx = grid.dx;
        let n = h.len();
        // Five-point one-sided slopes; exact through quartics.
        let one_sided = |g: &dyn Fn(usize) -> f64| {
            (-25.0 * g(0) + 48.0 * g(1) - 36.0 * g(2) + 16.0 * g(3) - 3.0 * g(4)) / (12.0 * dx)
        };
        let left = one_sided(&|k| h[k]);
        let right = one_sided(&|k| h[n - 1 - k]);
        out.push(("neumann_h".to_string(), left.abs().max(right.abs())));
        match self.eq.case {
            Case::I => {
                // [[u_Y − h_x u_X]] = [[−kρ((1 + h_x²)∂_yμ − h_x ∂_xμ)]] on Σ.
                let k_scale = self.spec(1).k.max(self.spec(2).k);
                let rho_scale = f.rho.iter().fold(0.0f64, |m, v| m.max(*v));
                let mut fj: f64 = 0.0;
                for ig in 0..ng {
                    let side = |c: usize, ph: usize| {
                        let i = self.idx(c, ig);
                        let hx = f.hx[ig];
                        -self.spec(ph).k * f.rho[i] * ((1.0 + hx * hx) * f.muy[i] - hx * f.mux[i])
                    };
                    let jump = side(cp, 2) - side(cm, 1);
                    fj = fj.max(jump.abs() / (k_scale * rho_scale * mu_scale));
                }
                out.push(("flux_jump".to_string(), fj));
            }
            Case::II => {
                let mut pe: f64 = 0.0;
                let mut dj = f64::INFINITY;
                for ig in 0..ng {
                    let (im, ip) = (self.idx(cm, ig), self.idx(cp, ig));
                    let d = self.spec(2).phi_unchecked(f.rho[ip]) - self.spec(1).phi_unchecked(f.rho[im]);
                    pe = pe.max(d.abs() / (mu_scale * h_ref));
                    dj = dj.min((f.rho[ip] - f.rho[im]).abs() / f.rho[ip].max(f.rho[im]));
                }
                out.push(("phase_equilibrium".to_string(), pe));
                // Reported as a violation measure: 1 when the density jump vanishes.
                out.push(("density_jump".to_string(), if dj > 1e-12 { 0.0 } else { 1.0 }));
            }
        }
        Ok(CompatibilityReport { residuals: out })
    }

    pub fn validate_initial_state(&self, state: &SimState) -> Result<CompatibilityReport> {
        let rep = self.compatibility_residuals(state)?;
        let violated: Vec<String> = rep
            .residuals
            .iter()
            .filter(|(_, v)| !(*v <= COMPATIBILITY_TOL))
            .map(|(n, v)| format!("{n} ({v:.3e})"))
            .collect();
        if violated.is_empty() {
            Ok(rep)
        } else {
            Err(Error::Compatibility { violated })
        }
    }

    /// `max |∇μ|/γ` over the nodes: zero exactly at hydrostatic states.
    pub fn equilibrium_residual(&self, state: &SimState) -> Result<f64> {
        let f = self.fields(&state.x)?;
        let gamma = self.eq.gamma().max(1e-300);
        let mut m: f64 = 0.0;
        for c in 0..self.n1d {
            let nd = self.node(c);
            for ig in 0..self.grid.n_g() {
                let i = self.idx(c, ig);
                let jn = 1.0 + nd.dchi * f.h[ig];
                let gx = f.mux[i] - nd.chi * f.hx[ig] * f.muy[i] / jn;
                let gy = f.muy[i] / jn;
                m = m.max(gx.hypot(gy) / gamma);
            }
        }
        Ok(m)
    }

    /// Advances `dt`, splitting into halves on failure up to `max_halvings` levels.
    fn advance(&mut self, s: &SimState, dt: f64, cfg: &SimConfig, level: u32, halvings: &mut usize) -> Result<SimState> {
        match self.step(s, dt, cfg) {
            Ok(n) => Ok(n),
            Err(e) => {
                if level >= cfg.max_halvings {
                    return Err(e);
                }
                *halvings += 1;
                let mid = self.advance(s, 0.5 * dt, cfg, level + 1, halvings)?;
                self.advance(&mid, 0.5 * dt, cfg, level + 1, halvings)
            }
        }
    }

    pub fn run(&mut self, initial: &SimState, cfg: &SimConfig) -> Result<RunResult> {
        cfg.validate()?;
        let scales = self.scales();
        let bound = self.cutoff.height_bound();
        let mut state = initial.clone();
        let mut trace = vec![self.diagnostics(&state)?];
        let mut snapshots = Vec::new();
        if cfg.output_every > 0 {
            snapshots.push(state.clone());
        }
        let mut steps = 0usize;
        let mut halvings = 0usize;
        let mut max_rate: f64 = 0.0;
        let n_steps = (cfg.t_end / cfg.dt - 1e-9).ceil() as usize;
        let mut verdict = Verdict::ReachedTEnd;
        for _ in 0..n_steps {
            let dt = cfg.dt.min(cfg.t_end - state.t).max(1e-300);
            let next = match self.advance(&state, dt, cfg, 0, &mut halvings) {
                Ok(n) => n,
                Err(Error::StepFailure(msg)) => {
                    verdict = if msg.contains("diffeomorphism") {
                        Verdict::GrowingPerturbation
                    } else {
                        Verdict::StepFailureCascade
                    };
                    break;
                }
                Err(e) => return Err(e),
            };
            let rate = next
                .x
                .iter()
                .zip(&state.x)
                .zip(&scales)
                .fold(0.0f64, |m, ((a, b), s)| m.max(((a - b) / s).abs()))
                / dt;
            max_rate = max_rate.max(rate);
            state = next;
            steps += 1;
            let d = self.diagnostics(&state)?;
            let h_dev = d.h_max;
            trace.push(d);
            if cfg.output_every > 0 && steps % cfg.output_every == 0 {
                snapshots.push(state.clone());
            }
            if h_dev > cfg.growth_stop_fraction * bound {
                verdict = Verdict::GrowingPerturbation;
                break;
            }
            if rate < cfg.stall_tol && max_rate >= 10.0 * cfg.stall_tol {
                verdict = Verdict::ConvergedToEquilibrium;
                break;
            }
        }
        Ok(RunResult {
            trace,
            snapshots,
            final_state: state,
            verdict,
            steps,
            halvings,
        })
    }
}

/// Least-squares slope of `ln ‖h − h̄‖` against `t`.
///
/// Growing series use the window `[10 n₀, 0.1 bound]`; decaying series use `[10⁻⁴ n₀, 0.1 n₀]`
/// above a floor of `10⁻¹⁰ n₀`, where `n₀` is the first sample.
pub fn growth_rate_estimate(t: &[f64], norm: &[f64], bound: f64) -> Result<GrowthFit> {
    if t.len() != norm.len() || t.len() < 20 {
        return Err(Error::Fit("need at least 20 samples".into()));
    }
    let n0 = norm[0];
    let growing = norm[norm.len() - 1] > n0;
    let (lo, hi) = if growing {
        (10.0 * n0, 0.1 * bound)
    } else {
        ((1e-4 * n0).max(1e-10 * n0), 0.1 * n0)
    };
    // Longest run of consecutive samples inside the window with monotone norm.
    let mut best = (0, 0);
    let mut start = None;
    for i in 0..norm.len() {
        let inside = norm[i] >= lo && norm[i] <= hi;
        let mono = i == 0 || start.is_none() || (growing == (norm[i] > norm[i - 1]));
        match (inside && mono, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s > best.1 - best.0 {
                    best = (s, i);
                }
                start = if inside { Some(i) } else { None };
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if norm.len() - s > best.1 - best.0 {
            best = (s, norm.len());
        }
    }
    if best.1 - best.0 < 20 {
        return Err(Error::Fit(format!(
            "no monotone window with 20 samples in [{lo:.3e}, {hi:.3e}]"
        )));
    }
    let (a, b) = best;
    let xs = &t[a..b];
    let ys: Vec<f64> = norm[a..b].iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
        .sum();
    Ok(GrowthFit {
        rate: slope,
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
        window: (a, b),
    })
}
