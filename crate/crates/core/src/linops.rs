//! Discrete full linearization at a flat equilibrium and its spectrum.
//!
//! Scaling `π = p*`: unknowns are `w` (scaled pressure perturbation) in each phase on the
//! shifted reference domain `(−H₁, 0) ∪ (0, H₂)` and the height `h` on `G`.
//!
//! The bulk rows are the weak form obtained by testing with `v p*/ρ*`:
//! `λ∫n* w v + ∫(kp*²∇_x w·∇_x v + B*w B*v/k) + p_b∫_G(B*w⁺v⁺ − B*w⁻v⁻) = 0`.
//! Boundary conditions `B*w = 0` and `∂_ν w = 0` are natural. The interface term is closed by
//! the dynamic law, so the traces rows carry a `λ h` coupling.
//!
//! Per cell the vertical flux is `B*w ≈ kp_c[(w_{j+1} − w_j)/Δy + β_c(w_j + w_{j+1})/2]` with
//! `β_c` chosen so that `ρ*/p*` is annihilated exactly; the discrete kernel is then exact.
//!
//! Eigenvalues are computed by block-diagonalising over the discrete Neumann modes of the
//! G-mesh: `w = φ_l(x) u(y)`, `h = η φ_l(x)`. Each block is a dense pencil
//! `λ M_l u = −K_l u` with `M_l = D + (p_b/a_l) ẽẽᵀ` and `a_l = (σξ_l² − γ[[ρ*]])/p_b`.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::equilibria::{Case, FlatEquilibrium};
use crate::error::{Error, Result};
use crate::geometry::{GMode, Grid};
use crate::numerics::{norm2, Csr};

/// Relative distance of `a_l` from zero below which `μ*` counts as a Neumann eigenvalue.
pub const THRESHOLD_RTOL: f64 = 1e-9;

/// Equilibrium coefficients sampled on one phase's y-nodes.
#[derive(Clone, Debug)]
pub struct PhaseCoefficients {
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    pub rho: Vec<f64>,
    /// `ρ′(p*)`.
    pub drho: Vec<f64>,
    /// `m* = p*ρ′*`.
    pub m: Vec<f64>,
    /// `n* = m*p*/ρ*`.
    pub n: Vec<f64>,
    /// Trapezoid weights.
    pub omega: Vec<f64>,
    /// Exact `p*` at cell midpoints.
    pub p_mid: Vec<f64>,
    /// Well-balanced zero-order coefficient per cell.
    pub beta: Vec<f64>,
    pub k: f64,
    pub dy: f64,
}

#[derive(Clone, Debug)]
pub struct DiscreteLinearization {
    pub case: Case,
    pub grid: Grid,
    pub sigma: f64,
    pub gamma: f64,
    pub p_b: f64,
    pub rho_minus: f64,
    pub rho_plus: f64,
    pub jump_rho: f64,
    pub coeffs: [PhaseCoefficients; 2],
    /// One-dimensional blocks on the column layout `(phase 1 nodes incl. w⁻, phase 2 nodes incl. w⁺)`.
    pub k_y: DMatrix<f64>,
    pub d_y: Vec<f64>,
    pub w_y: Vec<f64>,
    /// Trace merge: identity in case (i); `w± = ρ± s` in case (ii).
    pub merge: DMatrix<f64>,
    pub k_x: Csr,
    pub modes: Vec<GMode>,
    /// Full pencil `λ E x = −A x` on `x = (w, h)` in grid ordering.
    pub e: Csr,
    pub a: Csr,
    /// Rows of the linearized mass functionals in full coordinates.
    pub mass_rows: Vec<Vec<f64>>,
    /// Number of algebraic (constraint) rows of the pencil.
    pub n_constraint_rows: usize,
}

/// Reduced dense pencil of one Neumann mode.
#[derive(Clone, Debug)]
pub struct ModeBlock {
    pub mode: usize,
    pub xi2: f64,
    pub a_sigma: f64,
    pub k: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// `Pᵀẽ`, so that `[[w]] = ẽ_redᵀ q`.
    pub e_red: DVector<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EigenPair {
    pub re: f64,
    pub im: f64,
    /// Index of the Neumann mode carrying this eigenvalue.
    pub mode: usize,
    /// Backward error `‖(λE + A)x‖ / ((|λ|‖E‖ + ‖A‖)‖x‖)` on the full pencil.
    pub residual: f64,
    pub identity_residual: f64,
    #[serde(skip)]
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumResult {
    pub pairs: Vec<EigenPair>,
    /// Every eigenvalue of the pencil, sorted by decreasing real part.
    pub all: Vec<(f64, f64)>,
    pub n_unstable: usize,
    pub n_zero: usize,
    pub tol_zero: f64,
    pub mass_constrained: bool,
    #[serde(skip)]
    pub kernel_basis: Vec<Vec<f64>>,
}

impl SpectrumResult {
    /// `max|Im λ| / max|λ|` over the `count` eigenvalues with largest real part.
    pub fn realness_defect(&self, count: usize) -> f64 {
        let lead = &self.all[..count.min(self.all.len())];
        let im = lead.iter().fold(0.0f64, |m, e| m.max(e.1.abs()));
        let mag = lead.iter().fold(0.0f64, |m, e| m.max(e.0.hypot(e.1)));
        im / mag
    }

    pub fn leading(&self) -> f64 {
        self.all[0].0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SemisimplicityReport {
    pub semisimple: bool,
    /// Smallest singular value of `ZᵀM₀Z` over the kernel basis `Z`, relative to `‖M₀‖`.
    pub defect: f64,
    pub kernel_dim: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityTerms {
    pub a_term: f64,
    pub b_term: f64,
    pub value: f64,
    pub residual: f64,
}

fn sample_phase(eq: &FlatEquilibrium, grid: &Grid, phase: usize) -> Result<PhaseCoefficients> {
    let y = grid.y_phase(phase).to_vec();
    let dy = grid.dy_phase(phase);
    let mut p = Vec::new();
    let mut rho = Vec::new();
    let mut drho = Vec::new();
    for &yy in &y {
        let (pp, rr, dr) = eq.state_shifted(phase, yy)?;
        p.push(pp);
        rho.push(rr);
        drho.push(dr);
    }
    let m: Vec<f64> = p.iter().zip(&drho).map(|(p, d)| p * d).collect();
    let n: Vec<f64> = m.iter().zip(p.iter().zip(&rho)).map(|(m, (p, r))| m * p / r).collect();
    let omega = grid.omega(phase);
    let r: Vec<f64> = rho.iter().zip(&p).map(|(r, p)| r / p).collect();
    let mut p_mid = Vec::new();
    let mut beta = Vec::new();
    for j in 0..y.len() - 1 {
        p_mid.push(eq.state_shifted(phase, 0.5 * (y[j] + y[j + 1]))?.0);
        let h = y[j + 1] - y[j];
        beta.push(-2.0 * (r[j + 1] - r[j]) / (h * (r[j] + r[j + 1])));
    }
    Ok(PhaseCoefficients {
        y,
        p,
        rho,
        drho,
        m,
        n,
        omega,
        p_mid,
        beta,
        k: eq.system.spec(phase).k,
        dy,
    })
}

impl DiscreteLinearization {
    /// Assembles the pencil on `grid`, which must be built on `eq.shifted_geometry()`.
    pub fn assemble(eq: &FlatEquilibrium, grid: &Grid, sigma: f64) -> Result<Self> {
        let sg = eq.shifted_geometry();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        if sg.cross_section != grid.geom.cross_section
            || !close(sg.h_lower, grid.geom.h_lower)
            || !close(sg.h_upper, grid.geom.h_upper)
        {
            return Err(Error::Config(
                "grid geometry does not match the equilibrium's shifted reference domain".into(),
            ));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma={sigma} must be positive")));
        }
        let c1 = sample_phase(eq, grid, 1)?;
        let c2 = sample_phase(eq, grid, 2)?;
        let nb = c1.y.len();
        let na = c2.y.len();
        let n1d = nb + na;
        let mut k_y = DMatrix::zeros(n1d, n1d);
        let mut d_y = vec![0.0; n1d];
        let mut w_y = vec![0.0; n1d];
        for (off, c) in [(0usize, &c1), (nb, &c2)] {
            for j in 0..c.y.len() {
                d_y[off + j] = c.omega[j] * c.n[j];
                w_y[off + j] = c.omega[j] * c.k * c.p[j] * c.p[j];
            }
            for cell in 0..c.y.len() - 1 {
                let kp = c.k * c.p_mid[cell];
                let g0 = kp * (-1.0 / c.dy + 0.5 * c.beta[cell]);
                let g1 = kp * (1.0 / c.dy + 0.5 * c.beta[cell]);
                let s = c.dy / c.k;
                let (i0, i1) = (off + cell, off + cell + 1);
                k_y[(i0, i0)] += s * g0 * g0;
                k_y[(i0, i1)] += s * g0 * g1;
                k_y[(i1, i0)] += s * g1 * g0;
                k_y[(i1, i1)] += s * g1 * g1;
            }
        }
        let rho_minus = c1.rho[nb - 1];
        let rho_plus = c2.rho[0];
        let jump_rho = rho_plus - rho_minus;
        let tm = nb - 1;
        let tp = nb;
        let merge = match eq.case {
            Case::I => DMatrix::identity(n1d, n1d),
            Case::II => {
                let mut p = DMatrix::zeros(n1d, n1d - 1);
                for c in 0..n1d {
                    if c < tm {
                        p[(c, c)] = 1.0;
                    } else if c == tm {
                        p[(c, tm)] = rho_minus;
                    } else if c == tp {
                        p[(c, tm)] = rho_plus;
                    } else {
                        p[(c, c - 1)] = 1.0;
                    }
                }
                p
            }
        };
        let k_x = grid.stiffness_x();
        let modes = grid.g_modes();
        let mut lin = DiscreteLinearization {
            case: eq.case,
            grid: grid.clone(),
            sigma,
            gamma: eq.gamma(),
            p_b: eq.p_b,
            rho_minus,
            rho_plus,
            jump_rho,
            coeffs: [c1, c2],
            k_y,
            d_y,
            w_y,
            merge,
            k_x,
            modes,
            e: Csr::from_triplets(0, 0, &[]),
            a: Csr::from_triplets(0, 0, &[]),
            mass_rows: Vec::new(),
            n_constraint_rows: 0,
        };
        lin.assemble_full();
        Ok(lin)
    }

    fn col_phase(&self, col: usize) -> (usize, usize) {
        let nb = self.coeffs[0].y.len();
        if col < nb {
            (1, col)
        } else {
            (2, col - nb)
        }
    }

    pub fn n1d(&self) -> usize {
        self.d_y.len()
    }

    fn trace_cols(&self) -> (usize, usize) {
        let nb = self.coeffs[0].y.len();
        (nb - 1, nb)
    }

    /// `a_l`, the eigenvalue of `A_Σ` on a G-mode with discrete eigenvalue `ξ²`.
    pub fn a_sigma(&self, xi2: f64) -> f64 {
        (self.sigma * xi2 - self.gamma * self.jump_rho) / self.p_b
    }

    fn assemble_full(&mut self) {
        let grid = self.grid.clone();
        let grid = &grid;
        let nb0 = self.coeffs[0].y.len();
        let col_phase = move |col: usize| if col < nb0 { (1usize, col) } else { (2usize, col - nb0) };
        let ng = grid.n_g();
        let n = grid.n_unknowns();
        let n1d = self.n1d();
        let theta = &grid.theta;
        let gidx = |col: usize, ig: usize| {
            let (ph, j) = col_phase(col);
            grid.w_index(ph, ig, j)
        };
        // Raw variational rows indexed by (col, ig).
        let mut raw_a: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut raw_e: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for col in 0..n1d {
            for ig in 0..ng {
                let row = gidx(col, ig);
                for col2 in 0..n1d {
                    let v = self.k_y[(col, col2)];
                    if v != 0.0 {
                        raw_a[row].push((gidx(col2, ig), theta[ig] * v));
                    }
                }
                for k in self.k_x.row_ptr[ig]..self.k_x.row_ptr[ig + 1] {
                    let ig2 = self.k_x.col_idx[k];
                    raw_a[row].push((gidx(col, ig2), self.k_x.values[k] * self.w_y[col]));
                }
                raw_e[row].push((row, theta[ig] * self.d_y[col]));
            }
        }
        let (tm, tp) = self.trace_cols();
        let mut ta = Vec::new();
        let mut te = Vec::new();
        let mut constraint_rows = 0;
        for col in 0..n1d {
            for ig in 0..ng {
                let row = gidx(col, ig);
                let is_trace = col == tm || col == tp;
                if !is_trace {
                    ta.extend(raw_a[row].iter().map(|&(c, v)| (row, c, v)));
                    te.extend(raw_e[row].iter().map(|&(c, v)| (row, c, v)));
                }
            }
        }
        for ig in 0..ng {
            let rm = gidx(tm, ig);
            let rp = gidx(tp, ig);
            let hi = grid.h_index(ig);
            match self.case {
                Case::I => {
                    for (row, sign) in [(rm, 1.0), (rp, -1.0)] {
                        ta.extend(raw_a[row].iter().map(|&(c, v)| (row, c, v)));
                        te.extend(raw_e[row].iter().map(|&(c, v)| (row, c, v)));
                        te.push((row, hi, sign * theta[ig] * self.p_b));
                    }
                }
                Case::II => {
                    for (src, wgt) in [(rm, self.rho_minus), (rp, self.rho_plus)] {
                        ta.extend(raw_a[src].iter().map(|&(c, v)| (rm, c, wgt * v)));
                        te.extend(raw_e[src].iter().map(|&(c, v)| (rm, c, wgt * v)));
                    }
                    te.push((rm, hi, -theta[ig] * self.p_b * self.jump_rho));
                    // [[w/ρ*]] = 0.
                    ta.push((rp, rp, theta[ig] / self.rho_plus));
                    ta.push((rp, rm, -theta[ig] / self.rho_minus));
                    constraint_rows += 1;
                }
            }
            // Laplace–Young: [[w]] + A_Σ h = 0, tested with θ.
            ta.push((hi, rp, theta[ig]));
            ta.push((hi, rm, -theta[ig]));
            ta.push((hi, hi, -theta[ig] * self.gamma * self.jump_rho / self.p_b));
            for k in self.k_x.row_ptr[ig]..self.k_x.row_ptr[ig + 1] {
                ta.push((hi, grid.h_index(self.k_x.col_idx[k]), self.sigma / self.p_b * self.k_x.values[k]));
            }
            constraint_rows += 1;
        }
        self.a = Csr::from_triplets(n, n, &ta);
        self.e = Csr::from_triplets(n, n, &te);
        self.n_constraint_rows = constraint_rows;

        // Linearized masses: ∫_{Ω₁} m*w + ρ*(0−)∫h and ∫_{Ω₂} m*w − ρ*(0+)∫h.
        let mut rows = vec![vec![0.0; n], vec![0.0; n]];
        for col in 0..n1d {
            let (ph, j) = self.col_phase(col);
            let c = &self.coeffs[ph - 1];
            for ig in 0..ng {
                rows[ph - 1][gidx(col, ig)] = theta[ig] * c.omega[j] * c.m[j];
            }
        }
        for ig in 0..ng {
            rows[0][grid.h_index(ig)] = theta[ig] * self.rho_minus;
            rows[1][grid.h_index(ig)] = -theta[ig] * self.rho_plus;
        }
        self.mass_rows = match self.case {
            Case::I => rows,
            Case::II => vec![rows[0].iter().zip(&rows[1]).map(|(a, b)| a + b).collect()],
        };
    }

    /// Dense reduced pencil of G-mode `l`.
    pub fn mode_block(&self, l: usize) -> Result<ModeBlock> {
        let xi2 = self.modes[l].xi2;
        let a = self.a_sigma(xi2);
        let scale = (self.sigma * xi2).abs().max((self.gamma * self.jump_rho).abs()) / self.p_b;
        if a.abs() <= THRESHOLD_RTOL * scale {
            return Err(Error::DegenerateThreshold(format!(
                "A_Sigma is singular on mode {:?}: mu* lies in the Neumann spectrum",
                self.modes[l].index
            )));
        }
        let p = &self.merge;
        let kfull = &self.k_y + DMatrix::from_diagonal(&DVector::from_vec(self.w_y.clone())) * xi2;
        let k = p.transpose() * kfull * p;
        let d = p.transpose() * DMatrix::from_diagonal(&DVector::from_vec(self.d_y.clone())) * p;
        let (tm, tp) = self.trace_cols();
        let mut e = DVector::zeros(self.n1d());
        e[tp] = 1.0;
        e[tm] = -1.0;
        let e_red = p.transpose() * e;
        let m = d + (&e_red * e_red.transpose()) * (self.p_b / a);
        Ok(ModeBlock {
            mode: l,
            xi2,
            a_sigma: a,
            k,
            m,
            e_red,
        })
    }

    /// Mass-constraint rows restricted to mode 0 in reduced coordinates.
    ///
    /// They coincide with `x₀ᵀM₀` for the kernel vectors `x₀`, see the unit tests.
    pub fn mode0_constraints(&self, block: &ModeBlock) -> Vec<DVector<f64>> {
        let n1d = self.n1d();
        let mut rows = Vec::new();
        let mut per_phase = [DVector::zeros(n1d), DVector::zeros(n1d)];
        for col in 0..n1d {
            let (ph, j) = self.col_phase(col);
            let c = &self.coeffs[ph - 1];
            per_phase[ph - 1][col] = c.omega[j] * c.m[j];
        }
        // η = −ẽᵀq/a₀ on mode 0.
        let eta = -&block.e_red / block.a_sigma;
        let r1 = self.merge.transpose() * &per_phase[0] + &eta * self.rho_minus;
        let r2 = self.merge.transpose() * &per_phase[1] - &eta * self.rho_plus;
        match self.case {
            Case::I => {
                rows.push(r1);
                rows.push(r2);
            }
            Case::II => rows.push(r1 + r2),
        }
        rows
    }

    /// Lifts a reduced mode vector `q` to full coordinates `(w, h)`.
    pub fn lift(&self, block: &ModeBlock, q: &DVector<f64>) -> Vec<f64> {
        let u = &self.merge * q;
        let eta = -block.e_red.dot(q) / block.a_sigma;
        let phi = &self.modes[block.mode].values;
        let grid = &self.grid;
        let mut x = vec![0.0; grid.n_unknowns()];
        for col in 0..self.n1d() {
            let (ph, j) = self.col_phase(col);
            for ig in 0..grid.n_g() {
                x[grid.w_index(ph, ig, j)] = phi[ig] * u[col];
            }
        }
        for ig in 0..grid.n_g() {
            x[grid.h_index(ig)] = phi[ig] * eta;
        }
        x
    }

    /// Eigenvalues of `λ M u = −K u`, optionally restricted to `null(C)` (mode 0 only).
    fn block_eigen(&self, block: &ModeBlock, constrained: bool) -> Result<(Vec<Complex<f64>>, Option<DMatrix<f64>>)> {
        let (k, m, z) = if constrained && block.mode == 0 {
            let rows = self.mode0_constraints(block);
            let z = null_space_of_rows(&rows, block.k.nrows());
            (z.transpose() * &block.k * &z, z.transpose() * &block.m * &z, Some(z))
        } else {
            (block.k.clone(), block.m.clone(), None)
        };
        let lu = m.clone().lu();
        let mk = lu
            .solve(&k)
            .ok_or_else(|| Error::EigSolveFailure(format!("singular mass block on mode {}", block.mode)))?;
        let ev = (-mk).complex_eigenvalues();
        if ev.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::EigSolveFailure(format!("non-finite eigenvalue on mode {}", block.mode)));
        }
        Ok((ev.iter().copied().collect(), z))
    }

    /// Null vector of `K + λM` (restricted to `z` when given), refined by a Rayleigh quotient.
    fn block_vector(&self, block: &ModeBlock, lambda: f64, z: Option<&DMatrix<f64>>) -> (f64, DVector<f64>) {
        let (k, m) = match z {
            Some(z) => (z.transpose() * &block.k * z, z.transpose() * &block.m * z),
            None => (block.k.clone(), block.m.clone()),
        };
        let mut lam = lambda;
        let mut v = DVector::zeros(k.nrows());
        for _ in 0..3 {
            let s = (&k + &m * lam).svd(false, true);
            let vt = s.v_t.unwrap();
            let (imin, _) = s
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &sv)| if sv < acc.1 { (i, sv) } else { acc });
            v = vt.row(imin).transpose();
            let den = v.dot(&(&m * &v));
            if den != 0.0 {
                lam = -v.dot(&(&k * &v)) / den;
            }
        }
        let q = match z {
            Some(z) => z * v,
            None => v,
        };
        (lam, q)
    }

    /// Full spectrum: every eigenvalue of every mode block, and eigenpairs for the `count`
    /// eigenvalues closest to `shift`.
    pub fn spectrum(&self, count: usize, shift: f64, mass_constrained: bool) -> Result<SpectrumResult> {
        let mut all: Vec<(f64, f64, usize)> = Vec::new();
        let mut blocks = Vec::new();
        let mut zs = Vec::new();
        for l in 0..self.modes.len() {
            let b = self.mode_block(l)?;
            let (ev, z) = self.block_eigen(&b, mass_constrained)?;
            for c in ev {
                all.push((c.re, c.im, l));
            }
            blocks.push(b);
            zs.push(z);
        }
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
        let scale = all.iter().fold(0.0f64, |m, e| m.max(e.0.hypot(e.1)));
        let tol_zero = 1e-8 * scale;
        let n_unstable = all.iter().filter(|e| e.0 > tol_zero).count();
        let n_zero = all.iter().filter(|e| e.0.hypot(e.1) <= tol_zero).count();

        let mut order: Vec<usize> = (0..all.len()).collect();
        order.sort_by(|&i, &j| {
            let di = (all[i].0 - shift).hypot(all[i].1);
            let dj = (all[j].0 - shift).hypot(all[j].1);
            di.partial_cmp(&dj).unwrap().then(i.cmp(&j))
        });
        let e_norm = self.e.norm_inf();
        let a_norm = self.a.norm_inf();
        let mut pairs = Vec::new();
        for &i in order.iter().take(count) {
            let (re, im, l) = all[i];
            let (lam, q) = self.block_vector(&blocks[l], re, zs[l].as_ref());
            let x = self.lift(&blocks[l], &q);
            let ex = self.e.matvec(&x);
            let ax = self.a.matvec(&x);
            let r: Vec<f64> = ex.iter().zip(&ax).map(|(e, a)| lam * e + a).collect();
            let residual = norm2(&r) / ((lam.abs() * e_norm + a_norm) * norm2(&x));
            let id = self.eigenvalue_identity(lam, &x);
            pairs.push(EigenPair {
                re: lam,
                im,
                mode: l,
                residual,
                identity_residual: id.residual,
                vector: x,
            });
        }
        let kernel_basis = if mass_constrained {
            Vec::new()
        } else {
            let b0 = &blocks[0];
            kernel_of_block(b0)
                .iter()
                .map(|q| self.lift(b0, q))
                .collect()
        };
        Ok(SpectrumResult {
            pairs,
            all: all.iter().map(|e| (e.0, e.1)).collect(),
            n_unstable,
            n_zero,
            tol_zero,
            mass_constrained,
            kernel_basis,
        })
    }

    /// Number of eigenvalues of `−L` with positive real part beyond `tol_zero`.
    pub fn unstable_count(&self) -> Result<usize> {
        Ok(self.spectrum(0, 0.0, false)?.n_unstable)
    }

    /// Largest real eigenvalue under mass conservation.
    pub fn leading_constrained_eigenvalue(&self) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for l in 0..self.modes.len() {
            let b = self.mode_block(l)?;
            let (ev, _) = self.block_eigen(&b, true)?;
            for c in ev {
                best = best.max(c.re);
            }
        }
        Ok(best)
    }

    /// Eigenvalues of the Neumann-mode block `l`, unsorted.
    pub fn mode_eigenvalues(&self, l: usize, mass_constrained: bool) -> Result<Vec<Complex<f64>>> {
        let b = self.mode_block(l)?;
        Ok(self.block_eigen(&b, mass_constrained)?.0)
    }

    /// Quadrature of both sides of the eigenvalue identity for `(λ, x)`.
    pub fn eigenvalue_identity(&self, lambda: f64, x: &[f64]) -> IdentityTerms {
        let grid = &self.grid;
        let ng = grid.n_g();
        let n1d = self.n1d();
        let theta = &grid.theta;
        let mut mass = 0.0;
        let mut b = 0.0;
        let mut cols = vec![vec![0.0; n1d]; ng];
        for col in 0..n1d {
            let (ph, j) = self.col_phase(col);
            for ig in 0..ng {
                cols[ig][col] = x[grid.w_index(ph, ig, j)];
            }
        }
        for ig in 0..ng {
            let u = DVector::from_vec(cols[ig].clone());
            for col in 0..n1d {
                mass += theta[ig] * self.d_y[col] * u[col] * u[col];
            }
            b += theta[ig] * u.dot(&(&self.k_y * &u));
        }
        // ∫ k p*² |∇_x w|² through K_x ⊗ W_y.
        for col in 0..n1d {
            let w: Vec<f64> = (0..ng).map(|ig| cols[ig][col]).collect();
            let kw = self.k_x.matvec(&w);
            b += self.w_y[col] * w.iter().zip(&kw).map(|(a, c)| a * c).sum::<f64>();
        }
        let h: Vec<f64> = (0..ng).map(|ig| x[grid.h_index(ig)]).collect();
        let kh = self.k_x.matvec(&h);
        let surface = self.sigma * h.iter().zip(&kh).map(|(a, c)| a * c).sum::<f64>()
            - self.gamma * self.jump_rho * h.iter().zip(theta).map(|(a, t)| t * a * a).sum::<f64>();
        let a_term = mass + surface;
        let value = lambda * a_term + b;
        let residual = value.abs() / (lambda.abs() * a_term.abs() + b).max(f64::MIN_POSITIVE);
        IdentityTerms {
            a_term,
            b_term: b,
            value,
            residual,
        }
    }

    /// Checks that 0 has no generalized eigenvectors: with `Z` spanning `null(K₀)`, the chain
    /// equation `K₀u₁ = −M₀x₀` is solvable for some `x₀ ∈ span Z` iff `ZᵀM₀Z` is singular.
    pub fn semisimplicity_check(&self, rho_bottom: f64, rho_top: f64) -> Result<SemisimplicityReport> {
        for l in 0..self.modes.len() {
            self.mode_block(l)?;
        }
        if self.case == Case::II && (rho_bottom - rho_top).abs() <= 1e-9 * rho_bottom.abs().max(rho_top.abs()) {
            return Err(Error::DegenerateThreshold(
                "semi-simplicity needs rho*(-h_lower) != rho*(h_upper) in case ii".into(),
            ));
        }
        let b0 = self.mode_block(0)?;
        let ker = kernel_of_block(&b0);
        let kdim = ker.len();
        let mut z = DMatrix::zeros(b0.k.nrows(), kdim);
        for (c, v) in ker.iter().enumerate() {
            z.set_column(c, v);
        }
        let q = z.transpose() * &b0.m * &z;
        let smin = q.singular_values().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let scale = b0.m.norm();
        let defect = smin / scale;
        Ok(SemisimplicityReport {
            semisimple: defect > 1e-6,
            defect,
            kernel_dim: kdim,
        })
    }

    /// Dense Schur complement of the pencil after eliminating the algebraic rows.
    ///
    /// Returns `(K_red, M_red)` on the dynamic unknowns; intended for small grids.
    pub fn schur_reduced_dense(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.grid.n_unknowns();
        let a = csr_dense(&self.a);
        let e = csr_dense(&self.e);
        let alg: Vec<usize> = (0..n).filter(|&r| self.e.row_is_zero(r)).collect();
        let dynm: Vec<usize> = (0..n).filter(|&r| !self.e.row_is_zero(r)).collect();
        // Algebraic unknowns: h, plus w⁺ in case (ii).
        let alg_cols: Vec<usize> = match self.case {
            Case::I => (0..self.grid.n_g()).map(|ig| self.grid.h_index(ig)).collect(),
            Case::II => {
                let (_, tp) = self.trace_cols();
                let mut v: Vec<usize> = (0..self.grid.n_g())
                    .map(|ig| {
                        let (ph, j) = self.col_phase(tp);
                        self.grid.w_index(ph, ig, j)
                    })
                    .collect();
                v.extend((0..self.grid.n_g()).map(|ig| self.grid.h_index(ig)));
                v
            }
        };
        let dyn_cols: Vec<usize> = (0..n).filter(|c| !alg_cols.contains(c)).collect();
        let sub = |m: &DMatrix<f64>, r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |i, j| m[(r[i], c[j])]);
        // Constraint rows: A_ad x_d + A_aa x_a = 0  ⇒  x_a = S x_d.
        let aad = sub(&a, &alg, &dyn_cols);
        let aaa = sub(&a, &alg, &alg_cols);
        let s = -aaa.lu().solve(&aad).expect("constraint block invertible");
        let add = sub(&a, &dynm, &dyn_cols);
        let ada = sub(&a, &dynm, &alg_cols);
        let edd = sub(&e, &dynm, &dyn_cols);
        let eda = sub(&e, &dynm, &alg_cols);
        let mut k = add + ada * &s;
        let mut m = edd + eda * &s;
        if self.case == Case::II {
            // Use s = w⁻/ρ*(0−) as the trace unknown so the reduction is a congruence.
            let (tm, _) = self.trace_cols();
            let (ph, j) = self.col_phase(tm);
            for ig in 0..self.grid.n_g() {
                let gi = self.grid.w_index(ph, ig, j);
                let c = dyn_cols.iter().position(|&x| x == gi).unwrap();
                k.column_mut(c).scale_mut(self.rho_minus);
                m.column_mut(c).scale_mut(self.rho_minus);
            }
        }
        (k, m)
    }
}

fn csr_dense(m: &Csr) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows, m.ncols);
    for (r, c, v) in m.triplets() {
        d[(r, c)] += v;
    }
    d
}

/// Orthonormal basis of the common null space of `rows` in `R^n`.
fn null_space_of_rows(rows: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n, rows.len());
    for (j, r) in rows.iter().enumerate() {
        c.set_column(j, r);
    }
    // Householder QR of the constraint columns; trailing Q columns span the complement.
    let qr = c.qr();
    let mut q_full = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut q_full);
    let q_full = q_full.transpose();
    q_full.columns(rows.len(), n - rows.len()).into_owned()
}

/// Orthonormal kernel basis of a mode block's `K` (positive semi-definite).
fn kernel_of_block(b: &ModeBlock) -> Vec<DVector<f64>> {
    let eig = b.k.clone().symmetric_eigen();
    let kmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::new();
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v.abs() <= 1e-10 * kmax {
            out.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eos::FreeEnergySpec;
    use crate::equilibria::TwoPhaseSystem;
    use crate::geometry::{CapillaryGeometry, Resolution};

    fn gas(r: f64, k: f64) -> FreeEnergySpec {
        FreeEnergySpec::ideal_gas(r, 1e-8, 1e8, k)
    }

    pub(crate) fn rt_equilibrium(case: Case) -> FlatEquilibrium {
        // Heavier phase (Rθ small ⇒ denser at equal pressure) on top.
        let sys = TwoPhaseSystem {
            lower: gas(2.0, 1.0),
            upper: gas(1.0, 0.7),
            gamma: 1.0,
            geom: CapillaryGeometry::interval(1.0, 1.0, 1.0),
        };
        match case {
            Case::I => sys.solve_flat_equilibrium_i([0.45, 1.0], None).unwrap(),
            Case::II => sys.solve_flat_equilibrium_ii(1.5, None).unwrap(),
        }
    }

    fn lin(eq: &FlatEquilibrium, n: usize, sigma: f64) -> DiscreteLinearization {
        let grid = Grid::build(
            &eq.shifted_geometry(),
            Resolution { nx: n, ny_cross: n, n_below: n, n_above: n },
        )
        .unwrap();
        DiscreteLinearization::assemble(eq, &grid, sigma).unwrap()
    }

    #[test]
    fn dimension_audit() {
        for case in [Case::I, Case::II] {
            let eq = rt_equilibrium(case);
            let l = lin(&eq, 6, 0.1);
            let n = l.grid.n_unknowns();
            let dynamic = (0..n).filter(|&r| !l.e.row_is_zero(r)).count();
            assert_eq!(dynamic + l.n_constraint_rows, n);
            // E vanishes exactly on the algebraic rows and is nonnegative on its diagonal.
            for r in 0..n {
                assert!(l.e.get(r, r) >= 0.0);
            }
        }
    }

    #[test]
    fn kernel_vector_annihilated_case_ii() {
        let eq = rt_equilibrium(Case::II);
        let l = lin(&eq, 8, 0.1);
        let grid = &l.grid;
        let alpha = 0.37;
        let mut x = vec![0.0; grid.n_unknowns()];
        for ph in [1, 2] {
            let c = &l.coeffs[ph - 1];
            for ig in 0..grid.n_g() {
                for j in 0..c.y.len() {
                    x[grid.w_index(ph, ig, j)] = alpha * c.rho[j] / c.p[j];
                }
            }
        }
        // γ[[ρ]]h̄ = [[αρ*]]/p_b in the scaled interface law.
        let hbar = alpha / l.gamma;
        for ig in 0..grid.n_g() {
            x[grid.h_index(ig)] = hbar;
        }
        let r = l.a.matvec(&x);
        let rel = r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / l.a.norm_inf();
        assert!(rel < 1e-8, "kernel residual {rel}");
    }

    #[test]
    fn gravity_free_equal_phases_give_heat_operator() {
        let sys = TwoPhaseSystem {
            lower: gas(1.0, 0.8),
            upper: gas(1.0, 0.8),
            gamma: 0.0,
            geom: CapillaryGeometry::interval(1.0, 1.0, 1.0),
        };
        let eq = sys.solve_flat_equilibrium_i([2.0, 2.0], None).unwrap();
        let l = lin(&eq, 8, 1.0);
        let grid = &l.grid;
        let (p, rho, k) = (eq.p_b, eq.rho_minus, 0.8);
        let (dx, dy) = (grid.dx, grid.dy_below);
        // Interior node: row / (θω p/ρ) is the 5-point stencil of −kpρΔ.
        let (ig, j) = (3, 4);
        let row = grid.w_index(1, ig, j);
        let wt = grid.theta[ig] * dy * p / rho;
        let center = l.a.get(row, row) / wt;
        let east = l.a.get(row, grid.w_index(1, ig + 1, j)) / wt;
        let north = l.a.get(row, grid.w_index(1, ig, j + 1)) / wt;
        let c = k * p * rho;
        assert!((center - c * (2.0 / (dx * dx) + 2.0 / (dy * dy))).abs() < 1e-10 * center);
        assert!((east + c / (dx * dx)).abs() < 1e-10 * c / (dx * dx));
        assert!((north + c / (dy * dy)).abs() < 1e-10 * c / (dy * dy));
    }

    #[test]
    fn schur_reduced_pencil_is_symmetric() {
        for case in [Case::I, Case::II] {
            let eq = rt_equilibrium(case);
            let l = lin(&eq, 6, 0.1);
            let (k, m) = l.schur_reduced_dense();
            let ka = (&k - k.transpose()).norm() / k.norm();
            let ma = (&m - m.transpose()).norm() / m.norm();
            assert!(ka < 1e-10 && ma < 1e-10, "case {case:?}: {ka} {ma}");
        }
    }

    #[test]
    fn mass_rows_are_kernel_times_mass() {
        for case in [Case::I, Case::II] {
            let eq = rt_equilibrium(case);
            let l = lin(&eq, 6, 0.1);
            let b0 = l.mode_block(0).unwrap();
            let rows = l.mode0_constraints(&b0);
            let ker = kernel_of_block(&b0);
            assert_eq!(ker.len(), rows.len());
            // span{x₀ᵀM} must equal span{C rows}.
            for x0 in &ker {
                let v = &b0.m * x0;
                let mut c = DMatrix::zeros(v.len(), rows.len());
                for (j, r) in rows.iter().enumerate() {
                    c.set_column(j, r);
                }
                let coef = c.clone().svd(true, true).solve(&v, 1e-14).unwrap();
                let res = (&c * coef - &v).norm() / v.norm();
                assert!(res < 1e-8, "case {case:?} residual {res}");
            }
        }
    }

    #[test]
    fn kernel_dimensions() {
        for (case, dim) in [(Case::I, 2), (Case::II, 1)] {
            let eq = rt_equilibrium(case);
            let l = lin(&eq, 8, 0.1);
            let s = l.spectrum(4, 0.0, false).unwrap();
            assert_eq!(s.n_zero, dim, "case {case:?}");
            let sc = l.spectrum(4, 0.0, true).unwrap();
            assert_eq!(sc.n_zero, 0);
        }
    }

    #[test]
    fn kernel_matches_analytic_form() {
        let eq = rt_equilibrium(Case::II);
        let l = lin(&eq, 8, 0.1);
        let s = l.spectrum(1, 0.0, false).unwrap();
        assert_eq!(s.kernel_basis.len(), 1);
        let x = &s.kernel_basis[0];
        let grid = &l.grid;
        // Ratio w p*/ρ* must be the same constant α everywhere; h equals α/γ.
        let c = &l.coeffs[0];
        let alpha = x[grid.w_index(1, 0, 0)] * c.p[0] / c.rho[0];
        for ph in [1, 2] {
            let c = &l.coeffs[ph - 1];
            for ig in 0..grid.n_g() {
                for j in 0..c.y.len() {
                    let a = x[grid.w_index(ph, ig, j)] * c.p[j] / c.rho[j];
                    assert!((a - alpha).abs() < 1e-6 * alpha.abs());
                }
            }
        }
        let h = x[grid.h_index(0)];
        assert!((h - alpha / l.gamma).abs() < 1e-6 * h.abs());
    }

    #[test]
    fn spectrum_pairs_have_small_residuals() {
        for case in [Case::I, Case::II] {
            let eq = rt_equilibrium(case);
            let l = lin(&eq, 8, 0.02);
            let s = l.spectrum(10, 0.0, true).unwrap();
            for p in &s.pairs {
                assert!(p.residual < 1e-8, "residual {} at {}", p.residual, p.re);
                assert!(p.identity_residual < 1e-6);
            }
            assert!(s.realness_defect(20) < 1e-8);
        }
    }

    #[test]
    fn unstable_pairs_have_negative_a_term() {
        let eq = rt_equilibrium(Case::I);
        let l = lin(&eq, 8, 0.02);
        let s = l.spectrum(1, 100.0, true).unwrap();
        let p = &s.pairs[0];
        assert!(p.re > 0.0);
        let id = l.eigenvalue_identity(p.re, &p.vector);
        assert!(id.a_term < 0.0 && id.b_term >= 0.0);
    }

    #[test]
    fn zero_pairs_have_vanishing_dissipation() {
        let eq = rt_equilibrium(Case::I);
        let l = lin(&eq, 8, 0.1);
        let s = l.spectrum(1, 0.0, false).unwrap();
        for x in &s.kernel_basis {
            let id = l.eigenvalue_identity(0.0, x);
            let nrm = norm2(x);
            assert!(id.b_term < 1e-10 * nrm * nrm * l.a.norm_inf());
        }
    }

    #[test]
    fn semisimple_in_both_cases() {
        for case in [Case::I, Case::II] {
            let eq = rt_equilibrium(case);
            let l = lin(&eq, 8, 0.1);
            let r = l.semisimplicity_check(eq.rho_bottom, eq.rho_top).unwrap();
            assert!(r.semisimple, "case {case:?} defect {}", r.defect);
        }
    }

    /// `κ tanh(κH)` continued to `κ² < 0`.
    fn g_hat(kappa2: f64, h: f64) -> f64 {
        if kappa2 >= 0.0 {
            let k = kappa2.sqrt();
            k * (k * h).tanh()
        } else {
            let s = (-kappa2).sqrt();
            -s * (s * h).tan()
        }
    }

    fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        assert!(flo * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) * flo > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn gravity_free_dispersion_case_i() {
        let sys = TwoPhaseSystem {
            lower: gas(2.0, 1.0),
            upper: gas(1.0, 0.7),
            gamma: 0.0,
            geom: CapillaryGeometry::interval(1.0, 1.0, 1.0),
        };
        let eq = sys.solve_flat_equilibrium_i([0.45, 1.0], None).unwrap();
        let sigma = 0.3;
        let l = lin(&eq, 48, sigma);
        let (p, h1, h2) = (eq.p_b, eq.shifted_geometry().h_lower, eq.shifted_geometry().h_upper);
        let (k1, k2) = (1.0, 0.7);
        for n in 1..=2 {
            let xi2 = (n as f64 * std::f64::consts::PI).powi(2);
            // Ideal gas: m/(kpρ) = 1/(kp).
            let f = |lam: f64| {
                let g1 = g_hat(xi2 + lam / (k1 * p), h1);
                let g2 = g_hat(xi2 + lam / (k2 * p), h2);
                lam * (1.0 / (k1 * g1) + 1.0 / (k2 * g2)) + sigma * xi2
            };
            let pole = (-xi2 * k1 * p).max(-xi2 * k2 * p);
            let exact = bisect_root(f, pole * (1.0 - 1e-12), 0.0);
            let b = l.mode_block(n).unwrap();
            let (ev, _) = l.block_eigen(&b, false).unwrap();
            let lead = ev.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
            let rel = (lead - exact).abs() / exact.abs();
            assert!(rel < 2e-3, "mode {n}: {lead} vs {exact} rel {rel}");
        }
    }

    #[test]
    fn leading_eigenvalue_converges_second_order() {
        let eq = rt_equilibrium(Case::I);
        let lead = |n: usize| lin(&eq, n, 0.1).leading_constrained_eigenvalue().unwrap();
        let (a, b, c) = (lead(16), lead(32), lead(64));
        let ratio = (a - b) / (b - c);
        assert!((3.5..=4.5).contains(&ratio), "{a} {b} {c} ratio {ratio}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn spectrum_is_real_for_any_surface_tension(log_sigma in -2.5f64..0.5, case_ii in proptest::bool::ANY) {
            let eq = rt_equilibrium(if case_ii { Case::II } else { Case::I });
            let sigma = 10f64.powf(log_sigma);
            // Skip σ within 1e-6 of a threshold γ[[ρ]]/(nπ)².
            let mu_star = eq.gamma() * eq.jump_rho / sigma;
            let n = (mu_star.sqrt() / std::f64::consts::PI).round().max(1.0);
            proptest::prop_assume!((mu_star / (n * std::f64::consts::PI).powi(2) - 1.0).abs() > 1e-6);
            let s = lin(&eq, 6, sigma).spectrum(20, 0.0, false).unwrap();
            proptest::prop_assert!(s.realness_defect(20) < 1e-8);
        }
    }

    #[test]
    fn rejects_mismatched_grid() {
        let eq = rt_equilibrium(Case::I);
        let grid = Grid::build(
            &CapillaryGeometry::interval(1.0, 1.0, 1.0),
            Resolution { nx: 4, ny_cross: 4, n_below: 4, n_above: 4 },
        )
        .unwrap();
        assert!(matches!(
            DiscreteLinearization::assemble(&eq, &grid, 0.1),
            Err(Error::Config(_))
        ));
    }
}
