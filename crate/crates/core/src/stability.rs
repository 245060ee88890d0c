//! Analytic stability classification, Morse index, the Neumann-to-Dirichlet family `T_λ`,
//! `B_λ = λT_λ + A_Σ` with its `λ → 0` limit, and the constrained second variation.
//!
//! Operators on the h-mesh are returned in the θ-orthonormal basis `Θ^{1/2}`, where the
//! discrete versions of `T_λ` and `A_Σ` are symmetric.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::equilibria::{Case, FlatEquilibrium};
use crate::error::{Error, Result};
use crate::geometry::{CapillaryGeometry, Grid};
use crate::linops::DiscreteLinearization;
use crate::numerics::{logspace, SparseLu};

/// Relative tolerance for `μ* ∈ σ(−Δ_N)`.
pub const DEGENERACY_RTOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Classification {
    NormallyStable,
    NormallyHyperbolic,
    Degenerate,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub case: Case,
    pub sigma: f64,
    pub mu_star: f64,
    pub mu1: f64,
    /// Neumann eigenvalues up to the first one above `max(μ*, μ₁)`, with multiplicities.
    pub mu_list: Vec<(f64, usize)>,
    pub side_condition: Option<f64>,
    pub sigma_star: f64,
    pub classification: Classification,
    pub morse_index: Option<usize>,
}

/// Neumann eigenvalues of `G` up to and including the first one exceeding `bound`.
fn neumann_up_to(geom: &CapillaryGeometry, bound: f64) -> Vec<(f64, usize)> {
    let mut count = 8;
    loop {
        let ev = geom.neumann_eigenvalues(count);
        if let Some(i) = ev.iter().position(|e| e.0 > bound) {
            return ev[..=i].to_vec();
        }
        count *= 2;
    }
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= DEGENERACY_RTOL * a.abs().max(b.abs())
}

fn side_is_degenerate(eq: &FlatEquilibrium) -> bool {
    (eq.rho_bottom - eq.rho_top).abs() <= DEGENERACY_RTOL * eq.rho_bottom.max(eq.rho_top)
}

pub fn classify(eq: &FlatEquilibrium, sigma: f64) -> Result<StabilityReport> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma={sigma} must be positive")));
    }
    if eq.case == Case::II && eq.jump_rho == 0.0 {
        return Err(Error::DegenerateEquilibrium("case ii requires [[rho*]] != 0".into()));
    }
    let geom = eq.system.geom;
    let mu_star = eq.gamma() * eq.jump_rho / sigma;
    let mu1 = geom.mu1();
    let mu_list = neumann_up_to(&geom, mu_star.max(mu1));
    let on_spectrum = mu_list.iter().any(|&(mu, _)| near(mu, mu_star) || (mu == 0.0 && mu_star.abs() <= DEGENERACY_RTOL * mu1));
    let side = (eq.case == Case::II).then(|| eq.side_condition());
    let side_degenerate = eq.case == Case::II && side_is_degenerate(eq);
    let classification = if on_spectrum || side_degenerate {
        Classification::Degenerate
    } else if mu_star < mu1 && side.map_or(true, |s| s > 0.0) {
        Classification::NormallyStable
    } else {
        Classification::NormallyHyperbolic
    };
    let morse_index = match classification {
        Classification::Degenerate => None,
        _ => Some(morse_from_list(&mu_list, mu_star, side)),
    };
    Ok(StabilityReport {
        case: eq.case,
        sigma,
        mu_star,
        mu1,
        mu_list,
        side_condition: side,
        sigma_star: eq.gamma() * eq.jump_rho / mu1,
        classification,
        morse_index,
    })
}

/// `m₁ = Σ_{0<μ_l<μ*} mult(μ_l)`; in case (ii) the zero mode adds one when the side
/// condition is negative, the sign at which the zero-mode block of `B₀` is negative.
fn morse_from_list(mu_list: &[(f64, usize)], mu_star: f64, side: Option<f64>) -> usize {
    let m1: usize = mu_list
        .iter()
        .filter(|&&(mu, _)| mu > 0.0 && mu < mu_star)
        .map(|&(_, m)| m)
        .sum();
    m1 + usize::from(side.map_or(false, |s| s < 0.0))
}

pub fn morse_index(eq: &FlatEquilibrium, sigma: f64) -> Result<usize> {
    let r = classify(eq, sigma)?;
    r.morse_index.ok_or_else(|| {
        Error::DegenerateThreshold(format!(
            "mu*={} lies in the Neumann spectrum or the case-ii side condition vanishes",
            r.mu_star
        ))
    })
}

/// Discrete `T_λ` on the h-mesh.
#[derive(Clone, Debug)]
pub struct NtDOperator {
    pub lambda: f64,
    pub case: Case,
    /// Symmetric representation `Θ^{1/2} T_λ Θ^{−1/2}`.
    pub matrix: DMatrix<f64>,
    /// `‖S − Sᵀ‖/‖S‖` before symmetrisation.
    pub asymmetry: f64,
    /// Worst relative defect of the energy identity over the probe directions.
    pub identity_residual: f64,
}

fn theta_sqrt(lin: &DiscreteLinearization) -> Vec<f64> {
    lin.grid.theta.iter().map(|t| t.sqrt()).collect()
}

/// Solves the λ-problem for every unit datum `g` on the h-mesh and records `[[w]]`.
pub fn assemble_ntd(lin: &DiscreteLinearization, lambda: f64) -> Result<NtDOperator> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda={lambda} must be positive")));
    }
    let grid = &lin.grid;
    let ng = grid.n_g();
    let nw = grid.n_bulk() + grid.n_traces();
    let mut trip = Vec::new();
    for (r, c, v) in lin.a.triplets() {
        if r < nw && c < nw {
            trip.push((r, c, v));
        }
    }
    for (r, c, v) in lin.e.triplets() {
        if r < nw && c < nw {
            trip.push((r, c, lambda * v));
        }
    }
    let lu = SparseLu::factor(nw, &trip)
        .ok_or_else(|| Error::Solve(format!("lambda-problem singular at lambda={lambda}")))?;
    let nb = grid.res.n_below;
    let wm = |ig: usize| grid.w_index(1, ig, nb);
    let wp = |ig: usize| grid.w_index(2, ig, 0);
    let rhs_for = |g: &[f64]| {
        let mut b = vec![0.0; nw];
        for ig in 0..ng {
            let t = grid.theta[ig] * g[ig] * lin.p_b;
            match lin.case {
                Case::I => {
                    b[wp(ig)] += t;
                    b[wm(ig)] -= t;
                }
                Case::II => b[wm(ig)] += lin.jump_rho * t,
            }
        }
        b
    };
    let rhs: Vec<Vec<f64>> = (0..ng)
        .map(|ig| {
            let mut g = vec![0.0; ng];
            g[ig] = 1.0;
            rhs_for(&g)
        })
        .collect();
    let sols = lu.solve_many(&rhs);
    let mut t = DMatrix::zeros(ng, ng);
    for (j, w) in sols.iter().enumerate() {
        for i in 0..ng {
            t[(i, j)] = w[wp(i)] - w[wm(i)];
        }
    }
    let ts = theta_sqrt(lin);
    let s = DMatrix::from_fn(ng, ng, |i, j| ts[i] * t[(i, j)] / ts[j]);
    let asymmetry = (&s - s.transpose()).norm() / s.norm();

    // Energy identity on probe data: (T g|g)_Θ = (1/p_b)[λ∫n*w² + ∫(kp*²|∇_x w|² + |B*w|²/k)].
    let mut identity_residual: f64 = 0.0;
    let probes: Vec<Vec<f64>> = vec![
        vec![1.0; ng],
        grid.g_nodes.iter().map(|&(x, y)| (3.0 * x + 1.7 * y).cos() + 0.3).collect(),
    ];
    for g in &probes {
        let w = lu.solve(&rhs_for(g));
        let tg = &t * DVector::from_column_slice(g);
        let lhs: f64 = (0..ng).map(|i| grid.theta[i] * g[i] * tg[i]).sum();
        let mut x = w.clone();
        x.resize(grid.n_unknowns(), 0.0);
        let id = lin.eigenvalue_identity(lambda, &x);
        let rhs = (lambda * id.a_term + id.b_term) / lin.p_b;
        identity_residual = identity_residual.max((lhs - rhs).abs() / rhs.abs());
    }
    Ok(NtDOperator {
        lambda,
        case: lin.case,
        matrix: (&s + s.transpose()) * 0.5,
        asymmetry,
        identity_residual,
    })
}

/// `A_Σ = (σ/p_b)Θ^{−1}K_x − γ[[ρ*]]/p_b` in the symmetric representation.
pub fn a_sigma_matrix(lin: &DiscreteLinearization) -> DMatrix<f64> {
    let ng = lin.grid.n_g();
    let ts = theta_sqrt(lin);
    let mut a = DMatrix::zeros(ng, ng);
    for (r, c, v) in lin.k_x.triplets() {
        a[(r, c)] += lin.sigma / lin.p_b * v / (ts[r] * ts[c]);
    }
    for i in 0..ng {
        a[(i, i)] -= lin.gamma * lin.jump_rho / lin.p_b;
    }
    a
}

/// Closed-form `B₀`: `A_Σ` off the constants, and on the constants the zero-mode coefficient
/// `(ρ*(0−)²/c₁ + ρ*(0+)²/c₂ − γ[[ρ*]])/p_b` (case i) or `([[ρ*]] − γc)[[ρ*]]/(p_b c)` (case ii).
pub fn b_zero(lin: &DiscreteLinearization, eq: &FlatEquilibrium) -> DMatrix<f64> {
    let ng = lin.grid.n_g();
    let ts = theta_sqrt(lin);
    let area: f64 = lin.grid.theta.iter().sum();
    let v = DVector::from_iterator(ng, ts.iter().map(|t| t / area.sqrt()));
    let beta0 = match eq.case {
        Case::I => (eq.rho_minus.powi(2) / eq.c1 + eq.rho_plus.powi(2) / eq.c2 - eq.gamma() * eq.jump_rho) / eq.p_b,
        Case::II => (eq.jump_rho - eq.gamma() * eq.c) * eq.jump_rho / (eq.p_b * eq.c),
    };
    let a0 = -eq.gamma() * eq.jump_rho / eq.p_b;
    a_sigma_matrix(lin) + (&v * v.transpose()) * (beta0 - a0)
}

/// `B_λ = λT_λ + A_Σ`; `λ = 0` returns the closed-form limit.
pub fn b_lambda(lin: &DiscreteLinearization, eq: &FlatEquilibrium, lambda: f64) -> Result<DMatrix<f64>> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda={lambda} must be nonnegative")));
    }
    if lambda == 0.0 {
        return Ok(b_zero(lin, eq));
    }
    let t = assemble_ntd(lin, lambda)?;
    Ok(t.matrix * lambda + a_sigma_matrix(lin))
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossingCount {
    pub crossings: usize,
    /// `(λ, sorted eigenvalues of B_λ)` at every evaluated point, in increasing λ.
    pub sweep: Vec<(f64, Vec<f64>)>,
}

/// Counts eigenvalue branches of `B_λ` that pass through zero as `λ` runs over `grid`
/// (which must start at 0 and end where `B_λ` is positive definite).
///
/// Branches are matched by sorted order. Between neighbours the negative count may only drop;
/// an interval where it rises is bisected in log λ until the crossings separate.
pub fn positive_eigenvalue_count_via_ntd(
    lin: &DiscreteLinearization,
    eq: &FlatEquilibrium,
    grid: &[f64],
) -> Result<CrossingCount> {
    if grid.len() < 2 || grid[0] != 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("lambda grid must start at 0 and increase".into()));
    }
    let scale = |e: &[f64]| e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let neg = |e: &[f64]| {
        let s = scale(e);
        e.iter().filter(|&&v| v < -1e-12 * s).count()
    };
    let mut sweep = Vec::new();
    let mut crossings = 0usize;
    let mut prev = (grid[0], sorted_eigs(&b_lambda(lin, eq, grid[0])?));
    sweep.push(prev.clone());
    for &lam in &grid[1..] {
        let cur = (lam, sorted_eigs(&b_lambda(lin, eq, lam)?));
        let mut stack = vec![(prev.clone(), cur.clone(), 0usize)];
        while let Some((a, b, depth)) = stack.pop() {
            let (na, nb) = (neg(&a.1), neg(&b.1));
            if nb > na {
                if depth >= 30 || a.0 == 0.0 && depth >= 1 && b.0 <= 1e-14 {
                    return Err(Error::BranchTracking(format!(
                        "negative count rises from {na} to {nb} on [{}, {}]",
                        a.0, b.0
                    )));
                }
                let mid = if a.0 == 0.0 { b.0 * 0.5 } else { (a.0 * b.0).sqrt() };
                let m = (mid, sorted_eigs(&b_lambda(lin, eq, mid)?));
                stack.push((m.clone(), b, depth + 1));
                stack.push((a, m, depth + 1));
                continue;
            }
            crossings += na - nb;
        }
        sweep.push(cur.clone());
        prev = cur;
    }
    if neg(&prev.1) != 0 || prev.1[0] <= 0.0 {
        return Err(Error::BranchTracking(format!(
            "B_lambda not positive definite at the end of the grid (lambda={})",
            prev.0
        )));
    }
    Ok(CrossingCount { crossings, sweep })
}

/// Default sweep: `0` followed by a logarithmic grid on `[1e−6, 1e6]`.
pub fn default_lambda_grid(points: usize) -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend(logspace(1e-6, 1e6, points));
    g
}

/// Linearized mass functionals in full coordinates `x = (τ, g)`, τ in the w slots:
/// `M₁′ = ∫χ₁τ + ∫ρ₁g`, `M₂′ = ∫χ₂τ − ∫ρ₂g`, and their sum in case (ii).
pub fn mass_first_variations(lin: &DiscreteLinearization) -> Vec<Vec<f64>> {
    let grid = &lin.grid;
    let n = grid.n_unknowns();
    let mut rows = vec![vec![0.0; n], vec![0.0; n]];
    for ph in [1, 2] {
        let om = grid.omega(ph);
        for ig in 0..grid.n_g() {
            for (j, o) in om.iter().enumerate() {
                rows[ph - 1][grid.w_index(ph, ig, j)] = grid.theta[ig] * o;
            }
        }
    }
    for ig in 0..grid.n_g() {
        rows[0][grid.h_index(ig)] = grid.theta[ig] * lin.rho_minus;
        rows[1][grid.h_index(ig)] = -grid.theta[ig] * lin.rho_plus;
    }
    match lin.case {
        Case::I => rows,
        Case::II => vec![rows[0].iter().zip(&rows[1]).map(|(a, b)| a + b).collect()],
    }
}

/// Least-squares projection of `x` onto the kernel of the mass first variations.
pub fn project_to_mass_kernel(lin: &DiscreteLinearization, x: &[f64]) -> Vec<f64> {
    let rows = mass_first_variations(lin);
    let k = rows.len();
    let gram = DMatrix::<f64>::from_fn(k, k, |i, j| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum());
    let cx = DVector::from_iterator(k, rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()));
    let coef = gram.lu().solve(&cx).expect("mass rows are independent");
    let mut out = x.to_vec();
    for (i, r) in rows.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(r) {
            *o -= coef[i] * v;
        }
    }
    out
}

/// `∫φ*′τ² + σ∫|∇_x g|² − γ[[ρ*]]∫g²` after projecting `(τ, g)` onto the mass-constraint kernel.
pub fn second_variation(lin: &DiscreteLinearization, eq: &FlatEquilibrium, x: &[f64]) -> f64 {
    let x = project_to_mass_kernel(lin, x);
    quadratic_form(lin, eq, &x, &x)
}

/// Bilinear form of the second variation, without projection.
pub fn quadratic_form(lin: &DiscreteLinearization, eq: &FlatEquilibrium, x: &[f64], y: &[f64]) -> f64 {
    let grid = &lin.grid;
    let mut v = 0.0;
    for ph in [1, 2] {
        let om = grid.omega(ph);
        let spec = eq.system.spec(ph);
        let c = &lin.coeffs[ph - 1];
        for ig in 0..grid.n_g() {
            for (j, o) in om.iter().enumerate() {
                let i = grid.w_index(ph, ig, j);
                v += grid.theta[ig] * o * spec.dphi_unchecked(c.rho[j]) * x[i] * y[i];
            }
        }
    }
    let gx: Vec<f64> = (0..grid.n_g()).map(|ig| x[grid.h_index(ig)]).collect();
    let gy: Vec<f64> = (0..grid.n_g()).map(|ig| y[grid.h_index(ig)]).collect();
    let kg = lin.k_x.matvec(&gy);
    v += lin.sigma * gx.iter().zip(&kg).map(|(a, b)| a * b).sum::<f64>();
    v -= lin.gamma * lin.jump_rho * (0..grid.n_g()).map(|i| grid.theta[i] * gx[i] * gy[i]).sum::<f64>();
    v
}

/// Builds the linearization on the equilibrium's shifted geometry.
pub fn linearize(eq: &FlatEquilibrium, res: crate::geometry::Resolution, sigma: f64) -> Result<DiscreteLinearization> {
    let grid = Grid::build(&eq.shifted_geometry(), res)?;
    DiscreteLinearization::assemble(eq, &grid, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eos::FreeEnergySpec;
    use crate::equilibria::TwoPhaseSystem;
    use crate::geometry::Resolution;
    use std::f64::consts::PI;

    fn gas(r: f64, k: f64) -> FreeEnergySpec {
        FreeEnergySpec::ideal_gas(r, 1e-8, 1e8, k)
    }

    fn sys(lower: f64, upper: f64) -> TwoPhaseSystem {
        TwoPhaseSystem {
            lower: gas(lower, 1.0),
            upper: gas(upper, 0.7),
            gamma: 1.0,
            geom: CapillaryGeometry::interval(1.0, 1.0, 1.0),
        }
    }

    fn heavy_on_top_i() -> FlatEquilibrium {
        sys(2.0, 1.0).solve_flat_equilibrium_i([0.45, 1.0], None).unwrap()
    }

    fn res(n: usize) -> Resolution {
        Resolution { nx: n, ny_cross: n, n_below: n, n_above: n }
    }

    #[test]
    fn light_over_heavy_case_i_always_stable() {
        let eq = sys(1.0, 2.0).solve_flat_equilibrium_i([1.0, 0.45], None).unwrap();
        assert!(eq.jump_rho < 0.0);
        for sigma in [1e-4, 1e-2, 1.0, 100.0] {
            let r = classify(&eq, sigma).unwrap();
            assert_eq!(r.classification, Classification::NormallyStable);
            assert_eq!(r.morse_index, Some(0));
        }
    }

    #[test]
    fn morse_counts_modes_below_mu_star() {
        let eq = heavy_on_top_i();
        let gj = eq.gamma() * eq.jump_rho;
        // σ chosen so that μ* sits between (nπ)² values.
        for (mu_star, expect) in [(0.5 * PI * PI, 0), (2.0 * PI * PI, 1), (2.5 * PI * PI, 1), (5.0 * PI * PI, 2)] {
            let r = classify(&eq, gj / mu_star).unwrap();
            assert_eq!(r.morse_index, Some(expect), "mu*={mu_star}");
            assert_eq!(r.classification == Classification::NormallyStable, expect == 0);
        }
        let r = classify(&eq, gj / (4.0 * PI * PI)).unwrap();
        assert_eq!(r.classification, Classification::Degenerate);
        assert!(matches!(morse_index(&eq, gj / (4.0 * PI * PI)), Err(Error::DegenerateThreshold(_))));
    }

    #[test]
    fn classification_flips_exactly_at_sigma_star() {
        let eq = heavy_on_top_i();
        let s_star = classify(&eq, 1.0).unwrap().sigma_star;
        let below = classify(&eq, s_star * (1.0 - 1e-8)).unwrap();
        let above = classify(&eq, s_star * (1.0 + 1e-8)).unwrap();
        assert_eq!(below.classification, Classification::NormallyHyperbolic);
        assert_eq!(above.classification, Classification::NormallyStable);
        assert_eq!(classify(&eq, s_star).unwrap().classification, Classification::Degenerate);
    }

    #[test]
    fn ntd_symmetric_psd_injective() {
        for eq in [heavy_on_top_i(), sys(2.0, 1.0).solve_flat_equilibrium_ii(1.5, None).unwrap()] {
            let lin = linearize(&eq, res(32), 0.1).unwrap();
            let t = assemble_ntd(&lin, 1.0).unwrap();
            assert!(t.asymmetry < 1e-10, "asymmetry {}", t.asymmetry);
            assert!(t.identity_residual < 1e-6, "identity {}", t.identity_residual);
            let e = sorted_eigs(&t.matrix);
            assert!(e[0] > 0.0, "min eig {}", e[0]);
        }
    }

    #[test]
    fn lambda_t_lambda_monotone() {
        let eq = heavy_on_top_i();
        let lin = linearize(&eq, res(12), 0.1).unwrap();
        let g = DVector::from_iterator(lin.grid.n_g(), lin.grid.g_nodes.iter().map(|p| 1.0 + p.0));
        let mut last = 0.0;
        for lam in logspace(1e-3, 1e3, 13) {
            let t = assemble_ntd(&lin, lam).unwrap();
            let v = lam * g.dot(&(&t.matrix * &g));
            assert!(v >= last * (1.0 - 1e-12));
            last = v;
        }
    }

    #[test]
    fn b_lambda_small_lambda_approaches_closed_form() {
        // The discrete limit differs from the closed form by the O(Δy²) quadrature of c₁, c₂,
        // so the gap decreases with λ down to a floor that shrinks under refinement.
        for eq in [heavy_on_top_i(), sys(2.0, 1.0).solve_flat_equilibrium_ii(1.5, None).unwrap()] {
            let gap = |n: usize, lam: f64| {
                let lin = linearize(&eq, res(n), 0.1).unwrap();
                let b0 = b_lambda(&lin, &eq, 0.0).unwrap();
                (b_lambda(&lin, &eq, lam).unwrap() - &b0).norm() / b0.norm()
            };
            let (d2, d3, d4) = (gap(16, 1e-2), gap(16, 1e-3), gap(16, 1e-4));
            assert!(d2 > d3 && d4 < 1e-2, "{d2} {d3} {d4}");
            let floor_fine = gap(32, 1e-6);
            assert!(floor_fine < gap(16, 1e-6) / 3.0);
        }
    }

    #[test]
    fn unstable_b0_has_negative_eigenvalue() {
        let eq = heavy_on_top_i();
        let lin = linearize(&eq, res(16), 0.02).unwrap();
        assert!(sorted_eigs(&b_zero(&lin, &eq))[0] < 0.0);
        let big = b_lambda(&lin, &eq, 1e6).unwrap();
        assert!(sorted_eigs(&big)[0] > 0.0);
    }

    #[test]
    fn crossing_count_matches_morse_and_spectrum() {
        let eq = heavy_on_top_i();
        for sigma in [0.1, 0.02, 0.005] {
            let lin = linearize(&eq, res(12), sigma).unwrap();
            let c = positive_eigenvalue_count_via_ntd(&lin, &eq, &default_lambda_grid(49)).unwrap();
            let m = morse_index(&eq, sigma).unwrap();
            assert_eq!(c.crossings, m, "sigma={sigma}");
            assert_eq!(lin.unstable_count().unwrap(), m, "sigma={sigma}");
        }
    }

    #[test]
    fn case_ii_negative_side_condition_gives_index_one() {
        let eq = sys(2.0, 1.0).solve_flat_equilibrium_ii(1.5, None).unwrap();
        assert!(eq.side_condition() < 0.0);
        let sigma = 1.0;
        let r = classify(&eq, sigma).unwrap();
        assert!(r.mu_star < r.mu1);
        assert_eq!(r.classification, Classification::NormallyHyperbolic);
        assert_eq!(r.morse_index, Some(1));
        let lin = linearize(&eq, res(12), sigma).unwrap();
        assert_eq!(lin.unstable_count().unwrap(), 1);
        let c = positive_eigenvalue_count_via_ntd(&lin, &eq, &default_lambda_grid(49)).unwrap();
        assert_eq!(c.crossings, 1);
    }

    #[test]
    fn second_variation_density_only_is_positive() {
        let eq = heavy_on_top_i();
        let lin = linearize(&eq, res(8), 0.1).unwrap();
        let mut x = vec![0.0; lin.grid.n_unknowns()];
        for (i, v) in x.iter_mut().enumerate().take(lin.grid.n_bulk()) {
            *v = ((i * 7 % 13) as f64) - 6.0;
        }
        assert!(quadratic_form(&lin, &eq, &x, &x) > 0.0);
    }

    fn min_over_basis(lin: &DiscreteLinearization, eq: &FlatEquilibrium) -> f64 {
        let grid = &lin.grid;
        let n = grid.n_unknowns();
        let mut basis = Vec::new();
        // Height modes cos(nπx) paired with the optimal density response and smooth densities.
        for k in 0..10 {
            let mut b = vec![0.0; n];
            for ig in 0..grid.n_g() {
                b[grid.h_index(ig)] = (k as f64 * PI * grid.g_nodes[ig].0).cos();
            }
            basis.push(project_to_mass_kernel(lin, &b));
            let mut d = vec![0.0; n];
            for ph in [1, 2] {
                let c = &lin.coeffs[ph - 1];
                for ig in 0..grid.n_g() {
                    for j in 0..c.y.len() {
                        d[grid.w_index(ph, ig, j)] =
                            c.rho[j] * c.drho[j] * (k as f64 * c.y[j]).cos() * if ph == 1 { 1.0 } else { -0.5 };
                    }
                }
            }
            basis.push(project_to_mass_kernel(lin, &d));
        }
        let m = basis.len();
        let q = DMatrix::from_fn(m, m, |i, j| quadratic_form(lin, eq, &basis[i], &basis[j]));
        let g = DMatrix::<f64>::from_fn(m, m, |i, j| basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum());
        // Generalized Rayleigh minimum via the Gram-orthonormalized basis.
        let ge = g.symmetric_eigen();
        let keep: Vec<usize> = (0..m).filter(|&i| ge.eigenvalues[i] > 1e-12 * ge.eigenvalues.max()).collect();
        let w = DMatrix::<f64>::from_fn(m, keep.len(), |r, c| ge.eigenvectors[(r, keep[c])] / ge.eigenvalues[keep[c]].sqrt());
        let red = w.transpose() * q * &w;
        sorted_eigs(&((&red + red.transpose()) * 0.5))[0]
    }

    #[test]
    fn second_variation_sign_tracks_classification() {
        let eq = heavy_on_top_i();
        let lin = linearize(&eq, res(16), 0.1).unwrap();
        assert!(min_over_basis(&lin, &eq) >= -1e-8);
        let lin = linearize(&eq, res(16), 0.02).unwrap();
        let mut g = vec![0.0; lin.grid.n_unknowns()];
        for ig in 0..lin.grid.n_g() {
            g[lin.grid.h_index(ig)] = (PI * lin.grid.g_nodes[ig].0).cos();
        }
        assert!(second_variation(&lin, &eq, &g) < 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn morse_index_matches_linops_count(log_sigma in -2.7f64..0.0) {
            let eq = heavy_on_top_i();
            let sigma = 10f64.powf(log_sigma);
            let r = classify(&eq, sigma).unwrap();
            proptest::prop_assume!(r.classification != Classification::Degenerate);
            let lin = linearize(&eq, res(12), sigma).unwrap();
            // On a coarse mesh the discrete ξ_l² lag (lπ)²; skip μ* caught between the two.
            let below = |ev: &[f64]| ev.iter().filter(|&&m| m > 0.0 && m < r.mu_star).count();
            let continuous: Vec<f64> = (1..12).map(|l| (l as f64 * PI).powi(2)).collect();
            proptest::prop_assume!(below(&continuous) == below(&lin.grid.discrete_neumann_eigenvalues()));
            proptest::prop_assert_eq!(r.morse_index, Some(lin.unstable_count().unwrap()));
        }
    }
}
