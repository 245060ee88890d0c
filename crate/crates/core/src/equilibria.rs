//! Hydrostatic profiles and flat equilibria under mass constraints.
//!
//! Case (i) has no phase transition: each phase carries its own pressure potential level
//! `a_j` with `Φ_j(p(y)) = a_j − γy`. Case (ii) allows phase transition and the enthalpy level
//! `a` is shared: `φ_j(ρ(y)) = a − γy`. Unknowns are `(a₁, a₂, h)` resp. `(a, h)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::eos::FreeEnergySpec;
use crate::error::{Error, Result};
use crate::geometry::CapillaryGeometry;
use crate::numerics::simpson_richardson;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
}

impl Case {
    pub fn tag(&self) -> &'static str {
        match self {
            Case::I => "i",
            Case::II => "ii",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum CaseParams {
    NoPT { a1: f64, a2: f64 },
    PT { a: f64 },
}

impl CaseParams {
    pub fn case(&self) -> Case {
        match self {
            CaseParams::NoPT { .. } => Case::I,
            CaseParams::PT { .. } => Case::II,
        }
    }

    /// Potential level governing `phase`.
    pub fn level(&self, phase: usize) -> f64 {
        match *self {
            CaseParams::NoPT { a1, a2 } => {
                if phase == 1 {
                    a1
                } else {
                    a2
                }
            }
            CaseParams::PT { a } => a,
        }
    }
}

/// The two phases in the capillary under gravity.
#[derive(Clone, Debug)]
pub struct TwoPhaseSystem {
    /// Phase 1, occupying the bottom.
    pub lower: FreeEnergySpec,
    /// Phase 2, occupying the top.
    pub upper: FreeEnergySpec,
    pub gamma: f64,
    pub geom: CapillaryGeometry,
}

const QUAD_RTOL: f64 = 1e-14;
const QUAD_ATOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-10;
const RK4_RTOL: f64 = 1e-8;

impl TwoPhaseSystem {
    pub fn spec(&self, phase: usize) -> &FreeEnergySpec {
        if phase == 1 {
            &self.lower
        } else {
            &self.upper
        }
    }

    fn feasibility(&self, phase: usize, y: f64, value: f64, err: Error) -> Error {
        match err {
            Error::Range { min, max, .. } => Error::Feasibility {
                phase,
                y,
                value,
                min,
                max,
            },
            e => e,
        }
    }

    /// Hydrostatic pressure of `phase` at physical height `y`.
    pub fn pressure(&self, params: &CaseParams, phase: usize, y: f64) -> Result<f64> {
        let spec = self.spec(phase);
        let v = params.level(phase) - self.gamma * y;
        match params {
            CaseParams::NoPT { .. } => spec
                .inverse_capital_phi(v)
                .map_err(|e| self.feasibility(phase, y, v, e)),
            CaseParams::PT { .. } => {
                let rho = spec.inverse_phi(v).map_err(|e| self.feasibility(phase, y, v, e))?;
                Ok(spec.p_unchecked(rho))
            }
        }
    }

    /// Hydrostatic density of `phase` at physical height `y`.
    pub fn density(&self, params: &CaseParams, phase: usize, y: f64) -> Result<f64> {
        let spec = self.spec(phase);
        let v = params.level(phase) - self.gamma * y;
        match params {
            CaseParams::NoPT { .. } => {
                let p = spec
                    .inverse_capital_phi(v)
                    .map_err(|e| self.feasibility(phase, y, v, e))?;
                spec.density_from_pressure(p)
            }
            CaseParams::PT { .. } => spec.inverse_phi(v).map_err(|e| self.feasibility(phase, y, v, e)),
        }
    }

    /// `ρ ρ′(p)` along the profile, the integrand of the mass sensitivities `c_j`.
    fn sensitivity_integrand(&self, params: &CaseParams, phase: usize, y: f64) -> Result<f64> {
        let spec = self.spec(phase);
        let rho = self.density(params, phase, y)?;
        Ok(rho / spec.dp_unchecked(rho))
    }

    /// Checks that the level window over the phase's vertical extent stays in the image.
    pub fn check_feasible(&self, params: &CaseParams, h: f64) -> Result<()> {
        self.check_h(h)?;
        for (phase, ys) in [(1, [-self.geom.h_lower, h]), (2, [h, self.geom.h_upper])] {
            for y in ys {
                self.pressure(params, phase, y)?;
            }
        }
        Ok(())
    }

    fn check_h(&self, h: f64) -> Result<()> {
        if h > -self.geom.h_lower && h < self.geom.h_upper {
            Ok(())
        } else {
            Err(Error::InterfaceOutside {
                h,
                min: -self.geom.h_lower,
                max: self.geom.h_upper,
            })
        }
    }

    fn phase_interval(&self, phase: usize, h: f64) -> (f64, f64) {
        if phase == 1 {
            (-self.geom.h_lower, h)
        } else {
            (h, self.geom.h_upper)
        }
    }

    fn integrate<F: Fn(f64) -> Result<f64>>(&self, f: F, a: f64, b: f64) -> Result<f64> {
        let mut first_err: Option<Error> = None;
        let cell = std::cell::RefCell::new(&mut first_err);
        let v = simpson_richardson(
            &|y| match f(y) {
                Ok(v) => v,
                Err(e) => {
                    let mut slot = cell.borrow_mut();
                    if slot.is_none() {
                        **slot = Some(e);
                    }
                    f64::NAN
                }
            },
            a,
            b,
            QUAD_RTOL,
            QUAD_ATOL,
        );
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(v)
    }

    /// `(M₁, M₂)` with `M_j = |G| ∫ ρ_j dy` over the phase.
    pub fn phase_masses(&self, params: &CaseParams, h: f64) -> Result<[f64; 2]> {
        self.check_feasible(params, h)?;
        let area = self.geom.area();
        let mut out = [0.0; 2];
        for phase in [1, 2] {
            let (a, b) = self.phase_interval(phase, h);
            out[phase - 1] = area * self.integrate(|y| self.density(params, phase, y), a, b)?;
        }
        Ok(out)
    }

    /// `c_j = ∫ ρ ρ′(p) dy` over each phase.
    pub fn sensitivities(&self, params: &CaseParams, h: f64) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        for phase in [1, 2] {
            let (a, b) = self.phase_interval(phase, h);
            out[phase - 1] = self.integrate(|y| self.sensitivity_integrand(params, phase, y), a, b)?;
        }
        Ok(out)
    }

    /// `[[p]] = p₂(h) − p₁(h)`.
    pub fn pressure_jump(&self, params: &CaseParams, h: f64) -> Result<f64> {
        Ok(self.pressure(params, 2, h)? - self.pressure(params, 1, h)?)
    }

    /// Hydrostatic profile sampled at `n_below + 1` resp. `n_above + 1` uniform nodes.
    ///
    /// The closed-form profile is cross-validated against RK4 integration from the interface.
    pub fn hydrostatic_profile(
        &self,
        params: &CaseParams,
        h: f64,
        n_below: usize,
        n_above: usize,
    ) -> Result<HydrostaticProfile> {
        self.check_feasible(params, h)?;
        let mut phases = Vec::new();
        for (phase, n) in [(1, n_below), (2, n_above)] {
            let (a, b) = self.phase_interval(phase, h);
            let y: Vec<f64> = (0..=n).map(|j| a + (b - a) * j as f64 / n as f64).collect();
            let p = y
                .iter()
                .map(|&yy| self.pressure(params, phase, yy))
                .collect::<Result<Vec<_>>>()?;
            let rho = y
                .iter()
                .map(|&yy| self.density(params, phase, yy))
                .collect::<Result<Vec<_>>>()?;
            phases.push(PhaseProfile { y, p, rho });
        }
        let prof = HydrostaticProfile {
            params: *params,
            h,
            gamma: self.gamma,
            lower: phases.remove(0),
            upper: phases.remove(0),
        };
        let err = self.rk4_discrepancy(&prof)?;
        if err > RK4_RTOL {
            return Err(Error::InternalInvariantViolation(format!(
                "hydrostatic profile deviates from RK4 integration by {err:e}"
            )));
        }
        Ok(prof)
    }

    /// Max relative deviation between the sampled profile and RK4 integration of the
    /// hydrostatic ODE started from the interface value: `p′ = −γρ(p)` (case i) or
    /// `ρ′ = −γρ/p′(ρ)` (case ii).
    pub fn rk4_discrepancy(&self, prof: &HydrostaticProfile) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for phase in [1, 2] {
            let spec = self.spec(phase);
            let pp = prof.phase(phase);
            let (vals, rhs): (&Vec<f64>, Box<dyn Fn(f64) -> f64>) = match prof.params {
                CaseParams::NoPT { .. } => (
                    &pp.p,
                    Box::new(|p: f64| -self.gamma * spec.density_from_pressure(p).unwrap_or(f64::NAN)),
                ),
                CaseParams::PT { .. } => (
                    &pp.rho,
                    Box::new(|r: f64| -self.gamma * r / spec.dp_unchecked(r)),
                ),
            };
            let n = pp.y.len();
            // Integrate away from the interface node.
            let order: Vec<usize> = if phase == 1 { (0..n).rev().collect() } else { (0..n).collect() };
            let mut u = vals[order[0]];
            for w in order.windows(2) {
                let (y0, y1) = (pp.y[w[0]], pp.y[w[1]]);
                let sub = 64;
                let dy = (y1 - y0) / sub as f64;
                for _ in 0..sub {
                    let k1 = rhs(u);
                    let k2 = rhs(u + 0.5 * dy * k1);
                    let k3 = rhs(u + 0.5 * dy * k2);
                    let k4 = rhs(u + dy * k3);
                    u += dy / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
                let rel = (u - vals[w[1]]).abs() / vals[w[1]].abs();
                if !rel.is_finite() {
                    return Err(Error::InternalInvariantViolation(
                        "RK4 cross-check left the admissible range".into(),
                    ));
                }
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }

    /// Residual `g` of the equilibrium equations and its analytic Jacobian.
    ///
    /// Case (i): `g = (M₁ − M₀₁, M₂ − M₀₂, f)` in `(a₁, a₂, h)`.
    /// Case (ii): `g = (M − M₀, f)` in `(a, h)`.
    pub fn residual_and_jacobian(
        &self,
        x: &[f64],
        case: Case,
        targets: &[f64],
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (params, h) = unpack(x, case);
        let m = self.phase_masses(&params, h)?;
        let c = self.sensitivities(&params, h)?;
        let area = self.geom.area();
        let r1 = self.density(&params, 1, h)?;
        let r2 = self.density(&params, 2, h)?;
        let f = self.pressure_jump(&params, h)?;
        let jump = r2 - r1;
        let g = self.gamma;
        match case {
            Case::I => {
                let res = vec![m[0] - targets[0], m[1] - targets[1], f];
                #[rustfmt::skip]
                let jac = DMatrix::from_row_slice(3, 3, &[
                    area * c[0], 0.0, area * r1,
                    0.0, area * c[1], -area * r2,
                    -r1, r2, -g * jump,
                ]);
                Ok((res, jac))
            }
            Case::II => {
                let res = vec![m[0] + m[1] - targets[0], f];
                let cc = c[0] + c[1];
                #[rustfmt::skip]
                let jac = DMatrix::from_row_slice(2, 2, &[
                    area * cc, -area * jump,
                    jump, -g * jump,
                ]);
                Ok((res, jac))
            }
        }
    }

    /// Equilibrium with `γ = 0` used as Newton seed; returns `(x, p̂)`.
    pub fn gravity_free_seed(&self, case: Case, targets: &[f64]) -> Result<Vec<f64>> {
        let area = self.geom.area();
        let (hl, hu) = (self.geom.h_lower, self.geom.h_upper);
        match case {
            Case::I => {
                let (l1, u1) = self.lower.pressure_range();
                let (l2, u2) = self.upper.pressure_range();
                let (lo, hi) = (l1.max(l2), u1.min(u2));
                if !(lo < hi) {
                    return Err(Error::Config("phase pressure ranges do not overlap".into()));
                }
                // M₁/ρ₁(p̂) + M₂/ρ₂(p̂) − |G|(h̲+h̄) is decreasing in p̂.
                let vol = |p: f64| -> Result<f64> {
                    Ok(targets[0] / self.lower.density_from_pressure(p)?
                        + targets[1] / self.upper.density_from_pressure(p)?
                        - area * (hl + hu))
                };
                let p_hat = bisect_log(|p| Ok(-vol(p)?), lo, hi)?;
                let h = targets[0] / (area * self.lower.density_from_pressure(p_hat)?) - hl;
                let a1 = self.lower.capital_phi_of_pressure(p_hat)? + self.gamma * h;
                let a2 = self.upper.capital_phi_of_pressure(p_hat)? + self.gamma * h;
                Ok(vec![a1, a2, h])
            }
            Case::II => {
                let a0 = self.coexistence_level()?;
                let r1 = self.lower.inverse_phi(a0)?;
                let r2 = self.upper.inverse_phi(a0)?;
                check_nondegenerate(r2 - r1, r1.max(r2))?;
                let h = (targets[0] / area - hl * r1 - hu * r2) / (r1 - r2);
                Ok(vec![a0 + self.gamma * h, h])
            }
        }
    }

    /// Enthalpy level at which both phases have equal pressure.
    ///
    /// With gravity, `f(a, h) = 0` holds exactly when `a − γh` equals this level.
    pub fn coexistence_level(&self) -> Result<f64> {
        let (l1, u1) = self.lower.phi_range();
        let (l2, u2) = self.upper.phi_range();
        let (lo, hi) = (l1.max(l2), u1.min(u2));
        if !(lo < hi) {
            return Err(Error::Config("phase enthalpy ranges do not overlap".into()));
        }
        let f = |a: f64| -> Result<f64> {
            Ok(self.upper.p_unchecked(self.upper.inverse_phi(a)?)
                - self.lower.p_unchecked(self.lower.inverse_phi(a)?))
        };
        // Scan for the first sign change; the coexistence curve need not be monotone.
        let n = 400;
        let mut prev_a = lo;
        let mut prev = f(lo)?;
        if prev == 0.0 {
            return Ok(lo);
        }
        for i in 1..=n {
            let a = lo + (hi - lo) * i as f64 / n as f64;
            let v = f(a)?;
            if v == 0.0 {
                return Ok(a);
            }
            if v.signum() != prev.signum() {
                return bisect(|x| Ok(f(x)? * prev.signum().neg_sign()), prev_a, a);
            }
            prev_a = a;
            prev = v;
        }
        if prev.abs() < 1e-14 {
            // Pressures coincide everywhere on the window (identical phases).
            return Ok(0.5 * (lo + hi));
        }
        Err(Error::Config("no coexistence level: phase pressures never balance".into()))
    }

    /// Newton's method with step halving on the scaled residual.
    fn newton(&self, case: Case, targets: &[f64], x0: Vec<f64>) -> Result<(Vec<f64>, usize, f64)> {
        let p_scale = {
            let (params, h) = unpack(&x0, case);
            0.5 * (self.pressure(&params, 1, h)? + self.pressure(&params, 2, h)?)
        };
        let scale = |r: &[f64]| -> f64 {
            let mut s = 0.0;
            for (i, v) in r.iter().enumerate() {
                let d = if i + 1 == r.len() { p_scale } else { targets[i] };
                s += (v / d).powi(2);
            }
            s.sqrt()
        };
        let mut x = x0;
        let (mut res, mut jac) = self.residual_and_jacobian(&x, case, targets)?;
        let mut norm = scale(&res);
        for it in 0..NEWTON_MAX_ITER {
            if norm < 1e-14 {
                return Ok((x, it, norm));
            }
            let dx = jac
                .clone()
                .lu()
                .solve(&DVector::from_vec(res.iter().map(|v| -v).collect()))
                .ok_or_else(|| Error::InternalInvariantViolation("singular equilibrium Jacobian".into()))?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let xt: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + t * b).collect();
                if let Ok((r, j)) = self.residual_and_jacobian(&xt, case, targets) {
                    let n = scale(&r);
                    if n < norm {
                        x = xt;
                        res = r;
                        jac = j;
                        norm = n;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return if norm < NEWTON_TOL {
                    Ok((x, it, norm))
                } else {
                    Err(Error::NoConvergence {
                        what: "flat equilibrium Newton (line search stalled)".into(),
                        iterations: it,
                        residual: norm,
                    })
                };
            }
        }
        if norm < NEWTON_TOL {
            Ok((x, NEWTON_MAX_ITER, norm))
        } else {
            Err(Error::NoConvergence {
                what: "flat equilibrium Newton".into(),
                iterations: NEWTON_MAX_ITER,
                residual: norm,
            })
        }
    }

    /// Newton from `guess` (or the gravity-free seed), falling back to continuation in `γ`.
    fn solve(&self, case: Case, targets: &[f64], guess: Option<Vec<f64>>) -> Result<(Vec<f64>, usize, f64)> {
        for t in targets {
            if !(*t > 0.0) {
                return Err(Error::Config(format!("target masses must be positive, got {t}")));
            }
        }
        let seed = match guess {
            Some(g) => g,
            None => self.gravity_free_seed(case, targets)?,
        };
        match self.newton(case, targets, seed) {
            Ok(r) => Ok(r),
            Err(err @ (Error::DegenerateEquilibrium(_) | Error::Config(_))) => Err(err),
            Err(first) => {
                let steps = 10;
                let mut sys = self.clone();
                sys.gamma = 0.0;
                let mut x = sys.gravity_free_seed(case, targets)?;
                let mut total_it = 0;
                for s in 1..=steps {
                    sys.gamma = self.gamma * s as f64 / steps as f64;
                    match sys.newton(case, targets, x.clone()) {
                        Ok((xs, it, _)) => {
                            x = xs;
                            total_it += it;
                        }
                        Err(_) => return Err(first),
                    }
                }
                let (x, it, n) = self.newton(case, targets, x)?;
                Ok((x, total_it + it, n))
            }
        }
    }

    /// Case (i): flat equilibrium with phase masses `(M₀₁, M₀₂)`.
    pub fn solve_flat_equilibrium_i(&self, targets: [f64; 2], guess: Option<[f64; 3]>) -> Result<FlatEquilibrium> {
        let (x, it, norm) = self.solve(Case::I, &targets, guess.map(|g| g.to_vec()))?;
        let eq = self.assemble_equilibrium(Case::I, &x, it, norm)?;
        let det_rel = (eq.det_formula - eq.det_lu).abs() / eq.det_lu.abs();
        if det_rel > 1e-6 {
            return Err(Error::InternalInvariantViolation(format!(
                "determinant formula {} disagrees with LU determinant {}",
                eq.det_formula, eq.det_lu
            )));
        }
        if !(eq.lcuni_margin > 0.0) {
            return Err(Error::InternalInvariantViolation(format!(
                "gamma [[rho]] < rho1^2/c1 + rho2^2/c2 fails with margin {}",
                eq.lcuni_margin
            )));
        }
        Ok(eq)
    }

    /// Case (ii): flat equilibrium with total mass `M₀`.
    pub fn solve_flat_equilibrium_ii(&self, target: f64, guess: Option<[f64; 2]>) -> Result<FlatEquilibrium> {
        let (x, it, norm) = self.solve(Case::II, &[target], guess.map(|g| g.to_vec()))?;
        let eq = self.assemble_equilibrium(Case::II, &x, it, norm)?;
        let rho_max = eq.rho_minus.max(eq.rho_plus).max(eq.rho_bottom);
        check_nondegenerate(eq.jump_rho, rho_max)?;
        let gc = self.gamma * eq.c;
        if (eq.jump_rho - gc).abs() < 1e-8 * eq.jump_rho.abs().max(gc.abs()) {
            return Err(Error::IsolationFailure(format!(
                "[[rho]]={} coincides with gamma c={}",
                eq.jump_rho, gc
            )));
        }
        Ok(eq)
    }

    /// Builds the equilibrium record at a converged root `x`.
    pub fn assemble_equilibrium(&self, case: Case, x: &[f64], iterations: usize, residual: f64) -> Result<FlatEquilibrium> {
        let (params, h) = unpack(x, case);
        let masses = self.phase_masses(&params, h)?;
        let c = self.sensitivities(&params, h)?;
        let rho_minus = self.density(&params, 1, h)?;
        let rho_plus = self.density(&params, 2, h)?;
        let p1 = self.pressure(&params, 1, h)?;
        let p2 = self.pressure(&params, 2, h)?;
        let rho_bottom = self.density(&params, 1, -self.geom.h_lower)?;
        let rho_top = self.density(&params, 2, self.geom.h_upper)?;
        let jump = rho_plus - rho_minus;
        let area = self.geom.area();
        let targets: Vec<f64> = match case {
            Case::I => masses.to_vec(),
            Case::II => vec![masses[0] + masses[1]],
        };
        let (_, jac) = self.residual_and_jacobian(x, case, &targets)?;
        let det_lu = jac.clone().lu().determinant();
        let cc = c[0] + c[1];
        let det_formula = match case {
            Case::I => {
                area * area * c[0] * c[1]
                    * (rho_minus * rho_minus / c[0] + rho_plus * rho_plus / c[1] - self.gamma * jump)
            }
            Case::II => area * jump * (jump - self.gamma * cc),
        };
        let lcuni_margin = rho_minus * rho_minus / c[0] + rho_plus * rho_plus / c[1] - self.gamma * jump;
        Ok(FlatEquilibrium {
            system: self.clone(),
            case,
            params,
            h,
            p_b: 0.5 * (p1 + p2),
            pressure_jump: p2 - p1,
            rho_minus,
            rho_plus,
            jump_rho: jump,
            rho_bottom,
            rho_top,
            c1: c[0],
            c2: c[1],
            c: cc,
            masses,
            det_formula,
            det_lu: if case == Case::II { det_lu.abs() * det_formula.signum() } else { det_lu },
            lcuni_margin,
            lcunii_lhs: self.gamma * cc - jump,
            lcunii_rhs: rho_bottom - rho_top,
            iterations,
            residual,
        })
    }
}

fn unpack(x: &[f64], case: Case) -> (CaseParams, f64) {
    match case {
        Case::I => (CaseParams::NoPT { a1: x[0], a2: x[1] }, x[2]),
        Case::II => (CaseParams::PT { a: x[0] }, x[1]),
    }
}

fn check_nondegenerate(jump: f64, rho_max: f64) -> Result<()> {
    if jump.abs() < 1e-8 * rho_max {
        Err(Error::DegenerateEquilibrium(format!(
            "density jump {jump:e} vanishes relative to density scale {rho_max:e}"
        )))
    } else {
        Ok(())
    }
}

trait NegSign {
    fn neg_sign(self) -> f64;
}

impl NegSign for f64 {
    /// Sign flip turning "first value positive" into "increasing through zero".
    fn neg_sign(self) -> f64 {
        -self
    }
}

/// Bisection for an increasing function on `[lo, hi]`.
fn bisect<F: Fn(f64) -> Result<f64>>(f: F, mut lo: f64, mut hi: f64) -> Result<f64> {
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::Config("bisection bracket does not enclose a root".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Bisection in `ln p` for an increasing function of a positive variable.
fn bisect_log<F: Fn(f64) -> Result<f64>>(f: F, lo: f64, hi: f64) -> Result<f64> {
    let r = bisect(|s| f(s.exp().clamp(lo, hi)), lo.ln(), hi.ln())?;
    Ok(r.exp().clamp(lo, hi))
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseProfile {
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Hydrostatic fields sampled per phase in physical coordinates.
#[derive(Clone, Debug, Serialize)]
pub struct HydrostaticProfile {
    pub params: CaseParams,
    pub h: f64,
    pub gamma: f64,
    pub lower: PhaseProfile,
    pub upper: PhaseProfile,
}

impl HydrostaticProfile {
    pub fn phase(&self, phase: usize) -> &PhaseProfile {
        if phase == 1 {
            &self.lower
        } else {
            &self.upper
        }
    }

    /// `[[p]]` at the interface node.
    pub fn pressure_jump_residual(&self) -> f64 {
        self.upper.p[0] - self.lower.p[self.lower.p.len() - 1]
    }
}

/// Flat equilibrium with its derived constants.
#[derive(Clone, Debug)]
pub struct FlatEquilibrium {
    pub system: TwoPhaseSystem,
    pub case: Case,
    pub params: CaseParams,
    pub h: f64,
    /// Interface pressure, well defined since `[[p]] = 0`.
    pub p_b: f64,
    pub pressure_jump: f64,
    /// `ρ₁(h)`, the density just below the interface.
    pub rho_minus: f64,
    /// `ρ₂(h)`, the density just above the interface.
    pub rho_plus: f64,
    pub jump_rho: f64,
    /// `ρ₁(−h̲)`.
    pub rho_bottom: f64,
    /// `ρ₂(h̄)`.
    pub rho_top: f64,
    pub c1: f64,
    pub c2: f64,
    pub c: f64,
    pub masses: [f64; 2],
    pub det_formula: f64,
    pub det_lu: f64,
    /// `ρ₁²/c₁ + ρ₂²/c₂ − γ[[ρ]]`, positive for every case-(i) equilibrium.
    pub lcuni_margin: f64,
    /// `γc − [[ρ]]`.
    pub lcunii_lhs: f64,
    /// `ρ₁(−h̲) − ρ₂(h̄)`, equal to `lcunii_lhs`.
    pub lcunii_rhs: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl FlatEquilibrium {
    pub fn gamma(&self) -> f64 {
        self.system.gamma
    }

    pub fn total_mass(&self) -> f64 {
        self.masses[0] + self.masses[1]
    }

    /// Geometry with the reference interface moved to the equilibrium height, so that phase 1
    /// occupies `(−(h̲ + h), 0)` and phase 2 `(0, h̄ − h)`.
    pub fn shifted_geometry(&self) -> CapillaryGeometry {
        let g = self.system.geom;
        CapillaryGeometry {
            cross_section: g.cross_section,
            h_lower: g.h_lower + self.h,
            h_upper: g.h_upper - self.h,
        }
    }

    /// `(p*, ρ*, dρ/dp at p*)` of `phase` at shifted height `s` (physical `y = s + h`).
    pub fn state_shifted(&self, phase: usize, s: f64) -> Result<(f64, f64, f64)> {
        let y = s + self.h;
        let p = self.system.pressure(&self.params, phase, y)?;
        let rho = self.system.density(&self.params, phase, y)?;
        let drho = 1.0 / self.system.spec(phase).dp_unchecked(rho);
        Ok((p, rho, drho))
    }

    /// `[[ρ*]](ρ*(h̄) − ρ*(−h̲))`, the case-(ii) side condition.
    pub fn side_condition(&self) -> f64 {
        self.jump_rho * (self.rho_top - self.rho_bottom)
    }

    pub fn profile(&self, n_below: usize, n_above: usize) -> Result<HydrostaticProfile> {
        self.system.hydrostatic_profile(&self.params, self.h, n_below, n_above)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eos::FreeEnergySpec;
    use proptest::prelude::*;

    fn gas(r: f64) -> FreeEnergySpec {
        FreeEnergySpec::ideal_gas(r, 1e-8, 1e8, 1.0)
    }

    fn sys(r1: f64, r2: f64, gamma: f64) -> TwoPhaseSystem {
        TwoPhaseSystem {
            lower: gas(r1),
            upper: gas(r2),
            gamma,
            geom: CapillaryGeometry::interval(1.0, 1.0, 1.0),
        }
    }

    #[test]
    fn gravity_free_profile_is_constant() {
        let s = sys(1.0, 1.0, 0.0);
        let a1 = 2f64.ln();
        let prof = s
            .hydrostatic_profile(&CaseParams::NoPT { a1, a2: a1 }, 0.1, 8, 8)
            .unwrap();
        assert!(prof.lower.p.iter().all(|p| (p - 2.0).abs() < 1e-14));
    }

    #[test]
    fn ideal_gas_profile_is_exponential() {
        let s = sys(1.0, 2.0, 0.7);
        let params = CaseParams::NoPT { a1: 0.3, a2: 0.9 };
        let prof = s.hydrostatic_profile(&params, 0.2, 16, 16).unwrap();
        for (y, p) in prof.lower.y.iter().zip(&prof.lower.p) {
            assert!((p - (0.3 - 0.7 * y).exp()).abs() < 1e-13 * p);
        }
    }

    #[test]
    fn case_ii_profile_matches_closed_form() {
        // φ = Rθ(ln ρ + 1) gives ρ = exp((a − γy)/Rθ − 1).
        let s = sys(2.0, 1.0, 1.0);
        let params = CaseParams::PT { a: 1.5 };
        let prof = s.hydrostatic_profile(&params, 0.1, 20, 20).unwrap();
        for (y, r) in prof.upper.y.iter().zip(&prof.upper.rho) {
            assert!((r - ((1.5 - y) / 1.0 - 1.0).exp()).abs() < 1e-13 * r);
        }
        assert!(s.rk4_discrepancy(&prof).unwrap() < 1e-8);
    }

    #[test]
    fn profile_decreases_with_height() {
        let s = sys(1.0, 2.0, 1.0);
        let prof = s.hydrostatic_profile(&CaseParams::NoPT { a1: 0.0, a2: 0.5 }, 0.0, 10, 10).unwrap();
        for ph in [&prof.lower, &prof.upper] {
            assert!(ph.p.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn infeasible_window_names_phase() {
        let s = TwoPhaseSystem {
            lower: FreeEnergySpec::ideal_gas(1.0, 0.5, 2.0, 1.0),
            upper: gas(1.0),
            gamma: 5.0,
            geom: CapillaryGeometry::interval(1.0, 1.0, 1.0),
        };
        let err = s.phase_masses(&CaseParams::NoPT { a1: 0.0, a2: 0.0 }, 0.0).unwrap_err();
        match err {
            Error::Feasibility { phase, .. } => assert_eq!(phase, 1),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn identical_phases_have_zero_jump() {
        let s = sys(1.3, 1.3, 0.8);
        let j = s.pressure_jump(&CaseParams::NoPT { a1: 0.4, a2: 0.4 }, 0.3).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn jump_sensitivity_to_a2_is_rho2() {
        let s = sys(1.0, 2.0, 1.0);
        let (a1, a2, h) = (0.2, 0.6, 0.1);
        let base = s.pressure_jump(&CaseParams::NoPT { a1, a2 }, h).unwrap();
        let rho2 = s.density(&CaseParams::NoPT { a1, a2 }, 2, h).unwrap();
        for d in [1e-3, 1e-4] {
            let pert = s.pressure_jump(&CaseParams::NoPT { a1, a2: a2 + d }, h).unwrap();
            let lin = rho2 * d;
            // Remainder is second order in δ.
            assert!(((pert - base) - lin).abs() < 5.0 * d * d, "d={d}");
        }
    }

    #[test]
    fn constant_density_mass() {
        // ρ₁ ≡ 2 with γ = 0: p = 2 for Rθ = 1.
        let s = sys(1.0, 1.0, 0.0);
        let a = 2f64.ln();
        let m = s.phase_masses(&CaseParams::NoPT { a1: a, a2: a }, 0.0).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn mass_height_derivative_is_interface_density() {
        let s = sys(1.0, 2.0, 1.0);
        let params = CaseParams::NoPT { a1: 0.2, a2: 0.6 };
        let h = 0.1;
        let e = 1e-5;
        let mp = s.phase_masses(&params, h + e).unwrap();
        let mm = s.phase_masses(&params, h - e).unwrap();
        let d = (mp[0] - mm[0]) / (2.0 * e);
        let rho = s.density(&params, 1, h).unwrap();
        assert!((d - rho).abs() < 1e-8 * rho);
    }

    #[test]
    fn sensitivities_satisfy_endpoint_identity() {
        let s = sys(1.0, 2.0, 0.9);
        let params = CaseParams::NoPT { a1: 0.2, a2: 0.6 };
        let h = -0.15;
        let c = s.sensitivities(&params, h).unwrap();
        let r = |ph, y| s.density(&params, ph, y).unwrap();
        assert!((0.9 * c[0] - (r(1, -1.0) - r(1, h))).abs() < 1e-12);
        assert!((0.9 * c[1] - (r(2, h) - r(2, 1.0))).abs() < 1e-12);
    }

    #[test]
    fn gravity_free_closed_form_is_recovered() {
        let s = sys(1.0, 1.0, 0.0);
        // p̂ = 1.5, h = 0.2: M₁ = 1.2·1.5, M₂ = 0.8·1.5.
        let eq = s.solve_flat_equilibrium_i([1.8, 1.2], None).unwrap();
        assert!((eq.h - 0.2).abs() < 1e-10);
        assert!((eq.p_b - 1.5).abs() < 1e-10);
    }

    fn fd_jacobian(s: &TwoPhaseSystem, x: &[f64], case: Case, targets: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n {
            let e = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += e;
            xm[k] -= e;
            let (rp, _) = s.residual_and_jacobian(&xp, case, targets).unwrap();
            let (rm, _) = s.residual_and_jacobian(&xm, case, targets).unwrap();
            for i in 0..n {
                j[(i, k)] = (rp[i] - rm[i]) / (2.0 * e);
            }
        }
        j
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let s = sys(1.0, 2.0, 1.0);
        for (case, x) in [(Case::I, vec![0.2, 0.6, 0.1]), (Case::II, vec![1.2, -0.2])] {
            let s = if case == Case::II { sys(2.0, 1.0, 1.0) } else { s.clone() };
            let t = vec![1.0; x.len() - 1];
            let (_, ja) = s.residual_and_jacobian(&x, case, &t).unwrap();
            let jf = fd_jacobian(&s, &x, case, &t);
            for i in 0..x.len() {
                for k in 0..x.len() {
                    let a = ja[(i, k)];
                    let f = jf[(i, k)];
                    if a == 0.0 {
                        assert!(f.abs() < 1e-9);
                    } else {
                        assert!((a - f).abs() < 1e-6 * a.abs(), "({i},{k}) {a} vs {f}");
                    }
                }
            }
        }
    }

    #[test]
    fn manufactured_case_i_recovery() {
        let s = sys(1.0, 2.0, 1.0);
        // Choose a₂ so that [[p]] = 0 at h: Φ₂ = 2 ln p, p(h) = exp(a₁ − h).
        let (a1, h): (f64, f64) = (0.3, 0.15);
        let ph = (a1 - h).exp();
        let a2 = 2.0 * ph.ln() + h;
        let params = CaseParams::NoPT { a1, a2 };
        assert!(s.pressure_jump(&params, h).unwrap().abs() < 1e-14);
        let m = s.phase_masses(&params, h).unwrap();
        let eq = s.solve_flat_equilibrium_i(m, None).unwrap();
        match eq.params {
            CaseParams::NoPT { a1: b1, a2: b2 } => {
                assert!((b1 - a1).abs() < 1e-8 && (b2 - a2).abs() < 1e-8);
            }
            _ => unreachable!(),
        }
        assert!((eq.h - h).abs() < 1e-8);
        assert!((eq.det_formula - eq.det_lu).abs() < 1e-8 * eq.det_lu.abs());
    }

    #[test]
    fn manufactured_case_ii_recovery_and_identity() {
        let s = sys(2.0, 1.0, 1.0);
        let a0 = s.coexistence_level().unwrap();
        let h = 0.2;
        let params = CaseParams::PT { a: a0 + h };
        assert!(s.pressure_jump(&params, h).unwrap().abs() < 1e-12);
        let m = s.phase_masses(&params, h).unwrap();
        let eq = s.solve_flat_equilibrium_ii(m[0] + m[1], None).unwrap();
        match eq.params {
            CaseParams::PT { a } => assert!((a - (a0 + h)).abs() < 1e-8),
            _ => unreachable!(),
        }
        assert!((eq.h - h).abs() < 1e-8);
        assert!((eq.lcunii_lhs - eq.lcunii_rhs).abs() < 1e-8);
    }

    #[test]
    fn identical_phases_are_degenerate_in_case_ii() {
        let s = sys(1.0, 1.0, 1.0);
        let err = s.solve_flat_equilibrium_ii(2.0, None).unwrap_err();
        assert!(matches!(err, Error::DegenerateEquilibrium(_)), "{err:?}");
    }

    #[test]
    fn jacobian_row_of_f_has_rank_one() {
        let s = sys(1.0, 2.0, 1.0);
        let eq = s.solve_flat_equilibrium_i([1.5, 1.0], None).unwrap();
        let (_, j) = s
            .residual_and_jacobian(&[eq.params.level(1), eq.params.level(2), eq.h], Case::I, &eq.masses)
            .unwrap();
        let row = j.row(2);
        assert!(row.norm() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn case_i_equilibria_satisfy_inequality(
            r1 in 0.3f64..3.0, r2 in 0.3f64..3.0, gamma in 0.0f64..2.0,
            m1 in 0.3f64..3.0, m2 in 0.3f64..3.0,
        ) {
            let s = sys(r1, r2, gamma);
            // The density window (1e-8, 1e8) makes every draw feasible.
            let eq = s.solve_flat_equilibrium_i([m1, m2], None).unwrap();
            prop_assert!(eq.lcuni_margin > 0.0);
            prop_assert!((eq.masses[0] - m1).abs() < 1e-9 * m1);
            prop_assert!((eq.masses[1] - m2).abs() < 1e-9 * m2);
        }
    }
}
