//! Per-phase thermodynamics.
//!
//! Conventions: `p = ρ²ψ′(ρ)`, `φ(ρ) = ψ + ρψ′`, so `p′ = ρφ′`. The pressure potential
//! `Φ(p) = ∫₁^p ds/ρ(s)` is named with a capital letter to keep it apart from `φ(ρ)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{adaptive_simpson, safeguarded_newton};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User supplied free energy with its first two derivatives.
#[derive(Clone)]
pub struct CustomEnergy {
    pub psi: ScalarFn,
    pub dpsi: ScalarFn,
    pub d2psi: ScalarFn,
}

#[derive(Clone)]
pub enum Family {
    /// `ψ = Rθ ln ρ`, hence `p = Rθ ρ`.
    IdealGas { r_theta: f64 },
    /// `p = c²(ρ − ρ_ref) + p_ref`, realised by `ψ = c² ln ρ − B/ρ` with `B = p_ref − c²ρ_ref`.
    AffineCompressible { c2: f64, rho_ref: f64, p_ref: f64 },
    Custom(CustomEnergy),
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::IdealGas { r_theta } => write!(f, "IdealGas {{ r_theta: {r_theta} }}"),
            Family::AffineCompressible { c2, rho_ref, p_ref } => write!(
                f,
                "AffineCompressible {{ c2: {c2}, rho_ref: {rho_ref}, p_ref: {p_ref} }}"
            ),
            Family::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FreeEnergySpec {
    pub family: Family,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Darcy mobility of the phase.
    pub k: f64,
}

const INVERT_RTOL: f64 = 1e-12;
const INVERT_MAX_ITER: usize = 100;
const CUSTOM_QUAD_TOL: f64 = 1e-12;
const CUSTOM_SAMPLES: usize = 200;

/// Inverts an increasing function `f` with derivative `df` on `[lo, hi]`.
///
/// Used for custom energies and as an independent check of the closed-form inverses.
pub fn invert_monotone<F, D>(f: F, df: D, target: f64, lo: f64, hi: f64) -> Option<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    // Newton from the midpoint of the log-bracket converges fastest for power-like laws.
    let x0 = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
    safeguarded_newton(
        |x| (f(x) - target, df(x)),
        lo,
        hi,
        x0,
        INVERT_RTOL * 1e-2,
        INVERT_MAX_ITER,
    )
}

impl FreeEnergySpec {
    pub fn ideal_gas(r_theta: f64, rho_min: f64, rho_max: f64, k: f64) -> Self {
        FreeEnergySpec {
            family: Family::IdealGas { r_theta },
            rho_min,
            rho_max,
            k,
        }
    }

    pub fn affine(c2: f64, rho_ref: f64, p_ref: f64, rho_min: f64, rho_max: f64, k: f64) -> Self {
        FreeEnergySpec {
            family: Family::AffineCompressible { c2, rho_ref, p_ref },
            rho_min,
            rho_max,
            k,
        }
    }

    pub fn custom(energy: CustomEnergy, rho_min: f64, rho_max: f64, k: f64) -> Self {
        FreeEnergySpec {
            family: Family::Custom(energy),
            rho_min,
            rho_max,
            k,
        }
    }

    /// Checks the standing assumptions `ψ′ > 0`, `φ′ > 0` on the density interval and `k > 0`.
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_max > self.rho_min && self.rho_max.is_finite()) {
            return Err(Error::Config(format!(
                "density interval ({}, {}) must satisfy 0 < rho_min < rho_max < inf",
                self.rho_min, self.rho_max
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("permeability k={} must be positive", self.k)));
        }
        match &self.family {
            Family::IdealGas { r_theta } => {
                if !(*r_theta > 0.0) {
                    return Err(Error::Config(format!("r_theta={r_theta} must be positive")));
                }
            }
            Family::AffineCompressible { c2, .. } => {
                if !(*c2 > 0.0) {
                    return Err(Error::Config(format!("c2={c2} must be positive")));
                }
                // ψ′ = p/ρ² so positivity of ψ′ is positivity of the pressure at rho_min.
                if self.p_unchecked(self.rho_min) <= 0.0 {
                    return Err(Error::Config(format!(
                        "affine law gives nonpositive pressure {} at rho_min",
                        self.p_unchecked(self.rho_min)
                    )));
                }
            }
            Family::Custom(_) => {
                for i in 0..=CUSTOM_SAMPLES {
                    let t = i as f64 / CUSTOM_SAMPLES as f64;
                    let rho = self.rho_min * (self.rho_max / self.rho_min).powf(t);
                    if !(self.dpsi(rho) > 0.0) || !(self.dphi_unchecked(rho) > 0.0) {
                        return Err(Error::Config(format!(
                            "custom energy violates psi'>0, phi'>0 at rho={rho}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn affine_b(&self) -> f64 {
        match self.family {
            Family::AffineCompressible { c2, rho_ref, p_ref } => p_ref - c2 * rho_ref,
            _ => unreachable!("affine_b on non-affine family"),
        }
    }

    fn check_rho(&self, rho: f64) -> Result<()> {
        if rho >= self.rho_min && rho <= self.rho_max {
            Ok(())
        } else {
            Err(Error::Domain {
                rho,
                min: self.rho_min,
                max: self.rho_max,
            })
        }
    }

    pub fn psi(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => r_theta * rho.ln(),
            Family::AffineCompressible { c2, .. } => c2 * rho.ln() - self.affine_b() / rho,
            Family::Custom(c) => (c.psi)(rho),
        }
    }

    pub fn dpsi(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => r_theta / rho,
            Family::AffineCompressible { c2, .. } => c2 / rho + self.affine_b() / (rho * rho),
            Family::Custom(c) => (c.dpsi)(rho),
        }
    }

    pub fn d2psi(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => -r_theta / (rho * rho),
            Family::AffineCompressible { c2, .. } => {
                -c2 / (rho * rho) - 2.0 * self.affine_b() / (rho * rho * rho)
            }
            Family::Custom(c) => (c.d2psi)(rho),
        }
    }

    /// `p(ρ)` without the interval check; callers guarantee the domain.
    pub fn p_unchecked(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => r_theta * rho,
            Family::AffineCompressible { c2, rho_ref, p_ref } => c2 * (rho - rho_ref) + p_ref,
            Family::Custom(_) => rho * rho * self.dpsi(rho),
        }
    }

    /// `p′(ρ) = ρφ′(ρ)`.
    pub fn dp_unchecked(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => *r_theta,
            Family::AffineCompressible { c2, .. } => *c2,
            Family::Custom(_) => 2.0 * rho * self.dpsi(rho) + rho * rho * self.d2psi(rho),
        }
    }

    pub fn phi_unchecked(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => r_theta * (rho.ln() + 1.0),
            Family::AffineCompressible { c2, .. } => c2 * (rho.ln() + 1.0),
            Family::Custom(_) => self.psi(rho) + rho * self.dpsi(rho),
        }
    }

    /// `φ′(ρ) = 2ψ′ + ρψ″`.
    pub fn dphi_unchecked(&self, rho: f64) -> f64 {
        match &self.family {
            Family::IdealGas { r_theta } => r_theta / rho,
            Family::AffineCompressible { c2, .. } => c2 / rho,
            Family::Custom(_) => 2.0 * self.dpsi(rho) + rho * self.d2psi(rho),
        }
    }

    pub fn pressure_from_density(&self, rho: f64) -> Result<f64> {
        self.check_rho(rho)?;
        Ok(self.p_unchecked(rho))
    }

    pub fn phi_of_density(&self, rho: f64) -> Result<f64> {
        self.check_rho(rho)?;
        Ok(self.phi_unchecked(rho))
    }

    /// Attainable pressures `[p(ρ_min), p(ρ_max)]`.
    pub fn pressure_range(&self) -> (f64, f64) {
        (self.p_unchecked(self.rho_min), self.p_unchecked(self.rho_max))
    }

    /// Image of `φ` over the density interval.
    pub fn phi_range(&self) -> (f64, f64) {
        (self.phi_unchecked(self.rho_min), self.phi_unchecked(self.rho_max))
    }

    fn check_p(&self, p: f64) -> Result<()> {
        let (min, max) = self.pressure_range();
        if p >= min && p <= max {
            Ok(())
        } else {
            Err(Error::Range { p, min, max })
        }
    }

    pub fn density_from_pressure(&self, p: f64) -> Result<f64> {
        self.check_p(p)?;
        let rho = match &self.family {
            Family::IdealGas { r_theta } => p / r_theta,
            Family::AffineCompressible { c2, .. } => (p - self.affine_b()) / c2,
            Family::Custom(_) => self.numeric_density(p)?,
        };
        Ok(rho.clamp(self.rho_min, self.rho_max))
    }

    /// Density by monotone root finding regardless of family.
    pub fn numeric_density(&self, p: f64) -> Result<f64> {
        self.check_p(p)?;
        invert_monotone(
            |r| self.p_unchecked(r),
            |r| self.dp_unchecked(r),
            p,
            self.rho_min,
            self.rho_max,
        )
        .ok_or_else(|| Error::NoConvergence {
            what: format!("density_from_pressure(p={p})"),
            iterations: INVERT_MAX_ITER,
            residual: f64::NAN,
        })
    }

    /// `dρ/dp = 1/(ρφ′(ρ))` at pressure `p`.
    pub fn drho_dp(&self, p: f64) -> Result<f64> {
        let rho = self.density_from_pressure(p)?;
        Ok(1.0 / self.dp_unchecked(rho))
    }

    /// Density with `φ(ρ) = a`.
    pub fn inverse_phi(&self, a: f64) -> Result<f64> {
        let (min, max) = self.phi_range();
        if !(a >= min && a <= max) {
            return Err(Error::Range { p: a, min, max });
        }
        let rho = match &self.family {
            Family::IdealGas { r_theta } => (a / r_theta - 1.0).exp(),
            Family::AffineCompressible { c2, .. } => (a / c2 - 1.0).exp(),
            Family::Custom(_) => self.numeric_inverse_phi(a)?,
        };
        Ok(rho.clamp(self.rho_min, self.rho_max))
    }

    pub fn numeric_inverse_phi(&self, a: f64) -> Result<f64> {
        invert_monotone(
            |r| self.phi_unchecked(r),
            |r| self.dphi_unchecked(r),
            a,
            self.rho_min,
            self.rho_max,
        )
        .ok_or_else(|| Error::NoConvergence {
            what: format!("inverse_phi(a={a})"),
            iterations: INVERT_MAX_ITER,
            residual: f64::NAN,
        })
    }

    /// `Φ(p) = ∫₁^p ds/ρ(s)`. Needs `p = 1` attainable.
    pub fn capital_phi_of_pressure(&self, p: f64) -> Result<f64> {
        self.check_p(p)?;
        self.check_p(1.0)?;
        Ok(match &self.family {
            Family::IdealGas { r_theta } => r_theta * p.ln(),
            Family::AffineCompressible { c2, .. } => {
                let b = self.affine_b();
                c2 * ((p - b) / (1.0 - b)).ln()
            }
            Family::Custom(_) => self.quadrature_capital_phi(p)?,
        })
    }

    /// `Φ` by adaptive quadrature of `1/ρ(s)`, independent of any closed form.
    pub fn quadrature_capital_phi(&self, p: f64) -> Result<f64> {
        self.check_p(p)?;
        self.check_p(1.0)?;
        let inv_rho = |s: f64| match self.numeric_density(s) {
            Ok(r) => 1.0 / r,
            Err(_) => f64::NAN,
        };
        let v = adaptive_simpson(&inv_rho, 1.0, p, CUSTOM_QUAD_TOL);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NoConvergence {
                what: format!("capital_phi quadrature at p={p}"),
                iterations: 0,
                residual: f64::NAN,
            })
        }
    }

    /// Image of `Φ` over the attainable pressures.
    pub fn capital_phi_range(&self) -> Result<(f64, f64)> {
        let (pmin, pmax) = self.pressure_range();
        Ok((
            self.capital_phi_of_pressure(pmin)?,
            self.capital_phi_of_pressure(pmax)?,
        ))
    }

    /// Pressure with `Φ(p) = a`.
    pub fn inverse_capital_phi(&self, a: f64) -> Result<f64> {
        let (min, max) = self.capital_phi_range()?;
        if !(a >= min && a <= max) {
            return Err(Error::Range { p: a, min, max });
        }
        let (pmin, pmax) = self.pressure_range();
        let p = match &self.family {
            Family::IdealGas { r_theta } => (a / r_theta).exp(),
            Family::AffineCompressible { c2, .. } => {
                let b = self.affine_b();
                b + (1.0 - b) * (a / c2).exp()
            }
            Family::Custom(_) => invert_monotone(
                |p| self.quadrature_capital_phi(p).unwrap_or(f64::NAN),
                |p| 1.0 / self.numeric_density(p).unwrap_or(f64::NAN),
                a,
                pmin,
                pmax,
            )
            .ok_or_else(|| Error::NoConvergence {
                what: format!("inverse_capital_phi(a={a})"),
                iterations: INVERT_MAX_ITER,
                residual: f64::NAN,
            })?,
        };
        Ok(p.clamp(pmin, pmax))
    }

    /// Central-difference check of `p′ = ρφ′` and `Φ′(p) = 1/ρ(p)` at `n` log-spaced densities
    /// inside the admissible interval (clipped to `[10⁻³, 10³]`).
    pub fn identity_sweep(&self, n: usize) -> Result<IdentitySweep> {
        let lo = self.rho_min.max(1e-3) * 1.01;
        let hi = self.rho_max.min(1e3) * 0.99;
        let mut out = IdentitySweep {
            rho: Vec::with_capacity(n),
            maxwell_rel_err: Vec::with_capacity(n),
            capital_phi_rel_err: Vec::with_capacity(n),
        };
        for rho in crate::numerics::logspace(lo, hi, n) {
            let e = 1e-5 * rho;
            let dp = (self.p_unchecked(rho + e) - self.p_unchecked(rho - e)) / (2.0 * e);
            let rhs = rho * self.dphi_unchecked(rho);
            let p = self.pressure_from_density(rho)?;
            let ep = 1e-5 * p;
            let dphi_cap = (self.capital_phi_of_pressure(p + ep)? - self.capital_phi_of_pressure(p - ep)?) / (2.0 * ep);
            let inv = 1.0 / self.density_from_pressure(p)?;
            out.rho.push(rho);
            out.maxwell_rel_err.push((dp - rhs).abs() / dp.abs().max(f64::MIN_POSITIVE));
            out.capital_phi_rel_err.push((dphi_cap - inv).abs() / inv);
        }
        Ok(out)
    }
}

/// Pointwise relative errors of the two thermodynamic identities along a density sweep.
#[derive(Clone, Debug, serde::Serialize)]
pub struct IdentitySweep {
    pub rho: Vec<f64>,
    pub maxwell_rel_err: Vec<f64>,
    pub capital_phi_rel_err: Vec<f64>,
}

impl IdentitySweep {
    pub fn max_error(&self) -> f64 {
        self.maxwell_rel_err
            .iter()
            .chain(&self.capital_phi_rel_err)
            .fold(0.0f64, |m, v| m.max(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gas(r: f64) -> FreeEnergySpec {
        FreeEnergySpec::ideal_gas(r, 1e-6, 1e6, 1.0)
    }

    fn affine() -> FreeEnergySpec {
        FreeEnergySpec::affine(4.0, 1.0, 1.0, 0.8, 10.0, 1.0)
    }

    fn custom_linear_psi() -> FreeEnergySpec {
        FreeEnergySpec::custom(
            CustomEnergy {
                psi: Arc::new(|r| r),
                dpsi: Arc::new(|_| 1.0),
                d2psi: Arc::new(|_| 0.0),
            },
            0.1,
            10.0,
            1.0,
        )
    }

    /// Custom energy reproducing the ideal gas with Rθ = 1.
    fn custom_gas() -> FreeEnergySpec {
        FreeEnergySpec::custom(
            CustomEnergy {
                psi: Arc::new(|r: f64| r.ln()),
                dpsi: Arc::new(|r| 1.0 / r),
                d2psi: Arc::new(|r| -1.0 / (r * r)),
            },
            1e-3,
            1e3,
            1.0,
        )
    }

    #[test]
    fn pressure_examples() {
        assert_eq!(gas(1.0).pressure_from_density(2.0).unwrap(), 2.0);
        assert_eq!(affine().pressure_from_density(1.0).unwrap(), 1.0);
        assert_eq!(custom_linear_psi().pressure_from_density(3.0).unwrap(), 9.0);
    }

    #[test]
    fn density_examples() {
        assert_eq!(gas(2.0).density_from_pressure(6.0).unwrap(), 3.0);
        assert!((affine().density_from_pressure(5.0).unwrap() - 2.0).abs() < 1e-15);
        let c = custom_linear_psi();
        assert!((c.density_from_pressure(9.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(gas(1.0).phi_of_density(1.0).unwrap(), 1.0);
        assert!((gas(2.0).phi_of_density(std::f64::consts::E).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn capital_phi_examples() {
        let e = std::f64::consts::E;
        assert!((gas(1.0).capital_phi_of_pressure(e).unwrap() - 1.0).abs() < 1e-15);
        for s in [gas(1.0), gas(3.0), affine(), custom_gas()] {
            assert_eq!(s.capital_phi_of_pressure(1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn custom_quadrature_matches_ln_p() {
        let c = custom_gas();
        for i in 0..20 {
            let p = 0.5 + 9.5 * i as f64 / 19.0;
            let q = c.capital_phi_of_pressure(p).unwrap();
            assert!((q - p.ln()).abs() < 1e-10, "p={p} quad={q} ln={}", p.ln());
        }
    }

    #[test]
    fn capital_phi_equals_phi_difference() {
        // dΦ = dp/ρ = φ′dρ, so Φ(p) = φ(ρ(p)) − φ(ρ(1)).
        for s in [gas(0.7), affine(), custom_gas()] {
            let r1 = s.density_from_pressure(1.0).unwrap();
            for p in [1.5, 2.0, 4.0, 7.5] {
                let r = s.density_from_pressure(p).unwrap();
                let lhs = s.capital_phi_of_pressure(p).unwrap();
                let rhs = s.phi_unchecked(r) - s.phi_unchecked(r1);
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn closed_form_inverses_match_numeric_inverter() {
        for s in [gas(1.3), affine()] {
            let (pmin, pmax) = s.pressure_range();
            for i in 0..50 {
                let p = pmin + (pmax.min(50.0) - pmin) * (i as f64 + 0.5) / 50.0;
                let a = s.density_from_pressure(p).unwrap();
                let b = s.numeric_density(p).unwrap();
                assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
                let ph = s.phi_unchecked(a);
                let c = s.numeric_inverse_phi(ph).unwrap();
                assert!((a - c).abs() <= 1e-12 * a);
            }
        }
    }

    #[test]
    fn inverse_capital_phi_roundtrip() {
        for s in [gas(2.0), affine(), custom_gas()] {
            for p in [1.2, 3.0, 6.0] {
                let a = s.capital_phi_of_pressure(p).unwrap();
                let q = s.inverse_capital_phi(a).unwrap();
                assert!((p - q).abs() < 1e-10 * p, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn domain_and_range_errors() {
        let s = gas(1.0);
        assert!(matches!(s.pressure_from_density(0.0), Err(Error::Domain { .. })));
        assert!(matches!(s.density_from_pressure(1e7), Err(Error::Range { .. })));
        let narrow = FreeEnergySpec::ideal_gas(1.0, 2.0, 3.0, 1.0);
        assert!(matches!(narrow.capital_phi_of_pressure(2.5), Err(Error::Range { .. })));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(FreeEnergySpec::ideal_gas(-1.0, 0.1, 1.0, 1.0).validate().is_err());
        assert!(FreeEnergySpec::ideal_gas(1.0, 0.1, 1.0, 0.0).validate().is_err());
        // B = 1 − 4·1 = −3 makes p(0.5) = −1.
        assert!(FreeEnergySpec::affine(4.0, 1.0, 1.0, 0.5, 2.0, 1.0).validate().is_err());
        assert!(affine().validate().is_ok());
        assert!(custom_gas().validate().is_ok());
    }

    fn families() -> Vec<FreeEnergySpec> {
        vec![gas(0.5), gas(2.0), affine(), custom_gas()]
    }

    #[test]
    fn identity_sweep_is_tight_for_builtin_families() {
        for s in [gas(0.5), gas(2.0), affine()] {
            let sweep = s.identity_sweep(100).unwrap();
            assert_eq!(sweep.rho.len(), 100);
            assert!(sweep.max_error() < 1e-6, "max error {}", sweep.max_error());
        }
    }

    proptest! {
        #[test]
        fn pressure_is_monotone(fam in 0usize..4, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let s = &families()[fam];
            prop_assume!(t1 != t2);
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let span = s.rho_max.min(50.0) - s.rho_min;
            let r1 = s.rho_min + span * lo;
            let r2 = s.rho_min + span * hi;
            prop_assume!(r1 < r2);
            prop_assert!(s.pressure_from_density(r1).unwrap() < s.pressure_from_density(r2).unwrap());
        }

        #[test]
        fn inverse_pair(fam in 0usize..4, t in 0.0f64..1.0) {
            let s = &families()[fam];
            let rho = s.rho_min.max(0.01) + (s.rho_max.min(100.0) - s.rho_min.max(0.01)) * t;
            let back = s.density_from_pressure(s.pressure_from_density(rho).unwrap()).unwrap();
            prop_assert!((back - rho).abs() <= 1e-10 * rho);
        }

        #[test]
        fn dp_equals_rho_dphi(fam in 0usize..4, t in 0.0f64..1.0) {
            let s = &families()[fam];
            let rho = 1.0 + 5.0 * t;
            let eps = 1e-5;
            let dp = (s.p_unchecked(rho + eps) - s.p_unchecked(rho - eps)) / (2.0 * eps);
            let dphi = (s.phi_unchecked(rho + eps) - s.phi_unchecked(rho - eps)) / (2.0 * eps);
            prop_assert!((dp - rho * dphi).abs() <= 1e-6 * dp.abs());
        }

        #[test]
        fn capital_phi_derivative_is_inverse_density(fam in 0usize..3, t in 0.0f64..1.0) {
            let s = &families()[fam];
            let p = 1.5 + 5.0 * t;
            let eps = 1e-5;
            let d = (s.capital_phi_of_pressure(p + eps).unwrap() - s.capital_phi_of_pressure(p - eps).unwrap()) / (2.0 * eps);
            let inv = 1.0 / s.density_from_pressure(p).unwrap();
            prop_assert!((d - inv).abs() <= 1e-6 * inv);
        }
    }
}
