//! Experiment configuration: a single TOML file, validated on load.
//!
//! ```toml
//! case = "i"
//! seed = 7
//!
//! [eos.lower]
//! family = "ideal_gas"
//! r_theta = 2.0
//! rho_min = 1e-8
//! rho_max = 1e8
//! k = 1.0
//!
//! [eos.upper]
//! family = "affine"
//! c2 = 4.0
//! rho_ref = 1.0
//! p_ref = 1.0
//! rho_min = 0.8
//! rho_max = 10.0
//! k = 0.7
//!
//! [geometry]
//! cross_section = "interval"
//! l = 1.0
//! h_lower = 1.0
//! h_upper = 1.0
//!
//! [physics]
//! gamma = 1.0
//! sigma = 0.1
//!
//! [targets]
//! masses = [0.45, 1.0]   # case (i); case (ii) uses `total = 1.5`
//! ```
//!
//! `[grid]`, `[sim]`, `[spectrum]` and `[stability]` are optional with the defaults below.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eos::FreeEnergySpec;
use crate::equilibria::{Case, FlatEquilibrium, TwoPhaseSystem};
use crate::error::{Error, Result};
use crate::geometry::{CapillaryGeometry, Resolution};
use crate::simulator::{Scheme, SimConfig};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum EosConfig {
    IdealGas {
        r_theta: f64,
        rho_min: f64,
        rho_max: f64,
        k: f64,
    },
    Affine {
        c2: f64,
        rho_ref: f64,
        p_ref: f64,
        rho_min: f64,
        rho_max: f64,
        k: f64,
    },
}

impl EosConfig {
    pub fn build(&self) -> FreeEnergySpec {
        match *self {
            EosConfig::IdealGas { r_theta, rho_min, rho_max, k } => FreeEnergySpec::ideal_gas(r_theta, rho_min, rho_max, k),
            EosConfig::Affine { c2, rho_ref, p_ref, rho_min, rho_max, k } => {
                FreeEnergySpec::affine(c2, rho_ref, p_ref, rho_min, rho_max, k)
            }
        }
    }

    fn positive_fields(&self) -> Vec<(&'static str, f64)> {
        match *self {
            EosConfig::IdealGas { r_theta, rho_max, k, .. } => vec![("r_theta", r_theta), ("rho_max", rho_max), ("k", k)],
            EosConfig::Affine { c2, rho_ref, p_ref, rho_max, k, .. } => {
                vec![("c2", c2), ("rho_ref", rho_ref), ("p_ref", p_ref), ("rho_max", rho_max), ("k", k)]
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EosPair {
    pub lower: EosConfig,
    pub upper: EosConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "cross_section", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    Interval { l: f64, h_lower: f64, h_upper: f64 },
    Rectangle { l1: f64, l2: f64, h_lower: f64, h_upper: f64 },
}

impl GeometryConfig {
    pub fn build(&self) -> CapillaryGeometry {
        match *self {
            GeometryConfig::Interval { l, h_lower, h_upper } => CapillaryGeometry::interval(l, h_lower, h_upper),
            GeometryConfig::Rectangle { l1, l2, h_lower, h_upper } => CapillaryGeometry::rectangle(l1, l2, h_lower, h_upper),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub gamma: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsConfig {
    /// Phase masses `[M₁, M₂]` for case (i).
    pub masses: Option<[f64; 2]>,
    /// Total mass for case (ii).
    pub total: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny_cross: usize,
    pub n_below: usize,
    pub n_above: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { nx: 32, ny_cross: 0, n_below: 16, n_above: 16 }
    }
}

impl GridConfig {
    pub fn resolution(&self) -> Resolution {
        Resolution {
            nx: self.nx,
            ny_cross: self.ny_cross,
            n_below: self.n_below,
            n_above: self.n_above,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub t_end: f64,
    pub mode: usize,
    pub amplitude: f64,
    /// Side modes `n ≤ 4, n ≠ mode` get seeded amplitudes up to this fraction of `amplitude`.
    pub side_mode_fraction: f64,
    pub output_every: usize,
    pub stall_tol: f64,
    pub newton_tol: f64,
    pub max_halvings: u32,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        SimSection {
            dt: d.dt,
            t_end: d.t_end,
            mode: d.mode,
            amplitude: d.amplitude,
            side_mode_fraction: 0.0,
            output_every: d.output_every,
            stall_tol: d.stall_tol,
            newton_tol: d.newton_tol,
            max_halvings: d.max_halvings,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub count: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection { count: 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    /// Log-spaced λ points in `[10⁻⁶, 10⁶]`, after `λ = 0`.
    pub lambda_points: usize,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection { lambda_points: 49 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: Case,
    #[serde(default)]
    pub seed: u64,
    pub eos: EosPair,
    pub geometry: GeometryConfig,
    pub physics: PhysicsConfig,
    pub targets: TargetsConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
    #[serde(default)]
    pub stability: StabilitySection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: String, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        for (phase, e) in [("eos.lower", &self.eos.lower), ("eos.upper", &self.eos.upper)] {
            for (f, v) in e.positive_fields() {
                positive(format!("{phase}.{f}"), v)?;
            }
        }
        match self.geometry {
            GeometryConfig::Interval { l, h_lower, h_upper } => {
                positive("geometry.l".into(), l)?;
                positive("geometry.h_lower".into(), h_lower)?;
                positive("geometry.h_upper".into(), h_upper)?;
            }
            GeometryConfig::Rectangle { l1, l2, h_lower, h_upper } => {
                positive("geometry.l1".into(), l1)?;
                positive("geometry.l2".into(), l2)?;
                positive("geometry.h_lower".into(), h_lower)?;
                positive("geometry.h_upper".into(), h_upper)?;
            }
        }
        if !(self.physics.gamma >= 0.0 && self.physics.gamma.is_finite()) {
            return Err(Error::Config(format!("physics.gamma must be nonnegative, got {}", self.physics.gamma)));
        }
        positive("physics.sigma".into(), self.physics.sigma)?;
        match self.case {
            Case::I => {
                let m = self
                    .targets
                    .masses
                    .ok_or_else(|| Error::Config("targets.masses is required for case i".into()))?;
                positive("targets.masses[0]".into(), m[0])?;
                positive("targets.masses[1]".into(), m[1])?;
            }
            Case::II => {
                let m = self
                    .targets
                    .total
                    .ok_or_else(|| Error::Config("targets.total is required for case ii".into()))?;
                positive("targets.total".into(), m)?;
                if self.eos.lower == self.eos.upper {
                    return Err(Error::Config(
                        "eos: case ii needs distinct phase laws (identical specs force [[rho]] = 0)".into(),
                    ));
                }
            }
        }
        positive("sim.dt".into(), self.sim.dt)?;
        positive("sim.t_end".into(), self.sim.t_end)?;
        if !(self.sim.amplitude >= 0.0) {
            return Err(Error::Config("sim.amplitude must be nonnegative".into()));
        }
        if self.spectrum.count == 0 {
            return Err(Error::Config("spectrum.count must be positive".into()));
        }
        if self.stability.lambda_points < 2 {
            return Err(Error::Config("stability.lambda_points must be at least 2".into()));
        }
        Ok(())
    }

    pub fn system(&self) -> TwoPhaseSystem {
        TwoPhaseSystem {
            lower: self.eos.lower.build(),
            upper: self.eos.upper.build(),
            gamma: self.physics.gamma,
            geom: self.geometry.build(),
        }
    }

    pub fn solve_equilibrium(&self) -> Result<FlatEquilibrium> {
        let sys = self.system();
        match self.case {
            Case::I => sys.solve_flat_equilibrium_i(self.targets.masses.expect("validated"), None),
            Case::II => sys.solve_flat_equilibrium_ii(self.targets.total.expect("validated"), None),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.sim.dt,
            t_end: self.sim.t_end,
            scheme: Scheme::BackwardEuler,
            mode: self.sim.mode,
            amplitude: self.sim.amplitude,
            output_every: self.sim.output_every,
            stall_tol: self.sim.stall_tol,
            newton_tol: self.sim.newton_tol,
            max_halvings: self.sim.max_halvings,
            ..SimConfig::default()
        }
    }

    /// `(n, ε_n)` of the initial height: the configured mode plus seeded side modes.
    pub fn perturbation_modes(&self) -> Vec<(usize, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut modes = vec![(self.sim.mode, self.sim.amplitude)];
        for n in 1..=4 {
            let u: f64 = rng.gen_range(-1.0..1.0);
            if n != self.sim.mode && self.sim.side_mode_fraction > 0.0 {
                modes.push((n, self.sim.side_mode_fraction * self.sim.amplitude * u));
            }
        }
        modes
    }

    /// Sets a numeric parameter by name, for sweeps.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "sigma" => self.physics.sigma = value,
            "gamma" => self.physics.gamma = value,
            "amplitude" => self.sim.amplitude = value,
            "dt" => self.sim.dt = value,
            "t_end" => self.sim.t_end = value,
            "total" => self.targets.total = Some(value),
            "mass_lower" | "mass_upper" => {
                let mut m = self
                    .targets
                    .masses
                    .ok_or_else(|| Error::Config(format!("sweep parameter {name} needs targets.masses")))?;
                m[usize::from(name == "mass_upper")] = value;
                self.targets.masses = Some(m);
            }
            _ => return Err(Error::Config(format!("unknown sweep parameter {name}"))),
        }
        self.validate()
    }
}
