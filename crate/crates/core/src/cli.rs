//! Subcommand orchestration shared by the binary and the integration tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::equilibria::{Case, FlatEquilibrium};
use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::linops::DiscreteLinearization;
use crate::output::{write_csv, write_json, Cell};
use crate::simulator::{growth_rate_estimate, Diagnostics, GrowthFit, RunResult, Simulator, Verdict};
use crate::stability::{self, Classification};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    EosCheck,
    Equilibrium,
    Stability,
    Spectrum,
    Simulate,
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::EosCheck => "eos-check",
            Command::Equilibrium => "equilibrium",
            Command::Stability => "stability",
            Command::Spectrum => "spectrum",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
        }
    }
}

/// `verify` reports failed checks through this flag; every other failure is an `Error`.
pub struct Outcome {
    pub passed: bool,
}

#[derive(Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
}

impl From<&Error> for ErrorReport {
    fn from(e: &Error) -> Self {
        ErrorReport {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

pub fn run_subcommand(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(out)?;
    // A report from an earlier failed run must not survive into this one.
    let _ = std::fs::remove_file(out.join("error.json"));
    match cmd {
        Command::EosCheck => eos_check(cfg, out).map(|p| Outcome { passed: p }),
        Command::Equilibrium => equilibrium(cfg, out).map(|_| Outcome { passed: true }),
        Command::Stability => stability_cmd(cfg, out).map(|_| Outcome { passed: true }),
        Command::Spectrum => spectrum_cmd(cfg, out).map(|_| Outcome { passed: true }),
        Command::Simulate => simulate_cmd(cfg, out).map(|_| Outcome { passed: true }),
        Command::Verify => verify(cfg, out),
    }
}

/// `<param>=<start>:<stop>:<n>` with `n` linearly spaced values.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>)> {
    let bad = || Error::Config(format!("sweep must look like name=start:stop:n, got {spec}"));
    let (name, range) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    let vals = (0..n)
        .map(|i| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 })
        .collect();
    Ok((name.to_string(), vals))
}

/// Runs `cmd` once per sweep value into `out/sweep_NNN`, in parallel, and writes `sweep.csv`.
pub fn run_sweep(cmd: Command, cfg: &ExperimentConfig, out: &Path, spec: &str) -> Result<Outcome> {
    let (name, values) = parse_sweep(spec)?;
    std::fs::create_dir_all(out)?;
    let results: Vec<(f64, String)> = values
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let dir = out.join(format!("sweep_{i:03}"));
            let mut c = cfg.clone();
            let status = c
                .set_param(&name, v)
                .and_then(|_| run_subcommand(cmd, &c, &dir))
                .map(|o| if o.passed { "ok".to_string() } else { "checks_failed".to_string() })
                .unwrap_or_else(|e| {
                    let _ = write_json(&dir.join("error.json"), &ErrorReport::from(&e));
                    e.kind().to_string()
                });
            (v, status)
        })
        .collect();
    let passed = results.iter().all(|(_, s)| s == "ok");
    write_csv(
        &out.join("sweep.csv"),
        &["index", &name, "status"],
        results
            .iter()
            .enumerate()
            .map(|(i, (v, s))| vec![Cell::from(i), Cell::from(*v), Cell::S(s.clone())]),
    )?;
    Ok(Outcome { passed })
}

fn eos_check(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let sys = cfg.system();
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for (phase, name) in [(1, "lower"), (2, "upper")] {
        let sweep = sys.spec(phase).identity_sweep(100)?;
        summary.insert(name, sweep.max_error());
        for i in 0..sweep.rho.len() {
            rows.push(vec![
                Cell::from(name),
                Cell::from(sweep.rho[i]),
                Cell::from(sweep.maxwell_rel_err[i]),
                Cell::from(sweep.capital_phi_rel_err[i]),
            ]);
        }
    }
    write_csv(
        &out.join("eos_check.csv"),
        &["phase", "rho", "maxwell_rel_err", "capital_phi_rel_err"],
        rows,
    )?;
    let passed = summary.values().all(|v| *v < 1e-6);
    #[derive(Serialize)]
    struct Summary<'a> {
        max_rel_err: &'a BTreeMap<&'static str, f64>,
        tolerance: f64,
        passed: bool,
    }
    write_json(
        &out.join("eos_check.json"),
        &Summary { max_rel_err: &summary, tolerance: 1e-6, passed },
    )?;
    Ok(passed)
}

#[derive(Serialize)]
struct EquilibriumReport {
    case: Case,
    a_values: Vec<f64>,
    h: f64,
    p_b: f64,
    pressure_jump: f64,
    rho_minus: f64,
    rho_plus: f64,
    jump_rho: f64,
    rho_bottom: f64,
    rho_top: f64,
    c1: f64,
    c2: f64,
    c: f64,
    masses: [f64; 2],
    det_formula: f64,
    det_lu: f64,
    lcuni_margin: f64,
    lcunii_lhs: f64,
    lcunii_rhs: f64,
    side_condition: f64,
    sigma_star: f64,
    iterations: usize,
    residual: f64,
}

fn equilibrium_report(eq: &FlatEquilibrium, sigma: f64) -> Result<EquilibriumReport> {
    let a_values = match eq.params {
        crate::equilibria::CaseParams::NoPT { a1, a2 } => vec![a1, a2],
        crate::equilibria::CaseParams::PT { a } => vec![a],
    };
    let st = stability::classify(eq, sigma)?;
    Ok(EquilibriumReport {
        case: eq.case,
        a_values,
        h: eq.h,
        p_b: eq.p_b,
        pressure_jump: eq.pressure_jump,
        rho_minus: eq.rho_minus,
        rho_plus: eq.rho_plus,
        jump_rho: eq.jump_rho,
        rho_bottom: eq.rho_bottom,
        rho_top: eq.rho_top,
        c1: eq.c1,
        c2: eq.c2,
        c: eq.c,
        masses: eq.masses,
        det_formula: eq.det_formula,
        det_lu: eq.det_lu,
        lcuni_margin: eq.lcuni_margin,
        lcunii_lhs: eq.lcunii_lhs,
        lcunii_rhs: eq.lcunii_rhs,
        side_condition: eq.side_condition(),
        sigma_star: st.sigma_star,
        iterations: eq.iterations,
        residual: eq.residual,
    })
}

fn equilibrium(cfg: &ExperimentConfig, out: &Path) -> Result<FlatEquilibrium> {
    let eq = cfg.solve_equilibrium()?;
    write_json(&out.join("equilibrium.json"), &equilibrium_report(&eq, cfg.physics.sigma)?)?;
    let prof = eq.profile(cfg.grid.n_below.max(2), cfg.grid.n_above.max(2))?;
    let mut rows = Vec::new();
    for (phase, name) in [(1, "lower"), (2, "upper")] {
        let p = prof.phase(phase);
        for i in 0..p.y.len() {
            rows.push(vec![Cell::from(name), Cell::from(p.y[i]), Cell::from(p.p[i]), Cell::from(p.rho[i])]);
        }
    }
    write_csv(&out.join("profile.csv"), &["phase", "y", "p", "rho"], rows)?;
    Ok(eq)
}

fn linearization(cfg: &ExperimentConfig, eq: &FlatEquilibrium) -> Result<DiscreteLinearization> {
    let grid = Grid::build(&eq.shifted_geometry(), cfg.grid.resolution())?;
    DiscreteLinearization::assemble(eq, &grid, cfg.physics.sigma)
}

#[derive(Serialize)]
struct StabilityOutput {
    report: stability::StabilityReport,
    linops_unstable_count: usize,
    crossing_count: usize,
    lambda_points: usize,
}

fn stability_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<StabilityOutput> {
    let eq = cfg.solve_equilibrium()?;
    let report = stability::classify(&eq, cfg.physics.sigma)?;
    let lin = linearization(cfg, &eq)?;
    let unstable = lin.unstable_count()?;
    let lambdas = stability::default_lambda_grid(cfg.stability.lambda_points);
    let cc = stability::positive_eigenvalue_count_via_ntd(&lin, &eq, &lambdas)?;
    let width = cc.sweep.iter().map(|(_, e)| e.len()).max().unwrap_or(0);
    let mut header = vec!["lambda".to_string()];
    header.extend((0..width).map(|k| format!("eig_{k}")));
    let header_ref: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        &out.join("blambda_sweep.csv"),
        &header_ref,
        cc.sweep.iter().map(|(l, e)| {
            let mut row = vec![Cell::from(*l)];
            row.extend(e.iter().map(|v| Cell::from(*v)));
            row
        }),
    )?;
    let result = StabilityOutput {
        report,
        linops_unstable_count: unstable,
        crossing_count: cc.crossings,
        lambda_points: lambdas.len(),
    };
    write_json(&out.join("stability.json"), &result)?;
    Ok(result)
}

fn spectrum_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let eq = cfg.solve_equilibrium()?;
    let lin = linearization(cfg, &eq)?;
    let sp = lin.spectrum(cfg.spectrum.count, 0.0, false)?;
    write_csv(
        &out.join("spectrum.csv"),
        &["index", "mode", "re", "im", "residual", "identity_residual"],
        sp.pairs.iter().enumerate().map(|(i, p)| {
            vec![
                Cell::from(i),
                Cell::from(p.mode),
                Cell::from(p.re),
                Cell::from(p.im),
                Cell::from(p.residual),
                Cell::from(p.identity_residual),
            ]
        }),
    )?;
    // Interface traces of the leading eigenvectors: h, w⁻ and w⁺ at every G-node.
    let grid = &lin.grid;
    let nb = grid.ny_phase(1) - 1;
    let lead: Vec<_> = sp.pairs.iter().take(4).collect();
    let mut header = vec!["x".to_string(), "y".to_string()];
    for k in 0..lead.len() {
        header.extend([format!("h_{k}"), format!("w_minus_{k}"), format!("w_plus_{k}")]);
    }
    let header_ref: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(
        &out.join("modes.csv"),
        &header_ref,
        (0..grid.n_g()).map(|ig| {
            let (x, y) = grid.g_nodes[ig];
            let mut row = vec![Cell::from(x), Cell::from(y)];
            for p in &lead {
                row.push(Cell::from(p.vector[grid.h_index(ig)]));
                row.push(Cell::from(p.vector[grid.w_index(1, ig, nb)]));
                row.push(Cell::from(p.vector[grid.w_index(2, ig, 0)]));
            }
            row
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SimulationSummary {
    verdict: Verdict,
    steps: usize,
    halvings: usize,
    t_final: f64,
    initial_compatibility: Vec<(String, f64)>,
    final_equilibrium_residual: f64,
    final_laplace_young_residual: f64,
    mass_drift: [f64; 2],
    total_mass_drift: f64,
    growth_fit: Option<GrowthFit>,
    fit_error: Option<String>,
}

struct Simulation {
    sim: Simulator,
    run: RunResult,
    summary: SimulationSummary,
}

fn simulate(cfg: &ExperimentConfig, eq: &FlatEquilibrium) -> Result<Simulation> {
    let mut sim = Simulator::new(eq, cfg.physics.sigma, cfg.grid.resolution())?;
    let init = sim.perturbed_state_modes(&cfg.perturbation_modes())?;
    let compat = sim.validate_initial_state(&init)?;
    let run = sim.run(&init, &cfg.sim_config())?;
    let first = &run.trace[0];
    let last = run.trace.last().expect("trace holds the initial state");
    let drift = |k: usize| (last.masses[k] - first.masses[k]).abs() / first.masses[k];
    let total = |d: &Diagnostics| d.masses[0] + d.masses[1];
    let t: Vec<f64> = run.trace.iter().map(|d| d.t).collect();
    let n: Vec<f64> = run.trace.iter().map(|d| d.h_dev_l2).collect();
    let fit = growth_rate_estimate(&t, &n, sim.cutoff.height_bound());
    let final_ly = sim
        .compatibility_residuals(&run.final_state)?
        .residuals
        .into_iter()
        .find(|(k, _)| k == "laplace_young")
        .map(|(_, v)| v)
        .unwrap_or(f64::NAN);
    let summary = SimulationSummary {
        verdict: run.verdict,
        steps: run.steps,
        halvings: run.halvings,
        t_final: run.final_state.t,
        initial_compatibility: compat.residuals,
        final_equilibrium_residual: sim.equilibrium_residual(&run.final_state)?,
        final_laplace_young_residual: final_ly,
        mass_drift: [drift(0), drift(1)],
        total_mass_drift: (total(last) - total(first)).abs() / total(first),
        fit_error: fit.as_ref().err().map(|e| e.to_string()),
        growth_fit: fit.ok(),
    };
    Ok(Simulation { sim, run, summary })
}

fn simulate_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let eq = cfg.solve_equilibrium()?;
    let s = simulate(cfg, &eq)?;
    write_trace(&out.join("trace.csv"), &s.run.trace)?;
    let grid = &s.sim.grid;
    let snap_dir = out.join("snapshots");
    for (k, st) in s.run.snapshots.iter().enumerate() {
        let mut rows = Vec::new();
        for ph in [1, 2] {
            let y = grid.y_phase(ph);
            for ig in 0..grid.n_g() {
                for (j, yj) in y.iter().enumerate() {
                    rows.push(vec![
                        Cell::from(ph),
                        Cell::from(grid.g_nodes[ig].0),
                        Cell::from(*yj),
                        Cell::from(st.x[grid.w_index(ph, ig, j)]),
                    ]);
                }
            }
        }
        write_csv(&snap_dir.join(format!("fields_{k:05}.csv")), &["phase", "x", "y", "p"], rows)?;
        write_csv(
            &snap_dir.join(format!("height_{k:05}.csv")),
            &["x", "h", "t"],
            (0..grid.n_g()).map(|ig| {
                vec![
                    Cell::from(grid.g_nodes[ig].0),
                    Cell::from(st.x[grid.h_index(ig)]),
                    Cell::from(st.t),
                ]
            }),
        )?;
    }
    write_json(&out.join("verdict.json"), &s.summary)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[Diagnostics]) -> Result<()> {
    write_csv(
        path,
        &["t", "energy", "dissipation", "mass_lower", "mass_upper", "h_dev_l2", "velocity_l2"],
        trace.iter().map(|d| {
            vec![
                Cell::from(d.t),
                Cell::from(d.energy),
                Cell::from(d.dissipation),
                Cell::from(d.masses[0]),
                Cell::from(d.masses[1]),
                Cell::from(d.h_dev_l2),
                Cell::from(d.velocity_l2),
            ]
        }),
    )
}

/// Energy defects of a trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyDefects {
    /// Largest increase rate `max (ΔE/Δt)⁺` after discounting the rounding scale of `E`.
    pub monotonicity: f64,
    /// `∫ |ΔE/Δt − D(t + Δt/2)| dt`, with `D` at the midpoint averaged from the endpoints.
    pub identity_l1: f64,
    /// `∫ |D| dt`, the scale of `identity_l1`.
    pub dissipation_l1: f64,
}

pub fn energy_defects(trace: &[Diagnostics]) -> EnergyDefects {
    let mut mono: f64 = 0.0;
    let mut ident = 0.0;
    let mut diss = 0.0;
    for w in trace.windows(2) {
        let dt = w[1].t - w[0].t;
        let de = w[1].energy - w[0].energy;
        let slack = 4.0 * w[0].energy_roundoff.max(w[1].energy_roundoff);
        mono = mono.max((de - slack).max(0.0) / dt);
        let d = 0.5 * (w[0].dissipation + w[1].dissipation);
        ident += (de / dt - d).abs() * dt;
        diss += d.abs() * dt;
    }
    EnergyDefects {
        monotonicity: mono,
        identity_l1: ident,
        dissipation_l1: diss,
    }
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    value: f64,
    tolerance: f64,
    detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    case: Case,
    sigma: f64,
    checks: Vec<Check>,
    all_passed: bool,
}

fn check(name: &'static str, value: f64, tolerance: f64, detail: String) -> Check {
    Check {
        name,
        passed: value <= tolerance,
        value,
        tolerance,
        detail,
    }
}

fn verify(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let mut checks = Vec::new();
    let passed_eos = eos_check(cfg, out)?;
    checks.push(Check {
        name: "eos_identities",
        passed: passed_eos,
        value: if passed_eos { 0.0 } else { 1.0 },
        tolerance: 0.0,
        detail: "p' = rho phi' and Phi'(p) = 1/rho(p) to 1e-6 over 100 densities per phase".into(),
    });
    let eq = equilibrium(cfg, out)?;
    let mass_err = match eq.case {
        Case::I => {
            let t = cfg.targets.masses.expect("validated");
            ((eq.masses[0] - t[0]) / t[0]).abs().max(((eq.masses[1] - t[1]) / t[1]).abs())
        }
        Case::II => {
            let t = cfg.targets.total.expect("validated");
            ((eq.total_mass() - t) / t).abs()
        }
    };
    checks.push(check("equilibrium_mass_recovery", mass_err, 1e-9, "relative mass mismatch".into()));
    let det_err = ((eq.det_formula - eq.det_lu) / eq.det_lu).abs();
    checks.push(check("determinant_formula", det_err, 1e-8, "closed form vs LU".into()));
    match eq.case {
        Case::I => checks.push(Check {
            name: "lcuni",
            passed: eq.lcuni_margin > 0.0,
            value: eq.lcuni_margin,
            tolerance: 0.0,
            detail: "margin must be positive".into(),
        }),
        Case::II => checks.push(check(
            "lcunii",
            (eq.lcunii_lhs - eq.lcunii_rhs).abs() / eq.lcunii_rhs.abs().max(1e-300),
            1e-8,
            "relative identity residual".into(),
        )),
    }

    let st = stability_cmd(cfg, out)?;
    let morse = st.report.morse_index;
    let agree = morse == Some(st.linops_unstable_count) && st.linops_unstable_count == st.crossing_count;
    checks.push(Check {
        name: "morse_triple_agreement",
        passed: agree,
        value: if agree { 0.0 } else { 1.0 },
        tolerance: 0.0,
        detail: format!(
            "morse_index={morse:?} linops_unstable={} crossings={}",
            st.linops_unstable_count, st.crossing_count
        ),
    });

    spectrum_cmd(cfg, out)?;
    let lin = linearization(cfg, &eq)?;
    // Mass-constrained, so the kernel (where the identity is vacuous) is excluded.
    let sp = lin.spectrum(cfg.spectrum.count, 0.0, true)?;
    checks.push(check("spectrum_realness", sp.realness_defect(cfg.spectrum.count), 1e-8, "max|Im|/max|lambda|".into()));
    let worst_identity = sp.pairs.iter().fold(0.0f64, |m, p| m.max(p.identity_residual));
    checks.push(check("eigenvalue_identity", worst_identity, 1e-6, "worst pair".into()));
    let semi = lin.semisimplicity_check(eq.rho_bottom, eq.rho_top)?;
    checks.push(Check {
        name: "semisimplicity",
        passed: semi.semisimple,
        value: semi.defect,
        tolerance: 0.0,
        detail: format!("kernel dimension {}", semi.kernel_dim),
    });

    let s = simulate(cfg, &eq)?;
    write_trace(&out.join("trace.csv"), &s.run.trace)?;
    write_json(&out.join("verdict.json"), &s.summary)?;
    let mode = cfg.sim.mode;
    let mode_eig = sp
        .pairs
        .iter()
        .filter(|p| p.mode == mode)
        .map(|p| p.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let expected_verdict = match st.report.classification {
        Classification::NormallyStable => Verdict::ConvergedToEquilibrium,
        _ => Verdict::GrowingPerturbation,
    };
    checks.push(Check {
        name: "simulation_verdict",
        passed: s.summary.verdict == expected_verdict,
        value: if s.summary.verdict == expected_verdict { 0.0 } else { 1.0 },
        tolerance: 0.0,
        detail: format!("{:?}, expected {:?}", s.summary.verdict, expected_verdict),
    });
    let (rate_err, rate_detail) = match &s.summary.growth_fit {
        Some(f) => (
            (f.rate - mode_eig).abs() / mode_eig.abs(),
            format!("fitted {:.6e} vs eigenvalue {:.6e} of mode {mode}", f.rate, mode_eig),
        ),
        None => (f64::INFINITY, s.summary.fit_error.clone().unwrap_or_default()),
    };
    checks.push(check("simulation_rate_vs_eigenvalue", rate_err, 0.1, rate_detail));
    let mass_drift = match eq.case {
        Case::I => s.summary.mass_drift[0].max(s.summary.mass_drift[1]),
        Case::II => s.summary.total_mass_drift,
    };
    checks.push(check("mass_conservation", mass_drift, 1e-8, "relative drift over the run".into()));
    let defects = energy_defects(&s.run.trace);
    checks.push(check(
        "energy_monotonicity",
        defects.monotonicity,
        0.0,
        "largest energy increase rate beyond rounding".into(),
    ));
    checks.push(check(
        "dissipation_identity",
        defects.identity_l1 / defects.dissipation_l1.max(f64::MIN_POSITIVE),
        0.05,
        "L1-in-time |dE/dt - D| relative to L1 |D|".into(),
    ));

    let all_passed = checks.iter().all(|c| c.passed);
    write_json(
        &out.join("verify_report.json"),
        &VerifyReport {
            case: eq.case,
            sigma: cfg.physics.sigma,
            checks,
            all_passed,
        },
    )?;
    Ok(Outcome { passed: all_passed })
}

/// Output directory: `--out`, else `VERIGIN_OUT`, else `./out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("VERIGIN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Applies `--case`, deriving the missing mass targets from the ones given.
pub fn override_case(cfg: &mut ExperimentConfig, case: Case) -> Result<()> {
    if cfg.case == case {
        return Ok(());
    }
    match case {
        Case::II => {
            if cfg.targets.total.is_none() {
                cfg.targets.total = cfg.targets.masses.map(|m| m[0] + m[1]);
            }
        }
        Case::I => {
            if cfg.targets.masses.is_none() {
                return Err(Error::Config("--case i needs targets.masses in the config".into()));
            }
        }
    }
    cfg.case = case;
    cfg.validate()
}
