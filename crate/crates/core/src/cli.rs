//! Experiment configuration, run directories and the `simulate`,
//! `optimize`, `verify` and `spectrum` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{duality_check, fd_directional, DualityMode, DualitySetup, RegressionSpec};
use crate::control::{
    constants_report, fit_c0, gronwall_rate, optimize_pgd, AdmissibleSet, ConstantFits,
    ConstantsLedger, ControlPair, CostWeights, PgdOptions, PgdProblem, Target,
};
use crate::dynamics::{
    control_norms, exp_integrability_stats, forward_ensemble, gateaux_check, sample_paths,
    weight_path, BrownianPath, ForwardTrajectory, Problem, ProblemSpec, WeightConstants,
    WeightKind,
};
use crate::error::{Error, Result};
use crate::geometry::{enforce_compatibility, BoundaryMesh};
use crate::noise::{validate_assumptions, NoiseSpec};
use crate::operators::lifting::solve_lifting;
use crate::operators::{gram_defects, inequality_constants, spmv, spmv_t};
use crate::stats::loglog_slope;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;

/// Process exit status for a failed subcommand.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::BlowUp { .. } => EXIT_BLOWUP,
        _ => EXIT_CONFIG,
    }
}

/// One sine term `amplitude sin(2 pi frequency s / P + phase) (1 + time_rate t)`
/// in the normalized arclength `s / P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub time_rate: f64,
}

impl Harmonic {
    fn eval(&self, s: f64, t: f64) -> f64 {
        self.amplitude
            * (std::f64::consts::TAU * self.frequency * s + self.phase).sin()
            * (1.0 + self.time_rate * t)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlInit {
    #[default]
    Zero,
    Harmonic {
        #[serde(default)]
        a: Vec<Harmonic>,
        #[serde(default)]
        b: Vec<Harmonic>,
    },
    /// A `controls_final.json` written by `optimize`.
    File { path: PathBuf },
}

/// One term `amplitude cos(pi kx x + phase_x) cos(pi ky y + phase_y) (1 + time_rate t)`
/// of velocity component `component`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldTerm {
    pub component: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub kx: f64,
    #[serde(default)]
    pub ky: f64,
    #[serde(default)]
    pub phase_x: f64,
    #[serde(default)]
    pub phase_y: f64,
    #[serde(default)]
    pub time_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetSpec {
    #[default]
    Zero,
    Analytic {
        terms: Vec<FieldTerm>,
    },
    /// States driven by a known control on the same Brownian paths.
    Control {
        control: ControlInit,
    },
    /// States driven by the controls stored in a previous run.
    Recorded {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InitialState {
    #[default]
    Zero,
    Coefficients {
        values: Vec<f64>,
    },
    /// `c_i = amplitude / (1 + i)`.
    Decay {
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub bound: f64,
    #[serde(default)]
    pub initial: ControlInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub gateaux_eps: Vec<f64>,
    pub fd_eps: f64,
    pub fd_directions: usize,
    pub fd_tol: f64,
    pub duality_tol: f64,
    pub noise_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            gateaux_eps: vec![1e-1, 3e-2, 1e-2, 3e-3],
            fd_eps: 1e-5,
            fd_directions: 3,
            fd_tol: 1e-4,
            duality_tol: 1e-6,
            noise_samples: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Fault {
    /// Flips the convection terms of the backward step.
    AdjointSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub noise: NoiseSpec,
    pub control: ControlConfig,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default)]
    pub initial_state: InitialState,
    pub monte_carlo: MonteCarlo,
    #[serde(default)]
    pub optimizer: PgdOptions,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_injection: Option<Fault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn check_file(field: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(field_err(
            field,
            format!("file {} does not exist", p.display()),
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Desk-scale defaults: 32 x 32 grid, 16 modes, 256 steps, two noise
    /// channels with `L = 1e-2`, 256 samples.
    pub fn desk() -> Self {
        Self {
            problem: ProblemSpec::desk(),
            noise: NoiseSpec::multiplicative(2, 1e-2),
            control: ControlConfig {
                lambda1: 1e-3,
                lambda2: 1e-3,
                bound: 1.0,
                initial: ControlInit::Zero,
            },
            target: TargetSpec::Zero,
            initial_state: InitialState::Decay { amplitude: 0.3 },
            monte_carlo: MonteCarlo {
                samples: 256,
                seed: 2024,
            },
            optimizer: PgdOptions::default(),
            verify: VerifyConfig::default(),
            fault_injection: None,
            output: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("parse: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.domain.nx < 8 || p.domain.ny < 8 {
            return Err(field_err("problem.domain", "nx and ny must be at least 8"));
        }
        if !(p.domain.lx > 0.0 && p.domain.ly > 0.0) {
            return Err(field_err("problem.domain", "side lengths must be positive"));
        }
        if !(p.nu > 0.0) {
            return Err(field_err(
                "problem.nu",
                format!("must be > 0, got {}", p.nu),
            ));
        }
        if !(p.alpha >= 0.0) {
            return Err(field_err(
                "problem.alpha",
                format!("must be >= 0, got {}", p.alpha),
            ));
        }
        if !(p.t_end > 0.0) {
            return Err(field_err(
                "problem.t_end",
                format!("must be > 0, got {}", p.t_end),
            ));
        }
        if p.steps < 16 {
            return Err(field_err(
                "problem.steps",
                format!("must be >= 16, got {}", p.steps),
            ));
        }
        if p.modes == 0 {
            return Err(field_err("problem.modes", "must be positive"));
        }
        if !(p.ceiling > 0.0) {
            return Err(field_err("problem.ceiling", "must be positive"));
        }
        self.noise.validate()?;
        let c = &self.control;
        if !(c.lambda1 > 0.0) {
            return Err(field_err(
                "control.lambda1",
                format!("must be > 0, got {}", c.lambda1),
            ));
        }
        if !(c.lambda2 > 0.0) {
            return Err(field_err(
                "control.lambda2",
                format!("must be > 0, got {}", c.lambda2),
            ));
        }
        if !(c.bound > 0.0) || !c.bound.is_finite() {
            return Err(field_err(
                "control.bound",
                format!("must be > 0, got {}", c.bound),
            ));
        }
        if let ControlInit::File { path } = &c.initial {
            check_file("control.initial.path", path)?;
        }
        match &self.target {
            TargetSpec::Recorded { path } => check_file("target.path", path)?,
            TargetSpec::Control {
                control: ControlInit::File { path },
            } => check_file("target.control.path", path)?,
            TargetSpec::Analytic { terms } if terms.iter().any(|t| t.component > 1) => {
                return Err(field_err("target.terms.component", "must be 0 or 1"));
            }
            _ => {}
        }
        if let InitialState::Coefficients { values } = &self.initial_state {
            if values.len() != p.modes {
                return Err(field_err(
                    "initial_state.values",
                    format!("expected {} coefficients, got {}", p.modes, values.len()),
                ));
            }
        }
        if self.monte_carlo.samples == 0 {
            return Err(field_err("monte_carlo.samples", "must be positive"));
        }
        if self.optimizer.tol_g < 0.0 || !(self.optimizer.initial_step > 0.0) {
            return Err(field_err(
                "optimizer",
                "tol_g must be >= 0 and initial_step > 0",
            ));
        }
        Ok(())
    }
}

/// Record of one subcommand execution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: vec![],
        })
    }

    fn write(&mut self, rel: &str, content: &str) -> Result<()> {
        let p = self.root.join(rel);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&p, content)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(v)?;
        self.write(rel, &s)
    }

    fn finish(mut self, cmd: &str, cfg: &ExperimentConfig, start: Instant) -> Result<RunManifest> {
        self.outputs.push("manifest.json".into());
        let m = RunManifest {
            subcommand: cmd.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.monte_carlo.seed,
            config: cfg.clone(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            outputs: self.outputs.clone(),
        };
        fs::write(
            self.root.join("manifest.json"),
            serde_json::to_string_pretty(&m)?,
        )?;
        Ok(m)
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn harmonic_controls(
    times: &[f64],
    mesh: &BoundaryMesh,
    a: &[Harmonic],
    b: &[Harmonic],
) -> ControlPair {
    ControlPair::from_fn(times, mesh, |t, i| {
        let s = mesh.nodes[i].s / mesh.perimeter;
        (
            a.iter().map(|h| h.eval(s, t)).sum(),
            b.iter().map(|h| h.eval(s, t)).sum(),
        )
    })
}

#[derive(Serialize, Deserialize)]
struct ControlsFile {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    #[serde(default)]
    iterations: usize,
    #[serde(default)]
    cost: f64,
}

pub fn load_controls(path: &Path) -> Result<ControlPair> {
    let s = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let f: ControlsFile =
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(ControlPair { a: f.a, b: f.b })
}

fn build_controls(init: &ControlInit, problem: &Problem) -> Result<ControlPair> {
    let times = problem.time.times();
    let mesh = &problem.ops.mesh;
    let c = match init {
        ControlInit::Zero => ControlPair::zeros(times.len(), mesh.len()),
        ControlInit::Harmonic { a, b } => harmonic_controls(&times, mesh, a, b),
        ControlInit::File { path } => load_controls(path)?,
    };
    c.check_shape(times.len(), mesh.len())
        .map_err(|e| Error::Config(format!("controls: {e}")))?;
    Ok(c)
}

/// Everything a subcommand needs, built from a validated config.
pub struct Context {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub paths: Vec<BrownianPath>,
    pub y0: Vec<f64>,
    pub initial: ControlPair,
    pub target: Target,
    pub weights: CostWeights,
    pub set: AdmissibleSet,
}

impl Context {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut problem = Problem::build(&cfg.problem, &cfg.noise)?;
        if cfg.fault_injection == Some(Fault::AdjointSign) {
            problem.adjoint_convection_sign = -1.0;
        }
        let n = problem.n();
        let y0 = match &cfg.initial_state {
            InitialState::Zero => vec![0.0; n],
            InitialState::Coefficients { values } => values.clone(),
            InitialState::Decay { amplitude } => {
                (0..n).map(|i| amplitude / (1.0 + i as f64)).collect()
            }
        };
        let paths = sample_paths(
            cfg.monte_carlo.seed,
            problem.noise.m,
            &problem.time,
            cfg.monte_carlo.samples,
        );
        let set = AdmissibleSet::new(cfg.control.bound)?;
        let initial = build_controls(&cfg.control.initial, &problem)?;
        let target = build_target(&cfg.target, &problem, &y0, &paths)?;
        Ok(Self {
            config: cfg.clone(),
            problem,
            paths,
            y0,
            initial,
            target,
            weights: CostWeights {
                lambda1: cfg.control.lambda1,
                lambda2: cfg.control.lambda2,
            },
            set,
        })
    }
}

fn build_target(
    spec: &TargetSpec,
    problem: &Problem,
    y0: &[f64],
    paths: &[BrownianPath],
) -> Result<Target> {
    let from_controls = |c: ControlPair| -> Result<Target> {
        let prep = problem.prepare(&c)?;
        let runs = forward_ensemble(problem, &prep, y0, paths)?;
        Ok(Target::recorded(&prep, &runs))
    };
    match spec {
        TargetSpec::Zero => Ok(Target::zero(problem)),
        TargetSpec::Analytic { terms } => Ok(Target::analytic(problem, |t, x, y| {
            let mut v = [0.0; 2];
            for f in terms {
                v[f.component] += f.amplitude
                    * (std::f64::consts::PI * f.kx * x + f.phase_x).cos()
                    * (std::f64::consts::PI * f.ky * y + f.phase_y).cos()
                    * (1.0 + f.time_rate * t);
            }
            v
        })),
        TargetSpec::Control { control } => from_controls(build_controls(control, problem)?),
        TargetSpec::Recorded { path } => from_controls(load_controls(path)?),
    }
}

/// Surrogate constants: state growth rate, growth rate relative to the
/// stability weight rates, and the inequality constant.
pub fn estimate_fits(
    problem: &Problem,
    controls: &ControlPair,
    runs: &[ForwardTrajectory],
) -> ConstantFits {
    let c0 = fit_c0(problem, controls, runs);
    let s = control_norms(problem, controls);
    let visc = 1.0 / problem.nu() + 1.0;
    let e: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| {
            r.coeffs
                .iter()
                .map(|c| c.iter().map(|x| x * x).sum())
                .collect()
        })
        .collect();
    let f: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| {
            r.coeffs
                .iter()
                .zip(&s)
                .map(|(c, sk)| visc * (1.0 + problem.basis.v_norm(c).powi(2) + sk * sk))
                .collect()
        })
        .collect();
    let c12 = gronwall_rate(&e, &f, problem.time.dt);
    let ineq = inequality_constants(&problem.basis, &problem.ops);
    ConstantFits {
        c0,
        c1: c12,
        c2: c12,
        ct1: c12,
        ct2: c12,
        c_hat: ineq.c_hat,
    }
}

fn ledger_for(
    ctx: &Context,
    controls: &ControlPair,
    runs: &[ForwardTrajectory],
) -> Result<ConstantsLedger> {
    let fits = estimate_fits(&ctx.problem, controls, runs);
    let k = ctx.problem.noise.budget();
    constants_report(&ctx.problem, &fits, &ctx.set, k)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let ctx = Context::new(cfg)?;
    let pb = &ctx.problem;
    let mut dir = RunDir::new(out)?;
    let prep = pb.prepare(&ctx.initial)?;
    let runs = forward_ensemble(pb, &prep, &ctx.y0, &ctx.paths)?;
    let times = pb.time.times();
    let mut traj = String::from("sample,step,t");
    for i in 0..pb.n() {
        let _ = write!(traj, ",c{i}");
    }
    traj.push('\n');
    let mut energy = String::from(
        "sample,step,t,energy,v_energy,defect,numerical_dissipation,boundary_work,noise_work,ledger_residual\n",
    );
    for (s, r) in runs.iter().enumerate() {
        for (k, c) in r.coeffs.iter().enumerate() {
            let _ = write!(traj, "{s},{k},{}", num(times[k]));
            for v in c {
                let _ = write!(traj, ",{}", num(*v));
            }
            traj.push('\n');
        }
        for (k, e) in r.ledger.iter().enumerate() {
            let _ = writeln!(
                energy,
                "{s},{},{},{},{},{},{},{},{},{}",
                k + 1,
                num(times[k + 1]),
                num(e.energy),
                num(e.v_energy),
                num(e.defect),
                num(e.numerical_dissipation),
                num(e.boundary_work),
                num(e.noise_work),
                num(e.ledger_residual)
            );
        }
    }
    dir.write("simulate/trajectories.csv", &traj)?;
    dir.write("simulate/energy.csv", &energy)?;
    let ledger = ledger_for(&ctx, &ctx.initial, &runs)?;
    let wk = WeightConstants {
        c0: ledger.c0,
        c1: ledger.c1,
        c2: ledger.c2,
        nu: pb.nu(),
    };
    let mut weights = String::from("sample,step,t,xi0,xi1,xi2,beta\n");
    for (s, r) in runs.iter().enumerate() {
        let w: Vec<Vec<f64>> = [
            WeightKind::Xi0,
            WeightKind::Xi1,
            WeightKind::Xi2,
            WeightKind::Beta,
        ]
        .iter()
        .map(|k| weight_path(*k, &wk, pb, r, &ctx.initial, None).values)
        .collect();
        for k in 0..times.len() {
            let _ = writeln!(
                weights,
                "{s},{k},{},{},{},{},{}",
                num(times[k]),
                num(w[0][k]),
                num(w[1][k]),
                num(w[2][k]),
                num(w[3][k])
            );
        }
    }
    dir.write("simulate/weights.csv", &weights)?;
    if pb.noise.is_zero() {
        dir.json(
            "simulate/moments.json",
            &serde_json::json!({"skipped": "no noise: exponential moments are not defined"}),
        )?;
    } else if runs.len() < 64 {
        dir.json(
            "simulate/moments.json",
            &serde_json::json!({"skipped": "fewer than 64 samples"}),
        )?;
    } else {
        let rep = exp_integrability_stats(pb, &runs, &ledger.moments())?;
        dir.json("simulate/moments.json", &rep)?;
    }
    dir.json("simulate/ledger.json", &ledger)?;
    dir.finish("simulate", cfg, start)
}

pub struct OptimizeOutcome {
    pub manifest: RunManifest,
    pub controls: ControlPair,
    pub ledger: ConstantsLedger,
}

pub fn cmd_optimize(cfg: &ExperimentConfig, out: &Path) -> Result<OptimizeOutcome> {
    let start = Instant::now();
    let ctx = Context::new(cfg)?;
    let pb = &ctx.problem;
    let mut dir = RunDir::new(out)?;
    let prep = pb.prepare(&ctx.initial)?;
    let runs = forward_ensemble(pb, &prep, &ctx.y0, &ctx.paths)?;
    let ledger = ledger_for(&ctx, &ctx.initial, &runs)?;
    if ledger.verdict_optimality == Some(false) {
        eprintln!(
            "warning: viscosity-noise condition fails with the estimated constants (min(A*, B*, B*/C) < {:e})",
            ledger.c_max
        );
    }
    let pgd = PgdProblem {
        problem: pb,
        target: &ctx.target,
        y0: &ctx.y0,
        paths: &ctx.paths,
        weights: ctx.weights,
        set: ctx.set,
    };
    let res = optimize_pgd(&pgd, &ctx.initial, &cfg.optimizer)?;
    dir.write("optimize/trace.csv", &res.trace.to_csv())?;
    let times = pb.time.times();
    let mut g = String::from("node,t,g_a,g_b\n");
    for (k, t) in times.iter().enumerate() {
        for i in 0..pb.nb() {
            let _ = writeln!(
                g,
                "{i},{},{},{}",
                num(*t),
                num(res.gradient.g_a[k][i]),
                num(res.gradient.g_b[k][i])
            );
        }
    }
    dir.write("optimize/gradient.csv", &g)?;
    let file = ControlsFile {
        a: res.controls.a.clone(),
        b: res.controls.b.clone(),
        iterations: res.trace.rows.len().saturating_sub(1),
        cost: res.cost.total.mean,
    };
    dir.json("optimize/controls_final.json", &file)?;
    dir.json("optimize/ledger.json", &ledger)?;
    dir.json(
        "optimize/summary.json",
        &serde_json::json!({
            "converged": res.trace.converged,
            "stop_reason": res.trace.stop_reason,
            "cost": res.cost,
        }),
    )?;
    let manifest = dir.finish("optimize", cfg, start)?;
    Ok(OptimizeOutcome {
        manifest,
        controls: res.controls,
        ledger,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn le(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            status: if value <= threshold {
                Status::Pass
            } else {
                Status::Fail
            },
            value,
            threshold,
            detail,
        }
    }
    fn skipped(name: &str, why: &str) -> Self {
        Self {
            name: name.into(),
            status: Status::Skipped,
            value: f64::NAN,
            threshold: f64::NAN,
            detail: why.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIPPED",
            };
            let _ = writeln!(
                s,
                "{tag:7} {:24} {:.3e} (limit {:.1e}) {}",
                c.name, c.value, c.threshold, c.detail
            );
        }
        s
    }
}

fn probe_direction(problem: &Problem, seed: u64) -> ControlPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = |rng: &mut ChaCha8Rng| Harmonic {
        amplitude: rng.gen_range(0.5..1.0),
        frequency: rng.gen_range(1..4) as f64,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        time_rate: rng.gen_range(-0.5..0.5),
    };
    let a = vec![h(&mut rng), h(&mut rng)];
    let b = vec![h(&mut rng), h(&mut rng)];
    harmonic_controls(&problem.time.times(), &problem.ops.mesh, &a, &b)
}

fn random_compatible(mesh: &BoundaryMesh, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..mesh.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..mesh.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (enforce_compatibility(&a, mesh).expect("length"), b)
}

pub fn run_checks(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let ctx = Context::new(cfg)?;
    let pb = &ctx.problem;
    let need = 4 * RegressionSpec::default().feature_count(pb.n());
    if !pb.noise.is_zero() && cfg.monte_carlo.samples < need {
        return Err(field_err(
            "monte_carlo.samples",
            format!(
                "verify with noise needs at least {need} samples, got {}",
                cfg.monte_carlo.samples
            ),
        ));
    }
    let ops = &pb.ops;
    let vc = &cfg.verify;
    let mut checks = vec![];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.monte_carlo.seed);

    // discrete gradient is minus the transposed divergence on interior faces
    let cells: Vec<f64> = (0..ops.grid.n_cells())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let g = spmv(&ops.grad, &cells);
    let dt = spmv_t(&ops.div, &cells);
    let mut worst = 0.0f64;
    for f in 0..ops.n_faces() {
        if !ops.grid.is_wall_face(f) {
            worst = worst.max((g[f] + dt[f]).abs());
        }
    }
    let psi: Vec<f64> = (0..ops.grid.n_interior_vertices())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let divc = ops.div_norm(&spmv(&ops.curl, &psi));
    let scale = 1.0 / ops.grid.hx.min(ops.grid.hy);
    checks.push(Check::le(
        "operator_transposition",
        worst.max(divc) / scale,
        1e-12,
        format!("grad+div^T {worst:.2e}, div curl {divc:.2e}"),
    ));

    let gd = gram_defects(&pb.basis, ops);
    checks.push(Check::le(
        "eigenbasis_gram",
        gd.mass.max(gd.stiffness),
        1e-10,
        format!(
            "mass {:.2e}, stiffness {:.2e}, divergence {:.2e}",
            gd.mass, gd.stiffness, gd.divergence
        ),
    ));

    let mut lw = 0.0f64;
    for _ in 0..3 {
        let (a, b) = random_compatible(&ops.mesh, &mut rng);
        let l = solve_lifting(&a, &b, ops)?;
        lw = lw
            .max(l.interior_residual)
            .max(l.normal_mismatch)
            .max(l.slip_mismatch);
    }
    checks.push(Check::le(
        "lifting_residuals",
        lw,
        1e-8,
        "3 random compatible pairs".into(),
    ));

    // deterministic twin of the configured problem
    let mut det = Problem::build(&cfg.problem, &NoiseSpec::zero())?;
    det.adjoint_convection_sign = pb.adjoint_convection_sign;
    let dpaths = sample_paths(cfg.monte_carlo.seed, 0, &det.time, 1);
    let base = if ctx.initial.max_abs() > 0.0 {
        ctx.initial.clone()
    } else {
        probe_direction(&det, cfg.monte_carlo.seed ^ 0xb0)
            .scale(0.5 / probe_direction(&det, cfg.monte_carlo.seed ^ 0xb0).max_abs())
    };
    let prep = det.prepare(&base)?;
    let run = crate::dynamics::forward_solve(&det, &prep, &ctx.y0, &dpaths[0])?;
    let emax = run.ledger.iter().map(|e| e.energy).fold(1.0f64, f64::max);
    let led = run
        .ledger
        .iter()
        .map(|e| e.ledger_residual.abs())
        .fold(0.0f64, f64::max);
    checks.push(Check::le(
        "energy_ledger",
        led / emax,
        1e-8,
        "max per-step residual of the discrete energy identity".into(),
    ));

    let dir = probe_direction(&det, cfg.monte_carlo.seed ^ 0xd1);
    let rows = gateaux_check(&det, &base, &dir, &vc.gateaux_eps, &ctx.y0, &dpaths)?;
    let e: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let v: Vec<f64> = rows.iter().map(|r| r.l2.mean).collect();
    let slope = loglog_slope(&e, &v);
    checks.push(Check::le(
        "gateaux_deterministic",
        (slope - 2.0).abs(),
        0.3,
        format!("log-log slope {slope:.3}"),
    ));

    let dtarget = match &cfg.target {
        TargetSpec::Control { .. } | TargetSpec::Recorded { .. } => {
            build_target(&cfg.target, &det, &ctx.y0, &dpaths)?
        }
        _ => ctx.target.clone(),
    };
    let dsetup = DualitySetup {
        problem: &det,
        controls: &base,
        direction: &dir,
        target: &dtarget,
        y0: &ctx.y0,
        paths: &dpaths,
    };
    let rep = duality_check(
        &dsetup,
        DualityMode::PathwiseDet,
        &RegressionSpec::default(),
    )?;
    checks.push(Check::le(
        "duality_pathwise",
        rep.relative,
        vc.duality_tol,
        format!(
            "lhs {:.6e}, boundary pairing {:.6e}",
            rep.lhs.mean, rep.boundary_pairing
        ),
    ));

    let ev = crate::control::evaluate(&det, &base, &dtarget, &ctx.y0, &dpaths, &ctx.weights)?;
    let grad = crate::control::assemble_gradient(
        &det,
        &base,
        &ev,
        &dtarget,
        &ctx.weights,
        &crate::control::GradientMode::Pathwise,
    )?;
    let mut worst = 0.0f64;
    for d in 0..vc.fd_directions {
        let dd = probe_direction(&det, cfg.monte_carlo.seed ^ (0xf0 + d as u64));
        let s = DualitySetup {
            direction: &dd,
            ..dsetup
        };
        let (fd, an) = fd_directional(&s, &grad.as_pair(), &ctx.weights, vc.fd_eps)?;
        worst = worst.max((fd - an).abs() / an.abs().max(1e-300));
    }
    checks.push(Check::le(
        "gradient_fd",
        worst,
        vc.fd_tol,
        format!("{} directions, central differences", vc.fd_directions),
    ));

    if pb.noise.is_zero() {
        for name in [
            "gateaux_stochastic",
            "duality_expectation",
            "noise_assumptions",
        ] {
            checks.push(Check::skipped(name, "configuration has no noise"));
        }
    } else {
        let rows = gateaux_check(pb, &base, &dir, &vc.gateaux_eps, &ctx.y0, &ctx.paths)?;
        let first = rows.first().map_or(f64::NAN, |r| r.l2.mean);
        let last = rows.last().map_or(f64::NAN, |r| r.l2.mean);
        let monotone = rows.windows(2).all(|w| w[1].l2.mean < w[0].l2.mean);
        let ratio = if monotone {
            last / first
        } else {
            f64::INFINITY
        };
        checks.push(Check::le(
            "gateaux_stochastic",
            ratio,
            1e-3,
            format!("final/initial, monotone: {monotone}"),
        ));
        let setup = DualitySetup {
            problem: pb,
            controls: &base,
            direction: &dir,
            target: &ctx.target,
            y0: &ctx.y0,
            paths: &ctx.paths,
        };
        let rep = duality_check(&setup, DualityMode::Expectation, &RegressionSpec::default())?;
        let z = rep.defect.mean.abs() / rep.defect.stderr.max(1e-300);
        checks.push(Check::le(
            "duality_expectation",
            z,
            3.0,
            format!(
                "|mean defect| / stderr, mean defect {:.3e}, {} samples",
                rep.defect.mean, rep.samples
            ),
        ));
        let nr = validate_assumptions(&pb.noise, &pb.basis, vc.noise_samples, cfg.monte_carlo.seed);
        match nr {
            Ok(r) => {
                let ok = r.l_est <= r.l_bound
                    && r.k_est.is_finite()
                    && r.frechet_remainder_slope >= 1.9
                    && r.adjoint_defect <= 1e-12;
                checks.push(Check {
                    name: "noise_assumptions".into(),
                    status: if ok { Status::Pass } else { Status::Fail },
                    value: r.l_est,
                    threshold: r.l_bound,
                    detail: format!(
                        "K {:.3e}, remainder slope {:.3}, adjoint defect {:.2e}",
                        r.k_est, r.frechet_remainder_slope, r.adjoint_defect
                    ),
                });
            }
            Err(e) => checks.push(Check {
                name: "noise_assumptions".into(),
                status: Status::Fail,
                value: f64::NAN,
                threshold: pb.noise.l_bound,
                detail: e.to_string(),
            }),
        }
    }
    Ok(VerifyReport { checks })
}

pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<(VerifyReport, RunManifest)> {
    let start = Instant::now();
    let report = run_checks(cfg)?;
    let mut dir = RunDir::new(out)?;
    dir.json("verify/report.json", &report)?;
    dir.write("verify/summary.txt", &report.summary())?;
    let m = dir.finish("verify", cfg, start)?;
    Ok((report, m))
}

pub fn cmd_spectrum(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    cfg.validate()?;
    let mut dir = RunDir::new(out)?;
    let (grid, mesh) = crate::geometry::build_geometry(&cfg.problem.domain)?;
    let ops =
        crate::operators::assemble_operators(&grid, &mesh, cfg.problem.alpha, cfg.problem.nu)?;
    let basis = crate::operators::stokes_eigenbasis(&ops, cfg.problem.modes, &ops.alpha_nodes())?;
    let mut s = String::from("k,lambda\n");
    for (k, l) in basis.eigenvalues.iter().enumerate() {
        let _ = writeln!(s, "{},{}", k + 1, num(*l));
    }
    dir.write("spectrum/spectrum.csv", &s)?;
    let ineq = inequality_constants(&basis, &ops);
    let gd = gram_defects(&basis, &ops);
    dir.json(
        "spectrum/inequalities.json",
        &serde_json::json!({"inequalities": ineq, "gram_defects": gd}),
    )?;
    dir.finish("spectrum", cfg, start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let c = ExperimentConfig::desk();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn field_level_messages() {
        let mut c = ExperimentConfig::desk();
        c.control.lambda1 = 0.0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("control.lambda1"), "{e}");
        let mut c = ExperimentConfig::desk();
        c.target = TargetSpec::Recorded {
            path: "/nonexistent/controls.json".into(),
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("target.path"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        let b = Error::BlowUp {
            step: 3,
            norm: 1e7,
            ceiling: 1e6,
        };
        assert_eq!(exit_code(&b), EXIT_BLOWUP);
    }
}
