//! Command-line front end: one subcommand per experiment, JSON configs in,
//! CSV series and JSON reports out.
//!
//! Exit status is 0 when every gate of the command passes, 1 on a numerical
//! gate failure (diagnostics are still written) and 2 on an invalid config.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::acceptance::{Suite, SuiteOptions, CRITERIA};
use crate::degeneracy::{degeneracy_data, f_scale, find_z0, null_vector, z0_sweep};
use crate::dynamics::{run_branch, run_instability_with, prepare_degenerate, BranchReport, InstabilityConfig};
use crate::functionals::{d_surface, d_third_directional};
use crate::grid::{read_field_csv, write_field_csv, ComplexField, GridSpec};
use crate::modulation::{renormalize_tangent, DecomposeOptions, Decomposer};
use crate::par::{set_threads, Execution};
use crate::soliton::{build_profile, soliton_residual, tangent_vector, SolitonParams};

pub const DEFAULT_SEED: u64 = 20240917;

#[derive(Debug, Parser)]
#[command(name = "gdnls", version, about = "Degenerate gDNLS solitary waves: profiles, degeneracy curve, modulation and instability runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config for the subcommand; defaults apply to omitted fields.
    #[arg(long, global = true, env = "GDNLS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, env = "GDNLS_OUT", default_value = ".")]
    pub out: PathBuf,
    /// Seed for sampling-based checks.
    #[arg(long, global = true, env = "GDNLS_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true, env = "GDNLS_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand, PartialEq, Eq)]
pub enum Command {
    /// Build a soliton profile and write it as a field CSV.
    Profile,
    /// Sweep z₀(σ) along a σ-grid.
    Degeneracy,
    /// Hessian of d(ω, c), its null vector and the directional third derivative.
    Hessian,
    /// Modulation decomposition of a field read from CSV.
    Decompose,
    /// Evolve one perturbed soliton and track its modulation parameters.
    Simulate,
    /// The full instability experiment with control and reversed branch.
    Instability,
    /// Run the acceptance suite.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Profile => "profile",
            Command::Degeneracy => "degeneracy",
            Command::Hessian => "hessian",
            Command::Decompose => "decompose",
            Command::Simulate => "simulate",
            Command::Instability => "instability",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub sigma: f64,
    pub omega: f64,
    /// Wave speed; omitted means the degenerate speed `2 z₀ √ω`.
    pub speed: Option<f64>,
    pub length: f64,
    pub count: usize,
    pub residual_tol: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { sigma: 1.5, omega: 1.0, speed: None, length: 80.0, count: 2048, residual_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegeneracyConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_step: f64,
    /// Gate on `|F(z₀)|` relative to the integrand scale.
    pub residual_tol: f64,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        Self { sigma_min: 1.05, sigma_max: 1.95, sigma_step: 0.05, residual_tol: 1e-10 }
    }
}

impl DegeneracyConfig {
    fn sigmas(&self) -> Vec<f64> {
        let n = ((self.sigma_max - self.sigma_min) / self.sigma_step).round() as usize + 1;
        // rounded so the CSV shows 1.05, 1.1, ... rather than accumulated drift
        (0..n).map(|j| ((self.sigma_min + j as f64 * self.sigma_step) * 1e12).round() / 1e12).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianConfig {
    pub sigma: f64,
    pub omega: f64,
    /// Omitted means the degenerate speed; then `ξ` is oriented so that `d₃ < 0`.
    pub speed: Option<f64>,
    pub length: f64,
    pub count: usize,
    pub fd_step: Option<f64>,
    pub third_step: Option<f64>,
    /// Gate on the relative gap between the two third-derivative routes.
    pub rel_gap_tol: f64,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            omega: 1.0,
            speed: None,
            length: 80.0,
            count: 2048,
            fd_step: None,
            third_step: None,
            rel_gap_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Field CSV; relative paths are resolved against the config file.
    pub field: Option<PathBuf>,
    pub sigma: f64,
    pub omega: f64,
    /// Initial guess for `(y, γ, λ)`.
    pub seed_guess: Option<[f64; 3]>,
    pub tube_radius: Option<f64>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self { field: None, sigma: 1.5, omega: 1.0, seed_guess: None, tube_radius: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Criteria to run; all when omitted.
    pub criteria: Option<Vec<u8>>,
    pub sequential: bool,
    pub instability: InstabilityConfig,
}

/// Failure before any computation: bad flags, unreadable or invalid config.
#[derive(Debug)]
struct ConfigError(String);

/// Result of a command: gate status plus the JSON report body.
struct Outcome {
    passed: bool,
    result: Value,
}

struct Context {
    out: PathBuf,
    seed: u64,
    exec: Execution,
    config_dir: PathBuf,
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    run_cli(&cli)
}

pub fn run_cli(cli: &Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            return config_failure(cli.command, "threads must be positive");
        }
        set_threads(n);
    }
    let ctx = Context {
        out: cli.out.clone(),
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        exec: Execution::Parallel,
        config_dir: cli.config.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf).unwrap_or_default(),
    };
    let raw = match &cli.config {
        Some(path) => match fs::read_to_string(path) {
            Ok(s) => Some(s),
            Err(e) => return config_failure(cli.command, &format!("cannot read {}: {e}", path.display())),
        },
        None => None,
    };
    if let Err(e) = fs::create_dir_all(&ctx.out) {
        return config_failure(cli.command, &format!("cannot create {}: {e}", ctx.out.display()));
    }
    let outcome = match cli.command {
        Command::Profile => dispatch(raw.as_deref(), &ctx, cli.command, profile),
        Command::Degeneracy => dispatch(raw.as_deref(), &ctx, cli.command, degeneracy),
        Command::Hessian => dispatch(raw.as_deref(), &ctx, cli.command, hessian),
        Command::Decompose => dispatch(raw.as_deref(), &ctx, cli.command, decompose),
        Command::Simulate => dispatch(raw.as_deref(), &ctx, cli.command, simulate),
        Command::Instability => dispatch(raw.as_deref(), &ctx, cli.command, instability),
        Command::Verify => dispatch(raw.as_deref(), &ctx, cli.command, verify),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(ConfigError(msg)) => config_failure(cli.command, &msg),
    }
}

fn config_failure(command: Command, msg: &str) -> i32 {
    let diag = json!({"command": command.name(), "error": "invalid config", "message": msg});
    eprintln!("{diag}");
    2
}

/// Parses the config, hashes it, runs the command and writes `<command>.json`.
fn dispatch<C, F>(raw: Option<&str>, ctx: &Context, command: Command, f: F) -> Result<bool, ConfigError>
where
    C: DeserializeOwned + Serialize + Default,
    F: FnOnce(&C, &Context) -> Result<Result<Outcome, String>, ConfigError>,
{
    let cfg: C = match raw {
        Some(s) => serde_json::from_str(s).map_err(|e| ConfigError(e.to_string()))?,
        None => C::default(),
    };
    let hash = config_hash(&cfg, ctx.seed);
    let (passed, result, error) = match f(&cfg, ctx)? {
        Ok(o) => (o.passed, o.result, None),
        Err(e) => (false, Value::Null, Some(e)),
    };
    let mut doc = json!({
        "tool": "gdnls",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command.name(),
        "config_hash": hash,
        "seed": ctx.seed,
        "config": cfg,
        "passed": passed,
        "result": result,
    });
    if let Some(e) = &error {
        doc["error"] = Value::String(e.clone());
    }
    let path = ctx.out.join(format!("{}.json", command.name()));
    write_json(&path, &doc).map_err(ConfigError)?;
    if !passed {
        let diag = json!({"command": command.name(), "passed": false, "error": error, "report": path});
        eprintln!("{diag}");
    }
    Ok(passed)
}

/// SHA-256 of the resolved config (defaults filled in) and the seed.
pub fn config_hash<C: Serialize>(cfg: &C, seed: u64) -> String {
    let canonical = json!({"config": cfg, "seed": seed});
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

fn write_json(path: &Path, value: &Value) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_field(path: &Path, field: &ComplexField) -> Result<(), String> {
    let file = File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
    write_field_csv(field, BufWriter::new(file)).map_err(|e| e.to_string())
}

fn check(cond: bool, msg: &str) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError(msg.into()))
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn grid_of(length: f64, count: usize) -> Result<GridSpec, ConfigError> {
    GridSpec::new(length, count).map_err(|e| ConfigError(e.to_string()))
}

fn params_of(sigma: f64, omega: f64, speed: Option<f64>) -> Result<Result<SolitonParams, String>, ConfigError> {
    let speed = match speed {
        Some(c) => c,
        None => {
            check(sigma > 1.0 && sigma < 2.0, "sigma must lie in (1, 2)")?;
            match find_z0(sigma) {
                Ok(z0) => 2.0 * z0 * omega.sqrt(),
                Err(e) => return Ok(Err(e.to_string())),
            }
        }
    };
    SolitonParams::new(sigma, omega, speed).map(Ok).map_err(|e| ConfigError(e.to_string()))
}

fn profile(cfg: &ProfileConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    check(positive(cfg.residual_tol), "residual_tol must be positive")?;
    let grid = grid_of(cfg.length, cfg.count)?;
    let params = match params_of(cfg.sigma, cfg.omega, cfg.speed)? {
        Ok(p) => p,
        Err(e) => return Ok(Err(e)),
    };
    Ok((|| {
        let prof = build_profile(&params, &grid).map_err(|e| e.to_string())?;
        let residual = soliton_residual(&prof);
        write_field(&ctx.out.join("profile.csv"), &prof.q)?;
        Ok(Outcome {
            passed: residual < cfg.residual_tol,
            result: json!({
                "params": params,
                "residual": residual,
                "boundary_magnitude": prof.boundary_magnitude,
                "c0_est": prof.log_slope_bounds.0,
                "field": "profile.csv",
            }),
        })
    })())
}

fn degeneracy(cfg: &DegeneracyConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    check(
        cfg.sigma_min > 1.0 && cfg.sigma_max < 2.0 && cfg.sigma_min <= cfg.sigma_max,
        "sigma range must satisfy 1 < sigma_min <= sigma_max < 2",
    )?;
    check(positive(cfg.sigma_step), "sigma_step must be positive")?;
    check(positive(cfg.residual_tol), "residual_tol must be positive")?;
    let sigmas = cfg.sigmas();
    check(sigmas.len() <= 10_000, "sigma grid has more than 10000 points")?;
    Ok((|| {
        let rows = z0_sweep(&sigmas, ctx.exec).into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
        let path = ctx.out.join("z0.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for r in &rows {
            w.serialize(r).map_err(|e| e.to_string())?;
            worst = worst.max(r.f_residual / f_scale(r.z0, r.sigma).map_err(|e| e.to_string())?);
        }
        w.flush().map_err(|e| e.to_string())?;
        let decreasing = rows.windows(2).all(|p| p[1].z0 < p[0].z0);
        Ok(Outcome {
            passed: decreasing && worst < cfg.residual_tol,
            result: json!({
                "rows": rows.len(),
                "strictly_decreasing": decreasing,
                "max_scaled_residual": worst,
                "z0_first": rows.first().map(|r| r.z0),
                "z0_last": rows.last().map(|r| r.z0),
                "csv": "z0.csv",
            }),
        })
    })())
}

fn hessian(cfg: &HessianConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    check(positive(cfg.rel_gap_tol), "rel_gap_tol must be positive")?;
    check(cfg.fd_step.is_none_or(positive) && cfg.third_step.is_none_or(positive), "steps must be positive")?;
    let grid = grid_of(cfg.length, cfg.count)?;
    let params = match params_of(cfg.sigma, cfg.omega, cfg.speed)? {
        Ok(p) => p,
        Err(e) => return Ok(Err(e)),
    };
    let degenerate = cfg.speed.is_none() && cfg.fd_step.is_none() && cfg.third_step.is_none();
    Ok((|| {
        let (surface, xi, third) = if degenerate {
            let data = degeneracy_data(cfg.sigma, cfg.omega, &grid, ctx.exec).map_err(|e| e.to_string())?;
            (data.surface, data.xi, data.third)
        } else {
            let surface = d_surface(&params, &grid, cfg.fd_step, ctx.exec).map_err(|e| e.to_string())?;
            let xi = null_vector(surface.hessian).map_err(|e| e.to_string())?;
            let third = d_third_directional(&params, xi, &grid, cfg.third_step, ctx.exec).map_err(|e| e.to_string())?;
            (surface, xi, third)
        };
        Ok(Outcome {
            passed: third.rel_gap < cfg.rel_gap_tol,
            result: json!({
                "sigma": params.sigma,
                "omega": params.omega,
                "c": params.speed,
                "d": surface.d,
                "grad": surface.grad,
                "hessian": surface.hessian,
                "det": surface.det(),
                "eigs": surface.eigenvalues(),
                "xi": xi,
                "d3_fd": third.value,
                "d3_identity": third.identity,
                "rel_gap": third.rel_gap,
                "d3_at_h": third.at_h,
                "d3_at_half_h": third.at_half_h,
                "third_step": third.step,
                "symmetry_defect": surface.symmetry_defect,
            }),
        })
    })())
}

fn decompose(cfg: &DecomposeConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    let Some(rel) = &cfg.field else {
        return Err(ConfigError("decompose needs a `field` CSV path".into()));
    };
    check(cfg.tube_radius.is_none_or(positive), "tube_radius must be positive")?;
    let path = ctx.config_dir.join(rel);
    let file = File::open(&path).map_err(|e| ConfigError(format!("cannot open {}: {e}", path.display())))?;
    let u = read_field_csv(file).map_err(|e| ConfigError(e.to_string()))?;
    params_of(cfg.sigma, cfg.omega, None)?.map_err(ConfigError)?;
    Ok((|| {
        let grid = *u.grid();
        let data = degeneracy_data(cfg.sigma, cfg.omega, &grid, ctx.exec).map_err(|e| e.to_string())?;
        let prof = build_profile(&data.params(), &grid).map_err(|e| e.to_string())?;
        let tilde = tangent_vector(&prof, data.xi, None).map_err(|e| e.to_string())?;
        let phi = renormalize_tangent(&prof, &tilde, data.xi).map_err(|e| e.to_string())?.phi;
        let opts = DecomposeOptions { tube_radius: cfg.tube_radius, ..Default::default() };
        let dec = Decomposer::new(&prof, &phi, data.xi, opts);
        let state = dec.decompose(&u, cfg.seed_guess).map_err(|e| e.to_string())?;
        Ok(Outcome {
            passed: true,
            result: json!({
                "y": state.y,
                "gamma": state.gamma,
                "lambda": state.lambda,
                "eps_h1": state.eps_h1,
                "eps_BQ": state.eps_bq,
                "iters": state.newton_iters,
                "residual": state.residual_norm,
                "orthogonality": state.orthogonality,
                "xi": data.xi,
                "c": data.c_star,
            }),
        })
    })())
}

fn validate_instability(cfg: &InstabilityConfig) -> Result<(GridSpec, GridSpec), ConfigError> {
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    check(cfg.sigma > 1.0 && cfg.sigma < 2.0, "sigma must lie in (1, 2)")?;
    check(positive(cfg.omega), "omega must be positive")?;
    Ok((cfg.grid().map_err(|e| ConfigError(e.to_string()))?, cfg.coercivity_grid().map_err(|e| ConfigError(e.to_string()))?))
}

fn write_trajectory(path: &Path, branch: &BranchReport) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    w.write_record(["t", "M", "P", "E", "y", "gamma", "lambda", "eps_h1", "I", "dIdt", "dist"])
        .map_err(|e| e.to_string())?;
    for (j, s) in branch.series.samples.iter().enumerate() {
        let row = [
            s.t,
            s.mass,
            s.momentum,
            s.energy,
            s.y,
            s.gamma,
            s.lambda,
            s.eps_h1,
            s.virial,
            branch.virial.i_dot.get(j).copied().unwrap_or(f64::NAN),
            s.distance,
        ];
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

fn write_snapshots(ctx: &Context, prefix: &str, branch: &BranchReport) -> Result<Vec<String>, String> {
    let mut names = Vec::new();
    for (t, u) in &branch.snapshots {
        let name = format!("{prefix}_t{t:.4}.csv");
        write_field(&ctx.out.join(&name), u)?;
        names.push(name);
    }
    Ok(names)
}

/// Branch report without the per-sample series, which go to CSV.
fn branch_summary(branch: &BranchReport) -> Value {
    let mut v = serde_json::to_value(branch).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.remove("series");
        m.remove("virial");
        m.insert("samples".into(), json!(branch.series.samples.len()));
    }
    v
}

fn simulate(cfg: &InstabilityConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    let (grid, coarse) = validate_instability(cfg)?;
    Ok((|| {
        let setup = prepare_degenerate(cfg.sigma, cfg.omega, &grid, &coarse, ctx.exec).map_err(|e| e.to_string())?;
        let branch = run_branch(&setup, cfg, cfg.lambda0, cfg.t_max, false).map_err(|e| e.to_string())?;
        write_trajectory(&ctx.out.join("trajectory.csv"), &branch)?;
        let snapshots = write_snapshots(ctx, "snapshot", &branch)?;
        let completed = branch.halted.is_none() && (branch.final_time - cfg.t_max).abs() < 0.5 * cfg.dt;
        Ok(Outcome {
            passed: completed,
            result: json!({
                "params": setup.profile.params,
                "xi": setup.xi(),
                "d3": setup.d3(),
                "completed": completed,
                "branch": branch_summary(&branch),
                "trajectory": "trajectory.csv",
                "snapshots": snapshots,
            }),
        })
    })())
}

fn instability(cfg: &InstabilityConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    let (grid, coarse) = validate_instability(cfg)?;
    Ok((|| {
        let setup = prepare_degenerate(cfg.sigma, cfg.omega, &grid, &coarse, ctx.exec).map_err(|e| e.to_string())?;
        let report = run_instability_with(&setup, cfg).map_err(|e| e.to_string())?;
        write_trajectory(&ctx.out.join("trajectory.csv"), &report.perturbed)?;
        if let Some(c) = &report.control {
            write_trajectory(&ctx.out.join("control_trajectory.csv"), c)?;
        }
        if let Some(n) = &report.negative {
            write_trajectory(&ctx.out.join("negative_trajectory.csv"), n)?;
        }
        let snapshots = write_snapshots(ctx, "snapshot", &report.perturbed)?;
        let verdict = serde_json::to_value(&report.verdict).map_err(|e| e.to_string())?;
        write_json(&ctx.out.join("verdict.json"), &verdict)?;
        Ok(Outcome {
            passed: report.verdict.passed(),
            result: json!({
                "params": report.params,
                "xi": report.xi,
                "d3": report.d3,
                "kappa": report.kappa,
                "virial_coefficients": report.virial_coefficients,
                "verdict": verdict,
                "perturbed": branch_summary(&report.perturbed),
                "control": report.control.as_ref().map(branch_summary),
                "negative": report.negative.as_ref().map(branch_summary),
                "snapshots": snapshots,
            }),
        })
    })())
}

fn verify(cfg: &VerifyConfig, ctx: &Context) -> Result<Result<Outcome, String>, ConfigError> {
    validate_instability(&cfg.instability)?;
    let ids = cfg.criteria.clone().unwrap_or_else(|| CRITERIA.to_vec());
    check(!ids.is_empty() && ids.iter().all(|i| CRITERIA.contains(i)), "criteria must be ids from 1 to 11")?;
    let exec = if cfg.sequential { Execution::Sequential } else { ctx.exec };
    let suite = Suite::new(SuiteOptions { seed: ctx.seed, exec, instability: cfg.instability.clone() });
    let outcomes: Vec<_> = ids
        .iter()
        .map(|&id| {
            let o = suite.run(id);
            println!("{}", o.line());
            o
        })
        .collect();
    let passed = outcomes.iter().all(|o| o.passed);
    Ok(Ok(Outcome { passed, result: json!({ "criteria": outcomes }) }))
}
