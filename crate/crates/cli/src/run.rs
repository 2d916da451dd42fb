//! Subcommand drivers. Each writes into a fresh run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ksinv::diagnostics::{check_result, nonuniqueness_experiment, reconstruction_experiment};
use ksinv::dual::{exact_level, solve_levels};
use ksinv::inversion::{invert, InversionResult, LogRow};
use ksinv::io::{write_field, write_json, LogWriter};
use ksinv::manybody::classify_degeneracy;
use ksinv::purestate::pure_check;
use ksinv::{Field, Grid};
use serde::Serialize;

use crate::config::{Config, ConfigError, InversionSummary};

/// Exit codes of the `ksinv` binary.
pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_UNCONVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Invert,
    Reconstruct,
    Nonuniqueness,
    PureCheck,
    Spectrum,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Invert => "invert",
            Command::Reconstruct => "reconstruct",
            Command::Nonuniqueness => "nonuniqueness",
            Command::PureCheck => "pure-check",
            Command::Spectrum => "spectrum",
        }
    }
}

#[derive(Debug, Serialize)]
struct Status<'a> {
    command: &'a str,
    exit_code: i32,
    converged: bool,
    message: String,
}

/// Maps an error to exit code 2 (configuration) or 3 (numerical failure).
pub fn classify(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<ksinv::Error>() {
        Some(ksinv::Error::InvalidInput(_) | ksinv::Error::InvalidGrid(_) | ksinv::Error::GridMismatch) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

/// Loads a configuration file. Relative target paths are resolved against the
/// file's directory so that the resolved copy works from anywhere.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut config = Config::parse(&text)?;
    if let Some(crate::config::TargetConfig::File { path: target }) = &mut config.target {
        if target.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            *target = base.join(&*target);
        }
    }
    Ok(config)
}

/// Runs `command` into `out`, which must not exist yet. Returns the exit code.
pub fn execute(command: Command, config: &Config, out: &Path) -> i32 {
    if out.exists() {
        log::error!("{} already exists", out.display());
        return EXIT_CONFIG;
    }
    if let Err(e) = fs::create_dir_all(out) {
        log::error!("cannot create {}: {e}", out.display());
        return EXIT_CONFIG;
    }
    let outcome = write_resolved(config, out).and_then(|_| match command {
        Command::Invert => run_invert(config, out),
        Command::Reconstruct => run_reconstruct(config, out),
        Command::Nonuniqueness => run_nonuniqueness(config, out),
        Command::PureCheck => run_pure_check(config, out),
        Command::Spectrum => run_spectrum(config, out),
    });
    let (code, converged, message) = match outcome {
        Ok(true) => (EXIT_CONVERGED, true, "converged".to_string()),
        Ok(false) => (EXIT_UNCONVERGED, false, "did not converge".to_string()),
        Err(e) => {
            log::error!("{e:#}");
            (classify(&e), false, format!("{e:#}"))
        }
    };
    let status = Status {
        command: command.name(),
        exit_code: code,
        converged,
        message,
    };
    if let Err(e) = write_json(&out.join("status.json"), &status) {
        log::error!("cannot write status: {e}");
    }
    code
}

fn write_resolved(config: &Config, out: &Path) -> Result<()> {
    let text = toml::to_string(config).context("serializing the resolved config")?;
    fs::write(out.join("config.resolved.toml"), text)?;
    Ok(())
}

fn grid_of(config: &Config) -> Result<Grid> {
    config.grid.build().map_err(|e| ConfigError(e.to_string()).into())
}

/// Density target of a density-driven command. A potential target is turned
/// into the uniform level density of that potential.
fn density_target(config: &Config, grid: &Grid) -> Result<Field> {
    if let Some(crate::config::TargetConfig::Potential(p)) = &config.target {
        let v = p.evaluate(grid);
        let (n, k) = (config.problem.particles, config.problem.k);
        return Ok(ksinv::diagnostics::level_density(grid, &v, n, k, &config.params)?);
    }
    Ok(config.target_density(grid)?)
}

/// Inverts with a streaming log and optional checkpoints.
fn invert_logged(config: &Config, grid: &Grid, rho: &Field, out: &Path) -> Result<InversionResult> {
    let mut writer = LogWriter::create(&out.join("log.csv"))?;
    let stride = config.output.checkpoint_stride;
    let checkpoints = out.join("checkpoints");
    if stride > 0 {
        fs::create_dir_all(&checkpoints)?;
    }
    let mut failure: Option<ksinv::Error> = None;
    let mut observer = |row: &LogRow, v: &Field, rho_n: &Field| {
        if failure.is_some() {
            return;
        }
        if row.iteration % 10 == 0 {
            log::info!(
                "iteration {} distance {:.3e} cost {:.3e} level {}",
                row.iteration,
                row.distance,
                row.cost,
                row.level_dim
            );
        }
        let mut step = || -> ksinv::Result<()> {
            writer.write(row)?;
            if stride > 0 && row.iteration % stride == 0 {
                write_field(&checkpoints, &format!("v_{:06}", row.iteration), v)?;
                write_field(&checkpoints, &format!("rho_{:06}", row.iteration), rho_n)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
        }
    };
    let (n, k) = (config.problem.particles, config.problem.k);
    let result = invert(grid, rho, n, k, &config.params, None, Some(&mut observer))?;
    if let Some(e) = failure {
        return Err(e).context("writing the run log");
    }
    Ok(result)
}

fn write_inversion(config: &Config, result: &InversionResult, rho: &Field, out: &Path) -> Result<()> {
    write_field(out, "rho_target", rho)?;
    write_field(out, "v_final", &result.potential)?;
    write_field(out, "rho_final", &result.density)?;
    let (n, k) = (config.problem.particles, config.problem.k);
    let summary = InversionSummary {
        converged: result.converged,
        iterations: result.iterations,
        distance: result.distance,
        cost: result.cost,
        t: result.t,
        temperature: result.temperature,
        min_orbital_gap: result.min_orbital_gap,
        degeneracy: result.degeneracy.clone(),
        euler_lagrange: check_result(result, rho, n, k, config.output.euler_lagrange_tol)?,
    };
    write_json(&out.join("inversion.json"), &summary)?;
    Ok(())
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut writer = LogWriter::create(path)?;
    for row in rows {
        writer.write(row)?;
    }
    Ok(())
}

fn run_invert(config: &Config, out: &Path) -> Result<bool> {
    let grid = grid_of(config)?;
    let rho = density_target(config, &grid)?;
    let result = invert_logged(config, &grid, &rho, out)?;
    write_inversion(config, &result, &rho, out)?;
    Ok(result.converged)
}

fn run_reconstruct(config: &Config, out: &Path) -> Result<bool> {
    let grid = grid_of(config)?;
    let v_target = config.target_potential(&grid)?;
    let (n, k) = (config.problem.particles, config.problem.k);
    let (report, result, rho) = reconstruction_experiment(&grid, &v_target, n, k, &config.params)?;
    write_log(&out.join("log.csv"), &result.log)?;
    write_field(out, "v_target", &v_target)?;
    write_inversion(config, &result, &rho, out)?;
    write_json(&out.join("reconstruction.json"), &report)?;
    Ok(result.converged)
}

fn run_nonuniqueness(config: &Config, out: &Path) -> Result<bool> {
    let grid = grid_of(config)?;
    let rho = density_target(config, &grid)?;
    let perturbations: Vec<Field> = config
        .nonuniqueness
        .perturbations
        .iter()
        .map(|p| p.evaluate(&grid))
        .collect();
    let (n, k) = (config.problem.particles, config.problem.k);
    let (report, results) = nonuniqueness_experiment(&grid, &rho, n, k, &perturbations, &config.params)?;
    write_field(out, "rho_target", &rho)?;
    for (i, r) in results.iter().enumerate() {
        write_field(out, &format!("v_final_{i}"), &r.potential)?;
        write_field(out, &format!("rho_final_{i}"), &r.density)?;
        write_log(&out.join(format!("log_{i}.csv")), &r.log)?;
    }
    write_json(&out.join("nonuniqueness.json"), &report)?;
    Ok(report.all_converged)
}

fn run_pure_check(config: &Config, out: &Path) -> Result<bool> {
    let grid = grid_of(config)?;
    let rho = density_target(config, &grid)?;
    let result = invert_logged(config, &grid, &rho, out)?;
    write_inversion(config, &result, &rho, out)?;
    let exact = exact_level(&result.levels, config.problem.k)?;
    let report = pure_check(
        &exact,
        &rho,
        config.problem.particles,
        &result.degeneracy,
        &config.pure,
        &config.params.oda,
    )?;
    write_json(&out.join("pure.json"), &report)?;
    Ok(result.converged)
}

#[derive(Debug, Serialize)]
struct OneBodyRow {
    index: usize,
    energy: f64,
    level: usize,
    degenerate: bool,
}

#[derive(Debug, Serialize)]
struct NBodyRow {
    index: usize,
    energy: f64,
    orbitals: Vec<usize>,
    level: usize,
    degenerate: bool,
}

#[derive(Debug, Serialize)]
struct SpectrumReport {
    particles: usize,
    k: usize,
    gap_tol: f64,
    one_body: Vec<OneBodyRow>,
    n_body: Vec<NBodyRow>,
    degeneracy: ksinv::manybody::DegeneracyReport,
}

fn run_spectrum(config: &Config, out: &Path) -> Result<bool> {
    let grid = grid_of(config)?;
    let v = config.target_potential(&grid)?;
    let (n, k) = (config.problem.particles, config.problem.k);
    let levels = solve_levels(&grid, &v, n, k, 0.0, &config.params.eigen, None)?;
    let gap_tol = levels.nbody.gap_tol;
    let energies = &levels.spectrum.energies;
    let mut one_body = Vec::with_capacity(energies.len());
    for (l, range) in levels.spectrum.levels(gap_tol).into_iter().enumerate() {
        for i in range.clone() {
            one_body.push(OneBodyRow {
                index: i,
                energy: energies[i],
                level: l,
                degenerate: range.len() > 1,
            });
        }
    }
    let mut n_body = Vec::new();
    for (l, range) in levels.nbody.levels().iter().enumerate() {
        for i in range.clone() {
            let c = &levels.nbody.configurations()[i];
            n_body.push(NBodyRow {
                index: i,
                energy: c.energy,
                orbitals: c.orbitals.clone(),
                level: l,
                degenerate: range.len() > 1,
            });
        }
    }
    let report = SpectrumReport {
        particles: n,
        k,
        gap_tol,
        one_body,
        n_body,
        degeneracy: classify_degeneracy(&levels.nbody, energies, k)?,
    };
    write_json(&out.join("spectrum.json"), &report)?;
    write_field(out, "v", &v)?;
    Ok(true)
}

/// Default run directory name when `--out` is not given.
pub fn default_out(command: Command) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{}-{stamp}", command.name()))
}
