//! Optimality checks and experiment drivers built on [`crate::inversion`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{exact_level, solve_levels, sorted_symmetric_eigen};
use crate::error::{Error, Result};
use crate::grid::{bohm_potential, Field, Grid, BOHM_FLOOR};
use crate::inversion::{invert, InversionParams, InversionResult};
use crate::manybody::{classify_degeneracy, ActiveSet};

/// Outcome of the pointwise Euler–Lagrange inequalities.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EulerLagrangeReport {
    /// `∫ max(0, lower - ρ, ρ - upper)`.
    pub violation: f64,
    /// Fraction of grid points violating either bound by more than `tol`.
    pub violating_fraction: f64,
    pub max_violation: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Checks `ρ_in + μ_{k-m_k}(M(x)) ≤ ρ(x) ≤ ρ_in + μ_{M_k-k}(M(x))` at every
/// grid point, with `μ_j` the `j`-th smallest eigenvalue (from 0) of the
/// correlation matrix of the level configurations. Passes when the violation
/// integral is at most `tol · N`.
pub fn euler_lagrange_check(exact: &ActiveSet, rho: &Field, particles: usize, tol: f64) -> Result<EulerLagrangeReport> {
    let grid = *rho.grid();
    if exact.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let level = &exact.level_members;
    let d = level.len();
    let lo = exact.k - exact.level.start;
    let hi = exact.level.end - 1 - exact.k;
    let mut violation = 0.0;
    let mut count = 0usize;
    let mut max_violation = 0.0f64;
    for x in 0..grid.len() {
        let full = exact.correlation_matrix(x);
        let m = nalgebra::DMatrix::from_fn(d, d, |a, b| full[(level[a], level[b])]);
        let (mu, _) = sorted_symmetric_eigen(&m);
        let base = exact.rho_in.values()[x];
        let r = rho.values()[x];
        let excess = (base + mu[lo] - r).max(r - base - mu[hi]).max(0.0);
        violation += excess;
        max_violation = max_violation.max(excess);
        if excess > tol {
            count += 1;
        }
    }
    violation *= grid.weight();
    Ok(EulerLagrangeReport {
        violation,
        violating_fraction: count as f64 / grid.len() as f64,
        max_violation,
        tol,
        passed: violation <= tol * particles as f64,
    })
}

/// `v_b + c` with `c` minimizing `∫ρ (v_a - v_b - c)²`.
pub fn gauge_align(v_a: &Field, v_b: &Field, rho: &Field) -> Result<Field> {
    if v_a.grid() != v_b.grid() || v_a.grid() != rho.grid() {
        return Err(Error::GridMismatch);
    }
    let mass: f64 = rho.values().iter().sum();
    if !(mass > 0.0) {
        return Err(Error::InvalidInput("alignment weight vanishes".into()));
    }
    let c = v_a
        .values()
        .iter()
        .zip(v_b.values())
        .zip(rho.values())
        .map(|((a, b), r)| r * (a - b))
        .sum::<f64>()
        / mass;
    Ok(v_b.shift(c))
}

/// `sup |v_a - v_b|` over `{ρ ≥ 10⁻³ max ρ}` after aligning `v_b` to `v_a`.
pub fn potential_distance(v_a: &Field, v_b: &Field, rho: &Field) -> Result<f64> {
    let aligned = gauge_align(v_a, v_b, rho)?;
    let cut = 1e-3 * rho.max();
    Ok(v_a
        .values()
        .iter()
        .zip(aligned.values())
        .zip(rho.values())
        .filter(|(_, &r)| r >= cut)
        .map(|((a, b), _)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// `max v - min v` over `{ρ ≥ 10⁻³ max ρ}`.
pub fn potential_spread(v: &Field, rho: &Field) -> f64 {
    let cut = 1e-3 * rho.max();
    let (lo, hi) = v
        .values()
        .iter()
        .zip(rho.values())
        .filter(|(_, &r)| r >= cut)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&x, _)| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Density of the uniform mixture over the level of state `k` of `v`.
pub fn level_density(grid: &Grid, v: &Field, particles: usize, k: usize, params: &InversionParams) -> Result<Field> {
    let levels = solve_levels(grid, v, particles, k, 0.0, &params.eigen, None)?;
    let exact = exact_level(&levels, k)?;
    Ok(exact.density(&exact.uniform_level_state()))
}

/// Euler–Lagrange report at the final potential of an inversion.
pub fn check_result(result: &InversionResult, rho: &Field, particles: usize, k: usize, tol: f64) -> Result<EulerLagrangeReport> {
    let exact = exact_level(&result.levels, k)?;
    euler_lagrange_check(&exact, rho, particles, tol)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub particles: usize,
    pub k: usize,
    pub converged: bool,
    pub iterations: usize,
    /// `‖ρ_n - ρ‖` in the grid L² norm.
    pub density_error: f64,
    /// Aligned `sup |v_n - v|` on `{ρ ≥ 10⁻³ max ρ}`.
    pub potential_error: f64,
    pub potential_spread: f64,
    /// `potential_error > 10⁻² · potential_spread`: the inversion found a
    /// different potential with the same density.
    pub potential_differs: bool,
    pub level_dim: usize,
}

/// Computes the level density of `v_target`, inverts it from the Bohm
/// potential and compares both density and potential.
pub fn reconstruction_experiment(
    grid: &Grid,
    v_target: &Field,
    particles: usize,
    k: usize,
    params: &InversionParams,
) -> Result<(ReconstructionReport, InversionResult, Field)> {
    let rho = level_density(grid, v_target, particles, k, params)?;
    let result = invert(grid, &rho, particles, k, params, None, None)?;
    let potential_error = potential_distance(v_target, &result.potential, &rho)?;
    let spread = potential_spread(v_target, &rho);
    let report = ReconstructionReport {
        particles,
        k,
        converged: result.converged,
        iterations: result.iterations,
        density_error: result.distance * particles as f64,
        potential_error,
        potential_spread: spread,
        potential_differs: potential_error > 1e-2 * spread,
        level_dim: result.degeneracy.dimension,
    };
    Ok((report, result, rho))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub converged: bool,
    pub iterations: usize,
    /// `‖ρ_n - ρ‖ / N`.
    pub distance: f64,
    pub level_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonuniquenessReport {
    pub k: usize,
    pub runs: Vec<RunSummary>,
    /// Aligned sup distances on `{ρ ≥ 10⁻³ max ρ}`, row-major upper triangle
    /// `(i, j, distance)`.
    pub pairwise: Vec<(usize, usize, f64)>,
    /// `max(ε, largest final distance)`.
    pub density_scale: f64,
    pub all_converged: bool,
    /// Every pair differs by more than ten times the density scale.
    pub distinct: bool,
    /// Every pair agrees within a hundred times the density scale.
    pub agree: bool,
}

/// Inverts `rho` from `Bohm(ρ) + u_i` for each perturbation and compares the
/// resulting potentials.
pub fn nonuniqueness_experiment(
    grid: &Grid,
    rho: &Field,
    particles: usize,
    k: usize,
    perturbations: &[Field],
    params: &InversionParams,
) -> Result<(NonuniquenessReport, Vec<InversionResult>)> {
    if perturbations.len() < 2 {
        return Err(Error::InvalidInput("at least two starting points are needed".into()));
    }
    for (i, a) in perturbations.iter().enumerate() {
        if perturbations[..i].iter().any(|b| b.values() == a.values()) {
            return Err(Error::InvalidInput("perturbations must be pairwise distinct".into()));
        }
    }
    let bohm = bohm_potential(grid, rho, BOHM_FLOOR)?;
    let results: Vec<InversionResult> = perturbations
        .par_iter()
        .map(|u| {
            let v0 = bohm.add(u)?;
            invert(grid, rho, particles, k, params, Some(&v0), None)
        })
        .collect::<Result<_>>()?;
    let mut pairwise = Vec::new();
    for i in 0..results.len() {
        for j in i + 1..results.len() {
            pairwise.push((i, j, potential_distance(&results[i].potential, &results[j].potential, rho)?));
        }
    }
    let scale = results.iter().map(|r| r.distance).fold(params.epsilon, f64::max);
    let runs = results
        .iter()
        .map(|r| RunSummary {
            converged: r.converged,
            iterations: r.iterations,
            distance: r.distance,
            level_dim: r.degeneracy.dimension,
        })
        .collect();
    let report = NonuniquenessReport {
        k,
        runs,
        density_scale: scale,
        all_converged: results.iter().all(|r| r.converged),
        distinct: pairwise.iter().all(|p| p.2 > 10.0 * scale),
        agree: pairwise.iter().all(|p| p.2 <= 100.0 * scale),
        pairwise,
    };
    Ok((report, results))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusEntry {
    pub target: usize,
    pub converged: bool,
    pub distance: f64,
    pub level_dim: usize,
    pub coincidental: bool,
    pub essentially_one_body: bool,
}

/// Inverts each target and records the degeneracy of the final level.
pub fn degeneracy_census(
    grid: &Grid,
    targets: &[Field],
    particles: usize,
    k: usize,
    params: &InversionParams,
) -> Result<Vec<CensusEntry>> {
    targets
        .par_iter()
        .enumerate()
        .map(|(i, rho)| {
            let r = invert(grid, rho, particles, k, params, None, None)?;
            let report = classify_degeneracy(&r.levels.nbody, &r.levels.spectrum.energies, k)?;
            Ok(CensusEntry {
                target: i,
                converged: r.converged,
                distance: r.distance,
                level_dim: report.dimension,
                coincidental: report.coincidental,
                essentially_one_body: report.essentially_one_body,
            })
        })
        .collect()
}
