//! Pure-state representability: the best density reachable by a single
//! normalized superposition `Σ C_I ψ_I` of the active configurations.
//!
//! The search runs a particle swarm on the real sphere `S^{2D-1}` followed by a
//! Riemannian gradient polish; the mixed optimum is recomputed alongside so the
//! two can be compared.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{oda_minimize, DirectionProblem, ExponentSign, OdaOptions};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::manybody::{ActiveSet, DegeneracyReport};

/// `Re(C C^†)`, the real part being all that reaches the density.
fn real_gamma(c: &[Complex64]) -> DMatrix<f64> {
    DMatrix::from_fn(c.len(), c.len(), |a, b| (c[a] * c[b].conj()).re)
}

fn norm_sq(c: &[Complex64]) -> f64 {
    c.iter().map(|z| z.norm_sqr()).sum()
}

/// Density of `Σ C_I ψ_I` over the configurations of `active`.
pub fn pure_density(c: &[Complex64], active: &ActiveSet) -> Result<Field> {
    if c.len() != active.dim() {
        return Err(Error::InvalidInput(format!(
            "{} coefficients for {} configurations",
            c.len(),
            active.dim()
        )));
    }
    if (norm_sq(c) - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput("coefficients are not normalized".into()));
    }
    Ok(active.density(&real_gamma(c)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PureOptions {
    pub restarts: usize,
    /// Particles per swarm; `0` means four per real coordinate.
    pub swarm: usize,
    pub iterations: usize,
    pub polish_iterations: usize,
    pub seed: u64,
}

impl Default for PureOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            swarm: 0,
            iterations: 500,
            polish_iterations: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PureResult {
    pub coefficients: Vec<Complex64>,
    /// `‖ρ_ψ - ρ‖`.
    pub residual_norm: f64,
}

fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

fn normalize(x: &mut [f64]) -> bool {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}

/// Rotates the global phase so the largest coefficient is real and positive.
fn fix_phase(c: &mut [Complex64]) {
    if let Some(top) = c.iter().copied().max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr())) {
        if top.norm() > 0.0 {
            let phase = top.conj() / top.norm();
            c.iter_mut().for_each(|z| *z *= phase);
        }
    }
}

struct Objective<'a> {
    problem: &'a DirectionProblem,
}

impl Objective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.problem.residual_sq(&real_gamma(&to_complex(x)))
    }

    /// Euclidean gradient in the real coordinates: `∂f/∂C = 2 G C`.
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let c = to_complex(x);
        let g = self.problem.gradient(&real_gamma(&c), None, ExponentSign::Positive);
        let d = c.len();
        let mut out = vec![0.0; 2 * d];
        for a in 0..d {
            let mut s = Complex64::new(0.0, 0.0);
            for b in 0..d {
                s += c[b] * (0.5 * (g[(a, b)] + g[(b, a)]));
            }
            out[2 * a] = 2.0 * s.re;
            out[2 * a + 1] = 2.0 * s.im;
        }
        out
    }

    /// Riemannian gradient descent with backtracking on the unit sphere.
    fn polish(&self, x: &mut Vec<f64>, iterations: usize) -> f64 {
        let mut f = self.value(x);
        let mut step = 1.0;
        for _ in 0..iterations {
            let g = self.gradient(x);
            let radial: f64 = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            let tangent: Vec<f64> = g.iter().zip(x.iter()).map(|(a, b)| a - radial * b).collect();
            let gn2: f64 = tangent.iter().map(|v| v * v).sum();
            if gn2 <= 1e-32 * f.max(1e-300) || gn2 == 0.0 {
                break;
            }
            let mut improved = false;
            step *= 2.0;
            for _ in 0..60 {
                let mut trial: Vec<f64> = x.iter().zip(&tangent).map(|(a, b)| a - step * b).collect();
                if normalize(&mut trial) {
                    let ft = self.value(&trial);
                    if ft <= f - 1e-4 * step * gn2 {
                        *x = trial;
                        f = ft;
                        improved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        f
    }

    fn swarm(&self, dim: usize, opts: &PureOptions, seed: u64) -> (Vec<f64>, f64) {
        let n = 2 * dim;
        let size = if opts.swarm == 0 { (4 * n).max(8) } else { opts.swarm };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_point = |rng: &mut ChaCha8Rng| loop {
            let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if normalize(&mut x) {
                break x;
            }
        };
        let mut pos: Vec<Vec<f64>> = (0..size).map(|_| random_point(&mut rng)).collect();
        let mut vel: Vec<Vec<f64>> = (0..size).map(|_| vec![0.0; n]).collect();
        let mut best_pos = pos.clone();
        let mut best_val: Vec<f64> = pos.iter().map(|x| self.value(x)).collect();
        let mut g = (0..size).min_by(|&a, &b| best_val[a].total_cmp(&best_val[b])).unwrap_or(0);
        let (w, c1, c2) = (0.7298, 1.49618, 1.49618);
        for _ in 0..opts.iterations {
            for p in 0..size {
                for i in 0..n {
                    let r1: f64 = rng.random();
                    let r2: f64 = rng.random();
                    vel[p][i] = w * vel[p][i] + c1 * r1 * (best_pos[p][i] - pos[p][i]) + c2 * r2 * (best_pos[g][i] - pos[p][i]);
                    pos[p][i] += vel[p][i];
                }
                if !normalize(&mut pos[p]) {
                    pos[p] = random_point(&mut rng);
                }
                let f = self.value(&pos[p]);
                if f < best_val[p] {
                    best_val[p] = f;
                    best_pos[p].clone_from(&pos[p]);
                    if f < best_val[g] {
                        g = p;
                    }
                }
            }
        }
        (best_pos[g].clone(), best_val[g])
    }
}

/// Minimizes `‖ρ_ψ - ρ‖` over normalized coefficient vectors on `active`.
/// Deterministic for a fixed seed.
pub fn pure_minimize(active: &ActiveSet, rho: &Field, opts: &PureOptions) -> Result<PureResult> {
    let problem = DirectionProblem::new(active, rho)?;
    let objective = Objective { problem: &problem };
    let dim = active.dim();
    let mut best = if dim == 1 {
        vec![1.0, 0.0]
    } else {
        let runs: Vec<(Vec<f64>, f64)> = (0..opts.restarts.max(1))
            .into_par_iter()
            .map(|r| {
                let (mut x, _) = objective.swarm(dim, opts, opts.seed.wrapping_add(r as u64));
                let f = objective.polish(&mut x, opts.polish_iterations);
                (x, f)
            })
            .collect();
        // first minimum in restart order keeps the result thread-independent
        runs.into_iter().fold((Vec::new(), f64::INFINITY), |acc, r| if r.1 < acc.1 { r } else { acc }).0
    };
    if best.is_empty() {
        return Err(Error::InvalidInput("pure-state objective is not finite".into()));
    }
    normalize(&mut best);
    let mut c = to_complex(&best);
    fix_phase(&mut c);
    let density = pure_density(&c, active)?;
    Ok(PureResult {
        residual_norm: density.sub(rho)?.norm(),
        coefficients: c,
    })
}

/// Pure against mixed representability on one active set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PureReport {
    /// `‖ρ_ψ - ρ‖ / N` at the best coefficients found.
    pub pure_distance: f64,
    /// `‖ρ_Γ - ρ‖ / N` at the zero-temperature mixed optimum.
    pub mixed_distance: f64,
    pub level_dim: usize,
    pub active_dim: usize,
    pub coincidental: bool,
    pub essentially_one_body: bool,
    /// Real and imaginary parts of the best coefficients.
    pub coefficients: Vec<[f64; 2]>,
}

/// Runs [`pure_minimize`] and the zero-temperature mixed problem on the same
/// active set. The mixed search also starts from the pure optimum, so the
/// mixed distance never exceeds the pure one beyond rounding.
pub fn pure_check(
    active: &ActiveSet,
    rho: &Field,
    particles: usize,
    degeneracy: &DegeneracyReport,
    opts: &PureOptions,
    oda: &OdaOptions,
) -> Result<PureReport> {
    let pure = pure_minimize(active, rho, opts)?;
    let problem = DirectionProblem::new(active, rho)?;
    let mut mixed = f64::INFINITY;
    for start in [active.uniform_level_state(), real_gamma(&pure.coefficients)] {
        let res = oda_minimize(&problem, None, &start, oda)?;
        let norm = active.density(&res.gamma).sub(rho)?.norm();
        mixed = mixed.min(norm);
    }
    let n = particles as f64;
    Ok(PureReport {
        pure_distance: pure.residual_norm / n,
        mixed_distance: mixed / n,
        level_dim: active.level_members.len(),
        active_dim: active.dim(),
        coincidental: degeneracy.coincidental,
        essentially_one_body: degeneracy.essentially_one_body,
        coefficients: pure.coefficients.iter().map(|z| [z.re, z.im]).collect(),
    })
}
