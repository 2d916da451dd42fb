//! The dual functional `G^k(v) = E^k(v) - ⟨v, ρ⟩` and the pieces of its
//! ascent: the temperature-smoothed mixed-state direction problem, the
//! two-fold circle search, directional derivatives and the second derivative
//! at non-degenerate levels.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::manybody::{
    build_active_set, coupling, default_gap_tol, enumerate_spectrum, ActiveSet, Coupling, NBodySpectrum,
};
use crate::spectral::{lowest_eigenpairs, EigenOptions, OneBodySpectrum};

/// One-body and N-body spectra of a potential, resolved up to level `k`.
#[derive(Debug, Clone)]
pub struct LevelSolve {
    pub spectrum: OneBodySpectrum,
    pub nbody: NBodySpectrum,
}

impl LevelSolve {
    pub fn energy(&self, k: usize) -> f64 {
        self.nbody.energy(k)
    }
}

/// Solves for enough orbitals to certify the N-body spectrum up to
/// `E^k + window`, doubling the orbital count until the enumeration is
/// complete.
pub fn solve_levels(
    grid: &Grid,
    potential: &Field,
    particles: usize,
    k: usize,
    window: f64,
    eig: &EigenOptions,
    warm: Option<&OneBodySpectrum>,
) -> Result<LevelSolve> {
    let m = grid.len();
    let mut count = (particles + k + 8).max(warm.map_or(0, |w| w.len())).min(m);
    loop {
        let spectrum = lowest_eigenpairs(grid, potential, count, eig, warm)?;
        let gap_tol = default_gap_tol(&spectrum.energies, particles, k);
        match enumerate_spectrum(&spectrum, particles, k, gap_tol, window) {
            Ok(nbody) => return Ok(LevelSolve { spectrum, nbody }),
            Err(Error::InsufficientOrbitals { .. }) if count < m => {
                count = (2 * count).min(m);
            }
            Err(e) => return Err(e),
        }
    }
}

/// `G^k(v) = E^k(v) - ⟨v, ρ⟩`.
pub fn dual_value(levels: &LevelSolve, rho: &Field, k: usize) -> Result<f64> {
    let v = &levels.spectrum.potential;
    if v.grid() != rho.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(levels.energy(k) - v.grid().dot(v.values(), rho.values()))
}

/// Sign of the smoothing exponent in the direction cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExponentSign {
    /// `exp(+ΔE² / 2T²)`: penalizes energy deviation multiplicatively.
    #[default]
    Positive,
    /// `exp(-ΔE² / 2T²)`.
    Negative,
}

impl ExponentSign {
    fn value(self) -> f64 {
        match self {
            ExponentSign::Positive => 1.0,
            ExponentSign::Negative => -1.0,
        }
    }
}

/// Precomputed scalars of the mixed-state direction problem over an active
/// set: `∫(ρ_in - ρ)²`, `∫(ρ_in - ρ) ρ^out_p`, `∫ρ^out_p ρ^out_q`, `e_IJ` and
/// `e_in - E^k`, with `p, q` running over the nonzero couplings.
#[derive(Debug, Clone)]
pub struct DirectionProblem {
    pub dim: usize,
    pairs: Vec<(usize, usize)>,
    pair_index: DMatrix<Option<usize>>,
    q: DMatrix<f64>,
    b: DVector<f64>,
    r0: f64,
    e0: f64,
    e: DMatrix<f64>,
}

impl DirectionProblem {
    pub fn new(active: &ActiveSet, rho: &Field) -> Result<Self> {
        if active.grid() != rho.grid() {
            return Err(Error::GridMismatch);
        }
        let grid = *rho.grid();
        let d = active.dim();
        let base = active.rho_in.sub(rho)?;
        let pairs: Vec<(usize, usize)> = active.out_densities.iter().map(|(p, _)| *p).collect();
        let mut pair_index = DMatrix::from_element(d, d, None);
        for (p, &(a, b)) in pairs.iter().enumerate() {
            pair_index[(a, b)] = Some(p);
            pair_index[(b, a)] = Some(p);
        }
        let fields: Vec<&Field> = active.out_densities.iter().map(|(_, f)| f).collect();
        let np = fields.len();
        let rows: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|p| {
                (0..np)
                    .map(|q| if q < p { 0.0 } else { grid.dot(fields[p].values(), fields[q].values()) })
                    .collect()
            })
            .collect();
        let q = DMatrix::from_fn(np, np, |r, c| if c >= r { rows[r][c] } else { rows[c][r] });
        let b = DVector::from_iterator(np, fields.iter().map(|f| grid.dot(base.values(), f.values())));
        Ok(Self {
            dim: d,
            pairs,
            pair_index,
            q,
            b,
            r0: grid.dot(base.values(), base.values()),
            e0: active.inner_energy - active.reference_energy,
            e: active.cross_energies.clone(),
        })
    }

    /// Coefficients `w_p` of each coupled density in `ρ_Γ - ρ_in`.
    fn weights(&self, gamma: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.pairs.len(),
            self.pairs
                .iter()
                .map(|&(a, b)| if a == b { gamma[(a, a)] } else { gamma[(a, b)] + gamma[(b, a)] }),
        )
    }

    /// `‖ρ_Γ - ρ‖²`.
    pub fn residual_sq(&self, gamma: &DMatrix<f64>) -> f64 {
        let w = self.weights(gamma);
        (self.r0 + 2.0 * self.b.dot(&w) + w.dot(&(&self.q * &w))).max(0.0)
    }

    /// `E(Γ) - E^k`.
    pub fn energy_deviation(&self, gamma: &DMatrix<f64>) -> f64 {
        self.e0 + self.e.component_mul(gamma).sum()
    }

    fn factor(&self, deviation: f64, temperature: Option<f64>, sign: ExponentSign) -> f64 {
        match temperature {
            Some(t) => (sign.value() * deviation * deviation / (2.0 * t * t)).exp(),
            None => 1.0,
        }
    }

    /// `f(Γ) = exp(±(e_in - E^k + Σ Γ_KL e_KL)² / 2T²) ‖ρ_Γ - ρ‖²`; without a
    /// temperature the factor is 1.
    pub fn cost(&self, gamma: &DMatrix<f64>, temperature: Option<f64>, sign: ExponentSign) -> f64 {
        self.factor(self.energy_deviation(gamma), temperature, sign) * self.residual_sq(gamma)
    }

    /// Gradient of [`Self::cost`] with every entry `Γ_IJ` independent.
    pub fn gradient(&self, gamma: &DMatrix<f64>, temperature: Option<f64>, sign: ExponentSign) -> DMatrix<f64> {
        let w = self.weights(gamma);
        let qw = &self.q * &w;
        let r = (self.r0 + 2.0 * self.b.dot(&w) + w.dot(&qw)).max(0.0);
        let dev = self.energy_deviation(gamma);
        let fac = self.factor(dev, temperature, sign);
        let energy_coef = match temperature {
            Some(t) => sign.value() * dev * r / (t * t),
            None => 0.0,
        };
        DMatrix::from_fn(self.dim, self.dim, |a, c| {
            let density = match self.pair_index[(a, c)] {
                Some(p) => 2.0 * (self.b[p] + qw[p]),
                None => 0.0,
            };
            fac * (density + energy_coef * self.e[(a, c)])
        })
    }

    /// Newton step for [`Self::cost`] restricted to the face of the
    /// spectraplex spanned by the eigenvectors of `gamma` with non-negligible
    /// weight. Returns the face point and the step, clipped to stay positive
    /// semidefinite.
    fn face_newton(
        &self,
        gamma: &DMatrix<f64>,
        grad: &DMatrix<f64>,
        temperature: Option<f64>,
        sign: ExponentSign,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (values, vectors) = sorted_symmetric_eigen(gamma);
        let top = values.last().copied().unwrap_or(0.0);
        let face: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 1e-6 * top.max(1e-300)).collect();
        let mut columns: Vec<DVector<f64>> = face.iter().map(|&i| vectors.column(i).into_owned()).collect();
        let mut weights: Vec<f64> = face.iter().map(|&i| values[i]).collect();
        // directions outside the face along which the cost decreases
        let complement: Vec<usize> = (0..values.len()).filter(|i| !face.contains(i)).collect();
        if !complement.is_empty() {
            let w = DMatrix::from_fn(self.dim, complement.len(), |row, c| vectors[(row, complement[c])]);
            let (gv, gvec) = sorted_symmetric_eigen(&(w.transpose() * grad * &w));
            let level = grad.component_mul(gamma).sum();
            for (i, &g) in gv.iter().enumerate().take(2) {
                if g < level {
                    columns.push(&w * gvec.column(i));
                    weights.push(0.0);
                }
            }
        }
        let r = columns.len();
        if r < 2 {
            return None;
        }
        let u = DMatrix::from_columns(&columns);
        let comps: Vec<(usize, usize)> = (0..r).flat_map(|k| (k..r).map(move |l| (k, l))).collect();
        let nc = comps.len();
        let basis: Vec<DMatrix<f64>> = comps
            .iter()
            .map(|&(k, l)| {
                let uk = u.column(k);
                let ul = u.column(l);
                if k == l {
                    uk * uk.transpose()
                } else {
                    uk * ul.transpose() + ul * uk.transpose()
                }
            })
            .collect();
        let j = DMatrix::from_fn(self.pairs.len(), nc, |p, c| self.weights(&basis[c])[p]);
        let eta = DVector::from_iterator(nc, basis.iter().map(|m| self.e.component_mul(m).sum()));
        let trace = DVector::from_iterator(nc, comps.iter().map(|&(k, l)| if k == l { 1.0 } else { 0.0 }));
        let s0 = DVector::from_iterator(
            nc,
            comps.iter().map(|&(k, l)| if k == l { weights[k] } else { 0.0 }),
        );
        let s0 = &s0 / s0.dot(&trace);
        let beta = j.transpose() * &self.b;
        let kmat = j.transpose() * &self.q * &j;
        let ks = &kmat * &s0;
        let r_val = (self.r0 + 2.0 * beta.dot(&s0) + s0.dot(&ks)).max(0.0);
        let grad_r = (&beta + &ks) * 2.0;
        let hess_r = &kmat * 2.0;
        let (grad, hess) = match temperature {
            Some(t) => {
                let c = sign.value() / (2.0 * t * t);
                let dev = self.e0 + eta.dot(&s0);
                let fac = (c * dev * dev).exp();
                let grad_g = &eta * (2.0 * c * dev);
                let grad = (&grad_r + &grad_g * r_val) * fac;
                let hess = (&hess_r
                    + &grad_r * grad_g.transpose()
                    + &grad_g * grad_r.transpose()
                    + (&eta * eta.transpose() * (2.0 * c) + &grad_g * grad_g.transpose()) * r_val)
                    * fac;
                (grad, hess)
            }
            None => (grad_r, hess_r),
        };
        // orthonormal basis of the trace-preserving directions
        let a = &trace / trace.norm();
        let proj = DMatrix::identity(nc, nc) - &a * a.transpose();
        let (pv, pvec) = sorted_symmetric_eigen(&proj);
        let z_cols: Vec<usize> = (0..nc).filter(|&i| pv[i] > 0.5).collect();
        let z = DMatrix::from_fn(nc, z_cols.len(), |row, c| pvec[(row, z_cols[c])]);
        let hz = z.transpose() * &hess * &z;
        let gz = z.transpose() * &grad;
        let (hv, hvec) = sorted_symmetric_eigen(&hz);
        let hmax = hv.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut y = DVector::zeros(z.ncols());
        for (i, &lam) in hv.iter().enumerate() {
            if lam > 1e-13 * hmax {
                let col = hvec.column(i);
                y -= col * (col.dot(&gz) / lam);
            }
        }
        let ds = &z * y;
        let to_matrix = |s: &DVector<f64>| {
            let mut m = DMatrix::zeros(r, r);
            for (c, &(k, l)) in comps.iter().enumerate() {
                m[(k, l)] = s[c];
                m[(l, k)] = s[c];
            }
            m
        };
        let s_mat = to_matrix(&s0);
        let d_mat = to_matrix(&ds);
        let min_eig = |t: f64| sorted_symmetric_eigen(&(&s_mat + &d_mat * t)).0[0];
        let mut t_max = 1.0;
        if min_eig(1.0) < 0.0 {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if min_eig(mid) >= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            t_max = lo;
        }
        let start = &u * &s_mat * u.transpose();
        let clipped = &u * &d_mat * u.transpose() * t_max;
        let projected = &u * (project_spectraplex(&(&s_mat + &d_mat)) - &s_mat) * u.transpose();
        Some((start, clipped, projected))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OdaOptions {
    pub max_iter: usize,
    /// Absolute bound on the linearized decrease `⟨∇f(Γ), Γ - P⟩`.
    pub tol: f64,
    /// Bound on the linearized decrease relative to the current cost.
    pub rel_tol: f64,
    pub exponent_sign: ExponentSign,
}

impl Default for OdaOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-16,
            rel_tol: 1e-10,
            exponent_sign: ExponentSign::Positive,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdaResult {
    pub gamma: DMatrix<f64>,
    pub cost: f64,
    /// Linearized decrease toward the best extreme point at the final iterate.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Symmetric eigendecomposition with ascending eigenvalues.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Euclidean projection onto `{Γ = Γ^T ⪰ 0, tr Γ = 1}`.
pub fn project_spectraplex(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sorted_symmetric_eigen(m);
    let projected = project_simplex(&values);
    let d = DMatrix::from_diagonal(&DVector::from_vec(projected));
    &vectors * d * vectors.transpose()
}

fn project_simplex(x: &[f64]) -> Vec<f64> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if uj - candidate > 0.0 {
            tau = candidate;
        }
    }
    x.iter().map(|&xi| (xi - tau).max(0.0)).collect()
}

/// Minimizes `s ↦ exp(c (a0 + a1 s)²) (r0 + r1 s + r2 s²)` over `[0, 1]`.
fn segment_minimum(a0: f64, a1: f64, c: f64, r0: f64, r1: f64, r2: f64) -> (f64, f64) {
    let phi = |s: f64| (c * (a0 + a1 * s).powi(2)).exp() * (r0 + r1 * s + r2 * s * s).max(0.0);
    let samples = 32;
    let mut best = (0.0, phi(0.0));
    let mut best_i = 0;
    for i in 1..=samples {
        let s = i as f64 / samples as f64;
        let val = phi(s);
        if val < best.1 {
            best = (s, val);
            best_i = i;
        }
    }
    // golden-section refinement around the best sample
    let h = 1.0 / samples as f64;
    let (mut lo, mut hi) = (((best_i as f64) - 1.0) * h, ((best_i as f64) + 1.0) * h);
    lo = lo.max(0.0);
    hi = hi.min(1.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (phi(x1), phi(x2));
    for _ in 0..80 {
        if hi - lo < 1e-15 {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = phi(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = phi(x2);
        }
    }
    for (s, val) in [(x1, f1), (x2, f2)] {
        if val < best.1 {
            best = (s, val);
        }
    }
    // exact vertex of the quadratic factor
    if r2 > 0.0 {
        let s = (-r1 / (2.0 * r2)).clamp(0.0, 1.0);
        let val = phi(s);
        if val < best.1 {
            best = (s, val);
        }
    }
    best
}

/// Frank–Wolfe/ODA minimization of [`DirectionProblem::cost`] over mixed
/// states: each step moves on the segment toward the projector onto the
/// lowest eigenvector of the gradient, with an exact one-dimensional search;
/// a projected-gradient segment is tried as well and the lower of the two is
/// kept, so the cost never increases.
pub fn oda_minimize(
    problem: &DirectionProblem,
    temperature: Option<f64>,
    gamma0: &DMatrix<f64>,
    opts: &OdaOptions,
) -> Result<OdaResult> {
    let d = problem.dim;
    if gamma0.nrows() != d || gamma0.ncols() != d {
        return Err(Error::InvalidInput("initial state has the wrong dimension".into()));
    }
    if let Some(t) = temperature {
        if !(t > 0.0) {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {t}")));
        }
    }
    let sign = opts.exponent_sign;
    let c = match temperature {
        Some(t) => sign.value() / (2.0 * t * t),
        None => 0.0,
    };
    let mut gamma = project_spectraplex(gamma0);
    let mut cost = problem.cost(&gamma, temperature, sign);
    if d == 1 {
        return Ok(OdaResult {
            gamma,
            cost,
            gap: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let q_scale = problem.q.iter().fold(0.0f64, |m, x| m.max(x.abs())) * problem.q.nrows() as f64;
    let mut eta = 1.0 / (4.0 * q_scale.max(f64::MIN_POSITIVE));
    let mut gap = f64::INFINITY;

    let segment = |gamma: &DMatrix<f64>, dir: &DMatrix<f64>| {
        let w0 = problem.weights(gamma);
        let wd = problem.weights(dir);
        let qw0 = &problem.q * &w0;
        let qwd = &problem.q * &wd;
        let r0 = problem.r0 + 2.0 * problem.b.dot(&w0) + w0.dot(&qw0);
        let r1 = 2.0 * (problem.b.dot(&wd) + w0.dot(&qwd));
        let r2 = wd.dot(&qwd);
        let a0 = problem.energy_deviation(gamma);
        let a1 = problem.e.component_mul(dir).sum();
        segment_minimum(a0, a1, c, r0, r1, r2)
    };

    for iter in 0..opts.max_iter {
        let grad = problem.gradient(&gamma, temperature, sign);
        let grad = (&grad + grad.transpose()) * 0.5;
        let (values, vectors) = sorted_symmetric_eigen(&grad);
        let x = vectors.column(0).into_owned();
        let extreme = &x * x.transpose();
        gap = grad.component_mul(&gamma).sum() - values[0];
        if gap <= opts.tol || gap <= opts.rel_tol * cost {
            return Ok(OdaResult {
                gamma,
                cost,
                gap,
                iterations: iter,
                converged: true,
            });
        }
        let fw_dir = &extreme - &gamma;
        let (s_fw, f_fw) = segment(&gamma, &fw_dir);

        let target = project_spectraplex(&(&gamma - &grad * eta));
        let pg_dir = &target - &gamma;
        let (s_pg, f_pg) = segment(&gamma, &pg_dir);
        if s_pg > 0.99 {
            eta *= 2.0;
        } else if s_pg < 0.5 {
            eta *= 0.5;
        }

        let (mut next, mut next_cost) = if f_pg < f_fw {
            (&gamma + &pg_dir * s_pg, f_pg)
        } else {
            (&gamma + &fw_dir * s_fw, f_fw)
        };
        if let Some((start, clipped, projected)) = problem.face_newton(&gamma, &grad, temperature, sign) {
            for step in [clipped, projected] {
                let (s_nt, f_nt) = segment(&start, &step);
                if f_nt < next_cost {
                    next = &start + &step * s_nt;
                    next_cost = f_nt;
                }
            }
        }
        if iter % 10 == 9 || !(next_cost < cost) {
            let (polished, f_lm) = factored_polish(problem, &gamma, temperature, sign, 50);
            if f_lm < next_cost {
                next = polished;
                next_cost = f_lm;
            }
        }
        if !(next_cost < cost) {
            break;
        }
        gamma = project_spectraplex(&next);
        cost = problem.cost(&gamma, temperature, sign);
    }
    Ok(OdaResult {
        gamma,
        cost,
        gap,
        iterations: opts.max_iter,
        converged: gap <= opts.tol || gap <= opts.rel_tol * cost,
    })
}

/// Levenberg–Marquardt refinement of [`DirectionProblem::cost`] in the
/// factored form `Γ = B Bᵀ / ‖B‖²`, where the cost is a sum of squares of the
/// whitened density residual. Low-rank minimizers are reached by rotating the
/// columns of `B`, which linear steps in `Γ` do only slowly.
fn factored_polish(
    problem: &DirectionProblem,
    gamma: &DMatrix<f64>,
    temperature: Option<f64>,
    sign: ExponentSign,
    max_iter: usize,
) -> (DMatrix<f64>, f64) {
    let d = problem.dim;
    let np = problem.pairs.len();
    let mut best = (gamma.clone(), problem.cost(gamma, temperature, sign));
    if d < 2 || np == 0 {
        return best;
    }
    let (qv, qvec) = sorted_symmetric_eigen(&problem.q);
    let qmax = qv.last().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..np).filter(|&i| qv[i] > 1e-14 * qmax).collect();
    if keep.is_empty() {
        return best;
    }
    // z(w) = Σ^{1/2} Vᵀ w + Σ^{-1/2} Vᵀ b, so that R = ‖z‖² + κ
    let whiten = DMatrix::from_fn(keep.len(), np, |r, c| qv[keep[r]].sqrt() * qvec[(c, keep[r])]);
    let offset = DVector::from_fn(keep.len(), |r, _| {
        qvec.column(keep[r]).dot(&problem.b) / qv[keep[r]].sqrt()
    });
    let kappa = (problem.r0 - offset.norm_squared()).max(0.0);
    let c = match temperature {
        Some(t) => sign.value() / (2.0 * t * t),
        None => 0.0,
    };

    let (values, vectors) = sorted_symmetric_eigen(gamma);
    let top = values.last().copied().unwrap_or(0.0).max(1e-300);
    let rank = values.iter().filter(|&&x| x > 1e-10 * top).count();
    let r = (rank + 2).min(d);
    let mut b = DMatrix::from_fn(d, r, |row, col| {
        let i = d - 1 - col;
        vectors[(row, i)] * values[i].max(0.0).sqrt()
    });
    if b.norm() == 0.0 {
        return best;
    }
    b /= b.norm();

    let gamma_of = |b: &DMatrix<f64>| (b * b.transpose()) / b.norm_squared();
    // residual vector [e^{g/2} z; e^{g/2} √κ] and its Jacobian in vec(B)
    let residual = |b: &DMatrix<f64>, jac: bool| -> (DVector<f64>, Option<DMatrix<f64>>) {
        let g = gamma_of(b);
        let w = problem.weights(&g);
        let z = &whiten * &w + &offset;
        let dev = problem.energy_deviation(&g);
        let half = (0.5 * c * dev * dev).exp();
        let mut res = DVector::zeros(z.len() + 1);
        res.rows_mut(0, z.len()).copy_from(&(&z * half));
        res[z.len()] = half * kappa.sqrt();
        if !jac {
            return (res, None);
        }
        let n2 = b.norm_squared();
        let mut jm = DMatrix::zeros(res.len(), b.len());
        for col in 0..b.ncols() {
            for row in 0..b.nrows() {
                // dΓ for a unit change of B[row, col]
                let mut dg = DMatrix::zeros(d, d);
                for k in 0..d {
                    dg[(row, k)] += b[(k, col)];
                    dg[(k, row)] += b[(k, col)];
                }
                dg /= n2;
                dg -= &g * (2.0 * b[(row, col)] / n2);
                let dz = &whiten * problem.weights(&dg);
                let ddev = problem.e.component_mul(&dg).sum();
                let dlog = c * dev * ddev;
                let idx = col * b.nrows() + row;
                for i in 0..z.len() {
                    jm[(i, idx)] = half * (dz[i] + dlog * z[i]);
                }
                jm[(z.len(), idx)] = half * dlog * kappa.sqrt();
            }
        }
        (res, Some(jm))
    };

    let mut lambda = 1e-6;
    let (mut res, _) = residual(&b, false);
    let mut f = res.norm_squared();
    for _ in 0..max_iter {
        let (_, jm) = residual(&b, true);
        let jm = jm.expect("jacobian requested");
        let jtj = jm.transpose() * &jm;
        let jtr = jm.transpose() * &res;
        let scale = jtj.diagonal().max().max(1e-300);
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * scale;
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let trial = &b + DMatrix::from_column_slice(d, r, step.as_slice());
            let (tres, _) = residual(&trial, false);
            let tf = tres.norm_squared();
            if tf < f {
                b = &trial / trial.norm();
                res = tres;
                f = tf;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
        let g = gamma_of(&b);
        let cost = problem.cost(&g, temperature, sign);
        if cost < best.1 {
            best = (g, cost);
        }
        if f <= 1e-30 * (1.0 + problem.r0) {
            break;
        }
    }
    best
}

/// Outcome of the direction problem at one potential.
#[derive(Debug, Clone)]
pub struct DirectionResult {
    pub gamma: DMatrix<f64>,
    pub density: Field,
    pub cost: f64,
    /// `‖ρ_Γ - ρ‖` in the grid L² norm.
    pub residual_norm: f64,
    /// `(ρ_Γ - ρ) / ‖ρ_Γ - ρ‖`, absent when the residual vanishes.
    pub direction: Option<Field>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the direction problem on `active` and forms the ascent direction.
pub fn solve_direction(
    active: &ActiveSet,
    rho: &Field,
    temperature: Option<f64>,
    gamma0: Option<&DMatrix<f64>>,
    opts: &OdaOptions,
) -> Result<DirectionResult> {
    let problem = DirectionProblem::new(active, rho)?;
    let start = gamma0.cloned().unwrap_or_else(|| active.uniform_level_state());
    let oda = oda_minimize(&problem, temperature, &start, opts)?;
    let density = active.density(&oda.gamma);
    let residual = density.sub(rho)?;
    let residual_norm = residual.norm();
    let direction = (residual_norm > 0.0).then(|| residual.scale(1.0 / residual_norm));
    Ok(DirectionResult {
        gamma: oda.gamma,
        density,
        cost: oda.cost,
        residual_norm,
        direction,
        iterations: oda.iterations,
        converged: oda.converged,
    })
}

/// Best direction in the two-fold case by a circle search over
/// `u_θ ∝ ½(ρ_ψ + ρ_Φ) - ρ + cos 2θ ½(ρ_ψ - ρ_Φ) + sin 2θ ρ_ψΦ`, maximizing
/// `∫(½(ρ_ψ + ρ_Φ) - ρ) u_θ - ε √(A² + B²)`. Returns `θ*`, the unit
/// direction and the optimal value.
pub fn twofold_direction(
    rho_psi: &Field,
    rho_phi: &Field,
    rho_cross: &Field,
    rho: &Field,
    epsilon: f64,
) -> Result<(f64, Field, f64)> {
    let grid = *rho.grid();
    for f in [rho_psi, rho_phi, rho_cross] {
        if f.grid() != &grid {
            return Err(Error::GridMismatch);
        }
    }
    let mean = rho_psi.add(rho_phi)?.scale(0.5).sub(rho)?;
    let half_diff = rho_psi.sub(rho_phi)?.scale(0.5);
    let basis = [&mean, &half_diff, rho_cross];
    let gram = DMatrix::from_fn(3, 3, |r, c| grid.dot(basis[r].values(), basis[c].values()));
    let value = |theta: f64| {
        let coef = DVector::from_vec(vec![1.0, (2.0 * theta).cos(), (2.0 * theta).sin()]);
        let g = &gram * &coef;
        let norm2 = coef.dot(&g);
        if norm2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let n = norm2.sqrt();
        // ⟨mean, u⟩, A = ⟨half_diff, u⟩, B = ⟨cross, u⟩
        let (m, a, b) = (g[0] / n, g[1] / n, g[2] / n);
        m - epsilon * (a * a + b * b).sqrt()
    };
    let samples = 720;
    let step = std::f64::consts::PI / samples as f64;
    let mut best = (0.0, value(0.0));
    for i in 1..samples {
        let th = i as f64 * step;
        let val = value(th);
        if val > best.1 {
            best = (th, val);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Degenerate("direction family vanishes identically".into()));
    }
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (best.0 - step, best.0 + step);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (value(x1), value(x2));
    for _ in 0..100 {
        if f1 > f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = value(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = value(x2);
        }
    }
    for (th, val) in [(x1, f1), (x2, f2)] {
        if val > best.1 {
            best = (th, val);
        }
    }
    let theta = best.0.rem_euclid(std::f64::consts::PI);
    let u = mean
        .axpy((2.0 * theta).cos(), &half_diff)?
        .axpy((2.0 * theta).sin(), rho_cross)?;
    let n = u.norm();
    Ok((theta, u.scale(1.0 / n), best.1))
}

/// The matrix `∫u(ρ_in - ρ) 𝟙 + ∫u M_φ` over the configurations of `exact`.
pub fn derivative_matrix(exact: &ActiveSet, rho: &Field, u: &Field) -> Result<DMatrix<f64>> {
    let grid = *rho.grid();
    if exact.grid() != &grid || u.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let d = exact.dim();
    let base = grid.dot(u.values(), exact.rho_in.sub(rho)?.values());
    let mut m = DMatrix::from_diagonal_element(d, d, base);
    for ((a, b), f) in &exact.out_densities {
        let x = grid.dot(u.values(), f.values());
        m[(*a, *b)] += x;
        if a != b {
            m[(*b, *a)] += x;
        }
    }
    Ok(m)
}

/// One-sided directional derivative of `G^k` at the potential of `exact`
/// (an active set with zero cutoff): the `(k - m_k)`-th smallest eigenvalue
/// of [`derivative_matrix`].
pub fn directional_derivative(exact: &ActiveSet, rho: &Field, u: &Field) -> Result<f64> {
    let m = derivative_matrix(exact, rho, u)?;
    let (values, _) = sorted_symmetric_eigen(&m);
    Ok(values[exact.k - exact.level.start])
}

/// Exact-level active set of state `k`.
pub fn exact_level(levels: &LevelSolve, k: usize) -> Result<ActiveSet> {
    build_active_set(&levels.nbody, &levels.spectrum, k, 0.0)
}

/// Second derivative of `G^k` on `directions` at a non-degenerate level,
/// `2 Σ (E_i - E_j)^{-1} ⟨φ_i, u φ_j⟩ ⟨φ_i, h φ_j⟩` over `i ∈ I_k` and
/// orbitals `j ∉ I_k` of `spectrum`. Exact when `spectrum` is complete.
pub fn hessian_matrix(
    spectrum: &OneBodySpectrum,
    occupied: &[usize],
    gap_tol: f64,
    directions: &[Field],
) -> Result<DMatrix<f64>> {
    let grid = *spectrum.grid();
    let empty: Vec<usize> = (0..spectrum.len()).filter(|j| !occupied.contains(j)).collect();
    let mut terms: Vec<(f64, Vec<f64>)> = Vec::new();
    for &i in occupied {
        for &j in &empty {
            let gap = spectrum.energies[i] - spectrum.energies[j];
            if gap.abs() < gap_tol {
                return Err(Error::Degenerate(format!(
                    "orbitals {i} and {j} are within {gap_tol:e} of each other"
                )));
            }
            let pair: Vec<f64> = spectrum.orbitals[i]
                .values()
                .iter()
                .zip(spectrum.orbitals[j].values())
                .map(|(a, b)| a * b)
                .collect();
            terms.push((2.0 / gap, pair));
        }
    }
    let proj: Vec<Vec<f64>> = directions
        .iter()
        .map(|u| terms.iter().map(|(_, p)| grid.dot(u.values(), p)).collect())
        .collect();
    let n = directions.len();
    Ok(DMatrix::from_fn(n, n, |a, b| {
        terms
            .iter()
            .enumerate()
            .map(|(t, (c, _))| c * proj[a][t] * proj[b][t])
            .sum()
    }))
}

/// An orbital entering a weighted energy sum `Σ_k w_k E_k`. `orbital` lies in
/// the span of the computed orbitals `level`, which share its energy.
#[derive(Debug, Clone)]
pub struct WeightedOrbital {
    pub orbital: Field,
    pub energy: f64,
    pub weight: f64,
    pub level: Range<usize>,
}

/// Action of the second derivative of `G^k` at a non-degenerate level on the
/// field `s`: `Σ 2 (E_i - E_j)^{-1} ⟨φ_i φ_j, s⟩ φ_i φ_j` over `i ∈ I_k` and
/// every orbital `j ∉ I_k`. See [`weighted_hessian_apply`].
pub fn hessian_apply(spectrum: &OneBodySpectrum, occupied: &[usize], gap_tol: f64, s: &Field, tol: f64) -> Result<Field> {
    if occupied.iter().any(|&i| i >= spectrum.len()) {
        return Err(Error::InvalidInput("occupied orbital outside the spectrum".into()));
    }
    let levels = spectrum.levels(gap_tol);
    let mut states = Vec::with_capacity(occupied.len());
    for &i in occupied {
        let level = levels.iter().find(|r| r.contains(&i)).expect("grouping covers the spectrum").clone();
        if let Some(j) = level.clone().find(|j| !occupied.contains(j)) {
            return Err(Error::Degenerate(format!(
                "orbitals {i} and {j} are within {gap_tol:e} of each other"
            )));
        }
        states.push(WeightedOrbital {
            orbital: spectrum.orbitals[i].clone(),
            energy: spectrum.energies[i],
            weight: 1.0,
            level,
        });
    }
    weighted_hessian_apply(spectrum, &states, s, tol)
}

/// Second derivative of `Σ_k w_k E_k` applied to `s`, each `E_k` perturbed
/// with its own degenerate level held together:
/// `Σ_k w_k Σ_{j ∉ level_k} 2 (E_k - E_j)^{-1} ⟨χ_k φ_j, s⟩ χ_k φ_j`.
/// Orbitals held by `spectrum` enter explicitly, the rest of the spectrum
/// through the projected equations `Q (H - E_k) Q y_k = Q (s χ_k)`, `Q`
/// removing the computed orbitals, which are positive definite because
/// `spectrum` holds the lowest orbitals. Those are solved by
/// Jacobi-preconditioned conjugate gradients to relative residual `tol`.
pub fn weighted_hessian_apply(spectrum: &OneBodySpectrum, states: &[WeightedOrbital], s: &Field, tol: f64) -> Result<Field> {
    let grid = *spectrum.grid();
    if s.grid() != &grid || states.iter().any(|st| st.orbital.grid() != &grid) {
        return Err(Error::GridMismatch);
    }
    if states.iter().any(|st| st.level.end > spectrum.len()) {
        return Err(Error::InvalidInput("orbital level outside the spectrum".into()));
    }
    let m = grid.len();
    let mut out = vec![0.0; m];
    for st in states {
        let chi = st.orbital.values();
        for j in (0..spectrum.len()).filter(|j| !st.level.contains(j)) {
            let gap = st.energy - spectrum.energies[j];
            let phi_j = spectrum.orbitals[j].values();
            let c = 2.0 * st.weight / gap * grid.weight() * (0..m).map(|x| chi[x] * phi_j[x] * s.values()[x]).sum::<f64>();
            for x in 0..m {
                out[x] += c * chi[x] * phi_j[x];
            }
        }
    }
    if spectrum.complete {
        return Field::new(grid, out);
    }

    let project = |x: &mut [f64]| {
        for phi in &spectrum.orbitals {
            let c = grid.dot(phi.values(), x);
            for (a, b) in x.iter_mut().zip(phi.values()) {
                *a -= c * b;
            }
        }
    };
    let potential = spectrum.potential.values();
    let kinetic_diag = 2.0 * grid.dim() as f64 / (grid.spacing() * grid.spacing());
    let responses: Vec<Vec<f64>> = states
        .par_iter()
        .map(|st| {
            let e = st.energy;
            let chi = st.orbital.values();
            let diag: Vec<f64> = potential.iter().map(|&p| (kinetic_diag + p - e).max(0.1 * kinetic_diag)).collect();
            let apply = |x: &[f64], out: &mut [f64]| {
                grid.hamiltonian_into(potential, x, out);
                for (o, &y) in out.iter_mut().zip(x) {
                    *o -= e * y;
                }
                project(out);
            };
            let precondition = |r: &[f64]| {
                let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
                project(&mut z);
                z
            };
            let mut r: Vec<f64> = chi.iter().zip(s.values()).map(|(a, b)| a * b).collect();
            project(&mut r);
            let b_norm = grid.dot(&r, &r).sqrt();
            let mut y = vec![0.0; m];
            if b_norm == 0.0 {
                return y;
            }
            let mut z = precondition(&r);
            let mut p = z.clone();
            let mut rz = grid.dot(&r, &z);
            let mut ap = vec![0.0; m];
            for _ in 0..10 * m.max(100) {
                apply(&p, &mut ap);
                let alpha = rz / grid.dot(&p, &ap);
                for x in 0..m {
                    y[x] += alpha * p[x];
                    r[x] -= alpha * ap[x];
                }
                if grid.dot(&r, &r).sqrt() <= tol * b_norm {
                    break;
                }
                z = precondition(&r);
                let rz_next = grid.dot(&r, &z);
                for x in 0..m {
                    p[x] = z[x] + rz_next / rz * p[x];
                }
                rz = rz_next;
            }
            y
        })
        .collect();
    for (st, y) in states.iter().zip(&responses) {
        let chi = st.orbital.values();
        for x in 0..m {
            out[x] -= 2.0 * st.weight * chi[x] * y[x];
        }
    }
    Field::new(grid, out)
}

/// Second-order model of the dual around a mixed state: `Σ_k w_k E_k` over
/// the natural orbitals of the state, valid while each partially occupied
/// orbital cluster stays degenerate. `constraints` are the first-order
/// conditions `⟨c, δv⟩ = b` keeping (or bringing back) those clusters
/// together.
#[derive(Debug, Clone)]
pub struct LevelModel {
    pub states: Vec<WeightedOrbital>,
    pub constraints: Vec<(Field, f64)>,
}

/// Builds the [`LevelModel`] of `gamma` restricted to the members `support`
/// of `active`. Its one-body density matrix `γ_ij = Σ_IJ Γ_IJ ⟨I| c_i† c_j |J⟩`
/// is diagonalized within clusters of orbitals that are degenerate under
/// `gap_tol` or exchanged between two supporting configurations; the density
/// of the state is `Σ_k w_k χ_k²`. A cluster with unequal occupations gets
/// the constraints `⟨φ_i φ_j, δv⟩ = 0` for `i ≠ j` and
/// `⟨φ_i² - φ_f², δv⟩ = E_f - E_i`.
pub fn level_model(
    active: &ActiveSet,
    spectrum: &OneBodySpectrum,
    gamma: &DMatrix<f64>,
    support: &[usize],
    gap_tol: f64,
) -> Result<LevelModel> {
    let n = spectrum.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let join = |parent: &mut Vec<usize>, i: usize, j: usize| {
        let (a, b) = (root(parent, i), root(parent, j));
        parent[a.max(b)] = a.min(b);
    };
    for level in spectrum.levels(gap_tol) {
        for i in level.clone().skip(1) {
            join(&mut parent, level.start, i);
        }
    }
    let mut one_body = DMatrix::<f64>::zeros(n, n);
    for &a in support {
        for &b in support {
            let (ca, cb) = (&active.members[a].orbitals, &active.members[b].orbitals);
            if ca.iter().chain(cb).any(|&i| i >= n) {
                return Err(Error::InvalidInput("configuration uses orbitals outside the spectrum".into()));
            }
            match coupling(ca, cb) {
                Coupling::Diagonal => {
                    for &i in ca {
                        one_body[(i, i)] += gamma[(a, b)];
                    }
                }
                Coupling::Swap { i, j, sign } => {
                    one_body[(i, j)] += sign * gamma[(a, b)];
                    join(&mut parent, i, j);
                }
                Coupling::None => {}
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut index_of = vec![usize::MAX; n];
    for i in 0..n {
        let r = root(&mut parent, i);
        if index_of[r] == usize::MAX {
            index_of[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[index_of[r]].push(i);
    }

    let grid = *spectrum.grid();
    let scale = one_body.trace().abs().max(f64::MIN_POSITIVE);
    let mut states = Vec::new();
    let mut constraints = Vec::new();
    for cluster in &clusters {
        let block = DMatrix::from_fn(cluster.len(), cluster.len(), |r, c| one_body[(cluster[r], cluster[c])]);
        if block.abs().max() <= 1e-14 * scale {
            continue;
        }
        let (occupations, vectors) = sorted_symmetric_eigen(&block);
        let energy = cluster.iter().map(|&i| spectrum.energies[i]).sum::<f64>() / cluster.len() as f64;
        let level = cluster[0]..cluster[cluster.len() - 1] + 1;
        if level.len() != cluster.len() {
            return Err(Error::Degenerate("orbital cluster is not contiguous in energy".into()));
        }
        for (k, &w) in occupations.iter().enumerate() {
            if w <= 1e-12 * scale {
                continue;
            }
            let mut chi = vec![0.0; grid.len()];
            for (c, &i) in cluster.iter().enumerate() {
                let u = vectors[(c, k)];
                for (x, &p) in chi.iter_mut().zip(spectrum.orbitals[i].values()) {
                    *x += u * p;
                }
            }
            states.push(WeightedOrbital {
                orbital: Field::new(grid, chi)?,
                energy,
                weight: w,
                level: level.clone(),
            });
        }
        let uniform = occupations[occupations.len() - 1] - occupations[0] <= 1e-9 * scale;
        if cluster.len() > 1 && !uniform {
            let f = cluster[0];
            let phi_f = &spectrum.orbitals[f];
            for (r, &i) in cluster.iter().enumerate() {
                let phi_i = &spectrum.orbitals[i];
                if r > 0 {
                    let diff = phi_i.zip_map(phi_f, |a, b| a * a - b * b)?;
                    constraints.push((diff, spectrum.energies[f] - spectrum.energies[i]));
                }
                for &j in &cluster[r + 1..] {
                    constraints.push((phi_i.zip_map(&spectrum.orbitals[j], |a, b| a * b)?, 0.0));
                }
            }
        }
    }
    Ok(LevelModel { states, constraints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use crate::manybody::build_active_set;
    use crate::spectral::dense_eigenpairs;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let g = &b * b.transpose();
        &g / g.trace()
    }

    fn setup(particles: usize, k: usize, t_scale: f64) -> (LevelSolve, ActiveSet, Field) {
        let g = Grid::new(1, 3.0, 60, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| 0.5 * x[0] * x[0] + 0.2 * x[0]);
        let levels = solve_levels(&g, &v, particles, k, 1e6, &EigenOptions::default(), None).unwrap();
        let t = t_scale * (levels.spectrum.energies[particles + k] - levels.spectrum.energies[0]);
        let active = build_active_set(&levels.nbody, &levels.spectrum, k, t).unwrap();
        let rho = Field::from_fn(g, |x| (-(x[0] - 0.1).powi(2)).exp());
        let rho = rho.scale(particles as f64 / rho.integral());
        (levels, active, rho)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (particles, k, t) in [(2, 1, 0.6), (2, 2, 0.9), (3, 2, 1.0)] {
            let (_, active, rho) = setup(particles, k, t);
            let d = active.dim();
            assert!((2..=20).contains(&d), "dim {d}");
            let problem = DirectionProblem::new(&active, &rho).unwrap();
            for sign in [ExponentSign::Positive, ExponentSign::Negative] {
                let temp = Some(0.7 * t);
                let gamma = random_state(d, &mut rng);
                let grad = problem.gradient(&gamma, temp, sign);
                let h = 1e-6;
                for a in 0..d {
                    for b in 0..d {
                        let mut gp = gamma.clone();
                        gp[(a, b)] += h;
                        let mut gm = gamma.clone();
                        gm[(a, b)] -= h;
                        let fd = (problem.cost(&gp, temp, sign) - problem.cost(&gm, temp, sign)) / (2.0 * h);
                        let scale = grad.abs().max().max(1e-12);
                        assert!((fd - grad[(a, b)]).abs() <= 1e-6 * scale, "{fd} vs {}", grad[(a, b)]);
                    }
                }
            }
        }
    }

    #[test]
    fn cost_matches_density_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, active, rho) = setup(2, 2, 0.9);
        let problem = DirectionProblem::new(&active, &rho).unwrap();
        let gamma = random_state(active.dim(), &mut rng);
        let direct = active.density(&gamma).sub(&rho).unwrap().norm().powi(2);
        assert_relative_eq!(problem.residual_sq(&gamma), direct, max_relative = 1e-10);
        let dev = active.energy(&gamma) - active.reference_energy;
        assert_relative_eq!(problem.energy_deviation(&gamma), dev, epsilon = 1e-10);
    }

    #[test]
    fn single_configuration_cost() {
        let (levels, _, rho) = setup(2, 0, 0.0);
        let active = build_active_set(&levels.nbody, &levels.spectrum, 0, 0.0).unwrap();
        assert_eq!(active.dim(), 1);
        let problem = DirectionProblem::new(&active, &rho).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let psi = active.density(&one);
        assert_relative_eq!(
            problem.cost(&one, Some(0.1), ExponentSign::Positive),
            psi.sub(&rho).unwrap().norm().powi(2),
            max_relative = 1e-10
        );
        let res = oda_minimize(&problem, Some(0.1), &one, &OdaOptions::default()).unwrap();
        assert!(res.converged && res.iterations == 0);
    }

    #[test]
    fn recovers_a_mixed_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, active, _) = setup(2, 2, 0.9);
        let target = random_state(active.dim(), &mut rng);
        let rho = active.density(&target);
        let problem = DirectionProblem::new(&active, &rho).unwrap();
        let c0 = problem.cost(&target, None, ExponentSign::Positive);
        assert!(c0 < 1e-13, "cost at target {c0}");
        let grad = problem.gradient(&target, None, ExponentSign::Positive);
        assert!(grad.abs().max() < 1e-7);
        let res = oda_minimize(&problem, None, &active.uniform_level_state(), &OdaOptions::default()).unwrap();
        assert!(res.cost < 1e-10, "cost {} after {} iterations", res.cost, res.iterations);
    }

    fn square_levels(particles: usize, k: usize) -> (Grid, Field, LevelSolve) {
        let g = Grid::new(2, 1.0, 10, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| 2.0 * (x[0] * x[0] + x[1] * x[1]) + 3.0 * x[0] * x[0] * x[1] * x[1]);
        let levels = solve_levels(&g, &v, particles, k, 1e6, &EigenOptions::default(), None).unwrap();
        (g, v, levels)
    }

    fn bump(g: Grid, particles: usize) -> Field {
        let rho = Field::from_fn(g, |x| (-2.0 * (x[0] - 0.2).powi(2) - 3.0 * (x[1] + 0.1).powi(2)).exp());
        rho.scale(particles as f64 / rho.integral())
    }

    #[test]
    fn recovers_a_pure_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, active, _) = setup(3, 2, 1.0);
        let d = active.dim();
        let c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let target = &c * c.transpose();
        let rho = active.density(&target);
        let problem = DirectionProblem::new(&active, &rho).unwrap();
        let res = oda_minimize(&problem, None, &active.uniform_level_state(), &OdaOptions::default()).unwrap();
        assert!(res.cost < 1e-20, "cost {} after {} iterations", res.cost, res.iterations);
    }

    #[test]
    fn two_state_minimum_matches_brute_force() {
        let (_, _, levels) = square_levels(1, 1);
        let exact = exact_level(&levels, 1).unwrap();
        assert_eq!(exact.dim(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = outside_target(&exact, 0.9, &mut rng);
        let problem = DirectionProblem::new(&exact, &rho).unwrap();
        // Γ = [[p, x], [x, 1 - p]] with x² ≤ p(1 - p)
        let mut brute = f64::INFINITY;
        let steps = 400;
        for i in 0..=steps {
            let p = i as f64 / steps as f64;
            let r = (p * (1.0 - p)).sqrt();
            for j in 0..=steps {
                let x = -r + 2.0 * r * j as f64 / steps as f64;
                let gamma = DMatrix::from_row_slice(2, 2, &[p, x, x, 1.0 - p]);
                brute = brute.min(problem.cost(&gamma, None, ExponentSign::Positive));
            }
        }
        let res = oda_minimize(&problem, None, &exact.uniform_level_state(), &OdaOptions::default()).unwrap();
        assert!(res.cost <= brute + 1e-12, "{} vs {brute}", res.cost);
        assert!(res.cost >= brute - 1e-4 * brute, "{} vs {brute}", res.cost);
        assert!(res.gamma.determinant().abs() < 1e-8);
    }

    #[test]
    fn directional_derivative_matches_one_sided_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (particles, k) in [(1, 1), (1, 2), (2, 0), (2, 1), (2, 2)] {
            let (g, v, levels) = square_levels(particles, k);
            let exact = exact_level(&levels, k).unwrap();
            let rho = bump(g, particles);
            let base = dual_value(&levels, &rho, k).unwrap();
            for _ in 0..3 {
                let u = Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let u = u.scale(1.0 / u.norm());
                let analytic = directional_derivative(&exact, &rho, &u).unwrap();
                let eps = 1e-6;
                let moved = solve_levels(&g, &v.axpy(eps, &u).unwrap(), particles, k, 1e6, &EigenOptions::default(), None)
                    .unwrap();
                let fd = (dual_value(&moved, &rho, k).unwrap() - base) / eps;
                assert!((fd - analytic).abs() < 1e-4, "k={k}: {fd} vs {analytic}");
            }
        }
    }

    fn pure(theta: f64) -> DMatrix<f64> {
        let (c, s) = (theta.cos(), theta.sin());
        DMatrix::from_row_slice(2, 2, &[c * c, c * s, c * s, s * s])
    }

    fn level_densities(exact: &ActiveSet) -> (Field, Field, Field) {
        let psi = exact.density(&pure(0.0));
        let phi = exact.density(&pure(std::f64::consts::FRAC_PI_2));
        let cross = exact
            .density(&DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]))
            .sub(&exact.rho_in)
            .unwrap();
        (psi, phi, cross)
    }

    /// A target beyond the pure density at `theta`, away from the level's
    /// mixed-density hull, plus a component orthogonal to it.
    fn outside_target(exact: &ActiveSet, theta: f64, rng: &mut ChaCha8Rng) -> Field {
        let g = *exact.grid();
        let edge = exact.density(&pure(theta));
        let center = exact.density(&(DMatrix::identity(2, 2) * 0.5));
        let noise = Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let noise = noise.shift(-noise.integral() / (g.len() as f64 * g.weight()));
        edge.axpy(0.3, &edge.sub(&center).unwrap())
            .unwrap()
            .axpy(0.05 / noise.norm(), &noise)
            .unwrap()
    }

    #[test]
    fn circle_search_agrees_with_mixed_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (particles, k) in [(1, 1), (2, 0)] {
            let (_, _, levels) = square_levels(particles, k);
            let exact = exact_level(&levels, k).unwrap();
            assert_eq!(exact.dim(), 2);
            assert_eq!(exact.level.start, k);
            let (psi, phi, cross) = level_densities(&exact);
            for theta in [0.3, 1.2, 2.5] {
                let rho = outside_target(&exact, theta, &mut rng);
                let (_, u, value) = twofold_direction(&psi, &phi, &cross, &rho, 1.0).unwrap();
                assert_relative_eq!(u.norm(), 1.0, epsilon = 1e-12);
                let mixed = solve_direction(&exact, &rho, None, None, &OdaOptions::default()).unwrap();
                let problem = DirectionProblem::new(&exact, &rho).unwrap();
                assert!(problem.cost(&mixed.gamma, None, ExponentSign::Positive) < 1.0);
                assert!(mixed.gamma.determinant().abs() < 1e-8, "optimum should be pure");
                assert_relative_eq!(value, mixed.residual_norm, max_relative = 1e-8);
                let cos = g_dot(&u, mixed.direction.as_ref().unwrap());
                assert!(cos.clamp(-1.0, 1.0).acos() < 1e-4, "angle {}", cos.acos());
                assert_relative_eq!(directional_derivative(&exact, &rho, &u).unwrap(), value, max_relative = 1e-8);
            }
        }
    }

    fn g_dot(a: &Field, b: &Field) -> f64 {
        a.grid().dot(a.values(), b.values())
    }

    #[test]
    fn circle_search_upper_end_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, _, levels) = square_levels(1, 2);
        let exact = exact_level(&levels, 2).unwrap();
        assert_eq!(exact.level, 1..3);
        let (psi, phi, cross) = level_densities(&exact);
        let rho = outside_target(&exact, 0.7, &mut rng);
        let (_, u, value) = twofold_direction(&psi, &phi, &cross, &rho, -1.0).unwrap();
        assert_relative_eq!(directional_derivative(&exact, &rho, &u).unwrap(), value, max_relative = 1e-10);
        // no sampled member of the family does better
        for i in 0..200 {
            let th = i as f64 * std::f64::consts::PI / 200.0;
            let w = exact.density(&pure(th)).sub(&rho).unwrap();
            let w = w.scale(1.0 / w.norm());
            assert!(directional_derivative(&exact, &rho, &w).unwrap() <= value + 1e-12);
        }
    }

    #[test]
    fn circle_search_edge_cases() {
        let (_, _, levels) = square_levels(1, 1);
        let exact = exact_level(&levels, 1).unwrap();
        let (psi, phi, cross) = level_densities(&exact);
        // at a level density every direction in the family is non-ascending
        let (_, _, value) = twofold_direction(&psi, &phi, &cross, &psi, 1.0).unwrap();
        assert!(value <= 1e-12);
        // symmetric target with vanishing cross term: no ascent direction
        let zero = Field::zeros(*psi.grid());
        let mean = psi.add(&phi).unwrap().scale(0.5);
        let (_, _, value) = twofold_direction(&psi, &phi, &zero, &mean, 1.0).unwrap();
        let half = psi.sub(&phi).unwrap().scale(0.5);
        assert_relative_eq!(value, -half.norm(), max_relative = 1e-10);
        assert!(matches!(
            twofold_direction(&psi, &psi, &zero, &psi, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn derivative_is_monotone_in_the_level_and_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (particles, k) in [(1, 1), (2, 0), (2, 2)] {
            let (g, _, levels) = square_levels(particles, k);
            let rho = bump(g, particles);
            let level = levels.nbody.level_of(k).unwrap();
            for _ in 0..5 {
                let u = Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let d: Vec<f64> = level
                    .clone()
                    .map(|j| directional_derivative(&exact_level(&levels, j).unwrap(), &rho, &u).unwrap())
                    .collect();
                assert!(d.windows(2).all(|w| w[0] <= w[1] + 1e-12));
                for j in level.clone() {
                    let mirror = level.start + level.end - 1 - j;
                    let minus = directional_derivative(&exact_level(&levels, j).unwrap(), &rho, &u.scale(-1.0)).unwrap();
                    let plus = directional_derivative(&exact_level(&levels, mirror).unwrap(), &rho, &u).unwrap();
                    assert_relative_eq!(minus, -plus, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_degenerate_derivative_is_a_density_moment() {
        let (g, _, levels) = square_levels(2, 2);
        let exact = exact_level(&levels, 2).unwrap();
        assert_eq!(exact.dim(), 1);
        let rho = bump(g, 2);
        let u = Field::from_fn(g, |x| x[0] - 0.5 * x[1]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let expect = g_dot(&u, &exact.density(&one).sub(&rho).unwrap());
        assert_relative_eq!(directional_derivative(&exact, &rho, &u).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn spectraplex_projection() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, -1.0]);
        let p = project_spectraplex(&m);
        assert_relative_eq!(p.trace(), 1.0, epsilon = 1e-14);
        let (vals, _) = sorted_symmetric_eigen(&p);
        assert!(vals[0] >= -1e-14);
        let fixed = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.3]);
        assert!((project_spectraplex(&fixed) - &fixed).abs().max() < 1e-14);
    }

    #[test]
    fn hessian_matches_second_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Grid::new(1, 2.0, 24, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| x[0] * x[0] + 0.3 * x[0]);
        let rho = Field::from_fn(g, |x| (-x[0] * x[0]).exp());
        let rho = rho.scale(2.0 / rho.integral());
        let eig = EigenOptions {
            method: crate::spectral::EigenMethod::Dense,
            ..EigenOptions::default()
        };
        let dual = |w: &Field| {
            let levels = solve_levels(&g, w, 2, 1, 1e6, &eig, None).unwrap();
            dual_value(&levels, &rho, 1).unwrap()
        };
        let full = dense_eigenpairs(&g, &v).unwrap();
        let levels = solve_levels(&g, &v, 2, 1, 1e6, &eig, None).unwrap();
        let occupied = levels.nbody.configurations()[1].orbitals.clone();
        let dirs: Vec<Field> = (0..3)
            .map(|_| Field::new(g, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let h = hessian_matrix(&full, &occupied, 1e-9, &dirs).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let second = |eps: f64| {
                    let at = |sa: f64, sb: f64| {
                        dual(&v.axpy(sa * eps, &dirs[a]).unwrap().axpy(sb * eps, &dirs[b]).unwrap())
                    };
                    (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * eps * eps)
                };
                // Richardson extrapolation removes the O(eps²) term
                let fd = (4.0 * second(1e-2) - second(2e-2)) / 3.0;
                assert_relative_eq!(h[(a, b)], fd, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn hessian_action_from_a_partial_spectrum_matches_the_full_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (dim, n) in [(1usize, 40usize), (2, 9)] {
            let g = Grid::new(dim, 2.0, n, Boundary::Dirichlet).unwrap();
            let v = Field::from_fn(g, |x| x[0] * x[0] + 0.7 * x[1] * x[1] + 0.3 * x[0]);
            let full = dense_eigenpairs(&g, &v).unwrap();
            let eig = EigenOptions {
                method: crate::spectral::EigenMethod::Dense,
                ..EigenOptions::default()
            };
            let partial = lowest_eigenpairs(&g, &v, 7, &eig, None).unwrap();
            assert!(!partial.complete);
            // an excited configuration with a hole below the top orbital
            let occupied = [0, 2, 3];
            let dirs: Vec<Field> = (0..4)
                .map(|_| Field::new(g, (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let h = hessian_matrix(&full, &occupied, 1e-9, &dirs).unwrap();
            for b in 0..4 {
                let action = hessian_apply(&partial, &occupied, 1e-9, &dirs[b], 1e-12).unwrap();
                for a in 0..4 {
                    let got = g.dot(dirs[a].values(), action.values());
                    assert_relative_eq!(got, h[(a, b)], max_relative = 1e-8, epsilon = 1e-12);
                }
                let exact = hessian_apply(&full, &occupied, 1e-9, &dirs[b], 1e-12).unwrap();
                assert!(exact.sub(&action).unwrap().norm() <= 1e-8 * exact.norm());
            }
        }
    }

    #[test]
    fn level_model_reproduces_the_level_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (particles, k) in [(1, 1), (2, 0), (2, 1)] {
            let (_, _, levels) = square_levels(particles, k);
            let exact = exact_level(&levels, k).unwrap();
            let support: Vec<usize> = (0..exact.dim()).collect();
            let gap_tol = 10.0 * levels.nbody.gap_tol;
            for _ in 0..3 {
                let gamma = random_state(exact.dim(), &mut rng);
                let model = level_model(&exact, &levels.spectrum, &gamma, &support, gap_tol).unwrap();
                let total: f64 = model.states.iter().map(|s| s.weight).sum();
                assert_relative_eq!(total, particles as f64, epsilon = 1e-12);
                let mut rho = Field::zeros(*exact.grid());
                for st in &model.states {
                    assert_relative_eq!(st.orbital.norm(), 1.0, epsilon = 1e-10);
                    rho = rho.axpy(st.weight, &st.orbital.map(|x| x * x)).unwrap();
                }
                let want = exact.density(&gamma);
                assert!(rho.sub(&want).unwrap().norm() <= 1e-12 * want.norm());
                // the clusters are already degenerate: nothing to restore
                for (_, b) in &model.constraints {
                    assert!(b.abs() <= gap_tol);
                }
            }
        }
    }

    #[test]
    fn level_model_pulls_mixed_orbitals_together() {
        // 1D cutoff window: a swap pair mixes two distinct one-body levels,
        // which the constraints must close
        let (levels, active, _) = setup(2, 1, 1.0);
        let gap_tol = 10.0 * levels.nbody.gap_tol;
        let pair = (0..active.dim())
            .flat_map(|a| (a + 1..active.dim()).map(move |b| (a, b)))
            .find(|&(a, b)| matches!(coupling(&active.members[a].orbitals, &active.members[b].orbitals), Coupling::Swap { .. }))
            .expect("some configurations differ by one orbital");
        let Coupling::Swap { i, j, .. } = coupling(&active.members[pair.0].orbitals, &active.members[pair.1].orbitals) else {
            unreachable!()
        };
        let gamma = DMatrix::from_fn(active.dim(), active.dim(), |r, c| {
            let inside = |x: usize| x == pair.0 || x == pair.1;
            if inside(r) && inside(c) {
                if r == c { 0.5 } else { 0.25 }
            } else {
                0.0
            }
        });
        let support = [pair.0, pair.1];
        let model = level_model(&active, &levels.spectrum, &gamma, &support, gap_tol);
        if i.abs_diff(j) > 1 {
            assert!(model.is_err());
            return;
        }
        let model = model.unwrap();
        assert_eq!(model.constraints.len(), 2);
        let (lo, hi) = (i.min(j), i.max(j));
        let gap = levels.spectrum.energies[hi] - levels.spectrum.energies[lo];
        assert!(model.constraints.iter().any(|(_, b)| (b + gap).abs() <= 1e-12 * gap));
        // equal occupations make the cluster sum smooth: no constraints
        let diagonal = DMatrix::from_diagonal(&gamma.diagonal());
        let model = level_model(&active, &levels.spectrum, &diagonal, &support, gap_tol).unwrap();
        assert!(model.constraints.is_empty());
    }

    #[test]
    fn weighted_hessian_matches_second_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = Grid::new(1, 2.0, 24, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| x[0] * x[0] + 0.3 * x[0]);
        let weights = [(0usize, 1.0), (1, 0.5), (3, 0.25)];
        let eig = EigenOptions {
            method: crate::spectral::EigenMethod::Dense,
            ..EigenOptions::default()
        };
        let energy = |w: &Field| {
            let s = lowest_eigenpairs(&g, w, 6, &eig, None).unwrap();
            weights.iter().map(|&(i, c)| c * s.energies[i]).sum::<f64>()
        };
        let partial = lowest_eigenpairs(&g, &v, 6, &eig, None).unwrap();
        let states: Vec<WeightedOrbital> = weights
            .iter()
            .map(|&(i, c)| WeightedOrbital {
                orbital: partial.orbitals[i].clone(),
                energy: partial.energies[i],
                weight: c,
                level: i..i + 1,
            })
            .collect();
        let dirs: Vec<Field> = (0..3)
            .map(|_| Field::new(g, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        for b in 0..3 {
            let action = weighted_hessian_apply(&partial, &states, &dirs[b], 1e-12).unwrap();
            for a in 0..3 {
                let second = |eps: f64| {
                    let at = |sa: f64, sb: f64| energy(&v.axpy(sa * eps, &dirs[a]).unwrap().axpy(sb * eps, &dirs[b]).unwrap());
                    (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * eps * eps)
                };
                let fd = (4.0 * second(1e-2) - second(2e-2)) / 3.0;
                assert_relative_eq!(g.dot(dirs[a].values(), action.values()), fd, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn hessian_matches_dense_perturbation_theory() {
        // one particle, directions = grid-point indicators
        let g = Grid::new(1, 1.0, 8, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| 3.0 * x[0] * x[0] + x[0]);
        let s = dense_eigenpairs(&g, &v).unwrap();
        let dirs: Vec<Field> = (0..8)
            .map(|p| Field::new(g, (0..8).map(|q| if p == q { 1.0 } else { 0.0 }).collect()).unwrap())
            .collect();
        let h = hessian_matrix(&s, &[0], 1e-9, &dirs).unwrap();
        // Rayleigh–Schrödinger: d²E_0 along δ_p δ_q
        let w = g.weight();
        for p in 0..8 {
            for q in 0..8 {
                let mut expect = 0.0;
                for j in 1..8 {
                    let a = w * s.orbitals[0].values()[p] * s.orbitals[j].values()[p];
                    let b = w * s.orbitals[0].values()[q] * s.orbitals[j].values()[q];
                    expect += 2.0 * a * b / (s.energies[0] - s.energies[j]);
                }
                assert_relative_eq!(h[(p, q)], expect, epsilon = 1e-12);
            }
        }
        let (vals, _) = sorted_symmetric_eigen(&h);
        assert!(vals.iter().all(|&x| x <= 1e-12));
    }
}
