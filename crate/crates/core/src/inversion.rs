//! Gradient ascent on `G^k` from the Bohm potential: cooled near-level active
//! sets, ODA directions, a step ladder along `(ρ_n - ρ) / ‖ρ_n - ρ‖` with
//! step learning, and optional Newton acceleration at non-degenerate
//! levels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{
    dual_value, level_model, solve_direction, solve_levels, sorted_symmetric_eigen, weighted_hessian_apply,
    DirectionResult, LevelModel, LevelSolve, OdaOptions,
};
use crate::error::{Error, Result};
use crate::grid::{bohm_potential, Field, Grid, BOHM_FLOOR};
use crate::manybody::{build_active_set, classify_degeneracy, ActiveSet, DegeneracyReport};
use crate::spectral::{dense_eigenpairs, EigenOptions, OneBodySpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LineSearchMode {
    /// Expand the step while the cost keeps dropping, contract when the unit
    /// step is already worse; keep the best tested point.
    #[default]
    Bracketing,
    /// Branch conditions exactly as worded in the original description of the
    /// step ladder (expansion when the unit step is worse).
    Literal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionParams {
    /// `t_0 = (E_{N+k} - E_0) / (b (N + k))`.
    pub b: f64,
    /// `T_n = t_n / d`.
    pub d: f64,
    /// Cooling block length.
    pub m: usize,
    /// Cooling factor: `t_n = alpha^⌊n/m⌋ t_0`.
    pub alpha: f64,
    /// Ratio between consecutive steps of the ladder.
    pub mu: f64,
    /// Initial step, in units of `E_{N+k} - E_0` at the initial potential.
    pub nu0: f64,
    /// Convergence threshold on `√P / N`.
    pub epsilon: f64,
    /// Convergence threshold on the cooling factor `alpha^⌊n/m⌋`.
    pub delta: f64,
    pub max_outer: usize,
    /// Longest ladder explored in one line search.
    pub max_ladder: usize,
    /// The step is remembered only when `‖ρ_{n+1} - ρ‖ / N` is below this.
    pub learn_below: f64,
    pub line_search: LineSearchMode,
    /// Try a Newton-type step before the line search.
    pub quasi_newton: bool,
    /// Grids up to this size use exact Newton steps, larger ones truncated
    /// Newton-CG.
    pub newton_max_points: usize,
    /// Conjugate-gradient iterations per truncated Newton step.
    pub cg_iterations: usize,
    pub eigen: EigenOptions,
    pub oda: OdaOptions,
}

impl Default for InversionParams {
    fn default() -> Self {
        Self {
            b: 10.0,
            d: 10.0,
            m: 5,
            alpha: 0.75,
            mu: 2.0,
            nu0: 1.0,
            epsilon: 1e-5,
            delta: 1e-2,
            max_outer: 2000,
            max_ladder: 40,
            learn_below: 1e-3,
            line_search: LineSearchMode::Bracketing,
            quasi_newton: true,
            newton_max_points: 1024,
            cg_iterations: 20,
            eigen: EigenOptions::default(),
            oda: OdaOptions::default(),
        }
    }
}

impl InversionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(what.to_string()));
        if !(self.b > 0.0 && self.d > 0.0) {
            return bad("temperature divisors must be positive");
        }
        if self.m == 0 {
            return bad("cooling block length must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("cooling factor must lie in (0, 1)");
        }
        if !(self.mu > 1.0) {
            return bad("line-search ratio must exceed 1");
        }
        if !(self.nu0 > 0.0) {
            return bad("initial step must be positive");
        }
        if !(self.epsilon > 0.0 && self.delta > 0.0) {
            return bad("convergence tolerances must be positive");
        }
        Ok(())
    }

    /// `alpha^⌊n/m⌋`.
    pub fn cooling(&self, n: usize) -> f64 {
        self.alpha.powi((n / self.m) as i32)
    }
}

/// One row of the convergence log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    /// `P(v_n)`.
    pub cost: f64,
    /// `‖ρ_n - ρ‖ / N`.
    pub distance: f64,
    pub t: f64,
    pub temperature: f64,
    pub dual: f64,
    pub level_dim: usize,
    pub m_k: usize,
    pub big_m_k: usize,
    pub active_dim: usize,
    /// Step taken from `v_n` (zero on the final row).
    pub step: f64,
    /// Ladder exponent of the accepted step.
    pub ladder: i32,
    pub quasi_newton: bool,
    pub stalled: bool,
    /// Smallest gap between consecutive computed orbital energies, relative
    /// to their spread.
    pub min_orbital_gap: f64,
}

/// Outcome of a line search.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderResult {
    pub step: f64,
    pub exponent: i32,
    pub value: f64,
    pub stalled: bool,
    pub evaluations: usize,
}

/// Explores `λ = μ^j ν` and returns the best tested step. `eval(λ)` is the
/// cost at `v_n + λ u`; `p0` is the cost at `λ = 0`.
pub fn line_search<F>(p0: f64, nu: f64, mu: f64, max_ladder: usize, mode: LineSearchMode, mut eval: F) -> Result<LadderResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    let max_ladder = max_ladder.max(1) as i32;
    let mut evaluations = 0;
    let mut at = |j: i32| -> Result<f64> {
        evaluations += 1;
        let p = eval(nu * mu.powi(j))?;
        Ok(if p.is_finite() { p } else { f64::INFINITY })
    };
    let p1 = at(0)?;
    let mut best = (0, p1);
    match mode {
        LineSearchMode::Bracketing => {
            if p1 < p0 {
                let mut prev = p1;
                for j in 1..=max_ladder {
                    let p = at(j)?;
                    if p < prev {
                        best = (j, p);
                        prev = p;
                    } else {
                        break;
                    }
                }
            } else {
                let mut found = false;
                let mut prev = p1;
                for j in 1..=max_ladder {
                    let p = at(-j)?;
                    if p < best.1 {
                        best = (-j, p);
                    }
                    if found && !(p < prev) {
                        break;
                    }
                    if p < p0 {
                        found = true;
                    }
                    prev = p;
                }
            }
        }
        LineSearchMode::Literal => {
            let sign = if p1 >= p0 { 1 } else { -1 };
            let mut prev = p1;
            let mut last = 0;
            for j in 1..=max_ladder {
                let p = at(sign * j)?;
                if p <= prev {
                    break;
                }
                last = sign * j;
                prev = p;
            }
            // the literal rule keeps the last ladder point before the stop
            let p = if last == 0 { p1 } else { prev };
            best = (last, p);
        }
    }
    let stalled = !(best.1 < p0);
    if stalled && mode == LineSearchMode::Bracketing {
        return Ok(LadderResult {
            step: nu * mu.powi(-max_ladder),
            exponent: -max_ladder,
            value: best.1,
            stalled,
            evaluations,
        });
    }
    Ok(LadderResult {
        step: nu * mu.powi(best.0),
        exponent: best.0,
        value: best.1,
        stalled,
        evaluations,
    })
}

/// Everything computed at one potential for fixed temperatures.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub levels: LevelSolve,
    pub active: ActiveSet,
    pub direction: DirectionResult,
}

impl Evaluation {
    pub fn cost(&self) -> f64 {
        self.direction.cost
    }
}

/// Solves at `v`, builds the active set with cutoff `t` and minimizes the
/// direction cost at temperature `temperature`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    grid: &Grid,
    v: &Field,
    rho: &Field,
    particles: usize,
    k: usize,
    t: f64,
    temperature: Option<f64>,
    params: &InversionParams,
    warm: Option<&OneBodySpectrum>,
) -> Result<Evaluation> {
    let levels = solve_levels(grid, v, particles, k, t, &params.eigen, warm)?;
    let active = build_active_set(&levels.nbody, &levels.spectrum, k, t)?;
    let mut oda = params.oda.clone();
    // resolve the cost well below the convergence threshold
    oda.tol = oda.tol.max(1e-6 * (params.epsilon * particles as f64).powi(2));
    let direction = solve_direction(&active, rho, temperature, None, &oda)?;
    Ok(Evaluation {
        levels,
        active,
        direction,
    })
}

/// Smallest consecutive orbital gap relative to the spread of the computed
/// energies.
pub fn min_orbital_gap(energies: &[f64]) -> f64 {
    if energies.len() < 2 {
        return f64::INFINITY;
    }
    let spread = (energies[energies.len() - 1] - energies[0]).max(f64::MIN_POSITIVE);
    energies.windows(2).map(|w| (w[1] - w[0]) / spread).fold(f64::INFINITY, f64::min)
}

/// Shifts `v` so that its minimum over `{ρ ≥ 10⁻³ max ρ}` is zero.
pub fn gauge_fix(v: &Field, rho: &Field) -> Result<Field> {
    if v.grid() != rho.grid() {
        return Err(Error::GridMismatch);
    }
    let cut = 1e-3 * rho.max();
    let min = v
        .values()
        .iter()
        .zip(rho.values())
        .filter(|(_, &r)| r >= cut)
        .map(|(&x, _)| x)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::InvalidInput("density vanishes identically".into()));
    }
    Ok(v.shift(-min))
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub converged: bool,
    /// Final potential, gauge fixed.
    pub potential: Field,
    pub gamma: DMatrix<f64>,
    /// `ρ_Γ*` at the final potential.
    pub density: Field,
    /// `‖ρ_Γ* - ρ‖ / N`.
    pub distance: f64,
    /// `P` at the final potential.
    pub cost: f64,
    pub degeneracy: DegeneracyReport,
    pub iterations: usize,
    pub log: Vec<LogRow>,
    /// Cutoff and temperature of the final iteration.
    pub t: f64,
    pub temperature: f64,
    pub levels: LevelSolve,
    pub active: ActiveSet,
    /// Smallest relative orbital gap over every spectrum computed.
    pub min_orbital_gap: f64,
}

/// Receives each log row with `v_n` and `ρ_n`.
pub type Observer<'a> = dyn FnMut(&LogRow, &Field, &Field) + 'a;

fn check_target(grid: &Grid, rho: &Field, particles: usize) -> Result<()> {
    if rho.grid() != grid {
        return Err(Error::GridMismatch);
    }
    if particles == 0 {
        return Err(Error::InvalidInput("at least one particle is required".into()));
    }
    if rho.values().iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidInput("target density must be finite and nonnegative".into()));
    }
    let mass = rho.integral();
    if (mass - particles as f64).abs() > 1e-8 * particles as f64 {
        return Err(Error::InvalidInput(format!(
            "target density integrates to {mass}, expected {particles}"
        )));
    }
    if particles > grid.len() {
        return Err(Error::InvalidInput("more particles than grid points".into()));
    }
    Ok(())
}

/// Truncated Newton step for `G = Σ_k w_k E_k - ⟨v, ρ⟩` under the linear
/// constraints of `model`: the step is a particular solution of the
/// constraints plus conjugate gradients on `-PHP` in their null space, with
/// exact Hessian actions from [`weighted_hessian_apply`]. `None` if curvature
/// is lost before any progress.
fn newton_cg(spectrum: &OneBodySpectrum, model: &LevelModel, gradient: &Field, iterations: usize) -> Option<Field> {
    let grid = *gradient.grid();
    let dot = |a: &Field, b: &Field| grid.dot(a.values(), b.values());
    // orthonormal constraint basis, rhs carried along
    let mut basis: Vec<(Field, f64)> = Vec::new();
    for (c, b) in &model.constraints {
        let (mut c, mut b) = (c.clone(), *b);
        let size = c.norm();
        for (q, bq) in &basis {
            let t = dot(q, &c);
            c = c.axpy(-t, q).ok()?;
            b -= t * bq;
        }
        let norm = c.norm();
        if norm > 1e-8 * size {
            basis.push((c.scale(1.0 / norm), b / norm));
        }
    }
    let project = |f: Field| -> Option<Field> {
        basis.iter().try_fold(f, |f, (q, _)| {
            let t = dot(q, &f);
            f.axpy(-t, q).ok()
        })
    };
    let hessian = |f: &Field, tol: f64| weighted_hessian_apply(spectrum, &model.states, f, tol).ok();

    let g_norm = gradient.norm();
    let forcing = g_norm.sqrt().min(0.5);
    let mut x0 = Field::zeros(grid);
    for (q, b) in &basis {
        x0 = x0.axpy(*b, q).ok()?;
    }
    let mut r = if basis.is_empty() {
        gradient.clone()
    } else {
        project(gradient.add(&hessian(&x0, 1e-3 * forcing)?).ok()?)?
    };
    let r_norm = r.norm();
    let mut x = Field::zeros(grid);
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for i in 0..iterations {
        let ap = project(hessian(&p, 1e-3 * forcing)?.scale(-1.0))?;
        let curvature = dot(&p, &ap);
        if !(curvature > 1e-12 * dot(&p, &p)) {
            if i == 0 && basis.is_empty() {
                return None;
            }
            break;
        }
        let alpha = rr / curvature;
        x = x.axpy(alpha, &p).ok()?;
        r = r.axpy(-alpha, &ap).ok()?;
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= forcing * r_norm.max(g_norm) {
            break;
        }
        p = r.axpy(rr_next / rr, &p).ok()?;
        rr = rr_next;
    }
    x.add(&x0).ok()
}

/// Newton step for `max_v min_a G_a(v)` over the weighted configurations
/// `configs`, where `G_a(v) = Σ_{i ∈ a} E_i(v) - ⟨v, ρ⟩`. The unknowns are
/// `δv`, the weights `λ` and the common value `η`; the equations are
/// `Σ λ_a ∇G_a = 0`, `G_a = η` and `Σ λ_a = 1`. A single configuration gives
/// the plain Newton step `-H⁺ ∇G`. Returns `δv` and the updated weights.
///
/// Every orbital gap entering the second derivatives must exceed `gap_tol`.
pub fn newton_step(
    grid: &Grid,
    v: &Field,
    rho: &Field,
    configs: &[Vec<usize>],
    weights: &[f64],
    gap_tol: f64,
) -> Result<(Field, Vec<f64>)> {
    if configs.is_empty() || configs.len() != weights.len() {
        return Err(Error::InvalidInput("one weight per configuration is required".into()));
    }
    let full = dense_eigenpairs(grid, v)?;
    let m = grid.len();
    let r = configs.len();
    let w = grid.weight();
    let hessian = |occupied: &[usize]| -> Result<DMatrix<f64>> {
        let empty: Vec<usize> = (0..m).filter(|j| !occupied.contains(j)).collect();
        let phi = DMatrix::from_fn(m, empty.len(), |x, c| full.orbitals[empty[c]].values()[x]);
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for &i in occupied {
            let coef: Vec<f64> = empty
                .iter()
                .map(|&j| {
                    let gap = full.energies[i] - full.energies[j];
                    if gap.abs() < gap_tol {
                        Err(Error::Degenerate(format!("orbitals {i} and {j} nearly coincide")))
                    } else {
                        Ok(2.0 / gap)
                    }
                })
                .collect::<Result<_>>()?;
            let scaled = DMatrix::from_fn(m, empty.len(), |x, c| phi[(x, c)] * coef[c]);
            let block = &scaled * phi.transpose();
            let fi = full.orbitals[i].values();
            for y in 0..m {
                for x in 0..m {
                    hess[(x, y)] += w * w * fi[x] * fi[y] * block[(x, y)];
                }
            }
        }
        Ok(hess)
    };
    let dual_of = |occupied: &[usize]| -> (DVector<f64>, f64) {
        let mut density = vec![0.0; m];
        let mut energy = 0.0;
        for &i in occupied {
            energy += full.energies[i];
            for (d, f) in density.iter_mut().zip(full.orbitals[i].values()) {
                *d += f * f;
            }
        }
        let grad = DVector::from_fn(m, |x, _| w * (density[x] - rho.values()[x]));
        (grad, energy - grid.dot(v.values(), rho.values()))
    };

    let size = m + r + 1;
    let mut kkt = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    let mut values = Vec::with_capacity(r);
    for (a, occupied) in configs.iter().enumerate() {
        if occupied.iter().any(|&i| i >= m) {
            return Err(Error::InvalidInput("orbital index beyond the grid".into()));
        }
        let h = hessian(occupied)?;
        let (grad, value) = dual_of(occupied);
        let mut block = kkt.view_mut((0, 0), (m, m));
        block += h * weights[a];
        for x in 0..m {
            kkt[(x, m + a)] = grad[x];
            kkt[(m + a, x)] = grad[x];
            rhs[x] -= weights[a] * grad[x];
        }
        kkt[(m + a, m + r)] = -1.0;
        kkt[(m + r, m + a)] = -1.0;
        values.push(value);
    }
    // start η at the weighted mean so that only the spread of G_a matters
    let eta = values.iter().zip(weights).map(|(g, l)| g * l).sum::<f64>() / weights.iter().sum::<f64>();
    for a in 0..r {
        rhs[m + a] = eta - values[a];
    }
    rhs[m + r] = weights.iter().sum::<f64>() - 1.0;

    let (eigs, vectors) = sorted_symmetric_eigen(&kkt);
    let scale = eigs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut step = DVector::zeros(size);
    for (i, &lam) in eigs.iter().enumerate() {
        if lam.abs() > 1e-10 * scale {
            let col = vectors.column(i);
            step += col * (col.dot(&rhs) / lam);
        }
    }
    let mean = step.rows(0, m).sum() / m as f64;
    let dv = Field::new(*grid, step.rows(0, m).iter().map(|x| x - mean).collect())?;
    let lambdas = (0..r).map(|a| weights[a] + step[m + a]).collect();
    Ok((dv, lambdas))
}

/// Maximizes `G^k` for the target `rho` starting from `v_init` (default: the
/// Bohm potential of `rho`).
pub fn invert(
    grid: &Grid,
    rho: &Field,
    particles: usize,
    k: usize,
    params: &InversionParams,
    v_init: Option<&Field>,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<InversionResult> {
    params.validate()?;
    check_target(grid, rho, particles)?;
    let mut v = match v_init {
        Some(v) => {
            if v.grid() != grid {
                return Err(Error::GridMismatch);
            }
            v.clone()
        }
        None => bohm_potential(grid, rho, BOHM_FLOOR)?,
    };
    let at = |iteration: usize| move |e: Error| Error::AtIteration {
        iteration,
        source: Box::new(e),
    };

    let start = solve_levels(grid, &v, particles, k, 0.0, &params.eigen, None).map_err(at(0))?;
    let energies = &start.spectrum.energies;
    let scale = energies[particles + k] - energies[0];
    if !(scale > 0.0) {
        return Err(Error::Degenerate("initial one-body spectrum has no spread".into()));
    }
    let t0 = scale / (params.b * (particles + k) as f64);
    let nu0 = params.nu0 * scale;
    let mut nu = nu0;
    let n_f = particles as f64;
    let mut min_gap = min_orbital_gap(energies);

    let temps = |n: usize| {
        let t = params.cooling(n) * t0;
        (t, t / params.d)
    };
    let mut warm = start.spectrum;
    let (t, temp) = temps(0);
    let mut current = evaluate(grid, &v, rho, particles, k, t, Some(temp), params, Some(&warm)).map_err(at(0))?;
    min_gap = min_gap.min(min_orbital_gap(&current.levels.spectrum.energies));
    let mut current_block = 0;
    let mut log = Vec::new();
    let mut converged = false;
    let mut n = 0;

    loop {
        let (t, temp) = temps(n);
        if n / params.m != current_block {
            current = evaluate(grid, &v, rho, particles, k, t, Some(temp), params, Some(&warm)).map_err(at(n))?;
            min_gap = min_gap.min(min_orbital_gap(&current.levels.spectrum.energies));
            current_block = n / params.m;
        }
        warm = current.levels.spectrum.clone();
        let cost = current.cost();
        let level = current.levels.nbody.level_of(k).map_err(at(n))?;
        let dual = dual_value(&current.levels, rho, k)?;
        let mut row = LogRow {
            iteration: n,
            cost,
            distance: current.direction.residual_norm / n_f,
            t,
            temperature: temp,
            dual,
            level_dim: level.len(),
            m_k: level.start,
            big_m_k: level.end - 1,
            active_dim: current.active.dim(),
            step: 0.0,
            ladder: 0,
            quasi_newton: false,
            stalled: false,
            min_orbital_gap: min_gap,
        };
        if cost.sqrt() / n_f <= params.epsilon && params.cooling(n) <= params.delta {
            converged = true;
        }
        let direction = current.direction.direction.clone();
        if converged || n >= params.max_outer || direction.is_none() {
            if let Some(obs) = observer.as_deref_mut() {
                obs(&row, &v, &current.direction.density);
            }
            log.push(row);
            break;
        }
        let u = direction.expect("checked above");
        // already resolved far below the threshold: only the cooling remains
        if cost.sqrt() / n_f <= 1e-3 * params.epsilon {
            if let Some(obs) = observer.as_deref_mut() {
                obs(&row, &v, &current.direction.density);
            }
            log.push(row);
            n += 1;
            continue;
        }

        // Newton-type candidate on the configurations carrying the density
        let mut next: Option<(Field, Evaluation)> = None;
        let gamma = &current.direction.gamma;
        let top = (0..gamma.nrows()).map(|a| gamma[(a, a)]).fold(0.0, f64::max);
        let support: Vec<usize> = (0..gamma.nrows()).filter(|&a| gamma[(a, a)] > 1e-6 * top).collect();
        let dense = grid.len() <= params.newton_max_points;
        if params.quasi_newton {
            let gap_tol = 10.0 * current.levels.nbody.gap_tol;
            let candidate = if dense {
                let configs: Vec<Vec<usize>> = support.iter().map(|&a| current.active.members[a].orbitals.clone()).collect();
                let total: f64 = support.iter().map(|&a| gamma[(a, a)]).sum();
                let weights: Vec<f64> = support.iter().map(|&a| gamma[(a, a)] / total).collect();
                newton_step(grid, &v, rho, &configs, &weights, gap_tol).ok().map(|(dv, _)| dv)
            } else {
                // Newton on Σ w_k E_k over the natural orbitals of Γ, whose
                // gradient is the current ascent direction, keeping mixed
                // clusters degenerate
                let gradient = current.direction.density.sub(rho)?;
                level_model(&current.active, &current.levels.spectrum, gamma, &support, gap_tol)
                    .ok()
                    .and_then(|model| newton_cg(&current.levels.spectrum, &model, &gradient, params.cg_iterations))
            };
            if let Some(step) = candidate {
                // G^k is smooth at a non-degenerate level and concave at the
                // ground level: sufficient ascent of G decides. Near a kink of
                // an excited level G alone is unreliable, so the cost must drop.
                let smooth = k == 0 || (support.len() == 1 && level.len() == 1);
                let slope = grid.dot(current.direction.density.sub(rho)?.values(), step.values());
                let mut scale = 1.0;
                for _ in 0..3 {
                    let trial = v.axpy(scale, &step)?;
                    if let Ok(eval) = evaluate(grid, &trial, rho, particles, k, t, Some(temp), params, Some(&warm)) {
                        let gain = dual_value(&eval.levels, rho, k)? - dual;
                        let accept = if smooth {
                            gain >= 1e-4 * scale * slope && slope > 0.0
                        } else {
                            eval.cost() < cost
                        };
                        if accept {
                            row.step = scale * step.norm();
                            row.quasi_newton = true;
                            next = Some((trial, eval));
                            break;
                        }
                    }
                    scale *= 0.5;
                }
            }
        }

        if next.is_none() {
            let mut best: Option<(f64, Evaluation)> = None;
            let ladder = line_search(cost, nu, params.mu, params.max_ladder, params.line_search, |lambda| {
                let trial = v.axpy(lambda, &u)?;
                let eval = evaluate(grid, &trial, rho, particles, k, t, Some(temp), params, Some(&warm))?;
                let p = eval.cost();
                if best.as_ref().is_none_or(|(_, b)| p < b.cost()) {
                    best = Some((lambda, eval));
                }
                Ok(p)
            })
            .map_err(at(n))?;
            row.step = ladder.step;
            row.ladder = ladder.exponent;
            row.stalled = ladder.stalled;
            let trial = v.axpy(ladder.step, &u)?;
            let eval = match best {
                Some((lambda, eval)) if lambda == ladder.step => eval,
                _ => evaluate(grid, &trial, rho, particles, k, t, Some(temp), params, Some(&warm)).map_err(at(n))?,
            };
            nu = if !ladder.stalled && eval.direction.residual_norm / n_f <= params.learn_below {
                ladder.step
            } else {
                nu0
            };
            next = Some((trial, eval));
        }
        let (trial, eval) = next.expect("set above");
        min_gap = min_gap.min(min_orbital_gap(&eval.levels.spectrum.energies));
        row.min_orbital_gap = min_gap;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&row, &v, &current.direction.density);
        }
        log.push(row);
        v = trial;
        current = eval;
        n += 1;
    }

    let (t, temp) = temps(n);
    let degeneracy = classify_degeneracy(&current.levels.nbody, &current.levels.spectrum.energies, k)?;
    Ok(InversionResult {
        converged,
        potential: gauge_fix(&v, rho)?,
        gamma: current.direction.gamma.clone(),
        density: current.direction.density.clone(),
        distance: current.direction.residual_norm / n_f,
        cost: current.cost(),
        degeneracy,
        iterations: n,
        log,
        t,
        temperature: temp,
        levels: current.levels,
        active: current.active,
        min_orbital_gap: min_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use approx::assert_relative_eq;

    fn ladder(values: &[(i32, f64)], p0: f64, mode: LineSearchMode) -> LadderResult {
        line_search(p0, 1.0, 2.0, 10, mode, |lambda| {
            let j = lambda.log2().round() as i32;
            Ok(values.iter().find(|(i, _)| *i == j).map_or(1e9, |(_, p)| *p))
        })
        .unwrap()
    }

    #[test]
    fn ladder_picks_the_valley() {
        let values = [(0, 5.0), (1, 4.0), (2, 3.0), (3, 3.5), (4, 1.0)];
        let r = ladder(&values, 6.0, LineSearchMode::Bracketing);
        assert_eq!(r.exponent, 2);
        assert_eq!(r.value, 3.0);
        assert!(!r.stalled);
    }

    #[test]
    fn ladder_contracts_when_unit_step_is_worse() {
        let values = [(0, 9.0), (-1, 7.0), (-2, 4.0), (-3, 4.5)];
        let r = ladder(&values, 5.0, LineSearchMode::Bracketing);
        assert_eq!(r.exponent, -2);
        assert_eq!(r.value, 4.0);
        assert!(!r.stalled);
    }

    #[test]
    fn ladder_reports_stalls() {
        let r = ladder(&[], 5.0, LineSearchMode::Bracketing);
        assert!(r.stalled);
        assert_eq!(r.exponent, -10);
        assert_relative_eq!(r.step, 2f64.powi(-10));
    }

    #[test]
    fn literal_ladder_follows_the_worded_branches() {
        // unit step worse: climbs j while the cost keeps rising
        let values = [(0, 7.0), (1, 8.0), (2, 9.0), (3, 2.0)];
        let r = ladder(&values, 5.0, LineSearchMode::Literal);
        assert_eq!(r.exponent, 2);
        // unit step better: descends j while the cost keeps rising
        let values = [(0, 3.0), (-1, 4.0), (-2, 1.0)];
        let r = ladder(&values, 5.0, LineSearchMode::Literal);
        assert_eq!(r.exponent, -1);
    }

    #[test]
    fn cooling_is_stepwise() {
        let p = InversionParams::default();
        for n in 0..30 {
            assert_eq!(p.cooling(n), 0.75f64.powi((n / 5) as i32));
        }
        assert_eq!(p.cooling(4), 1.0);
        assert_eq!(p.cooling(5), 0.75);
    }

    #[test]
    fn rejects_bad_targets() {
        let g = Grid::new(1, 1.0, 16, Boundary::Dirichlet).unwrap();
        let rho = Field::constant(g, 1.0);
        let p = InversionParams::default();
        assert!(invert(&g, &rho, 3, 0, &p, None, None).is_err());
        let neg = Field::from_fn(g, |x| x[0]);
        assert!(invert(&g, &neg, 1, 0, &p, None, None).is_err());
        let bad = InversionParams {
            alpha: 1.5,
            ..InversionParams::default()
        };
        let rho = rho.scale(1.0 / rho.integral());
        assert!(invert(&g, &rho, 1, 0, &bad, None, None).is_err());
    }

    #[test]
    fn gauge_fix_zeroes_the_minimum_on_the_support() {
        let g = Grid::new(1, 1.0, 8, Boundary::Dirichlet).unwrap();
        let rho = Field::from_fn(g, |x| if x[0].abs() < 0.5 { 1.0 } else { 0.0 });
        let v = Field::from_fn(g, |x| 3.0 + x[0] * x[0] - if x[0].abs() > 0.5 { 10.0 } else { 0.0 });
        let fixed = gauge_fix(&v, &rho).unwrap();
        let min = fixed
            .values()
            .iter()
            .zip(rho.values())
            .filter(|(_, &r)| r > 0.0)
            .map(|(&x, _)| x)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
    }

    fn gaussians(g: Grid, particles: usize, centers: &[(f64, f64)]) -> Field {
        let rho = Field::from_fn(g, |x| centers.iter().map(|&(c, s)| (-(x[0] - c).powi(2) / (2.0 * s * s)).exp()).sum());
        rho.scale(particles as f64 / rho.integral())
    }

    #[test]
    fn single_particle_converges_quickly_from_bohm() {
        let g = Grid::new(1, 5.0, 127, Boundary::Dirichlet).unwrap();
        let rho = gaussians(g, 1, &[(0.0, 0.8)]);
        let res = invert(&g, &rho, 1, 0, &InversionParams::default(), None, None).unwrap();
        assert!(res.converged);
        assert!(res.log[0].distance < 1e-6, "initial distance {}", res.log[0].distance);
        assert!(res.distance <= 1e-5);
    }

    #[test]
    fn newton_step_matches_finite_difference_newton() {
        let g = Grid::new(1, 1.0, 6, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| 4.0 * x[0] * x[0] + x[0]);
        let rho = gaussians(g, 1, &[(0.1, 0.4)]);
        let (step, weights) = newton_step(&g, &v, &rho, &[vec![0]], &[1.0], 1e-9).unwrap();
        assert_relative_eq!(weights[0], 1.0, epsilon = 1e-12);
        let eig = EigenOptions {
            method: crate::spectral::EigenMethod::Dense,
            ..EigenOptions::default()
        };
        let dual = |w: &Field| {
            let l = solve_levels(&g, w, 1, 0, 0.0, &eig, None).unwrap();
            dual_value(&l, &rho, 0).unwrap()
        };
        let m = g.len();
        let unit = |i: usize| Field::new(g, (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).unwrap();
        let e = 1e-3;
        let grad = DVector::from_fn(m, |i, _| (dual(&v.axpy(e, &unit(i)).unwrap()) - dual(&v.axpy(-e, &unit(i)).unwrap())) / (2.0 * e));
        let hess = DMatrix::from_fn(m, m, |i, j| {
            let at = |a: f64, b: f64| dual(&v.axpy(a * e, &unit(i)).unwrap().axpy(b * e, &unit(j)).unwrap());
            (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * e * e)
        });
        let (values, vectors) = sorted_symmetric_eigen(&hess);
        let top = values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let mut fd_step = DVector::zeros(m);
        for (i, &lam) in values.iter().enumerate() {
            if lam.abs() > 1e-6 * top {
                let col = vectors.column(i);
                fd_step -= col * (col.dot(&grad) / lam);
            }
        }
        // both steps are defined up to the constant null direction
        let diff: Vec<f64> = step.values().iter().zip(fd_step.iter()).map(|(a, b)| a - b).collect();
        let mean = diff.iter().sum::<f64>() / m as f64;
        let worst = diff.iter().fold(0.0f64, |a, d| a.max((d - mean).abs()));
        assert!(worst < 1e-6 * fd_step.amax().max(1.0), "worst {worst}");
    }

    fn three_bumps(g: Grid) -> Field {
        let rho = Field::from_fn(g, |x| {
            [(-1.6, 0.7, 1.0), (0.2, 0.5, 0.8), (1.9, 0.8, 1.2)]
                .iter()
                .map(|&(c, s, w)| w * (-(x[0] - c).powi(2) / (2.0 * s * s)).exp())
                .sum()
        });
        rho.scale(3.0 / rho.integral())
    }

    #[test]
    fn constant_shifts_of_the_start_do_not_matter() {
        let g = Grid::new(1, 6.0, 127, Boundary::Dirichlet).unwrap();
        let rho = three_bumps(g);
        let p = InversionParams::default();
        let v0 = bohm_potential(&g, &rho, BOHM_FLOOR).unwrap();
        let a = invert(&g, &rho, 3, 0, &p, Some(&v0), None).unwrap();
        let b = invert(&g, &rho, 3, 0, &p, Some(&v0.shift(7.5)), None).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.density.sub(&b.density).unwrap().norm() <= 1e-8);
        let cut = 1e-3 * rho.max();
        for ((x, y), r) in a.potential.values().iter().zip(b.potential.values()).zip(rho.values()) {
            if *r >= cut {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn ground_state_dual_increases_along_first_order_steps() {
        let g = Grid::new(1, 6.0, 127, Boundary::Dirichlet).unwrap();
        let rho = three_bumps(g);
        let p = InversionParams {
            quasi_newton: false,
            max_outer: 60,
            ..InversionParams::default()
        };
        let res = invert(&g, &rho, 3, 0, &p, None, None).unwrap();
        for w in res.log.windows(2) {
            assert!(w[1].dual >= w[0].dual - 1e-10 * w[0].dual.abs().max(1.0), "{} then {}", w[0].dual, w[1].dual);
        }
        // t_n is stepwise constant over blocks of m
        let t0 = res.log[0].t;
        for row in &res.log {
            assert_eq!(row.t, p.cooling(row.iteration) * t0);
            assert_relative_eq!(row.temperature, row.t / p.d);
        }
    }

    #[test]
    fn excited_inversion_reaches_the_threshold() {
        let g = Grid::new(1, 6.0, 127, Boundary::Dirichlet).unwrap();
        let rho = three_bumps(g);
        let res = invert(&g, &rho, 3, 1, &InversionParams::default(), None, None).unwrap();
        assert!(res.converged);
        assert!(res.distance <= 1e-5);
        let last = res.log.last().unwrap();
        assert_eq!(last.m_k, 1);
    }
}
