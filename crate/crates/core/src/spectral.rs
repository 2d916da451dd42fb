//! Lowest eigenpairs of `-Δ_h + v`.
//!
//! Three back ends share one contract (orthonormal orbitals under the grid
//! inner product, nondecreasing energies, certified residuals):
//!
//! * one-dimensional Dirichlet grids give a symmetric tridiagonal matrix; the
//!   eigenvalues come from Sturm-sequence bisection and the vectors from
//!   inverse iteration with the computed shifts,
//! * everything else goes through a blocked LOBPCG iteration preconditioned by
//!   the exact inverse of a shifted grid Laplacian (diagonal in the tensor
//!   product of the one-axis eigenbases), warm started from a previous solve,
//! * small problems, or LOBPCG failures on moderate grids, fall back to dense
//!   diagonalization.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Field, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EigenMethod {
    #[default]
    Auto,
    Tridiagonal,
    Lobpcg,
    Dense,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EigenOptions {
    /// Residual tolerance relative to `1 + |E|`.
    pub tol: f64,
    pub max_iter: usize,
    pub method: EigenMethod,
    pub seed: u64,
    /// Extra block vectors carried by LOBPCG beyond the requested count.
    pub guard: usize,
    /// Grids up to this many points are solved densely under `Auto`.
    pub dense_below: usize,
    /// LOBPCG failures on grids up to this size retry densely.
    pub dense_fallback_below: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 400,
            method: EigenMethod::Auto,
            seed: 0x5eed,
            guard: 4,
            dense_below: 200,
            dense_fallback_below: 4096,
        }
    }
}

/// Lowest one-body eigenpairs of `-Δ_h + v`.
#[derive(Debug, Clone)]
pub struct OneBodySpectrum {
    pub potential: Field,
    pub energies: Vec<f64>,
    pub orbitals: Vec<Field>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// True when every eigenpair of the operator is present.
    pub complete: bool,
}

impl OneBodySpectrum {
    pub fn grid(&self) -> &Grid {
        self.potential.grid()
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Groups consecutive energies closer than `gap_tol` into one-body levels.
    pub fn levels(&self, gap_tol: f64) -> Vec<std::ops::Range<usize>> {
        group_levels(&self.energies, gap_tol)
    }
}

pub(crate) fn group_levels(sorted: &[f64], gap_tol: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i] - sorted[i - 1] > gap_tol {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// The `count` algebraically smallest eigenpairs of `-Δ_h + v`.
pub fn lowest_eigenpairs(
    grid: &Grid,
    potential: &Field,
    count: usize,
    opts: &EigenOptions,
    warm: Option<&OneBodySpectrum>,
) -> Result<OneBodySpectrum> {
    if potential.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let m = grid.len();
    if count == 0 || count > m {
        return Err(Error::InvalidInput(format!(
            "requested {count} eigenpairs on a grid of {m} points"
        )));
    }
    if potential.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("potential is not finite".into()));
    }
    let tridiagonal_ok = grid.dim() == 1 && grid.boundary() == Boundary::Dirichlet;
    let method = match opts.method {
        EigenMethod::Auto if m <= opts.dense_below || 4 * count >= m => EigenMethod::Dense,
        EigenMethod::Auto if tridiagonal_ok => EigenMethod::Tridiagonal,
        EigenMethod::Auto => EigenMethod::Lobpcg,
        EigenMethod::Tridiagonal if !tridiagonal_ok => {
            return Err(Error::InvalidInput(
                "tridiagonal solver needs a one-dimensional Dirichlet grid".into(),
            ))
        }
        other => other,
    };
    let raw = match method {
        EigenMethod::Dense => dense_raw(grid, potential.values(), count),
        EigenMethod::Tridiagonal => tridiagonal_raw(grid, potential.values(), count),
        _ => match lobpcg_raw(grid, potential.values(), count, opts, warm) {
            Ok(raw) => raw,
            Err(err @ Error::EigenNotConverged { .. }) => {
                if m <= opts.dense_fallback_below {
                    log::warn!("{err}; retrying with dense diagonalization");
                    dense_raw(grid, potential.values(), count)
                } else {
                    return Err(err);
                }
            }
            Err(err) => return Err(err),
        },
    };
    Ok(finish(grid, potential, raw, count == m))
}

/// All eigenpairs by dense diagonalization.
pub fn dense_eigenpairs(grid: &Grid, potential: &Field) -> Result<OneBodySpectrum> {
    if potential.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let raw = dense_raw(grid, potential.values(), grid.len());
    Ok(finish(grid, potential, raw, true))
}

/// Euclidean-normalized eigenvectors with their eigenvalues.
struct RawPairs {
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    iterations: usize,
}

fn finish(grid: &Grid, potential: &Field, raw: RawPairs, complete: bool) -> OneBodySpectrum {
    let scale = 1.0 / grid.weight().sqrt();
    let m = grid.len();
    let mut hx = vec![0.0; m];
    let mut orbitals = Vec::with_capacity(raw.values.len());
    let mut residuals = Vec::with_capacity(raw.values.len());
    for (&e, x) in raw.values.iter().zip(&raw.vectors) {
        grid.hamiltonian_into(potential.values(), x, &mut hx);
        let r = hx
            .iter()
            .zip(x)
            .map(|(a, b)| (a - e * b).powi(2))
            .sum::<f64>()
            .sqrt();
        residuals.push(r);
        let pivot = x
            .iter()
            .copied()
            .fold(0.0f64, |acc, y| if y.abs() > acc.abs() { y } else { acc });
        let sign = if pivot < 0.0 { -scale } else { scale };
        let values = x.iter().map(|&y| sign * y).collect();
        orbitals.push(Field::new(*grid, values).expect("orbital length"));
    }
    OneBodySpectrum {
        potential: potential.clone(),
        energies: raw.values,
        orbitals,
        residuals,
        iterations: raw.iterations,
        complete,
    }
}

fn dense_matrix(grid: &Grid, potential: &[f64]) -> DMatrix<f64> {
    let m = grid.len();
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut e = vec![0.0; m];
    let mut col = vec![0.0; m];
    for j in 0..m {
        e[j] = 1.0;
        grid.hamiltonian_into(potential, &e, &mut col);
        e[j] = 0.0;
        h.column_mut(j).copy_from_slice(&col);
    }
    h
}

fn sorted_eigen(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn dense_raw(grid: &Grid, potential: &[f64], count: usize) -> RawPairs {
    let (values, vectors) = sorted_eigen(dense_matrix(grid, potential));
    RawPairs {
        values: values[..count].to_vec(),
        vectors: (0..count).map(|j| vectors.column(j).iter().copied().collect()).collect(),
        iterations: 1,
    }
}

// ---------------------------------------------------------------------------
// Tridiagonal path
// ---------------------------------------------------------------------------

/// Number of eigenvalues strictly below `x` (Sturm sequence).
fn sturm_count(diag: &[f64], off2: f64, pivmin: f64, x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q.abs() < pivmin {
        q = -pivmin;
    }
    if q < 0.0 {
        count += 1;
    }
    for &d in &diag[1..] {
        q = d - x - off2 / q;
        if q.abs() < pivmin {
            q = -pivmin;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Solves `(T - shift) x = b` for the symmetric tridiagonal `T` with constant
/// off-diagonal, by LU with partial pivoting. `b` is overwritten.
fn shifted_tridiagonal_solve(diag: &[f64], off: f64, shift: f64, tiny: f64, b: &mut [f64]) {
    let n = diag.len();
    // factor rows: u0 (diag), u1 (first super), u2 (second super, from pivoting)
    let mut u0: Vec<f64> = diag.iter().map(|d| d - shift).collect();
    let mut u1 = vec![off; n];
    let mut u2 = vec![0.0; n];
    let mut sub = vec![off; n];
    let mut swapped = vec![false; n];
    let mut mult = vec![0.0; n];
    for i in 0..n - 1 {
        if u0[i].abs() >= sub[i].abs() {
            if u0[i].abs() < tiny {
                u0[i] = tiny;
            }
            let l = sub[i] / u0[i];
            mult[i] = l;
            u0[i + 1] -= l * u1[i];
            // u2[i] stays zero
        } else {
            // swap rows i and i+1
            swapped[i] = true;
            let l = u0[i] / sub[i];
            mult[i] = l;
            u0[i] = sub[i];
            let tmp = u1[i];
            u1[i] = u0[i + 1];
            u0[i + 1] = tmp - l * u1[i];
            if i + 1 < n - 1 {
                u2[i] = u1[i + 1];
                u1[i + 1] = -l * u2[i];
            }
        }
        sub[i] = 0.0;
    }
    if u0[n - 1].abs() < tiny {
        u0[n - 1] = tiny;
    }
    // forward substitution
    for i in 0..n - 1 {
        if swapped[i] {
            b.swap(i, i + 1);
            b[i + 1] -= mult[i] * b[i];
        } else {
            b[i + 1] -= mult[i] * b[i];
        }
    }
    // back substitution
    b[n - 1] /= u0[n - 1];
    if n >= 2 {
        b[n - 2] = (b[n - 2] - u1[n - 2] * b[n - 1]) / u0[n - 2];
    }
    for i in (0..n.saturating_sub(2)).rev() {
        b[i] = (b[i] - u1[i] * b[i + 1] - u2[i] * b[i + 2]) / u0[i];
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let nrm = x.iter().map(|y| y * y).sum::<f64>().sqrt();
    if nrm > 0.0 {
        for y in x.iter_mut() {
            *y /= nrm;
        }
    }
    nrm
}

fn tridiagonal_raw(grid: &Grid, potential: &[f64], count: usize) -> RawPairs {
    let n = grid.len();
    let inv_h2 = 1.0 / grid.spacing().powi(2);
    let diag: Vec<f64> = potential.iter().map(|&p| 2.0 * inv_h2 + p).collect();
    let off = -inv_h2;
    let off2 = off * off;
    let lo0 = diag.iter().copied().fold(f64::INFINITY, f64::min) - 2.0 * inv_h2;
    let hi0 = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 2.0 * inv_h2;
    let tnorm = lo0.abs().max(hi0.abs());
    let pivmin = f64::MIN_POSITIVE.sqrt() * off2.max(1.0);
    let eps = f64::EPSILON;

    let mut values = Vec::with_capacity(count);
    for j in 0..count {
        let (mut lo, mut hi) = (lo0, hi0);
        if let Some(&prev) = values.last() {
            lo = f64::max(lo, prev - 4.0 * eps * tnorm);
        }
        for _ in 0..256 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 2.0 * eps * lo.abs().max(hi.abs()) + pivmin || mid == lo || mid == hi {
                break;
            }
            if sturm_count(&diag, off2, pivmin, mid) > j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        values.push(0.5 * (lo + hi));
    }

    // inverse iteration, reorthogonalizing inside clusters
    let cluster = 1e-3 * tnorm;
    let tiny = eps * tnorm;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7d1a);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    for j in 0..count {
        let shift = values[j];
        let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&mut x);
        let members: Vec<usize> = (0..j).filter(|&i| (values[i] - shift).abs() < cluster).collect();
        for _ in 0..4 {
            shifted_tridiagonal_solve(&diag, off, shift, tiny, &mut x);
            for _ in 0..2 {
                for &i in &members {
                    let c: f64 = vectors[i].iter().zip(&x).map(|(a, b)| a * b).sum();
                    for (y, q) in x.iter_mut().zip(&vectors[i]) {
                        *y -= c * q;
                    }
                }
            }
            normalize(&mut x);
        }
        vectors.push(x);
    }
    RawPairs {
        values,
        vectors,
        iterations: 4,
    }
}

// ---------------------------------------------------------------------------
// LOBPCG path
// ---------------------------------------------------------------------------

/// Exact inverse of `-Δ_h + c` through the tensor product of the one-axis
/// eigenbases.
struct LaplacianPreconditioner {
    grid: Grid,
    basis: DMatrix<f64>,
    axis_values: Vec<f64>,
    /// Eigenvalue of `-Δ_h` at each tensor index.
    sums: Vec<f64>,
}

impl LaplacianPreconditioner {
    fn new(grid: &Grid) -> Self {
        let line = Grid::new(1, grid.extent(), grid.points_per_axis(), grid.boundary())
            .expect("axis grid");
        let zero = vec![0.0; line.len()];
        let (axis_values, basis) = sorted_eigen(dense_matrix(&line, &zero));
        let sums = (0..grid.len())
            .map(|flat| {
                let idx = grid.multi_index(flat);
                (0..grid.dim()).map(|a| axis_values[idx[a]]).sum()
            })
            .collect();
        Self {
            grid: *grid,
            basis,
            axis_values,
            sums,
        }
    }

    /// Applies `Q^T` (forward) or `Q` (backward) along one axis in place.
    fn transform_axis(&self, x: &mut [f64], axis: usize, forward: bool, work: &mut Vec<f64>) {
        let n = self.grid.points_per_axis();
        let s = self.grid.stride(axis);
        let q = &self.basis;
        work.resize(x.len(), 0.0);
        if s == 1 {
            // contiguous lines: x is the column-major n × (m/n) matrix Y
            let cols = x.len() / n;
            let y = DMatrixView::from_slice(x, n, cols);
            let mut out = DMatrixViewMut::from_slice(&mut work[..], n, cols);
            if forward {
                out.gemm_tr(1.0, q, &y, 0.0);
            } else {
                out.gemm(1.0, q, &y, 0.0);
            }
        } else {
            // each block of n·s values is the column-major s × n matrix Z
            for (src, dst) in x.chunks(n * s).zip(work.chunks_mut(n * s)) {
                let z = DMatrixView::from_slice(src, s, n);
                let mut out = DMatrixViewMut::from_slice(dst, s, n);
                if forward {
                    out.gemm(1.0, &z, q, 0.0);
                } else {
                    out.gemm(1.0, &z, &q.transpose(), 0.0);
                }
            }
        }
        x.copy_from_slice(work);
    }

    fn apply(&self, x: &mut [f64], shift: f64) {
        let d = self.grid.dim();
        let mut work = Vec::new();
        for axis in 0..d {
            self.transform_axis(x, axis, true, &mut work);
        }
        for (y, lambda) in x.iter_mut().zip(&self.sums) {
            *y /= lambda + shift;
        }
        for axis in 0..d {
            self.transform_axis(x, axis, false, &mut work);
        }
    }
}

fn col(x: &DMatrix<f64>, j: usize) -> &[f64] {
    let m = x.nrows();
    &x.as_slice()[j * m..(j + 1) * m]
}

fn apply_block(grid: &Grid, potential: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.nrows();
    let mut out = DMatrix::<f64>::zeros(m, x.ncols());
    for j in 0..x.ncols() {
        let src = col(x, j);
        let dst = &mut out.as_mut_slice()[j * m..(j + 1) * m];
        grid.hamiltonian_into(potential, src, dst);
    }
    out
}

/// Removes the components of `w` along the orthonormal columns of `q`.
fn project_out(w: &mut DMatrix<f64>, q: &DMatrix<f64>) {
    if q.ncols() == 0 || w.ncols() == 0 {
        return;
    }
    for _ in 0..2 {
        let c = q.tr_mul(w);
        w.gemm(-1.0, q, &c, 1.0);
    }
}

/// Orthonormalizes the columns of `w` (SVQB), dropping numerically dependent
/// directions.
fn orthonormalize(w: DMatrix<f64>, drop_tol: f64) -> DMatrix<f64> {
    let mut w = w;
    for pass in 0..2 {
        if w.ncols() == 0 {
            return w;
        }
        // normalize columns first so the drop tolerance is scale free
        let m = w.nrows();
        let mut keep = Vec::new();
        for j in 0..w.ncols() {
            let c = &mut w.as_mut_slice()[j * m..(j + 1) * m];
            if normalize(c) > 0.0 {
                keep.push(j);
            }
        }
        if keep.len() < w.ncols() {
            w = w.select_columns(&keep);
        }
        if w.ncols() == 0 {
            return w;
        }
        let gram = w.tr_mul(&w);
        let (vals, vecs) = sorted_eigen(gram);
        let top = vals.last().copied().unwrap_or(0.0);
        let tol = if pass == 0 { drop_tol } else { drop_tol * 1e-2 };
        let kept: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > tol * top).collect();
        let mut t = DMatrix::<f64>::zeros(vals.len(), kept.len());
        for (c, &i) in kept.iter().enumerate() {
            let s = 1.0 / vals[i].sqrt();
            for r in 0..vals.len() {
                t[(r, c)] = vecs[(r, i)] * s;
            }
        }
        w = &w * t;
    }
    w
}

fn lobpcg_raw(
    grid: &Grid,
    potential: &[f64],
    count: usize,
    opts: &EigenOptions,
    warm: Option<&OneBodySpectrum>,
) -> Result<RawPairs> {
    let m = grid.len();
    let block = (count + opts.guard).min(m / 3).max(count);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = DMatrix::<f64>::zeros(m, block);
    let sqrt_w = grid.weight().sqrt();
    let mut filled = 0;
    if let Some(prev) = warm.filter(|p| p.grid() == grid) {
        for (j, orb) in prev.orbitals.iter().take(block).enumerate() {
            let dst = &mut x.as_mut_slice()[j * m..(j + 1) * m];
            for (d, &s) in dst.iter_mut().zip(orb.values()) {
                *d = s * sqrt_w + 1e-8 * rng.random_range(-1.0..1.0);
            }
            filled += 1;
        }
    }
    for j in filled..block {
        let dst = &mut x.as_mut_slice()[j * m..(j + 1) * m];
        for d in dst.iter_mut() {
            *d = rng.random_range(-1.0..1.0);
        }
    }
    let mut x = orthonormalize(x, 1e-12);
    while x.ncols() < block {
        let mut extra = DMatrix::<f64>::from_fn(m, block - x.ncols(), |_, _| rng.random_range(-1.0..1.0));
        project_out(&mut extra, &x);
        let extra = orthonormalize(extra, 1e-12);
        x = concat(&[&x, &extra]);
    }

    let precond = LaplacianPreconditioner::new(grid);
    let v_min = potential.iter().copied().fold(f64::INFINITY, f64::min);
    let lap_min = precond.axis_values[0] * grid.dim() as f64;

    let mut ax = apply_block(grid, potential, &x);
    let (mut theta, c) = sorted_eigen(sym(x.tr_mul(&ax)));
    x = &x * &c;
    ax = &ax * &c;
    let mut p: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut residuals = vec![f64::INFINITY; block];
    let mut best_worst = f64::INFINITY;
    let mut stalled = 0;

    for iter in 0..opts.max_iter {
        let mut r = ax.clone();
        for j in 0..block {
            let t = theta[j];
            let dst = &mut r.as_mut_slice()[j * m..(j + 1) * m];
            for (d, &xv) in dst.iter_mut().zip(col(&x, j)) {
                *d -= t * xv;
            }
            residuals[j] = col(&r, j).iter().map(|y| y * y).sum::<f64>().sqrt();
        }
        let converged: Vec<bool> = (0..count)
            .map(|j| residuals[j] <= opts.tol * (1.0 + theta[j].abs()))
            .collect();
        if converged.iter().all(|&c| c) {
            return Ok(RawPairs {
                values: theta[..count].to_vec(),
                vectors: (0..count).map(|j| col(&x, j).to_vec()).collect(),
                iterations: iter,
            });
        }
        let worst = (0..count)
            .map(|j| residuals[j] / (1.0 + theta[j].abs()))
            .fold(0.0, f64::max);
        if worst < 0.5 * best_worst {
            best_worst = worst;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > 25 {
                // restart the search directions
                p = None;
                stalled = 0;
                best_worst = worst;
            }
        }
        let active: Vec<usize> = (0..block).filter(|&j| j >= count || !converged[j]).collect();
        let mut w = r.select_columns(&active);
        // shift so that -Δ + shift mimics H - θ₀ away from the potential minimum
        let shift = (theta[block - 1] - v_min).max(0.0) * 0.5 + lap_min;
        for j in 0..w.ncols() {
            let dst = &mut w.as_mut_slice()[j * m..(j + 1) * m];
            precond.apply(dst, shift);
        }
        project_out(&mut w, &x);
        let w = orthonormalize(w, 1e-10);
        let mut parts: Vec<DMatrix<f64>> = vec![w];
        if let Some((pp, _)) = p.take() {
            let mut pp = pp;
            project_out(&mut pp, &x);
            project_out(&mut pp, &parts[0]);
            let pp = orthonormalize(pp, 1e-10);
            if pp.ncols() > 0 {
                parts.push(pp);
            }
        }
        let extra = concat(&parts.iter().collect::<Vec<_>>());
        if extra.ncols() == 0 {
            break;
        }
        let a_extra = apply_block(grid, potential, &extra);
        let s = concat(&[&x, &extra]);
        let a_s = concat(&[&ax, &a_extra]);
        let (vals, vecs) = sorted_eigen(sym(s.tr_mul(&a_s)));
        let cb = vecs.columns(0, block).into_owned();
        let c_extra = cb.rows(block, extra.ncols()).into_owned();
        x = &s * &cb;
        ax = &a_s * &cb;
        let px = &extra * &c_extra;
        let apx = &a_extra * &c_extra;
        p = Some((px, apx));
        theta = vals[..block].to_vec();
    }
    Err(Error::EigenNotConverged {
        iterations: opts.max_iter,
        worst_residual: residuals[..count].iter().copied().fold(0.0, f64::max),
        residuals: residuals[..count].to_vec(),
    })
}

fn sym(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn concat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let m = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut data = Vec::with_capacity(m * cols);
    for b in blocks {
        data.extend_from_slice(b.as_slice());
    }
    DMatrix::from_vec(m, cols, data)
}
