//! Slater configurations of N non-interacting fermions built on a one-body
//! spectrum: sorted N-body energies, degenerate levels, near-level active sets
//! and the densities that mixed states over them produce.
//!
//! Orbital indices are 0-based positions in the one-body spectrum.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::spectral::{group_levels, OneBodySpectrum};

/// Hard cap on the number of configurations pulled from the heap.
const MAX_CONFIGURATIONS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub orbitals: Vec<usize>,
    pub energy: f64,
}

/// N-body energies in increasing order, grouped into degenerate levels.
#[derive(Debug, Clone, Serialize)]
pub struct NBodySpectrum {
    pub particles: usize,
    pub gap_tol: f64,
    configurations: Vec<Configuration>,
    levels: Vec<Range<usize>>,
}

impl NBodySpectrum {
    pub fn configurations(&self) -> &[Configuration] {
        &self.configurations
    }

    pub fn levels(&self) -> &[Range<usize>] {
        &self.levels
    }

    /// `E^k`.
    pub fn energy(&self, k: usize) -> f64 {
        self.configurations[k].energy
    }

    /// The level containing state `k`, as the range `m_k..M_k + 1`.
    pub fn level_of(&self, k: usize) -> Result<Range<usize>> {
        self.levels
            .iter()
            .find(|r| r.contains(&k))
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("state {k} was not enumerated")))
    }
}

/// Level-grouping tolerance `1e-7 (E_{N+k} - E_0)` on one-body energies.
pub fn default_gap_tol(energies: &[f64], particles: usize, k: usize) -> f64 {
    let top = energies[(particles + k).min(energies.len() - 1)];
    let spread = (top - energies[0]).abs();
    1e-7 * if spread > 0.0 { spread } else { 1.0 }
}

#[derive(PartialEq)]
struct Candidate {
    energy: f64,
    orbitals: Vec<usize>,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on energy, ties broken lexicographically for determinism
        other
            .energy
            .total_cmp(&self.energy)
            .then_with(|| other.orbitals.cmp(&self.orbitals))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Enumerates configurations of `particles` fermions in increasing energy up
/// to `E^{k_max} + window`, closing the last level under `gap_tol`.
///
/// `complete` states that `energies` is the whole one-body spectrum. When it
/// is not, configurations using orbitals past the end could be missing; the
/// result is certified only if every kept energy (plus `gap_tol`) lies below
/// the cheapest such configuration, otherwise
/// [`Error::InsufficientOrbitals`] asks for a larger one-body solve.
pub fn enumerate_energies(
    energies: &[f64],
    complete: bool,
    particles: usize,
    k_max: usize,
    gap_tol: f64,
    window: f64,
) -> Result<NBodySpectrum> {
    let a = energies.len();
    if particles == 0 || particles > a {
        return Err(Error::InsufficientOrbitals { available: a });
    }
    if energies.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("one-body energies must be sorted".into()));
    }
    let energy_of = |c: &[usize]| c.iter().map(|&i| energies[i]).sum::<f64>();
    let first: Vec<usize> = (0..particles).collect();
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    heap.push(Candidate {
        energy: energy_of(&first),
        orbitals: first.clone(),
    });
    seen.insert(first);

    let mut out: Vec<Configuration> = Vec::new();
    while let Some(top) = heap.peek() {
        if out.len() > k_max {
            let last = out.last().expect("nonempty").energy;
            let stop = out[k_max].energy + window.max(0.0);
            if top.energy > stop && top.energy - last > gap_tol {
                break;
            }
        }
        let Candidate { energy, orbitals } = heap.pop().expect("peeked");
        for p in 0..particles {
            let next = orbitals[p] + 1;
            let free = if p + 1 < particles { next < orbitals[p + 1] } else { next < a };
            if free {
                let mut succ = orbitals.clone();
                succ[p] = next;
                if seen.insert(succ.clone()) {
                    heap.push(Candidate {
                        energy: energy_of(&succ),
                        orbitals: succ,
                    });
                }
            }
        }
        out.push(Configuration { orbitals, energy });
        if out.len() > MAX_CONFIGURATIONS {
            return Err(Error::InvalidInput(format!(
                "more than {MAX_CONFIGURATIONS} configurations below the requested window"
            )));
        }
    }
    if out.len() <= k_max {
        return Err(Error::InsufficientOrbitals { available: a });
    }
    if !complete {
        let bound: f64 = energies[..particles - 1].iter().sum::<f64>() + energies[a - 1];
        let last = out.last().expect("nonempty").energy;
        if last + gap_tol >= bound {
            return Err(Error::InsufficientOrbitals { available: a });
        }
    }
    let sorted: Vec<f64> = out.iter().map(|c| c.energy).collect();
    let levels = group_levels(&sorted, gap_tol);
    Ok(NBodySpectrum {
        particles,
        gap_tol,
        configurations: out,
        levels,
    })
}

/// [`enumerate_energies`] on a computed one-body spectrum.
pub fn enumerate_spectrum(
    spectrum: &OneBodySpectrum,
    particles: usize,
    k_max: usize,
    gap_tol: f64,
    window: f64,
) -> Result<NBodySpectrum> {
    enumerate_energies(
        &spectrum.energies,
        spectrum.complete,
        particles,
        k_max,
        gap_tol,
        window,
    )
}

/// How two configurations couple in the one-body density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    Diagonal,
    /// `I \ J = {i}`, `J \ I = {j}`; the cross density is `sign φ_i φ_j`.
    Swap { i: usize, j: usize, sign: f64 },
    None,
}

/// Coupling of two sorted configurations. The sign is
/// `(-1)^{pos_I(i) + pos_J(j)}` with 0-based positions.
pub fn coupling(a: &[usize], b: &[usize]) -> Coupling {
    if a == b {
        return Coupling::Diagonal;
    }
    let only_a: Vec<usize> = (0..a.len()).filter(|&p| b.binary_search(&a[p]).is_err()).collect();
    let only_b: Vec<usize> = (0..b.len()).filter(|&p| a.binary_search(&b[p]).is_err()).collect();
    if only_a.len() == 1 && only_b.len() == 1 {
        let (pa, pb) = (only_a[0], only_b[0]);
        let sign = if (pa + pb) % 2 == 0 { 1.0 } else { -1.0 };
        Coupling::Swap {
            i: a[pa],
            j: b[pb],
            sign,
        }
    } else {
        Coupling::None
    }
}

/// One-body density term of `|ψ_I⟩⟨ψ_J|` with its parity sign.
pub fn cross_density(spectrum: &OneBodySpectrum, a: &[usize], b: &[usize]) -> Result<(Field, f64)> {
    let grid = *spectrum.grid();
    let check = |c: &[usize]| c.iter().all(|&i| i < spectrum.len());
    if !check(a) || !check(b) {
        return Err(Error::InvalidInput("configuration uses orbitals outside the spectrum".into()));
    }
    Ok(match coupling(a, b) {
        Coupling::Diagonal => (orbital_density(&grid, spectrum, a), 1.0),
        Coupling::Swap { i, j, sign } => (
            spectrum.orbitals[i].zip_map(&spectrum.orbitals[j], |x, y| x * y)?,
            sign,
        ),
        Coupling::None => (Field::zeros(grid), 1.0),
    })
}

fn orbital_density(grid: &Grid, spectrum: &OneBodySpectrum, orbitals: &[usize]) -> Field {
    let mut rho = vec![0.0; grid.len()];
    for &i in orbitals {
        for (r, &p) in rho.iter_mut().zip(spectrum.orbitals[i].values()) {
            *r += p * p;
        }
    }
    Field::new(*grid, rho).expect("density length")
}

/// Configurations within `t` of `E^k` (always containing the whole level of
/// `k`), split into common inner orbitals and per-configuration outer ones.
#[derive(Debug, Clone)]
pub struct ActiveSet {
    pub k: usize,
    /// `m_k..M_k + 1` in the N-body spectrum.
    pub level: Range<usize>,
    pub reference_energy: f64,
    pub cutoff: f64,
    pub members: Vec<Configuration>,
    /// Positions in `members` belonging to the exact level.
    pub level_members: Vec<usize>,
    pub inner: Vec<usize>,
    pub outer: Vec<Vec<usize>>,
    pub rho_in: Field,
    /// `Σ_{i ∈ I_in} E_i`.
    pub inner_energy: f64,
    /// `couplings[(I, J)]`, symmetric.
    pub couplings: DMatrix<Coupling>,
    /// `e_IJ`: outer energy on the diagonal, `s ⟨φ_j, (-Δ + v) φ_i⟩` for swaps.
    pub cross_energies: DMatrix<f64>,
    /// Nonzero `ρ^out_IJ` for `I <= J`.
    pub out_densities: Vec<((usize, usize), Field)>,
}

impl ActiveSet {
    pub fn dim(&self) -> usize {
        self.members.len()
    }

    pub fn grid(&self) -> &Grid {
        self.rho_in.grid()
    }

    /// `ρ_Γ = ρ_in + Σ_IJ Γ_IJ ρ^out_IJ`.
    pub fn density(&self, gamma: &DMatrix<f64>) -> Field {
        let mut rho = self.rho_in.clone();
        let values = rho.values_mut();
        for ((a, b), f) in &self.out_densities {
            let w = if a == b { gamma[(*a, *b)] } else { gamma[(*a, *b)] + gamma[(*b, *a)] };
            for (r, &x) in values.iter_mut().zip(f.values()) {
                *r += w * x;
            }
        }
        rho
    }

    /// `E(Γ) = Σ_{i ∈ I_in} E_i + Σ_IJ Γ_IJ e_IJ`.
    pub fn energy(&self, gamma: &DMatrix<f64>) -> f64 {
        self.inner_energy + self.cross_energies.component_mul(gamma).sum()
    }

    /// `ρ^out_IJ` evaluated at one grid point: the correlation matrix `M_φ(x)`.
    pub fn correlation_matrix(&self, point: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for ((a, b), f) in &self.out_densities {
            m[(*a, *b)] = f.values()[point];
            m[(*b, *a)] = f.values()[point];
        }
        m
    }

    /// The uniform mixture over the exact level.
    pub fn uniform_level_state(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim(), self.dim());
        let w = 1.0 / self.level_members.len() as f64;
        for &i in &self.level_members {
            g[(i, i)] = w;
        }
        g
    }
}

fn split_inner(members: &[Configuration]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let inner: Vec<usize> = members[0]
        .orbitals
        .iter()
        .copied()
        .filter(|i| members.iter().all(|c| c.orbitals.binary_search(i).is_ok()))
        .collect();
    let outer = members
        .iter()
        .map(|c| c.orbitals.iter().copied().filter(|i| inner.binary_search(i).is_err()).collect())
        .collect();
    (inner, outer)
}

/// Builds the active set for state `k` with cutoff `t`.
pub fn build_active_set(
    nbody: &NBodySpectrum,
    spectrum: &OneBodySpectrum,
    k: usize,
    t: f64,
) -> Result<ActiveSet> {
    let level = nbody.level_of(k)?;
    let e_k = nbody.energy(k);
    let t = t.max(0.0);
    let mut idx: Vec<usize> = (0..nbody.configurations.len())
        .filter(|&i| level.contains(&i) || (nbody.configurations[i].energy - e_k).abs() <= t)
        .collect();
    idx.sort_unstable();
    let members: Vec<Configuration> = idx.iter().map(|&i| nbody.configurations[i].clone()).collect();
    let level_members: Vec<usize> = idx
        .iter()
        .enumerate()
        .filter(|(_, i)| level.contains(i))
        .map(|(p, _)| p)
        .collect();
    assemble(spectrum, k, level, e_k, t, members, level_members)
}

fn assemble(
    spectrum: &OneBodySpectrum,
    k: usize,
    level: Range<usize>,
    e_k: f64,
    t: f64,
    members: Vec<Configuration>,
    level_members: Vec<usize>,
) -> Result<ActiveSet> {
    let grid = *spectrum.grid();
    if members.iter().flat_map(|c| &c.orbitals).any(|&i| i >= spectrum.len()) {
        return Err(Error::InsufficientOrbitals {
            available: spectrum.len(),
        });
    }
    let (inner, outer) = split_inner(&members);
    let rho_in = orbital_density(&grid, spectrum, &inner);
    let inner_energy: f64 = inner.iter().map(|&i| spectrum.energies[i]).sum();
    let d = members.len();
    let couplings = DMatrix::from_fn(d, d, |a, b| coupling(&members[a].orbitals, &members[b].orbitals));

    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|a| (a..d).map(move |b| (a, b)))
        .filter(|&(a, b)| couplings[(a, b)] != Coupling::None)
        .collect();
    let v = spectrum.potential.values();
    let built: Vec<((usize, usize), Field, f64)> = pairs
        .par_iter()
        .map(|&(a, b)| match couplings[(a, b)] {
            Coupling::Diagonal => {
                let f = orbital_density(&grid, spectrum, &outer[a]);
                let e: f64 = outer[a].iter().map(|&i| spectrum.energies[i]).sum();
                ((a, b), f, e)
            }
            Coupling::Swap { i, j, sign } => {
                let (pi, pj) = (&spectrum.orbitals[i], &spectrum.orbitals[j]);
                let f = pi.zip_map(pj, |x, y| sign * x * y).expect("same grid");
                let mut h = vec![0.0; grid.len()];
                grid.hamiltonian_into(v, pi.values(), &mut h);
                let e = sign * grid.dot(pj.values(), &h);
                ((a, b), f, e)
            }
            Coupling::None => unreachable!(),
        })
        .collect();
    let mut cross_energies = DMatrix::zeros(d, d);
    let mut out_densities = Vec::with_capacity(built.len());
    for ((a, b), f, e) in built {
        cross_energies[(a, b)] = e;
        cross_energies[(b, a)] = e;
        out_densities.push(((a, b), f));
    }
    Ok(ActiveSet {
        k,
        level,
        reference_energy: e_k,
        cutoff: t,
        members,
        level_members,
        inner,
        outer,
        rho_in,
        inner_energy,
        couplings,
        cross_energies,
        out_densities,
    })
}

/// Degeneracy mechanisms of one N-body level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub dimension: usize,
    pub m_k: usize,
    pub big_m_k: usize,
    pub coincidental: bool,
    pub essentially_one_body: bool,
    pub partially_filled: Vec<PartialLevel>,
    /// Occupied orbitals of each configuration in the level.
    pub occupancy: Vec<Vec<usize>>,
}

/// A one-body level holding fewer particles than states in some configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialLevel {
    pub orbitals: Vec<usize>,
    pub energy: f64,
    pub occupation: usize,
}

/// Classifies the level of state `k` from its configurations and the one-body
/// level grouping of `energies` under `gap_tol`.
pub fn classify_degeneracy(nbody: &NBodySpectrum, energies: &[f64], k: usize) -> Result<DegeneracyReport> {
    let level = nbody.level_of(k)?;
    let configs = &nbody.configurations[level.clone()];
    let one_body = group_levels(energies, nbody.gap_tol);
    let level_id = |i: usize| one_body.iter().position(|r| r.contains(&i)).expect("orbital in range");

    let signatures: Vec<Vec<usize>> = configs
        .iter()
        .map(|c| c.orbitals.iter().map(|&i| level_id(i)).collect())
        .collect();
    let coincidental = signatures.windows(2).any(|w| w[0] != w[1])
        || signatures.iter().any(|s| *s != signatures[0]);

    let mut partially_filled: Vec<PartialLevel> = Vec::new();
    for sig in &signatures {
        for &l in sig {
            let range = &one_body[l];
            let occ = sig.iter().filter(|&&x| x == l).count();
            if occ < range.len() && !partially_filled.iter().any(|p| p.orbitals[0] == range.start) {
                partially_filled.push(PartialLevel {
                    orbitals: range.clone().collect(),
                    energy: energies[range.start],
                    occupation: occ,
                });
            }
        }
    }
    Ok(DegeneracyReport {
        dimension: configs.len(),
        m_k: level.start,
        big_m_k: level.end - 1,
        coincidental,
        essentially_one_body: !partially_filled.is_empty(),
        partially_filled,
        occupancy: configs.iter().map(|c| c.orbitals.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Boundary;
    use crate::spectral::{lowest_eigenpairs, EigenOptions};
    use proptest::prelude::*;

    fn sums(nb: &NBodySpectrum) -> Vec<f64> {
        nb.configurations().iter().map(|c| c.energy).collect()
    }

    fn all_configs(e: &[f64], n: usize) -> Vec<f64> {
        // exhaustive combinations by bitmask
        let a = e.len();
        let mut out: Vec<f64> = (0u32..1 << a)
            .filter(|m| m.count_ones() as usize == n)
            .map(|m| (0..a).filter(|i| m >> i & 1 == 1).map(|i| e[i]).sum())
            .collect();
        out.sort_by(f64::total_cmp);
        out
    }

    #[test]
    fn hand_enumeration_four_levels() {
        let nb = enumerate_energies(&[1.0, 2.0, 3.0, 4.0], true, 2, 5, 1e-9, 0.0).unwrap();
        assert_eq!(sums(&nb), vec![3.0, 4.0, 5.0, 5.0, 6.0, 7.0]);
        assert_eq!(nb.level_of(2).unwrap(), 2..4);
        let lvl: Vec<Vec<usize>> = nb.configurations()[2..4].iter().map(|c| c.orbitals.clone()).collect();
        assert!(lvl.contains(&vec![0, 3]) && lvl.contains(&vec![1, 2]));
        let rep = classify_degeneracy(&nb, &[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert!(rep.coincidental && !rep.essentially_one_body);
        assert_eq!((rep.m_k, rep.big_m_k), (2, 3));
    }

    #[test]
    fn hand_enumeration_one_body_pair() {
        let e = [1.0, 1.0, 2.0];
        let nb = enumerate_energies(&e, true, 2, 2, 1e-9, 0.0).unwrap();
        assert_eq!(sums(&nb), vec![2.0, 3.0, 3.0]);
        let rep = classify_degeneracy(&nb, &e, 1).unwrap();
        assert!(!rep.coincidental && rep.essentially_one_body);
        assert_eq!(rep.occupancy, vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(rep.partially_filled[0].orbitals, vec![0, 1]);
    }

    #[test]
    fn both_mechanisms() {
        // level at 5: (0,4) vs (1,2),(1,3) with E_2 = E_3
        let e = [1.0, 2.0, 3.0, 3.0, 4.0];
        let nb = enumerate_energies(&e, true, 2, 5, 1e-9, 0.0).unwrap();
        let k = nb.configurations().iter().position(|c| c.energy == 5.0).unwrap();
        let rep = classify_degeneracy(&nb, &e, k).unwrap();
        assert_eq!(rep.dimension, 3);
        assert!(rep.coincidental && rep.essentially_one_body);
        // shift invariance
        let shifted: Vec<f64> = e.iter().map(|x| x + 10.0).collect();
        let nb2 = enumerate_energies(&shifted, true, 2, 5, 1e-9, 0.0).unwrap();
        let rep2 = classify_degeneracy(&nb2, &shifted, k).unwrap();
        assert_eq!((rep2.coincidental, rep2.essentially_one_body), (true, true));
    }

    #[test]
    fn incomplete_spectrum_requests_more_orbitals() {
        // the second configuration could involve an unseen orbital
        let err = enumerate_energies(&[0.0, 1.0, 1.5], false, 2, 2, 1e-9, 0.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientOrbitals { available: 3 }));
        assert!(enumerate_energies(&[0.0, 1.0, 1.5, 10.0], false, 2, 1, 1e-9, 0.0).is_ok());
    }

    proptest! {
        #[test]
        fn best_first_matches_exhaustive(mut e in proptest::collection::vec(0.0f64..10.0, 8)) {
            e.sort_by(f64::total_cmp);
            let all = all_configs(&e, 3);
            let nb = enumerate_energies(&e, true, 3, all.len() - 1, 1e-12, 0.0).unwrap();
            prop_assert_eq!(sums(&nb).len(), all.len());
            for (x, y) in sums(&nb).iter().zip(&all) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn partial_enumeration_is_a_prefix(mut e in proptest::collection::vec(0.0f64..10.0, 8), k in 0usize..20) {
            e.sort_by(f64::total_cmp);
            let all = all_configs(&e, 3);
            let nb = enumerate_energies(&e, true, 3, k, 1e-9, 0.0).unwrap();
            let got = sums(&nb);
            prop_assert!(got.len() > k);
            for (x, y) in got.iter().zip(&all) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let lvl = nb.level_of(k).unwrap();
            prop_assert!(lvl.start <= k && k < lvl.end);
        }
    }

    fn toy_spectrum() -> OneBodySpectrum {
        let g = Grid::new(1, 1.5, 12, Boundary::Dirichlet).unwrap();
        let v = Field::from_fn(g, |x| 0.3 * x[0] + x[0] * x[0]);
        lowest_eigenpairs(&g, &v, 12, &EigenOptions::default(), None).unwrap()
    }

    #[test]
    fn cross_density_cases() {
        let s = toy_spectrum();
        let (d, sign) = cross_density(&s, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(sign, 1.0);
        for p in 0..12 {
            let expect = s.orbitals[0].values()[p].powi(2) + s.orbitals[1].values()[p].powi(2);
            assert!((d.values()[p] - expect).abs() < 1e-14);
        }
        let (d, sign) = cross_density(&s, &[0, 1], &[0, 2]).unwrap();
        assert_eq!(sign, 1.0);
        for p in 0..12 {
            let expect = s.orbitals[1].values()[p] * s.orbitals[2].values()[p];
            assert!((d.values()[p] - expect).abs() < 1e-14);
        }
        let (d, _) = cross_density(&s, &[0, 1], &[2, 3]).unwrap();
        assert!(d.values().iter().all(|&x| x == 0.0));
        assert_eq!(coupling(&[0, 1], &[1, 2]), Coupling::Swap { i: 0, j: 2, sign: -1.0 });
    }

    #[test]
    fn active_set_cutoffs() {
        let s = toy_spectrum();
        let gap = default_gap_tol(&s.energies, 2, 4);
        let nb = enumerate_spectrum(&s, 2, 4, gap, 1e6).unwrap();
        let single = build_active_set(&nb, &s, 0, 0.0).unwrap();
        assert_eq!(single.dim(), 1);
        assert_eq!(single.outer, vec![Vec::<usize>::new()]);
        let rho = single.density(&DMatrix::from_element(1, 1, 1.0));
        let (expect, _) = cross_density(&s, &[0, 1], &[0, 1]).unwrap();
        assert!(rho.sub(&expect).unwrap().norm() < 1e-14);

        let all = build_active_set(&nb, &s, 2, 1e6).unwrap();
        assert_eq!(all.dim(), nb.configurations().len());
        assert!(all.inner.is_empty());
        // cross energies vanish at the potential defining the orbitals
        for a in 0..all.dim() {
            for b in 0..all.dim() {
                if a != b {
                    assert!(all.cross_energies[(a, b)].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn trace_identity() {
        let s = toy_spectrum();
        let nb = enumerate_spectrum(&s, 3, 6, 1e-9, 1e6).unwrap();
        let set = build_active_set(&nb, &s, 3, 2.0 * (s.energies[4] - s.energies[2])).unwrap();
        assert!(set.dim() > 2);
        let trace: Vec<f64> = (0..12)
            .map(|p| (0..set.dim()).map(|i| set.correlation_matrix(p)[(i, i)]).sum())
            .collect();
        for p in 0..12 {
            let full: f64 = set
                .members
                .iter()
                .map(|c| c.orbitals.iter().map(|&i| s.orbitals[i].values()[p].powi(2)).sum::<f64>())
                .sum();
            let expect = full - set.dim() as f64 * set.rho_in.values()[p];
            assert!((trace[p] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_density_integrates_to_particle_number() {
        let s = toy_spectrum();
        let nb = enumerate_spectrum(&s, 2, 5, 1e-9, 1e6).unwrap();
        let set = build_active_set(&nb, &s, 3, 1e6).unwrap();
        let d = set.dim();
        let b = DMatrix::from_fn(d, d, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let mut g = &b * b.transpose();
        g /= g.trace();
        let rho = set.density(&g);
        assert!((rho.integral() - 2.0).abs() < 1e-10);
        // explicit sum over all pairs
        let mut expect = set.rho_in.clone();
        for r in 0..d {
            for c in 0..d {
                let (f, sign) = cross_density(&s, &set.members[r].orbitals, &set.members[c].orbitals).unwrap();
                let f = if r == c { f.sub(&set.rho_in).unwrap() } else { f.scale(sign) };
                expect = expect.axpy(g[(r, c)], &f).unwrap();
            }
        }
        assert!(rho.sub(&expect).unwrap().norm() < 1e-12);
    }

    #[test]
    fn energy_within_cutoff() {
        let s = toy_spectrum();
        let t = 0.5 * (s.energies[3] - s.energies[1]);
        let nb = enumerate_spectrum(&s, 2, 3, 1e-9, t).unwrap();
        let set = build_active_set(&nb, &s, 2, t).unwrap();
        let d = set.dim();
        let g = DMatrix::from_fn(d, d, |a, b| if a == b { 1.0 / d as f64 } else { 0.0 });
        assert!((set.energy(&g) - set.reference_energy).abs() <= t + 1e-12);
    }
}
