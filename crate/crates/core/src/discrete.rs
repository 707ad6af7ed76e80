//! Finite-state propagators.
//!
//! Convention: entry `(i, j)` of a [`DiscretePropagator`] is the probability of the
//! transition `j → i`, so columns sum to one and a distribution evolves as `p ↦ T·p`.
//! Many Markov-chain texts use the transpose (row-stochastic) convention instead.
//!
//! On a finite space the information functional `Σ p log(p/μ)` is conserved for every
//! `p` exactly when `T` is a permutation that only exchanges states of equal weight
//! μ; [`certify_information_conserving`] decides this and produces a witness otherwise.

use rand::Rng;
use rayon::prelude::*;

use crate::entropy::relative_info;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{pairwise_sum, Scalar};

const SUM_TOL: f64 = 1e-12;
/// Relative tolerance for μ-compatibility of a permutation.
pub const MU_MATCH_RTOL: f64 = 1e-9;
/// Default entry-wise distance accepted between a propagator and a permutation matrix.
pub const DEFAULT_PERMUTATION_TOL: f64 = 1e-9;
const WITNESS_SEED: u64 = 0x5eed_0f_1ce;

/// Finite state space with state weights μ.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace<T> {
    mu: Vec<T>,
}

impl<T: Scalar> DiscreteStateSpace<T> {
    pub fn new(mu: Vec<T>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidDensity("no states".into()));
        }
        if let Some(i) = mu.iter().position(|&m| !(m > T::zero()) || !m.is_finite()) {
            return Err(Error::InvalidDensity(format!("state {i} has weight {}", mu[i])));
        }
        let total = pairwise_sum(&mu);
        if (total - T::one()).abs() > T::lit(SUM_TOL) {
            return Err(Error::NotNormalized { integral: total.as_f64(), tolerance: SUM_TOL });
        }
        Ok(Self { mu })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![T::one() / T::from_usize_lossy(n.max(1)); n])
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }
}

/// Column-stochastic `n × n` matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePropagator<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DiscretePropagator<T> {
    pub fn new(n: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidStochastic("empty matrix".into()));
        }
        if data.len() != n * n {
            return Err(Error::Dimension { expected: n * n, got: data.len() });
        }
        let slack = T::lit(SUM_TOL);
        for (k, &v) in data.iter().enumerate() {
            if !v.is_finite() || v < T::zero() || v > T::one() + slack {
                return Err(Error::InvalidStochastic(format!("entry ({}, {}) = {v}", k / n, k % n)));
            }
        }
        for j in 0..n {
            let col: Vec<T> = (0..n).map(|i| data[i * n + j]).collect();
            let s = pairwise_sum(&col);
            if (s - T::one()).abs() > slack {
                return Err(Error::InvalidStochastic(format!("column {j} sums to {s}")));
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Dimension { expected: n, got: bad.len() });
        }
        Self::new(n, rows.into_iter().flatten().collect())
    }

    pub fn identity(n: usize) -> Self {
        Self::permutation(&(0..n).collect::<Vec<_>>()).expect("identity is a permutation")
    }

    /// Total mixing: every entry 1/n.
    pub fn mixing(n: usize) -> Self {
        let v = T::one() / T::from_usize_lossy(n);
        Self { n, data: vec![v; n * n] }
    }

    /// State `j` moves to `target[j]`.
    pub fn permutation(target: &[usize]) -> Result<Self> {
        let n = target.len();
        let mut seen = vec![false; n];
        for &t in target {
            if t >= n || std::mem::replace(&mut seen[t], true) {
                return Err(Error::InvalidStochastic(format!("{target:?} is not a permutation")));
            }
        }
        let mut data = vec![T::zero(); n * n];
        for (j, &i) in target.iter().enumerate() {
            data[i * n + j] = T::one();
        }
        Ok(Self { n, data })
    }

    /// `j ↦ j + 1 (mod n)`.
    pub fn cyclic_shift(n: usize) -> Self {
        Self::permutation(&(0..n).map(|j| (j + 1) % n).collect::<Vec<_>>()).expect("shift is a permutation")
    }

    /// Parses `n` lines of `n` comma-separated reals.
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = parse_csv_rows::<T>(text)?;
        Self::from_rows(rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }
}

pub(crate) fn parse_csv_rows<T: Scalar>(text: &str) -> Result<Vec<Vec<T>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(ln, line)| {
            line.split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map(T::lit)
                        .map_err(|_| Error::Parse(format!("row {}: bad number `{}`", ln + 1, tok.trim())))
                })
                .collect()
        })
        .collect()
}

/// Reads state weights from either one comma-separated line or one value per line.
pub fn parse_weights<T: Scalar>(text: &str) -> Result<DiscreteStateSpace<T>> {
    let rows = parse_csv_rows::<T>(text)?;
    DiscreteStateSpace::new(rows.into_iter().flatten().collect())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// `T · p`.
pub fn propagate<T: Scalar>(prop: &DiscretePropagator<T>, p: &[T]) -> Result<Vec<T>> {
    check_len(prop.n, p.len())?;
    let n = prop.n;
    Ok((0..n)
        .map(|i| {
            let row: Vec<T> = (0..n).map(|j| prop.data[i * n + j] * p[j]).collect();
            pairwise_sum(&row)
        })
        .collect())
}

/// The mask `U_ω = Σ_{j∈ω} T(·, j) μ_j`: where the states of `region` can end up,
/// weighted by their state count.
pub fn mask<T: Scalar>(prop: &DiscretePropagator<T>, region: &[bool], space: &DiscreteStateSpace<T>) -> Result<Vec<T>> {
    check_len(prop.n, region.len())?;
    check_len(prop.n, space.len())?;
    let n = prop.n;
    Ok((0..n)
        .map(|i| {
            let terms: Vec<T> = (0..n)
                .map(|j| if region[j] { prop.data[i * n + j] * space.mu[j] } else { T::zero() })
                .collect();
            pairwise_sum(&terms)
        })
        .collect())
}

/// `Σ q log(q/μ)` for a distribution over the states.
pub fn discrete_info<T: Scalar>(q: &[T], space: &DiscreteStateSpace<T>) -> Result<T> {
    Ok(relative_info(q, &space.mu, T::one())?.value)
}

/// `Info(T·p) − Info(p)`; nonpositive whenever `T` preserves μ, zero for μ-preserving
/// permutations.
pub fn entropy_production<T: Scalar>(
    prop: &DiscretePropagator<T>,
    p: &[T],
    space: &DiscreteStateSpace<T>,
) -> Result<T> {
    let after = propagate(prop, p)?;
    Ok(discrete_info(&after, space)? - discrete_info(p, space)?)
}

/// Evidence that a propagator does not conserve information.
#[derive(Debug, Clone, PartialEq)]
pub enum Witness<T> {
    /// A distribution whose information changes under one application of `T`.
    Distribution { p: Vec<T>, info_before: T, info_after: T },
    /// A region whose mask is neither μ nor 0 at `state`.
    Mask { region: Vec<bool>, state: usize, value: T, mu: T },
    /// Fallback when the propagator is structurally not a μ-preserving permutation but
    /// no distribution or mask separated it at the given tolerance.
    Structural { distance_to_permutation: T },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certificate<T> {
    /// `permutation[j]` is the image of state `j`.
    Conserving { permutation: Vec<usize> },
    Violating(Witness<T>),
}

impl<T> Certificate<T> {
    pub fn is_conserving(&self) -> bool {
        matches!(self, Certificate::Conserving { .. })
    }
}

/// Nearest 0/1 matrix and its max entry-wise distance from `prop`.
fn nearest_binary<T: Scalar>(prop: &DiscretePropagator<T>) -> (Vec<bool>, T) {
    let half = T::lit(0.5);
    let mut dist = T::zero();
    let bits = prop
        .data
        .iter()
        .map(|&v| {
            let b = v > half;
            let d = if b { (T::one() - v).abs() } else { v };
            dist = dist.max(d);
            b
        })
        .collect();
    (bits, dist)
}

fn as_permutation(bits: &[bool], n: usize) -> Option<Vec<usize>> {
    let mut target = vec![usize::MAX; n];
    let mut row_used = vec![false; n];
    for j in 0..n {
        let rows: Vec<usize> = (0..n).filter(|&i| bits[i * n + j]).collect();
        if rows.len() != 1 || std::mem::replace(&mut row_used[rows[0]], true) {
            return None;
        }
        target[j] = rows[0];
    }
    Some(target)
}

fn basis<T: Scalar>(n: usize, j: usize) -> Vec<T> {
    let mut e = vec![T::zero(); n];
    e[j] = T::one();
    e
}

/// Random distribution number `k` of the deterministic witness sweep.
pub fn sweep_distribution<T: Scalar>(n: usize, k: u64) -> Vec<T> {
    let mut r = rng::stream(WITNESS_SEED, k);
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - r.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

/// Lowest-index distribution in the sweep (basis vectors first, then `n_random` seeded
/// random distributions) whose information changes by more than `tol`.
pub fn find_distribution_witness<T: Scalar>(
    prop: &DiscretePropagator<T>,
    space: &DiscreteStateSpace<T>,
    n_random: usize,
    tol: T,
) -> Result<Option<Witness<T>>> {
    let n = prop.n;
    let probe = |p: Vec<T>| -> Result<Option<Witness<T>>> {
        let before = discrete_info(&p, space)?;
        let after = discrete_info(&propagate(prop, &p)?, space)?;
        Ok(((after - before).abs() > tol).then_some(Witness::Distribution { p, info_before: before, info_after: after }))
    };
    for j in 0..n {
        if let Some(w) = probe(basis(n, j))? {
            return Ok(Some(w));
        }
    }
    (0..n_random as u64)
        .into_par_iter()
        .map(|k| probe(sweep_distribution(n, k)))
        .find_map_first(|r| match r {
            Ok(None) => None,
            other => Some(other),
        })
        .transpose()
        .map(Option::flatten)
}

/// Searches singleton and pair regions for a mask value that is neither 0 nor μ.
/// Singletons expose one-to-many columns, pairs expose many-to-one rows.
pub fn find_mask_witness<T: Scalar>(
    prop: &DiscretePropagator<T>,
    space: &DiscreteStateSpace<T>,
    tol: T,
) -> Result<Option<Witness<T>>> {
    let n = prop.n;
    let check = |region: Vec<bool>| -> Result<Option<Witness<T>>> {
        let m = mask(prop, &region, space)?;
        for (i, &v) in m.iter().enumerate() {
            let mu = space.mu[i];
            if v.abs() > tol && (v - mu).abs() > tol {
                return Ok(Some(Witness::Mask { region, state: i, value: v, mu }));
            }
        }
        Ok(None)
    };
    for j in 0..n {
        let mut r = vec![false; n];
        r[j] = true;
        if let Some(w) = check(r)? {
            return Ok(Some(w));
        }
    }
    for j1 in 0..n {
        for j2 in j1 + 1..n {
            let mut r = vec![false; n];
            r[j1] = true;
            r[j2] = true;
            if let Some(w) = check(r)? {
                return Ok(Some(w));
            }
        }
    }
    Ok(None)
}

/// Number of random distributions tried by the witness search.
pub const WITNESS_SWEEP: usize = 500;

/// Decides whether `prop` conserves information for every distribution.
///
/// `prop` is conserving iff it lies within `tol` (entry-wise) of a permutation matrix
/// whose permutation maps each state to one of equal weight (relative tolerance
/// [`MU_MATCH_RTOL`]). Otherwise a witness is returned, searched in order: basis
/// vectors, seeded random distributions, masks.
pub fn certify_information_conserving<T: Scalar>(
    prop: &DiscretePropagator<T>,
    space: &DiscreteStateSpace<T>,
    tol: T,
) -> Result<Certificate<T>> {
    check_len(prop.n, space.len())?;
    let n = prop.n;
    let (bits, dist) = nearest_binary(prop);
    if dist < tol {
        if let Some(target) = as_permutation(&bits, n) {
            let scale = space.mu.iter().fold(T::zero(), |a, &b| a.max(b));
            let rtol = T::lit(MU_MATCH_RTOL) * scale;
            if (0..n).all(|j| (space.mu[target[j]] - space.mu[j]).abs() <= rtol) {
                return Ok(Certificate::Conserving { permutation: target });
            }
        }
    }
    if let Some(w) = find_distribution_witness(prop, space, WITNESS_SWEEP, tol)? {
        return Ok(Certificate::Violating(w));
    }
    if let Some(w) = find_mask_witness(prop, space, tol)? {
        return Ok(Certificate::Violating(w));
    }
    Ok(Certificate::Violating(Witness::Structural { distance_to_permutation: dist }))
}
