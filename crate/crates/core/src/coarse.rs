//! Cell averaging and the coarse-grained H-theorem.
//!
//! Exact μ-incompressible dynamics conserve information, but an observer who only sees
//! averages over cells δω loses it: the coarse density ρ̄ stretches out as fine structure
//! filaments below the cell size, so 𝔍nf[ρ̄] falls even though 𝔍nf[ρ] does not.

use rayon::prelude::*;

use crate::entropy::{info, relative_info, InfoValue};
use crate::error::{Error, Result};
use crate::flow::{evolve_density_series, StepControl, VelocityField};
use crate::scalar::{pairwise_sum, Scalar};
use crate::statespace::{DensityOfStates, Grid, GridDensity};

/// Relative tolerance for the premise ρ̄₀ = ρ₀ and μ̄ = μ.
pub const PREMISE_TOL: f64 = 1e-3;

/// Block averaging of a fine grid by an integer factor per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGraining<T> {
    fine: Grid<T>,
    coarse: Grid<T>,
    factor: Vec<usize>,
}

impl<T: Scalar> CoarseGraining<T> {
    pub fn new(fine: Grid<T>, factor: Vec<usize>) -> Result<Self> {
        if factor.len() != fine.dim() {
            return Err(Error::Dimension { expected: fine.dim(), got: factor.len() });
        }
        let mut shape = Vec::with_capacity(factor.len());
        for (axis, (&n, &k)) in fine.shape().iter().zip(&factor).enumerate() {
            if k == 0 || n % k != 0 {
                return Err(Error::CoarseGraining(format!("factor {k} does not divide {n} cells on axis {axis}")));
            }
            shape.push(n / k);
        }
        let coarse = Grid::new(fine.space().clone(), shape)?;
        Ok(Self { fine, coarse, factor })
    }

    /// Same factor on every axis.
    pub fn uniform(fine: Grid<T>, factor: usize) -> Result<Self> {
        let dim = fine.dim();
        Self::new(fine, vec![factor; dim])
    }

    pub fn fine_grid(&self) -> &Grid<T> {
        &self.fine
    }

    pub fn coarse_grid(&self) -> &Grid<T> {
        &self.coarse
    }

    pub fn factor(&self) -> &[usize] {
        &self.factor
    }

    /// Coarse cell containing fine cell `fine_index`.
    pub fn parent(&self, fine_index: usize) -> usize {
        let mut idx = vec![0; self.fine.dim()];
        self.fine.multi_index(fine_index, &mut idx);
        for (i, k) in idx.iter_mut().zip(&self.factor) {
            *i /= k;
        }
        self.coarse.flat_index(&idx)
    }

    /// Fine cells of coarse cell `c`, in flat-index order.
    pub fn children(&self, c: usize) -> Vec<usize> {
        let mut base = vec![0; self.coarse.dim()];
        self.coarse.multi_index(c, &mut base);
        base.iter_mut().zip(&self.factor).for_each(|(i, k)| *i *= k);
        let count: usize = self.factor.iter().product();
        let mut out = Vec::with_capacity(count);
        let mut off = vec![0usize; self.factor.len()];
        for _ in 0..count {
            let idx: Vec<usize> = base.iter().zip(&off).map(|(b, o)| b + o).collect();
            out.push(self.fine.flat_index(&idx));
            for a in (0..off.len()).rev() {
                off[a] += 1;
                if off[a] < self.factor[a] {
                    break;
                }
                off[a] = 0;
            }
        }
        out.sort_unstable();
        out
    }

    /// Averages fine-cell values per coarse cell.
    pub fn average(&self, fine_values: &[T]) -> Result<Vec<T>> {
        if fine_values.len() != self.fine.len() {
            return Err(Error::Dimension { expected: self.fine.len(), got: fine_values.len() });
        }
        let inv = T::one() / T::from_usize_lossy(self.factor.iter().product());
        Ok((0..self.coarse.len())
            .into_par_iter()
            .map(|c| {
                let vals: Vec<T> = self.children(c).into_iter().map(|f| fine_values[f]).collect();
                pairwise_sum(&vals) * inv
            })
            .collect())
    }

    /// Piecewise-constant resampling of coarse values onto the fine grid.
    pub fn expand(&self, coarse: &GridDensity<T>) -> Result<GridDensity<T>> {
        self.check(coarse.grid(), &self.coarse)?;
        let values = (0..self.fine.len()).map(|f| coarse.values()[self.parent(f)]).collect();
        Ok(GridDensity::from_parts_unchecked(self.fine.clone(), values))
    }

    /// ρ̄ resampled on the fine grid.
    pub fn smooth(&self, rho: &GridDensity<T>) -> Result<GridDensity<T>> {
        self.expand(&coarse_grain(rho, self)?)
    }

    fn check(&self, got: &Grid<T>, want: &Grid<T>) -> Result<()> {
        if got.shape() != want.shape() || got.space() != want.space() {
            return Err(Error::CoarseGraining(format!("grid shape {:?} incompatible with {:?}", got.shape(), want.shape())));
        }
        Ok(())
    }
}

/// ρ̄: the average of ρ over each coarse cell, on the coarse grid. Coarse mass equals
/// fine mass because a coarse cell's volume is the sum of its children's.
pub fn coarse_grain<T: Scalar>(rho: &GridDensity<T>, cg: &CoarseGraining<T>) -> Result<GridDensity<T>> {
    cg.check(rho.grid(), &cg.fine)?;
    let values = cg.average(rho.values())?;
    Ok(GridDensity::from_parts_unchecked(cg.coarse.clone(), values))
}

/// 𝔍nf[ρ̄] against μ̄, both averaged with the same operator.
pub fn coarse_info<T: Scalar>(rho: &GridDensity<T>, mu_fine: &GridDensity<T>, cg: &CoarseGraining<T>) -> Result<InfoValue<T>> {
    let r = coarse_grain(rho, cg)?;
    let m = coarse_grain(mu_fine, cg)?;
    relative_info(r.values(), m.values(), cg.coarse.cell_volume())
}

fn max_relative_gap<T: Scalar>(fine: &[T], smooth: &[T]) -> T {
    let scale = fine.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    if scale == T::zero() {
        return T::zero();
    }
    fine.iter().zip(smooth).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())) / scale
}

/// Whether the cells are fine enough to capture the initial state (ρ̄₀ ≈ ρ₀, μ̄ ≈ μ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Premise<T> {
    /// max |ρ̄₀ − ρ₀| / max ρ₀ on the fine grid.
    pub rho_gap: T,
    /// max |μ̄ − μ| / max μ on the fine grid, at time 0.
    pub mu_gap: T,
    /// 𝔍nf[ρ₀] − 𝔍nf[ρ̄₀] ≥ 0.
    pub info_gap: T,
    pub holds: bool,
}

pub fn premise<T: Scalar>(rho_0: &GridDensity<T>, mu: &DensityOfStates<T>, cg: &CoarseGraining<T>) -> Result<Premise<T>> {
    let mu0 = mu.snapshot(&cg.fine, T::zero())?;
    let rho_gap = max_relative_gap(rho_0.values(), cg.smooth(rho_0)?.values());
    let mu_gap = max_relative_gap(mu0.values(), cg.smooth(&mu0)?.values());
    let fine = info(rho_0, mu, T::zero())?.value;
    let coarse = coarse_info(rho_0, &mu0, cg)?.value;
    let tol = T::lit(PREMISE_TOL);
    Ok(Premise { rho_gap, mu_gap, info_gap: fine - coarse, holds: rho_gap <= tol && mu_gap <= tol })
}

/// Result of [`coarse_info_change`]. A failed premise is a warning, not an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseInfoChange<T> {
    /// 𝔍nf[ρ̄_t] − 𝔍nf[ρ̄₀].
    pub delta: T,
    pub coarse_info_t: T,
    pub coarse_info_0: T,
    pub premise: Premise<T>,
}

/// Change in coarse-grained information between `rho_0` (time 0) and `rho_t` (time `t`).
pub fn coarse_info_change<T: Scalar>(
    rho_t: &GridDensity<T>,
    rho_0: &GridDensity<T>,
    mu: &DensityOfStates<T>,
    t: T,
    cg: &CoarseGraining<T>,
) -> Result<CoarseInfoChange<T>> {
    let premise = premise(rho_0, mu, cg)?;
    let mu0 = mu.snapshot(&cg.fine, T::zero())?;
    let mu_t = if mu.is_time_dependent() { mu.snapshot(&cg.fine, t)? } else { mu0.clone() };
    let c0 = coarse_info(rho_0, &mu0, cg)?.value;
    let ct = coarse_info(rho_t, &mu_t, cg)?.value;
    Ok(CoarseInfoChange { delta: ct - c0, coarse_info_t: ct, coarse_info_0: c0, premise })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HRecord<T> {
    pub t: T,
    pub fine_info: T,
    pub coarse_info: T,
    pub normalization_drift: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HTheoremRun<T> {
    pub records: Vec<HRecord<T>>,
    pub premise: Premise<T>,
}

/// Smallest noise floor used when a null run is exactly constant.
pub const NOISE_FLOOR_EPS: f64 = 1e-10;

impl<T: Scalar> HTheoremRun<T> {
    /// Largest |fine_info(t) − fine_info(0)|.
    pub fn fine_drift(&self) -> T {
        let f0 = self.records[0].fine_info;
        self.records.iter().fold(T::zero(), |m, r| m.max((r.fine_info - f0).abs()))
    }

    /// Largest coarse_info(t) − coarse_info(0); ≤ 0 for a monotone decrease.
    pub fn max_coarse_excess(&self) -> T {
        let c0 = self.records[0].coarse_info;
        self.records.iter().skip(1).fold(T::neg_infinity(), |m, r| m.max(r.coarse_info - c0))
    }

    /// 1 − coarse_info(end)/coarse_info(0).
    pub fn relative_decrease(&self) -> T {
        let c0 = self.records[0].coarse_info;
        T::one() - self.records[self.records.len() - 1].coarse_info / c0
    }

    /// Noise floor calibrated from this run taken as the null (v = 0) control: the
    /// largest deviation of either series from its start, at least [`NOISE_FLOOR_EPS`].
    pub fn noise_floor(&self) -> T {
        let c0 = self.records[0].coarse_info;
        let coarse = self.records.iter().fold(T::zero(), |m, r| m.max((r.coarse_info - c0).abs()));
        coarse.max(self.fine_drift()).max(T::lit(NOISE_FLOOR_EPS))
    }

    /// No snapshot exceeds the initial coarse info by more than 3 × `floor`.
    pub fn non_increasing_within(&self, floor: T) -> bool {
        self.max_coarse_excess() <= T::lit(3.0) * floor
    }
}

/// Evolves `rho0` under `v` and records fine and coarse information at each of `times`
/// (time 0 is always recorded first).
pub fn htheorem_run<T: Scalar>(
    rho0: &GridDensity<T>,
    v: &VelocityField<T>,
    mu: &DensityOfStates<T>,
    cg: &CoarseGraining<T>,
    times: &[T],
    ctl: &StepControl<T>,
) -> Result<HTheoremRun<T>> {
    cg.check(rho0.grid(), &cg.fine)?;
    let premise = premise(rho0, mu, cg)?;
    let mu0 = mu.snapshot(&cg.fine, T::zero())?;
    let mut records = vec![HRecord {
        t: T::zero(),
        fine_info: info(rho0, mu, T::zero())?.value,
        coarse_info: coarse_info(rho0, &mu0, cg)?.value,
        normalization_drift: T::zero(),
    }];
    let later: Vec<T> = times.iter().copied().filter(|&t| t > T::zero()).collect();
    for ev in evolve_density_series(rho0, v, mu, &later, ctl)? {
        let mu_t = if mu.is_time_dependent() { mu.snapshot(&cg.fine, ev.time)? } else { mu0.clone() };
        records.push(HRecord {
            t: ev.time,
            fine_info: crate::entropy::info_on_grid(&ev.density, &mu_t)?.value,
            coarse_info: coarse_info(&ev.density, &mu_t, cg)?.value,
            normalization_drift: ev.normalization_drift,
        });
    }
    Ok(HTheoremRun { records, premise })
}

/// `n` evenly spaced snapshot times in (0, t_final].
pub fn snapshot_times<T: Scalar>(t_final: T, n: usize) -> Vec<T> {
    (1..=n).map(|k| t_final * T::from_usize_lossy(k) / T::from_usize_lossy(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{uniform_on, Boundary, CellMask, MuPreset, StateSpace};
    use proptest::prelude::*;

    fn grid(shape: &[usize]) -> Grid<f64> {
        Grid::new(StateSpace::unit_box(shape.len(), Boundary::Reflecting).unwrap(), shape.to_vec()).unwrap()
    }

    #[test]
    fn factor_must_divide() {
        assert!(CoarseGraining::uniform(grid(&[6, 6]), 4).is_err());
        assert!(CoarseGraining::new(grid(&[6, 6]), vec![2]).is_err());
        assert!(CoarseGraining::new(grid(&[6, 6]), vec![0, 2]).is_err());
        let cg = CoarseGraining::new(grid(&[6, 8]), vec![3, 2]).unwrap();
        assert_eq!(cg.coarse_grid().shape(), &[2, 4]);
    }

    #[test]
    fn arithmetic_mean_example() {
        let g = grid(&[4]);
        let cg = CoarseGraining::uniform(g.clone(), 2).unwrap();
        let rho = GridDensity::new(g, vec![0.8, 1.2, 1.0, 1.0]).unwrap();
        let c = coarse_grain(&rho, &cg).unwrap();
        assert_eq!(c.values(), &[1.0, 1.0]);
    }

    #[test]
    fn single_cell_mass_spreads_over_its_block() {
        let g = grid(&[8, 8]);
        let cg = CoarseGraining::uniform(g.clone(), 4).unwrap();
        let mut vals = vec![0.0; g.len()];
        vals[g.flat_index(&[5, 2])] = 1.0 / g.cell_volume();
        let c = coarse_grain(&GridDensity::new(g, vals).unwrap(), &cg).unwrap();
        let nonzero: Vec<usize> = (0..4).filter(|&i| c.values()[i] > 0.0).collect();
        assert_eq!(nonzero, vec![cg.coarse_grid().flat_index(&[1, 0])]);
        assert!((c.mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn block_constant_density_is_unchanged() {
        let g = grid(&[8, 4]);
        let cg = CoarseGraining::uniform(g.clone(), 2).unwrap();
        let mu = DensityOfStates::uniform(g.space());
        let region = CellMask::from_centers(&g, |c| c[0] < 0.5 && c[1] > 0.5);
        let rho = uniform_on(&g, &region, &mu, 0.0).unwrap();
        assert_eq!(cg.smooth(&rho).unwrap().values(), rho.values());
    }

    #[test]
    fn children_and_parent_agree() {
        let cg = CoarseGraining::new(grid(&[6, 4, 2]), vec![3, 2, 1]).unwrap();
        for c in 0..cg.coarse_grid().len() {
            let kids = cg.children(c);
            assert_eq!(kids.len(), 6);
            assert!(kids.iter().all(|&f| cg.parent(f) == c));
        }
    }

    #[test]
    fn stripes_averaging_to_uniform_lose_all_information() {
        let g = grid(&[16, 16]);
        let cg = CoarseGraining::uniform(g.clone(), 4).unwrap();
        let mu = DensityOfStates::uniform(g.space());
        // ρ₀ uniform on the left half (block aligned); ρ_t on alternating fine columns
        let left = CellMask::from_centers(&g, |c| c[0] < 0.5);
        let stripes = CellMask::from_centers(&g, |c| ((c[0] * 16.0) as usize) % 2 == 0);
        let rho_0 = uniform_on(&g, &left, &mu, 0.0).unwrap();
        let rho_t = uniform_on(&g, &stripes, &mu, 0.0).unwrap();
        let fine_t = info(&rho_t, &mu, 0.0).unwrap().value;
        assert!((fine_t - 2f64.ln()).abs() < 1e-13);
        let ch = coarse_info_change(&rho_t, &rho_0, &mu, 1.0, &cg).unwrap();
        assert!(ch.premise.holds);
        assert!(ch.coarse_info_t.abs() < 1e-13);
        assert!((ch.delta + fine_t).abs() < 1e-13);

        let same = coarse_info_change(&rho_0, &rho_0, &mu, 0.0, &cg).unwrap();
        assert_eq!(same.delta, 0.0);
    }

    #[test]
    fn unresolved_blob_fails_the_premise() {
        let g = grid(&[32, 32]);
        let cg = CoarseGraining::uniform(g.clone(), 8).unwrap();
        let mu = DensityOfStates::uniform(g.space());
        let blob = GridDensity::gaussian_blob(g, &[0.5, 0.5], &[0.05, 0.05]).unwrap();
        let p = premise(&blob, &mu, &cg).unwrap();
        assert!(!p.holds && p.info_gap > 0.1);
    }

    #[test]
    fn zero_field_run_is_constant() {
        let g = grid(&[32, 32]);
        let cg = CoarseGraining::uniform(g.clone(), 4).unwrap();
        let mu = MuPreset::Tilt { rate: 1.0 }.build(&g).unwrap();
        let blob = GridDensity::gaussian_blob(g, &[0.4, 0.5], &[0.1, 0.15]).unwrap();
        let times = snapshot_times(2.0, 4);
        let run = htheorem_run(&blob, &VelocityField::zero(2), &mu, &cg, &times, &StepControl::fixed(0.5)).unwrap();
        assert_eq!(run.records.len(), 5);
        assert!(run.fine_drift() < 1e-14);
        assert!(run.max_coarse_excess().abs() < 1e-14);
        assert_eq!(run.noise_floor(), NOISE_FLOOR_EPS);
    }

    #[test]
    fn rotation_of_offset_blob_does_not_raise_coarse_info() {
        let s = StateSpace::cube(2, -1.0, 1.0, Boundary::Reflecting).unwrap();
        let g = Grid::new(s.clone(), vec![64, 64]).unwrap();
        let cg = CoarseGraining::uniform(g.clone(), 2).unwrap();
        let mu = DensityOfStates::uniform(&s);
        let blob = GridDensity::gaussian_blob(g, &[0.3, 0.0], &[0.2, 0.2]).unwrap();
        let rot = VelocityField::rotation([0.0, 0.0], 1.0);
        // quarter turns map the square onto itself
        let times = snapshot_times(4.0 * std::f64::consts::PI, 8);
        let run = htheorem_run(&blob, &rot, &mu, &cg, &times, &StepControl::fixed(0.01)).unwrap();
        assert!(run.premise.holds || run.premise.info_gap < 1e-2);
        // quadrature noise only; rotation filaments nothing
        assert!(run.max_coarse_excess() < 2e-3, "{}", run.max_coarse_excess());
        assert!(run.fine_drift() < 2e-2);
    }

    proptest! {
        #[test]
        fn coarse_graining_never_creates_information(
            rho in proptest::collection::vec(0.0f64..5.0, 64),
            mu in proptest::collection::vec(0.05f64..5.0, 64),
            k in prop_oneof![Just(2usize), Just(4)],
        ) {
            let g = grid(&[8, 8]);
            let cg = CoarseGraining::uniform(g.clone(), k).unwrap();
            let rho = GridDensity::from_unnormalized(g.clone(), rho);
            prop_assume!(rho.is_ok());
            let rho = rho.unwrap();
            let mu = GridDensity::from_unnormalized(g.clone(), mu).unwrap();
            let fine = crate::entropy::info_on_grid(&rho, &mu).unwrap().value;
            let coarse = coarse_info(&rho, &mu, &cg).unwrap().value;
            prop_assert!(coarse <= fine + 1e-10, "{coarse} > {fine}");
            prop_assert!(coarse >= 0.0);
        }

        #[test]
        fn coarse_graining_preserves_mass_and_is_idempotent(
            rho in proptest::collection::vec(0.0f64..5.0, 48),
            fx in prop_oneof![Just(1usize), Just(2), Just(3), Just(6)],
            fy in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        ) {
            let g = grid(&[6, 8]);
            let cg = CoarseGraining::new(g.clone(), vec![fx, fy]).unwrap();
            let rho = GridDensity::from_unnormalized(g, rho);
            prop_assume!(rho.is_ok());
            let rho = rho.unwrap();
            let c = coarse_grain(&rho, &cg).unwrap();
            prop_assert!((c.mass() - rho.mass()).abs() < 1e-13);
            let once = cg.smooth(&rho).unwrap();
            let twice = cg.smooth(&once).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }
}
