//! The information functional: the negative Jaynes entropy ∫ ρ log(ρ/μ), in nats.

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum_by, Scalar};
use crate::statespace::{quadrature, CellMask, DensityOfStates, GridDensity};

/// Information content of a density relative to μ. `finite` is false exactly when ρ
/// puts mass where μ vanishes, in which case `value` is +∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoValue<T> {
    pub value: T,
    pub finite: bool,
}

impl<T: Scalar> InfoValue<T> {
    fn infinite() -> Self {
        Self { value: T::infinity(), finite: false }
    }
}

/// Cellwise relative information `Σ (ρ log(ρ/μ) − ρ + μ) · dV`.
///
/// For normalized ρ and μ the extra `−ρ + μ` terms integrate to zero; keeping them makes
/// every summand nonnegative, so the result is ≥ 0 even under rounding. Cells with
/// ρ = 0 contribute μ (the `0 · log 0 = 0` limit).
pub fn relative_info<T: Scalar>(rho: &[T], mu: &[T], cell_volume: T) -> Result<InfoValue<T>> {
    if rho.len() != mu.len() {
        return Err(Error::Dimension { expected: mu.len(), got: rho.len() });
    }
    for (i, (&r, &m)) in rho.iter().zip(mu).enumerate() {
        if r.is_nan() || m.is_nan() {
            return Err(Error::InvalidDensity(format!("NaN at cell {i}")));
        }
        if r < T::zero() || m < T::zero() {
            return Err(Error::InvalidDensity(format!("negative value at cell {i}")));
        }
        if r > T::zero() && m == T::zero() {
            return Ok(InfoValue::infinite());
        }
    }
    let term = |i: usize| {
        let (r, m) = (rho[i], mu[i]);
        if r == T::zero() {
            m
        } else {
            r * (r / m).ln() - r + m
        }
    };
    let value = pairwise_sum_by(rho.len(), &term) * cell_volume;
    Ok(InfoValue { value, finite: true })
}

/// 𝔍nf[ρ] against a μ already sampled on the same grid.
pub fn info_on_grid<T: Scalar>(rho: &GridDensity<T>, mu: &GridDensity<T>) -> Result<InfoValue<T>> {
    if rho.grid().shape() != mu.grid().shape() {
        return Err(Error::Dimension { expected: mu.grid().len(), got: rho.grid().len() });
    }
    relative_info(rho.values(), mu.values(), rho.grid().cell_volume())
}

/// 𝔍nf[ρ] with μ evaluated at time `t` on ρ's grid.
pub fn info<T: Scalar>(rho: &GridDensity<T>, mu: &DensityOfStates<T>, t: T) -> Result<InfoValue<T>> {
    let snap = mu.snapshot(rho.grid(), t)?;
    info_on_grid(rho, &snap)
}

/// Boltzmann's value |log N_ω| for the uniform distribution on `region`.
pub fn boltzmann_info<T: Scalar>(
    grid: &crate::statespace::Grid<T>,
    region: &CellMask,
    mu: &DensityOfStates<T>,
    t: T,
) -> Result<T> {
    let snap = mu.snapshot(grid, t)?;
    let n = quadrature(grid, snap.values(), Some(region))?;
    if !(n > T::zero()) {
        return Err(Error::EmptySupport);
    }
    Ok(n.ln().abs())
}

/// Information of a density concentrated in a single cell. Finite on any grid, it grows
/// like |log N_cell| under refinement, the grid shadow of 𝔍nf → ∞ for a point mass.
pub fn info_delta_proxy<T: Scalar>(
    rho: &GridDensity<T>,
    mu: &DensityOfStates<T>,
    t: T,
) -> Result<InfoValue<T>> {
    let occupied = rho.values().iter().filter(|&&v| v > T::zero()).count();
    if occupied != 1 {
        return Err(Error::InvalidDensity(format!("expected mass in exactly one cell, found {occupied}")));
    }
    info(rho, mu, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{uniform_on, Boundary, Grid, MuPreset, StateSpace};

    fn unit_grid(shape: &[usize]) -> Grid<f64> {
        Grid::new(StateSpace::unit_box(shape.len(), Boundary::Reflecting).unwrap(), shape.to_vec()).unwrap()
    }

    #[test]
    fn zero_knowledge_is_zero_information() {
        let g = unit_grid(&[12, 9]);
        let mu = MuPreset::GaussianBump { sigma: 0.3 }.build(&g).unwrap();
        let rho = mu.snapshot(&g, 0.0).unwrap();
        let i = info(&rho, &mu, 0.0).unwrap();
        assert!(i.finite && i.value.abs() < 1e-14);
    }

    #[test]
    fn half_box_gives_log_two() {
        let g = unit_grid(&[10, 10]);
        let mu = DensityOfStates::uniform(g.space());
        let half = CellMask::from_centers(&g, |c| c[0] < 0.5);
        let rho = uniform_on(&g, &half, &mu, 0.0).unwrap();
        assert!((info(&rho, &mu, 0.0).unwrap().value - 2f64.ln()).abs() < 1e-13);
        assert!((boltzmann_info(&g, &half, &mu, 0.0).unwrap() - 2f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn linear_mu_half_interval_gives_log_four() {
        // oracle: direct fine-grid quadrature of ρ log(ρ/μ) with ρ = 8x, μ = 2x on [0, ½]
        let n = 4096;
        let oracle: f64 = (0..n / 2)
            .map(|k| {
                let x = (k as f64 + 0.5) / n as f64;
                8.0 * x * (4.0f64).ln() / n as f64
            })
            .sum();
        assert!((oracle - 4f64.ln()).abs() < 1e-12);

        let g = unit_grid(&[50]);
        let mu = MuPreset::Ramp.build(&g).unwrap();
        let mask = CellMask::from_centers(&g, |c| c[0] < 0.5);
        let rho = uniform_on(&g, &mask, &mu, 0.0).unwrap();
        assert!((info(&rho, &mu, 0.0).unwrap().value - oracle).abs() < 1e-12);
    }

    #[test]
    fn boltzmann_examples() {
        let g = unit_grid(&[8, 8]);
        let mu = DensityOfStates::uniform(g.space());
        assert!(boltzmann_info(&g, &CellMask::full(&g), &mu, 0.0).unwrap().abs() < 1e-15);
        let quad = CellMask::from_centers(&g, |c| c[0] < 0.5 && c[1] < 0.5);
        assert!((boltzmann_info(&g, &quad, &mu, 0.0).unwrap() - 4f64.ln()).abs() < 1e-14);
        assert_eq!(boltzmann_info(&g, &CellMask::empty(&g), &mu, 0.0), Err(Error::EmptySupport));

        // two-cell μ putting 1/e of the states in the left cell
        let g2 = unit_grid(&[2]);
        let e_inv = (-1.0f64).exp();
        let mu2 = DensityOfStates::stationary(move |x: &[f64]| if x[0] < 0.5 { 2.0 * e_inv } else { 2.0 * (1.0 - e_inv) });
        let left = CellMask::from_centers(&g2, |c| c[0] < 0.5);
        assert!((boltzmann_info(&g2, &left, &mu2, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn delta_proxy_grows_with_refinement() {
        for (n, expect) in [(10usize, 100f64.ln()), (20, 400f64.ln()), (1, 0.0)] {
            let g = unit_grid(&[n, n]);
            let mu = DensityOfStates::uniform(g.space());
            let mut vals = vec![0.0; g.len()];
            vals[0] = 1.0 / g.cell_volume();
            let rho = GridDensity::new(g.clone(), vals).unwrap();
            let i = info_delta_proxy(&rho, &mu, 0.0).unwrap();
            assert!(i.finite && (i.value - expect).abs() < 1e-12, "{n}: {}", i.value);
        }
        let g = unit_grid(&[4]);
        let spread = DensityOfStates::uniform(g.space()).snapshot(&g, 0.0).unwrap();
        assert!(info_delta_proxy(&spread, &DensityOfStates::uniform(g.space()), 0.0).is_err());
    }

    #[test]
    fn forbidden_support_is_flagged_infinite() {
        let v = relative_info::<f64>(&[1.0, 1.0], &[2.0, 0.0], 0.5).unwrap();
        assert!(!v.finite && v.value.is_infinite());
        assert!(relative_info(&[f64::NAN], &[1.0], 1.0).is_err());
        assert!(relative_info(&[1.0], &[1.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn zero_cells_contribute_nothing_beyond_mu() {
        let v = relative_info(&[0.0, 2.0], &[1.0, 1.0], 0.5).unwrap();
        assert!((v.value - 2f64.ln()).abs() < 1e-15);
    }
}
