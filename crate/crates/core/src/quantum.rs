//! Particle in a unit box with reflecting walls, ħ = m = 1.
//!
//! ψ(x, t) = Σ c_mn e^{−iE_mn t} φ_mn(x) with φ_mn = 2 sin(mπx) sin(nπy) and
//! E_mn = π²(m² + n²)/2. The guidance law v = Im(∇ψ/ψ) carries |ψ|² as a time-dependent
//! density of states: ∇·(|ψ|² v) = −∂|ψ|²/∂t. Ensembles that start off |ψ|² relax toward
//! it on the coarse-grained level.

use std::sync::Arc;

use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

use crate::coarse::{coarse_grain, CoarseGraining};
use crate::entropy::relative_info;
use crate::error::{Error, Result};
use crate::flow::{flow_map, CapPolicy, FieldError, StepControl, VelocityField};
use crate::rng;
use crate::scalar::Scalar;
use crate::statespace::{quadrature, Boundary, DensityOfStates, Grid, GridDensity, StateSpace};

/// Amplitude floor ε_ψ below which guidance is treated as near a node.
pub const NODE_FLOOR: f64 = 1e-6;
/// Speed cap applied after step halving bottoms out.
pub const SPEED_CAP: f64 = 1e3;
/// Step-halving floor near nodes.
pub const MIN_DT: f64 = 1e-6;

/// Stream index reserved for drawing random phases.
const PHASE_STREAM: u64 = u64::MAX;

/// Coefficients over box eigenmodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet2D<T> {
    modes: Vec<(u32, u32)>,
    coefficients: Vec<Complex<T>>,
    energies: Vec<T>,
}

pub fn energy<T: Scalar>(m: u32, n: u32) -> T {
    T::PI() * T::PI() * T::lit((m * m + n * n) as f64) * T::lit(0.5)
}

/// The `count` lowest-energy (m, n) pairs, ties broken by m.
pub fn lowest_modes(count: usize) -> Vec<(u32, u32)> {
    let mut side = 1u32;
    loop {
        let mut all: Vec<(u32, u32)> = (1..=side).flat_map(|m| (1..=side).map(move |n| (m, n))).collect();
        all.sort_by_key(|&(m, n)| (m * m + n * n, m));
        // every pair with m² + n² ≤ side² is present, so the prefix is final
        let safe = all.iter().take_while(|&&(m, n)| m * m + n * n <= side * side).count();
        if safe >= count {
            all.truncate(count);
            return all;
        }
        side *= 2;
    }
}

impl<T: Scalar> ModeSet2D<T> {
    pub fn new(modes: Vec<(u32, u32)>, coefficients: Vec<Complex<T>>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidSpace("mode set is empty".into()));
        }
        if modes.len() != coefficients.len() {
            return Err(Error::Dimension { expected: modes.len(), got: coefficients.len() });
        }
        if modes.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(Error::InvalidSpace("mode indices must be positive".into()));
        }
        let norm: T = coefficients.iter().map(|c| c.norm_sqr()).sum();
        if !((norm - T::one()).abs() <= T::lit(1e-12).max(T::epsilon() * T::lit(16.0))) {
            return Err(Error::NotNormalized { integral: norm.as_f64(), tolerance: 1e-12 });
        }
        let energies = modes.iter().map(|&(m, n)| energy(m, n)).collect();
        Ok(Self { modes, coefficients, energies })
    }

    pub fn single(m: u32, n: u32) -> Result<Self> {
        Self::new(vec![(m, n)], vec![Complex::new(T::one(), T::zero())])
    }

    /// Equal-weight superposition of the given modes with zero phases.
    pub fn equal(modes: Vec<(u32, u32)>) -> Result<Self> {
        let a = T::one() / T::from_usize_lossy(modes.len()).sqrt();
        let c = vec![Complex::new(a, T::zero()); modes.len()];
        Self::new(modes, c)
    }

    /// The `count` lowest modes with equal amplitudes and uniformly random phases.
    pub fn random_phase(count: usize, seed: u64) -> Result<Self> {
        let modes = lowest_modes(count);
        let mut r = rng::stream(seed, PHASE_STREAM);
        let a = T::one() / T::from_usize_lossy(count).sqrt();
        let c = (0..count)
            .map(|_| {
                let theta = T::lit(r.gen::<f64>() * std::f64::consts::TAU);
                Complex::from_polar(a, theta)
            })
            .collect();
        Self::new(modes, c)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[(u32, u32)] {
        &self.modes
    }

    pub fn coefficients(&self) -> &[Complex<T>] {
        &self.coefficients
    }

    pub fn energies(&self) -> &[T] {
        &self.energies
    }

    /// c_k e^{−iE_k t}.
    pub fn amplitudes_at(&self, t: T) -> Vec<Complex<T>> {
        self.coefficients.iter().zip(&self.energies).map(|(&c, &e)| c * Complex::from_polar(T::one(), -e * t)).collect()
    }

    /// Σ |c_k(t)|².
    pub fn norm_squared_at(&self, t: T) -> T {
        self.amplitudes_at(t).iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Box period 2π/E₁₁.
pub fn box_period<T: Scalar>() -> T {
    T::TAU() / energy::<T>(1, 1)
}

/// The law ċ_k = −iE_k c_k on the 2M real coordinates (Re c_k, Im c_k).
pub fn coefficient_velocity<T: Scalar>(energies: &[T], coords: &[T], out: &mut [T]) {
    for (k, &e) in energies.iter().enumerate() {
        let (re, im) = (coords[2 * k], coords[2 * k + 1]);
        out[2 * k] = e * im;
        out[2 * k + 1] = -e * re;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDivergence<T> {
    /// Σ_k ∂(d Re c_k/dt)/∂Re c_k + ∂(d Im c_k/dt)/∂Im c_k, identically zero.
    pub analytic: T,
    pub finite_difference: T,
}

/// Divergence of the coefficient flow at the current coefficients.
pub fn coefficient_flow_divergence<T: Scalar>(modes: &ModeSet2D<T>) -> FlowDivergence<T> {
    let coords: Vec<T> = modes.coefficients.iter().flat_map(|c| [c.re, c.im]).collect();
    let h = T::lit(1e-6);
    let n = coords.len();
    let mut plus = vec![T::zero(); n];
    let mut minus = vec![T::zero(); n];
    let mut p = coords.clone();
    let mut div = T::zero();
    for i in 0..n {
        p[i] = coords[i] + h;
        coefficient_velocity(&modes.energies, &p, &mut plus);
        p[i] = coords[i] - h;
        coefficient_velocity(&modes.energies, &p, &mut minus);
        p[i] = coords[i];
        div = div + (plus[i] - minus[i]) / (h + h);
    }
    FlowDivergence { analytic: T::zero(), finite_difference: div }
}

/// Scratch buffers for sine/cosine recurrences.
#[derive(Debug, Clone)]
pub struct WaveScratch<T> {
    sx: Vec<T>,
    cx: Vec<T>,
    sy: Vec<T>,
    cy: Vec<T>,
}

/// Evaluator for ψ and ∇ψ of a mode set.
#[derive(Debug, Clone)]
pub struct WaveField<T> {
    modes: Arc<ModeSet2D<T>>,
    kmax: usize,
}

/// sin(kθ), cos(kθ) for k = 0..=kmax by the Chebyshev recurrence.
fn harmonics<T: Scalar>(theta: T, s: &mut [T], c: &mut [T]) {
    let (s1, c1) = theta.sin_cos();
    s[0] = T::zero();
    c[0] = T::one();
    if s.len() > 1 {
        s[1] = s1;
        c[1] = c1;
    }
    let two_c = c1 + c1;
    for k in 2..s.len() {
        s[k] = two_c * s[k - 1] - s[k - 2];
        c[k] = two_c * c[k - 1] - c[k - 2];
    }
}

impl<T: Scalar> WaveField<T> {
    pub fn new(modes: ModeSet2D<T>) -> Self {
        let kmax = modes.modes.iter().map(|&(m, n)| m.max(n) as usize).max().unwrap_or(1);
        Self { modes: Arc::new(modes), kmax }
    }

    pub fn modes(&self) -> &ModeSet2D<T> {
        &self.modes
    }

    pub fn scratch(&self) -> WaveScratch<T> {
        let z = vec![T::zero(); self.kmax + 1];
        WaveScratch { sx: z.clone(), cx: z.clone(), sy: z.clone(), cy: z }
    }

    /// ψ and ∇ψ at `x` for precomputed amplitudes c_k(t).
    pub fn eval_with(&self, amps: &[Complex<T>], x: &[T], ws: &mut WaveScratch<T>) -> (Complex<T>, [Complex<T>; 2]) {
        let pi = T::PI();
        harmonics(pi * x[0], &mut ws.sx, &mut ws.cx);
        harmonics(pi * x[1], &mut ws.sy, &mut ws.cy);
        let mut psi = Complex::new(T::zero(), T::zero());
        let mut gx = psi;
        let mut gy = psi;
        for (&(m, n), &a) in self.modes.modes.iter().zip(amps) {
            let (m, n) = (m as usize, n as usize);
            let (sx, sy) = (ws.sx[m], ws.sy[n]);
            psi = psi + a * (sx * sy);
            gx = gx + a * (T::from_usize_lossy(m) * ws.cx[m] * sy);
            gy = gy + a * (T::from_usize_lossy(n) * sx * ws.cy[n]);
        }
        let two = T::lit(2.0);
        let two_pi = two * pi;
        (psi * two, [gx * two_pi, gy * two_pi])
    }

    pub fn psi(&self, x: &[T], t: T) -> Complex<T> {
        self.eval_with(&self.modes.amplitudes_at(t), x, &mut self.scratch()).0
    }

    pub fn psi_and_gradient(&self, x: &[T], t: T) -> (Complex<T>, [Complex<T>; 2]) {
        self.eval_with(&self.modes.amplitudes_at(t), x, &mut self.scratch())
    }

    /// |ψ(x, t)|².
    pub fn density(&self, x: &[T], t: T) -> T {
        self.psi(x, t).norm_sqr()
    }

    /// Probability current Im(ψ* ∇ψ); smooth through nodes.
    pub fn current(&self, x: &[T], t: T) -> [T; 2] {
        let (psi, g) = self.psi_and_gradient(x, t);
        [cross_im(psi, g[0]), cross_im(psi, g[1])]
    }
}

#[inline]
fn cross_im<T: Scalar>(psi: Complex<T>, g: Complex<T>) -> T {
    psi.re * g.im - psi.im * g.re
}

/// v = Im(ψ* ∇ψ)/|ψ|² into `out`. Near a node the raw velocity is still written (when
/// finite) and `NearSingular` returned.
#[inline]
fn guidance_from<T: Scalar>(psi: Complex<T>, g: [Complex<T>; 2], floor: T, out: &mut [T]) -> std::result::Result<(), FieldError> {
    let rho = psi.norm_sqr();
    out[0] = cross_im(psi, g[0]) / rho;
    out[1] = cross_im(psi, g[1]) / rho;
    if rho.sqrt() <= floor {
        return Err(FieldError::NearSingular);
    }
    Ok(())
}

/// Guidance velocity at `(x, t)`.
pub fn guidance_velocity<T: Scalar>(wave: &WaveField<T>, x: &[T], t: T) -> Result<[T; 2]> {
    let (psi, g) = wave.psi_and_gradient(x, t);
    let mut out = [T::zero(); 2];
    guidance_from(psi, g, T::lit(NODE_FLOOR), &mut out).map_err(|_| Error::IntegrationAborted {
        time: t.as_f64(),
        state: x.iter().map(|v| v.as_f64()).collect(),
        reason: format!("|ψ| = {} at or below the node floor", psi.norm().as_f64()),
    })?;
    Ok(out)
}

/// The guidance law as a general velocity field, reporting `NearSingular` where
/// |ψ| ≤ `node_floor`.
pub fn guidance_field<T: Scalar>(wave: &WaveField<T>, node_floor: T) -> VelocityField<T> {
    let w = wave.clone();
    VelocityField::new(2, false, move |x, t, out| {
        let (psi, g) = w.psi_and_gradient(x, t);
        guidance_from(psi, g, node_floor, out)
    })
}

/// |ψ(·, t)|² as a time-dependent density of states.
pub fn born_dos<T: Scalar>(wave: &WaveField<T>) -> DensityOfStates<T> {
    let w = wave.clone();
    DensityOfStates::time_dependent(move |x: &[T], t: T| w.density(x, t))
}

/// Grid quadrature of |ψ(·, t)|² before normalization.
pub fn born_quadrature<T: Scalar>(wave: &WaveField<T>, grid: &Grid<T>, t: T) -> Result<T> {
    let vals = born_values(wave, grid, t);
    quadrature(grid, &vals, None)
}

fn born_values<T: Scalar>(wave: &WaveField<T>, grid: &Grid<T>, t: T) -> Vec<T> {
    let amps = wave.modes.amplitudes_at(t);
    (0..grid.len())
        .into_par_iter()
        .map_init(
            || (wave.scratch(), vec![T::zero(); 2]),
            |(ws, x), c| {
                grid.cell_center_into(c, x);
                wave.eval_with(&amps, x, ws).0.norm_sqr()
            },
        )
        .collect()
}

/// |ψ(·, t)|² sampled at cell centers and normalized.
pub fn born_density<T: Scalar>(wave: &WaveField<T>, grid: &Grid<T>, t: T) -> Result<GridDensity<T>> {
    GridDensity::from_unnormalized(grid.clone(), born_values(wave, grid, t))
}

/// Finite-difference residual of ∂|ψ|²/∂t + ∇·(|ψ|² v) at `(x, t)`.
pub fn continuity_residual<T: Scalar>(wave: &WaveField<T>, x: &[T], t: T, h: T) -> T {
    let dt = (wave.density(x, t + h) - wave.density(x, t - h)) / (h + h);
    let mut div = T::zero();
    for axis in 0..2 {
        let mut p = [x[0], x[1]];
        p[axis] = x[axis] + h;
        let jp = wave.current(&p, t)[axis];
        p[axis] = x[axis] - h;
        let jm = wave.current(&p, t)[axis];
        div = div + (jp - jm) / (h + h);
    }
    dt + div
}

/// Initial distribution of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialEnsemble {
    /// |φ_mn|² of a single eigenmode, regardless of the actual superposition.
    Mode(u32, u32),
    /// |ψ(·, 0)|² of the superposition (equivariance control).
    Born,
}

impl Default for InitialEnsemble {
    fn default() -> Self {
        InitialEnsemble::Mode(1, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxConfig<T> {
    pub trajectories: usize,
    pub fine_shape: usize,
    pub coarse_shape: usize,
    pub t_final: T,
    pub snapshots: usize,
    pub dt: T,
    pub seed: u64,
    pub initial: InitialEnsemble,
    pub node_floor: T,
    pub speed_cap: T,
    /// Bound on dt·max|k_i − k_1| over RK4 stages; larger steps are split in half.
    pub step_tol: T,
}

impl<T: Scalar> Default for RelaxConfig<T> {
    fn default() -> Self {
        Self {
            trajectories: 100_000,
            fine_shape: 64,
            coarse_shape: 16,
            t_final: box_period::<T>() * T::lit(10.0),
            snapshots: 50,
            dt: T::lit(2e-3),
            seed: 1,
            initial: InitialEnsemble::default(),
            node_floor: T::lit(NODE_FLOOR),
            speed_cap: T::lit(SPEED_CAP),
            step_tol: T::lit(STEP_TOL),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxSnapshot<T> {
    pub t: T,
    pub coarse_h: T,
    /// Fraction of trajectories lost to node errors by this time.
    pub lost_fraction: T,
    /// |∫|ψ|² − 1| on the fine grid.
    pub unitarity_drift: T,
}

#[derive(Debug, Clone)]
pub struct RelaxationResult<T> {
    pub series: Vec<RelaxSnapshot<T>>,
    pub initial_points: Vec<[T; 2]>,
    /// Final positions of surviving trajectories.
    pub final_points: Vec<[T; 2]>,
    pub born_final: GridDensity<T>,
    pub lost: usize,
    /// Trajectories that needed the general integrator near a node at least once.
    pub node_fallbacks: usize,
    /// Sub-steps taken by local refinement beyond the shared time grid.
    pub refined_steps: usize,
    pub steps: usize,
    pub dt: T,
}

/// Fraction of lost trajectories above which a run is degraded.
pub const DEGRADED_LOST_FRACTION: f64 = 0.01;

impl<T: Scalar> RelaxationResult<T> {
    pub fn lost_fraction(&self) -> T {
        self.series.last().map(|s| s.lost_fraction).unwrap_or(T::zero())
    }

    pub fn is_degraded(&self) -> bool {
        self.lost_fraction() > T::lit(DEGRADED_LOST_FRACTION)
    }

    /// coarse_H(end)/coarse_H(0).
    pub fn ratio(&self) -> T {
        self.series[self.series.len() - 1].coarse_h / self.series[0].coarse_h
    }

    pub fn trend(&self) -> Trend<T> {
        let t: Vec<T> = self.series.iter().map(|s| s.t).collect();
        let h: Vec<T> = self.series.iter().map(|s| s.coarse_h).collect();
        linear_trend(&t, &h)
    }
}

/// Least-squares line with the standard error of its slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend<T> {
    pub slope: T,
    pub intercept: T,
    pub slope_stderr: T,
}

pub fn linear_trend<T: Scalar>(x: &[T], y: &[T]) -> Trend<T> {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let sxx: T = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
    let sxy: T = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: T = x.iter().zip(y).map(|(&a, &b)| (b - intercept - slope * a).powi(2)).sum();
    let dof = T::from_usize_lossy(x.len().saturating_sub(2).max(1));
    Trend { slope, intercept, slope_stderr: (ssr / dof / sxx).sqrt() }
}

fn sample_initial<T: Scalar, R: Rng>(wave: &WaveField<T>, initial: InitialEnsemble, bound: T, rng: &mut R) -> Option<[T; 2]> {
    let single = match initial {
        InitialEnsemble::Mode(m, n) => Some((T::from_usize_lossy(m as usize), T::from_usize_lossy(n as usize))),
        InitialEnsemble::Born => None,
    };
    let mut ws = wave.scratch();
    let amps = wave.modes.amplitudes_at(T::zero());
    for _ in 0..1_000_000 {
        let x = [T::lit(rng.gen::<f64>()), T::lit(rng.gen::<f64>())];
        let u = T::lit(rng.gen::<f64>()) * bound;
        let d = match single {
            Some((m, n)) => {
                let s = T::lit(2.0) * (m * T::PI() * x[0]).sin() * (n * T::PI() * x[1]).sin();
                s * s
            }
            None => wave.eval_with(&amps, &x, &mut ws).0.norm_sqr(),
        };
        if u < d {
            return Some(x);
        }
    }
    None
}

/// Default bound on the change of displacement across one RK4 step.
pub const STEP_TOL: f64 = 2e-2;

fn refine_depth<T: Scalar>(dt: T) -> u32 {
    let mut d = 0;
    let mut h = dt;
    while h * T::lit(0.5) >= T::lit(MIN_DT) && d < 30 {
        h = h * T::lit(0.5);
        d += 1;
    }
    d
}

/// Lockstep RK4 with recursive halving where the velocity varies too fast across a step.
struct Stepper<'a, T> {
    wave: &'a WaveField<T>,
    floor: T,
    tol: T,
    max_depth: u32,
}

impl<T: Scalar> Stepper<'_, T> {
    /// One RK4 step; returns the new point and dt·max|k_i − k_1|, or `None` on a node.
    fn rk4(&self, ws: &mut WaveScratch<T>, k: &mut [[T; 2]; 4], x: [T; 2], dt: T, amps: [&[Complex<T>]; 3]) -> Option<([T; 2], T)> {
        let half = dt * T::lit(0.5);
        let mut ok = true;
        let mut stage = |p: [T; 2], a: &[Complex<T>], out: &mut [T; 2], ws: &mut WaveScratch<T>| {
            let (psi, g) = self.wave.eval_with(a, &p, ws);
            ok &= guidance_from(psi, g, self.floor, out).is_ok();
        };
        stage(x, amps[0], &mut k[0], ws);
        stage([x[0] + half * k[0][0], x[1] + half * k[0][1]], amps[1], &mut k[1], ws);
        stage([x[0] + half * k[1][0], x[1] + half * k[1][1]], amps[1], &mut k[2], ws);
        stage([x[0] + dt * k[2][0], x[1] + dt * k[2][1]], amps[2], &mut k[3], ws);
        if !ok {
            return None;
        }
        let mut spread = T::zero();
        for ki in &k[1..] {
            spread = spread.max((ki[0] - k[0][0]).abs()).max((ki[1] - k[0][1]).abs());
        }
        let w = dt / T::lit(6.0);
        let two = T::lit(2.0);
        let y = [
            x[0] + w * (k[0][0] + two * k[1][0] + two * k[2][0] + k[3][0]),
            x[1] + w * (k[0][1] + two * k[1][1] + two * k[2][1] + k[3][1]),
        ];
        Some((y, dt * spread))
    }

    /// Advances `x` from `t` by `dt`; returns the point and the number of extra sub-steps.
    fn advance(
        &self,
        ws: &mut WaveScratch<T>,
        k: &mut [[T; 2]; 4],
        x: [T; 2],
        t: T,
        dt: T,
        table: Option<[&[Complex<T>]; 3]>,
        depth: u32,
    ) -> Option<([T; 2], usize)> {
        let owned;
        let amps = match table {
            Some(a) => a,
            None => {
                let m = &self.wave.modes;
                owned = [m.amplitudes_at(t), m.amplitudes_at(t + dt * T::lit(0.5)), m.amplitudes_at(t + dt)];
                [&owned[0][..], &owned[1][..], &owned[2][..]]
            }
        };
        if let Some((y, spread)) = self.rk4(ws, k, x, dt, amps) {
            if spread <= self.tol || depth >= self.max_depth {
                return Some((y, 0));
            }
        }
        if depth >= self.max_depth {
            return None;
        }
        let h = dt * T::lit(0.5);
        let (mid, n1) = self.advance(ws, k, x, t, h, None, depth + 1)?;
        let (end, n2) = self.advance(ws, k, mid, t + h, h, None, depth + 1)?;
        Some((end, n1 + n2 + 1))
    }
}

enum Fate {
    Alive,
    Lost,
}

struct Outcome<T> {
    /// Coarse cell per snapshot, `None` once lost.
    cells: Vec<Option<u32>>,
    start: [T; 2],
    end: Option<[T; 2]>,
    fallback: bool,
    refined: usize,
}

/// Runs the relaxation experiment and records coarse_H = Σ ρ̄ log(ρ̄/μ̄) · δω per snapshot.
pub fn relaxation_experiment<T: Scalar>(modes: &ModeSet2D<T>, cfg: &RelaxConfig<T>) -> Result<RelaxationResult<T>> {
    if cfg.trajectories == 0 || cfg.snapshots == 0 {
        return Err(Error::InvalidSpace("need at least one trajectory and one snapshot".into()));
    }
    if !(cfg.t_final > T::zero() && cfg.dt > T::zero()) {
        return Err(Error::InvalidSpace("t_final and dt must be positive".into()));
    }
    if cfg.fine_shape == 0 || cfg.coarse_shape == 0 || cfg.fine_shape % cfg.coarse_shape != 0 {
        return Err(Error::CoarseGraining(format!(
            "coarse shape {} must divide fine shape {}",
            cfg.coarse_shape, cfg.fine_shape
        )));
    }
    let space = StateSpace::unit_box(2, Boundary::Reflecting)?;
    let fine = Grid::new(space.clone(), vec![cfg.fine_shape; 2])?;
    let cg = CoarseGraining::uniform(fine.clone(), cfg.fine_shape / cfg.coarse_shape)?;
    let coarse = cg.coarse_grid().clone();
    let wave = WaveField::new(modes.clone());
    let field = guidance_field(&wave, cfg.node_floor);

    // shared time grid aligned with the snapshots
    let per_snap = (cfg.t_final / (T::from_usize_lossy(cfg.snapshots) * cfg.dt)).ceil().to_usize().unwrap_or(1).max(1);
    let steps = per_snap * cfg.snapshots;
    let dt = cfg.t_final / T::from_usize_lossy(steps);
    let half = dt * T::lit(0.5);
    let phase_table: Vec<Vec<Complex<T>>> =
        (0..=2 * steps).into_par_iter().map(|k| modes.amplitudes_at(half * T::from_usize_lossy(k))).collect();

    let bound = match cfg.initial {
        InitialEnsemble::Mode(..) => T::lit(4.0),
        InitialEnsemble::Born => {
            let s: T = modes.coefficients.iter().map(|c| c.norm()).sum();
            T::lit(4.0) * s * s
        }
    };
    let fallback_ctl = StepControl::fixed(dt).with_cap(cfg.speed_cap, CapPolicy::Clamp).with_min_dt(T::lit(MIN_DT));
    let cell_of = |x: &[T; 2]| coarse.locate(x).map(|c| c as u32);
    let stepper = Stepper { wave: &wave, floor: cfg.node_floor, tol: cfg.step_tol, max_depth: refine_depth(dt) };

    let outcomes: Vec<Outcome<T>> = (0..cfg.trajectories)
        .into_par_iter()
        .map_init(
            || (wave.scratch(), [[T::zero(); 2]; 4]),
            |(ws, k), i| -> Result<Outcome<T>> {
                let mut r = rng::stream(cfg.seed, i as u64);
                let start = sample_initial(&wave, cfg.initial, bound, &mut r)
                    .ok_or(Error::SamplingStarved { attempts: 1_000_000 })?;
                let mut x = start;
                let mut cells = Vec::with_capacity(cfg.snapshots + 1);
                cells.push(cell_of(&x));
                let mut fate = Fate::Alive;
                let mut fallback = false;
                let mut refined = 0usize;
                for s in 0..steps {
                    let t0 = dt * T::from_usize_lossy(s);
                    let amps = [&phase_table[2 * s][..], &phase_table[2 * s + 1][..], &phase_table[2 * s + 2][..]];
                    let next = match stepper.advance(ws, k, x, t0, dt, Some(amps), 0) {
                        Some((p, n)) => {
                            refined += n;
                            Some(p)
                        }
                        None => {
                            fallback = true;
                            match flow_map(&field, &space, &x, t0, t0 + dt, &fallback_ctl) {
                                Ok((p, stats)) if stats.capped_steps == 0 => Some([p[0], p[1]]),
                                _ => None,
                            }
                        }
                    };
                    match next.filter(|p| p[0].is_finite() && p[1].is_finite()) {
                        Some(mut p) => {
                            space.reflect(&mut p);
                            x = p;
                        }
                        None => {
                            fate = Fate::Lost;
                        }
                    }
                    if (s + 1) % per_snap == 0 {
                        cells.push(match fate {
                            Fate::Alive => cell_of(&x),
                            Fate::Lost => None,
                        });
                    }
                    if matches!(fate, Fate::Lost) {
                        while cells.len() < cfg.snapshots + 1 {
                            cells.push(None);
                        }
                        break;
                    }
                }
                let end = match fate {
                    Fate::Alive => Some(x),
                    Fate::Lost => None,
                };
                Ok(Outcome { cells, start, end, fallback, refined })
            },
        )
        .collect::<Result<_>>()?;

    let n = cfg.trajectories;
    let mut series = Vec::with_capacity(cfg.snapshots + 1);
    let mut born_final = None;
    for snap in 0..=cfg.snapshots {
        let t = dt * T::from_usize_lossy(snap * per_snap);
        let mut counts = vec![0usize; coarse.len()];
        let mut alive = 0usize;
        for o in &outcomes {
            if let Some(c) = o.cells[snap] {
                counts[c as usize] += 1;
                alive += 1;
            }
        }
        let raw = born_values(&wave, &fine, t);
        let unitarity_drift = (quadrature(&fine, &raw, None)? - T::one()).abs();
        let born = GridDensity::from_unnormalized(fine.clone(), raw)?;
        let mu_bar = coarse_grain(&born, &cg)?;
        let scale = T::one() / (T::from_usize_lossy(alive.max(1)) * coarse.cell_volume());
        let rho_bar: Vec<T> = counts.iter().map(|&c| T::from_usize_lossy(c) * scale).collect();
        let h = relative_info(&rho_bar, mu_bar.values(), coarse.cell_volume())?.value;
        series.push(RelaxSnapshot {
            t,
            coarse_h: h,
            lost_fraction: T::from_usize_lossy(n - alive) / T::from_usize_lossy(n),
            unitarity_drift,
        });
        if snap == cfg.snapshots {
            born_final = Some(born);
        }
    }
    let lost = outcomes.iter().filter(|o| o.end.is_none()).count();
    Ok(RelaxationResult {
        series,
        initial_points: outcomes.iter().map(|o| o.start).collect(),
        final_points: outcomes.iter().filter_map(|o| o.end).collect(),
        born_final: born_final.expect("final snapshot recorded"),
        lost,
        node_fallbacks: outcomes.iter().filter(|o| o.fallback).count(),
        refined_steps: outcomes.iter().map(|o| o.refined).sum(),
        steps,
        dt,
    })
}
