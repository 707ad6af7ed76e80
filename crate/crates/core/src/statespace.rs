//! Rectangular state spaces, regular grids over them, cell masks, densities of states
//! and grid-sampled probability densities.
//!
//! Integrals are midpoint-rule quadratures: the value stored for a cell is the field
//! sampled at its center and every cell carries the same volume.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, pairwise_sum_by, Scalar};

/// Boundary treatment along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    Reflecting,
    /// Flags a configuration the framework excludes; rejected by every operation
    /// that checks [`StateSpace::ensure_supported`].
    AbsorbingForbidden,
}

/// Axis-aligned box `[lo, hi]` in `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace<T> {
    lo: Vec<T>,
    hi: Vec<T>,
    boundary: Vec<Boundary>,
}

impl<T: Scalar> StateSpace<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>, boundary: Vec<Boundary>) -> Result<Self> {
        if lo.is_empty() {
            return Err(Error::InvalidSpace("dimension must be at least 1".into()));
        }
        if hi.len() != lo.len() {
            return Err(Error::Dimension { expected: lo.len(), got: hi.len() });
        }
        if boundary.len() != lo.len() {
            return Err(Error::Dimension { expected: lo.len(), got: boundary.len() });
        }
        for (i, (&a, &b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidSpace(format!("axis {i}: need lo < hi, got [{a}, {b}]")));
            }
        }
        Ok(Self { lo, hi, boundary })
    }

    /// `[0, 1]^dim` with the same boundary on every axis.
    pub fn unit_box(dim: usize, boundary: Boundary) -> Result<Self> {
        Self::new(vec![T::zero(); dim], vec![T::one(); dim], vec![boundary; dim])
    }

    /// `[lo, hi]^dim` with the same boundary on every axis.
    pub fn cube(dim: usize, lo: T, hi: T, boundary: Boundary) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], vec![boundary; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    pub fn boundary(&self) -> &[Boundary] {
        &self.boundary
    }

    pub fn width(&self, axis: usize) -> T {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> T {
        (0..self.dim()).fold(T::one(), |acc, i| acc * self.width(i))
    }

    pub fn ensure_supported(&self) -> Result<()> {
        match self.boundary.iter().position(|b| *b == Boundary::AbsorbingForbidden) {
            Some(axis) => Err(Error::UnsupportedBoundary { axis }),
            None => Ok(()),
        }
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(i, &xi)| xi >= self.lo[i] && xi <= self.hi[i])
    }

    /// Wraps periodic coordinates into `[lo, hi)`; other axes are left alone.
    pub fn wrap(&self, x: &mut [T]) {
        for (i, xi) in x.iter_mut().enumerate() {
            if self.boundary[i] == Boundary::Periodic {
                let w = self.width(i);
                let mut r = (*xi - self.lo[i]) % w;
                if r < T::zero() {
                    r = r + w;
                }
                if r >= w {
                    r = r - w;
                }
                *xi = self.lo[i] + r;
            }
        }
    }

    /// Mirrors coordinates on reflecting axes back into the box. Returns whether any
    /// reflection happened.
    pub fn reflect(&self, x: &mut [T]) -> bool {
        let mut hit = false;
        for (i, xi) in x.iter_mut().enumerate() {
            if self.boundary[i] != Boundary::Reflecting {
                continue;
            }
            let (lo, hi) = (self.lo[i], self.hi[i]);
            let w = hi - lo;
            if *xi < lo || *xi > hi {
                hit = true;
                // fold into [0, 2w) then mirror the upper half
                let two_w = w + w;
                let mut r = (*xi - lo) % two_w;
                if r < T::zero() {
                    r = r + two_w;
                }
                if r > w {
                    r = two_w - r;
                }
                *xi = lo + r;
            }
        }
        hit
    }
}

/// Regular grid of `shape[i]` cells per axis; row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    space: StateSpace<T>,
    shape: Vec<usize>,
    spacing: Vec<T>,
    cell_volume: T,
    len: usize,
}

impl<T: Scalar> Grid<T> {
    pub fn new(space: StateSpace<T>, shape: Vec<usize>) -> Result<Self> {
        if shape.len() != space.dim() {
            return Err(Error::Dimension { expected: space.dim(), got: shape.len() });
        }
        if let Some(axis) = shape.iter().position(|&n| n == 0) {
            return Err(Error::InvalidSpace(format!("axis {axis}: grid needs at least one cell")));
        }
        let spacing: Vec<T> =
            (0..space.dim()).map(|i| space.width(i) / T::from_usize_lossy(shape[i])).collect();
        let cell_volume = spacing.iter().fold(T::one(), |acc, &h| acc * h);
        let len = shape.iter().product();
        Ok(Self { space, shape, spacing, cell_volume, len })
    }

    pub fn space(&self) -> &StateSpace<T> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    pub fn cell_volume(&self) -> T {
        self.cell_volume
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Same space, `factor` times as many cells per axis.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.space.clone(), self.shape.iter().map(|&n| n * factor).collect())
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            out[axis] = flat % self.shape[axis];
            flat /= self.shape[axis];
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn cell_center_into(&self, flat: usize, out: &mut [T]) {
        let mut rem = flat;
        for axis in (0..self.dim()).rev() {
            let i = rem % self.shape[axis];
            rem /= self.shape[axis];
            out[axis] = self.space.lo[axis]
                + (T::from_usize_lossy(i) + T::lit(0.5)) * self.spacing[axis];
        }
    }

    pub fn cell_center(&self, flat: usize) -> Vec<T> {
        let mut c = vec![T::zero(); self.dim()];
        self.cell_center_into(flat, &mut c);
        c
    }

    /// Cell containing `x`, if `x` lies in the box. Points on the upper face belong to
    /// the last cell.
    pub fn locate(&self, x: &[T]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut flat = 0usize;
        for axis in 0..self.dim() {
            let rel = (x[axis] - self.space.lo[axis]) / self.spacing[axis];
            if !(rel >= T::zero()) {
                return None;
            }
            let mut i = rel.floor().to_usize()?;
            if i == self.shape[axis] && x[axis] <= self.space.hi[axis] {
                i -= 1;
            }
            if i >= self.shape[axis] {
                return None;
            }
            flat = flat * self.shape[axis] + i;
        }
        Some(flat)
    }

    /// Samples `f` at every cell center.
    pub fn sample<F: Fn(&[T]) -> T>(&self, f: F) -> Vec<T> {
        let mut c = vec![T::zero(); self.dim()];
        (0..self.len)
            .map(|k| {
                self.cell_center_into(k, &mut c);
                f(&c)
            })
            .collect()
    }
}

/// Boolean selection of grid cells; the discrete stand-in for a region ω ⊆ Ω.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    shape: Vec<usize>,
    cells: Vec<bool>,
}

impl CellMask {
    pub fn full<T: Scalar>(grid: &Grid<T>) -> Self {
        Self { shape: grid.shape().to_vec(), cells: vec![true; grid.len()] }
    }

    pub fn empty<T: Scalar>(grid: &Grid<T>) -> Self {
        Self { shape: grid.shape().to_vec(), cells: vec![false; grid.len()] }
    }

    /// Selects cells whose center satisfies `pred`.
    pub fn from_centers<T: Scalar, F: Fn(&[T]) -> bool>(grid: &Grid<T>, pred: F) -> Self {
        let mut c = vec![T::zero(); grid.dim()];
        let cells = (0..grid.len())
            .map(|k| {
                grid.cell_center_into(k, &mut c);
                pred(&c)
            })
            .collect();
        Self { shape: grid.shape().to_vec(), cells }
    }

    pub fn from_cells(shape: Vec<usize>, cells: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != cells.len() {
            return Err(Error::Dimension { expected: n, got: cells.len() });
        }
        Ok(Self { shape, cells })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn contains(&self, flat: usize) -> bool {
        self.cells[flat]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn ensure_matches<T: Scalar>(&self, grid: &Grid<T>) -> Result<()> {
        if self.shape != grid.shape() {
            return Err(Error::Dimension { expected: grid.len(), got: self.cells.len() });
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && b)
    }

    pub fn complement(&self) -> Self {
        Self { shape: self.shape.clone(), cells: self.cells.iter().map(|c| !c).collect() }
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.cells.iter().zip(&other.cells).all(|(a, b)| !(a & b))
    }

    fn zip(&self, other: &Self, op: impl Fn(bool, bool) -> bool) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension { expected: self.cells.len(), got: other.cells.len() });
        }
        let cells = self.cells.iter().zip(&other.cells).map(|(&a, &b)| op(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), cells })
    }
}

type DensityFn<T> = dyn Fn(&[T], T) -> T + Send + Sync;

/// Default relative normalization tolerance for densities of states.
pub const DEFAULT_NORM_TOL: f64 = 1e-8;

/// The density of states μ(x, t), given as an evaluator. Sampled onto a grid with
/// [`DensityOfStates::snapshot`]; callers keep the snapshot for the time step instead
/// of re-evaluating in inner loops.
#[derive(Clone)]
pub struct DensityOfStates<T> {
    eval: Arc<DensityFn<T>>,
    time_dependent: bool,
    norm_tol: T,
}

impl<T: Scalar> std::fmt::Debug for DensityOfStates<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityOfStates")
            .field("time_dependent", &self.time_dependent)
            .field("norm_tol", &self.norm_tol)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> DensityOfStates<T> {
    pub fn stationary<F>(f: F) -> Self
    where
        F: Fn(&[T]) -> T + Send + Sync + 'static,
    {
        Self { eval: Arc::new(move |x, _t| f(x)), time_dependent: false, norm_tol: T::lit(DEFAULT_NORM_TOL) }
    }

    pub fn time_dependent<F>(f: F) -> Self
    where
        F: Fn(&[T], T) -> T + Send + Sync + 'static,
    {
        Self { eval: Arc::new(f), time_dependent: true, norm_tol: T::lit(DEFAULT_NORM_TOL) }
    }

    pub fn with_tolerance(mut self, tol: T) -> Self {
        self.norm_tol = tol;
        self
    }

    /// Uniform μ = 1/|Ω|.
    pub fn uniform(space: &StateSpace<T>) -> Self {
        let v = T::one() / space.volume();
        Self::stationary(move |_| v)
    }

    /// Wraps an unnormalized stationary shape, scaled so its midpoint quadrature on
    /// `grid` is exactly one.
    pub fn normalized_on<F>(grid: &Grid<T>, shape: F) -> Result<Self>
    where
        F: Fn(&[T]) -> T + Send + Sync + 'static,
    {
        let samples = grid.sample(&shape);
        let total = pairwise_sum(&samples) * grid.cell_volume();
        if !(total.is_finite() && total > T::zero()) {
            return Err(Error::InvalidDensity(format!("shape integrates to {total}")));
        }
        let scale = T::one() / total;
        Ok(Self::stationary(move |x| shape(x) * scale))
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn tolerance(&self) -> T {
        self.norm_tol
    }

    #[inline]
    pub fn eval(&self, x: &[T], t: T) -> T {
        (self.eval)(x, t)
    }

    /// Samples μ(·, t) at cell centers, checking positivity and normalization.
    pub fn snapshot(&self, grid: &Grid<T>, t: T) -> Result<GridDensity<T>> {
        let values = grid.sample(|x| self.eval(x, t));
        check_nonnegative(&values)?;
        let integral = pairwise_sum(&values) * grid.cell_volume();
        if (integral - T::one()).abs() > self.norm_tol {
            return Err(Error::NotNormalized { integral: integral.as_f64(), tolerance: self.norm_tol.as_f64() });
        }
        Ok(GridDensity { grid: grid.clone(), values })
    }
}

/// Named stationary densities of states used by scenarios and tests. Each is normalized
/// on the grid it is built for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuPreset<T> {
    Uniform,
    /// μ ∝ (x₀ − lo₀): linear ramp along the first axis.
    Ramp,
    /// μ ∝ exp(−rate · (x₀ − lo₀)).
    Tilt { rate: T },
    /// μ ∝ exp(−|x − c|² / 2σ²) centered in the box.
    GaussianBump { sigma: T },
}

impl<T: Scalar> MuPreset<T> {
    pub fn build(&self, grid: &Grid<T>) -> Result<DensityOfStates<T>> {
        let space = grid.space().clone();
        match *self {
            MuPreset::Uniform => Ok(DensityOfStates::uniform(&space)),
            MuPreset::Ramp => {
                let lo = space.lo()[0];
                DensityOfStates::normalized_on(grid, move |x| x[0] - lo)
            }
            MuPreset::Tilt { rate } => {
                let lo = space.lo()[0];
                DensityOfStates::normalized_on(grid, move |x| (-(rate * (x[0] - lo))).exp())
            }
            MuPreset::GaussianBump { sigma } => {
                let center: Vec<T> =
                    (0..space.dim()).map(|i| (space.lo()[i] + space.hi()[i]) * T::lit(0.5)).collect();
                let inv = T::one() / (T::lit(2.0) * sigma * sigma);
                DensityOfStates::normalized_on(grid, move |x| {
                    let r2 = x.iter().zip(&center).fold(T::zero(), |acc, (&a, &c)| acc + (a - c) * (a - c));
                    (-(r2 * inv)).exp()
                })
            }
        }
    }
}

fn check_nonnegative<T: Scalar>(values: &[T]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::InvalidDensity(format!("NaN at cell {i}")));
        }
        if v < T::zero() || v.is_infinite() {
            return Err(Error::InvalidDensity(format!("value {v} at cell {i}")));
        }
    }
    Ok(())
}

/// A probability density sampled on a grid: one nonnegative value per cell, with
/// `Σ values · cell_volume = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity<T> {
    grid: Grid<T>,
    values: Vec<T>,
}

impl<T: Scalar> GridDensity<T> {
    /// Validates nonnegativity and normalization (relative tolerance 1e-8).
    pub fn new(grid: Grid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: values.len() });
        }
        check_nonnegative(&values)?;
        let d = Self { grid, values };
        let mass = d.mass();
        let tol = T::lit(DEFAULT_NORM_TOL);
        if (mass - T::one()).abs() > tol {
            return Err(Error::NotNormalized { integral: mass.as_f64(), tolerance: tol.as_f64() });
        }
        Ok(d)
    }

    /// Divides by the quadrature so the result is normalized.
    pub fn from_unnormalized(grid: Grid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: values.len() });
        }
        check_nonnegative(&values)?;
        let mass = pairwise_sum(&values) * grid.cell_volume();
        if !(mass > T::zero() && mass.is_finite()) {
            return Err(Error::EmptySupport);
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(Self { grid, values })
    }

    /// Samples `f` at cell centers and normalizes.
    pub fn from_fn<F: Fn(&[T]) -> T>(grid: Grid<T>, f: F) -> Result<Self> {
        let values = grid.sample(f);
        Self::from_unnormalized(grid, values)
    }

    /// Gaussian blob with per-axis widths, normalized on the grid.
    pub fn gaussian_blob(grid: Grid<T>, center: &[T], widths: &[T]) -> Result<Self> {
        if center.len() != grid.dim() || widths.len() != grid.dim() {
            return Err(Error::Dimension { expected: grid.dim(), got: center.len().min(widths.len()) });
        }
        let center = center.to_vec();
        let widths = widths.to_vec();
        Self::from_fn(grid, move |x| {
            let e = x.iter().enumerate().fold(T::zero(), |acc, (i, &xi)| {
                let z = (xi - center[i]) / widths[i];
                acc + z * z
            });
            (-(e * T::lit(0.5))).exp()
        })
    }

    pub(crate) fn from_parts_unchecked(grid: Grid<T>, values: Vec<T>) -> Self {
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn mass(&self) -> T {
        pairwise_sum(&self.values) * self.grid.cell_volume()
    }

    /// Header line `dim,shape_0..,lo_0..,hi_0..` naming the columns, the values on the
    /// next line, then one line per grid row (last axis varies along a line).
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim();
        let mut s = String::from("dim");
        for i in 0..d {
            let _ = write!(s, ",shape_{i}");
        }
        for i in 0..d {
            let _ = write!(s, ",lo_{i}");
        }
        for i in 0..d {
            let _ = write!(s, ",hi_{i}");
        }
        s.push('\n');
        let _ = write!(s, "{d}");
        for n in self.grid.shape() {
            let _ = write!(s, ",{n}");
        }
        for v in self.grid.space().lo() {
            let _ = write!(s, ",{v}");
        }
        for v in self.grid.space().hi() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
        let row = *self.grid.shape().last().expect("dim >= 1");
        for chunk in self.values.chunks(row) {
            for (j, v) in chunk.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the layout written by [`GridDensity::to_csv`]. Boundaries are taken from
    /// `boundary` since the file does not carry them.
    pub fn from_csv(text: &str, boundary: Boundary) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty grid file".into()))?;
        if !header.starts_with("dim") {
            return Err(Error::Parse("missing `dim,...` header".into()));
        }
        let meta: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("missing grid metadata line".into()))?
            .split(',')
            .collect();
        let dim: usize = meta[0].trim().parse().map_err(|_| Error::Parse("bad dim".into()))?;
        if meta.len() != 1 + 3 * dim {
            return Err(Error::Parse(format!("metadata has {} fields, expected {}", meta.len(), 1 + 3 * dim)));
        }
        let parse_t = |s: &str| -> Result<T> {
            let v: f64 = s.trim().parse().map_err(|_| Error::Parse(format!("bad number `{s}`")))?;
            Ok(T::lit(v))
        };
        let shape = meta[1..1 + dim]
            .iter()
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad shape `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let lo = meta[1 + dim..1 + 2 * dim].iter().map(|s| parse_t(s)).collect::<Result<Vec<_>>>()?;
        let hi = meta[1 + 2 * dim..].iter().map(|s| parse_t(s)).collect::<Result<Vec<_>>>()?;
        let grid = Grid::new(StateSpace::new(lo, hi, vec![boundary; dim])?, shape)?;
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            for tok in line.split(',') {
                values.push(parse_t(tok)?);
            }
        }
        Self::new(grid, values)
    }
}

/// Midpoint-rule integral of a cell field over `region` (the whole grid if `None`).
pub fn quadrature<T: Scalar>(grid: &Grid<T>, field: &[T], region: Option<&CellMask>) -> Result<T> {
    if field.len() != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), got: field.len() });
    }
    let sum = match region {
        None => pairwise_sum(field),
        Some(mask) => {
            mask.ensure_matches(grid)?;
            pairwise_sum_by(field.len(), &|i| if mask.contains(i) { field[i] } else { T::zero() })
        }
    };
    Ok(sum * grid.cell_volume())
}

/// N_ω: the proportion of states in `region` under μ(·, t).
pub fn state_count<T: Scalar>(
    grid: &Grid<T>,
    region: &CellMask,
    mu: &DensityOfStates<T>,
    t: T,
) -> Result<T> {
    let snap = mu.snapshot(grid, t)?;
    quadrature(grid, snap.values(), Some(region))
}

/// The uniform distribution on `region`: μ/N_ω inside, zero outside.
pub fn uniform_on<T: Scalar>(
    grid: &Grid<T>,
    region: &CellMask,
    mu: &DensityOfStates<T>,
    t: T,
) -> Result<GridDensity<T>> {
    let snap = mu.snapshot(grid, t)?;
    uniform_on_snapshot(&snap, region)
}

/// [`uniform_on`] against an already sampled μ.
pub fn uniform_on_snapshot<T: Scalar>(mu: &GridDensity<T>, region: &CellMask) -> Result<GridDensity<T>> {
    let grid = mu.grid();
    let n = quadrature(grid, mu.values(), Some(region))?;
    if !(n > T::zero()) {
        return Err(Error::EmptySupport);
    }
    let values = mu
        .values()
        .iter()
        .enumerate()
        .map(|(i, &m)| if region.contains(i) { m / n } else { T::zero() })
        .collect();
    Ok(GridDensity::from_parts_unchecked(grid.clone(), values))
}
