//! Deterministic dynamics on a state space.
//!
//! A [`VelocityField`] is a law ẋ = v(x, t). Laws satisfying ∇·(μv) = 0 move states
//! along μ-incompressible trajectories; along them the ratio ρ/μ is constant, which is
//! what [`evolve_density`] enforces cell by cell (semi-Lagrangian transport).

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{pairwise_sum, Scalar};
use crate::statespace::{Boundary, CellMask, DensityOfStates, Grid, GridDensity, StateSpace};

/// Why a single field evaluation failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldError {
    /// The point is too close to a singularity of the law (a wavefunction node, say).
    /// When finite, the raw velocity is left in the output buffer so integrators can
    /// fall back to a speed-capped step.
    NearSingular,
    /// The density of states the law divides by is below its floor.
    SingularLaw { mu: f64 },
    NonFinite,
}

type FieldFn<T> = dyn Fn(&[T], T, &mut [T]) -> std::result::Result<(), FieldError> + Send + Sync;

/// A law ẋ = v(x, t), assumed continuously differentiable.
#[derive(Clone)]
pub struct VelocityField<T> {
    dim: usize,
    autonomous: bool,
    eval: Arc<FieldFn<T>>,
}

impl<T: Scalar> std::fmt::Debug for VelocityField<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VelocityField").field("dim", &self.dim).field("autonomous", &self.autonomous).finish()
    }
}

impl<T: Scalar> VelocityField<T> {
    /// Time-independent law from an infallible closure.
    pub fn autonomous<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[T], &mut [T]) + Send + Sync + 'static,
    {
        Self {
            dim,
            autonomous: true,
            eval: Arc::new(move |x, _t, out| {
                f(x, out);
                Ok(())
            }),
        }
    }

    /// General law; `autonomous` marks fields that ignore `t`, which lets transport
    /// reuse trajectory feet between snapshots.
    pub fn new<F>(dim: usize, autonomous: bool, f: F) -> Self
    where
        F: Fn(&[T], T, &mut [T]) -> std::result::Result<(), FieldError> + Send + Sync + 'static,
    {
        Self { dim, autonomous, eval: Arc::new(f) }
    }

    pub fn zero(dim: usize) -> Self {
        Self::autonomous(dim, |_, out| out.iter_mut().for_each(|v| *v = T::zero()))
    }

    /// Rigid rotation `ω (−(y − c_y), x − c_x)`.
    pub fn rotation(center: [T; 2], omega: T) -> Self {
        Self::autonomous(2, move |x, out| {
            out[0] = -omega * (x[1] - center[1]);
            out[1] = omega * (x[0] - center[0]);
        })
    }

    /// Uniform expansion `v = x − origin`: the stock information-violating law.
    pub fn dilation(origin: Vec<T>) -> Self {
        let dim = origin.len();
        Self::autonomous(dim, move |x, out| {
            for i in 0..out.len() {
                out[i] = x[i] - origin[i];
            }
        })
    }

    /// Plane shear `v = (rate · y, 0)`.
    pub fn shear(rate: T) -> Self {
        Self::autonomous(2, move |x, out| {
            out[0] = rate * x[1];
            out[1] = T::zero();
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    #[inline]
    pub fn eval(&self, x: &[T], t: T, out: &mut [T]) -> std::result::Result<(), FieldError> {
        (self.eval)(x, t, out)
    }

    /// Evaluates into a fresh vector, mapping failures to crate errors.
    pub fn velocity(&self, x: &[T], t: T) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim];
        self.eval(x, t, &mut out).map_err(|e| field_error(e, x, t))?;
        Ok(out)
    }
}

fn to_f64s<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

fn field_error<T: Scalar>(e: FieldError, x: &[T], t: T) -> Error {
    match e {
        FieldError::SingularLaw { mu } => Error::SingularLaw { point: to_f64s(x), mu },
        other => Error::IntegrationAborted { time: t.as_f64(), state: to_f64s(x), reason: format!("{other:?}") },
    }
}

/// What to do when the speed exceeds [`SpeedCap::cap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapPolicy {
    Error,
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedCap<T> {
    pub cap: T,
    pub policy: CapPolicy,
}

/// Local error control for step-doubling RK4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adaptive<T> {
    pub rtol: T,
    pub atol: T,
    pub max_dt: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// Mirror positions back through reflecting walls after each step.
    Reflect,
    /// Integrate in the ambient ℝⁿ (periodic axes still wrap); callers check the end.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl<T> {
    pub dt: T,
    pub adaptive: Option<Adaptive<T>>,
    /// Floor for step halving near singular points.
    pub min_dt: T,
    pub speed_cap: Option<SpeedCap<T>>,
    pub boundary: BoundaryPolicy,
}

impl<T: Scalar> StepControl<T> {
    pub fn fixed(dt: T) -> Self {
        Self { dt, adaptive: None, min_dt: T::lit(1e-6), speed_cap: None, boundary: BoundaryPolicy::Reflect }
    }

    pub fn adaptive(dt: T, rtol: T, atol: T, max_dt: T) -> Self {
        Self { adaptive: Some(Adaptive { rtol, atol, max_dt }), ..Self::fixed(dt) }
    }

    pub fn with_cap(mut self, cap: T, policy: CapPolicy) -> Self {
        self.speed_cap = Some(SpeedCap { cap, policy });
        self
    }

    pub fn with_boundary(mut self, boundary: BoundaryPolicy) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_min_dt(mut self, min_dt: T) -> Self {
        self.min_dt = min_dt;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub steps: usize,
    pub rejected: usize,
    pub halvings: usize,
    /// Accepted steps in which at least one stage velocity was clamped to the cap.
    pub capped_steps: usize,
    pub reflections: usize,
}

/// A sampled trajectory x(x′, t).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    dim: usize,
    times: Vec<T>,
    points: Vec<T>,
    pub stats: IntegrationStats,
}

impl<T: Scalar> Trajectory<T> {
    fn start(x0: &[T], t0: T) -> Self {
        Self { dim: x0.len(), times: vec![t0], points: x0.to_vec(), stats: IntegrationStats::default() }
    }

    fn push(&mut self, t: T, x: &[T]) {
        self.times.push(t);
        self.points.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn start_point(&self) -> &[T] {
        self.point(0)
    }

    pub fn end_point(&self) -> &[T] {
        self.point(self.len() - 1)
    }
}

enum StepFail {
    NearSingular,
    Stiff { speed: f64 },
    Fatal(FieldError),
}

struct Workspace<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
    full: Vec<T>,
    half: Vec<T>,
    capped: bool,
}

impl<T: Scalar> Workspace<T> {
    fn new(dim: usize) -> Self {
        let z = vec![T::zero(); dim];
        Self {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z.clone(),
            full: z.clone(),
            half: z,
            capped: false,
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

fn eval_stage<T: Scalar>(
    v: &VelocityField<T>,
    x: &[T],
    t: T,
    out: &mut [T],
    cap: Option<SpeedCap<T>>,
    allow_cap: bool,
    capped: &mut bool,
) -> std::result::Result<(), StepFail> {
    let res = v.eval(x, t, out);
    let finite = out.iter().all(|c| c.is_finite());
    match res {
        Ok(()) if !finite => Err(StepFail::Fatal(FieldError::NonFinite)),
        Ok(()) => {
            if let Some(SpeedCap { cap, policy }) = cap {
                let s = norm(out);
                if s > cap {
                    match policy {
                        CapPolicy::Error => return Err(StepFail::Stiff { speed: s.as_f64() }),
                        CapPolicy::Clamp => {
                            let k = cap / s;
                            out.iter_mut().for_each(|c| *c = *c * k);
                            *capped = true;
                        }
                    }
                }
            }
            Ok(())
        }
        Err(FieldError::NearSingular) => match cap {
            Some(SpeedCap { cap, .. }) if allow_cap && finite => {
                let s = norm(out);
                if s > cap {
                    let k = cap / s;
                    out.iter_mut().for_each(|c| *c = *c * k);
                }
                *capped = true;
                Ok(())
            }
            _ => Err(StepFail::NearSingular),
        },
        Err(e) => Err(StepFail::Fatal(e)),
    }
}

/// One classical RK4 step from `x` into `out`.
fn rk4_into<T: Scalar>(
    v: &VelocityField<T>,
    x: &[T],
    t: T,
    h: T,
    ws: &mut Workspace<T>,
    out_sel: fn(&mut Workspace<T>) -> &mut Vec<T>,
    cap: Option<SpeedCap<T>>,
    allow_cap: bool,
) -> std::result::Result<(), StepFail> {
    let half = h * T::lit(0.5);
    let n = x.len();
    let mut capped = ws.capped;
    eval_stage(v, x, t, &mut ws.k1, cap, allow_cap, &mut capped)?;
    for i in 0..n {
        ws.tmp[i] = x[i] + half * ws.k1[i];
    }
    eval_stage(v, &ws.tmp, t + half, &mut ws.k2, cap, allow_cap, &mut capped)?;
    for i in 0..n {
        ws.tmp[i] = x[i] + half * ws.k2[i];
    }
    eval_stage(v, &ws.tmp, t + half, &mut ws.k3, cap, allow_cap, &mut capped)?;
    for i in 0..n {
        ws.tmp[i] = x[i] + h * ws.k3[i];
    }
    eval_stage(v, &ws.tmp, t + h, &mut ws.k4, cap, allow_cap, &mut capped)?;
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let k: Vec<T> = (0..n).map(|i| ws.k1[i] + two * ws.k2[i] + two * ws.k3[i] + ws.k4[i]).collect();
    ws.capped = capped;
    let out = out_sel(ws);
    for i in 0..n {
        out[i] = x[i] + sixth * k[i];
    }
    Ok(())
}

fn sel_full<T>(ws: &mut Workspace<T>) -> &mut Vec<T> {
    &mut ws.full
}

fn sel_half<T>(ws: &mut Workspace<T>) -> &mut Vec<T> {
    &mut ws.half
}

/// Advances `x` in place from `t0` to `t1` (either direction). Points are recorded into
/// `record` after every accepted step when given.
fn advance_in_place<T: Scalar>(
    v: &VelocityField<T>,
    space: &StateSpace<T>,
    x: &mut [T],
    t0: T,
    t1: T,
    ctl: &StepControl<T>,
    mut record: Option<&mut Trajectory<T>>,
) -> Result<IntegrationStats> {
    let dim = x.len();
    if dim != v.dim() {
        return Err(Error::Dimension { expected: v.dim(), got: dim });
    }
    let mut stats = IntegrationStats::default();
    let mut ws = Workspace::new(dim);
    let dir = if t1 >= t0 { T::one() } else { -T::one() };
    let eps = T::lit(1e-12) * (T::one() + t0.abs().max(t1.abs()));
    let mut t = t0;
    let mut h_nom = ctl.dt.abs();
    if !(h_nom > T::zero()) {
        return Err(Error::InvalidSpace(format!("step size must be positive, got {}", ctl.dt)));
    }
    let mut x_half = vec![T::zero(); dim];
    while (t1 - t) * dir > eps {
        let remaining = (t1 - t).abs();
        let mut h = h_nom.min(remaining);
        let mut allow_cap = false;
        let accepted_h = loop {
            ws.capped = false;
            let signed = h * dir;
            let attempt = match ctl.adaptive {
                None => rk4_into(v, x, t, signed, &mut ws, sel_full, ctl.speed_cap, allow_cap).map(|_| None),
                Some(ad) => (|| {
                    rk4_into(v, x, t, signed, &mut ws, sel_full, ctl.speed_cap, allow_cap)?;
                    let hh = signed * T::lit(0.5);
                    rk4_into(v, x, t, hh, &mut ws, sel_half, ctl.speed_cap, allow_cap)?;
                    x_half.copy_from_slice(&ws.half);
                    rk4_into(v, &x_half, t + hh, hh, &mut ws, sel_half, ctl.speed_cap, allow_cap)?;
                    let mut err = T::zero();
                    for i in 0..dim {
                        let scale = ad.atol + ad.rtol * ws.half[i].abs().max(x[i].abs());
                        err = err.max((ws.half[i] - ws.full[i]).abs() / scale);
                    }
                    Ok(Some(err / T::lit(15.0)))
                })(),
            };
            match attempt {
                Ok(None) => break h,
                Ok(Some(err)) => {
                    let ad = ctl.adaptive.expect("adaptive attempt");
                    let factor = if err > T::zero() { T::lit(0.9) * err.powf(T::lit(-0.2)) } else { T::lit(4.0) };
                    if err <= T::one() || h <= ctl.min_dt {
                        // Richardson-improved half-step solution
                        for i in 0..dim {
                            ws.full[i] = ws.half[i] + (ws.half[i] - ws.full[i]) / T::lit(15.0);
                        }
                        h_nom = (h * factor.min(T::lit(4.0))).min(ad.max_dt).max(ctl.min_dt);
                        break h;
                    }
                    stats.rejected += 1;
                    h = (h * factor.max(T::lit(0.2))).max(ctl.min_dt);
                }
                Err(StepFail::NearSingular) => {
                    stats.halvings += 1;
                    let halved = h * T::lit(0.5);
                    if halved >= ctl.min_dt {
                        h = halved;
                    } else if !allow_cap && ctl.speed_cap.is_some() {
                        allow_cap = true;
                        h = ctl.min_dt.min(remaining);
                    } else {
                        return Err(Error::IntegrationAborted {
                            time: t.as_f64(),
                            state: to_f64s(x),
                            reason: "singular point not resolved at minimum step".into(),
                        });
                    }
                }
                Err(StepFail::Stiff { speed }) => {
                    return Err(Error::Stiffness {
                        time: t.as_f64(),
                        speed,
                        cap: ctl.speed_cap.map(|c| c.cap.as_f64()).unwrap_or(f64::INFINITY),
                    })
                }
                Err(StepFail::Fatal(e)) => return Err(field_error(e, x, t)),
            }
        };
        x.copy_from_slice(&ws.full);
        t = if remaining - accepted_h <= eps { t1 } else { t + accepted_h * dir };
        stats.steps += 1;
        if ws.capped {
            stats.capped_steps += 1;
        }
        space.wrap(x);
        if ctl.boundary == BoundaryPolicy::Reflect && space.reflect(x) {
            stats.reflections += 1;
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(t, x);
        }
    }
    Ok(stats)
}

fn check_start<T: Scalar>(v: &VelocityField<T>, space: &StateSpace<T>, x0: &[T]) -> Result<()> {
    space.ensure_supported()?;
    if x0.len() != space.dim() || v.dim() != space.dim() {
        return Err(Error::Dimension { expected: space.dim(), got: x0.len().min(v.dim()) });
    }
    if !space.contains(x0) {
        return Err(Error::InvalidSpace(format!("start point {:?} outside the state space", to_f64s(x0))));
    }
    Ok(())
}

/// Integrates ẋ = v from `x0` at `t0` to `t1` with classical RK4 (fixed or step-doubling
/// adaptive), recording every accepted step.
pub fn integrate<T: Scalar>(
    v: &VelocityField<T>,
    space: &StateSpace<T>,
    x0: &[T],
    t0: T,
    t1: T,
    ctl: &StepControl<T>,
) -> Result<Trajectory<T>> {
    check_start(v, space, x0)?;
    let mut traj = Trajectory::start(x0, t0);
    let mut x = x0.to_vec();
    let stats = advance_in_place(v, space, &mut x, t0, t1, ctl, Some(&mut traj))?;
    traj.stats = stats;
    Ok(traj)
}

/// Endpoint of the trajectory through `x0`, without recording.
pub fn flow_map<T: Scalar>(
    v: &VelocityField<T>,
    space: &StateSpace<T>,
    x0: &[T],
    t0: T,
    t1: T,
    ctl: &StepControl<T>,
) -> Result<(Vec<T>, IntegrationStats)> {
    let mut x = x0.to_vec();
    let stats = advance_in_place(v, space, &mut x, t0, t1, ctl, None)?;
    Ok((x, stats))
}

/// Members integrated on a shared time grid.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble<T> {
    pub starts: Vec<Vec<T>>,
    pub control: StepControl<T>,
}

impl<T: Scalar> TrajectoryEnsemble<T> {
    pub fn new(starts: Vec<Vec<T>>, control: StepControl<T>) -> Self {
        Self { starts, control }
    }

    /// Integrates every member through `times` (increasing or decreasing); each result
    /// holds exactly one point per entry of `times`.
    pub fn run(&self, v: &VelocityField<T>, space: &StateSpace<T>, times: &[T]) -> Result<Vec<Trajectory<T>>> {
        if times.is_empty() {
            return Ok(Vec::new());
        }
        self.starts
            .par_iter()
            .map(|x0| {
                check_start(v, space, x0)?;
                let mut traj = Trajectory::start(x0, times[0]);
                let mut x = x0.clone();
                for w in times.windows(2) {
                    let s = advance_in_place(v, space, &mut x, w[0], w[1], &self.control, None)?;
                    traj.stats.steps += s.steps;
                    traj.stats.rejected += s.rejected;
                    traj.stats.halvings += s.halvings;
                    traj.stats.capped_steps += s.capped_steps;
                    traj.stats.reflections += s.reflections;
                    traj.push(w[1], &x);
                }
                Ok(traj)
            })
            .collect()
    }
}

/// Smallest distance between two distinct members at a common time index. Exact
/// deterministic dynamics never brings distinct starts together.
pub fn min_pairwise_separation<T: Scalar>(trajs: &[Trajectory<T>]) -> T {
    let mut best = T::infinity();
    for a in 0..trajs.len() {
        for b in a + 1..trajs.len() {
            let n = trajs[a].len().min(trajs[b].len());
            for k in 0..n {
                let d = trajs[a].point(k).iter().zip(trajs[b].point(k)).fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q));
                best = best.min(d.sqrt());
            }
        }
    }
    best
}

/// Central-difference estimate of ∇·(μ v) at `(x, t)`.
pub fn mu_divergence<T: Scalar>(
    v: &VelocityField<T>,
    mu: &DensityOfStates<T>,
    space: &StateSpace<T>,
    x: &[T],
    t: T,
    h: T,
) -> Result<T> {
    let dim = space.dim();
    if x.len() != dim || v.dim() != dim {
        return Err(Error::Dimension { expected: dim, got: x.len() });
    }
    for i in 0..dim {
        if space.boundary()[i] != Boundary::Periodic && (x[i] - h < space.lo()[i] || x[i] + h > space.hi()[i]) {
            return Err(Error::Stencil { point: to_f64s(x), h: h.as_f64() });
        }
    }
    let mut p = x.to_vec();
    let mut out = vec![T::zero(); dim];
    let mut flux = |p: &[T], axis: usize| -> Result<T> {
        let mut q = p.to_vec();
        space.wrap(&mut q);
        v.eval(&q, t, &mut out).map_err(|e| field_error(e, &q, t))?;
        Ok(mu.eval(&q, t) * out[axis])
    };
    let mut div = T::zero();
    for i in 0..dim {
        p[i] = x[i] + h;
        let plus = flux(&p, i)?;
        p[i] = x[i] - h;
        let minus = flux(&p, i)?;
        p[i] = x[i];
        div = div + (plus - minus) / (h + h);
    }
    Ok(div)
}

type ScalarFn<T> = dyn Fn(&[T]) -> T + Send + Sync;
type GradFn<T> = dyn Fn(&[T]) -> [T; 2] + Send + Sync;

/// Scalar stream function s(x, y) with its gradient.
#[derive(Clone)]
pub struct StreamFunction<T> {
    value: Arc<ScalarFn<T>>,
    gradient: Arc<GradFn<T>>,
}

impl<T: Scalar> std::fmt::Debug for StreamFunction<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("StreamFunction")
    }
}

impl<T: Scalar> StreamFunction<T> {
    pub fn new<S, G>(value: S, gradient: G) -> Self
    where
        S: Fn(&[T]) -> T + Send + Sync + 'static,
        G: Fn(&[T]) -> [T; 2] + Send + Sync + 'static,
    {
        Self { value: Arc::new(value), gradient: Arc::new(gradient) }
    }

    /// Gradient by central differences with step `h`.
    pub fn from_fn<S>(value: S, h: T) -> Self
    where
        S: Fn(&[T]) -> T + Send + Sync + 'static,
    {
        let value: Arc<ScalarFn<T>> = Arc::new(value);
        let s = value.clone();
        let gradient = move |x: &[T]| {
            let two_h = h + h;
            let gx = (s(&[x[0] + h, x[1]]) - s(&[x[0] - h, x[1]])) / two_h;
            let gy = (s(&[x[0], x[1] + h]) - s(&[x[0], x[1] - h])) / two_h;
            [gx, gy]
        };
        Self { value, gradient: Arc::new(gradient) }
    }

    pub fn constant(c: T) -> Self {
        Self::new(move |_| c, |_| [T::zero(), T::zero()])
    }

    /// `s = y`.
    pub fn linear_y() -> Self {
        Self::new(|x| x[1], |_| [T::zero(), T::one()])
    }

    /// `s = ½ |x − c|²`; with uniform μ = 1 this is the rotation v = (y − c_y, −(x − c_x)).
    pub fn quadratic(center: [T; 2]) -> Self {
        let half = T::lit(0.5);
        Self::new(
            move |x| half * ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)),
            move |x| [x[0] - center[0], x[1] - center[1]],
        )
    }

    /// Cellular `s = amp · sin(mπξ) sin(nπη)` in box-normalized coordinates, times the
    /// tilt factor `(1 + a ξ + b η)`. Vanishes on the walls, so the law is tangent there.
    pub fn cell(space: &StateSpace<T>, m: u32, n: u32, amp: T, a: T, b: T) -> Self {
        let (lx, ly) = (space.lo()[0], space.lo()[1]);
        let (wx, wy) = (space.width(0), space.width(1));
        let (km, kn) = (T::PI() * T::lit(m as f64), T::PI() * T::lit(n as f64));
        let value = move |x: &[T]| {
            let (xi, eta) = ((x[0] - lx) / wx, (x[1] - ly) / wy);
            amp * (km * xi).sin() * (kn * eta).sin() * (T::one() + a * xi + b * eta)
        };
        let gradient = move |x: &[T]| {
            let (xi, eta) = ((x[0] - lx) / wx, (x[1] - ly) / wy);
            let (sx, cx) = (km * xi).sin_cos();
            let (sy, cy) = (kn * eta).sin_cos();
            let g = T::one() + a * xi + b * eta;
            let d_xi = amp * (km * cx * sy * g + sx * sy * a);
            let d_eta = amp * (kn * sx * cy * g + sx * sy * b);
            [d_xi / wx, d_eta / wy]
        };
        Self::new(value, gradient)
    }

    pub fn value(&self, x: &[T]) -> T {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[T]) -> [T; 2] {
        (self.gradient)(x)
    }
}

/// Floor below which μ is treated as zero by [`stream_field`].
pub const MU_FLOOR: f64 = 1e-12;

/// The planar law `v = (1/μ)(∂s/∂y, −∂s/∂x)`. Then μv = (∂s/∂y, −∂s/∂x), whose
/// divergence vanishes identically, so the law is μ-incompressible by construction.
pub fn stream_field<T: Scalar>(mu: &DensityOfStates<T>, s: &StreamFunction<T>, space: &StateSpace<T>) -> Result<VelocityField<T>> {
    if space.dim() != 2 {
        return Err(Error::Dimension { expected: 2, got: space.dim() });
    }
    let mu = mu.clone();
    let s = s.clone();
    let floor = T::lit(MU_FLOOR);
    let autonomous = !mu.is_time_dependent();
    Ok(VelocityField::new(2, autonomous, move |x, t, out| {
        let m = mu.eval(x, t);
        if !(m > floor) {
            return Err(FieldError::SingularLaw { mu: m.as_f64() });
        }
        let g = s.gradient(x);
        out[0] = g[1] / m;
        out[1] = -g[0] / m;
        Ok(())
    }))
}

/// Multilinear interpolation of a cell field at `x`. Periodic axes wrap; other axes
/// hold the edge value over the outer half cell.
pub fn interpolate<T: Scalar>(grid: &Grid<T>, values: &[T], x: &[T]) -> T {
    let dim = grid.dim();
    let space = grid.space();
    let mut i0 = [0usize; 8];
    let mut i1 = [0usize; 8];
    let mut frac = [T::zero(); 8];
    for a in 0..dim {
        let n = grid.shape()[a];
        let pos = (x[a] - space.lo()[a]) / grid.spacing()[a] - T::lit(0.5);
        if space.boundary()[a] == Boundary::Periodic {
            let f = pos.floor();
            let base = f.to_i64().unwrap_or(0).rem_euclid(n as i64) as usize;
            i0[a] = base;
            i1[a] = (base + 1) % n;
            frac[a] = pos - f;
        } else if n == 1 {
            i0[a] = 0;
            i1[a] = 0;
        } else {
            let p = pos.max(T::zero()).min(T::from_usize_lossy(n - 1));
            let base = p.floor().to_usize().unwrap_or(0).min(n - 2);
            i0[a] = base;
            i1[a] = base + 1;
            frac[a] = p - T::from_usize_lossy(base);
        }
    }
    let mut acc = T::zero();
    let mut idx = [0usize; 8];
    for corner in 0..(1usize << dim) {
        let mut w = T::one();
        for a in 0..dim {
            if corner >> a & 1 == 1 {
                idx[a] = i1[a];
                w = w * frac[a];
            } else {
                idx[a] = i0[a];
                w = w * (T::one() - frac[a]);
            }
        }
        if w != T::zero() {
            acc = acc + w * values[grid.flat_index(&idx[..dim])];
        }
    }
    acc
}

/// Result of transporting a density.
#[derive(Debug, Clone)]
pub struct Evolved<T> {
    pub time: T,
    pub density: GridDensity<T>,
    /// |∫ρ − 1| before renormalization.
    pub normalization_drift: T,
}

/// Largest grid dimension handled by [`evolve_density`].
pub const MAX_GRID_DIM: usize = 3;

fn backward_foot<T: Scalar>(
    v: &VelocityField<T>,
    space: &StateSpace<T>,
    x: &mut [T],
    t_from: T,
    t_to: T,
    ctl: &StepControl<T>,
) -> Result<()> {
    advance_in_place(v, space, x, t_from, t_to, ctl, None)?;
    space.wrap(x);
    for a in 0..space.dim() {
        if space.boundary()[a] == Boundary::Periodic {
            continue;
        }
        let slack = T::lit(1e-6) * space.width(a);
        if x[a] < space.lo()[a] - slack || x[a] > space.hi()[a] + slack {
            return Err(Error::BoundaryExit { point: to_f64s(x), axis: a });
        }
        x[a] = x[a].max(space.lo()[a]).min(space.hi()[a]);
    }
    Ok(())
}

fn transport_from_feet<T: Scalar>(
    rho0: &GridDensity<T>,
    mu0: &GridDensity<T>,
    mu_t: &GridDensity<T>,
    feet: &[T],
    t: T,
) -> Result<Evolved<T>> {
    let grid = rho0.grid();
    let dim = grid.dim();
    let values: Vec<T> = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let foot = &feet[c * dim..(c + 1) * dim];
            let r = interpolate(grid, rho0.values(), foot);
            let m = interpolate(grid, mu0.values(), foot);
            if m > T::zero() {
                mu_t.values()[c] * r / m
            } else {
                T::zero()
            }
        })
        .collect();
    let mass = pairwise_sum(&values) * grid.cell_volume();
    if !(mass > T::zero() && mass.is_finite()) {
        return Err(Error::InvalidDensity(format!("transported mass {mass}")));
    }
    let density = GridDensity::from_parts_unchecked(grid.clone(), values.into_iter().map(|v| v / mass).collect());
    Ok(Evolved { time: t, density, normalization_drift: (mass - T::one()).abs() })
}

fn transport_setup<T: Scalar>(rho0: &GridDensity<T>, v: &VelocityField<T>) -> Result<StepControlCheck> {
    let grid = rho0.grid();
    grid.space().ensure_supported()?;
    if grid.dim() > MAX_GRID_DIM {
        return Err(Error::Dimension { expected: MAX_GRID_DIM, got: grid.dim() });
    }
    if v.dim() != grid.dim() {
        return Err(Error::Dimension { expected: grid.dim(), got: v.dim() });
    }
    Ok(StepControlCheck)
}

struct StepControlCheck;

/// Transports `rho0` to time `t` under `v`.
///
/// Each cell center is integrated back to its foot x₀ at time 0; the new value is
/// μ(x, t) · ρ₀(x₀)/μ(x₀, 0) with ρ₀ and μ(·, 0) interpolated multilinearly. The result
/// is renormalized and the drift reported. Feet that leave Ω on a non-periodic axis are
/// an error.
pub fn evolve_density<T: Scalar>(
    rho0: &GridDensity<T>,
    v: &VelocityField<T>,
    mu: &DensityOfStates<T>,
    t: T,
    ctl: &StepControl<T>,
) -> Result<Evolved<T>> {
    Ok(evolve_density_series(rho0, v, mu, &[t], ctl)?.remove(0))
}

/// [`evolve_density`] at several times. For autonomous laws the feet of one snapshot
/// are carried back further for the next, which equals integrating from scratch.
pub fn evolve_density_series<T: Scalar>(
    rho0: &GridDensity<T>,
    v: &VelocityField<T>,
    mu: &DensityOfStates<T>,
    times: &[T],
    ctl: &StepControl<T>,
) -> Result<Vec<Evolved<T>>> {
    transport_setup(rho0, v)?;
    let grid = rho0.grid();
    let space = grid.space();
    let dim = grid.dim();
    let ctl = ctl.with_boundary(BoundaryPolicy::Free);
    let mu0 = mu.snapshot(grid, T::zero())?;
    let centers: Vec<T> = (0..grid.len()).flat_map(|c| grid.cell_center(c)).collect();
    let reuse = v.is_autonomous() && times.windows(2).all(|w| w[1] >= w[0]) && times.iter().all(|&t| t >= T::zero());

    let mut feet = centers.clone();
    let mut feet_time = T::zero();
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mu_t = if mu.is_time_dependent() { mu.snapshot(grid, t)? } else { mu0.clone() };
        let (from, start): (T, &Vec<T>) = if reuse { (feet_time, &feet) } else { (T::zero(), &centers) };
        // autonomous: x₀(t) = Φ_{−(t − from)}(x₀(from))
        let (t_hi, t_lo) = if reuse { (t - from, T::zero()) } else { (t, T::zero()) };
        let next: Vec<T> = start
            .par_chunks(dim)
            .map(|c| {
                let mut x = c.to_vec();
                backward_foot(v, space, &mut x, t_hi, t_lo, &ctl)?;
                Ok(x)
            })
            .collect::<Result<Vec<Vec<T>>>>()?
            .into_iter()
            .flatten()
            .collect();
        out.push(transport_from_feet(rho0, &mu0, &mu_t, &next, t)?);
        if reuse {
            feet = next;
            feet_time = t;
        }
    }
    Ok(out)
}

/// Result of a Monte-Carlo check that a law maps regions to regions with the same
/// number of states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeCheck<T> {
    /// N_ω of the region (quadrature of μ at time 0).
    pub n_before: T,
    /// N of the image region from forward-advected samples weighted by
    /// μ(x_t, t) det(∂x_t/∂x₀) / μ(x₀, 0).
    pub n_after: T,
    /// Independent estimate: fraction of μ(·, t)-samples whose backward foot lands in
    /// the region.
    pub n_after_hit: T,
    pub hit_std_error: T,
    /// Largest |weight − 1| over forward samples; 0 for μ-incompressible laws, which
    /// means det(∂x_t/∂x₀) = μ(x₀, 0)/μ(x_t, t).
    pub max_weight_deviation: T,
    pub samples: usize,
}

const MAX_ATTEMPTS_PER_SAMPLE: usize = 10_000;

fn sample_in_cells<T: Scalar, R: Rng>(
    grid: &Grid<T>,
    cells: &[usize],
    mu: &DensityOfStates<T>,
    t: T,
    bound: T,
    rng: &mut R,
) -> Option<Vec<T>> {
    let dim = grid.dim();
    for _ in 0..MAX_ATTEMPTS_PER_SAMPLE {
        let c = cells[rng.gen_range(0..cells.len())];
        let mut x = grid.cell_center(c);
        for a in 0..dim {
            let u = T::lit(rng.gen::<f64>() - 0.5);
            x[a] = x[a] + u * grid.spacing()[a];
        }
        let accept = T::lit(rng.gen::<f64>()) * bound;
        if accept < mu.eval(&x, t) {
            return Some(x);
        }
    }
    None
}

fn divergence_at<T: Scalar>(v: &VelocityField<T>, space: &StateSpace<T>, x: &[T], t: T, h: T, buf: &mut [T]) -> std::result::Result<T, FieldError> {
    let dim = x.len();
    let mut p = x.to_vec();
    let mut div = T::zero();
    for i in 0..dim {
        p[i] = x[i] + h;
        space.wrap(&mut p);
        v.eval(&p, t, buf)?;
        let plus = buf[i];
        p.copy_from_slice(x);
        p[i] = x[i] - h;
        space.wrap(&mut p);
        v.eval(&p, t, buf)?;
        let minus = buf[i];
        p.copy_from_slice(x);
        div = div + (plus - minus) / (h + h);
    }
    Ok(div)
}

/// Compares N_ω with the number of states in the image of `region` after time `t`.
pub fn liouville_volume_check<T: Scalar>(
    v: &VelocityField<T>,
    mu: &DensityOfStates<T>,
    grid: &Grid<T>,
    region: &CellMask,
    t: T,
    n_samples: usize,
    seed: u64,
    ctl: &StepControl<T>,
) -> Result<VolumeCheck<T>> {
    region.ensure_matches(grid)?;
    let space = grid.space();
    space.ensure_supported()?;
    let dim = grid.dim();
    let cells: Vec<usize> = (0..grid.len()).filter(|&c| region.contains(c)).collect();
    if cells.is_empty() || n_samples == 0 {
        return Err(Error::EmptySupport);
    }
    let mu0 = mu.snapshot(grid, T::zero())?;
    let n_before = crate::statespace::quadrature(grid, mu0.values(), Some(region))?;
    let bound0 = cells.iter().fold(T::zero(), |m, &c| m.max(mu0.values()[c])) * T::lit(1.25);

    // forward: (x, log J) with d(log J)/dt = ∇·v
    let h_fd = T::lit(1e-5) * (0..dim).fold(T::infinity(), |m, a| m.min(space.width(a)));
    let inner = v.clone();
    let space_c = space.clone();
    let augmented = VelocityField::new(dim + 1, v.is_autonomous(), move |y, tt, out| {
        let mut buf = vec![T::zero(); dim];
        inner.eval(&y[..dim], tt, &mut buf)?;
        out[..dim].copy_from_slice(&buf);
        out[dim] = divergence_at(&inner, &space_c, &y[..dim], tt, h_fd, &mut buf)?;
        Ok(())
    });
    let mut lo = space.lo().to_vec();
    let mut hi = space.hi().to_vec();
    let mut bnd = space.boundary().to_vec();
    lo.push(T::lit(-1e6));
    hi.push(T::lit(1e6));
    bnd.push(Boundary::Reflecting);
    let aug_space = StateSpace::new(lo, hi, bnd)?;
    let free = ctl.with_boundary(BoundaryPolicy::Free);

    let weights: Vec<T> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, 2 * k as u64);
            let x0 = sample_in_cells(grid, &cells, mu, T::zero(), bound0, &mut r)
                .ok_or(Error::SamplingStarved { attempts: MAX_ATTEMPTS_PER_SAMPLE })?;
            let mut y = x0.clone();
            y.push(T::zero());
            advance_in_place(&augmented, &aug_space, &mut y, T::zero(), t, &free, None)?;
            let xt = &y[..dim];
            Ok(mu.eval(xt, t) * y[dim].exp() / mu.eval(&x0, T::zero()))
        })
        .collect::<Result<_>>()?;
    let mean_w = pairwise_sum(&weights) / T::from_usize_lossy(n_samples);
    let max_dev = weights.iter().fold(T::zero(), |m, &w| m.max((w - T::one()).abs()));

    // backward hit count over the whole space at time t
    let mu_t = mu.snapshot(grid, t)?;
    let all: Vec<usize> = (0..grid.len()).collect();
    let bound_t = mu_t.values().iter().fold(T::zero(), |m, &v| m.max(v)) * T::lit(1.25);
    let hits: Vec<T> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, 2 * k as u64 + 1);
            let mut y = sample_in_cells(grid, &all, mu, t, bound_t, &mut r)
                .ok_or(Error::SamplingStarved { attempts: MAX_ATTEMPTS_PER_SAMPLE })?;
            advance_in_place(v, space, &mut y, t, T::zero(), &free, None)?;
            space.wrap(&mut y);
            Ok(match grid.locate(&y) {
                Some(c) if region.contains(c) => T::one(),
                _ => T::zero(),
            })
        })
        .collect::<Result<_>>()?;
    let frac = pairwise_sum(&hits) / T::from_usize_lossy(n_samples);
    // μ(·, t) is normalized, so the hit fraction is the state count itself
    let n_after_hit = frac;
    let hit_std_error = (frac * (T::one() - frac) / T::from_usize_lossy(n_samples)).sqrt();

    Ok(VolumeCheck {
        n_before,
        n_after: n_before * mean_w,
        n_after_hit,
        hit_std_error,
        max_weight_deviation: max_dev,
        samples: n_samples,
    })
}
