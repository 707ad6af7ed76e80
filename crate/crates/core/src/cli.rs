//! Scenario files and batch runs.
//!
//! A scenario is line-oriented text:
//!
//! ```text
//! # comment
//! kind = flow-demo
//! seed = 7
//! grid.shape = 128, 128
//! mu.preset = tilt
//! stream.preset = cell
//! ```
//!
//! Every key is checked against the schema of its kind; parsing reports all problems at
//! once, each with its line number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::Rng;

use crate::coarse::{htheorem_run, snapshot_times, CoarseGraining, HTheoremRun};
use crate::discrete::{certify_information_conserving, Certificate, DiscretePropagator, DiscreteStateSpace, Witness};
use crate::entropy::info;
use crate::error::{Error, Result};
use crate::flow::{evolve_density_series, mu_divergence, stream_field, StepControl, StreamFunction, VelocityField};
use crate::quantum::{
    box_period, coefficient_flow_divergence, relaxation_experiment, InitialEnsemble, ModeSet2D, RelaxConfig,
    RelaxationResult,
};
use crate::rng;
use crate::statespace::{Boundary, DensityOfStates, Grid, GridDensity, MuPreset, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Kind {
    DiscreteCheck,
    FlowDemo,
    HTheorem,
    HilbertDemo,
    Relax,
}

impl Kind {
    pub const ALL: [Kind; 5] = [Kind::DiscreteCheck, Kind::FlowDemo, Kind::HTheorem, Kind::HilbertDemo, Kind::Relax];

    pub fn name(self) -> &'static str {
        match self {
            Kind::DiscreteCheck => "discrete-check",
            Kind::FlowDemo => "flow-demo",
            Kind::HTheorem => "htheorem",
            Kind::HilbertDemo => "hilbert-demo",
            Kind::Relax => "relax",
        }
    }

    pub fn from_name(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ty {
    UInt { min: u64 },
    Float { min: f64, max: f64, open_min: bool },
    Choice(&'static [&'static str]),
    UIntList { min: u64, max_len: usize },
    FloatList,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    UInt(u64),
    Float(f64),
    Text(String),
    UIntList(Vec<u64>),
    FloatList(Vec<f64>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::UInt(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Text(v) => f.write_str(v),
            Value::UIntList(v) => f.write_str(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
            Value::FloatList(v) => f.write_str(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")),
        }
    }
}

struct KeySpec {
    key: &'static str,
    ty: Ty,
    /// `None` marks a required key; `Some("")` an optional key without default.
    default: Option<&'static str>,
}

const fn key(key: &'static str, ty: Ty, default: Option<&'static str>) -> KeySpec {
    KeySpec { key, ty, default }
}

const POS: Ty = Ty::Float { min: 0.0, max: f64::INFINITY, open_min: true };
const NONNEG: Ty = Ty::Float { min: 0.0, max: f64::INFINITY, open_min: false };
const ANY: Ty = Ty::Float { min: f64::NEG_INFINITY, max: f64::INFINITY, open_min: false };
const COUNT: Ty = Ty::UInt { min: 1 };

const COMMON: &[KeySpec] = &[
    key("kind", Ty::Choice(&["discrete-check", "flow-demo", "htheorem", "hilbert-demo", "relax"]), None),
    key("seed", Ty::UInt { min: 0 }, Some("1")),
    key("out", Ty::Text, Some("")),
    key("threads", Ty::UInt { min: 0 }, Some("0")),
];

const DISCRETE: &[KeySpec] = &[
    key("matrix", Ty::Text, None),
    key("mu", Ty::Text, Some("")),
    key("tolerance", POS, Some("1e-9")),
];

const FLOW: &[KeySpec] = &[
    key("grid.shape", Ty::UIntList { min: 1, max_len: 3 }, Some("64,64")),
    key("space.lo", Ty::FloatList, Some("")),
    key("space.hi", Ty::FloatList, Some("")),
    key("space.boundary", Ty::Choice(&["reflecting", "periodic", "periodic-x"]), Some("reflecting")),
    key("mu.preset", Ty::Choice(&["uniform", "ramp", "tilt", "gaussian"]), Some("uniform")),
    key("mu.rate", ANY, Some("1")),
    key("mu.sigma", POS, Some("0.3")),
    key("field.kind", Ty::Choice(&["stream", "zero", "rotation", "shear", "dilation"]), Some("stream")),
    key("field.omega", ANY, Some("1")),
    key("field.rate", ANY, Some("1")),
    key("stream.preset", Ty::Choice(&["constant", "linear-y", "quadratic", "cell"]), Some("cell")),
    key("stream.m", COUNT, Some("1")),
    key("stream.n", COUNT, Some("1")),
    key("stream.amplitude", ANY, Some("0.05")),
    key("stream.a", ANY, Some("0")),
    key("stream.b", ANY, Some("0")),
    key("rho.center", Ty::FloatList, Some("")),
    key("rho.width", Ty::FloatList, Some("")),
    key("time.final", POS, Some("1")),
    key("time.dt", POS, Some("0.01")),
    key("time.snapshots", COUNT, Some("10")),
    key("check.h", POS, Some("1e-3")),
    key("check.points", COUNT, Some("100")),
];

const HTHEOREM_EXTRA: &[KeySpec] = &[key("coarse.factor", Ty::UIntList { min: 1, max_len: 3 }, Some("4"))];

const HILBERT: &[KeySpec] = &[key("modes.counts", Ty::UIntList { min: 1, max_len: 64 }, Some("1,4,16")), key("time.final", NONNEG, Some(""))];

const RELAX: &[KeySpec] = &[
    key("modes.count", COUNT, Some("16")),
    key("relax.trajectories", COUNT, Some("100000")),
    key("relax.t_final", POS, Some("")),
    key("relax.snapshots", COUNT, Some("50")),
    key("relax.dt", POS, Some("2e-3")),
    key("relax.fine", COUNT, Some("64")),
    key("relax.coarse", COUNT, Some("16")),
    key("relax.initial", Ty::Choice(&["mode", "born"]), Some("mode")),
    key("relax.initial_mode", Ty::UIntList { min: 1, max_len: 2 }, Some("1,1")),
    key("relax.node_floor", POS, Some("1e-6")),
    key("relax.speed_cap", POS, Some("1e3")),
    key("relax.step_tol", POS, Some("2e-2")),
];

fn schema(kind: Kind) -> Vec<&'static KeySpec> {
    let extra: Vec<&'static [KeySpec]> = match kind {
        Kind::DiscreteCheck => vec![DISCRETE],
        Kind::FlowDemo => vec![FLOW],
        Kind::HTheorem => vec![FLOW, HTHEOREM_EXTRA],
        Kind::HilbertDemo => vec![HILBERT],
        Kind::Relax => vec![RELAX],
    };
    let mut out: Vec<&'static KeySpec> = COMMON.iter().collect();
    for block in extra {
        for spec in block {
            if let Some(slot) = out.iter_mut().find(|s| s.key == spec.key) {
                *slot = spec;
            } else {
                out.push(spec);
            }
        }
    }
    if kind == Kind::HTheorem {
        // more snapshots by default for the H-theorem series
        static SNAP: KeySpec = key("time.snapshots", COUNT, Some("20"));
        if let Some(slot) = out.iter_mut().find(|s| s.key == "time.snapshots") {
            *slot = &SNAP;
        }
    }
    out
}

/// A scenario problem, located by line when it came from the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn parse_value(ty: Ty, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    let uint = |s: &str, min: u64| -> std::result::Result<u64, String> {
        let v: u64 = s.trim().parse().map_err(|_| format!("expected a non-negative integer, got `{}`", s.trim()))?;
        if v < min {
            return Err(format!("value {v} out of range (minimum {min})"));
        }
        Ok(v)
    };
    let float = |s: &str| -> std::result::Result<f64, String> {
        let v: f64 = s.trim().parse().map_err(|_| format!("expected a number, got `{}`", s.trim()))?;
        if !v.is_finite() {
            return Err(format!("value `{}` is not finite", s.trim()));
        }
        Ok(v)
    };
    match ty {
        Ty::UInt { min } => uint(raw, min).map(Value::UInt),
        Ty::Float { min, max, open_min } => {
            let v = float(raw)?;
            if v < min || (open_min && v == min) || v > max {
                let lo = if open_min { format!("> {min}") } else { format!(">= {min}") };
                return Err(format!("value {v} out of range (must be {lo})"));
            }
            Ok(Value::Float(v))
        }
        Ty::Choice(choices) => {
            if choices.contains(&raw) {
                Ok(Value::Text(raw.to_string()))
            } else {
                Err(format!("expected one of {}, got `{raw}`", choices.join(", ")))
            }
        }
        Ty::UIntList { min, max_len } => {
            let items = raw.split(',').map(|s| uint(s, min)).collect::<std::result::Result<Vec<_>, _>>()?;
            if items.is_empty() || items.len() > max_len {
                return Err(format!("expected 1 to {max_len} values, got {}", items.len()));
            }
            Ok(Value::UIntList(items))
        }
        Ty::FloatList => raw.split(',').map(float).collect::<std::result::Result<Vec<_>, _>>().map(Value::FloatList),
        Ty::Text => {
            if raw.is_empty() {
                Err("empty value".into())
            } else {
                Ok(Value::Text(raw.to_string()))
            }
        }
    }
}

/// A validated scenario: its kind and every key of the kind's schema that has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: Kind,
    params: BTreeMap<String, Value>,
    /// Keys that were set explicitly rather than defaulted.
    explicit: BTreeSet<String>,
}

impl Scenario {
    /// Parses scenario text. `kind_hint` supplies the kind when the text has none;
    /// `overrides` (from command-line flags) replace file values.
    pub fn parse_with(
        text: &str,
        kind_hint: Option<Kind>,
        overrides: &[(&str, String)],
    ) -> std::result::Result<Self, Vec<ScenarioError>> {
        let mut errors = Vec::new();
        let mut entries: Vec<(Option<usize>, String, String)> = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                errors.push(ScenarioError { line: Some(line), message: format!("expected `key = value`, got `{content}`") });
                continue;
            };
            let k = k.trim().to_string();
            if k.is_empty() || !k.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')) {
                errors.push(ScenarioError { line: Some(line), message: format!("malformed key `{k}`") });
                continue;
            }
            if let Some(first) = seen.insert(k.clone(), line) {
                errors.push(ScenarioError { line: Some(line), message: format!("duplicate key `{k}` (first set on line {first})") });
                continue;
            }
            entries.push((Some(line), k, v.trim().to_string()));
        }
        for (k, v) in overrides {
            entries.retain(|(_, key, _)| key != k);
            entries.push((None, k.to_string(), v.clone()));
        }

        let kind_entry = entries.iter().find(|(_, k, _)| k == "kind");
        let kind = match kind_entry {
            Some((line, _, v)) => match Kind::from_name(v) {
                Some(k) => {
                    if let Some(h) = kind_hint {
                        if h != k {
                            errors.push(ScenarioError { line: *line, message: format!("scenario kind `{k}` does not match subcommand `{h}`") });
                        }
                    }
                    Some(k)
                }
                None => {
                    errors.push(ScenarioError { line: *line, message: format!("unknown kind `{v}`") });
                    None
                }
            },
            None => match kind_hint {
                Some(h) => Some(h),
                None => {
                    errors.push(ScenarioError { line: None, message: "missing required key `kind`".into() });
                    None
                }
            },
        };
        let Some(kind) = kind else {
            return Err(errors);
        };
        let kind_line = kind_entry.and_then(|(l, _, _)| *l);
        let specs = schema(kind);
        let mut params = BTreeMap::new();
        let mut explicit = BTreeSet::new();
        for (line, k, v) in &entries {
            let Some(spec) = specs.iter().find(|s| s.key == k) else {
                let origin = if line.is_none() { " (from command line)" } else { "" };
                errors.push(ScenarioError { line: *line, message: format!("unknown key `{k}` for kind `{kind}`{origin}") });
                continue;
            };
            if k == "kind" {
                continue;
            }
            match parse_value(spec.ty, v) {
                Ok(val) => {
                    params.insert(k.clone(), val);
                    explicit.insert(k.clone());
                }
                Err(msg) => errors.push(ScenarioError { line: *line, message: format!("`{k}`: {msg}") }),
            }
        }
        for spec in &specs {
            if spec.key == "kind" || params.contains_key(spec.key) || explicit.contains(spec.key) {
                continue;
            }
            match spec.default {
                None => {
                    if !errors.iter().any(|e| e.message.contains(&format!("`{}`", spec.key))) {
                        errors.push(ScenarioError { line: kind_line, message: format!("missing required key `{}` for kind `{kind}`", spec.key) });
                    }
                }
                Some("") => {}
                Some(d) => {
                    params.insert(spec.key.to_string(), parse_value(spec.ty, d).expect("schema default parses"));
                }
            }
        }
        if errors.is_empty() {
            Ok(Scenario { kind, params, explicit })
        } else {
            errors.sort_by_key(|e| e.line.unwrap_or(usize::MAX));
            Err(errors)
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, Vec<ScenarioError>> {
        Self::parse_with(text, None, &[])
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.params.get(key)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    fn uint(&self, key: &str) -> u64 {
        match self.params.get(key) {
            Some(Value::UInt(v)) => *v,
            other => panic!("schema guarantees integer `{key}`, found {other:?}"),
        }
    }

    fn float(&self, key: &str) -> Option<f64> {
        match self.params.get(key) {
            Some(Value::Float(v)) => Some(*v),
            None => None,
            other => panic!("schema guarantees number `{key}`, found {other:?}"),
        }
    }

    fn text(&self, key: &str) -> Option<&str> {
        match self.params.get(key) {
            Some(Value::Text(v)) => Some(v),
            None => None,
            other => panic!("schema guarantees text `{key}`, found {other:?}"),
        }
    }

    fn uints(&self, key: &str) -> Vec<usize> {
        match self.params.get(key) {
            Some(Value::UIntList(v)) => v.iter().map(|&x| x as usize).collect(),
            other => panic!("schema guarantees integer list `{key}`, found {other:?}"),
        }
    }

    fn floats(&self, key: &str) -> Option<Vec<f64>> {
        match self.params.get(key) {
            Some(Value::FloatList(v)) => Some(v.clone()),
            None => None,
            other => panic!("schema guarantees number list `{key}`, found {other:?}"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.uint("seed")
    }

    pub fn threads(&self) -> usize {
        self.uint("threads") as usize
    }

    pub fn out(&self) -> Option<&str> {
        self.text("out")
    }

    /// `key = value` lines for every resolved parameter, sorted by key.
    pub fn resolved(&self) -> String {
        let mut s = format!("kind = {}\n", self.kind);
        for (k, v) in &self.params {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// How a run ended when it did not fail outright.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Success,
    Degraded(Vec<String>),
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Degraded(_) => 2,
        }
    }
}

/// Output settings for [`run`].
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub quiet: bool,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents).map_err(|e| Error::Io(format!("{}: {e}", dir.join(name).display())))
}

fn context(what: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(m) => Error::Io(format!("{what}: {m}")),
        Error::Parse(m) => Error::Parse(format!("{what}: {m}")),
        Error::InvalidStochastic(m) => Error::InvalidStochastic(format!("{what}: {m}")),
        other => Error::Parse(format!("{what}: {other}")),
    }
}

struct FlowSetup {
    grid: Grid<f64>,
    mu: DensityOfStates<f64>,
    field: VelocityField<f64>,
    rho0: GridDensity<f64>,
    times: Vec<f64>,
    ctl: StepControl<f64>,
}

fn flow_setup(sc: &Scenario) -> Result<FlowSetup> {
    let shape = sc.uints("grid.shape");
    let dim = shape.len();
    let lo = sc.floats("space.lo").unwrap_or_else(|| vec![0.0; dim]);
    let hi = sc.floats("space.hi").unwrap_or_else(|| vec![1.0; dim]);
    if lo.len() != dim || hi.len() != dim {
        return Err(Error::Parse(format!("space.lo/space.hi need {dim} values to match grid.shape")));
    }
    let boundary = match sc.text("space.boundary").unwrap_or("reflecting") {
        "periodic" => vec![Boundary::Periodic; dim],
        "periodic-x" => (0..dim).map(|a| if a == 0 { Boundary::Periodic } else { Boundary::Reflecting }).collect(),
        _ => vec![Boundary::Reflecting; dim],
    };
    let space = StateSpace::new(lo.clone(), hi.clone(), boundary)?;
    let grid = Grid::new(space.clone(), shape)?;
    let preset = match sc.text("mu.preset").unwrap_or("uniform") {
        "ramp" => MuPreset::Ramp,
        "tilt" => MuPreset::Tilt { rate: sc.float("mu.rate").unwrap_or(1.0) },
        "gaussian" => MuPreset::GaussianBump { sigma: sc.float("mu.sigma").unwrap_or(0.3) },
        _ => MuPreset::Uniform,
    };
    let mu = preset.build(&grid)?;
    let center: Vec<f64> = (0..dim).map(|a| 0.5 * (lo[a] + hi[a])).collect();
    let field = match sc.text("field.kind").unwrap_or("stream") {
        "zero" => VelocityField::zero(dim),
        "rotation" => {
            if dim != 2 {
                return Err(Error::Dimension { expected: 2, got: dim });
            }
            VelocityField::rotation([center[0], center[1]], sc.float("field.omega").unwrap_or(1.0))
        }
        "shear" => {
            if dim != 2 {
                return Err(Error::Dimension { expected: 2, got: dim });
            }
            VelocityField::shear(sc.float("field.rate").unwrap_or(1.0))
        }
        "dilation" => VelocityField::dilation(lo.clone()),
        _ => {
            let s = match sc.text("stream.preset").unwrap_or("cell") {
                "constant" => StreamFunction::constant(0.0),
                "linear-y" => StreamFunction::linear_y(),
                "quadratic" => StreamFunction::quadratic([center[0], center[1.min(dim - 1)]]),
                _ => StreamFunction::cell(
                    &space,
                    sc.uint("stream.m") as u32,
                    sc.uint("stream.n") as u32,
                    sc.float("stream.amplitude").unwrap_or(0.05),
                    sc.float("stream.a").unwrap_or(0.0),
                    sc.float("stream.b").unwrap_or(0.0),
                ),
            };
            stream_field(&mu, &s, &space)?
        }
    };
    let rho_center = sc.floats("rho.center").unwrap_or_else(|| center.clone());
    let rho_width = sc.floats("rho.width").unwrap_or_else(|| (0..dim).map(|a| 0.1 * (hi[a] - lo[a])).collect());
    if rho_center.len() != dim || rho_width.len() != dim {
        return Err(Error::Parse(format!("rho.center/rho.width need {dim} values")));
    }
    let rho0 = GridDensity::gaussian_blob(grid.clone(), &rho_center, &rho_width)?;
    let t_final = sc.float("time.final").unwrap_or(1.0);
    let times = snapshot_times(t_final, sc.uint("time.snapshots") as usize);
    let ctl = StepControl::fixed(sc.float("time.dt").unwrap_or(0.01));
    Ok(FlowSetup { grid, mu, field, rho0, times, ctl })
}

fn check_points(grid: &Grid<f64>, h: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let space = grid.space();
    let mut r = rng::stream(seed, 0);
    (0..count)
        .map(|_| {
            (0..grid.dim())
                .map(|a| {
                    let margin = if space.boundary()[a] == Boundary::Periodic { 0.0 } else { 2.0 * h };
                    let (lo, hi) = (space.lo()[a] + margin, space.hi()[a] - margin);
                    lo + (hi - lo) * r.gen::<f64>()
                })
                .collect()
        })
        .collect()
}

fn run_flow_demo(sc: &Scenario, out: &Path) -> Result<(RunStatus, String)> {
    let FlowSetup { grid, mu, field, rho0, times, ctl } = flow_setup(sc)?;
    let h = sc.float("check.h").unwrap_or(1e-3);
    let points = check_points(&grid, h, sc.uint("check.points") as usize, sc.seed());
    let max_div = |t: f64| -> Result<f64> {
        points.iter().try_fold(0.0f64, |m, p| Ok(m.max(mu_divergence(&field, &mu, grid.space(), p, t, h)?.abs())))
    };
    let mut csv = String::from("t,info,normalization_drift,max_mu_divergence\n");
    let i0 = info(&rho0, &mu, 0.0)?.value;
    let _ = writeln!(csv, "{},{},{},{}", fmt_f(0.0), fmt_f(i0), fmt_f(0.0), fmt_f(max_div(0.0)?));
    let mut worst = 0.0f64;
    for ev in evolve_density_series(&rho0, &field, &mu, &times, &ctl)? {
        let i = info(&ev.density, &mu, ev.time)?.value;
        worst = worst.max((i - i0).abs());
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt_f(ev.time),
            fmt_f(i),
            fmt_f(ev.normalization_drift),
            fmt_f(max_div(ev.time)?)
        );
    }
    write_file(out, "flow.csv", &csv)?;
    Ok((RunStatus::Success, format!("max |info(t) - info(0)| = {worst:.3e}")))
}

fn htheorem_csv(run: &HTheoremRun<f64>) -> String {
    let mut csv = String::from("t,fine_info,coarse_info,normalization_drift\n");
    for r in &run.records {
        let _ = writeln!(csv, "{},{},{},{}", fmt_f(r.t), fmt_f(r.fine_info), fmt_f(r.coarse_info), fmt_f(r.normalization_drift));
    }
    csv
}

fn run_htheorem(sc: &Scenario, out: &Path) -> Result<(RunStatus, String)> {
    let FlowSetup { grid, mu, field, rho0, times, ctl } = flow_setup(sc)?;
    let mut factor = sc.uints("coarse.factor");
    if factor.len() == 1 {
        factor = vec![factor[0]; grid.dim()];
    }
    let cg = CoarseGraining::new(grid, factor)?;
    let run = htheorem_run(&rho0, &field, &mu, &cg, &times, &ctl)?;
    let null = htheorem_run(&rho0, &VelocityField::zero(rho0.grid().dim()), &mu, &cg, &times, &ctl)?;
    let floor = null.noise_floor();
    write_file(out, "htheorem.csv", &htheorem_csv(&run))?;
    let mut summary = format!(
        "fine_drift = {}\nnull_noise_floor = {}\nmax_coarse_excess = {}\nrelative_decrease = {}\nnon_increasing_within_noise = {}\npremise_holds = {}\npremise_info_gap = {}",
        fmt_f(run.fine_drift()),
        fmt_f(floor),
        fmt_f(run.max_coarse_excess()),
        fmt_f(run.relative_decrease()),
        run.non_increasing_within(floor),
        run.premise.holds,
        fmt_f(run.premise.info_gap),
    );
    let mut warnings = Vec::new();
    if !run.premise.holds {
        warnings.push(format!(
            "coarse cells do not capture the initial density (info gap {:.3e}); coarse info may start below fine info",
            run.premise.info_gap
        ));
    }
    if !warnings.is_empty() {
        summary.push_str(&format!("\nwarning = {}", warnings.join("; ")));
    }
    // a failed premise is informative, not degraded
    Ok((RunStatus::Success, summary))
}

fn run_hilbert(sc: &Scenario, out: &Path) -> Result<(RunStatus, String)> {
    let t_final = sc.float("time.final").unwrap_or_else(|| 10.0 * box_period::<f64>());
    let mut csv = String::from("modes,analytic_divergence,fd_divergence,norm_drift\n");
    for m in sc.uints("modes.counts") {
        let modes = ModeSet2D::<f64>::random_phase(m, sc.seed())?;
        let d = coefficient_flow_divergence(&modes);
        let drift = (0..=100).map(|k| (modes.norm_squared_at(t_final * k as f64 / 100.0) - 1.0).abs()).fold(0.0, f64::max);
        let _ = writeln!(csv, "{m},{},{},{}", fmt_f(d.analytic), fmt_f(d.finite_difference), fmt_f(drift));
    }
    write_file(out, "hilbert.csv", &csv)?;
    Ok((RunStatus::Success, String::new()))
}

fn points_csv(points: &[[f64; 2]]) -> String {
    let mut s = String::with_capacity(points.len() * 40 + 4);
    s.push_str("x,y\n");
    for p in points {
        let _ = writeln!(s, "{},{}", fmt_f(p[0]), fmt_f(p[1]));
    }
    s
}

fn grid_csv(rho: &GridDensity<f64>) -> String {
    let g = rho.grid();
    let mut s = String::from("x,y,density\n");
    for (c, v) in rho.values().iter().enumerate() {
        let x = g.cell_center(c);
        let _ = writeln!(s, "{},{},{}", fmt_f(x[0]), fmt_f(x[1]), fmt_f(*v));
    }
    s
}

/// Relax parameters resolved from a scenario.
pub fn relax_config(sc: &Scenario) -> RelaxConfig<f64> {
    let mode = sc.uints("relax.initial_mode");
    let initial = match sc.text("relax.initial") {
        Some("born") => InitialEnsemble::Born,
        _ => InitialEnsemble::Mode(mode[0] as u32, *mode.get(1).unwrap_or(&mode[0]) as u32),
    };
    RelaxConfig {
        trajectories: sc.uint("relax.trajectories") as usize,
        fine_shape: sc.uint("relax.fine") as usize,
        coarse_shape: sc.uint("relax.coarse") as usize,
        t_final: sc.float("relax.t_final").unwrap_or_else(|| 10.0 * box_period::<f64>()),
        snapshots: sc.uint("relax.snapshots") as usize,
        dt: sc.float("relax.dt").unwrap_or(2e-3),
        seed: sc.seed(),
        initial,
        node_floor: sc.float("relax.node_floor").unwrap_or(crate::quantum::NODE_FLOOR),
        speed_cap: sc.float("relax.speed_cap").unwrap_or(crate::quantum::SPEED_CAP),
        step_tol: sc.float("relax.step_tol").unwrap_or(crate::quantum::STEP_TOL),
    }
}

pub fn h_series_csv(res: &RelaxationResult<f64>) -> String {
    let mut csv = String::from("t,coarse_H,lost_fraction\n");
    for s in &res.series {
        let _ = writeln!(csv, "{},{},{}", fmt_f(s.t), fmt_f(s.coarse_h), fmt_f(s.lost_fraction));
    }
    csv
}

fn run_relax(sc: &Scenario, out: &Path) -> Result<(RunStatus, String)> {
    let cfg = relax_config(sc);
    let modes = ModeSet2D::<f64>::random_phase(sc.uint("modes.count") as usize, sc.seed())?;
    let res = relaxation_experiment(&modes, &cfg)?;
    write_file(out, "h_series.csv", &h_series_csv(&res))?;
    write_file(out, "ensemble_t0.csv", &points_csv(&res.initial_points))?;
    write_file(out, "ensemble_tfinal.csv", &points_csv(&res.final_points))?;
    write_file(out, "born_grid_tfinal.csv", &grid_csv(&res.born_final))?;
    let trend = res.trend();
    let max_unitarity = res.series.iter().map(|s| s.unitarity_drift).fold(0.0, f64::max);
    let summary = format!(
        "coarse_H_ratio = {}\ntrend_slope = {}\ntrend_slope_stderr = {}\nlost = {}\nlost_fraction = {}\nnode_fallbacks = {}\nrefined_steps = {}\nsteps = {}\ndt = {}\nmax_unitarity_drift = {}",
        fmt_f(res.ratio()),
        fmt_f(trend.slope),
        fmt_f(trend.slope_stderr),
        res.lost,
        fmt_f(res.lost_fraction()),
        res.node_fallbacks,
        res.refined_steps,
        res.steps,
        fmt_f(res.dt),
        fmt_f(max_unitarity),
    );
    if res.is_degraded() {
        let msg = format!(
            "{:.2}% of trajectories lost to node errors (limit {:.0}%)",
            100.0 * res.lost_fraction(),
            100.0 * crate::quantum::DEGRADED_LOST_FRACTION
        );
        return Ok((RunStatus::Degraded(vec![msg]), summary));
    }
    Ok((RunStatus::Success, summary))
}

fn run_discrete(sc: &Scenario, out: &Path) -> Result<(RunStatus, String)> {
    let matrix_path = sc.text("matrix").expect("required key");
    let text = fs::read_to_string(matrix_path).map_err(|e| Error::Io(format!("{matrix_path}: {e}")))?;
    let prop = DiscretePropagator::<f64>::from_csv(&text).map_err(context(matrix_path))?;
    let space = match sc.text("mu") {
        Some(p) => {
            let t = fs::read_to_string(p).map_err(|e| Error::Io(format!("{p}: {e}")))?;
            crate::discrete::parse_weights::<f64>(&t).map_err(context(p))?
        }
        None => DiscreteStateSpace::uniform(prop.n())?,
    };
    let tol = sc.float("tolerance").unwrap_or(1e-9);
    let cert = certify_information_conserving(&prop, &space, tol)?;
    let join = |v: &[f64]| v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(" ");
    let mut csv = String::from("field,value\n");
    let plain;
    match &cert {
        Certificate::Conserving { permutation } => {
            let perm = permutation.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(csv, "verdict,conserving\npermutation,{perm}");
            plain = format!("verdict: conserving\npermutation (state j -> i): {perm}");
        }
        Certificate::Violating(w) => {
            let _ = writeln!(csv, "verdict,violating");
            match w {
                Witness::Distribution { p, info_before, info_after } => {
                    let _ = writeln!(
                        csv,
                        "witness,distribution\ndistribution,{}\ninfo_before,{}\ninfo_after,{}",
                        join(p),
                        fmt_f(*info_before),
                        fmt_f(*info_after)
                    );
                    plain = format!("verdict: violating\nwitness: distribution with info {info_before} -> {info_after}");
                }
                Witness::Mask { region, state, value, mu } => {
                    let reg = region.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
                    let _ = writeln!(
                        csv,
                        "witness,mask\nregion,{reg}\nstate,{state}\nmask_value,{}\nmu,{}",
                        fmt_f(*value),
                        fmt_f(*mu)
                    );
                    plain = format!("verdict: violating\nwitness: mask of region [{reg}] at state {state} is {value}, neither 0 nor {mu}");
                }
                Witness::Structural { distance_to_permutation } => {
                    let _ = writeln!(csv, "witness,structural\ndistance_to_permutation,{}", fmt_f(*distance_to_permutation));
                    plain = format!("verdict: violating\nwitness: distance to nearest permutation {distance_to_permutation}");
                }
            }
        }
    }
    write_file(out, "verdict.csv", &csv)?;
    Ok((RunStatus::Success, plain))
}

/// Runs a validated scenario, writing its CSVs and `run_meta.txt` into `opts.out`.
pub fn run(sc: &Scenario, opts: &RunOptions) -> Result<RunStatus> {
    fs::create_dir_all(&opts.out).map_err(|e| Error::Io(format!("{}: {e}", opts.out.display())))?;
    let start = Instant::now();
    let (status, summary) = match sc.kind {
        Kind::DiscreteCheck => run_discrete(sc, &opts.out),
        Kind::FlowDemo => run_flow_demo(sc, &opts.out),
        Kind::HTheorem => run_htheorem(sc, &opts.out),
        Kind::HilbertDemo => run_hilbert(sc, &opts.out),
        Kind::Relax => run_relax(sc, &opts.out),
    }
    .map_err(|e| match e {
        Error::Io(m) => Error::Io(format!("{}: {m}", sc.kind)),
        other => other,
    })?;
    let mut meta = format!("seed = {}\nversion = {}\n", sc.seed(), env!("CARGO_PKG_VERSION"));
    meta.push_str(&sc.resolved());
    let _ = writeln!(meta, "wall_time_seconds = {:.3}", start.elapsed().as_secs_f64());
    let _ = writeln!(meta, "status = {}", if status == RunStatus::Success { "ok" } else { "degraded" });
    if !summary.is_empty() {
        meta.push_str("# results\n");
        meta.push_str(&summary);
        meta.push('\n');
    }
    write_file(&opts.out, "run_meta.txt", &meta)?;
    if !opts.quiet {
        println!("{} finished in {:.2}s; outputs in {}", sc.kind, start.elapsed().as_secs_f64(), opts.out.display());
        if !summary.is_empty() {
            println!("{summary}");
        }
    }
    if let RunStatus::Degraded(w) = &status {
        for m in w {
            eprintln!("warning: degraded run: {m}");
        }
    }
    Ok(status)
}

#[derive(Debug, Parser)]
#[command(name = "infoflow", version, about = "Information conservation, coarse-grained H-theorem and quantum relaxation experiments")]
pub struct Cli {
    /// Output directory (overrides the scenario's `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// 64-bit seed (overrides the scenario's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run any scenario file; its `kind` selects the experiment.
    Run {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Certify whether a column-stochastic matrix conserves information.
    DiscreteCheck {
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        mu: Option<PathBuf>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Transport a density under a stream-function law and track its information.
    FlowDemo {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Fine and coarse-grained information along a flow.
    Htheorem {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Divergence and norm checks of the Schrödinger coefficient flow.
    HilbertDemo {
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<u64>>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Relaxation of a trajectory ensemble toward |ψ|².
    Relax {
        #[arg(long)]
        modes: Option<u64>,
        #[arg(long)]
        trajectories: Option<u64>,
        /// Final time in time units (default: ten box periods).
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long)]
        snapshots: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        /// `mode` (|φ_11|²) or `born`.
        #[arg(long)]
        initial: Option<String>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn read_scenario(path: Option<&PathBuf>) -> std::result::Result<String, String> {
    match path {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(String::new()),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut overrides: Vec<(&str, String)> = Vec::new();
    let (kind, path) = match &cli.command {
        Command::Run { scenario } => (None, Some(scenario)),
        Command::DiscreteCheck { matrix, mu, tolerance, scenario } => {
            if let Some(m) = matrix {
                overrides.push(("matrix", m.display().to_string()));
            }
            if let Some(m) = mu {
                overrides.push(("mu", m.display().to_string()));
            }
            if let Some(t) = tolerance {
                overrides.push(("tolerance", t.to_string()));
            }
            (Some(Kind::DiscreteCheck), scenario.as_ref())
        }
        Command::FlowDemo { scenario } => (Some(Kind::FlowDemo), scenario.as_ref()),
        Command::Htheorem { scenario } => (Some(Kind::HTheorem), scenario.as_ref()),
        Command::HilbertDemo { modes, scenario } => {
            if let Some(m) = modes {
                overrides.push(("modes.counts", m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")));
            }
            (Some(Kind::HilbertDemo), scenario.as_ref())
        }
        Command::Relax { modes, trajectories, t_final, snapshots, dt, initial, scenario } => {
            if let Some(v) = modes {
                overrides.push(("modes.count", v.to_string()));
            }
            if let Some(v) = trajectories {
                overrides.push(("relax.trajectories", v.to_string()));
            }
            if let Some(v) = t_final {
                overrides.push(("relax.t_final", v.to_string()));
            }
            if let Some(v) = snapshots {
                overrides.push(("relax.snapshots", v.to_string()));
            }
            if let Some(v) = dt {
                overrides.push(("relax.dt", v.to_string()));
            }
            if let Some(v) = initial {
                overrides.push(("relax.initial", v.clone()));
            }
            (Some(Kind::Relax), scenario.as_ref())
        }
    };
    if let Some(s) = cli.seed {
        overrides.push(("seed", s.to_string()));
    }
    if let Some(t) = cli.threads {
        overrides.push(("threads", t.to_string()));
    }
    let text = match read_scenario(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let sc = match Scenario::parse_with(&text, kind, &overrides) {
        Ok(sc) => sc,
        Err(errors) => {
            let origin = path.map(|p| p.display().to_string()).unwrap_or_else(|| "arguments".into());
            for e in errors {
                eprintln!("error: {origin}: {e}");
            }
            return 1;
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| sc.out().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("infoflow-{}", sc.kind)));
    let opts = RunOptions { out, quiet: cli.quiet };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(sc.threads()).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| run(&sc, &opts)) {
        Ok(status) => status.exit_code(),
        Err(e) => {
            eprintln!("error: {}: {e}", sc.kind);
            1
        }
    }
}
