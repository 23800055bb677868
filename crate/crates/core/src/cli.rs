//! The `pharm` command-line front end: configuration merging, dispatch to the
//! library, JSON reports and the exit-code contract
//! (0 pass, 1 failed verdict, 2 usage, 3 numeric failure).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aop::make_aoperator;
use crate::conformal::{distortion, DistortionReport};
use crate::coords::{build_chart, rate_study, ChartRequest};
use crate::error::Error;
use crate::geometry::{spd_sqrt, ConformalFactor, Domain, MapSpec, MetricField, MetricSpec, SampledMap};
use crate::grid::{
    holder_seminorm, interpolation_bound, lp_norm, make_annulus, make_ball, norm_report,
    random_interpolation_suite, DiscreteBall, DiscreteScalarField, InterpolationCheck, DEFAULT_HOLDER_PAIRS,
};
use crate::io::{read_field_csv, write_field_csv};
use crate::solver::{solve_dirichlet, SolverConfig};

#[derive(Parser, Debug)]
#[command(name = "pharm", version, about = "p-harmonic coordinates and conformal distortion")]
pub struct Cli {
    /// JSON file with the command's options; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write the JSON report here (timing goes to `<report>.timing.json`).
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Solve one Dirichlet problem on a ball.
    SolveDirichlet(SolveArgs),
    /// Build a p-harmonic chart around a point.
    BuildCoords(CoordsArgs),
    /// Convergence-rate study of rescaled solutions.
    Rates(RatesArgs),
    /// Distortion and conformality of a map.
    CheckConformal(ConformalArgs),
    /// Interpolation inequality on one field or a randomized suite.
    InterpCheck(InterpArgs),
    /// List or emit builtin metric and map specs.
    Gallery {
        #[command(subcommand)]
        action: GalleryAction,
    },
}

#[derive(Subcommand, Debug, Clone)]
pub enum GalleryAction {
    List,
    Emit {
        name: String,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SolveArgs {
    /// Metric: gallery name or spec file.
    #[arg(long)]
    pub metric: Option<String>,
    /// Dimension for gallery metrics (default 2).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub center: Option<Vec<f64>>,
    /// Grid spacing (default radius/32).
    #[arg(long)]
    pub h: Option<f64>,
    /// Linear boundary data coefficients `a` in `f = a·x + q|x|²`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub boundary: Option<Vec<f64>>,
    /// Quadratic coefficient `q` of the boundary data.
    #[arg(long)]
    pub quadratic: Option<f64>,
    #[arg(long)]
    pub energy_ratio_max: Option<f64>,
    /// CSV path for the solution field.
    #[arg(long, alias = "out")]
    pub field_out: Option<PathBuf>,
    #[arg(skip)]
    pub solver: Option<SolverConfig>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CoordsArgs {
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// `identity`, `sqrt-metric` or rows `a,b;c,d`.
    #[arg(long, alias = "S")]
    pub s: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub jac_tol: Option<f64>,
    #[arg(long)]
    pub cells: Option<usize>,
    /// Prefix for `<prefix>_u<k>.csv` coordinate fields.
    #[arg(long, alias = "out")]
    pub field_out: Option<PathBuf>,
    #[arg(skip)]
    pub solver: Option<SolverConfig>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RatesArgs {
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub cells: Option<usize>,
    /// Accepted distance of the fitted slope from `min(1, 1/(p-1))`.
    #[arg(long)]
    pub slope_window: Option<f64>,
    #[arg(skip)]
    pub solver: Option<SolverConfig>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConformalArgs {
    #[arg(long)]
    pub metric_g: Option<String>,
    #[arg(long)]
    pub metric_h: Option<String>,
    /// Map: gallery name or spec file.
    #[arg(long)]
    pub map: Option<String>,
    /// `center=0,0;radius=1;h=0.05[;inner=0.5]`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Largest accepted `ess_sup_K` (default `1 + 5h`).
    #[arg(long)]
    pub k_threshold: Option<f64>,
    /// Conformality residual below which `Det_g = c^{n/2}` is checked.
    #[arg(long)]
    pub conformal_tol: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InterpArgs {
    /// CSV field; without it the randomized suite runs.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub holder_bound: Option<f64>,
    /// Number of randomized fields.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Why a run did not produce a report.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numeric(e) => write!(f, "numeric failure: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidSpec(_)
            | Error::UnknownGalleryItem(_)
            | Error::BadExponent(_)
            | Error::TooCoarse { .. }
            | Error::GridMismatch(_)
            | Error::HypothesisViolated(_) => CliError::Usage(e.to_string()),
            other => CliError::Numeric(other),
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

/// Parsed and merged configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub report: Option<PathBuf>,
}

/// Overlays the non-null flag values onto the config-file object.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Value>) -> Result<T, CliError> {
    let mut base = match file {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return usage("config file must hold a JSON object"),
        None => serde_json::Map::new(),
    };
    if let Value::Object(f) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        for (k, v) in f {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

pub fn parse_config<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let f = file.as_ref();
    let command = match cli.command {
        Command::SolveDirichlet(a) => Command::SolveDirichlet(merge(&a, f)?),
        Command::BuildCoords(a) => Command::BuildCoords(merge(&a, f)?),
        Command::Rates(a) => Command::Rates(merge(&a, f)?),
        Command::CheckConformal(a) => Command::CheckConformal(merge(&a, f)?),
        Command::InterpCheck(a) => Command::InterpCheck(merge(&a, f)?),
        g @ Command::Gallery { .. } => g,
    };
    let cfg = RunConfig {
        command,
        report: cli.report,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn check_p(p: Option<f64>) -> Result<(), CliError> {
    match p {
        Some(p) if !(p > 1.0 && p.is_finite()) => usage(format!("p = {p} must satisfy 1 < p < inf")),
        _ => Ok(()),
    }
}

fn check_positive(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(v) if !(v > 0.0 && v.is_finite()) => usage(format!("{name} must be positive")),
        _ => Ok(()),
    }
}

fn require<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("missing --{name}")))
}

fn check_eps(eps: &Option<Vec<f64>>) -> Result<(), CliError> {
    if let Some(e) = eps {
        if e.is_empty() || e.iter().any(|v| !(*v > 0.0)) {
            return usage("eps entries must be positive");
        }
    }
    Ok(())
}

/// Checks required options and numeric preconditions before any solve.
fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    match &cfg.command {
        Command::SolveDirichlet(a) => {
            require(&a.metric, "metric")?;
            check_p(a.p)?;
            check_positive("radius", a.radius)?;
            check_positive("h", a.h)?;
            if let Some(s) = &a.solver {
                s.validate()?;
            }
        }
        Command::BuildCoords(a) => {
            require(&a.metric, "metric")?;
            check_p(a.p)?;
            check_eps(&a.eps)?;
            check_positive("jac-tol", a.jac_tol)?;
            if let Some(s) = &a.solver {
                s.validate()?;
            }
        }
        Command::Rates(a) => {
            require(&a.metric, "metric")?;
            check_p(a.p)?;
            check_eps(&a.eps)?;
            if a.eps.as_ref().is_some_and(|e| e.len() < 4) {
                return usage("rates needs at least 4 eps values");
            }
            check_positive("slope-window", a.slope_window)?;
            if let Some(s) = &a.solver {
                s.validate()?;
            }
        }
        Command::CheckConformal(a) => {
            require(&a.map, "map")?;
            check_positive("k-threshold", a.k_threshold)?;
            if let Some(g) = &a.grid {
                GridSpec::parse(g)?;
            }
        }
        Command::InterpCheck(a) => {
            if let Some(path) = &a.field {
                if !path.exists() {
                    return usage(format!("{} does not exist", path.display()));
                }
            }
            check_positive("margin", a.margin)?;
            check_positive("holder-bound", a.holder_bound)?;
            if let Some(p) = a.p {
                if p < 1.0 {
                    return usage("p must be at least 1");
                }
            }
            if let Some(a) = a.a {
                if !(a > 0.0 && a <= 1.0) {
                    return usage("a must lie in (0, 1]");
                }
            }
        }
        Command::Gallery { .. } => {}
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Verdict {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub report: Value,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
}

impl RunReport {
    fn new(command: &str, config: &impl Serialize, report: Value, verdicts: Vec<Verdict>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            report,
            pass: verdicts.iter().all(|v| v.pass),
            verdicts,
        }
    }
}

/// Builtin specs: `(name, kind, description)`.
pub const GALLERY: &[(&str, &str, &str)] = &[
    ("flat", "metric", "Euclidean metric on all of R^n"),
    ("conformal-exp", "metric", "exp(x1) times the Euclidean metric"),
    ("conformal-poly", "metric", "(1 + |x|^2)^-2 times the Euclidean metric"),
    ("conformal-bump", "metric", "(1 + 0.5 bump) times the Euclidean metric"),
    ("diagonal", "metric", "diag(1, 1 + x1^2, ...)"),
    ("bump-perturbed", "metric", "identity plus 0.3 bump times a fixed symmetric shape"),
    ("inversion", "map", "unit sphere inversion x/|x|^2"),
    ("rotation", "map", "rotation by pi/6"),
    ("dilation", "map", "dilation by 2"),
    ("translation", "map", "translation by (0.5, -0.25, ...)"),
    ("composition", "map", "rotation, then dilation, then translation"),
    ("z-squared-2d", "map", "z -> z^2 on the plane"),
    ("anisotropic-2d", "map", "(x1, x2) -> (2 x1, x2)"),
];

pub fn gallery_metric(name: &str, dim: usize) -> Option<MetricSpec> {
    let mut spec = match name {
        "flat" => MetricSpec::new("flat", dim, Value::Null),
        "conformal-exp" => {
            let mut a = vec![0.0; dim];
            a[0] = 1.0;
            MetricSpec::new("conformal", dim, serde_json::to_value(ConformalFactor::Exp { a }).ok()?)
        }
        "conformal-poly" => MetricSpec::new(
            "conformal",
            dim,
            serde_json::to_value(ConformalFactor::Poly { b: 1.0, power: -2.0 }).ok()?,
        ),
        "conformal-bump" => MetricSpec::new(
            "conformal",
            dim,
            serde_json::to_value(ConformalFactor::Bump {
                s: 0.5,
                center: vec![0.2; dim],
                width: 1.0,
            })
            .ok()?,
        ),
        "diagonal" => MetricSpec::new("diagonal", dim, Value::Null),
        "bump-perturbed" => MetricSpec::new("perturbed", dim, json!({ "s": 0.3 })),
        _ => return None,
    };
    if name == "flat" {
        spec.domain = Some(Domain::Everywhere);
    }
    Some(spec)
}

pub fn gallery_map(name: &str, dim: usize) -> Option<MapSpec> {
    let translation = || MapSpec::Translation {
        offset: (0..dim).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect(),
    };
    let rotation = || MapSpec::Rotation {
        dim,
        angle: std::f64::consts::PI / 6.0,
        axis: None,
    };
    Some(match name {
        "inversion" => MapSpec::Inversion {
            center: vec![0.0; dim],
            radius: 1.0,
        },
        "rotation" => rotation(),
        "dilation" => MapSpec::Dilation { dim, factor: 2.0 },
        "translation" => translation(),
        "composition" => MapSpec::Composition {
            maps: vec![rotation(), MapSpec::Dilation { dim, factor: 2.0 }, translation()],
        },
        "z-squared-2d" => MapSpec::ZSquared {},
        "anisotropic-2d" => MapSpec::Scaling {
            factors: vec![2.0, 1.0],
        },
        _ => return None,
    })
}

/// The names of gallery maps that are conformal for flat metrics.
pub fn gallery_conformal_maps() -> Vec<&'static str> {
    GALLERY
        .iter()
        .filter(|(name, kind, _)| *kind == "map" && gallery_map(name, 2).is_some_and(|m| m.is_conformal()))
        .map(|(name, _, _)| *name)
        .collect()
}

/// Spec JSON for a gallery item (2D for dimension-generic items).
pub fn gallery_entry(name: &str) -> crate::error::Result<Value> {
    if let Some(m) = gallery_metric(name, 2) {
        return Ok(serde_json::to_value(m)?);
    }
    if let Some(m) = gallery_map(name, 2) {
        return Ok(serde_json::to_value(m)?);
    }
    Err(Error::UnknownGalleryItem(name.to_string()))
}

pub fn resolve_metric(name: &str, dim: Option<usize>) -> Result<Arc<dyn MetricField>, CliError> {
    let path = Path::new(name);
    if path.is_file() {
        let spec = MetricSpec::load(path)?;
        if dim.is_some_and(|d| d != spec.dim) {
            return usage(format!("{name} has dimension {}, not {}", spec.dim, dim.unwrap_or(0)));
        }
        return Ok(spec.build()?);
    }
    match gallery_metric(name, dim.unwrap_or(2)) {
        Some(spec) => Ok(spec.build()?),
        None => usage(format!("unknown metric `{name}` (not a file or gallery metric)")),
    }
}

pub fn resolve_map(name: &str, dim: Option<usize>) -> Result<Arc<dyn SampledMap>, CliError> {
    let path = Path::new(name);
    if path.is_file() {
        return Ok(MapSpec::load(path)?.build()?);
    }
    match gallery_map(name, dim.unwrap_or(2)) {
        Some(spec) => Ok(spec.build()?),
        None => usage(format!("unknown map `{name}` (not a file or gallery map)")),
    }
}

/// Grid region for `check-conformal`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    pub inner: Option<f64>,
    pub h: f64,
}

impl GridSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let mut spec = GridSpec {
            center: None,
            radius: 1.0,
            inner: None,
            h: 0.05,
        };
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("grid entry `{part}` is not key=value")))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("grid {k}: {e}")));
            match k.trim() {
                "center" => spec.center = Some(parse_list(v).map_err(CliError::Usage)?),
                "radius" => spec.radius = num(v)?,
                "inner" => spec.inner = Some(num(v)?),
                "h" => spec.h = num(v)?,
                other => return usage(format!("unknown grid key `{other}`")),
            }
        }
        if !(spec.radius > 0.0 && spec.h > 0.0) || spec.inner.is_some_and(|r| !(r > 0.0 && r < spec.radius)) {
            return usage("grid needs radius > 0, h > 0 and 0 < inner < radius");
        }
        Ok(spec)
    }

    pub fn build(&self, dim: usize) -> crate::error::Result<Arc<DiscreteBall>> {
        let center = self.center.clone().unwrap_or_else(|| vec![0.0; dim]);
        match self.inner {
            Some(inner) => make_annulus(dim, inner, self.radius, &center, self.h),
            None => make_ball(dim, self.radius, &center, self.h),
        }
    }
}

fn parse_matrix(s: &str, g0: &DMatrix<f64>) -> Result<DMatrix<f64>, CliError> {
    let n = g0.nrows();
    match s.trim() {
        "identity" => Ok(DMatrix::identity(n, n)),
        "sqrt-metric" => Ok(spd_sqrt(g0)),
        rows => {
            let parsed = rows
                .split(';')
                .map(parse_list)
                .collect::<Result<Vec<_>, _>>()
                .map_err(CliError::Usage)?;
            if parsed.len() != n || parsed.iter().any(|r| r.len() != n) {
                return usage(format!("S must be {n}x{n}"));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| parsed[i][j]))
        }
    }
}

fn to_value(v: impl Serialize) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Numeric(e.into()))
}

fn run_solve(a: &SolveArgs) -> Result<RunReport, CliError> {
    let g = resolve_metric(require(&a.metric, "metric")?, a.dim)?;
    let n = g.dim();
    let p = a.p.unwrap_or(2.0);
    let radius = a.radius.unwrap_or(1.0);
    let center = a.center.clone().unwrap_or_else(|| vec![0.0; n]);
    let lin = a.boundary.clone().unwrap_or_else(|| {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        e
    });
    if center.len() != n || lin.len() != n {
        return usage("center and boundary must have one entry per dimension");
    }
    let q = a.quadratic.unwrap_or(0.0);
    let ball = make_ball(n, radius, &center, a.h.unwrap_or(radius / 32.0))?;
    let f = DiscreteScalarField::from_fn(&ball, |x| {
        lin.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + q * x.iter().map(|v| v * v).sum::<f64>()
    })?;
    let op = make_aoperator(g, p, 0.0)?;
    let sol = solve_dirichlet(&op, &ball, &f, &a.solver.clone().unwrap_or_default())?;
    if let Some(path) = &a.field_out {
        write_field_csv(&sol.u, path)?;
    }
    let rep = sol.report();
    let verdicts = vec![
        Verdict::at_most("final_residual", rep.final_residual, rep.residual_tolerance),
        Verdict::at_most("energy_bound_ratio", rep.energy_bound_ratio, a.energy_ratio_max.unwrap_or(1.05)),
    ];
    let norms = norm_report(&sol.u, p, &[radius / 4.0], &[0.5, 1.0], 0);
    Ok(RunReport::new(
        "solve-dirichlet",
        a,
        json!({ "solution": to_value(rep)?, "norms": to_value(norms)? }),
        verdicts,
    ))
}

fn run_coords(a: &CoordsArgs) -> Result<RunReport, CliError> {
    let g = resolve_metric(require(&a.metric, "metric")?, a.dim)?;
    let n = g.dim();
    let x0 = a.x0.clone().unwrap_or_else(|| vec![0.0; n]);
    if x0.len() != n {
        return usage("x0 must have one entry per dimension");
    }
    let s = parse_matrix(a.s.as_deref().unwrap_or("identity"), &g.eval(&x0))?;
    let mut req = ChartRequest::new(g, a.p.unwrap_or(2.0), x0, s);
    if let Some(e) = &a.eps {
        req.eps_schedule = e.clone();
    }
    if let Some(t) = a.jac_tol {
        req.jac_tol = t;
    }
    if let Some(c) = a.cells {
        req.cells_per_radius = c;
    }
    if let Some(s) = &a.solver {
        req.solver = s.clone();
    }
    let chart = build_chart(&req)?;
    if let Some(prefix) = &a.field_out {
        for (k, u) in chart.coords.iter().enumerate() {
            let mut name = prefix.clone().into_os_string();
            name.push(format!("_u{}.csv", k + 1));
            write_field_csv(u, Path::new(&name))?;
        }
    }
    let verdicts = vec![Verdict::at_most("jac_error", chart.jac_error, req.jac_tol)];
    Ok(RunReport::new("build-coords", a, to_value(chart.report())?, verdicts))
}

fn run_rates(a: &RatesArgs) -> Result<RunReport, CliError> {
    let g = resolve_metric(require(&a.metric, "metric")?, a.dim)?;
    let n = g.dim();
    let x0 = a.x0.clone().unwrap_or_else(|| vec![0.0; n]);
    if x0.len() != n {
        return usage("x0 must have one entry per dimension");
    }
    let p = a.p.unwrap_or(2.0);
    let eps = a.eps.clone().unwrap_or_else(|| vec![0.4, 0.2, 0.1, 0.05]);
    let study = rate_study(
        &g,
        p,
        &x0,
        &eps,
        &a.solver.clone().unwrap_or_default(),
        a.cells.unwrap_or(crate::coords::DEFAULT_CELLS_PER_RADIUS),
    )?;
    let window = a.slope_window.unwrap_or(0.3);
    let verdicts = match study.fitted_slope {
        Some(slope) => vec![Verdict::at_most(
            "slope_distance",
            (slope - study.expected_slope).abs(),
            window,
        )],
        None => vec![Verdict::at_most("max_deviation", study.deviations.iter().cloned().fold(0.0, f64::max), 1e-9)],
    };
    Ok(RunReport::new("rates", a, to_value(study)?, verdicts))
}

fn run_conformal(a: &ConformalArgs) -> Result<RunReport, CliError> {
    let map_name = require(&a.map, "map")?;
    let dim_hint = a
        .grid
        .as_deref()
        .map(GridSpec::parse)
        .transpose()?
        .and_then(|g| g.center.map(|c| c.len()));
    let phi = resolve_map(map_name, dim_hint)?;
    let n = phi.dim_in();
    let g = resolve_metric(a.metric_g.as_deref().unwrap_or("flat"), Some(n))?;
    let h = resolve_metric(a.metric_h.as_deref().unwrap_or("flat"), Some(phi.dim_out()))?;
    let spec = match &a.grid {
        Some(s) => GridSpec::parse(s)?,
        None => match phi.source_domain() {
            Domain::Exterior { center, .. } => GridSpec {
                center: Some(center),
                radius: 1.0,
                inner: Some(0.5),
                h: 0.05,
            },
            _ => GridSpec::parse("")?,
        },
    };
    let grid = spec.build(n)?;
    let rep: DistortionReport = distortion(phi.as_ref(), g.as_ref(), h.as_ref(), &grid)?;
    let tol = a.conformal_tol.unwrap_or(1e-8);
    let consistency = rep
        .conformality_residual_field
        .iter()
        .zip(rep.conformal_factor_field.iter().zip(&rep.det_g_field))
        .filter(|(r, _)| **r <= tol)
        .filter_map(|(_, (c, d))| d.map(|d| (d - c.powf(n as f64 / 2.0)).abs() / c.powf(n as f64 / 2.0)))
        .fold(0.0, f64::max);
    let k_max = a.k_threshold.unwrap_or(1.0 + 5.0 * spec.h);
    let verdicts = vec![
        Verdict::at_most("ess_sup_k", rep.ess_sup_k, k_max),
        Verdict::at_most("ess_sup_k_euclidean", rep.ess_sup_k_euclidean, k_max),
        Verdict::at_most("det_g_vs_conformal_factor", consistency, 1e-6),
    ];
    let summary = json!({
        "ess_sup_k": rep.ess_sup_k,
        "ess_sup_k_euclidean": rep.ess_sup_k_euclidean,
        "min_k": rep.min_k,
        "min_k_euclidean": rep.min_k_euclidean,
        "conformality_residual": rep.conformality_residual,
        "jacobian_sign": rep.jacobian_sign,
        "degenerate_nodes": rep.degenerate_nodes.iter().map(|&i| grid.coords(i)).collect::<Vec<_>>(),
        "nodes": rep.nodes.len(),
    });
    Ok(RunReport::new(
        "check-conformal",
        a,
        json!({ "summary": summary, "distortion": to_value(&rep)? }),
        verdicts,
    ))
}

fn run_interp(a: &InterpArgs) -> Result<RunReport, CliError> {
    let seed = a.seed.unwrap_or(0);
    let checks: Vec<InterpolationCheck> = match &a.field {
        Some(path) => {
            let u = read_field_csv(path)?;
            let (ea, p) = (a.a.unwrap_or(0.5), a.p.unwrap_or(2.0));
            let margin = a.margin.unwrap_or(0.25 * u.ball.radius());
            let m = match a.holder_bound {
                Some(m) => m,
                None => {
                    let n = u.ball.dim() as f64;
                    let est = holder_seminorm(&u, ea, DEFAULT_HOLDER_PAIRS, seed);
                    (1.5 * est).max(1.01 * lp_norm(&u, p) / margin.powf((n + ea * p) / p))
                }
            };
            vec![interpolation_bound(&u, ea, p, margin, m, seed)?]
        }
        None => random_interpolation_suite(a.count.unwrap_or(50), seed)?
            .iter()
            .map(|c| interpolation_bound(&c.field, c.a, c.p, c.margin, c.holder_bound, c.seed))
            .collect::<crate::error::Result<_>>()?,
    };
    let failures = checks.iter().filter(|c| !c.holds).count();
    let verdicts = vec![Verdict::at_most("failures", failures as f64, 0.0)];
    Ok(RunReport::new("interp-check", a, json!({ "checks": to_value(&checks)? }), verdicts))
}

fn run_gallery(action: &GalleryAction) -> Result<RunReport, CliError> {
    match action {
        GalleryAction::List => {
            let items: Vec<Value> = GALLERY
                .iter()
                .map(|(name, kind, desc)| json!({ "name": name, "kind": kind, "description": desc }))
                .collect();
            Ok(RunReport::new("gallery list", &Value::Null, Value::Array(items), vec![]))
        }
        GalleryAction::Emit { name, out } => {
            let spec = gallery_entry(name).map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::create_dir_all(out).map_err(|e| CliError::Usage(e.to_string()))?;
            let path = out.join(format!("{name}.json"));
            let text = serde_json::to_string_pretty(&spec).map_err(|e| CliError::Numeric(e.into()))?;
            std::fs::write(&path, text + "\n").map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(RunReport::new(
                "gallery emit",
                &json!({ "name": name }),
                json!({ "path": path.display().to_string() }),
                vec![],
            ))
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunReport, CliError> {
    match &cfg.command {
        Command::SolveDirichlet(a) => run_solve(a),
        Command::BuildCoords(a) => run_coords(a),
        Command::Rates(a) => run_rates(a),
        Command::CheckConformal(a) => run_conformal(a),
        Command::InterpCheck(a) => run_interp(a),
        Command::Gallery { action } => run_gallery(action),
    }
}

/// Caps rayon's pool at `PHARM_THREADS` when set.
fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("PHARM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("PHARM_THREADS=`{v}` is not a thread count")))?;
        if n > 0 {
            // A pool may already exist when called twice in one process.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    Ok(())
}

fn emit(cfg: &RunConfig, report: &RunReport, seconds: f64) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Numeric(e.into()))? + "\n";
    let timing = json!({ "wall_seconds": seconds });
    match &cfg.report {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let mut tpath = path.clone().into_os_string();
            tpath.push(".timing.json");
            std::fs::write(&tpath, timing.to_string() + "\n").map_err(|e| CliError::Usage(e.to_string()))?;
        }
        None => {
            if let Command::Gallery {
                action: GalleryAction::List,
            } = cfg.command
            {
                for (name, kind, desc) in GALLERY {
                    println!("{name:<16} {kind:<7} {desc}");
                }
            } else {
                print!("{text}");
            }
            eprintln!("wall time: {seconds:.3} s");
        }
    }
    Ok(())
}

/// Runs the binary on `argv` and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if let Err(e) = Cli::try_parse_from(&argv) {
        let _ = e.print();
        return if e.use_stderr() { 2 } else { 0 };
    }
    let outcome = configure_threads().and_then(|_| {
        let cfg = parse_config(&argv)?;
        let start = Instant::now();
        let report = run(&cfg)?;
        emit(&cfg, &report, start.elapsed().as_secs_f64())?;
        Ok(report)
    });
    match outcome {
        Ok(r) if r.pass => 0,
        Ok(r) => {
            for v in r.verdicts.iter().filter(|v| !v.pass) {
                eprintln!("verdict failed: {} = {:e} > {:e}", v.name, v.value, v.threshold);
            }
            1
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_eps_list() {
        let cfg = parse_config(["pharm", "rates", "--metric", "flat", "--p", "2", "--eps", "0.4,0.2,0.1,0.05"]).unwrap();
        match cfg.command {
            Command::Rates(a) => assert_eq!(a.eps.unwrap().len(), 4),
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn missing_metric_is_usage_error() {
        let e = parse_config(["pharm", "rates", "--p", "2"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"metric": "flat", "p": 3}"#).unwrap();
        let cfg = parse_config(["pharm", "rates", "--config", path.to_str().unwrap(), "--p", "4"]).unwrap();
        match cfg.command {
            Command::Rates(a) => {
                assert_eq!(a.p, Some(4.0));
                assert_eq!(a.metric.as_deref(), Some("flat"));
            }
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"metric": "flat", "bogus": 1}"#).unwrap();
        let e = parse_config(["pharm", "rates", "--config", path.to_str().unwrap()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn gallery_contents() {
        let names: Vec<&str> = GALLERY.iter().map(|g| g.0).collect();
        for want in ["flat", "conformal-exp", "bump-perturbed", "inversion", "rotation", "z-squared-2d"] {
            assert!(names.contains(&want));
        }
        for (name, _, _) in GALLERY {
            gallery_entry(name).unwrap();
        }
        assert!(matches!(gallery_entry("nope"), Err(Error::UnknownGalleryItem(_))));
        assert!(!gallery_conformal_maps().contains(&"anisotropic-2d"));
        assert!(gallery_conformal_maps().contains(&"inversion"));
    }

    #[test]
    fn grid_spec_parsing() {
        let g = GridSpec::parse("center=1,2;radius=0.5;h=0.01;inner=0.2").unwrap();
        assert_eq!(g.center, Some(vec![1.0, 2.0]));
        assert_eq!(g.inner, Some(0.2));
        assert!(GridSpec::parse("radius=1;size=3").is_err());
    }
}
