//! Experiment configuration: a TOML document checked against a fixed schema
//! so that every unknown key, type mismatch and constraint violation is
//! reported at once, each with its line.

use std::fmt;
use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::measures::{DensitySpec, DEFAULT_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    GaussianCheck,
    Constants,
    Isoperimetry,
    Couple,
    Report,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::GaussianCheck => "gaussian-check",
            ExperimentKind::Constants => "constants",
            ExperimentKind::Isoperimetry => "isoperimetry",
            ExperimentKind::Couple => "couple",
            ExperimentKind::Report => "report",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != ExperimentKind::Report
    }

    /// Experiments that integrate the localization process.
    pub fn needs_schedule(self) -> bool {
        matches!(
            self,
            ExperimentKind::Simulate | ExperimentKind::GaussianCheck | ExperimentKind::Isoperimetry | ExperimentKind::Couple
        )
    }
}

/// How tilted moments are obtained along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    /// Closed form for Gaussians, grid quadrature otherwise.
    #[default]
    Auto,
    ClosedForm,
    Grid,
    Cloud,
}

/// Overrides for the pass/fail thresholds. Unset fields use the defaults
/// returned by the accessor methods.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub gaussian_cov: Option<f64>,
    pub gaussian_cov_cloud: Option<f64>,
    pub barycenter_var: Option<f64>,
    pub mass: Option<f64>,
    pub z: Option<f64>,
    pub variance_slack: Option<f64>,
    pub drift_rel: Option<f64>,
    pub drift_qv: Option<f64>,
    pub kappa_q: Option<f64>,
    pub bl_ceiling: Option<f64>,
    pub d_matrix: Option<f64>,
}

impl Tolerances {
    pub fn gaussian_cov(&self) -> f64 {
        self.gaussian_cov.unwrap_or(0.1)
    }
    pub fn gaussian_cov_cloud(&self) -> f64 {
        self.gaussian_cov_cloud.unwrap_or(0.15)
    }
    pub fn barycenter_var(&self) -> f64 {
        self.barycenter_var.unwrap_or(0.1)
    }
    pub fn mass(&self) -> f64 {
        self.mass.unwrap_or(1e-3)
    }
    /// Standardized deviation allowed for martingale means.
    pub fn z(&self) -> f64 {
        self.z.unwrap_or(3.0)
    }
    pub fn variance_slack(&self) -> f64 {
        self.variance_slack.unwrap_or(0.05)
    }
    pub fn drift_rel(&self) -> f64 {
        self.drift_rel.unwrap_or(0.1)
    }
    pub fn drift_qv(&self) -> f64 {
        self.drift_qv.unwrap_or(0.2)
    }
    pub fn kappa_q(&self) -> f64 {
        self.kappa_q.unwrap_or(0.02)
    }
    pub fn bl_ceiling(&self) -> f64 {
        self.bl_ceiling.unwrap_or(1.05)
    }
    pub fn d_matrix(&self) -> f64 {
        self.d_matrix.unwrap_or(1e-8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleOptions {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_op_cap")]
    pub op_cap: f64,
    /// Quadrature order for the `f` and `g` clouds.
    #[serde(default = "default_couple_order")]
    pub order: usize,
    /// Quadrature order for the sup-convolution cloud.
    #[serde(default = "default_h_order")]
    pub h_order: usize,
}

fn default_eps() -> f64 {
    0.1
}
fn default_op_cap() -> f64 {
    crate::coupling::DEFAULT_OP_CAP
}
fn default_couple_order() -> usize {
    32
}
fn default_h_order() -> usize {
    64
}

impl Default for CoupleOptions {
    fn default() -> Self {
        CoupleOptions { eps: default_eps(), op_cap: default_op_cap(), order: default_couple_order(), h_order: default_h_order() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsoOptions {
    /// Halfspace normals; the first coordinate axis when empty.
    #[serde(default)]
    pub normals: Vec<Vec<f64>>,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_band_until")]
    pub band_until: f64,
}

fn default_window() -> f64 {
    0.1
}
fn default_band_until() -> f64 {
    0.05
}

impl Default for IsoOptions {
    fn default() -> Self {
        IsoOptions { normals: Vec::new(), window: default_window(), band_until: default_band_until() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// Output directories whose summaries are merged.
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Prefix for output file names; the experiment name when unset.
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t_max: Option<f64>,
    /// Record every `stride` steps.
    #[serde(default)]
    pub stride: Option<usize>,
    /// Number of independent runs `M`.
    #[serde(default)]
    pub runs: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub strategy: StrategyName,
    /// Cloud size `N`.
    #[serde(default)]
    pub particles: Option<usize>,
    /// Quadrature order per axis for grid strategies.
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub density: Option<DensitySpec>,
    /// Second density of a coupling.
    #[serde(default)]
    pub target: Option<DensitySpec>,
    /// Names from the builtin registry.
    #[serde(default)]
    pub battery: Vec<String>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub couple: CoupleOptions,
    #[serde(default)]
    pub isoperimetry: IsoOptions,
    #[serde(default)]
    pub report: ReportOptions,
}

impl ExperimentConfig {
    pub fn id(&self) -> &str {
        self.id.as_deref().unwrap_or(self.experiment.name())
    }

    pub fn order(&self) -> usize {
        self.order.unwrap_or(DEFAULT_ORDER)
    }

    /// Constraint violations; spans are resolved by the caller.
    pub fn constraint_violations(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        let mut push = |field: &str, msg: String| v.push((field.to_string(), msg));
        let kind = self.experiment;
        if kind.is_stochastic() && self.seed.is_none() {
            push("seed", format!("required for the {} experiment", kind.name()));
        }
        if kind != ExperimentKind::Report {
            match self.n {
                None => push("n", "required".into()),
                Some(0) => push("n", "must be at least 1".into()),
                _ => {}
            }
        }
        if kind.needs_schedule() {
            match self.dt {
                None => push("dt", "required".into()),
                Some(dt) if !(dt > 0.0) || !dt.is_finite() => push("dt", format!("must be positive, got {dt}")),
                _ => {}
            }
            match (self.t_max, self.dt) {
                (None, _) => push("t_max", "required".into()),
                (Some(t), Some(dt)) if !(t >= dt) => push("t_max", format!("must be at least dt = {dt}, got {t}")),
                _ => {}
            }
            match self.runs {
                None => push("runs", "required".into()),
                Some(0) => push("runs", "must be at least 1".into()),
                _ => {}
            }
            if self.stride == Some(0) {
                push("stride", "must be at least 1".into());
            }
        }
        if self.strategy == StrategyName::Cloud {
            match self.particles {
                None => push("particles", "required for the cloud strategy".into()),
                Some(p) if p < 100 => push("particles", format!("must be at least 100 for the cloud strategy, got {p}")),
                _ => {}
            }
        }
        if self.order == Some(0) {
            push("order", "must be at least 1".into());
        }
        if matches!(kind, ExperimentKind::Simulate | ExperimentKind::Isoperimetry | ExperimentKind::Couple)
            && self.density.is_none()
        {
            push("density", format!("required for the {} experiment", kind.name()));
        }
        if kind == ExperimentKind::Couple && self.target.is_none() {
            push("target", "required for the couple experiment".into());
        }
        if kind == ExperimentKind::Constants && self.density.is_none() && self.battery.is_empty() {
            push("battery", "the constants experiment needs a density or a battery".into());
        }
        for name in &self.battery {
            if crate::runner::battery_density(name).is_none() {
                push("battery", format!("unknown battery entry {name:?}"));
            }
        }
        let eps = self.couple.eps;
        if !(eps > 0.0 && eps < 1.0) {
            push("couple.eps", format!("must lie in (0, 1), got {eps}"));
        }
        if !(self.couple.op_cap > 0.0) {
            push("couple.op_cap", "must be positive".into());
        }
        if !(self.isoperimetry.window > 0.0) {
            push("isoperimetry.window", "must be positive".into());
        }
        if let Some(n) = self.n {
            for normal in &self.isoperimetry.normals {
                if normal.len() != n {
                    push("isoperimetry.normals", format!("normal has {} entries, expected {n}", normal.len()));
                } else if !(normal.iter().map(|x| x * x).sum::<f64>() > 0.0) {
                    push("isoperimetry.normals", "normal must be nonzero".into());
                }
            }
        }
        let t = &self.tolerances;
        for (name, val) in [
            ("gaussian_cov", t.gaussian_cov),
            ("gaussian_cov_cloud", t.gaussian_cov_cloud),
            ("barycenter_var", t.barycenter_var),
            ("mass", t.mass),
            ("z", t.z),
            ("variance_slack", t.variance_slack),
            ("drift_rel", t.drift_rel),
            ("drift_qv", t.drift_qv),
            ("kappa_q", t.kappa_q),
            ("bl_ceiling", t.bl_ceiling),
            ("d_matrix", t.d_matrix),
        ] {
            if let Some(x) = val {
                if !(x >= 0.0) || !x.is_finite() {
                    push(&format!("tolerances.{name}"), format!("must be a finite nonnegative number, got {x}"));
                }
            }
        }
        v
    }

    /// Re-check after command-line overrides.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let violations: Vec<_> = self
            .constraint_violations()
            .into_iter()
            .map(|(field, message)| Violation { kind: ViolationKind::ConstraintViolation, field, line: None, message })
            .collect();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Syntax,
    UnknownKey,
    TypeMismatch,
    ConstraintViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Dotted key path.
    pub field: String,
    /// 1-based line, when the field appears in the text.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ViolationKind::Syntax => "syntax error",
            ViolationKind::UnknownKey => "unknown key",
            ViolationKind::TypeMismatch => "type mismatch",
            ViolationKind::ConstraintViolation => "constraint violation",
        };
        match self.line {
            Some(l) => write!(f, "line {l}: {kind} at `{}`: {}", self.field, self.message),
            None => write!(f, "{kind} at `{}`: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} config violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "\n  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy)]
enum Ty {
    Int,
    Float,
    Str,
    Array(&'static Ty),
    Table(&'static [(&'static str, Ty)]),
}

impl Ty {
    fn name(&self) -> &'static str {
        match self {
            Ty::Int => "integer",
            Ty::Float => "float",
            Ty::Str => "string",
            Ty::Array(_) => "array",
            Ty::Table(_) => "table",
        }
    }
}

const FLOATS: Ty = Ty::Array(&Ty::Float);

const DENSITY: &[(&str, Ty)] = &[
    ("kind", Ty::Str),
    ("shape", Ty::Str),
    ("side", Ty::Float),
    ("radius", Ty::Float),
    ("offset", Ty::Float),
    ("axes", FLOATS),
    ("center", FLOATS),
    ("factors", Ty::Array(&Ty::Str)),
];

const TOLERANCES: &[(&str, Ty)] = &[
    ("gaussian_cov", Ty::Float),
    ("gaussian_cov_cloud", Ty::Float),
    ("barycenter_var", Ty::Float),
    ("mass", Ty::Float),
    ("z", Ty::Float),
    ("variance_slack", Ty::Float),
    ("drift_rel", Ty::Float),
    ("drift_qv", Ty::Float),
    ("kappa_q", Ty::Float),
    ("bl_ceiling", Ty::Float),
    ("d_matrix", Ty::Float),
];

const COUPLE: &[(&str, Ty)] = &[("eps", Ty::Float), ("op_cap", Ty::Float), ("order", Ty::Int), ("h_order", Ty::Int)];

const ISOPERIMETRY: &[(&str, Ty)] =
    &[("normals", Ty::Array(&FLOATS)), ("window", Ty::Float), ("band_until", Ty::Float)];

const REPORT: &[(&str, Ty)] = &[("inputs", Ty::Array(&Ty::Str))];

const TOP: &[(&str, Ty)] = &[
    ("experiment", Ty::Str),
    ("id", Ty::Str),
    ("n", Ty::Int),
    ("dt", Ty::Float),
    ("t_max", Ty::Float),
    ("stride", Ty::Int),
    ("runs", Ty::Int),
    ("seed", Ty::Int),
    ("strategy", Ty::Str),
    ("particles", Ty::Int),
    ("order", Ty::Int),
    ("out", Ty::Str),
    ("density", Ty::Table(DENSITY)),
    ("target", Ty::Table(DENSITY)),
    ("battery", Ty::Array(&Ty::Str)),
    ("tolerances", Ty::Table(TOLERANCES)),
    ("couple", Ty::Table(COUPLE)),
    ("isoperimetry", Ty::Table(ISOPERIMETRY)),
    ("report", Ty::Table(REPORT)),
];

fn line_of(text: &str, pos: usize) -> usize {
    text.as_bytes()[..pos.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

/// Key paths with the spans of their keys and values.
struct SpanIndex {
    entries: Vec<(String, Range<usize>, Range<usize>)>,
}

impl SpanIndex {
    fn line_of_field(&self, text: &str, field: &str) -> Option<usize> {
        self.entries.iter().find(|(p, _, _)| p == field).map(|(_, k, _)| line_of(text, k.start))
    }

    /// Innermost key whose value span contains `span`.
    fn field_at(&self, span: &Range<usize>) -> Option<&(String, Range<usize>, Range<usize>)> {
        self.entries
            .iter()
            .filter(|(_, k, v)| {
                (v.start <= span.start && span.end <= v.end) || (k.start <= span.start && span.end <= k.end)
            })
            .min_by_key(|(_, _, v)| v.end - v.start)
    }
}

fn check_value(
    text: &str,
    path: &str,
    key_span: Range<usize>,
    value: &Spanned<DeValue<'_>>,
    ty: Ty,
    index: &mut SpanIndex,
    out: &mut Vec<Violation>,
) {
    index.entries.push((path.to_string(), key_span.clone(), value.span()));
    let v = value.get_ref();
    let ok = match (ty, v) {
        (Ty::Int, DeValue::Integer(_)) => true,
        (Ty::Float, DeValue::Integer(_) | DeValue::Float(_)) => true,
        (Ty::Str, DeValue::String(_)) => true,
        (Ty::Array(elem), DeValue::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                check_value(text, &format!("{path}[{i}]"), item.span(), item, *elem, index, out);
            }
            true
        }
        (Ty::Table(fields), DeValue::Table(t)) => {
            check_table(text, path, t, fields, index, out);
            true
        }
        _ => false,
    };
    if !ok {
        out.push(Violation {
            kind: ViolationKind::TypeMismatch,
            field: path.to_string(),
            line: Some(line_of(text, value.span().start)),
            message: format!("expected {}, found {}", ty.name(), v.type_str()),
        });
    }
}

fn check_table(
    text: &str,
    prefix: &str,
    table: &DeTable<'_>,
    fields: &[(&str, Ty)],
    index: &mut SpanIndex,
    out: &mut Vec<Violation>,
) {
    for (key, value) in table.iter() {
        let name: &str = key.get_ref();
        let path = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        match fields.iter().find(|(k, _)| *k == name) {
            Some((_, ty)) => check_value(text, &path, key.span(), value, *ty, index, out),
            None => out.push(Violation {
                kind: ViolationKind::UnknownKey,
                field: path,
                line: Some(line_of(text, key.span().start)),
                message: format!("unknown key {name:?}"),
            }),
        }
    }
}

/// Parse and validate a config, collecting every violation.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let doc = DeTable::parse(text).map_err(|e| ConfigError {
        violations: vec![Violation {
            kind: ViolationKind::Syntax,
            field: String::new(),
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        }],
    })?;
    let mut index = SpanIndex { entries: Vec::new() };
    let mut violations = Vec::new();
    check_table(text, "", doc.get_ref(), TOP, &mut index, &mut violations);
    violations.sort_by_key(|v| v.line);
    if !violations.is_empty() {
        return Err(ConfigError { violations });
    }
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let span = e.span().unwrap_or(0..0);
        let (field, line) = match index.field_at(&span) {
            Some((p, k, _)) => (p.clone(), Some(line_of(text, k.start))),
            None => (String::new(), Some(line_of(text, span.start))),
        };
        let kind = if e.message().contains("unknown field") { ViolationKind::UnknownKey } else { ViolationKind::TypeMismatch };
        ConfigError { violations: vec![Violation { kind, field, line, message: e.message().trim().to_string() }] }
    })?;
    let violations: Vec<_> = config
        .constraint_violations()
        .into_iter()
        .map(|(field, message)| {
            let base = field.split('[').next().unwrap_or(&field);
            let line = index.line_of_field(text, base);
            Violation { kind: ViolationKind::ConstraintViolation, field, line, message }
        })
        .collect();
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError { violations })
    }
}
