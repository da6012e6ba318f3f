//! TOML run configuration.
//!
//! Parsing walks the raw table so that every problem is reported at once,
//! each with the dotted key path where it occurred.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use lpa_cusum::linalg::Matrix;
use lpa_cusum::{
    BoltzmannPair, Capabilities, DetectorSpec, EpsilonRule, GaussianPair, LpaConfig, MaskedPair,
    MetropolisConfig, ModelPair, NaiveKind, Oracle, OracleMode, UnnormalizedPair,
};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub type CliModel = MaskedPair<f64, ModelPair<f64>>;

/// One validation problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Every problem found in a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors {
    pub file: PathBuf,
    pub issues: Vec<Issue>,
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} problem(s) in {}:",
            self.issues.len(),
            self.file.display()
        )?;
        for i in &self.issues {
            writeln!(f, "  {i}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Bundled(String),
    Boltzmann {
        t_pre: f64,
        t_post: f64,
    },
    Gaussian {
        mean_pre: Vec<f64>,
        cov_pre: Vec<Vec<f64>>,
        mean_post: Vec<f64>,
        cov_post: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub source: ModelSource,
    pub hide: Capabilities,
}

impl ModelConfig {
    pub fn build(&self) -> lpa_cusum::Result<CliModel> {
        let inner = match &self.source {
            ModelSource::Bundled(name) => ModelPair::by_name(name).ok_or_else(|| {
                lpa_cusum::Error::InvalidArgument(format!(
                    "unknown model `{name}`; expected one of {:?}",
                    ModelPair::<f64>::NAMES
                ))
            })?,
            ModelSource::Boltzmann { t_pre, t_post } => {
                ModelPair::Boltzmann(BoltzmannPair::new(*t_pre, *t_post)?)
            }
            ModelSource::Gaussian {
                mean_pre,
                cov_pre,
                mean_post,
                cov_post,
            } => {
                let m = |rows: &[Vec<f64>]| {
                    Matrix::from_rows(rows).ok_or_else(|| {
                        lpa_cusum::Error::InvalidArgument(
                            "covariance must be a square matrix".into(),
                        )
                    })
                };
                ModelPair::Gaussian(GaussianPair::new(
                    mean_pre.clone(),
                    m(cov_pre)?,
                    mean_post.clone(),
                    m(cov_post)?,
                )?)
            }
        };
        Ok(MaskedPair::new(inner, self.hide))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tuned {
    Calibrated,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorChoice {
    Cusum,
    Lpa { gamma: Tuned, i: usize },
    Scusum { delta: Tuned },
    Naive { estimator: NaiveKind, budget: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub id: String,
    pub choice: DetectorChoice,
}

impl DetectorConfig {
    /// Detector spec with placeholder values for calibrated parameters.
    pub fn provisional_spec(&self, mode: &OracleMode<f64>) -> DetectorSpec<f64> {
        let fixed = |t: Tuned, placeholder: f64| match t {
            Tuned::Fixed(v) => v,
            Tuned::Calibrated => placeholder,
        };
        match &self.choice {
            DetectorChoice::Cusum => DetectorSpec::Cusum,
            DetectorChoice::Lpa { gamma, i } => DetectorSpec::Lpa(LpaConfig {
                gamma: fixed(*gamma, 1.0),
                i: *i,
                mode: mode.clone(),
            }),
            DetectorChoice::Scusum { delta } => DetectorSpec::Scusum {
                delta: fixed(*delta, 0.0),
            },
            DetectorChoice::Naive { estimator, budget } => DetectorSpec::Naive {
                estimator: *estimator,
                budget: *budget,
            },
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(
            self.choice,
            DetectorChoice::Lpa {
                gamma: Tuned::Calibrated,
                ..
            } | DetectorChoice::Scusum {
                delta: Tuned::Calibrated
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub epsilon: EpsilonRule<f64>,
    pub pilot_draws: usize,
    pub check_draws: usize,
    pub kl_draws: usize,
    pub scusum_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub change_point: u64,
    pub stream_length: u64,
    pub arl_max_len: u64,
    pub log10_columns: bool,
    pub measure_arl: bool,
    pub measure_cadd: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub sweep_csv: String,
    pub calibration: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub trials: usize,
    pub threads: usize,
    pub model: ModelConfig,
    pub oracle_mode: OracleMode<f64>,
    pub oracle_i: usize,
    pub calibration: CalibrationConfig,
    pub detectors: Vec<DetectorConfig>,
    pub sweep: SweepConfig,
    pub run_threshold: Option<f64>,
    pub estimate_z_draws: usize,
    pub output: OutputConfig,
    /// Hex SHA-256 of the config file bytes.
    pub sha256: String,
}

impl RunConfig {
    pub fn calibration_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.calibration)
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.sweep_csv)
    }

    pub fn run_threshold(&self) -> f64 {
        self.run_threshold.unwrap_or(self.sweep.thresholds[0])
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Ctx {
    issues: Vec<Issue>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

impl Ctx {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn keys(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(
                    join(path, k),
                    format!("unknown key (allowed: {})", allowed.join(", ")),
                );
            }
        }
    }

    fn float(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            v => {
                self.err(
                    join(path, key),
                    format!("expected a number, found {}", type_name(v)),
                );
                None
            }
        }
    }

    fn positive(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        let v = self.float(t, path, key)?;
        if v > 0.0 && v.is_finite() {
            Some(v)
        } else {
            self.err(
                join(path, key),
                format!("must be positive and finite, got {v}"),
            );
            None
        }
    }

    fn int(&mut self, t: &Table, path: &str, key: &str, min: i64) -> Option<i64> {
        match t.get(key)? {
            Value::Integer(i) if *i >= min => Some(*i),
            Value::Integer(i) => {
                self.err(join(path, key), format!("must be >= {min}, got {i}"));
                None
            }
            v => {
                self.err(
                    join(path, key),
                    format!("expected an integer, found {}", type_name(v)),
                );
                None
            }
        }
    }

    fn count(&mut self, t: &Table, path: &str, key: &str, min: i64, default: usize) -> usize {
        self.int(t, path, key, min).map_or(default, |v| v as usize)
    }

    fn boolean(&mut self, t: &Table, path: &str, key: &str, default: bool) -> bool {
        match t.get(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.err(
                    join(path, key),
                    format!("expected a boolean, found {}", type_name(v)),
                );
                default
            }
        }
    }

    fn string<'a>(&mut self, t: &'a Table, path: &str, key: &str) -> Option<&'a str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            v => {
                self.err(
                    join(path, key),
                    format!("expected a string, found {}", type_name(v)),
                );
                None
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, path: &str, key: &str) -> Option<&'a Table> {
        match t.get(key)? {
            Value::Table(s) => Some(s),
            v => {
                self.err(
                    join(path, key),
                    format!("expected a table, found {}", type_name(v)),
                );
                None
            }
        }
    }

    fn floats(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        let Value::Array(items) = v else {
            self.err(
                path,
                format!("expected an array of numbers, found {}", type_name(v)),
            );
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for (k, item) in items.iter().enumerate() {
            match item {
                Value::Float(f) => out.push(*f),
                Value::Integer(i) => out.push(*i as f64),
                other => {
                    self.err(
                        format!("{path}[{k}]"),
                        format!("expected a number, found {}", type_name(other)),
                    );
                    return None;
                }
            }
        }
        Some(out)
    }

    fn float_array(&mut self, t: &Table, path: &str, key: &str) -> Option<Vec<f64>> {
        let v = t.get(key)?;
        self.floats(v, &join(path, key))
    }

    fn matrix(&mut self, t: &Table, path: &str, key: &str) -> Option<Vec<Vec<f64>>> {
        let p = join(path, key);
        let Value::Array(rows) = t.get(key)? else {
            self.err(&p, "expected an array of rows");
            return None;
        };
        let rows: Option<Vec<_>> = rows
            .iter()
            .enumerate()
            .map(|(k, r)| self.floats(r, &format!("{p}[{k}]")))
            .collect();
        let rows = rows?;
        if rows.iter().any(|r| r.len() != rows.len()) {
            self.err(&p, format!("matrix must be square ({} rows)", rows.len()));
            return None;
        }
        Some(rows)
    }

    fn required<T>(&mut self, v: Option<T>, t: &Table, path: &str, key: &str) -> Option<T> {
        if v.is_none() && !t.contains_key(key) {
            self.err(join(path, key), "missing required field");
        }
        v
    }
}

const CAPABILITY_NAMES: [&str; 6] = [
    "exact_pre_sampler",
    "exact_post_sampler",
    "exact_path_sampler",
    "analytic_log_z_ratio",
    "analytic_kl",
    "analytic_score",
];

fn parse_model(c: &mut Ctx, t: &Table) -> Option<ModelConfig> {
    let path = "model";
    c.keys(
        t,
        path,
        &[
            "name",
            "kind",
            "t_pre",
            "t_post",
            "mean_pre",
            "cov_pre",
            "mean_post",
            "cov_post",
            "hide",
        ],
    );
    let mut hide = Capabilities::default();
    if let Some(v) = t.get("hide") {
        match v {
            Value::Array(items) => {
                for (k, item) in items.iter().enumerate() {
                    let p = format!("model.hide[{k}]");
                    match item.as_str() {
                        Some("exact_pre_sampler") => hide.exact_pre_sampler = true,
                        Some("exact_post_sampler") => hide.exact_post_sampler = true,
                        Some("exact_path_sampler") => hide.exact_path_sampler = true,
                        Some("analytic_log_z_ratio") => hide.analytic_log_z_ratio = true,
                        Some("analytic_kl") => hide.analytic_kl = true,
                        Some("analytic_score") => hide.analytic_score = true,
                        _ => c.err(
                            p,
                            format!("expected one of {}", CAPABILITY_NAMES.join(", ")),
                        ),
                    }
                }
            }
            other => c.err(
                "model.hide",
                format!("expected an array of strings, found {}", type_name(other)),
            ),
        }
    }
    let name = c.string(t, path, "name");
    let kind = c.string(t, path, "kind");
    let source = match (name, kind) {
        (Some(_), Some(_)) => {
            c.err(
                path,
                "set either `name` (bundled model) or `kind` (inline model), not both",
            );
            None
        }
        (None, None) => {
            if !t.contains_key("name") && !t.contains_key("kind") {
                c.err(
                    "model.name",
                    "missing required field (or give an inline `kind`)",
                );
            }
            None
        }
        (Some(name), None) => {
            for k in [
                "t_pre",
                "t_post",
                "mean_pre",
                "cov_pre",
                "mean_post",
                "cov_post",
            ] {
                if t.contains_key(k) {
                    c.err(join(path, k), "only applies to inline models (`kind`)");
                }
            }
            if ModelPair::<f64>::by_name(name).is_none() {
                c.err(
                    "model.name",
                    format!(
                        "unknown model `{name}`; expected one of {}",
                        ModelPair::<f64>::NAMES.join(", ")
                    ),
                );
                None
            } else {
                Some(ModelSource::Bundled(name.to_string()))
            }
        }
        (None, Some("boltzmann")) => {
            for k in ["mean_pre", "cov_pre", "mean_post", "cov_post"] {
                if t.contains_key(k) {
                    c.err(join(path, k), "does not apply to kind = \"boltzmann\"");
                }
            }
            let t_pre = c.positive(t, path, "t_pre");
            let t_pre = c.required(t_pre, t, path, "t_pre");
            let t_post = c.positive(t, path, "t_post");
            let t_post = c.required(t_post, t, path, "t_post");
            Some(ModelSource::Boltzmann {
                t_pre: t_pre?,
                t_post: t_post?,
            })
        }
        (None, Some("gaussian")) => {
            for k in ["t_pre", "t_post"] {
                if t.contains_key(k) {
                    c.err(join(path, k), "does not apply to kind = \"gaussian\"");
                }
            }
            let mean_pre = c.float_array(t, path, "mean_pre");
            let mean_pre = c.required(mean_pre, t, path, "mean_pre");
            let cov_pre = c.matrix(t, path, "cov_pre");
            let cov_pre = c.required(cov_pre, t, path, "cov_pre");
            let mean_post = c.float_array(t, path, "mean_post");
            let mean_post = c.required(mean_post, t, path, "mean_post");
            let cov_post = c.matrix(t, path, "cov_post");
            let cov_post = c.required(cov_post, t, path, "cov_post");
            Some(ModelSource::Gaussian {
                mean_pre: mean_pre?,
                cov_pre: cov_pre?,
                mean_post: mean_post?,
                cov_post: cov_post?,
            })
        }
        (None, Some(other)) => {
            c.err(
                "model.kind",
                format!("unknown inline model kind `{other}`; expected boltzmann or gaussian"),
            );
            None
        }
    };
    source.map(|source| ModelConfig { source, hide })
}

fn parse_oracle(c: &mut Ctx, t: &Table) -> (OracleMode<f64>, usize) {
    let path = "oracle";
    c.keys(
        t,
        path,
        &["mode", "i", "k", "burn_in", "step", "n_mc", "value"],
    );
    let i = c.count(t, path, "i", 1, 100);
    let mode_name = c.string(t, path, "mode").unwrap_or("exact_path");
    let owned: &[(&str, &str)] = &[
        ("k", "importance"),
        ("burn_in", "metropolis"),
        ("step", "metropolis"),
        ("n_mc", "naive1/naive2"),
        ("value", "constant"),
    ];
    for (key, modes) in owned {
        if t.contains_key(*key) && !modes.split('/').any(|m| m == mode_name) {
            c.err(join(path, key), format!("only applies to mode = {modes}"));
        }
    }
    let mode = match mode_name {
        "exact_path" => OracleMode::ExactPath,
        "exact_constant" => OracleMode::Constant { value: f64::NAN },
        "importance" => OracleMode::Importance {
            k: c.count(t, path, "k", 1, 64),
        },
        "metropolis" => {
            let d = MetropolisConfig::<f64>::default();
            let burn_in = c.count(t, path, "burn_in", 0, d.burn_in);
            let step = c.positive(t, path, "step").unwrap_or(d.step);
            OracleMode::Metropolis(MetropolisConfig { burn_in, step })
        }
        "naive1" => OracleMode::Naive1 {
            n_mc: c.count(t, path, "n_mc", 1, 100),
        },
        "naive2" => OracleMode::Naive2 {
            n_mc: c.count(t, path, "n_mc", 1, 100),
        },
        "constant" => {
            let v = c.float(t, path, "value");
            OracleMode::Constant {
                value: c.required(v, t, path, "value").unwrap_or(0.0),
            }
        }
        other => {
            c.err(
                "oracle.mode",
                format!(
                    "unknown mode `{other}`; expected exact_path, exact_constant, importance, metropolis, naive1, naive2 or constant"
                ),
            );
            OracleMode::ExactPath
        }
    };
    (mode, i)
}

fn parse_calibration(c: &mut Ctx, t: &Table) -> CalibrationConfig {
    let path = "calibration";
    c.keys(
        t,
        path,
        &[
            "epsilon_rule",
            "epsilon",
            "pilot_draws",
            "check_draws",
            "kl_draws",
            "scusum_draws",
        ],
    );
    let eps = match t.get("epsilon") {
        Some(_) => match c.float(t, path, "epsilon") {
            Some(v) if v >= 0.0 && v.is_finite() => Some(v),
            Some(v) => {
                c.err(
                    "calibration.epsilon",
                    format!("must be finite and nonnegative, got {v}"),
                );
                None
            }
            None => None,
        },
        None => None,
    };
    let epsilon = match c.string(t, path, "epsilon_rule").unwrap_or("relative") {
        "relative" => EpsilonRule::Relative {
            factor: eps.unwrap_or(0.05),
        },
        "absolute" => match eps {
            Some(value) => EpsilonRule::Absolute { value },
            None => {
                if !t.contains_key("epsilon") {
                    c.err(
                        "calibration.epsilon",
                        "missing required field for epsilon_rule = \"absolute\"",
                    );
                }
                EpsilonRule::default()
            }
        },
        other => {
            c.err(
                "calibration.epsilon_rule",
                format!("unknown rule `{other}`; expected relative or absolute"),
            );
            EpsilonRule::default()
        }
    };
    CalibrationConfig {
        epsilon,
        pilot_draws: c.count(t, path, "pilot_draws", 2, 10_000),
        check_draws: c.count(t, path, "check_draws", 2, 10_000),
        kl_draws: c.count(t, path, "kl_draws", 2, 100_000),
        scusum_draws: c.count(t, path, "scusum_draws", 1, 10_000),
    }
}

fn parse_tuned(c: &mut Ctx, t: &Table, path: &str, key: &str) -> Tuned {
    match t.get(key) {
        None => Tuned::Calibrated,
        Some(Value::String(s)) if s == "calibrated" => Tuned::Calibrated,
        Some(Value::Float(_) | Value::Integer(_)) => c
            .float(t, path, key)
            .map_or(Tuned::Calibrated, Tuned::Fixed),
        Some(v) => {
            c.err(
                join(path, key),
                format!("expected a number or \"calibrated\", found {v}"),
            );
            Tuned::Calibrated
        }
    }
}

fn parse_detectors(
    c: &mut Ctx,
    v: &Value,
    default_i: usize,
    default_budget: usize,
) -> Vec<DetectorConfig> {
    let Value::Array(items) = v else {
        c.err("detectors", "expected an array of tables ([[detectors]])");
        return Vec::new();
    };
    if items.is_empty() {
        c.err("detectors", "at least one detector is required");
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (k, item) in items.iter().enumerate() {
        let path = format!("detectors[{k}]");
        let Value::Table(t) = item else {
            c.err(&path, "expected a table");
            continue;
        };
        c.keys(t, &path, &["id", "kind", "gamma", "i", "delta", "budget"]);
        let kind = c.string(t, &path, "kind");
        let kind = c.required(kind, t, &path, "kind");
        let id = c.string(t, &path, "id").map(str::to_string);
        let id = c.required(id, t, &path, "id");
        if let Some(id) = &id {
            if !seen.insert(id.clone()) {
                c.err(join(&path, "id"), format!("duplicate detector id `{id}`"));
            }
            if id.is_empty() || id.contains(',') || id.contains('\n') {
                c.err(
                    join(&path, "id"),
                    "id must be nonempty and contain no commas or newlines",
                );
            }
        }
        let owned: &[(&str, &str)] = &[
            ("gamma", "lpa"),
            ("i", "lpa"),
            ("delta", "scusum"),
            ("budget", "naive1/naive2"),
        ];
        for (key, kinds) in owned {
            if t.contains_key(*key) && kind.is_some_and(|kd| !kinds.split('/').any(|x| x == kd)) {
                c.err(join(&path, key), format!("only applies to kind = {kinds}"));
            }
        }
        let choice = match kind {
            Some("cusum") => Some(DetectorChoice::Cusum),
            Some("lpa") => {
                let gamma = parse_tuned(c, t, &path, "gamma");
                if let Tuned::Fixed(g) = gamma {
                    if !(g > 0.0 && g <= 1.0) {
                        c.err(join(&path, "gamma"), format!("must lie in (0, 1], got {g}"));
                    }
                }
                Some(DetectorChoice::Lpa {
                    gamma,
                    i: c.count(t, &path, "i", 1, default_i),
                })
            }
            Some("scusum") => {
                let delta = parse_tuned(c, t, &path, "delta");
                if let Tuned::Fixed(d) = delta {
                    if !(d >= 0.0 && d.is_finite()) {
                        c.err(
                            join(&path, "delta"),
                            format!("must be finite and nonnegative, got {d}"),
                        );
                    }
                }
                Some(DetectorChoice::Scusum { delta })
            }
            Some(n @ ("naive1" | "naive2")) => Some(DetectorChoice::Naive {
                estimator: if n == "naive1" {
                    NaiveKind::Integral
                } else {
                    NaiveKind::Ratio
                },
                budget: c.count(t, &path, "budget", 1, default_budget),
            }),
            Some(other) => {
                c.err(
                    join(&path, "kind"),
                    format!("unknown detector kind `{other}`; expected cusum, lpa, scusum, naive1 or naive2"),
                );
                None
            }
            None => None,
        };
        if let (Some(id), Some(choice)) = (id, choice) {
            out.push(DetectorConfig { id, choice });
        }
    }
    out
}

fn parse_sweep(c: &mut Ctx, t: &Table) -> SweepConfig {
    let path = "sweep";
    c.keys(
        t,
        path,
        &[
            "thresholds",
            "arl_targets",
            "change_point",
            "stream_length",
            "arl_max_len",
            "log10_columns",
            "measure_arl",
            "measure_cadd",
        ],
    );
    let thresholds = match (t.contains_key("thresholds"), t.contains_key("arl_targets")) {
        (true, true) => {
            c.err(path, "set either `thresholds` or `arl_targets`, not both");
            Vec::new()
        }
        (true, false) => {
            let v = c.float_array(t, path, "thresholds").unwrap_or_default();
            if v.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
                c.err(
                    "sweep.thresholds",
                    "every threshold must be positive and finite",
                );
            }
            v
        }
        (false, true) => {
            let v = c.float_array(t, path, "arl_targets").unwrap_or_default();
            if v.iter().any(|a| !(*a > 1.0 && a.is_finite())) {
                c.err("sweep.arl_targets", "every ARL target must exceed 1");
            }
            v.iter().map(|a| a.ln()).collect()
        }
        (false, false) => [200f64, 1000.0, 10_000.0].iter().map(|a| a.ln()).collect(),
    };
    if thresholds.is_empty() && (t.contains_key("thresholds") || t.contains_key("arl_targets")) {
        c.err(path, "threshold list is empty");
    }
    let stream_length = c
        .int(t, path, "stream_length", 1)
        .map_or(10_000, |v| v as u64);
    let change_point = c.int(t, path, "change_point", 1).map_or(500, |v| v as u64);
    if change_point > stream_length {
        c.err(
            "sweep.change_point",
            format!("must not exceed stream_length = {stream_length}"),
        );
    }
    SweepConfig {
        thresholds,
        change_point,
        stream_length,
        arl_max_len: c
            .int(t, path, "arl_max_len", 1)
            .map_or(100_000, |v| v as u64),
        log10_columns: c.boolean(t, path, "log10_columns", false),
        measure_arl: c.boolean(t, path, "measure_arl", true),
        measure_cadd: c.boolean(t, path, "measure_cadd", true),
    }
}

/// Checks every detector, the oracle and calibration against the model's
/// capabilities.
fn check_capabilities(c: &mut Ctx, model: &CliModel, cfg: &PartialConfig) {
    let caps = model.capabilities();
    let mode = match resolve_mode(&cfg.oracle_mode, model) {
        Ok(mode) => match Oracle::new(model, mode.clone()) {
            Ok(_) => Some(mode),
            Err(e) => {
                c.err("oracle.mode", e.to_string());
                None
            }
        },
        Err(e) => {
            c.err("oracle.mode", e.to_string());
            None
        }
    };
    for (k, d) in cfg.detectors.iter().enumerate() {
        let path = format!("detectors[{k}]");
        // LPA detectors share the oracle, already reported above
        let Some(spec) = (match (&d.choice, &mode) {
            (DetectorChoice::Lpa { .. }, None) => None,
            (_, m) => Some(d.provisional_spec(m.as_ref().unwrap_or(&OracleMode::ExactPath))),
        }) else {
            continue;
        };
        if let Err(e) = spec.check_capabilities(model) {
            c.err(&path, e.to_string());
        }
        if matches!(
            d.choice,
            DetectorChoice::Scusum {
                delta: Tuned::Calibrated
            }
        ) && !caps.exact_pre_sampler
        {
            c.err(
                join(&path, "delta"),
                "calibrating delta needs exact pre-change sampling; set a fixed delta",
            );
        }
    }
    if cfg.detectors.iter().any(DetectorConfig::needs_calibration) {
        if !caps.exact_pre_sampler {
            c.err(
                "calibration",
                format!(
                    "calibration needs exact pre-change sampling, which `{}` lacks",
                    model.name()
                ),
            );
        }
        if !caps.analytic_kl && !caps.exact_post_sampler {
            c.err(
                "calibration",
                format!(
                    "calibration needs a closed-form KL or exact post-change sampling for `{}`",
                    model.name()
                ),
            );
        }
    }
    if !caps.exact_pre_sampler || !caps.exact_post_sampler {
        c.err(
            "model",
            "stream generation needs exact pre- and post-change samplers",
        );
    }
}

/// `exact_constant` becomes a constant oracle at the closed-form value.
pub fn resolve_mode(
    mode: &OracleMode<f64>,
    model: &CliModel,
) -> lpa_cusum::Result<OracleMode<f64>> {
    match mode {
        OracleMode::Constant { value } if value.is_nan() => OracleMode::exact_constant(model),
        m => Ok(m.clone()),
    }
}

struct PartialConfig {
    oracle_mode: OracleMode<f64>,
    detectors: Vec<DetectorConfig>,
}

/// Parse and validate a config from text. `file` labels error messages.
pub fn parse_config_str(text: &str, file: &Path) -> Result<RunConfig, ConfigErrors> {
    let fail = |issues| ConfigErrors {
        file: file.to_path_buf(),
        issues,
    };
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        fail(vec![Issue {
            path: "<syntax>".into(),
            message: e.to_string().trim().to_string(),
        }])
    })?;
    let mut c = Ctx { issues: Vec::new() };
    c.keys(
        &root,
        "",
        &[
            "master_seed",
            "trials",
            "threads",
            "model",
            "oracle",
            "calibration",
            "detectors",
            "sweep",
            "run",
            "estimate_z",
            "output",
        ],
    );
    let master_seed = match root.get("master_seed") {
        None => 42,
        Some(Value::Integer(i)) => *i as u64,
        Some(Value::String(s)) => s.parse().unwrap_or_else(|_| {
            c.err("master_seed", "expected an unsigned 64-bit integer");
            42
        }),
        Some(v) => {
            c.err(
                "master_seed",
                format!("expected an integer, found {}", type_name(v)),
            );
            42
        }
    };
    let trials = c.count(&root, "", "trials", 2, 500);
    let threads = c.count(&root, "", "threads", 0, 0);
    let empty = Table::new();
    let model_t = c.table(&root, "", "model");
    if model_t.is_none() && !root.contains_key("model") {
        c.err("model", "missing required section");
    }
    let model = model_t.and_then(|t| parse_model(&mut c, t));
    let oracle_t = c.table(&root, "", "oracle").unwrap_or(&empty);
    let (oracle_mode, oracle_i) = parse_oracle(&mut c, oracle_t);
    let cal_t = c.table(&root, "", "calibration").unwrap_or(&empty);
    let calibration = parse_calibration(&mut c, cal_t);
    let sweep_t = c.table(&root, "", "sweep").unwrap_or(&empty);
    let sweep = parse_sweep(&mut c, sweep_t);
    let default_budget = oracle_i.saturating_mul(sweep.stream_length as usize);
    let detectors = match root.get("detectors") {
        Some(v) => parse_detectors(&mut c, v, oracle_i, default_budget),
        None => {
            c.err("detectors", "missing required section ([[detectors]])");
            Vec::new()
        }
    };
    let run_t = c.table(&root, "", "run").unwrap_or(&empty);
    c.keys(run_t, "run", &["threshold"]);
    let run_threshold = c.positive(run_t, "run", "threshold");
    let ez_t = c.table(&root, "", "estimate_z").unwrap_or(&empty);
    c.keys(ez_t, "estimate_z", &["draws"]);
    let estimate_z_draws = c.count(ez_t, "estimate_z", "draws", 2, 100_000);
    let out_t = c.table(&root, "", "output").unwrap_or(&empty);
    c.keys(out_t, "output", &["dir", "sweep_csv", "calibration"]);
    let output = OutputConfig {
        dir: PathBuf::from(c.string(out_t, "output", "dir").unwrap_or("out")),
        sweep_csv: c
            .string(out_t, "output", "sweep_csv")
            .unwrap_or("sweep.csv")
            .to_string(),
        calibration: c
            .string(out_t, "output", "calibration")
            .unwrap_or("calibration.toml")
            .to_string(),
    };

    if let Some(m) = &model {
        match m.build() {
            Ok(built) => check_capabilities(
                &mut c,
                &built,
                &PartialConfig {
                    oracle_mode: oracle_mode.clone(),
                    detectors: detectors.clone(),
                },
            ),
            Err(e) => c.err("model", e.to_string()),
        }
    }

    if !c.issues.is_empty() {
        return Err(fail(c.issues));
    }
    Ok(RunConfig {
        master_seed,
        trials,
        threads,
        model: model.expect("validated"),
        oracle_mode,
        oracle_i,
        calibration,
        detectors,
        sweep,
        run_threshold,
        estimate_z_draws,
        output,
        sha256: sha256_hex(text.as_bytes()),
    })
}

/// Read, parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigErrors> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigErrors {
        file: path.to_path_buf(),
        issues: vec![Issue {
            path: "<file>".into(),
            message: format!("cannot read: {e}"),
        }],
    })?;
    parse_config_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigErrors> {
        parse_config_str(text, Path::new("test.toml"))
    }

    fn paths(e: &ConfigErrors) -> Vec<&str> {
        e.issues.iter().map(|i| i.path.as_str()).collect()
    }

    #[test]
    fn minimal_config_is_valid() {
        let c =
            parse("[model]\nname = \"boltzmann\"\n[[detectors]]\nid = \"c\"\nkind = \"cusum\"\n")
                .unwrap();
        assert_eq!(c.master_seed, 42);
        assert_eq!(c.trials, 500);
        assert_eq!(c.oracle_i, 100);
        assert_eq!(c.sweep.change_point, 500);
        assert_eq!(c.sweep.thresholds.len(), 3);
        assert_eq!(c.sha256.len(), 64);
    }

    #[test]
    fn all_problems_are_reported() {
        let e = parse(
            "colour = 1\ntrials = 1\n[model]\nname = \"ising\"\n[oracle]\nmode = \"exact_path\"\nk = 3\n\
             [[detectors]]\nid = \"a\"\nkind = \"cusum\"\n[[detectors]]\nid = \"a\"\nkind = \"lpa\"\ngamma = 2.0\n\
             [[detectors]]\nkind = \"warp\"\n",
        )
        .unwrap_err();
        let p = paths(&e);
        for want in [
            "colour",
            "trials",
            "model.name",
            "oracle.k",
            "detectors[1].id",
            "detectors[1].gamma",
            "detectors[2].id",
            "detectors[2].kind",
        ] {
            assert!(p.contains(&want), "missing {want} in {p:?}");
        }
    }

    #[test]
    fn scusum_without_score_is_a_capability_error() {
        let e = parse(
            "[model]\nname = \"boltzmann\"\nhide = [\"analytic_score\"]\n\
             [[detectors]]\nid = \"s\"\nkind = \"scusum\"\ndelta = 1.0\n",
        )
        .unwrap_err();
        assert!(paths(&e).contains(&"detectors[0]"), "{e}");
        assert!(e.to_string().contains("Hyvärinen"), "{e}");
    }

    #[test]
    fn exact_path_oracle_needs_path_sampler() {
        let e = parse(
            "[model]\nname = \"mvn10\"\nhide = [\"exact_path_sampler\"]\n\
             [[detectors]]\nid = \"l\"\nkind = \"lpa\"\n",
        )
        .unwrap_err();
        assert!(paths(&e).contains(&"oracle.mode"), "{e}");
        let ok = parse(
            "[model]\nname = \"mvn10\"\nhide = [\"exact_path_sampler\"]\n[oracle]\nmode = \"importance\"\nk = 32\n\
             [[detectors]]\nid = \"l\"\nkind = \"lpa\"\n",
        );
        assert!(ok.is_ok(), "{:?}", ok.err());
    }

    #[test]
    fn missing_sections() {
        let e = parse("trials = 10\n").unwrap_err();
        let p = paths(&e);
        assert!(p.contains(&"model") && p.contains(&"detectors"), "{p:?}");
    }

    #[test]
    fn inline_models() {
        let c = parse(
            "[model]\nkind = \"boltzmann\"\nt_pre = 2.0\nt_post = 3\n[[detectors]]\nid = \"c\"\nkind = \"cusum\"\n",
        )
        .unwrap();
        assert_eq!(
            c.model.source,
            ModelSource::Boltzmann {
                t_pre: 2.0,
                t_post: 3.0
            }
        );
        let e = parse(
            "[model]\nkind = \"gaussian\"\nmean_pre = [0.0, 0.0]\ncov_pre = [[1.0, 2.0], [2.0, 1.0]]\n\
             mean_post = [1.0, 1.0]\ncov_post = [[1.0, 0.0], [0.0, 1.0]]\n[[detectors]]\nid = \"c\"\nkind = \"cusum\"\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("positive definite"), "{e}");
        let e = parse("[model]\nkind = \"boltzmann\"\nt_pre = -1\n[[detectors]]\nid = \"c\"\nkind = \"cusum\"\n")
            .unwrap_err();
        let p = paths(&e);
        assert!(
            p.contains(&"model.t_pre") && p.contains(&"model.t_post"),
            "{p:?}"
        );
    }

    #[test]
    fn syntax_error_is_located() {
        let e = parse("[model\nname = 1").unwrap_err();
        assert_eq!(e.issues.len(), 1);
        assert!(e.issues[0].message.contains("line"), "{e}");
    }

    #[test]
    fn arl_targets_become_log_thresholds() {
        let c = parse(
            "[model]\nname = \"boltzmann\"\n[sweep]\narl_targets = [200]\n[[detectors]]\nid = \"c\"\nkind = \"cusum\"\n",
        )
        .unwrap();
        assert!((c.sweep.thresholds[0] - 200f64.ln()).abs() < 1e-15);
    }
}
