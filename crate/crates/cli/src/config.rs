//! Run configuration: one JSON document per run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rte_core::analysis::{ErrorMetric, ErrorNorm, Observable, ReferenceSolver, SolverFamily};
use rte_core::exact::{ReferenceSpec, DEFAULT_REFERENCE_H};
use rte_core::model::{apply_scaling, builtin, RteModel, ScalingSpec};
use rte_core::stepper::{step_count, NegativityPolicy, Quadrature, SolverConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 0x5EED;
pub const SEED_ENV: &str = "RTE_SIM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Converge,
    LocalError,
    Diagnose,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Converge => "converge",
            Experiment::LocalError => "local-error",
            Experiment::Diagnose => "diagnose",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub scaling: Option<ScalingSpec>,
}

/// One Θ-method and quadrature rule, run at each step size in `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub label: Option<String>,
    pub theta: f64,
    /// Kept as text so an unknown name becomes a validation finding.
    pub quadrature: String,
    pub h: Vec<f64>,
    #[serde(default)]
    pub fp_tol: Option<f64>,
    #[serde(default)]
    pub fp_max_iter: Option<usize>,
    #[serde(default)]
    pub negativity: Option<String>,
    #[serde(default)]
    pub clamp_phi3: Option<bool>,
}

impl SolverSection {
    pub fn base_config(&self) -> Result<SolverConfig, CliError> {
        let quadrature = Quadrature::from_str(&self.quadrature)?;
        let mut cfg = SolverConfig::new(self.theta, self.h.first().copied().unwrap_or(1.0), quadrature);
        if let Some(v) = self.fp_tol {
            cfg.fp_tol = v;
        }
        if let Some(v) = self.fp_max_iter {
            cfg.fp_max_iter = v;
        }
        if let Some(v) = &self.negativity {
            cfg.negativity = NegativityPolicy::from_str(v)?;
        }
        if let Some(v) = self.clamp_phi3 {
            cfg.clamp_phi3 = v;
        }
        Ok(cfg)
    }

    pub fn family(&self) -> Result<SolverFamily, CliError> {
        let base = self.base_config()?;
        let label = self
            .label
            .clone()
            .unwrap_or_else(|| format!("theta{}-{}", base.theta, base.quadrature));
        Ok(SolverFamily::with_base(label, base, self.h.clone()))
    }
}

/// `"exact"` or a fine-step reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceSection {
    Named(String),
    Fine {
        h_ref: f64,
        #[serde(default)]
        theta: Option<f64>,
        #[serde(default)]
        quadrature: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSection {
    /// `component` (`F(x) = x_i`) or `square` (`F(x) = x_i²`).
    pub kind: String,
    /// 0-based component index.
    #[serde(default)]
    pub index: usize,
}

impl Default for ObservableSection {
    fn default() -> Self {
        ObservableSection {
            kind: "component".into(),
            index: 0,
        }
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_replications() -> u64 {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("rte-sim-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub model: ModelSection,
    pub solver: Vec<SolverSection>,
    /// Optional; the subcommand decides, and a conflicting value is an error.
    #[serde(default)]
    pub experiment: Option<Experiment>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: Vec<f64>,
    #[serde(rename = "M", default = "default_replications")]
    pub replications: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Defaults to `exact` when the model has analytic hooks, otherwise to a
    /// fine-step reference at h = 1/320.
    #[serde(default)]
    pub reference: Option<ReferenceSection>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub norm: ErrorNorm,
    #[serde(default)]
    pub metric: ErrorMetric,
    #[serde(default)]
    pub observable: Option<ObservableSection>,
    /// Replication whose paths `simulate` and `local-error` use.
    #[serde(default)]
    pub replication: u64,
    /// Output grid for the sampled exact trajectory in `simulate`.
    #[serde(default)]
    pub sample_grid: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        RunConfig::from_json(&text)
    }

    pub fn build_model(&self) -> Result<RteModel, CliError> {
        let model = builtin(&self.model.name, &self.model.params)?;
        match &self.model.scaling {
            Some(spec) => Ok(apply_scaling(&model, spec)?),
            None => Ok(model),
        }
    }

    /// Each scaling applied while building the model, with the model it was
    /// applied to. `bacteriophage-scaled` carries its scaling implicitly.
    fn scaling_layers(&self) -> Vec<(RteModel, ScalingSpec)> {
        let mut layers = Vec::new();
        if self.model.name == "bacteriophage-scaled" {
            if let Ok(base) = builtin("bacteriophage", &self.model.params) {
                layers.push((base, ScalingSpec::bacteriophage()));
            }
        }
        if let Some(spec) = &self.model.scaling {
            if let Ok(base) = builtin(&self.model.name, &self.model.params) {
                layers.push((base, spec.clone()));
            }
        }
        layers
    }

    pub fn families(&self) -> Result<Vec<SolverFamily>, CliError> {
        self.solver.iter().map(SolverSection::family).collect()
    }

    pub fn reference_solver(&self, model: &RteModel) -> Result<ReferenceSolver, CliError> {
        match &self.reference {
            None if model.analytic().is_some() => Ok(ReferenceSolver::Exact),
            None => Ok(ReferenceSolver::Fine(ReferenceSpec::new(DEFAULT_REFERENCE_H))),
            Some(ReferenceSection::Named(s)) if s == "exact" => Ok(ReferenceSolver::Exact),
            Some(ReferenceSection::Named(s)) => Err(CliError::Config(format!(
                "reference must be \"exact\" or an object with h_ref, got \"{s}\""
            ))),
            Some(ReferenceSection::Fine {
                h_ref,
                theta,
                quadrature,
            }) => {
                let mut spec = ReferenceSpec::new(*h_ref);
                if let Some(t) = theta {
                    spec.config.theta = *t;
                }
                if let Some(q) = quadrature {
                    spec.config.quadrature = Quadrature::from_str(q)?;
                }
                Ok(ReferenceSolver::Fine(spec))
            }
        }
    }

    pub fn observable(&self, dim: usize) -> Result<Observable, CliError> {
        let sec = self.observable.clone().unwrap_or_default();
        if sec.index >= dim {
            return Err(CliError::Config(format!(
                "observable index {} out of range for a {dim}-dimensional model",
                sec.index
            )));
        }
        match sec.kind.as_str() {
            "component" => Ok(Observable::component(sec.index)),
            "square" => Ok(Observable::square(sec.index)),
            other => Err(CliError::Config(format!(
                "unknown observable kind `{other}` (expected component or square)"
            ))),
        }
    }

    /// SHA-256 of the canonical JSON form with the resolved seed. The output
    /// directory is left out, since it does not change any result.
    pub fn hash(&self, experiment: Experiment, seed: u64) -> String {
        let mut canonical = self.clone();
        canonical.seed = Some(seed);
        canonical.experiment = Some(experiment);
        canonical.output = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Env,
    Config,
    Default,
}

/// Flag, then `RTE_SIM_SEED`, then the config field, then `0x5EED`.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: Option<u64>) -> Result<(u64, SeedSource), CliError> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(text) = env.filter(|t| !t.trim().is_empty()) {
        let s = parse_seed(text.trim())
            .ok_or_else(|| CliError::Config(format!("{SEED_ENV}=`{text}` is not a 64-bit unsigned integer")))?;
        return Ok((s, SeedSource::Env));
    }
    if let Some(s) = config {
        return Ok((s, SeedSource::Config));
    }
    Ok((DEFAULT_SEED, SeedSource::Default))
}

/// Decimal or `0x`-prefixed hexadecimal.
pub fn parse_seed(text: &str) -> Option<u64> {
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

impl Finding {
    fn error(message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Error,
            message: message.into(),
        }
    }

    fn warning(message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Warning,
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.severity {
            Severity::Error => write!(f, "error: {}", self.message),
            Severity::Warning => write!(f, "warning: {}", self.message),
        }
    }
}

/// Every problem with `config` for `experiment`, errors and warnings alike.
pub fn validate(config: &RunConfig, experiment: Experiment) -> Vec<Finding> {
    let mut out = Vec::new();
    if config.schema != SCHEMA_VERSION {
        out.push(Finding::error(format!(
            "unsupported schema {} (expected {SCHEMA_VERSION})",
            config.schema
        )));
    }
    if let Some(e) = config.experiment {
        if e != experiment {
            out.push(Finding::error(format!(
                "config declares experiment `{e}` but the command is `{experiment}`"
            )));
        }
    }
    let horizon_ok = config.horizon > 0.0 && config.horizon.is_finite();
    if !horizon_ok {
        out.push(Finding::error(format!("T must be positive and finite, got {}", config.horizon)));
    }

    let model = match config.build_model() {
        Ok(m) => Some(m),
        Err(e) => {
            out.push(Finding::error(e.to_string()));
            None
        }
    };
    if model.is_some() {
        for (base, spec) in config.scaling_layers() {
            if let Ok(bad) = spec.exponent_violations(&base) {
                if !bad.is_empty() {
                    let names: Vec<String> = bad.iter().map(|k| (k + 1).to_string()).collect();
                    out.push(Finding::warning(format!(
                        "scaling exponents c_k exceed ρ_k for processes {} of `{}`",
                        names.join(", "),
                        base.name()
                    )));
                }
            }
        }
    }
    if let Some(m) = &model {
        if config.x0.len() != m.dim() {
            out.push(Finding::error(format!(
                "x0 has {} components, model `{}` has dimension {}",
                config.x0.len(),
                m.name(),
                m.dim()
            )));
        }
    }
    if config.x0.iter().any(|v| !v.is_finite()) {
        out.push(Finding::error("x0 must be finite"));
    }

    if config.solver.is_empty() {
        out.push(Finding::error("at least one solver entry is required"));
    }
    let mut labels = BTreeMap::new();
    for (i, sec) in config.solver.iter().enumerate() {
        let base = match sec.base_config() {
            Ok(b) => b,
            Err(e) => {
                out.push(Finding::error(format!("solver {}: {e}", i + 1)));
                continue;
            }
        };
        let fam = sec.family().expect("base config already checked");
        if let Some(prev) = labels.insert(fam.label.clone(), i) {
            out.push(Finding::error(format!(
                "solvers {} and {} share the label `{}`",
                prev + 1,
                i + 1,
                fam.label
            )));
        }
        if sec.h.is_empty() {
            out.push(Finding::error(format!("solver `{}` lists no step sizes", fam.label)));
        }
        for cfg in fam.configs() {
            if let Err(e) = cfg.validate() {
                out.push(Finding::error(format!("solver `{}`: {e}", fam.label)));
                continue;
            }
            if horizon_ok && step_count(config.horizon, cfg.h).is_err() {
                out.push(Finding::error(format!(
                    "solver `{}`: h = {} does not divide T = {} into an integer number of steps",
                    fam.label, cfg.h, config.horizon
                )));
            }
            if let Some(m) = &model {
                if let Some(w) = cfg.step_size_warning(m) {
                    out.push(Finding::warning(format!("solver `{}`: {w}", fam.label)));
                }
            }
        }
        if base.theta == 0.0 && sec.fp_max_iter.is_some() {
            out.push(Finding::warning(format!(
                "solver `{}` is explicit; fp_max_iter has no effect",
                fam.label
            )));
        }
    }

    if let Some(m) = &model {
        let needs_reference = matches!(experiment, Experiment::Converge | Experiment::Simulate);
        match config.reference_solver(m) {
            Err(e) => out.push(Finding::error(e.to_string())),
            Ok(ReferenceSolver::Exact) => {
                if m.analytic().is_none() && needs_reference {
                    out.push(Finding::error(format!(
                        "model `{}` has no analytic hooks; use a fine reference such as {{\"h_ref\": {DEFAULT_REFERENCE_H}}}",
                        m.name()
                    )));
                }
            }
            Ok(ReferenceSolver::Fine(spec)) => {
                if let Err(e) = spec.solver_config().validate() {
                    out.push(Finding::error(format!("reference: {e}")));
                } else if horizon_ok && step_count(config.horizon, spec.h_ref).is_err() {
                    out.push(Finding::error(format!(
                        "reference h_ref = {} does not divide T = {}",
                        spec.h_ref, config.horizon
                    )));
                }
                if experiment == Experiment::Converge {
                    for sec in &config.solver {
                        for &h in &sec.h {
                            if spec.nesting(h).is_err() {
                                out.push(Finding::error(format!(
                                    "reference h_ref = {} does not nest into h = {h}",
                                    spec.h_ref
                                )));
                            }
                        }
                    }
                }
            }
        }
        match experiment {
            Experiment::LocalError | Experiment::Diagnose => match m.analytic() {
                None => out.push(Finding::error(format!(
                    "`{experiment}` needs a model with analytic hooks; `{}` has none",
                    m.name()
                ))),
                Some(h) if experiment == Experiment::LocalError && h.drift_integral.is_none() => {
                    out.push(Finding::error(format!("model `{}` has no drift integral hook", m.name())))
                }
                _ => {}
            },
            _ => {}
        }
        if experiment == Experiment::Diagnose {
            if let Err(e) = config.observable(m.dim()) {
                out.push(Finding::error(e.to_string()));
            }
        }
    }

    if matches!(experiment, Experiment::Converge | Experiment::Diagnose) && config.replications < 2 {
        out.push(Finding::error(format!(
            "`{experiment}` needs M >= 2, got {}",
            config.replications
        )));
    }
    if let Some(g) = config.sample_grid {
        if !(g > 0.0) || (horizon_ok && step_count(config.horizon, g).is_err()) {
            out.push(Finding::error(format!("sample_grid = {g} does not divide T = {}", config.horizon)));
        }
    }
    out
}
