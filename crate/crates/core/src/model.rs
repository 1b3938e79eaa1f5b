//! Random time change equation models.
//!
//! A model is the data of
//!
//! ```text
//! X(t) = X(0) + ∫ f(X(s)) ds + Σ_k Y_k( ∫ λ_k(X(s)) ds ) ν_k
//! ```
//!
//! with drift `f`, nonnegative rates `λ_k` and jump vectors `ν_k`. Models
//! are immutable once built and are shared by reference across replication
//! workers. Models whose inter-jump flow can be written down in closed form
//! may carry [`AnalyticHooks`], which the exact solver and the local-error
//! diagnostics rely on.
//!
//! Process indices `k` are zero-based throughout the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RteError};

pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(t, x, out)`: writes a vector-valued function of time and initial state into `out`.
pub type FlowFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x) -> value`.
pub type HazardFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A state-dependent jump rate.
///
/// Affine rates are kept structurally so that quadrature rules can use their
/// exact linearisation.
#[derive(Clone)]
pub enum Rate {
    Affine { offset: f64, gradient: Vec<f64> },
    General(ScalarFn),
}

impl Rate {
    pub fn linear(gradient: Vec<f64>) -> Self {
        Rate::Affine {
            offset: 0.0,
            gradient,
        }
    }

    pub fn general(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Rate::General(Arc::new(f))
    }

    /// Unclamped value.
    #[inline]
    pub fn raw(&self, x: &[f64]) -> f64 {
        match self {
            Rate::Affine { offset, gradient } => {
                offset + gradient.iter().zip(x).map(|(g, xi)| g * xi).sum::<f64>()
            }
            Rate::General(f) => f(x),
        }
    }

    pub fn as_affine(&self) -> Option<(f64, &[f64])> {
        match self {
            Rate::Affine { offset, gradient } => Some((*offset, gradient)),
            Rate::General(_) => None,
        }
    }
}

impl fmt::Debug for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Affine { offset, gradient } => f
                .debug_struct("Affine")
                .field("offset", offset)
                .field("gradient", gradient)
                .finish(),
            Rate::General(_) => f.write_str("General(..)"),
        }
    }
}

/// Closed-form pieces of the inter-jump dynamics.
///
/// `hazard_inverse[k](Δ, x)` must return the smallest `t` with
/// `hazard_integral[k](t, x) = Δ`, or `f64::INFINITY` when the cumulative
/// hazard never reaches `Δ`. Hooks are expected to round-trip to a relative
/// tolerance of 1e-10.
#[derive(Clone)]
pub struct AnalyticHooks {
    pub flow: FlowFn,
    pub hazard_integral: Vec<HazardFn>,
    pub hazard_inverse: Vec<HazardFn>,
    /// `∫₀ᵗ f(φ(s, x)) ds`.
    pub drift_integral: Option<FlowFn>,
}

/// Relative round-trip tolerance that hooks declare.
pub const HOOK_TOLERANCE: f64 = 1e-10;

#[derive(Clone)]
pub struct RteModel {
    name: String,
    dim: usize,
    drift: DriftFn,
    rates: Vec<Rate>,
    jumps: Vec<Vec<f64>>,
    /// Declared Lipschitz bound of `f`, used only for the step-size warning.
    pub lipschitz_f: Option<f64>,
    pub lipschitz_rates: Option<Vec<f64>>,
    analytic: Option<AnalyticHooks>,
    clamp_events: Arc<AtomicU64>,
}

impl fmt::Debug for RteModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RteModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("rates", &self.rates)
            .field("jumps", &self.jumps)
            .field("lipschitz_f", &self.lipschitz_f)
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

impl RteModel {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        rates: Vec<Rate>,
        jumps: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(RteError::Config("model dimension must be at least 1".into()));
        }
        if rates.is_empty() {
            return Err(RteError::Config("model needs at least one jump process".into()));
        }
        if rates.len() != jumps.len() {
            return Err(RteError::Config(format!(
                "{} rates but {} jump vectors",
                rates.len(),
                jumps.len()
            )));
        }
        for (k, nu) in jumps.iter().enumerate() {
            if nu.len() != dim {
                return Err(RteError::Config(format!(
                    "jump vector {k} has length {}, expected {dim}",
                    nu.len()
                )));
            }
        }
        for (k, rate) in rates.iter().enumerate() {
            if let Some((_, g)) = rate.as_affine() {
                if g.len() != dim {
                    return Err(RteError::Config(format!(
                        "affine rate {k} has gradient of length {}, expected {dim}",
                        g.len()
                    )));
                }
            }
        }
        Ok(RteModel {
            name: name.into(),
            dim,
            drift: Arc::new(drift),
            rates,
            jumps,
            lipschitz_f: None,
            lipschitz_rates: None,
            analytic: None,
            clamp_events: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn with_lipschitz(mut self, lipschitz_f: Option<f64>, rates: Option<Vec<f64>>) -> Self {
        self.lipschitz_f = lipschitz_f;
        self.lipschitz_rates = rates;
        self
    }

    pub fn with_hooks(mut self, hooks: AnalyticHooks) -> Result<Self> {
        let p = self.jump_count();
        if hooks.hazard_integral.len() != p || hooks.hazard_inverse.len() != p {
            return Err(RteError::Config(format!(
                "analytic hooks must provide {p} hazard integrals and inverses"
            )));
        }
        self.analytic = Some(hooks);
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Replaces the jump vectors, keeping rates and hooks.
    pub fn with_jump_vectors(mut self, jumps: Vec<Vec<f64>>) -> Result<Self> {
        if jumps.len() != self.jump_count() || jumps.iter().any(|nu| nu.len() != self.dim) {
            return Err(RteError::Config("jump vectors do not match model shape".into()));
        }
        self.jumps = jumps;
        // Jumps change the dynamics, so clamp diagnostics start over.
        self.clamp_events = Arc::new(AtomicU64::new(0));
        Ok(self)
    }

    /// The same drift with every rate identically zero: a deterministic ODE.
    pub fn without_jump_rates(&self) -> RteModel {
        let mut out = self.clone();
        out.name = format!("{}-no-jumps", self.name);
        out.rates = vec![Rate::linear(vec![0.0; self.dim]); self.jump_count()];
        out.lipschitz_rates = Some(vec![0.0; self.jump_count()]);
        out.clamp_events = Arc::new(AtomicU64::new(0));
        if let Some(h) = &mut out.analytic {
            let zero: HazardFn = Arc::new(|_, _| 0.0);
            let never: HazardFn = Arc::new(|d, _| if d <= 0.0 { 0.0 } else { f64::INFINITY });
            h.hazard_integral = vec![zero; self.jump_count()];
            h.hazard_inverse = vec![never; self.jump_count()];
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jump_count(&self) -> usize {
        self.rates.len()
    }

    pub fn jump(&self, k: usize) -> &[f64] {
        &self.jumps[k]
    }

    pub fn jumps(&self) -> &[Vec<f64>] {
        &self.jumps
    }

    pub fn rate(&self, k: usize) -> &Rate {
        &self.rates[k]
    }

    pub fn analytic(&self) -> Option<&AnalyticHooks> {
        self.analytic.as_ref()
    }

    pub(crate) fn require_hooks(&self) -> Result<&AnalyticHooks> {
        self.analytic.as_ref().ok_or_else(|| {
            RteError::Unsupported(format!("model `{}` has no analytic hooks", self.name))
        })
    }

    /// Writes `f(x)` into `out`.
    pub fn eval_drift(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.drift)(x, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(RteError::eval("drift", x))
        }
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_drift(x, &mut out)?;
        Ok(out)
    }

    /// `max(λ_k(x), 0)`. Negative raw values are counted as clamp events.
    pub fn eval_rate(&self, k: usize, x: &[f64]) -> Result<f64> {
        let v = self.rates[k].raw(x);
        if !v.is_finite() {
            return Err(RteError::eval(format!("rate {k}"), x));
        }
        if v < 0.0 {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            Ok(0.0)
        } else {
            Ok(v)
        }
    }

    /// Number of rate evaluations clamped to zero since construction.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }
}

/// System-size scaling `X^N_i = N^{-α_i} X_i`.
///
/// The scaled coefficients are obtained by direct substitution; the exponents
/// `eta`, `gamma`, `c` and `drift_c` document how the powers of `N` factor out
/// of them and feed the regime diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    #[serde(rename = "N")]
    pub n: f64,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub gamma: f64,
    /// One exponent per jump process.
    pub c: Vec<f64>,
    /// Exponents of the individual drift terms, if the model has any worth naming.
    #[serde(default)]
    pub drift_c: Vec<f64>,
    /// Jump-size exponents `|ν^N_k| ∝ N^{-ρ_k}`; derived from the scaled jumps when absent.
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
}

impl ScalingSpec {
    /// The scaling used for the bacteriophage experiments.
    pub fn bacteriophage() -> Self {
        ScalingSpec {
            n: 10_000.0,
            alpha: vec![0.25, 0.5, 1.0],
            eta: 0.0,
            gamma: 0.0,
            c: vec![0.5, 0.25, 0.25, 1.5],
            drift_c: vec![-0.75, 0.0],
            rho: None,
        }
    }

    fn check_shape(&self, model: &RteModel) -> Result<()> {
        if !(self.n > 0.0) || !self.n.is_finite() {
            return Err(RteError::Config(format!("scaling N must be positive, got {}", self.n)));
        }
        if self.alpha.len() != model.dim() {
            return Err(RteError::Config(format!(
                "scaling alpha has {} entries, model dimension is {}",
                self.alpha.len(),
                model.dim()
            )));
        }
        if self.c.len() != model.jump_count() {
            return Err(RteError::Config(format!(
                "scaling c has {} entries, model has {} jump processes",
                self.c.len(),
                model.jump_count()
            )));
        }
        if let Some(rho) = &self.rho {
            if rho.len() != model.jump_count() {
                return Err(RteError::Config(format!(
                    "scaling rho has {} entries, model has {} jump processes",
                    rho.len(),
                    model.jump_count()
                )));
            }
        }
        Ok(())
    }

    fn factors(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| self.n.powf(*a)).collect()
    }

    /// `ρ_k` for each process of the unscaled `model`.
    pub fn rho_values(&self, model: &RteModel) -> Result<Vec<f64>> {
        self.check_shape(model)?;
        if let Some(rho) = &self.rho {
            return Ok(rho.clone());
        }
        let factors = self.factors();
        let ln_n = self.n.ln();
        Ok(model
            .jumps()
            .iter()
            .map(|nu| {
                let size = nu
                    .iter()
                    .zip(&factors)
                    .map(|(v, s)| (v / s).abs())
                    .fold(0.0, f64::max);
                if ln_n == 0.0 || size == 0.0 {
                    f64::INFINITY
                } else {
                    -size.ln() / ln_n
                }
            })
            .collect())
    }

    pub fn rho_min(&self, model: &RteModel) -> Result<f64> {
        Ok(self
            .rho_values(model)?
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    }

    /// Processes with `c_k > ρ_k`.
    pub fn exponent_violations(&self, model: &RteModel) -> Result<Vec<usize>> {
        let rho = self.rho_values(model)?;
        Ok(self
            .c
            .iter()
            .zip(&rho)
            .enumerate()
            .filter(|(_, (c, r))| **c > *r + 1e-12)
            .map(|(k, _)| k)
            .collect())
    }

    /// Maps an unscaled state to scaled coordinates.
    pub fn scale_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.factors()).map(|(v, s)| v / s).collect()
    }

    /// Maps a scaled state back to original coordinates.
    pub fn unscale_state(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(self.factors()).map(|(v, s)| v * s).collect()
    }
}

/// The model of `X^N = N^{-α} ⊙ X`.
pub fn apply_scaling(model: &RteModel, spec: &ScalingSpec) -> Result<RteModel> {
    spec.check_shape(model)?;
    let dim = model.dim();
    let s: Arc<[f64]> = spec.factors().into();

    let drift = {
        let f = model.drift.clone();
        let s = s.clone();
        move |y: &[f64], out: &mut [f64]| {
            let x: Vec<f64> = y.iter().zip(s.iter()).map(|(v, si)| v * si).collect();
            f(&x, out);
            for (o, si) in out.iter_mut().zip(s.iter()) {
                *o /= si;
            }
        }
    };

    let rates = model
        .rates
        .iter()
        .map(|r| match r {
            Rate::Affine { offset, gradient } => Rate::Affine {
                offset: *offset,
                gradient: gradient.iter().zip(s.iter()).map(|(g, si)| g * si).collect(),
            },
            Rate::General(f) => {
                let f = f.clone();
                let s = s.clone();
                Rate::general(move |y| {
                    let x: Vec<f64> = y.iter().zip(s.iter()).map(|(v, si)| v * si).collect();
                    f(&x)
                })
            }
        })
        .collect();

    let jumps = model
        .jumps
        .iter()
        .map(|nu| nu.iter().zip(s.iter()).map(|(v, si)| v / si).collect())
        .collect();

    let name = if spec.n == 1.0 {
        model.name.clone()
    } else {
        format!("{}-scaled", model.name)
    };
    let mut scaled = RteModel::new(name, dim, drift, rates, jumps)?;

    if let Some(h) = &model.analytic {
        let up = |y: &[f64], s: &[f64]| -> Vec<f64> { y.iter().zip(s).map(|(v, si)| v * si).collect() };
        let flow: FlowFn = {
            let inner = h.flow.clone();
            let s = s.clone();
            Arc::new(move |t, y, out| {
                inner(t, &up(y, &s), out);
                for (o, si) in out.iter_mut().zip(s.iter()) {
                    *o /= si;
                }
            })
        };
        let wrap = |fs: &[HazardFn]| -> Vec<HazardFn> {
            fs.iter()
                .map(|inner| {
                    let inner = inner.clone();
                    let s = s.clone();
                    Arc::new(move |t: f64, y: &[f64]| inner(t, &up(y, &s))) as HazardFn
                })
                .collect()
        };
        let drift_integral = h.drift_integral.as_ref().map(|inner| {
            let inner = inner.clone();
            let s = s.clone();
            Arc::new(move |t: f64, y: &[f64], out: &mut [f64]| {
                inner(t, &up(y, &s), out);
                for (o, si) in out.iter_mut().zip(s.iter()) {
                    *o /= si;
                }
            }) as FlowFn
        });
        scaled = scaled.with_hooks(AnalyticHooks {
            flow,
            hazard_integral: wrap(&h.hazard_integral),
            hazard_inverse: wrap(&h.hazard_inverse),
            drift_integral,
        })?;
    }
    if spec.n == 1.0 {
        scaled.lipschitz_f = model.lipschitz_f;
        scaled.lipschitz_rates = model.lipschitz_rates.clone();
    }
    Ok(scaled)
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(RteError::Config(format!("{name} must be positive, got {v}")))
    }
}

/// `1 - e^{-a t}` without cancellation for small `a t`.
#[inline]
fn one_minus_exp(a: f64, t: f64) -> f64 {
    -(-a * t).exp_m1()
}

/// Scalar model `dX = -αX dt + ε dY(λ∫X)`, with closed-form hooks.
pub fn builtin_linear_scalar(alpha: f64, lambda: f64, eps: f64) -> Result<RteModel> {
    let alpha = positive("alpha", alpha)?;
    let lambda = positive("lambda", lambda)?;
    let eps = positive("eps", eps)?;

    let hazard: HazardFn = Arc::new(move |t, x| {
        let lx = lambda * x[0];
        if lx <= 0.0 || t <= 0.0 {
            0.0
        } else if t.is_infinite() {
            lx / alpha
        } else {
            lx * one_minus_exp(alpha, t) / alpha
        }
    });
    let inverse: HazardFn = Arc::new(move |delta, x| {
        let lx = lambda * x[0];
        if delta <= 0.0 {
            return 0.0;
        }
        if lx <= 0.0 {
            return f64::INFINITY;
        }
        let q = alpha * delta / lx;
        if q < 1.0 {
            -(-q).ln_1p() / alpha
        } else {
            f64::INFINITY
        }
    });
    let hooks = AnalyticHooks {
        flow: Arc::new(move |t, x, out| out[0] = x[0] * (-alpha * t).exp()),
        hazard_integral: vec![hazard],
        hazard_inverse: vec![inverse],
        drift_integral: Some(Arc::new(move |t, x, out| {
            out[0] = -x[0] * one_minus_exp(alpha, t)
        })),
    };
    RteModel::new(
        "linear-scalar",
        1,
        move |x, out| out[0] = -alpha * x[0],
        vec![Rate::linear(vec![lambda])],
        vec![vec![eps]],
    )?
    .with_lipschitz(Some(alpha), Some(vec![lambda]))
    .with_hooks(hooks)
}

/// Scalar model with a genuinely nonlinear rate: `f(x) = -αx`, `λ(x) = βx²`, `ν = ε`.
pub fn builtin_quadratic_rate(alpha: f64, beta: f64, eps: f64) -> Result<RteModel> {
    let alpha = positive("alpha", alpha)?;
    let beta = positive("beta", beta)?;
    let eps = positive("eps", eps)?;

    let hazard: HazardFn = Arc::new(move |t, x| {
        let bx = beta * x[0] * x[0];
        if bx <= 0.0 || t <= 0.0 {
            0.0
        } else if t.is_infinite() {
            bx / (2.0 * alpha)
        } else {
            bx * one_minus_exp(2.0 * alpha, t) / (2.0 * alpha)
        }
    });
    let inverse: HazardFn = Arc::new(move |delta, x| {
        let bx = beta * x[0] * x[0];
        if delta <= 0.0 {
            return 0.0;
        }
        if bx <= 0.0 {
            return f64::INFINITY;
        }
        let q = 2.0 * alpha * delta / bx;
        if q < 1.0 {
            -(-q).ln_1p() / (2.0 * alpha)
        } else {
            f64::INFINITY
        }
    });
    let hooks = AnalyticHooks {
        flow: Arc::new(move |t, x, out| out[0] = x[0] * (-alpha * t).exp()),
        hazard_integral: vec![hazard],
        hazard_inverse: vec![inverse],
        drift_integral: Some(Arc::new(move |t, x, out| {
            out[0] = -x[0] * one_minus_exp(alpha, t)
        })),
    };
    RteModel::new(
        "quadratic-rate",
        1,
        move |x, out| out[0] = -alpha * x[0],
        vec![Rate::general(move |x| beta * x[0] * x[0])],
        vec![vec![eps]],
    )?
    .with_lipschitz(Some(alpha), None)
    .with_hooks(hooks)
}

/// Reaction constants of the bacteriophage model, `r1..r6`.
pub const BACTERIOPHAGE_RATES: [f64; 6] = [0.025, 0.25, 1.0, 7.5e-6, 1000.0, 1.9985];

/// Hybrid bacteriophage model in the order (tem, gen, struc); reactions 5 and 6
/// enter through the drift, reactions 1 to 4 are Poisson driven.
pub fn builtin_bacteriophage() -> RteModel {
    bacteriophage_with(BACTERIOPHAGE_RATES).expect("built-in constants are valid")
}

pub fn bacteriophage_with(r: [f64; 6]) -> Result<RteModel> {
    if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(RteError::Config(format!("bacteriophage rates must be nonnegative, got {r:?}")));
    }
    let [r1, r2, r3, r4, r5, r6] = r;
    let model = RteModel::new(
        "bacteriophage",
        3,
        move |x, out| {
            out[0] = 0.0;
            out[1] = 0.0;
            out[2] = r5 * x[0] - r6 * x[2];
        },
        vec![
            Rate::linear(vec![0.0, r1, 0.0]),
            Rate::linear(vec![r2, 0.0, 0.0]),
            Rate::linear(vec![r3, 0.0, 0.0]),
            Rate::general(move |x| r4 * x[1] * x[2]),
        ],
        vec![
            vec![1.0, -1.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, -1.0, -1.0],
        ],
    )?;
    Ok(model.with_lipschitz(Some(r5 + r6), None))
}

pub const BUILTIN_NAMES: [&str; 4] = [
    "linear-scalar",
    "bacteriophage",
    "bacteriophage-scaled",
    "quadratic-rate",
];

/// Looks a built-in model up by name. Unknown parameter keys are rejected.
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<RteModel> {
    let take = |allowed: &[(&str, f64)]| -> Result<Vec<f64>> {
        if let Some(bad) = params.keys().find(|k| !allowed.iter().any(|(a, _)| a == k)) {
            return Err(RteError::Config(format!(
                "unknown parameter `{bad}` for model `{name}`"
            )));
        }
        Ok(allowed
            .iter()
            .map(|(k, d)| params.get(*k).copied().unwrap_or(*d))
            .collect())
    };
    match name {
        "linear-scalar" => {
            let v = take(&[("alpha", 1.5), ("lambda", 200.0), ("eps", 0.007)])?;
            builtin_linear_scalar(v[0], v[1], v[2])
        }
        "quadratic-rate" => {
            let v = take(&[("alpha", 1.0), ("beta", 10.0), ("eps", 0.01)])?;
            builtin_quadratic_rate(v[0], v[1], v[2])
        }
        "bacteriophage" | "bacteriophage-scaled" => {
            let keys = ["r1", "r2", "r3", "r4", "r5", "r6"];
            let defaults: Vec<(&str, f64)> =
                keys.iter().copied().zip(BACTERIOPHAGE_RATES).collect();
            let v = take(&defaults)?;
            let model = bacteriophage_with([v[0], v[1], v[2], v[3], v[4], v[5]])?;
            if name == "bacteriophage-scaled" {
                apply_scaling(&model, &ScalingSpec::bacteriophage())
            } else {
                Ok(model)
            }
        }
        other => Err(RteError::Config(format!(
            "unknown model `{other}` (known: {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}
