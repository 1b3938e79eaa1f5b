//! Coupled-path strong-error estimation and related diagnostics.
//!
//! For each replication one [`PathBundle`] is built and shared by the
//! reference solver and every solver variant, so `|X(T) - X̂_{n̄}|` is a
//! pathwise difference. Replications run through [`map_replications`] and are
//! reduced in index order.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RteError};
use crate::exact::{exact_trajectory, ExactTrajectory, ReferenceSpec};
use crate::model::RteModel;
use crate::par::{map_replications, Execution};
use crate::poisson::PathBundle;
use crate::quadrature::integrate;
use crate::stepper::{integrate as step_through, solve_trajectory, step_count, Phi3Workspace, Quadrature, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSolver {
    Exact,
    Fine(ReferenceSpec),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorNorm {
    #[default]
    Euclidean,
    Max,
}

impl ErrorNorm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            ErrorNorm::Euclidean => diffs.map(|v| v * v).sum::<f64>().sqrt(),
            ErrorNorm::Max => diffs.fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMetric {
    /// `|X(T) - X̂_{n̄}|`.
    #[default]
    Endpoint,
    /// `max_n |X(t_n) - X̂_n|`.
    MaxOverGrid,
}

/// One Θ-method with one quadrature rule, run at several step sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverFamily {
    pub label: String,
    /// Solver settings; its `h` is replaced by each entry of `steps`.
    pub base: SolverConfig,
    pub steps: Vec<f64>,
}

impl SolverFamily {
    pub fn new(theta: f64, quadrature: Quadrature, steps: Vec<f64>) -> Self {
        let base = SolverConfig::new(theta, steps.first().copied().unwrap_or(1.0), quadrature);
        SolverFamily {
            label: format!("theta{theta}-{quadrature}"),
            base,
            steps,
        }
    }

    pub fn with_base(label: impl Into<String>, base: SolverConfig, steps: Vec<f64>) -> Self {
        SolverFamily {
            label: label.into(),
            base,
            steps,
        }
    }

    pub fn configs(&self) -> impl Iterator<Item = SolverConfig> + '_ {
        self.steps.iter().map(|h| self.base.with_h(*h))
    }
}

#[derive(Clone, Debug)]
pub struct StrongErrorSetup {
    pub reference: ReferenceSolver,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub replications: u64,
    pub master_seed: u64,
    pub norm: ErrorNorm,
    pub metric: ErrorMetric,
    pub execution: Execution,
}

impl StrongErrorSetup {
    pub fn new(reference: ReferenceSolver, x0: Vec<f64>, horizon: f64, replications: u64, master_seed: u64) -> Self {
        StrongErrorSetup {
            reference,
            x0,
            horizon,
            replications,
            master_seed,
            norm: ErrorNorm::Euclidean,
            metric: ErrorMetric::Endpoint,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorRow {
    pub h: f64,
    pub mean_abs_error: f64,
    pub std_error: f64,
    pub replications: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub label: String,
    pub theta: f64,
    pub quadrature: Quadrature,
    /// Sorted by `h`, largest first.
    pub rows: Vec<ErrorRow>,
    pub model: String,
    pub seed: u64,
}

impl ErrorReport {
    pub fn row(&self, h: f64) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.h == h)
    }

    /// CSV `h,mean_abs_error,std_error,M`, followed by the order fit as a
    /// `# slope=…, r2=…` comment when one exists.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "h,mean_abs_error,std_error,M")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.h, r.mean_abs_error, r.std_error, r.replications)?;
        }
        match fit_order(self) {
            Ok(fit) => writeln!(w, "# slope={}, r2={}", fit.slope, fit.r_squared),
            Err(e) => writeln!(w, "# fit unavailable: {e}"),
        }
    }
}

/// Reference values for one replication, enough to evaluate either metric.
enum ReferencePath {
    Exact(ExactTrajectory),
    Fine { states: Vec<Vec<f64>>, h_ref: f64 },
}

impl ReferencePath {
    fn endpoint(&self) -> &[f64] {
        match self {
            ReferencePath::Exact(e) => &e.final_state,
            ReferencePath::Fine { states, .. } => states.last().expect("nonempty"),
        }
    }

    fn grid(&self, h: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            ReferencePath::Exact(e) => (0..=steps).map(|n| e.state_at((n as f64 * h).min(e.horizon))).collect(),
            ReferencePath::Fine { states, h_ref } => {
                let stride = ReferenceSpec::new(*h_ref).nesting(h)?;
                Ok((0..=steps).map(|n| states[n * stride].clone()).collect())
            }
        }
    }
}

fn run_reference(
    model: &RteModel,
    reference: &ReferenceSolver,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
) -> Result<ReferencePath> {
    match reference {
        ReferenceSolver::Exact => Ok(ReferencePath::Exact(exact_trajectory(model, paths, x0, horizon)?)),
        ReferenceSolver::Fine(spec) => {
            let traj = crate::exact::reference_trajectory(model, spec, paths, x0, horizon)?;
            let states = (0..traj.len()).map(|i| traj.state(i).to_vec()).collect();
            Ok(ReferencePath::Fine {
                states,
                h_ref: spec.h_ref,
            })
        }
    }
}

fn validate_setup(model: &RteModel, setup: &StrongErrorSetup, families: &[SolverFamily]) -> Result<()> {
    if setup.replications < 2 {
        return Err(RteError::Config(format!(
            "at least 2 replications are needed, got {}",
            setup.replications
        )));
    }
    match &setup.reference {
        ReferenceSolver::Exact => {
            model.require_hooks()?;
        }
        ReferenceSolver::Fine(spec) => {
            spec.solver_config().validate()?;
            step_count(setup.horizon, spec.h_ref)?;
        }
    }
    for fam in families {
        if fam.steps.is_empty() {
            return Err(RteError::Config(format!("solver `{}` has no step sizes", fam.label)));
        }
        for cfg in fam.configs() {
            cfg.validate()?;
            step_count(setup.horizon, cfg.h)?;
            if let (ErrorMetric::MaxOverGrid, ReferenceSolver::Fine(spec)) = (setup.metric, &setup.reference) {
                spec.nesting(cfg.h)?;
            }
        }
    }
    Ok(())
}

/// Per-replication errors: `errors[family][step]`.
fn replication_errors(
    model: &RteModel,
    setup: &StrongErrorSetup,
    families: &[SolverFamily],
    j: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut paths = PathBundle::new(setup.master_seed, j, model.jump_count());
    let wrap = |variant: String| move |e: RteError| RteError::Replication {
        replication: j,
        variant,
        source: Box::new(e),
    };
    let reference = run_reference(model, &setup.reference, &mut paths, &setup.x0, setup.horizon)
        .map_err(wrap("reference".into()))?;
    families
        .iter()
        .map(|fam| {
            fam.configs()
                .map(|cfg| {
                    let result = match setup.metric {
                        ErrorMetric::Endpoint => step_through(model, &cfg, &mut paths, &setup.x0, setup.horizon, |_| {})
                            .map(|(s, _)| setup.norm.distance(&s.x, reference.endpoint())),
                        ErrorMetric::MaxOverGrid => {
                            let steps = step_count(setup.horizon, cfg.h)?;
                            let grid = reference.grid(cfg.h, steps)?;
                            let mut worst: f64 = 0.0;
                            step_through(model, &cfg, &mut paths, &setup.x0, setup.horizon, |s| {
                                worst = worst.max(setup.norm.distance(&s.x, &grid[s.n]));
                            })
                            .map(|_| worst)
                        }
                    };
                    result.map_err(wrap(format!("{} h={}", fam.label, cfg.h)))
                })
                .collect()
        })
        .collect()
}

/// Monte Carlo estimate of `E|X(T) - X̂_{n̄}|` for every family and step size.
pub fn strong_error(
    model: &RteModel,
    setup: &StrongErrorSetup,
    families: &[SolverFamily],
) -> Result<Vec<ErrorReport>> {
    validate_setup(model, setup, families)?;
    let per_rep = map_replications(setup.execution, setup.replications, |j| {
        replication_errors(model, setup, families, j)
    });
    let per_rep: Vec<Vec<Vec<f64>>> = per_rep.into_iter().collect::<Result<_>>()?;

    let m = setup.replications;
    Ok(families
        .iter()
        .enumerate()
        .map(|(fi, fam)| {
            let mut rows: Vec<ErrorRow> = fam
                .steps
                .iter()
                .enumerate()
                .map(|(si, &h)| {
                    let values = per_rep.iter().map(|rep| rep[fi][si]);
                    let (mean, se) = mean_and_se(values, m);
                    ErrorRow {
                        h,
                        mean_abs_error: mean,
                        std_error: se,
                        replications: m,
                    }
                })
                .collect();
            rows.sort_by(|a, b| b.h.total_cmp(&a.h));
            ErrorReport {
                label: fam.label.clone(),
                theta: fam.base.theta,
                quadrature: fam.base.quadrature,
                rows,
                model: model.name().to_string(),
                seed: setup.master_seed,
            }
        })
        .collect())
}

/// Sample mean and its standard error, summed in iteration order.
pub fn mean_and_se(values: impl Iterator<Item = f64> + Clone, m: u64) -> (f64, f64) {
    let n = m as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(ln h, ln error)`.
pub fn fit_order(report: &ErrorReport) -> Result<OrderFit> {
    let points: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.h, r.mean_abs_error)).collect();
    fit_power_law(&points)
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 2 {
        return Err(RteError::Fit(format!("need at least 2 rows, got {}", points.len())));
    }
    if let Some((h, e)) = points.iter().find(|(h, e)| !(*e > 0.0) || !(*h > 0.0)) {
        return Err(RteError::Fit(format!("nonpositive value at h = {h} (error {e})")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(RteError::Fit("all rows share the same step size".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy <= f64::EPSILON * f64::EPSILON {
        1.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(OrderFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LocalErrorSample {
    pub n: usize,
    /// `|∫ f(X) ds - h φ₁(X(t_n), X(t_{n+1}), h)|`.
    pub l_abs: f64,
    /// `|Σ_k (∫ λ_k(X) ds - h φ₃(k, X(t_n), h)) ν_k|`.
    pub k_abs: f64,
    /// Jumps of the exact path inside `(t_n, t_{n+1}]`.
    pub jumps: usize,
}

/// Strong local errors of one step started from the exact solution.
pub fn local_errors(
    model: &RteModel,
    exact: &ExactTrajectory,
    config: &SolverConfig,
    n: usize,
) -> Result<LocalErrorSample> {
    let hooks = model.require_hooks()?;
    let drift_integral = hooks.drift_integral.as_ref().ok_or_else(|| {
        RteError::Unsupported(format!("model `{}` has no drift integral hook", model.name()))
    })?;
    config.validate()?;
    let h = config.h;
    let d = model.dim();
    let p = model.jump_count();
    let ta = n as f64 * h;
    let tb = (n + 1) as f64 * h;
    if tb > exact.horizon * (1.0 + 1e-12) {
        return Err(RteError::Config(format!(
            "step {n} ends at {tb}, beyond the exact trajectory horizon {}",
            exact.horizon
        )));
    }
    let tb = tb.min(exact.horizon);

    let xa = exact.state_at(ta)?;
    let xb = exact.state_at(tb)?;

    let mut drift_int = vec![0.0; d];
    let mut hazard_int = vec![0.0; p];
    let mut buf = vec![0.0; d];
    exact.for_each_piece(ta, tb, |x, len| {
        drift_integral(len, x, &mut buf);
        for (a, b) in drift_int.iter_mut().zip(&buf) {
            *a += b;
        }
        for (k, acc) in hazard_int.iter_mut().enumerate() {
            *acc += (hooks.hazard_integral[k])(len, x);
        }
        Ok(())
    })?;

    let fa = model.drift(&xa)?;
    let fb = model.drift(&xb)?;
    let theta = config.theta;
    let l: Vec<f64> = (0..d)
        .map(|i| drift_int[i] - h * ((1.0 - theta) * fa[i] + theta * fb[i]))
        .collect();

    let mut phi = vec![0.0; p];
    Phi3Workspace::new(model).evaluate(config.quadrature, model, &xa, h, &mut phi)?;
    let mut k_vec = vec![0.0; d];
    for k in 0..p {
        let mut v = phi[k];
        if config.clamp_phi3 && v < 0.0 {
            v = 0.0;
        }
        let diff = hazard_int[k] - h * v;
        for (acc, nu) in k_vec.iter_mut().zip(model.jump(k)) {
            *acc += diff * nu;
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let jumps = exact
        .jump_times
        .iter()
        .filter(|&&t| t > ta && t <= tb)
        .count();
    Ok(LocalErrorSample {
        n,
        l_abs: norm(&l),
        k_abs: norm(&k_vec),
        jumps,
    })
}

pub fn write_local_errors_csv<W: Write>(samples: &[LocalErrorSample], mut w: W) -> io::Result<()> {
    writeln!(w, "n,L_abs,K_abs")?;
    for s in samples {
        writeln!(w, "{},{},{}", s.n, s.l_abs, s.k_abs)?;
    }
    Ok(())
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A scalar test function `F` with its gradient.
#[derive(Clone)]
pub struct Observable {
    pub name: String,
    value: ValueFn,
    gradient: GradientFn,
}

impl Observable {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Observable {
            name: name.into(),
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    /// `F(x) = x_i`.
    pub fn component(i: usize) -> Self {
        Observable::new(
            format!("x_{}", i + 1),
            move |x| x[i],
            move |_, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[i] = 1.0;
            },
        )
    }

    /// `F(x) = x_i²`.
    pub fn square(i: usize) -> Self {
        Observable::new(
            format!("x_{}^2", i + 1),
            move |x| x[i] * x[i],
            move |x, g| {
                g.iter_mut().for_each(|v| *v = 0.0);
                g[i] = 2.0 * x[i];
            },
        )
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }
}

/// Generator terms at `x`: `(𝒜F(x), Σ_k λ_k(x) |F(x + ν_k) - F(x)|²)`.
fn generator_terms(model: &RteModel, obs: &Observable, x: &[f64], scratch: &mut [f64], shifted: &mut [f64]) -> Result<(f64, f64)> {
    model.eval_drift(x, scratch)?;
    obs.gradient(x, shifted);
    let drift_part: f64 = scratch.iter().zip(shifted.iter()).map(|(fi, g)| g * fi).sum();
    let fx = obs.value(x);
    let mut jump_part = 0.0;
    let mut quad = 0.0;
    for k in 0..model.jump_count() {
        let lk = model.eval_rate(k, x)?;
        for ((s, xi), nu) in shifted.iter_mut().zip(x).zip(model.jump(k)) {
            *s = xi + nu;
        }
        let df = obs.value(shifted) - fx;
        jump_part += lk * df;
        quad += lk * df * df;
    }
    let a = drift_part + jump_part;
    if !(a.is_finite() && quad.is_finite()) {
        return Err(RteError::eval("generator", x));
    }
    Ok((a, quad))
}

/// `𝒜F(x) = ∇F(x)·f(x) + Σ_k λ_k(x) (F(x + ν_k) - F(x))`.
pub fn generator_apply(model: &RteModel, obs: &Observable, x: &[f64]) -> Result<f64> {
    let d = model.dim();
    Ok(generator_terms(model, obs, x, &mut vec![0.0; d], &mut vec![0.0; d])?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MartingaleSummary {
    pub replications: u64,
    /// Mean of `M^F(T)`.
    pub mean: f64,
    pub std_error: f64,
    /// `mean / std_error`.
    pub z: f64,
    /// `E|M^F(T)|²`.
    pub second_moment_lhs: f64,
    pub lhs_std_error: f64,
    /// `E ∫ Σ_k λ_k(X) |F(X + ν_k) - F(X)|² ds`.
    pub second_moment_rhs: f64,
    pub rhs_std_error: f64,
}

impl MartingaleSummary {
    /// `(lhs - rhs) / sqrt(se_lhs² + se_rhs²)`.
    pub fn second_moment_z(&self) -> f64 {
        let se = self.lhs_std_error.hypot(self.rhs_std_error);
        if se == 0.0 {
            if self.second_moment_lhs == self.second_moment_rhs {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.second_moment_lhs - self.second_moment_rhs) / se
        }
    }
}

/// Absolute tolerance for the time integrals along one exact path.
pub const PATH_INTEGRAL_TOL: f64 = 1e-8;

/// `(M^F(T), ∫₀ᵀ Σ_k λ_k |F(X+ν_k) - F(X)|² ds)` along one exact trajectory.
pub fn martingale_increment(model: &RteModel, obs: &Observable, exact: &ExactTrajectory, x0: &[f64]) -> Result<(f64, f64)> {
    let hooks = model.require_hooks()?;
    let d = model.dim();
    let mut flowed = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut shifted = vec![0.0; d];
    let mut gen_int = 0.0;
    let mut quad_int = 0.0;
    let mut failure = None;
    for seg in &exact.segments {
        let tol = PATH_INTEGRAL_TOL * seg.duration / exact.horizon;
        let [a, q] = integrate(
            |s| {
                (hooks.flow)(s, &seg.start_state, &mut flowed);
                match generator_terms(model, obs, &flowed, &mut scratch, &mut shifted) {
                    Ok((a, q)) => [a, q],
                    Err(e) => {
                        failure.get_or_insert(e);
                        [0.0, 0.0]
                    }
                }
            },
            0.0,
            seg.duration,
            tol,
        );
        if let Some(e) = failure.take() {
            return Err(e);
        }
        gen_int += a;
        quad_int += q;
    }
    let m = obs.value(&exact.final_state) - obs.value(x0) - gen_int;
    Ok((m, quad_int))
}

/// Monte Carlo check of `E M^F(T) = 0` and of the second-moment identity.
pub fn martingale_check(
    model: &RteModel,
    obs: &Observable,
    x0: &[f64],
    horizon: f64,
    replications: u64,
    master_seed: u64,
    execution: Execution,
) -> Result<MartingaleSummary> {
    model.require_hooks()?;
    if replications < 2 {
        return Err(RteError::Config("martingale check needs at least 2 replications".into()));
    }
    let samples = map_replications(execution, replications, |j| {
        let mut paths = PathBundle::new(master_seed, j, model.jump_count());
        let exact = exact_trajectory(model, &mut paths, x0, horizon)?;
        martingale_increment(model, obs, &exact, x0).map_err(|e| RteError::Replication {
            replication: j,
            variant: "martingale".into(),
            source: Box::new(e),
        })
    });
    let samples: Vec<(f64, f64)> = samples.into_iter().collect::<Result<_>>()?;
    let (mean, se) = mean_and_se(samples.iter().map(|s| s.0), replications);
    let (lhs, lhs_se) = mean_and_se(samples.iter().map(|s| s.0 * s.0), replications);
    let (rhs, rhs_se) = mean_and_se(samples.iter().map(|s| s.1), replications);
    Ok(MartingaleSummary {
        replications,
        mean,
        std_error: se,
        z: if se > 0.0 { mean / se } else { 0.0 },
        second_moment_lhs: lhs,
        lhs_std_error: lhs_se,
        second_moment_rhs: rhs,
        rhs_std_error: rhs_se,
    })
}

/// Convenience: the full recorded trajectory of one variant for one replication.
pub fn variant_trajectory(
    model: &RteModel,
    config: &SolverConfig,
    x0: &[f64],
    horizon: f64,
    master_seed: u64,
    replication: u64,
) -> Result<crate::stepper::Trajectory> {
    let mut paths = PathBundle::new(master_seed, replication, model.jump_count());
    solve_trajectory(model, config, &mut paths, x0, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_linear_scalar;
    use approx::assert_relative_eq;

    fn report(points: &[(f64, f64)]) -> ErrorReport {
        ErrorReport {
            label: "t".into(),
            theta: 0.0,
            quadrature: Quadrature::Euler,
            rows: points
                .iter()
                .map(|&(h, e)| ErrorRow {
                    h,
                    mean_abs_error: e,
                    std_error: 0.0,
                    replications: 2,
                })
                .collect(),
            model: "m".into(),
            seed: 0,
        }
    }

    #[test]
    fn fit_examples() {
        let f = fit_order(&report(&[(0.1, 0.1), (0.025, 0.05)])).unwrap();
        assert_relative_eq!(f.slope, 0.5, max_relative = 1e-12);
        let f = fit_order(&report(&[(0.1, 0.01), (0.01, 0.001)])).unwrap();
        assert_relative_eq!(f.slope, 1.0, max_relative = 1e-12);
        let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.1, 0.01].iter().map(|&h| (h, 3.7 * f64::powf(h, 1.3))).collect();
        let f = fit_order(&report(&pts)).unwrap();
        assert_relative_eq!(f.slope, 1.3, max_relative = 1e-12);
        assert_relative_eq!(f.r_squared, 1.0, max_relative = 1e-12);
        assert_relative_eq!(f.intercept, 3.7f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn fit_rejects_bad_rows() {
        let err = fit_order(&report(&[(0.1, 0.1), (0.05, 0.0)])).unwrap_err();
        assert!(err.to_string().contains("0.05"));
        assert!(fit_order(&report(&[(0.1, 0.1)])).is_err());
    }

    #[test]
    fn generator_examples() {
        let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap();
        let g = generator_apply(&m, &Observable::component(0), &[10.0]).unwrap();
        assert_relative_eq!(g, -1.0, max_relative = 1e-12);
        let c = Observable::new("c", |_| 4.2, |_, g| g.iter_mut().for_each(|v| *v = 0.0));
        assert_eq!(generator_apply(&m, &c, &[10.0]).unwrap(), 0.0);
        let z = m.without_jump_rates();
        let g = generator_apply(&z, &Observable::square(0), &[3.0]).unwrap();
        assert_relative_eq!(g, 2.0 * 3.0 * -4.5, max_relative = 1e-14);
    }

    #[test]
    fn local_error_jump_free_euler() {
        let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap();
        let id = crate::poisson::StreamId { replication: 0, process: 0 };
        let path = crate::poisson::PoissonPath::with_prefix(vec![1400.0], 0, id).unwrap();
        let mut paths = PathBundle::from_paths(0, 0, vec![path]);
        let exact = exact_trajectory(&m, &mut paths, &[10.0], 1.0).unwrap();
        let s = local_errors(&m, &exact, &SolverConfig::new(0.0, 0.1, Quadrature::Euler), 0).unwrap();
        assert_eq!(s.jumps, 0);
        let integral = 2000.0 * (1.0 - (-0.15f64).exp()) / 1.5;
        assert_relative_eq!(integral, 185.723, max_relative = 1e-5);
        assert_relative_eq!(s.k_abs, (integral - 200.0).abs() * 0.007, max_relative = 1e-10);
        assert_relative_eq!(s.k_abs, 0.09994, max_relative = 1e-3);
        // drift part: ∫ -1.5 x ds = -10 (1 - e^{-0.15}); explicit φ₁ = -15
        let l = (-10.0 * (1.0 - (-0.15f64).exp()) + 1.5).abs();
        assert_relative_eq!(s.l_abs, l, max_relative = 1e-10);
    }

    #[test]
    fn local_error_trivial_cases() {
        let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap().without_jump_rates();
        let mut paths = PathBundle::new(0, 0, 1);
        let exact = exact_trajectory(&m, &mut paths, &[10.0], 1.0).unwrap();
        let s = local_errors(&m, &exact, &SolverConfig::new(0.5, 0.1, Quadrature::Midpoint), 4).unwrap();
        assert_eq!(s.k_abs, 0.0);
        assert!(local_errors(&m, &exact, &SolverConfig::new(0.5, 0.1, Quadrature::Midpoint), 10).is_err());
    }

    #[test]
    fn zero_drift_zero_jump_errors_vanish() {
        let m = RteModel::new(
            "still",
            1,
            |_, out| out[0] = 0.0,
            vec![crate::model::Rate::linear(vec![1.0])],
            vec![vec![0.0]],
        )
        .unwrap();
        let fam = SolverFamily::new(0.0, Quadrature::Euler, vec![0.5, 0.25]);
        let mut setup = StrongErrorSetup::new(ReferenceSolver::Fine(ReferenceSpec::new(0.125)), vec![1.0], 2.0, 4, 1);
        setup.execution = Execution::Sequential;
        let r = strong_error(&m, &setup, &[fam]).unwrap();
        assert!(r[0].rows.iter().all(|row| row.mean_abs_error == 0.0 && row.std_error == 0.0));
    }
}
