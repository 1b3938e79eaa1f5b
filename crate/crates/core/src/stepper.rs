//! Fixed-step Θ-Maruyama integration.
//!
//! One step from `X_n` with internal clocks `τ_k` reads
//!
//! ```text
//! r_k     = h φ₃(k, X_n, h)
//! ΔY_k    = Y_k(τ_k + r_k) - Y_k(τ_k)
//! X_{n+1} = X_n + hθ f(X_{n+1}) + h(1-θ) f(X_n) + Σ_k ΔY_k ν_k
//! τ_k    += r_k
//! ```
//!
//! The implicit equation is solved by Picard iteration started from the
//! explicit predictor; the negativity policy is applied to the solved
//! iterate before the clocks advance.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RteError};
use crate::model::RteModel;
use crate::poisson::PathBundle;

/// Quadrature rule for the internal clock increment `∫ λ_k(X) ds ≈ h φ₃`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    Euler,
    Midpoint,
    Trapezoidal,
    ImprovedMidpoint,
    ImprovedTrapezoidal,
}

impl Quadrature {
    pub const ALL: [Quadrature; 5] = [
        Quadrature::Euler,
        Quadrature::Midpoint,
        Quadrature::Trapezoidal,
        Quadrature::ImprovedMidpoint,
        Quadrature::ImprovedTrapezoidal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quadrature::Euler => "euler",
            Quadrature::Midpoint => "midpoint",
            Quadrature::Trapezoidal => "trapezoidal",
            Quadrature::ImprovedMidpoint => "improved-midpoint",
            Quadrature::ImprovedTrapezoidal => "improved-trapezoidal",
        }
    }
}

impl fmt::Display for Quadrature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quadrature {
    type Err = RteError;

    fn from_str(s: &str) -> Result<Self> {
        Quadrature::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| RteError::Config(format!("unknown quadrature rule `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativityPolicy {
    /// Negative components are set to zero after every step.
    #[default]
    ResetToZero,
    Allow,
    Error,
}

impl NegativityPolicy {
    pub fn name(self) -> &'static str {
        match self {
            NegativityPolicy::ResetToZero => "reset-to-zero",
            NegativityPolicy::Allow => "allow",
            NegativityPolicy::Error => "error",
        }
    }
}

impl FromStr for NegativityPolicy {
    type Err = RteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset-to-zero" => Ok(NegativityPolicy::ResetToZero),
            "allow" => Ok(NegativityPolicy::Allow),
            "error" => Ok(NegativityPolicy::Error),
            _ => Err(RteError::Config(format!("unknown negativity policy `{s}`"))),
        }
    }
}

pub const DEFAULT_FP_TOL: f64 = 1e-12;
pub const DEFAULT_FP_MAX_ITER: usize = 100;

fn default_fp_tol() -> f64 {
    DEFAULT_FP_TOL
}
fn default_fp_max_iter() -> usize {
    DEFAULT_FP_MAX_ITER
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub theta: f64,
    pub h: f64,
    pub quadrature: Quadrature,
    /// Picard stopping tolerance on `max_i |y_new - y|`, relative to `1 + |y|∞`.
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "default_fp_max_iter")]
    pub fp_max_iter: usize,
    #[serde(default)]
    pub negativity: NegativityPolicy,
    #[serde(default = "default_true")]
    pub clamp_phi3: bool,
}

impl SolverConfig {
    pub fn new(theta: f64, h: f64, quadrature: Quadrature) -> Self {
        SolverConfig {
            theta,
            h,
            quadrature,
            fp_tol: DEFAULT_FP_TOL,
            fp_max_iter: DEFAULT_FP_MAX_ITER,
            negativity: NegativityPolicy::ResetToZero,
            clamp_phi3: true,
        }
    }

    pub fn with_h(&self, h: f64) -> Self {
        SolverConfig { h, ..self.clone() }
    }

    pub fn with_negativity(mut self, policy: NegativityPolicy) -> Self {
        self.negativity = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(RteError::Config(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(RteError::Config(format!("step size must be positive, got {}", self.h)));
        }
        if !(self.fp_tol > 0.0) {
            return Err(RteError::Config(format!("fp_tol must be positive, got {}", self.fp_tol)));
        }
        if self.fp_max_iter == 0 {
            return Err(RteError::Config("fp_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Warning text when the implicit step violates `h θ L_f < 1` for the
    /// model's declared drift Lipschitz bound.
    pub fn step_size_warning(&self, model: &RteModel) -> Option<String> {
        let lf = model.lipschitz_f?;
        if self.theta == 0.0 {
            return None;
        }
        let product = self.h * self.theta * lf;
        (product >= 1.0).then(|| {
            format!(
                "h·θ·L_f = {product} >= 1 violates the implicit step-size restriction (h = {}, θ = {}, L_f = {lf})",
                self.h, self.theta
            )
        })
    }

    /// Short identifier such as `theta0.5-trapezoidal-h0.025`.
    pub fn label(&self) -> String {
        format!("theta{}-{}-h{}", self.theta, self.quadrature, self.h)
    }
}

/// Scratch buffers for evaluating φ₃ for all processes at once.
#[derive(Clone, Debug)]
pub struct Phi3Workspace {
    rates: Vec<f64>,
    drift: Vec<f64>,
    drift_jump: Vec<f64>,
    point: Vec<f64>,
    shifted: Vec<Vec<f64>>,
}

impl Phi3Workspace {
    pub fn new(model: &RteModel) -> Self {
        let d = model.dim();
        let p = model.jump_count();
        Phi3Workspace {
            rates: vec![0.0; p],
            drift: vec![0.0; d],
            drift_jump: vec![0.0; d],
            point: vec![0.0; d],
            shifted: vec![vec![0.0; d]; p],
        }
    }

    /// Unclamped φ₃(k, x, h) for every k, written into `out`.
    pub fn evaluate(
        &mut self,
        rule: Quadrature,
        model: &RteModel,
        x: &[f64],
        h: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let p = model.jump_count();
        for j in 0..p {
            self.rates[j] = model.eval_rate(j, x)?;
        }
        if rule == Quadrature::Euler {
            out.copy_from_slice(&self.rates);
            return Ok(());
        }

        model.eval_drift(x, &mut self.drift)?;
        self.drift_jump.copy_from_slice(&self.drift);
        for j in 0..p {
            let lj = self.rates[j];
            for (v, nu) in self.drift_jump.iter_mut().zip(model.jump(j)) {
                *v += lj * nu;
            }
        }
        let improved = matches!(
            rule,
            Quadrature::ImprovedMidpoint | Quadrature::ImprovedTrapezoidal
        );
        if improved {
            for j in 0..p {
                for ((s, xi), nu) in self.shifted[j].iter_mut().zip(x).zip(model.jump(j)) {
                    *s = xi + nu;
                }
            }
        }

        for k in 0..p {
            if let Some(v) = self.affine_value(rule, model, k, x, h) {
                out[k] = v;
                continue;
            }
            let lk = self.rates[k];
            out[k] = match rule {
                Quadrature::Euler => unreachable!(),
                Quadrature::Midpoint => {
                    self.set_point(x, 0.5 * h, true);
                    model.eval_rate(k, &self.point)?
                }
                Quadrature::Trapezoidal => {
                    self.set_point(x, h, true);
                    0.5 * lk + 0.5 * model.eval_rate(k, &self.point)?
                }
                Quadrature::ImprovedMidpoint => {
                    self.set_point(x, 0.5 * h, false);
                    model.eval_rate(k, &self.point)? + self.jump_correction(model, k, h)?
                }
                Quadrature::ImprovedTrapezoidal => {
                    self.set_point(x, h, false);
                    0.5 * lk
                        + 0.5 * model.eval_rate(k, &self.point)?
                        + self.jump_correction(model, k, h)?
                }
            };
            if !out[k].is_finite() {
                return Err(RteError::eval(format!("phi3 {rule} for process {k}"), x));
            }
        }
        Ok(())
    }

    /// `point = x + s·(f(x) [+ Σ λ_j ν_j])`.
    fn set_point(&mut self, x: &[f64], s: f64, with_jumps: bool) {
        let dir = if with_jumps { &self.drift_jump } else { &self.drift };
        for ((p, xi), v) in self.point.iter_mut().zip(x).zip(dir) {
            *p = xi + s * v;
        }
    }

    /// `h/2 Σ_j λ_j(x) (λ_k(x + ν_j) - λ_k(x))`.
    fn jump_correction(&self, model: &RteModel, k: usize, h: f64) -> Result<f64> {
        let lk = self.rates[k];
        let mut acc = 0.0;
        for j in 0..model.jump_count() {
            let lj = self.rates[j];
            if lj != 0.0 {
                acc += lj * (model.eval_rate(k, &self.shifted[j])? - lk);
            }
        }
        Ok(0.5 * h * acc)
    }

    /// For an affine rate all four second-order rules reduce to
    /// `λ_k(x) + h/2 ∇λ_k · (f(x) + Σ_j λ_j(x) ν_j)` as long as no evaluation
    /// point of the rule falls where the rate clamps. Returns that value, or
    /// `None` when the rate is not affine or clamping would be active.
    fn affine_value(
        &self,
        rule: Quadrature,
        model: &RteModel,
        k: usize,
        x: &[f64],
        h: f64,
    ) -> Option<f64> {
        let (offset, g) = model.rate(k).as_affine()?;
        let raw = |base: &[f64], s: f64, dir: &[f64]| -> f64 {
            offset
                + g.iter()
                    .zip(base)
                    .zip(dir)
                    .map(|((gi, b), v)| gi * (b + s * v))
                    .sum::<f64>()
        };
        let at = |base: &[f64]| offset + g.iter().zip(base).map(|(gi, b)| gi * b).sum::<f64>();
        if at(x) < 0.0 {
            return None;
        }
        let ok = match rule {
            Quadrature::Euler => return None,
            Quadrature::Midpoint => raw(x, 0.5 * h, &self.drift_jump) >= 0.0,
            Quadrature::Trapezoidal => raw(x, h, &self.drift_jump) >= 0.0,
            Quadrature::ImprovedMidpoint | Quadrature::ImprovedTrapezoidal => {
                let s = if rule == Quadrature::ImprovedMidpoint { 0.5 * h } else { h };
                raw(x, s, &self.drift) >= 0.0
                    && (0..model.jump_count())
                        .all(|j| self.rates[j] == 0.0 || at(&self.shifted[j]) >= 0.0)
            }
        };
        if !ok {
            return None;
        }
        let slope: f64 = g.iter().zip(&self.drift_jump).map(|(gi, v)| gi * v).sum();
        Some(self.rates[k] + 0.5 * h * slope)
    }
}

/// Unclamped φ₃(k, x, h) of `rule`.
pub fn phi3(rule: Quadrature, model: &RteModel, k: usize, x: &[f64], h: f64) -> Result<f64> {
    let mut ws = Phi3Workspace::new(model);
    let mut out = vec![0.0; model.jump_count()];
    ws.evaluate(rule, model, x, h, &mut out)?;
    Ok(out[k])
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepperState {
    pub n: usize,
    pub h: f64,
    pub x: Vec<f64>,
    /// Internal clocks `τ̂_k(t_n)`.
    pub clocks: Vec<f64>,
    /// Cumulative Poisson counts `Y_k(τ̂_k(t_n))`.
    pub jump_counts: Vec<u64>,
}

impl StepperState {
    pub fn initial(x0: &[f64], h: f64, processes: usize) -> Self {
        StepperState {
            n: 0,
            h,
            x: x0.to_vec(),
            clocks: vec![0.0; processes],
            jump_counts: vec![0; processes],
        }
    }

    /// `t_n = n·h`, never accumulated.
    pub fn t(&self) -> f64 {
        self.n as f64 * self.h
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StepDiagnostics {
    pub phi3_clamps: u64,
    pub negativity_resets: u64,
    pub picard_iterations: u64,
    pub max_picard_iterations: usize,
}

/// Reusable single-replication integrator.
pub struct Stepper<'a> {
    model: &'a RteModel,
    config: &'a SolverConfig,
    ws: Phi3Workspace,
    phi: Vec<f64>,
    f_n: Vec<f64>,
    jump: Vec<f64>,
    rhs: Vec<f64>,
    y: Vec<f64>,
    fy: Vec<f64>,
    pub diagnostics: StepDiagnostics,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a RteModel, config: &'a SolverConfig) -> Result<Self> {
        config.validate()?;
        let d = model.dim();
        Ok(Stepper {
            model,
            config,
            ws: Phi3Workspace::new(model),
            phi: vec![0.0; model.jump_count()],
            f_n: vec![0.0; d],
            jump: vec![0.0; d],
            rhs: vec![0.0; d],
            y: vec![0.0; d],
            fy: vec![0.0; d],
            diagnostics: StepDiagnostics::default(),
        })
    }

    pub fn step(&mut self, state: &mut StepperState, paths: &mut PathBundle) -> Result<()> {
        let model = self.model;
        let cfg = self.config;
        let h = cfg.h;
        let p = model.jump_count();
        if paths.len() != p {
            return Err(RteError::Config(format!(
                "path bundle has {} processes, model has {p}",
                paths.len()
            )));
        }

        self.ws
            .evaluate(cfg.quadrature, model, &state.x, h, &mut self.phi)?;
        self.jump.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..p {
            let mut r = h * self.phi[k];
            if r < 0.0 && cfg.clamp_phi3 {
                r = 0.0;
                self.diagnostics.phi3_clamps += 1;
            }
            self.phi[k] = r;
            let tau = state.clocks[k];
            let dy = if r > 0.0 {
                paths.path(k).increment(tau, tau + r)?
            } else {
                0
            };
            if dy > 0 {
                state.jump_counts[k] += dy;
                let dy = dy as f64;
                for (j, nu) in self.jump.iter_mut().zip(model.jump(k)) {
                    *j += dy * nu;
                }
            }
        }

        model.eval_drift(&state.x, &mut self.f_n)?;
        let theta = cfg.theta;
        if theta == 0.0 {
            for ((x, f), j) in state.x.iter_mut().zip(&self.f_n).zip(&self.jump) {
                *x = *x + h * f + j;
            }
        } else {
            for i in 0..state.x.len() {
                self.rhs[i] = state.x[i] + h * (1.0 - theta) * self.f_n[i] + self.jump[i];
                self.y[i] = state.x[i] + h * self.f_n[i] + self.jump[i];
            }
            let mut iterations = 0;
            loop {
                iterations += 1;
                model.eval_drift(&self.y, &mut self.fy)?;
                let mut diff: f64 = 0.0;
                let mut scale: f64 = 0.0;
                for i in 0..self.y.len() {
                    let next = self.rhs[i] + h * theta * self.fy[i];
                    diff = diff.max((next - self.y[i]).abs());
                    scale = scale.max(next.abs());
                    self.y[i] = next;
                }
                if !diff.is_finite() {
                    return Err(RteError::ImplicitSolve {
                        step: state.n,
                        iterations,
                        residual: diff,
                    });
                }
                if diff <= cfg.fp_tol * (1.0 + scale) {
                    break;
                }
                if iterations >= cfg.fp_max_iter {
                    return Err(RteError::ImplicitSolve {
                        step: state.n,
                        iterations,
                        residual: diff,
                    });
                }
            }
            self.diagnostics.picard_iterations += iterations as u64;
            self.diagnostics.max_picard_iterations =
                self.diagnostics.max_picard_iterations.max(iterations);
            state.x.copy_from_slice(&self.y);
        }

        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(RteError::eval(format!("step {}", state.n), &state.x));
        }
        for (i, x) in state.x.iter_mut().enumerate() {
            if *x < 0.0 {
                match cfg.negativity {
                    NegativityPolicy::ResetToZero => {
                        *x = 0.0;
                        self.diagnostics.negativity_resets += 1;
                    }
                    NegativityPolicy::Allow => {}
                    NegativityPolicy::Error => {
                        return Err(RteError::Domain {
                            step: state.n,
                            component: i,
                            value: *x,
                        })
                    }
                }
            }
        }

        for (tau, r) in state.clocks.iter_mut().zip(&self.phi) {
            *tau += r;
        }
        state.n += 1;
        Ok(())
    }
}

/// One Θ-Maruyama step.
pub fn step(
    state: &StepperState,
    model: &RteModel,
    config: &SolverConfig,
    paths: &mut PathBundle,
) -> Result<StepperState> {
    let mut next = state.clone();
    Stepper::new(model, config)?.step(&mut next, paths)?;
    Ok(next)
}

/// Number of steps `T/h`, which must be a positive integer within 1e-9 relative.
pub fn step_count(horizon: f64, h: f64) -> Result<usize> {
    let ratio = horizon / h;
    let n = ratio.round();
    if !(horizon > 0.0 && horizon.is_finite()) || n < 1.0 || (n * h - horizon).abs() > 1e-9 * horizon {
        return Err(RteError::Grid { horizon, h });
    }
    Ok(n as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub model: String,
    pub config: SolverConfig,
    pub seed: u64,
    pub replication: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    dim: usize,
    processes: usize,
    states: Vec<f64>,
    clocks: Vec<f64>,
    pub diagnostics: StepDiagnostics,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn clocks(&self, i: usize) -> &[f64] {
        &self.clocks[i * self.processes..(i + 1) * self.processes]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn clocks_final(&self) -> &[f64] {
        self.clocks(self.len() - 1)
    }

    pub fn step_count(&self) -> usize {
        self.len() - 1
    }

    /// CSV with header `t,x_1..x_d,tau_1..tau_p`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        header.extend((1..=self.processes).map(|k| format!("tau_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            write!(w, "{}", self.grid[i])?;
            for v in self.state(i).iter().chain(self.clocks(i)) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs `T/h` steps from `x0`, calling `observe` on the initial state and
/// after every step. Returns the final state.
pub fn integrate(
    model: &RteModel,
    config: &SolverConfig,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
    mut observe: impl FnMut(&StepperState),
) -> Result<(StepperState, StepDiagnostics)> {
    config.validate()?;
    let steps = step_count(horizon, config.h)?;
    if x0.len() != model.dim() || x0.iter().any(|v| !v.is_finite()) {
        return Err(RteError::Config(format!(
            "initial state {x0:?} must be finite with {} components",
            model.dim()
        )));
    }
    let mut stepper = Stepper::new(model, config)?;
    let mut state = StepperState::initial(x0, config.h, model.jump_count());
    observe(&state);
    for _ in 0..steps {
        stepper.step(&mut state, paths)?;
        observe(&state);
    }
    Ok((state, stepper.diagnostics))
}

pub fn solve_trajectory(
    model: &RteModel,
    config: &SolverConfig,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
) -> Result<Trajectory> {
    let mut grid = Vec::new();
    let mut states = Vec::new();
    let mut clocks = Vec::new();
    let (_, diagnostics) = integrate(model, config, paths, x0, horizon, |s| {
        grid.push(s.t());
        states.extend_from_slice(&s.x);
        clocks.extend_from_slice(&s.clocks);
    })?;
    Ok(Trajectory {
        grid,
        dim: model.dim(),
        processes: model.jump_count(),
        states,
        clocks,
        diagnostics,
        meta: TrajectoryMeta {
            model: model.name().to_string(),
            config: config.clone(),
            seed: paths.master_seed(),
            replication: paths.replication(),
        },
    })
}

/// Endpoint `X̂_{n̄}` without recording the path.
pub fn solve_endpoint(
    model: &RteModel,
    config: &SolverConfig,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
) -> Result<Vec<f64>> {
    Ok(integrate(model, config, paths, x0, horizon, |_| {})?.0.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_bacteriophage, builtin_linear_scalar, builtin_quadratic_rate};
    use crate::poisson::{PoissonPath, StreamId};
    use approx::assert_relative_eq;

    fn set1() -> RteModel {
        builtin_linear_scalar(1.5, 200.0, 0.007).unwrap()
    }

    fn prefixed(epochs: Vec<f64>) -> PathBundle {
        let id = StreamId {
            replication: 0,
            process: 0,
        };
        PathBundle::from_paths(0, 0, vec![PoissonPath::with_prefix(epochs, 0, id).unwrap()])
    }

    #[test]
    fn phi3_examples() {
        let m = set1();
        for h in [0.001, 0.01, 0.5] {
            assert_eq!(phi3(Quadrature::Euler, &m, 0, &[10.0], h).unwrap(), 2000.0);
        }
        let mid = phi3(Quadrature::Midpoint, &m, 0, &[10.0], 0.01).unwrap();
        assert_relative_eq!(mid, 1999.0, max_relative = 1e-12);
        let imid = phi3(Quadrature::ImprovedMidpoint, &m, 0, &[10.0], 0.01).unwrap();
        assert_relative_eq!(imid, 1999.0, max_relative = 1e-12);
    }

    #[test]
    fn second_order_rules_coincide_bitwise_on_affine_rate() {
        let m = set1();
        for x in [0.3, 10.0, 123.4] {
            for h in [0.25, 0.01, 1.0 / 128.0] {
                let v: Vec<f64> = Quadrature::ALL[1..]
                    .iter()
                    .map(|q| phi3(*q, &m, 0, &[x], h).unwrap())
                    .collect();
                assert!(v.iter().all(|a| a.to_bits() == v[0].to_bits()), "{v:?}");
            }
        }
    }

    #[test]
    fn affine_shortcut_matches_generic_formulas() {
        // Bacteriophage: rates 0..3 affine, rate 3 bilinear; compare the shortcut
        // against the rule definitions written out by hand.
        let m = builtin_bacteriophage();
        let x = [20.0, 200.0, 10_000.0];
        let h = 0.01;
        let f = m.drift(&x).unwrap();
        let lam: Vec<f64> = (0..4).map(|k| m.eval_rate(k, &x).unwrap()).collect();
        let mut v = f.clone();
        for j in 0..4 {
            for i in 0..3 {
                v[i] += lam[j] * m.jump(j)[i];
            }
        }
        let shift = |s: f64, dir: &[f64]| -> Vec<f64> { (0..3).map(|i| x[i] + s * dir[i]).collect() };
        let corr = |k: usize| -> f64 {
            0.5 * h
                * (0..4)
                    .map(|j| {
                        let xs: Vec<f64> = (0..3).map(|i| x[i] + m.jump(j)[i]).collect();
                        lam[j] * (m.eval_rate(k, &xs).unwrap() - lam[k])
                    })
                    .sum::<f64>()
        };
        for k in 0..4 {
            let r = |y: &[f64]| m.eval_rate(k, y).unwrap();
            let expect = [
                r(&shift(0.5 * h, &v)),
                0.5 * lam[k] + 0.5 * r(&shift(h, &v)),
                r(&shift(0.5 * h, &f)) + corr(k),
                0.5 * lam[k] + 0.5 * r(&shift(h, &f)) + corr(k),
            ];
            for (q, e) in Quadrature::ALL[1..].iter().zip(expect) {
                let got = phi3(*q, &m, k, &x, h).unwrap();
                assert_relative_eq!(got, e, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn improved_rules_differ_for_quadratic_rate() {
        let m = builtin_quadratic_rate(1.0, 10.0, 0.01).unwrap();
        let x = [1.0];
        let h = 0.1;
        // f = -x, λ = 10 x², ν = 0.01, λ(x) = 10
        let mid = phi3(Quadrature::Midpoint, &m, 0, &x, h).unwrap();
        let p = 1.0 + 0.05 * (-1.0 + 10.0 * 0.01);
        assert_relative_eq!(mid, 10.0 * p * p, max_relative = 1e-14);
        let imid = phi3(Quadrature::ImprovedMidpoint, &m, 0, &x, h).unwrap();
        let e = 10.0 * 0.95 * 0.95 + 0.05 * 10.0 * (10.0 * 1.01 * 1.01 - 10.0);
        assert_relative_eq!(imid, e, max_relative = 1e-14);
        assert!(mid != imid);
    }

    #[test]
    fn explicit_step_without_jumps() {
        let m = set1();
        // first epoch far beyond the clock increment 0.1 * 2000
        let mut paths = prefixed(vec![1e6]);
        let s0 = StepperState::initial(&[10.0], 0.1, 1);
        let s1 = step(&s0, &m, &SolverConfig::new(0.0, 0.1, Quadrature::Euler), &mut paths).unwrap();
        assert_eq!(s1.x, vec![8.5]);
        assert_eq!(s1.clocks, vec![200.0]);
        assert_eq!(s1.jump_counts, vec![0]);
        assert_eq!(s1.n, 1);
    }

    #[test]
    fn implicit_euler_step_matches_closed_form() {
        let m = set1();
        let mut paths = prefixed(vec![1.0, 2.0, 3.0, 500.0]);
        let s0 = StepperState::initial(&[10.0], 0.1, 1);
        let s1 = step(&s0, &m, &SolverConfig::new(1.0, 0.1, Quadrature::Euler), &mut paths).unwrap();
        assert_eq!(s1.jump_counts, vec![3]);
        let exact = (10.0 + 3.0 * 0.007) / 1.15;
        assert!((s1.x[0] - exact).abs() < 1e-10, "{} vs {exact}", s1.x[0]);
        assert_relative_eq!(exact, 8.713913043478262, max_relative = 1e-15);
    }

    #[test]
    fn negativity_policies() {
        // drift pushes component 2 from 0.2 to -0.3 in one explicit step
        let m = RteModel::new(
            "push",
            2,
            |_, out| {
                out[0] = 0.0;
                out[1] = -5.0;
            },
            vec![crate::model::Rate::linear(vec![0.0, 0.0])],
            vec![vec![1.0, 0.0]],
        )
        .unwrap();
        let s0 = StepperState::initial(&[1.0, 0.2], 0.1, 1);
        let cfg = SolverConfig::new(0.0, 0.1, Quadrature::Euler);
        let mut paths = PathBundle::new(0, 0, 1);
        let allow = step(&s0, &m, &cfg.clone().with_negativity(NegativityPolicy::Allow), &mut paths).unwrap();
        assert_relative_eq!(allow.x[1], -0.3, max_relative = 1e-12);
        let reset = step(&s0, &m, &cfg, &mut paths).unwrap();
        assert_eq!(reset.x, vec![1.0, 0.0]);
        let err = step(&s0, &m, &cfg.clone().with_negativity(NegativityPolicy::Error), &mut paths).unwrap_err();
        assert!(matches!(err, RteError::Domain { component: 1, .. }));
    }

    #[test]
    fn picard_failure_reports_residual() {
        let m = set1();
        let mut cfg = SolverConfig::new(1.0, 2.0, Quadrature::Euler);
        cfg.fp_max_iter = 50;
        let mut paths = prefixed(vec![1e9]);
        let s0 = StepperState::initial(&[10.0], 2.0, 1);
        // hθα = 3 > 1: Picard diverges
        match step(&s0, &m, &cfg, &mut paths).unwrap_err() {
            RteError::ImplicitSolve { iterations, .. } => assert!(iterations <= 50),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn crank_nicolson_step_without_rates() {
        let m = set1().without_jump_rates();
        let mut paths = PathBundle::new(0, 0, 1);
        let traj = solve_trajectory(
            &m,
            &SolverConfig::new(0.5, 0.5, Quadrature::Trapezoidal),
            &mut paths,
            &[10.0],
            0.5,
        )
        .unwrap();
        assert_relative_eq!(traj.final_state()[0], 6.25 / 1.375, max_relative = 1e-11);
        assert_eq!(traj.clocks_final(), &[0.0]);
    }

    #[test]
    fn implicit_equals_explicit_when_drift_vanishes() {
        let m = RteModel::new(
            "pure-jump",
            1,
            |_, out| out[0] = 0.0,
            vec![crate::model::Rate::linear(vec![3.0])],
            vec![vec![0.5]],
        )
        .unwrap();
        for theta in [0.25, 0.5, 1.0] {
            let a = solve_trajectory(&m, &SolverConfig::new(0.0, 0.1, Quadrature::Midpoint), &mut PathBundle::new(4, 0, 1), &[2.0], 3.0).unwrap();
            let b = solve_trajectory(&m, &SolverConfig::new(theta, 0.1, Quadrature::Midpoint), &mut PathBundle::new(4, 0, 1), &[2.0], 3.0).unwrap();
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn grid_validation() {
        assert_eq!(step_count(5.0, 0.25).unwrap(), 20);
        assert_eq!(step_count(10.0, 1.0 / 320.0).unwrap(), 3200);
        assert_eq!(step_count(1.0, 0.1).unwrap(), 10);
        assert!(matches!(step_count(1.0, 0.3), Err(RteError::Grid { .. })));
        assert!(step_count(1.0, 2.0).is_err());
    }

    #[test]
    fn grid_times_are_multiples_of_h() {
        let m = set1();
        let t = solve_trajectory(&m, &SolverConfig::new(0.0, 0.1, Quadrature::Euler), &mut PathBundle::new(1, 0, 1), &[10.0], 5.0).unwrap();
        assert_eq!(t.len(), 51);
        for (i, ti) in t.grid.iter().enumerate() {
            assert_eq!(*ti, i as f64 * 0.1);
        }
        assert_eq!(*t.grid.last().unwrap(), 50.0 * 0.1);
    }

    #[test]
    fn step_size_warning() {
        let m = set1();
        let w = SolverConfig::new(1.0, 1.0, Quadrature::Euler).step_size_warning(&m);
        assert!(w.unwrap().contains("1.5"));
        assert!(SolverConfig::new(0.0, 100.0, Quadrature::Euler).step_size_warning(&m).is_none());
        assert!(SolverConfig::new(1.0, 0.5, Quadrature::Euler).step_size_warning(&m).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(1.5, 0.1, Quadrature::Euler).validate().is_err());
        assert!(SolverConfig::new(0.5, 0.0, Quadrature::Euler).validate().is_err());
        assert!("simpson".parse::<Quadrature>().is_err());
        assert_eq!("improved-trapezoidal".parse::<Quadrature>().unwrap(), Quadrature::ImprovedTrapezoidal);
    }

    #[test]
    fn csv_layout() {
        let m = builtin_bacteriophage();
        let t = solve_trajectory(&m, &SolverConfig::new(0.0, 0.5, Quadrature::Euler), &mut PathBundle::new(1, 0, 4), &[20.0, 200.0, 10_000.0], 1.0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1,x_2,x_3,tau_1,tau_2,tau_3,tau_4");
        assert_eq!(lines.next().unwrap(), "0,20,200,10000,0,0,0,0");
        assert_eq!(text.lines().count(), 4);
    }
}
