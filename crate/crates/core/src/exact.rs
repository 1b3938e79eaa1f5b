//! Exact simulation by random time change.
//!
//! Between jumps the state follows the flow `φ(t, x)` and each internal
//! clock grows by the cumulative hazard `Λ_k(t; x)`. Process `k` fires when
//! its clock reaches the next epoch of `Y_k`, so the time to that event is
//! `Λ_k^{-1}(S - τ_k; x)`. Driving the construction with the same
//! [`PathBundle`] as a fixed-step solver couples the two pathwise.
//!
//! Models without closed-form hooks use [`reference_trajectory`], a fine-step
//! Θ-Maruyama run on the shared paths.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RteError};
use crate::model::{AnalyticHooks, RteModel, HOOK_TOLERANCE};
use crate::poisson::PathBundle;
use crate::stepper::{solve_trajectory, step_count, Quadrature, SolverConfig, Trajectory};

pub const DEFAULT_MAX_JUMPS: usize = 10_000_000;

/// Next event from state `x` with clocks `clocks`: the firing process (lowest
/// index on ties) and the waiting time, or `(None, ∞)` if no clock will ever
/// reach its next epoch.
pub fn next_jump(
    model: &RteModel,
    x: &[f64],
    clocks: &[f64],
    paths: &mut PathBundle,
) -> Result<(Option<usize>, f64)> {
    let hooks = model.require_hooks()?;
    let mut best: (Option<usize>, f64) = (None, f64::INFINITY);
    for k in 0..model.jump_count() {
        let delta = paths.path(k).next_epoch_after(clocks[k]) - clocks[k];
        let t = (hooks.hazard_inverse[k])(delta, x);
        if t.is_nan() || t < 0.0 {
            return Err(RteError::Model(format!(
                "hazard inverse of process {k} returned {t} for Δ = {delta} at x = {x:?}"
            )));
        }
        if t < best.1 {
            best = (Some(k), t);
        }
    }
    Ok(best)
}

/// A piece of flow: starts at `start_time` in `start_state` and lasts `duration`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start_time: f64,
    pub start_state: Vec<f64>,
    pub duration: f64,
}

#[derive(Clone)]
pub struct ExactTrajectory {
    pub horizon: f64,
    pub jump_times: Vec<f64>,
    pub jump_process_ids: Vec<usize>,
    pub states_post_jump: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
    /// `τ_k(T)`.
    pub clocks: Vec<f64>,
    pub final_state: Vec<f64>,
    hooks: AnalyticHooks,
}

impl std::fmt::Debug for ExactTrajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExactTrajectory")
            .field("horizon", &self.horizon)
            .field("jumps", &self.jump_times.len())
            .field("clocks", &self.clocks)
            .field("final_state", &self.final_state)
            .finish()
    }
}

impl ExactTrajectory {
    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    /// Index of the segment containing `t` (the later one at a jump time).
    fn segment_index(&self, t: f64) -> usize {
        self.segments
            .partition_point(|s| s.start_time <= t)
            .saturating_sub(1)
    }

    /// `X(t)` for `t ∈ [0, T]`; right-continuous at jump times.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(RteError::Config(format!(
                "time {t} outside the exact trajectory's range [0, {}]",
                self.horizon
            )));
        }
        let seg = &self.segments[self.segment_index(t)];
        let mut out = vec![0.0; seg.start_state.len()];
        (self.hooks.flow)(t - seg.start_time, &seg.start_state, &mut out);
        Ok(out)
    }

    /// Visits the smooth pieces covering `[a, b]` as `(state at piece start, length)`.
    pub fn for_each_piece(
        &self,
        a: f64,
        b: f64,
        mut visit: impl FnMut(&[f64], f64) -> Result<()>,
    ) -> Result<()> {
        if !(0.0 <= a && a <= b && b <= self.horizon) {
            return Err(RteError::Config(format!(
                "interval [{a}, {b}] outside the exact trajectory's range [0, {}]",
                self.horizon
            )));
        }
        let mut i = self.segment_index(a);
        let mut from = a;
        let mut buf = vec![0.0; self.final_state.len()];
        while from < b {
            let seg = &self.segments[i];
            let end = (seg.start_time + seg.duration).min(b);
            if end > from {
                (self.hooks.flow)(from - seg.start_time, &seg.start_state, &mut buf);
                visit(&buf, end - from)?;
            }
            from = end;
            i += 1;
            if i == self.segments.len() {
                break;
            }
        }
        Ok(())
    }

    /// Jump table `jump_time,process_id,x_1..x_d` with 1-based process ids.
    pub fn write_jumps_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.final_state.len();
        let cols: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
        writeln!(w, "jump_time,process_id,{}", cols.join(","))?;
        for ((t, k), x) in self
            .jump_times
            .iter()
            .zip(&self.jump_process_ids)
            .zip(&self.states_post_jump)
        {
            write!(w, "{t},{}", k + 1)?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Segment table `start_time,duration,x_1..x_d`.
    pub fn write_segments_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.final_state.len();
        let cols: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
        writeln!(w, "start_time,duration,{}", cols.join(","))?;
        for s in &self.segments {
            write!(w, "{},{}", s.start_time, s.duration)?;
            for v in &s.start_state {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Samples `X` on the grid `0, h_out, 2 h_out, …, T` as `t,x_1..x_d`.
    pub fn write_sampled_csv<W: Write>(&self, h_out: f64, mut w: W) -> Result<()> {
        let n = step_count(self.horizon, h_out)?;
        let io = |e: io::Error| RteError::Config(format!("write failed: {e}"));
        let d = self.final_state.len();
        let cols: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
        writeln!(w, "t,{}", cols.join(",")).map_err(io)?;
        for i in 0..=n {
            let t = (i as f64 * h_out).min(self.horizon);
            write!(w, "{t}").map_err(io)?;
            for v in self.state_at(t)? {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        Ok(())
    }
}

pub fn exact_trajectory(
    model: &RteModel,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
) -> Result<ExactTrajectory> {
    exact_trajectory_with_limit(model, paths, x0, horizon, DEFAULT_MAX_JUMPS)
}

pub fn exact_trajectory_with_limit(
    model: &RteModel,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
    max_jumps: usize,
) -> Result<ExactTrajectory> {
    let hooks = model.require_hooks()?;
    let p = model.jump_count();
    let d = model.dim();
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(RteError::Config(format!("horizon must be positive, got {horizon}")));
    }
    if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
        return Err(RteError::Config(format!(
            "initial state {x0:?} must be finite with {d} components"
        )));
    }

    let mut out = ExactTrajectory {
        horizon,
        jump_times: Vec::new(),
        jump_process_ids: Vec::new(),
        states_post_jump: Vec::new(),
        segments: Vec::new(),
        clocks: vec![0.0; p],
        final_state: Vec::new(),
        hooks: hooks.clone(),
    };
    let mut t = 0.0;
    let mut x = x0.to_vec();
    let mut flowed = vec![0.0; d];

    loop {
        let (fired, dt) = next_jump(model, &x, &out.clocks, paths)?;
        let jump = match fired {
            Some(k) if t + dt <= horizon => Some(k),
            _ => None,
        };
        let Some(k_star) = jump else {
            let rest = horizon - t;
            for k in 0..p {
                out.clocks[k] += (hooks.hazard_integral[k])(rest, &x);
            }
            (hooks.flow)(rest, &x, &mut flowed);
            out.segments.push(Segment {
                start_time: t,
                start_state: x.clone(),
                duration: rest,
            });
            out.final_state = flowed;
            break;
        };
        if out.jump_times.len() == max_jumps {
            return Err(RteError::RunawayJumps { max_jumps });
        }

        for k in 0..p {
            if k == k_star {
                // land exactly on the epoch that fired
                out.clocks[k] = paths.path(k).next_epoch_after(out.clocks[k]);
            } else {
                out.clocks[k] += (hooks.hazard_integral[k])(dt, &x);
            }
        }
        (hooks.flow)(dt, &x, &mut flowed);
        out.segments.push(Segment {
            start_time: t,
            start_state: x.clone(),
            duration: dt,
        });
        for ((xi, fi), nu) in x.iter_mut().zip(&flowed).zip(model.jump(k_star)) {
            *xi = fi + nu;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(RteError::eval("exact flow", &x));
        }
        t += dt;
        out.jump_times.push(t);
        out.jump_process_ids.push(k_star);
        out.states_post_jump.push(x.clone());
    }
    Ok(out)
}

/// Checks `Λ_k^{-1}(Λ_k(t; x); x) = t` on the given probe points, to the
/// hook tolerance. Returns the worst relative discrepancy.
pub fn check_hook_consistency(model: &RteModel, probes: &[(f64, Vec<f64>)]) -> Result<f64> {
    let hooks = model.require_hooks()?;
    let mut worst: f64 = 0.0;
    for (t, x) in probes {
        for k in 0..model.jump_count() {
            let big = (hooks.hazard_integral[k])(*t, x);
            if big <= 0.0 {
                continue;
            }
            let back = (hooks.hazard_inverse[k])(big, x);
            let rel = (back - t).abs() / t.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            if !(rel <= HOOK_TOLERANCE) {
                return Err(RteError::Model(format!(
                    "hazard hooks of process {k} do not round-trip at t = {t}, x = {x:?} (got {back})"
                )));
            }
        }
    }
    Ok(worst)
}

/// Fine-step reference run used where no exact solver is available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub h_ref: f64,
    pub config: SolverConfig,
}

pub const DEFAULT_REFERENCE_H: f64 = 1.0 / 320.0;

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::new(DEFAULT_REFERENCE_H)
    }
}

impl ReferenceSpec {
    /// Trapezoidal Θ-method with trapezoidal quadrature at step `h_ref`.
    pub fn new(h_ref: f64) -> Self {
        ReferenceSpec {
            h_ref,
            config: SolverConfig::new(0.5, h_ref, Quadrature::Trapezoidal),
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        self.config.with_h(self.h_ref)
    }

    /// `h / h_ref` when it is a positive integer.
    pub fn nesting(&self, h: f64) -> Result<usize> {
        let r = h / self.h_ref;
        let n = r.round();
        if n < 1.0 || (n - r).abs() > 1e-9 * r {
            return Err(RteError::Config(format!(
                "reference step {} does not divide step {h}",
                self.h_ref
            )));
        }
        Ok(n as usize)
    }
}

pub fn reference_trajectory(
    model: &RteModel,
    spec: &ReferenceSpec,
    paths: &mut PathBundle,
    x0: &[f64],
    horizon: f64,
) -> Result<Trajectory> {
    solve_trajectory(model, &spec.solver_config(), paths, x0, horizon)
}
