use approx::assert_relative_eq;
use rte_core::exact::{check_hook_consistency, exact_trajectory, next_jump};
use rte_core::model::{builtin_linear_scalar, builtin_quadratic_rate};
use rte_core::poisson::PathBundle;

fn rk4(f: impl Fn(f64) -> f64, x0: f64, t: f64, steps: usize) -> f64 {
    let h = t / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn interior_states_follow_the_ode() {
    let m = builtin_quadratic_rate(1.0, 10.0, 0.01).unwrap();
    let mut paths = PathBundle::new(5, 0, 1);
    let e = exact_trajectory(&m, &mut paths, &[10.0], 1.0).unwrap();
    assert!(e.jump_count() > 10);
    for seg in e.segments.iter().step_by(97) {
        let t = seg.start_time + 0.5 * seg.duration;
        let oracle = rk4(|x| -x, seg.start_state[0], 0.5 * seg.duration, 200);
        assert_relative_eq!(e.state_at(t).unwrap()[0], oracle, max_relative = 1e-8);
    }
}

#[test]
fn clock_matches_quadrature_of_rate() {
    let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap();
    let mut paths = PathBundle::new(9, 1, 1);
    let e = exact_trajectory(&m, &mut paths, &[10.0], 1.0).unwrap();
    let oracle: f64 = e
        .segments
        .iter()
        .map(|s| simpson(|u| 200.0 * s.start_state[0] * (-1.5 * u).exp(), 0.0, s.duration, 16))
        .sum();
    assert_relative_eq!(e.clocks[0], oracle, max_relative = 1e-8);
}

#[test]
fn jump_counts_agree_with_paths() {
    let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap();
    for rep in 0..5 {
        let mut paths = PathBundle::new(1, rep, 1);
        let e = exact_trajectory(&m, &mut paths, &[10.0], 2.0).unwrap();
        assert_eq!(paths.path(0).count_at(e.clocks[0]).unwrap(), e.jump_count() as u64);
    }
}

#[test]
fn exact_solution_is_pure_in_its_inputs() {
    let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap();
    let run = || {
        let mut paths = PathBundle::new(21, 3, 1);
        exact_trajectory(&m, &mut paths, &[10.0], 5.0).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.jump_times, b.jump_times);
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn first_jump_time_by_bisection() {
    let m = builtin_linear_scalar(1.5, 200.0, 0.007).unwrap();
    let mut paths = PathBundle::new(2, 0, 1);
    let (k, dt) = next_jump(&m, &[10.0], &[0.0], &mut paths).unwrap();
    assert_eq!(k, Some(0));
    let target = paths.path(0).epochs()[0];
    let hazard = |t: f64| 2000.0 * (1.0 - (-1.5 * t).exp()) / 1.5;
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hazard(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert_relative_eq!(dt, lo, max_relative = 1e-10);
}

#[test]
fn hooks_self_consistent() {
    let probes: Vec<(f64, Vec<f64>)> = [0.01, 0.2, 1.0, 4.0].iter().map(|&t| (t, vec![7.0])).collect();
    for m in [builtin_linear_scalar(1.5, 500.0, 0.001).unwrap(), builtin_quadratic_rate(1.0, 10.0, 0.01).unwrap()] {
        assert!(check_hook_consistency(&m, &probes).unwrap() <= 1e-10);
    }
}
