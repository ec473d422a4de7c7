//! Invariant suites behind the `check` subcommand.

use std::fmt;
use std::time::{Duration, Instant};

use minattn::adjoint::{lambda_schedule, rederive_lambda, TerminalObjective};
use minattn::density::{
    estimate_density, terminal_mismatch, MonteCarloOptions, PhaseBox, SampleExecutor, SmoothedDelta, TargetDensity,
};
use minattn::dynamics::{
    bias, finite_difference_jacobians, mass_matrix, relative_error, LinearSystem, System, TwoLinkArm,
};
use minattn::lqr::{solve_riccati_backward, RiccatiOptions};
use minattn::optimizer::Solver;
use minattn::rollout::{integrate_closed_loop, propagate_sensitivity, RolloutOptions};
use minattn::schedules::{ControlLaw, TimeGrid};
use minattn::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::app::Prepared;
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

/// One suite's measured value against its tolerance.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    /// `true` when `measured` must be at least `tolerance` rather than at most.
    pub lower_bound: bool,
    pub passed: bool,
    pub note: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.lower_bound { ">=" } else { "<=" };
        write!(
            f,
            "{} {:<22} measured {:.3e} {op} {:.3e}  ({:.2?}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.elapsed,
            self.note
        )
    }
}

fn upper(name: &'static str, measured: f64, tolerance: f64, start: Instant, note: String) -> SuiteReport {
    SuiteReport {
        name,
        measured,
        tolerance,
        lower_bound: false,
        passed: measured <= tolerance,
        note,
        elapsed: start.elapsed(),
    }
}

fn lower(name: &'static str, measured: f64, tolerance: f64, start: Instant, note: String) -> SuiteReport {
    SuiteReport {
        name,
        measured,
        tolerance,
        lower_bound: true,
        passed: measured >= tolerance,
        note,
        elapsed: start.elapsed(),
    }
}

fn failed(name: &'static str, start: Instant, err: impl fmt::Display) -> SuiteReport {
    SuiteReport {
        name,
        measured: f64::NAN,
        tolerance: f64::NAN,
        lower_bound: false,
        passed: false,
        note: format!("error: {err}"),
        elapsed: start.elapsed(),
    }
}

/// The arm with the sign of its bias torque flipped in `f` while the
/// analytic Jacobians stay those of the true arm. Negative control for the
/// Jacobian suite.
#[derive(Debug, Clone)]
pub struct FlippedBias(pub TwoLinkArm);

impl System for FlippedBias {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &[f64], u: &[f64], xdot: &mut [f64]) -> minattn::Result<()> {
        self.0.dynamics(x, u, xdot)?;
        let p = &self.0.params;
        let m = mass_matrix(p, [x[0], x[1]]);
        let b = bias(p, [x[0], x[1]], [x[2], x[3]]);
        let shift = m.try_inverse().expect("mass matrix is invertible") * b * 2.0;
        xdot[2] += shift[0];
        xdot[3] += shift[1];
        Ok(())
    }

    fn jacobians(&self, x: &[f64], u: &[f64]) -> minattn::Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.0.jacobians(x, u)
    }
}

/// Analytic `A`, `B` against central differences at 100 random states.
pub fn jacobian_suite(corrupt_bias: bool) -> SuiteReport {
    let start = Instant::now();
    let arm = match Prepared::new(RunConfig::default(), None) {
        Ok(p) => p.arm,
        Err(e) => return failed("jacobian", start, e),
    };
    let system: Box<dyn System> = if corrupt_bias {
        Box::new(FlippedBias(arm))
    } else {
        Box::new(arm)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-2.8..2.8),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ];
        let u = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let (a, b) = match system.jacobians(&x, &u) {
            Ok(j) => j,
            Err(e) => return failed("jacobian", start, e),
        };
        let (fa, fb) = match finite_difference_jacobians(system.as_ref(), &x, &u) {
            Ok(j) => j,
            Err(e) => return failed("jacobian", start, e),
        };
        worst = worst
            .max(relative_error(&a, &fa, 1e-12))
            .max(relative_error(&b, &fb, 1e-12));
    }
    let mut report = upper("jacobian", worst, 1e-5, start, "100 random states".into());
    if report.elapsed > Duration::from_secs(5) {
        report.passed = false;
        report.note = format!("over the 5 s budget; {}", report.note);
    }
    report
}

/// Scalar `A = 0, B = R = 1` sweep against `p / (1 + p (T - t))`.
pub fn riccati_scalar_suite() -> SuiteReport {
    let start = Instant::now();
    let grid = TimeGrid::new(0.5, 40).expect("valid grid");
    let one = DMatrix::from_element(1, 1, 1.0);
    let mut worst: f64 = 0.0;
    for p_f in [0.5, 3.0, 1e5] {
        let sol = match solve_riccati_backward(
            &vec![DMatrix::zeros(1, 1); grid.len()],
            &vec![one.clone(); grid.len()],
            &one,
            &DMatrix::from_element(1, 1, p_f),
            grid,
            &RiccatiOptions {
                substeps: 10,
                ..Default::default()
            },
        ) {
            Ok(s) => s,
            Err(e) => return failed("riccati-scalar", start, e),
        };
        for (i, p) in sol.p.iter().enumerate() {
            let exact = p_f / (1.0 + p_f * (grid.horizon() - grid.node(i)));
            worst = worst.max((p[(0, 0)] - exact).abs() / exact.max(1.0));
        }
    }
    upper("riccati-scalar", worst, 1e-6, start, "p_f in {0.5, 3, 1e5}".into())
}

/// Symmetry drift of the 4-D initialization sweep of both presets.
pub fn riccati_symmetry_suite(executor: &dyn SampleExecutor) -> SuiteReport {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for c in [RunConfig::experiment1(), RunConfig::experiment2()] {
        let init = Prepared::new(c, None).and_then(|p| {
            let solver = Solver::new(&p.arm, &p.solver, executor)?;
            Ok(solver.initialize()?)
        });
        match init {
            Ok(i) => worst = worst.max(i.riccati.symmetry_drift()),
            Err(e) => return failed("riccati-symmetry", start, e),
        }
    }
    upper("riccati-symmetry", worst, 1e-10, start, "both presets".into())
}

/// `lambda` from the terminal condition versus a forward re-rollout at every node.
pub fn lambda_suite(executor: &dyn SampleExecutor) -> SuiteReport {
    let start = Instant::now();
    let run = || -> anyhow::Result<f64> {
        let mut worst: f64 = 0.0;
        for c in [RunConfig::experiment1(), RunConfig::experiment2()] {
            let p = Prepared::new(c, None)?;
            let solver = Solver::new(&p.arm, &p.solver, executor)?;
            let law = solver.initialize()?.law;
            let opts = p.solver.rollout();
            let traj = integrate_closed_loop(&p.arm, &law, &p.solver.x_init, &opts)?;
            let traj = propagate_sensitivity(&p.arm, &law, &traj, &opts)?;
            let obj = TerminalObjective::Endpoint {
                task: &p.arm,
                target: p.solver.target.as_slice(),
                gamma: p.solver.gamma,
            };
            let adj = lambda_schedule(&traj, &obj)?;
            let again = rederive_lambda(&p.arm, &law, &traj, &obj, &opts)?;
            for (a, b) in adj.lambda.iter().zip(&again) {
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => upper("lambda-constancy", w, 1e-6, start, "relative, both presets".into()),
        Err(e) => failed("lambda-constancy", start, e),
    }
}

fn zero_law(grid: TimeGrid) -> ControlLaw {
    ControlLaw::zeros(grid, 1, 1)
}

/// Count identity on the arm field and the scalar pushforward mean.
pub fn density_suite(executor: &dyn SampleExecutor) -> Vec<SuiteReport> {
    let start = Instant::now();
    let identity = || -> anyhow::Result<(f64, bool)> {
        let mut c = RunConfig::experiment1();
        // A tight box so that some mass actually leaves.
        c.domain.lower = vec![-1.0, -1.0, -6.0, -6.0];
        c.domain.upper = vec![1.0, 1.0, 6.0, 6.0];
        c.domain.intervals = vec![32; 4];
        let p = Prepared::new(c, None)?;
        let solver = Solver::new(&p.arm, &p.solver, executor)?;
        let law = solver.initialize()?.law;
        let field = estimate_density(
            &p.arm,
            &law,
            solver.initial_density(),
            &p.solver.phase_box,
            &p.solver.monte_carlo(),
            executor,
        )?;
        let mut worst: f64 = 0.0;
        let mut monotone = true;
        for node in 0..field.grid().len() {
            worst = worst.max((field.mass(node) + field.exited_fraction(node) - 1.0).abs());
            if node > 0 && field.exited_count(node) < field.exited_count(node - 1) {
                monotone = false;
            }
        }
        Ok((worst, monotone))
    };
    let mut out = Vec::new();
    match identity() {
        Ok((w, monotone)) => {
            let mut r = upper("density-mass", w, 1e-12, start, "mass + exited = 1 per node".into());
            if !monotone {
                r.passed = false;
                r.note = "exited fraction decreased".into();
            }
            out.push(r);
        }
        Err(e) => out.push(failed("density-mass", start, e)),
    }

    let start = Instant::now();
    let mean = || -> anyhow::Result<(f64, f64)> {
        let grid = TimeGrid::new(0.5, 20)?;
        let b = PhaseBox::uniform(1, -2.0, 2.0, 400)?;
        let rho0 = SmoothedDelta::new(&[1.0], &b, 8)?;
        let sys = LinearSystem::scalar(-1.0, 0.0);
        let opts = MonteCarloOptions {
            trackmax: 20_000,
            seed: 5,
            ..Default::default()
        };
        let field = estimate_density(&sys, &zero_law(grid), &rho0, &b, &opts, executor)?;
        let xs: Vec<f64> = field.terminal_samples().iter().map(|x| x[0]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        Ok(((m - (-0.5f64).exp()).abs(), 3.0 * (var / n).sqrt()))
    };
    match mean() {
        Ok((err, bound)) => out.push(upper(
            "density-pushforward",
            err,
            bound,
            start,
            "|mean - e^-T| vs 3 standard errors".into(),
        )),
        Err(e) => out.push(failed("density-pushforward", start, e)),
    }
    out
}

/// Slope of `log error` against `log substeps` for `x' = -4x`.
pub fn integrator_suite() -> SuiteReport {
    let start = Instant::now();
    let run = || -> anyhow::Result<f64> {
        let grid = TimeGrid::new(0.5, 2)?;
        let sys = LinearSystem::scalar(-4.0, 0.0);
        let law = zero_law(grid);
        let exact = (-2.0f64).exp();
        let mut errs = Vec::new();
        for substeps in [1, 2, 4, 8] {
            let opts = RolloutOptions {
                substeps,
                ..Default::default()
            };
            let t = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts)?;
            errs.push((t.terminal_state()[0] - exact).abs());
        }
        Ok(errs
            .windows(2)
            .map(|w| (w[0] / w[1]).log2())
            .fold(f64::INFINITY, f64::min))
    };
    match run() {
        Ok(s) => lower(
            "integrator-order",
            s,
            3.7,
            start,
            "minimum slope over 4 refinements".into(),
        ),
        Err(e) => failed("integrator-order", start, e),
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Spread of the terminal mismatch across seeds as `trackmax` doubles.
///
/// With `f = 0` and `psi` offset from `rho0` by two cells the mismatch is
/// dominated by a term linear in the sampling error, so its standard
/// deviation should fall by `1/sqrt(2)` per doubling.
pub fn monte_carlo_suite(executor: &dyn SampleExecutor) -> SuiteReport {
    let start = Instant::now();
    let seeds = 48;
    let sizes = [500usize, 1000, 2000, 4000];
    let run = || -> anyhow::Result<f64> {
        let grid = TimeGrid::new(0.5, 4)?;
        let b = PhaseBox::uniform(1, -1.0, 1.0, 80)?;
        let rho0 = SmoothedDelta::new(&[0.0], &b, 8)?;
        let shifted = SmoothedDelta::new(&[2.0 * b.cell_width(0)], &b, 8)?;
        let psi = TargetDensity::from_kernel(&shifted, &b);
        let sys = LinearSystem::scalar(0.0, 0.0);
        let law = zero_law(grid);
        let mut spreads = Vec::new();
        for &trackmax in &sizes {
            let mut values = Vec::with_capacity(seeds);
            for seed in 0..seeds as u64 {
                let opts = MonteCarloOptions {
                    trackmax,
                    seed: 1000 + seed,
                    ..Default::default()
                };
                let field = estimate_density(&sys, &law, &rho0, &b, &opts, executor)?;
                values.push(terminal_mismatch(&field, &psi));
            }
            spreads.push(std_dev(&values));
        }
        // Geometric mean ratio per doubling.
        Ok((spreads[spreads.len() - 1] / spreads[0]).powf(1.0 / (spreads.len() - 1) as f64))
    };
    match run() {
        Ok(ratio) => {
            let ideal = std::f64::consts::FRAC_1_SQRT_2;
            let dev = (ratio / ideal - 1.0).abs();
            upper(
                "monte-carlo-sqrt",
                dev,
                0.3,
                start,
                format!("std ratio per doubling {ratio:.3} vs {ideal:.3}, {seeds} seeds"),
            )
        }
        Err(e) => failed("monte-carlo-sqrt", start, e),
    }
}

/// Runs the suites for `level` in a fixed order.
pub fn run_checks(level: Level, corrupt_bias: bool, executor: &dyn SampleExecutor) -> Vec<SuiteReport> {
    let mut out = vec![
        jacobian_suite(corrupt_bias),
        riccati_scalar_suite(),
        riccati_symmetry_suite(executor),
        lambda_suite(executor),
    ];
    out.extend(density_suite(executor));
    out.push(integrator_suite());
    if level == Level::Full {
        out.push(monte_carlo_suite(executor));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use minattn::density::Sequential;

    #[test]
    fn fast_suites_pass() {
        for r in run_checks(Level::Fast, false, &Sequential) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn corrupted_bias_fails_the_jacobian_suite() {
        let r = jacobian_suite(true);
        assert!(!r.passed, "{r}");
        assert!(r.measured > 1e-3);
    }

    #[test]
    fn report_line_format() {
        let r = integrator_suite();
        let line = r.to_string();
        assert!(line.starts_with("PASS integrator-order"), "{line}");
        assert!(line.contains(">="));
    }
}
