//! Closed-loop integration and state-transition sensitivities.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::System;
use crate::error::invalid;
use crate::schedules::{ControlLaw, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    /// Classical RK4 steps per grid interval.
    pub substeps: usize,
    /// Largest admissible `|x_j|` before the rollout is declared divergent.
    pub divergence_bound: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            substeps: 4,
            divergence_bound: 1e6,
        }
    }
}

impl RolloutOptions {
    fn check(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(invalid("substeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// States and controls at the grid nodes, optionally with `Phi(T, t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub sensitivities: Option<Vec<DMatrix<f64>>>,
}

impl Trajectory {
    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has nodes")
    }
}

/// One classical RK4 step of a matrix-valued ODE `y' = rhs(t, y)`.
pub fn rk4_step<F>(mut rhs: F, t: f64, y: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
    let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Allocation-free RK4 stepper for the closed loop `x' = f(x, K(t) x + v(t))`.
pub(crate) struct ClosedLoopStepper<'a, S: System + ?Sized> {
    system: &'a S,
    law: &'a ControlLaw,
    k: [Vec<f64>; 4],
    probe: Vec<f64>,
    u: Vec<f64>,
}

impl<'a, S: System + ?Sized> ClosedLoopStepper<'a, S> {
    pub(crate) fn new(system: &'a S, law: &'a ControlLaw) -> Self {
        let n = system.state_dim();
        Self {
            system,
            law,
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            probe: vec![0.0; n],
            u: vec![0.0; system.control_dim()],
        }
    }

    fn stage(&mut self, slot: usize, interval: usize, w: f64) -> Result<()> {
        self.law.eval_at(&self.probe, interval, w, &mut self.u);
        self.system.dynamics(&self.probe, &self.u, &mut self.k[slot])
    }

    /// Advance `x` from weight `w` to `w + dw` inside grid interval `interval`.
    pub(crate) fn step(&mut self, x: &mut [f64], interval: usize, w: f64, dw: f64, h: f64) -> Result<()> {
        self.probe.copy_from_slice(x);
        self.stage(0, interval, w)?;
        for j in 0..x.len() {
            self.probe[j] = x[j] + 0.5 * h * self.k[0][j];
        }
        self.stage(1, interval, w + 0.5 * dw)?;
        for j in 0..x.len() {
            self.probe[j] = x[j] + 0.5 * h * self.k[1][j];
        }
        self.stage(2, interval, w + 0.5 * dw)?;
        for j in 0..x.len() {
            self.probe[j] = x[j] + h * self.k[2][j];
        }
        self.stage(3, interval, w + dw)?;
        for j in 0..x.len() {
            x[j] += h / 6.0 * (self.k[0][j] + 2.0 * self.k[1][j] + 2.0 * self.k[2][j] + self.k[3][j]);
        }
        Ok(())
    }

    /// Integrate across grid interval `interval` in `substeps` steps.
    pub(crate) fn advance_interval(&mut self, x: &mut [f64], interval: usize, opts: &RolloutOptions) -> Result<()> {
        let grid = self.law.grid();
        let dw = 1.0 / opts.substeps as f64;
        let h = grid.step() * dw;
        for s in 0..opts.substeps {
            self.step(x, interval, s as f64 * dw, dw, h)?;
            let t = grid.node(interval) + (s + 1) as f64 * h;
            check_bound(x, t, opts.divergence_bound)?;
        }
        Ok(())
    }
}

fn check_bound(x: &[f64], t: f64, bound: f64) -> Result<()> {
    for (component, v) in x.iter().enumerate() {
        if !(v.abs() <= bound) {
            return Err(Error::Divergence {
                t,
                component,
                magnitude: v.abs(),
            });
        }
    }
    Ok(())
}

fn check_shapes<S: System + ?Sized>(system: &S, law: &ControlLaw, x0: usize) -> Result<()> {
    if law.state_dim() != system.state_dim() || law.control_dim() != system.control_dim() || x0 != system.state_dim() {
        return Err(Error::Shape(alloc::format!(
            "system is {}x{}, law is {}x{}, initial state has {} entries",
            system.state_dim(),
            system.control_dim(),
            law.control_dim(),
            law.state_dim(),
            x0
        )));
    }
    Ok(())
}

/// Roll `x0` through the closed loop and record states and controls at the nodes.
pub fn integrate_closed_loop<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    x0: &DVector<f64>,
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    opts.check()?;
    check_shapes(system, law, x0.len())?;
    let grid = *law.grid();
    let mut stepper = ClosedLoopStepper::new(system, law);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(grid.len());
    let mut controls = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let mut u = DVector::zeros(system.control_dim());
        let (interval, w) = if i == grid.intervals() { (i - 1, 1.0) } else { (i, 0.0) };
        law.eval_at(x.as_slice(), interval, w, u.as_mut_slice());
        states.push(x.clone());
        controls.push(u);
        if i < grid.intervals() {
            stepper.advance_interval(x.as_mut_slice(), i, opts)?;
        }
    }
    Ok(Trajectory {
        grid,
        states,
        controls,
        sensitivities: None,
    })
}

/// Roll forward from `x` at node `start` to the horizon and return `x(T)`.
pub fn integrate_from<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    x: &[f64],
    start: usize,
    opts: &RolloutOptions,
) -> Result<DVector<f64>> {
    opts.check()?;
    check_shapes(system, law, x.len())?;
    let mut state = DVector::from_column_slice(x);
    let mut stepper = ClosedLoopStepper::new(system, law);
    for i in start..law.grid().intervals() {
        stepper.advance_interval(state.as_mut_slice(), i, opts)?;
    }
    Ok(state)
}

/// Closed-loop Jacobian `A + B K(t)` at `(x, K(t) x + v(t))`.
fn closed_loop_matrix<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    x: &[f64],
    interval: usize,
    w: f64,
) -> Result<DMatrix<f64>> {
    let mut u = vec![0.0; system.control_dim()];
    law.eval_at(x, interval, w, &mut u);
    let (a, b) = system.jacobians(x, &u)?;
    let gain = &law.gains()[interval] * (1.0 - w) + &law.gains()[interval + 1] * w;
    Ok(a + b * gain)
}

/// `Phi(t_{i+1}, t_i)` for every interval, integrated jointly with the state
/// from the trajectory's node values.
pub fn interval_transitions<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    traj: &Trajectory,
    opts: &RolloutOptions,
) -> Result<Vec<DMatrix<f64>>> {
    opts.check()?;
    let n = system.state_dim();
    let grid = *law.grid();
    let dw = 1.0 / opts.substeps as f64;
    let h = grid.step() * dw;
    let mut out = Vec::with_capacity(grid.intervals());
    for i in 0..grid.intervals() {
        // columns: [x | Phi]
        let mut y = DMatrix::zeros(n, n + 1);
        y.set_column(0, &traj.states[i]);
        y.view_mut((0, 1), (n, n)).copy_from(&DMatrix::<f64>::identity(n, n));
        for s in 0..opts.substeps {
            let w0 = s as f64 * dw;
            y = rk4_step(
                |tau, y| {
                    let w = (tau / grid.step()).clamp(0.0, 1.0);
                    let x: Vec<f64> = y.column(0).iter().copied().collect();
                    let mut u = vec![0.0; system.control_dim()];
                    law.eval_at(&x, i, w, &mut u);
                    let mut dx = vec![0.0; n];
                    system.dynamics(&x, &u, &mut dx)?;
                    let closed = closed_loop_matrix(system, law, &x, i, w)?;
                    let mut dy = DMatrix::zeros(n, n + 1);
                    dy.set_column(0, &DVector::from_vec(dx));
                    dy.view_mut((0, 1), (n, n))
                        .copy_from(&(closed * y.view((0, 1), (n, n))));
                    Ok(dy)
                },
                w0 * grid.step(),
                &y,
                h,
            )?;
            let x: Vec<f64> = y.column(0).iter().copied().collect();
            check_bound(&x, grid.node(i) + (s + 1) as f64 * h, opts.divergence_bound)?;
        }
        out.push(y.view((0, 1), (n, n)).into_owned());
    }
    Ok(out)
}

/// Fill `Phi(T, t_i)` by composing interval transitions backward from `Phi(T, T) = I`.
pub fn propagate_sensitivity<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    traj: &Trajectory,
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    let steps = interval_transitions(system, law, traj, opts)?;
    let n = system.state_dim();
    let mut sens = vec![DMatrix::identity(n, n); traj.grid.len()];
    for i in (0..traj.grid.intervals()).rev() {
        sens[i] = &sens[i + 1] * &steps[i];
    }
    Ok(Trajectory {
        sensitivities: Some(sens),
        ..traj.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ArmParams, LinearSystem, TwoLinkArm};
    use libm::{exp, log};

    fn scalar_law(grid: TimeGrid, k: f64, v: f64) -> ControlLaw {
        ControlLaw::new(
            grid,
            (0..grid.len()).map(|_| DMatrix::from_element(1, 1, k)).collect(),
            (0..grid.len()).map(|_| DVector::from_element(1, v)).collect(),
        )
        .unwrap()
    }

    fn opts(substeps: usize) -> RolloutOptions {
        RolloutOptions {
            substeps,
            ..Default::default()
        }
    }

    #[test]
    fn frozen_system_keeps_state() {
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let sys = LinearSystem::frozen(3, 1);
        let law = ControlLaw::zeros(grid, 1, 3);
        let x0 = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let traj = integrate_closed_loop(&sys, &law, &x0, &opts(4)).unwrap();
        assert!(traj.states.iter().all(|x| *x == x0));
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let sys = LinearSystem::scalar(-1.0, 0.0);
        let law = scalar_law(grid, 0.0, 0.0);
        let traj = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts(10)).unwrap();
        assert!((traj.terminal_state()[0] - exp(-0.5)).abs() < 1e-8);
    }

    #[test]
    fn feedback_loop_matches_closed_form() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let sys = LinearSystem::scalar(0.0, 1.0);
        let law = scalar_law(grid, -1.0, 0.0);
        let traj = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts(4)).unwrap();
        for (i, x) in traj.states.iter().enumerate() {
            assert!((x[0] - exp(-grid.node(i))).abs() < 1e-9);
            assert!((traj.controls[i][0] + x[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let grid = TimeGrid::new(0.5, 2).unwrap();
        let sys = LinearSystem::scalar(-4.0, 0.0);
        let law = scalar_law(grid, 0.0, 0.0);
        let exact = exp(-2.0);
        let errs: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&s| {
                let t = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts(s)).unwrap();
                (t.terminal_state()[0] - exact).abs()
            })
            .collect();
        for pair in errs.windows(2) {
            let slope = log(pair[0] / pair[1]) / log(2.0);
            assert!(slope > 3.7, "slope {slope}, errors {errs:?}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let sys = LinearSystem::scalar(40.0, 0.0);
        let law = scalar_law(grid, 0.0, 0.0);
        let err = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts(4)).unwrap_err();
        assert!(matches!(err, Error::Divergence { component: 0, .. }));
    }

    #[test]
    fn zero_substeps_rejected() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let sys = LinearSystem::scalar(-1.0, 0.0);
        let law = scalar_law(grid, 0.0, 0.0);
        assert!(integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts(0)).is_err());
    }

    #[test]
    fn scalar_sensitivity_is_exponential() {
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let sys = LinearSystem::scalar(0.5, 2.0);
        let law = scalar_law(grid, -1.0, 0.3);
        // closed loop rate a + b k = -1.5
        let traj = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &opts(8)).unwrap();
        let traj = propagate_sensitivity(&sys, &law, &traj, &opts(8)).unwrap();
        let sens = traj.sensitivities.unwrap();
        assert_eq!(sens[20][(0, 0)], 1.0);
        for (i, phi) in sens.iter().enumerate() {
            let expected = exp(-1.5 * (0.5 - grid.node(i)));
            assert!((phi[(0, 0)] - expected).abs() < 1e-9, "node {i}");
        }
    }

    #[test]
    fn sensitivity_composes_across_nodes() {
        let arm = TwoLinkArm::new(ArmParams::default()).unwrap();
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let gains = (0..grid.len())
            .map(|_| DMatrix::from_row_slice(2, 4, &[-2.0, 0.0, -0.5, 0.0, 0.0, -1.0, 0.0, -0.3]))
            .collect();
        let ff = grid
            .nodes()
            .map(|t| DVector::from_column_slice(&[1.0 - t, 0.5 * t]))
            .collect();
        let law = ControlLaw::new(grid, gains, ff).unwrap();
        let x0 = DVector::from_column_slice(&[0.1, 0.4, 0.0, 0.0]);
        let o = opts(4);
        let traj = integrate_closed_loop(&arm, &law, &x0, &o).unwrap();
        let steps = interval_transitions(&arm, &law, &traj, &o).unwrap();
        let traj = propagate_sensitivity(&arm, &law, &traj, &o).unwrap();
        let sens = traj.sensitivities.as_ref().unwrap();
        let (t1, t2) = (3, 11);
        let mut between = DMatrix::identity(4, 4);
        for s in &steps[t1..t2] {
            between = s * between;
        }
        let composed = &sens[t2] * between;
        assert!((&composed - &sens[t1]).norm() < 1e-6 * sens[t1].norm());

        // first-order agreement with a perturbed nonlinear rollout
        let delta = DVector::from_column_slice(&[1.0, -0.5, 0.25, 2.0]).normalize() * 1e-5;
        let perturbed = integrate_closed_loop(&arm, &law, &(&x0 + &delta), &o).unwrap();
        let actual = perturbed.terminal_state() - traj.terminal_state();
        let predicted = &sens[0] * &delta;
        assert!((&actual - &predicted).norm() <= 1e-3 * predicted.norm());
    }
}
