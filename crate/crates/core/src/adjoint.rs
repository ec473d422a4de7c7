//! Lagrange multiplier along the evaluation trajectory.
//!
//! The multiplier is constant along characteristics, so its value at every
//! node equals its terminal value and its state gradient is the terminal
//! gradient pulled back through the sensitivity matrices `Phi(T, t_i)`.

use alloc::vec::Vec;

use nalgebra::DVector;

use crate::density::{DensityField, TargetDensity};
use crate::dynamics::{System, TaskSpace};
use crate::rollout::{integrate_from, RolloutOptions, Trajectory};
use crate::schedules::{ControlLaw, TimeGrid};
use crate::{Error, Result};

/// Terminal boundary condition for the multiplier.
#[derive(Clone, Copy)]
pub enum TerminalObjective<'a> {
    /// `gamma |phi(x) - phi_f|^2` in task space.
    Endpoint {
        task: &'a dyn TaskSpace,
        target: &'a [f64],
        gamma: f64,
    },
    /// `rho(x, T) - psi(x)` on the density grid.
    Density {
        field: &'a DensityField,
        psi: &'a TargetDensity,
    },
}

impl core::fmt::Debug for TerminalObjective<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Self::Endpoint { target, gamma, .. } => f
                .debug_struct("Endpoint")
                .field("target", target)
                .field("gamma", gamma)
                .finish_non_exhaustive(),
            Self::Density { .. } => f.debug_struct("Density").finish_non_exhaustive(),
        }
    }
}

impl TerminalObjective<'_> {
    fn density_lambda(field: &DensityField, psi: &TargetDensity, x: &[f64]) -> f64 {
        field.density_at(x, field.grid().intervals()) - psi.value(x)
    }

    /// Multiplier at the horizon.
    pub fn lambda(&self, x_t: &[f64]) -> f64 {
        match *self {
            Self::Endpoint { task, target, gamma } => {
                let miss = task.task_map(x_t) - DVector::from_column_slice(target);
                gamma * miss.norm_squared()
            }
            Self::Density { field, psi } => Self::density_lambda(field, psi, x_t),
        }
    }

    /// `d lambda / dx` at the horizon.
    pub fn gradient(&self, x_t: &[f64]) -> DVector<f64> {
        match *self {
            Self::Endpoint { task, target, gamma } => {
                let miss = task.task_map(x_t) - DVector::from_column_slice(target);
                task.task_jacobian(x_t).transpose() * miss * (2.0 * gamma)
            }
            Self::Density { field, psi } => density_gradient(field, psi, x_t),
        }
    }
}

/// Cell-centered differences of `rho_T - psi`; a neighbor that is outside the
/// box or unoccupied is replaced by the cell itself (one-sided difference).
fn density_gradient(field: &DensityField, psi: &TargetDensity, x: &[f64]) -> DVector<f64> {
    let phase_box = field.phase_box();
    let node = field.grid().intervals();
    let mut grad = DVector::zeros(x.len());
    let Some(key) = phase_box.locate(x) else {
        return grad;
    };
    let value = |k| field.cell_density(node, k) - psi.cell_value(k);
    let usable = |k: Option<u64>| k.filter(|k| field.count(node, *k) > 0);
    for d in 0..x.len() {
        let h = phase_box.cell_width(d);
        let fwd = usable(phase_box.neighbor(key, d, true));
        let back = usable(phase_box.neighbor(key, d, false));
        grad[d] = match (back, fwd) {
            (Some(b), Some(f)) => (value(f) - value(b)) / (2.0 * h),
            (None, Some(f)) => (value(f) - value(key)) / h,
            (Some(b), None) => (value(key) - value(b)) / h,
            (None, None) => 0.0,
        };
    }
    grad
}

/// `lambda(x_T)` for either terminal mode.
pub fn terminal_lambda(x_t: &[f64], objective: &TerminalObjective<'_>) -> f64 {
    objective.lambda(x_t)
}

/// Multiplier value and state gradient at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSchedule {
    pub grid: TimeGrid,
    pub lambda: Vec<f64>,
    pub grad: Vec<DVector<f64>>,
}

/// Constant `lambda` and `grad_i = Phi(T, t_i)^T grad_T` along `traj`.
pub fn lambda_schedule(traj: &Trajectory, objective: &TerminalObjective<'_>) -> Result<AdjointSchedule> {
    let sens = traj
        .sensitivities
        .as_ref()
        .ok_or_else(|| Error::Shape("trajectory has no sensitivity matrices".into()))?;
    let x_t = traj.terminal_state().as_slice();
    let lambda = objective.lambda(x_t);
    let terminal = objective.gradient(x_t);
    Ok(AdjointSchedule {
        grid: traj.grid,
        lambda: alloc::vec![lambda; traj.grid.len()],
        grad: sens.iter().map(|phi| phi.transpose() * &terminal).collect(),
    })
}

/// Re-derive `lambda(x(t_i), t_i)` by rolling each node state forward to the
/// horizon and applying the terminal condition there.
pub fn rederive_lambda<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    traj: &Trajectory,
    objective: &TerminalObjective<'_>,
    opts: &RolloutOptions,
) -> Result<Vec<f64>> {
    traj.states
        .iter()
        .enumerate()
        .map(|(i, x)| Ok(objective.lambda(integrate_from(system, law, x.as_slice(), i, opts)?.as_slice())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{estimate_density, MonteCarloOptions, PhaseBox, Sequential, SmoothedDelta};
    use crate::dynamics::{forward_kinematics, ArmParams, LinearSystem, TwoLinkArm};
    use crate::rollout::{integrate_closed_loop, propagate_sensitivity};
    use alloc::vec;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arm_law(grid: TimeGrid) -> ControlLaw {
        let k = DMatrix::from_row_slice(2, 4, &[-8.0, 1.0, -0.6, 0.1, 0.5, -6.0, 0.05, -0.4]);
        let gains = (0..grid.len()).map(|i| &k * (1.0 + 0.1 * i as f64)).collect();
        let ff = grid
            .nodes()
            .map(|t| DVector::from_vec(vec![-0.8 + 2.0 * t, 0.9 - t]))
            .collect();
        ControlLaw::new(grid, gains, ff).unwrap()
    }

    #[test]
    fn endpoint_lambda_examples() {
        let arm = TwoLinkArm::new(ArmParams::default()).unwrap();
        let x = [0.3, 0.8, 0.1, -0.2];
        let phi = forward_kinematics(&ArmParams::default(), &x);
        let obj = TerminalObjective::Endpoint {
            task: &arm,
            target: phi.as_slice(),
            gamma: 1e6,
        };
        assert_eq!(terminal_lambda(&x, &obj), 0.0);
        assert_eq!(obj.gradient(&x).norm(), 0.0);
        let mut off = phi.clone();
        off[0] += 0.1;
        let obj = TerminalObjective::Endpoint {
            task: &arm,
            target: off.as_slice(),
            gamma: 1e6,
        };
        assert!((terminal_lambda(&x, &obj) - 1e4).abs() < 1e-6);
    }

    #[test]
    fn endpoint_gradient_matches_finite_differences() {
        let arm = TwoLinkArm::new(ArmParams::default()).unwrap();
        let target = [-0.26, 0.40, 0.0, 0.0];
        let obj = TerminalObjective::Endpoint {
            task: &arm,
            target: &target,
            gamma: 1e6,
        };
        let x = [0.4, 1.1, -0.7, 2.0];
        let g = obj.gradient(&x);
        for d in 0..4 {
            let h = 1e-6;
            let (mut p, mut m) = (x, x);
            p[d] += h;
            m[d] -= h;
            let fd = (obj.lambda(&p) - obj.lambda(&m)) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-6 * g.norm(), "dim {d}: {fd} vs {}", g[d]);
        }
    }

    #[test]
    fn schedule_at_target_vanishes() {
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let arm = TwoLinkArm::new(ArmParams::default()).unwrap();
        let law = arm_law(grid);
        let opts = RolloutOptions::default();
        let traj = integrate_closed_loop(&arm, &law, &DVector::zeros(4), &opts).unwrap();
        let traj = propagate_sensitivity(&arm, &law, &traj, &opts).unwrap();
        let hit = forward_kinematics(&ArmParams::default(), traj.terminal_state().as_slice());
        let obj = TerminalObjective::Endpoint {
            task: &arm,
            target: hit.as_slice(),
            gamma: 1e6,
        };
        let adj = lambda_schedule(&traj, &obj).unwrap();
        assert!(adj.lambda.iter().all(|l| *l == 0.0));
        assert!(adj.grad.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn schedule_needs_sensitivities() {
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let sys = LinearSystem::scalar(-1.0, 1.0);
        let law = ControlLaw::zeros(grid, 1, 1);
        let traj = integrate_closed_loop(&sys, &law, &DVector::from_element(1, 1.0), &Default::default()).unwrap();
        let obj = TerminalObjective::Endpoint {
            task: &sys,
            target: &[0.0],
            gamma: 1.0,
        };
        assert!(lambda_schedule(&traj, &obj).is_err());
    }

    #[test]
    fn lambda_is_constant_along_the_characteristic() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let arm = TwoLinkArm::new(ArmParams::default()).unwrap();
        let law = arm_law(grid);
        let opts = RolloutOptions::default();
        let traj = integrate_closed_loop(&arm, &law, &DVector::from_vec(vec![0.1, -0.1, 0.0, 0.0]), &opts).unwrap();
        let traj = propagate_sensitivity(&arm, &law, &traj, &opts).unwrap();
        let target = [-0.32, 0.27, 0.0, 0.0];
        let obj = TerminalObjective::Endpoint {
            task: &arm,
            target: &target,
            gamma: 1e6,
        };
        let adj = lambda_schedule(&traj, &obj).unwrap();
        let again = rederive_lambda(&arm, &law, &traj, &obj, &opts).unwrap();
        for (a, b) in adj.lambda.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
        assert!((&adj.grad[grid.intervals()] - obj.gradient(traj.terminal_state().as_slice())).norm() == 0.0);
    }

    #[test]
    fn pulled_back_gradient_matches_perturbed_rollouts() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let arm = TwoLinkArm::new(ArmParams::default()).unwrap();
        let law = arm_law(grid);
        let opts = RolloutOptions::default();
        let traj = integrate_closed_loop(&arm, &law, &DVector::zeros(4), &opts).unwrap();
        let traj = propagate_sensitivity(&arm, &law, &traj, &opts).unwrap();
        let target = [-0.26, 0.40, 0.0, 0.0];
        let obj = TerminalObjective::Endpoint {
            task: &arm,
            target: &target,
            gamma: 1e6,
        };
        let adj = lambda_schedule(&traj, &obj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let i = rng.gen_range(0..grid.intervals());
            let g = &adj.grad[i];
            let dir = g / g.norm();
            let delta = 1e-5;
            let xp = &traj.states[i] + &dir * delta;
            let xm = &traj.states[i] - &dir * delta;
            let lp = obj.lambda(integrate_from(&arm, &law, xp.as_slice(), i, &opts).unwrap().as_slice());
            let lm = obj.lambda(integrate_from(&arm, &law, xm.as_slice(), i, &opts).unwrap().as_slice());
            let fd = (lp - lm) / (2.0 * delta);
            assert!(
                (fd - g.norm()).abs() <= 1e-3 * g.norm(),
                "node {i}: {fd} vs {}",
                g.norm()
            );
        }
    }

    #[test]
    fn density_mode_vanishes_when_target_is_the_field() {
        let grid = TimeGrid::new(0.5, 8).unwrap();
        let b = PhaseBox::uniform(2, -1.0, 1.0, 20).unwrap();
        let rho0 = SmoothedDelta::new(&[0.1, 0.0], &b, 4).unwrap();
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[-0.5, 1.0, -1.0, -0.5]),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let law = ControlLaw::zeros(grid, 1, 2);
        let field = estimate_density(&sys, &law, &rho0, &b, &MonteCarloOptions::default(), &Sequential).unwrap();
        let psi = TargetDensity::from_field(&field, grid.intervals());
        let obj = TerminalObjective::Density {
            field: &field,
            psi: &psi,
        };
        for (key, _) in field.occupied(grid.intervals()) {
            let c = b.cell_center(key);
            assert_eq!(obj.lambda(&c), 0.0);
            assert_eq!(obj.gradient(&c).norm(), 0.0);
        }
    }

    #[test]
    fn density_gradient_uses_central_and_one_sided_differences() {
        let grid = TimeGrid::new(0.5, 2).unwrap();
        let b = PhaseBox::uniform(1, 0.0, 1.0, 10).unwrap();
        let rho0 = SmoothedDelta::new(&[0.5], &b, 2).unwrap();
        let field = estimate_density(
            &LinearSystem::frozen(1, 1),
            &ControlLaw::zeros(grid, 1, 1),
            &rho0,
            &b,
            &MonteCarloOptions {
                trackmax: 5000,
                ..Default::default()
            },
            &Sequential,
        )
        .unwrap();
        let psi = TargetDensity::from_kernel(&SmoothedDelta::new(&[0.3], &b, 1).unwrap(), &b);
        let obj = TerminalObjective::Density {
            field: &field,
            psi: &psi,
        };
        let lam = |x: f64| obj.lambda(&[x]);
        // interior occupied cell: both neighbors occupied
        let central = (lam(0.55) - lam(0.35)) / 0.2;
        assert!((obj.gradient(&[0.45])[0] - central).abs() < 1e-9);
        // last occupied cell: forward neighbor empty
        let one_sided = (lam(0.65) - lam(0.55)) / 0.1;
        assert!((obj.gradient(&[0.65])[0] - one_sided).abs() < 1e-9);
    }
}
