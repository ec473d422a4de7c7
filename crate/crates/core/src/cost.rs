//! Attention functional: terminal cost plus the running cost on `du/dx` and
//! `du/dt` integrated over the whole box.
//!
//! For the affine law `u = K x + v` the box integral has a closed form in the
//! box's first and second moments, so no spatial quadrature is needed. Time
//! integrals use the trapezoid rule on the law's grid.

use nalgebra::DVector;

use crate::density::{terminal_mismatch, DensityField, PhaseBox, TargetDensity};
use crate::dynamics::TaskSpace;
use crate::schedules::ControlLaw;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub terminal: f64,
    pub attention_x: f64,
    pub attention_t: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(terminal: f64, attention_x: f64, attention_t: f64) -> Self {
        Self {
            terminal,
            attention_x,
            attention_t,
            total: terminal + attention_x + attention_t,
        }
    }
}

/// How the box integral of the running cost is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScale {
    /// Integral over the box, i.e. box volume times the box average.
    #[default]
    Volume,
    /// Box average only.
    Normalized,
}

fn trapezoid(values: impl ExactSizeIterator<Item = f64>, step: f64) -> f64 {
    let n = values.len();
    values
        .enumerate()
        .map(|(i, v)| if i == 0 || i + 1 == n { 0.5 * v } else { v })
        .sum::<f64>()
        * step
}

/// `(attention_x, attention_t)` for `law` over `phase_box`.
pub fn attention_running_cost(law: &ControlLaw, phase_box: &PhaseBox, scale: AttentionScale) -> (f64, f64) {
    let weight = match scale {
        AttentionScale::Volume => phase_box.volume(),
        AttentionScale::Normalized => 1.0,
    };
    let h = law.grid().step();
    let n = phase_box.dim();
    let center = DVector::from_iterator(n, (0..n).map(|d| phase_box.center(d)));
    let d = law.derivatives();
    let ax = trapezoid(law.gains().iter().map(|k| k.norm_squared()), h);
    let at = trapezoid(
        d.dk.iter().zip(&d.dv).map(|(dk, dv)| {
            let mean = dk * &center + dv;
            let spread: f64 = (0..n)
                .map(|j| dk.column(j).norm_squared() * phase_box.variance(j))
                .sum();
            mean.norm_squared() + spread
        }),
        h,
    );
    (weight * ax, weight * at)
}

/// `gamma sum_k w |phi(x_k) - phi_f|^2` with equal weights `weight`.
pub fn terminal_cost_endpoint(
    samples: &[DVector<f64>],
    weight: f64,
    gamma: f64,
    task: &dyn TaskSpace,
    target: &[f64],
) -> f64 {
    let target = DVector::from_column_slice(target);
    gamma
        * weight
        * samples
            .iter()
            .map(|x| (task.task_map(x.as_slice()) - &target).norm_squared())
            .sum::<f64>()
}

/// `int (rho_T - psi)^2 dx`.
pub fn terminal_cost_density(field: &DensityField, psi: &TargetDensity) -> f64 {
    terminal_mismatch(field, psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{estimate_density, MonteCarloOptions, Sequential, SmoothedDelta};
    use crate::dynamics::LinearSystem;
    use crate::schedules::TimeGrid;
    use alloc::vec;
    use alloc::vec::Vec;
    use nalgebra::DMatrix;

    fn arm_box() -> PhaseBox {
        PhaseBox::new(
            vec![-5.0, -5.0, -300.0, -300.0],
            vec![5.0, 5.0, 300.0, 300.0],
            vec![64; 4],
        )
        .unwrap()
    }

    fn law(grid: TimeGrid, k: impl Fn(f64) -> DMatrix<f64>, v: impl Fn(f64) -> DVector<f64>) -> ControlLaw {
        ControlLaw::new(grid, grid.nodes().map(&k).collect(), grid.nodes().map(&v).collect()).unwrap()
    }

    #[test]
    fn constant_feedforward_costs_nothing() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let l = law(grid, |_| DMatrix::zeros(2, 4), |_| DVector::from_vec(vec![0.3, -1.0]));
        assert_eq!(
            attention_running_cost(&l, &arm_box(), AttentionScale::Volume),
            (0.0, 0.0)
        );
    }

    #[test]
    fn ramp_feedforward_closed_form() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let c = DVector::from_vec(vec![2.0, -3.0]);
        let l = law(grid, |_| DMatrix::zeros(2, 4), |t| &c * t);
        let b = arm_box();
        let (ax, at) = attention_running_cost(&l, &b, AttentionScale::Volume);
        assert_eq!(ax, 0.0);
        let expect = b.volume() * c.norm_squared() * 0.5;
        assert!((at - expect).abs() < 1e-9 * expect);
        let (_, at) = attention_running_cost(&l, &b, AttentionScale::Normalized);
        assert!((at - c.norm_squared() * 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_gain_closed_form() {
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let k = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.1, 0.0, -1.0, 0.5, 0.0, 0.2]);
        let l = law(grid, |_| k.clone(), |_| DVector::zeros(2));
        let b = arm_box();
        let (ax, at) = attention_running_cost(&l, &b, AttentionScale::Volume);
        let expect = b.volume() * k.norm_squared() * 0.5;
        assert!((ax - expect).abs() < 1e-9 * expect);
        assert_eq!(at, 0.0);
    }

    #[test]
    fn time_term_matches_box_quadrature() {
        // 2-D box, off-center, u = (1 + t) k x + t v0; midpoint rule over a fine grid
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let b = PhaseBox::new(vec![-1.0, 0.5], vec![2.0, 3.0], vec![4, 4]).unwrap();
        let k0 = DMatrix::from_row_slice(1, 2, &[0.7, -1.3]);
        let v0 = DVector::from_element(1, 0.4);
        let l = law(grid, |t| &k0 * (1.0 + t), |t| &v0 * t);
        let (_, at) = attention_running_cost(&l, &b, AttentionScale::Volume);
        let m = 200;
        let (hx, hy) = (3.0 / m as f64, 2.5 / m as f64);
        let mut box_integral = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = -1.0 + (i as f64 + 0.5) * hx;
                let y = 0.5 + (j as f64 + 0.5) * hy;
                let rate = 0.7 * x - 1.3 * y + 0.4;
                box_integral += rate * rate * hx * hy;
            }
        }
        let expect = box_integral * 0.5;
        assert!((at - expect).abs() < 1e-4 * expect, "{at} vs {expect}");
    }

    #[test]
    fn scaling_and_invariance() {
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let b = arm_box();
        let k = |t: f64| DMatrix::from_row_slice(2, 4, &[1.0 + t, 2.0, 0.1 * t * t, 0.0, -1.0, 0.5, 0.0, 0.2 - t]);
        let l1 = law(grid, k, |t| DVector::from_vec(vec![t, -t * t]));
        let l2 = law(grid, |t| k(t) * 2.0, |t| DVector::from_vec(vec![2.0 * t, -2.0 * t * t]));
        let l3 = law(grid, k, |t| DVector::from_vec(vec![5.0 - t, 3.0 * t * t * t]));
        let (ax1, at1) = attention_running_cost(&l1, &b, AttentionScale::Volume);
        let (ax2, at2) = attention_running_cost(&l2, &b, AttentionScale::Volume);
        let (ax3, _) = attention_running_cost(&l3, &b, AttentionScale::Volume);
        assert!((ax2 - 4.0 * ax1).abs() < 1e-9 * ax2);
        assert!((at2 - 4.0 * at1).abs() < 1e-9 * at2);
        assert_eq!(ax1, ax3);
        let big = PhaseBox::new(
            vec![-6.0, -5.0, -300.0, -300.0],
            vec![5.0, 5.0, 300.0, 300.0],
            vec![64; 4],
        )
        .unwrap();
        assert!(attention_running_cost(&l1, &big, AttentionScale::Volume).0 >= ax1);
    }

    #[test]
    fn endpoint_cost_examples() {
        let sys = LinearSystem::frozen(2, 1);
        let target = [0.5, -0.5];
        let at_target = vec![DVector::from_column_slice(&target); 3];
        assert_eq!(terminal_cost_endpoint(&at_target, 1.0 / 3.0, 1e6, &sys, &target), 0.0);
        let one = vec![DVector::from_vec(vec![0.5, -0.2])];
        assert!((terminal_cost_endpoint(&one, 1.0, 1e6, &sys, &target) - 1e6 * 0.09).abs() < 1e-6);
    }

    #[test]
    fn endpoint_cost_under_frozen_flow_matches_kernel_moments() {
        // identity task map: E|x - phi_f|^2 = |x_c - phi_f|^2 + sum of kernel variances
        let grid = TimeGrid::new(0.5, 5).unwrap();
        let b = PhaseBox::uniform(2, -2.0, 2.0, 40).unwrap();
        let kernel = SmoothedDelta::new(&[0.3, -0.2], &b, 8).unwrap();
        let sys = LinearSystem::frozen(2, 1);
        let trackmax = 20_000;
        let field = estimate_density(
            &sys,
            &ControlLaw::zeros(grid, 1, 2),
            &kernel,
            &b,
            &MonteCarloOptions {
                trackmax,
                seed: 2,
                ..Default::default()
            },
            &Sequential,
        )
        .unwrap();
        let target = [0.0, 0.0];
        let gamma = 1e6;
        let got = terminal_cost_endpoint(field.terminal_samples(), 1.0 / trackmax as f64, gamma, &sys, &target);
        let var: f64 = kernel.variances().iter().sum();
        let expect = gamma * (0.3f64 * 0.3 + 0.2 * 0.2 + var);
        let sq: Vec<f64> = field.terminal_samples().iter().map(|x| x.norm_squared()).collect();
        let mean = sq.iter().sum::<f64>() / trackmax as f64;
        let sd = libm::sqrt(sq.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / trackmax as f64);
        let tol = 4.0 * gamma * sd / libm::sqrt(trackmax as f64);
        assert!((got - expect).abs() < tol, "{got} vs {expect} (tol {tol})");
    }

    #[test]
    fn breakdown_totals() {
        let c = CostBreakdown::new(1.0, 2.0, 3.5);
        assert_eq!(c.total, 6.5);
    }
}
