//! Update directions for the gain and feedforward schedules.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::adjoint::AdjointSchedule;
use crate::density::{DensityField, PhaseBox};
use crate::dynamics::System;
use crate::error::invalid;
use crate::rollout::Trajectory;
use crate::schedules::{ControlLaw, TimeGrid};
use crate::{Error, Result};

/// Nodewise residual directions `dK`, `dv`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub grid: TimeGrid,
    pub dk: Vec<DMatrix<f64>>,
    pub dv: Vec<DVector<f64>>,
    /// Density looked up along the trajectory at each node.
    pub density: Vec<f64>,
    /// Nodes whose density came from the occupied-neighbor fallback.
    pub fallback_nodes: usize,
}

impl UpdateDirection {
    pub fn negated(&self) -> Self {
        Self {
            dk: self.dk.iter().map(|m| -m).collect(),
            dv: self.dv.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dk.iter().all(|m| m.iter().all(|v| *v == 0.0)) && self.dv.iter().all(|v| v.iter().all(|e| *e == 0.0))
    }

    /// `sqrt(sum_i |dK_i|_F^2 + |dv_i|^2)`.
    pub fn norm(&self) -> f64 {
        let sq: f64 = self.dk.iter().map(|m| m.norm_squared()).sum::<f64>()
            + self.dv.iter().map(|v| v.norm_squared()).sum::<f64>();
        libm::sqrt(sq)
    }
}

/// Density along `traj`, with the neighbor fallback for empty cells.
pub fn densities_along(field: &DensityField, traj: &Trajectory) -> (Vec<f64>, usize) {
    let mut fallbacks = 0;
    let rho = traj
        .states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let (rho, fallback) = field.density_at_or_neighbors(x.as_slice(), i);
            fallbacks += usize::from(fallback);
            rho
        })
        .collect();
    (rho, fallbacks)
}

/// Directions from explicit per-node densities.
///
/// `dv = -rho B^T g + v'' + 2 K' f + K (A f + B K f + B v')` and
/// `dK = K'' + K B K'`, with `A`, `B`, `f` evaluated along `traj`.
pub fn direction_with_density<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    traj: &Trajectory,
    density: Vec<f64>,
    adj: &AdjointSchedule,
) -> Result<UpdateDirection> {
    let grid = *law.grid();
    if traj.grid != grid || adj.grid != grid || density.len() != grid.len() {
        return Err(Error::Shape(format!(
            "law, trajectory, multiplier and density must share a {}-node grid",
            grid.len()
        )));
    }
    let d = law.derivatives();
    let mut dk = Vec::with_capacity(grid.len());
    let mut dv = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (x, u) = (&traj.states[i], &traj.controls[i]);
        let (a, b) = system.jacobians(x.as_slice(), u.as_slice())?;
        let f = system.f(x, u)?;
        let k = &law.gains()[i];
        let kf = k * &f;
        let inner = &a * &f + &b * &kf + &b * &d.dv[i];
        dv.push(-(b.transpose() * &adj.grad[i]) * density[i] + &d.ddv[i] + &d.dk[i] * &f * 2.0 + k * inner);
        dk.push(&d.ddk[i] + k * &b * &d.dk[i]);
    }
    Ok(UpdateDirection {
        grid,
        dk,
        dv,
        density,
        fallback_nodes: 0,
    })
}

/// Directions with the density read from `field` along `traj`.
pub fn compute_direction<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    traj: &Trajectory,
    field: &DensityField,
    adj: &AdjointSchedule,
) -> Result<UpdateDirection> {
    let (density, fallback_nodes) = densities_along(field, traj);
    let mut dir = direction_with_density(system, law, traj, density, adj)?;
    dir.fallback_nodes = fallback_nodes;
    Ok(dir)
}

/// Nodewise `K - eps dK`, `v - eps dv`.
pub fn apply(law: &ControlLaw, dir: &UpdateDirection, eps: f64) -> Result<ControlLaw> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(
            "eps",
            format!("step must be finite and non-negative, got {eps}"),
        ));
    }
    if dir.grid != *law.grid() {
        return Err(Error::Shape("direction and law grids differ".into()));
    }
    Ok(law.stepped(&dir.dk, &dir.dv, eps))
}

/// Extremes of `|(K' + K A) dx| / |K dx|` over nodes and probe directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipticity {
    pub c1: f64,
    pub c2: f64,
}

impl Ellipticity {
    /// `2 c2^2 / c1^2`; `None` when `c1` is zero.
    pub fn step_bound(&self) -> Option<f64> {
        (self.c1 > 0.0).then(|| 2.0 * self.c2 * self.c2 / (self.c1 * self.c1))
    }
}

/// Probes are the coordinate directions scaled to the box half-widths.
pub fn ellipticity_constants<S: System + ?Sized>(
    system: &S,
    law: &ControlLaw,
    traj: &Trajectory,
    phase_box: &PhaseBox,
) -> Result<Ellipticity> {
    let n = law.state_dim();
    if phase_box.dim() != n {
        return Err(Error::Shape(format!("{}-D box for a {n}-D law", phase_box.dim())));
    }
    let d = law.derivatives();
    let (mut c1, mut c2) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..law.grid().len() {
        let (a, _) = system.jacobians(traj.states[i].as_slice(), traj.controls[i].as_slice())?;
        let k = &law.gains()[i];
        let rate = &d.dk[i] + k * a;
        for j in 0..n {
            let half = 0.5 * (phase_box.upper()[j] - phase_box.lower()[j]);
            let denom = k.column(j).norm() * half;
            if denom == 0.0 {
                continue;
            }
            let ratio = rate.column(j).norm() * half / denom;
            c1 = c1.max(ratio);
            c2 = c2.min(ratio);
        }
    }
    if c1 == f64::NEG_INFINITY {
        return Err(Error::DegenerateGain);
    }
    Ok(Ellipticity { c1, c2 })
}
