//! Initial `(K, v)` from a reference motion and a backward Riccati sweep.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{System, TaskSpace};
use crate::error::invalid;
use crate::rollout::{integrate_closed_loop, rk4_step, RolloutOptions};
use crate::schedules::{ControlLaw, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiOptions {
    /// RK4 steps per grid interval.
    pub substeps: usize,
    /// Largest admissible `||P||_F`.
    pub blowup_bound: f64,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            substeps: 4,
            blowup_bound: 1e12,
        }
    }
}

/// `P(t_i)` at every node, `P(T) = P_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub p: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// Largest `||P - P^T||_F` over the nodes.
    pub fn symmetry_drift(&self) -> f64 {
        self.p.iter().map(|p| (p - p.transpose()).norm()).fold(0.0, f64::max)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn interpolate(seq: &[DMatrix<f64>], i: usize, w: f64) -> DMatrix<f64> {
    &seq[i] * (1.0 - w) + &seq[i + 1] * w
}

fn check_weights(r: &DMatrix<f64>, p_f: &DMatrix<f64>, n: usize, m: usize) -> Result<()> {
    if r.shape() != (m, m) || p_f.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "R is {}x{} and P_f is {}x{}, expected {m}x{m} and {n}x{n}",
            r.nrows(),
            r.ncols(),
            p_f.nrows(),
            p_f.ncols()
        )));
    }
    if (r - r.transpose()).norm() > 1e-12 * r.norm() || r.clone().cholesky().is_none() {
        return Err(invalid("R", "must be symmetric positive definite"));
    }
    if (p_f - p_f.transpose()).norm() > 1e-12 * p_f.norm().max(1.0) {
        return Err(invalid("P_f", "must be symmetric"));
    }
    let smallest = p_f.clone().symmetric_eigenvalues().min();
    if smallest < -1e-12 * p_f.norm().max(1.0) {
        return Err(invalid(
            "P_f",
            format!("must be positive semidefinite (eigenvalue {smallest})"),
        ));
    }
    Ok(())
}

/// Integrate `-P' = P A + A^T P - P B R^-1 B^T P` backward from `P(T) = P_f`.
///
/// `A` and `B` are given at the nodes and interpolated linearly in between.
/// When `P_f` is positive definite the sweep runs on `S = P^-1`, which obeys
/// the linear equation `S' = A S + S A^T - B R^-1 B^T`; large terminal
/// weights are stiff in `P` but benign in `S`. A singular `P_f` is
/// integrated directly.
pub fn solve_riccati_backward(
    a_sched: &[DMatrix<f64>],
    b_sched: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
    grid: TimeGrid,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    if a_sched.len() != grid.len() || b_sched.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} A and {} B samples for {} nodes",
            a_sched.len(),
            b_sched.len(),
            grid.len()
        )));
    }
    if opts.substeps == 0 {
        return Err(invalid("substeps", "must be at least 1"));
    }
    let (n, m) = b_sched[0].shape();
    check_weights(r, p_f, n, m)?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| invalid("R", "singular"))?;

    let information = p_f.clone().cholesky().is_some();
    let mut y = if information {
        symmetrize(&p_f.clone().try_inverse().ok_or_else(|| invalid("P_f", "singular"))?)
    } else {
        p_f.clone()
    };

    let dt = grid.step();
    let h = dt / opts.substeps as f64;
    let mut p = alloc::vec![DMatrix::zeros(n, n); grid.len()];
    p[grid.intervals()] = p_f.clone();

    for i in (0..grid.intervals()).rev() {
        for s in 0..opts.substeps {
            // local time measured from t_i; stepping from t_{i+1} toward t_i
            let tau = dt - s as f64 * h;
            y = rk4_step(
                |tau, y| {
                    let w = (tau / dt).clamp(0.0, 1.0);
                    let a = interpolate(a_sched, i, w);
                    let b = interpolate(b_sched, i, w);
                    let g = &b * &r_inv * b.transpose();
                    Ok(if information {
                        &a * y + y * a.transpose() - g
                    } else {
                        -(y * &a + a.transpose() * y - y * g * y)
                    })
                },
                tau,
                &y,
                -h,
            )?;
            y = symmetrize(&y);
        }
        let node_p = if information {
            y.clone().try_inverse().map(|p| symmetrize(&p))
        } else {
            Some(y.clone())
        };
        let t = grid.node(i);
        match node_p {
            Some(pi) if pi.norm() <= opts.blowup_bound => p[i] = pi,
            Some(pi) => return Err(Error::RiccatiBlowUp { t, norm: pi.norm() }),
            None => return Err(Error::RiccatiBlowUp { t, norm: f64::INFINITY }),
        }
    }
    Ok(RiccatiSolution { grid, p })
}

/// Nominal states `x*` and controls `u*` at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InitOptions {
    pub rollout: RolloutOptions,
    pub riccati: RiccatiOptions,
}

/// Reference motion toward the task-space `target`.
///
/// The dynamics are linearized once about `x_init` under the holding control,
/// a terminal-weighted LQR regulates toward the joint-space goal returned by
/// [`TaskSpace::goal_state`], and that feedback is rolled through the full
/// nonlinear dynamics. The Riccati gains are resolved on the rollout's
/// substep grid. The reference is not required to reach the target.
pub fn make_reference<S>(
    system: &S,
    x_init: &DVector<f64>,
    target: &[f64],
    grid: TimeGrid,
    r: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
    opts: &InitOptions,
) -> Result<Reference>
where
    S: System + TaskSpace + ?Sized,
{
    let goal = system.goal_state(target)?;
    let hold = system.holding_control(x_init.as_slice());
    let (a0, b0) = system.jacobians(x_init.as_slice(), hold.as_slice())?;

    let substeps = opts.rollout.substeps.max(1);
    let fine = grid.refined(substeps);
    let riccati = solve_riccati_backward(
        &alloc::vec![a0; fine.len()],
        &alloc::vec![b0.clone(); fine.len()],
        r,
        p_f,
        fine,
        &RiccatiOptions {
            substeps: 1,
            ..opts.riccati
        },
    )?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| invalid("R", "singular"))?;
    let gains: Vec<DMatrix<f64>> = riccati.p.iter().map(|p| -(&r_inv * b0.transpose() * p)).collect();
    let ff = gains.iter().map(|k| &hold - k * &goal).collect();
    let lqr = ControlLaw::new(fine, gains, ff)?;

    let traj = integrate_closed_loop(
        system,
        &lqr,
        x_init,
        &RolloutOptions {
            substeps: 1,
            ..opts.rollout
        },
    )?;
    Ok(Reference {
        states: traj.states.iter().step_by(substeps).cloned().collect(),
        controls: traj.controls.iter().step_by(substeps).cloned().collect(),
    })
}

/// `K0 = -R^-1 B^T P`, `v0 = u* + R^-1 B^T P x*` at every node.
pub fn initial_law(
    reference: &Reference,
    riccati: &RiccatiSolution,
    r: &DMatrix<f64>,
    b_sched: &[DMatrix<f64>],
) -> Result<ControlLaw> {
    let r_inv = r.clone().try_inverse().ok_or_else(|| invalid("R", "singular"))?;
    let mut gains = Vec::with_capacity(riccati.grid.len());
    let mut ff = Vec::with_capacity(riccati.grid.len());
    for i in 0..riccati.grid.len() {
        let k = -(&r_inv * b_sched[i].transpose() * &riccati.p[i]);
        ff.push(&reference.controls[i] - &k * &reference.states[i]);
        gains.push(k);
    }
    ControlLaw::new(riccati.grid, gains, ff)
}

/// Everything produced by the initialization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub reference: Reference,
    pub riccati: RiccatiSolution,
    pub law: ControlLaw,
}

/// Reference, Riccati sweep along it, and the resulting initial law.
pub fn initialize<S>(
    system: &S,
    x_init: &DVector<f64>,
    target: &[f64],
    grid: TimeGrid,
    r: &DMatrix<f64>,
    p_f: &DMatrix<f64>,
    opts: &InitOptions,
) -> Result<Initialization>
where
    S: System + TaskSpace + ?Sized,
{
    let reference = make_reference(system, x_init, target, grid, r, p_f, opts)?;
    let mut a_sched = Vec::with_capacity(grid.len());
    let mut b_sched = Vec::with_capacity(grid.len());
    for (x, u) in reference.states.iter().zip(&reference.controls) {
        let (a, b) = system.jacobians(x.as_slice(), u.as_slice())?;
        a_sched.push(a);
        b_sched.push(b);
    }
    let riccati = solve_riccati_backward(&a_sched, &b_sched, r, p_f, grid, &opts.riccati)?;
    let law = initial_law(&reference, &riccati, r, &b_sched)?;
    Ok(Initialization {
        reference,
        riccati,
        law,
    })
}
