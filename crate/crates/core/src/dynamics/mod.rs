//! System interface plus the two-link arm and a linear test plant.

mod arm;
mod linear;

pub use arm::{
    bias, fk_jacobian, forward_kinematics, inverse_kinematics, mass_matrix, ArmParams, ArmState, JacobianMode,
    TwoLinkArm,
};
pub use linear::LinearSystem;

use alloc::vec;
use nalgebra::{DMatrix, DVector};

use crate::Result;

/// A controlled vector field `x' = f(x, u)`.
///
/// Implementations write into caller-owned buffers so that Monte Carlo
/// rollouts stay allocation free.
pub trait System: Sync {
    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    /// Evaluate `f(x, u)` into `xdot`.
    fn dynamics(&self, x: &[f64], u: &[f64], xdot: &mut [f64]) -> Result<()>;

    /// `(A, B) = (df/dx, df/du)` at `(x, u)`.
    fn jacobians(&self, x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        finite_difference_jacobians(self, x, u)
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.state_dim());
        self.dynamics(x.as_slice(), u.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }
}

/// Map from state to task coordinates (end-effector position and velocity
/// for an arm), with the pieces the initializer and endpoint cost need.
pub trait TaskSpace {
    fn task_dim(&self) -> usize;

    fn task_map(&self, x: &[f64]) -> DVector<f64>;

    fn task_jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    /// A state whose task image is `target`.
    fn goal_state(&self, target: &[f64]) -> Result<DVector<f64>>;

    /// Control that produces zero acceleration at `x`.
    fn holding_control(&self, x: &[f64]) -> DVector<f64>;
}

fn fd_step(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

/// Central-difference Jacobians of any [`System`].
pub fn finite_difference_jacobians<S: System + ?Sized>(
    system: &S,
    x: &[f64],
    u: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = system.state_dim();
    let m = system.control_dim();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];

    let mut xp = x.to_vec();
    for j in 0..n {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        system.dynamics(&xp, u, &mut plus)?;
        xp[j] = x[j] - h;
        system.dynamics(&xp, u, &mut minus)?;
        xp[j] = x[j];
        for i in 0..n {
            a[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }

    let mut up = u.to_vec();
    for j in 0..m {
        let h = fd_step(u[j]);
        up[j] = u[j] + h;
        system.dynamics(x, &up, &mut plus)?;
        up[j] = u[j] - h;
        system.dynamics(x, &up, &mut minus)?;
        up[j] = u[j];
        for i in 0..n {
            b[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok((a, b))
}

/// Central-difference Jacobian of a vector map.
pub fn finite_difference_map<F>(map: F, x: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let base = map(x);
    let mut jac = DMatrix::zeros(base.len(), x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let plus = map(&xp);
        xp[j] = x[j] - h;
        let minus = map(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// `||a - b||_F / max(||b||_F, floor)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}
