use alloc::format;
use nalgebra::{DMatrix, DVector};

use super::{System, TaskSpace};
use crate::{Error, Result};

/// `x' = A x + B u`. Used as a test plant with known closed-form behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.nrows() {
            return Err(Error::Shape(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    /// Scalar plant `x' = a x + b u`.
    pub fn scalar(a: f64, b: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
        }
    }

    /// `x' = 0` in `n` dimensions with `m` inert inputs.
    pub fn frozen(n: usize, m: usize) -> Self {
        Self {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, m),
        }
    }
}

impl System for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dynamics(&self, x: &[f64], u: &[f64], xdot: &mut [f64]) -> Result<()> {
        for (i, out) in xdot.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            *out = acc;
        }
        Ok(())
    }

    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Identity task map: the task coordinates are the state itself.
impl TaskSpace for LinearSystem {
    fn task_dim(&self) -> usize {
        self.state_dim()
    }

    fn task_map(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn task_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.state_dim(), self.state_dim())
    }

    fn goal_state(&self, target: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(target))
    }

    fn holding_control(&self, x: &[f64]) -> DVector<f64> {
        let drift = &self.a * DVector::from_column_slice(x);
        match self.b.clone().pseudo_inverse(1e-12) {
            Ok(pinv) => -(pinv * drift),
            Err(_) => DVector::zeros(self.control_dim()),
        }
    }
}
