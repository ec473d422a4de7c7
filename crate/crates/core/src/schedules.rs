//! Gain and feedforward schedules on a uniform time grid.

use alloc::format;
use alloc::vec::Vec;
use core::ops::{Mul, Sub};

use nalgebra::{DMatrix, DVector};

use crate::error::invalid;
use crate::{Error, Result};

/// Uniform grid `t_i = i T / N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    intervals: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, intervals: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", format!("must be positive, got {horizon}")));
        }
        if intervals < 2 {
            return Err(invalid("intervals", "need at least two intervals"));
        }
        Ok(Self { horizon, intervals })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.intervals {
            self.horizon
        } else {
            i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.intervals).map(move |i| self.node(i))
    }

    /// Same horizon with every interval split into `factor` pieces.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            intervals: self.intervals * factor.max(1),
        }
    }

    /// Interval index `i` and weight `w` with `t = (1 - w) t_i + w t_{i+1}`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let slack = 1e-12 * self.horizon;
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(Error::OutOfHorizon {
                t,
                horizon: self.horizon,
            });
        }
        let s = (t / self.step()).clamp(0.0, self.intervals as f64);
        let i = (s as usize).min(self.intervals - 1);
        Ok((i, s - i as f64))
    }
}

/// Nodal samples of `K(t)` (m x n) and `v(t)` (m).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw {
    grid: TimeGrid,
    gains: Vec<DMatrix<f64>>,
    feedforward: Vec<DVector<f64>>,
}

impl ControlLaw {
    pub fn new(grid: TimeGrid, gains: Vec<DMatrix<f64>>, feedforward: Vec<DVector<f64>>) -> Result<Self> {
        if gains.len() != grid.len() || feedforward.len() != grid.len() {
            return Err(Error::Shape(format!(
                "schedules have {} gains and {} feedforward samples for {} nodes",
                gains.len(),
                feedforward.len(),
                grid.len()
            )));
        }
        let (m, n) = gains[0].shape();
        for (k, v) in gains.iter().zip(&feedforward) {
            if k.shape() != (m, n) || v.len() != m {
                return Err(Error::Shape(format!("inconsistent gain shapes, expected {m}x{n}")));
            }
            if k.iter().chain(v.iter()).any(|e| !e.is_finite()) {
                return Err(invalid("law", "schedule entries must be finite"));
            }
        }
        Ok(Self {
            grid,
            gains,
            feedforward,
        })
    }

    /// `K = 0`, `v = 0` everywhere.
    pub fn zeros(grid: TimeGrid, controls: usize, states: usize) -> Self {
        Self {
            grid,
            gains: (0..grid.len()).map(|_| DMatrix::zeros(controls, states)).collect(),
            feedforward: (0..grid.len()).map(|_| DVector::zeros(controls)).collect(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn feedforward(&self) -> &[DVector<f64>] {
        &self.feedforward
    }

    pub fn control_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    /// `u = K(t) x + v(t)`, linear interpolation between nodes.
    pub fn eval(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let mut u = DVector::zeros(self.control_dim());
        self.eval_into(x.as_slice(), t, u.as_mut_slice())?;
        Ok(u)
    }

    pub fn eval_into(&self, x: &[f64], t: f64, u: &mut [f64]) -> Result<()> {
        let (i, w) = self.grid.locate(t)?;
        self.eval_at(x, i, w, u);
        Ok(())
    }

    pub(crate) fn eval_at(&self, x: &[f64], i: usize, w: f64, u: &mut [f64]) {
        let (k0, k1) = (&self.gains[i], &self.gains[i + 1]);
        let (v0, v1) = (&self.feedforward[i], &self.feedforward[i + 1]);
        let lo = 1.0 - w;
        for (r, out) in u.iter_mut().enumerate() {
            let mut acc = lo * v0[r] + w * v1[r];
            for (c, xc) in x.iter().enumerate() {
                acc += (lo * k0[(r, c)] + w * k1[(r, c)]) * xc;
            }
            *out = acc;
        }
    }

    pub fn gain_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (i, w) = self.grid.locate(t)?;
        Ok(&self.gains[i] * (1.0 - w) + &self.gains[i + 1] * w)
    }

    pub fn feedforward_at(&self, t: f64) -> Result<DVector<f64>> {
        let (i, w) = self.grid.locate(t)?;
        Ok(&self.feedforward[i] * (1.0 - w) + &self.feedforward[i + 1] * w)
    }

    /// Nodewise `K - eps dK`, `v - eps dv`.
    pub fn stepped(&self, dk: &[DMatrix<f64>], dv: &[DVector<f64>], eps: f64) -> Self {
        Self {
            grid: self.grid,
            gains: self.gains.iter().zip(dk).map(|(k, d)| k - d * eps).collect(),
            feedforward: self.feedforward.iter().zip(dv).map(|(v, d)| v - d * eps).collect(),
        }
    }

    pub fn derivatives(&self) -> Derivatives {
        time_derivatives(self)
    }
}

/// First and second time derivatives of a law's schedules at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub dk: Vec<DMatrix<f64>>,
    pub ddk: Vec<DMatrix<f64>>,
    pub dv: Vec<DVector<f64>>,
    pub ddv: Vec<DVector<f64>>,
}

/// Centered differences inside, one-sided first-order differences at the ends.
pub fn differentiate<T>(samples: &[T], step: f64) -> Vec<T>
where
    T: Clone + Mul<f64, Output = T>,
    for<'a> &'a T: Sub<&'a T, Output = T>,
{
    let n = samples.len();
    assert!(n >= 3, "differentiation needs at least three samples");
    let mut out = Vec::with_capacity(n);
    out.push((&samples[1] - &samples[0]) * (1.0 / step));
    for i in 1..n - 1 {
        out.push((&samples[i + 1] - &samples[i - 1]) * (0.5 / step));
    }
    out.push((&samples[n - 1] - &samples[n - 2]) * (1.0 / step));
    out
}

/// Derivatives of `K` and `v`; second derivatives reuse the first-derivative
/// stencil on the first-derivative sequence.
pub fn time_derivatives(law: &ControlLaw) -> Derivatives {
    let h = law.grid.step();
    let dk = differentiate(&law.gains, h);
    let ddk = differentiate(&dk, h);
    let dv = differentiate(&law.feedforward, h);
    let ddv = differentiate(&dv, h);
    Derivatives { dk, ddk, dv, ddv }
}
