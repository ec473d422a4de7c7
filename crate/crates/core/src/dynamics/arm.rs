//! Planar two-link arm: `tau = M(q) q'' + b(q, q')`, state `x = (q1, q2, q1', q2')`.

use alloc::format;
use libm::{acos, atan2, cos, sin, sqrt};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::{finite_difference_jacobians, System, TaskSpace};
use crate::error::invalid;
use crate::{Error, Result};

/// Link geometry, inertia, joint viscosity and gravity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmParams {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    /// Distance from joint to the link's center of mass.
    pub s1: f64,
    pub s2: f64,
    pub i1: f64,
    pub i2: f64,
    pub b11: f64,
    pub b12: f64,
    pub b21: f64,
    pub b22: f64,
    pub g: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            l1: 0.30,
            l2: 0.33,
            m1: 1.4,
            m2: 1.0,
            s1: 0.11,
            s2: 0.16,
            i1: 0.025,
            i2: 0.045,
            b11: 0.05,
            b12: 0.025,
            b21: 0.025,
            b22: 0.05,
            g: 0.0,
        }
    }
}

impl ArmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("m1", self.m1),
            ("m2", self.m2),
            ("s1", self.s1),
            ("s2", self.s2),
            ("i1", self.i1),
            ("i2", self.i2),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(name, format!("must be positive, got {value}")));
            }
        }
        for (name, value) in [
            ("b11", self.b11),
            ("b12", self.b12),
            ("b21", self.b21),
            ("b22", self.b22),
            ("g", self.g),
        ] {
            if !value.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.s1 > self.l1 {
            return Err(invalid("s1", "center of mass lies beyond link 1"));
        }
        if self.s2 > self.l2 {
            return Err(invalid("s2", "center of mass lies beyond link 2"));
        }
        Ok(())
    }

    /// Maximum distance from the shoulder to the end effector.
    pub fn reach(&self) -> f64 {
        self.l1 + self.l2
    }

    fn coupling(&self) -> f64 {
        self.m2 * self.l1 * self.s2
    }
}

/// Named view of the arm state vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArmState {
    pub q1: f64,
    pub q2: f64,
    pub dq1: f64,
    pub dq2: f64,
}

impl ArmState {
    pub fn new(q1: f64, q2: f64, dq1: f64, dq2: f64) -> Self {
        Self { q1, q2, dq1, dq2 }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_column_slice(&[self.q1, self.q2, self.dq1, self.dq2])
    }
}

pub fn mass_matrix(params: &ArmParams, q: [f64; 2]) -> Matrix2<f64> {
    let c = params.coupling() * cos(q[1]);
    let m11 = params.i1 + params.i2 + 2.0 * c + params.m2 * params.l1 * params.l1;
    let m12 = params.i2 + c;
    Matrix2::new(m11, m12, m12, params.i2)
}

/// Coriolis, viscous and gravity torques.
///
/// The shoulder Coriolis term uses `(2 q1' + q2') q2' sin q2` and the shoulder
/// gravity term uses link 2's mass, matching the elbow row.
pub fn bias(params: &ArmParams, q: [f64; 2], dq: [f64; 2]) -> Vector2<f64> {
    let c = params.coupling();
    let s2 = sin(q[1]);
    let s1 = sin(q[0]);
    let s12 = sin(q[0] + q[1]);
    let b1 = -c * (2.0 * dq[0] + dq[1]) * dq[1] * s2
        + params.b11 * dq[0]
        + params.b12 * dq[1]
        + params.g * ((params.m1 * params.s1 + params.m2 * params.l1) * s1 + params.m2 * params.s2 * s12);
    let b2 = c * dq[0] * dq[0] * s2 + params.b22 * dq[1] + params.b21 * dq[0] + params.g * params.m2 * params.s2 * s12;
    Vector2::new(b1, b2)
}

/// End-effector position and velocity `(X, Y, X', Y')`.
pub fn forward_kinematics(params: &ArmParams, x: &[f64]) -> DVector<f64> {
    let (q1, q2, w1, w2) = (x[0], x[1], x[2], x[3]);
    let (s1, c1) = (sin(q1), cos(q1));
    let (s12, c12) = (sin(q1 + q2), cos(q1 + q2));
    let w12 = w1 + w2;
    DVector::from_column_slice(&[
        params.l1 * c1 + params.l2 * c12,
        params.l1 * s1 + params.l2 * s12,
        -params.l1 * w1 * s1 - params.l2 * w12 * s12,
        params.l1 * w1 * c1 + params.l2 * w12 * c12,
    ])
}

pub fn fk_jacobian(params: &ArmParams, x: &[f64]) -> DMatrix<f64> {
    let (q1, q2, w1, w2) = (x[0], x[1], x[2], x[3]);
    let (s1, c1) = (sin(q1), cos(q1));
    let (s12, c12) = (sin(q1 + q2), cos(q1 + q2));
    let (l1, l2) = (params.l1, params.l2);
    let w12 = w1 + w2;

    let dx_dq1 = -l1 * s1 - l2 * s12;
    let dx_dq2 = -l2 * s12;
    let dy_dq1 = l1 * c1 + l2 * c12;
    let dy_dq2 = l2 * c12;

    #[rustfmt::skip]
    let jac = DMatrix::from_row_slice(4, 4, &[
        dx_dq1, dx_dq2, 0.0, 0.0,
        dy_dq1, dy_dq2, 0.0, 0.0,
        -l1 * w1 * c1 - l2 * w12 * c12, -l2 * w12 * c12, dx_dq1, dx_dq2,
        -l1 * w1 * s1 - l2 * w12 * s12, -l2 * w12 * s12, dy_dq1, dy_dq2,
    ]);
    jac
}

/// Joint state reaching the end-effector `target = (X, Y[, X', Y'])`.
///
/// Takes the `q2 >= 0` elbow branch; at the outer workspace boundary this is
/// `q2 = 0`.
pub fn inverse_kinematics(params: &ArmParams, target: &[f64]) -> Result<ArmState> {
    let (px, py) = (target[0], target[1]);
    let distance = sqrt(px * px + py * py);
    let (l1, l2) = (params.l1, params.l2);
    let slack = 1e-12 * params.reach();
    if distance > params.reach() + slack || distance < (l1 - l2).abs() - slack {
        return Err(Error::UnreachableTarget {
            distance,
            reach: params.reach(),
        });
    }
    let cos_elbow = ((distance * distance - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = acos(cos_elbow);
    let q1 = atan2(py, px) - atan2(l2 * sin(q2), l1 + l2 * cos(q2));

    let (mut dq1, mut dq2) = (0.0, 0.0);
    if target.len() >= 4 && (target[2] != 0.0 || target[3] != 0.0) {
        let jac = fk_jacobian(params, &[q1, q2, 0.0, 0.0]);
        let pos = Matrix2::new(jac[(0, 0)], jac[(0, 1)], jac[(1, 0)], jac[(1, 1)]);
        let inv = pos.try_inverse().ok_or(Error::UnreachableTarget {
            distance,
            reach: params.reach(),
        })?;
        let rates = inv * Vector2::new(target[2], target[3]);
        dq1 = rates[0];
        dq2 = rates[1];
    }
    Ok(ArmState::new(q1, q2, dq1, dq2))
}

/// How [`TwoLinkArm`] forms `df/dx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    #[default]
    Analytic,
    FiniteDifference,
}

/// The arm as a [`System`] with end-effector [`TaskSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLinkArm {
    pub params: ArmParams,
    pub jacobian_mode: JacobianMode,
    /// Largest mass-matrix condition number accepted before reporting singularity.
    pub max_condition: f64,
}

impl TwoLinkArm {
    pub fn new(params: ArmParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            jacobian_mode: JacobianMode::Analytic,
            max_condition: 1e8,
        })
    }

    fn inverse_mass(&self, q: [f64; 2]) -> Result<Matrix2<f64>> {
        let m = mass_matrix(&self.params, q);
        let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
        let gap = 0.5 * (m[(0, 0)] - m[(1, 1)]);
        let spread = sqrt(gap * gap + m[(0, 1)] * m[(0, 1)]);
        let (hi, lo) = (half_trace + spread, half_trace - spread);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= self.max_condition) {
            return Err(Error::SingularMass { condition });
        }
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
    }

    fn analytic_jacobians(&self, x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = &self.params;
        let (q1, q2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let minv = self.inverse_mass([q1, q2])?;
        let torque = Vector2::new(u[0], u[1]) - bias(p, [q1, q2], [w1, w2]);
        let accel = minv * torque;

        let c = p.coupling();
        let (s2, c2) = (sin(q2), cos(q2));
        let c1 = cos(q1);
        let c12 = cos(q1 + q2);
        let grav12 = p.g * p.m2 * p.s2 * c12;

        // db/dq and db/dq'
        let db_dq = Matrix2::new(
            p.g * (p.m1 * p.s1 + p.m2 * p.l1) * c1 + grav12,
            -c * (2.0 * w1 + w2) * w2 * c2 + grav12,
            grav12,
            c * w1 * w1 * c2 + grav12,
        );
        let db_dw = Matrix2::new(
            -2.0 * c * w2 * s2 + p.b11,
            -2.0 * c * (w1 + w2) * s2 + p.b12,
            2.0 * c * w1 * s2 + p.b21,
            p.b22,
        );
        // dM/dq2 (dM/dq1 = 0)
        let dm_dq2 = Matrix2::new(-2.0 * c * s2, -c * s2, -c * s2, 0.0);

        let mut dacc_dq = -minv * db_dq;
        let extra = -minv * dm_dq2 * accel;
        dacc_dq[(0, 1)] += extra[0];
        dacc_dq[(1, 1)] += extra[1];
        let dacc_dw = -minv * db_dw;

        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        for i in 0..2 {
            for j in 0..2 {
                a[(2 + i, j)] = dacc_dq[(i, j)];
                a[(2 + i, 2 + j)] = dacc_dw[(i, j)];
            }
        }
        let mut b = DMatrix::zeros(4, 2);
        for i in 0..2 {
            for j in 0..2 {
                b[(2 + i, j)] = minv[(i, j)];
            }
        }
        Ok((a, b))
    }
}

impl System for TwoLinkArm {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &[f64], u: &[f64], xdot: &mut [f64]) -> Result<()> {
        let minv = self.inverse_mass([x[0], x[1]])?;
        let torque = Vector2::new(u[0], u[1]) - bias(&self.params, [x[0], x[1]], [x[2], x[3]]);
        let accel = minv * torque;
        xdot[0] = x[2];
        xdot[1] = x[3];
        xdot[2] = accel[0];
        xdot[3] = accel[1];
        Ok(())
    }

    fn jacobians(&self, x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self.jacobian_mode {
            JacobianMode::Analytic => self.analytic_jacobians(x, u),
            JacobianMode::FiniteDifference => finite_difference_jacobians(self, x, u),
        }
    }
}

impl TaskSpace for TwoLinkArm {
    fn task_dim(&self) -> usize {
        4
    }

    fn task_map(&self, x: &[f64]) -> DVector<f64> {
        forward_kinematics(&self.params, x)
    }

    fn task_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        fk_jacobian(&self.params, x)
    }

    fn goal_state(&self, target: &[f64]) -> Result<DVector<f64>> {
        Ok(inverse_kinematics(&self.params, target)?.to_vector())
    }

    fn holding_control(&self, x: &[f64]) -> DVector<f64> {
        let b = bias(&self.params, [x[0], x[1]], [x[2], x[3]]);
        DVector::from_column_slice(b.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{finite_difference_map, relative_error};
    use core::f64::consts::{FRAC_PI_2, PI};

    fn arm() -> TwoLinkArm {
        TwoLinkArm::new(ArmParams::default()).unwrap()
    }

    #[test]
    fn mass_matrix_at_straight_arm() {
        let p = ArmParams::default();
        let m = mass_matrix(&p, [0.0, 0.0]);
        assert!((m[(0, 0)] - 0.256).abs() < 1e-12);
        assert!((m[(0, 1)] - (p.i2 + p.m2 * p.l1 * p.s2)).abs() < 1e-15);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
        assert_eq!(m[(1, 1)], p.i2);
    }

    #[test]
    fn mass_matrix_at_right_elbow() {
        let p = ArmParams::default();
        let m = mass_matrix(&p, [0.7, FRAC_PI_2]);
        assert!((m[(0, 0)] - (p.i1 + p.i2 + p.m2 * p.l1 * p.l1)).abs() < 1e-15);
        assert!((m[(0, 1)] - p.i2).abs() < 1e-15);
    }

    #[test]
    fn mass_matrix_positive_definite_over_elbow_sweep() {
        let p = ArmParams::default();
        for k in 0..=720 {
            let q2 = -PI + 2.0 * PI * (k as f64) / 720.0;
            let m = mass_matrix(&p, [0.0, q2]);
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(0, 1)];
            assert!(m[(0, 0)] > 0.0 && det > 0.0, "q2 = {q2}");
        }
    }

    #[test]
    fn bias_vanishes_at_rest() {
        let mut p = ArmParams::default();
        assert_eq!(bias(&p, [0.0, 0.0], [0.0, 0.0]), Vector2::zeros());
        p.g = 9.81;
        assert_eq!(bias(&p, [0.0, 0.0], [0.0, 0.0]), Vector2::zeros());
    }

    #[test]
    fn bias_hand_evaluation() {
        let p = ArmParams::default();
        let b = bias(&p, [0.0, FRAC_PI_2], [1.0, 0.0]);
        assert!((b[0] - p.b11).abs() < 1e-15);
        assert!((b[1] - (p.m2 * p.l1 * p.s2 + p.b21)).abs() < 1e-15);
    }

    #[test]
    fn dynamics_cancelled_by_bias_torque() {
        let mut p = ArmParams::default();
        p.g = 9.81;
        let arm = TwoLinkArm::new(p).unwrap();
        let x = [0.4, -0.9, 0.0, 0.0];
        let u = bias(&p, [0.4, -0.9], [0.0, 0.0]);
        let mut out = [1.0; 4];
        arm.dynamics(&x, u.as_slice(), &mut out).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12), "{out:?}");
    }

    #[test]
    fn dynamics_unit_torque_from_rest() {
        let arm = arm();
        let mut out = [0.0; 4];
        arm.dynamics(&[0.0; 4], &[1.0, 0.0], &mut out).unwrap();
        // M(0) = [[0.256, 0.093], [0.093, 0.045]]
        let det = 0.256 * 0.045 - 0.093 * 0.093;
        assert!((out[2] - 0.045 / det).abs() < 1e-9);
        assert!((out[3] + 0.093 / det).abs() < 1e-9);
        assert_eq!(&out[..2], &[0.0, 0.0]);
    }

    #[test]
    fn jacobian_structure_and_input_block() {
        let arm = arm();
        let (a, b) = arm.jacobians(&[0.0; 4], &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a[(i, j)], 0.0);
                assert_eq!(a[(i, 2 + j)], if i == j { 1.0 } else { 0.0 });
                assert_eq!(b[(i, j)], 0.0);
            }
        }
        let det = 0.256 * 0.045 - 0.093 * 0.093;
        let expected = [[0.045 / det, -0.093 / det], [-0.093 / det, 0.256 / det]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[(2 + i, j)] - expected[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences_with_gravity() {
        let mut p = ArmParams::default();
        p.g = 9.81;
        let arm = TwoLinkArm::new(p).unwrap();
        let x = [0.3, 1.1, -2.0, 4.0];
        let u = [0.5, -0.25];
        let (a, b) = arm.jacobians(&x, &u).unwrap();
        let (fa, fb) = finite_difference_jacobians(&arm, &x, &u).unwrap();
        assert!(relative_error(&a, &fa, 1e-12) < 1e-7);
        assert!(relative_error(&b, &fb, 1e-12) < 1e-7);
    }

    #[test]
    fn forward_kinematics_straight_and_raised() {
        let p = ArmParams::default();
        let fk = forward_kinematics(&p, &[0.0; 4]);
        assert!((fk[0] - 0.63).abs() < 1e-15 && fk[1] == 0.0 && fk[2] == 0.0 && fk[3] == 0.0);
        let fk = forward_kinematics(&p, &[FRAC_PI_2, 0.0, 0.0, 0.0]);
        assert!(fk[0].abs() < 1e-15 && (fk[1] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn fk_jacobian_matches_finite_differences() {
        let p = ArmParams::default();
        let x = [0.4, -1.2, 3.0, -0.5];
        let analytic = fk_jacobian(&p, &x);
        let numeric = finite_difference_map(|y| forward_kinematics(&p, y), &x);
        assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-8);
        for r in 0..2 {
            assert_eq!(analytic[(r, 2)], 0.0);
            assert_eq!(analytic[(r, 3)], 0.0);
            assert_eq!(analytic[(r + 2, 2)], analytic[(r, 0)]);
            assert_eq!(analytic[(r + 2, 3)], analytic[(r, 1)]);
        }
    }

    #[test]
    fn inverse_kinematics_round_trips_targets() {
        let p = ArmParams::default();
        for target in [[-0.26, 0.40], [-0.32, 0.27], [0.5, 0.1]] {
            let s = inverse_kinematics(&p, &target).unwrap();
            assert!(s.q2 >= 0.0);
            let fk = forward_kinematics(&p, &[s.q1, s.q2, 0.0, 0.0]);
            assert!((fk[0] - target[0]).abs() < 1e-12 && (fk[1] - target[1]).abs() < 1e-12);
        }
        let edge = inverse_kinematics(&p, &[0.63, 0.0]).unwrap();
        assert_eq!(edge.q2, 0.0);
        assert!(matches!(
            inverse_kinematics(&p, &[0.5, 0.5]),
            Err(Error::UnreachableTarget { .. })
        ));
    }

    #[test]
    fn inverse_kinematics_maps_task_velocity() {
        let p = ArmParams::default();
        let s = inverse_kinematics(&p, &[-0.2, 0.35, 0.1, -0.3]).unwrap();
        let fk = forward_kinematics(&p, &[s.q1, s.q2, s.dq1, s.dq2]);
        assert!((fk[2] - 0.1).abs() < 1e-12 && (fk[3] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = ArmParams::default();
        p.s2 = 0.5;
        assert!(TwoLinkArm::new(p).is_err());
        let mut p = ArmParams::default();
        p.i1 = 0.0;
        assert!(TwoLinkArm::new(p).is_err());
    }

    #[test]
    fn near_singular_mass_is_reported() {
        let mut p = ArmParams::default();
        p.i2 = 1e-9;
        p.i1 = 1e-9;
        let mut arm = TwoLinkArm::new(p).unwrap();
        arm.max_condition = 1e3;
        let mut out = [0.0; 4];
        let err = arm.dynamics(&[0.0; 4], &[0.0, 0.0], &mut out).unwrap_err();
        assert!(matches!(err, Error::SingularMass { .. }));
    }
}
