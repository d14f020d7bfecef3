//! Rigid-body dynamics of a free flyer with uncertain mass and inertia.
//!
//! State layout (13 components, used everywhere a flat vector is needed):
//!
//! | index  | quantity                                   | frame    |
//! |--------|--------------------------------------------|----------|
//! | 0..3   | position `r`                               | inertial |
//! | 3..7   | attitude `q = [qx, qy, qz, qw]`            | body → inertial, scalar last |
//! | 7..10  | linear velocity `v` of the body origin     | inertial |
//! | 10..13 | angular velocity `w`                       | body     |
//!
//! Forces and torques are expressed in the body frame. The translational
//! acceleration is solved in body axes from the coupled Newton-Euler system
//! and then rotated into the inertial frame, so with a zero CM offset the
//! model reduces to `m v_dot = R(q) F` and `I w_dot = tau - w x (I w)`.

use nalgebra::{
    Matrix3, Matrix6, Matrix6x3, Quaternion, SMatrix, SVector, UnitQuaternion, Vector3, Vector4,
    Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of entries in the flat state vector.
pub const STATE_DIM: usize = 13;
/// Number of estimated parameters `[m, Ixx, Iyy, Izz]`.
pub const PARAM_DIM: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
/// Sensitivity of the flat state with respect to `[m, Ixx, Iyy, Izz]`.
pub type Sensitivity = SMatrix<f64, STATE_DIM, PARAM_DIM>;

const INERTIA_TRIANGLE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("mass must be positive and finite, got {0}")]
    NonPositiveMass(f64),
    #[error("principal inertias must be positive and finite, got {0:?}")]
    NonPositiveInertia([f64; 3]),
    #[error("principal inertias {0:?} violate the triangle inequality")]
    InertiaTriangle([f64; 3]),
}

/// Mass properties of the body.
///
/// The CM offset `c` enters the dynamics but is never estimated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub mass: f64,
    pub inertia: Vector3<f64>,
    pub cm_offset: Vector3<f64>,
}

impl ParamVector {
    pub fn new(mass: f64, inertia: Vector3<f64>) -> Result<Self, DynamicsError> {
        Self::with_cm_offset(mass, inertia, Vector3::zeros())
    }

    pub fn with_cm_offset(
        mass: f64,
        inertia: Vector3<f64>,
        cm_offset: Vector3<f64>,
    ) -> Result<Self, DynamicsError> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(DynamicsError::NonPositiveMass(mass));
        }
        let i = [inertia.x, inertia.y, inertia.z];
        if i.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DynamicsError::NonPositiveInertia(i));
        }
        let triangle_ok = i[0] + i[1] >= i[2] - INERTIA_TRIANGLE_TOL
            && i[1] + i[2] >= i[0] - INERTIA_TRIANGLE_TOL
            && i[0] + i[2] >= i[1] - INERTIA_TRIANGLE_TOL;
        if !triangle_ok {
            return Err(DynamicsError::InertiaTriangle(i));
        }
        Ok(Self {
            mass,
            inertia,
            cm_offset,
        })
    }

    /// Checked construction from `[m, Ixx, Iyy, Izz]`.
    pub fn from_theta(theta: &Vector4<f64>, cm_offset: Vector3<f64>) -> Result<Self, DynamicsError> {
        Self::with_cm_offset(theta[0], theta.fixed_rows::<3>(1).into_owned(), cm_offset)
    }

    /// Construction without the physical-realizability checks.
    ///
    /// Used for finite-difference perturbations and filter estimates, which
    /// may transiently sit on the wrong side of the triangle inequality.
    pub(crate) fn from_theta_unchecked(theta: &Vector4<f64>, cm_offset: Vector3<f64>) -> Self {
        Self {
            mass: theta[0],
            inertia: theta.fixed_rows::<3>(1).into_owned(),
            cm_offset,
        }
    }

    pub fn theta(&self) -> Vector4<f64> {
        Vector4::new(self.mass, self.inertia.x, self.inertia.y, self.inertia.z)
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }
}

/// Pose and twist of the body frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl RigidBodyState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            attitude: UnitQuaternion::identity(),
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<4>(3).copy_from(&self.attitude.as_ref().coords);
        x.fixed_rows_mut::<3>(7).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(10).copy_from(&self.angular_velocity);
        x
    }

    /// Inverse of [`to_vector`](Self::to_vector); the quaternion is renormalized.
    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            attitude: UnitQuaternion::new_normalize(Quaternion::from_vector(
                x.fixed_rows::<4>(3).into_owned(),
            )),
            velocity: x.fixed_rows::<3>(7).into_owned(),
            angular_velocity: x.fixed_rows::<3>(10).into_owned(),
        }
    }

    /// Translational part `[r; v]`.
    pub fn translational(&self) -> Vector6<f64> {
        let mut t = Vector6::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(&self.position);
        t.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        t
    }
}

/// Body-frame force and torque.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative {
    pub position_rate: Vector3<f64>,
    pub attitude_rate: Quaternion<f64>,
    pub acceleration: Vector3<f64>,
    pub angular_acceleration: Vector3<f64>,
}

pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Body-frame linear acceleration and angular acceleration from the coupled
/// Newton-Euler equations about a body origin offset from the CM by `c`.
fn body_accelerations(
    w: &Vector3<f64>,
    u: &Wrench,
    p: &ParamVector,
) -> (Vector3<f64>, Vector3<f64>) {
    let m = p.mass;
    let inertia = &p.inertia;
    if p.cm_offset == Vector3::zeros() {
        let iw = inertia.component_mul(w);
        let wdot = (u.torque - w.cross(&iw)).component_div(inertia);
        return (u.force / m, wdot);
    }
    let cx = skew(&p.cm_offset);
    let wx = skew(w);
    let i_origin = p.inertia_matrix() - m * cx * cx;
    let mut mass_matrix = Matrix6::zeros();
    mass_matrix
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * m));
    mass_matrix.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-m * cx));
    mass_matrix.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * cx));
    mass_matrix.fixed_view_mut::<3, 3>(3, 3).copy_from(&i_origin);
    let mut rhs = Vector6::zeros();
    rhs.fixed_rows_mut::<3>(0)
        .copy_from(&(u.force - m * wx * wx * p.cm_offset));
    rhs.fixed_rows_mut::<3>(3)
        .copy_from(&(u.torque - wx * i_origin * w));
    let sol = mass_matrix
        .lu()
        .solve(&rhs)
        .expect("spatial inertia of a valid ParamVector is nonsingular");
    (
        sol.fixed_rows::<3>(0).into_owned(),
        sol.fixed_rows::<3>(3).into_owned(),
    )
}

/// Time derivative of the flat state. The quaternion entries need not be unit
/// norm: the rotation uses the normalized quaternion while the kinematic
/// equation is applied to the raw entries.
pub(crate) fn derivative_vec(x: &StateVector, u: &Wrench, p: &ParamVector) -> StateVector {
    let q = Quaternion::from_vector(x.fixed_rows::<4>(3).into_owned());
    let v = x.fixed_rows::<3>(7).into_owned();
    let w = x.fixed_rows::<3>(10).into_owned();
    let (a_body, wdot) = body_accelerations(&w, u, p);
    let rot = UnitQuaternion::new_normalize(q);
    let qdot = q * Quaternion::from_imag(w) * 0.5;

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&v);
    dx.fixed_rows_mut::<4>(3).copy_from(&qdot.coords);
    dx.fixed_rows_mut::<3>(7).copy_from(&(rot * a_body));
    dx.fixed_rows_mut::<3>(10).copy_from(&wdot);
    dx
}

pub fn dynamics_derivative(x: &RigidBodyState, u: &Wrench, p: &ParamVector) -> StateDerivative {
    let dx = derivative_vec(&x.to_vector(), u, p);
    StateDerivative {
        position_rate: dx.fixed_rows::<3>(0).into_owned(),
        attitude_rate: Quaternion::from_vector(dx.fixed_rows::<4>(3).into_owned()),
        acceleration: dx.fixed_rows::<3>(7).into_owned(),
        angular_acceleration: dx.fixed_rows::<3>(10).into_owned(),
    }
}

fn normalize_quaternion(x: &mut StateVector) -> f64 {
    let norm = x.fixed_rows::<4>(3).norm();
    x.fixed_rows_mut::<4>(3).unscale_mut(norm);
    norm
}

pub(crate) fn rk4_vec(x: &StateVector, u: &Wrench, p: &ParamVector, dt: f64) -> StateVector {
    let k1 = derivative_vec(x, u, p);
    let k2 = derivative_vec(&(x + k1 * (0.5 * dt)), u, p);
    let k3 = derivative_vec(&(x + k2 * (0.5 * dt)), u, p);
    let k4 = derivative_vec(&(x + k3 * dt), u, p);
    let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    normalize_quaternion(&mut next);
    next
}

/// One classical RK4 step with the wrench held constant over `dt`.
pub fn step_rk4(x: &RigidBodyState, u: &Wrench, p: &ParamVector, dt: f64) -> RigidBodyState {
    assert!(dt > 0.0, "integration step must be positive, got {dt}");
    RigidBodyState::from_vector(&rk4_vec(&x.to_vector(), u, p, dt))
}

/// Central-difference step for a quantity of the given magnitude.
pub(crate) fn fd_step(value: f64) -> f64 {
    (1e-6 * value.abs()).max(1e-6)
}

/// `d/dt S = (df/dx) S + df/dtheta`, one column at a time as a directional
/// central difference along `(S_j, e_j)`.
fn sensitivity_rate(x: &StateVector, s: &Sensitivity, u: &Wrench, p: &ParamVector) -> Sensitivity {
    let theta = p.theta();
    let mut rate = Sensitivity::zeros();
    for j in 0..PARAM_DIM {
        let h = fd_step(theta[j]);
        let dir = s.column(j) * h;
        let mut th_plus = theta;
        let mut th_minus = theta;
        th_plus[j] += h;
        th_minus[j] -= h;
        let p_plus = ParamVector::from_theta_unchecked(&th_plus, p.cm_offset);
        let p_minus = ParamVector::from_theta_unchecked(&th_minus, p.cm_offset);
        let f_plus = derivative_vec(&(x + dir), u, &p_plus);
        let f_minus = derivative_vec(&(x - dir), u, &p_minus);
        rate.set_column(j, &((f_plus - f_minus) / (2.0 * h)));
    }
    rate
}

/// RK4 on the joint `(x, S)` system, including the derivative of the final
/// quaternion renormalization.
pub(crate) fn rk4_with_sensitivity_vec(
    x: &StateVector,
    s: &Sensitivity,
    u: &Wrench,
    p: &ParamVector,
    dt: f64,
) -> (StateVector, Sensitivity) {
    let k1 = derivative_vec(x, u, p);
    let s1 = sensitivity_rate(x, s, u, p);
    let x2 = x + k1 * (0.5 * dt);
    let sm2 = s + s1 * (0.5 * dt);
    let k2 = derivative_vec(&x2, u, p);
    let s2 = sensitivity_rate(&x2, &sm2, u, p);
    let x3 = x + k2 * (0.5 * dt);
    let sm3 = s + s2 * (0.5 * dt);
    let k3 = derivative_vec(&x3, u, p);
    let s3 = sensitivity_rate(&x3, &sm3, u, p);
    let x4 = x + k3 * dt;
    let sm4 = s + s3 * dt;
    let k4 = derivative_vec(&x4, u, p);
    let s4 = sensitivity_rate(&x4, &sm4, u, p);

    let mut next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let mut s_next = s + (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (dt / 6.0);
    let norm = normalize_quaternion(&mut next);
    let qhat = next.fixed_rows::<4>(3).into_owned();
    let projector = (nalgebra::Matrix4::identity() - qhat * qhat.transpose()) / norm;
    let sq = projector * s_next.fixed_rows::<4>(3);
    s_next.fixed_rows_mut::<4>(3).copy_from(&sq);
    (next, s_next)
}

/// Propagates the parameter sensitivity `S = dx/dtheta` across one step.
pub fn sensitivity_step(
    x: &RigidBodyState,
    s: &Sensitivity,
    u: &Wrench,
    p: &ParamVector,
    dt: f64,
) -> Sensitivity {
    propagate_with_sensitivity(x, s, u, p, dt).1
}

/// Same as [`sensitivity_step`] but also returns the propagated state.
pub fn propagate_with_sensitivity(
    x: &RigidBodyState,
    s: &Sensitivity,
    u: &Wrench,
    p: &ParamVector,
    dt: f64,
) -> (RigidBodyState, Sensitivity) {
    assert!(dt > 0.0, "integration step must be positive, got {dt}");
    let (next, s_next) = rk4_with_sensitivity_vec(&x.to_vector(), s, u, p, dt);
    (RigidBodyState::from_vector(&next), s_next)
}

/// Exact zero-order-hold discretization of the translational double
/// integrator `[r; v]` driven by an inertial-frame force.
pub fn discretize_translational(mass: f64, dt: f64) -> (Matrix6<f64>, Matrix6x3<f64>) {
    assert!(dt > 0.0 && mass > 0.0, "need dt > 0 and m > 0");
    let mut a = Matrix6::identity();
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * dt));
    let mut b = Matrix6x3::zeros();
    b.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * (dt * dt / (2.0 * mass))));
    b.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(Matrix3::identity() * (dt / mass)));
    (a, b)
}

/// Dimension of the minimal error state `[dr, dphi, dv, dw]`.
pub const ERROR_DIM: usize = 12;
pub type ErrorVector = SVector<f64, ERROR_DIM>;
/// Sensitivity of the error state with respect to `[m, Ixx, Iyy, Izz]`.
pub type ErrorSensitivity = SMatrix<f64, ERROR_DIM, PARAM_DIM>;

/// `x [+] d`: the attitude part is a body-frame rotation vector, `q exp(dphi)`.
pub fn retract(x: &RigidBodyState, d: &ErrorVector) -> RigidBodyState {
    RigidBodyState {
        position: x.position + d.fixed_rows::<3>(0),
        attitude: x.attitude * UnitQuaternion::from_scaled_axis(d.fixed_rows::<3>(3).into_owned()),
        velocity: x.velocity + d.fixed_rows::<3>(6),
        angular_velocity: x.angular_velocity + d.fixed_rows::<3>(9),
    }
}

/// `y [-] x`, the inverse of [`retract`].
pub fn state_difference(y: &RigidBodyState, x: &RigidBodyState) -> ErrorVector {
    let mut d = ErrorVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(y.position - x.position));
    d.fixed_rows_mut::<3>(3)
        .copy_from(&(x.attitude.inverse() * y.attitude).scaled_axis());
    d.fixed_rows_mut::<3>(6).copy_from(&(y.velocity - x.velocity));
    d.fixed_rows_mut::<3>(9)
        .copy_from(&(y.angular_velocity - x.angular_velocity));
    d
}

/// Maps a flat-state sensitivity at `x` to error-state coordinates. Attitude
/// rows are `2 vec(q^-1 dq)`.
pub fn error_sensitivity(x: &RigidBodyState, s: &Sensitivity) -> ErrorSensitivity {
    let qinv = x.attitude.inverse();
    let mut out = ErrorSensitivity::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&s.fixed_rows::<3>(0));
    out.fixed_rows_mut::<3>(6).copy_from(&s.fixed_rows::<3>(7));
    out.fixed_rows_mut::<3>(9).copy_from(&s.fixed_rows::<3>(10));
    for j in 0..PARAM_DIM {
        let dq = Quaternion::from_vector(s.fixed_view::<4, 1>(3, j).into_owned());
        let rel = qinv.quaternion() * dq;
        out.fixed_view_mut::<3, 1>(3, j).copy_from(&(rel.imag() * 2.0));
    }
    out
}
