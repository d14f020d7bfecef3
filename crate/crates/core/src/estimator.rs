//! Augmented-state multiplicative EKF over the body state and `[m, Ixx, Iyy, Izz]`.
//!
//! Error state (16): `[dr, dphi, dv, dw, dtheta]`, where `dphi` is a
//! body-frame rotation vector as in [`retract`]. The full state
//! `[r, q, v, w]` is measured with additive noise.

use nalgebra::{Matrix4, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    fd_step, retract, state_difference, step_rk4, ErrorVector, ParamVector, RigidBodyState,
    Wrench, ERROR_DIM, PARAM_DIM,
};

pub const AUG_DIM: usize = ERROR_DIM + PARAM_DIM;
pub type AugMatrix = SMatrix<f64, AUG_DIM, AUG_DIM>;
pub type AugVector = SVector<f64, AUG_DIM>;
pub type MeasMatrix = SMatrix<f64, ERROR_DIM, ERROR_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("measurement at t = {t_meas} precedes last processed time {t_last}")]
    OutOfOrderMeasurement { t_meas: f64, t_last: f64 },
    #[error("measurement contains non-finite values")]
    NonFiniteMeasurement,
}

/// Gaussian belief over `theta = [m, Ixx, Iyy, Izz]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBelief {
    pub theta_hat: Vector4<f64>,
    pub sigma_theta: Matrix4<f64>,
}

impl ParamBelief {
    pub fn from_std(theta_hat: Vector4<f64>, std: Vector4<f64>) -> Self {
        Self {
            theta_hat,
            sigma_theta: Matrix4::from_diagonal(&std.component_mul(&std)),
        }
    }

    pub fn std_dev(&self) -> Vector4<f64> {
        self.sigma_theta.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn mass(&self) -> f64 {
        self.theta_hat[0]
    }

    pub fn mass_std(&self) -> f64 {
        self.sigma_theta[(0, 0)].max(0.0).sqrt()
    }
}

/// Noise model and clamping bounds of the filter.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfNoise {
    /// Continuous process noise density on the error state (per second).
    pub q_proc: AugMatrix,
    pub r_meas: MeasMatrix,
    /// RK4 substeps per predict call.
    pub substeps: usize,
}

impl EkfNoise {
    /// Diagonal model: velocity and angular-velocity densities, a random walk
    /// of `param_walk` on every parameter and a small floor on pose rows.
    pub fn diagonal(
        vel_density: f64,
        omega_density: f64,
        param_walk: f64,
        meas_std: [f64; 4],
    ) -> Self {
        let mut q = AugVector::zeros();
        for i in 0..3 {
            q[i] = 1e-12;
            q[3 + i] = 1e-12;
            q[6 + i] = vel_density;
            q[9 + i] = omega_density;
        }
        for i in 0..PARAM_DIM {
            q[12 + i] = param_walk;
        }
        let r = SVector::<f64, ERROR_DIM>::from_fn(|i, _| meas_std[i / 3].powi(2));
        Self {
            q_proc: AugMatrix::from_diagonal(&q),
            r_meas: MeasMatrix::from_diagonal(&r),
            substeps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBelief {
    pub state: RigidBodyState,
    pub theta: Vector4<f64>,
    pub sigma: AugMatrix,
    pub noise: EkfNoise,
    cm_offset: Vector3<f64>,
    theta_min: Vector4<f64>,
    theta_max: Vector4<f64>,
    time: f64,
}

impl AugmentedBelief {
    /// Fresh belief; `theta` is clamped to `[0.1, 10]` times its initial value.
    pub fn new(
        state: RigidBodyState,
        state_cov: MeasMatrix,
        params: ParamBelief,
        cm_offset: Vector3<f64>,
        noise: EkfNoise,
        t0: f64,
    ) -> Self {
        let mut sigma = AugMatrix::zeros();
        sigma
            .fixed_view_mut::<ERROR_DIM, ERROR_DIM>(0, 0)
            .copy_from(&state_cov);
        sigma
            .fixed_view_mut::<PARAM_DIM, PARAM_DIM>(ERROR_DIM, ERROR_DIM)
            .copy_from(&params.sigma_theta);
        Self {
            state,
            theta: params.theta_hat,
            sigma,
            noise,
            cm_offset,
            theta_min: params.theta_hat * 0.1,
            theta_max: params.theta_hat * 10.0,
            time: t0,
        }
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn current_params(&self) -> ParamBelief {
        ParamBelief {
            theta_hat: self.theta,
            sigma_theta: self
                .sigma
                .fixed_view::<PARAM_DIM, PARAM_DIM>(ERROR_DIM, ERROR_DIM)
                .into_owned(),
        }
    }

    /// Replaces the parameter block, leaving state and cross terms alone.
    pub fn with_params(&self, pb: &ParamBelief) -> Self {
        let mut out = self.clone();
        out.theta = pb.theta_hat;
        out.sigma
            .fixed_view_mut::<PARAM_DIM, PARAM_DIM>(ERROR_DIM, ERROR_DIM)
            .copy_from(&pb.sigma_theta);
        out
    }

    /// Model used for prediction. Parameters are clamped to bounds, so the
    /// triangle inequality is the only way this can fail.
    pub fn params(&self) -> ParamVector {
        ParamVector::from_theta_unchecked(&self.theta, self.cm_offset)
    }

    fn propagate(&self, x: &RigidBodyState, theta: &Vector4<f64>, u: &Wrench, dt: f64) -> RigidBodyState {
        let p = ParamVector::from_theta_unchecked(theta, self.cm_offset);
        let n = self.noise.substeps.max(1);
        let h = dt / n as f64;
        (0..n).fold(*x, |acc, _| step_rk4(&acc, u, &p, h))
    }

    /// Error-state transition matrix of one predict step, by central
    /// differences on the augmented map.
    pub fn transition(&self, u: &Wrench, dt: f64) -> AugMatrix {
        let nominal = self.propagate(&self.state, &self.theta, u, dt);
        let x_vec = self.state.to_vector();
        let mut phi = AugMatrix::zeros();
        for j in 0..AUG_DIM {
            let h = if j < ERROR_DIM {
                // Attitude directions are angles; others scale with the
                // quantity they perturb.
                let value = match j {
                    0..3 => x_vec[j],
                    3..6 => 0.0,
                    6..9 => x_vec[j + 1],
                    _ => x_vec[j + 1],
                };
                pow2_step(value)
            } else {
                pow2_step(self.theta[j - ERROR_DIM])
            };
            let eval = |sign: f64| -> AugVector {
                let mut dx = ErrorVector::zeros();
                let mut theta = self.theta;
                if j < ERROR_DIM {
                    dx[j] = sign * h;
                } else {
                    theta[j - ERROR_DIM] += sign * h;
                }
                let x0 = retract(&self.state, &dx);
                let x1 = self.propagate(&x0, &theta, u, dt);
                let mut out = AugVector::zeros();
                out.fixed_rows_mut::<ERROR_DIM>(0)
                    .copy_from(&state_difference(&x1, &nominal));
                out.fixed_rows_mut::<PARAM_DIM>(ERROR_DIM)
                    .copy_from(&(theta - self.theta));
                out
            };
            phi.set_column(j, &((eval(1.0) - eval(-1.0)) / (2.0 * h)));
        }
        phi
    }

    /// Propagates the mean with the current parameter estimate and the
    /// covariance with `Phi Sigma Phi^T + Q dt`.
    pub fn predict(&self, u: &Wrench, dt: f64) -> Self {
        assert!(dt > 0.0, "predict step must be positive, got {dt}");
        let phi = self.transition(u, dt);
        let mut out = self.clone();
        out.state = self.propagate(&self.state, &self.theta, u, dt);
        out.sigma = symmetrize(&(phi * self.sigma * phi.transpose() + self.noise.q_proc * dt));
        out.time = self.time + dt;
        out
    }

    /// Joseph-form update with a full-state measurement taken at `t_meas`.
    pub fn update(&self, y: &RigidBodyState, t_meas: f64) -> Result<Self, EstimatorError> {
        // Accumulated `time + dt` drifts from the caller's clock by roundoff.
        if t_meas < self.time - 1e-9 * self.time.abs().max(1.0) {
            log::warn!("rejecting measurement at {t_meas}, filter is at {}", self.time);
            return Err(EstimatorError::OutOfOrderMeasurement {
                t_meas,
                t_last: self.time,
            });
        }
        let finite = y.position.iter().all(|v| v.is_finite())
            && y.attitude.coords.iter().all(|v| v.is_finite())
            && y.velocity.iter().all(|v| v.is_finite())
            && y.angular_velocity.iter().all(|v| v.is_finite());
        if !finite {
            return Err(EstimatorError::NonFiniteMeasurement);
        }
        let innovation = state_difference(y, &self.state);
        // H = [I_12 | 0], so H Sigma H^T is the leading block.
        let p_hh = self.sigma.fixed_view::<ERROR_DIM, ERROR_DIM>(0, 0).into_owned();
        let p_xh = self.sigma.fixed_columns::<ERROR_DIM>(0).into_owned();
        let s = p_hh + self.noise.r_meas;
        let s_inv = s
            .cholesky()
            .expect("innovation covariance must be positive definite")
            .inverse();
        let gain = p_xh * s_inv;
        let correction = gain * innovation;

        let mut i_kh = AugMatrix::identity();
        i_kh.fixed_columns_mut::<ERROR_DIM>(0).zip_apply(&gain, |a, g| *a -= g);
        let sigma = i_kh * self.sigma * i_kh.transpose()
            + gain * self.noise.r_meas * gain.transpose();

        let mut out = self.clone();
        out.state = retract(&self.state, &correction.fixed_rows::<ERROR_DIM>(0).into_owned());
        out.theta = (self.theta + correction.fixed_rows::<PARAM_DIM>(ERROR_DIM))
            .zip_zip_map(&self.theta_min, &self.theta_max, |v, lo, hi| v.clamp(lo, hi));
        out.sigma = symmetrize(&sigma);
        out.time = t_meas;
        Ok(out)
    }
}

/// `fd_step` rounded to a power of two so that `value +- h` is exact.
fn pow2_step(value: f64) -> f64 {
    2f64.powi(fd_step(value).log2().round() as i32)
}

fn symmetrize(m: &AugMatrix) -> AugMatrix {
    (m + m.transpose()) * 0.5
}
