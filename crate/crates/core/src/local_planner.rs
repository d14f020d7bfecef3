//! Receding-horizon trajectory optimization with a weighted Fisher
//! information term, and the covariance-driven schedule for its weights.
//!
//! The plan is a single-shooting transcription: one body wrench per stage,
//! held for `dt` and integrated with one RK4 step. Information is
//! accumulated at the `N` propagated nodes with `S_0 = 0`.

use nalgebra::{DMatrix, DVector, Matrix4, SVector, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    error_sensitivity, propagate_with_sensitivity, state_difference, step_rk4, ErrorVector,
    ParamVector, RigidBodyState, Sensitivity, Wrench, ERROR_DIM,
};
use crate::estimator::MeasMatrix;
use crate::global_planner::GlobalPlan;
use crate::qp::{BoxQp, QpSettings};
use crate::world::{Ellipsoid, World};

/// Regularization added to `F` before inversion.
pub const FIM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalPlanError {
    #[error("local plan infeasible: {reason}")]
    Infeasible { reason: String },
    #[error("measurement covariance is not positive definite")]
    BadMeasurementCovariance,
    #[error("invalid information weights: {0}")]
    InvalidWeights(String),
}

/// Information weights and the schedule state that drives them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoWeights {
    pub gamma: Vector4<f64>,
    pub gamma0: Vector4<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_floor: Vector4<f64>,
    /// Set once a weight has been shut off.
    pub latched: [bool; 4],
}

impl InfoWeights {
    pub fn new(gamma0: Vector4<f64>, alpha: f64, beta: f64, sigma_floor: Vector4<f64>) -> Result<Self, LocalPlanError> {
        if gamma0.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(LocalPlanError::InvalidWeights("gamma0 must be nonnegative".into()));
        }
        if !(alpha >= 1.0) || !(beta > 0.0) {
            return Err(LocalPlanError::InvalidWeights(format!(
                "need alpha >= 1 and beta > 0, got {alpha}, {beta}"
            )));
        }
        if sigma_floor.iter().any(|s| !(*s > 0.0)) {
            return Err(LocalPlanError::InvalidWeights("sigma_floor must be positive".into()));
        }
        Ok(Self {
            gamma: gamma0,
            gamma0,
            alpha,
            beta,
            sigma_floor,
            latched: [false; 4],
        })
    }

    /// All weights zero, never re-enabled.
    pub fn disabled() -> Self {
        Self {
            gamma: Vector4::zeros(),
            gamma0: Vector4::zeros(),
            alpha: 1.0,
            beta: 1.0,
            sigma_floor: Vector4::repeat(1.0),
            latched: [true; 4],
        }
    }
}

/// `gamma_i = 0` once `sigma_i <= alpha sigma_floor_i` (and forever after),
/// otherwise `gamma0_i exp(-beta sigma_floor_i / sigma_i)`.
pub fn covar_weight(sigma_theta: &Matrix4<f64>, w: &InfoWeights) -> InfoWeights {
    let mut out = w.clone();
    for i in 0..4 {
        let sigma = sigma_theta[(i, i)].max(0.0).sqrt();
        if out.latched[i] || sigma <= w.alpha * w.sigma_floor[i] {
            out.gamma[i] = 0.0;
            out.latched[i] = true;
        } else {
            out.gamma[i] = w.gamma0[i] * (-w.beta * w.sigma_floor[i] / sigma).exp();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tracking: f64,
    pub effort: f64,
    pub information: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.effort + self.information
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPlan {
    pub t0: f64,
    pub dt: f64,
    /// `N + 1` states.
    pub states: Vec<RigidBodyState>,
    /// `N` body wrenches.
    pub inputs: Vec<Wrench>,
    pub cost: CostBreakdown,
    pub fim: Matrix4<f64>,
    pub iterations: usize,
}

impl LocalPlan {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn end_time(&self) -> f64 {
        self.t0 + self.dt * self.inputs.len() as f64
    }

    fn stage(&self, t: f64) -> Option<(usize, f64)> {
        if t < self.t0 || t >= self.end_time() {
            return None;
        }
        let k = (((t - self.t0) / self.dt).floor() as usize).min(self.inputs.len() - 1);
        Some((k, t - self.t0 - k as f64 * self.dt))
    }

    /// Planned state at `t`; integrates within the stage, holds the final
    /// state past the end.
    pub fn state_at(&self, t: f64, p: &ParamVector) -> RigidBodyState {
        match self.stage(t) {
            None if t < self.t0 => self.states[0],
            None => *self.states.last().expect("plan has states"),
            Some((k, tau)) if tau <= 0.0 => self.states[k],
            Some((k, tau)) => step_rk4(&self.states[k], &self.inputs[k], p, tau),
        }
    }

    /// Planned wrench at `t` (zero outside the plan).
    pub fn wrench_at(&self, t: f64) -> Wrench {
        self.stage(t).map_or(Wrench::zero(), |(k, _)| self.inputs[k])
    }

    /// Positions sampled along the plan, no farther apart than `resolution`
    /// at the plan's peak speed.
    pub fn dense_positions(&self, p: &ParamVector, resolution: f64) -> Vec<Vector3<f64>> {
        let mut out = vec![self.states[0].position];
        for k in 0..self.inputs.len() {
            let a = &self.states[k];
            let b = &self.states[k + 1];
            let speed = a.velocity.norm().max(b.velocity.norm()) * 1.5 + 1e-9;
            let n = ((speed * self.dt / resolution).ceil() as usize).clamp(1, 1000);
            for i in 1..n {
                let tau = self.dt * i as f64 / n as f64;
                out.push(step_rk4(a, &self.inputs[k], p, tau).position);
            }
            out.push(b.position);
        }
        out
    }
}

fn check_meas(sigma_r: &MeasMatrix) -> Result<MeasMatrix, LocalPlanError> {
    let sym = (sigma_r - sigma_r.transpose()).amax() <= 1e-12 * sigma_r.amax();
    match sigma_r.cholesky() {
        Some(ch) if sym => Ok(ch.inverse()),
        _ => Err(LocalPlanError::BadMeasurementCovariance),
    }
}

/// Fisher information of the node-sampled error-state measurements of a
/// trajectory, starting from sensitivity `s_init`. Returns `F` and the final
/// sensitivity so segments can be chained.
pub fn fisher_information_from(
    x0: &RigidBodyState,
    inputs: &[Wrench],
    dt: f64,
    p: &ParamVector,
    sigma_r: &MeasMatrix,
    s_init: &Sensitivity,
) -> Result<(Matrix4<f64>, Sensitivity), LocalPlanError> {
    let w = check_meas(sigma_r)?;
    let mut x = *x0;
    let mut s = *s_init;
    let mut f = Matrix4::zeros();
    for u in inputs {
        (x, s) = propagate_with_sensitivity(&x, &s, u, p, dt);
        let sy = error_sensitivity(&x, &s);
        f += sy.transpose() * w * sy;
    }
    Ok(((f + f.transpose()) * 0.5, s))
}

pub fn fisher_information(plan: &LocalPlan, p: &ParamVector, sigma_r: &MeasMatrix) -> Result<Matrix4<f64>, LocalPlanError> {
    fisher_information_from(&plan.states[0], &plan.inputs, plan.dt, p, sigma_r, &Sensitivity::zeros())
        .map(|(f, _)| f)
}

/// `Gamma^T diag((F + eps I)^-1)`.
pub fn information_cost(f: &Matrix4<f64>, gamma: &Vector4<f64>) -> f64 {
    if gamma.iter().all(|g| *g == 0.0) {
        return 0.0;
    }
    let reg = f + Matrix4::identity() * FIM_EPS;
    let inv = reg
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| Matrix4::identity() / FIM_EPS);
    gamma.dot(&inv.diagonal())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPlannerConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal tracking weights on `[dr, dphi, dv, dw]`.
    pub q: SVector<f64, ERROR_DIM>,
    /// Diagonal effort weights on inputs scaled by their bounds.
    pub r: Vector6<f64>,
    /// Body per-axis force bound (N).
    pub force_max: f64,
    /// Body per-axis torque bound (N m).
    pub torque_max: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Clearance added to the robot radius around obstacles, and kept by
    /// the robot center from the workspace bounds.
    pub margin: f64,
    pub max_iters: usize,
    pub al_rounds: usize,
    pub sigma_r: MeasMatrix,
}

/// Reference translational states at the `N + 1` node times of a plan
/// starting at `t0`. Past the end of the global plan the reference rests at
/// its final position.
pub fn reference_from_global(plan: &GlobalPlan, t0: f64, horizon: usize, dt: f64) -> Vec<Vector6<f64>> {
    (0..=horizon)
        .map(|k| {
            let t = t0 + k as f64 * dt;
            let (r, v) = if t >= plan.end_time() {
                (plan.final_node().position, Vector3::zeros())
            } else {
                plan.state_at(t)
            };
            let mut z = Vector6::zeros();
            z.fixed_rows_mut::<3>(0).copy_from(&r);
            z.fixed_rows_mut::<3>(3).copy_from(&v);
            z
        })
        .collect()
}

/// Row layout matches `Problem::node_constraints`.
fn constraint_backoff(obstacles: usize, cfg: &LocalPlannerConfig) -> Vec<f64> {
    let mut b = vec![POSITION_BACKOFF; 2 * obstacles + 6];
    for _ in 0..3 {
        b.extend([RATE_BACKOFF * cfg.v_max, RATE_BACKOFF * cfg.v_max]);
        b.extend([RATE_BACKOFF * cfg.omega_max, RATE_BACKOFF * cfg.omega_max]);
    }
    b
}

const POSITION_BACKOFF: f64 = 2e-3;
const FAR_FIELD: f64 = 0.3;
const RATE_BACKOFF: f64 = 1e-2;

/// `clearance - distance`, continued inside the solid by the quadratic form
/// so the value keeps a gradient there.
fn keep_out(e: &Ellipsoid, p: &Vector3<f64>, clearance: f64) -> f64 {
    let form = e.quadratic_form(p, 0.0);
    if form <= 1.0 {
        return clearance + (1.0 - form) * e.semi_axes.min();
    }
    // (sqrt(form) - 1) * a_min bounds the distance from below; far away the
    // row is inactive and the bound stands in for the exact value.
    let lower = (form.sqrt() - 1.0) * e.semi_axes.min();
    if lower > clearance + FAR_FIELD {
        clearance - lower
    } else {
        clearance - e.distance(p)
    }
}

/// Problem data shared by every rollout.
struct Problem<'a> {
    x0: RigidBodyState,
    reference: &'a [Vector6<f64>],
    q_ref: UnitQuaternion<f64>,
    p: &'a ParamVector,
    gamma: Vector4<f64>,
    world: &'a World,
    cfg: &'a LocalPlannerConfig,
    meas_w: MeasMatrix,
    sqrt_q: SVector<f64, ERROR_DIM>,
    info: bool,
    lambda: Vec<f64>,
    rho: f64,
    /// Per-row tightening seen by the penalty, so that approximate
    /// multiplier convergence still lands inside the true constraints.
    backoff: Vec<f64>,
}

/// Everything one forward pass produces.
#[derive(Clone)]
struct Rollout {
    states: Vec<RigidBodyState>,
    sens: Vec<Sensitivity>,
    /// Running FIM after node k (index 0 is zero).
    fim_prefix: Vec<Matrix4<f64>>,
    residuals: DVector<f64>,
    constraints: Vec<f64>,
    cost: CostBreakdown,
}

impl Rollout {
    fn max_violation(&self) -> f64 {
        self.constraints.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.cfg.horizon
    }

    fn scale(&self, i: usize) -> f64 {
        if i % 6 < 3 { self.cfg.force_max } else { self.cfg.torque_max }
    }

    fn wrench(&self, y: &DVector<f64>, k: usize) -> Wrench {
        Wrench::new(
            Vector3::new(y[6 * k], y[6 * k + 1], y[6 * k + 2]) * self.cfg.force_max,
            Vector3::new(y[6 * k + 3], y[6 * k + 4], y[6 * k + 5]) * self.cfg.torque_max,
        )
    }

    fn constraints_per_node(&self) -> usize {
        2 * self.world.obstacles().len() + 18
    }

    fn tracking_rows(&self) -> usize {
        ERROR_DIM * self.n()
    }

    fn residual_len(&self) -> usize {
        self.tracking_rows() + 6 * self.n() + self.constraints_per_node() * self.n()
    }

    /// Tracking residual of node `k >= 1`.
    fn node_error(&self, x: &RigidBodyState, k: usize) -> ErrorVector {
        let r = &self.reference[k];
        let target = RigidBodyState {
            position: r.fixed_rows::<3>(0).into_owned(),
            attitude: self.q_ref,
            velocity: r.fixed_rows::<3>(3).into_owned(),
            angular_velocity: Vector3::zeros(),
        };
        state_difference(x, &target)
    }

    /// Constraint values (`<= 0` feasible) of node `k >= 1`, given the
    /// previous node for the chord midpoint.
    fn node_constraints(&self, prev: &RigidBodyState, x: &RigidBodyState, out: &mut Vec<f64>) {
        let clearance = self.world.robot_radius() + self.cfg.margin;
        let mid = (prev.position + x.position) * 0.5;
        for e in self.world.obstacles() {
            for p in [&x.position, &mid] {
                out.push(keep_out(e, p, clearance));
            }
        }
        // Bounds limit the robot center.
        let b = self.world.bounds();
        let m = self.cfg.margin;
        for i in 0..3 {
            out.push(x.position[i] - (b.max[i] - m));
            out.push((b.min[i] + m) - x.position[i]);
        }
        for i in 0..3 {
            out.push(x.velocity[i] - self.cfg.v_max);
            out.push(-x.velocity[i] - self.cfg.v_max);
            out.push(x.angular_velocity[i] - self.cfg.omega_max);
            out.push(-x.angular_velocity[i] - self.cfg.omega_max);
        }
    }

    fn describe_worst(&self, r: &Rollout) -> String {
        let m = self.constraints_per_node();
        let Some((j, g)) = r.constraints.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
            return "no constraints".into();
        };
        let (k, c) = (j / m, j % m);
        let n_obs = 2 * self.world.obstacles().len();
        let kind = if c < n_obs {
            format!("obstacle {}", c / 2)
        } else if c < n_obs + 6 {
            "workspace".to_string()
        } else if (c - n_obs - 6) % 4 < 2 {
            "speed".to_string()
        } else {
            "rate".to_string()
        };
        format!("worst {kind} violation {g:.3e} at node {}", k + 1)
    }

    /// Full forward pass, or the tail from node `start` reusing `base`.
    fn rollout(&self, y: &DVector<f64>, base: Option<(&Rollout, usize)>) -> Rollout {
        let n = self.n();
        let (mut r, start) = match base {
            Some((b, k)) => (b.clone(), k),
            None => {
                let mut states = Vec::with_capacity(n + 1);
                states.push(self.x0);
                let r = Rollout {
                    states,
                    sens: vec![Sensitivity::zeros()],
                    fim_prefix: vec![Matrix4::zeros()],
                    residuals: DVector::zeros(self.residual_len()),
                    constraints: vec![0.0; self.constraints_per_node() * n],
                    cost: CostBreakdown::default(),
                };
                (r, 0)
            }
        };
        r.states.truncate(start + 1);
        r.sens.truncate(start + 1);
        r.fim_prefix.truncate(start + 1);
        let m = self.constraints_per_node();
        let mut buf = Vec::with_capacity(m);
        for k in start..n {
            let u = self.wrench(y, k);
            let x = r.states[k];
            let next = if self.info {
                let (xn, sn) = propagate_with_sensitivity(&x, &r.sens[k], &u, self.p, self.cfg.dt);
                let sy = error_sensitivity(&xn, &sn);
                let f = r.fim_prefix[k] + sy.transpose() * self.meas_w * sy;
                r.sens.push(sn);
                r.fim_prefix.push(f);
                xn
            } else {
                r.sens.push(Sensitivity::zeros());
                r.fim_prefix.push(Matrix4::zeros());
                step_rk4(&x, &u, self.p, self.cfg.dt)
            };
            r.states.push(next);
            let e = self.node_error(&next, k + 1);
            for i in 0..ERROR_DIM {
                r.residuals[ERROR_DIM * k + i] = self.sqrt_q[i] * e[i];
            }
            buf.clear();
            self.node_constraints(&x, &next, &mut buf);
            let base_row = self.tracking_rows() + 6 * n + m * k;
            for (j, g) in buf.iter().enumerate() {
                r.constraints[m * k + j] = *g;
                let shifted = (g + self.backoff[j] + self.lambda[m * k + j] / self.rho).max(0.0);
                r.residuals[base_row + j] = (0.5 * self.rho).sqrt() * shifted;
            }
        }
        // Effort rows depend only on y; refresh all of them (cheap).
        for k in 0..n {
            for i in 0..6 {
                r.residuals[self.tracking_rows() + 6 * k + i] = self.cfg.r[i].sqrt() * y[6 * k + i];
            }
        }
        let track: f64 = r.residuals.rows(0, self.tracking_rows()).norm_squared();
        let effort: f64 = r.residuals.rows(self.tracking_rows(), 6 * n).norm_squared();
        let fim = r.fim_prefix[n];
        r.cost = CostBreakdown {
            tracking: track,
            effort,
            information: if self.info { information_cost(&fim, &self.gamma) } else { 0.0 },
        };
        r
    }

    fn merit(&self, r: &Rollout) -> f64 {
        r.residuals.norm_squared() + r.cost.information
    }

    /// Jacobian of the residuals and gradient of the information cost by
    /// central differences, restarting each rollout at the perturbed stage.
    fn derivatives(&self, y: &DVector<f64>, nominal: &Rollout) -> (DMatrix<f64>, DVector<f64>) {
        let dim = y.len();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(self.residual_len(), dim);
        let mut g_info = DVector::zeros(dim);
        let mut yp = y.clone();
        for i in 0..dim {
            let k = i / 6;
            yp[i] = y[i] + h;
            let plus = self.rollout(&yp, Some((nominal, k)));
            yp[i] = y[i] - h;
            let minus = self.rollout(&yp, Some((nominal, k)));
            yp[i] = y[i];
            let col = (&plus.residuals - &minus.residuals) / (2.0 * h);
            jac.set_column(i, &col);
            g_info[i] = (plus.cost.information - minus.cost.information) / (2.0 * h);
        }
        (jac, g_info)
    }
}

/// Solves the local trajectory problem from `x_now`. `reference` holds the
/// `N + 1` nodal translational targets; attitude is held at `q_ref`.
/// Returns the best feasible iterate seen.
#[allow(clippy::too_many_arguments)]
pub fn plan_local(
    x_now: &RigidBodyState,
    t0: f64,
    reference: &[Vector6<f64>],
    q_ref: &UnitQuaternion<f64>,
    p_hat: &ParamVector,
    gamma: &Vector4<f64>,
    world: &World,
    cfg: &LocalPlannerConfig,
    warm_start: &[Wrench],
) -> Result<LocalPlan, LocalPlanError> {
    let n = cfg.horizon;
    assert!(n >= 2, "horizon must be at least 2");
    assert_eq!(reference.len(), n + 1, "reference needs N + 1 nodes");
    let meas_w = check_meas(&cfg.sigma_r)?;
    let info = gamma.iter().any(|g| *g > 0.0);
    let mut prob = Problem {
        x0: *x_now,
        reference,
        q_ref: *q_ref,
        p: p_hat,
        gamma: *gamma,
        world,
        cfg,
        meas_w,
        sqrt_q: cfg.q.map(f64::sqrt),
        info,
        lambda: vec![0.0; (2 * world.obstacles().len() + 18) * n],
        rho: 100.0,
        backoff: constraint_backoff(world.obstacles().len(), cfg),
    };
    let dim = 6 * n;
    let mut y = DVector::from_fn(dim, |i, _| {
        let k = i / 6;
        let w = warm_start.get(k).copied().unwrap_or_else(Wrench::zero);
        let v = if i % 6 < 3 { w.force[i % 6] } else { w.torque[i % 6 - 3] };
        (v / prob.scale(i)).clamp(-1.0, 1.0)
    });
    let lo = DVector::repeat(dim, -1.0);
    let hi = DVector::repeat(dim, 1.0);

    let feas_tol = 1e-6;
    let mut best: Option<(f64, DVector<f64>, Rollout)> = None;
    let consider = |y: &DVector<f64>, r: &Rollout, best: &mut Option<(f64, DVector<f64>, Rollout)>| {
        if r.max_violation() <= feas_tol {
            let c = r.cost.total();
            if best.as_ref().is_none_or(|(b, _, _)| c < *b) {
                *best = Some((c, y.clone(), r.clone()));
            }
        }
    };

    let mut iterations = 0;
    let mut current = prob.rollout(&y, None);
    consider(&y, &current, &mut best);
    let mut info_hess = DMatrix::<f64>::zeros(dim, dim);
    let mut mu = 1e-3;
    for _round in 0..cfg.al_rounds.max(1) {
        current = prob.rollout(&y, None);
        let mut f_cur = prob.merit(&current);
        let mut last: Option<(DVector<f64>, DVector<f64>)> = None;
        let per_round = cfg.max_iters / cfg.al_rounds.max(1);
        for _ in 0..per_round.max(1) {
            iterations += 1;
            let (jac, g_info) = prob.derivatives(&y, &current);
            if let Some((y_prev, g_prev)) = last.take() {
                damped_bfgs(&mut info_hess, &(&y - y_prev), &(&g_info - g_prev));
            }
            let grad = jac.tr_mul(&current.residuals) * 2.0 + &g_info;
            let pg = (0..dim).fold(0.0f64, |a, i| a.max(((y[i] - grad[i]).clamp(-1.0, 1.0) - y[i]).abs()));
            if pg < 1e-9 {
                break;
            }
            let hess = jac.tr_mul(&jac) * 2.0 + &info_hess;
            let mut accepted = false;
            while mu < 1e12 {
                let damped = &hess + DMatrix::identity(dim, dim) * mu;
                let step_lo = &lo - &y;
                let step_hi = &hi - &y;
                let qp = BoxQp {
                    h: &damped,
                    g: &grad,
                    lo: &step_lo,
                    hi: &step_hi,
                    c: None,
                };
                let sol = qp.solve(&DVector::zeros(dim), &QpSettings::default());
                let d = sol.x;
                let predicted = -(grad.dot(&d) + 0.5 * d.dot(&(&hess * &d)));
                let trial_y = &y + &d;
                let trial = prob.rollout(&trial_y, None);
                let f_trial = prob.merit(&trial);
                let actual = f_cur - f_trial;
                if predicted > 0.0 && actual > 1e-4 * predicted {
                    consider(&trial_y, &trial, &mut best);
                    last = Some((y.clone(), g_info.clone()));
                    y = trial_y;
                    current = trial;
                    f_cur = f_trial;
                    mu = (mu * if actual > 0.75 * predicted { 0.2 } else { 0.7 }).max(1e-9);
                    accepted = true;
                    break;
                }
                mu *= 8.0;
            }
            if !accepted {
                mu = 1e-3;
                break;
            }
        }
        log::debug!(
            "round {_round}: iters {iterations} merit {:.4e} cost {:?} violation {:.3e} rho {:.0e}",
            prob.merit(&current),
            current.cost,
            current.max_violation(),
            prob.rho
        );
        // Multiplier update.
        let m = prob.constraints_per_node();
        let mut worst = f64::NEG_INFINITY;
        for (j, g) in current.constraints.iter().enumerate() {
            prob.lambda[j] = (prob.lambda[j] + prob.rho * (g + prob.backoff[j % m])).max(0.0);
            worst = worst.max(*g);
        }
        if worst > feas_tol {
            prob.rho = (prob.rho * 10.0).min(1e8);
        } else if best.is_some() && iterations >= cfg.max_iters {
            break;
        }
    }

    let Some((_, y_best, r_best)) = best else {
        return Err(LocalPlanError::Infeasible {
            reason: format!(
                "no iterate met the constraints in {iterations} iterations ({})",
                prob.describe_worst(&current)
            ),
        });
    };
    let inputs = (0..n).map(|k| prob.wrench(&y_best, k)).collect();
    let fim = if info {
        r_best.fim_prefix[n]
    } else {
        fisher_information_from(x_now, &(0..n).map(|k| prob.wrench(&y_best, k)).collect::<Vec<_>>(), cfg.dt, p_hat, &cfg.sigma_r, &Sensitivity::zeros())?.0
    };
    Ok(LocalPlan {
        t0,
        dt: cfg.dt,
        states: r_best.states,
        inputs,
        cost: r_best.cost,
        fim,
        iterations,
    })
}

/// Powell-damped BFGS update keeping `b` positive semidefinite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let ss = s.norm_squared();
    if ss < 1e-20 {
        return;
    }
    if b.iter().all(|v| *v == 0.0) {
        let yy = y.norm_squared();
        let sy = s.dot(y);
        if sy > 0.0 {
            *b = DMatrix::identity(s.len(), s.len()) * (yy / sy);
        }
        return;
    }
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-20 {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-20 {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Bounds, GoalRegion};

    fn params() -> ParamVector {
        ParamVector::new(9.58, Vector3::new(0.15, 0.15, 0.16)).unwrap()
    }

    fn sigma_r() -> MeasMatrix {
        MeasMatrix::identity() * 1e-6
    }

    fn weights() -> InfoWeights {
        InfoWeights::new(Vector4::repeat(10.0), 1.0, 1.0, Vector4::repeat(0.01)).unwrap()
    }

    #[test]
    fn covar_weight_boundary_and_limit() {
        let w = weights();
        let sig = Matrix4::from_diagonal(&Vector4::new(1e-4, 1e12, 4e-4, 1.0));
        let out = covar_weight(&sig, &w);
        assert_eq!(out.gamma[0], 0.0);
        assert!((out.gamma[1] - 10.0).abs() < 1e-6);
        assert!((out.gamma[2] - 10.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((out.gamma[2] - 6.065).abs() < 1e-3);
        assert!(out.latched[0] && !out.latched[1]);
        // Latched weights stay off even if sigma grows again.
        let later = covar_weight(&Matrix4::identity(), &out);
        assert_eq!(later.gamma[0], 0.0);
        assert!(later.gamma[3] > 0.0);
    }

    #[test]
    fn fim_is_zero_at_rest_and_mass_only_for_translation() {
        let x = RigidBodyState::at_rest(Vector3::zeros());
        let (f, _) = fisher_information_from(&x, &[Wrench::zero(); 10], 0.6, &params(), &sigma_r(), &Sensitivity::zeros()).unwrap();
        assert_eq!(f, Matrix4::zeros());
        let push = [Wrench::new(Vector3::new(0.2, 0.0, 0.0), Vector3::zeros()); 10];
        let (f, _) = fisher_information_from(&x, &push, 0.6, &params(), &sigma_r(), &Sensitivity::zeros()).unwrap();
        assert!(f[(0, 0)] > 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if (i, j) != (0, 0) {
                    assert_eq!(f[(i, j)], 0.0, "entry {i},{j}");
                }
            }
        }
    }

    fn excitation(n: usize) -> Vec<Wrench> {
        (0..n)
            .map(|k| {
                let s = k as f64 * 0.7;
                Wrench::new(
                    Vector3::new(0.1 * s.sin(), 0.05, -0.1 * s.cos()),
                    Vector3::new(0.01 * (1.3 * s).sin(), 0.01 * s.cos(), 0.008 * (0.5 * s).sin()),
                )
            })
            .collect()
    }

    #[test]
    fn fim_additive_and_translation_invariant() {
        let mut x = RigidBodyState::at_rest(Vector3::new(0.5, 0.0, 0.0));
        x.angular_velocity = Vector3::new(0.02, 0.01, -0.03);
        let u = excitation(16);
        let p = params();
        let (whole, _) = fisher_information_from(&x, &u, 0.6, &p, &sigma_r(), &Sensitivity::zeros()).unwrap();
        let (first, s_mid) = fisher_information_from(&x, &u[..7], 0.6, &p, &sigma_r(), &Sensitivity::zeros()).unwrap();
        let mid = (0..7).fold(x, |acc, k| step_rk4(&acc, &u[k], &p, 0.6));
        let (second, _) = fisher_information_from(&mid, &u[7..], 0.6, &p, &sigma_r(), &s_mid).unwrap();
        assert!((first + second - whole).amax() <= 1e-9 * whole.amax());

        let mut shifted = x;
        shifted.position += Vector3::new(3.0, -2.0, 1.0);
        let (moved, _) = fisher_information_from(&shifted, &u, 0.6, &p, &sigma_r(), &Sensitivity::zeros()).unwrap();
        assert!((moved - whole).amax() <= 1e-9 * whole.amax());
        let eig = whole.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-9 * eig.max());
    }

    #[test]
    fn fim_matches_monte_carlo_likelihood_curvature() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        use crate::dynamics::retract;

        let p = params();
        let mut x0 = RigidBodyState::at_rest(Vector3::zeros());
        x0.angular_velocity = Vector3::new(0.05, -0.03, 0.04);
        let u = excitation(12);
        let sigma = 1e-3;
        let r = MeasMatrix::identity() * sigma * sigma;
        let (f, _) = fisher_information_from(&x0, &u, 0.6, &p, &r, &Sensitivity::zeros()).unwrap();

        let traj = |theta: &Vector4<f64>| {
            let q = ParamVector::from_theta(theta, Vector3::zeros()).unwrap();
            let mut x = x0;
            u.iter()
                .map(|w| {
                    x = step_rk4(&x, w, &q, 0.6);
                    x
                })
                .collect::<Vec<_>>()
        };
        let theta = p.theta();
        let truth = traj(&theta);
        let shifted: Vec<[Vec<RigidBodyState>; 2]> = (0..4)
            .map(|i| {
                let mut d = Vector4::zeros();
                d[i] = 2e-3 * theta[i];
                [traj(&(theta + d)), traj(&(theta - d))]
            })
            .collect();
        let nll = |ys: &[RigidBodyState], xs: &[RigidBodyState]| -> f64 {
            ys.iter().zip(xs).map(|(y, x)| 0.5 * state_difference(y, x).norm_squared() / (sigma * sigma)).sum()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, sigma).unwrap();
        let samples = 400;
        let mut hess = Vector4::zeros();
        for _ in 0..samples {
            let ys: Vec<RigidBodyState> = truth
                .iter()
                .map(|x| retract(x, &ErrorVector::from_fn(|_, _| normal.sample(&mut rng))))
                .collect();
            let center = nll(&ys, &truth);
            for i in 0..4 {
                let h = 2e-3 * theta[i];
                hess[i] += (nll(&ys, &shifted[i][0]) - 2.0 * center + nll(&ys, &shifted[i][1])) / (h * h);
            }
        }
        hess /= samples as f64;
        for i in 0..4 {
            let rel = (hess[i] - f[(i, i)]).abs() / f[(i, i)];
            assert!(rel < 0.05, "param {i}: mc {} vs fim {} ({rel})", hess[i], f[(i, i)]);
        }
    }

    #[test]
    fn rejects_bad_measurement_covariance() {
        let x = RigidBodyState::at_rest(Vector3::zeros());
        let r = fisher_information_from(&x, &[Wrench::zero()], 0.6, &params(), &(-MeasMatrix::identity()), &Sensitivity::zeros());
        assert_eq!(r.unwrap_err(), LocalPlanError::BadMeasurementCovariance);
    }

    pub(crate) fn open_world() -> World {
        World::new(
            vec![],
            Bounds::new(Vector3::repeat(-5.0), Vector3::repeat(5.0)).unwrap(),
            GoalRegion {
                center: Vector3::new(1.0, 0.0, 0.0),
                radius: 0.2,
            },
            0.2,
        )
        .unwrap()
    }

    pub(crate) fn config() -> LocalPlannerConfig {
        let mut q = SVector::<f64, ERROR_DIM>::zeros();
        for i in 0..3 {
            q[i] = 20.0;
            q[3 + i] = 1.0;
            q[6 + i] = 10.0;
            q[9 + i] = 1.0;
        }
        LocalPlannerConfig {
            horizon: 20,
            dt: 0.6,
            q,
            r: Vector6::repeat(0.05),
            force_max: 0.3,
            torque_max: 0.04,
            v_max: 0.3,
            omega_max: 0.4,
            margin: 0.02,
            max_iters: 40,
            al_rounds: 2,
            sigma_r: sigma_r(),
        }
    }

    #[test]
    fn quadratic_case_matches_riccati_oracle() {
        let cfg = config();
        let p = params();
        let n = cfg.horizon;
        let world = open_world();
        let reference: Vec<Vector6<f64>> = (0..=n)
            .map(|k| {
                let t = k as f64 * cfg.dt;
                Vector6::new(0.05 * t, 0.3 * (0.2 * t).sin(), -0.02 * t, 0.05, 0.06 * (0.2 * t).cos(), -0.02)
            })
            .collect();
        let mut x0 = RigidBodyState::at_rest(Vector3::zeros());
        x0.velocity = Vector3::new(0.05, 0.06, -0.02);
        let plan = plan_local(&x0, 0.0, &reference, &UnitQuaternion::identity(), &p, &Vector4::zeros(), &world, &cfg, &[]).unwrap();

        // Finite-horizon Riccati with an affine term, per axis.
        let (a, b) = crate::dynamics::discretize_translational(p.mass, cfg.dt);
        let a2 = nalgebra::Matrix2::new(a[(0, 0)], a[(0, 3)], 0.0, 1.0);
        let b2 = nalgebra::Vector2::new(b[(0, 0)], b[(3, 0)]);
        let qm = nalgebra::Matrix2::new(cfg.q[0], 0.0, 0.0, cfg.q[6]);
        let r_phys = cfg.r[0] / (cfg.force_max * cfg.force_max);
        for axis in 0..3 {
            let refs: Vec<nalgebra::Vector2<f64>> = reference
                .iter()
                .map(|z| nalgebra::Vector2::new(z[axis], z[3 + axis]))
                .collect();
            // V_k(x) = x'P x - 2 s'x + const
            let mut pk = qm;
            let mut sk = qm * refs[n];
            let mut gains = vec![(nalgebra::RowVector2::zeros(), 0.0); n];
            for k in (0..n).rev() {
                let denom = r_phys + (b2.transpose() * pk * b2)[0];
                let kx = (b2.transpose() * pk * a2) / denom;
                let kff = (b2.transpose() * sk)[0] / denom;
                gains[k] = (kx, kff);
                let acl = a2 - b2 * kx;
                let p_new = acl.transpose() * pk * acl + kx.transpose() * kx * r_phys;
                let s_new = acl.transpose() * (sk - pk * b2 * kff) + kx.transpose() * r_phys * kff;
                if k > 0 {
                    pk = qm + p_new;
                    sk = qm * refs[k] + s_new;
                }
            }
            let mut xk = nalgebra::Vector2::new(0.0, x0.velocity[axis]);
            for k in 0..n {
                let u = -(gains[k].0 * xk)[0] + gains[k].1;
                let planned = plan.inputs[k].force[axis];
                assert!((u - planned).abs() < 1e-3, "axis {axis} stage {k}: {u} vs {planned}");
                xk = a2 * xk + b2 * u;
            }
        }
        for w in &plan.inputs {
            assert!(w.torque.amax() < 1e-6);
        }
    }

    #[test]
    fn information_weight_increases_inertia_information() {
        let mut cfg = config();
        cfg.max_iters = 30;
        cfg.q[3] = 0.1;
        cfg.q[4] = 0.1;
        cfg.q[5] = 0.1;
        let p = params();
        let world = open_world();
        let reference = vec![Vector6::zeros(); cfg.horizon + 1];
        let x0 = RigidBodyState::at_rest(Vector3::zeros());
        let zero = plan_local(&x0, 0.0, &reference, &UnitQuaternion::identity(), &p, &Vector4::zeros(), &world, &cfg, &[]).unwrap();
        let gamma = Vector4::new(0.0, 10.0, 10.0, 10.0);
        let seed: Vec<Wrench> = excitation(cfg.horizon).iter().map(|w| Wrench::new(Vector3::zeros(), w.torque)).collect();
        let on = plan_local(&x0, 0.0, &reference, &UnitQuaternion::identity(), &p, &gamma, &world, &cfg, &seed).unwrap();
        let inertia = |f: &Matrix4<f64>| f[(1, 1)] + f[(2, 2)] + f[(3, 3)];
        assert!(inertia(&on.fim) > inertia(&zero.fim));
        assert!(on.states.iter().any(|s| s.angular_velocity.norm() > 1e-3));

        // Started from the gamma = 0 optimum, the weighted solve can only improve.
        let from_zero = plan_local(&x0, 0.0, &reference, &UnitQuaternion::identity(), &p, &gamma, &world, &cfg, &zero.inputs).unwrap();
        let zero_under_gamma = CostBreakdown {
            information: information_cost(&zero.fim, &gamma),
            ..zero.cost
        };
        assert!(from_zero.cost.total() <= zero_under_gamma.total() + 1e-6);
    }
}
