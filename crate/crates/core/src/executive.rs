//! Closed-loop simulation on one simulated clock: truth model with process
//! and measurement noise, estimator, global and local planning, tube MPC and
//! attitude PD.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix4, Matrix6, SVector, UnitQuaternion, Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{retract, step_rk4, ErrorVector, ParamVector, RigidBodyState, Wrench, ERROR_DIM};
use crate::estimator::{AugMatrix, AugmentedBelief, EkfNoise, MeasMatrix, ParamBelief, AUG_DIM};
use crate::global_planner::{
    plan_global, replan_global, GlobalPlan, GlobalPlannerConfig, MotionPrimitiveSet, PlannerError,
    TranslationalState,
};
use crate::local_planner::{
    covar_weight, plan_local, reference_from_global, InfoWeights, LocalPlan, LocalPlannerConfig,
};
use crate::robust_control::{
    compute_mrpi, parameter_disturbance_inflation, pd_attitude_control, tube_mpc_step, AncillaryDesign,
    ControlError, DisturbanceBox, InputEnvelope, PdGains, TubeMpcConfig, TubeSet,
};
use crate::validation::{check_local_plan, collision_at, PlanLimits};
use crate::world::{Bounds, Ellipsoid, GoalRegion, World, WorldError, DEFAULT_RESOLUTION};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario schema error: {0}")]
    Schema(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl From<WorldError> for ScenarioError {
    fn from(e: WorldError) -> Self {
        ScenarioError::Invalid(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center_m: [f64; 3],
    pub semi_axes_m: [f64; 3],
}

impl ObstacleSpec {
    pub fn build(&self) -> Result<Ellipsoid, WorldError> {
        Ellipsoid::new(self.center_m.into(), self.semi_axes_m.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub bounds_min_m: [f64; 3],
    pub bounds_max_m: [f64; 3],
    pub obstacles: Vec<ObstacleSpec>,
    pub goal_center_m: [f64; 3],
    pub goal_radius_m: f64,
    pub robot_radius_m: f64,
}

impl WorldSpec {
    pub fn build(&self) -> Result<World, WorldError> {
        let obstacles = self.obstacles.iter().map(ObstacleSpec::build).collect::<Result<_, _>>()?;
        World::new(
            obstacles,
            Bounds::new(self.bounds_min_m.into(), self.bounds_max_m.into())?,
            GoalRegion {
                center: self.goal_center_m.into(),
                radius: self.goal_radius_m,
            },
            self.robot_radius_m,
        )
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("world spec serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub mass_kg: f64,
    pub inertia_kgm2: [f64; 3],
    #[serde(default)]
    pub cm_offset_m: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefSpec {
    pub mass_kg: f64,
    pub inertia_kgm2: [f64; 3],
    pub mass_std_kg: f64,
    pub inertia_std_kgm2: [f64; 3],
}

impl BeliefSpec {
    pub fn param_belief(&self) -> ParamBelief {
        let [ix, iy, iz] = self.inertia_kgm2;
        let [sx, sy, sz] = self.inertia_std_kgm2;
        ParamBelief::from_std(Vector4::new(self.mass_kg, ix, iy, iz), Vector4::new(self.mass_std_kg, sx, sy, sz))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoWeightSpec {
    /// Initial weights on `[m, Ixx, Iyy, Izz]`.
    pub gamma0: [f64; 4],
    pub alpha: f64,
    pub beta: f64,
    /// Target standard deviations (kg, kg m^2).
    pub sigma_floor: [f64; 4],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    /// Uniform inside the box.
    #[default]
    Uniform,
    /// Vertices of the box only.
    Boundary,
    /// Alternating ticks of the two.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-tick additive disturbance bounds on position and velocity.
    pub disturbance_position_m: f64,
    pub disturbance_velocity_mps: f64,
    #[serde(default)]
    pub disturbance_mode: DisturbanceMode,
    /// Per-tick standard deviation of the angular velocity kick.
    pub angular_velocity_noise_radps: f64,
    pub meas_position_m: f64,
    pub meas_attitude_rad: f64,
    pub meas_velocity_mps: f64,
    pub meas_angular_velocity_radps: f64,
    #[serde(default = "default_param_walk")]
    pub param_walk: f64,
}

fn default_param_walk() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Periods {
    pub local_s: f64,
    pub control_s: f64,
    pub truth_step_s: f64,
}

impl Default for Periods {
    fn default() -> Self {
        Self {
            local_s: 12.0,
            control_s: 0.2,
            truth_step_s: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Horizons {
    pub local_steps: usize,
    pub local_dt_s: f64,
    pub mpc_steps: usize,
}

impl Default for Horizons {
    fn default() -> Self {
        Self {
            local_steps: 20,
            local_dt_s: 0.6,
            mpc_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Actuators {
    /// Body per-axis bounds.
    pub force_max_n: f64,
    pub torque_max_nm: f64,
}

impl Default for Actuators {
    fn default() -> Self {
        Self {
            force_max_n: 0.5,
            torque_max_nm: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerTuning {
    pub global_force_n: f64,
    pub primitive_duration_s: f64,
    pub global_max_iters: usize,
    pub goal_speed_mps: f64,
    /// Extra radius the global planner keeps from obstacles and walls.
    pub global_clearance_m: f64,
    pub local_force_max_n: f64,
    pub local_torque_max_nm: f64,
    pub speed_max_mps: f64,
    pub rate_max_radps: f64,
    pub margin_m: f64,
    pub q_position: f64,
    pub q_attitude: f64,
    pub q_velocity: f64,
    pub q_rate: f64,
    pub r_force: f64,
    pub r_torque: f64,
    pub local_iters: usize,
    pub al_rounds: usize,
    /// Amplitude of the torque seed used while inertia weights are on, as a
    /// fraction of the local torque bound.
    pub excitation_seed: f64,
}

impl Default for PlannerTuning {
    fn default() -> Self {
        Self {
            global_force_n: 0.08,
            primitive_duration_s: 2.0,
            global_max_iters: 20_000,
            goal_speed_mps: 0.05,
            global_clearance_m: 0.1,
            local_force_max_n: 0.15,
            local_torque_max_nm: 0.03,
            speed_max_mps: 0.2,
            rate_max_radps: 0.3,
            margin_m: 0.05,
            q_position: 20.0,
            q_attitude: 0.05,
            q_velocity: 10.0,
            q_rate: 0.1,
            r_force: 0.05,
            r_torque: 0.05,
            local_iters: 30,
            al_rounds: 2,
            excitation_seed: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlTuning {
    pub q_position: f64,
    pub q_velocity: f64,
    pub r_force: f64,
    pub kp: f64,
    pub kd: f64,
    pub mrpi_eps: f64,
    pub mrpi_s_max: usize,
    pub speed_limit_mps: f64,
}

impl Default for ControlTuning {
    fn default() -> Self {
        Self {
            q_position: 10.0,
            q_velocity: 10.0,
            r_force: 1.0,
            kp: 0.4,
            kd: 0.8,
            mrpi_eps: 1e-3,
            mrpi_s_max: 200,
            speed_limit_mps: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleEvent {
    pub time_s: f64,
    pub obstacle: ObstacleSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub world: WorldSpec,
    pub start_position_m: [f64; 3],
    pub truth: TruthSpec,
    pub belief: BeliefSpec,
    pub info_weights: InfoWeightSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub periods: Periods,
    #[serde(default)]
    pub horizons: Horizons,
    #[serde(default)]
    pub actuators: Actuators,
    #[serde(default)]
    pub planner: PlannerTuning,
    #[serde(default)]
    pub control: ControlTuning,
    #[serde(default)]
    pub events: Vec<ObstacleEvent>,
    pub seed: u64,
    pub duration_s: f64,
}

fn ratio_is_integer(a: f64, b: f64) -> bool {
    let r = a / b;
    r >= 1.0 - 1e-9 && (r - r.round()).abs() <= 1e-9
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ScenarioError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        let p = &self.periods;
        if !(p.local_s > 0.0 && p.control_s > 0.0 && p.truth_step_s > 0.0) {
            return bad("periods must be positive");
        }
        if !ratio_is_integer(p.local_s, p.control_s) {
            return bad("local period must be an integer multiple of the control period");
        }
        if !ratio_is_integer(p.control_s, p.truth_step_s) {
            return bad("control period must be an integer multiple of the truth step");
        }
        if self.horizons.local_steps < 2 || self.horizons.mpc_steps < 1 || !(self.horizons.local_dt_s > 0.0) {
            return bad("horizons must be positive (local_steps >= 2)");
        }
        if !(self.duration_s >= 0.0) {
            return bad("duration_s must be nonnegative");
        }
        let n = &self.noise;
        let stds = [
            n.disturbance_position_m,
            n.disturbance_velocity_mps,
            n.angular_velocity_noise_radps,
            n.param_walk,
        ];
        if stds.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise magnitudes must be nonnegative");
        }
        let meas = [n.meas_position_m, n.meas_attitude_rad, n.meas_velocity_mps, n.meas_angular_velocity_radps];
        if meas.iter().any(|s| !(*s > 0.0)) {
            return bad("measurement standard deviations must be positive");
        }
        self.truth_params()?;
        let b = &self.belief;
        if !(b.mass_std_kg >= 0.0) || b.inertia_std_kgm2.iter().any(|s| !(*s >= 0.0)) {
            return bad("belief standard deviations must be nonnegative");
        }
        ParamVector::new(b.mass_kg, b.inertia_kgm2.into()).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.info_weights()?;
        let world = self.world.build()?;
        let start: Vector3<f64> = self.start_position_m.into();
        if collision_at(&world, &start).is_some() {
            return bad("start position is not free");
        }
        if self.actuators.force_max_n <= 0.0 || self.actuators.torque_max_nm <= 0.0 {
            return bad("actuator bounds must be positive");
        }
        if !(self.planner.global_clearance_m >= 0.0) {
            return bad("global_clearance_m must be nonnegative");
        }
        for e in &self.events {
            e.obstacle.build()?;
            if !(e.time_s >= 0.0) {
                return bad("event times must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn truth_params(&self) -> Result<ParamVector, ScenarioError> {
        ParamVector::with_cm_offset(
            self.truth.mass_kg,
            self.truth.inertia_kgm2.into(),
            self.truth.cm_offset_m.into(),
        )
        .map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn info_weights(&self) -> Result<InfoWeights, ScenarioError> {
        let w = &self.info_weights;
        InfoWeights::new(w.gamma0.into(), w.alpha, w.beta, w.sigma_floor.into())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn base_disturbance(&self) -> DisturbanceBox {
        let (p, v) = (self.noise.disturbance_position_m, self.noise.disturbance_velocity_mps);
        DisturbanceBox {
            w_max: Vector6::new(p, p, p, v, v, v),
        }
    }

    pub fn measurement_covariance(&self) -> MeasMatrix {
        let n = &self.noise;
        let s = [n.meas_position_m, n.meas_attitude_rad, n.meas_velocity_mps, n.meas_angular_velocity_radps];
        MeasMatrix::from_diagonal(&SVector::<f64, ERROR_DIM>::from_fn(|i, _| s[i / 3] * s[i / 3]))
    }

    /// Filter noise matched to the simulated process: uniform per-tick kicks
    /// have variance `w^2 / 3`.
    pub fn ekf_noise(&self) -> EkfNoise {
        let n = &self.noise;
        let t = self.periods.control_s;
        let dens = |w: f64| (w * w / 3.0 / t).max(1e-12);
        let mut q = SVector::<f64, AUG_DIM>::zeros();
        for i in 0..3 {
            q[i] = dens(n.disturbance_position_m);
            q[3 + i] = 1e-12;
            q[6 + i] = dens(n.disturbance_velocity_mps);
            q[9 + i] = (n.angular_velocity_noise_radps.powi(2) / t).max(1e-12);
        }
        for i in 0..4 {
            q[12 + i] = n.param_walk;
        }
        EkfNoise {
            q_proc: AugMatrix::from_diagonal(&q),
            r_meas: self.measurement_covariance(),
            substeps: 1,
        }
    }

    pub fn local_config(&self) -> LocalPlannerConfig {
        let t = &self.planner;
        let mut q = SVector::<f64, ERROR_DIM>::zeros();
        for i in 0..3 {
            q[i] = t.q_position;
            q[3 + i] = t.q_attitude;
            q[6 + i] = t.q_velocity;
            q[9 + i] = t.q_rate;
        }
        LocalPlannerConfig {
            horizon: self.horizons.local_steps,
            dt: self.horizons.local_dt_s,
            q,
            r: Vector6::new(t.r_force, t.r_force, t.r_force, t.r_torque, t.r_torque, t.r_torque),
            force_max: t.local_force_max_n,
            torque_max: t.local_torque_max_nm,
            v_max: t.speed_max_mps,
            omega_max: t.rate_max_radps,
            margin: t.margin_m,
            max_iters: t.local_iters,
            al_rounds: t.al_rounds,
            sigma_r: self.measurement_covariance(),
        }
    }

    /// Inertial per-axis force bound that cannot saturate the body box.
    pub fn mpc_force_bound(&self) -> f64 {
        self.actuators.force_max_n / 3f64.sqrt()
    }

    pub fn mpc_config(&self, world: &World) -> TubeMpcConfig {
        let c = &self.control;
        let b = world.bounds();
        let v = c.speed_limit_mps;
        TubeMpcConfig {
            horizon: self.horizons.mpc_steps,
            q: Matrix6::from_diagonal(&Vector6::new(
                c.q_position,
                c.q_position,
                c.q_position,
                c.q_velocity,
                c.q_velocity,
                c.q_velocity,
            )),
            r: Matrix3::identity() * c.r_force,
            u_max: self.mpc_force_bound(),
            x_min: Vector6::new(b.min.x, b.min.y, b.min.z, -v, -v, -v),
            x_max: Vector6::new(b.max.x, b.max.y, b.max.z, v, v, v),
        }
    }

    /// World seen by the global planner: the robot grown and the bounds
    /// pulled in by the clearance. Falls back to the unpadded world when
    /// `from` is not free in the padded one.
    pub fn planning_world(&self, world: &World, from: &Vector3<f64>) -> World {
        let c = self.planner.global_clearance_m;
        let b = world.bounds();
        let padded = Bounds::new(b.min.add_scalar(c), b.max.add_scalar(-c))
            .and_then(|bounds| World::new(world.obstacles().to_vec(), bounds, *world.goal(), world.robot_radius() + c));
        match padded {
            Ok(w) if w.point_free(from) => w,
            Ok(_) | Err(_) => {
                log::warn!("start {:?} not free with global clearance {c}, planning without it", from.as_slice());
                world.clone()
            }
        }
    }

    pub fn global_config(&self, seed: u64) -> GlobalPlannerConfig {
        GlobalPlannerConfig {
            max_iters: self.planner.global_max_iters,
            seed,
            goal_speed: self.planner.goal_speed_mps,
            ..GlobalPlannerConfig::default()
        }
    }
}

/// One controller tick.
#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub truth: RigidBodyState,
    pub theta_hat: Vector4<f64>,
    pub sigma_theta: Vector4<f64>,
    pub gamma: Vector4<f64>,
    /// Running sum of the adopted local plans' information diagonals.
    pub fim_diag: Vector4<f64>,
    pub z_box: Vector6<f64>,
    pub applied: Wrench,
    pub estimate: Vector6<f64>,
    pub z0: Vector6<f64>,
    pub mode: ControlMode,
    pub events: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Tube = 0,
    Ancillary = 1,
    Hold = 2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlanRecord {
    pub t: f64,
    pub reason: String,
    pub seed: u64,
    pub plan: GlobalPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPlanRecord {
    pub t: f64,
    pub params: ParamVector,
    pub gamma: Vector4<f64>,
    pub w_max: Vector6<f64>,
    pub inflation_clamped: bool,
    pub z_box: Vector6<f64>,
    pub mrpi_terms: usize,
    pub mrpi_alpha: f64,
    pub adopted: bool,
    pub failure: Option<String>,
    pub max_dynamics_error: f64,
    pub plan: Option<LocalPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub t: f64,
    pub obstacle: ObstacleSpec,
    pub accepted: bool,
    pub replan_needed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Duration,
    NoPlan,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub global_ms: Vec<f64>,
    pub local_ms: Vec<f64>,
    pub mrpi_ms: Vec<f64>,
    pub control_ms: Vec<f64>,
    pub estimator_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimLog {
    pub config: ScenarioConfig,
    pub rows: Vec<TickRecord>,
    pub global_plans: Vec<GlobalPlanRecord>,
    pub local_plans: Vec<LocalPlanRecord>,
    pub insertions: Vec<InsertionRecord>,
    pub events: Vec<EventRecord>,
    pub termination: Termination,
    pub final_belief: ParamBelief,
    /// Ticks where the state one tick later left the predicted nominal tube.
    pub tube_step_exits: usize,
    pub timings: Timings,
}

#[derive(Debug, Error)]
#[error("run failed at t = {t}: {error}")]
pub struct RunFailure {
    pub t: f64,
    pub error: PlannerError,
    pub log: Box<SimLog>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Failed(#[from] RunFailure),
}

fn hold_at(world: &World, p: &Vector3<f64>) -> Vector3<f64> {
    let b = world.bounds();
    Vector3::from_fn(|i, _| p[i].clamp(b.min[i], b.max[i]))
}

fn translational(x: &RigidBodyState) -> Vector6<f64> {
    x.translational()
}

fn sample_disturbance(rng: &mut ChaCha8Rng, w: &Vector6<f64>, mode: DisturbanceMode, tick: usize) -> Vector6<f64> {
    let vertex = match mode {
        DisturbanceMode::Uniform => false,
        DisturbanceMode::Boundary => true,
        DisturbanceMode::Mixed => tick.is_multiple_of(2),
    };
    Vector6::from_fn(|i, _| {
        if vertex {
            if rng.random::<bool>() { w[i] } else { -w[i] }
        } else {
            rng.random_range(-1.0..=1.0) * w[i]
        }
    })
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Mutable loop state shared by the cycle helpers.
struct Loop<'a> {
    cfg: &'a ScenarioConfig,
    world: World,
    belief: AugmentedBelief,
    weights: InfoWeights,
    design: AncillaryDesign,
    tube: TubeSet,
    global: GlobalPlan,
    local: Option<LocalPlan>,
    local_params: ParamVector,
    hold: Option<(Vector3<f64>, UnitQuaternion<f64>)>,
    /// Global-plan time matched to the robot's progress along the path.
    clock: f64,
    fim_sum: Matrix4<f64>,
    log: SimLog,
}

impl Loop<'_> {
    fn event(&mut self, t: f64, kind: &str, detail: String, tick: &mut Vec<String>) {
        log::info!("t={t:.1} {kind}: {detail}");
        tick.push(kind.to_string());
        self.log.events.push(EventRecord {
            t,
            kind: kind.to_string(),
            detail,
        });
    }

    fn warm_start(&self, t: f64, q_ref: &UnitQuaternion<f64>, mass: f64, excite: bool) -> Vec<Wrench> {
        let n = self.cfg.horizons.local_steps;
        let dt = self.cfg.horizons.local_dt_s;
        let tau_max = self.cfg.planner.local_torque_max_nm * self.cfg.planner.excitation_seed;
        (0..n)
            .map(|k| {
                let tk = t + k as f64 * dt;
                let mut w = match &self.local {
                    Some(prev) if tk + 1e-9 < prev.end_time() && tk >= prev.t0 => prev.wrench_at(tk + 1e-9),
                    _ => {
                        let tg = self.clock + k as f64 * dt;
                        let f = self.global.input_at(tg + 0.5 * dt) * (mass / self.global.mass);
                        Wrench::new(q_ref.inverse_transform_vector(&f), Vector3::zeros())
                    }
                };
                if excite {
                    let s = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
                    w.torque += Vector3::new((2.0 * s).sin(), (3.0 * s + 1.0).sin(), (4.0 * s + 2.0).sin()) * tau_max;
                }
                w
            })
            .collect()
    }

    /// Advances `clock` to the closest point of the global plan within one
    /// local period plus slack ahead, so a lagging robot is not handed a
    /// reference it can no longer reach.
    fn advance_clock(&mut self) {
        let p = self.belief.state.position;
        let end = self.global.end_time();
        let window = 2.0 * self.cfg.periods.local_s;
        let step = 0.1;
        let mut best = (self.clock, f64::INFINITY);
        let mut tau = self.clock;
        while tau <= (self.clock + window).min(end) + 1e-12 {
            let d = (self.global.state_at(tau).0 - p).norm();
            if d < best.1 {
                best = (tau, d);
            }
            tau += step;
        }
        self.clock = best.0;
    }

    fn local_cycle(&mut self, t: f64, tick: &mut Vec<String>) {
        let cfg = self.cfg;
        let pb = self.belief.current_params();
        let before = self.weights.latched;
        self.weights = covar_weight(&pb.sigma_theta, &self.weights);
        for i in 0..4 {
            if self.weights.latched[i] && !before[i] && self.weights.gamma0[i] > 0.0 {
                self.event(t, "gamma_shutoff", format!("parameter {i}"), tick);
            }
        }
        let env = InputEnvelope {
            u_max: cfg.mpc_force_bound(),
            v_max: cfg.control.speed_limit_mps,
        };
        let started = Instant::now();
        let inflation = parameter_disturbance_inflation(&cfg.base_disturbance(), &pb, &env, cfg.periods.control_s);
        let q = cfg.mpc_config(&self.world).q;
        let r = Matrix3::identity() * cfg.control.r_force;
        if let Err(e) = self.design.refresh(pb.mass(), &q, &r) {
            log::warn!("ancillary redesign failed: {e}");
        }
        match compute_mrpi(&self.design.closed_loop(), &inflation.w, cfg.control.mrpi_eps, cfg.control.mrpi_s_max) {
            Ok(tube) => self.tube = tube,
            Err(e) => {
                let detail = e.to_string();
                self.event(t, "mrpi_failed", detail, tick);
            }
        }
        self.log.timings.mrpi_ms.push(elapsed_ms(started));

        let lcfg = cfg.local_config();
        let p_hat = self.belief.params();
        let x_now = self.belief.state;
        let q_ref = x_now.attitude;
        self.advance_clock();
        let reference = reference_from_global(&self.global, self.clock, lcfg.horizon, lcfg.dt);
        log::debug!(
            "t={t:.1} clock {:.1} from {:?} ref {:?} -> {:?}",
            self.clock,
            x_now.position.as_slice(),
            reference[0].as_slice(),
            reference[lcfg.horizon].as_slice()
        );
        let excite = (1..4).any(|i| self.weights.gamma[i] > 0.0) && cfg.planner.excitation_seed > 0.0;
        let warm = self.warm_start(t, &q_ref, p_hat.mass, excite);
        let started = Instant::now();
        let result = plan_local(&x_now, t, &reference, &q_ref, &p_hat, &self.weights.gamma, &self.world, &lcfg, &warm);
        self.log.timings.local_ms.push(elapsed_ms(started));
        let mut record = LocalPlanRecord {
            t,
            params: p_hat,
            gamma: self.weights.gamma,
            w_max: inflation.w.w_max,
            inflation_clamped: inflation.clamped,
            z_box: self.tube.z_box,
            mrpi_terms: self.tube.source.s,
            mrpi_alpha: self.tube.source.alpha,
            adopted: false,
            failure: None,
            max_dynamics_error: 0.0,
            plan: None,
        };
        match result {
            Ok(plan) => {
                let limits = PlanLimits {
                    force_max: lcfg.force_max,
                    torque_max: lcfg.torque_max,
                    resolution: DEFAULT_RESOLUTION,
                };
                let check = check_local_plan(&plan, &p_hat, &self.world, &limits);
                record.max_dynamics_error = check.max_dynamics_error;
                if check.passed() {
                    record.adopted = true;
                    self.fim_sum += plan.fim;
                    self.local = Some(plan.clone());
                    self.local_params = p_hat;
                    self.hold = None;
                } else {
                    let why = check.failures.join("; ");
                    record.failure = Some(why.clone());
                    self.event(t, "local_rejected", why, tick);
                }
                record.plan = Some(plan);
            }
            Err(e) => {
                record.failure = Some(e.to_string());
                self.event(t, "local_infeasible", e.to_string(), tick);
            }
        }
        self.log.local_plans.push(record);
    }

    /// Reference translational states, forces and the attitude target for
    /// the MPC horizon starting at `t`.
    #[allow(clippy::type_complexity)]
    fn references(&mut self, t: f64) -> (Vec<Vector6<f64>>, Vec<Vector3<f64>>, UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
        let n = self.cfg.horizons.mpc_steps;
        let dt = self.cfg.periods.control_s;
        if let Some(plan) = &self.local {
            if t < plan.end_time() - 1e-9 {
                let p = &self.local_params;
                let last = *plan.states.last().expect("plan has states");
                let mut xs = Vec::with_capacity(n + 1);
                let mut us = Vec::with_capacity(n);
                for i in 0..=n {
                    let ti = t + i as f64 * dt;
                    if ti < plan.end_time() {
                        let s = plan.state_at(ti, p);
                        xs.push(translational(&s));
                        if i < n {
                            us.push(s.attitude * plan.wrench_at(ti).force);
                        }
                    } else {
                        let tau = ti - plan.end_time();
                        let mut z = translational(&last);
                        let v = last.velocity;
                        z.fixed_rows_mut::<3>(0).copy_from(&(last.position + v * tau));
                        xs.push(z);
                        if i < n {
                            us.push(Vector3::zeros());
                        }
                    }
                }
                let s = plan.state_at(t, p);
                return (xs, us, s.attitude, s.angular_velocity, plan.wrench_at(t).torque);
            }
        }
        let (pos, att) = *self.hold.get_or_insert_with(|| {
            (hold_at(&self.world, &self.belief.state.position), self.belief.state.attitude)
        });
        let mut z = Vector6::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&pos);
        (vec![z; n + 1], vec![Vector3::zeros(); n], att, Vector3::zeros(), Vector3::zeros())
    }
}

/// Runs the closed loop. Deterministic for a given configuration.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimLog, RunError> {
    cfg.validate()?;
    let world = cfg.world.build().map_err(ScenarioError::from)?;
    let truth_p = cfg.truth_params()?;
    let start: Vector3<f64> = cfg.start_position_m.into();
    let mut truth = RigidBodyState::at_rest(start);
    let pb0 = cfg.belief.param_belief();
    let belief = AugmentedBelief::new(
        truth,
        cfg.measurement_covariance(),
        pb0,
        truth_p.cm_offset,
        cfg.ekf_noise(),
        0.0,
    );
    let mpc = cfg.mpc_config(&world);
    let design = AncillaryDesign::new(pb0.mass(), cfg.periods.control_s, &mpc.q, &mpc.r)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let tube = compute_mrpi(&design.closed_loop(), &cfg.base_disturbance(), cfg.control.mrpi_eps, cfg.control.mrpi_s_max)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let prims = MotionPrimitiveSet::axis_aligned(cfg.planner.global_force_n, cfg.planner.primitive_duration_s);

    let mut log = SimLog {
        config: cfg.clone(),
        rows: Vec::new(),
        global_plans: Vec::new(),
        local_plans: Vec::new(),
        insertions: Vec::new(),
        events: Vec::new(),
        termination: Termination::Duration,
        final_belief: pb0,
        tube_step_exits: 0,
        timings: Timings::default(),
    };

    let start_state = TranslationalState {
        position: start,
        velocity: Vector3::zeros(),
    };
    let started = Instant::now();
    let first = plan_global(&start_state, 0.0, &cfg.planning_world(&world, &start_state.position), pb0.mass(), &prims, &cfg.global_config(cfg.seed));
    log.timings.global_ms.push(elapsed_ms(started));
    let global = match first {
        Ok(g) => g,
        Err(error) => {
            log.termination = Termination::NoPlan;
            return Err(RunFailure {
                t: 0.0,
                error,
                log: Box::new(log),
            }
            .into());
        }
    };
    log.global_plans.push(GlobalPlanRecord {
        t: 0.0,
        reason: "initial".into(),
        seed: cfg.seed,
        plan: global.clone(),
    });

    let weights = cfg.info_weights()?;
    let mut lp = Loop {
        cfg,
        world,
        belief,
        weights,
        design,
        tube,
        global,
        local: None,
        local_params: truth_p,
        hold: None,
        clock: 0.0,
        fim_sum: Matrix4::zeros(),
        log,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let meas_std = {
        let n = &cfg.noise;
        [n.meas_position_m, n.meas_attitude_rad, n.meas_velocity_mps, n.meas_angular_velocity_radps]
    };
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let dt = cfg.periods.control_s;
    let per_local = (cfg.periods.local_s / dt).round() as usize;
    let substeps = (dt / cfg.periods.truth_step_s).round() as usize;
    let h = dt / substeps as f64;
    let goal_speed = cfg.planner.goal_speed_mps;
    let w_base = cfg.base_disturbance().w_max;
    let pd = PdGains {
        kp: cfg.control.kp,
        kd: cfg.control.kd,
    };
    let mut pending: Vec<&ObstacleEvent> = cfg.events.iter().collect();
    pending.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    let mut pending = pending.into_iter().peekable();
    let mut replans = 0u64;
    let mut last_mode = ControlMode::Tube;
    let mut predicted: Option<Vector6<f64>> = None;

    let mut k = 0usize;
    loop {
        let t = k as f64 * dt;
        let mut tick = Vec::new();
        if let Some(z1) = predicted.take() {
            let e = lp.belief.state.translational() - z1;
            if !lp.tube.contains(&e) {
                lp.log.tube_step_exits += 1;
            }
        }
        let at_goal = lp.world.goal().contains(&truth.position) && truth.velocity.norm() <= goal_speed;
        let out_of_time = t > cfg.duration_s + 1e-9;
        let mut force_local = false;

        if !at_goal && !out_of_time {
            while pending.peek().is_some_and(|e| e.time_s <= t + 1e-9) {
                let ev = pending.next().expect("peeked");
                let e = ev.obstacle.build().expect("validated obstacle");
                let path = lp.global.path_from(lp.clock, DEFAULT_RESOLUTION);
                match lp.world.add_obstacle(e, &lp.belief.state.position, &path, DEFAULT_RESOLUTION) {
                    Ok(ins) => {
                        lp.world = ins.world;
                        lp.log.insertions.push(InsertionRecord {
                            t,
                            obstacle: ev.obstacle.clone(),
                            accepted: true,
                            replan_needed: ins.replan_needed,
                        });
                        lp.event(t, "obstacle_inserted", format!("{:?}", ev.obstacle.center_m), &mut tick);
                        if ins.replan_needed {
                            replans += 1;
                            let seed = cfg.seed.wrapping_add(replans);
                            let now = TranslationalState {
                                position: lp.belief.state.position,
                                velocity: lp.belief.state.velocity,
                            };
                            let started = Instant::now();
                            let res = replan_global(&now, t, &cfg.planning_world(&lp.world, &now.position), lp.belief.params().mass, &prims, &cfg.global_config(seed));
                            lp.log.timings.global_ms.push(elapsed_ms(started));
                            match res {
                                Ok(g) => {
                                    lp.log.global_plans.push(GlobalPlanRecord {
                                        t,
                                        reason: "obstacle".into(),
                                        seed,
                                        plan: g.clone(),
                                    });
                                    lp.global = g;
                                    lp.clock = t;
                                    force_local = true;
                                    lp.event(t, "global_replan", format!("seed {seed}"), &mut tick);
                                }
                                Err(error) => {
                                    lp.event(t, "no_plan", error.to_string(), &mut tick);
                                    lp.log.termination = Termination::NoPlan;
                                    lp.log.final_belief = lp.belief.current_params();
                                    return Err(RunFailure {
                                        t,
                                        error,
                                        log: Box::new(lp.log),
                                    }
                                    .into());
                                }
                            }
                        }
                    }
                    Err(e) => {
                        lp.log.insertions.push(InsertionRecord {
                            t,
                            obstacle: ev.obstacle.clone(),
                            accepted: false,
                            replan_needed: false,
                        });
                        lp.event(t, "obstacle_rejected", e.to_string(), &mut tick);
                    }
                }
            }
            if k.is_multiple_of(per_local) || force_local {
                lp.local_cycle(t, &mut tick);
            }
        }

        // Control.
        let started = Instant::now();
        let (x_ref, u_ref, q_d, w_d, tau_ff) = lp.references(t);
        let x_hat = lp.belief.state;
        let xt = x_hat.translational();
        let mpc = cfg.mpc_config(&lp.world);
        let (u_inertial, z0, mode) = match tube_mpc_step(&xt, &x_ref, &u_ref, &lp.tube, &lp.design, &mpc) {
            Ok(out) => {
                predicted = Some(lp.design.a * out.z0 + lp.design.b * out.v0);
                (out.u, out.z0, if lp.local.is_some() && lp.hold.is_none() { ControlMode::Tube } else { ControlMode::Hold })
            }
            Err(e) => {
                if last_mode != ControlMode::Ancillary {
                    let detail = match &e {
                        ControlError::TightenedInfeasible(s) => s.clone(),
                        other => other.to_string(),
                    };
                    lp.event(t, "tightened_infeasible", detail, &mut tick);
                }
                let u = u_ref[0] + lp.design.gain.k_anc * (xt - x_ref[0]);
                let u = u.map(|c| c.clamp(-mpc.u_max, mpc.u_max));
                (u, x_ref[0], ControlMode::Ancillary)
            }
        };
        if mode == ControlMode::Tube && last_mode == ControlMode::Ancillary {
            lp.event(t, "tube_restored", String::new(), &mut tick);
        }
        last_mode = mode;
        let tau = tau_ff + pd_attitude_control(&x_hat.attitude, &x_hat.angular_velocity, &q_d, &w_d, &pd);
        let f_body = x_hat.attitude.inverse_transform_vector(&u_inertial);
        let fm = cfg.actuators.force_max_n;
        let tm = cfg.actuators.torque_max_nm;
        let applied = Wrench::new(f_body.map(|c| c.clamp(-fm, fm)), tau.map(|c| c.clamp(-tm, tm)));
        lp.log.timings.control_ms.push(elapsed_ms(started));

        if at_goal {
            lp.event(t, "goal_reached", String::new(), &mut tick);
            lp.log.termination = Termination::Goal;
        } else if out_of_time {
            lp.log.termination = Termination::Duration;
        }
        let pb = lp.belief.current_params();
        lp.log.rows.push(TickRecord {
            t,
            truth,
            theta_hat: pb.theta_hat,
            sigma_theta: pb.std_dev(),
            gamma: lp.weights.gamma,
            fim_diag: lp.fim_sum.diagonal(),
            z_box: lp.tube.z_box,
            applied,
            estimate: xt,
            z0,
            mode,
            events: tick,
        });
        if at_goal || out_of_time {
            break;
        }

        // Truth, measurement, filter.
        for _ in 0..substeps {
            truth = step_rk4(&truth, &applied, &truth_p, h);
        }
        let w = sample_disturbance(&mut rng, &w_base, cfg.noise.disturbance_mode, k);
        truth.position += w.fixed_rows::<3>(0);
        truth.velocity += w.fixed_rows::<3>(3);
        let kick = Vector3::from_fn(|_, _| unit.sample(&mut rng) * cfg.noise.angular_velocity_noise_radps);
        truth.angular_velocity += kick;
        let noise = ErrorVector::from_fn(|i, _| unit.sample(&mut rng) * meas_std[i / 3]);
        let y = retract(&truth, &noise);
        let started = Instant::now();
        let predicted_belief = lp.belief.predict(&applied, dt);
        match predicted_belief.update(&y, (k + 1) as f64 * dt) {
            Ok(b) => lp.belief = b,
            Err(e) => {
                lp.belief = predicted_belief;
                lp.log.events.push(EventRecord {
                    t,
                    kind: "measurement_rejected".into(),
                    detail: e.to_string(),
                });
            }
        }
        lp.log.timings.estimator_ms.push(elapsed_ms(started));
        k += 1;
    }
    lp.log.final_belief = lp.belief.current_params();
    Ok(lp.log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub world_hash: String,
    pub termination: Termination,
    pub goal_reached: bool,
    pub final_time_s: f64,
    pub ticks: usize,
    pub theta_true: Vector4<f64>,
    pub final_theta_hat: Vector4<f64>,
    pub final_theta_rel_error: Vector4<f64>,
    pub final_sigma: Vector4<f64>,
    pub cumulative_fim_diag: Vector4<f64>,
    pub global_replans: usize,
    pub obstacle_insertions: usize,
    pub local_cycles: usize,
    pub local_failures: usize,
    pub ancillary_ticks: usize,
    pub hold_ticks: usize,
    pub collisions: usize,
    pub max_tube_ratio: f64,
    pub tube_step_exits: usize,
    pub gamma_shutoff_s: [Option<f64>; 4],
}

impl SimLog {
    /// World with every accepted insertion up to time `t`.
    pub fn world_at(&self, t: f64) -> Result<World, WorldError> {
        let mut spec = self.config.world.clone();
        for ins in &self.insertions {
            if ins.accepted && ins.t <= t {
                spec.obstacles.push(ins.obstacle.clone());
            }
        }
        spec.build()
    }

    pub fn summary(&self) -> RunSummary {
        let truth = self.config.truth_params().map(|p| p.theta()).unwrap_or_else(|_| Vector4::zeros());
        let last = self.rows.last();
        let fb = &self.final_belief;
        let rel = (fb.theta_hat - truth).component_div(&truth);
        let mut collisions = 0;
        for row in &self.rows {
            match self.world_at(row.t) {
                Ok(w) if collision_at(&w, &row.truth.position).is_none() => {}
                _ => collisions += 1,
            }
        }
        let max_tube_ratio = self
            .rows
            .iter()
            .filter(|r| r.mode != ControlMode::Ancillary)
            .map(|r| (0..6).map(|i| (r.estimate[i] - r.z0[i]).abs() / r.z_box[i]).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let mut shutoff = [None; 4];
        for e in &self.events {
            if e.kind == "gamma_shutoff" {
                if let Some(i) = e.detail.strip_prefix("parameter ").and_then(|s| s.parse::<usize>().ok()) {
                    shutoff[i] = Some(e.t);
                }
            }
        }
        RunSummary {
            name: self.config.name.clone(),
            seed: self.config.seed,
            world_hash: self.config.world.hash(),
            termination: self.termination,
            goal_reached: self.termination == Termination::Goal,
            final_time_s: last.map_or(0.0, |r| r.t),
            ticks: self.rows.len(),
            theta_true: truth,
            final_theta_hat: fb.theta_hat,
            final_theta_rel_error: rel,
            final_sigma: fb.std_dev(),
            cumulative_fim_diag: last.map_or(Vector4::zeros(), |r| r.fim_diag),
            global_replans: self.global_plans.len().saturating_sub(1),
            obstacle_insertions: self.insertions.iter().filter(|i| i.accepted).count(),
            local_cycles: self.local_plans.len(),
            local_failures: self.local_plans.iter().filter(|p| !p.adopted).count(),
            ancillary_ticks: self.rows.iter().filter(|r| r.mode == ControlMode::Ancillary).count(),
            hold_ticks: self.rows.iter().filter(|r| r.mode == ControlMode::Hold).count(),
            collisions,
            max_tube_ratio,
            tube_step_exits: self.tube_step_exits,
            gamma_shutoff_s: shutoff,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("runs use different worlds ({0} vs {1})")]
    WorldMismatch(String, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamContrast {
    pub parameter: String,
    pub information_a: f64,
    pub information_b: f64,
    pub information_delta: f64,
    pub rel_error_a: f64,
    pub rel_error_b: f64,
    pub rel_error_delta: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_a: String,
    pub run_b: String,
    pub world_hash: String,
    pub rows: Vec<ParamContrast>,
}

pub const PARAM_NAMES: [&str; 4] = ["m", "Ixx", "Iyy", "Izz"];

/// Informative-versus-baseline contrast. Deltas are `b - a`.
pub fn compare_runs(a: &RunSummary, b: &RunSummary) -> Result<Comparison, CompareError> {
    if a.world_hash != b.world_hash {
        return Err(CompareError::WorldMismatch(a.world_hash.clone(), b.world_hash.clone()));
    }
    let rows = (0..4)
        .map(|i| ParamContrast {
            parameter: PARAM_NAMES[i].to_string(),
            information_a: a.cumulative_fim_diag[i],
            information_b: b.cumulative_fim_diag[i],
            information_delta: b.cumulative_fim_diag[i] - a.cumulative_fim_diag[i],
            rel_error_a: a.final_theta_rel_error[i],
            rel_error_b: b.final_theta_rel_error[i],
            rel_error_delta: b.final_theta_rel_error[i] - a.final_theta_rel_error[i],
            sigma_a: a.final_sigma[i],
            sigma_b: b.final_sigma[i],
            sigma_delta: b.final_sigma[i] - a.final_sigma[i],
        })
        .collect();
    Ok(Comparison {
        run_a: format!("{} (seed {})", a.name, a.seed),
        run_b: format!("{} (seed {})", b.name, b.seed),
        world_hash: a.world_hash.clone(),
        rows,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = format!("A: {}\nB: {}\n", self.run_a, self.run_b);
        s += &format!(
            "{:<5} {:>12} {:>12} {:>12} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11}\n",
            "param", "info A", "info B", "info B-A", "err A", "err B", "err B-A", "sigma A", "sigma B", "sigma B-A"
        );
        for r in &self.rows {
            s += &format!(
                "{:<5} {:>12.4e} {:>12.4e} {:>12.4e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}\n",
                r.parameter,
                r.information_a,
                r.information_b,
                r.information_delta,
                r.rel_error_a,
                r.rel_error_b,
                r.rel_error_delta,
                r.sigma_a,
                r.sigma_b,
                r.sigma_delta
            );
        }
        s
    }
}
