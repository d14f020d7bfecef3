//! Kinodynamic RRT over the translational double integrator.
//!
//! The tree only ever grows by applying one motion primitive (a constant
//! inertial-frame force held for a fixed duration) from an existing node, so
//! every edge of a returned plan is reproduced exactly by
//! [`discretize_translational`]. Attitude is not planned here.

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::discretize_translational;
use crate::world::World;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no plan found after {iters} iterations")]
    NoPlanFound { iters: usize },
    #[error("every motion primitive collides")]
    AllPrimitivesCollide,
    #[error("start state is in collision")]
    StartInCollision,
    #[error("invalid motion primitive set: {0}")]
    InvalidPrimitives(String),
}

/// Constant-force actions applied for `duration` seconds each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitiveSet {
    actions: Vec<Vector3<f64>>,
    duration: f64,
}

impl MotionPrimitiveSet {
    pub fn new(actions: Vec<Vector3<f64>>, duration: f64, u_max: f64) -> Result<Self, PlannerError> {
        if !(duration > 0.0) {
            return Err(PlannerError::InvalidPrimitives(format!(
                "duration must be positive, got {duration}"
            )));
        }
        if !actions.iter().any(|a| *a == Vector3::zeros()) {
            return Err(PlannerError::InvalidPrimitives("zero action missing".into()));
        }
        if let Some(a) = actions.iter().find(|a| a.norm() > u_max + 1e-12) {
            return Err(PlannerError::InvalidPrimitives(format!(
                "action {a:?} exceeds u_max {u_max}"
            )));
        }
        Ok(Self { actions, duration })
    }

    /// `{+-u_max, +-u_max/2}` along each axis plus the zero action.
    pub fn axis_aligned(u_max: f64, duration: f64) -> Self {
        let mut actions = vec![Vector3::zeros()];
        for axis in 0..3 {
            for scale in [1.0, 0.5] {
                for sign in [1.0, -1.0] {
                    let mut a = Vector3::zeros();
                    a[axis] = sign * scale * u_max;
                    actions.push(a);
                }
            }
        }
        Self { actions, duration }
    }

    pub fn actions(&self) -> &[Vector3<f64>] {
        &self.actions
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl PlanNode {
    pub fn translational(&self) -> Vector6<f64> {
        let mut z = Vector6::zeros();
        z.fixed_rows_mut::<3>(0).copy_from(&self.position);
        z.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        z
    }
}

/// Timed node sequence; `inputs[k]` drives node `k` to node `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlan {
    pub nodes: Vec<PlanNode>,
    pub inputs: Vec<Vector3<f64>>,
    pub edge_duration: f64,
    /// Mass the edges were propagated with.
    pub mass: f64,
}

impl GlobalPlan {
    pub fn start_time(&self) -> f64 {
        self.nodes[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.nodes.last().expect("plan has a root").t
    }

    pub fn final_node(&self) -> &PlanNode {
        self.nodes.last().expect("plan has a root")
    }

    /// Position and velocity at absolute time `t`, clamped to the plan span.
    pub fn state_at(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        if self.inputs.is_empty() || t >= self.end_time() {
            let n = self.final_node();
            return (n.position, n.velocity);
        }
        let rel = (t - self.start_time()).max(0.0);
        let k = ((rel / self.edge_duration).floor() as usize).min(self.inputs.len() - 1);
        self.edge_state(k, rel - k as f64 * self.edge_duration)
    }

    /// Inertial force of the edge active at time `t` (zero past the end).
    pub fn input_at(&self, t: f64) -> Vector3<f64> {
        if self.inputs.is_empty() || t >= self.end_time() {
            return Vector3::zeros();
        }
        let rel = (t - self.start_time()).max(0.0);
        let k = ((rel / self.edge_duration).floor() as usize).min(self.inputs.len() - 1);
        self.inputs[k]
    }

    fn edge_state(&self, k: usize, tau: f64) -> (Vector3<f64>, Vector3<f64>) {
        let n = &self.nodes[k];
        let a = self.inputs[k] / self.mass;
        (
            n.position + n.velocity * tau + a * (0.5 * tau * tau),
            n.velocity + a * tau,
        )
    }

    /// Positions along edge `k`, spaced no more than `resolution` apart.
    pub fn edge_path(&self, k: usize, resolution: f64) -> Vec<Vector3<f64>> {
        edge_samples(
            &self.nodes[k].position,
            &self.nodes[k].velocity,
            &(self.inputs[k] / self.mass),
            self.edge_duration,
            resolution,
        )
    }

    /// Dense polyline of the plan from time `t` onward.
    pub fn path_from(&self, t: f64, resolution: f64) -> Vec<Vector3<f64>> {
        let mut path = vec![self.state_at(t).0];
        for k in 0..self.inputs.len() {
            if self.nodes[k + 1].t <= t {
                continue;
            }
            path.extend(self.edge_path(k, resolution));
        }
        path
    }

    pub fn path_length(&self) -> f64 {
        (0..self.inputs.len())
            .map(|k| {
                self.edge_path(k, 1e-3)
                    .windows(2)
                    .map(|w| (w[1] - w[0]).norm())
                    .sum::<f64>()
            })
            .sum()
    }
}

fn edge_samples(
    r0: &Vector3<f64>,
    v0: &Vector3<f64>,
    accel: &Vector3<f64>,
    duration: f64,
    resolution: f64,
) -> Vec<Vector3<f64>> {
    // Speed along a constant-acceleration arc peaks at an endpoint.
    let v1 = v0 + accel * duration;
    let max_travel = v0.norm().max(v1.norm()) * duration;
    let n = (max_travel / resolution).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let tau = duration * i as f64 / n as f64;
            r0 + v0 * tau + accel * (0.5 * tau * tau)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlannerConfig {
    pub max_iters: usize,
    pub goal_bias: f64,
    pub seed: u64,
    /// Weight on speed in the node-to-target metric (s).
    pub speed_weight: f64,
    /// Speed gate for the goal test (m/s).
    pub goal_speed: f64,
    pub resolution: f64,
}

impl Default for GlobalPlannerConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            goal_bias: 0.1,
            seed: 0,
            speed_weight: 0.5,
            goal_speed: 0.05,
            resolution: crate::world::DEFAULT_RESOLUTION,
        }
    }
}

/// Translational state of a tree node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslationalState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteerResult {
    pub state: TranslationalState,
    pub action: usize,
}

fn metric(s: &TranslationalState, target: &Vector3<f64>, speed_weight: f64) -> f64 {
    (s.position - target).norm() + speed_weight * s.velocity.norm()
}

fn propagate(s: &TranslationalState, action: &Vector3<f64>, mass: f64, dt: f64) -> TranslationalState {
    let (a, b) = discretize_translational(mass, dt);
    let mut z = Vector6::zeros();
    z.fixed_rows_mut::<3>(0).copy_from(&s.position);
    z.fixed_rows_mut::<3>(3).copy_from(&s.velocity);
    let z = a * z + b * action;
    TranslationalState {
        position: z.fixed_rows::<3>(0).into_owned(),
        velocity: z.fixed_rows::<3>(3).into_owned(),
    }
}

fn edge_free(
    from: &TranslationalState,
    action: &Vector3<f64>,
    mass: f64,
    dt: f64,
    world: &World,
    resolution: f64,
) -> bool {
    let path = edge_samples(&from.position, &from.velocity, &(action / mass), dt, resolution);
    world.path_free(&path, resolution)
}

fn steer_masked(
    from: &TranslationalState,
    target: &Vector3<f64>,
    primitives: &MotionPrimitiveSet,
    mass: f64,
    world: &World,
    cfg: &GlobalPlannerConfig,
    skip: impl Fn(usize) -> bool,
) -> Option<SteerResult> {
    let mut best: Option<(f64, SteerResult)> = None;
    for (i, action) in primitives.actions().iter().enumerate() {
        if skip(i) {
            continue;
        }
        let next = propagate(from, action, mass, primitives.duration());
        let d = metric(&next, target, cfg.speed_weight);
        if best.as_ref().is_some_and(|(bd, _)| d >= *bd) {
            continue;
        }
        if edge_free(from, action, mass, primitives.duration(), world, cfg.resolution) {
            best = Some((d, SteerResult { state: next, action: i }));
        }
    }
    best.map(|(_, s)| s)
}

/// Applies every primitive from `from` and keeps the collision-free result
/// closest to `target` under `|r - target| + speed_weight |v|`.
pub fn steer(
    from: &TranslationalState,
    target: &Vector3<f64>,
    primitives: &MotionPrimitiveSet,
    mass: f64,
    world: &World,
    cfg: &GlobalPlannerConfig,
) -> Result<SteerResult, PlannerError> {
    steer_masked(from, target, primitives, mass, world, cfg, |_| false)
        .ok_or(PlannerError::AllPrimitivesCollide)
}

struct TreeNode {
    state: TranslationalState,
    parent: Option<(usize, usize)>,
    expanded: u64,
}

/// Grows a tree from `start` until a node enters the goal region below the
/// goal speed. Deterministic for a given `cfg.seed`.
pub fn plan_global(
    start: &TranslationalState,
    t0: f64,
    world: &World,
    mass: f64,
    primitives: &MotionPrimitiveSet,
    cfg: &GlobalPlannerConfig,
) -> Result<GlobalPlan, PlannerError> {
    assert!(primitives.actions().len() <= 64, "at most 64 primitives");
    if !world.point_free(&start.position) {
        return Err(PlannerError::StartInCollision);
    }
    let dt = primitives.duration();
    let goal = *world.goal();
    let at_goal = |s: &TranslationalState| goal.contains(&s.position) && s.velocity.norm() <= cfg.goal_speed;
    let mut tree = vec![TreeNode {
        state: *start,
        parent: None,
        expanded: 0,
    }];
    let full_mask = if primitives.actions().len() == 64 {
        u64::MAX
    } else {
        (1u64 << primitives.actions().len()) - 1
    };

    let mut found = at_goal(start).then_some(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bounds = *world.bounds();
    let mut iter = 0;
    while found.is_none() && iter < cfg.max_iters {
        iter += 1;
        let target = if rng.random::<f64>() < cfg.goal_bias {
            goal.center
        } else {
            Vector3::from_fn(|i, _| rng.random_range(bounds.min[i]..=bounds.max[i]))
        };
        let mut nearest = None;
        let mut nearest_d = f64::INFINITY;
        for (idx, n) in tree.iter().enumerate() {
            if n.expanded == full_mask {
                continue;
            }
            let d = metric(&n.state, &target, cfg.speed_weight);
            if d < nearest_d {
                nearest_d = d;
                nearest = Some(idx);
            }
        }
        let Some(near) = nearest else { break };
        let mask = tree[near].expanded;
        let result = steer_masked(
            &tree[near].state,
            &target,
            primitives,
            mass,
            world,
            cfg,
            |i| mask & (1 << i) != 0,
        );
        match result {
            Some(step) => {
                tree[near].expanded |= 1 << step.action;
                tree.push(TreeNode {
                    state: step.state,
                    parent: Some((near, step.action)),
                    expanded: 0,
                });
                if at_goal(&step.state) {
                    found = Some(tree.len() - 1);
                }
            }
            // Every remaining primitive from this node collides.
            None => tree[near].expanded = full_mask,
        }
    }

    let Some(mut idx) = found else {
        return Err(PlannerError::NoPlanFound { iters: iter });
    };
    let mut chain = vec![(tree[idx].state, None)];
    while let Some((parent, action)) = tree[idx].parent {
        chain.push((tree[parent].state, Some(action)));
        idx = parent;
    }
    chain.reverse();
    let nodes = chain
        .iter()
        .enumerate()
        .map(|(k, (s, _))| PlanNode {
            t: t0 + k as f64 * dt,
            position: s.position,
            velocity: s.velocity,
        })
        .collect();
    // chain[k] records the action leading to chain[k + 1].
    let inputs = chain[..chain.len() - 1]
        .iter()
        .map(|(_, a)| primitives.actions()[a.expect("non-root node has an action")])
        .collect();
    log::debug!("global plan found after {iter} iterations, {} nodes in tree", tree.len());
    Ok(GlobalPlan {
        nodes,
        inputs,
        edge_duration: dt,
        mass,
    })
}

/// Plans again from the robot's current translational state with updated
/// obstacles and mass; same contract as [`plan_global`].
pub fn replan_global(
    now: &TranslationalState,
    t_now: f64,
    world: &World,
    mass: f64,
    primitives: &MotionPrimitiveSet,
    cfg: &GlobalPlannerConfig,
) -> Result<GlobalPlan, PlannerError> {
    plan_global(now, t_now, world, mass, primitives, cfg)
}
