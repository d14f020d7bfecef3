//! Independent checks used to accept plans and to audit run logs.
//!
//! Nothing here calls the collision code in `world`; the closest point on an
//! ellipsoid is found by Newton iteration on the Lagrange multiplier.

use nalgebra::Vector3;

use crate::dynamics::{step_rk4, ParamVector, Wrench};
use crate::local_planner::LocalPlan;
use crate::world::World;

/// Euclidean distance from `p` to the surface of the axis-aligned ellipsoid,
/// negative (minus one millimetre per unit of excess quadratic form) inside.
pub fn ellipsoid_surface_distance(center: &Vector3<f64>, axes: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let d = p - center;
    let form: f64 = (0..3).map(|i| (d[i] / axes[i]).powi(2)).sum();
    if form <= 1.0 {
        return -(1.0 - form) * 1e-3 - f64::MIN_POSITIVE;
    }
    // x_i(l) = a_i^2 d_i / (a_i^2 + l) lies on the surface where g(l) = 0.
    // g is convex and decreasing, so Newton from l = 0 climbs to the root.
    let terms = |l: f64| -> (f64, f64) {
        (0..3).fold((-1.0, 0.0), |(g, dg), i| {
            let a2 = axes[i] * axes[i];
            let s = a2 + l;
            let t = a2 * d[i] * d[i];
            (g + t / (s * s), dg - 2.0 * t / (s * s * s))
        })
    };
    let mut l = 0.0;
    for _ in 0..100 {
        let (g, dg) = terms(l);
        let step = g / dg;
        l -= step;
        if step.abs() <= 1e-15 * l.abs().max(1e-12) {
            break;
        }
    }
    let closest = Vector3::from_fn(|i, _| {
        let a2 = axes[i] * axes[i];
        a2 * d[i] / (a2 + l)
    });
    (d - closest).norm()
}

/// First reason the robot at `p` is not free, if any: its center outside
/// the bounds or its sphere touching an obstacle.
pub fn collision_at(world: &World, p: &Vector3<f64>) -> Option<String> {
    let r = world.robot_radius();
    let b = world.bounds();
    for i in 0..3 {
        if p[i] < b.min[i] || p[i] > b.max[i] {
            return Some(format!("axis {i} outside workspace at {:.4}", p[i]));
        }
    }
    for (j, e) in world.obstacles().iter().enumerate() {
        let dist = ellipsoid_surface_distance(&e.center, &e.semi_axes, p);
        if dist < r {
            return Some(format!("obstacle {j} clearance {dist:.4} < {r}"));
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanLimits {
    pub force_max: f64,
    pub torque_max: f64,
    /// Spacing of the path samples checked for collision.
    pub resolution: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanCheck {
    pub max_dynamics_error: f64,
    pub max_quaternion_error: f64,
    pub failures: Vec<String>,
}

impl PlanCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Dynamics replay (1e-6), free path at `limits.resolution`, and input box.
pub fn check_local_plan(plan: &LocalPlan, p: &ParamVector, world: &World, limits: &PlanLimits) -> PlanCheck {
    let mut out = PlanCheck::default();
    if plan.states.len() != plan.inputs.len() + 1 {
        out.failures.push("state and input counts disagree".into());
        return out;
    }
    for (k, u) in plan.inputs.iter().enumerate() {
        let next = step_rk4(&plan.states[k], u, p, plan.dt);
        let s = &plan.states[k + 1];
        let err = (next.to_vector() - s.to_vector()).amax();
        out.max_dynamics_error = out.max_dynamics_error.max(err);
        if err > 1e-6 {
            out.failures.push(format!("stage {k}: replay mismatch {err:e}"));
        }
        if !within(u, limits) {
            out.failures.push(format!("stage {k}: input outside bounds"));
        }
    }
    for s in &plan.states {
        let qn = (s.attitude.as_ref().norm() - 1.0).abs();
        out.max_quaternion_error = out.max_quaternion_error.max(qn);
    }
    let path = plan.dense_positions(p, limits.resolution);
    for w in path.windows(2) {
        let n = ((w[1] - w[0]).norm() / limits.resolution).ceil().max(1.0) as usize;
        for i in 0..=n {
            let q = w[0] + (w[1] - w[0]) * (i as f64 / n as f64);
            if let Some(why) = collision_at(world, &q) {
                out.failures.push(format!("path sample at {q:?}: {why}"));
                return out;
            }
        }
    }
    out
}

fn within(u: &Wrench, limits: &PlanLimits) -> bool {
    let tol = 1e-12;
    u.force.iter().all(|f| f.abs() <= limits.force_max * (1.0 + tol))
        && u.torque.iter().all(|t| t.abs() <= limits.torque_max * (1.0 + tol))
}
