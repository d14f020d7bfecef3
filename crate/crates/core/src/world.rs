//! Workspace geometry: ellipsoidal keep-out zones, outer bounds and the goal.
//!
//! The robot is bounded by a sphere of radius `robot_radius`. A position is
//! free when the sphere centered there clears every obstacle, i.e. the
//! Euclidean distance to each solid ellipsoid exceeds the radius. Contact
//! counts as a collision.
//!
//! Inflating each semi-axis by the radius gives an ellipsoid that lies inside
//! the Minkowski sum of obstacle and sphere, so it can only reject. The
//! smooth outer ellipsoid from [`Ellipsoid::outer_inflated_axes`] contains the
//! sum and can only accept. Points between the two get an exact distance.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling resolution for segment checks (m).
pub const DEFAULT_RESOLUTION: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("ellipsoid semi-axes must be positive, got {0:?}")]
    InvalidEllipsoid([f64; 3]),
    #[error("workspace bounds are degenerate: min {min:?}, max {max:?}")]
    DegenerateBounds { min: [f64; 3], max: [f64; 3] },
    #[error("robot radius must be nonnegative, got {0}")]
    InvalidRobotRadius(f64),
    #[error("goal region is not collision-free")]
    GoalBlocked,
    #[error("obstacle at {center:?} would contain the robot's current position")]
    SwallowsRobot { center: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vector3<f64>, semi_axes: Vector3<f64>) -> Result<Self, WorldError> {
        if semi_axes.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(WorldError::InvalidEllipsoid([
                semi_axes.x,
                semi_axes.y,
                semi_axes.z,
            ]));
        }
        Ok(Self { center, semi_axes })
    }

    /// `sum_i ((p_i - c_i) / (r_i + inflation))^2`; at most 1 means contact.
    pub fn quadratic_form(&self, p: &Vector3<f64>, inflation: f64) -> f64 {
        (p - self.center)
            .component_div(&self.semi_axes.add_scalar(inflation))
            .norm_squared()
    }

    /// Semi-axes of an axis-aligned ellipsoid containing the Minkowski sum of
    /// this ellipsoid and a ball of radius `r`:
    /// `s_i^2 = (1 + 1/k) a_i^2 + (1 + k) r^2` with `k = |a| / (sqrt(3) r)`.
    pub fn outer_inflated_axes(&self, r: f64) -> Vector3<f64> {
        if r <= 0.0 {
            return self.semi_axes;
        }
        let k = self.semi_axes.norm() / (3f64.sqrt() * r);
        self.semi_axes
            .map(|a| ((1.0 + 1.0 / k) * a * a + (1.0 + k) * r * r).sqrt())
    }

    /// Euclidean distance from `p` to the solid ellipsoid (zero inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        if self.quadratic_form(p, 0.0) <= 1.0 {
            return 0.0;
        }
        // Closest point x_i = a_i^2 y_i / (t + a_i^2) where t > 0 solves
        // sum_i (a_i y_i / (t + a_i^2))^2 = 1; the left side decreases in t.
        let y = (p - self.center).abs();
        let a2 = self.semi_axes.component_mul(&self.semi_axes);
        let g = |t: f64| {
            (0..3)
                .map(|i| (self.semi_axes[i] * y[i] / (t + a2[i])).powi(2))
                .sum::<f64>()
                - 1.0
        };
        let mut lo = 0.0;
        let mut hi = self.semi_axes.max() * y.norm();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        let closest = Vector3::from_fn(|i, _| a2[i] * y[i] / (t + a2[i]));
        (closest - y).norm()
    }

    /// True when a ball of radius `r` centered at `p` does not touch the
    /// ellipsoid.
    pub fn clear_of(&self, p: &Vector3<f64>, r: f64) -> bool {
        if self.quadratic_form(p, r) <= 1.0 {
            return false;
        }
        let outer = self.outer_inflated_axes(r);
        if (p - self.center).component_div(&outer).norm_squared() > 1.0 {
            return true;
        }
        self.distance(p) > r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, WorldError> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(WorldError::DegenerateBounds {
                min: [min.x, min.y, min.z],
                max: [max.x, max.y, max.z],
            });
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl GoalRegion {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center).norm() <= self.radius
    }
}

/// Immutable obstacle snapshot shared by the planners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    obstacles: Vec<Ellipsoid>,
    bounds: Bounds,
    goal: GoalRegion,
    robot_radius: f64,
}

/// Result of inserting an obstacle into a world snapshot.
#[derive(Clone, Debug)]
pub struct ObstacleInsertion {
    pub world: World,
    pub replan_needed: bool,
}

impl World {
    pub fn new(
        obstacles: Vec<Ellipsoid>,
        bounds: Bounds,
        goal: GoalRegion,
        robot_radius: f64,
    ) -> Result<Self, WorldError> {
        if !(robot_radius.is_finite() && robot_radius >= 0.0) {
            return Err(WorldError::InvalidRobotRadius(robot_radius));
        }
        let world = Self {
            obstacles,
            bounds,
            goal,
            robot_radius,
        };
        let goal_clear = world.bounds.contains(&goal.center)
            && world
                .obstacles
                .iter()
                .all(|e| e.clear_of(&goal.center, robot_radius + goal.radius));
        if !goal_clear {
            return Err(WorldError::GoalBlocked);
        }
        Ok(world)
    }

    pub fn obstacles(&self) -> &[Ellipsoid] {
        &self.obstacles
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn goal(&self) -> &GoalRegion {
        &self.goal
    }

    pub fn robot_radius(&self) -> f64 {
        self.robot_radius
    }

    /// Copy of this world with a different robot radius.
    pub fn with_robot_radius(&self, robot_radius: f64) -> Result<Self, WorldError> {
        Self::new(self.obstacles.clone(), self.bounds, self.goal, robot_radius)
    }

    pub fn point_free(&self, p: &Vector3<f64>) -> bool {
        self.bounds.contains(p)
            && self
                .obstacles
                .iter()
                .all(|e| e.clear_of(p, self.robot_radius))
    }

    /// Checks `point_free` at evenly spaced samples no farther apart than
    /// `resolution`, endpoints included.
    pub fn segment_free(&self, p0: &Vector3<f64>, p1: &Vector3<f64>, resolution: f64) -> bool {
        assert!(resolution > 0.0, "resolution must be positive");
        segment_samples(p0, p1, resolution).all(|p| self.point_free(&p))
    }

    /// `segment_free` over consecutive points of a polyline.
    pub fn path_free(&self, path: &[Vector3<f64>], resolution: f64) -> bool {
        match path {
            [] => true,
            [p] => self.point_free(p),
            _ => path
                .windows(2)
                .all(|w| self.segment_free(&w[0], &w[1], resolution)),
        }
    }

    /// Appends an obstacle and reports whether `active_path` (the remaining
    /// global plan, as a densely sampled polyline) now crosses it.
    pub fn add_obstacle(
        &self,
        e: Ellipsoid,
        robot_position: &Vector3<f64>,
        active_path: &[Vector3<f64>],
        resolution: f64,
    ) -> Result<ObstacleInsertion, WorldError> {
        if !e.clear_of(robot_position, self.robot_radius) {
            return Err(WorldError::SwallowsRobot {
                center: [e.center.x, e.center.y, e.center.z],
            });
        }
        let hits = |a: &Vector3<f64>, b: &Vector3<f64>| {
            segment_samples(a, b, resolution).any(|p| !e.clear_of(&p, self.robot_radius))
        };
        let replan_needed = match active_path {
            [] => false,
            [p] => !e.clear_of(p, self.robot_radius),
            _ => active_path.windows(2).any(|w| hits(&w[0], &w[1])),
        };
        let mut world = self.clone();
        world.obstacles.push(e);
        Ok(ObstacleInsertion {
            world,
            replan_needed,
        })
    }
}

fn segment_samples(
    p0: &Vector3<f64>,
    p1: &Vector3<f64>,
    resolution: f64,
) -> impl Iterator<Item = Vector3<f64>> {
    let (p0, p1) = (*p0, *p1);
    let n = ((p1 - p0).norm() / resolution).ceil().max(1.0) as usize;
    (0..=n).map(move |i| p0.lerp(&p1, i as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world_with(obstacles: Vec<Ellipsoid>, robot_radius: f64) -> World {
        World::new(
            obstacles,
            Bounds::new(Vector3::repeat(-5.0), Vector3::repeat(5.0)).unwrap(),
            GoalRegion {
                center: Vector3::new(4.5, 4.5, 4.5),
                radius: 0.1,
            },
            robot_radius,
        )
        .unwrap()
    }

    fn obstacle(c: [f64; 3], r: [f64; 3]) -> Ellipsoid {
        Ellipsoid::new(Vector3::from(c), Vector3::from(r)).unwrap()
    }

    #[test]
    fn center_and_boundary_collide() {
        let e = obstacle([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        let w = world_with(vec![e], 0.5);
        assert!(!w.point_free(&Vector3::zeros()));
        assert_eq!(e.quadratic_form(&Vector3::new(1.5, 0.0, 0.0), 0.5), 1.0);
        assert!(!w.point_free(&Vector3::new(1.5, 0.0, 0.0)));
        assert!(w.point_free(&Vector3::new(1.5000001, 0.0, 0.0)));
        assert!(!w.point_free(&Vector3::new(6.0, 0.0, 0.0)));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(Ellipsoid::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
        assert!(Bounds::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
        let blocked = World::new(
            vec![obstacle([4.5, 4.5, 4.5], [0.2, 0.2, 0.2])],
            Bounds::new(Vector3::repeat(-5.0), Vector3::repeat(5.0)).unwrap(),
            GoalRegion {
                center: Vector3::new(4.5, 4.5, 4.5),
                radius: 0.1,
            },
            0.1,
        );
        assert_eq!(blocked, Err(WorldError::GoalBlocked));
    }

    #[test]
    fn segments() {
        let w = world_with(vec![obstacle([0.0, 0.0, 0.0], [0.5, 0.5, 0.5])], 0.2);
        let a = Vector3::new(-2.0, 0.0, 0.0);
        let b = Vector3::new(2.0, 0.0, 0.0);
        assert!(!w.segment_free(&a, &b, DEFAULT_RESOLUTION));
        let a2 = Vector3::new(-2.0, 0.8, 0.0);
        let b2 = Vector3::new(2.0, 0.8, 0.0);
        assert!(w.segment_free(&a2, &b2, DEFAULT_RESOLUTION));
    }

    #[test]
    fn obstacle_insertion_flags() {
        let w = world_with(vec![], 0.2);
        let path: Vec<_> = (0..=10)
            .map(|i| Vector3::new(-2.0 + 0.4 * i as f64, 0.0, 0.0))
            .collect();
        let far = w
            .add_obstacle(
                obstacle([0.0, 3.0, 0.0], [0.3, 0.3, 0.3]),
                &path[0],
                &path,
                DEFAULT_RESOLUTION,
            )
            .unwrap();
        assert!(!far.replan_needed);
        assert_eq!(far.world.obstacles().len(), 1);
        let on_path = w
            .add_obstacle(
                obstacle([path[5].x, 0.0, 0.0], [0.3, 0.3, 0.3]),
                &path[0],
                &path,
                DEFAULT_RESOLUTION,
            )
            .unwrap();
        assert!(on_path.replan_needed);
        let swallow = w.add_obstacle(
            obstacle([-2.0, 0.0, 0.0], [0.3, 0.3, 0.3]),
            &path[0],
            &path,
            DEFAULT_RESOLUTION,
        );
        assert!(matches!(swallow, Err(WorldError::SwallowsRobot { .. })));
    }

    /// Distance from `p` to a solid ellipsoid by direct minimization over the
    /// surface parameterization: coarse grid, then shrinking pattern search.
    fn distance_to_ellipsoid(e: &Ellipsoid, p: &Vector3<f64>) -> f64 {
        if e.quadratic_form(p, 0.0) <= 1.0 {
            return 0.0;
        }
        let surf = |th: f64, ph: f64| {
            e.center
                + Vector3::new(
                    e.semi_axes.x * th.sin() * ph.cos(),
                    e.semi_axes.y * th.sin() * ph.sin(),
                    e.semi_axes.z * th.cos(),
                )
        };
        let dist = |th: f64, ph: f64| (surf(th, ph) - p).norm();
        let (mut best_th, mut best_ph, mut best) = (0.0, 0.0, f64::INFINITY);
        let n = 24;
        for i in 0..=n {
            for j in 0..2 * n {
                let th = std::f64::consts::PI * i as f64 / n as f64;
                let ph = std::f64::consts::PI * j as f64 / n as f64;
                let d = dist(th, ph);
                if d < best {
                    (best_th, best_ph, best) = (th, ph, d);
                }
            }
        }
        let mut step = std::f64::consts::PI / n as f64;
        while step > 1e-10 {
            let mut improved = false;
            for (dth, dph) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                let d = dist(best_th + dth, best_ph + dph);
                if d < best {
                    (best_th, best_ph, best) = (best_th + dth, best_ph + dph, d);
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best
    }

    fn oracle_free(obstacles: &[Ellipsoid], radius: f64, p: &Vector3<f64>) -> (bool, f64) {
        let mut min_gap = f64::INFINITY;
        let mut free = true;
        for e in obstacles {
            let gap = distance_to_ellipsoid(e, p) - radius;
            min_gap = min_gap.min(gap.abs());
            if gap <= 0.0 {
                free = false;
            }
        }
        (free, min_gap)
    }

    fn random_ellipsoids(rng: &mut ChaCha8Rng, spherical: bool) -> Vec<Ellipsoid> {
        (0..4)
            .map(|_| {
                let c = Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                );
                let r = if spherical {
                    Vector3::repeat(rng.random_range(0.3..1.2))
                } else {
                    Vector3::new(
                        rng.random_range(0.2..1.5),
                        rng.random_range(0.2..1.5),
                        rng.random_range(0.2..1.5),
                    )
                };
                Ellipsoid::new(c, r).unwrap()
            })
            .collect()
    }

    fn sample_near(rng: &mut ChaCha8Rng, obstacles: &[Ellipsoid]) -> Vector3<f64> {
        let e = &obstacles[rng.random_range(0..obstacles.len())];
        e.center
            + Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )
    }

    #[test]
    fn point_free_agrees_with_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shell = 1e-3;

        // Point robot: the inflated test is exact for any ellipsoid.
        let obs = random_ellipsoids(&mut rng, false);
        let w = world_with(obs.clone(), 0.0);
        let mut disagreements = 0;
        for _ in 0..1000 {
            let p = sample_near(&mut rng, &obs);
            if !w.bounds().contains(&p) {
                continue;
            }
            let (free, gap) = oracle_free(&obs, 0.0, &p);
            if free != w.point_free(&p) && gap > shell {
                disagreements += 1;
            }
        }
        assert_eq!(disagreements, 0);

        // Spherical obstacles with a finite robot: inflation is exact too.
        let obs = random_ellipsoids(&mut rng, true);
        let w = world_with(obs.clone(), 0.25);
        let mut disagreements = 0;
        for _ in 0..1000 {
            let p = sample_near(&mut rng, &obs);
            if !w.bounds().contains(&p) {
                continue;
            }
            let (free, gap) = oracle_free(&obs, 0.25, &p);
            if free != w.point_free(&p) && gap > shell {
                disagreements += 1;
            }
        }
        assert_eq!(disagreements, 0);

        // General ellipsoids with a finite robot, where semi-axis inflation
        // alone would be wrong near elongated rims.
        let obs = random_ellipsoids(&mut rng, false);
        let w = world_with(obs.clone(), 0.25);
        let mut disagreements = 0;
        for _ in 0..1000 {
            let p = sample_near(&mut rng, &obs);
            if !w.bounds().contains(&p) {
                continue;
            }
            let (free, gap) = oracle_free(&obs, 0.25, &p);
            if free != w.point_free(&p) && gap > shell {
                disagreements += 1;
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn outer_ellipsoid_contains_minkowski_sum() {
        let e = obstacle([0.2, -0.1, 0.3], [0.15, 0.6, 1.5]);
        let r = 0.2;
        let outer = e.outer_inflated_axes(r);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = e.center
                + Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                );
            if e.distance(&p) <= r {
                assert!((p - e.center).component_div(&outer).norm_squared() <= 1.0);
            }
        }
    }

    #[test]
    fn grazing_segments_agree_with_oracle() {
        let e = obstacle([0.0, 0.0, 0.0], [0.6, 0.4, 0.5]);
        let w = world_with(vec![e], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let offset = rng.random_range(0.3..0.5);
            let a = Vector3::new(-2.0, offset, 0.0);
            let b = Vector3::new(2.0, offset, 0.0);
            let oracle_min = (0..=1000)
                .map(|i| distance_to_ellipsoid(&e, &a.lerp(&b, i as f64 / 1000.0)))
                .fold(f64::INFINITY, f64::min);
            let sampled = w.segment_free(&a, &b, DEFAULT_RESOLUTION);
            if (oracle_min > 0.0) != sampled {
                // Only allowed within one resolution of tangency.
                assert!(oracle_min < DEFAULT_RESOLUTION, "offset {offset}");
            }
        }
    }

    proptest! {
        #[test]
        fn shrinking_radius_never_creates_collisions(
            px in -4.0..4.0f64, py in -4.0..4.0f64, pz in -4.0..4.0f64,
            r_small in 0.0..0.5f64, extra in 0.0..0.5f64,
        ) {
            let obs = vec![obstacle([0.5, -0.3, 0.2], [0.8, 0.4, 1.1]), obstacle([-2.0, 1.0, 0.0], [0.3, 0.3, 0.3])];
            let p = Vector3::new(px, py, pz);
            let big = world_with(obs.clone(), r_small + extra);
            let small = world_with(obs, r_small);
            if big.point_free(&p) {
                prop_assert!(small.point_free(&p));
            }
        }

        #[test]
        fn degenerate_segment_is_point_check(px in -4.0..4.0f64, py in -4.0..4.0f64, pz in -4.0..4.0f64) {
            let w = world_with(vec![obstacle([0.0, 0.0, 0.0], [1.0, 0.6, 0.8])], 0.2);
            let p = Vector3::new(px, py, pz);
            prop_assert_eq!(w.segment_free(&p, &p, DEFAULT_RESOLUTION), w.point_free(&p));
        }
    }
}
