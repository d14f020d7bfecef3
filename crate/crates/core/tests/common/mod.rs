//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{Matrix4, Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rattle::dynamics::discretize_translational;
use rattle::estimator::ParamBelief;
use rattle::executive::ScenarioConfig;
use rattle::robust_control::{
    compute_mrpi, parameter_disturbance_inflation, tube_mpc_step, AncillaryDesign, InputEnvelope, TubeSet,
};

pub const TWO_WALL_INFO: &str = include_str!("../../../../scenarios/two_wall_info.json");
pub const TWO_WALL_NOINFO: &str = include_str!("../../../../scenarios/two_wall_noinfo.json");
pub const ASTRONAUT: &str = include_str!("../../../../scenarios/astronaut_replan.json");
pub const TRIVIAL: &str = include_str!("../../../../scenarios/trivial.json");

pub fn scenario(text: &str) -> ScenarioConfig {
    ScenarioConfig::from_json(text).unwrap()
}

pub fn mass_belief(m_hat: f64, sigma_m: f64) -> ParamBelief {
    ParamBelief {
        theta_hat: Vector4::new(m_hat, 0.15, 0.15, 0.16),
        sigma_theta: Matrix4::from_diagonal(&Vector4::new(sigma_m * sigma_m, 1e-4, 1e-4, 1e-4)),
    }
}

/// Tube for the scenario's controller at the given mass belief.
pub fn tube_for(cfg: &ScenarioConfig, pb: &ParamBelief) -> (AncillaryDesign, TubeSet, (f64, f64)) {
    let world = cfg.world.build().unwrap();
    let mpc = cfg.mpc_config(&world);
    let design = AncillaryDesign::new(pb.mass(), cfg.periods.control_s, &mpc.q, &mpc.r).unwrap();
    let env = InputEnvelope { u_max: mpc.u_max, v_max: cfg.control.speed_limit_mps };
    let inflation = parameter_disturbance_inflation(&cfg.base_disturbance(), pb, &env, cfg.periods.control_s);
    let tube = compute_mrpi(&design.closed_loop(), &inflation.w, cfg.control.mrpi_eps, cfg.control.mrpi_s_max).unwrap();
    (design, tube, inflation.mass_range)
}

/// Slow closed curve inside the two-wall workspace: state, and the force
/// that tracks it at mass `m`.
pub fn reference_at(t: f64, m: f64) -> (Vector6<f64>, Vector3<f64>) {
    let w = Vector3::new(0.03, 0.05, 0.04);
    let a = Vector3::new(0.8, 0.6, 0.3);
    let p = Vector3::new(2.0 + a.x * (w.x * t).cos(), a.y * (w.y * t).sin(), a.z * (w.z * t).sin());
    let v = Vector3::new(-a.x * w.x * (w.x * t).sin(), a.y * w.y * (w.y * t).cos(), a.z * w.z * (w.z * t).cos());
    let acc = Vector3::new(
        -a.x * w.x * w.x * (w.x * t).cos(),
        -a.y * w.y * w.y * (w.y * t).sin(),
        -a.z * w.z * w.z * (w.z * t).sin(),
    );
    (Vector6::new(p.x, p.y, p.z, v.x, v.y, v.z), acc * m)
}

#[derive(Debug, Default)]
pub struct TubeMcReport {
    pub runs: usize,
    pub ticks: usize,
    pub infeasible_ticks: usize,
    /// Ticks where `x - z0` left the box.
    pub at_tick_violations: usize,
    /// Steps where the successor left the box around the nominal successor.
    pub successor_violations: usize,
    pub input_violations: usize,
    /// Largest `|e_j| / Z_j` seen.
    pub max_ratio: f64,
}

/// Closed-loop Monte Carlo of the tube controller. The plant uses a true
/// mass drawn inside the belief's 95 % interval, and the base disturbance
/// is drawn on the vertices of `W` on even steps and uniformly inside it
/// otherwise.
pub fn tube_monte_carlo(cfg: &ScenarioConfig, pb: &ParamBelief, seeds: u64, steps: usize) -> TubeMcReport {
    let world = cfg.world.build().unwrap();
    let mpc = cfg.mpc_config(&world);
    let dt = cfg.periods.control_s;
    let (design, tube, (m_lo, m_hi)) = tube_for(cfg, pb);
    let base = cfg.base_disturbance();
    let n = mpc.horizon;
    let mut rep = TubeMcReport::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m_true = rng.random_range(m_lo..=m_hi);
        let (a, b_true) = discretize_translational(m_true, dt);
        let mut x = reference_at(0.0, pb.mass()).0;
        rep.runs += 1;
        for k in 0..steps {
            let t = k as f64 * dt;
            let x_ref: Vec<_> = (0..=n).map(|i| reference_at(t + i as f64 * dt, pb.mass()).0).collect();
            let u_ref: Vec<_> = (0..n).map(|i| reference_at(t + i as f64 * dt, pb.mass()).1).collect();
            rep.ticks += 1;
            let out = match tube_mpc_step(&x, &x_ref, &u_ref, &tube, &design, &mpc) {
                Ok(o) => o,
                Err(_) => {
                    rep.infeasible_ticks += 1;
                    break;
                }
            };
            let e = x - out.z0;
            if !tube.contains(&e) {
                rep.at_tick_violations += 1;
            }
            if out.u.iter().any(|u| u.abs() > mpc.u_max * (1.0 + 1e-12)) {
                rep.input_violations += 1;
            }
            let vertex = k % 2 == 0;
            let w = Vector6::from_fn(|j, _| {
                let s = base.w_max[j];
                if vertex {
                    if rng.random::<bool>() { s } else { -s }
                } else {
                    rng.random_range(-1.0..=1.0) * s
                }
            });
            x = a * x + b_true * out.u + w;
            let e_next = x - out.nominal[1];
            if !tube.contains(&e_next) {
                rep.successor_violations += 1;
            }
            let ratio = e_next.component_div(&tube.z_box).amax();
            rep.max_ratio = rep.max_ratio.max(ratio);
        }
    }
    rep
}

pub mod estimation {
    use nalgebra::{Vector3, Vector4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use rattle::dynamics::{retract, step_rk4, ErrorVector, ParamVector, RigidBodyState, Wrench};
    use rattle::estimator::{AugmentedBelief, EkfNoise, MeasMatrix, ParamBelief};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    pub const DT: f64 = 0.2;
    pub const MEAS_STD: f64 = 1e-3;

    pub fn truth() -> ParamVector {
        ParamVector::new(9.58, Vector3::new(0.15, 0.15, 0.16)).unwrap()
    }

    pub fn informative(t: f64) -> Wrench {
        Wrench::new(
            Vector3::new((0.3 * t).sin(), (0.4 * t + 1.0).sin(), (0.5 * t + 2.0).sin()) * 0.1,
            Vector3::new((0.6 * t).sin(), (0.8 * t + 1.0).sin(), (1.1 * t + 2.0).sin()) * 0.02,
        )
    }

    pub fn slow_translation(t: f64) -> Wrench {
        Wrench::new(Vector3::new((0.05 * t).sin() * 0.05, 0.0, 0.0), Vector3::zeros())
    }

    pub fn filter(theta0: Vector4<f64>, std0: Vector4<f64>) -> AugmentedBelief {
        let noise = EkfNoise::diagonal(1e-10, 1e-10, 1e-12, [MEAS_STD; 4]);
        let cov = MeasMatrix::identity() * MEAS_STD * MEAS_STD;
        AugmentedBelief::new(
            RigidBodyState::at_rest(Vector3::zeros()),
            cov,
            ParamBelief::from_std(theta0, std0),
            Vector3::zeros(),
            noise,
            0.0,
        )
    }

    /// Runs truth and filter side by side; returns the belief after each tick.
    pub fn run(mut b: AugmentedBelief, input: fn(f64) -> Wrench, duration: f64, seed: u64) -> Vec<ParamBelief> {
        let p = truth();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut x = RigidBodyState::at_rest(Vector3::zeros());
        let steps = (duration / DT).round() as usize;
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let u = input(k as f64 * DT);
            for _ in 0..4 {
                x = step_rk4(&x, &u, &p, DT / 4.0);
            }
            let y = retract(&x, &ErrorVector::from_fn(|_, _| unit.sample(&mut rng) * MEAS_STD));
            b = b.predict(&u, DT).update(&y, (k + 1) as f64 * DT).unwrap();
            out.push(b.current_params());
        }
        out
    }

    pub fn prior() -> (Vector4<f64>, Vector4<f64>) {
        (Vector4::new(9.2, 0.12, 0.12, 0.13), Vector4::new(0.5, 0.03, 0.03, 0.03))
    }

    /// Mean NEES of the parameter estimate over `seeds` runs of the
    /// informative input, with the initial estimate drawn from the prior,
    /// and the two-sided 95 % chi-square band for that mean.
    pub fn average_nees(seeds: u64, duration: f64) -> (f64, f64, f64) {
        let (_, s0) = prior();
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let th0 = truth().theta() + s0.map(|s| s * unit.sample(&mut rng));
            let history = run(filter(th0, s0), informative, duration, seed);
            let pb = history.last().unwrap();
            let e = pb.theta_hat - truth().theta();
            total += (e.transpose() * pb.sigma_theta.try_inverse().unwrap() * e)[0];
        }
        let chi = ChiSquared::new(4.0 * seeds as f64).unwrap();
        let n = seeds as f64;
        (total / n, chi.inverse_cdf(0.025) / n, chi.inverse_cdf(0.975) / n)
    }
}
