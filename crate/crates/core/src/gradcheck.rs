//! Finite-difference checks of the analytic derivatives.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{linearize, linearize_numeric, ControlInput, ModelParams, QuadrotorModel, UavState};
use crate::obstacles::{avoidance_cost, avoidance_cost_gradient, Obstacle, ShapingGains};
use crate::ocp::{cost_gradient, rollout, trajectory_cost, OcpConfig, References};
use crate::perception::{
    perception_cost, perception_cost_gradient, perception_weight, project_clamped, target_in_camera, CameraModel,
    TargetPoint,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub samples: usize,
    /// Largest `max|analytic - fd| / max|fd|` over the samples.
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `max|a - b| / max|b|`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// A random state inside the flight envelope.
pub fn random_state<R: Rng + ?Sized>(rng: &mut R) -> UavState {
    UavState {
        position: Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
        velocity: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        roll: rng.random_range(-0.5..0.5),
        pitch: rng.random_range(-0.5..0.5),
        yaw: rng.random_range(-3.0..3.0),
    }
}

pub fn random_input<R: Rng + ?Sized>(rng: &mut R) -> ControlInput {
    ControlInput::new(
        rng.random_range(4.0..16.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.0..1.0),
    )
}

fn dynamics_suite<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> SuiteResult {
    let params = ModelParams::default();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (x, u) = (random_state(rng), random_input(rng));
        let (a, b) = linearize(&x, &u, &params, 0.2);
        let (an, bn) = linearize_numeric(&x, &u, &params, 0.2);
        worst = worst
            .max(relative_error(a.as_slice(), an.as_slice()))
            .max(relative_error(b.as_slice(), bn.as_slice()));
    }
    SuiteResult {
        name: "dynamics",
        samples,
        max_rel_error: worst,
    }
}

fn perception_suite<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> SuiteResult {
    let cam = CameraModel::default();
    let weight = perception_weight(50.0, &cam);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < samples {
        let x = random_state(rng);
        let target = TargetPoint::new(x.position + Vector3::from_fn(|_, _| rng.random_range(-6.0..6.0)));
        if target_in_camera(&x, &cam, &target).z < 0.5 {
            continue;
        }
        let cost = |x: &UavState| perception_cost(&project_clamped(&target_in_camera(x, &cam, &target), &cam).0, &weight);
        let g = perception_cost_gradient(&x, &cam, &target, &weight);
        let xv = x.to_vector();
        let fd: Vec<f64> = (0..xv.len())
            .map(|i| {
                let mut p = xv;
                let mut m = xv;
                p[i] += FD_STEP;
                m[i] -= FD_STEP;
                (cost(&UavState::from_vector(&p)) - cost(&UavState::from_vector(&m))) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(g.as_slice(), &fd));
        done += 1;
    }
    SuiteResult {
        name: "perception",
        samples,
        max_rel_error: worst,
    }
}

fn random_obstacle<R: Rng + ?Sized>(rng: &mut R) -> Obstacle {
    Obstacle {
        position: Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
        velocity: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        size: Vector3::from_fn(|_, _| rng.random_range(0.2..1.0)),
        uncertainty: Vector3::from_fn(|_, _| rng.random_range(0.0..0.1)),
        d_min: 1.0,
    }
}

fn avoidance_suite<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> SuiteResult {
    let gains = ShapingGains::default();
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < samples {
        let obstacles: Vec<Obstacle> = (0..rng.random_range(1..4)).map(|_| random_obstacle(rng)).collect();
        let p = Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0));
        let cost = |p: &Vector3<f64>| avoidance_cost(p, &obstacles, &gains).value;
        if cost(&p) > 10.0 {
            continue;
        }
        let g = avoidance_cost_gradient(&p, &obstacles, &gains);
        let fd: Vec<f64> = (0..3)
            .map(|i| {
                let mut a = p;
                let mut b = p;
                a[i] += FD_STEP;
                b[i] -= FD_STEP;
                (cost(&a) - cost(&b)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(g.as_slice(), &fd));
        done += 1;
    }
    SuiteResult {
        name: "avoidance",
        samples,
        max_rel_error: worst,
    }
}

fn ocp_suite<R: Rng + ?Sized>(rng: &mut R, samples: usize) -> SuiteResult {
    let config = OcpConfig {
        perception_weight: 1.0,
        ..OcpConfig::default()
    };
    let cam = CameraModel::default();
    let model = QuadrotorModel::default();
    let params = ModelParams::default();
    let n = config.num_intervals();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut x0 = random_state(rng);
        x0.roll *= 0.2;
        x0.pitch *= 0.2;
        x0.velocity *= 0.3;
        let heading = Vector3::new(x0.yaw.cos(), x0.yaw.sin(), 0.0);
        let refs = References {
            x_ref: UavState::at_rest(x0.position + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), x0.yaw),
            u_ref: ControlInput::hover(&params),
            target: TargetPoint::new(x0.position + heading * 8.0),
        };
        let obstacles = vec![Obstacle {
            position: x0.position + heading * 2.0 + Vector3::new(0.0, 0.0, 0.5),
            ..random_obstacle(rng)
        }];
        let inputs: Vec<ControlInput> = (0..n)
            .map(|_| {
                let mut u = random_input(rng);
                u.thrust = rng.random_range(8.5..11.0);
                u.roll_cmd *= 0.2;
                u.pitch_cmd *= 0.2;
                u
            })
            .collect();
        let cost = |inputs: &[ControlInput]| {
            let states = rollout(&x0, inputs, &model, config.dt).expect("finite rollout");
            trajectory_cost(&states, inputs, &refs, &obstacles, &cam, &config)
        };
        let g = cost_gradient(&x0, &inputs, &refs, &obstacles, &cam, &config, &model).expect("valid horizon");
        let fd = DMatrix::from_fn(g.len(), 1, |i, _| {
            let bump = |delta: f64| {
                let mut u = inputs.clone();
                let mut v = u[i / 4].to_vector();
                v[i % 4] += delta;
                u[i / 4] = ControlInput::from_vector(&v);
                cost(&u)
            };
            (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP)
        });
        worst = worst.max(relative_error(g.as_slice(), fd.as_slice()));
    }
    SuiteResult {
        name: "ocp-gradient",
        samples,
        max_rel_error: worst,
    }
}

/// Runs every suite with `samples` random draws each.
pub fn run_suites(samples: usize, seed: u64) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        dynamics_suite(&mut rng, samples),
        perception_suite(&mut rng, samples),
        avoidance_suite(&mut rng, samples),
        ocp_suite(&mut rng, samples.min(20)),
    ]
}
