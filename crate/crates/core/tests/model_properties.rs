use nalgebra::{Matrix2, Matrix3, Rotation3, Unit, Vector3};
use proptest::prelude::*;
use visnav_mpc::dynamics::{
    integrate_step, linearize, rotation_world_body, state_derivative, ControlInput, ModelParams, UavState,
};
use visnav_mpc::obstacles::{
    avoidance_cost, ellipsoid_weight, min_distance_residual, obstacle_frame, predict_obstacle, semi_axes,
    weighted_distance, Obstacle, ShapingGains,
};
use visnav_mpc::perception::{perception_cost, project, target_in_camera, CameraModel, ImagePoint, TargetPoint};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn unit_vector() -> impl Strategy<Value = Vector3<f64>> {
    vec3(1.0).prop_filter("nonzero", |v| v.norm() > 1e-3).prop_map(|v| v.normalize())
}

fn state() -> impl Strategy<Value = UavState> {
    (vec3(5.0), vec3(2.0), -0.6..0.6, -0.6..0.6, -3.0..3.0).prop_map(|(position, velocity, roll, pitch, yaw)| UavState {
        position,
        velocity,
        roll,
        pitch,
        yaw,
    })
}

fn obstacle() -> impl Strategy<Value = Obstacle> {
    (vec3(4.0), vec3(1.0), vec3(1.0), vec3(1.0), 0.5..2.0).prop_map(|(position, velocity, size, eps, d_min)| Obstacle {
        position,
        velocity,
        size: size.map(|s| 0.1 + s.abs()),
        uncertainty: eps.map(|e| 0.1 * e.abs()),
        d_min,
    })
}

/// Z-Y-X Euler angles of a rotation away from gimbal lock.
fn euler_of(r: &Matrix3<f64>) -> (f64, f64, f64) {
    (r[(2, 1)].atan2(r[(2, 2)]), -r[(2, 0)].asin(), r[(1, 0)].atan2(r[(0, 0)]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rest_with_hover_thrust_is_an_equilibrium(p in vec3(10.0), yaw in -3.0..3.0f64) {
        let params = ModelParams::default();
        let xdot = state_derivative(&UavState::at_rest(p, yaw), &ControlInput::hover(&params), &params);
        prop_assert!(xdot.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn acceleration_magnitude_ignores_a_world_yaw_rotation(x in state(), angle in -3.0..3.0f64, thrust in 2.0..18.0f64) {
        let params = ModelParams::default();
        let u = ControlInput::new(thrust, 0.1, -0.2, 0.3);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let turned = UavState {
            position: rz * x.position,
            velocity: rz * x.velocity,
            yaw: x.yaw + angle,
            ..x
        };
        let a = state_derivative(&x, &u, &params).fixed_rows::<3>(3).norm();
        let b = state_derivative(&turned, &u, &params).fixed_rows::<3>(3).norm();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn roll_follows_the_first_order_lag(phi0 in -0.5..0.5f64, cmd in -0.5..0.5f64) {
        let params = ModelParams::default();
        let u = ControlInput::new(params.gravity, cmd, 0.0, 0.0);
        let mut x = UavState { roll: phi0, ..UavState::at_rest(Vector3::zeros(), 0.0) };
        let dt = 0.005;
        let steps = (5.0 * params.tau_roll / dt).round() as usize;
        for k in 1..=steps {
            x = integrate_step(&x, &u, &params, dt).unwrap();
            let t = k as f64 * dt;
            let target = params.k_roll * cmd;
            let exact = target + (phi0 - target) * (-t / params.tau_roll).exp();
            prop_assert!((x.roll - exact).abs() <= 1e-6);
            prop_assert_eq!(x.pitch, 0.0);
        }
    }

    #[test]
    fn jacobians_match_central_differences(x in state(), t in 2.0..18.0f64, r in -0.5..0.5f64, p in -0.5..0.5f64, y in -1.0..1.0f64) {
        let params = ModelParams::default();
        let u = ControlInput::new(t, r, p, y);
        let dt = 0.1;
        let (a, b) = linearize(&x, &u, &params, dt);
        let h = 1e-6;
        let step = |xv: visnav_mpc::dynamics::StateVector, uv: visnav_mpc::dynamics::InputVector| {
            integrate_step(&UavState::from_vector(&xv), &ControlInput::from_vector(&uv), &params, dt).unwrap().to_vector()
        };
        let (x0, u0) = (x.to_vector(), u.to_vector());
        for j in 0..9 {
            let mut e = x0;
            e[j] += h;
            let mut f = x0;
            f[j] -= h;
            let col = (step(e, u0) - step(f, u0)) / (2.0 * h);
            prop_assert!((a.column(j) - col).amax() <= 1e-5 * (1.0 + col.amax()));
        }
        for j in 0..4 {
            let mut e = u0;
            e[j] += h;
            let mut f = u0;
            f[j] -= h;
            let col = (step(x0, e) - step(x0, f)) / (2.0 * h);
            prop_assert!((b.column(j) - col).amax() <= 1e-5 * (1.0 + col.amax()));
        }
    }

    #[test]
    fn perception_cost_is_a_positive_definite_form(u in -500.0..500.0f64, v in -500.0..500.0f64, hx in 0.01..10.0f64, hy in 0.01..10.0f64) {
        let w = Matrix2::new(hx, 0.0, 0.0, hy);
        let c = perception_cost(&ImagePoint { u, v }, &w);
        prop_assert!(c >= 0.0);
        prop_assert_eq!(c == 0.0, u == 0.0 && v == 0.0);
        prop_assert_eq!(c, perception_cost(&ImagePoint { u: -u, v: -v }, &w));
    }

    #[test]
    fn projection_ignores_a_shared_rigid_motion(x in state(), axis in unit_vector(), angle in -3.0..3.0f64, shift in vec3(10.0), offset in vec3(1.0)) {
        let cam = CameraModel::default();
        let r_wb = rotation_world_body(x.roll, x.pitch, x.yaw);
        // a target in front of the camera
        let target = TargetPoint::new(x.position + r_wb * (Vector3::new(3.0, 0.0, 0.0) + offset));
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let moved_r = rot.matrix() * r_wb;
        prop_assume!(moved_r[(2, 0)].abs() < 0.99);
        let (roll, pitch, yaw) = euler_of(&moved_r);
        let moved = UavState {
            position: rot * x.position + shift,
            velocity: rot * x.velocity,
            roll,
            pitch,
            yaw,
        };
        let moved_target = TargetPoint::new(rot * target.position + shift);
        let a = project(&target_in_camera(&x, &cam, &target), &cam).unwrap();
        let b = project(&target_in_camera(&moved, &cam, &moved_target), &cam).unwrap();
        prop_assert!((a.u - b.u).abs() <= 1e-8 && (a.v - b.v).abs() <= 1e-8, "{:?} vs {:?}", a, b);
    }

    #[test]
    fn ellipsoid_weight_is_symmetric_positive_definite(o in obstacle()) {
        let w = ellipsoid_weight(&o, &ShapingGains::default());
        prop_assert!((w - w.transpose()).amax() <= 1e-15 * w.amax());
        prop_assert!(w.cholesky().is_some());
    }

    #[test]
    fn inflated_surface_has_unit_weighted_distance(o in obstacle(), dir in unit_vector()) {
        let gains = ShapingGains::default();
        let p = o.position + obstacle_frame(&o.velocity) * semi_axes(&o, &gains).component_mul(&dir);
        prop_assert!((weighted_distance(&p, &o, &gains) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn avoidance_cost_falls_along_rays(o in obstacle(), dir in unit_vector(), r in 0.05..5.0f64, dr in 0.01..2.0f64) {
        let gains = ShapingGains::default();
        let near = avoidance_cost(&(o.position + dir * r), &[o], &gains).value;
        let far = avoidance_cost(&(o.position + dir * (r + dr)), &[o], &gains).value;
        prop_assert!(far < near);
    }

    #[test]
    fn prediction_composes(o in obstacle(), t1 in 0.0..5.0f64, t2 in 0.0..5.0f64) {
        let a = predict_obstacle(&predict_obstacle(&o, t1), t2);
        let b = predict_obstacle(&o, t1 + t2);
        prop_assert!((a.position - b.position).amax() <= 1e-12 * (1.0 + b.position.amax()));
        prop_assert_eq!(a.velocity, b.velocity);
    }

    #[test]
    fn residual_ignores_a_rotation_about_the_vertical(o in obstacle(), p in vec3(5.0), angle in -3.0..3.0f64) {
        prop_assume!(o.velocity.norm() > 0.05);
        let gains = ShapingGains::default();
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let turned = Obstacle { velocity: rz * o.velocity, ..o };
        let q = o.position + rz * (p - o.position);
        let a = min_distance_residual(&p, &o, &gains);
        let b = min_distance_residual(&q, &turned, &gains);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn residual_ignores_any_rotation_with_round_cross_sections(
        o in obstacle(), p in vec3(5.0), axis in unit_vector(), angle in -3.0..3.0f64, side in 0.1..1.0f64,
    ) {
        prop_assume!(o.velocity.norm() > 0.05);
        let o = Obstacle {
            size: Vector3::new(o.size.x, side, side),
            uncertainty: Vector3::repeat(o.uncertainty.x),
            ..o
        };
        let gains = ShapingGains::default();
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let turned = Obstacle { velocity: rot * o.velocity, ..o };
        let q = o.position + rot * (p - o.position);
        let a = min_distance_residual(&p, &o, &gains);
        let b = min_distance_residual(&q, &turned, &gains);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}
