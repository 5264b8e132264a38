//! Ellipsoidal obstacles: shaping, repulsive cost and minimum-distance residual.
//!
//! An obstacle's bounding ellipsoid has semi-axes
//! `a = gamma + kappa_eps * epsilon + kappa_v * |v| e_1`, expressed in an
//! obstacle frame whose first axis follows the velocity (when the obstacle
//! moves faster than [`MOVING_SPEED`]) and which is world-aligned otherwise.
//! The weighted distance `d W d^T` equals one on the ellipsoid surface.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Speeds at or below this are treated as static for the ellipsoid frame.
pub const MOVING_SPEED: f64 = 0.01;
/// Weighted distances below this are treated as the vehicle sitting in the core.
pub const CORE_DISTANCE: f64 = 1e-9;
/// Cost assigned to a single obstacle term when inside the core.
pub const CORE_COST: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Vector3<f64>,
    #[serde(default = "Vector3::zeros")]
    pub velocity: Vector3<f64>,
    /// Physical semi-axes in meters.
    pub size: Vector3<f64>,
    /// Standard deviation of the position estimate per axis.
    #[serde(default = "Vector3::zeros")]
    pub uncertainty: Vector3<f64>,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
}

fn default_d_min() -> f64 {
    1.0
}

impl Obstacle {
    /// A static obstacle with no uncertainty and `d_min = 1`.
    pub fn fixed(position: Vector3<f64>, size: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            size,
            uncertainty: Vector3::zeros(),
            d_min: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|g| *g > 0.0)
            && self.uncertainty.iter().all(|e| *e >= 0.0)
            && self.d_min > 0.0
            && self.position.iter().chain(self.velocity.iter()).all(|c| c.is_finite())
    }
}

/// Inflation gains for uncertainty (dimensionless) and velocity (seconds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapingGains {
    pub kappa_eps: f64,
    pub kappa_v: f64,
}

impl Default for ShapingGains {
    fn default() -> Self {
        Self {
            kappa_eps: 2.0,
            kappa_v: 1.0,
        }
    }
}

impl ShapingGains {
    /// No inflation: the ellipsoid is the physical one.
    pub fn physical() -> Self {
        Self {
            kappa_eps: 0.0,
            kappa_v: 0.0,
        }
    }
}

/// Rotation from the obstacle frame to the world frame.
pub fn obstacle_frame(velocity: &Vector3<f64>) -> Matrix3<f64> {
    let speed = velocity.norm();
    if speed <= MOVING_SPEED {
        return Matrix3::identity();
    }
    let e1 = velocity / speed;
    let side = Vector3::z().cross(&e1);
    let e2 = if side.norm() > 1e-9 {
        side.normalize()
    } else {
        // vertical motion
        e1.cross(&Vector3::x()).normalize()
    };
    let e3 = e1.cross(&e2);
    Matrix3::from_columns(&[e1, e2, e3])
}

/// Inflated semi-axes in the obstacle frame.
pub fn semi_axes(obs: &Obstacle, gains: &ShapingGains) -> Vector3<f64> {
    let mut a = obs.size + obs.uncertainty * gains.kappa_eps;
    let speed = obs.velocity.norm();
    if speed > MOVING_SPEED {
        a.x += gains.kappa_v * speed;
    }
    a
}

fn weight_from_axes(frame: &Matrix3<f64>, axes: &Vector3<f64>) -> Matrix3<f64> {
    let inv_sq = Matrix3::from_diagonal(&axes.map(|a| 1.0 / (a * a)));
    frame * inv_sq * frame.transpose()
}

/// Symmetric positive-definite weight `W` of the inflated ellipsoid.
pub fn ellipsoid_weight(obs: &Obstacle, gains: &ShapingGains) -> Matrix3<f64> {
    weight_from_axes(&obstacle_frame(&obs.velocity), &semi_axes(obs, gains))
}

/// Weight of the physical ellipsoid (semi-axes `gamma` only), used for collision checks.
pub fn physical_weight(obs: &Obstacle) -> Matrix3<f64> {
    ellipsoid_weight(obs, &ShapingGains::physical())
}

/// `d W d^T` with `d = p - o`.
pub fn weighted_distance(p: &Vector3<f64>, obs: &Obstacle, gains: &ShapingGains) -> f64 {
    let d = p - obs.position;
    d.dot(&(ellipsoid_weight(obs, gains) * d))
}

/// Repulsive cost and whether any term was clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvoidanceCost {
    pub value: f64,
    pub inside_core: bool,
}

/// `sum_i 1 / (d_i W_i d_i^T)`.
pub fn avoidance_cost(p: &Vector3<f64>, obstacles: &[Obstacle], gains: &ShapingGains) -> AvoidanceCost {
    let mut value = 0.0;
    let mut inside_core = false;
    for obs in obstacles {
        let dist = weighted_distance(p, obs, gains);
        if dist < CORE_DISTANCE {
            value += CORE_COST;
            inside_core = true;
        } else {
            value += 1.0 / dist;
        }
    }
    AvoidanceCost { value, inside_core }
}

/// Gradient of [`avoidance_cost`] with respect to the vehicle position.
pub fn avoidance_cost_gradient(p: &Vector3<f64>, obstacles: &[Obstacle], gains: &ShapingGains) -> Vector3<f64> {
    obstacles
        .iter()
        .map(|obs| {
            let w = ellipsoid_weight(obs, gains);
            let d = p - obs.position;
            let wd = w * d;
            let dist = d.dot(&wd);
            if dist < CORE_DISTANCE {
                Vector3::zeros()
            } else {
                wd * (-2.0 / (dist * dist))
            }
        })
        .sum()
}

/// `d W d^T - d_min`; non-negative when the position is acceptable.
pub fn min_distance_residual(p: &Vector3<f64>, obs: &Obstacle, gains: &ShapingGains) -> f64 {
    weighted_distance(p, obs, gains) - obs.d_min
}

/// Constant-velocity propagation by `t` seconds.
pub fn predict_obstacle(obs: &Obstacle, t: f64) -> Obstacle {
    Obstacle {
        position: obs.position + obs.velocity * t,
        ..*obs
    }
}

/// True when `p` lies outside the inflated ellipsoid grown by a further
/// `clearance` meters on every semi-axis.
pub fn has_clearance(p: &Vector3<f64>, obs: &Obstacle, gains: &ShapingGains, clearance: f64) -> bool {
    let axes = semi_axes(obs, gains).add_scalar(clearance);
    let w = weight_from_axes(&obstacle_frame(&obs.velocity), &axes);
    let d = p - obs.position;
    d.dot(&(w * d)) >= 1.0
}
