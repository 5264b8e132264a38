//! Optimal control problem, Gauss-Newton SQP and receding-horizon control.
//!
//! The horizon `T_H` is split into `N = T_H / dt` shooting intervals. The
//! objective is
//!
//! ```text
//! J = |x_N - x_ref|^2_{Q_N} + sum_{k<N} ( |x_k - x_ref|^2_Q + |u_k - u_ref|^2_R
//!                                         + s_k H s_k^T + sum_i 1 / (d_ik W_i d_ik^T) )
//! ```
//!
//! Every term is a sum of squared residuals (the avoidance term uses the
//! residual `(d W d^T)^(-1/2)`), so the Gauss-Newton Hessian is positive
//! semidefinite by construction. Inputs are the only decision variables:
//! states are recovered by rolling the prediction model forward from the
//! measured state after every step, and the state sensitivities to the inputs
//! are chained from the per-interval Jacobians. The per-node obstacle
//! constraints `d W d^T >= d_min` are linearized and softened with slack
//! variables carrying an L1 penalty, which keeps every QP feasible.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    wrap_angle, ControlInput, InputVector, PredictionModel, StateVector, UavState, INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::obstacles::{
    ellipsoid_weight, min_distance_residual, predict_obstacle, weighted_distance, Obstacle, ShapingGains,
    CORE_COST, CORE_DISTANCE,
};
use crate::perception::{image_point_jacobian, perception_cost, perception_weight, CameraModel, TargetPoint};
use crate::qp::{ActiveConstraint, QpProblem, QpSolver, QpStatus};

pub type StateWeight = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputWeight = Matrix4<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObstacleMode {
    /// Linearized minimum-distance constraints with L1-penalized slacks, plus the repulsive cost.
    HardWithSlack,
    /// Repulsive cost only.
    PenaltyOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    /// Shooting interval in seconds.
    pub dt: f64,
    /// Horizon length in seconds.
    pub horizon: f64,
    #[serde(with = "weight_serde")]
    pub q: StateWeight,
    #[serde(with = "weight_serde")]
    pub q_terminal: StateWeight,
    #[serde(with = "weight_serde")]
    pub r: InputWeight,
    pub u_lower: [f64; INPUT_DIM],
    pub u_upper: [f64; INPUT_DIM],
    /// Perception weight `h`.
    pub perception_weight: f64,
    pub sqp_iters: usize,
    pub obstacle_mode: ObstacleMode,
    /// Inflation applied by the controller to observed obstacles.
    pub shaping: ShapingGains,
    /// L1 penalty on constraint slacks.
    pub slack_weight: f64,
    /// Small quadratic penalty on slacks (keeps the QP Hessian positive definite).
    pub slack_quadratic: f64,
    /// Obstacles whose weighted distance exceeds this at a node are left out of the QP.
    pub drop_distance: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        let q_diag = [10.0, 10.0, 10.0, 40.0, 40.0, 40.0, 5.0, 5.0, 5.0];
        let q = StateWeight::from_diagonal(&StateVector::from_column_slice(&q_diag));
        Self {
            dt: 0.2,
            horizon: 2.0,
            q,
            q_terminal: q * 10.0,
            r: InputWeight::from_diagonal(&InputVector::new(1.0, 10.0, 10.0, 1.0)),
            u_lower: [2.0, -0.5, -0.5, -1.0],
            u_upper: [18.0, 0.5, 0.5, 1.0],
            perception_weight: 0.02,
            sqp_iters: 1,
            obstacle_mode: ObstacleMode::HardWithSlack,
            shaping: ShapingGains::default(),
            slack_weight: 1e4,
            slack_quadratic: 1.0,
            drop_distance: 15.0,
        }
    }
}

impl OcpConfig {
    /// Number of shooting intervals `N`.
    pub fn num_intervals(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn u_lower(&self) -> InputVector {
        InputVector::from_column_slice(&self.u_lower)
    }

    pub fn u_upper(&self) -> InputVector {
        InputVector::from_column_slice(&self.u_upper)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return bad("dt and horizon must be positive");
        }
        let n = self.num_intervals();
        if n < 1 || (n as f64 * self.dt - self.horizon).abs() > 1e-9 {
            return bad("horizon must be a positive integer multiple of dt");
        }
        if (0..INPUT_DIM).any(|i| !(self.u_lower[i] < self.u_upper[i])) {
            return bad("input bounds must satisfy u_lower < u_upper");
        }
        if min_eigenvalue(self.q.as_slice(), STATE_DIM) < -1e-12
            || min_eigenvalue(self.q_terminal.as_slice(), STATE_DIM) < -1e-12
        {
            return bad("state weights must be positive semidefinite");
        }
        if min_eigenvalue(self.r.as_slice(), INPUT_DIM) <= 0.0 {
            return bad("input weight must be positive definite");
        }
        if self.perception_weight < 0.0 {
            return bad("perception weight must be non-negative");
        }
        if self.sqp_iters < 1 {
            return bad("sqp_iters must be at least 1");
        }
        if self.obstacle_mode == ObstacleMode::HardWithSlack && !(self.slack_weight > 0.0 && self.slack_quadratic > 0.0) {
            return bad("hard obstacle constraints need positive slack penalties");
        }
        if self.shaping.kappa_eps < 0.0 || self.shaping.kappa_v < 0.0 {
            return bad("shaping gains must be non-negative");
        }
        Ok(())
    }
}

fn min_eigenvalue(column_major: &[f64], dim: usize) -> f64 {
    let m = DMatrix::from_column_slice(dim, dim, column_major);
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Symmetric square root `L` with `L L = M` for a PSD matrix.
fn psd_sqrt(column_major: &[f64], dim: usize) -> DMatrix<f64> {
    let m = DMatrix::from_column_slice(dim, dim, column_major);
    let eig = ((&m + m.transpose()) * 0.5).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Weight matrices accept either a diagonal `[..]` or full `[[..], ..]` rows.
mod weight_serde {
    use nalgebra::SMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Diagonal(Vec<f64>),
        Full(Vec<Vec<f64>>),
    }

    pub fn serialize<const D: usize, S: Serializer>(m: &SMatrix<f64, D, D>, s: S) -> Result<S::Ok, S::Error> {
        let diagonal = (0..D).all(|r| (0..D).all(|c| r == c || m[(r, c)] == 0.0));
        if diagonal {
            Repr::Diagonal((0..D).map(|i| m[(i, i)]).collect()).serialize(s)
        } else {
            Repr::Full((0..D).map(|r| (0..D).map(|c| m[(r, c)]).collect()).collect()).serialize(s)
        }
    }

    pub fn deserialize<'de, const D: usize, De: Deserializer<'de>>(d: De) -> Result<SMatrix<f64, D, D>, De::Error> {
        use serde::de::Error;
        match Repr::deserialize(d)? {
            Repr::Diagonal(v) if v.len() == D => Ok(SMatrix::from_fn(|r, c| if r == c { v[r] } else { 0.0 })),
            Repr::Full(rows) if rows.len() == D && rows.iter().all(|r| r.len() == D) => {
                Ok(SMatrix::from_fn(|r, c| rows[r][c]))
            }
            _ => Err(De::Error::custom(format!("expected a {D}-diagonal or {D}x{D} weight matrix"))),
        }
    }
}

/// Goal state, hover input and the point to keep in view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub x_ref: UavState,
    pub u_ref: ControlInput,
    pub target: TargetPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySolution {
    /// `x_0 .. x_N`
    pub states: Vec<UavState>,
    /// `u_0 .. u_{N-1}`
    pub inputs: Vec<ControlInput>,
    pub total_cost: f64,
    /// Infinity norm of the last SQP step, or the QP residual if that was larger.
    pub kkt_residual: f64,
    /// `max(0, -min_distance_residual)` over nodes `1..=N` and all obstacles.
    pub constraint_violation: f64,
    /// Wall-clock seconds spent in the solve.
    pub solve_time: f64,
    pub qp_iterations: usize,
    /// The perception residual hit the near plane somewhere on the horizon.
    pub depth_clamped: bool,
}

impl TrajectorySolution {
    pub fn horizon_len(&self) -> usize {
        self.inputs.len()
    }
}

/// Breakdown of one stage cost.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageCost {
    pub navigation: f64,
    pub action: f64,
    pub perception: f64,
    pub avoidance: f64,
    pub depth_clamped: bool,
    pub inside_core: bool,
}

impl StageCost {
    pub fn total(&self) -> f64 {
        self.navigation + self.action + self.perception + self.avoidance
    }
}

/// `x - x_ref` with the yaw difference wrapped.
pub fn state_error(x: &StateVector, x_ref: &StateVector) -> StateVector {
    let mut e = x - x_ref;
    e[8] = wrap_angle(e[8]);
    e
}

fn quadratic<const D: usize>(w: &SMatrix<f64, D, D>, e: &SMatrix<f64, D, 1>) -> f64 {
    e.dot(&(w * e))
}

/// Stage cost terms at node `k`, with obstacles propagated to `k * dt`.
pub fn stage_cost_terms(
    x: &UavState,
    u: &ControlInput,
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    k: usize,
) -> StageCost {
    let e = state_error(&x.to_vector(), &refs.x_ref.to_vector());
    let du = u.to_vector() - refs.u_ref.to_vector();
    let (s, _, clamped) = image_point_jacobian(x, cam, &refs.target);
    if clamped {
        log::warn!("target depth clamped to the near plane at node {k}");
    }
    let t = k as f64 * config.dt;
    let mut avoidance = 0.0;
    let mut inside_core = false;
    for obs in obstacles {
        let dist = weighted_distance(&x.position, &predict_obstacle(obs, t), &config.shaping);
        if dist < CORE_DISTANCE {
            avoidance += CORE_COST;
            inside_core = true;
        } else {
            avoidance += 1.0 / dist;
        }
    }
    StageCost {
        navigation: quadratic(&config.q, &e),
        action: quadratic(&config.r, &du),
        perception: perception_cost(&s, &perception_weight(config.perception_weight, cam)),
        avoidance,
        depth_clamped: clamped,
        inside_core,
    }
}

/// `c_n + c_a + c_p + c_o` at node `k`.
pub fn stage_cost(
    x: &UavState,
    u: &ControlInput,
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    k: usize,
) -> f64 {
    stage_cost_terms(x, u, refs, obstacles, cam, config, k).total()
}

pub fn terminal_cost(x: &UavState, refs: &References, config: &OcpConfig) -> f64 {
    let e = state_error(&x.to_vector(), &refs.x_ref.to_vector());
    quadratic(&config.q_terminal, &e)
}

/// Sum of stage costs plus the terminal cost.
pub fn trajectory_cost(
    states: &[UavState],
    inputs: &[ControlInput],
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
) -> f64 {
    let stages: f64 = inputs
        .iter()
        .enumerate()
        .map(|(k, u)| stage_cost(&states[k], u, refs, obstacles, cam, config, k))
        .sum();
    stages + terminal_cost(&states[inputs.len()], refs, config)
}

/// Largest minimum-distance violation over nodes `1..=N`.
pub fn constraint_violation(states: &[UavState], obstacles: &[Obstacle], config: &OcpConfig) -> f64 {
    let mut worst = 0.0f64;
    for (k, x) in states.iter().enumerate().skip(1) {
        let t = k as f64 * config.dt;
        for obs in obstacles {
            let r = min_distance_residual(&x.position, &predict_obstacle(obs, t), &config.shaping);
            worst = worst.max(-r);
        }
    }
    worst
}

/// Rolls the model forward from `x0`.
pub fn rollout(x0: &UavState, inputs: &[ControlInput], model: &dyn PredictionModel, dt: f64) -> Result<Vec<UavState>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut x = x0.to_vector();
    states.push(*x0);
    for u in inputs {
        x = model.step(&x, &u.to_vector(), dt);
        if !x.iter().all(|c| c.is_finite()) {
            return Err(Error::Divergence("prediction rollout produced a non-finite state".into()));
        }
        states.push(UavState::from_vector(&x));
    }
    Ok(states)
}

/// Identifies a linearized obstacle constraint by shooting node and obstacle index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub node: usize,
    pub obstacle: usize,
}

/// The QP of one Gauss-Newton step.
///
/// Variables are the input increments `du_0 .. du_{N-1}` (4 per node)
/// followed by one slack per obstacle row.
#[derive(Clone, Debug)]
pub struct Transcription {
    pub qp: QpProblem,
    pub row_keys: Vec<RowKey>,
    /// States of the rollout the QP was built around.
    pub states: Vec<UavState>,
    pub depth_clamped: bool,
}

impl Transcription {
    pub fn num_input_vars(&self) -> usize {
        (self.states.len() - 1) * INPUT_DIM
    }
}

fn clamp_inputs(inputs: &[ControlInput], config: &OcpConfig) -> Vec<ControlInput> {
    let lo = config.u_lower();
    let hi = config.u_upper();
    inputs
        .iter()
        .map(|u| {
            let v = u.to_vector();
            ControlInput::from_vector(&InputVector::from_fn(|i, _| v[i].clamp(lo[i], hi[i])))
        })
        .collect()
}

/// Builds the Gauss-Newton QP around the inputs of `guess`, rolled out from `x0`.
pub fn transcribe(
    x0: &UavState,
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    model: &dyn PredictionModel,
    guess: &TrajectorySolution,
) -> Result<Transcription> {
    transcribe_with(x0, refs, obstacles, cam, config, model, guess, config.drop_distance, config.obstacle_mode)
}

#[allow(clippy::too_many_arguments)]
fn transcribe_with(
    x0: &UavState,
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    model: &dyn PredictionModel,
    guess: &TrajectorySolution,
    drop_distance: f64,
    mode: ObstacleMode,
) -> Result<Transcription> {
    let n = config.num_intervals();
    if guess.inputs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "warm start has {} inputs, horizon needs {n}",
            guess.inputs.len()
        )));
    }
    let nu = n * INPUT_DIM;
    let dt = config.dt;
    let inputs = clamp_inputs(&guess.inputs, config);

    let sq_q = psd_sqrt(config.q.as_slice(), STATE_DIM);
    let q_gn = &sq_q * &sq_q;
    let q_n = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, config.q_terminal.as_slice());
    let r = DMatrix::from_column_slice(INPUT_DIM, INPUT_DIM, config.r.as_slice());
    let h_img: Matrix2<f64> = perception_weight(config.perception_weight, cam);
    let x_ref = refs.x_ref.to_vector();
    let u_ref = refs.u_ref.to_vector();

    // rollout and input sensitivities G_k = dx_k / dU
    let mut states = Vec::with_capacity(n + 1);
    let mut sens: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    let mut x = x0.to_vector();
    let mut g_k = DMatrix::<f64>::zeros(STATE_DIM, nu);
    states.push(*x0);
    sens.push(g_k.clone());
    for (k, u) in inputs.iter().enumerate() {
        let uv = u.to_vector();
        let (a, b) = model.jacobians(&x, &uv, dt);
        let a_d = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, a.as_slice());
        let mut next = &a_d * &g_k;
        for c in 0..INPUT_DIM {
            for rr in 0..STATE_DIM {
                next[(rr, k * INPUT_DIM + c)] += b[(rr, c)];
            }
        }
        g_k = next;
        x = model.step(&x, &uv, dt);
        if !x.iter().all(|c| c.is_finite()) {
            return Err(Error::Divergence("prediction rollout produced a non-finite state".into()));
        }
        states.push(UavState::from_vector(&x));
        sens.push(g_k.clone());
    }

    let mut hess_u = DMatrix::<f64>::zeros(nu, nu);
    let mut grad_u = DVector::<f64>::zeros(nu);
    let mut depth_clamped = false;
    let mut rows: Vec<(RowKey, DVector<f64>, f64)> = Vec::new();

    for k in 0..=n {
        let xs = &states[k];
        let xv = xs.to_vector();
        let e = DVector::from_column_slice(state_error(&xv, &x_ref).as_slice());
        // node-level Gauss-Newton blocks in state space
        let mut m_k: DMatrix<f64>;
        let mut v_k: DVector<f64>;
        if k == n {
            m_k = q_n.clone();
            v_k = &q_n * &e;
        } else {
            m_k = q_gn.clone();
            v_k = &q_gn * &e;

            let du = inputs[k].to_vector() - u_ref;
            let du = DVector::from_column_slice(du.as_slice());
            let off = k * INPUT_DIM;
            let rdu = &r * &du;
            for i in 0..INPUT_DIM {
                grad_u[off + i] += 2.0 * rdu[i];
                for j in 0..INPUT_DIM {
                    hess_u[(off + i, off + j)] += 2.0 * r[(i, j)];
                }
            }

            if config.perception_weight > 0.0 {
                let (s, jac, clamped) = image_point_jacobian(xs, cam, &refs.target);
                if clamped {
                    depth_clamped = true;
                }
                let w = [h_img[(0, 0)].sqrt(), h_img[(1, 1)].sqrt()];
                let res = [w[0] * s.u, w[1] * s.v];
                for a in 0..2 {
                    for i in 0..STATE_DIM {
                        let ji = w[a] * jac[(a, i)];
                        v_k[i] += ji * res[a];
                        for j in 0..STATE_DIM {
                            m_k[(i, j)] += ji * w[a] * jac[(a, j)];
                        }
                    }
                }
            }
        }

        let t = k as f64 * dt;
        for (oi, obs) in obstacles.iter().enumerate() {
            let o = predict_obstacle(obs, t);
            let w = ellipsoid_weight(&o, &config.shaping);
            let d: Vector3<f64> = xs.position - o.position;
            let wd = w * d;
            let dist = d.dot(&wd);
            if dist > drop_distance {
                continue;
            }
            if k < n && dist >= CORE_DISTANCE {
                // residual (d W d)^(-1/2)
                let res = dist.powf(-0.5);
                let jp = wd * (-dist.powf(-1.5));
                for i in 0..3 {
                    v_k[i] += jp[i] * res;
                    for j in 0..3 {
                        m_k[(i, j)] += jp[i] * jp[j];
                    }
                }
            }
            if k >= 1 && mode == ObstacleMode::HardWithSlack {
                // d W d + 2 (W d)' dp >= d_min
                let grad = wd * 2.0;
                let gk = &sens[k];
                let a_row = DVector::from_fn(nu, |c, _| {
                    grad[0] * gk[(0, c)] + grad[1] * gk[(1, c)] + grad[2] * gk[(2, c)]
                });
                rows.push((RowKey { node: k, obstacle: oi }, a_row, o.d_min - dist));
            }
        }

        if k > 0 {
            let gk = &sens[k];
            let t_mat = &m_k * gk;
            hess_u += (gk.transpose() * t_mat) * 2.0;
            grad_u += (gk.transpose() * v_k) * 2.0;
        }
    }

    // symmetrize against round-off
    let hess_u = (&hess_u + hess_u.transpose()) * 0.5;
    let ns = rows.len();
    let dim = nu + ns;
    let mut hessian = DMatrix::zeros(dim, dim);
    hessian.view_mut((0, 0), (nu, nu)).copy_from(&hess_u);
    let mut gradient = DVector::zeros(dim);
    gradient.rows_mut(0, nu).copy_from(&grad_u);
    let mut lower = DVector::from_element(dim, 0.0);
    let mut upper = DVector::from_element(dim, f64::INFINITY);
    let lo = config.u_lower();
    let hi = config.u_upper();
    for (k, u) in inputs.iter().enumerate() {
        let uv = u.to_vector();
        for i in 0..INPUT_DIM {
            lower[k * INPUT_DIM + i] = lo[i] - uv[i];
            upper[k * INPUT_DIM + i] = hi[i] - uv[i];
        }
    }
    let mut a_ineq = DMatrix::zeros(ns, dim);
    let mut b_ineq = DVector::zeros(ns);
    let mut row_keys = Vec::with_capacity(ns);
    for (j, (key, a_row, b)) in rows.into_iter().enumerate() {
        a_ineq.view_mut((j, 0), (1, nu)).copy_from(&a_row.transpose());
        a_ineq[(j, nu + j)] = 1.0;
        b_ineq[j] = b;
        hessian[(nu + j, nu + j)] = config.slack_quadratic;
        gradient[nu + j] = config.slack_weight;
        row_keys.push(key);
    }

    Ok(Transcription {
        qp: QpProblem {
            hessian,
            gradient,
            lower,
            upper,
            a_ineq,
            b_ineq,
        },
        row_keys,
        states,
        depth_clamped,
    })
}

/// Exact gradient of [`trajectory_cost`] with respect to the stacked inputs,
/// assembled from the residual Jacobians (all obstacles included).
pub fn cost_gradient(
    x0: &UavState,
    inputs: &[ControlInput],
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    model: &dyn PredictionModel,
) -> Result<DVector<f64>> {
    let guess = TrajectorySolution {
        states: vec![*x0; inputs.len() + 1],
        inputs: inputs.to_vec(),
        total_cost: 0.0,
        kkt_residual: 0.0,
        constraint_violation: 0.0,
        solve_time: 0.0,
        qp_iterations: 0,
        depth_clamped: false,
    };
    let t = transcribe_with(x0, refs, obstacles, cam, config, model, &guess, f64::INFINITY, ObstacleMode::PenaltyOnly)?;
    Ok(t.qp.gradient)
}

/// Constant trajectory at `x0` with every input at `u_ref`.
pub fn cold_start(x0: &UavState, refs: &References, config: &OcpConfig) -> TrajectorySolution {
    let n = config.num_intervals();
    TrajectorySolution {
        states: vec![*x0; n + 1],
        inputs: vec![refs.u_ref; n],
        total_cost: f64::INFINITY,
        kkt_residual: f64::INFINITY,
        constraint_violation: 0.0,
        solve_time: 0.0,
        qp_iterations: 0,
        depth_clamped: false,
    }
}

/// Shifts a solution by one node, duplicating the last node.
pub fn shift(prev: &TrajectorySolution, _config: &OcpConfig) -> TrajectorySolution {
    let mut out = prev.clone();
    if prev.inputs.is_empty() {
        return out;
    }
    out.states.remove(0);
    out.states.push(*prev.states.last().expect("non-empty states"));
    out.inputs.remove(0);
    out.inputs.push(*prev.inputs.last().expect("non-empty inputs"));
    out
}

/// Decides when a full shooting interval has elapsed between control ticks.
#[derive(Clone, Debug)]
pub struct Shifter {
    ticks_per_node: usize,
    ticks: usize,
}

impl Shifter {
    pub fn new(config: &OcpConfig, tick_dt: f64) -> Self {
        Self {
            ticks_per_node: ((config.dt / tick_dt).round() as usize).max(1),
            ticks: 0,
        }
    }

    pub fn ticks_per_node(&self) -> usize {
        self.ticks_per_node
    }

    /// Warm start for the next tick: the previous solution, shifted by one
    /// node once every `dt` worth of ticks. Returns whether a shift happened.
    pub fn advance(&mut self, prev: &TrajectorySolution, config: &OcpConfig) -> (TrajectorySolution, bool) {
        self.ticks += 1;
        if self.ticks >= self.ticks_per_node {
            self.ticks = 0;
            (shift(prev, config), true)
        } else {
            (prev.clone(), false)
        }
    }

    pub fn reset(&mut self) {
        self.ticks = 0;
    }
}

/// QP working-set entry expressed in horizon terms, so it survives changes
/// in the number of obstacle rows and node shifts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WarmConstraint {
    InputLower { node: usize, component: usize },
    InputUpper { node: usize, component: usize },
    Row(RowKey),
    SlackLower(RowKey),
}

fn to_warm(active: &[ActiveConstraint], t: &Transcription) -> Vec<WarmConstraint> {
    let nu = t.num_input_vars();
    active
        .iter()
        .map(|c| match *c {
            ActiveConstraint::Lower(i) if i < nu => WarmConstraint::InputLower {
                node: i / INPUT_DIM,
                component: i % INPUT_DIM,
            },
            ActiveConstraint::Lower(i) => WarmConstraint::SlackLower(t.row_keys[i - nu]),
            ActiveConstraint::Upper(i) => WarmConstraint::InputUpper {
                node: i / INPUT_DIM,
                component: i % INPUT_DIM,
            },
            ActiveConstraint::Row(j) => WarmConstraint::Row(t.row_keys[j]),
        })
        .collect()
}

fn from_warm(warm: &[WarmConstraint], t: &Transcription) -> Vec<ActiveConstraint> {
    let nu = t.num_input_vars();
    let rows: HashMap<RowKey, usize> = t.row_keys.iter().enumerate().map(|(j, k)| (*k, j)).collect();
    let mut out: Vec<ActiveConstraint> = warm
        .iter()
        .filter_map(|w| match *w {
            WarmConstraint::InputLower { node, component } if node * INPUT_DIM + component < nu => {
                Some(ActiveConstraint::Lower(node * INPUT_DIM + component))
            }
            WarmConstraint::InputUpper { node, component } if node * INPUT_DIM + component < nu => {
                Some(ActiveConstraint::Upper(node * INPUT_DIM + component))
            }
            WarmConstraint::Row(key) => rows.get(&key).map(|&j| ActiveConstraint::Row(j)),
            WarmConstraint::SlackLower(key) => rows.get(&key).map(|&j| ActiveConstraint::Lower(nu + j)),
            _ => None,
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

fn shift_warm(warm: &[WarmConstraint]) -> Vec<WarmConstraint> {
    warm.iter()
        .filter_map(|w| match *w {
            WarmConstraint::InputLower { node, component } if node > 0 => {
                Some(WarmConstraint::InputLower { node: node - 1, component })
            }
            WarmConstraint::InputUpper { node, component } if node > 0 => {
                Some(WarmConstraint::InputUpper { node: node - 1, component })
            }
            WarmConstraint::Row(k) if k.node > 1 => Some(WarmConstraint::Row(RowKey { node: k.node - 1, ..k })),
            WarmConstraint::SlackLower(k) if k.node > 1 => {
                Some(WarmConstraint::SlackLower(RowKey { node: k.node - 1, ..k }))
            }
            _ => None,
        })
        .collect()
}

/// Runs `config.sqp_iters` full Gauss-Newton steps from `warm`.
pub fn sqp_solve(
    x0: &UavState,
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    model: &dyn PredictionModel,
    warm: &TrajectorySolution,
) -> Result<TrajectorySolution> {
    let mut active = None;
    sqp_solve_warm(x0, refs, obstacles, cam, config, model, warm, &mut active)
}

#[allow(clippy::too_many_arguments)]
fn sqp_solve_warm(
    x0: &UavState,
    refs: &References,
    obstacles: &[Obstacle],
    cam: &CameraModel,
    config: &OcpConfig,
    model: &dyn PredictionModel,
    warm: &TrajectorySolution,
    active: &mut Option<Vec<WarmConstraint>>,
) -> Result<TrajectorySolution> {
    let start = Instant::now();
    let mut current = warm.clone();
    current.inputs = clamp_inputs(&warm.inputs, config);
    let mut kkt = f64::INFINITY;
    let mut qp_iterations = 0;
    let mut depth_clamped = false;
    let mut solver = QpSolver::new();
    let lo = config.u_lower();
    let hi = config.u_upper();

    for _ in 0..config.sqp_iters {
        let t = transcribe(x0, refs, obstacles, cam, config, model, &current)?;
        depth_clamped |= t.depth_clamped;
        let warm_set = active.as_ref().map(|w| from_warm(w, &t));
        let mut sol = solver.solve(&t.qp, warm_set.as_deref());
        if sol.status == QpStatus::MaxIterations && warm_set.is_some() {
            sol = solver.solve(&t.qp, None);
        }
        qp_iterations += sol.iterations;
        match sol.status {
            QpStatus::Infeasible => return Err(Error::QpInfeasible),
            QpStatus::Optimal => *active = Some(to_warm(&sol.active_set, &t)),
            QpStatus::MaxIterations | QpStatus::Degenerate => {
                log::debug!("QP ended with {:?} (kkt {:e}); cold active set next time", sol.status, sol.kkt_residual);
                *active = None;
            }
        }
        if sol.primal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("QP returned a non-finite step".into()));
        }
        let mut step_norm = 0.0f64;
        for (k, u) in current.inputs.iter_mut().enumerate() {
            let v = u.to_vector();
            let next = InputVector::from_fn(|i, _| (v[i] + sol.primal[k * INPUT_DIM + i]).clamp(lo[i], hi[i]));
            step_norm = step_norm.max((next - v).amax());
            *u = ControlInput::from_vector(&next);
        }
        kkt = if sol.status == QpStatus::Optimal {
            step_norm
        } else {
            step_norm.max(sol.kkt_residual)
        };
    }

    let states = rollout(x0, &current.inputs, model, config.dt)?;
    let total_cost = trajectory_cost(&states, &current.inputs, refs, obstacles, cam, config);
    let violation = constraint_violation(&states, obstacles, config);
    Ok(TrajectorySolution {
        states,
        inputs: current.inputs,
        total_cost,
        kkt_residual: kkt,
        constraint_violation: violation,
        solve_time: start.elapsed().as_secs_f64(),
        qp_iterations,
        depth_clamped,
    })
}

/// Output of one control tick.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub input: ControlInput,
    pub solution: TrajectorySolution,
    /// The solve diverged and `u_ref` was applied instead.
    pub fallback: bool,
}

/// Receding-horizon controller: owns the warm start and the QP working set.
pub struct Nmpc<M: PredictionModel> {
    pub config: OcpConfig,
    pub camera: CameraModel,
    pub model: M,
    shifter: Shifter,
    prev: Option<TrajectorySolution>,
    active: Option<Vec<WarmConstraint>>,
}

impl<M: PredictionModel> Nmpc<M> {
    /// `tick_dt` is the control period (e.g. 0.01 s at 100 Hz).
    pub fn new(config: OcpConfig, camera: CameraModel, model: M, tick_dt: f64) -> Result<Self> {
        config.validate()?;
        camera.validate()?;
        if !(tick_dt > 0.0) {
            return Err(Error::InvalidConfig("control period must be positive".into()));
        }
        let shifter = Shifter::new(&config, tick_dt);
        Ok(Self {
            config,
            camera,
            model,
            shifter,
            prev: None,
            active: None,
        })
    }

    /// The latest solution, if any tick has run.
    pub fn solution(&self) -> Option<&TrajectorySolution> {
        self.prev.as_ref()
    }

    /// Drops the warm start.
    pub fn reset(&mut self) {
        self.prev = None;
        self.active = None;
        self.shifter.reset();
    }

    /// Warm start used by the next tick (without advancing the tick counter).
    pub fn peek_warm_start(&self, x: &UavState, refs: &References) -> TrajectorySolution {
        self.prev.clone().unwrap_or_else(|| cold_start(x, refs, &self.config))
    }

    /// Solves from the measured state and returns the first input.
    pub fn receding_horizon_step(
        &mut self,
        x_measured: &UavState,
        refs: &References,
        obstacles: &[Obstacle],
    ) -> Result<StepOutput> {
        let warm = match &self.prev {
            None => {
                self.shifter.reset();
                cold_start(x_measured, refs, &self.config)
            }
            Some(prev) => {
                let (warm, shifted) = self.shifter.advance(prev, &self.config);
                if shifted {
                    self.active = self.active.as_deref().map(shift_warm);
                }
                warm
            }
        };
        match sqp_solve_warm(
            x_measured,
            refs,
            obstacles,
            &self.camera,
            &self.config,
            &self.model,
            &warm,
            &mut self.active,
        ) {
            Ok(solution) => {
                let input = solution.inputs[0];
                self.prev = Some(solution.clone());
                Ok(StepOutput {
                    input,
                    solution,
                    fallback: false,
                })
            }
            Err(Error::Divergence(msg)) => {
                log::warn!("solver diverged ({msg}); applying the hover reference");
                let solution = cold_start(x_measured, refs, &self.config);
                self.prev = None;
                self.active = None;
                Ok(StepOutput {
                    input: refs.u_ref,
                    solution,
                    fallback: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}
