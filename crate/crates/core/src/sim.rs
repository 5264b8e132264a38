//! Closed-loop simulation: plant integration, noisy obstacle sensing,
//! dynamic-obstacle spawning and episode logging.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_step, ControlInput, ModelParams, QuadrotorModel, UavState};
use crate::error::{Error, Result};
use crate::experiments::{phase_label, Phase, TickContext};
use crate::obstacles::{min_distance_residual, physical_weight, predict_obstacle, Obstacle};
use crate::ocp::{Nmpc, OcpConfig, References, TrajectorySolution};
use crate::perception::{project_clamped, target_in_camera, CameraModel, TargetPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Control loop frequency in Hz.
    pub control_rate: f64,
    /// RK4 sub-steps of the plant per control tick.
    pub plant_substeps: usize,
    /// Standard deviation of the obstacle position noise, meters.
    pub obs_noise_sigma: f64,
    pub seed: u64,
    /// Model used by the controller, and by the plant unless overridden.
    pub params: ModelParams,
    /// Plant parameters differing from the controller's model.
    pub plant_mismatch: Option<ModelParams>,
    pub camera: CameraModel,
    pub success_radius: f64,
    pub success_speed: f64,
    pub success_hold: f64,
    pub timeout: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_rate: 100.0,
            plant_substeps: 10,
            obs_noise_sigma: 0.02,
            seed: 0,
            params: ModelParams::default(),
            plant_mismatch: None,
            camera: CameraModel::default(),
            success_radius: 0.15,
            success_speed: 0.1,
            success_hold: 0.5,
            timeout: 30.0,
        }
    }
}

impl SimConfig {
    pub fn tick_dt(&self) -> f64 {
        1.0 / self.control_rate
    }

    pub fn plant_params(&self) -> &ModelParams {
        self.plant_mismatch.as_ref().unwrap_or(&self.params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control_rate > 0.0) || self.plant_substeps == 0 {
            return Err(Error::InvalidConfig("control rate and plant sub-steps must be positive".into()));
        }
        if !(self.obs_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("observation noise must be non-negative".into()));
        }
        if !(self.success_radius > 0.0 && self.success_speed > 0.0 && self.success_hold >= 0.0 && self.timeout > 0.0) {
            return Err(Error::InvalidConfig("termination thresholds must be positive".into()));
        }
        self.params.validate()?;
        if let Some(p) = &self.plant_mismatch {
            p.validate()?;
        }
        self.camera.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpawnPlacement {
    /// Sampled among the controller's planned nodes `x_2 .. x_{N-1}`.
    #[default]
    OnPlannedTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicObstacleSpec {
    /// Size, uncertainty and `d_min`; position and velocity are set at spawn.
    pub base: Obstacle,
    /// Seconds between the spawn and the controller seeing the obstacle.
    pub spawn_delay: f64,
    /// Speed in m/s, horizontal direction sampled at spawn.
    pub spawn_velocity: f64,
    #[serde(default)]
    pub spawn_placement: SpawnPlacement,
    /// Episode time at which the obstacle appears in the world.
    #[serde(default)]
    pub trigger_time: f64,
}

impl DynamicObstacleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.spawn_delay >= 0.0 && self.spawn_velocity >= 0.0 && self.trigger_time >= 0.0) {
            return Err(Error::InvalidConfig("spawn delay, velocity and trigger time must be non-negative".into()));
        }
        if !self.base.is_valid() {
            return Err(Error::InvalidConfig("dynamic obstacle base is invalid".into()));
        }
        Ok(())
    }
}

/// One goal-reaching flight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub start: UavState,
    pub goal: Vector3<f64>,
    pub goal_yaw: f64,
    pub target: TargetPoint,
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub dynamic: Option<DynamicObstacleSpec>,
}

impl Scenario {
    pub fn references(&self, params: &ModelParams) -> References {
        References {
            x_ref: UavState::at_rest(self.goal, self.goal_yaw),
            u_ref: ControlInput::hover(params),
            target: self.target,
        }
    }
}

/// `plant_substeps` RK4 steps covering one control period with `u` held.
pub fn step_plant(x: &UavState, u: &ControlInput, params: &ModelParams, cfg: &SimConfig) -> Result<UavState> {
    let h = cfg.tick_dt() / cfg.plant_substeps as f64;
    let mut state = *x;
    for _ in 0..cfg.plant_substeps {
        state = integrate_step(&state, u, params, h)?;
    }
    Ok(state)
}

/// Adds per-axis Gaussian position noise and raises each uncertainty to at least `sigma`.
pub fn observe_obstacles<R: Rng + ?Sized>(true_obstacles: &[Obstacle], cfg: &SimConfig, rng: &mut R) -> Vec<Obstacle> {
    let sigma = cfg.obs_noise_sigma;
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
    true_obstacles
        .iter()
        .map(|o| {
            let mut seen = *o;
            if let Some(n) = &noise {
                seen.position += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            }
            seen.uncertainty = o.uncertainty.map(|e| e.max(sigma));
            seen
        })
        .collect()
}

/// Places a dynamic obstacle on a planned node with a random horizontal heading.
pub fn spawn_dynamic<R: Rng + ?Sized>(
    spec: &DynamicObstacleSpec,
    planned: &TrajectorySolution,
    _t_now: f64,
    rng: &mut R,
) -> Obstacle {
    let n = planned.states.len() - 1;
    let node = if n >= 3 { rng.random_range(2..n) } else { n };
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    Obstacle {
        position: planned.states[node].position,
        velocity: Vector3::new(heading.cos(), heading.sin(), 0.0) * spec.spawn_velocity,
        ..spec.base
    }
}

/// Spawn and visibility bookkeeping in whole control ticks.
#[derive(Clone, Debug)]
pub struct DynamicSpawner {
    spec: DynamicObstacleSpec,
    spawn_tick: u64,
    visible_tick: u64,
    spawned: Option<Obstacle>,
}

impl DynamicSpawner {
    pub fn new(spec: DynamicObstacleSpec, tick_dt: f64) -> Self {
        let spawn_tick = (spec.trigger_time / tick_dt).round() as u64;
        let visible_tick = spawn_tick + (spec.spawn_delay / tick_dt).round() as u64;
        Self {
            spec,
            spawn_tick,
            visible_tick,
            spawned: None,
        }
    }

    pub fn spawn_tick(&self) -> u64 {
        self.spawn_tick
    }

    pub fn visible_tick(&self) -> u64 {
        self.visible_tick
    }

    /// Spawns on the given plan when the trigger tick is reached.
    pub fn update<R: Rng + ?Sized>(&mut self, tick: u64, tick_dt: f64, planned: &TrajectorySolution, rng: &mut R) {
        if self.spawned.is_none() && tick >= self.spawn_tick {
            self.spawned = Some(spawn_dynamic(&self.spec, planned, tick as f64 * tick_dt, rng));
        }
    }

    /// True obstacle at `tick`, once spawned.
    pub fn current(&self, tick: u64, tick_dt: f64) -> Option<Obstacle> {
        self.spawned
            .map(|o| predict_obstacle(&o, tick.saturating_sub(self.spawn_tick) as f64 * tick_dt))
    }

    pub fn is_visible(&self, tick: u64) -> bool {
        self.spawned.is_some() && tick >= self.visible_tick
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
    Divergence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub state: UavState,
    pub input: ControlInput,
    pub s_u: f64,
    pub s_v: f64,
    pub target_depth: f64,
    /// Smallest physical weighted distance `d W_gamma d` over all true obstacles.
    pub min_obs_dist: Option<f64>,
    /// Physical weighted distance to the dynamic obstacle, once spawned.
    pub dyn_obs_dist: Option<f64>,
    pub goal_dist: f64,
    pub solve_time: f64,
    pub kkt: f64,
    pub phase: Phase,
    /// Smallest inflated minimum-distance residual over all true obstacles.
    pub min_residual: Option<f64>,
    pub depth_clamped: bool,
}

impl TickRecord {
    pub fn pixel_error(&self) -> f64 {
        self.s_u.hypot(self.s_v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario_id: u64,
    pub records: Vec<TickRecord>,
    pub outcome: Outcome,
    pub time_to_goal: Option<f64>,
    /// Ticks where the solver diverged and the hover input was applied.
    pub fallback_ticks: usize,
}

/// Flat CSV row in the documented column order.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
    thrust: f64,
    roll_cmd: f64,
    pitch_cmd: f64,
    yaw_rate_cmd: f64,
    s_u: f64,
    s_v: f64,
    target_depth: f64,
    min_obs_dist: Option<f64>,
    dyn_obs_dist: Option<f64>,
    goal_dist: f64,
    solve_time: f64,
    kkt: f64,
    phase: Phase,
    min_residual: Option<f64>,
    depth_clamped: bool,
}

impl From<&TickRecord> for CsvRow {
    fn from(r: &TickRecord) -> Self {
        let (p, v) = (r.state.position, r.state.velocity);
        Self {
            t: r.t,
            px: p.x,
            py: p.y,
            pz: p.z,
            vx: v.x,
            vy: v.y,
            vz: v.z,
            roll: r.state.roll,
            pitch: r.state.pitch,
            yaw: r.state.yaw,
            thrust: r.input.thrust,
            roll_cmd: r.input.roll_cmd,
            pitch_cmd: r.input.pitch_cmd,
            yaw_rate_cmd: r.input.yaw_rate_cmd,
            s_u: r.s_u,
            s_v: r.s_v,
            target_depth: r.target_depth,
            min_obs_dist: r.min_obs_dist,
            dyn_obs_dist: r.dyn_obs_dist,
            goal_dist: r.goal_dist,
            solve_time: r.solve_time,
            kkt: r.kkt,
            phase: r.phase,
            min_residual: r.min_residual,
            depth_clamped: r.depth_clamped,
        }
    }
}

impl From<CsvRow> for TickRecord {
    fn from(r: CsvRow) -> Self {
        Self {
            t: r.t,
            state: UavState {
                position: Vector3::new(r.px, r.py, r.pz),
                velocity: Vector3::new(r.vx, r.vy, r.vz),
                roll: r.roll,
                pitch: r.pitch,
                yaw: r.yaw,
            },
            input: ControlInput::new(r.thrust, r.roll_cmd, r.pitch_cmd, r.yaw_rate_cmd),
            s_u: r.s_u,
            s_v: r.s_v,
            target_depth: r.target_depth,
            min_obs_dist: r.min_obs_dist,
            dyn_obs_dist: r.dyn_obs_dist,
            goal_dist: r.goal_dist,
            solve_time: r.solve_time,
            kkt: r.kkt,
            phase: r.phase,
            min_residual: r.min_residual,
            depth_clamped: r.depth_clamped,
        }
    }
}

impl EpisodeLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(CsvRow::from(r))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_records<R: Read>(r: R) -> Result<Vec<TickRecord>> {
        let mut rdr = csv::Reader::from_reader(r);
        rdr.deserialize::<CsvRow>()
            .map(|row| Ok(TickRecord::from(row?)))
            .collect()
    }

    /// Rebuilds a log from stored records, re-deriving the outcome.
    pub fn from_records(scenario_id: u64, records: Vec<TickRecord>, cfg: &SimConfig) -> Self {
        let (outcome, time_to_goal) = classify(&records, cfg);
        Self {
            scenario_id,
            records,
            outcome,
            time_to_goal,
            fallback_ticks: 0,
        }
    }

    /// Compares everything except wall-clock solve times.
    pub fn same_trajectory(&self, other: &EpisodeLog) -> bool {
        let strip = |l: &EpisodeLog| {
            let mut c = l.clone();
            c.records.iter_mut().for_each(|r| r.solve_time = 0.0);
            c
        };
        strip(self) == strip(other)
    }
}

/// Outcome implied by a sequence of records: collision on any physical
/// penetration, success once the goal condition has held long enough,
/// timeout when the log reaches the time limit, divergence otherwise.
pub fn classify(records: &[TickRecord], cfg: &SimConfig) -> (Outcome, Option<f64>) {
    let mut hold_start: Option<f64> = None;
    for r in records {
        if r.min_obs_dist.is_some_and(|d| d < 1.0) {
            return (Outcome::Collision, None);
        }
        if r.goal_dist <= cfg.success_radius && r.state.velocity.norm() <= cfg.success_speed {
            let start = *hold_start.get_or_insert(r.t);
            if r.t - start >= cfg.success_hold - 1e-9 {
                return (Outcome::Success, Some(start));
            }
        } else {
            hold_start = None;
        }
    }
    match records.last() {
        Some(r) if r.t + cfg.tick_dt() >= cfg.timeout - 1e-9 => (Outcome::Timeout, None),
        _ => (Outcome::Divergence, None),
    }
}

/// Independent RNG streams per episode, shared across campaign conditions.
pub fn episode_rngs(seed: u64, scenario_id: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * scenario_id);
    let mut spawn = ChaCha8Rng::seed_from_u64(seed);
    spawn.set_stream(2 * scenario_id + 1);
    (noise, spawn)
}

/// Flies one scenario in closed loop.
pub fn run_episode(scenario: &Scenario, ocp_config: &OcpConfig, sim_config: &SimConfig) -> Result<EpisodeLog> {
    sim_config.validate()?;
    if let Some(spec) = &scenario.dynamic {
        spec.validate()?;
    }
    let dt = sim_config.tick_dt();
    let camera = sim_config.camera;
    let refs = scenario.references(&sim_config.params);
    let mut nmpc = Nmpc::new(
        ocp_config.clone(),
        camera,
        QuadrotorModel::new(sim_config.params),
        dt,
    )?;
    let (mut noise_rng, mut spawn_rng) = episode_rngs(sim_config.seed, scenario.id);
    let mut spawner = scenario.dynamic.map(|spec| DynamicSpawner::new(spec, dt));
    let max_ticks = (sim_config.timeout / dt).round() as u64;
    let plant = *sim_config.plant_params();

    let mut x = scenario.start;
    let mut records = Vec::new();
    let mut fallback_ticks = 0;
    let mut hold_start: Option<f64> = None;
    let mut outcome = Outcome::Timeout;
    let mut time_to_goal = None;

    for tick in 0..max_ticks {
        let t = tick as f64 * dt;

        let mut visible: Vec<Obstacle> = scenario.obstacles.clone();
        let mut since_change = None;
        if let Some(sp) = &spawner {
            if sp.is_visible(tick) {
                visible.extend(sp.current(tick, dt));
                since_change = Some((tick - sp.visible_tick()) as f64 * dt);
            }
        }
        let observed = observe_obstacles(&visible, sim_config, &mut noise_rng);
        let out = nmpc.receding_horizon_step(&x, &refs, &observed)?;
        if out.fallback {
            fallback_ticks += 1;
        }
        if let Some(sp) = spawner.as_mut() {
            sp.update(tick, dt, &out.solution, &mut spawn_rng);
        }

        // metrics against the true world
        let mut truth: Vec<Obstacle> = scenario.obstacles.clone();
        let dynamic_now = spawner.as_ref().and_then(|sp| sp.current(tick, dt));
        truth.extend(dynamic_now);
        let physical = |o: &Obstacle| {
            let d = x.position - o.position;
            d.dot(&(physical_weight(o) * d))
        };
        let min_obs_dist = truth.iter().map(physical).reduce(f64::min);
        let min_residual = truth
            .iter()
            .map(|o| min_distance_residual(&x.position, o, &ocp_config.shaping))
            .reduce(f64::min);
        let p_cl = target_in_camera(&x, &camera, &scenario.target);
        let (s, clamped) = project_clamped(&p_cl, &camera);
        let goal_dist = (x.position - scenario.goal).norm();
        let phase = phase_label(&TickContext {
            since_goal: t,
            since_obstacle_change: since_change,
        });
        records.push(TickRecord {
            t,
            state: x,
            input: out.input,
            s_u: s.u,
            s_v: s.v,
            target_depth: p_cl.z,
            min_obs_dist,
            dyn_obs_dist: dynamic_now.as_ref().map(physical),
            goal_dist,
            solve_time: out.solution.solve_time,
            kkt: out.solution.kkt_residual,
            phase,
            min_residual,
            depth_clamped: clamped,
        });

        if min_obs_dist.is_some_and(|d| d < 1.0) {
            outcome = Outcome::Collision;
            break;
        }
        if goal_dist <= sim_config.success_radius && x.velocity.norm() <= sim_config.success_speed {
            let start = *hold_start.get_or_insert(t);
            if t - start >= sim_config.success_hold - 1e-9 {
                outcome = Outcome::Success;
                time_to_goal = Some(start);
                break;
            }
        } else {
            hold_start = None;
        }

        match step_plant(&x, &out.input, &plant, sim_config) {
            Ok(next) if next.within_envelope() => x = next,
            _ => {
                outcome = Outcome::Divergence;
                break;
            }
        }
    }

    Ok(EpisodeLog {
        scenario_id: scenario.id,
        records,
        outcome,
        time_to_goal,
        fallback_ticks,
    })
}
