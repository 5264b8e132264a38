//! Scenario generation, campaigns over spawning conditions and metric aggregation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::UavState;
use crate::error::{Error, Result};
use crate::obstacles::{has_clearance, Obstacle, ShapingGains};
use crate::ocp::OcpConfig;
use crate::perception::TargetPoint;
use crate::sim::{run_episode, DynamicObstacleSpec, EpisodeLog, Outcome, Scenario, SimConfig, SpawnPlacement};

/// Length of the planning and emergency windows, seconds.
pub const PHASE_WINDOW: f64 = 0.5;
/// Rejections allowed per scenario before giving up.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "planning")]
    Planning,
    #[serde(rename = "steady-planning")]
    Steady,
    #[serde(rename = "emergency-replanning")]
    Emergency,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Steady, Phase::Planning, Phase::Emergency];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::Planning => "planning",
            Phase::Steady => "steady-planning",
            Phase::Emergency => "emergency-replanning",
        }
    }
}

/// Time since the goal was set and since a dynamic obstacle entered the controller's list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TickContext {
    pub since_goal: f64,
    pub since_obstacle_change: Option<f64>,
}

pub fn phase_label(ctx: &TickContext) -> Phase {
    let within = |s: f64| (0.0..PHASE_WINDOW - 1e-9).contains(&s);
    if ctx.since_obstacle_change.is_some_and(within) {
        Phase::Emergency
    } else if within(ctx.since_goal) {
        Phase::Planning
    } else {
        Phase::Steady
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Number of scenarios `M` per condition.
    pub episodes: usize,
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
    pub n_static: usize,
    /// Static obstacles placed near the start-goal segment (out of `n_static`).
    pub n_on_path: usize,
    /// Largest lateral offset of on-path obstacles from the segment, meters.
    pub on_path_offset: f64,
    pub static_size_min: f64,
    pub static_size_max: f64,
    pub target: Vector3<f64>,
    /// Clearance of start and goal from every inflated ellipsoid, meters.
    pub clearance: f64,
    pub min_travel: f64,
    /// Inflation used for the clearance test.
    pub shaping: ShapingGains,
    /// Shape of the dynamic obstacle; position and velocity are set at spawn.
    pub dynamic_base: Obstacle,
    /// Episode time at which the dynamic obstacle enters the world.
    pub trigger_time: f64,
    pub delays: Vec<f64>,
    pub velocities: Vec<f64>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            workspace_min: Vector3::new(-4.0, -4.0, 0.5),
            workspace_max: Vector3::new(4.0, 4.0, 3.5),
            n_static: 3,
            n_on_path: 1,
            on_path_offset: 0.6,
            static_size_min: 0.2,
            static_size_max: 0.5,
            target: Vector3::new(7.0, 0.0, 2.0),
            clearance: 1.0,
            min_travel: 3.0,
            shaping: ShapingGains::default(),
            dynamic_base: Obstacle::fixed(Vector3::zeros(), Vector3::new(0.15, 0.15, 0.15)),
            trigger_time: 1.0,
            delays: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            velocities: vec![0.4],
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if (0..3).any(|i| !(self.workspace_min[i] < self.workspace_max[i])) {
            return bad("workspace must be a nonempty box");
        }
        if self.n_on_path > self.n_static {
            return bad("n_on_path cannot exceed n_static");
        }
        if !(0.0 < self.static_size_min && self.static_size_min <= self.static_size_max) {
            return bad("static size range must be positive and ordered");
        }
        if self.clearance < 0.0 || self.min_travel < 0.0 || self.on_path_offset < 0.0 {
            return bad("clearance, travel and offset must be non-negative");
        }
        if !self.dynamic_base.is_valid() {
            return bad("dynamic obstacle shape is invalid");
        }
        if self.delays.iter().chain(&self.velocities).any(|v| !(*v >= 0.0)) {
            return bad("delays and velocities must be non-negative");
        }
        Ok(())
    }

    /// Spawn specification for one condition.
    pub fn dynamic_spec(&self, delay: f64, velocity: f64) -> DynamicObstacleSpec {
        DynamicObstacleSpec {
            base: self.dynamic_base,
            spawn_delay: delay,
            spawn_velocity: velocity,
            spawn_placement: SpawnPlacement::OnPlannedTrajectory,
            trigger_time: self.trigger_time,
        }
    }

    /// The static condition followed by every delay/velocity pair.
    pub fn default_conditions(&self) -> Vec<Condition> {
        let mut out = vec![Condition::Static];
        for &velocity in &self.velocities {
            for &delay in &self.delays {
                out.push(Condition::Dynamic { delay, velocity });
            }
        }
        out
    }
}

fn yaw_towards(from: &Vector3<f64>, to: &Vector3<f64>) -> f64 {
    let d = to - from;
    d.y.atan2(d.x)
}

fn sample_in_box<R: Rng + ?Sized>(rng: &mut R, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Vector3<f64> {
    Vector3::from_fn(|i, _| rng.random_range(lo[i]..=hi[i]))
}

/// `M` random scenarios; start and goal keep `clearance` meters from every inflated obstacle.
pub fn generate_scenarios<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Vec<Scenario>> {
    cfg.validate()?;
    let (lo, hi) = (cfg.workspace_min, cfg.workspace_max);
    let mut out = Vec::with_capacity(cfg.episodes);
    for id in 0..cfg.episodes as u64 {
        let mut rejections = 0;
        let scenario = loop {
            let start = sample_in_box(rng, &lo, &hi);
            let goal = sample_in_box(rng, &lo, &hi);
            let obstacles: Vec<Obstacle> = (0..cfg.n_static)
                .map(|i| {
                    let size = Vector3::from_fn(|_, _| rng.random_range(cfg.static_size_min..=cfg.static_size_max));
                    let position = if i < cfg.n_on_path {
                        let along = start + (goal - start) * rng.random_range(0.35..=0.65);
                        let offset = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0)) * cfg.on_path_offset;
                        along + offset
                    } else {
                        sample_in_box(rng, &lo, &hi)
                    };
                    Obstacle::fixed(position, size)
                })
                .collect();
            let clear = |p: &Vector3<f64>| obstacles.iter().all(|o| has_clearance(p, o, &cfg.shaping, cfg.clearance));
            if (goal - start).norm() >= cfg.min_travel && clear(&start) && clear(&goal) {
                break Scenario {
                    id,
                    start: UavState::at_rest(start, yaw_towards(&start, &cfg.target)),
                    goal,
                    goal_yaw: yaw_towards(&goal, &cfg.target),
                    target: TargetPoint::new(cfg.target),
                    obstacles,
                    dynamic: None,
                };
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::SamplingExhausted(rejections));
            }
        };
        out.push(scenario);
    }
    Ok(out)
}

/// A campaign condition: static obstacles only, or with one spawned dynamic obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Static,
    Dynamic { delay: f64, velocity: f64 },
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Static => write!(f, "static"),
            Condition::Dynamic { delay, velocity } => write!(f, "delay{delay}_vel{velocity}"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// `static` or `delay:velocity`, e.g. `0.4:0.2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("static") {
            return Ok(Condition::Static);
        }
        let bad = || Error::InvalidConfig(format!("condition `{s}` is not `static` or `delay:velocity`"));
        let (d, v) = s.split_once(':').ok_or_else(bad)?;
        let delay: f64 = d.trim().parse().map_err(|_| bad())?;
        let velocity: f64 = v.trim().parse().map_err(|_| bad())?;
        if !(delay >= 0.0 && velocity >= 0.0) {
            return Err(bad());
        }
        Ok(Condition::Dynamic { delay, velocity })
    }
}

/// Parses a comma-separated condition list.
pub fn parse_conditions(s: &str) -> Result<Vec<Condition>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// Mean and variance of solve times for one phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub ticks: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Aggregates of one condition. Wall-clock timing is kept out of the
/// serialized form so reports are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub delay: Option<f64>,
    pub velocity: Option<f64>,
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub divergences: usize,
    /// Percent of episodes that did not succeed.
    pub failure_rate: f64,
    /// Over all ticks of successful episodes, pixels.
    pub avg_pixel_error: Option<f64>,
    pub max_pixel_error: Option<f64>,
    /// Mean thrust in units of g, successful episodes.
    pub mean_thrust_g: Option<f64>,
    /// Mean `|(roll_cmd, pitch_cmd)|`, radians, successful episodes.
    pub mean_attitude_cmd: Option<f64>,
    /// Smallest inflated minimum-distance residual seen in a successful episode.
    pub min_residual_success: Option<f64>,
    /// Pearson correlation of pixel error and goal distance over ticks of successful episodes.
    pub pixel_goal_correlation: Option<f64>,
    pub phase_ticks: Vec<(Phase, usize)>,
    pub fallback_ticks: usize,
    #[serde(skip)]
    pub timing: Vec<(Phase, PhaseTiming)>,
}

impl ConditionReport {
    pub fn timing_of(&self, phase: Phase) -> PhaseTiming {
        self.timing
            .iter()
            .find(|(p, _)| *p == phase)
            .map(|(_, t)| *t)
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub episodes_per_condition: usize,
    pub rows: Vec<ConditionReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Pearson correlation coefficient; `None` for fewer than two points or zero spread.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Folds episode logs into one report row. Logs are processed in scenario order.
pub fn aggregate(logs: &[EpisodeLog], gravity: f64) -> ConditionReport {
    let mut sorted: Vec<&EpisodeLog> = logs.iter().collect();
    sorted.sort_by_key(|l| l.scenario_id);
    let count = |o: Outcome| sorted.iter().filter(|l| l.outcome == o).count();
    let successes = count(Outcome::Success);
    let episodes = sorted.len();
    let good: Vec<&EpisodeLog> = sorted.iter().copied().filter(|l| l.outcome == Outcome::Success).collect();
    let ticks = || good.iter().flat_map(|l| l.records.iter());

    let pixel: Vec<f64> = ticks().map(|r| r.pixel_error()).collect();
    let goal: Vec<f64> = ticks().map(|r| r.goal_dist).collect();

    let mut phase_ticks = Vec::new();
    let mut timing = Vec::new();
    for phase in Phase::ALL {
        let times: Vec<f64> = sorted
            .iter()
            .flat_map(|l| l.records.iter())
            .filter(|r| r.phase == phase)
            .map(|r| r.solve_time)
            .collect();
        phase_ticks.push((phase, times.len()));
        let m = mean(times.iter().copied()).unwrap_or(0.0);
        let var = mean(times.iter().map(|t| (t - m) * (t - m))).unwrap_or(0.0);
        timing.push((
            phase,
            PhaseTiming {
                ticks: times.len(),
                mean: m,
                variance: var,
            },
        ));
    }

    ConditionReport {
        condition: String::new(),
        delay: None,
        velocity: None,
        episodes,
        successes,
        collisions: count(Outcome::Collision),
        timeouts: count(Outcome::Timeout),
        divergences: count(Outcome::Divergence),
        failure_rate: if episodes == 0 {
            0.0
        } else {
            100.0 * (episodes - successes) as f64 / episodes as f64
        },
        avg_pixel_error: mean(pixel.iter().copied()),
        max_pixel_error: pixel.iter().copied().reduce(f64::max),
        mean_thrust_g: mean(ticks().map(|r| r.input.thrust.abs() / gravity)),
        mean_attitude_cmd: mean(ticks().map(|r| r.input.roll_cmd.hypot(r.input.pitch_cmd))),
        min_residual_success: ticks().filter_map(|r| r.min_residual).reduce(f64::min),
        pixel_goal_correlation: pearson(&pixel, &goal),
        phase_ticks,
        fallback_ticks: sorted.iter().map(|l| l.fallback_ticks).sum(),
        timing,
    }
}

/// Logs of one condition, in scenario order.
#[derive(Clone, Debug)]
pub struct ConditionRun {
    pub condition: Condition,
    pub logs: Vec<EpisodeLog>,
}

#[derive(Clone, Debug)]
pub struct CampaignRun {
    pub report: CampaignReport,
    pub runs: Vec<ConditionRun>,
}

/// Runs every scenario under every condition on a pool of `workers` threads
/// (all available cores when `None`).
pub fn run_campaign(
    scenario_cfg: &ScenarioConfig,
    ocp_cfg: &OcpConfig,
    sim_cfg: &SimConfig,
    conditions: &[Condition],
    workers: Option<usize>,
) -> Result<CampaignRun> {
    ocp_cfg.validate()?;
    sim_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_cfg.seed);
    let scenarios = generate_scenarios(scenario_cfg, &mut rng)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    let mut rows = Vec::with_capacity(conditions.len());
    let mut runs = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        let dynamic = match condition {
            Condition::Static => None,
            Condition::Dynamic { delay, velocity } => Some(scenario_cfg.dynamic_spec(delay, velocity)),
        };
        let logs: Vec<EpisodeLog> = pool.install(|| {
            scenarios
                .par_iter()
                .map(|s| {
                    let scenario = Scenario { dynamic, ..s.clone() };
                    run_episode(&scenario, ocp_cfg, sim_cfg)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut row = aggregate(&logs, sim_cfg.params.gravity);
        row.condition = condition.to_string();
        if let Condition::Dynamic { delay, velocity } = condition {
            row.delay = Some(delay);
            row.velocity = Some(velocity);
        }
        log::info!("{}: failure rate {:.1}%", row.condition, row.failure_rate);
        rows.push(row);
        runs.push(ConditionRun { condition, logs });
    }
    Ok(CampaignRun {
        report: CampaignReport {
            seed: scenario_cfg.seed,
            episodes_per_condition: scenarios.len(),
            rows,
        },
        runs,
    })
}

/// Per-episode JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scenario_id: u64,
    pub outcome: Outcome,
    pub time_to_goal: Option<f64>,
    pub ticks: usize,
    pub avg_pixel_error: Option<f64>,
    pub max_pixel_error: Option<f64>,
    pub min_obs_dist: Option<f64>,
    pub min_residual: Option<f64>,
    pub mean_solve_time: Option<f64>,
    pub max_kkt: Option<f64>,
    pub fallback_ticks: usize,
}

pub fn summarize(log: &EpisodeLog) -> EpisodeSummary {
    let r = &log.records;
    EpisodeSummary {
        scenario_id: log.scenario_id,
        outcome: log.outcome,
        time_to_goal: log.time_to_goal,
        ticks: r.len(),
        avg_pixel_error: mean(r.iter().map(|x| x.pixel_error())),
        max_pixel_error: r.iter().map(|x| x.pixel_error()).reduce(f64::max),
        min_obs_dist: r.iter().filter_map(|x| x.min_obs_dist).reduce(f64::min),
        min_residual: r.iter().filter_map(|x| x.min_residual).reduce(f64::min),
        mean_solve_time: mean(r.iter().map(|x| x.solve_time)),
        max_kkt: r.iter().map(|x| x.kkt).reduce(f64::max),
        fallback_ticks: log.fallback_ticks,
    }
}

fn timing_json(report: &CampaignReport) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = report
        .rows
        .iter()
        .map(|row| {
            let phases: serde_json::Map<String, serde_json::Value> = row
                .timing
                .iter()
                .map(|(p, t)| (p.name().to_string(), serde_json::to_value(t).expect("plain struct")))
                .collect();
            serde_json::json!({ "condition": row.condition, "phases": phases })
        })
        .collect();
    serde_json::Value::Array(rows)
}

/// Writes `report.json`, `timing.json`, per-episode CSV/JSON and plot-ready series under `dir`.
pub fn write_campaign(run: &CampaignRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("episodes"))?;
    fs::create_dir_all(dir.join("plots"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&run.report)? + "\n")?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing_json(&run.report))? + "\n")?;

    let mut timing = csv::Writer::from_path(dir.join("plots").join("phase_timing.csv"))?;
    timing.write_record(["condition", "episode", "t", "phase", "solve_time"])?;
    for cr in &run.runs {
        let label = cr.condition.to_string();
        let edir = dir.join("episodes").join(&label);
        fs::create_dir_all(&edir)?;
        let mut series = csv::Writer::from_path(dir.join("plots").join(format!("pixel_error_{label}.csv")))?;
        series.write_record([
            "episode",
            "outcome",
            "t",
            "pixel_error",
            "target_depth",
            "min_obs_dist",
            "goal_dist",
        ])?;
        for log in &cr.logs {
            let id = log.scenario_id;
            log.write_csv(fs::File::create(edir.join(format!("episode_{id:04}.csv")))?)?;
            fs::write(
                edir.join(format!("episode_{id:04}.json")),
                serde_json::to_string_pretty(&summarize(log))? + "\n",
            )?;
            let outcome = serde_json::to_value(log.outcome)?;
            let outcome = outcome.as_str().unwrap_or_default();
            for r in &log.records {
                series.write_record([
                    id.to_string(),
                    outcome.to_string(),
                    r.t.to_string(),
                    r.pixel_error().to_string(),
                    r.target_depth.to_string(),
                    r.min_obs_dist.map(|d| d.to_string()).unwrap_or_default(),
                    r.goal_dist.to_string(),
                ])?;
                timing.write_record([
                    label.clone(),
                    id.to_string(),
                    r.t.to_string(),
                    r.phase.name().to_string(),
                    r.solve_time.to_string(),
                ])?;
            }
        }
        series.flush()?;
    }
    timing.flush()?;
    Ok(())
}
