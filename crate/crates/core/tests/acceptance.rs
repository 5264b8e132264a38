mod common;

use std::io::Write;
use std::time::Instant;

use common::{enumerate_qp, is_positive_definite, lq_oracle, random_qp, refs_at, stacked};
use nalgebra::Vector3;
use visnav_mpc::dynamics::{ControlInput, LinearizedModel, ModelParams, QuadrotorModel, UavState};
use visnav_mpc::experiments::{run_campaign, write_campaign, CampaignRun, Condition, Phase, ScenarioConfig};
use visnav_mpc::gradcheck::run_suites;
use visnav_mpc::ocp::{cold_start, sqp_solve, Nmpc, OcpConfig};
use visnav_mpc::perception::CameraModel;
use visnav_mpc::qp::{solve, QpStatus, KKT_TOLERANCE};
use visnav_mpc::sim::{step_plant, Outcome, SimConfig};

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let line = format!(
        "criterion {:>2} {:<28} {}  {}\n",
        v.id,
        v.name,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    // written past the test harness capture so the lines always show up
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// True when `rates` never drops, except for at most one adjacent pair that
/// drops by no more than `slack` percentage points.
fn non_decreasing_with_slack(rates: &[f64], slack: f64) -> bool {
    let drops: Vec<f64> = rates.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    drops.is_empty() || (drops.len() == 1 && drops[0] <= slack)
}

fn campaign(episodes: usize, conditions: &[Condition]) -> CampaignRun {
    let cfg = ScenarioConfig {
        episodes,
        ..ScenarioConfig::default()
    };
    run_campaign(&cfg, &OcpConfig::default(), &SimConfig::default(), conditions, None).expect("campaign runs")
}

fn static_campaign(run: &CampaignRun, elapsed: f64) -> Verdict {
    let row = &run.report.rows[0];
    let worst = run.runs[0]
        .logs
        .iter()
        .filter(|l| l.outcome == Outcome::Success)
        .flat_map(|l| l.records.iter().filter_map(|r| r.min_residual))
        .fold(f64::INFINITY, f64::min);
    Verdict {
        id: 1,
        name: "static campaign",
        pass: row.failure_rate <= 5.0 && worst >= -1e-3 && elapsed <= 300.0,
        detail: format!("failure {:.1}%, worst residual {worst:.3e}, {elapsed:.0} s", row.failure_rate),
    }
}

fn delay_sweep(run: &CampaignRun) -> Verdict {
    let rates: Vec<f64> = run.report.rows.iter().map(|r| r.failure_rate).collect();
    let pass = non_decreasing_with_slack(&rates, 2.0) && rates[rates.len() - 1] - rates[0] >= 5.0;
    Verdict {
        id: 2,
        name: "delay sweep trend",
        pass,
        detail: format!("failure by delay {rates:?}"),
    }
}

fn velocity_sweep(rates: &[f64]) -> Verdict {
    Verdict {
        id: 3,
        name: "velocity at delay 0.4 s",
        pass: non_decreasing_with_slack(rates, 2.0),
        detail: format!("failure by velocity 0.2/0.4/0.6: {rates:?}"),
    }
}

fn reprojection_correlation(run: &CampaignRun) -> Verdict {
    let r = run.report.rows[0].pixel_goal_correlation;
    Verdict {
        id: 4,
        name: "pixel error vs goal distance",
        pass: r.is_some_and(|r| r > 0.2),
        detail: format!("pearson r = {r:?}"),
    }
}

fn timing(runs: &[&CampaignRun]) -> Verdict {
    let config = OcpConfig::default();
    let rows: Vec<_> = runs.iter().flat_map(|r| r.report.rows.iter()).collect();
    let pooled = |phase: Phase| {
        let (ticks, total) = rows.iter().fold((0usize, 0.0), |(n, s), row| {
            let t = row.timing_of(phase);
            (n + t.ticks, s + t.mean * t.ticks as f64)
        });
        (ticks, if ticks == 0 { f64::NAN } else { total / ticks as f64 })
    };
    let (steady_n, steady) = pooled(Phase::Steady);
    let (planning_n, planning) = pooled(Phase::Planning);
    let (emergency_n, emergency) = pooled(Phase::Emergency);
    let all = (steady * steady_n as f64 + planning * planning_n as f64 + emergency * emergency_n as f64)
        / (steady_n + planning_n + emergency_n) as f64;
    let pass = config.num_intervals() == 10
        && config.sqp_iters == 1
        && all <= 0.010
        && steady <= planning
        && planning <= emergency;
    Verdict {
        id: 5,
        name: "solve time and phases",
        pass,
        detail: format!(
            "mean {:.3} ms; steady {:.3} / planning {:.3} / emergency {:.3} ms",
            all * 1e3,
            steady * 1e3,
            planning * 1e3,
            emergency * 1e3
        ),
    }
}

fn lq_equivalence() -> Verdict {
    let params = ModelParams::default();
    let config = OcpConfig {
        perception_weight: 0.0,
        ..OcpConfig::default()
    };
    let hover = UavState::at_rest(Vector3::new(0.0, 0.0, 2.0), 0.0);
    let model = LinearizedModel::at(&hover, &ControlInput::hover(&params), &params, config.dt);
    let mut worst = 0.0f64;
    for (goal, x0) in [
        (Vector3::new(0.3, -0.2, 2.1), hover),
        (Vector3::new(-0.2, 0.1, 1.8), UavState::at_rest(Vector3::new(0.1, 0.0, 2.0), 0.1)),
        (Vector3::new(0.0, 0.0, 2.0), UavState { velocity: Vector3::new(0.2, -0.1, 0.05), ..hover }),
    ] {
        let refs = refs_at(goal, Vector3::new(9.0, 0.0, 2.0));
        let sol = sqp_solve(&x0, &refs, &[], &CameraModel::default(), &config, &model, &cold_start(&x0, &refs, &config))
            .expect("solve");
        let oracle = lq_oracle(&model, &x0, &refs, &config);
        worst = worst.max((stacked(&sol.inputs) - &oracle).amax());
        // oracle states from the oracle inputs through the same linear model
        let mut x = x0.to_vector();
        for k in 0..sol.inputs.len() {
            let u = oracle.fixed_rows::<4>(4 * k).into_owned();
            x = model.next_bar + model.a * (x - model.x_bar) + model.b * (u - model.u_bar);
            worst = worst.max((sol.states[k + 1].to_vector() - x).amax());
        }
    }
    Verdict {
        id: 6,
        name: "LQ oracle",
        pass: config.num_intervals() == 10 && worst <= 1e-6,
        detail: format!("max deviation {worst:.2e}"),
    }
}

fn qp_oracle() -> Verdict {
    let mut worst_obj = 0.0f64;
    let mut worst_primal = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut bad_status = 0;
    for seed in 0..500u64 {
        let qp = random_qp(seed);
        let sol = solve(&qp, None);
        if sol.status != QpStatus::Optimal {
            bad_status += 1;
        }
        worst_kkt = worst_kkt.max(sol.kkt_residual);
        let oracle = enumerate_qp(&qp).expect("feasible by construction");
        let f_star = qp.objective(&oracle);
        worst_obj = worst_obj.max((qp.objective(&sol.primal) - f_star).abs() / (1.0 + f_star.abs()));
        if is_positive_definite(&qp.hessian, 1e-3) {
            worst_primal = worst_primal.max((&sol.primal - &oracle).amax());
        }
    }
    Verdict {
        id: 7,
        name: "QP enumeration oracle",
        pass: bad_status == 0 && worst_obj <= 1e-7 && worst_primal <= 1e-7 && worst_kkt <= KKT_TOLERANCE,
        detail: format!(
            "objective {worst_obj:.1e}, primal {worst_primal:.1e}, kkt {worst_kkt:.1e}, non-optimal {bad_status}"
        ),
    }
}

fn derivatives() -> Verdict {
    let suites = run_suites(100, 7);
    let pass = suites.iter().all(|s| s.passed(1e-5));
    let detail = suites
        .iter()
        .map(|s| format!("{} {:.1e}", s.name, s.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict {
        id: 8,
        name: "derivative suite",
        pass,
        detail,
    }
}

fn hover_fixed_point() -> Verdict {
    let sim = SimConfig::default();
    let p = Vector3::new(1.0, -1.0, 2.0);
    let refs = refs_at(p, p + Vector3::new(6.0, 0.0, 0.0));
    let mut nmpc = Nmpc::new(OcpConfig::default(), sim.camera, QuadrotorModel::new(sim.params), sim.tick_dt())
        .expect("valid controller");
    let mut x = refs.x_ref;
    let (mut du, mut dp) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let out = nmpc.receding_horizon_step(&x, &refs, &[]).expect("step");
        du = du.max((out.input.to_vector() - refs.u_ref.to_vector()).norm());
        x = step_plant(&x, &out.input, &sim.params, &sim).expect("finite");
        dp = dp.max((x.position - p).norm());
    }
    Verdict {
        id: 9,
        name: "hover fixed point",
        pass: du <= 1e-4 && dp <= 1e-3,
        detail: format!("max |u - u_ref| {du:.1e}, max |p - p_ref| {dp:.1e} m"),
    }
}

fn determinism(first: &CampaignRun) -> Verdict {
    let second = campaign(100, &[Condition::Static]);
    let base = std::env::temp_dir().join(format!("visnav-acceptance-{}", std::process::id()));
    let (a, b) = (base.join("a"), base.join("b"));
    write_campaign(first, &a).expect("write");
    write_campaign(&second, &b).expect("write");
    let same = std::fs::read(a.join("report.json")).unwrap() == std::fs::read(b.join("report.json")).unwrap();
    let _ = std::fs::remove_dir_all(&base);
    Verdict {
        id: 10,
        name: "byte-identical reports",
        pass: same,
        detail: String::new(),
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();

    let start = Instant::now();
    let static_run = campaign(100, &[Condition::Static]);
    let elapsed = start.elapsed().as_secs_f64();
    verdicts.push(static_campaign(&static_run, elapsed));
    report(verdicts.last().unwrap());

    let delays = campaign(
        50,
        &[0.2, 0.4, 0.6, 0.8, 1.0].map(|delay| Condition::Dynamic { delay, velocity: 0.4 }),
    );
    verdicts.push(delay_sweep(&delays));
    report(verdicts.last().unwrap());

    let others = campaign(
        50,
        &[0.2, 0.6].map(|velocity| Condition::Dynamic { delay: 0.4, velocity }),
    );
    let at_04 = delays.report.rows[1].failure_rate;
    verdicts.push(velocity_sweep(&[others.report.rows[0].failure_rate, at_04, others.report.rows[1].failure_rate]));
    report(verdicts.last().unwrap());

    verdicts.push(reprojection_correlation(&static_run));
    report(verdicts.last().unwrap());
    verdicts.push(timing(&[&static_run, &delays, &others]));
    report(verdicts.last().unwrap());

    for check in [lq_equivalence, qp_oracle, derivatives, hover_fixed_point] {
        verdicts.push(check());
        report(verdicts.last().unwrap());
    }
    verdicts.push(determinism(&static_run));
    report(verdicts.last().unwrap());

    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
