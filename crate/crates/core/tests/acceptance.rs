//! End-to-end acceptance checks, one test per criterion. Each prints a
//! PASS/FAIL line to stderr regardless of output capture.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use gearmpc::control::{backup_schedule, ControllerConfig, ControllerKind};
use gearmpc::harness::{evaluate, EvalConfig, Evaluation};
use gearmpc::minlp::{fixed_gear_identity_holds, solve_minlp, GearSearchConfig, MinlpProblem};
use gearmpc::nlp::{build_nlp, solve_nlp, GearSchedule, NlpProblem, SqpOptions};
use gearmpc::policy::{
    generate_expert_data, train_policy, CellKind, DataConfig, ExpertDataset, Network, NetworkShape, PolicyModel,
    TrainConfig, TrainReport,
};
use gearmpc::vehicle::{FullInput, Gear, ReducedInput, State, TrackingWeights, VehicleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 1;
const DATA_EPISODES: usize = 36;
const EVAL_SEED: u64 = 100;
const EVAL_EPISODES: usize = 20;

fn report(id: u32, ok: bool, detail: impl std::fmt::Display) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id:>2}: {verdict}  {detail}");
}

fn params() -> VehicleParams {
    VehicleParams::default()
}

fn random_window(rng: &mut ChaCha8Rng, v_lo: f64, v_hi: f64, n: usize) -> (State, Vec<State>) {
    let v0 = rng.gen_range(v_lo..=v_hi);
    let vr = rng.gen_range(5.0..28.0);
    let x_ref =
        (0..=n).map(|i| State::new(rng.gen_range(-5.0..5.0) + i as f64 * vr, vr + rng.gen_range(-2.0..2.0))).collect();
    (State::new(0.0, v0), x_ref)
}

fn nlp_problem<'a>(x0: State, x_ref: &'a [State], gears: &'a GearSchedule, p: &'a VehicleParams) -> NlpProblem<'a> {
    NlpProblem { x0, x_ref, gears, beta: 0.01, weights: TrackingWeights::default(), params: p, prev_torque: None }
}

fn minlp_problem<'a>(x0: State, x_ref: &'a [State], p: &'a VehicleParams) -> MinlpProblem<'a> {
    MinlpProblem {
        x0,
        x_ref,
        beta: 0.01,
        weights: TrackingWeights::default(),
        params: p,
        prev_gear: None,
        prev_torque: None,
    }
}

#[test]
fn criterion_01_backup_schedule_is_always_feasible() {
    let p = params();
    let (lo, hi) = p.velocity_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut optimal = 0;
    for _ in 0..500 {
        let (x0, x_ref) = random_window(&mut rng, lo, hi, 5);
        let gears = backup_schedule(x0.v, 5, &p).unwrap();
        let sol = solve_nlp(&nlp_problem(x0, &x_ref, &gears, &p), None, &SqpOptions::default()).unwrap();
        optimal += sol.is_optimal() as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = optimal == 500 && secs < 120.0;
    report(1, ok, format!("{optimal}/500 optimal in {secs:.1}s"));
    assert!(ok);
}

#[test]
fn criterion_02_balance_trajectory_satisfies_every_constraint() {
    let p = params();
    let (lo, hi) = p.velocity_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let v = rng.gen_range(lo..=hi);
        let n = 5;
        let gear = p.feasible_gears(v).max().unwrap();
        let gears = GearSchedule::constant(gear, n);
        let x: Vec<State> = (0..=n).map(|i| State::new(i as f64 * v * p.dt, v)).collect();
        let u = vec![p.balance_input(v, gear).expect("balance input exists"); n];
        let nlp = build_nlp(&nlp_problem(x[0], &x, &gears, &p)).unwrap();
        worst = worst.max(nlp.max_violation(&nlp.pack(&x, &u)));
    }
    let ok = worst <= 1e-8;
    report(2, ok, format!("worst residual {worst:.2e} over 200 speeds"));
    assert!(ok);
}

#[test]
fn criterion_03_speed_envelope_calibration() {
    let (lo, hi) = params().velocity_bounds();
    let ok = (lo - 2.2).abs() <= 1e-9 && (hi - 44.4).abs() <= 1e-9;
    report(3, ok, format!("velocity bounds ({lo}, {hi})"));
    assert!(ok);
}

#[test]
fn criterion_04_branch_and_bound_matches_enumeration() {
    let p = params();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let opts = SqpOptions::default();
    let mut matched = 0;
    for _ in 0..25 {
        let (lo, hi) = p.velocity_bounds();
        let (x0, x_ref) = random_window(&mut rng, lo + 1.0, hi - 1.0, 4);
        let prob = minlp_problem(x0, &x_ref, &p);
        let bb = solve_minlp(&prob, &GearSearchConfig::default(), &opts).unwrap();
        let ex = solve_minlp(&prob, &GearSearchConfig::exhaustive(), &opts).unwrap();
        let same_cost = (bb.solution.cost - ex.solution.cost).abs() <= 1e-9 * ex.solution.cost.abs();
        matched += (same_cost && bb.schedule == ex.schedule) as usize;
    }
    let ok = matched == 25;
    report(4, ok, format!("{matched}/25 instances identical at N = 4"));
    assert!(ok);
}

/// Best feasible cost over a grid of net wheel forces per stage, each force
/// realized with the least torque, simulated by single shooting.
fn grid_oracle(prob: &NlpProblem<'_>, levels: usize) -> f64 {
    let p = prob.params;
    let n = prob.x_ref.len() - 1;
    let gears = prob.gears.gears();
    let nlp = build_nlp(prob).unwrap();
    let candidates: Vec<Vec<ReducedInput>> = gears
        .iter()
        .map(|&g| {
            let (f_lo, f_hi) = p.force_range(g);
            let k = p.traction_gain(g);
            (0..levels)
                .map(|l| {
                    let f = f_lo + (f_hi - f_lo) * l as f64 / (levels - 1) as f64;
                    let t = (f + p.brake_min) / k;
                    if t >= p.torque_min {
                        ReducedInput::new(t.min(p.torque_max), p.brake_min)
                    } else {
                        ReducedInput::new(p.torque_min, p.torque_min * k - f)
                    }
                })
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; n];
    loop {
        let u: Vec<ReducedInput> = (0..n).map(|i| candidates[i][idx[i]]).collect();
        let mut x = vec![prob.x0];
        for i in 0..n {
            x.push(p.step_dynamics(&x[i], &FullInput::new(u[i], gears[i])));
        }
        let z = nlp.pack(&x, &u);
        if nlp.max_violation(&z) <= 1e-9 {
            best = best.min(nlp.objective(&z));
        }
        let mut d = 0;
        loop {
            if d == n {
                return best;
            }
            idx[d] += 1;
            if idx[d] < levels {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[test]
fn criterion_05_sqp_optimality_and_derivatives() {
    let p = params();
    let (lo, hi) = p.velocity_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut beaten = 0;
    let mut compared = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..50 {
        let (x0, x_ref) = random_window(&mut rng, lo, hi, 3);
        let phi = p.feasible_gears(x0.v);
        let g = if rng.gen_bool(0.5) { phi.max().unwrap() } else { phi.min().unwrap() };
        let gears = GearSchedule::constant(g, 3);
        let prob = nlp_problem(x0, &x_ref, &gears, &p);
        let grid = grid_oracle(&prob, 40);
        if !grid.is_finite() {
            continue;
        }
        compared += 1;
        let sol = solve_nlp(&prob, None, &SqpOptions::default()).unwrap();
        worst_gap = worst_gap.max(sol.cost - grid);
        beaten += (sol.is_optimal() && sol.cost <= grid + 1e-3) as usize;
    }

    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..6);
        let (x0, x_ref) = random_window(&mut rng, lo, hi, n);
        let gears = GearSchedule::constant(Gear::new(rng.gen_range(1..=6)).unwrap(), n);
        let nlp = build_nlp(&nlp_problem(x0, &x_ref, &gears, &p)).unwrap();
        let z: Vec<f64> = (0..nlp.num_variables())
            .map(|k| {
                if k < 2 * (n + 1) {
                    if k % 2 == 0 {
                        rng.gen_range(0.0..100.0)
                    } else {
                        rng.gen_range(5.0..35.0)
                    }
                } else if (k - 2 * (n + 1)) % 2 == 0 {
                    rng.gen_range(15.0..300.0)
                } else {
                    rng.gen_range(0.0..9000.0)
                }
            })
            .collect();
        let jac = nlp.equality_jacobian(&z);
        let grad = nlp.objective_gradient(&z);
        for k in 0..z.len() {
            let h = 1e-6 * (1.0 + z[k].abs());
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let (cp, cm) = (nlp.equality_residuals(&zp), nlp.equality_residuals(&zm));
            for r in 0..cp.len() {
                let fd = (cp[r] - cm[r]) / (2.0 * h);
                worst_rel = worst_rel.max((fd - jac[(r, k)]).abs() / (1.0 + jac[(r, k)].abs()));
            }
            let fd = (nlp.objective(&zp) - nlp.objective(&zm)) / (2.0 * h);
            worst_rel = worst_rel.max((fd - grad[k]).abs() / (1.0 + grad[k].abs()));
        }
    }
    let ok = compared >= 40 && beaten == compared && worst_rel <= 1e-5;
    report(
        5,
        ok,
        format!(
            "{beaten}/{compared} instances at or below grid + 1e-3 (worst gap {worst_gap:.2e}); derivative error {worst_rel:.1e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_06_fixed_gear_identity() {
    let p = params();
    let (lo, hi) = p.velocity_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let opts = SqpOptions::default();
    let mut held = 0;
    for _ in 0..50 {
        let (x0, x_ref) = random_window(&mut rng, lo + 1.0, hi - 1.0, 4);
        let prob = minlp_problem(x0, &x_ref, &p);
        let res = solve_minlp(&prob, &GearSearchConfig::default(), &opts).unwrap();
        held += (res.schedule.is_some() && fixed_gear_identity_holds(&prob, &res, &opts)) as usize;
    }
    let ok = held == 50;
    report(6, ok, format!("identity holds on {held}/50 instances"));
    assert!(ok);
}

struct Trained {
    dataset: ExpertDataset,
    model: PolicyModel,
    report: TrainReport,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = params();
        let dataset = generate_expert_data(
            &DataConfig {
                episodes: DATA_EPISODES,
                k_sim: 60,
                seed: DATA_SEED,
                controller: ControllerConfig::default(),
            },
            &p,
        )
        .unwrap();
        let (model, report) = train_policy(&dataset, &TrainConfig::default(), &p).unwrap();
        Trained { dataset, model, report }
    })
}

fn evaluation(kinds: &[ControllerKind], horizon: usize, headwind: bool) -> Evaluation {
    let cfg = EvalConfig {
        controllers: kinds.to_vec(),
        episodes: EVAL_EPISODES,
        k_sim: 60,
        seed: EVAL_SEED,
        headwind,
        relative_cost: kinds.contains(&ControllerKind::Exact),
        controller: ControllerConfig { horizon, ..ControllerConfig::default() },
    };
    evaluate(&cfg, &params(), Some(&trained().model)).unwrap()
}

fn nominal() -> &'static (Evaluation, f64) {
    static CELL: OnceLock<(Evaluation, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        trained();
        let start = Instant::now();
        let ev = evaluation(&[ControllerKind::Learned, ControllerKind::Exact, ControllerKind::Hierarchical], 5, false);
        (ev, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_07_policy_learns_from_expert_data() {
    let t = trained();
    let acc = t.report.val_accuracy.unwrap();
    let base = t.report.majority_baseline.unwrap();

    let shape = NetworkShape { cell: CellKind::Gru, inputs: 8, hidden: 4, layers: 2, outputs: 6 };
    let net = Network::init(shape, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let labels = vec![2, 3, 3];
    let mut grad = vec![0.0; net.params.len()];
    net.loss_and_gradient(&inputs, &labels, &mut grad);
    let mut worst: f64 = 0.0;
    for k in 0..net.params.len() {
        let h = 1e-6;
        let (mut a, mut b) = (net.clone(), net.clone());
        a.params[k] += h;
        b.params[k] -= h;
        let fd = (a.loss(&inputs, &labels) - b.loss(&inputs, &labels)) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-6));
    }
    let ok = t.dataset.header.episodes >= 30 && acc >= base + 0.10 && worst <= 1e-4;
    report(
        7,
        ok,
        format!(
            "{} samples; held-out accuracy {:.1}% vs majority {:.1}%; gradient error {worst:.1e}",
            t.dataset.len(),
            100.0 * acc,
            100.0 * base
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_closed_loop_ordering() {
    let (ev, secs) = nominal();
    let lm = ev.summary(ControllerKind::Learned).unwrap().delta_p.unwrap().median;
    let hm = ev.summary(ControllerKind::Hierarchical).unwrap().delta_p.unwrap().median;
    let t_lm = ev.timing(ControllerKind::Learned).unwrap().episode_mean.unwrap().median;
    let t_nm = ev.timing(ControllerKind::Exact).unwrap().episode_mean.unwrap().median;
    let ok = lm < hm && t_lm * 5.0 <= t_nm && *secs < 1800.0;
    report(
        8,
        ok,
        format!(
            "median dP LM {lm:.3}% vs HM {hm:.3}%; median solve LM {:.2} ms vs NM {:.2} ms ({:.1}x); {secs:.0}s",
            1e3 * t_lm,
            1e3 * t_nm,
            t_nm / t_lm
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_backup_usage_nominal() {
    let (ev, _) = nominal();
    let lm = ev.summary(ControllerKind::Learned).unwrap();
    let ok = lm.failed == 0 && lm.backup_percent <= 5.0;
    report(9, ok, format!("LM backup {:.2}% of steps, {} failed episodes", lm.backup_percent, lm.failed));
    assert!(ok);
}

#[test]
fn criterion_10_headwind_robustness() {
    let ev = evaluation(&[ControllerKind::Learned], 5, true);
    let lm = ev.summary(ControllerKind::Learned).unwrap();
    let finite = ev.rows.iter().all(|r| r.metric.is_some_and(f64::is_finite));
    let ok = lm.completed == EVAL_EPISODES && lm.failed == 0 && finite;
    report(
        10,
        ok,
        format!(
            "{}/{EVAL_EPISODES} LM episodes completed under headwind; backup {:.2}% of steps",
            lm.completed, lm.backup_percent
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_11_horizon_generalization() {
    let ev = evaluation(&[ControllerKind::Learned], 8, false);
    let lm = ev.summary(ControllerKind::Learned).unwrap();
    let ok = lm.failed == 0 && lm.backup_percent <= 10.0;
    report(
        11,
        ok,
        format!(
            "model trained at N = 5 drives N = 8: {} failures, backup {:.2}% of steps",
            lm.failed, lm.backup_percent
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_12_evaluation_is_deterministic() {
    let model = &trained().model;
    let cfg = EvalConfig { episodes: 4, k_sim: 30, seed: 12, ..EvalConfig::default() };
    let p = params();
    let a = serde_json::to_string_pretty(&evaluate(&cfg, &p, Some(model)).unwrap().report).unwrap();
    let b = serde_json::to_string_pretty(&evaluate(&cfg, &p, Some(model)).unwrap().report).unwrap();
    let ok = a == b;
    report(12, ok, format!("aggregate reports {} ({} bytes)", if ok { "identical" } else { "differ" }, a.len()));
    assert!(ok);
}
