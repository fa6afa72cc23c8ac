//! Closed-loop controllers: the learned-gear MPC with its backup rule, the
//! exact mixed-integer MPC, the decoupled controller and the backup-only
//! baseline, plus the episode loop and its logs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchical::hierarchical_step;
use crate::minlp::{solve_minlp, GearSearchConfig, MinlpProblem};
use crate::nlp::{
    shift_solution, solve_nlp, GearSchedule, IterRecord, MpcSolution, NlpProblem, ShiftedSolution, SolveStatus,
    SqpOptions,
};
use crate::policy::{policy_forward, PolicyBundle, PolicyModel};
use crate::vehicle::{episode_metric, FullInput, Gear, ReducedInput, State, TrackingWeights, VehicleParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Policy-proposed gears, fixed-gear NLP, backup on failure.
    #[serde(rename = "LM")]
    Learned,
    /// Exact gear search every step.
    #[serde(rename = "NM")]
    Exact,
    /// Force-level NLP with rule-based gears.
    #[serde(rename = "HM")]
    Hierarchical,
    /// Constant highest feasible gear every step.
    #[serde(rename = "BACKUP")]
    BackupOnly,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] =
        [ControllerKind::Learned, ControllerKind::Exact, ControllerKind::Hierarchical, ControllerKind::BackupOnly];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Learned => "LM",
            ControllerKind::Exact => "NM",
            ControllerKind::Hierarchical => "HM",
            ControllerKind::BackupOnly => "BACKUP",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LM" => Ok(ControllerKind::Learned),
            "NM" => Ok(ControllerKind::Exact),
            "HM" => Ok(ControllerKind::Hierarchical),
            "BACKUP" => Ok(ControllerKind::BackupOnly),
            _ => Err(Error::InvalidParams(format!("unknown controller `{s}` (use LM, NM, HM or BACKUP)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GearSource {
    Policy,
    Backup,
    Bootstrap,
    Expert,
    Rule,
}

impl GearSource {
    pub fn name(self) -> &'static str {
        match self {
            GearSource::Policy => "policy",
            GearSource::Backup => "backup",
            GearSource::Bootstrap => "bootstrap",
            GearSource::Expert => "expert",
            GearSource::Rule => "rule",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub beta: f64,
    pub weights: TrackingWeights,
    pub sqp: SqpOptions,
    pub search: GearSearchConfig,
    /// Also bound the first planned torque against the last applied one.
    pub cross_step_torque_rate: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            horizon: 5,
            beta: 0.01,
            weights: TrackingWeights::default(),
            sqp: SqpOptions::default(),
            search: GearSearchConfig::default(),
            cross_step_torque_rate: false,
        }
    }
}

/// Constant schedule in the highest gear feasible at `v`.
pub fn backup_schedule(v: f64, n: usize, params: &VehicleParams) -> Result<GearSchedule> {
    let gear = params.feasible_gears(v).max().ok_or(Error::NoFeasibleGear(v))?;
    Ok(GearSchedule::constant(gear, n))
}

/// One solver call made during a control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub role: GearSource,
    pub status: SolveStatus,
    pub gears: Vec<u8>,
    pub solve_time: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<IterRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub state: State,
    pub reference: State,
    pub input: FullInput,
    pub gear_source: GearSource,
    /// Status of the solve whose first input was applied.
    pub status: SolveStatus,
    /// Wall-clock seconds spent in the controller this step.
    pub solve_time: f64,
    pub solves: Vec<SolveRecord>,
    /// Gear 1-norm between the rejected proposal and the backup schedule.
    pub backup_distance: Option<u32>,
}

/// Output of one control step.
pub struct StepOutcome {
    pub input: FullInput,
    pub solution: Option<MpcSolution>,
    pub schedule: Option<GearSchedule>,
    pub source: GearSource,
    pub status: SolveStatus,
    pub solves: Vec<SolveRecord>,
    pub backup_distance: Option<u32>,
}

fn record(role: GearSource, gears: &GearSchedule, sol: &MpcSolution) -> SolveRecord {
    SolveRecord {
        role,
        status: sol.status,
        gears: gears.numbers(),
        solve_time: sol.solve_time,
        trace: sol.trace.clone(),
    }
}

struct StepContext<'a> {
    x: State,
    window: &'a [State],
    params: &'a VehicleParams,
    cfg: &'a ControllerConfig,
    prev_input: Option<FullInput>,
}

impl<'a> StepContext<'a> {
    fn prev_torque(&self) -> Option<f64> {
        self.prev_input.filter(|_| self.cfg.cross_step_torque_rate).map(|u| u.torque)
    }

    fn problem<'b>(&'b self, gears: &'b GearSchedule) -> NlpProblem<'b> {
        NlpProblem {
            x0: self.x,
            x_ref: self.window,
            gears,
            beta: self.cfg.beta,
            weights: self.cfg.weights,
            params: self.params,
            prev_torque: self.prev_torque(),
        }
    }

    fn minlp(&self) -> MinlpProblem<'_> {
        MinlpProblem {
            x0: self.x,
            x_ref: self.window,
            beta: self.cfg.beta,
            weights: self.cfg.weights,
            params: self.params,
            prev_gear: self.prev_input.map(|u| u.gear),
            prev_torque: self.prev_torque(),
        }
    }

    /// First planned input, with solver-tolerance excursions past the box
    /// bounds removed.
    fn applied(&self, u: ReducedInput, gear: Gear) -> FullInput {
        let p = self.params;
        let u = ReducedInput::new(u.torque.clamp(p.torque_min, p.torque_max), u.brake.clamp(p.brake_min, p.brake_max));
        FullInput::new(u, gear)
    }

    /// Re-solves with the backup schedule; failure here is fatal.
    fn backup(&self, k: usize, proposal: Option<&GearSchedule>, mut solves: Vec<SolveRecord>) -> Result<StepOutcome> {
        let gears = backup_schedule(self.x.v, self.cfg.horizon, self.params)?;
        let sol = solve_nlp(&self.problem(&gears), None, &self.cfg.sqp)?;
        solves.push(record(GearSource::Backup, &gears, &sol));
        if !sol.is_optimal() {
            return Err(Error::BackupFailed { step: k, status: sol.status });
        }
        Ok(StepOutcome {
            input: self.applied(sol.u_traj[0], gears.first()),
            backup_distance: proposal.map(|p| p.l1_distance(&gears)),
            status: sol.status,
            solution: Some(sol),
            schedule: Some(gears),
            source: GearSource::Backup,
            solves,
        })
    }

    fn exact(&self, k: usize, source: GearSource) -> Result<StepOutcome> {
        let res = solve_minlp(&self.minlp(), &self.cfg.search, &self.cfg.sqp)?;
        match res.schedule {
            Some(gears) => {
                let mut rec = record(source, &gears, &res.solution);
                if self.cfg.sqp.record_trace {
                    // The search itself runs untraced; replay the winner.
                    rec.trace = solve_nlp(&self.problem(&gears), None, &self.cfg.sqp)?.trace;
                }
                let solves = vec![rec];
                Ok(StepOutcome {
                    input: self.applied(res.solution.u_traj[0], gears.first()),
                    status: res.solution.status,
                    solution: Some(res.solution),
                    schedule: Some(gears),
                    source,
                    solves,
                    backup_distance: None,
                })
            }
            None => self.backup(k, None, Vec::new()),
        }
    }

    fn learned(&self, k: usize, shifted: Option<&ShiftedSolution>, model: &PolicyModel) -> Result<StepOutcome> {
        let Some(shifted) = shifted else {
            return self.exact(k, GearSource::Bootstrap);
        };
        let bundle = PolicyBundle::new(shifted, self.window)?;
        let gears = policy_forward(&bundle, model, self.params)?;
        let (xw, uw) = shifted.warm_start(self.params, &gears);
        let sol = solve_nlp(&self.problem(&gears), Some((&xw, &uw)), &self.cfg.sqp)?;
        let solves = vec![record(GearSource::Policy, &gears, &sol)];
        if sol.is_optimal() {
            return Ok(StepOutcome {
                input: self.applied(sol.u_traj[0], gears.first()),
                status: sol.status,
                solution: Some(sol),
                schedule: Some(gears),
                source: GearSource::Policy,
                solves,
                backup_distance: None,
            });
        }
        self.backup(k, Some(&gears), solves)
    }

    fn backup_only(&self, k: usize) -> Result<StepOutcome> {
        self.backup(k, None, Vec::new())
    }

    fn hierarchical(&self) -> Result<StepOutcome> {
        let prev_gear = self.prev_input.map(|u| u.gear);
        let prev_torque = self.prev_input.map(|u| u.torque);
        let step = hierarchical_step(
            self.x,
            self.window,
            prev_gear,
            prev_torque,
            self.params,
            self.cfg.weights,
            &self.cfg.sqp,
        )?;
        let record = SolveRecord {
            role: GearSource::Rule,
            status: step.force.status,
            gears: vec![step.input.gear.get()],
            solve_time: step.force.solve_time,
            trace: Vec::new(),
        };
        Ok(StepOutcome {
            input: step.input,
            solution: None,
            schedule: None,
            source: GearSource::Rule,
            status: step.force.status,
            solves: vec![record],
            backup_distance: None,
        })
    }
}

/// Algorithm step of the learned controller: policy gears when a shifted
/// solution exists, exact search otherwise, backup on failure.
pub fn lm_step(
    k: usize,
    x_now: State,
    window: &[State],
    shifted: Option<&ShiftedSolution>,
    model: &PolicyModel,
    params: &VehicleParams,
    cfg: &ControllerConfig,
) -> Result<StepOutcome> {
    check_window(window, cfg.horizon)?;
    let ctx = StepContext { x: x_now, window, params, cfg, prev_input: None };
    ctx.learned(k, shifted, model)
}

fn check_window(window: &[State], n: usize) -> Result<()> {
    if window.len() != n + 1 {
        return Err(Error::LengthMismatch { what: "reference window", got: window.len(), expected: n + 1 });
    }
    Ok(())
}

/// Plant wind speed per step; `None` means nominal dynamics.
pub type Headwind<'a> = Option<&'a [f64]>;

/// What an observer sees at each control step.
pub struct StepObservation<'a> {
    pub k: usize,
    pub shifted: Option<&'a ShiftedSolution>,
    pub window: &'a [State],
    pub schedule: Option<&'a GearSchedule>,
    pub source: GearSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub controller: ControllerKind,
    pub seed: u64,
    /// Closed-loop performance metric; `None` when the episode failed.
    pub metric: Option<f64>,
    pub steps: usize,
    pub backup_steps: usize,
    pub backup_fraction: f64,
    /// Mean gear 1-norm between rejected proposals and the backup.
    pub mean_backup_distance: Option<f64>,
    pub solve_times: Vec<f64>,
    pub failure: Option<String>,
}

impl EpisodeResult {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn mean_solve_time(&self) -> f64 {
        if self.solve_times.is_empty() {
            return 0.0;
        }
        self.solve_times.iter().sum::<f64>() / self.solve_times.len() as f64
    }

    pub fn max_solve_time(&self) -> f64 {
        self.solve_times.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub result: EpisodeResult,
    pub logs: Vec<StepLog>,
}

/// Runs `k_sim + 1` control steps (`k = 0..=k_sim`) against the reference and
/// `k_sim` plant transitions.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    kind: ControllerKind,
    seed: u64,
    x0: State,
    reference: &[State],
    headwind: Headwind<'_>,
    k_sim: usize,
    model: Option<&PolicyModel>,
    params: &VehicleParams,
    cfg: &ControllerConfig,
    observer: &mut dyn FnMut(&StepObservation<'_>),
) -> Result<Episode> {
    let n = cfg.horizon;
    if n < 2 {
        return Err(Error::Horizon { min: 2, got: n });
    }
    if reference.len() < k_sim + n + 1 {
        return Err(Error::LengthMismatch { what: "reference", got: reference.len(), expected: k_sim + n + 1 });
    }
    if kind == ControllerKind::Learned && model.is_none() {
        return Err(Error::InvalidParams("the learned controller needs a policy model".into()));
    }
    let mut x = x0;
    let mut shifted: Option<ShiftedSolution> = None;
    let mut prev_input: Option<FullInput> = None;
    let mut logs: Vec<StepLog> = Vec::with_capacity(k_sim + 1);
    let mut failure = None;

    for k in 0..=k_sim {
        let window = &reference[k..=k + n];
        let ctx = StepContext { x, window, params, cfg, prev_input };
        let start = Instant::now();
        let outcome = match kind {
            ControllerKind::Learned => ctx.learned(k, shifted.as_ref(), model.expect("checked above")),
            ControllerKind::Exact => ctx.exact(k, GearSource::Expert),
            ControllerKind::Hierarchical => ctx.hierarchical(),
            ControllerKind::BackupOnly => ctx.backup_only(k),
        };
        let elapsed = start.elapsed().as_secs_f64();
        let outcome = match outcome.map_err(|e| match e {
            Error::Controller { reason, .. } => Error::Controller { step: k, reason },
            other => other,
        }) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("{kind} episode {seed} failed at step {k}: {e}");
                failure = Some(e.to_string());
                break;
            }
        };
        observer(&StepObservation {
            k,
            shifted: shifted.as_ref(),
            window,
            schedule: outcome.schedule.as_ref(),
            source: outcome.source,
        });
        logs.push(StepLog {
            k,
            state: x,
            reference: reference[k],
            input: outcome.input,
            gear_source: outcome.source,
            status: outcome.status,
            solve_time: elapsed,
            solves: outcome.solves,
            backup_distance: outcome.backup_distance,
        });
        if k == k_sim {
            break;
        }
        let next = match headwind {
            Some(w) => crate::harness::apply_headwind(&x, &outcome.input, w[k], params),
            None => params.step_dynamics(&x, &outcome.input),
        };
        shifted = match (&outcome.solution, &outcome.schedule) {
            (Some(sol), Some(gears)) => Some(shift_solution(sol, gears, next)?),
            _ => None,
        };
        prev_input = Some(outcome.input);
        x = next;
    }

    let steps = logs.len();
    let backup_steps = logs.iter().filter(|l| l.gear_source == GearSource::Backup).count();
    let distances: Vec<f64> = logs.iter().filter_map(|l| l.backup_distance).map(f64::from).collect();
    let metric = if failure.is_none() {
        let traj: Vec<(State, FullInput)> = logs.iter().map(|l| (l.state, l.input)).collect();
        Some(episode_metric(&traj, &reference[..steps], cfg.beta, &cfg.weights, params)?)
    } else {
        None
    };
    Ok(Episode {
        result: EpisodeResult {
            controller: kind,
            seed,
            metric,
            steps,
            backup_steps,
            backup_fraction: if steps == 0 { 0.0 } else { backup_steps as f64 / steps as f64 },
            mean_backup_distance: if distances.is_empty() {
                None
            } else {
                Some(distances.iter().sum::<f64>() / distances.len() as f64)
            },
            solve_times: logs.iter().map(|l| l.solve_time).collect(),
            failure,
        },
        logs,
    })
}

pub const STEP_CSV_HEADER: &str = "k,p,v,p_ref,v_ref,torque,brake,gear,gear_source,status,solver_calls,backup_distance";

/// Per-step CSV without timings, so repeated runs produce identical files.
pub fn write_step_csv(w: &mut dyn Write, logs: &[StepLog]) -> std::io::Result<()> {
    writeln!(w, "{STEP_CSV_HEADER}")?;
    for l in logs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{:?},{},{}",
            l.k,
            l.state.p,
            l.state.v,
            l.reference.p,
            l.reference.v,
            l.input.torque,
            l.input.brake,
            l.input.gear,
            l.gear_source.name(),
            l.status,
            l.solves.len(),
            l.backup_distance.map_or(String::new(), |d| d.to_string()),
        )?;
    }
    Ok(())
}

/// Per-step wall-clock solve times.
pub fn write_timing_csv(w: &mut dyn Write, logs: &[StepLog]) -> std::io::Result<()> {
    writeln!(w, "k,solve_time")?;
    for l in logs {
        writeln!(w, "{},{}", l.k, l.solve_time)?;
    }
    Ok(())
}

/// One JSON line per SQP iteration of every traced solve.
pub fn write_traces(w: &mut dyn Write, controller: ControllerKind, seed: u64, logs: &[StepLog]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        controller: ControllerKind,
        seed: u64,
        step: usize,
        solve: usize,
        role: GearSource,
        gears: &'a [u8],
        status: SolveStatus,
        #[serde(flatten)]
        iter: &'a IterRecord,
    }
    for l in logs {
        for (c, s) in l.solves.iter().enumerate() {
            for it in &s.trace {
                let line = Line {
                    controller,
                    seed,
                    step: l.k,
                    solve: c,
                    role: s.role,
                    gears: &s.gears,
                    status: s.status,
                    iter: it,
                };
                serde_json::to_writer(&mut *w, &line)?;
                writeln!(w).map_err(|e| Error::io("trace", e))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::CellKind;

    fn cruise(v: f64, len: usize) -> Vec<State> {
        (0..len).map(|i| State::new(i as f64 * v, v)).collect()
    }

    #[test]
    fn backup_schedule_rules() {
        let p = VehicleParams::default();
        let (lo, hi) = p.velocity_bounds();
        assert_eq!(backup_schedule(hi, 4, &p).unwrap().numbers(), vec![6; 4]);
        let top = p.feasible_gears(lo).max().unwrap();
        assert_eq!(backup_schedule(lo, 3, &p).unwrap().gears(), &[top; 3]);
        assert!(backup_schedule(hi + 1.0, 3, &p).is_err());
    }

    #[test]
    fn controller_names_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.name().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("XX".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn first_step_bootstraps_and_later_steps_use_the_policy() {
        let p = VehicleParams::default();
        let cfg = ControllerConfig::default();
        let model = PolicyModel::new(CellKind::Gru, 1, 4, 0);
        let reference = cruise(18.0, 20);
        let ep = run_episode(
            ControllerKind::Learned,
            0,
            State::new(0.0, 18.0),
            &reference,
            None,
            4,
            Some(&model),
            &p,
            &cfg,
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(ep.logs[0].gear_source, GearSource::Bootstrap);
        for l in &ep.logs[1..] {
            assert!(matches!(l.gear_source, GearSource::Policy | GearSource::Backup));
        }
        assert_eq!(ep.result.steps, 5);
        assert!(ep.result.metric.unwrap().is_finite());
    }

    #[test]
    fn infeasible_proposal_falls_back_with_distance() {
        let p = VehicleParams::default();
        let cfg = ControllerConfig::default();
        // A model whose read-out always prefers first gear, which cannot run at 30 m/s.
        let mut model = PolicyModel::new(CellKind::Gru, 1, 4, 0);
        let nparams = model.network.params.len();
        for k in 0..6 {
            model.network.params[nparams - 6 + k] = if k == 0 { 100.0 } else { -100.0 };
        }
        let v = 30.0;
        let reference = cruise(v, 6);
        let gears = backup_schedule(v, 5, &p).unwrap();
        let x0 = State::new(0.0, v);
        let prob = NlpProblem {
            x0,
            x_ref: &reference,
            gears: &gears,
            beta: cfg.beta,
            weights: cfg.weights,
            params: &p,
            prev_torque: None,
        };
        let prev = solve_nlp(&prob, None, &cfg.sqp).unwrap();
        let shifted = shift_solution(&prev, &gears, prev.x_traj[1]).unwrap();
        let out = lm_step(1, prev.x_traj[1], &cruise(v, 7)[1..], Some(&shifted), &model, &p, &cfg).unwrap();
        assert_eq!(out.source, GearSource::Backup);
        assert_eq!(out.solves.len(), 2);
        let proposal = GearSchedule::from_numbers(&[1, 1, 1, 1, 1]).unwrap();
        assert_eq!(out.backup_distance, Some(proposal.l1_distance(&backup_schedule(prev.x_traj[1].v, 5, &p).unwrap())));
    }

    #[test]
    fn backup_only_completes_and_respects_limits() {
        let p = VehicleParams::default();
        let cfg = ControllerConfig::default();
        let reference: Vec<State> = {
            let mut r = vec![State::new(0.0, 20.0)];
            for i in 1..40 {
                let v = (20.0 + 0.5 * i as f64).min(28.0);
                r.push(State::new(r[i - 1].p + r[i - 1].v, v));
            }
            r
        };
        let ep = run_episode(
            ControllerKind::BackupOnly,
            1,
            State::new(0.0, 15.0),
            &reference,
            None,
            30,
            None,
            &p,
            &cfg,
            &mut |_| {},
        )
        .unwrap();
        assert!(ep.result.succeeded());
        assert_eq!(ep.result.backup_fraction, 1.0);
        for w in ep.logs.windows(2) {
            let u = w[1].input;
            assert!(u.torque >= p.torque_min && u.torque <= p.torque_max);
            assert!(u.brake >= p.brake_min && u.brake <= p.brake_max);
            assert!(p.engine_speed_ok(w[1].state.v, u.gear));
        }
    }

    #[test]
    fn zero_length_episode_counts_one_term() {
        let p = VehicleParams::default();
        let cfg = ControllerConfig::default();
        let reference = cruise(20.0, 6);
        let ep = run_episode(
            ControllerKind::BackupOnly,
            0,
            State::new(0.0, 20.0),
            &reference,
            None,
            0,
            None,
            &p,
            &cfg,
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(ep.result.steps, 1);
        let l = &ep.logs[0];
        let expect = cfg.beta * cfg.weights.tracking_cost(&l.state, &reference[0])
            + p.fuel_cost(l.state.v, l.input.torque, l.input.gear);
        assert!((ep.result.metric.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let p = VehicleParams::default();
        let cfg = ControllerConfig::default();
        let reference = cruise(20.0, 12);
        let ep = run_episode(
            ControllerKind::Hierarchical,
            0,
            State::new(0.0, 19.0),
            &reference,
            None,
            5,
            None,
            &p,
            &cfg,
            &mut |_| {},
        )
        .unwrap();
        let mut buf = Vec::new();
        write_step_csv(&mut buf, &ep.logs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with(STEP_CSV_HEADER));
    }
}
