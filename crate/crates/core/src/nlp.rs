//! Fixed-gear MPC problem: speed and torque/brake optimization for a given
//! gear-shift schedule.

use std::time::Instant;

use nalgebra::{DMatrix, Matrix2, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sqp::{self, LinearRow, RowKind, StageHessian, StageModel, Trajectory, Var, Vec2};
use crate::vehicle::{FullInput, Gear, ReducedInput, SpeedRange, State, TrackingWeights, VehicleParams};

pub use crate::sqp::{IterRecord, SolveStatus, SqpOptions};

/// Gears over the prediction horizon; consecutive entries differ by at most one.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Gear>", into = "Vec<Gear>")]
pub struct GearSchedule(Vec<Gear>);

impl GearSchedule {
    pub fn new(gears: Vec<Gear>) -> Result<Self> {
        if let Some(i) = gears.windows(2).position(|w| w[0].distance(w[1]) > 1) {
            return Err(Error::GearSkip(i));
        }
        Ok(GearSchedule(gears))
    }

    pub fn from_numbers(gears: &[i64]) -> Result<Self> {
        Self::new(gears.iter().map(|&j| Gear::new(j)).collect::<Result<_>>()?)
    }

    pub fn constant(gear: Gear, len: usize) -> Self {
        GearSchedule(vec![gear; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gears(&self) -> &[Gear] {
        &self.0
    }

    pub fn first(&self) -> Gear {
        self.0[0]
    }

    /// Sum of absolute gear differences.
    pub fn l1_distance(&self, other: &GearSchedule) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.distance(*b)).sum()
    }

    pub fn numbers(&self) -> Vec<u8> {
        self.0.iter().map(|g| g.get()).collect()
    }
}

impl TryFrom<Vec<Gear>> for GearSchedule {
    type Error = Error;
    fn try_from(g: Vec<Gear>) -> Result<Self> {
        GearSchedule::new(g)
    }
}

impl From<GearSchedule> for Vec<Gear> {
    fn from(s: GearSchedule) -> Self {
        s.0
    }
}

/// Data of one fixed-gear MPC problem.
#[derive(Clone, Debug)]
pub struct NlpProblem<'a> {
    pub x0: State,
    /// `N + 1` reference states.
    pub x_ref: &'a [State],
    pub gears: &'a GearSchedule,
    pub beta: f64,
    pub weights: TrackingWeights,
    pub params: &'a VehicleParams,
    /// When set, `|T(0) - prev_torque| <= ΔT_max Δt` is also enforced.
    pub prev_torque: Option<f64>,
}

impl NlpProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.gears.len()
    }

    fn check(&self, min_horizon: usize) -> Result<()> {
        let n = self.horizon();
        if n < min_horizon {
            return Err(Error::Horizon { min: min_horizon, got: n });
        }
        if self.x_ref.len() != n + 1 {
            return Err(Error::LengthMismatch { what: "reference", got: self.x_ref.len(), expected: n + 1 });
        }
        // Re-validate in case the schedule was assembled by hand.
        GearSchedule::new(self.gears.0.clone()).map(|_| ())
    }
}

/// The multiple-shooting transcription of a fixed-gear problem.
///
/// Decision vector: `[x(0), …, x(N), u'(0), …, u'(N-1)]`, i.e. `2(N+1) + 2N`
/// scalars. Equalities: initial condition plus `N` two-dimensional defects.
#[derive(Clone, Debug)]
pub struct FixedGearNlp<'a> {
    problem: NlpProblem<'a>,
    speed_gain: Vec<f64>,
    traction: Vec<f64>,
    rows: Vec<LinearRow>,
}

/// Transcribes a fixed-gear problem. Fails on a schedule that skips gears.
pub fn build_nlp<'a>(problem: &NlpProblem<'a>) -> Result<FixedGearNlp<'a>> {
    problem.check(2)?;
    Ok(FixedGearNlp::new(problem.clone()))
}

impl<'a> FixedGearNlp<'a> {
    /// Builds without the `N >= 2` restriction (used for horizon-truncated bounds).
    pub(crate) fn new(problem: NlpProblem<'a>) -> Self {
        let p = problem.params;
        let n = problem.horizon();
        let gears = problem.gears.gears();
        let speed_gain = gears.iter().map(|&g| p.engine_speed_gain(g)).collect();
        let traction = gears.iter().map(|&g| p.traction_gain(g)).collect();
        let mut rows = Vec::new();
        let mut push = |terms: Vec<(Var, f64)>, rhs: f64, kind, stage| rows.push(LinearRow { terms, rhs, kind, stage });
        let dv = p.max_accel * p.dt;
        let dtq = p.max_torque_rate * p.dt;
        for i in 0..n {
            let range = p.gear_velocity_range(gears[i]);
            push(vec![(Var::X(i + 1, 1), 1.0), (Var::X(i, 1), -1.0)], dv, RowKind::Acceleration, i);
            push(vec![(Var::X(i, 1), 1.0), (Var::X(i + 1, 1), -1.0)], dv, RowKind::Acceleration, i);
            push(vec![(Var::U(i, 0), 1.0)], p.torque_max, RowKind::TorqueBound, i);
            push(vec![(Var::U(i, 0), -1.0)], -p.torque_min, RowKind::TorqueBound, i);
            push(vec![(Var::U(i, 1), 1.0)], p.brake_max, RowKind::BrakeBound, i);
            push(vec![(Var::U(i, 1), -1.0)], -p.brake_min, RowKind::BrakeBound, i);
            // Engine-speed rows, expressed in velocity units (ω is linear in v).
            push(vec![(Var::X(i, 1), 1.0)], range.hi, RowKind::EngineSpeedStart, i);
            push(vec![(Var::X(i, 1), -1.0)], -range.lo, RowKind::EngineSpeedStart, i);
            push(vec![(Var::X(i + 1, 1), 1.0)], range.hi, RowKind::EngineSpeedEnd, i);
            push(vec![(Var::X(i + 1, 1), -1.0)], -range.lo, RowKind::EngineSpeedEnd, i);
            if i + 1 < n {
                push(vec![(Var::U(i + 1, 0), 1.0), (Var::U(i, 0), -1.0)], dtq, RowKind::TorqueRate, i);
                push(vec![(Var::U(i, 0), 1.0), (Var::U(i + 1, 0), -1.0)], dtq, RowKind::TorqueRate, i);
            }
        }
        if let Some(prev) = problem.prev_torque {
            push(vec![(Var::U(0, 0), 1.0)], prev + dtq, RowKind::CrossStepTorqueRate, 0);
            push(vec![(Var::U(0, 0), -1.0)], dtq - prev, RowKind::CrossStepTorqueRate, 0);
        }
        FixedGearNlp { problem, speed_gain, traction, rows }
    }

    pub fn problem(&self) -> &NlpProblem<'a> {
        &self.problem
    }

    pub fn num_variables(&self) -> usize {
        4 * self.horizon() + 2
    }

    /// Number of two-dimensional equality blocks (initial condition + defects).
    pub fn num_equality_blocks(&self) -> usize {
        1 + self.horizon()
    }

    pub fn inequality_rows(&self) -> &[LinearRow] {
        &self.rows
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        sqp::objective(self, &Trajectory::from_vector(z, self.horizon()))
    }

    /// Analytic objective gradient over the flattened decision vector.
    pub fn objective_gradient(&self, z: &[f64]) -> Vec<f64> {
        let n = self.horizon();
        let t = Trajectory::<2>::from_vector(z, n);
        let mut g = vec![0.0; z.len()];
        for i in 0..n {
            let (gx, gu) = self.stage_gradient(i, &t.x[i], &t.u[i]);
            for c in 0..2 {
                g[sqp::var_index::<2>(Var::X(i, c), n)] += gx[c];
                g[sqp::var_index::<2>(Var::U(i, c), n)] += gu[c];
            }
        }
        let gn = self.terminal_gradient(&t.x[n]);
        for c in 0..2 {
            g[sqp::var_index::<2>(Var::X(n, c), n)] += gn[c];
        }
        g
    }

    /// `[x(0) - x0, x(1) - f(x(0), u(0)), …]`, length `2(N+1)`.
    pub fn equality_residuals(&self, z: &[f64]) -> Vec<f64> {
        let n = self.horizon();
        let t = Trajectory::<2>::from_vector(z, n);
        let ic = t.x[0] - self.initial_state();
        let mut out = vec![ic[0], ic[1]];
        for d in sqp::defects(self, &t) {
            out.extend([d[0], d[1]]);
        }
        out
    }

    /// Analytic Jacobian of [`equality_residuals`](Self::equality_residuals).
    pub fn equality_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let n = self.horizon();
        let t = Trajectory::<2>::from_vector(z, n);
        let mut jac = DMatrix::zeros(2 * (n + 1), z.len());
        jac[(0, 0)] = 1.0;
        jac[(1, 1)] = 1.0;
        for i in 0..n {
            let (a, b) = self.dynamics_jacobian(i, &t.x[i], &t.u[i]);
            for r in 0..2 {
                let row = 2 * (i + 1) + r;
                jac[(row, sqp::var_index::<2>(Var::X(i + 1, r), n))] += 1.0;
                for c in 0..2 {
                    jac[(row, sqp::var_index::<2>(Var::X(i, c), n))] -= a[(r, c)];
                    jac[(row, sqp::var_index::<2>(Var::U(i, c), n))] -= b[(r, c)];
                }
            }
        }
        jac
    }

    /// Largest violation of any constraint at `z`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        sqp::max_violation(self, &Trajectory::from_vector(z, self.horizon()))
    }

    /// Stacks state and input trajectories into a decision vector.
    pub fn pack(&self, x: &[State], u: &[ReducedInput]) -> Vec<f64> {
        to_trajectory(x, u).to_vector()
    }

    /// Constant-velocity trajectory from the initial state, holding each
    /// stage's balance input.
    pub fn constant_velocity_guess(&self) -> (Vec<State>, Vec<ReducedInput>) {
        let p = self.problem.params;
        let x0 = self.problem.x0;
        let n = self.horizon();
        let x = (0..=n).map(|i| State::new(x0.p + i as f64 * x0.v * p.dt, x0.v)).collect();
        let u = self
            .problem
            .gears
            .gears()
            .iter()
            .map(|&g| {
                p.balance_input(x0.v, g).unwrap_or_else(|| {
                    let need = p.drag * x0.v * x0.v + p.friction_force();
                    let torque = (need / p.traction_gain(g)).clamp(p.torque_min, p.torque_max);
                    ReducedInput::new(torque, p.brake_min)
                })
            })
            .collect();
        (x, u)
    }
}

fn to_trajectory(x: &[State], u: &[ReducedInput]) -> Trajectory<2> {
    Trajectory {
        x: x.iter().map(|s| Vec2::new(s.p, s.v)).collect(),
        u: u.iter().map(|w| SVector::<f64, 2>::new(w.torque, w.brake)).collect(),
    }
}

impl StageModel<2> for FixedGearNlp<'_> {
    fn horizon(&self) -> usize {
        self.problem.horizon()
    }

    fn initial_state(&self) -> Vec2 {
        Vec2::new(self.problem.x0.p, self.problem.x0.v)
    }

    fn dynamics(&self, i: usize, x: &Vec2, u: &SVector<f64, 2>) -> Vec2 {
        let p = self.problem.params;
        let force = u[0] * self.traction[i] - p.drag * x[1] * x[1] - u[1] - p.friction_force();
        Vec2::new(x[0] + x[1] * p.dt, x[1] + p.dt / p.mass * force)
    }

    fn dynamics_jacobian(&self, i: usize, x: &Vec2, _u: &SVector<f64, 2>) -> (Matrix2<f64>, SMatrix<f64, 2, 2>) {
        let p = self.problem.params;
        let k = p.dt / p.mass;
        let a = Matrix2::new(1.0, p.dt, 0.0, 1.0 - 2.0 * k * p.drag * x[1]);
        let b = SMatrix::<f64, 2, 2>::new(0.0, 0.0, k * self.traction[i], -k);
        (a, b)
    }

    fn stage_cost(&self, i: usize, x: &Vec2, u: &SVector<f64, 2>) -> f64 {
        let pr = &self.problem;
        let p = pr.params;
        let w = self.speed_gain[i] * x[1];
        pr.beta * pr.weights.tracking_cost(&State::new(x[0], x[1]), &pr.x_ref[i])
            + p.dt * (p.c0 + p.c1 * w + p.c2 * w * u[0])
    }

    fn stage_gradient(&self, i: usize, x: &Vec2, u: &SVector<f64, 2>) -> (Vec2, SVector<f64, 2>) {
        let pr = &self.problem;
        let p = pr.params;
        let k = self.speed_gain[i];
        let mut gx = self.tracking_gradient(i, x);
        gx[1] += p.dt * (p.c1 * k + p.c2 * k * u[0]);
        let gu = SVector::<f64, 2>::new(p.dt * p.c2 * k * x[1], 0.0);
        (gx, gu)
    }

    fn stage_hessian(&self, i: usize, _x: &Vec2, _u: &SVector<f64, 2>) -> StageHessian<2> {
        let p = self.problem.params;
        let cross = p.dt * p.c2 * self.speed_gain[i];
        StageHessian {
            xx: self.tracking_hessian(),
            xu: SMatrix::<f64, 2, 2>::new(0.0, 0.0, cross, 0.0),
            uu: SMatrix::<f64, 2, 2>::zeros(),
        }
    }

    fn terminal_cost(&self, x: &Vec2) -> f64 {
        let pr = &self.problem;
        pr.beta * pr.weights.tracking_cost(&State::new(x[0], x[1]), &pr.x_ref[self.horizon()])
    }

    fn terminal_gradient(&self, x: &Vec2) -> Vec2 {
        self.tracking_gradient(self.horizon(), x)
    }

    fn terminal_hessian(&self, _x: &Vec2) -> Matrix2<f64> {
        self.tracking_hessian()
    }

    fn rows(&self) -> &[LinearRow] {
        &self.rows
    }

    fn input_scale(&self) -> SVector<f64, 2> {
        SVector::<f64, 2>::new(100.0, 1000.0)
    }
}

impl FixedGearNlp<'_> {
    fn tracking_gradient(&self, i: usize, x: &Vec2) -> Vec2 {
        let pr = &self.problem;
        let q = pr.weights.matrix();
        let r = &pr.x_ref[i];
        let e = Vec2::new(x[0] - r.p, x[1] - r.v);
        let qm = Matrix2::new(q[0][0], q[0][1], q[1][0], q[1][1]);
        (qm + qm.transpose()) * e * pr.beta
    }

    fn tracking_hessian(&self) -> Matrix2<f64> {
        let q = self.problem.weights.matrix();
        let qm = Matrix2::new(q[0][0], q[0][1], q[1][0], q[1][1]);
        (qm + qm.transpose()) * self.problem.beta
    }
}

/// Result of one MPC solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcSolution {
    pub status: SolveStatus,
    /// Optimal cost, `+∞` unless `status` is `Optimal`.
    pub cost: f64,
    pub x_traj: Vec<State>,
    pub u_traj: Vec<ReducedInput>,
    /// Wall-clock seconds.
    pub solve_time: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<IterRecord>,
}

impl MpcSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub(crate) fn infeasible(n: usize, solve_time: f64) -> Self {
        MpcSolution {
            status: SolveStatus::Infeasible,
            cost: f64::INFINITY,
            x_traj: Vec::with_capacity(n + 1),
            u_traj: Vec::with_capacity(n),
            solve_time,
            iterations: 0,
            kkt_residual: f64::INFINITY,
            trace: Vec::new(),
        }
    }
}

/// Interval over-approximation of the velocities reachable under a gear
/// schedule: engine-speed windows of both rows per stage, the acceleration
/// limit and the gear's wheel-force range. Empty means the fixed-gear
/// problem is certainly infeasible.
pub fn reachable_speeds(params: &VehicleParams, v0: f64, gears: &[Gear]) -> Option<Vec<SpeedRange>> {
    const PAD: f64 = 1e-9;
    let widen = |r: SpeedRange| SpeedRange { lo: r.lo - PAD * (1.0 + r.lo.abs()), hi: r.hi + PAD * (1.0 + r.hi.abs()) };
    let mut out = Vec::with_capacity(gears.len() + 1);
    let Some(&first) = gears.first() else {
        return Some(vec![SpeedRange { lo: v0, hi: v0 }]);
    };
    let start = SpeedRange { lo: v0, hi: v0 }.intersect(&widen(params.gear_velocity_range(first)))?;
    out.push(start);
    let p = params;
    let dv = p.max_accel * p.dt;
    for (i, &g) in gears.iter().enumerate() {
        let cur = out[i];
        let (f_lo, f_hi) = p.force_range(g);
        let k = p.dt / p.mass;
        let monotone = 2.0 * k * p.drag * cur.hi.abs().max(cur.lo.abs()) < 1.0;
        let next = if monotone {
            SpeedRange {
                lo: cur.lo + (k * (f_lo - p.drag * cur.lo * cur.lo - p.friction_force())).max(-dv),
                hi: cur.hi + (k * (f_hi - p.drag * cur.hi * cur.hi - p.friction_force())).min(dv),
            }
        } else {
            SpeedRange { lo: cur.lo - dv, hi: cur.hi + dv }
        };
        let next = widen(next);
        let mut next = next.intersect(&widen(p.gear_velocity_range(g)))?;
        if let Some(&following) = gears.get(i + 1) {
            next = next.intersect(&widen(p.gear_velocity_range(following)))?;
        }
        out.push(next);
    }
    Some(out)
}

/// Solves the fixed-gear problem by SQP.
///
/// `warm_start`, when given, must hold `N + 1` states and `N` inputs; its
/// first state is replaced by `x0`. Without it the constant-velocity
/// trajectory is used.
pub fn solve_nlp(
    problem: &NlpProblem<'_>,
    warm_start: Option<(&[State], &[ReducedInput])>,
    options: &SqpOptions,
) -> Result<MpcSolution> {
    problem.check(2)?;
    Ok(solve_unchecked(problem, warm_start, options))
}

/// [`solve_nlp`] without the `N >= 2` check; used for truncated horizons.
pub(crate) fn solve_unchecked(
    problem: &NlpProblem<'_>,
    warm_start: Option<(&[State], &[ReducedInput])>,
    options: &SqpOptions,
) -> MpcSolution {
    let start = Instant::now();
    let n = problem.horizon();
    if reachable_speeds(problem.params, problem.x0.v, problem.gears.gears()).is_none() {
        return MpcSolution::infeasible(n, start.elapsed().as_secs_f64());
    }
    let model = FixedGearNlp::new(problem.clone());
    let guess = match warm_start {
        Some((x, u)) if x.len() == n + 1 && u.len() == n => to_trajectory(x, u),
        _ => {
            let (x, u) = model.constant_velocity_guess();
            to_trajectory(&x, &u)
        }
    };
    let res = sqp::solve(&model, guess, options);
    let t = &res.trajectory;
    MpcSolution {
        status: res.status,
        cost: res.objective,
        x_traj: t.x.iter().map(|x| State::new(x[0], x[1])).collect(),
        u_traj: t.u.iter().map(|u| ReducedInput::new(u[0], u[1])).collect(),
        solve_time: start.elapsed().as_secs_f64(),
        iterations: res.iterations,
        kkt_residual: res.kkt_residual,
        trace: res.trace,
    }
}

/// Previous solution advanced by one step: warm start and policy input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftedSolution {
    /// `N` states; the first is the measured state.
    pub states: Vec<State>,
    /// `N` inputs; the last is repeated.
    pub inputs: Vec<ReducedInput>,
    /// `N` gears; the last is repeated.
    pub gears: GearSchedule,
}

impl ShiftedSolution {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    /// Warm start for a horizon-`N` problem under `gears`: the shifted states
    /// extended by one nominal step.
    pub fn warm_start(&self, params: &VehicleParams, gears: &GearSchedule) -> (Vec<State>, Vec<ReducedInput>) {
        let n = self.horizon();
        let mut x = self.states.clone();
        let last = x[n - 1];
        let u_last = self.inputs[n - 1];
        let g_last = gears.gears()[n - 1];
        x.push(params.step_dynamics(&last, &FullInput::new(u_last, g_last)));
        (x, self.inputs.clone())
    }
}

pub fn shift_solution(prev: &MpcSolution, prev_gears: &GearSchedule, x_now: State) -> Result<ShiftedSolution> {
    if !prev.is_optimal() {
        return Err(Error::NotOptimal(prev.status));
    }
    let n = prev.u_traj.len();
    if prev.x_traj.len() != n + 1 || prev_gears.len() != n {
        return Err(Error::LengthMismatch { what: "previous solution", got: prev.x_traj.len(), expected: n + 1 });
    }
    let mut states = Vec::with_capacity(n);
    states.push(x_now);
    states.extend_from_slice(&prev.x_traj[2..]);
    let mut inputs: Vec<ReducedInput> = prev.u_traj[1..].to_vec();
    inputs.push(prev.u_traj[n - 1]);
    let mut gears: Vec<Gear> = prev_gears.gears()[1..].to_vec();
    gears.push(prev_gears.gears()[n - 1]);
    Ok(ShiftedSolution { states, inputs, gears: GearSchedule::new(gears)? })
}
