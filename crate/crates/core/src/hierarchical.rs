//! Decoupled comparison controller: a force-level NLP on lumped dynamics,
//! followed by rule-based gear selection and torque/brake reconstruction.

use std::time::Instant;

use nalgebra::{Matrix2, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::{SolveStatus, SqpOptions};
use crate::sqp::{self, LinearRow, RowKind, StageHessian, StageModel, Trajectory, Var, Vec2};
use crate::vehicle::{FullInput, Gear, ReducedInput, State, TrackingWeights, VehicleParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceSolution {
    pub status: SolveStatus,
    pub cost: f64,
    /// `N` lumped longitudinal forces.
    pub forces: Vec<f64>,
    pub x_traj: Vec<State>,
    pub solve_time: f64,
    pub iterations: usize,
}

/// Largest wheel force at velocity `v`: full torque in the feasible gear with
/// the largest ratio.
pub fn max_traction_force(v: f64, params: &VehicleParams) -> Result<f64> {
    let gear = params.feasible_gears(v).min().ok_or(Error::NoFeasibleGear(v))?;
    Ok(params.torque_max * params.traction_gain(gear))
}

/// Lower force limit: minimum torque in first gear with full braking.
pub fn min_force(params: &VehicleParams) -> f64 {
    params.torque_min * params.traction_gain(Gear::LOWEST) - params.brake_max
}

struct ForceModel<'a> {
    x0: State,
    x_ref: &'a [State],
    weights: TrackingWeights,
    params: &'a VehicleParams,
    rows: Vec<LinearRow>,
}

impl<'a> ForceModel<'a> {
    fn new(x0: State, x_ref: &'a [State], f_max: f64, params: &'a VehicleParams, weights: TrackingWeights) -> Self {
        let n = x_ref.len() - 1;
        let (v_min, v_max) = params.velocity_bounds();
        let dv = params.max_accel * params.dt;
        let f_min = min_force(params);
        let mut rows = Vec::with_capacity(8 * n);
        let mut push = |terms: Vec<(Var, f64)>, rhs: f64, kind, stage| rows.push(LinearRow { terms, rhs, kind, stage });
        for i in 0..n {
            push(vec![(Var::X(i + 1, 1), 1.0), (Var::X(i, 1), -1.0)], dv, RowKind::Acceleration, i);
            push(vec![(Var::X(i, 1), 1.0), (Var::X(i + 1, 1), -1.0)], dv, RowKind::Acceleration, i);
            push(vec![(Var::U(i, 0), 1.0)], f_max, RowKind::ForceBound, i);
            push(vec![(Var::U(i, 0), -1.0)], -f_min, RowKind::ForceBound, i);
            push(vec![(Var::X(i + 1, 1), 1.0)], v_max, RowKind::SpeedBound, i);
            push(vec![(Var::X(i + 1, 1), -1.0)], -v_min, RowKind::SpeedBound, i);
        }
        ForceModel { x0, x_ref, weights, params, rows }
    }

    fn q(&self) -> Matrix2<f64> {
        let q = self.weights.matrix();
        Matrix2::new(q[0][0], q[0][1], q[1][0], q[1][1])
    }

    fn tracking_gradient(&self, i: usize, x: &Vec2) -> Vec2 {
        let r = &self.x_ref[i];
        let q = self.q();
        (q + q.transpose()) * Vec2::new(x[0] - r.p, x[1] - r.v)
    }
}

impl StageModel<1> for ForceModel<'_> {
    fn horizon(&self) -> usize {
        self.x_ref.len() - 1
    }

    fn initial_state(&self) -> Vec2 {
        Vec2::new(self.x0.p, self.x0.v)
    }

    fn dynamics(&self, _i: usize, x: &Vec2, u: &SVector<f64, 1>) -> Vec2 {
        let p = self.params;
        let accel = (u[0] - p.drag * x[1] * x[1] - p.friction_force()) / p.mass;
        Vec2::new(x[0] + x[1] * p.dt, x[1] + p.dt * accel)
    }

    fn dynamics_jacobian(&self, _i: usize, x: &Vec2, _u: &SVector<f64, 1>) -> (Matrix2<f64>, SMatrix<f64, 2, 1>) {
        let p = self.params;
        let k = p.dt / p.mass;
        (Matrix2::new(1.0, p.dt, 0.0, 1.0 - 2.0 * k * p.drag * x[1]), SMatrix::<f64, 2, 1>::new(0.0, k))
    }

    fn stage_cost(&self, i: usize, x: &Vec2, _u: &SVector<f64, 1>) -> f64 {
        self.weights.tracking_cost(&State::new(x[0], x[1]), &self.x_ref[i])
    }

    fn stage_gradient(&self, i: usize, x: &Vec2, _u: &SVector<f64, 1>) -> (Vec2, SVector<f64, 1>) {
        (self.tracking_gradient(i, x), SVector::<f64, 1>::zeros())
    }

    fn stage_hessian(&self, _i: usize, _x: &Vec2, _u: &SVector<f64, 1>) -> StageHessian<1> {
        let q = self.q();
        StageHessian { xx: q + q.transpose(), xu: SMatrix::<f64, 2, 1>::zeros(), uu: SMatrix::<f64, 1, 1>::zeros() }
    }

    fn terminal_cost(&self, x: &Vec2) -> f64 {
        self.weights.tracking_cost(&State::new(x[0], x[1]), &self.x_ref[self.horizon()])
    }

    fn terminal_gradient(&self, x: &Vec2) -> Vec2 {
        self.tracking_gradient(self.horizon(), x)
    }

    fn terminal_hessian(&self, _x: &Vec2) -> Matrix2<f64> {
        let q = self.q();
        q + q.transpose()
    }

    fn rows(&self) -> &[LinearRow] {
        &self.rows
    }

    fn input_scale(&self) -> SVector<f64, 1> {
        SVector::<f64, 1>::new(1000.0)
    }
}

/// Tracking-only force NLP over `x_ref.len() - 1` steps with the upper force
/// limit `f_max`.
pub fn solve_force_nlp(
    x0: State,
    x_ref: &[State],
    f_max: f64,
    params: &VehicleParams,
    weights: TrackingWeights,
    options: &SqpOptions,
) -> Result<ForceSolution> {
    let n = x_ref.len().saturating_sub(1);
    if n < 2 {
        return Err(Error::Horizon { min: 2, got: n });
    }
    let start = Instant::now();
    let model = ForceModel::new(x0, x_ref, f_max, params, weights);
    // Hold the current speed with the balance force, clamped into its bounds.
    let balance =
        (params.drag * x0.v * x0.v + params.friction_force()).clamp(min_force(params), f_max.max(min_force(params)));
    let mut guess = Trajectory::<1> { x: vec![Vec2::new(x0.p, x0.v)], u: vec![SVector::<f64, 1>::new(balance); n] };
    for i in 0..n {
        let next = model.dynamics(i, &guess.x[i], &guess.u[i]);
        guess.x.push(next);
    }
    let res = sqp::solve(&model, guess, options);
    Ok(ForceSolution {
        status: res.status,
        cost: res.objective,
        forces: res.trajectory.u.iter().map(|u| u[0]).collect(),
        x_traj: res.trajectory.x.iter().map(|x| State::new(x[0], x[1])).collect(),
        solve_time: start.elapsed().as_secs_f64(),
        iterations: res.iterations,
    })
}

/// Torque and brake realizing wheel force `force` in `gear`, before clipping.
pub fn split_force(force: f64, gear: Gear, params: &VehicleParams) -> ReducedInput {
    let k = params.traction_gain(gear);
    if force >= 0.0 {
        ReducedInput::new(force / k, 0.0)
    } else {
        ReducedInput::new(params.torque_min, -force + params.torque_min * k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalStep {
    pub input: FullInput,
    pub force: ForceSolution,
}

/// One step of the decoupled controller.
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_step(
    x_now: State,
    x_ref: &[State],
    prev_gear: Option<Gear>,
    prev_torque: Option<f64>,
    params: &VehicleParams,
    weights: TrackingWeights,
    options: &SqpOptions,
) -> Result<HierarchicalStep> {
    let phi = params.feasible_gears(x_now.v);
    let top = phi.max().ok_or(Error::NoFeasibleGear(x_now.v))?;
    let gear = prev_gear.map_or(top, |g| g.step_toward(top));
    let f_max = max_traction_force(x_now.v, params)?;
    let force = solve_force_nlp(x_now, x_ref, f_max, params, weights, options)?;
    if force.status != SolveStatus::Optimal {
        return Err(Error::Controller { step: 0, reason: format!("force problem returned {:?}", force.status) });
    }
    let raw = split_force(force.forces[0], gear, params);
    let (mut t_lo, mut t_hi) = (params.torque_min, params.torque_max);
    if let Some(prev) = prev_torque {
        let dt = params.max_torque_rate * params.dt;
        t_lo = t_lo.max(prev - dt);
        t_hi = t_hi.min(prev + dt);
    }
    let torque = raw.torque.clamp(t_lo, t_hi.max(t_lo));
    let brake = raw.brake.clamp(params.brake_min, params.brake_max);
    Ok(HierarchicalStep { input: FullInput::new(ReducedInput::new(torque, brake), gear), force })
}
