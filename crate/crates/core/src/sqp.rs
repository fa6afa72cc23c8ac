//! Structured SQP for two-state optimal control problems in multiple-shooting form.
//!
//! The decision vector stacks the states `x(0..=N)` followed by the inputs
//! `u(0..N)`. Equality constraints are the initial condition and the shooting
//! defects `x(i+1) - f_i(x(i), u(i))`; every inequality is linear. Each QP
//! subproblem is condensed onto the (scaled) input increments and solved by
//! the dual active-set routine in [`crate::qp`]. When the linearized defects
//! cannot be met, the subproblem is relaxed with ℓ1-penalized defect slacks.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2xX, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::qp::{solve_qp, QpSolution, QpStatus};

pub type Vec2 = Vector2<f64>;

/// A scalar entry of the decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    /// Component `c` of state `x(i)`.
    X(usize, usize),
    /// Component `c` of input `u(i)`.
    U(usize, usize),
}

/// Constraint family a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    Acceleration,
    TorqueRate,
    CrossStepTorqueRate,
    TorqueBound,
    BrakeBound,
    /// Engine speed of gear `j(i)` evaluated at `x2(i)`.
    EngineSpeedStart,
    /// Engine speed of gear `j(i)` evaluated at `x2(i+1)`.
    EngineSpeedEnd,
    ForceBound,
    SpeedBound,
}

/// `Σ coef · var <= rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(Var, f64)>,
    pub rhs: f64,
    pub kind: RowKind,
    pub stage: usize,
}

pub struct StageHessian<const NU: usize> {
    pub xx: Matrix2<f64>,
    pub xu: SMatrix<f64, 2, NU>,
    pub uu: SMatrix<f64, NU, NU>,
}

/// A discrete-time optimal control problem with two states and `NU` inputs.
pub trait StageModel<const NU: usize> {
    fn horizon(&self) -> usize;
    fn initial_state(&self) -> Vec2;
    fn dynamics(&self, i: usize, x: &Vec2, u: &SVector<f64, NU>) -> Vec2;
    /// `(∂f/∂x, ∂f/∂u)`.
    fn dynamics_jacobian(&self, i: usize, x: &Vec2, u: &SVector<f64, NU>) -> (Matrix2<f64>, SMatrix<f64, 2, NU>);
    fn stage_cost(&self, i: usize, x: &Vec2, u: &SVector<f64, NU>) -> f64;
    fn stage_gradient(&self, i: usize, x: &Vec2, u: &SVector<f64, NU>) -> (Vec2, SVector<f64, NU>);
    /// Model Hessian of the stage cost used in the QP subproblem.
    fn stage_hessian(&self, i: usize, x: &Vec2, u: &SVector<f64, NU>) -> StageHessian<NU>;
    fn terminal_cost(&self, x: &Vec2) -> f64;
    fn terminal_gradient(&self, x: &Vec2) -> Vec2;
    fn terminal_hessian(&self, x: &Vec2) -> Matrix2<f64>;
    fn rows(&self) -> &[LinearRow];
    /// Typical magnitude of each input, used to scale the QP variables.
    fn input_scale(&self) -> SVector<f64, NU>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<const NU: usize> {
    pub x: Vec<Vec2>,
    pub u: Vec<SVector<f64, NU>>,
}

impl<const NU: usize> Trajectory<NU> {
    pub fn get(&self, v: Var) -> f64 {
        match v {
            Var::X(i, c) => self.x[i][c],
            Var::U(i, c) => self.u[i][c],
        }
    }

    /// Flattens into `[x(0..=N), u(0..N)]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.x.len() + NU * self.u.len());
        for x in &self.x {
            z.extend(x.iter());
        }
        for u in &self.u {
            z.extend(u.iter());
        }
        z
    }

    pub fn from_vector(z: &[f64], horizon: usize) -> Self {
        let nx = 2 * (horizon + 1);
        assert_eq!(z.len(), nx + NU * horizon);
        let x = (0..=horizon).map(|i| Vec2::new(z[2 * i], z[2 * i + 1])).collect();
        let u = (0..horizon).map(|i| SVector::<f64, NU>::from_fn(|c, _| z[nx + NU * i + c])).collect();
        Trajectory { x, u }
    }
}

/// Index of `v` in the flattened decision vector.
pub fn var_index<const NU: usize>(v: Var, horizon: usize) -> usize {
    match v {
        Var::X(i, c) => 2 * i + c,
        Var::U(i, c) => 2 * (horizon + 1) + NU * i + c,
    }
}

pub fn row_value<const NU: usize>(row: &LinearRow, t: &Trajectory<NU>) -> f64 {
    row.terms.iter().map(|&(v, c)| c * t.get(v)).sum()
}

pub fn objective<const NU: usize, M: StageModel<NU>>(m: &M, t: &Trajectory<NU>) -> f64 {
    let n = m.horizon();
    (0..n).map(|i| m.stage_cost(i, &t.x[i], &t.u[i])).sum::<f64>() + m.terminal_cost(&t.x[n])
}

/// Shooting defects `x(i+1) - f_i(x(i), u(i))`.
pub fn defects<const NU: usize, M: StageModel<NU>>(m: &M, t: &Trajectory<NU>) -> Vec<Vec2> {
    (0..m.horizon()).map(|i| t.x[i + 1] - m.dynamics(i, &t.x[i], &t.u[i])).collect()
}

/// Largest violation over the initial condition, defects and rows.
pub fn max_violation<const NU: usize, M: StageModel<NU>>(m: &M, t: &Trajectory<NU>) -> f64 {
    let ic = (t.x[0] - m.initial_state()).amax();
    let dyn_ = defects(m, t).iter().map(|d| d.amax()).fold(0.0, f64::max);
    let rows = m.rows().iter().map(|r| (row_value(r, t) - r.rhs).max(0.0)).fold(0.0, f64::max);
    ic.max(dyn_).max(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqpOptions {
    pub max_iterations: usize,
    pub kkt_tol: f64,
    pub feasibility_tol: f64,
    /// ℓ1 penalty on defect slacks in the elastic subproblem.
    pub elastic_penalty: f64,
    /// Slack norm above which a converged elastic phase means infeasible.
    pub elastic_slack_tol: f64,
    pub record_trace: bool,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions {
            max_iterations: 100,
            kkt_tol: 1e-6,
            feasibility_tol: 1e-8,
            elastic_penalty: 1e4,
            elastic_slack_tol: 1e-6,
            record_trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// One SQP iteration, as written to solver traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub objective: f64,
    pub merit: f64,
    pub kkt_residual: f64,
    pub infeasibility: f64,
    pub step_norm: f64,
    pub step_length: f64,
    pub elastic: bool,
    pub hessian_shift: f64,
    pub qp_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct SqpResult<const NU: usize> {
    pub status: SolveStatus,
    pub trajectory: Trajectory<NU>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub infeasibility: f64,
    pub trace: Vec<IterRecord>,
}

const HESSIAN_SHIFTS: [f64; 9] = [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6];

/// Condensed QP subproblem around the current iterate.
struct Subproblem {
    h: DMatrix<f64>,
    g: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// Original row index of each QP row (`None` for slack bounds).
    row_of: Vec<Option<usize>>,
    /// `dx(i) = s[i] + sens[i] * w`.
    s: Vec<Vec2>,
    sens: Vec<Matrix2xX<f64>>,
    n_inputs: usize,
}

struct Step<const NU: usize> {
    dx: Vec<Vec2>,
    du: Vec<SVector<f64, NU>>,
    /// Linearized defect remaining after the step (the elastic slacks).
    residual_defects: Vec<Vec2>,
    row_mult: Vec<f64>,
    shift: f64,
    qp_iterations: usize,
    scaled_norm: f64,
}

struct Linearization<const NU: usize> {
    a: Vec<Matrix2<f64>>,
    b: Vec<SMatrix<f64, 2, NU>>,
    hess: Vec<StageHessian<NU>>,
    hess_n: Matrix2<f64>,
    gx: Vec<Vec2>,
    gu: Vec<SVector<f64, NU>>,
    gx_n: Vec2,
    defects: Vec<Vec2>,
    row_values: Vec<f64>,
}

fn linearize<const NU: usize, M: StageModel<NU>>(m: &M, t: &Trajectory<NU>) -> Linearization<NU> {
    let n = m.horizon();
    let mut lin = Linearization {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        hess: Vec::with_capacity(n),
        hess_n: m.terminal_hessian(&t.x[n]),
        gx: Vec::with_capacity(n),
        gu: Vec::with_capacity(n),
        gx_n: m.terminal_gradient(&t.x[n]),
        defects: defects(m, t),
        row_values: m.rows().iter().map(|r| row_value(r, t)).collect(),
    };
    for i in 0..n {
        let (a, b) = m.dynamics_jacobian(i, &t.x[i], &t.u[i]);
        lin.a.push(a);
        lin.b.push(b);
        lin.hess.push(convexify(m.stage_hessian(i, &t.x[i], &t.u[i]), &m.input_scale()));
        let (gx, gu) = m.stage_gradient(i, &t.x[i], &t.u[i]);
        lin.gx.push(gx);
        lin.gu.push(gu);
    }
    lin
}

/// Clips negative eigenvalues of a stage block, measured in scaled input
/// units, to zero. The bilinear fuel term otherwise makes the condensed
/// Hessian indefinite and forces a large shift that stalls progress.
fn convexify<const NU: usize>(h: StageHessian<NU>, scale: &SVector<f64, NU>) -> StageHessian<NU> {
    let nb = 2 + NU;
    let d: Vec<f64> = (0..nb).map(|k| if k < 2 { 1.0 } else { scale[k - 2] }).collect();
    let mut full = DMatrix::<f64>::zeros(nb, nb);
    full.view_mut((0, 0), (2, 2)).copy_from(&h.xx);
    full.view_mut((0, 2), (2, NU)).copy_from(&h.xu);
    full.view_mut((2, 0), (NU, 2)).copy_from(&h.xu.transpose());
    full.view_mut((2, 2), (NU, NU)).copy_from(&h.uu);
    for r in 0..nb {
        for c in 0..nb {
            full[(r, c)] *= d[r] * d[c];
        }
    }
    let eig = full.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return h;
    }
    let clipped = eig.eigenvalues.map(|e| e.max(0.0));
    let mut psd = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    for r in 0..nb {
        for c in 0..nb {
            psd[(r, c)] /= d[r] * d[c];
        }
    }
    let psd = (&psd + psd.transpose()) * 0.5;
    StageHessian {
        xx: psd.fixed_view::<2, 2>(0, 0).into_owned(),
        xu: psd.fixed_view::<2, NU>(0, 2).into_owned(),
        uu: psd.fixed_view::<NU, NU>(2, 2).into_owned(),
    }
}

fn build_subproblem<const NU: usize, M: StageModel<NU>>(
    m: &M,
    lin: &Linearization<NU>,
    elastic: bool,
    penalty: f64,
) -> Option<Subproblem> {
    let n = m.horizon();
    let scale = m.input_scale();
    let n_inputs = NU * n;
    let n_w = n_inputs + if elastic { 4 * n } else { 0 };

    let mut s = vec![Vec2::zeros(); n + 1];
    let mut sens = vec![Matrix2xX::<f64>::zeros(n_w); n + 1];
    for i in 0..n {
        s[i + 1] = lin.a[i] * s[i] - lin.defects[i];
        let mut next = &lin.a[i] * &sens[i];
        for c in 0..NU {
            let col = NU * i + c;
            for r in 0..2 {
                next[(r, col)] += lin.b[i][(r, c)] * scale[c];
            }
        }
        if elastic {
            for r in 0..2 {
                next[(r, n_inputs + 2 * i + r)] += 1.0;
                next[(r, n_inputs + 2 * n + 2 * i + r)] -= 1.0;
            }
        }
        sens[i + 1] = next;
    }

    // Objective in w: Σ Mᵢᵀ Hᵢ Mᵢ with Mᵢ = [sens_i; scaled input selector].
    let mut h = DMatrix::<f64>::zeros(n_w, n_w);
    let mut g = DVector::<f64>::zeros(n_w);
    for i in 0..=n {
        let nb = if i < n { 2 + NU } else { 2 };
        let mut mi = DMatrix::<f64>::zeros(nb, n_w);
        mi.rows_mut(0, 2).copy_from(&sens[i]);
        let mut hi = DMatrix::<f64>::zeros(nb, nb);
        let mut gi = DVector::<f64>::zeros(nb);
        if i < n {
            for c in 0..NU {
                mi[(2 + c, NU * i + c)] = scale[c];
            }
            let hs = &lin.hess[i];
            hi.view_mut((0, 0), (2, 2)).copy_from(&hs.xx);
            hi.view_mut((0, 2), (2, NU)).copy_from(&hs.xu);
            hi.view_mut((2, 0), (NU, 2)).copy_from(&hs.xu.transpose());
            hi.view_mut((2, 2), (NU, NU)).copy_from(&hs.uu);
            gi.rows_mut(0, 2).copy_from(&lin.gx[i]);
            gi.rows_mut(2, NU).copy_from(&lin.gu[i]);
        } else {
            hi.copy_from(&lin.hess_n);
            gi.copy_from(&lin.gx_n);
        }
        // Gradient at dx = s_i, du = 0.
        let mut shift_in = DVector::<f64>::zeros(nb);
        shift_in.rows_mut(0, 2).copy_from(&s[i]);
        let gi = gi + &hi * shift_in;
        let him = &hi * &mi;
        h += mi.transpose() * him;
        g += mi.transpose() * gi;
    }
    if elastic {
        for k in n_inputs..n_w {
            g[k] += penalty;
        }
    }

    let rows = m.rows();
    let mut a_rows: Vec<DVector<f64>> = Vec::with_capacity(rows.len() + 4 * n);
    let mut b_vals = Vec::with_capacity(rows.len() + 4 * n);
    let mut row_of = Vec::with_capacity(rows.len() + 4 * n);
    for (k, row) in rows.iter().enumerate() {
        let mut a = DVector::<f64>::zeros(n_w);
        let mut constant = 0.0;
        for &(v, coef) in &row.terms {
            match v {
                Var::X(i, c) => {
                    constant += coef * s[i][c];
                    a.axpy(coef, &sens[i].row(c).transpose(), 1.0);
                }
                Var::U(i, c) => a[NU * i + c] += coef * scale[c],
            }
        }
        let b = row.rhs - lin.row_values[k] - constant;
        if a.amax() == 0.0 {
            // Depends only on the fixed initial state.
            if b < -1e-9 * (1.0 + row.rhs.abs()) {
                return None;
            }
            continue;
        }
        a_rows.push(a);
        b_vals.push(b);
        row_of.push(Some(k));
    }
    if elastic {
        for k in n_inputs..n_w {
            let mut a = DVector::<f64>::zeros(n_w);
            a[k] = -1.0;
            a_rows.push(a);
            b_vals.push(0.0);
            row_of.push(None);
        }
    }
    let mut a = DMatrix::<f64>::zeros(a_rows.len(), n_w);
    for (r, row) in a_rows.iter().enumerate() {
        a.set_row(r, &row.transpose());
    }
    Some(Subproblem { h, g, a, b: DVector::from_vec(b_vals), row_of, s, sens, n_inputs })
}

fn solve_subproblem<const NU: usize>(
    sub: &Subproblem,
    n_rows: usize,
    horizon: usize,
    scale: &SVector<f64, NU>,
    defects: &[Vec2],
) -> Option<Step<NU>> {
    let n_w = sub.g.len();
    let mut found: Option<(QpSolution, f64)> = None;
    for &shift in &HESSIAN_SHIFTS {
        let mut h = sub.h.clone();
        for k in 0..n_w {
            h[(k, k)] += shift;
        }
        // Keep the matrix exactly symmetric for the factorization.
        let h = (&h + h.transpose()) * 0.5;
        if let Ok(sol) = solve_qp(&h, &sub.g, &sub.a, &sub.b) {
            found = Some((sol, shift));
            break;
        }
    }
    let (sol, shift) = found?;
    if sol.status != QpStatus::Solved {
        return None;
    }
    let w = &sol.x;
    let dx: Vec<Vec2> = (0..=horizon).map(|i| sub.s[i] + &sub.sens[i] * w).map(|v| Vec2::new(v[0], v[1])).collect();
    let du: Vec<SVector<f64, NU>> =
        (0..horizon).map(|i| SVector::<f64, NU>::from_fn(|c, _| w[NU * i + c] * scale[c])).collect();
    let residual_defects = if n_w > sub.n_inputs {
        (0..horizon)
            .map(|i| {
                let p = sub.n_inputs + 2 * i;
                let q = sub.n_inputs + 2 * horizon + 2 * i;
                Vec2::new(w[p] - w[q], w[p + 1] - w[q + 1])
            })
            .collect()
    } else {
        vec![Vec2::zeros(); defects.len()]
    };
    let mut row_mult = vec![0.0; n_rows];
    for (r, k) in sub.row_of.iter().enumerate() {
        if let Some(k) = k {
            row_mult[*k] = sol.multipliers[r];
        }
    }
    Some(Step {
        dx,
        du,
        residual_defects,
        row_mult,
        shift,
        qp_iterations: sol.iterations,
        scaled_norm: w.rows(0, sub.n_inputs).amax(),
    })
}

/// Adjoint recursion for the defect multipliers, then the NLP stationarity
/// residual at the current iterate (inputs measured in scaled units).
fn kkt_residual<const NU: usize, M: StageModel<NU>>(
    m: &M,
    lin: &Linearization<NU>,
    step: &Step<NU>,
) -> (f64, Vec<Vec2>) {
    let n = m.horizon();
    let scale = m.input_scale();
    let rows = m.rows();
    let mut row_x = vec![Vec2::zeros(); n + 1];
    let mut row_u = vec![SVector::<f64, NU>::zeros(); n];
    for (k, row) in rows.iter().enumerate() {
        let mu = step.row_mult[k];
        if mu == 0.0 {
            continue;
        }
        for &(v, c) in &row.terms {
            match v {
                Var::X(i, comp) => row_x[i][comp] += mu * c,
                Var::U(i, comp) => row_u[i][comp] += mu * c,
            }
        }
    }
    // QP-model gradient at the step.
    let qx = |i: usize| -> Vec2 {
        if i < n {
            let hs = &lin.hess[i];
            lin.gx[i] + hs.xx * step.dx[i] + hs.xu * step.du[i]
        } else {
            lin.gx_n + lin.hess_n * step.dx[n]
        }
    };
    // lambda[i] multiplies defect i-1, i.e. the equation for x(i).
    let mut lambda = vec![Vec2::zeros(); n + 1];
    lambda[n] = -(qx(n) + row_x[n]);
    for i in (1..n).rev() {
        lambda[i] = -(qx(i) + row_x[i]) + lin.a[i].transpose() * lambda[i + 1];
    }
    let mut res: f64 = 0.0;
    for i in 1..=n {
        let gx = if i < n { lin.gx[i] } else { lin.gx_n };
        let mut r = gx + row_x[i] + lambda[i];
        if i < n {
            r -= lin.a[i].transpose() * lambda[i + 1];
        }
        res = res.max(r.amax());
    }
    for i in 0..n {
        let r = lin.gu[i] + row_u[i] - lin.b[i].transpose() * lambda[i + 1];
        res = res.max(r.component_mul(&scale).amax());
    }
    for (k, row) in rows.iter().enumerate() {
        let slack = (row.rhs - lin.row_values[k]).abs();
        res = res.max(step.row_mult[k] * slack);
    }
    (res, lambda)
}

fn merit<const NU: usize, M: StageModel<NU>>(m: &M, t: &Trajectory<NU>, nu_eq: &[Vec2], nu_in: &[f64]) -> (f64, f64) {
    let f = objective(m, t);
    let mut pen = 0.0;
    for (d, w) in defects(m, t).iter().zip(nu_eq) {
        pen += w[0] * d[0].abs() + w[1] * d[1].abs();
    }
    for (r, w) in m.rows().iter().zip(nu_in) {
        pen += w * (row_value(r, t) - r.rhs).max(0.0);
    }
    (f + pen, f)
}

pub fn solve<const NU: usize, M: StageModel<NU>>(m: &M, guess: Trajectory<NU>, opts: &SqpOptions) -> SqpResult<NU> {
    let n = m.horizon();
    let scale = m.input_scale();
    let n_rows = m.rows().len();
    let mut t = guess;
    assert_eq!(t.x.len(), n + 1, "guess state length");
    assert_eq!(t.u.len(), n, "guess input length");
    t.x[0] = m.initial_state();

    let mut nu_eq = vec![Vec2::zeros(); n];
    let mut nu_in = vec![0.0; n_rows];
    let mut trace = Vec::new();
    let mut last_kkt = f64::INFINITY;
    let mut last_infeas = max_violation(m, &t);

    let result = |status, t: Trajectory<NU>, iterations, kkt, infeas, trace| SqpResult {
        status,
        objective: if status == SolveStatus::Optimal { objective(m, &t) } else { f64::INFINITY },
        trajectory: t,
        iterations,
        kkt_residual: kkt,
        infeasibility: infeas,
        trace,
    };

    for iter in 0..opts.max_iterations {
        let lin = linearize(m, &t);
        let infeas = max_violation(m, &t);
        last_infeas = infeas;

        let mut elastic = false;
        let mut step = build_subproblem(m, &lin, false, 0.0)
            .and_then(|sub| solve_subproblem::<NU>(&sub, n_rows, n, &scale, &lin.defects));
        if step.is_none() {
            elastic = true;
            step = build_subproblem(m, &lin, true, opts.elastic_penalty)
                .and_then(|sub| solve_subproblem::<NU>(&sub, n_rows, n, &scale, &lin.defects));
        }
        let Some(step) = step else {
            // Only rows on the fixed initial state can make the elastic QP fail.
            return result(SolveStatus::Infeasible, t, iter, last_kkt, infeas, trace);
        };

        let (kkt, lambda) = kkt_residual(m, &lin, &step);
        last_kkt = kkt;
        let slack_norm: f64 = step.residual_defects.iter().map(|d| d[0].abs() + d[1].abs()).sum();

        if !elastic && kkt < opts.kkt_tol && infeas < opts.feasibility_tol {
            if opts.record_trace {
                trace.push(IterRecord {
                    iteration: iter,
                    objective: objective(m, &t),
                    merit: merit(m, &t, &nu_eq, &nu_in).0,
                    kkt_residual: kkt,
                    infeasibility: infeas,
                    step_norm: step.scaled_norm,
                    step_length: 0.0,
                    elastic,
                    hessian_shift: step.shift,
                    qp_iterations: step.qp_iterations,
                });
            }
            return result(SolveStatus::Optimal, t, iter, kkt, infeas, trace);
        }

        // Penalty weights must dominate the multipliers for exactness.
        for i in 0..n {
            for c in 0..2 {
                let target = if elastic { opts.elastic_penalty } else { lambda[i + 1][c].abs() };
                if nu_eq[i][c] < 1.1 * target {
                    nu_eq[i][c] = 2.0 * target + 1e-8;
                }
            }
        }
        for k in 0..n_rows {
            if nu_in[k] < 1.1 * step.row_mult[k] {
                nu_in[k] = 2.0 * step.row_mult[k] + 1e-8;
            }
        }

        let (phi0, f0) = merit(m, &t, &nu_eq, &nu_in);
        let mut grad_dot = 0.0;
        for i in 0..=n {
            let gx = if i < n { lin.gx[i] } else { lin.gx_n };
            grad_dot += gx.dot(&step.dx[i]);
        }
        for i in 0..n {
            grad_dot += lin.gu[i].dot(&step.du[i]);
        }
        let mut pen_change = 0.0;
        for i in 0..n {
            for c in 0..2 {
                pen_change += nu_eq[i][c] * (step.residual_defects[i][c].abs() - lin.defects[i][c].abs());
            }
        }
        for (k, row) in m.rows().iter().enumerate() {
            pen_change -= nu_in[k] * (lin.row_values[k] - row.rhs).max(0.0);
        }
        let slope = grad_dot + pen_change;

        if elastic && step.scaled_norm < 1e-9 && slack_norm > opts.elastic_slack_tol {
            if opts.record_trace {
                trace.push(IterRecord {
                    iteration: iter,
                    objective: f0,
                    merit: phi0,
                    kkt_residual: kkt,
                    infeasibility: infeas,
                    step_norm: step.scaled_norm,
                    step_length: 0.0,
                    elastic,
                    hessian_shift: step.shift,
                    qp_iterations: step.qp_iterations,
                });
            }
            return result(SolveStatus::Infeasible, t, iter + 1, kkt, infeas, trace);
        }

        let candidate = |alpha: f64| -> Trajectory<NU> {
            let mut c = t.clone();
            for i in 0..=n {
                c.x[i] += step.dx[i] * alpha;
            }
            for i in 0..n {
                c.u[i] += step.du[i] * alpha;
            }
            c
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let c = candidate(alpha);
            let (phi, _) = merit(m, &c, &nu_eq, &nu_in);
            if phi <= phi0 + 1e-4 * alpha * slope.min(0.0) + 1e-14 * phi0.abs().max(1.0) {
                accepted = Some(c);
                break;
            }
            alpha *= 0.5;
        }

        if opts.record_trace {
            trace.push(IterRecord {
                iteration: iter,
                objective: f0,
                merit: phi0,
                kkt_residual: kkt,
                infeasibility: infeas,
                step_norm: step.scaled_norm,
                step_length: if accepted.is_some() { alpha } else { 0.0 },
                elastic,
                hessian_shift: step.shift,
                qp_iterations: step.qp_iterations,
            });
        }

        match accepted {
            Some(c) => {
                t = c;
                t.x[0] = m.initial_state();
            }
            None => {
                let status = if elastic && slack_norm > opts.elastic_slack_tol {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::MaxIterations
                };
                return result(status, t, iter + 1, kkt, infeas, trace);
            }
        }
    }
    result(SolveStatus::MaxIterations, t, opts.max_iterations, last_kkt, last_infeas, trace)
}
