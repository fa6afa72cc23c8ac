//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves
//!
//! ```text
//!     minimize    ½ xᵀ H x + gᵀ x
//!     subject to  A x ≤ b
//! ```
//!
//! The problems produced by the SQP core are small (tens of variables), so
//! the projected quantities are recomputed from the active set on every
//! iteration instead of being updated with Givens rotations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    /// One non-negative multiplier per row of `A`.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NotPositiveDefinite;

/// Relative violation below which a row counts as satisfied.
const FEAS_TOL: f64 = 1e-11;

pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution, NotPositiveDefinite> {
    let n = g.len();
    let m = b.len();
    debug_assert_eq!(h.shape(), (n, n));
    debug_assert_eq!(a.shape(), (m, n));

    let chol = Cholesky::new(h.clone()).ok_or(NotPositiveDefinite)?;
    let hinv = chol.inverse();

    let row_norms: Vec<f64> = (0..m).map(|i| a.row(i).norm()).collect();
    let mut x = -(&hinv * g);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut in_active = vec![false; m];
    // Hinv * a_i for every row, reused across iterations.
    let hinv_at = &hinv * a.transpose();

    let max_iter = 10 * (n + m) + 50;
    let mut iterations = 0;

    let finish = |status, x: DVector<f64>, active: Vec<usize>, u: Vec<f64>, iterations| {
        let mut multipliers = DVector::zeros(m);
        for (k, &i) in active.iter().enumerate() {
            multipliers[i] = u[k].max(0.0);
        }
        QpSolution { status, x, multipliers, active, iterations }
    };

    loop {
        // Pick the most violated row (scaled by its norm).
        let mut worst = None;
        let mut worst_val = -FEAS_TOL;
        for i in 0..m {
            if in_active[i] || row_norms[i] == 0.0 {
                continue;
            }
            let slack = b[i] - a.row(i).dot(&x.transpose());
            let scaled = slack / (row_norms[i] * (1.0 + x.amax()).max(1.0)).max(1e-300);
            if scaled < worst_val {
                worst_val = scaled;
                worst = Some(i);
            }
        }
        let Some(p) = worst else {
            return Ok(finish(QpStatus::Solved, x, active, u, iterations));
        };

        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(finish(QpStatus::MaxIterations, x, active, u, iterations));
            }
            // Step directions for adding row p: primal z, dual r.
            let hinv_np = hinv_at.column(p).into_owned();
            let (z, r) = if active.is_empty() {
                (hinv_np.clone(), Vec::new())
            } else {
                let q = active.len();
                let mut mm = DMatrix::<f64>::zeros(q, q);
                let mut w = DVector::<f64>::zeros(q);
                for (ki, &i) in active.iter().enumerate() {
                    let ai = a.row(i);
                    for (kj, &j) in active.iter().enumerate() {
                        mm[(ki, kj)] = ai.dot(&hinv_at.column(j).transpose());
                    }
                    w[ki] = ai.dot(&hinv_np.transpose());
                }
                let r = match Cholesky::<f64, Dyn>::new(mm.clone()) {
                    Some(c) => c.solve(&w),
                    None => match mm.lu().solve(&w) {
                        Some(r) => r,
                        None => DVector::zeros(q),
                    },
                };
                let mut z = hinv_np.clone();
                for (k, &j) in active.iter().enumerate() {
                    z.axpy(-r[k], &hinv_at.column(j), 1.0);
                }
                (z, r.iter().copied().collect())
            };

            // In "A x <= b" form the added row's normal is -a_p, so the
            // quantities below carry the sign flip of the textbook method.
            let ap = a.row(p);
            let zn = ap.dot(&z.transpose());
            let base = ap.dot(&hinv_np.transpose());
            let slack_p = b[p] - ap.dot(&x.transpose());

            // Partial step: largest dual step keeping active multipliers >= 0.
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop_k = Some(k);
                    }
                }
            }
            // Full step: makes row p active.
            let t2 = if zn > 1e-12 * base.abs().max(1e-300) { -slack_p / zn } else { f64::INFINITY };

            if t1.is_infinite() && t2.is_infinite() {
                return Ok(finish(QpStatus::Infeasible, x, active, u, iterations));
            }
            if t2.is_infinite() {
                for (k, rk) in r.iter().enumerate() {
                    u[k] -= t1 * rk;
                }
                u_p += t1;
                let k = drop_k.expect("finite partial step has a blocking row");
                in_active[active[k]] = false;
                active.remove(k);
                u.remove(k);
                continue;
            }
            let t = t1.min(t2);
            // Moving along -z decreases a_p x (the row normal is -a_p).
            x.axpy(-t, &z, 1.0);
            for (k, rk) in r.iter().enumerate() {
                u[k] -= t * rk;
            }
            u_p += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                in_active[p] = true;
                break;
            }
            let k = drop_k.expect("partial step has a blocking row");
            in_active[active[k]] = false;
            active.remove(k);
            u.remove(k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dm(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn unconstrained_minimum() {
        let h = dm(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let g = DVector::from_vec(vec![-2.0, -4.0]);
        let a = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        let sol = solve_qp(&h, &g, &a, &b).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.x[0], 1.0);
        assert_relative_eq!(sol.x[1], 1.0);
    }

    #[test]
    fn textbook_example() {
        // min ½x² + ½y² + x  s.t. x + 2y >= 1  ->  (-0.6, 0.8)
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        let a = dm(1, 2, &[-1.0, -2.0]);
        let b = DVector::from_vec(vec![-1.0]);
        let sol = solve_qp(&h, &g, &a, &b).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.x[0], -0.6, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.8, epsilon = 1e-12);
        // Stationarity: H x + g + Aᵀ μ = 0.
        let res = &h * &sol.x + &g + a.transpose() * &sol.multipliers;
        assert!(res.amax() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let a = dm(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0]); // x <= -1 and x >= 1
        let sol = solve_qp(&h, &g, &a, &b).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let h = dm(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let g = DVector::zeros(2);
        let a = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        assert!(solve_qp(&h, &g, &a, &b).is_err());
    }

    #[test]
    fn box_constrained_matches_projection() {
        // Diagonal H with box constraints: the solution is the clipped
        // unconstrained minimiser.
        let d = [1.0, 3.0, 0.5, 2.0];
        let c = [-5.0, 1.0, 0.2, -0.1];
        let h = DMatrix::from_diagonal(&DVector::from_row_slice(&d));
        let g = DVector::from_row_slice(&c);
        let mut a = DMatrix::zeros(8, 4);
        let mut b = DVector::zeros(8);
        for i in 0..4 {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = 1.0;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = 1.0;
        }
        let sol = solve_qp(&h, &g, &a, &b).unwrap();
        for i in 0..4 {
            let expect = (-c[i] / d[i]).clamp(-1.0, 1.0);
            assert_relative_eq!(sol.x[i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let m = rng.gen_range(0..12);
            let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            // Feasible by construction: x = 0 satisfies A x <= b with b >= 0.
            let b = DVector::from_fn(m, |_, _| rng.gen_range(0.0..2.0));
            let sol = solve_qp(&h, &g, &a, &b).unwrap();
            assert_eq!(sol.status, QpStatus::Solved);
            let res = &h * &sol.x + &g + a.transpose() * &sol.multipliers;
            assert!(res.amax() < 1e-9, "stationarity {}", res.amax());
            let slack = &b - &a * &sol.x;
            for i in 0..m {
                assert!(slack[i] > -1e-9);
                assert!(sol.multipliers[i] >= 0.0);
                assert!((sol.multipliers[i] * slack[i]).abs() < 1e-9);
            }
        }
    }
}
