//! Exact gear-schedule search: enumerates no-skip schedules and evaluates each
//! with the fixed-gear NLP, optionally pruning with reachability and
//! truncated-horizon lower bounds.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::{reachable_speeds, solve_unchecked, GearSchedule, MpcSolution, NlpProblem, SqpOptions};
use crate::vehicle::{Gear, State, TrackingWeights, VehicleParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exhaustive,
    BranchAndBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GearSearchConfig {
    pub mode: SearchMode,
    pub prune_by_speed_reachability: bool,
    /// Maximum number of full-horizon NLP solves.
    pub leaf_budget: usize,
    /// Restrict the first gear to within one of the previously applied gear.
    pub enforce_first_gear_continuity: bool,
}

impl Default for GearSearchConfig {
    fn default() -> Self {
        GearSearchConfig {
            mode: SearchMode::BranchAndBound,
            prune_by_speed_reachability: true,
            leaf_budget: 100_000,
            enforce_first_gear_continuity: false,
        }
    }
}

impl GearSearchConfig {
    pub fn exhaustive() -> Self {
        GearSearchConfig { mode: SearchMode::Exhaustive, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.leaf_budget == 0 {
            return Err(Error::InvalidParams("leaf_budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gear co-optimization problem data; the horizon is `x_ref.len() - 1`.
#[derive(Clone, Debug)]
pub struct MinlpProblem<'a> {
    pub x0: State,
    pub x_ref: &'a [State],
    pub beta: f64,
    pub weights: TrackingWeights,
    pub params: &'a VehicleParams,
    pub prev_gear: Option<Gear>,
    pub prev_torque: Option<f64>,
}

impl MinlpProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.x_ref.len().saturating_sub(1)
    }

    /// The fixed-gear problem for `gears`, possibly over a truncated horizon.
    pub fn with_gears<'b>(&'b self, gears: &'b GearSchedule) -> NlpProblem<'b> {
        NlpProblem {
            x0: self.x0,
            x_ref: &self.x_ref[..=gears.len()],
            gears,
            beta: self.beta,
            weights: self.weights,
            params: self.params,
            prev_torque: self.prev_torque,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    /// No velocity sequence is compatible with the prefix's engine-speed windows.
    Unreachable,
    /// The prefix's lower bound exceeds the incumbent.
    Bound { lower: f64, incumbent: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedPrefix {
    pub prefix: Vec<u8>,
    pub reason: PruneReason,
}

#[derive(Clone, Debug)]
pub struct MinlpResult {
    /// Best solution found; `Infeasible` with infinite cost when every
    /// schedule is infeasible.
    pub solution: MpcSolution,
    pub schedule: Option<GearSchedule>,
    /// Full-horizon NLP solves.
    pub leaves_solved: usize,
    /// Truncated-horizon solves used as lower bounds.
    pub bound_solves: usize,
    pub budget_exhausted: bool,
    pub pruned: Vec<PrunedPrefix>,
}

impl MinlpResult {
    /// True when `schedule` starts with a pruned prefix.
    pub fn was_pruned(&self, schedule: &GearSchedule) -> bool {
        let numbers = schedule.numbers();
        self.pruned.iter().any(|p| numbers.starts_with(&p.prefix))
    }
}

/// All no-skip schedules of length `n` in lexicographic order. With
/// `j_start`, the first gear is also within one of it.
pub fn enumerate_gear_sequences(j_start: Option<Gear>, n: usize) -> impl Iterator<Item = GearSchedule> {
    let mut out = Vec::new();
    if n > 0 {
        let mut prefix = Vec::with_capacity(n);
        enumerate_into(&mut prefix, j_start, n, &mut out);
    }
    out.into_iter()
}

fn enumerate_into(prefix: &mut Vec<Gear>, j_start: Option<Gear>, n: usize, out: &mut Vec<GearSchedule>) {
    if prefix.len() == n {
        out.push(GearSchedule::new(prefix.clone()).expect("children respect the shift limit"));
        return;
    }
    for g in children(prefix.last().copied().or(j_start)) {
        prefix.push(g);
        enumerate_into(prefix, j_start, n, out);
        prefix.pop();
    }
}

/// Gears allowed after `prev`, ascending.
fn children(prev: Option<Gear>) -> impl Iterator<Item = Gear> {
    Gear::all().filter(move |g| prev.map_or(true, |p| p.distance(*g) <= 1))
}

struct Incumbent {
    solution: MpcSolution,
    schedule: GearSchedule,
}

/// Strictly lower cost wins; equal costs go to the lexicographically smaller schedule.
fn better(cost: f64, schedule: &GearSchedule, inc: &Option<Incumbent>) -> bool {
    match inc {
        None => cost.is_finite(),
        Some(inc) => match cost.partial_cmp(&inc.solution.cost) {
            Some(Ordering::Less) => true,
            Some(Ordering::Equal) => schedule < &inc.schedule,
            _ => false,
        },
    }
}

fn prune_margin(incumbent: f64) -> f64 {
    1e-6 * (1.0 + incumbent.abs())
}

struct Search<'p, 'a> {
    problem: &'p MinlpProblem<'a>,
    config: &'p GearSearchConfig,
    options: SqpOptions,
    incumbent: Option<Incumbent>,
    leaves: usize,
    bound_solves: usize,
    exhausted: bool,
    pruned: Vec<PrunedPrefix>,
    /// Schedule already evaluated to seed the incumbent.
    seeded: Option<GearSchedule>,
}

impl Search<'_, '_> {
    fn unreachable(&self, prefix: &[Gear]) -> bool {
        self.config.prune_by_speed_reachability
            && reachable_speeds(self.problem.params, self.problem.x0.v, prefix).is_none()
    }

    fn record(&mut self, prefix: &[Gear], reason: PruneReason) {
        self.pruned.push(PrunedPrefix { prefix: prefix.iter().map(|g| g.get()).collect(), reason });
    }

    fn evaluate_leaf(&mut self, schedule: GearSchedule) {
        if self.leaves >= self.config.leaf_budget {
            self.exhausted = true;
            return;
        }
        self.leaves += 1;
        let sol = solve_unchecked(&self.problem.with_gears(&schedule), None, &self.options);
        if sol.is_optimal() && better(sol.cost, &schedule, &self.incumbent) {
            self.incumbent = Some(Incumbent { solution: sol, schedule });
        }
    }

    /// Optimal cost of the first `d` stages plus the smallest fuel any later
    /// stage can burn (engine speed and torque at their lower limits). The
    /// tracking terms dropped are non-negative.
    fn lower_bound(&mut self, prefix: &[Gear]) -> f64 {
        self.bound_solves += 1;
        let p = self.problem.params;
        let gears = GearSchedule::new(prefix.to_vec()).expect("prefix respects the shift limit");
        let sol = solve_unchecked(&self.problem.with_gears(&gears), None, &self.options);
        let min_fuel = p.dt * (p.c0 + p.c1 * p.engine_speed_min + p.c2 * p.engine_speed_min * p.torque_min);
        let tail = (self.problem.horizon() - prefix.len()) as f64 * min_fuel;
        match sol.status {
            crate::nlp::SolveStatus::Optimal => sol.cost + tail,
            crate::nlp::SolveStatus::Infeasible => f64::INFINITY,
            crate::nlp::SolveStatus::MaxIterations => f64::NEG_INFINITY,
        }
    }

    fn branch(&mut self, prefix: &mut Vec<Gear>) {
        let n = self.problem.horizon();
        let prev = prefix.last().copied().or(self.first_gear_anchor());
        for g in children(prev) {
            prefix.push(g);
            if self.unreachable(prefix) {
                self.record(prefix, PruneReason::Unreachable);
            } else if prefix.len() == n {
                let leaf = GearSchedule::new(prefix.clone()).expect("valid prefix");
                if self.seeded.as_ref() != Some(&leaf) {
                    self.evaluate_leaf(leaf);
                }
            } else {
                let lower = self.lower_bound(prefix);
                let incumbent = self.incumbent.as_ref().map_or(f64::INFINITY, |i| i.solution.cost);
                if lower > incumbent + prune_margin(incumbent) || lower == f64::INFINITY {
                    self.record(prefix, PruneReason::Bound { lower, incumbent });
                } else {
                    self.branch(prefix);
                }
            }
            prefix.pop();
        }
    }

    fn first_gear_anchor(&self) -> Option<Gear> {
        if self.config.enforce_first_gear_continuity {
            self.problem.prev_gear
        } else {
            None
        }
    }
}

/// Solves the gear co-optimization problem.
pub fn solve_minlp(problem: &MinlpProblem<'_>, config: &GearSearchConfig, options: &SqpOptions) -> Result<MinlpResult> {
    config.validate()?;
    let n = problem.horizon();
    if n < 1 {
        return Err(Error::Horizon { min: 1, got: n });
    }
    let start = Instant::now();
    let mut search = Search {
        problem,
        config,
        options: SqpOptions { record_trace: false, ..options.clone() },
        incumbent: None,
        leaves: 0,
        bound_solves: 0,
        exhausted: false,
        pruned: Vec::new(),
        seeded: None,
    };
    match config.mode {
        SearchMode::Exhaustive => exhaustive(&mut search),
        SearchMode::BranchAndBound => {
            // Seed the incumbent with the constant highest feasible gear.
            if let Some(g) = problem.params.feasible_gears(problem.x0.v).max() {
                let anchored = search.first_gear_anchor().map_or(true, |a| a.distance(g) <= 1);
                if anchored {
                    let seed = GearSchedule::constant(g, n);
                    search.evaluate_leaf(seed.clone());
                    search.seeded = Some(seed);
                }
            }
            search.branch(&mut Vec::with_capacity(n));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (solution, schedule) = match search.incumbent {
        Some(inc) => (inc.solution, Some(inc.schedule)),
        None => (MpcSolution::infeasible(n, 0.0), None),
    };
    Ok(MinlpResult {
        solution: MpcSolution { solve_time: elapsed, ..solution },
        schedule,
        leaves_solved: search.leaves,
        bound_solves: search.bound_solves,
        budget_exhausted: search.exhausted,
        pruned: search.pruned,
    })
}

fn exhaustive(search: &mut Search<'_, '_>) {
    let n = search.problem.horizon();
    let mut candidates = Vec::new();
    for s in enumerate_gear_sequences(search.first_gear_anchor(), n) {
        if search.unreachable(s.gears()) {
            search.record(s.gears(), PruneReason::Unreachable);
        } else {
            candidates.push(s);
        }
    }
    if candidates.len() > search.config.leaf_budget {
        candidates.truncate(search.config.leaf_budget);
        search.exhausted = true;
    }
    search.leaves = candidates.len();
    let problem = search.problem;
    let options = &search.options;
    let solved: Vec<(GearSchedule, MpcSolution)> = candidates
        .into_par_iter()
        .map(|s| {
            let sol = solve_unchecked(&problem.with_gears(&s), None, options);
            (s, sol)
        })
        .collect();
    // Candidates are in lexicographic order, so a strict improvement test
    // implements the tie-break.
    for (schedule, sol) in solved {
        if sol.is_optimal() && better(sol.cost, &schedule, &search.incumbent) {
            search.incumbent = Some(Incumbent { solution: sol, schedule });
        }
    }
}

/// Re-solves the fixed-gear problem under the winning schedule and checks
/// that it reproduces the optimal cost to relative `1e-8`.
pub fn fixed_gear_identity_holds(problem: &MinlpProblem<'_>, result: &MinlpResult, options: &SqpOptions) -> bool {
    match &result.schedule {
        None => !result.solution.cost.is_finite(),
        Some(s) => {
            let again = solve_unchecked(&problem.with_gears(s), None, options);
            again.is_optimal()
                && (again.cost - result.solution.cost).abs() <= 1e-8 * result.solution.cost.abs().max(1e-12)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::SolveStatus;
    use rand::{Rng, SeedableRng};

    fn random_problem<'a>(
        rng: &mut impl Rng,
        p: &'a VehicleParams,
        x_ref: &'a mut Vec<State>,
        n: usize,
    ) -> MinlpProblem<'a> {
        let (lo, hi) = p.velocity_bounds();
        let v0 = rng.gen_range(lo + 1.0..hi - 1.0);
        let vr = (v0 + rng.gen_range(-6.0..6.0)).clamp(5.0, 28.0);
        *x_ref = (0..=n).map(|i| State::new(i as f64 * vr + rng.gen_range(-3.0..3.0), vr)).collect();
        MinlpProblem {
            x0: State::new(0.0, v0),
            x_ref,
            beta: 0.01,
            weights: TrackingWeights::default(),
            params: p,
            prev_gear: None,
            prev_torque: None,
        }
    }

    #[test]
    fn enumeration_counts() {
        let counts: Vec<usize> = (1..=5).map(|n| enumerate_gear_sequences(None, n).count()).collect();
        assert_eq!(counts, vec![6, 16, 44, 122, 340]);
        assert_eq!(enumerate_gear_sequences(Some(Gear::new(1).unwrap()), 1).count(), 2);
        assert_eq!(enumerate_gear_sequences(Some(Gear::new(3).unwrap()), 1).count(), 3);
    }

    #[test]
    fn enumeration_is_lexicographic() {
        let all: Vec<GearSchedule> = enumerate_gear_sequences(None, 3).collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(all[0].numbers(), vec![1, 1, 1]);
        assert_eq!(all.last().unwrap().numbers(), vec![6, 6, 6]);
    }

    #[test]
    fn zero_fuel_trackable_reference_costs_nothing() {
        let mut p = VehicleParams::default();
        p.c0 = 0.0;
        p.c1 = 0.0;
        p.c2 = 0.0;
        let v = 12.0;
        assert!(p.feasible_gears(v).contains(Gear::new(4).unwrap()));
        let x_ref: Vec<State> = (0..=3).map(|i| State::new(i as f64 * v, v)).collect();
        let prob = MinlpProblem {
            x0: State::new(0.0, v),
            x_ref: &x_ref,
            beta: 0.01,
            weights: TrackingWeights::default(),
            params: &p,
            prev_gear: None,
            prev_torque: None,
        };
        let res = solve_minlp(&prob, &GearSearchConfig::exhaustive(), &SqpOptions::default()).unwrap();
        assert!(res.solution.is_optimal());
        assert!(res.solution.cost.abs() < 1e-10);
    }

    #[test]
    fn branch_and_bound_matches_exhaustive() {
        let p = VehicleParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let opts = SqpOptions::default();
        for _ in 0..10 {
            let mut x_ref = Vec::new();
            let prob = random_problem(&mut rng, &p, &mut x_ref, 4);
            let ex = solve_minlp(&prob, &GearSearchConfig::exhaustive(), &opts).unwrap();
            let bb = solve_minlp(&prob, &GearSearchConfig::default(), &opts).unwrap();
            assert_eq!(ex.schedule, bb.schedule);
            assert!((ex.solution.cost - bb.solution.cost).abs() <= 1e-9 * ex.solution.cost.abs());
            assert!(!bb.was_pruned(ex.schedule.as_ref().unwrap()));
            assert!(fixed_gear_identity_holds(&prob, &ex, &opts));
        }
    }

    #[test]
    fn exhaustive_dominates_every_schedule() {
        let p = VehicleParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let opts = SqpOptions::default();
        for _ in 0..3 {
            let mut x_ref = Vec::new();
            let prob = random_problem(&mut rng, &p, &mut x_ref, 3);
            let best = solve_minlp(&prob, &GearSearchConfig::exhaustive(), &opts).unwrap();
            for s in enumerate_gear_sequences(None, 3) {
                let sol = solve_unchecked(&prob.with_gears(&s), None, &opts);
                if sol.is_optimal() {
                    assert!(best.solution.cost <= sol.cost);
                }
            }
        }
    }

    #[test]
    fn lowest_speed_leaves_only_feasible_first_gears() {
        let p = VehicleParams::default();
        let (lo, _) = p.velocity_bounds();
        let x_ref: Vec<State> = (0..=3).map(|i| State::new(i as f64 * 5.0, 5.0)).collect();
        let prob = MinlpProblem {
            x0: State::new(0.0, lo),
            x_ref: &x_ref,
            beta: 0.01,
            weights: TrackingWeights::default(),
            params: &p,
            prev_gear: None,
            prev_torque: None,
        };
        let res = solve_minlp(&prob, &GearSearchConfig::default(), &SqpOptions::default()).unwrap();
        let phi = p.feasible_gears(lo);
        for g in Gear::all() {
            let pruned =
                res.pruned.iter().any(|pp| pp.prefix == vec![g.get()] && pp.reason == PruneReason::Unreachable);
            assert_eq!(pruned, !phi.contains(g), "gear {g}");
        }
        assert_eq!(res.solution.status, SolveStatus::Optimal);
    }

    #[test]
    fn budget_flag_is_raised() {
        let p = VehicleParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut x_ref = Vec::new();
        let prob = random_problem(&mut rng, &p, &mut x_ref, 4);
        let cfg = GearSearchConfig { leaf_budget: 2, ..GearSearchConfig::exhaustive() };
        let res = solve_minlp(&prob, &cfg, &SqpOptions::default()).unwrap();
        assert!(res.budget_exhausted);
        assert_eq!(res.leaves_solved, 2);
        let cfg = GearSearchConfig { leaf_budget: 0, ..GearSearchConfig::default() };
        assert!(solve_minlp(&prob, &cfg, &SqpOptions::default()).is_err());
    }

    #[test]
    fn first_gear_continuity() {
        let p = VehicleParams::default();
        let x_ref: Vec<State> = (0..=3).map(|i| State::new(i as f64 * 15.0, 15.0)).collect();
        let prob = MinlpProblem {
            x0: State::new(0.0, 15.0),
            x_ref: &x_ref,
            beta: 0.01,
            weights: TrackingWeights::default(),
            params: &p,
            prev_gear: Some(Gear::new(3).unwrap()),
            prev_torque: None,
        };
        let cfg = GearSearchConfig { enforce_first_gear_continuity: true, ..GearSearchConfig::default() };
        let res = solve_minlp(&prob, &cfg, &SqpOptions::default()).unwrap();
        let first = res.schedule.unwrap().first();
        assert!(first.distance(Gear::new(3).unwrap()) <= 1);
    }

    #[test]
    fn infeasible_everywhere_gives_infinite_cost() {
        let p = VehicleParams::default();
        let (_, hi) = p.velocity_bounds();
        let x_ref: Vec<State> = (0..=2).map(|i| State::new(i as f64 * 20.0, 20.0)).collect();
        let prob = MinlpProblem {
            x0: State::new(0.0, hi + 5.0),
            x_ref: &x_ref,
            beta: 0.01,
            weights: TrackingWeights::default(),
            params: &p,
            prev_gear: None,
            prev_torque: None,
        };
        let res = solve_minlp(&prob, &GearSearchConfig::exhaustive(), &SqpOptions::default()).unwrap();
        assert_eq!(res.solution.status, SolveStatus::Infeasible);
        assert!(res.schedule.is_none());
        assert!(fixed_gear_identity_holds(&prob, &res, &SqpOptions::default()));
    }
}
