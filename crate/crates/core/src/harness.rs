//! Scenario generation, the headwind plant, paired batch evaluation and its
//! report files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{run_episode, ControllerConfig, ControllerKind, EpisodeResult};
use crate::error::{Error, Result};
use crate::policy::{dataset_hash, PolicyModel};
use crate::vehicle::{FullInput, State, VehicleParams};

pub const REF_SPEED_MIN: f64 = 5.0;
pub const REF_SPEED_MAX: f64 = 28.0;
pub const HEADWIND_MIN: f64 = 8.0;
pub const HEADWIND_MAX: f64 = 14.0;
/// Steps between headwind knots.
pub const HEADWIND_KNOT_SPACING: usize = 10;
const MAX_REF_ACCEL: f64 = 0.6;

pub const REPORT_FORMAT: &str = "gearmpc-report";
pub const REPORT_VERSION: u32 = 1;

/// Independent, well-mixed seed for episode `index` of a run.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub x0: State,
    /// `k_sim + N + 1` reference states.
    pub reference: Vec<State>,
    /// Plant wind speed per transition, when the disturbance is active.
    pub headwind: Option<Vec<f64>>,
}

impl Scenario {
    pub fn hash(&self) -> String {
        dataset_hash(&serde_json::to_vec(self).expect("scenario serializes"))
    }

    pub fn with_headwind(mut self, k_sim: usize) -> Self {
        self.headwind = Some(headwind_profile(self.seed, k_sim));
        self
    }
}

/// Reference with piecewise-constant acceleration over five random intervals
/// (zero in the first and last), speed clipped to the highway band, and a
/// random initial vehicle speed inside the envelope.
pub fn generate_scenario(seed: u64, k_sim: usize, horizon: usize, params: &VehicleParams) -> Result<Scenario> {
    if k_sim == 0 {
        return Err(Error::InvalidParams("scenario needs at least one simulation step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = k_sim + horizon + 1;
    let total = (k_sim + horizon) as f64 * params.dt;
    let mut breaks: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..total)).collect();
    breaks.sort_by(f64::total_cmp);
    let mut accel = [0.0; 5];
    for a in &mut accel[1..4] {
        *a = rng.gen_range(-MAX_REF_ACCEL..=MAX_REF_ACCEL);
    }
    let v_start: f64 = rng.gen_range(15.0..=25.0);
    let (v_min, v_max) = params.velocity_bounds();
    let x0 = State::new(0.0, rng.gen_range(v_min + 5.0..=v_max - 5.0));
    Ok(Scenario {
        seed,
        x0,
        reference: reference_from_accelerations(v_start, &breaks, &accel, len, params.dt),
        headwind: None,
    })
}

/// Integrates the interval accelerations, clips the speed and integrates the
/// clipped speed into positions starting at zero.
pub fn reference_from_accelerations(v_start: f64, breaks: &[f64], accel: &[f64], len: usize, dt: f64) -> Vec<State> {
    let mut speeds = Vec::with_capacity(len);
    let mut v = v_start;
    for i in 0..len {
        speeds.push(v.clamp(REF_SPEED_MIN, REF_SPEED_MAX));
        let t = i as f64 * dt;
        let interval = breaks.iter().filter(|&&b| b <= t).count();
        v += accel[interval] * dt;
    }
    let mut out = Vec::with_capacity(len);
    let mut p = 0.0;
    for &v in &speeds {
        out.push(State::new(p, v));
        p += v * dt;
    }
    out
}

/// Piecewise-linear wind through uniform knots every ten steps, one value per
/// plant transition.
pub fn headwind_profile(seed: u64, k_sim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n_knots = k_sim / HEADWIND_KNOT_SPACING + 2;
    let knots: Vec<f64> = (0..n_knots).map(|_| rng.gen_range(HEADWIND_MIN..=HEADWIND_MAX)).collect();
    interpolate_knots(&knots, k_sim)
}

pub fn interpolate_knots(knots: &[f64], len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| {
            let seg = k / HEADWIND_KNOT_SPACING;
            let frac = (k % HEADWIND_KNOT_SPACING) as f64 / HEADWIND_KNOT_SPACING as f64;
            let a = knots[seg];
            let b = knots[(seg + 1).min(knots.len() - 1)];
            (a + frac * (b - a)).clamp(a.min(b), a.max(b))
        })
        .collect()
}

/// Plant step with drag acting on the air-relative speed `v + v_w`.
pub fn apply_headwind(x: &State, u: &FullInput, wind: f64, params: &VehicleParams) -> State {
    params.step_with_drag_speed(x, u, x.v + wind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub controllers: Vec<ControllerKind>,
    pub episodes: usize,
    pub k_sim: usize,
    pub seed: u64,
    pub headwind: bool,
    /// Report cost increase relative to the exact controller.
    pub relative_cost: bool,
    pub controller: ControllerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            controllers: ControllerKind::ALL.to_vec(),
            episodes: 20,
            k_sim: 60,
            seed: 0,
            headwind: false,
            relative_cost: true,
            controller: ControllerConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, model: Option<&PolicyModel>) -> Result<()> {
        if self.controllers.is_empty() {
            return Err(Error::InvalidParams("no controllers selected".into()));
        }
        if self.relative_cost && !self.controllers.contains(&ControllerKind::Exact) {
            return Err(Error::InvalidParams("relative cost needs the exact controller (NM) in the comparison".into()));
        }
        if self.controllers.contains(&ControllerKind::Learned) && model.is_none() {
            return Err(Error::InvalidParams("the learned controller (LM) needs --model".into()));
        }
        if self.k_sim == 0 || self.episodes == 0 {
            return Err(Error::InvalidParams("episodes and horizon length must be positive".into()));
        }
        if self.controller.horizon < 2 {
            return Err(Error::Horizon { min: 2, got: self.controller.horizon });
        }
        Ok(())
    }
}

/// Per-episode outcome with the cost increase relative to the exact
/// controller on the same scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub controller: ControllerKind,
    pub episode: usize,
    pub seed: u64,
    pub metric: Option<f64>,
    pub delta_p: Option<f64>,
    pub steps: usize,
    pub backup_steps: usize,
    pub backup_fraction: f64,
    pub mean_backup_distance: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTiming {
    pub controller: ControllerKind,
    pub episode: usize,
    pub seed: u64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quartiles; `None` for an empty sample.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Some(Quartiles { q1: q(0.25), median: q(0.5), q3: q(0.75) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: ControllerKind,
    pub completed: usize,
    pub failed: usize,
    pub mean_metric: Option<f64>,
    /// Percent cost increase over the exact controller on paired episodes.
    pub delta_p: Option<Quartiles>,
    pub paired_episodes: usize,
    /// Backup steps over all steps, in percent.
    pub backup_percent: f64,
    pub mean_backup_distance: Option<f64>,
}

/// Deterministic aggregate of an evaluation: no wall-clock quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    pub k_sim: usize,
    pub headwind: bool,
    /// Hash over all scenario hashes; equal for every controller by construction.
    pub scenario_set_hash: String,
    pub model_hash: Option<String>,
    pub controllers: Vec<ControllerSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub controller: ControllerKind,
    /// Quartiles of the per-episode mean step solve time (s).
    pub episode_mean: Option<Quartiles>,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rows: Vec<EpisodeRow>,
    pub timings: Vec<EpisodeTiming>,
    pub timing_summary: Vec<TimingSummary>,
}

impl Evaluation {
    pub fn summary(&self, kind: ControllerKind) -> Option<&ControllerSummary> {
        self.report.controllers.iter().find(|s| s.controller == kind)
    }

    pub fn timing(&self, kind: ControllerKind) -> Option<&TimingSummary> {
        self.timing_summary.iter().find(|s| s.controller == kind)
    }

    /// Writes `report.json`, `timings.json`, `episodes.csv` and `episode_timings.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), &self.report)?;
        write_json(&dir.join("timings.json"), &self.timing_summary)?;
        write_csv(&dir.join("episodes.csv"), &self.rows)?;
        write_csv(&dir.join("episode_timings.csv"), &self.timings)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// The scenario set an evaluation with `cfg` runs on.
pub fn scenario_set(cfg: &EvalConfig, params: &VehicleParams) -> Result<Vec<Scenario>> {
    (0..cfg.episodes)
        .map(|e| {
            let seed = episode_seed(cfg.seed, e);
            let s = generate_scenario(seed, cfg.k_sim, cfg.controller.horizon, params)?;
            Ok(if cfg.headwind { s.with_headwind(cfg.k_sim) } else { s })
        })
        .collect()
}

/// Runs every selected controller on the same scenarios.
pub fn evaluate(cfg: &EvalConfig, params: &VehicleParams, model: Option<&PolicyModel>) -> Result<Evaluation> {
    cfg.validate(model)?;
    params.check_backup_assumption().into_result()?;
    let scenarios = scenario_set(cfg, params)?;
    let mut kinds = cfg.controllers.clone();
    kinds.sort();
    kinds.dedup();

    let jobs: Vec<(ControllerKind, usize)> =
        kinds.iter().flat_map(|&k| (0..scenarios.len()).map(move |e| (k, e))).collect();
    let results: Vec<Result<EpisodeResult>> = jobs
        .par_iter()
        .map(|&(kind, e)| {
            let s = &scenarios[e];
            let ep = run_episode(
                kind,
                s.seed,
                s.x0,
                &s.reference,
                s.headwind.as_deref(),
                cfg.k_sim,
                model,
                params,
                &cfg.controller,
                &mut |_| {},
            )?;
            Ok(ep.result)
        })
        .collect();
    let mut by_kind: BTreeMap<ControllerKind, Vec<(usize, EpisodeResult)>> = BTreeMap::new();
    for (&(kind, e), r) in jobs.iter().zip(results) {
        by_kind.entry(kind).or_default().push((e, r?));
    }

    let exact: Option<Vec<Option<f64>>> =
        by_kind.get(&ControllerKind::Exact).map(|v| v.iter().map(|(_, r)| r.metric).collect());

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut summaries = Vec::new();
    let mut timing_summary = Vec::new();
    for (&kind, results) in &by_kind {
        let mut deltas = Vec::new();
        let mut metrics = Vec::new();
        let (mut steps, mut backup_steps) = (0usize, 0usize);
        let mut distances = Vec::new();
        let mut episode_means = Vec::new();
        let mut max_time: f64 = 0.0;
        for (e, r) in results {
            let delta = match (&exact, r.metric) {
                (Some(ex), Some(p)) if cfg.relative_cost => ex[*e].map(|p_nm| 100.0 * (p - p_nm) / p_nm),
                _ => None,
            };
            if let Some(why) = &r.failure {
                log::warn!("{kind} episode {e} failed and is excluded from paired statistics: {why}");
            }
            deltas.extend(delta);
            metrics.extend(r.metric);
            steps += r.steps;
            backup_steps += r.backup_steps;
            if let Some(d) = r.mean_backup_distance {
                distances.push((d, r.backup_steps));
            }
            if r.steps > 0 {
                episode_means.push(r.mean_solve_time());
            }
            max_time = max_time.max(r.max_solve_time());
            rows.push(EpisodeRow {
                controller: kind,
                episode: *e,
                seed: r.seed,
                metric: r.metric,
                delta_p: delta,
                steps: r.steps,
                backup_steps: r.backup_steps,
                backup_fraction: r.backup_fraction,
                mean_backup_distance: r.mean_backup_distance,
                failure: r.failure.clone(),
            });
            timings.push(EpisodeTiming {
                controller: kind,
                episode: *e,
                seed: r.seed,
                mean_solve_time: r.mean_solve_time(),
                max_solve_time: r.max_solve_time(),
            });
        }
        let weight: usize = distances.iter().map(|&(_, n)| n).sum();
        summaries.push(ControllerSummary {
            controller: kind,
            completed: metrics.len(),
            failed: results.len() - metrics.len(),
            mean_metric: (!metrics.is_empty()).then(|| metrics.iter().sum::<f64>() / metrics.len() as f64),
            delta_p: quartiles(&deltas),
            paired_episodes: deltas.len(),
            backup_percent: if steps == 0 { 0.0 } else { 100.0 * backup_steps as f64 / steps as f64 },
            mean_backup_distance: (weight > 0)
                .then(|| distances.iter().map(|&(d, n)| d * n as f64).sum::<f64>() / weight as f64),
        });
        timing_summary.push(TimingSummary { controller: kind, episode_mean: quartiles(&episode_means), max: max_time });
    }

    let joined: String = scenarios.iter().map(Scenario::hash).collect();
    Ok(Evaluation {
        report: EvalReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            seed: cfg.seed,
            episodes: cfg.episodes,
            horizon: cfg.controller.horizon,
            k_sim: cfg.k_sim,
            headwind: cfg.headwind,
            scenario_set_hash: dataset_hash(joined.as_bytes()),
            model_hash: model.map(|m| dataset_hash(&serde_json::to_vec(m).expect("model serializes"))),
            controllers: summaries,
        },
        rows,
        timings,
        timing_summary,
    })
}

/// Re-emits an evaluation directory as wide tables, one column per
/// controller and one row per episode: `box_delta_p.csv` and
/// `box_solve_time.csv`.
pub fn plot_data(eval_dir: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rows: Vec<EpisodeRow> = read_csv(&eval_dir.join("episodes.csv"))?;
    let times: Vec<EpisodeTiming> = read_csv(&eval_dir.join("episode_timings.csv"))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let delta: Vec<(ControllerKind, usize, Option<f64>)> =
        rows.iter().map(|r| (r.controller, r.episode, r.delta_p)).collect();
    let solve: Vec<(ControllerKind, usize, Option<f64>)> =
        times.iter().map(|t| (t.controller, t.episode, Some(t.mean_solve_time))).collect();
    let mut written = Vec::new();
    for (name, cells) in [("box_delta_p.csv", delta), ("box_solve_time.csv", solve)] {
        let path = out_dir.join(name);
        write_wide(&path, &cells)?;
        written.push(path);
    }
    Ok(written)
}

fn write_wide(path: &Path, cells: &[(ControllerKind, usize, Option<f64>)]) -> Result<()> {
    let mut kinds: Vec<ControllerKind> = cells.iter().map(|c| c.0).collect();
    kinds.sort();
    kinds.dedup();
    let mut table: BTreeMap<usize, BTreeMap<ControllerKind, Option<f64>>> = BTreeMap::new();
    for &(k, e, v) in cells {
        table.entry(e).or_default().insert(k, v);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["episode".to_string()];
    header.extend(kinds.iter().map(|k| k.name().to_string()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (e, row) in &table {
        let mut rec = vec![e.to_string()];
        for k in &kinds {
            rec.push(row.get(k).copied().flatten().map_or(String::new(), |v| v.to_string()));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
