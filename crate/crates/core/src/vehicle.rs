//! Longitudinal vehicle and powertrain model.
//!
//! Units are SI throughout, except engine speed which is in rpm (hence the
//! `30 / π` factor that converts wheel angular velocity to engine rpm).

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of transmission gears.
pub const NUM_GEARS: usize = 6;

/// Relative slack applied to the closed engine-speed bounds so that the
/// analytic velocity-range endpoints test as feasible despite rounding.
const BOUND_SLACK: f64 = 1e-12;

/// A transmission gear position, `1..=6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Gear(u8);

impl Gear {
    pub const LOWEST: Gear = Gear(1);
    pub const HIGHEST: Gear = Gear(NUM_GEARS as u8);

    pub fn new(j: i64) -> Result<Self> {
        if (1..=NUM_GEARS as i64).contains(&j) {
            Ok(Gear(j as u8))
        } else {
            Err(Error::InvalidGear(j))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index into the gear-ratio table.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < NUM_GEARS, "gear index {i} out of range");
        Gear(i as u8 + 1)
    }

    pub fn all() -> impl Iterator<Item = Gear> + Clone {
        (1..=NUM_GEARS as u8).map(Gear)
    }

    /// Moves toward `target` by at most one gear.
    pub fn step_toward(self, target: Gear) -> Gear {
        match target.0.cmp(&self.0) {
            std::cmp::Ordering::Greater => Gear(self.0 + 1),
            std::cmp::Ordering::Less => Gear(self.0 - 1),
            std::cmp::Ordering::Equal => self,
        }
    }

    pub fn distance(self, other: Gear) -> u32 {
        (self.0 as i32 - other.0 as i32).unsigned_abs()
    }
}

impl TryFrom<i64> for Gear {
    type Error = Error;
    fn try_from(j: i64) -> Result<Self> {
        Gear::new(j)
    }
}

impl From<Gear> for u8 {
    fn from(g: Gear) -> u8 {
        g.0
    }
}

impl fmt::Display for Gear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Small set of gears, stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GearSet(u8);

impl GearSet {
    pub fn empty() -> Self {
        GearSet(0)
    }

    pub fn insert(&mut self, g: Gear) {
        self.0 |= 1 << g.index();
    }

    pub fn contains(&self, g: Gear) -> bool {
        self.0 & (1 << g.index()) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = Gear> + '_ {
        Gear::all().filter(move |g| self.contains(*g))
    }

    pub fn min(&self) -> Option<Gear> {
        self.iter().next()
    }

    pub fn max(&self) -> Option<Gear> {
        self.iter().last()
    }
}

impl FromIterator<Gear> for GearSet {
    fn from_iter<I: IntoIterator<Item = Gear>>(iter: I) -> Self {
        let mut s = GearSet::empty();
        for g in iter {
            s.insert(g);
        }
        s
    }
}

/// Position (m) and velocity (m/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: f64,
    pub v: f64,
}

impl State {
    pub fn new(p: f64, v: f64) -> Self {
        State { p, v }
    }
}

/// Engine torque (Nm) and brake force (N), without the gear.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReducedInput {
    pub torque: f64,
    pub brake: f64,
}

impl ReducedInput {
    pub fn new(torque: f64, brake: f64) -> Self {
        ReducedInput { torque, brake }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullInput {
    pub torque: f64,
    pub brake: f64,
    pub gear: Gear,
}

impl FullInput {
    pub fn new(input: ReducedInput, gear: Gear) -> Self {
        FullInput { torque: input.torque, brake: input.brake, gear }
    }

    pub fn reduced(&self) -> ReducedInput {
        ReducedInput::new(self.torque, self.brake)
    }
}

/// Closed velocity interval on which a gear keeps the engine speed in bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRange {
    pub lo: f64,
    pub hi: f64,
}

impl SpeedRange {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo * (1.0 - BOUND_SLACK) && v <= self.hi * (1.0 + BOUND_SLACK)
    }

    pub fn intersect(&self, other: &SpeedRange) -> Option<SpeedRange> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(SpeedRange { lo, hi })
    }
}

/// Symmetric positive-definite 2x2 weight on the state tracking error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 2]; 2]", into = "[[f64; 2]; 2]")]
pub struct TrackingWeights([[f64; 2]; 2]);

impl TrackingWeights {
    pub fn new(m: [[f64; 2]; 2]) -> Result<Self> {
        let sym = (m[0][1] - m[1][0]).abs() <= 1e-12 * (m[0][1].abs() + m[1][0].abs()).max(1.0);
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if !sym || !(m[0][0] > 0.0) || !(det > 0.0) {
            return Err(Error::WeightNotPd);
        }
        Ok(TrackingWeights(m))
    }

    pub fn diag(a: f64, b: f64) -> Result<Self> {
        Self::new([[a, 0.0], [0.0, b]])
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        self.0
    }

    /// `(x - y)ᵀ Q (x - y)`.
    pub fn tracking_cost(&self, x: &State, x_ref: &State) -> f64 {
        let e = [x.p - x_ref.p, x.v - x_ref.v];
        let q = &self.0;
        e[0] * (q[0][0] * e[0] + q[0][1] * e[1]) + e[1] * (q[1][0] * e[0] + q[1][1] * e[1])
    }
}

impl Default for TrackingWeights {
    fn default() -> Self {
        TrackingWeights([[1.0, 0.0], [0.0, 0.1]])
    }
}

impl TryFrom<[[f64; 2]; 2]> for TrackingWeights {
    type Error = Error;
    fn try_from(m: [[f64; 2]; 2]) -> Result<Self> {
        TrackingWeights::new(m)
    }
}

impl From<TrackingWeights> for [[f64; 2]; 2] {
    fn from(w: TrackingWeights) -> Self {
        w.0
    }
}

/// Physical constants, gear ratios, fuel coefficients and variable bounds.
///
/// Serialized with one JSON key per physical symbol (`m`, `C`, `mu`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Vehicle mass (kg).
    #[serde(rename = "m")]
    pub mass: f64,
    /// Aerodynamic drag coefficient (kg/m).
    #[serde(rename = "C")]
    pub drag: f64,
    /// Rolling friction coefficient.
    #[serde(rename = "mu")]
    pub rolling_friction: f64,
    /// Gravitational acceleration (m/s²).
    #[serde(rename = "g")]
    pub gravity: f64,
    /// Road angle (rad), constant over an episode.
    #[serde(rename = "alpha")]
    pub road_angle: f64,
    /// Wheel radius (m).
    #[serde(rename = "r")]
    pub wheel_radius: f64,
    #[serde(rename = "z_f")]
    pub final_drive: f64,
    /// Transmission ratios for gears 1..=6, strictly decreasing.
    #[serde(rename = "z")]
    pub gear_ratios: Vec<f64>,
    /// Fuel-rate coefficients of `c0 + c1 ω + c2 ω T`.
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Maximum engine torque rate (Nm/s).
    #[serde(rename = "dT_max")]
    pub max_torque_rate: f64,
    /// Maximum acceleration magnitude (m/s²).
    #[serde(rename = "a_max")]
    pub max_accel: f64,
    #[serde(rename = "T_min")]
    pub torque_min: f64,
    #[serde(rename = "T_max")]
    pub torque_max: f64,
    #[serde(rename = "Fb_min")]
    pub brake_min: f64,
    #[serde(rename = "Fb_max")]
    pub brake_max: f64,
    /// Engine speed bounds (rpm).
    #[serde(rename = "w_min")]
    pub engine_speed_min: f64,
    #[serde(rename = "w_max")]
    pub engine_speed_max: f64,
    /// Time step (s).
    pub dt: f64,
    pub n_gears: usize,
}

impl Default for VehicleParams {
    /// Passenger-car profile. The first and last gear ratios are chosen so
    /// that the engine-speed window maps exactly onto 2.2..44.4 m/s; the
    /// intermediate ratios are geometric.
    fn default() -> Self {
        let r = 0.3554;
        let z_f = 3.39;
        let (w_min, w_max) = (900.0, 3000.0);
        let z1 = PI * w_min * r / (30.0 * 2.2 * z_f);
        let z6 = PI * w_max * r / (30.0 * 44.4 * z_f);
        let q = (z6 / z1).powf(1.0 / (NUM_GEARS as f64 - 1.0));
        let mut z: Vec<f64> = (0..NUM_GEARS).map(|i| z1 * q.powi(i as i32)).collect();
        z[NUM_GEARS - 1] = z6;
        VehicleParams {
            mass: 1500.0,
            drag: 0.4071,
            rolling_friction: 0.015,
            gravity: 9.81,
            road_angle: 0.0,
            wheel_radius: r,
            final_drive: z_f,
            gear_ratios: z,
            c0: 0.1,
            c1: 1.0e-4,
            c2: 7.0e-6,
            max_torque_rate: 100.0,
            max_accel: 3.0,
            torque_min: 15.0,
            torque_max: 300.0,
            brake_min: 0.0,
            brake_max: 9000.0,
            engine_speed_min: w_min,
            engine_speed_max: w_max,
            dt: 1.0,
            n_gears: NUM_GEARS,
        }
    }
}

impl VehicleParams {
    /// Checks every structural invariant on the constants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.n_gears != NUM_GEARS || self.gear_ratios.len() != NUM_GEARS {
            return bad(format!(
                "expected {NUM_GEARS} gears, got n_gears = {} with {} ratios",
                self.n_gears,
                self.gear_ratios.len()
            ));
        }
        let all = [
            self.mass,
            self.drag,
            self.rolling_friction,
            self.gravity,
            self.road_angle,
            self.wheel_radius,
            self.final_drive,
            self.c0,
            self.c1,
            self.c2,
            self.max_torque_rate,
            self.max_accel,
            self.torque_min,
            self.torque_max,
            self.brake_min,
            self.brake_max,
            self.engine_speed_min,
            self.engine_speed_max,
            self.dt,
        ];
        if all.iter().chain(&self.gear_ratios).any(|x| !x.is_finite()) {
            return bad("non-finite constant".into());
        }
        if self.gear_ratios.iter().any(|&z| z <= 0.0) {
            return bad("gear ratios must be positive".into());
        }
        if self.gear_ratios.windows(2).any(|w| w[1] >= w[0]) {
            return bad("gear ratios must be strictly decreasing".into());
        }
        if !(self.torque_min < self.torque_max) {
            return bad("T_min must be below T_max".into());
        }
        if !(self.brake_min < self.brake_max) {
            return bad("Fb_min must be below Fb_max".into());
        }
        if !(self.engine_speed_min < self.engine_speed_max) {
            return bad("w_min must be below w_max".into());
        }
        if !(self.dt > 0.0) || !(self.mass > 0.0) || !(self.wheel_radius > 0.0) {
            return bad("dt, m and r must be positive".into());
        }
        if self.drag < 0.0 || self.final_drive <= 0.0 {
            return bad("C must be non-negative and z_f positive".into());
        }
        if self.max_accel <= 0.0 || self.max_torque_rate <= 0.0 {
            return bad("a_max and dT_max must be positive".into());
        }
        let (v_min, v_max) = self.velocity_bounds();
        if !(v_min < v_max) {
            return bad(format!("v_min = {v_min} is not below v_max = {v_max}"));
        }
        for j in 0..NUM_GEARS - 1 {
            let lo = self.range_of_index(j);
            let hi = self.range_of_index(j + 1);
            if !(lo.hi > hi.lo) {
                return bad(format!("velocity ranges of gears {} and {} do not overlap", j + 1, j + 2));
            }
        }
        Ok(())
    }

    /// Reads a JSON profile and validates it, including the backup-schedule
    /// feasibility report unless `allow_infeasible_backup` is set.
    pub fn from_json_file(path: &Path, allow_infeasible_backup: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: VehicleParams = serde_json::from_str(&text)?;
        params.validate()?;
        if !allow_infeasible_backup {
            let report = params.check_backup_assumption();
            if !report.passed() {
                return Err(Error::BackupAssumption { failed: report.failures() });
            }
        }
        Ok(params)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn ratio(&self, gear: Gear) -> f64 {
        self.gear_ratios[gear.index()]
    }

    /// Wheel force per unit engine torque in `gear` (1/m).
    pub fn traction_gain(&self, gear: Gear) -> f64 {
        self.ratio(gear) * self.final_drive / self.wheel_radius
    }

    /// Road friction force `μ m g cos α + m g sin α` (N).
    pub fn friction_force(&self) -> f64 {
        let mg = self.mass * self.gravity;
        self.rolling_friction * mg * self.road_angle.cos() + mg * self.road_angle.sin()
    }

    /// Engine speed (rpm) per unit velocity in `gear`.
    pub fn engine_speed_gain(&self, gear: Gear) -> f64 {
        30.0 * self.ratio(gear) * self.final_drive / (self.wheel_radius * PI)
    }

    /// Engine speed in rpm at velocity `v` in `gear`.
    pub fn engine_speed(&self, v: f64, gear: Gear) -> f64 {
        30.0 * v * self.ratio(gear) * self.final_drive / (self.wheel_radius * PI)
    }

    /// The velocity envelope implied by the engine-speed bounds.
    pub fn velocity_bounds(&self) -> (f64, f64) {
        (self.range_of_index(0).lo, self.range_of_index(NUM_GEARS - 1).hi)
    }

    fn range_of_index(&self, j: usize) -> SpeedRange {
        let den = 30.0 * self.gear_ratios[j] * self.final_drive;
        SpeedRange {
            lo: PI * self.engine_speed_min * self.wheel_radius / den,
            hi: PI * self.engine_speed_max * self.wheel_radius / den,
        }
    }

    /// Velocities at which `gear` keeps the engine speed within bounds.
    pub fn gear_velocity_range(&self, gear: Gear) -> SpeedRange {
        self.range_of_index(gear.index())
    }

    pub fn engine_speed_ok(&self, v: f64, gear: Gear) -> bool {
        let w = self.engine_speed(v, gear);
        w >= self.engine_speed_min * (1.0 - BOUND_SLACK) && w <= self.engine_speed_max * (1.0 + BOUND_SLACK)
    }

    /// Gears whose engine speed at `v` lies within the (closed) bounds.
    pub fn feasible_gears(&self, v: f64) -> GearSet {
        Gear::all().filter(|&g| self.engine_speed_ok(v, g)).collect()
    }

    /// Net longitudinal force from torque, brake and gear.
    pub fn wheel_force(&self, torque: f64, brake: f64, gear: Gear) -> f64 {
        torque * self.traction_gain(gear) - brake
    }

    /// One step of the discrete-time model.
    pub fn step_dynamics(&self, x: &State, u: &FullInput) -> State {
        self.step_with_drag_speed(x, u, x.v)
    }

    /// Same as [`step_dynamics`](Self::step_dynamics) but with the drag evaluated
    /// at the air-relative speed `air_speed`.
    pub(crate) fn step_with_drag_speed(&self, x: &State, u: &FullInput, air_speed: f64) -> State {
        let force = u.torque * self.ratio(u.gear) * self.final_drive / self.wheel_radius
            - self.drag * air_speed * air_speed
            - u.brake
            - self.friction_force();
        State { p: x.p + x.v * self.dt, v: x.v + self.dt / self.mass * force }
    }

    /// Fuel consumed over one step, `Δt (c0 + c1 ω + c2 ω T)`.
    pub fn fuel_cost(&self, v: f64, torque: f64, gear: Gear) -> f64 {
        let w = self.engine_speed(v, gear);
        self.dt * (self.c0 + self.c1 * w + self.c2 * w * torque)
    }

    /// Range of net wheel force available in `gear`.
    pub fn force_range(&self, gear: Gear) -> (f64, f64) {
        let k = self.traction_gain(gear);
        (self.torque_min * k - self.brake_max, self.torque_max * k - self.brake_min)
    }

    /// Torque and brake within bounds that hold velocity `v` constant in `gear`,
    /// braking as little as possible. `None` when no such pair exists.
    pub fn balance_input(&self, v: f64, gear: Gear) -> Option<ReducedInput> {
        let need = self.drag * v * v + self.friction_force();
        let (lo, hi) = self.force_range(gear);
        if need < lo || need > hi {
            return None;
        }
        let k = self.traction_gain(gear);
        let brake = (self.torque_min * k - need).clamp(self.brake_min, self.brake_max);
        let torque = ((need + brake) / k).clamp(self.torque_min, self.torque_max);
        Some(ReducedInput { torque, brake })
    }

    /// Evaluates the balance condition at both ends of every gear's speed
    /// range (6 x 2 conditions).
    pub fn check_backup_assumption(&self) -> BackupReport {
        let mut conditions = Vec::with_capacity(2 * NUM_GEARS);
        for gear in Gear::all() {
            let range = self.gear_velocity_range(gear);
            let (lo, hi) = self.force_range(gear);
            for (endpoint, v) in [(Endpoint::Lower, range.lo), (Endpoint::Upper, range.hi)] {
                let required = self.drag * v * v + self.friction_force();
                conditions.push(BackupCondition {
                    gear,
                    endpoint,
                    speed: v,
                    required_force: required,
                    force_min: lo,
                    force_max: hi,
                    satisfied: lo <= required && required <= hi,
                });
            }
        }
        BackupReport { conditions }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Lower,
    Upper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackupCondition {
    pub gear: Gear,
    pub endpoint: Endpoint,
    pub speed: f64,
    pub required_force: f64,
    pub force_min: f64,
    pub force_max: f64,
    pub satisfied: bool,
}

/// Verdicts for the constant-velocity balance at each gear-range endpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackupReport {
    pub conditions: Vec<BackupCondition>,
}

impl BackupReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.satisfied)
    }

    pub fn failures(&self) -> usize {
        self.conditions.iter().filter(|c| !c.satisfied).count()
    }

    pub fn into_result(self) -> Result<Self> {
        match self.failures() {
            0 => Ok(self),
            failed => Err(Error::BackupAssumption { failed }),
        }
    }
}

/// Closed-loop performance `Σ β L_t + L_f` over aligned trajectory and reference.
pub fn episode_metric(
    trajectory: &[(State, FullInput)],
    reference: &[State],
    beta: f64,
    weights: &TrackingWeights,
    params: &VehicleParams,
) -> Result<f64> {
    if trajectory.len() != reference.len() {
        return Err(Error::LengthMismatch { what: "reference", got: reference.len(), expected: trajectory.len() });
    }
    Ok(trajectory
        .iter()
        .zip(reference)
        .map(|((x, u), r)| beta * weights.tracking_cost(x, r) + params.fuel_cost(x.v, u.torque, u.gear))
        .sum())
}
