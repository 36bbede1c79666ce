//! Scenario configurations, behavior-class parameters, and the on-disk
//! scenario database.
//!
//! A [`ScenarioConfig`] describes one traffic environment: how many
//! background vehicles of each behavior class and vehicle type to spawn,
//! at what density, on how many lanes, plus an optional seeded pair of
//! vehicles reproducing a known high-risk encounter. The same vehicles
//! are counted twice — once by behavior (aggressive/defensive/regular)
//! and once by type (trucks/cars) — and both partitions must sum to the
//! same total.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("database is not an array of configuration objects: {0}")]
    NotAnArray(String),
    #[error("record {index}: malformed: {message}")]
    Malformed { index: usize, message: String },
    #[error("record {index} ({id}): field {field}: {message}")]
    Validation {
        index: usize,
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("infeasible ranges: {0}")]
    InfeasibleRanges(String),
}

/// Driving style of a background vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorClass {
    Aggressive,
    Defensive,
    Regular,
}

impl BehaviorClass {
    pub const ALL: [BehaviorClass; 3] = [
        BehaviorClass::Aggressive,
        BehaviorClass::Defensive,
        BehaviorClass::Regular,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BehaviorClass::Aggressive => "aggressive",
            BehaviorClass::Defensive => "defensive",
            BehaviorClass::Regular => "regular",
        }
    }
}

impl fmt::Display for BehaviorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleKind {
    Car,
    Truck,
}

impl VehicleKind {
    pub fn name(&self) -> &'static str {
        match self {
            VehicleKind::Car => "car",
            VehicleKind::Truck => "truck",
        }
    }

    /// Bumper-to-bumper length in meters.
    pub fn length(&self) -> f64 {
        match self {
            VehicleKind::Car => 5.0,
            VehicleKind::Truck => 12.0,
        }
    }

    pub fn width(&self) -> f64 {
        match self {
            VehicleKind::Car => 2.0,
            VehicleKind::Truck => 2.5,
        }
    }
}

impl fmt::Display for VehicleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initial kinematic state of one seeded vehicle in a critical pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSeed {
    /// Longitudinal position in meters.
    pub x: f64,
    /// Lane index, 0-based.
    pub lane: u32,
    /// Longitudinal speed in m/s.
    pub speed: f64,
    /// Longitudinal acceleration in m/s².
    pub acceleration: f64,
    pub behavior: BehaviorClass,
    pub kind: VehicleKind,
}

/// One traffic environment configuration.
///
/// Field order is the canonical serialized order; the database round-trips
/// byte-identically through [`save_database`] / [`load_database`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: String,
    pub num_aggressive: u32,
    pub num_defensive: u32,
    pub num_regular: u32,
    pub num_trucks: u32,
    pub num_cars: u32,
    /// Vehicles per kilometer per lane.
    pub density: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_i: Option<VehicleSeed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle_j: Option<VehicleSeed>,
    pub lane_count: u32,
    /// Seed for deterministic spawning.
    pub seed: u64,
}

impl ScenarioConfig {
    /// Total number of background vehicles.
    pub fn background_count(&self) -> u32 {
        self.num_trucks + self.num_cars
    }

    pub fn behavior_count(&self, class: BehaviorClass) -> u32 {
        match class {
            BehaviorClass::Aggressive => self.num_aggressive,
            BehaviorClass::Defensive => self.num_defensive,
            BehaviorClass::Regular => self.num_regular,
        }
    }

    /// The seeded high-risk pair, when both endpoints are present.
    pub fn critical_pair(&self) -> Option<(&VehicleSeed, &VehicleSeed)> {
        match (&self.vehicle_i, &self.vehicle_j) {
            (Some(i), Some(j)) => Some((i, j)),
            _ => None,
        }
    }

    /// Checks every invariant against `ranges`. `index` and `id` only feed
    /// the error message.
    pub fn validate_at(&self, ranges: &ValidRanges, index: usize) -> Result<(), ScenarioError> {
        let err = |field: &'static str, message: String| ScenarioError::Validation {
            index,
            id: self.id.clone(),
            field,
            message,
        };
        let check_count = |field: &'static str, v: u32, r: (u32, u32)| {
            if v < r.0 || v > r.1 {
                Err(err(field, format!("{v} outside [{}, {}]", r.0, r.1)))
            } else {
                Ok(())
            }
        };
        check_count("num_aggressive", self.num_aggressive, ranges.num_aggressive)?;
        check_count("num_defensive", self.num_defensive, ranges.num_defensive)?;
        check_count("num_regular", self.num_regular, ranges.num_regular)?;
        check_count("num_trucks", self.num_trucks, ranges.num_trucks)?;
        check_count("num_cars", self.num_cars, ranges.num_cars)?;
        check_count("lane_count", self.lane_count, ranges.lane_count)?;

        let behavior_total = self.num_aggressive + self.num_defensive + self.num_regular;
        let type_total = self.num_trucks + self.num_cars;
        if behavior_total != type_total {
            return Err(err(
                "num_trucks",
                format!("behavior counts sum to {behavior_total} but type counts sum to {type_total}"),
            ));
        }
        if !(self.density > ranges.density.0 && self.density <= ranges.density.1) {
            return Err(err(
                "density",
                format!(
                    "{} outside ({}, {}]",
                    self.density, ranges.density.0, ranges.density.1
                ),
            ));
        }
        match (&self.vehicle_i, &self.vehicle_j) {
            (Some(_), None) => {
                return Err(err("vehicle_j", "vehicle_i present without vehicle_j".into()))
            }
            (None, Some(_)) => {
                return Err(err("vehicle_i", "vehicle_j present without vehicle_i".into()))
            }
            _ => {}
        }
        if self.critical_pair().is_some() && type_total < 2 {
            return Err(err(
                "vehicle_i",
                "critical pair requires at least two background vehicles".into(),
            ));
        }
        for (field, seed) in [("vehicle_i", &self.vehicle_i), ("vehicle_j", &self.vehicle_j)] {
            if let Some(s) = seed {
                if s.lane >= self.lane_count {
                    return Err(err(
                        field,
                        format!("lane {} out of bounds for {} lanes", s.lane, self.lane_count),
                    ));
                }
                if !(s.speed >= ranges.speed.0 && s.speed <= ranges.speed.1) {
                    return Err(err(
                        field,
                        format!("speed {} outside [{}, {}]", s.speed, ranges.speed.0, ranges.speed.1),
                    ));
                }
                if !(s.x >= ranges.x.0 && s.x <= ranges.x.1) {
                    return Err(err(
                        field,
                        format!("x {} outside [{}, {}]", s.x, ranges.x.0, ranges.x.1),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self, ranges: &ValidRanges) -> Result<(), ScenarioError> {
        self.validate_at(ranges, 0)
    }
}

/// Valid ranges for every numeric configuration field. These bound both
/// validation and sampling, and are rendered into LLM prompts so model
/// outputs stay physically plausible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidRanges {
    pub num_aggressive: (u32, u32),
    pub num_defensive: (u32, u32),
    pub num_regular: (u32, u32),
    pub num_trucks: (u32, u32),
    pub num_cars: (u32, u32),
    /// Vehicles per km per lane; lower bound exclusive.
    pub density: (f64, f64),
    pub lane_count: (u32, u32),
    /// Longitudinal position bounds for seeded vehicles, meters.
    pub x: (f64, f64),
    /// Speed bounds for seeded vehicles, m/s.
    pub speed: (f64, f64),
    /// Acceleration bounds for seeded vehicles, m/s².
    pub acceleration: (f64, f64),
}

impl Default for ValidRanges {
    fn default() -> Self {
        ValidRanges {
            num_aggressive: (0, 30),
            num_defensive: (0, 30),
            num_regular: (0, 30),
            num_trucks: (0, 30),
            num_cars: (0, 30),
            density: (0.0, 60.0),
            lane_count: (2, 4),
            x: (0.0, 1000.0),
            speed: (0.0, 60.0),
            acceleration: (-8.0, 5.0),
        }
    }
}

impl ValidRanges {
    /// Numeric fields rendered as `key: [min, max]` lines, in canonical
    /// field order.
    pub fn table_lines(&self) -> Vec<String> {
        vec![
            format!("num_aggressive: [{}, {}]", self.num_aggressive.0, self.num_aggressive.1),
            format!("num_defensive: [{}, {}]", self.num_defensive.0, self.num_defensive.1),
            format!("num_regular: [{}, {}]", self.num_regular.0, self.num_regular.1),
            format!("num_trucks: [{}, {}]", self.num_trucks.0, self.num_trucks.1),
            format!("num_cars: [{}, {}]", self.num_cars.0, self.num_cars.1),
            format!("density: [{}, {}]", self.density.0, self.density.1),
            format!("lane_count: [{}, {}]", self.lane_count.0, self.lane_count.1),
        ]
    }
}

/// Per-class car-following and lane-change parameters.
///
/// The dominance ordering is aggressive > regular > defensive in
/// `desired_speed` and `max_acceleration`, reversed in
/// `desired_time_headway` and `politeness`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorParams {
    /// MOBIL politeness factor, dimensionless in [0, 1].
    pub politeness: f64,
    /// Desired time headway T, seconds.
    pub desired_time_headway: f64,
    /// Maximum acceleration a, m/s².
    pub max_acceleration: f64,
    /// Comfortable deceleration b, m/s².
    pub comfortable_deceleration: f64,
    /// Free-road desired speed v0, m/s.
    pub desired_speed: f64,
    /// MOBIL incentive threshold, m/s².
    pub lane_change_threshold: f64,
}

impl BehaviorParams {
    pub fn for_class(class: BehaviorClass) -> Self {
        match class {
            BehaviorClass::Aggressive => BehaviorParams {
                politeness: 0.0,
                desired_time_headway: 0.8,
                max_acceleration: 4.0,
                comfortable_deceleration: 3.5,
                desired_speed: 33.0,
                lane_change_threshold: 0.05,
            },
            BehaviorClass::Regular => BehaviorParams {
                politeness: 0.3,
                desired_time_headway: 1.5,
                max_acceleration: 3.0,
                comfortable_deceleration: 3.0,
                desired_speed: 28.0,
                lane_change_threshold: 0.1,
            },
            BehaviorClass::Defensive => BehaviorParams {
                politeness: 0.7,
                desired_time_headway: 2.5,
                max_acceleration: 2.0,
                comfortable_deceleration: 2.5,
                desired_speed: 23.0,
                lane_change_threshold: 0.2,
            },
        }
    }
}

/// Loads a scenario database: a JSON array of configuration objects.
///
/// Every record is validated against `ranges`; the first malformed or
/// invalid record aborts the load with its index and offending field.
/// Order is preserved.
pub fn load_database(path: &Path, ranges: &ValidRanges) -> Result<Vec<ScenarioConfig>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_database(&text, ranges)
}

/// Parses database text; see [`load_database`].
pub fn parse_database(text: &str, ranges: &ValidRanges) -> Result<Vec<ScenarioConfig>, ScenarioError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ScenarioError::NotAnArray(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| ScenarioError::NotAnArray("top-level value is not an array".into()))?;
    let mut configs = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let config: ScenarioConfig =
            serde_json::from_value(item.clone()).map_err(|e| ScenarioError::Malformed {
                index,
                message: e.to_string(),
            })?;
        config.validate_at(ranges, index)?;
        configs.push(config);
    }
    Ok(configs)
}

/// Serializes `configs` in canonical field order, pretty-printed with a
/// trailing newline.
pub fn serialize_database(configs: &[ScenarioConfig]) -> String {
    let mut text = serde_json::to_string_pretty(configs).expect("configs serialize");
    text.push('\n');
    text
}

pub fn save_database(configs: &[ScenarioConfig], path: &Path) -> Result<(), ScenarioError> {
    std::fs::write(path, serialize_database(configs)).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn sample_count(rng: &mut ChaCha8Rng, r: (u32, u32)) -> u32 {
    rng.gen_range(r.0..=r.1)
}

/// Draws a random configuration within `ranges`, deterministic for a fixed
/// seed. Used to bootstrap a database when no recordings are available.
pub fn sample_config(rng_seed: u64, ranges: &ValidRanges) -> Result<ScenarioConfig, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // The two partitions must sum identically, so draw the type split first
    // and then split the same total across behavior classes.
    let mut split = None;
    for _ in 0..200 {
        let trucks = sample_count(&mut rng, ranges.num_trucks);
        let cars = sample_count(&mut rng, ranges.num_cars);
        let total = trucks + cars;
        let a_lo = ranges
            .num_aggressive
            .0
            .max(total.saturating_sub(ranges.num_defensive.1 + ranges.num_regular.1));
        let a_hi = ranges
            .num_aggressive
            .1
            .min(total.saturating_sub(ranges.num_defensive.0 + ranges.num_regular.0));
        if a_lo > a_hi {
            continue;
        }
        let aggressive = rng.gen_range(a_lo..=a_hi);
        let rest = total - aggressive;
        let d_lo = ranges.num_defensive.0.max(rest.saturating_sub(ranges.num_regular.1));
        let d_hi = ranges.num_defensive.1.min(rest.saturating_sub(ranges.num_regular.0));
        if d_lo > d_hi {
            continue;
        }
        let defensive = rng.gen_range(d_lo..=d_hi);
        let regular = rest - defensive;
        split = Some((aggressive, defensive, regular, trucks, cars));
        break;
    }
    let (num_aggressive, num_defensive, num_regular, num_trucks, num_cars) =
        split.ok_or_else(|| {
            ScenarioError::InfeasibleRanges(
                "no behavior-count split satisfies the type-count total".into(),
            )
        })?;

    let density_lo = if ranges.density.0 > 0.0 {
        ranges.density.0
    } else {
        ranges.density.1.min(1.0)
    };
    if density_lo > ranges.density.1 {
        return Err(ScenarioError::InfeasibleRanges("empty density range".into()));
    }
    let density = rng.gen_range(density_lo..=ranges.density.1);
    let lane_count = sample_count(&mut rng, ranges.lane_count);

    // Half the samples carry a seeded closing pair: a slower leader ahead
    // of a faster follower in the same lane.
    let total = num_trucks + num_cars;
    let with_pair = total >= 2 && rng.gen_bool(0.5);
    let (vehicle_i, vehicle_j) = if with_pair {
        let lane = rng.gen_range(0..lane_count);
        let x_i = rng.gen_range(ranges.x.0..=(ranges.x.0 + 0.7 * (ranges.x.1 - ranges.x.0)));
        let gap = rng.gen_range(8.0..60.0);
        let speed_i = rng.gen_range((0.3 * ranges.speed.1)..=(0.7 * ranges.speed.1));
        let speed_j = speed_i * rng.gen_range(0.3..0.9);
        let mut draw_seed = |x: f64, speed: f64| VehicleSeed {
            x,
            lane,
            speed,
            acceleration: rng.gen_range(ranges.acceleration.0..=ranges.acceleration.1),
            behavior: BehaviorClass::ALL[rng.gen_range(0..3)],
            kind: if rng.gen_bool(0.2) { VehicleKind::Truck } else { VehicleKind::Car },
        };
        let i = draw_seed(x_i, speed_i);
        let j = draw_seed((x_i + gap).min(ranges.x.1), speed_j);
        (Some(i), Some(j))
    } else {
        (None, None)
    };

    let config = ScenarioConfig {
        id: format!("sample-{rng_seed:08x}"),
        num_aggressive,
        num_defensive,
        num_regular,
        num_trucks,
        num_cars,
        density,
        vehicle_i,
        vehicle_j,
        lane_count,
        seed: rng.gen(),
    };
    config.validate(ranges)?;
    Ok(config)
}

/// Signed delta bounded by `scale * width`, truncated toward zero so the
/// bound holds exactly for integer fields.
fn int_delta(rng: &mut ChaCha8Rng, scale: f64, width: u32) -> i64 {
    let u: f64 = rng.gen_range(-1.0..=1.0);
    (u * scale * width as f64).trunc() as i64
}

fn clamp_u32(v: i64, lo: u32, hi: u32) -> u32 {
    v.clamp(lo as i64, hi as i64) as u32
}

/// Moves each numeric field of `base` by at most `scale` times its range
/// width, clipped into range. The truck/car split is re-derived from the
/// base's truck fraction so the two partitions stay equal; the id is
/// replaced with a fresh one.
///
/// Panics if `scale` is outside (0, 1] — except that `scale == 0.0` is
/// accepted and returns `base` unchanged apart from the id.
pub fn perturb_config(
    base: &ScenarioConfig,
    scale: f64,
    ranges: &ValidRanges,
    rng_seed: u64,
) -> ScenarioConfig {
    assert!((0.0..=1.0).contains(&scale), "perturbation scale must be in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let fresh_id = format!("mut-{:016x}", rng.gen::<u64>());

    let width = |r: (u32, u32)| r.1 - r.0;
    let mut num_aggressive = clamp_u32(
        base.num_aggressive as i64 + int_delta(&mut rng, scale, width(ranges.num_aggressive)),
        ranges.num_aggressive.0,
        ranges.num_aggressive.1,
    );
    let mut num_defensive = clamp_u32(
        base.num_defensive as i64 + int_delta(&mut rng, scale, width(ranges.num_defensive)),
        ranges.num_defensive.0,
        ranges.num_defensive.1,
    );
    let mut num_regular = clamp_u32(
        base.num_regular as i64 + int_delta(&mut rng, scale, width(ranges.num_regular)),
        ranges.num_regular.0,
        ranges.num_regular.1,
    );

    // The behavior total must be expressible as trucks + cars within range.
    // Walk excess back toward the base counts; each step shrinks a delta
    // already bounded by scale * width, so the movement bound survives.
    let type_max = ranges.num_trucks.1 + ranges.num_cars.1;
    let type_min = ranges.num_trucks.0 + ranges.num_cars.0;
    loop {
        let total = num_aggressive + num_defensive + num_regular;
        if total <= type_max {
            break;
        }
        let over_a = num_aggressive as i64 - base.num_aggressive as i64;
        let over_d = num_defensive as i64 - base.num_defensive as i64;
        let over_r = num_regular as i64 - base.num_regular as i64;
        if over_a >= over_d && over_a >= over_r && num_aggressive > 0 {
            num_aggressive -= 1;
        } else if over_d >= over_r && num_defensive > 0 {
            num_defensive -= 1;
        } else if num_regular > 0 {
            num_regular -= 1;
        } else {
            break;
        }
    }
    loop {
        let total = num_aggressive + num_defensive + num_regular;
        if total >= type_min {
            break;
        }
        num_regular += 1;
    }
    let total = num_aggressive + num_defensive + num_regular;

    let base_total = base.background_count();
    let truck_frac = if base_total > 0 {
        base.num_trucks as f64 / base_total as f64
    } else {
        0.0
    };
    let trucks_lo = ranges.num_trucks.0.max(total.saturating_sub(ranges.num_cars.1));
    let trucks_hi = ranges.num_trucks.1.min(total.saturating_sub(ranges.num_cars.0));
    let num_trucks = ((truck_frac * total as f64).round() as u32).clamp(trucks_lo, trucks_hi);
    let num_cars = total - num_trucks;

    let density_width = ranges.density.1 - ranges.density.0.max(0.0);
    let density_lo = if ranges.density.0 > 0.0 { ranges.density.0 } else { 1e-6 };
    let u: f64 = rng.gen_range(-1.0..=1.0);
    let density = (base.density + u * scale * density_width).clamp(density_lo, ranges.density.1);

    let lane_count = clamp_u32(
        base.lane_count as i64 + int_delta(&mut rng, scale, width(ranges.lane_count)),
        ranges.lane_count.0,
        ranges.lane_count.1,
    );

    let perturb_seed_vehicle = |rng: &mut ChaCha8Rng, v: &VehicleSeed| {
        let du: f64 = rng.gen_range(-1.0..=1.0);
        let sv: f64 = rng.gen_range(-1.0..=1.0);
        let sa: f64 = rng.gen_range(-1.0..=1.0);
        VehicleSeed {
            x: (v.x + du * scale * (ranges.x.1 - ranges.x.0)).clamp(ranges.x.0, ranges.x.1),
            lane: v.lane.min(lane_count - 1),
            speed: (v.speed + sv * scale * (ranges.speed.1 - ranges.speed.0))
                .clamp(ranges.speed.0, ranges.speed.1),
            acceleration: (v.acceleration
                + sa * scale * (ranges.acceleration.1 - ranges.acceleration.0))
                .clamp(ranges.acceleration.0, ranges.acceleration.1),
            behavior: v.behavior,
            kind: v.kind,
        }
    };
    let (vehicle_i, vehicle_j) = if total >= 2 {
        (
            base.vehicle_i.as_ref().map(|v| perturb_seed_vehicle(&mut rng, v)),
            base.vehicle_j.as_ref().map(|v| perturb_seed_vehicle(&mut rng, v)),
        )
    } else {
        (None, None)
    };

    ScenarioConfig {
        id: fresh_id,
        num_aggressive,
        num_defensive,
        num_regular,
        num_trucks,
        num_cars,
        density,
        vehicle_i,
        vehicle_j,
        lane_count,
        seed: base.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basic_config() -> ScenarioConfig {
        ScenarioConfig {
            id: "t0".into(),
            num_aggressive: 2,
            num_defensive: 2,
            num_regular: 2,
            num_trucks: 1,
            num_cars: 5,
            density: 20.0,
            vehicle_i: None,
            vehicle_j: None,
            lane_count: 3,
            seed: 9,
        }
    }

    #[test]
    fn load_database_roundtrip_60() {
        let ranges = ValidRanges::default();
        let configs: Vec<_> = (0..60)
            .map(|i| sample_config(1000 + i, &ranges).unwrap())
            .collect();
        let text = serialize_database(&configs);
        let loaded = parse_database(&text, &ranges).unwrap();
        assert_eq!(loaded.len(), 60);
        assert_eq!(loaded, configs);
        // Byte-identical round trip in canonical field order.
        assert_eq!(serialize_database(&loaded), text);
    }

    #[test]
    fn load_database_empty() {
        let loaded = parse_database("[]", &ValidRanges::default()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn load_database_partition_violation() {
        let mut bad = basic_config();
        bad.num_cars = 9; // 2+2+2 != 1+9
        let text = serialize_database(&[basic_config(), bad]);
        let err = parse_database(&text, &ValidRanges::default()).unwrap_err();
        match err {
            ScenarioError::Validation { index, field, .. } => {
                assert_eq!(index, 1);
                assert_eq!(field, "num_trucks");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_database_malformed_record_names_index() {
        let text = r#"[{"id": "x", "num_aggressive": "not a number"}]"#;
        let err = parse_database(text, &ValidRanges::default()).unwrap_err();
        match err {
            ScenarioError::Malformed { index, .. } => assert_eq!(index, 0),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn sample_deterministic() {
        let ranges = ValidRanges::default();
        assert_eq!(sample_config(7, &ranges).unwrap(), sample_config(7, &ranges).unwrap());
    }

    #[test]
    fn sample_degenerate_ranges() {
        let ranges = ValidRanges {
            num_aggressive: (2, 2),
            num_defensive: (2, 2),
            num_regular: (2, 2),
            num_trucks: (1, 1),
            num_cars: (5, 5),
            ..ValidRanges::default()
        };
        let c = sample_config(3, &ranges).unwrap();
        assert_eq!(
            (c.num_aggressive, c.num_defensive, c.num_regular, c.num_trucks, c.num_cars),
            (2, 2, 2, 1, 5)
        );
    }

    #[test]
    fn sample_infeasible_ranges() {
        let ranges = ValidRanges {
            num_trucks: (0, 0),
            num_cars: (0, 0),
            num_aggressive: (5, 5),
            ..ValidRanges::default()
        };
        assert!(matches!(
            sample_config(1, &ranges),
            Err(ScenarioError::InfeasibleRanges(_))
        ));
    }

    #[test]
    fn sample_sweep_all_valid() {
        let ranges = ValidRanges::default();
        for seed in 0..1000 {
            let c = sample_config(seed, &ranges).unwrap();
            c.validate(&ranges).unwrap();
            assert_eq!(
                c.num_aggressive + c.num_defensive + c.num_regular,
                c.num_trucks + c.num_cars
            );
        }
    }

    #[test]
    fn perturb_scale_zero_identity_except_id() {
        let base = basic_config();
        let p = perturb_config(&base, 0.0, &ValidRanges::default(), 42);
        assert_ne!(p.id, base.id);
        let mut p2 = p.clone();
        p2.id = base.id.clone();
        assert_eq!(p2, base);
    }

    #[test]
    fn perturb_clips_at_range_max() {
        let ranges = ValidRanges::default();
        let mut base = basic_config();
        base.density = 60.0;
        for seed in 0..50 {
            let p = perturb_config(&base, 0.5, &ranges, seed);
            assert!(p.density <= 60.0);
        }
    }

    #[test]
    fn perturb_statistics() {
        let ranges = ValidRanges::default();
        let base = sample_config(11, &ranges).unwrap();
        let scale = 0.2;
        let width = ranges.density.1 - ranges.density.0.max(0.0);
        let mut sum_abs = 0.0;
        for seed in 0..500 {
            let p = perturb_config(&base, scale, &ranges, seed);
            p.validate(&ranges).unwrap();
            let moved = (p.density - base.density).abs();
            assert!(moved <= scale * width + 1e-9);
            sum_abs += moved;
        }
        assert!(sum_abs / 500.0 <= scale * width);
    }

    #[test]
    fn behavior_param_dominance() {
        let a = BehaviorParams::for_class(BehaviorClass::Aggressive);
        let r = BehaviorParams::for_class(BehaviorClass::Regular);
        let d = BehaviorParams::for_class(BehaviorClass::Defensive);
        assert!(a.desired_speed > r.desired_speed && r.desired_speed > d.desired_speed);
        assert!(a.max_acceleration > r.max_acceleration && r.max_acceleration > d.max_acceleration);
        assert!(d.desired_time_headway > r.desired_time_headway);
        assert!(r.desired_time_headway > a.desired_time_headway);
        assert!(d.politeness > r.politeness && r.politeness > a.politeness);
    }

    #[test]
    fn pair_must_be_complete() {
        let mut c = basic_config();
        c.vehicle_i = Some(VehicleSeed {
            x: 100.0,
            lane: 0,
            speed: 20.0,
            acceleration: 0.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
        });
        assert!(c.validate(&ValidRanges::default()).is_err());
    }
}
