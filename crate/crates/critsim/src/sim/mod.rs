//! Minimal multi-lane highway environment.
//!
//! A [`Simulator`] spawns background traffic from a [`ScenarioConfig`],
//! advances everything with IDM car following and MOBIL lane changes at
//! `sim_frequency`, and exposes a five-action ego interface at
//! `policy_frequency`. Background vehicles wrap around the road; the ego
//! does not, and reaching the road end truncates the episode.
//!
//! Episodes are fully determined by `(config, seed, action sequence)`.

pub mod driver;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{self, RiskConfig, RiskReport, StepRisk};
use crate::scenario::{BehaviorClass, BehaviorParams, ScenarioConfig, VehicleKind};
use driver::{idm_accel, mobil_incentive, MobilTerms, MIN_GAP};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible placement: {0}")]
    Infeasible(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Discrete ego meta-actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    LaneLeft,
    Idle,
    LaneRight,
    Faster,
    Slower,
}

impl Action {
    pub const ALL: [Action; 5] =
        [Action::LaneLeft, Action::Idle, Action::LaneRight, Action::Faster, Action::Slower];

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|a| *a == self).unwrap()
    }
}

/// Simulation constants. Defaults follow the usual highway-simulation
/// conventions: 15 Hz physics under a 1 Hz policy, 4 m lanes, 1 s lane
/// changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub sim_frequency: f64,
    pub policy_frequency: f64,
    pub lane_width: f64,
    pub road_length: f64,
    pub lane_change_duration: f64,
    pub max_episode_steps: u32,
    pub ego_start_x: f64,
    /// Kept low enough that an idle ego still fits `max_episode_steps`
    /// policy steps onto the road before truncation.
    pub ego_start_speed: f64,
    /// Target-speed increment of FASTER/SLOWER, m/s.
    pub speed_delta: f64,
    /// Upper bound on the ego target speed, m/s.
    pub ego_max_target_speed: f64,
    /// Number of nearest vehicles encoded in the observation.
    pub observe_neighbors: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            sim_frequency: 15.0,
            policy_frequency: 1.0,
            lane_width: 4.0,
            road_length: 1000.0,
            lane_change_duration: 1.0,
            max_episode_steps: 120,
            ego_start_x: 30.0,
            ego_start_speed: 8.0,
            speed_delta: 5.0,
            ego_max_target_speed: 40.0,
            observe_neighbors: 5,
        }
    }
}

/// Absolute speed cap for every vehicle, m/s.
pub const SPEED_CAP: f64 = 60.0;
/// Reward shaping: the speed term ramps from `REWARD_SPEED_MIN` to
/// `REWARD_SPEED_MAX`.
pub const REWARD_SPEED_MIN: f64 = 20.0;
pub const REWARD_SPEED_MAX: f64 = 30.0;
pub const REWARD_SPEED_COEFF: f64 = 0.6;
pub const REWARD_CRASH: f64 = -1.0;
pub const REWARD_LANE_CHANGE: f64 = -0.05;
/// Observation normalization constants.
pub const OBS_DX_NORM: f64 = 100.0;
pub const OBS_SPEED_NORM: f64 = 30.0;
/// Ego features preceding the neighbor slots.
pub const OBS_EGO_FEATURES: usize = 3;
pub const OBS_NEIGHBOR_FEATURES: usize = 5;

/// Ego acceleration bounds under the speed controller, m/s².
const EGO_ACCEL_MAX: f64 = 5.0;
const EGO_BRAKE_MAX: f64 = 8.0;
/// Proportional gain of the ego speed controller, 1/s.
const EGO_SPEED_KP: f64 = 1.0 / 0.6;
/// Idle time required between background lane-change decisions, seconds.
const LANE_CHANGE_COOLDOWN: f64 = 2.0;

/// Kinematic snapshot of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    /// Longitudinal position, meters.
    pub x: f64,
    /// Discrete lane index (0 = leftmost).
    pub lane: u32,
    /// Lateral offset from the current lane center, meters.
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub behavior: BehaviorClass,
    pub kind: VehicleKind,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    /// Absolute lateral position: lane center plus offset.
    pub fn lateral_position(&self, lane_width: f64) -> f64 {
        self.lane as f64 * lane_width + self.y
    }
}

/// Snapshot of the whole scene at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub ego: VehicleState,
    pub others: Vec<VehicleState>,
    pub lane_count: u32,
    pub lane_width: f64,
    pub road_length: f64,
}

fn wrap_forward(from: f64, to: f64, road_length: f64) -> f64 {
    (to - from).rem_euclid(road_length)
}

impl WorldState {
    /// Same-lane vehicle ahead of the ego with the smallest bumper gap.
    pub fn ego_leader(&self) -> Option<(&VehicleState, f64)> {
        let ego_x = self.ego.x.rem_euclid(self.road_length);
        self.others
            .iter()
            .filter(|v| v.lane == self.ego.lane)
            .map(|v| {
                let center_gap = wrap_forward(ego_x, v.x, self.road_length);
                (v, center_gap - (self.ego.length + v.length) / 2.0)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Adjacent-lane vehicle minimizing |Δx| (ties broken by id); the
    /// second element is the lateral edge gap.
    pub fn ego_nearest_lane_neighbor(&self) -> Option<(&VehicleState, f64)> {
        let ego_x = self.ego.x.rem_euclid(self.road_length);
        self.others
            .iter()
            .filter(|v| (v.lane as i64 - self.ego.lane as i64).abs() == 1)
            .map(|v| {
                let fwd = wrap_forward(ego_x, v.x, self.road_length);
                let dx = fwd.min(self.road_length - fwd);
                (v, dx)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)))
            .map(|(v, _)| {
                let lat_gap = (v.lateral_position(self.lane_width)
                    - self.ego.lateral_position(self.lane_width))
                .abs()
                    - (self.ego.width + v.width) / 2.0;
                (v, lat_gap.max(0.0))
            })
    }
}

/// Outcome of one policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub crashed: bool,
    pub truncated: bool,
    pub lane_change: bool,
    pub risk: StepRisk,
}

/// Result of one full episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub length: u32,
    pub crashed: bool,
    pub risk: RiskReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<WorldState>>,
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: u32,
    x: f64,
    /// Absolute lateral position; equals lane * lane_width when centered.
    lat: f64,
    lane: u32,
    target_lane: u32,
    vx: f64,
    vy: f64,
    ax: f64,
    behavior: BehaviorClass,
    kind: VehicleKind,
    length: f64,
    width: f64,
    params: BehaviorParams,
    cooldown: f64,
}

impl Vehicle {
    fn changing(&self, lane_width: f64) -> bool {
        (self.lat - self.target_lane as f64 * lane_width).abs() > 1e-9
    }

    fn snapshot(&self, lane_width: f64) -> VehicleState {
        VehicleState {
            id: self.id,
            x: self.x,
            lane: self.lane,
            y: self.lat - self.lane as f64 * lane_width,
            vx: self.vx,
            vy: self.vy,
            ax: self.ax,
            behavior: self.behavior,
            kind: self.kind,
            length: self.length,
            width: self.width,
        }
    }
}

pub struct Simulator {
    params: SimParams,
    risk_cfg: RiskConfig,
    lane_count: u32,
    ego: Vehicle,
    ego_target_speed: f64,
    others: Vec<Vehicle>,
    time: f64,
    steps: u32,
    crashed: bool,
    truncated: bool,
    bg_collisions: u32,
}

fn behavior_desired_speed(params: &BehaviorParams, kind: VehicleKind) -> f64 {
    match kind {
        VehicleKind::Truck => params.desired_speed.min(25.0),
        VehicleKind::Car => params.desired_speed,
    }
}

impl Simulator {
    /// Spawns the scene described by `config` using `config.seed`.
    pub fn spawn(config: &ScenarioConfig, params: &SimParams, risk_cfg: &RiskConfig) -> Result<Simulator, SimError> {
        Simulator::spawn_seeded(config, params, risk_cfg, config.seed)
    }

    /// Spawns with an explicit seed, overriding `config.seed`. Training and
    /// evaluation vary the seed per episode to get fresh traffic layouts.
    pub fn spawn_seeded(
        config: &ScenarioConfig,
        params: &SimParams,
        risk_cfg: &RiskConfig,
        seed: u64,
    ) -> Result<Simulator, SimError> {
        let behavior_total = config.num_aggressive + config.num_defensive + config.num_regular;
        let type_total = config.num_trucks + config.num_cars;
        if behavior_total != type_total {
            return Err(SimError::InvalidConfig(format!(
                "behavior counts sum to {behavior_total}, type counts to {type_total}"
            )));
        }
        if config.lane_count < 1 {
            return Err(SimError::InvalidConfig("lane_count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lane_count = config.lane_count;
        let road = params.road_length;

        let mut behaviors: Vec<BehaviorClass> = Vec::with_capacity(type_total as usize);
        for (class, count) in [
            (BehaviorClass::Aggressive, config.num_aggressive),
            (BehaviorClass::Defensive, config.num_defensive),
            (BehaviorClass::Regular, config.num_regular),
        ] {
            behaviors.extend(std::iter::repeat(class).take(count as usize));
        }
        let mut kinds: Vec<VehicleKind> = Vec::with_capacity(type_total as usize);
        kinds.extend(std::iter::repeat(VehicleKind::Truck).take(config.num_trucks as usize));
        kinds.extend(std::iter::repeat(VehicleKind::Car).take(config.num_cars as usize));
        behaviors.shuffle(&mut rng);
        kinds.shuffle(&mut rng);

        let mut next_id = 1;
        let mut others: Vec<Vehicle> = Vec::with_capacity(type_total as usize);
        let lane_width = params.lane_width;
        let make_vehicle = |id: u32,
                            x: f64,
                            lane: u32,
                            vx: f64,
                            ax: f64,
                            behavior: BehaviorClass,
                            kind: VehicleKind,
                            speed_factor: f64| {
            let mut p = BehaviorParams::for_class(behavior);
            p.desired_speed = behavior_desired_speed(&p, kind) * speed_factor;
            Vehicle {
                id,
                x: x.rem_euclid(road),
                lat: lane as f64 * lane_width,
                lane,
                target_lane: lane,
                vx: vx.clamp(0.0, SPEED_CAP),
                vy: 0.0,
                ax,
                behavior,
                kind,
                length: kind.length(),
                width: kind.width(),
                params: p,
                cooldown: 0.0,
            }
        };

        // Seeded critical pair goes in kinematically verbatim. Its class
        // labels consume matching pool entries; when the pool lacks a
        // match the popped entry wins, keeping the configured counts exact.
        if let Some((vi, vj)) = config.critical_pair() {
            for seed_vehicle in [vi, vj] {
                let behavior = take_matching(&mut behaviors, seed_vehicle.behavior)
                    .ok_or_else(|| SimError::InvalidConfig("critical pair exceeds vehicle counts".into()))?;
                let kind = take_matching(&mut kinds, seed_vehicle.kind)
                    .ok_or_else(|| SimError::InvalidConfig("critical pair exceeds vehicle counts".into()))?;
                let lane = seed_vehicle.lane.min(lane_count - 1);
                let v = make_vehicle(
                    next_id,
                    seed_vehicle.x,
                    lane,
                    seed_vehicle.speed,
                    seed_vehicle.acceleration,
                    behavior,
                    kind,
                    1.0,
                );
                next_id += 1;
                others.push(v);
            }
        }

        // Remaining traffic spreads ahead of the ego over a window sized by
        // the configured density, widened when the min-gap floor demands it.
        let remaining = behaviors.len();
        if remaining > 0 {
            let mut lanes_of: Vec<u32> = (0..remaining).map(|_| rng.gen_range(0..lane_count)).collect();
            lanes_of.sort_unstable();
            let mut per_lane: Vec<usize> = vec![0; lane_count as usize];
            for &l in &lanes_of {
                per_lane[l as usize] += 1;
            }
            let density_window = type_total as f64 * 1000.0 / (config.density * lane_count as f64);
            let max_per_lane = per_lane.iter().copied().max().unwrap_or(0);
            let spacing_needed = 20.0; // worst-case truck pair plus jitter margin
            let min_window = max_per_lane as f64 * spacing_needed;
            let window = density_window.max(min_window).min(road - 80.0);
            if min_window > road - 80.0 {
                return Err(SimError::Infeasible(format!(
                    "{max_per_lane} vehicles per lane cannot keep minimum gaps on a {road} m road"
                )));
            }
            let start = params.ego_start_x + 25.0;
            let mut pool_idx = 0;
            for lane in 0..lane_count {
                let k = per_lane[lane as usize];
                for i in 0..k {
                    let jitter: f64 = rng.gen_range(-0.15..0.15);
                    let x = start + window * (i as f64 + 0.5 + jitter) / k as f64;
                    let behavior = behaviors[pool_idx];
                    let kind = kinds[pool_idx];
                    pool_idx += 1;
                    let p = BehaviorParams::for_class(behavior);
                    let v0 = behavior_desired_speed(&p, kind);
                    let speed = v0 * rng.gen_range(0.7..1.0);
                    let factor: f64 = rng.gen_range(0.9..1.05);
                    let v = make_vehicle(next_id, x, lane, speed, 0.0, behavior, kind, factor);
                    next_id += 1;
                    others.push(v);
                }
            }
        }

        let ego_lane = lane_count / 2;
        let mut ego = Vehicle {
            id: 0,
            x: params.ego_start_x,
            lat: ego_lane as f64 * params.lane_width,
            lane: ego_lane,
            target_lane: ego_lane,
            vx: params.ego_start_speed,
            vy: 0.0,
            ax: 0.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
            length: VehicleKind::Car.length(),
            width: VehicleKind::Car.width(),
            params: BehaviorParams::for_class(BehaviorClass::Regular),
            cooldown: 0.0,
        };

        // Nudge generated vehicles off the seeded pair and the ego; never
        // move the seeded pair itself.
        let anchor_count = if config.critical_pair().is_some() { 2 } else { 0 };
        for _ in 0..4 {
            let anchors: Vec<(f64, u32)> = others[..anchor_count]
                .iter()
                .map(|v| (v.x, v.lane))
                .chain(std::iter::once((ego.x.rem_euclid(road), ego.lane)))
                .collect();
            for v in others.iter_mut().skip(anchor_count) {
                for &(ax_pos, alane) in &anchors {
                    if v.lane == alane {
                        let fwd = wrap_forward(ax_pos, v.x, road);
                        let back = road - fwd;
                        if fwd < 16.0 {
                            v.x = (ax_pos + 16.0).rem_euclid(road);
                        } else if back < 16.0 {
                            v.x = (ax_pos - 16.0).rem_euclid(road);
                        }
                    }
                }
            }
        }
        // The ego yields to the seeded pair if it spawned on top of it.
        for v in &others[..anchor_count] {
            if v.lane == ego.lane {
                let gap = wrap_forward(ego.x.rem_euclid(road), v.x, road);
                if gap < 15.0 || road - gap < 15.0 {
                    ego.x = (v.x - 20.0).max(0.0);
                    ego.lat = ego.lane as f64 * params.lane_width;
                }
            }
        }

        let sim = Simulator {
            params: params.clone(),
            risk_cfg: risk_cfg.clone(),
            lane_count,
            ego,
            ego_target_speed: params.ego_start_speed,
            others,
            time: 0.0,
            steps: 0,
            crashed: false,
            truncated: false,
            bg_collisions: 0,
        };
        for (a, b, _) in sim.overlapping_pairs() {
            if a == 0 || b == 0 {
                return Err(SimError::Infeasible(format!(
                    "spawn produced overlapping vehicles {a} and {b}"
                )));
            }
        }
        Ok(sim)
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Background-on-background collisions seen so far (diagnostics only;
    /// they do not end the episode).
    pub fn background_collisions(&self) -> u32 {
        self.bg_collisions
    }

    pub fn world(&self) -> WorldState {
        WorldState {
            time: self.time,
            ego: self.ego.snapshot(self.params.lane_width),
            others: self.others.iter().map(|v| v.snapshot(self.params.lane_width)).collect(),
            lane_count: self.lane_count,
            lane_width: self.params.lane_width,
            road_length: self.params.road_length,
        }
    }

    fn position_on_circle(&self, idx: Option<usize>) -> (f64, u32, f64) {
        match idx {
            None => (self.ego.x.rem_euclid(self.params.road_length), self.ego.lane, self.ego.length),
            Some(i) => (self.others[i].x, self.others[i].lane, self.others[i].length),
        }
    }

    /// Nearest vehicle ahead of `who` in `lane`: returns (index-or-ego,
    /// bumper gap, leader speed). `None` index means the ego.
    fn leader_in_lane(&self, who: Option<usize>, lane: u32) -> Option<(Option<usize>, f64, f64)> {
        let (x, _, len) = self.position_on_circle(who);
        let road = self.params.road_length;
        let mut best: Option<(Option<usize>, f64, f64)> = None;
        let mut consider = |idx: Option<usize>, ox: f64, olane: u32, olen: f64, ovx: f64| {
            if olane != lane {
                return;
            }
            let center_gap = wrap_forward(x, ox, road);
            if center_gap <= 1e-9 {
                return;
            }
            let gap = center_gap - (len + olen) / 2.0;
            if best.map_or(true, |(_, g, _)| gap < g) {
                best = Some((idx, gap, ovx));
            }
        };
        if who.is_some() {
            consider(None, self.ego.x.rem_euclid(road), self.ego.lane, self.ego.length, self.ego.vx);
        }
        for (i, v) in self.others.iter().enumerate() {
            if Some(i) == who {
                continue;
            }
            consider(Some(i), v.x, v.lane, v.length, v.vx);
        }
        best
    }

    fn follower_in_lane(&self, who: Option<usize>, lane: u32) -> Option<(Option<usize>, f64, f64)> {
        let (x, _, len) = self.position_on_circle(who);
        let road = self.params.road_length;
        let mut best: Option<(Option<usize>, f64, f64)> = None;
        let mut consider = |idx: Option<usize>, ox: f64, olane: u32, olen: f64, ovx: f64| {
            if olane != lane {
                return;
            }
            let center_gap = wrap_forward(ox, x, road);
            if center_gap <= 1e-9 {
                return;
            }
            let gap = center_gap - (len + olen) / 2.0;
            if best.map_or(true, |(_, g, _)| gap < g) {
                best = Some((idx, gap, ovx));
            }
        };
        if who.is_some() {
            consider(None, self.ego.x.rem_euclid(road), self.ego.lane, self.ego.length, self.ego.vx);
        }
        for (i, v) in self.others.iter().enumerate() {
            if Some(i) == who {
                continue;
            }
            consider(Some(i), v.x, v.lane, v.length, v.vx);
        }
        best
    }

    fn idm_for(&self, i: usize, lane: u32) -> f64 {
        let v = &self.others[i];
        let leader = self.leader_in_lane(Some(i), lane).map(|(_, gap, lvx)| (gap, lvx));
        idm_accel(v.vx, v.params.desired_speed, leader, &v.params)
    }

    /// MOBIL evaluation for background vehicle `i`; sets its target lane
    /// when a change both passes the safety criterion and pays off.
    fn consider_lane_change(&mut self, i: usize) {
        let (lane, params) = (self.others[i].lane, self.others[i].params.clone());
        let self_old = self.idm_for(i, lane);

        let mut best: Option<(u32, f64)> = None;
        let mut candidates = Vec::new();
        if lane + 1 < self.lane_count {
            candidates.push(lane + 1);
        }
        if lane > 0 {
            candidates.push(lane - 1);
        }
        for new_lane in candidates {
            let v = &self.others[i];
            let new_leader = self.leader_in_lane(Some(i), new_lane);
            let new_follower = self.follower_in_lane(Some(i), new_lane);
            if let Some((_, gap, _)) = new_leader {
                if gap <= MIN_GAP {
                    continue;
                }
            }
            if let Some((_, gap, _)) = new_follower {
                if gap <= MIN_GAP {
                    continue;
                }
            }
            let self_new =
                idm_accel(v.vx, v.params.desired_speed, new_leader.map(|(_, g, s)| (g, s)), &v.params);

            let (nf_old, nf_new) = match new_follower {
                Some((Some(fi), gap, _)) => {
                    let f = &self.others[fi];
                    let old = self.idm_for(fi, new_lane);
                    let new = idm_accel(f.vx, f.params.desired_speed, Some((gap, v.vx)), &f.params);
                    (old, new)
                }
                // The ego as new follower: it has no IDM response, so the
                // imposed-braking term is judged with its own kinematics
                // under regular-class parameters.
                Some((None, gap, _)) => {
                    let p = BehaviorParams::for_class(BehaviorClass::Regular);
                    let old = idm_accel(
                        self.ego.vx,
                        p.desired_speed,
                        self.leader_in_lane(None, new_lane).map(|(_, g, s)| (g, s)),
                        &p,
                    );
                    let new = idm_accel(self.ego.vx, p.desired_speed, Some((gap, v.vx)), &p);
                    (old, new)
                }
                None => (0.0, 0.0),
            };

            // After the change the old follower inherits whatever was ahead
            // of the changer.
            let (of_old, of_new) = match self.follower_in_lane(Some(i), lane) {
                Some((Some(fi), gap, _)) => {
                    let f = &self.others[fi];
                    let old = idm_accel(f.vx, f.params.desired_speed, Some((gap, v.vx)), &f.params);
                    let beyond = self
                        .leader_in_lane(Some(i), lane)
                        .map(|(_, g, s)| (gap + g + v.length, s));
                    let new = idm_accel(f.vx, f.params.desired_speed, beyond, &f.params);
                    (old, new)
                }
                _ => (0.0, 0.0),
            };

            let terms = MobilTerms {
                self_old,
                self_new,
                new_follower_old: nf_old,
                new_follower_new: nf_new,
                old_follower_old: of_old,
                old_follower_new: of_new,
            };
            if let Some(incentive) = mobil_incentive(&terms, &params) {
                if best.map_or(true, |(_, b)| incentive > b) {
                    best = Some((new_lane, incentive));
                }
            }
        }
        if let Some((new_lane, _)) = best {
            let v = &mut self.others[i];
            v.target_lane = new_lane;
            v.cooldown = self.params.lane_change_duration + LANE_CHANGE_COOLDOWN;
        }
    }

    fn integrate_lateral(v: &mut Vehicle, lane_width: f64, duration: f64, dt: f64, lane_count: u32) {
        let target = v.target_lane as f64 * lane_width;
        let delta = target - v.lat;
        if delta.abs() < 1e-9 {
            v.vy = 0.0;
            v.lane = v.target_lane;
            return;
        }
        let rate = lane_width / duration;
        let step = rate * dt;
        if delta.abs() <= step {
            v.lat = target;
            v.vy = 0.0;
        } else {
            v.vy = rate * delta.signum();
            v.lat += v.vy * dt;
        }
        let nearest = (v.lat / lane_width).round().clamp(0.0, (lane_count - 1) as f64);
        v.lane = nearest as u32;
    }

    fn overlapping_pairs(&self) -> Vec<(u32, u32, f64)> {
        let road = self.params.road_length;
        let mut hits = Vec::new();
        let all: Vec<(u32, f64, f64, f64, f64)> = std::iter::once(&self.ego)
            .chain(self.others.iter())
            .map(|v| (v.id, v.x.rem_euclid(road), v.lat, v.length, v.width))
            .collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                let (ia, xa, la, lena, wa) = all[i];
                let (ib, xb, lb, lenb, wb) = all[j];
                let fwd = wrap_forward(xa, xb, road);
                let dx = fwd.min(road - fwd);
                if dx < (lena + lenb) / 2.0 && (la - lb).abs() < (wa + wb) / 2.0 {
                    hits.push((ia, ib, dx));
                }
            }
        }
        hits
    }

    fn substep(&mut self) {
        let dt = 1.0 / self.params.sim_frequency;
        let road = self.params.road_length;

        // Lane-change decisions, in id order.
        for i in 0..self.others.len() {
            let v = &self.others[i];
            if v.cooldown <= 0.0 && !v.changing(self.params.lane_width) {
                self.consider_lane_change(i);
            }
        }

        // Accelerations from a frozen snapshot.
        let mut accels = vec![0.0; self.others.len()];
        for i in 0..self.others.len() {
            let v = &self.others[i];
            let a_current = self.idm_for(i, v.lane);
            let a = if v.lane != v.target_lane {
                a_current.min(self.idm_for(i, v.target_lane))
            } else {
                a_current
            };
            accels[i] = a;
        }
        let ego_accel = (EGO_SPEED_KP * (self.ego_target_speed - self.ego.vx))
            .clamp(-EGO_BRAKE_MAX, EGO_ACCEL_MAX);

        // Semi-implicit Euler.
        for (i, v) in self.others.iter_mut().enumerate() {
            v.ax = accels[i];
            v.vx = (v.vx + v.ax * dt).clamp(0.0, SPEED_CAP);
            v.x = (v.x + v.vx * dt).rem_euclid(road);
            Simulator::integrate_lateral(
                v,
                self.params.lane_width,
                self.params.lane_change_duration,
                dt,
                self.lane_count,
            );
            v.cooldown = (v.cooldown - dt).max(0.0);
        }
        self.ego.ax = ego_accel;
        self.ego.vx = (self.ego.vx + ego_accel * dt).clamp(0.0, SPEED_CAP);
        self.ego.x += self.ego.vx * dt;
        Simulator::integrate_lateral(
            &mut self.ego,
            self.params.lane_width,
            self.params.lane_change_duration,
            dt,
            self.lane_count,
        );

        self.time += dt;

        for (a, b, _) in self.overlapping_pairs() {
            if a == 0 || b == 0 {
                self.crashed = true;
            } else {
                self.bg_collisions += 1;
            }
        }
        if self.ego.x >= road {
            self.truncated = true;
        }
    }

    /// Advances one policy step: applies the meta-action, then runs
    /// `sim_frequency / policy_frequency` physics substeps.
    pub fn step(&mut self, action: Action) -> StepOutcome {
        let mut lane_change = false;
        match action {
            Action::Faster => {
                self.ego_target_speed =
                    (self.ego_target_speed + self.params.speed_delta).min(self.params.ego_max_target_speed);
            }
            Action::Slower => {
                self.ego_target_speed = (self.ego_target_speed - self.params.speed_delta).max(0.0);
            }
            Action::LaneLeft => {
                if !self.ego.changing(self.params.lane_width) && self.ego.target_lane > 0 {
                    self.ego.target_lane -= 1;
                    lane_change = true;
                }
            }
            Action::LaneRight => {
                if !self.ego.changing(self.params.lane_width)
                    && self.ego.target_lane + 1 < self.lane_count
                {
                    self.ego.target_lane += 1;
                    lane_change = true;
                }
            }
            Action::Idle => {}
        }

        let substeps = (self.params.sim_frequency / self.params.policy_frequency).round() as usize;
        for _ in 0..substeps {
            self.substep();
            if self.crashed {
                break;
            }
        }
        self.steps += 1;

        let world = self.world();
        let step_risk = risk::evaluate_step(&world, &self.risk_cfg);

        let speed_frac =
            ((self.ego.vx - REWARD_SPEED_MIN) / (REWARD_SPEED_MAX - REWARD_SPEED_MIN)).clamp(0.0, 1.0);
        let reward = if self.crashed {
            REWARD_CRASH
        } else {
            REWARD_SPEED_COEFF * speed_frac + if lane_change { REWARD_LANE_CHANGE } else { 0.0 }
        };

        let done =
            self.crashed || self.truncated || self.steps >= self.params.max_episode_steps;
        StepOutcome {
            reward,
            done,
            crashed: self.crashed,
            truncated: self.truncated,
            lane_change,
            risk: step_risk,
        }
    }

    /// Fixed-length observation: ego features, then the K nearest vehicles
    /// by |Δx| (ties by id), each as (presence, Δx, Δlat, Δvx, Δvy), all
    /// normalized and clipped to [-1, 1]. Absent slots are zero.
    pub fn observe(&self) -> Vec<f64> {
        observe(&self.world(), self.params.observe_neighbors)
    }
}

fn take_matching<T: PartialEq + Copy>(pool: &mut Vec<T>, wanted: T) -> Option<T> {
    if let Some(pos) = pool.iter().position(|v| *v == wanted) {
        Some(pool.remove(pos))
    } else {
        pool.pop()
    }
}

/// Observation encoding; see [`Simulator::observe`].
pub fn observe(world: &WorldState, k: usize) -> Vec<f64> {
    let mut obs = Vec::with_capacity(OBS_EGO_FEATURES + k * OBS_NEIGHBOR_FEATURES);
    let clip = |v: f64| v.clamp(-1.0, 1.0);
    let lat_span = ((world.lane_count.max(2) - 1) as f64 * world.lane_width).max(1e-9);
    obs.push(clip(world.ego.vx / OBS_SPEED_NORM));
    obs.push(clip(world.ego.vy / OBS_SPEED_NORM));
    obs.push(clip(2.0 * world.ego.lateral_position(world.lane_width) / lat_span - 1.0));

    let ego_x = world.ego.x.rem_euclid(world.road_length);
    let mut neighbors: Vec<(f64, u32, &VehicleState)> = world
        .others
        .iter()
        .map(|v| {
            let fwd = wrap_forward(ego_x, v.x, world.road_length);
            let signed = if fwd <= world.road_length / 2.0 { fwd } else { fwd - world.road_length };
            (signed, v.id, v)
        })
        .collect();
    neighbors.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()).then(a.1.cmp(&b.1)));

    let lat_norm = (world.lane_count as f64 * world.lane_width).max(1e-9);
    for slot in 0..k {
        match neighbors.get(slot) {
            Some((dx, _, v)) => {
                obs.push(1.0);
                obs.push(clip(dx / OBS_DX_NORM));
                obs.push(clip(
                    (v.lateral_position(world.lane_width) - world.ego.lateral_position(world.lane_width))
                        / lat_norm,
                ));
                obs.push(clip((v.vx - world.ego.vx) / OBS_SPEED_NORM));
                obs.push(clip((v.vy - world.ego.vy) / OBS_SPEED_NORM));
            }
            None => obs.extend_from_slice(&[0.0; OBS_NEIGHBOR_FEATURES as usize]),
        }
    }
    obs
}

/// Observation length for `k` neighbor slots.
pub fn observation_len(k: usize) -> usize {
    OBS_EGO_FEATURES + k * OBS_NEIGHBOR_FEATURES
}

/// Runs one full episode under `policy`, accumulating rewards and the
/// per-step risk counters.
pub fn run_episode(
    config: &ScenarioConfig,
    params: &SimParams,
    risk_cfg: &RiskConfig,
    policy: &mut dyn FnMut(&[f64]) -> Action,
    seed_override: Option<u64>,
    max_steps: Option<u32>,
    want_trace: bool,
) -> Result<EpisodeResult, SimError> {
    let mut sim_params = params.clone();
    if let Some(m) = max_steps {
        sim_params.max_episode_steps = m;
    }
    let seed = seed_override.unwrap_or(config.seed);
    let mut sim = Simulator::spawn_seeded(config, &sim_params, risk_cfg, seed)?;
    let mut report = RiskReport::default();
    let mut trace = want_trace.then(|| vec![sim.world()]);
    let mut total_reward = 0.0;
    loop {
        let obs = sim.observe();
        let action = policy(&obs);
        let out = sim.step(action);
        let world = sim.world();
        report = risk::accumulate(&report, &world, risk_cfg);
        total_reward += out.reward;
        if let Some(t) = trace.as_mut() {
            t.push(world);
        }
        if out.done {
            break;
        }
    }
    report.crashed = sim.crashed();
    Ok(EpisodeResult {
        total_reward,
        length: sim.steps(),
        crashed: sim.crashed(),
        risk: report,
        trace,
    })
}

/// Writes a trace as line-delimited records: one world per line, vehicles
/// sorted by id with the ego included.
pub fn write_trace<W: Write>(mut w: W, trace: &[WorldState]) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        time: f64,
        vehicles: Vec<&'a VehicleState>,
    }
    for world in trace {
        let mut vehicles: Vec<&VehicleState> =
            std::iter::once(&world.ego).chain(world.others.iter()).collect();
        vehicles.sort_by_key(|v| v.id);
        let line = Line { time: world.time, vehicles };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{sample_config, ValidRanges, VehicleSeed};

    fn empty_config() -> ScenarioConfig {
        ScenarioConfig {
            id: "empty".into(),
            num_aggressive: 0,
            num_defensive: 0,
            num_regular: 0,
            num_trucks: 0,
            num_cars: 0,
            density: 15.0,
            vehicle_i: None,
            vehicle_j: None,
            lane_count: 3,
            seed: 1,
        }
    }

    fn traffic_config(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            id: format!("traffic-{seed}"),
            num_aggressive: 3,
            num_defensive: 3,
            num_regular: 4,
            num_trucks: 2,
            num_cars: 8,
            density: 15.0,
            vehicle_i: None,
            vehicle_j: None,
            lane_count: 3,
            seed,
        }
    }

    #[test]
    fn spawn_empty_traffic() {
        let sim =
            Simulator::spawn(&empty_config(), &SimParams::default(), &RiskConfig::default()).unwrap();
        let world = sim.world();
        assert!(world.others.is_empty());
        assert_eq!(world.ego.id, 0);
    }

    #[test]
    fn spawn_critical_pair_verbatim() {
        let mut config = traffic_config(3);
        config.vehicle_i = Some(VehicleSeed {
            x: 100.0,
            lane: 1,
            speed: 30.0,
            acceleration: 0.0,
            behavior: BehaviorClass::Aggressive,
            kind: VehicleKind::Car,
        });
        config.vehicle_j = Some(VehicleSeed {
            x: 120.0,
            lane: 1,
            speed: 20.0,
            acceleration: -1.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
        });
        let sim =
            Simulator::spawn(&config, &SimParams::default(), &RiskConfig::default()).unwrap();
        let world = sim.world();
        assert_eq!(world.others.len(), 10);
        let vi = &world.others[0];
        let vj = &world.others[1];
        assert_eq!((vi.x, vi.lane, vi.vx), (100.0, 1, 30.0));
        assert_eq!((vj.x, vj.lane, vj.vx, vj.ax), (120.0, 1, 20.0, -1.0));
    }

    #[test]
    fn spawn_deterministic() {
        let config = traffic_config(9);
        let params = SimParams::default();
        let risk = RiskConfig::default();
        let a = Simulator::spawn(&config, &params, &risk).unwrap().world();
        let b = Simulator::spawn(&config, &params, &risk).unwrap().world();
        assert_eq!(a, b);
    }

    #[test]
    fn spawn_counts_match_config() {
        let ranges = ValidRanges::default();
        for seed in 0..30 {
            let config = sample_config(seed, &ranges).unwrap();
            let sim =
                Simulator::spawn(&config, &SimParams::default(), &RiskConfig::default()).unwrap();
            let world = sim.world();
            assert_eq!(world.others.len() as u32, config.background_count());
            for class in BehaviorClass::ALL {
                let n = world.others.iter().filter(|v| v.behavior == class).count() as u32;
                assert_eq!(n, config.behavior_count(class), "config {}", config.id);
            }
            let trucks =
                world.others.iter().filter(|v| v.kind == VehicleKind::Truck).count() as u32;
            assert_eq!(trucks, config.num_trucks);
        }
    }

    #[test]
    fn faster_accelerates_to_cap() {
        let mut sim =
            Simulator::spawn(&empty_config(), &SimParams::default(), &RiskConfig::default()).unwrap();
        let mut last = sim.world().ego.vx;
        let mut increased = false;
        for _ in 0..30 {
            let out = sim.step(Action::Faster);
            let now = sim.world().ego.vx;
            assert!(now >= last - 1e-9);
            if now > last {
                increased = true;
            }
            last = now;
            assert!(!out.crashed);
            if out.done {
                break;
            }
        }
        assert!(increased);
        assert!(last <= SimParams::default().ego_max_target_speed + 1e-9);
    }

    #[test]
    fn stopped_leader_crash_within_a_second() {
        // Closing at 30 m/s over a 5 m gap cannot be survived.
        let mut config = empty_config();
        config.num_regular = 1;
        config.num_cars = 1;
        config.vehicle_i = Some(VehicleSeed {
            x: 300.0,
            lane: 1,
            speed: 0.0,
            acceleration: 0.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
        });
        config.vehicle_j = Some(VehicleSeed {
            x: 300.0,
            lane: 1,
            speed: 0.0,
            acceleration: 0.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
        });
        // Only one background vehicle: the pair collapses to vehicle_i and
        // the pool fallback covers vehicle_j.
        config.num_regular = 2;
        config.num_cars = 2;
        config.vehicle_j.as_mut().unwrap().x = 500.0;

        let mut params = SimParams::default();
        params.ego_start_x = 290.0; // 10 m center gap = 5 m bumper gap
        params.ego_start_speed = 30.0;
        let mut sim = Simulator::spawn(&config, &params, &RiskConfig::default()).unwrap();
        let out = sim.step(Action::Idle);
        assert!(out.crashed, "expected crash within one policy second");
        assert_eq!(out.reward, REWARD_CRASH);
    }

    #[test]
    fn step_deterministic() {
        let config = traffic_config(12);
        let params = SimParams::default();
        let risk = RiskConfig::default();
        let mut a = Simulator::spawn(&config, &params, &risk).unwrap();
        let mut b = Simulator::spawn(&config, &params, &risk).unwrap();
        for i in 0..40 {
            let action = Action::ALL[i % 5];
            let oa = a.step(action);
            let ob = b.step(action);
            assert_eq!(oa, ob);
            assert_eq!(a.world(), b.world());
            if oa.done {
                break;
            }
        }
    }

    #[test]
    fn idle_empty_runs_to_max_steps() {
        let config = empty_config();
        let result = run_episode(
            &config,
            &SimParams::default(),
            &RiskConfig::default(),
            &mut |_| Action::Idle,
            None,
            None,
            false,
        )
        .unwrap();
        assert!(!result.crashed);
        assert_eq!(result.length, SimParams::default().max_episode_steps);
        assert_eq!(result.risk.ttc_near_miss_count, 0);
        assert_eq!(result.risk.r_threshold_count, 0);
        assert_eq!(result.risk.min_ttc, f64::INFINITY);
    }

    #[test]
    fn scripted_closing_crash_counts_near_miss() {
        let mut config = empty_config();
        config.num_regular = 2;
        config.num_cars = 2;
        config.vehicle_i = Some(VehicleSeed {
            x: 120.0,
            lane: 1,
            speed: 2.0,
            acceleration: 0.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
        });
        config.vehicle_j = Some(VehicleSeed {
            x: 600.0,
            lane: 0,
            speed: 20.0,
            acceleration: 0.0,
            behavior: BehaviorClass::Regular,
            kind: VehicleKind::Car,
        });
        let mut params = SimParams::default();
        params.ego_start_x = 40.0;
        params.ego_start_speed = 25.0;
        let result = run_episode(
            &config,
            &params,
            &RiskConfig::default(),
            &mut |_| Action::Faster,
            None,
            None,
            false,
        )
        .unwrap();
        assert!(result.crashed);
        assert!(result.risk.ttc_near_miss_count >= 1);
        assert!(result.risk.min_ttc < 2.0);
    }

    #[test]
    fn episode_deterministic() {
        let config = traffic_config(77);
        let params = SimParams::default();
        let risk = RiskConfig::default();
        let mut policy = |obs: &[f64]| {
            if obs[0] < 0.8 {
                Action::Faster
            } else {
                Action::Idle
            }
        };
        let a = run_episode(&config, &params, &risk, &mut policy, None, None, true).unwrap();
        let b = run_episode(&config, &params, &risk, &mut policy, None, None, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observe_empty_zero_fills() {
        let sim =
            Simulator::spawn(&empty_config(), &SimParams::default(), &RiskConfig::default()).unwrap();
        let obs = sim.observe();
        assert_eq!(obs.len(), observation_len(5));
        for slot in obs[OBS_EGO_FEATURES..].chunks(OBS_NEIGHBOR_FEATURES) {
            assert_eq!(slot, [0.0; 5]);
        }
    }

    #[test]
    fn observe_dx_normalization_boundary() {
        let mut world = Simulator::spawn(&empty_config(), &SimParams::default(), &RiskConfig::default())
            .unwrap()
            .world();
        let mut v = world.ego.clone();
        v.id = 1;
        v.x = world.ego.x + OBS_DX_NORM;
        world.others.push(v);
        let obs = observe(&world, 5);
        assert_eq!(obs[OBS_EGO_FEATURES], 1.0); // presence
        assert_eq!(obs[OBS_EGO_FEATURES + 1], 1.0); // Δx at the norm constant
    }

    #[test]
    fn observe_equidistant_tie_break_is_order_independent() {
        let base = Simulator::spawn(&empty_config(), &SimParams::default(), &RiskConfig::default())
            .unwrap()
            .world();
        let mut ahead = base.ego.clone();
        ahead.id = 1;
        ahead.x = base.ego.x + 30.0;
        let mut behind = base.ego.clone();
        behind.id = 2;
        behind.x = base.ego.x - 30.0;

        let mut w1 = base.clone();
        w1.others = vec![ahead.clone(), behind.clone()];
        let mut w2 = base.clone();
        w2.others = vec![behind, ahead];
        assert_eq!(observe(&w1, 5), observe(&w2, 5));
        // Lower id wins the tie and fills the first slot.
        let obs = observe(&w1, 5);
        assert_eq!(obs[OBS_EGO_FEATURES + 1], 30.0 / OBS_DX_NORM);
    }

    #[test]
    fn no_teleportation() {
        let config = traffic_config(5);
        let params = SimParams::default();
        let mut sim = Simulator::spawn(&config, &params, &RiskConfig::default()).unwrap();
        let dt = 1.0 / params.policy_frequency;
        let bound = (SPEED_CAP + 5.0 * dt) * dt + 1e-6;
        let mut prev = sim.world();
        for i in 0..60 {
            let out = sim.step(Action::ALL[i % 5]);
            let world = sim.world();
            for (a, b) in prev.others.iter().zip(world.others.iter()) {
                let fwd = wrap_forward(a.x, b.x, params.road_length);
                let moved = fwd.min(params.road_length - fwd);
                assert!(moved <= bound, "vehicle {} moved {moved} m in one step", b.id);
            }
            prev = world;
            if out.done {
                break;
            }
        }
    }

    #[test]
    fn background_stability_long_run() {
        // IDM traffic with adequate spacing stays collision-free.
        let mut config = traffic_config(21);
        config.density = 10.0;
        let mut params = SimParams::default();
        params.ego_start_speed = 25.0;
        params.max_episode_steps = u32::MAX;
        let mut sim = Simulator::spawn(&config, &params, &RiskConfig::default()).unwrap();
        // 10,000 physics substeps.
        for _ in 0..(10_000 / 15 + 1) {
            sim.step(Action::Idle);
        }
        assert_eq!(sim.background_collisions(), 0);
    }

    #[test]
    fn trace_export_shape() {
        let config = traffic_config(2);
        let result = run_episode(
            &config,
            &SimParams::default(),
            &RiskConfig::default(),
            &mut |_| Action::Idle,
            None,
            Some(5),
            true,
        )
        .unwrap();
        let trace = result.trace.unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), trace.len());
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let ids: Vec<u64> = first["vehicles"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v["id"].as_u64().unwrap())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
    }
}
