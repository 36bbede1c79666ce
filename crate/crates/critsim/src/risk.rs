//! Surrogate safety measures.
//!
//! Two per-step measures score how close the ego vehicle comes to a
//! collision without one actually occurring: time-to-collision against the
//! same-lane leader, and a unified risk index built from RSS-style minimum
//! safe longitudinal/lateral distances. Each episode counts the steps on
//! which either measure crosses its threshold. A third measure, risk
//! perception (RP), ranks recorded vehicle-pair encounters when mining
//! trajectory data for critical pairs.
//!
//! All functions here are pure; concurrent rollout workers may call them
//! freely.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::WorldState;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("domain error: {0}")]
    Domain(String),
}

/// RSS-style response parameters: the follower reacts after `rho` seconds,
/// accelerating by at most `a_max` meanwhile, then brakes by at least
/// `b_min`; the leader brakes by at most `b_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RssParams {
    pub rho: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl Default for RssParams {
    fn default() -> Self {
        RssParams { rho: 1.0, a_max: 3.0, b_min: 4.0, b_max: 8.0 }
    }
}

/// Risk-propensity exponents and the per-step threshold pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskParams {
    pub beta: f64,
    pub gamma: f64,
    /// A step with TTC below this counts as a near miss, seconds.
    pub ttc_threshold: f64,
    /// A step with unified risk above this increments the r counter.
    pub r_threshold: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        RiskParams { beta: 1.0, gamma: 1.0, ttc_threshold: 2.0, r_threshold: 0.3 }
    }
}

/// Coefficients of the risk-perception score `a/THW + b/TTC`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpParams {
    pub a_coeff: f64,
    pub b_coeff: f64,
}

impl Default for RpParams {
    fn default() -> Self {
        RpParams { a_coeff: 1.0, b_coeff: 4.0 }
    }
}

/// Everything the per-step accumulator needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    pub rss: RssParams,
    pub params: RiskParams,
}

/// Per-episode surrogate-safety summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub ttc_near_miss_count: u32,
    pub r_threshold_count: u32,
    /// Smallest TTC observed; infinite if the ego never closed on a leader.
    pub min_ttc: f64,
    /// Largest unified risk index observed.
    pub max_r: f64,
    pub crashed: bool,
}

impl Default for RiskReport {
    fn default() -> Self {
        RiskReport {
            ttc_near_miss_count: 0,
            r_threshold_count: 0,
            min_ttc: f64::INFINITY,
            max_r: 0.0,
            crashed: false,
        }
    }
}

/// Time to collision: `x_rel / v_rel` when closing, infinite otherwise.
///
/// `v_rel_closing` is positive when the gap is shrinking. A non-positive
/// closing speed means the vehicles never meet longitudinally.
pub fn ttc(x_rel: f64, v_rel_closing: f64) -> Result<f64, RiskError> {
    if x_rel < 0.0 {
        return Err(RiskError::Domain(format!("ttc: negative relative distance {x_rel}")));
    }
    if v_rel_closing <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(x_rel / v_rel_closing)
}

/// Minimum safe longitudinal distance for a rear vehicle at `v_r` behind a
/// front vehicle at `v_f`:
///
/// `[v_r·ρ + ρ²·a_max/2 + (v_r + ρ·a_max)²/(2·b_min) − v_f²/(2·b_max)]₊`
pub fn d_min_lon(v_r: f64, v_f: f64, p: &RssParams) -> f64 {
    let v_peak = v_r + p.rho * p.a_max;
    let d = v_r * p.rho + 0.5 * p.rho * p.rho * p.a_max + v_peak * v_peak / (2.0 * p.b_min)
        - v_f * v_f / (2.0 * p.b_max);
    d.max(0.0)
}

/// Minimum safe lateral distance between the ego and its nearest lane
/// neighbor:
///
/// `[(v_ego·ρ + v_ego²/(4·b_min)) − (v_nln·ρ + v_nln²/(4·b_min))]₊`
///
/// The lateral axis points from the ego toward the neighbor, so a neighbor
/// closing on the ego carries a negative velocity here, which enlarges the
/// required distance.
pub fn d_min_lat(v_lat_ego: f64, v_lat_nln: f64, p: &RssParams) -> f64 {
    let ego_term = v_lat_ego * p.rho + v_lat_ego * v_lat_ego / (4.0 * p.b_min);
    let nln_term = v_lat_nln * p.rho + v_lat_nln * v_lat_nln / (4.0 * p.b_min);
    (ego_term - nln_term).max(0.0)
}

/// Longitudinal and lateral risk indices: the proportional encroachment
/// below the minimum safe distance, zero when the actual distance is safe.
pub fn risk_indices(d_lon: f64, d_lat: f64, dmin_lon: f64, dmin_lat: f64) -> (f64, f64) {
    let index = |d: f64, dmin: f64| if dmin > d { 1.0 - d / dmin } else { 0.0 };
    (index(d_lon, dmin_lon), index(d_lat, dmin_lat))
}

/// Unified risk index `r = r_lon^β · r_lat^γ`.
pub fn unified_risk(r_lon: f64, r_lat: f64, p: &RiskParams) -> f64 {
    r_lon.powf(p.beta) * r_lat.powf(p.gamma)
}

/// Risk perception `a/THW + b/TTC`; a term vanishes when its input is
/// infinite. Non-positive finite inputs are a domain error.
pub fn rp(thw: f64, ttc: f64, p: &RpParams) -> Result<f64, RiskError> {
    for (name, v) in [("thw", thw), ("ttc", ttc)] {
        if v <= 0.0 || v.is_nan() {
            return Err(RiskError::Domain(format!("rp: non-positive {name} {v}")));
        }
    }
    let term = |coeff: f64, v: f64| if v.is_infinite() { 0.0 } else { coeff / v };
    Ok(term(p.a_coeff, thw) + term(p.b_coeff, ttc))
}

/// One step's measurements of the ego against its interaction partners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRisk {
    pub ttc: f64,
    pub r: f64,
    pub r_lon: f64,
    pub r_lat: f64,
}

impl Default for StepRisk {
    fn default() -> Self {
        StepRisk { ttc: f64::INFINITY, r: 0.0, r_lon: 0.0, r_lat: 0.0 }
    }
}

/// Measures the current world: TTC against the ego's same-lane leader and
/// the unified risk index against the leader (longitudinal) and nearest
/// lane neighbor (lateral).
pub fn evaluate_step(world: &WorldState, cfg: &RiskConfig) -> StepRisk {
    let ego = &world.ego;
    let mut out = StepRisk::default();

    let mut r_lon = 0.0;
    if let Some((leader, gap)) = world.ego_leader() {
        let closing = ego.vx - leader.vx;
        out.ttc = ttc(gap.max(0.0), closing).expect("gap clamped non-negative");
        let dmin = d_min_lon(ego.vx, leader.vx, &cfg.rss);
        r_lon = risk_indices(gap.max(0.0), 0.0, dmin, 0.0).0;
    }

    let mut r_lat = 0.0;
    if let Some((neighbor, lat_gap)) = world.ego_nearest_lane_neighbor() {
        // Lateral axis points from ego toward the neighbor.
        let dir = if neighbor.lateral_position(world.lane_width) >= ego.lateral_position(world.lane_width) {
            1.0
        } else {
            -1.0
        };
        let dmin = d_min_lat(ego.vy * dir, neighbor.vy * dir, &cfg.rss);
        r_lat = risk_indices(0.0, lat_gap.max(0.0), 0.0, dmin).1;
    }

    out.r_lon = r_lon;
    out.r_lat = r_lat;
    out.r = unified_risk(r_lon, r_lat, &cfg.params);
    out
}

impl RiskReport {
    /// Folds one step's measurements into the report.
    pub fn absorb(&mut self, step: &StepRisk, params: &RiskParams) {
        if step.ttc < params.ttc_threshold {
            self.ttc_near_miss_count += 1;
        }
        if step.r > params.r_threshold {
            self.r_threshold_count += 1;
        }
        if step.ttc < self.min_ttc {
            self.min_ttc = step.ttc;
        }
        if step.r > self.max_r {
            self.max_r = step.r;
        }
    }
}

/// Returns `report` updated with this step's threshold counters and
/// extrema; the input report is not modified.
pub fn accumulate(report: &RiskReport, world: &WorldState, cfg: &RiskConfig) -> RiskReport {
    let step = evaluate_step(world, cfg);
    let mut next = report.clone();
    next.absorb(&step, &cfg.params);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ttc_examples() {
        assert_eq!(ttc(50.0, 25.0).unwrap(), 2.0);
        assert_eq!(ttc(50.0, 0.0).unwrap(), f64::INFINITY);
        assert_eq!(ttc(0.0, 10.0).unwrap(), 0.0);
        assert!(ttc(-1.0, 5.0).is_err());
    }

    #[test]
    fn ttc_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let x: f64 = rng.gen_range(0.0..200.0);
            let v: f64 = rng.gen_range(0.1..40.0);
            let dx: f64 = rng.gen_range(0.0..50.0);
            let dv: f64 = rng.gen_range(0.0..10.0);
            assert!(ttc(x + dx, v).unwrap() >= ttc(x, v).unwrap());
            assert!(ttc(x, v + dv).unwrap() <= ttc(x, v).unwrap());
        }
    }

    #[test]
    fn d_min_lon_spot_value() {
        let p = RssParams { rho: 1.0, a_max: 3.0, b_min: 4.0, b_max: 8.0 };
        assert_relative_eq!(d_min_lon(20.0, 10.0, &p), 81.375);
    }

    #[test]
    fn d_min_lon_clamps() {
        let p = RssParams { rho: 0.0, a_max: 0.0, b_min: 4.0, b_max: 8.0 };
        assert_eq!(d_min_lon(0.0, 10.0, &p), 0.0);
        assert_eq!(d_min_lon(0.0, 0.0, &p), 0.0);
    }

    #[test]
    fn d_min_lat_spot_value() {
        let p = RssParams { rho: 1.0, a_max: 3.0, b_min: 4.0, b_max: 8.0 };
        assert_relative_eq!(d_min_lat(1.0, -0.5, &p), 1.546875);
        assert_eq!(d_min_lat(0.0, 0.0, &p), 0.0);
        // Fleeing neighbor: negative interior clamps to zero.
        assert_eq!(d_min_lat(0.0, 1.0, &p), 0.0);
    }

    #[test]
    fn risk_index_branches() {
        assert_eq!(risk_indices(10.0, 0.0, 20.0, 0.0).0, 0.5);
        assert_eq!(risk_indices(25.0, 0.0, 20.0, 0.0).0, 0.0);
        assert_eq!(risk_indices(0.0, 0.0, 20.0, 0.0).0, 1.0);
        // dmin = 0 forces the safe branch.
        assert_eq!(risk_indices(0.0, 0.0, 0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn unified_risk_examples() {
        let p = RiskParams::default();
        assert_relative_eq!(unified_risk(0.5, 0.4, &p), 0.2);
        assert_eq!(unified_risk(0.7, 0.0, &p), 0.0);
        assert_eq!(unified_risk(1.0, 1.0, &p), 1.0);
    }

    #[test]
    fn unified_risk_bounded_by_min() {
        use rand::{Rng, SeedableRng};
        let p = RiskParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let a: f64 = rng.gen_range(0.0..=1.0);
            let b: f64 = rng.gen_range(0.0..=1.0);
            let r = unified_risk(a, b, &p);
            assert!((0.0..=1.0).contains(&r));
            assert!(r <= a.min(b) + 1e-12);
        }
    }

    #[test]
    fn rp_examples() {
        let p = RpParams::default();
        assert_relative_eq!(rp(2.0, 4.0, &p).unwrap(), 1.5);
        assert_eq!(rp(f64::INFINITY, f64::INFINITY, &p).unwrap(), 0.0);
        assert_relative_eq!(rp(1.0, f64::INFINITY, &p).unwrap(), 1.0);
        assert!(rp(0.0, 1.0, &p).is_err());
        assert!(rp(1.0, -2.0, &p).is_err());
    }

    #[test]
    fn d_min_lon_monotone_probes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = RssParams {
                rho: rng.gen_range(0.1..3.0),
                a_max: rng.gen_range(0.0..5.0),
                b_min: rng.gen_range(1.0..6.0),
                b_max: rng.gen_range(6.0..12.0),
            };
            let v_r: f64 = rng.gen_range(0.0..40.0);
            let v_f: f64 = rng.gen_range(0.0..40.0);
            let base = d_min_lon(v_r, v_f, &p);
            let eps = 0.1;
            assert!(d_min_lon(v_r + eps, v_f, &p) >= base);
            assert!(d_min_lon(v_r, v_f + eps, &p) <= base);
            let mut p2 = p.clone();
            p2.rho += eps;
            assert!(d_min_lon(v_r, v_f, &p2) >= base);
            let mut p3 = p.clone();
            p3.a_max += eps;
            assert!(d_min_lon(v_r, v_f, &p3) >= base);
            let mut p4 = p.clone();
            p4.b_min += eps;
            assert!(d_min_lon(v_r, v_f, &p4) <= base);
        }
    }
}
