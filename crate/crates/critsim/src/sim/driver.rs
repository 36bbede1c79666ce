//! Longitudinal and lane-change behavior models for background traffic.
//!
//! Car following is the intelligent driver model; lane changes use the
//! MOBIL rule, trading the changer's own gain against the deceleration it
//! imposes on followers, weighted by a per-class politeness factor.

use crate::scenario::BehaviorParams;

/// Minimum bumper-to-bumper standstill gap, meters.
pub const MIN_GAP: f64 = 2.0;
/// Hardest deceleration any vehicle can produce, m/s².
pub const HARD_BRAKE: f64 = 9.0;
/// MOBIL safety criterion: imposed decelerations must stay above this.
pub const B_SAFE: f64 = 4.0;

/// IDM acceleration for a vehicle at speed `v` with desired speed `v0`,
/// optionally following a leader at `(bumper_gap, leader_speed)`.
pub fn idm_accel(v: f64, v0: f64, leader: Option<(f64, f64)>, p: &BehaviorParams) -> f64 {
    let free = 1.0 - (v / v0.max(0.1)).powi(4);
    let accel = match leader {
        None => p.max_acceleration * free,
        Some((gap, _)) if gap <= 0.1 => -HARD_BRAKE,
        Some((gap, v_leader)) => {
            let closing = v - v_leader;
            let dynamic = v * p.desired_time_headway
                + v * closing
                    / (2.0 * (p.max_acceleration * p.comfortable_deceleration).sqrt());
            let s_star = MIN_GAP + dynamic.max(0.0);
            p.max_acceleration * (free - (s_star / gap).powi(2))
        }
    };
    accel.clamp(-HARD_BRAKE, p.max_acceleration)
}

/// Inputs to one MOBIL evaluation, all accelerations in m/s².
pub struct MobilTerms {
    /// Changer's acceleration if it stays.
    pub self_old: f64,
    /// Changer's acceleration after the change.
    pub self_new: f64,
    /// New follower's acceleration before/after the change.
    pub new_follower_old: f64,
    pub new_follower_new: f64,
    /// Old follower's acceleration before/after the change.
    pub old_follower_old: f64,
    pub old_follower_new: f64,
}

/// MOBIL decision: safe iff nobody is forced below `-B_SAFE`; worthwhile
/// iff the politeness-weighted acceleration gain beats the threshold.
/// Returns the incentive when the change passes, `None` otherwise.
pub fn mobil_incentive(terms: &MobilTerms, p: &BehaviorParams) -> Option<f64> {
    if terms.self_new < -B_SAFE || terms.new_follower_new < -B_SAFE {
        return None;
    }
    let incentive = terms.self_new - terms.self_old
        + p.politeness
            * ((terms.new_follower_new - terms.new_follower_old)
                + (terms.old_follower_new - terms.old_follower_old));
    (incentive > p.lane_change_threshold).then_some(incentive)
}
