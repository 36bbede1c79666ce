//! K-prototypes clustering over mixed numeric/categorical driver features.
//!
//! Lloyd-style alternation: numeric distance is squared Euclidean on
//! z-scored features, categorical distance is a mismatch count weighted by
//! `gamma_mix`. Clusters map to behavior classes by mean speed — fastest
//! cluster is aggressive, slowest defensive, the middle one regular.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DriverFeatures;
use crate::scenario::{BehaviorClass, VehicleKind};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {k} feature rows, got {rows}")]
    TooFewRows { rows: usize, k: usize },
}

/// Cap applied to undefined (infinite) minimum time headways before
/// standardization.
const THW_CAP: f64 = 10.0;
const MAX_ITERATIONS: usize = 100;
/// Independent restarts; the lowest-cost fit wins.
const RESTARTS: usize = 4;

/// Numeric feature vector of one driver, in original units.
fn numeric_row(f: &DriverFeatures) -> [f64; 6] {
    [
        f.mean_speed,
        f.speed_std,
        f.mean_abs_accel,
        f.max_abs_accel,
        f.min_thw.min(THW_CAP),
        f.lane_change_count as f64,
    ]
}

fn categorical_row(f: &DriverFeatures) -> [usize; 1] {
    [match f.kind {
        VehicleKind::Car => 0,
        VehicleKind::Truck => 1,
    }]
}

const KIND_VALUES: [VehicleKind; 2] = [VehicleKind::Car, VehicleKind::Truck];

/// Fitted model: centroids in original units, per-row assignments, and the
/// cluster-to-behavior naming.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub gamma_mix: f64,
    /// Numeric centroids in original (un-standardized) units.
    pub numeric_centroids: Vec<Vec<f64>>,
    pub categorical_modes: Vec<Vec<VehicleKind>>,
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    /// Behavior name per cluster, by mean-speed ordering.
    pub cluster_behaviors: Vec<BehaviorClass>,
    /// Total cost after each completed iteration.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn label_of(&self, row: usize) -> BehaviorClass {
        self.cluster_behaviors[self.assignments[row]]
    }

    /// vehicle_id -> behavior, for a feature table with unique ids.
    pub fn labels_by_vehicle(&self, features: &[DriverFeatures]) -> std::collections::BTreeMap<u32, BehaviorClass> {
        features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.vehicle_id, self.label_of(i)))
            .collect()
    }
}

struct Standardizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[[f64; 6]]) -> Standardizer {
        let n = rows.len() as f64;
        let dim = 6;
        let mut means = vec![0.0; dim];
        for row in rows {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut stds = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in stds.iter_mut().zip(row).zip(&means) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in stds.iter_mut() {
            *s = s.sqrt();
        }
        Standardizer { means, stds }
    }

    fn apply(&self, row: &[f64; 6]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

fn sq_euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mismatches(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

struct Fit {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    modes: Vec<[usize; 1]>,
    cost_trace: Vec<f64>,
    iterations: usize,
}

fn mixed_distance(numeric: &[f64], cat: &[usize; 1], centroid: &[f64], mode: &[usize; 1], gamma: f64) -> f64 {
    sq_euclid(numeric, centroid) + gamma * mismatches(cat, mode) as f64
}

/// Distance-weighted initial centroid choice (k-means++ seeding over the
/// mixed distance).
fn seed_centroids(
    numeric: &[Vec<f64>],
    cats: &[[usize; 1]],
    k: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = numeric.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| mixed_distance(&numeric[i], &cats[i], &numeric[chosen[0]], &cats[chosen[0]], gamma))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with a chosen centroid; any index works.
            rng.gen_range(0..n)
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if draw < w {
                    pick = i;
                    break;
                }
                draw -= w;
            }
            pick
        };
        chosen.push(next);
        for i in 0..n {
            let d = mixed_distance(&numeric[i], &cats[i], &numeric[next], &cats[next], gamma);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen
}

fn fit_once(
    numeric: &[Vec<f64>],
    cats: &[[usize; 1]],
    k: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Fit {
    let n = numeric.len();
    let init = seed_centroids(numeric, cats, k, gamma, rng);
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| numeric[i].clone()).collect();
    let mut modes: Vec<[usize; 1]> = init.iter().map(|&i| cats[i]).collect();

    let mut assignments = vec![0usize; n];
    let mut cost_trace = Vec::new();
    let mut iterations = 0;
    let mut reseeded_last_iteration = false;

    for _iter in 0..MAX_ITERATIONS {
        iterations += 1;
        // Assignment step.
        let mut cost = 0.0;
        let mut changed = false;
        for i in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d = mixed_distance(&numeric[i], &cats[i], &centroids[c], &modes[c], gamma);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assignments[i] != best.0 {
                changed = true;
                assignments[i] = best.0;
            }
            cost += best.1;
        }
        if let Some(&previous) = cost_trace.last() {
            // Reseeding an empty cluster may legitimately raise the cost
            // once; every ordinary iteration must be non-increasing.
            assert!(
                reseeded_last_iteration || cost <= previous + 1e-9,
                "k-prototypes cost rose from {previous} to {cost}"
            );
        }
        cost_trace.push(cost);
        reseeded_last_iteration = false;

        // Update step.
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; numeric[0].len()]; k];
        let mut cat_counts = vec![[[0usize; 2]; 1]; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&numeric[i]) {
                *s += v;
            }
            for (slot, val) in cat_counts[c].iter_mut().zip(&cats[i]) {
                slot[*val] += 1;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed from the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_euclid(&numeric[a], &centroids[assignments[a]])
                            .total_cmp(&sq_euclid(&numeric[b], &centroids[assignments[b]]))
                    })
                    .unwrap();
                centroids[c] = numeric[far].clone();
                modes[c] = cats[far];
                reseeded_last_iteration = true;
                continue;
            }
            for (j, s) in sums[c].iter().enumerate() {
                centroids[c][j] = s / counts[c] as f64;
            }
            for (j, slot) in cat_counts[c].iter().enumerate() {
                // Mode; ties resolve to the smaller code.
                modes[c][j] = if slot[1] > slot[0] { 1 } else { 0 };
            }
        }

        if !changed && !reseeded_last_iteration {
            break;
        }
    }
    Fit { assignments, centroids, modes, cost_trace, iterations }
}

/// Fits k prototypes to `features`. `gamma_mix` defaults to half the mean
/// per-feature variance of the standardized numerics. Runs a handful of
/// seeded restarts and keeps the lowest-cost fit; deterministic for a
/// fixed seed.
pub fn fit_kprototypes(
    features: &[DriverFeatures],
    k: usize,
    gamma_mix: Option<f64>,
    rng_seed: u64,
) -> Result<ClusterModel, ClusterError> {
    if features.len() < k {
        return Err(ClusterError::TooFewRows { rows: features.len(), k });
    }
    let raw: Vec<[f64; 6]> = features.iter().map(numeric_row).collect();
    let cats: Vec<[usize; 1]> = features.iter().map(categorical_row).collect();
    let standardizer = Standardizer::fit(&raw);
    let numeric: Vec<Vec<f64>> = raw.iter().map(|r| standardizer.apply(r)).collect();

    let gamma = gamma_mix.unwrap_or_else(|| {
        let live = standardizer.stds.iter().filter(|s| **s > 0.0).count() as f64;
        0.5 * live / standardizer.stds.len() as f64
    });

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best: Option<Fit> = None;
    for _ in 0..RESTARTS {
        let fit = fit_once(&numeric, &cats, k, gamma, &mut rng);
        let cost = *fit.cost_trace.last().unwrap_or(&f64::INFINITY);
        if best
            .as_ref()
            .map_or(true, |b| cost < *b.cost_trace.last().unwrap_or(&f64::INFINITY))
        {
            best = Some(fit);
        }
    }
    let Fit { assignments, centroids, modes, cost_trace, iterations } = best.unwrap();

    // Name clusters by centroid mean speed: fastest aggressive, slowest
    // defensive. Empty clusters keep their position in the ordering.
    let original_centroids: Vec<Vec<f64>> =
        centroids.iter().map(|c| standardizer.invert(c)).collect();
    let mut speed_order: Vec<usize> = (0..k).collect();
    speed_order.sort_by(|&a, &b| original_centroids[b][0].total_cmp(&original_centroids[a][0]));
    let mut cluster_behaviors = vec![BehaviorClass::Regular; k];
    if k == 3 {
        cluster_behaviors[speed_order[0]] = BehaviorClass::Aggressive;
        cluster_behaviors[speed_order[1]] = BehaviorClass::Regular;
        cluster_behaviors[speed_order[2]] = BehaviorClass::Defensive;
    } else {
        // Non-standard k: fastest aggressive, slowest defensive, rest regular.
        if let Some(&fast) = speed_order.first() {
            cluster_behaviors[fast] = BehaviorClass::Aggressive;
        }
        if let Some(&slow) = speed_order.last() {
            cluster_behaviors[slow] = BehaviorClass::Defensive;
        }
    }

    Ok(ClusterModel {
        k,
        gamma_mix: gamma,
        numeric_centroids: original_centroids,
        categorical_modes: modes
            .iter()
            .map(|m| m.iter().map(|&v| KIND_VALUES[v]).collect())
            .collect(),
        assignments,
        cluster_behaviors,
        cost_trace,
        iterations,
    })
}

/// Adjusted Rand index between two labelings of the same rows.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) / 2;
    let sum_ij: u64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: u64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: u64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(n as u64) as f64;
    let expected = sum_a as f64 * sum_b as f64 / total;
    let max_index = (sum_a + sum_b) as f64 / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij as f64 - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::highd::synthetic;

    #[test]
    fn identical_rows_share_one_label() {
        let row = DriverFeatures {
            vehicle_id: 0,
            mean_speed: 25.0,
            speed_std: 1.0,
            mean_abs_accel: 0.5,
            max_abs_accel: 1.5,
            min_thw: 2.0,
            lane_change_count: 1,
            kind: VehicleKind::Car,
        };
        let features: Vec<DriverFeatures> = (0..10)
            .map(|i| DriverFeatures { vehicle_id: i, ..row.clone() })
            .collect();
        let model = fit_kprototypes(&features, 3, None, 1).unwrap();
        let labels: std::collections::BTreeSet<_> =
            (0..10).map(|i| model.label_of(i)).collect();
        assert_eq!(labels.len(), 1);
        assert!(model.cost_trace.last().unwrap() < &1e-9);
    }

    #[test]
    fn recovers_separated_blobs() {
        for seed in 0..10 {
            let (features, truth) = synthetic::generate_feature_blobs(seed, 40, 10.0);
            let model = fit_kprototypes(&features, 3, None, seed).unwrap();
            let ari = adjusted_rand_index(&model.assignments, &truth);
            assert!(ari >= 0.9, "seed {seed}: ARI {ari}");
            for w in model.cost_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "cost rose: {:?}", model.cost_trace);
            }
        }
    }

    #[test]
    fn blob_labels_follow_speed_ordering() {
        let (features, _) = synthetic::generate_feature_blobs(3, 40, 10.0);
        let model = fit_kprototypes(&features, 3, None, 3).unwrap();
        // The fastest drivers should be named aggressive.
        let fastest = features
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.mean_speed.total_cmp(&b.1.mean_speed))
            .unwrap()
            .0;
        assert_eq!(model.label_of(fastest), BehaviorClass::Aggressive);
        let slowest = features
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.mean_speed.total_cmp(&b.1.mean_speed))
            .unwrap()
            .0;
        assert_eq!(model.label_of(slowest), BehaviorClass::Defensive);
    }

    #[test]
    fn gamma_zero_matches_plain_kmeans() {
        // With no categorical weight the fit must reduce to k-means on the
        // standardized numerics. The comparison run shares the seeding
        // sequence but uses an independently written Lloyd loop with no
        // categorical machinery at all.
        let (features, _) = synthetic::generate_feature_blobs(5, 30, 10.0);
        let model = fit_kprototypes(&features, 3, Some(0.0), 9).unwrap();

        let raw: Vec<[f64; 6]> = features.iter().map(numeric_row).collect();
        let cats: Vec<[usize; 1]> = features.iter().map(categorical_row).collect();
        let standardizer = Standardizer::fit(&raw);
        let numeric: Vec<Vec<f64>> = raw.iter().map(|r| standardizer.apply(r)).collect();
        let n = features.len();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _restart in 0..RESTARTS {
            let init = seed_centroids(&numeric, &cats, 3, 0.0, &mut rng);
            let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| numeric[i].clone()).collect();
            let mut assignments = vec![0usize; n];
            let mut cost = f64::INFINITY;
            for _ in 0..MAX_ITERATIONS {
                let mut changed = false;
                cost = 0.0;
                for i in 0..n {
                    let c = (0..3)
                        .min_by(|&a, &b| {
                            sq_euclid(&numeric[i], &centroids[a])
                                .total_cmp(&sq_euclid(&numeric[i], &centroids[b]))
                        })
                        .unwrap();
                    cost += sq_euclid(&numeric[i], &centroids[c]);
                    if assignments[i] != c {
                        assignments[i] = c;
                        changed = true;
                    }
                }
                for c in 0..3 {
                    let members: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
                    if members.is_empty() {
                        continue;
                    }
                    for j in 0..6 {
                        centroids[c][j] = members.iter().map(|&i| numeric[i][j]).sum::<f64>()
                            / members.len() as f64;
                    }
                }
                if !changed {
                    break;
                }
            }
            if best.as_ref().map_or(true, |(bc, _)| cost < *bc) {
                best = Some((cost, assignments));
            }
        }
        assert_eq!(model.assignments, best.unwrap().1);
    }

    #[test]
    fn too_few_rows_errors() {
        let (features, _) = synthetic::generate_feature_blobs(1, 1, 10.0);
        assert!(matches!(
            fit_kprototypes(&features[..2], 3, None, 0),
            Err(ClusterError::TooFewRows { rows: 2, k: 3 })
        ));
    }

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(ari <= 0.0 + 1e-12);
    }
}
