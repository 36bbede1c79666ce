//! Trajectory-recording ingestion.
//!
//! Parses drone-recorded highway trajectories in the highD CSV layout
//! (a `*_tracks.csv` / `*_tracksMeta.csv` / `*_recordingMeta.csv` triple
//! per recording), extracts per-driver style features, clusters drivers
//! into aggressive/defensive/regular, mines the riskiest vehicle pairs by
//! risk perception, and emits one scenario configuration per recording.

pub mod cluster;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{self, RpParams};
use crate::scenario::{
    self, BehaviorClass, ScenarioConfig, ValidRanges, VehicleKind, VehicleSeed,
};
pub use cluster::{adjusted_rand_index, fit_kprototypes, ClusterError, ClusterModel};

#[derive(Debug, Error)]
pub enum HighdError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing required column {column}")]
    MissingColumn { path: String, column: &'static str },
    #[error("{path} row {row}: column {column}: {message}")]
    BadCell { path: String, row: usize, column: &'static str, message: String },
    #[error("{path}: vehicle {vehicle_id} has no tracksMeta entry")]
    MissingMeta { path: String, vehicle_id: u32 },
    #[error("recording path {0} does not end in _tracks.csv")]
    BadRecordingPath(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
}

/// One row of a tracks file, original units (meters, m/s, m/s², seconds).
/// Non-positive `thw`/`ttc` are the dataset's "no leader / not closing"
/// sentinels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub frame: u32,
    pub vehicle_id: u32,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub x_velocity: f64,
    pub y_velocity: f64,
    pub x_acceleration: f64,
    pub y_acceleration: f64,
    pub dhw: f64,
    pub thw: f64,
    pub ttc: f64,
    pub preceding_id: u32,
    pub lane_id: u32,
}

/// All rows of one vehicle, frame-sorted, joined with its meta entry.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrack {
    pub vehicle_id: u32,
    pub kind: VehicleKind,
    pub meta_lane_changes: u32,
    pub rows: Vec<TrackRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingMeta {
    pub id: String,
    pub frame_rate: f64,
    pub num_vehicles: u32,
}

/// Driving-style statistics of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverFeatures {
    pub vehicle_id: u32,
    pub mean_speed: f64,
    pub speed_std: f64,
    pub mean_abs_accel: f64,
    pub max_abs_accel: f64,
    /// Infinite when the vehicle never had a leader.
    pub min_thw: f64,
    pub lane_change_count: u32,
    pub kind: VehicleKind,
}

struct ColumnMap {
    indices: Vec<usize>,
}

const TRACK_COLUMNS: [&str; 15] = [
    "frame",
    "id",
    "x",
    "y",
    "width",
    "height",
    "xVelocity",
    "yVelocity",
    "xAcceleration",
    "yAcceleration",
    "dhw",
    "thw",
    "ttc",
    "precedingId",
    "laneId",
];

fn map_columns(
    headers: &csv::StringRecord,
    required: &[&'static str],
    path: &Path,
) -> Result<ColumnMap, HighdError> {
    let mut indices = Vec::with_capacity(required.len());
    for name in required {
        let idx = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| HighdError::MissingColumn {
                path: path.display().to_string(),
                column: name,
            })?;
        indices.push(idx);
    }
    Ok(ColumnMap { indices })
}

fn cell<'a>(
    record: &'a csv::StringRecord,
    map: &ColumnMap,
    col: usize,
) -> &'a str {
    record.get(map.indices[col]).unwrap_or("").trim()
}

fn parse_f64(
    record: &csv::StringRecord,
    map: &ColumnMap,
    col: usize,
    name: &'static str,
    path: &Path,
    row: usize,
) -> Result<f64, HighdError> {
    cell(record, map, col).parse().map_err(|_| HighdError::BadCell {
        path: path.display().to_string(),
        row,
        column: name,
        message: format!("not a number: {:?}", cell(record, map, col)),
    })
}

fn parse_u32(
    record: &csv::StringRecord,
    map: &ColumnMap,
    col: usize,
    name: &'static str,
    path: &Path,
    row: usize,
) -> Result<u32, HighdError> {
    let raw = cell(record, map, col);
    // Meta files sometimes carry integer-valued floats.
    raw.parse::<u32>()
        .or_else(|_| raw.parse::<f64>().map(|f| f as u32).map_err(|_| ()))
        .map_err(|_| HighdError::BadCell {
            path: path.display().to_string(),
            row,
            column: name,
            message: format!("not an integer: {raw:?}"),
        })
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, HighdError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| HighdError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })
}

/// Parses a tracks file and its tracksMeta companion into per-vehicle,
/// frame-sorted sequences. Unknown extra columns are ignored.
pub fn parse_tracks(tracks_path: &Path, meta_path: &Path) -> Result<Vec<VehicleTrack>, HighdError> {
    // Vehicle kinds from the meta file.
    let mut meta_reader = open_csv(meta_path)?;
    let meta_headers = meta_reader
        .headers()
        .map_err(|e| HighdError::Io { path: meta_path.display().to_string(), source: std::io::Error::other(e.to_string()) })?
        .clone();
    let meta_map = map_columns(&meta_headers, &["id", "class", "numLaneChanges"], meta_path)?;
    let mut kinds: BTreeMap<u32, (VehicleKind, u32)> = BTreeMap::new();
    for (i, record) in meta_reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record.map_err(|e| HighdError::Io {
            path: meta_path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let id = parse_u32(&record, &meta_map, 0, "id", meta_path, row)?;
        let class = cell(&record, &meta_map, 1);
        let kind = match class.to_ascii_lowercase().as_str() {
            "car" => VehicleKind::Car,
            "truck" => VehicleKind::Truck,
            other => {
                return Err(HighdError::BadCell {
                    path: meta_path.display().to_string(),
                    row,
                    column: "class",
                    message: format!("unknown vehicle class {other:?}"),
                })
            }
        };
        let lane_changes = parse_u32(&record, &meta_map, 2, "numLaneChanges", meta_path, row)?;
        kinds.insert(id, (kind, lane_changes));
    }

    let mut reader = open_csv(tracks_path)?;
    let headers = reader
        .headers()
        .map_err(|e| HighdError::Io { path: tracks_path.display().to_string(), source: std::io::Error::other(e.to_string()) })?
        .clone();
    let map = map_columns(&headers, &TRACK_COLUMNS, tracks_path)?;

    let mut grouped: BTreeMap<u32, Vec<TrackRow>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 2;
        let record = record.map_err(|e| HighdError::Io {
            path: tracks_path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let f = |col: usize, name: &'static str| parse_f64(&record, &map, col, name, tracks_path, row_no);
        let u = |col: usize, name: &'static str| parse_u32(&record, &map, col, name, tracks_path, row_no);
        let track_row = TrackRow {
            frame: u(0, "frame")?,
            vehicle_id: u(1, "id")?,
            x: f(2, "x")?,
            y: f(3, "y")?,
            width: f(4, "width")?,
            height: f(5, "height")?,
            x_velocity: f(6, "xVelocity")?,
            y_velocity: f(7, "yVelocity")?,
            x_acceleration: f(8, "xAcceleration")?,
            y_acceleration: f(9, "yAcceleration")?,
            dhw: f(10, "dhw")?,
            thw: f(11, "thw")?,
            ttc: f(12, "ttc")?,
            preceding_id: u(13, "precedingId")?,
            lane_id: u(14, "laneId")?,
        };
        if track_row.frame < 1 {
            return Err(HighdError::BadCell {
                path: tracks_path.display().to_string(),
                row: row_no,
                column: "frame",
                message: "frames are 1-based".into(),
            });
        }
        if track_row.width <= 0.0 {
            return Err(HighdError::BadCell {
                path: tracks_path.display().to_string(),
                row: row_no,
                column: "width",
                message: "vehicle width must be positive".into(),
            });
        }
        grouped.entry(track_row.vehicle_id).or_default().push(track_row);
    }

    let mut tracks = Vec::with_capacity(grouped.len());
    for (vehicle_id, mut rows) in grouped {
        rows.sort_by_key(|r| r.frame);
        let (kind, meta_lane_changes) =
            kinds.get(&vehicle_id).copied().ok_or(HighdError::MissingMeta {
                path: meta_path.display().to_string(),
                vehicle_id,
            })?;
        tracks.push(VehicleTrack { vehicle_id, kind, meta_lane_changes, rows });
    }
    Ok(tracks)
}

pub fn parse_recording_meta(path: &Path) -> Result<RecordingMeta, HighdError> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| HighdError::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) })?
        .clone();
    let map = map_columns(&headers, &["id", "frameRate", "numVehicles"], path)?;
    let record = reader
        .records()
        .next()
        .ok_or_else(|| HighdError::BadCell {
            path: path.display().to_string(),
            row: 2,
            column: "id",
            message: "recording meta has no data row".into(),
        })?
        .map_err(|e| HighdError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    Ok(RecordingMeta {
        id: cell(&record, &map, 0).to_string(),
        frame_rate: parse_f64(&record, &map, 1, "frameRate", path, 2)?,
        num_vehicles: parse_u32(&record, &map, 2, "numVehicles", path, 2)?,
    })
}

/// Per-vehicle style statistics. Vehicles with fewer than two rows are
/// skipped; the second return is the skip count.
pub fn extract_features(tracks: &[VehicleTrack]) -> (Vec<DriverFeatures>, usize) {
    let mut features = Vec::with_capacity(tracks.len());
    let mut skipped = 0;
    for track in tracks {
        if track.rows.len() < 2 {
            skipped += 1;
            continue;
        }
        let n = track.rows.len() as f64;
        let speeds: Vec<f64> =
            track.rows.iter().map(|r| r.x_velocity.hypot(r.y_velocity)).collect();
        let mean_speed = speeds.iter().sum::<f64>() / n;
        let speed_var = speeds.iter().map(|s| (s - mean_speed).powi(2)).sum::<f64>() / n;
        let accels: Vec<f64> =
            track.rows.iter().map(|r| r.x_acceleration.hypot(r.y_acceleration)).collect();
        let mean_abs_accel = accels.iter().sum::<f64>() / n;
        let max_abs_accel = accels.iter().copied().fold(0.0, f64::max);
        // Non-positive thw is the "no leader" sentinel.
        let min_thw = track
            .rows
            .iter()
            .filter(|r| r.thw > 0.0)
            .map(|r| r.thw)
            .fold(f64::INFINITY, f64::min);
        let lane_change_count = track
            .rows
            .windows(2)
            .filter(|w| w[0].lane_id != w[1].lane_id)
            .count() as u32;
        features.push(DriverFeatures {
            vehicle_id: track.vehicle_id,
            mean_speed,
            speed_std: speed_var.sqrt(),
            mean_abs_accel,
            max_abs_accel,
            min_thw,
            lane_change_count,
            kind: track.kind,
        });
    }
    (features, skipped)
}

/// Peak risk-perception instance of one follower/leader pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPairHit {
    pub follower_id: u32,
    pub leader_id: u32,
    pub frame: u32,
    pub rp: f64,
    pub follower_row: TrackRow,
    pub leader_row: TrackRow,
}

fn row_at(track: &VehicleTrack, frame: u32) -> Option<&TrackRow> {
    track
        .rows
        .binary_search_by_key(&frame, |r| r.frame)
        .ok()
        .map(|i| &track.rows[i])
}

/// Scores every (follower, leader) pair present via `precedingId` at each
/// frame with `RP = a/THW + b/TTC`, and returns the top `top_n` pairs by
/// their peak instance, rp-descending with id-pair tie-breaks.
pub fn extract_critical_pairs(
    tracks: &[VehicleTrack],
    rp_params: &RpParams,
    top_n: usize,
) -> Vec<CriticalPairHit> {
    let by_id: BTreeMap<u32, &VehicleTrack> =
        tracks.iter().map(|t| (t.vehicle_id, t)).collect();
    let mut best: BTreeMap<(u32, u32), CriticalPairHit> = BTreeMap::new();
    for track in tracks {
        for row in &track.rows {
            if row.preceding_id == 0 {
                continue;
            }
            let Some(leader_track) = by_id.get(&row.preceding_id) else { continue };
            let Some(leader_row) = row_at(leader_track, row.frame) else { continue };
            let thw = if row.thw > 0.0 { row.thw } else { f64::INFINITY };
            let ttc = if row.ttc > 0.0 { row.ttc } else { f64::INFINITY };
            let rp = risk::rp(thw, ttc, rp_params).expect("sentinels mapped to infinity");
            let key = (track.vehicle_id, row.preceding_id);
            let better = best.get(&key).map_or(true, |hit| rp > hit.rp);
            if better {
                best.insert(
                    key,
                    CriticalPairHit {
                        follower_id: track.vehicle_id,
                        leader_id: row.preceding_id,
                        frame: row.frame,
                        rp,
                        follower_row: row.clone(),
                        leader_row: leader_row.clone(),
                    },
                );
            }
        }
    }
    let mut hits: Vec<CriticalPairHit> = best.into_values().collect();
    hits.sort_by(|a, b| {
        b.rp.total_cmp(&a.rp)
            .then(a.follower_id.cmp(&b.follower_id))
            .then(a.leader_id.cmp(&b.leader_id))
    });
    hits.truncate(top_n);
    hits
}

/// One parsed recording, ready for config mapping.
pub struct Recording {
    pub stem: String,
    pub tracks: Vec<VehicleTrack>,
    pub meta: RecordingMeta,
}

/// Derives the meta-file paths from a `*_tracks.csv` path.
pub fn companion_paths(tracks_path: &Path) -> Result<(PathBuf, PathBuf), HighdError> {
    let name = tracks_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name
        .strip_suffix("_tracks.csv")
        .ok_or_else(|| HighdError::BadRecordingPath(tracks_path.display().to_string()))?;
    let dir = tracks_path.parent().unwrap_or_else(|| Path::new("."));
    Ok((
        dir.join(format!("{stem}_tracksMeta.csv")),
        dir.join(format!("{stem}_recordingMeta.csv")),
    ))
}

pub fn parse_recording(tracks_path: &Path) -> Result<Recording, HighdError> {
    let (meta_path, rec_meta_path) = companion_paths(tracks_path)?;
    let tracks = parse_tracks(tracks_path, &meta_path)?;
    let meta = parse_recording_meta(&rec_meta_path)?;
    let name = tracks_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix("_tracks.csv").unwrap_or(name).to_string();
    Ok(Recording { stem, tracks, meta })
}

/// Ingestion knobs; the defaults match the shipped pipeline.
#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub ranges: ValidRanges,
    pub rp: RpParams,
    /// Background vehicles per emitted config are scaled down to this total.
    pub max_total_vehicles: u32,
    pub cluster_seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            ranges: ValidRanges::default(),
            rp: RpParams::default(),
            max_total_vehicles: 40,
            cluster_seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileStatus {
    pub path: String,
    pub outcome: Result<String, String>,
}

#[derive(Debug, Serialize)]
pub struct IngestSummary {
    pub configs_written: usize,
    pub files: Vec<FileStatus>,
}

impl IngestSummary {
    pub fn failures(&self) -> usize {
        self.files.iter().filter(|f| f.outcome.is_err()).count()
    }
}

/// Largest-remainder proportional scaling of `counts` to `target`, each
/// entry capped at `cap`.
fn scale_counts(counts: &[u32; 3], target: u32, cap: u32) -> [u32; 3] {
    let total: u32 = counts.iter().sum();
    if total == 0 || target == 0 {
        return [0, 0, 0];
    }
    let mut scaled = [0u32; 3];
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0;
    for i in 0..3 {
        let exact = counts[i] as f64 * target as f64 / total as f64;
        scaled[i] = exact.floor() as u32;
        assigned += scaled[i];
        fractions.push((i, exact - exact.floor()));
    }
    fractions.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut remainder = target - assigned;
    for (i, _) in fractions {
        if remainder == 0 {
            break;
        }
        scaled[i] += 1;
        remainder -= 1;
    }
    // Respect the per-class cap by shifting overflow to the smallest class.
    loop {
        let Some(over) = (0..3).find(|&i| scaled[i] > cap) else { break };
        let under = (0..3).min_by_key(|&i| scaled[i]).unwrap();
        if under == over {
            break;
        }
        scaled[over] -= 1;
        scaled[under] += 1;
    }
    scaled
}

fn map_pair_to_seeds(
    hit: &CriticalPairHit,
    lane_rank: &BTreeMap<u32, u32>,
    lane_count: u32,
    labels: &BTreeMap<u32, BehaviorClass>,
    kinds: &BTreeMap<u32, VehicleKind>,
    span: (f64, f64),
    ranges: &ValidRanges,
) -> (VehicleSeed, VehicleSeed) {
    // Normalize driving direction so motion is toward +x.
    let mirrored = hit.follower_row.x_velocity < 0.0;
    let map_row = |row: &TrackRow| -> (f64, f64, f64) {
        if mirrored {
            (span.1 - row.x, row.x_velocity.abs(), -row.x_acceleration)
        } else {
            (row.x - span.0, row.x_velocity.abs(), row.x_acceleration)
        }
    };
    let lane = lane_rank
        .get(&hit.follower_row.lane_id)
        .copied()
        .unwrap_or(0)
        .min(lane_count - 1);
    let seed_of = |row: &TrackRow, id: u32| {
        let (x, speed, accel) = map_row(row);
        VehicleSeed {
            x: x.clamp(ranges.x.0, ranges.x.1),
            lane,
            speed: speed.clamp(ranges.speed.0, ranges.speed.1),
            acceleration: accel.clamp(ranges.acceleration.0, ranges.acceleration.1),
            behavior: labels.get(&id).copied().unwrap_or(BehaviorClass::Regular),
            kind: kinds.get(&id).copied().unwrap_or(VehicleKind::Car),
        }
    };
    let mut follower = seed_of(&hit.follower_row, hit.follower_id);
    let mut leader = seed_of(&hit.leader_row, hit.leader_id);
    // The leader sits ahead of the follower on the simulator axis.
    if leader.x < follower.x + 8.0 {
        follower.x = follower.x.min(ranges.x.1 - 8.0);
        leader.x = follower.x + 8.0;
    }
    (follower, leader)
}

fn config_from_recording(
    recording: &Recording,
    labels: &BTreeMap<u32, BehaviorClass>,
    opts: &IngestOptions,
    index: usize,
) -> Result<ScenarioConfig, HighdError> {
    let tracks = &recording.tracks;
    let mut behavior_counts = [0u32; 3];
    let mut kind_counts = [0u32; 2]; // trucks, cars
    let kinds: BTreeMap<u32, VehicleKind> =
        tracks.iter().map(|t| (t.vehicle_id, t.kind)).collect();
    for track in tracks {
        let class = labels.get(&track.vehicle_id).copied().unwrap_or(BehaviorClass::Regular);
        match class {
            BehaviorClass::Aggressive => behavior_counts[0] += 1,
            BehaviorClass::Defensive => behavior_counts[1] += 1,
            BehaviorClass::Regular => behavior_counts[2] += 1,
        }
        match track.kind {
            VehicleKind::Truck => kind_counts[0] += 1,
            VehicleKind::Car => kind_counts[1] += 1,
        }
    }
    let raw_total: u32 = behavior_counts.iter().sum();
    let target = raw_total.min(opts.max_total_vehicles);
    let cap = opts.ranges.num_aggressive.1;
    let [num_aggressive, num_defensive, num_regular] =
        scale_counts(&behavior_counts, target, cap);
    let total = num_aggressive + num_defensive + num_regular;

    // Behavior counts are authoritative; the truck/car split scales
    // proportionally and rounds to preserve the total.
    let truck_frac = if raw_total > 0 {
        kind_counts[0] as f64 / raw_total as f64
    } else {
        0.0
    };
    let trucks_lo = opts.ranges.num_trucks.0.max(total.saturating_sub(opts.ranges.num_cars.1));
    let trucks_hi = opts.ranges.num_trucks.1.min(total.saturating_sub(opts.ranges.num_cars.0));
    let num_trucks = ((truck_frac * total as f64).round() as u32).clamp(trucks_lo, trucks_hi);
    let num_cars = total - num_trucks;

    // Lane geometry: distinct lane ids, ranked.
    let mut lane_ids: Vec<u32> = tracks
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| r.lane_id))
        .collect();
    lane_ids.sort_unstable();
    lane_ids.dedup();
    let lane_count = (lane_ids.len() as u32).clamp(opts.ranges.lane_count.0, opts.ranges.lane_count.1);
    let lane_rank: BTreeMap<u32, u32> =
        lane_ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();

    // Density: vehicles per km per lane, averaged over frames.
    let mut span = (f64::INFINITY, f64::NEG_INFINITY);
    let mut frame_counts: BTreeMap<u32, u32> = BTreeMap::new();
    for track in tracks {
        for row in &track.rows {
            span.0 = span.0.min(row.x);
            span.1 = span.1.max(row.x);
            *frame_counts.entry(row.frame).or_default() += 1;
        }
    }
    let span_m = (span.1 - span.0).max(100.0);
    let mean_vehicles = if frame_counts.is_empty() {
        0.0
    } else {
        frame_counts.values().map(|&c| c as f64).sum::<f64>() / frame_counts.len() as f64
    };
    let density = (mean_vehicles / (span_m / 1000.0) / lane_count as f64)
        .clamp(1.0, opts.ranges.density.1);

    let pair = if total >= 2 {
        extract_critical_pairs(tracks, &opts.rp, 1).first().map(|hit| {
            map_pair_to_seeds(hit, &lane_rank, lane_count, labels, &kinds, span, &opts.ranges)
        })
    } else {
        None
    };

    let config = ScenarioConfig {
        id: format!("rec-{}", recording.stem),
        num_aggressive,
        num_defensive,
        num_regular,
        num_trucks,
        num_cars,
        density,
        vehicle_i: pair.as_ref().map(|(f, _)| f.clone()),
        vehicle_j: pair.as_ref().map(|(_, l)| l.clone()),
        lane_count,
        seed: 0x9E37_79B9u64.wrapping_mul(index as u64 + 1),
    };
    config.validate(&opts.ranges)?;
    Ok(config)
}

/// Parses every recording, clusters driving styles over the combined
/// feature table, and writes one validated configuration per parseable
/// recording to `out_path`. Per-file failures are reported in the summary
/// and do not abort the rest.
pub fn build_database(
    recording_paths: &[PathBuf],
    out_path: &Path,
    opts: &IngestOptions,
) -> Result<IngestSummary, HighdError> {
    let mut files = Vec::with_capacity(recording_paths.len());
    let mut recordings = Vec::new();
    for path in recording_paths {
        match parse_recording(path) {
            Ok(rec) => {
                files.push((path, Ok(rec.stem.clone())));
                recordings.push(rec);
            }
            Err(e) => files.push((path, Err(e.to_string()))),
        }
    }

    // One clustering over all recordings; labels keyed per recording.
    let mut combined: Vec<DriverFeatures> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    for (ri, rec) in recordings.iter().enumerate() {
        let (features, _skipped) = extract_features(&rec.tracks);
        owners.extend(std::iter::repeat(ri).take(features.len()));
        combined.extend(features);
    }
    let assignments: Vec<BehaviorClass> = if combined.len() >= 3 {
        let model = fit_kprototypes(&combined, 3, None, opts.cluster_seed)?;
        (0..combined.len()).map(|i| model.label_of(i)).collect()
    } else {
        vec![BehaviorClass::Regular; combined.len()]
    };
    let mut labels_per_recording: Vec<BTreeMap<u32, BehaviorClass>> =
        vec![BTreeMap::new(); recordings.len()];
    for (i, &owner) in owners.iter().enumerate() {
        labels_per_recording[owner].insert(combined[i].vehicle_id, assignments[i]);
    }

    let mut configs = Vec::with_capacity(recordings.len());
    let mut statuses: Vec<FileStatus> = Vec::with_capacity(files.len());
    let mut rec_idx = 0;
    for (path, outcome) in files {
        match outcome {
            Ok(_) => {
                let rec = &recordings[rec_idx];
                let labels = &labels_per_recording[rec_idx];
                rec_idx += 1;
                match config_from_recording(rec, labels, opts, rec_idx) {
                    Ok(config) => {
                        statuses.push(FileStatus {
                            path: path.display().to_string(),
                            outcome: Ok(config.id.clone()),
                        });
                        configs.push(config);
                    }
                    Err(e) => statuses.push(FileStatus {
                        path: path.display().to_string(),
                        outcome: Err(e.to_string()),
                    }),
                }
            }
            Err(e) => statuses.push(FileStatus { path: path.display().to_string(), outcome: Err(e) }),
        }
    }

    scenario::save_database(&configs, out_path)?;
    Ok(IngestSummary { configs_written: configs.len(), files: statuses })
}
