//! Synthetic trajectory recordings with the same statistical shape as real
//! highway drone data: three driving-style populations separated in speed,
//! acceleration, and following distance, with matched car/truck marginals.
//! Lets the whole ingestion pipeline run without any licensed dataset.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DriverFeatures;
use crate::scenario::VehicleKind;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Three feature blobs with class mean speeds `speed_sep` apart and the
/// same car/truck marginal in every class. Returns features plus the true
/// class of each row (0 fast, 1 middle, 2 slow).
pub fn generate_feature_blobs(
    seed: u64,
    per_class: usize,
    speed_sep: f64,
) -> (Vec<DriverFeatures>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(3 * per_class);
    let mut truth = Vec::with_capacity(3 * per_class);
    let base_speed = 15.0 + speed_sep; // middle class mean
    let mut id = 0;
    for class in 0..3usize {
        let mean_speed = base_speed + speed_sep * (1 - class as i64) as f64;
        // Faster classes accelerate harder, follow closer, change lanes more.
        let accel_mean = 1.6 - 0.5 * class as f64;
        let thw_mean = 1.0 + 0.8 * class as f64;
        for _ in 0..per_class {
            let kind = if rng.gen_bool(0.25) { VehicleKind::Truck } else { VehicleKind::Car };
            features.push(DriverFeatures {
                vehicle_id: id,
                mean_speed: mean_speed + 1.5 * gaussian(&mut rng),
                speed_std: (0.8 + 0.3 * gaussian(&mut rng)).abs(),
                mean_abs_accel: (accel_mean + 0.15 * gaussian(&mut rng)).abs(),
                max_abs_accel: (accel_mean * 2.2 + 0.3 * gaussian(&mut rng)).abs(),
                min_thw: (thw_mean + 0.2 * gaussian(&mut rng)).max(0.3),
                lane_change_count: rng.gen_range(0..=(3 - class as u32)),
                kind,
            });
            truth.push(class);
            id += 1;
        }
    }
    (features, truth)
}

/// Per-class trajectory statistics used by the recording generator.
struct ClassProfile {
    speed_mean: f64,
    thw: f64,
    accel_amp: f64,
    lane_changes: u32,
}

const PROFILES: [ClassProfile; 3] = [
    // fast / close-following / busy
    ClassProfile { speed_mean: 33.0, thw: 0.9, accel_amp: 1.2, lane_changes: 2 },
    ClassProfile { speed_mean: 26.0, thw: 1.6, accel_amp: 0.7, lane_changes: 1 },
    ClassProfile { speed_mean: 19.0, thw: 2.6, accel_amp: 0.35, lane_changes: 0 },
];

const FRAME_RATE: f64 = 25.0;
const FRAMES: u32 = 100;
const LANE_IDS: [u32; 3] = [2, 3, 4];

struct SynthVehicle {
    id: u32,
    class: usize,
    kind: VehicleKind,
    x0: f64,
    speed: f64,
    accel_amp: f64,
    lane_schedule: Vec<(u32, u32)>, // (from_frame, lane_id)
    width: f64,
    height: f64,
}

fn lane_at(v: &SynthVehicle, frame: u32) -> u32 {
    let mut lane = v.lane_schedule[0].1;
    for &(from, l) in &v.lane_schedule {
        if frame >= from {
            lane = l;
        }
    }
    lane
}

fn speed_at(v: &SynthVehicle, frame: u32) -> f64 {
    let t = frame as f64 / FRAME_RATE;
    (v.speed + v.accel_amp * (t * 0.7 + v.id as f64).sin()).max(1.0)
}

fn x_at(v: &SynthVehicle, frame: u32) -> f64 {
    // Integrated closed form of the wobbling speed profile.
    let t = frame as f64 / FRAME_RATE;
    let phase0 = (v.id as f64).cos();
    let phase = (t * 0.7 + v.id as f64).cos();
    v.x0 + v.speed * t + v.accel_amp / 0.7 * (phase0 - phase)
}

fn accel_at(v: &SynthVehicle, frame: u32) -> f64 {
    let t = frame as f64 / FRAME_RATE;
    v.accel_amp * 0.7 * (t * 0.7 + v.id as f64).cos()
}

/// Writes one synthetic recording as the usual CSV triple
/// (`{stem}_tracks.csv`, `{stem}_tracksMeta.csv`,
/// `{stem}_recordingMeta.csv`) and returns the tracks path.
pub fn write_recording(dir: &Path, stem: &str, seed: u64) -> std::io::Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: u32 = rng.gen_range(24..40);
    let mut vehicles: Vec<SynthVehicle> = Vec::with_capacity(n as usize);
    for id in 1..=n {
        let class = rng.gen_range(0..3usize);
        let profile = &PROFILES[class];
        let kind = if rng.gen_bool(0.2) { VehicleKind::Truck } else { VehicleKind::Car };
        let speed = match kind {
            VehicleKind::Truck => (profile.speed_mean + 1.5 * gaussian(&mut rng)).clamp(5.0, 25.0),
            VehicleKind::Car => (profile.speed_mean + 1.5 * gaussian(&mut rng)).max(5.0),
        };
        let mut lane_schedule = vec![(0u32, LANE_IDS[rng.gen_range(0..LANE_IDS.len())])];
        for _ in 0..profile.lane_changes {
            let at = rng.gen_range(10..FRAMES - 10);
            let lane = LANE_IDS[rng.gen_range(0..LANE_IDS.len())];
            lane_schedule.push((at, lane));
        }
        lane_schedule.sort_unstable();
        vehicles.push(SynthVehicle {
            id,
            class,
            kind,
            x0: rng.gen_range(0.0..380.0),
            speed,
            accel_amp: PROFILES[class].accel_amp,
            lane_schedule,
            width: match kind {
                VehicleKind::Truck => rng.gen_range(10.0..13.0),
                VehicleKind::Car => rng.gen_range(4.0..5.2),
            },
            height: match kind {
                VehicleKind::Truck => 2.5,
                VehicleKind::Car => 2.0,
            },
        });
    }

    // Pull one follower close behind a leader to engineer a high-risk pair.
    if n >= 2 {
        let leader = 0usize;
        let lane = vehicles[leader].lane_schedule[0].1;
        let (left, right) = vehicles.split_at_mut(1);
        let follower = &mut right[0];
        follower.lane_schedule = vec![(0, lane)];
        follower.x0 = left[leader].x0 - 12.0;
        follower.speed = left[leader].speed + 4.0; // closing
        follower.class = 0;
    }

    let tracks_path = dir.join(format!("{stem}_tracks.csv"));
    let mut tracks = std::fs::File::create(&tracks_path)?;
    // frontSightDistance is an extra column the parser must ignore.
    writeln!(
        tracks,
        "frame,id,x,y,width,height,xVelocity,yVelocity,xAcceleration,yAcceleration,frontSightDistance,dhw,thw,ttc,precedingId,laneId"
    )?;
    for frame in 1..=FRAMES {
        // Leader relationships per lane, by position.
        let mut per_lane: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, v) in vehicles.iter().enumerate() {
            per_lane.entry(lane_at(v, frame)).or_default().push(i);
        }
        for members in per_lane.values_mut() {
            members.sort_by(|&a, &b| x_at(&vehicles[a], frame).total_cmp(&x_at(&vehicles[b], frame)));
        }
        for (i, v) in vehicles.iter().enumerate() {
            let lane = lane_at(v, frame);
            let members = &per_lane[&lane];
            let pos = members.iter().position(|&m| m == i).unwrap();
            let (preceding_id, dhw, thw, ttc) = if pos + 1 < members.len() {
                let lead = &vehicles[members[pos + 1]];
                let dhw = x_at(lead, frame) - x_at(v, frame);
                let speed = speed_at(v, frame);
                let closing = speed - speed_at(lead, frame);
                let thw = if speed > 0.0 { dhw / speed } else { 0.0 };
                let ttc = if closing > 0.0 { dhw / closing } else { 0.0 };
                (lead.id, dhw, thw, ttc)
            } else {
                (0, 0.0, 0.0, 0.0)
            };
            let y = lane as f64 * 4.0 + 0.01 * (frame as f64 + v.id as f64).sin();
            writeln!(
                tracks,
                "{frame},{id},{x:.4},{y:.4},{w:.2},{h:.2},{vx:.4},{vy:.4},{ax:.4},{ay:.4},{sight:.1},{dhw:.4},{thw:.4},{ttc:.4},{pid},{lane}",
                id = v.id,
                x = x_at(v, frame),
                w = v.width,
                h = v.height,
                vx = speed_at(v, frame),
                vy = 0.02 * (frame as f64).cos(),
                ax = accel_at(v, frame),
                ay = 0.0,
                sight = 200.0,
                pid = preceding_id,
            )?;
        }
    }

    let meta_path = dir.join(format!("{stem}_tracksMeta.csv"));
    let mut meta = std::fs::File::create(&meta_path)?;
    writeln!(meta, "id,class,numLaneChanges")?;
    for v in &vehicles {
        let class = match v.kind {
            VehicleKind::Car => "Car",
            VehicleKind::Truck => "Truck",
        };
        writeln!(meta, "{},{},{}", v.id, class, v.lane_schedule.len() - 1)?;
    }

    let rec_path = dir.join(format!("{stem}_recordingMeta.csv"));
    let mut rec = std::fs::File::create(&rec_path)?;
    writeln!(rec, "id,frameRate,numVehicles")?;
    writeln!(rec, "{stem},{FRAME_RATE},{n}")?;

    Ok(tracks_path)
}

/// Writes `count` synthetic recordings into `dir`, returning the tracks
/// paths.
pub fn write_recordings(dir: &Path, count: usize, seed: u64) -> std::io::Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| write_recording(dir, &format!("{i:02}"), seed.wrapping_add(i as u64)))
        .collect()
}
