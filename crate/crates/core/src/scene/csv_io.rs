//! Argoverse-style sequence CSV: one row per (timestamp, track) with columns
//! `TIMESTAMP, TRACK_ID, OBJECT_TYPE, X, Y` (extra columns such as
//! `CITY_NAME` are ignored). `OBJECT_TYPE = AGENT` marks the target.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Observation, Point, Role, Scene, Track, DEFAULT_FUTURE_STEPS, DEFAULT_HISTORY_STEPS};
use crate::error::{Error, Result};

/// Seconds between frames (10 Hz).
pub const SAMPLE_PERIOD: f64 = 0.1;

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    #[serde(rename = "TIMESTAMP")]
    timestamp: f64,
    #[serde(rename = "TRACK_ID")]
    track_id: String,
    #[serde(rename = "OBJECT_TYPE")]
    object_type: String,
    #[serde(rename = "X")]
    x: f64,
    #[serde(rename = "Y")]
    y: f64,
    #[serde(rename = "CITY_NAME", default)]
    city_name: String,
}

/// Loads a sequence file with the default 20-step history and 30-step future.
pub fn load_scene_csv(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = File::open(path)?;
    parse_scene_csv(file, id, DEFAULT_HISTORY_STEPS, DEFAULT_FUTURE_STEPS)
}

/// Parses a sequence and resamples every track onto integer timesteps
/// relative to the target's `T_h`-th observation (`t = 0`). Timestamps are
/// snapped to the nearest 0.1 s slot; two rows of one track landing in the
/// same slot are rejected.
pub fn parse_scene_csv(
    reader: impl Read,
    id: impl Into<String>,
    history_steps: usize,
    future_steps: usize,
) -> Result<Scene> {
    let id = id.into();
    let mut rdr = csv::Reader::from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut rows_by_track: HashMap<String, Vec<Row>> = HashMap::new();
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        if !row.timestamp.is_finite() || !row.x.is_finite() || !row.y.is_finite() {
            return Err(Error::Data(format!(
                "non-finite value in track `{}` of `{id}`",
                row.track_id
            )));
        }
        if !seen.insert((row.track_id.clone(), row.timestamp.to_bits())) {
            return Err(Error::Data(format!(
                "duplicate row for track `{}` at timestamp {} in `{id}`",
                row.track_id, row.timestamp
            )));
        }
        if !rows_by_track.contains_key(&row.track_id) {
            order.push(row.track_id.clone());
        }
        rows_by_track
            .entry(row.track_id.clone())
            .or_default()
            .push(row);
    }

    let agents: Vec<&String> = order
        .iter()
        .filter(|tid| rows_by_track[*tid].iter().any(|r| r.object_type == "AGENT"))
        .collect();
    let agent_id = match agents.as_slice() {
        [one] => (*one).clone(),
        [] => return Err(Error::Data(format!("no AGENT track in `{id}`"))),
        _ => {
            return Err(Error::Data(format!(
                "{} AGENT tracks in `{id}`",
                agents.len()
            )))
        }
    };

    let mut agent_ts: Vec<f64> = rows_by_track[&agent_id]
        .iter()
        .map(|r| r.timestamp)
        .collect();
    agent_ts.sort_by(f64::total_cmp);
    if agent_ts.len() < history_steps {
        return Err(Error::Data(format!(
            "AGENT of `{id}` has {} rows, fewer than the {history_steps}-step history",
            agent_ts.len()
        )));
    }
    let t0 = agent_ts[history_steps - 1];

    let mut tracks = Vec::with_capacity(order.len());
    for tid in &order {
        let role = if *tid == agent_id {
            Role::Target
        } else {
            Role::Other
        };
        let mut obs: Vec<Observation> = Vec::new();
        let mut slots = HashSet::new();
        for r in &rows_by_track[tid] {
            let slot = ((r.timestamp - t0) / SAMPLE_PERIOD).round();
            if slot.abs() > i32::MAX as f64 / 2.0 {
                return Err(Error::Data(format!(
                    "timestamp {} out of range",
                    r.timestamp
                )));
            }
            let t = slot as i32;
            if !slots.insert(t) {
                return Err(Error::Data(format!(
                    "track `{tid}` of `{id}` has two rows in the 0.1 s slot t = {t}"
                )));
            }
            obs.push(Observation {
                t,
                pos: Point::new(r.x, r.y),
            });
        }
        tracks.push(Track::new(tid.clone(), role, obs)?);
    }
    Scene::new(id, tracks, history_steps, future_steps)
}

/// Writes a scene in the same layout `parse_scene_csv` reads, track by
/// track with the target first. `t = 0` lands on `(T_h - 1) * 0.1 s`.
pub fn write_scene_csv(scene: &Scene, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let offset = scene.history_steps as i32 - 1;
    for track in &scene.tracks {
        let object_type = match track.role {
            Role::Target => "AGENT",
            Role::Other => "OTHERS",
        };
        for o in &track.obs {
            w.serialize(Row {
                timestamp: f64::from(o.t + offset) * SAMPLE_PERIOD,
                track_id: track.id.clone(),
                object_type: object_type.to_string(),
                x: o.pos.x,
                y: o.pos.y,
                city_name: "SYN".to_string(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_scene_csv(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_scene_csv(scene, file)
}
