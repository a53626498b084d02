//! Scenes: vehicle tracks on a 10 Hz grid, frames, and model-ready inputs.
//!
//! Timesteps are integers relative to the last observed frame `t = 0`:
//! history covers `-(T_h - 1)..=0`, the future `1..=T_f`.

mod csv_io;
mod encode;
mod manifest;
mod synthetic;

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array2;

pub use csv_io::{load_scene_csv, parse_scene_csv, save_scene_csv, write_scene_csv, SAMPLE_PERIOD};
pub use encode::{encode_inputs, ActorInput, INPUT_DIM};
pub use manifest::{load_dataset, load_manifest, save_manifest, ManifestEntry, Split};
pub use synthetic::{generate_synthetic, ScenarioKind, SyntheticConfig, SyntheticScene};

pub const DEFAULT_HISTORY_STEPS: usize = 20;
pub const DEFAULT_FUTURE_STEPS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Counter-clockwise rotation about the origin.
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
        }
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Target,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: i32,
    pub pos: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: String,
    pub role: Role,
    /// Sorted by strictly increasing `t`.
    pub obs: Vec<Observation>,
}

impl Track {
    pub fn new(id: impl Into<String>, role: Role, mut obs: Vec<Observation>) -> Result<Self> {
        obs.sort_by_key(|o| o.t);
        let id = id.into();
        if obs.windows(2).any(|w| w[0].t == w[1].t) {
            return Err(Error::Data(format!(
                "track `{id}` has two observations at one timestep"
            )));
        }
        Ok(Self { id, role, obs })
    }

    pub fn at(&self, t: i32) -> Option<Point> {
        self.obs
            .binary_search_by_key(&t, |o| o.t)
            .ok()
            .map(|i| self.obs[i].pos)
    }

    pub fn map_positions(&self, f: impl Fn(Point) -> Point) -> Track {
        Track {
            id: self.id.clone(),
            role: self.role,
            obs: self
                .obs
                .iter()
                .map(|o| Observation {
                    t: o.t,
                    pos: f(o.pos),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Raw,
    TargetLocal,
}

/// Maps raw coordinates into a local frame: translate by `-origin`, then rotate by `-angle`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub origin: Point,
    pub angle: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        origin: Point::ORIGIN,
        angle: 0.0,
    };

    pub fn to_local(&self, p: Point) -> Point {
        (p - self.origin).rotated(-self.angle)
    }

    pub fn to_raw(&self, p: Point) -> Point {
        p.rotated(self.angle) + self.origin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// The target track always comes first.
    pub tracks: Vec<Track>,
    pub history_steps: usize,
    pub future_steps: usize,
    pub frame: Frame,
    /// Raw-to-local transform; identity while in the raw frame.
    pub transform: RigidTransform,
}

impl Scene {
    /// Builds a raw-frame scene, enforcing the scene invariants: exactly one
    /// target (moved to the front), a fully observed target history, and every
    /// retained track observed at `t = 0`. Tracks missing `t = 0` are dropped
    /// and observations outside the history/future window discarded.
    pub fn new(
        id: impl Into<String>,
        tracks: Vec<Track>,
        history_steps: usize,
        future_steps: usize,
    ) -> Result<Self> {
        let id = id.into();
        if history_steps < 2 {
            return Err(Error::Data(
                "history must span at least two timesteps".into(),
            ));
        }
        let lo = -(history_steps as i32 - 1);
        let hi = future_steps as i32;
        let n_targets = tracks.iter().filter(|t| t.role == Role::Target).count();
        if n_targets != 1 {
            return Err(Error::Data(format!(
                "scene `{id}` has {n_targets} target tracks, expected exactly one"
            )));
        }
        let mut kept: Vec<Track> = tracks
            .into_iter()
            .map(|mut t| {
                t.obs.retain(|o| o.t >= lo && o.t <= hi);
                t
            })
            .filter(|t| t.at(0).is_some() || t.role == Role::Target)
            .collect();
        let ti = kept
            .iter()
            .position(|t| t.role == Role::Target)
            .expect("counted");
        let target = kept.remove(ti);
        if let Some(missing) = (lo..=0).find(|&t| target.at(t).is_none()) {
            return Err(Error::Data(format!(
                "target of scene `{id}` is not observed at t = {missing}"
            )));
        }
        let future_count = (1..=hi).filter(|&t| target.at(t).is_some()).count();
        if future_count != 0 && future_count != future_steps {
            return Err(Error::Data(format!(
                "target of scene `{id}` has a partial future ({future_count} of {future_steps} steps)"
            )));
        }
        kept.insert(0, target);
        Ok(Self {
            id,
            tracks: kept,
            history_steps,
            future_steps,
            frame: Frame::Raw,
            transform: RigidTransform::IDENTITY,
        })
    }

    pub fn target(&self) -> &Track {
        &self.tracks[0]
    }

    pub fn num_vehicles(&self) -> usize {
        self.tracks.len()
    }

    pub fn has_future(&self) -> bool {
        self.target().at(1).is_some()
    }

    pub fn history_start(&self) -> i32 {
        -(self.history_steps as i32 - 1)
    }

    /// Target positions over `1..=T_f`, if present.
    pub fn target_future(&self) -> Option<Vec<Point>> {
        (1..=self.future_steps as i32)
            .map(|t| self.target().at(t))
            .collect()
    }

    /// Positions of every vehicle at `t = 0`.
    pub fn current_positions(&self) -> Vec<Point> {
        self.tracks
            .iter()
            .map(|t| t.at(0).expect("retained tracks are observed at t = 0"))
            .collect()
    }

    /// Translates to the target's `t = 0` position and rotates so its last
    /// displacement (`t = -1 -> 0`) points along `+x`. A stationary target
    /// keeps the raw orientation.
    pub fn to_target_frame(&self) -> Scene {
        if self.frame == Frame::TargetLocal {
            return self.clone();
        }
        let target = self.target();
        let p0 = target.at(0).expect("validated");
        let p1 = target.at(-1).expect("validated");
        let heading = p0 - p1;
        let angle = if heading.x == 0.0 && heading.y == 0.0 {
            0.0
        } else {
            heading.y.atan2(heading.x)
        };
        let transform = RigidTransform { origin: p0, angle };
        Scene {
            id: self.id.clone(),
            tracks: self
                .tracks
                .iter()
                .map(|t| t.map_positions(|p| transform.to_local(p)))
                .collect(),
            history_steps: self.history_steps,
            future_steps: self.future_steps,
            frame: Frame::TargetLocal,
            transform,
        }
    }

    /// Undoes [`Scene::to_target_frame`].
    pub fn to_raw_frame(&self) -> Scene {
        if self.frame == Frame::Raw {
            return self.clone();
        }
        let tf = self.transform;
        Scene {
            id: self.id.clone(),
            tracks: self
                .tracks
                .iter()
                .map(|t| t.map_positions(|p| tf.to_raw(p)))
                .collect(),
            history_steps: self.history_steps,
            future_steps: self.future_steps,
            frame: Frame::Raw,
            transform: RigidTransform::IDENTITY,
        }
    }

    /// Removes future observations of every track (test-style input).
    pub fn without_future(&self) -> Scene {
        let mut s = self.clone();
        for t in &mut s.tracks {
            t.obs.retain(|o| o.t <= 0);
        }
        s
    }

    /// Keeps the target plus the listed other vehicles (indices into `tracks`), in track order.
    pub fn with_vehicles(&self, others: &[usize]) -> Scene {
        let mut s = self.clone();
        s.tracks = self
            .tracks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i == 0 || others.contains(i))
            .map(|(_, t)| t.clone())
            .collect();
        s
    }
}

/// Model-ready view of one scene in the target-local frame. Row 0 is the target.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    pub track_ids: Vec<String>,
    pub inputs: Vec<ActorInput>,
    /// `t = 0` positions, target-local frame.
    pub positions: Vec<Point>,
    /// Target future as a `T_f x 2` array (target-local), when known.
    pub future: Option<Array2>,
    pub transform: RigidTransform,
    pub history_steps: usize,
    pub future_steps: usize,
}

impl PreparedScene {
    pub fn from_scene(scene: &Scene) -> Self {
        let local = scene.to_target_frame();
        let future = local.target_future().map(|pts| points_to_array(&pts));
        Self {
            id: local.id.clone(),
            track_ids: local.tracks.iter().map(|t| t.id.clone()).collect(),
            inputs: encode_inputs(&local),
            positions: local.current_positions(),
            future,
            transform: local.transform,
            history_steps: local.history_steps,
            future_steps: local.future_steps,
        }
    }

    pub fn num_vehicles(&self) -> usize {
        self.inputs.len()
    }
}

/// `n x 2` array of `(x, y)` rows.
pub fn points_to_array(points: &[Point]) -> Array2 {
    let mut a = Array2::zeros(points.len(), 2);
    for (i, p) in points.iter().enumerate() {
        a.set(i, 0, p.x);
        a.set(i, 1, p.y);
    }
    a
}

pub fn array_to_points(a: &Array2) -> Vec<Point> {
    (0..a.rows())
        .map(|r| Point::new(a.get(r, 0), a.get(r, 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(
        id: &str,
        role: Role,
        start: Point,
        vel: Point,
        ts: impl Iterator<Item = i32>,
    ) -> Track {
        let obs = ts
            .map(|t| Observation {
                t,
                pos: start + vel * (t as f64),
            })
            .collect();
        Track::new(id, role, obs).unwrap()
    }

    fn scene() -> Scene {
        Scene::new(
            "s",
            vec![
                straight(
                    "a",
                    Role::Other,
                    Point::new(6.0, 5.0),
                    Point::new(1.0, 0.0),
                    -19..=30,
                ),
                straight(
                    "t",
                    Role::Target,
                    Point::new(5.0, 5.0),
                    Point::new(0.0, 1.0),
                    -19..=30,
                ),
                straight(
                    "gone",
                    Role::Other,
                    Point::new(0.0, 0.0),
                    Point::new(1.0, 1.0),
                    -19..=-3,
                ),
            ],
            20,
            30,
        )
        .unwrap()
    }

    #[test]
    fn target_first_and_unobserved_dropped() {
        let s = scene();
        assert_eq!(s.tracks.len(), 2);
        assert_eq!(s.target().id, "t");
        assert_eq!(s.tracks[1].id, "a");
    }

    #[test]
    fn heading_plus_y_rotates_by_minus_90_degrees() {
        let local = scene().to_target_frame();
        assert!((local.transform.angle - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let p = local.tracks[1].at(0).unwrap();
        assert!(
            (p.x - 0.0).abs() < 1e-12 && (p.y + 1.0).abs() < 1e-12,
            "{p:?}"
        );
        assert_eq!(local.target().at(0).unwrap(), Point::ORIGIN);
    }

    #[test]
    fn identity_when_already_aligned() {
        let s = Scene::new(
            "id",
            vec![straight(
                "t",
                Role::Target,
                Point::ORIGIN,
                Point::new(2.0, 0.0),
                -19..=0,
            )],
            20,
            30,
        )
        .unwrap();
        let local = s.to_target_frame();
        assert_eq!(local.transform, RigidTransform::IDENTITY);
        assert_eq!(local.tracks, s.tracks);
        assert!(!local.has_future());
    }

    #[test]
    fn stationary_target_keeps_orientation() {
        let s = Scene::new(
            "still",
            vec![straight(
                "t",
                Role::Target,
                Point::new(3.0, 4.0),
                Point::ORIGIN,
                -19..=0,
            )],
            20,
            30,
        )
        .unwrap();
        assert_eq!(s.to_target_frame().transform.angle, 0.0);
    }

    #[test]
    fn missing_target_history_rejected() {
        let err = Scene::new(
            "x",
            vec![straight(
                "t",
                Role::Target,
                Point::ORIGIN,
                Point::new(1.0, 0.0),
                -10..=0,
            )],
            20,
            30,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn with_vehicles_keeps_target() {
        let s = scene();
        let r = s.with_vehicles(&[]);
        assert_eq!(r.tracks.len(), 1);
        assert_eq!(r.target().id, "t");
    }
}
