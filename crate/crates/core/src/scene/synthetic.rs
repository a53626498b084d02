//! Seeded, kinematically consistent synthetic scenes (5 s at 10 Hz).
//!
//! Each scene is built in a lane frame where the target drives along `+x`
//! and reaches the origin at `t = 0`, then placed in the world with a random
//! rigid pose so the target-frame transform has real work to do.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Observation, Point, RigidTransform, Role, Scene, Track, DEFAULT_FUTURE_STEPS,
    DEFAULT_HISTORY_STEPS,
};
use crate::error::{Error, Result};

const DT: f64 = 0.1;
/// Driver reaction time between the leader's and the follower's braking onset.
const REACTION_TIME: f64 = 1.5;
const LANE_WIDTH: f64 = 3.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    ConstantVelocity,
    LeaderFollower,
    Intersection,
    BimodalTurn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::ConstantVelocity,
        ScenarioKind::LeaderFollower,
        ScenarioKind::Intersection,
        ScenarioKind::BimodalTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::ConstantVelocity => "constant-velocity",
            ScenarioKind::LeaderFollower => "leader-follower",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::BimodalTurn => "bimodal-turn",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub kind: ScenarioKind,
    pub n_scenes: usize,
    pub seed: u64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_headway: f64,
    pub max_headway: f64,
    /// Probability that a bimodal-turn scene turns left.
    pub left_probability: f64,
    /// Turn radius (m) of bimodal-turn futures.
    pub turn_radius: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::ConstantVelocity,
            n_scenes: 100,
            seed: 0,
            min_speed: 5.0,
            max_speed: 15.0,
            min_headway: 5.0,
            max_headway: 30.0,
            left_probability: 0.5,
            turn_radius: 20.0,
        }
    }
}

impl SyntheticConfig {
    pub fn new(kind: ScenarioKind, n_scenes: usize, seed: u64) -> Self {
        Self {
            kind,
            n_scenes,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Raw (world) frame.
    pub scene: Scene,
    pub kind: ScenarioKind,
    /// Track that causally shapes the target's future, if any.
    pub causal_track: Option<String>,
    /// Free-form outcome label (e.g. `left` / `right` for turns).
    pub label: Option<String>,
}

/// Generates `n_scenes` scenes. Scene `i` draws from its own ChaCha stream,
/// so output depends only on `(config, i)`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Vec<SyntheticScene> {
    (0..config.n_scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let id = format!("{}-{}-{i:05}", config.kind, config.seed);
            let draft = match config.kind {
                ScenarioKind::ConstantVelocity => constant_velocity(config, &mut rng),
                ScenarioKind::LeaderFollower => leader_follower(config, &mut rng),
                ScenarioKind::Intersection => intersection(config, &mut rng),
                ScenarioKind::BimodalTurn => bimodal_turn(config, &mut rng),
            };
            draft.finish(id, config.kind, &mut rng)
        })
        .collect()
}

/// Position at `t` seconds.
type Motion = Box<dyn Fn(f64) -> Point>;

struct Draft {
    /// `(track id, role, first timestep, last timestep, position at t seconds)`.
    tracks: Vec<(String, Role, i32, i32, Motion)>,
    causal: Option<String>,
    label: Option<String>,
}

impl Draft {
    fn new() -> Self {
        Self {
            tracks: Vec::new(),
            causal: None,
            label: None,
        }
    }

    fn add(
        &mut self,
        role: Role,
        first: i32,
        last: i32,
        f: impl Fn(f64) -> Point + 'static,
    ) -> String {
        let id = format!("v{}", self.tracks.len());
        self.tracks
            .push((id.clone(), role, first, last, Box::new(f)));
        id
    }

    fn finish(self, id: String, kind: ScenarioKind, rng: &mut ChaCha8Rng) -> SyntheticScene {
        let pose = RigidTransform {
            origin: Point::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)),
            angle: rng.gen_range(-PI..PI),
        };
        let tracks = self
            .tracks
            .into_iter()
            .map(|(tid, role, first, last, f)| {
                let obs = (first..=last)
                    .map(|t| Observation {
                        t,
                        pos: pose.to_raw(f(t as f64 * DT)),
                    })
                    .collect();
                Track::new(tid, role, obs).expect("distinct timesteps")
            })
            .collect();
        let scene = Scene::new(id, tracks, DEFAULT_HISTORY_STEPS, DEFAULT_FUTURE_STEPS)
            .expect("generator produces valid scenes");
        SyntheticScene {
            scene,
            kind,
            causal_track: self.causal,
            label: self.label,
        }
    }
}

const FIRST: i32 = -(DEFAULT_HISTORY_STEPS as i32 - 1);
const LAST: i32 = DEFAULT_FUTURE_STEPS as i32;

/// Longitudinal distance covered by time `t` (s) for a vehicle at `v0`
/// that starts braking at `onset` with deceleration `decel` until it stops.
/// Zero at `t = 0` only when `onset >= 0`.
pub(crate) fn braking_distance(v0: f64, decel: f64, onset: f64, t: f64) -> f64 {
    if t <= onset || decel <= 0.0 {
        return v0 * t;
    }
    let tau = t - onset;
    let stop = v0 / decel;
    let braked = if tau < stop {
        v0 * tau - 0.5 * decel * tau * tau
    } else {
        v0 * v0 / (2.0 * decel)
    };
    v0 * onset + braked
}

fn speed(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(config.min_speed..=config.max_speed)
}

fn constant_velocity(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Draft {
    let mut d = Draft::new();
    let v = speed(config, rng);
    d.add(Role::Target, FIRST, LAST, move |t| Point::new(v * t, 0.0));
    let n_others = rng.gen_range(2..=6);
    for _ in 0..n_others {
        let r = rng.gen_range(config.min_headway..=40.0);
        let bearing = rng.gen_range(-PI..PI);
        let p0 = Point::new(r * bearing.cos(), r * bearing.sin());
        let heading = (rng.gen_range(0..4) as f64) * PI / 2.0 + rng.gen_range(-0.1..0.1);
        let vel = Point::new(heading.cos(), heading.sin()) * speed(config, rng);
        let first = if rng.gen_bool(0.3) {
            rng.gen_range(FIRST..=0)
        } else {
            FIRST
        };
        d.add(Role::Other, first, LAST, move |t| p0 + vel * t);
    }
    d
}

fn leader_follower(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Draft {
    let mut d = Draft::new();
    let v0 = rng.gen_range(config.min_speed.max(8.0)..=config.max_speed);
    // Leader always farther than every distractor, so nearest-first selection misses it.
    let headway = rng.gen_range(config.min_headway.max(15.0)..=config.max_headway.max(15.0));
    let brakes = rng.gen_bool(0.75);
    let decel = if brakes { rng.gen_range(2.0..6.0) } else { 0.0 };
    let leader_onset = rng.gen_range(-1.4..-0.2);
    let follower_onset = leader_onset + REACTION_TIME;

    d.add(Role::Target, FIRST, LAST, move |t| {
        Point::new(braking_distance(v0, decel, follower_onset, t), 0.0)
    });
    let x0 = braking_distance(v0, decel, leader_onset, 0.0);
    let leader = d.add(Role::Other, FIRST, LAST, move |t| {
        Point::new(
            headway + braking_distance(v0, decel, leader_onset, t) - x0,
            0.0,
        )
    });

    let n_distractors = rng.gen_range(3..=4);
    for _ in 0..n_distractors {
        let lane =
            if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * LANE_WIDTH * rng.gen_range(1..=2) as f64;
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let v = speed(config, rng) * dir;
        let x_at_zero = rng.gen_range(-10.0..10.0);
        d.add(Role::Other, FIRST, LAST, move |t| {
            Point::new(x_at_zero + v * t, lane)
        });
    }
    d.causal = Some(leader);
    d.label = Some(if brakes { "brake" } else { "cruise" }.to_string());
    d
}

fn intersection(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Draft {
    let mut d = Draft::new();
    let v = rng.gen_range(8.0..=12.0_f64.min(config.max_speed.max(8.0)));
    let dist_to_conflict = rng.gen_range(15.0..30.0);
    let cross_speed = speed(config, rng);
    let target_arrival = dist_to_conflict / v;
    let cross_arrival = target_arrival + rng.gen_range(-3.0..3.0);
    let conflict = (cross_arrival - target_arrival).abs() < 1.5;
    let decel = if conflict {
        rng.gen_range(2.0..4.0)
    } else {
        0.0
    };
    let onset = rng.gen_range(0.2..0.8);
    d.add(Role::Target, FIRST, LAST, move |t| {
        Point::new(braking_distance(v, decel, onset, t), 0.0)
    });
    let crossing = d.add(Role::Other, FIRST, LAST, move |t| {
        Point::new(dist_to_conflict, cross_speed * (t - cross_arrival))
    });
    for _ in 0..rng.gen_range(1..=3) {
        let p0 = Point::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..-8.0));
        let vel = Point::new(-speed(config, rng), 0.0);
        d.add(Role::Other, FIRST, LAST, move |t| p0 + vel * t);
    }
    if conflict {
        d.causal = Some(crossing);
    }
    d.label = Some(if conflict { "yield" } else { "pass" }.to_string());
    d
}

fn bimodal_turn(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Draft {
    const TURN_SPEED: f64 = 10.0;
    let mut d = Draft::new();
    let left = rng.gen_bool(config.left_probability.clamp(0.0, 1.0));
    let side = if left { 1.0 } else { -1.0 };
    let radius = config.turn_radius;
    d.add(Role::Target, FIRST, LAST, move |t| {
        if t <= 0.0 {
            Point::new(TURN_SPEED * t, 0.0)
        } else {
            let phi = TURN_SPEED * t / radius;
            Point::new(radius * phi.sin(), side * radius * (1.0 - phi.cos()))
        }
    });
    for _ in 0..rng.gen_range(1..=2) {
        let r = rng.gen_range(30.0..60.0);
        let bearing = rng.gen_range(-PI..PI);
        let p0 = Point::new(r * bearing.cos(), r * bearing.sin());
        let heading = rng.gen_range(-PI..PI);
        let vel = Point::new(heading.cos(), heading.sin()) * speed(config, rng);
        d.add(Role::Other, FIRST, LAST, move |t| p0 + vel * t);
    }
    d.label = Some(if left { "left" } else { "right" }.to_string());
    d
}
