use super::{Point, Scene};
use crate::tensor::Array2;

/// Width of one input step: `(dx, dy, observed)`.
pub const INPUT_DIM: usize = 3;

/// One vehicle's encoder input: `T_h` displacement steps plus its `t = 0` position.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorInput {
    pub steps: Vec<[f64; INPUT_DIM]>,
    pub position: Point,
}

impl ActorInput {
    pub fn to_array(&self) -> Array2 {
        let mut a = Array2::zeros(self.steps.len(), INPUT_DIM);
        for (r, s) in self.steps.iter().enumerate() {
            a.row_mut(r).copy_from_slice(s);
        }
        a
    }
}

/// Displacement encoding of every vehicle in the scene (call on a
/// target-local scene).
///
/// Slot `k` covers timestep `t = k - (T_h - 1)` and holds
/// `(τ_t - τ_{t-1}, 1)` when both positions are observed, else `(0, 0, 0)`.
/// The first slot has no predecessor inside the window and is always
/// `(0, 0, 0)`.
pub fn encode_inputs(scene: &Scene) -> Vec<ActorInput> {
    let start = scene.history_start();
    scene
        .tracks
        .iter()
        .map(|track| {
            let steps = (0..scene.history_steps as i32)
                .map(|k| {
                    let t = start + k;
                    if k == 0 {
                        return [0.0; INPUT_DIM];
                    }
                    match (track.at(t), track.at(t - 1)) {
                        (Some(cur), Some(prev)) => {
                            let d = cur - prev;
                            [d.x, d.y, 1.0]
                        }
                        _ => [0.0; INPUT_DIM],
                    }
                })
                .collect();
            ActorInput {
                steps,
                position: track.at(0).expect("retained tracks are observed at t = 0"),
            }
        })
        .collect()
}
