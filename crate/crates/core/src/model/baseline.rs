use super::{PredictionSet, Predictor};
use crate::error::Result;
use crate::scene::PreparedScene;
use crate::tensor::Array2;

/// Extrapolates the target's last observed displacement; every mode is the same line.
#[derive(Clone, Copy, Debug)]
pub struct ConstantVelocity {
    pub modes: usize,
}

impl Predictor for ConstantVelocity {
    fn num_modes(&self) -> usize {
        self.modes
    }

    fn predict(&self, scenes: &[PreparedScene]) -> Result<Vec<PredictionSet>> {
        Ok(scenes
            .iter()
            .map(|s| {
                let last = s.inputs[0].steps.last().copied().unwrap_or([0.0; 3]);
                let origin = s.positions[0];
                let mut traj = Array2::zeros(s.future_steps, 2);
                for t in 0..s.future_steps {
                    let k = (t + 1) as f64;
                    traj.set(t, 0, origin.x + k * last[0]);
                    traj.set(t, 1, origin.y + k * last[1]);
                }
                PredictionSet {
                    modes: vec![traj; self.modes],
                    transform: s.transform,
                }
            })
            .collect())
    }
}
