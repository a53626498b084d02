//! Displacement metrics for the target vehicle: minADE, minFDE and miss rate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionSet, Predictor};
use crate::scene::PreparedScene;
use crate::tensor::Array2;

/// A sequence is a miss unless some endpoint lies strictly closer than this (m).
pub const MISS_THRESHOLD: f64 = 2.0;

fn dist(a: &Array2, b: &Array2, t: usize) -> f64 {
    let (dx, dy) = (a.get(t, 0) - b.get(t, 0), a.get(t, 1) - b.get(t, 1));
    (dx * dx + dy * dy).sqrt()
}

fn check(preds: &[Array2], gt: &Array2) {
    assert!(!preds.is_empty(), "at least one mode");
    for p in preds {
        assert_eq!(p.shape(), gt.shape(), "prediction and ground truth shapes");
    }
}

/// Smallest mean pointwise Euclidean error over modes.
pub fn min_ade(preds: &[Array2], gt: &Array2) -> f64 {
    check(preds, gt);
    let t = gt.rows();
    preds
        .iter()
        .map(|p| (0..t).map(|i| dist(p, gt, i)).sum::<f64>() / t as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Smallest endpoint Euclidean error over modes.
pub fn min_fde(preds: &[Array2], gt: &Array2) -> f64 {
    check(preds, gt);
    let last = gt.rows() - 1;
    preds
        .iter()
        .map(|p| dist(p, gt, last))
        .fold(f64::INFINITY, f64::min)
}

pub fn is_miss(preds: &[Array2], gt: &Array2) -> bool {
    min_fde(preds, gt) >= MISS_THRESHOLD
}

/// Fraction of sequences where no endpoint is strictly within [`MISS_THRESHOLD`].
pub fn miss_rate(preds: &[Vec<Array2>], gts: &[Array2]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "miss rate over {} predictions and {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let misses = preds.iter().zip(gts).filter(|(p, g)| is_miss(p, g)).count();
    Ok(misses as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub n_sequences: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "split,k,minADE,minFDE,MR,n";

    pub fn csv_row(&self, split: &str) -> String {
        format!(
            "{split},{},{},{},{},{}",
            self.k, self.min_ade, self.min_fde, self.miss_rate, self.n_sequences
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k={} minADE={:.4} minFDE={:.4} MR={:.4} (n={})",
            self.k, self.min_ade, self.min_fde, self.miss_rate, self.n_sequences
        )
    }
}

/// Aggregates metrics over the first `k` modes of each prediction set.
pub fn evaluate_predictions(
    preds: &[PredictionSet],
    gts: &[Array2],
    k: usize,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} prediction sets for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if k == 0 || preds.iter().any(|p| p.num_modes() < k) {
        return Err(Error::Config(format!(
            "k = {k} exceeds the available modes"
        )));
    }
    let n = preds.len() as f64;
    let mut ade = 0.0;
    let mut fde = 0.0;
    let mut misses = 0usize;
    for (p, gt) in preds.iter().zip(gts) {
        let modes = &p.modes[..k];
        ade += min_ade(modes, gt);
        let e = min_fde(modes, gt);
        fde += e;
        misses += usize::from(e >= MISS_THRESHOLD);
    }
    Ok(MetricReport {
        k,
        min_ade: ade / n,
        min_fde: fde / n,
        miss_rate: misses as f64 / n,
        n_sequences: preds.len(),
    })
}

/// Target-local ground truths of a split; every scene needs a future.
pub fn ground_truths(scenes: &[PreparedScene]) -> Result<Vec<Array2>> {
    scenes
        .iter()
        .map(|s| {
            s.future
                .clone()
                .ok_or_else(|| Error::Data(format!("scene `{}` has no ground-truth future", s.id)))
        })
        .collect()
}

/// Runs `model` over a split and scores decoders `0..k`.
pub fn evaluate(model: &dyn Predictor, scenes: &[PreparedScene], k: usize) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let gts = ground_truths(scenes)?;
    let preds = model.predict(scenes)?;
    evaluate_predictions(&preds, &gts, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConstantVelocity;
    use crate::scene::{generate_synthetic, ScenarioKind, SyntheticConfig};

    fn constant(t: usize, x: f64, y: f64) -> Array2 {
        let mut a = Array2::zeros(t, 2);
        for r in 0..t {
            a.set(r, 0, x);
            a.set(r, 1, y);
        }
        a
    }

    #[test]
    fn exact_mode_gives_zero() {
        let gt = constant(30, 1.0, 2.0);
        let preds = [constant(30, 9.0, 9.0), gt.clone()];
        assert_eq!(min_ade(&preds, &gt), 0.0);
        assert_eq!(min_fde(&preds, &gt), 0.0);
    }

    #[test]
    fn three_four_five_offset() {
        let gt = constant(30, 0.0, 0.0);
        assert_eq!(min_ade(&[constant(30, 3.0, 4.0)], &gt), 5.0);
    }

    #[test]
    fn min_fde_takes_the_closer_endpoint() {
        let gt = constant(5, 0.0, 0.0);
        assert_eq!(
            min_fde(&[constant(5, 7.0, 0.0), constant(5, 0.0, 2.0)], &gt),
            2.0
        );
    }

    #[test]
    fn miss_boundary_is_strict() {
        let gt = constant(30, 0.0, 0.0);
        assert_eq!(
            miss_rate(&[vec![constant(30, 2.0, 0.0)]], std::slice::from_ref(&gt)).unwrap(),
            1.0
        );
        assert_eq!(
            miss_rate(&[vec![constant(30, 1.999, 0.0)]], std::slice::from_ref(&gt)).unwrap(),
            0.0
        );
        let preds = vec![
            vec![gt.clone()],
            vec![gt.clone()],
            vec![gt.clone()],
            vec![constant(30, 5.0, 0.0)],
        ];
        assert_eq!(miss_rate(&preds, &vec![gt; 4]).unwrap(), 0.25);
        assert!(miss_rate(&[], &[]).is_err());
    }

    #[test]
    fn constant_velocity_baseline_is_exact_on_constant_velocity_scenes() {
        let scenes: Vec<PreparedScene> =
            generate_synthetic(&SyntheticConfig::new(ScenarioKind::ConstantVelocity, 20, 5))
                .iter()
                .map(|s| PreparedScene::from_scene(&s.scene))
                .collect();
        let r = evaluate(&ConstantVelocity { modes: 6 }, &scenes, 6).unwrap();
        assert!(r.min_ade < 1e-9 && r.min_fde < 1e-9 && r.miss_rate == 0.0);
        assert_eq!(r.n_sequences, 20);
        assert!(evaluate(&ConstantVelocity { modes: 1 }, &[], 1).is_err());
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricReport {
            k: 6,
            min_ade: 0.5,
            min_fde: 1.25,
            miss_rate: 0.25,
            n_sequences: 4,
        };
        assert_eq!(r.csv_row("val"), "val,6,0.5,1.25,0.25,4");
        assert_eq!(
            MetricReport::CSV_HEADER.split(',').count(),
            r.csv_row("x").split(',').count()
        );
    }
}
