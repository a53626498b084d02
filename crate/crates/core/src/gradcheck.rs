//! Central finite-difference verification of analytic gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::{Array2, ParamMap};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Step for the central difference; kept within `[1e-7, 1e-3]`.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many entries per array (evenly strided). `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, in name order.
    pub per_param: Vec<(String, f64)>,
    pub worst: Option<EntryError>,
    pub entries_checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares `analytic` against central differences of `f` around `params`.
///
/// `analytic` may omit parameters; a missing entry is treated as a zero
/// gradient. `f` must be deterministic.
pub fn finite_diff_check<F>(
    params: &ParamMap,
    analytic: &ParamMap,
    mut f: F,
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&ParamMap) -> f64,
{
    let h = opts.step.clamp(1e-7, 1e-3);
    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst: Option<EntryError> = None;
    let mut checked = 0;

    for (name, value) in params {
        let n = value.len();
        let stride = match opts.max_entries {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut param_worst = 0.0_f64;
        for idx in (0..n).step_by(stride) {
            let original = value.data()[idx];
            let arr = probe.get_mut(name).expect("same keys");
            arr.data_mut()[idx] = original + h;
            let plus = f(&probe);
            let arr = probe.get_mut(name).expect("same keys");
            arr.data_mut()[idx] = original - h;
            let minus = f(&probe);
            probe.get_mut(name).expect("same keys").data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[idx]);
            let rel = relative_error(a, numeric, opts.floor);
            checked += 1;
            param_worst = param_worst.max(rel);
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(EntryError {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        per_param.push((name.clone(), param_worst));
    }

    let passed = worst.as_ref().is_none_or(|w| w.rel_error < opts.tolerance);
    GradCheckReport {
        per_param,
        worst,
        entries_checked: checked,
        passed,
    }
}

/// Differentiable graph operations covered by [`check_primitive`].
pub const PRIMITIVES: [&str; 21] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "softplus",
    "relu",
    "row_softmax",
    "masked_row_softmax",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "scatter_add_rows",
    "transpose",
    "sum",
    "smooth_l1",
    "batch_norm",
    "fixed_norm",
    "group_norm",
];

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2 {
    let data = (0..rows * cols)
        .map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    Array2::from_vec(rows, cols, data).expect("sized")
}

/// Values at least `gap` away from zero, for kinked operations.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Array2 {
    uniform(rng, rows, cols, 1.0).map(|v| v.signum() * (gap + 2.0 * v.abs()))
}

/// Inputs and constants for one primitive at one shape.
struct Case {
    name: &'static str,
    params: ParamMap,
    index: Arc<[usize]>,
    mask: Vec<bool>,
    target: Array2,
    stats: (Vec<f64>, Vec<f64>),
    groups: usize,
    seed: u64,
}

impl Case {
    fn new(name: &'static str, rows: usize, cols: usize, seed: u64) -> Self {
        let (r, c) = (rows.max(1), cols.max(2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        let x = match name {
            "relu" => away_from_zero(&mut rng, r, c, 0.05),
            "softplus" => uniform(&mut rng, r, c, 25.0),
            _ => uniform(&mut rng, r, c, 2.0),
        };
        params.insert("x".into(), x.clone());
        match name {
            "matmul" => {
                params.insert("y".into(), uniform(&mut rng, c, c + 1, 1.0));
            }
            "add" => {
                params.insert("y".into(), uniform(&mut rng, 1, c, 1.0));
            }
            "sub" | "mul" | "concat_cols" => {
                params.insert("y".into(), uniform(&mut rng, r, c, 1.0));
            }
            "batch_norm" | "fixed_norm" | "group_norm" => {
                params.insert(
                    "gamma".into(),
                    uniform(&mut rng, 1, c, 1.0).map(|v| 1.0 + 0.5 * v),
                );
                params.insert("beta".into(), uniform(&mut rng, 1, c, 1.0));
            }
            _ => {}
        }
        let index: Arc<[usize]> = (0..r + 2)
            .map(|_| rng.gen_range(0..r))
            .collect::<Vec<_>>()
            .into();
        let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.6)).collect();
        for row in 0..r {
            mask[row * c + rng.gen_range(0..c)] = true;
        }
        // keep every residual clear of the smooth-L1 transition at |d| = 1
        let d = away_from_zero(&mut rng, r, c, 0.05).map(|v| {
            if (v.abs() - 1.0).abs() < 0.05 {
                v * 1.2
            } else {
                v
            }
        });
        let target = x.zip_map(&d, |a, b| a - b);
        let stats = (
            (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..c).map(|_| rng.gen_range(0.2..3.0)).collect(),
        );
        let groups = if c % 2 == 0 { 2 } else { 1 };
        Self {
            name,
            params,
            index,
            mask,
            target,
            stats,
            groups,
            seed,
        }
    }

    fn build(
        &self,
        g: &mut Graph,
        p: &ParamMap,
        grad: bool,
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let leaves: Vec<(String, NodeId)> = p
            .iter()
            .map(|(n, a)| (n.clone(), g.leaf(a.clone(), grad)))
            .collect();
        let leaf = |n: &str| leaves.iter().find(|(k, _)| k == n).map(|(_, id)| *id);
        let x = leaf("x").expect("x");
        let y = leaf("y");
        let affine = leaf("gamma").zip(leaf("beta"));
        let rows = g.value(x).rows();
        let out = match self.name {
            "matmul" => g.matmul(x, y.expect("y"))?,
            "add" => g.add(x, y.expect("y"))?,
            "sub" => g.sub(x, y.expect("y"))?,
            "mul" => g.mul(x, y.expect("y"))?,
            "scale" => g.scale(x, -1.7),
            "sigmoid" => g.sigmoid(x),
            "tanh" => g.tanh(x),
            "softplus" => g.softplus(x),
            "relu" => g.relu(x),
            "row_softmax" => g.row_softmax(x),
            "masked_row_softmax" => g.masked_row_softmax(x, &self.mask)?,
            "concat_cols" => g.concat_cols(&[x, y.expect("y"), x])?,
            "slice_cols" => {
                let c = g.value(x).cols();
                g.slice_cols(x, 1, c - 1)?
            }
            "gather_rows" => g.gather_rows(x, self.index.clone())?,
            "scatter_add_rows" => {
                let idx: Arc<[usize]> = self.index[..rows].into();
                g.scatter_add_rows(x, idx, rows + 1)?
            }
            "transpose" => g.transpose(x),
            "sum" => g.sum(x),
            "smooth_l1" => g.smooth_l1(x, &self.target, 1.0)?,
            "batch_norm" => {
                let (ga, be) = affine.expect("affine");
                g.batch_norm(x, ga, be, 1e-5)?.0
            }
            "fixed_norm" => {
                let (ga, be) = affine.expect("affine");
                g.fixed_norm(x, ga, be, &self.stats.0, &self.stats.1, 1e-5)?
            }
            "group_norm" => {
                let (ga, be) = affine.expect("affine");
                g.group_norm(x, ga, be, self.groups, 1e-5)?
            }
            other => unreachable!("unknown primitive {other}"),
        };
        // a fixed random weighting makes every output entry matter
        let (r, c) = g.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9);
        let w = g.constant(uniform(&mut rng, r, c, 1.0));
        let weighted = g.mul(out, w)?;
        Ok((g.sum(weighted), leaves))
    }

    fn loss(&self, p: &ParamMap) -> f64 {
        let mut g = Graph::new();
        let (l, _) = self.build(&mut g, p, false).expect("valid case");
        g.value(l).item()
    }

    fn gradients(&self) -> Result<ParamMap> {
        let mut g = Graph::new();
        let (l, leaves) = self.build(&mut g, &self.params, true)?;
        let grads = g.backward(l)?;
        Ok(leaves
            .into_iter()
            .map(|(n, id)| (n, grads.get_or_zeros(id)))
            .collect())
    }
}

/// Options used for primitive checks: a larger floor keeps near-zero
/// gradients from being judged on rounding noise.
pub fn primitive_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-6,
        floor: 1e-3,
        max_entries: None,
    }
}

/// Finite-difference check of one primitive on seeded random inputs of
/// roughly `rows x cols`.
pub fn check_primitive(
    name: &str,
    rows: usize,
    cols: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let name = PRIMITIVES
        .iter()
        .find(|p| **p == name)
        .ok_or_else(|| crate::error::Error::Config(format!("unknown primitive `{name}`")))?;
    let case = Case::new(name, rows, cols, seed);
    let analytic = case.gradients()?;
    Ok(finite_diff_check(
        &case.params,
        &analytic,
        |p| case.loss(p),
        opts,
    ))
}

/// Finite-difference check of the whole model (every block, two decoders,
/// attention on) at small widths on two leader-follower scenes. `seed` picks
/// both the initialization and the scenes.
pub fn check_model(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    use crate::model::{forward, BoundParams, ModelConfig, ModelParams, NormMode};
    use crate::scene::{generate_synthetic, PreparedScene, ScenarioKind, Scene, SyntheticConfig};

    let cfg = ModelConfig {
        history_steps: 4,
        future_steps: 2,
        hidden: 4,
        heads: 2,
        modes: 2,
        decoder_groups: 2,
        ..ModelConfig::default()
    };
    let model = ModelParams::init(cfg, seed)?;
    let scenes = generate_synthetic(&SyntheticConfig::new(ScenarioKind::LeaderFollower, 2, seed))
        .into_iter()
        .map(|s| {
            let mut tracks = s.scene.tracks;
            for t in &mut tracks {
                t.obs.retain(|o| o.t >= -3 && o.t <= 2);
            }
            Scene::new(s.scene.id, tracks, 4, 2).map(|sc| PreparedScene::from_scene(&sc))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedScene> = scenes.iter().collect();
    let mut target = Array2::zeros(refs.len(), 4);
    for (r, s) in scenes.iter().enumerate() {
        if let Some(f) = &s.future {
            target.row_mut(r).copy_from_slice(f.data());
        }
    }
    let target = target.map(|v| v * 0.05);
    let loss_of = |params: &ParamMap, want_grad: bool| -> Result<(f64, Option<ParamMap>)> {
        let mut g = Graph::new();
        let p = BoundParams::all(&mut g, params, want_grad);
        let m = ModelParams {
            params: params.clone(),
            ..model.clone()
        };
        let fo = forward(&mut g, &p, &m, &refs, NormMode::Train, &[0, 1])?;
        let l0 = g.smooth_l1(fo.predictions[0].1, &target, 1.0)?;
        let l1 = g.smooth_l1(fo.predictions[1].1, &target, 1.0)?;
        let loss = g.add(l0, l1)?;
        let value = g.value(loss).item();
        let grads = if want_grad {
            Some(p.gradients(&g, &g.backward(loss)?))
        } else {
            None
        };
        Ok((value, grads))
    };
    let (_, grads) = loss_of(&model.params, true)?;
    let analytic = grads.unwrap_or_default();
    Ok(finite_diff_check(
        &model.params,
        &analytic,
        |ps| loss_of(ps, false).map_or(f64::NAN, |(v, _)| v),
        opts,
    ))
}
