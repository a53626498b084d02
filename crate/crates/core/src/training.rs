//! Two-stage training.
//!
//! Stage 1 fits the whole network through decoder 0 with smooth-L1 on the
//! target trajectory. Stage 2 freezes everything trained so far, seeds
//! decoders `1..k` and fits them with winner-takes-all loss. The frozen
//! backbone runs in evaluation mode during stage 2, so its running
//! statistics stay untouched as well.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{smooth_l1_mean, Graph};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{
    decode, decoder_prefix, forward, is_decoder_param, BoundParams, ModelParams, NormMode,
};
use crate::optim::{AdamConfig, AdamState, FreezeMask};
use crate::scene::PreparedScene;
use crate::tensor::{Array2, ParamMap};

/// How stage 2 initializes decoders `1..k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderInit {
    /// Copy of the trained decoder 0 plus uniform noise.
    CopyWithNoise,
    /// Fresh fan-in initialization.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    /// Last epoch (1-based, per stage) at the initial rate.
    pub decay_epoch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Smooth-L1 transition point (m).
    pub smooth_l1_beta: f64,
    pub seed: u64,
    pub decoder_init: DecoderInit,
    pub decoder_init_noise: f64,
    /// Whether the frozen decoder 0 competes in the stage-2 minimum.
    pub wta_includes_decoder0: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 36,
            stage2_epochs: 36,
            batch_size: 32,
            lr: 1e-3,
            lr_decayed: 1e-4,
            decay_epoch: 32,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            smooth_l1_beta: 1.0,
            seed: 0,
            decoder_init: DecoderInit::CopyWithNoise,
            decoder_init_noise: 1e-2,
            wta_includes_decoder0: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decayed", self.lr_decayed),
            ("smooth_l1_beta", self.smooth_l1_beta),
            ("eps", self.eps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.decoder_init_noise < 0.0 {
            return Err(Error::Config(
                "weight_decay and decoder_init_noise must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate of 1-based `epoch` within a stage.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_epoch {
            self.lr
        } else {
            self.lr_decayed
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Mean smooth-L1 over all `2 T_f` components.
pub fn smooth_l1(pred: &Array2, gt: &Array2, beta: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Data(format!(
            "smooth-L1 of {:?} against {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(smooth_l1_mean(pred, gt, beta))
}

/// Smallest per-mode smooth-L1 and the mode attaining it (lowest index on ties).
pub fn wta_loss(preds: &[Array2], gt: &Array2, beta: f64) -> Result<(f64, usize)> {
    let mut best = (f64::INFINITY, 0);
    if preds.is_empty() {
        return Err(Error::Data("winner-takes-all over zero modes".into()));
    }
    for (m, p) in preds.iter().enumerate() {
        let l = smooth_l1(p, gt, beta)?;
        if l < best.0 || (m == 0 && l.is_nan()) {
            best = (l, m);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_min_ade1: Option<f64>,
    /// Stage-2 winner counts per decoder over the epoch's training scenes.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub winners: Vec<usize>,
}

/// Where per-epoch artifacts go: `checkpoints/stage{s}_epoch{N}.ckpt` and `train_log.jsonl`.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("checkpoints"))?;
        File::create(dir.join("train_log.jsonl"))?;
        Ok(Self { dir })
    }

    pub fn checkpoint_path(&self, stage: u8, epoch: usize) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("stage{stage}_epoch{epoch}.ckpt"))
    }

    fn record(&self, rec: &LogRecord, model: &ModelParams) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(self.dir.join("train_log.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        model.save(self.checkpoint_path(rec.stage, rec.epoch))
    }
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: Vec<LogRecord>,
}

/// `B x 2T_f` stacked target futures.
pub fn future_matrix(scenes: &[&PreparedScene]) -> Result<Array2> {
    let width = scenes.first().map_or(0, |s| 2 * s.future_steps);
    let mut out = Array2::zeros(scenes.len(), width);
    for (r, s) in scenes.iter().enumerate() {
        let f = s
            .future
            .as_ref()
            .ok_or_else(|| Error::Data(format!("training scene `{}` has no future", s.id)))?;
        if f.len() != width {
            return Err(Error::Data(format!(
                "scene `{}` future length {}",
                s.id,
                f.len()
            )));
        }
        out.row_mut(r).copy_from_slice(f.data());
    }
    Ok(out)
}

/// Loss, optional gradients and per-layer batch statistics.
pub type BatchLoss = (
    f64,
    Option<ParamMap>,
    Vec<(usize, crate::autograd::BatchStats)>,
);

/// Stage-1 loss of one batch in training mode; with `want_grads` also the
/// gradients of the backbone and decoder 0.
pub fn stage1_batch_loss(
    model: &ModelParams,
    params: &ParamMap,
    scenes: &[&PreparedScene],
    beta: f64,
    want_grads: bool,
) -> Result<BatchLoss> {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, stage1_param, |_| want_grads);
    let fo = forward(&mut g, &p, model, scenes, NormMode::Train, &[0])?;
    let target = future_matrix(scenes)?;
    let origin = target_origin_offsets(scenes, model.config.future_steps);
    let pred = match origin {
        Some(o) => {
            let o = g.constant(o);
            g.add(fo.predictions[0].1, o)?
        }
        None => fo.predictions[0].1,
    };
    let loss = g.smooth_l1(pred, &target, beta)?;
    let value = g.value(loss).item();
    let grads = if want_grads && value.is_finite() {
        Some(p.gradients(&g, &g.backward(loss)?))
    } else {
        None
    };
    Ok((value, grads, fo.batch_stats))
}

/// Target positions at `t = 0` tiled over the horizon, or `None` when all
/// are at the origin (the usual target-local case).
fn target_origin_offsets(scenes: &[&PreparedScene], future_steps: usize) -> Option<Array2> {
    if scenes
        .iter()
        .all(|s| s.positions[0].x == 0.0 && s.positions[0].y == 0.0)
    {
        return None;
    }
    let mut o = Array2::zeros(scenes.len(), 2 * future_steps);
    for (r, s) in scenes.iter().enumerate() {
        for t in 0..future_steps {
            o.set(r, 2 * t, s.positions[0].x);
            o.set(r, 2 * t + 1, s.positions[0].y);
        }
    }
    Some(o)
}

fn stage1_param(name: &str) -> bool {
    !is_decoder_param(name) || name.starts_with(&decoder_prefix(0))
}

fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn val_ade1(model: &ModelParams, val: &[PreparedScene]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let one = model.with_modes(1);
    Ok(Some(evaluate(&one, val, 1)?.min_ade))
}

/// Stage 1: every parameter except decoders `1..k` trains on decoder 0.
pub fn train_stage1(
    model: &mut ModelParams,
    train: &[PreparedScene],
    val: &[PreparedScene],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mask = FreezeMask::only(model.params.keys().filter(|n| stage1_param(n)).cloned());
    let mut adam = AdamState::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 1..=cfg.stage1_epochs {
        adam.config.lr = cfg.lr_for_epoch(epoch);
        let order = epoch_order(&mut rng, train.len());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads, stats) =
                stage1_batch_loss(model, &model.params, &batch, cfg.smooth_l1_beta, true)?;
            let grads = grads.ok_or_else(|| {
                Error::Numerical(format!("stage 1 epoch {epoch} batch {b}: loss is {loss}"))
            })?;
            adam.step(&mut model.params, &grads, &mask)
                .map_err(|e| locate(e, &format!("stage 1 epoch {epoch} batch {b}")))?;
            model.update_running_stats(&stats);
            total += loss * batch.len() as f64;
        }
        model.trained_epochs += 1;
        let rec = LogRecord {
            stage: 1,
            epoch,
            lr: adam.config.lr,
            train_loss: total / train.len() as f64,
            val_min_ade1: val_ade1(model, val)?,
            winners: Vec::new(),
        };
        if let Some(o) = out {
            o.record(&rec, model)?;
        }
        log.push(rec);
    }
    Ok(log)
}

/// Evaluation-mode decoder input of every scene's target (`n x H`).
pub fn target_features(model: &ModelParams, scenes: &[PreparedScene]) -> Result<Array2> {
    let mut out = Array2::zeros(scenes.len(), model.config.hidden);
    for (c, chunk) in scenes.chunks(64).enumerate() {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &model.params, |n| !is_decoder_param(n), |_| false);
        let refs: Vec<&PreparedScene> = chunk.iter().collect();
        let fo = forward(&mut g, &p, model, &refs, NormMode::Eval, &[])?;
        let feats = g.value(fo.target_features);
        for r in 0..chunk.len() {
            out.row_mut(c * 64 + r).copy_from_slice(feats.row(r));
        }
    }
    Ok(out)
}

fn init_new_decoders(model: &mut ModelParams, cfg: &TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let fresh =
        ModelParams::init(model.config.clone(), cfg.seed ^ 0x5eed).expect("validated config");
    for m in 1..model.config.modes {
        for (src, dst) in model
            .decoder_names(0)
            .into_iter()
            .zip(model.decoder_names(m))
        {
            let value = match cfg.decoder_init {
                DecoderInit::CopyWithNoise => {
                    let mut v = model.params[&src].clone();
                    for x in v.data_mut() {
                        *x += cfg.decoder_init_noise * (2.0 * rng.gen::<f64>() - 1.0);
                    }
                    v
                }
                DecoderInit::Random => fresh.params[&dst].clone(),
            };
            model.params.insert(dst, value);
        }
    }
}

/// Stage 2: decoders `1..k` train with winner-takes-all; everything else is frozen.
pub fn train_stage2(
    model: &mut ModelParams,
    train: &[PreparedScene],
    val: &[PreparedScene],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let k = model.config.modes;
    if k < 2 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    init_new_decoders(model, cfg);
    let trainable: Vec<String> = (1..k).flat_map(|m| model.decoder_names(m)).collect();
    let mask = FreezeMask::only(trainable);
    let is_new = |n: &str| (1..k).any(|m| n.starts_with(&decoder_prefix(m)));

    // The frozen part is deterministic, so decoder inputs and decoder-0
    // losses are computed once.
    let feats = target_features(model, train)?;
    let refs: Vec<&PreparedScene> = train.iter().collect();
    let targets = future_matrix(&refs)?;
    let base_losses: Vec<f64> = {
        let mut g = Graph::new();
        let p = BoundParams::bind(
            &mut g,
            &model.params,
            |n| n.starts_with(&decoder_prefix(0)),
            |_| false,
        );
        let a = g.constant(feats.clone());
        let o = decode(&mut g, &p, &model.config, 0, a)?;
        let o = g.value(o);
        (0..train.len())
            .map(|r| {
                row_loss(
                    o.row(r),
                    targets.row(r),
                    origin_of(train, r),
                    cfg.smooth_l1_beta,
                )
            })
            .collect()
    };

    let mut adam = AdamState::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut log = Vec::with_capacity(cfg.stage2_epochs);
    for epoch in 1..=cfg.stage2_epochs {
        adam.config.lr = cfg.lr_for_epoch(epoch);
        let order = epoch_order(&mut rng, train.len());
        let mut total = 0.0;
        let mut winners = vec![0usize; k];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n = chunk.len();
            let idx: Arc<[usize]> = chunk.to_vec().into();
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &model.params, is_new, |_| true);
            let all = g.constant(feats.clone());
            let a = g.gather_rows(all, idx.clone())?;
            let outs: Vec<_> = (1..k)
                .map(|m| decode(&mut g, &p, &model.config, m, a))
                .collect::<Result<_>>()?;

            // per-scene winner by smooth-L1, lowest index on ties
            let mut win = vec![0usize; n];
            let mut batch_loss = 0.0;
            for (r, &s) in chunk.iter().enumerate() {
                let mut best = if cfg.wta_includes_decoder0 {
                    (base_losses[s], 0)
                } else {
                    (f64::INFINITY, usize::MAX)
                };
                for (j, &o) in outs.iter().enumerate() {
                    let l = row_loss(
                        g.value(o).row(r),
                        targets.row(s),
                        origin_of(train, s),
                        cfg.smooth_l1_beta,
                    );
                    if l < best.0 || best.1 == usize::MAX {
                        best = (l, j + 1);
                    }
                }
                if !best.0.is_finite() {
                    return Err(Error::Numerical(format!(
                        "stage 2 epoch {epoch} batch {b}: loss is {}",
                        best.0
                    )));
                }
                win[r] = best.1;
                winners[best.1] += 1;
                batch_loss += best.0;
            }
            total += batch_loss;

            let mut terms = Vec::new();
            for (j, &o) in outs.iter().enumerate() {
                let rows: Vec<usize> = (0..n).filter(|&r| win[r] == j + 1).collect();
                if rows.is_empty() {
                    continue;
                }
                let mut tgt = Array2::zeros(rows.len(), targets.cols());
                for (q, &r) in rows.iter().enumerate() {
                    let s = chunk[r];
                    tgt.row_mut(q).copy_from_slice(targets.row(s));
                    let origin = origin_of(train, s);
                    for (c, v) in tgt.row_mut(q).iter_mut().enumerate() {
                        *v -= if c % 2 == 0 { origin.x } else { origin.y };
                    }
                }
                let picked = g.gather_rows(o, rows.clone().into())?;
                let l = g.smooth_l1(picked, &tgt, cfg.smooth_l1_beta)?;
                terms.push(g.scale(l, rows.len() as f64 / n as f64));
            }
            let grads = match terms.split_first() {
                Some((&first, rest)) => {
                    let mut loss = first;
                    for &t in rest {
                        loss = g.add(loss, t)?;
                    }
                    p.gradients(&g, &g.backward(loss)?)
                }
                None => {
                    let zero = g.constant(Array2::scalar(0.0));
                    p.gradients(&g, &g.backward(zero)?)
                }
            };
            adam.step(&mut model.params, &grads, &mask)
                .map_err(|e| locate(e, &format!("stage 2 epoch {epoch} batch {b}")))?;
        }
        model.trained_epochs += 1;
        let rec = LogRecord {
            stage: 2,
            epoch,
            lr: adam.config.lr,
            train_loss: total / train.len() as f64,
            val_min_ade1: val_ade1(model, val)?,
            winners,
        };
        if let Some(o) = out {
            o.record(&rec, model)?;
        }
        log.push(rec);
    }
    Ok(log)
}

fn origin_of(scenes: &[PreparedScene], i: usize) -> crate::scene::Point {
    scenes[i].positions[0]
}

/// Smooth-L1 of an offsets row (relative to `origin`) against absolute target coordinates.
fn row_loss(offsets: &[f64], target: &[f64], origin: crate::scene::Point, beta: f64) -> f64 {
    let pred: Vec<f64> = offsets
        .iter()
        .enumerate()
        .map(|(c, v)| v + if c % 2 == 0 { origin.x } else { origin.y })
        .collect();
    let p = Array2::from_vec(1, pred.len(), pred).expect("row");
    let t = Array2::from_vec(1, target.len(), target.to_vec()).expect("row");
    smooth_l1_mean(&p, &t, beta)
}

/// Both stages in sequence.
pub fn train(
    mut model: ModelParams,
    train: &[PreparedScene],
    val: &[PreparedScene],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    let mut log = train_stage1(&mut model, train, val, cfg, out)?;
    log.extend(train_stage2(&mut model, train, val, cfg, out)?);
    Ok(TrainOutcome { model, log })
}

/// Per-decoder count of scenes each mode wins by smooth-L1 (evaluation mode).
pub fn winner_histogram(
    model: &ModelParams,
    scenes: &[PreparedScene],
    beta: f64,
) -> Result<Vec<usize>> {
    let preds = model.predict_with_attention(scenes, None)?;
    let mut hist = vec![0usize; model.config.modes];
    for ((p, _), s) in preds.iter().zip(scenes) {
        let gt = s
            .future
            .as_ref()
            .ok_or_else(|| Error::Data(format!("scene `{}` has no future", s.id)))?;
        hist[wta_loss(&p.modes, gt, beta)?.1] += 1;
    }
    Ok(hist)
}

/// Writes a training log as JSON lines.
pub fn write_log(path: impl AsRef<Path>, log: &[LogRecord]) -> Result<()> {
    let mut f = File::create(path)?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Prefixes a numerical failure with where it happened.
fn locate(e: Error, at: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{at}: {m}")),
        other => other,
    }
}
