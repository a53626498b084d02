//! Attention weights as an interaction score: reduce each scene to the
//! target plus `L_s` selected vehicles, retrain an independent predictor on
//! the reduced data and compare its metrics with a full-scene reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{ModelConfig, ModelParams};
use crate::scene::{PreparedScene, Scene};
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Euclidean,
    Attention,
    /// Generator-labelled causal vehicle first, then nearest; synthetic data only.
    OracleCausal,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Euclidean => "euclidean",
            Strategy::Attention => "attention",
            Strategy::OracleCausal => "oracle-causal",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Strategy::Euclidean),
            "attention" => Ok(Strategy::Attention),
            "oracle-causal" => Ok(Strategy::OracleCausal),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (euclidean, attention, oracle-causal)"
            ))),
        }
    }
}

/// Budgets accepted for `L_s`.
pub const BUDGETS: [usize; 5] = [1, 3, 5, 7, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionBudget {
    pub l_s: usize,
    pub strategy: Strategy,
}

impl SelectionBudget {
    pub fn new(l_s: usize, strategy: Strategy) -> Result<Self> {
        if !BUDGETS.contains(&l_s) {
            return Err(Error::Config(format!(
                "L_s = {l_s} is not one of {BUDGETS:?}"
            )));
        }
        Ok(Self { l_s, strategy })
    }
}

/// A reduced scene and the bookkeeping behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub scene: Scene,
    /// Indices of the kept other vehicles in the source scene, best first.
    pub kept: Vec<usize>,
    /// The cut fell between equal scores and the lower index was preferred.
    pub tie: bool,
}

/// Indices `1..` of the `l_s` best scores (largest first); ties go to the
/// lower index. `scores[0]` (the target) is ignored.
pub fn top_others(scores: &[f64], l_s: usize) -> (Vec<usize>, bool) {
    let mut idx: Vec<usize> = (1..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let keep = l_s.min(idx.len());
    let tie = keep > 0 && keep < idx.len() && scores[idx[keep - 1]] == scores[idx[keep]];
    idx.truncate(keep);
    (idx, tie)
}

fn reduce(scene: &Scene, kept: Vec<usize>, tie: bool) -> Selection {
    Selection {
        scene: scene.with_vehicles(&kept),
        kept,
        tie,
    }
}

/// Keeps the target and the `l_s` vehicles closest to it at `t = 0`.
pub fn euclidean_select(scene: &Scene, l_s: usize) -> Selection {
    let local = scene.to_target_frame();
    let scores: Vec<f64> = local
        .current_positions()
        .iter()
        .map(|p| -p.norm())
        .collect();
    let (kept, tie) = top_others(&scores, l_s);
    reduce(scene, kept, tie)
}

fn check_selector(model: &ModelParams) -> Result<()> {
    if !model.config.use_attention {
        return Err(Error::Config(
            "selector model has no attention module".into(),
        ));
    }
    if model.trained_epochs == 0 {
        return Err(Error::Config("selector model is untrained".into()));
    }
    Ok(())
}

/// Keeps the target and the `l_s` vehicles with the highest head-averaged
/// attention weight in the target's row. Only `t <= 0` data is consulted.
pub fn attention_select(scene: &Scene, l_s: usize, model: &ModelParams) -> Result<Selection> {
    check_selector(model)?;
    Ok(
        attention_select_many(std::slice::from_ref(scene), l_s, model)?
            .pop()
            .expect("one scene in, one out"),
    )
}

/// Batched [`attention_select`].
pub fn attention_select_many(
    scenes: &[Scene],
    l_s: usize,
    model: &ModelParams,
) -> Result<Vec<Selection>> {
    check_selector(model)?;
    let prepared: Vec<PreparedScene> = scenes
        .iter()
        .map(|s| PreparedScene::from_scene(&s.without_future()))
        .collect();
    let records = model.predict_with_attention(&prepared, Some(1))?;
    Ok(scenes
        .iter()
        .zip(records)
        .map(|(scene, (_, rec))| {
            let rec = rec.expect("attention enabled");
            let (kept, tie) = top_others(rec.mean.row(0), l_s);
            reduce(scene, kept, tie)
        })
        .collect())
}

/// Keeps the labelled causal vehicle (if present) and fills the rest of the
/// budget by distance.
pub fn oracle_select(scene: &Scene, l_s: usize, causal: Option<&str>) -> Selection {
    let local = scene.to_target_frame();
    let causal_idx = causal.and_then(|c| {
        scene
            .tracks
            .iter()
            .skip(1)
            .position(|t| t.id == c)
            .map(|i| i + 1)
    });
    let scores: Vec<f64> = local
        .current_positions()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if Some(i) == causal_idx {
                f64::INFINITY
            } else {
                -p.norm()
            }
        })
        .collect();
    let (kept, tie) = top_others(&scores, l_s);
    reduce(scene, kept, tie)
}

/// A scene with its generator label, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub causal_track: Option<String>,
}

fn select_all(
    samples: &[Sample],
    budget: SelectionBudget,
    selector: &ModelParams,
) -> Result<Vec<Selection>> {
    match budget.strategy {
        Strategy::Euclidean => Ok(samples
            .iter()
            .map(|s| euclidean_select(&s.scene, budget.l_s))
            .collect()),
        Strategy::Attention => {
            let scenes: Vec<Scene> = samples.iter().map(|s| s.scene.clone()).collect();
            attention_select_many(&scenes, budget.l_s, selector)
        }
        Strategy::OracleCausal => Ok(samples
            .iter()
            .map(|s| oracle_select(&s.scene, budget.l_s, s.causal_track.as_deref()))
            .collect()),
    }
}

/// How often a strategy keeps the labelled causal vehicle at `L_s = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickRate {
    pub strategy: String,
    pub hits: usize,
    pub labelled: usize,
    pub rate: f64,
    /// Scenes where the decision fell to the tie rule.
    pub ties: usize,
}

/// Share of labelled scenes whose single kept vehicle is the causal one.
pub fn causal_pick_rate(
    samples: &[Sample],
    strategy: Strategy,
    selector: &ModelParams,
) -> Result<PickRate> {
    let budget = SelectionBudget::new(1, strategy)?;
    let labelled: Vec<Sample> = samples
        .iter()
        .filter(|s| s.causal_track.is_some())
        .cloned()
        .collect();
    if labelled.is_empty() {
        return Err(Error::Data("no scene carries a causal label".into()));
    }
    let sel = select_all(&labelled, budget, selector)?;
    let hits = sel
        .iter()
        .zip(&labelled)
        .filter(|(sel, s)| {
            sel.kept
                .first()
                .is_some_and(|&i| Some(&s.scene.tracks[i].id) == s.causal_track.as_ref())
        })
        .count();
    Ok(PickRate {
        strategy: strategy.name().into(),
        hits,
        labelled: labelled.len(),
        rate: hits as f64 / labelled.len() as f64,
        ties: sel.iter().filter(|s| s.tie).count(),
    })
}

/// Expected pick rate of a uniformly random single-vehicle selector.
pub fn chance_pick_rate(samples: &[Sample]) -> f64 {
    let labelled: Vec<&Sample> = samples
        .iter()
        .filter(|s| s.causal_track.is_some())
        .collect();
    if labelled.is_empty() {
        return 0.0;
    }
    labelled
        .iter()
        .map(|s| 1.0 / (s.scene.num_vehicles() - 1).max(1) as f64)
        .sum::<f64>()
        / labelled.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub budgets: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Independent predictor; must not use attention.
    pub predictor: ModelConfig,
    pub training: TrainConfig,
    /// Modes scored in the table.
    pub eval_k: usize,
    /// Threads running grid cells; results do not depend on it.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            budgets: vec![1, 3, 5],
            strategies: vec![Strategy::Euclidean, Strategy::Attention],
            seeds: vec![0, 1, 2],
            predictor: ModelConfig {
                use_attention: false,
                ..ModelConfig::default()
            },
            training: TrainConfig::default(),
            eval_k: 6,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for &l in &self.budgets {
            SelectionBudget::new(l, Strategy::Euclidean)?;
        }
        if self.seeds.is_empty() || self.strategies.is_empty() || self.budgets.is_empty() {
            return Err(Error::Config(
                "budgets, strategies and seeds must be non-empty".into(),
            ));
        }
        if self.predictor.use_attention {
            return Err(Error::Config(
                "the independent predictor must be attention-free".into(),
            ));
        }
        self.predictor.validate()?;
        self.training.validate()?;
        if self.eval_k == 0 || self.eval_k > self.predictor.modes {
            return Err(Error::Config(format!(
                "eval_k = {} must lie in 1..={}",
                self.eval_k, self.predictor.modes
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

/// One cell of the comparison table. The reference run has no strategy or budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub strategy: Option<Strategy>,
    pub l_s: Option<usize>,
    pub seed: u64,
    pub metrics: MetricReport,
    pub delta_min_ade: f64,
    pub delta_min_fde: f64,
    pub delta_miss_rate: f64,
}

impl ExperimentRow {
    pub fn strategy_name(&self) -> &'static str {
        self.strategy.map_or("reference", Strategy::name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub pick_rates: Vec<PickRate>,
    pub chance_pick_rate: f64,
    pub eval_k: usize,
}

impl ExperimentReport {
    pub fn csv_header(&self) -> String {
        let k = self.eval_k;
        format!(
            "strategy,L_s,seed,minADE@{k},minFDE@{k},MR@{k},delta_minADE@{k},delta_minFDE@{k},delta_MR@{k}"
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.csv_header();
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.strategy_name(),
                r.l_s.map_or(String::new(), |l| l.to_string()),
                r.seed,
                r.metrics.min_ade,
                r.metrics.min_fde,
                r.metrics.miss_rate,
                r.delta_min_ade,
                r.delta_min_fde,
                r.delta_miss_rate
            ));
        }
        s
    }

    /// Seed-averaged `(minADE, minFDE, MR)` of one grid cell.
    pub fn mean_metrics(&self, strategy: Strategy, l_s: usize) -> Option<(f64, f64, f64)> {
        let cells: Vec<&ExperimentRow> = self
            .rows
            .iter()
            .filter(|r| r.strategy == Some(strategy) && r.l_s == Some(l_s))
            .collect();
        if cells.is_empty() {
            return None;
        }
        let n = cells.len() as f64;
        let sum =
            |f: fn(&MetricReport) -> f64| cells.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Some((sum(|m| m.min_ade), sum(|m| m.min_fde), sum(|m| m.miss_rate)))
    }

    /// Plain-text summary with the predictor note, pick rates and seed means.
    pub fn summary(&self) -> String {
        let k = self.eval_k;
        let mut s = String::new();
        s.push_str("# Interaction-score experiment\n");
        s.push_str(
            "# independent predictor: in-repo attention-free variant (LSTM + GNN + decoders), retrained per cell\n",
        );
        s.push_str(
            "# deltas are cell minus full-scene reference of the same seed; positive means worse\n",
        );
        for p in &self.pick_rates {
            s.push_str(&format!(
                "pick rate L_s=1 {}: {}/{} = {:.3} (ties {})\n",
                p.strategy, p.hits, p.labelled, p.rate, p.ties
            ));
        }
        s.push_str(&format!(
            "pick rate L_s=1 random: {:.3}\n",
            self.chance_pick_rate
        ));
        let mut cells: Vec<(Strategy, usize)> = self
            .rows
            .iter()
            .filter_map(|r| Some((r.strategy?, r.l_s?)))
            .collect();
        cells.sort();
        cells.dedup();
        for (st, l) in cells {
            let (a, f, m) = self.mean_metrics(st, l).expect("cell present");
            s.push_str(&format!(
                "mean {st} L_s={l}: minADE@{k}={a:.4} minFDE@{k}={f:.4} MR@{k}={m:.4}\n"
            ));
        }
        s
    }
}

fn prepare(scenes: &[Scene]) -> Vec<PreparedScene> {
    scenes.iter().map(PreparedScene::from_scene).collect()
}

fn train_and_score(
    cfg: &ExperimentConfig,
    seed: u64,
    train_set: &[Scene],
    val_set: &[Scene],
) -> Result<MetricReport> {
    let model = ModelParams::init(cfg.predictor.clone(), seed)?;
    let tc = TrainConfig {
        seed,
        ..cfg.training.clone()
    };
    let out = train(model, &prepare(train_set), &[], &tc, None)?;
    evaluate(&out.model, &prepare(val_set), cfg.eval_k)
}

struct Cell {
    budget: Option<SelectionBudget>,
    seed: u64,
    train: Vec<Scene>,
    val: Vec<Scene>,
}

/// Runs the reference and every `(strategy, L_s, seed)` cell. A cell whose
/// reduced data equals the full data reuses the reference metrics, which a
/// retrain would reproduce bit for bit.
pub fn run_experiment(
    selector: &ModelParams,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "experiment needs non-empty train and validation splits".into(),
        ));
    }
    if let Some(s) = val_set
        .iter()
        .chain(train_set)
        .find(|s| !s.scene.has_future())
    {
        return Err(Error::Data(format!("scene `{}` has no future", s.scene.id)));
    }
    if cfg.strategies.contains(&Strategy::Attention) {
        check_selector(selector)?;
    }

    let full_train: Vec<Scene> = train_set.iter().map(|s| s.scene.clone()).collect();
    let full_val: Vec<Scene> = val_set.iter().map(|s| s.scene.clone()).collect();
    let mut budgets = Vec::new();
    for &st in &cfg.strategies {
        for &l in &cfg.budgets {
            budgets.push(SelectionBudget::new(l, st)?);
        }
    }
    let mut reduced = Vec::with_capacity(budgets.len());
    for &b in &budgets {
        let tr: Vec<Scene> = select_all(train_set, b, selector)?
            .into_iter()
            .map(|s| s.scene)
            .collect();
        let va: Vec<Scene> = select_all(val_set, b, selector)?
            .into_iter()
            .map(|s| s.scene)
            .collect();
        reduced.push((b, tr, va));
    }

    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        cells.push(Cell {
            budget: None,
            seed,
            train: full_train.clone(),
            val: full_val.clone(),
        });
        for (b, tr, va) in &reduced {
            if *tr != full_train || *va != full_val {
                cells.push(Cell {
                    budget: Some(*b),
                    seed,
                    train: tr.clone(),
                    val: va.clone(),
                });
            }
        }
    }
    let results = run_cells(cfg, &cells)?;

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let reference = cells
            .iter()
            .zip(&results)
            .find(|(c, _)| c.seed == seed && c.budget.is_none())
            .map(|(_, r)| r.clone())
            .expect("reference cell per seed");
        let row = |budget: Option<SelectionBudget>, m: MetricReport| ExperimentRow {
            strategy: budget.map(|b| b.strategy),
            l_s: budget.map(|b| b.l_s),
            seed,
            delta_min_ade: m.min_ade - reference.min_ade,
            delta_min_fde: m.min_fde - reference.min_fde,
            delta_miss_rate: m.miss_rate - reference.miss_rate,
            metrics: m,
        };
        rows.push(row(None, reference.clone()));
        for &b in &budgets {
            let m = cells
                .iter()
                .zip(&results)
                .find(|(c, _)| c.seed == seed && c.budget == Some(b))
                .map_or_else(|| reference.clone(), |(_, r)| r.clone());
            rows.push(row(Some(b), m));
        }
    }

    let mut pick_rates = Vec::new();
    if val_set.iter().any(|s| s.causal_track.is_some()) {
        for &st in &cfg.strategies {
            pick_rates.push(causal_pick_rate(val_set, st, selector)?);
        }
    }
    Ok(ExperimentReport {
        rows,
        pick_rates,
        chance_pick_rate: chance_pick_rate(val_set),
        eval_k: cfg.eval_k,
    })
}

fn run_cells(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<Vec<MetricReport>> {
    let score = |c: &Cell| train_and_score(cfg, c.seed, &c.train, &c.val);
    if cfg.workers <= 1 || cells.len() <= 1 {
        return cells.iter().map(score).collect();
    }
    let workers = cfg.workers.min(cells.len());
    let mut slots: Vec<Option<Result<MetricReport>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let score = &score;
                scope.spawn(move || {
                    (w..cells.len())
                        .step_by(workers)
                        .map(|i| (i, score(&cells[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("experiment worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every cell scored"))
        .collect()
}
