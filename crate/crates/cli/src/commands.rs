use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crat_core::experiment::{run_experiment, Sample};
use crat_core::metrics::{evaluate, MetricReport};
use crat_core::model::{decoder_prefix, ModelConfig, ModelParams, Predictor};
use crat_core::plot::{experiment_chart_svg, metrics_chart_svg, scene_svg};
use crat_core::scene::{
    generate_synthetic, load_dataset, load_scene_csv, save_manifest, save_scene_csv, ManifestEntry,
    PreparedScene, Scene, Split,
};
use crat_core::training::{train, TrainOutput};

use crate::config::RunConfig;

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn data_error(msg: String) -> crat_core::Error {
    crat_core::Error::Data(msg)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenes_dir = out.join("scenes");
    fs::create_dir_all(&scenes_dir)
        .with_context(|| format!("creating {}", scenes_dir.display()))?;
    let mut entries = Vec::new();
    for split in SPLITS {
        for s in generate_synthetic(&cfg.data.synthetic(split)) {
            let file = format!("scenes/{}.csv", s.scene.id);
            save_scene_csv(&s.scene, out.join(&file))?;
            entries.push(ManifestEntry {
                file,
                split,
                kind: s.kind.to_string(),
                causal_track: s.causal_track,
                label: s.label,
            });
        }
    }
    save_manifest(out, &entries)?;
    cfg.write_resolved(out, "gen-data.toml")?;
    println!(
        "wrote {} {} scenes ({} train, {} val, {} test) to {}",
        entries.len(),
        cfg.data.kind,
        cfg.data.train,
        cfg.data.val,
        cfg.data.test,
        out.display()
    );
    Ok(())
}

fn load_split(
    data: &Path,
    split: Split,
    model: &ModelConfig,
) -> Result<Vec<(Scene, ManifestEntry)>> {
    let rows = load_dataset(data, split)?;
    if let Some((s, _)) = rows.iter().find(|(s, _)| {
        s.history_steps != model.history_steps || s.future_steps != model.future_steps
    }) {
        return Err(data_error(format!(
            "scene `{}` spans {}+{} steps, the model expects {}+{}",
            s.id, s.history_steps, s.future_steps, model.history_steps, model.future_steps
        ))
        .into());
    }
    Ok(rows)
}

fn prepared(rows: &[(Scene, ManifestEntry)]) -> Vec<PreparedScene> {
    rows.iter()
        .map(|(s, _)| PreparedScene::from_scene(s))
        .collect()
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train_rows = load_split(data, Split::Train, &cfg.model)?;
    if train_rows.is_empty() {
        return Err(data_error(format!("no train scenes in {}", data.display())).into());
    }
    let val_rows = load_split(data, Split::Val, &cfg.model)?;
    cfg.write_resolved(out, "train.toml")?;
    let model = ModelParams::init(cfg.model.clone(), cfg.training.seed)?;
    let output = TrainOutput::new(out)?;
    let outcome = train(
        model,
        &prepared(&train_rows),
        &prepared(&val_rows),
        &cfg.training,
        Some(&output),
    )?;
    let path = out.join("model.ckpt");
    outcome.model.save(&path)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "stage {} epoch {}: train loss {:.5}, val minADE@1 {}",
            last.stage,
            last.epoch,
            last.train_loss,
            last.val_min_ade1
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    println!("saved {}", path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams> {
    if !path.is_file() {
        return Err(
            crat_core::Error::Checkpoint(format!("no checkpoint at {}", path.display())).into(),
        );
    }
    ModelParams::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Loads a checkpoint whose architecture must match the configured one.
fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let m = load_model(path)?;
    if &m.config != expected {
        return Err(crat_core::Error::Checkpoint(format!(
            "{} holds a different architecture than the configuration ({} vs {} parameters)",
            path.display(),
            m.config.parameter_count(),
            expected.parameter_count()
        ))
        .into());
    }
    Ok(m)
}

fn model_for(cfg: &RunConfig, checkpoint: &Path, strict: bool) -> Result<ModelParams> {
    if strict {
        load_model_expecting(checkpoint, &cfg.model)
    } else {
        load_model(checkpoint)
    }
}

pub fn eval_cmd(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    strict: bool,
) -> Result<()> {
    let model = model_for(cfg, checkpoint, strict)?;
    let rows = load_split(data, cfg.eval.split, &model.config)?;
    let scenes = prepared(&rows);
    if let Some(&k) = cfg
        .eval
        .k
        .iter()
        .find(|&&k| k == 0 || k > model.num_modes())
    {
        return Err(crat_core::Error::Config(format!(
            "k = {k} is outside 1..={} for this checkpoint",
            model.num_modes()
        ))
        .into());
    }
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for &k in &cfg.eval.k {
        let r = evaluate(&model, &scenes, k)?;
        println!("{} {r}", cfg.eval.split);
        csv.push_str(&r.csv_row(cfg.eval.split.name()));
        csv.push('\n');
    }
    write_file(out, &csv)?;
    cfg.write_resolved(parent(out), "eval.toml")?;
    Ok(())
}

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::create_dir_all(parent(path))?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Scenes named on the command line, or a split of a dataset directory.
fn input_scenes(
    files: &[PathBuf],
    data: Option<&Path>,
    split: Split,
    model: &ModelConfig,
) -> Result<Vec<Scene>> {
    match (files.is_empty(), data) {
        (false, None) => files
            .iter()
            .map(|f| {
                let s = load_scene_csv(f).with_context(|| format!("reading {}", f.display()))?;
                if s.history_steps != model.history_steps {
                    return Err(data_error(format!(
                        "{} has {} history steps, the model expects {}",
                        f.display(),
                        s.history_steps,
                        model.history_steps
                    ))
                    .into());
                }
                Ok(s)
            })
            .collect(),
        (true, Some(d)) => Ok(load_split(d, split, model)?
            .into_iter()
            .map(|(s, _)| s)
            .collect()),
        _ => Err(crat_core::Error::Config("pass either scene files or --data".into()).into()),
    }
}

pub fn predict_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    files: &[PathBuf],
    data: Option<&Path>,
    split: Split,
    out: &Path,
    strict: bool,
) -> Result<()> {
    let model = model_for(cfg, checkpoint, strict)?;
    let scenes = input_scenes(files, data, split, &model.config)?;
    let prepared: Vec<PreparedScene> = scenes.iter().map(PreparedScene::from_scene).collect();
    let preds = model.predict(&prepared)?;
    fs::create_dir_all(out)?;
    for (s, p) in scenes.iter().zip(&preds) {
        let mut csv = String::from("mode,t,x,y\n");
        for (m, traj) in p.to_raw().iter().enumerate() {
            for (t, q) in traj.iter().enumerate() {
                let _ = writeln!(csv, "{m},{},{},{}", t + 1, q.x, q.y);
            }
        }
        write_file(&out.join(format!("{}.csv", s.id)), &csv)?;
    }
    cfg.write_resolved(out, "predict.toml")?;
    println!(
        "wrote {} predictions with {} modes to {}",
        preds.len(),
        model.num_modes(),
        out.display()
    );
    Ok(())
}

fn samples(rows: Vec<(Scene, ManifestEntry)>) -> Vec<Sample> {
    rows.into_iter()
        .map(|(scene, e)| Sample {
            scene,
            causal_track: e.causal_track,
        })
        .collect()
}

pub fn experiment_cmd(cfg: &RunConfig, data: &Path, selector: &Path, out: &Path) -> Result<()> {
    let selector = load_model(selector)?;
    let p = &cfg.experiment.predictor;
    let train_set = samples(load_split(data, Split::Train, p)?);
    let val_set = samples(load_split(data, Split::Val, p)?);
    cfg.write_resolved(out, "select-experiment.toml")?;
    let report = run_experiment(&selector, &train_set, &val_set, &cfg.experiment)?;
    write_file(&out.join("experiment.csv"), &report.to_csv())?;
    write_file(&out.join("experiment.svg"), &experiment_chart_svg(&report))?;
    let summary = report.summary();
    write_file(&out.join("experiment_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn plot_scenes(
    cfg: &RunConfig,
    files: &[PathBuf],
    data: Option<&Path>,
    split: Split,
    limit: usize,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let model = checkpoint.map(load_model).transpose()?;
    let mcfg = model.as_ref().map_or(&cfg.model, |m| &m.config);
    let mut scenes = input_scenes(files, data, split, mcfg)?;
    scenes.truncate(limit);
    let preds = match &model {
        Some(m) => {
            let prepared: Vec<PreparedScene> =
                scenes.iter().map(PreparedScene::from_scene).collect();
            m.predict(&prepared)?.into_iter().map(Some).collect()
        }
        None => vec![None; scenes.len()],
    };
    fs::create_dir_all(out)?;
    for (s, p) in scenes.iter().zip(&preds) {
        write_file(
            &out.join(format!("{}.svg", s.id)),
            &scene_svg(s, p.as_ref()),
        )?;
    }
    println!("wrote {} scene plots to {}", scenes.len(), out.display());
    Ok(())
}

pub fn plot_metrics(metrics: &Path, out: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(metrics)
        .with_context(|| format!("reading {}", metrics.display()))?;
    let mut reports = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 6 {
            bail!(data_error(format!(
                "{}: expected the columns {}",
                metrics.display(),
                MetricReport::CSV_HEADER
            )));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|e| data_error(format!("{}: column {i}: {e}", metrics.display())).into())
        };
        reports.push((
            row[0].to_string(),
            MetricReport {
                k: num(1)? as usize,
                min_ade: num(2)?,
                min_fde: num(3)?,
                miss_rate: num(4)?,
                n_sequences: num(5)? as usize,
            },
        ));
    }
    write_file(out, &metrics_chart_svg(&reports))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Per-block parameter counts of `cfg` and the attention-free total.
pub fn param_breakdown(cfg: &ModelConfig) -> (Vec<(String, usize)>, usize, usize) {
    let specs = cfg.param_specs();
    let sum = |pred: &dyn Fn(&str) -> bool| {
        specs
            .iter()
            .filter(|s| pred(&s.name))
            .map(|s| s.len())
            .sum::<usize>()
    };
    let mut rows = vec![(
        "LSTM encoder".to_string(),
        sum(&|n| n.starts_with("encoder/")),
    )];
    for l in 0..cfg.gnn_layers {
        let prefix = format!("gnn{l}/");
        rows.push((
            format!("CGConv layer {l}"),
            sum(&|n| n.starts_with(&prefix) && !n.contains("/bn_")),
        ));
    }
    let norm = sum(&|n| n.starts_with("gnn") && n.contains("/bn_"));
    rows.push(("batch normalization".to_string(), norm));
    if cfg.use_attention {
        rows.push((
            "multi-head self-attention".to_string(),
            sum(&|n| n.starts_with("attention/")),
        ));
    }
    let per_decoder = sum(&|n| n.starts_with(&decoder_prefix(0)));
    rows.push((
        format!("decoders ({} x {})", cfg.modes, thousands(per_decoder)),
        per_decoder * cfg.modes,
    ));
    let total = cfg.parameter_count();
    let free = ModelConfig {
        use_attention: false,
        ..cfg.clone()
    }
    .parameter_count();
    (rows, total, free)
}

pub fn param_count(cfg: &RunConfig) -> Result<()> {
    cfg.model.validate()?;
    let (rows, total, free) = param_breakdown(&cfg.model);
    for (name, n) in &rows {
        println!("{name:<32} {:>10}", thousands(*n));
    }
    println!("{:<32} {:>10}", "total", thousands(total));
    println!("{:<32} {:>10}", "attention-free variant", thousands(free));
    Ok(())
}
