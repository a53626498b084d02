//! Static SVG figures: scenes with predictions and grouped metric bars.

use std::fmt::Write as _;

use crate::experiment::{ExperimentReport, Strategy};
use crate::metrics::MetricReport;
use crate::model::PredictionSet;
use crate::scene::{array_to_points, Point, Scene};

pub const HISTORY_COLOR: &str = "#1f77b4";
pub const GROUND_TRUTH_COLOR: &str = "#2ca02c";
pub const BEST_MODE_COLOR: &str = "#ff7f0e";
pub const MODE_COLOR: &str = "#d62728";
pub const OTHER_COLOR: &str = "#9467bd";

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Maps target-local metres to pixels with `+y` up and equal axis scales.
struct View {
    min: Point,
    scale: f64,
    height: f64,
    margin: f64,
}

impl View {
    fn fit(points: &[Point], size: f64, margin: f64) -> Self {
        let (mut lo, mut hi) = (Point::new(-1.0, -1.0), Point::new(1.0, 1.0));
        for p in points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()) {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let span = (hi.x - lo.x).max(hi.y - lo.y).max(1e-9);
        let centre = Point::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0);
        Self {
            min: Point::new(centre.x - span / 2.0, centre.y - span / 2.0),
            scale: (size - 2.0 * margin) / span,
            height: size,
            margin,
        }
    }

    fn px(&self, p: Point) -> (f64, f64) {
        (
            self.margin + (p.x - self.min.x) * self.scale,
            self.height - self.margin - (p.y - self.min.y) * self.scale,
        )
    }

    fn polyline(&self, out: &mut String, class: &str, color: &str, width: f64, pts: &[Point]) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-linejoin="round"/>"#,
            coords.join(" ")
        );
    }

    fn dot(&self, out: &mut String, class: &str, color: &str, p: Point) {
        let (x, y) = self.px(p);
        let _ = writeln!(
            out,
            r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#
        );
    }
}

fn observed(track: &crate::scene::Track, lo: i32, hi: i32) -> Vec<Point> {
    (lo..=hi).filter_map(|t| track.at(t)).collect()
}

/// Renders a scene in the target frame: target history, ground truth (when
/// present), every predicted mode and the other vehicles' histories.
pub fn scene_svg(scene: &Scene, prediction: Option<&PredictionSet>) -> String {
    const SIZE: f64 = 640.0;
    let local = scene.to_target_frame();
    let lo = local.history_start();
    let target = local.target();
    let history = observed(target, lo, 0);
    let future = local.target_future();
    let modes: Vec<Vec<Point>> = prediction
        .map(|p| p.modes.iter().map(array_to_points).collect())
        .unwrap_or_default();
    let others: Vec<Vec<Point>> = local.tracks[1..]
        .iter()
        .map(|t| observed(t, lo, 0))
        .collect();

    let mut all: Vec<Point> = history.clone();
    all.extend(future.iter().flatten());
    all.extend(modes.iter().flatten());
    all.extend(others.iter().flatten());
    let view = View::fit(&all, SIZE, 24.0);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(&scene.id));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for o in &others {
        view.polyline(&mut out, "other", OTHER_COLOR, 2.0, o);
        if let Some(&p) = o.last() {
            view.dot(&mut out, "other", OTHER_COLOR, p);
        }
    }
    if let Some(f) = &future {
        let mut gt = vec![Point::ORIGIN];
        gt.extend(f);
        view.polyline(&mut out, "ground-truth", GROUND_TRUTH_COLOR, 2.5, &gt);
    }
    for (m, pts) in modes.iter().enumerate().rev() {
        let mut line = vec![Point::ORIGIN];
        line.extend(pts);
        let color = if m == 0 { BEST_MODE_COLOR } else { MODE_COLOR };
        view.polyline(&mut out, &format!("mode mode-{m}"), color, 2.0, &line);
    }
    view.polyline(&mut out, "history", HISTORY_COLOR, 2.5, &history);
    view.dot(&mut out, "history", HISTORY_COLOR, Point::ORIGIN);
    let legend = [
        ("history", HISTORY_COLOR),
        ("ground truth", GROUND_TRUTH_COLOR),
        ("mode 0", BEST_MODE_COLOR),
        ("other modes", MODE_COLOR),
        ("other vehicles", OTHER_COLOR),
    ];
    for (i, (label, color)) in legend.iter().enumerate() {
        let y = 16.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="8" y="{y}" font-family="sans-serif" font-size="11" fill="{color}">{label}</text>"#
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One bar group: a label and `(series, value)` pairs.
pub type BarGroup = (String, Vec<(String, f64)>);

/// Grouped bar chart with a zero baseline; negative values hang below it.
pub fn bar_chart_svg(title: &str, y_label: &str, groups: &[BarGroup]) -> String {
    let mut out = String::new();
    let (w, h) = (560.0, 360.0);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut out, 0.0, w, h, title, y_label, groups);
    out.push_str("</svg>\n");
    out
}

fn panel(
    out: &mut String,
    x0: f64,
    w: f64,
    h: f64,
    title: &str,
    y_label: &str,
    groups: &[BarGroup],
) {
    let (left, right, top, bottom) = (x0 + 56.0, x0 + w - 12.0, 36.0, h - 48.0);
    let values: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.1.iter().map(|s| s.1))
        .filter(|v| v.is_finite())
        .collect();
    let hi = values.iter().copied().fold(0.0_f64, f64::max);
    let lo = values.iter().copied().fold(0.0_f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| bottom - (v - lo) / span * (bottom - top);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        x0 + 14.0,
        (top + bottom) / 2.0,
        x0 + 14.0,
        (top + bottom) / 2.0,
        escape(y_label)
    );
    for v in [lo, 0.0, hi] {
        let y = y_of(v);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            y + 3.0
        );
    }
    let zero = y_of(0.0);
    let _ = writeln!(
        out,
        r#"<line x1="{left:.1}" y1="{zero:.1}" x2="{right:.1}" y2="{zero:.1}" stroke="black"/>"#
    );
    if groups.is_empty() {
        return;
    }
    let mut series: Vec<&str> = Vec::new();
    for (_, s) in groups {
        for (name, _) in s {
            if !series.contains(&name.as_str()) {
                series.push(name);
            }
        }
    }
    let group_w = (right - left) / groups.len() as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (gi, (label, bars)) in groups.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (name, v) in bars {
            let si = series.iter().position(|s| s == name).expect("collected");
            let x = gx + si as f64 * bar_w;
            let v = if v.is_finite() { *v } else { 0.0 };
            let (y, hgt) = if v >= 0.0 {
                (y_of(v), zero - y_of(v))
            } else {
                (zero, y_of(v) - zero)
            };
            let _ = writeln!(
                out,
                r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{hgt:.2}" fill="{}"><title>{} {}: {v}</title></rect>"#,
                bar_w * 0.95,
                SERIES_COLORS[si % SERIES_COLORS.len()],
                escape(label),
                escape(name)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            bottom + 16.0,
            escape(label)
        );
    }
    for (si, name) in series.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            left + 90.0 * si as f64,
            h - 10.0,
            SERIES_COLORS[si % SERIES_COLORS.len()],
            escape(name)
        );
    }
}

/// Seed-averaged metric deltas per `L_s`, one panel per metric and one bar per strategy.
pub fn experiment_chart_svg(report: &ExperimentReport) -> String {
    let k = report.eval_k;
    let mut budgets: Vec<usize> = report.rows.iter().filter_map(|r| r.l_s).collect();
    budgets.sort_unstable();
    budgets.dedup();
    let mut strategies: Vec<Strategy> = report.rows.iter().filter_map(|r| r.strategy).collect();
    strategies.sort();
    strategies.dedup();
    let mean_delta = |st: Strategy, l: usize, f: fn(&crate::experiment::ExperimentRow) -> f64| {
        let cells: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.strategy == Some(st) && r.l_s == Some(l))
            .map(f)
            .collect();
        cells.iter().sum::<f64>() / cells.len().max(1) as f64
    };
    type Column = fn(&crate::experiment::ExperimentRow) -> f64;
    let metrics: [(String, Column); 3] = [
        (format!("minADE@{k}"), |r| r.delta_min_ade),
        (format!("minFDE@{k}"), |r| r.delta_min_fde),
        (format!("MR@{k}"), |r| r.delta_miss_rate),
    ];
    let (pw, h) = (360.0, 360.0);
    let w = pw * metrics.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (name, f)) in metrics.iter().enumerate() {
        let groups: Vec<BarGroup> = budgets
            .iter()
            .map(|&l| {
                (
                    format!("L_s={l}"),
                    strategies
                        .iter()
                        .map(|&st| (st.name().to_string(), mean_delta(st, l, *f)))
                        .collect(),
                )
            })
            .collect();
        panel(
            &mut out,
            pw * i as f64,
            pw,
            h,
            &format!("difference in {name} vs full scene"),
            "positive = degradation",
            &groups,
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bars of minADE, minFDE and MR for labelled reports.
pub fn metrics_chart_svg(reports: &[(String, MetricReport)]) -> String {
    let groups: Vec<BarGroup> = ["minADE", "minFDE", "MR"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            (
                name.to_string(),
                reports
                    .iter()
                    .map(|(label, r)| {
                        let v = [r.min_ade, r.min_fde, r.miss_rate][i];
                        (format!("{label} k={}", r.k), v)
                    })
                    .collect(),
            )
        })
        .collect();
    bar_chart_svg("evaluation metrics", "value", &groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, Predictor};
    use crate::scene::{generate_synthetic, PreparedScene, ScenarioKind, SyntheticConfig};

    fn parse(svg: &str) -> roxmltree::Document<'_> {
        roxmltree::Document::parse(svg).expect("valid XML")
    }

    fn count_class(doc: &roxmltree::Document<'_>, tag: &str, class: &str) -> usize {
        doc.descendants()
            .filter(|n| {
                n.has_tag_name(tag)
                    && n.attribute("class")
                        .is_some_and(|c| c.split(' ').any(|x| x == class))
            })
            .count()
    }

    #[test]
    fn scene_plot_has_every_mode_and_history() {
        let g = &generate_synthetic(&SyntheticConfig::new(ScenarioKind::LeaderFollower, 1, 2))[0];
        let model = ModelParams::init(
            ModelConfig {
                modes: 3,
                ..ModelConfig::with_hidden(8)
            },
            0,
        )
        .unwrap();
        let pred = model
            .predict(&[PreparedScene::from_scene(&g.scene)])
            .unwrap();
        let svg = scene_svg(&g.scene, Some(&pred[0]));
        let doc = parse(&svg);
        assert_eq!(count_class(&doc, "polyline", "mode"), 3);
        assert_eq!(count_class(&doc, "polyline", "history"), 1);
        assert_eq!(count_class(&doc, "polyline", "ground-truth"), 1);
        assert_eq!(
            count_class(&doc, "polyline", "other"),
            g.scene.num_vehicles() - 1
        );
        let mode0 = doc
            .descendants()
            .find(|n| n.attribute("class") == Some("mode mode-0"))
            .unwrap();
        assert_eq!(mode0.attribute("stroke"), Some(BEST_MODE_COLOR));
    }

    #[test]
    fn scene_plot_without_future_or_prediction() {
        let g = &generate_synthetic(&SyntheticConfig::new(ScenarioKind::ConstantVelocity, 1, 2))[0];
        let svg = scene_svg(&g.scene.without_future(), None);
        let doc = parse(&svg);
        assert_eq!(count_class(&doc, "polyline", "ground-truth"), 0);
        assert_eq!(count_class(&doc, "polyline", "history"), 1);
    }

    #[test]
    fn bar_chart_is_valid_and_escaped() {
        let svg = bar_chart_svg(
            "a < b & c",
            "m",
            &[
                ("g1".into(), vec![("x".into(), 1.0), ("y".into(), -0.5)]),
                (
                    "g2".into(),
                    vec![("x".into(), 0.25), ("y".into(), f64::NAN)],
                ),
            ],
        );
        let doc = parse(&svg);
        assert_eq!(count_class(&doc, "rect", "bar"), 4);
        assert!(svg.contains("a &lt; b &amp; c"));
        parse(&bar_chart_svg("empty", "", &[]));
    }

    #[test]
    fn metrics_chart_has_three_groups() {
        let r = MetricReport {
            k: 6,
            min_ade: 1.0,
            min_fde: 2.0,
            miss_rate: 0.3,
            n_sequences: 10,
        };
        let doc_src = metrics_chart_svg(&[("val".into(), r.clone()), ("test".into(), r)]);
        assert_eq!(count_class(&parse(&doc_src), "rect", "bar"), 6);
    }

    #[test]
    fn experiment_chart_has_a_bar_per_strategy_budget_and_metric() {
        use crate::experiment::{ExperimentReport, ExperimentRow};
        let m = MetricReport {
            k: 6,
            min_ade: 1.0,
            min_fde: 2.0,
            miss_rate: 0.1,
            n_sequences: 3,
        };
        let mut rows = Vec::new();
        for seed in 0..2 {
            rows.push(ExperimentRow {
                strategy: None,
                l_s: None,
                seed,
                metrics: m.clone(),
                delta_min_ade: 0.0,
                delta_min_fde: 0.0,
                delta_miss_rate: 0.0,
            });
            for st in [Strategy::Euclidean, Strategy::Attention] {
                for l in [1, 3] {
                    rows.push(ExperimentRow {
                        strategy: Some(st),
                        l_s: Some(l),
                        seed,
                        metrics: m.clone(),
                        delta_min_ade: 0.1 * l as f64,
                        delta_min_fde: -0.2,
                        delta_miss_rate: 0.0,
                    });
                }
            }
        }
        let report = ExperimentReport {
            rows,
            pick_rates: Vec::new(),
            chance_pick_rate: 0.25,
            eval_k: 6,
        };
        let svg = experiment_chart_svg(&report);
        assert_eq!(count_class(&parse(&svg), "rect", "bar"), 3 * 2 * 2);
    }
}
