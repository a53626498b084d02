use std::sync::Arc;

use crat_core::autograd::Graph;
use crat_core::experiment::euclidean_select;
use crat_core::gradcheck::{check_primitive, primitive_options, PRIMITIVES};
use crat_core::metrics::{evaluate_predictions, min_ade, min_fde, miss_rate, MISS_THRESHOLD};
use crat_core::model::{ModelConfig, ModelParams, PredictionSet, Predictor};
use crat_core::scene::{
    generate_synthetic, parse_scene_csv, points_to_array, write_scene_csv, Observation, Point,
    PreparedScene, RigidTransform, Role, ScenarioKind, Scene, SyntheticConfig, Track,
};
use crat_core::training::{smooth_l1, stage1_batch_loss, wta_loss};
use crat_core::Array2;
use proptest::prelude::*;

fn array(rows: usize, cols: usize, data: Vec<f64>) -> Array2 {
    Array2::from_vec(rows, cols, data).unwrap()
}

fn trajectory(t: usize) -> impl Strategy<Value = Array2> {
    prop::collection::vec(-50.0..50.0f64, t * 2).prop_map(move |d| array(t, 2, d))
}

/// `n` sequences of `k` predicted modes and a ground truth, all `t x 2`.
fn metric_case() -> impl Strategy<Value = (Vec<Vec<Array2>>, Vec<Array2>)> {
    (1usize..40, 1usize..7, 1usize..12).prop_flat_map(|(t, k, n)| {
        (
            prop::collection::vec(prop::collection::vec(trajectory(t), k), n),
            prop::collection::vec(trajectory(t), n),
        )
    })
}

fn naive_ade(p: &Array2, g: &Array2) -> f64 {
    let mut s = 0.0;
    for t in 0..g.rows() {
        let dx = p.get(t, 0) - g.get(t, 0);
        let dy = p.get(t, 1) - g.get(t, 1);
        s += (dx * dx + dy * dy).sqrt();
    }
    s / g.rows() as f64
}

fn naive_fde(p: &Array2, g: &Array2) -> f64 {
    let t = g.rows() - 1;
    let dx = p.get(t, 0) - g.get(t, 0);
    let dy = p.get(t, 1) - g.get(t, 1);
    (dx * dx + dy * dy).sqrt()
}

fn kind(i: usize) -> ScenarioKind {
    ScenarioKind::ALL[i % ScenarioKind::ALL.len()]
}

fn rigid(scene: &Scene, angle: f64, shift: Point) -> Scene {
    let mut s = scene.clone();
    for t in &mut s.tracks {
        *t = t.map_positions(|p| p.rotated(angle) + shift);
    }
    s
}

/// Straight-line vehicles from `(x, y, vx, vy)`; the first is the target.
fn straight_scene(motion: &[(f64, f64, f64, f64)]) -> Scene {
    let tracks = motion
        .iter()
        .enumerate()
        .map(|(i, &(x, y, vx, vy))| {
            let obs = (-19..=30)
                .map(|t| Observation {
                    t,
                    pos: Point::new(x + vx * t as f64 / 10.0, y + vy * t as f64 / 10.0),
                })
                .collect();
            let role = if i == 0 { Role::Target } else { Role::Other };
            Track::new(format!("v{i}"), role, obs).unwrap()
        })
        .collect();
    Scene::new("straight", tracks, 20, 30).unwrap()
}

fn small_model(modes: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        modes,
        history_steps: 20,
        ..ModelConfig::with_hidden(8)
    };
    ModelParams::init(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_equal_the_naive_oracle((preds, gts) in metric_case()) {
        let k = preds[0].len();
        let mut ade = 0.0;
        let mut fde = 0.0;
        let mut misses = 0usize;
        for (p, g) in preds.iter().zip(&gts) {
            let mut best_a = f64::INFINITY;
            let mut best_f = f64::INFINITY;
            for m in p {
                let a = naive_ade(m, g);
                let f = naive_fde(m, g);
                if a < best_a { best_a = a; }
                if f < best_f { best_f = f; }
            }
            prop_assert_eq!(min_ade(p, g), best_a);
            prop_assert_eq!(min_fde(p, g), best_f);
            ade += best_a;
            fde += best_f;
            if best_f >= MISS_THRESHOLD { misses += 1; }
        }
        let n = gts.len() as f64;
        prop_assert_eq!(miss_rate(&preds, &gts).unwrap(), misses as f64 / n);
        let sets: Vec<PredictionSet> = preds
            .iter()
            .map(|m| PredictionSet { modes: m.clone(), transform: RigidTransform::IDENTITY })
            .collect();
        let r = evaluate_predictions(&sets, &gts, k).unwrap();
        prop_assert_eq!(r.min_ade, ade / n);
        prop_assert_eq!(r.min_fde, fde / n);
        prop_assert_eq!(r.miss_rate, misses as f64 / n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        which in 0usize..PRIMITIVES.len(),
        rows in 1usize..6,
        cols in 2usize..7,
        seed in any::<u64>(),
    ) {
        let rep = check_primitive(PRIMITIVES[which], rows, cols, seed, primitive_options()).unwrap();
        prop_assert!(rep.passed, "{} {}x{}: {:?}", PRIMITIVES[which], rows, cols, rep.worst);
    }

    #[test]
    fn softmax_rows_are_distributions(
        (r, c, data, mask) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| (
            Just(r),
            Just(c),
            prop::collection::vec(-30.0..30.0f64, r * c),
            prop::collection::vec(any::<bool>(), r * c),
        ))
    ) {
        let mut mask = mask;
        for row in 0..r {
            mask[row * c] = true;
        }
        let mut g = Graph::new();
        let x = g.constant(array(r, c, data));
        let plain = g.row_softmax(x);
        let masked = g.masked_row_softmax(x, &mask).unwrap();
        for id in [plain, masked] {
            let v = g.value(id);
            for row in 0..r {
                let s: f64 = v.row(row).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(v.row(row).iter().all(|w| (0.0..=1.0).contains(w)));
            }
        }
        let v = g.value(masked);
        for (i, allowed) in mask.iter().enumerate() {
            if !allowed {
                prop_assert_eq!(v.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn shared_subexpressions_accumulate_gradients(data in prop::collection::vec(-3.0..3.0f64, 1..12)) {
        // f = sum(x * x + 3x + sigmoid(x) * x), each use of x contributes
        let n = data.len();
        let mut g = Graph::new();
        let x = g.param(array(1, n, data.clone()));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let s = g.sigmoid(x);
        let sx = g.mul(s, x).unwrap();
        let a = g.add(sq, lin).unwrap();
        let b = g.add(a, sx).unwrap();
        let loss = g.sum(b);
        let grad = g.backward(loss).unwrap().get_or_zeros(x);
        for (i, v) in data.iter().enumerate() {
            let sg = 1.0 / (1.0 + (-v).exp());
            let expected = 2.0 * v + 3.0 + sg + v * sg * (1.0 - sg);
            prop_assert!((grad.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_then_scatter_is_adjoint(
        (rows, idx, data) in (1usize..6).prop_flat_map(|r| (
            Just(r),
            prop::collection::vec(0..r, 1..10),
            prop::collection::vec(-2.0..2.0f64, r * 3),
        ))
    ) {
        let mut g = Graph::new();
        let x = g.param(array(rows, 3, data));
        let index: Arc<[usize]> = idx.clone().into();
        let gathered = g.gather_rows(x, index.clone()).unwrap();
        let back = g.scatter_add_rows(gathered, index, rows).unwrap();
        let loss = g.sum(back);
        let grad = g.backward(loss).unwrap().get_or_zeros(x);
        for r in 0..rows {
            let uses = idx.iter().filter(|&&i| i == r).count() as f64;
            prop_assert!(grad.row(r).iter().all(|&v| v == uses));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_and_losses_are_rigid_invariant(
        which in 0usize..4,
        seed in 0u64..1000,
        angle in -3.2..3.2f64,
        sx in -500.0..500.0f64,
        sy in -500.0..500.0f64,
        noise in prop::collection::vec(-3.0..3.0f64, 3 * 30 * 2),
    ) {
        let scene = generate_synthetic(&SyntheticConfig::new(kind(which), 1, seed)).remove(0).scene;
        let shift = Point::new(sx, sy);
        let moved = rigid(&scene, angle, shift);

        // metrics on raw-frame predictions and ground truth
        let gt = scene.target_future().unwrap();
        let preds: Vec<Vec<Point>> = (0..3)
            .map(|m| gt.iter().enumerate().map(|(t, p)| *p + Point::new(noise[m * 60 + 2 * t], noise[m * 60 + 2 * t + 1])).collect())
            .collect();
        let move_all = |pts: &[Point]| points_to_array(&pts.iter().map(|p| p.rotated(angle) + shift).collect::<Vec<_>>());
        let a: Vec<Array2> = preds.iter().map(|p| points_to_array(p)).collect();
        let b: Vec<Array2> = preds.iter().map(|p| move_all(p)).collect();
        let (ga, gb) = (points_to_array(&gt), move_all(&gt));
        prop_assert!((min_ade(&a, &ga) - min_ade(&b, &gb)).abs() < 1e-9);
        prop_assert!((min_fde(&a, &ga) - min_fde(&b, &gb)).abs() < 1e-9);
        prop_assert_eq!(miss_rate(std::slice::from_ref(&a), std::slice::from_ref(&ga)).unwrap(), miss_rate(std::slice::from_ref(&b), std::slice::from_ref(&gb)).unwrap());

        // losses in the target frame
        let (pa, pb) = (PreparedScene::from_scene(&scene), PreparedScene::from_scene(&moved));
        let fa = pa.future.clone().unwrap();
        let fb = pb.future.clone().unwrap();
        let local: Vec<Array2> = preds.iter().map(|p| points_to_array(&p.iter().map(|q| pa.transform.to_local(*q)).collect::<Vec<_>>())).collect();
        prop_assert!((smooth_l1(&local[0], &fa, 1.0).unwrap() - smooth_l1(&local[0], &fb, 1.0).unwrap()).abs() < 1e-9);
        prop_assert!((wta_loss(&local, &fa, 1.0).unwrap().0 - wta_loss(&local, &fb, 1.0).unwrap().0).abs() < 1e-9);
        let model = small_model(1, seed);
        let la = stage1_batch_loss(&model, &model.params, &[&pa], 1.0, false).unwrap().0;
        let lb = stage1_batch_loss(&model, &model.params, &[&pb], 1.0, false).unwrap().0;
        prop_assert!((la - lb).abs() < 1e-9, "{} vs {}", la, lb);

        // predictions map back consistently
        let ra = model.predict(&[pa]).unwrap().remove(0).to_raw();
        let rb = model.predict(&[pb]).unwrap().remove(0).to_raw();
        for (x, y) in ra.iter().zip(&rb) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p.rotated(angle) + shift - *q).norm() < 1e-6);
            }
        }

        // selection depends on distances only
        for l in [1, 3] {
            prop_assert_eq!(euclidean_select(&scene, l).kept, euclidean_select(&moved, l).kept);
        }
    }

    #[test]
    fn wta_never_exceeds_the_first_mode(
        (t, k, data, gt) in (1usize..31, 1usize..7).prop_flat_map(|(t, k)| (
            Just(t),
            Just(k),
            prop::collection::vec(-20.0..20.0f64, t * 2 * k),
            prop::collection::vec(-20.0..20.0f64, t * 2),
        ))
    ) {
        let preds: Vec<Array2> = data.chunks(t * 2).map(|c| array(t, 2, c.to_vec())).collect();
        let gt = array(t, 2, gt);
        let (w, idx) = wta_loss(&preds, &gt, 1.0).unwrap();
        prop_assert!(w <= smooth_l1(&preds[0], &gt, 1.0).unwrap());
        prop_assert!(idx < k);
        prop_assert_eq!(w, smooth_l1(&preds[idx], &gt, 1.0).unwrap());
    }

    #[test]
    fn batched_prediction_equals_per_scene(which in 0usize..4, seed in 0u64..500, n in 1usize..5) {
        let scenes: Vec<PreparedScene> = generate_synthetic(&SyntheticConfig::new(kind(which), n, seed))
            .iter()
            .map(|s| PreparedScene::from_scene(&s.scene))
            .collect();
        let model = small_model(2, seed);
        let batched = model.predict(&scenes).unwrap();
        for (s, b) in scenes.iter().zip(&batched) {
            let single = model.predict(std::slice::from_ref(s)).unwrap().remove(0);
            prop_assert_eq!(&single, b);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(
        motion in prop::collection::vec((-40.0..40.0f64, -40.0..40.0f64, -15.0..15.0f64, -15.0..15.0f64), 1..11),
        seed in 0u64..500,
    ) {
        let scene = straight_scene(&motion);
        let model = small_model(1, seed);
        let rec = model.attention_record(&PreparedScene::from_scene(&scene)).unwrap();
        let m = scene.num_vehicles();
        for h in rec.heads.iter().chain(std::iter::once(&rec.mean)) {
            prop_assert_eq!(h.shape(), (m, m));
            for r in 0..m {
                prop_assert!((h.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        if m == 1 {
            prop_assert_eq!(rec.mean.get(0, 0), 1.0);
        }
    }

    #[test]
    fn scene_csv_round_trips(which in 0usize..4, seed in 0u64..1000) {
        let scene = generate_synthetic(&SyntheticConfig::new(kind(which), 1, seed)).remove(0).scene;
        let mut buf = Vec::new();
        write_scene_csv(&scene, &mut buf).unwrap();
        let back = parse_scene_csv(buf.as_slice(), scene.id.clone(), scene.history_steps, scene.future_steps).unwrap();
        prop_assert_eq!(back, scene);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), modes in 1usize..4) {
        let model = small_model(modes, seed);
        let back = ModelParams::from_checkpoint(&model.to_checkpoint()).unwrap();
        prop_assert_eq!(back.params, model.params);
        prop_assert_eq!(back.buffers, model.buffers);
        prop_assert_eq!(back.config, model.config);
    }
}
