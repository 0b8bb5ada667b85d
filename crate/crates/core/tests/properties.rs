use proptest::prelude::*;
use tutorcount::curriculum::{
    activation, descent_step_w, error_map, main_loss, pixel_grad, tutor_loss, tutor_loss_grad, weight_activation,
    weight_map_from, BELOW_ONE,
};
use tutorcount::density::{cluster_distances, make_density_map, round4, value_histogram};
use tutorcount::nets::{forward, init_params, main_net_spec, tutornet_spec};
use tutorcount::synth::{generate_dataset, generate_scene, read_scene, write_scene, Background};
use tutorcount::trainer::count_metrics;
use tutorcount::{AnnotatedScene, DensityMap, ErrorMap, MainKind, Point, SceneRecipe, Tensor, TutorDepth, Width};

const M: f64 = 0.8;
const T: f64 = 0.5;

fn interior_scene(points: &[(f64, f64)], size: usize) -> AnnotatedScene {
    let image = Tensor::full(&[1, 1, size, size], 0.5);
    let pts = points.iter().map(|&(x, y)| Point::new(x, y)).collect();
    AnnotatedScene::new("p", image, pts).unwrap()
}

fn interior_points(size: f64, margin: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((margin..size - margin, margin..size - margin), 0..12)
}

fn maps(w: &[f64], e: &[f64]) -> (tutorcount::WeightMap, ErrorMap) {
    let shape = [1, 1, 1, w.len()];
    (
        weight_map_from(Tensor::new(&shape, w.to_vec()).unwrap(), T).unwrap(),
        ErrorMap::from_values(&shape, e.to_vec()).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Points at least 4 sigma from every border on a 128 canvas.
    #[test]
    fn density_preserves_counts(pts in interior_points(128.0, 60.0), d in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let scene = interior_scene(&pts, 128);
        let m = make_density_map(&scene, 15.0, d, 1000.0).unwrap();
        let n = pts.len() as f64;
        prop_assert!((m.count() - n).abs() <= 1e-6 * n.max(1e-300), "{} vs {n}", m.count());
        let full = make_density_map(&scene, 15.0, 1, 1000.0).unwrap();
        prop_assert!((full.count() - m.count()).abs() <= 1e-6 * n.max(1e-300));
    }

    #[test]
    fn density_counts_survive_the_border(pts in interior_points(48.0, 0.0), d in prop::sample::select(vec![1usize, 8])) {
        let scene = interior_scene(&pts, 48);
        let m = make_density_map(&scene, 15.0, d, 1.0).unwrap();
        prop_assert!((m.count() - pts.len() as f64).abs() <= 1e-9 * (pts.len() as f64).max(1.0));
        prop_assert!(m.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn density_scaling_is_exact(pts in interior_points(64.0, 1.0), s in 1e-3f64..1e4) {
        let scene = interior_scene(&pts, 64);
        let one = make_density_map(&scene, 15.0, 8, 1.0).unwrap();
        let scaled = make_density_map(&scene, 15.0, 8, s).unwrap();
        for (a, b) in one.values().iter().zip(scaled.values()) {
            prop_assert_eq!((a * s).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn group_distances_scale_linearly(raw in prop::collection::vec(0u32..10_000, 1..60), k in prop::sample::select(vec![10.0, 100.0, 1000.0])) {
        let values: Vec<f64> = raw.iter().map(|&v| v as f64 / 1e4).collect();
        let base = cluster_distances(&values);
        let scaled = cluster_distances(&values.iter().map(|v| round4(v * k)).collect::<Vec<_>>());
        prop_assert_eq!(base.len(), scaled.len());
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a.distance * k - b.distance).abs() <= 1e-9 * b.distance.max(1.0));
        }
    }

    #[test]
    fn tutor_grad_matches_autodiff(pairs in prop::collection::vec((T..BELOW_ONE, 0.0..2.0 * M), 1..40)) {
        prop_assume!(pairs.iter().all(|(_, e)| (e - M).abs() > 1e-6));
        let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let leaf = Tensor::param(&[1, 1, 1, w.len()], w.clone()).unwrap();
        let (_, em) = maps(&w, &e);
        let wm = weight_map_from(leaf.clone(), T).unwrap();
        tutor_loss(&wm, &em, M).unwrap().backward().unwrap();
        let auto = leaf.grad().unwrap();
        let (wm, em) = maps(&w, &e);
        let closed = tutor_loss_grad(&wm, &em, M).unwrap();
        for (a, c) in auto.iter().zip(&closed) {
            prop_assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn tutor_loss_is_non_negative(pairs in prop::collection::vec((0.5f64..=1.0, 0.0f64..10.0), 1..40)) {
        let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (wm, em) = maps(&w, &e);
        prop_assert!(tutor_loss(&wm, &em, M).unwrap().item() >= 0.0);
    }

    // The loss is linear in w with slope max(M - e, 0) - e, so descent heads
    // to 1 above M/2 and to the floor below it.
    #[test]
    fn descent_selects_the_argmin_end(e in 0.0f64..2.0 * M, w0 in T..BELOW_ONE) {
        prop_assume!((e - M / 2.0).abs() > 1e-3);
        let mut w = w0;
        for _ in 0..100_000 {
            w = descent_step_w(w, e, M, 0.05, T);
        }
        let slope = pixel_grad(e, M);
        prop_assert!((slope - ((M - e).max(0.0) - e)).abs() < 1e-15);
        if e > M / 2.0 {
            prop_assert_eq!(w, BELOW_ONE);
        } else {
            prop_assert_eq!(w, T);
        }
    }

    #[test]
    fn uniform_weight_scales_main_loss(vals in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 4), c in 0.5f64..=1.0) {
        let pred = Tensor::new(&[1, 1, 2, 2], vals.iter().map(|v| v.0).collect()).unwrap();
        let gt = DensityMap::from_grid(Tensor::new(&[1, 1, 2, 2], vals.iter().map(|v| v.1).collect()).unwrap(), 1000.0, 15.0, 8).unwrap();
        let ones = weight_map_from(Tensor::full(&[1, 1, 2, 2], 1.0), T).unwrap();
        let cw = weight_map_from(Tensor::full(&[1, 1, 2, 2], c), T).unwrap();
        let plain = main_loss(&pred, &gt, &ones).unwrap().item();
        let weighted = main_loss(&pred, &gt, &cw).unwrap().item();
        prop_assert!((weighted - c * plain).abs() <= 1e-12 * plain.max(1.0));
        let e = error_map(&pred, &gt).unwrap();
        prop_assert!((e.mean() - plain).abs() <= 1e-12 * plain.max(1.0));
    }

    #[test]
    fn weights_stay_in_range(x in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let w = weight_activation(&Tensor::new(&[1, 1, 1, x.len()], x.clone()).unwrap(), T);
        prop_assert!(w.values().iter().all(|v| (T..1.0).contains(v)));
        for v in x {
            prop_assert!((T..1.0).contains(&activation(v, T)));
        }
    }

    #[test]
    fn rms_dominates_mean_absolute(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..30)) {
        let p: Vec<f64> = pairs.iter().map(|v| v.0).collect();
        let t: Vec<f64> = pairs.iter().map(|v| v.1).collect();
        let (mae, mse) = count_metrics(&p, &t).unwrap();
        prop_assert!(mse >= mae - 1e-12);
    }

    #[test]
    fn scenes_round_trip_through_disk(seed in 0u64..1000, index in 0usize..50, gray in any::<bool>()) {
        let recipe = SceneRecipe { width: 24, height: 16, seed, ..SceneRecipe::default() };
        let mut scene = generate_scene(&recipe, index).unwrap();
        if gray {
            let img = scene.image();
            let plane = img.values()[..24 * 16].to_vec();
            scene = AnnotatedScene::new(scene.id.clone(), Tensor::new(&[1, 1, 16, 24], plane).unwrap(), scene.points().to_vec()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &scene).unwrap();
        let back = read_scene(dir.path(), &scene.id).unwrap();
        prop_assert_eq!(back.points(), scene.points());
        prop_assert_eq!(back.image().shape(), scene.image().shape());
        prop_assert_eq!(back.image().values(), scene.image().values());
    }

    #[test]
    fn generated_scenes_are_valid(seed in 0u64..1000, lo in 0usize..30, extra in 0usize..30, flat in any::<bool>()) {
        let recipe = SceneRecipe {
            width: 32,
            height: 40,
            n_points: (lo, lo + extra),
            background: if flat { Background::Flat } else { Background::Noise(0.05) },
            seed,
            ..SceneRecipe::default()
        };
        let s = generate_scene(&recipe, 3).unwrap();
        prop_assert!((lo..=lo + extra).contains(&s.count()));
        prop_assert!(s.points().iter().all(|p| p.x > 0.0 && p.x < 32.0 && p.y > 0.0 && p.y < 40.0));
        prop_assert!(s.image().values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(generate_scene(&recipe, 3).unwrap(), s);
    }
}

#[test]
fn datasets_are_pure_functions_of_recipe_and_count() {
    let recipe = SceneRecipe::default();
    let a = generate_dataset(&recipe, 6).unwrap();
    let b = generate_dataset(&recipe, 6).unwrap();
    assert_eq!(a, b);
    // Prefixes agree: scene i does not depend on N.
    assert_eq!(&generate_dataset(&recipe, 3).unwrap()[..], &a[..3]);
}

#[test]
fn network_outputs_are_eighth_resolution() {
    let x = Tensor::full(&[1, 3, 40, 24], 0.3);
    for depth in TutorDepth::ALL {
        let spec = tutornet_spec(depth, Width::DESK).unwrap();
        let y = forward(&spec, &init_params(&spec, 1), &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 3]);
        assert!(y.values().iter().all(|v| (T..1.0).contains(v)));
    }
    for kind in MainKind::ALL {
        let spec = main_net_spec(kind, Width::DESK).unwrap();
        assert_eq!(forward(&spec, &init_params(&spec, 1), &x).unwrap().shape(), &[1, 1, 5, 3]);
    }
    let counts: Vec<usize> = [TutorDepth::L15, TutorDepth::L29, TutorDepth::L43]
        .iter()
        .map(|&d| tutornet_spec(d, Width::FULL).unwrap().param_count())
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
}

#[test]
fn imbalance_holds_where_the_canvas_dwarfs_the_kernel() {
    // Few people on a large canvas, the regime the full-resolution imbalance
    // statistics describe.
    let recipe = SceneRecipe { width: 512, height: 512, n_points: (3, 6), clusters: (1, 1), ..SceneRecipe::default() };
    let scene = generate_scene(&recipe, 0).unwrap();
    let m = make_density_map(&scene, 15.0, 1, 1.0).unwrap();
    let below = m.values().iter().filter(|v| **v < 1e-3).count() as f64 / m.values().len() as f64;
    let max = m.values().iter().cloned().fold(0.0, f64::max);
    let above_half = m.values().iter().filter(|v| **v > max / 2.0).count() as f64 / m.values().len() as f64;
    assert!(below > 0.95, "{below}");
    assert!(max > 1e-4 && max < 1e-2, "{max}");
    assert!(above_half < 0.01, "{above_half}");
    assert!(value_histogram(&m, 20).unwrap()[0].count as f64 / m.values().len() as f64 > 0.9);
}
