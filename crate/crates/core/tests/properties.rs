use proptest::prelude::*;

use rgbx_depth::augment::{sparsify, synth_hole_masks, AugmentConfig, Augmenter, HOLE_COVERAGE};
use rgbx_depth::autodiff::{Graph, Tensor};
use rgbx_depth::losses::{
    loss_g2, loss_sa, regression_case, LossConfig, RegressionCase, Standardization,
};
use rgbx_depth::metrics::{metric_oe, metric_rmse, metric_srmse};
use rgbx_depth::net::{NetConfig, Network};
use rgbx_depth::synth::{generate_scene, Band, SceneSpec};
use rgbx_depth::{DepthMap, RgbImage};

fn depth_field(h: usize, w: usize) -> impl Strategy<Value = DepthMap> {
    (
        prop::collection::vec(0.05f64..1.0, h * w),
        prop::collection::vec(prop::bool::weighted(0.8), h * w),
    )
        .prop_filter_map("needs two valid pixels", move |(v, m)| {
            (m.iter().filter(|&&b| b).count() >= 2).then(|| DepthMap::new(h, w, v, m).unwrap())
        })
}

fn eval_loss(d: &[f64], z: &DepthMap, x: &DepthMap) -> f64 {
    let mut g = Graph::new();
    let dv = g.input(Tensor::new(vec![1, 1, z.height(), z.width()], d.to_vec()).unwrap());
    let (l, _) = loss_g2(&mut g, dv, z, x, &LossConfig::default()).unwrap();
    g.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_nonnegative_and_zero_at_the_target(z in depth_field(12, 12), keep in prop::collection::vec(any::<bool>(), 144)) {
        let x = z.masked(&keep);
        prop_assert!(eval_loss(z.values(), &z, &x).abs() < 1e-9);
        let d: Vec<f64> = z.values().iter().rev().copied().collect();
        prop_assert!(eval_loss(&d, &z, &x) >= 0.0);
    }

    #[test]
    fn relative_term_ignores_positive_affine_maps(
        z in depth_field(10, 10),
        s in 0.2f64..5.0,
        f in -2.0f64..2.0,
    ) {
        let d: Vec<f64> = z.values().iter().map(|v| s * v + f).collect();
        for variant in [Standardization::G2S, Standardization::ZS, Standardization::MS] {
            let mut g = Graph::new();
            let dv = g.input(Tensor::new(vec![1, 1, 10, 10], d.clone()).unwrap());
            let l = loss_sa(&mut g, dv, &z, &DepthMap::empty(10, 10), variant, 1e-6).unwrap();
            prop_assert!(g.value(l).item() < 1e-4);
        }
    }

    #[test]
    fn metrics_vanish_at_the_target_and_srmse_is_affine_invariant(z in depth_field(8, 8), s in 0.5f64..4.0, f in 0.0f64..3.0) {
        let d = z.values().to_vec();
        prop_assert_eq!(metric_rmse(&d, &z), 0.0);
        prop_assert_eq!(metric_oe(&d, &z, 50_000, 0), 0.0);
        let mapped: Vec<f64> = d.iter().map(|v| s * v + f).collect();
        prop_assert!(metric_srmse(&mapped, &z, 1e-6) < 1e-4);
        let scaled: Vec<f64> = d.iter().map(|v| s * v).collect();
        prop_assert_eq!(metric_oe(&scaled, &z, 50_000, 0) , 0.0);
    }

    #[test]
    fn sparsify_endpoints_and_subset(z in depth_field(8, 8), rate in 0.0f64..=1.0, seed in any::<u64>()) {
        prop_assert_eq!(sparsify(&z, 0.0, seed).unwrap().valid_count(), 0);
        prop_assert_eq!(&sparsify(&z, 1.0, seed).unwrap(), &z);
        let x = sparsify(&z, rate, seed).unwrap();
        prop_assert!(x.valid().iter().zip(z.valid()).all(|(&a, &b)| !a || b));
        for i in 0..x.len() {
            if x.valid()[i] {
                prop_assert_eq!(x.values()[i], z.values()[i]);
            }
        }
    }

    #[test]
    fn case_follows_distinct_count(v in 0.1f64..1.0, w in 0.1f64..1.0, noise in -1e-9f64..1e-9) {
        let one = DepthMap::new(1, 3, vec![v, v + noise, 0.0], vec![true, true, false]).unwrap();
        prop_assert_eq!(regression_case(&DepthMap::empty(2, 2)).case, RegressionCase::Affine);
        prop_assert!(regression_case(&one).distinct_count <= 2);
        if (v - w).abs() > 1e-5 {
            let two = DepthMap::dense(1, 2, vec![v, w]).unwrap();
            prop_assert_eq!(regression_case(&two).case, RegressionCase::Direct);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_keeps_gt_and_nests_x(seed in any::<u64>()) {
        let scene = generate_scene(&SceneSpec::sample(seed, Band::Indoor, 48, 72)).unwrap();
        let aug = Augmenter::new(AugmentConfig { target_height: 32, hole_bank_size: 4, ..AugmentConfig::default() }).unwrap();
        let a = aug.sample(&scene.rgb, &scene.depth, seed).unwrap();
        let b = aug.sample(&scene.rgb, &scene.depth, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let (rgb, gt) = aug.prepare(&scene.rgb, &scene.depth, seed).unwrap();
        prop_assert_eq!(&a.gt, &gt);
        prop_assert_eq!(&a.rgb, &rgb);
        prop_assert_eq!(a.gt.dims(), (32, 48));
        prop_assert!(a.x.valid().iter().zip(a.gt.valid()).all(|(&x, &g)| !x || g));
        prop_assert!(a.gt.max_valid().unwrap() <= 1.0);
    }

    #[test]
    fn hole_masks_respect_coverage(seed in any::<u64>()) {
        for m in synth_hole_masks(4, 32, 32, seed).unwrap() {
            prop_assert!((HOLE_COVERAGE.0..=HOLE_COVERAGE.1).contains(&m.coverage()));
        }
    }

    #[test]
    fn scenes_are_pure_and_in_range(seed in any::<u64>(), outdoor in any::<bool>()) {
        let band = if outdoor { Band::Outdoor } else { Band::Indoor };
        let spec = SceneSpec::sample(seed, band, 24, 32);
        let a = generate_scene(&spec).unwrap();
        prop_assert_eq!(&a, &generate_scene(&spec).unwrap());
        let (lo, hi) = spec.depth_range;
        for (&v, &ok) in a.depth.values().iter().zip(a.depth.valid()) {
            prop_assert!(!ok || (lo - 1e-9..=hi + 1e-9).contains(&v));
        }
        prop_assert!(a.rgb.data().iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>()) {
        let mut net = Network::<f64>::new(NetConfig::toy(), seed).unwrap();
        for i in net.alpha_indices() {
            net.params_mut()[i].data_mut()[0] = (seed % 97) as f64 * 0.01;
        }
        let bytes = net.to_bytes();
        let back = Network::<f64>::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let rgb = RgbImage::new(16, 16, vec![0.3; 16 * 16 * 3]).unwrap();
        let x = DepthMap::empty(16, 16);
        prop_assert_eq!(net.predict(&rgb, &x).unwrap(), back.predict(&rgb, &x).unwrap());
    }
}
