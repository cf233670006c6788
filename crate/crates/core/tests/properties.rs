use std::collections::BTreeMap;

use proptest::prelude::*;
use restyle::attention::{attention_scores, TokenTensor};
use restyle::diffusion::{
    edit_friendly_invert, make_schedule, reconstruct, ConditionalGmmDenoiser, GaussianComponent, GaussianMixtureModel,
    ScheduleKind,
};
use restyle::metrics::{depth_metrics, pose_auc, ssim};
use restyle::scene::raster::FloatRaster;
use restyle::scene::{DepthMap, ImageBuffer, Raster};
use restyle::seeded_rng;
use restyle::segmatch::{downsample_map, AttentionMask, SemanticMap};
use restyle::warp::{
    blend_history, select_frames, softmax_splat, softmax_splat_with_stats, FlowField, SelectionStrategy, SplatParams,
    WarpResult,
};

fn unit_image(w: usize, h: usize) -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0f32..=1.0, w * h * 3).prop_map(move |data| ImageBuffer::from_data(w, h, 3, data).unwrap())
}

fn flow_field(w: usize, h: usize) -> impl Strategy<Value = FlowField> {
    prop::collection::vec(((-3.0f32..3.0, -3.0f32..3.0), prop::bool::weighted(0.85)), w * h).prop_map(move |cells| {
        let mut flow = FlowField::new(w, h);
        for (p, ((dx, dy), ok)) in cells.into_iter().enumerate() {
            if ok {
                flow.flow[p] = [dx, dy];
                flow.valid[p] = true;
            }
        }
        flow
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(
        (rows, cols, dim) in (1usize..6, 1usize..6, 1usize..5),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let mut tensor = |n: usize| {
            let data = (0..n * dim).map(|_| rng.random_range(-4.0..4.0)).collect();
            TokenTensor::new(n, dim, data).unwrap()
        };
        let (q, k) = (tensor(rows), tensor(cols));
        let keep = seeded_rng(seed ^ 1).random_range(0..cols);
        let mut bits = seeded_rng(seed ^ 2);
        let mask = AttentionMask::from_fn(rows, cols, |_, c| c == keep || bits.random_bool(0.5));
        let masked = attention_scores(&q, &k, &mask).unwrap();
        for r in 0..rows {
            let row = masked.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, w) in row.iter().enumerate() {
                prop_assert!(*w >= 0.0);
                if !mask.get(r, c) {
                    prop_assert_eq!(*w, 0.0);
                }
            }
        }
        let full = attention_scores(&q, &k, &AttentionMask::all_true(rows, cols)).unwrap();
        for r in 0..rows {
            let logits: Vec<f64> = (0..cols)
                .map(|c| q.row(r).iter().zip(k.row(c)).map(|(a, b)| a * b).sum::<f64>() / (dim as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (w, l) in full.row(r).iter().zip(&logits) {
                prop_assert!((w - (l - max).exp() / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsampling_never_invents_labels(
        (w, h) in (1usize..20, 1usize..20),
        seed in any::<u64>(),
        d_frac in 0.0f64..1.0,
    ) {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let labels: Vec<u16> = (0..w * h).map(|_| rng.random_range(1..4)).collect();
        let table: BTreeMap<u16, String> = (1..6).map(|i| (i, format!("class{i}"))).collect();
        let map = SemanticMap::new(w, h, labels, table).unwrap();
        let d = 1 + (d_frac * w.min(h) as f64) as usize;
        let small = downsample_map(&map, d.min(w.min(h))).unwrap();
        let present = map.present_classes();
        for class in small.present_classes() {
            prop_assert!(present.contains(class));
        }
    }

    #[test]
    fn splat_conserves_mass(
        (img, flow, z) in (1usize..10, 1usize..10).prop_flat_map(|(w, h)| (
            unit_image(w, h),
            flow_field(w, h),
            prop::collection::vec(-1.0f64..0.0, w * h),
        )),
        beta in 0.0f64..20.0,
    ) {
        let params = SplatParams { beta, ..SplatParams::default() };
        let (warp, stats) = softmax_splat_with_stats(&img, &flow, &z, params).unwrap();
        let target: f64 = warp.weight.iter().sum();
        let tol = 1e-9 * stats.source_mass.max(1.0);
        prop_assert!((target - stats.in_bounds_mass).abs() <= tol);
        prop_assert!((stats.in_bounds_mass + stats.out_of_bounds_mass - stats.source_mass).abs() <= tol);
        for (m, c) in warp.mask.iter().zip(&warp.coverage) {
            prop_assert_eq!(*m, *c > params.eps_cov);
        }
    }

    #[test]
    fn splat_ignores_importance_offsets(
        (img, flow, z) in (1usize..8, 1usize..8).prop_flat_map(|(w, h)| (
            unit_image(w, h),
            flow_field(w, h),
            prop::collection::vec(-1.0f64..0.0, w * h),
        )),
        offset in -50.0f64..50.0,
    ) {
        let params = SplatParams::default();
        let base = softmax_splat(&img, &flow, &z, params).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + offset).collect();
        let moved = softmax_splat(&img, &flow, &shifted, params).unwrap();
        prop_assert_eq!(&base.mask, &moved.mask);
        for (a, b) in base.image.data.iter().zip(&moved.image.data) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn blending_stays_inside_the_inputs(
        (warps, gamma) in (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(w, h, n)| (
            prop::collection::vec(
                (unit_image(w, h), prop::collection::vec(any::<bool>(), w * h), 1usize..6),
                n,
            ),
            0.0f64..3.0,
        )),
    ) {
        let warps: Vec<(WarpResult, usize)> = warps
            .into_iter()
            .map(|(image, mask, age)| {
                let weight = mask.iter().map(|m| f64::from(u8::from(*m))).collect::<Vec<_>>();
                (WarpResult { image, coverage: weight.clone(), weight, mask }, age)
            })
            .collect();
        let out = blend_history(&warps, gamma).unwrap();
        for p in 0..out.mask.len() {
            let covering: Vec<&WarpResult> = warps.iter().map(|(w, _)| w).filter(|w| w.mask[p]).collect();
            prop_assert_eq!(out.mask[p], !covering.is_empty());
            if covering.is_empty() {
                continue;
            }
            for c in 0..3 {
                let values = covering.iter().map(|w| w.image.data[p * 3 + c]);
                let lo = values.clone().fold(f32::INFINITY, f32::min);
                let hi = values.fold(f32::NEG_INFINITY, f32::max);
                let v = out.image.data[p * 3 + c];
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn pose_auc_grows_with_threshold(
        errors in prop::collection::vec(0.0f64..30.0, 1..40),
        (small, extra) in (0.1f64..20.0, 0.0f64..20.0),
    ) {
        let a = pose_auc(&errors, small).unwrap();
        let b = pose_auc(&errors, small + extra).unwrap();
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!(b >= a - 1e-9);
    }

    #[test]
    fn depth_metrics_follow_scale(
        pairs in prop::collection::vec((0.5f32..10.0, 0.5f32..10.0), 1..50),
        scale in 0.1f32..10.0,
    ) {
        let n = pairs.len();
        let (pred, reference): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let scaled = |v: &[f32]| DepthMap::from_values(n, 1, v.iter().map(|x| x * scale).collect());
        let base = depth_metrics(&DepthMap::from_values(n, 1, pred.clone()), &DepthMap::from_values(n, 1, reference.clone()), None).unwrap();
        let both = depth_metrics(&scaled(&pred), &scaled(&reference), None).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(1e-3);
        prop_assert!(close(both.abs_rel, base.abs_rel));
        prop_assert!(close(both.sq_rel, base.sq_rel * scale as f64));
        prop_assert!((both.delta1 - base.delta1).abs() <= 100.0 / n as f64 + 1e-9);
        prop_assert!((0.0..=100.0).contains(&base.delta1));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(
        (a, b) in (11usize..16, 11usize..16).prop_flat_map(|(w, h)| (unit_image(w, h), unit_image(w, h))),
    ) {
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn float_rasters_round_trip(
        (w, h, c, data) in (1usize..6, 1usize..6, 1usize..4)
            .prop_flat_map(|(w, h, c)| (Just(w), Just(h), Just(c), prop::collection::vec(
                prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO,
                w * h * c,
            ))),
    ) {
        let raster = Raster::Tensor(FloatRaster { width: w, height: h, channels: c, data });
        let back = Raster::from_bytes(&raster.to_bytes(), "prop").unwrap();
        prop_assert_eq!(back.to_bytes(), raster.to_bytes());
    }

    #[test]
    fn selection_respects_history(target in 1usize..12, seed in any::<u64>()) {
        let history: Vec<usize> = (0..target).collect();
        for strategy in [SelectionStrategy::LastOnly, SelectionStrategy::AllHistory, SelectionStrategy::LastPlusTwoRandom] {
            let pick = select_frames(target, &history, strategy, &mut seeded_rng(seed)).unwrap();
            let again = select_frames(target, &history, strategy, &mut seeded_rng(seed)).unwrap();
            prop_assert_eq!(&pick, &again);
            prop_assert!(pick.indices.contains(&(target - 1)));
            prop_assert!(pick.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(pick.indices.iter().all(|i| *i < target));
            let expected = match strategy {
                SelectionStrategy::LastOnly => 1,
                SelectionStrategy::AllHistory => target,
                SelectionStrategy::LastPlusTwoRandom => target.min(3),
            };
            prop_assert_eq!(pick.indices.len(), expected);
        }
    }

    #[test]
    fn inversion_reconstructs_its_input(
        x0 in prop::collection::vec(-1.0f64..2.0, 3..13).prop_filter("whole pixels", |v| v.len() % 3 == 0),
        steps in 1usize..30,
        seed in any::<u64>(),
    ) {
        let gmm = GaussianMixtureModel::new(vec![
            GaussianComponent { weight: 0.4, mean: vec![0.1, 0.2, 0.3], variance: 0.01 },
            GaussianComponent { weight: 0.6, mean: vec![0.8, 0.6, 0.4], variance: 0.02 },
        ])
        .unwrap();
        let denoiser = ConditionalGmmDenoiser::new(gmm, make_schedule(steps, ScheduleKind::default()).unwrap());
        let record = edit_friendly_invert(&x0, &denoiser, &mut seeded_rng(seed), None).unwrap();
        let back = reconstruct(&record, &denoiser, None).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
