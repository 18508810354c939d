use mvrestore_core::dataio::{read_depth, read_png, write_depth, write_png, DepthMap, Image};
use mvrestore_core::degradations::synth_motion_kernel;
use mvrestore_core::diffusion::{q_sample, sampling_timesteps, scaled_linear_schedule};
use mvrestore_core::geometry::select_view_sets_with;
use mvrestore_core::metrics::{fit_scale_bias, psnr, ssim};
use mvrestore_core::nn::attention::Attention;
use mvrestore_core::nn::ParamStore;
use mvrestore_core::optim::{Adam, AdamConfig};
use mvrestore_core::rng::rng_from_seed;
use mvrestore_core::tensor::LatentSet;
use mvrestore_core::trainer::{depth_task_decode, depth_task_encode, DepthNormalization};
use proptest::prelude::*;
use rand::Rng as _;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = rng_from_seed(seed);
    Image::from_fn(h, w, 3, |_, _, _| rng.random::<f64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernels_are_unit_sum_and_non_negative(half in 1usize..20, intensity in 0.0..=1.0f64, seed in 0u64..10_000) {
        let k = synth_motion_kernel(2 * half + 1, intensity, &mut rng_from_seed(seed)).unwrap();
        prop_assert!((k.sum() - 1.0).abs() < 1e-6);
        prop_assert!(k.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn sampling_timesteps_descend_from_the_last(steps in 1usize..1000, frac in 0.0..=1.0f64) {
        let n = ((steps as f64 * frac) as usize).max(1);
        let ts = sampling_timesteps(steps, n);
        prop_assert_eq!(ts.len(), n);
        prop_assert_eq!(ts[0], steps - 1);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn q_sample_is_invertible(k in 0usize..200, seed in 0u64..1000) {
        let sched = scaled_linear_schedule(200).unwrap();
        let mut rng = rng_from_seed(seed);
        let x0 = LatentSet::<f64>::randn(2, 3, 4, 4, &mut rng);
        let eps = LatentSet::<f64>::randn(2, 3, 4, 4, &mut rng);
        let xk = q_sample(&x0, k, &eps, &sched).unwrap();
        let ab = sched.alpha_bar(k);
        for ((x, e), want) in xk.data.iter().zip(&eps.data).zip(&x0.data) {
            prop_assert!((x - (1.0 - ab).sqrt() * e - ab.sqrt() * want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_commutes_with_view_order(
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..1000,
    ) {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::<f64>::new();
        let att = Attention::new(&mut store, "a", 8, 2, 4, &mut rng);
        let x = LatentSet::<f64>::randn(4, 8, 2, 3, &mut rng);
        let y = att.forward(&store, &x).0.select_views(&perm);
        let yp = att.forward(&store, &x.select_views(&perm)).0;
        for (a, b) in y.data.iter().zip(&yp.data) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn view_selection_is_the_ordered_range_filter(
        overlaps in proptest::collection::vec(0.0..=1.0f64, 100),
        lo in 0.0..0.5f64,
        width in 0.0..0.5f64,
        list_size in 1usize..9,
    ) {
        let n = 10;
        let range = (lo, lo + width);
        let got = select_view_sets_with(n, range, list_size, |a, c| overlaps[a * n + c]);
        for a in 0..n {
            let want: Vec<usize> = (0..n)
                .filter(|&c| c != a && overlaps[a * n + c] >= range.0 && overlaps[a * n + c] <= range.1)
                .take(list_size)
                .collect();
            prop_assert_eq!(&got[&a], &want);
        }
    }

    #[test]
    fn depth_codec_inverts_in_range(lo in 0.1..10.0f64, span in 0.5..40.0f64, seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        let hi = lo + span;
        let values: Vec<f32> = (0..64).map(|_| rng.random_range(lo..hi) as f32).collect();
        let d = DepthMap::from_values(8, 8, values);
        let norm = DepthNormalization { lo, hi };
        let back = depth_task_decode(&depth_task_encode(&d, &norm), &norm);
        for (a, b) in back.depth.iter().zip(&d.depth) {
            prop_assert!((a - b).abs() < 1e-4_f32 * (1.0 + span as f32 / 10.0));
        }
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_bounded(seed in 0u64..1000) {
        let a = random_image(16, 16, seed);
        let b = random_image(16, 16, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_bias_fit_recovers_affine_maps(s in 0.1..5.0f64, b in -2.0..2.0f64, seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        let gt: Vec<f32> = (0..48).map(|_| rng.random_range(1.0..8.0)).collect();
        // pred = (gt − b) / s, so the fit should return (s, b)
        let pred: Vec<f32> = gt.iter().map(|g| ((*g as f64 - b) / s) as f32).collect();
        let (fs, fb) = fit_scale_bias(&DepthMap::from_values(6, 8, pred), &DepthMap::from_values(6, 8, gt)).unwrap();
        prop_assert!((fs - s).abs() < 1e-4 * s.max(1.0) && (fb - b).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_is_inert(seed in 0u64..1000, steps in 1usize..5) {
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::<f64>::new();
        params.add("w", &[5], (0..5).map(|_| rng.random::<f64>()).collect());
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..steps {
            let mut g = params.zeros_like();
            g.get_mut(mvrestore_core::nn::ParamId(0)).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            adam.step(&mut params, &g, 0.0);
        }
        prop_assert_eq!(params.entries[0].data.clone(), before.entries[0].data.clone());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn png_and_depth_files_round_trip(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from_seed(seed);
        let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
        let im = Image::from_u8(h, w, 3, &bytes);
        let p = dir.path().join("a.png");
        write_png(&p, &im).unwrap();
        prop_assert_eq!(read_png(&p).unwrap(), im);
        let d = DepthMap::from_values(h, w, (0..h * w).map(|i| if i % 5 == 0 { 0.0 } else { rng.random_range(0.1..30.0) }).collect());
        let q = dir.path().join("a.fdepth");
        write_depth(&q, &d).unwrap();
        prop_assert_eq!(read_depth(&q).unwrap(), d);
    }
}
