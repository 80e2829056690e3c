use opir::degrade::{oracle_inverse, PerPixelAffine};
use opir::fft::{fft2, ifft2};
use opir::kernel::{
    apply_multiscale_fast, apply_multiscale_naive, apply_single_scale, gather_samples, softmax_fusion,
    uncertainty_map, KernelField, ScaleSet,
};
use opir::losses::{charbonnier, laplacian, laplacian_adjoint};
use opir::metrics::{psnr, ssim};
use opir::model::{Model, ModelConfig};
use opir::optim::{clip_global_norm, cosine_lr};
use opir::param::Parameters;
use opir::{Image, Rng};
use proptest::prelude::*;

fn rand_img(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
    let mut rng = Rng::new(seed);
    Image::from_fn(h, w, c, |_, _, _| rng.uniform())
}

fn scale_set(mask: u8) -> ScaleSet {
    let pool = [1usize, 2, 3, 4, 8];
    let s: Vec<usize> = pool.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &s)| s).collect();
    ScaleSet::new(if s.is_empty() { vec![1] } else { s }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fast_path_equals_dense_path(h in 3usize..20, w in 3usize..20, c in 1usize..4, mask in 0u8..32, seed in any::<u64>()) {
        let scales = scale_set(mask);
        let img = rand_img(h, w, c, seed);
        let mut rng = Rng::new(seed ^ 1);
        let k = KernelField::from_fn(h, w, |_, _, _| rng.range(-1.0, 1.0));
        let logits = Image::from_fn(h, w, scales.len(), |_, _, _| rng.normal());
        let alpha = softmax_fusion(&logits).unwrap();
        let fast = apply_multiscale_fast(&gather_samples(&img, &scales).unwrap(), &k, &alpha).unwrap();
        let naive = apply_multiscale_naive(&img, &k, &scales, &alpha).unwrap();
        prop_assert!(fast.max_abs_diff(&naive) <= 1e-12 * (1.0 + naive.max_abs()));
    }

    #[test]
    fn fusion_weights_lie_on_simplex(h in 1usize..8, w in 1usize..8, s in 1usize..5, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let logits = Image::from_fn(h, w, s, |_, _, _| 10.0 * rng.normal());
        let a = softmax_fusion(&logits).unwrap();
        a.check_simplex(1e-12).unwrap();
        prop_assert!(a.weights().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = softmax_fusion(&logits.map(|v| v + shift)).unwrap();
        let d = a.weights().iter().zip(b.weights()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(d < 1e-12);
    }

    #[test]
    fn identity_kernel_is_identity_at_any_scale(h in 3usize..12, w in 3usize..12, s in 1usize..9, seed in any::<u64>()) {
        let img = rand_img(h, w, 2, seed);
        let out = apply_single_scale(&img, &KernelField::identity(h, w), s).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn uncertainty_is_absolutely_homogeneous(h in 1usize..10, w in 1usize..10, c in -4.0f64..4.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = KernelField::from_fn(h, w, |_, _, _| rng.range(-2.0, 2.0));
        let base = uncertainty_map(&k);
        let scaled = uncertainty_map(&k.map(|v| c * v));
        for (a, b) in scaled.scores().iter().zip(base.scores()) {
            prop_assert!(*b >= 0.0);
            prop_assert!((a - c.abs() * b).abs() <= 1e-12 * (1.0 + b));
        }
    }

    #[test]
    fn fft_round_trip_and_parseval(lh in 0u32..5, lw in 0u32..5, c in 1usize..3, seed in any::<u64>()) {
        let (h, w) = (1usize << lh, 1usize << lw);
        let x = rand_img(h, w, c, seed);
        let s = fft2(&x).unwrap();
        prop_assert!(ifft2(&s).unwrap().max_abs_diff(&x) < 1e-12);
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let es: f64 = s.re.iter().zip(&s.im).map(|(a, b)| a * a + b * b).sum();
        prop_assert!((es / (h * w) as f64 - ex).abs() <= 1e-10 * ex.max(1.0));
    }

    #[test]
    fn laplacian_adjoint_identity(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let x = rand_img(h, w, 2, seed);
        let y = rand_img(h, w, 2, seed ^ 7);
        let lhs: f64 = laplacian(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(laplacian_adjoint(&y).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn charbonnier_bounded_below_by_eps(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = rand_img(h, w, 3, seed);
        let y = rand_img(h, w, 3, seed ^ 3);
        let (l, _) = charbonnier(&x, &y, 1e-3).unwrap();
        let (l0, g0) = charbonnier(&x, &x, 1e-3).unwrap();
        prop_assert!(l >= 1e-3);
        prop_assert!((l0 - 1e-3).abs() < 1e-15);
        prop_assert!(g0.max_abs() == 0.0);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), a in 0.01f64..0.2, extra in 0.01f64..0.2) {
        let x = rand_img(12, 12, 3, seed);
        let mut rng = Rng::new(seed ^ 5);
        let n = Image::from_fn(12, 12, 3, |_, _, _| rng.range(-1.0, 1.0));
        let noisy = |amp: f64| x.zip_map(&n, |v, e| v + amp * e).unwrap();
        prop_assert!(psnr(&x, &noisy(a), 1.0).unwrap() > psnr(&x, &noisy(a + extra), 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_symmetry(seed in any::<u64>()) {
        let x = rand_img(16, 16, 3, seed);
        let y = x.zip_map(&rand_img(16, 16, 3, seed ^ 9), |a, b| 0.8 * a + 0.2 * b).unwrap();
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn affine_inverse_recovers_clean(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let j = rand_img(h, w, 3, seed);
        let mut rng = Rng::new(seed ^ 11);
        let g = Image::from_fn(h, w, 3, |_, _, _| rng.range(0.01, 1.0));
        let b = Image::from_fn(h, w, 3, |_, _, _| rng.range(0.0, 0.5));
        let a = PerPixelAffine::new(g, b).unwrap();
        let i = a.apply(&j).unwrap();
        prop_assert!(oracle_inverse(&a, &i, 1e-3).unwrap().max_abs_diff(&j) < 1e-12);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_monotone(total in 1usize..500, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let s = rng.below(total);
        let a = cosine_lr(s, total, 2e-4, 1e-7).unwrap();
        let b = cosine_lr(s + 1, total, 2e-4, 1e-7).unwrap();
        prop_assert!(b <= a && a <= 2e-4 && b >= 1e-7);
        prop_assert!(cosine_lr(total + 1, total, 2e-4, 1e-7).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn clipping_caps_global_norm(seed in any::<u64>(), max in 0.01f64..2.0) {
        let config = ModelConfig { base_width: 2, emb_dim: 2, tam_hidden: 2, ..ModelConfig::default() };
        let mut g = Model::<f64>::new(config, seed).unwrap();
        let before = g.global_norm();
        let reported = clip_global_norm(&mut g, max);
        prop_assert!((reported - before).abs() < 1e-12);
        prop_assert!(g.global_norm() <= max * (1.0 + 1e-12) || before <= max);
    }

    #[test]
    fn untrained_model_is_identity_for_any_size(h in 8usize..30, w in 8usize..30, task in 0usize..3, seed in any::<u64>()) {
        let config = ModelConfig { base_width: 4, emb_dim: 4, tam_hidden: 4, ..ModelConfig::default() };
        let m = Model::<f32>::new(config, seed).unwrap();
        let x = rand_img(h, w, 3, seed).cast::<f32>();
        let y = m.restore(&x, task).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(y.max_abs_diff(&x) <= 1e-6);
    }
}
