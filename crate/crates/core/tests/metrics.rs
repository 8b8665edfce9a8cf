use nerd_core::metrics::{psnr, ssim};
use nerd_core::image::RgbImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

fn offset(img: &RgbImage, d: f32) -> RgbImage {
    RgbImage::new(img.height(), img.width(), img.data().iter().map(|v| v + d).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(h in 11usize..20, w in 11usize..20, s1 in 0u64..1000, s2 in 1000u64..2000) {
        let (a, b) = (random_image(h, w, s1), random_image(h, w, s2));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_self_is_one(h in 11usize..24, w in 11usize..24, seed in 0u64..1000) {
        let a = random_image(h, w, seed);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_decreases_with_offset(base in 0.0f32..0.4, d1 in 0.001f32..0.2, extra in 0.001f32..0.2) {
        let a = RgbImage::filled(12, 12, [base; 3]).unwrap();
        let near = psnr(&a, &offset(&a, d1)).unwrap();
        let far = psnr(&a, &offset(&a, d1 + extra)).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn ssim_is_bounded(seed in 0u64..1000) {
        let (a, b) = (random_image(16, 16, seed), random_image(16, 16, seed + 7));
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
