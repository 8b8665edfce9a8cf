use nerd_core::image::{coord_grid, crop_random, mosaic, random_crop_offsets, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gbrg_parity(h in 1usize..10, w in 1usize..10, seed in 0u64..10_000) {
        let img = random_image(2 * h, 2 * w, seed);
        let m = mosaic(&img).unwrap();
        for r in 0..2 * h {
            for c in 0..2 * w {
                let ch = match (r % 2, c % 2) {
                    (0, 1) => 2,
                    (1, 0) => 0,
                    _ => 1,
                };
                prop_assert_eq!(m.get(r, c), img.get(ch, r, c));
            }
        }
    }

    #[test]
    fn even_crops_commute_with_mosaic(
        seed in 0u64..10_000, top in 0usize..6, left in 0usize..6, ch in 1usize..6, cw in 1usize..6,
    ) {
        let img = random_image(24, 22, seed);
        let (top, left, ch, cw) = (2 * top, 2 * left, 2 * ch, 2 * cw);
        let a = mosaic(&img.crop(top, left, ch, cw).unwrap()).unwrap();
        let b = mosaic(&img).unwrap().crop(top, left, ch, cw).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn odd_bayer_crop_offsets_are_rejected(top in 0usize..4, left in 0usize..4) {
        let m = mosaic(&random_image(12, 12, 1)).unwrap();
        let r = m.crop(top, left, 4, 4);
        prop_assert_eq!(r.is_ok(), top % 2 == 0 && left % 2 == 0);
    }

    #[test]
    fn coord_grid_transposes(h in 2usize..12, w in 2usize..12) {
        let a = coord_grid(h, w).unwrap();
        let b = coord_grid(w, h).unwrap();
        for r in 0..h {
            for c in 0..w {
                let [x, y] = a.at(r, c);
                prop_assert_eq!(b.at(c, r), [y, x]);
                prop_assert!((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y));
            }
        }
    }

    #[test]
    fn random_crop_offsets_are_even_and_in_bounds(h in 2usize..40, w in 2usize..40, half in 1usize..10, seed in 0u64..10_000) {
        let size = 2 * half;
        prop_assume!(h >= size && w >= size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (top, left) = random_crop_offsets(h, w, size, &mut rng).unwrap();
        prop_assert!(top % 2 == 0 && left % 2 == 0);
        prop_assert!(top + size <= h && left + size <= w);
        let img = random_image(h, w, seed);
        let (a, b) = (crop_random(&img, size, seed).unwrap(), crop_random(&img, size, seed).unwrap());
        prop_assert_eq!(a.data(), b.data());
    }
}
