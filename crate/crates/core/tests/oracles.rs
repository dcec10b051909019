mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::fixtures::planted_depth;
use support::oracles::{hull_area_cubic, least_squares_affine, ssim_direct};
use usk::losses::ssim;
use usk::partition::convex_hull_area;
use usk::sfm::align_depth;
use usk::splat::Image;

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Image {
    let mut img = Image::zeros(w, h, 3);
    img.data.iter_mut().for_each(|v| *v = rng.gen());
    img
}

#[test]
fn ssim_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let a = random_image(&mut rng, 16, 16);
        // correlated pairs as well as independent ones
        let mut b = random_image(&mut rng, 16, 16);
        if rng.gen_bool(0.5) {
            for (y, x) in b.data.iter_mut().zip(&a.data) {
                *y = 0.7 * x + 0.3 * *y;
            }
        }
        let fast = ssim(&a, &b, None);
        let slow = ssim_direct(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn hull_area_matches_cubic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(3..40);
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
            .collect();
        let a = convex_hull_area(&pts);
        let b = hull_area_cubic(&pts);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn depth_alignment_recovers_planted_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for seed in 0..20 {
        let (a, b) = (rng.gen_range(0.2..5.0), rng.gen_range(-2.0..2.0));
        let (model, depth, pairs) = planted_depth(a, b, seed);
        let (_, fit) = align_depth(&depth, &model.images[&1], &model).unwrap();
        let (oa, ob) = least_squares_affine(&pairs);
        assert!((fit.scale - a).abs() < 1e-9 && (fit.shift - b).abs() < 1e-9, "{fit:?} vs ({a}, {b})");
        assert!((fit.scale - oa).abs() < 1e-9 && (fit.shift - ob).abs() < 1e-9);
    }
}
