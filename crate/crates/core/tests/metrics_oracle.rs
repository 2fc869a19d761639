#[path = "support/oracle.rs"]
mod oracle;

use ctrlfuse_core::metrics::{self, Plane};
use oracle::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;
const SEEDS: u64 = 50;
const TOL: f64 = 1e-9;

fn triple(seed: u64, textured: bool) -> (Img, Img, Img) {
    oracle::triple(seed, SIDE, textured)
}

fn close(name: &str, seed: u64, lib: f64, oracle: f64) {
    assert!(
        (lib - oracle).abs() <= TOL,
        "{name} seed {seed}: library {lib} vs oracle {oracle}"
    );
}

#[test]
fn every_metric_matches_its_oracle() {
    for seed in 0..SEEDS {
        for (name, lib, oracle) in compare_all(seed, SIDE) {
            close(name, seed, lib, oracle);
        }
    }
}

#[test]
fn oracles_hold_on_odd_sizes() {
    // 13×10 exercises partial edge blocks
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (h, w) = (13, 10);
    let (fi, ai, bi) = (textured_img(&mut rng, h, w), textured_img(&mut rng, h, w), textured_img(&mut rng, h, w));
    let (fb, ab, bb) = (flat(&fi), flat(&ai), flat(&bi));
    let (f, a, b) = (plane(&fb, h, w), plane(&ab, h, w), plane(&bb, h, w));
    close("ssim_block", 77, metrics::ssim_block(&f, &a, 1.0).unwrap(), o_ssim_block(&fi, &ai));
    close("qabf", 77, metrics::qabf(&f, &a, &b).unwrap(), o_qabf(&fi, &ai, &bi));
    close("qabf_block", 77, metrics::qabf_block(&f, &a, &b).unwrap(), o_qabf_block(&fi, &ai, &bi));
    close("nabf", 77, metrics::nabf(&f, &a, &b).unwrap(), o_nabf(&fi, &ai, &bi));
    close("scd_block", 77, metrics::scd_block(&f, &a, &b).unwrap(), o_scd_block(&fi, &ai, &bi));
}

#[test]
fn ssim_of_constant_images_matches_scalar_evaluation() {
    for c in [0.0, 0.1, 0.25, 0.5] {
        let x = vec![c; 64];
        let y = vec![c + 0.5; 64];
        let got = metrics::ssim(&plane(&x, 8, 8), &plane(&y, 8, 8), 1.0).unwrap();
        // zero variance: only the luminance factor survives
        let c1 = 1e-4;
        let d = c + 0.5;
        let want = (2.0 * c * d + c1) / (c * c + d * d + c1);
        close("ssim const", 0, got, want);
    }
}

#[test]
fn salt_and_pepper_raises_nabf() {
    for seed in 0..10 {
        let (fi, ai, bi) = triple(seed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut noisy = fi.clone();
        for row in noisy.iter_mut() {
            for v in row.iter_mut() {
                if rng.gen_bool(0.1) {
                    *v = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
                }
            }
        }
        let (fb, nb, ab, bb) = (flat(&fi), flat(&noisy), flat(&ai), flat(&bi));
        let p = |v| plane(v, SIDE, SIDE);
        let clean = metrics::nabf(&p(&fb), &p(&ab), &p(&bb)).unwrap();
        let dirty = metrics::nabf(&p(&nb), &p(&ab), &p(&bb)).unwrap();
        assert!(dirty > clean, "seed {seed}: {dirty} <= {clean}");
    }
}

#[test]
fn scd_of_average_of_independent_fields() {
    // F − VIS = (IR − VIS)/2, so each term is corr(IR − VIS, IR).
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ai = random_img(&mut rng, SIDE, SIDE);
        let bi = random_img(&mut rng, SIDE, SIDE);
        let fi: Img = ai
            .iter()
            .zip(&bi)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(p, q)| 0.5 * (p + q)).collect())
            .collect();
        let (fb, ab, bb) = (flat(&fi), flat(&ai), flat(&bi));
        let p = |v| plane(v, SIDE, SIDE);
        let got = metrics::scd(&p(&fb), &p(&ab), &p(&bb)).unwrap();
        let d = sub(&ai, &bi);
        let e = sub(&bi, &ai);
        let want = o_pearson(&d, &ai, full(&ai)) + o_pearson(&e, &bi, full(&bi));
        close("scd avg", seed, got, want);
        // independent fields: both terms near 1/√2
        assert!((got - 2f64.sqrt()).abs() < 0.25, "seed {seed}: {got}");
    }
}

#[test]
fn qabf_stays_in_unit_interval() {
    for seed in 0..100 {
        let (fi, ai, bi) = triple(10_000 + seed, seed % 3 == 0);
        let (fb, ab, bb) = (flat(&fi), flat(&ai), flat(&bi));
        let q = metrics::qabf(&plane(&fb, SIDE, SIDE), &plane(&ab, SIDE, SIDE), &plane(&bb, SIDE, SIDE)).unwrap();
        assert!((0.0..=1.0).contains(&q), "seed {seed}: {q}");
    }
}

fn img_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_image_metrics_are_symmetric(x in img_strategy(), y in img_strategy()) {
        let (a, b) = (plane(&x, 8, 8), plane(&y, 8, 8));
        prop_assert_eq!(metrics::mse(&a, &b).unwrap(), metrics::mse(&b, &a).unwrap());
        prop_assert_eq!(metrics::psnr(&a, &b, 1.0).unwrap(), metrics::psnr(&b, &a, 1.0).unwrap());
        let (s1, s2) = (metrics::ssim(&a, &b, 1.0).unwrap(), metrics::ssim(&b, &a, 1.0).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&s1));
        prop_assert!(metrics::mse(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn identity_cases(x in img_strategy()) {
        let a = plane(&x, 8, 8);
        prop_assert_eq!(metrics::mse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(metrics::psnr(&a, &a, 1.0).unwrap(), 100.0);
        prop_assert!((metrics::ssim(&a, &a, 1.0).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!((metrics::qabf_block(&a, &a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn fused_metrics_are_symmetric_in_sources(
        f in img_strategy(), x in img_strategy(), y in img_strategy()
    ) {
        let (f, a, b) = (plane(&f, 8, 8), plane(&x, 8, 8), plane(&y, 8, 8));
        let sym = |m: fn(&Plane, &Plane, &Plane) -> ctrlfuse_core::Result<f64>| {
            (m(&f, &a, &b).unwrap() - m(&f, &b, &a).unwrap()).abs()
        };
        prop_assert!(sym(metrics::qabf) < 1e-12);
        prop_assert!(sym(metrics::qabf_block) < 1e-12);
        prop_assert!(sym(metrics::nabf) < 1e-9);
        prop_assert!(sym(metrics::scd) < 1e-12);
        prop_assert!(sym(metrics::scd_block) < 1e-12);
        let s = metrics::scd(&f, &a, &b).unwrap();
        prop_assert!((-2.0..=2.0).contains(&s));
    }

    #[test]
    fn iou_is_bounded_and_perfect_on_identity(
        labels in prop::collection::vec(0u8..3, 1..80)
    ) {
        let r = metrics::iou_miou(&labels, &labels, 3).unwrap();
        prop_assert_eq!(r.miou, 1.0);
        let shifted: Vec<u8> = labels.iter().map(|l| (l + 1) % 3).collect();
        let r = metrics::iou_miou(&shifted, &labels, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
    }
}
