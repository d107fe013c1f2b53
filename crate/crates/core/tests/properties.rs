mod common;

use common::props;
use proptest::prelude::*;
use qtune_core::entropy::{dc_differential, dc_integrate, zigzag_scan, zigzag_unscan, HuffmanTable, ALPHABET};
use qtune_core::jpeg::{decode_pipeline, encode_pipeline, ColorTransform, CompressionKernels, ImageRgb};
use qtune_core::metrics::psnr;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn entropy_stream_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = props::random_stream(&mut rng);
        let b = props::random_stream(&mut rng);
        prop_assert_eq!(props::entropy_case(&a, &b), Ok(()));
    }

    #[test]
    fn fitted_tables_from_any_counts_are_valid(freqs in proptest::collection::vec(0u64..100_000, ALPHABET)) {
        prop_assume!(freqs.iter().any(|&f| f > 0));
        let t = HuffmanTable::from_counts(&freqs).unwrap();
        prop_assert_eq!(props::table_ok(&t), Ok(()));
        for (s, &f) in freqs.iter().enumerate() {
            prop_assert_eq!(t.code(s).is_some(), f > 0);
        }
    }

    #[test]
    fn zigzag_is_a_bijection(block in proptest::array::uniform32(any::<i32>()), tail in proptest::array::uniform32(any::<i32>())) {
        let mut b = [0i32; 64];
        b[..32].copy_from_slice(&block);
        b[32..].copy_from_slice(&tail);
        prop_assert_eq!(zigzag_unscan(&zigzag_scan(&b)), b);
    }

    #[test]
    fn dc_dpcm_round_trips(dcs in proptest::collection::vec(-1023i32..=1023, 0..50)) {
        prop_assert_eq!(dc_integrate(&dc_differential(&dcs)), dcs);
    }

    #[test]
    fn kernel_shrink_never_grows_categories(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let img = &props::monotonicity_images(1, seed)[0];
        for k in props::monotonicity_kernels(seed) {
            prop_assert_eq!(props::shrink_violations(img, &k, alpha), 0);
        }
    }

    #[test]
    fn metric_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = props::random_pair(&mut rng);
        prop_assert_eq!(props::metric_case(&a, &b), Ok(()));
    }

    #[test]
    fn unit_kernels_are_near_lossless(seed in any::<u64>(), w in 16usize..48, h in 16usize..48) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = props::random_image(&mut rng, w, h);
        let ct = ColorTransform::jpeg();
        let k = CompressionKernels::ones();
        let out = decode_pipeline(&encode_pipeline(&img, &ct, &k).unwrap(), &ct, &k);
        prop_assert_eq!((out.width(), out.height()), (w, h));
        // chroma subsampling is the only real loss, so smooth images do far better
        prop_assert!(psnr(&img, &out).unwrap() > 10.0);
    }
}

#[test]
fn smooth_images_survive_unit_kernels() {
    let data: Vec<u8> = (0..48 * 32).flat_map(|i| {
        let (x, y) = (i % 48, i / 48);
        [(60 + 2 * x) as u8, (90 + 3 * y) as u8, (150 - x - y) as u8]
    }).collect();
    let img = ImageRgb::from_rgb8(48, 32, &data).unwrap();
    let ct = ColorTransform::jpeg();
    let k = CompressionKernels::ones();
    let out = decode_pipeline(&encode_pipeline(&img, &ct, &k).unwrap(), &ct, &k);
    assert!(psnr(&img, &out).unwrap() > 40.0);
}
