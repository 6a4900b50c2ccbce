mod support;

use promptsr::data::{bicubic_resize, ImageBuffer};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_matches_loop(seed in any::<u64>()) {
        support::check_attention_oracle(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn csa_matches_gather_scatter_loop(seed in any::<u64>()) {
        support::check_csa_oracle(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bicubic_matches_double_loop(seed in any::<u64>()) {
        support::check_bicubic_oracle(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn psnr_matches_direct_sum(seed in any::<u64>()) {
        support::check_psnr_oracle(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn ssim_matches_sliding_window(seed in any::<u64>()) {
        support::check_ssim_oracle(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn luma_matches_formula(seed in any::<u64>()) {
        support::check_luma_oracle(seed).map_err(TestCaseError::fail)?;
    }
}

fn ramp() -> ImageBuffer {
    ImageBuffer::from_fn(8, 8, |x, y| [32 * x as u8, 32 * y as u8, 16 * (x + y) as u8]).unwrap()
}

#[test]
fn ramp_fixture_is_exact() {
    let img = ramp();
    for (w, h) in [(4, 4), (16, 16), (2, 2), (12, 6)] {
        assert_eq!(bicubic_resize(&img, w, h).unwrap(), support::bicubic_oracle(&img, w, h), "{w}x{h}");
    }
}

#[test]
fn identical_images_score_perfectly() {
    let img = ImageBuffer::from_fn(16, 16, |x, y| [(x * 15) as u8, (y * 15) as u8, (x * y) as u8]).unwrap();
    assert_eq!(promptsr::metrics::psnr_y(&img, &img, 2).unwrap(), f64::INFINITY);
    assert!((promptsr::metrics::ssim_y(&img, &img, 0).unwrap() - 1.0).abs() < 1e-12);
}
