mod common;

use pseudoheal::eval::ssim;

#[test]
fn metrics_match_their_oracles() {
    common::check_metric_oracles().unwrap();
}

#[test]
fn naive_ssim_of_an_image_with_itself_is_one() {
    let mut r = common::rng(7);
    let a = common::random_image(24, 24, &mut r);
    assert!((common::naive_ssim(&a, &a) - 1.0).abs() < 1e-12);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}
