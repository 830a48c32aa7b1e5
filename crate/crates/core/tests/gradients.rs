mod common;

use common::{check_feature_kl_gradient, check_loss_gradient};
use sfuda_core::data::{make_synthetic_shift_suite, Seed, SyntheticConfig};
use sfuda_core::nn::build_small_cnn;

fn batches() -> (sfuda_core::data::ShiftSuite, sfuda_core::nn::Model) {
    let cfg = SyntheticConfig { samples_per_domain: 16, third_party_samples: 16, ..Default::default() };
    let suite = make_synthetic_shift_suite(Seed(11), &cfg).unwrap();
    let model = build_small_cnn([16, 16, 3], 10, Seed(12)).unwrap();
    (suite, model)
}

#[test]
fn feature_kl_input_gradient_matches_central_differences() {
    let (suite, model) = batches();
    for seed in 0..3 {
        let x_t = suite.target.images.slice(0, 4);
        let x_e = suite.third_party.images.slice(4 * seed, 4 * seed + 4);
        let check = check_feature_kl_gradient(&model, &x_t, &x_e, 24, seed as u64);
        assert!(check.max_relative_error() < 1e-3, "{check:?}");
    }
}

#[test]
fn training_loss_parameter_gradient_matches_central_differences() {
    let (suite, model) = batches();
    for seed in 0..3 {
        let x = suite.sources[0].images.slice(4 * seed, 4 * seed + 4);
        let y = &suite.sources[0].labels[4 * seed..4 * seed + 4];
        let check = check_loss_gradient(&model, &x, y, 24, seed as u64);
        assert!(check.max_relative_error() < 1e-3, "{check:?}");
    }
}
