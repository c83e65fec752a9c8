mod common;

use kinesim::model::ModelConfig;

fn check(config: ModelConfig, seed: u64) {
    let (worst, at) = common::gradcheck(config, seed);
    assert!(worst <= 1e-4, "worst relative error {worst:e} at {at}");
}

#[test]
fn gradients_match_finite_differences() {
    check(common::tiny_model(), 1);
}

#[test]
fn gradients_match_finite_differences_without_usr() {
    check(ModelConfig { unified_spatial_repr: false, ..common::tiny_model() }, 2);
}
