mod common;

use kinesim::model::sample::top_p_support;
use proptest::prelude::*;

proptest! {
    #[test]
    fn top_p_support_matches_brute_force(raw in prop::collection::vec(0.01f64..1.0, 2..8), p in 0.05f64..1.0) {
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let (mut support, weights) = top_p_support(&probs, p);
        let mass: f64 = support.iter().map(|&i| probs[i]).sum();
        let mut expect = common::top_p_brute(&probs, p);
        support.sort_unstable();
        expect.sort_unstable();
        prop_assert_eq!(support.len(), expect.len());
        let expect_mass: f64 = expect.iter().map(|&i| probs[i]).sum();
        prop_assert!((mass - expect_mass).abs() < 1e-12);
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn worked_example() {
    let (support, weights) = top_p_support(&[0.4, 0.35, 0.25], 0.5);
    assert_eq!(support, vec![0, 1]);
    assert!((weights[0] - 8.0 / 15.0).abs() < 1e-12 && (weights[1] - 7.0 / 15.0).abs() < 1e-12);
}
