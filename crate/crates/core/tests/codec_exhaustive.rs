use kinesim::codec::{dequantize, quantize, ActionToken, ACCEL_BIN, ACCEL_MAX, YAW_RATE_BIN, YAW_RATE_MAX};
use kinesim::kinematics::ControlAction;
use kinesim::VOCAB;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_token_roundtrips() {
    assert_eq!(ActionToken::all().count(), VOCAB);
    for t in ActionToken::all() {
        assert_eq!(quantize(&dequantize(t)).unwrap(), t);
        assert_eq!(ActionToken::from_flat(t.flat()).unwrap(), t);
        assert_eq!(ActionToken::from_indices(t.ia(), t.iw()).unwrap(), t);
    }
}

#[test]
fn quantization_error_within_half_bin() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100_000 {
        let u = ControlAction::new(rng.random_range(-ACCEL_MAX..=ACCEL_MAX), rng.random_range(-YAW_RATE_MAX..=YAW_RATE_MAX));
        let c = dequantize(quantize(&u).unwrap());
        assert!((c.a - u.a).abs() <= 0.5 * ACCEL_BIN + 1e-12, "{u:?} -> {c:?}");
        assert!((c.w - u.w).abs() <= 0.5 * YAW_RATE_BIN + 1e-12, "{u:?} -> {c:?}");
    }
}

#[test]
fn nearest_center_by_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let u = ControlAction::new(rng.random_range(-6.0..6.0), rng.random_range(-2.0..2.0));
        let d = |t: ActionToken| {
            let c = dequantize(t);
            ((c.a - u.a) / (2.0 * ACCEL_MAX)).powi(2) + ((c.w - u.w) / (2.0 * YAW_RATE_MAX)).powi(2)
        };
        let best = ActionToken::all().min_by(|a, b| d(*a).total_cmp(&d(*b))).unwrap();
        assert_eq!(quantize(&u).unwrap(), best, "{u:?}");
    }
}
