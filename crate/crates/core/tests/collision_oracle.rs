mod common;

use std::f64::consts::PI;

use kinesim::kinematics::AgentState;
use kinesim::metrics::{obb_collision, obb_overlap};
use kinesim::scene::{AgentKind, AgentMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn separating_axis_test_matches_point_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for i in 0..3000 {
        let meta = |id, rng: &mut ChaCha8Rng| AgentMeta { id, kind: AgentKind::Vehicle, length: rng.random_range(0.5..6.0), width: rng.random_range(0.5..2.5) };
        let (ma, mb) = (meta(0, &mut rng), meta(1, &mut rng));
        let a = AgentState::new(0.0, 0.0, rng.random_range(-PI..PI), 0.0);
        let b = AgentState::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-PI..PI), 0.0);
        // Sampling cannot resolve near-tangent cases.
        if obb_overlap(&a, &ma, &b, &mb).abs() < 0.05 {
            continue;
        }
        checked += 1;
        assert_eq!(obb_collision(&a, &ma, &b, &mb), common::boxes_overlap_sampled(&a, &ma, &b, &mb, 60), "case {i}: {a:?} {ma:?} {b:?} {mb:?}");
    }
    assert!(checked > 2000);
}
