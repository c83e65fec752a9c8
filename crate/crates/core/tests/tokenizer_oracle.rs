mod common;

use kinesim::codec::dequantize;
use kinesim::kinematics::{ctra_step, AgentState, ControlAction};
use kinesim::tokenizer::{solve_window, tokenize_track, window_cost, TokenizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg1() -> TokenizerConfig {
    TokenizerConfig { window: 1, ..TokenizerConfig::default() }
}

#[test]
fn solver_matches_grid_search_on_single_steps() {
    let cfg = cfg1();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let s = AgentState::new(0.0, 0.0, rng.random_range(-3.0..3.0), rng.random_range(0.5..20.0));
        let truth = ControlAction::new(rng.random_range(-4.5..4.5), rng.random_range(-1.4..1.4));
        let target = ctra_step(&s, &truth, cfg.dt).unwrap();
        let start = ControlAction::new(truth.a + 0.5, truth.w);
        let sol = solve_window(&s, &[target], &[start], &cfg).unwrap();
        let (grid_u, grid_cost) = common::grid_search_k1(&s, &target, &cfg);
        assert!(sol.cost <= grid_cost + 1e-12, "solver {} vs grid {}", sol.cost, grid_cost);
        assert!((sol.actions[0].a - truth.a).abs() <= 1e-3 && (sol.actions[0].w - truth.w).abs() <= 1e-4, "{:?} vs {truth:?}", sol.actions[0]);
        assert!((grid_u.a - truth.a).abs() <= 2e-3 && (grid_u.w - truth.w).abs() <= 2e-3);
    }
}

#[test]
fn unreachable_target_saturates_at_grid_minimum() {
    let cfg = cfg1();
    let s = AgentState::new(0.0, 0.0, 0.0, 5.0);
    let target = AgentState::new(100.0, 0.0, 0.0, 5.0);
    let sol = solve_window(&s, &[target], &[ControlAction::default()], &cfg).unwrap();
    let (_, grid_cost) = common::grid_search_k1(&s, &target, &cfg);
    assert!(sol.cost > 0.0);
    assert_eq!(sol.actions[0].a, 5.0);
    assert!((sol.cost - grid_cost).abs() <= 0.01 * grid_cost, "{} vs {grid_cost}", sol.cost);
}

#[test]
fn exact_recovery_of_codebook_tracks() {
    let cfg = TokenizerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut hits, mut total) = (0, 0);
    for _ in 0..100 {
        let Some((track, toks)) = common::codebook_track(&mut rng, cfg.dt) else { continue };
        let out = tokenize_track(&track, &cfg).unwrap();
        hits += out.tokens.iter().zip(&toks).filter(|(a, b)| a == b).count();
        total += toks.len();
        for (t, r) in out.residuals.iter().enumerate() {
            if out.tokens[t] == toks[t] {
                assert!(*r <= 1e-6);
            }
        }
    }
    assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
}

#[test]
fn chained_k1_subproblems_agree_with_grid_search() {
    // Along a smooth curve each k = 1 subproblem solved from the propagated
    // state should be as good as the dense grid.
    let cfg = cfg1();
    let mut states = vec![AgentState::new(0.0, 0.0, 0.0, 8.0)];
    for t in 0..8 {
        let u = ControlAction::new(0.7 * (0.4 * t as f64).sin(), 0.23 * (0.3 * t as f64).cos());
        states.push(ctra_step(states.last().unwrap(), &u, cfg.dt).unwrap());
    }
    let out = tokenize_track(&states, &cfg).unwrap();
    for t in 0..8 {
        let (_, grid_cost) = common::grid_search_k1(&out.ctl_states[t], &states[t + 1], &cfg);
        let sol = solve_window(&out.ctl_states[t], &[states[t + 1]], &[ControlAction::default()], &cfg).unwrap();
        assert!(sol.cost <= grid_cost + 1e-12, "step {t}: {} vs {grid_cost}", sol.cost);
        let chosen = window_cost(&out.ctl_states[t], &[dequantize(out.tokens[t])], &[states[t + 1]], &cfg).unwrap();
        assert!(chosen.is_finite());
    }
}
