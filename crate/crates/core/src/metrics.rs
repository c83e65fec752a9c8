//! Collision checks, kinematic statistics and displacement errors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{dequantize, ActionToken};
use crate::error::{Error, Result};
use crate::kinematics::{AgentState, Vec2};
use crate::rollout::SimulatedScenario;
use crate::scene::{bbox_corners, AgentMeta, Scenario};

/// Default evaluation horizons in seconds.
pub const HORIZONS_S: [f64; 3] = [3.0, 5.0, 8.0];

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let p = c.dot(axis);
        (lo.min(p), hi.max(p))
    })
}

/// Smallest projected overlap over the four box axes; negative when a
/// separating axis exists.
pub fn obb_overlap(a: &AgentState, meta_a: &AgentMeta, b: &AgentState, meta_b: &AgentMeta) -> f64 {
    let ca = bbox_corners(a, meta_a);
    let cb = bbox_corners(b, meta_b);
    let axes = [
        Vec2::new(a.theta.cos(), a.theta.sin()),
        Vec2::new(-a.theta.sin(), a.theta.cos()),
        Vec2::new(b.theta.cos(), b.theta.sin()),
        Vec2::new(-b.theta.sin(), b.theta.cos()),
    ];
    axes.iter()
        .map(|&axis| {
            let (a0, a1) = project(&ca, axis);
            let (b0, b1) = project(&cb, axis);
            (a1 - b0).min(b1 - a0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Whether two oriented boxes overlap (separating-axis test). Touching
/// boxes count as colliding.
pub fn obb_collision(a: &AgentState, meta_a: &AgentMeta, b: &AgentState, meta_b: &AgentMeta) -> bool {
    obb_overlap(a, meta_a, b, meta_b) >= 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicStats {
    pub mean_speed: f64,
    pub mean_abs_accel: f64,
    pub mean_abs_jerk: f64,
    pub max_abs_jerk: f64,
}

/// Statistics from per-step accelerations and speeds.
pub fn stats_from_accels(speeds: &[f64], accels: &[f64], dt: f64) -> Result<KinematicStats> {
    if accels.len() < 2 || speeds.is_empty() {
        return Err(Error::InvalidArgument(format!("jerk needs at least 2 accelerations, got {}", accels.len())));
    }
    let jerks: Vec<f64> = accels.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let abs: Vec<f64> = accels.iter().map(|a| a.abs()).collect();
    let abs_j: Vec<f64> = jerks.iter().map(|j| j.abs()).collect();
    Ok(KinematicStats {
        mean_speed: mean(speeds),
        mean_abs_accel: mean(&abs),
        mean_abs_jerk: mean(&abs_j),
        max_abs_jerk: abs_j.iter().copied().fold(0.0, f64::max),
    })
}

/// Statistics of a token sequence applied from `states[0]`; accelerations
/// are the dequantized action values. `states` has one more entry than
/// `tokens`.
pub fn kinematic_stats_tokens(states: &[AgentState], tokens: &[ActionToken], dt: f64) -> Result<KinematicStats> {
    if states.len() != tokens.len() + 1 {
        return Err(Error::InvalidArgument("states must have one more entry than tokens".into()));
    }
    let speeds: Vec<f64> = states.iter().map(|s| s.v).collect();
    let accels: Vec<f64> = tokens.iter().map(|t| dequantize(*t).a).collect();
    stats_from_accels(&speeds, &accels, dt)
}

/// Statistics of a state sequence; accelerations are finite differences of
/// speed.
pub fn kinematic_stats_states(states: &[AgentState], dt: f64) -> Result<KinematicStats> {
    if states.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 states, got {}", states.len())));
    }
    let speeds: Vec<f64> = states.iter().map(|s| s.v).collect();
    let accels: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    stats_from_accels(&speeds, &accels, dt)
}

/// Number of steps after the start covered by `horizon_s` seconds.
fn steps_within(horizon_s: f64, dt: f64) -> usize {
    (horizon_s / dt + 1e-9).floor() as usize
}

/// First simulated step (1-based, relative to the start) at which `ego`
/// overlaps any other valid agent.
pub fn first_collision(sim: &SimulatedScenario, ego: u32) -> Result<Option<usize>> {
    let s = &sim.scenario;
    let me = s.track(ego)?;
    for k in 1..=sim.horizon {
        let t = sim.start + k;
        if !me.is_valid(t) {
            continue;
        }
        let hit = s.tracks.iter().any(|o| {
            o.id() != ego && o.is_valid(t) && obb_collision(&me.states[t], &me.meta, &o.states[t], &o.meta)
        });
        if hit {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Smallest separation between `ego` and any other valid agent over the
/// simulated steps, measured as the negated box overlap. Infinite when
/// the ego is alone.
pub fn min_clearance(sim: &SimulatedScenario, ego: u32) -> Result<f64> {
    let s = &sim.scenario;
    let me = s.track(ego)?;
    let mut best = f64::INFINITY;
    for t in sim.start + 1..=sim.start + sim.horizon {
        if !me.is_valid(t) {
            continue;
        }
        for o in s.tracks.iter().filter(|o| o.id() != ego && o.is_valid(t)) {
            best = best.min(-obb_overlap(&me.states[t], &me.meta, &o.states[t], &o.meta));
        }
    }
    Ok(best)
}

/// Per-mille share of (scenario, controlled agent) cases with a collision
/// within each horizon. Horizons past the rollout use the steps available.
pub fn collision_rate(sims: &[SimulatedScenario], horizons_s: &[f64]) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; horizons_s.len()];
    let mut cases = 0usize;
    for sim in sims {
        for ego in sim.controlled() {
            cases += 1;
            if let Some(k) = first_collision(sim, ego)? {
                for (h, &secs) in hits.iter_mut().zip(horizons_s) {
                    if k <= steps_within(secs, sim.scenario.dt) {
                        *h += 1;
                    }
                }
            }
        }
    }
    Ok(hits.iter().map(|&h| if cases == 0 { 0.0 } else { 1000.0 * h as f64 / cases as f64 }).collect())
}

/// Mean displacement between predicted and ground-truth positions over
/// steps where both are valid.
pub fn ade(pred: &[AgentState], gt: &[AgentState], valid: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for ((p, g), &v) in pred.iter().zip(gt).zip(valid) {
        if v {
            sum += p.position().distance(g.position());
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Best ADE of `agent` across rollouts against the logged future, over the
/// first `horizon` simulated steps.
pub fn min_ade(rollouts: &[SimulatedScenario], gt: &Scenario, agent: u32, horizon: usize) -> Result<f64> {
    let truth = gt.track(agent)?;
    let mut best = f64::INFINITY;
    for sim in rollouts {
        let tr = sim.scenario.track(agent)?;
        let lo = sim.start + 1;
        let hi = (sim.start + horizon.min(sim.horizon)).min(truth.states.len() - 1);
        if hi < lo {
            continue;
        }
        let valid: Vec<bool> = (lo..=hi).map(|t| truth.is_valid(t) && tr.is_valid(t)).collect();
        if let Some(e) = ade(&tr.states[lo..=hi], &truth.states[lo..=hi], &valid) {
            best = best.min(e);
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::InvalidArgument(format!("no comparable steps for agent {agent}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenarios: usize,
    pub agents: usize,
    pub mean_speed: f64,
    pub mean_abs_accel: f64,
    pub mean_abs_jerk: f64,
    /// Mean over controlled agents of each rollout's largest |jerk|.
    pub max_abs_jerk: f64,
    pub collision_rate_3s: f64,
    pub collision_rate_5s: f64,
    pub collision_rate_8s: f64,
    pub min_ade: Option<f64>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("scenarios", self.scenarios.to_string()),
            ("agents", self.agents.to_string()),
            ("speed (m/s)", format!("{:.4}", self.mean_speed)),
            ("|accel| (m/s^2)", format!("{:.4}", self.mean_abs_accel)),
            ("|jerk| (m/s^3)", format!("{:.4}", self.mean_abs_jerk)),
            ("max |jerk| (m/s^3)", format!("{:.4}", self.max_abs_jerk)),
            ("collision 3s (permille)", format!("{:.3}", self.collision_rate_3s)),
            ("collision 5s (permille)", format!("{:.3}", self.collision_rate_5s)),
            ("collision 8s (permille)", format!("{:.3}", self.collision_rate_8s)),
        ];
        if let Some(m) = self.min_ade {
            rows.push(("minADE (m)", format!("{m:.4}")));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v:>12}");
        }
        s
    }
}

/// Report over rollouts grouped by scenario. `ground_truth[i]` is the log
/// for `groups[i]`; when given, minADE is averaged over controlled agents.
pub fn evaluate(groups: &[Vec<SimulatedScenario>], ground_truth: Option<&[Scenario]>) -> Result<MetricsReport> {
    let mut speeds = vec![];
    let mut accels = vec![];
    let mut jerks = vec![];
    let mut maxes = vec![];
    let mut ades = vec![];
    let mut all = vec![];
    for (i, group) in groups.iter().enumerate() {
        for sim in group {
            for (id, toks) in &sim.tokens {
                let states = sim.future_states(*id)?;
                if toks.len() >= 2 {
                    let st = kinematic_stats_tokens(states, toks, sim.scenario.dt)?;
                    speeds.push(st.mean_speed);
                    accels.push(st.mean_abs_accel);
                    jerks.push(st.mean_abs_jerk);
                    maxes.push(st.max_abs_jerk);
                }
            }
            all.push(sim.clone());
        }
        if let (Some(gt), Some(first)) = (ground_truth, group.first()) {
            for id in first.controlled() {
                ades.push(min_ade(group, &gt[i], id, first.horizon)?);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let rates = collision_rate(&all, &HORIZONS_S)?;
    Ok(MetricsReport {
        scenarios: groups.len(),
        agents: all.iter().map(|s| s.tokens.len()).sum(),
        mean_speed: mean(&speeds),
        mean_abs_accel: mean(&accels),
        mean_abs_jerk: mean(&jerks),
        max_abs_jerk: mean(&maxes),
        collision_rate_3s: rates[0],
        collision_rate_5s: rates[1],
        collision_rate_8s: rates[2],
        min_ade: ground_truth.map(|_| mean(&ades)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Pose;
    use crate::scene::AgentKind;
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use std::f64::consts::FRAC_PI_4;

    fn meta(id: u32) -> AgentMeta {
        AgentMeta { id, kind: AgentKind::Vehicle, length: 4.0, width: 2.0 }
    }

    #[test]
    fn box_examples() {
        let s = AgentState::new(1.0, 2.0, 0.3, 0.0);
        assert!(obb_collision(&s, &meta(0), &s, &meta(1)));
        assert!(!obb_collision(&s, &meta(0), &AgentState::new(101.0, 2.0, 0.0, 0.0), &meta(1)));
        // Touching end faces.
        let a = AgentState::new(0.0, 0.0, 0.0, 0.0);
        assert!(obb_collision(&a, &meta(0), &AgentState::new(4.0, 0.0, 0.0, 0.0), &meta(1)));
        assert!(!obb_collision(&a, &meta(0), &AgentState::new(4.0 + 1e-9, 0.0, 0.0, 0.0), &meta(1)));
        // 45 degrees, 3 m apart: the rotated box's corner reaches x = 3 - 2.1213 < 2.
        assert!(obb_collision(&a, &meta(0), &AgentState::new(3.0, 0.0, FRAC_PI_4, 0.0), &meta(1)));
    }

    #[test]
    fn jerk_example() {
        let st = stats_from_accels(&[1.0, 1.0, 1.0], &[0.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(st.max_abs_jerk, 2.0);
        assert_eq!(st.mean_abs_jerk, 1.0);
        assert!(stats_from_accels(&[1.0], &[0.0], 0.5).is_err());
    }

    #[test]
    fn constant_velocity_stats() {
        let states: Vec<AgentState> = (0..6).map(|i| AgentState::new(i as f64 * 2.5, 0.0, 0.0, 5.0)).collect();
        let st = kinematic_stats_states(&states, 0.5).unwrap();
        assert_eq!((st.mean_speed, st.mean_abs_accel, st.mean_abs_jerk, st.max_abs_jerk), (5.0, 0.0, 0.0, 0.0));
        let toks = vec![ActionToken::ZERO; 5];
        assert_eq!(kinematic_stats_tokens(&states, &toks, 0.5).unwrap().mean_abs_accel, 0.0);
    }

    fn sim_with_collision_at(k: Option<usize>) -> SimulatedScenario {
        use crate::scene::{Scenario, Track};
        let steps = 1 + 16;
        let ego: Vec<AgentState> = (0..steps).map(|t| AgentState::new(t as f64 * 5.0, 0.0, 0.0, 10.0)).collect();
        let other: Vec<AgentState> = (0..steps)
            .map(|t| match k {
                Some(k) if t == k => ego[t],
                _ => AgentState::new(t as f64 * 5.0, 50.0, 0.0, 10.0),
            })
            .collect();
        let track = |id, states| Track { meta: meta(id), valid: vec![true; steps], states, tokens: None };
        SimulatedScenario {
            scenario: Scenario {
                id: "c".into(),
                dt: 0.5,
                history_len: 0,
                future_len: 16,
                polylines: vec![],
                tracks: vec![track(0, ego), track(1, other)],
                lights: vec![],
                ego: Some(0),
            },
            start: 0,
            horizon: 16,
            tokens: BTreeMap::from([(0, vec![ActionToken::ZERO; 16])]),
        }
    }

    #[test]
    fn collision_rate_horizons() {
        assert_eq!(collision_rate(&[sim_with_collision_at(None)], &HORIZONS_S).unwrap(), vec![0.0; 3]);
        // Step 8 at 0.5 s is 4 s.
        assert_eq!(collision_rate(&[sim_with_collision_at(Some(8))], &HORIZONS_S).unwrap(), vec![0.0, 1000.0, 1000.0]);
        let mixed = [sim_with_collision_at(Some(2)), sim_with_collision_at(None)];
        assert_eq!(collision_rate(&mixed, &HORIZONS_S).unwrap(), vec![500.0; 3]);
    }

    #[test]
    fn ade_examples() {
        let a = sim_with_collision_at(None);
        let gt = a.scenario.clone();
        assert_eq!(min_ade(std::slice::from_ref(&a), &gt, 0, 16).unwrap(), 0.0);
        let mut shifted = a.clone();
        for s in &mut shifted.scenario.tracks[0].states {
            s.y += 1.0;
        }
        assert!((min_ade(std::slice::from_ref(&shifted), &gt, 0, 16).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(min_ade(&[shifted, a], &gt, 0, 16).unwrap(), 0.0);
    }

    #[test]
    fn report_renders() {
        let r = evaluate(&[vec![sim_with_collision_at(Some(3))]], None).unwrap();
        assert_eq!(r.collision_rate_3s, 1000.0);
        let text = r.to_text();
        assert!(text.contains("collision 8s"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    }

    fn state() -> impl Strategy<Value = AgentState> {
        (-10.0..10.0f64, -10.0..10.0f64, -3.2..3.2f64).prop_map(|(x, y, th)| AgentState::new(x, y, th, 0.0))
    }

    proptest! {
        #[test]
        fn symmetric_and_rigid(a in state(), b in state(), g in (-50.0..50.0f64, -50.0..50.0f64, -3.2..3.2f64)) {
            let (ma, mb) = (meta(0), AgentMeta { length: 3.0, width: 1.5, ..meta(1) });
            let r = obb_collision(&a, &ma, &b, &mb);
            prop_assert_eq!(r, obb_collision(&b, &mb, &a, &ma));
            let pose = Pose::new(g.0, g.1, g.2);
            let (ta, tb) = (pose.transform_state(&a), pose.transform_state(&b));
            // Rigid motion may move exact tangency by rounding.
            if obb_overlap(&a, &ma, &b, &mb).abs() > 1e-9 {
                prop_assert_eq!(r, obb_collision(&ta, &ma, &tb, &mb));
            }
        }
    }
}
