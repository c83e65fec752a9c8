//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use kinesim::codec::{dequantize, ActionToken, ACCEL_MAX, YAW_RATE_MAX};
use kinesim::kinematics::{ctra_rollout, AgentState, ControlAction, Vec2};
use kinesim::model::net::NO_PREV;
use kinesim::model::train::batch_gradient;
use kinesim::model::{Model, ModelConfig, Sequence, StepFeatures};
use kinesim::scene::AgentMeta;
use kinesim::tokenizer::{window_cost, TokenizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed-step RK4 of x' = v cos th, y' = v sin th, th' = w, v' = a.
pub fn rk4(s: &AgentState, u: &ControlAction, dt: f64, substeps: usize) -> AgentState {
    let f = |x: [f64; 4]| [x[3] * x[2].cos(), x[3] * x[2].sin(), u.w, u.a];
    let h = dt / substeps as f64;
    let mut x = [s.x, s.y, s.theta, s.v];
    for _ in 0..substeps {
        let k1 = f(x);
        let k2 = f(std::array::from_fn(|i| x[i] + 0.5 * h * k1[i]));
        let k3 = f(std::array::from_fn(|i| x[i] + 0.5 * h * k2[i]));
        let k4 = f(std::array::from_fn(|i| x[i] + h * k3[i]));
        for i in 0..4 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    AgentState::new(x[0], x[1], x[2], x[3])
}

/// Minimizes the one-step tracking cost over the action box by a dense
/// grid at 0.01 followed by a 1e-3 grid around the best cell.
pub fn grid_search_k1(s: &AgentState, target: &AgentState, cfg: &TokenizerConfig) -> (ControlAction, f64) {
    let cost = |a: f64, w: f64| {
        let u = ControlAction::new(a.clamp(-ACCEL_MAX, ACCEL_MAX), w.clamp(-YAW_RATE_MAX, YAW_RATE_MAX));
        window_cost(s, &[u], std::slice::from_ref(target), cfg).unwrap()
    };
    let search = |a0: f64, a1: f64, w0: f64, w1: f64, h: f64| {
        let (na, nw) = (((a1 - a0) / h).round() as usize, ((w1 - w0) / h).round() as usize);
        let mut best = (0.0, 0.0, f64::INFINITY);
        for i in 0..=na {
            let a = a0 + i as f64 * h;
            for j in 0..=nw {
                let w = w0 + j as f64 * h;
                let c = cost(a, w);
                if c < best.2 {
                    best = (a, w, c);
                }
            }
        }
        best
    };
    let (a, w, _) = search(-ACCEL_MAX, ACCEL_MAX, -YAW_RATE_MAX, YAW_RATE_MAX, 0.01);
    let (a, w, c) = search(a - 0.02, a + 0.02, w - 0.02, w + 0.02, 1e-3);
    (ControlAction::new(a.clamp(-ACCEL_MAX, ACCEL_MAX), w.clamp(-YAW_RATE_MAX, YAW_RATE_MAX)), c)
}

/// Overlap test by sampling points of box `a` on a fine lattice and
/// checking containment in box `b`, and the other way round.
pub fn boxes_overlap_sampled(a: &AgentState, ma: &AgentMeta, b: &AgentState, mb: &AgentMeta, n: usize) -> bool {
    let inside = |p: Vec2, s: &AgentState, m: &AgentMeta| {
        let q = s.pose().to_local(p);
        q.x.abs() <= 0.5 * m.length && q.y.abs() <= 0.5 * m.width
    };
    let probe = |s: &AgentState, m: &AgentMeta, o: &AgentState, mo: &AgentMeta| {
        (0..=n).any(|i| {
            (0..=n).any(|j| {
                let local = Vec2::new((i as f64 / n as f64 - 0.5) * m.length, (j as f64 / n as f64 - 0.5) * m.width);
                inside(s.pose().to_world(local), o, mo)
            })
        })
    };
    probe(a, ma, b, mb) || probe(b, mb, a, ma)
}

/// Smallest descending-probability prefix with mass >= p, found by trying
/// every subset of a small distribution.
pub fn top_p_brute(probs: &[f64], p: f64) -> Vec<usize> {
    let n = probs.len();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for mask in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mass: f64 = set.iter().map(|&i| probs[i]).sum();
        if mass + 1e-12 < p {
            continue;
        }
        // Must be a prefix of the descending order: nothing outside beats
        // anything inside.
        let min_in = set.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        let max_out = (0..n).filter(|i| mask & (1 << i) == 0).map(|i| probs[i]).fold(f64::NEG_INFINITY, f64::max);
        if max_out > min_in {
            continue;
        }
        let better = match &best {
            None => true,
            Some((len, m, _)) => set.len() < *len || (set.len() == *len && mass > *m),
        };
        if better {
            best = Some((set.len(), mass, set));
        }
    }
    best.map(|b| b.2).unwrap_or_default()
}

/// A 16-step track driven by a random walk over codebook indices, with
/// its tokens. `None` when the walk reverses the vehicle.
pub fn codebook_track(rng: &mut ChaCha8Rng, dt: f64) -> Option<(Vec<AgentState>, Vec<ActionToken>)> {
    let s0 = AgentState::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0), rng.random_range(2.0..15.0));
    let mut ia = rng.random_range(20..43usize);
    let mut iw = rng.random_range(20..43usize);
    let mut toks = vec![];
    for _ in 0..16 {
        ia = (ia as i64 + rng.random_range(-2..=2)).clamp(0, 62) as usize;
        iw = (iw as i64 + rng.random_range(-2..=2)).clamp(0, 62) as usize;
        toks.push(ActionToken::from_indices(ia, iw).unwrap());
    }
    let actions: Vec<_> = toks.iter().map(|t| dequantize(*t)).collect();
    let states = ctra_rollout(&s0, &actions, dt).ok()?;
    if states.iter().any(|s| s.v < 0.0) {
        return None;
    }
    let mut track = vec![s0];
    track.extend(states);
    Some((track, toks))
}

fn row(rng: &mut ChaCha8Rng) -> [f64; 7] {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

/// Three steps of five elements each.
pub fn tiny_sequence(unified: bool, rng: &mut ChaCha8Rng) -> Sequence {
    let targets = vec![1984, 17, 3968];
    let steps = (0..3)
        .map(|t| {
            let prev = if t == 0 { NO_PREV } else { targets[t - 1] };
            if unified {
                StepFeatures { vectors: (0..5).map(|_| row(rng)).collect(), vector_types: vec![0, 3, 4, 6, 11], agents: vec![], agent_types: vec![], prev }
            } else {
                StepFeatures {
                    vectors: (0..3).map(|_| row(rng)).collect(),
                    vector_types: vec![0, 7, 12],
                    agents: (0..2).map(|_| row(rng)).collect(),
                    agent_types: vec![3, 5],
                    prev,
                }
            }
        })
        .collect();
    Sequence { steps, targets, mask: vec![true, false, true] }
}

/// Worst relative error between analytic and central-difference
/// gradients over every small tensor and a sample of the large ones.
pub fn gradcheck(config: ModelConfig, seed: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = tiny_sequence(config.unified_spatial_repr, &mut rng);
    let model = Model::new(config, seed).unwrap();
    let loss = |m: &Model| batch_gradient(m, &[&seq], None, 1).unwrap().0;
    let (_, grads) = batch_gradient(&model, &[&seq], None, 1).unwrap();
    let h = 1e-4;
    let mut worst = (0.0f64, String::new());
    for i in 0..model.params.len() {
        let shape = model.params.tensor(i).dim();
        let n = shape.0 * shape.1;
        let picks: Vec<(usize, usize)> = if n <= 512 {
            (0..shape.0).flat_map(|r| (0..shape.1).map(move |c| (r, c))).collect()
        } else {
            let name = model.params.name(i);
            let mut p: Vec<(usize, usize)> = (0..64).map(|_| (rng.random_range(0..shape.0), rng.random_range(0..shape.1))).collect();
            // Entries that actually carry gradient in the big tables.
            for &tok in &seq.targets {
                if name == "head.w" {
                    p.push((rng.random_range(0..shape.0), tok));
                } else if name == "head.b" {
                    p.push((0, tok));
                } else if name == "u_emb" {
                    p.push((tok, rng.random_range(0..shape.1)));
                }
            }
            p
        };
        for (r, c) in picks {
            let mut plus = model.clone();
            plus.params.tensor_mut(i)[[r, c]] += h;
            let mut minus = model.clone();
            minus.params.tensor_mut(i)[[r, c]] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.tensor(i)[[r, c]];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{r},{c}] analytic {an:e} fd {fd:e}", model.params.name(i)));
            }
        }
    }
    worst
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig { d_model: 8, n_heads: 2, enc_layers: 1, dec_layers: 1, max_steps: 4, ..ModelConfig::default() }
}
