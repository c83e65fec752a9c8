//! Preference pairs from rollouts and direct preference optimization.
//!
//! A pair holds two token sequences for the same agent and context: a
//! preferred rollout and a colliding one. Fine-tuning raises the policy's
//! log-ratio against a frozen reference for the preferred sequence relative
//! to the rejected one.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::ActionToken;
use crate::error::{Error, Result};
use crate::metrics::{first_collision, kinematic_stats_tokens, min_clearance};
use crate::model::params::{Adam, Gradients};
use crate::model::tape::Tape;
use crate::model::train::{run_pool, Sequence};
use crate::model::{ActionDistribution, Model};
use crate::rollout::{conditioned_sequence, SimulatedScenario};
use crate::scene::{MapIndex, Scenario, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverProfile {
    /// Prefers any collision-free rollout.
    Safety,
    /// Prefers the fastest collision-free rollout.
    Fast,
    /// Prefers the collision-free rollout with the smallest peak jerk.
    Comfort,
}

impl DriverProfile {
    pub const ALL: [DriverProfile; 3] = [DriverProfile::Safety, DriverProfile::Fast, DriverProfile::Comfort];

    pub fn name(self) -> &'static str {
        match self {
            DriverProfile::Safety => "safety",
            DriverProfile::Fast => "fast",
            DriverProfile::Comfort => "comfort",
        }
    }
}

impl fmt::Display for DriverProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DriverProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown driver profile {s:?} (safety, fast, comfort)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    /// Id of the logged scenario that provides the context.
    pub scenario: String,
    pub agent: u32,
    pub winner: Vec<ActionToken>,
    pub loser: Vec<ActionToken>,
}

/// At most one pair per scenario: the loser is the earliest-colliding
/// rollout and the winner is chosen among collision-free rollouts by the
/// profile's rule (largest clearance, highest mean speed or lowest peak
/// jerk). Ties go to the lowest rollout index.
pub fn build_pairs(rollouts: &[SimulatedScenario], agent: u32, profile: DriverProfile) -> Result<Vec<PreferencePair>> {
    let mut clean = vec![];
    let mut loser: Option<(usize, usize)> = None;
    for (i, sim) in rollouts.iter().enumerate() {
        if !sim.tokens.contains_key(&agent) {
            return Err(Error::InvalidArgument(format!("rollout {i} does not control agent {agent}")));
        }
        match first_collision(sim, agent)? {
            None => clean.push(i),
            Some(k) if loser.is_none_or(|(_, best)| k < best) => loser = Some((i, k)),
            Some(_) => {}
        }
    }
    let (Some((li, _)), false) = (loser, clean.is_empty()) else {
        return Ok(vec![]);
    };
    let score = |i: usize| -> Result<f64> {
        let sim = &rollouts[i];
        let toks = &sim.tokens[&agent];
        let states = sim.future_states(agent)?;
        let st = kinematic_stats_tokens(states, toks, sim.scenario.dt)?;
        Ok(match profile {
            DriverProfile::Safety => min_clearance(sim, agent)?,
            DriverProfile::Fast => st.mean_speed,
            DriverProfile::Comfort => -st.max_abs_jerk,
        })
    };
    let mut wi = clean[0];
    let mut best = score(wi)?;
    for &i in &clean[1..] {
        let s = score(i)?;
        if s > best {
            best = s;
            wi = i;
        }
    }
    let winner = rollouts[wi].tokens[&agent].clone();
    let loser = rollouts[li].tokens[&agent].clone();
    if winner == loser {
        return Ok(vec![]);
    }
    Ok(vec![PreferencePair { scenario: rollouts[wi].scenario.id.clone(), agent, winner, loser }])
}

/// A pair resolved against its scenario: featurized sequences and the
/// frozen reference log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub winner: Sequence,
    pub loser: Sequence,
    pub ref_winner: f64,
    pub ref_loser: f64,
}

/// Sum of masked log-probabilities of a sequence's targets.
pub fn sequence_logprob(model: &Model, seq: &Sequence) -> Result<f64> {
    let logits = model.logits(&seq.steps)?;
    let mut lp = 0.0;
    for (t, (&y, &m)) in seq.targets.iter().zip(&seq.mask).enumerate() {
        if m {
            lp += ActionDistribution::new(logits.row(t).to_vec()).log_prob(ActionToken::from_flat(y)?);
        }
    }
    Ok(lp)
}

/// `log p(y | x)` of `tokens` for `agent` from the scenario's current step,
/// with the agent's states reconstructed from the tokens themselves.
pub fn seq_logprob(model: &Model, scenario: &Scenario, agent: u32, tokens: &[ActionToken]) -> Result<f64> {
    let index = MapIndex::new(scenario, SceneConfig::default());
    let seq = conditioned_sequence(scenario, &index, agent, tokens, model.config.unified_spatial_repr)?;
    sequence_logprob(model, &seq)
}

/// Builds examples for `pairs`, looking contexts up by scenario id.
pub fn prepare_examples(reference: &Model, pairs: &[PreferencePair], scenarios: &[Scenario], workers: usize) -> Result<Vec<DpoExample>> {
    let unified = reference.config.unified_spatial_repr;
    let jobs: Vec<Result<DpoExample>> = run_pool(workers, || {
        pairs
            .par_iter()
            .map(|p| {
                let s = scenarios
                    .iter()
                    .find(|s| s.id == p.scenario)
                    .ok_or_else(|| Error::InvalidArgument(format!("pair refers to unknown scenario {}", p.scenario)))?;
                let index = MapIndex::new(s, SceneConfig::default());
                let winner = conditioned_sequence(s, &index, p.agent, &p.winner, unified)?;
                let loser = conditioned_sequence(s, &index, p.agent, &p.loser, unified)?;
                Ok(DpoExample {
                    ref_winner: sequence_logprob(reference, &winner)?,
                    ref_loser: sequence_logprob(reference, &loser)?,
                    winner,
                    loser,
                })
            })
            .collect()
    });
    jobs.into_iter().collect()
}

/// `-ln sigmoid(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln sigmoid(beta * m)` over log-ratio margins `m`.
pub fn dpo_loss_from_margins(margins: &[f64], beta: f64) -> f64 {
    margins.iter().map(|m| neg_log_sigmoid(beta * m)).sum::<f64>() / margins.len().max(1) as f64
}

/// Log-ratio margin `(log pi(y_w) - ref_w) - (log pi(y_l) - ref_l)`.
pub fn margin(model: &Model, ex: &DpoExample) -> Result<f64> {
    Ok(sequence_logprob(model, &ex.winner)? - ex.ref_winner - (sequence_logprob(model, &ex.loser)? - ex.ref_loser))
}

pub fn dpo_loss(model: &Model, examples: &[DpoExample], beta: f64) -> Result<f64> {
    let margins = examples.iter().map(|e| margin(model, e)).collect::<Result<Vec<_>>>()?;
    Ok(dpo_loss_from_margins(&margins, beta))
}

/// Loss, mean margin and gradient of the mean pair loss.
pub fn dpo_gradient(model: &Model, examples: &[&DpoExample], beta: f64, workers: usize) -> Result<(f64, f64, Gradients)> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no preference pairs".into()));
    }
    let n = examples.len() as f64;
    let job = |chunk: &[&DpoExample]| {
        let mut g = Gradients::zeros_like(&model.params);
        let (mut loss, mut msum) = (0.0, 0.0);
        for ex in chunk {
            let mut tw = Tape::new(&model.params);
            let mut tl = Tape::new(&model.params);
            let (nw, vw) = nll_on(model, &mut tw, &ex.winner);
            let (nl, vl) = nll_on(model, &mut tl, &ex.loser);
            // log pi = -nll
            let m = (-vw - ex.ref_winner) - (-vl - ex.ref_loser);
            loss += neg_log_sigmoid(beta * m) / n;
            msum += m / n;
            let k = beta * sigmoid(-beta * m) / n;
            tw.backward(nw, k, &mut g);
            tl.backward(nl, -k, &mut g);
        }
        (loss, msum, g)
    };
    let parts: Vec<(f64, f64, Gradients)> = run_pool(workers, || examples.par_chunks(4).map(job).collect());
    let mut it = parts.into_iter();
    let (mut loss, mut msum, mut grads) = it.next().expect("non-empty");
    for (l, m, g) in it {
        loss += l;
        msum += m;
        grads.add_assign(&g);
    }
    Ok((loss, msum, grads))
}

fn nll_on(model: &Model, tape: &mut Tape, seq: &Sequence) -> (crate::model::Var, f64) {
    use crate::model::net::Dropout;
    let tok = model.encode_on(tape, &seq.steps, &mut Dropout::Off);
    let logits = model.decode_on(tape, tok, false, &mut Dropout::Off);
    let w = seq.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let v = tape.nll(logits, seq.targets.clone(), w);
    let value = tape.value(v)[[0, 0]];
    (v, value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    /// Constant learning rate.
    pub lr: f64,
    /// Optimizer steps.
    pub steps: usize,
    /// Pairs per step; 0 uses all pairs.
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 1.0, lr: 1e-5, steps: 50, batch_size: 0, seed: 0, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub pairs: usize,
    /// Loss before each step.
    pub losses: Vec<f64>,
    pub initial_margin: f64,
    pub final_margin: f64,
    pub final_loss: f64,
}

/// Fine-tunes a copy of `reference` on the examples; the reference stays
/// frozen.
pub fn dpo_finetune(reference: &Model, examples: &[DpoExample], cfg: &DpoConfig) -> Result<(Model, DpoReport)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if examples.is_empty() {
        return Err(Error::InvalidArgument("no preference pairs".into()));
    }
    if !(cfg.beta > 0.0) {
        return Err(Error::Config { key: "beta".into(), msg: "must be positive".into() });
    }
    let mut model = reference.clone();
    let mut adam = Adam::new(&model.params);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = if cfg.batch_size == 0 { examples.len() } else { cfg.batch_size.min(examples.len()) };
    let mut losses = Vec::with_capacity(cfg.steps);
    let initial_margin = mean_margin(&model, examples)?;
    let mut pos = order.len();
    for step in 0..cfg.steps {
        if pos + batch > order.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let picked: Vec<&DpoExample> = order[pos..pos + batch].iter().map(|&i| &examples[i]).collect();
        pos += batch;
        let (loss, _, grads) = dpo_gradient(&model, &picked, cfg.beta, cfg.workers)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(i) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(model.params.name(i).to_string()));
        }
        adam.step(&mut model.params, &grads, cfg.lr);
        losses.push(loss);
    }
    let final_margin = mean_margin(&model, examples)?;
    let final_loss = dpo_loss(&model, examples, cfg.beta)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: cfg.steps, loss: final_loss });
    }
    Ok((model, DpoReport { pairs: examples.len(), losses, initial_margin, final_margin, final_loss }))
}

pub fn mean_margin(model: &Model, examples: &[DpoExample]) -> Result<f64> {
    let m = examples.iter().map(|e| margin(model, e)).collect::<Result<Vec<_>>>()?;
    Ok(m.iter().sum::<f64>() / m.len().max(1) as f64)
}

pub fn save_pairs(pairs: &[PreferencePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p).expect("pair serializes");
        buf.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Sampler};
    use crate::rollout::{batch_rollouts, RolloutConfig};
    use crate::scene::synth::{generate_synthetic, GenConfig};
    use std::collections::BTreeMap;

    fn tiny(seed: u64) -> Model {
        Model::new(ModelConfig { d_model: 8, n_heads: 2, enc_layers: 1, dec_layers: 1, max_steps: 32, ..ModelConfig::default() }, seed).unwrap()
    }

    fn following() -> Scenario {
        let cfg = GenConfig { car_following: 1, ..GenConfig::empty() };
        generate_synthetic(&cfg, 11).unwrap().remove(0)
    }

    /// A rollout of the ego with given tokens, the leader replayed.
    fn fake(s: &Scenario, toks: Vec<ActionToken>, crash_at: Option<usize>) -> SimulatedScenario {
        let mut sc = s.clone();
        let start = s.current_step();
        if let Some(k) = crash_at {
            let lead = sc.tracks[1].states[start + k];
            sc.tracks[0].states[start + k] = lead;
        }
        SimulatedScenario { scenario: sc, start, horizon: toks.len(), tokens: BTreeMap::from([(0, toks)]) }
    }

    fn toks(a: usize, n: usize) -> Vec<ActionToken> {
        vec![ActionToken::from_indices(a, 31).unwrap(); n]
    }

    #[test]
    fn pair_rules() {
        let s = following();
        let safe = fake(&s, toks(31, 16), None);
        let crash = fake(&s, toks(20, 16), Some(5));
        assert!(build_pairs(&[safe.clone(), safe.clone()], 0, DriverProfile::Safety).unwrap().is_empty());
        let p = build_pairs(&[crash.clone(), safe.clone()], 0, DriverProfile::Safety).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].winner, safe.tokens[&0]);
        assert_eq!(p[0].loser, crash.tokens[&0]);

        // Safety prefers the clean rollout that keeps more room.
        let mut close = fake(&s, toks(33, 16), None);
        let leader = close.scenario.tracks[1].states.clone();
        for (st, l) in close.scenario.tracks[0].states.iter_mut().zip(&leader) {
            let (dx, dy) = (l.x - st.x, l.y - st.y);
            let n = dx.hypot(dy);
            st.x += 0.5 * dx / n;
            st.y += 0.5 * dy / n;
        }
        assert!(first_collision(&close, 0).unwrap().is_none());
        let p = build_pairs(&[close, crash.clone(), safe.clone()], 0, DriverProfile::Safety).unwrap();
        assert_eq!(p[0].winner, safe.tokens[&0]);

        // Fast picks the highest mean speed among clean rollouts.
        let mut speeds = vec![];
        for (i, v) in [4.0, 6.0, 5.0].into_iter().enumerate() {
            let mut r = fake(&s, toks(31 + i, 16), None);
            for st in &mut r.scenario.tracks[0].states {
                st.v = v;
            }
            speeds.push(r);
        }
        let mut set = speeds.clone();
        set.push(crash.clone());
        let p = build_pairs(&set, 0, DriverProfile::Fast).unwrap();
        assert_eq!(p[0].winner, speeds[1].tokens[&0]);

        // Earliest collision is the loser.
        let late = fake(&s, toks(25, 16), Some(9));
        let p = build_pairs(&[late, crash.clone(), safe], 0, DriverProfile::Comfort).unwrap();
        assert_eq!(p[0].loser, crash.tokens[&0]);
    }

    #[test]
    fn loss_examples() {
        assert!((dpo_loss_from_margins(&[0.0], 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(dpo_loss_from_margins(&[1e6], 1.0) < 1e-12);
        let m = 0.37;
        assert!((dpo_loss_from_margins(&[m], 2.0) - neg_log_sigmoid(2.0 * m)).abs() < 1e-15);
        assert!(neg_log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn uniform_model_logprob() {
        let mut m = tiny(0);
        m.zero_head();
        let s = following();
        let lp = seq_logprob(&m, &s, 0, &toks(31, 16)).unwrap();
        assert!((lp + 16.0 * 2.0 * 63f64.ln()).abs() < 1e-9, "{lp}");
        let shorter = seq_logprob(&m, &s, 0, &toks(31, 15)).unwrap();
        assert!(lp < shorter);
    }

    fn examples(m: &Model) -> Vec<DpoExample> {
        let s = following();
        let cfg = RolloutConfig { sampler: Sampler::Temperature { tau: 1.0 }, samples: 2, seed: 3, horizon: 6, ..RolloutConfig::default() };
        let r = batch_rollouts(&s, m, &cfg).unwrap();
        let pair = PreferencePair { scenario: s.id.clone(), agent: 0, winner: r[0].tokens[&0].clone(), loser: r[1].tokens[&0].clone() };
        prepare_examples(m, &[pair], &[s], 1).unwrap()
    }

    #[test]
    fn reference_loss_is_ln2_and_gradient_matches() {
        let m = tiny(1);
        let ex = examples(&m);
        assert!((dpo_loss(&m, &ex, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let refs: Vec<&DpoExample> = ex.iter().collect();
        let beta = 1.5;
        let (_, _, g) = dpo_gradient(&m, &refs, beta, 1).unwrap();
        // At the reference, the gradient is -beta/2 * grad(lp_w - lp_l).
        let i = m.params.index("head.w").unwrap();
        let mut probe = m.clone();
        for (r, c) in [(0, ex[0].winner.targets[2]), (3, ex[0].loser.targets[4]), (5, 17)] {
            let orig = probe.params.tensor(i)[[r, c]];
            let h = 1e-5;
            let f = |p: &Model| sequence_logprob(p, &ex[0].winner).unwrap() - sequence_logprob(p, &ex[0].loser).unwrap();
            probe.params.tensor_mut(i)[[r, c]] = orig + h;
            let (fp, lp) = (f(&probe), dpo_loss(&probe, &ex, beta).unwrap());
            probe.params.tensor_mut(i)[[r, c]] = orig - h;
            let (fm, lm) = (f(&probe), dpo_loss(&probe, &ex, beta).unwrap());
            probe.params.tensor_mut(i)[[r, c]] = orig;
            let fd_loss = (lp - lm) / (2.0 * h);
            let predicted = -beta / 2.0 * (fp - fm) / (2.0 * h);
            assert!((g.tensor(i)[[r, c]] - fd_loss).abs() < 1e-6 * (1.0 + fd_loss.abs()));
            assert!((predicted - fd_loss).abs() < 1e-6 * (1.0 + fd_loss.abs()));
        }
    }

    #[test]
    fn finetune_increases_margin() {
        let m = tiny(2);
        let ex = examples(&m);
        let cfg = DpoConfig { lr: 1e-3, steps: 10, ..DpoConfig::default() };
        let (tuned, report) = dpo_finetune(&m, &ex, &cfg).unwrap();
        assert!(report.initial_margin.abs() < 1e-9);
        assert!(report.final_margin > 0.0);
        assert!(report.final_loss < std::f64::consts::LN_2);
        assert_ne!(tuned, m);
        let (again, _) = dpo_finetune(&m, &ex, &cfg).unwrap();
        assert_eq!(again, tuned);
    }

    #[test]
    fn pairs_roundtrip() {
        let p = vec![PreferencePair { scenario: "a".into(), agent: 3, winner: toks(1, 4), loser: toks(2, 4) }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        save_pairs(&p, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), p);
        assert_eq!("comfort".parse::<DriverProfile>().unwrap(), DriverProfile::Comfort);
        assert!("reckless".parse::<DriverProfile>().is_err());
    }
}
