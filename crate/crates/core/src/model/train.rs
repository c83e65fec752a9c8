//! Teacher-forced cross-entropy training.
//!
//! Gradients are accumulated per fixed-size chunk of sequences and chunks
//! are summed in index order, so results do not depend on the worker count.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{featurize, Dropout, Model, StepFeatures};
use super::params::{Adam, Gradients};
use super::sample::ActionDistribution;
use super::tape::Tape;
use crate::codec::ActionToken;
use crate::error::{Error, Result};
use crate::scene::{build_step_input_indexed, MapIndex, Scenario};

/// Sequences per gradient chunk.
const CHUNK: usize = 8;

/// One agent's featurized steps with their target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub steps: Vec<StepFeatures>,
    pub targets: Vec<usize>,
    /// Steps that contribute to the loss.
    pub mask: Vec<bool>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Teacher-forced sequences for one agent: inputs are built from the
/// logged states, previous-action inputs from the logged tokens. Each
/// maximal run of valid transitions becomes its own sequence.
pub fn sequences_for_agent(
    scenario: &Scenario,
    index: &MapIndex,
    agent: u32,
    tokens: &[ActionToken],
    unified: bool,
) -> Result<Vec<Sequence>> {
    let track = scenario.track(agent)?;
    let steps = track.states.len();
    if tokens.len() + 1 != steps {
        return Err(Error::InvalidArgument(format!(
            "track {agent}: {} tokens for {steps} states",
            tokens.len()
        )));
    }
    let mut out = Vec::new();
    let mut t = 0;
    while t + 1 < steps {
        if !(track.is_valid(t) && track.is_valid(t + 1)) {
            t += 1;
            continue;
        }
        let mut seq = Sequence { steps: vec![], targets: vec![], mask: vec![] };
        let mut prev = None;
        while t + 1 < steps && track.is_valid(t) && track.is_valid(t + 1) {
            let input = build_step_input_indexed(scenario, index, agent, t, prev)?;
            seq.steps.push(featurize(&input, unified));
            seq.targets.push(tokens[t].flat());
            seq.mask.push(true);
            prev = Some(tokens[t]);
            t += 1;
        }
        out.push(seq);
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` over masked-in steps.
pub fn cross_entropy(dists: &[ActionDistribution], targets: &[ActionToken], mask: &[bool]) -> Result<f64> {
    if dists.len() != targets.len() || dists.len() != mask.len() {
        return Err(Error::InvalidArgument("length mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((d, t), &m) in dists.iter().zip(targets).zip(mask) {
        if m {
            sum -= d.log_prob(*t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no valid steps".into()));
    }
    Ok(sum / n as f64)
}

/// Adds `scale * d(sum of masked NLL)/d(params)` into `grads` and returns
/// the unscaled NLL sum.
pub fn accumulate_sequence(model: &Model, seq: &Sequence, scale: f64, grads: &mut Gradients, drop: &mut Dropout) -> f64 {
    let mut tape = Tape::new(&model.params);
    let tok = model.encode_on(&mut tape, &seq.steps, drop);
    let logits = model.decode_on(&mut tape, tok, false, drop);
    let weights = seq.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let loss = tape.nll(logits, seq.targets.clone(), weights);
    let value = tape.value(loss)[[0, 0]];
    tape.backward(loss, scale, grads);
    value
}

/// Gradient of the mean masked cross-entropy over `seqs`, with the loss.
pub fn batch_gradient(model: &Model, seqs: &[&Sequence], dropout_seed: Option<u64>, workers: usize) -> Result<(f64, Gradients)> {
    let count: usize = seqs.iter().map(|s| s.valid_count()).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("batch has no valid steps".into()));
    }
    let scale = 1.0 / count as f64;
    let chunk_job = |(ci, chunk): (usize, &[&Sequence])| {
        let mut g = Gradients::zeros_like(&model.params);
        let mut loss = 0.0;
        for (j, seq) in chunk.iter().enumerate() {
            loss += match dropout_seed {
                Some(seed) if model.config.dropout > 0.0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci * CHUNK + j) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    accumulate_sequence(model, seq, scale, &mut g, &mut Dropout::On { rate: model.config.dropout, rng: &mut rng })
                }
                _ => accumulate_sequence(model, seq, scale, &mut g, &mut Dropout::Off),
            };
        }
        (loss, g)
    };
    let parts: Vec<(f64, Gradients)> = run_pool(workers, || seqs.par_chunks(CHUNK).enumerate().map(chunk_job).collect());
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one chunk");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss * scale, grads))
}

pub(crate) fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    pool.install(f)
}

/// Mean masked cross-entropy over a set of sequences.
pub fn evaluate_ce(model: &Model, seqs: &[Sequence], workers: usize) -> Result<f64> {
    let count: usize = seqs.iter().map(|s| s.valid_count()).sum();
    if count == 0 {
        return Err(Error::InvalidArgument("no valid steps".into()));
    }
    let sums: Vec<Result<f64>> = run_pool(workers, || {
        seqs.par_iter()
            .map(|s| {
                let logits = model.logits(&s.steps)?;
                let mut sum = 0.0;
                for (t, (&y, &m)) in s.targets.iter().zip(&s.mask).enumerate() {
                    if m {
                        let d = ActionDistribution::new(logits.row(t).to_vec());
                        sum -= d.log_prob(ActionToken::from_flat(y)?);
                    }
                }
                Ok(sum)
            })
            .collect()
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / count as f64)
}

/// One-cycle learning-rate schedule: cosine warm-up from `peak / div` to
/// `peak` over the first `pct_start` of steps, then cosine decay to
/// `peak / (div * final_div)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.peak / self.div_factor;
        let min = initial / self.final_div_factor;
        let warm_end = (self.pct_start * self.total_steps as f64 - 1.0).max(0.0);
        let last = (self.total_steps.max(1) - 1) as f64;
        let s = step as f64;
        let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos());
        if s <= warm_end && warm_end > 0.0 {
            cos(initial, self.peak, s / warm_end)
        } else if last > warm_end {
            cos(self.peak, min, (s - warm_end) / (last - warm_end))
        } else {
            self.peak
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr: 2e-4,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            clip_norm: 0.0,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.pct_start) {
            return bad("pct_start", "outside [0, 1]");
        }
        if self.workers == 0 {
            return bad("workers", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_ce: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,steps,train_loss,val_ce,lr\n");
        for e in &self.epochs {
            let val = e.val_ce.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.steps, e.train_loss, val, e.lr);
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn final_val_ce(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_ce)
    }
}

/// Trains `model` in place and returns the per-epoch loss curve.
pub fn train(model: &mut Model, train_set: &[Sequence], val_set: &[Sequence], cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if train_set.iter().all(|s| s.valid_count() == 0) {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        model.check_steps(s.len())?;
    }
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = OneCycle {
        peak: cfg.lr,
        total_steps: batches_per_epoch * cfg.epochs,
        pct_start: cfg.pct_start,
        div_factor: cfg.div_factor,
        final_div_factor: cfg.final_div_factor,
    };
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = LossCurve::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = schedule.lr(step);
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&Sequence> = batch.iter().map(|&i| &train_set[i]).collect();
            if seqs.iter().all(|s| s.valid_count() == 0) {
                continue;
            }
            let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
            let (loss, mut grads) = batch_gradient(model, &seqs, Some(dropout_seed), cfg.workers)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if let Some(i) = grads.first_non_finite() {
                return Err(Error::NonFiniteGradient(model.params.name(i).to_string()));
            }
            if cfg.clip_norm > 0.0 {
                let n = grads.global_norm();
                if n > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / n);
                }
            }
            lr = schedule.lr(step);
            adam.step(&mut model.params, &grads, lr);
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let val_ce = if val_set.is_empty() { None } else { Some(evaluate_ce(model, val_set, cfg.workers)?) };
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_ce:?} lr {lr:.3e}");
        curve.epochs.push(EpochRecord { epoch, steps: step, train_loss, val_ce, lr });
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged { step, loss: f64::NAN });
    }
    Ok(curve)
}
