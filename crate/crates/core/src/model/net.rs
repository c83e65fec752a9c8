//! Scene encoder, temporal decoder and action head.
//!
//! Each step's scene is a set of elements (target, neighbour box edges, map
//! segments, lights) in the target's frame. A stack of set self-attention
//! blocks fuses them and an attention pool with a learned query reduces the
//! set to one step token. Step tokens, plus a learned position embedding,
//! go through a causal transformer and a linear head over the action
//! vocabulary.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::codec::VOCAB;
use crate::error::{Error, Result};
use crate::scene::SceneStepInput;

/// Positions and lengths are multiplied by this before entering the network.
pub const FEATURE_SCALE: f64 = 0.1;
/// Width of the raw per-element feature row.
pub const ELEMENT_FEATURES: usize = 7;

// Element type ids for the type embedding table.
const TYPE_TARGET: usize = 0;
const TYPE_AGENT: usize = 3;
const TYPE_MAP: usize = 6;
const TYPE_LIGHT: usize = 10;
const NUM_TYPES: usize = 14;

/// Index of the "no previous action" row of the action embedding.
pub const NO_PREV: usize = VOCAB;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab: usize,
    pub dropout: f64,
    /// Lower-triangular mask in the temporal decoder.
    pub causal_attention: bool,
    /// Agents enter as four box-edge vectors sharing the map-vector encoder
    /// instead of one pose element with its own encoder.
    pub unified_spatial_repr: bool,
    /// Add an embedding of the previous action to each step token.
    pub u_embedding: bool,
    /// Rows of the position embedding; longest sequence the model accepts.
    pub max_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            enc_layers: 3,
            dec_layers: 3,
            vocab: VOCAB,
            dropout: 0.0,
            causal_attention: true,
            unified_spatial_repr: true,
            u_embedding: true,
            max_steps: 64,
        }
    }
}

impl ModelConfig {
    /// Ablation baseline: all three switches off.
    pub fn base() -> Self {
        Self { causal_attention: false, unified_spatial_repr: false, u_embedding: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model", format!("{} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab != VOCAB {
            return bad("vocab", format!("must be {VOCAB}, got {}", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be positive".into());
        }
        Ok(())
    }
}

/// Raw element rows for one step, before embedding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepFeatures {
    /// Rows for the shared vector encoder.
    pub vectors: Vec<[f64; ELEMENT_FEATURES]>,
    pub vector_types: Vec<usize>,
    /// Rows for the separate agent encoder (only when agents are not
    /// represented as edge vectors).
    pub agents: Vec<[f64; ELEMENT_FEATURES]>,
    pub agent_types: Vec<usize>,
    pub prev: usize,
}

impl StepFeatures {
    pub fn len(&self) -> usize {
        self.vectors.len() + self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn featurize(input: &SceneStepInput, unified: bool) -> StepFeatures {
    let k = FEATURE_SCALE;
    let mut f = StepFeatures {
        prev: input.prev_token.map_or(NO_PREV, |t| t.flat()),
        ..Default::default()
    };
    let t = &input.target;
    f.vectors.push([0.0, 0.0, 0.0, 0.0, t.v * k, t.length * k, t.width * k]);
    f.vector_types.push(TYPE_TARGET + t.kind.index());
    for n in &input.neighbors {
        let ty = TYPE_AGENT + n.kind.index();
        if unified {
            for e in &n.edges {
                f.vectors.push([
                    e.start.x * k,
                    e.start.y * k,
                    e.end.x * k,
                    e.end.y * k,
                    n.v * k,
                    n.length * k,
                    n.width * k,
                ]);
                f.vector_types.push(ty);
            }
        } else {
            f.agents.push([
                n.center.x * k,
                n.center.y * k,
                n.heading.cos(),
                n.heading.sin(),
                n.v * k,
                n.length * k,
                n.width * k,
            ]);
            f.agent_types.push(ty);
        }
    }
    for m in &input.map {
        let s = &m.segment;
        f.vectors.push([s.start.x * k, s.start.y * k, s.end.x * k, s.end.y * k, 0.0, 0.0, 0.0]);
        f.vector_types.push(TYPE_MAP + m.kind.index());
    }
    for l in &input.lights {
        let p = l.stop_point;
        f.vectors.push([p.x * k, p.y * k, p.x * k, p.y * k, 0.0, 0.0, 0.0]);
        f.vector_types.push(TYPE_LIGHT + l.state.index());
    }
    f
}

/// Network weights plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl Model {
    /// Fresh weights. Linear layers use U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// embeddings U(-0.1, 0.1); norms start at identity and the head at a
    /// small scale so initial predictions are near uniform.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let linear = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            p.insert(&format!("{name}.w"), uniform(rng, fan_in, fan_out, b));
            p.insert(&format!("{name}.b"), uniform(rng, 1, fan_out, b));
        };
        let norm = |p: &mut ParamStore, name: &str| {
            p.insert(&format!("{name}.g"), Array2::ones((1, d)));
            p.insert(&format!("{name}.b"), Array2::zeros((1, d)));
        };

        linear(&mut p, &mut rng, "vec_in1", ELEMENT_FEATURES, d);
        linear(&mut p, &mut rng, "vec_in2", d, d);
        if !config.unified_spatial_repr {
            linear(&mut p, &mut rng, "agent_in1", ELEMENT_FEATURES, d);
            linear(&mut p, &mut rng, "agent_in2", d, d);
        }
        p.insert("type_emb", uniform(&mut rng, NUM_TYPES, d, 0.1));
        for (prefix, layers) in [("enc", config.enc_layers), ("dec", config.dec_layers)] {
            for l in 0..layers {
                let n = format!("{prefix}.{l}");
                norm(&mut p, &format!("{n}.ln1"));
                linear(&mut p, &mut rng, &format!("{n}.qkv"), d, 3 * d);
                linear(&mut p, &mut rng, &format!("{n}.out"), d, d);
                norm(&mut p, &format!("{n}.ln2"));
                linear(&mut p, &mut rng, &format!("{n}.ff1"), d, 2 * d);
                linear(&mut p, &mut rng, &format!("{n}.ff2"), 2 * d, d);
            }
        }
        norm(&mut p, "pool.ln");
        p.insert("pool.query", uniform(&mut rng, 1, d, 0.1));
        linear(&mut p, &mut rng, "pool.kv", d, 2 * d);
        linear(&mut p, &mut rng, "pool.out", d, d);
        if config.u_embedding {
            p.insert("u_emb", uniform(&mut rng, VOCAB + 1, d, 0.1));
        }
        p.insert("pos_emb", uniform(&mut rng, config.max_steps, d, 0.1));
        norm(&mut p, "final_ln");
        p.insert("head.w", uniform(&mut rng, d, VOCAB, 0.01));
        p.insert("head.b", Array2::zeros((1, VOCAB)));
        Ok(Self { config, params: p })
    }

    pub fn num_weights(&self) -> usize {
        self.params.num_weights()
    }

    /// Sets the head to zero so every position predicts the uniform
    /// distribution.
    pub fn zero_head(&mut self) {
        self.params.get_mut("head.w").expect("head").fill(0.0);
        self.params.get_mut("head.b").expect("head").fill(0.0);
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::InvalidArgument("empty step sequence".into()));
        }
        if t > self.config.max_steps {
            return Err(Error::InvalidArgument(format!(
                "sequence of {t} steps exceeds max_steps {}",
                self.config.max_steps
            )));
        }
        Ok(())
    }

    /// Step tokens (`T x d`) on a tape.
    pub fn encode_on(&self, tape: &mut Tape, steps: &[StepFeatures], drop: &mut Dropout) -> Var {
        let cfg = &self.config;
        let mut vec_rows = Vec::new();
        let mut vec_types = Vec::new();
        let mut agent_rows = Vec::new();
        let mut agent_types = Vec::new();
        for s in steps {
            vec_rows.extend_from_slice(&s.vectors);
            vec_types.extend_from_slice(&s.vector_types);
            agent_rows.extend_from_slice(&s.agents);
            agent_types.extend_from_slice(&s.agent_types);
        }
        let embed = |tape: &mut Tape, rows: &[[f64; ELEMENT_FEATURES]], types: Vec<usize>, name: &str| {
            let x = Array2::from_shape_fn((rows.len(), ELEMENT_FEATURES), |(i, j)| rows[i][j]);
            let x = tape.constant(x);
            let h = linear(tape, x, &format!("{name}1"));
            let h = tape.gelu(h);
            let h = linear(tape, h, &format!("{name}2"));
            let table = tape.param("type_emb");
            let ty = tape.gather(table, types);
            tape.add(h, ty)
        };
        let vecs = embed(tape, &vec_rows, vec_types, "vec_in");
        let mut blocks = Vec::with_capacity(steps.len());
        let x = if agent_rows.is_empty() {
            let mut start = 0;
            for s in steps {
                blocks.push((start, s.len()));
                start += s.len();
            }
            vecs
        } else {
            let agents = embed(tape, &agent_rows, agent_types, "agent_in");
            // Interleave so each step's elements are contiguous.
            let mut parts = Vec::new();
            let (mut vi, mut ai, mut start) = (0, 0, 0);
            for s in steps {
                parts.push(tape.slice_rows(vecs, vi, s.vectors.len()));
                if !s.agents.is_empty() {
                    parts.push(tape.slice_rows(agents, ai, s.agents.len()));
                }
                vi += s.vectors.len();
                ai += s.agents.len();
                blocks.push((start, s.len()));
                start += s.len();
            }
            tape.concat_rows(&parts)
        };
        let mut x = x;
        for l in 0..cfg.enc_layers {
            x = self.block(tape, x, &blocks, &format!("enc.{l}"), false, drop);
        }
        let mut tok = self.pool(tape, x, &blocks);
        if cfg.u_embedding {
            let table = tape.param("u_emb");
            let u = tape.gather(table, steps.iter().map(|s| s.prev).collect());
            tok = tape.add(tok, u);
        }
        tok
    }

    /// Logits (`T x VOCAB`) from step tokens on a tape. When `last_only`
    /// the head runs on the final position only.
    pub fn decode_on(&self, tape: &mut Tape, tokens: Var, last_only: bool, drop: &mut Dropout) -> Var {
        let cfg = &self.config;
        let t = tape.shape(tokens).0;
        let table = tape.param("pos_emb");
        let pos = tape.gather(table, (0..t).collect());
        let mut x = tape.add(tokens, pos);
        for l in 0..cfg.dec_layers {
            x = self.block(tape, x, &[(0, t)], &format!("dec.{l}"), cfg.causal_attention, drop);
        }
        if last_only && t > 1 {
            x = tape.slice_rows(x, t - 1, 1);
        }
        let x = norm(tape, x, "final_ln");
        linear(tape, x, "head")
    }

    /// Pre-norm transformer block; attention is restricted to each
    /// `(start, len)` row block.
    fn block(&self, tape: &mut Tape, x: Var, blocks: &[(usize, usize)], name: &str, causal: bool, drop: &mut Dropout) -> Var {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = norm(tape, x, &format!("{name}.ln1"));
        let qkv = linear(tape, h, &format!("{name}.qkv"));
        let single = blocks.len() == 1;
        let mut outs = Vec::with_capacity(blocks.len());
        for &(start, len) in blocks {
            let rows = if single { qkv } else { tape.slice_rows(qkv, start, len) };
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(rows, hd * dh, dh);
                let k = tape.slice_cols(rows, d + hd * dh, dh);
                let v = tape.slice_cols(rows, 2 * d + hd * dh, dh);
                let sc = tape.matmul_bt(q, k);
                let sc = tape.scale(sc, scale);
                let p = tape.softmax(sc, causal);
                per_head.push(tape.matmul(p, v));
            }
            outs.push(if heads == 1 { per_head[0] } else { tape.concat_cols(&per_head) });
        }
        let att = if single { outs[0] } else { tape.concat_rows(&outs) };
        let att = linear(tape, att, &format!("{name}.out"));
        let att = drop.apply(tape, att);
        let x = tape.add(x, att);
        let h = norm(tape, x, &format!("{name}.ln2"));
        let h = linear(tape, h, &format!("{name}.ff1"));
        let h = tape.gelu(h);
        let h = linear(tape, h, &format!("{name}.ff2"));
        let h = drop.apply(tape, h);
        tape.add(x, h)
    }

    /// Attention pool of each row block to a single row.
    fn pool(&self, tape: &mut Tape, x: Var, blocks: &[(usize, usize)]) -> Var {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = norm(tape, x, "pool.ln");
        let kv = linear(tape, h, "pool.kv");
        let query = tape.param("pool.query");
        let qs: Vec<Var> = (0..heads).map(|hd| tape.slice_cols(query, hd * dh, dh)).collect();
        let mut outs = Vec::with_capacity(blocks.len());
        for &(start, len) in blocks {
            let rows = tape.slice_rows(kv, start, len);
            let mut per_head = Vec::with_capacity(heads);
            for (hd, &q) in qs.iter().enumerate() {
                let k = tape.slice_cols(rows, hd * dh, dh);
                let v = tape.slice_cols(rows, d + hd * dh, dh);
                let sc = tape.matmul_bt(q, k);
                let sc = tape.scale(sc, scale);
                let p = tape.softmax(sc, false);
                per_head.push(tape.matmul(p, v));
            }
            outs.push(if heads == 1 { per_head[0] } else { tape.concat_cols(&per_head) });
        }
        let pooled = tape.concat_rows(&outs);
        linear(tape, pooled, "pool.out")
    }

    /// Step token for one scene (`1 x d`), including the previous-action
    /// embedding when enabled.
    pub fn encode_step(&self, input: &SceneStepInput) -> Array2<f64> {
        let f = featurize(input, self.config.unified_spatial_repr);
        self.encode_features(std::slice::from_ref(&f))
    }

    /// Step tokens for pre-featurized steps, one row each.
    pub fn encode_features(&self, steps: &[StepFeatures]) -> Array2<f64> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_on(&mut tape, steps, &mut Dropout::Off);
        tape.value(v).to_owned()
    }

    /// Logits for every position given precomputed step tokens.
    pub fn decode(&self, tokens: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_len(tokens.nrows())?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(tokens.clone());
        let v = self.decode_on(&mut tape, x, false, &mut Dropout::Off);
        Ok(tape.value(v).to_owned())
    }

    /// Logits for the final position only.
    pub fn decode_last(&self, tokens: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_len(tokens.nrows())?;
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(tokens.clone());
        let v = self.decode_on(&mut tape, x, true, &mut Dropout::Off);
        Ok(tape.value(v).row(0).to_vec())
    }

    /// One action distribution per step.
    pub fn forward(&self, inputs: &[SceneStepInput]) -> Result<Vec<super::ActionDistribution>> {
        self.check_len(inputs.len())?;
        let feats: Vec<_> = inputs.iter().map(|i| featurize(i, self.config.unified_spatial_repr)).collect();
        let logits = self.logits(&feats)?;
        Ok(logits.rows().into_iter().map(|r| super::ActionDistribution::new(r.to_vec())).collect())
    }

    /// Logits for featurized steps in one pass.
    pub fn logits(&self, steps: &[StepFeatures]) -> Result<Array2<f64>> {
        self.check_len(steps.len())?;
        let mut tape = Tape::new(&self.params);
        let tok = self.encode_on(&mut tape, steps, &mut Dropout::Off);
        let v = self.decode_on(&mut tape, tok, false, &mut Dropout::Off);
        Ok(tape.value(v).to_owned())
    }

    pub(crate) fn check_steps(&self, t: usize) -> Result<()> {
        self.check_len(t)
    }
}

fn linear(tape: &mut Tape, x: Var, name: &str) -> Var {
    let w = tape.param(&format!("{name}.w"));
    let b = tape.param(&format!("{name}.b"));
    let h = tape.matmul(x, w);
    tape.add_row(h, b)
}

fn norm(tape: &mut Tape, x: Var, name: &str) -> Var {
    let g = tape.param(&format!("{name}.g"));
    let b = tape.param(&format!("{name}.b"));
    tape.layer_norm(x, g, b)
}

/// Dropout source for a forward pass.
pub enum Dropout<'r> {
    Off,
    On { rate: f64, rng: &'r mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Dropout::Off => x,
            Dropout::On { rate, rng } => {
                if *rate <= 0.0 {
                    return x;
                }
                let keep = 1.0 - *rate;
                let (n, m) = tape.shape(x);
                let mask = Array2::from_shape_fn((n, m), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                tape.dropout(x, mask)
            }
        }
    }
}

/// Row `t` of a logits matrix as a vector.
pub fn logits_row(logits: &Array2<f64>, t: usize) -> Vec<f64> {
    logits.slice(s![t, ..]).to_vec()
}
