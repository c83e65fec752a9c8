//! Tokenized track datasets.
//!
//! One JSON record per line and per agent track: the scenario it came from,
//! the action tokens recovered by the tokenizer and fit statistics.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::ActionToken;
use crate::error::{Error, Result};
use crate::scene::Scenario;
use crate::tokenizer::{tokenize_track_masked, TokenizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub scenario: String,
    pub agent: u32,
    pub tokens: Vec<ActionToken>,
    pub residual_mean: f64,
    pub residual_max: f64,
    /// Share of tokens equal to the generator's tokens, when the scenario
    /// carries them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered: Option<f64>,
}

/// Tokenizes every track of a scenario.
pub fn tokenize_scenario(s: &Scenario, cfg: &TokenizerConfig) -> Result<Vec<TokenRecord>> {
    let mut out = Vec::with_capacity(s.tracks.len());
    for tr in &s.tracks {
        if tr.valid.iter().filter(|&&v| v).count() < 2 {
            continue;
        }
        let tt = tokenize_track_masked(&tr.states, Some(&tr.valid), cfg)?;
        let valid_res: Vec<f64> = tt
            .residuals
            .iter()
            .enumerate()
            .filter(|(t, _)| tr.is_valid(*t + 1))
            .map(|(_, r)| *r)
            .collect();
        let n = valid_res.len().max(1) as f64;
        let recovered = tr.tokens.as_ref().map(|truth| {
            let hits = truth.iter().zip(&tt.tokens).enumerate().filter(|(t, (a, b))| tr.is_valid(*t + 1) && a == b).count();
            let total = (0..truth.len()).filter(|t| tr.is_valid(t + 1)).count().max(1);
            hits as f64 / total as f64
        });
        out.push(TokenRecord {
            scenario: s.id.clone(),
            agent: tr.id(),
            residual_mean: valid_res.iter().sum::<f64>() / n,
            residual_max: valid_res.iter().copied().fold(0.0, f64::max),
            tokens: tt.tokens,
            recovered,
        });
    }
    Ok(out)
}

pub fn save_token_dataset(records: &[TokenRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_token_dataset(path: impl AsRef<Path>) -> Result<Vec<TokenRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}
