use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ActionToken;
use crate::error::{Error, Result};

/// Categorical distribution over action tokens, stored as logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    logits: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(logits: Vec<f64>) -> Self {
        Self { logits }
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    fn log_normalizer(&self) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    pub fn probs(&self) -> Vec<f64> {
        let lse = self.log_normalizer();
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn log_prob(&self, token: ActionToken) -> f64 {
        self.logits[token.flat()] - self.log_normalizer()
    }

    pub fn entropy(&self) -> f64 {
        let lse = self.log_normalizer();
        -self
            .logits
            .iter()
            .map(|l| {
                let lp = l - lse;
                if lp.exp() == 0.0 {
                    0.0
                } else {
                    lp.exp() * lp
                }
            })
            .sum::<f64>()
    }

    /// Most likely token; ties go to the lowest index.
    pub fn argmax(&self) -> ActionToken {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        ActionToken::from_flat(best).expect("distribution over the action vocabulary")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Argmax,
    TopP { p: f64 },
    Temperature { tau: f64 },
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampler::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::InvalidArgument(format!("top-p mass {p} outside (0, 1]")))
            }
            Sampler::Temperature { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::InvalidArgument(format!("temperature {tau} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Sampler::Argmax)
    }

    pub fn sample<R: Rng + ?Sized>(&self, dist: &ActionDistribution, rng: &mut R) -> ActionToken {
        let idx = match *self {
            Sampler::Argmax => return dist.argmax(),
            Sampler::TopP { p } => {
                let (support, weights) = top_p_support(&dist.probs(), p);
                support[categorical(&weights, rng)]
            }
            Sampler::Temperature { tau } => {
                let scaled = ActionDistribution::new(dist.logits.iter().map(|l| l / tau).collect());
                categorical(&scaled.probs(), rng)
            }
        };
        ActionToken::from_flat(idx).expect("index within vocabulary")
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sampler::Argmax => write!(f, "argmax"),
            Sampler::TopP { p } => write!(f, "top-p:{p}"),
            Sampler::Temperature { tau } => write!(f, "temperature:{tau}"),
        }
    }
}

/// Accepts `argmax`, `top-p:<p>` and `temperature:<tau>`.
impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::InvalidArgument(format!("sampler {name} needs a value")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad sampler value in {s:?}")))
        };
        let sampler = match name {
            "argmax" => Sampler::Argmax,
            "top-p" | "top_p" => Sampler::TopP { p: num(arg)? },
            "temperature" => Sampler::Temperature { tau: num(arg)? },
            _ => return Err(Error::InvalidArgument(format!("unknown sampler {s:?}"))),
        };
        sampler.validate()?;
        Ok(sampler)
    }
}

/// Smallest set of most probable tokens whose mass reaches `p`, with
/// renormalized weights. Equal probabilities are ordered by index.
pub fn top_p_support(probs: &[f64], p: f64) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (i, &k) in order.iter().enumerate() {
        mass += probs[k];
        if mass >= p {
            cut = i + 1;
            break;
        }
    }
    order.truncate(cut);
    let total: f64 = order.iter().map(|&k| probs[k]).sum();
    let weights = order.iter().map(|&k| probs[k] / total).collect();
    (order, weights)
}

/// Inverse-CDF draw from normalized weights.
fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::VOCAB;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(k: usize) -> ActionDistribution {
        let mut l = vec![-1e9; VOCAB];
        l[k] = 0.0;
        ActionDistribution::new(l)
    }

    #[test]
    fn one_hot_under_every_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [Sampler::Argmax, Sampler::TopP { p: 0.9 }, Sampler::TopP { p: 1.0 }, Sampler::Temperature { tau: 1.5 }] {
            for _ in 0..20 {
                assert_eq!(s.sample(&one_hot(321), &mut rng).flat(), 321);
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let mut l = vec![0.0; VOCAB];
        l[50] = 2.0;
        l[40] = 2.0;
        assert_eq!(ActionDistribution::new(l).argmax().flat(), 40);
        assert_eq!(ActionDistribution::new(vec![0.0; VOCAB]).argmax().flat(), 0);
    }

    #[test]
    fn top_p_example() {
        let (support, w) = top_p_support(&[0.4, 0.35, 0.25], 0.5);
        assert_eq!(support, vec![0, 1]);
        assert!((w[0] - 8.0 / 15.0).abs() < 1e-15);
        assert!((w[1] - 7.0 / 15.0).abs() < 1e-15);
        assert_eq!(top_p_support(&[0.4, 0.35, 0.25], 1.0).0.len(), 3);
    }

    #[test]
    fn uniform_entropy() {
        let d = ActionDistribution::new(vec![0.3; VOCAB]);
        assert!((d.entropy() - 2.0 * 63f64.ln()).abs() < 1e-9);
        let s: f64 = d.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parse_samplers() {
        assert_eq!("argmax".parse::<Sampler>().unwrap(), Sampler::Argmax);
        assert_eq!("top-p:0.9".parse::<Sampler>().unwrap(), Sampler::TopP { p: 0.9 });
        assert_eq!("temperature:2".parse::<Sampler>().unwrap(), Sampler::Temperature { tau: 2.0 });
        assert!("top-p:1.5".parse::<Sampler>().is_err());
        assert!("greedy".parse::<Sampler>().is_err());
        let s = Sampler::TopP { p: 0.95 };
        assert_eq!(s.to_string().parse::<Sampler>().unwrap(), s);
    }
}
