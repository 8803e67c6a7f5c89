//! Token selection: greedy and temperature/nucleus sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    TopP { temperature: f64, top_p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_new_tokens: 192, sampling: Sampling::Greedy, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Sampling::TopP { temperature, top_p } = self.sampling {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::validation("decode.temperature", "must be positive"));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::validation("decode.top_p", "must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Generated tokens (without the end marker) and whether the length limit
/// cut decoding short.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub text: String,
    pub truncated: bool,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`.
pub fn probabilities(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Smallest set of most probable indices whose mass reaches `top_p`, in
/// descending probability order (ties by lower index).
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        keep.push(i);
        mass += probs[i];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    keep
}

/// Stateful token chooser for one decode.
#[derive(Debug, Clone)]
pub struct Sampler {
    sampling: Sampling,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: &DecodeConfig) -> Self {
        Self { sampling: cfg.sampling, rng: ChaCha8Rng::seed_from_u64(cfg.seed) }
    }

    pub fn choose(&mut self, logits: &[f64]) -> usize {
        match self.sampling {
            Sampling::Greedy => argmax(logits),
            Sampling::TopP { temperature, top_p } => {
                let probs = probabilities(logits, temperature);
                let support = nucleus(&probs, top_p);
                let mass: f64 = support.iter().map(|&i| probs[i]).sum();
                let mut u = self.rng.random::<f64>() * mass;
                for &i in &support {
                    u -= probs[i];
                    if u <= 0.0 {
                        return i;
                    }
                }
                *support.last().expect("nucleus is never empty")
            }
        }
    }
}
