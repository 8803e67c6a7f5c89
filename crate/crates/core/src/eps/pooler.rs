//! Query-transformer pooling of visual features into an instruction-aware
//! vector `v_s`.

use candle_core::Tensor;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, layer_norm, sinusoidal_positions, Attention, Init, Mlp, ParamStore};
use crate::tokenizer::VOCAB_SIZE;
use crate::vfe::VisualFeatures;

/// Paraphrased alignment instructions. One is drawn per sample.
pub const POOLER_INSTRUCTIONS: [&str; 8] = [
    "Describe the image in detail.",
    "What is happening in this picture?",
    "Provide a detailed description of the scene.",
    "Explain what the people in the image are doing.",
    "Summarize the visual content of the image.",
    "Tell me what you see in this image.",
    "Describe the objects and their relationships in the image.",
    "Give an account of the events shown in the picture.",
];

/// Draws an instruction with a seeded RNG and appends the question and answer.
pub fn pooler_instruction(question: &str, answer: &str, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = POOLER_INSTRUCTIONS.choose(&mut rng).expect("non-empty list");
    format!("{base} Question: {question} Answer: {answer}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolerConfig {
    pub key_dim: usize,
    /// Number of query tokens `L_q`.
    pub queries: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the integrated visual features (`2d`).
    pub visual_dim: usize,
    pub ffn_hidden: usize,
}

impl PoolerConfig {
    pub fn toy(key_dim: usize, visual_dim: usize) -> Self {
        Self { key_dim, queries: 8, layers: 2, heads: 8, visual_dim, ffn_hidden: 2 * key_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_dim == 0 || self.queries == 0 || self.visual_dim == 0 {
            return Err(Error::validation("pooler", "key_dim, queries and visual_dim must be positive"));
        }
        if self.layers > 0 && (self.heads == 0 || !self.key_dim.is_multiple_of(self.heads)) {
            return Err(Error::validation(
                "pooler.heads",
                format!("key_dim {} is not divisible by {} heads", self.key_dim, self.heads),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PoolerLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ffn: Mlp,
}

/// Learnable query tokens over a frozen transformer stack. Queries and
/// instruction tokens share self-attention; only queries cross-attend to the
/// visual features.
#[derive(Debug, Clone)]
pub struct InstructionPooler {
    cfg: PoolerConfig,
    queries: Tensor,
    text_embed: Tensor,
    layers: Vec<PoolerLayer>,
}

impl InstructionPooler {
    pub fn new(store: &mut ParamStore, cfg: &PoolerConfig) -> Result<Self> {
        cfg.validate()?;
        let queries = store.param("pooler.queries", &[cfg.queries, cfg.key_dim], Init::Normal(0.02), true)?;
        let text_embed = store.param("pooler.text_embed", &[VOCAB_SIZE, cfg.key_dim], Init::Normal(0.02), false)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("pooler.layers.{i}");
                Ok(PoolerLayer {
                    self_attn: Attention::new(store, &format!("{p}.self"), cfg.key_dim, cfg.key_dim, cfg.heads, None)?,
                    cross_attn: Attention::new(
                        store,
                        &format!("{p}.cross"),
                        cfg.key_dim,
                        cfg.visual_dim,
                        cfg.heads,
                        None,
                    )?,
                    ffn: Mlp::new(store, &format!("{p}.ffn"), cfg.key_dim, cfg.ffn_hidden, cfg.key_dim, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: *cfg, queries, text_embed, layers })
    }

    pub fn config(&self) -> &PoolerConfig {
        &self.cfg
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    /// Returns `v_s`, the mean of the query outputs.
    pub fn forward(&self, visual: &Tensor, instruction_tokens: &[u32]) -> Result<Tensor> {
        if instruction_tokens.is_empty() {
            return Err(Error::validation("instruction", "must contain at least one token"));
        }
        if let Some(bad) = instruction_tokens.iter().find(|t| **t as usize >= VOCAB_SIZE) {
            return Err(Error::validation("instruction", format!("token {bad} outside vocabulary")));
        }
        let (_, vd) = visual.dims2()?;
        if vd != self.cfg.visual_dim {
            return Err(Error::validation(
                "visual_features",
                format!("expected width {}, got {vd}", self.cfg.visual_dim),
            ));
        }
        let lq = self.cfg.queries;
        let ln = instruction_tokens.len();
        let ids = Tensor::from_vec(instruction_tokens.to_vec(), ln, &device())?;
        let text = self.text_embed.index_select(&ids, 0)?.add(&sinusoidal_positions(ln, self.cfg.key_dim)?)?;
        let mut q = self.queries.clone();
        let mut t = text;
        for layer in &self.layers {
            let x = Tensor::cat(&[&q, &t], 0)?;
            let h = layer_norm(&x)?;
            let x = x.add(&layer.self_attn.forward(&h, &h, None)?)?;
            q = x.narrow(0, 0, lq)?;
            t = x.narrow(0, lq, ln)?;
            q = q.add(&layer.cross_attn.forward(&layer_norm(&q)?, visual, None)?)?;
            let x = Tensor::cat(&[&q, &t], 0)?;
            let x = x.add(&layer.ffn.forward(&layer_norm(&x)?)?)?;
            q = x.narrow(0, 0, lq)?;
            t = x.narrow(0, lq, ln)?;
        }
        Ok(q.mean(0)?)
    }
}

/// `v_s` for one sample.
pub fn instruction_aware_features(
    v: &VisualFeatures,
    instruction_tokens: &[u32],
    pooler: &InstructionPooler,
) -> Result<Tensor> {
    pooler.forward(&v.integrated, instruction_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::encode;

    fn visual(tokens: usize, width: usize) -> VisualFeatures {
        let half = width / 2;
        let r: Vec<f64> = (0..tokens * half).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..tokens * half).map(|i| (i as f64 * 0.11).cos()).collect();
        VisualFeatures::from_branches(
            Tensor::from_vec(r, (tokens, half), &device()).unwrap(),
            Tensor::from_vec(g, (tokens, half), &device()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn output_has_key_dim() {
        let mut store = ParamStore::new(1);
        let pooler = InstructionPooler::new(&mut store, &PoolerConfig::toy(16, 8)).unwrap();
        let v_s = instruction_aware_features(&visual(4, 8), &encode("Describe it."), &pooler).unwrap();
        assert_eq!(v_s.dims(), &[16]);
        assert!(v_s.to_vec1::<f64>().unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut store = ParamStore::new(4);
            let pooler = InstructionPooler::new(&mut store, &PoolerConfig::toy(16, 8)).unwrap();
            pooler.forward(&visual(4, 8).integrated, &encode("Q")).unwrap().to_vec1::<f64>().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn depth_zero_is_query_mean() {
        let mut store = ParamStore::new(2);
        let cfg = PoolerConfig { layers: 0, ..PoolerConfig::toy(4, 8) };
        let pooler = InstructionPooler::new(&mut store, &cfg).unwrap();
        let q = pooler.queries().to_vec2::<f64>().unwrap();
        let v_s = pooler.forward(&visual(3, 8).integrated, &encode("abc")).unwrap().to_vec1::<f64>().unwrap();
        for j in 0..4 {
            let mean = q.iter().map(|row| row[j]).sum::<f64>() / q.len() as f64;
            assert!((v_s[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_instruction_rejected() {
        let mut store = ParamStore::new(1);
        let pooler = InstructionPooler::new(&mut store, &PoolerConfig::toy(16, 8)).unwrap();
        let err = pooler.forward(&visual(4, 8).integrated, &[]).unwrap_err();
        assert_eq!(err.field(), Some("instruction"));
    }

    #[test]
    fn only_queries_trainable() {
        let mut store = ParamStore::new(1);
        InstructionPooler::new(&mut store, &PoolerConfig::toy(16, 8)).unwrap();
        assert_eq!(store.trainable_names(), vec!["pooler.queries".to_string()]);
    }

    #[test]
    fn instruction_draw_is_seeded() {
        let a = pooler_instruction("Why?", "Because.", 7);
        assert_eq!(a, pooler_instruction("Why?", "Because.", 7));
        assert!(a.ends_with("Question: Why? Answer: Because."));
        assert!(POOLER_INSTRUCTIONS.iter().any(|i| a.starts_with(i)));
    }
}
