//! Causal transformer decoder over embedding sequences.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, device, layer_norm, sinusoidal_positions, Attention, Init, Mlp, ParamStore};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    /// Low-rank adapters on every self-attention projection. `None` trains
    /// nothing unless the base itself is trainable.
    pub adapter: Option<AdapterConfig>,
}

impl DecoderConfig {
    pub fn toy(width: usize) -> Self {
        Self {
            width,
            layers: 2,
            heads: 8,
            ffn_hidden: 2 * width,
            vocab: VOCAB_SIZE,
            adapter: Some(AdapterConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "decoder.heads",
                format!("width {} must be a positive multiple of heads {}", self.width, self.heads),
            ));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::validation("decoder.vocab", format!("must be at least {VOCAB_SIZE}")));
        }
        if let Some(a) = self.adapter {
            if a.rank == 0 {
                return Err(Error::validation("adapter.rank", "must be at least 1"));
            }
            if !(a.alpha.is_finite() && a.alpha > 0.0) {
                return Err(Error::validation("adapter.alpha", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn: Attention,
    ffn: Mlp,
}

/// Pre-norm decoder with sinusoidal positions. Base weights are created
/// frozen unless `trainable_base` is set.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    embed: Tensor,
    blocks: Vec<Block>,
    head: Tensor,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &DecoderConfig, trainable_base: bool) -> Result<Self> {
        cfg.validate()?;
        let lora = cfg.adapter.map(|a| (a.rank, a.alpha));
        let w = cfg.width;
        let embed = store.param(&format!("{prefix}.embed"), &[cfg.vocab, w], Init::Normal(1.0), trainable_base)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                let attn = Attention::with_base(store, &format!("{p}.attn"), w, w, cfg.heads, lora, trainable_base)?;
                let ffn = Mlp::new(store, &format!("{p}.ffn"), w, cfg.ffn_hidden, w, trainable_base)?;
                Ok(Block { attn, ffn })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = store.param(
            &format!("{prefix}.head"),
            &[cfg.vocab, w],
            Init::Normal(1.0 / (w as f64).sqrt()),
            trainable_base,
        )?;
        Ok(Self { cfg: *cfg, embed, blocks, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embed
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        if let Some(bad) = tokens.iter().find(|t| **t as usize >= self.cfg.vocab) {
            return Err(Error::validation("tokens", format!("token {bad} outside vocabulary")));
        }
        let ids = Tensor::from_vec(tokens.to_vec(), tokens.len(), &device())?;
        Ok(self.embed.index_select(&ids, 0)?)
    }

    /// Logits (`T x vocab`) for an embedded sequence (`T x width`). Row `t`
    /// scores the token at position `t + 1`.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let (t, w) = inputs.dims2()?;
        if w != self.cfg.width {
            return Err(Error::validation(
                "inputs",
                format!("width {w} does not match decoder width {}", self.cfg.width),
            ));
        }
        let mask = causal_mask(t)?;
        let mut x = inputs.add(&sinusoidal_positions(t, w)?)?;
        for b in &self.blocks {
            let h = layer_norm(&x)?;
            x = x.add(&b.attn.forward(&h, &h, Some(&mask))?)?;
            x = x.add(&b.ffn.forward(&layer_norm(&x)?)?)?;
        }
        Ok(layer_norm(&x)?.matmul(&self.head.t()?)?)
    }
}
