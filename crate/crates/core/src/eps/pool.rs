//! Learnable expert prompt pool, its keys and the correlation penalty.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, Init, ParamStore};

pub const POOL_PARAM: &str = "pool.prompts";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Number of prompts `S`.
    pub size: usize,
    /// Rows per prompt `L_p`.
    pub prompt_len: usize,
    pub key_dim: usize,
    pub init_std: f64,
}

impl PoolConfig {
    pub fn new(size: usize, prompt_len: usize, key_dim: usize) -> Self {
        Self { size, prompt_len, key_dim, init_std: 0.02 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::validation("pool.size", "must be at least 1"));
        }
        if self.prompt_len == 0 {
            return Err(Error::validation("pool.prompt_len", "must be at least 1"));
        }
        if self.key_dim == 0 {
            return Err(Error::validation("pool.key_dim", "must be at least 1"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::validation("pool.init_std", "must be positive and finite"));
        }
        Ok(())
    }
}

/// `S x L_p x d_k` prompt tensor.
#[derive(Debug, Clone)]
pub struct PromptPool {
    prompts: Tensor,
}

/// Sidecar describing a saved pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub size: usize,
    pub prompt_len: usize,
    pub key_dim: usize,
}

impl PromptPool {
    /// Registers a trainable pool in `store`.
    pub fn new(store: &mut ParamStore, cfg: &PoolConfig) -> Result<Self> {
        cfg.validate()?;
        let prompts =
            store.param(POOL_PARAM, &[cfg.size, cfg.prompt_len, cfg.key_dim], Init::Normal(cfg.init_std), true)?;
        Ok(Self { prompts })
    }

    /// Wraps an existing rank-3 tensor.
    pub fn from_tensor(prompts: Tensor) -> Result<Self> {
        let dims = prompts.dims();
        if dims.len() != 3 {
            return Err(Error::validation("pool.prompts", format!("expected rank 3, got shape {dims:?}")));
        }
        if dims.contains(&0) {
            return Err(Error::validation("pool.prompts", format!("all dimensions must be positive, got {dims:?}")));
        }
        let values = prompts.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("pool.prompts", "entries must be finite"));
        }
        Ok(Self { prompts })
    }

    pub fn from_vec(values: Vec<f64>, size: usize, prompt_len: usize, key_dim: usize) -> Result<Self> {
        if values.len() != size * prompt_len * key_dim {
            return Err(Error::validation(
                "pool.prompts",
                format!("{} values do not fill {size}x{prompt_len}x{key_dim}", values.len()),
            ));
        }
        Self::from_tensor(Tensor::from_vec(values, (size, prompt_len, key_dim), &device())?)
    }

    pub fn prompts(&self) -> &Tensor {
        &self.prompts
    }

    pub fn size(&self) -> usize {
        self.prompts.dims()[0]
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts.dims()[1]
    }

    pub fn key_dim(&self) -> usize {
        self.prompts.dims()[2]
    }

    pub fn meta(&self) -> PoolMeta {
        PoolMeta { size: self.size(), prompt_len: self.prompt_len(), key_dim: self.key_dim() }
    }

    /// Writes `{"prompts": ...}` as safetensors plus a `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map = HashMap::from([("prompts".to_string(), self.prompts.detach())]);
        candle_core::safetensors::save(&map, path)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    /// Reads a pool written by [`PromptPool::save`]. The result is detached
    /// from any parameter store.
    pub fn load(path: &Path) -> Result<Self> {
        let meta: PoolMeta = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let mut map = candle_core::safetensors::load(path, &device())?;
        let prompts = map.remove("prompts").ok_or_else(|| Error::parse("pool checkpoint has no \"prompts\" tensor"))?;
        let pool = Self::from_tensor(prompts)?;
        if pool.meta() != meta {
            return Err(Error::validation(
                "pool.prompts",
                format!("sidecar says {meta:?} but tensor is {:?}", pool.meta()),
            ));
        }
        Ok(pool)
    }
}

/// Key of each prompt: the mean of its `L_p` rows. Gradients flow back into
/// the pool.
pub fn prompt_keys(pool: &PromptPool) -> Result<Tensor> {
    Ok(pool.prompts.mean(1)?)
}

/// Sum of squared inner products between distinct flattened prompts.
pub fn correlation_loss(pool: &PromptPool) -> Result<Tensor> {
    let s = pool.size();
    let flat = pool.prompts.reshape((s, pool.prompt_len() * pool.key_dim()))?;
    let gram = flat.matmul(&flat.t()?)?;
    let off_diag = Tensor::ones((s, s), gram.dtype(), &device())?.sub(&Tensor::eye(s, gram.dtype(), &device())?)?;
    Ok((gram * off_diag)?.sqr()?.sum_all()?)
}

/// Host-side row norms of `keys`, used to reject zero keys.
pub(crate) fn row_norms(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1::<f64>()?)
}
