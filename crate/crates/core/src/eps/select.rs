//! Top-K expert selection by key/feature cosine similarity, the key-matching
//! loss, and concatenation of the chosen prompts.

use candle_core::Tensor;

use super::pool::{prompt_keys, row_norms, PromptPool};
use crate::error::{Error, Result};
use crate::nn::device;

/// Result of [`select_experts`]. Entries are in rank order: the most similar
/// prompt first.
#[derive(Debug, Clone)]
pub struct ExpertSelection {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    /// `(K * L_p) x d_k`, the chosen prompts stacked in rank order.
    pub concatenated: Tensor,
    /// `K x d_k` keys of the chosen prompts.
    pub selected_keys: Tensor,
    /// The instruction-aware feature the keys were matched against.
    pub query: Tensor,
    pub prompt_len: usize,
}

impl ExpertSelection {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Rows of prompt `rank` inside [`ExpertSelection::concatenated`].
    pub fn block(&self, rank: usize) -> Result<Tensor> {
        Ok(self.concatenated.narrow(0, rank * self.prompt_len, self.prompt_len)?)
    }
}

/// Cosine similarity of each key row to `query`, computed on the host.
pub fn cosine_similarities(keys: &Tensor, query: &Tensor) -> Result<Vec<f64>> {
    let q = query.to_vec1::<f64>()?;
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if qn.is_nan() || qn <= 0.0 {
        return Err(Error::validation("v_s", "zero-norm feature; cosine similarity undefined"));
    }
    let norms = row_norms(keys)?;
    let rows = keys.to_vec2::<f64>()?;
    rows.iter()
        .zip(norms)
        .enumerate()
        .map(|(i, (row, n))| {
            if n.is_nan() || n <= 0.0 {
                return Err(Error::validation(format!("pool.keys[{i}]"), "zero-norm key; cosine similarity undefined"));
            }
            let dot: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
            Ok(dot / (n * qn))
        })
        .collect()
}

/// Picks the `k` prompts whose keys are most similar to `v_s`, lower index
/// first on ties.
pub fn select_experts(v_s: &Tensor, pool: &PromptPool, k: usize) -> Result<ExpertSelection> {
    if k == 0 || k > pool.size() {
        return Err(Error::validation("k", format!("must be in 1..={}, got {k}", pool.size())));
    }
    if v_s.dims() != [pool.key_dim()] {
        return Err(Error::validation("v_s", format!("expected shape [{}], got {:?}", pool.key_dim(), v_s.dims())));
    }
    let keys = prompt_keys(pool)?;
    let sims = cosine_similarities(&keys, v_s)?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);

    let idx = Tensor::from_vec(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), k, &device())?;
    let chosen = pool.prompts().index_select(&idx, 0)?;
    let concatenated = chosen.reshape((k * pool.prompt_len(), pool.key_dim()))?;
    Ok(ExpertSelection {
        similarities: order.iter().map(|&i| sims[i]).collect(),
        indices: order,
        concatenated,
        selected_keys: keys.index_select(&idx, 0)?,
        query: v_s.clone(),
        prompt_len: pool.prompt_len(),
    })
}

/// Negative sum of cosine similarities between the selected keys and the
/// query. Differentiable in both.
pub fn key_matching_loss(selection: &ExpertSelection) -> Result<Tensor> {
    let keys = &selection.selected_keys;
    let q = selection.query.unsqueeze(1)?;
    let dots = keys.matmul(&q)?.squeeze(1)?;
    let key_norms = keys.sqr()?.sum(1)?.sqrt()?;
    let q_norm = selection.query.sqr()?.sum_all()?.sqrt()?;
    let cos = dots.div(&key_norms)?.broadcast_div(&q_norm)?;
    Ok(cos.sum_all()?.neg()?)
}
