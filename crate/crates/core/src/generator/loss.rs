//! Language-modeling loss and the weighted training objective.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, log_softmax_last};

/// Weights of the correlation and key-matching terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cor: f64,
    pub lambda_se: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cor: 0.1, lambda_se: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cor", self.lambda_cor), ("lambda_se", self.lambda_se)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(
                    format!("loss.{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Rows of `logits` paired with `targets`, weighted by `weight` where
/// `mask` is set.
fn masked_target_logprob(logits: &Tensor, targets: &[u32], mask: &[bool], weight: f64) -> Result<Tensor> {
    let (rows, vocab) = logits.dims2()?;
    if targets.len() != mask.len() {
        return Err(Error::validation("mask", format!("{} mask entries for {} targets", mask.len(), targets.len())));
    }
    if targets.len() > rows {
        return Err(Error::validation("targets", format!("{} targets but only {rows} logit rows", targets.len())));
    }
    let n = targets.len();
    let mut select = vec![0.0; n * vocab];
    for (t, (&tok, &m)) in targets.iter().zip(mask).enumerate() {
        if (tok as usize) >= vocab {
            return Err(Error::validation("targets", format!("token {tok} outside vocabulary")));
        }
        if m {
            select[t * vocab + tok as usize] = weight;
        }
    }
    let select = Tensor::from_vec(select, (n, vocab), &device())?;
    let logp = log_softmax_last(&logits.narrow(0, 0, n)?)?;
    Ok((logp * select)?.sum_all()?)
}

/// Mean negative log-likelihood of `targets` over masked positions. Row `t`
/// of `logits` scores `targets[t]`.
pub fn language_modeling_loss(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::validation("mask", "no supervised positions"));
    }
    Ok(masked_target_logprob(logits, targets, mask, 1.0 / count as f64)?.neg()?)
}

/// Summed log-likelihood of `targets` over masked positions.
pub fn sequence_log_prob(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    masked_target_logprob(logits, targets, mask, 1.0)
}

/// `l_lan + lambda_cor * l_cor + lambda_se * l_se`.
pub fn total_loss(l_lan: &Tensor, l_cor: &Tensor, l_se: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(l_lan.add(&(l_cor * w.lambda_cor)?)?.add(&(l_se * w.lambda_se)?)?)
}

/// Scalar version of [`total_loss`], used when logging.
pub fn total_loss_value(l_lan: f64, l_cor: f64, l_se: f64, w: &LossWeights) -> f64 {
    l_lan + w.lambda_cor * l_cor + w.lambda_se * l_se
}
