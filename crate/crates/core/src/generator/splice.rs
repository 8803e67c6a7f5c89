//! Replacing placeholder tokens with embedding blocks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::device;
use crate::tokenizer::{EXPERT_TOKEN, IMG_TOKEN};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(Vec<u32>),
    Visual {
        len: usize,
    },
    /// `prompt_indices` records which pool entries fill the block.
    Expert {
        len: usize,
        prompt_indices: Vec<usize>,
    },
}

impl Segment {
    pub fn len(&self) -> usize {
        match self {
            Segment::Text(t) => t.len(),
            Segment::Visual { len } | Segment::Expert { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layout of a spliced sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplicePlan {
    pub segments: Vec<Segment>,
}

impl SplicePlan {
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pool indices routed into the expert block, if any.
    pub fn expert_indices(&self) -> Option<&[usize]> {
        self.segments.iter().find_map(|s| match s {
            Segment::Expert { prompt_indices, .. } => Some(prompt_indices.as_slice()),
            _ => None,
        })
    }
}

/// An expert block together with the pool indices it came from.
#[derive(Debug, Clone)]
pub struct ExpertBlock<'a> {
    pub embeddings: &'a Tensor,
    pub prompt_indices: Vec<usize>,
}

fn count(tokens: &[u32], id: u32) -> usize {
    tokens.iter().filter(|t| **t == id).count()
}

/// Builds the plan without touching any tensors. `<img>` must occur exactly
/// once. `<expert>` must occur exactly once when an expert block is given and
/// not at all otherwise.
pub fn plan_splice(tokens: &[u32], visual_len: usize, expert: Option<(usize, &[usize])>) -> Result<SplicePlan> {
    match count(tokens, IMG_TOKEN) {
        1 => {}
        0 => return Err(Error::validation("instruction", "missing <img> placeholder")),
        n => return Err(Error::validation("instruction", format!("<img> occurs {n} times"))),
    }
    if visual_len == 0 {
        return Err(Error::validation("visual_features", "visual block is empty"));
    }
    let experts = count(tokens, EXPERT_TOKEN);
    match (expert, experts) {
        (Some((0, _)), _) => {
            return Err(Error::validation("experts", "expert block is empty"));
        }
        (Some(_), 1) | (None, 0) => {}
        (Some(_), 0) => return Err(Error::validation("instruction", "missing <expert> placeholder")),
        (None, 1) => return Err(Error::validation("experts", "template has <expert> but no expert block was given")),
        (_, n) => return Err(Error::validation("instruction", format!("<expert> occurs {n} times"))),
    }
    let mut segments = Vec::new();
    let mut text = Vec::new();
    for &t in tokens {
        let block = match t {
            IMG_TOKEN => Segment::Visual { len: visual_len },
            EXPERT_TOKEN => {
                let (len, idx) = expert.expect("checked above");
                Segment::Expert { len, prompt_indices: idx.to_vec() }
            }
            _ => {
                text.push(t);
                continue;
            }
        };
        if !text.is_empty() {
            segments.push(Segment::Text(std::mem::take(&mut text)));
        }
        segments.push(block);
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(SplicePlan { segments })
}

/// Embeds text segments with `embedding` (vocab x width) and inserts the
/// visual and expert blocks at their placeholders.
pub fn splice(
    embedding: &Tensor,
    tokens: &[u32],
    visual: &Tensor,
    expert: Option<ExpertBlock<'_>>,
) -> Result<(Tensor, SplicePlan)> {
    let width = embedding.dim(1)?;
    let check_width = |name: &str, t: &Tensor| -> Result<()> {
        let (_, w) = t.dims2()?;
        if w != width {
            return Err(Error::validation(name, format!("block width {w} does not match decoder width {width}")));
        }
        Ok(())
    };
    check_width("visual_features", visual)?;
    if let Some(e) = &expert {
        check_width("experts", e.embeddings)?;
    }
    let plan = plan_splice(
        tokens,
        visual.dim(0)?,
        expert.as_ref().map(|e| Ok::<_, Error>((e.embeddings.dim(0)?, e.prompt_indices.as_slice()))).transpose()?,
    )?;
    let mut parts = Vec::with_capacity(plan.segments.len());
    for seg in &plan.segments {
        parts.push(match seg {
            Segment::Text(t) => {
                let ids = Tensor::from_vec(t.clone(), t.len(), &device())?;
                embedding.index_select(&ids, 0)?
            }
            Segment::Visual { .. } => visual.clone(),
            Segment::Expert { .. } => expert.as_ref().expect("planned").embeddings.clone(),
        });
    }
    Ok((Tensor::cat(&parts, 0)?, plan))
}
