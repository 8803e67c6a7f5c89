//! The assembled feedback/distractor generator.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::eps::{
    correlation_loss, key_matching_loss, pooler_instruction, select_experts, ExpertSelection, InstructionPooler,
    PoolConfig, PoolerConfig, PromptPool,
};
use crate::error::{Error, Result};
use crate::generator::{
    assemble_distractor_instruction, assemble_instruction, language_modeling_loss, sequence_log_prob, splice,
    DecodeConfig, Decoder, DecoderConfig, ExpertBlock, Generation, GenerationMode, Sampler, SplicePlan,
};
use crate::nn::{stable_hash, Mlp, ParamStore};
use crate::sample::{load_image, Sample};
use crate::tokenizer::{decode, encode, encode_instruction, EOS_TOKEN, RESPONSE_TOKEN};
use crate::vfe::{marked_pair, VfeConfig, VisualFeatureExtractor, VisualFeatures};

pub const DECODER_PREFIX: &str = "gen";
pub const EXPERT_PROJ: &str = "gen.expert_proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub vfe: VfeConfig,
    pub pool: PoolConfig,
    /// Number of selected prompts `K`.
    pub top_k: usize,
    pub pooler: PoolerConfig,
    pub decoder: DecoderConfig,
    pub expert_hidden: usize,
}

impl ModelConfig {
    /// `d = 64`, decoder width 128, `S = 10`, `L_p = 5`, `K = 3`.
    pub fn toy(seed: u64) -> Self {
        let vfe = VfeConfig::toy(seed);
        let width = 2 * vfe.feature_dim;
        let key_dim = 64;
        Self {
            seed,
            pool: PoolConfig::new(10, 5, key_dim),
            top_k: 3,
            pooler: PoolerConfig::toy(key_dim, width),
            decoder: DecoderConfig::toy(width),
            expert_hidden: width,
            vfe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vfe.validate()?;
        self.pool.validate()?;
        self.pooler.validate()?;
        self.decoder.validate()?;
        let width = 2 * self.vfe.feature_dim;
        if self.decoder.width != width {
            return Err(Error::validation(
                "decoder.width",
                format!("must equal twice the feature dim ({width}), got {}", self.decoder.width),
            ));
        }
        if self.pooler.visual_dim != width {
            return Err(Error::validation(
                "pooler.visual_dim",
                format!("must equal {width}, got {}", self.pooler.visual_dim),
            ));
        }
        if self.pooler.key_dim != self.pool.key_dim {
            return Err(Error::validation("pooler.key_dim", format!("must equal pool.key_dim {}", self.pool.key_dim)));
        }
        if self.top_k == 0 || self.top_k > self.pool.size {
            return Err(Error::validation("top_k", format!("must be in 1..={}, got {}", self.pool.size, self.top_k)));
        }
        if self.expert_hidden == 0 {
            return Err(Error::validation("expert_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Per-sample inputs that do not depend on trainable weights: frozen
/// backbone outputs and the pooler instruction tokens.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: Sample,
    pub region_raw: Tensor,
    pub global_raw: Tensor,
    pub pooler_tokens: Vec<u32>,
}

/// One supervised sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub sample: usize,
    pub mode: GenerationMode,
    /// Distractor index: the one being explained in feedback mode, the gold
    /// target in distractor mode.
    pub item: usize,
}

/// Expands samples into one feedback example per distractor, or one
/// distractor example per gold distractor.
pub fn build_examples(samples: &[Sample], mode: GenerationMode, top_k: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        let n = match mode {
            GenerationMode::Feedback => {
                if s.feedbacks.len() != s.distractors.len() {
                    return Err(Error::validation(
                        format!("sample[{}].feedbacks", s.id),
                        format!("{} feedbacks for {} distractors", s.feedbacks.len(), s.distractors.len()),
                    ));
                }
                s.distractors.len()
            }
            GenerationMode::Distractor => {
                if s.distractors.len() > top_k {
                    return Err(Error::validation(
                        format!("sample[{}].distractors", s.id),
                        format!("{} gold distractors but only {top_k} selected prompts", s.distractors.len()),
                    ));
                }
                s.distractors.len()
            }
        };
        out.extend((0..n).map(|item| Example { sample: si, mode, item }));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub l_lan: Tensor,
    pub l_se: Tensor,
    pub selection: ExpertSelection,
    pub plan: SplicePlan,
}

/// Instruction embedding plus everything needed to audit it.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub prefix: Tensor,
    pub plan: SplicePlan,
    pub selection: ExpertSelection,
}

#[derive(Debug)]
pub struct PeifgModel {
    cfg: ModelConfig,
    store: ParamStore,
    pub vfe: VisualFeatureExtractor,
    pub pooler: InstructionPooler,
    pub pool: PromptPool,
    pub expert_proj: Mlp,
    pub decoder: Decoder,
}

impl PeifgModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let vfe = VisualFeatureExtractor::new(&mut store, &cfg.vfe, false)?;
        let pooler = InstructionPooler::new(&mut store, &cfg.pooler)?;
        let pool = PromptPool::new(&mut store, &cfg.pool)?;
        let expert_proj =
            Mlp::new(&mut store, EXPERT_PROJ, cfg.pool.key_dim, cfg.expert_hidden, cfg.decoder.width, true)?;
        let decoder = Decoder::new(&mut store, DECODER_PREFIX, &cfg.decoder, false)?;
        Ok(Self { cfg: cfg.clone(), store, vfe, pooler, pool, expert_proj, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prepare(&self, sample: &Sample) -> Result<PreparedSample> {
        let image = load_image(&sample.image)?;
        let (high, low) = marked_pair(&image, &sample.objects)?;
        let (r, g) = self.vfe.backbone_outputs(&high, &low)?;
        let seed = self.cfg.seed ^ stable_hash(&sample.id);
        Ok(PreparedSample {
            sample: sample.clone(),
            region_raw: r.detach(),
            global_raw: g.detach(),
            pooler_tokens: encode(&pooler_instruction(&sample.question, &sample.answer, seed)),
        })
    }

    pub fn features(&self, prep: &PreparedSample) -> Result<VisualFeatures> {
        self.vfe.project(&prep.region_raw, &prep.global_raw)
    }

    pub fn select(&self, prep: &PreparedSample, v: &VisualFeatures) -> Result<ExpertSelection> {
        let v_s = self.pooler.forward(&v.integrated, &prep.pooler_tokens)?;
        select_experts(&v_s, &self.pool, self.cfg.top_k)
    }

    pub fn correlation_loss(&self) -> Result<Tensor> {
        correlation_loss(&self.pool)
    }

    fn instruction_tokens(&self, sample: &Sample, mode: GenerationMode, item: usize) -> Result<Vec<u32>> {
        let ins = match mode {
            GenerationMode::Feedback => {
                let d = sample.distractors.get(item).ok_or_else(|| {
                    Error::validation(format!("sample[{}].distractors[{item}]", sample.id), "missing distractor")
                })?;
                assemble_instruction(&sample.question, &sample.answer, d)?
            }
            GenerationMode::Distractor => assemble_distractor_instruction(&sample.question, &sample.answer)?,
        };
        Ok(encode_instruction(&ins.text))
    }

    /// Selection ranks whose prompts fill the expert slot. Feedback uses all
    /// of them; distractor example `item` uses the `item`-th selected prompt
    /// in ascending pool-index order.
    fn expert_ranks(&self, sel: &ExpertSelection, mode: GenerationMode, item: usize) -> Result<Vec<usize>> {
        match mode {
            GenerationMode::Feedback => Ok((0..sel.k()).collect()),
            GenerationMode::Distractor => {
                let mut by_index: Vec<usize> = sel.indices.clone();
                by_index.sort_unstable();
                let m = *by_index.get(item).ok_or_else(|| {
                    Error::validation("item", format!("no selected prompt for gold distractor {item}"))
                })?;
                Ok(vec![sel.indices.iter().position(|&i| i == m).expect("present")])
            }
        }
    }

    /// Spliced instruction for the given selection ranks.
    pub fn condition(
        &self,
        v: &VisualFeatures,
        selection: ExpertSelection,
        tokens: &[u32],
        ranks: &[usize],
    ) -> Result<Conditioning> {
        let rows = if ranks.len() == selection.k() && ranks.iter().enumerate().all(|(i, r)| i == *r) {
            selection.concatenated.clone()
        } else {
            let blocks = ranks.iter().map(|&r| selection.block(r)).collect::<Result<Vec<_>>>()?;
            Tensor::cat(&blocks, 0)?
        };
        let projected = self.expert_proj.forward(&rows)?;
        let indices: Vec<usize> = ranks.iter().map(|&r| selection.indices[r]).collect();
        let (prefix, plan) = splice(
            self.decoder.embedding(),
            tokens,
            &v.integrated,
            Some(ExpertBlock { embeddings: &projected, prompt_indices: indices }),
        )?;
        Ok(Conditioning { prefix, plan, selection })
    }

    /// Logits scoring `target ++ [EOS]` after `prefix ++ [RESPONSE]`.
    fn response_logits(&self, prefix: &Tensor, target: &[u32]) -> Result<Tensor> {
        let mut tail = vec![RESPONSE_TOKEN];
        tail.extend_from_slice(target);
        let inputs = Tensor::cat(&[prefix, &self.decoder.embed_tokens(&tail)?], 0)?;
        let logits = self.decoder.forward(&inputs)?;
        Ok(logits.narrow(0, prefix.dim(0)?, target.len() + 1)?)
    }

    fn labels(target: &[u32]) -> Vec<u32> {
        let mut labels = target.to_vec();
        labels.push(EOS_TOKEN);
        labels
    }

    pub fn target_text(sample: &Sample, mode: GenerationMode, item: usize) -> Result<String> {
        match mode {
            GenerationMode::Feedback => sample.feedback_text(item),
            GenerationMode::Distractor => sample.distractors.get(item).cloned().ok_or_else(|| {
                Error::validation(format!("sample[{}].distractors[{item}]", sample.id), "missing distractor")
            }),
        }
    }

    /// Builds the conditioning for an example.
    pub fn condition_example(&self, prep: &PreparedSample, mode: GenerationMode, item: usize) -> Result<Conditioning> {
        let v = self.features(prep)?;
        let sel = self.select(prep, &v)?;
        let ranks = self.expert_ranks(&sel, mode, item)?;
        let tokens = self.instruction_tokens(&prep.sample, mode, item)?;
        self.condition(&v, sel, &tokens, &ranks)
    }

    /// Language-modeling and key-matching losses for one example.
    pub fn forward_example(&self, prep: &PreparedSample, mode: GenerationMode, item: usize) -> Result<ForwardOutput> {
        let target = encode(&Self::target_text(&prep.sample, mode, item)?);
        let cond = self.condition_example(prep, mode, item)?;
        let logits = self.response_logits(&cond.prefix, &target)?;
        let labels = Self::labels(&target);
        let l_lan = language_modeling_loss(&logits, &labels, &vec![true; labels.len()])?;
        Ok(ForwardOutput {
            l_lan,
            l_se: key_matching_loss(&cond.selection)?,
            selection: cond.selection,
            plan: cond.plan,
        })
    }

    /// Summed log-likelihood of `text` (plus the end marker) as a response.
    pub fn response_log_prob(&self, cond: &Conditioning, text: &str) -> Result<Tensor> {
        let target = encode(text);
        let labels = Self::labels(&target);
        let logits = self.response_logits(&cond.prefix, &target)?;
        sequence_log_prob(&logits, &labels, &vec![true; labels.len()])
    }

    /// Autoregressive decode after `prefix`. No gradients are kept.
    pub fn decode(&self, prefix: &Tensor, cfg: &DecodeConfig) -> Result<Generation> {
        cfg.validate()?;
        let prefix = prefix.detach();
        let mut sampler = Sampler::new(cfg);
        let mut tokens: Vec<u32> = Vec::new();
        let mut finished = false;
        for _ in 0..cfg.max_new_tokens {
            let mut tail = vec![RESPONSE_TOKEN];
            tail.extend_from_slice(&tokens);
            let inputs = Tensor::cat(&[&prefix, &self.decoder.embed_tokens(&tail)?], 0)?;
            let logits = self.decoder.forward(&inputs)?;
            let last = logits.get(logits.dim(0)? - 1)?.to_vec1::<f64>()?;
            let next = sampler.choose(&last) as u32;
            if next == EOS_TOKEN {
                finished = true;
                break;
            }
            tokens.push(next);
        }
        Ok(Generation { text: decode(&tokens), tokens, truncated: !finished })
    }

    /// Feedback for distractor `item` of the sample.
    pub fn generate_feedback(
        &self,
        prep: &PreparedSample,
        item: usize,
        cfg: &DecodeConfig,
    ) -> Result<(Generation, SplicePlan)> {
        let cond = self.condition_example(prep, GenerationMode::Feedback, item)?;
        Ok((self.decode(&cond.prefix, cfg)?, cond.plan))
    }

    /// One distractor per selected prompt, in selection-rank order.
    pub fn generate_distractors(
        &self,
        prep: &PreparedSample,
        cfg: &DecodeConfig,
    ) -> Result<Vec<(Generation, SplicePlan)>> {
        if self.cfg.top_k != 3 {
            return Err(Error::validation(
                "top_k",
                format!("distractor mode needs exactly 3 selected prompts, got {}", self.cfg.top_k),
            ));
        }
        let v = self.features(prep)?;
        let sel = self.select(prep, &v)?;
        let tokens = self.instruction_tokens(&prep.sample, GenerationMode::Distractor, 0)?;
        (0..sel.k())
            .map(|rank| {
                let cond = self.condition(&v, sel.clone(), &tokens, &[rank])?;
                Ok((self.decode(&cond.prefix, cfg)?, cond.plan))
            })
            .collect()
    }

    /// Writes every parameter plus a JSON config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save_filtered(path, |_, _| true)?;
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Rebuilds a model from [`PeifgModel::save`] output.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let model = Self::new(&cfg)?;
        model.store.load_file(path)?;
        Ok(model)
    }

    /// Overwrites parameters from a safetensors file holding any subset.
    pub fn load_weights(&self, path: &Path) -> Result<()> {
        self.store.load_file(path)
    }
}
