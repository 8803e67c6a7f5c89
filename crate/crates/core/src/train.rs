//! Training loop for the weighted objective, and detection pretraining of
//! the region branch.

use std::f64::consts::PI;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{
    language_modeling_loss, splice, total_loss, Decoder, DecoderConfig, GenerationMode, LossWeights,
};
use crate::model::{build_examples, PeifgModel, PreparedSample};
use crate::nn::{scalar, ParamStore};
use crate::sample::{load_image, Sample};
use crate::tokenizer::{encode, encode_instruction, EOS_TOKEN, RESPONSE_TOKEN};
use crate::vfe::{detection_target, marked_pair, VfeConfig, VisualFeatureExtractor, DETECTION_INSTRUCTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    pub weights: LossWeights,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    pub mode: GenerationMode,
    #[serde(default)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            Schedule::Cosine => cosine_lr(base, step, total_steps),
            Schedule::Constant => base,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 24,
            lr: 8e-5,
            weights: LossWeights::default(),
            seed: 0,
            mode: GenerationMode::Feedback,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation("train.lr", "must be positive"));
        }
        self.weights.validate()
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_lan: f64,
    pub l_cor: f64,
    pub l_se: f64,
    pub total: f64,
    pub lr: f64,
}

/// Cosine decay from `base` at step 0 towards 0 at `total_steps`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..ParamsAdamW::default() })?)
}

fn batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains all trainable parameters of `model` on `samples`. `on_step` sees
/// every log record as it is produced.
pub fn train(
    model: &PeifgModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let prepared = samples.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let examples = build_examples(samples, cfg.mode, model.config().top_k)?;
    if examples.is_empty() {
        return Err(Error::validation("samples", "no training examples"));
    }
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = adam(model.store().trainable_vars(), cfg.lr)?;
    let mut logs = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batches(examples.len(), cfg, epoch) {
            let lr = cfg.schedule.lr(cfg.lr, step, total_steps);
            opt.set_learning_rate(lr);
            let mut lans = Vec::with_capacity(batch.len());
            let mut ses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let ex = &examples[i];
                let out = model.forward_example(&prepared[ex.sample], ex.mode, ex.item)?;
                lans.push(out.l_lan);
                ses.push(out.l_se);
            }
            let n = batch.len() as f64;
            let l_lan = (Tensor::stack(&lans, 0)?.sum_all()? / n)?;
            let l_se = (Tensor::stack(&ses, 0)?.sum_all()? / n)?;
            let l_cor = model.correlation_loss()?;
            let total = total_loss(&l_lan, &l_cor, &l_se, &cfg.weights)?;
            let log = StepLog {
                step,
                epoch,
                l_lan: scalar(&l_lan)?,
                l_cor: scalar(&l_cor)?,
                l_se: scalar(&l_se)?,
                total: scalar(&total)?,
                lr,
            };
            if !log.total.is_finite() {
                return Err(Error::validation("loss", format!("non-finite total at step {step}")));
            }
            opt.backward_step(&total)?;
            tracing::debug!(step, total = log.total, "train step");
            on_step(&log);
            logs.push(log);
            step += 1;
        }
    }
    Ok(logs)
}

/// Mean loss terms over all examples without updating anything.
pub fn evaluate_loss(
    model: &PeifgModel,
    prepared: &[PreparedSample],
    mode: GenerationMode,
    weights: &LossWeights,
) -> Result<StepLog> {
    let samples: Vec<Sample> = prepared.iter().map(|p| p.sample.clone()).collect();
    let examples = build_examples(&samples, mode, model.config().top_k)?;
    let (mut lan, mut se) = (0.0, 0.0);
    for ex in &examples {
        let out = model.forward_example(&prepared[ex.sample], ex.mode, ex.item)?;
        lan += scalar(&out.l_lan)?;
        se += scalar(&out.l_se)?;
    }
    let n = examples.len().max(1) as f64;
    let cor = scalar(&model.correlation_loss()?)?;
    let (lan, se) = (lan / n, se / n);
    Ok(StepLog {
        step: 0,
        epoch: 0,
        l_lan: lan,
        l_cor: cor,
        l_se: se,
        total: lan + weights.lambda_cor * cor + weights.lambda_se * se,
        lr: 0.0,
    })
}

pub const STAGE1_DECODER: &str = "stage1.dec";

/// Region branch plus a small fully trainable decoder of width `d`, trained
/// to list object labels and normalized boxes.
#[derive(Debug)]
pub struct Stage1Model {
    store: ParamStore,
    pub vfe: VisualFeatureExtractor,
    pub decoder: Decoder,
}

/// Cached stage-1 inputs: region patches and the target tokens.
#[derive(Debug, Clone)]
pub struct Stage1Sample {
    pub patches: Tensor,
    pub target: Vec<u32>,
}

impl Stage1Model {
    pub fn new(vfe_cfg: &VfeConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let vfe = VisualFeatureExtractor::new(&mut store, vfe_cfg, true)?;
        let dec_cfg = DecoderConfig { adapter: None, ..DecoderConfig::toy(vfe_cfg.feature_dim) };
        let decoder = Decoder::new(&mut store, STAGE1_DECODER, &dec_cfg, true)?;
        Ok(Self { store, vfe, decoder })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prepare(&self, sample: &Sample) -> Result<Stage1Sample> {
        let image = load_image(&sample.image)?;
        let (high, _) = marked_pair(&image, &sample.objects)?;
        Ok(Stage1Sample {
            patches: self.vfe.region.patches(&high)?,
            target: encode(&detection_target(&sample.objects, image.width(), image.height())?),
        })
    }

    pub fn loss(&self, s: &Stage1Sample) -> Result<Tensor> {
        let v_r = self.vfe.project_region.forward(&self.vfe.region.forward_patches(&s.patches)?)?;
        let tokens = encode_instruction(DETECTION_INSTRUCTION);
        let (prefix, _) = splice(self.decoder.embedding(), &tokens, &v_r, None)?;
        let mut tail = vec![RESPONSE_TOKEN];
        tail.extend_from_slice(&s.target);
        let inputs = Tensor::cat(&[&prefix, &self.decoder.embed_tokens(&tail)?], 0)?;
        let logits = self.decoder.forward(&inputs)?.narrow(0, prefix.dim(0)?, s.target.len() + 1)?;
        let mut labels = s.target.clone();
        labels.push(EOS_TOKEN);
        language_modeling_loss(&logits, &labels, &vec![true; labels.len()])
    }

    /// Saves the region backbone and its projection for reuse in stage 2.
    pub fn save_region(&self, path: &Path) -> Result<()> {
        self.store.save_filtered(path, |n, _| n.starts_with("vfe.region.") || n.starts_with("vfe.proj_r."))
    }
}

/// Detection pretraining. Logs carry the language-modeling loss in both
/// `l_lan` and `total`.
pub fn train_stage1(
    model: &Stage1Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("samples", "no training samples"));
    }
    let prepared = samples.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let total_steps = prepared.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let mut opt = adam(model.store.trainable_vars(), cfg.lr)?;
    let mut logs = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batches(prepared.len(), cfg, epoch) {
            let lr = cfg.schedule.lr(cfg.lr, step, total_steps);
            opt.set_learning_rate(lr);
            let losses = batch.iter().map(|&i| model.loss(&prepared[i])).collect::<Result<Vec<_>>>()?;
            let loss = (Tensor::stack(&losses, 0)?.sum_all()? / batch.len() as f64)?;
            let value = scalar(&loss)?;
            opt.backward_step(&loss)?;
            let log = StepLog { step, epoch, l_lan: value, l_cor: 0.0, l_se: 0.0, total: value, lr };
            on_step(&log);
            logs.push(log);
            step += 1;
        }
    }
    Ok(logs)
}
