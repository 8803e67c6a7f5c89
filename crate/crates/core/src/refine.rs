//! Preference refinement: sample candidate feedback, score it with five
//! diagnostic questions, build preference pairs and optimize the DPO
//! objective against a frozen reference.

use std::sync::OnceLock;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{DecodeConfig, GenerationMode, Sampling};
use crate::llm::{LlmClient, Transcript};
use crate::model::{PeifgModel, PreparedSample};
use crate::nn::{device, scalar, stable_hash};
use crate::sample::{format_feedback, Sample};

pub const DIAGNOSTIC_QUESTIONS: [&str; 5] = [
    "Is the educational level in the generated feedback consistent with the level of the ground truth feedback?",
    "Is the explanation consistent with the given misconception?",
    "Does the explanation provide a reasonable account of the distractor error?",
    "Does the explanation describe why the distractor contradicts the given content?",
    "Can this feedback help you better understand this question towards the correct answer?",
];

pub const ANSWER_FORMAT_INSTRUCTION: &str = "Just give me the answer format like F1: Y N N Y N";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Candidates per sample `M`.
    pub candidates: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Number of (sample, distractor) instances drawn for refinement.
    pub sample_count: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            candidates: 4,
            temperature: 0.8,
            top_p: 0.95,
            sample_count: 800,
            beta: 0.1,
            lr: 8e-5,
            epochs: 1,
            max_new_tokens: 192,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 2 {
            return Err(Error::validation("refine.candidates", "must be at least 2"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::validation("refine.top_p", "must be in (0, 1]"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation("refine.temperature", "must be positive"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::validation("refine.beta", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation("refine.lr", "must be positive"));
        }
        Ok(())
    }

    fn decode(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens: self.max_new_tokens,
            sampling: Sampling::TopP { temperature: self.temperature, top_p: self.top_p },
            seed,
        }
    }
}

/// Yes/no answers to the five questions and their count `s_d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticScore {
    pub answers: [bool; 5],
}

impl DiagnosticScore {
    pub fn score(&self) -> u8 {
        self.answers.iter().filter(|a| **a).count() as u8
    }

    /// `F{label}: Y N ...`
    pub fn format_line(&self, label: usize) -> String {
        let marks: Vec<&str> = self.answers.iter().map(|a| if *a { "Y" } else { "N" }).collect();
        format!("F{label}: {}", marks.join(" "))
    }
}

/// Judge prompt for one sample/distractor and its candidates F1..FM.
pub fn build_diagnostic_prompt(sample: &Sample, item: usize, candidates: &[String]) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::validation("candidates", "need at least one candidate"));
    }
    let distractor = sample
        .distractors
        .get(item)
        .ok_or_else(|| Error::validation(format!("sample[{}].distractors[{item}]", sample.id), "missing distractor"))?;
    let truth = sample
        .feedbacks
        .get(item)
        .ok_or_else(|| Error::validation(format!("sample[{}].feedbacks[{item}]", sample.id), "missing feedback"))?;
    let mut p = String::new();
    p.push_str(&format!("Question: {}\n", sample.question));
    p.push_str(&format!("Answer: {}\n", sample.answer));
    p.push_str(&format!("Distractor: {distractor}\n"));
    p.push_str("Ground truth feedback:\n");
    p.push_str(&format_feedback(sample.level, truth));
    p.push_str("\n\n");
    for (i, c) in candidates.iter().enumerate() {
        p.push_str(&format!("F{}:\n{}\n\n", i + 1, c.trim_end()));
    }
    let labels: Vec<String> = (1..=candidates.len()).map(|i| format!("F{i}")).collect();
    p.push_str(&format!(
        "Analyze the distractors and feedback {}. Answering the following questions as output. {ANSWER_FORMAT_INSTRUCTION} without further explanations, where Y for yes and N for No.\n",
        labels.join(", ")
    ));
    for (i, q) in DIAGNOSTIC_QUESTIONS.iter().enumerate() {
        p.push_str(&format!("Q{n}: {q}\nA{n}: Y/N\n", n = i + 1));
    }
    Ok(p)
}

fn score_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*F\s*(\d+)\s*[:：]\s*(.*?)\s*$").expect("valid regex"))
}

/// Reads `Fi: A A A A A` lines for `i = 1..=m`. Other lines are ignored, and
/// anything after a `\\` line break on a score line is dropped.
pub fn parse_diagnostics(text: &str, m: usize) -> Result<Vec<DiagnosticScore>> {
    let mut found: Vec<Option<DiagnosticScore>> = vec![None; m];
    for line in text.lines() {
        let line = line.split("\\\\").next().unwrap_or_default();
        let Some(caps) = score_line().captures(line) else { continue };
        let label: usize = caps[1].parse().map_err(|_| Error::parse(format!("bad label in {line:?}")))?;
        if label == 0 || label > m {
            continue;
        }
        let marks: Vec<&str> =
            caps[2].split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if marks.len() != 5 {
            return Err(Error::parse(format!("F{label}: expected 5 answers, got {}", marks.len())));
        }
        let mut answers = [false; 5];
        for (a, mark) in answers.iter_mut().zip(&marks) {
            *a = match mark.to_ascii_uppercase().as_str() {
                "Y" | "YES" => true,
                "N" | "NO" => false,
                other => return Err(Error::parse(format!("F{label}: answer {other:?} is not Y or N"))),
            };
        }
        if found[label - 1].is_some() {
            return Err(Error::parse(format!("F{label}: duplicate score line")));
        }
        found[label - 1] = Some(DiagnosticScore { answers });
    }
    found
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::parse(format!("F{}: missing score line", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: String,
    pub chosen: String,
    pub rejected: String,
    pub gap: u8,
}

/// One pair per unordered candidate pair with unequal scores.
pub fn build_preference_pairs(
    context: &str,
    candidates: &[String],
    scores: &[DiagnosticScore],
) -> Result<Vec<PreferencePair>> {
    if candidates.len() != scores.len() {
        return Err(Error::validation(
            "scores",
            format!("{} scores for {} candidates", scores.len(), candidates.len()),
        ));
    }
    let mut pairs = Vec::new();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            let (si, sj) = (scores[i].score(), scores[j].score());
            if si == sj {
                continue;
            }
            let (c, r) = if si > sj { (i, j) } else { (j, i) };
            pairs.push(PreferencePair {
                context: context.to_string(),
                chosen: candidates[c].clone(),
                rejected: candidates[r].clone(),
                gap: si.abs_diff(sj),
            });
        }
    }
    Ok(pairs)
}

/// `-log sigmoid(beta * ((pc - rc) - (pr - rr)))` on tensors holding the
/// policy log-probs; reference values are constants.
pub fn dpo_loss(
    policy_chosen: &Tensor,
    policy_rejected: &Tensor,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Result<Tensor> {
    if !(ref_chosen.is_finite() && ref_rejected.is_finite() && beta.is_finite()) {
        return Err(Error::validation("dpo", "reference log-probs and beta must be finite"));
    }
    let z = ((policy_chosen.sub(policy_rejected)? - (ref_chosen - ref_rejected))? * beta)?;
    softplus(&z.neg()?)
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(pos.add(&tail)?)
}

/// Scalar DPO loss.
pub fn dpo_loss_value(pc: f64, pr: f64, rc: f64, rr: f64, beta: f64) -> Result<f64> {
    if ![pc, pr, rc, rr, beta].iter().all(|v| v.is_finite()) {
        return Err(Error::validation("dpo", "inputs must be finite"));
    }
    let z = beta * ((pc - rc) - (pr - rr));
    Ok((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// `M` independent nucleus samples for distractor `item`.
pub fn sample_candidates(
    model: &PeifgModel,
    prep: &PreparedSample,
    item: usize,
    cfg: &RefinementConfig,
) -> Result<Vec<String>> {
    cfg.validate()?;
    let cond = model.condition_example(prep, GenerationMode::Feedback, item)?;
    let base = cfg.seed ^ stable_hash(&prep.sample.id) ^ (item as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (0..cfg.candidates)
        .map(|j| Ok(model.decode(&cond.prefix, &cfg.decode(base.wrapping_add(j as u64)))?.text))
        .collect()
}

/// A pair bound to its conditioning sample and reference log-probs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub sample: usize,
    pub item: usize,
    pub pair: PreferencePair,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoStepLog {
    pub step: usize,
    pub loss: f64,
    /// Mean `(pc - rc) - (pr - rr)` over the batch before the update.
    pub margin: f64,
}

/// Reference log-probs under the current (pre-refinement) weights.
pub fn score_reference(
    model: &PeifgModel,
    prepared: &[PreparedSample],
    sample: usize,
    item: usize,
    pair: PreferencePair,
) -> Result<ScoredPair> {
    let cond = model.condition_example(&prepared[sample], GenerationMode::Feedback, item)?;
    Ok(ScoredPair {
        sample,
        item,
        ref_chosen: scalar(&model.response_log_prob(&cond, &pair.chosen)?)?,
        ref_rejected: scalar(&model.response_log_prob(&cond, &pair.rejected)?)?,
        pair,
    })
}

/// Mean DPO loss and margin of a batch, with gradients.
pub fn dpo_batch(
    model: &PeifgModel,
    prepared: &[PreparedSample],
    batch: &[&ScoredPair],
    beta: f64,
) -> Result<(Tensor, f64)> {
    let mut losses = Vec::with_capacity(batch.len());
    let mut margin = 0.0;
    for sp in batch {
        let cond = model.condition_example(&prepared[sp.sample], GenerationMode::Feedback, sp.item)?;
        let pc = model.response_log_prob(&cond, &sp.pair.chosen)?;
        let pr = model.response_log_prob(&cond, &sp.pair.rejected)?;
        margin += (scalar(&pc)? - sp.ref_chosen) - (scalar(&pr)? - sp.ref_rejected);
        losses.push(dpo_loss(&pc, &pr, sp.ref_chosen, sp.ref_rejected, beta)?);
    }
    let n = batch.len() as f64;
    Ok(((Tensor::stack(&losses, 0)?.sum_all()? / n)?, margin / n))
}

/// Optimizes DPO over `pairs`, one pair per step, for `cfg.epochs` epochs.
pub fn optimize_dpo(
    model: &PeifgModel,
    prepared: &[PreparedSample],
    pairs: &[ScoredPair],
    cfg: &RefinementConfig,
    mut on_step: impl FnMut(&DpoStepLog),
) -> Result<Vec<DpoStepLog>> {
    cfg.validate()?;
    let mut opt = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW { lr: cfg.lr, weight_decay: 0.0, ..ParamsAdamW::default() },
    )?;
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for &i in &order {
            let (loss, margin) = dpo_batch(model, prepared, &[&pairs[i]], cfg.beta)?;
            let log = DpoStepLog { step: logs.len(), loss: scalar(&loss)?, margin };
            opt.backward_step(&loss)?;
            on_step(&log);
            logs.push(log);
        }
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub transcripts: Vec<Transcript>,
    pub pairs: Vec<ScoredPair>,
    pub steps: Vec<DpoStepLog>,
}

/// Full refinement: draw instances, sample and judge candidates, build
/// pairs, freeze reference log-probs, then optimize.
pub fn refine(
    model: &PeifgModel,
    samples: &[Sample],
    judge: &dyn LlmClient,
    cfg: &RefinementConfig,
    on_step: impl FnMut(&DpoStepLog),
) -> Result<RefineReport> {
    cfg.validate()?;
    let prepared = samples.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let mut instances: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.distractors.len().min(s.feedbacks.len())).map(move |i| (si, i)))
        .collect();
    instances.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    instances.truncate(cfg.sample_count);

    let mut transcripts = Vec::new();
    let mut pairs = Vec::new();
    for &(si, item) in &instances {
        let candidates = sample_candidates(model, &prepared[si], item, cfg)?;
        let prompt = build_diagnostic_prompt(&samples[si], item, &candidates)?;
        let response = judge.complete(&prompt)?;
        let scores = parse_diagnostics(&response, candidates.len())?;
        transcripts.push(Transcript {
            sample_id: samples[si].id.clone(),
            prompt: prompt.clone(),
            response,
            scores: Some(scores.iter().map(DiagnosticScore::score).collect()),
        });
        let context = format!("{}#{item}", samples[si].id);
        for pair in build_preference_pairs(&context, &candidates, &scores)? {
            pairs.push(score_reference(model, &prepared, si, item, pair)?);
        }
    }
    let steps = optimize_dpo(model, &prepared, &pairs, cfg, on_step)?;
    Ok(RefineReport { transcripts, pairs, steps })
}

/// Deterministic offline judge. It reads the ground truth and candidates
/// back out of the diagnostic prompt and answers each question by word
/// overlap.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedJudge;

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|w| w.len() > 2).map(str::to_lowercase).collect()
}

fn overlap(a: &str, b: &str) -> f64 {
    let (wa, wb) = (words(a), words(b));
    if wa.is_empty() || wb.is_empty() {
        return 0.0;
    }
    let hits = wa.iter().filter(|w| wb.contains(w)).count();
    hits as f64 / wa.len().max(wb.len()) as f64
}

fn field<'a>(block: &'a str, name: &str) -> &'a str {
    block
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once(':')?;
            k.trim().eq_ignore_ascii_case(name).then_some(v.trim())
        })
        .unwrap_or("")
}

impl RuleBasedJudge {
    pub fn judge(&self, prompt: &str) -> Result<Vec<DiagnosticScore>> {
        let truth_start =
            prompt.find("Ground truth feedback:\n").ok_or_else(|| Error::parse("prompt has no ground truth block"))?;
        let distractor = field(&prompt[..truth_start], "Distractor");
        let body = &prompt[truth_start + "Ground truth feedback:\n".len()..];
        let analyze = body.find("\nAnalyze the distractors").unwrap_or(body.len());
        let mut blocks = body[..analyze].split("\n\n");
        let truth = blocks.next().unwrap_or("");
        let mut out = Vec::new();
        for (i, block) in blocks.filter(|b| !b.trim().is_empty()).enumerate() {
            let text = block
                .strip_prefix(&format!("F{}:\n", i + 1))
                .ok_or_else(|| Error::parse(format!("candidate block F{} malformed", i + 1)))?;
            let level_ok = !field(text, "Educational level").is_empty()
                && field(text, "Educational level").eq_ignore_ascii_case(field(truth, "Educational level"));
            let mis = field(text, "Misconception");
            let exp = field(text, "Explanation");
            out.push(DiagnosticScore {
                answers: [
                    level_ok,
                    !exp.is_empty() && overlap(mis, exp) > 0.0,
                    overlap(exp, field(truth, "Explanation")) >= 0.3,
                    overlap(&format!("{mis} {exp}"), distractor) >= 0.2,
                    overlap(text, truth) >= 0.5,
                ],
            });
        }
        Ok(out)
    }
}

impl LlmClient for RuleBasedJudge {
    fn complete(&self, prompt: &str) -> Result<String> {
        let scores = self.judge(prompt)?;
        Ok(scores.iter().enumerate().map(|(i, s)| s.format_line(i + 1)).collect::<Vec<_>>().join("\n"))
    }
}

/// Policy log-prob tensor from a plain value, for tests and gradient checks.
pub fn logprob_tensor(v: f64) -> Result<Tensor> {
    Ok(Tensor::new(v, &device())?)
}
