//! Dataset construction: level classification, distractor and feedback
//! prompts with their response parsers, the human filter rules and the
//! seeded train/test export.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmClient, Transcript};
use crate::sample::{write_jsonl, BloomLevel, Feedback, Sample};
use crate::vfe::BoundingBox;

pub const ANNOTATOR_PREAMBLE: &str = "You are an accurate NLP annotator.";

pub const LEVEL_INSTRUCTION: &str = "Bloom's Taxonomy categorizes cognitive skills into six levels (i.e., Remember, Understand, Apply, Analyze, Evaluate, and Create), guiding educators in assessing and developing critical thinking abilities. Analyze the cognitive processes involved in both the question and answer. Identify the Bloom's Taxonomy level that best corresponds to each.";

/// Distractor request. Asks for five candidates to match the expected
/// `Distractor1..5` output.
pub const DISTRACTOR_INSTRUCTION: &str = "You need to generate the distractors based on the provided visual content, including Event, Object, Place, Question, Answer and Educational Level.\nFirst, accurately identify the knowledge points and potential misconcepts involved in the question. Then generate five corresponding challenging distractors based on the misconcepts that easily lead to errors.\nThe series of data I have provided are as follows:";

pub const FEEDBACK_INSTRUCTION: &str = "You need to generate the feedbacks based on the provided visual content, including Event, Place, Question, Answer, Educational level and Distractor.\nFirst, accurately identify the knowledge points and potential misconcepts involved in the question. Then analyze five corresponding challenging distractors based on the misconcepts that easily lead to errors. Given the errors in the distractor, you point out the error locations and explain the reasons for the errors as feedback. The feedback includes two aspects: the concept of confusion involved in the distractor, and an explanation. Explanation consists of simple declarative sentences, without complex structures and words.\nThe series of data I have provided are as follows:";

pub const DISTRACTOR_COUNT: usize = 5;
pub const RETAINED_DISTRACTORS: usize = 3;

fn require(field: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::validation(field, "must be non-empty"));
    }
    Ok(())
}

/// Educational-level classification prompt.
pub fn build_level_prompt(question: &str, answer: &str) -> Result<String> {
    require("question", question)?;
    require("answer", answer)?;
    Ok(format!("{ANNOTATOR_PREAMBLE}\n{LEVEL_INSTRUCTION}\nQuestion: {question}\nAnswer: {answer}\n"))
}

/// `Label: [x1,y1,x2,y2]` entries joined by `, `.
pub fn format_objects(objects: &[BoundingBox]) -> String {
    objects
        .iter()
        .map(|b| format!("{}: [{},{},{},{}]", capitalize(&b.label), b.x1, b.y1, b.x2, b.y2))
        .collect::<Vec<_>>()
        .join(", ")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistractorPrompt {
    pub text: String,
    /// Set when the sample had no objects and the `Object:` line was left out.
    pub objects_omitted: bool,
}

pub fn build_distractor_prompt(sample: &Sample) -> Result<DistractorPrompt> {
    require("event", &sample.event)?;
    require("place", &sample.place)?;
    require("question", &sample.question)?;
    require("answer", &sample.answer)?;
    let level = sample.level.ok_or_else(|| Error::validation("level", "must be set"))?;
    let mut text =
        format!("{ANNOTATOR_PREAMBLE}\n{DISTRACTOR_INSTRUCTION}\nEvent: {}\nPlace: {}\n", sample.event, sample.place);
    let objects_omitted = sample.objects.is_empty();
    if !objects_omitted {
        text.push_str(&format!("Object: {}\n", format_objects(&sample.objects)));
    }
    text.push_str(&format!("Question: {}\nAnswer: {}\nEducational Level: {level}.\n", sample.question, sample.answer));
    Ok(DistractorPrompt { text, objects_omitted })
}

/// Feedback prompt over the given (already filtered) distractors.
pub fn build_feedback_prompt(sample: &Sample, distractors: &[String]) -> Result<String> {
    if distractors.is_empty() {
        return Err(Error::validation("distractors", "need at least one distractor"));
    }
    require("event", &sample.event)?;
    require("place", &sample.place)?;
    require("question", &sample.question)?;
    require("answer", &sample.answer)?;
    let level = sample.level.ok_or_else(|| Error::validation("level", "must be set"))?;
    let mut text = format!(
        "{ANNOTATOR_PREAMBLE}\n{FEEDBACK_INSTRUCTION}\nEvent: {}\nPlace: {}\nQuestion: {}\nAnswer: {}\nEducational level: {level}\n",
        sample.event, sample.place, sample.question, sample.answer
    );
    for (i, d) in distractors.iter().enumerate() {
        require(&format!("distractors[{i}]"), d)?;
        text.push_str(&format!("Distractor{}: {d}\n", i + 1));
    }
    Ok(text)
}

/// Strips a trailing LaTeX line break and surrounding whitespace.
fn clean(s: &str) -> &str {
    s.trim().trim_end_matches("\\\\").trim()
}

/// First Bloom level named in the response, preferring an
/// `Educational level:` line.
pub fn parse_level(response: &str) -> Result<BloomLevel> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)educational\s+level\s*[:：]\s*([A-Za-z]+)").expect("valid regex"));
    if let Some(c) = re.captures(response) {
        if let Ok(l) = c[1].parse() {
            return Ok(l);
        }
    }
    let lower = response.to_lowercase();
    BloomLevel::ALL
        .into_iter()
        .filter_map(|l| lower.find(&l.as_str().to_lowercase()).map(|p| (p, l)))
        .min_by_key(|(p, _)| *p)
        .map(|(_, l)| l)
        .ok_or_else(|| Error::parse("no educational level in response"))
}

fn labeled_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*(distractor|feedback)\s*(\d+)\s*[:：]\s*(.*)$").expect("valid regex"))
}

/// `Distractor1..5` lines, ordered by number.
pub fn parse_distractors(response: &str) -> Result<Vec<String>> {
    let mut found = BTreeMap::new();
    for line in response.lines() {
        let Some(c) = labeled_line().captures(line) else { continue };
        if !c[1].eq_ignore_ascii_case("distractor") {
            continue;
        }
        let n: usize = c[2].parse().map_err(|_| Error::parse(format!("bad label in {line:?}")))?;
        let text = clean(&c[3]);
        if (1..=DISTRACTOR_COUNT).contains(&n) && !text.is_empty() {
            found.entry(n).or_insert_with(|| text.to_string());
        }
    }
    if found.len() < DISTRACTOR_COUNT {
        return Err(Error::parse(format!("expected {DISTRACTOR_COUNT} distractors, parsed {}", found.len())));
    }
    Ok(found.into_values().collect())
}

/// Inverse of [`parse_distractors`].
pub fn format_distractors(items: &[String]) -> String {
    items.iter().enumerate().map(|(i, d)| format!("Distractor{}: {d}\n", i + 1)).collect()
}

/// `FeedbackN:` blocks each holding a `Misconception:` and an
/// `Explanation:` line. Exactly `expected` blocks are required.
pub fn parse_feedback(response: &str, expected: usize) -> Result<Vec<Feedback>> {
    static FIELD: OnceLock<Regex> = OnceLock::new();
    let field =
        FIELD.get_or_init(|| Regex::new(r"(?i)^\s*(misconception|explanation)\s*[:：]\s*(.*)$").expect("valid regex"));
    let mut blocks: BTreeMap<usize, (Option<String>, Option<String>)> = BTreeMap::new();
    let mut current = None;
    for line in response.lines() {
        let mut rest = line;
        if let Some(c) = labeled_line().captures(line) {
            if c[1].eq_ignore_ascii_case("feedback") {
                let n: usize = c[2].parse().map_err(|_| Error::parse(format!("bad label in {line:?}")))?;
                if blocks.insert(n, (None, None)).is_some() {
                    return Err(Error::parse(format!("Feedback{n} appears twice")));
                }
                current = Some(n);
                rest = c.get(3).map_or("", |m| m.as_str());
            }
        }
        let Some(c) = field.captures(rest) else { continue };
        let Some(n) = current else { continue };
        let slot = blocks.get_mut(&n).expect("block opened");
        let text = clean(&c[2]).to_string();
        if c[1].eq_ignore_ascii_case("misconception") {
            slot.0.get_or_insert(text);
        } else {
            slot.1.get_or_insert(text);
        }
    }
    if blocks.len() != expected {
        return Err(Error::parse(format!("expected {expected} feedback blocks, parsed {}", blocks.len())));
    }
    blocks
        .into_iter()
        .map(|(n, (m, e))| match (m, e) {
            (Some(misconception), Some(explanation)) => Ok(Feedback { misconception, explanation }),
            _ => Err(Error::parse(format!("Feedback{n} lacks a misconception or explanation"))),
        })
        .collect()
}

/// Inverse of [`parse_feedback`].
pub fn format_feedback_response(items: &[Feedback]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, f)| {
            format!("Feedback{}:\nMisconception: {}\nExplanation: {}\n", i + 1, f.misconception, f.explanation)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DistractorDecision {
    pub relevant: bool,
    pub has_error: bool,
    #[serde(default)]
    pub rank: Option<u8>,
}

impl DistractorDecision {
    pub fn eligible(&self) -> bool {
        self.relevant && self.has_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackDecision {
    pub accuracy: bool,
    pub clarity: bool,
}

impl FeedbackDecision {
    pub fn keep(&self) -> bool {
        self.accuracy && self.clarity
    }
}

/// One annotator's verdict on a sample's candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub distractors: Vec<DistractorDecision>,
    /// Indexed like `distractors`; empty when feedback has not been produced yet.
    #[serde(default)]
    pub feedbacks: Vec<FeedbackDecision>,
    pub annotator: String,
    /// RFC 3339 time of the decision.
    pub timestamp: String,
}

impl FilterDecision {
    /// Checks the decision against a sample with `candidates` distractors
    /// and `feedbacks` feedback entries.
    pub fn validate(&self, candidates: usize, feedbacks: usize) -> Result<()> {
        if self.distractors.len() != candidates {
            return Err(Error::validation(
                "decision.distractors",
                format!("{} decisions for {candidates} candidates", self.distractors.len()),
            ));
        }
        if !self.feedbacks.is_empty() && self.feedbacks.len() != candidates {
            return Err(Error::validation(
                "decision.feedbacks",
                format!("{} decisions for {candidates} candidates", self.feedbacks.len()),
            ));
        }
        if !self.feedbacks.is_empty() && feedbacks != candidates {
            return Err(Error::validation(
                "sample.feedbacks",
                format!("{feedbacks} feedbacks for {candidates} candidates"),
            ));
        }
        let mut seen = [false; RETAINED_DISTRACTORS];
        let mut eligible = 0;
        for (i, d) in self.distractors.iter().enumerate() {
            eligible += usize::from(d.eligible());
            let Some(r) = d.rank else { continue };
            let field = format!("decision.distractors[{i}].rank");
            if !d.eligible() {
                return Err(Error::validation(field, "only relevant candidates with an error may be ranked"));
            }
            if !(1..=RETAINED_DISTRACTORS as u8).contains(&r) {
                return Err(Error::validation(field, format!("rank {r} outside 1..={RETAINED_DISTRACTORS}")));
            }
            if std::mem::replace(&mut seen[r as usize - 1], true) {
                return Err(Error::validation(field, format!("rank {r} used twice")));
            }
        }
        let ranked = seen.iter().filter(|s| **s).count();
        let want = eligible.min(RETAINED_DISTRACTORS);
        if ranked != want {
            return Err(Error::validation(
                "decision.distractors",
                format!("{ranked} ranked candidates, expected {want} ({eligible} eligible)"),
            ));
        }
        if seen.iter().take(ranked).any(|s| !s) {
            return Err(Error::validation("decision.distractors", "ranks must be contiguous from 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub sample: Sample,
    /// No distractor survived; the sample should be left out of the export.
    pub excluded: bool,
    /// One line per dropped or kept candidate.
    pub trail: Vec<String>,
}

/// Keeps ranked distractors in rank order. When feedback decisions are
/// present, a distractor whose feedback fails accuracy or clarity is
/// dropped together with that feedback so the two lists stay paired.
pub fn apply_filter_decision(sample: &Sample, decision: &FilterDecision) -> Result<FilterOutcome> {
    decision.validate(sample.distractors.len(), sample.feedbacks.len())?;
    let mut ranked: Vec<(u8, usize)> =
        decision.distractors.iter().enumerate().filter_map(|(i, d)| d.rank.map(|r| (r, i))).collect();
    ranked.sort_unstable();
    let mut trail = Vec::new();
    for (i, d) in decision.distractors.iter().enumerate() {
        if !d.relevant {
            trail.push(format!("distractor {i}: dropped, not relevant"));
        } else if !d.has_error {
            trail.push(format!("distractor {i}: dropped, no error"));
        } else if d.rank.is_none() {
            trail.push(format!("distractor {i}: dropped, not ranked"));
        }
    }
    let mut out = sample.clone();
    out.distractors.clear();
    out.feedbacks.clear();
    for (r, i) in ranked {
        if let Some(fd) = decision.feedbacks.get(i) {
            if !fd.keep() {
                trail.push(format!(
                    "distractor {i}: dropped, feedback failed (accuracy={}, clarity={})",
                    fd.accuracy, fd.clarity
                ));
                continue;
            }
            out.feedbacks.push(sample.feedbacks[i].clone());
        }
        trail.push(format!("distractor {i}: kept at rank {r}"));
        out.distractors.push(sample.distractors[i].clone());
    }
    Ok(FilterOutcome { excluded: out.distractors.is_empty(), sample: out, trail })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded random split with `round(n * ratio)` training samples.
pub fn export_dataset(samples: &[Sample], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if samples.is_empty() {
        return Err(Error::validation("samples", "nothing to export"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation("split_ratio", format!("{ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (samples.len() as f64 * ratio).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(DatasetSplit { train: pick(&order[..n_train]), test: pick(&order[n_train..]), seed, ratio })
}

/// Writes `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_split(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &split.train)?;
    write_jsonl(&dir.join("test.jsonl"), &split.test)?;
    Ok(())
}

/// Output of the LLM stages for one sample: level plus five candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub sample: Sample,
    pub objects_omitted: bool,
    pub transcripts: Vec<Transcript>,
}

fn ask(client: &dyn LlmClient, id: &str, prompt: String, log: &mut Vec<Transcript>) -> Result<String> {
    let response = client.complete(&prompt)?;
    log.push(Transcript { sample_id: id.to_string(), prompt, response: response.clone(), scores: None });
    Ok(response)
}

/// Classifies the level and asks for five distractor candidates. Existing
/// distractors and feedback are replaced.
pub fn annotate_distractors(sample: &Sample, client: &dyn LlmClient) -> Result<Annotated> {
    let mut log = Vec::new();
    let mut out = sample.clone();
    let level = ask(client, &sample.id, build_level_prompt(&sample.question, &sample.answer)?, &mut log)?;
    out.level = Some(parse_level(&level)?);
    let prompt = build_distractor_prompt(&out)?;
    let response = ask(client, &sample.id, prompt.text, &mut log)?;
    out.distractors = parse_distractors(&response)?;
    out.feedbacks.clear();
    Ok(Annotated { sample: out, objects_omitted: prompt.objects_omitted, transcripts: log })
}

/// Requests feedback for the sample's current distractors.
pub fn annotate_feedback(sample: &Sample, client: &dyn LlmClient) -> Result<Annotated> {
    let mut log = Vec::new();
    let mut out = sample.clone();
    let response = ask(client, &sample.id, build_feedback_prompt(sample, &sample.distractors)?, &mut log)?;
    out.feedbacks = parse_feedback(&response, sample.distractors.len())?;
    Ok(Annotated { sample: out, objects_omitted: sample.objects.is_empty(), transcripts: log })
}

/// Runs `stage` over every sample on at most `concurrency` threads. Results
/// keep input order; a failure is reported per sample.
pub fn run_batch<F>(samples: &[Sample], concurrency: usize, stage: F) -> Vec<Result<Annotated>>
where
    F: Fn(&Sample) -> Result<Annotated> + Sync,
{
    let workers = concurrency.max(1).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> =
            samples.chunks(chunk).map(|part| scope.spawn(|| part.iter().map(&stage).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("datagen worker panicked")).collect()
    })
}
