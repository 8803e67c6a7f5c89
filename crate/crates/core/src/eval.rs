//! Automatic text metrics over generated feedback: BLEU-1..4, ROUGE-L,
//! METEOR (exact matching), CIDEr-D, a pluggable BERTScore and
//! educational-level accuracy.
//!
//! Conventions follow the common captioning evaluation code: corpus BLEU
//! with closest reference length, ROUGE-L with beta 1.2 averaged over
//! sentences, CIDEr-D with reference-set IDF, sigma 6 and a x10 scale.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::BloomLevel;

const MAX_N: usize = 4;

/// Lowercased runs of letters and digits.
pub fn tokenize(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+").expect("valid regex"));
    re.find_iter(&text.to_lowercase()).map(|m| m.as_str().to_string()).collect()
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut out = HashMap::new();
    for k in 1..=n {
        for w in tokens.windows(k) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScores(pub [f64; MAX_N]);

/// Corpus BLEU-1..4 with one reference per hypothesis.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> BleuScores {
    const TINY: f64 = 1e-15;
    const SMALL: f64 = 1e-9;
    let mut guess = [0usize; MAX_N];
    let mut correct = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        let rc = ngram_counts(r, MAX_N);
        for (g, c) in ngram_counts(h, MAX_N) {
            correct[g.len() - 1] += c.min(rc.get(g).copied().unwrap_or(0));
        }
        for (k, slot) in guess.iter_mut().enumerate() {
            *slot += (h.len() + 1).saturating_sub(k + 1);
        }
    }
    let mut out = [0.0; MAX_N];
    let mut prod = 1.0;
    for k in 0..MAX_N {
        prod *= (correct[k] as f64 + TINY) / (guess[k] as f64 + SMALL);
        out[k] = prod.powf(1.0 / (k + 1) as f64);
    }
    let ratio = (hyp_len as f64 + TINY) / (ref_len as f64 + SMALL);
    if ratio < 1.0 {
        let bp = (1.0 - 1.0 / ratio).exp();
        out.iter_mut().for_each(|v| *v *= bp);
    }
    BleuScores(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure with beta 1.2.
pub fn rouge_l_sentence(hyp: &[String], reference: &[String]) -> f64 {
    const BETA: f64 = 1.2;
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(reference, hyp) as f64;
    let (p, r) = (l / hyp.len() as f64, l / reference.len() as f64);
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    (1.0 + BETA * BETA) * p * r / (r + BETA * BETA * p)
}

/// Sentence METEOR with exact unigram matching (alpha 0.9, beta 3,
/// gamma 0.5). Hypothesis words are aligned right to left, each to the
/// rightmost free reference occurrence.
pub fn meteor_sentence(hyp: &[String], reference: &[String]) -> f64 {
    const ALPHA: f64 = 0.9;
    const BETA: f64 = 3.0;
    const GAMMA: f64 = 0.5;
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        positions.entry(w).or_default().push(j);
    }
    let mut matches = Vec::new();
    for (i, w) in hyp.iter().enumerate().rev() {
        if let Some(j) = positions.get_mut(w.as_str()).and_then(Vec::pop) {
            matches.push((i, j));
        }
    }
    if matches.is_empty() {
        return 0.0;
    }
    matches.sort_unstable();
    let chunks = 1 + matches.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let m = matches.len() as f64;
    let (p, r) = (m / hyp.len() as f64, m / reference.len() as f64);
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    (1.0 - GAMMA * (chunks as f64 / m).powf(BETA)) * fmean
}

type TfIdf<'a> = (Vec<HashMap<Ngram<'a>, f64>>, [f64; MAX_N], usize);

/// tf-idf vectors per order, their norms, and the bigram count that the
/// reference implementation uses as the length.
fn tfidf<'a>(counts: &HashMap<Ngram<'a>, usize>, df: &HashMap<Ngram<'_>, f64>, log_n: f64) -> TfIdf<'a> {
    let mut vec: Vec<HashMap<Ngram<'a>, f64>> = vec![HashMap::new(); MAX_N];
    let mut norm = [0.0f64; MAX_N];
    let mut length = 0usize;
    for (g, &tf) in counts {
        let idf = log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let v = tf as f64 * idf;
        vec[g.len() - 1].insert(*g, v);
        norm[g.len() - 1] += v * v;
        if g.len() == 2 {
            length += tf;
        }
    }
    (vec, norm.map(f64::sqrt), length)
}

/// Corpus CIDEr-D with a single reference per hypothesis.
pub fn cider_d(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    const SIGMA: f64 = 6.0;
    if hyps.is_empty() {
        return 0.0;
    }
    let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, MAX_N)).collect();
    let mut df: HashMap<Ngram<'_>, f64> = HashMap::new();
    for rc in &ref_counts {
        for g in rc.keys() {
            *df.entry(*g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (refs.len() as f64).ln();
    let total: f64 = hyps
        .iter()
        .zip(&ref_counts)
        .map(|(h, rc)| {
            let hc = ngram_counts(h, MAX_N);
            let (vh, nh, lh) = tfidf(&hc, &df, log_n);
            let (vr, nr, lr) = tfidf(rc, &df, log_n);
            let delta = lh as f64 - lr as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let sum: f64 = (0..MAX_N)
                .map(|n| {
                    let mut val: f64 = vh[n]
                        .iter()
                        .map(|(g, &x)| {
                            let y = vr[n].get(g).copied().unwrap_or(0.0);
                            x.min(y) * y
                        })
                        .sum();
                    if nh[n] != 0.0 && nr[n] != 0.0 {
                        val /= nh[n] * nr[n];
                    }
                    val * penalty
                })
                .sum();
            sum / MAX_N as f64 * 10.0
        })
        .sum();
    total / hyps.len() as f64
}

/// Token embeddings for BERTScore-style greedy matching. A hypothesis and
/// its reference are embedded together so a scorer may share state
/// between them.
pub trait TokenEmbedder: Send + Sync {
    fn embed_pair(&self, hyp: &[String], reference: &[String]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>);
}

/// Offline stand-in: one-hot vectors over the pair's joint vocabulary, so
/// cosine similarity is 1 for equal tokens and 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEmbedder;

impl TokenEmbedder for IdentityEmbedder {
    fn embed_pair(&self, hyp: &[String], reference: &[String]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut vocab: HashMap<&str, usize> = HashMap::new();
        for t in hyp.iter().chain(reference) {
            let next = vocab.len();
            vocab.entry(t.as_str()).or_insert(next);
        }
        let one_hot = |tokens: &[String]| {
            tokens
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; vocab.len()];
                    v[vocab[t.as_str()]] = 1.0;
                    v
                })
                .collect()
        };
        (one_hot(hyp), one_hot(reference))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching F1 between token embeddings.
pub fn bertscore_sentence(embedder: &dyn TokenEmbedder, hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (eh, er) = embedder.embed_pair(hyp, reference);
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter().map(|x| to.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
            / from.len() as f64
    };
    let (p, r) = (best(&eh, &er), best(&er, &eh));
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    /// Not bounded by 1: the usual scale tops out at 10.
    pub cider: f64,
    pub bertscore: f64,
    pub level_accuracy: Option<f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let bounded = [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("meteor", self.meteor),
            ("bertscore", self.bertscore),
            ("level_accuracy", self.level_accuracy.unwrap_or(0.0)),
        ];
        for (name, v) in bounded {
            if !(v.is_finite() && (-1e-12..=1.0 + 1e-9).contains(&v)) {
                return Err(Error::validation(name, format!("{v} outside [0, 1]")));
            }
        }
        if !(self.cider.is_finite() && self.cider >= 0.0) {
            return Err(Error::validation("cider", format!("{} is not a finite non-negative value", self.cider)));
        }
        Ok(())
    }
}

/// All text metrics over paired hypotheses and references.
pub fn compute_metrics(
    hypotheses: &[String],
    references: &[String],
    embedder: &dyn TokenEmbedder,
) -> Result<MetricReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::validation(
            "hypotheses",
            format!("{} hypotheses for {} references", hypotheses.len(), references.len()),
        ));
    }
    if hypotheses.is_empty() {
        return Err(Error::validation("hypotheses", "must be non-empty"));
    }
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| tokenize(s)).collect();
    let r: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();
    let n = h.len() as f64;
    let mean = |f: &dyn Fn(&[String], &[String]) -> f64| h.iter().zip(&r).map(|(a, b)| f(a, b)).sum::<f64>() / n;
    let BleuScores(b) = bleu(&h, &r);
    let report = MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: mean(&rouge_l_sentence),
        meteor: mean(&meteor_sentence),
        cider: cider_d(&h, &r),
        bertscore: mean(&|a, b| bertscore_sentence(embedder, a, b)),
        level_accuracy: None,
    };
    report.validate()?;
    Ok(report)
}

/// Fraction of exact level matches.
pub fn level_accuracy(predicted: &[BloomLevel], gold: &[BloomLevel]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::validation(
            "predicted_level",
            format!("{} predictions for {} gold levels", predicted.len(), gold.len()),
        ));
    }
    if gold.is_empty() {
        return Err(Error::validation("gold_level", "must be non-empty"));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// One line of an evaluation input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    #[serde(default)]
    pub predicted_level: Option<String>,
    #[serde(default)]
    pub gold_level: Option<String>,
}

/// Level named on the `Educational level:` line of a generated feedback.
pub fn extract_level(text: &str) -> Option<BloomLevel> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        k.trim().eq_ignore_ascii_case("educational level").then(|| v.parse().ok())?
    })
}

/// Metrics over records. Level accuracy covers records with a gold level; a
/// record whose output names no level counts as a miss.
pub fn evaluate_records(records: &[EvalRecord], embedder: &dyn TokenEmbedder) -> Result<MetricReport> {
    let hyps: Vec<String> = records.iter().map(|r| r.hypothesis.clone()).collect();
    let refs: Vec<String> = records.iter().map(|r| r.reference.clone()).collect();
    let mut report = compute_metrics(&hyps, &refs, embedder)?;
    let level = |id: &str, field: &str, v: &str| {
        v.parse::<BloomLevel>()
            .map_err(|_| Error::validation(format!("records[{id}].{field}"), format!("unknown level {v:?}")))
    };
    let (mut graded, mut hits) = (0usize, 0usize);
    for r in records {
        let Some(g) = &r.gold_level else { continue };
        let gold = level(&r.id, "gold_level", g)?;
        let pred = r.predicted_level.as_deref().map(|p| level(&r.id, "predicted_level", p)).transpose()?;
        graded += 1;
        hits += usize::from(pred == Some(gold));
    }
    if graded > 0 {
        report.level_accuracy = Some(hits as f64 / graded as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use BloomLevel::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identity_corpus_is_perfect() {
        let c = s(&["the man is rowing a boat", "person2 is leaning toward person5 to flirt", "a dog runs"]);
        let m = compute_metrics(&c, &c, &IdentityEmbedder).unwrap();
        assert!((m.bleu4 - 1.0).abs() < 1e-9);
        assert!((m.rouge_l - 1.0).abs() < 1e-12);
        assert!((m.bertscore - 1.0).abs() < 1e-12);
        assert!(m.meteor > 0.99);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let m =
            compute_metrics(&s(&["alpha beta gamma delta"]), &s(&["one two three four"]), &IdentityEmbedder).unwrap();
        assert!(m.bleu4 < 1e-9);
        assert_eq!(m.rouge_l, 0.0);
        assert_eq!(m.meteor, 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(compute_metrics(&s(&["a"]), &s(&["a", "b"]), &IdentityEmbedder).is_err());
        assert!(compute_metrics(&[], &[], &IdentityEmbedder).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let h = s(&["the cat sat on the mat", "a man rows", "people leave the room now"]);
        let r = s(&["the cat is on the mat", "a man is rowing a boat", "people leave the meeting"]);
        let a = compute_metrics(&h, &r, &IdentityEmbedder).unwrap();
        let idx = [2, 0, 1];
        let hp: Vec<String> = idx.iter().map(|&i| h[i].clone()).collect();
        let rp: Vec<String> = idx.iter().map(|&i| r[i].clone()).collect();
        let b = compute_metrics(&hp, &rp, &IdentityEmbedder).unwrap();
        for (x, y) in [
            (a.bleu4, b.bleu4),
            (a.rouge_l, b.rouge_l),
            (a.meteor, b.meteor),
            (a.cider, b.cider),
            (a.bertscore, b.bertscore),
        ] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn levels() {
        assert_eq!(level_accuracy(&[Analyze, Apply], &[Analyze, Apply]).unwrap(), 1.0);
        assert_eq!(level_accuracy(&[Create], &[Apply]).unwrap(), 0.0);
        let v = level_accuracy(&[Analyze, Understand, Apply], &[Analyze, Apply, Apply]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let bad = EvalRecord {
            id: "x".into(),
            hypothesis: "a".into(),
            reference: "a".into(),
            predicted_level: Some("Memorize".into()),
            gold_level: Some("Apply".into()),
        };
        assert!(evaluate_records(&[bad], &IdentityEmbedder).is_err());
    }

    #[test]
    fn level_extraction() {
        assert_eq!(extract_level("Educational level: Apply\nMisconception: x"), Some(Apply));
        assert_eq!(extract_level("Misconception: x"), None);
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Person2's lean, not HEARING."), s(&["person2", "s", "lean", "not", "hearing"]));
    }
}
