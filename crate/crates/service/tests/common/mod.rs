#![allow(dead_code)]

use peifg_core::datagen::{DistractorDecision, FilterDecision};
use peifg_core::sample::{synthetic_samples, Sample};

/// Samples with five candidate distractors and no feedback yet.
pub fn candidates(n: usize) -> Vec<Sample> {
    synthetic_samples(n, 21)
        .into_iter()
        .map(|mut s| {
            s.distractors = (1..=5).map(|i| format!("{} candidate {i}", s.id)).collect();
            s.feedbacks.clear();
            s
        })
        .collect()
}

/// Candidates 1, 3 and 4 ranked 1..3; candidate 0 lacks an error.
pub fn decision(annotator: &str) -> FilterDecision {
    let d = |relevant, has_error, rank| DistractorDecision { relevant, has_error, rank };
    FilterDecision {
        distractors: vec![
            d(true, false, None),
            d(true, true, Some(1)),
            d(true, true, None),
            d(true, true, Some(2)),
            d(true, true, Some(3)),
        ],
        feedbacks: vec![],
        annotator: annotator.into(),
        timestamp: "2024-05-01T12:00:00Z".into(),
    }
}
