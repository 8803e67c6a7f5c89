//! Dataset records and image loading.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vfe::BoundingBox;

/// Bloom's taxonomy level of a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BloomLevel {
    Remember,
    Understand,
    Apply,
    Analyze,
    Evaluate,
    Create,
}

impl BloomLevel {
    pub const ALL: [BloomLevel; 6] = [
        BloomLevel::Remember,
        BloomLevel::Understand,
        BloomLevel::Apply,
        BloomLevel::Analyze,
        BloomLevel::Evaluate,
        BloomLevel::Create,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BloomLevel::Remember => "Remember",
            BloomLevel::Understand => "Understand",
            BloomLevel::Apply => "Apply",
            BloomLevel::Analyze => "Analyze",
            BloomLevel::Evaluate => "Evaluate",
            BloomLevel::Create => "Create",
        }
    }
}

impl fmt::Display for BloomLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BloomLevel {
    type Err = Error;

    /// Case-insensitive; a trailing period is ignored.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_end_matches('.').trim();
        BloomLevel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::validation("level", format!("unknown educational level {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub misconception: String,
    pub explanation: String,
}

/// One record: image, objects, context text, QA pair and the collected
/// distractors with their feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// File path, or `synthetic:{seed}` for a generated image.
    pub image: String,
    #[serde(default)]
    pub objects: Vec<BoundingBox>,
    #[serde(default)]
    pub event: String,
    #[serde(default)]
    pub place: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub level: Option<BloomLevel>,
    #[serde(default)]
    pub distractors: Vec<String>,
    #[serde(default)]
    pub feedbacks: Vec<Feedback>,
}

impl Sample {
    /// Training/generation target for the feedback on distractor `i`.
    pub fn feedback_text(&self, i: usize) -> Result<String> {
        let fb = self
            .feedbacks
            .get(i)
            .ok_or_else(|| Error::validation(format!("sample[{}].feedbacks[{i}]", self.id), "missing feedback"))?;
        Ok(format_feedback(self.level, fb))
    }
}

/// `Educational level: ...` / `Misconception: ...` / `Explanation: ...`,
/// the level line omitted when unknown.
pub fn format_feedback(level: Option<BloomLevel>, fb: &Feedback) -> String {
    let mut out = String::new();
    if let Some(l) = level {
        out.push_str(&format!("Educational level: {l}\n"));
    }
    out.push_str(&format!("Misconception: {}\nExplanation: {}", fb.misconception, fb.explanation));
    out
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub const SYNTHETIC_PREFIX: &str = "synthetic:";
pub const SYNTHETIC_SIZE: (u32, u32) = (96, 64);

/// Deterministic gradient-and-blocks image for `synthetic:{seed}` paths.
pub fn synthetic_image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = SYNTHETIC_SIZE;
    let base: [u8; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            base[0].wrapping_add((x * 2) as u8),
            base[1].wrapping_add((y * 3) as u8),
            base[2].wrapping_add(((x + y) / 2) as u8),
        ])
    });
    for _ in 0..3 {
        let (x0, y0) = (rng.random_range(0..w - 8), rng.random_range(0..h - 8));
        let (bw, bh) = (rng.random_range(4..=8), rng.random_range(4..=8));
        let c = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                img.put_pixel(x, y, c);
            }
        }
    }
    img
}

pub fn load_image(path: &str) -> Result<RgbImage> {
    if let Some(seed) = path.strip_prefix(SYNTHETIC_PREFIX) {
        let seed: u64 =
            seed.parse().map_err(|_| Error::validation("image", format!("bad synthetic seed in {path:?}")))?;
        return Ok(synthetic_image(seed));
    }
    Ok(image::open(path)?.to_rgb8())
}

const PLACES: [&str; 6] = ["a kitchen", "a park", "an office", "a bar", "a beach", "a classroom"];
const ACTIONS: [(&str, &str); 8] = [
    ("laughing", "heard a joke"),
    ("running", "is late for the bus"),
    ("waving", "sees a friend"),
    ("frowning", "lost the game"),
    ("pointing", "wants to show the exit"),
    ("whispering", "shares a secret"),
    ("leaning forward", "is listening closely"),
    ("holding a cup", "is drinking coffee"),
];
const WRONG: [&str; 8] = [
    "is cold",
    "is asleep",
    "is angry at the waiter",
    "dropped a coin",
    "is dancing",
    "wants to leave",
    "is reading a menu",
    "fixes a chair",
];

/// Seeded toy samples with synthetic images, short QA text and three
/// distractor/feedback pairs each.
pub fn synthetic_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = SYNTHETIC_SIZE;
    (0..n)
        .map(|i| {
            let person = rng.random_range(0..4);
            let (act, why) = *ACTIONS.choose(&mut rng).expect("non-empty");
            let place = *PLACES.choose(&mut rng).expect("non-empty");
            let level = *BloomLevel::ALL.choose(&mut rng).expect("non-empty");
            let x1 = rng.random_range(0..w / 2);
            let y1 = rng.random_range(0..h / 2);
            let objects = vec![BoundingBox::new(
                x1,
                y1,
                x1 + rng.random_range(16..=w / 2),
                y1 + rng.random_range(16..=h / 2),
                format!("person{person}"),
            )];
            let wrong: Vec<&str> = WRONG.choose_multiple(&mut rng, 3).copied().collect();
            Sample {
                id: format!("syn-{seed}-{i}"),
                image: format!("{SYNTHETIC_PREFIX}{}", seed.wrapping_mul(1000).wrapping_add(i as u64)),
                objects,
                event: format!("person{person} is {act} in {place}"),
                place: place.to_string(),
                question: format!("Why is person{person} {act}?"),
                answer: format!("Person{person} {why}."),
                level: Some(level),
                distractors: wrong.iter().map(|d| format!("Person{person} {d}.")).collect(),
                feedbacks: wrong
                    .iter()
                    .map(|d| Feedback {
                        misconception: format!("Thinking person{person} {d}."),
                        explanation: format!("Person{person} {why}."),
                    })
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_parsing() {
        assert_eq!("analyze".parse::<BloomLevel>().unwrap(), BloomLevel::Analyze);
        assert_eq!(" Analyze. ".parse::<BloomLevel>().unwrap(), BloomLevel::Analyze);
        assert_eq!("bogus".parse::<BloomLevel>().unwrap_err().field(), Some("level"));
    }

    #[test]
    fn feedback_text_layout() {
        let s = &synthetic_samples(1, 0)[0];
        let t = s.feedback_text(0).unwrap();
        assert!(t.starts_with("Educational level: "));
        assert!(t.contains("\nMisconception: ") && t.contains("\nExplanation: "));
        assert!(s.feedback_text(3).is_err());
    }

    #[test]
    fn synthetic_data_is_seeded_and_valid() {
        let a = synthetic_samples(8, 3);
        assert_eq!(a, synthetic_samples(8, 3));
        for s in &a {
            let img = load_image(&s.image).unwrap();
            for b in &s.objects {
                b.validate(img.width(), img.height()).unwrap();
            }
            assert_eq!(s.distractors.len(), 3);
            assert_eq!(s.feedbacks.len(), 3);
        }
        assert_ne!(load_image(&a[0].image).unwrap(), load_image(&a[1].image).unwrap());
    }

    #[test]
    fn sample_json_roundtrip() {
        let s = synthetic_samples(1, 1).remove(0);
        let back: Sample = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
