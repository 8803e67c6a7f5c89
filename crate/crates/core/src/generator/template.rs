//! Instruction templates with `<img>` and `<expert>` placeholders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEEDBACK_TEMPLATE: &str = "Image: <img>. Expert: <expert>. Please generate the feedback based on the question: {Question}, answer: {Answer}, distractor: {Distractor}";

pub const DISTRACTOR_TEMPLATE: &str =
    "Image: <img>. Expert: <expert>. Please generate a distractor based on the question: {Question}, answer: {Answer}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Feedback,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalInstruction {
    pub mode: GenerationMode,
    pub text: String,
}

/// Substitutes `{Key}` fields in one left-to-right pass. Text coming from a
/// value is never re-scanned, and unknown `{...}` sequences are copied as is.
pub fn fill_template(template: &str, fields: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (key, value) in fields {
            let pat = format!("{{{key}}}");
            if tail.starts_with(&pat) {
                out.push_str(value);
                rest = &tail[pat.len()..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn require(field: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::validation(field, "must be non-empty"));
    }
    Ok(())
}

pub fn assemble_instruction(question: &str, answer: &str, distractor: &str) -> Result<MultimodalInstruction> {
    require("question", question)?;
    require("answer", answer)?;
    require("distractor", distractor)?;
    Ok(MultimodalInstruction {
        mode: GenerationMode::Feedback,
        text: fill_template(
            FEEDBACK_TEMPLATE,
            &[("Question", question), ("Answer", answer), ("Distractor", distractor)],
        ),
    })
}

pub fn assemble_distractor_instruction(question: &str, answer: &str) -> Result<MultimodalInstruction> {
    require("question", question)?;
    require("answer", answer)?;
    Ok(MultimodalInstruction {
        mode: GenerationMode::Distractor,
        text: fill_template(DISTRACTOR_TEMPLATE, &[("Question", question), ("Answer", answer)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_example() {
        let ins = assemble_instruction("Q?", "A.", "D.").unwrap();
        assert_eq!(
            ins.text,
            "Image: <img>. Expert: <expert>. Please generate the feedback based on the question: Q?, answer: A., distractor: D."
        );
    }

    #[test]
    fn braces_are_not_rescanned() {
        let ins = assemble_instruction("What is {Answer}?", "A {Distractor}", "D").unwrap();
        assert!(ins.text.contains("question: What is {Answer}?, answer: A {Distractor}, distractor: D"));
    }

    #[test]
    fn empty_fields_rejected() {
        assert_eq!(assemble_instruction("", "a", "d").unwrap_err().field(), Some("question"));
        assert_eq!(assemble_instruction("q", "a", " ").unwrap_err().field(), Some("distractor"));
        assert!(assemble_distractor_instruction("q", "").is_err());
    }

    #[test]
    fn distractor_template_filled() {
        let ins = assemble_distractor_instruction("Why?", "Because.").unwrap();
        assert_eq!(
            ins.text,
            "Image: <img>. Expert: <expert>. Please generate a distractor based on the question: Why?, answer: Because.."
        );
        assert_eq!(ins.mode, GenerationMode::Distractor);
    }

    #[test]
    fn unknown_keys_survive() {
        assert_eq!(fill_template("{A}{B}{", &[("A", "x")]), "x{B}{");
    }
}
