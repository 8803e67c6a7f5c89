//! Byte-level tokenizer with four special tokens.
//!
//! Ids `0..=255` are raw bytes. `<img>` and `<expert>` placeholders are only
//! recognized by [`encode_instruction`]; response text is always encoded as
//! plain bytes.

pub const IMG_TOKEN: u32 = 256;
pub const EXPERT_TOKEN: u32 = 257;
/// Separates the instruction from the response.
pub const RESPONSE_TOKEN: u32 = 258;
pub const EOS_TOKEN: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub const IMG_PLACEHOLDER: &str = "<img>";
pub const EXPERT_PLACEHOLDER: &str = "<expert>";

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn encode_instruction(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix(IMG_PLACEHOLDER) {
            out.push(IMG_TOKEN);
            rest = tail;
        } else if let Some(tail) = rest.strip_prefix(EXPERT_PLACEHOLDER) {
            out.push(EXPERT_TOKEN);
            rest = tail;
        } else {
            let ch = rest.chars().next().expect("non-empty");
            out.extend(rest[..ch.len_utf8()].bytes().map(u32::from));
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

/// Decodes byte tokens, dropping special tokens. Invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|t| **t < 256).map(|t| *t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
