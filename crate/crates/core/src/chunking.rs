//! Token estimation and two-phase segmentation of long contexts.
//!
//! Documents are cut at line (or paragraph) boundaries only, so a chunk's
//! token count is always the sum of the counts of the lines it holds and
//! concatenating the chunks reproduces the source byte for byte.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Estimates how many model tokens a piece of text occupies.
///
/// Implementations work line by line: `estimate` is the sum of
/// `estimate_line` over the `\n`-terminated lines of the text. Segmentation
/// relies on that additivity.
pub trait TokenEstimator: Send + Sync {
    fn estimate_line(&self, line: &str) -> usize;

    fn estimate(&self, text: &str) -> usize {
        text.split_inclusive('\n').map(|l| self.estimate_line(l)).sum()
    }
}

/// Approximates a byte-level BPE tokenizer by counting pre-tokenizer pieces.
///
/// Letter runs (optionally carrying one leading space or punctuation mark)
/// cost one token per ten characters, digit runs one per three digits,
/// punctuation runs one per two characters, whitespace runs one. Wide
/// characters (CJK and similar) cost one each.
#[derive(Debug, Clone, Copy, Default)]
pub struct PieceEstimator;

/// `ceil(bytes / 4)` per line.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteRatioEstimator;

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Newline,
    Space,
    Digit,
    Letter,
    Wide,
    Punct,
}

fn classify(c: char) -> CharClass {
    if c == '\n' || c == '\r' {
        CharClass::Newline
    } else if c.is_whitespace() {
        CharClass::Space
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() {
        if c.len_utf8() >= 3 {
            CharClass::Wide
        } else {
            CharClass::Letter
        }
    } else {
        CharClass::Punct
    }
}

const LETTERS_PER_TOKEN: usize = 10;
const DIGITS_PER_TOKEN: usize = 3;
const PUNCT_PER_TOKEN: usize = 2;

impl TokenEstimator for PieceEstimator {
    fn estimate_line(&self, line: &str) -> usize {
        let chars: Vec<CharClass> = line.chars().map(classify).collect();
        let mut tokens = 0;
        let mut i = 0;
        while i < chars.len() {
            let mut class = chars[i];
            let mut start = i;
            if matches!(class, CharClass::Space | CharClass::Punct)
                && chars.get(i + 1) == Some(&CharClass::Letter)
            {
                // " word" and "-word" are single pieces
                class = CharClass::Letter;
                i += 1;
                start = i;
            }
            if class == CharClass::Wide {
                tokens += 1;
                i += 1;
                continue;
            }
            while i < chars.len() && chars[i] == class {
                i += 1;
            }
            let len = i - start;
            tokens += match class {
                CharClass::Letter => len.div_ceil(LETTERS_PER_TOKEN),
                CharClass::Digit => len.div_ceil(DIGITS_PER_TOKEN),
                CharClass::Punct => len.div_ceil(PUNCT_PER_TOKEN),
                CharClass::Space | CharClass::Newline | CharClass::Wide => 1,
            };
        }
        tokens
    }
}

impl TokenEstimator for ByteRatioEstimator {
    fn estimate_line(&self, line: &str) -> usize {
        line.len().div_ceil(4)
    }
}

/// Token estimate with the default estimator. Zero iff `text` is empty.
pub fn estimate_tokens(text: &str) -> usize {
    PieceEstimator.estimate(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    #[default]
    Line,
    Paragraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingConfig {
    pub filter_chunk_tokens: usize,
    pub extract_chunk_tokens: usize,
    pub boundary_policy: BoundaryPolicy,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            filter_chunk_tokens: 1000,
            extract_chunk_tokens: 8000,
            boundary_policy: BoundaryPolicy::Line,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.filter_chunk_tokens == 0 {
            return Err(Error::InvalidConfig("filter_chunk_tokens must be at least 1".into()));
        }
        if self.extract_chunk_tokens < self.filter_chunk_tokens {
            return Err(Error::InvalidConfig(format!(
                "extract_chunk_tokens ({}) must be >= filter_chunk_tokens ({})",
                self.extract_chunk_tokens, self.filter_chunk_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    /// Offsets into the segmented text (the merged survivor text after
    /// [`resegment`]).
    pub byte_range: Range<usize>,
}

/// Splits `document` into indivisible units: single lines, or paragraphs
/// (runs of lines closed by a blank line).
fn units(document: &str, policy: BoundaryPolicy) -> Vec<&str> {
    match policy {
        BoundaryPolicy::Line => document.split_inclusive('\n').collect(),
        BoundaryPolicy::Paragraph => {
            let mut out = Vec::new();
            let mut start = 0;
            let mut pos = 0;
            let mut prev_blank = false;
            for line in document.split_inclusive('\n') {
                pos += line.len();
                let blank = line.trim().is_empty();
                if prev_blank && !blank && start < pos - line.len() {
                    out.push(&document[start..pos - line.len()]);
                    start = pos - line.len();
                }
                prev_blank = blank;
            }
            if start < document.len() {
                out.push(&document[start..]);
            }
            out
        }
    }
}

/// Greedy packing with an explicit estimator.
pub fn segment_with(
    estimator: &dyn TokenEstimator,
    document: &str,
    target_tokens: usize,
    policy: BoundaryPolicy,
) -> Vec<Chunk> {
    assert!(target_tokens >= 1, "target_tokens must be at least 1");
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut end = 0;
    let mut tokens = 0;
    for unit in units(document, policy) {
        let cost = estimator.estimate(unit);
        if end > start && tokens + cost > target_tokens {
            chunks.push(Chunk {
                index: chunks.len(),
                text: document[start..end].to_string(),
                token_count: tokens,
                byte_range: start..end,
            });
            start = end;
            tokens = 0;
        }
        end += unit.len();
        tokens += cost;
    }
    if end > start {
        chunks.push(Chunk {
            index: chunks.len(),
            text: document[start..end].to_string(),
            token_count: tokens,
            byte_range: start..end,
        });
    }
    chunks
}

/// Lossless partition of `document` into chunks of at most `target_tokens`
/// each. A single unit over budget becomes a chunk of its own.
pub fn segment(document: &str, target_tokens: usize, policy: BoundaryPolicy) -> Vec<Chunk> {
    segment_with(&PieceEstimator, document, target_tokens, policy)
}

/// Text the survivors are merged into before re-segmentation.
pub fn merge_survivors(survivors: &[Chunk]) -> String {
    survivors
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Merges surviving chunks with single newlines and segments the result
/// again at a larger budget. Byte ranges refer to the merged text.
pub fn resegment(survivors: &[Chunk], target_tokens: usize, policy: BoundaryPolicy) -> Vec<Chunk> {
    debug_assert!(survivors.windows(2).all(|w| w[0].index < w[1].index));
    segment(&merge_survivors(survivors), target_tokens, policy)
}
