//! Tokenization, entity-string normalization and overlapping chunking.
//!
//! Tokens are whitespace-delimited words with leading and trailing
//! punctuation split off into single-character tokens. Offsets are byte
//! offsets into the original text, so `&text[tok.start..tok.end] == tok.text`.

use serde::{Deserialize, Serialize};

use crate::error::TextError;

/// Default chunk budget in tokens.
pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 950;
/// Default number of tokens shared by consecutive chunks.
pub const DEFAULT_OVERLAP_TOKENS: usize = 200;

const EDGE_PUNCTUATION: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '(', ')', '[', ']', '{', '}',
];

/// Returns true for the characters that are split off word edges.
pub fn is_edge_punctuation(c: char) -> bool {
    EDGE_PUNCTUATION.contains(&c)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    /// A token made of a single edge-punctuation character.
    pub fn is_punctuation(&self) -> bool {
        let mut chars = self.text.chars();
        matches!((chars.next(), chars.next()), (Some(c), None) if is_edge_punctuation(c))
    }
}

/// Split `text` into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = word_start.take() {
                split_word(text, s, i, &mut tokens);
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        split_word(text, s, text.len(), &mut tokens);
    }
    tokens
}

fn split_word(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let word = &text[start..end];
    let mut push = |s: usize, e: usize| {
        out.push(Token {
            text: text[s..e].to_string(),
            start: s,
            end: e,
        })
    };

    // leading punctuation, one token per character
    let mut core_start = start;
    for (i, c) in word.char_indices() {
        if !is_edge_punctuation(c) {
            break;
        }
        push(start + i, start + i + c.len_utf8());
        core_start = start + i + c.len_utf8();
    }
    if core_start == end {
        return;
    }

    let mut core_end = end;
    let mut trailing = Vec::new();
    for (i, c) in text[core_start..end].char_indices().rev() {
        if !is_edge_punctuation(c) {
            break;
        }
        core_end = core_start + i;
        trailing.push((core_start + i, core_start + i + c.len_utf8()));
    }
    push(core_start, core_end);
    for (s, e) in trailing.into_iter().rev() {
        push(s, e);
    }
}

/// Options controlling how entity surface forms become matching keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    /// Strip a trailing possessive `'s` and trailing periods.
    pub strip_affixes: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self { strip_affixes: true }
    }
}

/// Normalize an entity surface form into its matching key with default options.
pub fn normalize_entity(surface: &str) -> Result<String, TextError> {
    normalize_entity_with(surface, NormalizeOptions::default())
}

pub fn normalize_entity_with(surface: &str, opts: NormalizeOptions) -> Result<String, TextError> {
    let lowered = surface.to_lowercase();
    let mut key = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    if opts.strip_affixes {
        strip_affixes(&mut key);
    }
    if key.is_empty() {
        return Err(TextError::NormalizesToEmpty(surface.to_string()));
    }
    Ok(key)
}

/// Remove trailing possessives, periods and whitespace from an already
/// lowercased key, repeating until nothing changes.
pub fn strip_affixes(key: &mut String) {
    loop {
        let before = key.len();
        for suffix in ["'s", "\u{2019}s"] {
            if let Some(stripped) = key.strip_suffix(suffix) {
                key.truncate(stripped.len());
            }
        }
        let trimmed = key.trim_end_matches('.').trim_end().len();
        key.truncate(trimmed);
        if key.len() == before {
            break;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    /// Half-open token index range `[first, end)` into the document tokens.
    pub first: usize,
    pub end: usize,
    pub text: String,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.first == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub max_chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            max_chunk_tokens: DEFAULT_MAX_CHUNK_TOKENS,
            overlap_tokens: DEFAULT_OVERLAP_TOKENS,
        }
    }
}

/// Token index ranges of the sliding-window chunks over `n_tokens` tokens.
///
/// Chunk `k` starts at `k * (max - overlap)`. Emission stops once a chunk
/// reaches the end of the document.
pub fn chunk_ranges(n_tokens: usize, config: ChunkConfig) -> Result<Vec<(usize, usize)>, TextError> {
    let ChunkConfig {
        max_chunk_tokens,
        overlap_tokens,
    } = config;
    if max_chunk_tokens <= overlap_tokens {
        return Err(TextError::InvalidChunkConfig {
            max_chunk_tokens,
            overlap_tokens,
        });
    }
    let step = max_chunk_tokens - overlap_tokens;
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < n_tokens {
        let end = (start + max_chunk_tokens).min(n_tokens);
        ranges.push((start, end));
        if end == n_tokens {
            break;
        }
        start += step;
    }
    Ok(ranges)
}

/// Split a tokenized document into overlapping chunks. Chunk text is the
/// source slice from the first token's start to the last token's end.
pub fn chunk_document(
    source: &str,
    tokens: &[Token],
    config: ChunkConfig,
) -> Result<Vec<Chunk>, TextError> {
    let ranges = chunk_ranges(tokens.len(), config)?;
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(index, (first, end))| Chunk {
            index,
            first,
            end,
            text: source[tokens[first].start..tokens[end - 1].end].to_string(),
        })
        .collect())
}
