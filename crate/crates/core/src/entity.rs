//! Deterministic named-entity extraction.
//!
//! Extraction runs in two passes over the token sequence:
//!
//! 1. a greedy, left-to-right, longest-match scan against a [`Gazetteer`],
//!    comparing normalized token n-grams so matching is case-insensitive;
//! 2. optionally, a capitalization heuristic that emits every maximal run of
//!    capitalized tokens not covered by pass 1 as a `MISC` entity.
//!
//! Other extractors (a statistical tagger, an external service) can be
//! plugged in through [`EntityExtractor`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::GazetteerError;
use crate::text::{normalize_entity_with, strip_affixes, tokenize, NormalizeOptions, Token};

const DEFAULT_GAZETTEER: &str = include_str!("../data/default_gazetteer.tsv");

/// Capitalized words that are ignored by the heuristic at sentence start.
pub const SENTENCE_INITIAL_STOPWORDS: [&str; 50] = [
    "a", "an", "the", "this", "that", "these", "those", "it", "its", "i", "we", "you", "he",
    "she", "they", "there", "here", "in", "on", "at", "for", "from", "to", "by", "with", "of",
    "and", "but", "or", "so", "if", "when", "while", "after", "before", "then", "also", "as",
    "our", "my", "his", "her", "their", "some", "all", "no", "yes", "what", "which", "however",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Person,
    Org,
    Loc,
    Event,
    Misc,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Org => "ORG",
            EntityType::Loc => "LOC",
            EntityType::Event => "EVENT",
            EntityType::Misc => "MISC",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PERSON" => Ok(EntityType::Person),
            "ORG" => Ok(EntityType::Org),
            "LOC" => Ok(EntityType::Loc),
            "EVENT" => Ok(EntityType::Event),
            "MISC" => Ok(EntityType::Misc),
            other => Err(format!("unknown entity type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub key: String,
    #[serde(rename = "type")]
    pub etype: EntityType,
    /// Inclusive `[first, last]` token indices; absent for mentions supplied
    /// by an external extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_span: Option<[usize; 2]>,
}

/// Mentions of one text plus per-key counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub mentions: Vec<EntityMention>,
    pub counts: BTreeMap<String, usize>,
    pub distinct: BTreeSet<String>,
}

impl EntitySet {
    pub fn from_mentions(mentions: Vec<EntityMention>) -> Self {
        let mut counts = BTreeMap::new();
        for m in &mentions {
            *counts.entry(m.key.clone()).or_insert(0) += 1;
        }
        let distinct = counts.keys().cloned().collect();
        Self {
            mentions,
            counts,
            distinct,
        }
    }

    /// Build a set from already-normalized keys, one mention per element.
    pub fn from_keys<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mentions = keys
            .into_iter()
            .map(|k| {
                let key = k.into();
                EntityMention {
                    surface: key.clone(),
                    key,
                    etype: EntityType::Misc,
                    token_span: None,
                }
            })
            .collect();
        Self::from_mentions(mentions)
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    pub fn count(&self, key: &str) -> usize {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.distinct.contains(key)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: BTreeMap<String, EntityType>,
    /// Normalized token-joined form of each entry -> entry key.
    lookup: HashMap<String, String>,
    max_entry_tokens: usize,
    normalize: NormalizeOptions,
}

impl Gazetteer {
    pub fn new(normalize: NormalizeOptions) -> Self {
        Self {
            normalize,
            ..Self::default()
        }
    }

    /// Parse the `surface<TAB>TYPE` line format. Blank lines and lines
    /// starting with `#` are skipped; later duplicates replace earlier ones.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, GazetteerError> {
        Self::load_with(reader, NormalizeOptions::default())
    }

    pub fn load_with<R: BufRead>(reader: R, normalize: NormalizeOptions) -> Result<Self, GazetteerError> {
        let mut gaz = Self::new(normalize);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(GazetteerError::Parse {
                    line: lineno,
                    reason: format!("expected 2 tab-separated fields, found {}", fields.len()),
                });
            }
            let etype = fields[1]
                .trim()
                .parse::<EntityType>()
                .map_err(|reason| GazetteerError::Parse { line: lineno, reason })?;
            gaz.insert(fields[0], etype).map_err(|e| GazetteerError::Parse {
                line: lineno,
                reason: e.to_string(),
            })?;
        }
        Ok(gaz)
    }

    /// The gazetteer shipped with the crate.
    pub fn builtin() -> &'static Gazetteer {
        static BUILTIN: OnceLock<Gazetteer> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            Gazetteer::load(DEFAULT_GAZETTEER.as_bytes()).expect("bundled gazetteer parses")
        })
    }

    /// The bundled entries loaded with non-default normalization.
    pub fn builtin_with(normalize: NormalizeOptions) -> Gazetteer {
        Gazetteer::load_with(DEFAULT_GAZETTEER.as_bytes(), normalize).expect("bundled gazetteer parses")
    }

    pub fn insert(&mut self, surface: &str, etype: EntityType) -> Result<(), crate::error::TextError> {
        let key = normalize_entity_with(surface, self.normalize)?;
        let key_tokens = tokenize(&key);
        let form = normalize_entity_with(&join_tokens(&key_tokens), self.normalize)?;
        self.max_entry_tokens = self.max_entry_tokens.max(key_tokens.len());
        self.lookup.insert(form, key.clone());
        self.entries.insert(key, etype);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<EntityType> {
        self.entries.get(key).copied()
    }

    pub fn entries(&self) -> &BTreeMap<String, EntityType> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_entry_tokens(&self) -> usize {
        self.max_entry_tokens
    }

    pub fn normalize_options(&self) -> NormalizeOptions {
        self.normalize
    }

    /// Look up an n-gram given its tokens already lowercased. Equivalent to
    /// normalizing the space-joined n-gram.
    fn lookup_lowered(&self, lowered: &[String], form: &mut String) -> Option<&str> {
        form.clear();
        for (k, t) in lowered.iter().enumerate() {
            if k > 0 {
                form.push(' ');
            }
            form.push_str(t);
        }
        if self.normalize.strip_affixes {
            strip_affixes(form);
        }
        if form.is_empty() {
            return None;
        }
        self.lookup.get(form.as_str()).map(String::as_str)
    }
}

fn join_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

/// Something that turns text into an [`EntitySet`].
pub trait EntityExtractor: Send + Sync {
    fn extract(&self, text: &str) -> EntitySet;

    /// Normalization applied to externally supplied entity strings.
    fn normalize_options(&self) -> NormalizeOptions {
        NormalizeOptions::default()
    }
}

/// Gazetteer lookup plus the optional capitalization heuristic.
#[derive(Debug, Clone)]
pub struct GazetteerExtractor<'g> {
    pub gazetteer: &'g Gazetteer,
    pub heuristics: bool,
}

impl EntityExtractor for GazetteerExtractor<'_> {
    fn extract(&self, text: &str) -> EntitySet {
        extract_entities(text, self.gazetteer, self.heuristics)
    }

    fn normalize_options(&self) -> NormalizeOptions {
        self.gazetteer.normalize
    }
}

pub fn extract_entities(text: &str, gazetteer: &Gazetteer, heuristics_enabled: bool) -> EntitySet {
    let tokens = tokenize(text);
    let n = tokens.len();
    let mut covered = vec![false; n];
    let mut mentions = Vec::new();
    let lowered: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let mut form = String::new();

    let mut i = 0;
    while i < n {
        if tokens[i].is_punctuation() {
            i += 1;
            continue;
        }
        let longest = gazetteer.max_entry_tokens.min(n - i);
        let mut matched = 0;
        for len in (1..=longest).rev() {
            let last = i + len - 1;
            if tokens[last].is_punctuation() {
                continue;
            }
            if let Some(key) = gazetteer.lookup_lowered(&lowered[i..=last], &mut form) {
                mentions.push(EntityMention {
                    surface: text[tokens[i].start..tokens[last].end].to_string(),
                    key: key.to_string(),
                    etype: gazetteer.entries[key],
                    token_span: Some([i, last]),
                });
                covered[i..=last].iter_mut().for_each(|c| *c = true);
                matched = len;
                break;
            }
        }
        i += matched.max(1);
    }

    if heuristics_enabled {
        mentions.extend(capitalized_runs(text, &tokens, &covered, gazetteer.normalize));
        mentions.sort_by_key(|m| m.token_span);
    }
    EntitySet::from_mentions(mentions)
}

fn is_capitalized(token: &Token) -> bool {
    token.text.chars().next().is_some_and(char::is_uppercase)
}

fn is_sentence_initial(tokens: &[Token], i: usize) -> bool {
    i == 0 || matches!(tokens[i - 1].text.as_str(), "." | "!" | "?")
}

fn is_stopword(token: &Token) -> bool {
    let lower = token.text.to_lowercase();
    SENTENCE_INITIAL_STOPWORDS.contains(&lower.as_str())
}

fn capitalized_runs(
    text: &str,
    tokens: &[Token],
    covered: &[bool],
    normalize: NormalizeOptions,
) -> Vec<EntityMention> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if covered[i] || !is_capitalized(&tokens[i]) {
            i += 1;
            continue;
        }
        let mut start = i;
        let mut end = i;
        while end + 1 < tokens.len() && !covered[end + 1] && is_capitalized(&tokens[end + 1]) {
            end += 1;
        }
        // "I" is never an entity, sentence-initial stopwords are skipped
        while start <= end
            && (tokens[start].text == "I"
                || (start == i && is_sentence_initial(tokens, start) && is_stopword(&tokens[start])))
        {
            start += 1;
        }
        if start <= end {
            let surface = &text[tokens[start].start..tokens[end].end];
            if let Ok(key) = normalize_entity_with(surface, normalize) {
                out.push(EntityMention {
                    surface: surface.to_string(),
                    key,
                    etype: EntityType::Misc,
                    token_span: Some([start, end]),
                });
            }
        }
        i = end + 1;
    }
    out
}

/// Entity sets of a (source, summary, reference) triple under one extractor.
pub fn entity_sets_for_pair(
    extractor: &dyn EntityExtractor,
    source: &str,
    summary: &str,
    reference: Option<&str>,
) -> (EntitySet, EntitySet, Option<EntitySet>) {
    (
        extractor.extract(source),
        extractor.extract(summary),
        reference.map(|r| extractor.extract(r)),
    )
}
