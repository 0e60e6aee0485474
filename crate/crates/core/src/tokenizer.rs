//! Subword vocabulary and fixed-length sequence encoding.
//!
//! The vocabulary is induced from the corpus itself: words are split into
//! characters (continuations carry the `##` prefix), then the most frequent
//! adjacent pair is merged iteratively until the size budget or the frequency
//! floor is hit. Encoding consumes the inventory with greedy longest-match
//! segmentation, wraps sentences as `[CLS] ... [SEP]`, truncates keeping the
//! sentence head (SEP is always reinstated as the last real token), and pads
//! to a fixed length with a {0,1} attention mask.
//!
//! Pre-tokenization splits on whitespace and makes every non-alphanumeric,
//! non-whitespace character a standalone token. Under uncased mode, text is
//! case-folded (Unicode lowercase) before any matching.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledSentence;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

pub const CONTINUATION_PREFIX: &str = "##";

const SPECIALS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

/// Whether text is matched as-is or case-folded first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    Cased,
    Uncased,
}

impl Casing {
    pub fn as_str(self) -> &'static str {
        match self {
            Casing::Cased => "cased",
            Casing::Uncased => "uncased",
        }
    }

    fn apply(self, text: &str) -> String {
        match self {
            Casing::Cased => text.to_string(),
            Casing::Uncased => text.to_lowercase(),
        }
    }
}

impl fmt::Display for Casing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Casing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cased" => Ok(Casing::Cased),
            "uncased" => Ok(Casing::Uncased),
            other => Err(Error::config(format!(
                "casing must be 'cased' or 'uncased', got {other:?}"
            ))),
        }
    }
}

/// Subword inventory with dense ids; the four specials occupy ids 0-3.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    casing: Casing,
}

impl Vocabulary {
    /// Build from an id-ordered token list. Validates the specials, density,
    /// and uniqueness invariants.
    pub fn from_tokens(tokens: Vec<String>, casing: Casing) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::config(format!(
                "vocabulary needs at least the {} special tokens, got {}",
                SPECIALS.len(),
                tokens.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::config(format!(
                    "token {i} must be {want}, got {:?}",
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::config(format!("token {i} is empty")));
            }
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            token_to_id,
            casing,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// One token per line, line number = id. The casing mode is not part of
    /// the file; loaders supply it (checkpoint manifests record it).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::with_capacity(self.tokens.iter().map(|t| t.len() + 1).sum());
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, casing: Casing) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = content.lines().map(str::to_string).collect();
        Vocabulary::from_tokens(tokens, casing)
    }

    /// FNV-1a fingerprint over the casing mode and token list; stored in
    /// checkpoint manifests to catch vocabulary mixups.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let eat = |h: &mut u64, bytes: &[u8]| {
            for &b in bytes {
                *h ^= b as u64;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&mut h, self.casing.as_str().as_bytes());
        eat(&mut h, b"\n");
        for tok in &self.tokens {
            eat(&mut h, tok.as_bytes());
            eat(&mut h, b"\n");
        }
        format!("fnv1a64:{h:016x}")
    }
}

/// Fixed-length encoding of one sentence: ids, mask, and the count of
/// non-PAD positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub real_length: usize,
}

impl EncodedSequence {
    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }
}

/// Whitespace words, with every non-alphanumeric character split out as its
/// own token.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if !ch.is_alphanumeric() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

fn char_boundaries(word: &str) -> Vec<usize> {
    let mut b: Vec<usize> = word.char_indices().map(|(i, _)| i).collect();
    b.push(word.len());
    b
}

/// Greedy longest-prefix-match decomposition. The first piece is unprefixed,
/// later pieces carry `##`. Returns `[UNK]` alone when any position fails to
/// match.
pub fn segment_word(vocab: &Vocabulary, word: &str) -> Vec<String> {
    if word.is_empty() {
        return vec![UNK_TOKEN.to_string()];
    }
    let bounds = char_boundaries(word);
    let n = bounds.len() - 1;
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < n {
        let mut matched = None;
        for end in (start + 1..=n).rev() {
            let slice = &word[bounds[start]..bounds[end]];
            let candidate = if start == 0 {
                slice.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{slice}")
            };
            if vocab.contains(&candidate) {
                matched = Some((candidate, end));
                break;
            }
        }
        match matched {
            Some((tok, end)) => {
                pieces.push(tok);
                start = end;
            }
            None => return vec![UNK_TOKEN.to_string()],
        }
    }
    pieces
}

/// Encode a sentence to exactly `max_len` positions: `[CLS] pieces [SEP]`
/// head-truncated so SEP stays the final real token, PAD after, mask 1 on
/// real positions.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<EncodedSequence> {
    if max_len < 3 {
        return Err(Error::config(format!(
            "max_len must be at least 3 (CLS, one token, SEP), got {max_len}"
        )));
    }
    let folded = vocab.casing.apply(text);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    'words: for word in pre_tokenize(&folded) {
        for piece in segment_word(vocab, &word) {
            if ids.len() == max_len - 1 {
                break 'words;
            }
            ids.push(vocab.id_of(&piece).unwrap_or(UNK_ID));
        }
    }
    ids.push(SEP_ID);
    let real_length = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention_mask = (0..max_len).map(|i| (i < real_length) as u8).collect();
    Ok(EncodedSequence {
        token_ids: ids,
        attention_mask,
        real_length,
    })
}

/// Fraction of pre-tokenized words that segment without any UNK piece.
pub fn coverage<'a>(vocab: &Vocabulary, texts: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut total = 0usize;
    let mut covered = 0usize;
    for text in texts {
        let folded = vocab.casing.apply(text);
        for word in pre_tokenize(&folded) {
            total += 1;
            if segment_word(vocab, &word) != [UNK_TOKEN] {
                covered += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

fn strip_continuation(sym: &str) -> &str {
    sym.strip_prefix(CONTINUATION_PREFIX).unwrap_or(sym)
}

/// Induce a subword vocabulary from the corpus.
///
/// Characters below `min_freq` are dropped from the initial alphabet (words
/// containing them are left out of merge counting); pair merging runs while
/// the best pair count is at least `max(min_freq, 1)` and the size budget
/// `max_size` is not exhausted. Ties pick the lexicographically smallest
/// pair, so induction is deterministic for a fixed corpus.
pub fn build_vocab(
    corpus: &[LabeledSentence],
    max_size: usize,
    min_freq: u64,
    casing: Casing,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size <= SPECIALS.len() {
        return Err(Error::config(format!(
            "max_size {max_size} leaves no room beyond the {} special tokens",
            SPECIALS.len()
        )));
    }
    let budget = max_size - SPECIALS.len();
    let min_freq = min_freq.max(1);

    // Word frequencies; BTreeMap keeps every later step order-stable.
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        let folded = casing.apply(&sentence.text);
        for word in pre_tokenize(&folded) {
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }

    // Initial alphabet: first characters bare, continuations ##-prefixed.
    let mut symbol_freq: BTreeMap<String, u64> = BTreeMap::new();
    for (word, &freq) in &word_freq {
        for (i, ch) in word.chars().enumerate() {
            let sym = if i == 0 {
                ch.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{ch}")
            };
            *symbol_freq.entry(sym).or_insert(0) += freq;
        }
    }
    let mut alphabet: Vec<(String, u64)> = symbol_freq
        .into_iter()
        .filter(|&(_, f)| f >= min_freq)
        .collect();
    // Most frequent first so a tight budget keeps the useful symbols.
    alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    alphabet.truncate(budget);
    let kept: std::collections::HashSet<&str> =
        alphabet.iter().map(|(s, _)| s.as_str()).collect();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut inventory: std::collections::HashSet<String> = alphabet
        .iter()
        .map(|(s, _)| s.clone())
        .collect();
    {
        let mut sorted: Vec<&String> = alphabet.iter().map(|(s, _)| s).collect();
        sorted.sort();
        tokens.extend(sorted.into_iter().cloned());
    }

    // Symbol sequences for merge counting; words with a dropped character
    // cannot be segmented anyway and are skipped.
    let mut sequences: Vec<(Vec<String>, u64)> = Vec::new();
    'words: for (word, &freq) in &word_freq {
        let mut seq = Vec::new();
        for (i, ch) in word.chars().enumerate() {
            let sym = if i == 0 {
                ch.to_string()
            } else {
                format!("{CONTINUATION_PREFIX}{ch}")
            };
            if !kept.contains(sym.as_str()) {
                continue 'words;
            }
            seq.push(sym);
        }
        sequences.push((seq, freq));
    }

    while tokens.len() < max_size {
        let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (seq, freq) in &sequences {
            for pair in seq.windows(2) {
                *pair_freq
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        let best = pair_freq
            .into_iter()
            .filter(|&(_, f)| f >= min_freq)
            // BTreeMap iterates in ascending key order, so on count ties the
            // first (lexicographically smallest) pair wins.
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let merged = format!("{left}{}", strip_continuation(&right));
        for (seq, _) in sequences.iter_mut() {
            let mut i = 0;
            while i + 1 < seq.len() {
                if seq[i] == left && seq[i + 1] == right {
                    seq[i] = merged.clone();
                    seq.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        if inventory.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    Vocabulary::from_tokens(tokens, casing)
}
