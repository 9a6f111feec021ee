//! Subword vocabularies built by greedy pair merging, and WordPiece-style
//! greedy longest-match tokenization.
//!
//! Words are shattered into characters; every non-initial character carries the
//! [`CONTINUATION_PREFIX`]. Construction repeatedly adds the concatenation of
//! two adjacent existing subwords, chosen either by raw pair frequency
//! ([`MergeAlgorithm::BpeFrequency`]) or by the unigram likelihood gain
//! `count(ab) / (count(a) · count(b))` ([`MergeAlgorithm::WordpieceLikelihood`]),
//! until the vocabulary reaches its target size or no pairs remain.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub const CONTINUATION_PREFIX: &str = "##";
/// Longer words map to a single UNK.
pub const MAX_WORD_CHARS: usize = 100;
pub const DEFAULT_TARGET_SIZE: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    Cased,
    #[default]
    Uncased,
}

impl FromStr for Casing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cased" => Ok(Casing::Cased),
            "uncased" => Ok(Casing::Uncased),
            other => Err(Error::invalid(format!("unknown casing `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeAlgorithm {
    #[serde(rename = "bpe")]
    BpeFrequency,
    #[default]
    #[serde(rename = "wordpiece")]
    WordpieceLikelihood,
}

impl FromStr for MergeAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpe" => Ok(MergeAlgorithm::BpeFrequency),
            "wordpiece" => Ok(MergeAlgorithm::WordpieceLikelihood),
            other => Err(Error::invalid(format!("unknown merge algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Default for SpecialIds {
    /// Ids assigned by [`build_vocab`]: specials in [`SPECIAL_TOKENS`] order.
    fn default() -> Self {
        Self {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            mask: 4,
        }
    }
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }
}

/// Splits text into words: whitespace-delimited, with every punctuation
/// character standing alone. Uncased input is lowercased first.
pub fn pre_tokenize(text: &str, casing: Casing) -> Vec<String> {
    let text = match casing {
        Casing::Uncased => text.to_lowercase(),
        Casing::Cased => text.to_string(),
    };
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub word_counts: BTreeMap<String, u64>,
    pub char_inventory: BTreeSet<char>,
}

impl CorpusStats {
    pub fn from_text(text: &str, casing: Casing) -> Self {
        let mut stats = Self::default();
        stats.add_text(text, casing);
        stats
    }

    pub fn add_text(&mut self, text: &str, casing: Casing) {
        for word in pre_tokenize(text, casing) {
            self.char_inventory.extend(word.chars());
            *self.word_counts.entry(word).or_insert(0) += 1;
        }
    }

    /// Initial symbols: each character in word-initial or continuation form,
    /// exactly as they occur.
    pub fn alphabet(&self) -> BTreeSet<String> {
        let mut symbols = BTreeSet::new();
        for word in self.word_counts.keys() {
            for (i, c) in word.chars().enumerate() {
                symbols.insert(piece(i > 0, &c.to_string()));
            }
        }
        symbols
    }

    /// Smallest admissible target size for this corpus.
    pub fn minimum_vocab_size(&self) -> usize {
        NUM_SPECIAL + self.alphabet().len()
    }
}

fn piece(continuation: bool, text: &str) -> String {
    if continuation {
        format!("{CONTINUATION_PREFIX}{text}")
    } else {
        text.to_string()
    }
}

fn strip_continuation(token: &str) -> &str {
    token.strip_prefix(CONTINUATION_PREFIX).unwrap_or(token)
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    special: SpecialIds,
    casing: Casing,
    target_size: usize,
    merges: Vec<(String, String)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.casing == other.casing
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, casing: Casing, target_size: usize) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        let id = |t: &str| token_to_id[t];
        let special = SpecialIds {
            pad: id(PAD),
            unk: id(UNK),
            cls: id(CLS),
            sep: id(SEP),
            mask: id(MASK),
        };
        Self {
            tokens,
            token_to_id,
            special,
            casing,
            target_size,
            merges: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    /// Merge pairs in the order they were selected (empty for loaded vocabularies).
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// Greedy longest-match pieces of one pre-tokenized word, or `None` when
    /// some character cannot be matched.
    pub fn segment_word(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS || chars.is_empty() {
            return None;
        }
        let mut ids = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let sub: String = chars[start..end].iter().collect();
                if let Some(id) = self.id(&piece(start > 0, &sub)) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            ids.push(found?);
            start = end;
        }
        Some(ids)
    }

    /// Token ids per word; unmatchable words become a single UNK.
    pub fn tokenize_words(&self, text: &str) -> Vec<Vec<u32>> {
        pre_tokenize(text, self.casing)
            .iter()
            .map(|w| {
                self.segment_word(w)
                    .unwrap_or_else(|| vec![self.special.unk])
            })
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenize_words(text).into_iter().flatten().collect()
    }

    /// Joins pieces back into words, dropping continuation prefixes.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let Some(tok) = self.token(id) else { continue };
            if let Some(rest) = tok.strip_prefix(CONTINUATION_PREFIX) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        for tok in &self.tokens {
            file.write_all(tok.as_bytes())?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        Ok(())
    }

    /// Reads a one-token-per-line file. Casing is inferred: a vocabulary with
    /// no uppercase characters is treated as uncased.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                return Err(parse_err(lineno, "empty token".into()));
            }
            if let Some(first) = seen.insert(line.to_string(), lineno) {
                return Err(parse_err(
                    lineno,
                    format!("duplicate token `{line}` (first seen on line {first})"),
                ));
            }
            if SPECIAL_TOKENS.contains(&line) && i >= NUM_SPECIAL {
                return Err(parse_err(
                    lineno,
                    format!("special token `{line}` must be among the first {NUM_SPECIAL} ids"),
                ));
            }
            tokens.push(line.to_string());
        }
        for special in SPECIAL_TOKENS {
            if !seen.contains_key(special) {
                return Err(parse_err(
                    tokens.len() + 1,
                    format!("missing special token `{special}`"),
                ));
            }
        }
        let casing = if tokens
            .iter()
            .skip(NUM_SPECIAL)
            .any(|t| t.chars().any(char::is_uppercase))
        {
            Casing::Cased
        } else {
            Casing::Uncased
        };
        let n = tokens.len();
        Ok(Self::from_tokens(tokens, casing, n))
    }
}

/// Builds a vocabulary from raw text.
pub fn build_vocab(
    corpus: &str,
    target_size: usize,
    algorithm: MergeAlgorithm,
    casing: Casing,
) -> Result<Vocabulary> {
    build_vocab_from_stats(
        &CorpusStats::from_text(corpus, casing),
        target_size,
        algorithm,
        casing,
    )
}

pub fn build_vocab_from_stats(
    stats: &CorpusStats,
    target_size: usize,
    algorithm: MergeAlgorithm,
    casing: Casing,
) -> Result<Vocabulary> {
    if stats.word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alphabet = stats.alphabet();
    let required = NUM_SPECIAL + alphabet.len();
    if target_size < required {
        return Err(Error::VocabTooSmall {
            target: target_size,
            required,
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut index: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    let mut words: Vec<(Vec<u32>, u64)> = stats
        .word_counts
        .iter()
        .map(|(w, &count)| {
            let ids = w
                .chars()
                .enumerate()
                .map(|(i, c)| index[&piece(i > 0, &c.to_string())])
                .collect();
            (ids, count)
        })
        .collect();

    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let Some((a, b)) = select_merge(&words, &tokens, algorithm) else {
            break;
        };
        let merged = format!(
            "{}{}",
            tokens[a as usize],
            strip_continuation(&tokens[b as usize])
        );
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                tokens.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };
        merges.push((tokens[a as usize].clone(), tokens[b as usize].clone()));
        for (symbols, _) in &mut words {
            apply_merge(symbols, a, b, new_id);
        }
    }

    let mut vocab = Vocabulary::from_tokens(tokens, casing, target_size);
    vocab.merges = merges;
    Ok(vocab)
}

fn apply_merge(symbols: &mut Vec<u32>, a: u32, b: u32, merged: u32) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Picks the next pair under `algorithm`. Ties fall to the pair with the larger
/// raw count, then to the lexicographically smallest `(left, right)` strings.
fn select_merge(
    words: &[(Vec<u32>, u64)],
    tokens: &[String],
    algorithm: MergeAlgorithm,
) -> Option<(u32, u32)> {
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut unigram = vec![0u64; tokens.len()];
    for (symbols, count) in words {
        for &s in symbols {
            unigram[s as usize] += count;
        }
        for w in symbols.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
        }
    }

    let mut best: Option<((u32, u32), u64)> = None;
    for (&pair, &count) in &pair_counts {
        let better = match best {
            None => true,
            Some((bp, bc)) => {
                let primary = match algorithm {
                    MergeAlgorithm::BpeFrequency => count.cmp(&bc),
                    MergeAlgorithm::WordpieceLikelihood => {
                        // count/(ua·ub) vs bc/(va·vb), compared exactly.
                        let lhs = count as u128
                            * unigram[bp.0 as usize] as u128
                            * unigram[bp.1 as usize] as u128;
                        let rhs = bc as u128
                            * unigram[pair.0 as usize] as u128
                            * unigram[pair.1 as usize] as u128;
                        lhs.cmp(&rhs).then(count.cmp(&bc))
                    }
                };
                primary.then_with(|| {
                    let key = (&tokens[bp.0 as usize], &tokens[bp.1 as usize]);
                    key.cmp(&(&tokens[pair.0 as usize], &tokens[pair.1 as usize]))
                }) == std::cmp::Ordering::Greater
            }
        };
        if better {
            best = Some((pair, count));
        }
    }
    best.map(|(p, _)| p)
}
