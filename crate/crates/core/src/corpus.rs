//! Corpus loading, closed-alphabet indexing and lexicon extraction.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A line of text after whitespace removal, with the removed positions kept
/// as reference boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    pub chars: Vec<char>,
    /// Offsets `k` in `1..len` such that a word boundary precedes `chars[k]`.
    pub boundaries: Vec<usize>,
    /// Zero-based line number among the nonempty lines of the source.
    pub line: usize,
}

impl RawSentence {
    pub fn from_line(line: &str, strip_whitespace: bool, index: usize) -> Option<Self> {
        let mut chars = Vec::new();
        let mut boundaries = Vec::new();
        if strip_whitespace {
            let mut pending = false;
            for ch in line.chars() {
                if ch.is_whitespace() {
                    pending = true;
                    continue;
                }
                if pending && !chars.is_empty() {
                    boundaries.push(chars.len());
                }
                pending = false;
                chars.push(ch);
            }
        } else {
            chars.extend(line.chars().filter(|c| *c != '\r' && *c != '\n'));
        }
        if chars.is_empty() {
            return None;
        }
        Some(Self {
            chars,
            boundaries,
            line: index,
        })
    }
}

/// Reads a UTF-8 file with one sentence per line. Empty lines are dropped.
pub fn load_corpus(path: &Path, strip_whitespace: bool) -> Result<Vec<RawSentence>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&bytes, strip_whitespace).map_err(|e| match e {
        Error::Utf8 { offset, .. } => Error::Utf8 {
            path: path.to_path_buf(),
            offset,
        },
        other => other,
    })
}

pub fn parse_corpus(bytes: &[u8], strip_whitespace: bool) -> Result<Vec<RawSentence>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Utf8 {
        path: PathBuf::new(),
        offset: e.valid_up_to(),
    })?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let l = l.strip_suffix('\r').unwrap_or(l);
            if l.chars().all(char::is_whitespace) {
                None
            } else {
                Some(l)
            }
        })
        .enumerate()
        .filter_map(|(i, l)| RawSentence::from_line(l, strip_whitespace, i))
        .collect())
}

/// Splits by order: the first `train_frac` of items for training, the next
/// `valid_frac` for validation and the remainder for test.
pub fn split_by_order<T: Clone>(items: &[T], train_frac: f64, valid_frac: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_valid = (((n as f64) * valid_frac).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    (
        items[..n_train].to_vec(),
        items[n_train..n_train + n_valid].to_vec(),
        items[n_train + n_valid..].to_vec(),
    )
}

/// Closed character alphabet plus the two reserved symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    /// Builds the alphabet from distinct characters, ordered by code point.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut set: Vec<char> = chars.into_iter().collect();
        set.sort_unstable();
        set.dedup();
        let index = set.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
        Self { chars: set, index }
    }

    /// |Σ|, the number of ordinary characters.
    pub fn alphabet_size(&self) -> usize {
        self.chars.len()
    }

    /// |Σ| + 2: characters plus end-of-word and end-of-sequence.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn eow(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn eos(&self) -> u32 {
        self.chars.len() as u32 + 1
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, chars: &[char]) -> Option<Vec<u32>> {
        chars.iter().map(|c| self.id(*c)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|i| self.char(*i).unwrap_or('\u{FFFD}'))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().collect()
    }
}

/// An unsegmented sentence over the closed alphabet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub ids: Vec<u32>,
    pub context_ref: Option<usize>,
    gold: Option<Vec<usize>>,
}

impl Sentence {
    pub fn new(ids: Vec<u32>) -> Self {
        assert!(!ids.is_empty(), "sentences are nonempty");
        Self {
            ids,
            context_ref: None,
            gold: None,
        }
    }

    pub fn with_gold(mut self, boundaries: Vec<usize>) -> Self {
        debug_assert!(boundaries.iter().all(|b| *b >= 1 && *b < self.ids.len()));
        self.gold = Some(boundaries);
        self
    }

    pub fn with_context(mut self, index: usize) -> Self {
        self.context_ref = Some(index);
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reference boundaries. Reachable from outside the crate only through
    /// [`crate::eval::reference_boundaries`].
    pub(crate) fn gold(&self) -> Option<&[usize]> {
        self.gold.as_deref()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub source: String,
    pub strip_whitespace: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropReport {
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Sentence>,
    pub valid: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub vocab: Vocab,
    pub provenance: Provenance,
    pub dropped: DropReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Sentence> {
        match split {
            Split::Train => self.train.iter().collect(),
            Split::Valid => self.valid.iter().collect(),
            Split::Test => self.test.iter().collect(),
            Split::All => self
                .train
                .iter()
                .chain(&self.valid)
                .chain(&self.test)
                .collect(),
        }
    }
}

fn to_sentence(vocab: &Vocab, raw: &RawSentence) -> Option<Sentence> {
    let ids = vocab.encode(&raw.chars)?;
    Some(
        Sentence::new(ids)
            .with_gold(raw.boundaries.clone())
            .with_context(raw.line),
    )
}

/// Indexes all splits over the alphabet of `train`; held-out sentences with
/// unseen characters are dropped and counted.
pub fn build_closed_corpus(
    train: &[RawSentence],
    valid: &[RawSentence],
    test: &[RawSentence],
    provenance: Provenance,
) -> Result<Corpus> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let vocab = Vocab::from_chars(train.iter().flat_map(|s| s.chars.iter().copied()));
    let train_s: Vec<Sentence> = train
        .iter()
        .map(|r| to_sentence(&vocab, r).expect("train characters are in vocab"))
        .collect();
    let keep = |split: &[RawSentence]| -> (Vec<Sentence>, usize) {
        let kept: Vec<Sentence> = split.iter().filter_map(|r| to_sentence(&vocab, r)).collect();
        let dropped = split.len() - kept.len();
        (kept, dropped)
    };
    let (valid_s, dv) = keep(valid);
    let (test_s, dt) = keep(test);
    if dv + dt > 0 {
        log::info!("dropped {dv} validation and {dt} test sentences with unseen characters");
    }
    Ok(Corpus {
        train: train_s,
        valid: valid_s,
        test: test_s,
        vocab,
        provenance,
        dropped: DropReport { valid: dv, test: dt },
    })
}

/// Frequent substrings stored as lexical-memory values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<Vec<u32>>,
    counts: Vec<usize>,
    index: HashMap<Vec<u32>, usize>,
    pub max_len: usize,
    pub min_freq: usize,
}

impl Lexicon {
    pub fn empty(max_len: usize) -> Self {
        Self::from_entries(Vec::new(), max_len, usize::MAX)
    }

    fn from_entries(pairs: Vec<(Vec<u32>, usize)>, max_len: usize, min_freq: usize) -> Self {
        let index = pairs
            .iter()
            .enumerate()
            .map(|(i, (e, _))| (e.clone(), i))
            .collect();
        let (entries, counts) = pairs.into_iter().unzip();
        Self {
            entries,
            counts,
            index,
            max_len,
            min_freq,
        }
    }

    /// Builds a lexicon from explicit entries (kept in the given order).
    pub fn from_list(entries: Vec<Vec<u32>>, max_len: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.len() < 2 || e.len() > max_len {
                return Err(Error::Invalid(format!(
                    "lexicon entry of length {} outside [2, {max_len}]",
                    e.len()
                )));
            }
            if !seen.insert(e.clone()) {
                return Err(Error::Invalid("duplicate lexicon entry".into()));
            }
        }
        let pairs = entries.into_iter().map(|e| (e, 0)).collect();
        Ok(Self::from_entries(pairs, max_len, 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Vec<u32>] {
        &self.entries
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn lookup(&self, segment: &[u32]) -> Option<usize> {
        self.index.get(segment).copied()
    }

    /// TSV dump: `entry<TAB>count` per line in stored order.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (e, c) in self.entries.iter().zip(&self.counts) {
            out.push_str(&vocab.decode(e));
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses a TSV dump back into a lexicon over `vocab`.
    pub fn from_tsv(text: &str, vocab: &Vocab, max_len: usize, min_freq: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (entry, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad lexicon line {line:?}")))?;
            let chars: Vec<char> = entry.chars().collect();
            let ids = vocab
                .encode(&chars)
                .ok_or_else(|| Error::Data(format!("lexicon entry {entry:?} outside vocabulary")))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad lexicon count in {line:?}")))?;
            pairs.push((ids, count));
        }
        Ok(Self::from_entries(pairs, max_len, min_freq))
    }

    /// Content hash over the ids, counts and limits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.max_len as u64).to_le_bytes());
        for (e, c) in self.entries.iter().zip(&self.counts) {
            h.update((e.len() as u64).to_le_bytes());
            for id in e {
                h.update(id.to_le_bytes());
            }
            h.update((*c as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Every substring of length `2..=max_len` with at least `min_freq`
/// (possibly overlapping) occurrences in `train`, sorted by ids.
pub fn extract_lexicon(train: &[Sentence], max_len: usize, min_freq: usize) -> Result<Lexicon> {
    if max_len < 2 {
        return Err(Error::Invalid(format!("lexicon max length {max_len} < 2")));
    }
    if min_freq < 1 {
        return Err(Error::Invalid("lexicon min frequency must be ≥ 1".into()));
    }
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    for s in train {
        let ids = &s.ids;
        for start in 0..ids.len() {
            for end in start + 2..=(start + max_len).min(ids.len()) {
                *counts.entry(&ids[start..end]).or_default() += 1;
            }
        }
    }
    let sorted: BTreeMap<&[u32], usize> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    let pairs = sorted.into_iter().map(|(k, c)| (k.to_vec(), c)).collect();
    Ok(Lexicon::from_entries(pairs, max_len, min_freq))
}

/// Per-sentence conditioning vectors (e.g. image-region features).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    pub rows: usize,
    pub dim: usize,
    /// Row-major `rows × dim`.
    pub data: Vec<f64>,
}

pub const CONTEXT_MAGIC: &[u8; 8] = b"SEGCTX1\0";

/// Binary context-vector file: magic, `u32` count, `u32` rows per sentence,
/// `u32` dim, then little-endian `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFile {
    pub rows: usize,
    pub dim: usize,
    values: Vec<f32>,
}

impl ContextFile {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 || values.len() % (rows * dim) != 0 {
            return Err(Error::Shape(format!(
                "{} values do not tile {rows}×{dim} blocks",
                values.len()
            )));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn sentence_count(&self) -> usize {
        self.values.len() / (self.rows * self.dim)
    }

    pub fn get(&self, index: usize) -> Option<ContextSet> {
        let block = self.rows * self.dim;
        let slice = self.values.get(index * block..(index + 1) * block)?;
        Some(ContextSet {
            rows: self.rows,
            dim: self.dim,
            data: slice.iter().map(|v| *v as f64).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.values.len());
        out.extend_from_slice(CONTEXT_MAGIC);
        out.extend_from_slice(&(self.sentence_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CONTEXT_MAGIC {
            return Err(Error::Format("not a context-vector file".into()));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (count, rows, dim) = (u(8), u(12), u(16));
        let expected = count * rows * dim;
        let body = &bytes[20..];
        if body.len() != expected * 4 {
            return Err(Error::Format(format!(
                "context file holds {} bytes, header promises {}",
                body.len(),
                expected * 4
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, dim, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
