//! Corpus ingestion: normalization, segmented sentences, the shared
//! vocabulary and train/valid splitting.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::math;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus has {0} sentences, at least 2 are needed for a split")]
    CorpusTooSmall(usize),
    #[error("split ratio {0} is outside (0, 1)")]
    InvalidRatio(f64),
    #[error("boundary {position} is invalid for a sentence of length {len}")]
    InvalidBoundary { position: usize, len: usize },
    #[error("boundaries are not strictly increasing")]
    UnsortedBoundaries,
    #[error("vocabulary entry {id} should be {expected} but is {found}")]
    ReservedMismatch { id: usize, expected: String, found: String },
    #[error("duplicate vocabulary token {0}")]
    DuplicateToken(String),
    #[error("cannot parse vocabulary token {0:?}")]
    BadToken(String),
}

/// One character of normalized text.
///
/// Runs of digits and runs of Latin letters collapse into a single
/// [`Symbol::Num`] / [`Symbol::Latin`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Char(char),
    Num,
    Latin,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Char(c) => write!(f, "{c}"),
            Symbol::Num => f.write_str(NUM_MARKER),
            Symbol::Latin => f.write_str(LATIN_MARKER),
        }
    }
}

pub const DELIM_MARKER: &str = "⟨D⟩";
pub const NUM_MARKER: &str = "⟨N⟩";
pub const LATIN_MARKER: &str = "⟨L⟩";

/// A vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Unk,
    Delim,
    Num,
    Latin,
    Char(char),
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const DELIM: u32 = 4;
pub const NUM: u32 = 5;
pub const LATIN: u32 = 6;

const RESERVED: [Token; 7] = [
    Token::Pad,
    Token::Bos,
    Token::Eos,
    Token::Unk,
    Token::Delim,
    Token::Num,
    Token::Latin,
];

impl Token {
    /// Text form used in vocabulary files.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            Token::Pad => s.push_str("<pad>"),
            Token::Bos => s.push_str("<s>"),
            Token::Eos => s.push_str("</s>"),
            Token::Unk => s.push_str("<unk>"),
            Token::Delim => s.push_str(DELIM_MARKER),
            Token::Num => s.push_str(NUM_MARKER),
            Token::Latin => s.push_str(LATIN_MARKER),
            Token::Char(c) => s.push(*c),
        }
        s
    }

    pub fn parse(text: &str) -> Result<Token, DataError> {
        let t = match text {
            "<pad>" => Token::Pad,
            "<s>" => Token::Bos,
            "</s>" => Token::Eos,
            "<unk>" => Token::Unk,
            DELIM_MARKER => Token::Delim,
            NUM_MARKER => Token::Num,
            LATIN_MARKER => Token::Latin,
            _ => {
                let mut it = text.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Token::Char(c),
                    _ => return Err(DataError::BadToken(text.into())),
                }
            }
        };
        Ok(t)
    }
}

impl From<Symbol> for Token {
    fn from(s: Symbol) -> Token {
        match s {
            Symbol::Char(c) => Token::Char(c),
            Symbol::Num => Token::Num,
            Symbol::Latin => Token::Latin,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Digit,
    Latin,
    Other,
}

fn fold_width(c: char) -> char {
    match c {
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        _ => c,
    }
}

fn classify(s: Symbol) -> (Class, Symbol) {
    match s {
        Symbol::Num => (Class::Digit, s),
        Symbol::Latin => (Class::Latin, s),
        Symbol::Char(c) => {
            let c = fold_width(c);
            if c.is_ascii_digit() {
                (Class::Digit, Symbol::Num)
            } else if c.is_ascii_alphabetic() {
                (Class::Latin, Symbol::Latin)
            } else {
                (Class::Other, Symbol::Char(c))
            }
        }
    }
}

/// Splits `raw` into unnormalized symbols with their byte ranges. The marker
/// strings `⟨N⟩` and `⟨L⟩` are read back as the tokens they stand for, so
/// rendered normalized text normalizes to itself.
fn lex(raw: &str) -> Vec<(Symbol, Range<usize>)> {
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let rest = &raw[i..];
        if rest.starts_with(NUM_MARKER) {
            out.push((Symbol::Num, i..i + NUM_MARKER.len()));
            i += NUM_MARKER.len();
        } else if rest.starts_with(LATIN_MARKER) {
            out.push((Symbol::Latin, i..i + LATIN_MARKER.len()));
            i += LATIN_MARKER.len();
        } else {
            let c = rest.chars().next().unwrap();
            out.push((Symbol::Char(c), i..i + c.len_utf8()));
            i += c.len_utf8();
        }
    }
    out
}

fn normalize_spanned<I>(input: I) -> Vec<(Symbol, Range<usize>)>
where
    I: IntoIterator<Item = (Symbol, Range<usize>)>,
{
    let mut out: Vec<(Symbol, Range<usize>)> = Vec::new();
    let mut prev = Class::Other;
    for (sym, span) in input {
        let (class, folded) = classify(sym);
        match out.last_mut() {
            Some(last) if class != Class::Other && class == prev => last.1.end = span.end,
            _ => out.push((folded, span)),
        }
        prev = class;
    }
    out
}

/// Normalizes a string: full-width ASCII variants fold to half width, then
/// each maximal run of digits becomes one [`Symbol::Num`] and each maximal
/// run of Latin letters one [`Symbol::Latin`].
pub fn normalize_text(raw: &str) -> Vec<Symbol> {
    normalize_spanned(lex(raw)).into_iter().map(|(s, _)| s).collect()
}

/// Re-applies normalization to symbols. Idempotent on the output of
/// [`normalize_text`].
pub fn normalize_symbols(symbols: &[Symbol]) -> Vec<Symbol> {
    normalize_spanned(symbols.iter().map(|&s| (s, 0..0)))
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

/// Normalizes an unsegmented input line, dropping whitespace, and reports
/// the byte range of the raw line each symbol came from.
pub fn normalize_line_spans(raw: &str) -> Vec<(Symbol, Range<usize>)> {
    let lexed = lex(raw).into_iter().filter(|(s, _)| match s {
        Symbol::Char(c) => !c.is_whitespace(),
        _ => true,
    });
    // Whitespace must still break runs: "12 34" is two numbers.
    let mut out: Vec<(Symbol, Range<usize>)> = Vec::new();
    let mut prev: Option<(Class, usize)> = None;
    for (sym, span) in lexed {
        let (class, folded) = classify(sym);
        let adjacent = prev.is_some_and(|(c, end)| c == class && end == span.start);
        match out.last_mut() {
            Some(last) if class != Class::Other && adjacent => last.1.end = span.end,
            _ => out.push((folded, span.clone())),
        }
        prev = Some((class, span.end));
    }
    out
}

/// Normalized symbols of an unsegmented input line (whitespace dropped).
pub fn normalize_line(raw: &str) -> Vec<Symbol> {
    normalize_line_spans(raw).into_iter().map(|(s, _)| s).collect()
}

// ---------------------------------------------------------------------------
// Segmented sentences

/// Normalized characters plus the positions where a word ends.
///
/// A boundary `p` means a word ends before index `p`; boundaries are strictly
/// increasing and satisfy `0 < p < len`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct SegmentedSentence {
    chars: Vec<Symbol>,
    boundaries: Vec<usize>,
}

impl SegmentedSentence {
    pub fn new(chars: Vec<Symbol>, boundaries: Vec<usize>) -> Result<Self, DataError> {
        validate_boundaries(&boundaries, chars.len())?;
        Ok(Self { chars, boundaries })
    }

    /// A sentence with no internal boundary.
    pub fn unsegmented(chars: Vec<Symbol>) -> Self {
        Self {
            chars,
            boundaries: Vec::new(),
        }
    }

    /// Builds a sentence from words; empty words are skipped.
    pub fn from_words<W: AsRef<[Symbol]>>(words: &[W]) -> Self {
        let mut chars = Vec::new();
        let mut boundaries = Vec::new();
        for w in words.iter().map(AsRef::as_ref).filter(|w| !w.is_empty()) {
            if !chars.is_empty() {
                boundaries.push(chars.len());
            }
            chars.extend_from_slice(w);
        }
        Self { chars, boundaries }
    }

    pub fn chars(&self) -> &[Symbol] {
        &self.chars
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn word_count(&self) -> usize {
        if self.chars.is_empty() {
            0
        } else {
            self.boundaries.len() + 1
        }
    }

    /// Half-open `(start, end)` character intervals of the words.
    pub fn word_spans(&self) -> Vec<(usize, usize)> {
        if self.chars.is_empty() {
            return Vec::new();
        }
        let mut spans = Vec::with_capacity(self.boundaries.len() + 1);
        let mut start = 0;
        for &b in &self.boundaries {
            spans.push((start, b));
            start = b;
        }
        spans.push((start, self.chars.len()));
        spans
    }

    pub fn words(&self) -> impl Iterator<Item = &[Symbol]> + '_ {
        self.word_spans().into_iter().map(move |(s, e)| &self.chars[s..e])
    }

    /// Renders the sentence in bakeoff format with `⟨N⟩`/`⟨L⟩` markers.
    /// [`parse_segmented_line`] reads it back unchanged.
    pub fn to_line(&self) -> String {
        use core::fmt::Write;
        let mut out = String::new();
        let mut next = self.boundaries.iter().peekable();
        for (i, s) in self.chars.iter().enumerate() {
            if next.peek() == Some(&&i) {
                out.push(' ');
                next.next();
            }
            let _ = write!(out, "{s}");
        }
        out
    }
}

pub(crate) fn validate_boundaries(boundaries: &[usize], len: usize) -> Result<(), DataError> {
    let mut prev = 0;
    for &b in boundaries {
        if b == 0 || b >= len {
            return Err(DataError::InvalidBoundary { position: b, len });
        }
        if b <= prev {
            return Err(DataError::UnsortedBoundaries);
        }
        prev = b;
    }
    Ok(())
}

/// Parses a bakeoff-format line (words separated by ASCII spaces). Each word
/// is normalized separately, so a boundary never falls inside a run. A line
/// of only whitespace yields an empty sentence, which callers drop.
pub fn parse_segmented_line(line: &str) -> SegmentedSentence {
    let words: Vec<Vec<Symbol>> = line
        .trim_end_matches(['\r', '\n'])
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(normalize_text)
        .collect();
    SegmentedSentence::from_words(&words)
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Bijection between tokens and ids, shared by source, target and output.
///
/// Ids 0-6 are reserved for `<pad> <s> </s> <unk> ⟨D⟩ ⟨N⟩ ⟨L⟩`; characters
/// follow in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<Token>,
    index: BTreeMap<Token, u32>,
}

impl Vocabulary {
    /// Vocabulary with only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_entries(RESERVED.to_vec()).expect("reserved tokens are valid")
    }

    /// Rebuilds a vocabulary from its entry list (e.g. a vocabulary file).
    pub fn from_entries(entries: Vec<Token>) -> Result<Self, DataError> {
        for (id, expected) in RESERVED.iter().enumerate() {
            match entries.get(id) {
                Some(t) if t == expected => {}
                found => {
                    return Err(DataError::ReservedMismatch {
                        id,
                        expected: expected.to_text(),
                        found: found.map(Token::to_text).unwrap_or_default(),
                    })
                }
            }
        }
        let mut index = BTreeMap::new();
        for (id, t) in entries.iter().enumerate() {
            if index.insert(*t, id as u32).is_some() {
                return Err(DataError::DuplicateToken(t.to_text()));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[Token] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &Token) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.entries.get(id as usize).copied()
    }

    /// Id of a normalized symbol, or `UNK` when it is not in the vocabulary.
    pub fn symbol_id(&self, s: Symbol) -> u32 {
        self.id(&Token::from(s)).unwrap_or(UNK)
    }

    /// Ids for a symbol sequence, with the number of `UNK` substitutions.
    pub fn encode(&self, symbols: &[Symbol]) -> (Vec<u32>, usize) {
        let mut unknown = 0;
        let ids = symbols
            .iter()
            .map(|&s| {
                let id = self.symbol_id(s);
                unknown += (id == UNK) as usize;
                id
            })
            .collect();
        (ids, unknown)
    }

    fn push(&mut self, t: Token) {
        if !self.index.contains_key(&t) {
            self.index.insert(t, self.entries.len() as u32);
            self.entries.push(t);
        }
    }
}

/// Reserved tokens followed by every distinct corpus character in order of
/// first occurrence.
pub fn build_vocabulary(corpus: &[SegmentedSentence]) -> Result<Vocabulary, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut v = Vocabulary::reserved_only();
    for s in corpus {
        for &c in s.chars() {
            v.push(Token::from(c));
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Splitting and training pairs

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub seed: u64,
}

/// Number of held-out items: `max(1, round(ratio * n))`, capped so that the
/// training side keeps at least one item.
pub fn valid_size(n: usize, ratio: f64) -> usize {
    let k = math::round(ratio * n as f64) as usize;
    k.max(1).min(n.saturating_sub(1))
}

/// Seeded shuffle then cut; the first `valid_size` shuffled items become the
/// validation set.
pub fn split_train_valid<T: Clone>(
    corpus: &[T],
    ratio: f64,
    seed: u64,
) -> Result<CorpusSplit<T>, DataError> {
    if corpus.len() < 2 {
        return Err(DataError::CorpusTooSmall(corpus.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let order = SplitMix64::derive(seed, "train-valid-split").permutation(corpus.len());
    let k = valid_size(corpus.len(), ratio);
    let valid = order[..k].iter().map(|&i| corpus[i].clone()).collect();
    let train = order[k..].iter().map(|&i| corpus[i].clone()).collect();
    Ok(CorpusSplit { train, valid, seed })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Characters that fell back to `UNK`.
    pub unknown: usize,
}

/// Source ids are the characters; the target interleaves `DELIM` at every
/// boundary and ends with `EOS`.
pub fn to_training_pair(s: &SegmentedSentence, vocab: &Vocabulary) -> TrainingPair {
    let (source, unknown) = vocab.encode(s.chars());
    let target = target_ids(&source, s.boundaries());
    TrainingPair {
        source,
        target,
        unknown,
    }
}

/// Interleaves `DELIM` into `source` at `boundaries` and appends `EOS`.
pub fn target_ids(source: &[u32], boundaries: &[usize]) -> Vec<u32> {
    let mut target = Vec::with_capacity(source.len() + boundaries.len() + 1);
    let mut next = boundaries.iter().peekable();
    for (i, &id) in source.iter().enumerate() {
        if next.peek() == Some(&&i) {
            target.push(DELIM);
            next.next();
        }
        target.push(id);
    }
    target.push(EOS);
    target
}

/// Removes `DELIM` and `EOS` from a target sequence.
pub fn strip_delimiters(target: &[u32]) -> Vec<u32> {
    target
        .iter()
        .copied()
        .filter(|&t| t != DELIM && t != EOS)
        .collect()
}

/// Recovers boundary positions from a target id sequence. Returns `None`
/// for leading, trailing or doubled delimiters.
pub fn boundaries_from_target(target: &[u32]) -> Option<Vec<usize>> {
    let mut boundaries = Vec::new();
    let mut pos = 0;
    let mut last_delim = true;
    for &t in target {
        match t {
            EOS => break,
            DELIM => {
                if last_delim {
                    return None;
                }
                boundaries.push(pos);
                last_delim = true;
            }
            _ => {
                pos += 1;
                last_delim = false;
            }
        }
    }
    if pos > 0 && last_delim {
        return None;
    }
    Some(boundaries)
}
