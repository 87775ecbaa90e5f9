//! Training-data augmentation: sentence splitting at punctuation,
//! unsupervised segmentation and sentence-weighted datasets.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{to_training_pair, SegmentedSentence, Symbol, Vocabulary};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("nothing to concatenate")]
    NoParts,
    #[error("part {0} is empty")]
    EmptyPart(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("maximum word length must be at least 1")]
    ZeroWordLength,
    #[error("gold weight must dominate (got {0}, need >= 1)")]
    GoldWeightTooSmall(f64),
}

/// Punctuation after which sentences are cut.
pub const DEFAULT_SPLIT_PUNCTUATION: [char; 4] = ['，', ',', '。', '.'];

fn is_split_point(s: Symbol, punctuation: &[char]) -> bool {
    matches!(s, Symbol::Char(c) if punctuation.contains(&c))
}

/// Cuts a gold sentence right after each splitting punctuation mark that
/// ends a word. The mark stays at the end of its segment and no empty
/// segment is produced, so [`concat_segments`] restores the input exactly.
pub fn split_sentence(s: &SegmentedSentence, punctuation: &[char]) -> Vec<SegmentedSentence> {
    if s.is_empty() {
        return Vec::new();
    }
    let chars = s.chars();
    let mut cuts: Vec<usize> = s
        .boundaries()
        .iter()
        .copied()
        .filter(|&b| is_split_point(chars[b - 1], punctuation))
        .collect();
    cuts.push(chars.len());

    let mut out = Vec::with_capacity(cuts.len());
    let mut start = 0;
    let mut bounds = s.boundaries().iter().copied().peekable();
    for end in cuts {
        // skip the cut itself, keep boundaries strictly inside this piece
        let mut local = Vec::new();
        while let Some(&b) = bounds.peek() {
            if b > end {
                break;
            }
            bounds.next();
            if b > start && b < end {
                local.push(b - start);
            }
        }
        out.push(
            SegmentedSentence::new(chars[start..end].to_vec(), local)
                .expect("re-indexed boundaries stay inside the segment"),
        );
        start = end;
    }
    out
}

/// Cuts unsegmented text after every splitting punctuation mark.
pub fn split_raw(symbols: &[Symbol], punctuation: &[char]) -> Vec<Vec<Symbol>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &s) in symbols.iter().enumerate() {
        if is_split_point(s, punctuation) {
            out.push(symbols[start..=i].to_vec());
            start = i + 1;
        }
    }
    if start < symbols.len() {
        out.push(symbols[start..].to_vec());
    }
    out
}

/// Joins segments, shifting their boundaries and inserting a boundary at
/// every junction.
pub fn concat_segments(parts: &[SegmentedSentence]) -> Result<SegmentedSentence, AugmentError> {
    if parts.is_empty() {
        return Err(AugmentError::NoParts);
    }
    let mut chars = Vec::new();
    let mut boundaries = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(AugmentError::EmptyPart(i));
        }
        let offset = chars.len();
        if offset > 0 {
            boundaries.push(offset);
        }
        boundaries.extend(part.boundaries().iter().map(|b| b + offset));
        chars.extend_from_slice(part.chars());
    }
    Ok(SegmentedSentence::new(chars, boundaries).expect("shifted boundaries are valid"))
}

/// Splits every sentence of a corpus.
pub fn split_corpus(corpus: &[SegmentedSentence], punctuation: &[char]) -> Vec<SegmentedSentence> {
    corpus
        .iter()
        .flat_map(|s| split_sentence(s, punctuation))
        .collect()
}

// ---------------------------------------------------------------------------
// Unsupervised segmentation

/// Segments raw text without supervision.
pub trait UnsupSegmenter {
    /// Boundary positions for `chars`, obeying the [`SegmentedSentence`]
    /// invariants.
    fn segment(&self, chars: &[Symbol]) -> Vec<usize>;

    fn segment_sentence(&self, chars: &[Symbol]) -> SegmentedSentence {
        SegmentedSentence::new(chars.to_vec(), self.segment(chars))
            .expect("segmenter produced invalid boundaries")
    }
}

/// Word-unigram model fitted by expectation-maximization over every
/// segmentation with words of at most `max_word_len` characters, decoded
/// with Viterbi.
#[derive(Debug, Clone)]
pub struct UnigramSegmenter {
    max_word_len: usize,
    log_probs: BTreeMap<Vec<Symbol>, f64>,
    unknown_log_prob: f64,
}

impl UnigramSegmenter {
    pub const DEFAULT_ITERATIONS: usize = 10;

    pub fn fit(raw: &[Vec<Symbol>], max_word_len: usize) -> Result<Self, AugmentError> {
        Self::fit_with_iterations(raw, max_word_len, Self::DEFAULT_ITERATIONS)
    }

    pub fn fit_with_iterations(
        raw: &[Vec<Symbol>],
        max_word_len: usize,
        iterations: usize,
    ) -> Result<Self, AugmentError> {
        if max_word_len == 0 {
            return Err(AugmentError::ZeroWordLength);
        }
        if raw.iter().all(|s| s.is_empty()) {
            return Err(AugmentError::EmptyCorpus);
        }

        // Initial distribution: substring frequencies.
        let mut counts: BTreeMap<Vec<Symbol>, f64> = BTreeMap::new();
        for s in raw {
            for i in 0..s.len() {
                for l in 1..=max_word_len.min(s.len() - i) {
                    *counts.entry(s[i..i + l].to_vec()).or_insert(0.0) += 1.0;
                }
            }
        }
        let mut model = Self {
            max_word_len,
            log_probs: normalize_counts(&counts),
            unknown_log_prob: f64::NEG_INFINITY,
        };

        for _ in 0..iterations {
            let mut expected: BTreeMap<Vec<Symbol>, f64> = BTreeMap::new();
            for s in raw.iter().filter(|s| !s.is_empty()) {
                model.accumulate_expected_counts(s, &mut expected);
            }
            // Single characters never vanish, so every sentence stays segmentable.
            for w in counts.keys().filter(|w| w.len() == 1) {
                expected.entry(w.clone()).or_insert(0.0);
            }
            for v in expected.values_mut() {
                *v = v.max(1e-12);
            }
            model.log_probs = normalize_counts(&expected);
        }

        let min = model
            .log_probs
            .values()
            .copied()
            .fold(f64::INFINITY, f64::min);
        model.unknown_log_prob = min - math::ln(1000.0);
        Ok(model)
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    /// Log-probability of a word; unseen single characters get a floor value,
    /// other unseen strings are impossible.
    pub fn log_prob(&self, word: &[Symbol]) -> f64 {
        match self.log_probs.get(word) {
            Some(&lp) => lp,
            None if word.len() == 1 => self.unknown_log_prob,
            None => f64::NEG_INFINITY,
        }
    }

    /// Total log-probability of one segmentation.
    pub fn score(&self, chars: &[Symbol], boundaries: &[usize]) -> f64 {
        let mut start = 0;
        let mut total = 0.0;
        for &end in boundaries.iter().chain(core::iter::once(&chars.len())) {
            if end - start > self.max_word_len {
                return f64::NEG_INFINITY;
            }
            total += self.log_prob(&chars[start..end]);
            start = end;
        }
        total
    }

    fn accumulate_expected_counts(&self, s: &[Symbol], expected: &mut BTreeMap<Vec<Symbol>, f64>) {
        let n = s.len();
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        let mut terms = Vec::with_capacity(self.max_word_len);
        for e in 1..=n {
            terms.clear();
            for l in 1..=self.max_word_len.min(e) {
                terms.push(alpha[e - l] + self.log_prob(&s[e - l..e]));
            }
            alpha[e] = math::log_sum_exp(&terms);
        }
        beta[n] = 0.0;
        for b in (0..n).rev() {
            terms.clear();
            for l in 1..=self.max_word_len.min(n - b) {
                terms.push(self.log_prob(&s[b..b + l]) + beta[b + l]);
            }
            beta[b] = math::log_sum_exp(&terms);
        }
        let total = alpha[n];
        if !total.is_finite() {
            return;
        }
        for b in 0..n {
            for l in 1..=self.max_word_len.min(n - b) {
                let w = &s[b..b + l];
                let lp = alpha[b] + self.log_prob(w) + beta[b + l] - total;
                if lp > -50.0 {
                    *expected.entry(w.to_vec()).or_insert(0.0) += math::exp(lp);
                }
            }
        }
    }
}

fn normalize_counts(counts: &BTreeMap<Vec<Symbol>, f64>) -> BTreeMap<Vec<Symbol>, f64> {
    let total: f64 = counts.values().sum();
    let log_total = math::ln(total);
    counts
        .iter()
        .map(|(w, &c)| (w.clone(), math::ln(c) - log_total))
        .collect()
}

impl UnsupSegmenter for UnigramSegmenter {
    fn segment(&self, chars: &[Symbol]) -> Vec<usize> {
        let n = chars.len();
        if n == 0 {
            return Vec::new();
        }
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back = vec![0usize; n + 1];
        best[0] = 0.0;
        for e in 1..=n {
            for l in 1..=self.max_word_len.min(e) {
                let cand = best[e - l] + self.log_prob(&chars[e - l..e]);
                // strict comparison keeps the longest word on ties
                if cand > best[e] {
                    best[e] = cand;
                    back[e] = e - l;
                }
            }
        }
        let mut boundaries = Vec::new();
        let mut pos = back[n];
        while pos > 0 {
            boundaries.push(pos);
            pos = back[pos];
        }
        boundaries.reverse();
        boundaries
    }
}

/// Fits the default unsupervised stand-in segmenter.
pub fn fit_unsupervised(
    raw: &[Vec<Symbol>],
    max_word_len: usize,
) -> Result<UnigramSegmenter, AugmentError> {
    UnigramSegmenter::fit(raw, max_word_len)
}

// ---------------------------------------------------------------------------
// Weighted datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Gold,
    Split,
    Unsupervised,
}

/// One training pair with its sentence weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub weight: f64,
    pub origin: Origin,
}

impl WeightedExample {
    pub fn new(s: &SegmentedSentence, vocab: &Vocabulary, weight: f64, origin: Origin) -> Self {
        let pair = to_training_pair(s, vocab);
        Self {
            source: pair.source,
            target: pair.target,
            weight,
            origin,
        }
    }
}

/// Converts sentences into examples that all share one weight and origin.
pub fn weighted_examples(
    sentences: &[SegmentedSentence],
    vocab: &Vocabulary,
    weight: f64,
    origin: Origin,
) -> Vec<WeightedExample> {
    sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| WeightedExample::new(s, vocab, weight, origin))
        .collect()
}

/// Gold sentences get weight `k`, augmented ones weight 1; gold first.
pub fn build_weighted_dataset(
    gold: &[SegmentedSentence],
    augmented: &[SegmentedSentence],
    k: f64,
    vocab: &Vocabulary,
) -> Result<Vec<WeightedExample>, AugmentError> {
    if !(k >= 1.0) {
        return Err(AugmentError::GoldWeightTooSmall(k));
    }
    let mut out = weighted_examples(gold, vocab, k, Origin::Gold);
    out.extend(weighted_examples(augmented, vocab, 1.0, Origin::Unsupervised));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, normalize_line, parse_segmented_line, strip_delimiters};
    use alloc::string::String;

    fn c(ch: char) -> Symbol {
        Symbol::Char(ch)
    }

    #[test]
    fn split_example() {
        let s = SegmentedSentence::new(vec![c('我'), c('，'), c('你'), c('。')], vec![1, 2, 3]).unwrap();
        let parts = split_sentence(&s, &DEFAULT_SPLIT_PUNCTUATION);
        assert_eq!(
            parts,
            vec![
                SegmentedSentence::new(vec![c('我'), c('，')], vec![1]).unwrap(),
                SegmentedSentence::new(vec![c('你'), c('。')], vec![1]).unwrap(),
            ]
        );
        assert_eq!(concat_segments(&parts).unwrap(), s);
    }

    #[test]
    fn no_punctuation_is_identity() {
        let s = parse_segmented_line("我 会 游泳");
        assert_eq!(split_sentence(&s, &DEFAULT_SPLIT_PUNCTUATION), vec![s.clone()]);
    }

    #[test]
    fn trailing_period_yields_no_empty_segment() {
        let s = parse_segmented_line("我 会 。");
        let parts = split_sentence(&s, &DEFAULT_SPLIT_PUNCTUATION);
        assert_eq!(parts, vec![s]);
    }

    #[test]
    fn punctuation_inside_a_word_is_not_a_cut() {
        // "3.5" style tokens keep the period inside the word
        let s = SegmentedSentence::new(vec![c('三'), c('.'), c('五'), c('米')], vec![3]).unwrap();
        let parts = split_sentence(&s, &DEFAULT_SPLIT_PUNCTUATION);
        assert_eq!(parts.len(), 1);
        assert_eq!(concat_segments(&parts).unwrap(), s);
    }

    #[test]
    fn concat_offsets() {
        let a = SegmentedSentence::new(vec![c('a'), c('b')], vec![]).unwrap();
        let b = SegmentedSentence::new(vec![c('c'), c('d')], vec![1]).unwrap();
        let joined = concat_segments(&[a.clone(), b]).unwrap();
        assert_eq!(joined.boundaries(), &[2, 3]);
        assert_eq!(concat_segments(core::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(concat_segments(&[]), Err(AugmentError::NoParts));
        assert_eq!(
            concat_segments(&[a, SegmentedSentence::default()]),
            Err(AugmentError::EmptyPart(1))
        );
    }

    #[test]
    fn split_raw_cuts_after_every_mark() {
        let parts = split_raw(&normalize_line("我，你。他"), &DEFAULT_SPLIT_PUNCTUATION);
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], vec![c('我'), c(',')]);
        assert_eq!(parts[2], vec![c('他')]);
        assert!(split_raw(&normalize_line("。"), &DEFAULT_SPLIT_PUNCTUATION).len() == 1);
    }

    /// All boundary subsets of a sentence, scored with the fitted model.
    fn brute_force_best(model: &UnigramSegmenter, chars: &[Symbol]) -> (Vec<usize>, f64) {
        let n = chars.len();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for mask in 0u32..(1 << (n - 1)) {
            let b: Vec<usize> = (1..n).filter(|p| mask & (1 << (p - 1)) != 0).collect();
            let score = model.score(chars, &b);
            if score > best.1 {
                best = (b, score);
            }
        }
        best
    }

    #[test]
    fn unigram_keeps_cohesive_bigram() {
        let corpus: Vec<Vec<Symbol>> = ["我会游泳", "他爱游泳", "游泳很好", "我爱他", "他会去"]
            .iter()
            .map(|s| normalize_line(s))
            .collect();
        let model = fit_unsupervised(&corpus, 4).unwrap();
        for s in &corpus {
            let viterbi = model.segment(s);
            let (brute, best) = brute_force_best(&model, s);
            assert!((model.score(s, &viterbi) - best).abs() < 1e-9, "{viterbi:?} vs {brute:?}");
        }
        let seg = model.segment_sentence(&corpus[1]);
        let words: Vec<String> = seg
            .words()
            .map(|w| w.iter().map(|s| alloc::format!("{s}")).collect())
            .collect();
        assert!(words.iter().any(|w| w.contains("游泳")), "{words:?}");
        for w in seg.words() {
            assert!(w.len() <= 4);
        }
    }

    #[test]
    fn word_length_one_forces_every_boundary() {
        let corpus = vec![normalize_line("我会游泳")];
        let model = fit_unsupervised(&corpus, 1).unwrap();
        assert_eq!(model.segment(&corpus[0]), vec![1, 2, 3]);
    }

    #[test]
    fn single_character_corpus() {
        let corpus = vec![normalize_line("我"), normalize_line("你")];
        let model = fit_unsupervised(&corpus, 4).unwrap();
        assert!(model.segment(&corpus[0]).is_empty());
        // unseen characters still segment
        assert_eq!(model.segment(&normalize_line("猫狗")).len(), 1);
    }

    #[test]
    fn unsupervised_errors() {
        assert_eq!(fit_unsupervised(&[], 4).unwrap_err(), AugmentError::EmptyCorpus);
        assert_eq!(
            fit_unsupervised(&[normalize_line("我")], 0).unwrap_err(),
            AugmentError::ZeroWordLength
        );
    }

    #[test]
    fn weighted_dataset_examples() {
        let gold = vec![parse_segmented_line("我 会 游泳")];
        let aug = vec![parse_segmented_line("我会 游泳")];
        let v = build_vocabulary(&gold).unwrap();

        let d = build_weighted_dataset(&gold, &aug, 40.0, &v).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].weight, d[0].origin), (40.0, Origin::Gold));
        assert_eq!((d[1].weight, d[1].origin), (1.0, Origin::Unsupervised));
        for e in &d {
            assert_eq!(strip_delimiters(&e.target), e.source);
        }

        let d = build_weighted_dataset(&gold, &aug, 1.0, &v).unwrap();
        assert!(d.iter().all(|e| e.weight == 1.0));

        let d = build_weighted_dataset(&gold, &[], 40.0, &v).unwrap();
        assert!(d.iter().all(|e| e.weight == 40.0));

        assert_eq!(
            build_weighted_dataset(&gold, &aug, 0.5, &v).unwrap_err(),
            AugmentError::GoldWeightTooSmall(0.5)
        );
    }
}
