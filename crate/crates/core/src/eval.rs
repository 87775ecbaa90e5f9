//! Word-level F1 and bootstrap confidence intervals.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use crate::data::SegmentedSentence;
use crate::math;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction has {pred} lines, gold has {gold}")]
    LineCount { pred: usize, gold: usize },
    #[error("line {line}: characters differ between prediction and gold")]
    CharacterMismatch { line: usize },
    #[error("line {line}: prediction has no words but gold does")]
    NoWords { line: usize },
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error("empty corpus")]
    EmptyCorpus,
}

/// Word counts for one sentence or a whole corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub gold: usize,
    pub pred: usize,
    pub correct: usize,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.gold += o.gold;
        self.pred += o.pred;
        self.correct += o.correct;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_words: usize,
    pub pred_words: usize,
    pub correct_words: usize,
}

impl F1Report {
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(c.correct, c.pred);
        let r = ratio(c.correct, c.gold);
        // 2pr/(p+r) reduced to counts: one rounding instead of four
        let f1 = ratio(2 * c.correct, c.gold + c.pred);
        Self {
            precision: p,
            recall: r,
            f1,
            gold_words: c.gold,
            pred_words: c.pred,
            correct_words: c.correct,
        }
    }
}

/// Table row: percentages with one decimal.
impl fmt::Display for F1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P {:.1}  R {:.1}  F1 {:.1}",
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )
    }
}

/// Gold, predicted and matching word intervals of one sentence pair.
pub fn sentence_counts(pred: &SegmentedSentence, gold: &SegmentedSentence, line: usize) -> Result<Counts, EvalError> {
    if pred.chars() != gold.chars() {
        return Err(EvalError::CharacterMismatch { line });
    }
    let p = pred.word_spans();
    let g = gold.word_spans();
    if p.is_empty() && !g.is_empty() {
        return Err(EvalError::NoWords { line });
    }
    let gold_set: BTreeSet<(usize, usize)> = g.iter().copied().collect();
    Ok(Counts {
        gold: g.len(),
        pred: p.len(),
        correct: p.iter().filter(|w| gold_set.contains(w)).count(),
    })
}

fn all_counts(pred: &[SegmentedSentence], gold: &[SegmentedSentence]) -> Result<Vec<Counts>, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LineCount {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    pred.iter()
        .zip(gold)
        .enumerate()
        .map(|(i, (p, g))| sentence_counts(p, g, i + 1))
        .collect()
}

/// Corpus-level (micro-averaged) word F1. Errors name 1-based lines.
pub fn f1_score(pred: &[SegmentedSentence], gold: &[SegmentedSentence]) -> Result<F1Report, EvalError> {
    let mut total = Counts::default();
    for c in all_counts(pred, gold)? {
        total.add(c);
    }
    Ok(F1Report::from_counts(total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReport {
    /// Mean F1 in percent.
    pub mean: f64,
    /// Two standard deviations, in percent.
    pub half_width: f64,
    pub resamples: usize,
    pub seed: u64,
    pub include_original: bool,
}

/// `97.61±0.16`
impl fmt::Display for BootstrapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.half_width)
    }
}

/// F1 over `resamples` test sets drawn with replacement (plus the original
/// set when `include_original`). Resample `r` uses its own generator
/// derived from `(seed, r)`. The spread is the sample standard deviation.
pub fn bootstrap_ci(
    pred: &[SegmentedSentence],
    gold: &[SegmentedSentence],
    resamples: usize,
    seed: u64,
    include_original: bool,
) -> Result<BootstrapReport, EvalError> {
    if resamples == 0 {
        return Err(EvalError::NoResamples);
    }
    let counts = all_counts(pred, gold)?;
    if counts.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let n = counts.len();
    let mut scores = Vec::with_capacity(resamples + 1);
    if include_original {
        let mut total = Counts::default();
        counts.iter().for_each(|&c| total.add(c));
        scores.push(100.0 * F1Report::from_counts(total).f1);
    }
    for r in 0..resamples {
        let mut rng = SplitMix64::derive_indexed(seed, "bootstrap", r as u64);
        let mut total = Counts::default();
        for _ in 0..n {
            total.add(counts[rng.below(n)]);
        }
        scores.push(100.0 * F1Report::from_counts(total).f1);
    }
    let m = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / m;
    let var = if scores.len() > 1 {
        scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(BootstrapReport {
        mean,
        half_width: 2.0 * math::sqrt(var),
        resamples,
        seed,
        include_original,
    })
}
