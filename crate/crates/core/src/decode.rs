//! Beam search over an ensemble of segmenters, input-constrained decoding,
//! the split/segment/concatenate pipeline for long lines, and mapping
//! normalized segmentations back onto the raw text.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::augment::{concat_segments, split_raw};
use crate::data::{boundaries_from_target, normalize_line, normalize_line_spans, strip_delimiters, DataError, DELIM, EOS};
use crate::data::{SegmentedSentence, Symbol, Vocabulary, BOS};
use crate::math;
use crate::model::{CharLM, DecoderState, EncodedSource, LmState, ModelError, SegModel, Trainable};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no models to decode with")]
    NoModels,
    #[error("empty source")]
    EmptySource,
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("divergent output: decoded characters do not match the input")]
    DivergentOutput,
    #[error("alignment failure: segmentation does not match the normalized input")]
    AlignmentFailure,
    #[error("ensemble members disagree on vocabulary size")]
    VocabularyMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Only allow the next input character, a delimiter between
    /// characters, and end-of-sequence once the input is consumed.
    pub constrained: bool,
    /// Output length cap as a multiple of the source length (unconstrained
    /// mode only).
    pub max_len_factor: f64,
    /// Rank finished hypotheses by mean instead of summed log-probability.
    pub length_normalization: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 6,
            constrained: true,
            max_len_factor: 2.5,
            length_normalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<u32>,
    pub logp: f64,
    pub state: S,
    /// Source characters consumed so far.
    pub cursor: usize,
}

impl<S> BeamHypothesis<S> {
    fn delimiters(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == DELIM).count()
    }

    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Masks a log-probability distribution to the tokens allowed after `h` and
/// renormalizes over them. Disallowed tokens get `-inf`.
///
/// Allowed: the next source character while input remains; `DELIM` right
/// after a character while input remains; `EOS` once input is consumed.
pub fn constrain_step<S>(h: &BeamHypothesis<S>, source: &[u32], log_dist: &[f64]) -> Vec<f64> {
    let mut allowed: Vec<u32> = Vec::with_capacity(2);
    if h.cursor < source.len() {
        allowed.push(source[h.cursor]);
        let after_char = matches!(h.tokens.last(), Some(&t) if t != DELIM);
        if after_char && source[h.cursor] != DELIM {
            allowed.push(DELIM);
        }
    } else {
        allowed.push(EOS);
    }
    let live: Vec<f64> = allowed.iter().map(|&t| log_dist[t as usize]).collect();
    let z = math::log_sum_exp(&live);
    let mut out = vec![f64::NEG_INFINITY; log_dist.len()];
    for (&t, &lp) in allowed.iter().zip(&live) {
        // all live mass underflowed: fall back to uniform over the allowed set
        out[t as usize] = if z == f64::NEG_INFINITY {
            -math::ln(allowed.len() as f64)
        } else {
            lp - z
        };
    }
    out
}

/// Averages distributions in probability space and returns log-probs.
pub fn average_log_probs(dists: &[Vec<f64>]) -> Vec<f64> {
    if dists.len() == 1 {
        return dists[0].clone();
    }
    let k = math::ln(dists.len() as f64);
    let mut col = vec![0.0; dists.len()];
    (0..dists[0].len())
        .map(|v| {
            for (c, d) in col.iter_mut().zip(dists) {
                *c = d[v];
            }
            math::log_sum_exp(&col) - k
        })
        .collect()
}

/// Per-hypothesis predictor state: one decoder state per ensemble member
/// plus the language-model state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub decoders: Vec<DecoderState>,
    pub lm: Option<LmState>,
}

/// Result of one beam search.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Target tokens including the final `EOS`.
    pub tokens: Vec<u32>,
    pub logp: f64,
    pub boundaries: Vec<usize>,
}

fn rank_key<S>(h: &BeamHypothesis<S>, cfg: &DecodeConfig) -> f64 {
    if cfg.length_normalization && !h.tokens.is_empty() {
        h.logp / h.tokens.len() as f64
    } else {
        h.logp
    }
}

/// Best first: higher score, then fewer delimiters, then smaller tokens.
fn compare<S>(a: &BeamHypothesis<S>, b: &BeamHypothesis<S>, cfg: &DecodeConfig) -> Ordering {
    rank_key(b, cfg)
        .partial_cmp(&rank_key(a, cfg))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.delimiters().cmp(&b.delimiters()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over the probability-averaged distributions of `models`
/// (and `lm`, as one more equally weighted member).
pub fn beam_search(
    models: &[&SegModel],
    lm: Option<&CharLM>,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    if models.is_empty() {
        return Err(DecodeError::NoModels);
    }
    if source.is_empty() {
        return Err(DecodeError::EmptySource);
    }
    if cfg.beam_size == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let vocab = models[0].vocab_size();
    if models.iter().any(|m| m.vocab_size() != vocab) || lm.is_some_and(|l| l.vocab_size() != vocab) {
        return Err(DecodeError::VocabularyMismatch);
    }
    let encoded: Vec<EncodedSource> = models.iter().map(|m| m.encode(source)).collect::<Result<_, _>>()?;
    let start = BeamHypothesis {
        tokens: Vec::new(),
        logp: 0.0,
        state: EnsembleState {
            decoders: models.iter().zip(&encoded).map(|(m, e)| m.initial_state(e)).collect(),
            lm: lm.map(CharLM::initial_state),
        },
        cursor: 0,
    };
    let max_len = if cfg.constrained {
        2 * source.len() + 1
    } else {
        (math::ceil(cfg.max_len_factor * source.len() as f64) as usize).max(1)
    };

    let mut live = vec![start];
    let mut finished: Vec<BeamHypothesis<EnsembleState>> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        if let Some(best) = finished.first() {
            // scores only decrease, so no live prefix can overtake
            if !cfg.length_normalization && best.logp > live[0].logp {
                break;
            }
        }
        let prev: Vec<u32> = live.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
        let mut member_dists: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(models.len() + 1); live.len()];
        let mut next_dec: Vec<Vec<DecoderState>> = vec![Vec::with_capacity(models.len()); live.len()];
        for (k, (m, enc)) in models.iter().zip(&encoded).enumerate() {
            let states: Vec<&DecoderState> = live.iter().map(|h| &h.state.decoders[k]).collect();
            for (i, out) in m.decode_step_batch(&prev, &states, enc)?.into_iter().enumerate() {
                member_dists[i].push(out.log_probs);
                next_dec[i].push(out.state);
            }
        }
        let mut next_lm: Vec<Option<LmState>> = vec![None; live.len()];
        if let Some(lm) = lm {
            let states: Vec<&LmState> = live.iter().map(|h| h.state.lm.as_ref().expect("lm state")).collect();
            for (i, (lp, st)) in lm.lm_step_batch(&prev, &states)?.into_iter().enumerate() {
                member_dists[i].push(lp);
                next_lm[i] = Some(st);
            }
        }

        let mut candidates: Vec<BeamHypothesis<EnsembleState>> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let avg = average_log_probs(&member_dists[i]);
            let dist = if cfg.constrained { constrain_step(h, source, &avg) } else { avg };
            let state = EnsembleState {
                decoders: core::mem::take(&mut next_dec[i]),
                lm: next_lm[i].take(),
            };
            let mut options: Vec<(u32, f64)> = dist
                .iter()
                .enumerate()
                .filter(|(_, lp)| **lp > f64::NEG_INFINITY)
                .map(|(t, &lp)| (t as u32, lp))
                .collect();
            if !cfg.constrained {
                options.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
                options.truncate(cfg.beam_size);
            }
            for (t, lp) in options {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let cursor = if t == DELIM || t == EOS { h.cursor } else { h.cursor + 1 };
                candidates.push(BeamHypothesis {
                    tokens,
                    logp: h.logp + lp,
                    state: state.clone(),
                    cursor,
                });
            }
        }
        candidates.sort_by(|a, b| compare(a, b, cfg));
        live.clear();
        for c in candidates {
            if c.finished() {
                finished.push(c);
            } else if live.len() < cfg.beam_size {
                live.push(c);
            }
        }
        finished.sort_by(|a, b| compare(a, b, cfg));
    }

    let best = finished.into_iter().next().ok_or(DecodeError::DivergentOutput)?;
    if strip_delimiters(&best.tokens) != source {
        return Err(DecodeError::DivergentOutput);
    }
    let boundaries = boundaries_from_target(&best.tokens).ok_or(DecodeError::DivergentOutput)?;
    Ok(Decoded {
        tokens: best.tokens,
        logp: best.logp,
        boundaries,
    })
}

/// Anything that can segment a normalized character sequence.
pub trait Segmenter {
    fn segment(&self, chars: &[Symbol]) -> Result<Vec<usize>, DecodeError>;
}

/// Ensemble of segmenters plus an optional language model.
pub struct Ensemble<'a> {
    pub models: Vec<&'a SegModel>,
    pub lm: Option<&'a CharLM>,
    pub vocab: &'a Vocabulary,
    pub config: DecodeConfig,
}

impl Segmenter for Ensemble<'_> {
    fn segment(&self, chars: &[Symbol]) -> Result<Vec<usize>, DecodeError> {
        let (ids, _) = self.vocab.encode(chars);
        Ok(beam_search(&self.models, self.lm, &ids, &self.config)?.boundaries)
    }
}

/// Normalizes a raw line, cuts it after splitting punctuation, segments each
/// part and joins the parts with a boundary at every junction.
pub fn segment_long(raw: &str, segmenter: &dyn Segmenter, punctuation: &[char]) -> Result<SegmentedSentence, DecodeError> {
    let symbols = normalize_line(raw);
    if symbols.is_empty() {
        return Ok(SegmentedSentence::unsegmented(symbols));
    }
    let parts = split_raw(&symbols, punctuation)
        .into_iter()
        .map(|part| {
            let b = segmenter.segment(&part)?;
            Ok(SegmentedSentence::new(part, b)?)
        })
        .collect::<Result<Vec<_>, DecodeError>>()?;
    Ok(concat_segments(&parts).expect("parts are non-empty"))
}

/// Writes a normalized segmentation back onto the raw line: each
/// normalized symbol expands to the raw text it came from, whitespace is
/// dropped, and words are joined by single spaces.
pub fn postprocess(seg: &SegmentedSentence, raw: &str) -> Result<String, DecodeError> {
    let spans = normalize_line_spans(raw);
    if spans.len() != seg.len() || spans.iter().zip(seg.chars()).any(|((s, _), c)| s != c) {
        return Err(DecodeError::AlignmentFailure);
    }
    let mut out = String::with_capacity(raw.len() + seg.word_count());
    for (w, (start, end)) in seg.word_spans().into_iter().enumerate() {
        if w > 0 {
            out.push(' ');
        }
        for (_, range) in &spans[start..end] {
            out.push_str(&raw[range.clone()]);
        }
    }
    Ok(out)
}
