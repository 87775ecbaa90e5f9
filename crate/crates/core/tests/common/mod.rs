#![allow(dead_code)]

use segtrans_core::data::{parse_segmented_line, SegmentedSentence};
use segtrans_core::rng::SplitMix64;

const ALPHABET: &str = "人大中国生年会上时工出发成家分国经动同现理和学这面行物么法产进事方种";

/// Random lexicon of 1-3 character words over a small alphabet.
pub fn lexicon(size: usize, seed: u64) -> Vec<String> {
    let chars: Vec<char> = ALPHABET.chars().collect();
    let mut rng = SplitMix64::new(seed);
    let mut words: Vec<String> = Vec::new();
    while words.len() < size {
        let len = match rng.below(20) {
            0..=3 => 1,
            4..=15 => 2,
            _ => 3,
        };
        let w: String = (0..len).map(|_| chars[rng.below(chars.len())]).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Bakeoff-format lines: clauses of Zipf-distributed words, joined by
/// `，` and ended with `。` when `punctuation` is set.
pub fn corpus_lines(n: usize, lexicon: &[String], punctuation: bool, seed: u64) -> Vec<String> {
    let mut rng = SplitMix64::new(seed);
    let weights: Vec<f64> = (0..lexicon.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut SplitMix64| {
        let mut u = rng.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return lexicon[i].clone();
            }
            u -= w;
        }
        lexicon[lexicon.len() - 1].clone()
    };
    (0..n)
        .map(|_| {
            let clauses = if punctuation { 1 + rng.below(3) } else { 1 };
            let mut words: Vec<String> = Vec::new();
            for c in 0..clauses {
                if c > 0 {
                    words.push("，".into());
                }
                for _ in 0..2 + rng.below(4) {
                    words.push(pick(&mut rng));
                }
            }
            if punctuation {
                words.push("。".into());
            }
            words.join(" ")
        })
        .collect()
}

pub fn corpus(n: usize, lexicon: &[String], punctuation: bool, seed: u64) -> Vec<SegmentedSentence> {
    corpus_lines(n, lexicon, punctuation, seed)
        .iter()
        .map(|l| parse_segmented_line(l))
        .collect()
}
