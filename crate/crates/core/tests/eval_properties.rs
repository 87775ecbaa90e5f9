use proptest::prelude::*;
use segtrans_core::data::{parse_segmented_line, SegmentedSentence, Symbol};
use segtrans_core::eval::{bootstrap_ci, f1_score};
use segtrans_core::rng::SplitMix64;

fn s(line: &str) -> SegmentedSentence {
    parse_segmented_line(line)
}

/// Word intervals from word lengths, matched pairwise.
fn brute_counts(pred: &SegmentedSentence, gold: &SegmentedSentence) -> (usize, usize, usize) {
    let spans = |x: &SegmentedSentence| {
        let mut out = Vec::new();
        let mut at = 0;
        for w in x.words() {
            out.push((at, at + w.len()));
            at += w.len();
        }
        out
    };
    let (p, g) = (spans(pred), spans(gold));
    let correct = p.iter().filter(|a| g.iter().any(|b| b == *a)).count();
    (g.len(), p.len(), correct)
}

fn f1(c: usize, p: usize, g: usize) -> f64 {
    let (pr, rc) = (c as f64 / p as f64, c as f64 / g as f64);
    if pr + rc == 0.0 {
        0.0
    } else {
        2.0 * pr * rc / (pr + rc)
    }
}

#[test]
fn corpus_f1_is_micro_averaged() {
    let gold = vec![s("甲乙 丙"), s("丁 戊 己 庚 辛 壬 癸")];
    let pred = vec![s("甲 乙 丙"), s("丁 戊 己 庚 辛 壬 癸")];
    let (mut g, mut p, mut c) = (0, 0, 0);
    let mut macro_sum = 0.0;
    for (a, b) in pred.iter().zip(&gold) {
        let (gi, pi, ci) = brute_counts(a, b);
        g += gi;
        p += pi;
        c += ci;
        macro_sum += f1(ci, pi, gi);
    }
    let micro = f1(c, p, g);
    let macro_avg = macro_sum / 2.0;
    assert!((micro - macro_avg).abs() > 0.05, "case must separate the definitions");
    let r = f1_score(&pred, &gold).unwrap();
    assert!((r.f1 - micro).abs() < 1e-15);
}

#[test]
fn bootstrap_is_reproducible() {
    let gold: Vec<SegmentedSentence> = (0..40).map(|i| if i % 3 == 0 { s("甲乙 丙") } else { s("丁 戊己") }).collect();
    let pred: Vec<SegmentedSentence> = (0..40)
        .map(|i| match (i % 3, i % 2) {
            (0, 0) => s("甲 乙 丙"),
            (0, _) => s("甲乙 丙"),
            _ if i % 7 == 1 => s("丁 戊 己"),
            _ => s("丁 戊己"),
        })
        .collect();
    let a = bootstrap_ci(&pred, &gold, 599, 7, true).unwrap();
    let b = bootstrap_ci(&pred, &gold, 599, 7, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
    let c = bootstrap_ci(&pred, &gold, 599, 8, true).unwrap();
    assert_ne!(a.mean, c.mean);
    let excl = bootstrap_ci(&pred, &gold, 599, 7, false).unwrap();
    assert_ne!(excl.mean, a.mean);
}

#[test]
fn bootstrap_mean_converges_to_point_estimate() {
    let mut rng = SplitMix64::new(11);
    let words = ["甲", "乙丙", "丁", "戊己庚", "辛"];
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for _ in 0..200 {
        let n = 2 + rng.below(5);
        let ws: Vec<&str> = (0..n).map(|_| words[rng.below(words.len())]).collect();
        let g = s(&ws.join(" "));
        // merge a random adjacent pair some of the time
        let p = if rng.bernoulli(0.4) && ws.len() > 1 {
            let k = rng.below(ws.len() - 1);
            let mut merged: Vec<String> = ws.iter().map(|w| w.to_string()).collect();
            let right = merged.remove(k + 1);
            merged[k].push_str(&right);
            s(&merged.join(" "))
        } else {
            g.clone()
        };
        gold.push(g);
        pred.push(p);
    }
    let point = 100.0 * f1_score(&pred, &gold).unwrap().f1;
    let b = bootstrap_ci(&pred, &gold, 1000, 3, true).unwrap();
    let sigma = b.half_width / 2.0;
    assert!(sigma > 0.0);
    assert!((b.mean - point).abs() <= 3.0 * sigma / (1000f64).sqrt(), "{} vs {point}", b.mean);
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
    // word lengths for gold and a re-cut prediction over the same chars
    prop::collection::vec(
        (prop::collection::vec(1usize..4, 1..6), any::<u64>()).prop_map(|(lens, seed)| {
            let n: usize = lens.iter().sum();
            let mut rng = SplitMix64::new(seed);
            let mut cuts: Vec<usize> = (1..n).filter(|_| rng.bernoulli(0.4)).collect();
            cuts.push(n);
            let mut pred = Vec::new();
            let mut at = 0;
            for c in cuts {
                pred.push(c - at);
                at = c;
            }
            (lens, pred)
        }),
        1..12,
    )
}

fn build(lens: &[usize], offset: u32) -> SegmentedSentence {
    let mut words = Vec::new();
    let mut k = offset;
    for &l in lens {
        let w: Vec<Symbol> = (0..l)
            .map(|_| {
                k += 1;
                Symbol::Char(char::from_u32(0x4e00 + k % 500).unwrap())
            })
            .collect();
        words.push(w);
    }
    SegmentedSentence::from_words(&words)
}

proptest! {
    #[test]
    fn permutation_invariant(c in corpus(), seed: u64) {
        let gold: Vec<SegmentedSentence> = c.iter().enumerate().map(|(i, (g, _))| build(g, i as u32 * 7)).collect();
        let pred: Vec<SegmentedSentence> = c
            .iter()
            .zip(&gold)
            .map(|((_, p), g)| {
                let mut b = Vec::new();
                let mut at = 0;
                for l in &p[..p.len() - 1] {
                    at += l;
                    b.push(at);
                }
                SegmentedSentence::new(g.chars().to_vec(), b).unwrap()
            })
            .collect();
        let r = f1_score(&pred, &gold).unwrap();
        let mut order: Vec<usize> = (0..gold.len()).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        let pg: Vec<SegmentedSentence> = order.iter().map(|&i| gold[i].clone()).collect();
        let pp: Vec<SegmentedSentence> = order.iter().map(|&i| pred[i].clone()).collect();
        prop_assert_eq!(f1_score(&pp, &pg).unwrap(), r.clone());
        prop_assert!(r.correct_words <= r.gold_words.min(r.pred_words));
        prop_assert!((0.0..=1.0).contains(&r.f1));
    }
}
