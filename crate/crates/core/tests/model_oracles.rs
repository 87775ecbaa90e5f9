use proptest::prelude::*;
use segtrans_core::augment::{Origin, WeightedExample};
use segtrans_core::compute::{gradient_check, ParamStore, Tape};
use segtrans_core::data::{BOS, DELIM, EOS};
use segtrans_core::model::{ModelConfig, ModelError, SegModel, Trainable};
use segtrans_core::rng::SplitMix64;

// Plain re-implementation of the forward math, reading parameters by name.

struct Oracle<'a> {
    p: &'a ParamStore,
    h: usize,
    ln: bool,
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Oracle<'_> {
    fn get(&self, name: &str) -> &[f64] {
        self.p.get(self.p.find(name).unwrap_or_else(|| panic!("{name}"))).data()
    }

    fn norm(&self, v: Vec<f64>, gain: &str, bias: &str) -> Vec<f64> {
        if !self.ln {
            return v;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let (g, b) = (self.get(gain), self.get(bias));
        v.iter()
            .enumerate()
            .map(|(j, x)| g[j] * (x - mean) / (var + 1e-6).sqrt() + b[j])
            .collect()
    }

    fn gru(&self, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.h;
        let xw = matvec(x, self.get(&format!("{name}.w_x")), 3 * hd);
        let hu = matvec(h, self.get(&format!("{name}.w_h")), 3 * hd);
        let xw = self.norm(xw, &format!("{name}.ln_x.gain"), &format!("{name}.ln_x.bias"));
        let hu = self.norm(hu, &format!("{name}.ln_h.gain"), &format!("{name}.ln_h.bias"));
        let b = self.get(&format!("{name}.b"));
        (0..hd)
            .map(|k| {
                let r = sigmoid(xw[k] + b[k] + hu[k]);
                let z = sigmoid(xw[hd + k] + b[hd + k] + hu[hd + k]);
                let n = (xw[2 * hd + k] + b[2 * hd + k] + r * hu[2 * hd + k]).tanh();
                (1.0 - z) * h[k] + z * n
            })
            .collect()
    }

    fn embed(&self, id: u32, e: usize) -> Vec<f64> {
        self.get("embed")[id as usize * e..(id as usize + 1) * e].to_vec()
    }

    /// Encoder states `[f_t ; b_t]` per position.
    fn encode(&self, src: &[u32], e: usize) -> Vec<Vec<f64>> {
        let l = src.len();
        let mut f = vec![vec![0.0; self.h]; l];
        let mut b = vec![vec![0.0; self.h]; l];
        let mut h = vec![0.0; self.h];
        for t in 0..l {
            h = self.gru("enc.l0.fwd", &self.embed(src[t], e), &h);
            f[t] = h.clone();
        }
        let mut h = vec![0.0; self.h];
        for t in (0..l).rev() {
            h = self.gru("enc.l0.bwd", &self.embed(src[t], e), &h);
            b[t] = h.clone();
        }
        (0..l).map(|t| [f[t].clone(), b[t].clone()].concat()).collect()
    }

    fn first_step(&self, src: &[u32], e: usize, v: usize) -> (Vec<f64>, Vec<f64>) {
        let hd = self.h;
        let states = self.encode(src, e);
        let l = states.len();
        let mut mean = vec![0.0; 2 * hd];
        for s in &states {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / l as f64;
            }
        }
        let ib = self.get("dec.init.b");
        let s0: Vec<f64> = matvec(&mean, self.get("dec.init.w"), hd)
            .iter()
            .zip(ib)
            .map(|(x, b)| (x + b).tanh())
            .collect();
        let q = matvec(&s0, self.get("att.w_dec"), hd);
        let vv = self.get("att.v");
        let scores: Vec<f64> = states
            .iter()
            .map(|st| {
                let k = matvec(st, self.get("att.w_enc"), hd);
                (0..hd).map(|a| (k[a] + q[a]).tanh() * vv[a]).sum()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
        let mut ctx = vec![0.0; 2 * hd];
        for (a, st) in alpha.iter().zip(&states) {
            for (c, x) in ctx.iter_mut().zip(st) {
                *c += a * x;
            }
        }
        let emb = self.embed(BOS, e);
        let s1 = self.gru("dec.l0", &[emb.clone(), ctx.clone()].concat(), &s0);
        let rb = self.get("readout.b");
        let o: Vec<f64> = matvec(&[s1, ctx, emb].concat(), self.get("readout.w"), e)
            .iter()
            .zip(rb)
            .map(|(x, b)| (x + b).tanh())
            .collect();
        let table = self.get("embed");
        let vb = self.get("readout.vocab_bias");
        let logits: Vec<f64> = (0..v)
            .map(|w| (0..e).map(|k| o[k] * table[w * e + k]).sum::<f64>() + vb[w])
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        (logits.iter().map(|x| x - lse).collect(), alpha)
    }
}

fn randomize(model: &mut SegModel, seed: u64, scale: f64) {
    let mut rng = SplitMix64::new(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-scale, scale);
        }
    }
}

fn toy(v: usize, dims: usize, layer_norm: bool, seed: u64) -> SegModel {
    let cfg = ModelConfig {
        embed_dim: dims,
        hidden_dim: dims,
        dropout_state: 0.0,
        layer_norm,
        ..ModelConfig::default()
    };
    let mut m = SegModel::new(cfg, v, seed).unwrap();
    randomize(&mut m, seed, 1.0);
    m
}

#[test]
fn one_step_matches_independent_forward_pass() {
    for ln in [false, true] {
        let m = toy(3, 2, ln, 42);
        let src = [0u32, 2, 1, 2];
        let oracle = Oracle { p: m.params(), h: 2, ln };
        let (expected, alpha) = oracle.first_step(&src, 2, 3);
        let enc = m.encode(&src).unwrap();
        let out = m.decode_step(BOS, &m.initial_state(&enc), &enc).unwrap();
        for (a, b) in out.log_probs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "ln={ln}: {a} vs {b}");
        }
        for (a, b) in out.attention.iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_backward_half_reverses_under_symmetric_weights() {
    let mut m = toy(9, 3, true, 5);
    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names.iter().filter(|n| n.starts_with("enc.l0.fwd")) {
        let src = m.params().find(name).unwrap();
        let dst = m.params().find(&name.replace(".fwd", ".bwd")).unwrap();
        let data = m.params().get(src).data().to_vec();
        m.params_mut().get_mut(dst).data_mut().copy_from_slice(&data);
    }
    let x = [7u32, 3, 8, 8, 5];
    let rev: Vec<u32> = x.iter().rev().copied().collect();
    let a = m.encode(&x).unwrap();
    let b = m.encode(&rev).unwrap();
    let (h, l) = (3, x.len());
    for t in 0..l {
        let fwd_x = &a.states[t * 2 * h..t * 2 * h + h];
        let bwd_rev = &b.states[(l - 1 - t) * 2 * h + h..(l - t) * 2 * h];
        for (p, q) in fwd_x.iter().zip(bwd_rev) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

/// `-(w/n) Σ λ_i log p_i`
fn objective(logps: &[f64], delim: &[bool], k: f64, w: f64) -> f64 {
    let n = logps.len() as f64;
    -(w / n) * logps.iter().zip(delim).map(|(lp, &d)| if d { k * lp } else { *lp }).sum::<f64>()
}

#[test]
fn objective_hand_value() {
    let l = objective(&[0.5f64.ln(), 0.25f64.ln()], &[true, false], 2.0, 1.0);
    assert!((l - 1.3863).abs() < 5e-5, "{l}");
    assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
}

fn step_log_probs(m: &SegModel, src: &[u32], tgt: &[u32]) -> Vec<f64> {
    let enc = m.encode(src).unwrap();
    let mut state = m.initial_state(&enc);
    let mut prev = BOS;
    let mut out = Vec::new();
    for &y in tgt {
        let step = m.decode_step(prev, &state, &enc).unwrap();
        out.push(step.log_probs[y as usize]);
        state = step.state;
        prev = y;
    }
    out
}

fn ex(src: &[u32], tgt: &[u32], w: f64) -> WeightedExample {
    WeightedExample {
        source: src.to_vec(),
        target: tgt.to_vec(),
        weight: w,
        origin: Origin::Gold,
    }
}

#[test]
fn sentence_loss_matches_stepwise_objective() {
    let m = toy(10, 4, true, 8);
    let src = [7u32, 8, 9];
    let tgt = [7u32, DELIM, 8, 9, EOS];
    let lps = step_log_probs(&m, &src, &tgt);
    let delim: Vec<bool> = tgt.iter().map(|&t| t == DELIM).collect();
    for (k, w) in [(1.0, 1.0), (2.0, 1.0), (3.5, 40.0)] {
        let got = m.sentence_loss(&ex(&src, &tgt, w), k).unwrap();
        let want = objective(&lps, &delim, k, w);
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
    // baseline: plain mean cross-entropy
    let mean_ce = -lps.iter().sum::<f64>() / lps.len() as f64;
    assert!((m.sentence_loss(&ex(&src, &tgt, 1.0), 1.0).unwrap() - mean_ce).abs() < 1e-12);
}

#[test]
fn empty_inputs_are_errors() {
    let m = toy(10, 2, false, 1);
    assert_eq!(m.sentence_loss(&ex(&[], &[EOS], 1.0), 2.0).unwrap_err(), ModelError::EmptySource);
    assert_eq!(m.sentence_loss(&ex(&[7], &[], 1.0), 2.0).unwrap_err(), ModelError::EmptyTarget);
}

#[test]
fn tied_table_drives_output_projection() {
    // EOS never appears as an input here, so its embedding row only acts
    // through the output projection.
    let src = [7u32, 8];
    let eos_row = |m: &SegModel| {
        let id = m.params().find("embed").unwrap();
        (id, EOS as usize * m.config().embed_dim)
    };
    for tied in [true, false] {
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 4,
            tied_embeddings: tied,
            ..ModelConfig::default()
        };
        let mut m = SegModel::new(cfg, 10, 3).unwrap();
        let enc = m.encode(&src).unwrap();
        let before = m.decode_step(BOS, &m.initial_state(&enc), &enc).unwrap();
        let (id, off) = eos_row(&m);
        m.params_mut().get_mut(id).data_mut()[off] += 0.5;
        let enc = m.encode(&src).unwrap();
        let after = m.decode_step(BOS, &m.initial_state(&enc), &enc).unwrap();
        let changed = before.log_probs != after.log_probs;
        assert_eq!(changed, tied, "tied={tied}");
    }
}

#[test]
fn sentence_loss_gradients() {
    for (ln, depth, tied) in [(true, 1, true), (false, 2, false)] {
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 4,
            enc_depth: depth,
            dec_depth: depth,
            dropout_state: 0.0,
            layer_norm: ln,
            tied_embeddings: tied,
            ..ModelConfig::default()
        };
        let mut m = SegModel::new(cfg, 9, 2).unwrap();
        randomize(&mut m, 17, 0.5);
        let a = ex(&[7, 8, 5, 7], &[7, DELIM, 8, 5, DELIM, 7, EOS], 3.0);
        let b = ex(&[6, 8], &[6, 8, EOS], 1.0);
        let batch = segtrans_core::model::Batch::new(
            &[&a, &b],
            segtrans_core::model::Weighting::Objective { k_delim: 2.0 },
        )
        .unwrap();
        let report = gradient_check(m.params(), 1e-5, 100, 3, |tape: &mut Tape<'_>| {
            m.batch_loss(tape, &batch, None)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}

#[test]
fn single_gru_step_gradient() {
    let cfg = ModelConfig {
        embed_dim: 5,
        hidden_dim: 6,
        dropout_state: 0.0,
        ..ModelConfig::default()
    };
    let mut m = SegModel::new(cfg, 8, 2).unwrap();
    randomize(&mut m, 99, 0.8);
    let e = ex(&[7], &[EOS], 1.0);
    let batch = segtrans_core::model::Batch::new(&[&e], segtrans_core::model::Weighting::Plain).unwrap();
    let report = gradient_check(m.params(), 1e-5, 100, 4, |tape: &mut Tape<'_>| m.batch_loss(tape, &batch, None)).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

fn sentence() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(7u32..12, 1..4), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn delimiter_weight_decomposes(words in sentence(), k in 1.0f64..50.0, seed in 0u64..1000) {
        let m = toy(12, 3, true, seed);
        let src: Vec<u32> = words.concat();
        let mut tgt = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                tgt.push(DELIM);
            }
            tgt.extend(w);
        }
        tgt.push(EOS);
        let n = tgt.len() as f64;
        let lps = step_log_probs(&m, &src, &tgt);
        let delim_nll: f64 = lps.iter().zip(&tgt).filter(|(_, &t)| t == DELIM).map(|(lp, _)| -lp).sum();
        let base = m.sentence_loss(&ex(&src, &tgt, 1.0), 1.0).unwrap();
        let weighted = m.sentence_loss(&ex(&src, &tgt, 1.0), k).unwrap();
        let expected = base + (k - 1.0) / n * delim_nll;
        prop_assert!((weighted - expected).abs() <= 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn every_step_is_a_distribution(words in sentence(), seed in 0u64..1000) {
        let m = toy(12, 3, true, seed);
        let src: Vec<u32> = words.concat();
        let enc = m.encode(&src).unwrap();
        let mut state = m.initial_state(&enc);
        let mut prev = BOS;
        for &y in &src {
            let out = m.decode_step(prev, &state, &enc).unwrap();
            let mx = out.log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + out.log_probs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() <= 1e-9);
            prop_assert!(out.attention.iter().all(|&a| a >= 0.0));
            prop_assert!((out.attention.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            state = out.state;
            prev = y;
        }
    }
}
