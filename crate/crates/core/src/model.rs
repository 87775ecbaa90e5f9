//! The sequence-to-sequence segmenter and the character language model.
//!
//! The segmenter is a bidirectional GRU encoder and a GRU decoder with
//! additive attention. One embedding table serves as source embedding,
//! target embedding and (transposed) output projection.
//!
//! GRU convention used throughout, with `x` the input and `h` the previous
//! state:
//!
//! ```text
//! r  = σ(Wr·x + Ur·h + br)
//! z  = σ(Wz·x + Uz·h + bz)
//! h̃  = tanh(Wn·x + r ⊙ (Un·h) + bn)
//! h' = (1 - z) ⊙ h + z ⊙ h̃
//! ```
//!
//! With layer normalization enabled, `W·x` and `U·h` (all three gates
//! fused) are normalized separately before the gates are formed.
//!
//! Attention at decoder step `i` scores encoder state `h_j` against the
//! previous decoder state `s` as `v · tanh(W_enc·h_j + W_dec·s)`. The first
//! decoder state is `tanh(W_init · mean_j(h_j) + b_init)`.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::augment::WeightedExample;
use crate::compute::{dropout_mask, ComputeError, ParamId, ParamStore, SequenceTargets, Tape, Tensor, Var};
use crate::data::{BOS, DELIM, PAD};
use crate::math;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("empty source sequence")]
    EmptySource,
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Gru,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Dropout between recurrent states, both sides unless overridden.
    pub dropout_state: f64,
    pub dropout_state_encoder: Option<f64>,
    pub dropout_state_decoder: Option<f64>,
    /// Probability of zeroing a whole source token embedding.
    pub dropout_src: f64,
    pub label_smoothing: f64,
    pub tied_embeddings: bool,
    pub layer_norm: bool,
    pub cell: Cell,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            enc_depth: 1,
            dec_depth: 1,
            dropout_state: 0.2,
            dropout_state_encoder: None,
            dropout_state_decoder: None,
            dropout_src: 0.0,
            label_smoothing: 0.0,
            tied_embeddings: true,
            layer_norm: true,
            cell: Cell::Gru,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(1..=MAX_DEPTH).contains(&self.enc_depth) || !(1..=MAX_DEPTH).contains(&self.dec_depth) {
            return bad(format!("depths must be in 1..={MAX_DEPTH}"));
        }
        let probs = [
            ("dropout_state", Some(self.dropout_state)),
            ("dropout_state_encoder", self.dropout_state_encoder),
            ("dropout_state_decoder", self.dropout_state_decoder),
            ("dropout_src", Some(self.dropout_src)),
            ("label_smoothing", Some(self.label_smoothing)),
        ];
        for (name, p) in probs {
            if let Some(p) = p {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("{name} = {p} is not in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    pub fn encoder_dropout(&self) -> f64 {
        self.dropout_state_encoder.unwrap_or(self.dropout_state)
    }

    pub fn decoder_dropout(&self) -> f64 {
        self.dropout_state_decoder.unwrap_or(self.dropout_state)
    }
}

const RECURRENT_INIT: f64 = 0.08;
pub const MAX_DEPTH: usize = 4;

// ---------------------------------------------------------------------------
// GRU layer

#[derive(Debug, Clone)]
struct GruLayer {
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    norm: Option<[ParamId; 4]>,
    hidden: usize,
}

impl GruLayer {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, layer_norm: bool, rng: &mut SplitMix64) -> Self {
        let w_x = store.add(format!("{name}.w_x"), Tensor::uniform(&[input, 3 * hidden], RECURRENT_INIT, rng));
        let w_h = store.add(format!("{name}.w_h"), Tensor::uniform(&[hidden, 3 * hidden], RECURRENT_INIT, rng));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[3 * hidden]));
        let norm = layer_norm.then(|| {
            let ones = || Tensor::new(vec![3 * hidden], vec![1.0; 3 * hidden]).unwrap();
            [
                store.add(format!("{name}.ln_x.gain"), ones()),
                store.add(format!("{name}.ln_x.bias"), Tensor::zeros(&[3 * hidden])),
                store.add(format!("{name}.ln_h.gain"), ones()),
                store.add(format!("{name}.ln_h.bias"), Tensor::zeros(&[3 * hidden])),
            ]
        });
        Self {
            w_x,
            w_h,
            bias,
            norm,
            hidden,
        }
    }

    /// One step for a batch: `x [B,in]`, `h [B,H]` → `[B,H]`. `mask` is the
    /// dropout mask applied to `h` before the recurrent projection.
    fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, mask: Option<&Rc<[f64]>>) -> Result<Var, ComputeError> {
        let hd = self.hidden;
        let w_x = tape.param(self.w_x);
        let w_h = tape.param(self.w_h);
        let bias = tape.param(self.bias);
        let mut xw = tape.matmul(x, w_x)?;
        let h_in = match mask {
            Some(m) => tape.mask_mul(h, m.clone())?,
            None => h,
        };
        let mut hu = tape.matmul(h_in, w_h)?;
        if let Some([gx, bx, gh, bh]) = self.norm {
            let (gx, bx, gh, bh) = (tape.param(gx), tape.param(bx), tape.param(gh), tape.param(bh));
            xw = tape.layer_norm(xw, gx, bx)?;
            hu = tape.layer_norm(hu, gh, bh)?;
        }
        let xw = tape.add_row(xw, bias)?;

        let x_rz = tape.slice_cols(xw, 0, 2 * hd)?;
        let h_rz = tape.slice_cols(hu, 0, 2 * hd)?;
        let rz_pre = tape.add(x_rz, h_rz)?;
        let rz = tape.sigmoid(rz_pre);
        let r = tape.slice_cols(rz, 0, hd)?;
        let z = tape.slice_cols(rz, hd, hd)?;

        let x_n = tape.slice_cols(xw, 2 * hd, hd)?;
        let h_n = tape.slice_cols(hu, 2 * hd, hd)?;
        let gated = tape.mul(r, h_n)?;
        let n_pre = tape.add(x_n, gated)?;
        let n = tape.tanh(n_pre);

        // h' = h + z ⊙ (h̃ - h)
        let diff = tape.sub(n, h)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h, upd)
    }
}

fn state_masks(
    rng: Option<&mut SplitMix64>,
    p: f64,
    layers: usize,
    batch: usize,
    hidden: usize,
) -> Option<Vec<Rc<[f64]>>> {
    match rng {
        Some(rng) if p > 0.0 => Some(
            (0..layers)
                .map(|_| Rc::from(dropout_mask(batch * hidden, p, rng)))
                .collect(),
        ),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Batches

/// How per-position loss weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Sentence weight times delimiter weight, divided by target length.
    Objective { k_delim: f64 },
    /// Weight 1 on every real target position.
    Plain,
}

/// Padded, time-major teacher-forcing batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    /// `src_len × size`, `PAD` filled.
    pub src_ids: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub tgt_len: usize,
    /// Previous token at each target position (`BOS` first).
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Per-position weight (delimiter weight); 0 on padding.
    pub lambdas: Vec<f64>,
    /// Per-sentence weight.
    pub seq_weights: Vec<f64>,
    /// Per-sentence divisor (target length, or 1 for plain sums).
    pub divisors: Vec<f64>,
    /// Number of real target positions.
    pub target_tokens: usize,
}

impl Batch {
    pub fn new(examples: &[&WeightedExample], weighting: Weighting) -> Result<Self, ModelError> {
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let tgt_len = examples.iter().map(|e| e.target.len()).max().unwrap_or(0);
        let mut src_ids = vec![PAD; src_len * size];
        let mut inputs = vec![PAD; tgt_len * size];
        let mut targets = vec![PAD; tgt_len * size];
        let mut lambdas = vec![0.0; tgt_len * size];
        let mut seq_weights = vec![1.0; size];
        let mut divisors = vec![1.0; size];
        let mut target_tokens = 0;
        for (b, e) in examples.iter().enumerate() {
            if e.target.is_empty() {
                return Err(ModelError::EmptyTarget);
            }
            for (t, &id) in e.source.iter().enumerate() {
                src_ids[t * size + b] = id;
            }
            if let Weighting::Objective { .. } = weighting {
                seq_weights[b] = e.weight;
                divisors[b] = e.target.len() as f64;
            }
            for (t, &id) in e.target.iter().enumerate() {
                let at = t * size + b;
                inputs[at] = if t == 0 { BOS } else { e.target[t - 1] };
                targets[at] = id;
                lambdas[at] = match weighting {
                    Weighting::Objective { k_delim } if id == DELIM => k_delim,
                    _ => 1.0,
                };
            }
            target_tokens += e.target.len();
        }
        Ok(Self {
            size,
            src_len,
            src_ids,
            src_lens: examples.iter().map(|e| e.source.len()).collect(),
            tgt_len,
            inputs,
            targets,
            lambdas,
            seq_weights,
            divisors,
            target_tokens,
        })
    }

    fn step_slice<'a, T>(&self, v: &'a [T], t: usize) -> &'a [T] {
        &v[t * self.size..(t + 1) * self.size]
    }

    fn loss(&self, tape: &mut Tape<'_>, steps: &[Var], smoothing: f64) -> Result<Var, ComputeError> {
        let y = SequenceTargets {
            targets: &self.targets,
            lambdas: &self.lambdas,
            weights: &self.seq_weights,
            divisors: &self.divisors,
        };
        tape.sequence_nll(steps, y, smoothing)
    }
}

/// Something the training loop can optimize.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn vocab_size(&self) -> usize;

    /// Weighted negative log-likelihood of the batch. `rng` is
    /// `Some` in training mode (dropout and label smoothing on).
    fn batch_loss(&self, tape: &mut Tape<'_>, batch: &Batch, rng: Option<&mut SplitMix64>) -> Result<Var, ModelError>;
}

fn check_ids(ids: &[u32], size: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&id| id as usize >= size) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, size }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Output layer shared by decoder and LM

#[derive(Debug, Clone)]
struct Readout {
    w: ParamId,
    b: ParamId,
    vocab_bias: ParamId,
    /// Separate output table when embeddings are untied.
    out_table: Option<ParamId>,
}

impl Readout {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, cfg: &ModelConfig, vocab: usize, rng: &mut SplitMix64) -> Self {
        let e = cfg.embed_dim;
        Self {
            w: store.add(format!("{prefix}.w"), Tensor::uniform(&[input, e], RECURRENT_INIT, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[e])),
            vocab_bias: store.add(format!("{prefix}.vocab_bias"), Tensor::zeros(&[vocab])),
            out_table: (!cfg.tied_embeddings).then(|| {
                store.add(format!("{prefix}.table"), embedding_init(vocab, e, rng))
            }),
        }
    }

    /// `log_softmax(tanh([parts]·W + b) · Eᵀ + b_vocab)`
    fn log_probs(&self, tape: &mut Tape<'_>, parts: &[Var], embed: ParamId) -> Result<Var, ComputeError> {
        let x = tape.concat(parts)?;
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let pre = tape.matmul(x, w)?;
        let pre = tape.add_row(pre, b)?;
        let o = tape.tanh(pre);
        let table = tape.param(self.out_table.unwrap_or(embed));
        let logits = tape.matmul_bt(o, table)?;
        let vb = tape.param(self.vocab_bias);
        let logits = tape.add_row(logits, vb)?;
        Ok(tape.log_softmax(logits))
    }
}

fn embedding_init(vocab: usize, dim: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(&[vocab, dim], 1.0 / math::sqrt(dim as f64), rng)
}

// ---------------------------------------------------------------------------
// Segmenter

#[derive(Debug, Clone)]
pub struct SegModel {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore,
    embed: ParamId,
    enc_fwd: Vec<GruLayer>,
    enc_bwd: Vec<GruLayer>,
    dec: Vec<GruLayer>,
    att_enc: ParamId,
    att_dec: ParamId,
    att_v: ParamId,
    init_w: ParamId,
    init_b: ParamId,
    readout: Readout,
}

/// Encoder results on a tape.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// `[B·L, 2H]`, batch-major.
    pub states: Var,
    /// `W_enc · h_j`, `[B·L, H]`.
    pub keys: Var,
    /// `[B, H]`
    pub init: Var,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Encoder output for one sentence, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    /// `[L, 2H]`
    pub states: Vec<f64>,
    /// `[L, H]`
    pub keys: Vec<f64>,
    pub len: usize,
    init: Vec<f64>,
}

/// Decoder state for one hypothesis: one `[H]` vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub state: DecoderState,
    pub attention: Vec<f64>,
}

impl SegModel {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(ModelError::InvalidConfig("empty vocabulary".into()));
        }
        let mut rng = SplitMix64::derive(seed, "segmenter-init");
        let mut store = ParamStore::new();
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let ln = config.layer_norm;
        let embed = store.add("embed", embedding_init(vocab_size, e, &mut rng));
        let mut enc_fwd = Vec::new();
        let mut enc_bwd = Vec::new();
        for l in 0..config.enc_depth {
            let input = if l == 0 { e } else { 2 * h };
            enc_fwd.push(GruLayer::new(&mut store, &format!("enc.l{l}.fwd"), input, h, ln, &mut rng));
            enc_bwd.push(GruLayer::new(&mut store, &format!("enc.l{l}.bwd"), input, h, ln, &mut rng));
        }
        let att_enc = store.add("att.w_enc", Tensor::uniform(&[2 * h, h], RECURRENT_INIT, &mut rng));
        let att_dec = store.add("att.w_dec", Tensor::uniform(&[h, h], RECURRENT_INIT, &mut rng));
        let att_v = store.add("att.v", Tensor::uniform(&[h, 1], RECURRENT_INIT, &mut rng));
        let init_w = store.add("dec.init.w", Tensor::uniform(&[2 * h, h], RECURRENT_INIT, &mut rng));
        let init_b = store.add("dec.init.b", Tensor::zeros(&[h]));
        let mut dec = Vec::new();
        for l in 0..config.dec_depth {
            let input = if l == 0 { e + 2 * h } else { h };
            dec.push(GruLayer::new(&mut store, &format!("dec.l{l}"), input, h, ln, &mut rng));
        }
        let readout = Readout::new(&mut store, "readout", h + 2 * h + e, &config, vocab_size, &mut rng);
        Ok(Self {
            config,
            vocab_size,
            params: store,
            embed,
            enc_fwd,
            enc_bwd,
            dec,
            att_enc,
            att_dec,
            att_v,
            init_w,
            init_b,
            readout,
        })
    }

    /// Rebuilds a model around stored parameters (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, vocab_size: usize, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab_size, 0)?;
        if !model.params.same_layout(&params) {
            return Err(ModelError::InvalidConfig(
                "parameters do not match the model configuration".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Runs the encoder over a time-major, padded batch.
    pub fn encode_vars(
        &self,
        tape: &mut Tape<'_>,
        src_ids: &[u32],
        src_lens: &[usize],
        mut rng: Option<&mut SplitMix64>,
    ) -> Result<EncoderVars, ModelError> {
        let batch = src_lens.len();
        if batch == 0 || src_lens.contains(&0) {
            return Err(ModelError::EmptySource);
        }
        let len = src_ids.len() / batch;
        check_ids(src_ids, self.vocab_size)?;
        let h = self.config.hidden_dim;

        let table = tape.param(self.embed);
        let mut emb = tape.embedding(table, src_ids)?;
        if let Some(r) = rng.as_deref_mut() {
            let p = self.config.dropout_src;
            if p > 0.0 {
                let mask = dropout_mask(src_ids.len(), p, r);
                emb = tape.row_mask_mul(emb, Rc::from(mask))?;
            }
        }
        let mut inputs: Vec<Var> = (0..len)
            .map(|t| tape.slice_rows(emb, t * batch, batch))
            .collect::<Result<_, _>>()?;

        let p = self.config.encoder_dropout();
        let masks_f = state_masks(rng.as_deref_mut(), p, self.config.enc_depth, batch, h);
        let masks_b = state_masks(rng, p, self.config.enc_depth, batch, h);
        let zero = tape.zeros(batch, h);
        for l in 0..self.config.enc_depth {
            let mut fwd = Vec::with_capacity(len);
            let mut state = zero;
            for x in &inputs {
                state = self.enc_fwd[l].step(tape, *x, state, masks_f.as_ref().map(|m| &m[l]))?;
                fwd.push(state);
            }
            let mut bwd = vec![zero; len];
            let mut state = zero;
            for t in (0..len).rev() {
                let next = self.enc_bwd[l].step(tape, inputs[t], state, masks_b.as_ref().map(|m| &m[l]))?;
                // positions past an item's end keep the zero start state
                state = if src_lens.iter().all(|&n| t < n) {
                    next
                } else {
                    let keep: Vec<f64> = src_lens.iter().map(|&n| (t < n) as u8 as f64).collect();
                    tape.blend(next, state, Rc::from(keep))?
                };
                bwd[t] = state;
            }
            inputs = fwd
                .iter()
                .zip(&bwd)
                .map(|(&f, &b)| tape.concat(&[f, b]))
                .collect::<Result<_, _>>()?;
        }

        let states = tape.stack_time(&inputs)?;
        let w_enc = tape.param(self.att_enc);
        let keys = tape.matmul(states, w_enc)?;
        let mut valid = Vec::with_capacity(batch * len);
        let mut uniform = Vec::with_capacity(batch * len);
        for &n in src_lens {
            for j in 0..len {
                valid.push(j < n);
                uniform.push(if j < n { 1.0 / n as f64 } else { 0.0 });
            }
        }
        let mean_w = tape.constant(batch, len, uniform)?;
        let mean = tape.attend(mean_w, states)?;
        let iw = tape.param(self.init_w);
        let ib = tape.param(self.init_b);
        let pre = tape.matmul(mean, iw)?;
        let pre = tape.add_row(pre, ib)?;
        let init = tape.tanh(pre);
        Ok(EncoderVars {
            states,
            keys,
            init,
            valid,
            batch,
            len,
        })
    }

    /// One decoder step for a batch. Returns `(log-probs [B,V], new layer
    /// states, attention [B,L])`.
    pub fn step_vars(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncoderVars,
        prev: &[u32],
        states: &[Var],
        masks: Option<&[Rc<[f64]>]>,
    ) -> Result<(Var, Vec<Var>, Var), ModelError> {
        let top = *states.last().expect("at least one decoder layer");
        let table = tape.param(self.embed);
        let e = tape.embedding(table, prev)?;

        let w_dec = tape.param(self.att_dec);
        let q = tape.matmul(top, w_dec)?;
        let pre = tape.add_groups(enc.keys, q, enc.len)?;
        let act = tape.tanh(pre);
        let v = tape.param(self.att_v);
        let scores = tape.matmul(act, v)?;
        let scores = tape.reshape(scores, enc.batch, enc.len)?;
        let alpha = tape.masked_softmax(scores, &enc.valid)?;
        let context = tape.attend(alpha, enc.states)?;

        let mut x = tape.concat(&[e, context])?;
        let mut next = Vec::with_capacity(states.len());
        for (l, layer) in self.dec.iter().enumerate() {
            let s = layer.step(tape, x, states[l], masks.map(|m| &m[l]))?;
            next.push(s);
            x = s;
        }
        let logp = self.readout.log_probs(tape, &[x, context, e], self.embed)?;
        Ok((logp, next, alpha))
    }

    /// Encodes one sentence for decoding.
    pub fn encode(&self, source: &[u32]) -> Result<EncodedSource, ModelError> {
        if source.is_empty() {
            return Err(ModelError::EmptySource);
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_vars(&mut tape, source, &[source.len()], None)?;
        Ok(EncodedSource {
            states: tape.value(enc.states).to_vec(),
            keys: tape.value(enc.keys).to_vec(),
            len: source.len(),
            init: tape.value(enc.init).to_vec(),
        })
    }

    pub fn initial_state(&self, enc: &EncodedSource) -> DecoderState {
        DecoderState {
            layers: vec![enc.init.clone(); self.config.dec_depth],
        }
    }

    /// Per-step conditional distribution for one hypothesis.
    pub fn decode_step(&self, prev: u32, state: &DecoderState, enc: &EncodedSource) -> Result<StepOutput, ModelError> {
        Ok(self.decode_step_batch(&[prev], &[state], enc)?.remove(0))
    }

    /// Steps several hypotheses over the same source at once.
    pub fn decode_step_batch(
        &self,
        prev: &[u32],
        states: &[&DecoderState],
        enc: &EncodedSource,
    ) -> Result<Vec<StepOutput>, ModelError> {
        check_ids(prev, self.vocab_size)?;
        let b = prev.len();
        let (l, h) = (enc.len, self.config.hidden_dim);
        let mut tape = Tape::new(&self.params);
        let rep = |v: &[f64]| -> Vec<f64> { (0..b).flat_map(|_| v.iter().copied()).collect() };
        let vars = EncoderVars {
            states: tape.constant(b * l, 2 * h, rep(&enc.states))?,
            keys: tape.constant(b * l, h, rep(&enc.keys))?,
            init: tape.zeros(b, h),
            valid: vec![true; b * l],
            batch: b,
            len: l,
        };
        let layer_vars: Vec<Var> = (0..self.config.dec_depth)
            .map(|k| {
                let data: Vec<f64> = states.iter().flat_map(|s| s.layers[k].iter().copied()).collect();
                tape.constant(b, h, data)
            })
            .collect::<Result<_, _>>()?;
        let (logp, next, alpha) = self.step_vars(&mut tape, &vars, prev, &layer_vars, None)?;
        let v = self.vocab_size;
        let (lp, al) = (tape.value(logp), tape.value(alpha));
        Ok((0..b)
            .map(|i| StepOutput {
                log_probs: lp[i * v..(i + 1) * v].to_vec(),
                state: DecoderState {
                    layers: next.iter().map(|&s| tape.value(s)[i * h..(i + 1) * h].to_vec()).collect(),
                },
                attention: al[i * l..(i + 1) * l].to_vec(),
            })
            .collect())
    }

    /// Loss of one example:
    /// `-(weight / n) · Σ_i λ_i · log P(y_i | y_<i, X)` with `λ_i = k_delim`
    /// on delimiters and 1 elsewhere. No dropout or smoothing.
    pub fn sentence_loss(&self, example: &WeightedExample, k_delim: f64) -> Result<f64, ModelError> {
        let batch = Batch::new(&[example], Weighting::Objective { k_delim })?;
        let mut tape = Tape::new(&self.params);
        let loss = self.batch_loss(&mut tape, &batch, None)?;
        Ok(tape.scalar(loss))
    }
}

impl Trainable for SegModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn batch_loss(&self, tape: &mut Tape<'_>, batch: &Batch, mut rng: Option<&mut SplitMix64>) -> Result<Var, ModelError> {
        let enc = self.encode_vars(tape, &batch.src_ids, &batch.src_lens, rng.as_deref_mut())?;
        let smoothing = if rng.is_some() { self.config.label_smoothing } else { 0.0 };
        let masks = state_masks(
            rng,
            self.config.decoder_dropout(),
            self.config.dec_depth,
            batch.size,
            self.config.hidden_dim,
        );
        check_ids(&batch.targets, self.vocab_size)?;
        let mut states = vec![enc.init; self.config.dec_depth];
        let mut terms = Vec::with_capacity(batch.tgt_len);
        for t in 0..batch.tgt_len {
            let prev = batch.step_slice(&batch.inputs, t);
            let (logp, next, _) = self.step_vars(tape, &enc, prev, &states, masks.as_deref())?;
            states = next;
            terms.push(logp);
        }
        Ok(batch.loss(tape, &terms, smoothing)?)
    }
}

// ---------------------------------------------------------------------------
// Character language model

/// GRU language model over target sequences; the decoder without attention.
#[derive(Debug, Clone)]
pub struct CharLM {
    config: ModelConfig,
    vocab_size: usize,
    params: ParamStore,
    embed: ParamId,
    layers: Vec<GruLayer>,
    readout: Readout,
}

/// LM state for one sequence: one `[H]` vector per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub layers: Vec<Vec<f64>>,
}

impl CharLM {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(ModelError::InvalidConfig("empty vocabulary".into()));
        }
        let mut rng = SplitMix64::derive(seed, "lm-init");
        let mut store = ParamStore::new();
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let embed = store.add("lm.embed", embedding_init(vocab_size, e, &mut rng));
        let layers = (0..config.dec_depth)
            .map(|l| {
                let input = if l == 0 { e } else { h };
                GruLayer::new(&mut store, &format!("lm.l{l}"), input, h, config.layer_norm, &mut rng)
            })
            .collect();
        let readout = Readout::new(&mut store, "lm.readout", h + e, &config, vocab_size, &mut rng);
        Ok(Self {
            config,
            vocab_size,
            params: store,
            embed,
            layers,
            readout,
        })
    }

    pub fn from_params(config: ModelConfig, vocab_size: usize, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab_size, 0)?;
        if !model.params.same_layout(&params) {
            return Err(ModelError::InvalidConfig(
                "parameters do not match the model configuration".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn initial_state(&self) -> LmState {
        LmState {
            layers: vec![vec![0.0; self.config.hidden_dim]; self.config.dec_depth],
        }
    }

    fn step_vars(
        &self,
        tape: &mut Tape<'_>,
        prev: &[u32],
        states: &[Var],
        masks: Option<&[Rc<[f64]>]>,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let table = tape.param(self.embed);
        let e = tape.embedding(table, prev)?;
        let mut x = e;
        let mut next = Vec::with_capacity(states.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let s = layer.step(tape, x, states[l], masks.map(|m| &m[l]))?;
            next.push(s);
            x = s;
        }
        let logp = self.readout.log_probs(tape, &[x, e], self.embed)?;
        Ok((logp, next))
    }

    pub fn lm_step(&self, prev: u32, state: &LmState) -> Result<(Vec<f64>, LmState), ModelError> {
        Ok(self.lm_step_batch(&[prev], &[state])?.remove(0))
    }

    pub fn lm_step_batch(&self, prev: &[u32], states: &[&LmState]) -> Result<Vec<(Vec<f64>, LmState)>, ModelError> {
        check_ids(prev, self.vocab_size)?;
        let b = prev.len();
        let h = self.config.hidden_dim;
        let mut tape = Tape::new(&self.params);
        let layer_vars: Vec<Var> = (0..self.config.dec_depth)
            .map(|k| {
                let data: Vec<f64> = states.iter().flat_map(|s| s.layers[k].iter().copied()).collect();
                tape.constant(b, h, data)
            })
            .collect::<Result<_, _>>()?;
        let (logp, next) = self.step_vars(&mut tape, prev, &layer_vars, None)?;
        let v = self.vocab_size;
        let lp = tape.value(logp);
        Ok((0..b)
            .map(|i| {
                let state = LmState {
                    layers: next.iter().map(|&s| tape.value(s)[i * h..(i + 1) * h].to_vec()).collect(),
                };
                (lp[i * v..(i + 1) * v].to_vec(), state)
            })
            .collect())
    }
}

impl Trainable for CharLM {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn batch_loss(&self, tape: &mut Tape<'_>, batch: &Batch, rng: Option<&mut SplitMix64>) -> Result<Var, ModelError> {
        check_ids(&batch.targets, self.vocab_size)?;
        let smoothing = if rng.is_some() { self.config.label_smoothing } else { 0.0 };
        let masks = state_masks(
            rng,
            self.config.decoder_dropout(),
            self.config.dec_depth,
            batch.size,
            self.config.hidden_dim,
        );
        let zero = tape.zeros(batch.size, self.config.hidden_dim);
        let mut states = vec![zero; self.config.dec_depth];
        let mut terms = Vec::with_capacity(batch.tgt_len);
        for t in 0..batch.tgt_len {
            let (logp, next) = self.step_vars(tape, batch.step_slice(&batch.inputs, t), &states, masks.as_deref())?;
            states = next;
            terms.push(logp);
        }
        Ok(batch.loss(tape, &terms, smoothing)?)
    }
}
