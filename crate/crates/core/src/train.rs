//! Optimization: Adam, token-budget batching, early stopping on validation
//! cross-entropy, fine-tuning and the in-memory checkpoint.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::augment::WeightedExample;
use crate::compute::{ParamStore, Tape};
use crate::data::Vocabulary;
use crate::math;
use crate::model::{Batch, CharLM, ModelConfig, ModelError, SegModel, Trainable, Weighting};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite loss {value} at epoch {epoch}, update {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("empty validation set")]
    EmptyValid,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("vocabulary does not match the starting checkpoint")]
    VocabularyMismatch,
    #[error("model configuration does not match the starting checkpoint")]
    ConfigMismatch,
    #[error("checkpoint holds a {found} model, expected a {expected} model")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("gradient/moment shapes do not match parameter {tensor}")]
    ShapeMismatch { tensor: String },
    #[error("adam step must be at least 1")]
    ZeroStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size_tokens: usize,
    pub patience: usize,
    pub k_delim: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Updates between validation runs; `None` means once per epoch.
    pub eval_every: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

pub const DESK_BATCH_TOKENS: usize = 512;
pub const FULL_BATCH_TOKENS: usize = 6000;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size_tokens: DESK_BATCH_TOKENS,
            patience: 10,
            k_delim: 2.0,
            max_epochs: 100,
            seed: 1,
            eval_every: None,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.batch_size_tokens == 0 {
            return bad("batch_size_tokens must be positive");
        }
        if !(self.k_delim > 0.0) {
            return bad("k_delim must be > 0");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros(params: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step at step number `t` (1-based).
pub fn adam_update(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    moments: &mut AdamMoments,
    t: u64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if t == 0 {
        return Err(TrainError::ZeroStep);
    }
    for id in params.ids() {
        let ok = grads.get(id.0).map(Vec::len) == Some(params.get(id).len())
            && moments.m.get(id.0).map(Vec::len) == Some(params.get(id).len())
            && moments.v.get(id.0).map(Vec::len) == Some(params.get(id).len());
        if !ok {
            return Err(TrainError::ShapeMismatch {
                tensor: params.name(id).into(),
            });
        }
        if grads[id.0].iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                tensor: params.name(id).into(),
            });
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - math::powi(b1, t);
    let c2 = 1.0 - math::powi(b2, t);
    for id in params.ids() {
        let i = id.0;
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        let theta = params.get_mut(id).data_mut();
        for (j, &g) in grads[i].iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= cfg.learning_rate * m_hat / (math::sqrt(v_hat) + cfg.epsilon);
        }
    }
    moments.t = t;
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
    let norm = math::sqrt(sq);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

// ---------------------------------------------------------------------------
// Early stopping

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops after `patience` consecutive evaluations without a strict
/// improvement over the best cost seen.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stalled: 0,
        }
    }

    pub fn observe(&mut self, cost: f64) -> Verdict {
        if cost < self.best {
            self.best = cost;
            self.stalled = 0;
            Verdict::Improved
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                Verdict::Stop
            } else {
                Verdict::NoImprovement
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

// ---------------------------------------------------------------------------
// Batching and costs

/// Groups example indices into batches whose padded target size
/// (`count × longest target`) stays within `budget` tokens. Examples are
/// shuffled, then sorted by length so batches hold similar lengths, and the
/// batch order is shuffled again.
pub fn make_batches(examples: &[WeightedExample], budget: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order = rng.permutation(examples.len());
    order.sort_by_key(|&i| (examples[i].target.len(), examples[i].source.len()));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = examples[i].target.len();
        let grown = longest.max(len);
        if !current.is_empty() && grown * (current.len() + 1) > budget {
            batches.push(core::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    rng.shuffle(&mut batches);
    batches
}

fn deterministic_batches(examples: &[WeightedExample], budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].target.len());
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = examples[i].target.len();
        if !current.is_empty() && longest.max(len) * (current.len() + 1) > budget {
            out.push(core::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Unweighted per-token cross-entropy (nats per target token, `</s>` and
/// delimiters included). Sentence weights and `k_delim` do not apply.
pub fn validation_cost<M: Trainable>(model: &M, valid: &[WeightedExample], budget: usize) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut tokens = 0;
    for idx in deterministic_batches(valid, budget) {
        let refs: Vec<&WeightedExample> = idx.iter().map(|&i| &valid[i]).collect();
        let batch = Batch::new(&refs, Weighting::Plain)?;
        let mut tape = Tape::new(model.params());
        let loss = model.batch_loss(&mut tape, &batch, None)?;
        total += tape.scalar(loss);
        tokens += batch.target_tokens;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Total weighted objective `Σ_s L_s` over a dataset at fixed parameters.
pub fn dataset_loss<M: Trainable>(
    model: &M,
    data: &[WeightedExample],
    k_delim: f64,
    budget: usize,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for idx in deterministic_batches(data, budget) {
        let refs: Vec<&WeightedExample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::new(&refs, Weighting::Objective { k_delim })?;
        let mut tape = Tape::new(model.params());
        let loss = model.batch_loss(&mut tape, &batch, None)?;
        total += tape.scalar(loss);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Training loop

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean objective per sentence over updates since the last validation
    /// (`NaN` before the first update).
    pub train_cost: f64,
    pub valid_cost: f64,
    pub best: bool,
}

impl fmt::Display for ValidationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} train_cost={:.6} valid_cost={:.6}{}",
            self.step,
            self.epoch,
            self.train_cost,
            self.valid_cost,
            if self.best { " *" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub best_valid_cost: f64,
    /// Epoch and update count at the best evaluation.
    pub best_epoch: usize,
    pub best_step: usize,
    pub epochs: usize,
    pub steps: usize,
    pub history: Vec<ValidationRecord>,
    /// Optimizer state at the end of training.
    pub moments: AdamMoments,
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest validation cost seen (the starting parameters included).
///
/// `log` receives each validation record as it is produced.
pub fn train<M: Trainable>(
    model: &mut M,
    data: &[WeightedExample],
    valid: &[WeightedExample],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&ValidationRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if valid.is_empty() {
        return Err(TrainError::EmptyValid);
    }
    let budget = cfg.batch_size_tokens;
    let mut batch_rng = SplitMix64::derive(cfg.seed, "batches");
    let mut dropout_rng = SplitMix64::derive(cfg.seed, "dropout");
    let mut moments = AdamMoments::zeros(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();

    let start_cost = validation_cost(model, valid, budget)?;
    check_cost(start_cost, 0, 0)?;
    stopper.observe(start_cost);
    let mut best_params = model.params().clone();
    let (mut best_epoch, mut best_step) = (0, 0);
    let first = ValidationRecord {
        epoch: 0,
        step: 0,
        train_cost: f64::NAN,
        valid_cost: start_cost,
        best: true,
    };
    log(&first);
    history.push(first);

    let mut step = 0usize;
    let mut epoch = 0usize;
    let (mut cost_sum, mut cost_count) = (0.0, 0usize);
    'outer: while epoch < cfg.max_epochs {
        epoch += 1;
        let batches = make_batches(data, budget, &mut batch_rng);
        let n_batches = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let refs: Vec<&WeightedExample> = idx.iter().map(|&i| &data[i]).collect();
            let batch = Batch::new(&refs, Weighting::Objective { k_delim: cfg.k_delim })?;
            let (cost, mut grads) = {
                let mut tape = Tape::new(model.params());
                let loss = model.batch_loss(&mut tape, &batch, Some(&mut dropout_rng))?;
                let mean = tape.scale(loss, 1.0 / batch.size as f64);
                let g = tape.backward(mean).map_err(ModelError::from)?;
                (tape.scalar(mean), tape.param_grads(&g))
            };
            step += 1;
            check_cost(cost, epoch, step)?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_update(model.params_mut(), &grads, &mut moments, step as u64, cfg)?;
            cost_sum += cost;
            cost_count += 1;

            let due = match cfg.eval_every {
                Some(k) => step.is_multiple_of(k),
                None => b + 1 == n_batches,
            };
            if !due {
                continue;
            }
            let valid_cost = validation_cost(model, valid, budget)?;
            check_cost(valid_cost, epoch, step)?;
            let verdict = stopper.observe(valid_cost);
            let improved = verdict == Verdict::Improved;
            if improved {
                best_params = model.params().clone();
                best_epoch = epoch;
                best_step = step;
            }
            let rec = ValidationRecord {
                epoch,
                step,
                train_cost: cost_sum / cost_count as f64,
                valid_cost,
                best: improved,
            };
            log(&rec);
            history.push(rec);
            cost_sum = 0.0;
            cost_count = 0;
            if verdict == Verdict::Stop {
                break 'outer;
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainReport {
        best_valid_cost: stopper.best(),
        best_epoch,
        best_step,
        epochs: epoch,
        steps: step,
        history,
        moments,
    })
}

fn check_cost(value: f64, epoch: usize, step: usize) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { epoch, step, value })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Segmenter,
    LanguageModel,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Segmenter => "segmenter",
            ModelKind::LanguageModel => "lm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "segmenter" => Some(ModelKind::Segmenter),
            "lm" => Some(ModelKind::LanguageModel),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub step: usize,
    pub best_valid_cost: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub model_config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub moments: Option<AdamMoments>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    fn build(
        kind: ModelKind,
        model_config: ModelConfig,
        vocab: &Vocabulary,
        params: ParamStore,
        report: Option<&TrainReport>,
        seed: u64,
        keep_moments: bool,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind,
            model_config,
            vocab: vocab.clone(),
            params,
            moments: report.filter(|_| keep_moments).map(|r| r.moments.clone()),
            meta: TrainingMeta {
                epoch: report.map_or(0, |r| r.best_epoch),
                step: report.map_or(0, |r| r.best_step),
                best_valid_cost: report.map_or(f64::NAN, |r| r.best_valid_cost),
                seed,
            },
        }
    }

    pub fn from_segmenter(
        model: &SegModel,
        vocab: &Vocabulary,
        report: Option<&TrainReport>,
        seed: u64,
        keep_moments: bool,
    ) -> Self {
        Self::build(
            ModelKind::Segmenter,
            model.config().clone(),
            vocab,
            model.params().clone(),
            report,
            seed,
            keep_moments,
        )
    }

    pub fn from_lm(model: &CharLM, vocab: &Vocabulary, report: Option<&TrainReport>, seed: u64, keep_moments: bool) -> Self {
        Self::build(
            ModelKind::LanguageModel,
            model.config().clone(),
            vocab,
            model.params().clone(),
            report,
            seed,
            keep_moments,
        )
    }

    pub fn segmenter(&self) -> Result<SegModel, TrainError> {
        self.expect_kind(ModelKind::Segmenter)?;
        Ok(SegModel::from_params(
            self.model_config.clone(),
            self.vocab.len(),
            self.params.clone(),
        )?)
    }

    pub fn lm(&self) -> Result<CharLM, TrainError> {
        self.expect_kind(ModelKind::LanguageModel)?;
        Ok(CharLM::from_params(
            self.model_config.clone(),
            self.vocab.len(),
            self.params.clone(),
        )?)
    }

    fn expect_kind(&self, expected: ModelKind) -> Result<(), TrainError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(TrainError::KindMismatch {
                expected,
                found: self.kind,
            })
        }
    }
}

/// Continues training a segmenter from `start` with fresh optimizer moments.
pub fn fine_tune(
    start: &Checkpoint,
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    gold: &[WeightedExample],
    valid: &[WeightedExample],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&ValidationRecord),
) -> Result<(SegModel, TrainReport), TrainError> {
    if &start.vocab != vocab {
        return Err(TrainError::VocabularyMismatch);
    }
    if &start.model_config != model_config {
        return Err(TrainError::ConfigMismatch);
    }
    let mut model = start.segmenter()?;
    let report = train(&mut model, gold, valid, cfg, log)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Origin;
    use crate::compute::Tensor;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn adam_first_step() {
        let mut p = one_param(0.0);
        let mut m = AdamMoments::zeros(&p);
        adam_update(&mut p, &[vec![1.0]], &mut m, 1, &TrainConfig::default()).unwrap();
        let expected = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = one_param(0.7);
        let mut m = AdamMoments::zeros(&p);
        for t in 1..=3 {
            adam_update(&mut p, &[vec![0.0]], &mut m, t, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 0.7);
    }

    #[test]
    fn adam_symmetric_parameters() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2], vec![0.3, 0.3]).unwrap());
        let mut m = AdamMoments::zeros(&s);
        adam_update(&mut s, &[vec![0.25, 0.25]], &mut m, 1, &TrainConfig::default()).unwrap();
        let d = s.tensors()[0].data();
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut p = one_param(0.0);
        let mut m = AdamMoments::zeros(&p);
        let cfg = TrainConfig::default();
        assert_eq!(
            adam_update(&mut p, &[vec![f64::NAN]], &mut m, 1, &cfg),
            Err(TrainError::NonFiniteGradient { tensor: "w".into() })
        );
        assert_eq!(adam_update(&mut p, &[vec![1.0]], &mut m, 0, &cfg), Err(TrainError::ZeroStep));
        assert!(matches!(
            adam_update(&mut p, &[vec![1.0, 2.0]], &mut m, 1, &cfg),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn early_stopping_trace() {
        let mut e = EarlyStopping::new(2);
        assert_eq!(e.observe(5.0), Verdict::Improved);
        assert_eq!(e.observe(4.0), Verdict::Improved);
        assert_eq!(e.observe(4.0), Verdict::NoImprovement);
        assert_eq!(e.observe(4.0), Verdict::Stop);
        assert_eq!(e.best(), 4.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0][0], 0.3);
    }

    fn ex(n: usize) -> WeightedExample {
        WeightedExample {
            source: vec![7; n],
            target: vec![7; n + 1],
            weight: 1.0,
            origin: Origin::Gold,
        }
    }

    #[test]
    fn batches_respect_budget_and_cover_all() {
        let data: Vec<WeightedExample> = (1..40).map(|i| ex(i % 13 + 1)).collect();
        let mut rng = SplitMix64::new(3);
        let batches = make_batches(&data, 40, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| data[i].target.len()).max().unwrap();
            assert!(b.len() == 1 || longest * b.len() <= 40);
        }
    }

    #[test]
    fn oversize_example_gets_own_batch() {
        let data = vec![ex(100), ex(2)];
        let batches = make_batches(&data, 10, &mut SplitMix64::new(0));
        assert_eq!(batches.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
