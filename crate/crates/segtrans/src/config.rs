//! Flat `key=value` configuration shared by config files, CLI flags,
//! checkpoints and run manifests.
//!
//! Keys are the field names of [`ModelConfig`], [`TrainConfig`] and
//! [`DecodeConfig`]. Optional fields accept `none`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use segtrans_core::decode::DecodeConfig;
use segtrans_core::model::{Cell, ModelConfig};
use segtrans_core::train::TrainConfig;

pub const CONFIG_ENV: &str = "SEGTRANS_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: expected key=value")]
    Syntax { path: PathBuf, line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value.trim() == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

/// Sets one model field. Returns `Ok(false)` if `key` is not a model key.
pub fn set_model(c: &mut ModelConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "embed_dim" => c.embed_dim = parse(key, value)?,
        "hidden_dim" => c.hidden_dim = parse(key, value)?,
        "enc_depth" => c.enc_depth = parse(key, value)?,
        "dec_depth" => c.dec_depth = parse(key, value)?,
        "dropout_state" => c.dropout_state = parse(key, value)?,
        "dropout_state_encoder" => c.dropout_state_encoder = parse_opt(key, value)?,
        "dropout_state_decoder" => c.dropout_state_decoder = parse_opt(key, value)?,
        "dropout_src" => c.dropout_src = parse(key, value)?,
        "label_smoothing" => c.label_smoothing = parse(key, value)?,
        "tied_embeddings" => c.tied_embeddings = parse(key, value)?,
        "layer_norm" => c.layer_norm = parse(key, value)?,
        "cell" => {
            c.cell = match value.trim() {
                "gru" => Cell::Gru,
                _ => {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                    })
                }
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_pairs(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("embed_dim", c.embed_dim.to_string()),
        ("hidden_dim", c.hidden_dim.to_string()),
        ("enc_depth", c.enc_depth.to_string()),
        ("dec_depth", c.dec_depth.to_string()),
        ("dropout_state", c.dropout_state.to_string()),
        ("dropout_state_encoder", show_opt(&c.dropout_state_encoder)),
        ("dropout_state_decoder", show_opt(&c.dropout_state_decoder)),
        ("dropout_src", c.dropout_src.to_string()),
        ("label_smoothing", c.label_smoothing.to_string()),
        ("tied_embeddings", c.tied_embeddings.to_string()),
        ("layer_norm", c.layer_norm.to_string()),
        ("cell", match c.cell {
            Cell::Gru => "gru".into(),
        }),
    ]
}

pub fn set_train(c: &mut TrainConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "learning_rate" => c.learning_rate = parse(key, value)?,
        "beta1" => c.beta1 = parse(key, value)?,
        "beta2" => c.beta2 = parse(key, value)?,
        "epsilon" => c.epsilon = parse(key, value)?,
        "batch_size_tokens" => c.batch_size_tokens = parse(key, value)?,
        "patience" => c.patience = parse(key, value)?,
        "k_delim" => c.k_delim = parse(key, value)?,
        "max_epochs" => c.max_epochs = parse(key, value)?,
        "seed" => c.seed = parse(key, value)?,
        "eval_every" => c.eval_every = parse_opt(key, value)?,
        "clip_norm" => c.clip_norm = parse_opt(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn train_pairs(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("learning_rate", c.learning_rate.to_string()),
        ("beta1", c.beta1.to_string()),
        ("beta2", c.beta2.to_string()),
        ("epsilon", c.epsilon.to_string()),
        ("batch_size_tokens", c.batch_size_tokens.to_string()),
        ("patience", c.patience.to_string()),
        ("k_delim", c.k_delim.to_string()),
        ("max_epochs", c.max_epochs.to_string()),
        ("seed", c.seed.to_string()),
        ("eval_every", show_opt(&c.eval_every)),
        ("clip_norm", show_opt(&c.clip_norm)),
    ]
}

pub fn set_decode(c: &mut DecodeConfig, key: &str, value: &str) -> Result<bool, ConfigError> {
    match key {
        "beam_size" => c.beam_size = parse(key, value)?,
        "constrained" => c.constrained = parse(key, value)?,
        "max_len_factor" => c.max_len_factor = parse(key, value)?,
        "length_normalization" => c.length_normalization = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn decode_pairs(c: &DecodeConfig) -> Vec<(&'static str, String)> {
    vec![
        ("beam_size", c.beam_size.to_string()),
        ("constrained", c.constrained.to_string()),
        ("max_len_factor", c.max_len_factor.to_string()),
        ("length_normalization", c.length_normalization.to_string()),
    ]
}

/// Every tunable setting of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim();
        if set_model(&mut self.model, key, value)?
            || set_train(&mut self.train, key, value)?
            || set_decode(&mut self.decode, key, value)?
        {
            Ok(())
        } else {
            Err(ConfigError::UnknownKey(key.into()))
        }
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.into(),
                line: i + 1,
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        self.apply_text(&text, path)
    }

    /// Defaults, then the explicit file or else `$SEGTRANS_CONFIG`.
    pub fn load(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        match explicit {
            Some(p) => c.apply_file(p)?,
            None => {
                if let Some(p) = std::env::var_os(CONFIG_ENV).filter(|p| !p.is_empty()) {
                    c.apply_file(Path::new(&p))?;
                }
            }
        }
        Ok(c)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = model_pairs(&self.model);
        out.extend(train_pairs(&self.train));
        out.extend(decode_pairs(&self.decode));
        out
    }

    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
