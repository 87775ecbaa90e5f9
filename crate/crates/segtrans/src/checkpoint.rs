//! Checkpoint files.
//!
//! Layout: magic `SGT1`, format version (u32 LE), metadata length (u64 LE),
//! UTF-8 `key=value` metadata lines, then every tensor as raw f64 LE in the
//! order the metadata lists them, followed by the Adam moments (all `m`
//! buffers, then all `v` buffers) when `moments.t` is present.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use segtrans_core::compute::{ParamStore, Tensor};
use segtrans_core::data::{Token, Vocabulary};
use segtrans_core::model::ModelConfig;
use segtrans_core::train::{AdamMoments, Checkpoint, ModelKind, TrainingMeta, CHECKPOINT_VERSION};

use crate::config::{model_pairs, set_model};

pub const MAGIC: &[u8; 4] = b"SGT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::NotACheckpoint => "checkpoint.magic",
            CheckpointError::Version { .. } => "checkpoint.version",
            CheckpointError::Truncated => "checkpoint.truncated",
            CheckpointError::Corrupt(_) => "checkpoint.corrupt",
            CheckpointError::Io { .. } => "io",
        }
    }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// Vocabulary entries may be any character, so line breaks and backslashes
/// are escaped.
fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, CheckpointError> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(corrupt("bad escape in metadata")),
        }
    }
    Ok(out)
}

fn metadata(c: &Checkpoint) -> String {
    let mut lines = vec![format!("kind={}", c.kind)];
    for (k, v) in model_pairs(&c.model_config) {
        lines.push(format!("model.{k}={v}"));
    }
    for t in c.vocab.entries() {
        lines.push(format!("vocab={}", escape(&t.to_text())));
    }
    // f64 Display is the shortest string that parses back to the same bits
    lines.push(format!("meta.epoch={}", c.meta.epoch));
    lines.push(format!("meta.step={}", c.meta.step));
    lines.push(format!("meta.best_valid_cost={}", c.meta.best_valid_cost));
    lines.push(format!("meta.seed={}", c.meta.seed));
    if let Some(m) = &c.moments {
        lines.push(format!("moments.t={}", m.t));
    }
    for (name, t) in c.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        lines.push(format!("tensor={}:{}", escape(name), dims.join(",")));
    }
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let meta = metadata(c);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&c.version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for t in c.params.tensors() {
        put(t.data());
    }
    if let Some(m) = &c.moments {
        m.m.iter().for_each(|b| put(b));
        m.v.iter().for_each(|b| put(b));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CheckpointError> {
    v.parse().map_err(|_| corrupt(format!("bad value for {key}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::NotACheckpoint);
    }
    let mut r = Reader { bytes, at: 4 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let meta_len = usize::try_from(meta_len).map_err(|_| CheckpointError::Truncated)?;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;

    let mut kind = None;
    let mut model_config = ModelConfig::default();
    let mut vocab = Vec::new();
    let (mut epoch, mut step, mut best, mut seed) = (0, 0, f64::NAN, 0);
    let mut moments_t = None;
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    for line in meta.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt("metadata line without '='"))?;
        match k {
            "kind" => kind = Some(ModelKind::parse(v).ok_or_else(|| corrupt("unknown model kind"))?),
            "vocab" => vocab.push(Token::parse(&unescape(v)?).map_err(|e| corrupt(e.to_string()))?),
            "meta.epoch" => epoch = num(k, v)?,
            "meta.step" => step = num(k, v)?,
            "meta.best_valid_cost" => best = num(k, v)?,
            "meta.seed" => seed = num(k, v)?,
            "moments.t" => moments_t = Some(num(k, v)?),
            "tensor" => {
                let (name, dims) = v.rsplit_once(':').ok_or_else(|| corrupt("tensor entry without shape"))?;
                let shape = dims
                    .split(',')
                    .map(|d| num::<usize>("tensor shape", d))
                    .collect::<Result<Vec<_>, _>>()?;
                tensors.push((unescape(name)?, shape));
            }
            _ => match k.strip_prefix("model.") {
                Some(field) => {
                    let known = set_model(&mut model_config, field, v).map_err(|e| corrupt(e.to_string()))?;
                    if !known {
                        return Err(corrupt(format!("unknown key {k}")));
                    }
                }
                None => return Err(corrupt(format!("unknown key {k}"))),
            },
        }
    }
    let kind = kind.ok_or_else(|| corrupt("missing kind"))?;
    let vocab = Vocabulary::from_entries(vocab).map_err(|e| corrupt(e.to_string()))?;

    let mut params = ParamStore::new();
    for (name, shape) in tensors {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
        let data = r.f64s(n)?;
        params.add(name, Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?);
    }
    let moments = match moments_t {
        None => None,
        Some(t) => {
            let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
            let m = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>, _>>()?;
            let v = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>, _>>()?;
            Some(AdamMoments { m, v, t })
        }
    };
    if r.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint {
        version,
        kind,
        model_config,
        vocab,
        params,
        moments,
        meta: TrainingMeta {
            epoch,
            step,
            best_valid_cost: best,
            seed,
        },
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(c)).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use segtrans_core::data::{build_vocabulary, parse_segmented_line};
    use segtrans_core::model::{SegModel, Trainable};

    fn sample(moments: bool) -> Checkpoint {
        let vocab = build_vocabulary(&[parse_segmented_line("我 爱 北京 ab 12")]).unwrap();
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 4,
            dropout_state_encoder: Some(0.125),
            ..ModelConfig::default()
        };
        let m = SegModel::new(cfg, vocab.len(), 7).unwrap();
        let mut c = Checkpoint::from_segmenter(&m, &vocab, None, 7, false);
        c.meta.best_valid_cost = 0.1 + 0.2;
        if moments {
            let mut mo = AdamMoments::zeros(m.params());
            mo.m[0][0] = -1e-300;
            mo.v[1][2] = 3.0;
            mo.t = 12;
            c.moments = Some(mo);
        }
        c
    }

    #[test]
    fn roundtrip_is_exact() {
        for moments in [false, true] {
            let c = sample(moments);
            let back = from_bytes(&to_bytes(&c)).unwrap();
            assert_eq!(back, c);
            let bits = |c: &Checkpoint| -> Vec<u64> {
                c.params.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
            };
            assert_eq!(bits(&back), bits(&c));
        }
    }

    #[test]
    fn damaged_files_fail_distinctly() {
        let bytes = to_bytes(&sample(true));
        assert!(matches!(from_bytes(b"PK\x03\x04rest"), Err(CheckpointError::NotACheckpoint)));
        assert!(matches!(from_bytes(b"SG"), Err(CheckpointError::NotACheckpoint)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(CheckpointError::Version { found: 2, .. })));
        for cut in [6, 20, bytes.len() / 2, bytes.len() - 1] {
            let e = from_bytes(&bytes[..cut]).unwrap_err();
            assert_eq!(e.to_string(), "truncated payload", "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn escapes_survive() {
        for s in ["a", "\\", "\n", "x\\ny", "\r\\"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
        }
    }
}
