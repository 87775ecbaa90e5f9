//! Per-run manifest: what was run, with which settings, on which files.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    /// Hex SHA-256; `None` for standard streams.
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    /// Results worth keeping next to the artifacts (costs, scores).
    pub results: Vec<(String, String)>,
    pub started: f64,
    pub finished: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn artifact(role: &str, path: &Path) -> io::Result<Artifact> {
    let sha256 = if path.as_os_str() == "-" {
        None
    } else {
        Some(sha256_file(path)?)
    };
    Ok(Artifact {
        role: role.into(),
        path: path.into(),
        sha256,
    })
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            seed: None,
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: Vec::new(),
            started: now(),
            finished: 0.0,
        }
    }

    pub fn config<K: Into<String>>(&mut self, pairs: impl IntoIterator<Item = (K, String)>) {
        self.config.extend(pairs.into_iter().map(|(k, v)| (k.into(), v)));
    }

    pub fn input(&mut self, role: &str, path: &Path) -> io::Result<()> {
        self.inputs.push(artifact(role, path)?);
        Ok(())
    }

    /// Hashes an output; call after the file is written.
    pub fn output(&mut self, role: &str, path: &Path) -> io::Result<()> {
        self.outputs.push(artifact(role, path)?);
        Ok(())
    }

    pub fn result(&mut self, key: &str, value: impl ToString) {
        self.results.push((key.into(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("command={}", self.command),
            format!("version={}", env!("CARGO_PKG_VERSION")),
        ];
        if let Some(s) = self.seed {
            lines.push(format!("seed={s}"));
        }
        lines.push(format!("started={:.3}", self.started));
        lines.push(format!("finished={:.3}", self.finished));
        for (k, v) in &self.config {
            lines.push(format!("config.{k}={v}"));
        }
        for (kind, list) in [("input", &self.inputs), ("output", &self.outputs)] {
            for a in list {
                lines.push(format!("{kind}.{}={}", a.role, a.path.display()));
                if let Some(h) = &a.sha256 {
                    lines.push(format!("{kind}.{}.sha256={h}", a.role));
                }
            }
        }
        for (k, v) in &self.results {
            lines.push(format!("result.{k}={v}"));
        }
        lines.join("\n") + "\n"
    }

    /// Stamps the finish time and writes the manifest.
    pub fn write(&mut self, path: &Path) -> io::Result<()> {
        self.finished = now();
        fs::write(path, self.to_text())
    }
}

/// `--manifest` if given, else `<first file output>.manifest`, else
/// `segtrans-<command>.manifest` in the working directory.
pub fn manifest_path(explicit: Option<&Path>, command: &str, outputs: &[&Path]) -> PathBuf {
    if let Some(p) = explicit {
        return p.into();
    }
    match outputs.iter().find(|p| p.as_os_str() != "-") {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest");
            s.into()
        }
        None => PathBuf::from(format!("segtrans-{command}.manifest")),
    }
}
