//! Text formats: bakeoff corpora, vocabulary files and weighted datasets.

use std::fs;
use std::io::{self, BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use segtrans_core::augment::Origin;
use segtrans_core::data::{parse_segmented_line, DataError, SegmentedSentence, Token, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: DataError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.into(),
        source,
    }
}

fn is_stdio(path: &Path) -> bool {
    path.as_os_str() == "-"
}

/// Reads a whole text file, or standard input for `-`.
pub fn read_text(path: &Path) -> Result<String, IoError> {
    let mut s = String::new();
    if is_stdio(path) {
        io::stdin().lock().read_to_string(&mut s).map_err(io_err(path))?;
    } else {
        s = fs::read_to_string(path).map_err(io_err(path))?;
    }
    Ok(s)
}

/// Lines without their terminators; a trailing `\r` is dropped as well.
pub fn read_lines(path: &Path) -> Result<Vec<String>, IoError> {
    let text = read_text(path)?;
    Ok(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect())
}

pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<(), IoError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let write = |w: &mut dyn Write| -> io::Result<()> {
        for l in lines {
            w.write_all(l.as_ref().as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    if is_stdio(path) {
        write(&mut io::stdout().lock()).map_err(io_err(path))
    } else {
        let f = fs::File::create(path).map_err(io_err(path))?;
        write(&mut BufWriter::new(f)).map_err(io_err(path))
    }
}

/// Bakeoff format: one sentence per line, words separated by spaces.
/// Every line is kept, including empty ones, so line numbers stay aligned.
pub fn read_bakeoff(path: &Path) -> Result<Vec<SegmentedSentence>, IoError> {
    Ok(read_lines(path)?.iter().map(|l| parse_segmented_line(l)).collect())
}

pub fn write_bakeoff(path: &Path, corpus: &[SegmentedSentence]) -> Result<(), IoError> {
    write_lines(path, corpus.iter().map(|s| s.to_line()))
}

/// One token per line; the line number is the id.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), IoError> {
    write_lines(path, vocab.entries().iter().map(|t| t.to_text()))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let t = Token::parse(&line).map_err(|e| IoError::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(t);
    }
    Vocabulary::from_entries(entries).map_err(|source| IoError::Data {
        path: path.into(),
        source,
    })
}

pub fn origin_name(o: Origin) -> &'static str {
    match o {
        Origin::Gold => "gold",
        Origin::Split => "split",
        Origin::Unsupervised => "unsup",
    }
}

pub fn parse_origin(s: &str) -> Option<Origin> {
    match s {
        "gold" => Some(Origin::Gold),
        "split" => Some(Origin::Split),
        "unsup" => Some(Origin::Unsupervised),
        _ => None,
    }
}

/// A sentence of a weighted dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLine {
    pub weight: f64,
    pub origin: Origin,
    pub sentence: SegmentedSentence,
}

/// `weight<TAB>origin<TAB>bakeoff line`
pub fn write_dataset(path: &Path, lines: &[WeightedLine]) -> Result<(), IoError> {
    write_lines(
        path,
        lines
            .iter()
            .map(|l| format!("{}\t{}\t{}", l.weight, origin_name(l.origin), l.sentence.to_line())),
    )
}

/// Reads a weighted dataset. A line without tabs is a gold sentence of
/// weight 1, so plain bakeoff files are accepted too. Empty lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<WeightedLine>, IoError> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| IoError::Parse {
            path: path.into(),
            line: i + 1,
            msg: msg.into(),
        };
        let parsed = match line.splitn(3, '\t').collect::<Vec<_>>()[..] {
            [text] => WeightedLine {
                weight: 1.0,
                origin: Origin::Gold,
                sentence: parse_segmented_line(text),
            },
            [w, o, text] => WeightedLine {
                weight: w.parse().ok().filter(|w: &f64| *w > 0.0).ok_or_else(|| bad("weight must be a positive number"))?,
                origin: parse_origin(o).ok_or_else(|| bad("origin must be gold, split or unsup"))?,
                sentence: parse_segmented_line(text),
            },
            _ => return Err(bad("expected weight<TAB>origin<TAB>sentence")),
        };
        if !parsed.sentence.is_empty() {
            out.push(parsed);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use segtrans_core::data::build_vocabulary;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("segtrans-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn vocab_file_roundtrip() {
        let corpus = vec![parse_segmented_line("我 爱 北京 2024 abc")];
        let v = build_vocabulary(&corpus).unwrap();
        let p = tmp("vocab.txt");
        write_vocab(&p, &v).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), v);
    }

    #[test]
    fn dataset_roundtrip_and_plain_lines() {
        let lines = vec![
            WeightedLine {
                weight: 40.0,
                origin: Origin::Gold,
                sentence: parse_segmented_line("我 爱 北京"),
            },
            WeightedLine {
                weight: 1.0,
                origin: Origin::Unsupervised,
                sentence: parse_segmented_line("我爱 北京"),
            },
        ];
        let p = tmp("data.tsv");
        write_dataset(&p, &lines).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), lines);

        fs::write(&p, "我 爱\n\n北京\n").unwrap();
        let plain = read_dataset(&p).unwrap();
        assert_eq!(plain.len(), 2);
        assert!(plain.iter().all(|l| l.weight == 1.0 && l.origin == Origin::Gold));

        fs::write(&p, "x\tgold\t我\n").unwrap();
        assert_eq!(read_dataset(&p).unwrap_err().to_string(), format!("{}:1: weight must be a positive number", p.display()));
    }
}
