//! Parallel corpora: loading, validation and the 13a tokenizer.
//!
//! A corpus directory holds up to three splits (`train`, `dev`, `test`), each
//! stored either as a pair of line-aligned files (`<split>.src`,
//! `<split>.tgt`) or as a single two-column `<split>.tsv`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line count mismatch {source_lines} vs {target_lines} ({source_path} vs {target_path})")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
        source_path: PathBuf,
        target_path: PathBuf,
    },
    #[error("{path}: invalid UTF-8 at line {line}")]
    InvalidUtf8 { path: PathBuf, line: usize },
    #[error("{path}: empty segment at line {line}")]
    EmptySegment { path: PathBuf, line: usize },
    #[error("{path}: expected 2 tab-separated columns at line {line}, found {found}")]
    BadTsvRow { path: PathBuf, line: usize, found: usize },
    #[error("no {split} split found in {dir} (expected {split}.src/{split}.tgt or {split}.tsv)")]
    MissingSplit { split: &'static str, dir: PathBuf },
}

/// One source/target example. `id` is the 0-based line number in its split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: usize,
    pub source: String,
    pub target: String,
}

/// Train, dev and test splits. Immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    /// Loads every split present in `dir`. Missing splits load as empty;
    /// methods that need a split check for it themselves.
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        let load = |split: Split| match load_split(dir, split) {
            Ok(pairs) => Ok(pairs),
            Err(CorpusError::MissingSplit { .. }) => Ok(Vec::new()),
            Err(e) => Err(e),
        };
        Ok(Corpus {
            train: load(Split::Train)?,
            dev: load(Split::Dev)?,
            test: load(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[SentencePair] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Writes every non-empty split as `<split>.src` / `<split>.tgt`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for split in [Split::Train, Split::Dev, Split::Test] {
            let pairs = self.split(split);
            if pairs.is_empty() {
                continue;
            }
            write_parallel(
                pairs,
                &dir.join(format!("{}.src", split.name())),
                &dir.join(format!("{}.tgt", split.name())),
            )?;
        }
        Ok(())
    }
}

/// Loads one split from `dir`, preferring the `.src`/`.tgt` pair over `.tsv`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SentencePair>, CorpusError> {
    let src = dir.join(format!("{}.src", split.name()));
    let tgt = dir.join(format!("{}.tgt", split.name()));
    let tsv = dir.join(format!("{}.tsv", split.name()));
    if src.exists() && tgt.exists() {
        load_parallel(&src, &tgt)
    } else if tsv.exists() {
        load_tsv(&tsv)
    } else {
        Err(CorpusError::MissingSplit {
            split: split.name(),
            dir: dir.to_path_buf(),
        })
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut body: &[u8] = &bytes;
    if let Some(stripped) = body.strip_suffix(b"\n") {
        body = stripped;
    }
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            String::from_utf8(line.to_vec()).map_err(|_| CorpusError::InvalidUtf8 {
                path: path.to_path_buf(),
                line: i + 1,
            })
        })
        .collect()
}

fn check_segment(text: &str, path: &Path, line: usize) -> Result<(), CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptySegment {
            path: path.to_path_buf(),
            line,
        });
    }
    Ok(())
}

/// Zips two line-aligned files into sentence pairs. Pair `i` is line `i` of
/// each file.
pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<Vec<SentencePair>, CorpusError> {
    let sources = read_lines(source_path)?;
    let targets = read_lines(target_path)?;
    if sources.len() != targets.len() {
        return Err(CorpusError::LineCountMismatch {
            source_lines: sources.len(),
            target_lines: targets.len(),
            source_path: source_path.to_path_buf(),
            target_path: target_path.to_path_buf(),
        });
    }
    sources
        .into_iter()
        .zip(targets)
        .enumerate()
        .map(|(id, (source, target))| {
            check_segment(&source, source_path, id + 1)?;
            check_segment(&target, target_path, id + 1)?;
            Ok(SentencePair { id, source, target })
        })
        .collect()
}

/// Loads `source\ttarget` rows, with the same validation as [`load_parallel`].
pub fn load_tsv(path: &Path) -> Result<Vec<SentencePair>, CorpusError> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(id, row)| {
            let cols: Vec<&str> = row.split('\t').collect();
            if cols.len() != 2 {
                return Err(CorpusError::BadTsvRow {
                    path: path.to_path_buf(),
                    line: id + 1,
                    found: cols.len(),
                });
            }
            check_segment(cols[0], path, id + 1)?;
            check_segment(cols[1], path, id + 1)?;
            Ok(SentencePair {
                id,
                source: cols[0].to_string(),
                target: cols[1].to_string(),
            })
        })
        .collect()
}

/// Writes pairs back out, one segment per line with a trailing newline.
pub fn write_parallel(pairs: &[SentencePair], source_path: &Path, target_path: &Path) -> Result<(), CorpusError> {
    let write = |path: &Path, side: fn(&SentencePair) -> &str| -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        for pair in pairs {
            writeln!(out, "{}", side(pair)).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    };
    write(source_path, |p| &p.source)?;
    write(target_path, |p| &p.target)
}

static PUNCT_SYMBOLS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])").unwrap());
static PERIOD_COMMA_AFTER_NONDIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([^0-9])([\.,])").unwrap());
static PERIOD_COMMA_BEFORE_NONDIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([\.,])([^0-9])").unwrap());
static DASH_AFTER_DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([0-9])(-)").unwrap());

/// Whitespace as understood by Python's `str.split()`, which the 13a
/// reference implementation uses for its final split. This is Unicode
/// `White_Space` plus the ASCII information separators U+001C..U+001F.
pub(crate) fn is_split_space(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

/// The mteval-v13a tokenization used by standard BLEU scoring.
///
/// Symbols are split off everywhere; `.` and `,` are split unless they sit
/// between digits; `-` is split after a digit.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let line = format!(" {line} ");
    let line = PUNCT_SYMBOLS.replace_all(&line, " $1 ");
    let line = PERIOD_COMMA_AFTER_NONDIGIT.replace_all(&line, "$1 $2 ");
    let line = PERIOD_COMMA_BEFORE_NONDIGIT.replace_all(&line, " $1 $2");
    let line = DASH_AFTER_DIGIT.replace_all(&line, "$1 $2 ");
    line.split(is_split_space)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Word tokenizer used for unigram overlap. Same rules as [`tokenize_13a`].
pub fn tokenize_words(text: &str) -> Vec<String> {
    tokenize_13a(text)
}
