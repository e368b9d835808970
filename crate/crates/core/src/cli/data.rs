use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::oracle::CorpusRecord;
use crate::toylm::{Example, Token, VOCAB_SIZE};

#[derive(Deserialize)]
#[serde(untagged)]
enum RawRecord {
    Tokens {
        id: String,
        prompt_tokens: Vec<Token>,
        response_tokens: Vec<Token>,
    },
    Text {
        id: String,
        src: String,
        tgt: String,
        trg_lang: String,
    },
}

/// A parsed dataset line together with its original text.
#[derive(Clone, Debug)]
pub struct Record {
    pub example: Example,
    pub line: String,
}

/// Reads a JSONL dataset. Each line is either a text record
/// `{"id", "src", "tgt", "trg_lang"}` (prompt rendered on load) or a
/// pre-tokenized `{"id", "prompt_tokens", "response_tokens"}`. Blank lines are
/// skipped; ids must be unique.
pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(trimmed).map_err(|e| {
            Error::format(
                path,
                format!("line {lineno}: expected a text or token record ({e})"),
            )
        })?;
        let example = match raw {
            RawRecord::Tokens {
                id,
                prompt_tokens,
                response_tokens,
            } => {
                if let Some(t) = prompt_tokens
                    .iter()
                    .chain(&response_tokens)
                    .find(|&&t| t as usize >= VOCAB_SIZE)
                {
                    return Err(Error::format(
                        path,
                        format!("line {lineno}: token {t} outside the vocabulary"),
                    ));
                }
                Example::new(id, prompt_tokens, response_tokens)
            }
            RawRecord::Text {
                id,
                src,
                tgt,
                trg_lang,
            } => Example::translation(id, &src, &tgt, &trg_lang),
        };
        if !seen.insert(example.id.clone()) {
            return Err(Error::format(
                path,
                format!("line {lineno}: duplicate id `{}`", example.id),
            ));
        }
        out.push(Record {
            example,
            line: trimmed.to_string(),
        });
    }
    Ok(out)
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    Ok(load_records(path)?.into_iter().map(|r| r.example).collect())
}

pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{}", l.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes synthetic corpus records as JSONL; the extra `corrupted` field is
/// ignored by [`load_records`].
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let lines = records
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path, lines)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
