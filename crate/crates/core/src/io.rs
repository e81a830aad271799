//! JSON-lines files of visit sequences and partial (BLANK-bearing) sequences.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Token, Visit, VisitSequence};

/// One entry of a partial sequence: a visit or `{"blank": true}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartialEntry {
    Blank { blank: bool },
    Visit(Visit),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSequence {
    pub agent: String,
    pub visits: Vec<PartialEntry>,
}

impl PartialSequence {
    pub fn from_tokens(agent: impl Into<String>, tokens: &[Token]) -> Result<Self> {
        let visits = tokens
            .iter()
            .map(|t| match t {
                Token::Visit(v) => Ok(PartialEntry::Visit(*v)),
                Token::Blank => Ok(PartialEntry::Blank { blank: true }),
                other => Err(Error::MalformedSequence(format!("{:?} not allowed in a partial sequence", other.kind()))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { agent: agent.into(), visits })
    }

    pub fn tokens(&self) -> Result<Vec<Token>> {
        self.visits
            .iter()
            .map(|e| match e {
                PartialEntry::Visit(v) => Ok(Token::Visit(*v)),
                PartialEntry::Blank { blank: true } => Ok(Token::Blank),
                PartialEntry::Blank { blank: false } => Err(Error::MalformedSequence("entry with \"blank\": false".into())),
            })
            .collect()
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates visit sequences.
pub fn read_sequences(path: &Path) -> Result<Vec<VisitSequence>> {
    let seqs: Vec<VisitSequence> = read_lines(path)?;
    for s in &seqs {
        s.validate()?;
    }
    Ok(seqs)
}

pub fn write_sequences(path: &Path, seqs: &[VisitSequence]) -> Result<()> {
    write_lines(path, seqs)
}

pub fn read_partials(path: &Path) -> Result<Vec<PartialSequence>> {
    read_lines(path)
}

pub fn write_partials(path: &Path, seqs: &[PartialSequence]) -> Result<()> {
    write_lines(path, seqs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point;

    #[test]
    fn partial_entries_parse() {
        let line = r#"{"agent":"a","visits":[{"region":1,"arrival":0,"departure":10,"x":1.0,"y":2.0},{"blank":true}]}"#;
        let p: PartialSequence = serde_json::from_str(line).unwrap();
        let toks = p.tokens().unwrap();
        assert_eq!(toks[0], Token::Visit(Visit::new(1, 0, 10, Point::new(1.0, 2.0))));
        assert_eq!(toks[1], Token::Blank);
        assert_eq!(serde_json::to_string(&p).unwrap(), line);
    }

    #[test]
    fn sequences_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let seqs = vec![VisitSequence::new("x", vec![Visit::new(0, 0, 5, Point::new(0.0, 0.0))]).unwrap()];
        write_sequences(&path, &seqs).unwrap();
        assert_eq!(read_sequences(&path).unwrap(), seqs);
        fs::write(&path, "{\"agent\":\"x\"}\n").unwrap();
        assert!(matches!(read_sequences(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn special_tokens_rejected_in_partials() {
        assert!(PartialSequence::from_tokens("a", &[Token::Sep]).is_err());
    }
}
