//! Domain types shared across the pipeline.
//!
//! Timestamps are integer seconds since the dataset's oldest arrival. A
//! visit also keeps the planar location (meters) it was derived from so the
//! encoder can use it.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RegionId = u32;
pub type Seconds = i64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One stay: region, arrival and departure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub region: RegionId,
    pub arrival: Seconds,
    pub departure: Seconds,
    #[serde(flatten)]
    pub location: Point,
}

impl Visit {
    pub fn new(region: RegionId, arrival: Seconds, departure: Seconds, location: Point) -> Self {
        Self { region, arrival, departure, location }
    }

    pub fn validate(&self) -> Result<()> {
        if self.departure < self.arrival {
            return Err(Error::MalformedSequence(format!(
                "departure {} before arrival {}",
                self.departure, self.arrival
            )));
        }
        if !self.location.x.is_finite() || !self.location.y.is_finite() {
            return Err(Error::MalformedSequence("non-finite location".into()));
        }
        Ok(())
    }
}

/// Gap between the previous visit's departure and this visit's arrival.
pub fn travel_time(prev: &Visit, cur: &Visit) -> Result<Seconds> {
    let dt = cur.arrival - prev.departure;
    if dt < 0 {
        return Err(Error::MalformedSequence(format!(
            "arrival {} precedes previous departure {}",
            cur.arrival, prev.departure
        )));
    }
    Ok(dt)
}

pub fn duration(v: &Visit) -> Seconds {
    v.departure - v.arrival
}

/// All visits made by one agent, chronologically ordered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSequence {
    pub agent: String,
    pub visits: Vec<Visit>,
}

impl VisitSequence {
    pub fn new(agent: impl Into<String>, visits: Vec<Visit>) -> Result<Self> {
        let seq = Self { agent: agent.into(), visits };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visits.is_empty() {
            return Err(Error::MalformedSequence(format!("agent {} has no visits", self.agent)));
        }
        for v in &self.visits {
            v.validate()?;
        }
        for w in self.visits.windows(2) {
            travel_time(&w[0], &w[1])?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Visit,
    Blank,
    Sep,
    Ans,
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Token {
    Visit(Visit),
    Blank,
    Sep,
    Ans,
    Pad,
}

impl Token {
    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Visit(_) => TokenKind::Visit,
            Token::Blank => TokenKind::Blank,
            Token::Sep => TokenKind::Sep,
            Token::Ans => TokenKind::Ans,
            Token::Pad => TokenKind::Pad,
        }
    }

    pub fn visit(&self) -> Option<&Visit> {
        match self {
            Token::Visit(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_visit(&self) -> bool {
        matches!(self, Token::Visit(_))
    }
}

/// A sequence rewritten for infilling: `partial ++ [SEP] ++ span_1 ++ [ANS] ++ ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReframedSequence {
    pub agent: String,
    pub tokens: Vec<Token>,
    pub blank_positions: Vec<usize>,
    pub sep_position: usize,
    /// Token index range of each blank's answer visits, excluding the ANS.
    pub answer_spans: Vec<Range<usize>>,
}

impl ReframedSequence {
    pub fn partial(&self) -> &[Token] {
        &self.tokens[..self.sep_position]
    }

    pub fn answers(&self) -> Vec<Vec<Visit>> {
        self.answer_spans
            .iter()
            .map(|r| self.tokens[r.clone()].iter().filter_map(|t| t.visit().copied()).collect())
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let count = |k: TokenKind| self.tokens.iter().filter(|t| t.kind() == k).count();
        let (blanks, answers, seps) = (count(TokenKind::Blank), count(TokenKind::Ans), count(TokenKind::Sep));
        if blanks != answers {
            return Err(Error::Reframe(format!("{blanks} BLANK vs {answers} ANS")));
        }
        if seps != 1 || self.tokens.get(self.sep_position) != Some(&Token::Sep) {
            return Err(Error::Reframe("expected exactly one SEP".into()));
        }
        if self.partial().contains(&Token::Ans) {
            return Err(Error::Reframe("ANS before SEP".into()));
        }
        for span in &self.answer_spans {
            if span.is_empty() || self.tokens.get(span.end) != Some(&Token::Ans) {
                return Err(Error::Reframe("answer span empty or not closed by ANS".into()));
            }
        }
        Ok(())
    }
}
