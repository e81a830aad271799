//! Infilling reframing: drop interior visits, mark each dropped span with a
//! BLANK, and append the spans after a SEP, each closed by ANS.

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{ReframedSequence, Token, Visit, VisitSequence};

/// Draws an independent Bernoulli(`mask_prob`) drop for every interior visit.
pub fn reframe<R: Rng + ?Sized>(seq: &VisitSequence, mask_prob: f64, rng: &mut R) -> Result<ReframedSequence> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Argument(format!("mask probability {mask_prob} outside [0, 1]")));
    }
    let n = seq.visits.len();
    if n < 3 {
        return Err(Error::Reframe(format!("need at least 3 visits, got {n}")));
    }
    let mut mask = vec![false; n];
    for m in mask.iter_mut().take(n - 1).skip(1) {
        *m = rng.random::<f64>() < mask_prob;
    }
    reframe_with_mask(seq, &mask)
}

/// Reframes with an explicit drop mask; the first and last entries must be false.
pub fn reframe_with_mask(seq: &VisitSequence, dropped: &[bool]) -> Result<ReframedSequence> {
    let n = seq.visits.len();
    if n < 3 {
        return Err(Error::Reframe(format!("need at least 3 visits, got {n}")));
    }
    if dropped.len() != n {
        return Err(Error::Reframe(format!("mask length {} for {n} visits", dropped.len())));
    }
    if dropped[0] || dropped[n - 1] {
        return Err(Error::Reframe("first and last visits are never dropped".into()));
    }

    let mut tokens = Vec::with_capacity(n + 2);
    let mut blank_positions = Vec::new();
    let mut spans: Vec<Vec<Visit>> = Vec::new();
    for (i, v) in seq.visits.iter().enumerate() {
        if dropped[i] {
            if i == 0 || !dropped[i - 1] {
                blank_positions.push(tokens.len());
                tokens.push(Token::Blank);
                spans.push(Vec::new());
            }
            spans.last_mut().expect("span opened").push(*v);
        } else {
            tokens.push(Token::Visit(*v));
        }
    }
    let sep_position = tokens.len();
    tokens.push(Token::Sep);
    let mut answer_spans = Vec::with_capacity(spans.len());
    for span in spans {
        let start = tokens.len();
        tokens.extend(span.into_iter().map(Token::Visit));
        answer_spans.push(start..tokens.len());
        tokens.push(Token::Ans);
    }
    Ok(ReframedSequence { agent: seq.agent.clone(), tokens, blank_positions, sep_position, answer_spans })
}

/// Replaces the k-th BLANK of `partial` by the k-th answer list.
pub fn reconstruct(agent: &str, partial: &[Token], answers: &[Vec<Visit>]) -> Result<VisitSequence> {
    let seq = assemble(agent, partial, answers)?;
    seq.validate().map_err(|e| Error::Consistency(e.to_string()))?;
    Ok(seq)
}

/// Like [`reconstruct`] but skips the chronology check, so callers can
/// report a violation and still keep the assembled visits.
pub fn assemble(agent: &str, partial: &[Token], answers: &[Vec<Visit>]) -> Result<VisitSequence> {
    let blanks = partial.iter().filter(|t| **t == Token::Blank).count();
    if blanks != answers.len() {
        return Err(Error::Arity { expected: blanks, got: answers.len() });
    }
    let mut visits = Vec::new();
    let mut next_answer = answers.iter();
    for token in partial {
        match token {
            Token::Visit(v) => visits.push(*v),
            Token::Blank => visits.extend(next_answer.next().expect("counted above").iter().copied()),
            other => {
                return Err(Error::Consistency(format!("{:?} token inside a partial sequence", other.kind())));
            }
        }
    }
    Ok(VisitSequence { agent: agent.to_string(), visits })
}
