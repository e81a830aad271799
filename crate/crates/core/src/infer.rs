//! Free-running generation: next-visit prediction and BLANK infilling.
//!
//! Each generated visit is decoded in three steps: region from the
//! categorical head, travel time given that region, duration given the
//! region and the realized arrival.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SpecialToken;
use crate::model::{softmax_rows, TemporalPrediction, TrajGpt};
use crate::reframe::assemble;
use crate::tape::Mat;
use crate::types::{RegionId, Seconds, Token, Visit, VisitSequence};

const SECONDS_PER_HOUR: f64 = 3600.0;
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sample(u64),
}

impl Decode {
    fn rng(&self) -> Option<ChaCha8Rng> {
        match self {
            Decode::Greedy => None,
            Decode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextVisit {
    pub visit: Visit,
    /// Next-token distribution over the full vocabulary.
    pub region_probs: Vec<f64>,
    /// Travel time in hours.
    pub travel: TemporalPrediction,
    /// Duration in days.
    pub duration: TemporalPrediction,
    /// A temporal draw fell back to the mode because the mixture had no
    /// usable mass on non-negative values.
    pub degenerate: bool,
}

/// Picks among `candidates` by argmax (ties to the lower id) or by sampling
/// from the renormalized probabilities.
fn choose(probs: &[f64], candidates: &[usize], rng: Option<&mut ChaCha8Rng>) -> usize {
    match rng {
        None => *candidates
            .iter()
            .reduce(|best, c| if probs[*c] > probs[*best] { c } else { best })
            .expect("candidates"),
        Some(rng) => {
            let total: f64 = candidates.iter().map(|c| probs[*c]).sum();
            let mut u = rng.random::<f64>() * total;
            for c in candidates {
                u -= probs[*c];
                if u < 0.0 {
                    return *c;
                }
            }
            *candidates.last().expect("candidates")
        }
    }
}

/// Non-negative point from a temporal prediction; the flag reports a
/// degenerate mixture.
fn realize(pred: &TemporalPrediction, rng: Option<&mut ChaCha8Rng>) -> (f64, bool) {
    match (pred, rng) {
        (TemporalPrediction::Point(p), _) => (p.max(0.0), false),
        (TemporalPrediction::Mixture(g), None) => (g.clipped_mode(), false),
        (TemporalPrediction::Mixture(g), Some(rng)) => match g.sample(rng) {
            Ok(x) => (x, false),
            Err(_) => (g.clipped_mode(), true),
        },
    }
}

struct Step<'a> {
    model: &'a TrajGpt,
    tokens: Vec<Token>,
    rng: Option<ChaCha8Rng>,
}

impl Step<'_> {
    fn region_probs(&self) -> Result<Vec<f64>> {
        let mut f = self.model.eval_forward();
        let h = self.model.encode_sequence(&mut f, &self.tokens)?;
        let logits = self.model.region_logits(&mut f, &self.tokens, h);
        let last = f.tape.value(logits).row(self.tokens.len() - 1).to_owned();
        let probs = softmax_rows(&Mat::from_shape_vec((1, last.len()), last.to_vec()).expect("row"));
        Ok(probs.row(0).to_vec())
    }

    /// Travel and duration for `region` at the current end of the sequence.
    fn temporal(&mut self, region: RegionId, prev_departure: Seconds) -> Result<(Visit, TemporalPrediction, TemporalPrediction, bool)> {
        let model = self.model;
        let position = self.tokens.len() - 1;
        let mut f = model.eval_forward();
        let h = model.encode_sequence(&mut f, &self.tokens)?;
        let travel_raw = model.travel_head(&mut f, &self.tokens, h, &[(position, region)]);
        let travel = model.temporal_prediction(f.tape.value(travel_raw).row(0));
        let (hours, d1) = realize(&travel, self.rng.as_mut());
        let arrival = prev_departure + (hours * SECONDS_PER_HOUR).round() as Seconds;
        let duration_raw = model.duration_head(&mut f, &self.tokens, h, &[(position, region, arrival)]);
        let duration = model.temporal_prediction(f.tape.value(duration_raw).row(0));
        let (days, d2) = realize(&duration, self.rng.as_mut());
        let departure = arrival + (days * SECONDS_PER_DAY).round() as Seconds;
        let visit = Visit::new(region, arrival, departure, model.vocab.centroid(region)?);
        Ok((visit, travel, duration, d1 || d2))
    }
}

/// Predicts the visit following `context`.
pub fn predict_next_visit(model: &TrajGpt, context: &VisitSequence, decode: Decode) -> Result<NextVisit> {
    let last = *context.visits.last().ok_or_else(|| Error::Argument("empty context".into()))?;
    context.validate()?;
    let mut step = Step { model, tokens: context.visits.iter().map(|v| Token::Visit(*v)).collect(), rng: decode.rng() };
    let region_probs = step.region_probs()?;
    let candidates: Vec<usize> = (0..model.vocab.n_regions()).collect();
    let region = choose(&region_probs, &candidates, step.rng.as_mut()) as RegionId;
    let (visit, travel, duration, degenerate) = step.temporal(region, last.departure)?;
    Ok(NextVisit { visit, region_probs, travel, duration, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlankReport {
    /// Visits generated for this blank.
    pub generated: usize,
    /// The per-blank cap closed the span instead of a generated ANS.
    pub forced_close: bool,
    /// The span's last departure runs past the arrival of the visit after the blank.
    pub overrun: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillDiagnostics {
    pub agent: String,
    pub blanks: Vec<BlankReport>,
    /// Assembly found visits out of chronological order.
    pub chronology_violation: Option<String>,
    pub degenerate_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillResult {
    pub sequence: VisitSequence,
    /// Partial, SEP, and every generated token.
    pub tokens: Vec<Token>,
    pub diagnostics: InfillDiagnostics,
}

impl InfillResult {
    /// Number of generated tokens after SEP.
    pub fn generated_tokens(&self) -> usize {
        let sep = self.tokens.iter().position(|t| *t == Token::Sep).expect("SEP present");
        self.tokens.len() - sep - 1
    }
}

/// Fills every BLANK of `partial`, left to right. A span closes on a
/// generated ANS or after `max_per_blank` visits.
pub fn infill(model: &TrajGpt, agent: &str, partial: &[Token], decode: Decode, max_per_blank: usize) -> Result<InfillResult> {
    let mut anchors = Vec::new();
    let mut followers = Vec::new();
    for (i, t) in partial.iter().enumerate() {
        match t {
            Token::Blank => {
                let anchor = i.checked_sub(1).and_then(|j| partial[j].visit().copied());
                anchors.push(anchor.ok_or_else(|| Error::MalformedSequence(format!("BLANK at {i} does not follow a visit")))?);
                followers.push(partial.get(i + 1).and_then(|t| t.visit().copied()));
            }
            Token::Visit(v) => v.validate()?,
            other => return Err(Error::MalformedSequence(format!("{:?} in a partial sequence", other.kind()))),
        }
    }
    if anchors.is_empty() {
        return Err(Error::MalformedSequence("partial sequence has no BLANK".into()));
    }
    let cap = partial.len() + 1 + anchors.len() * (max_per_blank + 1);
    if cap > model.config.max_seq_len {
        return Err(Error::Length { len: cap, max: model.config.max_seq_len });
    }

    let ans = model.vocab.special(SpecialToken::Ans) as usize;
    let mut candidates: Vec<usize> = (0..model.vocab.n_regions()).collect();
    candidates.push(ans);
    let mut tokens = partial.to_vec();
    tokens.push(Token::Sep);
    let mut step = Step { model, tokens, rng: decode.rng() };
    let mut answers = Vec::with_capacity(anchors.len());
    let mut reports = Vec::with_capacity(anchors.len());
    let mut degenerate_draws = 0;
    for (anchor, follower) in anchors.iter().zip(&followers) {
        let mut span: Vec<Visit> = Vec::new();
        let mut forced_close = true;
        while span.len() < max_per_blank {
            let probs = step.region_probs()?;
            let choice = choose(&probs, &candidates, step.rng.as_mut());
            if choice == ans {
                forced_close = false;
                break;
            }
            let prev = span.last().unwrap_or(anchor).departure;
            let (visit, _, _, degenerate) = step.temporal(choice as RegionId, prev)?;
            degenerate_draws += usize::from(degenerate);
            step.tokens.push(Token::Visit(visit));
            span.push(visit);
        }
        step.tokens.push(Token::Ans);
        let overrun = matches!((span.last(), follower), (Some(last), Some(next)) if last.departure > next.arrival);
        reports.push(BlankReport { generated: span.len(), forced_close, overrun });
        answers.push(span);
    }
    let sequence = assemble(agent, partial, &answers)?;
    let chronology_violation = sequence.validate().err().map(|e| e.to_string());
    Ok(InfillResult {
        sequence,
        tokens: step.tokens,
        diagnostics: InfillDiagnostics { agent: agent.to_string(), blanks: reports, chronology_violation, degenerate_draws },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::ingest::RegionVocabulary;
    use crate::model::{ModelConfig, Variant};
    use crate::types::Point;

    fn model(variant: Variant, seed: u64) -> TrajGpt {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            ff_dim: 8,
            gmm_components: 2,
            dropout: 0.0,
            encoder: EncoderConfig { s2v_scales: 2, s2v_min: 10.0, s2v_max: 1000.0, t2v_dim: 2, region_emb_dim: 4 },
            ..ModelConfig::geolife()
        };
        let vocab = RegionVocabulary::from_cells(100.0, Point::default(), (0..4).map(|i| (i, 0))).unwrap();
        TrajGpt::new(config, variant, vocab, seed).unwrap()
    }

    fn visit(r: u32, a: i64, d: i64) -> Visit {
        Visit::new(r, a, d, Point::new(r as f64 * 100.0 + 50.0, 50.0))
    }

    fn context() -> VisitSequence {
        VisitSequence::new("a", vec![visit(0, 0, 3600), visit(1, 7200, 9000)]).unwrap()
    }

    /// Forces the region head to a fixed distribution through its bias.
    fn pin_region_head(m: &mut TrajGpt, favored: usize) {
        let w = m.param_id("region.out.weight").unwrap();
        let b = m.param_id("region.out.bias").unwrap();
        m.store.get_mut(w).fill(0.0);
        let v = m.vocab_size();
        *m.store.get_mut(b) = Mat::from_shape_fn((1, v), |(_, j)| if j == favored { 10.0 } else { 0.0 });
    }

    #[test]
    fn next_visit_respects_time_order() {
        for variant in Variant::ALL {
            let m = model(variant, 1);
            let out = predict_next_visit(&m, &context(), Decode::Greedy).unwrap();
            assert!(out.visit.arrival >= 9000);
            assert!(out.visit.departure >= out.visit.arrival);
            assert!(m.vocab.is_region(out.visit.region));
            assert_eq!(out, predict_next_visit(&m, &context(), Decode::Greedy).unwrap());
        }
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let m = model(Variant::Full, 2);
        let a = predict_next_visit(&m, &context(), Decode::Sample(4)).unwrap();
        let b = predict_next_visit(&m, &context(), Decode::Sample(4)).unwrap();
        assert_eq!(a, b);
        let visits: std::collections::HashSet<_> =
            (0..20).map(|s| predict_next_visit(&m, &context(), Decode::Sample(s)).unwrap().visit.arrival).collect();
        assert!(visits.len() > 1);
    }

    #[test]
    fn empty_context_rejected() {
        let m = model(Variant::Full, 0);
        let empty = VisitSequence { agent: "a".into(), visits: vec![] };
        assert!(matches!(predict_next_visit(&m, &empty, Decode::Greedy), Err(Error::Argument(_))));
    }

    #[test]
    fn ans_first_model_fills_nothing() {
        let mut m = model(Variant::Full, 3);
        let ans = m.vocab.special(SpecialToken::Ans) as usize;
        pin_region_head(&mut m, ans);
        let partial = [Token::Visit(visit(0, 0, 10)), Token::Blank, Token::Visit(visit(2, 50_000, 60_000))];
        let out = infill(&m, "a", &partial, Decode::Greedy, 5).unwrap();
        assert_eq!(out.sequence.visits, vec![visit(0, 0, 10), visit(2, 50_000, 60_000)]);
        assert_eq!(out.diagnostics.blanks[0], BlankReport { generated: 0, forced_close: false, overrun: false });
    }

    #[test]
    fn cap_forces_close() {
        let mut m = model(Variant::Full, 4);
        pin_region_head(&mut m, 1);
        let partial = [Token::Visit(visit(0, 0, 10)), Token::Blank, Token::Visit(visit(2, 900_000, 900_100)), Token::Blank, Token::Visit(visit(3, 2_000_000, 2_000_100))];
        let out = infill(&m, "a", &partial, Decode::Greedy, 3).unwrap();
        let n_ans = out.tokens.iter().filter(|t| **t == Token::Ans).count();
        assert_eq!(n_ans, 2);
        assert!(out.diagnostics.blanks.iter().all(|b| b.generated == 3 && b.forced_close));
        assert_eq!(out.generated_tokens(), 8);
        // generated visits sit between their neighbours
        assert_eq!(out.sequence.visits.len(), 9);
        assert_eq!(out.sequence.visits[0], visit(0, 0, 10));
        assert_eq!(out.sequence.visits[4], visit(2, 900_000, 900_100));
        assert!(out.sequence.visits[1..4].iter().all(|v| v.region == 1));
    }

    #[test]
    fn malformed_partials_rejected() {
        let m = model(Variant::Full, 0);
        let v = Token::Visit(visit(0, 0, 10));
        assert!(infill(&m, "a", &[v], Decode::Greedy, 3).is_err());
        assert!(infill(&m, "a", &[Token::Blank, v], Decode::Greedy, 3).is_err());
        assert!(infill(&m, "a", &[v, Token::Blank, Token::Sep], Decode::Greedy, 3).is_err());
    }
}
