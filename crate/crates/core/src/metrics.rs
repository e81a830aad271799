//! Teacher-forced evaluation metrics: top-k region accuracy and the share of
//! temporal predictions within ±t minutes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::model::{TemporalPrediction, TrajGpt, Variant};
use crate::types::Token;

pub const ACC_KS: [usize; 4] = [1, 5, 10, 20];
pub const TOLERANCES: [f64; 3] = [5.0, 10.0, 20.0];
const MINUTES_PER_HOUR: f64 = 60.0;
const MINUTES_PER_DAY: f64 = 1440.0;

/// Zero-based rank of `truth` when ids are ordered by descending probability,
/// ties by ascending id.
pub fn rank_of(probs: &[f64], truth: usize) -> usize {
    let p = probs[truth];
    probs.iter().enumerate().filter(|&(j, &q)| q > p || (q == p && j < truth)).count()
}

pub fn acc_at_k(probs: &[Vec<f64>], truths: &[usize], k: usize) -> Result<f64> {
    if probs.len() != truths.len() {
        return Err(Error::Argument(format!("{} prediction rows for {} truths", probs.len(), truths.len())));
    }
    let mut hits = 0;
    for (row, &t) in probs.iter().zip(truths) {
        if k > row.len() {
            return Err(Error::Argument(format!("k = {k} exceeds {} classes", row.len())));
        }
        if t >= row.len() {
            return Err(Error::Argument(format!("truth {t} outside {} classes", row.len())));
        }
        hits += usize::from(rank_of(row, t) < k);
    }
    Ok(if truths.is_empty() { 0.0 } else { hits as f64 / truths.len() as f64 })
}

/// A temporal prediction in minutes-aware form.
#[derive(Debug, Clone, PartialEq)]
pub enum TimePrediction {
    /// Point estimate in minutes.
    Scalar(f64),
    /// Mixture over a scaled unit, with the number of minutes per unit.
    Distribution { mixture: GaussianMixture, minutes_per_unit: f64 },
}

/// Hit indicator (scalar) or probability mass (distribution) of `truth ± t` minutes.
pub fn within(pred: &TimePrediction, truth: f64, t: f64) -> Result<f64> {
    Ok(match pred {
        TimePrediction::Scalar(p) => f64::from(u8::from((p.max(0.0) - truth).abs() <= t)),
        TimePrediction::Distribution { mixture, minutes_per_unit } => {
            mixture.interval_prob_clipped((truth - t) / minutes_per_unit, (truth + t) / minutes_per_unit)?.prob
        }
    })
}

pub fn p_within(preds: &[TimePrediction], truths: &[f64], t: f64) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Argument(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(truths) {
        sum += within(p, *g, t)?;
    }
    Ok(if preds.is_empty() { 0.0 } else { sum / preds.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub acc_at_10: f64,
    pub acc_at_20: f64,
    pub arrival_p5: f64,
    pub arrival_p10: f64,
    pub arrival_p20: f64,
    pub departure_p5: f64,
    pub departure_p10: f64,
    pub departure_p20: f64,
    pub region_count: usize,
    pub arrival_count: usize,
    pub departure_count: usize,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 10] = [
        "acc@1",
        "acc@5",
        "acc@10",
        "acc@20",
        "arrival_p5",
        "arrival_p10",
        "arrival_p20",
        "departure_p5",
        "departure_p10",
        "departure_p20",
    ];

    /// `(metric, value, count)` rows in column order.
    pub fn rows(&self) -> Vec<(&'static str, f64, usize)> {
        let values = [
            self.acc_at_1,
            self.acc_at_5,
            self.acc_at_10,
            self.acc_at_20,
            self.arrival_p5,
            self.arrival_p10,
            self.arrival_p20,
            self.departure_p5,
            self.departure_p10,
            self.departure_p20,
        ];
        let counts = [[self.region_count; 4].as_slice(), &[self.arrival_count; 3], &[self.departure_count; 3]].concat();
        Self::COLUMNS.iter().zip(values).zip(counts).map(|((n, v), c)| (*n, v, c)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,count\n");
        for (name, value, count) in self.rows() {
            out.push_str(&format!("{name},{value},{count}\n"));
        }
        out
    }
}

/// Which predicted visits are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every visit target.
    AllVisits,
    /// Only visits after SEP; falls back to all visits in sequences without SEP.
    Answers,
}

#[derive(Debug, Default)]
struct Tally {
    hits: [usize; 4],
    regions: usize,
    arrival: [f64; 3],
    arrivals: usize,
    departure: [f64; 3],
    departures: usize,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        for i in 0..4 {
            self.hits[i] += other.hits[i];
        }
        for i in 0..3 {
            self.arrival[i] += other.arrival[i];
            self.departure[i] += other.departure[i];
        }
        self.regions += other.regions;
        self.arrivals += other.arrivals;
        self.departures += other.departures;
        self
    }
}

fn time_prediction(model: &TrajGpt, raw: ndarray::ArrayView1<f64>, minutes_per_unit: f64) -> TimePrediction {
    match model.temporal_prediction(raw) {
        TemporalPrediction::Point(p) => TimePrediction::Scalar(p * minutes_per_unit),
        TemporalPrediction::Mixture(mixture) => TimePrediction::Distribution { mixture, minutes_per_unit },
    }
}

fn tally(model: &TrajGpt, tokens: &[Token], scope: Scope) -> Result<Tally> {
    let out = model.teacher_outputs(tokens)?;
    let has_sep = tokens.contains(&Token::Sep);
    let n_regions = model.vocab.n_regions();
    let mut t = Tally::default();
    for (row, target) in out.targets.temporal.iter().enumerate() {
        if scope == Scope::Answers && has_sep && !target.in_answer {
            continue;
        }
        if model.vocab.is_region(target.region) {
            // ranked among regions only; specials are never a visit's answer
            let probs = out.region_probs.row(target.position);
            let rank = rank_of(&probs.as_slice().expect("row-major")[..n_regions], target.region as usize);
            for (i, k) in ACC_KS.iter().enumerate() {
                t.hits[i] += usize::from(rank < *k);
            }
            t.regions += 1;
        }
        if let Some(hours) = target.travel_hours {
            let pred = time_prediction(model, out.travel.row(row), MINUTES_PER_HOUR);
            for (i, tol) in TOLERANCES.iter().enumerate() {
                t.arrival[i] += within(&pred, hours * MINUTES_PER_HOUR, *tol)?;
            }
            t.arrivals += 1;
        }
        let pred = time_prediction(model, out.duration.row(row), MINUTES_PER_DAY);
        for (i, tol) in TOLERANCES.iter().enumerate() {
            t.departure[i] += within(&pred, target.duration_days * MINUTES_PER_DAY, *tol)?;
        }
        t.departures += 1;
    }
    Ok(t)
}

/// Teacher-forced metrics over `instances`. Accuracy at k ≥ the number of
/// regions is 1 by definition. Regression models are scored in scalar mode,
/// mixture models in distribution mode.
pub fn evaluate(model: &TrajGpt, instances: &[Vec<Token>], scope: Scope) -> Result<MetricsReport> {
    let parts: Vec<Tally> = instances.par_iter().map(|toks| tally(model, toks, scope)).collect::<Result<_>>()?;
    let t = parts.into_iter().fold(Tally::default(), Tally::merge);
    let frac = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    let acc = |i: usize| if ACC_KS[i] >= model.vocab.n_regions() && t.regions > 0 { 1.0 } else { frac(t.hits[i] as f64, t.regions) };
    Ok(MetricsReport {
        acc_at_1: acc(0),
        acc_at_5: acc(1),
        acc_at_10: acc(2),
        acc_at_20: acc(3),
        arrival_p5: frac(t.arrival[0], t.arrivals),
        arrival_p10: frac(t.arrival[1], t.arrivals),
        arrival_p20: frac(t.arrival[2], t.arrivals),
        departure_p5: frac(t.departure[0], t.departures),
        departure_p10: frac(t.departure[1], t.departures),
        departure_p20: frac(t.departure[2], t.departures),
        region_count: t.regions,
        arrival_count: t.arrivals,
        departure_count: t.departures,
    })
}

/// Interval scoring mode a variant is evaluated with.
pub fn interval_mode(variant: Variant) -> &'static str {
    match variant {
        Variant::Regression => "scalar",
        _ => "distribution",
    }
}
