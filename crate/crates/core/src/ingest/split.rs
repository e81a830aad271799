use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::VisitSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ByAgent,
    Chronological,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub ratios: [f64; 3],
    pub window: usize,
    pub mask_prob: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { mode: SplitMode::ByAgent, ratios: [0.8, 0.1, 0.1], window: 128, mask_prob: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| *r < 0.0) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must be non-negative and sum to 1", self.ratios)));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window {} must be at least 2", self.window)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask probability {} outside [0, 1]", self.mask_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<VisitSequence>,
    pub valid: Vec<VisitSequence>,
    pub test: Vec<VisitSequence>,
}

fn sizes(n: usize, ratios: &[f64; 3]) -> Result<(usize, usize, usize)> {
    let valid = (n as f64 * ratios[1] + 1e-9).floor() as usize;
    let test = (n as f64 * ratios[2] + 1e-9).floor() as usize;
    let train = n - valid - test;
    if train == 0 || (ratios[1] > 0.0 && valid == 0) || (ratios[2] > 0.0 && test == 0) {
        return Err(Error::Config(format!("{n} items cannot fill a {ratios:?} split")));
    }
    Ok((train, valid, test))
}

pub fn split(sequences: &[VisitSequence], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    match spec.mode {
        SplitMode::ByAgent => split_by_agent(sequences, &spec.ratios, seed),
        SplitMode::Chronological => split_chronological(sequences, spec.window, &spec.ratios),
    }
}

/// Seeded shuffle of agents, then contiguous train/valid/test blocks.
pub fn split_by_agent(sequences: &[VisitSequence], ratios: &[f64; 3], seed: u64) -> Result<Splits> {
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|&a, &b| sequences[a].agent.cmp(&sequences[b].agent));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, valid, _) = sizes(order.len(), ratios)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| sequences[i].clone()).collect();
    Ok(Splits {
        train: pick(&order[..train]),
        valid: pick(&order[train..train + valid]),
        test: pick(&order[train + valid..]),
    })
}

/// Stride-1 windows of `window` visits, ordered by the arrival of their last
/// visit (ties by agent, then offset) and cut into train/valid/test.
pub fn split_chronological(sequences: &[VisitSequence], window: usize, ratios: &[f64; 3]) -> Result<Splits> {
    if window < 2 {
        return Err(Error::Config(format!("window {window} must be at least 2")));
    }
    let mut windows: Vec<(i64, &str, usize, VisitSequence)> = Vec::new();
    for seq in sequences {
        if seq.visits.len() < window {
            continue;
        }
        for offset in 0..=seq.visits.len() - window {
            let visits = seq.visits[offset..offset + window].to_vec();
            let end = visits[window - 1].arrival;
            windows.push((end, &seq.agent, offset, VisitSequence { agent: seq.agent.clone(), visits }));
        }
    }
    windows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    let (train, valid, _) = sizes(windows.len(), ratios)?;
    let mut it = windows.into_iter().map(|w| w.3);
    Ok(Splits {
        train: it.by_ref().take(train).collect(),
        valid: it.by_ref().take(valid).collect(),
        test: it.collect(),
    })
}
