//! Seeded synthetic mobility: fixed home/work/lunch/recreation places per
//! agent, a weekday routine and optional weekend outings. Commute legs draw
//! their travel time from a two-mode mixture.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RegionVocabulary;
use crate::types::{Point, Visit, VisitSequence};

const DAY: i64 = 86_400;
const MINUTE: f64 = 60.0;

/// `(mean, std)` in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMode {
    pub mean: f64,
    pub std: f64,
}

impl TimeMode {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_agents: usize,
    pub n_days: usize,
    /// Cells per side of the square grid.
    pub grid_extent: usize,
    pub cell_size: f64,
    pub seed: u64,
    /// Probability that a commute leg draws the slow mode.
    pub bimodal_fraction: f64,
    pub fast_mode: TimeMode,
    pub slow_mode: TimeMode,
    /// Travel between work, lunch and recreation spots.
    pub local_travel: TimeMode,
    pub schedule_noise_std: f64,
    /// Probability of a lunch outing on a weekday.
    pub lunch_prob: f64,
    /// Probability of a recreation outing on a weekend day.
    pub weekend_outing_prob: f64,
    /// Probability of stopping at the recreation spot on the way home from
    /// work. The stop leaves work on the usual schedule, so the context does
    /// not reveal whether it happens.
    pub evening_outing_prob: f64,
    pub evening_outing_minutes: f64,
    pub work_start_hour: f64,
    pub work_end_hour: f64,
    pub lunch_hour: f64,
    pub lunch_minutes: f64,
    pub outing_hour: f64,
    pub outing_minutes: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_agents: 20,
            n_days: 28,
            grid_extent: 16,
            cell_size: 1200.0,
            seed: 0,
            bimodal_fraction: 0.5,
            fast_mode: TimeMode::new(10.0, 2.0),
            slow_mode: TimeMode::new(40.0, 5.0),
            local_travel: TimeMode::new(8.0, 1.5),
            schedule_noise_std: 10.0,
            lunch_prob: 1.0,
            weekend_outing_prob: 0.5,
            evening_outing_prob: 0.0,
            evening_outing_minutes: 60.0,
            work_start_hour: 8.0,
            work_end_hour: 17.0,
            lunch_hour: 12.0,
            lunch_minutes: 60.0,
            outing_hour: 13.0,
            outing_minutes: 120.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.bimodal_fraction, self.lunch_prob, self.weekend_outing_prob, self.evening_outing_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("synth probabilities must lie in [0, 1]".into()));
        }
        let stds = [self.fast_mode.std, self.slow_mode.std, self.local_travel.std, self.schedule_noise_std];
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("synth standard deviations must be positive".into()));
        }
        if self.n_agents == 0 || self.n_days == 0 || self.grid_extent == 0 || !(self.cell_size > 0.0) {
            return Err(Error::Config("synth sizes must be positive".into()));
        }
        Ok(())
    }

    /// Every grid cell, whether visited or not.
    pub fn vocabulary(&self) -> Result<RegionVocabulary> {
        let n = self.grid_extent as i64;
        RegionVocabulary::from_cells(self.cell_size, Point::default(), (0..n).flat_map(|ix| (0..n).map(move |iy| (ix, iy))))
    }
}

/// Whether a visit came from a commute leg (home to work or back).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LegKind {
    Commute,
    Local,
}

struct Places {
    home: u32,
    work: u32,
    lunch: u32,
    outing: u32,
}

struct AgentWalk<'a> {
    cfg: &'a SynthConfig,
    vocab: &'a RegionVocabulary,
    rng: ChaCha8Rng,
    visits: Vec<Visit>,
    legs: Vec<LegKind>,
}

impl AgentWalk<'_> {
    fn normal(&mut self, m: TimeMode) -> f64 {
        Normal::new(m.mean, m.std).expect("validated std").sample(&mut self.rng)
    }

    fn noise(&mut self) -> f64 {
        self.normal(TimeMode::new(0.0, self.cfg.schedule_noise_std))
    }

    /// Travel seconds, at least one minute.
    fn travel(&mut self, kind: LegKind) -> i64 {
        let mode = match kind {
            LegKind::Commute if self.rng.random::<f64>() < self.cfg.bimodal_fraction => self.cfg.slow_mode,
            LegKind::Commute => self.cfg.fast_mode,
            LegKind::Local => self.cfg.local_travel,
        };
        loop {
            let m = self.normal(mode);
            if m >= 1.0 {
                return (m * MINUTE).round() as i64;
            }
        }
    }

    fn clock(day: usize, hour: f64, noise_min: f64) -> i64 {
        day as i64 * DAY + (hour * 3600.0 + noise_min * MINUTE).round() as i64
    }

    /// Leaves the current place at `leave` (no earlier than one minute after
    /// arriving) and moves to `region`.
    fn move_to(&mut self, region: u32, leave: i64, kind: LegKind) {
        let last = self.visits.last_mut().expect("walk starts at home");
        last.departure = leave.max(last.arrival + 60);
        let arrival = last.departure + self.travel(kind);
        let location = self.vocab.centroid(region).expect("place drawn from grid");
        self.visits.push(Visit::new(region, arrival, arrival, location));
        self.legs.push(kind);
    }
}

/// Generates one sequence per agent, plus the kind of travel leg that led to
/// each visit (the first visit's entry is `Local`).
pub fn generate_with_legs(cfg: &SynthConfig) -> Result<Vec<(VisitSequence, Vec<LegKind>)>> {
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let mut cells: Vec<u32> = (0..vocab.n_regions() as u32).collect();
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let place = |i: usize| cells[i % cells.len()];

    let mut out = Vec::with_capacity(cfg.n_agents);
    for a in 0..cfg.n_agents {
        let places = Places { home: place(4 * a), work: place(4 * a + 1), lunch: place(4 * a + 2), outing: place(4 * a + 3) };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(a as u64 + 1);
        let home_loc = vocab.centroid(places.home)?;
        let mut walk = AgentWalk {
            cfg,
            vocab: &vocab,
            rng,
            visits: vec![Visit::new(places.home, 0, 0, home_loc)],
            legs: vec![LegKind::Local],
        };
        for day in 0..cfg.n_days {
            let weekend = day % 7 >= 5;
            if weekend {
                if walk.rng.random::<f64>() < cfg.weekend_outing_prob {
                    let n = walk.noise();
                    walk.move_to(places.outing, AgentWalk::clock(day, cfg.outing_hour, n), LegKind::Local);
                    let stay = walk.normal(TimeMode::new(cfg.outing_minutes, cfg.schedule_noise_std));
                    let leave = walk.visits.last().unwrap().arrival + (stay * MINUTE).round() as i64;
                    walk.move_to(places.home, leave, LegKind::Local);
                }
                continue;
            }
            let n = walk.noise();
            walk.move_to(places.work, AgentWalk::clock(day, cfg.work_start_hour, n), LegKind::Commute);
            if walk.rng.random::<f64>() < cfg.lunch_prob {
                let n = walk.noise();
                walk.move_to(places.lunch, AgentWalk::clock(day, cfg.lunch_hour, n), LegKind::Local);
                let stay = walk.normal(TimeMode::new(cfg.lunch_minutes, cfg.schedule_noise_std));
                let leave = walk.visits.last().unwrap().arrival + (stay * MINUTE).round() as i64;
                walk.move_to(places.work, leave, LegKind::Local);
            }
            let n = walk.noise();
            let mut leave = AgentWalk::clock(day, cfg.work_end_hour, n);
            if cfg.evening_outing_prob > 0.0 && walk.rng.random::<f64>() < cfg.evening_outing_prob {
                walk.move_to(places.outing, leave, LegKind::Local);
                let stay = walk.normal(TimeMode::new(cfg.evening_outing_minutes, cfg.schedule_noise_std));
                leave = walk.visits.last().unwrap().arrival + (stay * MINUTE).round() as i64;
            }
            walk.move_to(places.home, leave, LegKind::Commute);
        }
        let last = walk.visits.last_mut().unwrap();
        last.departure = (cfg.n_days as i64 * DAY + (cfg.work_start_hour * 3600.0) as i64).max(last.arrival);
        let seq = VisitSequence::new(format!("agent{a:03}"), walk.visits)?;
        out.push((seq, walk.legs));
    }
    Ok(out)
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<VisitSequence>> {
    Ok(generate_with_legs(cfg)?.into_iter().map(|(s, _)| s).collect())
}
