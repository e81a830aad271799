use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Point, RegionId, Token, Visit, VisitSequence};

use super::AgentStays;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    Unk,
    Blank,
    Sep,
    Ans,
    Pad,
}

/// Square-grid region vocabulary.
///
/// Region ids are `0..n_regions` in `(ix, iy)` order; `unk`, `BLANK`,
/// `SEP`, `ANS` and `PAD` follow, so the full vocabulary is
/// `0..n_regions + 5`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionVocabulary {
    cell_size: f64,
    origin: Point,
    cells: Vec<(i64, i64)>,
    index: HashMap<(i64, i64), RegionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabCell {
    pub ix: i64,
    pub iy: i64,
    pub id: RegionId,
}

/// On-disk vocabulary layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub cell_size: f64,
    pub origin: Point,
    pub cells: Vec<VocabCell>,
}

impl RegionVocabulary {
    pub fn from_cells(cell_size: f64, origin: Point, cells: impl IntoIterator<Item = (i64, i64)>) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
        }
        let sorted: BTreeSet<(i64, i64)> = cells.into_iter().collect();
        let cells: Vec<_> = sorted.into_iter().collect();
        let index = cells.iter().enumerate().map(|(i, c)| (*c, i as RegionId)).collect();
        Ok(Self { cell_size, origin, cells, index })
    }

    pub fn build<'a>(cell_size: f64, origin: Point, locations: impl IntoIterator<Item = &'a Point>) -> Result<Self> {
        let cs = cell_size;
        Self::from_cells(cs, origin, locations.into_iter().map(|p| cell_index(cs, origin, p)))
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn n_regions(&self) -> usize {
        self.cells.len()
    }

    /// Total id count including unk and the four structural tokens.
    pub fn size(&self) -> usize {
        self.cells.len() + 5
    }

    pub fn special(&self, s: SpecialToken) -> RegionId {
        let base = self.cells.len() as RegionId;
        base + match s {
            SpecialToken::Unk => 0,
            SpecialToken::Blank => 1,
            SpecialToken::Sep => 2,
            SpecialToken::Ans => 3,
            SpecialToken::Pad => 4,
        }
    }

    pub fn unk_id(&self) -> RegionId {
        self.special(SpecialToken::Unk)
    }

    pub fn is_region(&self, id: RegionId) -> bool {
        (id as usize) < self.cells.len()
    }

    pub fn cell_of(&self, p: &Point) -> (i64, i64) {
        cell_index(self.cell_size, self.origin, p)
    }

    pub fn lookup(&self, p: &Point) -> RegionId {
        self.index.get(&self.cell_of(p)).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn cell(&self, id: RegionId) -> Option<(i64, i64)> {
        self.cells.get(id as usize).copied()
    }

    /// Cell center; used as the location of generated visits.
    pub fn centroid(&self, id: RegionId) -> Result<Point> {
        let (ix, iy) = self.cell(id).ok_or(Error::Vocabulary(id))?;
        Ok(Point::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell_size,
            self.origin.y + (iy as f64 + 0.5) * self.cell_size,
        ))
    }

    /// Id embedded for a token.
    pub fn token_id(&self, token: &Token) -> RegionId {
        match token {
            Token::Visit(v) => v.region,
            Token::Blank => self.special(SpecialToken::Blank),
            Token::Sep => self.special(SpecialToken::Sep),
            Token::Ans => self.special(SpecialToken::Ans),
            Token::Pad => self.special(SpecialToken::Pad),
        }
    }

    /// Diagonal of the bounding box of all cells, in meters.
    pub fn diameter(&self) -> f64 {
        if self.cells.is_empty() {
            return self.cell_size;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for &(ix, iy) in &self.cells {
            x0 = x0.min(ix);
            x1 = x1.max(ix);
            y0 = y0.min(iy);
            y1 = y1.max(iy);
        }
        (((x1 - x0 + 1) as f64) * self.cell_size).hypot(((y1 - y0 + 1) as f64) * self.cell_size)
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            cell_size: self.cell_size,
            origin: self.origin,
            cells: self.cells.iter().enumerate().map(|(i, &(ix, iy))| VocabCell { ix, iy, id: i as RegionId }).collect(),
        }
    }

    pub fn from_file(file: &VocabFile) -> Result<Self> {
        let vocab = Self::from_cells(file.cell_size, file.origin, file.cells.iter().map(|c| (c.ix, c.iy)))?;
        if vocab.cells.len() != file.cells.len() {
            return Err(Error::Config("duplicate cells in vocabulary file".into()));
        }
        for c in &file.cells {
            if vocab.index.get(&(c.ix, c.iy)) != Some(&c.id) {
                return Err(Error::Config(format!("cell ({}, {}) has non-canonical id {}", c.ix, c.iy, c.id)));
            }
        }
        Ok(vocab)
    }
}

fn cell_index(cell_size: f64, origin: Point, p: &Point) -> (i64, i64) {
    (((p.x - origin.x) / cell_size).floor() as i64, ((p.y - origin.y) / cell_size).floor() as i64)
}

/// Builds the vocabulary from the stays of `train_agents` (all agents when
/// `None`) and assigns region ids to every agent's stays.
pub fn discretize(
    cell_size: f64,
    agents: &[AgentStays],
    train_agents: Option<&HashSet<String>>,
) -> Result<(RegionVocabulary, Vec<VisitSequence>)> {
    let train_points = agents
        .iter()
        .filter(|a| train_agents.is_none_or(|set| set.contains(&a.agent)))
        .flat_map(|a| a.stays.iter().map(|s| &s.location));
    let vocab = RegionVocabulary::build(cell_size, Point::default(), train_points)?;
    let sequences = agents
        .iter()
        .map(|a| {
            let visits = a
                .stays
                .iter()
                .map(|s| Visit::new(vocab.lookup(&s.location), s.arrival, s.departure, s.location))
                .collect();
            VisitSequence::new(a.agent.clone(), visits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, sequences))
}

/// Re-assigns region ids from visit locations.
pub fn assign_regions(vocab: &RegionVocabulary, sequences: &[VisitSequence]) -> Vec<VisitSequence> {
    sequences
        .iter()
        .map(|s| VisitSequence {
            agent: s.agent.clone(),
            visits: s.visits.iter().map(|v| Visit { region: vocab.lookup(&v.location), ..*v }).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::StayPoint;

    fn stays(agent: &str, pts: &[(f64, f64)]) -> AgentStays {
        AgentStays {
            agent: agent.into(),
            stays: pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| StayPoint {
                    location: Point::new(x, y),
                    arrival: 1000 * i as i64,
                    departure: 1000 * i as i64 + 600,
                })
                .collect(),
        }
    }

    #[test]
    fn same_cell_same_id() {
        let (vocab, seqs) = discretize(100.0, &[stays("a", &[(50.0, 50.0), (99.0, 1.0), (150.0, 50.0)])], None).unwrap();
        let ids: Vec<_> = seqs[0].visits.iter().map(|v| v.region).collect();
        assert_eq!(ids[0], ids[1]);
        assert_ne!(ids[0], ids[2]);
        assert_eq!(vocab.n_regions(), 2);
    }

    #[test]
    fn unseen_cell_is_unk() {
        let agents = [stays("train", &[(50.0, 50.0)]), stays("test", &[(5000.0, 50.0)])];
        let train: HashSet<String> = ["train".to_string()].into();
        let (vocab, seqs) = discretize(100.0, &agents, Some(&train)).unwrap();
        assert_eq!(seqs[1].visits[0].region, vocab.unk_id());
        assert!(!vocab.is_region(vocab.unk_id()));
    }

    #[test]
    fn specials_disjoint_and_contiguous() {
        let vocab = RegionVocabulary::from_cells(70.0, Point::default(), [(0, 0), (3, -2), (1, 1)]).unwrap();
        let ids: Vec<_> = [SpecialToken::Unk, SpecialToken::Blank, SpecialToken::Sep, SpecialToken::Ans, SpecialToken::Pad]
            .iter()
            .map(|s| vocab.special(*s))
            .collect();
        assert_eq!(ids, vec![3, 4, 5, 6, 7]);
        assert_eq!(vocab.size(), 8);
        for id in 0..3 {
            let c = vocab.centroid(id).unwrap();
            assert_eq!(vocab.lookup(&c), id);
        }
    }

    #[test]
    fn file_round_trip() {
        let vocab = RegionVocabulary::from_cells(1200.0, Point::new(5.0, -3.0), [(0, 0), (2, 1)]).unwrap();
        let json = serde_json::to_string(&vocab.to_file()).unwrap();
        assert!(json.contains("\"cells\":[{\"ix\":0,\"iy\":0,\"id\":0}"));
        let back = RegionVocabulary::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn discretization_idempotent() {
        let agents = [stays("a", &[(10.0, 10.0), (350.0, -20.0), (-75.0, 410.0)])];
        let (vocab, seqs) = discretize(100.0, &agents, None).unwrap();
        assert_eq!(assign_regions(&vocab, &seqs), seqs);
    }
}
