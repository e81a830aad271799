//! Raw GPS traces to region-discretized visit sequences and task splits.

mod normalize;
mod plt;
mod project;
mod split;
mod staypoint;
mod vocab;

pub use normalize::{
    duration_target, minutes_to_days, minutes_to_hours, normalize_times, travel_target, TimeScaling,
    SECONDS_PER_DAY, SECONDS_PER_HOUR,
};
pub use plt::{parse_csv, parse_plt, read_plt_dir, RawPoint};
pub use project::{project, EARTH_RADIUS_M, MAX_EXTENT_M};
pub use split::{split, split_by_agent, split_chronological, SplitMode, SplitSpec, Splits};
pub use staypoint::{detect_stay_points, repair_overlaps, StayPoint, TimedPoint};
pub use vocab::{assign_regions, discretize, RegionVocabulary, SpecialToken, VocabFile};

use crate::types::Point;

/// Stay points of one agent, before region assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStays {
    pub agent: String,
    pub stays: Vec<StayPoint>,
}

/// Raw points of all agents to stay points, using the first point seen as
/// the projection origin unless one is supplied.
pub fn stays_from_traces(
    traces: &[(String, Vec<RawPoint>)],
    origin: Option<(f64, f64)>,
    radius_m: f64,
    min_duration_s: i64,
) -> crate::Result<(Vec<AgentStays>, usize)> {
    let origin = match origin.or_else(|| traces.iter().flat_map(|(_, p)| p.first()).map(|p| (p.lat, p.lon)).next()) {
        Some(o) => o,
        None => return Ok((Vec::new(), 0)),
    };
    let mut repaired = 0;
    let mut out = Vec::with_capacity(traces.len());
    for (agent, points) in traces {
        let planar = project(points, origin)?;
        let timed: Vec<TimedPoint> =
            planar.iter().zip(points).map(|(p, r)| TimedPoint { point: Point::new(p.x, p.y), t: r.t }).collect();
        let mut stays = detect_stay_points(&timed, radius_m, min_duration_s);
        repaired += repair_overlaps(&mut stays);
        if !stays.is_empty() {
            out.push(AgentStays { agent: agent.clone(), stays });
        }
    }
    out.sort_by(|a, b| a.agent.cmp(&b.agent));
    Ok((out, repaired))
}
