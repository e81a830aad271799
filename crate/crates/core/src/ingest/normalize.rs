use crate::types::{Seconds, VisitSequence};

pub const SECONDS_PER_HOUR: f64 = 3600.0;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Offset that was subtracted from all timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TimeScaling {
    pub origin: Seconds,
}

/// Rebases all timestamps so the oldest arrival becomes zero.
pub fn normalize_times(sequences: &[VisitSequence]) -> (Vec<VisitSequence>, TimeScaling) {
    let origin = sequences.iter().flat_map(|s| s.visits.iter().map(|v| v.arrival)).min().unwrap_or(0);
    let rebased = sequences
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for v in &mut s.visits {
                v.arrival -= origin;
                v.departure -= origin;
            }
            s
        })
        .collect();
    (rebased, TimeScaling { origin })
}

/// Travel-time model target, in hours.
pub fn travel_target(seconds: Seconds) -> f64 {
    seconds as f64 / SECONDS_PER_HOUR
}

/// Duration model target, in days.
pub fn duration_target(seconds: Seconds) -> f64 {
    seconds as f64 / SECONDS_PER_DAY
}

pub fn minutes_to_hours(m: f64) -> f64 {
    m / 60.0
}

pub fn minutes_to_days(m: f64) -> f64 {
    m / 1440.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Point, Visit};

    #[test]
    fn rebase_and_scale() {
        let seqs = vec![
            VisitSequence::new("a", vec![Visit::new(0, 4_600, 8_200, Point::default())]).unwrap(),
            VisitSequence::new("b", vec![Visit::new(0, 1_000, 2_000, Point::default())]).unwrap(),
        ];
        let (out, scaling) = normalize_times(&seqs);
        assert_eq!(scaling.origin, 1_000);
        assert_eq!((out[0].visits[0].arrival, out[0].visits[0].departure), (3_600, 7_200));
        assert_eq!(duration_target(43_200), 0.5);
        assert_eq!(travel_target(1_800), 0.5);
        assert_eq!(minutes_to_hours(30.0), 0.5);
    }
}
