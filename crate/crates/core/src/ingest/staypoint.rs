use crate::types::Point;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub point: Point,
    pub t: i64,
}

/// A detected stay: centroid of its points, first and last timestamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayPoint {
    pub location: Point,
    pub arrival: i64,
    pub departure: i64,
}

/// Anchor-distance stay-point scan. From anchor `i`, extend `j` while point
/// `j` stays within `radius` of the anchor; a window spanning at least
/// `min_duration` seconds becomes a stay and scanning resumes after it,
/// otherwise the anchor advances by one.
pub fn detect_stay_points(points: &[TimedPoint], radius: f64, min_duration: i64) -> Vec<StayPoint> {
    let mut out = Vec::new();
    let n = points.len();
    let mut i = 0;
    while i < n {
        let anchor = points[i].point;
        let mut j = i;
        while j + 1 < n && points[j + 1].point.distance(&anchor) <= radius {
            j += 1;
        }
        if points[j].t - points[i].t >= min_duration {
            let count = (j - i + 1) as f64;
            let (sx, sy) = points[i..=j].iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.point.x, sy + p.point.y));
            out.push(StayPoint {
                location: Point::new(sx / count, sy / count),
                arrival: points[i].t,
                departure: points[j].t,
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Truncates a departure that runs past the next arrival. Returns how many
/// stays were repaired.
pub fn repair_overlaps(stays: &mut [StayPoint]) -> usize {
    let mut repaired = 0;
    for k in 1..stays.len() {
        let next_arrival = stays[k].arrival;
        let prev = &mut stays[k - 1];
        if prev.departure > next_arrival {
            prev.departure = next_arrival.max(prev.arrival);
            repaired += 1;
        }
    }
    repaired
}
