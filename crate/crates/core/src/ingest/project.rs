use crate::error::{Error, Result};
use crate::types::Point;

use super::RawPoint;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Points farther than this from the origin are rejected.
pub const MAX_EXTENT_M: f64 = 500_000.0;

/// Local equirectangular projection around `origin = (lat, lon)` degrees:
/// `x = R cos(lat0) dlon`, `y = R dlat`, in meters.
pub fn project(points: &[RawPoint], origin: (f64, f64)) -> Result<Vec<Point>> {
    let (lat0, lon0) = origin;
    let cos0 = lat0.to_radians().cos();
    points
        .iter()
        .map(|p| {
            let x = EARTH_RADIUS_M * cos0 * (p.lon - lon0).to_radians();
            let y = EARTH_RADIUS_M * (p.lat - lat0).to_radians();
            let d = x.hypot(y);
            if d > MAX_EXTENT_M {
                return Err(Error::OutOfExtent { lat: p.lat, lon: p.lon, distance_km: d / 1000.0 });
            }
            Ok(Point::new(x, y))
        })
        .collect()
}
