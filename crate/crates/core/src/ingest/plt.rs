use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};

use crate::error::{Error, Result};

const PLT_HEADER_LINES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds since the Unix epoch, UTC.
    pub t: i64,
}

impl RawPoint {
    fn checked(lat: f64, lon: f64, t: i64, line: usize) -> Result<Self> {
        if !(lat.abs() <= 90.0) || !(lon.abs() <= 180.0) {
            return Err(Error::Parse { line, msg: format!("coordinate ({lat}, {lon}) out of range") });
        }
        Ok(Self { lat, lon, t })
    }
}

fn field<T: std::str::FromStr>(s: &str, line: usize, name: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad {name} {s:?}") })
}

/// Parses one GeoLife PLT file: six header lines, then
/// `lat,lon,0,alt,days,date,time` rows. Line numbers in errors are 1-based.
pub fn parse_plt(text: &str) -> Result<Vec<RawPoint>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate().skip(PLT_HEADER_LINES) {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Parse { line, msg: format!("expected 7 fields, found {}", cols.len()) });
        }
        let lat: f64 = field(cols[0], line, "latitude")?;
        let lon: f64 = field(cols[1], line, "longitude")?;
        let date = NaiveDate::parse_from_str(cols[5].trim(), "%Y-%m-%d")
            .map_err(|e| Error::Parse { line, msg: format!("bad date: {e}") })?;
        let time = NaiveTime::parse_from_str(cols[6].trim(), "%H:%M:%S")
            .map_err(|e| Error::Parse { line, msg: format!("bad time: {e}") })?;
        let t = NaiveDateTime::new(date, time).and_utc().timestamp();
        out.push(RawPoint::checked(lat, lon, t, line)?);
    }
    Ok(out)
}

/// Parses `agent,lat,lon,t` rows (t in Unix seconds). A first line that
/// does not parse numerically is treated as a header.
pub fn parse_csv(text: &str) -> Result<Vec<(String, Vec<RawPoint>)>> {
    let mut agents: Vec<(String, Vec<RawPoint>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(Error::Parse { line, msg: format!("expected 4 fields, found {}", cols.len()) });
        }
        if idx == 0 && cols[1].parse::<f64>().is_err() {
            continue;
        }
        let lat: f64 = field(cols[1], line, "latitude")?;
        let lon: f64 = field(cols[2], line, "longitude")?;
        let t: f64 = field(cols[3], line, "timestamp")?;
        if !t.is_finite() {
            return Err(Error::Parse { line, msg: "non-finite timestamp".into() });
        }
        let point = RawPoint::checked(lat, lon, t.round() as i64, line)?;
        match agents.iter_mut().find(|(a, _)| a == cols[0]) {
            Some((_, pts)) => pts.push(point),
            None => agents.push((cols[0].to_string(), vec![point])),
        }
    }
    for (_, pts) in &mut agents {
        pts.sort_by_key(|p| p.t);
    }
    agents.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(agents)
}

/// Reads a GeoLife `Data/<agent>/Trajectory/*.plt` tree. Points of each
/// agent are merged across files and sorted by time.
pub fn read_plt_dir(root: &Path) -> Result<Vec<(String, Vec<RawPoint>)>> {
    let data = if root.join("Data").is_dir() { root.join("Data") } else { root.to_path_buf() };
    let mut agents = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(&data)?.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    dirs.sort_by_key(|e| e.file_name());
    for entry in dirs {
        let traj = entry.path().join("Trajectory");
        if !traj.is_dir() {
            continue;
        }
        let mut files: Vec<_> = fs::read_dir(&traj)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("plt")))
            .collect();
        files.sort();
        let mut points = Vec::new();
        for f in files {
            let text = fs::read_to_string(&f)?;
            points.extend(parse_plt(&text).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse { line, msg: format!("{}: {msg}", f.display()) },
                other => other,
            })?);
        }
        points.sort_by_key(|p| p.t);
        agents.push((entry.file_name().to_string_lossy().into_owned(), points));
    }
    Ok(agents)
}
