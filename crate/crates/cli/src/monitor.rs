//! Trace-driven switch between cruise and AP-detection mode.

use std::io::{Read, Write};

use apsense_core::geo::{nearest_hotspot, AccidentRecord, Hotspot};
use apsense_core::Error;
use serde::{Deserialize, Serialize};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    /// Timestamp as written in the trace.
    pub timestamp: String,
    /// Seconds used for ordering.
    pub seconds: f64,
    pub position: AccidentRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cruise,
    ApDetection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEvent {
    pub timestamp: String,
    pub lat: f64,
    pub lon: f64,
    /// Mode entered at this sample.
    pub mode: Mode,
    /// Hotspot that triggered detection mode (also reported on exit).
    pub hotspot_id: Option<i64>,
    /// Distance to the nearest hotspot at this sample.
    pub distance_m: f64,
}

/// Seconds from a numeric value or an RFC 3339 date-time.
pub fn parse_timestamp(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        if v.is_finite() {
            return Ok(v);
        }
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp() as f64 + t.timestamp_subsec_nanos() as f64 * 1e-9)
        .map_err(|_| Error::InvalidInput(format!("unparseable timestamp `{s}`")))
}

fn check_order(trace: &[TracePoint]) -> Result<()> {
    for (i, w) in trace.windows(2).enumerate() {
        if w[1].seconds < w[0].seconds {
            return Err(Error::InvalidInput(format!(
                "trace is not time-ordered: row {} ({}) precedes row {} ({})",
                i + 1,
                w[0].timestamp,
                i + 2,
                w[1].timestamp
            )));
        }
    }
    Ok(())
}

/// Read a `timestamp,lat,lon` CSV; rows must be time-ordered.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TracePoint>> {
    #[derive(Deserialize)]
    struct Row {
        timestamp: String,
        lat: f64,
        lon: f64,
    }
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: Row = row?;
        let position = AccidentRecord::new(row.lat, row.lon);
        position.validate()?;
        out.push(TracePoint {
            seconds: parse_timestamp(&row.timestamp)?,
            timestamp: row.timestamp,
            position,
        });
    }
    check_order(&out)?;
    Ok(out)
}

/// Evaluate every trace sample: enter detection mode when the nearest hotspot
/// is within `radius_m` (inclusive), leave it once that distance exceeds
/// `radius_m + hysteresis_m`. Events alternate, starting with an entry.
pub fn run_monitor(
    trace: &[TracePoint],
    hotspots: &[Hotspot],
    radius_m: f64,
    hysteresis_m: f64,
) -> Result<Vec<ModeEvent>> {
    if !(radius_m > 0.0) || !(hysteresis_m >= 0.0) {
        return Err(Error::Config(format!(
            "radius must be > 0 and hysteresis >= 0 (got {radius_m}, {hysteresis_m})"
        )));
    }
    check_order(trace)?;
    let mut mode = Mode::Cruise;
    let mut active: Option<i64> = None;
    let mut events = Vec::new();
    for p in trace {
        let (id, d) = match nearest_hotspot(p.position, hotspots) {
            Some((h, d)) => (Some(h.id), d),
            None => (None, f64::INFINITY),
        };
        let next = match mode {
            Mode::Cruise if d <= radius_m => Mode::ApDetection,
            Mode::ApDetection if d > radius_m + hysteresis_m => Mode::Cruise,
            m => m,
        };
        if next != mode {
            if next == Mode::ApDetection {
                active = id;
            }
            events.push(ModeEvent {
                timestamp: p.timestamp.clone(),
                lat: p.position.lat,
                lon: p.position.lon,
                mode: next,
                hotspot_id: active,
                distance_m: d,
            });
            mode = next;
        }
    }
    Ok(events)
}

pub fn write_events_csv<W: Write>(writer: W, events: &[ModeEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps() {
        assert_eq!(parse_timestamp("12.5").unwrap(), 12.5);
        assert_eq!(parse_timestamp("1970-01-01T00:01:00Z").unwrap(), 60.0);
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn unordered_trace_rejected() {
        let csv = "timestamp,lat,lon\n2,40.7,-73.9\n1,40.7,-73.9\n";
        assert!(matches!(read_trace(csv.as_bytes()), Err(Error::InvalidInput(_))));
    }
}
