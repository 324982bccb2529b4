//! Accident hotspot identification.
//!
//! Records are clustered with DBSCAN using Euclidean distance in raw degree
//! space, the K-distance curve gives a suggested epsilon, and proximity
//! queries against hotspot centroids use haversine metres.

use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NOISE: i64 = -1;
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const DEFAULT_RADIUS_M: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccidentRecord {
    pub lat: f64,
    pub lon: f64,
}

impl AccidentRecord {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinate ({}, {})",
                self.lat, self.lon
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!(
                "coordinate out of range ({}, {})",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbscanParams {
    /// Neighbourhood radius in degrees.
    pub epsilon: f64,
    /// Minimum neighbourhood size (the point itself included) for a core point.
    pub min_points: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            epsilon: 0.0003,
            min_points: 50,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.min_points == 0 {
            return Err(Error::invalid("min_points must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabeling {
    pub labels: Vec<i64>,
}

impl ClusterLabeling {
    pub fn cluster_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != NOISE)
            .max()
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }
}

/// Uniform grid over (lat, lon) with cells of side `epsilon`.
struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn build(records: &[AccidentRecord], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            cells.entry(Self::key(r, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(r: &AccidentRecord, cell: f64) -> (i64, i64) {
        ((r.lat / cell).floor() as i64, (r.lon / cell).floor() as i64)
    }

    fn neighbours(&self, records: &[AccidentRecord], i: usize, eps2: f64, out: &mut Vec<usize>) {
        out.clear();
        let p = records[i];
        let (ky, kx) = Self::key(&p, self.cell);
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(bucket) = self.cells.get(&(ky + dy, kx + dx)) {
                    for &j in bucket {
                        let q = records[j];
                        let d2 = (p.lat - q.lat).powi(2) + (p.lon - q.lon).powi(2);
                        if d2 <= eps2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
    }
}

/// DBSCAN over raw (lat, lon) degrees.
///
/// Clusters are numbered in order of their lowest-index core point. A border
/// point reachable from several clusters joins the one created first.
pub fn dbscan(records: &[AccidentRecord], params: &DbscanParams) -> Result<ClusterLabeling> {
    params.validate()?;
    for r in records {
        if !r.lat.is_finite() || !r.lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinate ({}, {})",
                r.lat, r.lon
            )));
        }
    }
    const UNVISITED: i64 = -2;
    let n = records.len();
    let mut labels = vec![UNVISITED; n];
    let eps2 = params.epsilon * params.epsilon;
    let index = GridIndex::build(records, params.epsilon);
    let mut nbrs = Vec::new();
    let mut next_label = 0i64;
    let mut queue = VecDeque::new();

    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        index.neighbours(records, i, eps2, &mut nbrs);
        if nbrs.len() < params.min_points {
            // May still be claimed as a border point by a later cluster.
            labels[i] = NOISE;
            continue;
        }
        let label = next_label;
        next_label += 1;
        labels[i] = label;
        queue.clear();
        queue.extend(nbrs.iter().copied().filter(|&j| j != i));
        while let Some(j) = queue.pop_front() {
            match labels[j] {
                NOISE => {
                    labels[j] = label;
                }
                UNVISITED => {
                    labels[j] = label;
                }
                _ => continue,
            }
            index.neighbours(records, j, eps2, &mut nbrs);
            if nbrs.len() >= params.min_points {
                for &k in &nbrs {
                    if labels[k] == UNVISITED || labels[k] == NOISE {
                        queue.push_back(k);
                    }
                }
            }
        }
    }
    Ok(ClusterLabeling { labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDistanceCurve {
    pub k: usize,
    /// Ascending k-th nearest-neighbour distances, one per record.
    pub distances: Vec<f64>,
}

impl KDistanceCurve {
    /// Index of maximum discrete second difference, `None` when the curve has
    /// no positive curvature (constant or linear).
    pub fn knee_index(&self) -> Option<usize> {
        let d = &self.distances;
        if d.len() < 3 {
            return None;
        }
        let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut best: Option<(usize, f64)> = None;
        for i in 1..d.len() - 1 {
            let second = d[i + 1] - 2.0 * d[i] + d[i - 1];
            if best.is_none_or(|(_, b)| second > b) {
                best = Some((i, second));
            }
        }
        match best {
            Some((i, s)) if s > 1e-12 * scale => Some(i),
            _ => None,
        }
    }

    /// Suggested epsilon at the knee. Never applied automatically.
    pub fn suggested_epsilon(&self) -> Option<f64> {
        self.knee_index().map(|i| self.distances[i])
    }
}

#[derive(PartialEq, PartialOrd)]
struct MaxF(f64);
impl Eq for MaxF {}
impl Ord for MaxF {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Sorted k-th nearest-neighbour distance of every record (the record itself
/// excluded, coincident records counted at distance zero).
pub fn k_distance_curve(records: &[AccidentRecord], k: usize) -> Result<KDistanceCurve> {
    let n = records.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k must satisfy 1 <= k < N (k = {k}, N = {n})"
        )));
    }
    for r in records {
        if !r.lat.is_finite() || !r.lon.is_finite() {
            return Err(Error::invalid("non-finite coordinate"));
        }
    }
    // Sweep outwards along latitude order, pruning on |dlat|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].lat.total_cmp(&records[b].lat).then(a.cmp(&b)));
    let mut distances = Vec::with_capacity(n);
    let mut heap: BinaryHeap<MaxF> = BinaryHeap::with_capacity(k + 1);
    for pos in 0..n {
        heap.clear();
        let p = records[order[pos]];
        let consider = |q: &AccidentRecord, heap: &mut BinaryHeap<MaxF>| {
            let d = ((p.lat - q.lat).powi(2) + (p.lon - q.lon).powi(2)).sqrt();
            if heap.len() < k {
                heap.push(MaxF(d));
            } else if d < heap.peek().unwrap().0 {
                heap.pop();
                heap.push(MaxF(d));
            }
        };
        let (mut lo, mut hi) = (pos, pos + 1);
        loop {
            let bound = if heap.len() == k {
                heap.peek().unwrap().0
            } else {
                f64::INFINITY
            };
            let down = (lo > 0).then(|| p.lat - records[order[lo - 1]].lat);
            let up = (hi < n).then(|| records[order[hi]].lat - p.lat);
            match (down, up) {
                (None, None) => break,
                (Some(a), b) if b.is_none_or(|b| a <= b) => {
                    if a > bound {
                        break;
                    }
                    lo -= 1;
                    consider(&records[order[lo]], &mut heap);
                }
                (_, Some(b)) => {
                    if b > bound {
                        break;
                    }
                    consider(&records[order[hi]], &mut heap);
                    hi += 1;
                }
                _ => unreachable!(),
            }
        }
        distances.push(heap.peek().unwrap().0);
    }
    distances.sort_by(f64::total_cmp);
    Ok(KDistanceCurve { k, distances })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub id: i64,
    pub lat: f64,
    pub lon: f64,
    pub member_count: usize,
}

impl Hotspot {
    pub fn centroid(&self) -> AccidentRecord {
        AccidentRecord::new(self.lat, self.lon)
    }
}

pub fn hotspots_from_labeling(
    records: &[AccidentRecord],
    labeling: &ClusterLabeling,
) -> Result<Vec<Hotspot>> {
    if records.len() != labeling.labels.len() {
        return Err(Error::invalid(format!(
            "labeling covers {} records, expected {}",
            labeling.labels.len(),
            records.len()
        )));
    }
    // Mean as anchor + mean offset, so coincident members reproduce the anchor exactly.
    let mut sums: std::collections::BTreeMap<i64, (AccidentRecord, f64, f64, usize)> = Default::default();
    for (r, &l) in records.iter().zip(&labeling.labels) {
        if l == NOISE {
            continue;
        }
        let e = sums.entry(l).or_insert((*r, 0.0, 0.0, 0));
        e.1 += r.lat - e.0.lat;
        e.2 += r.lon - e.0.lon;
        e.3 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(id, (anchor, dla, dlo, n))| Hotspot {
            id,
            lat: anchor.lat + dla / n as f64,
            lon: anchor.lon + dlo / n as f64,
            member_count: n,
        })
        .collect())
}

/// Great-circle distance in metres.
pub fn haversine_m(a: AccidentRecord, b: AccidentRecord) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Hotspots whose centroid lies within `radius_m` (inclusive) of `position`.
pub fn within_range(position: AccidentRecord, hotspots: &[Hotspot], radius_m: f64) -> Vec<Hotspot> {
    hotspots
        .iter()
        .filter(|h| haversine_m(position, h.centroid()) <= radius_m)
        .copied()
        .collect()
}

/// Nearest hotspot and its distance in metres.
pub fn nearest_hotspot(position: AccidentRecord, hotspots: &[Hotspot]) -> Option<(Hotspot, f64)> {
    hotspots
        .iter()
        .map(|h| (*h, haversine_m(position, h.centroid())))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)))
}

/// Read `latitude,longitude` columns (case-insensitive; extra columns are
/// ignored). Rows with an empty coordinate are skipped; the number skipped is
/// returned alongside the records.
pub fn read_accident_csv<R: Read>(reader: R) -> Result<(Vec<AccidentRecord>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("missing column `{name}`")))
    };
    let (lat_i, lon_i) = (find("latitude")?, find("longitude")?);
    let mut out = Vec::new();
    let mut skipped = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (la, lo) = (
            rec.get(lat_i).unwrap_or("").trim(),
            rec.get(lon_i).unwrap_or("").trim(),
        );
        if la.is_empty() || lo.is_empty() {
            skipped += 1;
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("row {}: bad coordinate `{s}`", row + 2)))
        };
        let r = AccidentRecord::new(parse(la)?, parse(lo)?);
        r.validate()?;
        out.push(r);
    }
    Ok((out, skipped))
}

pub fn write_hotspots_csv<W: Write>(writer: W, hotspots: &[Hotspot]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "lat", "lon", "count"])?;
    for h in hotspots {
        w.write_record([
            h.id.to_string(),
            format!("{:.8}", h.lat),
            format!("{:.8}", h.lon),
            h.member_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hotspots_csv<R: Read>(reader: R) -> Result<Vec<Hotspot>> {
    #[derive(Deserialize)]
    struct Row {
        id: i64,
        lat: f64,
        lon: f64,
        count: usize,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        out.push(Hotspot {
            id: row.id,
            lat: row.lat,
            lon: row.lon,
            member_count: row.count,
        });
    }
    Ok(out)
}

pub fn hotspots_geojson(hotspots: &[Hotspot]) -> serde_json::Value {
    let features: Vec<_> = hotspots
        .iter()
        .map(|h| {
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [h.lon, h.lat] },
                "properties": { "id": h.id, "count": h.member_count },
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}
