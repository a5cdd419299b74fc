//! Road network graph, planar geometry and grid indexing.
//!
//! Geometry is planar: coordinates are projected with an equirectangular
//! projection around the city's mean latitude. Segment "positions" are the
//! projected midpoints of their start/end chords.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub type SegmentId = usize;

/// Planar point or vector in meters.
pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub start: LatLon,
    pub end: LatLon,
    /// Meters, strictly positive.
    pub length: f64,
    pub road_type: usize,
    pub in_degree: usize,
    pub out_degree: usize,
    /// Lane count label (1..=4 when present). Never used as a model input.
    pub lanes: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn contains(&self, p: LatLon) -> bool {
        p.lat >= self.lat_min && p.lat <= self.lat_max && p.lon >= self.lon_min && p.lon <= self.lon_max
    }
}

/// Directed segment graph. An edge `a -> b` means `b` is directly reachable from `a`.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    out_neighbors: Vec<Vec<SegmentId>>,
    in_neighbors: Vec<Vec<SegmentId>>,
    bbox: BBox,
    ref_lat: f64,
}

impl RoadNetwork {
    /// Builds the graph, recomputing degrees from `edges`. Neighbor lists are sorted
    /// ascending and deduplicated.
    pub fn new(mut segments: Vec<RoadSegment>, edges: &[(SegmentId, SegmentId)]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::input("road network has no segments"));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.id != i {
                return Err(Error::input(format!(
                    "segment ids must be dense and ordered: row {i} has id {}",
                    s.id
                )));
            }
            if !(s.length > 0.0) || !s.length.is_finite() {
                return Err(Error::input(format!("segment {i} has non-positive length {}", s.length)));
            }
            if let Some(l) = s.lanes {
                if !(1..=4).contains(&l) {
                    // Out-of-range labels are dropped here; the lane task only uses 1..=4.
                    warn!("segment {i}: lane label {l} outside 1..=4 ignored");
                }
            }
            for p in [s.start, s.end] {
                if p.lat.abs() > 90.0 || p.lon.abs() > 180.0 {
                    return Err(Error::input(format!("segment {i} has out-of-range coordinates")));
                }
            }
        }
        for s in &mut segments {
            if matches!(s.lanes, Some(l) if !(1..=4).contains(&l)) {
                s.lanes = None;
            }
        }
        let n = segments.len();
        let mut out_neighbors = vec![Vec::new(); n];
        let mut in_neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::input(format!("edge ({a}, {b}) references an unknown segment")));
            }
            if a == b {
                return Err(Error::input(format!("self-loop on segment {a}")));
            }
            out_neighbors[a].push(b);
            in_neighbors[b].push(a);
        }
        for l in out_neighbors.iter_mut().chain(in_neighbors.iter_mut()) {
            l.sort_unstable();
            l.dedup();
        }
        for (i, s) in segments.iter_mut().enumerate() {
            s.in_degree = in_neighbors[i].len();
            s.out_degree = out_neighbors[i].len();
        }
        let mut bbox = BBox {
            lat_min: f64::INFINITY,
            lon_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
            lon_max: f64::NEG_INFINITY,
        };
        let mut lat_sum = 0.0;
        for s in &segments {
            for p in [s.start, s.end] {
                bbox.lat_min = bbox.lat_min.min(p.lat);
                bbox.lat_max = bbox.lat_max.max(p.lat);
                bbox.lon_min = bbox.lon_min.min(p.lon);
                bbox.lon_max = bbox.lon_max.max(p.lon);
                lat_sum += p.lat;
            }
        }
        let ref_lat = lat_sum / (2 * n) as f64;
        Ok(Self {
            segments,
            out_neighbors,
            in_neighbors,
            bbox,
            ref_lat,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &RoadSegment {
        &self.segments[id]
    }

    pub fn out_neighbors(&self, id: SegmentId) -> &[SegmentId] {
        &self.out_neighbors[id]
    }

    pub fn in_neighbors(&self, id: SegmentId) -> &[SegmentId] {
        &self.in_neighbors[id]
    }

    /// Union of in- and out-neighbors, ascending.
    pub fn adjacent(&self, id: SegmentId) -> Vec<SegmentId> {
        let mut v: Vec<SegmentId> = self.out_neighbors[id]
            .iter()
            .chain(&self.in_neighbors[id])
            .copied()
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn has_edge(&self, a: SegmentId, b: SegmentId) -> bool {
        self.out_neighbors
            .get(a)
            .is_some_and(|l| l.binary_search(&b).is_ok())
    }

    pub fn edges(&self) -> impl Iterator<Item = (SegmentId, SegmentId)> + '_ {
        self.out_neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, l)| l.iter().map(move |&b| (a, b)))
    }

    pub fn num_edges(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    /// Reference latitude of the projection (mean endpoint latitude).
    pub fn ref_lat(&self) -> f64 {
        self.ref_lat
    }

    pub fn num_road_types(&self) -> usize {
        self.segments.iter().map(|s| s.road_type + 1).max().unwrap_or(1)
    }

    pub fn project(&self, p: LatLon) -> Vec2 {
        project_unchecked(p.lat, p.lon, self.ref_lat)
    }

    /// Projected midpoint of the segment chord.
    pub fn midpoint(&self, id: SegmentId) -> Vec2 {
        let s = &self.segments[id];
        let a = self.project(s.start);
        let b = self.project(s.end);
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
    }

    pub fn segment_direction(&self, id: SegmentId) -> Result<Vec2> {
        segment_direction(&self.segments[id], self.ref_lat)
    }

    /// Grid index covering the network bounding box with cells of `cell_size` meters.
    pub fn grid(&self, cell_size: f64) -> Result<GridIndex> {
        GridIndex::new(self.bbox, self.ref_lat, cell_size)
    }

    /// Checks a trajectory against the graph.
    pub fn validate(&self, t: &Trajectory) -> Result<()> {
        if t.len() < 2 {
            return Err(Error::Trajectory(format!("needs at least 2 points, got {}", t.len())));
        }
        for (i, &(seg, _)) in t.points().iter().enumerate() {
            if seg >= self.len() {
                return Err(Error::Trajectory(format!("point {i}: unknown segment {seg}")));
            }
        }
        for (i, w) in t.points().windows(2).enumerate() {
            if w[1].1 < w[0].1 {
                return Err(Error::Trajectory(format!("point {}: timestamp decreases", i + 1)));
            }
            if !self.has_edge(w[0].0, w[1].0) {
                return Err(Error::Trajectory(format!(
                    "point {}: no edge {} -> {}",
                    i + 1,
                    w[0].0,
                    w[1].0
                )));
            }
        }
        Ok(())
    }

    /// Total length of a segment sequence.
    pub fn path_length(&self, path: &[SegmentId]) -> f64 {
        path.iter().map(|&s| self.segments[s].length).sum()
    }

    pub fn is_connected_path(&self, path: &[SegmentId]) -> bool {
        path.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }
}

/// Equirectangular projection to meters around `ref_lat`.
pub fn project(lat: f64, lon: f64, ref_lat: f64) -> Result<Vec2> {
    if !(lat.abs() <= 90.0) || !(lon.abs() <= 180.0) || !(ref_lat.abs() <= 90.0) {
        return Err(Error::input(format!("coordinates out of range: ({lat}, {lon})")));
    }
    Ok(project_unchecked(lat, lon, ref_lat))
}

#[inline]
fn project_unchecked(lat: f64, lon: f64, ref_lat: f64) -> Vec2 {
    [
        EARTH_RADIUS_M * lon.to_radians() * ref_lat.to_radians().cos(),
        EARTH_RADIUS_M * lat.to_radians(),
    ]
}

/// Unit direction of the projected chord `start -> end`.
pub fn segment_direction(seg: &RoadSegment, ref_lat: f64) -> Result<Vec2> {
    let a = project(seg.start.lat, seg.start.lon, ref_lat)?;
    let b = project(seg.end.lat, seg.end.lon, ref_lat)?;
    let d = [b[0] - a[0], b[1] - a[1]];
    let n = d[0].hypot(d[1]);
    if n == 0.0 {
        return Err(Error::DegenerateSegment(seg.id));
    }
    Ok([d[0] / n, d[1] / n])
}

/// Unsigned angle in `[0, pi]` between two nonzero vectors.
pub fn angle_between(u: Vec2, v: Vec2) -> Result<f64> {
    let nu = u[0].hypot(u[1]);
    let nv = v[0].hypot(v[1]);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    Ok(cross.abs().atan2(dot))
}

/// Distance from `p` to the closed segment `a`–`b` in the plane.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (p[0] - c[0]).hypot(p[1] - c[1])
}

/// Square cells of side `cell_size` anchored at the projected bbox minimum corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridIndex {
    pub cell_size: f64,
    pub x0: f64,
    pub y0: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub ref_lat: f64,
}

impl GridIndex {
    pub fn new(bbox: BBox, ref_lat: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::Config(format!("grid cell size must be positive, got {cell_size}")));
        }
        let lo = project(bbox.lat_min, bbox.lon_min, ref_lat)?;
        let hi = project(bbox.lat_max, bbox.lon_max, ref_lat)?;
        let n_x = ((hi[0] - lo[0]) / cell_size).floor() as usize + 1;
        let n_y = ((hi[1] - lo[1]) / cell_size).floor() as usize + 1;
        Ok(Self {
            cell_size,
            x0: lo[0],
            y0: lo[1],
            n_x,
            n_y,
            ref_lat,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.n_x * self.n_y
    }

    /// Row-major flat index `iy * n_x + ix`.
    pub fn flat(&self, (ix, iy): (usize, usize)) -> usize {
        iy * self.n_x + ix
    }

    pub fn unflat(&self, i: usize) -> (usize, usize) {
        (i % self.n_x, i / self.n_x)
    }

    /// Cell containing a projected point. Points outside the grid are clamped to the
    /// nearest border cell.
    pub fn grid_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let fx = ((x - self.x0) / self.cell_size).floor();
        let fy = ((y - self.y0) / self.cell_size).floor();
        let clamp = |f: f64, n: usize| -> usize {
            if f < 0.0 || !f.is_finite() {
                0
            } else if f as usize >= n {
                n - 1
            } else {
                f as usize
            }
        };
        let cell = (clamp(fx, self.n_x), clamp(fy, self.n_y));
        if fx < 0.0 || fy < 0.0 || fx as usize >= self.n_x || fy as usize >= self.n_y {
            warn!("point ({x:.1}, {y:.1}) outside grid; clamped to cell {cell:?}");
        }
        cell
    }

    pub fn cell_of(&self, p: LatLon) -> (usize, usize) {
        let [x, y] = project_unchecked(p.lat, p.lon, self.ref_lat);
        self.grid_cell(x, y)
    }
}

/// Timestamped segment sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<(SegmentId, i64)>,
}

impl Trajectory {
    pub fn new(points: Vec<(SegmentId, i64)>) -> Self {
        Self { points }
    }

    pub fn from_parts(segments: &[SegmentId], timestamps: &[i64]) -> Self {
        assert_eq!(segments.len(), timestamps.len());
        Self::new(segments.iter().copied().zip(timestamps.iter().copied()).collect())
    }

    pub fn points(&self) -> &[(SegmentId, i64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn segments(&self) -> Vec<SegmentId> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn segment(&self, i: usize) -> SegmentId {
        self.points[i].0
    }

    pub fn departure(&self) -> i64 {
        self.points[0].1
    }

    pub fn origin(&self) -> SegmentId {
        self.points[0].0
    }

    pub fn destination(&self) -> SegmentId {
        self.points[self.points.len() - 1].0
    }

    /// Seconds from first to last timestamp.
    pub fn duration(&self) -> i64 {
        self.points[self.points.len() - 1].1 - self.points[0].1
    }

    /// Contiguous sub-trajectory `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self::new(self.points[range].to_vec())
    }

    pub fn truncated(&self, max_len: usize) -> Self {
        Self::new(self.points[..self.points.len().min(max_len)].to_vec())
    }
}

// --- file formats ----------------------------------------------------------

const NETWORK_HEADER: &str = "id,start_lat,start_lon,end_lat,end_lon,length,road_type,lanes";

#[derive(Debug, Deserialize, Serialize)]
struct SegmentRecord {
    id: usize,
    start_lat: f64,
    start_lon: f64,
    end_lat: f64,
    end_lon: f64,
    length: f64,
    road_type: usize,
    lanes: Option<u8>,
}

#[derive(Debug, Deserialize, Serialize)]
struct EdgeRecord {
    from_id: usize,
    to_id: usize,
}

/// Reads the segment CSV and the edge CSV.
pub fn read_network(segments_path: &Path, edges_path: &Path) -> Result<RoadNetwork> {
    let mut rdr = csv::Reader::from_path(segments_path)?;
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != NETWORK_HEADER {
        return Err(Error::Parse {
            path: segments_path.into(),
            line: 1,
            msg: format!("expected header `{NETWORK_HEADER}`"),
        });
    }
    let mut segments = Vec::new();
    for (i, rec) in rdr.deserialize::<SegmentRecord>().enumerate() {
        let r = rec.map_err(|e| Error::Parse {
            path: segments_path.into(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        segments.push(RoadSegment {
            id: r.id,
            start: LatLon::new(r.start_lat, r.start_lon),
            end: LatLon::new(r.end_lat, r.end_lon),
            length: r.length,
            road_type: r.road_type,
            in_degree: 0,
            out_degree: 0,
            lanes: r.lanes,
        });
    }
    let mut rdr = csv::Reader::from_path(edges_path)?;
    let mut edges = Vec::new();
    for (i, rec) in rdr.deserialize::<EdgeRecord>().enumerate() {
        let r = rec.map_err(|e| Error::Parse {
            path: edges_path.into(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        edges.push((r.from_id, r.to_id));
    }
    RoadNetwork::new(segments, &edges)
}

pub fn write_network(net: &RoadNetwork, segments_path: &Path, edges_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(segments_path)?;
    for s in net.segments() {
        w.serialize(SegmentRecord {
            id: s.id,
            start_lat: s.start.lat,
            start_lon: s.start.lon,
            end_lat: s.end.lat,
            end_lon: s.end.lon,
            length: s.length,
            road_type: s.road_type,
            lanes: s.lanes,
        })?;
    }
    w.flush().map_err(|e| Error::io(segments_path, e))?;
    let mut w = csv::Writer::from_path(edges_path)?;
    for (a, b) in net.edges() {
        w.serialize(EdgeRecord { from_id: a, to_id: b })?;
    }
    w.flush().map_err(|e| Error::io(edges_path, e))?;
    Ok(())
}

/// Parses one trajectory line of space-separated `seg:ts` pairs.
pub fn parse_trajectory_line(line: &str) -> std::result::Result<Trajectory, String> {
    let mut points = Vec::new();
    for tok in line.split_whitespace() {
        let (s, t) = tok
            .split_once(':')
            .ok_or_else(|| format!("malformed point `{tok}`"))?;
        let s: usize = s.parse().map_err(|_| format!("bad segment id `{s}`"))?;
        let t: i64 = t.parse().map_err(|_| format!("bad timestamp `{t}`"))?;
        points.push((s, t));
    }
    Ok(Trajectory::new(points))
}

pub fn format_trajectory_line(t: &Trajectory) -> String {
    let mut s = String::with_capacity(t.len() * 16);
    for (i, (seg, ts)) in t.points().iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{seg}:{ts}"));
    }
    s
}

/// Reads a trajectory file without graph validation; blank lines are skipped.
/// Returns `(line_number, trajectory)` pairs (1-based line numbers).
pub fn read_trajectories_raw(path: &Path) -> Result<Vec<(usize, Trajectory)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_trajectory_line(&line).map_err(|msg| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        })?;
        out.push((i + 1, t));
    }
    Ok(out)
}

/// Reads and validates every trajectory; the first violation is reported with its line.
pub fn read_trajectories(path: &Path, net: &RoadNetwork) -> Result<Vec<Trajectory>> {
    read_trajectories_raw(path)?
        .into_iter()
        .map(|(line, t)| {
            net.validate(&t).map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: e.to_string(),
            })?;
            Ok(t)
        })
        .collect()
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for t in trajs {
        writeln!(w, "{}", format_trajectory_line(t)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
