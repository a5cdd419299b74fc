//! Synthetic grid city: road network, POIs with category hotspots, and timed trajectories
//! from destination-biased random walks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geo::{write_network, write_trajectories, LatLon, RoadNetwork, RoadSegment, SegmentId, Trajectory, EARTH_RADIUS_M};
use crate::poi::{write_pois, CategoryRegistry, Poi};
use crate::route::directional_deviation;

/// Monday 2015-11-02 00:00 UTC.
pub const DEFAULT_START: i64 = 1_446_422_400;

const CATEGORIES: [(&str, [&str; 2]); 6] = [
    ("Shopping Services", ["Specialty Stores", "Convenience Stores"]),
    ("Catering Services", ["Chinese Restaurants", "Fast Food"]),
    ("Education and Culture", ["Schools", "Libraries"]),
    ("Medical Services", ["Hospitals", "Pharmacies"]),
    ("Business Residence", ["Office Buildings", "Residential Areas"]),
    ("Sports and Leisure", ["Parks", "Gyms"]),
];

/// Arterial and local speeds in m/s.
const SPEEDS: [f64; 2] = [14.0, 8.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCitySpec {
    /// Intersections per side.
    pub m: usize,
    /// Nominal block length in meters.
    pub spacing: f64,
    /// Uniform jitter applied to interior intersections, meters.
    pub jitter: f64,
    pub pois_per_category: usize,
    pub num_trajectories: usize,
    /// Larger values make walks head more directly to the destination.
    pub turn_bias: f64,
    pub min_points: usize,
    pub max_points: usize,
    pub days: u32,
    pub start: i64,
    pub origin: LatLon,
}

impl Default for SyntheticCitySpec {
    fn default() -> Self {
        Self {
            m: 8,
            spacing: 400.0,
            jitter: 40.0,
            pois_per_category: 80,
            num_trajectories: 2000,
            turn_bias: 3.0,
            min_points: 5,
            max_points: 40,
            days: 14,
            start: DEFAULT_START,
            origin: LatLon::new(39.90, 116.40),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub net: RoadNetwork,
    pub registry: CategoryRegistry,
    pub pois: Vec<Poi>,
    pub trajectories: Vec<Trajectory>,
}

impl SyntheticCity {
    /// Writes `segments.csv`, `edges.csv`, `categories.csv`, `pois.csv` and
    /// `trajectories.traj` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_network(&self.net, &dir.join("segments.csv"), &dir.join("edges.csv"))?;
        self.registry.write(&dir.join("categories.csv"))?;
        write_pois(&dir.join("pois.csv"), &self.pois, &self.registry)?;
        write_trajectories(&dir.join("trajectories.traj"), &self.trajectories)
    }
}

/// Directed segments in the documented construction: `4 m (m - 1)`.
pub fn num_grid_segments(m: usize) -> usize {
    4 * m * (m - 1)
}

struct Planar {
    origin: LatLon,
}

impl Planar {
    fn to_latlon(&self, x: f64, y: f64) -> LatLon {
        let lat = self.origin.lat + (y / EARTH_RADIUS_M).to_degrees();
        let lon = self.origin.lon + (x / (EARTH_RADIUS_M * self.origin.lat.to_radians().cos())).to_degrees();
        LatLon::new(lat, lon)
    }
}

fn is_arterial(line: usize) -> bool {
    line.is_multiple_of(3)
}

fn build_network(spec: &SyntheticCitySpec, rng: &mut ChaCha8Rng) -> Result<RoadNetwork> {
    let m = spec.m;
    let planar = Planar { origin: spec.origin };
    let mut pos = vec![[0.0f64; 2]; m * m];
    for i in 0..m {
        for j in 0..m {
            let interior = i > 0 && j > 0 && i + 1 < m && j + 1 < m;
            let (dx, dy) = if interior && spec.jitter > 0.0 {
                (rng.random_range(-spec.jitter..spec.jitter), rng.random_range(-spec.jitter..spec.jitter))
            } else {
                (0.0, 0.0)
            };
            pos[i * m + j] = [j as f64 * spec.spacing + dx, i as f64 * spec.spacing + dy];
        }
    }
    // (from node, to node, road type)
    let mut links = Vec::with_capacity(num_grid_segments(m));
    for i in 0..m {
        for j in 0..m {
            let u = i * m + j;
            if j + 1 < m {
                let rt = usize::from(!is_arterial(i));
                links.push((u, u + 1, rt));
                links.push((u + 1, u, rt));
            }
            if i + 1 < m {
                let rt = usize::from(!is_arterial(j));
                links.push((u, u + m, rt));
                links.push((u + m, u, rt));
            }
        }
    }
    let segments: Vec<RoadSegment> = links
        .iter()
        .enumerate()
        .map(|(id, &(u, v, rt))| {
            let (a, b) = (pos[u], pos[v]);
            let lanes = if rt == 0 {
                [3u8, 4, 4, 5][rng.random_range(0..4)]
            } else {
                [1u8, 1, 2][rng.random_range(0..3)]
            };
            RoadSegment {
                id,
                start: planar.to_latlon(a[0], a[1]),
                end: planar.to_latlon(b[0], b[1]),
                length: (b[0] - a[0]).hypot(b[1] - a[1]),
                road_type: rt,
                in_degree: 0,
                out_degree: 0,
                lanes: Some(lanes),
            }
        })
        .collect();
    let mut edges = Vec::new();
    for (a, &(_, va, _)) in links.iter().enumerate() {
        for (b, &(ub, vb, _)) in links.iter().enumerate() {
            // continue through the shared node, no U-turns
            if ub == va && vb != links[a].0 {
                edges.push((a, b));
            }
        }
    }
    RoadNetwork::new(segments, &edges)
}

fn scatter_pois(spec: &SyntheticCitySpec, rng: &mut ChaCha8Rng) -> (CategoryRegistry, Vec<Poi>) {
    let planar = Planar { origin: spec.origin };
    let extent = (spec.m - 1) as f64 * spec.spacing;
    let mut registry = CategoryRegistry::new();
    let mut pois = Vec::new();
    let spread = Normal::new(0.0, spec.spacing * 0.6).expect("positive spread");
    for (c1, subs) in CATEGORIES {
        let hotspots: Vec<[f64; 2]> = (0..2)
            .map(|_| [rng.random_range(0.0..extent), rng.random_range(0.0..extent)])
            .collect();
        let ids: Vec<(usize, usize)> = subs.iter().map(|c2| registry.insert(c1, c2)).collect();
        for k in 0..spec.pois_per_category {
            let (x, y) = if rng.random_bool(0.75) {
                let h = hotspots[rng.random_range(0..hotspots.len())];
                (h[0] + spread.sample(rng), h[1] + spread.sample(rng))
            } else {
                (rng.random_range(0.0..extent), rng.random_range(0.0..extent))
            };
            let (x, y) = (x.clamp(0.0, extent), y.clamp(0.0, extent));
            let which = rng.random_range(0..ids.len());
            let (c1i, c2i) = ids[which];
            pois.push(Poi {
                pos: planar.to_latlon(x, y),
                c1: c1i,
                c2: c2i,
                name: format!("{} {k:03}", subs[which]),
            });
        }
    }
    (registry, pois)
}

/// Speed multiplier by local hour: slower around 8:00 and 18:00.
pub fn congestion(hour: f64) -> f64 {
    let bump = |c: f64| (-(hour - c) * (hour - c) / 2.0).exp();
    1.0 - 0.45 * bump(8.0) - 0.45 * bump(18.0)
}

fn departure_time(spec: &SyntheticCitySpec, rng: &mut ChaCha8Rng) -> i64 {
    let day = rng.random_range(0..spec.days.max(1)) as i64;
    let hour: f64 = match rng.random_range(0..10) {
        0..=2 => Normal::new(8.0, 1.0).expect("valid").sample(rng),
        3..=5 => Normal::new(18.0, 1.0).expect("valid").sample(rng),
        _ => rng.random_range(6.0..23.0),
    };
    let secs = (hour.clamp(0.0, 23.99) * 3600.0) as i64;
    spec.start + day * 86_400 + secs
}

fn random_walk(net: &RoadNetwork, origin: SegmentId, dest: SegmentId, spec: &SyntheticCitySpec, rng: &mut ChaCha8Rng) -> Option<Vec<SegmentId>> {
    let mut path = vec![origin];
    let mut visited = vec![false; net.len()];
    visited[origin] = true;
    let mut cur = origin;
    while cur != dest {
        if path.len() >= spec.max_points {
            return None;
        }
        let nbrs = net.out_neighbors(cur);
        if nbrs.contains(&dest) {
            path.push(dest);
            break;
        }
        let options: Vec<(SegmentId, f64)> = nbrs
            .iter()
            .filter(|&&c| !visited[c])
            .map(|&c| {
                let dev = directional_deviation(net, cur, c, dest);
                let arterial = if net.segment(c).road_type == 0 { 1.5 } else { 1.0 };
                (c, arterial * (-spec.turn_bias * dev).exp())
            })
            .collect();
        let total: f64 = options.iter().map(|o| o.1).sum();
        if options.is_empty() || total <= 0.0 {
            return None;
        }
        let mut r = rng.random_range(0.0..total);
        let mut next = options[options.len() - 1].0;
        for &(c, w) in &options {
            if r < w {
                next = c;
                break;
            }
            r -= w;
        }
        visited[next] = true;
        path.push(next);
        cur = next;
    }
    Some(path)
}

fn time_path(net: &RoadNetwork, path: &[SegmentId], departure: i64, rng: &mut ChaCha8Rng) -> Trajectory {
    let driver: f64 = Normal::new(1.0f64, 0.08).expect("valid").sample(rng).clamp(0.7, 1.3);
    let mut t = departure as f64;
    let mut pts = Vec::with_capacity(path.len());
    for &s in path {
        pts.push((s, t.round() as i64));
        let seg = net.segment(s);
        let hour = ((t as i64).rem_euclid(86_400)) as f64 / 3600.0;
        let speed = SPEEDS[seg.road_type.min(1)] * congestion(hour) * driver;
        t += seg.length / speed;
    }
    Trajectory::new(pts)
}

/// Deterministic under `seed`.
pub fn generate_synthetic_city(spec: &SyntheticCitySpec, seed: u64) -> Result<SyntheticCity> {
    if spec.m < 3 {
        return Err(Error::Config(format!("grid side must be at least 3, got {}", spec.m)));
    }
    if spec.min_points < 2 || spec.min_points > spec.max_points {
        return Err(Error::Config("need 2 <= min_points <= max_points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_network(spec, &mut rng)?;
    let (registry, pois) = scatter_pois(spec, &mut rng);
    let mut trajectories = Vec::with_capacity(spec.num_trajectories);
    let mut attempts = 0usize;
    while trajectories.len() < spec.num_trajectories {
        attempts += 1;
        if attempts > 200 * spec.num_trajectories.max(1) {
            return Err(Error::Config("could not generate enough trajectories; relax min/max points".into()));
        }
        let o = rng.random_range(0..net.len());
        let d = rng.random_range(0..net.len());
        if o == d {
            continue;
        }
        let Some(path) = random_walk(&net, o, d, spec, &mut rng) else {
            continue;
        };
        if path.len() < spec.min_points {
            continue;
        }
        let dep = departure_time(spec, &mut rng);
        trajectories.push(time_path(&net, &path, dep, &mut rng));
    }
    Ok(SyntheticCity {
        net,
        registry,
        pois,
        trajectories,
    })
}
