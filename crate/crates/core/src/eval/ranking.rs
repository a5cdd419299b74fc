//! Path-ranking instances: OD-sharing alternatives scored by overlap with the real route.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ksp::k_shortest_paths;
use crate::error::{Error, Result};
use crate::geo::{RoadNetwork, SegmentId, Trajectory};

pub const PR_PATHS: usize = 10;
pub const PR_OVERLAP: f64 = 0.8;

/// Intersection-over-union of the segment sets of two paths.
pub fn iou(a: &[SegmentId], b: &[SegmentId]) -> f64 {
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Walks `paths` in order, keeping a path when its IoU with the real path and with every
/// previously kept path is at most `delta`. Returns kept paths with their IoU to `real`.
pub fn filter_candidates(real: &[SegmentId], paths: &[Vec<SegmentId>], delta: f64) -> Vec<(Vec<SegmentId>, f64)> {
    let mut kept: Vec<(Vec<SegmentId>, f64)> = Vec::new();
    for p in paths {
        let score = iou(p, real);
        if score <= delta && kept.iter().all(|(k, _)| iou(p, k) <= delta) {
            kept.push((p.clone(), score));
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrInstance {
    pub departure: i64,
    /// Real path first (score 1.0), then kept alternatives.
    pub paths: Vec<Vec<SegmentId>>,
    pub scores: Vec<f64>,
}

pub fn build_pr_instance(net: &RoadNetwork, t: &Trajectory, k: usize, delta: f64) -> PrInstance {
    let real = t.segments();
    let alts: Vec<Vec<SegmentId>> = k_shortest_paths(net, t.origin(), t.destination(), k)
        .into_iter()
        .map(|p| p.nodes)
        .collect();
    let mut paths = vec![real.clone()];
    let mut scores = vec![1.0];
    for (p, s) in filter_candidates(&real, &alts, delta) {
        paths.push(p);
        scores.push(s);
    }
    PrInstance {
        departure: t.departure(),
        paths,
        scores,
    }
}

/// One instance per trajectory that has at least one kept alternative.
pub fn build_pr_instances(trajs: &[Trajectory], net: &RoadNetwork, k: usize, delta: f64) -> Vec<PrInstance> {
    trajs
        .iter()
        .map(|t| build_pr_instance(net, t, k, delta))
        .filter(|i| i.paths.len() > 1)
        .collect()
}

pub fn write_pr_instances(path: &Path, instances: &[PrInstance]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for i in instances {
        serde_json::to_writer(&mut w, i)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pr_instances(path: &Path) -> Result<Vec<PrInstance>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
