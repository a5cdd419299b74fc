//! Loopless k-shortest paths (deviation search) where a path's cost is the summed length of
//! the segments it visits.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use crate::geo::{RoadNetwork, SegmentId};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// A path and its total node weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPath {
    pub nodes: Vec<usize>,
    pub cost: f64,
}

fn dijkstra(
    out: &[Vec<usize>],
    weight: &[f64],
    src: usize,
    dst: usize,
    banned_nodes: &[bool],
    banned_edges: &HashSet<(usize, usize)>,
) -> Option<WeightedPath> {
    let n = out.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[src] = weight[src];
    heap.push(std::cmp::Reverse((Cost(dist[src]), src)));
    while let Some(std::cmp::Reverse((Cost(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        if u == dst {
            break;
        }
        for &v in &out[u] {
            if banned_nodes[v] || banned_edges.contains(&(u, v)) {
                continue;
            }
            let nd = d + weight[v];
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(std::cmp::Reverse((Cost(nd), v)));
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }
    let mut nodes = vec![dst];
    while *nodes.last().expect("nonempty") != src {
        nodes.push(prev[*nodes.last().expect("nonempty")]);
    }
    nodes.reverse();
    Some(WeightedPath { nodes, cost: dist[dst] })
}

fn cost_of(weight: &[f64], nodes: &[usize]) -> f64 {
    nodes.iter().map(|&v| weight[v]).sum()
}

/// Up to `k` loopless paths from `src` to `dst` in nondecreasing cost order; equal costs are
/// ordered by node sequence. Empty when `dst` is unreachable.
pub fn yen(out: &[Vec<usize>], weight: &[f64], src: usize, dst: usize, k: usize) -> Vec<WeightedPath> {
    let n = out.len();
    if k == 0 || src >= n || dst >= n {
        return Vec::new();
    }
    let no_edges = HashSet::new();
    let Some(first) = dijkstra(out, weight, src, dst, &vec![false; n], &no_edges) else {
        return Vec::new();
    };
    let mut found = vec![first];
    let mut seen: HashSet<Vec<usize>> = HashSet::from([found[0].nodes.clone()]);
    let mut pool: BTreeSet<(Cost, Vec<usize>)> = BTreeSet::new();
    while found.len() < k {
        let last = found.last().expect("nonempty").nodes.clone();
        for i in 0..last.len() - 1 {
            let root = &last[..=i];
            let mut banned_edges = HashSet::new();
            for p in &found {
                if p.nodes.len() > i + 1 && p.nodes[..=i] == *root {
                    banned_edges.insert((p.nodes[i], p.nodes[i + 1]));
                }
            }
            let mut banned_nodes = vec![false; n];
            for &v in &root[..i] {
                banned_nodes[v] = true;
            }
            if let Some(spur) = dijkstra(out, weight, root[i], dst, &banned_nodes, &banned_edges) {
                let mut nodes = root[..i].to_vec();
                nodes.extend(spur.nodes);
                if !seen.contains(&nodes) {
                    let c = cost_of(weight, &nodes);
                    pool.insert((Cost(c), nodes));
                }
            }
        }
        let Some((Cost(cost), nodes)) = pool.pop_first() else {
            break;
        };
        seen.insert(nodes.clone());
        found.push(WeightedPath { nodes, cost });
    }
    // restore the documented tie order among equal costs
    found.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.nodes.cmp(&b.nodes)));
    found
}

/// Segment-level k-shortest paths weighted by segment length.
pub fn k_shortest_paths(net: &RoadNetwork, origin: SegmentId, destination: SegmentId, k: usize) -> Vec<WeightedPath> {
    let out: Vec<Vec<usize>> = (0..net.len()).map(|s| net.out_neighbors(s).to_vec()).collect();
    let weight: Vec<f64> = net.segments().iter().map(|s| s.length).collect();
    yen(&out, &weight, origin, destination, k)
}
