//! Detour-based similarity retrieval benchmark.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ksp::k_shortest_paths;
use crate::error::{Error, Result};
use crate::geo::{write_trajectories, RoadNetwork, Trajectory};
use crate::pretrain::SegmentTimes;

pub const DETOUR_SEARCH_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct StrBenchmark {
    /// Detoured versions of `originals`, in the same order.
    pub queries: Vec<Trajectory>,
    pub originals: Vec<Trajectory>,
    pub distractors: Vec<Trajectory>,
    /// Source index (into the pool passed to the builder) of each original and distractor.
    pub original_ids: Vec<usize>,
    pub distractor_ids: Vec<usize>,
}

impl StrBenchmark {
    /// Originals followed by distractors; query `i` matches candidate `i`.
    pub fn candidates(&self) -> Vec<Trajectory> {
        self.originals.iter().chain(&self.distractors).cloned().collect()
    }

    pub fn num_candidates(&self) -> usize {
        self.originals.len() + self.distractors.len()
    }

    /// Checks that every detour is a valid path strictly longer than its original and that
    /// candidate sources are unique.
    pub fn audit(&self, net: &RoadNetwork) -> Result<()> {
        if self.queries.len() != self.originals.len() {
            return Err(Error::input("query and original counts differ"));
        }
        for (q, o) in self.queries.iter().zip(&self.originals) {
            let (ql, ol) = (net.path_length(&q.segments()), net.path_length(&o.segments()));
            if ql <= ol {
                return Err(Error::input(format!("detour of length {ql} is not longer than {ol}")));
            }
            net.validate(q)?;
            if q.origin() != o.origin() || q.destination() != o.destination() {
                return Err(Error::input("detour does not share the original's OD pair"));
            }
        }
        let ids: HashSet<usize> = self.original_ids.iter().chain(&self.distractor_ids).copied().collect();
        if ids.len() != self.num_candidates() {
            return Err(Error::input("candidate sources are not unique"));
        }
        Ok(())
    }

    /// Writes `queries.traj`, `originals.traj`, `distractors.traj` and `mapping.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_trajectories(&dir.join("queries.traj"), &self.queries)?;
        write_trajectories(&dir.join("originals.traj"), &self.originals)?;
        write_trajectories(&dir.join("distractors.traj"), &self.distractors)?;
        let mut w = csv::Writer::from_path(dir.join("mapping.csv"))?;
        w.write_record(["query", "candidate", "source"])?;
        for (i, src) in self.original_ids.iter().enumerate() {
            w.write_record([i.to_string(), i.to_string(), src.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }
}

/// First k-shortest path strictly longer than `t`, with timestamps synthesized from `times`.
pub fn detour_of(net: &RoadNetwork, t: &Trajectory, times: &SegmentTimes, cap: usize) -> Option<Trajectory> {
    let len = net.path_length(&t.segments());
    k_shortest_paths(net, t.origin(), t.destination(), cap)
        .into_iter()
        .find(|p| p.cost > len * (1.0 + 1e-12))
        .map(|p| times.synthesize(&p.nodes, t.departure()))
}

pub fn build_str_benchmark(
    pool: &[Trajectory],
    net: &RoadNetwork,
    times: &SegmentTimes,
    n_q: usize,
    n_neg: usize,
    cap: usize,
    rng: &mut impl Rng,
) -> Result<StrBenchmark> {
    if pool.len() < n_q + n_neg {
        return Err(Error::input(format!(
            "{} trajectories cannot supply {n_q} queries and {n_neg} distractors",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut b = StrBenchmark {
        queries: Vec::new(),
        originals: Vec::new(),
        distractors: Vec::new(),
        original_ids: Vec::new(),
        distractor_ids: Vec::new(),
    };
    let mut used = vec![false; pool.len()];
    for &i in &order {
        if b.queries.len() == n_q {
            break;
        }
        if let Some(q) = detour_of(net, &pool[i], times, cap) {
            b.queries.push(q);
            b.originals.push(pool[i].clone());
            b.original_ids.push(i);
            used[i] = true;
        }
    }
    if b.queries.len() < n_q {
        return Err(Error::input(format!("only {} trajectories admit a detour, {n_q} requested", b.queries.len())));
    }
    let rest: Vec<usize> = order.into_iter().filter(|&i| !used[i]).collect();
    if rest.len() < n_neg {
        return Err(Error::input("not enough trajectories left for distractors"));
    }
    for &i in &rest[..n_neg] {
        b.distractors.push(pool[i].clone());
        b.distractor_ids.push(i);
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "HR@1")]
    pub hr1: f64,
    #[serde(rename = "HR@5")]
    pub hr5: f64,
    #[serde(rename = "MRR")]
    pub mrr: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// 1-based rank of candidate `truth[q]` for each query under cosine similarity (ties by
/// candidate index).
pub fn retrieval_ranks(queries: &[Vec<f64>], candidates: &[Vec<f64>], truth: &[usize]) -> Result<Vec<usize>> {
    if queries.len() != truth.len() {
        return Err(Error::Shape("one ground-truth index per query required".into()));
    }
    let d = candidates.first().map_or(0, Vec::len);
    if queries.iter().chain(candidates).any(|v| v.len() != d) {
        return Err(Error::Shape("embedding dimensions differ".into()));
    }
    queries
        .iter()
        .zip(truth)
        .map(|(q, &t)| {
            if t >= candidates.len() {
                return Err(Error::input(format!("ground truth {t} out of range")));
            }
            let st = cosine(q, &candidates[t]);
            let better = candidates
                .iter()
                .enumerate()
                .filter(|&(j, c)| {
                    let s = cosine(q, c);
                    s > st || (s == st && j < t)
                })
                .count();
            Ok(better + 1)
        })
        .collect()
}

pub fn str_evaluate(queries: &[Vec<f64>], candidates: &[Vec<f64>], truth: &[usize]) -> Result<RetrievalMetrics> {
    let ranks = retrieval_ranks(queries, candidates, truth)?;
    if ranks.is_empty() {
        return Err(Error::input("no queries"));
    }
    let n = ranks.len() as f64;
    Ok(RetrievalMetrics {
        hr1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
        hr5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_embedding_ranks_first() {
        let q = vec![vec![1.0, 2.0]];
        let c = vec![vec![-1.0, 0.0], vec![1.0, 2.0], vec![0.0, 1.0]];
        let m = str_evaluate(&q, &c, &[1]).unwrap();
        assert_eq!((m.hr1, m.hr5, m.mrr), (1.0, 1.0, 1.0));
        assert!(str_evaluate(&q, &[vec![1.0]], &[0]).is_err());
    }

    #[test]
    fn random_embeddings_mrr_matches_uniform_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 20_000;
        let mut qs = Vec::new();
        let mut sum = 0.0;
        for _ in 0..trials {
            let mk = |rng: &mut ChaCha8Rng| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let c: Vec<Vec<f64>> = (0..10).map(|_| mk(&mut rng)).collect();
            let q = vec![mk(&mut rng)];
            let m = str_evaluate(&q, &c, &[0]).unwrap();
            sum += m.mrr;
            qs.push(m.mrr);
        }
        let expected: f64 = (1..=10).map(|r| 1.0 / r as f64).sum::<f64>() / 10.0;
        let var: f64 = (1..=10).map(|r| (1.0 / r as f64 - expected).powi(2)).sum::<f64>() / 10.0;
        let mean = sum / trials as f64;
        assert!((mean - expected).abs() < 3.0 * (var / trials as f64).sqrt(), "{mean} vs {expected}");
        assert!(qs.iter().all(|&x| x > 0.0));
    }
}
