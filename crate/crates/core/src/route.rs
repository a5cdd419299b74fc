//! Route-choice encoding: navigational features per candidate transition, the wide and
//! deep transition context, and the selected/unselected contrast.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Mlp;
use crate::autodiff::{Graph, ParamId, ParamStore, SparseEntry, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{angle_between, RoadNetwork, SegmentId, Trajectory};
use crate::scalar::Scalar;

pub const PROB_BINS: usize = 5;
pub const ANGLE_BINS: usize = 8;
pub const CROSSED_SIZE: usize = PROB_BINS * ANGLE_BINS;

/// Historical transition counts between adjacent segments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionStats {
    counts: BTreeMap<(SegmentId, SegmentId), u64>,
}

impl TransitionStats {
    /// Counts consecutive transitions. Pairs that are not network edges are rejected.
    pub fn from_trajectories<'a>(
        net: &RoadNetwork,
        trajs: impl IntoIterator<Item = &'a Trajectory>,
    ) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for t in trajs {
            for w in t.points().windows(2) {
                let (a, b) = (w[0].0, w[1].0);
                if !net.has_edge(a, b) {
                    return Err(Error::Trajectory(format!("transition {a}->{b} is not an edge")));
                }
                *counts.entry((a, b)).or_insert(0) += 1;
            }
        }
        Ok(Self { counts })
    }

    pub fn count(&self, from: SegmentId, to: SegmentId) -> u64 {
        self.counts.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((SegmentId, SegmentId), u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    pub fn read(path: &Path, net: &RoadNetwork) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            from_id: usize,
            to_id: usize,
            count: u64,
        }
        let mut counts = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(path)?;
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 2,
                msg: e.to_string(),
            })?;
            if row.from_id >= net.len() || row.to_id >= net.len() || !net.has_edge(row.from_id, row.to_id) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 2,
                    msg: format!("{}->{} is not an edge", row.from_id, row.to_id),
                });
            }
            counts.insert((row.from_id, row.to_id), row.count);
        }
        Ok(Self { counts })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["from_id", "to_id", "count"])?;
        for ((a, b), c) in self.iter() {
            w.write_record([a.to_string(), b.to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Cumulative length fraction at every position of `segments`.
pub fn journey_progression(net: &RoadNetwork, segments: &[SegmentId]) -> Vec<f64> {
    let total: f64 = segments.iter().map(|&s| net.segment(s).length).sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = segments
        .iter()
        .map(|&s| {
            acc += net.segment(s).length;
            acc / total
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// `P(c | from)` for every out-neighbor `c`, in neighbor order. Uniform when no
/// transitions out of `from` were observed; empty when there are no out-neighbors.
pub fn transition_likelihood(stats: &TransitionStats, net: &RoadNetwork, from: SegmentId) -> Vec<(SegmentId, f64)> {
    let nbrs = net.out_neighbors(from);
    let total: u64 = nbrs.iter().map(|&c| stats.count(from, c)).sum();
    nbrs.iter()
        .map(|&c| {
            let p = if total == 0 {
                1.0 / nbrs.len() as f64
            } else {
                stats.count(from, c) as f64 / total as f64
            };
            (c, p)
        })
        .collect()
}

/// Angle between `mid(cur) -> mid(cand)` and `mid(cur) -> mid(dest)`; zero when either
/// vector is degenerate.
pub fn directional_deviation(net: &RoadNetwork, cur: SegmentId, cand: SegmentId, dest: SegmentId) -> f64 {
    let o = net.midpoint(cur);
    let (c, n) = (net.midpoint(cand), net.midpoint(dest));
    angle_between([c[0] - o[0], c[1] - o[1]], [n[0] - o[0], n[1] - o[1]]).unwrap_or(0.0)
}

/// Crossed (likelihood bin, angle bin) index in `0..40`.
pub fn crossed_index(prob: f64, dtheta: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::input(format!("likelihood {prob} outside [0, 1]")));
    }
    if !(0.0..=std::f64::consts::PI).contains(&dtheta) {
        return Err(Error::input(format!("angle {dtheta} outside [0, pi]")));
    }
    let p_bin = ((PROB_BINS as f64 * prob).floor() as usize).min(PROB_BINS - 1);
    let t_bin = ((ANGLE_BINS as f64 * dtheta / std::f64::consts::PI).floor() as usize).min(ANGLE_BINS - 1);
    Ok(p_bin * ANGLE_BINS + t_bin)
}

/// Likelihoods for every segment, computed once per stats snapshot.
#[derive(Debug, Clone)]
pub struct LikelihoodTable {
    per_segment: Vec<Vec<f64>>,
}

impl LikelihoodTable {
    pub fn new(stats: &TransitionStats, net: &RoadNetwork) -> Self {
        Self {
            per_segment: (0..net.len())
                .map(|s| transition_likelihood(stats, net, s).into_iter().map(|(_, p)| p).collect())
                .collect(),
        }
    }

    /// Likelihood of the `k`-th out-neighbor of `from`.
    pub fn get(&self, from: SegmentId, k: usize) -> f64 {
        self.per_segment[from][k]
    }
}

/// One candidate transition `(cur, cand)` at some trajectory position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateFeatures {
    pub position: usize,
    pub cur: SegmentId,
    pub cand: SegmentId,
    pub rho: f64,
    pub prob: f64,
    pub dtheta: f64,
}

/// Flattened candidate rows for a batch of segment sequences plus the pooling plans that
/// map them back to positions.
#[derive(Debug, Clone)]
pub struct ChoiceBatch<T> {
    pub num_positions: usize,
    /// First position of each sequence.
    pub offsets: Vec<usize>,
    pub candidates: Vec<CandidateFeatures>,
    wide_idx: Vec<usize>,
    selected: Vec<SparseEntry<T>>,
    unselected: Vec<SparseEntry<T>>,
}

impl<T: Scalar> ChoiceBatch<T> {
    pub fn new(net: &RoadNetwork, lik: &LikelihoodTable, seqs: &[&[SegmentId]]) -> Result<Self> {
        let mut candidates = Vec::new();
        let mut wide_idx = Vec::new();
        let mut selected = Vec::new();
        let mut unselected = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut pos = 0;
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Trajectory("empty segment sequence".into()));
            }
            offsets.push(pos);
            let rho = journey_progression(net, seq);
            let dest = *seq.last().expect("nonempty");
            for (i, &cur) in seq.iter().enumerate() {
                let next = seq.get(i + 1).copied();
                let nbrs = net.out_neighbors(cur);
                if let Some(nx) = next {
                    if !nbrs.contains(&nx) {
                        return Err(Error::Trajectory(format!("{nx} is not an out-neighbor of {cur}")));
                    }
                }
                let n_unsel = nbrs.len() - usize::from(next.is_some());
                for (k, &cand) in nbrs.iter().enumerate() {
                    let prob = lik.get(cur, k);
                    let dtheta = directional_deviation(net, cur, cand, dest);
                    let row = candidates.len() as u32;
                    candidates.push(CandidateFeatures {
                        position: pos,
                        cur,
                        cand,
                        rho: rho[i],
                        prob,
                        dtheta,
                    });
                    wide_idx.push(crossed_index(prob.clamp(0.0, 1.0), dtheta)?);
                    if Some(cand) == next {
                        selected.push(SparseEntry {
                            out_row: pos as u32,
                            src_row: row,
                            weight: T::one(),
                        });
                    } else {
                        unselected.push(SparseEntry {
                            out_row: pos as u32,
                            src_row: row,
                            weight: T::one() / T::of(n_unsel as f64),
                        });
                    }
                }
                pos += 1;
            }
        }
        Ok(Self {
            num_positions: pos,
            offsets,
            candidates,
            wide_idx,
            selected,
            unselected,
        })
    }

    pub fn from_trajectories(net: &RoadNetwork, lik: &LikelihoodTable, trajs: &[&Trajectory]) -> Result<Self> {
        let segs: Vec<Vec<SegmentId>> = trajs.iter().map(|t| t.segments()).collect();
        let refs: Vec<&[SegmentId]> = segs.iter().map(Vec::as_slice).collect();
        Self::new(net, lik, &refs)
    }

    fn column(&self, f: impl Fn(&CandidateFeatures) -> f64) -> Tensor<T> {
        Tensor::from_vec(self.candidates.len(), 1, self.candidates.iter().map(|c| T::of(f(c))).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteConfig {
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct RouteModel {
    pub d: usize,
    wide: ParamId,
    w_rho: ParamId,
    w_prob: ParamId,
    w_cur: ParamId,
    w_cand: ParamId,
    w_angle: ParamId,
    deep: Mlp,
    choice: Mlp,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RouteTrace {
    /// Per candidate row.
    pub wide: Var,
    pub deep: Var,
    pub context: Var,
    /// Per position.
    pub selected: Var,
    pub unselected: Var,
    pub output: Var,
}

impl RouteModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &RouteConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d;
        Self {
            d,
            // Row k is column k of the wide weight matrix.
            wide: store.add_uniform("route.wide", CROSSED_SIZE, d, CROSSED_SIZE, rng),
            w_rho: store.add_uniform("route.W_rho", d, 1, 1, rng),
            w_prob: store.add_uniform("route.W_P", d, 1, 1, rng),
            w_cur: store.add_uniform("route.W_ri", d, d, d, rng),
            w_cand: store.add_uniform("route.W_rc", d, d, d, rng),
            w_angle: store.add_uniform("route.W_dtheta", d, 2, 2, rng),
            deep: Mlp::new(store, "route.deep", 5 * d, 2 * d, d, rng),
            choice: Mlp::new(store, "route.choice", 2 * d, 2 * d, d, rng),
        }
    }

    /// `tokens` holds one environment-aware vector per network segment.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var, batch: &ChoiceBatch<T>) -> RouteTrace {
        let d = self.d;
        let rows = batch.candidates.len();
        let (wide, deep, context) = if rows == 0 {
            let z = g.constant(Tensor::zeros(0, d));
            (z, z, z)
        } else {
            let table = g.param(store, self.wide);
            let wide = g.gather(table, &batch.wide_idx);

            let rho = g.constant(batch.column(|c| c.rho));
            let prob = g.constant(batch.column(|c| c.prob));
            let trig = g.constant(Tensor::from_vec(
                rows,
                2,
                batch
                    .candidates
                    .iter()
                    .flat_map(|c| [T::of(c.dtheta.sin()), T::of(c.dtheta.cos())])
                    .collect(),
            ));
            let (w_rho, w_prob, w_angle) = (
                g.param(store, self.w_rho),
                g.param(store, self.w_prob),
                g.param(store, self.w_angle),
            );
            let h_rho = g.matmul_t(rho, w_rho);
            let h_prob = g.matmul_t(prob, w_prob);
            let h_angle = g.matmul_t(trig, w_angle);
            // Project the whole token table once, then gather per candidate.
            let (w_cur, w_cand) = (g.param(store, self.w_cur), g.param(store, self.w_cand));
            let cur_all = g.matmul_t(tokens, w_cur);
            let cand_all = g.matmul_t(tokens, w_cand);
            let cur_idx: Vec<usize> = batch.candidates.iter().map(|c| c.cur).collect();
            let cand_idx: Vec<usize> = batch.candidates.iter().map(|c| c.cand).collect();
            let h_cur = g.gather(cur_all, &cur_idx);
            let h_cand = g.gather(cand_all, &cand_idx);
            let h = g.concat_cols(&[h_rho, h_prob, h_cur, h_cand, h_angle]);
            let deep = self.deep.forward(g, store, h);
            let context = g.add(wide, deep);
            (wide, deep, context)
        };
        let selected = g.sparse(context, batch.num_positions, batch.selected.clone());
        let unselected = g.sparse(context, batch.num_positions, batch.unselected.clone());
        let x = g.concat_cols(&[selected, unselected]);
        let output = self.choice.forward(g, store, x);
        RouteTrace {
            wide,
            deep,
            context,
            selected,
            unselected,
            output,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.wide, self.w_rho, self.w_prob, self.w_cur, self.w_cand, self.w_angle];
        for m in [&self.deep, &self.choice] {
            for l in [&m.hidden, &m.output] {
                v.push(l.weight);
                v.extend(l.bias);
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::geo::{LatLon, RoadSegment};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn seg(id: usize, a: (f64, f64), b: (f64, f64), length: f64) -> RoadSegment {
        RoadSegment {
            id,
            start: LatLon::new(a.0, a.1),
            end: LatLon::new(b.0, b.1),
            length,
            road_type: 0,
            in_degree: 0,
            out_degree: 0,
            lanes: None,
        }
    }

    /// A small junction: 0 -> {1, 2, 3}; 1 -> 4; 2 -> 4; 4 -> 5. Lengths 100..600.
    fn junction() -> RoadNetwork {
        let segs = vec![
            seg(0, (0.0, 0.0), (0.0, 0.001), 100.0),
            seg(1, (0.0, 0.001), (0.0, 0.002), 200.0),
            seg(2, (0.0, 0.001), (0.001, 0.001), 300.0),
            seg(3, (0.0, 0.001), (-0.001, 0.001), 400.0),
            seg(4, (0.0, 0.002), (0.001, 0.002), 500.0),
            seg(5, (0.001, 0.002), (0.002, 0.002), 600.0),
        ];
        RoadNetwork::new(segs, &[(0, 1), (0, 2), (0, 3), (1, 4), (2, 4), (4, 5)]).unwrap()
    }

    #[test]
    fn progression_examples() {
        let segs = vec![
            seg(0, (0.0, 0.0), (0.0, 0.001), 100.0),
            seg(1, (0.0, 0.001), (0.0, 0.002), 300.0),
            seg(2, (0.0, 0.002), (0.0, 0.003), 600.0),
        ];
        let net = RoadNetwork::new(segs, &[(0, 1), (1, 2)]).unwrap();
        let rho = journey_progression(&net, &[0, 1, 2]);
        assert!((rho[1] - 0.4).abs() < 1e-12);
        assert_eq!(rho[2], 1.0);
        let eq = RoadNetwork::new(
            (0..4).map(|i| seg(i, (0.0, i as f64 * 0.001), (0.0, (i + 1) as f64 * 0.001), 50.0)).collect(),
            &[(0, 1), (1, 2), (2, 3)],
        )
        .unwrap();
        assert_eq!(journey_progression(&eq, &[0, 1, 2, 3])[0], 0.25);
    }

    #[test]
    fn likelihood_examples() {
        let net = junction();
        let t = |s: &[usize]| Trajectory::from_parts(s, &(0..s.len() as i64).collect::<Vec<_>>());
        let trajs = vec![t(&[0, 1]), t(&[0, 1]), t(&[0, 1]), t(&[0, 2])];
        let stats = TransitionStats::from_trajectories(&net, &trajs).unwrap();
        assert_eq!(transition_likelihood(&stats, &net, 0), vec![(1, 0.75), (2, 0.25), (3, 0.0)]);
        assert_eq!(transition_likelihood(&stats, &net, 1), vec![(4, 1.0)]);
        assert!(transition_likelihood(&stats, &net, 5).is_empty());

        let mut segs = vec![seg(0, (0.0, 0.0), (0.0, 0.001), 10.0)];
        for i in 1..5 {
            segs.push(seg(i, (0.0, 0.001), (0.001 * i as f64, 0.002), 10.0));
        }
        let star = RoadNetwork::new(segs, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let lik = transition_likelihood(&TransitionStats::default(), &star, 0);
        assert!(lik.iter().all(|&(_, p)| p == 0.25));
    }

    #[test]
    fn stats_csv_round_trip() {
        let net = junction();
        let t = Trajectory::from_parts(&[0, 2, 4, 5], &[0, 1, 2, 3]);
        let stats = TransitionStats::from_trajectories(&net, [&t]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        stats.write(&p).unwrap();
        assert_eq!(TransitionStats::read(&p, &net).unwrap(), stats);
        std::fs::write(&p, "from_id,to_id,count\n0,5,1\n").unwrap();
        assert!(TransitionStats::read(&p, &net).is_err());
    }

    #[test]
    fn deviation_examples_and_oracle() {
        // Points along x: cur at 0, candidate at +1, destination at +5 / -5.
        let mk = |x: f64| seg(0, (0.0, x * 0.001), (0.0, x * 0.001 + 0.0001), 10.0);
        let mut segs = vec![mk(0.0), mk(1.0), mk(5.0), mk(-5.0)];
        for (i, s) in segs.iter_mut().enumerate() {
            s.id = i;
        }
        let net = RoadNetwork::new(segs, &[(0, 1)]).unwrap();
        assert!(directional_deviation(&net, 0, 1, 2).abs() < 1e-12);
        assert!((directional_deviation(&net, 0, 1, 3) - PI).abs() < 1e-12);
        assert_eq!(directional_deviation(&net, 0, 0, 2), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = |rng: &mut ChaCha8Rng| (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
            let (a, b, c) = (p(&mut rng), p(&mut rng), p(&mut rng));
            let segs = vec![
                seg(0, a, a, 1.0),
                seg(1, b, b, 1.0),
                seg(2, c, c, 1.0),
            ];
            let net = RoadNetwork::new(segs, &[]).unwrap();
            let (o, u, v) = (net.midpoint(0), net.midpoint(1), net.midpoint(2));
            let (u, v) = ([u[0] - o[0], u[1] - o[1]], [v[0] - o[0], v[1] - o[1]]);
            let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
            let want = cos.clamp(-1.0, 1.0).acos();
            assert!((directional_deviation(&net, 0, 1, 2) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn crossed_index_examples() {
        assert_eq!(crossed_index(0.0, 0.0).unwrap(), 0);
        assert_eq!(crossed_index(1.0, PI).unwrap(), 39);
        assert_eq!(crossed_index(0.5, PI / 2.0).unwrap(), 20);
        assert!(crossed_index(1.5, 0.0).is_err());
        assert!(crossed_index(0.5, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn crossed_one_hot_has_single_one(p in 0.0..=1.0f64, t in 0.0..=PI) {
            let k = crossed_index(p, t).unwrap();
            let onehot: Vec<u8> = (0..CROSSED_SIZE).map(|i| u8::from(i == k)).collect();
            prop_assert_eq!(onehot.iter().filter(|&&x| x == 1).count(), 1);
            prop_assert_eq!(onehot.len() - 1, 39);
        }

        #[test]
        fn progression_strictly_increases(lengths in proptest::collection::vec(0.5..500.0f64, 2..12)) {
            let n = lengths.len();
            let segs = lengths.iter().enumerate().map(|(i, &l)| seg(i, (0.0, i as f64 * 0.001), (0.0, (i + 1) as f64 * 0.001), l)).collect();
            let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
            let net = RoadNetwork::new(segs, &edges).unwrap();
            let rho = journey_progression(&net, &(0..n).collect::<Vec<_>>());
            prop_assert!(rho.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(rho[n - 1], 1.0);
        }

        #[test]
        fn likelihood_sums_to_one(counts in proptest::collection::vec(0u64..20, 3)) {
            let net = junction();
            let mut stats = TransitionStats::default();
            for (k, &c) in counts.iter().enumerate() {
                if c > 0 {
                    stats.counts.insert((0, k + 1), c);
                }
            }
            let s: f64 = transition_likelihood(&stats, &net, 0).iter().map(|x| x.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    fn setup(d: usize, seed: u64) -> (RoadNetwork, LikelihoodTable, ParamStore<f64>, RouteModel, Tensor<f64>) {
        let net = junction();
        let t = Trajectory::from_parts(&[0, 1, 4, 5], &[0, 1, 2, 3]);
        let t2 = Trajectory::from_parts(&[0, 2, 4], &[0, 1, 2]);
        let stats = TransitionStats::from_trajectories(&net, [&t, &t2, &t]).unwrap();
        let lik = LikelihoodTable::new(&stats, &net);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = RouteModel::new(&mut store, &RouteConfig { d }, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for x in store.get_mut(id).data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
        let tokens = Tensor::from_vec(net.len(), d, (0..net.len() * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        (net, lik, store, model, tokens)
    }

    fn p(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
        store.get(store.id(name).unwrap()).clone()
    }

    fn mv(m: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
        (0..m.rows()).map(|r| m.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn mlp(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = mv(&p(store, &format!("{name}.0.W")), x)
            .iter()
            .zip(p(store, &format!("{name}.0.b")).data())
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        mv(&p(store, &format!("{name}.1.W")), &h)
            .iter()
            .zip(p(store, &format!("{name}.1.b")).data())
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Loop oracle for the transition context of one candidate.
    fn context_oracle(store: &ParamStore<f64>, tokens: &Tensor<f64>, c: &CandidateFeatures) -> Vec<f64> {
        let d = tokens.cols();
        let wide = p(store, "route.wide").row(crossed_index(c.prob, c.dtheta).unwrap()).to_vec();
        let mut h = Vec::with_capacity(5 * d);
        h.extend(mv(&p(store, "route.W_rho"), &[c.rho]));
        h.extend(mv(&p(store, "route.W_P"), &[c.prob]));
        h.extend(mv(&p(store, "route.W_ri"), tokens.row(c.cur)));
        h.extend(mv(&p(store, "route.W_rc"), tokens.row(c.cand)));
        h.extend(mv(&p(store, "route.W_dtheta"), &[c.dtheta.sin(), c.dtheta.cos()]));
        mlp(store, "route.deep", &h).iter().zip(&wide).map(|(a, b)| a + b).collect()
    }

    #[test]
    fn forward_matches_loop_oracle_with_shuffled_pooling() {
        let d = 4;
        let (net, lik, store, model, tokens) = setup(d, 3);
        let seq = [0usize, 1, 4, 5];
        let batch = ChoiceBatch::<f64>::new(&net, &lik, &[&seq]).unwrap();
        let mut g = Graph::new();
        let tok = g.constant(tokens.clone());
        let tr = model.forward(&mut g, &store, tok, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, &cur) in seq.iter().enumerate() {
            let mut rows: Vec<&CandidateFeatures> = batch.candidates.iter().filter(|c| c.position == i).collect();
            use rand::seq::SliceRandom;
            rows.shuffle(&mut rng);
            let next = seq.get(i + 1).copied();
            let mut sel = vec![0.0; d];
            let mut unsel = vec![0.0; d];
            let others: Vec<_> = rows.iter().filter(|c| Some(c.cand) != next).collect();
            for c in &rows {
                let ctx = context_oracle(&store, &tokens, c);
                assert_eq!(c.cur, cur);
                if Some(c.cand) == next {
                    sel = ctx;
                } else {
                    for k in 0..d {
                        unsel[k] += ctx[k] / others.len() as f64;
                    }
                }
            }
            let mut x = sel.clone();
            x.extend(&unsel);
            let want = mlp(&store, "route.choice", &x);
            for k in 0..d {
                assert!((g.value(tr.selected).get(i, k) - sel[k]).abs() < 1e-9);
                assert!((g.value(tr.unselected).get(i, k) - unsel[k]).abs() < 1e-9);
                assert!((g.value(tr.output).get(i, k) - want[k]).abs() < 1e-9);
            }
        }
        // position 0 has alternatives 2 and 3: unselected is their mean
        let rows: Vec<usize> = (0..batch.candidates.len()).filter(|&r| batch.candidates[r].position == 0 && batch.candidates[r].cand != 1).collect();
        let ctx = g.value(tr.context);
        for k in 0..d {
            let mean = (ctx.get(rows[0], k) + ctx.get(rows[1], k)) / 2.0;
            assert!((g.value(tr.unselected).get(0, k) - mean).abs() < 1e-12);
        }
        // single out-neighbor (1 -> 4) chosen: unselected is zero
        assert!(g.value(tr.unselected).row(1).iter().all(|&x| x == 0.0));
        // terminal: selected is zero
        assert!(g.value(tr.selected).row(3).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deep_component_zero_params_and_hand_values() {
        let (net, lik, mut store, model, tokens) = setup(2, 9);
        let ids: Vec<_> = store.ids().collect();
        for id in &ids {
            store.get_mut(*id).data_mut().fill(0.0);
        }
        let batch = ChoiceBatch::<f64>::new(&net, &lik, &[&[0, 1]]).unwrap();
        let mut g = Graph::new();
        let tok = g.constant(tokens.clone());
        let tr = model.forward(&mut g, &store, tok, &batch);
        assert!(g.value(tr.deep).data().iter().all(|&x| x == 0.0));

        // d = 2 hand case on candidate row 0: W_rho = (1, 0), W_P = (0, 1), W_ri = W_rc = 0,
        // W_dtheta = [[0, 1], [0, 0]]; deep MLP picks h[0] + h[1] + h[8] into both outputs.
        let set = |store: &mut ParamStore<f64>, name: &str, rows: usize, cols: usize, v: &[f64]| {
            let id = store.id(name).unwrap();
            *store.get_mut(id) = Tensor::from_f64(rows, cols, v);
        };
        set(&mut store, "route.W_rho", 2, 1, &[1.0, 0.0]);
        set(&mut store, "route.W_P", 2, 1, &[0.0, 1.0]);
        set(&mut store, "route.W_dtheta", 2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let mut w0 = vec![0.0; 4 * 10];
        w0[0] = 1.0; // hidden 0 <- rho
        w0[10 + 3] = 1.0; // hidden 1 <- P
        w0[20 + 8] = 1.0; // hidden 2 <- cos(dtheta)
        set(&mut store, "route.deep.0.W", 4, 10, &w0);
        set(&mut store, "route.deep.1.W", 2, 4, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let tok = g.constant(tokens);
        let tr = model.forward(&mut g, &store, tok, &batch);
        for (r, c) in batch.candidates.iter().enumerate() {
            let want = c.rho + c.prob + c.dtheta.cos().max(0.0);
            assert!((g.value(tr.deep).get(r, 0) - want).abs() < 1e-12);
            assert_eq!(g.value(tr.deep).get(r, 1), 0.0);
        }
    }

    #[test]
    fn invalid_transition_is_rejected() {
        let (net, lik, ..) = setup(2, 1);
        assert!(matches!(ChoiceBatch::<f64>::new(&net, &lik, &[&[0, 5]]), Err(Error::Trajectory(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (net, lik, mut store, model, tokens) = setup(8, 17);
        let tok_id = store.add("tokens", tokens);
        let batch = ChoiceBatch::<f64>::new(&net, &lik, &[&[0, 1, 4, 5]]).unwrap();
        let mut ids = model.param_ids();
        ids.push(tok_id);
        let report = check_gradients(&mut store, &ids, 1e-4, 40, |s| {
            let mut g = Graph::new();
            let tok = g.param(s, tok_id);
            let tr = model.forward(&mut g, s, tok, &batch);
            let sq = g.mul(tr.output, tr.output);
            let l = g.sum_all(sq);
            (g, l)
        });
        assert!(report.passed(1e-3), "{report:?}");
    }
}
