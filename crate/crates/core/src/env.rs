//! Environment-aware segment tokens: attribute embedding, fine-grained POI attention over
//! adjacent segments, coarse-grained cluster diffusion with category attention, and
//! gated fusion.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, SparseEntry, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::RoadNetwork;
use crate::poi::SemanticFeatures;
use crate::scalar::Scalar;

pub const LENGTH_BUCKETS: usize = 16;
pub const DEGREE_CAP: usize = 8;
/// LeakyReLU slope in the fine-grained attention score.
pub const GAT_SLOPE: f64 = 0.2;

/// Log-spaced bucket over [1 m, 10 km]; values outside are clamped.
pub fn length_bucket(length: f64) -> usize {
    let l = length.clamp(1.0, 1e4).log10();
    ((l / 4.0 * LENGTH_BUCKETS as f64).floor() as usize).min(LENGTH_BUCKETS - 1)
}

pub fn degree_index(deg: usize) -> usize {
    deg.min(DEGREE_CAP)
}

/// Kernel slot for grid offset `(a, b)` with `a, b` in `-1..=1`.
pub fn kernel_slot(a: i64, b: i64) -> usize {
    ((a + 1) * 3 + (b + 1)) as usize
}

/// Whether any cell of the 3x3 neighborhood of `cell` is in `occupied`.
pub fn post_indicator(occupied: &HashSet<(usize, usize)>, cell: (usize, usize), n_x: usize, n_y: usize) -> bool {
    neighborhood(cell, n_x, n_y).any(|(_, nb)| occupied.contains(&nb))
}

/// In-bounds cells `(x + a, y + b)` with their kernel slot.
fn neighborhood(cell: (usize, usize), n_x: usize, n_y: usize) -> impl Iterator<Item = (usize, (usize, usize))> {
    let (x, y) = (cell.0 as i64, cell.1 as i64);
    (-1..=1i64).flat_map(move |a| {
        (-1..=1i64).filter_map(move |b| {
            let (nx, ny) = (x + a, y + b);
            (nx >= 0 && ny >= 0 && (nx as usize) < n_x && (ny as usize) < n_y)
                .then(|| (kernel_slot(a, b), (nx as usize, ny as usize)))
        })
    })
}

/// Row-gather plans for the 3x3 convolution: for each kernel slot, entries copying
/// `source[(x+a, y+b)]` into output row `t` for every target cell `targets[t] = (x, y)`.
/// Out-of-bounds or empty sources are skipped, which is zero padding.
pub fn conv_plan<T: Scalar>(
    targets: &[(usize, usize)],
    n_x: usize,
    n_y: usize,
    source_row: impl Fn((usize, usize)) -> Option<usize>,
) -> Vec<(usize, Vec<SparseEntry<T>>)> {
    let mut plan: Vec<Vec<SparseEntry<T>>> = vec![Vec::new(); 9];
    for (t, &cell) in targets.iter().enumerate() {
        for (slot, nb) in neighborhood(cell, n_x, n_y) {
            if let Some(src) = source_row(nb) {
                plan[slot].push(SparseEntry {
                    out_row: t as u32,
                    src_row: src as u32,
                    weight: T::one(),
                });
            }
        }
    }
    plan.into_iter().enumerate().filter(|(_, e)| !e.is_empty()).collect()
}

/// `sum_slot gather_slot(src) W_slot^T`.
pub fn diffuse<T: Scalar>(
    g: &mut Graph<T>,
    kernels: &[Var],
    src: Var,
    out_rows: usize,
    plan: &[(usize, Vec<SparseEntry<T>>)],
) -> Var {
    let d = g.shape(src).1;
    let mut acc: Option<Var> = None;
    for (slot, entries) in plan {
        let shifted = g.sparse(src, out_rows, entries.clone());
        let term = g.matmul_t(shifted, kernels[*slot]);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::zeros(out_rows, d)))
}

/// `[d, heads]` 0/1 matrix summing each head's column slice.
pub fn head_sum_matrix<T: Scalar>(d: usize, heads: usize) -> Tensor<T> {
    let dh = d / heads;
    let mut m = Tensor::zeros(d, heads);
    for c in 0..d {
        m.set(c, c / dh, T::one());
    }
    m
}

/// Groups edges `(dst, src)` sorted by `dst` into `(start, len)` runs.
fn runs(keys: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, &k) in keys.iter().enumerate() {
        match out.last_mut() {
            Some(last) if keys[last.0] == k => last.1 += 1,
            _ => out.push((i, 1)),
        }
    }
    out
}

/// Per-head attention from `queries[dst]` to `items[src]` along `edges` (sorted by dst),
/// aggregated into `out_rows` rows. Returns `(output, alpha [E, heads])`.
pub(crate) fn edge_attention<T: Scalar>(
    g: &mut Graph<T>,
    scores_in: Var,
    values_per_edge: Var,
    dst: &[usize],
    out_rows: usize,
    head_sum: Var,
) -> (Var, Var) {
    let scores = g.matmul(scores_in, head_sum);
    let alpha = g.group_softmax(scores, runs(dst));
    let alpha_wide = g.matmul_t(alpha, head_sum);
    let msg = g.mul(alpha_wide, values_per_edge);
    let entries = dst
        .iter()
        .enumerate()
        .map(|(e, &o)| SparseEntry {
            out_row: o as u32,
            src_row: e as u32,
            weight: T::one(),
        })
        .collect();
    (g.sparse(msg, out_rows, entries), alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub d: usize,
    pub heads: usize,
    pub num_road_types: usize,
    pub num_categories: usize,
    pub use_fine: bool,
    pub use_coarse: bool,
}

/// Precomputed, parameter-free inputs of the environment module for one network.
#[derive(Debug, Clone)]
pub struct EnvInputs<T> {
    pub num_segments: usize,
    type_idx: Vec<usize>,
    length_idx: Vec<usize>,
    in_idx: Vec<usize>,
    out_idx: Vec<usize>,
    fine: Tensor<T>,
    /// Fine attention edges `(i, j)`, `j` adjacent to `i`, sorted by `i`.
    gat_dst: Vec<usize>,
    gat_src: Vec<usize>,
    clusters: Tensor<T>,
    /// Valid (category, cell) pairs touched by some segment.
    pairs: Vec<(usize, (usize, usize))>,
    plan: Vec<(usize, Vec<SparseEntry<T>>)>,
    /// Segment-to-pair attention edges sorted by segment.
    coarse_dst: Vec<usize>,
    coarse_src: Vec<usize>,
}

impl<T: Scalar> EnvInputs<T> {
    pub fn new(net: &RoadNetwork, sem: &SemanticFeatures, cfg: &EnvConfig) -> Result<Self> {
        let d = cfg.d;
        if sem.fine.len() != net.len() {
            return Err(Error::Config(format!(
                "{} fine vectors for {} segments",
                sem.fine.len(),
                net.len()
            )));
        }
        if sem.dim != d || sem.fine.iter().any(|v| v.len() != d) || sem.clusters.iter().any(|c| c.values.len() != d) {
            return Err(Error::Config(format!("semantic vectors must have dimension {d}")));
        }
        let n = net.len();
        let segs = net.segments();
        let type_idx = segs
            .iter()
            .map(|s| s.road_type.min(cfg.num_road_types))
            .collect();
        let length_idx = segs.iter().map(|s| length_bucket(s.length)).collect();
        let in_idx = segs.iter().map(|s| degree_index(s.in_degree)).collect();
        let out_idx = segs.iter().map(|s| degree_index(s.out_degree)).collect();
        let fine = Tensor::from_vec(
            n,
            d,
            sem.fine.iter().flatten().map(|&x| T::of(x as f64)).collect(),
        );

        let mut gat_dst = Vec::new();
        let mut gat_src = Vec::new();
        for i in 0..n {
            for j in net.adjacent(i) {
                gat_dst.push(i);
                gat_src.push(j);
            }
        }

        let grid = &sem.grid;
        let mut cluster_row: HashMap<(usize, (usize, usize)), usize> = HashMap::new();
        let mut occupied: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); cfg.num_categories];
        let mut data = Vec::with_capacity(sem.clusters.len() * d);
        for (k, cl) in sem.clusters.iter().enumerate() {
            if cl.category >= cfg.num_categories {
                return Err(Error::Config(format!("cluster category {} out of range", cl.category)));
            }
            cluster_row.insert((cl.category, cl.cell), k);
            occupied[cl.category].insert(cl.cell);
            data.extend(cl.values.iter().map(|&x| T::of(x as f64)));
        }
        let clusters = Tensor::from_vec(sem.clusters.len(), d, data);

        let mut pair_index: HashMap<(usize, (usize, usize)), usize> = HashMap::new();
        let mut pairs = Vec::new();
        let mut coarse_dst = Vec::new();
        let mut coarse_src = Vec::new();
        for i in 0..n {
            let m = net.midpoint(i);
            let cell = grid.grid_cell(m[0], m[1]);
            for (c, occ) in occupied.iter().enumerate() {
                if !post_indicator(occ, cell, grid.n_x, grid.n_y) {
                    continue;
                }
                let p = *pair_index.entry((c, cell)).or_insert_with(|| {
                    pairs.push((c, cell));
                    pairs.len() - 1
                });
                coarse_dst.push(i);
                coarse_src.push(p);
            }
        }
        let targets: Vec<(usize, usize)> = pairs.iter().map(|p| p.1).collect();
        let cats: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        // One plan per category would split the gather; instead look up each target's own category.
        let mut plan: Vec<Vec<SparseEntry<T>>> = vec![Vec::new(); 9];
        for (t, (&cell, &c)) in targets.iter().zip(&cats).enumerate() {
            for (slot, nb) in neighborhood(cell, grid.n_x, grid.n_y) {
                if let Some(&src) = cluster_row.get(&(c, nb)) {
                    plan[slot].push(SparseEntry {
                        out_row: t as u32,
                        src_row: src as u32,
                        weight: T::one(),
                    });
                }
            }
        }
        let plan = plan.into_iter().enumerate().filter(|(_, e)| !e.is_empty()).collect();

        Ok(Self {
            num_segments: n,
            type_idx,
            length_idx,
            in_idx,
            out_idx,
            fine,
            gat_dst,
            gat_src,
            clusters,
            pairs,
            plan,
            coarse_dst,
            coarse_src,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Fine attention edges as `(segment, neighbor)`.
    pub fn fine_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.gat_dst.iter().copied().zip(self.gat_src.iter().copied())
    }

    /// Coarse attention edges as `(segment, (category, cell))`.
    pub fn coarse_edges(&self) -> impl Iterator<Item = (usize, (usize, (usize, usize)))> + '_ {
        self.coarse_dst
            .iter()
            .zip(&self.coarse_src)
            .map(|(&s, &p)| (s, self.pairs[p]))
    }
}

/// Parameter handles of the environment module.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub cfg: EnvConfig,
    type_table: ParamId,
    length_table: ParamId,
    in_table: ParamId,
    out_table: ParamId,
    gat_w_r: ParamId,
    gat_w_p: ParamId,
    gat_a: ParamId,
    kernels: Vec<ParamId>,
    category: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    gate_fine: Linear,
    gate_coarse: Linear,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EnvTrace {
    pub base: Var,
    pub fine: Option<Var>,
    pub coarse: Option<Var>,
    pub fused: Var,
    /// `[fine edges, heads]`.
    pub fine_alpha: Option<Var>,
    /// `[coarse edges, heads]`.
    pub coarse_alpha: Option<Var>,
    /// Diffused cluster features per pair.
    pub diffused: Option<Var>,
}

impl EnvModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: EnvConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("d={d} not divisible by {} heads", cfg.heads)));
        }
        let type_table = store.add_uniform("env.base.road_type", cfg.num_road_types + 1, d, d, rng);
        let length_table = store.add_uniform("env.base.length", LENGTH_BUCKETS, d, d, rng);
        let in_table = store.add_uniform("env.base.in_degree", DEGREE_CAP + 1, d, d, rng);
        let out_table = store.add_uniform("env.base.out_degree", DEGREE_CAP + 1, d, d, rng);
        let gat_w_r = store.add_uniform("env.cross_gat.W_r", d, d, d, rng);
        let gat_w_p = store.add_uniform("env.cross_gat.W_p", d, d, d, rng);
        let gat_a = store.add_zeros("env.cross_gat.a", 1, d);
        let kernels = (0..9)
            .map(|k| store.add_uniform(format!("env.diffuse.W{k}"), d, d, 9 * d, rng))
            .collect();
        let category = store.add_uniform("env.coarse.category", cfg.num_categories.max(1), d, d, rng);
        let w_q = store.add_uniform("env.coarse.W_q", d, d, d, rng);
        let w_k = store.add_uniform("env.coarse.W_k", d, 2 * d, 2 * d, rng);
        let w_v = store.add_uniform("env.coarse.W_v", d, 2 * d, 2 * d, rng);
        let gate_fine = Linear::new(store, "env.fuse.fine", 2 * d, d, true, rng);
        let gate_coarse = Linear::new(store, "env.fuse.coarse", 2 * d, d, true, rng);
        Ok(Self {
            cfg,
            type_table,
            length_table,
            in_table,
            out_table,
            gat_w_r,
            gat_w_p,
            gat_a,
            kernels,
            category,
            w_q,
            w_k,
            w_v,
            gate_fine,
            gate_coarse,
        })
    }

    /// Attribute embedding for every segment, `[N, d]`.
    pub fn base<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inp: &EnvInputs<T>) -> Var {
        let mut acc: Option<Var> = None;
        for (table, idx) in [
            (self.type_table, &inp.type_idx),
            (self.length_table, &inp.length_idx),
            (self.in_table, &inp.in_idx),
            (self.out_table, &inp.out_idx),
        ] {
            let t = g.param(store, table);
            let rows = g.gather(t, idx);
            acc = Some(match acc {
                Some(a) => g.add(a, rows),
                None => rows,
            });
        }
        acc.expect("four tables")
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inp: &EnvInputs<T>) -> EnvTrace {
        let n = inp.num_segments;
        let d = self.cfg.d;
        let head_sum = g.constant(head_sum_matrix(d, self.cfg.heads));
        let base = self.base(g, store, inp);

        let (fine, fine_alpha) = if self.cfg.use_fine {
            let w_p = g.param(store, self.gat_w_p);
            let p = g.constant(inp.fine.clone());
            let wp_p = g.matmul_t(p, w_p);
            if inp.gat_dst.is_empty() {
                (Some(wp_p), None)
            } else {
                let w_r = g.param(store, self.gat_w_r);
                let a = g.param(store, self.gat_a);
                let wr_r = g.matmul_t(base, w_r);
                let q = g.gather(wr_r, &inp.gat_dst);
                let kv = g.gather(wp_p, &inp.gat_src);
                let s = g.add(q, kv);
                let s = g.leaky_relu(s, T::of(GAT_SLOPE));
                let s = g.mul_row(s, a);
                let (agg, alpha) = edge_attention(g, s, kv, &inp.gat_dst, n, head_sum);
                (Some(g.add(wp_p, agg)), Some(alpha))
            }
        } else {
            (None, None)
        };

        let (coarse, coarse_alpha, diffused) = if self.cfg.use_coarse && !inp.pairs.is_empty() {
            let kernels: Vec<Var> = self.kernels.iter().map(|&k| g.param(store, k)).collect();
            let src = g.constant(inp.clusters.clone());
            let diffused = diffuse(g, &kernels, src, inp.pairs.len(), &inp.plan);
            let table = g.param(store, self.category);
            let cats: Vec<usize> = inp.pairs.iter().map(|p| p.0).collect();
            let e = g.gather(table, &cats);
            let kv_in = g.concat_cols(&[diffused, e]);
            let w_k = g.param(store, self.w_k);
            let w_v = g.param(store, self.w_v);
            let w_q = g.param(store, self.w_q);
            let k = g.matmul_t(kv_in, w_k);
            let v = g.matmul_t(kv_in, w_v);
            let q = g.matmul_t(base, w_q);
            let qe = g.gather(q, &inp.coarse_dst);
            let ke = g.gather(k, &inp.coarse_src);
            let ve = g.gather(v, &inp.coarse_src);
            let s = g.mul(qe, ke);
            let (agg, alpha) = edge_attention(g, s, ve, &inp.coarse_dst, n, head_sum);
            (Some(agg), Some(alpha), Some(diffused))
        } else {
            (None, None, None)
        };

        let mut fused = base;
        for (p, gate) in [(fine, &self.gate_fine), (coarse, &self.gate_coarse)] {
            if let Some(p) = p {
                let x = g.concat_cols(&[p, base]);
                let z = gate.forward(g, store, x);
                let z = g.tanh(z);
                let term = g.mul(p, z);
                fused = g.add(fused, term);
            }
        }
        EnvTrace {
            base,
            fine,
            coarse,
            fused,
            fine_alpha,
            coarse_alpha,
            diffused,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.type_table,
            self.length_table,
            self.in_table,
            self.out_table,
            self.gat_w_r,
            self.gat_w_p,
            self.gat_a,
            self.category,
            self.w_q,
            self.w_k,
            self.w_v,
            self.gate_fine.weight,
            self.gate_coarse.weight,
        ];
        v.extend(&self.kernels);
        v.extend(self.gate_fine.bias);
        v.extend(self.gate_coarse.bias);
        v
    }
}
