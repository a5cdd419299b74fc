//! Self-supervised pretraining: span masking, view augmentations, MLM and contrastive
//! losses, and the training loop.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::autodiff::{Archive, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{SegmentId, Trajectory};
use crate::model::{Context, Model, View};
use crate::scalar::Scalar;

pub const MASK_RATIO: f64 = 0.15;
pub const MEAN_SPAN: f64 = 3.0;
pub const CROP_RANGE: (f64, f64) = (0.05, 0.15);
pub const PERTURB_PROB: f64 = 0.15;
pub const PERTURB_RANGE: (f64, f64) = (0.15, 0.30);

/// Seed for a given worker and epoch: `base ^ (worker << 32) ^ epoch`.
pub fn derive_seed(base: u64, worker: u64, epoch: u64) -> u64 {
    base ^ (worker << 32) ^ epoch
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// `(start, length)`, sorted by start.
    pub spans: Vec<(usize, usize)>,
    pub targets: BTreeMap<usize, SegmentId>,
}

impl MaskPlan {
    pub fn positions(&self) -> Vec<usize> {
        self.targets.keys().copied().collect()
    }

    pub fn num_masked(&self) -> usize {
        self.targets.len()
    }
}

/// Number of positions covered by the spans of a sequence of length `n`.
pub fn mask_budget(n: usize) -> usize {
    ((MASK_RATIO * n as f64).floor() as usize).max(1)
}

/// Samples non-overlapping spans with geometric lengths (mean 3) until the budget is covered.
pub fn span_mask(segments: &[SegmentId], rng: &mut impl Rng) -> Result<MaskPlan> {
    let n = segments.len();
    if n < 4 {
        return Err(Error::Trajectory(format!("span masking needs at least 4 points, got {n}")));
    }
    let geo = Geometric::new(1.0 / MEAN_SPAN).expect("valid probability");
    let mut free = vec![true; n];
    let mut remaining = mask_budget(n);
    let mut spans = Vec::new();
    while remaining > 0 {
        let drawn = (geo.sample(rng) as usize).saturating_add(1);
        let mut len = drawn.min(remaining).min(n);
        loop {
            let starts: Vec<usize> = (0..=n - len)
                .filter(|&s| free[s..s + len].iter().all(|&f| f))
                .collect();
            if let Some(&s) = starts.get(rng.random_range(0..starts.len().max(1))) {
                free[s..s + len].iter_mut().for_each(|f| *f = false);
                spans.push((s, len));
                remaining -= len;
                break;
            }
            // budget < n guarantees a free single position exists
            len -= 1;
        }
    }
    spans.sort_unstable();
    let targets = spans
        .iter()
        .flat_map(|&(s, l)| (s..s + l).map(|i| (i, segments[i])))
        .collect();
    Ok(MaskPlan { spans, targets })
}

/// Drops `max(1, round(u n))` points from the head or tail; `None` if fewer than 2 would remain.
pub fn crop_with(t: &Trajectory, u: f64, from_head: bool) -> Option<Trajectory> {
    let n = t.len();
    let k = ((u * n as f64).round() as usize).max(1);
    if n < k + 2 {
        return None;
    }
    Some(if from_head { t.slice(k..n) } else { t.slice(0..n - k) })
}

/// Random crop; trajectories shorter than 4 points are returned unchanged.
pub fn crop_augment(t: &Trajectory, rng: &mut impl Rng) -> Trajectory {
    if t.len() < 4 {
        return t.clone();
    }
    let u = rng.random_range(CROP_RANGE.0..=CROP_RANGE.1);
    let head = rng.random_bool(0.5);
    crop_with(t, u, head).unwrap_or_else(|| t.clone())
}

/// Per-segment mean time gap `t_{i+1} - t_i`, attributed to the segment at `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTimes {
    pub per_segment: Vec<Option<f64>>,
    pub global: f64,
}

impl SegmentTimes {
    pub fn from_trajectories<'a>(num_segments: usize, trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut sum = vec![0.0; num_segments];
        let mut cnt = vec![0usize; num_segments];
        for t in trajs {
            for w in t.points().windows(2) {
                if w[0].0 < num_segments {
                    sum[w[0].0] += (w[1].1 - w[0].1) as f64;
                    cnt[w[0].0] += 1;
                }
            }
        }
        let total: usize = cnt.iter().sum();
        let global = if total == 0 {
            0.0
        } else {
            sum.iter().sum::<f64>() / total as f64
        };
        let per_segment = sum
            .iter()
            .zip(&cnt)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        Self { per_segment, global }
    }

    pub fn get(&self, seg: SegmentId) -> f64 {
        self.per_segment.get(seg).copied().flatten().unwrap_or(self.global)
    }

    /// Timestamps for a segment path starting at `departure`, advancing by each segment's
    /// mean gap.
    pub fn synthesize(&self, path: &[SegmentId], departure: i64) -> Trajectory {
        let mut t = departure as f64;
        let mut pts = Vec::with_capacity(path.len());
        for &s in path {
            pts.push((s, t.round() as i64));
            t += self.get(s).max(0.0);
        }
        Trajectory::new(pts)
    }
}

/// Pulls a gap toward the segment average: `dt - r (dt - avg)`.
pub fn perturb_gap(dt: f64, avg: f64, r: f64) -> f64 {
    dt - r * (dt - avg)
}

/// Perturbs about 15% of the inter-point gaps and rebuilds timestamps from the departure.
pub fn temporal_perturb(t: &Trajectory, rng: &mut impl Rng, avg: &SegmentTimes) -> Trajectory {
    let pts = t.points();
    let Some(&(_, t0)) = pts.first() else {
        return t.clone();
    };
    let mut out = Vec::with_capacity(pts.len());
    let mut clock = t0;
    out.push(pts[0]);
    for w in pts.windows(2) {
        let dt = (w[1].1 - w[0].1) as f64;
        let gap = if rng.random_bool(PERTURB_PROB) {
            let r = rng.random_range(PERTURB_RANGE.0..=PERTURB_RANGE.1);
            perturb_gap(dt, avg.get(w[0].0), r)
        } else {
            dt
        };
        clock += gap.max(0.0).round() as i64;
        out.push((w[1].0, clock));
    }
    Trajectory::new(out)
}

/// Masked-token loss: cross-entropy averaged per trajectory, then over trajectories.
/// `owner[i]` names the trajectory of logit row `i`.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], owner: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::input("batch has no masked positions"));
    }
    if targets.len() != owner.len() || g.shape(logits).0 != targets.len() {
        return Err(Error::Shape("mlm logits, targets and owners disagree".into()));
    }
    let mut per: BTreeMap<usize, usize> = BTreeMap::new();
    for &o in owner {
        *per.entry(o).or_default() += 1;
    }
    let b = per.len() as f64;
    let weights = owner.iter().map(|o| T::of(1.0 / (per[o] as f64 * b))).collect();
    Ok(g.softmax_xent(logits, targets.to_vec(), weights))
}

/// NT-Xent over `z = [a_1..a_B, b_1..b_B]` with cosine similarity; row `i` is paired with
/// row `i + B` (mod `2B`).
pub fn ntxent_loss<T: Scalar>(g: &mut Graph<T>, z: Var, tau: f64) -> Result<Var> {
    let (rows, _) = g.shape(z);
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::input(format!("contrastive batch needs 2B > 0 rows, got {rows}")));
    }
    let b = rows / 2;
    let zn = g.row_normalize(z);
    let sim = g.matmul_t(zn, zn);
    let sim = g.scale(sim, T::of(1.0 / tau));
    let mut diag = Tensor::zeros(rows, rows);
    for i in 0..rows {
        diag.set(i, i, T::neg_infinity());
    }
    let diag = g.constant(diag);
    let logits = g.add(sim, diag);
    let targets = (0..rows).map(|i| (i + b) % rows).collect();
    let w = vec![T::of(1.0 / rows as f64); rows];
    Ok(g.softmax_xent(logits, targets, w))
}

/// Equal-weight sum of the two objectives.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, mlm: Var, cl: Var) -> Var {
    let s = g.add(mlm, cl);
    g.scale(s, T::of(0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub tau: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 2e-4,
            min_lr: 1e-6,
            warmup_epochs: 5,
            epochs: 50,
            tau: 0.05,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, num_train: usize) -> WarmupCosine {
        let per_epoch = num_train.div_ceil(self.batch_size.max(1)).max(1);
        WarmupCosine {
            peak: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_epochs * per_epoch,
            total_steps: self.epochs * per_epoch,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub mlm: f64,
    pub cl: f64,
    pub lr: f64,
}

/// Appends `step,loss,mlm,cl,lr` rows.
pub fn write_log_header(w: &mut csv::Writer<impl std::io::Write>) -> Result<()> {
    w.write_record(["step", "loss", "mlm", "cl", "lr"])?;
    Ok(())
}

pub fn write_log_row(w: &mut csv::Writer<impl std::io::Write>, s: &StepStats) -> Result<()> {
    w.write_record([
        s.step.to_string(),
        s.loss.to_string(),
        s.mlm.to_string(),
        s.cl.to_string(),
        s.lr.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io("training log", e))?;
    Ok(())
}

pub struct Pretrainer<T> {
    pub cfg: TrainConfig,
    pub times: SegmentTimes,
    pub opt: AdamW<T>,
    pub step: usize,
    pub epoch: usize,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(cfg: TrainConfig, times: SegmentTimes) -> Self {
        let opt = AdamW::new(cfg.optimizer());
        Self {
            cfg,
            times,
            opt,
            step: 0,
            epoch: 0,
        }
    }

    /// Builds the graph for one batch and returns `(total, mlm, cl)` without updating.
    pub fn losses(
        &self,
        g: &mut Graph<T>,
        model: &Model<T>,
        ctx: &Context<T>,
        batch: &[&Trajectory],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Var)> {
        let max_len = model.cfg.max_len;
        let mut mlm_views = Vec::new();
        let mut targets = Vec::new();
        let mut owner = Vec::new();
        for (k, t) in batch.iter().enumerate() {
            let t = t.truncated(max_len);
            if t.len() < 4 {
                debug!("trajectory of {} points skipped for masking", t.len());
                continue;
            }
            let plan = span_mask(&t.segments(), rng)?;
            for &s in plan.targets.values() {
                targets.push(s);
                owner.push(k);
            }
            mlm_views.push(View {
                masked: plan.positions(),
                ..View::of(&t)
            });
        }
        let mut a = Vec::with_capacity(batch.len() * 2);
        let mut b = Vec::with_capacity(batch.len());
        for t in batch {
            let t = t.truncated(max_len);
            a.push(View::of(&crop_augment(&t, rng)));
            b.push(View::of(&temporal_perturb(&t, rng, &self.times)));
        }
        a.extend(b);

        let dropout = model.cfg.dropout > 0.0;
        let tokens = model.tokens(g, ctx);
        let enc = model.encode(g, ctx, tokens, &mlm_views, dropout.then_some(&mut *rng))?;
        let mut rows = Vec::with_capacity(targets.len());
        let mut off = 0;
        for v in &mlm_views {
            rows.extend(v.masked.iter().map(|&m| enc.step_rows[off + m]));
            off += v.len();
        }
        let states = g.gather(enc.states, &rows);
        let logits = model.vocab_logits(g, states);
        let mlm = mlm_loss(g, logits, &targets, &owner)?;

        let enc = model.encode(g, ctx, tokens, &a, dropout.then_some(&mut *rng))?;
        let z = enc.cls(g);
        let cl = ntxent_loss(g, z, self.cfg.tau)?;
        Ok((combined_loss(g, mlm, cl), mlm, cl))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(
        &mut self,
        model: &mut Model<T>,
        ctx: &Context<T>,
        batch: &[&Trajectory],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepStats> {
        let mut g = Graph::new();
        let (loss, mlm, cl) = self.losses(&mut g, model, ctx, batch, rng)?;
        let stats = StepStats {
            step: self.step,
            loss: g.value(loss).item().as_f64(),
            mlm: g.value(mlm).item().as_f64(),
            cl: g.value(cl).item().as_f64(),
            lr,
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {} epoch {}: loss {} (mlm {}, cl {}, lr {lr})",
                self.step, self.epoch, stats.loss, stats.mlm, stats.cl
            )));
        }
        let mut grads = g.backward(loss);
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("step {}: non-finite gradient", self.step)));
        }
        self.opt.step(&mut model.store, &mut grads, lr);
        self.step += 1;
        Ok(stats)
    }

    /// Runs one epoch over `train` (shuffled with the derived epoch seed).
    pub fn run_epoch(
        &mut self,
        model: &mut Model<T>,
        ctx: &Context<T>,
        train: &[Trajectory],
        on_step: &mut dyn FnMut(&StepStats) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        if train.is_empty() {
            return Err(Error::input("empty training set"));
        }
        let schedule = self.cfg.schedule(train.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 0, self.epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size.max(1)) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = schedule.lr(self.step);
            let s = self.train_step(model, ctx, &batch, lr, &mut rng)?;
            on_step(&s)?;
            out.push(s);
        }
        let mean = out.iter().map(|s| s.loss).sum::<f64>() / out.len() as f64;
        info!("epoch {} done: mean loss {mean:.4}", self.epoch);
        self.epoch += 1;
        Ok(out)
    }

    /// Trains until `cfg.epochs` epochs have run in total.
    pub fn train(
        &mut self,
        model: &mut Model<T>,
        ctx: &Context<T>,
        train: &[Trajectory],
        on_step: &mut dyn FnMut(&StepStats) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        let mut all = Vec::new();
        while self.epoch < self.cfg.epochs {
            all.extend(self.run_epoch(model, ctx, train, on_step)?);
        }
        Ok(all)
    }

    /// Parameters, optimizer moments, epoch and step counters.
    pub fn checkpoint(&self, model: &Model<T>) -> Archive<T> {
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "train": self.cfg,
            "times": self.times,
        });
        let mut a = model.to_archive(meta);
        a.tensors.extend(self.opt.export(&model.store));
        a
    }

    pub fn resume(archive: &Archive<T>) -> Result<(Model<T>, Self)> {
        let model = Model::from_archive(archive)?;
        let cfg: TrainConfig = serde_json::from_value(archive.meta["train"].clone())?;
        let times: SegmentTimes = serde_json::from_value(archive.meta["times"].clone())?;
        let mut p = Self::new(cfg, times);
        p.epoch = serde_json::from_value(archive.meta["epoch"].clone())?;
        p.step = serde_json::from_value(archive.meta["step"].clone())?;
        p.opt.import(&model.store, archive, p.step as u64);
        Ok((model, p))
    }
}
