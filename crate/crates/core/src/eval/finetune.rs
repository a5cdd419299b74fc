//! Task heads, task datasets, end-to-end fine-tuning and per-task metrics.

use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::metrics::{acc_at_k, f1_scores, kendall_tau, rank_classes, regression, spearman_rho};
use super::ranking::PrInstance;
use crate::autodiff::nn::Mlp;
use crate::autodiff::optim::AdamW;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{RoadNetwork, SegmentId, Trajectory};
use crate::model::{Context, Model, View};
use crate::pretrain::{derive_seed, SegmentTimes, TrainConfig};
use crate::scalar::Scalar;

pub const LANE_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rlp,
    Tdp,
    Tte,
    Pr,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rlp, Task::Tdp, Task::Tte, Task::Pr];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rlp => "rlp",
            Task::Tdp => "tdp",
            Task::Tte => "tte",
            Task::Pr => "pr",
        }
    }

    pub fn output_dim(self, num_segments: usize) -> usize {
        match self {
            Task::Rlp => LANE_CLASSES,
            Task::Tdp => num_segments,
            Task::Tte | Task::Pr => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::input(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    Segments(Vec<SegmentId>),
    Views(Vec<View>),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Inputs::Segments(s) => s.len(),
            Inputs::Views(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Inputs {
        match self {
            Inputs::Segments(s) => Inputs::Segments(idx.iter().map(|&i| s[i]).collect()),
            Inputs::Views(v) => Inputs::Views(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub inputs: Inputs,
    pub targets: Targets,
    /// Instance id of each row (path ranking only).
    pub groups: Vec<usize>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn check(&self) -> Result<()> {
        let ok = matches!(
            (self.task, &self.inputs, &self.targets),
            (Task::Rlp, Inputs::Segments(_), Targets::Classes(_))
                | (Task::Tdp, Inputs::Views(_), Targets::Classes(_))
                | (Task::Tte | Task::Pr, Inputs::Views(_), Targets::Values(_))
        );
        if !ok || self.inputs.len() != self.targets.len() {
            return Err(Error::input(format!("{} data does not match its task", self.task)));
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> TaskData {
        TaskData {
            task: self.task,
            inputs: self.inputs.select(idx),
            targets: self.targets.select(idx),
            groups: if self.groups.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.groups[i]).collect()
            },
        }
    }
}

/// Lane-count classification over segments with 1 to 4 lanes; others are dropped.
pub fn rlp_data(net: &RoadNetwork, segments: &[SegmentId]) -> TaskData {
    let (mut ids, mut labels) = (Vec::new(), Vec::new());
    for &s in segments {
        if let Some(l @ 1..=4) = net.segment(s).lanes {
            ids.push(s);
            labels.push(l as usize - 1);
        }
    }
    TaskData {
        task: Task::Rlp,
        inputs: Inputs::Segments(ids),
        targets: Targets::Classes(labels),
        groups: Vec::new(),
    }
}

/// Number of leading points fed to destination prediction.
pub fn prefix_len(n: usize) -> usize {
    n.div_ceil(2)
}

fn usable<'a>(trajs: &'a [Trajectory], max_len: usize, what: &str) -> Vec<&'a Trajectory> {
    let keep: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= 2 && t.len() <= max_len).collect();
    if keep.len() < trajs.len() {
        warn!("{what}: dropped {} trajectories outside [2, {max_len}] points", trajs.len() - keep.len());
    }
    keep
}

/// Destination prediction from the first half of each trajectory.
pub fn tdp_data(trajs: &[Trajectory], max_len: usize) -> TaskData {
    let (mut views, mut labels) = (Vec::new(), Vec::new());
    for t in usable(trajs, max_len, "tdp") {
        views.push(View::of(&t.slice(0..prefix_len(t.len()))));
        labels.push(t.destination());
    }
    TaskData {
        task: Task::Tdp,
        inputs: Inputs::Views(views),
        targets: Targets::Classes(labels),
        groups: Vec::new(),
    }
}

/// Travel time in minutes; inputs only see the departure time.
pub fn tte_data(trajs: &[Trajectory], max_len: usize) -> TaskData {
    let (mut views, mut labels) = (Vec::new(), Vec::new());
    for t in usable(trajs, max_len, "tte") {
        views.push(View::departure_only(t));
        labels.push(t.duration() as f64 / 60.0);
    }
    TaskData {
        task: Task::Tte,
        inputs: Inputs::Views(views),
        targets: Targets::Values(labels),
        groups: Vec::new(),
    }
}

/// One row per path; every path is timed with segment means from its instance's departure.
pub fn pr_data(instances: &[PrInstance], times: &SegmentTimes, max_len: usize) -> TaskData {
    let (mut views, mut labels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for (g, inst) in instances.iter().enumerate() {
        if inst.paths.iter().any(|p| p.len() > max_len) {
            continue;
        }
        for (p, &s) in inst.paths.iter().zip(&inst.scores) {
            views.push(View::of(&times.synthesize(p, inst.departure)));
            labels.push(s);
            groups.push(g);
        }
    }
    TaskData {
        task: Task::Pr,
        inputs: Inputs::Views(views),
        targets: Targets::Values(labels),
        groups,
    }
}

/// MLP `d -> 2d -> out` under `head.<task>`, plus a fixed affine map for regression labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task: Task,
    /// Regression outputs are `raw * scale + shift`.
    pub shift: f64,
    pub scale: f64,
}

/// A task head bound to parameters in a model's store.
#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub spec: TaskHead,
    pub mlp: Mlp,
}

impl BoundHead {
    /// Creates (or reuses, when already present) the head parameters in `model.store`.
    pub fn attach<T: Scalar>(model: &mut Model<T>, spec: TaskHead, seed: u64) -> Self {
        let name = format!("head.{}", spec.task);
        let d = model.cfg.d;
        let out = spec.task.output_dim(model.cfg.num_segments);
        let hidden0 = model.store.id(&format!("{name}.0.W"));
        let mlp = match (hidden0, model.store.id(&format!("{name}.0.b")), model.store.id(&format!("{name}.1.W")), model.store.id(&format!("{name}.1.b"))) {
            (Some(w0), Some(b0), Some(w1), Some(b1)) => Mlp {
                hidden: crate::autodiff::nn::Linear { weight: w0, bias: Some(b0) },
                output: crate::autodiff::nn::Linear { weight: w1, bias: Some(b1) },
            },
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Mlp::new(&mut model.store, &name, d, 2 * d, out, &mut rng)
            }
        };
        Self { spec, mlp }
    }

    /// Raw head outputs `[rows, out]` for a batch.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        model: &Model<T>,
        ctx: &Context<T>,
        inputs: &Inputs,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let tokens = model.tokens(g, ctx);
        let x = match inputs {
            Inputs::Segments(s) => g.gather(tokens, s),
            Inputs::Views(v) => {
                let enc = model.encode(g, ctx, tokens, v, rng)?;
                enc.cls(g)
            }
        };
        let y = self.mlp.forward(g, &model.store, x);
        Ok(if self.spec.task == Task::Pr { g.sigmoid(y) } else { y })
    }

    /// Task loss on a batch: mean cross-entropy or mean squared error.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, out: Var, targets: &Targets) -> Result<Var> {
        let n = targets.len();
        if n == 0 {
            return Err(Error::input("empty batch"));
        }
        match targets {
            Targets::Classes(c) => Ok(g.softmax_xent(out, c.clone(), vec![T::of(1.0 / n as f64); n])),
            Targets::Values(v) => {
                let y = v.iter().map(|&y| T::of((y - self.spec.shift) / self.spec.scale)).collect();
                let y = g.constant(Tensor::from_vec(n, 1, y));
                let diff = g.sub(out, y);
                let sq = g.mul(diff, diff);
                Ok(g.mean_all(sq))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// Per-row class scores.
    Scores(Vec<Vec<f64>>),
    Values(Vec<f64>),
}

/// Head spec for `data`, fitting the label affine map on regression targets.
pub fn head_for(data: &TaskData) -> TaskHead {
    let (shift, scale) = match (&data.targets, data.task) {
        (Targets::Values(v), Task::Tte) if !v.is_empty() => {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
            (m, if sd > 0.0 { sd } else { 1.0 })
        }
        _ => (0.0, 1.0),
    };
    TaskHead {
        task: data.task,
        shift,
        scale,
    }
}

/// Trains model and head end to end; returns the mean loss of each epoch.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    ctx: &Context<T>,
    head: &BoundHead,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    data.check()?;
    if data.is_empty() {
        return Err(Error::input(format!("no {} training examples", data.task)));
    }
    let schedule = cfg.schedule(data.len());
    let mut opt = AdamW::new(cfg.optimizer());
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = data.subset(chunk);
            let mut g = Graph::new();
            let dropout = model.cfg.dropout > 0.0;
            let out = head.forward(&mut g, model, ctx, &batch.inputs, dropout.then_some(&mut rng))?;
            let loss = head.loss(&mut g, out, &batch.targets)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("{} fine-tuning step {step}: loss {lv}", data.task)));
            }
            let mut grads = g.backward(loss);
            opt.step(&mut model.store, &mut grads, schedule.lr(step));
            step += 1;
            total += lv;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("{} epoch {epoch}: loss {mean:.4}", data.task);
        history.push(mean);
    }
    Ok(history)
}

/// Evaluation-mode predictions in label units.
pub fn predict<T: Scalar>(model: &Model<T>, ctx: &Context<T>, head: &BoundHead, inputs: &Inputs, chunk: usize) -> Result<Predictions> {
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut scores = Vec::new();
    let mut values = Vec::new();
    for part in idx.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let out = head.forward(&mut g, model, ctx, &inputs.select(part), None)?;
        let t = g.value(out);
        for r in 0..t.rows() {
            let row: Vec<f64> = t.row(r).iter().map(|x| x.as_f64()).collect();
            match head.spec.task {
                Task::Rlp | Task::Tdp => scores.push(row),
                Task::Tte | Task::Pr => values.push(row[0] * head.spec.scale + head.spec.shift),
            }
        }
    }
    Ok(match head.spec.task {
        Task::Rlp | Task::Tdp => Predictions::Scores(scores),
        Task::Tte | Task::Pr => Predictions::Values(values),
    })
}

/// Mean per-instance rank correlations; instances whose Spearman is undefined are skipped
/// for that metric.
pub fn ranking_correlations(pred: &[f64], truth: &[f64], groups: &[usize]) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = groups.to_vec();
    order.dedup();
    let (mut tau, mut nt, mut rho, mut nr) = (0.0, 0, 0.0, 0);
    for g in order {
        let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        if rows.len() < 2 {
            continue;
        }
        let p: Vec<f64> = rows.iter().map(|&i| pred[i]).collect();
        let y: Vec<f64> = rows.iter().map(|&i| truth[i]).collect();
        tau += kendall_tau(&p, &y)?;
        nt += 1;
        if let Ok(r) = spearman_rho(&p, &y) {
            rho += r;
            nr += 1;
        }
    }
    if nt == 0 {
        return Err(Error::input("no ranking instance with at least two paths"));
    }
    Ok((tau / nt as f64, if nr == 0 { f64::NAN } else { rho / nr as f64 }))
}

/// Metric report with one key per metric.
pub fn evaluate(data: &TaskData, preds: &Predictions) -> Result<Value> {
    data.check()?;
    match (data.task, preds, &data.targets) {
        (Task::Rlp, Predictions::Scores(s), Targets::Classes(y)) => {
            let top: Vec<usize> = s.iter().map(|r| rank_classes(r)[0]).collect();
            let (ma, mi) = f1_scores(&top, y)?;
            Ok(json!({"Macro-F1": ma, "Micro-F1": mi}))
        }
        (Task::Tdp, Predictions::Scores(s), Targets::Classes(y)) => {
            let ranked: Vec<Vec<usize>> = s.iter().map(|r| rank_classes(r)).collect();
            let top: Vec<usize> = ranked.iter().map(|r| r[0]).collect();
            let (ma, _) = f1_scores(&top, y)?;
            Ok(json!({
                "Acc@1": acc_at_k(&ranked, y, 1)?,
                "Acc@5": acc_at_k(&ranked, y, 5)?,
                "Acc@10": acc_at_k(&ranked, y, 10)?,
                "Macro-F1": ma,
            }))
        }
        (Task::Tte, Predictions::Values(p), Targets::Values(y)) => {
            let r = regression(p, y)?;
            Ok(json!({"MAE": r.mae, "RMSE": r.rmse, "MAPE": r.mape}))
        }
        (Task::Pr, Predictions::Values(p), Targets::Values(y)) => {
            let (tau, rho) = ranking_correlations(p, y, &data.groups)?;
            Ok(json!({"tau": tau, "rho": rho}))
        }
        _ => Err(Error::input(format!("predictions do not match task {}", data.task))),
    }
}
