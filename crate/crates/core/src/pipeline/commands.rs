//! End-to-end commands over a [`RunConfig`]. Each command owns `cfg.out` for its duration
//! and writes a manifest next to its outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{Provider, RunConfig};
use super::manifest::{DirLock, Manifest};
use super::split::split_chronological;
use super::synth::{generate_synthetic_city, SyntheticCitySpec};
use crate::autodiff::Archive;
use crate::error::{Error, Result};
use crate::eval::finetune::{
    evaluate, finetune as run_finetune, head_for, pr_data, predict, rlp_data, tdp_data, tte_data, BoundHead, Task, TaskData,
    TaskHead,
};
use crate::eval::ranking::{build_pr_instances, write_pr_instances};
use crate::eval::retrieval::{build_str_benchmark, str_evaluate};
use crate::geo::{read_network, read_trajectories, write_trajectories, RoadNetwork, SegmentId, Trajectory};
use crate::model::{Context, Model, View};
use crate::poi::{
    all_fine_contexts, build_coarse_prompt, build_fine_prompt, build_semantic_features, read_pois, select_cluster_cells,
    CachedEmbedder, CategoryRegistry, EchoDescriber, EmbeddingCache, MockEmbedder, Poi, SemanticFeatures, TextEmbedder,
};
use crate::pretrain::{write_log_header, write_log_row, Pretrainer, SegmentTimes};
use crate::route::TransitionStats;

pub const EMBED_CHUNK: usize = 256;

/// Output layout under `cfg.out`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.out.clone() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("ingest").join(format!("{name}.traj"))
    }

    pub fn transitions(&self) -> PathBuf {
        self.root.join("ingest").join("transitions.csv")
    }

    pub fn prompts(&self) -> PathBuf {
        self.root.join("describe").join("prompts.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("checkpoint.bin")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("pretrain").join("log.csv")
    }

    pub fn finetuned(&self, task: Task) -> PathBuf {
        self.root.join("finetune").join(format!("{task}.bin"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest.{command}.json"))
    }
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        mkdirs(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn finish(cfg: &RunConfig, command: &str, inputs: &[PathBuf]) -> Result<()> {
    let mut m = Manifest::new(command, cfg.sha256(), cfg.seed);
    m.add_inputs(inputs.iter().map(PathBuf::as_path))?;
    m.write(&Layout::new(cfg).manifest(command))
}

fn data_inputs(cfg: &RunConfig) -> Vec<PathBuf> {
    vec![
        cfg.segments.clone(),
        cfg.edges.clone(),
        cfg.pois.clone(),
        cfg.categories.clone(),
        cfg.trajectories.clone(),
    ]
}

pub fn embedder(cfg: &RunConfig) -> Result<Box<dyn TextEmbedder>> {
    match cfg.provider {
        Provider::Mock => Ok(Box::new(MockEmbedder { dim: cfg.d })),
        #[cfg(feature = "remote")]
        Provider::Remote => Ok(Box::new(crate::poi::RemoteEmbedder::new(
            cfg.remote_endpoint.clone(),
            cfg.remote_model.clone(),
            cfg.d,
            std::env::var("TRAJENV_API_KEY").ok(),
        ))),
        #[cfg(not(feature = "remote"))]
        Provider::Remote => Err(Error::Config("remote provider requires building with the `remote` feature".into())),
    }
}

/// Writes a synthetic city into `dir`.
pub fn synth(dir: &Path, spec: &SyntheticCitySpec, seed: u64) -> Result<Value> {
    let _lock = DirLock::acquire(dir)?;
    let city = generate_synthetic_city(spec, seed)?;
    city.write(dir)?;
    let mut m = Manifest::new("synth", String::new(), seed);
    m.add_inputs(
        ["segments.csv", "edges.csv", "categories.csv", "pois.csv", "trajectories.traj"]
            .iter()
            .map(|f| dir.join(f))
            .collect::<Vec<_>>()
            .iter()
            .map(PathBuf::as_path),
    )?;
    m.write(&dir.join("manifest.synth.json"))?;
    Ok(json!({
        "segments": city.net.len(),
        "edges": city.net.num_edges(),
        "pois": city.pois.len(),
        "trajectories": city.trajectories.len(),
    }))
}

pub struct Dataset {
    pub net: RoadNetwork,
    pub registry: CategoryRegistry,
    pub pois: Vec<Poi>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let net = read_network(&cfg.segments, &cfg.edges)?;
    let registry = CategoryRegistry::read(&cfg.categories)?;
    let pois = read_pois(&cfg.pois, &registry)?;
    Ok(Dataset { net, registry, pois })
}

/// Validates inputs, splits chronologically and records transition statistics.
pub fn ingest(cfg: &RunConfig) -> Result<Value> {
    let _lock = DirLock::acquire(&cfg.out)?;
    let ds = load_dataset(cfg)?;
    let trajs = read_trajectories(&cfg.trajectories, &ds.net)?;
    let n = trajs.len();
    let split = split_chronological(trajs)?;
    let lay = Layout::new(cfg);
    mkdirs(&lay.root.join("ingest"))?;
    write_trajectories(&lay.split("train"), &split.train)?;
    write_trajectories(&lay.split("val"), &split.val)?;
    write_trajectories(&lay.split("test"), &split.test)?;
    let stats = TransitionStats::from_trajectories(&ds.net, &split.train)?;
    stats.write(&lay.transitions())?;
    let contexts = all_fine_contexts(&ds.net, &ds.pois, cfg.delta);
    let report = json!({
        "segments": ds.net.len(),
        "edges": ds.net.num_edges(),
        "pois": ds.pois.len(),
        "trajectories": n,
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
        "segments_with_pois": contexts.iter().filter(|c| !c.is_empty()).count(),
    });
    write_json(&lay.root.join("ingest").join("summary.json"), &report)?;
    finish(cfg, "ingest", &data_inputs(cfg))?;
    Ok(report)
}

/// Emits every prompt and fills the embedding cache.
pub fn describe(cfg: &RunConfig) -> Result<Value> {
    let _lock = DirLock::acquire(&cfg.out)?;
    let ds = load_dataset(cfg)?;
    let lay = Layout::new(cfg);
    mkdirs(&lay.root.join("describe"))?;
    let path = lay.prompts();
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let sem = cfg.semantic();
    let grid = ds.net.grid(cfg.cell_size)?;
    let mut n_fine = 0;
    for (s, ctx) in all_fine_contexts(&ds.net, &ds.pois, cfg.delta).iter().enumerate() {
        let line = json!({"kind": "fine", "segment": s, "prompt": build_fine_prompt(&sem.city, ctx, &ds.registry, sem.delta)});
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        n_fine += 1;
    }
    let mut n_coarse = 0;
    for c in 0..ds.registry.num_primary() {
        for cl in select_cluster_cells(&ds.pois, &grid, c) {
            let line = json!({"kind": "coarse", "category": c, "cell": [cl.cell.0, cl.cell.1],
                "prompt": build_coarse_prompt(&sem.city, &cl, &ds.registry, sem.cell_size)});
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            n_coarse += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let features = semantic_features(cfg, &ds)?;
    finish(cfg, "describe", &data_inputs(cfg))?;
    Ok(json!({"fine_prompts": n_fine, "coarse_prompts": n_coarse, "clusters": features.clusters.len(), "dim": features.dim}))
}

/// Semantic features through the on-disk embedding cache.
pub fn semantic_features(cfg: &RunConfig, ds: &Dataset) -> Result<SemanticFeatures> {
    let provider = embedder(cfg)?;
    let cache = EmbeddingCache::new(&cfg.cache)?;
    let cached = CachedEmbedder {
        inner: provider.as_ref(),
        cache: &cache,
    };
    build_semantic_features(&ds.net, &ds.pois, &ds.registry, &cfg.semantic(), &EchoDescriber, &cached)
}

/// Everything a training or evaluation command needs after `ingest`.
pub struct Prepared {
    pub ds: Dataset,
    pub ctx: Context<f32>,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub times: SegmentTimes,
    pub model_cfg: crate::model::ModelConfig,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let ds = load_dataset(cfg)?;
    let lay = Layout::new(cfg);
    let need = |p: PathBuf| {
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::input(format!("{} missing; run `ingest` first", p.display())))
        }
    };
    let train = read_trajectories(&need(lay.split("train"))?, &ds.net)?;
    let val = read_trajectories(&need(lay.split("val"))?, &ds.net)?;
    let test = read_trajectories(&need(lay.split("test"))?, &ds.net)?;
    let stats = TransitionStats::read(&need(lay.transitions())?, &ds.net)?;
    let sem = semantic_features(cfg, &ds)?;
    let model_cfg = cfg.model(ds.net.len(), ds.net.num_road_types(), ds.registry.num_primary());
    let ctx = Context::new(ds.net.clone(), &sem, &stats, &model_cfg)?;
    let times = SegmentTimes::from_trajectories(ds.net.len(), &train);
    Ok(Prepared {
        ds,
        ctx,
        train,
        val,
        test,
        times,
        model_cfg,
    })
}

/// Pretrains (resuming from an existing checkpoint) and writes the checkpoint after every
/// epoch.
pub fn pretrain(cfg: &RunConfig) -> Result<Value> {
    let _lock = DirLock::acquire(&cfg.out)?;
    let p = prepare(cfg)?;
    let lay = Layout::new(cfg);
    mkdirs(&lay.root.join("pretrain"))?;
    let ckpt = lay.checkpoint();
    let (mut model, mut trainer) = if ckpt.is_file() {
        let archive = Archive::<f32>::load(&ckpt)?;
        let (m, mut t) = Pretrainer::resume(&archive)?;
        if m.cfg != p.model_cfg {
            return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
        }
        t.cfg.epochs = cfg.epochs;
        info!("resuming from epoch {}", t.epoch);
        (m, t)
    } else {
        (Model::<f32>::new(p.model_cfg.clone(), cfg.seed)?, Pretrainer::new(cfg.train(), p.times.clone()))
    };
    let log_path = lay.train_log();
    let fresh = !log_path.exists() || trainer.step == 0;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        write_log_header(&mut log)?;
    }
    let mut last = None;
    while trainer.epoch < trainer.cfg.epochs {
        let stats = trainer.run_epoch(&mut model, &p.ctx, &p.train, &mut |s| write_log_row(&mut log, s))?;
        last = stats.last().copied();
        trainer.checkpoint(&model).save(&ckpt)?;
    }
    if last.is_none() && !ckpt.is_file() {
        trainer.checkpoint(&model).save(&ckpt)?;
    }
    let mut inputs = data_inputs(cfg);
    inputs.push(lay.split("train"));
    finish(cfg, "pretrain", &inputs)?;
    Ok(json!({
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "final_loss": last.map(|s| s.loss),
        "final_mlm": last.map(|s| s.mlm),
        "final_cl": last.map(|s| s.cl),
        "checkpoint": ckpt.display().to_string(),
    }))
}

/// Deterministic 7:1:2 partition of segment ids for the lane task.
pub fn split_segments(n: usize, seed: u64) -> (Vec<SegmentId>, Vec<SegmentId>, Vec<SegmentId>) {
    let mut ids: Vec<SegmentId> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5e6));
    let a = n * 7 / 10;
    let b = a + n / 10;
    let test = ids.split_off(b);
    let val = ids.split_off(a);
    (ids, val, test)
}

/// Task data for `task` on `part` (`"train"`, `"val"` or `"test"`).
pub fn task_data(cfg: &RunConfig, p: &Prepared, task: Task, part: &str) -> Result<TaskData> {
    let trajs = match part {
        "train" => &p.train,
        "val" => &p.val,
        "test" => &p.test,
        _ => return Err(Error::input(format!("unknown split {part:?}"))),
    };
    Ok(match task {
        Task::Rlp => {
            let (tr, va, te) = split_segments(p.ds.net.len(), cfg.seed);
            let ids = match part {
                "train" => tr,
                "val" => va,
                _ => te,
            };
            rlp_data(&p.ds.net, &ids)
        }
        Task::Tdp => tdp_data(trajs, cfg.max_len),
        Task::Tte => tte_data(trajs, cfg.max_len),
        Task::Pr => {
            let inst = build_pr_instances(trajs, &p.ds.net, cfg.pr_paths, cfg.pr_overlap);
            pr_data(&inst, &p.times, cfg.max_len)
        }
    })
}

fn load_pretrained(cfg: &RunConfig, p: &Prepared) -> Result<Model<f32>> {
    let ckpt = Layout::new(cfg).checkpoint();
    if !ckpt.is_file() {
        return Err(Error::input(format!("{} missing; run `pretrain` first", ckpt.display())));
    }
    let model = Model::from_archive(&Archive::load(&ckpt)?)?;
    if model.cfg != p.model_cfg {
        return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
    }
    Ok(model)
}

pub fn finetune(cfg: &RunConfig, task: Task) -> Result<Value> {
    let _lock = DirLock::acquire(&cfg.out)?;
    let p = prepare(cfg)?;
    let mut model = load_pretrained(cfg, &p)?;
    let data = task_data(cfg, &p, task, "train")?;
    let head = BoundHead::attach(&mut model, head_for(&data), cfg.seed);
    let history = run_finetune(&mut model, &p.ctx, &head, &data, &cfg.finetune())?;
    let lay = Layout::new(cfg);
    let out = lay.finetuned(task);
    mkdirs(out.parent().expect("has parent"))?;
    model.to_archive(json!({"head": head.spec})).save(&out)?;
    finish(cfg, &format!("finetune-{task}"), &[lay.checkpoint(), lay.split("train")])?;
    Ok(json!({"task": task.name(), "examples": data.len(), "epoch_loss": history, "checkpoint": out.display().to_string()}))
}

/// Evaluation on the test split. `str` uses pretrained embeddings directly; the other tasks
/// need a fine-tuned checkpoint.
pub fn eval(cfg: &RunConfig, task: &str) -> Result<Value> {
    let _lock = DirLock::acquire(&cfg.out)?;
    let p = prepare(cfg)?;
    let lay = Layout::new(cfg);
    let report = if task == "str" {
        let model = load_pretrained(cfg, &p)?;
        let pool: Vec<Trajectory> = p.test.iter().filter(|t| t.len() <= cfg.max_len).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_q = cfg.str_queries;
        let bench = build_str_benchmark(&pool, &p.ds.net, &p.times, n_q, cfg.str_distractors, cfg.detour_cap, &mut rng)?;
        bench.audit(&p.ds.net)?;
        bench.write(&lay.eval_dir().join("str"))?;
        if bench.queries.iter().any(|t| t.len() > cfg.max_len) {
            return Err(Error::input("a detour exceeds max_len; raise max_len or lower detour_cap"));
        }
        let q: Vec<View> = bench.queries.iter().map(View::of).collect();
        let c: Vec<View> = bench.candidates().iter().map(View::of).collect();
        let qe = model.embed(&p.ctx, &q, EMBED_CHUNK)?;
        let ce = model.embed(&p.ctx, &c, EMBED_CHUNK)?;
        let truth: Vec<usize> = (0..q.len()).collect();
        serde_json::to_value(str_evaluate(&qe, &ce, &truth)?)?
    } else {
        let task: Task = task.parse()?;
        let path = lay.finetuned(task);
        if !path.is_file() {
            return Err(Error::input(format!("{} missing; run `finetune --task {task}` first", path.display())));
        }
        let archive = Archive::<f32>::load(&path)?;
        let mut model = Model::from_archive(&archive)?;
        let spec: TaskHead = serde_json::from_value(archive.meta["head"].clone())?;
        let head = BoundHead::attach(&mut model, spec, 0);
        model.load_params(&archive.tensors)?;
        let data = task_data(cfg, &p, task, "test")?;
        if task == Task::Pr {
            let inst = build_pr_instances(&p.test, &p.ds.net, cfg.pr_paths, cfg.pr_overlap);
            mkdirs(&lay.eval_dir())?;
            write_pr_instances(&lay.eval_dir().join("pr_instances.jsonl"), &inst)?;
        }
        let preds = predict(&model, &p.ctx, &head, &data.inputs, EMBED_CHUNK)?;
        evaluate(&data, &preds)?
    };
    write_json(&lay.eval_dir().join(format!("{task}.json")), &report)?;
    finish(cfg, &format!("eval-{task}"), &[lay.checkpoint(), lay.split("test")])?;
    Ok(report)
}

/// Writes one CSV row of embedding values per trajectory in `input` (default: test split).
pub fn embed(cfg: &RunConfig, input: Option<&Path>, output: &Path) -> Result<Value> {
    let _lock = DirLock::acquire(&cfg.out)?;
    let p = prepare(cfg)?;
    let model = load_pretrained(cfg, &p)?;
    let trajs = match input {
        Some(path) => read_trajectories(path, &p.ds.net)?,
        None => p.test.clone(),
    };
    let views: Vec<View> = trajs.iter().map(|t| View::of(&t.truncated(cfg.max_len))).collect();
    let vecs = model.embed(&p.ctx, &views, EMBED_CHUNK)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(output)?;
    for v in &vecs {
        w.write_record(v.iter().map(|x| format!("{x:.6}")))?;
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    let mut inputs = vec![Layout::new(cfg).checkpoint()];
    inputs.extend(input.map(Path::to_path_buf));
    finish(cfg, "embed", &inputs)?;
    Ok(json!({"trajectories": vecs.len(), "dim": cfg.d, "output": output.display().to_string()}))
}
