//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::poi::SemanticConfig;
use crate::pretrain::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    /// Fine-grained POI radius, meters.
    pub delta: f64,
    /// Coarse grid cell side, meters.
    pub cell_size: f64,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub tau: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub utc_offset_secs: i64,
    pub city: String,
    pub provider: Provider,
    pub remote_endpoint: String,
    pub remote_model: String,
    pub use_fine: bool,
    pub use_coarse: bool,
    pub use_route_choice: bool,
    pub str_queries: usize,
    pub str_distractors: usize,
    pub detour_cap: usize,
    pub pr_paths: usize,
    pub pr_overlap: f64,
    pub segments: PathBuf,
    pub edges: PathBuf,
    pub pois: PathBuf,
    pub categories: PathBuf,
    pub trajectories: PathBuf,
    pub cache: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 128,
            delta: 100.0,
            cell_size: 1000.0,
            heads: 4,
            layers: 6,
            dropout: 0.1,
            max_len: 128,
            batch: 64,
            lr: 2e-4,
            warmup_epochs: 5,
            min_lr: 1e-6,
            epochs: 50,
            finetune_epochs: 10,
            tau: 0.05,
            weight_decay: 0.01,
            seed: 0,
            utc_offset_secs: 0,
            city: "Beijing".into(),
            provider: Provider::Mock,
            remote_endpoint: String::new(),
            remote_model: String::new(),
            use_fine: true,
            use_coarse: true,
            use_route_choice: true,
            str_queries: 5000,
            str_distractors: 50000,
            detour_cap: 32,
            pr_paths: 10,
            pr_overlap: 0.8,
            segments: "data/segments.csv".into(),
            edges: "data/edges.csv".into(),
            pois: "data/pois.csv".into(),
            categories: "data/categories.csv".into(),
            trajectories: "data/trajectories.traj".into(),
            cache: "cache".into(),
            out: "run".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. Relative paths are resolved
    /// against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        for p in [
            &mut c.segments,
            &mut c.edges,
            &mut c.pois,
            &mut c.categories,
            &mut c.trajectories,
            &mut c.cache,
            &mut c.out,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_str(&text, base)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "d" => self.d = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "cell_size" => self.cell_size = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "utc_offset_secs" => self.utc_offset_secs = parse(key, v)?,
            "city" => self.city = v.to_string(),
            "provider" => {
                self.provider = match v {
                    "mock" => Provider::Mock,
                    "remote" => Provider::Remote,
                    _ => return Err(Error::Config(format!("provider must be mock or remote, got {v:?}"))),
                }
            }
            "remote_endpoint" => self.remote_endpoint = v.to_string(),
            "remote_model" => self.remote_model = v.to_string(),
            "use_fine" => self.use_fine = parse(key, v)?,
            "use_coarse" => self.use_coarse = parse(key, v)?,
            "use_route_choice" => self.use_route_choice = parse(key, v)?,
            "str_queries" => self.str_queries = parse(key, v)?,
            "str_distractors" => self.str_distractors = parse(key, v)?,
            "detour_cap" => self.detour_cap = parse(key, v)?,
            "pr_paths" => self.pr_paths = parse(key, v)?,
            "pr_overlap" => self.pr_overlap = parse(key, v)?,
            "segments" => self.segments = v.into(),
            "edges" => self.edges = v.into(),
            "pois" => self.pois = v.into(),
            "categories" => self.categories = v.into(),
            "trajectories" => self.trajectories = v.into(),
            "cache" => self.cache = v.into(),
            "out" => self.out = v.into(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d as f64),
            ("delta", self.delta),
            ("cell_size", self.cell_size),
            ("heads", self.heads as f64),
            ("layers", self.layers as f64),
            ("max_len", self.max_len as f64),
            ("batch", self.batch as f64),
            ("lr", self.lr),
            ("min_lr", self.min_lr),
            ("epochs", self.epochs as f64),
            ("tau", self.tau),
            ("detour_cap", self.detour_cap as f64),
            ("pr_paths", self.pr_paths as f64),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.pr_overlap) {
            return Err(Error::Config("pr_overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical text: every key in a fixed order, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let provider = match self.provider {
            Provider::Mock => "mock",
            Provider::Remote => "remote",
        };
        let kv: Vec<(&str, String)> = vec![
            ("d", self.d.to_string()),
            ("delta", self.delta.to_string()),
            ("cell_size", self.cell_size.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_len", self.max_len.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("tau", self.tau.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("utc_offset_secs", self.utc_offset_secs.to_string()),
            ("city", self.city.clone()),
            ("provider", provider.into()),
            ("remote_endpoint", self.remote_endpoint.clone()),
            ("remote_model", self.remote_model.clone()),
            ("use_fine", self.use_fine.to_string()),
            ("use_coarse", self.use_coarse.to_string()),
            ("use_route_choice", self.use_route_choice.to_string()),
            ("str_queries", self.str_queries.to_string()),
            ("str_distractors", self.str_distractors.to_string()),
            ("detour_cap", self.detour_cap.to_string()),
            ("pr_paths", self.pr_paths.to_string()),
            ("pr_overlap", self.pr_overlap.to_string()),
            ("segments", self.segments.display().to_string()),
            ("edges", self.edges.display().to_string()),
            ("pois", self.pois.display().to_string()),
            ("categories", self.categories.display().to_string()),
            ("trajectories", self.trajectories.display().to_string()),
            ("cache", self.cache.display().to_string()),
            ("out", self.out.display().to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn model(&self, num_segments: usize, num_road_types: usize, num_categories: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            dropout: self.dropout,
            max_len: self.max_len,
            utc_offset_secs: self.utc_offset_secs,
            num_segments,
            num_road_types,
            num_categories,
            use_fine: self.use_fine,
            use_coarse: self.use_coarse,
            use_route_choice: self.use_route_choice,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            lr: self.lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            tau: self.tau,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn finetune(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            warmup_epochs: self.warmup_epochs.min(self.finetune_epochs / 2),
            ..self.train()
        }
    }

    pub fn semantic(&self) -> SemanticConfig {
        SemanticConfig {
            city: self.city.clone(),
            delta: self.delta,
            cell_size: self.cell_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_resolves_paths() {
        let c = RunConfig::parse_str("# toy\nd = 32 # width\nheads=4\n\nsegments = net/s.csv\nprovider = mock\n", Path::new("/w")).unwrap();
        assert_eq!(c.d, 32);
        assert_eq!(c.segments, PathBuf::from("/w/net/s.csv"));
        assert_eq!(c.out, PathBuf::from("/w/run"));
        let again = RunConfig::parse_str(&c.render(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.sha256(), c.sha256());
    }

    #[test]
    fn rejects_bad_values() {
        let p = Path::new(".");
        assert!(RunConfig::parse_str("d = 30\nheads = 4", p).is_err());
        assert!(RunConfig::parse_str("lr = -1", p).is_err());
        assert!(RunConfig::parse_str("bogus = 1", p).is_err());
        assert!(RunConfig::parse_str("d 32", p).is_err());
        assert!(RunConfig::parse_str("provider = cloud", p).is_err());
        assert!(RunConfig::parse_str("layers = x", p).is_err());
    }
}
