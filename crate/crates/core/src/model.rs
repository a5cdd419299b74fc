//! The full trajectory model: environment tokens -> route-choice vectors -> encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Linear;
use crate::autodiff::{Archive, Graph, ParamId, ParamStore, SparseEntry, Tensor, Var};
use crate::encoder::{EncoderConfig, EncoderOutput, Layout, SeqBatch, TrajEncoder};
use crate::env::{EnvConfig, EnvInputs, EnvModel};
use crate::error::{Error, Result};
use crate::geo::{RoadNetwork, SegmentId, Trajectory};
use crate::poi::SemanticFeatures;
use crate::route::{ChoiceBatch, LikelihoodTable, RouteConfig, RouteModel, TransitionStats};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub utc_offset_secs: i64,
    pub num_segments: usize,
    pub num_road_types: usize,
    pub num_categories: usize,
    pub use_fine: bool,
    pub use_coarse: bool,
    /// When false the encoder consumes environment tokens directly.
    pub use_route_choice: bool,
}

impl ModelConfig {
    pub fn for_network(net: &RoadNetwork, num_categories: usize) -> Self {
        Self {
            d: 128,
            heads: 4,
            layers: 6,
            dropout: 0.1,
            max_len: 128,
            utc_offset_secs: 0,
            num_segments: net.len(),
            num_road_types: net.num_road_types(),
            num_categories,
            use_fine: true,
            use_coarse: true,
            use_route_choice: true,
        }
    }

    fn env(&self) -> EnvConfig {
        EnvConfig {
            d: self.d,
            heads: self.heads,
            num_road_types: self.num_road_types,
            num_categories: self.num_categories,
            use_fine: self.use_fine,
            use_coarse: self.use_coarse,
        }
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            max_len: self.max_len,
            utc_offset_secs: self.utc_offset_secs,
        }
    }
}

/// Frozen per-dataset inputs: the network, precomputed environment inputs and transition
/// likelihoods from the training split.
#[derive(Debug, Clone)]
pub struct Context<T> {
    pub net: RoadNetwork,
    pub env: EnvInputs<T>,
    pub lik: LikelihoodTable,
}

impl<T: Scalar> Context<T> {
    pub fn new(net: RoadNetwork, sem: &SemanticFeatures, stats: &TransitionStats, cfg: &ModelConfig) -> Result<Self> {
        let env = EnvInputs::new(&net, sem, &cfg.env())?;
        let lik = LikelihoodTable::new(stats, &net);
        Ok(Self { net, env, lik })
    }
}

/// One sequence fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub segments: Vec<SegmentId>,
    pub times: Vec<i64>,
    /// Positions whose route-choice vector is replaced by the mask embedding.
    pub masked: Vec<usize>,
}

impl View {
    pub fn of(t: &Trajectory) -> Self {
        Self {
            segments: t.segments(),
            times: t.timestamps(),
            masked: Vec::new(),
        }
    }

    /// Every position carries the departure time, hiding the arrival times.
    pub fn departure_only(t: &Trajectory) -> Self {
        Self {
            segments: t.segments(),
            times: vec![t.departure(); t.len()],
            masked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub env: EnvModel,
    pub route: RouteModel,
    pub encoder: TrajEncoder,
    pub mask_token: ParamId,
    pub vocab_head: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_segments == 0 {
            return Err(Error::Config("empty road network".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let env = EnvModel::new(&mut store, cfg.env(), &mut rng)?;
        let route = RouteModel::new(&mut store, &RouteConfig { d: cfg.d }, &mut rng);
        let encoder = TrajEncoder::new(&mut store, cfg.encoder(), &mut rng)?;
        let mask_token = store.add_uniform("mlm.mask", 1, cfg.d, cfg.d, &mut rng);
        let vocab_head = Linear::new(&mut store, "mlm.head", cfg.d, cfg.num_segments, true, &mut rng);
        Ok(Self {
            cfg,
            store,
            env,
            route,
            encoder,
            mask_token,
            vocab_head,
        })
    }

    /// Environment-aware tokens for every segment, `[N, d]`.
    pub fn tokens(&self, g: &mut Graph<T>, ctx: &Context<T>) -> Var {
        self.env.forward(g, &self.store, &ctx.env).fused
    }

    /// Per-position vectors before the encoder: route-choice representations, or the
    /// environment tokens themselves when route choice is disabled.
    pub fn step_vectors(&self, g: &mut Graph<T>, ctx: &Context<T>, tokens: Var, views: &[View]) -> Result<Var> {
        if self.cfg.use_route_choice {
            let seqs: Vec<&[SegmentId]> = views.iter().map(|v| v.segments.as_slice()).collect();
            let batch = ChoiceBatch::new(&ctx.net, &ctx.lik, &seqs)?;
            Ok(self.route.forward(g, &self.store, tokens, &batch).output)
        } else {
            let idx: Vec<usize> = views.iter().flat_map(|v| v.segments.iter().copied()).collect();
            Ok(g.gather(tokens, &idx))
        }
    }

    /// Full forward to encoder states. `rng` enables dropout.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        ctx: &Context<T>,
        tokens: Var,
        views: &[View],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let steps = self.step_vectors(g, ctx, tokens, views)?;
        let total: usize = views.iter().map(View::len).sum();
        let mut masked_rows = Vec::new();
        let mut off = 0;
        for v in views {
            for &m in &v.masked {
                if m >= v.len() {
                    return Err(Error::input(format!("mask position {m} beyond length {}", v.len())));
                }
                masked_rows.push(off + m);
            }
            off += v.len();
        }
        let steps = if masked_rows.is_empty() {
            steps
        } else {
            let mut is_masked = vec![false; total];
            for &r in &masked_rows {
                is_masked[r] = true;
            }
            let keep = (0..total)
                .filter(|&r| !is_masked[r])
                .map(|r| SparseEntry {
                    out_row: r as u32,
                    src_row: r as u32,
                    weight: T::one(),
                })
                .collect();
            let kept = g.sparse(steps, total, keep);
            let mask = g.param(&self.store, self.mask_token);
            let fill = masked_rows
                .iter()
                .map(|&r| SparseEntry {
                    out_row: r as u32,
                    src_row: 0,
                    weight: T::one(),
                })
                .collect();
            let filled = g.sparse(mask, total, fill);
            g.add(kept, filled)
        };
        let batch = SeqBatch {
            lengths: views.iter().map(View::len).collect(),
            times: views.iter().flat_map(|v| v.times.iter().copied()).collect(),
            layout: Layout::Ragged,
        };
        self.encoder.forward(g, &self.store, steps, &batch, rng)
    }

    /// Trajectory embeddings in evaluation mode, computed in chunks of `chunk`.
    pub fn embed(&self, ctx: &Context<T>, views: &[View], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(views.len());
        for part in views.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let tokens = self.tokens(&mut g, ctx);
            let enc = self.encode(&mut g, ctx, tokens, part, None)?;
            let cls = enc.cls(&mut g);
            let v = g.value(cls);
            for r in 0..v.rows() {
                out.push(v.row(r).iter().map(|x| x.as_f64()).collect());
            }
        }
        Ok(out)
    }

    /// MLM logits for the given encoder rows.
    pub fn vocab_logits(&self, g: &mut Graph<T>, states: Var) -> Var {
        self.vocab_head.forward(g, &self.store, states)
    }

    /// Same architecture over a different parameter store.
    pub fn with_store(&self, store: ParamStore<T>) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store,
            env: self.env.clone(),
            route: self.route.clone(),
            encoder: self.encoder.clone(),
            mask_token: self.mask_token,
            vocab_head: self.vocab_head,
        }
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store.ids_with_prefix(prefix).collect()
    }

    /// Archive holding the configuration, `meta` extras and all parameters.
    pub fn to_archive(&self, mut meta: serde_json::Value) -> Archive<T> {
        meta["config"] = serde_json::to_value(&self.cfg).expect("config serializes");
        Archive {
            meta,
            tensors: self.store.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds a model from an archive; tensors not present in the archive (for example
    /// task heads added later) keep their fresh initialization.
    pub fn from_archive(archive: &Archive<T>) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(archive.meta["config"].clone())?;
        let mut model = Self::new(cfg, 0)?;
        model.load_params(&archive.tensors)?;
        Ok(model)
    }

    pub fn load_params(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<usize> {
        self.store.load_matching(tensors)
    }
}
