//! POI ingestion, fine- and coarse-grained POI contexts, prompt construction and
//! text embedding providers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{point_segment_distance, GridIndex, LatLon, RoadNetwork, SegmentId};

/// Two-level category registry. Ids are assigned in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct CategoryRegistry {
    primaries: Vec<String>,
    /// `(primary id, name)` per subcategory id.
    subs: Vec<(usize, String)>,
    primary_ids: HashMap<String, usize>,
    sub_ids: HashMap<(usize, String), usize>,
}

impl CategoryRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `(c1, c2)` and returns the pair of ids.
    pub fn insert(&mut self, c1: &str, c2: &str) -> (usize, usize) {
        let p = match self.primary_ids.get(c1) {
            Some(&p) => p,
            None => {
                self.primaries.push(c1.to_string());
                self.primary_ids.insert(c1.to_string(), self.primaries.len() - 1);
                self.primaries.len() - 1
            }
        };
        let key = (p, c2.to_string());
        let s = match self.sub_ids.get(&key) {
            Some(&s) => s,
            None => {
                self.subs.push((p, c2.to_string()));
                self.sub_ids.insert(key, self.subs.len() - 1);
                self.subs.len() - 1
            }
        };
        (p, s)
    }

    pub fn lookup(&self, c1: &str, c2: &str) -> Option<(usize, usize)> {
        let p = *self.primary_ids.get(c1)?;
        let s = *self.sub_ids.get(&(p, c2.to_string()))?;
        Some((p, s))
    }

    pub fn num_primary(&self) -> usize {
        self.primaries.len()
    }

    pub fn num_sub(&self) -> usize {
        self.subs.len()
    }

    pub fn primary_name(&self, c1: usize) -> &str {
        &self.primaries[c1]
    }

    pub fn sub_name(&self, c2: usize) -> &str {
        &self.subs[c2].1
    }

    pub fn primary_of(&self, c2: usize) -> usize {
        self.subs[c2].0
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.subs
            .iter()
            .map(|(p, s)| (self.primaries[*p].as_str(), s.as_str()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            c1: String,
            c2: String,
        }
        let mut reg = Self::new();
        let mut rdr = csv::Reader::from_path(path)?;
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                path: path.into(),
                line: i + 2,
                msg: e.to_string(),
            })?;
            reg.insert(&row.c1, &row.c2);
        }
        Ok(reg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["c1", "c2"])?;
        for (a, b) in self.pairs() {
            w.write_record([a, b])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Poi {
    pub pos: LatLon,
    pub c1: usize,
    pub c2: usize,
    pub name: String,
}

/// Reads `lat,lon,primary_category,subcategory,name`; category pairs must exist in `registry`.
pub fn read_pois(path: &Path, registry: &CategoryRegistry) -> Result<Vec<Poi>> {
    #[derive(Deserialize)]
    struct Row {
        lat: f64,
        lon: f64,
        primary_category: String,
        subcategory: String,
        name: String,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.into(),
            line,
            msg: e.to_string(),
        })?;
        if row.lat.abs() > 90.0 || row.lon.abs() > 180.0 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: "coordinates out of range".into(),
            });
        }
        let (c1, c2) = registry
            .lookup(&row.primary_category, &row.subcategory)
            .ok_or_else(|| Error::Parse {
                path: path.into(),
                line,
                msg: format!(
                    "category pair ({}, {}) not in registry",
                    row.primary_category, row.subcategory
                ),
            })?;
        out.push(Poi {
            pos: LatLon::new(row.lat, row.lon),
            c1,
            c2,
            name: row.name,
        });
    }
    Ok(out)
}

pub fn write_pois(path: &Path, pois: &[Poi], registry: &CategoryRegistry) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lat", "lon", "primary_category", "subcategory", "name"])?;
    for p in pois {
        w.write_record([
            p.pos.lat.to_string().as_str(),
            p.pos.lon.to_string().as_str(),
            registry.primary_name(p.c1),
            registry.sub_name(p.c2),
            p.name.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Names grouped by primary category, then subcategory. Names are kept sorted.
pub type Grouped = BTreeMap<usize, BTreeMap<usize, Vec<String>>>;

/// POIs near one road segment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinePoiContext {
    pub segment: SegmentId,
    pub grouped: Grouped,
}

impl FinePoiContext {
    pub fn is_empty(&self) -> bool {
        self.grouped.is_empty()
    }

    pub fn total(&self) -> usize {
        self.grouped.values().flat_map(|m| m.values()).map(Vec::len).sum()
    }

    pub fn primary_count(&self, c1: usize) -> usize {
        self.grouped.get(&c1).map_or(0, |m| m.values().map(Vec::len).sum())
    }

    /// Flattened `(c1, c2, name)` triples.
    pub fn entries(&self) -> Vec<(usize, usize, String)> {
        self.grouped
            .iter()
            .flat_map(|(&c1, m)| {
                m.iter()
                    .flat_map(move |(&c2, names)| names.iter().map(move |n| (c1, c2, n.clone())))
            })
            .collect()
    }
}

fn sort_grouped(g: &mut Grouped) {
    for m in g.values_mut() {
        for names in m.values_mut() {
            names.sort();
        }
    }
}

/// POIs whose projected distance to the segment chord is at most `delta` meters.
pub fn pois_within(net: &RoadNetwork, pois: &[Poi], seg: SegmentId, delta: f64) -> FinePoiContext {
    let s = net.segment(seg);
    let (a, b) = (net.project(s.start), net.project(s.end));
    let mut grouped = Grouped::new();
    for p in pois {
        if point_segment_distance(net.project(p.pos), a, b) <= delta {
            grouped
                .entry(p.c1)
                .or_default()
                .entry(p.c2)
                .or_default()
                .push(p.name.clone());
        }
    }
    sort_grouped(&mut grouped);
    FinePoiContext {
        segment: seg,
        grouped,
    }
}

/// Fine contexts for every segment, using a bucket grid of side `delta` so each
/// segment only inspects nearby POIs.
pub fn all_fine_contexts(net: &RoadNetwork, pois: &[Poi], delta: f64) -> Vec<FinePoiContext> {
    let bucket = delta.max(1.0);
    let key = |x: f64, y: f64| ((x / bucket).floor() as i64, (y / bucket).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let projected: Vec<[f64; 2]> = pois.iter().map(|p| net.project(p.pos)).collect();
    for (i, p) in projected.iter().enumerate() {
        buckets.entry(key(p[0], p[1])).or_default().push(i);
    }
    (0..net.len())
        .map(|seg| {
            let s = net.segment(seg);
            let (a, b) = (net.project(s.start), net.project(s.end));
            let (lo, hi) = (
                key(a[0].min(b[0]) - delta, a[1].min(b[1]) - delta),
                key(a[0].max(b[0]) + delta, a[1].max(b[1]) + delta),
            );
            let mut grouped = Grouped::new();
            for bx in lo.0..=hi.0 {
                for by in lo.1..=hi.1 {
                    for &i in buckets.get(&(bx, by)).into_iter().flatten() {
                        if point_segment_distance(projected[i], a, b) <= delta {
                            let p = &pois[i];
                            grouped
                                .entry(p.c1)
                                .or_default()
                                .entry(p.c2)
                                .or_default()
                                .push(p.name.clone());
                        }
                    }
                }
            }
            sort_grouped(&mut grouped);
            FinePoiContext {
                segment: seg,
                grouped,
            }
        })
        .collect()
}

/// A grid cell selected as a cluster for one primary category.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseCluster {
    pub cell: (usize, usize),
    pub category: usize,
    /// Subcategory -> sorted names of the category's POIs in the cell.
    pub grouped: BTreeMap<usize, Vec<String>>,
    pub count: usize,
    /// `100 * (rank + 1) / ranked_cells`; always at most 10 for selected cells.
    pub density_rank: f64,
}

/// Top 10% (rounded up) of cells by category-`c` POI count among cells holding at least
/// one such POI. Ties break by `(ix, iy)` ascending.
pub fn select_cluster_cells(pois: &[Poi], gi: &GridIndex, c: usize) -> Vec<CoarseCluster> {
    let mut cells: BTreeMap<(usize, usize), BTreeMap<usize, Vec<String>>> = BTreeMap::new();
    for p in pois.iter().filter(|p| p.c1 == c) {
        cells
            .entry(gi.cell_of(p.pos))
            .or_default()
            .entry(p.c2)
            .or_default()
            .push(p.name.clone());
    }
    let mut ranked: Vec<((usize, usize), usize)> = cells
        .iter()
        .map(|(&cell, m)| (cell, m.values().map(Vec::len).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = (ranked.len() as f64 * 0.10).ceil() as usize;
    let n = ranked.len();
    ranked
        .into_iter()
        .take(keep)
        .enumerate()
        .map(|(rank, (cell, count))| {
            let mut grouped = cells.remove(&cell).unwrap_or_default();
            for names in grouped.values_mut() {
                names.sort();
            }
            CoarseCluster {
                cell,
                category: c,
                grouped,
                count,
                density_rank: 100.0 * (rank + 1) as f64 / n as f64,
            }
        })
        .collect()
}

// --- prompts -----------------------------------------------------------------

const ROLE_LINE: &str = "You are a resident living in {city}, familiar with the local transportation network and surrounding POI information.";

/// Names shown per subcategory in cluster prompts before eliding with "etc.".
pub const COARSE_NAMES_SHOWN: usize = 3;

fn role_line(city: &str) -> String {
    ROLE_LINE.replace("{city}", city)
}

fn fmt_meters(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("{}", m as i64)
    } else {
        format!("{m}")
    }
}

/// Segment-level prompt listing nearby POIs by primary category and subcategory.
pub fn build_fine_prompt(city: &str, ctx: &FinePoiContext, registry: &CategoryRegistry, delta: f64) -> String {
    let radius = fmt_meters(delta);
    let mut s = String::new();
    s.push_str(&role_line(city));
    s.push_str("\n\n");
    if !ctx.is_empty() {
        s.push_str(&format!(
            "There is a road segment with the following POIs located within a {radius}-meter radius:\n\n"
        ));
        for (&c1, subs) in &ctx.grouped {
            let n: usize = subs.values().map(Vec::len).sum();
            s.push_str(&format!(
                "{n} POIs categorized under [{}], further subdivided as:\n",
                registry.primary_name(c1)
            ));
            for (&c2, names) in subs {
                s.push_str(&format!(
                    "- {} [{}]: {}.\n",
                    names.len(),
                    registry.sub_name(c2),
                    names.join(", ")
                ));
            }
            s.push('\n');
        }
    }
    s.push_str(&format!(
        "Please describe the relevant characteristics of this road section based on the POI information within a {radius}-meter radius around it.\n"
    ));
    s
}

/// Cluster-level prompt for one selected cell of one primary category.
pub fn build_coarse_prompt(
    city: &str,
    cluster: &CoarseCluster,
    registry: &CategoryRegistry,
    cell_size: f64,
) -> String {
    let side = fmt_meters(cell_size);
    let cat = registry.primary_name(cluster.category);
    let mut s = String::new();
    s.push_str(&role_line(city));
    s.push_str("\n\n");
    s.push_str(&format!(
        "In a {side}m \u{d7} {side}m area of {city}, POIs of the type [{cat}] exhibit significant clustering characteristics. \
Data analysis shows that the number of [{cat}] POIs in this area ranks within the top 10% in {city}. \
Further subdividing these [{cat}] POIs, they include:\n\n"
    ));
    for (&c2, names) in &cluster.grouped {
        let shown: Vec<&str> = names.iter().take(COARSE_NAMES_SHOWN).map(String::as_str).collect();
        let tail = if names.len() > COARSE_NAMES_SHOWN { ", etc." } else { "." };
        s.push_str(&format!(
            "- {} [{}]: {}{tail}\n",
            names.len(),
            registry.sub_name(c2),
            shown.join(", ")
        ));
    }
    s.push('\n');
    s.push_str(&format!(
        "Please describe the characteristics of this {side}m \u{d7} {side}m area where a large number of [{cat}] POIs are clustered.\n"
    ));
    s
}

// --- text embedding ----------------------------------------------------------

/// Hex SHA-256 of the text; keys the embedding cache.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Unit-norm dense vector for a piece of text.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    pub values: Vec<f32>,
    pub source_hash: String,
}

/// Turns generated descriptions into vectors. Implementations need not normalize.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>>;
}

/// Produces the natural-language description of a prompt. The bundled
/// [`EchoDescriber`] returns the prompt itself.
pub trait Describer: Send + Sync {
    fn describe(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EchoDescriber;

impl Describer for EchoDescriber {
    fn describe(&self, prompt: &str) -> Result<String> {
        Ok(prompt.to_string())
    }
}

/// Deterministic stand-in for a text embedding model: a ChaCha stream seeded from the
/// text digest, drawn as standard normals.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl TextEmbedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let digest = Sha256::digest(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        Ok((0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect())
    }
}

/// Embeds `text` and L2-normalizes the result.
pub fn embed_text(provider: &dyn TextEmbedder, text: &str) -> Result<SemanticVector> {
    if text.is_empty() {
        return Err(Error::input("cannot embed empty text"));
    }
    let hash = text_hash(text);
    let mut values = provider.embed_raw(text)?;
    normalize_vector(&mut values).map_err(|reason| Error::Provider {
        hash: hash.clone(),
        reason,
    })?;
    Ok(SemanticVector {
        values,
        source_hash: hash,
    })
}

fn normalize_vector(v: &mut [f32]) -> std::result::Result<(), String> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err("non-finite embedding".into());
    }
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err("zero embedding".into());
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    Ok(())
}

/// On-disk cache: one `<hash>.vec` file of little-endian `f32` per text.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.vec"))
    }

    pub fn get(&self, hash: &str) -> Result<Option<Vec<f32>>> {
        let p = self.path(hash);
        match fs::read(&p) {
            Ok(bytes) => {
                if bytes.len() % 4 != 0 {
                    return Err(Error::input(format!("{}: truncated vector file", p.display())));
                }
                Ok(Some(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    }

    pub fn put(&self, hash: &str, values: &[f32]) -> Result<()> {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let p = self.path(hash);
        let tmp = self.dir.join(format!("{hash}.vec.tmp"));
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
    }
}

/// Wraps a provider with the on-disk cache keyed by the text hash.
pub struct CachedEmbedder<'a> {
    pub inner: &'a dyn TextEmbedder,
    pub cache: &'a EmbeddingCache,
}

impl TextEmbedder for CachedEmbedder<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let hash = text_hash(text);
        if let Some(v) = self.cache.get(&hash)? {
            if v.len() == self.inner.dim() {
                return Ok(v);
            }
            warn!("cached vector {hash} has dim {} (want {}); recomputing", v.len(), self.inner.dim());
        }
        let v = self.inner.embed_raw(text)?;
        self.cache.put(&hash, &v)?;
        Ok(v)
    }
}

/// Retry policy with exponential backoff: delays `base, 2*base, 4*base, ...`.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Runs `f` until it succeeds or attempts are exhausted; the final error carries `hash`.
pub fn retry_with_backoff<V>(
    policy: RetryPolicy,
    hash: &str,
    mut sleep: impl FnMut(Duration),
    mut f: impl FnMut() -> std::result::Result<V, String>,
) -> Result<V> {
    let mut last = String::new();
    for attempt in 0..policy.max_attempts.max(1) {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) => {
                debug!("provider attempt {} failed: {e}", attempt + 1);
                last = e;
                if attempt + 1 < policy.max_attempts {
                    sleep(policy.base_delay * 2u32.pow(attempt));
                }
            }
        }
    }
    Err(Error::Provider {
        hash: hash.to_string(),
        reason: format!("gave up after {} attempts: {last}", policy.max_attempts.max(1)),
    })
}

/// HTTP embedding provider speaking the common `{"model", "input"}` -> `{"data":[{"embedding"}]}` shape.
#[cfg(feature = "remote")]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[cfg(feature = "remote")]
impl RemoteEmbedder {
    pub fn new(endpoint: String, model: String, dim: usize, api_key: Option<String>) -> Self {
        Self {
            endpoint,
            model,
            dim,
            api_key,
            retry: RetryPolicy::default(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

#[cfg(feature = "remote")]
impl TextEmbedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>> {
        let hash = text_hash(text);
        retry_with_backoff(self.retry, &hash, std::thread::sleep, || {
            let mut req = self
                .client
                .post(&self.endpoint)
                .json(&serde_json::json!({"model": self.model, "input": text}));
            if let Some(k) = &self.api_key {
                req = req.bearer_auth(k);
            }
            let resp = req.send().map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("HTTP {}", resp.status()));
            }
            let body: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
            let v: Vec<f32> = body["data"][0]["embedding"]
                .as_array()
                .ok_or("missing data[0].embedding")?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32).ok_or("non-numeric embedding"))
                .collect::<std::result::Result<_, _>>()?;
            if v.len() != self.dim {
                return Err(format!("expected dim {}, got {}", self.dim, v.len()));
            }
            Ok(v)
        })
    }
}

/// Embedded cluster prompt for one (category, cell).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterVector {
    pub category: usize,
    pub cell: (usize, usize),
    pub values: Vec<f32>,
}

/// Everything the environment module needs from POI data.
#[derive(Debug, Clone)]
pub struct SemanticFeatures {
    pub dim: usize,
    /// One vector per segment, indexed by segment id.
    pub fine: Vec<Vec<f32>>,
    pub clusters: Vec<ClusterVector>,
    pub grid: GridIndex,
    pub num_categories: usize,
}

#[derive(Debug, Clone)]
pub struct SemanticConfig {
    pub city: String,
    /// Fine-grained proximity radius in meters.
    pub delta: f64,
    /// Coarse grid cell side in meters.
    pub cell_size: f64,
}

/// Builds prompts for every segment and every selected cluster cell, describes them and
/// embeds the descriptions.
pub fn build_semantic_features(
    net: &RoadNetwork,
    pois: &[Poi],
    registry: &CategoryRegistry,
    cfg: &SemanticConfig,
    describer: &dyn Describer,
    embedder: &dyn TextEmbedder,
) -> Result<SemanticFeatures> {
    if cfg.delta <= 0.0 {
        return Err(Error::Config("POI radius must be positive".into()));
    }
    let grid = net.grid(cfg.cell_size)?;
    let embed = |prompt: String| -> Result<Vec<f32>> {
        let text = describer.describe(&prompt)?;
        Ok(embed_text(embedder, &text)?.values)
    };
    let fine = all_fine_contexts(net, pois, cfg.delta)
        .iter()
        .map(|ctx| embed(build_fine_prompt(&cfg.city, ctx, registry, cfg.delta)))
        .collect::<Result<Vec<_>>>()?;
    let mut clusters = Vec::new();
    for c in 0..registry.num_primary() {
        for cl in select_cluster_cells(pois, &grid, c) {
            let values = embed(build_coarse_prompt(&cfg.city, &cl, registry, cfg.cell_size))?;
            clusters.push(ClusterVector {
                category: c,
                cell: cl.cell,
                values,
            });
        }
    }
    Ok(SemanticFeatures {
        dim: embedder.dim(),
        fine,
        clusters,
        grid,
        num_categories: registry.num_primary(),
    })
}
