//! Temporal embeddings, CLS token and a pre-norm Transformer over per-step vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{LayerNorm, Linear};
use crate::autodiff::{AttnGroup, Graph, ParamId, ParamStore, SparseEntry, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MINUTES_PER_DAY: usize = 1440;
pub const DAYS_PER_WEEK: usize = 7;

/// Minute of the local day, `0..1440`.
pub fn minute_of_day(ts: i64, utc_offset_secs: i64) -> usize {
    ((ts + utc_offset_secs).rem_euclid(86_400) / 60) as usize
}

/// Local day of week with Monday as 0.
pub fn day_of_week(ts: i64, utc_offset_secs: i64) -> usize {
    // 1970-01-01 was a Thursday.
    ((ts + utc_offset_secs).div_euclid(86_400) + 3).rem_euclid(7) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Positions excluding the CLS token.
    pub max_len: usize,
    pub utc_offset_secs: i64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 128,
            layers: 6,
            heads: 4,
            dropout: 0.1,
            max_len: 128,
            utc_offset_secs: 0,
        }
    }
}

/// How sequences are stacked into rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Each sequence takes exactly `1 + n` rows.
    Ragged,
    /// Each sequence takes `1 + width` rows; trailing rows are padding.
    Padded(usize),
}

/// Lengths and per-position timestamps of a batch of sequences.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub lengths: Vec<usize>,
    /// Flattened timestamps, one per position.
    pub times: Vec<i64>,
    pub layout: Layout,
}

impl SeqBatch {
    pub fn new(lengths: Vec<usize>, times: Vec<i64>) -> Self {
        Self {
            lengths,
            times,
            layout: Layout::Ragged,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// First row of each sequence's block and the block width.
    fn blocks(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.lengths
            .iter()
            .map(|&n| {
                let w = match self.layout {
                    Layout::Ragged => n + 1,
                    Layout::Padded(width) => width + 1,
                };
                let b = (start, w);
                start += w;
                b
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct TrajEncoder {
    pub cfg: EncoderConfig,
    minute: ParamId,
    day: ParamId,
    position: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

/// Encoder states plus the row index of each CLS token and each real position.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    pub cls_rows: Vec<usize>,
    pub step_rows: Vec<usize>,
}

impl EncoderOutput {
    /// `[batch, d]` trajectory embeddings.
    pub fn cls<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.gather(self.states, &self.cls_rows)
    }

    /// `[positions, d]` per-step states in input order.
    pub fn steps<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.gather(self.states, &self.step_rows)
    }
}

impl TrajEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("d={d} not divisible by {} heads", cfg.heads)));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        let minute = store.add_uniform("enc.minute", MINUTES_PER_DAY, d, d, rng);
        let day = store.add_uniform("enc.day", DAYS_PER_WEEK, d, d, rng);
        let position = store.add_uniform("enc.position", cfg.max_len + 1, d, d, rng);
        let cls = store.add_uniform("enc.cls", 1, d, d, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("enc.layer{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.attn.q"), d, d, true, rng),
                    k: Linear::new(store, &format!("{p}.attn.k"), d, d, true, rng),
                    v: Linear::new(store, &format!("{p}.attn.v"), d, d, true, rng),
                    o: Linear::new(store, &format!("{p}.attn.o"), d, d, true, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ffn.0"), d, 4 * d, true, rng),
                    ff2: Linear::new(store, &format!("{p}.ffn.1"), 4 * d, d, true, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "enc.ln_f", d);
        Ok(Self {
            cfg,
            minute,
            day,
            position,
            cls,
            blocks,
            ln_f,
        })
    }

    /// Encodes `steps` (`[positions, d]`, one row per position of `batch`). Dropout is
    /// active only when `rng` is given.
    /// Input rows before the first block: step vector plus minute, day and position
    /// lookups, with the CLS row at the head of each sequence.
    pub fn point_embedding<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        steps: Var,
        batch: &SeqBatch,
    ) -> Result<EncoderOutput> {
        self.embed(g, store, steps, batch).map(|(out, _)| out)
    }

    fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        steps: Var,
        batch: &SeqBatch,
    ) -> Result<(EncoderOutput, Vec<AttnGroup>)> {
        let d = self.cfg.d;
        if g.shape(steps) != (batch.num_positions(), d) {
            return Err(Error::Shape(format!(
                "encoder input {:?}, expected ({}, {d})",
                g.shape(steps),
                batch.num_positions()
            )));
        }
        if batch.times.len() != batch.num_positions() {
            return Err(Error::Shape("one timestamp per position required".into()));
        }
        for &n in &batch.lengths {
            if n == 0 {
                return Err(Error::input("cannot encode an empty sequence"));
            }
            if n > self.cfg.max_len {
                return Err(Error::input(format!("sequence of {n} exceeds max_len {}", self.cfg.max_len)));
            }
            if let Layout::Padded(w) = batch.layout {
                if n > w {
                    return Err(Error::input(format!("sequence of {n} exceeds padded width {w}")));
                }
            }
        }

        let blocks = batch.blocks();
        let rows = blocks.last().map_or(0, |b| b.0 + b.1);
        let one = |o: usize, s: usize| SparseEntry {
            out_row: o as u32,
            src_row: s as u32,
            weight: T::one(),
        };
        let (mut e_step, mut e_min, mut e_day, mut e_pos, mut e_cls) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut groups = Vec::with_capacity(blocks.len());
        let mut cls_rows = Vec::with_capacity(blocks.len());
        let mut step_rows = Vec::with_capacity(batch.num_positions());
        let mut p = 0;
        for (&(start, width), &n) in blocks.iter().zip(&batch.lengths) {
            e_cls.push(one(start, 0));
            e_pos.push(one(start, 0));
            cls_rows.push(start);
            for i in 0..n {
                let r = start + 1 + i;
                let ts = batch.times[p];
                e_step.push(one(r, p));
                e_min.push(one(r, minute_of_day(ts, self.cfg.utc_offset_secs)));
                e_day.push(one(r, day_of_week(ts, self.cfg.utc_offset_secs)));
                e_pos.push(one(r, i + 1));
                step_rows.push(r);
                p += 1;
            }
            groups.push(AttnGroup {
                start,
                len: width,
                valid: n + 1,
            });
        }

        let x_step = g.sparse(steps, rows, e_step);
        let mut x = x_step;
        for (table, entries) in [
            (self.minute, e_min),
            (self.day, e_day),
            (self.position, e_pos),
            (self.cls, e_cls),
        ] {
            let t = g.param(store, table);
            let part = g.sparse(t, rows, entries);
            x = g.add(x, part);
        }
        Ok((
            EncoderOutput {
                states: x,
                cls_rows,
                step_rows,
            },
            groups,
        ))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        steps: Var,
        batch: &SeqBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let d = self.cfg.d;
        let (
            EncoderOutput {
                states: x,
                cls_rows,
                step_rows,
            },
            groups,
        ) = self.embed(g, store, steps, batch)?;
        let p_drop = self.cfg.dropout;
        let scale = T::one() / T::of((d / self.cfg.heads) as f64).sqrt();
        let mut h = x;
        for b in &self.blocks {
            let a = b.ln1.forward(g, store, h);
            let q = b.q.forward(g, store, a);
            let k = b.k.forward(g, store, a);
            let v = b.v.forward(g, store, a);
            let att = g.attention(q, k, v, groups.clone(), self.cfg.heads, scale);
            let mut o = b.o.forward(g, store, att);
            if let Some(r) = rng.as_deref_mut() {
                o = g.dropout(o, p_drop, r);
            }
            h = g.add(h, o);
            let a = b.ln2.forward(g, store, h);
            let f = b.ff1.forward(g, store, a);
            let f = g.gelu(f);
            let mut f = b.ff2.forward(g, store, f);
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, p_drop, r);
            }
            h = g.add(h, f);
        }
        let states = self.ln_f.forward(g, store, h);
        Ok(EncoderOutput {
            states,
            cls_rows,
            step_rows,
        })
    }

    pub fn param_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids_with_prefix("enc.").collect()
    }
}
