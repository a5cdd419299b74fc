//! Classification, ranking, regression and rank-correlation metrics.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::input("metric input is empty"));
    }
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// `(macro, micro)` F1. Macro averages over the classes present in `labels`.
pub fn f1_scores(preds: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    check_aligned(preds.len(), labels.len())?;
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fne: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            *tp.entry(l).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fne.entry(l).or_default() += 1;
        }
    }
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let get = |m: &BTreeMap<usize, usize>, c: usize| m.get(&c).copied().unwrap_or(0) as f64;
    let macro_f1 = present
        .iter()
        .map(|&c| {
            let (t, f, n) = (get(&tp, c), get(&fp, c), get(&fne, c));
            if t == 0.0 {
                0.0
            } else {
                2.0 * t / (2.0 * t + f + n)
            }
        })
        .sum::<f64>()
        / present.len() as f64;
    // single-label multiclass: micro precision = micro recall = accuracy
    let micro = tp.values().sum::<usize>() as f64 / labels.len() as f64;
    Ok((macro_f1, micro))
}

/// Fraction of rows whose label appears in the first `k` entries of its ranking.
pub fn acc_at_k(ranked: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    check_aligned(ranked.len(), labels.len())?;
    let hits = ranked
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|x| x == *l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Class indices sorted by descending score, ties by index.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; rows with a zero label are skipped.
    pub mape: f64,
    pub mape_skipped: usize,
}

pub fn regression(preds: &[f64], labels: &[f64]) -> Result<Regression> {
    check_aligned(preds.len(), labels.len())?;
    let n = labels.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut skipped = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        abs += (p - y).abs();
        sq += (p - y) * (p - y);
        if y == 0.0 {
            skipped += 1;
        } else {
            pct += ((p - y) / y).abs();
        }
    }
    if skipped > 0 {
        debug!("MAPE skipped {skipped} zero labels");
    }
    let counted = labels.len() - skipped;
    Ok(Regression {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: if counted == 0 {
            f64::NAN
        } else {
            100.0 * pct / counted as f64
        },
        mape_skipped: skipped,
    })
}

/// `(C - D) / (n (n - 1) / 2)`; pairs tied in either vector count as neither.
pub fn kendall_tau(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} vs {} scores", pred.len(), truth.len())));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::input("kendall tau needs at least 2 items"));
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = (pred[i] - pred[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (truth[i] - truth[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
        }
    }
    Ok(s as f64 / (n * (n - 1) / 2) as f64)
}

/// 1-based mid-ranks (ties share the average rank).
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant vector has zero variance".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Closed-form rank correlation without ties; Pearson correlation of mid-ranks otherwise.
pub fn spearman_rho(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} vs {} scores", pred.len(), truth.len())));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::input("spearman rho needs at least 2 items"));
    }
    let rp = mid_ranks(pred);
    let rt = mid_ranks(truth);
    let tied = |r: &[f64]| {
        let mut s = r.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };
    if tied(&rp) || tied(&rt) {
        return pearson(&rp, &rt);
    }
    let d2: f64 = rp.iter().zip(&rt).map(|(a, b)| (a - b) * (a - b)).sum();
    let nf = n as f64;
    Ok(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)))
}
