//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Outcome of a gradient check over a set of parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    /// Parameters in the requested set that received no analytic gradient.
    pub missing: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.missing.is_empty() && self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries whose true gradient is
/// (numerically) zero from dividing round-off by round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences with step `h` for every entry of the
/// given parameters (at most `max_entries` sampled entries per tensor).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    max_entries: usize,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> (Graph<f64>, Var),
{
    let (g, l) = loss(store);
    let grads = g.backward(l);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        missing: Vec::new(),
    };
    for &id in ids {
        let name = store.name(id).to_string();
        let Some(analytic) = grads.get(id).cloned() else {
            report.missing.push(name);
            continue;
        };
        let n = analytic.len();
        let entries: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            // Prefer entries that actually carry gradient (sparse table lookups).
            let mut nz: Vec<usize> = (0..n).filter(|&i| analytic.data()[i] != 0.0).collect();
            if nz.len() > max_entries {
                let pick = sample(&mut rng, nz.len(), max_entries);
                nz = pick.into_iter().map(|i| nz[i]).collect();
            }
            if nz.is_empty() {
                sample(&mut rng, n, max_entries.min(n)).into_vec()
            } else {
                nz
            }
        };
        for i in entries {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let (gp, lp) = loss(store);
            let fp = gp.value(lp).item();
            store.get_mut(id).data_mut()[i] = orig - h;
            let (gm, lm) = loss(store);
            let fm = gm.value(lm).item();
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric, 1e-4);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{name}[{i}] analytic={:.6e} numeric={numeric:.6e}",
                    analytic.data()[i]
                );
            }
        }
    }
    report
}
