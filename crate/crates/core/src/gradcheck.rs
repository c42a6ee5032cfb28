//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Gradients below this magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param_errors: BTreeMap<String, f64>,
    pub entries_checked: usize,
    /// Largest |analytic gradient| seen on a frozen parameter; must be 0.
    pub frozen_max_abs_grad: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.frozen_max_abs_grad == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `grad_fn` against central differences of `loss_fn` for every
/// trainable parameter in `store`.
///
/// `loss_fn` must be deterministic. The store is restored before returning.
pub fn grad_check<L, G>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    loss_fn: L,
    grad_fn: G,
) -> Result<GradReport>
where
    L: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<Vec<(ParamId, Vec<f64>)>>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let l = loss_fn(s)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFinite(format!("grad_check loss ({l})")))
        }
    };
    eval(store)?;
    let analytic: BTreeMap<ParamId, Vec<f64>> = grad_fn(store)?.into_iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param_errors = BTreeMap::new();
    let mut frozen_max_abs_grad: f64 = 0.0;
    let mut entries_checked = 0;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();

    for id in ids {
        let param = store.get(id);
        let name = param.name.clone();
        let n = param.tensor.numel();
        let grads = analytic.get(&id);
        if !param.trainable() {
            if let Some(g) = grads {
                let m = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                frozen_max_abs_grad = frozen_max_abs_grad.max(m);
            }
            continue;
        }
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in entries {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = grads.map_or(0.0, |g| g[i]);
            worst = worst.max(relative_error(a, numeric));
            entries_checked += 1;
        }
        per_param_errors.insert(name, worst);
    }

    let (worst_param, max_rel_error) = per_param_errors
        .iter()
        .fold((String::new(), 0.0f64), |(wn, we), (n, &e)| {
            if e > we || wn.is_empty() {
                (n.clone(), e)
            } else {
                (wn, we)
            }
        });
    Ok(GradReport {
        max_rel_error,
        worst_param,
        per_param_errors,
        entries_checked,
        frozen_max_abs_grad,
    })
}
