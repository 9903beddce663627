//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients whose magnitude falls below this floor are compared on an
/// absolute scale; above it, relatively. Keeps finite-difference noise
/// (~1e-8 absolute for O(1) losses) from drowning legitimately tiny
/// gradients while still catching factor-level mistakes.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare reverse-mode gradients of a deterministic scalar function of
/// the store against central finite differences (step 1e-5).
///
/// At most `max_coords_per_param` coordinates are probed per parameter
/// (all of them when the tensor is small), chosen by the caller's RNG so
/// repeated runs with fresh seeds sweep different coordinates.
pub fn grad_check<F>(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    max_coords_per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check objective is not finite".into()));
        }
        Ok(v)
    };

    // Reverse-mode gradients at the current point.
    store.zero_grads();
    let mut g = Graph::new();
    let loss_id = f(&mut g, store)?;
    let loss = g.value(loss_id).item();
    if !loss.is_finite() {
        return Err(Error::Numeric("grad_check objective is not finite".into()));
    }
    let grads = g.backward(loss_id)?;
    g.accumulate_param_grads(&grads, store)?;

    let names: Vec<String> = store.names().map(String::from).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
        loss,
    };
    for name in names {
        let n = store.get(&name)?.numel();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords_per_param).into_vec()
        };
        let ad_grad: Tensor = store.grad(&name)?.clone();
        for idx in coords {
            store.perturb(&name, idx, FD_STEP)?;
            let plus = eval(store)?;
            store.perturb(&name, idx, -2.0 * FD_STEP)?;
            let minus = eval(store)?;
            store.perturb(&name, idx, FD_STEP)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ad = ad_grad.data()[idx];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
