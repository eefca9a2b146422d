//! Finite-difference verification of reverse-mode gradients.
//!
//! The builder closure reconstructs the forward pass from the store's current
//! values; the harness turns the (arbitrary-shape) output into a scalar by a
//! fixed random projection, takes analytic gradients once, then perturbs each
//! sampled parameter coordinate by ±eps and rebuilds.
//!
//! Checks run at 64-bit only; central differences are meaningless at 32-bit.

use crate::error::{ExnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Cap on coordinates checked per parameter; above it, coordinates are
    /// sampled with a deterministic stride.
    pub max_coords: usize,
    /// Seed of the projection that scalarizes the output.
    pub seed: u64,
    /// Coordinates whose first estimate lands at or above this are
    /// re-measured at eps/8. Truncation error and kink straddles (a probe
    /// crossing a relu corner) shrink with the step; a wrong analytic
    /// gradient does not.
    pub refine_above: f64,
    /// Denominator floor as a fraction of the group's largest |gradient|.
    /// Coordinates far below the group's scale are checked absolutely —
    /// central differences cannot resolve them relatively once the
    /// difference sits at the roundoff floor of the loss.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_coords: 4096,
            seed: 0x5eed,
            refine_above: 1e-5,
            scale_floor: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("projection shape")
}

fn sampled_coords(numel: usize, max_coords: usize) -> Vec<usize> {
    if numel <= max_coords {
        (0..numel).collect()
    } else {
        let stride = numel.div_ceil(max_coords);
        (0..numel).step_by(stride).collect()
    }
}

/// Max over sampled coordinates of
/// |analytic − central-difference| / max(|analytic|, |numeric|, floor),
/// reported per parameter group; the floor is `scale_floor` times the
/// group's largest |gradient| so that roundoff on near-zero coordinates
/// does not read as a mismatch.
pub fn gradient_check<F>(
    store: &mut ParamStore<f64>,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &mut Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut binds = Bindings::new();
    let out = build(&mut g, store, &mut binds)?;
    let proj = projection(g.value(out).shape(), cfg.seed);
    let pv = g.input(proj.clone());
    let prod = g.mul(out, pv)?;
    let loss = g.sum_all(prod)?;
    let loss0 = g.value(loss).data()[0];
    if !loss0.is_finite() {
        return Err(ExnError::numeric(format!(
            "non-finite loss {loss0} before differentiation"
        )));
    }
    g.backward(loss)?;

    let bound: Vec<_> = binds
        .iter()
        .filter(|(id, _)| store.is_trainable(*id))
        .collect();
    let detached: Vec<String> = bound
        .iter()
        .filter(|(_, v)| g.grad(*v).is_none())
        .map(|(id, _)| store.name(*id).to_string())
        .collect();
    if !detached.is_empty() {
        return Err(ExnError::graph(format!(
            "parameters detached from the loss: {}",
            detached.join(", ")
        )));
    }

    let analytic: Vec<(String, Tensor<f64>)> = bound
        .iter()
        .map(|(id, v)| (store.name(*id).to_string(), g.grad(*v).unwrap().clone()))
        .collect();
    let ids: Vec<_> = bound.iter().map(|(id, _)| *id).collect();
    drop(g);

    let eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let out = build(&mut g, store, &mut binds)?;
        let pv = g.input(proj.clone());
        let prod = g.mul(out, pv)?;
        let loss = g.sum_all(prod)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(ExnError::numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let mut groups = Vec::new();
    let mut overall = 0f64;
    for (gi, id) in ids.iter().enumerate() {
        let numel = store.value(*id).numel();
        let coords = sampled_coords(numel, cfg.max_coords);
        let gmax = analytic[gi]
            .1
            .data()
            .iter()
            .fold(0f64, |m, v| m.max(v.abs()));
        let floor = (cfg.scale_floor * gmax).max(1e-8);
        let mut worst = 0f64;
        for &ci in &coords {
            let a = analytic[gi].1.data()[ci];
            let probe = |eps: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                let orig = store.value(*id).data()[ci];
                store.value_mut(*id).data_mut()[ci] = orig + eps;
                let lp = eval(store)?;
                store.value_mut(*id).data_mut()[ci] = orig - eps;
                let lm = eval(store)?;
                store.value_mut(*id).data_mut()[ci] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor))
            };
            let mut rel = probe(cfg.eps, store)?;
            if rel >= cfg.refine_above {
                rel = rel.min(probe(cfg.eps / 8.0, store)?);
            }
            if rel > worst {
                worst = rel;
            }
        }
        groups.push(GroupResult {
            name: analytic[gi].0.clone(),
            checked: coords.len(),
            max_rel_err: worst,
        });
        if worst > overall {
            overall = worst;
        }
    }
    Ok(GradCheckReport {
        groups,
        max_rel_err: overall,
    })
}
