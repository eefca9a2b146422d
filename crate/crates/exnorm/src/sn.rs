//! Switchable mixture layer: dataset-global learned blend of pool statistics.
//!
//! One softmax over K mean-logits picks the mixed mean, another over K
//! var-logits picks the mixed variance (the squared deviations are blended,
//! not the deviations). The mixed statistics are broadcast to per-sample
//! per-channel granularity and the result gets a single per-channel affine.

use crate::error::{ExnError, Result};
use crate::graph::{Graph, Var};
use crate::normalizers::{
    moment_nodes, running_moment_nodes, stats_per_sample_channel, update_running_entries,
    MomentNodes, NormalizerKind, RunningStats,
};
use crate::params::{Bindings, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numerically stable softmax of a small slice.
pub fn softmax_slice<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of_f64(e / denom)).collect()
}

#[derive(Debug, Clone)]
pub struct SnLayer {
    pub pool: Vec<NormalizerKind>,
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
    pub tied: bool,
    gamma: ParamId,
    beta: ParamId,
    mean_logits: ParamId,
    var_logits: Option<ParamId>,
    running: Option<(ParamId, ParamId)>,
}

impl SnLayer {
    /// Registers γ=1, β=0 and zero logits (uniform initial ratios). With
    /// `tied`, mean and variance share one logit vector.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        pool: &[NormalizerKind],
        tied: bool,
        eps: f64,
    ) -> Result<Self> {
        if pool.len() < 2 {
            return Err(ExnError::invalid("mixture pool needs at least 2 members"));
        }
        for (i, k) in pool.iter().enumerate() {
            k.validate(c)?;
            if pool[..i].contains(k) {
                return Err(ExnError::invalid(format!(
                    "duplicate pool member {}",
                    k.short_name()
                )));
            }
        }
        let k = pool.len();
        let gamma = store.add(&format!("{prefix}.gamma"), Tensor::ones(&[c]), true)?;
        let beta = store.add(&format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?;
        let mean_logits = store.add(&format!("{prefix}.mean_logits"), Tensor::zeros(&[k]), true)?;
        let var_logits = if tied {
            None
        } else {
            Some(store.add(&format!("{prefix}.var_logits"), Tensor::zeros(&[k]), true)?)
        };
        let running = if pool.contains(&NormalizerKind::Batch) {
            let rm = store.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false)?;
            let rv = store.add(&format!("{prefix}.running_var"), Tensor::ones(&[c]), false)?;
            Some((rm, rv))
        } else {
            None
        };
        Ok(SnLayer {
            pool: pool.to_vec(),
            c,
            eps,
            momentum: 0.1,
            tied,
            gamma,
            beta,
            mean_logits,
            var_logits,
            running,
        })
    }

    /// Current (mean, variance) mixture weights, each on the K-simplex.
    pub fn ratios<T: Scalar>(&self, store: &ParamStore<T>) -> (Vec<T>, Vec<T>) {
        let mw = softmax_slice(store.value(self.mean_logits).data());
        let vw = match self.var_logits {
            Some(id) => softmax_slice(store.value(id).data()),
            None => mw.clone(),
        };
        (mw, vw)
    }

    /// Pool statistics for the current step: batch members use running stats
    /// in eval mode; train mode also advances the running stats.
    fn pool_stats<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Vec<MomentNodes>> {
        let mut stats = Vec::with_capacity(self.pool.len());
        for kind in &self.pool {
            let m = match (kind, mode, self.running) {
                (NormalizerKind::Batch, Mode::Eval, Some((rm, rv))) => {
                    let rs = RunningStats {
                        mean: store.value(rm).clone(),
                        var: store.value(rv).clone(),
                        momentum: self.momentum,
                    };
                    running_moment_nodes(g, &rs)?
                }
                _ => {
                    let m = moment_nodes(g, x, *kind)?;
                    if *kind == NormalizerKind::Batch {
                        if let (Mode::Train, Some((rm, rv))) = (mode, self.running) {
                            update_running_entries(g, store, &m, rm, rv, self.momentum)?;
                        }
                    }
                    m
                }
            };
            stats.push(m);
        }
        Ok(stats)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.c {
            return Err(ExnError::shape(format!(
                "layer of width {} got input {:?}",
                self.c, xs
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let k = self.pool.len();
        let stats = self.pool_stats(g, store, x, mode)?;

        let mean_w = {
            let lv = binds.bind(g, store, self.mean_logits);
            let row = g.reshape(lv, &[1, k])?;
            g.softmax_rows(row)?
        };
        let var_w = match self.var_logits {
            Some(id) => {
                let lv = binds.bind(g, store, id);
                let row = g.reshape(lv, &[1, k])?;
                g.softmax_rows(row)?
            }
            None => mean_w,
        };

        let mut mixed_mean: Option<Var> = None;
        let mut mixed_var: Option<Var> = None;
        for (ki, m) in stats.iter().enumerate() {
            let (mu, va) = stats_per_sample_channel(g, m, n, c)?;
            let wm = g.select(mean_w, 1, ki)?;
            let wm4 = g.reshape(wm, &[1, 1, 1, 1])?;
            let wv = g.select(var_w, 1, ki)?;
            let wv4 = g.reshape(wv, &[1, 1, 1, 1])?;
            let tm = g.mul(mu, wm4)?;
            let tv = g.mul(va, wv4)?;
            mixed_mean = Some(match mixed_mean {
                Some(acc) => g.add(acc, tm)?,
                None => tm,
            });
            mixed_var = Some(match mixed_var {
                Some(acc) => g.add(acc, tv)?,
                None => tv,
            });
        }
        let mixed_mean = mixed_mean.expect("pool nonempty");
        let mixed_var = mixed_var.expect("pool nonempty");

        let centered = g.sub(x, mixed_mean)?;
        let veps = g.add_scalar(mixed_var, self.eps)?;
        let denom = g.sqrt(veps)?;
        let xhat = g.div(centered, denom)?;

        let gamma = binds.bind(g, store, self.gamma);
        let beta = binds.bind(g, store, self.beta);
        let g4 = g.reshape(gamma, &[1, self.c, 1, 1])?;
        let b4 = g.reshape(beta, &[1, self.c, 1, 1])?;
        let scaled = g.mul(xhat, g4)?;
        g.add(scaled, b4)
    }

    /// Testing hook: overwrite both logit vectors.
    pub fn set_logits<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        mean_logits: &[f64],
        var_logits: &[f64],
    ) -> Result<()> {
        let k = self.pool.len();
        if mean_logits.len() != k || var_logits.len() != k {
            return Err(ExnError::invalid(format!(
                "expected {k} logits per vector"
            )));
        }
        for (dst, src) in store
            .value_mut(self.mean_logits)
            .data_mut()
            .iter_mut()
            .zip(mean_logits)
        {
            *dst = T::of_f64(*src);
        }
        if let Some(id) = self.var_logits {
            for (dst, src) in store.value_mut(id).data_mut().iter_mut().zip(var_logits) {
                *dst = T::of_f64(*src);
            }
        }
        Ok(())
    }
}
