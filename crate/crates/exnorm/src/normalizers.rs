//! The four classic feature normalizers over [N, C, H, W] tensors.
//!
//! Each normalizer standardizes with mean/std reduced over its own axes:
//! batch reduces (N, H, W) per channel, instance (H, W) per sample-channel,
//! layer (C, H, W) per sample, group (C/g, H, W) per sample-group. Variance
//! is population (divide by count) and accumulates in f64.
//!
//! Group statistics are computed by reshaping to [N·g, C/g, H, W] and
//! reducing layer-style, which makes g=1 coincide with layer norm and g=C
//! with instance norm exactly.

use crate::error::{ExnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalizerKind {
    Batch,
    Instance,
    Layer,
    Group(usize),
}

impl NormalizerKind {
    pub fn validate(&self, c: usize) -> Result<()> {
        if let NormalizerKind::Group(g) = self {
            if *g == 0 {
                return Err(ExnError::invalid("group count must be positive"));
            }
            if c % g != 0 {
                return Err(ExnError::invalid(format!(
                    "channels {c} not divisible by group count {g}"
                )));
            }
        }
        Ok(())
    }

    pub fn short_name(&self) -> String {
        match self {
            NormalizerKind::Batch => "bn".to_string(),
            NormalizerKind::Instance => "in".to_string(),
            NormalizerKind::Layer => "ln".to_string(),
            NormalizerKind::Group(g) => format!("gn{g}"),
        }
    }
}

/// Mean/std of one normalizer. Compact shapes: batch [C], instance [N, C],
/// layer [N], group [N, g].
#[derive(Debug, Clone)]
pub struct MomentPair<T> {
    pub kind: NormalizerKind,
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

fn shape4<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(ExnError::shape(format!(
            "normalizer input must be [N, C, H, W], got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Reduction axes over the grouped view [N·g, C/g, H, W]; identity grouping
/// (g irrelevant) for the other kinds.
fn reduce_axes(kind: NormalizerKind) -> Vec<usize> {
    match kind {
        NormalizerKind::Batch => vec![0, 2, 3],
        NormalizerKind::Instance => vec![2, 3],
        NormalizerKind::Layer | NormalizerKind::Group(_) => vec![1, 2, 3],
    }
}

/// View of x that makes the kind's reduction expressible on fixed axes.
/// Only group norm actually reshapes.
fn grouped_view<T: Scalar>(x: &Tensor<T>, kind: NormalizerKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = shape4(x)?;
    match kind {
        NormalizerKind::Group(g) => x.reshape(&[n * g, c / g, h, w]),
        _ => Ok(x.clone()),
    }
}

fn compact_moment_shape(kind: NormalizerKind, n: usize, c: usize) -> Vec<usize> {
    match kind {
        NormalizerKind::Batch => vec![c],
        NormalizerKind::Instance => vec![n, c],
        NormalizerKind::Layer => vec![n],
        NormalizerKind::Group(g) => vec![n, g],
    }
}

pub fn compute_moments<T: Scalar>(
    x: &Tensor<T>,
    kind: NormalizerKind,
) -> Result<MomentPair<T>> {
    let (n, c, _, _) = shape4(x)?;
    kind.validate(c)?;
    let view = grouped_view(x, kind)?;
    let axes = reduce_axes(kind);
    let mean_kept = view.reduce(&axes, true, true)?;
    let dev = {
        let mb = mean_kept.broadcast_to(view.shape())?;
        let mut d = view.clone();
        for (v, m) in d.data_mut().iter_mut().zip(mb.data()) {
            *v = *v - *m;
        }
        d
    };
    let sq = dev.map(|v| v * v);
    let var_kept = sq.reduce(&axes, true, true)?;
    let compact = compact_moment_shape(kind, n, c);
    let mean = mean_kept.reshape(&compact)?;
    let std = var_kept.reshape(&compact)?.map(|v| v.sqrt());
    Ok(MomentPair { kind, mean, std })
}

/// Eq-style standardization (x − μ)/√(σ² + ε) with moments broadcast back
/// over the kind's reduced axes.
pub fn standardize<T: Scalar>(x: &Tensor<T>, m: &MomentPair<T>, eps: f64) -> Result<Tensor<T>> {
    let (n, c, h, w) = shape4(x)?;
    if m.mean.shape() != compact_moment_shape(m.kind, n, c).as_slice() {
        return Err(ExnError::shape(format!(
            "moment shape {:?} incompatible with input {:?} for {}",
            m.mean.shape(),
            x.shape(),
            m.kind.short_name()
        )));
    }
    let view = grouped_view(x, m.kind)?;
    let kept: Vec<usize> = match m.kind {
        NormalizerKind::Batch => vec![1, c, 1, 1],
        NormalizerKind::Instance => vec![n, c, 1, 1],
        NormalizerKind::Layer => vec![n, 1, 1, 1],
        NormalizerKind::Group(g) => vec![n * g, 1, 1, 1],
    };
    let mb = m.mean.reshape(&kept)?.broadcast_to(view.shape())?;
    let sb = m.std.reshape(&kept)?.broadcast_to(view.shape())?;
    let epsv = T::of_f64(eps);
    let mut out = view.clone();
    for ((v, mu), sd) in out.data_mut().iter_mut().zip(mb.data()).zip(sb.data()) {
        *v = (*v - *mu) / (*sd * *sd + epsv).sqrt();
    }
    out.reshape(&[n, c, h, w])
}

/// out[n,c,h,w] = γ[c]·x̂[n,c,h,w] + β[c]
pub fn affine_transform<T: Scalar>(
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = shape4(xhat)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(ExnError::shape(format!(
            "affine wants γ, β of shape [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let gb = gamma.reshape(&[1, c, 1, 1])?.broadcast_to(xhat.shape())?;
    let bb = beta.reshape(&[1, c, 1, 1])?.broadcast_to(xhat.shape())?;
    let mut out = xhat.clone();
    for ((v, g), b) in out.data_mut().iter_mut().zip(gb.data()).zip(bb.data()) {
        *v = *g * *v + *b;
    }
    Ok(out)
}

/// Exponentially averaged batch-member statistics used at inference.
#[derive(Debug, Clone)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(c: usize, momentum: f64) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[c]),
            var: Tensor::ones(&[c]),
            momentum,
        }
    }

    /// running ← (1−m)·running + m·batch, for mean and variance.
    pub fn update(&mut self, batch: &MomentPair<T>) -> Result<()> {
        if batch.kind != NormalizerKind::Batch {
            return Err(ExnError::invalid(format!(
                "running stats update wants batch-norm moments, got {}",
                batch.kind.short_name()
            )));
        }
        if batch.mean.shape() != self.mean.shape() {
            return Err(ExnError::shape(format!(
                "running stats length {:?} vs batch {:?}",
                self.mean.shape(),
                batch.mean.shape()
            )));
        }
        let m = T::of_f64(self.momentum);
        let keep = T::one() - m;
        for (r, b) in self.mean.data_mut().iter_mut().zip(batch.mean.data()) {
            *r = keep * *r + m * *b;
        }
        for (r, s) in self.var.data_mut().iter_mut().zip(batch.std.data()) {
            *r = keep * *r + m * (*s * *s);
        }
        Ok(())
    }
}

/// Mean/variance graph nodes for one normalizer, in shapes that broadcast
/// against the (possibly grouped-view) input: batch [1,C,1,1], instance
/// [N,C,1,1], layer [N,1,1,1], group [N·g,1,1,1].
#[derive(Debug, Clone, Copy)]
pub struct MomentNodes {
    pub kind: NormalizerKind,
    pub mean: Var,
    pub var: Var,
}

/// Batch-statistics moment nodes computed from x on the tape (training path).
pub fn moment_nodes<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    kind: NormalizerKind,
) -> Result<MomentNodes> {
    let (n, c, h, w) = shape4(g.value(x))?;
    kind.validate(c)?;
    let view = match kind {
        NormalizerKind::Group(gr) => g.reshape(x, &[n * gr, c / gr, h, w])?,
        _ => x,
    };
    let axes = reduce_axes(kind);
    let mean = g.reduce_mean(view, &axes, true)?;
    let dev = g.sub(view, mean)?;
    let sq = g.mul(dev, dev)?;
    let var = g.reduce_mean(sq, &axes, true)?;
    Ok(MomentNodes { kind, mean, var })
}

/// Moment nodes for the batch member backed by frozen running statistics
/// (inference path). The leaves carry no gradient.
pub fn running_moment_nodes<T: Scalar>(
    g: &mut Graph<T>,
    rs: &RunningStats<T>,
) -> Result<MomentNodes> {
    let c = rs.mean.numel();
    let mean = g.input(rs.mean.reshape(&[1, c, 1, 1])?);
    let var = g.input(rs.var.reshape(&[1, c, 1, 1])?);
    Ok(MomentNodes {
        kind: NormalizerKind::Batch,
        mean,
        var,
    })
}

/// Standardizes the full-resolution tensor with the given moment nodes.
pub fn standardize_node<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    m: &MomentNodes,
    eps: f64,
) -> Result<Var> {
    let (n, c, h, w) = shape4(g.value(x))?;
    let view = match m.kind {
        NormalizerKind::Group(gr) => g.reshape(x, &[n * gr, c / gr, h, w])?,
        _ => x,
    };
    let centered = g.sub(view, m.mean)?;
    let veps = g.add_scalar(m.var, eps)?;
    let denom = g.sqrt(veps)?;
    let out = g.div(centered, denom)?;
    match m.kind {
        NormalizerKind::Group(_) => g.reshape(out, &[n, c, h, w]),
        _ => Ok(out),
    }
}

/// Standardizes pooled per-sample features [N, C] with full-tensor moments.
/// Batch stats broadcast over samples, instance stats apply directly, layer
/// stats broadcast over channels, group stats broadcast within each group.
pub fn standardize_pooled_node<T: Scalar>(
    g: &mut Graph<T>,
    pooled: Var,
    m: &MomentNodes,
    eps: f64,
) -> Result<Var> {
    let ps = g.value(pooled).shape().to_vec();
    if ps.len() != 2 {
        return Err(ExnError::shape(format!(
            "pooled features must be [N, C], got {ps:?}"
        )));
    }
    let (n, c) = (ps[0], ps[1]);
    let (view, mean2, var2) = match m.kind {
        NormalizerKind::Batch => {
            let mean = g.reshape(m.mean, &[1, c])?;
            let var = g.reshape(m.var, &[1, c])?;
            (pooled, mean, var)
        }
        NormalizerKind::Instance => {
            let mean = g.reshape(m.mean, &[n, c])?;
            let var = g.reshape(m.var, &[n, c])?;
            (pooled, mean, var)
        }
        NormalizerKind::Layer => {
            let mean = g.reshape(m.mean, &[n, 1])?;
            let var = g.reshape(m.var, &[n, 1])?;
            (pooled, mean, var)
        }
        NormalizerKind::Group(gr) => {
            let view = g.reshape(pooled, &[n, gr, c / gr])?;
            let mean = g.reshape(m.mean, &[n, gr, 1])?;
            let var = g.reshape(m.var, &[n, gr, 1])?;
            (view, mean, var)
        }
    };
    let centered = g.sub(view, mean2)?;
    let veps = g.add_scalar(var2, eps)?;
    let denom = g.sqrt(veps)?;
    let out = g.div(centered, denom)?;
    match m.kind {
        NormalizerKind::Group(_) => g.reshape(out, &[n, c]),
        _ => Ok(out),
    }
}

/// Reads the batch-member moments off the tape in compact [C] shapes,
/// for running-statistics updates.
pub fn batch_moments_from_nodes<T: Scalar>(g: &Graph<T>, m: &MomentNodes) -> Result<MomentPair<T>> {
    if m.kind != NormalizerKind::Batch {
        return Err(ExnError::invalid(
            "compact readout is for the batch member".to_string(),
        ));
    }
    let c = g.value(m.mean).numel();
    let mean = g.value(m.mean).reshape(&[c])?;
    let std = g.value(m.var).reshape(&[c])?.map(|v| v.sqrt());
    Ok(MomentPair {
        kind: NormalizerKind::Batch,
        mean,
        std,
    })
}

/// EMA-updates running mean/var entries in the store from the batch-member
/// moment nodes of the current tape.
pub fn update_running_entries<T: Scalar>(
    g: &Graph<T>,
    store: &mut ParamStore<T>,
    m: &MomentNodes,
    mean_id: ParamId,
    var_id: ParamId,
    momentum: f64,
) -> Result<()> {
    let batch = batch_moments_from_nodes(g, m)?;
    let mm = T::of_f64(momentum);
    let keep = T::one() - mm;
    for (r, b) in store
        .value_mut(mean_id)
        .data_mut()
        .iter_mut()
        .zip(batch.mean.data())
    {
        *r = keep * *r + mm * *b;
    }
    for (r, s) in store
        .value_mut(var_id)
        .data_mut()
        .iter_mut()
        .zip(batch.std.data())
    {
        *r = keep * *r + mm * (*s * *s);
    }
    Ok(())
}

/// Expands a member's moment nodes to per-sample-per-channel [N, C, 1, 1],
/// the finest granularity present across kinds. Used when mixing statistics
/// from members with different reduction axes.
pub fn stats_per_sample_channel<T: Scalar>(
    g: &mut Graph<T>,
    m: &MomentNodes,
    n: usize,
    c: usize,
) -> Result<(Var, Var)> {
    let target = [n, c, 1, 1];
    let expand = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        match m.kind {
            NormalizerKind::Batch | NormalizerKind::Layer => g.broadcast(v, &target),
            NormalizerKind::Instance => Ok(v),
            NormalizerKind::Group(gr) => {
                let r = g.reshape(v, &[n, gr, 1, 1])?;
                let b = g.broadcast(r, &[n, gr, c / gr, 1])?;
                g.reshape(b, &target)
            }
        }
    };
    let mean = expand(g, m.mean)?;
    let var = expand(g, m.var)?;
    Ok((mean, var))
}

/// A single classic normalizer as a complete layer: standardize over the
/// kind's axes, then per-channel scale and shift. The batch kind keeps
/// running statistics for inference.
#[derive(Debug, Clone)]
pub struct PlainNormLayer {
    pub kind: NormalizerKind,
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
    gamma: ParamId,
    beta: ParamId,
    running: Option<(ParamId, ParamId)>,
}

impl PlainNormLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        kind: NormalizerKind,
        eps: f64,
    ) -> Result<Self> {
        kind.validate(c)?;
        let gamma = store.add(&format!("{prefix}.gamma"), Tensor::ones(&[c]), true)?;
        let beta = store.add(&format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?;
        let running = if kind == NormalizerKind::Batch {
            let rm = store.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false)?;
            let rv = store.add(&format!("{prefix}.running_var"), Tensor::ones(&[c]), false)?;
            Some((rm, rv))
        } else {
            None
        };
        Ok(PlainNormLayer {
            kind,
            c,
            eps,
            momentum: 0.1,
            gamma,
            beta,
            running,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let m = match (self.kind, mode, self.running) {
            (NormalizerKind::Batch, Mode::Eval, Some((rm, rv))) => {
                let rs = RunningStats {
                    mean: store.value(rm).clone(),
                    var: store.value(rv).clone(),
                    momentum: self.momentum,
                };
                running_moment_nodes(g, &rs)?
            }
            _ => {
                let m = moment_nodes(g, x, self.kind)?;
                if let (Mode::Train, Some((rm, rv))) = (mode, self.running) {
                    update_running_entries(g, store, &m, rm, rv, self.momentum)?;
                }
                m
            }
        };
        let xhat = standardize_node(g, x, &m, self.eps)?;
        let gamma = binds.bind(g, store, self.gamma);
        let beta = binds.bind(g, store, self.beta);
        let g4 = g.reshape(gamma, &[1, self.c, 1, 1])?;
        let b4 = g.reshape(beta, &[1, self.c, 1, 1])?;
        let scaled = g.mul(xhat, g4)?;
        g.add(scaled, b4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn instance_moments_known_map() {
        // Single (n, c) map [[1,3],[5,7]]: mean 4, population std √5.
        let x = t(&[1, 1, 2, 2], &[1., 3., 5., 7.]);
        let m = compute_moments(&x, NormalizerKind::Instance).unwrap();
        assert_eq!(m.mean.shape(), &[1, 1]);
        assert!((m.mean.data()[0] - 4.0).abs() < 1e-12);
        assert!((m.std.data()[0] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_tensor_has_zero_std_every_kind() {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], 7.5);
        for kind in [
            NormalizerKind::Batch,
            NormalizerKind::Instance,
            NormalizerKind::Layer,
            NormalizerKind::Group(2),
        ] {
            let m = compute_moments(&x, kind).unwrap();
            assert!(m.mean.data().iter().all(|&v| (v - 7.5).abs() < 1e-12));
            assert!(m.std.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn batch_moments_two_sample_example() {
        // Channel maps all-0 (sample 0) and all-4 (sample 1): mean 2, std 2.
        let mut data = vec![0.0f64; 8];
        for v in &mut data[4..] {
            *v = 4.0;
        }
        let x = t(&[2, 1, 2, 2], &data);
        let m = compute_moments(&x, NormalizerKind::Batch).unwrap();
        assert_eq!(m.mean.shape(), &[1]);
        assert!((m.mean.data()[0] - 2.0).abs() < 1e-12);
        assert!((m.std.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_input_is_zero() {
        let x = Tensor::<f64>::full(&[2, 2, 2, 2], 3.0);
        let m = compute_moments(&x, NormalizerKind::Layer).unwrap();
        let y = standardize(&x, &m, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn standardize_instance_known_answer_small_eps() {
        let x = t(&[1, 1, 2, 2], &[1., 3., 5., 7.]);
        let m = compute_moments(&x, NormalizerKind::Instance).unwrap();
        let y = standardize(&x, &m, 1e-12).unwrap();
        let s5 = 5f64.sqrt();
        let want = [-3.0 / s5, -1.0 / s5, 1.0 / s5, 3.0 / s5];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn standardize_scale_invariant_when_variance_large() {
        let x = t(&[1, 2, 2, 1], &[1., 9., -4., 6.]);
        let xs = x.map(|v| v * 10.0);
        let m1 = compute_moments(&x, NormalizerKind::Layer).unwrap();
        let m2 = compute_moments(&xs, NormalizerKind::Layer).unwrap();
        let y1 = standardize(&x, &m1, 1e-5).unwrap();
        let y2 = standardize(&xs, &m2, 1e-5).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn affine_identity_and_shift() {
        let x = t(&[1, 2, 1, 2], &[1., 2., 3., 4.]);
        let id = affine_transform(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(id.data(), x.data());
        let z = Tensor::<f64>::zeros(&[1, 2, 1, 2]);
        let b = t(&[2], &[5., -1.]);
        let shifted = affine_transform(&z, &Tensor::ones(&[2]), &b).unwrap();
        assert_eq!(shifted.data(), &[5., 5., -1., -1.]);
        assert!(affine_transform(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn running_stats_one_step_and_fixed_point() {
        let mut rs = RunningStats::<f64>::new(1, 0.1);
        rs.mean.data_mut()[0] = 0.0;
        rs.var.data_mut()[0] = 0.0;
        let batch = MomentPair {
            kind: NormalizerKind::Batch,
            mean: t(&[1], &[2.0]),
            std: t(&[1], &[0.0]),
        };
        rs.update(&batch).unwrap();
        assert!((rs.mean.data()[0] - 0.2).abs() < 1e-12);

        // batch == running is a fixed point
        let mut rs2 = RunningStats::<f64>::new(1, 0.1);
        rs2.mean.data_mut()[0] = 3.0;
        rs2.var.data_mut()[0] = 4.0;
        let fixed = MomentPair {
            kind: NormalizerKind::Batch,
            mean: t(&[1], &[3.0]),
            std: t(&[1], &[2.0]),
        };
        rs2.update(&fixed).unwrap();
        assert!((rs2.mean.data()[0] - 3.0).abs() < 1e-12);
        assert!((rs2.var.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn running_stats_converge_geometrically() {
        let mut rs = RunningStats::<f64>::new(1, 0.1);
        let batch = MomentPair {
            kind: NormalizerKind::Batch,
            mean: t(&[1], &[5.0]),
            std: t(&[1], &[3.0]),
        };
        for _ in 0..1000 {
            rs.update(&batch).unwrap();
        }
        assert!((rs.mean.data()[0] - 5.0).abs() < 1e-6);
        assert!((rs.var.data()[0] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn running_stats_reject_wrong_kind() {
        let mut rs = RunningStats::<f64>::new(1, 0.1);
        let wrong = MomentPair {
            kind: NormalizerKind::Instance,
            mean: t(&[1, 1], &[0.0]),
            std: t(&[1, 1], &[1.0]),
        };
        assert!(rs.update(&wrong).is_err());
    }

    #[test]
    fn group_norm_edges_equal_layer_and_instance() {
        let data: Vec<f64> = (0..2 * 4 * 2 * 2).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let x = t(&[2, 4, 2, 2], &data);
        let eps = 1e-5;
        let ln = standardize(&x, &compute_moments(&x, NormalizerKind::Layer).unwrap(), eps).unwrap();
        let g1 = standardize(&x, &compute_moments(&x, NormalizerKind::Group(1)).unwrap(), eps).unwrap();
        assert_eq!(ln.data(), g1.data());
        let inn = standardize(&x, &compute_moments(&x, NormalizerKind::Instance).unwrap(), eps).unwrap();
        let gc = standardize(&x, &compute_moments(&x, NormalizerKind::Group(4)).unwrap(), eps).unwrap();
        for (a, b) in inn.data().iter().zip(gc.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = Tensor::<f64>::zeros(&[1, 5, 2, 2]);
        assert!(compute_moments(&x, NormalizerKind::Group(2)).is_err());
    }

    #[test]
    fn standardized_output_has_unit_moments() {
        let data: Vec<f64> = (0..3 * 4 * 3 * 3)
            .map(|i| ((i * 2654435761usize) % 1000) as f64 / 100.0 - 5.0)
            .collect();
        let x = t(&[3, 4, 3, 3], &data);
        for kind in [
            NormalizerKind::Batch,
            NormalizerKind::Instance,
            NormalizerKind::Layer,
            NormalizerKind::Group(2),
        ] {
            let m = compute_moments(&x, kind).unwrap();
            let y = standardize(&x, &m, 1e-5).unwrap();
            let m2 = compute_moments(&y, kind).unwrap();
            for &mu in m2.mean.data() {
                assert!(mu.abs() < 1e-6, "{kind:?} mean {mu}");
            }
            for &sd in m2.std.data() {
                assert!((sd - 1.0).abs() < 1e-4, "{kind:?} std {sd}");
            }
        }
    }

    #[test]
    fn graph_standardize_matches_eager() {
        let data: Vec<f64> = (0..2 * 4 * 2 * 2).map(|i| (i as f64) * 0.83 - 6.0).collect();
        let x = t(&[2, 4, 2, 2], &data);
        for kind in [
            NormalizerKind::Batch,
            NormalizerKind::Instance,
            NormalizerKind::Layer,
            NormalizerKind::Group(2),
        ] {
            let eager = standardize(&x, &compute_moments(&x, kind).unwrap(), 1e-5).unwrap();
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let m = moment_nodes(&mut g, xv, kind).unwrap();
            let y = standardize_node(&mut g, xv, &m, 1e-5).unwrap();
            let diff = crate::tensor::max_abs_diff(g.value(y), &eager);
            assert!(diff < 1e-12, "{kind:?} diff {diff}");
        }
    }

    #[test]
    fn plain_layer_train_matches_eager_standardize() {
        let data: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| (i as f64) * 1.3 - 5.0).collect();
        let x = t(&[2, 2, 2, 2], &data);
        let mut store = ParamStore::new();
        let layer = PlainNormLayer::new(&mut store, "n", 2, NormalizerKind::Batch, 1e-5).unwrap();
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(x.clone());
        let y = layer
            .forward(&mut g, &mut store, &mut binds, xv, Mode::Train)
            .unwrap();
        let eager =
            standardize(&x, &compute_moments(&x, NormalizerKind::Batch).unwrap(), 1e-5).unwrap();
        assert!(crate::tensor::max_abs_diff(g.value(y), &eager) < 1e-12);
        // Train mode moved the running stats off their (0, 1) init.
        let rm = store.value(store.id("n.running_mean").unwrap());
        assert!(rm.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn plain_layer_eval_uses_running_stats() {
        let x = t(&[2, 1, 1, 2], &[0., 4., 2., 6.]);
        let mut store = ParamStore::new();
        let layer = PlainNormLayer::new(&mut store, "n", 1, NormalizerKind::Batch, 1e-5).unwrap();
        // Inference right after init standardizes with mean 0, var 1.
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(x.clone());
        let y = layer
            .forward(&mut g, &mut store, &mut binds, xv, Mode::Eval)
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // Train once, then eval differs from train output because running
        // stats have only moved 10% of the way to the batch stats.
        let mut g2 = Graph::new();
        let mut b2 = Bindings::new();
        let xv2 = g2.input(x.clone());
        let ytrain = layer
            .forward(&mut g2, &mut store, &mut b2, xv2, Mode::Train)
            .unwrap();
        let mut g3 = Graph::new();
        let mut b3 = Bindings::new();
        let xv3 = g3.input(x.clone());
        let yeval = layer
            .forward(&mut g3, &mut store, &mut b3, xv3, Mode::Eval)
            .unwrap();
        let diff = crate::tensor::max_abs_diff(g2.value(ytrain), g3.value(yeval));
        assert!(diff > 1e-3, "train and eval outputs should differ, diff {diff}");
    }

    #[test]
    fn stats_expand_to_sample_channel_granularity() {
        let data: Vec<f64> = (0..2 * 4 * 2 * 2).map(|i| (i as f64) * 0.21 - 1.7).collect();
        let x = t(&[2, 4, 2, 2], &data);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        for kind in [
            NormalizerKind::Batch,
            NormalizerKind::Instance,
            NormalizerKind::Layer,
            NormalizerKind::Group(2),
        ] {
            let m = moment_nodes(&mut g, xv, kind).unwrap();
            let (mean, var) = stats_per_sample_channel(&mut g, &m, 2, 4).unwrap();
            assert_eq!(g.value(mean).shape(), &[2, 4, 1, 1]);
            assert_eq!(g.value(var).shape(), &[2, 4, 1, 1]);
            // Expanded stats standardize identically to the native path.
            let centered = g.sub(xv, mean).unwrap();
            let veps = g.add_scalar(var, 1e-5).unwrap();
            let denom = g.sqrt(veps).unwrap();
            let via_expanded = g.div(centered, denom).unwrap();
            let native = standardize_node(&mut g, xv, &m, 1e-5).unwrap();
            let diff = crate::tensor::max_abs_diff(g.value(via_expanded), g.value(native));
            assert!(diff < 1e-12, "{kind:?} diff {diff}");
        }
    }

    #[test]
    fn pooled_standardize_broadcast_shapes() {
        // One sample, four channels, 1x1 spatial: pooled equals the map,
        // instance std is 0 so standardized pooled features are 0.
        let x = t(&[1, 4, 1, 1], &[1., 2., 3., 4.]);
        let mut g = Graph::new();
        let xv = g.input(x);
        let pooled = g.global_avg_pool(xv).unwrap();
        for kind in [
            NormalizerKind::Batch,
            NormalizerKind::Instance,
            NormalizerKind::Layer,
            NormalizerKind::Group(2),
        ] {
            let m = moment_nodes(&mut g, xv, kind).unwrap();
            let y = standardize_pooled_node(&mut g, pooled, &m, 1e-5).unwrap();
            assert_eq!(g.value(y).shape(), &[1, 4]);
        }
    }
}
