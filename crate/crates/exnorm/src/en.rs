//! Per-sample normalizer mixture layer.
//!
//! A small subnetwork looks at each sample and emits a softmax weight per
//! pool member (the sample's "important ratios"); the layer output combines
//! the K standardized maps: out_n = Σ_k γᵏ ⊙ (λᵏ_n · x̂ᵏ_n) + βᵏ, with every
//! βᵏ added whether or not its λ is small.
//!
//! The ratio subnet runs in three steps: (1) global-average-pool the input,
//! pre-standardize the pooled vector with each pool member's full-tensor
//! statistics, and reduce channels C → C/r with one shared grouped projection
//! of exactly C weights (C/r groups, no bias); (2) take the K×K Gram matrix
//! of the K reduced vectors; (3) flatten to K², expand to πK through an FC +
//! tanh, project back to K, softmax. The final FC starts at zero, so ratios
//! start exactly uniform.

use crate::error::{ExnError, Result};
use crate::graph::{Graph, Var};
use crate::normalizers::{
    moment_nodes, running_moment_nodes, standardize_node, standardize_pooled_node,
    update_running_entries, MomentNodes, NormalizerKind, RunningStats,
};
use crate::params::{uniform_init, Bindings, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Structural ablations of the ratio subnet; at most one is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    None,
    /// (a) Two-layer MLP on pooled features (C → C/32 → K) replaces the
    /// whole standardize/reduce/correlate pipeline.
    MlpHead,
    /// (b) No grouped projection; correlate the pre-standardized pooled
    /// features directly.
    NoConv,
    /// (c) ReLU instead of tanh after the expansion FC.
    ReluHead,
    /// (d) One shared (γ, β) applied after the λ-weighted sum.
    SingleAffine,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "none" => Ok(Variant::None),
            "a" => Ok(Variant::MlpHead),
            "b" => Ok(Variant::NoConv),
            "c" => Ok(Variant::ReluHead),
            "d" => Ok(Variant::SingleAffine),
            _ => Err(ExnError::invalid(format!(
                "unknown variant {s:?}, expected none|a|b|c|d"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::MlpHead => "a",
            Variant::NoConv => "b",
            Variant::ReluHead => "c",
            Variant::SingleAffine => "d",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnConfig {
    pub pool: Vec<NormalizerKind>,
    /// Channel reduction rate of the grouped projection.
    pub r: usize,
    /// Expansion factor of the ratio head (K² → πK).
    pub pi: usize,
    pub eps: f64,
    pub variant: Variant,
}

impl Default for EnConfig {
    fn default() -> Self {
        EnConfig {
            pool: vec![
                NormalizerKind::Instance,
                NormalizerKind::Layer,
                NormalizerKind::Batch,
            ],
            r: 8,
            pi: 50,
            eps: 1e-5,
            variant: Variant::None,
        }
    }
}

impl EnConfig {
    pub fn k(&self) -> usize {
        self.pool.len()
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.pool.len() < 2 {
            return Err(ExnError::invalid("mixture pool needs at least 2 members"));
        }
        for (i, kind) in self.pool.iter().enumerate() {
            kind.validate(c)?;
            if self.pool[..i].contains(kind) {
                return Err(ExnError::invalid(format!(
                    "duplicate pool member {}",
                    kind.short_name()
                )));
            }
        }
        if self.r == 0 || c % self.r != 0 {
            return Err(ExnError::invalid(format!(
                "channels {c} not divisible by reduction rate {}",
                self.r
            )));
        }
        if self.pi == 0 {
            return Err(ExnError::invalid("expansion factor must be positive"));
        }
        Ok(())
    }

    /// Hidden width of the MLP-head variant.
    pub fn mlp_hidden(&self, c: usize) -> usize {
        (c / 32).max(1)
    }
}

/// Ratio-head FC parameter count: K²·πK + πK (expand) + πK·K + K (project).
pub fn psi(k: usize, pi: usize) -> usize {
    let pik = pi * k;
    k * k * pik + pik + pik * k + k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountBreakdown {
    pub affines: usize,
    pub conv: usize,
    pub head: usize,
    pub total: usize,
}

/// Learnable-parameter count of one layer of width C under `cfg`. For the
/// default structure this is 2KC + C + Ψ(K).
pub fn en_param_count(c: usize, cfg: &EnConfig) -> ParamCountBreakdown {
    let k = cfg.k();
    let affines = match cfg.variant {
        Variant::SingleAffine => 2 * c,
        _ => 2 * k * c,
    };
    let conv = match cfg.variant {
        Variant::MlpHead | Variant::NoConv => 0,
        _ => c,
    };
    let head = match cfg.variant {
        Variant::MlpHead => {
            let h = cfg.mlp_hidden(c);
            c * h + h + h * k + k
        }
        _ => psi(k, cfg.pi),
    };
    ParamCountBreakdown {
        affines,
        conv,
        head,
        total: affines + conv + head,
    }
}

/// Each row strictly positive and summing to 1 within `tol`.
pub fn validate_simplex_rows<T: Scalar>(t: &Tensor<T>, tol: f64) -> Result<()> {
    simplex_rows(t, tol, true)
}

/// Closed-simplex variant: zeros allowed. Ratio overrides may be one-hot;
/// subnet outputs never are (softmax is strictly positive).
pub fn validate_simplex_rows_closed<T: Scalar>(t: &Tensor<T>, tol: f64) -> Result<()> {
    simplex_rows(t, tol, false)
}

fn simplex_rows<T: Scalar>(t: &Tensor<T>, tol: f64, strict: bool) -> Result<()> {
    if t.rank() != 2 {
        return Err(ExnError::shape(format!(
            "ratio matrix must be [N, K], got {:?}",
            t.shape()
        )));
    }
    let k = t.shape()[1];
    for (ri, row) in t.data().chunks(k).enumerate() {
        let mut sum = 0f64;
        for v in row {
            let v = v.as_f64();
            let ok = if strict { v > 0.0 } else { v >= 0.0 };
            if !ok {
                return Err(ExnError::numeric(format!(
                    "ratio row {ri} has out-of-range entry {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > tol {
            return Err(ExnError::numeric(format!(
                "ratio row {ri} sums to {sum}, outside 1 ± {tol}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EnLayer {
    pub cfg: EnConfig,
    pub c: usize,
    pub momentum: f64,
    gammas: Vec<ParamId>,
    betas: Vec<ParamId>,
    conv_w: Option<ParamId>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    running: Option<(ParamId, ParamId)>,
}

impl EnLayer {
    /// Registers parameters: γᵏ=1, βᵏ=0; grouped projection and expansion FC
    /// uniform in ±1/√fan-in; final FC zero so initial ratios are uniform.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        cfg: &EnConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        cfg.validate(c)?;
        let k = cfg.k();
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        if cfg.variant == Variant::SingleAffine {
            gammas.push(store.add(&format!("{prefix}.gamma"), Tensor::ones(&[c]), true)?);
            betas.push(store.add(&format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?);
        } else {
            for kind in &cfg.pool {
                let tag = kind.short_name();
                gammas.push(store.add(
                    &format!("{prefix}.gamma_{tag}"),
                    Tensor::ones(&[c]),
                    true,
                )?);
                betas.push(store.add(
                    &format!("{prefix}.beta_{tag}"),
                    Tensor::zeros(&[c]),
                    true,
                )?);
            }
        }
        let conv_w = match cfg.variant {
            Variant::MlpHead | Variant::NoConv => None,
            _ => {
                let bound = 1.0 / (cfg.r as f64).sqrt();
                Some(store.add(
                    &format!("{prefix}.conv_w"),
                    uniform_init(&[c / cfg.r, cfg.r, 1, 1], bound, rng),
                    true,
                )?)
            }
        };
        let (in1, out1) = match cfg.variant {
            Variant::MlpHead => (c, cfg.mlp_hidden(c)),
            _ => (k * k, cfg.pi * k),
        };
        let bound1 = 1.0 / (in1 as f64).sqrt();
        let fc1_w = store.add(
            &format!("{prefix}.fc1_w"),
            uniform_init(&[in1, out1], bound1, rng),
            true,
        )?;
        let fc1_b = store.add(
            &format!("{prefix}.fc1_b"),
            uniform_init(&[out1], bound1, rng),
            true,
        )?;
        let fc2_w = store.add(&format!("{prefix}.fc2_w"), Tensor::zeros(&[out1, k]), true)?;
        let fc2_b = store.add(&format!("{prefix}.fc2_b"), Tensor::zeros(&[k]), true)?;
        let running = if cfg.pool.contains(&NormalizerKind::Batch) {
            let rm = store.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false)?;
            let rv = store.add(&format!("{prefix}.running_var"), Tensor::ones(&[c]), false)?;
            Some((rm, rv))
        } else {
            None
        };
        Ok(EnLayer {
            cfg: cfg.clone(),
            c,
            momentum: 0.1,
            gammas,
            betas,
            conv_w,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            running,
        })
    }

    /// Pool statistics, computed once per step and shared by the subnet and
    /// the combination branch. Batch member: running stats in eval mode,
    /// batch stats plus a running-stats update in train mode.
    fn pool_stats<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Vec<MomentNodes>> {
        let mut stats = Vec::with_capacity(self.cfg.k());
        for kind in &self.cfg.pool {
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

    /// Emits the per-sample ratio matrix [N, K] from the shared statistics.
    pub fn ratio_subnet<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        binds: &mut Bindings,
        x: Var,
        stats: &[MomentNodes],
    ) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let k = self.cfg.k();
        if stats.len() != k {
            return Err(ExnError::invalid(format!(
                "{} statistics for a pool of {k}",
                stats.len()
            )));
        }
        let pooled = g.global_avg_pool(x)?;

        let logits = if self.cfg.variant == Variant::MlpHead {
            let w1 = binds.bind(g, store, self.fc1_w);
            let b1 = binds.bind(g, store, self.fc1_b);
            let h = self.cfg.mlp_hidden(c);
            let pre = g.matmul(pooled, w1)?;
            let b1r = g.reshape(b1, &[1, h])?;
            let pre = g.add(pre, b1r)?;
            let act = g.tanh(pre)?;
            let w2 = binds.bind(g, store, self.fc2_w);
            let b2 = binds.bind(g, store, self.fc2_b);
            let out = g.matmul(act, w2)?;
            let b2r = g.reshape(b2, &[1, k])?;
            g.add(out, b2r)?
        } else {
            let mut slices = Vec::with_capacity(k);
            for m in stats {
                slices.push(standardize_pooled_node(g, pooled, m, self.cfg.eps)?);
            }
            let stacked = g.stack1(&slices)?;
            let z = match self.conv_w {
                Some(w_id) => {
                    let w = binds.bind(g, store, w_id);
                    let flat = g.reshape(stacked, &[n * k, c, 1, 1])?;
                    let red = g.conv2d(flat, w, 1, 0, c / self.cfg.r)?;
                    g.reshape(red, &[n, k, c / self.cfg.r])?
                }
                None => stacked,
            };
            let v = g.gram(z)?;
            let vflat = g.reshape(v, &[n, k * k])?;
            let w1 = binds.bind(g, store, self.fc1_w);
            let b1 = binds.bind(g, store, self.fc1_b);
            let pre = g.matmul(vflat, w1)?;
            let b1r = g.reshape(b1, &[1, self.cfg.pi * k])?;
            let pre = g.add(pre, b1r)?;
            let act = match self.cfg.variant {
                Variant::ReluHead => g.relu(pre)?,
                _ => g.tanh(pre)?,
            };
            let w2 = binds.bind(g, store, self.fc2_w);
            let b2 = binds.bind(g, store, self.fc2_b);
            let out = g.matmul(act, w2)?;
            let b2r = g.reshape(b2, &[1, k])?;
            g.add(out, b2r)?
        };
        g.softmax_rows(logits)
    }

    /// Full layer forward. Returns the output and the ratio matrix actually
    /// used. `lambda_override` is a testing hook that bypasses the subnet.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
        lambda_override: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.c {
            return Err(ExnError::shape(format!(
                "layer of width {} got input {:?}",
                self.c, xs
            )));
        }
        let n = xs[0];
        let k = self.cfg.k();
        let stats = self.pool_stats(g, store, x, mode)?;

        let lambda = match lambda_override {
            Some(t) => {
                if t.shape() != [n, k] {
                    return Err(ExnError::shape(format!(
                        "ratio override must be [{n}, {k}], got {:?}",
                        t.shape()
                    )));
                }
                validate_simplex_rows_closed(t, 1e-6)?;
                g.input(t.clone())
            }
            None => self.ratio_subnet(g, store, binds, x, &stats)?,
        };

        let mut acc: Option<Var> = None;
        for (ki, m) in stats.iter().enumerate() {
            let xhat = standardize_node(g, x, m, self.cfg.eps)?;
            let lam = g.select(lambda, 1, ki)?;
            let lam4 = g.reshape(lam, &[n, 1, 1, 1])?;
            let weighted = g.mul(xhat, lam4)?;
            let term = if self.cfg.variant == Variant::SingleAffine {
                weighted
            } else {
                let gv = binds.bind(g, store, self.gammas[ki]);
                let g4 = g.reshape(gv, &[1, self.c, 1, 1])?;
                g.mul(weighted, g4)?
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let mut out = acc.expect("pool nonempty");
        if self.cfg.variant == Variant::SingleAffine {
            let gv = binds.bind(g, store, self.gammas[0]);
            let g4 = g.reshape(gv, &[1, self.c, 1, 1])?;
            out = g.mul(out, g4)?;
            let bv = binds.bind(g, store, self.betas[0]);
            let b4 = g.reshape(bv, &[1, self.c, 1, 1])?;
            out = g.add(out, b4)?;
        } else {
            for beta in &self.betas {
                let bv = binds.bind(g, store, *beta);
                let b4 = g.reshape(bv, &[1, self.c, 1, 1])?;
                out = g.add(out, b4)?;
            }
        }
        Ok((out, lambda))
    }

    /// Testing hook: write β values for pool member `ki`.
    pub fn set_beta<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        ki: usize,
        value: f64,
    ) -> Result<()> {
        let id = *self
            .betas
            .get(ki)
            .ok_or_else(|| ExnError::invalid(format!("no affine pair {ki}")))?;
        for v in store.value_mut(id).data_mut() {
            *v = T::of_f64(value);
        }
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (g, b) in self.gammas.iter().zip(&self.betas) {
            ids.push(*g);
            ids.push(*b);
        }
        if let Some(w) = self.conv_w {
            ids.push(w);
        }
        ids.extend([self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]);
        ids
    }
}
