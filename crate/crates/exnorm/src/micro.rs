//! Trainable desk-scale CNN with pluggable normalization.
//!
//! Three conv→norm→relu blocks (strides 1/2/2) with a bias-free 1×1
//! projection shortcut around the third block, global average pool, FC
//! classifier. Convolutions carry no bias — each main-path conv is followed
//! by a norm site, and the shortcut is kept affine-free so the residual sum
//! is shaped purely by the normalizers. The layout matches
//! [`crate::arch::micro_spec`] layer for layer, so the parameter audit can be
//! cross-checked against the instantiated store.

use crate::arch::NormChoice;
use crate::en::{EnConfig, EnLayer};
use crate::error::{ExnError, Result};
use crate::graph::{Graph, Var};
use crate::normalizers::{NormalizerKind, PlainNormLayer};
use crate::params::{uniform_init, Bindings, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::sn::SnLayer;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MicroConfig {
    pub channels: [usize; 3],
    pub classes: usize,
    pub norm: NormChoice,
    pub en: EnConfig,
    pub sn_tied: bool,
}

impl Default for MicroConfig {
    fn default() -> Self {
        MicroConfig {
            channels: [16, 32, 64],
            classes: 3,
            norm: NormChoice::En,
            en: EnConfig::default(),
            sn_tied: false,
        }
    }
}

impl MicroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(ExnError::invalid("need at least 2 classes"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(ExnError::invalid("channel widths must be positive"));
        }
        if self.norm == NormChoice::En {
            for c in self.channels {
                self.en.validate(c)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum SiteNorm {
    Plain(PlainNormLayer),
    Sn(SnLayer),
    En(EnLayer),
}

impl SiteNorm {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<Var>)> {
        match self {
            SiteNorm::Plain(l) => Ok((l.forward(g, store, binds, x, mode)?, None)),
            SiteNorm::Sn(l) => Ok((l.forward(g, store, binds, x, mode)?, None)),
            SiteNorm::En(l) => {
                let (y, lam) = l.forward(g, store, binds, x, mode, None)?;
                Ok((y, Some(lam)))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MicroCnn {
    pub cfg: MicroConfig,
    conv_w: [ParamId; 3],
    proj_w: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    norms: Vec<(String, SiteNorm)>,
}

/// Logits plus the per-sample ratio matrix of each mixture site, in layer
/// order (empty unless the norm choice is the per-sample mixture).
pub struct MicroOutput {
    pub logits: Var,
    pub ratios: Vec<(String, Var)>,
}

impl MicroCnn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &MicroConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.channels;
        let mut conv_w = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        for (bi, (c_in, c_out)) in [(3, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let block = format!("b{}", bi + 1);
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            conv_w.push(store.add(
                &format!("{block}.conv_w"),
                uniform_init(&[c_out, c_in, 3, 3], bound, rng),
                true,
            )?);
            let prefix = format!("{block}.norm");
            let site = match cfg.norm {
                NormChoice::Bn => SiteNorm::Plain(PlainNormLayer::new(
                    store,
                    &prefix,
                    c_out,
                    NormalizerKind::Batch,
                    cfg.en.eps,
                )?),
                NormChoice::Sn => SiteNorm::Sn(SnLayer::new(
                    store,
                    &prefix,
                    c_out,
                    &cfg.en.pool,
                    cfg.sn_tied,
                    cfg.en.eps,
                )?),
                NormChoice::En => {
                    SiteNorm::En(EnLayer::new(store, &prefix, c_out, &cfg.en, rng)?)
                }
            };
            norms.push((prefix, site));
        }
        let proj_bound = 1.0 / (c2 as f64).sqrt();
        let proj_w = store.add(
            "b3.proj_w",
            uniform_init(&[c3, c2, 1, 1], proj_bound, rng),
            true,
        )?;
        let fc_bound = 1.0 / (c3 as f64).sqrt();
        let fc_w = store.add(
            "head.fc_w",
            uniform_init(&[c3, cfg.classes], fc_bound, rng),
            true,
        )?;
        let fc_b = store.add(
            "head.fc_b",
            uniform_init(&[cfg.classes], fc_bound, rng),
            true,
        )?;
        Ok(MicroCnn {
            cfg: cfg.clone(),
            conv_w: [conv_w[0], conv_w[1], conv_w[2]],
            proj_w,
            fc_w,
            fc_b,
            norms,
        })
    }

    /// Names of the mixture sites, in layer order.
    pub fn en_site_names(&self) -> Vec<String> {
        if self.cfg.norm == NormChoice::En {
            self.norms.iter().map(|(n, _)| n.clone()).collect()
        } else {
            Vec::new()
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
    ) -> Result<MicroOutput> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(ExnError::shape(format!(
                "expected input [N, 3, H, W], got {xs:?}"
            )));
        }
        if xs[2] < 4 || xs[3] < 4 || xs[2] % 4 != 0 || xs[3] % 4 != 0 {
            return Err(ExnError::shape(format!(
                "spatial size must be a positive multiple of 4, got {}×{}",
                xs[2], xs[3]
            )));
        }
        let mut ratios = Vec::new();
        let mut norm = |g: &mut Graph<T>, store: &mut ParamStore<T>, binds: &mut Bindings, i: usize, h: Var| -> Result<Var> {
            let (name, site) = &self.norms[i];
            let (y, lam) = site.forward(g, store, binds, h, mode)?;
            if let Some(lam) = lam {
                ratios.push((name.clone(), lam));
            }
            Ok(y)
        };

        let w1 = binds.bind(g, store, self.conv_w[0]);
        let h1 = g.conv2d(x, w1, 1, 1, 1)?;
        let n1 = norm(g, store, binds, 0, h1)?;
        let a1 = g.relu(n1)?;

        let w2 = binds.bind(g, store, self.conv_w[1]);
        let h2 = g.conv2d(a1, w2, 2, 1, 1)?;
        let n2 = norm(g, store, binds, 1, h2)?;
        let a2 = g.relu(n2)?;

        let w3 = binds.bind(g, store, self.conv_w[2]);
        let h3 = g.conv2d(a2, w3, 2, 1, 1)?;
        let n3 = norm(g, store, binds, 2, h3)?;
        let wp = binds.bind(g, store, self.proj_w);
        let sc = g.conv2d(a2, wp, 2, 0, 1)?;
        let merged = g.add(n3, sc)?;
        let a3 = g.relu(merged)?;

        let pooled = g.global_avg_pool(a3)?;
        let wf = binds.bind(g, store, self.fc_w);
        let bf = binds.bind(g, store, self.fc_b);
        let logits = g.matmul(pooled, wf)?;
        let bfr = g.reshape(bf, &[1, self.cfg.classes])?;
        let logits = g.add(logits, bfr)?;
        Ok(MicroOutput { logits, ratios })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{count_report, micro_spec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::tensor::Tensor;

    fn input(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_init(&[n, 3, hw, hw], 1.5, &mut rng)
    }

    fn build(norm: NormChoice, seed: u64) -> (ParamStore<f64>, MicroCnn) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MicroConfig {
            norm,
            en: EnConfig {
                r: 8,
                ..EnConfig::default()
            },
            ..MicroConfig::default()
        };
        let mut store = ParamStore::new();
        let model = MicroCnn::new(&mut store, &cfg, &mut rng).unwrap();
        (store, model)
    }

    #[test]
    fn instantiated_params_match_audit_for_every_norm_choice() {
        for norm in [NormChoice::Bn, NormChoice::Sn, NormChoice::En] {
            let (store, model) = build(norm, 5);
            let spec = micro_spec(model.cfg.channels, model.cfg.classes);
            let rep = count_report(&spec, norm, &model.cfg.en, 32).unwrap();
            assert_eq!(
                store.num_trainable_scalars(),
                rep.totals.params,
                "{}",
                norm.tag()
            );
        }
    }

    #[test]
    fn forward_produces_finite_logits_of_right_shape() {
        for norm in [NormChoice::Bn, NormChoice::Sn, NormChoice::En] {
            let (mut store, model) = build(norm, 6);
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let xv = g.input(input(4, 32, 1));
            let out = model
                .forward(&mut g, &mut store, &mut binds, xv, Mode::Train)
                .unwrap();
            let logits = g.value(out.logits);
            assert_eq!(logits.shape(), [4, 3]);
            assert!(logits.data().iter().all(|v| v.is_finite()));
            let want_ratio_sets = if norm == NormChoice::En { 3 } else { 0 };
            assert_eq!(out.ratios.len(), want_ratio_sets);
        }
    }

    #[test]
    fn fresh_mixture_model_reports_uniform_ratios_at_every_site() {
        let (mut store, model) = build(NormChoice::En, 7);
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(input(2, 16, 2));
        let out = model
            .forward(&mut g, &mut store, &mut binds, xv, Mode::Train)
            .unwrap();
        assert_eq!(out.ratios.len(), 3);
        for (name, lam) in &out.ratios {
            assert_eq!(g.value(*lam).shape(), [2, 3], "{name}");
            for v in g.value(*lam).data() {
                assert_eq!(*v, 1.0 / 3.0, "{name}");
            }
        }
    }

    #[test]
    fn loss_gradients_flow_to_every_trainable_parameter() {
        let (mut store, model) = build(NormChoice::En, 8);
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(input(4, 16, 3));
        let out = model
            .forward(&mut g, &mut store, &mut binds, xv, Mode::Train)
            .unwrap();
        let loss = g.softmax_xent(out.logits, &[0, 1, 2, 0]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.params_without_grad().is_empty());
        for (id, var) in binds.iter() {
            if store.is_trainable(id) {
                let grad = g.grad(var).unwrap();
                assert!(
                    grad.data().iter().all(|v| v.is_finite()),
                    "{}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn eval_mode_differs_from_train_once_running_stats_move() {
        let (mut store, model) = build(NormChoice::Bn, 9);
        let x = input(4, 16, 4);
        // Train pass pulls running stats toward batch stats of a shifted input.
        let shifted = x.map(|v| v * 3.0 + 1.0);
        {
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let xv = g.input(shifted);
            model
                .forward(&mut g, &mut store, &mut binds, xv, Mode::Train)
                .unwrap();
        }
        let run = |store: &mut ParamStore<f64>, mode: Mode| {
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let xv = g.input(x.clone());
            let out = model.forward(&mut g, store, &mut binds, xv, mode).unwrap();
            g.value(out.logits).clone()
        };
        let eval = run(&mut store, Mode::Eval);
        let train = run(&mut store, Mode::Train);
        assert!(crate::tensor::max_abs_diff(&eval, &train) > 1e-6);
    }

    #[test]
    fn rejects_input_not_multiple_of_total_stride() {
        let (mut store, model) = build(NormChoice::Bn, 10);
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(input(1, 32, 5).reshape(&[1, 3, 32, 32]).unwrap());
        let ok = model.forward(&mut g, &mut store, &mut binds, xv, Mode::Train);
        assert!(ok.is_ok());
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let bad = g.input(Tensor::<f64>::zeros(&[1, 3, 18, 18]));
        assert!(model
            .forward(&mut g, &mut store, &mut binds, bad, Mode::Train)
            .is_err());
    }

    #[test]
    fn en_channels_indivisible_by_r_rejected_at_build() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = MicroConfig {
            channels: [12, 24, 48],
            norm: NormChoice::En,
            en: EnConfig {
                r: 8,
                ..EnConfig::default()
            },
            ..MicroConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        assert!(MicroCnn::new(&mut store, &cfg, &mut rng).is_err());
    }
}
