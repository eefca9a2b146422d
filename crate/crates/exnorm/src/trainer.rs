//! Desk-scale training harness: data ingestion, SGD with momentum, a
//! warmup + stepwise-decay schedule, and per-epoch metrics.
//!
//! Everything is deterministic given the config seed: dataset generation,
//! per-epoch shuffles, and parameter updates replay bit-for-bit at f64.

use crate::arch::NormChoice;
use crate::error::{ExnError, Result};
use crate::graph::Graph;
use crate::micro::{MicroCnn, MicroConfig};
use crate::normalizers::NormalizerKind;
use crate::params::{Bindings, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// [N, 3, H, W], standardized per channel at load time.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather `idx` into a contiguous batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.images.shape();
        let per = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![idx.len(), shape[1], shape[2], shape[3]], data).expect("batch");
        (t, labels)
    }
}

/// Standardize each channel to zero mean / unit variance over the whole set.
fn standardize_per_channel<T: Scalar>(images: &mut Tensor<T>) {
    let shape = images.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    for ch in 0..c {
        let mut sum = 0f64;
        let mut sumsq = 0f64;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for v in &images.data()[base..base + plane] {
                let v = v.as_f64();
                sum += v;
                sumsq += v * v;
            }
        }
        let count = (n * plane) as f64;
        let mean = sum / count;
        let var = (sumsq / count - mean * mean).max(0.0);
        let std = var.sqrt().max(1e-8);
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for v in &mut images.data_mut()[base..base + plane] {
                *v = T::of_f64((v.as_f64() - mean) / std);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCfg {
    pub classes: usize,
    pub per_class: usize,
    pub hw: usize,
    pub seed: u64,
    pub noise: f64,
}

impl Default for SyntheticCfg {
    fn default() -> Self {
        SyntheticCfg {
            classes: 3,
            per_class: 100,
            hw: 16,
            seed: 0,
            noise: 0.25,
        }
    }
}

/// Class-conditional images: an oriented ramp whose direction rotates with
/// the class, plus a Gaussian blob parked on a class-specific arc, mixed into
/// the three channels with class-specific weights, plus uniform noise.
/// Deterministic per seed; ordered class-major (shuffling is the trainer's
/// job).
pub fn gen_synthetic<T: Scalar>(cfg: &SyntheticCfg) -> Result<Dataset<T>> {
    if cfg.classes < 2 {
        return Err(ExnError::invalid("need at least 2 classes"));
    }
    if cfg.per_class == 0 || cfg.hw < 4 {
        return Err(ExnError::invalid(
            "per-class count must be positive and image size at least 4",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, m, hw) = (cfg.classes, cfg.per_class, cfg.hw);
    let plane = hw * hw;
    let mut data = Vec::with_capacity(k * m * 3 * plane);
    let mut labels = Vec::with_capacity(k * m);
    for class in 0..k {
        let theta = std::f64::consts::PI * class as f64 / k as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        // Channel mixing weights, distinct and sign-varied per class.
        let wr: Vec<f64> = (0..3)
            .map(|c| (2.0 * std::f64::consts::PI * ((class + 1) * (c + 2)) as f64 / 7.0).cos())
            .collect();
        let wb: Vec<f64> = (0..3)
            .map(|c| (2.0 * std::f64::consts::PI * ((class + 2) * (c + 1)) as f64 / 5.0).sin())
            .collect();
        for _ in 0..m {
            let amp_r = rng.random_range(0.8..1.2);
            let amp_b = rng.random_range(0.8..1.2);
            let phi = 2.0 * std::f64::consts::PI * class as f64 / k as f64
                + rng.random_range(-0.4..0.4);
            let (cx, cy) = (0.55 * phi.cos(), 0.55 * phi.sin());
            let mut planes = vec![0f64; 3 * plane];
            for y in 0..hw {
                for x in 0..hw {
                    let u = 2.0 * x as f64 / (hw - 1) as f64 - 1.0;
                    let v = 2.0 * y as f64 / (hw - 1) as f64 - 1.0;
                    let ramp = ct * u + st * v;
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    let blob = (-d2 / (2.0 * 0.3 * 0.3)).exp();
                    for c in 0..3 {
                        planes[c * plane + y * hw + x] =
                            amp_r * ramp * wr[c] + 1.5 * amp_b * blob * wb[c];
                    }
                }
            }
            for p in &mut planes {
                *p += rng.random_range(-cfg.noise..cfg.noise);
            }
            data.extend(planes.into_iter().map(T::of_f64));
            labels.push(class);
        }
    }
    let mut images = Tensor::new(vec![k * m, 3, hw, hw], data)?;
    standardize_per_channel(&mut images);
    Ok(Dataset {
        images,
        labels,
        classes: k,
    })
}

const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary records: 1 label byte then 3×1024 pixel bytes (R, G, B
/// planes, row-major 32×32). `path` may be one .bin file or a directory of
/// them (read in name order). Pixels are scaled to [0,1] and standardized
/// per channel over the loaded set.
pub fn load_cifar10<T: Scalar>(path: &Path, subset: Option<usize>) -> Result<Dataset<T>> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(ExnError::format(format!(
                "no .bin files under {}",
                path.display()
            )));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut data: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let want = subset.unwrap_or(usize::MAX);
    'files: for f in &files {
        let bytes = fs::read(f)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(ExnError::format(format!(
                "{}: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                f.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if labels.len() >= want {
                break 'files;
            }
            let label = rec[0] as usize;
            if label > 9 {
                return Err(ExnError::format(format!(
                    "{}: record {} has label byte {label} > 9",
                    f.display(),
                    labels.len()
                )));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| T::of_f64(b as f64 / 255.0)));
        }
    }
    if let Some(n) = subset {
        if labels.len() < n {
            return Err(ExnError::format(format!(
                "requested subset of {n} but only {} records available",
                labels.len()
            )));
        }
    }
    if labels.is_empty() {
        return Err(ExnError::format("no records loaded"));
    }
    let n = labels.len();
    let mut images = Tensor::new(vec![n, 3, 32, 32], data)?;
    standardize_per_channel(&mut images);
    Ok(Dataset {
        images,
        labels,
        classes: 10,
    })
}

/// Classic momentum update: v ← momentum·v + g; p ← p − lr·v.
pub fn sgd_step<T: Scalar>(
    p: &mut Tensor<T>,
    grad: &Tensor<T>,
    v: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if p.shape() != grad.shape() || p.shape() != v.shape() {
        return Err(ExnError::shape(format!(
            "sgd shapes disagree: p {:?}, grad {:?}, v {:?}",
            p.shape(),
            grad.shape(),
            v.shape()
        )));
    }
    let m = T::of_f64(momentum);
    let lr = T::of_f64(lr);
    for ((pv, gv), vv) in p
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(v.data_mut().iter_mut())
    {
        if !gv.is_finite() {
            return Err(ExnError::numeric("non-finite gradient in sgd step"));
        }
        *vv = m * *vv + *gv;
        *pv = *pv - lr * *vv;
    }
    Ok(())
}

/// Velocity buffers keyed by parameter, created lazily at zero.
#[derive(Debug, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) -> Result<()> {
        for (id, grad) in grads {
            let mut grad = grad.clone();
            if self.weight_decay != 0.0 {
                let wd = T::of_f64(self.weight_decay);
                for (gv, pv) in grad.data_mut().iter_mut().zip(store.value(*id).data()) {
                    *gv = *gv + wd * *pv;
                }
            }
            let v = self
                .velocity
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = store.value_mut(*id);
            sgd_step(p, &grad, v, lr, self.momentum).map_err(|e| {
                ExnError::numeric(format!("{e} (parameter {})", store.name(*id)))
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(ExnError::invalid(format!(
                "unknown precision {s:?}, expected f32|f64"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate; zero freezes the model (useful for smoke tests).
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Number of leading epochs over which step lrs rise linearly 0 → lr.
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            decay_epochs: vec![80, 120],
            decay_factor: 0.1,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch: 32,
            epochs: 30,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &MicroConfig) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(ExnError::invalid("learning rate must be finite and ≥ 0"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(ExnError::invalid("batch size and epochs must be positive"));
        }
        let uses_batch_stats = model.norm == NormChoice::Bn
            || model.en.pool.contains(&NormalizerKind::Batch);
        if uses_batch_stats && self.batch < 2 {
            return Err(ExnError::invalid(
                "batch must be at least 2 while a batch-statistics member is in use",
            ));
        }
        Ok(())
    }

    /// Step lr: linear warmup over the first `warmup_epochs`, then the base
    /// lr decayed by `decay_factor` at each epoch in `decay_epochs`.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let warm_steps = self.warmup_epochs * steps_per_epoch;
        let global = epoch * steps_per_epoch + step;
        if global < warm_steps {
            if warm_steps == 1 {
                return self.lr;
            }
            return self.lr * global as f64 / (warm_steps - 1) as f64;
        }
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Row 0 is the pre-training evaluation; epoch e's row follows epoch e.
    pub history: Vec<EpochStat>,
    pub steps: usize,
}

/// Mean loss and exact-match accuracy in inference mode. Handles any batch
/// size; running statistics are read, never written.
pub fn evaluate<T: Scalar>(
    model: &MicroCnn,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(ExnError::invalid("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let mut loss_sum = 0f64;
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(images);
        let out = model.forward(&mut g, store, &mut binds, xv, Mode::Eval)?;
        let loss = g.softmax_xent(out.logits, &labels)?;
        loss_sum += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
        let logits = g.value(out.logits);
        let classes = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let row = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            if best == label {
                hits += 1;
            }
        }
    }
    Ok((loss_sum / n as f64, hits as f64 / n as f64))
}

/// Full training loop: seeded per-epoch shuffle, fixed-size steps (a trailing
/// partial batch is dropped), train-mode forward with running-stat updates,
/// backward, SGD with momentum under the warmup/decay schedule, and an
/// inference-mode evaluation after every epoch. A non-finite loss aborts with
/// the offending epoch and step index.
pub fn train<T: Scalar>(
    model: &MicroCnn,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    train_with_hook(model, store, data, val, cfg, |_, _| Ok(()))
}

/// `train` plus an epoch tap: `hook(epoch, store)` runs after the initial
/// evaluation (epoch 0) and after every completed epoch. A hook that only
/// reads (e.g. inference-mode ratio recording) leaves the trajectory bitwise
/// identical to a hook-free run.
pub fn train_with_hook<T: Scalar>(
    model: &MicroCnn,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    mut hook: impl FnMut(usize, &mut ParamStore<T>) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate(&model.cfg)?;
    if data.len() < cfg.batch {
        return Err(ExnError::invalid(format!(
            "dataset of {} samples cannot fill one batch of {}",
            data.len(),
            cfg.batch
        )));
    }
    let steps_per_epoch = data.len() / cfg.batch;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::new();
    let record = |history: &mut Vec<EpochStat>,
                      store: &mut ParamStore<T>,
                      epoch: usize|
     -> Result<()> {
        let (loss, top1) = evaluate(model, store, data, cfg.batch)?;
        history.push(EpochStat {
            epoch,
            split: "train".into(),
            loss,
            top1,
        });
        if let Some(v) = val {
            let (loss, top1) = evaluate(model, store, v, cfg.batch)?;
            history.push(EpochStat {
                epoch,
                split: "val".into(),
                loss,
                top1,
            });
        }
        Ok(())
    };
    record(&mut history, store, 0)?;
    hook(0, store)?;

    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        for step in 0..steps_per_epoch {
            let chunk = &order[step * cfg.batch..(step + 1) * cfg.batch];
            let (images, labels) = data.batch(chunk);
            let mut g = Graph::new();
            let mut binds = Bindings::new();
            let xv = g.input(images);
            let out = model.forward(&mut g, store, &mut binds, xv, Mode::Train)?;
            let loss = g.softmax_xent(out.logits, &labels)?;
            let loss_val = g.value(loss).data()[0].as_f64();
            if !loss_val.is_finite() {
                return Err(ExnError::numeric(format!(
                    "non-finite loss {loss_val} at epoch {epoch} step {step} (global step {steps})"
                )));
            }
            g.backward(loss)?;
            let mut grads = Vec::new();
            for (id, var) in binds.iter() {
                if store.is_trainable(id) {
                    let grad = g.grad(var).ok_or_else(|| {
                        ExnError::graph(format!("no gradient for {}", store.name(id)))
                    })?;
                    grads.push((id, grad.clone()));
                }
            }
            let lr = cfg.lr_at(epoch, step, steps_per_epoch);
            opt.step(store, &grads, lr).map_err(|e| {
                ExnError::numeric(format!("{e} at epoch {epoch} step {step}"))
            })?;
            steps += 1;
        }
        record(&mut history, store, epoch + 1)?;
        hook(epoch + 1, store)?;
    }
    Ok(TrainResult { history, steps })
}

pub fn history_to_csv(history: &[EpochStat]) -> String {
    let mut s = String::from("epoch,split,loss,top1\n");
    for row in history {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.split, row.loss, row.top1
        ));
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochStat]) -> Result<()> {
    fs::write(path, history_to_csv(history))
        .map_err(|e| ExnError::format(format!("writing {}: {e}", path.display())))
}
