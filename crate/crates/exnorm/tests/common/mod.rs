//! Naive-loop reference for the per-sample mixture layer, plus shared test
//! glue. Every stage — moments, standardization, pooling, grouped reduction,
//! Gram correlation, head, softmax, combination — is recomputed with plain
//! index arithmetic over flat slices, so agreement with the graph
//! implementation is evidence rather than tautology.
#![allow(dead_code)]

use exnorm::params::ParamStore;
use exnorm::scalar::Scalar;
use rand::Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    Instance,
    Layer,
    Batch,
    Group(usize),
}

/// Flat parameter values in declaration layout: fc weights are
/// [fan_in][fan_out] row-major, the grouped reduction is [c/r][r].
pub struct Params {
    pub gammas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
    pub conv_w: Option<Vec<f64>>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

pub struct OracleCfg<'a> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pool: &'a [Kind],
    pub r: usize,
    pub eps: f64,
    /// "none" | "a" (mlp head) | "b" (no grouped reduction) | "c" (relu head)
    /// | "d" (single shared affine)
    pub variant: &'a str,
}

/// Population mean/variance of one member, broadcast onto an [n][c] grid.
fn moments_nc(x: &[f64], n: usize, c: usize, h: usize, w: usize, kind: Kind) -> (Vec<f64>, Vec<f64>) {
    let s = h * w;
    let mut mean = vec![0f64; n * c];
    let mut var = vec![0f64; n * c];
    let stat = |idx: &mut dyn FnMut(usize) -> bool| -> (f64, f64) {
        let mut sum = 0f64;
        let mut count = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                if !idx(ni * c + ci) {
                    continue;
                }
                for si in 0..s {
                    sum += x[(ni * c + ci) * s + si];
                    count += 1;
                }
            }
        }
        let m = sum / count as f64;
        let mut sq = 0f64;
        for ni in 0..n {
            for ci in 0..c {
                if !idx(ni * c + ci) {
                    continue;
                }
                for si in 0..s {
                    let d = x[(ni * c + ci) * s + si] - m;
                    sq += d * d;
                }
            }
        }
        (m, sq / count as f64)
    };
    match kind {
        Kind::Instance => {
            for ni in 0..n {
                for ci in 0..c {
                    let cell = ni * c + ci;
                    let (m, v) = stat(&mut |i| i == cell);
                    mean[cell] = m;
                    var[cell] = v;
                }
            }
        }
        Kind::Layer => {
            for ni in 0..n {
                let (m, v) = stat(&mut |i| i / c == ni);
                for ci in 0..c {
                    mean[ni * c + ci] = m;
                    var[ni * c + ci] = v;
                }
            }
        }
        Kind::Batch => {
            for ci in 0..c {
                let (m, v) = stat(&mut |i| i % c == ci);
                for ni in 0..n {
                    mean[ni * c + ci] = m;
                    var[ni * c + ci] = v;
                }
            }
        }
        Kind::Group(g) => {
            let per = c / g;
            for ni in 0..n {
                for gi in 0..g {
                    let (m, v) = stat(&mut |i| i / c == ni && (i % c) / per == gi);
                    for ci in gi * per..(gi + 1) * per {
                        mean[ni * c + ci] = m;
                        var[ni * c + ci] = v;
                    }
                }
            }
        }
    }
    (mean, var)
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn fc(x: &[f64], w: &[f64], b: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = vec![0f64; fan_out];
    for (o, out_o) in out.iter_mut().enumerate() {
        let mut acc = b[o];
        for i in 0..fan_in {
            acc += x[i] * w[i * fan_out + o];
        }
        *out_o = acc;
    }
    out
}

/// Full mixture-layer forward in training mode (batch members use moments of
/// this input). Returns (output [n·c·h·w], ratios [n·k]).
pub fn en_oracle(x: &[f64], cfg: &OracleCfg, p: &Params) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (cfg.n, cfg.c, cfg.h, cfg.w);
    let s = h * w;
    let k = cfg.pool.len();
    let stats: Vec<(Vec<f64>, Vec<f64>)> = cfg
        .pool
        .iter()
        .map(|&kind| moments_nc(x, n, c, h, w, kind))
        .collect();

    // Standardized map per member.
    let xs: Vec<Vec<f64>> = stats
        .iter()
        .map(|(mean, var)| {
            let mut out = vec![0f64; n * c * s];
            for ni in 0..n {
                for ci in 0..c {
                    let cell = ni * c + ci;
                    let denom = (var[cell] + cfg.eps).sqrt();
                    for si in 0..s {
                        out[cell * s + si] = (x[cell * s + si] - mean[cell]) / denom;
                    }
                }
            }
            out
        })
        .collect();

    // Ratio subnet: pooled features, optionally pre-standardized with each
    // member's full-tensor moments, reduced, correlated, and classified.
    let mut pooled = vec![0f64; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let cell = ni * c + ci;
            pooled[cell] = (0..s).map(|si| x[cell * s + si]).sum::<f64>() / s as f64;
        }
    }
    let mut lambda = vec![0f64; n * k];
    for ni in 0..n {
        let logits = if cfg.variant == "a" {
            let hidden = (c / 32).max(1);
            let feats = &pooled[ni * c..(ni + 1) * c];
            let h1: Vec<f64> = fc(feats, &p.fc1_w, &p.fc1_b, c, hidden)
                .iter()
                .map(|v| v.tanh())
                .collect();
            fc(&h1, &p.fc2_w, &p.fc2_b, hidden, k)
        } else {
            let mut xhat = vec![0f64; k * c];
            for (ki, (mean, var)) in stats.iter().enumerate() {
                for ci in 0..c {
                    let cell = ni * c + ci;
                    xhat[ki * c + ci] =
                        (pooled[cell] - mean[cell]) / (var[cell] + cfg.eps).sqrt();
                }
            }
            let (z, width) = if cfg.variant == "b" {
                (xhat, c)
            } else {
                let groups = c / cfg.r;
                let wts = p.conv_w.as_ref().expect("grouped reduction weights");
                let mut z = vec![0f64; k * groups];
                for ki in 0..k {
                    for j in 0..groups {
                        let mut acc = 0f64;
                        for i in 0..cfg.r {
                            acc += wts[j * cfg.r + i] * xhat[ki * c + j * cfg.r + i];
                        }
                        z[ki * groups + j] = acc;
                    }
                }
                (z, groups)
            };
            let mut v = vec![0f64; k * k];
            for a in 0..k {
                for b in 0..k {
                    v[a * k + b] = (0..width)
                        .map(|j| z[a * width + j] * z[b * width + j])
                        .sum();
                }
            }
            let pk = p.fc1_b.len();
            let h1: Vec<f64> = fc(&v, &p.fc1_w, &p.fc1_b, k * k, pk)
                .iter()
                .map(|&v| if cfg.variant == "c" { v.max(0.0) } else { v.tanh() })
                .collect();
            fc(&h1, &p.fc2_w, &p.fc2_b, pk, k)
        };
        lambda[ni * k..(ni + 1) * k].copy_from_slice(&softmax_row(&logits));
    }

    // Combination: every β is added; the shared-affine variant scales the
    // weighted sum once instead.
    let mut out = vec![0f64; n * c * s];
    for ni in 0..n {
        for ci in 0..c {
            let cell = ni * c + ci;
            for si in 0..s {
                let idx = cell * s + si;
                if cfg.variant == "d" {
                    let mix: f64 = (0..k)
                        .map(|ki| lambda[ni * k + ki] * xs[ki][idx])
                        .sum();
                    out[idx] = p.gammas[0][ci] * mix + p.betas[0][ci];
                } else {
                    out[idx] = (0..k)
                        .map(|ki| {
                            p.gammas[ki][ci] * (lambda[ni * k + ki] * xs[ki][idx])
                                + p.betas[ki][ci]
                        })
                        .sum();
                }
            }
        }
    }
    (out, lambda)
}

/// Read a parameter's values as f64 by name.
pub fn values<T: Scalar>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no param {name}"));
    store.value(id).data().iter().map(|v| v.as_f64()).collect()
}

/// Overwrite a parameter from an f64 slice by name.
pub fn set_values<T: Scalar>(store: &mut ParamStore<T>, name: &str, vals: &[f64]) {
    let id = store.id(name).unwrap_or_else(|| panic!("no param {name}"));
    let data = store.value_mut(id).data_mut();
    assert_eq!(data.len(), vals.len(), "{name} size");
    for (d, v) in data.iter_mut().zip(vals) {
        *d = T::of_f64(*v);
    }
}

pub fn rand_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .fold(0f64, |m, (x, y)| m.max((x - y).abs()))
}
