//! Static architecture descriptions with exact parameter and FLOP accounting.
//!
//! Architectures are shape specifications, not weights: each layer records its
//! channel counts and its spatial divisor relative to the network input, which
//! is all that parameter and FLOP enumeration needs. The ResNet50 spec exists
//! only to be counted; the micro-CNN spec mirrors the trainable model in
//! `micro` layer for layer so counts can be cross-checked against an
//! instantiated parameter store.
//!
//! FLOP convention (declared in every report): 1 FLOP = 1 multiply-accumulate.
//! Convolutions and FC layers count MACs; a normalization pass over S elements
//! counts 2S for statistics (mean pass + variance pass), S to standardize
//! (one fused scale per element), and S per affine applied; elementwise
//! activations and max-pooling count 0; reductions (global average pool,
//! residual adds) count S.

use crate::en::{en_param_count, psi, EnConfig};
use crate::error::{ExnError, Result};
use serde::{Deserialize, Serialize};

/// Which normalizer family fills every norm site of an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormChoice {
    Bn,
    Sn,
    En,
}

impl NormChoice {
    pub fn parse(s: &str) -> Result<NormChoice> {
        match s {
            "bn" => Ok(NormChoice::Bn),
            "sn" => Ok(NormChoice::Sn),
            "en" => Ok(NormChoice::En),
            _ => Err(ExnError::invalid(format!(
                "unknown norm {s:?}, expected bn|sn|en"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            NormChoice::Bn => "bn",
            NormChoice::Sn => "sn",
            NormChoice::En => "en",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvShape),
    Norm { c: usize },
    Relu { c: usize },
    MaxPool { c: usize, k: usize, stride: usize },
    GlobalAvgPool { c: usize },
    Fc { d_in: usize, d_out: usize },
    ResidualAdd { c: usize },
}

/// One layer of a spec. `in_div`/`out_div` are the cumulative spatial strides
/// at the layer's input and output, relative to the network input.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_div: usize,
    pub out_div: usize,
}

#[derive(Debug, Clone)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    /// Smallest input resolution divisor the spec requires.
    pub max_div: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn norm_sites(&self) -> Vec<(&str, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Norm { c } => Some((l.name.as_str(), c)),
                _ => None,
            })
            .collect()
    }

    pub fn norm_channel_sum(&self) -> usize {
        self.norm_sites().iter().map(|(_, c)| c).sum()
    }
}

/// Main-path builder; channel count and spatial divisor are tracked so every
/// appended layer is shape-consistent by construction.
struct Builder {
    layers: Vec<LayerSpec>,
    c: usize,
    div: usize,
    max_div: usize,
}

impl Builder {
    fn new(input_channels: usize) -> Self {
        Builder {
            layers: Vec::new(),
            c: input_channels,
            div: 1,
            max_div: 1,
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, in_div: usize, out_div: usize) {
        self.max_div = self.max_div.max(out_div);
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            in_div,
            out_div,
        });
    }

    fn conv(&mut self, name: &str, c_out: usize, k: usize, stride: usize) {
        let shape = ConvShape {
            c_in: self.c,
            c_out,
            k,
            stride,
            groups: 1,
            bias: false,
        };
        let (i, o) = (self.div, self.div * stride);
        self.push(name, LayerKind::Conv(shape), i, o);
        self.c = c_out;
        self.div = o;
    }

    fn norm(&mut self, name: &str) {
        let (c, d) = (self.c, self.div);
        self.push(name, LayerKind::Norm { c }, d, d);
    }

    fn relu(&mut self, name: &str) {
        let (c, d) = (self.c, self.div);
        self.push(name, LayerKind::Relu { c }, d, d);
    }

    fn maxpool(&mut self, name: &str, k: usize, stride: usize) {
        let (c, i) = (self.c, self.div);
        let o = i * stride;
        self.push(name, LayerKind::MaxPool { c, k, stride }, i, o);
        self.div = o;
    }

    /// Shortcut projection: a conv on a branch rooted at (`from_c`, `from_div`)
    /// rather than at the running main-path state.
    fn branch_conv(
        &mut self,
        name: &str,
        from_c: usize,
        from_div: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) {
        let shape = ConvShape {
            c_in: from_c,
            c_out,
            k,
            stride,
            groups: 1,
            bias: false,
        };
        self.push(name, LayerKind::Conv(shape), from_div, from_div * stride);
    }

    fn branch_norm(&mut self, name: &str, c: usize, div: usize) {
        self.push(name, LayerKind::Norm { c }, div, div);
    }

    fn residual_add(&mut self, name: &str, branch_c: usize, branch_div: usize) {
        assert_eq!(branch_c, self.c, "shortcut channel mismatch at {name}");
        assert_eq!(branch_div, self.div, "shortcut stride mismatch at {name}");
        let (c, d) = (self.c, self.div);
        self.push(name, LayerKind::ResidualAdd { c }, d, d);
    }

    fn global_pool(&mut self, name: &str) {
        let (c, d) = (self.c, self.div);
        self.push(name, LayerKind::GlobalAvgPool { c }, d, d);
    }

    fn fc(&mut self, name: &str, d_out: usize) {
        let d = self.div;
        self.push(
            name,
            LayerKind::Fc {
                d_in: self.c,
                d_out,
            },
            d,
            d,
        );
        self.c = d_out;
    }

    fn finish(self, name: &str, input_channels: usize) -> ArchSpec {
        ArchSpec {
            name: name.to_string(),
            input_channels,
            max_div: self.max_div,
            layers: self.layers,
        }
    }
}

/// Standard bottleneck ResNet50: 7×7/64 stem, stages of [3,4,6,3] blocks with
/// widths (64,64,256)/(128,128,512)/(256,256,1024)/(512,512,2048), strided
/// 3×3 in each stage's first block, projection shortcut (with its own norm
/// site) where shape changes, classifier 2048→1000. 53 norm sites in total.
pub fn resnet50_spec() -> ArchSpec {
    let mut b = Builder::new(3);
    b.conv("stem.conv", 64, 7, 2);
    b.norm("stem.norm");
    b.relu("stem.relu");
    b.maxpool("stem.maxpool", 3, 2);

    let stages: [(usize, usize, usize); 4] =
        [(64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3)];
    for (si, (mid, out, blocks)) in stages.into_iter().enumerate() {
        for bi in 0..blocks {
            let p = format!("s{}.b{}", si + 1, bi + 1);
            let first = bi == 0;
            let stride = if first && si > 0 { 2 } else { 1 };
            let (in_c, in_div) = (b.c, b.div);
            b.conv(&format!("{p}.conv1"), mid, 1, 1);
            b.norm(&format!("{p}.norm1"));
            b.relu(&format!("{p}.relu1"));
            b.conv(&format!("{p}.conv2"), mid, 3, stride);
            b.norm(&format!("{p}.norm2"));
            b.relu(&format!("{p}.relu2"));
            b.conv(&format!("{p}.conv3"), out, 1, 1);
            b.norm(&format!("{p}.norm3"));
            if first {
                b.branch_conv(&format!("{p}.proj.conv"), in_c, in_div, out, 1, stride);
                b.branch_norm(&format!("{p}.proj.norm"), out, in_div * stride);
            }
            b.residual_add(&format!("{p}.add"), out, in_div * stride);
            b.relu(&format!("{p}.relu3"));
        }
    }
    b.global_pool("head.pool");
    b.fc("head.fc", 1000);
    b.finish("resnet50", 3)
}

/// Trainable desk-scale CNN: three conv→norm→relu blocks (default widths
/// 16-32-64, strides 1/2/2) with a 1×1 projection shortcut around the third
/// block, global average pool, FC classifier. Mirrors `micro::MicroCnn`.
pub fn micro_spec(channels: [usize; 3], classes: usize) -> ArchSpec {
    let mut b = Builder::new(3);
    b.conv("b1.conv", channels[0], 3, 1);
    b.norm("b1.norm");
    b.relu("b1.relu");
    b.conv("b2.conv", channels[1], 3, 2);
    b.norm("b2.norm");
    b.relu("b2.relu");
    let (skip_c, skip_div) = (b.c, b.div);
    b.conv("b3.conv", channels[2], 3, 2);
    b.norm("b3.norm");
    b.branch_conv("b3.proj", skip_c, skip_div, channels[2], 1, 2);
    b.residual_add("b3.add", channels[2], skip_div * 2);
    b.relu("b3.relu");
    b.global_pool("head.pool");
    b.fc("head.fc", classes);
    b.finish("micro", 3)
}

/// Learnable parameters of one layer. SN sites carry one affine pair plus a
/// mean- and a variance-logit per pool member; EN sites follow
/// `en_param_count`.
pub fn layer_params(kind: &LayerKind, choice: NormChoice, en: &EnConfig) -> Result<usize> {
    Ok(match *kind {
        LayerKind::Conv(s) => s.c_out * (s.c_in / s.groups) * s.k * s.k + if s.bias { s.c_out } else { 0 },
        LayerKind::Fc { d_in, d_out } => d_in * d_out + d_out,
        LayerKind::Norm { c } => match choice {
            NormChoice::Bn => 2 * c,
            NormChoice::Sn => 2 * c + 2 * en.k(),
            NormChoice::En => {
                en.validate(c)?;
                en_param_count(c, en).total
            }
        },
        _ => 0,
    })
}

fn spatial(r: usize, div: usize, name: &str) -> Result<u64> {
    if r % div != 0 {
        return Err(ExnError::invalid(format!(
            "input resolution {r} not divisible by cumulative stride {div} at {name}"
        )));
    }
    let s = (r / div) as u64;
    Ok(s * s)
}

/// FLOPs of one layer at input resolution `r`×`r`, one sample, MAC=1.
pub fn layer_flops(l: &LayerSpec, choice: NormChoice, en: &EnConfig, r: usize) -> Result<u64> {
    Ok(match l.kind {
        LayerKind::Conv(s) => {
            s.c_out as u64 * spatial(r, l.out_div, &l.name)? * (s.c_in / s.groups * s.k * s.k) as u64
        }
        LayerKind::Fc { d_in, d_out } => (d_in * d_out) as u64,
        LayerKind::Relu { .. } | LayerKind::MaxPool { .. } => 0,
        LayerKind::GlobalAvgPool { c } | LayerKind::ResidualAdd { c } => {
            c as u64 * spatial(r, l.out_div, &l.name)?
        }
        LayerKind::Norm { c } => {
            let s = c as u64 * spatial(r, l.out_div, &l.name)?;
            let k = en.k() as u64;
            let c = c as u64;
            match choice {
                // stats 2S + standardize S + affine S
                NormChoice::Bn => 4 * s,
                // stats per member + standardize + affine + per-channel mixing
                NormChoice::Sn => (2 * k + 2) * s + 2 * k * c,
                // stats per member + pooled summary + K standardize passes +
                // K ratio multiplies + K affines + ratio subnet
                NormChoice::En => {
                    let pik = (en.pi as u64) * k;
                    let subnet = k * c // pre-standardize pooled features
                        + k * c // grouped projection: C MACs per member
                        + k * k * (c / en.r as u64) // K×K correlation
                        + k * k * pik + pik * k // two FC layers
                        + 2 * k; // softmax
                    (2 * k + 1) * s + 3 * k * s + subnet
                }
            }
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub c: usize,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Totals {
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchReport {
    pub arch: String,
    pub norm: String,
    pub input: [usize; 3],
    pub convention: String,
    pub notes: Vec<String>,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
}

fn kind_label(k: &LayerKind) -> (&'static str, usize) {
    match *k {
        LayerKind::Conv(s) => ("conv", s.c_out),
        LayerKind::Norm { c } => ("norm", c),
        LayerKind::Relu { c } => ("relu", c),
        LayerKind::MaxPool { c, .. } => ("maxpool", c),
        LayerKind::GlobalAvgPool { c } => ("global-avg-pool", c),
        LayerKind::Fc { d_out, .. } => ("fc", d_out),
        LayerKind::ResidualAdd { c } => ("residual-add", c),
    }
}

/// Per-layer and total parameter/FLOP audit at `r`×`r` input, one sample.
pub fn count_report(
    arch: &ArchSpec,
    choice: NormChoice,
    en: &EnConfig,
    r: usize,
) -> Result<ArchReport> {
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut params = 0usize;
    let mut flops = 0u64;
    for l in &arch.layers {
        let p = layer_params(&l.kind, choice, en)?;
        let f = layer_flops(l, choice, en, r)?;
        params += p;
        flops += f;
        let (kind, c) = kind_label(&l.kind);
        layers.push(LayerReport {
            name: l.name.clone(),
            kind: kind.to_string(),
            c,
            params: p,
            flops: f,
        });
    }
    let mut notes = vec![format!(
        "norm sites: {}, channel sum {}",
        arch.norm_sites().len(),
        arch.norm_channel_sum()
    )];
    if choice == NormChoice::En {
        let k = en.k();
        notes.push(format!(
            "mixture-head accounting: psi(K) = K²·πK + πK + πK·K + K = {} at K={}, π={}; \
             each norm site adds 2KC + C + psi(K) parameters",
            psi(k, en.pi),
            k,
            en.pi
        ));
    }
    Ok(ArchReport {
        arch: arch.name.clone(),
        norm: choice.tag().to_string(),
        input: [arch.input_channels, r, r],
        convention: "1 FLOP = 1 multiply-accumulate; activations and max-pool free; \
                     normalization: 2S statistics + S standardize + S per affine over S elements"
            .to_string(),
        notes,
        layers,
        totals: Totals { params, flops },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn en_cfg(r: usize) -> EnConfig {
        EnConfig {
            r,
            ..EnConfig::default()
        }
    }

    #[test]
    fn resnet50_has_53_norm_sites_summing_to_26560() {
        let a = resnet50_spec();
        assert_eq!(a.norm_sites().len(), 53);
        assert_eq!(a.norm_channel_sum(), 26_560);
        assert_eq!(a.max_div, 32);
    }

    #[test]
    fn resnet50_bn_param_total_exact() {
        let a = resnet50_spec();
        let rep = count_report(&a, NormChoice::Bn, &en_cfg(32), 224).unwrap();
        assert_eq!(rep.totals.params, 25_557_032);
    }

    #[test]
    fn resnet50_en_param_total_exact() {
        let a = resnet50_spec();
        let rep = count_report(&a, NormChoice::En, &en_cfg(32), 224).unwrap();
        // 53 sites of 7C + psi(3): conv/fc base 25,503,912 + 7·26,560 + 53·1953
        assert_eq!(rep.totals.params, 25_793_341);
        assert!(rep.totals.params >= 25_750_000 && rep.totals.params <= 26_000_000);
    }

    #[test]
    fn resnet50_stem_conv_macs_exact() {
        let a = resnet50_spec();
        let stem = &a.layers[0];
        assert_eq!(
            layer_flops(stem, NormChoice::Bn, &en_cfg(32), 224).unwrap(),
            118_013_952
        );
    }

    #[test]
    fn resnet50_flops_near_published_totals() {
        let a = resnet50_spec();
        let bn = count_report(&a, NormChoice::Bn, &en_cfg(32), 224).unwrap();
        let en = count_report(&a, NormChoice::En, &en_cfg(32), 224).unwrap();
        let bn_g = bn.totals.flops as f64 / 1e9;
        let en_g = en.totals.flops as f64 / 1e9;
        assert!((bn_g - 4.136).abs() < 0.1 * 4.136, "bn {bn_g}");
        assert!((en_g - 4.325).abs() < 0.1 * 4.325, "en {en_g}");
        assert!(en.totals.flops > bn.totals.flops);
    }

    #[test]
    fn en_overhead_positive_at_every_norm_site() {
        let a = resnet50_spec();
        let cfg = en_cfg(32);
        for l in a.layers.iter().filter(|l| matches!(l.kind, LayerKind::Norm { .. })) {
            let fb = layer_flops(l, NormChoice::Bn, &cfg, 224).unwrap();
            let fe = layer_flops(l, NormChoice::En, &cfg, 224).unwrap();
            let pb = layer_params(&l.kind, NormChoice::Bn, &cfg).unwrap();
            let pe = layer_params(&l.kind, NormChoice::En, &cfg).unwrap();
            assert!(fe > fb, "{}", l.name);
            assert!(pe > pb, "{}", l.name);
        }
    }

    #[test]
    fn flops_monotone_in_resolution_and_pool_size() {
        use crate::normalizers::NormalizerKind;
        let a = resnet50_spec();
        let cfg = en_cfg(32);
        let f224 = count_report(&a, NormChoice::En, &cfg, 224).unwrap().totals.flops;
        let f256 = count_report(&a, NormChoice::En, &cfg, 256).unwrap().totals.flops;
        assert!(f256 > f224);
        let cfg2 = EnConfig {
            pool: vec![NormalizerKind::Instance, NormalizerKind::Layer],
            r: 32,
            ..EnConfig::default()
        };
        let f_k2 = count_report(&a, NormChoice::En, &cfg2, 224).unwrap().totals.flops;
        assert!(f_k2 < f224);
    }

    #[test]
    fn odd_resolution_rejected_with_layer_name() {
        let a = resnet50_spec();
        let err = count_report(&a, NormChoice::Bn, &en_cfg(32), 225).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn micro_spec_counts_by_hand() {
        let a = micro_spec([16, 32, 64], 3);
        assert_eq!(a.norm_sites().len(), 3);
        assert_eq!(a.norm_channel_sum(), 112);
        let rep = count_report(&a, NormChoice::Bn, &en_cfg(8), 32).unwrap();
        // convs 432+4608+18432, proj 2048, fc 195, affines 224
        assert_eq!(rep.totals.params, 25_939);
    }

    #[test]
    fn en_total_is_bn_total_plus_per_site_formula() {
        let cfg = en_cfg(8);
        let k = cfg.k();
        let a = micro_spec([16, 32, 64], 3);
        let bn = count_report(&a, NormChoice::Bn, &cfg, 32).unwrap().totals.params;
        let en = count_report(&a, NormChoice::En, &cfg, 32).unwrap().totals.params;
        let delta: usize = a
            .norm_sites()
            .iter()
            .map(|(_, c)| 2 * k * c + c + psi(k, cfg.pi) - 2 * c)
            .sum();
        assert_eq!(en, bn + delta);
    }

    #[test]
    fn report_serializes_with_declared_convention() {
        let a = micro_spec([16, 32, 64], 3);
        let rep = count_report(&a, NormChoice::En, &en_cfg(8), 32).unwrap();
        let js = serde_json::to_string(&rep).unwrap();
        assert!(js.contains("multiply-accumulate"));
        assert!(js.contains("\"layers\""));
        assert!(js.contains("\"totals\""));
        let back: ArchReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back.totals.params, rep.totals.params);
    }

    #[test]
    fn en_count_rejects_indivisible_site() {
        let a = micro_spec([16, 32, 64], 3);
        // r=32 leaves the 16-channel site indivisible
        assert!(count_report(&a, NormChoice::En, &en_cfg(32), 32).is_err());
    }
}
