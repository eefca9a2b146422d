//! Recording, aggregating, and exporting per-sample mixture ratios.
//!
//! A recording pass is a read-only tap on the model's forward: it reuses the
//! ratio matrices the mixture layers already emit, so outputs with and
//! without recording are bitwise identical. Exports feed external plotting
//! and dimensionality-reduction tools.

use crate::error::{ExnError, Result};
use crate::graph::Graph;
use crate::micro::MicroCnn;
use crate::params::{Bindings, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::trainer::Dataset;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub epoch: usize,
    /// Index of the mixture site, in layer order.
    pub layer: usize,
    pub sample: usize,
    pub class: usize,
    pub lambda: Vec<f64>,
}

impl RatioRecord {
    pub fn validate(&self) -> Result<()> {
        let mut sum = 0f64;
        for v in &self.lambda {
            if !(*v > 0.0) {
                return Err(ExnError::numeric(format!(
                    "ratio entry {v} for sample {} layer {} is not positive",
                    self.sample, self.layer
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ExnError::numeric(format!(
                "ratios for sample {} layer {} sum to {sum}",
                self.sample, self.layer
            )));
        }
        Ok(())
    }
}

/// One forward pass per chunk of `batch`, tapping every mixture site.
/// Produces one record per (site, sample). Inference mode leaves all state
/// untouched; train mode records the ratios a training step would see (and
/// moves running statistics accordingly).
pub fn record_ratios<T: Scalar>(
    model: &MicroCnn,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    idx: &[usize],
    epoch: usize,
    mode: Mode,
) -> Result<Vec<RatioRecord>> {
    if model.en_site_names().is_empty() {
        return Err(ExnError::invalid(
            "model has no per-sample mixture layers to record",
        ));
    }
    if idx.is_empty() {
        return Err(ExnError::invalid("no samples selected"));
    }
    let mut records = Vec::new();
    for chunk in idx.chunks(32) {
        let (images, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.input(images);
        let out = model.forward(&mut g, store, &mut binds, xv, mode)?;
        for (li, (_, lam)) in out.ratios.iter().enumerate() {
            let lt = g.value(*lam);
            let k = lt.shape()[1];
            for (row, (&sample, &class)) in chunk.iter().zip(&labels).enumerate() {
                let rec = RatioRecord {
                    epoch,
                    layer: li,
                    sample,
                    class,
                    lambda: lt.data()[row * k..(row + 1) * k]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect(),
                };
                rec.validate()?;
                records.push(rec);
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    /// Mean per layer over every record (the whole-set view).
    Layer,
    /// Mean per (class, layer).
    ClassByLayer,
    /// Mean per (epoch, layer) — trajectory view.
    EpochByLayer,
}

impl Grouping {
    pub fn parse(s: &str) -> Result<Grouping> {
        match s {
            "layer" => Ok(Grouping::Layer),
            "class" => Ok(Grouping::ClassByLayer),
            "epoch" => Ok(Grouping::EpochByLayer),
            _ => Err(ExnError::invalid(format!(
                "unknown grouping {s:?}, expected layer|class|epoch"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioAggregate {
    pub layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Arithmetic mean of λ per group, in (layer, class, epoch) order.
pub fn aggregate(records: &[RatioRecord], grouping: Grouping) -> Result<Vec<RatioAggregate>> {
    if records.is_empty() {
        return Err(ExnError::invalid("no records to aggregate"));
    }
    let k = records[0].lambda.len();
    let mut groups: BTreeMap<(usize, Option<usize>, Option<usize>), (Vec<f64>, usize)> =
        BTreeMap::new();
    for r in records {
        if r.lambda.len() != k {
            return Err(ExnError::shape(format!(
                "mixed pool sizes in records: {} vs {k}",
                r.lambda.len()
            )));
        }
        let key = match grouping {
            Grouping::Layer => (r.layer, None, None),
            Grouping::ClassByLayer => (r.layer, Some(r.class), None),
            Grouping::EpochByLayer => (r.layer, None, Some(r.epoch)),
        };
        let entry = groups.entry(key).or_insert_with(|| (vec![0.0; k], 0));
        for (acc, v) in entry.0.iter_mut().zip(&r.lambda) {
            *acc += v;
        }
        entry.1 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|((layer, class, epoch), (sum, count))| RatioAggregate {
            layer,
            class,
            epoch,
            mean: sum.into_iter().map(|s| s / count as f64).collect(),
            count,
        })
        .collect())
}

/// Layer-major concatenation of one sample's ratios across all `layers`
/// sites: [λ⁰_1..λ⁰_K, λ¹_1..λ¹_K, …]. Requires exactly one record per site.
pub fn concat_vector(records: &[RatioRecord], sample: usize, layers: usize) -> Result<Vec<f64>> {
    let mut per_layer: Vec<Option<&RatioRecord>> = vec![None; layers];
    for r in records.iter().filter(|r| r.sample == sample) {
        if r.layer >= layers {
            return Err(ExnError::invalid(format!(
                "record for layer {} but only {layers} layers declared",
                r.layer
            )));
        }
        if per_layer[r.layer].is_some() {
            return Err(ExnError::invalid(format!(
                "duplicate record for sample {sample} layer {}",
                r.layer
            )));
        }
        per_layer[r.layer] = Some(r);
    }
    let mut out = Vec::new();
    for (li, slot) in per_layer.iter().enumerate() {
        let r = slot.ok_or_else(|| {
            ExnError::invalid(format!("sample {sample} missing a record for layer {li}"))
        })?;
        out.extend_from_slice(&r.lambda);
    }
    Ok(out)
}

/// Concatenated vectors for every sample present, sorted by sample id.
pub fn concat_vectors(records: &[RatioRecord], layers: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut samples: Vec<usize> = records.iter().map(|r| r.sample).collect();
    samples.sort_unstable();
    samples.dedup();
    samples
        .into_iter()
        .map(|s| Ok((s, concat_vector(records, s, layers)?)))
        .collect()
}

/// 12 significant digits — enough to round-trip well under 1e-9.
fn fmt_ratio(v: f64) -> String {
    format!("{v:.11e}")
}

pub fn records_to_csv(records: &[RatioRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(ExnError::invalid("no records to export"));
    }
    let k = records[0].lambda.len();
    let mut s = String::from("epoch,layer,sample,class");
    for i in 1..=k {
        write!(s, ",lambda_{i}").unwrap();
    }
    s.push('\n');
    for r in records {
        write!(s, "{},{},{},{}", r.epoch, r.layer, r.sample, r.class).unwrap();
        for v in &r.lambda {
            write!(s, ",{}", fmt_ratio(*v)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_records_csv(text: &str) -> Result<Vec<RatioRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ExnError::format("empty ratio CSV"))?;
    if !header.starts_with("epoch,layer,sample,class,lambda_1") {
        return Err(ExnError::format(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(ExnError::format(format!("line {}: too few fields", ln + 2)));
        }
        let parse_usize = |f: &str| {
            f.parse::<usize>()
                .map_err(|e| ExnError::format(format!("line {}: {e}", ln + 2)))
        };
        let lambda = fields[4..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| ExnError::format(format!("line {}: {e}", ln + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(RatioRecord {
            epoch: parse_usize(fields[0])?,
            layer: parse_usize(fields[1])?,
            sample: parse_usize(fields[2])?,
            class: parse_usize(fields[3])?,
            lambda,
        });
    }
    Ok(out)
}

pub fn vectors_to_csv(vectors: &[(usize, Vec<f64>)]) -> Result<String> {
    if vectors.is_empty() {
        return Err(ExnError::invalid("no vectors to export"));
    }
    let width = vectors[0].1.len();
    let mut s = String::from("sample");
    for i in 1..=width {
        write!(s, ",v_{i}").unwrap();
    }
    s.push('\n');
    for (sample, v) in vectors {
        if v.len() != width {
            return Err(ExnError::shape(format!(
                "vector width {} for sample {sample}, expected {width}",
                v.len()
            )));
        }
        write!(s, "{sample}").unwrap();
        for x in v {
            write!(s, ",{}", fmt_ratio(*x)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn aggregates_to_json(aggs: &[RatioAggregate]) -> Result<String> {
    Ok(serde_json::to_string_pretty(aggs)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| ExnError::format(format!("writing {}: {e}", path.display())))
}

pub fn write_records_csv(path: &Path, records: &[RatioRecord]) -> Result<()> {
    write_file(path, &records_to_csv(records)?)
}

pub fn write_vectors_csv(path: &Path, vectors: &[(usize, Vec<f64>)]) -> Result<()> {
    write_file(path, &vectors_to_csv(vectors)?)
}

pub fn write_aggregates_json(path: &Path, aggs: &[RatioAggregate]) -> Result<()> {
    write_file(path, &aggregates_to_json(aggs)?)
}
