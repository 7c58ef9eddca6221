//! CSV readers and writers for datasets, features, metrics and diagnostics.
//!
//! Floats are written in Rust's shortest round-trip notation, so a read after
//! a write reproduces every value exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::eval::{AblationRow, ConsensusSummary};
use crate::linalg::Matrix;
use crate::subtype::SubtypeCluster;
use crate::synth::{Domain, LabeledSample};
use crate::trainer::MetricsRow;

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(i).ok_or_else(|| Error::Parse(format!("line {line}: missing {what}")))?;
    raw.parse().map_err(|_| Error::Parse(format!("line {line}: bad {what} {raw:?}")))
}

fn parse_float(rec: &csv::StringRecord, i: usize, what: &str) -> Result<f64> {
    let v: f64 = parse_field(rec, i, what)?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("non-finite {what}")));
    }
    Ok(v)
}

/// Checks that the header starts with `fixed` followed by `{prefix}0..`;
/// returns the number of vector columns.
fn check_header(headers: &csv::StringRecord, fixed: &[&str], prefix: &str) -> Result<usize> {
    if headers.len() < fixed.len() || headers.iter().zip(fixed).any(|(h, f)| h != *f) {
        return Err(Error::Parse(format!("header must start with {}", fixed.join(","))));
    }
    for (j, h) in headers.iter().skip(fixed.len()).enumerate() {
        if h != format!("{prefix}{j}") {
            return Err(Error::Parse(format!("column {} should be {prefix}{j}, found {h:?}", fixed.len() + j)));
        }
    }
    Ok(headers.len() - fixed.len())
}

fn vector_header(fixed: &[&str], prefix: &str, dim: usize) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain((0..dim).map(|j| format!("{prefix}{j}"))).collect()
}

const DATASET_FIXED: [&str; 4] = ["id", "domain", "class", "true_subtype"];

/// Header `id,domain,class,true_subtype,x0..x{d-1}`.
pub fn write_dataset<W: Write>(w: W, samples: &[LabeledSample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut out = writer(w);
    out.write_record(vector_header(&DATASET_FIXED, "x", dim))?;
    for s in samples {
        if s.x.len() != dim {
            return Err(Error::Shape(format!("sample {} has {} inputs, expected {dim}", s.id, s.x.len())));
        }
        let mut rec = vec![s.id.to_string(), s.domain.to_string(), s.class_label.to_string(), s.true_subtype.to_string()];
        rec.extend(s.x.iter().map(|&v| fmt(v)));
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<LabeledSample>> {
    let mut rd = reader(r);
    let dim = check_header(rd.headers()?, &DATASET_FIXED, "x")?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let domain: Domain = rec.get(1).unwrap_or("").parse()?;
        out.push(LabeledSample {
            id: parse_field(&rec, 0, "id")?,
            domain,
            class_label: parse_field(&rec, 2, "class")?,
            true_subtype: parse_field(&rec, 3, "true_subtype")?,
            x: (0..dim).map(|j| parse_float(&rec, 4 + j, "input")).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// One exported feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: u64,
    pub domain: Domain,
    pub class: Option<usize>,
    pub pseudo: Option<usize>,
    pub feature: Vec<f64>,
}

const FEATURE_FIXED: [&str; 4] = ["id", "domain", "class", "pseudo"];

fn opt(v: Option<usize>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Header `id,domain,class,pseudo,f0..f{d-1}`; missing labels are empty cells.
pub fn write_features<W: Write>(w: W, rows: &[FeatureRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.feature.len());
    let mut out = writer(w);
    out.write_record(vector_header(&FEATURE_FIXED, "f", dim))?;
    for r in rows {
        if r.feature.len() != dim {
            return Err(Error::Shape(format!("feature row {} has width {}", r.id, r.feature.len())));
        }
        let mut rec = vec![r.id.to_string(), r.domain.to_string(), opt(r.class), opt(r.pseudo)];
        rec.extend(r.feature.iter().map(|&v| fmt(v)));
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_opt(rec: &csv::StringRecord, i: usize, what: &str) -> Result<Option<usize>> {
    if rec.get(i).is_some_and(str::is_empty) {
        return Ok(None);
    }
    parse_field(rec, i, what).map(Some)
}

pub fn read_features<R: Read>(r: R) -> Result<Vec<FeatureRow>> {
    let mut rd = reader(r);
    let dim = check_header(rd.headers()?, &FEATURE_FIXED, "f")?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(FeatureRow {
            id: parse_field(&rec, 0, "id")?,
            domain: rec.get(1).unwrap_or("").parse()?,
            class: parse_opt(&rec, 2, "class")?,
            pseudo: parse_opt(&rec, 3, "pseudo")?,
            feature: (0..dim).map(|j| parse_float(&rec, 4 + j, "feature")).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Stacks feature rows into a matrix.
pub fn feature_matrix(rows: &[FeatureRow]) -> Result<Matrix> {
    let dim = rows.first().map_or(0, |r| r.feature.len());
    Matrix::from_rows(&rows.iter().map(|r| r.feature.as_slice()).collect::<Vec<_>>(), dim)
}

pub const METRICS_HEADER: [&str; 7] =
    ["iteration", "loss_ce", "loss_class", "loss_sub", "loss_total", "target_acc", "source_acc"];

pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(
            [r.loss_ce, r.loss_class, r.loss_sub, r.loss_total, r.target_acc, r.source_acc].map(fmt),
        );
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = reader(r);
    if rd.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse(format!("metrics header must be {}", METRICS_HEADER.join(","))));
    }
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricsRow {
                iteration: parse_field(&rec, 0, "iteration")?,
                loss_ce: parse_float(&rec, 1, "loss_ce")?,
                loss_class: parse_float(&rec, 2, "loss_class")?,
                loss_sub: parse_float(&rec, 3, "loss_sub")?,
                loss_total: parse_float(&rec, 4, "loss_total")?,
                target_acc: parse_float(&rec, 5, "target_acc")?,
                source_acc: parse_float(&rec, 6, "source_acc")?,
            })
        })
        .collect()
}

pub fn write_consensus<W: Write>(w: W, rows: &[ConsensusSummary]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["k", "auc", "delta_auc", "mean_consensus", "ambiguous_fraction"])?;
    for r in rows {
        let mut rec = vec![r.k.to_string()];
        rec.extend([r.auc, r.delta_auc, r.mean_consensus, r.ambiguous_fraction].map(fmt));
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `variant,mean,sd` then one `seed_<s>` column per seed.
pub fn write_ablation<W: Write>(w: W, rows: &[AblationRow], seeds: &[u64]) -> Result<()> {
    let mut out = writer(w);
    let mut header = vec!["variant".to_string(), "mean".into(), "sd".into()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    out.write_record(header)?;
    for r in rows {
        if r.accuracies.len() != seeds.len() {
            return Err(Error::Shape(format!("{} accuracies for {} seeds", r.accuracies.len(), seeds.len())));
        }
        let mut rec = vec![r.variant.to_string(), fmt(r.mean), fmt(r.sd)];
        rec.extend(r.accuracies.iter().map(|&a| fmt(a)));
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Subtype index of each cluster within its class, in list order.
fn subtype_indices(clusters: &[SubtypeCluster]) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    clusters
        .iter()
        .map(|c| {
            let k = seen.entry(c.class_id).or_insert(0usize);
            *k += 1;
            *k - 1
        })
        .collect()
}

/// Membership dump `class,subtype,domain,member_id`.
pub fn write_cluster_members<W: Write>(
    w: W,
    clusters: &[SubtypeCluster],
    source_ids: &[u64],
    target_ids: &[u64],
) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["class", "subtype", "domain", "member_id"])?;
    for (c, k) in clusters.iter().zip(subtype_indices(clusters)) {
        for (domain, rows, ids) in
            [(Domain::Source, &c.source_members, source_ids), (Domain::Target, &c.target_members, target_ids)]
        {
            for &r in rows {
                let id = ids.get(r).ok_or_else(|| Error::Shape(format!("member row {r} out of range")))?;
                out.write_record([c.class_id.to_string(), k.to_string(), domain.to_string(), id.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Centroid table `class,subtype,m_s,m_t,weight,c0..c{d-1}` with the subtype centre.
pub fn write_cluster_centroids<W: Write>(w: W, clusters: &[SubtypeCluster]) -> Result<()> {
    let dim = clusters.first().map_or(0, |c| c.mu_st.len());
    let mut out = writer(w);
    out.write_record(vector_header(&["class", "subtype", "m_s", "m_t", "weight"], "c", dim))?;
    for (c, k) in clusters.iter().zip(subtype_indices(clusters)) {
        let mut rec = vec![c.class_id.to_string(), k.to_string(), c.m_s().to_string(), c.m_t().to_string(), fmt(c.weight)];
        rec.extend(c.mu_st.iter().map(|&v| fmt(v)));
        out.write_record(rec)?;
    }
    out.flush()?;
    Ok(())
}
