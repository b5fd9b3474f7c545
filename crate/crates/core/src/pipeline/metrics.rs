//! Retrieval metrics, similarity statistics and the JSON-lines metrics stream.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, EpochRecord, Phase};
use crate::encoders::{encode_image, encode_text};
use crate::error::{NcuError, Result};
use crate::numcore::Matrix;
use crate::synthgen::SyntheticDataset;

pub const HIST_BINS: usize = 40;
/// Fraction of each row's negatives averaged into the hard-negative statistic.
pub const TOP_NEG_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub pos_mean: f64,
    pub pos_std: f64,
    pub neg_mean: f64,
    pub top_neg_mean: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins] }
    }

    fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let pos = ((x - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let k = (pos.max(0.0) as usize).min(bins - 1);
        self.counts[k] += 1;
    }

    pub fn bin_edges(&self, k: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * k as f64, self.lo + w * (k + 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Percentages; a retrieved item is a hit when it shares the query's class.
    pub image_to_text: Recall,
    pub text_to_image: Recall,
    pub zero_shot_acc: f64,
    pub similarity: SimilarityStats,
    pub pos_hist: Histogram,
    pub neg_hist: Histogram,
    pub phase: Option<Phase>,
    pub loss_history: Vec<EpochRecord>,
}

/// Indices of the `k` largest entries, ties broken by lower index.
fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let k = k.min(row.len());
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

fn recall(sim: &Matrix, query_class: &[i32], item_class: &[i32]) -> Recall {
    let n = sim.rows();
    let mut hits = [0usize; 3];
    for i in 0..n {
        let ranked = top_k(sim.row(i), 10);
        let first_hit = ranked.iter().position(|&j| item_class[j] == query_class[i]);
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first_hit.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    Recall { r1: pct(hits[0]), r5: pct(hits[1]), r10: pct(hits[2]) }
}

fn zero_shot(v: &Matrix, t: &Matrix, image_class: &[i32], text_class: &[i32], num_classes: usize) -> f64 {
    let d = t.cols();
    let mut protos = Matrix::zeros(num_classes, d);
    for (i, &c) in text_class.iter().enumerate() {
        for (p, x) in protos.row_mut(c as usize).iter_mut().zip(t.row(i)) {
            *p += x;
        }
    }
    for c in 0..num_classes {
        let row = protos.row_mut(c);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    let scores = v.matmul_nt(&protos);
    let present: Vec<bool> = (0..num_classes).map(|c| text_class.contains(&(c as i32))).collect();
    let correct = (0..v.rows())
        .filter(|&i| {
            let best = (0..num_classes)
                .filter(|&c| present[c])
                .max_by(|&a, &b| scores[(i, a)].total_cmp(&scores[(i, b)]).then(b.cmp(&a)));
            best == Some(image_class[i] as usize)
        })
        .count();
    100.0 * correct as f64 / v.rows() as f64
}

fn similarity_stats(sim: &Matrix) -> (SimilarityStats, Histogram, Histogram) {
    let n = sim.rows();
    let mut pos_hist = Histogram::new(-1.0, 1.0, HIST_BINS);
    let mut neg_hist = Histogram::new(-1.0, 1.0, HIST_BINS);
    let pos: Vec<f64> = (0..n).map(|i| sim[(i, i)]).collect();
    pos.iter().for_each(|&x| pos_hist.add(x));
    let pos_mean = pos.iter().sum::<f64>() / n as f64;
    let pos_std = (pos.iter().map(|x| (x - pos_mean).powi(2)).sum::<f64>() / n as f64).sqrt();

    let mut neg_sum = 0.0;
    let mut top_sum = 0.0;
    let per_row = ((TOP_NEG_FRACTION * (n.saturating_sub(1)) as f64).ceil() as usize).max(1);
    let mut negs = Vec::with_capacity(n);
    for i in 0..n {
        negs.clear();
        negs.extend((0..n).filter(|&j| j != i).map(|j| sim[(i, j)]));
        for &x in &negs {
            neg_hist.add(x);
            neg_sum += x;
        }
        negs.sort_by(|a, b| b.total_cmp(a));
        top_sum += negs.iter().take(per_row).sum::<f64>() / per_row.min(negs.len()).max(1) as f64;
    }
    let neg_count = (n * n.saturating_sub(1)).max(1);
    let neg_mean = neg_sum / neg_count as f64;
    let top_neg_mean = if n > 1 { top_sum / n as f64 } else { 0.0 };
    let stats = SimilarityStats { pos_mean, pos_std, neg_mean, top_neg_mean, separation: pos_mean - neg_mean };
    (stats, pos_hist, neg_hist)
}

/// Metrics for paired embeddings `v[i] ↔ t[i]` with class labels on both sides.
pub fn evaluate_embeddings(
    v: &Matrix,
    t: &Matrix,
    image_class: &[i32],
    text_class: &[i32],
    num_classes: usize,
) -> Result<MetricsReport> {
    let n = v.rows();
    if t.shape() != v.shape() || image_class.len() != n || text_class.len() != n || n == 0 {
        return Err(NcuError::DimensionMismatch {
            op: "evaluate_embeddings",
            detail: format!("V {:?}, T {:?}, {} / {} labels", v.shape(), t.shape(), image_class.len(), text_class.len()),
        });
    }
    if image_class.iter().chain(text_class).any(|&c| c < 0 || c as usize >= num_classes) {
        return Err(NcuError::Data("class label out of range".into()));
    }
    let sim = v.matmul_nt(t);
    let image_to_text = recall(&sim, image_class, text_class);
    let text_to_image = recall(&sim.transpose(), text_class, image_class);
    let zero_shot_acc = zero_shot(v, t, image_class, text_class, num_classes);
    let (similarity, pos_hist, neg_hist) = similarity_stats(&sim);
    Ok(MetricsReport {
        n,
        image_to_text,
        text_to_image,
        zero_shot_acc,
        similarity,
        pos_hist,
        neg_hist,
        phase: None,
        loss_history: Vec::new(),
    })
}

pub fn evaluate(ckpt: &Checkpoint, data: &SyntheticDataset) -> Result<MetricsReport> {
    let v = encode_image(&ckpt.params, &data.x_img).map_err(|e| NcuError::Data(format!("evaluation data: {e}")))?;
    let t = encode_text(&ckpt.params, &data.x_txt).map_err(|e| NcuError::Data(format!("evaluation data: {e}")))?;
    let mut report =
        evaluate_embeddings(&v, &t, &data.class_label, &data.text_label, data.gen_config.num_classes)?;
    report.phase = Some(ckpt.phase);
    report.loss_history = ckpt.history.clone();
    Ok(report)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Epoch {
        #[serde(flatten)]
        record: EpochRecord,
        wall_time_s: f64,
    },
    Evaluate {
        label: String,
        report: MetricsReport,
    },
}

/// Receives per-epoch records while a phase runs.
pub trait MetricsSink {
    fn epoch(&mut self, record: &EpochRecord, wall_time_s: f64) -> Result<()>;
}

impl MetricsSink for () {
    fn epoch(&mut self, _: &EpochRecord, _: f64) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<EpochRecord> {
    fn epoch(&mut self, record: &EpochRecord, _: f64) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Append-only JSON-lines file; every line is flushed as soon as it is written.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { file: OpenOptions::new().create(true).append(true).open(path)? })
    }

    pub fn write(&mut self, line: &MetricsLine) -> Result<()> {
        let mut bytes = serde_json::to_vec(line).map_err(|e| NcuError::Format(e.to_string()))?;
        bytes.push(b'\n');
        self.file.write_all(&bytes)?;
        self.file.flush()?;
        Ok(())
    }
}

impl MetricsSink for MetricsWriter {
    fn epoch(&mut self, record: &EpochRecord, wall_time_s: f64) -> Result<()> {
        self.write(&MetricsLine::Epoch { record: record.clone(), wall_time_s })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsLine>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| NcuError::Format(format!("metrics line {}: {e}", k + 1)))?);
    }
    Ok(out)
}

/// Similarity histograms of every evaluation record as CSV.
pub fn histogram_csv(lines: &[MetricsLine]) -> String {
    let mut out = String::from("record,label,pairs,bin_lo,bin_hi,count\n");
    for (k, line) in lines.iter().enumerate() {
        let MetricsLine::Evaluate { label, report } = line else { continue };
        for (pairs, hist) in [("positive", &report.pos_hist), ("negative", &report.neg_hist)] {
            for (b, count) in hist.counts.iter().enumerate() {
                let (lo, hi) = hist.bin_edges(b);
                out.push_str(&format!("{k},{},{pairs},{lo},{hi},{count}\n", csv_field(label)));
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
