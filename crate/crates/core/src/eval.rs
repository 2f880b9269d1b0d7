//! Metrics, the impossible-transition audit, attention-map export, and the
//! banded-vs-dense attention benchmark.
//!
//! All functions here are pure over their inputs; evaluation visits stacks in
//! dataset order so reports are deterministic.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Boundary;
use crate::nn::{build_attention_map, toeplitz_attention, Model};
use crate::synth::StackSample;
use crate::tensor::Tensor;

/// 3x3 confusion counts; rows are true classes, columns predictions, in
/// epidermis / DEJ / dermis order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        ConfusionMatrix::default()
    }

    pub fn from_pairs(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Validation(format!(
                "prediction length {} does not match truth length {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut cm = ConfusionMatrix::new();
        for (&p, &t) in pred.iter().zip(truth) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth > 2 || pred > 2 {
            return Err(Error::Validation(format!(
                "labels must be in 0..=2, got true={truth} pred={pred}"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..3 {
            for p in 0..3 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn from_counts(counts: [[usize; 3]; 3]) -> Self {
        ConfusionMatrix { counts }
    }
}

/// Accuracy plus one-vs-rest sensitivity and specificity per class. A class
/// with an empty denominator reports `None`, never a silent 0 or 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: [Option<f64>; 3],
    pub specificity: [Option<f64>; 3],
}

/// One-vs-rest metrics from the confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("metrics need a non-empty confusion matrix".into()));
    }
    let trace: usize = (0..3).map(|c| cm.count(c, c)).sum();
    let accuracy = trace as f64 / total as f64;
    let mut sensitivity = [None; 3];
    let mut specificity = [None; 3];
    for c in 0..3 {
        let tp = cm.count(c, c);
        let row: usize = (0..3).map(|p| cm.count(c, p)).sum();
        let col: usize = (0..3).map(|t| cm.count(t, c)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let tn = total - row - fp;
        if tp + fn_ > 0 {
            sensitivity[c] = Some(tp as f64 / (tp + fn_) as f64);
        }
        if tn + fp > 0 {
            specificity[c] = Some(tn as f64 / (tn + fp) as f64);
        }
    }
    Ok(Metrics { accuracy, sensitivity, specificity })
}

/// Counts of the four anatomically impossible adjacent transitions, in the
/// canonical reporting order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpossibleCounts {
    pub epidermis_to_dermis: usize,
    pub dej_to_epidermis: usize,
    pub dermis_to_epidermis: usize,
    pub dermis_to_dej: usize,
}

impl ImpossibleCounts {
    pub fn total(&self) -> usize {
        self.epidermis_to_dermis
            + self.dej_to_epidermis
            + self.dermis_to_epidermis
            + self.dermis_to_dej
    }

    pub fn merge(&mut self, other: &ImpossibleCounts) {
        self.epidermis_to_dermis += other.epidermis_to_dermis;
        self.dej_to_epidermis += other.dej_to_epidermis;
        self.dermis_to_epidermis += other.dermis_to_epidermis;
        self.dermis_to_dej += other.dermis_to_dej;
    }
}

/// Scan adjacent pairs going deeper; the allowed set is
/// {0->0, 0->1, 1->1, 1->2, 2->2} and each disallowed pair increments
/// exactly one counter.
pub fn count_impossible(labels: &[usize]) -> Result<ImpossibleCounts> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 2) {
        return Err(Error::Validation(format!("label {bad} outside 0..=2")));
    }
    let mut counts = ImpossibleCounts::default();
    for pair in labels.windows(2) {
        match (pair[0], pair[1]) {
            (0, 2) => counts.epidermis_to_dermis += 1,
            (1, 0) => counts.dej_to_epidermis += 1,
            (2, 0) => counts.dermis_to_epidermis += 1,
            (2, 1) => counts.dermis_to_dej += 1,
            _ => {}
        }
    }
    Ok(counts)
}

/// Pooled evaluation over a dataset plus its per-stack breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub sensitivity: [Option<f64>; 3],
    pub specificity: [Option<f64>; 3],
    pub impossible: ImpossibleCounts,
    pub total_impossible: usize,
    pub slices: usize,
    pub stacks: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackDetail {
    pub id: String,
    pub slices: usize,
    pub correct: usize,
    pub impossible: ImpossibleCounts,
}

/// Evaluate free-running predictions produced by an arbitrary predictor;
/// metrics are pooled over slices across all stacks.
pub fn evaluate_with<F>(dataset: &[StackSample], mut predict: F) -> Result<(EvalReport, Vec<StackDetail>)>
where
    F: FnMut(&StackSample) -> Result<Vec<usize>>,
{
    if dataset.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let mut cm = ConfusionMatrix::new();
    let mut impossible = ImpossibleCounts::default();
    let mut details = Vec::with_capacity(dataset.len());
    for stack in dataset {
        let pred = predict(stack)?;
        if pred.len() != stack.labels.len() {
            return Err(Error::Validation(format!(
                "prediction length {} does not match stack {} with {} slices",
                pred.len(),
                stack.id,
                stack.labels.len()
            )));
        }
        let stack_cm = ConfusionMatrix::from_pairs(&pred, &stack.labels)?;
        let stack_imp = count_impossible(&pred)?;
        let correct: usize = (0..3).map(|c| stack_cm.count(c, c)).sum();
        details.push(StackDetail {
            id: stack.id.clone(),
            slices: stack.labels.len(),
            correct,
            impossible: stack_imp,
        });
        cm.merge(&stack_cm);
        impossible.merge(&stack_imp);
    }
    let m = metrics(&cm)?;
    let report = EvalReport {
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        impossible,
        total_impossible: impossible.total(),
        slices: cm.total(),
        stacks: dataset.len(),
    };
    Ok((report, details))
}

/// Evaluate a model's free-running predictions over a dataset.
pub fn evaluate(model: &Model, dataset: &[StackSample]) -> Result<(EvalReport, Vec<StackDetail>)> {
    evaluate_with(dataset, |stack| model.predict(stack))
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".to_string(),
    }
}

/// Human-readable report table; the error-type columns follow the canonical
/// epidermis->dermis, DEJ->epidermis, dermis->epidermis, dermis->DEJ order.
pub fn report_text(report: &EvalReport) -> String {
    let classes = ["epidermis", "DEJ", "dermis"];
    let mut out = String::new();
    out.push_str(&format!(
        "stacks: {}   slices: {}\naccuracy: {:.4}\n\n",
        report.stacks, report.slices, report.accuracy
    ));
    out.push_str("class        sensitivity  specificity\n");
    for (i, name) in classes.iter().enumerate() {
        out.push_str(&format!(
            "{name:<12} {:>11}  {:>11}\n",
            fmt_opt(report.sensitivity[i]),
            fmt_opt(report.specificity[i])
        ));
    }
    out.push_str("\nimpossible transitions\n");
    out.push_str(&format!(
        "epidermis->dermis: {}\nDEJ->epidermis:    {}\ndermis->epidermis: {}\ndermis->DEJ:       {}\ntotal:             {}\n",
        report.impossible.epidermis_to_dermis,
        report.impossible.dej_to_epidermis,
        report.impossible.dermis_to_epidermis,
        report.impossible.dermis_to_dej,
        report.total_impossible
    ));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "pgm" => Ok(ExportFormat::Pgm),
            other => Err(Error::Config(format!(
                "unknown export format '{other}' (expected csv or pgm)"
            ))),
        }
    }
}

/// Write an attention map as plain CSV rows or an 8-bit binary PGM image.
/// PGM values are scaled by the map's maximum entry: 0 maps to black and the
/// maximum to white.
pub fn export_attention_map(map: &Tensor, path: &Path, format: ExportFormat) -> Result<()> {
    if map.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "attention map must be 2-D, got {:?}",
            map.shape()
        )));
    }
    let (rows, cols) = (map.rows(), map.cols());
    let bytes = match format {
        ExportFormat::Csv => {
            let mut text = String::new();
            for r in 0..rows {
                let line: Vec<String> = map.row(r).iter().map(|v| format!("{v}")).collect();
                text.push_str(&line.join(","));
                text.push('\n');
            }
            text.into_bytes()
        }
        ExportFormat::Pgm => {
            let max = map.data().iter().cloned().fold(0.0_f64, f64::max);
            let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
            for &v in map.data() {
                let scaled = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                bytes.push(scaled.clamp(0.0, 255.0) as u8);
            }
            bytes
        }
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Timing comparison of the banded-convolution attention path against the
/// explicit dense attention-map multiply.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub t: usize,
    pub e: usize,
    pub d: usize,
    pub reps: usize,
    pub conv_secs: f64,
    pub dense_secs: f64,
    pub speedup: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Verify the two attention implementations agree within 1e-9 on the given
/// size, then report median wall times over `reps` runs of each path.
pub fn benchmark_attention(
    t: usize,
    e: usize,
    d: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if t == 0 || e == 0 || reps == 0 {
        return Err(Error::Validation("benchmark sizes and reps must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let h = Tensor::new(
        vec![t, e],
        (0..t * e).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut logits: Vec<f64> = (0..2 * d + 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    crate::graph::softmax_row(&mut logits);
    let weights = Tensor::vector(logits);

    // correctness gate before any timing
    for boundary in [Boundary::ZeroPad, Boundary::Renormalize] {
        let conv = toeplitz_attention(&h, &weights, boundary)?;
        let map = build_attention_map(&weights, t, boundary)?;
        let dense = map.matmul(&h)?;
        let diff = conv.max_abs_diff(&dense);
        if diff > 1e-9 {
            return Err(Error::BenchGate(format!(
                "conv and dense paths disagree by {diff:.3e} at T={t} E={e} D={d} ({boundary})"
            )));
        }
    }

    let mut conv_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = toeplitz_attention(&h, &weights, Boundary::ZeroPad)?;
        conv_times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mut dense_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let map = build_attention_map(&weights, t, Boundary::ZeroPad)?;
        let out = map.matmul(&h)?;
        dense_times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }

    let conv_secs = median(conv_times);
    let dense_secs = median(dense_times);
    Ok(BenchReport {
        t,
        e,
        d,
        reps,
        conv_secs,
        dense_secs,
        speedup: dense_secs / conv_secs,
    })
}
