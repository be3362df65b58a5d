//! Classification metrics and explanation-quality checks.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::ModelAdapter;
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::{ClassLabel, ProbabilityVector, RasterImage};
use crate::perturb::{apply_mask, FusionPolicy, MaskVector};
use crate::segmentation::SegmentMap;
use crate::surrogate::Explanation;

/// Probabilities are clipped to `[LOSS_CLIP, 1]` before taking the log.
pub const LOSS_CLIP: f64 = 1e-12;

/// One line of a prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub true_label: u8,
    pub probs: ProbabilityVector,
}

impl PredictionRecord {
    pub fn predicted(&self) -> usize {
        self.probs.argmax()
    }
}

/// Reads a JSON Lines prediction log. Blank lines are skipped; line numbers are 1-based.
pub fn read_prediction_log(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_prediction_log(std::io::BufReader::new(file))
}

pub fn parse_prediction_log(reader: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.true_label > 1 || record.probs.len() != 2 {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected a label in {0, 1} and two probabilities".into(),
            });
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::contract("prediction log is empty"));
    }
    Ok(out)
}

/// `counts[true][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn misclassified(&self) -> u64 {
        self.counts[0][1] + self.counts[1][0]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..2 {
            for p in 0..2 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }
}

/// Predicted label is the argmax with ties going to the lower label.
pub fn confusion_matrix(records: &[PredictionRecord]) -> Result<ConfusionMatrix> {
    if records.is_empty() {
        return Err(Error::contract("no prediction records"));
    }
    let mut cm = ConfusionMatrix::default();
    for r in records {
        let t = usize::from(r.true_label);
        let p = r.predicted();
        if t > 1 || p > 1 {
            return Err(Error::contract(format!(
                "record {} is not a two-class prediction",
                r.sample_id
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::contract("accuracy of an empty confusion matrix")),
        n => Ok(cm.correct() as f64 / n as f64),
    }
}

/// Mean negative log-probability of the true class, in nats.
pub fn cross_entropy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("no prediction records"));
    }
    let sum: f64 = records
        .iter()
        .map(|r| {
            let p = r.probs.get(usize::from(r.true_label)).unwrap_or(0.0);
            -p.clamp(LOSS_CLIP, 1.0).ln()
        })
        .sum();
    Ok(sum / records.len() as f64)
}

/// `100 * numer / denom` rounded half-up to two decimals, e.g. `"94.70%"`.
///
/// Computed in integer hundredths of a percent so the rounding is exact.
pub fn format_percent(numer: u64, denom: u64) -> String {
    if denom == 0 {
        return "0.00%".to_string();
    }
    let hundredths = (20_000 * u128::from(numer) + u128::from(denom)) / (2 * u128::from(denom));
    format!("{}.{:02}%", hundredths / 100, hundredths % 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misclassification {
    pub count: u64,
    /// Records the percentage is taken over.
    pub of: u64,
    /// `100 * count / of`.
    pub percentage: f64,
}

impl Misclassification {
    fn new(count: u64, of: u64) -> Self {
        let percentage = if of == 0 { 0.0 } else { 100.0 * count as f64 / of as f64 };
        Self { count, of, percentage }
    }

    pub fn rendered(&self) -> String {
        format_percent(self.count, self.of)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMisclassification {
    pub class: ClassLabel,
    #[serde(flatten)]
    pub misclassified: Misclassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub split: Split,
    pub records: u64,
    pub accuracy: f64,
    /// Accuracy as rendered in the text table.
    pub accuracy_percent: String,
    pub cross_entropy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class_misclassified: Vec<ClassMisclassification>,
    pub total_misclassified: Misclassification,
}

fn short_name(class: &ClassLabel) -> &str {
    match class.name.as_str() {
        "glaucoma" => "G",
        "non-glaucoma" => "n-G",
        other => other,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned text table: accuracy and loss, then one misclassification row for all records
    /// and one per class.
    pub fn render_text(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model: {}  split: {split}  records: {}",
            self.model_id, self.records
        );
        let _ = writeln!(
            out,
            "accuracy: {}  loss: {:.6} nats",
            self.accuracy_percent, self.cross_entropy
        );
        let _ = writeln!(out);
        let mut rows = vec![("All Misclassified".to_string(), &self.total_misclassified)];
        for c in &self.per_class_misclassified {
            rows.push((format!("{} Misclassified", short_name(&c.class)), &c.misclassified));
        }
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>8}", "", "count", "of", "percent");
        for (name, m) in rows {
            let _ = writeln!(out, "{name:<width$}  {:>7}  {:>7}  {:>8}", m.count, m.of, m.rendered());
        }
        out
    }
}

/// Accuracy, loss, confusion and per-class misclassification for one model and split.
///
/// With a manifest, every record's `sample_id` must name a manifest entry (relative path)
/// carrying the same label; class names come from the manifest.
pub fn misclassification_report(
    records: &[PredictionRecord],
    manifest: Option<&DatasetManifest>,
    model_id: &str,
    split: Split,
) -> Result<MetricsReport> {
    let classes: Vec<ClassLabel> = match manifest {
        Some(m) => {
            let unknown: Vec<&str> = records
                .iter()
                .filter(|r| m.find(&r.sample_id).is_none())
                .map(|r| r.sample_id.as_str())
                .collect();
            if !unknown.is_empty() {
                return Err(Error::contract(format!(
                    "{} sample ids not in the manifest: {}",
                    unknown.len(),
                    unknown.join(", ")
                )));
            }
            let mismatched: Vec<&str> = records
                .iter()
                .filter(|r| m.find(&r.sample_id).is_some_and(|e| e.label != r.true_label))
                .map(|r| r.sample_id.as_str())
                .collect();
            if !mismatched.is_empty() {
                return Err(Error::contract(format!(
                    "labels disagree with the manifest for: {}",
                    mismatched.join(", ")
                )));
            }
            (0..2)
                .map(|v| m.class(v).cloned().map_or_else(|| ClassLabel::from_index(v), Ok))
                .collect::<Result<_>>()?
        }
        None => vec![ClassLabel::non_glaucoma(), ClassLabel::glaucoma()],
    };

    let cm = confusion_matrix(records)?;
    let total = cm.total();
    let mut per_class: Vec<ClassMisclassification> = classes
        .into_iter()
        .map(|class| {
            let t = usize::from(class.value);
            let of = cm.counts[t][0] + cm.counts[t][1];
            let wrong = of - cm.counts[t][t];
            ClassMisclassification {
                class,
                misclassified: Misclassification::new(wrong, of),
            }
        })
        .collect();
    // table order: positive class first
    per_class.sort_by_key(|c| std::cmp::Reverse(c.class.value));

    let report = MetricsReport {
        model_id: model_id.to_string(),
        split,
        records: total,
        accuracy: accuracy(&cm)?,
        accuracy_percent: format_percent(cm.correct(), total),
        cross_entropy: cross_entropy(records)?,
        confusion: cm,
        per_class_misclassified: per_class,
        total_misclassified: Misclassification::new(cm.misclassified(), total),
    };
    recount(&report, records)?;
    Ok(report)
}

/// Re-derives the counts straight from the records and compares them with the report.
fn recount(report: &MetricsReport, records: &[PredictionRecord]) -> Result<()> {
    let wrong = records
        .iter()
        .filter(|r| r.predicted() != usize::from(r.true_label))
        .count() as u64;
    let per_class_sum: u64 = report
        .per_class_misclassified
        .iter()
        .map(|c| c.misclassified.count)
        .sum();
    let consistent = report.records == records.len() as u64
        && report.total_misclassified.count == wrong
        && per_class_sum == wrong
        && report.confusion.total() == report.records
        && report.confusion.correct() + wrong == report.records;
    if consistent {
        Ok(())
    } else {
        Err(Error::contract("report counts disagree with an independent recount"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointingResult {
    Hit,
    Miss,
    /// The explanation is degenerate and ranks nothing.
    Indeterminate,
}

/// Hit iff the top-ranked segment is the ground-truth segment.
pub fn pointing_game(explanation: &Explanation, truth: usize) -> PointingResult {
    match explanation.selected.first() {
        _ if explanation.degenerate => PointingResult::Indeterminate,
        None => PointingResult::Indeterminate,
        Some(&top) if top == truth => PointingResult::Hit,
        Some(_) => PointingResult::Miss,
    }
}

/// Probability of the explained class as the highest-weighted segments are removed one by
/// one (segment-mean fill). Entry 0 is the unperturbed image; entry `j` has the top `j`
/// segments by signed weight removed (ties: smaller id).
pub fn deletion_curve(
    image: &RasterImage,
    map: &SegmentMap,
    explanation: &Explanation,
    model: &dyn ModelAdapter,
    steps: usize,
) -> Result<Vec<f64>> {
    let d = map.segment_count();
    if explanation.segment_count() != d {
        return Err(Error::contract(format!(
            "explanation covers {} segments but the map has {d}",
            explanation.segment_count()
        )));
    }
    if steps > d {
        return Err(Error::contract(format!("{steps} deletion steps exceed {d} segments")));
    }
    let w = &explanation.weights;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));

    let mut mask = MaskVector::ones(d);
    let mut images = vec![apply_mask(image, map, &mask, FusionPolicy::SegmentMean)?];
    for &seg in order.iter().take(steps) {
        mask.set(seg, false);
        images.push(apply_mask(image, map, &mask, FusionPolicy::SegmentMean)?);
    }
    let class = usize::from(explanation.target_class.value);
    model
        .predict(&images)?
        .into_iter()
        .map(|p| {
            p.get(class)
                .ok_or_else(|| Error::contract(format!("model output has no class {class}")))
        })
        .collect()
}
