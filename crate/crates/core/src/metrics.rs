//! Confusion matrices, per-class precision/recall/F1 and report rendering.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{ClassLabel, Error, Result, NUM_CLASSES};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<ConfusionMatrix> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_labels(truths: &[usize], predictions: &[usize], classes: usize) -> Result<ConfusionMatrix> {
        if truths.len() != predictions.len() {
            return Err(Error::LengthMismatch {
                truths: truths.len(),
                predictions: predictions.len(),
            });
        }
        let mut cm = ConfusionMatrix::zeros(classes);
        for (&t, &p) in truths.iter().zip(predictions) {
            for index in [t, p] {
                if index >= classes {
                    return Err(Error::IndexOutOfRange { index, classes });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|r| r[predicted]).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }
}

/// Eight-class confusion matrix over canonical class indices.
pub fn confusion_matrix(truths: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_labels(truths, predictions, NUM_CLASSES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64, what: &str, class: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} of class {class} is undefined (no samples); reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Per-class metrics; `names[i]` labels row/column `i`.
pub fn per_class_metrics(cm: &ConfusionMatrix, names: &[&str]) -> Result<Vec<ClassMetrics>> {
    if names.len() != cm.classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} class names for a {}-class matrix",
            names.len(),
            cm.classes()
        )));
    }
    Ok(names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c), "precision", name);
            let recall = ratio(tp, cm.row_sum(c), "recall", name);
            ClassMetrics {
                name: name.to_string(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub overall_accuracy: f64,
    pub classes: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvaluationReport {
    pub fn from_confusion(model: &str, cm: &ConfusionMatrix, names: &[&str]) -> Result<EvaluationReport> {
        Ok(EvaluationReport {
            model: model.to_string(),
            overall_accuracy: cm.accuracy(),
            classes: per_class_metrics(cm, names)?,
            confusion: cm.counts().to_vec(),
        })
    }

    /// Report over the first `classes` canonical class names.
    pub fn from_predictions(model: &str, truths: &[usize], predictions: &[usize], classes: usize) -> Result<EvaluationReport> {
        let cm = ConfusionMatrix::from_labels(truths, predictions, classes)?;
        let names: Vec<&str> = ClassLabel::ALL[..classes.min(NUM_CLASSES)].iter().map(|c| c.name()).collect();
        EvaluationReport::from_confusion(model, &cm, &names)
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_counts(self.confusion.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Markdown,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(ReportFormat::Text),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }
}

/// Half-up rounding to `decimals` places. A small epsilon absorbs binary
/// representation error so that e.g. 0.125 rounds to 0.13.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (x * scale + 0.5 + 1e-9).floor() / scale
}

/// Two decimals, half-up.
pub fn fmt2(x: f64) -> String {
    format!("{:.2}", round_half_up(x, 2))
}

/// Fraction as a percentage with two decimals, e.g. `0.9525` → `95.25%`.
pub fn fmt_percent(fraction: f64) -> String {
    format!("{:.2}%", round_half_up(fraction * 100.0, 2))
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Json => return Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Text => {
            let _ = writeln!(out, "Classification report: {}", report.model);
            let _ = writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1-score", "support");
            for c in &report.classes {
                let _ = writeln!(
                    out,
                    "{:<10} {:>9} {:>9} {:>9} {:>9}",
                    c.name,
                    fmt2(c.precision),
                    fmt2(c.recall),
                    fmt2(c.f1),
                    c.support
                );
            }
            let _ = writeln!(out, "\noverall accuracy: {}", fmt_percent(report.overall_accuracy));
            let _ = writeln!(out, "\nconfusion matrix (rows = true, columns = predicted):");
            let width = report.classes.iter().map(|c| c.name.len()).max().unwrap_or(4).max(6);
            let _ = write!(out, "{:<width$}", "");
            for c in &report.classes {
                let _ = write!(out, " {:>width$}", c.name);
            }
            out.push('\n');
            for (c, row) in report.classes.iter().zip(&report.confusion) {
                let _ = write!(out, "{:<width$}", c.name);
                for v in row {
                    let _ = write!(out, " {v:>width$}");
                }
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| Model | Class | Precision | Recall | F1-Score | Support |");
            let _ = writeln!(out, "|---|---|---|---|---|---|");
            for (i, c) in report.classes.iter().enumerate() {
                let model = if i == 0 { report.model.as_str() } else { "" };
                let _ = writeln!(
                    out,
                    "| {model} | {} | {} | {} | {} | {} |",
                    c.name,
                    fmt2(c.precision),
                    fmt2(c.recall),
                    fmt2(c.f1),
                    c.support
                );
            }
            let _ = writeln!(out, "\n**Overall accuracy:** {}", fmt_percent(report.overall_accuracy));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub reference: String,
    pub model: String,
    pub accuracy_percent: f64,
}

/// Published accuracies of earlier OCT classifiers. Display only.
pub fn prior_work() -> Vec<ComparisonRow> {
    serde_json::from_str(include_str!("../data/prior_work.json")).expect("bundled prior-work table is valid JSON")
}

/// Rows for `reports` (reference "This work") followed by the prior-work
/// rows if requested, sorted by accuracy, highest first.
pub fn comparison_rows(reports: &[EvaluationReport], include_prior: bool) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            reference: "This work".into(),
            model: r.model.clone(),
            accuracy_percent: round_half_up(r.overall_accuracy * 100.0, 2),
        })
        .collect();
    if include_prior {
        rows.extend(prior_work());
    }
    rows.sort_by(|a, b| b.accuracy_percent.total_cmp(&a.accuracy_percent));
    rows
}

pub fn render_comparison(reports: &[EvaluationReport], include_prior: bool, format: ReportFormat) -> Result<String> {
    let rows = comparison_rows(reports, include_prior);
    let mut out = String::new();
    match format {
        ReportFormat::Json => return Ok(serde_json::to_string_pretty(&rows)?),
        ReportFormat::Text => {
            let _ = writeln!(out, "{:<18} {:<18} {:>9}", "reference", "model", "accuracy");
            for r in &rows {
                let _ = writeln!(out, "{:<18} {:<18} {:>8.2}%", r.reference, r.model, r.accuracy_percent);
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| Reference | Model | Accuracy |");
            let _ = writeln!(out, "|---|---|---|");
            for r in &rows {
                let _ = writeln!(out, "| {} | {} | {:.2}% |", r.reference, r.model, r.accuracy_percent);
            }
        }
    }
    Ok(out)
}
