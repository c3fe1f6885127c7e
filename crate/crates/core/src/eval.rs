//! Confusion matrices, macro-averaged metrics and one-vs-all collapse.
//!
//! Per class `c`: sensitivity `TP/(TP+FN)`, specificity `TN/(TN+FP)` in the
//! one-vs-rest sense, precision `TP/(TP+FP)` and F1. Macro values are
//! unweighted class means. A metric whose denominator is zero counts as 0.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

pub const REPORT_CSV_HEADER: &str = "setting,cohort,acc,sen,spe,f1";

/// Footer line documenting the conventions above for written reports.
pub const REPORT_FOOTNOTE: &str =
    "# macro-averaged one-vs-rest metrics; undefined per-class values (zero denominator) count as 0";

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for v in [truth, predicted] {
            if v >= self.classes {
                return Err(Error::Label {
                    label: v,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    /// Two-class matrix with `positive` as class 1 and everything else as class 0.
    pub fn collapse(&self, positive: usize) -> Result<ConfusionMatrix> {
        if positive >= self.classes {
            return Err(Error::Label {
                label: positive,
                classes: self.classes,
            });
        }
        let mut out = ConfusionMatrix::new(2);
        for t in 0..self.classes {
            for p in 0..self.classes {
                let (bt, bp) = (usize::from(t == positive), usize::from(p == positive));
                out.counts[bt * 2 + bp] += self.get(t, p);
            }
        }
        Ok(out)
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in labels.iter().zip(predictions) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Binary metrics of one positive class against the rest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub positive: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let total = cm.total();
    let tp = cm.get(c, c);
    let fn_ = cm.row_sum(c) - tp;
    let fp = cm.col_sum(c) - tp;
    let tn = total - tp - fn_ - fp;
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        f1,
    }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = (0..cm.classes()).map(|c| class_metrics(cm, c)).collect();
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    MetricsReport {
        accuracy: ratio(cm.trace(), cm.total()),
        sensitivity: mean(|m| m.sensitivity),
        specificity: mean(|m| m.specificity),
        f1: mean(|m| m.f1),
        per_class,
    }
}

pub fn one_vs_all(cm: &ConfusionMatrix, positive: usize) -> Result<BinaryMetrics> {
    if cm.classes() < 2 {
        return Err(Error::Invalid("one-vs-all needs at least 2 classes".into()));
    }
    let binary = cm.collapse(positive)?;
    let m = class_metrics(&binary, 1);
    Ok(BinaryMetrics {
        positive,
        accuracy: ratio(binary.trace(), binary.total()),
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        precision: m.precision,
        f1: m.f1,
    })
}

pub fn one_vs_all_labels(labels: &[usize], predictions: &[usize], classes: usize, positive: usize) -> Result<BinaryMetrics> {
    one_vs_all(&confusion(labels, predictions, classes)?, positive)
}

/// One line of a `setting,cohort,acc,sen,spe,f1` report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub setting: String,
    pub cohort: String,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
}

impl ReportRow {
    pub fn from_report(setting: impl Into<String>, cohort: impl Into<String>, m: &MetricsReport) -> Self {
        ReportRow {
            setting: setting.into(),
            cohort: cohort.into(),
            acc: m.accuracy,
            sen: m.sensitivity,
            spe: m.specificity,
            f1: m.f1,
        }
    }

    pub fn from_binary(setting: impl Into<String>, cohort: impl Into<String>, m: &BinaryMetrics) -> Self {
        ReportRow {
            setting: setting.into(),
            cohort: cohort.into(),
            acc: m.accuracy,
            sen: m.sensitivity,
            spe: m.specificity,
            f1: m.f1,
        }
    }

    /// Four-decimal fixed formatting; non-finite values print as `nan`.
    pub fn to_csv_line(&self) -> String {
        let f = |v: f64| if v.is_finite() { format!("{v:.4}") } else { "nan".to_string() };
        format!(
            "{},{},{},{},{},{}",
            self.setting,
            self.cohort,
            f(self.acc),
            f(self.sen),
            f(self.spe),
            f(self.f1)
        )
    }
}

pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv_line())?;
    }
    writeln!(w, "{REPORT_FOOTNOTE}")?;
    Ok(())
}
