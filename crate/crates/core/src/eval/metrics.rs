use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EventLabel, Instance};
use crate::distill::Student;
use crate::error::{Error, Result};
use crate::model::FrontEnd;

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// How the OTHER label is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Four classes in training and evaluation.
    #[default]
    WithOther,
    /// Gold-OTHER windows removed everywhere; a three-class student.
    WithoutOther,
    /// Four-class student; gold-OTHER windows and the OTHER row are dropped
    /// only when scoring.
    MaskOtherInEval,
}

impl EvalMode {
    /// Classes the student is trained on.
    pub fn student_classes(self) -> Vec<EventLabel> {
        match self {
            EvalMode::WithOther | EvalMode::MaskOtherInEval => EventLabel::ALL.to_vec(),
            EvalMode::WithoutOther => EventLabel::EVENTS.to_vec(),
        }
    }

    /// Labels that appear in the report and its macro averages.
    pub fn report_labels(self) -> Vec<EventLabel> {
        match self {
            EvalMode::WithOther => EventLabel::ALL.to_vec(),
            EvalMode::WithoutOther | EvalMode::MaskOtherInEval => EventLabel::EVENTS.to_vec(),
        }
    }

    /// Instances used for training under this mode.
    pub fn training_set(self, xs: &[Instance]) -> Vec<Instance> {
        match self {
            EvalMode::WithoutOther => xs.iter().filter(|i| i.label != EventLabel::Other).cloned().collect(),
            _ => xs.to_vec(),
        }
    }

    /// Instances scored under this mode.
    pub fn evaluation_set(self, xs: &[Instance]) -> Vec<Instance> {
        match self {
            EvalMode::WithOther => xs.to_vec(),
            _ => xs.iter().filter(|i| i.label != EventLabel::Other).cloned().collect(),
        }
    }
}

/// Counts with rows = gold, columns = predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<EventLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<EventLabel>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, label: EventLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Data(format!("label {label} not in confusion matrix classes")))
    }

    pub fn record(&mut self, gold: EventLabel, predicted: EventLabel) -> Result<()> {
        let (g, p) = (self.index(gold)?, self.index(predicted)?);
        self.counts[g][p] += 1;
        Ok(())
    }

    pub fn from_pairs(classes: Vec<EventLabel>, pairs: &[(EventLabel, EventLabel)]) -> Result<Self> {
        let mut cm = Self::new(classes);
        for &(g, p) in pairs {
            cm.record(g, p)?;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\predicted");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let _ = write!(out, "{c}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: EventLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub per_label: Vec<LabelMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub instances: u64,
}

impl MetricsReport {
    pub fn label(&self, label: EventLabel) -> Option<&LabelMetrics> {
        self.per_label.iter().find(|m| m.label == label)
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Per-label and macro P/R/F1 over the mode's report labels.
pub fn metrics(cm: &ConfusionMatrix, mode: EvalMode) -> MetricsReport {
    let per_label: Vec<LabelMetrics> = mode
        .report_labels()
        .into_iter()
        .filter_map(|label| {
            let k = cm.classes.iter().position(|&c| c == label)?;
            let tp = cm.counts[k][k];
            let predicted: u64 = cm.counts.iter().map(|r| r[k]).sum();
            let support: u64 = cm.counts[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            Some(LabelMetrics {
                label,
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            })
        })
        .collect();
    let col = |f: fn(&LabelMetrics) -> f64| mean(&per_label.iter().map(f).collect::<Vec<_>>());
    MetricsReport {
        mode,
        macro_precision: col(|m| m.precision),
        macro_recall: col(|m| m.recall),
        macro_f1: col(|m| m.f1),
        instances: cm.total(),
        per_label,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    /// Writes `metrics.json` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(METRICS_FILE);
        fs::write(&mpath, serde_json::to_string_pretty(&self.report)? + "\n").map_err(|e| Error::io(&mpath, e))?;
        let cpath = dir.join(CONFUSION_FILE);
        fs::write(&cpath, self.confusion.to_csv()).map_err(|e| Error::io(&cpath, e))
    }
}

/// Eval-mode argmax predictions of `student` scored under `mode`.
pub fn evaluate_student(student: &Student, instances: &[Instance], mode: EvalMode) -> Result<Evaluation> {
    if student.classes != mode.student_classes() {
        return Err(Error::Config(format!(
            "student classes {:?} do not fit evaluation mode {mode:?}",
            student.classes
        )));
    }
    if let FrontEnd::Tokens { vocab_size } = student.encoder.config().front_end {
        if let Some(i) = instances
            .iter()
            .find(|i| i.transcript_tokens.iter().any(|&t| t >= vocab_size))
        {
            return Err(Error::Config(format!(
                "instance {} uses transcript ids beyond the student vocabulary of {vocab_size}",
                i.id
            )));
        }
    }
    let mut confusion = ConfusionMatrix::new(student.classes.clone());
    for inst in mode.evaluation_set(instances) {
        confusion.record(inst.label, student.predict(&inst)?)?;
    }
    Ok(Evaluation {
        report: metrics(&confusion, mode),
        confusion,
    })
}
