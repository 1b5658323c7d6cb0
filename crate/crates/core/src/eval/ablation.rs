use std::fmt::Write as _;

use super::metrics::{evaluate_student, EvalMode, MetricsReport};
use crate::data::Instance;
use crate::distill::{build_student, distill, DistillSettings, Distiller};
use crate::error::{Error, Result};
use crate::teachers::{Modality, TeacherBundle};
use crate::train::TrainConfig;

pub const ABLATION_FILE: &str = "ablation.csv";

/// The four teacher combinations compared in the standard ablation table.
pub fn table3_subsets() -> Vec<Vec<Modality>> {
    use Modality::*;
    vec![
        vec![Audio, Transcript],
        vec![Chat, Transcript],
        vec![Audio, Chat],
        vec![Audio, Chat, Transcript],
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub subset: Vec<Modality>,
    pub report: MetricsReport,
}

fn arm_name(subset: &[Modality]) -> String {
    subset.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

/// Distils and evaluates one student per teacher subset, all from the same
/// seed and student initialisation.
pub fn run_ablation(
    subsets: &[Vec<Modality>],
    teachers: &[TeacherBundle],
    train: &[Instance],
    test: &[Instance],
    settings: &DistillSettings,
    mode: EvalMode,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let train = mode.training_set(train);
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let name = arm_name(subset);
        let arm = || -> Result<AblationRow> {
            if subset.is_empty() {
                return Err(Error::Config("empty teacher subset".into()));
            }
            let chosen = subset
                .iter()
                .map(|m| {
                    teachers
                        .iter()
                        .find(|t| t.modality() == *m)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("no {m} teacher available")))
                })
                .collect::<Result<Vec<_>>>()?;
            let student = build_student(settings, teachers, mode.student_classes(), config.seed)?;
            let distiller = Distiller::new(student, chosen, settings.pooling, settings.temperature, config.seed)?;
            let outcome = distill(distiller, &train, None, config)?;
            let eval = evaluate_student(&outcome.last.student, test, mode)?;
            let mut subset = subset.clone();
            subset.sort();
            Ok(AblationRow {
                subset,
                report: eval.report,
            })
        };
        log::info!("ablation arm {name}");
        rows.push(arm().map_err(|e| e.context(format!("ablation arm {name}")))?);
    }
    Ok(rows)
}

/// Teacher flags, per-label precision, and macro precision, one row per arm.
pub fn ablation_csv(rows: &[AblationRow], mode: EvalMode) -> String {
    let labels = mode.report_labels();
    let mut out = String::from("audio,chat,transcript");
    for l in &labels {
        let _ = write!(out, ",precision_{l}");
    }
    out.push_str(",macro_precision\n");
    for r in rows {
        for m in Modality::ALL {
            let _ = write!(out, "{},", u8::from(r.subset.contains(&m)));
        }
        for l in &labels {
            let p = r.report.label(*l).map_or(0.0, |m| m.precision);
            let _ = write!(out, "{p},");
        }
        let _ = writeln!(out, "{}", r.report.macro_precision);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EventLabel;
    use crate::eval::{metrics, ConfusionMatrix};

    #[test]
    fn csv_shape() {
        let cm = ConfusionMatrix::from_pairs(
            EventLabel::ALL.to_vec(),
            &[
                (EventLabel::Kill, EventLabel::Kill),
                (EventLabel::Other, EventLabel::Kill),
            ],
        )
        .unwrap();
        let report = metrics(&cm, EvalMode::WithOther);
        let rows: Vec<AblationRow> = table3_subsets()
            .into_iter()
            .map(|subset| AblationRow {
                subset,
                report: report.clone(),
            })
            .collect();
        let csv = ablation_csv(&rows, EvalMode::WithOther);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "audio,chat,transcript,precision_KILL,precision_DRAGON,precision_TOWER,precision_OTHER,macro_precision"
        );
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,0,1,0.5,0,0,0,"));
        assert!(lines[4].starts_with("1,1,1,"));
    }
}
