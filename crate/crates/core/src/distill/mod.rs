//! Multi-teacher distillation: layer mapping, the three losses, and the training objective.

mod distiller;
mod layer_map;
mod loss;
pub mod micro;
mod student;

use serde::{Deserialize, Serialize};

pub use distiller::{
    distill, train_baseline, BaselineOutcome, DistillOutcome, Distiller, LossBreakdown, LossVars, ProjectionBank,
    ProjectionSet, ReplacedHead, TeacherFeatures, TeacherTerms, HEADS_CHECKPOINT, LOSS_HISTORY, PROJECTIONS_CHECKPOINT,
    STUDENT_BEST_CHECKPOINT, STUDENT_CHECKPOINT,
};
pub use layer_map::{build_layer_map, LayerMap};
pub use loss::{distillation_loss, distillation_term, distillation_term_value, task_loss, teacher_hidden_term};
pub use student::Student;

use crate::data::EventLabel;
use crate::error::{Error, Result};
use crate::model::Pooling;
use crate::teachers::{Modality, TeacherBundle};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copy the embedding and first layers of the transcript teacher.
    #[default]
    TranscriptTeacher,
    /// Fresh weights with the transcript teacher's geometry.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSettings {
    pub student_layers: usize,
    pub pooling: Pooling,
    pub temperature: f64,
    pub student_init: StudentInit,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            student_layers: 2,
            pooling: Pooling::Mean,
            temperature: 1.0,
            student_init: StudentInit::TranscriptTeacher,
        }
    }
}

/// Builds the student from the transcript teacher among `teachers`.
pub fn build_student(
    settings: &DistillSettings,
    teachers: &[TeacherBundle],
    classes: Vec<EventLabel>,
    seed: u64,
) -> Result<Student> {
    let donor = teachers
        .iter()
        .find(|t| t.modality() == Modality::Transcript)
        .ok_or_else(|| Error::Config("the student is shaped after the transcript teacher, which is missing".into()))?;
    let dropout = donor.encoder.config().dropout;
    match settings.student_init {
        StudentInit::TranscriptTeacher => Student::from_donor(
            &donor.encoder,
            settings.student_layers,
            dropout,
            classes,
            settings.pooling,
            seed,
        ),
        StudentInit::Random => {
            let config = donor.encoder.config().clone().with_layers(settings.student_layers);
            Student::random(config, classes, settings.pooling, seed)
        }
    }
}

#[cfg(test)]
mod tests;
