//! Hidden, distillation, and task losses on the tape.

use super::layer_map::LayerMap;
use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tape, Tensor, Var};

fn one_hot_var(tape: &mut Tape, class: usize, n: usize) -> Result<Var> {
    if class >= n {
        return Err(Error::Input(format!("class id {class} out of range for {n} classes")));
    }
    Ok(tape.constant(crate::teachers::one_hot(class, n)))
}

fn num_classes(tape: &Tape, logits: Var) -> Result<usize> {
    let v = tape.value(logits);
    if v.shape().len() != 1 || v.numel() < 2 {
        return Err(Error::Input(format!(
            "logits must be a vector of at least 2 classes, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.numel())
}

/// One teacher's hidden-alignment term:
/// `Σ_(j,i) MSE(student[i], teacher[j]·W_j)` over the map's pairs.
///
/// `student` and `teacher` hold pooled layer vectors in layer order;
/// `projections[j-1]` is `W_j` of shape `[d_teacher × d_student]`.
pub fn teacher_hidden_term(
    tape: &mut Tape,
    student: &[Var],
    teacher: &[Var],
    projections: &[Parameter],
    map: &LayerMap,
) -> Result<Var> {
    if projections.len() != map.len() {
        return Err(Error::Config(format!(
            "{} projections for {} mapped teacher layers",
            projections.len(),
            map.len()
        )));
    }
    if teacher.len() != map.teacher_layers() || student.len() != map.student_layers() {
        return Err(Error::Config(format!(
            "layer map expects {}→{} layers, got {}→{}",
            map.teacher_layers(),
            map.student_layers(),
            teacher.len(),
            student.len()
        )));
    }
    let mut terms = Vec::with_capacity(map.len());
    for (&(j, i), w) in map.pairs().iter().zip(projections) {
        let w = tape.param(w);
        let projected = tape.matmul(teacher[j - 1], w)?;
        terms.push(tape.mse(student[i - 1], projected)?);
    }
    tape.add_n(&terms)
}

/// Per-teacher terms of the correctness-weighted distillation loss:
/// `CE(softmax(t), s) / (1 + CE(onehot(y), t))`.
///
/// The teacher distribution is the soft target for the student logits. A
/// temperature other than 1 divides both sets of logits in the numerator.
pub fn distillation_term(
    tape: &mut Tape,
    teacher_logits: Var,
    student_logits: Var,
    y: usize,
    temperature: f64,
) -> Result<Var> {
    let c = num_classes(tape, student_logits)?;
    if num_classes(tape, teacher_logits)? != c {
        return Err(Error::Dimension {
            op: "distillation_term",
            lhs: tape.value(teacher_logits).shape().to_vec(),
            rhs: tape.value(student_logits).shape().to_vec(),
        });
    }
    let gold = one_hot_var(tape, y, c)?;
    let (t_num, s_num) = if temperature == 1.0 {
        (teacher_logits, student_logits)
    } else {
        (
            tape.scale(teacher_logits, 1.0 / temperature),
            tape.scale(student_logits, 1.0 / temperature),
        )
    };
    let soft = tape.softmax(t_num, 0)?;
    let numerator = tape.cross_entropy(s_num, soft)?;
    let teacher_ce = tape.cross_entropy(teacher_logits, gold)?;
    let denominator = tape.add_scalar(teacher_ce, 1.0);
    tape.div(numerator, denominator)
}

/// Sum of [`distillation_term`] over teachers.
pub fn distillation_loss(
    tape: &mut Tape,
    teacher_logits: &[Var],
    student_logits: Var,
    y: usize,
    temperature: f64,
) -> Result<Var> {
    if teacher_logits.is_empty() {
        return Err(Error::Config("distillation needs at least one teacher".into()));
    }
    let terms = teacher_logits
        .iter()
        .map(|&t| distillation_term(tape, t, student_logits, y, temperature))
        .collect::<Result<Vec<_>>>()?;
    tape.add_n(&terms)
}

/// Cross-entropy of the student logits against the one-hot gold class.
pub fn task_loss(tape: &mut Tape, student_logits: Var, y: usize) -> Result<Var> {
    let c = num_classes(tape, student_logits)?;
    let gold = one_hot_var(tape, y, c)?;
    tape.cross_entropy(student_logits, gold)
}

/// Scalar evaluation of one distillation term from plain logits.
pub fn distillation_term_value(teacher_logits: &[f64], student_logits: &[f64], y: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::vector(teacher_logits.to_vec())?);
    let s = tape.constant(Tensor::vector(student_logits.to_vec())?);
    let v = distillation_term(&mut tape, t, s, y, 1.0)?;
    Ok(tape.scalar(v))
}
