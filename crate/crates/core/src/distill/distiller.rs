use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layer_map::{build_layer_map, LayerMap};
use super::loss::{distillation_term, task_loss, teacher_hidden_term};
use super::student::Student;
use crate::data::{EventLabel, Instance};
use crate::error::{Error, Result};
use crate::eval::{evaluate_student, EvalMode};
use crate::model::{pool, Checkpoint, Mode, Pooling};
use crate::numerics::{Parameter, Tape, Tensor, Var};
use crate::teachers::{argmax, inverse_frequency_weights, Modality, TeacherBundle};
use crate::train::{restore, run_training, BatchLoss, History, Objective, TrainConfig};

pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const STUDENT_BEST_CHECKPOINT: &str = "student_best.ckpt";
pub const PROJECTIONS_CHECKPOINT: &str = "projections.ckpt";
pub const HEADS_CHECKPOINT: &str = "heads.ckpt";
pub const LOSS_HISTORY: &str = "loss_history.csv";

/// Trainable `W_j` matrices for one teacher, one per mapped teacher layer.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub modality: Modality,
    pub map: LayerMap,
    pub weights: Vec<Parameter>,
}

#[derive(Debug, Clone, Default)]
pub struct ProjectionBank {
    pub sets: Vec<ProjectionSet>,
}

/// Trainable replacement of a teacher's output layer, `[d_teacher × C]`.
#[derive(Debug, Clone)]
pub struct ReplacedHead {
    pub modality: Modality,
    pub projection: Parameter,
}

/// Eval-mode pooled teacher representations of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    /// One pooled `[d_teacher]` vector per teacher layer.
    pub layers: Vec<Tensor>,
    /// Pooled final layer under the teacher's own pooling, fed to its head.
    pub head_input: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TeacherTerms {
    pub modality: Modality,
    pub hid: f64,
    pub dis: f64,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_hid: f64,
    pub l_dis: f64,
    pub l_task: f64,
    pub l_total: f64,
    pub per_teacher: Vec<TeacherTerms>,
}

/// Tape handles behind a [`LossBreakdown`].
#[derive(Debug, Clone)]
pub struct LossVars {
    pub l_hid: Var,
    pub l_dis: Var,
    pub l_task: Var,
    pub l_total: Var,
    pub per_teacher: Vec<(Modality, Var, Var)>,
    /// Student logits per batch instance.
    pub student_logits: Vec<Var>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_hid: tape.scalar(self.l_hid),
            l_dis: tape.scalar(self.l_dis),
            l_task: tape.scalar(self.l_task),
            l_total: tape.scalar(self.l_total),
            per_teacher: self
                .per_teacher
                .iter()
                .map(|&(modality, h, d)| TeacherTerms {
                    modality,
                    hid: tape.scalar(h),
                    dis: tape.scalar(d),
                })
                .collect(),
        }
    }
}

/// Student, frozen teachers, and the trainable bridges between them.
#[derive(Debug, Clone)]
pub struct Distiller {
    pub student: Student,
    pub teachers: Vec<TeacherBundle>,
    pub bank: ProjectionBank,
    pub heads: Vec<ReplacedHead>,
    pub pooling: Pooling,
    pub temperature: f64,
}

impl Distiller {
    /// Freezes every teacher encoder and creates projections and replaced
    /// heads. Teachers are kept in audio, chat, transcript order.
    pub fn new(
        student: Student,
        mut teachers: Vec<TeacherBundle>,
        pooling: Pooling,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::Config("distillation needs at least one teacher".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        teachers.sort_by_key(|t| t.modality());
        if teachers.windows(2).any(|w| w[0].modality() == w[1].modality()) {
            return Err(Error::Config("each modality may contribute one teacher".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = student.encoder.num_layers();
        let d_s = student.encoder.hidden_dim();
        let c = student.num_classes();
        let mut bank = ProjectionBank::default();
        let mut heads = Vec::new();
        for t in &mut teachers {
            t.freeze_encoder();
            let modality = t.modality();
            let map = build_layer_map(t.encoder.num_layers(), m)?;
            let d_t = t.encoder.hidden_dim();
            let bound = 1.0 / (d_t as f64).sqrt();
            let weights = map
                .pairs()
                .iter()
                .map(|&(j, _)| Parameter::new(format!("{modality}.{j}"), Tensor::uniform(&[d_t, d_s], bound, &mut rng)))
                .collect();
            bank.sets.push(ProjectionSet { modality, map, weights });
            heads.push(ReplacedHead {
                modality,
                projection: Parameter::new(modality.name(), Tensor::uniform(&[d_t, c], bound, &mut rng)),
            });
        }
        Ok(Self {
            student,
            teachers,
            bank,
            heads,
            pooling,
            temperature,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.teachers.iter().map(|t| t.modality()).collect()
    }

    /// Pooled eval-mode teacher layers for `inst`, one entry per teacher.
    pub fn teacher_features(&self, inst: &Instance) -> Result<Vec<TeacherFeatures>> {
        let mut tape = Tape::new();
        self.teachers
            .iter()
            .map(|t| {
                let (layers, head) = self.teacher_vars(&mut tape, t, inst)?;
                Ok(TeacherFeatures {
                    layers: layers.iter().map(|&v| tape.value(v).clone()).collect(),
                    head_input: tape.value(head).clone(),
                })
            })
            .collect()
    }

    fn teacher_vars(&self, tape: &mut Tape, t: &TeacherBundle, inst: &Instance) -> Result<(Vec<Var>, Var)> {
        let stack = t.encode(tape, inst, &mut Mode::Eval)?;
        let layers = stack
            .layers
            .iter()
            .map(|&h| pool(tape, h, self.pooling))
            .collect::<Result<Vec<_>>>()?;
        let head_input = if t.spec.pooling == self.pooling {
            *layers.last().expect("non-empty stack")
        } else {
            pool(tape, stack.last(), t.spec.pooling)?
        };
        Ok((layers, head_input))
    }

    /// Batch-mean hidden, distillation, and task losses and their sum.
    ///
    /// Teachers run in eval mode. With `cached` features their encoders never
    /// touch the tape; without, they are encoded live with frozen parameters.
    /// `class_weights` reweights the task term per gold class.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        batch: &[&Instance],
        cached: Option<&[&[TeacherFeatures]]>,
        mode: &mut Mode,
        class_weights: Option<&[f64]>,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let nt = self.teachers.len();
        let mut hid: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); nt];
        let mut dis: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); nt];
        let mut task = Vec::with_capacity(batch.len());
        let mut student_logits = Vec::with_capacity(batch.len());
        let mut weight_sum = 0.0;
        for (b, inst) in batch.iter().enumerate() {
            let y = self.student.class_index(inst.label)?;
            let (stack, logits) = self.student.forward(tape, inst, mode)?;
            let student_pooled = stack
                .layers
                .iter()
                .map(|&h| pool(tape, h, self.pooling))
                .collect::<Result<Vec<_>>>()?;
            for (ti, t) in self.teachers.iter().enumerate() {
                let (layers, head_input) = match cached {
                    Some(c) => {
                        let f = &c[b][ti];
                        let layers: Vec<Var> = f.layers.iter().map(|x| tape.constant(x.clone())).collect();
                        (layers, tape.constant(f.head_input.clone()))
                    }
                    None => self.teacher_vars(tape, t, inst)?,
                };
                let set = &self.bank.sets[ti];
                hid[ti].push(teacher_hidden_term(
                    tape,
                    &student_pooled,
                    &layers,
                    &set.weights,
                    &set.map,
                )?);
                let w = tape.param(&self.heads[ti].projection);
                let t_logits = tape.matmul(head_input, w)?;
                dis[ti].push(distillation_term(tape, t_logits, logits, y, self.temperature)?);
            }
            student_logits.push(logits);
            let ce = task_loss(tape, logits, y)?;
            match class_weights {
                Some(w) => {
                    task.push(tape.scale(ce, w[y]));
                    weight_sum += w[y];
                }
                None => {
                    task.push(ce);
                    weight_sum += 1.0;
                }
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut per_teacher = Vec::with_capacity(nt);
        for ti in 0..nt {
            let h = tape.add_n(&hid[ti])?;
            let d = tape.add_n(&dis[ti])?;
            per_teacher.push((self.teachers[ti].modality(), tape.scale(h, inv_b), tape.scale(d, inv_b)));
        }
        let hs: Vec<Var> = per_teacher.iter().map(|p| p.1).collect();
        let ds: Vec<Var> = per_teacher.iter().map(|p| p.2).collect();
        let l_hid = tape.add_n(&hs)?;
        let l_dis = tape.add_n(&ds)?;
        let task_sum = tape.add_n(&task)?;
        let l_task = tape.scale(task_sum, 1.0 / weight_sum);
        let l_total = tape.add_n(&[l_hid, l_dis, l_task])?;
        Ok(LossVars {
            l_hid,
            l_dis,
            l_task,
            l_total,
            per_teacher,
            student_logits,
        })
    }

    /// Student, projections, and replaced heads: everything distillation updates.
    pub fn trainable_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.student.params_mut();
        for set in &mut self.bank.sets {
            out.extend(set.weights.iter_mut());
        }
        out.extend(self.heads.iter_mut().map(|h| &mut h.projection));
        out
    }

    pub fn trainable(&self) -> Vec<&Parameter> {
        let mut out = self.student.params();
        for set in &self.bank.sets {
            out.extend(set.weights.iter());
        }
        out.extend(self.heads.iter().map(|h| &h.projection));
        out
    }

    /// Writes the student, projection, and head checkpoints into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.student.save(&dir.join(STUDENT_CHECKPOINT))?;
        let maps: serde_json::Map<String, serde_json::Value> = self
            .bank
            .sets
            .iter()
            .map(|s| Ok((s.modality.name().to_string(), serde_json::to_value(s.map.pairs())?)))
            .collect::<Result<_>>()?;
        let mut proj = Checkpoint::new(serde_json::json!({ "layer_maps": maps }));
        for s in &self.bank.sets {
            proj.insert_params("", s.weights.iter());
        }
        proj.save(dir.join(PROJECTIONS_CHECKPOINT))?;
        let classes: Vec<&str> = self.student.classes.iter().map(|c| c.name()).collect();
        let mut heads = Checkpoint::new(serde_json::json!({ "classes": classes }));
        heads.insert_params("", self.heads.iter().map(|h| &h.projection));
        heads.save(dir.join(HEADS_CHECKPOINT))
    }
}

fn validation_macro_f1(student: &Student, validation: Option<&[Instance]>) -> Result<Option<f64>> {
    let Some(v) = validation else { return Ok(None) };
    let mode = if student.classes.contains(&EventLabel::Other) {
        EvalMode::WithOther
    } else {
        EvalMode::WithoutOther
    };
    Ok(Some(evaluate_student(student, v, mode)?.report.macro_f1))
}

fn task_weights(student: &Student, data: &[Instance], enabled: bool) -> Result<Option<Vec<f64>>> {
    if !enabled {
        return Ok(None);
    }
    let labels = data
        .iter()
        .map(|i| student.class_index(i.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(inverse_frequency_weights(&labels, student.num_classes())))
}

fn correct_in_batch(tape: &Tape, logits: &[(Var, usize)]) -> usize {
    logits
        .iter()
        .filter(|(l, y)| argmax(tape.value(*l).data()) == *y)
        .count()
}

struct DistillObjective<'a> {
    distiller: Distiller,
    data: &'a [Instance],
    features: Vec<Vec<TeacherFeatures>>,
    class_weights: Option<Vec<f64>>,
    validation: Option<&'a [Instance]>,
}

impl Objective for DistillObjective<'_> {
    fn loss_columns(&self) -> Vec<String> {
        ["l_hid", "l_dis", "l_task", "l_total"].map(String::from).to_vec()
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn example_id(&self, index: usize) -> String {
        self.data[index].id.clone()
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[usize], mode: &mut Mode) -> Result<BatchLoss> {
        let insts: Vec<&Instance> = batch.iter().map(|&i| &self.data[i]).collect();
        let feats: Vec<&[TeacherFeatures]> = batch.iter().map(|&i| self.features[i].as_slice()).collect();
        let vars = self
            .distiller
            .total_loss(tape, &insts, Some(&feats), mode, self.class_weights.as_deref())?;
        let b = vars.breakdown(tape);
        let seen = vars
            .student_logits
            .iter()
            .zip(&insts)
            .map(|(&l, i)| Ok((l, self.distiller.student.class_index(i.label)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchLoss {
            loss: vars.l_total,
            components: vec![b.l_hid, b.l_dis, b.l_task, b.l_total],
            correct: correct_in_batch(tape, &seen),
            counted: seen.len(),
        })
    }

    fn trainable(&mut self) -> Vec<&mut Parameter> {
        self.distiller.trainable_mut()
    }

    fn validation_score(&self) -> Result<Option<f64>> {
        validation_macro_f1(&self.distiller.student, self.validation)
    }
}

struct BaselineObjective<'a> {
    student: Student,
    data: &'a [Instance],
    class_weights: Option<Vec<f64>>,
    validation: Option<&'a [Instance]>,
}

impl Objective for BaselineObjective<'_> {
    fn loss_columns(&self) -> Vec<String> {
        vec!["l_task".into()]
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn example_id(&self, index: usize) -> String {
        self.data[index].id.clone()
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[usize], mode: &mut Mode) -> Result<BatchLoss> {
        let mut terms = Vec::with_capacity(batch.len());
        let mut seen = Vec::with_capacity(batch.len());
        let mut weight_sum = 0.0;
        for &i in batch {
            let inst = &self.data[i];
            let y = self.student.class_index(inst.label)?;
            let (_, logits) = self.student.forward(tape, inst, mode)?;
            seen.push((logits, y));
            let ce = task_loss(tape, logits, y)?;
            let w = self.class_weights.as_ref().map_or(1.0, |w| w[y]);
            terms.push(if w == 1.0 { ce } else { tape.scale(ce, w) });
            weight_sum += w;
        }
        let sum = tape.add_n(&terms)?;
        let loss = tape.scale(sum, 1.0 / weight_sum);
        Ok(BatchLoss {
            components: vec![tape.scalar(loss)],
            correct: correct_in_batch(tape, &seen),
            counted: seen.len(),
            loss,
        })
    }

    fn trainable(&mut self) -> Vec<&mut Parameter> {
        self.student.params_mut()
    }

    fn validation_score(&self) -> Result<Option<f64>> {
        validation_macro_f1(&self.student, self.validation)
    }
}

/// Result of a distillation run: the final state and, when a validation set
/// was given, the state at the best validation macro-F1.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub last: Distiller,
    pub best: Option<(usize, Distiller)>,
    pub history: History,
}

/// Optimises the total loss over `data` with cached teacher features.
pub fn distill(
    distiller: Distiller,
    data: &[Instance],
    validation: Option<&[Instance]>,
    config: &TrainConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    let mut distiller = distiller;
    distiller.student.encoder.set_dropout(config.dropout)?;
    let features = data
        .iter()
        .map(|i| distiller.teacher_features(i))
        .collect::<Result<Vec<_>>>()?;
    let class_weights = task_weights(&distiller.student, data, config.class_weights)?;
    let mut objective = DistillObjective {
        distiller,
        data,
        features,
        class_weights,
        validation,
    };
    let outcome = run_training(&mut objective, config)?;
    let last = objective.distiller.clone();
    let best = match outcome.best {
        Some(snap) => {
            restore(&mut objective, &snap);
            Some((snap.epoch, objective.distiller))
        }
        None => None,
    };
    Ok(DistillOutcome {
        last,
        best,
        history: outcome.history,
    })
}

/// Result of a task-loss-only run.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub last: Student,
    pub best: Option<(usize, Student)>,
    pub history: History,
}

/// Trains `student` on the task loss alone: the no-distillation reference.
pub fn train_baseline(
    student: Student,
    data: &[Instance],
    validation: Option<&[Instance]>,
    config: &TrainConfig,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let mut student = student;
    student.encoder.set_dropout(config.dropout)?;
    let class_weights = task_weights(&student, data, config.class_weights)?;
    let mut objective = BaselineObjective {
        student,
        data,
        class_weights,
        validation,
    };
    let outcome = run_training(&mut objective, config)?;
    let last = objective.student.clone();
    let best = match outcome.best {
        Some(snap) => {
            restore(&mut objective, &snap);
            Some((snap.epoch, objective.student))
        }
        None => None,
    };
    Ok(BaselineOutcome {
        last,
        best,
        history: outcome.history,
    })
}
