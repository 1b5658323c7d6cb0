//! Modality experts: an encoder plus a task head fine-tuned with cross-entropy.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, EventLabel, Instance, PAD};
use crate::error::{Error, Result};
use crate::model::{pool, Checkpoint, EncoderConfig, EncoderInput, EncoderModel, HiddenStack, Mode, Pooling};
use crate::numerics::{Parameter, Tape, Tensor, Var};
use crate::train::{run_training, BatchLoss, History, Objective, TrainConfig};

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TASK_FILE: &str = "task.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Chat,
    Transcript,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Chat, Modality::Transcript];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Chat => "chat",
            Modality::Transcript => "transcript",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// The fine-tuning task each modality's teacher is trained on.
    pub fn task(self) -> TeacherTask {
        match self {
            Modality::Audio => TeacherTask::ActionDetection,
            Modality::Chat => TeacherTask::EmotionTagging,
            Modality::Transcript => TeacherTask::EntityTagging,
        }
    }

    pub fn input(self, inst: &Instance) -> Result<EncoderInput<'_>> {
        let input = match self {
            Modality::Audio => EncoderInput::Frames(&inst.audio),
            Modality::Chat => EncoderInput::Tokens(&inst.chat_tokens),
            Modality::Transcript => EncoderInput::Tokens(&inst.transcript_tokens),
        };
        let empty = match input {
            EncoderInput::Frames(f) => f.is_empty(),
            EncoderInput::Tokens(t) => t.is_empty(),
        };
        if empty {
            return Err(Error::Input(format!(
                "instance {} has no {} input",
                inst.id,
                self.name()
            )));
        }
        Ok(input)
    }

    /// Gold tags for token-level tasks.
    pub fn tags(self, inst: &Instance) -> Option<(&[usize], &[usize])> {
        match self {
            Modality::Audio => None,
            Modality::Chat => Some((&inst.chat_tokens, &inst.chat_tags)),
            Modality::Transcript => Some((&inst.transcript_tokens, &inst.transcript_tags)),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherTask {
    ActionDetection,
    EmotionTagging,
    EntityTagging,
}

impl TeacherTask {
    pub fn head_kind(self) -> HeadKind {
        match self {
            TeacherTask::ActionDetection => HeadKind::SequenceClassification,
            TeacherTask::EmotionTagging | TeacherTask::EntityTagging => HeadKind::TokenTagging,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SequenceClassification,
    TokenTagging,
}

/// Bias-free linear output layer `[hidden_dim × num_classes]`.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub projection: Parameter,
}

impl TaskHead {
    pub fn new(kind: HeadKind, hidden_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "a task head needs at least 2 classes, got {num_classes}"
            )));
        }
        let bound = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
        Ok(Self {
            kind,
            projection: Parameter::new(
                "head.projection",
                Tensor::uniform(&[hidden_dim, num_classes], bound, rng),
            ),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.projection.value.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub modality: Modality,
    pub task: TeacherTask,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pooling: Pooling,
}

impl TeacherSpec {
    pub fn new(modality: Modality, encoder: EncoderConfig) -> Self {
        Self {
            modality,
            task: modality.task(),
            encoder,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task != self.modality.task() {
            return Err(Error::Config(format!(
                "the {} teacher must be trained for {:?}, not {:?}",
                self.modality,
                self.modality.task(),
                self.task
            )));
        }
        let audio_front = self.encoder.front_end.patch_dim().is_some();
        if audio_front != (self.modality == Modality::Audio) {
            return Err(Error::Config(format!(
                "{} teacher has the wrong encoder front-end",
                self.modality
            )));
        }
        self.encoder.validate()
    }
}

/// Class names for a modality's task: event labels or the corpus tag list.
pub fn teacher_classes(modality: Modality, corpus: &Corpus) -> Vec<String> {
    match modality {
        Modality::Audio => EventLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        Modality::Chat => corpus.chat_tags.clone(),
        Modality::Transcript => corpus.transcript_tags.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    spec: TeacherSpec,
    classes: Vec<String>,
}

/// A fine-tuned teacher.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub spec: TeacherSpec,
    pub encoder: EncoderModel,
    pub head: TaskHead,
    pub classes: Vec<String>,
}

impl TeacherBundle {
    pub fn new(spec: TeacherSpec, classes: Vec<String>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderModel::new(spec.encoder.clone(), &mut rng)?;
        let head = TaskHead::new(spec.task.head_kind(), spec.encoder.hidden_dim, classes.len(), &mut rng)?;
        Ok(Self {
            spec,
            encoder,
            head,
            classes,
        })
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality
    }

    /// Encodes the teacher's modality of `inst`.
    pub fn encode(&self, tape: &mut Tape, inst: &Instance, mode: &mut Mode) -> Result<HiddenStack> {
        self.encoder.encode(tape, self.spec.modality.input(inst)?, mode)
    }

    /// Task-head logits: `[C]` for sequence classification, `[seq × T]` for tagging.
    pub fn teacher_forward(&self, tape: &mut Tape, inst: &Instance, mode: &mut Mode) -> Result<Var> {
        let stack = self.encode(tape, inst, mode)?;
        self.head_logits(tape, &stack)
    }

    fn head_logits(&self, tape: &mut Tape, stack: &HiddenStack) -> Result<Var> {
        let w = tape.param(&self.head.projection);
        match self.head.kind {
            HeadKind::SequenceClassification => {
                let pooled = pool(tape, stack.last(), self.spec.pooling)?;
                tape.matmul(pooled, w)
            }
            HeadKind::TokenTagging => tape.matmul(stack.last(), w),
        }
    }

    /// Eval-mode logits as a tensor.
    pub fn logits(&self, inst: &Instance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.teacher_forward(&mut tape, inst, &mut Mode::Eval)?;
        Ok(tape.value(v).clone())
    }

    /// Freezes the encoder; the head stays trainable.
    pub fn freeze_encoder(&mut self) {
        self.encoder.freeze();
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.push(&mut self.head.projection);
        out
    }

    /// Writes `teacher.ckpt` and `task.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut ck = Checkpoint::new(serde_json::to_value(&self.spec)?);
        self.encoder.write_checkpoint(&mut ck, "encoder.");
        ck.insert_params("", [&self.head.projection]);
        ck.save(dir.join(TEACHER_CHECKPOINT))?;
        let task = TaskFile {
            spec: self.spec.clone(),
            classes: self.classes.clone(),
        };
        let path = dir.join(TASK_FILE);
        fs::write(&path, serde_json::to_string_pretty(&task)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TASK_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let task: TaskFile = serde_json::from_str(&text)?;
        task.spec.validate()?;
        let mut ck = Checkpoint::load(dir.join(TEACHER_CHECKPOINT))?;
        let encoder = EncoderModel::from_checkpoint(task.spec.encoder.clone(), &mut ck, "encoder.")?;
        let shape = [task.spec.encoder.hidden_dim, task.classes.len()];
        let projection = Parameter::new("head.projection", ck.take_shaped("head.projection", &shape)?);
        Ok(Self {
            head: TaskHead {
                kind: task.spec.task.head_kind(),
                projection,
            },
            spec: task.spec,
            encoder,
            classes: task.classes,
        })
    }
}

/// Inverse-frequency weights normalised to mean 1 over present classes.
pub fn inverse_frequency_weights(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                labels.len() as f64 / (present as f64 * c as f64)
            }
        })
        .collect()
}

pub(crate) fn one_hot(class: usize, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[class] = 1.0;
    t
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct FinetuneObjective<'a> {
    bundle: TeacherBundle,
    data: &'a [Instance],
    class_weights: Option<Vec<f64>>,
}

impl FinetuneObjective<'_> {
    fn label(&self, inst: &Instance) -> usize {
        EventLabel::ALL
            .iter()
            .position(|&l| l == inst.label)
            .expect("4-class label")
    }
}

impl Objective for FinetuneObjective<'_> {
    fn loss_columns(&self) -> Vec<String> {
        vec!["loss".into()]
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn example_id(&self, index: usize) -> String {
        self.data[index].id.clone()
    }

    fn batch_loss(&self, tape: &mut Tape, batch: &[usize], mode: &mut Mode) -> Result<BatchLoss> {
        let b = &self.bundle;
        let c = b.head.num_classes();
        let mut terms = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        let (mut correct, mut counted) = (0, 0);
        for &i in batch {
            let inst = &self.data[i];
            let stack = b.encode(tape, inst, mode)?;
            match b.head.kind {
                HeadKind::SequenceClassification => {
                    let y = self.label(inst);
                    let logits = b.head_logits(tape, &stack)?;
                    correct += usize::from(argmax(tape.value(logits).data()) == y);
                    counted += 1;
                    let target = tape.constant(one_hot(y, c));
                    terms.push(tape.cross_entropy(logits, target)?);
                    weights.push(self.class_weights.as_ref().map_or(1.0, |w| w[y]));
                }
                HeadKind::TokenTagging => {
                    let (tokens, tags) = b.modality().tags(inst).expect("tagging modality");
                    let keep: Vec<usize> = (0..tokens.len()).filter(|&p| tokens[p] != PAD).collect();
                    if keep.is_empty() {
                        continue;
                    }
                    let rows = tape.embedding(stack.last(), &keep)?;
                    let w = tape.param(&b.head.projection);
                    let logits = tape.matmul(rows, w)?;
                    let mut target = Tensor::zeros(&[keep.len(), c]);
                    for (r, &p) in keep.iter().enumerate() {
                        target.data_mut()[r * c + tags[p]] = 1.0;
                    }
                    let lv = tape.value(logits);
                    for (r, &p) in keep.iter().enumerate() {
                        correct += usize::from(argmax(lv.row(r)) == tags[p]);
                    }
                    counted += keep.len();
                    let target = tape.constant(target);
                    terms.push(tape.cross_entropy(logits, target)?);
                    weights.push(1.0);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        let loss = if terms.is_empty() || total == 0.0 {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let weighted: Vec<Var> = terms
                .iter()
                .zip(&weights)
                .map(|(&t, &w)| if w == 1.0 { t } else { tape.scale(t, w) })
                .collect();
            let sum = tape.add_n(&weighted)?;
            tape.scale(sum, 1.0 / total)
        };
        Ok(BatchLoss {
            components: vec![tape.scalar(loss)],
            loss,
            correct,
            counted,
        })
    }

    fn trainable(&mut self) -> Vec<&mut Parameter> {
        self.bundle.params_mut()
    }
}

fn check_task_data(spec: &TeacherSpec, data: &[Instance], num_classes: usize) -> Result<()> {
    if let Some(inst) = data.iter().find(|i| spec.modality.input(i).is_err()) {
        return Err(Error::Data(format!(
            "instance {} lacks {} input",
            inst.id, spec.modality
        )));
    }
    if spec.task.head_kind() == HeadKind::TokenTagging {
        for inst in data {
            let (tokens, tags) = spec.modality.tags(inst).expect("tagging modality");
            if tags.len() != tokens.len() {
                return Err(Error::Data(format!(
                    "instance {} is missing {} tags",
                    inst.id, spec.modality
                )));
            }
            if let Some(&t) = tags.iter().find(|&&t| t >= num_classes) {
                return Err(Error::Data(format!(
                    "instance {}: tag {t} outside the {num_classes}-tag inventory",
                    inst.id
                )));
            }
        }
    }
    Ok(())
}

/// Fine-tunes a fresh teacher on `data` and returns it with its history.
///
/// `classes` names the head outputs: the four event labels for the audio
/// teacher, the modality's tag list for the taggers. PAD positions do not
/// contribute to tagging loss or accuracy.
pub fn finetune_teacher(
    spec: &TeacherSpec,
    data: &[Instance],
    classes: Vec<String>,
    config: &TrainConfig,
) -> Result<(TeacherBundle, History)> {
    config.validate()?;
    let mut spec = spec.clone();
    spec.encoder.dropout = config.dropout;
    if spec.task.head_kind() == HeadKind::SequenceClassification && classes.len() != EventLabel::ALL.len() {
        return Err(Error::Config("action detection uses the four event labels".into()));
    }
    check_task_data(&spec, data, classes.len())?;
    let bundle = TeacherBundle::new(spec, classes, config.seed)?;
    let class_weights = (config.class_weights && bundle.head.kind == HeadKind::SequenceClassification).then(|| {
        let labels: Vec<usize> = data
            .iter()
            .map(|i| EventLabel::ALL.iter().position(|&l| l == i.label).expect("label"))
            .collect();
        inverse_frequency_weights(&labels, EventLabel::ALL.len())
    });
    let mut objective = FinetuneObjective {
        bundle,
        data,
        class_weights,
    };
    let outcome = run_training(&mut objective, config)?;
    Ok((objective.bundle, outcome.history))
}

/// Eval-mode accuracy of a teacher on `data`: sequence accuracy for action
/// detection, non-PAD token accuracy for taggers.
pub fn teacher_accuracy(teacher: &TeacherBundle, data: &[Instance]) -> Result<f64> {
    let (mut correct, mut counted) = (0usize, 0usize);
    for inst in data {
        let logits = teacher.logits(inst)?;
        match teacher.head.kind {
            HeadKind::SequenceClassification => {
                let y = EventLabel::ALL.iter().position(|&l| l == inst.label).expect("label");
                correct += usize::from(argmax(logits.data()) == y);
                counted += 1;
            }
            HeadKind::TokenTagging => {
                let (tokens, tags) = teacher.modality().tags(inst).expect("tagging modality");
                for p in (0..tokens.len()).filter(|&p| tokens[p] != PAD) {
                    correct += usize::from(argmax(logits.row(p)) == tags[p]);
                    counted += 1;
                }
            }
        }
    }
    Ok(if counted == 0 {
        0.0
    } else {
        correct as f64 / counted as f64
    })
}
