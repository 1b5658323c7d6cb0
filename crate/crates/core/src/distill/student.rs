use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EventLabel, Instance};
use crate::error::{Error, Result};
use crate::model::{pool, Checkpoint, EncoderConfig, EncoderInput, EncoderModel, HiddenStack, Mode, Pooling};
use crate::numerics::{Parameter, Tape, Tensor, Var};
use crate::teachers::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudentMeta {
    encoder: EncoderConfig,
    classes: Vec<EventLabel>,
    pooling: Pooling,
}

/// Transcript encoder with a bias-free event classifier on its pooled final layer.
#[derive(Debug, Clone)]
pub struct Student {
    pub encoder: EncoderModel,
    pub head: Parameter,
    pub classes: Vec<EventLabel>,
    pub pooling: Pooling,
}

impl Student {
    pub fn new(encoder: EncoderModel, classes: Vec<EventLabel>, pooling: Pooling, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("the student needs at least 2 classes".into()));
        }
        if encoder.config().front_end.patch_dim().is_some() {
            return Err(Error::Config("the student consumes transcript tokens".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = encoder.hidden_dim();
        let bound = (6.0 / (d + classes.len()) as f64).sqrt();
        let head = Parameter::new("head.projection", Tensor::uniform(&[d, classes.len()], bound, &mut rng));
        Ok(Self {
            encoder,
            head,
            classes,
            pooling,
        })
    }

    /// Randomly initialised student.
    pub fn random(config: EncoderConfig, classes: Vec<EventLabel>, pooling: Pooling, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderModel::new(config, &mut rng)?;
        Self::new(encoder, classes, pooling, seed.wrapping_add(1))
    }

    /// Student whose embedding and first `m` layers copy `donor`.
    pub fn from_donor(
        donor: &EncoderModel,
        m: usize,
        dropout: f64,
        classes: Vec<EventLabel>,
        pooling: Pooling,
        seed: u64,
    ) -> Result<Self> {
        let mut config = donor.config().clone().with_layers(m);
        config.dropout = dropout;
        Self::new(donor.init_student_from(&config)?, classes, pooling, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: EventLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Data(format!("label {label} is not a student class")))
    }

    pub fn forward(&self, tape: &mut Tape, inst: &Instance, mode: &mut Mode) -> Result<(HiddenStack, Var)> {
        let stack = self
            .encoder
            .encode(tape, EncoderInput::Tokens(&inst.transcript_tokens), mode)?;
        let pooled = pool(tape, stack.last(), self.pooling)?;
        let w = tape.param(&self.head);
        let logits = tape.matmul(pooled, w)?;
        Ok((stack, logits))
    }

    pub fn logits(&self, inst: &Instance) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, l) = self.forward(&mut tape, inst, &mut Mode::Eval)?;
        Ok(tape.value(l).clone())
    }

    /// Eval-mode argmax class.
    pub fn predict(&self, inst: &Instance) -> Result<EventLabel> {
        Ok(self.classes[argmax(self.logits(inst)?.data())])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.push(&mut self.head);
        out
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.encoder.params();
        out.push(&self.head);
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StudentMeta {
            encoder: self.encoder.config().clone(),
            classes: self.classes.clone(),
            pooling: self.pooling,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        self.encoder.write_checkpoint(&mut ck, "encoder.");
        ck.insert_params("", [&self.head]);
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck = Checkpoint::load(path)?;
        let meta: StudentMeta = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Data(format!("{}: student metadata: {e}", path.display())))?;
        let encoder = EncoderModel::from_checkpoint(meta.encoder, &mut ck, "encoder.")?;
        let head = ck.take_shaped("head.projection", &[encoder.hidden_dim(), meta.classes.len()])?;
        Ok(Self {
            encoder,
            head: Parameter::new("head.projection", head),
            classes: meta.classes,
            pooling: meta.pooling,
        })
    }
}
