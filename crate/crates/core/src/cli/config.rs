//! The JSON run configuration shared by every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SyntheticConfig};
use crate::distill::{DistillSettings, StudentInit};
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::model::{EncoderConfig, FrontEnd, Pooling};
use crate::teachers::{Modality, TeacherSpec};
use crate::train::{LrBounds, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Corpus directory written by `gen-data`/`segment` and read by the rest.
    pub corpus_dir: PathBuf,
    /// Generator settings for `gen-data`, including its seed and label mix.
    pub synthetic: SyntheticConfig,
    /// Raw streams for `segment`.
    pub streams: Option<StreamFiles>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            synthetic: SyntheticConfig::default(),
            streams: None,
        }
    }
}

/// Input files for segmentation. Windows, chat, and events are JSONL; the
/// audio stream is one JSON object; vocabularies list one symbol per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamFiles {
    pub transcript: PathBuf,
    pub chat: PathBuf,
    pub audio: PathBuf,
    pub events: PathBuf,
    pub transcript_vocab: PathBuf,
    pub chat_vocab: PathBuf,
    pub transcript_tags: PathBuf,
    pub chat_tags: PathBuf,
    /// Trailing share of windows, in time order, held out as the test split.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.1
}

impl StreamFiles {
    pub fn paths(&self) -> [&Path; 8] {
        [
            &self.transcript,
            &self.chat,
            &self.audio,
            &self.events,
            &self.transcript_vocab,
            &self.chat_vocab,
            &self.transcript_tags,
            &self.chat_tags,
        ]
    }

    fn paths_mut(&mut self) -> [&mut PathBuf; 8] {
        [
            &mut self.transcript,
            &mut self.chat,
            &mut self.audio,
            &mut self.events,
            &mut self.transcript_vocab,
            &mut self.chat_vocab,
            &mut self.transcript_tags,
            &mut self.chat_tags,
        ]
    }
}

/// Encoder geometry for teachers (K layers) and the student (M layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
    pub patch_frames: usize,
    pub patch_mels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            teacher_layers: 4,
            student_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            max_seq_len: 64,
            pooling: Pooling::Mean,
            patch_frames: 2,
            patch_mels: 2,
        }
    }
}

impl ModelSection {
    /// Teacher spec for `modality` sized to `corpus`'s vocabularies.
    pub fn teacher_spec(&self, modality: Modality, corpus: &Corpus, dropout: f64) -> Result<TeacherSpec> {
        let m = &corpus.manifest;
        let front_end = match modality {
            Modality::Audio => FrontEnd::Patches {
                mel_bins: m.mel_bins,
                patch_frames: self.patch_frames,
                patch_mels: self.patch_mels,
            },
            Modality::Chat => FrontEnd::Tokens {
                vocab_size: m.chat_vocab_size,
            },
            Modality::Transcript => FrontEnd::Tokens {
                vocab_size: m.transcript_vocab_size,
            },
        };
        let mut spec = TeacherSpec::new(
            modality,
            EncoderConfig {
                num_layers: self.teacher_layers,
                hidden_dim: self.hidden_dim,
                num_heads: self.num_heads,
                ffn_dim: self.ffn_dim,
                max_seq_len: self.max_seq_len,
                front_end,
                dropout,
            },
        );
        spec.pooling = self.pooling;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub teacher: TrainConfig,
    pub distill: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            teacher: TrainConfig::default(),
            distill: TrainConfig {
                lr: LrBounds::DESK_DISTILL,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// Teachers distilled into the student.
    pub teachers: Vec<Modality>,
    /// Checkpoint directory per teacher; `train-teacher` writes here by default.
    pub teacher_dirs: BTreeMap<Modality, PathBuf>,
    pub temperature: f64,
    pub student_init: StudentInit,
    /// Trailing share of the training split used to pick `student_best.ckpt`.
    pub validation_fraction: f64,
    /// Directory holding the distilled student, read by `evaluate`.
    pub student_dir: PathBuf,
    /// Arms run by `ablate` in addition to the four standard subsets.
    pub extra_subsets: Vec<Vec<Modality>>,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            teachers: Modality::ALL.to_vec(),
            teacher_dirs: Modality::ALL
                .iter()
                .map(|&m| (m, PathBuf::from("teachers").join(m.name())))
                .collect(),
            temperature: 1.0,
            student_init: StudentInit::default(),
            validation_fraction: 0.0,
            student_dir: "runs/distill".into(),
            extra_subsets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub split: Split,
    /// Student checkpoint to evaluate; defaults to the distilled student.
    pub checkpoint: Option<PathBuf>,
}

impl RunConfigFile {
    /// Parses `text`, rejecting unknown keys, and resolves relative paths
    /// against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Ok((Self::parse(&text, base)?, text))
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data.corpus_dir);
        if let Some(s) = &mut self.data.streams {
            s.paths_mut().into_iter().for_each(join);
        }
        self.distill.teacher_dirs.values_mut().for_each(join);
        join(&mut self.distill.student_dir);
        if let Some(c) = &mut self.eval.checkpoint {
            join(c);
        }
    }

    /// Checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if let Some(s) = &self.data.streams {
            if !(0.0..1.0).contains(&s.test_fraction) {
                return Err(Error::Config(format!(
                    "test_fraction {} outside [0, 1)",
                    s.test_fraction
                )));
            }
        }
        let m = &self.model;
        if m.student_layers == 0 || m.student_layers > m.teacher_layers {
            return Err(Error::Config(format!(
                "student depth {} must be between 1 and the teacher depth {}",
                m.student_layers, m.teacher_layers
            )));
        }
        self.train.teacher.validate().map_err(|e| e.context("train.teacher"))?;
        self.train.distill.validate().map_err(|e| e.context("train.distill"))?;
        let d = &self.distill;
        if !(d.temperature > 0.0 && d.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                d.temperature
            )));
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                d.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn distill_settings(&self) -> DistillSettings {
        DistillSettings {
            student_layers: self.model.student_layers,
            pooling: self.model.pooling,
            temperature: self.distill.temperature,
            student_init: self.distill.student_init,
        }
    }

    pub fn teacher_dir(&self, modality: Modality) -> Result<&Path> {
        self.distill
            .teacher_dirs
            .get(&modality)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("no checkpoint directory configured for the {modality} teacher")))
    }

    /// Applies a `--seed` override to the generator and both training runs.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.synthetic.seed = seed;
        self.train.teacher.seed = seed;
        self.train.distill.seed = seed;
    }
}

/// Splits off the trailing `fraction` of `xs` as a validation set.
pub fn split_validation<T: Clone>(xs: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let held = (xs.len() as f64 * fraction).round() as usize;
    let cut = xs.len() - held.min(xs.len());
    (xs[..cut].to_vec(), xs[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfigFile::parse("{}", Path::new("")).unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        assert_eq!(cfg.distill.teachers, Modality::ALL.to_vec());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"train": {"teacher": {"lr_max": 1}}}"#,
            r#"{"model": {"K": 4}}"#,
        ] {
            assert!(
                matches!(RunConfigFile::parse(text, Path::new("")), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let text = r#"{"data": {"corpus_dir": "c"}, "eval": {"checkpoint": "/abs/s.ckpt"}}"#;
        let cfg = RunConfigFile::parse(text, Path::new("/runs/a")).unwrap();
        assert_eq!(cfg.data.corpus_dir, PathBuf::from("/runs/a/c"));
        assert_eq!(cfg.eval.checkpoint, Some(PathBuf::from("/abs/s.ckpt")));
        assert_eq!(
            cfg.teacher_dir(Modality::Chat).unwrap(),
            Path::new("/runs/a/teachers/chat")
        );
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"model": {"student_layers": 5}}"#,
            r#"{"train": {"distill": {"batch_size": 0}}}"#,
            r#"{"distill": {"temperature": 0}}"#,
            r#"{"data": {"synthetic": {"seed": 1, "n_train": 1, "n_test": 1, "label_probs": [1, 1, 0, 0], "window_s": 1, "transcript_len": [1, 2], "chat_len": [1, 2], "frames_per_window": 2, "mel_bins": 2}}}"#,
        ] {
            let err = RunConfigFile::parse(text, Path::new("")).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let (a, b) = split_validation(&[1, 2, 3, 4, 5], 0.4);
        assert_eq!((a, b), (vec![1, 2, 3], vec![4, 5]));
        assert_eq!(split_validation(&[1, 2], 0.0).1, Vec::<i32>::new());
    }
}
