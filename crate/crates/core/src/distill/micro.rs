//! A tiny randomly initialised distillation setup for self-checks.

use super::{build_student, DistillSettings, Distiller};
use crate::data::synthetic::{chat_vocab, generate, transcript_vocab, SyntheticConfig, CHAT_TAGS, TRANSCRIPT_TAGS};
use crate::data::{EventLabel, Instance};
use crate::error::Result;
use crate::model::{EncoderConfig, FrontEnd};
use crate::teachers::{Modality, TeacherBundle, TeacherSpec};

pub const MICRO_WIDTH: usize = 8;
pub const MICRO_TEACHER_LAYERS: usize = 2;
pub const MICRO_STUDENT_LAYERS: usize = 1;

fn micro_encoder(front_end: FrontEnd) -> EncoderConfig {
    EncoderConfig {
        num_layers: MICRO_TEACHER_LAYERS,
        hidden_dim: MICRO_WIDTH,
        num_heads: 2,
        ffn_dim: 2 * MICRO_WIDTH,
        max_seq_len: 16,
        front_end,
        dropout: 0.1,
    }
}

/// Short synthetic windows that fit the micro encoders.
pub fn micro_instances(n: usize, seed: u64) -> Result<Vec<Instance>> {
    let cfg = SyntheticConfig {
        seed,
        n_train: n,
        n_test: 0,
        label_probs: [0.25; 4],
        transcript_len: (3, 6),
        chat_len: (2, 5),
        frames_per_window: 4,
        mel_bins: 8,
        ..SyntheticConfig::default()
    };
    Ok(generate(&cfg)?.train)
}

/// Untrained teachers for all three modalities.
pub fn micro_teachers(seed: u64) -> Result<Vec<TeacherBundle>> {
    let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let labels: Vec<&str> = EventLabel::ALL.iter().map(|l| l.name()).collect();
    let specs = [
        (
            Modality::Audio,
            FrontEnd::Patches {
                mel_bins: 8,
                patch_frames: 2,
                patch_mels: 2,
            },
            names(&labels),
        ),
        (
            Modality::Chat,
            FrontEnd::Tokens {
                vocab_size: chat_vocab().len(),
            },
            names(CHAT_TAGS),
        ),
        (
            Modality::Transcript,
            FrontEnd::Tokens {
                vocab_size: transcript_vocab().len(),
            },
            names(TRANSCRIPT_TAGS),
        ),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (m, fe, classes))| {
            TeacherBundle::new(TeacherSpec::new(m, micro_encoder(fe)), classes, seed + i as u64)
        })
        .collect()
}

/// Micro distiller over `subset` (K=2 teachers, M=1 student, width 8).
pub fn micro_distiller(subset: &[Modality], seed: u64) -> Result<Distiller> {
    let teachers = micro_teachers(seed)?;
    let settings = DistillSettings {
        student_layers: MICRO_STUDENT_LAYERS,
        ..DistillSettings::default()
    };
    let student = build_student(&settings, &teachers, EventLabel::ALL.to_vec(), seed)?;
    let chosen = teachers
        .into_iter()
        .filter(|t| subset.contains(&t.modality()))
        .collect();
    Distiller::new(student, chosen, settings.pooling, 1.0, seed)
}
