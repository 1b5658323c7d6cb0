use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::micro::{micro_distiller, micro_instances};
use super::*;
use crate::data::Instance;
use crate::model::Mode;
use crate::numerics::{grad_check, Parameter, Tape};
use crate::teachers::Modality;
use crate::train::{LrBounds, TrainConfig};

const ALL: [Modality; 3] = Modality::ALL;

fn eval_breakdown(d: &Distiller, batch: &[&Instance]) -> LossBreakdown {
    let mut tape = Tape::new();
    d.total_loss(&mut tape, batch, None, &mut Mode::Eval, None)
        .unwrap()
        .breakdown(&tape)
}

#[test]
fn total_is_exact_sum() {
    let d = micro_distiller(&ALL, 1).unwrap();
    let data = micro_instances(12, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let batch: Vec<&Instance> = idx[..4].iter().map(|&i| &data[i]).collect();
        let mut tape = Tape::new();
        let vars = d
            .total_loss(&mut tape, &batch, None, &mut Mode::Train(&mut rng), None)
            .unwrap();
        let b = vars.breakdown(&tape);
        assert_eq!(b.l_total, b.l_hid + b.l_dis + b.l_task);
        assert!(b.l_dis >= 0.0 && b.l_task >= 0.0 && b.l_hid >= 0.0);
        assert_eq!(b.per_teacher.len(), 3);
    }
}

#[test]
fn cached_features_match_live_teachers() {
    let d = micro_distiller(&ALL, 4).unwrap();
    let data = micro_instances(3, 5).unwrap();
    let batch: Vec<&Instance> = data.iter().collect();
    let feats: Vec<Vec<TeacherFeatures>> = data.iter().map(|i| d.teacher_features(i).unwrap()).collect();
    let refs: Vec<&[TeacherFeatures]> = feats.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let cached = d
        .total_loss(&mut tape, &batch, Some(&refs), &mut Mode::Eval, None)
        .unwrap()
        .breakdown(&tape);
    assert_eq!(cached, eval_breakdown(&d, &batch));
}

#[test]
fn removing_a_teacher_keeps_other_terms() {
    let full = micro_distiller(&ALL, 6).unwrap();
    let data = micro_instances(4, 7).unwrap();
    let batch: Vec<&Instance> = data.iter().collect();
    let mut pair = full.clone();
    pair.teachers.remove(0);
    pair.bank.sets.remove(0);
    pair.heads.remove(0);
    let a = eval_breakdown(&full, &batch);
    let b = eval_breakdown(&pair, &batch);
    assert_eq!(b.per_teacher.len(), 2);
    assert_eq!(&a.per_teacher[1..], &b.per_teacher[..]);
    assert_eq!(a.l_task, b.l_task);
}

#[test]
fn two_teacher_arm_sums_two_terms() {
    let d = micro_distiller(&[Modality::Chat, Modality::Transcript], 8).unwrap();
    let data = micro_instances(3, 9).unwrap();
    let b = eval_breakdown(&d, &data.iter().collect::<Vec<_>>());
    assert_eq!(b.per_teacher.len(), 2);
    assert_eq!(b.l_hid, b.per_teacher[0].hid + b.per_teacher[1].hid);
    assert_eq!(b.l_dis, b.per_teacher[0].dis + b.per_teacher[1].dis);
}

#[test]
fn empty_subset_is_config_error() {
    assert!(matches!(micro_distiller(&[], 1), Err(crate::Error::Config(_))));
}

#[test]
fn grad_check_total_loss() {
    let d = micro_distiller(&ALL, 10).unwrap();
    let data = micro_instances(2, 11).unwrap();
    let batch: Vec<&Instance> = data.iter().collect();
    let mut inputs: Vec<&Parameter> = d.trainable();
    for t in &d.teachers {
        inputs.extend(t.encoder.params());
    }
    let report = grad_check(&inputs, |tape| {
        Ok(d.total_loss(tape, &batch, None, &mut Mode::Eval, None)?.l_total)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{:?}", report.worst());
    let frozen: Vec<_> = report.params.iter().filter(|p| p.frozen).collect();
    assert!(!frozen.is_empty());
    assert!(frozen.iter().all(|p| p.analytic.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn frozen_teachers_survive_training() {
    let d = micro_distiller(&ALL, 12).unwrap();
    let before: Vec<_> = d.teachers.iter().map(|t| t.encoder.clone()).collect();
    let trainable_before: Vec<_> = d.trainable().iter().map(|p| p.value.clone()).collect();
    let data = micro_instances(10, 13).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = distill(d, &data, None, &cfg).unwrap();
    for (t, b) in out.last.teachers.iter().zip(&before) {
        for (p, q) in t.encoder.params().iter().zip(b.params()) {
            assert!(p.value.bit_eq(&q.value), "{}", p.name());
        }
    }
    let changed = out
        .last
        .trainable()
        .iter()
        .zip(&trainable_before)
        .filter(|(p, v)| !p.value.bit_eq(v))
        .count();
    assert_eq!(changed, trainable_before.len());
}

#[test]
fn micro_run_halves_total_loss() {
    let d = micro_distiller(&ALL, 14).unwrap();
    let data = micro_instances(20, 15).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 5,
        seed: 1,
        lr: LrBounds { low: 1e-4, high: 1e-2 },
        ..TrainConfig::default()
    };
    let out = distill(d, &data, None, &cfg).unwrap();
    let total = out.history.column("l_total").unwrap();
    assert!(total[49] <= 0.5 * total[0], "{total:?}");
}

#[test]
fn student_checkpoint_round_trip() {
    let d = micro_distiller(&[Modality::Transcript], 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let back = Student::load(&dir.path().join(STUDENT_CHECKPOINT)).unwrap();
    let inst = &micro_instances(1, 17).unwrap()[0];
    assert!(back.logits(inst).unwrap().bit_eq(&d.student.logits(inst).unwrap()));
    assert!(dir.path().join(PROJECTIONS_CHECKPOINT).exists() && dir.path().join(HEADS_CHECKPOINT).exists());
}

#[test]
fn student_copies_donor_layers() {
    let d = micro_distiller(&[Modality::Transcript], 18).unwrap();
    let donor = &d.teachers[0].encoder;
    for (s, t) in d.student.encoder.params().iter().zip(donor.params()) {
        assert!(s.value.bit_eq(&t.value));
        assert!(!s.is_frozen());
    }
}
