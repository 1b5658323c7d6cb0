//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero when a
//! blocking criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mmkd::cli::verify::run_verify;
use mmkd::data::{
    generate, segment, AudioStream, ChatMessage, EventLabel, EventLog, Instance, LoggedEvent, SyntheticConfig,
    TranscriptWindow, OUTSIDE_TAG, PAD,
};
use mmkd::distill::micro::{micro_distiller, micro_instances};
use mmkd::distill::{
    build_layer_map, build_student, distill, distillation_term_value, train_baseline, DistillSettings, Distiller,
    Student,
};
use mmkd::eval::{evaluate_student, f1_score, mean, metrics, ConfusionMatrix, EvalMode};
use mmkd::model::{EncoderConfig, Mode};
use mmkd::numerics::Tape;
use mmkd::teachers::{finetune_teacher, teacher_accuracy, Modality, TeacherBundle, TeacherSpec};
use mmkd::train::{LrBounds, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let report = run_verify(0).map_err(err)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for name in ["hidden_loss", "distillation_loss", "task_loss", "total_loss"] {
        let c = report
            .checks
            .iter()
            .find(|c| c.name == format!("grad_check.{name}"))
            .ok_or(format!("verify did not run {name}"))?;
        ensure(
            c.measured < 1e-4,
            format!("{name}: max relative error {:.3e}", c.measured),
        )?;
        worst = worst.max(c.measured);
    }
    ensure(report.passed(), report.to_text())?;
    ensure(elapsed < 60.0, format!("verify took {elapsed:.1} s"))?;
    Ok(format!(
        "max rel. error {worst:.2e} over four losses, verify {elapsed:.1} s"
    ))
}

fn c2_layer_map() -> Outcome {
    let map = build_layer_map(12, 8).map_err(err)?;
    let expected = [
        (1, 1),
        (2, 2),
        (3, 3),
        (4, 4),
        (5, 5),
        (6, 6),
        (7, 7),
        (8, 8),
        (9, 8),
        (10, 8),
        (11, 8),
        (12, 8),
    ];
    ensure(map.pairs() == expected, format!("12→8 map {:?}", map.pairs()))?;
    let mut runner = TestRunner::new(ProptestConfig::with_cases(500));
    runner
        .run(&(1usize..40, 0usize..40), |(m, extra)| {
            let k = m + extra;
            let map = build_layer_map(k, m).unwrap();
            prop_assert_eq!(map.len(), k);
            let count = |s: usize| map.pairs().iter().filter(|p| p.1 == s).count();
            prop_assert_eq!(count(m), k - m + 1);
            for s in 1..m {
                prop_assert_eq!(count(s), 1);
            }
            for (i, &(t, s)) in map.pairs().iter().enumerate() {
                prop_assert_eq!(t, i + 1);
                prop_assert!(s >= 1 && s <= m);
            }
            Ok(())
        })
        .map_err(err)?;
    Ok("12→8 table exact; 500 random K ≥ M cases hold".into())
}

fn c3_loss_algebra() -> Outcome {
    let d = micro_distiller(&Modality::ALL, 21).map_err(err)?;
    let data = micro_instances(24, 22).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for i in 0..100 {
        let size = rng.random_range(1..=8);
        let batch: Vec<&Instance> = (0..size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let mut tape = Tape::new();
        let b = d
            .total_loss(&mut tape, &batch, None, &mut Mode::Train(&mut rng), None)
            .map_err(err)?
            .breakdown(&tape);
        ensure(
            b.l_total == b.l_hid + b.l_dis + b.l_task,
            format!("batch {i}: {} != {} + {} + {}", b.l_total, b.l_hid, b.l_dis, b.l_task),
        )?;
    }
    let ln4 = 4f64.ln();
    let uniform = distillation_term_value(&[0.0; 4], &[0.0; 4], 1).map_err(err)?;
    ensure(
        (uniform - ln4 / (1.0 + ln4)).abs() < 1e-9,
        format!("uniform term {uniform}"),
    )?;
    for i in 0..1000 {
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (y, z) = (rng.random_range(0..4), rng.random_range(0..4));
        let lt = log_softmax(&t);
        let (ce_y, ce_z) = (-lt[y], -lt[z]);
        let (a, b) = (
            distillation_term_value(&t, &s, y).map_err(err)?,
            distillation_term_value(&t, &s, z).map_err(err)?,
        );
        let ok = if ce_y < ce_z {
            a > b
        } else if ce_y > ce_z {
            a < b
        } else {
            a == b
        };
        ensure(ok, format!("triple {i}: CE {ce_y} vs {ce_z} gave terms {a} vs {b}"))?;
    }
    Ok(format!(
        "100 batches exact; uniform term {uniform:.10}; 1000 triples monotone"
    ))
}

fn c4_frozen_teachers() -> Outcome {
    let d = micro_distiller(&Modality::ALL, 31).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    for t in &d.teachers {
        t.save(&dir.path().join(t.modality().name())).map_err(err)?;
    }
    let before: Vec<Vec<f64>> = d.trainable().iter().map(|p| p.value.data().to_vec()).collect();
    let data = micro_instances(10, 32).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let steps = cfg.epochs * cfg.steps_per_epoch(data.len());
    ensure(steps == 50, format!("{steps} steps"))?;
    let out = distill(d, &data, None, &cfg).map_err(err)?;
    let mut teacher_tensors = 0;
    for t in &out.last.teachers {
        let saved = TeacherBundle::load(&dir.path().join(t.modality().name())).map_err(err)?;
        for (p, q) in t.encoder.params().iter().zip(saved.encoder.params()) {
            ensure(
                p.value.bit_eq(&q.value),
                format!("teacher parameter {} changed", p.name()),
            )?;
            teacher_tensors += 1;
        }
    }
    let (mut changed, mut total) = (0usize, 0usize);
    for (p, old) in out.last.trainable().iter().zip(&before) {
        total += old.len();
        changed += p
            .value
            .data()
            .iter()
            .zip(old)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    let share = changed as f64 / total as f64;
    ensure(
        share >= 0.99,
        format!("only {:.2}% of trainable values changed", 100.0 * share),
    )?;
    Ok(format!(
        "{teacher_tensors} teacher tensors bit-identical after {steps} steps; {:.2}% of {total} trainable values changed",
        100.0 * share
    ))
}

fn c5_metrics() -> Outcome {
    for (p, r, f) in [(0.740, 1.0, 0.851), (0.859, 0.421, 0.565)] {
        let got = 2.0 * p * r / (p + r);
        ensure(
            (f1_score(p, r) - got).abs() < 1e-12 && (got - f).abs() <= 0.001,
            format!("F1({p}, {r}) = {got}"),
        )?;
    }
    let macro_p = mean(&[0.646, 0.408, 0.220, 0.705]);
    ensure((macro_p - 0.495).abs() <= 0.001, format!("macro P {macro_p}"))?;
    let gold = [
        EventLabel::Kill,
        EventLabel::Dragon,
        EventLabel::Tower,
        EventLabel::Other,
        EventLabel::Other,
        EventLabel::Other,
    ];
    let pairs: Vec<_> = gold.iter().map(|&g| (g, EventLabel::Other)).collect();
    let r = metrics(
        &ConfusionMatrix::from_pairs(EventLabel::ALL.to_vec(), &pairs).map_err(err)?,
        EvalMode::WithOther,
    );
    for l in EventLabel::EVENTS {
        let m = r.label(l).ok_or("missing label")?;
        ensure(
            (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0),
            format!("{l} row not zero"),
        )?;
    }
    let o = r.label(EventLabel::Other).ok_or("missing OTHER")?;
    ensure(o.recall == 1.0 && o.precision == 0.5, format!("OTHER row {o:?}"))?;
    Ok(format!(
        "F1 pairs within 0.001, macro P {macro_p:.4}, all-OTHER zero rows reproduced"
    ))
}

fn desk_encoder(modality: Modality, corpus: &mmkd::data::SyntheticCorpus) -> EncoderConfig {
    match modality {
        Modality::Audio => EncoderConfig::patch_default(64),
        Modality::Chat => EncoderConfig::token_default(corpus.chat_vocab.len(), 64),
        Modality::Transcript => EncoderConfig::token_default(corpus.transcript_vocab.len(), 64),
    }
}

fn desk_classes(modality: Modality) -> Vec<String> {
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    match modality {
        Modality::Audio => EventLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        Modality::Chat => strings(mmkd::data::synthetic::CHAT_TAGS),
        Modality::Transcript => strings(mmkd::data::synthetic::TRANSCRIPT_TAGS),
    }
}

fn train_teachers(corpus: &mmkd::data::SyntheticCorpus, cfg: &TrainConfig) -> Result<Vec<TeacherBundle>, String> {
    Modality::ALL
        .iter()
        .map(|&m| {
            let spec = TeacherSpec::new(m, desk_encoder(m, corpus));
            finetune_teacher(&spec, &corpus.train, desk_classes(m), cfg)
                .map(|(t, _)| t)
                .map_err(err)
        })
        .collect()
}

fn student_train_accuracy(student: &Student, data: &[Instance]) -> Result<f64, String> {
    let correct = data
        .iter()
        .map(|i| student.predict(i).map(|p| p == i.label))
        .collect::<mmkd::Result<Vec<bool>>>()
        .map_err(err)?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

fn c6_overfit() -> Outcome {
    let start = Instant::now();
    let corpus = generate(&SyntheticConfig {
        n_train: 50,
        n_test: 10,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    let teachers = train_teachers(&corpus, &TrainConfig::default())?;
    let mut accs = Vec::new();
    for t in &teachers {
        let acc = teacher_accuracy(t, &corpus.train).map_err(err)?;
        ensure(
            acc >= 0.95,
            format!("{} teacher reached only {acc:.3} in 30 epochs", t.modality()),
        )?;
        accs.push(format!("{} {acc:.3}", t.modality()));
    }
    let settings = DistillSettings::default();
    let student = build_student(&settings, &teachers, EventLabel::ALL.to_vec(), 0).map_err(err)?;
    let distiller = Distiller::new(student, teachers, settings.pooling, 1.0, 0).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 100,
        lr: LrBounds::DESK_DISTILL,
        ..TrainConfig::default()
    };
    let out = distill(distiller, &corpus.train, None, &cfg).map_err(err)?;
    let acc = student_train_accuracy(&out.last.student, &corpus.train)?;
    ensure(acc >= 0.95, format!("student reached only {acc:.3} in 100 epochs"))?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 600.0, format!("pipeline took {elapsed:.0} s"))?;
    Ok(format!(
        "teachers {}; student {acc:.3}; {elapsed:.0} s",
        accs.join(", ")
    ))
}

const BENEFIT_TEACHER_EPOCHS: usize = 4;
const BENEFIT_STUDENT_EPOCHS: usize = 8;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn c7_benefit() -> Outcome {
    let start = Instant::now();
    let corpus = generate(&SyntheticConfig::default()).map_err(err)?;
    let teachers = train_teachers(
        &corpus,
        &TrainConfig {
            epochs: BENEFIT_TEACHER_EPOCHS,
            ..TrainConfig::default()
        },
    )?;
    let settings = DistillSettings::default();
    let (mut kd, mut base) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let cfg = TrainConfig {
            epochs: BENEFIT_STUDENT_EPOCHS,
            seed,
            lr: LrBounds::DESK_DISTILL,
            ..TrainConfig::default()
        };
        let student = build_student(&settings, &teachers, EventLabel::ALL.to_vec(), seed).map_err(err)?;
        let distiller = Distiller::new(student.clone(), teachers.clone(), settings.pooling, 1.0, seed).map_err(err)?;
        let distilled = distill(distiller, &corpus.train, None, &cfg).map_err(err)?.last.student;
        let baseline = train_baseline(student, &corpus.train, None, &cfg).map_err(err)?.last;
        let f1 = |s: &Student| evaluate_student(s, &corpus.test, EvalMode::WithOther).map(|e| e.report.macro_f1);
        kd.push(f1(&distilled).map_err(err)?);
        base.push(f1(&baseline).map_err(err)?);
    }
    let (mk, mb) = (median(kd.clone()), median(base.clone()));
    let detail = format!(
        "macro-F1 distilled {kd:.4?} (median {mk:.4}) vs baseline {base:.4?} (median {mb:.4}); {:.0} s",
        start.elapsed().as_secs_f64()
    );
    ensure(mk >= mb, detail.clone())?;
    Ok(detail)
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmkd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(err)?;
    ensure(
        out.status.success(),
        format!("mmkd {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn c8_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = r#"{
        "data": {"synthetic": {"seed": 5, "n_train": 160, "n_test": 60, "label_probs": [0.25, 0.25, 0.25, 0.25],
                 "window_s": 10, "transcript_len": [8, 16], "chat_len": [4, 12], "frames_per_window": 16, "mel_bins": 8}},
        "train": {"teacher": {"epochs": 3}, "distill": {"epochs": 3}}
    }"#;
    std::fs::write(dir.path().join("config.json"), config).map_err(err)?;
    let c = ["--config", "config.json"];
    run_cli(&["gen-data", c[0], c[1]], dir.path())?;
    for m in ["audio", "chat", "transcript"] {
        run_cli(&["train-teacher", "--modality", m, c[0], c[1]], dir.path())?;
    }
    run_cli(&["ablate", c[0], c[1], "--out", "a"], dir.path())?;
    run_cli(&["ablate", c[0], c[1], "--out", "b"], dir.path())?;
    let a = std::fs::read(dir.path().join("a/ablation.csv")).map_err(err)?;
    let b = std::fs::read(dir.path().join("b/ablation.csv")).map_err(err)?;
    ensure(a == b, "repeated ablation runs differ")?;
    let text = String::from_utf8(a).map_err(err)?;
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines.len() == 5, format!("{} lines", lines.len()))?;
    ensure(
        lines[0]
            == "audio,chat,transcript,precision_KILL,precision_DRAGON,precision_TOWER,precision_OTHER,macro_precision",
        lines[0],
    )?;
    let flags: Vec<&str> = lines[1..].iter().map(|l| &l[..5]).collect();
    ensure(flags == ["1,0,1", "0,1,1", "1,1,0", "1,1,1"], format!("{flags:?}"))?;
    Ok("4 arms, per-label and macro precision, byte-identical across two runs".into())
}

/// Independent re-scan: every item is tested against every window.
fn brute_force(
    windows: &[TranscriptWindow],
    chat: &[ChatMessage],
    audio: &AudioStream,
    events: &[LoggedEvent],
) -> Vec<Instance> {
    let mel = audio.frames[0].len();
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let inside = |t: f64| w.start_s <= t && t < w.end_s;
            let mut msgs: Vec<&ChatMessage> = chat.iter().filter(|m| inside(m.t_s)).collect();
            msgs.sort_by(|a, b| a.t_s.partial_cmp(&b.t_s).unwrap());
            let mut chat_tokens: Vec<usize> = msgs.iter().flat_map(|m| m.tokens.clone()).collect();
            let mut chat_tags: Vec<usize> = msgs
                .iter()
                .flat_map(|m| m.tags.clone().unwrap_or(vec![OUTSIDE_TAG; m.tokens.len()]))
                .collect();
            if chat_tokens.is_empty() {
                chat_tokens = vec![PAD];
                chat_tags = vec![PAD];
            }
            let mut frames: Vec<Vec<f64>> = (0..audio.frames.len())
                .filter(|&f| inside(f as f64 / audio.frame_rate))
                .map(|f| audio.frames[f].clone())
                .collect();
            if frames.is_empty() {
                frames = vec![vec![0.0; mel]];
            }
            let (mut tt, mut tg) = (
                w.tokens.clone(),
                w.tags.clone().unwrap_or(vec![OUTSIDE_TAG; w.tokens.len()]),
            );
            if tt.is_empty() {
                tt = vec![PAD];
                tg = vec![PAD];
            }
            Instance {
                id: format!("{i}"),
                window_start_s: w.start_s,
                window_end_s: w.end_s,
                label: events
                    .iter()
                    .find(|e| inside(e.timestamp_s))
                    .map_or(EventLabel::Other, |e| e.event),
                transcript_tokens: tt,
                transcript_tags: tg,
                chat_tokens,
                chat_tags,
                audio: frames,
            }
        })
        .collect()
}

/// A time that is either arbitrary or exactly on a window boundary.
fn random_time(rng: &mut ChaCha8Rng, bounds: &[f64], hi: f64) -> f64 {
    if rng.random_bool(0.3) && !bounds.is_empty() {
        bounds[rng.random_range(0..bounds.len())]
    } else {
        rng.random_range(-1.0..hi + 1.0)
    }
}

fn random_tokens(rng: &mut ChaCha8Rng) -> (Vec<usize>, Option<Vec<usize>>) {
    let n = rng.random_range(0..5);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(2..30)).collect();
    let tags = rng
        .random_bool(0.5)
        .then(|| (0..n).map(|_| rng.random_range(1..6)).collect());
    (tokens, tags)
}

fn c9_segmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut windows_seen = 0;
    for case in 0..1000 {
        let mut windows = Vec::new();
        let mut t = rng.random_range(0.0..3.0);
        for _ in 0..rng.random_range(1..8) {
            if rng.random_bool(0.4) {
                t += rng.random_range(0.0..2.0);
            }
            let end = t + rng.random_range(0.25..4.0);
            let (tokens, tags) = random_tokens(&mut rng);
            windows.push(TranscriptWindow {
                start_s: t,
                end_s: end,
                tokens,
                tags,
            });
            t = end;
        }
        let bounds: Vec<f64> = windows.iter().flat_map(|w| [w.start_s, w.end_s]).collect();
        let chat: Vec<ChatMessage> = (0..rng.random_range(0..20))
            .map(|_| {
                let (tokens, tags) = random_tokens(&mut rng);
                ChatMessage {
                    t_s: random_time(&mut rng, &bounds, t),
                    tokens,
                    tags,
                }
            })
            .collect();
        let frame_rate = [1.0, 2.0, 4.0, 3.7, 10.0][rng.random_range(0..5)];
        let mel = rng.random_range(1..5);
        let audio = AudioStream {
            frame_rate,
            frames: (0..rng.random_range(1..((t + 2.0) * frame_rate) as usize + 2))
                .map(|_| (0..mel).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        };
        let mut events: Vec<LoggedEvent> = (0..rng.random_range(0..10))
            .map(|_| LoggedEvent {
                timestamp_s: random_time(&mut rng, &bounds, t),
                event: EventLabel::EVENTS[rng.random_range(0..3)],
            })
            .collect();
        events.sort_by(|a, b| a.timestamp_s.partial_cmp(&b.timestamp_s).unwrap());

        let got = segment(&windows, &chat, &audio, &EventLog::new(events.clone()).map_err(err)?).map_err(err)?;
        let want = brute_force(&windows, &chat, &audio, &events);
        ensure(
            got.len() == want.len(),
            format!("case {case}: {} windows vs {}", got.len(), want.len()),
        )?;
        for (g, w) in got.iter().zip(&want) {
            let g = Instance {
                id: w.id.clone(),
                ..g.clone()
            };
            ensure(
                &g == w,
                format!("case {case}: window {} differs\n got {g:?}\nwant {w:?}", w.id),
            )?;
        }
        windows_seen += got.len();
    }
    Ok(format!(
        "1000 configurations, {windows_seen} windows match the brute-force re-scan"
    ))
}

fn main() {
    // The distillation-benefit comparison is directional only: a failure is
    // reported but does not fail the suite.
    type Criterion = (&'static str, fn() -> Outcome, bool);
    let criteria: [Criterion; 9] = [
        ("gradient correctness", c1_gradients, true),
        ("layer mapping", c2_layer_map, true),
        ("loss algebra", c3_loss_algebra, true),
        ("frozen-teacher contract", c4_frozen_teachers, true),
        ("metric fidelity", c5_metrics, true),
        ("end-to-end overfit", c6_overfit, true),
        ("distillation benefit", c7_benefit, false),
        ("ablation harness", c8_ablation, true),
        ("segmentation oracle", c9_segmentation, true),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f, blocking)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) if *blocking => {
                failed += 1;
                println!("FAIL criterion {n} ({name}) [{secs:.1}s]: {detail}");
            }
            Err(detail) => println!("FAIL criterion {n} ({name}, non-blocking) [{secs:.1}s]: {detail}"),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criterion/criteria failed");
        std::process::exit(1);
    }
}
