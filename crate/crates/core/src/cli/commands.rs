//! Command bodies. Each checks its inputs before writing anything and
//! records the paths it writes in the context.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::{split_validation, RunConfigFile, Split};
use super::record::InputLog;
use super::verify::{run_verify, VERIFY_FILE};
use crate::data::{
    generate, read_lines, segment, write_synthetic, AudioStream, ChatMessage, Corpus, CorpusParts, EventLog, Instance,
    LoggedEvent, TranscriptWindow, CHAT_TAGS_FILE, CHAT_VOCAB_FILE, MANIFEST_FILE, TEST_FILE, TRAIN_FILE,
    TRANSCRIPT_TAGS_FILE, TRANSCRIPT_VOCAB_FILE,
};
use crate::distill::{
    build_student, distill, Distiller, Student, HEADS_CHECKPOINT, LOSS_HISTORY, PROJECTIONS_CHECKPOINT,
    STUDENT_BEST_CHECKPOINT, STUDENT_CHECKPOINT,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, evaluate_student, run_ablation, table3_subsets, ABLATION_FILE, CONFUSION_FILE, METRICS_FILE,
};
use crate::model::{EncoderModel, FrontEnd};
use crate::teachers::{
    finetune_teacher, teacher_accuracy, teacher_classes, Modality, TeacherBundle, TASK_FILE, TEACHER_CHECKPOINT,
};

pub const TEACHER_METRICS_FILE: &str = "teacher_metrics.json";

const CORPUS_FILES: [&str; 7] = [
    MANIFEST_FILE,
    TRAIN_FILE,
    TEST_FILE,
    TRANSCRIPT_VOCAB_FILE,
    CHAT_VOCAB_FILE,
    TRANSCRIPT_TAGS_FILE,
    CHAT_TAGS_FILE,
];

/// State shared by a command run.
#[derive(Debug)]
pub struct Context {
    pub config: RunConfigFile,
    pub out: PathBuf,
    pub inputs: InputLog,
    pub outputs: Vec<PathBuf>,
}

impl Context {
    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn produced(&mut self, names: &[&str]) {
        self.outputs.extend(names.iter().map(|n| self.out.join(n)));
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn require_corpus(dir: &Path) -> Result<()> {
    CORPUS_FILES
        .iter()
        .try_for_each(|f| require(&dir.join(f), "corpus file"))
}

fn load_corpus(ctx: &mut Context) -> Result<Corpus> {
    let dir = ctx.config.data.corpus_dir.clone();
    for f in CORPUS_FILES {
        ctx.inputs.add_file(&dir.join(f))?;
    }
    Corpus::load(&dir)
}

fn require_teacher(dir: &Path) -> Result<()> {
    require(&dir.join(TEACHER_CHECKPOINT), "teacher checkpoint")?;
    require(&dir.join(TASK_FILE), "teacher task file")
}

fn load_teacher(ctx: &mut Context, modality: Modality) -> Result<TeacherBundle> {
    let dir = ctx.config.teacher_dir(modality)?.to_path_buf();
    ctx.inputs.add_file(&dir.join(TEACHER_CHECKPOINT))?;
    ctx.inputs.add_file(&dir.join(TASK_FILE))?;
    let teacher = TeacherBundle::load(&dir)?;
    if teacher.modality() != modality {
        return Err(Error::Config(format!(
            "{} holds a {} teacher, expected {modality}",
            dir.display(),
            teacher.modality()
        )));
    }
    Ok(teacher)
}

/// Fails with a configuration error if any window is longer than `encoder`
/// accepts.
fn check_lengths(encoder: &EncoderModel, modality: Modality, data: &[Instance]) -> Result<()> {
    let limit = encoder.config().max_seq_len;
    for inst in data {
        let n = encoder.sequence_len(modality.input(inst)?)?;
        if n > limit {
            return Err(Error::Config(format!(
                "instance {} gives {n} {modality} positions, more than max_seq_len {limit}",
                inst.id
            )));
        }
    }
    Ok(())
}

/// Checks that a teacher's input vocabulary and window lengths fit the corpus.
fn check_teacher_fits(teacher: &TeacherBundle, corpus: &Corpus) -> Result<()> {
    let m = &corpus.manifest;
    let fits = match (teacher.modality(), &teacher.spec.encoder.front_end) {
        (Modality::Audio, FrontEnd::Patches { mel_bins, .. }) => *mel_bins == m.mel_bins,
        (Modality::Chat, FrontEnd::Tokens { vocab_size }) => *vocab_size == m.chat_vocab_size,
        (Modality::Transcript, FrontEnd::Tokens { vocab_size }) => *vocab_size == m.transcript_vocab_size,
        _ => false,
    };
    if !fits {
        return Err(Error::Config(format!(
            "the {} teacher was trained on a different vocabulary or audio width than this corpus",
            teacher.modality()
        )));
    }
    check_lengths(&teacher.encoder, teacher.modality(), &corpus.train)?;
    check_lengths(&teacher.encoder, teacher.modality(), &corpus.test)
}

pub fn gen_data(ctx: &mut Context) -> Result<()> {
    let synthetic = ctx.config.data.synthetic.clone();
    let corpus = generate(&synthetic)?;
    ctx.create_out()?;
    write_synthetic(&ctx.out, &corpus, &synthetic)?;
    ctx.produced(&CORPUS_FILES);
    println!(
        "wrote {} train and {} test instances to {}",
        corpus.train.len(),
        corpus.test.len(),
        ctx.out.display()
    );
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn read_input(ctx: &mut Context, path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ctx.inputs.add_bytes(path, text.as_bytes());
    Ok(text)
}

pub fn segment_streams(ctx: &mut Context) -> Result<()> {
    let streams = ctx
        .config
        .data
        .streams
        .clone()
        .ok_or_else(|| Error::Config("segment needs data.streams".into()))?;
    streams.paths().iter().try_for_each(|p| require(p, "stream file"))?;

    let windows: Vec<TranscriptWindow> = read_jsonl(&streams.transcript, &read_input(ctx, &streams.transcript)?)?;
    let chat: Vec<ChatMessage> = read_jsonl(&streams.chat, &read_input(ctx, &streams.chat)?)?;
    let audio: AudioStream = serde_json::from_str(&read_input(ctx, &streams.audio)?).map_err(|e| Error::Parse {
        path: streams.audio.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let events = EventLog::new(read_jsonl::<LoggedEvent>(
        &streams.events,
        &read_input(ctx, &streams.events)?,
    )?)?;
    let mut vocab = Vec::with_capacity(4);
    for p in [
        &streams.transcript_vocab,
        &streams.chat_vocab,
        &streams.transcript_tags,
        &streams.chat_tags,
    ] {
        ctx.inputs.add_file(p)?;
        vocab.push(read_lines(p)?);
    }

    let instances = segment(&windows, &chat, &audio, &events)?;
    let test_len = (instances.len() as f64 * streams.test_fraction).round() as usize;
    let (train, test) = instances.split_at(instances.len() - test_len);
    let parts = CorpusParts {
        train,
        test,
        transcript_vocab: &vocab[0],
        chat_vocab: &vocab[1],
        transcript_tags: &vocab[2],
        chat_tags: &vocab[3],
        seed: None,
        generator: None,
    };
    let manifest = parts.manifest();
    let check = Corpus {
        dir: ctx.out.clone(),
        train: train.to_vec(),
        test: test.to_vec(),
        manifest,
        transcript_tags: vocab[2].clone(),
        chat_tags: vocab[3].clone(),
    };
    check.check_ids()?;
    ctx.create_out()?;
    parts.write(&ctx.out)?;
    ctx.produced(&CORPUS_FILES);
    println!(
        "segmented {} windows ({} train, {} test)",
        instances.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TeacherMetrics {
    modality: Modality,
    train_accuracy: f64,
    test_accuracy: f64,
}

pub fn train_teacher(ctx: &mut Context, modality: Modality) -> Result<()> {
    require_corpus(&ctx.config.data.corpus_dir)?;
    let corpus = load_corpus(ctx)?;
    let train_cfg = ctx.config.train.teacher.clone();
    let spec = ctx.config.model.teacher_spec(modality, &corpus, train_cfg.dropout)?;
    let probe = TeacherBundle::new(spec.clone(), teacher_classes(modality, &corpus), train_cfg.seed)?;
    check_lengths(&probe.encoder, modality, &corpus.train)?;
    check_lengths(&probe.encoder, modality, &corpus.test)?;

    let (teacher, history) = finetune_teacher(&spec, &corpus.train, teacher_classes(modality, &corpus), &train_cfg)?;
    ctx.create_out()?;
    teacher.save(&ctx.out)?;
    ctx.produced(&[TEACHER_CHECKPOINT, TASK_FILE]);
    ctx.write_text(LOSS_HISTORY, &history.to_csv())?;
    let metrics = TeacherMetrics {
        modality,
        train_accuracy: teacher_accuracy(&teacher, &corpus.train)?,
        test_accuracy: teacher_accuracy(&teacher, &corpus.test)?,
    };
    ctx.write_json(TEACHER_METRICS_FILE, &metrics)?;
    println!(
        "{modality} teacher: train accuracy {:.4}, test accuracy {:.4}",
        metrics.train_accuracy, metrics.test_accuracy
    );
    Ok(())
}

/// Teachers for `subset` plus the transcript teacher the student is built from.
fn needed_teachers(subset: &[Modality]) -> Vec<Modality> {
    let mut need: Vec<Modality> = subset.to_vec();
    need.push(Modality::Transcript);
    need.sort();
    need.dedup();
    need
}

fn load_teachers(ctx: &mut Context, need: &[Modality], corpus: &Corpus) -> Result<Vec<TeacherBundle>> {
    need.iter()
        .map(|&m| {
            let t = load_teacher(ctx, m)?;
            check_teacher_fits(&t, corpus)?;
            Ok(t)
        })
        .collect()
}

fn check_subset(subset: &[Modality]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Config("the teacher subset is empty".into()));
    }
    let mut sorted = subset.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != subset.len() {
        return Err(Error::Config(format!("teacher subset {subset:?} repeats a modality")));
    }
    Ok(())
}

pub fn distill_student(ctx: &mut Context) -> Result<()> {
    let subset = ctx.config.distill.teachers.clone();
    check_subset(&subset)?;
    let need = needed_teachers(&subset);
    for &m in &need {
        require_teacher(ctx.config.teacher_dir(m)?)?;
    }
    require_corpus(&ctx.config.data.corpus_dir)?;
    let corpus = load_corpus(ctx)?;
    let teachers = load_teachers(ctx, &need, &corpus)?;

    let cfg = ctx.config.clone();
    let mode = cfg.eval.mode;
    let train = mode.training_set(&corpus.train);
    let (train, validation) = split_validation(&train, cfg.distill.validation_fraction);
    let settings = cfg.distill_settings();
    let student = build_student(&settings, &teachers, mode.student_classes(), cfg.train.distill.seed)?;
    let chosen = teachers
        .into_iter()
        .filter(|t| subset.contains(&t.modality()))
        .collect();
    let distiller = Distiller::new(
        student,
        chosen,
        settings.pooling,
        settings.temperature,
        cfg.train.distill.seed,
    )?;
    let validation = (!validation.is_empty()).then_some(validation.as_slice());
    let outcome = distill(distiller, &train, validation, &cfg.train.distill)?;

    ctx.create_out()?;
    outcome.last.save(&ctx.out)?;
    ctx.produced(&[STUDENT_CHECKPOINT, PROJECTIONS_CHECKPOINT, HEADS_CHECKPOINT]);
    if let Some((epoch, best)) = &outcome.best {
        best.student.save(&ctx.out.join(STUDENT_BEST_CHECKPOINT))?;
        ctx.produced(&[STUDENT_BEST_CHECKPOINT]);
        println!("best validation macro-F1 at epoch {epoch}");
    }
    ctx.write_text(LOSS_HISTORY, &outcome.history.to_csv())?;
    if let Some(row) = outcome.history.rows.last() {
        println!(
            "final epoch {}: losses {:?}, train accuracy {:.4}",
            row.epoch, row.losses, row.accuracy
        );
    }
    Ok(())
}

pub fn evaluate(ctx: &mut Context) -> Result<()> {
    let checkpoint = ctx
        .config
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.config.distill.student_dir.join(STUDENT_CHECKPOINT));
    require(&checkpoint, "student checkpoint")?;
    require_corpus(&ctx.config.data.corpus_dir)?;
    ctx.inputs.add_file(&checkpoint)?;
    let student = Student::load(&checkpoint)?;
    let corpus = load_corpus(ctx)?;
    let split = match ctx.config.eval.split {
        Split::Train => &corpus.train,
        Split::Test => &corpus.test,
    };
    check_lengths(&student.encoder, Modality::Transcript, split)?;
    let evaluation = evaluate_student(&student, split, ctx.config.eval.mode)?;
    ctx.create_out()?;
    evaluation.write(&ctx.out)?;
    ctx.produced(&[METRICS_FILE, CONFUSION_FILE]);
    let r = &evaluation.report;
    println!(
        "{} instances: macro P {:.4}, R {:.4}, F1 {:.4}",
        r.instances, r.macro_precision, r.macro_recall, r.macro_f1
    );
    Ok(())
}

pub fn ablate(ctx: &mut Context) -> Result<()> {
    let mut subsets = table3_subsets();
    subsets.extend(ctx.config.distill.extra_subsets.iter().cloned());
    subsets.iter().try_for_each(|s| check_subset(s))?;
    let all: Vec<Modality> = subsets.iter().flatten().copied().collect();
    let need = needed_teachers(&all);
    for &m in &need {
        require_teacher(ctx.config.teacher_dir(m)?)?;
    }
    require_corpus(&ctx.config.data.corpus_dir)?;
    let corpus = load_corpus(ctx)?;
    let teachers = load_teachers(ctx, &need, &corpus)?;

    let cfg = ctx.config.clone();
    let rows = run_ablation(
        &subsets,
        &teachers,
        &corpus.train,
        &corpus.test,
        &cfg.distill_settings(),
        cfg.eval.mode,
        &cfg.train.distill,
    )?;
    ctx.create_out()?;
    let csv = ablation_csv(&rows, cfg.eval.mode);
    ctx.write_text(ABLATION_FILE, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn verify(ctx: &mut Context, seed: u64) -> Result<()> {
    let report = run_verify(seed)?;
    let text = report.to_text();
    print!("{text}");
    ctx.create_out()?;
    ctx.write_text(VERIFY_FILE, &text)?;
    let failures = report.failures();
    if failures.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        Err(Error::Verification(format!(
            "{} check(s) failed: {}",
            names.len(),
            names.join(", ")
        )))
    }
}
