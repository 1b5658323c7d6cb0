//! On-disk corpus layout: JSONL splits, vocabulary sidecars, and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::instance::{EventLabel, Instance};
use super::synthetic::{SyntheticConfig, SyntheticCorpus, CHAT_TAGS, TRANSCRIPT_TAGS};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TRANSCRIPT_VOCAB_FILE: &str = "vocab_transcript.txt";
pub const CHAT_VOCAB_FILE: &str = "vocab_chat.txt";
pub const TRANSCRIPT_TAGS_FILE: &str = "tags_transcript.txt";
pub const CHAT_TAGS_FILE: &str = "tags_chat.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowStats {
    pub mean_transcript_tokens: f64,
    pub mean_chat_tokens: f64,
    pub mean_audio_frames: f64,
    pub mean_window_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: Option<u64>,
    pub train_counts: BTreeMap<EventLabel, usize>,
    pub test_counts: BTreeMap<EventLabel, usize>,
    pub transcript_vocab_size: usize,
    pub chat_vocab_size: usize,
    pub transcript_tag_count: usize,
    pub chat_tag_count: usize,
    pub mel_bins: usize,
    pub window_stats: WindowStats,
    pub generator: Option<SyntheticConfig>,
}

pub fn label_counts(xs: &[Instance]) -> BTreeMap<EventLabel, usize> {
    let mut m: BTreeMap<EventLabel, usize> = EventLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for x in xs {
        *m.entry(x.label).or_default() += 1;
    }
    m
}

fn window_stats(xs: &[Instance]) -> WindowStats {
    let n = xs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Instance) -> f64| xs.iter().map(f).sum::<f64>() / n;
    WindowStats {
        mean_transcript_tokens: mean(&|i| i.transcript_tokens.len() as f64),
        mean_chat_tokens: mean(&|i| i.chat_tokens.len() as f64),
        mean_audio_frames: mean(&|i| i.audio.len() as f64),
        mean_window_s: mean(&|i| i.window_end_s - i.window_start_s),
    }
}

/// Everything needed to write a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusParts<'a> {
    pub train: &'a [Instance],
    pub test: &'a [Instance],
    pub transcript_vocab: &'a [String],
    pub chat_vocab: &'a [String],
    pub transcript_tags: &'a [String],
    pub chat_tags: &'a [String],
    pub seed: Option<u64>,
    pub generator: Option<SyntheticConfig>,
}

impl CorpusParts<'_> {
    pub fn manifest(&self) -> CorpusManifest {
        let all: Vec<&Instance> = self.train.iter().chain(self.test).collect();
        let mel_bins = all.first().map_or(0, |i| i.audio[0].len());
        let mut joined = self.train.to_vec();
        joined.extend_from_slice(self.test);
        CorpusManifest {
            seed: self.seed,
            train_counts: label_counts(self.train),
            test_counts: label_counts(self.test),
            transcript_vocab_size: self.transcript_vocab.len(),
            chat_vocab_size: self.chat_vocab.len(),
            transcript_tag_count: self.transcript_tags.len(),
            chat_tag_count: self.chat_tags.len(),
            mel_bins,
            window_stats: window_stats(&joined),
            generator: self.generator.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<CorpusManifest> {
        let mut seen = std::collections::HashSet::new();
        for i in self.train.iter().chain(self.test) {
            if !seen.insert(i.id.as_str()) {
                return Err(Error::Data(format!("duplicate instance id `{}`", i.id)));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(TRAIN_FILE), self.train)?;
        write_jsonl(&dir.join(TEST_FILE), self.test)?;
        write_lines(&dir.join(TRANSCRIPT_VOCAB_FILE), self.transcript_vocab)?;
        write_lines(&dir.join(CHAT_VOCAB_FILE), self.chat_vocab)?;
        write_lines(&dir.join(TRANSCRIPT_TAGS_FILE), self.transcript_tags)?;
        write_lines(&dir.join(CHAT_TAGS_FILE), self.chat_tags)?;
        let manifest = self.manifest();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn write_synthetic(dir: &Path, corpus: &SyntheticCorpus, cfg: &SyntheticConfig) -> Result<CorpusManifest> {
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    CorpusParts {
        train: &corpus.train,
        test: &corpus.test,
        transcript_vocab: &corpus.transcript_vocab.symbols,
        chat_vocab: &corpus.chat_vocab.symbols,
        transcript_tags: &strings(TRANSCRIPT_TAGS),
        chat_tags: &strings(CHAT_TAGS),
        seed: Some(cfg.seed),
        generator: Some(cfg.clone()),
    }
    .write(dir)
}

pub fn write_jsonl(path: &Path, xs: &[Instance]) -> Result<()> {
    let mut buf = Vec::new();
    for x in xs {
        serde_json::to_writer(&mut buf, x)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads one validated instance per non-blank line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let inst: Instance = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        inst.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

/// A loaded corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub manifest: CorpusManifest,
    pub transcript_tags: Vec<String>,
    pub chat_tags: Vec<String>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        let corpus = Self {
            train: load_corpus(dir.join(TRAIN_FILE))?,
            test: load_corpus(dir.join(TEST_FILE))?,
            transcript_tags: read_lines(&dir.join(TRANSCRIPT_TAGS_FILE))?,
            chat_tags: read_lines(&dir.join(CHAT_TAGS_FILE))?,
            manifest,
            dir,
        };
        corpus.check_ids()?;
        Ok(corpus)
    }

    /// Verifies every id fits the declared vocabularies.
    pub fn check_ids(&self) -> Result<()> {
        let m = &self.manifest;
        for i in self.train.iter().chain(&self.test) {
            let out_of = |xs: &[usize], n: usize| xs.iter().any(|&x| x >= n);
            if out_of(&i.transcript_tokens, m.transcript_vocab_size)
                || out_of(&i.chat_tokens, m.chat_vocab_size)
                || out_of(&i.transcript_tags, m.transcript_tag_count)
                || out_of(&i.chat_tags, m.chat_tag_count)
            {
                return Err(Error::Data(format!(
                    "instance {} has ids outside the corpus vocabularies",
                    i.id
                )));
            }
            if i.audio[0].len() != m.mel_bins {
                return Err(Error::Data(format!(
                    "instance {} audio width differs from manifest",
                    i.id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate;

    #[test]
    fn round_trip_and_determinism() {
        let cfg = SyntheticConfig {
            n_train: 30,
            n_test: 10,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synthetic(a.path(), &corpus, &cfg).unwrap();
        write_synthetic(b.path(), &generate(&cfg).unwrap(), &cfg).unwrap();
        for f in [
            TRAIN_FILE,
            TEST_FILE,
            MANIFEST_FILE,
            TRANSCRIPT_VOCAB_FILE,
            CHAT_TAGS_FILE,
        ] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let loaded = Corpus::load(a.path()).unwrap();
        assert_eq!(loaded.train, corpus.train);
        assert_eq!(loaded.test, corpus.test);
        assert_eq!(loaded.manifest.train_counts.values().sum::<usize>(), 30);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","window_start_s":0.0,"window_end_s":1.0,"label":"KILL","transcript_tokens":[2],"transcript_tags":[1],"chat_tokens":[3],"chat_tags":[1],"audio":[[0.0]]}"#;
        let short = good.replace(r#""transcript_tokens":[2]"#, r#""transcript_tokens":[2,4]"#);
        fs::write(&path, format!("{good}\n{short}\n")).unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }
}
