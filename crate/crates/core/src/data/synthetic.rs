//! Synthetic livestream corpus with planted, modality-specific event cues.
//!
//! Each label leaves its strongest trace in a different modality:
//!
//! | label  | transcript                 | chat          | audio                     |
//! |--------|----------------------------|---------------|---------------------------|
//! | KILL   | kill terms + champions     | hype emotes   | mild low-band burst       |
//! | DRAGON | objective terms            | -             | -                         |
//! | TOWER  | rare structure terms       | -             | high-band energy motif    |
//! | OTHER  | filler, occasional decoys  | mixed emotes  | background noise          |
//!
//! Token-level tags follow each token's vocabulary category, which gives the
//! chat and transcript teachers their tagging tasks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::instance::{EventLabel, Instance, OUTSIDE_TAG, PAD};
use crate::error::{Error, Result};

/// Train counts per label in the source corpus: KILL, DRAGON, TOWER, OTHER.
pub const SOURCE_TRAIN_COUNTS: [usize; 4] = [2647, 1659, 1233, 21357];

/// Label probabilities in `EventLabel::ALL` order, proportional to [`SOURCE_TRAIN_COUNTS`].
pub fn source_label_probs() -> [f64; 4] {
    let total: usize = SOURCE_TRAIN_COUNTS.iter().sum();
    SOURCE_TRAIN_COUNTS.map(|c| c as f64 / total as f64)
}

const TRANSCRIPT_FILLER: &[&str] = &[
    "the", "and", "he", "they", "is", "going", "in", "on", "top", "mid", "bot", "jungle", "lane", "side", "wave",
    "gold", "lead", "looks", "now", "with", "a", "for", "team", "blue", "red", "ward", "vision", "farm", "back",
    "push", "play", "nice", "so", "right", "here", "really",
];
const CHAMPIONS: &[&str] = &[
    "ahri", "garen", "jinx", "lux", "thresh", "leesin", "azir", "orianna", "kaisa", "nautilus",
];
const KILL_TERMS: &[&str] = &["kill", "slain", "takedown", "shutdown", "double", "executes"];
const OBJECTIVE_TERMS: &[&str] = &["dragon", "drake", "infernal", "ocean", "cloud", "elder", "soul"];
const STRUCTURE_TERMS: &[&str] = &["tower", "turret", "plates", "inhibitor", "outer", "inner"];

const CHAT_FILLER: &[&str] = &[
    "lol", "gg", "what", "is", "this", "omg", "no", "yes", "go", "team", "why", "bro", "ez", "wp", "ff", "clean",
    "wow", "chat", "mid", "diff",
];
const HYPE_EMOTES: &[&str] = &["PogChamp", "Pog", "POGGERS", "LETSGO", "Kreygasm"];
const LAUGH_EMOTES: &[&str] = &["KEKW", "LUL", "OMEGALUL"];
const SAD_EMOTES: &[&str] = &["BibleThump", "Sadge", "FeelsBadMan"];
const NEUTRAL_EMOTES: &[&str] = &["Kappa", "monkaS", "4Head"];

pub const TRANSCRIPT_TAGS: &[&str] = &["<pad>", "O", "CHAMPION", "KILL_TERM", "OBJECTIVE", "STRUCTURE"];
pub const CHAT_TAGS: &[&str] = &["<pad>", "O", "HYPE", "LAUGH", "SAD", "NEUTRAL"];

/// Symbol list where line number is id, with a tag id per symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub symbols: Vec<String>,
    tag_of: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl Vocab {
    fn build(groups: &[(&[&str], usize)]) -> Self {
        let mut symbols = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut tag_of = vec![PAD, OUTSIDE_TAG];
        let mut ids = Vec::new();
        for (words, tag) in groups {
            let start = symbols.len();
            symbols.extend(words.iter().map(|w| w.to_string()));
            tag_of.extend(std::iter::repeat_n(*tag, words.len()));
            ids.push((start..symbols.len()).collect());
        }
        Self {
            symbols,
            tag_of,
            groups: ids,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn tag(&self, token: usize) -> usize {
        self.tag_of[token]
    }

    fn pick(&self, group: usize, rng: &mut impl Rng) -> usize {
        *self.groups[group].choose(rng).expect("non-empty group")
    }
}

pub fn transcript_vocab() -> Vocab {
    Vocab::build(&[
        (TRANSCRIPT_FILLER, 1),
        (CHAMPIONS, 2),
        (KILL_TERMS, 3),
        (OBJECTIVE_TERMS, 4),
        (STRUCTURE_TERMS, 5),
    ])
}

pub fn chat_vocab() -> Vocab {
    Vocab::build(&[
        (CHAT_FILLER, 1),
        (HYPE_EMOTES, 2),
        (LAUGH_EMOTES, 3),
        (SAD_EMOTES, 4),
        (NEUTRAL_EMOTES, 5),
    ])
}

// Group indices into the vocab builders above.
const T_FILLER: usize = 0;
const T_CHAMP: usize = 1;
const T_KILL: usize = 2;
const T_OBJECTIVE: usize = 3;
const T_STRUCTURE: usize = 4;
const C_FILLER: usize = 0;
const C_HYPE: usize = 1;
const C_LAUGH: usize = 2;
const C_SAD: usize = 3;
const C_NEUTRAL: usize = 4;

/// Cue strengths. Probabilities are per planted slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Difficulty {
    /// Chance that a label's primary cue is planted at all.
    pub signal_rate: f64,
    /// Chance that a window carries a decoy cue from another label.
    pub decoy_rate: f64,
    /// Chance that a TOWER window mentions a structure term in the transcript.
    pub tower_transcript_rate: f64,
    /// Amplitude of the TOWER audio motif over unit-variance background.
    pub audio_signal: f64,
    pub audio_noise: f64,
}

impl Default for Difficulty {
    fn default() -> Self {
        Self {
            signal_rate: 0.9,
            decoy_rate: 0.1,
            tower_transcript_rate: 0.35,
            audio_signal: 1.5,
            audio_noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// In `EventLabel::ALL` order.
    pub label_probs: [f64; 4],
    pub difficulty: Difficulty,
    pub window_s: f64,
    pub transcript_len: (usize, usize),
    pub chat_len: (usize, usize),
    pub frames_per_window: usize,
    pub mel_bins: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 5000,
            n_test: 500,
            label_probs: source_label_probs(),
            difficulty: Difficulty::default(),
            window_s: 10.0,
            transcript_len: (8, 16),
            chat_len: (4, 12),
            frames_per_window: 16,
            mel_bins: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.label_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.label_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("label_probs must sum to 1, got {sum}")));
        }
        let (tl, th) = self.transcript_len;
        let (cl, ch) = self.chat_len;
        if tl < 3 || th < tl || ch < cl || self.frames_per_window < 4 || self.mel_bins < 4 {
            return Err(Error::Config(
                "synthetic lengths too small (transcript >= 3 tokens, >= 4 frames, >= 4 mel bins)".into(),
            ));
        }
        if !(self.window_s > 0.0) {
            return Err(Error::Config("window_s must be positive".into()));
        }
        Ok(())
    }
}

fn sample_label(probs: &[f64; 4], rng: &mut impl Rng) -> EventLabel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, l) in probs.iter().zip(EventLabel::ALL) {
        acc += p;
        if u < acc {
            return l;
        }
    }
    // Rounding slack lands on the last label with non-zero mass.
    EventLabel::ALL
        .into_iter()
        .zip(probs)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map_or(EventLabel::Other, |(l, _)| l)
}

/// Adds `amp` to `bands` over `len` consecutive frames at a random offset.
fn burst(a: &mut [Vec<f64>], bands: std::ops::Range<usize>, len: usize, amp: f64, rng: &mut impl Rng) {
    let start = rng.random_range(0..=a.len() - len);
    for row in &mut a[start..start + len] {
        for v in &mut row[bands.clone()] {
            *v += amp;
        }
    }
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    tv: Vocab,
    cv: Vocab,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn plant(tokens: &mut [usize], token: usize, rng: &mut impl Rng) {
        let at = rng.random_range(0..tokens.len());
        tokens[at] = token;
    }

    fn transcript(&self, label: EventLabel, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let d = &self.cfg.difficulty;
        let (lo, hi) = self.cfg.transcript_len;
        let n = rng.random_range(lo..=hi);
        let mut t: Vec<usize> = (0..n).map(|_| self.tv.pick(T_FILLER, rng)).collect();
        if rng.random_bool(0.5) {
            Self::plant(&mut t, self.tv.pick(T_CHAMP, rng), rng);
        }
        match label {
            EventLabel::Kill => {
                if rng.random_bool(d.signal_rate) {
                    Self::plant(&mut t, self.tv.pick(T_KILL, rng), rng);
                    Self::plant(&mut t, self.tv.pick(T_CHAMP, rng), rng);
                }
            }
            EventLabel::Dragon => {
                if rng.random_bool(d.signal_rate) {
                    Self::plant(&mut t, self.tv.pick(T_OBJECTIVE, rng), rng);
                    if rng.random_bool(0.5) {
                        Self::plant(&mut t, self.tv.pick(T_OBJECTIVE, rng), rng);
                    }
                }
            }
            EventLabel::Tower => {
                if rng.random_bool(d.tower_transcript_rate) {
                    Self::plant(&mut t, self.tv.pick(T_STRUCTURE, rng), rng);
                }
            }
            EventLabel::Other => {}
        }
        if rng.random_bool(d.decoy_rate) {
            let group = *[T_KILL, T_OBJECTIVE, T_STRUCTURE].choose(rng).expect("non-empty");
            Self::plant(&mut t, self.tv.pick(group, rng), rng);
        }
        t
    }

    fn chat(&self, label: EventLabel, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let d = &self.cfg.difficulty;
        let (lo, hi) = self.cfg.chat_len;
        let n = rng.random_range(lo..=hi);
        if n == 0 {
            return Vec::new();
        }
        let background = [C_LAUGH, C_SAD, C_NEUTRAL];
        let mut c: Vec<usize> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    let g = *background.choose(rng).expect("non-empty");
                    self.cv.pick(g, rng)
                } else {
                    self.cv.pick(C_FILLER, rng)
                }
            })
            .collect();
        if label == EventLabel::Kill && rng.random_bool(d.signal_rate) {
            let k = (n / 2).max(1);
            for _ in 0..k {
                Self::plant(&mut c, self.cv.pick(C_HYPE, rng), rng);
            }
        } else if rng.random_bool(d.decoy_rate) {
            Self::plant(&mut c, self.cv.pick(C_HYPE, rng), rng);
        }
        c
    }

    fn audio(&self, label: EventLabel, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let d = &self.cfg.difficulty;
        let (f, m) = (self.cfg.frames_per_window, self.cfg.mel_bins);
        let level: f64 = rng.random_range(-0.5..0.5);
        let mut a: Vec<Vec<f64>> = (0..f)
            .map(|_| (0..m).map(|_| level + d.audio_noise * self.noise.sample(rng)).collect())
            .collect();
        let high = m - m / 4 - 1..m;
        let low = 0..m / 4 + 1;
        match label {
            EventLabel::Tower if rng.random_bool(d.signal_rate) => burst(&mut a, high.clone(), 4, d.audio_signal, rng),
            EventLabel::Kill if rng.random_bool(0.6) => burst(&mut a, low, 3, 0.7 * d.audio_signal, rng),
            _ => {}
        }
        if label != EventLabel::Tower && rng.random_bool(d.decoy_rate) {
            burst(&mut a, high, 2, 0.5 * d.audio_signal, rng);
        }
        for v in a.iter_mut().flatten() {
            *v = (*v * 1e4).round() / 1e4;
        }
        a
    }

    fn instance(&self, id: String, index: usize, rng: &mut ChaCha8Rng) -> Instance {
        let label = sample_label(&self.cfg.label_probs, rng);
        let transcript_tokens = self.transcript(label, rng);
        let mut chat_tokens = self.chat(label, rng);
        if chat_tokens.is_empty() {
            chat_tokens.push(PAD);
        }
        let audio = self.audio(label, rng);
        let start = index as f64 * self.cfg.window_s;
        Instance {
            id,
            window_start_s: start,
            window_end_s: start + self.cfg.window_s,
            label,
            transcript_tags: transcript_tokens.iter().map(|&t| self.tv.tag(t)).collect(),
            transcript_tokens,
            chat_tags: chat_tokens.iter().map(|&t| self.cv.tag(t)).collect(),
            chat_tokens,
            audio,
        }
    }
}

/// Generated splits plus the vocabularies they index.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub transcript_vocab: Vocab,
    pub chat_vocab: Vocab,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let gen = Generator {
        cfg,
        tv: transcript_vocab(),
        cv: chat_vocab(),
        noise: Normal::new(0.0, 1.0).expect("valid normal"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.n_train)
        .map(|i| gen.instance(format!("train-{i:06}"), i, &mut rng))
        .collect();
    let test = (0..cfg.n_test)
        .map(|i| gen.instance(format!("test-{i:06}"), cfg.n_train + i, &mut rng))
        .collect();
    Ok(SyntheticCorpus {
        train,
        test,
        transcript_vocab: gen.tv,
        chat_vocab: gen.cv,
    })
}
