use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved padding id shared by token and tag vocabularies.
pub const PAD: usize = 0;
/// Tag id for "no entity / no emote".
pub const OUTSIDE_TAG: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventLabel {
    Kill,
    Dragon,
    Tower,
    Other,
}

impl EventLabel {
    pub const ALL: [EventLabel; 4] = [
        EventLabel::Kill,
        EventLabel::Dragon,
        EventLabel::Tower,
        EventLabel::Other,
    ];
    pub const EVENTS: [EventLabel; 3] = [EventLabel::Kill, EventLabel::Dragon, EventLabel::Tower];

    pub fn name(self) -> &'static str {
        match self {
            EventLabel::Kill => "KILL",
            EventLabel::Dragon => "DRAGON",
            EventLabel::Tower => "TOWER",
            EventLabel::Other => "OTHER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One segmented window with all three modalities and its event label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub label: EventLabel,
    pub transcript_tokens: Vec<usize>,
    pub transcript_tags: Vec<usize>,
    pub chat_tokens: Vec<usize>,
    pub chat_tags: Vec<usize>,
    /// Frames × mel bins.
    pub audio: Vec<Vec<f64>>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("instance {}: {msg}", self.id)));
        if !(self.window_start_s < self.window_end_s) {
            return bad(format!(
                "window start {} not before end {}",
                self.window_start_s, self.window_end_s
            ));
        }
        if self.transcript_tokens.is_empty() || self.chat_tokens.is_empty() || self.audio.is_empty() {
            return bad("empty modality".into());
        }
        if self.transcript_tags.len() != self.transcript_tokens.len() {
            return bad(format!(
                "{} transcript tags for {} tokens",
                self.transcript_tags.len(),
                self.transcript_tokens.len()
            ));
        }
        if self.chat_tags.len() != self.chat_tokens.len() {
            return bad(format!(
                "{} chat tags for {} tokens",
                self.chat_tags.len(),
                self.chat_tokens.len()
            ));
        }
        let mel = self.audio[0].len();
        if mel == 0 || self.audio.iter().any(|f| f.len() != mel) {
            return bad("ragged or empty audio frames".into());
        }
        if self.audio.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite audio value".into());
        }
        Ok(())
    }
}
