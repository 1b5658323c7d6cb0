//! Splits continuous chat, audio, and event streams along transcript windows.
//!
//! Windows are half-open `[start, end)`. A chat message or audio frame at
//! time `t` belongs to the window with `start <= t < end`; items falling in
//! gaps between windows are not covered and are dropped. Each window takes
//! the first logged event inside it as its label, or OTHER.

use serde::{Deserialize, Serialize};

use super::instance::{EventLabel, Instance, OUTSIDE_TAG, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatMessage {
    pub t_s: f64,
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioStream {
    pub frame_rate: f64,
    /// Frames × mel bins; frame `i` is stamped `i / frame_rate`.
    pub frames: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedEvent {
    pub timestamp_s: f64,
    pub event: EventLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventLog {
    pub events: Vec<LoggedEvent>,
}

impl EventLog {
    pub fn new(events: Vec<LoggedEvent>) -> Result<Self> {
        let log = Self { events };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.event == EventLabel::Other {
                return Err(Error::Input(format!("event {i}: OTHER is not a loggable event")));
            }
            if !e.timestamp_s.is_finite() {
                return Err(Error::Input(format!("event {i}: non-finite timestamp")));
            }
        }
        if let Some(w) = self.events.windows(2).position(|w| w[1].timestamp_s < w[0].timestamp_s) {
            return Err(Error::Input(format!(
                "event log timestamps decrease at entry {}",
                w + 1
            )));
        }
        Ok(())
    }
}

fn tags_or_outside(tokens: &[usize], tags: Option<&Vec<usize>>, what: &str) -> Result<Vec<usize>> {
    match tags {
        Some(t) if t.len() != tokens.len() => Err(Error::Input(format!(
            "{what}: {} tags for {} tokens",
            t.len(),
            tokens.len()
        ))),
        Some(t) => Ok(t.clone()),
        None => Ok(vec![OUTSIDE_TAG; tokens.len()]),
    }
}

/// Index of the window owning time `t`, if any.
fn owner(windows: &[TranscriptWindow], t: f64) -> Option<usize> {
    let idx = windows.partition_point(|w| w.start_s <= t);
    let w = idx.checked_sub(1)?;
    (t < windows[w].end_s).then_some(w)
}

pub fn segment(
    windows: &[TranscriptWindow],
    chat: &[ChatMessage],
    audio: &AudioStream,
    events: &EventLog,
) -> Result<Vec<Instance>> {
    for (i, w) in windows.iter().enumerate() {
        if !(w.start_s.is_finite() && w.end_s.is_finite() && w.start_s < w.end_s) {
            return Err(Error::Input(format!("transcript window {i} has invalid span")));
        }
        if i > 0 && windows[i - 1].end_s > w.start_s {
            return Err(Error::Input(format!(
                "transcript windows {} and {i} overlap or are unsorted",
                i - 1
            )));
        }
    }
    if !(audio.frame_rate > 0.0 && audio.frame_rate.is_finite()) {
        return Err(Error::Input(format!(
            "frame_rate must be positive, got {}",
            audio.frame_rate
        )));
    }
    let mel = audio
        .frames
        .first()
        .map(Vec::len)
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::Input("audio stream has no frames".into()))?;
    if audio.frames.iter().any(|f| f.len() != mel) {
        return Err(Error::Input("audio frames have differing mel widths".into()));
    }
    events.validate()?;

    let mut chat_by_window: Vec<Vec<&ChatMessage>> = vec![Vec::new(); windows.len()];
    for m in chat {
        if let Some(w) = owner(windows, m.t_s) {
            chat_by_window[w].push(m);
        }
    }
    let mut audio_by_window: Vec<Vec<Vec<f64>>> = vec![Vec::new(); windows.len()];
    for (i, frame) in audio.frames.iter().enumerate() {
        if let Some(w) = owner(windows, i as f64 / audio.frame_rate) {
            audio_by_window[w].push(frame.clone());
        }
    }

    let mut out = Vec::with_capacity(windows.len());
    for (i, (w, (msgs, frames))) in windows
        .iter()
        .zip(chat_by_window.into_iter().zip(audio_by_window))
        .enumerate()
    {
        let mut transcript_tokens = w.tokens.clone();
        let mut transcript_tags = tags_or_outside(&w.tokens, w.tags.as_ref(), &format!("window {i}"))?;
        if transcript_tokens.is_empty() {
            transcript_tokens.push(PAD);
            transcript_tags.push(PAD);
        }

        let mut msgs = msgs;
        msgs.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
        let mut chat_tokens = Vec::new();
        let mut chat_tags = Vec::new();
        for m in msgs {
            chat_tags.extend(tags_or_outside(&m.tokens, m.tags.as_ref(), "chat message")?);
            chat_tokens.extend_from_slice(&m.tokens);
        }
        if chat_tokens.is_empty() {
            chat_tokens.push(PAD);
            chat_tags.push(PAD);
        }

        let audio = if frames.is_empty() {
            vec![vec![0.0; mel]]
        } else {
            frames
        };

        let first = events.events.partition_point(|e| e.timestamp_s < w.start_s);
        let label = events
            .events
            .get(first)
            .filter(|e| e.timestamp_s < w.end_s)
            .map_or(EventLabel::Other, |e| e.event);

        out.push(Instance {
            id: format!("win-{i:06}"),
            window_start_s: w.start_s,
            window_end_s: w.end_s,
            label,
            transcript_tokens,
            transcript_tags,
            chat_tokens,
            chat_tags,
            audio,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(start: f64, end: f64) -> TranscriptWindow {
        TranscriptWindow {
            start_s: start,
            end_s: end,
            tokens: vec![5],
            tags: None,
        }
    }

    fn audio() -> AudioStream {
        AudioStream {
            frame_rate: 1.0,
            frames: (0..20).map(|i| vec![i as f64; 2]).collect(),
        }
    }

    fn ev(t: f64, e: EventLabel) -> LoggedEvent {
        LoggedEvent {
            timestamp_s: t,
            event: e,
        }
    }

    #[test]
    fn event_on_boundary_belongs_to_later_window() {
        let windows = [win(0.0, 10.0), win(10.0, 20.0)];
        let log = EventLog::new(vec![ev(10.0, EventLabel::Kill)]).unwrap();
        let out = segment(&windows, &[], &audio(), &log).unwrap();
        assert_eq!(out[0].label, EventLabel::Other);
        assert_eq!(out[1].label, EventLabel::Kill);
    }

    #[test]
    fn no_events_means_other() {
        let windows = [win(0.0, 10.0), win(10.0, 20.0)];
        let out = segment(&windows, &[], &audio(), &EventLog::default()).unwrap();
        assert!(out.iter().all(|i| i.label == EventLabel::Other));
    }

    #[test]
    fn first_event_wins() {
        let windows = [win(0.0, 10.0)];
        let log = EventLog::new(vec![ev(2.0, EventLabel::Tower), ev(3.0, EventLabel::Kill)]).unwrap();
        let out = segment(&windows, &[], &audio(), &log).unwrap();
        assert_eq!(out[0].label, EventLabel::Tower);
    }

    #[test]
    fn chat_just_before_boundary() {
        let windows = [win(0.0, 10.0), win(10.0, 20.0)];
        let chat = [ChatMessage {
            t_s: 9.999,
            tokens: vec![7, 8],
            tags: Some(vec![2, 3]),
        }];
        let out = segment(&windows, &chat, &audio(), &EventLog::default()).unwrap();
        assert_eq!(out[0].chat_tokens, vec![7, 8]);
        assert_eq!(out[0].chat_tags, vec![2, 3]);
        assert_eq!(out[1].chat_tokens, vec![PAD]);
        assert_eq!(out[1].chat_tags, vec![PAD]);
    }

    #[test]
    fn audio_frames_split_half_open() {
        let windows = [win(0.0, 10.0), win(10.0, 20.0), win(25.0, 30.0)];
        let out = segment(&windows, &[], &audio(), &EventLog::default()).unwrap();
        assert_eq!(out[0].audio.len(), 10);
        assert_eq!(out[1].audio[0], vec![10.0, 10.0]);
        assert_eq!(out[2].audio, vec![vec![0.0, 0.0]]);
        assert!(out.iter().all(|i| i.validate().is_ok()));
    }

    #[test]
    fn input_errors() {
        let overlapping = [win(0.0, 10.0), win(5.0, 20.0)];
        assert!(matches!(
            segment(&overlapping, &[], &audio(), &EventLog::default()),
            Err(Error::Input(_))
        ));
        let bad_rate = AudioStream {
            frame_rate: 0.0,
            ..audio()
        };
        assert!(segment(&[win(0.0, 1.0)], &[], &bad_rate, &EventLog::default()).is_err());
        assert!(EventLog::new(vec![ev(2.0, EventLabel::Kill), ev(1.0, EventLabel::Kill)]).is_err());
    }
}
