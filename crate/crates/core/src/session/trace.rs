//! Interaction trace files.
//!
//! One event per line, `pts kind payload`:
//!
//! ```text
//! # comments and blank lines are ignored
//! 0 prompt a person greets the camera
//! 0 audio <base64 of little-endian f32 PCM at 16 kHz>
//! 10 end
//! ```
//!
//! Events must be sorted by `pts` and the trace must contain exactly one `end`,
//! which is its last event.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum TraceKind {
    Audio { samples: Vec<f32> },
    Prompt { text: String },
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub pts: f64,
    pub kind: TraceKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("trace line {line} (byte {offset}): {kind}")]
pub struct TraceError {
    pub line: usize,
    pub offset: usize,
    pub kind: TraceErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceErrorKind {
    #[error("trace is not UTF-8")]
    Encoding,
    #[error("malformed event: {0}")]
    Syntax(String),
    #[error("pts {0} is earlier than the previous event")]
    Unsorted(String),
    #[error("missing end event")]
    MissingEnd,
    #[error("event after end")]
    AfterEnd,
    #[error("bad audio payload: {0}")]
    Payload(String),
}

pub fn parse_trace(bytes: &[u8]) -> Result<Vec<TraceEvent>, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count(),
        offset: e.valid_up_to(),
        kind: TraceErrorKind::Encoding,
    })?;
    let mut events = Vec::new();
    let mut offset = 0;
    let mut last_pts = f64::NEG_INFINITY;
    let mut ended = false;
    for (idx, raw) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\n', '\r']);
        let content = line.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let err = |kind| TraceError {
            line: idx + 1,
            offset: line_start,
            kind,
        };
        if ended {
            return Err(err(TraceErrorKind::AfterEnd));
        }
        let mut parts = content.splitn(3, char::is_whitespace);
        let pts_text = parts.next().unwrap_or_default();
        let pts: f64 = pts_text
            .parse()
            .ok()
            .filter(|p: &f64| p.is_finite())
            .ok_or_else(|| err(TraceErrorKind::Syntax(format!("bad pts `{pts_text}`"))))?;
        if pts < last_pts {
            return Err(err(TraceErrorKind::Unsorted(pts_text.to_string())));
        }
        last_pts = pts;
        let kind = parts.next().unwrap_or_default();
        let payload = parts.next().unwrap_or("").trim();
        let kind = match kind {
            "audio" => TraceKind::Audio {
                samples: decode_pcm(payload).map_err(|m| err(TraceErrorKind::Payload(m)))?,
            },
            "prompt" => TraceKind::Prompt {
                text: payload.to_string(),
            },
            "end" => {
                if !payload.is_empty() {
                    return Err(err(TraceErrorKind::Syntax("end takes no payload".into())));
                }
                ended = true;
                TraceKind::End
            }
            other => return Err(err(TraceErrorKind::Syntax(format!("unknown kind `{other}`")))),
        };
        events.push(TraceEvent { pts, kind });
    }
    if !ended {
        return Err(TraceError {
            line: text.lines().count() + 1,
            offset: bytes.len(),
            kind: TraceErrorKind::MissingEnd,
        });
    }
    Ok(events)
}

/// Renders events in the format [`parse_trace`] reads.
pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        match &e.kind {
            TraceKind::Audio { samples } => out.push_str(&format!("{} audio {}\n", e.pts, encode_pcm(samples))),
            TraceKind::Prompt { text } => out.push_str(&format!("{} prompt {}\n", e.pts, text)),
            TraceKind::End => out.push_str(&format!("{} end\n", e.pts)),
        }
    }
    out
}

pub fn encode_pcm(samples: &[f32]) -> String {
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_pcm(payload: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(payload).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 samples", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// A trace with one prompt and `pcm` split into audio events of `piece` samples.
pub fn simple_trace(prompt: &str, pcm: &[f32], piece: usize) -> Vec<TraceEvent> {
    let mut events = vec![TraceEvent {
        pts: 0.0,
        kind: TraceKind::Prompt {
            text: prompt.to_string(),
        },
    }];
    for (i, part) in pcm.chunks(piece.max(1)).enumerate() {
        events.push(TraceEvent {
            pts: (i * piece) as f64 / super::audio::AUDIO_HZ as f64,
            kind: TraceKind::Audio { samples: part.to_vec() },
        });
    }
    events.push(TraceEvent {
        pts: pcm.len() as f64 / super::audio::AUDIO_HZ as f64,
        kind: TraceKind::End,
    });
    events
}
