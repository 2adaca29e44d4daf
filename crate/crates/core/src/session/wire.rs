//! Length-prefixed binary framing: `u32` LE payload length, one type byte,
//! then the payload.

use thiserror::Error;

/// Length prefix plus type byte.
pub const HEADER_LEN: usize = 5;
/// Largest payload a peer may announce.
pub const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x01,
    Audio = 0x02,
    Prompt = 0x03,
    ChunkOut = 0x04,
    Metrics = 0x05,
    Error = 0x7E,
    End = 0x7F,
}

impl FrameType {
    pub const ALL: [FrameType; 7] = [
        FrameType::Hello,
        FrameType::Audio,
        FrameType::Prompt,
        FrameType::ChunkOut,
        FrameType::Metrics,
        FrameType::Error,
        FrameType::End,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A frame and the number of bytes it occupied.
    Frame(WireFrame, usize),
    /// More bytes are needed; `needed` is the total frame size when known.
    Incomplete { needed: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    /// The frame is well delimited, so a reader can skip `frame_len` bytes.
    #[error("unknown frame type 0x{byte:02x} at offset {offset}")]
    UnknownType { offset: usize, byte: u8, frame_len: usize },
    #[error("payload length {length} at offset {offset} exceeds {max}")]
    LengthOverflow { offset: usize, length: u32, max: u32 },
    #[error("bad {frame:?} payload at offset {offset}: {message}")]
    Payload {
        frame: FrameType,
        offset: usize,
        message: String,
    },
}

pub fn encode_frame(frame: &WireFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&frame.payload);
    out
}

/// Decodes the frame at the start of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, WireError> {
    if bytes.len() < 4 {
        return Ok(Decoded::Incomplete { needed: None });
    }
    let length = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
    if length > MAX_PAYLOAD {
        return Err(WireError::LengthOverflow {
            offset: 0,
            length,
            max: MAX_PAYLOAD,
        });
    }
    let total = HEADER_LEN + length as usize;
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::Incomplete { needed: Some(total) });
    }
    let Some(frame_type) = FrameType::from_byte(bytes[4]) else {
        return Err(WireError::UnknownType {
            offset: 4,
            byte: bytes[4],
            frame_len: total,
        });
    };
    if bytes.len() < total {
        return Ok(Decoded::Incomplete { needed: Some(total) });
    }
    Ok(Decoded::Frame(
        WireFrame {
            frame_type,
            payload: bytes[HEADER_LEN..total].to_vec(),
        },
        total,
    ))
}

/// Emitted chunk as sent to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOut {
    pub chunk_id: u64,
    pub pts_start: f64,
    pub pts_end: f64,
    /// Row-major, `latents_per_chunk * latent_dim` values.
    pub latents: Vec<f32>,
    pub emitted_at: f64,
}

/// Typed view of a frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// `key = value` lines overriding the server configuration.
    Hello {
        overrides: String,
    },
    /// Mono 16 kHz PCM continuing the previous audio.
    Audio {
        samples: Vec<f32>,
    },
    Prompt {
        pts: f64,
        text: String,
    },
    ChunkOut(ChunkOut),
    /// JSON document.
    Metrics {
        json: String,
    },
    Error {
        message: String,
    },
    End {
        pts: Option<f64>,
    },
}

impl Message {
    pub fn to_frame(&self) -> WireFrame {
        let (frame_type, payload) = match self {
            Message::Hello { overrides } => (FrameType::Hello, overrides.as_bytes().to_vec()),
            Message::Audio { samples } => (FrameType::Audio, f32_bytes(samples)),
            Message::Prompt { pts, text } => {
                let mut p = pts.to_le_bytes().to_vec();
                p.extend_from_slice(text.as_bytes());
                (FrameType::Prompt, p)
            }
            Message::ChunkOut(c) => {
                let mut p = Vec::with_capacity(32 + 4 * c.latents.len());
                p.extend_from_slice(&c.chunk_id.to_le_bytes());
                p.extend_from_slice(&c.pts_start.to_le_bytes());
                p.extend_from_slice(&c.pts_end.to_le_bytes());
                p.extend_from_slice(&f32_bytes(&c.latents));
                p.extend_from_slice(&c.emitted_at.to_le_bytes());
                (FrameType::ChunkOut, p)
            }
            Message::Metrics { json } => (FrameType::Metrics, json.as_bytes().to_vec()),
            Message::Error { message } => (FrameType::Error, message.as_bytes().to_vec()),
            Message::End { pts } => (
                FrameType::End,
                pts.map(|p| p.to_le_bytes().to_vec()).unwrap_or_default(),
            ),
        };
        WireFrame { frame_type, payload }
    }

    pub fn from_frame(frame: &WireFrame) -> Result<Self, WireError> {
        let p = &frame.payload;
        let bad = |offset: usize, message: &str| WireError::Payload {
            frame: frame.frame_type,
            offset: HEADER_LEN + offset,
            message: message.to_string(),
        };
        let text = |bytes: &[u8], offset: usize| {
            String::from_utf8(bytes.to_vec()).map_err(|e| bad(offset + e.utf8_error().valid_up_to(), "invalid UTF-8"))
        };
        Ok(match frame.frame_type {
            FrameType::Hello => Message::Hello { overrides: text(p, 0)? },
            FrameType::Audio => Message::Audio {
                samples: read_f32s(p).ok_or_else(|| bad(p.len() / 4 * 4, "length not a multiple of 4"))?,
            },
            FrameType::Prompt => {
                if p.len() < 8 {
                    return Err(bad(p.len(), "missing pts"));
                }
                Message::Prompt {
                    pts: f64::from_le_bytes(p[..8].try_into().expect("8 bytes")),
                    text: text(&p[8..], 8)?,
                }
            }
            FrameType::ChunkOut => {
                if p.len() < 32 {
                    return Err(bad(p.len(), "shorter than the fixed fields"));
                }
                let f64_at = |i: usize| f64::from_le_bytes(p[i..i + 8].try_into().expect("8 bytes"));
                let body = &p[24..p.len() - 8];
                Message::ChunkOut(ChunkOut {
                    chunk_id: u64::from_le_bytes(p[..8].try_into().expect("8 bytes")),
                    pts_start: f64_at(8),
                    pts_end: f64_at(16),
                    latents: read_f32s(body).ok_or_else(|| bad(24, "latent bytes not a multiple of 4"))?,
                    emitted_at: f64_at(p.len() - 8),
                })
            }
            FrameType::Metrics => Message::Metrics { json: text(p, 0)? },
            FrameType::Error => Message::Error { message: text(p, 0)? },
            FrameType::End => match p.len() {
                0 => Message::End { pts: None },
                8 => Message::End {
                    pts: Some(f64::from_le_bytes(p[..].try_into().expect("8 bytes"))),
                },
                n => return Err(bad(0, &format!("End payload must be 0 or 8 bytes, got {n}"))),
            },
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_frame(&self.to_frame())
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    bytes.len().is_multiple_of(4).then(|| {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    })
}

/// Accumulates stream bytes and yields complete frames.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    consumed: usize,
    skip: usize,
}

impl FrameReader {
    pub fn push(&mut self, bytes: &[u8]) {
        let dropped = self.skip.min(bytes.len());
        self.skip -= dropped;
        self.consumed += dropped;
        self.buf.extend_from_slice(&bytes[dropped..]);
    }

    /// Next complete frame. Error offsets are relative to the whole stream.
    /// An unknown type is skipped so the caller can report it and continue.
    pub fn next_frame(&mut self) -> Result<Option<WireFrame>, WireError> {
        match decode_frame(&self.buf) {
            Ok(Decoded::Frame(frame, used)) => {
                self.advance(used);
                Ok(Some(frame))
            }
            Ok(Decoded::Incomplete { .. }) => Ok(None),
            Err(WireError::UnknownType {
                offset,
                byte,
                frame_len,
            }) => {
                let base = self.consumed;
                if self.buf.len() >= frame_len {
                    self.advance(frame_len);
                } else {
                    self.skip = frame_len - self.buf.len();
                    self.advance(self.buf.len());
                }
                Err(WireError::UnknownType {
                    offset: base + offset,
                    byte,
                    frame_len,
                })
            }
            Err(WireError::LengthOverflow { offset, length, max }) => Err(WireError::LengthOverflow {
                offset: self.consumed + offset,
                length,
                max,
            }),
            Err(e) => Err(e),
        }
    }

    fn advance(&mut self, n: usize) {
        self.buf.drain(..n);
        self.consumed += n;
    }
}
