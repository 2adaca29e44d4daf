//! The fixed-size stream buffer: reference latent, long-term memory queue,
//! short-term memory, and the denoising stream.
//!
//! Chunks enter the stream at the top of the noise ladder, move one rung per
//! denoiser call, and leave from the head once clean. Promotion cascades the
//! head into short-term memory and the previous short-term entry into the
//! long-term queue, evicting the oldest long-term entry when full.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SessionConfig;
use crate::ladder::NoiseLadder;
use crate::types::{Chunk, Latent};

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("reference latent has dim {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("denoising stream is full ({capacity} chunks)")]
    Capacity { capacity: usize },
    #[error("chunk {chunk_id} admitted at t={t}, expected pure noise")]
    Schedule { chunk_id: u64, t: f64 },
    #[error("chunk {got} admitted, expected {expected}")]
    Sequencing { expected: u64, got: u64 },
    #[error("invalid chunk: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
}

/// Position of a group in the attention layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupTag {
    Reference,
    LongTerm(usize),
    ShortTerm,
    Stream(usize),
}

impl GroupTag {
    pub fn is_stream(&self) -> bool {
        matches!(self, GroupTag::Stream(_))
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupTag::Reference => write!(f, "Ref"),
            GroupTag::LongTerm(i) => write!(f, "LT{i}"),
            GroupTag::ShortTerm => write!(f, "ST"),
            GroupTag::Stream(j) => write!(f, "S{j}"),
        }
    }
}

impl FromStr for GroupTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let index = |rest: &str| rest.parse::<usize>().map_err(|_| format!("bad group index in `{s}`"));
        match s {
            "Ref" | "Reference" | "R" => Ok(GroupTag::Reference),
            "ST" | "ShortTerm" => Ok(GroupTag::ShortTerm),
            _ => {
                if let Some(rest) = s.strip_prefix("LT") {
                    Ok(GroupTag::LongTerm(index(rest)?))
                } else if let Some(rest) = s.strip_prefix('S') {
                    Ok(GroupTag::Stream(index(rest)?))
                } else {
                    Err(format!("unknown group tag `{s}`"))
                }
            }
        }
    }
}

/// Parses a comma separated layout such as `Ref,LT0,ST,S0,S1`.
pub fn parse_layout(spec: &str) -> Result<Vec<GroupTag>, String> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Immutable snapshot of the buffer handed to one denoiser call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextView {
    pub reference: Latent,
    /// Oldest first.
    pub long_term: Vec<Chunk>,
    pub short_term: Option<Chunk>,
    /// Cleanest first.
    pub stream: Vec<Chunk>,
    pub layout: Vec<GroupTag>,
}

impl ContextView {
    /// A view holding only the reference and the given stream chunks.
    pub fn reference_only(reference: Latent, stream: Vec<Chunk>) -> Self {
        let mut layout = vec![GroupTag::Reference];
        layout.extend((0..stream.len()).map(GroupTag::Stream));
        Self {
            reference,
            long_term: Vec::new(),
            short_term: None,
            stream,
            layout,
        }
    }

    /// Layout for context groups only (reference, long-term, short-term).
    pub fn context_layout(&self) -> Vec<GroupTag> {
        self.layout.iter().copied().filter(|g| !g.is_stream()).collect()
    }
}

/// Four-part stream buffer. Single writer; readers use [`MemoryBank::snapshot_context`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    reference: Latent,
    long_term: VecDeque<Chunk>,
    short_term: Option<Chunk>,
    stream: VecDeque<Chunk>,
    long_term_capacity: usize,
    stream_capacity: usize,
    next_chunk_id: u64,
    config: SessionConfig,
}

impl MemoryBank {
    pub fn init(reference: Latent, config: &SessionConfig) -> Result<Self, BufferError> {
        if reference.data.len() != config.latent_dim {
            return Err(BufferError::DimensionMismatch {
                expected: config.latent_dim,
                got: reference.data.len(),
            });
        }
        Ok(Self {
            reference,
            long_term: VecDeque::with_capacity(config.long_term_capacity),
            short_term: None,
            stream: VecDeque::with_capacity(config.stream_chunks),
            long_term_capacity: config.long_term_capacity,
            stream_capacity: config.stream_chunks,
            next_chunk_id: 0,
            config: config.clone(),
        })
    }

    pub fn reference(&self) -> &Latent {
        &self.reference
    }

    pub fn long_term(&self) -> impl ExactSizeIterator<Item = &Chunk> {
        self.long_term.iter()
    }

    pub fn short_term(&self) -> Option<&Chunk> {
        self.short_term.as_ref()
    }

    pub fn stream(&self) -> impl ExactSizeIterator<Item = &Chunk> {
        self.stream.iter()
    }

    pub fn stream_len(&self) -> usize {
        self.stream.len()
    }

    pub fn long_term_len(&self) -> usize {
        self.long_term.len()
    }

    pub fn stream_is_full(&self) -> bool {
        self.stream.len() >= self.stream_capacity
    }

    /// Id the next admitted chunk must carry.
    pub fn next_chunk_id(&self) -> u64 {
        self.next_chunk_id
    }

    pub fn admit_noise_chunk(&mut self, chunk: Chunk, ladder: &NoiseLadder) -> Result<(), BufferError> {
        if self.stream_is_full() {
            return Err(BufferError::Capacity {
                capacity: self.stream_capacity,
            });
        }
        if chunk.noise_level.ladder_index != ladder.depth() || chunk.noise_level.t != 1.0 {
            return Err(BufferError::Schedule {
                chunk_id: chunk.chunk_id,
                t: chunk.noise_level.t,
            });
        }
        if chunk.chunk_id != self.next_chunk_id {
            return Err(BufferError::Sequencing {
                expected: self.next_chunk_id,
                got: chunk.chunk_id,
            });
        }
        chunk.check_shape(&self.config).map_err(BufferError::Shape)?;
        if let Some(tail) = self.stream.back() {
            if tail.noise_level.ladder_index >= chunk.noise_level.ladder_index {
                return Err(BufferError::State(format!(
                    "stream tail {} has not left the top of the ladder",
                    tail.chunk_id
                )));
            }
        }
        self.next_chunk_id += 1;
        self.stream.push_back(chunk);
        Ok(())
    }

    /// Writes back the result of one denoiser call: same chunks, each one rung lower.
    pub fn apply_step(&mut self, updated: Vec<Chunk>) -> Result<(), BufferError> {
        if updated.len() != self.stream.len() {
            return Err(BufferError::State(format!(
                "step returned {} chunks for a stream of {}",
                updated.len(),
                self.stream.len()
            )));
        }
        for (old, new) in self.stream.iter().zip(&updated) {
            if old.chunk_id != new.chunk_id || old.noise_level.ladder_index != new.noise_level.ladder_index + 1 {
                return Err(BufferError::State(format!(
                    "chunk {} must advance exactly one rung (from index {} to {})",
                    old.chunk_id, old.noise_level.ladder_index, new.noise_level.ladder_index
                )));
            }
            new.check_shape(&self.config).map_err(BufferError::Shape)?;
        }
        self.stream = updated.into();
        Ok(())
    }

    pub fn promote_clean_chunk(&mut self) -> Result<Chunk, BufferError> {
        let head = self
            .stream
            .front()
            .ok_or_else(|| BufferError::State("promote on empty stream".into()))?;
        if !head.is_clean() {
            return Err(BufferError::State(format!(
                "stream head {} is at t={}, not clean",
                head.chunk_id, head.noise_level.t
            )));
        }
        let head = self.stream.pop_front().expect("checked above");
        if let Some(previous) = self.short_term.take() {
            if self.long_term.len() == self.long_term_capacity {
                self.long_term.pop_front();
            }
            self.long_term.push_back(previous);
        }
        self.short_term = Some(head.clone());
        Ok(head)
    }

    pub fn replace_short_term(&mut self, chunk: Chunk) -> Result<(), BufferError> {
        let current = self
            .short_term
            .as_ref()
            .ok_or_else(|| BufferError::State("no short-term memory to replace".into()))?;
        if current.chunk_id != chunk.chunk_id {
            return Err(BufferError::State(format!(
                "short-term holds chunk {}, replacement is chunk {}",
                current.chunk_id, chunk.chunk_id
            )));
        }
        if !chunk.is_clean() {
            return Err(BufferError::State(format!(
                "replacement chunk {} is not clean",
                chunk.chunk_id
            )));
        }
        chunk.check_shape(&self.config).map_err(BufferError::Shape)?;
        self.short_term = Some(chunk);
        Ok(())
    }

    pub fn snapshot_context(&self) -> ContextView {
        let mut layout = vec![GroupTag::Reference];
        layout.extend((0..self.long_term.len()).map(GroupTag::LongTerm));
        if self.short_term.is_some() {
            layout.push(GroupTag::ShortTerm);
        }
        layout.extend((0..self.stream.len()).map(GroupTag::Stream));
        ContextView {
            reference: self.reference.clone(),
            long_term: self.long_term.iter().cloned().collect(),
            short_term: self.short_term.clone(),
            stream: self.stream.iter().cloned().collect(),
            layout,
        }
    }

    /// Verifies every structural invariant of the bank.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.long_term.len() > self.long_term_capacity {
            return Err(format!("long-term holds {}", self.long_term.len()));
        }
        if self.stream.len() > self.stream_capacity {
            return Err(format!("stream holds {}", self.stream.len()));
        }
        for w in self.stream.iter().collect::<Vec<_>>().windows(2) {
            if w[0].noise_level.ladder_index >= w[1].noise_level.ladder_index {
                return Err("stream noise levels not strictly increasing".into());
            }
        }
        if self.long_term.iter().chain(&self.short_term).any(|c| !c.is_clean()) {
            return Err("memory entry not clean".into());
        }
        Ok(())
    }

    /// Deterministic text rendering: one line per group.
    pub fn debug_dump(&self) -> String {
        let view = self.snapshot_context();
        let mut out = String::new();
        let mut lt = view.long_term.iter();
        let mut st = view.stream.iter();
        for tag in &view.layout {
            let _ = match tag {
                GroupTag::Reference => writeln!(out, "{tag} latent={}", view.reference.id),
                GroupTag::LongTerm(_) => {
                    let c = lt.next().expect("layout matches long-term");
                    writeln!(out, "{tag} chunk={} t={:.4}", c.chunk_id, c.noise_level.t)
                }
                GroupTag::ShortTerm => {
                    let c = view.short_term.as_ref().expect("layout matches short-term");
                    writeln!(out, "{tag} chunk={} t={:.4}", c.chunk_id, c.noise_level.t)
                }
                GroupTag::Stream(_) => {
                    let c = st.next().expect("layout matches stream");
                    writeln!(out, "{tag} chunk={} t={:.4}", c.chunk_id, c.noise_level.t)
                }
            };
        }
        out
    }
}
