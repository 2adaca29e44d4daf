//! Per-chunk conditioning: overlapping audio windows, the active prompt,
//! prompt transitions and the planner's action tag.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::audio::{AudioFeatureFrame, FeatureExtractor, AUDIO_HZ, FEATURE_RATE, SAMPLES_PER_FEATURE};
use super::planner::{ActionPlanner, ActionTag, RmsPlanner};
use super::trace::{TraceEvent, TraceKind};
use crate::config::SessionConfig;
use crate::types::{noise_rng, Latent, NoiseDomain};

#[derive(Debug, Error, PartialEq)]
pub enum CondError {
    #[error("no prompt active at session start")]
    NoInitialPrompt,
    #[error("conditioning for chunk {0} not yet available")]
    Pending(u64),
    #[error("audio at pts {pts} overlaps audio already received")]
    AudioOverlap { pts: f64 },
    #[error("prompt at pts {pts} arrives after an update at {last}")]
    PromptOrder { pts: f64, last: f64 },
    #[error("input after end of session")]
    Ended,
    #[error("session audio rate must be {AUDIO_HZ} Hz, config has {0}")]
    SampleRate(u32),
    #[error("feature dimension must be at least 1")]
    FeatureDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transition {
    None,
    CrossPrompt,
}

/// Everything the denoiser is conditioned on for one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSlice {
    pub chunk_id: u64,
    /// Feature frame indices covered by `audio_window`.
    pub audio_range: Range<usize>,
    pub audio_window: Vec<AudioFeatureFrame>,
    pub prompt: String,
    pub action_tag: ActionTag,
    pub transition: Transition,
}

impl ConditionSlice {
    /// Placeholder conditioning for runs without a trace.
    pub fn synthetic(chunk_id: u64) -> Self {
        Self {
            chunk_id,
            audio_range: 0..0,
            audio_window: Vec::new(),
            prompt: String::new(),
            action_tag: ActionTag::Idle,
            transition: Transition::None,
        }
    }

    /// Stable 64-bit digest of the slice contents.
    pub fn digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.chunk_id.to_le_bytes());
        h.update((self.audio_range.start as u64).to_le_bytes());
        h.update((self.audio_range.end as u64).to_le_bytes());
        for f in &self.audio_window {
            h.update((f.index as u64).to_le_bytes());
            for x in &f.features {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.update((self.prompt.len() as u64).to_le_bytes());
        h.update(self.prompt.as_bytes());
        h.update(self.action_tag.to_string().as_bytes());
        h.update([matches!(self.transition, Transition::CrossPrompt) as u8]);
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
    }
}

/// Feature frames whose span intersects the chunk's video span.
pub fn feature_span(config: &SessionConfig, chunk_id: u64) -> Range<usize> {
    let frames = config.chunk_frames() as u128;
    let fps = config.fps as u128;
    let rate = FEATURE_RATE as u128;
    let a = chunk_id as u128 * frames;
    let b = a + frames;
    let lo = a * rate / fps;
    let hi = (b * rate).div_ceil(fps);
    lo as usize..hi as usize
}

/// Feature index range of a chunk's window, widened by the overlap and
/// clamped to `[0, total)`.
pub fn window_range(config: &SessionConfig, chunk_id: u64, total: usize) -> Range<usize> {
    let span = feature_span(config, chunk_id);
    let o = config.audio_overlap_features;
    let lo = span.start.saturating_sub(o).min(total);
    let hi = (span.end + o).min(total);
    lo..hi.max(lo)
}

pub fn window_for_chunk(chunk_id: u64, frames: &[AudioFeatureFrame], config: &SessionConfig) -> Vec<AudioFeatureFrame> {
    frames[window_range(config, chunk_id, frames.len())].to_vec()
}

/// Prompt and transition tag for each of `num_chunks` chunks. `updates` are
/// `(pts, text)` sorted by pts and must include one at or before 0.
pub fn segment_prompts(
    updates: &[(f64, String)],
    config: &SessionConfig,
    num_chunks: u64,
) -> Result<Vec<(String, Transition)>, CondError> {
    (0..num_chunks).map(|c| prompt_for_chunk(updates, config, c)).collect()
}

fn prompt_for_chunk(
    updates: &[(f64, String)],
    config: &SessionConfig,
    chunk_id: u64,
) -> Result<(String, Transition), CondError> {
    if !updates.first().is_some_and(|(pts, _)| *pts <= 0.0) {
        return Err(CondError::NoInitialPrompt);
    }
    let (start, end) = config.chunk_span(chunk_id);
    let prompt = updates
        .iter()
        .take_while(|(pts, _)| *pts <= start)
        .last()
        .map(|(_, text)| text.clone())
        .expect("initial prompt precedes every chunk");
    let crosses = updates.iter().any(|(pts, _)| *pts > start && *pts < end);
    Ok((
        prompt,
        if crosses {
            Transition::CrossPrompt
        } else {
            Transition::None
        },
    ))
}

/// Source of per-chunk conditioning for the scheduler. `Ok(None)` means the
/// session has no more chunks.
pub trait ConditionSource {
    fn next_condition(&mut self, chunk_id: u64) -> Result<Option<ConditionSlice>, CondError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondStatus {
    Ready,
    Pending,
    Exhausted,
}

/// Incremental conditioning builder shared by offline runs and the service.
pub struct Conditioner {
    config: SessionConfig,
    extractor: FeatureExtractor,
    planner: Box<dyn ActionPlanner>,
    reference_digest: u64,
    pending_pcm: Vec<f32>,
    frames: Vec<AudioFeatureFrame>,
    samples_received: u64,
    prompts: Vec<(f64, String)>,
    total_chunks: Option<u64>,
}

impl Conditioner {
    pub fn new(config: &SessionConfig, reference: &Latent) -> Result<Self, CondError> {
        Self::with_planner(config, reference, Box::new(RmsPlanner::default()))
    }

    pub fn with_planner(
        config: &SessionConfig,
        reference: &Latent,
        planner: Box<dyn ActionPlanner>,
    ) -> Result<Self, CondError> {
        if config.audio_hz != AUDIO_HZ {
            return Err(CondError::SampleRate(config.audio_hz));
        }
        let extractor = FeatureExtractor::new(config.feature_dim).map_err(|_| CondError::FeatureDim)?;
        let mut h = Sha256::new();
        for x in &reference.data {
            h.update(x.to_bits().to_le_bytes());
        }
        let reference_digest = u64::from_le_bytes(h.finalize()[..8].try_into().expect("32 bytes"));
        Ok(Self {
            config: config.clone(),
            extractor,
            planner,
            reference_digest,
            pending_pcm: Vec::new(),
            frames: Vec::new(),
            samples_received: 0,
            prompts: Vec::new(),
            total_chunks: None,
        })
    }

    /// Builds a finished conditioner from a parsed trace.
    pub fn from_trace(config: &SessionConfig, reference: &Latent, events: &[TraceEvent]) -> Result<Self, CondError> {
        let mut c = Self::new(config, reference)?;
        for e in events {
            match &e.kind {
                TraceKind::Audio { samples } => c.push_audio_at(e.pts, samples)?,
                TraceKind::Prompt { text } => c.push_prompt(e.pts, text.clone())?,
                TraceKind::End => c.finish(Some(e.pts))?,
            }
        }
        if c.total_chunks.is_none() {
            c.finish(None)?;
        }
        Ok(c)
    }

    pub fn is_finished(&self) -> bool {
        self.total_chunks.is_some()
    }

    pub fn total_chunks(&self) -> Option<u64> {
        self.total_chunks
    }

    pub fn frames(&self) -> &[AudioFeatureFrame] {
        &self.frames
    }

    pub fn samples_received(&self) -> u64 {
        self.samples_received
    }

    pub fn push_audio(&mut self, samples: &[f32]) -> Result<(), CondError> {
        if self.is_finished() {
            return Err(CondError::Ended);
        }
        self.samples_received += samples.len() as u64;
        self.pending_pcm.extend_from_slice(samples);
        let whole = self.pending_pcm.len() / SAMPLES_PER_FEATURE * SAMPLES_PER_FEATURE;
        for w in self.pending_pcm[..whole].chunks_exact(SAMPLES_PER_FEATURE) {
            let index = self.frames.len();
            self.frames.push(self.extractor.frame(index, w));
        }
        self.pending_pcm.drain(..whole);
        Ok(())
    }

    /// Appends audio positioned at `pts`; gaps are filled with silence.
    pub fn push_audio_at(&mut self, pts: f64, samples: &[f32]) -> Result<(), CondError> {
        let offset = (pts * AUDIO_HZ as f64).round() as i128;
        let have = self.samples_received as i128;
        if offset < have {
            return Err(CondError::AudioOverlap { pts });
        }
        if offset > have {
            self.push_audio(&vec![0.0; (offset - have) as usize])?;
        }
        self.push_audio(samples)
    }

    pub fn push_prompt(&mut self, pts: f64, text: String) -> Result<(), CondError> {
        if self.is_finished() {
            return Err(CondError::Ended);
        }
        if let Some((last, _)) = self.prompts.last() {
            if pts < *last {
                return Err(CondError::PromptOrder { pts, last: *last });
            }
        }
        self.prompts.push((pts, text));
        Ok(())
    }

    /// Closes the session. The session lasts until the later of the audio end
    /// and `end_pts`; the last chunk is zero-padded.
    pub fn finish(&mut self, end_pts: Option<f64>) -> Result<(), CondError> {
        if self.is_finished() {
            return Err(CondError::Ended);
        }
        let end_samples = end_pts
            .map(|p| (p.max(0.0) * AUDIO_HZ as f64).round() as u64)
            .unwrap_or(0)
            .max(self.samples_received);
        let per_chunk_num = self.config.chunk_frames() as u128 * AUDIO_HZ as u128;
        let fps = self.config.fps as u128;
        let chunks = (end_samples as u128 * fps).div_ceil(per_chunk_num) as u64;
        let needed_frames = if chunks == 0 {
            0
        } else {
            feature_span(&self.config, chunks - 1).end
        };
        let needed_samples = needed_frames * SAMPLES_PER_FEATURE;
        let have = self.frames.len() * SAMPLES_PER_FEATURE + self.pending_pcm.len();
        if needed_samples > have {
            self.push_audio(&vec![0.0; needed_samples - have])?;
        }
        if !self.pending_pcm.is_empty() {
            let index = self.frames.len();
            let tail = std::mem::take(&mut self.pending_pcm);
            self.frames.push(self.extractor.frame(index, &tail));
        }
        self.total_chunks = Some(chunks);
        Ok(())
    }

    pub fn status(&self, chunk_id: u64) -> CondStatus {
        match self.total_chunks {
            Some(n) if chunk_id >= n => CondStatus::Exhausted,
            Some(_) => CondStatus::Ready,
            None => {
                let need = feature_span(&self.config, chunk_id).end + self.config.audio_overlap_features;
                if self.frames.len() >= need {
                    CondStatus::Ready
                } else {
                    CondStatus::Pending
                }
            }
        }
    }

    pub fn build(&self, chunk_id: u64) -> Result<ConditionSlice, CondError> {
        let total = if self.is_finished() {
            self.frames.len()
        } else {
            usize::MAX
        };
        let range = window_range(&self.config, chunk_id, total);
        let range = range.start..range.end.min(self.frames.len());
        let audio_window = self.frames[range.clone()].to_vec();
        let (prompt, transition) = prompt_for_chunk(&self.prompts, &self.config, chunk_id)?;
        let mut rng = noise_rng(self.config.rng_seed, NoiseDomain::Planner, chunk_id);
        let action_tag = self.planner.plan(&audio_window, self.reference_digest, &mut rng);
        Ok(ConditionSlice {
            chunk_id,
            audio_range: range,
            audio_window,
            prompt,
            action_tag,
            transition,
        })
    }
}

impl ConditionSource for Conditioner {
    fn next_condition(&mut self, chunk_id: u64) -> Result<Option<ConditionSlice>, CondError> {
        match self.status(chunk_id) {
            CondStatus::Ready => self.build(chunk_id).map(Some),
            CondStatus::Pending => Err(CondError::Pending(chunk_id)),
            CondStatus::Exhausted => Ok(None),
        }
    }
}

/// Synthetic conditioning for a fixed number of chunks.
#[derive(Debug, Clone)]
pub struct FixedConditions {
    pub num_chunks: u64,
}

impl ConditionSource for FixedConditions {
    fn next_condition(&mut self, chunk_id: u64) -> Result<Option<ConditionSlice>, CondError> {
        Ok((chunk_id < self.num_chunks).then(|| ConditionSlice::synthetic(chunk_id)))
    }
}
