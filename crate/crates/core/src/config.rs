//! Session configuration, validation and the flat `key = value` config file.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ladder::NoiseLadder;

/// One violated configuration constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ConfigError {
    pub(crate) fn single(field: &str, constraint: &str) -> Self {
        ConfigError::Invalid(vec![Violation {
            field: field.to_string(),
            constraint: constraint.to_string(),
        }])
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Stream geometry, rates and memory policy for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Video frames per second.
    pub fps: u32,
    /// Audio sample rate in Hz.
    pub audio_hz: u32,
    pub latents_per_chunk: usize,
    /// Number of chunks concurrently in the denoising stream.
    pub stream_chunks: usize,
    /// Denoiser calls per tick.
    pub micro_steps: usize,
    /// Temporal compression: video frames covered by one latent.
    pub frames_per_latent: usize,
    pub long_term_capacity: usize,
    pub latent_dim: usize,
    pub refine_interval_chunks: usize,
    /// Injection level for memory refinement. `None` means the second ladder
    /// value, `(K-1)/K`.
    pub refine_noise_t: Option<f64>,
    /// Feature frames of context added on each side of a chunk's audio window.
    pub audio_overlap_features: usize,
    /// Dimension of each audio feature frame.
    pub feature_dim: usize,
    pub rng_seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            fps: 25,
            audio_hz: 16_000,
            latents_per_chunk: 3,
            stream_chunks: 3,
            micro_steps: 1,
            frames_per_latent: 4,
            long_term_capacity: 3,
            latent_dim: 16,
            refine_interval_chunks: 8,
            refine_noise_t: None,
            audio_overlap_features: 2,
            feature_dim: 8,
            rng_seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn ladder(&self) -> NoiseLadder {
        NoiseLadder::new(self.stream_chunks, self.micro_steps).expect("ladder of a validated config")
    }

    /// Video frames covered by one chunk.
    pub fn chunk_frames(&self) -> usize {
        self.latents_per_chunk * self.frames_per_latent
    }

    /// `[start, end)` of a chunk on the video timeline, in seconds.
    pub fn chunk_span(&self, chunk_id: u64) -> (f64, f64) {
        let frames = self.chunk_frames() as u64;
        let fps = self.fps as f64;
        ((chunk_id * frames) as f64 / fps, ((chunk_id + 1) * frames) as f64 / fps)
    }

    /// Injection level used by memory refinement.
    pub fn effective_refine_noise_t(&self) -> f64 {
        self.refine_noise_t.unwrap_or_else(|| {
            let k = self.stream_chunks * self.micro_steps;
            if k >= 2 {
                (k - 1) as f64 / k as f64
            } else {
                0.5
            }
        })
    }

    /// Ticks needed before the first chunk is clean.
    pub fn warmup_ticks(&self) -> usize {
        self.stream_chunks
    }
}

/// Seconds of video in one chunk: `latents_per_chunk * frames_per_latent / fps`.
pub fn chunk_duration(config: &SessionConfig) -> f64 {
    config.chunk_frames() as f64 / config.fps as f64
}

/// Returns the config if every invariant holds, otherwise all violations.
pub fn validate_config(config: SessionConfig) -> Result<SessionConfig, ConfigError> {
    let mut violations = Vec::new();
    let mut check = |ok: bool, field: &str, constraint: &str| {
        if !ok {
            violations.push(Violation {
                field: field.to_string(),
                constraint: constraint.to_string(),
            });
        }
    };
    check(config.fps > 0, "fps", "fps > 0");
    check(config.audio_hz > 0, "audio_hz", "audio_hz > 0");
    for (name, value) in [
        ("latents_per_chunk", config.latents_per_chunk),
        ("stream_chunks", config.stream_chunks),
        ("micro_steps", config.micro_steps),
        ("frames_per_latent", config.frames_per_latent),
        ("long_term_capacity", config.long_term_capacity),
        ("latent_dim", config.latent_dim),
        ("refine_interval_chunks", config.refine_interval_chunks),
        ("feature_dim", config.feature_dim),
    ] {
        check(value >= 1, name, "counts >= 1");
    }
    if let Some(t) = config.refine_noise_t {
        check(t > 0.0 && t < 1.0, "refine_noise_t", "refine_noise_t in (0, 1)");
    }
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

/// Parameters of the analytic denoisers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    /// Weight of the reference latent in the toy target.
    pub alpha: f64,
    /// Weight of the condition embedding in the toy target.
    pub beta: f64,
    /// Per-component additive bias of the drift model; 0 selects the exact model.
    pub drift_bias: f64,
    /// Weight of short-term memory in the target; 0 keeps targets memory independent.
    pub memory_coupling: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            drift_bias: 0.0,
            memory_coupling: 0.0,
        }
    }
}

/// Stage costs for the two-stage pipeline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    /// Denoise cost per tick; `None` means one chunk duration.
    pub denoise_ms: Option<f64>,
    pub decode_ms: f64,
    pub fp8: f64,
    pub kernel_fusion: f64,
    pub queue_capacity: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            denoise_ms: None,
            decode_ms: 60.0,
            fp8: 1.0,
            kernel_fusion: 1.0,
            queue_capacity: 2,
        }
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub session: SessionConfig,
    pub model: ModelSettings,
    pub pipeline: PipelineSettings,
}

impl RunConfig {
    /// Parses a flat `key = value` document. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        RunConfig::default().apply(text)
    }

    /// Overrides fields with `key = value` lines and revalidates.
    pub fn apply(self, text: &str) -> Result<Self, ConfigError> {
        let mut cfg = self;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.session = validate_config(cfg.session)?;
        let p = &cfg.pipeline;
        let mut bad = Vec::new();
        if p.denoise_ms.is_some_and(|d| d.is_nan() || d <= 0.0) {
            bad.push(("denoise_ms", "denoise_ms > 0"));
        }
        if p.decode_ms.is_nan() || p.decode_ms <= 0.0 {
            bad.push(("decode_ms", "decode_ms > 0"));
        }
        for (name, m) in [("fp8", p.fp8), ("kernel_fusion", p.kernel_fusion)] {
            if !(m > 0.0 && m <= 1.0) {
                bad.push((name, "multiplier in (0, 1]"));
            }
        }
        if p.queue_capacity == 0 {
            bad.push(("queue_capacity", "counts >= 1"));
        }
        if !bad.is_empty() {
            return Err(ConfigError::Invalid(
                bad.into_iter()
                    .map(|(f, c)| Violation {
                        field: f.to_string(),
                        constraint: c.to_string(),
                    })
                    .collect(),
            ));
        }
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Parse {
                line,
                message: format!("bad value `{value}` for `{key}`"),
            })
        }
        let s = &mut self.session;
        match key {
            "fps" => s.fps = num(line, key, value)?,
            "audio_hz" => s.audio_hz = num(line, key, value)?,
            "latents_per_chunk" => s.latents_per_chunk = num(line, key, value)?,
            "stream_chunks" => s.stream_chunks = num(line, key, value)?,
            "micro_steps" => s.micro_steps = num(line, key, value)?,
            "frames_per_latent" => s.frames_per_latent = num(line, key, value)?,
            "long_term_capacity" => s.long_term_capacity = num(line, key, value)?,
            "latent_dim" => s.latent_dim = num(line, key, value)?,
            "refine_interval_chunks" => s.refine_interval_chunks = num(line, key, value)?,
            "refine_noise_t" => s.refine_noise_t = Some(num(line, key, value)?),
            "audio_overlap_features" => s.audio_overlap_features = num(line, key, value)?,
            "feature_dim" => s.feature_dim = num(line, key, value)?,
            "rng_seed" => s.rng_seed = num(line, key, value)?,
            "alpha" => self.model.alpha = num(line, key, value)?,
            "beta" => self.model.beta = num(line, key, value)?,
            "drift_bias" => self.model.drift_bias = num(line, key, value)?,
            "memory_coupling" => self.model.memory_coupling = num(line, key, value)?,
            "denoise_ms" => self.pipeline.denoise_ms = Some(num(line, key, value)?),
            "decode_ms" => self.pipeline.decode_ms = num(line, key, value)?,
            "fp8" => self.pipeline.fp8 = num(line, key, value)?,
            "kernel_fusion" => self.pipeline.kernel_fusion = num(line, key, value)?,
            "queue_capacity" => self.pipeline.queue_capacity = num(line, key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}
