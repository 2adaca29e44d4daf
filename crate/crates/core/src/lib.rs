//! Streaming chunkwise diffusion-forcing runtime: a memory bank of clean and
//! noisy latent chunks, a staggered denoising scheduler with periodic memory
//! refinement, an asynchronous denoise/decode pipeline model, and the session
//! plumbing that feeds conditioning in and streams chunks out.

pub mod buffer;
pub mod config;
pub mod engine;
pub mod ladder;
pub mod mask;
pub mod pipeline;
pub mod scheduler;
pub mod session;
pub mod types;

pub use buffer::{ContextView, GroupTag, MemoryBank};
pub use config::{RunConfig, SessionConfig};
pub use engine::{DenoiseStep, StepRequest};
pub use scheduler::{EmissionRecord, Scheduler};
