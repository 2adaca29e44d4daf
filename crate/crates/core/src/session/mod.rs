//! Conditioning ingestion, the trace format, the wire protocol and the TCP service.

pub mod audio;
pub mod condition;
pub mod planner;
pub mod server;
pub mod trace;
pub mod wire;

pub use audio::{aggregate_audio, AudioError, AudioFeatureFrame, FeatureExtractor};
pub use condition::{
    segment_prompts, window_for_chunk, CondError, CondStatus, ConditionSlice, ConditionSource, Conditioner,
    FixedConditions, Transition,
};
pub use planner::{plan_action, ActionPlanner, ActionTag, RmsPlanner};
pub use trace::{format_trace, parse_trace, TraceError, TraceErrorKind, TraceEvent, TraceKind};
pub use wire::{decode_frame, encode_frame, Decoded, FrameType, Message, WireError, WireFrame};
