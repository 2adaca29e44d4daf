//! Denoiser contract, analytic toy denoisers, and the distillation-side
//! utilities (CFG fold, step partition, generated-GT prep, rollout logs).

mod distill;
mod oracle;
mod rollout;
mod toy;

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use distill::{make_generated_gt, mix_memory_source, MemorySource};
pub use oracle::full_sequence_oracle;
pub use rollout::{format_trajectory, simulate_rollout, StepRecord};
pub use toy::{error_norm, DriftModel, TargetFn, TargetQuery, ToyFlowModel};

use crate::buffer::{BufferError, ContextView};
use crate::config::RunConfig;
use crate::ladder::NoiseLadder;
use crate::mask::GroupMask;
use crate::session::ConditionSlice;
use crate::types::Chunk;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("flow time t=0 is singular for an Euler step")]
    SingularTime,
    #[error("step must satisfy 0 <= t_next < t <= 1, got t={t}, t_next={t_next}")]
    InvalidTimes { t: f64, t_next: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot split {total} steps into {segments} segments")]
    Segments { total: usize, segments: usize },
    #[error("t={0} is not a ladder value")]
    NotOnLadder(f64),
    #[error("chunk {0} must be clean")]
    NotClean(u64),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("chunk {0} is already clean")]
    AlreadyClean(u64),
    #[error("{0} conditions for {1} stream chunks")]
    ConditionCount(usize, usize),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

/// Inputs of one denoiser call over the whole stream.
#[derive(Debug, Clone, Copy)]
pub struct StepRequest<'a> {
    /// Chunks to advance, cleanest first.
    pub stream: &'a [Chunk],
    pub context: &'a ContextView,
    pub mask: &'a GroupMask,
    /// One slice per stream chunk.
    pub conds: &'a [ConditionSlice],
    pub ladder: &'a NoiseLadder,
}

/// One function evaluation: every stream chunk moves exactly one rung down.
pub trait DenoiseStep: Send + Sync {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError>;
}

impl<T: DenoiseStep + ?Sized> DenoiseStep for &T {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError> {
        (**self).step(request)
    }
}

impl<T: DenoiseStep + ?Sized> DenoiseStep for Box<T> {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError> {
        (**self).step(request)
    }
}

/// Wraps an engine and counts its calls and the chunk evaluations they carry.
#[derive(Debug, Default)]
pub struct CallCounter<E> {
    pub inner: E,
    calls: AtomicUsize,
    chunk_steps: AtomicUsize,
}

impl<E> CallCounter<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            chunk_steps: AtomicUsize::new(0),
        }
    }

    /// Batched calls, each advancing the whole stream.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Per-chunk function evaluations: the summed stream length over all calls.
    pub fn chunk_steps(&self) -> usize {
        self.chunk_steps.load(Ordering::Relaxed)
    }
}

impl<E: DenoiseStep> DenoiseStep for CallCounter<E> {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.chunk_steps.fetch_add(request.stream.len(), Ordering::Relaxed);
        self.inner.step(request)
    }
}

/// Tick engine and repair engine for a run. A nonzero `drift_bias` makes the
/// tick engine a [`DriftModel`] repaired by its exact base model.
pub fn build_engines(run: &RunConfig) -> (Arc<dyn DenoiseStep>, Arc<dyn DenoiseStep>) {
    let base = ToyFlowModel::from_settings(&run.session, &run.model);
    if run.model.drift_bias != 0.0 {
        let drift = DriftModel::uniform(base.clone(), run.model.drift_bias);
        (Arc::new(drift), Arc::new(base))
    } else {
        let base: Arc<dyn DenoiseStep> = Arc::new(base);
        (base.clone(), base)
    }
}

impl<T: DenoiseStep + ?Sized> DenoiseStep for Arc<T> {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError> {
        (**self).step(request)
    }
}

/// Euler step on the linear flow `x_t = (1 - t) x0 + t eps` with `x0 = target`:
/// `x + (t_next - t) (x - target) / t`.
///
/// Evaluated as `(t_next / t) x + (1 - t_next / t) target`, which lands on
/// `target` exactly when `t_next == 0`.
pub fn toy_flow_step(x: &[f64], t: f64, t_next: f64, target: &[f64]) -> Result<Vec<f64>, EngineError> {
    if t == 0.0 {
        return Err(EngineError::SingularTime);
    }
    if !(0.0 <= t_next && t_next < t && t <= 1.0) {
        return Err(EngineError::InvalidTimes { t, t_next });
    }
    if x.len() != target.len() {
        return Err(EngineError::DimensionMismatch {
            left: x.len(),
            right: target.len(),
        });
    }
    let keep = t_next / t;
    Ok(x.iter()
        .zip(target)
        .map(|(&xi, &ti)| keep * xi + (1.0 - keep) * ti)
        .collect())
}

/// Guidance fold `uncond + scale * (cond - uncond)`: the target a guidance
/// embedding is distilled to reproduce.
pub fn cfg_fold(uncond: &[f64], cond: &[f64], scale: f64) -> Result<Vec<f64>, EngineError> {
    if uncond.len() != cond.len() {
        return Err(EngineError::DimensionMismatch {
            left: uncond.len(),
            right: cond.len(),
        });
    }
    Ok(uncond.iter().zip(cond).map(|(&u, &c)| u + scale * (c - u)).collect())
}

/// Splits `0..total_nfe` into `segments` contiguous ranges whose sizes differ
/// by at most one; earlier segments take the extra steps.
pub fn partition_steps(total_nfe: usize, segments: usize) -> Result<Vec<Range<usize>>, EngineError> {
    if segments == 0 || segments > total_nfe {
        return Err(EngineError::Segments {
            total: total_nfe,
            segments,
        });
    }
    let base = total_nfe / segments;
    let extra = total_nfe % segments;
    let mut start = 0;
    Ok((0..segments)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_step_examples() {
        let target = [0.25, -1.5, 3.0];
        let x = [10.0, 7.0, -2.0];
        assert_eq!(toy_flow_step(&x, 1.0, 0.0, &target).unwrap(), target);
        assert_eq!(toy_flow_step(&x, 0.37, 0.0, &target).unwrap(), target);
        let fixed = toy_flow_step(&target, 0.8, 0.3, &target).unwrap();
        for (a, b) in fixed.iter().zip(&target) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(toy_flow_step(&[2.0], 1.0, 0.5, &[0.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn flow_step_matches_velocity_form() {
        let x = [0.3, -0.7];
        let target = [1.1, 0.2];
        let (t, tn) = (0.75, 0.4);
        let got = toy_flow_step(&x, t, tn, &target).unwrap();
        for i in 0..2 {
            let velocity_form = x[i] + (tn - t) * (x[i] - target[i]) / t;
            assert!((got[i] - velocity_form).abs() < 1e-15);
        }
    }

    #[test]
    fn flow_step_errors() {
        assert_eq!(toy_flow_step(&[1.0], 0.0, 0.0, &[0.0]), Err(EngineError::SingularTime));
        assert!(matches!(
            toy_flow_step(&[1.0], 0.5, 0.6, &[0.0]),
            Err(EngineError::InvalidTimes { .. })
        ));
        assert!(matches!(
            toy_flow_step(&[1.0], 0.5, 0.2, &[0.0, 1.0]),
            Err(EngineError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cfg_examples() {
        let u = [1.0, 1.0];
        let c = [3.0, 1.0];
        assert_eq!(cfg_fold(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_fold(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_fold(&u, &c, 2.5).unwrap(), vec![6.0, 1.0]);
        assert!(cfg_fold(&u, &[1.0], 1.0).is_err());
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_steps(24, 3).unwrap(), vec![0..8, 8..16, 16..24]);
        assert_eq!(partition_steps(3, 3).unwrap(), vec![0..1, 1..2, 2..3]);
        assert_eq!(partition_steps(10, 3).unwrap(), vec![0..4, 4..7, 7..10]);
        assert!(partition_steps(2, 3).is_err());
        assert!(partition_steps(2, 0).is_err());
    }
}
