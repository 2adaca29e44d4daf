use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{toy_flow_step, DenoiseStep, EngineError, StepRequest};
use crate::buffer::{ContextView, GroupTag};
use crate::config::{ModelSettings, SessionConfig};
use crate::mask::GroupMask;
use crate::types::{noise_rng, Chunk, Latent, NoiseDomain};

/// Arguments of a target function.
#[derive(Debug, Clone, Copy)]
pub struct TargetQuery<'a> {
    pub chunk_id: u64,
    pub cond_digest: u64,
    pub reference: &'a Latent,
    pub latents_per_chunk: usize,
    pub latent_dim: usize,
}

/// Clean latents a chunk converges to, one row per latent.
pub type TargetFn = Arc<dyn Fn(&TargetQuery<'_>) -> Vec<Vec<f64>> + Send + Sync>;

/// Exact linear-flow denoiser. Every call moves each chunk one rung along
/// the straight path toward its target, so a chunk reaching `t = 0` equals
/// its target.
#[derive(Clone)]
pub struct ToyFlowModel {
    target_fn: TargetFn,
    latents_per_chunk: usize,
    latent_dim: usize,
    memory_coupling: f64,
}

impl fmt::Debug for ToyFlowModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyFlowModel")
            .field("latents_per_chunk", &self.latents_per_chunk)
            .field("latent_dim", &self.latent_dim)
            .field("memory_coupling", &self.memory_coupling)
            .finish_non_exhaustive()
    }
}

impl ToyFlowModel {
    /// `alpha * reference + beta * embed(cond)`, where the embedding is a
    /// Gaussian vector seeded by the chunk id and condition digest.
    pub fn mixture(config: &SessionConfig, alpha: f64, beta: f64) -> Self {
        let seed = config.rng_seed;
        let target_fn: TargetFn = Arc::new(move |q: &TargetQuery<'_>| {
            let mut rng = noise_rng(
                seed ^ q.chunk_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                NoiseDomain::Projection,
                q.cond_digest,
            );
            (0..q.latents_per_chunk)
                .map(|_| {
                    q.reference
                        .data
                        .iter()
                        .map(|r| alpha * r + beta * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        });
        Self::from_fn(config, target_fn)
    }

    pub fn from_settings(config: &SessionConfig, settings: &ModelSettings) -> Self {
        Self::mixture(config, settings.alpha, settings.beta).with_memory_coupling(settings.memory_coupling)
    }

    pub fn from_fn(config: &SessionConfig, target_fn: TargetFn) -> Self {
        Self {
            target_fn,
            latents_per_chunk: config.latents_per_chunk,
            latent_dim: config.latent_dim,
            memory_coupling: 0.0,
        }
    }

    /// Adds `coupling * short_term` to every target when short-term memory is visible.
    pub fn with_memory_coupling(mut self, coupling: f64) -> Self {
        self.memory_coupling = coupling;
        self
    }

    pub fn base_target(&self, chunk_id: u64, cond_digest: u64, reference: &Latent) -> Vec<Vec<f64>> {
        (self.target_fn)(&TargetQuery {
            chunk_id,
            cond_digest,
            reference,
            latents_per_chunk: self.latents_per_chunk,
            latent_dim: self.latent_dim,
        })
    }

    /// Target of a chunk given what it can see.
    pub fn chunk_target(
        &self,
        chunk: &Chunk,
        stream_index: usize,
        context: &ContextView,
        mask: &GroupMask,
    ) -> Vec<Vec<f64>> {
        let mut target = self.base_target(chunk.chunk_id, chunk.cond_digest, &context.reference);
        if self.memory_coupling != 0.0 {
            if let Some(st) = visible_short_term(stream_index, context, mask) {
                for (row, mem) in target.iter_mut().zip(&st.latents) {
                    for (x, m) in row.iter_mut().zip(&mem.data) {
                        *x += self.memory_coupling * m;
                    }
                }
            }
        }
        target
    }

    fn advance(
        &self,
        request: &StepRequest<'_>,
        target_of: impl Fn(usize, &Chunk) -> Vec<Vec<f64>>,
        bias: Option<&[f64]>,
    ) -> Result<Vec<Chunk>, EngineError> {
        if request.conds.len() != request.stream.len() {
            return Err(EngineError::ConditionCount(request.conds.len(), request.stream.len()));
        }
        request
            .stream
            .iter()
            .enumerate()
            .map(|(i, chunk)| {
                let next = chunk
                    .noise_level
                    .next_lower(request.ladder)
                    .ok_or(EngineError::AlreadyClean(chunk.chunk_id))?;
                let target = target_of(i, chunk);
                let mut out = chunk.clone();
                for (latent, goal) in out.latents.iter_mut().zip(&target) {
                    let mut x = toy_flow_step(&latent.data, chunk.noise_level.t, next.t, goal)?;
                    if let Some(b) = bias {
                        for (xi, bi) in x.iter_mut().zip(b) {
                            *xi += bi;
                        }
                    }
                    latent.data = x;
                }
                out.noise_level = next;
                Ok(out)
            })
            .collect()
    }
}

impl DenoiseStep for ToyFlowModel {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError> {
        self.advance(
            request,
            |i, c| self.chunk_target(c, i, request.context, request.mask),
            None,
        )
    }
}

fn visible_short_term<'a>(stream_index: usize, context: &'a ContextView, mask: &GroupMask) -> Option<&'a Chunk> {
    let st = context.short_term.as_ref()?;
    let row = mask.layout.iter().position(|g| *g == GroupTag::Stream(stream_index))?;
    let col = mask.layout.iter().position(|g| *g == GroupTag::ShortTerm)?;
    mask.allowed[row][col].then_some(st)
}

/// Toy model with accumulating error.
///
/// Each call adds `bias` to its output, and a chunk inherits the deviation of
/// the short-term memory it sees from that memory's own target. A chunk
/// therefore lands `bias` further from its target than its predecessor, so
/// after `n` promotions the newest memory is off by `n * bias`.
#[derive(Debug, Clone)]
pub struct DriftModel {
    pub base: ToyFlowModel,
    pub bias: Vec<f64>,
}

impl DriftModel {
    pub fn new(base: ToyFlowModel, bias: Vec<f64>) -> Self {
        Self { base, bias }
    }

    /// Bias with equal components and Euclidean norm `magnitude`.
    pub fn uniform(base: ToyFlowModel, magnitude: f64) -> Self {
        let d = base.latent_dim;
        let bias = vec![magnitude / (d as f64).sqrt(); d];
        Self { base, bias }
    }

    pub fn bias_norm(&self) -> f64 {
        self.bias.iter().map(|b| b * b).sum::<f64>().sqrt()
    }

    fn chunk_target(
        &self,
        chunk: &Chunk,
        stream_index: usize,
        context: &ContextView,
        mask: &GroupMask,
    ) -> Vec<Vec<f64>> {
        let mut target = self.base.chunk_target(chunk, stream_index, context, mask);
        if let Some(st) = visible_short_term(stream_index, context, mask) {
            let st_goal = self.base.base_target(st.chunk_id, st.cond_digest, &context.reference);
            for ((row, mem), goal) in target.iter_mut().zip(&st.latents).zip(&st_goal) {
                for ((x, m), g) in row.iter_mut().zip(&mem.data).zip(goal) {
                    *x += m - g;
                }
            }
        }
        target
    }
}

impl DenoiseStep for DriftModel {
    fn step(&self, request: &StepRequest<'_>) -> Result<Vec<Chunk>, EngineError> {
        self.base.advance(
            request,
            |i, c| self.chunk_target(c, i, request.context, request.mask),
            Some(&self.bias),
        )
    }
}

/// Largest per-latent Euclidean distance between a chunk and target rows.
pub fn error_norm(chunk: &Chunk, target: &[Vec<f64>]) -> f64 {
    chunk
        .latents
        .iter()
        .zip(target)
        .map(|(l, t)| l.data.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::build_group_mask;
    use crate::session::ConditionSlice;
    use crate::types::seeded_reference;

    fn cfg() -> SessionConfig {
        SessionConfig {
            latent_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn mixture_target_is_deterministic_and_conditioned() {
        let c = cfg();
        let r = seeded_reference(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let a = m.base_target(3, 11, &r);
        assert_eq!(a, m.base_target(3, 11, &r));
        assert_ne!(a, m.base_target(3, 12, &r));
        assert_ne!(a, m.base_target(4, 11, &r));
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|row| row.len() == 4));
        let zero_beta = ToyFlowModel::mixture(&c, 0.5, 0.0).base_target(3, 11, &r);
        for row in zero_beta {
            for (x, rr) in row.iter().zip(&r.data) {
                assert_eq!(*x, 0.5 * rr);
            }
        }
    }

    #[test]
    fn full_descent_lands_on_target() {
        let c = cfg();
        let ladder = c.ladder();
        let r = seeded_reference(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let mut chunk = Chunk::pure_noise(&c, &ladder, 0, ConditionSlice::synthetic(0).digest());
        let view = ContextView::reference_only(r.clone(), vec![]);
        let mask = build_group_mask(&[GroupTag::Reference, GroupTag::Stream(0)]).unwrap();
        let conds = [ConditionSlice::synthetic(0)];
        while !chunk.is_clean() {
            let req = StepRequest {
                stream: std::slice::from_ref(&chunk),
                context: &view,
                mask: &mask,
                conds: &conds,
                ladder: &ladder,
            };
            chunk = m.step(&req).unwrap().pop().unwrap();
        }
        let target = m.base_target(0, chunk.cond_digest, &r);
        assert_eq!(error_norm(&chunk, &target), 0.0);

        let req = StepRequest {
            stream: std::slice::from_ref(&chunk),
            context: &view,
            mask: &mask,
            conds: &conds,
            ladder: &ladder,
        };
        assert_eq!(m.step(&req), Err(EngineError::AlreadyClean(0)));
        let req = StepRequest { conds: &[], ..req };
        assert!(matches!(m.step(&req), Err(EngineError::ConditionCount(0, 1))));
    }

    #[test]
    fn uniform_bias_has_requested_norm() {
        let d = DriftModel::uniform(ToyFlowModel::mixture(&cfg(), 0.5, 0.5), 0.01);
        assert!((d.bias_norm() - 0.01).abs() < 1e-15);
    }
}
