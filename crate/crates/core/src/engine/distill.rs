use rand::Rng;

use super::{DenoiseStep, EngineError, StepRequest};
use crate::buffer::{ContextView, GroupTag};
use crate::ladder::NoiseLadder;
use crate::mask::build_group_mask;
use crate::session::ConditionSlice;
use crate::types::{chunk_noise, Chunk, Latent, NoiseDomain};

/// Which latents a training sample used for its memory slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemorySource {
    GroundTruth,
    Generated,
}

/// Corrupts a clean ground-truth chunk to `t_inject` with seeded noise, then
/// denoises it back to `t = 0` with `model` along the ladder rungs below
/// `t_inject`.
pub fn make_generated_gt(
    gt: &Chunk,
    t_inject: f64,
    model: &dyn DenoiseStep,
    ladder: &NoiseLadder,
    reference: &Latent,
    seed: u64,
) -> Result<Chunk, EngineError> {
    if !gt.is_clean() {
        return Err(EngineError::NotClean(gt.chunk_id));
    }
    let index = ladder
        .index_of(t_inject)
        .filter(|&i| i > 0)
        .ok_or(EngineError::NotOnLadder(t_inject))?;
    let t = ladder.t_at(index);
    let dim = gt.latents.first().map_or(0, |l| l.data.len());
    let noise = chunk_noise(seed, NoiseDomain::GeneratedGt, gt.chunk_id, gt.latents.len(), dim);
    let mut x = gt.clone();
    for (latent, eps) in x.latents.iter_mut().zip(&noise) {
        for (v, e) in latent.data.iter_mut().zip(eps) {
            *v = (1.0 - t) * *v + t * e;
        }
    }
    x.noise_level = ladder.level(index);

    let mask = build_group_mask(&[GroupTag::Reference, GroupTag::Stream(0)]).expect("layout starts with the reference");
    let conds = [ConditionSlice::synthetic(gt.chunk_id)];
    while !x.is_clean() {
        let view = ContextView::reference_only(reference.clone(), vec![x.clone()]);
        let request = StepRequest {
            stream: std::slice::from_ref(&x),
            context: &view,
            mask: &mask,
            conds: &conds,
            ladder,
        };
        x = model.step(&request)?.pop().ok_or(EngineError::ConditionCount(1, 0))?;
    }
    Ok(x)
}

/// Returns `generated` with probability `p`, otherwise `gt`.
pub fn mix_memory_source<R: Rng + ?Sized>(
    gt: &Chunk,
    generated: &Chunk,
    p: f64,
    rng: &mut R,
) -> Result<(Chunk, MemorySource), EngineError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(EngineError::Probability(p));
    }
    if rng.random::<f64>() < p {
        Ok((generated.clone(), MemorySource::Generated))
    } else {
        Ok((gt.clone(), MemorySource::GroundTruth))
    }
}
