use super::{DenoiseStep, EngineError, StepRequest};
use crate::buffer::ContextView;
use crate::config::SessionConfig;
use crate::mask::GroupMask;
use crate::session::ConditionSlice;
use crate::types::{Chunk, Latent};

/// Non-streaming reference: every chunk starts from the same seeded noise the
/// streaming scheduler would admit, and all of them descend the ladder
/// together under full attention with only the reference as context.
pub fn full_sequence_oracle(
    config: &SessionConfig,
    conds: &[ConditionSlice],
    model: &dyn DenoiseStep,
    reference: &Latent,
) -> Result<Vec<Chunk>, EngineError> {
    let ladder = config.ladder();
    let mut chunks: Vec<Chunk> = conds
        .iter()
        .map(|c| Chunk::pure_noise(config, &ladder, c.chunk_id, c.digest()))
        .collect();
    if chunks.is_empty() {
        return Ok(chunks);
    }
    for _ in 0..ladder.depth() {
        let view = ContextView::reference_only(reference.clone(), chunks.clone());
        let mask = GroupMask::full(&view.layout);
        chunks = model.step(&StepRequest {
            stream: &chunks,
            context: &view,
            mask: &mask,
            conds,
            ladder: &ladder,
        })?;
    }
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ToyFlowModel;
    use crate::types::seeded_reference;

    #[test]
    fn empty_and_clean() {
        let cfg = SessionConfig::default();
        let r = seeded_reference(&cfg);
        let m = ToyFlowModel::mixture(&cfg, 0.5, 0.5);
        assert!(full_sequence_oracle(&cfg, &[], &m, &r).unwrap().is_empty());
        let conds: Vec<_> = (0..4).map(ConditionSlice::synthetic).collect();
        let out = full_sequence_oracle(&cfg, &conds, &m, &r).unwrap();
        assert_eq!(out.len(), 4);
        for (i, c) in out.iter().enumerate() {
            assert!(c.is_clean());
            assert_eq!(c.chunk_id, i as u64);
            let target = m.base_target(c.chunk_id, c.cond_digest, &r);
            assert_eq!(crate::engine::error_norm(c, &target), 0.0);
        }
    }
}
