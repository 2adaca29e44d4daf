use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::DenoiseStep;
use crate::config::SessionConfig;
use crate::scheduler::{run_with_source, sim_clock_for, Scheduler, SchedulerError};
use crate::session::FixedConditions;
use crate::types::Latent;

/// One chunk's transition inside one denoiser call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub chunk_id: u64,
    /// Index of the stream step call, counted from 0 across the session.
    pub nfe_index: u64,
    pub t_before: f64,
    pub t_after: f64,
}

/// Runs the streaming loop over `num_chunks` synthetic conditions and logs
/// every chunk's noise transition. Refinement calls are not part of the log.
pub fn simulate_rollout(
    config: &SessionConfig,
    num_chunks: u64,
    engine: &dyn DenoiseStep,
    reference: Latent,
) -> Result<Vec<StepRecord>, SchedulerError> {
    let mut scheduler = Scheduler::new(config)?.record_trajectory();
    let mut source = FixedConditions { num_chunks };
    run_with_source(
        &mut scheduler,
        reference,
        &mut source,
        engine,
        &mut sim_clock_for(config),
    )?;
    Ok(scheduler.trajectory().unwrap_or_default().to_vec())
}

/// `chunk_id,nfe_index,t_before,t_after` lines, times with four decimals.
pub fn format_trajectory(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{},{},{:.4},{:.4}", r.chunk_id, r.nfe_index, r.t_before, r.t_after).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ToyFlowModel;
    use crate::types::seeded_reference;

    #[test]
    fn golden_two_chunks() {
        let cfg = SessionConfig {
            latent_dim: 2,
            ..Default::default()
        };
        let m = ToyFlowModel::mixture(&cfg, 0.5, 0.5);
        let log = simulate_rollout(&cfg, 2, &m, seeded_reference(&cfg)).unwrap();
        let expected = "\
0,0,1.0000,0.6667
0,1,0.6667,0.3333
1,1,1.0000,0.6667
0,2,0.3333,0.0000
1,2,0.6667,0.3333
1,3,0.3333,0.0000
";
        assert_eq!(format_trajectory(&log), expected);
    }

    #[test]
    fn each_chunk_descends_full_ladder() {
        let cfg = SessionConfig {
            latent_dim: 2,
            micro_steps: 2,
            ..Default::default()
        };
        let m = ToyFlowModel::mixture(&cfg, 0.5, 0.5);
        let log = simulate_rollout(&cfg, 7, &m, seeded_reference(&cfg)).unwrap();
        for id in 0..7 {
            let steps: Vec<_> = log.iter().filter(|r| r.chunk_id == id).collect();
            assert_eq!(steps.len(), 6);
            assert_eq!(steps[0].t_before, 1.0);
            assert_eq!(steps[5].t_after, 0.0);
            assert!(steps
                .windows(2)
                .all(|w| w[0].t_after == w[1].t_before && w[0].nfe_index < w[1].nfe_index));
        }
    }
}
