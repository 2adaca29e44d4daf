//! Chunkwise diffusion-forcing tick loop.
//!
//! Every tick admits at most one pure-noise chunk, runs `micro_steps` denoiser
//! calls over the whole stream, and promotes the head once it is clean. With
//! `stream_chunks = S` the stream stays staggered: after admission its chunks
//! sit `micro_steps` rungs apart, the first chunk is emitted on tick `S - 1`,
//! and from then on one chunk leaves per tick. Every `refine_interval_chunks`
//! emissions the short-term memory is re-noised and repaired against the
//! reference and long-term memory only.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, ContextView, GroupTag, MemoryBank};
use crate::config::{chunk_duration, validate_config, ConfigError, SessionConfig};
use crate::engine::{DenoiseStep, EngineError, StepRecord, StepRequest};
use crate::ladder::{NoiseLadder, NoiseLevel};
use crate::mask::build_group_mask;
use crate::session::{CondError, ConditionSlice, ConditionSource, Conditioner, TraceEvent};
use crate::types::{chunk_noise, Chunk, Latent, NoiseDomain};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("scheduler already warmed up")]
    DoubleWarmup,
    #[error("scheduler not warmed up")]
    NotWarmedUp,
    #[error("session already finished")]
    Finished,
    #[error("engine failed on tick {tick}: {source}")]
    Engine {
        tick: u64,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Condition(#[from] CondError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    Steady,
    Drain,
    Done,
}

/// One emitted chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub chunk_id: u64,
    /// `[start, end)` on the video timeline, seconds.
    pub video_pts_range: (f64, f64),
    /// Clock reading at the end of the emitting tick, seconds.
    pub wall_time_emitted: f64,
    pub tick_index: u64,
    /// Flow times the chunk passed through, ending at 0.
    pub noise_history: Vec<f64>,
    /// Whether memory refinement ran on the emitting tick.
    pub refined_memory_flag: bool,
    pub latents: Vec<Vec<f64>>,
}

impl EmissionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("emission records serialize")
    }
}

/// Renders records as line-delimited JSON.
pub fn format_emission_log(records: &[EmissionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn parse_emission_log(text: &str) -> Result<Vec<EmissionRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Timestamps emissions.
pub trait Clock {
    /// Called once at the end of each tick; returns seconds since session start.
    fn tick_end(&mut self, tick_index: u64) -> f64;
}

/// Each tick lasts exactly `tick_s` seconds.
#[derive(Debug, Clone, Copy)]
pub struct SimClock {
    pub tick_s: f64,
}

impl Clock for SimClock {
    fn tick_end(&mut self, tick_index: u64) -> f64 {
        (tick_index + 1) as f64 * self.tick_s
    }
}

/// Paces ticks against a monotonic clock and counts overruns.
#[derive(Debug)]
pub struct RealtimeClock {
    start: Instant,
    tick: Duration,
    pub overruns: u64,
}

impl RealtimeClock {
    pub fn new(tick_s: f64) -> Self {
        Self {
            start: Instant::now(),
            tick: Duration::from_secs_f64(tick_s),
            overruns: 0,
        }
    }
}

impl Clock for RealtimeClock {
    fn tick_end(&mut self, tick_index: u64) -> f64 {
        let deadline = self.start + self.tick * (tick_index as u32 + 1);
        let now = Instant::now();
        if now < deadline {
            std::thread::sleep(deadline - now);
        } else if now > deadline {
            self.overruns += 1;
            warn!("tick {tick_index} overran its deadline by {:?}", now - deadline);
        }
        self.start.elapsed().as_secs_f64()
    }
}

/// Result of one memory refinement.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub chunk_id: u64,
    pub before: Chunk,
    pub after: Chunk,
    pub bank_before: MemoryBank,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub ticks: u64,
    /// Denoiser calls made by ticks over the stream.
    pub step_calls: u64,
    /// Per-chunk evaluations inside those calls.
    pub chunk_steps: u64,
    /// Denoiser calls made by memory refinement.
    pub refine_step_calls: u64,
    pub refinements: u64,
    pub skipped_refinements: u64,
    pub first_emission_tick: Option<u64>,
    /// Stream step calls made up to and including the first emission.
    pub first_emission_nfe: Option<u64>,
    pub steady_ticks: u64,
    pub steady_emissions: u64,
}

/// The scheduler actor; sole writer of its [`MemoryBank`].
#[derive(Clone)]
pub struct Scheduler {
    config: SessionConfig,
    ladder: NoiseLadder,
    bank: Option<MemoryBank>,
    tick_index: u64,
    chunks_emitted: u64,
    next_refine_at: u64,
    phase: Phase,
    conds: HashMap<u64, ConditionSlice>,
    histories: HashMap<u64, Vec<f64>>,
    tick_start_levels: Vec<f64>,
    stats: SchedulerStats,
    repair: Option<Arc<dyn DenoiseStep>>,
    trajectory: Option<Vec<StepRecord>>,
    last_refine: Option<RefineOutcome>,
}

impl fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scheduler")
            .field("tick_index", &self.tick_index)
            .field("chunks_emitted", &self.chunks_emitted)
            .field("phase", &self.phase)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl Scheduler {
    pub fn new(config: &SessionConfig) -> Result<Self, SchedulerError> {
        let config = validate_config(config.clone())?;
        Ok(Self {
            ladder: config.ladder(),
            next_refine_at: config.refine_interval_chunks as u64,
            config,
            bank: None,
            tick_index: 0,
            chunks_emitted: 0,
            phase: Phase::Warmup,
            conds: HashMap::new(),
            histories: HashMap::new(),
            tick_start_levels: Vec::new(),
            stats: SchedulerStats::default(),
            repair: None,
            trajectory: None,
            last_refine: None,
        })
    }

    /// Uses `engine` for memory refinement instead of the tick engine.
    pub fn with_repair_engine(mut self, engine: Arc<dyn DenoiseStep>) -> Self {
        self.repair = Some(engine);
        self
    }

    /// Keeps a per-call log of every stream chunk's noise transition.
    pub fn record_trajectory(mut self) -> Self {
        self.trajectory = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn ladder(&self) -> &NoiseLadder {
        &self.ladder
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn tick_index(&self) -> u64 {
        self.tick_index
    }

    pub fn chunks_emitted(&self) -> u64 {
        self.chunks_emitted
    }

    pub fn next_refine_at(&self) -> u64 {
        self.next_refine_at
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    pub fn stats(&self) -> &SchedulerStats {
        &self.stats
    }

    /// Stream flow times right after the most recent admission, cleanest first.
    pub fn tick_start_levels(&self) -> &[f64] {
        &self.tick_start_levels
    }

    pub fn trajectory(&self) -> Option<&[StepRecord]> {
        self.trajectory.as_deref()
    }

    pub fn last_refine(&self) -> Option<&RefineOutcome> {
        self.last_refine.as_ref()
    }

    /// Initializes the bank with the reference; the first admission happens on tick 0.
    pub fn warmup(&mut self, reference: Latent) -> Result<(), SchedulerError> {
        if self.bank.is_some() {
            return Err(SchedulerError::DoubleWarmup);
        }
        self.bank = Some(MemoryBank::init(reference, &self.config)?);
        self.phase = Phase::Warmup;
        Ok(())
    }

    pub fn tick(
        &mut self,
        engine: &dyn DenoiseStep,
        source: &mut dyn ConditionSource,
        clock: &mut dyn Clock,
    ) -> Result<Option<EmissionRecord>, SchedulerError> {
        if self.phase == Phase::Done {
            return Err(SchedulerError::Finished);
        }
        let tick = self.tick_index;
        let bank = self.bank.as_mut().ok_or(SchedulerError::NotWarmedUp)?;

        if self.phase != Phase::Drain && !bank.stream_is_full() {
            let id = bank.next_chunk_id();
            match source.next_condition(id)? {
                Some(cond) => {
                    let chunk = Chunk::pure_noise(&self.config, &self.ladder, id, cond.digest());
                    bank.admit_noise_chunk(chunk, &self.ladder)?;
                    self.conds.insert(id, cond);
                    self.histories.insert(id, vec![1.0]);
                }
                None => {
                    debug!("conditioning exhausted at chunk {id}, draining");
                    self.phase = Phase::Drain;
                }
            }
        }
        if bank.stream_len() == 0 {
            if self.phase == Phase::Drain {
                self.phase = Phase::Done;
                self.tick_index += 1;
                self.stats.ticks += 1;
                return Ok(None);
            }
            return Err(BufferError::State("empty stream outside drain".into()).into());
        }
        if self.phase == Phase::Warmup && bank.stream_is_full() {
            self.phase = Phase::Steady;
        }
        let steady = self.phase == Phase::Steady;
        self.tick_start_levels = bank.stream().map(|c| c.noise_level.t).collect();

        for _ in 0..self.config.micro_steps {
            let view = bank.snapshot_context();
            let mask = build_group_mask(&view.layout).expect("bank layouts start with the reference");
            let conds: Vec<ConditionSlice> = view.stream.iter().map(|c| self.conds[&c.chunk_id].clone()).collect();
            let out = engine
                .step(&StepRequest {
                    stream: &view.stream,
                    context: &view,
                    mask: &mask,
                    conds: &conds,
                    ladder: &self.ladder,
                })
                .map_err(|source| SchedulerError::Engine { tick, source })?;
            for (before, after) in view.stream.iter().zip(&out) {
                if let Some(h) = self.histories.get_mut(&before.chunk_id) {
                    h.push(after.noise_level.t);
                }
                if let Some(log) = self.trajectory.as_mut() {
                    log.push(StepRecord {
                        chunk_id: before.chunk_id,
                        nfe_index: self.stats.step_calls,
                        t_before: before.noise_level.t,
                        t_after: after.noise_level.t,
                    });
                }
            }
            bank.apply_step(out)?;
            self.stats.step_calls += 1;
            self.stats.chunk_steps += view.stream.len() as u64;
        }

        let mut record = None;
        if bank.stream().next().is_some_and(Chunk::is_clean) {
            let previous_st = bank.short_term().map(|c| c.chunk_id);
            let chunk = bank.promote_clean_chunk()?;
            if let Some(prev) = previous_st {
                self.conds.remove(&prev);
            }
            self.chunks_emitted += 1;
            if self.stats.first_emission_tick.is_none() {
                self.stats.first_emission_tick = Some(tick);
                self.stats.first_emission_nfe = Some(self.stats.step_calls);
            }
            if steady {
                self.stats.steady_emissions += 1;
            }
            record = Some(EmissionRecord {
                chunk_id: chunk.chunk_id,
                video_pts_range: self.config.chunk_span(chunk.chunk_id),
                wall_time_emitted: 0.0,
                tick_index: tick,
                noise_history: self.histories.remove(&chunk.chunk_id).unwrap_or_default(),
                refined_memory_flag: false,
                latents: chunk.latents.iter().map(|l| l.data.clone()).collect(),
            });
        }
        if steady {
            self.stats.steady_ticks += 1;
        }

        let mut refined = false;
        if self.chunks_emitted >= self.next_refine_at {
            let repair = self.repair.clone();
            refined = match repair {
                Some(r) => self.refine(r.as_ref())?,
                None => self.refine(engine)?,
            };
        }

        let wall = clock.tick_end(tick);
        if let Some(r) = record.as_mut() {
            r.wall_time_emitted = wall;
            r.refined_memory_flag = refined;
        }
        self.tick_index += 1;
        self.stats.ticks += 1;
        Ok(record)
    }

    /// Re-noises short-term memory to the refinement level and denoises it with
    /// only the reference and long-term memory as context. Returns whether a
    /// refinement ran; a missing short-term entry is skipped.
    pub fn refine(&mut self, engine: &dyn DenoiseStep) -> Result<bool, SchedulerError> {
        self.next_refine_at += self.config.refine_interval_chunks as u64;
        let tick = self.tick_index;
        let bank = self.bank.as_mut().ok_or(SchedulerError::NotWarmedUp)?;
        let Some(original) = bank.short_term().cloned() else {
            warn!("refinement due on tick {tick} but short-term memory is empty; skipping");
            self.stats.skipped_refinements += 1;
            return Ok(false);
        };
        let t_r = self.config.effective_refine_noise_t();
        let rows = bank.short_term().map_or(0, |c| c.latents.len());
        let noise = chunk_noise(
            self.config.rng_seed,
            NoiseDomain::Refinement,
            original.chunk_id,
            rows,
            self.config.latent_dim,
        );
        let mut x = original.clone();
        for (latent, eps) in x.latents.iter_mut().zip(&noise) {
            for (v, e) in latent.data.iter_mut().zip(eps) {
                *v = (1.0 - t_r) * *v + t_r * e;
            }
        }
        x.noise_level = NoiseLevel {
            t: t_r,
            ladder_index: self.ladder.descent_below(t_r).len(),
        };

        let snapshot = bank.snapshot_context();
        let cond = self
            .conds
            .get(&original.chunk_id)
            .cloned()
            .unwrap_or_else(|| ConditionSlice::synthetic(original.chunk_id));
        let conds = [cond];
        while !x.is_clean() {
            let mut layout = vec![GroupTag::Reference];
            layout.extend((0..snapshot.long_term.len()).map(GroupTag::LongTerm));
            layout.push(GroupTag::Stream(0));
            let view = ContextView {
                reference: snapshot.reference.clone(),
                long_term: snapshot.long_term.clone(),
                short_term: None,
                stream: vec![x.clone()],
                layout,
            };
            let mask = build_group_mask(&view.layout).expect("layout starts with the reference");
            x = engine
                .step(&StepRequest {
                    stream: &view.stream,
                    context: &view,
                    mask: &mask,
                    conds: &conds,
                    ladder: &self.ladder,
                })
                .map_err(|source| SchedulerError::Engine { tick, source })?
                .pop()
                .ok_or_else(|| BufferError::State("refinement step returned no chunk".into()))?;
            self.stats.refine_step_calls += 1;
        }
        let bank_before = bank.clone();
        bank.replace_short_term(x.clone())?;
        self.stats.refinements += 1;
        debug!("refined short-term chunk {} on tick {tick}", original.chunk_id);
        self.last_refine = Some(RefineOutcome {
            chunk_id: original.chunk_id,
            before: original,
            after: x,
            bank_before,
        });
        Ok(true)
    }
}

/// Records and counters of a finished session.
#[derive(Debug, Clone)]
pub struct SessionReport {
    pub records: Vec<EmissionRecord>,
    pub stats: SchedulerStats,
    pub phase: Phase,
}

/// Drives warm-up and ticks until the source is exhausted and the stream drained.
pub fn run_with_source(
    scheduler: &mut Scheduler,
    reference: Latent,
    source: &mut dyn ConditionSource,
    engine: &dyn DenoiseStep,
    clock: &mut dyn Clock,
) -> Result<SessionReport, SchedulerError> {
    scheduler.warmup(reference)?;
    let mut records = Vec::new();
    while scheduler.phase() != Phase::Done {
        if let Some(r) = scheduler.tick(engine, source, clock)? {
            records.push(r);
        }
    }
    Ok(SessionReport {
        records,
        stats: scheduler.stats().clone(),
        phase: scheduler.phase(),
    })
}

/// Runs a whole session from a parsed trace.
pub fn run_session(
    config: &SessionConfig,
    reference: Latent,
    trace: &[TraceEvent],
    engine: &dyn DenoiseStep,
    clock: &mut dyn Clock,
) -> Result<SessionReport, SchedulerError> {
    let mut scheduler = Scheduler::new(config)?;
    let mut source = Conditioner::from_trace(scheduler.config(), &reference, trace)?;
    run_with_source(&mut scheduler, reference, &mut source, engine, clock)
}

/// Clock with one chunk duration per tick.
pub fn sim_clock_for(config: &SessionConfig) -> SimClock {
    SimClock {
        tick_s: chunk_duration(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{error_norm, CallCounter, DriftModel, ToyFlowModel};
    use crate::session::FixedConditions;
    use crate::types::seeded_reference;

    fn cfg() -> SessionConfig {
        SessionConfig {
            latent_dim: 4,
            ..Default::default()
        }
    }

    fn started(config: &SessionConfig) -> Scheduler {
        let mut s = Scheduler::new(config).unwrap();
        s.warmup(seeded_reference(config)).unwrap();
        s
    }

    #[test]
    fn warmup_rules() {
        let c = cfg();
        let mut s = started(&c);
        assert_eq!(s.phase(), Phase::Warmup);
        assert_eq!(s.bank().unwrap().stream_len(), 0);
        assert_eq!(s.chunks_emitted(), 0);
        assert!(matches!(
            s.warmup(seeded_reference(&c)),
            Err(SchedulerError::DoubleWarmup)
        ));
        let mut fresh = Scheduler::new(&c).unwrap();
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        assert!(matches!(
            fresh.tick(&m, &mut FixedConditions { num_chunks: 1 }, &mut sim_clock_for(&c)),
            Err(SchedulerError::NotWarmedUp)
        ));
    }

    #[test]
    fn first_emission_on_tick_two() {
        let c = cfg();
        let mut s = started(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let mut src = FixedConditions { num_chunks: 10 };
        let mut clock = sim_clock_for(&c);
        assert!(s.tick(&m, &mut src, &mut clock).unwrap().is_none());
        assert!(s.tick(&m, &mut src, &mut clock).unwrap().is_none());
        let r = s.tick(&m, &mut src, &mut clock).unwrap().unwrap();
        assert_eq!(r.chunk_id, 0);
        assert_eq!(r.tick_index, 2);
        assert!((r.wall_time_emitted - 1.44).abs() < 1e-12);
        assert_eq!(s.phase(), Phase::Steady);
        let r = s.tick(&m, &mut src, &mut clock).unwrap().unwrap();
        assert_eq!(r.chunk_id, 1);
        assert_eq!(s.bank().unwrap().stream_len(), 2);
        assert_eq!(s.tick_start_levels().len(), 3);
    }

    #[test]
    fn single_slot_stream_emits_immediately() {
        let c = SessionConfig {
            stream_chunks: 1,
            ..cfg()
        };
        let mut s = started(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let r = s
            .tick(&m, &mut FixedConditions { num_chunks: 3 }, &mut sim_clock_for(&c))
            .unwrap();
        assert_eq!(r.unwrap().noise_history, vec![1.0, 0.0]);
    }

    #[test]
    fn drain_to_done() {
        let c = cfg();
        let mut s = started(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let mut src = FixedConditions { num_chunks: 0 };
        assert!(s.tick(&m, &mut src, &mut sim_clock_for(&c)).unwrap().is_none());
        assert_eq!(s.phase(), Phase::Done);
        assert!(matches!(
            s.tick(&m, &mut src, &mut sim_clock_for(&c)),
            Err(SchedulerError::Finished)
        ));
    }

    #[test]
    fn short_session_never_reaches_steady() {
        let c = cfg();
        let mut s = Scheduler::new(&c).unwrap();
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let report = run_with_source(
            &mut s,
            seeded_reference(&c),
            &mut FixedConditions { num_chunks: 2 },
            &m,
            &mut sim_clock_for(&c),
        )
        .unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.stats.steady_ticks, 0);
        assert_eq!(report.phase, Phase::Done);
    }

    #[test]
    fn refinement_cadence() {
        let c = cfg();
        let mut s = Scheduler::new(&c).unwrap();
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let report = run_with_source(
            &mut s,
            seeded_reference(&c),
            &mut FixedConditions { num_chunks: 30 },
            &m,
            &mut sim_clock_for(&c),
        )
        .unwrap();
        let fired: Vec<u64> = report
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.refined_memory_flag)
            .map(|(i, _)| i as u64 + 1)
            .collect();
        assert_eq!(fired, [8, 16, 24]);
        assert_eq!(report.stats.refinements, 3);
        // default injection 2/3 leaves two rungs to descend
        assert_eq!(report.stats.refine_step_calls, 6);
    }

    #[test]
    fn exact_refinement_reconstructs() {
        let c = cfg();
        let mut s = started(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let mut src = FixedConditions { num_chunks: 5 };
        let mut clock = sim_clock_for(&c);
        for _ in 0..4 {
            s.tick(&m, &mut src, &mut clock).unwrap();
        }
        let before = s.bank().unwrap().clone();
        assert!(s.refine(&m).unwrap());
        let after = s.bank().unwrap();
        let a = before.short_term().unwrap();
        let b = after.short_term().unwrap();
        assert_eq!(a.chunk_id, b.chunk_id);
        for (x, y) in a.latents.iter().zip(&b.latents) {
            for (p, q) in x.data.iter().zip(&y.data) {
                assert!((p - q).abs() < 1e-9);
            }
        }
        assert!(before.long_term().eq(after.long_term()));
        assert!(before.stream().eq(after.stream()));
        assert_eq!(before.reference(), after.reference());
    }

    #[test]
    fn refine_without_short_term_is_skipped() {
        let c = cfg();
        let mut s = started(&c);
        let m = ToyFlowModel::mixture(&c, 0.5, 0.5);
        assert!(!s.refine(&m).unwrap());
        assert_eq!(s.stats().skipped_refinements, 1);
        assert_eq!(s.next_refine_at(), 16);
    }

    #[test]
    fn drift_refinement_reduces_error() {
        let c = cfg();
        let base = ToyFlowModel::mixture(&c, 0.5, 0.5);
        let drift = DriftModel::uniform(base.clone(), 0.01);
        let mut s = Scheduler::new(&c).unwrap().with_repair_engine(Arc::new(base.clone()));
        let reference = seeded_reference(&c);
        let report = run_with_source(
            &mut s,
            reference.clone(),
            &mut FixedConditions { num_chunks: 20 },
            &drift,
            &mut sim_clock_for(&c),
        )
        .unwrap();
        let errors: Vec<f64> = report
            .records
            .iter()
            .map(|r| {
                let goal = base.base_target(r.chunk_id, ConditionSlice::synthetic(r.chunk_id).digest(), &reference);
                let chunk = Chunk::from_rows(&c, r.chunk_id, r.latents.clone(), c.ladder().clean(), 0);
                error_norm(&chunk, &goal)
            })
            .collect();
        // n-th emission (1-based) is n biases away until refinement resets memory
        for (i, e) in errors.iter().enumerate().take(8) {
            assert!((e - 0.01 * (i + 1) as f64).abs() < 1e-9, "{i}: {e}");
        }
        assert!((errors[8] - 0.01).abs() < 1e-9);
        assert!((errors[15] - 0.08).abs() < 1e-9);
    }

    #[test]
    fn step_calls_counted() {
        let c = cfg();
        let m = CallCounter::new(ToyFlowModel::mixture(&c, 0.5, 0.5));
        let mut s = Scheduler::new(&c).unwrap();
        let report = run_with_source(
            &mut s,
            seeded_reference(&c),
            &mut FixedConditions { num_chunks: 12 },
            &m,
            &mut sim_clock_for(&c),
        )
        .unwrap();
        assert_eq!(report.records.len(), 12);
        assert_eq!(report.stats.step_calls, 12 + 2);
        assert_eq!(report.stats.chunk_steps, 3 * 12);
        assert_eq!(m.chunk_steps() as u64, 3 * 12 + report.stats.refine_step_calls);
        assert_eq!(
            m.calls() as u64,
            report.stats.step_calls + report.stats.refine_step_calls
        );
    }
}
