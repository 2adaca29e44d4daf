//! Two-stage denoise → decode pipeline: a discrete-event simulation on an
//! integer microsecond clock, a threaded real-time mode, emission metrics and
//! the parallel-attention communication cost model.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::{self, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, TrySendError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{chunk_duration, PipelineSettings, SessionConfig};
use crate::scheduler::EmissionRecord;

/// Simulation time resolution, microseconds.
pub const QUANTUM_US: u64 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("invalid stage cost: {0}")]
    Cost(String),
    #[error("queue capacity must be at least 1")]
    QueueCapacity,
    #[error("event log is empty")]
    EmptyLog,
    #[error("event log has no decode_end events")]
    NoDecodes,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub denoise_ms_per_tick: f64,
    pub decode_ms_per_chunk: f64,
    /// Multiplier on denoise cost, in (0, 1].
    pub fp8: f64,
    /// Multiplier on denoise cost, in (0, 1].
    pub kernel_fusion: f64,
    /// Extra denoise-stage time on ticks that refine memory.
    pub refine_ms: f64,
}

impl StageCost {
    pub fn new(denoise_ms: f64, decode_ms: f64) -> Self {
        Self {
            denoise_ms_per_tick: denoise_ms,
            decode_ms_per_chunk: decode_ms,
            fp8: 1.0,
            kernel_fusion: 1.0,
            refine_ms: 0.0,
        }
    }

    /// Tick cost defaults to the chunk duration.
    pub fn from_settings(settings: &PipelineSettings, session: &SessionConfig) -> Self {
        Self {
            denoise_ms_per_tick: settings.denoise_ms.unwrap_or(chunk_duration(session) * 1000.0),
            decode_ms_per_chunk: settings.decode_ms,
            fp8: settings.fp8,
            kernel_fusion: settings.kernel_fusion,
            refine_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.denoise_ms_per_tick > 0.0 && self.denoise_ms_per_tick.is_finite()) {
            return Err(PipelineError::Cost(format!(
                "denoise_ms {} must be > 0",
                self.denoise_ms_per_tick
            )));
        }
        if !(self.decode_ms_per_chunk >= 0.0 && self.decode_ms_per_chunk.is_finite()) {
            return Err(PipelineError::Cost(format!(
                "decode_ms {} must be >= 0",
                self.decode_ms_per_chunk
            )));
        }
        for (name, m) in [("fp8", self.fp8), ("kernel_fusion", self.kernel_fusion)] {
            if !(m > 0.0 && m <= 1.0) {
                return Err(PipelineError::Cost(format!("{name} multiplier {m} must be in (0, 1]")));
            }
        }
        if !(self.refine_ms >= 0.0 && self.refine_ms.is_finite()) {
            return Err(PipelineError::Cost(format!(
                "refine_ms {} must be >= 0",
                self.refine_ms
            )));
        }
        Ok(())
    }

    pub fn effective_denoise_ms(&self) -> f64 {
        self.denoise_ms_per_tick * self.fp8 * self.kernel_fusion
    }

    fn denoise_us(&self) -> u64 {
        ms_to_us(self.effective_denoise_ms())
    }

    fn decode_us(&self) -> u64 {
        ms_to_us(self.decode_ms_per_chunk)
    }
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

/// Scheduling facts the pipeline needs about one emitted chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineItem {
    pub chunk_id: u64,
    pub refined: bool,
}

impl From<&EmissionRecord> for PipelineItem {
    fn from(r: &EmissionRecord) -> Self {
        Self {
            chunk_id: r.chunk_id,
            refined: r.refined_memory_flag,
        }
    }
}

/// `n` plain chunks with ids `0..n`.
pub fn plain_items(n: u64) -> Vec<PipelineItem> {
    (0..n)
        .map(|chunk_id| PipelineItem {
            chunk_id,
            refined: false,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    DenoiseStart,
    DenoiseEnd,
    DecodeStart,
    DecodeEnd,
    Stall,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DenoiseStart => "denoise_start",
            EventKind::DenoiseEnd => "denoise_end",
            EventKind::DecodeStart => "decode_start",
            EventKind::DecodeEnd => "decode_end",
            EventKind::Stall => "stall",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "denoise_start" => EventKind::DenoiseStart,
            "denoise_end" => EventKind::DenoiseEnd,
            "decode_start" => EventKind::DecodeStart,
            "decode_end" => EventKind::DecodeEnd,
            "stall" => EventKind::Stall,
            other => return Err(format!("unknown event type {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub kind: EventKind,
    pub chunk_id: u64,
    pub timestamp_us: u64,
}

/// `event_type,chunk_id,timestamp_ms` lines.
pub fn format_event_log(events: &[PipelineEvent]) -> String {
    let mut out = String::new();
    for e in events {
        writeln!(out, "{},{},{:.3}", e.kind, e.chunk_id, e.timestamp_us as f64 / 1000.0).unwrap();
    }
    out
}

pub fn parse_event_log(text: &str) -> Result<Vec<PipelineEvent>, PipelineError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PipelineError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        let [kind, id, ts] = fields[..] else {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        };
        let kind = kind.parse().map_err(err)?;
        let chunk_id = id.parse().map_err(|e| err(format!("chunk id: {e}")))?;
        let ms: f64 = ts.parse().map_err(|e| err(format!("timestamp: {e}")))?;
        events.push(PipelineEvent {
            kind,
            chunk_id,
            timestamp_us: ms_to_us(ms),
        });
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub chunks: u64,
    pub ttff_s: f64,
    pub rtf: f64,
    pub mean_period_ms: f64,
    pub jitter_ms: f64,
    pub max_queue_depth: usize,
    pub elapsed_s: f64,
    pub stalls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub events: Vec<PipelineEvent>,
    /// `None` when there were no chunks.
    pub metrics: Option<PipelineMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Sim,
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub queue_capacity: usize,
    /// Ticks before the first chunk is clean.
    pub warmup_ticks: u64,
    pub chunk_duration_s: f64,
}

impl PipelineOptions {
    pub fn for_session(config: &SessionConfig, queue_capacity: usize) -> Self {
        Self {
            queue_capacity,
            warmup_ticks: config.warmup_ticks() as u64,
            chunk_duration_s: chunk_duration(config),
        }
    }
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self::for_session(&SessionConfig::default(), 2)
    }
}

fn denoise_span_us(index: usize, item: &PipelineItem, costs: &StageCost, opts: &PipelineOptions) -> u64 {
    let ticks = if index == 0 { opts.warmup_ticks.max(1) } else { 1 };
    let refine = if item.refined { ms_to_us(costs.refine_ms) } else { 0 };
    ticks * costs.denoise_us() + refine
}

pub fn run_pipelined(
    items: &[PipelineItem],
    costs: &StageCost,
    opts: &PipelineOptions,
    mode: ClockMode,
) -> Result<PipelineRun, PipelineError> {
    costs.validate()?;
    if opts.queue_capacity == 0 {
        return Err(PipelineError::QueueCapacity);
    }
    let events = match mode {
        ClockMode::Sim => simulate(items, costs, opts),
        ClockMode::Realtime => run_threads(items, costs, opts),
    };
    finish(events, opts)
}

fn finish(events: Vec<PipelineEvent>, opts: &PipelineOptions) -> Result<PipelineRun, PipelineError> {
    let metrics = if events.is_empty() {
        None
    } else {
        Some(compute_metrics(&events, opts.chunk_duration_s)?)
    };
    Ok(PipelineRun { events, metrics })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    // decode completions at a given instant free the queue before denoise completions push into it
    DecodeEnd(usize),
    DenoiseEnd(usize),
}

struct Sim<'a> {
    items: &'a [PipelineItem],
    costs: &'a StageCost,
    opts: &'a PipelineOptions,
    heap: BinaryHeap<Reverse<(u64, Pending)>>,
    queue: VecDeque<usize>,
    blocked: Option<usize>,
    decoding: bool,
    events: Vec<PipelineEvent>,
}

impl Sim<'_> {
    fn log(&mut self, kind: EventKind, index: usize, now: u64) {
        self.events.push(PipelineEvent {
            kind,
            chunk_id: self.items[index].chunk_id,
            timestamp_us: now,
        });
    }

    fn start_denoise(&mut self, index: usize, now: u64) {
        if index < self.items.len() {
            self.log(EventKind::DenoiseStart, index, now);
            let end = now + denoise_span_us(index, &self.items[index], self.costs, self.opts);
            self.heap.push(Reverse((end, Pending::DenoiseEnd(index))));
        }
    }

    fn try_decode(&mut self, now: u64) {
        if self.decoding {
            return;
        }
        let Some(index) = self.queue.pop_front() else {
            return;
        };
        self.decoding = true;
        self.log(EventKind::DecodeStart, index, now);
        self.heap
            .push(Reverse((now + self.costs.decode_us(), Pending::DecodeEnd(index))));
        if let Some(b) = self.blocked.take() {
            self.queue.push_back(b);
            self.start_denoise(b + 1, now);
        }
    }
}

fn simulate(items: &[PipelineItem], costs: &StageCost, opts: &PipelineOptions) -> Vec<PipelineEvent> {
    let mut sim = Sim {
        items,
        costs,
        opts,
        heap: BinaryHeap::new(),
        queue: VecDeque::new(),
        blocked: None,
        decoding: false,
        events: Vec::new(),
    };
    sim.start_denoise(0, 0);
    while let Some(Reverse((now, pending))) = sim.heap.pop() {
        match pending {
            Pending::DenoiseEnd(i) => {
                sim.log(EventKind::DenoiseEnd, i, now);
                if sim.queue.len() < opts.queue_capacity {
                    sim.queue.push_back(i);
                    sim.start_denoise(i + 1, now);
                } else {
                    sim.log(EventKind::Stall, i, now);
                    sim.blocked = Some(i);
                }
                sim.try_decode(now);
            }
            Pending::DecodeEnd(i) => {
                sim.log(EventKind::DecodeEnd, i, now);
                sim.decoding = false;
                sim.try_decode(now);
            }
        }
    }
    sim.events
}

fn run_threads(items: &[PipelineItem], costs: &StageCost, opts: &PipelineOptions) -> Vec<PipelineEvent> {
    if items.is_empty() {
        return Vec::new();
    }
    let start = Instant::now();
    let log = Arc::new(Mutex::new(Vec::new()));
    let record = {
        let log = Arc::clone(&log);
        move |kind, chunk_id| {
            let timestamp_us = start.elapsed().as_micros() as u64;
            log.lock().expect("event log lock").push(PipelineEvent {
                kind,
                chunk_id,
                timestamp_us,
            });
        }
    };
    let (tx, rx) = bounded::<PipelineItem>(opts.queue_capacity);
    let decode = Duration::from_micros(costs.decode_us());
    thread::scope(|s| {
        let rec = record.clone();
        s.spawn(move || {
            for item in rx {
                rec(EventKind::DecodeStart, item.chunk_id);
                thread::sleep(decode);
                rec(EventKind::DecodeEnd, item.chunk_id);
            }
        });
        let mut deadline = start;
        for (i, item) in items.iter().enumerate() {
            record(EventKind::DenoiseStart, item.chunk_id);
            deadline += Duration::from_micros(denoise_span_us(i, item, costs, opts));
            if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
            record(EventKind::DenoiseEnd, item.chunk_id);
            match tx.try_send(*item) {
                Ok(()) => {}
                Err(TrySendError::Full(item)) => {
                    record(EventKind::Stall, item.chunk_id);
                    tx.send(item).expect("decoder alive");
                    deadline = Instant::now();
                }
                Err(TrySendError::Disconnected(_)) => unreachable!("decoder exits only after the sender drops"),
            }
        }
        drop(tx);
    });
    let mut events = std::mem::take(&mut *log.lock().expect("event log lock"));
    events.sort_by_key(|e| e.timestamp_us);
    events
}

/// Denoise and decode strictly alternate; chunk 0 still pays the warm-up.
pub fn sequential_baseline(
    items: &[PipelineItem],
    costs: &StageCost,
    opts: &PipelineOptions,
) -> Result<PipelineRun, PipelineError> {
    costs.validate()?;
    let mut events = Vec::new();
    let mut now = 0;
    for (i, item) in items.iter().enumerate() {
        let mut push = |kind, timestamp_us| {
            events.push(PipelineEvent {
                kind,
                chunk_id: item.chunk_id,
                timestamp_us,
            })
        };
        push(EventKind::DenoiseStart, now);
        now += denoise_span_us(i, item, costs, opts);
        push(EventKind::DenoiseEnd, now);
        push(EventKind::DecodeStart, now);
        now += costs.decode_us();
        push(EventKind::DecodeEnd, now);
    }
    finish(events, opts)
}

/// Metrics from an event log. Periods are gaps between consecutive decode
/// completions; rtf is video seconds per wall second over that span, or over
/// the TTFF when only one chunk was decoded.
pub fn compute_metrics(events: &[PipelineEvent], chunk_duration_s: f64) -> Result<PipelineMetrics, PipelineError> {
    if events.is_empty() {
        return Err(PipelineError::EmptyLog);
    }
    let ends: Vec<u64> = events
        .iter()
        .filter(|e| e.kind == EventKind::DecodeEnd)
        .map(|e| e.timestamp_us)
        .collect();
    let (&first, &last) = match (ends.first(), ends.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(PipelineError::NoDecodes),
    };
    let periods: Vec<f64> = ends.windows(2).map(|w| (w[1] - w[0]) as f64 / 1000.0).collect();
    let (mean, jitter) = if periods.is_empty() {
        (0.0, 0.0)
    } else {
        let n = periods.len() as f64;
        let mean = periods.iter().sum::<f64>() / n;
        let var = periods.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let rtf = if ends.len() >= 2 {
        chunk_duration_s * (ends.len() - 1) as f64 / ((last - first) as f64 / 1e6)
    } else {
        chunk_duration_s / (first.max(QUANTUM_US) as f64 / 1e6)
    };
    let mut depth = 0usize;
    let mut max_depth = 0;
    let mut stalls = 0;
    for e in events {
        match e.kind {
            EventKind::DenoiseEnd => {
                depth += 1;
                max_depth = max_depth.max(depth);
            }
            EventKind::DecodeStart => depth = depth.saturating_sub(1),
            EventKind::Stall => stalls += 1,
            _ => {}
        }
    }
    Ok(PipelineMetrics {
        chunks: ends.len() as u64,
        ttff_s: first as f64 / 1e6,
        rtf,
        mean_period_ms: mean,
        jitter_ms: jitter,
        max_queue_depth: max_depth,
        elapsed_s: events.iter().map(|e| e.timestamp_us).max().unwrap_or(0) as f64 / 1e6,
        stalls,
    })
}

/// Steady-state emission period of a run: the median decode-completion gap, in microseconds.
pub fn steady_period_us(events: &[PipelineEvent]) -> Option<u64> {
    let ends: Vec<u64> = events
        .iter()
        .filter(|e| e.kind == EventKind::DecodeEnd)
        .map(|e| e.timestamp_us)
        .collect();
    let mut gaps: Vec<u64> = ends.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[gaps.len() / 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommStrategy {
    TokenLevel,
    FrameLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommConfig {
    pub workers: u64,
    pub layers: u64,
    pub frames: u64,
    pub tokens_per_frame: u64,
    pub context_frames: u64,
    pub bytes_per_token: u64,
}

impl CommConfig {
    /// Two bytes per token unless overridden.
    pub fn new(workers: u64, layers: u64, frames: u64, tokens_per_frame: u64, context_frames: u64) -> Self {
        Self {
            workers,
            layers,
            frames,
            tokens_per_frame,
            context_frames,
            bytes_per_token: 2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("workers", self.workers),
            ("layers", self.layers),
            ("frames", self.frames),
            ("tokens_per_frame", self.tokens_per_frame),
            ("context_frames", self.context_frames),
            ("bytes_per_token", self.bytes_per_token),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("{name} must be >= 1")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    pub messages: u64,
    pub bytes: u64,
}

/// Declared per-step communication cost of sharded attention.
///
/// Token-level sharding runs two all-to-alls per layer in which every worker
/// sends `frames * tokens_per_frame / W` tokens to each peer. Frame-level
/// sharding runs one gather per layer in which every worker shares the keys
/// and values of its slice of the `context_frames` with each peer.
pub fn comm_cost(strategy: CommStrategy, cfg: &CommConfig) -> Result<CommCost, String> {
    cfg.validate()?;
    let pairs = cfg.workers * (cfg.workers - 1);
    let peers = cfg.workers - 1;
    let b = cfg.bytes_per_token;
    Ok(match strategy {
        CommStrategy::TokenLevel => CommCost {
            messages: 2 * cfg.layers * pairs,
            bytes: 2 * cfg.layers * peers * cfg.frames * cfg.tokens_per_frame * b,
        },
        CommStrategy::FrameLevel => CommCost {
            messages: cfg.layers * pairs,
            bytes: cfg.layers * peers * 2 * cfg.context_frames * cfg.tokens_per_frame * b,
        },
    })
}
