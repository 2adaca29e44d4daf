//! One streaming session per TCP connection.
//!
//! A reader thread decodes frames into a bounded channel, the scheduler actor
//! owns the session state and ticks whenever conditioning is available, and a
//! writer thread encodes outgoing frames. When the actor falls behind, the
//! reader blocks on the full channel and stops reading from the socket.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, Sender};
use log::{info, warn};
use serde::Serialize;

use super::condition::{CondStatus, Conditioner};
use super::trace::{TraceEvent, TraceKind};
use super::wire::{ChunkOut, FrameReader, Message, WireError};
use crate::config::RunConfig;
use crate::engine::{build_engines, DenoiseStep};
use crate::pipeline::{run_pipelined, ClockMode, PipelineItem, PipelineMetrics, PipelineOptions, StageCost};
use crate::scheduler::{Clock, EmissionRecord, Phase, Scheduler, SchedulerStats};
use crate::types::seeded_reference;

/// Inbound channel depth between the socket reader and the actor.
pub const INBOUND_CAPACITY: usize = 8;
/// Outbound channel depth between the actor and the socket writer.
pub const OUTBOUND_CAPACITY: usize = 8;

/// Seconds since the session started, without pacing.
#[derive(Debug)]
pub struct ElapsedClock(Instant);

impl ElapsedClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for ElapsedClock {
    fn tick_end(&mut self, _tick_index: u64) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub chunks: u64,
    pub scheduler: SchedulerStats,
    /// Simulated pipeline over the emitted chunks.
    pub pipeline: Option<PipelineMetrics>,
}

enum Inbound {
    Message(Message),
    Closed,
}

/// Accepts connections and serves each on its own thread. Stops after
/// `max_sessions` connections when given.
pub fn serve(listener: TcpListener, base: RunConfig, max_sessions: Option<usize>) -> io::Result<()> {
    let base = Arc::new(base);
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let base = Arc::clone(&base);
        let peer = stream.peer_addr().ok();
        handles.push(thread::spawn(move || match handle_connection(stream, &base) {
            Ok(s) => info!("session {peer:?} finished with {} chunks", s.chunks),
            Err(e) => warn!("session {peer:?} failed: {e}"),
        }));
        if max_sessions.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

/// Runs one session to completion on `stream`.
pub fn handle_connection(stream: TcpStream, base: &RunConfig) -> io::Result<SessionSummary> {
    let (in_tx, in_rx) = bounded(INBOUND_CAPACITY);
    let (out_tx, out_rx) = bounded::<Message>(OUTBOUND_CAPACITY);
    let read_half = stream.try_clone()?;
    let mut write_half = stream.try_clone()?;

    let reader = {
        let out_tx = out_tx.clone();
        thread::spawn(move || read_loop(read_half, in_tx, out_tx))
    };
    let writer = thread::spawn(move || -> io::Result<()> {
        for msg in out_rx {
            write_half.write_all(&msg.encode())?;
        }
        write_half.flush()
    });

    let summary = run_actor(base, &in_rx, &out_tx);
    drop(out_tx);
    let written = writer
        .join()
        .unwrap_or_else(|_| Err(io::Error::other("writer panicked")));
    let _ = stream.shutdown(Shutdown::Both);
    drop(in_rx);
    let _ = reader.join();
    written?;
    summary.map_err(io::Error::other)
}

fn read_loop(mut socket: TcpStream, to_actor: Sender<Inbound>, to_writer: Sender<Message>) {
    let mut reader = FrameReader::default();
    let mut buf = [0u8; 8192];
    loop {
        let n = match socket.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        reader.push(&buf[..n]);
        loop {
            let msg = match reader.next_frame() {
                Ok(Some(frame)) => Message::from_frame(&frame),
                Ok(None) => break,
                Err(e) => Err(e),
            };
            match msg {
                Ok(m) => {
                    if to_actor.send(Inbound::Message(m)).is_err() {
                        return;
                    }
                }
                Err(e) => {
                    let fatal = matches!(e, WireError::LengthOverflow { .. });
                    let _ = to_writer.send(Message::Error { message: e.to_string() });
                    if fatal {
                        let _ = to_actor.send(Inbound::Closed);
                        return;
                    }
                }
            }
        }
    }
    let _ = to_actor.send(Inbound::Closed);
}

struct Live {
    run: RunConfig,
    scheduler: Scheduler,
    conditioner: Conditioner,
    engine: Arc<dyn DenoiseStep>,
    clock: ElapsedClock,
    records: Vec<EmissionRecord>,
}

impl Live {
    fn start(run: RunConfig) -> Result<Self, String> {
        let reference = seeded_reference(&run.session);
        let (engine, repair) = build_engines(&run);
        let mut scheduler = Scheduler::new(&run.session)
            .map_err(|e| e.to_string())?
            .with_repair_engine(repair);
        let conditioner = Conditioner::new(&run.session, &reference).map_err(|e| e.to_string())?;
        scheduler.warmup(reference).map_err(|e| e.to_string())?;
        Ok(Self {
            run,
            scheduler,
            conditioner,
            engine,
            clock: ElapsedClock::start(),
            records: Vec::new(),
        })
    }

    fn ready(&self) -> bool {
        let Some(bank) = self.scheduler.bank() else {
            return false;
        };
        self.scheduler.phase() == Phase::Drain
            || bank.stream_is_full()
            || self.conditioner.status(bank.next_chunk_id()) != CondStatus::Pending
    }

    fn drive(&mut self, out: &Sender<Message>) -> Result<(), String> {
        while self.scheduler.phase() != Phase::Done && self.ready() {
            let emitted = self
                .scheduler
                .tick(self.engine.as_ref(), &mut self.conditioner, &mut self.clock)
                .map_err(|e| e.to_string())?;
            if let Some(r) = emitted {
                let msg = Message::ChunkOut(ChunkOut {
                    chunk_id: r.chunk_id,
                    pts_start: r.video_pts_range.0,
                    pts_end: r.video_pts_range.1,
                    latents: r.latents.iter().flatten().map(|&v| v as f32).collect(),
                    emitted_at: r.wall_time_emitted,
                });
                out.send(msg).map_err(|_| "client writer closed".to_string())?;
                self.records.push(r);
            }
        }
        Ok(())
    }

    fn summary(&self) -> SessionSummary {
        let items: Vec<PipelineItem> = self.records.iter().map(PipelineItem::from).collect();
        let costs = StageCost::from_settings(&self.run.pipeline, &self.run.session);
        let opts = PipelineOptions::for_session(&self.run.session, self.run.pipeline.queue_capacity);
        let pipeline = run_pipelined(&items, &costs, &opts, ClockMode::Sim)
            .ok()
            .and_then(|r| r.metrics);
        SessionSummary {
            chunks: self.records.len() as u64,
            scheduler: self.scheduler.stats().clone(),
            pipeline,
        }
    }
}

fn run_actor(base: &RunConfig, inbound: &Receiver<Inbound>, out: &Sender<Message>) -> Result<SessionSummary, String> {
    let fail = |message: String| {
        let _ = out.send(Message::Error {
            message: message.clone(),
        });
        Err(message)
    };
    let mut live: Option<Live> = None;
    for msg in inbound {
        let msg = match msg {
            Inbound::Message(m) => m,
            Inbound::Closed => break,
        };
        let step = match (&mut live, msg) {
            (None, Message::Hello { overrides }) => match base.clone().apply(&overrides) {
                Ok(run) => Live::start(run).map(|l| live = Some(l)),
                Err(e) => Err(format!("bad Hello overrides: {e}")),
            },
            (None, other) => Err(format!("expected Hello, got {:?}", other.to_frame().frame_type)),
            (Some(_), Message::Hello { .. }) => Err("duplicate Hello".to_string()),
            (Some(l), Message::Audio { samples }) => l.conditioner.push_audio(&samples).map_err(|e| e.to_string()),
            (Some(l), Message::Prompt { pts, text }) => l.conditioner.push_prompt(pts, text).map_err(|e| e.to_string()),
            (Some(l), Message::End { pts }) => l.conditioner.finish(pts).map_err(|e| e.to_string()),
            (Some(_), other) => Err(format!("unexpected client frame {:?}", other.to_frame().frame_type)),
        };
        if let Err(e) = step {
            return fail(e);
        }
        if let Some(l) = live.as_mut() {
            if let Err(e) = l.drive(out) {
                return fail(e);
            }
            if l.scheduler.phase() == Phase::Done {
                let summary = l.summary();
                let json = serde_json::to_string(&summary).expect("summary serializes");
                let _ = out.send(Message::Metrics { json });
                let _ = out.send(Message::End { pts: None });
                return Ok(summary);
            }
        }
    }
    fail("connection closed before the session ended".to_string())
}

/// Client side: streams a trace to `addr` and collects every server frame
/// until End or Error.
pub fn stream_trace(addr: impl ToSocketAddrs, overrides: &str, trace: &[TraceEvent]) -> io::Result<Vec<Message>> {
    let mut socket = TcpStream::connect(addr)?;
    let reader_socket = socket.try_clone()?;
    let collector = thread::spawn(move || collect_frames(reader_socket));
    socket.write_all(
        &Message::Hello {
            overrides: overrides.to_string(),
        }
        .encode(),
    )?;
    let mut audio_end = 0u64;
    for e in trace {
        let msg = match &e.kind {
            TraceKind::Audio { samples } => {
                let at = (e.pts * super::audio::AUDIO_HZ as f64).round() as u64;
                if at > audio_end {
                    let gap = vec![0.0; (at - audio_end) as usize];
                    socket.write_all(&Message::Audio { samples: gap }.encode())?;
                    audio_end = at;
                }
                audio_end += samples.len() as u64;
                Message::Audio {
                    samples: samples.clone(),
                }
            }
            TraceKind::Prompt { text } => Message::Prompt {
                pts: e.pts,
                text: text.clone(),
            },
            TraceKind::End => Message::End { pts: Some(e.pts) },
        };
        socket.write_all(&msg.encode())?;
    }
    socket.flush()?;
    collector.join().map_err(|_| io::Error::other("collector panicked"))?
}

fn collect_frames(mut socket: TcpStream) -> io::Result<Vec<Message>> {
    let mut reader = FrameReader::default();
    let mut buf = [0u8; 8192];
    let mut out = Vec::new();
    loop {
        while let Some(frame) = reader.next_frame().map_err(io::Error::other)? {
            let msg = Message::from_frame(&frame).map_err(io::Error::other)?;
            let last = matches!(msg, Message::End { .. } | Message::Error { .. });
            out.push(msg);
            if last {
                return Ok(out);
            }
        }
        let n = socket.read(&mut buf)?;
        if n == 0 {
            return Ok(out);
        }
        reader.push(&buf[..n]);
    }
}
