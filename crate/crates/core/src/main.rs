use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use streamforge::buffer::parse_layout;
use streamforge::config::{chunk_duration, RunConfig};
use streamforge::engine::build_engines;
use streamforge::mask::build_group_mask;
use streamforge::pipeline::{
    format_event_log, plain_items, run_pipelined, sequential_baseline, ClockMode, PipelineItem, PipelineOptions,
    StageCost,
};
use streamforge::scheduler::{format_emission_log, run_with_source, sim_clock_for, Clock, RealtimeClock, Scheduler};
use streamforge::session::audio::sine;
use streamforge::session::server::serve;
use streamforge::session::trace::simple_trace;
use streamforge::session::{format_trace, parse_trace, Conditioner};
use streamforge::types::seeded_reference;

#[derive(Parser)]
#[command(
    name = "streamforge",
    version,
    about = "Streaming chunkwise diffusion-forcing runtime"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a session from a trace file and write the emission log.
    Run(RunArgs),
    /// Serve sessions over TCP, one per connection.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: String,
        /// Exit after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Print the attention mask of a group layout, e.g. `Ref,LT0,ST,S0,S1`.
    MaskDump {
        #[arg(long)]
        layout: String,
    },
    /// Compare the pipelined and sequential schedules for given stage costs.
    Bench {
        /// Denoise and decode milliseconds, `d,v`.
        #[arg(long)]
        costs: String,
        #[arg(long, default_value_t = 100)]
        chunks: u64,
        #[arg(long, default_value_t = 2)]
        queue: usize,
        /// Write the pipelined event log here.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Write a trace with one prompt and a sine tone.
    MakeTrace {
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value = "a person talks to the camera")]
        prompt: String,
        #[arg(long, default_value_t = 220.0)]
        freq: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "realtime")]
    sim_clock: bool,
    /// Pace ticks against the wall clock.
    #[arg(long)]
    realtime: bool,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the simulated pipeline event log here.
    #[arg(long)]
    events: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut run = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        run = run.apply(&format!("rng_seed = {seed}"))?;
    }
    let bytes = fs::read(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let trace = parse_trace(&bytes)?;
    let reference = seeded_reference(&run.session);
    let mut source = Conditioner::from_trace(&run.session, &reference, &trace)?;
    let (engine, repair) = build_engines(&run);
    let mut scheduler = Scheduler::new(&run.session)?.with_repair_engine(repair);

    let mut sim = sim_clock_for(&run.session);
    let mut realtime = RealtimeClock::new(chunk_duration(&run.session));
    let clock: &mut dyn Clock = if args.realtime { &mut realtime } else { &mut sim };
    let report = run_with_source(&mut scheduler, reference, &mut source, engine.as_ref(), clock)?;
    fs::write(&args.out, format_emission_log(&report.records))
        .with_context(|| format!("writing {}", args.out.display()))?;

    let items: Vec<PipelineItem> = report.records.iter().map(PipelineItem::from).collect();
    let costs = StageCost::from_settings(&run.pipeline, &run.session);
    let opts = PipelineOptions::for_session(&run.session, run.pipeline.queue_capacity);
    let pipelined = run_pipelined(&items, &costs, &opts, ClockMode::Sim)?;
    let sequential = sequential_baseline(&items, &costs, &opts)?;
    if let Some(path) = &args.events {
        fs::write(path, format_event_log(&pipelined.events))?;
    }
    if let Some(path) = &args.metrics {
        let doc = json!({
            "scheduler": report.stats,
            "pipeline": pipelined.metrics,
            "sequential": sequential.metrics,
            "realtime_overruns": realtime.overruns,
        });
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    println!(
        "emitted {} chunks ({:.2} s of video) in {} ticks; {} refinements",
        report.records.len(),
        report.records.len() as f64 * chunk_duration(&run.session),
        report.stats.ticks,
        report.stats.refinements
    );
    if let Some(m) = &pipelined.metrics {
        println!(
            "ttff {:.3} s, rtf {:.3}, period {:.1} ms",
            m.ttff_s, m.rtf, m.mean_period_ms
        );
    }
    Ok(())
}

fn bench(costs: &str, chunks: u64, queue: usize, events: Option<&Path>) -> Result<()> {
    let parts: Vec<f64> = costs
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("costs `{costs}` must be `d,v` in milliseconds"))?;
    let [d, v] = parts[..] else {
        bail!("costs `{costs}` must be `d,v` in milliseconds");
    };
    let costs = StageCost::new(d, v);
    let opts = PipelineOptions {
        queue_capacity: queue,
        ..PipelineOptions::default()
    };
    let items = plain_items(chunks);
    let pipelined = run_pipelined(&items, &costs, &opts, ClockMode::Sim)?;
    let sequential = sequential_baseline(&items, &costs, &opts)?;
    if let Some(path) = events {
        fs::write(path, format_event_log(&pipelined.events))?;
    }
    let doc = json!({
        "denoise_ms": d,
        "decode_ms": v,
        "chunks": chunks,
        "pipelined": pipelined.metrics,
        "sequential": sequential.metrics,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STREAMFORGE_LOG", "warn")).init();
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Serve {
            config,
            listen,
            sessions,
        } => {
            let run = load_config(config.as_deref())?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve(listener, run, sessions)?;
            Ok(())
        }
        Command::MaskDump { layout } => {
            let tags = parse_layout(&layout).map_err(anyhow::Error::msg)?;
            print!("{}", build_group_mask(&tags)?.pretty());
            Ok(())
        }
        Command::Bench {
            costs,
            chunks,
            queue,
            events,
        } => bench(&costs, chunks, queue, events.as_deref()),
        Command::MakeTrace {
            seconds,
            prompt,
            freq,
            out,
        } => {
            let pcm = sine(freq, 0.5, seconds);
            fs::write(&out, format_trace(&simple_trace(&prompt, &pcm, 16_000)))?;
            Ok(())
        }
    }
}
