use std::collections::HashMap;

use proptest::prelude::*;

use streamforge::buffer::{GroupTag, MemoryBank};
use streamforge::config::SessionConfig;
use streamforge::engine::{cfg_fold, partition_steps, toy_flow_step, ToyFlowModel};
use streamforge::mask::{build_group_mask, expand_to_token_mask};
use streamforge::pipeline::{
    comm_cost, plain_items, run_pipelined, sequential_baseline, steady_period_us, ClockMode, CommConfig, CommStrategy,
    PipelineOptions, StageCost, QUANTUM_US,
};
use streamforge::scheduler::{sim_clock_for, Phase, Scheduler};
use streamforge::session::audio::{FeatureExtractor, SAMPLES_PER_FEATURE};
use streamforge::session::condition::window_range;
use streamforge::session::trace::simple_trace;
use streamforge::session::wire::{FrameReader, FrameType, MAX_PAYLOAD};
use streamforge::session::{
    decode_frame, encode_frame, format_trace, parse_trace, segment_prompts, Conditioner, Decoded, FixedConditions,
    Transition, WireError, WireFrame,
};
use streamforge::types::{seeded_reference, Chunk};

fn small_config(stream_chunks: usize, micro_steps: usize) -> SessionConfig {
    SessionConfig {
        stream_chunks,
        micro_steps,
        latent_dim: 2,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
enum BankOp {
    Admit,
    Step,
    Promote,
    Replace,
    AdmitWrongId,
}

fn bank_op() -> impl Strategy<Value = BankOp> {
    prop_oneof![
        3 => Just(BankOp::Admit),
        4 => Just(BankOp::Step),
        2 => Just(BankOp::Promote),
        1 => Just(BankOp::Replace),
        1 => Just(BankOp::AdmitWrongId),
    ]
}

fn lowered(chunk: &Chunk, cfg: &SessionConfig) -> Option<Chunk> {
    let ladder = cfg.ladder();
    let next = chunk.noise_level.next_lower(&ladder)?;
    let mut c = chunk.clone();
    c.noise_level = next;
    Some(c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bank_invariants_under_random_ops(
        s in 1usize..5,
        m in 1usize..3,
        cap in 1usize..5,
        ops in prop::collection::vec(bank_op(), 1..200),
    ) {
        let cfg = SessionConfig { long_term_capacity: cap, ..small_config(s, m) };
        let ladder = cfg.ladder();
        let mut bank = MemoryBank::init(seeded_reference(&cfg), &cfg).unwrap();
        for op in ops {
            let before = bank.clone();
            let result = match op {
                BankOp::Admit => bank.admit_noise_chunk(Chunk::pure_noise(&cfg, &ladder, bank.next_chunk_id(), 0), &ladder),
                BankOp::AdmitWrongId => bank.admit_noise_chunk(Chunk::pure_noise(&cfg, &ladder, bank.next_chunk_id() + 1, 0), &ladder),
                BankOp::Step => {
                    let next: Option<Vec<Chunk>> = bank.stream().map(|c| lowered(c, &cfg)).collect();
                    match next {
                        Some(v) => bank.apply_step(v),
                        None => Ok(()),
                    }
                }
                BankOp::Promote => bank.promote_clean_chunk().map(|_| ()),
                BankOp::Replace => match bank.short_term().cloned() {
                    Some(mut c) => {
                        c.latents[0].data[0] += 1.0;
                        bank.replace_short_term(c)
                    }
                    None => bank.replace_short_term(Chunk::pure_noise(&cfg, &ladder, 0, 0)),
                },
            };
            if result.is_err() {
                prop_assert_eq!(&bank, &before);
            }
            prop_assert!(bank.check_invariants().is_ok(), "{:?}", bank.check_invariants());
            prop_assert!(bank.long_term_len() <= cap);
            prop_assert!(bank.stream_len() <= s);
        }
    }

    #[test]
    fn mask_is_fake_causal(lt in 0usize..4, st in any::<bool>(), stream in 1usize..4) {
        let mut layout = vec![GroupTag::Reference];
        layout.extend((0..lt).map(GroupTag::LongTerm));
        if st {
            layout.push(GroupTag::ShortTerm);
        }
        layout.extend((0..stream).map(GroupTag::Stream));
        let mask = build_group_mask(&layout).unwrap();
        let context = layout.len() - stream;
        for (q, gq) in layout.iter().enumerate() {
            for (k, gk) in layout.iter().enumerate() {
                prop_assert_eq!(mask.allowed[q][k], gq.is_stream() || !gk.is_stream());
            }
        }
        prop_assert_eq!(mask.blocked_cells(), context * stream);
    }

    #[test]
    fn token_mask_is_block_expansion(lt in 0usize..3, stream in 1usize..3, sizes in prop::collection::vec(1usize..5, 6)) {
        let mut layout = vec![GroupTag::Reference];
        layout.extend((0..lt).map(GroupTag::LongTerm));
        layout.extend((0..stream).map(GroupTag::Stream));
        let mask = build_group_mask(&layout).unwrap();
        let counts: HashMap<GroupTag, usize> = layout.iter().zip(&sizes).map(|(g, n)| (*g, *n)).collect();
        let tokens = expand_to_token_mask(&mask, &counts).unwrap();
        let mut expected = 0;
        for (q, gq) in layout.iter().enumerate() {
            for (k, gk) in layout.iter().enumerate() {
                if mask.allowed[q][k] {
                    expected += counts[gq] * counts[gk];
                }
            }
        }
        prop_assert_eq!(tokens.count_allowed(), expected);
        prop_assert_eq!(tokens.size, layout.iter().map(|g| counts[g]).sum::<usize>());
    }

    #[test]
    fn partition_is_balanced(total in 1usize..200, segs in 1usize..20) {
        prop_assume!(segs <= total);
        let parts = partition_steps(total, segs).unwrap();
        prop_assert_eq!(parts.len(), segs);
        prop_assert_eq!(parts[0].start, 0);
        prop_assert_eq!(parts[segs - 1].end, total);
        for w in parts.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[0].len() >= w[1].len());
        }
        let lens: Vec<usize> = parts.iter().map(|r| r.len()).collect();
        prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
    }

    #[test]
    fn cfg_fold_is_affine_in_scale(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..8),
        a in -4.0f64..4.0,
        b in -4.0f64..4.0,
    ) {
        let (u, c): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        prop_assert_eq!(cfg_fold(&u, &c, 0.0).unwrap(), u.clone());
        let fa = cfg_fold(&u, &c, a).unwrap();
        let fb = cfg_fold(&u, &c, b).unwrap();
        let fm = cfg_fold(&u, &c, (a + b) / 2.0).unwrap();
        for i in 0..u.len() {
            prop_assert!((fm[i] - (fa[i] + fb[i]) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_step_lands_and_fixes(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..8),
        t in 0.01f64..1.0,
        frac in 0.0f64..1.0,
    ) {
        let (x, target): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        prop_assert_eq!(toy_flow_step(&x, t, 0.0, &target).unwrap(), target.clone());
        let fixed = toy_flow_step(&target, t, t * frac, &target).unwrap();
        for (a, b) in fixed.iter().zip(&target) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        match decode_frame(&bytes) {
            Ok(Decoded::Frame(frame, used)) => {
                prop_assert_eq!(encode_frame(&frame), bytes[..used].to_vec());
            }
            Ok(Decoded::Incomplete { .. }) => {}
            Err(WireError::UnknownType { offset, .. }) => prop_assert_eq!(offset, 4),
            Err(WireError::LengthOverflow { length, .. }) => prop_assert!(length > MAX_PAYLOAD),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn frames_round_trip(ty in 0usize..7, payload in prop::collection::vec(any::<u8>(), 0..300)) {
        let frame = WireFrame { frame_type: FrameType::ALL[ty], payload };
        let bytes = encode_frame(&frame);
        prop_assert_eq!(decode_frame(&bytes).unwrap(), Decoded::Frame(frame.clone(), bytes.len()));
        let mut reader = FrameReader::default();
        for piece in bytes.chunks(7) {
            reader.push(piece);
        }
        prop_assert_eq!(reader.next_frame().unwrap(), Some(frame));
    }

    #[test]
    fn trace_round_trips(n in 0usize..5000, piece in 1usize..4000) {
        let pcm: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        let events = simple_trace("hello there", &pcm, piece);
        let text = format_trace(&events);
        prop_assert_eq!(parse_trace(text.as_bytes()).unwrap(), events);
    }

    #[test]
    fn audio_count_is_ceil(n in 0usize..40_000) {
        let ex = FeatureExtractor::new(8).unwrap();
        prop_assert_eq!(ex.aggregate(&vec![0.25; n]).len(), n.div_ceil(SAMPLES_PER_FEATURE));
    }

    #[test]
    fn windows_cover_and_overlap(overlap in 0usize..4, chunks in 2u64..30) {
        let cfg = SessionConfig { audio_overlap_features: overlap, ..Default::default() };
        let total = 12 * chunks as usize;
        let mut covered = vec![false; total];
        for c in 0..chunks {
            for i in window_range(&cfg, c, total) {
                covered[i] = true;
            }
        }
        prop_assert!(covered.iter().all(|c| *c));
        for c in 1..chunks.saturating_sub(1) {
            let a = window_range(&cfg, c, total);
            let b = window_range(&cfg, c + 1, total);
            prop_assert_eq!(a.end.saturating_sub(b.start), 2 * overlap);
        }
    }

    #[test]
    fn prompt_totality(updates in prop::collection::vec(0.0f64..9.0, 0..6)) {
        let cfg = SessionConfig::default();
        let mut ups: Vec<(f64, String)> = vec![(0.0, "p0".into())];
        let mut sorted = updates.clone();
        sorted.sort_by(f64::total_cmp);
        ups.extend(sorted.iter().enumerate().map(|(i, p)| (*p, format!("p{}", i + 1))));
        let n = 20;
        let tags = segment_prompts(&ups, &cfg, n).unwrap();
        prop_assert_eq!(tags.len(), n as usize);
        let cross = tags.iter().filter(|(_, t)| *t == Transition::CrossPrompt).count();
        let inside = (0..n)
            .filter(|&c| {
                let (a, b) = cfg.chunk_span(c);
                ups.iter().any(|(p, _)| *p > a && *p < b)
            })
            .count();
        prop_assert_eq!(cross, inside);
    }

    #[test]
    fn bottleneck_law(d in 1u32..600_000, v in 0u32..600_000, queue in 1usize..4) {
        let costs = StageCost::new(d as f64 / 1000.0, v as f64 / 1000.0);
        let opts = PipelineOptions { queue_capacity: queue, ..PipelineOptions::default() };
        let run = run_pipelined(&plain_items(30), &costs, &opts, ClockMode::Sim).unwrap();
        let period = steady_period_us(&run.events).unwrap();
        prop_assert!(period.abs_diff(d.max(v) as u64) <= QUANTUM_US);
        let again = run_pipelined(&plain_items(30), &costs, &opts, ClockMode::Sim).unwrap();
        prop_assert_eq!(&run, &again);
        let seq = sequential_baseline(&plain_items(30), &costs, &opts).unwrap();
        if v > 0 {
            prop_assert!(run.metrics.unwrap().elapsed_s < seq.metrics.unwrap().elapsed_s);
        }
    }

    #[test]
    fn realtime_criterion(d in 1u32..1000, v in 0u32..1000) {
        let costs = StageCost::new(d as f64, v as f64);
        let run = run_pipelined(&plain_items(20), &costs, &PipelineOptions::default(), ClockMode::Sim).unwrap();
        let rtf = run.metrics.unwrap().rtf;
        prop_assert_eq!(rtf >= 1.0 - 1e-12, d.max(v) <= 480);
    }

    #[test]
    fn comm_model(w in 1u64..16, l in 1u64..64, nf in 1u64..64, t in 1u64..2000, m in 1u64..64) {
        let cfg = CommConfig::new(w, l, nf, t, m);
        let tok = comm_cost(CommStrategy::TokenLevel, &cfg).unwrap();
        let frm = comm_cost(CommStrategy::FrameLevel, &cfg).unwrap();
        prop_assert_eq!(frm.messages * 2, tok.messages);
        if w > 1 {
            prop_assert_eq!(frm.bytes < tok.bytes, m < nf);
        } else {
            prop_assert_eq!(tok.bytes + frm.bytes, 0);
        }
    }

    #[test]
    fn scheduler_staggering(s in 1usize..5, m in 1usize..4, n in 0u64..25) {
        let cfg = small_config(s, m);
        let k = (s * m) as f64;
        let model = ToyFlowModel::mixture(&cfg, 0.5, 0.5);
        let mut sched = Scheduler::new(&cfg).unwrap();
        sched.warmup(seeded_reference(&cfg)).unwrap();
        let mut src = FixedConditions { num_chunks: n };
        let mut clock = sim_clock_for(&cfg);
        let mut last_phase = sched.phase();
        let mut emitted = 0u64;
        while sched.phase() != Phase::Done {
            let tick = sched.tick_index();
            let out = sched.tick(&model, &mut src, &mut clock).unwrap();
            prop_assert!(sched.phase() >= last_phase);
            last_phase = sched.phase();
            if let Some(r) = &out {
                prop_assert_eq!(r.chunk_id, emitted);
                prop_assert_eq!(r.noise_history.len(), s * m + 1);
                emitted += 1;
            }
            if sched.phase() == Phase::Steady {
                let levels = sched.tick_start_levels();
                prop_assert_eq!(levels.len(), s);
                for (j, t) in levels.iter().enumerate() {
                    let expected = ((j + 1) * m) as f64 / k;
                    prop_assert!((t - expected).abs() < 1e-12, "{levels:?}");
                }
                prop_assert!(out.is_some());
                prop_assert_eq!(sched.chunks_emitted() as i64, tick as i64 - s as i64 + 2);
            }
            if let Some(bank) = sched.bank() {
                prop_assert!(bank.check_invariants().is_ok());
            }
        }
        prop_assert_eq!(emitted, n);
    }

    #[test]
    fn refinement_touches_only_short_term(seed in any::<u64>(), ticks in 4usize..20) {
        let cfg = SessionConfig { rng_seed: seed, ..small_config(3, 1) };
        let model = ToyFlowModel::mixture(&cfg, 0.5, 0.5);
        let mut sched = Scheduler::new(&cfg).unwrap();
        sched.warmup(seeded_reference(&cfg)).unwrap();
        let mut src = FixedConditions { num_chunks: 100 };
        let mut clock = sim_clock_for(&cfg);
        for _ in 0..ticks {
            sched.tick(&model, &mut src, &mut clock).unwrap();
        }
        let before = sched.bank().unwrap().clone();
        let mut sched2 = sched.clone();
        sched.refine(&model).unwrap();
        let after = sched.bank().unwrap();
        prop_assert!(before.long_term().eq(after.long_term()));
        prop_assert!(before.stream().eq(after.stream()));
        prop_assert_eq!(before.reference(), after.reference());
        prop_assert_eq!(before.short_term().unwrap().chunk_id, after.short_term().unwrap().chunk_id);
        sched2.refine(&model).unwrap();
        prop_assert_eq!(sched2.bank().unwrap(), after);
    }

    #[test]
    fn conditioning_is_deterministic(seconds in 0.1f64..4.0, piece in 100usize..8000) {
        let cfg = SessionConfig::default();
        let reference = seeded_reference(&cfg);
        let pcm = streamforge::session::audio::sine(330.0, 0.3, seconds);
        let trace = simple_trace("hi", &pcm, piece);
        let a = Conditioner::from_trace(&cfg, &reference, &trace).unwrap();
        let b = Conditioner::from_trace(&cfg, &reference, &trace).unwrap();
        let n = a.total_chunks().unwrap();
        prop_assert_eq!(n, b.total_chunks().unwrap());
        for c in 0..n {
            prop_assert_eq!(a.build(c).unwrap(), b.build(c).unwrap());
        }
    }
}
