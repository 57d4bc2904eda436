mod common;

use std::sync::Arc;

use deskbc_core::data::{Frame, NUM_SLOTS};
use deskbc_core::error::EngineError;
use deskbc_core::inference::{benchmark, percentiles, write_latency_csv, Engine, RealtimeConfig};
use deskbc_core::policy::{frames_to_mat, Batch, PolicyModel};
use deskbc_nn::Tape;

/// Engine latents and decoded actions for `frames`, plus the batch-forward
/// latents of the same sequence fed the engine's own actions.
fn cache_vs_batch(model: &Arc<PolicyModel>, frames: &[Frame], w: usize) -> f64 {
    let cfg = RealtimeConfig { window: w, seed: 3, ..RealtimeConfig::default() };
    let mut engine = Engine::new(model.clone(), cfg).unwrap();
    let mut latents = Vec::new();
    let mut actions: Vec<[usize; NUM_SLOTS]> = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let out = engine.step(f, i % 3).unwrap();
        latents.push(out.latent);
        actions.push(out.action.slots());
    }
    let t = frames.len();
    let refs: Vec<&Frame> = frames.iter().collect();
    let batch = Batch {
        n: 1,
        t,
        frames: frames_to_mat(&refs),
        instructions: (0..t).map(|i| i % 3).collect(),
        inputs: actions.clone(),
        targets: actions,
        loss_mask: vec![true; t],
    };
    let mut tape = Tape::new(&model.store);
    let (_, lat) = model.forward_batch(&mut tape, &batch, Some(w), 0).unwrap();
    let lat = tape.value(lat);
    let mut worst = 0.0f64;
    for (i, l) in latents.iter().enumerate() {
        for (a, b) in l.iter().zip(lat.row(i)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[test]
fn cache_matches_windowed_batch_forward() {
    let model = Arc::new(common::model(common::small_config(), 11));
    for w in [4, 16, 32] {
        for t in [w, 2 * w, 4 * w] {
            let frames = common::random_frames(t, 16, (w * 1000 + t) as u64);
            let d = cache_vs_batch(&model, &frames, w);
            assert!(d <= 1e-4, "W={w} T={t}: max |delta| = {d}");
        }
    }
}

#[test]
fn eviction_keeps_whole_window() {
    let model = Arc::new(common::model(common::small_config(), 1));
    let w = 6;
    let mut engine = Engine::new(model.clone(), RealtimeConfig { window: w, ..RealtimeConfig::default() }).unwrap();
    let frames = common::random_frames(w + 5, 16, 2);
    let tps = model.config.tokens_per_step();
    for (i, f) in frames.iter().enumerate() {
        engine.step(f, 0).unwrap();
        let cache = engine.cache();
        // a_in is never cached, so each committed timestep holds tps - 1 entries.
        assert_eq!(cache.len() % (tps - 1), 0, "partial timestep after step {i}");
        assert!(cache.len() <= w * tps);
        assert_eq!(cache.timesteps().len(), i.min(w - 1));
        assert_eq!(engine.memory_timesteps().len(), (i + 1).min(w));
    }
    assert_eq!(engine.memory_timesteps(), (5..w + 5).collect::<Vec<_>>());
}

#[test]
fn fixed_seed_is_deterministic() {
    let model = Arc::new(common::model(common::small_config(), 4));
    let frames = common::random_frames(20, 16, 5);
    let run = || {
        let mut e = Engine::new(model.clone(), RealtimeConfig { window: 8, seed: 9, ..RealtimeConfig::default() }).unwrap();
        frames.iter().map(|f| e.step(f, 1).unwrap().raw).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn reset_matches_fresh_engine_and_replay() {
    let model = Arc::new(common::model(common::small_config(), 4));
    let frames = common::random_frames(12, 16, 6);
    let cfg = RealtimeConfig { window: 8, seed: 2, ..RealtimeConfig::default() };
    let fresh = |fs: &[Frame]| {
        let mut e = Engine::new(model.clone(), cfg.clone()).unwrap();
        fs.iter().map(|f| e.step(f, 0).unwrap()).map(|o| (o.latent, o.raw)).collect::<Vec<_>>()
    };
    let mut e = Engine::new(model.clone(), cfg.clone()).unwrap();
    for f in &frames[..5] {
        e.step(f, 0).unwrap();
    }
    e.reset();
    e.reset();
    assert!(e.cache().is_empty());
    assert_eq!(e.timestep(), 0);
    let replay: Vec<_> = frames[5..].iter().map(|f| e.step(f, 0).unwrap()).map(|o| (o.latent, o.raw)).collect();
    assert_eq!(replay, fresh(&frames[5..]));
}

#[test]
fn one_backbone_pass_and_eight_decoder_calls_per_step() {
    let model = Arc::new(common::model(common::small_config(), 4));
    let mut e = Engine::new(model, RealtimeConfig { window: 4, ..RealtimeConfig::default() }).unwrap();
    for f in common::random_frames(7, 16, 1) {
        e.step(&f, 0).unwrap();
    }
    assert_eq!(e.backbone_calls, 7);
    assert_eq!(e.decoder_calls, 7 * NUM_SLOTS as u64);
}

#[test]
fn rejects_wrong_frame_size() {
    let model = Arc::new(common::model(common::small_config(), 4));
    let mut e = Engine::new(model, RealtimeConfig::default()).unwrap();
    assert!(matches!(e.step(&Frame::black(8, 8), 0), Err(EngineError::FrameSize { .. })));
}

#[test]
fn argmax_ignores_rng() {
    let model = Arc::new(common::model(common::small_config(), 4));
    let frames = common::random_frames(6, 16, 8);
    let acts = |seed| {
        let mut e = Engine::new(model.clone(), RealtimeConfig { window: 4, temperature: 0.0, seed, ..RealtimeConfig::default() }).unwrap();
        frames.iter().map(|f| e.step(f, 0).unwrap().action).collect::<Vec<_>>()
    };
    assert_eq!(acts(1), acts(2));
}

#[test]
fn benchmark_report_and_csv() {
    let model = Arc::new(common::model(common::small_config(), 4));
    let mut e = Engine::new(model, RealtimeConfig { window: 8, ..RealtimeConfig::default() }).unwrap();
    let frames = common::random_frames(4, 16, 1);
    assert!(benchmark(&mut e, &frames, 50).is_err());
    let (report, samples) = benchmark(&mut e, &frames, 100).unwrap();
    assert_eq!(report.steps, 90);
    assert!(report.fps > 0.0);
    for p in [report.encode_us, report.backbone_us, report.decode_us, report.sample_us, report.total_us] {
        assert!(p.p50 <= p.p90 && p.p90 <= p.p99);
    }
    let mut buf = Vec::new();
    write_latency_csv(&mut buf, &samples).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,encode_us,backbone_us,decode_us,sample_us");
    assert_eq!(text.lines().count(), 91);
    let mean = samples.iter().map(|s| s.total_us).sum::<f64>() / samples.len() as f64;
    assert!((report.fps - 1e6 / mean).abs() < 1e-9 * report.fps);
}

#[test]
fn deeper_backbone_is_slower() {
    let frames = common::random_frames(4, 16, 1);
    let median_backbone = |layers| {
        let mut cfg = common::small_config();
        cfg.backbone.num_layers = layers;
        cfg.backbone.hidden_dim = 64;
        let mut e = Engine::new(Arc::new(common::model(cfg, 0)), RealtimeConfig { window: 16, ..RealtimeConfig::default() }).unwrap();
        benchmark(&mut e, &frames, 100).unwrap().0.backbone_us.p50
    };
    let (a, b) = (median_backbone(2), median_backbone(4));
    assert!(b > a, "4 layers {b}us vs 2 layers {a}us");
}

#[test]
fn percentile_oracle() {
    let v = [5.0, 1.0, 3.0, 2.0, 4.0];
    let p = percentiles(&v);
    assert_eq!(p.p50, 3.0);
    assert_eq!(p.p99, 5.0);
}
