//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stdout (bypassing libtest capture) and then asserts.
//!
//! Tests share a lock so wall-clock budgets are measured without
//! interference from the other criteria.

mod common;

use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use deskbc_core::analysis::*;
use deskbc_core::data::*;
use deskbc_core::env::*;
use deskbc_core::inference::{Engine, RealtimeConfig};
use deskbc_core::policy::*;
use deskbc_core::toy::*;
use deskbc_nn::{ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, elapsed: Duration, detail: String) {
    let line = format!("criterion {n}: {} ({:.1}s) {detail}\n", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_toy_causality_ordering() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = ToyExperimentConfig::default();
    assert_eq!((cfg.steps, cfg.lr, cfg.width, cfg.seeds.len()), (200_000, 0.1, 32, 5));
    let curves = run_toy_experiment(&cfg).unwrap();
    let c: std::collections::HashMap<usize, f64> = final_mean_c(&curves).into_iter().collect();
    let (lin, d1, d3) = (c[&0], c[&1], c[&3]);
    let el = t0.elapsed();
    let pass = d3 > d1 && d1 > lin && lin.abs() < 0.5 && el < Duration::from_secs(600);
    report(1, pass, el, format!("c(linear)={lin:.4} c(depth1)={d1:.4} c(depth3)={d3:.4}; need c3 > c1 > c_lin and |c_lin| < 0.5"));
}

// ---------------------------------------------------------------- 2

fn rule(n_i: usize, q: usize, k: usize) -> bool {
    // Categories: context tokens, the prediction readout, action slots.
    let per = n_i + 11;
    let (tq, iq, tk, ik) = (q / per, q % per, k / per, k % per);
    let cat = |i: usize| if i <= n_i + 1 { 'c' } else if i == n_i + 2 { 'p' } else { 'a' };
    if tk > tq {
        false
    } else if cat(ik) == 'p' {
        q == k
    } else if tk < tq {
        true
    } else {
        !(cat(iq) != 'a' && cat(ik) == 'a')
    }
}

#[test]
fn criterion_02_mask_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut mismatches = 0;
    for n_i in [1, 2] {
        let layout = TokenLayout::new(n_i);
        for t in [1, 2, 4] {
            let m = build_mask(t, &layout);
            assert_eq!(m.size, t * (n_i + 11));
            for q in 0..m.size {
                for k in 0..m.size {
                    mismatches += (m.get(q, k) != rule(n_i, q, k)) as usize;
                }
            }
        }
    }
    let el = t0.elapsed();
    report(2, mismatches == 0 && el < Duration::from_secs(1), el, format!("{mismatches} mismatching pairs"));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_cache_batch_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let (w, t) = (16, 64);
    let model = Arc::new(common::model(ModelConfig::default(), 21));
    let frames = common::random_frames(t, model.config.frame_resolution, 22);
    let mut engine = Engine::new(model.clone(), RealtimeConfig { window: w, seed: 1, ..RealtimeConfig::default() }).unwrap();
    let mut latents = Vec::new();
    let mut actions: Vec<[usize; NUM_SLOTS]> = Vec::new();
    for f in &frames {
        let out = engine.step(f, 0).unwrap();
        latents.push(out.latent);
        actions.push(out.action.slots());
    }
    let refs: Vec<&Frame> = frames.iter().collect();
    let batch = Batch {
        n: 1,
        t,
        frames: frames_to_mat(&refs),
        instructions: vec![0; t],
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
    let el = t0.elapsed();
    report(3, worst <= 1e-4 && el < Duration::from_secs(30), el, format!("max |delta a_in| = {worst:.3e} (W={w}, T={t})"));
}

// ---------------------------------------------------------------- 4

const D_MILLIONS: [f64; 5] = [30.0, 60.0, 125.0, 250.0, 500.0];
const GEN: (f64, f64, f64) = (1.111, 17.0, 0.2336);

fn law(d: f64) -> f64 {
    GEN.0 + (GEN.1 / d).powf(GEN.2)
}

#[test]
fn criterion_04_scaling_fit_recovery() {
    let _g = serial();
    let t0 = Instant::now();
    let clean: Vec<(f64, f64)> = D_MILLIONS.iter().map(|&d| (d, law(d))).collect();
    let f0 = fit_power_law(&clean).unwrap();
    let rel = |a: f64, b: f64| (a / b - 1.0).abs();
    let noiseless = rel(f0.l_inf, GEN.0) < 1e-3 && rel(f0.d_c, GEN.1) < 1e-3 && rel(f0.alpha, GEN.2) < 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let noisy: Vec<(f64, f64)> = D_MILLIONS.iter().map(|&d| (d, law(d) * (1.0 + noise.sample(&mut rng)))).collect();
    let f = fit_power_law(&noisy).unwrap();
    let within = (f.alpha - GEN.2).abs() <= 0.05 && (f.l_inf - GEN.0).abs() <= 0.05;
    let el = t0.elapsed();
    report(
        4,
        noiseless && within && el < Duration::from_secs(10),
        el,
        format!(
            "noiseless (L_inf {:.5}, D_c {:.4}, alpha {:.5}); 1% noise seed 0: alpha {:.4} (need 0.2336±0.05), L_inf {:.4} (need 1.111±0.05)",
            f0.l_inf, f0.d_c, f0.alpha, f.alpha, f.l_inf
        ),
    );
}

// ---------------------------------------------------------------- shared desk run (5, 6)

const EXPERT_EPISODES: usize = 50;
const TRAIN_STEPS: usize = 2000;
const WINDOW: usize = 16;

struct DeskRun {
    data: Vec<Trajectory>,
    init: PolicyModel,
    report: TrainReport<PolicyModel>,
    train_time: Duration,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let data = collect_dataset(EXPERT_EPISODES, 1000, &CollectConfig::default()).unwrap();
        let binning = fit_binning(&data, 10);
        let dx: Vec<f64> = data.iter().flat_map(|t| t.actions.iter().map(|a| a.dx)).collect();
        let dy: Vec<f64> = data.iter().flat_map(|t| t.actions.iter().map(|a| a.dy)).collect();
        let model = PolicyModel::new(ModelConfig::default(), binning, TruncatedNormalParams::fit(&dx, &dy), 0).unwrap();
        assert_eq!((model.config.backbone.num_layers, model.config.backbone.hidden_dim), (2, 128));
        let init = model.clone();
        let cfg = TrainConfig {
            steps: TRAIN_STEPS,
            batch_size: 4,
            window: Some(WINDOW),
            learning_rate: 1e-3,
            warmup_steps: 50,
            eval_every: 250,
            ..TrainConfig::default()
        };
        let report = train(model, &data, &cfg).unwrap();
        assert!(report.halted.is_none());
        DeskRun { data, init, report, train_time: t0.elapsed() }
    })
}

fn test_split(run: &DeskRun) -> PolicyDataset<'_> {
    let refs: Vec<&Trajectory> = run.report.test_indices.iter().map(|&i| &run.data[i]).collect();
    PolicyDataset::new(&refs, &run.report.model.binning, &run.report.model.config).unwrap()
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_causality_score_properties() {
    let _g = serial();
    let run = desk_run();
    let t0 = Instant::now();
    let ds = test_split(run);
    let seqs = eval_sequences(&ds, &ds.tiled_windows(WINDOW, 32), WINDOW);
    let cfg = CausalityEvalConfig { chunks: 8, perturb_prob: 0.5, batch_size: 32, seed: 0 };
    let seeds = [0, 1, 2];
    let zero = causality_score(&run.report.model, &seqs, &CausalityEvalConfig { perturb_prob: 0.0, ..cfg }).unwrap().score;
    let blind_model = common::model(ModelConfig { image_blind: true, ..common::small_config() }, 5);
    let blind_seqs: Vec<EvalSequence> = seqs
        .iter()
        .map(|s| EvalSequence { frames: common::random_frames(s.len(), 16, s.len() as u64), ..s.clone() })
        .collect();
    let blind = causality_score(&blind_model, &blind_seqs, &cfg).unwrap().score;
    let (trained, _) = causality_score_seeds(&run.report.model, &seqs, &cfg, &seeds).unwrap();
    let (init, _) = causality_score_seeds(&run.init, &seqs, &cfg, &seeds).unwrap();
    let el = t0.elapsed();
    let pass = zero == 0.0 && blind.abs() <= 1e-6 && trained > init && el < Duration::from_secs(300);
    report(5, pass, el, format!("p=0 score {zero}; image-blind {blind:.2e}; trained {trained:.4e} vs init {init:.4e}"));
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_desk_training_efficacy() {
    let _g = serial();
    let run = desk_run();
    let t0 = Instant::now();
    let ppl = keyboard_perplexity(&run.report.model, &test_split(run), WINDOW).unwrap();
    let model = Arc::new(run.report.model.clone());
    let rt = RealtimeConfig { window: WINDOW, temperature: 1.0, ..RealtimeConfig::default() };
    let stats = evaluate(|| PolicyController::new(model.clone(), rt.clone()), &CorridorConfig::default(), 16, 1500, 777, 1).unwrap();
    let random = evaluate(|| Ok(RandomController::new()), &CorridorConfig::default(), 16, 1500, 777, 1).unwrap();
    let el = run.train_time + t0.elapsed();
    let pass = ppl <= 0.7 * 65.0 && stats.completion_rate >= 0.8 && el < Duration::from_secs(1800);
    report(
        6,
        pass,
        el,
        format!(
            "keyboard ppl {ppl:.3} (limit {:.1}); completion {:.3} (steps {:?} ± {:?}), random {:.3}",
            0.7 * 65.0,
            stats.completion_rate,
            stats.steps_mean,
            stats.steps_std,
            random.completion_rate
        ),
    );
}

// ---------------------------------------------------------------- 7

fn random_batch(model: &PolicyModel, n: usize, t: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = common::random_frames(n * t, model.config.frame_resolution, seed);
    let refs: Vec<_> = frames.iter().collect();
    let vocab = model.config.slot_vocabs();
    let mut act = || -> [usize; NUM_SLOTS] { std::array::from_fn(|s| rng.random_range(0..vocab[s])) };
    let inputs: Vec<_> = (0..n * t).map(|_| act()).collect();
    let targets = inputs.clone();
    Batch { n, t, frames: frames_to_mat(&refs), instructions: vec![0; n * t], inputs, targets, loss_mask: vec![true; n * t] }
}

#[test]
fn criterion_07_loss_masking_contract() {
    let _g = serial();
    let t0 = Instant::now();
    let model = common::model(common::small_config(), 31);
    let mut a = random_batch(&model, 2, 4, 32);
    a.loss_mask = vec![true, false, false, true, false, true, true, false];
    let mut b = a.clone();
    let v = model.config.slot_vocabs();
    for r in 0..a.loss_mask.len() {
        if !a.loss_mask[r] {
            b.targets[r] = std::array::from_fn(|s| (a.targets[r][s] + 1) % v[s]);
        }
    }
    let grads = |batch: &Batch| {
        let mut tape = Tape::new(&model.store);
        let out = bc_loss(&model, &mut tape, batch).unwrap();
        tape.backward(out.loss)
    };
    let (ga, gb) = (grads(&a), grads(&b));
    let mut identical = true;
    for (id, _) in model.store.iter() {
        match (ga.get(id), gb.get(id)) {
            (Some(x), Some(y)) => identical &= x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()),
            (None, None) => {}
            _ => identical = false,
        }
    }
    let el = t0.elapsed();
    report(7, identical && el < Duration::from_secs(10), el, format!("bit-identical gradients: {identical}"));
}

// ---------------------------------------------------------------- 8

fn toy_worst_rel() -> f64 {
    let h = 1e-4;
    let mut worst = 0.0f64;
    for depth in 0..=3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + depth as u64);
        let net = ToyNet::new(depth, 32, &mut rng);
        for s in generate_toy_dataset(&ToyEnvConfig::default(), 20, ChaCha8Rng::seed_from_u64(depth as u64)).iter().step_by(4) {
            let x = s.obs.features();
            let g = net.gradients(&x, s.action);
            for li in 0..net.layers.len() {
                let nw = net.layers[li].w.len();
                for j in (0..nw).step_by((nw / 12).max(1)).chain(nw..nw + net.layers[li].b.len().min(4)) {
                    let bump = |d: f64| {
                        let mut n = net.clone();
                        if j < nw {
                            n.layers[li].w[j] += d;
                        } else {
                            n.layers[li].b[j - nw] += d;
                        }
                        n.loss(&x, s.action)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if j < nw { g.w[li][j] } else { g.b[li][j - nw] };
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
                }
            }
        }
    }
    worst
}

fn desk_worst_rel() -> f64 {
    let model = common::model(common::small_config(), 41);
    let batch = random_batch(&model, 1, 2, 42);
    let loss_of = |store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        let mut tape = Tape::new(&m.store);
        let out = bc_loss(&m, &mut tape, &batch).unwrap();
        tape.value(out.loss).data[0]
    };
    let mut tape = Tape::new(&model.store);
    let out = bc_loss(&model, &mut tape, &batch).unwrap();
    let grads = tape.backward(out.loss);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for (id, p) in model.store.iter() {
        let Some(g) = grads.get(id) else { continue };
        for _ in 0..3 {
            let j = rng.random_range(0..p.value.len());
            let mut plus = model.store.clone();
            plus.get_mut(id).data[j] += h;
            let mut minus = model.store.clone();
            minus.get_mut(id).data[j] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            worst = worst.max((fd - g.data[j]).abs() / fd.abs().max(g.data[j].abs()).max(1e-4));
        }
    }
    worst
}

#[test]
fn criterion_08_gradient_checks() {
    let _g = serial();
    let t0 = Instant::now();
    let toy = toy_worst_rel();
    let desk = desk_worst_rel();
    let el = t0.elapsed();
    report(8, toy < 1e-5 && desk < 1e-4 && el < Duration::from_secs(60), el, format!("toy worst rel {toy:.2e} (< 1e-5), desk worst rel {desk:.2e} (< 1e-4)"));
}

// ---------------------------------------------------------------- 9

fn tn_mean_oracle(lo: f64, hi: f64, sigma: f64) -> f64 {
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let pdf = |x: f64| (-0.5 * (x / sigma).powi(2)).exp();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        num += w * x * pdf(x);
        den += w * pdf(x);
    }
    num / den
}

#[test]
fn criterion_09_truncated_normal_sampler() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_truncated_normal(2.0, 10.0, 0.0, 96.0, &mut rng)).sum::<f64>() / n as f64;
    let oracle = tn_mean_oracle(2.0, 10.0, 96.0);
    let (b, tn) = common::synthetic_binning(9);
    let mut misses = 0;
    for axis in [Axis::X, Axis::Y] {
        let ab = b.axis(axis);
        for bin in 0..ab.num_bins() {
            for seed in 0..1000 {
                let v = sample_mouse(bin, axis, &b, &tn, &mut ChaCha8Rng::seed_from_u64(seed));
                misses += (ab.bin_of(v) != bin) as usize;
            }
        }
    }
    let el = t0.elapsed();
    let pass = (mean - oracle).abs() <= 0.05 && misses == 0 && el < Duration::from_secs(30);
    report(9, pass, el, format!("sampled mean {mean:.4} vs oracle {oracle:.4}; {misses} round-trip misses over {} + {} bins", b.x.num_bins(), b.y.num_bins()));
}

// ---------------------------------------------------------------- 10

fn traj_with(actions: Vec<RawAction>) -> Trajectory {
    let frames = vec![Frame::black(4, 4); actions.len()];
    Trajectory::new("corridor", frames, actions)
}

#[test]
fn criterion_10_quality_filters() {
    let _g = serial();
    let k = |n: &str| Key::from_name(n).unwrap();
    let held: Vec<RawAction> = (0..100).map(|i| RawAction { keys: if i < 61 { vec![k("W")] } else { vec![] }, dx: (i % 3) as f64, ..RawAction::idle() }).collect();
    let mut many: Vec<RawAction> = (0..100).map(|i| RawAction { keys: vec![if i % 2 == 0 { k("A") } else { k("D") }], ..RawAction::idle() }).collect();
    many[50].keys = ["A", "B", "C", "D", "E", "F", "G"].iter().map(|n| k(n)).collect();
    let idle = vec![RawAction::idle(); 200];
    let (held, many, idle) = (traj_with(held), traj_with(many), traj_with(idle));
    let clean = collect_dataset(8, 50, &CollectConfig { corridor: CorridorConfig { resolution: 16, ..CorridorConfig::default() }, ..CollectConfig::default() }).unwrap();
    let t0 = Instant::now();
    let (rh, rm, ri) = (quality_filter(&held), quality_filter(&many), quality_filter(&idle));
    let cases = rh.hold_violation && !rh.pass() && rm.simultaneity_violation && !rm.pass() && ri.interaction_violation && !ri.pass();
    let clean_pass = clean.iter().filter(|t| quality_filter(t).pass()).count();
    let el = t0.elapsed();
    report(10, cases && clean_pass == clean.len() && el < Duration::from_secs(1), el, format!("unit cases flagged: {cases}; clean expert {clean_pass}/{} pass", clean.len()));
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_idm_sanity() {
    let _g = serial();
    let t0 = Instant::now();
    let all_true = build_idm_mask(8, &IdmLayout { image_tokens: 1 }).data.iter().all(|&b| b);
    let data = collect_dataset(20, 2000, &CollectConfig::default()).unwrap();
    let binning = fit_binning(&data, 10);
    let dx: Vec<f64> = data.iter().flat_map(|t| t.actions.iter().map(|a| a.dx)).collect();
    let dy: Vec<f64> = data.iter().flat_map(|t| t.actions.iter().map(|a| a.dy)).collect();
    let cfg = ModelConfig { history_length: 8, ..ModelConfig::default() };
    let idm = IdmModel::new(cfg, binning, TruncatedNormalParams::fit(&dx, &dy), 0).unwrap();
    let tc = TrainConfig { steps: 2000, batch_size: 4, window: Some(8), learning_rate: 1e-3, warmup_steps: 50, eval_every: 500, ..TrainConfig::default() };
    let rep = train(idm, &data, &tc).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &data[i]).collect::<Vec<&Trajectory>>();
    let (tr, te) = (pick(&rep.train_indices), pick(&rep.test_indices));
    let train_ds = PolicyDataset::new(&tr, &rep.model.binning, &rep.model.config).unwrap();
    let test_ds = PolicyDataset::new(&te, &rep.model.binning, &rep.model.config).unwrap();
    let acc = idm_keyboard_accuracy(&rep.model, &test_ds, 8).unwrap();
    let base = majority_keyboard_accuracy(&train_ds, &test_ds, 8).unwrap();
    let fresh = collect_dataset(4, 5000, &CollectConfig::default()).unwrap();
    let mut labeled_pass = 0;
    for t in &fresh {
        let p = pseudo_label(&rep.model, &t.game_id, t.frames.clone()).unwrap();
        labeled_pass += quality_filter(&p.trajectory).pass() as usize;
    }
    let el = t0.elapsed();
    let pass = all_true && acc > base && labeled_pass == fresh.len() && el < Duration::from_secs(900);
    report(11, pass, el, format!("mask all-true {all_true}; held-out keyboard acc {acc:.4} vs majority {base:.4}; pseudo-labeled {labeled_pass}/{} pass filters", fresh.len()));
}
