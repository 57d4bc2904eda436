mod common;

use deskbc_core::analysis::*;
use deskbc_core::data::{Frame, RawAction, Trajectory, NUM_SLOTS};
use deskbc_core::policy::{CheckpointMeta, ModelConfig, PolicyDataset, PolicyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sequences(model: &PolicyModel, n: usize, t: usize, game: impl Fn(usize) -> &'static str, seed: u64) -> Vec<EvalSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.slot_vocabs();
    (0..n)
        .map(|s| EvalSequence {
            game_id: game(s).into(),
            frames: common::random_frames(t, model.config.frame_resolution, seed * 100 + s as u64),
            instructions: vec![0; t],
            actions: (0..t).map(|_| std::array::from_fn(|k| rng.random_range(0..vocab[k]))).collect(),
        })
        .collect()
}

fn cfg(p: f64) -> CausalityEvalConfig {
    CausalityEvalConfig { chunks: 2, perturb_prob: p, batch_size: 32, seed: 0 }
}

#[test]
fn zero_perturbation_scores_exactly_zero() {
    let m = common::model(common::small_config(), 0);
    let seqs = sequences(&m, 3, 4, |_| "corridor", 1);
    let r = causality_score(&m, &seqs, &cfg(0.0)).unwrap();
    assert_eq!(r.score, 0.0);
    assert_eq!(r.frames_swapped, 0);
}

#[test]
fn image_blind_model_scores_zero() {
    let m = common::model(ModelConfig { image_blind: true, ..common::small_config() }, 0);
    let seqs = sequences(&m, 3, 4, |_| "corridor", 2);
    let r = causality_score(&m, &seqs, &cfg(0.5)).unwrap();
    assert!(r.frames_swapped > 0);
    assert!(r.score.abs() <= 1e-6, "{}", r.score);
}

#[test]
fn full_swap_matches_direct_computation() {
    // With p = 1 and one partner, the perturbed sequence is exactly the
    // partner's frames with the original actions.
    let m = common::model(common::small_config(), 3);
    let seqs = sequences(&m, 2, 4, |_| "corridor", 3);
    let r = causality_score(&m, &seqs, &cfg(1.0)).unwrap();
    let ends = [1, 3];
    let mut expect = 0.0;
    for (a, b) in [(0, 1), (1, 0)] {
        let orig: Vec<&Frame> = seqs[a].frames.iter().collect();
        let swap: Vec<&Frame> = seqs[b].frames.iter().collect();
        let p = action_log_probs(&m, &seqs[a], &orig, &ends).unwrap();
        let q = action_log_probs(&m, &seqs[a], &swap, &ends).unwrap();
        for (x, y) in p.iter().zip(&q) {
            for s in 0..NUM_SLOTS {
                expect += x[s].iter().zip(&y[s]).map(|(lp, lq)| lp.exp() * (lp - lq)).sum::<f64>();
            }
        }
    }
    assert!(r.score > 0.0);
    assert!((r.score - expect).abs() < 1e-9 * expect.max(1.0), "{} vs {expect}", r.score);
    assert_eq!(r.frames_swapped, 8);
}

#[test]
fn lone_game_sequences_are_skipped() {
    let m = common::model(common::small_config(), 4);
    let seqs = sequences(&m, 3, 4, |s| if s == 2 { "target-tap" } else { "corridor" }, 4);
    let r = causality_score(&m, &seqs, &cfg(0.5)).unwrap();
    assert_eq!(r.per_sequence[2], None);
    assert!(r.per_sequence[0].is_some());
}

#[test]
fn score_is_deterministic_per_seed() {
    let m = common::model(common::small_config(), 5);
    let seqs = sequences(&m, 4, 4, |_| "corridor", 5);
    let a = causality_score(&m, &seqs, &cfg(0.5)).unwrap();
    let b = causality_score(&m, &seqs, &cfg(0.5)).unwrap();
    assert_eq!(a, b);
    let (mean, std) = causality_score_seeds(&m, &seqs, &cfg(0.5), &[0, 1, 2]).unwrap();
    assert!(mean > 0.0 && std >= 0.0);
}

#[test]
fn bad_causality_inputs_are_rejected() {
    let m = common::model(common::small_config(), 6);
    let seqs = sequences(&m, 2, 4, |_| "corridor", 6);
    assert!(causality_score(&m, &seqs, &CausalityEvalConfig { chunks: 5, ..cfg(0.5) }).is_err());
    assert!(causality_score(&m, &seqs, &cfg(1.5)).is_err());
    assert!(causality_score(&m, &[], &cfg(0.5)).is_err());
}

#[test]
fn kl_hand_fixture() {
    let p = [0.5f64.ln(), 0.5f64.ln()];
    let q = [0.25f64.ln(), 0.75f64.ln()];
    let expect = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((kl_log(&p, &q) - expect).abs() < 1e-15);
    assert_eq!(kl_log(&p, &p), 0.0);
    let zero = [0.0f64, f64::NEG_INFINITY];
    assert!((kl_log(&zero, &q) - (1.0f64 / 0.25).ln()).abs() < 1e-15);
}

fn constant_dataset(res: usize) -> Vec<Trajectory> {
    (0..2)
        .map(|s| {
            let frames = common::random_frames(12, res, s);
            Trajectory::new("corridor", frames, vec![RawAction::idle(); 12])
        })
        .collect()
}

fn set_heads(model: &mut PolicyModel, bias0: f64) {
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.starts_with("dec.head")).map(|(id, p)| (id, p.name.ends_with(".b"))).collect();
    for (id, is_bias) in ids {
        let m = model.store.get_mut(id);
        m.data.iter_mut().for_each(|v| *v = 0.0);
        if is_bias {
            m.data[0] = bias0;
        }
    }
}

#[test]
fn perplexity_of_uniform_and_certain_models() {
    let data = constant_dataset(16);
    let refs: Vec<&Trajectory> = data.iter().collect();
    let mut m = common::model(common::small_config(), 7);
    set_heads(&mut m, 0.0);
    let ds = PolicyDataset::new(&refs, &m.binning, &m.config).unwrap();
    let ppl = keyboard_perplexity(&m, &ds, 4).unwrap();
    assert!((ppl - 65.0).abs() < 1e-9, "{ppl}");
    // Idle actions put every key slot on class 0.
    set_heads(&mut m, 100.0);
    let ppl = keyboard_perplexity(&m, &ds, 4).unwrap();
    assert!((ppl - 1.0).abs() < 1e-9, "{ppl}");
    assert!(keyboard_perplexity(&m, &ds, 50).is_err());
}

#[test]
fn checkpoint_selection() {
    let m = |step, l: Option<f64>| CheckpointMeta { step, train_loss: None, test_loss: l };
    assert_eq!(select_checkpoint(&[m(0, Some(3.0)), m(10, Some(1.0)), m(20, Some(1.0)), m(30, Some(2.0))]).unwrap(), 1);
    assert_eq!(select_checkpoint(&[m(0, None), m(10, Some(4.0))]).unwrap(), 1);
    assert!(select_checkpoint(&[m(0, None)]).is_err());
}

const D_MILLIONS: [f64; 5] = [30.0, 60.0, 125.0, 250.0, 500.0];

fn law(d: f64) -> f64 {
    1.111 + (17.0 / d).powf(0.2336)
}

#[test]
fn noiseless_fit_recovers_generator() {
    let pts: Vec<(f64, f64)> = D_MILLIONS.iter().map(|&d| (d, law(d))).collect();
    let f = fit_power_law(&pts).unwrap();
    assert!(f.identifiable);
    assert!((f.alpha / 0.2336 - 1.0).abs() < 1e-3, "{f:?}");
    assert!((f.l_inf / 1.111 - 1.0).abs() < 1e-3);
    assert!((f.d_c / 17.0 - 1.0).abs() < 1e-3);
    assert!(f.residual < 1e-12);
    // Same law in raw frames.
    let pts: Vec<(f64, f64)> = D_MILLIONS.iter().map(|&d| (d * 1e6, law(d))).collect();
    let f = fit_power_law(&pts).unwrap();
    assert!((f.d_c / 17e6 - 1.0).abs() < 1e-3);
}

#[test]
fn fit_residual_is_a_local_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let pts: Vec<(f64, f64)> = D_MILLIONS.iter().map(|&d| (d, law(d) * (1.0 + noise.sample(&mut rng)))).collect();
    let f = fit_power_law(&pts).unwrap();
    let sse = |l: f64, dc: f64, a: f64| pts.iter().map(|&(d, y)| (l + (dc / d).powf(a) - y).powi(2)).sum::<f64>();
    assert!((sse(f.l_inf, f.d_c, f.alpha) - f.residual).abs() < 1e-12);
    for (dl, dd, da) in [(1e-3, 0.0, 0.0), (-1e-3, 0.0, 0.0), (0.0, 0.05, 0.0), (0.0, -0.05, 0.0), (0.0, 0.0, 1e-3), (0.0, 0.0, -1e-3)] {
        let l = (f.l_inf + dl).max(0.0);
        assert!(sse(l, f.d_c * (1.0 + dd), f.alpha + da) >= f.residual - 1e-15);
    }
}

#[test]
fn gap_probe_identity_and_noise_sweep() {
    let m = common::model(common::small_config(), 8);
    let seqs = sequences(&m, 2, 4, |_| "corridor", 8);
    let g = gap_probe(&m, &seqs, &GapProbeConfig { transform: LossyTransform::Identity, samples: 2, seed: 0 }).unwrap();
    assert_eq!(g, 0.0);
    let rows = gap_sweep(&m, &seqs, "noise", &[0.0, 4.0, 32.0, 128.0], 2, 0).unwrap();
    assert_eq!(rows[0].mean_kl, 0.0);
    for w in rows.windows(2) {
        assert!(w[1].mean_kl > w[0].mean_kl, "{rows:?}");
    }
    assert!(gap_sweep(&m, &seqs, "jpeg", &[1.0], 2, 0).is_err());
}

#[test]
fn csv_writers_have_fixed_headers() {
    let mut buf = Vec::new();
    write_causality_csv(&mut buf, &[(0, Some(1.5), 0.25), (10, None, 0.5)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "checkpoint_step,test_loss,causality_score");
    assert_eq!(text.lines().count(), 3);
    let mut buf = Vec::new();
    let fit = ScalingFitParams { l_inf: 1.111, d_c: 17.0, alpha: 0.2336, residual: 0.0, identifiable: true };
    write_scaling_csv(&mut buf, &[(17.0, 2.111)], &fit).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("D,L,L_fit\n"));
    let mut buf = Vec::new();
    write_gap_csv(&mut buf, &[GapRow { transform: "noise".into(), strength: 4.0, mean_kl: 0.1 }]).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("transform,strength,mean_KL\n"));
}
