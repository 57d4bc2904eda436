//! Brake-light causal-confusion toy: an obstacle stream whose optimal action
//! leaks into the next observation, and SGD-trained linear/MLP policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

pub const TOY_FEATURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyObservation {
    pub obstacle: bool,
    pub brake_light: bool,
    pub noise: [f64; 3],
}

impl ToyObservation {
    pub fn features(&self) -> [f64; TOY_FEATURES] {
        [self.obstacle as u8 as f64, self.brake_light as u8 as f64, self.noise[0], self.noise[1], self.noise[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub obs: ToyObservation,
    /// Optimal action: brake (1) iff an obstacle is present.
    pub action: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEnvConfig {
    pub obstacle_spawn_prob: f64,
    /// Obstacle lifetime is drawn uniformly from this inclusive range.
    pub persistence_frames: [u32; 2],
    /// Frames per episode; the brake light resets at episode boundaries.
    /// Zero means one unbroken stream.
    pub episode_length: usize,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        ToyEnvConfig { obstacle_spawn_prob: 0.05, persistence_frames: [2, 6], episode_length: 0 }
    }
}

impl ToyEnvConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let p = self.obstacle_spawn_prob;
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::Config(format!("obstacle_spawn_prob {p} must lie in (0, 1)")));
        }
        let [lo, hi] = self.persistence_frames;
        if lo == 0 || lo > hi {
            return Err(ModelError::Config(format!("persistence range {lo}..={hi} is empty or zero")));
        }
        Ok(())
    }
}

/// Streaming generator; holds the obstacle timer and the previous action.
pub struct ToyStream<R> {
    cfg: ToyEnvConfig,
    rng: R,
    remaining: u32,
    prev_action: bool,
    t: usize,
}

impl<R: Rng> ToyStream<R> {
    pub fn new(cfg: ToyEnvConfig, rng: R) -> Self {
        ToyStream { cfg, rng, remaining: 0, prev_action: false, t: 0 }
    }
}

impl<R: Rng> Iterator for ToyStream<R> {
    type Item = ToySample;

    fn next(&mut self) -> Option<ToySample> {
        if self.cfg.episode_length > 0 && self.t % self.cfg.episode_length == 0 {
            self.remaining = 0;
            self.prev_action = false;
        }
        self.t += 1;
        if self.remaining == 0 && self.rng.random::<f64>() < self.cfg.obstacle_spawn_prob {
            let [lo, hi] = self.cfg.persistence_frames;
            self.remaining = self.rng.random_range(lo..=hi);
        }
        let obstacle = self.remaining > 0;
        self.remaining = self.remaining.saturating_sub(1);
        let noise = [self.rng.random(), self.rng.random(), self.rng.random()];
        let obs = ToyObservation { obstacle, brake_light: self.prev_action, noise };
        self.prev_action = obstacle;
        Some(ToySample { obs, action: obstacle })
    }
}

pub fn generate_toy_dataset<R: Rng>(cfg: &ToyEnvConfig, n_steps: usize, rng: R) -> Vec<ToySample> {
    assert!(n_steps > 0, "n_steps must be positive");
    ToyStream::new(*cfg, rng).take(n_steps).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.b[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

/// `depth` ReLU hidden layers of `width` units and a sigmoid output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    pub depth: usize,
    pub width: usize,
    pub layers: Vec<DenseLayer>,
}

/// Per-layer parameter gradients, shaped like [`ToyNet::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl ToyNet {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(depth: usize, width: usize, rng: &mut R) -> Self {
        let mut dims = vec![TOY_FEATURES];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|d| {
                let std = (2.0 / d[0] as f64).sqrt();
                DenseLayer {
                    inputs: d[0],
                    outputs: d[1],
                    w: (0..d[0] * d[1]).map(|_| std * deskbc_nn::params::standard_normal(rng)).collect(),
                    b: vec![0.0; d[1]],
                }
            })
            .collect();
        ToyNet { depth, width, layers }
    }

    /// Pre-activations of every layer, the last one being the output logit.
    fn activations(&self, x: &[f64; TOY_FEATURES]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            let input: Vec<f64> = if i == 0 { acts[0].clone() } else { acts[i].iter().map(|v| v.max(0.0)).collect() };
            layer.forward(&input, &mut z);
            acts.push(z);
        }
        acts
    }

    pub fn logit(&self, x: &[f64; TOY_FEATURES]) -> f64 {
        self.activations(x).last().unwrap()[0]
    }

    /// `p(a = 1 | s)`.
    pub fn prob(&self, x: &[f64; TOY_FEATURES]) -> f64 {
        deskbc_nn::mat::sigmoid(self.logit(x))
    }

    /// Binary cross-entropy of one sample, computed stably from the logit.
    pub fn loss(&self, x: &[f64; TOY_FEATURES], y: bool) -> f64 {
        let z = self.logit(x);
        let y = y as u8 as f64;
        z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
    }

    pub fn gradients(&self, x: &[f64; TOY_FEATURES], y: bool) -> ToyGrads {
        let acts = self.activations(x);
        let n = self.layers.len();
        let mut w = vec![Vec::new(); n];
        let mut b = vec![Vec::new(); n];
        // dL/dz for the output logit.
        let mut delta = vec![deskbc_nn::mat::sigmoid(acts[n][0]) - y as u8 as f64];
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input: Vec<f64> = if i == 0 { acts[0].clone() } else { acts[i].iter().map(|v| v.max(0.0)).collect() };
            let mut gw = vec![0.0; layer.outputs * layer.inputs];
            for o in 0..layer.outputs {
                for j in 0..layer.inputs {
                    gw[o * layer.inputs + j] = delta[o] * input[j];
                }
            }
            w[i] = gw;
            b[i] = delta.clone();
            if i > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (j, p) in prev.iter_mut().enumerate() {
                    if acts[i][j] > 0.0 {
                        *p = (0..layer.outputs).map(|o| layer.w[o * layer.inputs + j] * delta[o]).sum();
                    }
                }
                delta = prev;
            }
        }
        ToyGrads { w, b }
    }
}

/// One SGD step on a single sample. Leaves the net untouched and reports
/// the failing step when the gradient is not finite.
pub fn sgd_step(net: &mut ToyNet, sample: &ToySample, lr: f64, step: u64) -> Result<(), ModelError> {
    let g = net.gradients(&sample.obs.features(), sample.action);
    if g.w.iter().chain(&g.b).flatten().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { what: "toy gradient", step });
    }
    for (layer, (gw, gb)) in net.layers.iter_mut().zip(g.w.iter().zip(&g.b)) {
        layer.w.iter_mut().zip(gw).for_each(|(w, g)| *w -= lr * g);
        layer.b.iter_mut().zip(gb).for_each(|(b, g)| *b -= lr * g);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityProbe {
    /// Fresh noise draws averaged per evaluation.
    pub samples: usize,
    pub eps: f64,
}

impl Default for CausalityProbe {
    fn default() -> Self {
        CausalityProbe { samples: 256, eps: 1e-6 }
    }
}

/// `c = E_noise[log p(a=1|s_o) - log p(a=1|s_b)]`, with `s_o` showing only
/// the obstacle and `s_b` only the brake light, both under the same noise.
pub fn causality_metric<R: Rng + ?Sized>(net: &ToyNet, probe: &CausalityProbe, rng: &mut R) -> f64 {
    assert!(probe.samples > 0 && probe.eps > 0.0 && probe.eps < 0.5);
    let clamp = |p: f64| p.clamp(probe.eps, 1.0 - probe.eps);
    let mut total = 0.0;
    for _ in 0..probe.samples {
        let noise: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let s_o = ToyObservation { obstacle: true, brake_light: false, noise };
        let s_b = ToyObservation { obstacle: false, brake_light: true, noise };
        total += clamp(net.prob(&s_o.features())).ln() - clamp(net.prob(&s_b.features())).ln();
    }
    total / probe.samples as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperimentConfig {
    pub depths: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub width: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub env: ToyEnvConfig,
    pub probe: CausalityProbe,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        ToyExperimentConfig {
            depths: vec![0, 1, 3],
            steps: 200_000,
            lr: 0.1,
            width: 32,
            seeds: (0..5).collect(),
            eval_every: 1000,
            env: ToyEnvConfig::default(),
            probe: CausalityProbe::default(),
        }
    }
}

impl ToyExperimentConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.env.validate()?;
        if self.depths.is_empty() || self.seeds.is_empty() {
            return Err(ModelError::Config("depths and seeds must be nonempty".into()));
        }
        if !(self.lr > 0.0) || self.width == 0 || self.eval_every == 0 {
            return Err(ModelError::Config("lr, width and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the `(depth, seed, step, c)` table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub depth: usize,
    pub seed: u64,
    pub step: usize,
    pub c: f64,
}

// Independent ChaCha streams per purpose, so changing the probe size never
// shifts the training data.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_PROBE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Trains one net for `cfg.steps` SGD steps and samples `c` at step 0 and
/// every `eval_every` steps (and at the last step).
pub fn run_toy_single(cfg: &ToyExperimentConfig, depth: usize, seed: u64) -> Result<(ToyNet, Vec<CurvePoint>), ModelError> {
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut probe_rng = stream(seed, STREAM_PROBE);
    let mut net = ToyNet::new(depth, cfg.width, &mut init_rng);
    let mut curve = vec![CurvePoint { depth, seed, step: 0, c: causality_metric(&net, &cfg.probe, &mut probe_rng) }];
    let data = ToyStream::new(cfg.env, stream(seed, STREAM_DATA));
    for (i, sample) in data.take(cfg.steps).enumerate() {
        sgd_step(&mut net, &sample, cfg.lr, i as u64)?;
        let step = i + 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            curve.push(CurvePoint { depth, seed, step, c: causality_metric(&net, &cfg.probe, &mut probe_rng) });
        }
    }
    Ok((net, curve))
}

pub fn run_toy_experiment(cfg: &ToyExperimentConfig) -> Result<Vec<CurvePoint>, ModelError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &depth in &cfg.depths {
        for &seed in &cfg.seeds {
            let (_, curve) = run_toy_single(cfg, depth, seed)?;
            log::info!("toy depth {depth} seed {seed}: final c = {:.4}", curve.last().unwrap().c);
            out.extend(curve);
        }
    }
    Ok(out)
}

/// Mean final `c` per depth, in the order the depths first appear.
pub fn final_mean_c(curves: &[CurvePoint]) -> Vec<(usize, f64)> {
    let mut depths: Vec<usize> = Vec::new();
    for p in curves {
        if !depths.contains(&p.depth) {
            depths.push(p.depth);
        }
    }
    depths
        .into_iter()
        .map(|d| {
            let last_step = curves.iter().filter(|p| p.depth == d).map(|p| p.step).max().unwrap();
            let finals: Vec<f64> = curves.iter().filter(|p| p.depth == d && p.step == last_step).map(|p| p.c).collect();
            (d, finals.iter().sum::<f64>() / finals.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_zero() -> ToyNet {
        ToyNet {
            depth: 0,
            width: 32,
            layers: vec![DenseLayer { inputs: 5, outputs: 1, w: vec![0.0; 5], b: vec![0.0] }],
        }
    }

    #[test]
    fn labels_follow_obstacles_and_brake_light_lags() {
        let data = generate_toy_dataset(&ToyEnvConfig::default(), 5000, ChaCha8Rng::seed_from_u64(0));
        assert!(!data[0].obs.brake_light);
        for w in data.windows(2) {
            assert_eq!(w[0].action, w[0].obs.obstacle);
            assert_eq!(w[1].obs.brake_light, w[0].action);
        }
        assert!(data.iter().all(|s| s.obs.noise.iter().all(|n| (0.0..1.0).contains(n))));
    }

    #[test]
    fn one_step_bias_update_is_analytic() {
        let mut net = linear_zero();
        let sample = ToySample {
            obs: ToyObservation { obstacle: false, brake_light: false, noise: [0.0; 3] },
            action: true,
        };
        sgd_step(&mut net, &sample, 0.1, 0).unwrap();
        assert!((net.layers[0].b[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_net_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = ToyNet::new(2, 8, &mut rng);
        let before = net.clone();
        let s = generate_toy_dataset(&ToyEnvConfig::default(), 1, rng)[0];
        sgd_step(&mut net, &s, 0.0, 0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = linear_zero();
        net.layers[0].w[2] = f64::NAN;
        let sample = ToySample { obs: ToyObservation { obstacle: true, brake_light: false, noise: [0.5; 3] }, action: true };
        assert!(matches!(sgd_step(&mut net, &sample, 0.1, 7), Err(ModelError::NonFinite { step: 7, .. })));
    }

    #[test]
    fn metric_direct_formula() {
        // Logit w0*obstacle + w1*brake with sigmoid(w0)=0.9, sigmoid(w1)=0.1.
        let mut net = linear_zero();
        net.layers[0].w[0] = 9f64.ln();
        net.layers[0].w[1] = -(9f64.ln());
        let c = causality_metric(&net, &CausalityProbe::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!((c - 9f64.ln()).abs() < 1e-12);
        let c0 = causality_metric(&linear_zero(), &CausalityProbe::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c0, 0.0);
    }

    #[test]
    fn zero_steps_gives_only_initial_point() {
        let cfg = ToyExperimentConfig { depths: vec![0, 1], steps: 0, seeds: vec![3], ..Default::default() };
        let curves = run_toy_experiment(&cfg).unwrap();
        assert_eq!(curves.len(), 2);
        assert!(curves.iter().all(|p| p.step == 0));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = ToyExperimentConfig { depths: vec![1], steps: 3000, seeds: vec![9], ..Default::default() };
        assert_eq!(run_toy_experiment(&cfg).unwrap(), run_toy_experiment(&cfg).unwrap());
    }
}
