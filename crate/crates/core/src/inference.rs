//! Incremental decoding with a sliding-window key/value cache, one backbone
//! pass per frame, plus latency telemetry and a latest-frame handoff.

use std::io::Write;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use deskbc_nn::{Mat, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_mouse, Action, Axis, Frame, RawAction, NUM_SLOTS};
use crate::error::{EngineError, ModelError};
use crate::policy::model::{timestep_specs, TokenKind, TokenSpec};
use crate::policy::{frames_to_mat, DecodeMode, DecodedAction, LayerKv, PolicyModel, Pos};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealtimeConfig {
    pub target_hz: f64,
    /// Attention window in timesteps.
    pub window: usize,
    /// Sampling temperature; 0 decodes by argmax.
    pub temperature: f64,
    pub seed: u64,
    /// Exponential smoothing of emitted mouse deltas (0 = off).
    #[serde(default)]
    pub mouse_smoothing: f64,
}

impl Default for RealtimeConfig {
    fn default() -> Self {
        RealtimeConfig { target_hz: 20.0, window: 32, temperature: 1.0, seed: 0, mouse_smoothing: 0.0 }
    }
}

impl RealtimeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.target_hz > 0.0) || self.window == 0 || !(self.temperature >= 0.0) || !(0.0..1.0).contains(&self.mouse_smoothing) {
            return Err(ModelError::Config("target_hz > 0, window >= 1, temperature >= 0, smoothing in [0,1)".into()));
        }
        Ok(())
    }

    pub fn decode_mode(&self) -> DecodeMode {
        if self.temperature == 0.0 {
            DecodeMode::Argmax
        } else {
            DecodeMode::Sample { temperature: self.temperature }
        }
    }
}

/// Cached keys/values of complete timesteps, oldest first. The `a_in` token
/// is never cached since no other token attends it.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub positions: Vec<Pos>,
}

impl KvCache {
    pub fn new(layers: usize, kv_dim: usize) -> Self {
        KvCache { layers: (0..layers).map(|_| LayerKv::empty(kv_dim)).collect(), positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Distinct timesteps present, ascending.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.positions.iter().map(|p| p.timestep).collect();
        t.dedup();
        t
    }

    pub fn clear(&mut self) {
        let kv_dim = self.layers.first().map_or(0, |l| l.k.cols);
        *self = KvCache::new(self.layers.len(), kv_dim);
    }

    /// Appends the rows of `kv` selected by `rows`, at positions `pos`.
    fn append(&mut self, kv: &[LayerKv], rows: &[usize], pos: impl IntoIterator<Item = Pos>) {
        for (dst, src) in self.layers.iter_mut().zip(kv) {
            dst.k = Mat::vstack(&[&dst.k, &src.k.select_rows(rows)]);
            dst.v = Mat::vstack(&[&dst.v, &src.v.select_rows(rows)]);
        }
        self.positions.extend(pos);
    }

    /// Drops every timestep older than `first_kept`.
    fn evict_before(&mut self, first_kept: usize) {
        let n = self.positions.iter().take_while(|p| p.timestep < first_kept).count();
        if n == 0 {
            return;
        }
        let rest: Vec<usize> = (n..self.positions.len()).collect();
        for l in &mut self.layers {
            l.k = l.k.select_rows(&rest);
            l.v = l.v.select_rows(&rest);
        }
        self.positions.drain(..n);
    }
}

/// Per-step wall times in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLatency {
    pub step: usize,
    pub encode_us: f64,
    pub backbone_us: f64,
    pub decode_us: f64,
    pub sample_us: f64,
    pub total_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub action: Action,
    pub decoded: DecodedAction,
    /// Continuous mouse deltas drawn inside the decoded bins.
    pub mouse_dx: f64,
    pub mouse_dy: f64,
    /// The action as a raw input record.
    pub raw: RawAction,
    pub latent: Vec<f64>,
    pub latency: StepLatency,
}

/// One logical action stream. Not shareable between concurrent callers, but
/// may be moved between threads between steps.
pub struct Engine {
    model: Option<Arc<PolicyModel>>,
    pub config: RealtimeConfig,
    cache: KvCache,
    /// Keys/values of the newest timestep's observation tokens; committed to
    /// the cache together with its action tokens on the following step.
    pending: Option<(Vec<LayerKv>, Vec<Pos>)>,
    next_timestep: usize,
    prev_action: Option<[usize; NUM_SLOTS]>,
    rng: ChaCha8Rng,
    smoothed: (f64, f64),
    pub backbone_calls: u64,
    pub decoder_calls: u64,
}

impl Engine {
    /// Engine without a model; `step` fails until one is loaded.
    pub fn uninitialized(config: RealtimeConfig) -> Self {
        Engine {
            model: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            cache: KvCache::new(0, 0),
            pending: None,
            next_timestep: 0,
            prev_action: None,
            smoothed: (0.0, 0.0),
            backbone_calls: 0,
            decoder_calls: 0,
        }
    }

    pub fn new(model: Arc<PolicyModel>, config: RealtimeConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut e = Engine::uninitialized(config);
        e.load(model);
        Ok(e)
    }

    pub fn load(&mut self, model: Arc<PolicyModel>) {
        self.cache = KvCache::new(model.num_backbone_layers(), model.kv_dim());
        self.model = Some(model);
        self.reset();
    }

    pub fn model(&self) -> Option<&Arc<PolicyModel>> {
        self.model.as_ref()
    }

    /// Empties the cache and restarts the sampling stream; the next step is
    /// timestep 0.
    pub fn reset(&mut self) {
        self.cache.clear();
        self.pending = None;
        self.next_timestep = 0;
        self.prev_action = None;
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.smoothed = (0.0, 0.0);
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Timesteps visible to the next step: committed plus pending.
    pub fn memory_timesteps(&self) -> Vec<usize> {
        let mut t = self.cache.timesteps();
        t.extend(self.pending.as_ref().map(|p| p.1[0].timestep));
        t
    }

    pub fn timestep(&self) -> usize {
        self.next_timestep
    }

    /// Uses the engine's own seeded sampling stream.
    pub fn step(&mut self, frame: &Frame, instruction: usize) -> Result<StepOutput, EngineError> {
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let out = self.step_with_rng(frame, instruction, &mut rng);
        self.rng = rng;
        out
    }

    pub fn step_with_rng<R: Rng + ?Sized>(&mut self, frame: &Frame, instruction: usize, rng: &mut R) -> Result<StepOutput, EngineError> {
        let model = self.model.clone().ok_or(EngineError::Uninitialized)?;
        let res = model.config.frame_resolution;
        if frame.width != res || frame.height != res {
            return Err(EngineError::FrameSize { got_w: frame.width, got_h: frame.height, want: res });
        }
        if instruction >= model.config.instruction_vocab {
            return Err(ModelError::Shape(format!("instruction id {instruction} outside vocabulary")).into());
        }
        let layout = model.layout();
        let i = self.next_timestep;
        let w = self.config.window;
        let t0 = Instant::now();

        // Previous timestep's action tokens, then this timestep up to a_in.
        let mut specs: Vec<TokenSpec> = Vec::with_capacity(layout.tokens_per_step());
        if let Some(prev) = self.prev_action {
            specs.extend((0..NUM_SLOTS).map(|slot| TokenSpec {
                pos: Pos { timestep: i - 1, idx: layout.action_index(slot) },
                kind: TokenKind::Action { slot, class: prev[slot] },
            }));
        }
        specs.extend(timestep_specs(&layout, i, instruction, 0, None));
        let frames = frames_to_mat(&[frame]);

        let mut tape = Tape::new(&model.store);
        let x = model.embed(&mut tape, &specs, &frames);
        let t1 = Instant::now();
        let (past, past_pos) = match &self.pending {
            None => (self.cache.layers.clone(), self.cache.positions.clone()),
            Some((kv, pos)) => (
                self.cache
                    .layers
                    .iter()
                    .zip(kv)
                    .map(|(c, p)| LayerKv { k: Mat::vstack(&[&c.k, &p.k]), v: Mat::vstack(&[&c.v, &p.v]) })
                    .collect(),
                self.cache.positions.iter().chain(pos).copied().collect(),
            ),
        };
        let (h, new_kv) = model.backbone_cached(&mut tape, x, &specs, &past, &past_pos, Some(w));
        self.backbone_calls += 1;
        let latent = Mat::from_vec(1, model.config.hidden(), tape.value(h).row(specs.len() - 1).to_vec());
        // Rows: [a(i-1) x 8 if any] [t, o.., k of step i] [a_in].
        let n_prev = if self.prev_action.is_some() { NUM_SLOTS } else { 0 };
        if let Some((kv, pos)) = self.pending.take() {
            let all: Vec<usize> = (0..pos.len()).collect();
            self.cache.append(&kv, &all, pos);
            let acts: Vec<usize> = (0..n_prev).collect();
            self.cache.append(&new_kv, &acts, specs[..n_prev].iter().map(|s| s.pos));
        }
        self.cache.evict_before((i + 1).saturating_sub(w));
        let obs: Vec<usize> = (n_prev..specs.len() - 1).collect();
        let pending_kv = new_kv.iter().map(|l| LayerKv { k: l.k.select_rows(&obs), v: l.v.select_rows(&obs) }).collect();
        self.pending = Some((pending_kv, obs.iter().map(|&r| specs[r].pos).collect()));
        drop(tape);
        let t2 = Instant::now();

        let mut calls = 0u64;
        let decoded = model.decode_action_counted(&latent, self.config.decode_mode(), rng, &mut || calls += 1)?;
        self.decoder_calls += calls;
        let t3 = Instant::now();

        let mut dx = sample_mouse(decoded.action.dx_bin as usize, Axis::X, &model.binning, &model.tn, rng);
        let mut dy = sample_mouse(decoded.action.dy_bin as usize, Axis::Y, &model.binning, &model.tn, rng);
        if self.config.mouse_smoothing > 0.0 {
            let a = self.config.mouse_smoothing;
            self.smoothed = (a * self.smoothed.0 + (1.0 - a) * dx, a * self.smoothed.1 + (1.0 - a) * dy);
            (dx, dy) = self.smoothed;
        }
        let action = decoded.action;
        let raw = RawAction { keys: action.pressed_keys(), dx, dy, lb: action.buttons[0], rb: action.buttons[1] };
        self.prev_action = Some(action.slots());
        self.next_timestep += 1;
        let t4 = Instant::now();

        let us = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e6;
        let latency = StepLatency {
            step: i,
            encode_us: us(t0, t1),
            backbone_us: us(t1, t2),
            decode_us: us(t2, t3),
            sample_us: us(t3, t4),
            total_us: us(t0, t4),
        };
        Ok(StepOutput { action, decoded, mouse_dx: dx, mouse_dy: dy, raw, latent: latent.data, latency })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Nearest-rank percentiles.
pub fn percentiles(values: &[f64]) -> Percentiles {
    if values.is_empty() {
        return Percentiles::default();
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    Percentiles { p50: at(0.5), p90: at(0.9), p99: at(0.99) }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub steps: usize,
    pub encode_us: Percentiles,
    pub backbone_us: Percentiles,
    pub decode_us: Percentiles,
    pub sample_us: Percentiles,
    pub total_us: Percentiles,
    /// `1 / mean step wall time`.
    pub fps: f64,
    pub meets_target: bool,
}

pub const BENCH_WARMUP_STEPS: usize = 10;

pub fn summarize(samples: &[StepLatency], target_hz: f64) -> LatencyReport {
    let col = |f: fn(&StepLatency) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
    let totals = col(|s| s.total_us);
    let mean = totals.iter().sum::<f64>() / totals.len().max(1) as f64;
    let fps = if mean > 0.0 { 1e6 / mean } else { 0.0 };
    LatencyReport {
        steps: samples.len(),
        encode_us: percentiles(&col(|s| s.encode_us)),
        backbone_us: percentiles(&col(|s| s.backbone_us)),
        decode_us: percentiles(&col(|s| s.decode_us)),
        sample_us: percentiles(&col(|s| s.sample_us)),
        total_us: percentiles(&totals),
        fps,
        meets_target: fps >= target_hz,
    }
}

/// Runs `n_steps` steps on `frames` (cycled) from a fresh cache and reports
/// steady-state latency, discarding the first [`BENCH_WARMUP_STEPS`].
pub fn benchmark(engine: &mut Engine, frames: &[Frame], n_steps: usize) -> Result<(LatencyReport, Vec<StepLatency>), EngineError> {
    if n_steps < 100 {
        return Err(ModelError::Config(format!("benchmark needs at least 100 steps, got {n_steps}")).into());
    }
    if frames.is_empty() {
        return Err(ModelError::EmptyDataset.into());
    }
    engine.reset();
    let mut samples = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        samples.push(engine.step(&frames[s % frames.len()], 0)?.latency);
    }
    let steady = &samples[BENCH_WARMUP_STEPS..];
    Ok((summarize(steady, engine.config.target_hz), steady.to_vec()))
}

/// Latency CSV: `step,encode_us,backbone_us,decode_us,sample_us`.
pub fn write_latency_csv<W: Write>(out: W, samples: &[StepLatency]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "encode_us", "backbone_us", "decode_us", "sample_us"])?;
    for s in samples {
        w.write_record([
            s.step.to_string(),
            format!("{:.3}", s.encode_us),
            format!("{:.3}", s.backbone_us),
            format!("{:.3}", s.decode_us),
            format!("{:.3}", s.sample_us),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Capacity-one handoff between a frame producer and the engine: a new frame
/// replaces any frame not yet taken.
#[derive(Default)]
pub struct LatestFrameSlot {
    state: Mutex<SlotState>,
    ready: Condvar,
}

#[derive(Default)]
struct SlotState {
    frame: Option<Frame>,
    dropped: u64,
    closed: bool,
}

impl LatestFrameSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes a frame, dropping the unconsumed one if present.
    pub fn put(&self, frame: Frame) {
        let mut s = self.state.lock().unwrap();
        if s.frame.replace(frame).is_some() {
            s.dropped += 1;
        }
        self.ready.notify_one();
    }

    pub fn try_take(&self) -> Option<Frame> {
        self.state.lock().unwrap().frame.take()
    }

    /// Blocks until a frame is available; `None` once closed and drained.
    pub fn take(&self) -> Option<Frame> {
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(f) = s.frame.take() {
                return Some(f);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap();
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }
}
