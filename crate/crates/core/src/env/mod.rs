//! Programmatic pixel environments with scripted experts: a raycast
//! corridor loop (lap time) and a target-tap arena (hits), plus data
//! collection and closed-loop evaluation.

pub mod corridor;
pub mod target;
pub mod track;

pub use corridor::{CorridorConfig, CorridorExpert, CorridorWorld, EnvAction};
pub use target::{TargetConfig, TargetExpert, TargetWorld};
pub use track::{Projection, Track, TrackDef};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, RawAction, Trajectory};
use crate::error::{DataError, EngineError};
use crate::inference::{Engine, RealtimeConfig};
use crate::policy::PolicyModel;

pub const CORRIDOR_GAME: &str = "corridor";
pub const TARGET_GAME: &str = "target-tap";

/// What a controller may look at besides the rendered frame.
#[derive(Clone, Copy)]
pub enum EnvView<'a> {
    Corridor(&'a CorridorWorld),
    Target(&'a TargetWorld),
}

pub trait Controller {
    /// Called before every episode with that episode's seed.
    fn reset(&mut self, seed: u64);
    fn act(&mut self, frame: &Frame, view: EnvView<'_>) -> Result<RawAction, EngineError>;
}

/// Scripted experts for both environments.
#[derive(Clone, Debug, Default)]
pub struct ExpertController {
    pub corridor: CorridorExpert,
    pub target: TargetExpert,
}

impl Controller for ExpertController {
    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, _frame: &Frame, view: EnvView<'_>) -> Result<RawAction, EngineError> {
        Ok(match view {
            EnvView::Corridor(w) => self.corridor.act(w).to_raw(),
            EnvView::Target(w) => self.target.act(w),
        })
    }
}

/// Uniformly random keys (each of W/A/S/D with probability 1/2) and mouse
/// motion; clicks with probability 1/2.
#[derive(Clone, Debug)]
pub struct RandomController {
    rng: ChaCha8Rng,
    pub max_dx: f64,
}

impl RandomController {
    pub fn new() -> Self {
        RandomController { rng: ChaCha8Rng::seed_from_u64(0), max_dx: 40.0 }
    }

    fn draw(&mut self) -> RawAction {
        let a = EnvAction {
            forward: self.rng.random(),
            back: self.rng.random(),
            left: self.rng.random(),
            right: self.rng.random(),
            turn_dx: self.rng.random_range(-self.max_dx..=self.max_dx).round(),
        };
        let mut raw = a.to_raw();
        raw.dy = self.rng.random_range(-self.max_dx..=self.max_dx).round();
        raw.lb = self.rng.random();
        raw
    }
}

impl Default for RandomController {
    fn default() -> Self {
        Self::new()
    }
}

impl Controller for RandomController {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a9d);
    }

    fn act(&mut self, _frame: &Frame, _view: EnvView<'_>) -> Result<RawAction, EngineError> {
        Ok(self.draw())
    }
}

/// A trained policy driven frame by frame through the inference engine.
pub struct PolicyController {
    pub engine: Engine,
    pub instruction: usize,
}

impl PolicyController {
    pub fn new(model: Arc<PolicyModel>, config: RealtimeConfig) -> Result<Self, EngineError> {
        Ok(PolicyController { engine: Engine::new(model, config)?, instruction: 0 })
    }
}

impl Controller for PolicyController {
    fn reset(&mut self, seed: u64) {
        self.engine.config.seed = seed;
        self.engine.reset();
    }

    fn act(&mut self, frame: &Frame, _view: EnvView<'_>) -> Result<RawAction, EngineError> {
        Ok(self.engine.step(frame, self.instruction)?.raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    /// `None` when the lap was not completed within the budget.
    pub steps_to_lap: Option<usize>,
    pub wall_contacts: usize,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub completion_rate: f64,
    /// Mean and population std of steps_to_lap over completed episodes.
    pub steps_mean: Option<f64>,
    pub steps_std: Option<f64>,
    pub wall_contacts_mean: f64,
    pub results: Vec<EpisodeResult>,
}

pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    Some((m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()))
}

impl EvalStats {
    pub fn from_results(results: Vec<EpisodeResult>) -> Self {
        let n = results.len();
        let steps: Vec<f64> = results.iter().filter_map(|r| r.steps_to_lap.map(|s| s as f64)).collect();
        let ms = mean_std(&steps);
        EvalStats {
            episodes: n,
            completion_rate: steps.len() as f64 / n.max(1) as f64,
            steps_mean: ms.map(|m| m.0),
            steps_std: ms.map(|m| m.1),
            wall_contacts_mean: results.iter().map(|r| r.wall_contacts as f64).sum::<f64>() / n.max(1) as f64,
            results,
        }
    }
}

/// One lap attempt from the spawn chosen by `seed`.
pub fn run_episode<C: Controller + ?Sized>(ctrl: &mut C, config: &CorridorConfig, seed: u64, budget: usize) -> Result<EpisodeResult, EngineError> {
    let mut world = CorridorWorld::reset(config.clone(), seed).map_err(|e| EngineError::Model(e.into()))?;
    ctrl.reset(seed);
    while world.steps < budget && !world.lap_complete() {
        let frame = world.render();
        let raw = ctrl.act(&frame, EnvView::Corridor(&world))?;
        world.step(&EnvAction::from_raw(&raw));
    }
    let completed = world.lap_complete();
    Ok(EpisodeResult { seed, steps_to_lap: completed.then_some(world.steps), wall_contacts: world.wall_contacts, completed })
}

/// Episodes use seeds `seed, seed + 1, ...`; with `workers > 1` episodes are
/// split across threads, each with its own controller from `make`.
pub fn evaluate<C, F>(make: F, config: &CorridorConfig, n_episodes: usize, budget: usize, seed: u64, workers: usize) -> Result<EvalStats, EngineError>
where
    C: Controller,
    F: Fn() -> Result<C, EngineError> + Sync,
{
    if budget == 0 {
        return Err(EngineError::Model(crate::error::ModelError::Config("step budget must be positive".into())));
    }
    let seeds: Vec<u64> = (0..n_episodes as u64).map(|i| seed + i).collect();
    let workers = workers.clamp(1, n_episodes.max(1));
    let per = seeds.len().div_ceil(workers).max(1);
    let chunks: Vec<Result<Vec<EpisodeResult>, EngineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(per)
            .map(|chunk| {
                let make = &make;
                scope.spawn(move || {
                    let mut c = make()?;
                    chunk.iter().map(|&s| run_episode(&mut c, config, s, budget)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut results = Vec::with_capacity(n_episodes);
    for c in chunks {
        results.extend(c?);
    }
    Ok(EvalStats::from_results(results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub corridor: CorridorConfig,
    pub expert: CorridorExpert,
    /// Episodes stop at lap completion or after this many steps.
    pub max_steps: usize,
    /// Per-step probability of starting a burst of random agent actions;
    /// those frames are recorded with `loss_mask = false` and the expert
    /// takes over afterwards. 0 disables.
    pub noise: f64,
    pub burst_len: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { corridor: CorridorConfig::default(), expert: CorridorExpert::default(), max_steps: 1500, noise: 0.0, burst_len: 5 }
    }
}

/// Expert corridor laps; episode `i` uses seed `seed + i`.
pub fn collect_dataset(n_episodes: usize, seed: u64, cfg: &CollectConfig) -> Result<Vec<Trajectory>, DataError> {
    if !(0.0..=1.0).contains(&cfg.noise) || cfg.max_steps == 0 {
        return Err(DataError::Config("noise must be in [0,1] and max_steps positive".into()));
    }
    (0..n_episodes as u64)
        .map(|i| {
            let mut world = CorridorWorld::reset(cfg.corridor.clone(), seed + i)?;
            let mut rng = ChaCha8Rng::seed_from_u64((seed + i) ^ 0x6e01_5e);
            let mut random = RandomController::new();
            random.reset(seed + i);
            let (mut frames, mut actions, mut mask) = (Vec::new(), Vec::new(), Vec::new());
            let mut burst = 0;
            while world.steps < cfg.max_steps && !world.lap_complete() {
                if burst == 0 && cfg.noise > 0.0 && rng.random::<f64>() < cfg.noise {
                    burst = cfg.burst_len;
                }
                let agent = burst > 0;
                let raw = if agent {
                    burst -= 1;
                    let mut r = random.draw();
                    r.dy = 0.0;
                    r.lb = false;
                    r
                } else {
                    cfg.expert.act(&world).to_raw()
                };
                frames.push(world.render());
                mask.push(!agent);
                world.step(&EnvAction::from_raw(&raw));
                actions.push(raw);
            }
            let mut t = Trajectory::new(CORRIDOR_GAME, frames, actions);
            t.loss_mask = mask;
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub episodes: usize,
    pub hits_mean: f64,
    pub hits_std: f64,
    pub hits: Vec<usize>,
}

/// Fixed-length target-tap episodes scored by hits.
pub fn evaluate_target<C: Controller>(ctrl: &mut C, config: &TargetConfig, n_episodes: usize, steps: usize, seed: u64) -> Result<TargetStats, EngineError> {
    let mut hits = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes as u64 {
        let mut w = TargetWorld::reset(config.clone(), seed + i).map_err(|e| EngineError::Model(e.into()))?;
        ctrl.reset(seed + i);
        while w.steps < steps {
            let f = w.render();
            let a = ctrl.act(&f, EnvView::Target(&w))?;
            w.step(&a);
        }
        hits.push(w.hits);
    }
    let (m, s) = mean_std(&hits.iter().map(|&h| h as f64).collect::<Vec<_>>()).unwrap_or((0.0, 0.0));
    Ok(TargetStats { episodes: n_episodes, hits_mean: m, hits_std: s, hits })
}

/// Expert target-tap episodes of fixed length.
pub fn collect_target_dataset(n_episodes: usize, steps: usize, seed: u64, config: &TargetConfig) -> Result<Vec<Trajectory>, DataError> {
    let expert = TargetExpert::default();
    (0..n_episodes as u64)
        .map(|i| {
            let mut w = TargetWorld::reset(config.clone(), seed + i)?;
            let (mut frames, mut actions) = (Vec::new(), Vec::new());
            while w.steps < steps {
                frames.push(w.render());
                let a = expert.act(&w);
                w.step(&a);
                actions.push(a);
            }
            Ok(Trajectory::new(TARGET_GAME, frames, actions))
        })
        .collect()
}
