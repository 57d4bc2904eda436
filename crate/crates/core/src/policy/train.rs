use deskbc_nn::{AdamW, AdamWConfig, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::dataset::{PolicyDataset, WindowRef};
use super::loss::{bc_loss, LossComponents, LossOutput};
use super::model::{Batch, PolicyModel};
use crate::data::{QuantileBinning, Trajectory};
use crate::error::ModelError;

/// Anything the shared training loop can optimise.
pub trait Trainable {
    fn model_config(&self) -> &ModelConfig;
    fn binning(&self) -> &QuantileBinning;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, tape: &mut Tape, batch: &Batch) -> Result<LossOutput, ModelError>;
}

impl Trainable for PolicyModel {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn binning(&self) -> &QuantileBinning {
        &self.binning
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss(&self, tape: &mut Tape, batch: &Batch) -> Result<LossOutput, ModelError> {
        bc_loss(self, tape, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: Option<f64>,
    /// Keyboard cross-entropy on held-out windows (log keyboard perplexity).
    pub test_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
}

pub struct TrainReport<M> {
    /// Model holding the final (or, after a halt, the last good) weights.
    pub model: M,
    pub checkpoints: Vec<Checkpoint>,
    pub train_losses: Vec<f64>,
    pub halted: Option<ModelError>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Deterministic split of trajectory indices into (train, test).
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_test = if n > 1 { ((n as f64 * test_fraction).ceil() as usize).min(n - 1) } else { 0 };
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort();
    train.sort();
    (train, test)
}

const SPLIT_SALT: u64 = 0x5eed_5b11;

/// Mean loss components over `windows`, evaluated `chunk` windows at a time.
pub fn evaluate_windows<M: Trainable>(
    model: &M,
    data: &PolicyDataset,
    windows: &[WindowRef],
    t: usize,
    chunk: usize,
) -> Result<Option<LossComponents>, ModelError> {
    let mut acc = LossComponents::default();
    let mut frames = 0usize;
    for ws in windows.chunks(chunk.max(1)) {
        let batch = data.batch::<ChaCha8Rng>(ws, t, None);
        let mut tape = Tape::new(model.store());
        let out = model.loss(&mut tape, &batch)?;
        let c = out.components;
        let w = c.frames as f64;
        acc.total += c.total * w;
        acc.keyboard += c.keyboard * w;
        acc.mouse += c.mouse * w;
        acc.buttons += c.buttons * w;
        for s in 0..acc.per_slot.len() {
            acc.per_slot[s] += c.per_slot[s] * w;
        }
        frames += c.frames;
    }
    if frames == 0 {
        return Ok(None);
    }
    let n = frames as f64;
    acc.total /= n;
    acc.keyboard /= n;
    acc.mouse /= n;
    acc.buttons /= n;
    acc.per_slot.iter_mut().for_each(|v| *v /= n);
    acc.frames = frames;
    Ok(Some(acc))
}

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64
    } else {
        cfg.learning_rate
    }
}

/// AdamW training on random windows with periodic held-out evaluation and
/// in-memory checkpoints (step 0 included). A non-finite loss or gradient
/// stops training and restores the last good checkpoint.
pub fn train<M: Trainable>(mut model: M, trajs: &[Trajectory], cfg: &TrainConfig) -> Result<TrainReport<M>, ModelError> {
    cfg.validate()?;
    let t = cfg.window.unwrap_or(model.model_config().history_length);
    let (train_idx, test_idx) = split_indices(trajs.len(), cfg.test_fraction, cfg.seed);
    let train_refs: Vec<&Trajectory> = train_idx.iter().map(|&i| &trajs[i]).collect();
    let test_refs: Vec<&Trajectory> = test_idx.iter().map(|&i| &trajs[i]).collect();
    let train_data = PolicyDataset::new(&train_refs, model.binning(), model.model_config())?;
    let test_data = PolicyDataset::new(&test_refs, model.binning(), model.model_config())?;
    if train_data.eligible(t).is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let eval_windows = test_data.tiled_windows(t, cfg.eval_windows);
    let opt_cfg = AdamWConfig {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = AdamW::new(opt_cfg, model.store());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);

    let test_loss = |m: &M| -> Result<Option<f64>, ModelError> {
        Ok(evaluate_windows(m, &test_data, &eval_windows, t, cfg.batch_size)?.map(|c| c.keyboard))
    };
    let mut checkpoints = vec![Checkpoint {
        meta: CheckpointMeta { step: 0, train_loss: None, test_loss: test_loss(&model)? },
        store: model.store().clone(),
        optimizer: Some(opt.clone()),
    }];
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let mut since_ckpt = Vec::new();
    let mut halted = None;
    for step in 0..cfg.steps {
        let windows: Vec<WindowRef> =
            (0..cfg.batch_size).map(|_| train_data.sample_window(t, &mut rng).expect("eligible windows exist")).collect();
        let batch = match &cfg.augment {
            Some(a) => train_data.batch(&windows, t, Some((a, &mut aug_rng))),
            None => train_data.batch::<ChaCha8Rng>(&windows, t, None),
        };
        let (value, mut grads) = {
            let mut tape = Tape::new(model.store());
            let out = model.loss(&mut tape, &batch)?;
            let value = tape.value(out.loss).data[0];
            (value, tape.backward(out.loss))
        };
        if !value.is_finite() || !grads.all_finite() {
            let what = if value.is_finite() { "gradient" } else { "loss" };
            let err = ModelError::NonFinite { what, step: step as u64 };
            log::error!("{err}; restoring checkpoint from step {}", checkpoints.last().unwrap().meta.step);
            *model.store_mut() = checkpoints.last().unwrap().store.clone();
            halted = Some(err);
            break;
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
        }
        opt.update(model.store_mut(), &grads, lr_at(cfg, step));
        train_losses.push(value);
        since_ckpt.push(value);
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let meta = CheckpointMeta {
                step: done,
                train_loss: Some(since_ckpt.iter().sum::<f64>() / since_ckpt.len() as f64),
                test_loss: test_loss(&model)?,
            };
            since_ckpt.clear();
            log::info!("step {done}: train {:.4} test {:?}", meta.train_loss.unwrap(), meta.test_loss);
            // Only the newest checkpoint keeps optimizer state.
            if let Some(prev) = checkpoints.last_mut() {
                prev.optimizer = None;
            }
            checkpoints.push(Checkpoint { meta, store: model.store().clone(), optimizer: Some(opt.clone()) });
        }
    }
    Ok(TrainReport { model, checkpoints, train_losses, halted, train_indices: train_idx, test_indices: test_idx })
}
