//! Non-causal inverse-dynamics model: sees a whole window of frames in both
//! directions and predicts every timestep's action in one pass.

use std::path::Path;
use std::rc::Rc;

use deskbc_nn::mat::log_softmax;
use deskbc_nn::{Mat, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{
    encode_checkpoint, read_checkpoint, restore_optimizer, restore_store, sha256_hex, CheckpointHeader, ModelKind,
};
use super::config::ModelConfig;
use super::layout::{build_idm_mask, IdmLayout};
use super::loss::{slot_loss, LossComponents, LossOutput};
use super::model::Batch;
use super::nets::{frames_to_mat, ImageEncoder, Stack};
use super::train::{CheckpointMeta, Trainable};
use crate::data::{
    bin_center, Action, Axis, Frame, Key, Provenance, QuantileBinning, RawAction, Trajectory, TruncatedNormalParams,
    KEY_SLOTS, NUM_SLOTS,
};
use crate::error::ModelError;

pub struct IdmModel {
    pub config: ModelConfig,
    pub binning: QuantileBinning,
    pub tn: TruncatedNormalParams,
    pub store: ParamStore,
    encoder: ImageEncoder,
    readout: ParamId,
    type_emb: ParamId,
    backbone: Stack,
    heads: Vec<(ParamId, ParamId)>,
}

impl IdmModel {
    pub fn new(mut config: ModelConfig, binning: QuantileBinning, tn: TruncatedNormalParams, seed: u64) -> Result<Self, ModelError> {
        config.mouse_bins_x = binning.x.num_bins();
        config.mouse_bins_y = binning.y.num_bins();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden();
        let encoder = ImageEncoder::new(&mut store, "idm.enc", config.frame_resolution, &config.encoder_channels, config.image_tokens, h, &mut rng);
        let readout = store.table("idm.readout", 1, h, 1.0, &mut rng);
        let type_emb = store.table("idm.type_emb", 2, h, 1.0, &mut rng);
        let b = &config.backbone;
        let backbone = Stack::new(&mut store, "idm.bb", b.num_layers, h, b.query_heads, b.kv_heads, b.mlp_ratio, config.use_qk_norm, &mut rng);
        let heads = config
            .slot_vocabs()
            .iter()
            .enumerate()
            .map(|(s, &v)| {
                (
                    store.normal(&format!("idm.head{s}.w"), h, v, (1.0 / h as f64).sqrt(), &mut rng),
                    store.constant(&format!("idm.head{s}.b"), 1, v, 0.0),
                )
            })
            .collect();
        Ok(IdmModel { config, binning, tn, store, encoder, readout, type_emb, backbone, heads })
    }

    pub fn layout(&self) -> IdmLayout {
        IdmLayout { image_tokens: self.config.image_tokens }
    }

    /// Per-slot logits (`n * t` rows each) for `n` windows of `t` frames.
    pub fn forward(&self, tape: &mut Tape, frames: &Mat, n: usize, t: usize) -> Vec<Var> {
        assert_eq!(frames.rows, n * t, "idm: frame count mismatch");
        let layout = self.layout();
        let n_i = layout.image_tokens;
        let tps = layout.tokens_per_step();
        let f = tape.leaf(frames.clone());
        let img = self.encoder.forward(tape, f);
        let ro = tape.param(self.readout);
        let all = tape.concat(&[img, ro]);
        let readout_row = n * t * n_i;
        let order: Vec<usize> =
            (0..n * t).flat_map(|r| (0..tps).map(move |j| if j < n_i { r * n_i + j } else { readout_row })).collect();
        let x = tape.gather(all, Rc::new(order));
        let types: Vec<usize> = (0..n * t).flat_map(|_| (0..tps).map(|j| (j == n_i) as usize)).collect();
        let tt = tape.param(self.type_emb);
        let te = tape.gather(tt, Rc::new(types));
        let x = tape.add(x, te);
        let positions: Vec<f64> = (0..t * tps).map(|p| p as f64).collect();
        let mask = build_idm_mask(t, &layout);
        let (h, _) = self.backbone.forward(tape, x, n, &positions, self.config.rope_base, None, &mask.data);
        let rows = tape.gather(h, Rc::new((0..n * t).map(|r| r * tps + n_i).collect()));
        self.heads.iter().map(|&(w, b)| tape.linear(rows, w, Some(b))).collect()
    }

    /// Per-frame argmax slots for one window.
    pub fn predict_window(&self, frames: &[&Frame]) -> Vec<[usize; NUM_SLOTS]> {
        let m = frames_to_mat(frames);
        let mut tape = Tape::new(&self.store);
        let logits = self.forward(&mut tape, &m, 1, frames.len());
        (0..frames.len())
            .map(|r| {
                let mut s = [0; NUM_SLOTS];
                for (slot, l) in logits.iter().enumerate() {
                    let row = tape.value(*l).row(r);
                    s[slot] = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                }
                s
            })
            .collect()
    }

    /// Per-slot log-probabilities for one window (`[frame][slot] -> Vec`).
    pub fn window_log_probs(&self, frames: &[&Frame]) -> Vec<Vec<Vec<f64>>> {
        let m = frames_to_mat(frames);
        let mut tape = Tape::new(&self.store);
        let logits = self.forward(&mut tape, &m, 1, frames.len());
        (0..frames.len()).map(|r| logits.iter().map(|l| log_softmax(tape.value(*l).row(r))).collect()).collect()
    }

    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<String, ModelError> {
        let header = CheckpointHeader {
            kind: ModelKind::InverseDynamics,
            config: self.config.clone(),
            binning: self.binning.clone(),
            truncated_normal: self.tn,
            meta,
            optimizer: None,
        };
        let bytes = encode_checkpoint(&header, &self.store, None);
        std::fs::write(path, &bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<IdmModel, ModelError> {
        let d = read_checkpoint(path)?;
        let bad = |reason: String| ModelError::Checkpoint { path: path.to_path_buf(), reason };
        if d.header.kind != ModelKind::InverseDynamics {
            return Err(bad(format!("expected an inverse-dynamics checkpoint, found {:?}", d.header.kind)));
        }
        let mut m = IdmModel::new(d.header.config.clone(), d.header.binning.clone(), d.header.truncated_normal, 0)?;
        restore_store(&mut m.store, d.blobs).map_err(bad)?;
        let _ = restore_optimizer(&d.header, &m.store, d.optimizer);
        Ok(m)
    }
}

impl Trainable for IdmModel {
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
        batch.check(&self.config)?;
        let logits = self.forward(tape, &batch.frames, batch.n, batch.t);
        let scored: Vec<usize> = (0..batch.n * batch.t).filter(|&r| batch.loss_mask[r]).collect();
        if scored.is_empty() {
            log::warn!("batch has no frames with loss_mask set; loss defined as zero");
            let zero = tape.leaf(Mat::scalar(0.0));
            return Ok(LossOutput { loss: zero, components: LossComponents::default() });
        }
        let idx = Rc::new(scored.clone());
        let picked: Vec<Var> = logits.iter().map(|&l| tape.gather(l, idx.clone())).collect();
        let targets: Vec<[usize; NUM_SLOTS]> = scored.iter().map(|&r| batch.targets[r]).collect();
        Ok(slot_loss(tape, &picked, &targets, self.config.z_loss_coeff))
    }
}

pub struct PseudoLabeled {
    pub trajectory: Trajectory,
    /// Set when the input was shorter than the model's window, so labels
    /// were inferred with reduced context.
    pub reduced_context: bool,
}

/// Converts argmax slots into a raw action; mouse values are the truncated
/// normal means of the predicted bins.
pub fn slots_to_raw(slots: &[usize; NUM_SLOTS], binning: &QuantileBinning, tn: &TruncatedNormalParams) -> Result<RawAction, ModelError> {
    let action = Action::from_slots(slots)?;
    let keys: Vec<Key> = action.keys[..KEY_SLOTS].iter().copied().filter(|k| !k.is_none()).collect();
    Ok(RawAction {
        keys,
        dx: bin_center(slots[4], Axis::X, binning, tn),
        dy: bin_center(slots[5], Axis::Y, binning, tn),
        lb: action.buttons[0],
        rb: action.buttons[1],
    })
}

/// Labels an unlabeled 20 Hz frame sequence with the inverse-dynamics
/// model: tiled windows of `history_length` frames, the last one aligned to
/// the end of the sequence so every frame sees a full window when possible.
pub fn pseudo_label(idm: &IdmModel, game_id: &str, frames: Vec<Frame>) -> Result<PseudoLabeled, ModelError> {
    if frames.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let r = idm.config.frame_resolution;
    if let Some(f) = frames.iter().find(|f| f.width != r || f.height != r) {
        return Err(ModelError::Shape(format!("frame is {}x{}, model expects {r}x{r}", f.width, f.height)));
    }
    let w = idm.config.history_length;
    let n = frames.len();
    let reduced_context = n < w;
    if reduced_context {
        log::warn!("{n} frames is shorter than the {w}-frame window; labeling with reduced context");
    }
    let mut labels: Vec<Option<[usize; NUM_SLOTS]>> = vec![None; n];
    let mut start = 0;
    loop {
        let s = if start + w > n { n.saturating_sub(w) } else { start };
        let e = (s + w).min(n);
        let refs: Vec<&Frame> = frames[s..e].iter().collect();
        for (k, slots) in idm.predict_window(&refs).into_iter().enumerate() {
            labels[s + k].get_or_insert(slots);
        }
        if e == n {
            break;
        }
        start = e;
    }
    let actions = labels
        .into_iter()
        .map(|l| slots_to_raw(&l.expect("every frame labeled"), &idm.binning, &idm.tn))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trajectory = Trajectory::new(game_id, frames, actions);
    trajectory.provenance = Provenance::PseudoLabel;
    Ok(PseudoLabeled { trajectory, reduced_context })
}

/// Fraction of keyboard slots (4 per frame) the IDM's argmax gets right
/// over every tiled `t`-frame window of `data`, counting unmasked frames.
pub fn idm_keyboard_accuracy(idm: &IdmModel, data: &super::PolicyDataset, t: usize) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, s) in data.tiled_windows(t, usize::MAX) {
        let tr = data.trajs[i];
        let refs: Vec<&Frame> = tr.frames[s..s + t].iter().collect();
        for (k, pred) in idm.predict_window(&refs).iter().enumerate() {
            if !tr.loss_mask[s + k] {
                continue;
            }
            let truth = &data.slots[i][s + k];
            hit += (0..KEY_SLOTS).filter(|&j| pred[j] == truth[j]).count();
            total += KEY_SLOTS;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Accuracy on `test` of always predicting each keyboard slot's most
/// frequent class in `train` (unmasked frames of tiled windows).
pub fn majority_keyboard_accuracy(train: &super::PolicyDataset, test: &super::PolicyDataset, t: usize) -> Option<f64> {
    let mut counts = vec![vec![0usize; crate::data::KEY_VOCAB]; KEY_SLOTS];
    for (i, tr) in train.trajs.iter().enumerate() {
        for (f, slots) in train.slots[i].iter().enumerate() {
            if tr.loss_mask[f] {
                for j in 0..KEY_SLOTS {
                    counts[j][slots[j]] += 1;
                }
            }
        }
    }
    let majority: Vec<usize> = counts.iter().map(|c| (0..c.len()).fold(0, |b, k| if c[k] > c[b] { k } else { b })).collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, s) in test.tiled_windows(t, usize::MAX) {
        for f in s..s + t {
            if test.trajs[i].loss_mask[f] {
                hit += (0..KEY_SLOTS).filter(|&j| test.slots[i][f][j] == majority[j]).count();
                total += KEY_SLOTS;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}
