use std::rc::Rc;

use deskbc_nn::mat::log_sum_exp;
use deskbc_nn::{Tape, Target, Var};
use serde::{Deserialize, Serialize};

use super::model::{Batch, PolicyModel};
use crate::data::{KEY_SLOTS, NUM_SLOTS};
use crate::error::ModelError;

/// Mean per-slot cross-entropies over scored frames, grouped by slot kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub keyboard: f64,
    pub mouse: f64,
    pub buttons: f64,
    pub per_slot: [f64; NUM_SLOTS],
    pub frames: usize,
}

pub struct LossOutput {
    /// Scalar to differentiate: mean CE over slots and scored frames plus
    /// the z-loss term.
    pub loss: Var,
    pub components: LossComponents,
}

/// Behavior-cloning loss on a batch. Frames whose `loss_mask` is false are
/// left out of the action decoder and the loss entirely, so their targets
/// cannot influence any gradient.
pub fn bc_loss(model: &PolicyModel, tape: &mut Tape, batch: &Batch) -> Result<LossOutput, ModelError> {
    let (_, latents) = model.forward_batch(tape, batch, None, 0)?;
    let scored: Vec<usize> = (0..batch.n * batch.t).filter(|&r| batch.loss_mask[r]).collect();
    if scored.is_empty() {
        log::warn!("batch has no frames with loss_mask set; loss defined as zero");
        let zero = tape.leaf(deskbc_nn::Mat::scalar(0.0));
        return Ok(LossOutput { loss: zero, components: LossComponents::default() });
    }
    let targets: Vec<[usize; NUM_SLOTS]> = scored.iter().map(|&r| batch.targets[r]).collect();
    let z = tape.gather(latents, Rc::new(scored));
    let logits = model.slot_logits(tape, z, &targets);
    Ok(slot_loss(tape, &logits, &targets, model.config.z_loss_coeff))
}

/// Sums teacher-forced slot cross-entropies (normalised by frames x 8).
pub fn slot_loss(tape: &mut Tape, logits: &[Var], targets: &[[usize; NUM_SLOTS]], z_coeff: f64) -> LossOutput {
    let m = targets.len();
    let norm = (m * NUM_SLOTS) as f64;
    let mut per_slot = [0.0; NUM_SLOTS];
    let mut terms = Vec::with_capacity(NUM_SLOTS);
    for s in 0..NUM_SLOTS {
        let lv = tape.value(logits[s]);
        per_slot[s] = (0..m).map(|i| log_sum_exp(lv.row(i)) - lv.get(i, targets[i][s])).sum::<f64>() / m as f64;
        let t: Vec<Target> = (0..m).map(|i| Target { row: i, class: targets[i][s] }).collect();
        terms.push(tape.cross_entropy(logits[s], t, norm, z_coeff));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    let mean = |r: std::ops::Range<usize>| per_slot[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let components = LossComponents {
        total: mean(0..NUM_SLOTS),
        keyboard: mean(0..KEY_SLOTS),
        mouse: mean(4..6),
        buttons: mean(6..8),
        per_slot,
        frames: m,
    };
    LossOutput { loss, components }
}
