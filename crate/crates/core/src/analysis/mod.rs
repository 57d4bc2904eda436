//! Offline metrics: causality score, keyboard perplexity, the
//! training/inference gap probe, checkpoint selection and the data-scaling
//! power-law fit.

pub mod causality;
pub mod probe;
pub mod scaling;

use std::io::Write;

pub use causality::{causality_score, causality_score_seeds, CausalityEvalConfig, CausalityReport};
pub use probe::{gap_probe, gap_sweep, GapProbeConfig, GapRow, LossyTransform};
pub use scaling::{fit_power_law, ScalingFitParams};

use deskbc_nn::mat::log_softmax;
use deskbc_nn::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Frame, NUM_SLOTS};
use crate::error::{AnalysisError, ModelError};
use crate::policy::{evaluate_windows, frames_to_mat, Batch, CheckpointMeta, PolicyDataset, PolicyModel};

/// One evaluation sequence with discretised actions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSequence {
    pub game_id: String,
    pub frames: Vec<Frame>,
    pub instructions: Vec<usize>,
    pub actions: Vec<[usize; NUM_SLOTS]>,
}

impl EvalSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Cuts `t`-step windows out of a dataset (`(trajectory, start)` pairs).
pub fn eval_sequences(data: &PolicyDataset, windows: &[(usize, usize)], t: usize) -> Vec<EvalSequence> {
    windows
        .iter()
        .map(|&(i, s)| {
            let tr = data.trajs[i];
            EvalSequence {
                game_id: tr.game_id.clone(),
                frames: tr.frames[s..s + t].to_vec(),
                instructions: data.instructions[i][s..s + t].to_vec(),
                actions: data.slots[i][s..s + t].to_vec(),
            }
        })
        .collect()
}

/// Per-slot action log-distributions (conditioned on the true slot prefix)
/// at timesteps `at` of a sequence whose frames are `frames`.
pub fn action_log_probs(model: &PolicyModel, seq: &EvalSequence, frames: &[&Frame], at: &[usize]) -> Result<Vec<[Vec<f64>; NUM_SLOTS]>, ModelError> {
    let t = seq.len();
    let batch = Batch {
        n: 1,
        t,
        frames: frames_to_mat(frames),
        instructions: seq.instructions.clone(),
        inputs: seq.actions.clone(),
        targets: seq.actions.clone(),
        loss_mask: vec![true; t],
    };
    let mut tape = Tape::new(&model.store);
    let (_, latents) = model.forward_batch(&mut tape, &batch, None, 0)?;
    let z = tape.gather(latents, std::rc::Rc::new(at.to_vec()));
    let targets: Vec<[usize; NUM_SLOTS]> = at.iter().map(|&i| seq.actions[i]).collect();
    let logits = model.slot_logits(&mut tape, z, &targets);
    Ok((0..at.len())
        .map(|r| std::array::from_fn(|s| log_softmax(tape.value(logits[s]).row(r))))
        .collect())
}

/// `KL(p || q)` for log-probability vectors.
pub fn kl_log(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) }).sum::<f64>().max(0.0)
}

/// Summed per-slot KL between two factored action distributions.
pub fn factored_kl(p: &[Vec<f64>; NUM_SLOTS], q: &[Vec<f64>; NUM_SLOTS]) -> f64 {
    p.iter().zip(q).map(|(a, b)| kl_log(a, b)).sum()
}

/// `exp` of the mean keyboard-slot cross-entropy over unmasked frames of
/// every `t`-step tile of the dataset.
pub fn keyboard_perplexity(model: &PolicyModel, data: &PolicyDataset, t: usize) -> Result<f64, AnalysisError> {
    let windows = data.tiled_windows(t, usize::MAX);
    if windows.is_empty() {
        return Err(AnalysisError::InvalidInput(format!("no trajectory has {t} frames")));
    }
    let c = evaluate_windows(model, data, &windows, t, 8)?
        .ok_or_else(|| AnalysisError::InvalidInput("every frame is loss-masked".into()))?;
    Ok(c.keyboard.exp())
}

/// Index of the checkpoint with the lowest test loss; ties go to the
/// earliest step. Entries without a test loss are ignored.
pub fn select_checkpoint(series: &[CheckpointMeta]) -> Result<usize, AnalysisError> {
    let mut best: Option<(usize, f64, usize)> = None;
    for (i, m) in series.iter().enumerate() {
        let Some(l) = m.test_loss else { continue };
        let better = match best {
            None => true,
            Some((_, bl, bs)) => l < bl || (l == bl && m.step < bs),
        };
        if better {
            best = Some((i, l, m.step));
        }
    }
    best.map(|b| b.0).ok_or_else(|| AnalysisError::InvalidInput("no checkpoint has a recorded test loss".into()))
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `checkpoint_step,test_loss,causality_score`.
pub fn write_causality_csv<W: Write>(out: W, rows: &[(usize, Option<f64>, f64)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["checkpoint_step", "test_loss", "causality_score"])?;
    for (step, loss, score) in rows {
        w.write_record([step.to_string(), loss.map_or(String::new(), |l| l.to_string()), score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `D,L,L_fit`.
pub fn write_scaling_csv<W: Write>(out: W, points: &[(f64, f64)], fit: &ScalingFitParams) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["D", "L", "L_fit"])?;
    for &(d, l) in points {
        w.write_record([d.to_string(), l.to_string(), fit.predict(d).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `transform,strength,mean_KL`.
pub fn write_gap_csv<W: Write>(out: W, rows: &[GapRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["transform", "strength", "mean_KL"])?;
    for r in rows {
        w.write_record([r.transform.clone(), r.strength.to_string(), r.mean_kl.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
