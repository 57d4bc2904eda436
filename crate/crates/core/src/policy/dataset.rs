use rand::Rng;

use super::config::ModelConfig;
use super::model::Batch;
use super::nets::frames_to_mat;
use crate::data::{augment, discretize, AugmentConfig, Frame, QuantileBinning, Trajectory, NUM_SLOTS};
use crate::error::ModelError;

/// Trajectories with their actions discretised once up front.
pub struct PolicyDataset<'a> {
    pub trajs: Vec<&'a Trajectory>,
    pub slots: Vec<Vec<[usize; NUM_SLOTS]>>,
    pub instructions: Vec<Vec<usize>>,
}

/// `(trajectory index, first frame)` of a training window.
pub type WindowRef = (usize, usize);

impl<'a> PolicyDataset<'a> {
    pub fn new(trajs: &[&'a Trajectory], binning: &QuantileBinning, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let mut slots = Vec::with_capacity(trajs.len());
        let mut instructions = Vec::with_capacity(trajs.len());
        for t in trajs {
            t.validate()?;
            if let Some((w, h)) = t.frame_size() {
                if w != cfg.frame_resolution || h != cfg.frame_resolution {
                    return Err(ModelError::Shape(format!(
                        "trajectory `{}` has {w}x{h} frames, model expects {r}x{r}",
                        t.game_id,
                        r = cfg.frame_resolution
                    )));
                }
            }
            slots.push(t.actions.iter().map(|a| discretize(a, binning).map(|d| d.slots())).collect::<Result<Vec<_>, _>>()?);
            let ins: Vec<usize> = (0..t.len()).map(|i| t.instruction_at(i) as usize).collect();
            if let Some(&bad) = ins.iter().find(|&&i| i >= cfg.instruction_vocab) {
                return Err(ModelError::Shape(format!("instruction id {bad} outside vocabulary of {}", cfg.instruction_vocab)));
            }
            instructions.push(ins);
        }
        Ok(PolicyDataset { trajs: trajs.to_vec(), slots, instructions })
    }

    pub fn len(&self) -> usize {
        self.trajs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajs.is_empty()
    }

    /// Trajectories long enough for a `t`-step window.
    pub fn eligible(&self, t: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.trajs[i].len() >= t).collect()
    }

    /// Uniformly random window among all valid start positions.
    pub fn sample_window<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Option<WindowRef> {
        let starts: usize = self.eligible(t).iter().map(|&i| self.trajs[i].len() - t + 1).sum();
        if starts == 0 {
            return None;
        }
        let mut k = rng.random_range(0..starts);
        for i in self.eligible(t) {
            let n = self.trajs[i].len() - t + 1;
            if k < n {
                return Some((i, k));
            }
            k -= n;
        }
        unreachable!()
    }

    /// Non-overlapping windows in order, at most `limit` of them, spread
    /// evenly over all candidates.
    pub fn tiled_windows(&self, t: usize, limit: usize) -> Vec<WindowRef> {
        let all: Vec<WindowRef> =
            self.eligible(t).into_iter().flat_map(|i| (0..self.trajs[i].len() / t).map(move |k| (i, k * t))).collect();
        if all.len() <= limit {
            return all;
        }
        (0..limit).map(|j| all[j * all.len() / limit]).collect()
    }

    /// Materialises windows of `t` steps, optionally augmenting frames.
    pub fn batch<R: Rng + ?Sized>(&self, windows: &[WindowRef], t: usize, augment_with: Option<(&AugmentConfig, &mut R)>) -> Batch {
        let mut frames: Vec<std::borrow::Cow<'_, Frame>> = Vec::with_capacity(windows.len() * t);
        let (mut instructions, mut inputs, mut loss_mask) = (Vec::new(), Vec::new(), Vec::new());
        let mut aug = augment_with;
        for &(i, start) in windows {
            let traj = self.trajs[i];
            for f in start..start + t {
                frames.push(match aug.as_mut() {
                    Some((cfg, rng)) => std::borrow::Cow::Owned(augment(&traj.frames[f], cfg, *rng)),
                    None => std::borrow::Cow::Borrowed(&traj.frames[f]),
                });
                instructions.push(self.instructions[i][f]);
                inputs.push(self.slots[i][f]);
                loss_mask.push(traj.loss_mask[f]);
            }
        }
        let refs: Vec<&Frame> = frames.iter().map(|f| f.as_ref()).collect();
        Batch {
            n: windows.len(),
            t,
            frames: frames_to_mat(&refs),
            instructions,
            targets: inputs.clone(),
            inputs,
            loss_mask,
        }
    }
}

/// Quantile bins fitted on every recorded mouse delta of `trajs`.
pub fn fit_binning(trajs: &[Trajectory], bins_per_side: usize) -> QuantileBinning {
    let dx: Vec<f64> = trajs.iter().flat_map(|t| t.actions.iter().map(|a| a.dx)).collect();
    let dy: Vec<f64> = trajs.iter().flat_map(|t| t.actions.iter().map(|a| a.dy)).collect();
    QuantileBinning::fit(&dx, &dy, bins_per_side)
}
