use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{action_log_probs, factored_kl, seeded, EvalSequence};
use crate::data::Frame;
use crate::error::AnalysisError;
use crate::policy::PolicyModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CausalityEvalConfig {
    /// Equal-length temporal chunks per sequence.
    pub chunks: usize,
    /// Per-frame swap probability.
    pub perturb_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CausalityEvalConfig {
    fn default() -> Self {
        CausalityEvalConfig { chunks: 10, perturb_prob: 0.5, batch_size: 32, seed: 0 }
    }
}

impl CausalityEvalConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(0.0..=1.0).contains(&self.perturb_prob) || self.chunks == 0 || self.batch_size == 0 {
            return Err(AnalysisError::InvalidInput("need 0 <= p <= 1, chunks >= 1, batch >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub score: f64,
    /// Per-sequence contribution; `None` when skipped for lack of a
    /// same-game partner.
    pub per_sequence: Vec<Option<f64>>,
    pub frames_swapped: usize,
}

/// Sum over sequences and chunks of `KL(f(o, a) || f(õ, a))` at each chunk's
/// final timestep, where õ replaces each frame with probability p by the
/// same-index frame of a random other same-game sequence in the batch.
/// Only the first `batch_size` sequences are used.
pub fn causality_score(model: &PolicyModel, seqs: &[EvalSequence], cfg: &CausalityEvalConfig) -> Result<CausalityReport, AnalysisError> {
    cfg.validate()?;
    let seqs = &seqs[..seqs.len().min(cfg.batch_size)];
    let Some(first) = seqs.first() else {
        return Err(AnalysisError::InvalidInput("empty evaluation batch".into()));
    };
    let t = first.len();
    if seqs.iter().any(|s| s.len() != t) {
        return Err(AnalysisError::InvalidInput("sequences must share one length".into()));
    }
    let chunk = t / cfg.chunks;
    if chunk == 0 {
        return Err(AnalysisError::InvalidInput(format!("{t} frames cannot form {} chunks", cfg.chunks)));
    }
    if t % cfg.chunks != 0 {
        log::warn!("sequence length {t} is not a multiple of {} chunks; truncating to {}", cfg.chunks, chunk * cfg.chunks);
    }
    let ends: Vec<usize> = (1..=cfg.chunks).map(|c| c * chunk - 1).collect();
    let mut rng = seeded(cfg.seed);
    let mut per_sequence = Vec::with_capacity(seqs.len());
    let mut swapped = 0;
    for (b, seq) in seqs.iter().enumerate() {
        let partners: Vec<usize> = (0..seqs.len()).filter(|&o| o != b && seqs[o].game_id == seq.game_id).collect();
        if partners.is_empty() {
            log::warn!("sequence {b} (game `{}`) has no same-game partner in the batch; skipped", seq.game_id);
            per_sequence.push(None);
            continue;
        }
        let mut perturbed: Vec<&Frame> = seq.frames.iter().collect();
        let mut any = false;
        for (i, f) in perturbed.iter_mut().enumerate().take(chunk * cfg.chunks) {
            if rng.random::<f64>() < cfg.perturb_prob {
                let o = partners[rng.random_range(0..partners.len())];
                *f = &seqs[o].frames[i];
                any = true;
                swapped += 1;
            }
        }
        if !any {
            per_sequence.push(Some(0.0));
            continue;
        }
        let orig: Vec<&Frame> = seq.frames.iter().collect();
        let p = action_log_probs(model, seq, &orig, &ends)?;
        let q = action_log_probs(model, seq, &perturbed, &ends)?;
        per_sequence.push(Some(p.iter().zip(&q).map(|(a, b)| factored_kl(a, b)).sum()));
    }
    let score = per_sequence.iter().flatten().sum();
    Ok(CausalityReport { score, per_sequence, frames_swapped: swapped })
}

/// Mean and population standard deviation of the score over eval seeds.
pub fn causality_score_seeds(model: &PolicyModel, seqs: &[EvalSequence], cfg: &CausalityEvalConfig, seeds: &[u64]) -> Result<(f64, f64), AnalysisError> {
    let scores = seeds
        .iter()
        .map(|&s| causality_score(model, seqs, &CausalityEvalConfig { seed: s, ..cfg.clone() }).map(|r| r.score))
        .collect::<Result<Vec<_>, _>>()?;
    let n = scores.len().max(1) as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
