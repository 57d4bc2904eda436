use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{action_log_probs, factored_kl, seeded, EvalSequence};
use crate::data::Frame;
use crate::error::AnalysisError;
use crate::policy::PolicyModel;

/// Lossy frame processing standing in for a capture/codec pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossyTransform {
    Identity,
    /// Additive Gaussian noise with this std in 0..255 pixel units.
    Noise { sigma: f64 },
    /// Box downscale by an integer factor, then nearest-neighbour upscale.
    Downscale { factor: usize },
    /// Per-channel rounding to multiples of `step`.
    Quantize { step: u8 },
}

impl LossyTransform {
    pub fn name(&self) -> &'static str {
        match self {
            LossyTransform::Identity => "identity",
            LossyTransform::Noise { .. } => "noise",
            LossyTransform::Downscale { .. } => "downscale",
            LossyTransform::Quantize { .. } => "quantize",
        }
    }

    pub fn strength(&self) -> f64 {
        match *self {
            LossyTransform::Identity => 0.0,
            LossyTransform::Noise { sigma } => sigma,
            LossyTransform::Downscale { factor } => factor as f64,
            LossyTransform::Quantize { step } => step as f64,
        }
    }

    /// Builds a transform from a kind name and strength.
    pub fn parse(kind: &str, strength: f64) -> Result<Self, AnalysisError> {
        Ok(match kind {
            "identity" => LossyTransform::Identity,
            "noise" if strength >= 0.0 => LossyTransform::Noise { sigma: strength },
            "downscale" if strength >= 1.0 => LossyTransform::Downscale { factor: strength as usize },
            "quantize" if (1.0..=255.0).contains(&strength) => LossyTransform::Quantize { step: strength as u8 },
            _ => return Err(AnalysisError::InvalidInput(format!("bad transform `{kind}` with strength {strength}"))),
        })
    }

    /// Deterministic in (`self`, `seed`, frame contents).
    pub fn apply(&self, frame: &Frame, seed: u64) -> Frame {
        let (w, h) = (frame.width, frame.height);
        let px = match *self {
            LossyTransform::Identity => return frame.clone(),
            LossyTransform::Noise { sigma } => {
                if sigma == 0.0 {
                    return frame.clone();
                }
                let mut rng = seeded(seed);
                let n = Normal::new(0.0, sigma).expect("sigma >= 0");
                frame.pixels.iter().map(|&v| (v as f64 + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8).collect()
            }
            LossyTransform::Downscale { factor } => {
                let f = factor.max(1);
                let mut out = frame.pixels.clone();
                for by in (0..h).step_by(f) {
                    for bx in (0..w).step_by(f) {
                        let (ye, xe) = ((by + f).min(h), (bx + f).min(w));
                        let area = ((ye - by) * (xe - bx)) as f64;
                        for c in 0..3 {
                            let s: f64 = (by..ye).flat_map(|y| (bx..xe).map(move |x| (y, x))).map(|(y, x)| frame.pixels[(y * w + x) * 3 + c] as f64).sum();
                            let v = (s / area).round() as u8;
                            for y in by..ye {
                                for x in bx..xe {
                                    out[(y * w + x) * 3 + c] = v;
                                }
                            }
                        }
                    }
                }
                out
            }
            LossyTransform::Quantize { step } => {
                let q = step.max(1) as f64;
                frame.pixels.iter().map(|&v| ((v as f64 / q).round() * q).min(255.0) as u8).collect()
            }
        };
        Frame { width: w, height: h, pixels: px }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapProbeConfig {
    pub transform: LossyTransform,
    /// Number of sequences used (all when larger).
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub transform: String,
    pub strength: f64,
    pub mean_kl: f64,
}

/// Mean over every timestep of `KL(f(raw) || f(transformed))`.
pub fn gap_probe(model: &PolicyModel, seqs: &[EvalSequence], cfg: &GapProbeConfig) -> Result<f64, AnalysisError> {
    let seqs = &seqs[..seqs.len().min(cfg.samples)];
    if seqs.is_empty() {
        return Err(AnalysisError::InvalidInput("gap probe needs at least one sequence".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, seq) in seqs.iter().enumerate() {
        let at: Vec<usize> = (0..seq.len()).collect();
        let raw: Vec<&Frame> = seq.frames.iter().collect();
        let lossy: Vec<Frame> =
            seq.frames.iter().enumerate().map(|(i, f)| cfg.transform.apply(f, cfg.seed ^ ((b as u64) << 32 | i as u64))).collect();
        if lossy == seq.frames {
            count += at.len();
            continue;
        }
        let lossy_refs: Vec<&Frame> = lossy.iter().collect();
        let p = action_log_probs(model, seq, &raw, &at)?;
        let q = action_log_probs(model, seq, &lossy_refs, &at)?;
        total += p.iter().zip(&q).map(|(a, b)| factored_kl(a, b)).sum::<f64>();
        count += at.len();
    }
    Ok(total / count as f64)
}

/// One row per strength, in the given order.
pub fn gap_sweep(model: &PolicyModel, seqs: &[EvalSequence], kind: &str, strengths: &[f64], samples: usize, seed: u64) -> Result<Vec<GapRow>, AnalysisError> {
    strengths
        .iter()
        .map(|&s| {
            let transform = LossyTransform::parse(kind, s)?;
            let mean_kl = gap_probe(model, seqs, &GapProbeConfig { transform, samples, seed })?;
            Ok(GapRow { transform: transform.name().into(), strength: s, mean_kl })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mild_settings_are_identity() {
        let f = Frame { width: 4, height: 4, pixels: (0..48).map(|v| v as u8 * 5).collect() };
        for t in [LossyTransform::Identity, LossyTransform::Noise { sigma: 0.0 }, LossyTransform::Downscale { factor: 1 }, LossyTransform::Quantize { step: 1 }] {
            assert_eq!(t.apply(&f, 3), f, "{t:?}");
        }
        let n = LossyTransform::Noise { sigma: 4.0 };
        assert_eq!(n.apply(&f, 3), n.apply(&f, 3));
        assert_ne!(n.apply(&f, 3), f);
    }

    #[test]
    fn downscale_averages_blocks() {
        let f = Frame { width: 2, height: 2, pixels: vec![0, 0, 0, 10, 10, 10, 20, 20, 20, 30, 30, 30] };
        let g = LossyTransform::Downscale { factor: 2 }.apply(&f, 0);
        assert!(g.pixels.iter().all(|&v| v == 15));
    }
}
