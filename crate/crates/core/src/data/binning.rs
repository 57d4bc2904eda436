//! Quantile binning of mouse deltas with a dedicated exact-zero bin, and
//! truncated-normal resampling inside a decoded bin.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Bins for one mouse axis, ascending:
/// `(-inf, n0), [n0, n1), .., [n_last, 0)`, then `{0}`, then
/// `(0, p0), [p0, p1), .., [p_last, +inf)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBinning {
    neg_edges: Vec<f64>,
    pos_edges: Vec<f64>,
    has_neg: bool,
    has_pos: bool,
    data_min: f64,
    data_max: f64,
}

impl AxisBinning {
    /// Fits `bins_per_side` quantile bins on each side of zero. Zeros in
    /// `samples` are ignored; an empty side contributes no bins.
    pub fn fit(samples: &[f64], bins_per_side: usize) -> Self {
        assert!(bins_per_side >= 1, "bins_per_side must be at least 1");
        let mut neg: Vec<f64> = samples.iter().copied().filter(|v| *v < 0.0).collect();
        let mut pos: Vec<f64> = samples.iter().copied().filter(|v| *v > 0.0).collect();
        assert!(samples.iter().all(|v| v.is_finite()), "mouse samples must be finite");
        neg.sort_by(f64::total_cmp);
        pos.sort_by(f64::total_cmp);
        if neg.is_empty() || pos.is_empty() {
            log::debug!("mouse binning: {} negative / {} positive samples", neg.len(), pos.len());
        }
        let data_min = neg.first().copied().unwrap_or(0.0);
        let data_max = pos.last().copied().unwrap_or(0.0);
        let neg_edges = quantile_edges(&neg, bins_per_side, |e| e > data_min && e < 0.0);
        let pos_edges = quantile_edges(&pos, bins_per_side, |e| e > 0.0 && e <= data_max);
        AxisBinning { neg_edges, pos_edges, has_neg: !neg.is_empty(), has_pos: !pos.is_empty(), data_min, data_max }
    }

    pub fn num_neg(&self) -> usize {
        if self.has_neg {
            self.neg_edges.len() + 1
        } else {
            0
        }
    }

    pub fn num_pos(&self) -> usize {
        if self.has_pos {
            self.pos_edges.len() + 1
        } else {
            0
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_neg() + 1 + self.num_pos()
    }

    pub fn zero_bin(&self) -> usize {
        self.num_neg()
    }

    pub fn edges(&self) -> (&[f64], &[f64]) {
        (&self.neg_edges, &self.pos_edges)
    }

    /// Index of the bin containing `v`; values beyond the outermost bins
    /// clamp into them, and a side without bins clamps into the zero bin.
    pub fn bin_of(&self, v: f64) -> usize {
        if v < 0.0 && self.has_neg {
            self.neg_edges.partition_point(|e| *e <= v)
        } else if v > 0.0 && self.has_pos {
            self.zero_bin() + 1 + self.pos_edges.partition_point(|e| *e <= v)
        } else {
            self.zero_bin()
        }
    }

    /// Sampling interval `[lo, hi]` of a bin; the outer bins are truncated
    /// at the fitted data range.
    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        assert!(bin < self.num_bins(), "bin {bin} out of range");
        let z = self.zero_bin();
        if bin == z {
            (0.0, 0.0)
        } else if bin < z {
            let lo = if bin == 0 { self.data_min } else { self.neg_edges[bin - 1] };
            let hi = if bin == z - 1 { 0.0 } else { self.neg_edges[bin] };
            (lo, hi)
        } else {
            let j = bin - z - 1;
            let lo = if j == 0 { 0.0 } else { self.pos_edges[j - 1] };
            let hi = if j == self.num_pos() - 1 { self.data_max } else { self.pos_edges[j] };
            (lo, hi)
        }
    }
}

/// Empirical quantile edges of an ascending sample: the order statistic at
/// index `floor(j n / k)` for `j = 1..k`, deduplicated and filtered.
fn quantile_edges(sorted: &[f64], k: usize, keep: impl Fn(f64) -> bool) -> Vec<f64> {
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let mut edges: Vec<f64> = (1..k).map(|j| sorted[(j * n) / k]).filter(|&e| keep(e)).collect::<Vec<_>>();
    edges.dedup();
    edges
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinning {
    pub x: AxisBinning,
    pub y: AxisBinning,
}

impl QuantileBinning {
    pub fn fit(dx: &[f64], dy: &[f64], bins_per_side: usize) -> Self {
        QuantileBinning { x: AxisBinning::fit(dx, bins_per_side), y: AxisBinning::fit(dy, bins_per_side) }
    }

    pub fn axis(&self, axis: Axis) -> &AxisBinning {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
        }
    }
}

/// Normal fitted to undiscretised mouse motion, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormalParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl Default for TruncatedNormalParams {
    fn default() -> Self {
        TruncatedNormalParams { mu_x: 0.0, mu_y: 0.0, sigma_x: 96.0, sigma_y: 22.0 }
    }
}

impl TruncatedNormalParams {
    /// Mean and standard deviation per axis; a zero-variance axis keeps a
    /// unit sigma so that sampling stays defined.
    pub fn fit(dx: &[f64], dy: &[f64]) -> Self {
        let (mu_x, sigma_x) = mean_std(dx);
        let (mu_y, sigma_y) = mean_std(dy);
        TruncatedNormalParams { mu_x, mu_y, sigma_x, sigma_y }
    }

    pub fn for_axis(&self, axis: Axis) -> (f64, f64) {
        match axis {
            Axis::X => (self.mu_x, self.sigma_x),
            Axis::Y => (self.mu_y, self.sigma_y),
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Draws from `Normal(mu, sigma)` restricted to `[lo, hi]` by inverting the
/// CDF on the restricted interval. Intervals in the upper tail are handled
/// through the survival function to keep precision.
pub fn sample_truncated_normal<R: Rng + ?Sized>(lo: f64, hi: f64, mu: f64, sigma: f64, rng: &mut R) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    if hi <= lo {
        return lo;
    }
    let std = Normal::standard();
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let u: f64 = rng.random();
    // Mirror the upper tail onto the lower one.
    let (a, b, flip) = if a > 0.0 { (-b, -a, true) } else { (a, b, false) };
    let pa = std.cdf(a);
    let pb = std.cdf(b);
    let z = if pb - pa > 1e-300 && pb > pa {
        let p = pa + u * (pb - pa);
        std.inverse_cdf(p.clamp(pa, pb)).clamp(a, b)
    } else {
        // Deep-tail fallback: exponential approximation anchored at the edge
        // nearest the mode (here `b`, since the interval lies below zero).
        let rate = -b;
        let width = b - a;
        let t = -(1.0 - u * (1.0 - (-rate * width).exp())).ln() / rate;
        (b - t).clamp(a, b)
    };
    let z = if flip { -z } else { z };
    (mu + sigma * z).clamp(lo, hi)
}

/// Mean of the truncated normal on a bin's interval: a deterministic
/// representative value (exactly 0 for the zero bin).
pub fn bin_center(bin: usize, axis: Axis, binning: &QuantileBinning, tn: &TruncatedNormalParams) -> f64 {
    let ab = binning.axis(axis);
    if bin == ab.zero_bin() {
        return 0.0;
    }
    let (lo, hi) = ab.bounds(bin);
    if hi <= lo {
        return lo;
    }
    let (mu, sigma) = tn.for_axis(axis);
    let std = Normal::standard();
    let (a, b) = ((lo - mu) / sigma, (hi - mu) / sigma);
    let mass = std.cdf(b) - std.cdf(a);
    let mean = if mass > 1e-12 {
        mu + sigma * (std.pdf(a) - std.pdf(b)) / mass
    } else {
        // Far tail: the mass piles up at the edge nearest the mean.
        if a > 0.0 { lo } else { hi }
    };
    let top = bin == ab.num_bins() - 1;
    let x = if !top && mean >= hi { hi.next_down() } else { mean.clamp(lo, hi) };
    if x == 0.0 {
        if bin > ab.zero_bin() { f64::MIN_POSITIVE } else { -f64::MIN_POSITIVE }
    } else {
        x
    }
}

/// Continuous mouse value for a decoded bin. The zero bin returns exactly 0;
/// every other draw lands inside the bin's own half-open interval.
pub fn sample_mouse<R: Rng + ?Sized>(
    bin: usize,
    axis: Axis,
    binning: &QuantileBinning,
    tn: &TruncatedNormalParams,
    rng: &mut R,
) -> f64 {
    let ab = binning.axis(axis);
    if bin == ab.zero_bin() {
        return 0.0;
    }
    let (lo, hi) = ab.bounds(bin);
    let (mu, sigma) = tn.for_axis(axis);
    let mut x = sample_truncated_normal(lo, hi, mu, sigma, rng);
    let top = bin == ab.num_bins() - 1;
    if !top && x >= hi && hi > lo {
        x = hi.next_down();
    }
    if x == 0.0 {
        x = if bin > ab.zero_bin() { f64::MIN_POSITIVE } else { -f64::MIN_POSITIVE };
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_bin_per_side() {
        let a = AxisBinning::fit(&[-10.0, -5.0, -1.0, 1.0, 5.0, 10.0], 1);
        assert_eq!(a.num_bins(), 3);
        assert_eq!(a.bin_of(-1e9), 0);
        assert_eq!(a.bin_of(0.0), 1);
        assert_eq!(a.bin_of(1e9), 2);
    }

    #[test]
    fn all_zero_samples_give_single_zero_bin() {
        let a = AxisBinning::fit(&[0.0; 50], 10);
        assert_eq!(a.num_bins(), 1);
        assert_eq!(a.bin_of(0.0), a.zero_bin());
        assert_eq!(a.bin_of(3.0), 0);
    }

    #[test]
    fn values_below_lowest_edge_clamp_to_bin_zero() {
        let s: Vec<f64> = (1..=100).flat_map(|i| [i as f64, -(i as f64)]).collect();
        let a = AxisBinning::fit(&s, 10);
        assert_eq!(a.num_bins(), 21);
        assert_eq!(a.bin_of(-1000.0), 0);
        assert_eq!(a.bin_of(1000.0), 20);
        let (lo, _) = a.bounds(0);
        assert_eq!(a.bin_of(lo.next_down()), 0);
    }

    #[test]
    fn duplicate_edges_are_merged() {
        let mut s = vec![1.0; 90];
        s.extend((0..10).map(|i| 2.0 + i as f64));
        let a = AxisBinning::fit(&s, 10);
        let (_, pos) = a.edges();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(a.num_bins() < 21);
    }

    #[test]
    fn zero_bin_samples_exactly_zero() {
        let b = QuantileBinning::fit(&[-3.0, 2.0], &[], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = b.x.zero_bin();
        assert_eq!(sample_mouse(z, Axis::X, &b, &TruncatedNormalParams::default(), &mut rng), 0.0);
    }

    #[test]
    fn deep_tail_interval_stays_inside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = sample_truncated_normal(5000.0, 6000.0, 0.0, 22.0, &mut rng);
            assert!((5000.0..=6000.0).contains(&x));
            let y = sample_truncated_normal(-6000.0, -5000.0, 0.0, 22.0, &mut rng);
            assert!((-6000.0..=-5000.0).contains(&y));
        }
    }
}
