use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::keys::Key;
use super::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityThresholds {
    /// A key held in strictly more than this fraction of frames is flagged.
    pub max_hold_fraction: f64,
    /// Frames with strictly more simultaneous keys are flagged.
    pub max_simultaneous_keys: usize,
    /// Minimum input changes per 100 frames.
    pub min_changes_per_100: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds { max_hold_fraction: 0.6, max_simultaneous_keys: 6, min_changes_per_100: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub hold_violation: bool,
    pub simultaneity_violation: bool,
    pub interaction_violation: bool,
    /// Set only when a likelihood scorer was supplied.
    pub likelihood_violation: Option<bool>,
    pub most_held_key: Option<Key>,
    pub max_hold_fraction: f64,
    pub max_simultaneous_keys: usize,
    pub action_changes: usize,
    pub changes_per_100: f64,
    pub likelihood: Option<f64>,
}

impl QualityReport {
    pub fn pass(&self) -> bool {
        !self.hold_violation
            && !self.simultaneity_violation
            && !self.interaction_violation
            && self.likelihood_violation != Some(true)
    }
}

pub fn quality_filter(traj: &Trajectory) -> QualityReport {
    quality_filter_with(traj, &QualityThresholds::default())
}

pub fn quality_filter_with(traj: &Trajectory, th: &QualityThresholds) -> QualityReport {
    assert!(!traj.is_empty(), "quality filter needs a nonempty trajectory");
    let n = traj.actions.len();
    let mut held: HashMap<Key, usize> = HashMap::new();
    let mut max_simultaneous = 0;
    for a in &traj.actions {
        let keys = a.key_set();
        max_simultaneous = max_simultaneous.max(keys.len());
        for k in keys {
            *held.entry(k).or_default() += 1;
        }
    }
    // Ties resolve to the lowest key code so reports are reproducible.
    let most_held = held.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, c)| (*k, *c));
    let max_hold_fraction = most_held.map_or(0.0, |(_, c)| c as f64 / n as f64);
    let action_changes = traj.actions.windows(2).filter(|w| !w[0].same_input(&w[1])).count();
    let changes_per_100 = 100.0 * action_changes as f64 / n as f64;
    QualityReport {
        hold_violation: max_hold_fraction > th.max_hold_fraction,
        simultaneity_violation: max_simultaneous > th.max_simultaneous_keys,
        interaction_violation: changes_per_100 < th.min_changes_per_100,
        likelihood_violation: None,
        most_held_key: most_held.map(|(k, _)| k),
        max_hold_fraction,
        max_simultaneous_keys: max_simultaneous,
        action_changes,
        changes_per_100,
        likelihood: None,
    }
}

/// Runs the rule-based checks plus a caller-supplied likelihood score;
/// trajectories scoring below `min_score` are flagged.
pub fn quality_filter_scored(
    traj: &Trajectory,
    th: &QualityThresholds,
    scorer: &dyn Fn(&Trajectory) -> f64,
    min_score: f64,
) -> QualityReport {
    let mut r = quality_filter_with(traj, th);
    let s = scorer(traj);
    r.likelihood = Some(s);
    r.likelihood_violation = Some(s < min_score);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::action::RawAction;
    use crate::data::keys::KEY_NAMES;
    use crate::data::trajectory::Frame;

    fn traj(actions: Vec<RawAction>) -> Trajectory {
        let frames = vec![Frame::black(1, 1); actions.len()];
        Trajectory::new("t", frames, actions)
    }

    fn varied(n: usize) -> Vec<RawAction> {
        (0..n)
            .map(|i| RawAction { keys: vec![Key::from_code(1 + i % 5).unwrap()], dx: i as f64, ..Default::default() })
            .collect()
    }

    #[test]
    fn key_held_61_percent_is_flagged() {
        let mut a = varied(100);
        for (i, act) in a.iter_mut().enumerate() {
            act.keys = if i < 61 { vec![Key::W] } else { vec![Key::A] };
        }
        let r = quality_filter(&traj(a));
        assert!(r.hold_violation);
        assert_eq!(r.most_held_key, Some(Key::W));
        assert!((r.max_hold_fraction - 0.61).abs() < 1e-12);
    }

    #[test]
    fn key_held_exactly_60_percent_passes() {
        let mut a = varied(100);
        for (i, act) in a.iter_mut().enumerate() {
            act.keys = if i < 60 { vec![Key::W] } else { vec![Key::A] };
        }
        assert!(!quality_filter(&traj(a)).hold_violation);
    }

    #[test]
    fn seven_simultaneous_keys_are_flagged() {
        let mut a = varied(100);
        a[10].keys = (1..=7).map(|c| Key::from_code(c).unwrap()).collect();
        let r = quality_filter(&traj(a));
        assert!(r.simultaneity_violation);
        assert_eq!(r.max_simultaneous_keys, 7);
        let mut b = varied(100);
        b[10].keys = (1..=6).map(|c| Key::from_code(c).unwrap()).collect();
        assert!(!quality_filter(&traj(b)).simultaneity_violation);
        assert!(KEY_NAMES.len() >= 7);
    }

    #[test]
    fn idle_trajectory_lacks_interaction() {
        let r = quality_filter(&traj(vec![RawAction::idle(); 300]));
        assert!(r.interaction_violation);
        assert!(!r.pass());
    }

    #[test]
    fn varied_trajectory_passes() {
        let r = quality_filter(&traj(varied(300)));
        assert!(r.pass(), "{r:?}");
    }

    #[test]
    fn scorer_hook_flags_low_likelihood() {
        let t = traj(varied(50));
        let r = quality_filter_scored(&t, &QualityThresholds::default(), &|_| -5.0, -1.0);
        assert_eq!(r.likelihood_violation, Some(true));
        assert!(!r.pass());
    }

    #[test]
    fn filter_is_pure() {
        let t = traj(varied(120));
        assert_eq!(quality_filter(&t), quality_filter(&t));
    }
}
