use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, RawAction};
use crate::error::DataError;

/// Fixed arena viewed from its centre; one highlighted target at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub resolution: usize,
    pub fov_deg: f64,
    /// Degrees of view rotation per unit of mouse motion.
    pub gain_deg: f64,
    pub target_radius_deg: f64,
    /// Targets spawn within this yaw/pitch box (degrees).
    pub yaw_range: f64,
    pub pitch_range: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { resolution: 64, fov_deg: 60.0, gain_deg: 0.25, target_radius_deg: 4.0, yaw_range: 90.0, pitch_range: 25.0 }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.resolution < 8 || !(self.fov_deg > 0.0) || !(self.gain_deg > 0.0) || !(self.target_radius_deg > 0.0) {
            return Err(DataError::Config("target-tap: resolution >= 8 and positive angles".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetWorld {
    pub config: TargetConfig,
    pub yaw: f64,
    pub pitch: f64,
    pub target: (f64, f64),
    pub hits: usize,
    pub shots: usize,
    pub steps: usize,
    rng: ChaCha8Rng,
}

impl TargetWorld {
    pub fn reset(config: TargetConfig, seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let mut w = TargetWorld { config, yaw: 0.0, pitch: 0.0, target: (0.0, 0.0), hits: 0, shots: 0, steps: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        w.spawn();
        Ok(w)
    }

    fn spawn(&mut self) {
        let c = &self.config;
        self.target = (self.rng.random_range(-c.yaw_range..=c.yaw_range), self.rng.random_range(-c.pitch_range..=c.pitch_range));
    }

    /// Angular distance from the crosshair to the target, in degrees.
    pub fn aim_error(&self) -> f64 {
        (self.target.0 - self.yaw).hypot(self.target.1 - self.pitch)
    }

    /// Mouse moves the view (dx right, dy down); a left click on the target
    /// scores a hit and spawns the next target.
    pub fn step(&mut self, a: &RawAction) {
        let c = &self.config;
        self.yaw = (self.yaw + a.dx * c.gain_deg).clamp(-180.0, 180.0);
        self.pitch = (self.pitch - a.dy * c.gain_deg).clamp(-60.0, 60.0);
        if a.lb {
            self.shots += 1;
            if self.aim_error() <= self.config.target_radius_deg {
                self.hits += 1;
                self.spawn();
            }
        }
        self.steps += 1;
    }

    pub fn render(&self) -> Frame {
        let c = &self.config;
        let r = c.resolution;
        let deg_per_px = c.fov_deg / r as f64;
        let mut px = vec![0u8; 3 * r * r];
        for y in 0..r {
            let pitch = self.pitch + (r as f64 / 2.0 - y as f64 - 0.5) * deg_per_px;
            for x in 0..r {
                let yaw = self.yaw + (x as f64 + 0.5 - r as f64 / 2.0) * deg_per_px;
                let band = ((yaw / 15.0).floor() as i64).rem_euclid(2) as f64;
                let mut col = if pitch >= 0.0 {
                    [60.0 + pitch, 70.0 + pitch, 120.0 + 1.5 * pitch]
                } else {
                    [80.0 - 20.0 * band, 90.0 - 20.0 * band, 70.0]
                };
                if (yaw - self.target.0).hypot(pitch - self.target.1) <= c.target_radius_deg {
                    col = [240.0, 40.0, 40.0];
                }
                let o = 3 * (y * r + x);
                for ch in 0..3 {
                    px[o + ch] = col[ch].clamp(0.0, 255.0) as u8;
                }
            }
        }
        Frame { width: r, height: r, pixels: px }
    }
}

/// Proportional aim with a click once inside the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetExpert {
    pub gain: f64,
    pub max_delta: f64,
    pub click_fraction: f64,
}

impl Default for TargetExpert {
    fn default() -> Self {
        TargetExpert { gain: 0.5, max_delta: 40.0, click_fraction: 0.7 }
    }
}

impl TargetExpert {
    pub fn act(&self, w: &TargetWorld) -> RawAction {
        let g = w.config.gain_deg;
        let dx = (self.gain * (w.target.0 - w.yaw) / g).clamp(-self.max_delta, self.max_delta).round();
        let dy = (-self.gain * (w.target.1 - w.pitch) / g).clamp(-self.max_delta, self.max_delta).round();
        let lb = w.aim_error() <= self.click_fraction * w.config.target_radius_deg;
        RawAction { keys: Vec::new(), dx, dy, lb, rb: false }
    }
}
