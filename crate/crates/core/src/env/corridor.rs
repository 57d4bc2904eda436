use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::track::{Track, TrackDef};
use crate::data::{Frame, Key, RawAction};
use crate::error::DataError;

/// Corridor driving inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    pub forward: bool,
    pub back: bool,
    pub left: bool,
    pub right: bool,
    /// Horizontal mouse motion; positive turns right.
    pub turn_dx: f64,
}

impl EnvAction {
    pub fn from_raw(a: &RawAction) -> Self {
        let has = |k| a.keys.contains(&k);
        EnvAction { forward: has(Key::W), back: has(Key::S), left: has(Key::A), right: has(Key::D), turn_dx: a.dx }
    }

    pub fn to_raw(&self) -> RawAction {
        let keys = [(self.forward, Key::W), (self.back, Key::S), (self.left, Key::A), (self.right, Key::D)]
            .into_iter()
            .filter_map(|(on, k)| on.then_some(k))
            .collect();
        RawAction { keys, dx: self.turn_dx, dy: 0.0, lb: false, rb: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorConfig {
    pub track: TrackDef,
    /// Square render size in pixels.
    pub resolution: usize,
    pub fov_deg: f64,
    /// Radians of heading change per unit of mouse dx.
    pub turn_gain: f64,
    /// Speed update `v <- decay * v + accel * (W - S)` per step.
    pub speed_decay: f64,
    pub accel: f64,
    pub strafe_speed: f64,
    pub agent_radius: f64,
    /// Maximum spawn offsets from the centreline.
    pub spawn_lateral: f64,
    pub spawn_heading_deg: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        CorridorConfig {
            track: TrackDef::default(),
            resolution: 64,
            fov_deg: 70.0,
            turn_gain: 0.005,
            speed_decay: 0.8,
            accel: 0.08,
            strafe_speed: 0.08,
            agent_radius: 0.2,
            spawn_lateral: 0.3,
            spawn_heading_deg: 10.0,
        }
    }
}

impl CorridorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        self.track.validate()?;
        if self.resolution < 8 || !(0.0..1.0).contains(&self.speed_decay) || self.accel <= 0.0 || self.agent_radius * 2.0 >= self.track.width {
            return Err(DataError::Config("corridor: resolution >= 8, decay in [0,1), accel > 0, agent narrower than track".into()));
        }
        Ok(())
    }

    /// Top forward speed (steady state with W held).
    pub fn max_speed(&self) -> f64 {
        self.accel / (1.0 - self.speed_decay)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorridorWorld {
    pub config: CorridorConfig,
    pub track: Track,
    pub x: f64,
    pub y: f64,
    /// Radians, counter-clockwise from +x.
    pub heading: f64,
    pub speed: f64,
    /// Signed arc length travelled since spawn.
    pub progress: f64,
    pub last_s: f64,
    pub steps: usize,
    pub wall_contacts: usize,
    pub seed: u64,
}

impl CorridorWorld {
    /// Spawns at a seed-chosen point of the loop, facing along the track.
    pub fn reset(config: CorridorConfig, seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let track = Track::new(config.track.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.random_range(0.0..track.length);
        let (p, d) = track.point_at(s);
        let lat = rng.random_range(-config.spawn_lateral..=config.spawn_lateral);
        let h = d[1].atan2(d[0]) + rng.random_range(-1.0..=1.0) * config.spawn_heading_deg.to_radians();
        let (x, y) = (p[0] - d[1] * lat, p[1] + d[0] * lat);
        let last_s = track.project([x, y]).s;
        Ok(CorridorWorld { config, track, x, y, heading: h, speed: 0.0, progress: 0.0, last_s, steps: 0, wall_contacts: 0, seed })
    }

    pub fn lap_complete(&self) -> bool {
        self.progress >= self.track.length
    }

    /// Fewest steps any controller can need for one lap.
    pub fn lap_lower_bound(&self) -> usize {
        (self.track.length / self.config.max_speed()).floor() as usize
    }

    pub fn step(&mut self, a: &EnvAction) {
        let c = &self.config;
        self.heading = (self.heading - a.turn_dx * c.turn_gain).rem_euclid(2.0 * PI);
        let drive = a.forward as i32 as f64 - a.back as i32 as f64;
        self.speed = c.speed_decay * self.speed + c.accel * drive;
        let strafe = (a.right as i32 - a.left as i32) as f64 * c.strafe_speed;
        let (fx, fy) = (self.heading.cos(), self.heading.sin());
        let nx = self.x + self.speed * fx + strafe * fy;
        let ny = self.y + self.speed * fy - strafe * fx;
        if self.track.centre_distance([nx, ny]) > self.track.half_width() - c.agent_radius {
            self.wall_contacts += 1;
            self.speed = 0.0;
        } else if (nx, ny) != (self.x, self.y) {
            self.x = nx;
            self.y = ny;
            let s = self.track.project([nx, ny]).s;
            self.progress += self.track.wrap_delta(self.last_s, s);
            self.last_s = s;
        }
        self.steps += 1;
    }

    /// Flat-shaded raycast view: ceiling and floor gradients, walls coloured
    /// by side and segment with distance shading and arc-length stripes.
    pub fn render(&self) -> Frame {
        let r = self.config.resolution;
        let mut px = vec![0u8; 3 * r * r];
        let half = r as f64 / 2.0;
        for y in 0..r {
            let (col, t) = if (y as f64) < half {
                ([70.0, 90.0, 140.0], y as f64 / half)
            } else {
                ([90.0, 80.0, 60.0], (r - 1 - y) as f64 / half)
            };
            let k = 1.0 - 0.6 * t;
            for x in 0..r {
                let o = 3 * (y * r + x);
                for ch in 0..3 {
                    px[o + ch] = (col[ch] * k) as u8;
                }
            }
        }
        let tan_half = (self.config.fov_deg.to_radians() / 2.0).tan();
        let focal = half / tan_half;
        for x in 0..r {
            let cam = ((x as f64 + 0.5) / r as f64) * 2.0 - 1.0;
            let a = self.heading - (cam * tan_half).atan();
            let (dist, hit) = self.track.raycast([self.x, self.y], [a.cos(), a.sin()], 40.0);
            let perp = (dist * (a - self.heading).cos()).max(0.05);
            let h = (focal / perp).min(r as f64);
            let top = (half - h / 2.0).max(0.0) as usize;
            let bot = ((half + h / 2.0).ceil() as usize).min(r);
            let base: [f64; 3] = match (hit.side > 0.0, hit.segment % 2) {
                (true, 0) => [200.0, 60.0, 50.0],
                (true, _) => [210.0, 150.0, 40.0],
                (false, 0) => [50.0, 160.0, 80.0],
                (false, _) => [60.0, 110.0, 200.0],
            };
            let stripe = if (hit.s / 1.5).floor() as i64 % 2 == 0 { 1.0 } else { 0.75 };
            let shade = stripe / (1.0 + 0.12 * dist);
            for y in top..bot {
                let o = 3 * (y * r + x);
                for ch in 0..3 {
                    px[o + ch] = (base[ch] * shade).clamp(0.0, 255.0) as u8;
                }
            }
        }
        Frame { width: r, height: r, pixels: px }
    }
}

/// Pure-pursuit steering toward a centreline point ahead, with bang-bang
/// speed control around `target_speed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorExpert {
    pub lookahead: f64,
    pub steer_gain: f64,
    pub max_dx: f64,
    pub target_speed: f64,
}

impl Default for CorridorExpert {
    fn default() -> Self {
        CorridorExpert { lookahead: 2.0, steer_gain: 0.5, max_dx: 40.0, target_speed: 0.18 }
    }
}

impl CorridorExpert {
    pub fn act(&self, w: &CorridorWorld) -> EnvAction {
        let pr = w.track.project([w.x, w.y]);
        let (p, _) = w.track.point_at(pr.s + self.lookahead);
        let want = (p[1] - w.y).atan2(p[0] - w.x);
        let err = (want - w.heading + PI).rem_euclid(2.0 * PI) - PI;
        let dx = (-self.steer_gain * err / w.config.turn_gain).clamp(-self.max_dx, self.max_dx).round();
        EnvAction { forward: w.speed < self.target_speed, turn_dx: dx, ..EnvAction::default() }
    }
}
