use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Closed corridor centreline (traversed in waypoint order) and its width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackDef {
    pub waypoints: Vec<[f64; 2]>,
    /// Full corridor width in world units.
    pub width: f64,
}

impl Default for TrackDef {
    /// Chamfered 18 x 10 loop, counter-clockwise.
    fn default() -> Self {
        TrackDef {
            waypoints: vec![[3.0, 0.0], [15.0, 0.0], [18.0, 3.0], [18.0, 7.0], [15.0, 10.0], [3.0, 10.0], [0.0, 7.0], [0.0, 3.0]],
            width: 3.0,
        }
    }
}

impl TrackDef {
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let t: TrackDef = toml::from_str(text).map_err(|e| DataError::Config(format!("track file: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("track serialises")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.waypoints.len() < 3 || !(self.width > 0.0) {
            return Err(DataError::Config("a track needs >= 3 waypoints and a positive width".into()));
        }
        let n = self.waypoints.len();
        for i in 0..n {
            let (a, b) = (self.waypoints[i], self.waypoints[(i + 1) % n]);
            if a == b {
                return Err(DataError::Config(format!("waypoints {i} and {} coincide", (i + 1) % n)));
            }
        }
        Ok(())
    }
}

/// Precomputed segment geometry of a closed track.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub def: TrackDef,
    starts: Vec<[f64; 2]>,
    dirs: Vec<[f64; 2]>,
    lens: Vec<f64>,
    cum: Vec<f64>,
    pub length: f64,
}

/// Nearest centreline point: arc length, distance, segment, signed side
/// (positive = left of travel direction).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub dist: f64,
    pub segment: usize,
    pub side: f64,
}

impl Track {
    pub fn new(def: TrackDef) -> Result<Self, DataError> {
        def.validate()?;
        let n = def.waypoints.len();
        let (mut starts, mut dirs, mut lens, mut cum) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut acc = 0.0;
        for i in 0..n {
            let (a, b) = (def.waypoints[i], def.waypoints[(i + 1) % n]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let l = dx.hypot(dy);
            starts.push(a);
            dirs.push([dx / l, dy / l]);
            lens.push(l);
            cum.push(acc);
            acc += l;
        }
        Ok(Track { def, starts, dirs, lens, cum, length: acc })
    }

    pub fn half_width(&self) -> f64 {
        self.def.width / 2.0
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let mut best = Projection { s: 0.0, dist: f64::INFINITY, segment: 0, side: 0.0 };
        for i in 0..self.starts.len() {
            let (a, d) = (self.starts[i], self.dirs[i]);
            let (rx, ry) = (p[0] - a[0], p[1] - a[1]);
            let u = (rx * d[0] + ry * d[1]).clamp(0.0, self.lens[i]);
            let (qx, qy) = (a[0] + u * d[0], a[1] + u * d[1]);
            let dist = (p[0] - qx).hypot(p[1] - qy);
            if dist < best.dist {
                best = Projection { s: self.cum[i] + u, dist, segment: i, side: d[0] * ry - d[1] * rx };
            }
        }
        best
    }

    /// Distance from `p` to the nearest centreline point.
    pub fn centre_distance(&self, p: [f64; 2]) -> f64 {
        self.project(p).dist
    }

    /// Centreline point at arc length `s` (wrapped) and the travel direction
    /// there.
    pub fn point_at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let s = s.rem_euclid(self.length);
        let i = self.cum.partition_point(|&c| c <= s).saturating_sub(1);
        let u = s - self.cum[i];
        let (a, d) = (self.starts[i], self.dirs[i]);
        ([a[0] + u * d[0], a[1] + u * d[1]], d)
    }

    /// Signed arc-length difference `b - a` wrapped into `(-L/2, L/2]`.
    pub fn wrap_delta(&self, a: f64, b: f64) -> f64 {
        let mut d = (b - a).rem_euclid(self.length);
        if d > self.length / 2.0 {
            d -= self.length;
        }
        d
    }

    /// Distance along a ray to the corridor wall, by sphere tracing on the
    /// centreline distance (which is 1-Lipschitz).
    pub fn raycast(&self, origin: [f64; 2], dir: [f64; 2], max_dist: f64) -> (f64, Projection) {
        let hw = self.half_width();
        let mut t = 0.0;
        let mut pr = self.project(origin);
        for _ in 0..256 {
            let gap = hw - pr.dist;
            if gap < 1e-3 || t >= max_dist {
                break;
            }
            t += gap.max(1e-3);
            pr = self.project([origin[0] + t * dir[0], origin[1] + t * dir[1]]);
        }
        (t.min(max_dist), pr)
    }
}
