//! Trajectories and their on-disk directory format:
//!
//! ```text
//! <dir>/meta        TOML: version, game_id, fps, frame geometry, spans, mask run-lengths
//! <dir>/frames.bin  raw RGB24 frames, concatenated
//! <dir>/actions     one JSON record per frame
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::action::RawAction;
use crate::error::{DataError, LoadError};

pub const FPS: u32 = 20;
pub const FORMAT_VERSION: u32 = 1;

/// Row-major RGB24 image.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({}x{})", self.width, self.height)
    }
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Frame, DataError> {
        let expected = 3 * width * height;
        if pixels.len() != expected {
            return Err(DataError::BadFrame { width, height, len: pixels.len(), expected });
        }
        Ok(Frame { width, height, pixels })
    }

    pub fn black(width: usize, height: usize) -> Frame {
        Frame { width, height, pixels: vec![0; 3 * width * height] }
    }

    pub fn byte_len(&self) -> usize {
        3 * self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub instruction_id: u32,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Recorded,
    PseudoLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub game_id: String,
    pub fps: u32,
    pub frames: Vec<Frame>,
    pub actions: Vec<RawAction>,
    pub text_spans: Vec<TextSpan>,
    /// `true` marks frames whose action contributes to the loss.
    pub loss_mask: Vec<bool>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn new(game_id: impl Into<String>, frames: Vec<Frame>, actions: Vec<RawAction>) -> Self {
        let n = frames.len();
        Trajectory {
            game_id: game_id.into(),
            fps: FPS,
            frames,
            actions,
            text_spans: Vec::new(),
            loss_mask: vec![true; n],
            provenance: Provenance::Recorded,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (f, a, m) = (self.frames.len(), self.actions.len(), self.loss_mask.len());
        if f != a || f != m {
            return Err(DataError::RaggedTrajectory { frames: f, actions: a, mask: m });
        }
        if self.fps != FPS {
            return Err(DataError::Config(format!("trajectory fps {} != {FPS}", self.fps)));
        }
        if let Some(first) = self.frames.first() {
            for fr in &self.frames {
                if fr.width != first.width || fr.height != first.height || fr.pixels.len() != fr.byte_len() {
                    return Err(DataError::BadFrame {
                        width: fr.width,
                        height: fr.height,
                        len: fr.pixels.len(),
                        expected: 3 * first.width * first.height,
                    });
                }
            }
        }
        for s in &self.text_spans {
            if s.start_frame > s.end_frame || s.end_frame >= f {
                return Err(DataError::BadSpan { start: s.start_frame, end: s.end_frame, len: f });
            }
        }
        Ok(())
    }

    /// Instruction id active at frame `t` (0 = no instruction).
    pub fn instruction_at(&self, t: usize) -> u32 {
        self.text_spans
            .iter()
            .find(|s| s.start_frame <= t && t <= s.end_frame)
            .map_or(0, |s| s.instruction_id)
    }

    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.width, f.height))
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRun {
    value: bool,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    game_id: String,
    fps: u32,
    num_frames: usize,
    width: usize,
    height: usize,
    #[serde(default)]
    provenance: Provenance,
    #[serde(default)]
    spans: Vec<TextSpan>,
    #[serde(default)]
    mask_runs: Vec<MaskRun>,
}

fn run_lengths(mask: &[bool]) -> Vec<MaskRun> {
    let mut runs: Vec<MaskRun> = Vec::new();
    for &m in mask {
        match runs.last_mut() {
            Some(r) if r.value == m => r.len += 1,
            _ => runs.push(MaskRun { value: m, len: 1 }),
        }
    }
    runs
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LoadError + '_ {
    move |source| LoadError::Io { path: path.to_path_buf(), source }
}

pub fn save_trajectory(traj: &Trajectory, dir: &Path) -> Result<(), LoadError> {
    traj.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (width, height) = traj.frame_size().unwrap_or((0, 0));
    let meta = Meta {
        version: FORMAT_VERSION,
        game_id: traj.game_id.clone(),
        fps: traj.fps,
        num_frames: traj.len(),
        width,
        height,
        provenance: traj.provenance,
        spans: traj.text_spans.clone(),
        mask_runs: run_lengths(&traj.loss_mask),
    };
    let meta_path = dir.join("meta");
    let text = toml::to_string(&meta).map_err(|e| LoadError::CorruptHeader { path: meta_path.clone(), reason: e.to_string() })?;
    fs::write(&meta_path, text).map_err(io_err(&meta_path))?;

    let frames_path = dir.join("frames.bin");
    let mut w = BufWriter::new(fs::File::create(&frames_path).map_err(io_err(&frames_path))?);
    for f in &traj.frames {
        w.write_all(&f.pixels).map_err(io_err(&frames_path))?;
    }
    w.flush().map_err(io_err(&frames_path))?;

    let actions_path = dir.join("actions");
    let mut w = BufWriter::new(fs::File::create(&actions_path).map_err(io_err(&actions_path))?);
    for a in &traj.actions {
        let line = serde_json::to_string(a).expect("actions serialize");
        writeln!(w, "{line}").map_err(io_err(&actions_path))?;
    }
    w.flush().map_err(io_err(&actions_path))?;
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<Trajectory, LoadError> {
    let meta_path = dir.join("meta");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Meta =
        toml::from_str(&text).map_err(|e| LoadError::CorruptHeader { path: meta_path.clone(), reason: e.to_string() })?;
    if meta.version != FORMAT_VERSION {
        return Err(LoadError::CorruptHeader { path: meta_path, reason: format!("unsupported version {}", meta.version) });
    }
    let n = meta.num_frames;

    let frames_path = dir.join("frames.bin");
    let bytes = fs::read(&frames_path).map_err(io_err(&frames_path))?;
    let frame_len = 3 * meta.width * meta.height;
    if bytes.len() != n * frame_len {
        return Err(LoadError::LengthMismatch { what: "frames.bin bytes", expected: n * frame_len, found: bytes.len() });
    }
    let frames: Vec<Frame> = if frame_len == 0 {
        Vec::new()
    } else {
        bytes
            .chunks_exact(frame_len)
            .map(|c| Frame { width: meta.width, height: meta.height, pixels: c.to_vec() })
            .collect()
    };

    let actions_path = dir.join("actions");
    let file = fs::File::open(&actions_path).map_err(io_err(&actions_path))?;
    let mut actions = Vec::with_capacity(n);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&actions_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: RawAction =
            serde_json::from_str(&line).map_err(|e| LoadError::BadRecord { line: i + 1, reason: e.to_string() })?;
        actions.push(a);
    }
    if actions.len() != n {
        return Err(LoadError::LengthMismatch { what: "action records", expected: n, found: actions.len() });
    }

    let mut loss_mask = Vec::with_capacity(n);
    for r in &meta.mask_runs {
        loss_mask.extend(std::iter::repeat_n(r.value, r.len));
    }
    if loss_mask.len() != n {
        return Err(LoadError::LengthMismatch { what: "loss mask entries", expected: n, found: loss_mask.len() });
    }

    let traj = Trajectory {
        game_id: meta.game_id,
        fps: meta.fps,
        frames,
        actions,
        text_spans: meta.spans,
        loss_mask,
        provenance: meta.provenance,
    };
    traj.validate()?;
    Ok(traj)
}

/// Saves a dataset as `<root>/traj_00000`, `<root>/traj_00001`, ...
pub fn save_dataset(trajs: &[Trajectory], root: &Path) -> Result<Vec<PathBuf>, LoadError> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let dir = root.join(format!("traj_{i:05}"));
            save_trajectory(t, &dir).map(|_| dir)
        })
        .collect()
}

/// Loads every trajectory directory directly under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Trajectory>, LoadError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_trajectory(d)).collect()
}
