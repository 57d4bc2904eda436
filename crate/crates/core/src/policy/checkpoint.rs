//! Versioned binary checkpoint container:
//! `magic | version u32 | header-json len u64 | header json | blob count u32 |
//! blobs | optimizer flag u8 [| step u64 | m blobs | v blobs]`, where a blob
//! is `name len u32 | name | rows u32 | cols u32 | f64 LE data`.

use std::fs;
use std::path::Path;

use deskbc_nn::{AdamW, AdamWConfig, Mat, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::PolicyModel;
use super::train::CheckpointMeta;
use crate::data::{QuantileBinning, TruncatedNormalParams};
use crate::error::ModelError;

pub const MAGIC: &[u8; 8] = b"DSKBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Policy,
    InverseDynamics,
}

/// Everything needed to rebuild the model besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub binning: QuantileBinning,
    pub truncated_normal: TruncatedNormalParams,
    pub meta: CheckpointMeta,
    pub optimizer: Option<OptimizerEcho>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEcho {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

fn put_blob(out: &mut Vec<u8>, name: &str, m: &Mat) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((m.rows as u32).to_le_bytes());
    out.extend((m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, store: &ParamStore, opt: Option<&AdamW>) -> Vec<u8> {
    let mut header = header.clone();
    header.optimizer = opt.map(|o| OptimizerEcho {
        lr: o.config.lr,
        beta1: o.config.beta1,
        beta2: o.config.beta2,
        eps: o.config.eps,
        weight_decay: o.config.weight_decay,
        step: o.step,
    });
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend((store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_blob(&mut out, &p.name, &p.value);
    }
    match opt {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            for (m, (_, p)) in o.m.iter().zip(store.iter()) {
                put_blob(&mut out, &format!("m.{}", p.name), m);
            }
            for (v, (_, p)) in o.v.iter().zip(store.iter()) {
                put_blob(&mut out, &format!("v.{}", p.name), v);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.at < n {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.at));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<(String, Mat), String> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let bytes = self.take(rows * cols * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Mat::from_vec(rows, cols, data)))
    }
}

pub struct DecodedCheckpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<(String, Mat)>,
    pub optimizer: Option<(u64, Vec<Mat>, Vec<Mat>)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DecodedCheckpoint, String> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let len = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?).map_err(|e| format!("header: {e}"))?;
    let n = r.u32()? as usize;
    let blobs = (0..n).map(|_| r.blob()).collect::<Result<Vec<_>, _>>()?;
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let m = (0..n).map(|_| r.blob().map(|b| b.1)).collect::<Result<Vec<_>, _>>()?;
            let v = (0..n).map(|_| r.blob().map(|b| b.1)).collect::<Result<Vec<_>, _>>()?;
            let step = header.optimizer.map(|o| o.step).ok_or("optimizer blobs without header echo")?;
            Some((step, m, v))
        }
        f => return Err(format!("bad optimizer flag {f}")),
    };
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    Ok(DecodedCheckpoint { header, blobs, optimizer })
}

/// Copies named blobs into `store`, requiring an exact name/shape match.
pub fn restore_store(store: &mut ParamStore, blobs: Vec<(String, Mat)>) -> Result<(), String> {
    if blobs.len() != store.len() {
        return Err(format!("checkpoint has {} tensors, model has {}", blobs.len(), store.len()));
    }
    for (name, m) in blobs {
        let id = store.id(&name).ok_or_else(|| format!("unknown tensor {name}"))?;
        let dst = store.get_mut(id);
        if (dst.rows, dst.cols) != (m.rows, m.cols) {
            return Err(format!("tensor {name} is {}x{}, model wants {}x{}", m.rows, m.cols, dst.rows, dst.cols));
        }
        *dst = m;
    }
    Ok(())
}

pub fn restore_optimizer(header: &CheckpointHeader, store: &ParamStore, opt: Option<(u64, Vec<Mat>, Vec<Mat>)>) -> Option<AdamW> {
    let (step, m, v) = opt?;
    let e = header.optimizer?;
    let cfg = AdamWConfig { lr: e.lr, beta1: e.beta1, beta2: e.beta2, eps: e.eps, weight_decay: e.weight_decay };
    let mut o = AdamW::new(cfg, store);
    o.step = step;
    o.m = m;
    o.v = v;
    Some(o)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn policy_header(model: &PolicyModel, meta: CheckpointMeta) -> CheckpointHeader {
    CheckpointHeader {
        kind: ModelKind::Policy,
        config: model.config.clone(),
        binning: model.binning.clone(),
        truncated_normal: model.tn,
        meta,
        optimizer: None,
    }
}

/// Content hash of a policy checkpoint (weights, config echo, optimizer).
pub fn checkpoint_hash(model: &PolicyModel, meta: CheckpointMeta, opt: Option<&AdamW>) -> String {
    sha256_hex(&encode_checkpoint(&policy_header(model, meta), &model.store, opt))
}

/// Writes a policy checkpoint and returns its SHA-256.
pub fn save_checkpoint(path: &Path, model: &PolicyModel, meta: CheckpointMeta, opt: Option<&AdamW>) -> Result<String, ModelError> {
    let bytes = encode_checkpoint(&policy_header(model, meta), &model.store, opt);
    fs::write(path, &bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    Ok(sha256_hex(&bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<DecodedCheckpoint, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes).map_err(|reason| ModelError::Checkpoint { path: path.to_path_buf(), reason })
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, CheckpointMeta, Option<AdamW>), ModelError> {
    let d = read_checkpoint(path)?;
    let bad = |reason: String| ModelError::Checkpoint { path: path.to_path_buf(), reason };
    if d.header.kind != ModelKind::Policy {
        return Err(bad(format!("expected a policy checkpoint, found {:?}", d.header.kind)));
    }
    let mut model = PolicyModel::new(d.header.config.clone(), d.header.binning.clone(), d.header.truncated_normal, 0)?;
    restore_store(&mut model.store, d.blobs).map_err(bad)?;
    let opt = restore_optimizer(&d.header, &model.store, d.optimizer);
    Ok((model, d.header.meta, opt))
}
