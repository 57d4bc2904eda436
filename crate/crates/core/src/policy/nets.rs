//! Building blocks shared by the policy, its action decoder and the
//! inverse-dynamics model.

use std::rc::Rc;

use deskbc_nn::{AttnShape, ConvGeom, Mat, ParamId, ParamStore, RopeTable, Tape, Var};
use rand::Rng;

use crate::data::Frame;

/// Post-rotary keys and values of one attention layer, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub k: Mat,
    pub v: Mat,
}

impl LayerKv {
    pub fn empty(kv_dim: usize) -> Self {
        LayerKv { k: Mat::zeros(0, kv_dim), v: Mat::zeros(0, kv_dim) }
    }
}

fn xavier(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

struct Block {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    q_norm: Option<ParamId>,
    k_norm: Option<ParamId>,
    norm2: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm transformer stack with rotary attention, optional QK-norm,
/// grouped key/value heads and a SiLU MLP.
pub struct Stack {
    blocks: Vec<Block>,
    final_norm: ParamId,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

#[allow(clippy::too_many_arguments)]
impl Stack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        layers: usize,
        hidden: usize,
        heads: usize,
        kv_heads: usize,
        mlp_ratio: usize,
        qk_norm: bool,
        rng: &mut R,
    ) -> Stack {
        let head_dim = hidden / heads;
        let kv_dim = kv_heads * head_dim;
        let ff = hidden * mlp_ratio;
        let out_std = xavier(hidden) / (2.0 * layers as f64).sqrt();
        let blocks = (0..layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.l{l}.{s}");
                Block {
                    norm1: store.constant(&n("norm1"), 1, hidden, 1.0),
                    wq: store.normal(&n("wq"), hidden, hidden, xavier(hidden), rng),
                    wk: store.normal(&n("wk"), hidden, kv_dim, xavier(hidden), rng),
                    wv: store.normal(&n("wv"), hidden, kv_dim, xavier(hidden), rng),
                    wo: store.normal(&n("wo"), hidden, hidden, out_std, rng),
                    q_norm: qk_norm.then(|| store.constant(&n("q_norm"), 1, head_dim, 1.0)),
                    k_norm: qk_norm.then(|| store.constant(&n("k_norm"), 1, head_dim, 1.0)),
                    norm2: store.constant(&n("norm2"), 1, hidden, 1.0),
                    w1: store.normal(&n("w1"), hidden, ff, xavier(hidden), rng),
                    b1: store.constant(&n("b1"), 1, ff, 0.0),
                    w2: store.normal(&n("w2"), ff, hidden, out_std * (hidden as f64 / ff as f64).sqrt(), rng),
                    b2: store.constant(&n("b2"), 1, hidden, 0.0),
                }
            })
            .collect();
        let final_norm = store.constant(&format!("{prefix}.final_norm"), 1, hidden, 1.0);
        Stack { blocks, final_norm, hidden, heads, kv_heads, head_dim }
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Runs `x` (`n_seq * q_len` rows) through every block. `positions` holds
    /// the rotary position of each of the `q_len` query rows (shared by all
    /// sequences). With `past`, each layer's cached keys/values are placed
    /// in front of the new ones (single sequence only) and `mask` is
    /// `q_len x (past + q_len)`. Returns the final-normed output and the new
    /// rows' keys/values per layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        n_seq: usize,
        positions: &[f64],
        rope_base: f64,
        past: Option<&[LayerKv]>,
        mask: &[bool],
    ) -> (Var, Vec<LayerKv>) {
        let q_len = positions.len();
        assert_eq!(tape.shape(x).0, n_seq * q_len, "stack: row count mismatch");
        if past.is_some() {
            assert_eq!(n_seq, 1, "cached attention supports a single sequence");
        }
        let all_pos: Vec<f64> = (0..n_seq).flat_map(|_| positions.iter().copied()).collect();
        let rope = Rc::new(RopeTable::new(&all_pos, self.head_dim, rope_base));
        let mut x = x;
        let mut new_kv = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let g1 = tape.param(b.norm1);
            let h = tape.rms_norm(x, g1, self.hidden);
            let mut q = tape.linear(h, b.wq, None);
            let mut k = tape.linear(h, b.wk, None);
            let v = tape.linear(h, b.wv, None);
            if let (Some(qn), Some(kn)) = (b.q_norm, b.k_norm) {
                let qg = tape.param(qn);
                let kg = tape.param(kn);
                q = tape.rms_norm(q, qg, self.head_dim);
                k = tape.rms_norm(k, kg, self.head_dim);
            }
            let q = tape.rope(q, rope.clone());
            let k = tape.rope(k, rope.clone());
            new_kv.push(LayerKv { k: tape.value(k).clone(), v: tape.value(v).clone() });
            let (k_all, v_all, k_len) = match past {
                Some(p) if p[l].k.rows > 0 => {
                    let pk = tape.leaf(p[l].k.clone());
                    let pv = tape.leaf(p[l].v.clone());
                    (tape.concat(&[pk, k]), tape.concat(&[pv, v]), p[l].k.rows + q_len)
                }
                _ => (k, v, q_len),
            };
            let shape = AttnShape { n_seq, q_len, k_len, heads: self.heads, kv_heads: self.kv_heads, head_dim: self.head_dim };
            let a = tape.attention(q, k_all, v_all, shape, mask);
            let o = tape.linear(a, b.wo, None);
            x = tape.add(x, o);
            let g2 = tape.param(b.norm2);
            let h2 = tape.rms_norm(x, g2, self.hidden);
            let f = tape.linear(h2, b.w1, Some(b.b1));
            let f = tape.silu(f);
            let f = tape.linear(f, b.w2, Some(b.b2));
            x = tape.add(x, f);
        }
        let gf = tape.param(self.final_norm);
        (tape.rms_norm(x, gf, self.hidden), new_kv)
    }
}

/// Strided convolution stack (kernel 3, stride 2, padding 1, SiLU) and a
/// linear map onto `tokens` rows of width `hidden` per frame.
pub struct ImageEncoder {
    convs: Vec<(ParamId, ParamId, ConvGeom)>,
    proj_w: ParamId,
    proj_b: ParamId,
    pub tokens: usize,
    pub hidden: usize,
    pub resolution: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        resolution: usize,
        channels: &[usize],
        tokens: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::new();
        let (mut c_in, mut side) = (3, resolution);
        for (i, &c_out) in channels.iter().enumerate() {
            let geom = ConvGeom { in_channels: c_in, height: side, width: side, out_channels: c_out, kernel: 3, stride: 2, padding: 1 };
            let w = store.normal(&format!("{prefix}.conv{i}.w"), c_out, geom.patch_len(), (2.0 / geom.patch_len() as f64).sqrt(), rng);
            let b = store.constant(&format!("{prefix}.conv{i}.b"), 1, c_out, 0.0);
            convs.push((w, b, geom));
            c_in = c_out;
            side = geom.out_height();
        }
        let flat = c_in * side * side;
        let proj_w = store.normal(&format!("{prefix}.proj.w"), flat, tokens * hidden, xavier(flat), rng);
        let proj_b = store.constant(&format!("{prefix}.proj.b"), 1, tokens * hidden, 0.0);
        ImageEncoder { convs, proj_w, proj_b, tokens, hidden, resolution }
    }

    /// `frames`: one preprocessed image per row. Output: `tokens` rows per
    /// frame, frame-major.
    pub fn forward(&self, tape: &mut Tape, frames: Var) -> Var {
        let n = tape.shape(frames).0;
        let mut x = frames;
        for &(w, b, geom) in &self.convs {
            let wv = tape.param(w);
            let bv = tape.param(b);
            x = tape.conv2d(x, wv, bv, geom);
            x = tape.silu(x);
        }
        let y = tape.linear(x, self.proj_w, Some(self.proj_b));
        tape.reshape(y, n * self.tokens, self.hidden)
    }
}

/// Channel-major pixels scaled to `[-0.5, 0.5]`, one frame per row.
pub fn frames_to_mat(frames: &[&Frame]) -> Mat {
    let Some(first) = frames.first() else {
        return Mat::zeros(0, 0);
    };
    let (w, h) = (first.width, first.height);
    let mut m = Mat::zeros(frames.len(), 3 * w * h);
    for (r, f) in frames.iter().enumerate() {
        assert_eq!((f.width, f.height), (w, h), "frames in one batch must share a size");
        let row = m.row_mut(r);
        for (p, px) in f.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                row[c * w * h + p] = px[c] as f64 / 255.0 - 0.5;
            }
        }
    }
    m
}

/// Causal `len x len` mask.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len).flat_map(|q| (0..len).map(move |k| k <= q)).collect()
}
