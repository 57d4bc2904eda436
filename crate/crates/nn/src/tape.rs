//! Reverse-mode tape. Every op computes its value eagerly and records just
//! enough to run the backward pass.

use std::rc::Rc;

use crate::mat::{self, AttnShape, ConvGeom, Mat, RopeTable, View};
use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One classification target inside a [`Tape::cross_entropy`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub class: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    RmsNorm { x: Var, gain: Var, group: usize, inv_rms: Vec<f64> },
    Rope { x: Var, table: Rc<RopeTable> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f64> },
    Gather { x: Var, idx: Rc<Vec<usize>> },
    Concat(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    CrossEntropy { logits: Var, targets: Vec<Target>, softmax: Vec<f64>, lse: Vec<f64>, norm: f64, z_coeff: f64 },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.rows, m.cols)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Mat::zeros(0, 0), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = mat::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, self.value(a).cols, "add_row: width mismatch");
        let mut v = self.value(a).clone();
        for chunk in v.data.chunks_mut(r.cols) {
            for (x, b) in chunk.iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = mat::silu(*x));
        self.push(v, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.param(w);
        let y = self.matmul(x, wv);
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.add_row(y, bv)
            }
            None => y,
        }
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, group: usize) -> Var {
        let xv = self.value(x);
        let g = &self.value(gain).data;
        assert_eq!(g.len(), group, "rms_norm: gain length mismatch");
        let out = mat::rms_norm(xv, g, group);
        let inv_rms = xv
            .data
            .chunks(group)
            .map(|seg| 1.0 / (seg.iter().map(|v| v * v).sum::<f64>() / group as f64 + mat::RMS_EPS).sqrt())
            .collect();
        self.push(out, Op::RmsNorm { x, gain, group, inv_rms })
    }

    pub fn rope(&mut self, x: Var, table: Rc<RopeTable>) -> Var {
        let mut v = self.value(x).clone();
        mat::apply_rope(&mut v, &table, false);
        self.push(v, Op::Rope { x, table })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, mask: &[bool]) -> Var {
        let (out, probs) = mat::attention(self.value(q), self.value(k), self.value(v), &shape, mask);
        self.push(out, Op::Attention { q, k, v, shape, probs })
    }

    /// Row `i` of the result is row `idx[i]` of `x`.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(x).select_rows(&idx);
        self.push(v, Op::Gather { x, idx })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vstack(&mats);
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Reinterprets the row-major data with a new row count.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        assert_eq!(src.len(), rows * cols, "reshape: size mismatch");
        let v = Mat::from_vec(rows, cols, src.data.clone());
        self.push(v, Op::Reshape(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let v = mat::conv2d(self.value(x), self.value(w), self.value(b), &geom);
        self.push(v, Op::Conv2d { x, w, b, geom })
    }

    /// Sum over `targets` of `CE(row) + z_coeff * lse(row)^2`, divided by
    /// `norm`. Rows not listed do not contribute and receive no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Target>, norm: f64, z_coeff: f64) -> Var {
        let l = self.value(logits);
        let mut softmax = Vec::with_capacity(targets.len() * l.cols);
        let mut lse = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for t in &targets {
            let row = l.row(t.row);
            assert!(t.class < l.cols, "cross_entropy: class out of range");
            let s = mat::log_sum_exp(row);
            total += s - row[t.class] + z_coeff * s * s;
            softmax.extend(row.iter().map(|x| (x - s).exp()));
            lse.push(s);
        }
        self.push(Mat::scalar(total / norm), Op::CrossEntropy { logits, targets, softmax, lse, norm, z_coeff })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x))
    }

    /// Runs the backward pass from a scalar `loss` and returns parameter
    /// gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_full(loss).0
    }

    /// Backward pass that also returns gradients for every node.
    pub fn backward_full(&self, loss: Var) -> (Grads, Vec<Option<Mat>>) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Grads::new(self.store.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
            grads[i] = Some(g);
        }
        (out, grads)
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>], out: &mut Grads) {
        let acc = |grads: &mut [Option<Mat>], v: Var, d: Mat| match &mut grads[v.0] {
            Some(a) => a.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Mat::zeros(av.rows, av.cols);
                mat::gemm(
                    av.rows,
                    g.cols,
                    av.cols,
                    1.0,
                    &g.data,
                    View::row_major(g.cols),
                    &bv.data,
                    View::transposed(bv.cols),
                    0.0,
                    &mut da.data,
                    View::row_major(av.cols),
                );
                let mut db = Mat::zeros(bv.rows, bv.cols);
                mat::gemm(
                    av.cols,
                    av.rows,
                    bv.cols,
                    1.0,
                    &av.data,
                    View::transposed(av.cols),
                    &g.data,
                    View::row_major(g.cols),
                    0.0,
                    &mut db.data,
                    View::row_major(bv.cols),
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut dr = Mat::zeros(1, g.cols);
                for chunk in g.data.chunks(g.cols) {
                    for (d, x) in dr.data.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                acc(grads, *a, g.clone());
                acc(grads, *row, dr);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                da.data.iter_mut().zip(&bv.data).for_each(|(d, y)| *d *= y);
                let mut db = g.clone();
                db.data.iter_mut().zip(&av.data).for_each(|(d, x)| *d *= x);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= s);
                acc(grads, *a, d);
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                d.data.iter_mut().zip(&self.value(*a).data).for_each(|(d, x)| *d *= mat::silu_grad(*x));
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.data.iter_mut().zip(&self.value(*a).data).for_each(|(d, x)| {
                    if *x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(grads, *a, d);
            }
            Op::RmsNorm { x, gain, group, inv_rms } => {
                let xv = self.value(*x);
                let gv = &self.value(*gain).data;
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dg = Mat::zeros(1, *group);
                for (s, ((xs, gs), dxs)) in xv
                    .data
                    .chunks(*group)
                    .zip(g.data.chunks(*group))
                    .zip(dx.data.chunks_mut(*group))
                    .enumerate()
                {
                    let r = inv_rms[s];
                    let mut dot = 0.0;
                    for j in 0..*group {
                        let xhat = xs[j] * r;
                        dg.data[j] += gs[j] * xhat;
                        dot += gs[j] * gv[j] * xhat;
                    }
                    let mean = dot / *group as f64;
                    for j in 0..*group {
                        let xhat = xs[j] * r;
                        dxs[j] = r * (gs[j] * gv[j] - xhat * mean);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
            }
            Op::Rope { x, table } => {
                let mut d = g.clone();
                mat::apply_rope(&mut d, table, true);
                acc(grads, *x, d);
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (dq, dk, dv) =
                    mat::attention_backward(self.value(*q), self.value(*k), self.value(*v), shape, probs, g);
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (a, b) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                acc(grads, *x, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    let d = Mat::from_vec(rows, cols, g.data[offset..offset + rows * cols].to_vec());
                    offset += rows * cols;
                    acc(grads, *p, d);
                }
            }
            Op::Reshape(x) => {
                let (rows, cols) = self.shape(*x);
                acc(grads, *x, Mat::from_vec(rows, cols, g.data.clone()));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let spatial = geom.out_height() * geom.out_width();
                let plen = geom.patch_len();
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dw = Mat::zeros(wv.rows, wv.cols);
                let mut db = Mat::zeros(1, geom.out_channels);
                let mut cols = vec![0.0; plen * spatial];
                let mut dcols = vec![0.0; plen * spatial];
                for n in 0..xv.rows {
                    let go = g.row(n);
                    for (c, chunk) in go.chunks(spatial).enumerate() {
                        db.data[c] += chunk.iter().sum::<f64>();
                    }
                    geom.im2col(xv.row(n), &mut cols);
                    // dW += dOut * cols^T
                    mat::gemm(
                        geom.out_channels,
                        spatial,
                        plen,
                        1.0,
                        go,
                        View::row_major(spatial),
                        &cols,
                        View::transposed(spatial),
                        1.0,
                        &mut dw.data,
                        View::row_major(plen),
                    );
                    // dcols = W^T dOut
                    mat::gemm(
                        plen,
                        geom.out_channels,
                        spatial,
                        1.0,
                        &wv.data,
                        View::transposed(plen),
                        go,
                        View::row_major(spatial),
                        0.0,
                        &mut dcols,
                        View::row_major(spatial),
                    );
                    geom.col2im(&dcols, dx.row_mut(n));
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::CrossEntropy { logits, targets, softmax, lse, norm, z_coeff } => {
                let lv = self.value(*logits);
                let scale = g.data[0] / norm;
                let mut d = Mat::zeros(lv.rows, lv.cols);
                for (j, t) in targets.iter().enumerate() {
                    let p = &softmax[j * lv.cols..(j + 1) * lv.cols];
                    let zf = 1.0 + 2.0 * z_coeff * lse[j];
                    let row = d.row_mut(t.row);
                    for (c, (dv, pv)) in row.iter_mut().zip(p).enumerate() {
                        let onehot = if c == t.class { 1.0 } else { 0.0 };
                        *dv += scale * (zf * pv - onehot);
                    }
                }
                acc(grads, *logits, d);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                acc(grads, *x, Mat::from_vec(rows, cols, vec![g.data[0]; rows * cols]));
            }
        }
    }
}
