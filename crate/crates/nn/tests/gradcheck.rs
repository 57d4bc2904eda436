//! Central finite-difference checks for every tape op.

use std::rc::Rc;

use deskbc_nn::{AttnShape, ConvGeom, Mat, ParamId, ParamStore, RopeTable, Tape, Target, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check<F>(store: &ParamStore, ids: &[ParamId], build: F, tol: f64)
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape);
    let grads = tape.backward(loss);
    let h = 1e-5;
    for &id in ids {
        let g = grads.get(id).expect("parameter received no gradient");
        for j in 0..store.get(id).len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data[j] += delta;
                let mut t = Tape::new(&s);
                let l = build(&mut t);
                t.value(l).data[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < tol, "{} [{j}]: analytic {an} vs fd {fd} (rel {rel})", store.param(id).name);
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn linear_silu_norm_chain() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = s.normal("x", 3, 4, 1.0, &mut r);
    let w = s.normal("w", 4, 4, 0.5, &mut r);
    let b = s.normal("b", 1, 4, 0.5, &mut r);
    let g = s.normal("g", 1, 2, 1.0, &mut r);
    let ids = [x, w, b, g];
    check(
        &s,
        &ids,
        |t| {
            let xv = t.param(x);
            let y = t.linear(xv, w, Some(b));
            let y = t.silu(y);
            let gv = t.param(g);
            let y = t.rms_norm(y, gv, 2);
            let z = t.mul(y, xv);
            let z = t.scale(z, 0.7);
            let z = t.add(z, xv);
            t.sum(z)
        },
        1e-6,
    );
}

#[test]
fn attention_with_rope_and_gqa() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let q = s.normal("q", 2 * 3, 4 * 2, 1.0, &mut r);
    let k = s.normal("k", 2 * 3, 2 * 2, 1.0, &mut r);
    let v = s.normal("v", 2 * 3, 2 * 2, 1.0, &mut r);
    let ids = [q, k, v];
    let pos: Vec<f64> = (0..6).map(|i| (i % 3) as f64).collect();
    let table = Rc::new(RopeTable::new(&pos, 2, 100.0));
    let mask = vec![true, false, false, true, true, false, true, true, true];
    check(
        &s,
        &ids,
        |t| {
            let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
            let qr = t.rope(qv, table.clone());
            let kr = t.rope(kv, table.clone());
            let shape = AttnShape { n_seq: 2, q_len: 3, k_len: 3, heads: 4, kv_heads: 2, head_dim: 2 };
            let o = t.attention(qr, kr, vv, shape, &mask);
            let o2 = t.mul(o, o);
            t.sum(o2)
        },
        1e-6,
    );
}

#[test]
fn gather_concat_reshape_cross_entropy() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let a = s.normal("a", 2, 3, 1.0, &mut r);
    let b = s.normal("b", 3, 3, 1.0, &mut r);
    let ids = [a, b];
    check(
        &s,
        &ids,
        |t| {
            let (av, bv) = (t.param(a), t.param(b));
            let c = t.concat(&[av, bv]);
            let g = t.gather(c, Rc::new(vec![4, 0, 0, 2, 1, 3]));
            let rs = t.reshape(g, 9, 2);
            let targets = vec![Target { row: 0, class: 1 }, Target { row: 3, class: 0 }, Target { row: 8, class: 1 }];
            t.cross_entropy(rs, targets, 3.0, 1e-2)
        },
        1e-6,
    );
}

#[test]
fn strided_convolution() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let geom = ConvGeom { in_channels: 2, height: 5, width: 5, out_channels: 3, kernel: 3, stride: 2, padding: 1 };
    let x = s.normal("x", 2, geom.in_size(), 1.0, &mut r);
    let w = s.normal("w", 3, geom.patch_len(), 0.5, &mut r);
    let b = s.normal("b", 1, 3, 0.5, &mut r);
    let ids = [x, w, b];
    check(
        &s,
        &ids,
        |t| {
            let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
            let y = t.conv2d(xv, wv, bv, geom);
            let y = t.silu(y);
            let y2 = t.mul(y, y);
            t.sum(y2)
        },
        1e-6,
    );
}

#[test]
fn leaf_inputs_do_not_produce_param_grads() {
    let s = ParamStore::new();
    let mut t = Tape::new(&s);
    let x = t.leaf(Mat::from_vec(1, 2, vec![1.0, 2.0]));
    let y = t.sum(x);
    let g = t.backward(y);
    assert_eq!(g.iter().count(), 0);
}
