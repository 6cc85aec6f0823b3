//! Central-difference checks for every op's backward rule.

use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect())
}

/// Builds a graph with `build`, contracts the output against fixed random
/// weights and compares every parameter gradient against central differences.
fn check<F>(store: ParamStore, build: F, tol: f64)
where
    F: Fn(&mut Graph) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new(&store);
        let out = build(&mut g);
        randn(&mut rng, g.shape(out), 1.0)
    };
    let loss = |s: &ParamStore| -> f64 {
        let mut g = Graph::new(s);
        let out = build(&mut g);
        g.value(out).data().iter().zip(probe.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let grads = {
        let mut g = Graph::new(&store);
        let out = build(&mut g);
        g.backward(out, probe.clone())
    };
    for (id, p) in store.iter() {
        let analytic = grads.params.get(id).unwrap_or_else(|| panic!("no grad for {}", p.name));
        for idx in 0..p.value.len() {
            let h = 1e-2f32;
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[idx] += h;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
            let an = analytic.data()[idx] as f64;
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1.0));
            assert!(err < tol, "{}[{idx}]: analytic {an} vs fd {fd}", p.name);
        }
    }
}

fn param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, randn(rng, shape, 0.7), 0)
}

#[test]
fn conv_groupnorm_silu_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", &[2, 4, 5, 5]);
    let w = param(&mut store, &mut rng, "w", &[4, 4, 3, 3]);
    let b = param(&mut store, &mut rng, "b", &[4]);
    let gm = param(&mut store, &mut rng, "gamma", &[4]);
    let bt = param(&mut store, &mut rng, "beta", &[4]);
    let ws = param(&mut store, &mut rng, "ws", &[3, 4, 3, 3]);
    check(
        store,
        |g| {
            let (x, w, b, gm, bt, ws) = (g.param(x), g.param(w), g.param(b), g.param(gm), g.param(bt), g.param(ws));
            let h = g.conv2d(x, w, Some(b), 1);
            let h = g.group_norm(h, gm, bt, 2);
            let h = g.silu(h);
            g.conv2d(h, ws, None, 2)
        },
        2e-2,
    );
}

#[test]
fn linear_addchannel_upsample_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", &[2, 3, 2, 2]);
    let y = param(&mut store, &mut rng, "y", &[2, 2, 4, 4]);
    let e = param(&mut store, &mut rng, "e", &[2, 5]);
    let w = param(&mut store, &mut rng, "w", &[5, 3]);
    let b = param(&mut store, &mut rng, "b", &[3]);
    let w1 = param(&mut store, &mut rng, "w1", &[2, 5, 1, 1]);
    check(
        store,
        |g| {
            let (x, y, e, w, b, w1) = (g.param(x), g.param(y), g.param(e), g.param(w), g.param(b), g.param(w1));
            let emb = g.linear(e, w, Some(b));
            let up = g.upsample2x(x);
            let up = g.add_channel(up, emb);
            let cat = g.concat(up, y);
            let h = g.conv2d(cat, w1, None, 1);
            g.add(h, y)
        },
        2e-2,
    );
}

#[test]
fn attention_tokens_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = param(&mut store, &mut rng, "x", &[4, 4, 2, 3]);
    let wq = param(&mut store, &mut rng, "wq", &[4, 4]);
    let wk = param(&mut store, &mut rng, "wk", &[4, 4]);
    let wv = param(&mut store, &mut rng, "wv", &[4, 4]);
    let table = param(&mut store, &mut rng, "table", &[5, 4]);
    let wck = param(&mut store, &mut rng, "wck", &[4, 4]);
    // cross-attention keys: 2 sequences of 3 tokens, the last one masked in batch 1
    let mask = vec![true, true, true, true, true, false];
    check(
        store,
        |g| {
            let (x, wq, wk, wv, table, wck) =
                (g.param(x), g.param(wq), g.param(wk), g.param(wv), g.param(table), g.param(wck));
            let tok = g.to_tokens(x, 2); // [2, 12, 4]
            let flat = g.reshape(tok, &[24, 4]);
            let q = g.linear(flat, wq, None);
            let k = g.linear(flat, wk, None);
            let v = g.linear(flat, wv, None);
            let q = g.reshape(q, &[2, 12, 4]);
            let k = g.reshape(k, &[2, 12, 4]);
            let v = g.reshape(v, &[2, 12, 4]);
            let a = g.attention(q, k, v, 2, None);
            let ctx = g.gather(table, &[0, 1, 2, 3, 4, 4]);
            let ck = g.linear(ctx, wck, None);
            let ck = g.reshape(ck, &[2, 3, 4]);
            let c = g.attention(a, ck, ck, 1, Some(&mask));
            g.from_tokens(c, 2, 2, 3)
        },
        2e-2,
    );
}

#[test]
fn token_roundtrip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let t = randn(&mut rng, &[6, 3, 4, 4], 1.0);
    let x = g.input(t.clone());
    let tok = g.to_tokens(x, 6);
    assert_eq!(g.shape(tok), &[1, 96, 3]);
    let back = g.from_tokens(tok, 6, 4, 4);
    assert_eq!(g.value(back), &t);
}

#[test]
fn adam_moves_against_gradient() {
    use autograd::{Adam, Grads};
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]), 0);
    let mut g = Graph::new(&store);
    let w = g.param(id);
    let grads = g.backward(w, Tensor::new(&[2], vec![1.0, -2.0])).params;
    let mut opt = Adam::new(&store, vec![0.1]);
    let mut s = store.clone();
    opt.step(&mut s, &grads, 1.0);
    assert!(s.value(id).data()[0] < 1.0);
    assert!(s.value(id).data()[1] > -1.0);
    let _ = Grads::zeros_like(&store);
}
