//! The recording tape. Every op stores what its backward pass needs; nodes
//! are appended in evaluation order, so reverse iteration is a valid
//! topological order for the backward sweep.

use crate::tensor::gemm;
use crate::{GraphError, Grads, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddChannel { x: Var, e: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    Silu(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    ToTokens { x: Var, group: usize },
    FromTokens { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Result of a backward sweep.
pub struct Gradients {
    pub params: Grads,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node (e.g. a graph input).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

const GN_EPS: f32 = 1e-5;

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var, GraphError> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        Ok(self.param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    /// `x[n, c, :, :] + e[n, c]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let tx = self.value(x);
        let te = self.value(e);
        let [n, c, h, w] = dims4(tx.shape());
        assert_eq!(te.shape(), &[n, c], "add_channel expects [N, C] bias");
        let hw = h * w;
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let b = te.data()[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::new(tx.shape(), data);
        self.push(out, Op::AddChannel { x, e })
    }

    /// `x · w + b` with `x: [M, K]`, `w: [K, N]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let (m, k) = (tx.shape()[0], tx.shape()[1]);
        let n = tw.shape()[1];
        assert_eq!(tw.shape()[0], k, "linear inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let tb = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(m, k, n, tx.data(), k as isize, 1, tw.data(), n as isize, 1, &mut out, n as isize, b.is_some());
        let out = Tensor::new(&[m, n], out);
        self.push(out, Op::Linear { x, w, b })
    }

    /// Square-kernel convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let [n, cin, h, wd] = dims4(tx.shape());
        let [cout, wcin, k, k2] = dims4(tw.shape());
        assert_eq!(wcin, cin, "conv2d channel mismatch");
        assert_eq!(k, k2);
        let pad = k / 2;
        let geo = ConvGeom::new(cin, h, wd, k, stride, pad);
        let (ho, wo) = (geo.ho, geo.wo);
        let hwo = ho * wo;
        let ckk = cin * k * k;
        let mut out = vec![0.0; n * cout * hwo];
        let mut cols = vec![0.0; ckk * hwo];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for i in 0..n {
            let xi = &tx.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
            geo.im2col(xi, &mut cols);
            let oi = &mut out[i * cout * hwo..(i + 1) * cout * hwo];
            if let Some(bias) = &bias {
                for (c, row) in oi.chunks_mut(hwo).enumerate() {
                    row.fill(bias[c]);
                }
            }
            gemm(cout, ckk, hwo, tw.data(), ckk as isize, 1, &cols, hwo as isize, 1, oi, hwo as isize, bias.is_some());
        }
        let out = Tensor::new(&[n, cout, ho, wo], out);
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = dims4(tx.shape());
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let hw = h * w;
        let per = (c / groups) * hw;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; tx.len()];
        for s in 0..n * groups {
            let src = &tx.data()[s * per..(s + 1) * per];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            let r = (1.0 / (var + GN_EPS as f64).sqrt()) as f32;
            rstd[s] = r;
            let mean = mean as f32;
            let ch0 = (s % groups) * (c / groups);
            for (j, &v) in src.iter().enumerate() {
                let xh = (v - mean) * r;
                let ch = ch0 + j / hw;
                xhat[s * per + j] = xh;
                out[s * per + j] = xh * g[ch] + bt[ch];
            }
        }
        let out = Tensor::new(tx.shape(), out);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|&v| silu(v)).collect());
        self.push(out, Op::Silu(x))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = dims4(tx.shape());
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (p, plane) in tx.data().chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for r in 0..2 * h {
                for col in 0..2 * w {
                    dst[r * 2 * w + col] = plane[(r / 2) * w + col / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, 2 * h, 2 * w], out);
        self.push(out, Op::Upsample2x(x))
    }

    /// Channel concatenation of two `[N, C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let [n, ca, h, w] = dims4(ta.shape());
        let [nb, cb, hb, wb] = dims4(tb.shape());
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&tb.data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out);
        self.push(out, Op::Concat(a, b))
    }

    /// `[N, C, H, W]` images to `[N / group, group·H·W, C]` token sequences;
    /// consecutive groups of `group` images share one sequence.
    pub fn to_tokens(&mut self, x: Var, group: usize) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = dims4(tx.shape());
        assert_eq!(n % group, 0, "image count {n} not divisible by group {group}");
        let hw = h * w;
        let mut out = vec![0.0; tx.len()];
        for img in 0..n {
            let (b, i) = (img / group, img % group);
            for ch in 0..c {
                let src = &tx.data()[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    out[((b * group + i) * hw + p) * c + ch] = v;
                }
            }
        }
        let out = Tensor::new(&[n / group, group * hw, c], out);
        self.push(out, Op::ToTokens { x, group })
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, group: usize, h: usize, w: usize) -> Var {
        let tx = self.value(x);
        let (b, l, c) = dims3(tx.shape());
        let hw = h * w;
        assert_eq!(l, group * hw, "token count does not match image size");
        let n = b * group;
        let mut out = vec![0.0; tx.len()];
        for img in 0..n {
            for ch in 0..c {
                let dst = &mut out[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = tx.data()[(img * hw + p) * c + ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out);
        self.push(out, Op::FromTokens { x, group })
    }

    /// Scaled dot-product attention, `q: [B, Lq, D]`, `k, v: [B, Lk, D]`.
    /// `key_mask[b * Lk + j] == false` excludes key `j` of batch `b`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (b, lq, d) = dims3(tq.shape());
        let (bk, lk, dk) = dims3(tk.shape());
        assert_eq!((b, d), (bk, dk), "attention q/k mismatch");
        assert_eq!(tk.shape(), tv.shape(), "attention k/v mismatch");
        assert_eq!(d % heads, 0);
        if let Some(m) = key_mask {
            assert_eq!(m.len(), b * lk);
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        for bi in 0..b {
            let qb = &tq.data()[bi * lq * d..(bi + 1) * lq * d];
            let kb = &tk.data()[bi * lk * d..(bi + 1) * lk * d];
            let vb = &tv.data()[bi * lk * d..(bi + 1) * lk * d];
            let mask = key_mask.map(|m| &m[bi * lk..(bi + 1) * lk]);
            for hi in 0..heads {
                let p = &mut probs[(bi * heads + hi) * lq * lk..(bi * heads + hi + 1) * lq * lk];
                gemm(lq, dh, lk, &qb[hi * dh..], d as isize, 1, &kb[hi * dh..], 1, d as isize, p, lk as isize, false);
                for row in p.chunks_mut(lk) {
                    let mut mx = f32::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if mask.is_some_and(|m| !m[j]) {
                            *s = f32::NEG_INFINITY;
                        }
                        mx = mx.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = if s.is_finite() { (*s - mx).exp() } else { 0.0 };
                        sum += *s;
                    }
                    let inv = if sum > 0.0 { 1.0 / sum } else { 0.0 };
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                let ob = &mut out[bi * lq * d + hi * dh..];
                gemm(lq, lk, dh, p, lk as isize, 1, &vb[hi * dh..], d as isize, 1, ob, d as isize, false);
            }
        }
        let out = Tensor::new(&[b, lq, d], out);
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Row lookup: `table: [V, D]` → `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        let d = tt.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], out);
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Reverse sweep from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.len(), self.value(out).len(), "seed gradient size mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = Grads::zeros_like(self.store);
        grads[out.0] = Some(seed.reshape(self.value(out).shape()));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.accumulate(*id, g.clone()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone(), self.value(*a).shape());
                    acc(&mut grads, *b, g.clone(), self.value(*b).shape());
                }
                Op::AddChannel { x, e } => {
                    let [n, c, h, w] = dims4(g.shape());
                    let de: Vec<f32> = g.data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
                    acc(&mut grads, *e, Tensor::new(&[n, c], de), &[n, c]);
                    acc(&mut grads, *x, g.clone(), &[n, c, h, w]);
                }
                Op::Linear { x, w, b } => {
                    let tx = self.value(*x);
                    let tw = self.value(*w);
                    let (m, k) = (tx.shape()[0], tx.shape()[1]);
                    let n = tw.shape()[1];
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), n as isize, 1, tw.data(), 1, n as isize, &mut dx, k as isize, false);
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, tx.data(), 1, k as isize, g.data(), n as isize, 1, &mut dw, n as isize, false);
                    if let Some(b) = b {
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        acc(&mut grads, *b, Tensor::new(&[n], db), &[n]);
                    }
                    acc(&mut grads, *x, Tensor::new(&[m, k], dx), &[m, k]);
                    acc(&mut grads, *w, Tensor::new(&[k, n], dw), &[k, n]);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let tx = self.value(*x);
                    let tw = self.value(*w);
                    let [n, cin, h, wd] = dims4(tx.shape());
                    let [cout, _, k, _] = dims4(tw.shape());
                    let geo = ConvGeom::new(cin, h, wd, k, *stride, *pad);
                    let hwo = geo.ho * geo.wo;
                    let ckk = cin * k * k;
                    let mut cols = vec![0.0; ckk * hwo];
                    let mut dcols = vec![0.0; ckk * hwo];
                    let mut dx = vec![0.0; tx.len()];
                    let mut dw = vec![0.0; tw.len()];
                    let mut db = vec![0.0; cout];
                    for i in 0..n {
                        let xi = &tx.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
                        let gi = &g.data()[i * cout * hwo..(i + 1) * cout * hwo];
                        geo.im2col(xi, &mut cols);
                        gemm(cout, hwo, ckk, gi, hwo as isize, 1, &cols, 1, hwo as isize, &mut dw, ckk as isize, true);
                        gemm(ckk, cout, hwo, tw.data(), 1, ckk as isize, gi, hwo as isize, 1, &mut dcols, hwo as isize, false);
                        geo.col2im_add(&dcols, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
                        for (c, row) in gi.chunks(hwo).enumerate() {
                            db[c] += row.iter().sum::<f32>();
                        }
                    }
                    if let Some(b) = b {
                        acc(&mut grads, *b, Tensor::new(&[cout], db), &[cout]);
                    }
                    acc(&mut grads, *x, Tensor::new(tx.shape(), dx), tx.shape());
                    acc(&mut grads, *w, Tensor::new(tw.shape(), dw), tw.shape());
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                    let tx = self.value(*x);
                    let [n, c, h, w] = dims4(tx.shape());
                    let gm = self.value(*gamma).data();
                    let hw = h * w;
                    let cpg = c / groups;
                    let per = cpg * hw;
                    let mut dx = vec![0.0; tx.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n * groups {
                        let ch0 = (s % groups) * cpg;
                        let gs = &g.data()[s * per..(s + 1) * per];
                        let xs = &xhat[s * per..(s + 1) * per];
                        let mut sum_d = 0.0f64;
                        let mut sum_dx = 0.0f64;
                        for j in 0..per {
                            let ch = ch0 + j / hw;
                            let dxh = gs[j] * gm[ch];
                            sum_d += dxh as f64;
                            sum_dx += (dxh * xs[j]) as f64;
                            dgamma[ch] += gs[j] * xs[j];
                            dbeta[ch] += gs[j];
                        }
                        let mean_d = (sum_d / per as f64) as f32;
                        let mean_dx = (sum_dx / per as f64) as f32;
                        let r = rstd[s];
                        for j in 0..per {
                            let ch = ch0 + j / hw;
                            let dxh = gs[j] * gm[ch];
                            dx[s * per + j] = r * (dxh - mean_d - xs[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(tx.shape(), dx), &[n, c, h, w]);
                    acc(&mut grads, *gamma, Tensor::new(&[c], dgamma), &[c]);
                    acc(&mut grads, *beta, Tensor::new(&[c], dbeta), &[c]);
                }
                Op::Silu(x) => {
                    let tx = self.value(*x);
                    let dx = tx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, *x, Tensor::new(tx.shape(), dx), tx.shape());
                }
                Op::Upsample2x(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let [_, _, h, w] = dims4(&shape);
                    let mut dx = vec![0.0; shape.iter().product()];
                    for (p, plane) in g.data().chunks(4 * h * w).enumerate() {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for r in 0..2 * h {
                            for col in 0..2 * w {
                                dst[(r / 2) * w + col / 2] += plane[r * 2 * w + col];
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&shape, dx), &shape);
                }
                Op::Concat(a, b) => {
                    let sa_shape = self.value(*a).shape().to_vec();
                    let sb_shape = self.value(*b).shape().to_vec();
                    let [n, ca, h, w] = dims4(&sa_shape);
                    let cb = sb_shape[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * sa);
                    let mut db = Vec::with_capacity(n * sb);
                    for i in 0..n {
                        let row = &g.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
                        da.extend_from_slice(&row[..sa]);
                        db.extend_from_slice(&row[sa..]);
                    }
                    acc(&mut grads, *a, Tensor::new(&sa_shape, da), &sa_shape);
                    acc(&mut grads, *b, Tensor::new(&sb_shape, db), &sb_shape);
                }
                Op::ToTokens { x, group } => {
                    let shape = self.value(*x).shape().to_vec();
                    let [_, _, h, w] = dims4(&shape);
                    let mut scratch = Graph::new(self.store);
                    let gv = scratch.input(g.clone());
                    let back = scratch.from_tokens(gv, *group, h, w);
                    let dx = scratch.nodes[back.0].value.take().expect("value");
                    acc(&mut grads, *x, dx, &shape);
                }
                Op::FromTokens { x, group } => {
                    let shape = self.value(*x).shape().to_vec();
                    let mut scratch = Graph::new(self.store);
                    let gv = scratch.input(g.clone());
                    let back = scratch.to_tokens(gv, *group);
                    let dx = scratch.nodes[back.0].value.take().expect("value");
                    acc(&mut grads, *x, dx, &shape);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (b, lq, d) = dims3(tq.shape());
                    let lk = tk.shape()[1];
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut dq = vec![0.0; tq.len()];
                    let mut dk = vec![0.0; tk.len()];
                    let mut dv = vec![0.0; tv.len()];
                    let mut dp = vec![0.0; lq * lk];
                    for bi in 0..b {
                        let qb = &tq.data()[bi * lq * d..(bi + 1) * lq * d];
                        let kb = &tk.data()[bi * lk * d..(bi + 1) * lk * d];
                        let vb = &tv.data()[bi * lk * d..(bi + 1) * lk * d];
                        let gb = &g.data()[bi * lq * d..(bi + 1) * lq * d];
                        for hi in 0..*heads {
                            let p = &probs[(bi * heads + hi) * lq * lk..(bi * heads + hi + 1) * lq * lk];
                            // dP = dO · Vᵀ
                            gemm(lq, dh, lk, &gb[hi * dh..], d as isize, 1, &vb[hi * dh..], 1, d as isize, &mut dp, lk as isize, false);
                            // dV += Pᵀ · dO
                            gemm(lk, lq, dh, p, 1, lk as isize, &gb[hi * dh..], d as isize, 1, &mut dv[bi * lk * d + hi * dh..], d as isize, true);
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                            for (prow, drow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                                for (pv, ds) in prow.iter().zip(drow.iter_mut()) {
                                    *ds = pv * (*ds - dot) * scale;
                                }
                            }
                            gemm(lq, lk, dh, &dp, lk as isize, 1, &kb[hi * dh..], d as isize, 1, &mut dq[bi * lq * d + hi * dh..], d as isize, true);
                            gemm(lk, lq, dh, &dp, 1, lk as isize, &qb[hi * dh..], d as isize, 1, &mut dk[bi * lk * d + hi * dh..], d as isize, true);
                        }
                    }
                    acc(&mut grads, *q, Tensor::new(tq.shape(), dq), tq.shape());
                    acc(&mut grads, *k, Tensor::new(tk.shape(), dk), tk.shape());
                    acc(&mut grads, *v, Tensor::new(tv.shape(), dv), tv.shape());
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let mut dt = vec![0.0; shape.iter().product()];
                    for (row, &i) in g.data().chunks(d).zip(ids) {
                        dt[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc(&mut grads, *table, Tensor::new(&shape, dt), &shape);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.clone(), &shape);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { params, nodes: grads }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor, shape: &[usize]) {
    let g = g.reshape(shape);
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected a 3-d tensor, got {s:?}");
    (s[0], s[1], s[2])
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { cin, h, w, k, stride, pad, ho, wo }
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let hwo = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &mut cols[((c * self.k + ki) * self.k + kj) * hwo..][..hwo];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize { 0.0 } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dx: &mut [f32]) {
        let hwo = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &cols[((c * self.k + ki) * self.k + kj) * hwo..][..hwo];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}
