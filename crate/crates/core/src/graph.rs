//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass and
//! replays them backwards in [`Graph::backward`]. Graphs are single-use: build
//! one per forward pass and drop it afterwards.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{gemm, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameter store a bound parameter came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Nmt,
    Discriminator,
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    /// `batch * key_len` validity flags for keys.
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    MaskMul(Var, Vec<f64>),
    GradReverse(Var, f64),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    MaskedMean {
        x: Var,
        len: usize,
        mask: Vec<bool>,
    },
    SmoothedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        epsilon: f64,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(Group, ParamId), Var>,
    rng: Option<ChaCha8Rng>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<(Group, ParamId), Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, group: Group, id: ParamId) -> Option<&Tensor> {
        self.bound
            .get(&(group, id))
            .and_then(|v| self.grads[v.0].as_ref())
    }

    /// One slot per parameter of `store`; `None` for unused parameters.
    pub fn for_store(&self, group: Group, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| self.param(group, id).cloned())
            .collect()
    }
}

impl Graph {
    /// Graph without dropout.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            rng: None,
        }
    }

    /// Graph with dropout active, drawing masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng_mut(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, group: Group, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(group, id)) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.bound.insert((group, id), v);
        v
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        )
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| f(*p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |p| p * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |p| p + s);
        self.push(out, Op::AddScalar(a))
    }

    /// `x[n, d] + b[1, d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows, 1);
        assert_eq!(xv.cols, bv.cols);
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(
            &av.data, av.rows, av.cols, false, &bv.data, bv.rows, bv.cols, false, &mut out.data,
            false,
        );
        self.push(out, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |p| p.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |p| {
            if p >= 0.0 {
                1.0 / (1.0 + (-p).exp())
            } else {
                let e = p.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.map(a, |p| p.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout; identity in inference graphs or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let n = self.value(a).len();
        let keep = 1.0 / (1.0 - p);
        let Some(rng) = self.rng.as_mut() else {
            return a;
        };
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let x = self.value(a);
        let out = Tensor::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        );
        self.push(out, Op::MaskMul(a, mask))
    }

    /// Identity forward; backward multiplies incoming gradients by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::GradReverse(a, lambda))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let (n, d) = xv.shape();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Scaled dot-product multi-head attention on `[batch * len, d_model]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(d % spec.heads, 0);
        assert_eq!(qv.rows, spec.batch * spec.query_len);
        assert_eq!(kv.rows, spec.batch * spec.key_len);
        assert_eq!(spec.key_mask.len(), spec.batch * spec.key_len);
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk) = (spec.query_len, spec.key_len);
        let mut probs = vec![0.0; spec.batch * spec.heads * tq * tk];
        let mut out = Tensor::zeros(qv.rows, d);
        let mut scores = vec![0.0; tk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qv.row(b * tq + i)[off..off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        let allowed = spec.key_mask[b * tk + j] && !(spec.causal && j > i);
                        scores[j] = if allowed {
                            let krow = &kv.row(b * tk + j)[off..off + dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                    let mut z = 0.0;
                    for j in 0..tk {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        z += e;
                    }
                    let orow = &mut out.data[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vv.row(b * tk + j)[off..off + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        )
    }

    /// Mean over valid positions of each sequence: `[batch * len, d] -> [batch, d]`.
    pub fn masked_mean(&mut self, x: Var, len: usize, mask: &[bool]) -> Var {
        let xv = self.value(x);
        let batch = xv.rows / len;
        assert_eq!(mask.len(), xv.rows);
        let mut out = Tensor::zeros(batch, xv.cols);
        for b in 0..batch {
            let count = mask[b * len..(b + 1) * len].iter().filter(|m| **m).count();
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            for t in 0..len {
                if mask[b * len + t] {
                    let src = xv.row(b * len + t);
                    for (o, s) in out.row_mut(b).iter_mut().zip(src) {
                        *o += s * inv;
                    }
                }
            }
        }
        self.push(
            out,
            Op::MaskedMean {
                x,
                len,
                mask: mask.to_vec(),
            },
        )
    }

    /// `sum_r weights[r] * CE(q_r, softmax(logits_r))` where `q_r` puts
    /// `1 - epsilon` on the target and spreads `epsilon` uniformly. Rows with
    /// zero weight are skipped.
    pub fn smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        epsilon: f64,
    ) -> Var {
        let lv = self.value(logits);
        let (n, vsize) = lv.shape();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut probs = vec![0.0; n * vsize];
        let mut total = 0.0;
        let uniform = epsilon / vsize as f64;
        for r in 0..n {
            if weights[r] == 0.0 {
                continue;
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            let mut loss = 0.0;
            for (c, x) in row.iter().enumerate() {
                let logp = x - log_z;
                probs[r * vsize + c] = logp.exp();
                let q = uniform + if c == targets[r] { 1.0 - epsilon } else { 0.0 };
                if q != 0.0 {
                    loss -= q * logp;
                }
            }
            total += weights[r] * loss;
        }
        self.push(
            Tensor::scalar(total),
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                epsilon,
                probs,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_vec(t.rows, t.cols, data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, like(g, g.data.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(
                    *a,
                    like(g, g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect()),
                );
                acc(
                    *b,
                    like(g, g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect()),
                );
            }
            Op::Scale(a, s) => acc(*a, like(g, g.data.iter().map(|x| x * s).collect())),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(x, b) => {
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows, av.cols);
                gemm(
                    &g.data, g.rows, g.cols, false, &bv.data, bv.rows, bv.cols, true,
                    &mut ga.data, false,
                );
                let mut gb = Tensor::zeros(bv.rows, bv.cols);
                gemm(
                    &av.data, av.rows, av.cols, true, &g.data, g.rows, g.cols, false,
                    &mut gb.data, false,
                );
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Relu(a) => {
                let out = &node.value;
                acc(
                    *a,
                    like(
                        g,
                        g.data
                            .iter()
                            .zip(&out.data)
                            .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                acc(
                    *a,
                    like(
                        g,
                        g.data
                            .iter()
                            .zip(&out.data)
                            .map(|(x, y)| x * y * (1.0 - y))
                            .collect(),
                    ),
                );
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    like(g, g.data.iter().zip(&av.data).map(|(x, y)| x / y).collect()),
                );
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                acc(
                    *a,
                    like(
                        g,
                        g.data
                            .iter()
                            .zip(&av.data)
                            .map(|(x, y)| if *y < *lo || *y > *hi { 0.0 } else { *x })
                            .collect(),
                    ),
                );
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::filled(av.rows, av.cols, g.item()));
            }
            Op::MaskMul(a, mask) => {
                acc(
                    *a,
                    like(g, g.data.iter().zip(mask).map(|(x, m)| x * m).collect()),
                );
            }
            Op::GradReverse(a, lambda) => {
                acc(*a, like(g, g.data.iter().map(|x| -lambda * x).collect()));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.rows, tv.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, gt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let (n, d) = g.shape();
                let mut gx = Tensor::zeros(n, d);
                let mut ggain = Tensor::zeros(1, d);
                let mut gbias = Tensor::zeros(1, d);
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let grow = g.row(r);
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..d {
                        ggain.data[c] += grow[c] * hrow[c];
                        gbias.data[c] += grow[c];
                        dxhat[c] = grow[c] * gv.data[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hrow[c];
                    }
                    mean_d /= d as f64;
                    mean_dh /= d as f64;
                    let out = gx.row_mut(r);
                    for c in 0..d {
                        out[c] = rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols;
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk) = (spec.query_len, spec.key_len);
                let mut gq = Tensor::zeros(qv.rows, d);
                let mut gk = Tensor::zeros(kv.rows, d);
                let mut gvv = Tensor::zeros(vv.rows, d);
                let mut dp = vec![0.0; tk];
                for b in 0..spec.batch {
                    for h in 0..spec.heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let p = &probs[((b * spec.heads + h) * tq + i) * tk..][..tk];
                            let go = &g.row(b * tq + i)[off..off + dh];
                            let mut dot = 0.0;
                            for j in 0..tk {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vrow = &vv.row(b * tk + j)[off..off + dh];
                                dp[j] = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                dot += p[j] * dp[j];
                                let gvrow = &mut gvv.row_mut(b * tk + j)[off..off + dh];
                                for (o, x) in gvrow.iter_mut().zip(go) {
                                    *o += p[j] * x;
                                }
                            }
                            for j in 0..tk {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let krow = &kv.row(b * tk + j)[off..off + dh];
                                let gqrow = &mut gq.row_mut(b * tq + i)[off..off + dh];
                                for (o, x) in gqrow.iter_mut().zip(krow) {
                                    *o += ds * x;
                                }
                                let qrow = &qv.row(b * tq + i)[off..off + dh];
                                let gkrow = &mut gk.row_mut(b * tk + j)[off..off + dh];
                                for (o, x) in gkrow.iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gvv);
            }
            Op::MaskedMean { x, len, mask } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for b in 0..g.rows {
                    let count = mask[b * len..(b + 1) * len].iter().filter(|m| **m).count();
                    if count == 0 {
                        continue;
                    }
                    let inv = 1.0 / count as f64;
                    for t in 0..*len {
                        if mask[b * len + t] {
                            for (o, s) in gx.row_mut(b * len + t).iter_mut().zip(g.row(b)) {
                                *o = s * inv;
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SmoothedNll {
                logits,
                targets,
                weights,
                epsilon,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, vsize) = lv.shape();
                let uniform = epsilon / vsize as f64;
                let scale = g.item();
                let mut gl = Tensor::zeros(n, vsize);
                for r in 0..n {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    let w = weights[r] * scale;
                    let out = gl.row_mut(r);
                    for c in 0..vsize {
                        let q = uniform + if c == targets[r] { 1.0 - epsilon } else { 0.0 };
                        out[c] = w * (probs[r * vsize + c] - q);
                    }
                }
                acc(*logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    /// Central finite differences of `f` at every entry of `x0`.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.clone();
                p.data[i] += h;
                let mut m = x0.clone();
                m.data[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x0: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::inference();
        let x = g.constant(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.of(x).unwrap().data.clone();
        let numeric = numeric_grad(x0, &|t| {
            let mut g = Graph::inference();
            let x = g.constant(t.clone());
            let y = build(&mut g, x);
            g.value(y).item()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn matmul_layer_norm_gradients() {
        let mut r = rng();
        let x0 = Tensor::randn(3, 4, 1.0, &mut r);
        let w = Tensor::randn(4, 5, 1.0, &mut r);
        let gain = Tensor::randn(1, 5, 1.0, &mut r);
        let bias = Tensor::randn(1, 5, 1.0, &mut r);
        let probe = Tensor::randn(3, 5, 1.0, &mut r);
        check(&x0, &|g, x| {
            let w = g.constant(w.clone());
            let gn = g.constant(gain.clone());
            let b = g.constant(bias.clone());
            let p = g.constant(probe.clone());
            let h = g.matmul(x, w);
            let h = g.layer_norm(h, gn, b, 1e-5);
            let h = g.relu(h);
            let h = g.mul(h, p);
            g.sum(h)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng();
        let spec = AttentionSpec {
            batch: 2,
            query_len: 3,
            key_len: 3,
            heads: 2,
            key_mask: vec![true, true, false, true, true, true],
            causal: true,
        };
        let x0 = Tensor::randn(6, 4, 1.0, &mut r);
        let wk = Tensor::randn(4, 4, 1.0, &mut r);
        let probe = Tensor::randn(6, 4, 1.0, &mut r);
        check(&x0, &|g, x| {
            let wk = g.constant(wk.clone());
            let k = g.matmul(x, wk);
            let a = g.attention(x, k, x, spec.clone());
            let p = g.constant(probe.clone());
            let a = g.mul(a, p);
            g.sum(a)
        });
    }

    #[test]
    fn nll_pool_sigmoid_gradients() {
        let mut r = rng();
        let x0 = Tensor::randn(4, 6, 1.0, &mut r);
        check(&x0, &|g, x| g.smoothed_nll(x, &[1, 0, 5, 2], &[0.5, 0.25, 0.0, 0.25], 0.1));
        let mask = [true, false, true, true];
        check(&x0, &|g, x| {
            let m = g.masked_mean(x, 2, &mask);
            let s = g.sigmoid(m);
            let s = g.clamp(s, 1e-7, 1.0 - 1e-7);
            let l = g.ln(s);
            let e = g.embedding(l, &[1, 0, 1]);
            g.sum(e)
        });
    }

    #[test]
    fn grad_reverse_negates() {
        let x0 = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let mut g = Graph::inference();
        let x = g.constant(x0.clone());
        let r = g.grad_reverse(x, 1.0);
        assert_eq!(g.value(r), &x0);
        let sq = g.mul(r, r);
        let s = g.sum(sq);
        let grads = g.backward(s);
        assert_eq!(grads.of(x).unwrap().data, vec![-1.0, 2.0, -4.0]);
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::filled(2, 2, 1.0));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut g = Graph::training(rng());
        let x = g.constant(Tensor::filled(100, 10, 1.0));
        let y = g.dropout(x, 0.5);
        let v = g.value(y);
        assert!(v.data.iter().all(|&e| e == 0.0 || e == 2.0));
    }
}
