use rand::Rng;

use crate::graph::{AttentionSpec, Graph, Group, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

use super::LN_EPS;

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(fan_in, fan_out, std, rng)
}

pub(super) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grp: Group, x: Var) -> Var {
        let w = g.param(grp, store, self.w);
        let b = g.param(grp, store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

pub(super) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grp: Group, x: Var) -> Var {
        let gain = g.param(grp, store, self.gain);
        let bias = g.param(grp, store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

pub(super) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.query"), d, d, rng),
            k: Linear::new(store, &format!("{name}.key"), d, d, rng),
            v: Linear::new(store, &format!("{name}.value"), d, d, rng),
            o: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        grp: Group,
        queries: Var,
        memory: Var,
        spec: AttentionSpec,
    ) -> Var {
        let q = self.q.forward(g, store, grp, queries);
        let k = self.k.forward(g, store, grp, memory);
        let v = self.v.forward(g, store, grp, memory);
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, store, grp, a)
    }
}

pub(super) struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grp: Group, x: Var, dropout: f64) -> Var {
        let h = self.inner.forward(g, store, grp, x);
        let h = g.relu(h);
        let h = g.dropout(h, dropout);
        self.outer.forward(g, store, grp, h)
    }
}
