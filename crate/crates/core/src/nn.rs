//! Layers built on the autodiff graph: linear maps, layer norm, multi-head
//! attention and pre-norm transformer blocks.

use std::rc::Rc;

use rand::Rng;

use crate::graph::Var;
use crate::params::{Binder, ParamGroup, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let w = store.randn(format!("{name}.w"), input, output, std, group, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), 1, output, group));
        Linear {
            w,
            b,
            input,
            output,
        }
    }

    /// Fan-in scaled initialization.
    pub fn fan_in<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, input, output, true, 1.0 / (input as f64).sqrt(), group, rng)
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> Var {
        let w = b.param(self.w);
        let y = b.graph.matmul(x, w);
        match self.b {
            Some(bias) => {
                let bv = b.param(bias);
                b.graph.add_row(y, bv)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, width, 1.0), group),
            beta: store.zeros(format!("{name}.beta"), 1, width, group),
        }
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> Var {
        let g = b.param(self.gamma);
        let be = b.param(self.beta);
        b.graph.layer_norm(x, g, be)
    }
}

/// Shape and initialization of a transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Standard deviation of the residual-branch weights.
    pub init_std: f64,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    width: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: BlockSpec,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert!(spec.width % spec.heads == 0, "width must split across heads");
        let d = spec.width;
        let s = spec.init_std;
        let mut lin = |n: &str, i: usize, o: usize, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, true, s, group, rng)
        };
        let q = lin("q", d, d, rng);
        let k = lin("k", d, d, rng);
        let v = lin("v", d, d, rng);
        let o = lin("o", d, d, rng);
        let fc1 = lin("fc1", d, d * spec.mlp_ratio, rng);
        let fc2 = lin("fc2", d * spec.mlp_ratio, d, rng);
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, group),
            q,
            k,
            v,
            o,
            fc1,
            fc2,
            heads: spec.heads,
            width: d,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, b: &mut Binder, x: Var) -> Var {
        let h = self.ln1.forward(b, x);
        let q = self.q.forward(b, h);
        let k = self.k.forward(b, h);
        let v = self.v.forward(b, h);
        let att = multi_head_attention(b, q, k, v, self.heads, None);
        let att = self.o.forward(b, att);
        let x = b.graph.add(x, att);
        let h = self.ln2.forward(b, x);
        let h = self.fc1.forward(b, h);
        let h = b.graph.gelu(h);
        let h = self.fc2.forward(b, h);
        b.graph.add(x, h)
    }
}

/// Scaled dot-product attention split across `heads`, with an optional
/// `L × L` permission mask shared by all heads.
pub fn multi_head_attention(
    b: &mut Binder,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Rc<[bool]>>,
) -> Var {
    let width = b.graph.shape(q).1;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                b.graph.slice_cols(q, s, e),
                b.graph.slice_cols(k, s, e),
                b.graph.slice_cols(v, s, e),
            )
        };
        let logits = b.graph.matmul_nt(qh, kh);
        let logits = b.graph.scale(logits, scale);
        let attn = b.graph.softmax_rows(logits, mask.clone());
        outs.push(b.graph.matmul(attn, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        b.graph.concat_cols(&outs)
    }
}
