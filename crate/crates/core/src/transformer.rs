//! Pre-norm transformer blocks shared by the encoders and the self-attention
//! aggregator.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: Scalar = 1e-9;
/// Additive attention bias for padded keys. Finite so the graph never sees Inf;
/// `exp` of it underflows to exactly zero.
pub(crate) const MASK_BIAS: Scalar = -1e9;

/// Sinusoidal position table of shape `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as Scalar;
            let freq = (10000.0 as Scalar).powf(-2.0 * pair / dim as Scalar);
            let angle = pos as Scalar * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape matches")
}

pub(crate) fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.init_linear(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.init_const(&format!("{prefix}.b"), &[fan_out], 0.0);
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.init_const(&format!("{prefix}.gamma"), &[dim], 1.0);
    store.init_const(&format!("{prefix}.beta"), &[dim], 0.0);
}

pub(crate) fn init_block<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, mlp_dim: usize, rng: &mut R) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), dim, dim, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, &format!("{prefix}.mlp.fc1"), dim, mlp_dim, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), mlp_dim, dim, rng);
}

pub(crate) fn block_param_count(dim: usize, mlp_dim: usize) -> usize {
    let ln = 2 * dim;
    let attn = 4 * (dim * dim + dim);
    let mlp = dim * mlp_dim + mlp_dim + mlp_dim * dim + dim;
    2 * ln + attn + mlp
}

/// `x [n, in] -> [n, out]`.
pub(crate) fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.mul(n, gamma)?;
    g.add(s, beta)
}

/// Attention bias `[b, 1, 1, t]`: 0 on the first `valid[i]` positions of row `i`,
/// [`MASK_BIAS`] after.
pub(crate) fn key_padding_bias(valid: &[usize], t: usize) -> Tensor {
    let mut data = vec![MASK_BIAS; valid.len() * t];
    for (i, &v) in valid.iter().enumerate() {
        data[i * t..i * t + v.min(t)].fill(0.0);
    }
    Tensor::new(vec![valid.len(), 1, 1, t], data).expect("shape matches")
}

/// One pre-norm block over `x [b, t, d]`. `bias` is an optional key padding bias.
pub(crate) fn block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    bias: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::dim("transformer block", format!("expected [b,t,d], got {shape:?}")));
    };
    if d % heads != 0 {
        return Err(Error::dim("transformer block", format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let h = g.reshape(h, &[b * t, d])?;
    let split = |g: &mut Graph, name: &str| -> Result<Var> {
        let p = linear(g, store, &format!("{prefix}.attn.{name}"), h)?;
        let p = g.reshape(p, &[b, t, heads, dh])?;
        let p = g.transpose(p, 1, 2)?;
        g.reshape(p, &[b * heads, t, dh])
    };
    let q = split(g, "wq")?;
    let k = split(g, "wk")?;
    let v = split(g, "wv")?;
    let kt = g.t(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as Scalar).sqrt())?;
    if let Some(bias) = bias {
        let s4 = g.reshape(scores, &[b, heads, t, t])?;
        let s4 = g.add(s4, bias)?;
        scores = g.reshape(s4, &[b * heads, t, t])?;
    }
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = g.transpose(ctx, 1, 2)?;
    let ctx = g.reshape(ctx, &[b * t, d])?;
    let out = linear(g, store, &format!("{prefix}.attn.wo"), ctx)?;
    let out = g.reshape(out, &[b, t, d])?;
    let x = g.add(x, out)?;

    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = g.reshape(h, &[b * t, d])?;
    let h = linear(g, store, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, store, &format!("{prefix}.mlp.fc2"), h)?;
    let h = g.reshape(h, &[b, t, d])?;
    g.add(x, h)
}

/// Prepend a learned `[1, 1, d]` token to `x [b, t, d]`.
pub(crate) fn prepend_token(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let tok = g.param(store, name)?;
    let zeros = g.constant(Tensor::zeros(&[shape[0], 1, shape[2]]));
    let tok = g.add(zeros, tok)?;
    g.concat(&[tok, x], 1)
}

/// Row 0 of every sequence: `[b, t, d] -> [b, d]`.
pub(crate) fn first_token(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let s = g.slice(x, 1, 0, 1)?;
    g.reshape(s, &[shape[0], shape[2]])
}
