//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;

use super::kernels;
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<Scalar>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanAxis(Var, usize),
    L2Normalize {
        x: Var,
        norms: Vec<Scalar>,
    },
    Log(Var),
    Exp(Var),
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward ops; call [`Graph::backward`] on a scalar to get gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

const GELU_C: Scalar = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Scalar = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Bind a named parameter from `store`, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?
            .clone();
        let v = self.variable(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    // ----- forward ops -----

    /// 2-D `[m,k]x[k,n]` or batched 3-D `[b,m,k]x[b,k,n]` product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                kernels::gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.record("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let shape = kernels::broadcast_shape(&sa, &sb).map_err(|_| {
            Error::dim(name, format!("incompatible shapes {sa:?} and {sb:?}"))
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let total: usize = shape.iter().product();
        let data: Vec<Scalar> = if sa == shape && sb == shape {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == shape && kernels::is_suffix_broadcast(&shape, &sb) {
            let nb = db.len();
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect()
        } else {
            let ma = kernels::broadcast_index_map(&shape, &sa);
            let mb = kernels::broadcast_index_map(&shape, &sb);
            (0..total).map(|i| f(da[ma[i]], db[mb[i]])).collect()
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.record("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.record("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.record("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: Scalar) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        self.record("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let v = self.value(x);
        if ax1 >= v.ndim() || ax2 >= v.ndim() {
            return Err(Error::dim(
                "transpose",
                format!("axes ({ax1},{ax2}) out of range for {:?}", v.shape()),
            ));
        }
        let (data, shape) = kernels::transpose_axes(v.data(), v.shape(), ax1, ax2);
        self.record("transpose", Tensor::new(shape, data)?, Op::Transpose(x, ax1, ax2), &[x])
    }

    /// Transpose of the last two axes.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::dim("transpose", "needs at least 2 axes"));
        }
        self.transpose(x, n - 2, n - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_shape(shape.to_vec())?;
        self.record("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total_axis = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::dim("concat", format!("shape {s:?} vs {base:?}")));
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        self.record("concat", Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, len, inner) = kernels::split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.record("slice", Tensor::new(shape, out)?, Op::Slice { x, axis, start }, &[x])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = last_dim(v.shape())?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.record("softmax", t, Op::Softmax(x), &[x])
    }

    /// Normalize each row of the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: Scalar) -> Result<Var> {
        let v = self.value(x);
        let n = last_dim(v.shape())?;
        let mut out = v.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<Scalar>() / n as Scalar;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<Scalar>() / n as Scalar;
            let rs = 1.0 / (var + eps).sqrt();
            for r in row.iter_mut() {
                *r = (*r - mean) * rs;
            }
            rstd.push(rs);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.record("layer_norm", t, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| 0.5 * a * (1.0 + (GELU_C * (a + GELU_A * a * a * a)).tanh()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.record("gelu", t, Op::Gelu(x), &[x])
    }

    /// Gather rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!("token id {bad} >= vocab size {vocab}")));
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        self.record(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean over one axis (removed from the shape). Summation is sorted, so the
    /// result does not depend on the order of elements along `axis`.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("mean_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&s, axis);
        if len == 0 {
            return Err(Error::dim("mean_axis", "empty axis"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = d[o * len * inner + j * inner + i];
                }
                out.push(kernels::sorted_sum(&mut buf) / len as Scalar);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        self.record("mean_axis", Tensor::new(shape, out)?, Op::MeanAxis(x, axis), &[x])
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    /// Divide each row of the last axis by its L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = last_dim(v.shape())?;
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|r| r * r).sum::<Scalar>().sqrt();
            if norm == 0.0 {
                return Err(Error::NonFinite { op: "l2_normalize" });
            }
            for r in row.iter_mut() {
                *r /= norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.record("l2_normalize", t, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.ln()).collect())?;
        self.record("log", t, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.exp()).collect())?;
        self.record("exp", t, Op::Exp(x), &[x])
    }

    /// `log(sum_{j: mask[j]} exp(x[j]))` over the last axis, stabilized by the
    /// row maximum of the selected entries. Every row needs at least one
    /// selected entry.
    pub fn masked_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::dim(
                "masked_logsumexp",
                format!("mask has {} entries for shape {:?}", mask.len(), v.shape()),
            ));
        }
        let n = last_dim(v.shape())?;
        let mut out = Vec::with_capacity(v.numel() / n);
        for (r, (row, m)) in v.data().chunks(n).zip(mask.chunks(n)).enumerate() {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&a, _)| a)
                .fold(Scalar::NEG_INFINITY, Scalar::max);
            if max == Scalar::NEG_INFINITY {
                return Err(Error::contract(format!(
                    "masked_logsumexp: row {r} has no selected entries"
                )));
            }
            let s: Scalar = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&a, _)| (a - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let mut shape = v.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, out)?;
        self.record(
            "masked_logsumexp",
            t,
            Op::MaskedLogSumExp {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        )
    }

    /// Plain log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let mask = vec![true; self.value(x).numel()];
        self.masked_logsumexp(x, &mask)
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`. Every leaf that requires a gradient
    /// gets one (zero when `loss` does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = self.input_grads(node, &g)?;
            grads[id] = Some(g);
            for (input, gi) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), _) => Some(g),
                (None, Op::Leaf) if n.requires_grad => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let gd = g.data();
        let out_shape = node.value.shape();
        let like = |v: Var, data: Vec<Scalar>| Tensor::new(self.shape(v).to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims(sa, sb)?;
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    let gs = &gd[bi * m * n..(bi + 1) * m * n];
                    kernels::gemm_nt(gs, &db[bi * k * n..(bi + 1) * k * n], &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                    kernels::gemm_tn(&da[bi * m * k..(bi + 1) * m * k], gs, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Add(a, b) => vec![
                (*a, like(*a, kernels::reduce_to_shape(gd, out_shape, self.shape(*a)))?),
                (*b, like(*b, kernels::reduce_to_shape(gd, out_shape, self.shape(*b)))?),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<Scalar> = gd.iter().map(|x| -x).collect();
                vec![
                    (*a, like(*a, kernels::reduce_to_shape(gd, out_shape, self.shape(*a)))?),
                    (*b, like(*b, kernels::reduce_to_shape(&neg, out_shape, self.shape(*b)))?),
                ]
            }
            Op::Mul(a, b) => {
                let ea = self.expand(*a, out_shape);
                let eb = self.expand(*b, out_shape);
                let ga: Vec<Scalar> = gd.iter().zip(&eb).map(|(x, y)| x * y).collect();
                let gb: Vec<Scalar> = gd.iter().zip(&ea).map(|(x, y)| x * y).collect();
                vec![
                    (*a, like(*a, kernels::reduce_to_shape(&ga, out_shape, self.shape(*a)))?),
                    (*b, like(*b, kernels::reduce_to_shape(&gb, out_shape, self.shape(*b)))?),
                ]
            }
            Op::Scale(x, c) => vec![(*x, like(*x, gd.iter().map(|v| v * c).collect())?)],
            Op::Transpose(x, a1, a2) => {
                let (data, _) = kernels::transpose_axes(gd, out_shape, *a1, *a2);
                vec![(*x, like(*x, data)?)]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec())?)],
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        part.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((v, like(v, part)?));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, len, inner) = kernels::split_axis(in_shape, *axis);
                let width = out_shape[*axis] * inner;
                let mut full = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    full[base..base + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                vec![(*x, like(*x, full)?)]
            }
            Op::Softmax(x) => {
                let n = last_dim(out_shape)?;
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::LayerNorm { x, rstd } => {
                let n = last_dim(out_shape)?;
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (((yr, gr), out), &rs) in y.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)).zip(rstd) {
                    let mean_g = gr.iter().sum::<Scalar>() / n as Scalar;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<Scalar>() / n as Scalar;
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = rs * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let gx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&a, &gv)| {
                        let u = GELU_C * (a + GELU_A * a * a * a);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * a * a);
                        gv * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * du)
                    })
                    .collect();
                vec![(*x, like(*x, gx)?)]
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (row, &i) in ids.iter().enumerate() {
                    for (t, gv) in gt[i * dim..(i + 1) * dim].iter_mut().zip(&gd[row * dim..(row + 1) * dim]) {
                        *t += gv;
                    }
                }
                vec![(*table, like(*table, gt)?)]
            }
            Op::MeanAxis(x, axis) => {
                let in_shape = self.shape(*x);
                let (outer, len, inner) = kernels::split_axis(in_shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[o * len * inner + j * inner + i] = gd[o * inner + i] / len as Scalar;
                        }
                    }
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::L2Normalize { x, norms } => {
                let n = last_dim(out_shape)?;
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (((yr, gr), out), &norm) in y.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)).zip(norms) {
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                vec![(*x, like(*x, gd.iter().zip(xd).map(|(g, a)| g / a).collect())?)]
            }
            Op::Exp(x) => {
                let y = node.value.data();
                vec![(*x, like(*x, gd.iter().zip(y).map(|(g, e)| g * e).collect())?)]
            }
            Op::MaskedLogSumExp { x, mask } => {
                let xv = self.value(*x);
                let n = last_dim(xv.shape())?;
                let lse = node.value.data();
                let mut gx = vec![0.0; xv.numel()];
                for (r, ((row, m), out)) in xv.data().chunks(n).zip(mask.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    for ((o, &a), &keep) in out.iter_mut().zip(row).zip(m) {
                        if keep {
                            *o = gd[r] * (a - lse[r]).exp();
                        }
                    }
                }
                vec![(*x, like(*x, gx)?)]
            }
        })
    }

    /// Values of `v` broadcast to `shape`.
    fn expand(&self, v: Var, shape: &[usize]) -> Vec<Scalar> {
        let src = self.value(v);
        if src.shape() == shape {
            return src.data().to_vec();
        }
        let map = kernels::broadcast_index_map(shape, src.shape());
        map.into_iter().map(|i| src.data()[i]).collect()
    }
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::dim("row op", format!("needs a non-empty last axis, got {shape:?}"))),
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => Ok((*b, *m, *k, *n)),
        _ => Err(Error::dim("matmul", format!("{sa:?} x {sb:?}"))),
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if it is on a path from a gradient-requiring leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound in `graph`, by name.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .bound_params()
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
