//! Eager reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes, in execution order, so
//! the node list is already topologically sorted. [`Graph::backward`] sweeps
//! it once in reverse. Nodes whose inputs are all constants are marked as not
//! requiring a gradient and the sweep never allocates a buffer for them,
//! which is what keeps frozen backbone weights gradient-free.
//!
//! A graph lives for one forward/backward pass and is then dropped.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed real linear operator with an explicit adjoint, used for the
/// spectral prompt transforms.
pub trait LinearMap: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, x: &Tensor) -> Tensor;
    fn adjoint(&self, g: &Tensor) -> Tensor;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    AddTiled { x: Var, t: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Concat { parts: Vec<Var>, outer: usize, extents: Vec<usize> },
    Slice { x: Var, outer: usize, extent: usize, offset: usize },
    GatherRows { sources: Vec<Var>, map: Vec<(usize, usize)>, width: usize },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Linear { x: Var, map: Arc<dyn LinearMap> },
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    live_bytes: usize,
    peak_bytes: usize,
}

/// Gradients of the tracked leaves after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    peak_bytes: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?.clone();
        self.grads[v.0].take().map(|g| Tensor::from_parts(shape, g))
    }

    /// Number of gradient buffers that exist after the sweep (leaves only).
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    /// Peak live buffer bytes over forward and backward.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}

const F64: usize = std::mem::size_of::<f64>();

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Bytes of live tensor buffers recorded so far.
    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        let saved = match &op {
            Op::LayerNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            Op::CrossEntropy { probs, .. } | Op::Attention { probs, .. } => probs.len(),
            _ => 0,
        };
        self.track((value.numel() + saved) * F64);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn track(&mut self, bytes: usize) {
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Untracked leaf sharing an existing buffer (frozen weights).
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, false, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// `a·b` for `a: [m,k]`, `b: [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if b_trans { "matmul_bt" } else { "matmul" };
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [kb, n]) if !b_trans && k == kb => (*m, *k, *n),
            ([m, k], [n, kb]) if b_trans && k == kb => (*m, *k, *n),
            _ => return Err(Error::shape(op, &sa, &sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_trans,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            rg,
            Op::MatMul { a, b, b_trans },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Add(a, b)))
    }

    /// Adds `t` repeated end-to-end over `x` (bias rows, tiled position embeddings).
    /// `t.numel()` must divide `x.numel()` and match `x`'s trailing layout.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let (nx, nt) = (self.value(x).numel(), self.value(t).numel());
        let last = *self.shape(x).last().unwrap();
        if nx % nt != 0 || nt % last != 0 {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(t)));
        }
        let tv = self.value(t).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tv[i % nt])
            .collect();
        let rg = self.any_grad(&[x, t]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::AddTiled { x, t }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then applies `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layernorm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(t, rg, Op::Gelu(x))
    }

    /// Mean cross-entropy of `logits: [batch, classes]` (or `[classes]`) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (batch, classes) = match shape[..] {
            [c] => (1, c),
            [b, c] => (b, c),
            _ => return Err(Error::shape("cross_entropy", &shape, &[labels.len()])),
        };
        if labels.len() != batch {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Bounds {
                op: "cross_entropy",
                start: bad,
                end: bad + 1,
                len: classes,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[labels[r]];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / batch as f64),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let extents: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&self.value(p).data()[o * e..(o + 1) * e]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                extents,
            },
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("slice axis {axis} out of range")));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Bounds {
                op: "slice",
                start,
                end: start + len,
                len: shape[axis],
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Slice {
                x,
                outer,
                extent: full * inner,
                offset: start * inner,
            },
        ))
    }

    /// Builds a matrix whose row `r` is row `map[r].1` of `sources[map[r].0]`.
    /// A source row may appear any number of times; gradients are summed.
    pub fn gather_rows(&mut self, sources: &[Var], map: &[(usize, usize)]) -> Result<Var> {
        let mut width = None;
        for &s in sources {
            let (_, c) = self.value(s).dims2()?;
            if width.is_some_and(|w| w != c) {
                return Err(Error::shape("gather_rows", &[width.unwrap()], &[c]));
            }
            width = Some(c);
        }
        let width = width.ok_or_else(|| Error::Contract("gather_rows of nothing".into()))?;
        if map.is_empty() {
            return Err(Error::Contract("gather_rows with empty row map".into()));
        }
        let mut out = Vec::with_capacity(map.len() * width);
        for &(s, r) in map {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::Contract(format!("gather_rows: no source {s}")))?;
            let rows = self.shape(*src)[0];
            if r >= rows {
                return Err(Error::Bounds {
                    op: "gather_rows",
                    start: r,
                    end: r + 1,
                    len: rows,
                });
            }
            out.extend_from_slice(self.value(*src).row(r));
        }
        let rg = self.any_grad(sources);
        Ok(self.push(
            Tensor::from_parts(vec![map.len(), width], out),
            rg,
            Op::GatherRows {
                sources: sources.to_vec(),
                map: map.to_vec(),
                width,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `qkv` is `[batch·seq, 3·d]` with each row laid out as `[q | k | v]`; the
    /// result is `[batch·seq, d]`. The post-softmax probabilities
    /// (`[batch, heads, seq, seq]`) are kept and available through
    /// [`Graph::attention_probs`].
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.value(qkv).dims2()?;
        if rows != batch * seq || cols % 3 != 0 || (cols / 3) % heads != 0 {
            return Err(Error::shape("attention", &[rows, cols], &[batch, seq, heads]));
        }
        let d = cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut q = vec![0.0; seq * dh];
        let mut k = vec![0.0; seq * dh];
        let mut v = vec![0.0; seq * dh];
        let mut o = vec![0.0; seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(qv, b, seq, cols, h * dh, dh, &mut q);
                gather_head(qv, b, seq, cols, d + h * dh, dh, &mut k);
                gather_head(qv, b, seq, cols, 2 * d + h * dh, dh, &mut v);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(seq, dh, seq, &q, false, &k, true, p, false);
                for row in p.chunks_mut(seq) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - max).exp();
                        total += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= total;
                    }
                }
                gemm(seq, seq, dh, p, false, &v, false, &mut o, false);
                scatter_head(&o, b, seq, d, h * dh, dh, &mut out, false);
            }
        }
        let rg = self.any_grad(&[qkv]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            rg,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention {
                batch,
                seq,
                heads,
                probs,
                ..
            } => Some(Tensor::from_parts(
                vec![*batch, *heads, *seq, *seq],
                probs.clone(),
            )),
            _ => None,
        }
    }

    /// Applies a fixed linear operator; the backward pass uses its adjoint.
    pub fn linear_map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Var {
        let t = map.apply(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(t, rg, Op::Linear { x, map })
    }

    /// Propagates d`loss`/d(node) back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut live = self.live_bytes;
        let mut peak = self.peak_bytes;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
            live += F64;
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let before = grads.iter().flatten().map(Vec::len).sum::<usize>();
            self.backprop_node(node, &g, &mut grads);
            let after = grads.iter().flatten().map(Vec::len).sum::<usize>();
            // `g` is still live while its parents' buffers grow.
            live += (after - before) * F64;
            peak = peak.max(live);
            live -= g.len() * F64;
        }
        // Non-leaf gradients were consumed above; only leaves remain.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            peak_bytes: peak,
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_trans } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = node.value.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    if *b_trans {
                        gemm(m, n, k, g, false, bv, false, ga, true);
                    } else {
                        gemm(m, n, k, g, false, bv, true, ga, true);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *b_trans {
                        gemm(n, m, k, g, true, av, false, gb, true);
                    } else {
                        gemm(k, m, n, av, true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::AddTiled { x, t } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *t) {
                    let nt = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % nt] += gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let rows = xhat.len() / n;
                if let Some(s) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..n {
                            s[j] += g[r * n + j];
                        }
                    }
                }
                let gv = self.value(*gain).data();
                if let Some(s) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; n];
                    for r in 0..rows {
                        let (mut sum_dh, mut sum_dh_h) = (0.0, 0.0);
                        for j in 0..n {
                            dh[j] = g[r * n + j] * gv[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * xhat[r * n + j];
                        }
                        let c = inv_std[r] / n as f64;
                        for j in 0..n {
                            s[r * n + j] +=
                                c * (n as f64 * dh[j] - sum_dh - xhat[r * n + j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let w = g[0] / batch as f64;
                    for r in 0..batch {
                        for c in 0..classes {
                            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                            s[r * classes + c] += w * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&p, &e) in parts.iter().zip(extents) {
                    if let Some(s) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + e];
                            s[o * e..(o + 1) * e]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    }
                    offset += e;
                }
            }
            Op::Slice {
                x,
                outer,
                extent,
                offset,
            } => {
                if let Some(s) = self.slot(grads, *x) {
                    let len = g.len() / outer;
                    for o in 0..*outer {
                        let dst = &mut s[o * extent + offset..o * extent + offset + len];
                        dst.iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::GatherRows {
                sources,
                map,
                width,
            } => {
                for (si, &src) in sources.iter().enumerate() {
                    if let Some(s) = self.slot(grads, src) {
                        for (r, &(from, row)) in map.iter().enumerate() {
                            if from == si {
                                let dst = &mut s[row * width..(row + 1) * width];
                                dst.iter_mut()
                                    .zip(&g[r * width..(r + 1) * width])
                                    .for_each(|(s, g)| *s += g);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                if !self.nodes[qkv.0].requires_grad {
                    return;
                }
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let cols = self.shape(*qkv)[1];
                let d = cols / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*qkv).data();
                let mut q = vec![0.0; seq * dh];
                let mut k = vec![0.0; seq * dh];
                let mut v = vec![0.0; seq * dh];
                let mut go = vec![0.0; seq * dh];
                let mut gp = vec![0.0; seq * seq];
                let mut gq = vec![0.0; seq * dh];
                let mut gk = vec![0.0; seq * dh];
                let mut gv = vec![0.0; seq * dh];
                let s = self.slot(grads, *qkv).unwrap();
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        gather_head(qv, b, seq, cols, h * dh, dh, &mut q);
                        gather_head(qv, b, seq, cols, d + h * dh, dh, &mut k);
                        gather_head(qv, b, seq, cols, 2 * d + h * dh, dh, &mut v);
                        gather_head(g, b, seq, d, h * dh, dh, &mut go);
                        // dV = Pᵀ·dO, dP = dO·Vᵀ
                        gemm(seq, seq, dh, p, true, &go, false, &mut gv, false);
                        gemm(seq, dh, seq, &go, false, &v, true, &mut gp, false);
                        // Softmax backward, folding in the score scale.
                        for (prow, grow) in p.chunks(seq).zip(gp.chunks_mut(seq)) {
                            let dot: f64 = prow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                            for (gx, px) in grow.iter_mut().zip(prow) {
                                *gx = px * (*gx - dot) * scale;
                            }
                        }
                        gemm(seq, seq, dh, &gp, false, &k, false, &mut gq, false);
                        gemm(seq, seq, dh, &gp, true, &q, false, &mut gk, false);
                        scatter_head(&gq, b, seq, cols, h * dh, dh, s, true);
                        scatter_head(&gk, b, seq, cols, d + h * dh, dh, s, true);
                        scatter_head(&gv, b, seq, cols, 2 * d + h * dh, dh, s, true);
                    }
                }
            }
            Op::Linear { x, map } => {
                if let Some(s) = self.slot(grads, *x) {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    let back = map.adjoint(&gt);
                    s.iter_mut().zip(back.data()).for_each(|(s, g)| *s += g);
                }
            }
        }
    }
}

fn gather_head(src: &[f64], b: usize, seq: usize, cols: usize, col: usize, dh: usize, dst: &mut [f64]) {
    for i in 0..seq {
        let r = (b * seq + i) * cols + col;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[r..r + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(
    src: &[f64],
    b: usize,
    seq: usize,
    cols: usize,
    col: usize,
    dh: usize,
    dst: &mut [f64],
    accumulate: bool,
) {
    for i in 0..seq {
        let r = (b * seq + i) * cols + col;
        let row = &mut dst[r..r + dh];
        let from = &src[i * dh..(i + 1) * dh];
        if accumulate {
            row.iter_mut().zip(from).for_each(|(d, s)| *d += s);
        } else {
            row.copy_from_slice(from);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
