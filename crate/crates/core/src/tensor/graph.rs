//! Wengert-list autodiff.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological ordering and backward is a single reverse sweep. Inputs that do
//! not require gradients are skipped during the sweep, which is what keeps
//! frozen weights free of gradient work.

use super::kernels::{add_assign, gemm, transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const GELU_C: f64 = 0.7978845608;
pub(crate) const GELU_A: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// A compute graph confined to one thread from construction to backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

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

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    /// Head-wise attention probabilities `[heads × T × T]` saved by an
    /// attention node, or `None` for any other node kind.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Clears every gradient so that backward may be called again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
        self.backward_done = false;
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        let t = Tensor::new(shape, data)
            .expect("derived node shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Affine map `x · wᵀ + b` with `w` stored `[d_out × d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (t, d_in) = self.matrix_dims(x, "linear")?;
        let (d_out, d_in2) = self.matrix_dims(w, "linear")?;
        if d_in != d_in2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear bias", self.shape(b), &[d_out]));
            }
        }
        let wt = transpose(self.value(w), d_out, d_in);
        let mut out = vec![0.0; t * d_out];
        gemm(self.value(x), &wt, &mut out, t, d_in, d_out);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(d_out) {
                add_assign(row, bias);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(vec![t, d_out], out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Scale { x, s }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Gelu { x }, &[x])
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let bb = self.value(bias);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + bb[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Softmax { x }, &[x])
    }

    /// Multi-head scaled dot-product attention over `[T × d]` inputs whose
    /// columns are split into `heads` contiguous blocks. With `causal`, token
    /// `i` attends only to tokens `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut scores = vec![0.0; t * t];
        let mut oh = vec![0.0; t * dh];
        for h in 0..heads {
            let qh = head_slice(qv, t, d, h, dh);
            let kh_t = transpose(&head_slice(kv, t, d, h, dh), t, dh);
            let vh = head_slice(vv, t, d, h, dh);
            gemm(&qh, &kh_t, &mut scores, t, dh, t);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let visible = if causal { i + 1 } else { t };
                for j in 0..visible {
                    row[j] = scores[i * t + j] * scale;
                }
                softmax_in_place(&mut row[..visible]);
                for x in row[visible..].iter_mut() {
                    *x = 0.0;
                }
            }
            gemm(p, &vh, &mut oh, t, t, dh);
            for i in 0..t {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
        }
        Ok(self.derived(
            vec![t, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Usage("embedding of empty id list".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Usage(format!("embedding id {id} out of range {vocab}")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.derived(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero parts".into()));
        };
        let cols = self.matrix_dims(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.derived(
            vec![rows, cols],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        Ok(self.derived(vec![len, c], out, Op::SliceRows { x, start }, &[x]))
    }

    /// Inverted dropout with an explicit keep mask (entries 0 or 1).
    pub fn dropout_with_mask(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::shape("dropout", self.shape(x), &[keep.len()]));
        }
        let s = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.derived(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.derived(vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    /// `mask[i] == true` means row `i` contributes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let tgt = targets[i];
            if tgt >= vocab {
                return Err(Error::Usage(format!("target {tgt} out of range {vocab}")));
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[tgt];
            for (p, x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / count as f64;
        Ok(self.derived(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar. Gradients accumulate into every reachable
    /// node that requires them. A second call without [`Graph::zero_grads`]
    /// is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Backward with `d loss = seed`; used to scale per-example losses inside
    /// a batch mean without an extra node.
    pub fn backward_with_seed(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already called on this graph; zero_grads first".into()));
        }
        if self.nodes[loss.0].tensor.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].tensor.accumulate_grad(&g).expect("grad shape");
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.requires_grad(v);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(*a) {
                    let bt = transpose(self.value(*b), k, n);
                    let mut ga = vec![0.0; m * k];
                    gemm(g, &bt, &mut ga, m, n, k);
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let at = transpose(self.value(*a), m, k);
                    let mut gb = vec![0.0; k * n];
                    gemm(&at, g, &mut gb, k, m, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (t, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[0];
                if rg(*x) {
                    let mut gx = vec![0.0; t * d_in];
                    gemm(g, self.value(*w), &mut gx, t, d_out, d_in);
                    accumulate(grads, *x, gx);
                }
                if rg(*w) {
                    let gt = transpose(g, t, d_out);
                    let mut gw = vec![0.0; d_out * d_in];
                    gemm(&gt, self.value(*x), &mut gw, d_out, t, d_in);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut gb = vec![0.0; d_out];
                        for row in g.chunks(d_out) {
                            add_assign(&mut gb, row);
                        }
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let ga = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let gb = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale { x, s } => {
                if rg(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Gelu { x } => {
                if rg(*x) {
                    let gx = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain);
                if rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            gx[r * d + c] = rs * (dh - m1 - hr[c] * m2);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if rg(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if rg(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        add_assign(&mut gb, gr);
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Softmax { x } => {
                if rg(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    let y = node.tensor.data();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            out[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0; self.value(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                    accumulate(grads, *table, gt);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if rg(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if rg(*x) {
                    let c = self.shape(*x)[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[start * c..start * c + g.len()].copy_from_slice(g);
                    accumulate(grads, *x, gx);
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::Mean { x } => {
                if rg(*x) {
                    let n = self.value(*x).len();
                    accumulate(grads, *x, vec![g[0] / n as f64; n]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if rg(*logits) {
                    let vocab = self.shape(*logits)[1];
                    let s = g[0] / *count as f64;
                    let mut gl = vec![0.0; probs.len()];
                    for (i, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for c in 0..vocab {
                            gl[i * vocab + c] = probs[i * vocab + c] * s;
                        }
                        gl[i * vocab + targets[i]] -= s;
                    }
                    accumulate(grads, *logits, gl);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (need_q, need_k, need_v) = (
            self.requires_grad(q),
            self.requires_grad(k),
            self.requires_grad(v),
        );
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut dp = vec![0.0; t * t];
        let mut tmp = vec![0.0; t * dh];
        for h in 0..heads {
            let p = &probs[h * t * t..(h + 1) * t * t];
            let go = head_slice(g, t, d, h, dh);
            if need_v {
                let pt = transpose(p, t, t);
                gemm(&pt, &go, &mut tmp, t, t, dh);
                scatter_head(&mut gv, &tmp, t, d, h, dh);
            }
            if !(need_q || need_k) {
                continue;
            }
            let vh_t = transpose(&head_slice(vv, t, d, h, dh), t, dh);
            gemm(&go, &vh_t, &mut dp, t, dh, t);
            // dS = P ⊙ (dP - rowsum(P ⊙ dP)), folded with the score scale.
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            if need_q {
                let kh = head_slice(kv, t, d, h, dh);
                gemm(&dp, &kh, &mut tmp, t, t, dh);
                scatter_head(&mut gq, &tmp, t, d, h, dh);
            }
            if need_k {
                let dst = transpose(&dp, t, t);
                let qh = head_slice(qv, t, d, h, dh);
                gemm(&dst, &qh, &mut tmp, t, t, dh);
                scatter_head(&mut gk, &tmp, t, d, h, dh);
            }
        }
        if need_q {
            accumulate(grads, q, gq);
        }
        if need_k {
            accumulate(grads, k, gk);
        }
        if need_v {
            accumulate(grads, v, gv);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => add_assign(buf, &g),
        slot @ None => *slot = Some(g),
    }
}

fn head_slice(x: &[f64], t: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for i in 0..t {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Rng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let out = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(out), g.value(b));
        let two = g.constant(t(&[1, 1], &[2.0]));
        let three = g.constant(t(&[1, 1], &[3.0]));
        let six = g.matmul(two, three).unwrap();
        assert_eq!(g.value(six), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let want = naive_matmul(a.data(), b.data(), 3, 4, 2);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let out = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(out).iter().zip(&want) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[7.5; 4]));
        let y = g.softmax(x);
        assert!(g.value(y).iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let x = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x);
        assert!((g.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y)[1] - 0.75).abs() < 1e-15);
        let x = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = g.softmax(x);
        assert!(g.tensor(y).all_finite());
        assert!((g.value(y)[0] - 1.0).abs() < 1e-15 && g.value(y)[1] < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gain = g.constant(t(&[4], &[1.0; 4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let gain = g.constant(t(&[2], &[1.0; 2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12 && (g.value(y)[1] + 1.0).abs() < 1e-12);
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn layer_norm_grad_check_random_4x8() {
        let mut rng = Rng::new(11);
        let gain = Tensor::randn(&[8], 1.0, &mut rng);
        let bias = Tensor::randn(&[8], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let (gn, bs, wv) = (g.constant(gain.clone()), g.constant(bias.clone()), g.constant(w.clone()));
                let y = g.layer_norm(x, gn, bs, 1e-5)?;
                let y = g.mul(y, wv)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "layer_norm grad err {err}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 16]));
        let loss = g.cross_entropy(l, &[3], &[true]).unwrap();
        assert!((g.scalar(loss) - 16f64.ln()).abs() < 1e-12);
        let mut hot = vec![0.0; 8];
        hot[2] = 30.0;
        let l = g.constant(t(&[1, 8], &hot));
        let loss = g.cross_entropy(l, &[2], &[true]).unwrap();
        assert!(g.scalar(loss) < 1e-9);
        let l = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.cross_entropy(l, &[0, 1], &[false, false]),
            Err(Error::EmptyLoss)
        ));
        assert!(g.cross_entropy(l, &[0, 9], &[true, true]).is_err());
    }

    #[test]
    fn cross_entropy_matches_per_position_oracle() {
        let mut rng = Rng::new(5);
        let logits = Tensor::randn(&[5, 8], 2.0, &mut rng);
        let targets = [1, 7, 0, 3, 3];
        let mask = [true, false, true, true, false];
        let mut total = 0.0;
        let mut n = 0.0;
        for i in 0..5 {
            if !mask[i] {
                continue;
            }
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[targets[i]].exp() / z).ln();
            n += 1.0;
        }
        let mut g = Graph::new();
        let l = g.param(logits);
        let loss = g.cross_entropy(l, &targets, &mask).unwrap();
        assert!((g.scalar(loss) - total / n).abs() < 1e-12);
        g.backward(loss).unwrap();
        let grad = g.grad(l).unwrap();
        assert!(grad[8..16].iter().all(|&v| v == 0.0), "masked row must get no gradient");
    }

    #[test]
    fn backward_simple_and_rejects_second_call() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[6.0][..]));
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
        g.zero_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
        let y = g.softmax(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let x = g.param(t(&[1, 2], &[1., 1.]));
        let y = g.linear(x, w, None).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x), Some(&[4.0, 6.0][..]));
    }

    fn check_unary(f: impl Fn(&mut Graph, Var) -> Result<Var>, shape: &[usize], seed: u64) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let w = Tensor::randn(&[64], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let y = f(g, x)?;
                let shape = g.shape(y).to_vec();
                let n = g.value(y).len();
                let wv = g.constant(Tensor::new(shape, w.data()[..n].to_vec())?);
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "grad error {err}");
    }

    #[test]
    fn primitives_pass_grad_check() {
        check_unary(|g, x| Ok(g.gelu(x)), &[3, 5], 1);
        check_unary(|g, x| Ok(g.softmax(x)), &[3, 5], 2);
        check_unary(|g, x| Ok(g.scale(x, -1.7)), &[2, 3], 3);
        check_unary(|g, x| g.mul(x, x), &[2, 3], 4);
        check_unary(|g, x| g.add(x, x), &[2, 3], 5);
        check_unary(|g, x| g.concat_rows(&[x, x]), &[2, 3], 6);
        check_unary(|g, x| g.slice_rows(x, 1, 2), &[4, 3], 7);
        check_unary(|g, x| Ok(g.mean(x)), &[4, 3], 8);
        check_unary(
            |g, x| {
                let w = g.constant(Tensor::randn(&[5, 4], 1.0, &mut Rng::new(77)));
                g.matmul(x, w)
            },
            &[3, 5],
            9,
        );
        check_unary(
            |g, x| {
                let w = g.constant(Tensor::randn(&[4, 3], 1.0, &mut Rng::new(78)));
                g.matmul(w, x)
            },
            &[3, 5],
            10,
        );
        check_unary(
            |g, x| {
                let w = g.constant(Tensor::randn(&[4, 5], 1.0, &mut Rng::new(79)));
                let b = g.constant(Tensor::randn(&[4], 1.0, &mut Rng::new(80)));
                g.linear(x, w, Some(b))
            },
            &[3, 5],
            11,
        );
        check_unary(
            |g, w| {
                let x = g.constant(Tensor::randn(&[3, 5], 1.0, &mut Rng::new(81)));
                g.linear(x, w, None)
            },
            &[4, 5],
            12,
        );
        check_unary(
            |g, table| g.embedding(table, &[2, 0, 2, 3]),
            &[4, 3],
            13,
        );
        check_unary(
            |g, x| g.dropout_with_mask(x, &[true, false, true, true, false, true], 0.25),
            &[2, 3],
            14,
        );
        check_unary(
            |g, x| g.cross_entropy(x, &[1, 4, 0], &[true, true, false]),
            &[3, 5],
            15,
        );
    }

    #[test]
    fn attention_passes_grad_check_in_each_input() {
        for causal in [true, false] {
            for which in 0..3 {
                let mut rng = Rng::new(20 + which as u64);
                let others = [
                    Tensor::randn(&[5, 4], 1.0, &mut rng),
                    Tensor::randn(&[5, 4], 1.0, &mut rng),
                    Tensor::randn(&[5, 4], 1.0, &mut rng),
                ];
                let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
                let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
                let err = grad_check(
                    |g, x| {
                        let mut vs = [
                            g.constant(others[0].clone()),
                            g.constant(others[1].clone()),
                            g.constant(others[2].clone()),
                        ];
                        vs[which] = x;
                        let y = g.attention(vs[0], vs[1], vs[2], 2, causal)?;
                        let wv = g.constant(w.clone());
                        let p = g.mul(y, wv)?;
                        Ok(g.sum(p))
                    },
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "attention input {which} causal {causal}: {err}");
            }
        }
    }

    #[test]
    fn causal_attention_rows_are_stochastic_and_lower_triangular() {
        let mut rng = Rng::new(1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let v = g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng));
        let y = g.attention(q, k, v, 2, true).unwrap();
        let (heads, p) = g.attention_probs(y).unwrap();
        assert_eq!(heads, 2);
        for h in 0..2 {
            for i in 0..6 {
                let row = &p[h * 36 + i * 6..h * 36 + i * 6 + 6];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
}
