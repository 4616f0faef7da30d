//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output and whatever it needs for the backward pass, and
//! returns a [`Var`] handle. [`Graph::backward`] walks the tape once in
//! reverse order.
//!
//! Only nodes that (transitively) depend on a leaf created with
//! `requires_grad = true` receive gradients; everything else is treated
//! as a constant and skipped during the reverse sweep.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    GatherMax(Var, Vec<usize>),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-wise log-softmax of a `[rows, cols]` buffer.
pub fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_rows(logits, logits.len())
        .into_iter()
        .map(f64::exp)
        .collect()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims {:?} x {:?}", av.shape, bv.shape);
        let out = crate::tensor::matmul(&av.data, &bv.data, m, k, n);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[n]` bias to every row of `[m, n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias width");
        let mut out = xv.clone();
        for row in out.data.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bv.data) {
                *o += *bb;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise {:?} vs {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape.clone();
        self.push(Tensor::new(shape, data), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = Tensor::new(xv.shape.clone(), xv.data.iter().map(|v| f(*v)).collect());
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// Element-wise product with a constant buffer (dropout masks, targets).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), c.len());
        let data = xv.data.iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xv.shape.clone(), data);
        self.push(value, Op::MulConst(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let c = xv.cols();
        assert_eq!(g.len(), c, "layer norm width");
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = &xv.data[r * c..(r + 1) * c];
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (src[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data[j] + b.data[j];
            }
        }
        let value = Tensor::new(xv.shape.clone(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [n, D]`, `k, v: [m, D]`; heads split `D` into contiguous column
    /// blocks. Returns `[n, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (n, d, m) = (qv.rows(), qv.cols(), kv.rows());
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.cols(), d, "attention value width");
        assert_eq!(vv.rows(), m, "attention key/value count");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let di = d as isize;
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            // scores = Q_h K_h^T
            gemm(
                n,
                dh,
                m,
                (&qv.data[h * dh..], di, 1),
                (&kv.data[h * dh..], 1, di),
                (p, m as isize, 1),
                0.0,
            );
            for row in p.chunks_mut(m) {
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s * scale - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            gemm(
                n,
                m,
                dh,
                (p, m as isize, 1),
                (&vv.data[h * dh..], di, 1),
                (&mut out[h * dh..], di, 1),
                0.0,
            );
        }
        let value = Tensor::new(vec![n, d], out);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities of an attention node, `[heads, n, m]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        assert!(start + width <= c, "slice_cols out of range");
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.data[r * c + start..r * c + start + width]);
        }
        self.push(Tensor::new(vec![rows, width], out), Op::SliceCols(x, start), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), c, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        self.push(
            Tensor::new(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), c], data),
            Op::GatherRows(x, idx.to_vec()),
            &[x],
        )
    }

    /// Column-wise max over consecutive groups of `group` rows.
    /// Ties resolve to the earliest row.
    pub fn segment_max(&mut self, x: Var, group: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, c) = (xv.rows(), xv.cols());
        assert!(group > 0 && rows % group == 0, "segment_max: {rows} rows, group {group}");
        let segs = rows / group;
        let mut out = vec![f64::NEG_INFINITY; segs * c];
        let mut arg = vec![0usize; segs * c];
        for s in 0..segs {
            for r in s * group..(s + 1) * group {
                let src = &xv.data[r * c..(r + 1) * c];
                for j in 0..c {
                    if src[j] > out[s * c + j] {
                        out[s * c + j] = src[j];
                        arg[s * c + j] = r;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![segs, c], out), Op::SegmentMax(x, arg), &[x])
    }

    /// Column-wise max over gathered rows: output row `o` is the max of
    /// rows `idx[o * group .. (o + 1) * group]`. Equivalent to
    /// `segment_max(gather_rows(x, idx), group)` without the intermediate.
    pub fn gather_max(&mut self, x: Var, idx: &[usize], group: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        assert!(group > 0 && idx.len() % group == 0, "gather_max: {} indices, group {group}", idx.len());
        let segs = idx.len() / group;
        let mut out = vec![f64::NEG_INFINITY; segs * c];
        let mut arg = vec![0usize; segs * c];
        for (s, chunk) in idx.chunks(group).enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            let am = &mut arg[s * c..(s + 1) * c];
            for &r in chunk {
                let src = &xv.data[r * c..(r + 1) * c];
                for j in 0..c {
                    if src[j] > dst[j] {
                        dst[j] = src[j];
                        am[j] = r;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![segs, c], out), Op::GatherMax(x, arg), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = log_softmax_rows(&xv.data, xv.cols());
        let value = Tensor::new(xv.shape.clone(), out);
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.data.iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Euclidean norm of every row: `[m, c] -> [m]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv
            .data
            .chunks(xv.cols())
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect::<Vec<_>>();
        self.push(Tensor::vector(out), Op::RowNorm(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[x.0].value.clone().reshaped(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    // dA = dY · B^T
                    let g = slot(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        (gy, n as isize, 1),
                        (&bv.data, 1, n as isize),
                        (g, k as isize, 1),
                        1.0,
                    );
                }
                if self.wants(*b) {
                    // dB = A^T · dY
                    let g = slot(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        (&av.data, 1, k as isize),
                        (gy, n as isize, 1),
                        (g, n as isize, 1),
                        1.0,
                    );
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, gy);
                }
                if self.wants(*b) {
                    let n = y.cols();
                    let g = slot(grads, *b, n);
                    for row in gy.chunks(n) {
                        for (gg, r) in g.iter_mut().zip(row) {
                            *gg += *r;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gy);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy);
                }
                if self.wants(*b) {
                    let g = slot(grads, *b, gy.len());
                    for (gg, d) in g.iter_mut().zip(gy) {
                        *gg -= *d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.wants(*a) {
                    let g = slot(grads, *a, gy.len());
                    for ((gg, d), bb) in g.iter_mut().zip(gy).zip(&bv.data) {
                        *gg += d * bb;
                    }
                }
                if self.wants(*b) {
                    let g = slot(grads, *b, gy.len());
                    for ((gg, d), aa) in g.iter_mut().zip(gy).zip(&av.data) {
                        *gg += d * aa;
                    }
                }
            }
            Op::Scale(x, s) => {
                let g = slot(grads, *x, gy.len());
                for (gg, d) in g.iter_mut().zip(gy) {
                    *gg += d * s;
                }
            }
            Op::MulConst(x, c) => {
                let g = slot(grads, *x, gy.len());
                for ((gg, d), cc) in g.iter_mut().zip(gy).zip(c) {
                    *gg += d * cc;
                }
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                let g = slot(grads, *x, gy.len());
                for ((gg, d), xx) in g.iter_mut().zip(gy).zip(&xv.data) {
                    *gg += d * gelu_grad(*xx);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[x.0].value;
                let g = slot(grads, *x, gy.len());
                for ((gg, d), xx) in g.iter_mut().zip(gy).zip(&xv.data) {
                    *gg += if *xx > 0.0 { *d } else { d * slope };
                }
            }
            Op::Exp(x) => {
                let g = slot(grads, *x, gy.len());
                for ((gg, d), yy) in g.iter_mut().zip(gy).zip(&y.data) {
                    *gg += d * yy;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = y.cols();
                let gv = &self.nodes[gamma.0].value;
                if self.wants(*gamma) {
                    let g = slot(grads, *gamma, c);
                    for (row_g, row_h) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = slot(grads, *beta, c);
                    for row_g in gy.chunks(c) {
                        for j in 0..c {
                            g[j] += row_g[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let g = slot(grads, *x, gy.len());
                    let mut dh = vec![0.0; c];
                    for (r, s) in rstd.iter().enumerate() {
                        let row_g = &gy[r * c..(r + 1) * c];
                        let row_h = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for j in 0..c {
                            dh[j] = row_g[j] * gv.data[j];
                            mean_dh += dh[j];
                            mean_dhh += dh[j] * row_h[j];
                        }
                        mean_dh /= c as f64;
                        mean_dhh /= c as f64;
                        for j in 0..c {
                            g[r * c + j] += s * (dh[j] - mean_dh - row_h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gy, grads),
            Op::SliceCols(x, start) => {
                let xv = &self.nodes[x.0].value;
                let (c, w) = (xv.cols(), y.cols());
                let g = slot(grads, *x, xv.len());
                for (r, row) in gy.chunks(w).enumerate() {
                    for (j, d) in row.iter().enumerate() {
                        g[r * c + start + j] += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.wants(*p) {
                        accumulate(grads, *p, &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let xv = &self.nodes[x.0].value;
                let c = xv.cols();
                let g = slot(grads, *x, xv.len());
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        g[src * c + j] += gy[o * c + j];
                    }
                }
            }
            Op::SegmentMax(x, arg) => {
                let xv = &self.nodes[x.0].value;
                let c = xv.cols();
                let g = slot(grads, *x, xv.len());
                for (o, &r) in arg.iter().enumerate() {
                    g[r * c + o % c] += gy[o];
                }
            }
            Op::GatherMax(x, arg) => {
                let xv = &self.nodes[x.0].value;
                let c = xv.cols();
                let g = slot(grads, *x, xv.len());
                for (o, &r) in arg.iter().enumerate() {
                    g[r * c + o % c] += gy[o];
                }
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let g = slot(grads, *x, gy.len());
                for ((grow, dyrow), yrow) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.data.chunks(c)) {
                    let s: f64 = dyrow.iter().sum();
                    for j in 0..c {
                        grow[j] += dyrow[j] - yrow[j].exp() * s;
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                let g = slot(grads, *x, len);
                for gg in g.iter_mut() {
                    *gg += gy[0];
                }
            }
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                let g = slot(grads, *x, len);
                let d = gy[0] / len as f64;
                for gg in g.iter_mut() {
                    *gg += d;
                }
            }
            Op::RowNorm(x) => {
                let xv = &self.nodes[x.0].value;
                let c = xv.cols();
                let g = slot(grads, *x, xv.len());
                for (r, (&norm, d)) in y.data.iter().zip(gy).enumerate() {
                    if norm > 0.0 {
                        for j in 0..c {
                            g[r * c + j] += d * xv.data[r * c + j] / norm;
                        }
                    }
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, gy),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (n, d, m) = (qv.rows(), qv.cols(), kv.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let di = d as isize;
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            // dV_h = P^T dO_h
            gemm(
                m,
                n,
                dh,
                (p, 1, m as isize),
                (&gy[h * dh..], di, 1),
                (&mut dv[h * dh..], di, 1),
                0.0,
            );
            // dP = dO_h V_h^T
            gemm(
                n,
                dh,
                m,
                (&gy[h * dh..], di, 1),
                (&vv.data[h * dh..], 1, di),
                (&mut dp, m as isize, 1),
                0.0,
            );
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
            for (prow, dprow) in p.chunks(m).zip(dp.chunks_mut(m)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (ds, pp) in dprow.iter_mut().zip(prow) {
                    *ds = pp * (*ds - dot) * scale;
                }
            }
            gemm(
                n,
                m,
                dh,
                (&dp, m as isize, 1),
                (&kv.data[h * dh..], di, 1),
                (&mut dq[h * dh..], di, 1),
                0.0,
            );
            gemm(
                m,
                n,
                dh,
                (&dp, 1, m as isize),
                (&qv.data[h * dh..], di, 1),
                (&mut dk[h * dh..], di, 1),
                0.0,
            );
        }
        if self.wants(q) {
            accumulate(grads, q, &dq);
        }
        if self.wants(k) {
            accumulate(grads, k, &dk);
        }
        if self.wants(v) {
            accumulate(grads, v, &dv);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(inputs) of `build` against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (idx, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).expect("missing grad").to_vec();
            for e in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == idx {
                                t.data[e] += delta;
                            }
                            g.leaf(t, true)
                        })
                        .collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let diff = (fd - analytic[e]).abs();
                let err = diff / fd.abs().max(analytic[e].abs()).max(1e-6);
                assert!(err < 1e-5 || diff < 1e-9, "input {idx} elem {e}: fd {fd} vs analytic {}", analytic[e]);
            }
        }
    }

    #[test]
    fn matmul_bias_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[5])],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let y = g.gelu(y);
                let y = g.mul(y, y);
                g.sum(y)
            },
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[6]), random(&mut rng, &[3, 6])],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6);
                let y = g.mul(y, v[3]);
                g.sum(y)
            },
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![
                random(&mut rng, &[3, 4]),
                random(&mut rng, &[5, 4]),
                random(&mut rng, &[5, 4]),
                random(&mut rng, &[3, 4]),
            ],
            |g, v| {
                let y = g.attention(v[0], v[1], v[2], 2);
                let y = g.mul(y, v[3]);
                g.sum(y)
            },
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&mut rng, &[6, 3]), random(&mut rng, &[2, 3])], |g, v| {
            let a = g.gather_rows(v[0], &[5, 0, 0, 2]);
            let b = g.concat_rows(&[a, v[1]]);
            let c = g.segment_max(b, 3);
            let d = g.slice_cols(b, 1, 2);
            let e = g.row_norm(d);
            let f = g.leaky_relu(c, 0.2);
            let r = g.reshape(f, vec![1, 6]);
            let l = g.log_softmax(r);
            let l = g.exp(l);
            let s1 = g.sum(l);
            let s2 = g.mean(e);
            let s2 = g.scale(s2, 3.0);
            let s = g.sub(s1, s2);
            let t = g.mul_const(s, vec![0.5]);
            g.add(t, s2)
        });
    }

    #[test]
    fn gather_max_matches_unfused_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[5, 4]);
        let idx = [4, 1, 1, 0, 3, 2];
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let fused = g.gather_max(v, &idx, 3);
        let gathered = g.gather_rows(v, &idx);
        let plain = g.segment_max(gathered, 3);
        assert_eq!(g.value(fused), g.value(plain));
        check(vec![x], |g, v| {
            let m = g.gather_max(v[0], &idx, 2);
            let m = g.mul(m, m);
            g.sum(m)
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let q = g.constant(random(&mut rng, &[4, 8]));
        let k = g.constant(random(&mut rng, &[6, 8]));
        let out = g.attention(q, k, k, 2);
        let p = g.attention_probs(out).unwrap();
        for row in p.chunks(6) {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true);
        let c = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let y = g.matmul(a, c);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }
}
