//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns an arena of tensors. Forward ops append nodes (values plus
//! the recipe that produced them) and return [`TensorId`] handles, so the
//! arena is topologically ordered by construction. [`Tape::backward`] seeds
//! the loss gradient with 1 and sweeps the nodes once in reverse, applying
//! each op's hand-derived vector-Jacobian product.
//!
//! Design notes:
//!
//! * Tensors are flat row-major `Vec<S>` buffers; `S` is `f32` or `f64` (see
//!   [`crate::scalar::Scalar`]).
//! * A tape lives for exactly one forward/backward pass. Model parameters
//!   live outside as [`Tensor`]s and are copied in as leaves each step.
//! * Everything is sequential and the accumulation order is fixed, so a
//!   backward pass is bit-for-bit reproducible.
//! * Broadcasting is deliberately minimal: elementwise ops accept equal
//!   shapes, a scalar on the right, or a trailing-axis row vector on the
//!   right. That is all the model needs, and it keeps the reduction in the
//!   backward pass easy to audit.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

// ── plain tensors ────────────────────────────────────────────────────────

/// A dense row-major tensor. Outside a tape this is just data; inside, the
/// tape tracks values and gradients per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::ZERO; numel] }
    }

    pub fn scalar(x: S) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug,Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

// ── recorded operations ──────────────────────────────────────────────────

/// How the right-hand operand of an elementwise op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Align {
    Same,
    /// Right operand is a single scalar.
    Scalar,
    /// Right operand is a vector matching the trailing axis of the left.
    Row,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add { a: TensorId, b: TensorId, align: Align },
    Sub { a: TensorId, b: TensorId, align: Align },
    Mul { a: TensorId, b: TensorId, align: Align },
    Neg { a: TensorId },
    Scale { a: TensorId, c: S },
    AddScalar { a: TensorId },
    Exp { a: TensorId },
    Clamp { a: TensorId, lo: S, hi: S },
    Minimum { a: TensorId, b: TensorId },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// `a [m,k] @ b[n,k]^T -> [m,n]`; the natural layout for tied embeddings.
    MatmulNT { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// Row lookup: `table [v,d]` indexed by `ids` -> `[len,d]`.
    Gather { table: TensorId, ids: Vec<u32>, d: usize },
    /// Per-row element pick: `x [n,v]` -> `[n]`, out[i] = x[i, idx[i]].
    RowGather { x: TensorId, idx: Vec<u32>, v: usize },
    /// Row subset: `x [n,v]` -> `[m,v]` for m index rows.
    TakeRows { x: TensorId, idx: Vec<u32>, v: usize },
    /// Per-row column subset: `x [n,v]`, `idx [n,k]` -> `[n,k]`.
    ColsGather { x: TensorId, idx: Vec<u32>, v: usize, k: usize },
    Softmax { x: TensorId, v: usize },
    LogSoftmax { x: TensorId, v: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, d: usize, mean: Vec<S>, rstd: Vec<S> },
    Gelu { a: TensorId },
    /// Fused multi-head causal attention over one sequence.
    /// q,k,v are `[t, heads*dh]`; saves the post-softmax probabilities.
    CausalAttention { q: TensorId, k: TensorId, v: TensorId, heads: usize, dh: usize, probs: Vec<S> },
    /// Mean of `-log softmax(logits)[i, target_i]` over rows whose target is
    /// not the ignore sentinel.
    CrossEntropy { logits: TensorId, targets: Vec<u32>, v: usize, counted: usize },
    /// Sum over rows of KL(target_row || softmax(logits_row)). Targets are
    /// plain probabilities, not tape nodes; gradient flows to logits only.
    KlSum { logits: TensorId, targets: Vec<S>, v: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId, n: usize },
    /// Sum of same-shaped tensors (used to fold per-sequence losses).
    AddN { parts: Vec<TensorId> },
}

struct Node<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

// ── the tape ─────────────────────────────────────────────────────────────

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.node(id).values
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if the node
    /// participates in differentiation.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.node(id).grad.as_deref()
    }

    fn requires(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    // ── leaves ───────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), requires_grad, Op::Leaf)
    }

    pub fn leaf_owned(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn align_of(&self, kernel: &str, a: TensorId, b: TensorId) -> Result<Align> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa == sb {
            Ok(Align::Same)
        } else if self.node(b).values.len() == 1 {
            Ok(Align::Scalar)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Align::Row)
        } else {
            Err(Error::shape(kernel, format!("cannot align {:?} with {:?}", sa, sb)))
        }
    }

    fn ew_forward(&self, a: TensorId, b: TensorId, align: Align, f: impl Fn(S, S) -> S) -> Vec<S> {
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        match align {
            Align::Same => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Align::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Align::Row => {
                let n = bv.len();
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
            }
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let align = self.align_of("add", a, b)?;
        let values = self.ew_forward(a, b, align, |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.node(a).shape.clone(), values, req, Op::Add { a, b, align }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let align = self.align_of("sub", a, b)?;
        let values = self.ew_forward(a, b, align, |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.node(a).shape.clone(), values, req, Op::Sub { a, b, align }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let align = self.align_of("mul", a, b)?;
        let values = self.ew_forward(a, b, align, |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.node(a).shape.clone(), values, req, Op::Mul { a, b, align }))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let values = self.node(a).values.iter().map(|&x| -x).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), values, req, Op::Neg { a })
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let values = self.node(a).values.iter().map(|&x| x * c).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), values, req, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: S) -> TensorId {
        let values = self.node(a).values.iter().map(|&x| x + c).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), values, req, Op::AddScalar { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let values = self.node(a).values.iter().map(|&x| x.exp()).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), values, req, Op::Exp { a })
    }

    pub fn clamp(&mut self, a: TensorId, lo: S, hi: S) -> TensorId {
        let values = self.node(a).values.iter().map(|&x| x.max(lo).min(hi)).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), values, req, Op::Clamp { a, lo, hi })
    }

    /// Elementwise minimum. Gradient routes to the smaller operand; exact
    /// ties route to `a`, so `minimum(x, x)` behaves like the identity on `a`.
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(
                "minimum",
                format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            ));
        }
        let values = self
            .node(a)
            .values
            .iter()
            .zip(self.node(b).values.iter())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.node(a).shape.clone(), values, req, Op::Minimum { a, b }))
    }

    // ── gelu ─────────────────────────────────────────────────────────────

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let values = self.node(a).values.iter().map(|&x| gelu_fwd(x)).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), values, req, Op::Gelu { a })
    }

    // ── matmul family ────────────────────────────────────────────────────

    fn mat_dims(&self, kernel: &str, id: TensorId) -> Result<(usize, usize)> {
        let sh = &self.node(id).shape;
        if sh.len() != 2 {
            return Err(Error::shape(kernel, format!("expected rank-2 tensor, got {:?}", sh)));
        }
        Ok((sh[0], sh[1]))
    }

    /// `a [m,k] @ b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.mat_dims("matmul", a)?;
        let (kb, n) = self.mat_dims("matmul", b)?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("[{},{}] @ [{},{}]", m, ka, kb, n)));
        }
        let out = mm(&self.node(a).values, &self.node(b).values, m, ka, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, req, Op::Matmul { a, b, m, k: ka, n }))
    }

    /// `a [m,k] @ b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.mat_dims("matmul_nt", a)?;
        let (n, kb) = self.mat_dims("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::shape("matmul_nt", format!("[{},{}] @ [{},{}]^T", m, ka, n, kb)));
        }
        let out = mm_nt(&self.node(a).values, &self.node(b).values, m, ka, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, req, Op::MatmulNT { a, b, m, k: ka, n }))
    }

    // ── gathers ──────────────────────────────────────────────────────────

    /// Embedding lookup: rows of `table [v,d]` selected by `ids`.
    pub fn gather(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let (v, d) = self.mat_dims("gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::shape("gather", format!("id {} out of range for table [{},{}]", bad, v, d)));
        }
        let tv = &self.node(table).values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        let req = self.requires(table);
        Ok(self.push(vec![ids.len(), d], out, req, Op::Gather { table, ids: ids.to_vec(), d }))
    }

    /// out[i] = x[i, idx[i]] for `x [n,v]`.
    pub fn row_gather(&mut self, x: TensorId, idx: &[u32]) -> Result<TensorId> {
        let (n, v) = self.mat_dims("row_gather", x)?;
        if idx.len() != n {
            return Err(Error::shape("row_gather", format!("{} rows, {} indices", n, idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= v) {
            return Err(Error::shape("row_gather", format!("index {} out of range for {} columns", bad, v)));
        }
        let xv = &self.node(x).values;
        let out: Vec<S> = idx.iter().enumerate().map(|(i, &j)| xv[i * v + j as usize]).collect();
        let req = self.requires(x);
        Ok(self.push(vec![n], out, req, Op::RowGather { x, idx: idx.to_vec(), v }))
    }

    /// Select whole rows of `x [n,v]`.
    pub fn take_rows(&mut self, x: TensorId, idx: &[u32]) -> Result<TensorId> {
        let (n, v) = self.mat_dims("take_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
            return Err(Error::shape("take_rows", format!("row {} out of range for {} rows", bad, n)));
        }
        let xv = &self.node(x).values;
        let mut out = Vec::with_capacity(idx.len() * v);
        for &i in idx {
            out.extend_from_slice(&xv[i as usize * v..(i as usize + 1) * v]);
        }
        let req = self.requires(x);
        Ok(self.push(vec![idx.len(), v], out, req, Op::TakeRows { x, idx: idx.to_vec(), v }))
    }

    /// out[i,j] = x[i, idx[i*k + j]] for `x [n,v]`, `idx` flattened `[n,k]`.
    pub fn cols_gather(&mut self, x: TensorId, idx: &[u32], k: usize) -> Result<TensorId> {
        let (n, v) = self.mat_dims("cols_gather", x)?;
        if idx.len() != n * k {
            return Err(Error::shape("cols_gather", format!("{} indices for [{},{}]", idx.len(), n, k)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= v) {
            return Err(Error::shape("cols_gather", format!("index {} out of range for {} columns", bad, v)));
        }
        let xv = &self.node(x).values;
        let out: Vec<S> = idx
            .iter()
            .enumerate()
            .map(|(flat, &j)| xv[(flat / k) * v + j as usize])
            .collect();
        let req = self.requires(x);
        Ok(self.push(vec![n, k], out, req, Op::ColsGather { x, idx: idx.to_vec(), v, k }))
    }

    // ── row-wise nonlinearities ──────────────────────────────────────────

    /// Softmax over the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.node(x).shape.clone();
        let v = *sh.last().ok_or_else(|| Error::shape("softmax", "rank-0 input".to_string()))?;
        let mut out = self.node(x).values.clone();
        for row in out.chunks_mut(v) {
            softmax_row_in_place(row);
        }
        let req = self.requires(x);
        Ok(self.push(sh, out, req, Op::Softmax { x, v }))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let sh = self.node(x).shape.clone();
        let v = *sh.last().ok_or_else(|| Error::shape("log_softmax", "rank-0 input".to_string()))?;
        let mut out = self.node(x).values.clone();
        for row in out.chunks_mut(v) {
            log_softmax_row_in_place(row);
        }
        let req = self.requires(x);
        Ok(self.push(sh, out, req, Op::LogSoftmax { x, v }))
    }

    /// Layer normalization over the trailing axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: S) -> Result<TensorId> {
        let sh = self.node(x).shape.clone();
        let d = *sh.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input".to_string()))?;
        if self.node(gamma).values.len() != d || self.node(beta).values.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma/beta of {}/{} elements for trailing axis {}",
                    self.node(gamma).values.len(),
                    self.node(beta).values.len(),
                    d
                ),
            ));
        }
        let rows = self.node(x).values.len() / d;
        let mut out = vec![S::ZERO; rows * d];
        let mut means = vec![S::ZERO; rows];
        let mut rstds = vec![S::ZERO; rows];
        {
            let xv = &self.node(x).values;
            let gv = &self.node(gamma).values;
            let bv = &self.node(beta).values;
            let inv_d = S::ONE / s::<S>(d as f64);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<S>() * inv_d;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_d;
                let rstd = S::ONE / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(sh, out, req, Op::LayerNorm { x, gamma, beta, d, mean: means, rstd: rstds }))
    }

    // ── attention ────────────────────────────────────────────────────────

    /// Multi-head causal scaled dot-product attention over one sequence.
    /// `q`, `k`, `v` are `[t, heads*dh]`; position i attends to 0..=i.
    pub fn causal_attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> Result<TensorId> {
        let (t, d) = self.mat_dims("causal_attention", q)?;
        for (name, id) in [("k", k), ("v", v)] {
            let (tt, dd) = self.mat_dims("causal_attention", id)?;
            if (tt, dd) != (t, d) {
                return Err(Error::shape(
                    "causal_attention",
                    format!("q is [{},{}] but {} is [{},{}]", t, d, name, tt, dd),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("causal_attention", format!("{} heads do not divide width {}", heads, d)));
        }
        let dh = d / heads;
        let scale = S::ONE / s::<S>((dh as f64).sqrt());

        let qv = &self.node(q).values;
        let kv = &self.node(k).values;
        let vv = &self.node(v).values;
        // probs stored per head: probs[h*t*t + i*t + j], zero above the diagonal.
        let mut probs = vec![S::ZERO; heads * t * t];
        let mut out = vec![S::ZERO; t * d];
        let mut row = vec![S::ZERO; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let mut dot = S::ZERO;
                    for c in 0..dh {
                        dot += qi[c] * kj[c];
                    }
                    row[j] = dot * scale;
                }
                softmax_row_in_place(&mut row[..=i]);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = row[j];
                    probs[h * t * t + i * t + j] = p;
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        orow[c] += p * vj[c];
                    }
                }
            }
        }
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(vec![t, d], out, req, Op::CausalAttention { q, k, v, heads, dh, probs }))
    }

    // ── losses ───────────────────────────────────────────────────────────

    /// Mean of `-log softmax(logits)[i, targets[i]]` over rows whose target
    /// is not [`IGNORE_TARGET`]. Errors if every row is ignored.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let (n, v) = self.mat_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} rows, {} targets", n, targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_TARGET && t as usize >= v) {
            return Err(Error::shape("cross_entropy", format!("target {} out of range for {} classes", bad, v)));
        }
        let counted = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
        if counted == 0 {
            return Err(Error::shape("cross_entropy", "all targets ignored".to_string()));
        }
        let xv = &self.node(logits).values;
        let mut total = S::ZERO;
        let mut row = vec![S::ZERO; v];
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            row.copy_from_slice(&xv[i * v..(i + 1) * v]);
            log_softmax_row_in_place(&mut row);
            total -= row[t as usize];
        }
        let mean = total / s::<S>(counted as f64);
        let req = self.requires(logits);
        Ok(self.push(vec![1], vec![mean], req, Op::CrossEntropy { logits, targets: targets.to_vec(), v, counted }))
    }

    /// Sum over rows of `KL(target_row || softmax(logits_row))`, with the
    /// convention `0 ln 0 = 0`. Each target row should sum to 1; gradient
    /// flows to `logits` only.
    pub fn kl_sum(&mut self, targets: &Tensor<S>, logits: TensorId) -> Result<TensorId> {
        let (n, v) = self.mat_dims("kl_sum", logits)?;
        if targets.shape != [n, v] {
            return Err(Error::shape("kl_sum", format!("targets {:?} vs logits [{},{}]", targets.shape, n, v)));
        }
        let xv = &self.node(logits).values;
        let mut total = S::ZERO;
        let mut row = vec![S::ZERO; v];
        for i in 0..n {
            row.copy_from_slice(&xv[i * v..(i + 1) * v]);
            log_softmax_row_in_place(&mut row);
            for j in 0..v {
                let t = targets.data[i * v + j];
                if t > S::ZERO {
                    total += t * (t.ln() - row[j]);
                }
            }
        }
        let req = self.requires(logits);
        Ok(self.push(vec![1], vec![total], req, Op::KlSum { logits, targets: targets.data.clone(), v }))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total = self.node(a).values.iter().copied().sum::<S>();
        let req = self.requires(a);
        self.push(vec![1], vec![total], req, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.node(a).values.len();
        let total = self.node(a).values.iter().copied().sum::<S>() / s::<S>(n as f64);
        let req = self.requires(a);
        self.push(vec![1], vec![total], req, Op::MeanAll { a, n })
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = *parts.first().ok_or_else(|| Error::shape("add_n", "empty part list".to_string()))?;
        let sh = self.node(first).shape.clone();
        for &p in parts {
            if self.node(p).shape != sh {
                return Err(Error::shape("add_n", format!("{:?} vs {:?}", self.node(p).shape, sh)));
            }
        }
        let mut values = self.node(first).values.clone();
        for &p in &parts[1..] {
            for (o, &x) in values.iter_mut().zip(self.node(p).values.iter()) {
                *o += x;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(sh, values, req, Op::AddN { parts: parts.to_vec() }))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all participating
    /// nodes become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).values.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.node(loss).shape.clone() });
        }
        // Allocate gradient buffers for every node that participates.
        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![S::ZERO; node.values.len()]);
            } else {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = S::ONE;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Take this node's grad out so we can mutate input grads freely.
            let go = self.nodes[i].grad.take().unwrap();
            self.backprop_node(i, &go);
            self.nodes[i].grad = Some(go);
        }
        Ok(())
    }

    /// Accumulate `go` (gradient of the loss w.r.t. node `i`) into the
    /// gradients of node `i`'s inputs.
    fn backprop_node(&mut self, i: usize, go: &[S]) {
        // Helper: add `src` into the grad buffer of `id` if it participates.
        macro_rules! acc {
            ($id:expr, $f:expr) => {
                if self.nodes[$id.0].requires_grad {
                    let mut g = self.nodes[$id.0].grad.take().unwrap();
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(&mut g);
                    self.nodes[$id.0].grad = Some(g);
                }
            };
        }

        // Clone-free access to input values requires split borrows; indices
        // into `self.nodes` never alias because the tape is append-only and
        // op inputs strictly precede node `i`.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add { a, b, align } => {
                acc!(a, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(go) { *gi += x; });
                acc!(b, |g: &mut Vec<S>| reduce_accumulate(g, go, align, S::ONE));
            }
            &Op::Sub { a, b, align } => {
                acc!(a, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(go) { *gi += x; });
                acc!(b, |g: &mut Vec<S>| reduce_accumulate(g, go, align, -S::ONE));
            }
            &Op::Mul { a, b, align } => {
                let av = std::mem::take(&mut self.nodes[a.0].values);
                let bv = std::mem::take(&mut self.nodes[b.0].values);
                acc!(a, |g: &mut Vec<S>| {
                    match align {
                        Align::Same => for ((gi, &x), &y) in g.iter_mut().zip(go).zip(bv.iter()) { *gi += x * y; },
                        Align::Scalar => for (gi, &x) in g.iter_mut().zip(go) { *gi += x * bv[0]; },
                        Align::Row => {
                            let n = bv.len();
                            for (ix, (gi, &x)) in g.iter_mut().zip(go).enumerate() { *gi += x * bv[ix % n]; }
                        }
                    }
                });
                acc!(b, |g: &mut Vec<S>| {
                    match align {
                        Align::Same => for ((gi, &x), &y) in g.iter_mut().zip(go).zip(av.iter()) { *gi += x * y; },
                        Align::Scalar => g[0] += go.iter().zip(av.iter()).map(|(&x, &y)| x * y).sum::<S>(),
                        Align::Row => {
                            let n = g.len();
                            for (ix, &x) in go.iter().enumerate() { g[ix % n] += x * av[ix]; }
                        }
                    }
                });
                self.nodes[a.0].values = av;
                self.nodes[b.0].values = bv;
            }
            &Op::Neg { a } => {
                acc!(a, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(go) { *gi -= x; });
            }
            &Op::Scale { a, c } => {
                acc!(a, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(go) { *gi += x * c; });
            }
            &Op::AddScalar { a } => {
                acc!(a, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(go) { *gi += x; });
            }
            &Op::Exp { a } => {
                let out = std::mem::take(&mut self.nodes[i].values);
                acc!(a, |g: &mut Vec<S>| for ((gi, &x), &y) in g.iter_mut().zip(go).zip(out.iter()) { *gi += x * y; });
                self.nodes[i].values = out;
            }
            &Op::Clamp { a, lo, hi } => {
                let av = std::mem::take(&mut self.nodes[a.0].values);
                acc!(a, |g: &mut Vec<S>| {
                    for ((gi, &x), &xin) in g.iter_mut().zip(go).zip(av.iter()) {
                        if xin >= lo && xin <= hi {
                            *gi += x;
                        }
                    }
                });
                self.nodes[a.0].values = av;
            }
            &Op::Minimum { a, b } => {
                let av = std::mem::take(&mut self.nodes[a.0].values);
                let bv = std::mem::take(&mut self.nodes[b.0].values);
                acc!(a, |g: &mut Vec<S>| {
                    for (ix, (gi, &x)) in g.iter_mut().zip(go).enumerate() {
                        if av[ix] <= bv[ix] {
                            *gi += x;
                        }
                    }
                });
                acc!(b, |g: &mut Vec<S>| {
                    for (ix, (gi, &x)) in g.iter_mut().zip(go).enumerate() {
                        if !(av[ix] <= bv[ix]) {
                            *gi += x;
                        }
                    }
                });
                self.nodes[a.0].values = av;
                self.nodes[b.0].values = bv;
            }
            &Op::Matmul { a, b, m, k, n } => {
                let av = std::mem::take(&mut self.nodes[a.0].values);
                let bv = std::mem::take(&mut self.nodes[b.0].values);
                acc!(a, |g: &mut Vec<S>| mm_nt_acc(go, &bv, m, n, k, g));
                acc!(b, |g: &mut Vec<S>| mm_tn_acc(&av, go, m, k, n, g));
                self.nodes[a.0].values = av;
                self.nodes[b.0].values = bv;
            }
            &Op::MatmulNT { a, b, m, k, n } => {
                let av = std::mem::take(&mut self.nodes[a.0].values);
                let bv = std::mem::take(&mut self.nodes[b.0].values);
                // dA [m,k] += go [m,n] @ B [n,k]
                acc!(a, |g: &mut Vec<S>| mm_acc(go, &bv, m, n, k, g));
                // dB [n,k] += go^T [n,m] @ A [m,k]
                acc!(b, |g: &mut Vec<S>| mm_tn_acc(go, &av, m, n, k, g));
                self.nodes[a.0].values = av;
                self.nodes[b.0].values = bv;
            }
            Op::Gather { table, ids, d } => {
                let (table, ids, d) = (*table, ids.clone(), *d);
                acc!(table, |g: &mut Vec<S>| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        let src = &go[row * d..(row + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::RowGather { x, idx, v } => {
                let (x, idx, v) = (*x, idx.clone(), *v);
                acc!(x, |g: &mut Vec<S>| {
                    for (row, &j) in idx.iter().enumerate() {
                        g[row * v + j as usize] += go[row];
                    }
                });
            }
            Op::TakeRows { x, idx, v } => {
                let (x, idx, v) = (*x, idx.clone(), *v);
                acc!(x, |g: &mut Vec<S>| {
                    for (out_row, &in_row) in idx.iter().enumerate() {
                        let dst = &mut g[in_row as usize * v..(in_row as usize + 1) * v];
                        let src = &go[out_row * v..(out_row + 1) * v];
                        for (o, &xg) in dst.iter_mut().zip(src) {
                            *o += xg;
                        }
                    }
                });
            }
            Op::ColsGather { x, idx, v, k } => {
                let (x, idx, v, k) = (*x, idx.clone(), *v, *k);
                acc!(x, |g: &mut Vec<S>| {
                    for (flat, &j) in idx.iter().enumerate() {
                        g[(flat / k) * v + j as usize] += go[flat];
                    }
                });
            }
            &Op::Softmax { x, v } => {
                let out = std::mem::take(&mut self.nodes[i].values);
                acc!(x, |g: &mut Vec<S>| {
                    for r in 0..out.len() / v {
                        let p = &out[r * v..(r + 1) * v];
                        let gor = &go[r * v..(r + 1) * v];
                        let mut dot = S::ZERO;
                        for j in 0..v {
                            dot += gor[j] * p[j];
                        }
                        let gr = &mut g[r * v..(r + 1) * v];
                        for j in 0..v {
                            gr[j] += p[j] * (gor[j] - dot);
                        }
                    }
                });
                self.nodes[i].values = out;
            }
            &Op::LogSoftmax { x, v } => {
                let out = std::mem::take(&mut self.nodes[i].values);
                acc!(x, |g: &mut Vec<S>| {
                    for r in 0..out.len() / v {
                        let ls = &out[r * v..(r + 1) * v];
                        let gor = &go[r * v..(r + 1) * v];
                        let gsum = gor.iter().copied().sum::<S>();
                        let gr = &mut g[r * v..(r + 1) * v];
                        for j in 0..v {
                            gr[j] += gor[j] - ls[j].exp() * gsum;
                        }
                    }
                });
                self.nodes[i].values = out;
            }
            Op::LayerNorm { x, gamma, beta, d, mean, rstd } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let xv = std::mem::take(&mut self.nodes[x.0].values);
                let gv = std::mem::take(&mut self.nodes[gamma.0].values);
                let rows = xv.len() / d;
                let inv_d = S::ONE / s::<S>(d as f64);
                acc!(beta, |g: &mut Vec<S>| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += go[r * d + j];
                        }
                    }
                });
                acc!(gamma, |g: &mut Vec<S>| {
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            g[j] += go[r * d + j] * xhat;
                        }
                    }
                });
                acc!(x, |g: &mut Vec<S>| {
                    for r in 0..rows {
                        let mut sum_dxhat = S::ZERO;
                        let mut sum_dxhat_xhat = S::ZERO;
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = go[r * d + j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = go[r * d + j] * gv[j];
                            g[r * d + j] += rstd[r] * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                });
                self.nodes[x.0].values = xv;
                self.nodes[gamma.0].values = gv;
            }
            &Op::Gelu { a } => {
                let av = std::mem::take(&mut self.nodes[a.0].values);
                acc!(a, |g: &mut Vec<S>| {
                    for ((gi, &x), &xin) in g.iter_mut().zip(go).zip(av.iter()) {
                        *gi += x * gelu_bwd(xin);
                    }
                });
                self.nodes[a.0].values = av;
            }
            Op::CausalAttention { q, k, v, heads, dh, probs: _ } => {
                let (q, k, v, heads, dh) = (*q, *k, *v, *heads, *dh);
                let probs = self.probs_of(i);
                let qv = std::mem::take(&mut self.nodes[q.0].values);
                let kv = std::mem::take(&mut self.nodes[k.0].values);
                let vv = std::mem::take(&mut self.nodes[v.0].values);
                let d = heads * dh;
                let t = qv.len() / d;
                let scale = S::ONE / s::<S>((dh as f64).sqrt());

                let mut dq = vec![S::ZERO; qv.len()];
                let mut dk = vec![S::ZERO; kv.len()];
                let mut dv = vec![S::ZERO; vv.len()];
                let mut dp = vec![S::ZERO; t];
                for h in 0..heads {
                    let off = h * dh;
                    for ti in 0..t {
                        let gor = &go[ti * d + off..ti * d + off + dh];
                        let prow = &probs[h * t * t + ti * t..h * t * t + ti * t + ti + 1];
                        // dP and dV
                        let mut dot = S::ZERO;
                        for j in 0..=ti {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            let mut acc_dp = S::ZERO;
                            for c in 0..dh {
                                acc_dp += gor[c] * vj[c];
                            }
                            dp[j] = acc_dp;
                            dot += acc_dp * prow[j];
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                dvj[c] += prow[j] * gor[c];
                            }
                        }
                        // dS = P * (dP - dot), then dQ, dK
                        for j in 0..=ti {
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            let kj = &kv[j * d + off..j * d + off + dh];
                            let qi = &qv[ti * d + off..ti * d + off + dh];
                            let dqi = &mut dq[ti * d + off..ti * d + off + dh];
                            for c in 0..dh {
                                dqi[c] += ds * kj[c];
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                dkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
                acc!(q, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(dq.iter()) { *gi += x; });
                acc!(k, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(dk.iter()) { *gi += x; });
                acc!(v, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(dv.iter()) { *gi += x; });
                self.nodes[q.0].values = qv;
                self.nodes[k.0].values = kv;
                self.nodes[v.0].values = vv;
                if let Op::CausalAttention { probs: p, .. } = &mut self.nodes[i].op {
                    *p = probs;
                }
            }
            Op::CrossEntropy { logits, targets, v, counted } => {
                let (logits, targets, v, counted) = (*logits, targets.clone(), *v, *counted);
                let xv = std::mem::take(&mut self.nodes[logits.0].values);
                let go0 = go[0];
                acc!(logits, |g: &mut Vec<S>| {
                    let mut row = vec![S::ZERO; v];
                    let inv = go0 / s::<S>(counted as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_TARGET {
                            continue;
                        }
                        row.copy_from_slice(&xv[r * v..(r + 1) * v]);
                        softmax_row_in_place(&mut row);
                        let gr = &mut g[r * v..(r + 1) * v];
                        for j in 0..v {
                            let indicator = if j == t as usize { S::ONE } else { S::ZERO };
                            gr[j] += (row[j] - indicator) * inv;
                        }
                    }
                });
                self.nodes[logits.0].values = xv;
            }
            Op::KlSum { logits, targets, v } => {
                let (logits, v) = (*logits, *v);
                let targets = targets.clone();
                let xv = std::mem::take(&mut self.nodes[logits.0].values);
                let go0 = go[0];
                acc!(logits, |g: &mut Vec<S>| {
                    let mut row = vec![S::ZERO; v];
                    let n = xv.len() / v;
                    for r in 0..n {
                        row.copy_from_slice(&xv[r * v..(r + 1) * v]);
                        softmax_row_in_place(&mut row);
                        let trow = &targets[r * v..(r + 1) * v];
                        let tmass = trow.iter().copied().sum::<S>();
                        let gr = &mut g[r * v..(r + 1) * v];
                        for j in 0..v {
                            gr[j] += (row[j] * tmass - trow[j]) * go0;
                        }
                    }
                });
                self.nodes[logits.0].values = xv;
            }
            &Op::SumAll { a } => {
                let go0 = go[0];
                acc!(a, |g: &mut Vec<S>| for gi in g.iter_mut() { *gi += go0; });
            }
            &Op::MeanAll { a, n } => {
                let go0 = go[0] / s::<S>(n as f64);
                acc!(a, |g: &mut Vec<S>| for gi in g.iter_mut() { *gi += go0; });
            }
            Op::AddN { parts } => {
                for p in parts.clone() {
                    acc!(p, |g: &mut Vec<S>| for (gi, &x) in g.iter_mut().zip(go) { *gi += x; });
                }
            }
        }
    }

    /// Internal: steal the saved attention probabilities of node `i`.
    fn probs_of(&mut self, i: usize) -> Vec<S> {
        if let Op::CausalAttention { probs, .. } = &mut self.nodes[i].op {
            std::mem::take(probs)
        } else {
            unreachable!("probs_of called on non-attention node")
        }
    }
}

/// Target sentinel for [`Tape::cross_entropy`] rows that carry no loss.
pub const IGNORE_TARGET: u32 = u32::MAX;

// ── raw kernels ──────────────────────────────────────────────────────────
//
// Fixed iteration orders; the inner loops are written so LLVM can vectorize
// them. `*_acc` variants accumulate into an existing buffer (for gradients).

/// c [m,n] = a [m,k] @ b [k,n]
pub fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    mm_acc(a, b, m, k, n, &mut c);
    c
}

/// c [m,n] += a [m,k] @ b [k,n]
pub fn mm_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// c [m,n] = a [m,k] @ b[n,k]^T
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    mm_nt_acc(a, b, m, k, n, &mut c);
    c
}

/// c [m,n] += a [m,k] @ b[n,k]^T
pub fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = S::ZERO;
            for p in 0..k {
                dot += arow[p] * brow[p];
            }
            crow[j] += dot;
        }
    }
}

/// c [k,n] += a[m,k]^T @ b [m,n]
pub fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// In-place stable softmax of one row (max subtraction, then normalize).
pub fn softmax_row_in_place<S: Scalar>(row: &mut [S]) {
    let mut mx = S::min_value();
    for &x in row.iter() {
        mx = mx.max(x);
    }
    let mut total = S::ZERO;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    let inv = S::ONE / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// In-place stable log-softmax of one row.
pub fn log_softmax_row_in_place<S: Scalar>(row: &mut [S]) {
    let mut mx = S::min_value();
    for &x in row.iter() {
        mx = mx.max(x);
    }
    let mut total = S::ZERO;
    for &x in row.iter() {
        total += (x - mx).exp();
    }
    let lz = mx + total.ln();
    for x in row.iter_mut() {
        *x -= lz;
    }
}

pub(crate) fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = s::<S>(0.7978845608028654); // sqrt(2/pi)
    let a = s::<S>(0.044715);
    let u = c * (x + a * x * x * x);
    s::<S>(0.5) * x * (S::ONE + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = s::<S>(0.7978845608028654);
    let a = s::<S>(0.044715);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = S::ONE - th * th;
    let du = c * (S::ONE + s::<S>(3.0) * a * x * x);
    s::<S>(0.5) * (S::ONE + th) + s::<S>(0.5) * x * sech2 * du
}

/// Accumulate `go` into `g`, reducing over broadcast dimensions according to
/// `align`, scaled by `sign`.
fn reduce_accumulate<S: Scalar>(g: &mut [S], go: &[S], align: Align, sign: S) {
    match align {
        Align::Same => {
            for (gi, &x) in g.iter_mut().zip(go) {
                *gi += x * sign;
            }
        }
        Align::Scalar => {
            g[0] += go.iter().copied().sum::<S>() * sign;
        }
        Align::Row => {
            let n = g.len();
            for (ix, &x) in go.iter().enumerate() {
                g[ix % n] += x * sign;
            }
        }
    }
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn product_rule_two_leaves() {
        // f(x, y) = sum(x * y); df/dx = y, df/dy = x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![2], vec![2.0, 3.0]), true);
        let y = tape.leaf(&t64(vec![2], vec![5.0, 7.0]), true);
        let xy = tape.mul(x, y).unwrap();
        let loss = tape.sum_all(xy);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 7.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0, 3.0]);
        assert_eq!(tape.values(loss), &[31.0]);
    }

    #[test]
    fn matmul_known_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(&t64(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(c), &[19.0, 22.0, 43.0, 50.0]);
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        // dA = 1s @ B^T: each row [5+6, 7+8]
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn matmul_nt_matches_matmul_of_transpose() {
        let a = t64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t64(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]);
        let mut tape = Tape::<f64>::new();
        let ia = tape.leaf(&a, false);
        let ib = tape.leaf(&b, false);
        let c = tape.matmul_nt(ia, ib).unwrap();
        // c[i][j] = dot(a_i, b_j)
        assert_eq!(tape.values(c), &[-2.0, 5.5, -2.0, 16.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]), false);
        let p = tape.softmax(x).unwrap();
        for row in tape.values(p).chunks(3) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 3], vec![1.0, 2.0, 3.0]), false);
        let y = tape.leaf(&t64(vec![1, 3], vec![1001.0, 1002.0, 1003.0]), false);
        let px = tape.softmax(x).unwrap();
        let py = tape.softmax(y).unwrap();
        for (a, b) in tape.values(px).iter().zip(tape.values(py)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // Uniform logits over 4 classes: loss = ln 4 regardless of target.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![2, 4], vec![0.0; 8]), true);
        let loss = tape.cross_entropy(x, &[1, 3]).unwrap();
        assert!((tape.values(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_sentinel_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![2, 3], vec![5.0, 1.0, 1.0, 9.0, 9.0, 9.0]), true);
        let full = tape.cross_entropy(x, &[0, IGNORE_TARGET]).unwrap();
        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(&t64(vec![1, 3], vec![5.0, 1.0, 1.0]), true);
        let only = tape2.cross_entropy(x2, &[0]).unwrap();
        assert_eq!(tape.values(full)[0], tape2.values(only)[0]);
        tape.backward(full).unwrap();
        // Ignored row contributes exactly zero gradient.
        assert_eq!(&tape.grad(x).unwrap()[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let mut probs = logits.clone();
        softmax_row_in_place(&mut probs);
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&t64(vec![1, 4], logits), true);
        let kl = tape.kl_sum(&t64(vec![1, 4], probs), l).unwrap();
        assert!(tape.values(kl)[0].abs() < 1e-12);
    }

    #[test]
    fn kl_two_point_closed_form() {
        // KL((0.9,0.1) || (0.5,0.5)) = 0.9 ln 1.8 + 0.1 ln 0.2 ≈ 0.368119...
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(&t64(vec![1, 2], vec![0.0, 0.0]), true);
        let kl = tape.kl_sum(&t64(vec![1, 2], vec![0.9, 0.1]), l).unwrap();
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((tape.values(kl)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_rows() {
        use rand::Rng;
        let mut rng = crate::rng::stream(7, "kl-nonneg", &[]);
        for _ in 0..50 {
            let v = 8;
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut target: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
            let tsum: f64 = target.iter().sum();
            target.iter_mut().for_each(|x| *x /= tsum);
            let mut tape = Tape::<f64>::new();
            let l = tape.leaf(&t64(vec![1, v], logits), false);
            let kl = tape.kl_sum(&t64(vec![1, v], target), l).unwrap();
            assert!(tape.values(kl)[0] >= -1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![2], vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn grad_absent_off_the_loss_path() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1], vec![2.0]), true);
        let unused = tape.leaf(&t64(vec![1], vec![5.0]), true);
        let _orphan = tape.scale(unused, 3.0);
        let loss = tape.scale(x, 2.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        // `unused` participates (requires_grad) but receives zero.
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn minimum_ties_route_to_first_operand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![2], vec![1.0, 5.0]), true);
        let b = tape.leaf(&t64(vec![2], vec![1.0, 2.0]), true);
        let m = tape.minimum(a, b).unwrap();
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn causal_attention_first_position_is_v0() {
        // Position 0 can only attend to itself, so out[0] == v[0] exactly.
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&t64(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()), false);
        let k = tape.leaf(&t64(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()), false);
        let v = tape.leaf(&t64(vec![3, 4], (0..12).map(|i| i as f64).collect()), false);
        let o = tape.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(&tape.values(o)[0..4], &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        // Changing row 2 of k/v must not change output row 1.
        let qd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
        let kd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.21).sin()).collect();
        let vd: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let run = |kd: &[f64], vd: &[f64]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(&t64(vec![3, 4], qd.clone()), false);
            let k = tape.leaf(&t64(vec![3, 4], kd.to_vec()), false);
            let v = tape.leaf(&t64(vec![3, 4], vd.to_vec()), false);
            let o = tape.causal_attention(q, k, v, 1).unwrap();
            tape.values(o)[..8].to_vec()
        };
        let base = run(&kd, &vd);
        let mut kd2 = kd.clone();
        let mut vd2 = vd.clone();
        for j in 8..12 {
            kd2[j] += 100.0;
            vd2[j] -= 55.0;
        }
        let poked = run(&kd2, &vd2);
        assert_eq!(base, poked);
    }

    #[test]
    fn gelu_known_values() {
        // gelu(0) = 0; gelu(large) ~ x; gelu(-large) ~ 0.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![3], vec![0.0, 10.0, -10.0]), false);
        let y = tape.gelu(x);
        let out = tape.values(y);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-6);
        assert!(out[2].abs() < 1e-6);
    }

    #[test]
    fn shape_errors_name_the_kernel() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![2, 3], vec![0.0; 6]), false);
        let b = tape.leaf(&t64(vec![2, 3], vec![0.0; 6]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "unexpected message: {msg}");
        assert!(msg.contains('3'), "dims missing from: {msg}");
    }

    #[test]
    fn backward_is_bit_deterministic() {
        use rand::Rng;
        let run = || {
            let mut rng = crate::rng::stream(99, "det", &[]);
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(&t64(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()), true);
            let b = tape.leaf(&t64(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()), true);
            let c = tape.matmul(a, b).unwrap();
            let g = tape.gelu(c);
            let p = tape.softmax(g).unwrap();
            let loss = tape.mean_all(p);
            tape.backward(loss).unwrap();
            (tape.grad(a).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        // Bit-exact equality, not approximate.
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
