//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. Nodes only ever reference earlier nodes, so the reverse of insertion
//! order is a valid topological order for [`Tape::backward`]. Nodes that do
//! not depend on a trainable leaf carry no gradient, which keeps frozen
//! weights free of gradient work.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::linalg;
use crate::numeric::tensor::Tensor;
use crate::scalar::{gemm, MatRef, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention layout for a batch of sequences packed row-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    /// Row range of each sequence in the packed matrix.
    pub segments: Vec<Range<usize>>,
    /// Per-row flag: key at this row may not be attended to by other rows.
    /// Empty means no keys are blocked. A query always sees itself.
    pub blocked_keys: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    SoftmaxRows(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { base: Var, src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<Vec<T>> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(Var),
    Transpose(Var),
    Cayley { params: Var, dim: usize, block: usize, r: Vec<T>, q: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Gelu(x) | Op::SoftmaxRows(x) | Op::Sum(x) | Op::Transpose(x) => {
                vec![*x]
            }
            Op::AddRow { x, row } | Op::MulRow { x, row } => vec![*x, *row],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { x, .. } => vec![*x],
            Op::ScatterAddRows { base, src, .. } => vec![*base, *src],
            Op::ConcatRows(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Cayley { params, .. } => vec![*params],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Transpose(_) => "transpose",
            Op::Cayley { .. } => "cayley",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (1, shape.iter().product()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("leaf", format!("{shape:?} vs {} values", data.len())));
        }
        let v = self.push(shape.to_vec(), data, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Records a copy of `t`, trainable iff `t.requires_grad`.
    pub fn tensor(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts_unchecked(n.shape.clone(), n.value.clone())
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn mat(&self, v: Var) -> MatRef<'_, T> {
        let (r, c) = self.rc(v);
        MatRef::new(&self.nodes[v.0].value, r, c)
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.rc(a);
        let (br, bc) = self.rc(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        let am = if ta { self.mat(a).t() } else { self.mat(a) };
        let bm = if tb { self.mat(b).t() } else { self.mat(b) };
        gemm(T::one(), am, bm, T::zero(), &mut out);
        self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (r, c) = self.rc(x);
        if self.value(row).len() != c {
            return Err(Error::shape(op.name(), format!("row of {} for {c} columns", self.value(row).len())));
        }
        let rv = self.value(row);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(xv[i * c..(i + 1) * c].iter().zip(rv).map(|(a, b)| f(*a, *b)));
        }
        self.push(self.shape(x).to_vec(), out, op)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::AddRow { x, row }, |a, b| a + b)
    }

    /// Scales every row element-wise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::MulRow { x, row }, |a, b| a * b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(0.044715);
        let half = T::from_f64_lossy(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", format!("gain/bias for {c} columns")));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let cn = T::from_usize(c).unwrap();
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfRange { what: "gather_rows", index: i, size: r });
            }
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// `base` with `src[k]` added onto row `idx[k]`; other rows are copied
    /// bit-for-bit.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(base);
        let (sr, sc) = self.rc(src);
        if sc != c || sr != idx.len() {
            return Err(Error::shape("scatter_add_rows", format!("{sr}x{sc} into {r}x{c} at {} rows", idx.len())));
        }
        let mut out = self.value(base).to_vec();
        let sv = self.value(src);
        for (k, &i) in idx.iter().enumerate() {
            if i >= r {
                return Err(Error::OutOfRange { what: "scatter_add_rows", index: i, size: r });
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + sv[k * c + j];
            }
        }
        self.push(vec![r, c], out, Op::ScatterAddRows { base, src, idx: idx.to_vec() })
    }

    /// Stacks rank-2 blocks with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.rc(*xs.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, xc) = self.rc(x);
            if xc != c {
                return Err(Error::shape("concat_rows", format!("{xc} vs {c} columns")));
            }
            rows += r;
            out.extend_from_slice(self.value(x));
        }
        self.push(vec![rows, c], out, Op::ConcatRows(xs.to_vec()))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows × D]`; head `h` uses columns
    /// `h·D/H .. (h+1)·D/H`. Scores are scaled by `1/sqrt(D/H)`. Returns the
    /// concatenated head outputs; the attention weights are kept on the node
    /// and can be read with [`Tape::attention_probs`].
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (n, d) = self.rc(q);
        if self.rc(k) != (n, d) || self.rc(v) != (n, d) {
            return Err(Error::shape("attention", "q, k, v shapes differ"));
        }
        let h = layout.heads;
        if h == 0 || d % h != 0 {
            return Err(Error::shape("attention", format!("{d} columns not divisible by {h} heads")));
        }
        if !layout.blocked_keys.is_empty() && layout.blocked_keys.len() != n {
            return Err(Error::shape("attention", "blocked_keys length"));
        }
        let mut covered = 0;
        for s in &layout.segments {
            if s.start != covered || s.end <= s.start {
                return Err(Error::shape("attention", "segments must tile the rows in order"));
            }
            covered = s.end;
        }
        if covered != n {
            return Err(Error::shape("attention", format!("segments cover {covered} of {n} rows")));
        }
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(layout.segments.len() * h);
        let mut scores = Vec::new();
        for seg in &layout.segments {
            let len = seg.len();
            for head in 0..h {
                let off = head * dh;
                let mut p = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = &qv[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    scores.clear();
                    let mut keys = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let blocked = j != i
                            && !layout.blocked_keys.is_empty()
                            && layout.blocked_keys[seg.start + j];
                        if blocked {
                            continue;
                        }
                        let kj = &kv[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<T>() * scale;
                        scores.push(s);
                        keys.push(j);
                    }
                    let mut w = vec![T::zero(); scores.len()];
                    softmax_into(&scores, &mut w);
                    let orow = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for (&j, &wj) in keys.iter().zip(&w) {
                        p[i * len + j] = wj;
                        let vj = &vv[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o = *o + wj * *x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(vec![n, d], out, Op::Attention { q, k, v, layout, probs })
    }

    /// Attention weights of an attention node: one `len × len` row-major
    /// matrix per (segment, head), segment-major.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionLayout, &[Vec<T>])> {
        match &self.nodes[v.0].op {
            Op::Attention { layout, probs, .. } => Some((layout, probs.as_slice())),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.rc(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no target rows"));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::OutOfRange { what: "cross_entropy target", index: t, size: c });
            }
            let row = &lv[i * c..(i + 1) * c];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            loss = loss + (lse - row[t]);
        }
        loss = loss / T::from_usize(count).unwrap();
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count })
    }

    /// Block-diagonal Cayley map `R = (I − S)(I + S)⁻¹`.
    ///
    /// `params` holds, for each of the `dim / block` diagonal blocks, the
    /// strictly-upper-triangular entries of a skew-symmetric `S` in
    /// row-major order (`block·(block−1)/2` values per block).
    pub fn cayley(&mut self, params: Var, dim: usize, block: usize) -> Result<Var> {
        if block == 0 || dim % block != 0 {
            return Err(Error::shape("cayley", format!("block {block} does not tile {dim}")));
        }
        let per = block * (block - 1) / 2;
        let nblocks = dim / block;
        if self.value(params).len() != per * nblocks {
            return Err(Error::shape("cayley", format!("{} params, need {}", self.value(params).len(), per * nblocks)));
        }
        let pv = self.value(params).to_vec();
        let mut out = vec![T::zero(); dim * dim];
        let mut r_blocks = Vec::with_capacity(nblocks * block * block);
        let mut q_blocks = Vec::with_capacity(nblocks * block * block);
        for bidx in 0..nblocks {
            let s = skew_from_params(&pv[bidx * per..(bidx + 1) * per], block);
            let (r, q) = cayley_block(&s, block)?;
            let base = bidx * block;
            for i in 0..block {
                for j in 0..block {
                    out[(base + i) * dim + base + j] = r[i * block + j];
                }
            }
            r_blocks.extend(r);
            q_blocks.extend(q);
        }
        self.push(vec![dim, dim], out, Op::Cayley { params, dim, block, r: r_blocks, q: q_blocks })
    }

    // ------------------------------------------------------------------
    // Reverse pass
    // ------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that depends on a trainable
    /// leaf. Gradients are read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(Error::GraphCycle { node: i, input: bad.0 });
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = rows_cols(&nodes[i].shape);
                let dc = MatRef::new(g, m, n);
                let (ar, ac) = rows_cols(&nodes[a.0].shape);
                let (br, bc) = rows_cols(&nodes[b.0].shape);
                let am = MatRef { data: &nodes[a.0].value, rows: ar, cols: ac, transposed: *ta };
                let bm = MatRef { data: &nodes[b.0].value, rows: br, cols: bc, transposed: *tb };
                if wants(*a) {
                    acc(*a, &mut |buf| {
                        if *ta {
                            gemm(T::one(), bm, dc.t(), T::one(), buf);
                        } else {
                            gemm(T::one(), dc, bm.t(), T::one(), buf);
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |buf| {
                        if *tb {
                            gemm(T::one(), dc.t(), am, T::one(), buf);
                        } else {
                            gemm(T::one(), am.t(), dc, T::one(), buf);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(v) {
                        acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, x)| *o = *o + sign * *x));
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(v) {
                        acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, x)| *o = *o + sign * *x));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    acc(*a, &mut |buf| {
                        for ((o, x), y) in buf.iter_mut().zip(g).zip(bv) {
                            *o = *o + *x * *y;
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |buf| {
                        for ((o, x), y) in buf.iter_mut().zip(g).zip(av) {
                            *o = *o + *x * *y;
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o = *o + *c * *v));
            }
            Op::AddRow { x, row } => {
                let c = nodes[row.0].value.len();
                if wants(*x) {
                    acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o = *o + *v));
                }
                if wants(*row) {
                    acc(*row, &mut |buf| {
                        for chunk in g.chunks(c) {
                            buf.iter_mut().zip(chunk).for_each(|(o, v)| *o = *o + *v);
                        }
                    });
                }
            }
            Op::MulRow { x, row } => {
                let c = nodes[row.0].value.len();
                let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
                if wants(*x) {
                    acc(*x, &mut |buf| {
                        for (bo, go) in buf.chunks_mut(c).zip(g.chunks(c)) {
                            for j in 0..c {
                                bo[j] = bo[j] + go[j] * rv[j];
                            }
                        }
                    });
                }
                if wants(*row) {
                    acc(*row, &mut |buf| {
                        for (xo, go) in xv.chunks(c).zip(g.chunks(c)) {
                            for j in 0..c {
                                buf[j] = buf[j] + go[j] * xo[j];
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |buf| {
                    for ((o, gv), xv) in buf.iter_mut().zip(g).zip(xv) {
                        if *xv > T::zero() {
                            *o = *o + *gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(0.044715);
                let three_a = T::from_f64_lossy(3.0 * 0.044715);
                let half = T::from_f64_lossy(0.5);
                acc(*x, &mut |buf| {
                    for ((o, gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let du = c * (T::one() + three_a * v * v);
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        *o = *o + *gv * d;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = rows_cols(&nodes[x.0].shape);
                let gv = &nodes[gain.0].value;
                if wants(*x) {
                    let cn = T::from_usize(c).unwrap();
                    acc(*x, &mut |buf| {
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let xh = &xhat[i * c..(i + 1) * c];
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for j in 0..c {
                                let d = gr[j] * gv[j];
                                mean_d = mean_d + d;
                                mean_dx = mean_dx + d * xh[j];
                            }
                            mean_d = mean_d / cn;
                            mean_dx = mean_dx / cn;
                            for j in 0..c {
                                let d = gr[j] * gv[j];
                                buf[i * c + j] = buf[i * c + j] + inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    acc(*gain, &mut |buf| {
                        for (go, xo) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                buf[j] = buf[j] + go[j] * xo[j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(*bias, &mut |buf| {
                        for go in g.chunks(c) {
                            buf.iter_mut().zip(go).for_each(|(o, v)| *o = *o + *v);
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = rows_cols(&nodes[i].shape);
                let y = &nodes[i].value;
                acc(*x, &mut |buf| {
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            buf[row * c + j] = buf[row * c + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = rows_cols(&nodes[x.0].shape).1;
                acc(*x, &mut |buf| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] = buf[r * c + j] + g[k * c + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { base, src, idx } => {
                let c = rows_cols(&nodes[base.0].shape).1;
                if wants(*base) {
                    acc(*base, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o = *o + *v));
                }
                if wants(*src) {
                    acc(*src, &mut |buf| {
                        for (k, &r) in idx.iter().enumerate() {
                            for j in 0..c {
                                buf[k * c + j] = buf[k * c + j] + g[r * c + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    if wants(x) {
                        let part = &g[off..off + n];
                        acc(x, &mut |buf| buf.iter_mut().zip(part).for_each(|(o, v)| *o = *o + *v));
                    }
                    off += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = rows_cols(&nodes[x.0].shape);
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] = buf[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = rows_cols(&nodes[logits.0].shape).1;
                let w = g[0] / T::from_usize(*count).unwrap();
                acc(*logits, &mut |buf| {
                    for (row, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            buf[row * c + j] = buf[row * c + j] + w * probs[row * c + j];
                        }
                        buf[row * c + t] = buf[row * c + t] - w;
                    }
                });
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(g, *q, *k, *v, layout, probs, grads);
            }
            Op::Cayley { params, dim, block, r, q } => {
                let (dim, block) = (*dim, *block);
                let bb = block * block;
                let per = block * (block - 1) / 2;
                acc(*params, &mut |buf| {
                    for bidx in 0..dim / block {
                        let base = bidx * block;
                        let gb: Vec<T> = (0..bb).map(|e| g[(base + e / block) * dim + base + e % block]).collect();
                        let rb = &r[bidx * bb..(bidx + 1) * bb];
                        let qb = &q[bidx * bb..(bidx + 1) * bb];
                        // dL/dS = −(I + R)ᵀ G Qᵀ
                        let mut ipr = rb.to_vec();
                        for d in 0..block {
                            ipr[d * block + d] = ipr[d * block + d] + T::one();
                        }
                        let mut tmp = vec![T::zero(); bb];
                        gemm(T::one(), MatRef::new(&ipr, block, block).t(), MatRef::new(&gb, block, block), T::zero(), &mut tmp);
                        let mut ds = vec![T::zero(); bb];
                        gemm(-T::one(), MatRef::new(&tmp, block, block), MatRef::new(qb, block, block).t(), T::zero(), &mut ds);
                        let mut p = bidx * per;
                        for a in 0..block {
                            for b in a + 1..block {
                                buf[p] = buf[p] + ds[a * block + b] - ds[b * block + a];
                                p += 1;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[Vec<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (n, d) = rows_cols(&nodes[q.0].shape);
        let h = layout.heads;
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut pi = 0;
        for seg in &layout.segments {
            let len = seg.len();
            for head in 0..h {
                let p = &probs[pi];
                pi += 1;
                let off = head * dh;
                let at = |row: usize| (seg.start + row) * d + off;
                let mut ds = vec![T::zero(); len];
                for i in 0..len {
                    let gi = &g[at(i)..at(i) + dh];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        let pij = p[i * len + j];
                        if pij == T::zero() {
                            ds[j] = T::zero();
                            continue;
                        }
                        let vj = &vv[at(j)..at(j) + dh];
                        let dp: T = gi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                        ds[j] = dp;
                        dot = dot + pij * dp;
                        for t in 0..dh {
                            dv[at(j) + t] = dv[at(j) + t] + pij * gi[t];
                        }
                    }
                    for j in 0..=i {
                        let pij = p[i * len + j];
                        if pij == T::zero() {
                            continue;
                        }
                        let dsij = pij * (ds[j] - dot) * scale;
                        for t in 0..dh {
                            dq[at(i) + t] = dq[at(i) + t] + dsij * kv[at(j) + t];
                            dk[at(j) + t] = dk[at(j) + t] + dsij * qv[at(i) + t];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if !nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(buf) => buf.iter_mut().zip(&d).for_each(|(o, x)| *o = *o + *x),
                slot @ None => *slot = Some(d),
            }
        }
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (*v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn skew_from_params<T: Scalar>(p: &[T], block: usize) -> Vec<T> {
    let mut s = vec![T::zero(); block * block];
    let mut k = 0;
    for a in 0..block {
        for b in a + 1..block {
            s[a * block + b] = p[k];
            s[b * block + a] = -p[k];
            k += 1;
        }
    }
    s
}

/// Returns `(R, (I + S)⁻¹)` for one skew-symmetric block.
fn cayley_block<T: Scalar>(s: &[T], block: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut ips = s.to_vec();
    let mut ims: Vec<T> = s.iter().map(|v| -*v).collect();
    for d in 0..block {
        ips[d * block + d] = ips[d * block + d] + T::one();
        ims[d * block + d] = ims[d * block + d] + T::one();
    }
    let q = linalg::inverse(&ips, block).map_err(|_| Error::Singular("I + S in Cayley map"))?;
    let mut r = vec![T::zero(); block * block];
    gemm(T::one(), MatRef::new(&ims, block, block), MatRef::new(&q, block, block), T::zero(), &mut r);
    Ok((r, q))
}

/// Dense Cayley map of a full skew-symmetric matrix, outside any tape.
pub fn cayley_matrix<T: Scalar>(skew: &[T], dim: usize) -> Result<Vec<T>> {
    if skew.len() != dim * dim {
        return Err(Error::shape("cayley", "skew matrix extent"));
    }
    Ok(cayley_block(skew, dim)?.0)
}
