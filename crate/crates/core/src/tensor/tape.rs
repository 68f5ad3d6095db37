use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistic taken over the time axis of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    /// Population standard deviation (denominator `T`).
    Std,
    Max,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MulConst(Var, Vec<F>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, F),
    LogSoftmax(Var, F, Vec<F>),
    Reduce {
        x: Var,
        seq_len: usize,
        kind: ReduceKind,
        argmax: Vec<usize>,
    },
    L2Norm(Var, Vec<F>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        fixed: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<F>,
    },
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    PairwiseDist(Var),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Transpose(x)
            | Scale(x, _)
            | AddScalar(x)
            | MulConst(x, _)
            | Relu(x)
            | Sigmoid(x)
            | Tanh(x)
            | Softmax(x, _)
            | LogSoftmax(x, _, _)
            | L2Norm(x, _)
            | SelectRows(x, _)
            | SliceCols(x, _, _)
            | Gather(x, _)
            | Sum(x)
            | Mean(x)
            | PairwiseDist(x) => vec![*x],
            Reduce { x, .. } => vec![*x],
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            ConcatRows(xs) | ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-column `(mean, population variance)` of a batch-norm input.
pub type BatchStats<F> = (Vec<F>, Vec<F>);

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward is a single reverse sweep. Gradients from repeated
/// [`Tape::backward`] calls accumulate until [`Tape::zero_grad`].
pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    track_branches: bool,
    signature: u64,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            track_branches: false,
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Record which side of every non-smooth point (ReLU, max, top-k style
    /// selections) the forward pass took. Finite-difference checks compare
    /// signatures to skip coordinates whose perturbation crosses a kink.
    pub fn with_branch_tracking(mut self) -> Self {
        self.track_branches = true;
        self
    }

    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    /// Fold a discrete decision into the branch signature.
    pub fn note_branch(&mut self, choices: impl IntoIterator<Item = usize>) {
        if !self.track_branches {
            return;
        }
        for c in choices {
            self.signature = (self.signature ^ c as u64).wrapping_mul(FNV_PRIME);
        }
        self.signature = (self.signature ^ 0xff).wrapping_mul(FNV_PRIME);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Attention probabilities laid out `[seq][head][T][T]`, for a node
    /// produced by [`Tape::attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn cols(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap()
    }

    fn rows(&self, v: Var) -> usize {
        let n = self.value(v).numel();
        n / self.cols(v)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        self.value(x).map(f)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data).unwrap()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[.., D] + b[D]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.cols(x);
        if self.value(b).numel() != d {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, &b)| *o = *o + b);
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.unary(x, |v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let out = self.unary(x, |v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// Multiply by a fixed, non-differentiable mask of the same size.
    pub fn mul_const(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("mul_const", self.shape(x), &[mask.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::MulConst(x, mask)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.track_branches {
            let mask: Vec<usize> = self
                .value(x)
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > F::zero())
                .map(|(i, _)| i)
                .collect();
            self.note_branch(mask);
        }
        let out = self.unary(x, |v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.unary(x, sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.unary(x, |v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    // ---- row-wise normalizations ---------------------------------------

    /// Row softmax of `x / temperature`, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: F) -> Result<Var> {
        check_temperature(temperature)?;
        let d = self.cols(x);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row, temperature);
        }
        Ok(self.push(out, Op::Softmax(x, temperature)))
    }

    /// Row log-softmax of `x / temperature`.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: F) -> Result<Var> {
        check_temperature(temperature)?;
        let d = self.cols(x);
        let mut out = self.value(x).clone();
        let mut probs = out.data().to_vec();
        for (row, prow) in out.data_mut().chunks_mut(d).zip(probs.chunks_mut(d)) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = row
                .iter()
                .map(|&v| ((v - max) / temperature).exp())
                .sum::<F>()
                .ln();
            for (o, p) in row.iter_mut().zip(prow.iter_mut()) {
                *o = (*o - max) / temperature - lse;
                *p = o.exp();
            }
        }
        Ok(self.push(out, Op::LogSoftmax(x, temperature, probs)))
    }

    /// Unit-normalize every row; rows with norm below `1e-12` pass unchanged.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let d = self.cols(x);
        let mut out = self.value(x).clone();
        let floor = F::of(1e-12);
        let mut norms = Vec::with_capacity(out.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if n >= floor {
                row.iter_mut().for_each(|v| *v = *v / n);
                norms.push(n);
            } else {
                norms.push(F::zero());
            }
        }
        self.push(out, Op::L2Norm(x, norms))
    }

    /// Batch normalization over rows.
    ///
    /// With `fixed = None` the batch statistics are used (training mode) and
    /// returned as `(mean, population variance)` so the caller can update
    /// running estimates. With `fixed = Some((mean, var))` those statistics
    /// are used instead (evaluation mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
        fixed: Option<(&[F], &[F])>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let (n, d) = self.dims2(x)?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let (mean, var, stats) = match fixed {
            Some((m, v)) => {
                if m.len() != d || v.len() != d {
                    return Err(Error::dim("batch_norm", &[n, d], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if n < 2 {
                    return Err(Error::Degenerate(
                        "batch normalization in training mode needs at least 2 rows".into(),
                    ));
                }
                let xs = self.value(x);
                let mean = column_stat(xs.data(), d, |col| mean_of(col));
                let var = column_stat(xs.data(), d, |col| {
                    let m = mean_of(col);
                    mean_of(&col.iter().map(|&v| (v - m) * (v - m)).collect::<Vec<_>>())
                });
                (mean.clone(), var.clone(), Some((mean, var)))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![F::zero(); n * d];
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xs[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                fixed: fixed.is_some(),
            },
        );
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let d = self.cols(x);
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        let mut xhat = out.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.numel() / d);
        for (row, hrow) in out.data_mut().chunks_mut(d).zip(xhat.chunks_mut(d)) {
            let m = mean_of(row);
            let var = mean_of(&row.iter().map(|&v| (v - m) * (v - m)).collect::<Vec<_>>());
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                hrow[j] = (row[j] - m) * inv;
                row[j] = g[j] * hrow[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- sequences ------------------------------------------------------

    /// Reduce each consecutive block of `seq_len` rows of `x[S*T, D]` to a
    /// single row, giving `[S, D]`.
    pub fn reduce_seq(&mut self, x: Var, seq_len: usize, kind: ReduceKind) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows do not split into sequences of length {seq_len}"
            )));
        }
        if kind == ReduceKind::Std && seq_len < 2 {
            return Err(Error::Degenerate(
                "standard deviation needs at least 2 timesteps".into(),
            ));
        }
        let seqs = rows / seq_len;
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); seqs * d];
        let mut argmax = Vec::new();
        for s in 0..seqs {
            let block = &xs[s * seq_len * d..(s + 1) * seq_len * d];
            for j in 0..d {
                let col: Vec<F> = (0..seq_len).map(|t| block[t * d + j]).collect();
                out[s * d + j] = match kind {
                    ReduceKind::Mean => mean_of(&col),
                    ReduceKind::Std => std_of(&col),
                    ReduceKind::Max => {
                        let (mut best, mut bt) = (col[0], 0);
                        for (t, &v) in col.iter().enumerate().skip(1) {
                            if v > best {
                                best = v;
                                bt = t;
                            }
                        }
                        argmax.push(bt);
                        best
                    }
                };
            }
        }
        if kind == ReduceKind::Max {
            let am = argmax.clone();
            self.note_branch(am);
        }
        let out = Tensor::new(&[seqs, d], out)?;
        Ok(self.push(
            out,
            Op::Reduce {
                x,
                seq_len,
                kind,
                argmax,
            },
        ))
    }

    /// Full (unmasked) multi-head scaled dot-product attention over
    /// independent sequences packed as `[S*T, d]` row blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q)?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Parameter(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "{rows} rows do not split into sequences of length {seq_len}"
            )));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            rows / seq_len,
            seq_len,
            d,
            heads,
        );
        let out = Tensor::new(&[rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    // ---- indexing -------------------------------------------------------

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if idx.is_empty() {
            return Err(Error::Shape("select_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("row {bad} out of range {rows}")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(out, Op::SelectRows(x, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let d = self.dims2(xs[0])?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2(x)?;
            if c != d {
                return Err(Error::dim("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::new(&[rows, d], out)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.dims2(xs[0])?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2(x)?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if start >= end || end > d {
            return Err(Error::Shape(format!("column slice {start}..{end} of width {d}")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            out.extend_from_slice(&xs[i * d + start..i * d + end]);
        }
        let out = Tensor::new(&[rows, end - start], out)?;
        Ok(self.push(out, Op::SliceCols(x, start, end)))
    }

    /// Pick elements by flat index; result has shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() {
            return Err(Error::Shape("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("flat index {bad} out of range {n}")));
        }
        let xs = self.value(x).data();
        let out = idx.iter().map(|&i| xs[i]).collect();
        let out = Tensor::new(&[idx.len()], out)?;
        Ok(self.push(out, Op::Gather(x, idx.to_vec())))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if r != c {
            return Err(Error::Shape(format!("diag of non-square {r}x{c} matrix")));
        }
        let idx: Vec<usize> = (0..r).map(|i| i * c + i).collect();
        self.gather(x, &idx)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = mean_of(self.value(x).data());
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Euclidean distance between every pair of rows, `[N, N]`.
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        let xs = self.value(x).data();
        let mut out = vec![F::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = xs[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xs[j * d..(j + 1) * d])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<F>()
                    .sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let out = Tensor::new(&[n, n], out)?;
        Ok(self.push(out, Op::PairwiseDist(x)))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulate d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut adj)?;
            match &mut self.grads[i] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, &b)| *a = *a + b),
                slot => *slot = Some(Tensor::new(self.nodes[i].value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, grad: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, b)| *a = *a + b),
                slot => *slot = Some(grad),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.1;
                if wants(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![F::zero(); m * k];
                    unsafe {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            g.as_ptr(),
                            n as isize,
                            1,
                            val(*b).as_ptr(),
                            1,
                            n as isize,
                            F::zero(),
                            da.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    send(*a, da);
                }
                if wants(*b) {
                    // dB = A^T @ dC
                    let mut db = vec![F::zero(); k * n];
                    unsafe {
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            val(*a).as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            F::zero(),
                            db.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    send(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims2(*x)?;
                let mut dx = vec![F::zero(); r * c];
                for a in 0..r {
                    for b in 0..c {
                        dx[a * c + b] = g[b * r + a];
                    }
                }
                send(*x, dx);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::AddRow(x, b) => {
                let d = self.cols(*x);
                let mut db = vec![F::zero(); d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                send(*x, g.to_vec());
                send(*b, db);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::MulConst(x, mask) => send(*x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > F::zero() { g } else { F::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&g, &s)| g * s * (F::one() - s))
                    .collect(),
            ),
            Op::Tanh(x) => send(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(&g, &t)| g * (F::one() - t * t))
                    .collect(),
            ),
            Op::Softmax(x, temp) => {
                let d = self.cols(*x);
                let mut dx = vec![F::zero(); g.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        drow[j] = yrow[j] * (grow[j] - dot) / *temp;
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax(x, temp, probs) => {
                let d = self.cols(*x);
                let mut dx = vec![F::zero(); g.len()];
                for ((drow, grow), prow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(probs.chunks(d))
                {
                    let total: F = grow.iter().copied().sum();
                    for j in 0..d {
                        drow[j] = (grow[j] - prow[j] * total) / *temp;
                    }
                }
                send(*x, dx);
            }
            Op::Reduce {
                x,
                seq_len,
                kind,
                argmax,
            } => {
                let d = self.cols(*x);
                let t_len = *seq_len;
                let xs = val(*x);
                let mut dx = vec![F::zero(); xs.len()];
                let tf = F::of(t_len as f64);
                for (s, grow) in g.chunks(d).enumerate() {
                    let base = s * t_len * d;
                    for j in 0..d {
                        match kind {
                            ReduceKind::Mean => {
                                for t in 0..t_len {
                                    dx[base + t * d + j] = grow[j] / tf;
                                }
                            }
                            ReduceKind::Std => {
                                let sd = out[s * d + j];
                                if sd > F::zero() {
                                    let m = (0..t_len).map(|t| xs[base + t * d + j]).sum::<F>() / tf;
                                    for t in 0..t_len {
                                        dx[base + t * d + j] =
                                            grow[j] * (xs[base + t * d + j] - m) / (tf * sd);
                                    }
                                }
                            }
                            ReduceKind::Max => {
                                let t = argmax[s * d + j];
                                dx[base + t * d + j] = grow[j];
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::L2Norm(x, norms) => {
                let d = self.cols(*x);
                let mut dx = vec![F::zero(); g.len()];
                for (r, ((drow, grow), yrow)) in
                    dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)).enumerate()
                {
                    let n = norms[r];
                    if n == F::zero() {
                        drow.copy_from_slice(grow);
                        continue;
                    }
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        drow[j] = (grow[j] - yrow[j] * dot) / n;
                    }
                }
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                fixed,
            } => {
                let (n, d) = self.dims2(*x)?;
                let gam = val(*gamma);
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + g[i * d + j] * xhat[i * d + j];
                        dbeta[j] = dbeta[j] + g[i * d + j];
                    }
                }
                if wants(*x) {
                    let mut dx = vec![F::zero(); n * d];
                    let nf = F::of(n as f64);
                    for j in 0..d {
                        for i in 0..n {
                            let dh = g[i * d + j] * gam[j];
                            dx[i * d + j] = if *fixed {
                                dh * inv_std[j]
                            } else {
                                // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                                inv_std[j] / nf
                                    * (nf * dh
                                        - gam[j] * dbeta[j]
                                        - xhat[i * d + j] * gam[j] * dgamma[j])
                            };
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.cols(*x);
                let gam = val(*gamma);
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = vec![F::zero(); g.len()];
                let df = F::of(d as f64);
                for (r, ((drow, grow), hrow)) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                        let dh = grow[j] * gam[j];
                        s1 = s1 + dh;
                        s2 = s2 + dh * hrow[j];
                    }
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        drow[j] = inv_std[r] / df * (df * dh - s1 - hrow[j] * s2);
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (rows, d) = self.dims2(*q)?;
                let (dq, dk, dv) = attention_backward(
                    g,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    rows / seq_len,
                    *seq_len,
                    d,
                    *heads,
                );
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::SelectRows(x, idx) => {
                let d = self.cols(*x);
                let mut dx = vec![F::zero(); val(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] = dx[src * d + j] + g[r * d + j];
                    }
                }
                send(*x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = val(x).len();
                    send(x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let rows = self.rows(xs[0]);
                let mut off = 0;
                for &x in xs {
                    let w = self.cols(x);
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    send(x, dx);
                    off += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (rows, d) = self.dims2(*x)?;
                let w = end - start;
                let mut dx = vec![F::zero(); rows * d];
                for r in 0..rows {
                    dx[r * d + start..r * d + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::Gather(x, idx) => {
                let mut dx = vec![F::zero(); val(*x).len()];
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i] = dx[i] + gv;
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / F::of(n as f64); n]);
            }
            Op::PairwiseDist(x) => {
                let (n, d) = self.dims2(*x)?;
                let xs = val(*x);
                let mut dx = vec![F::zero(); n * d];
                for i in 0..n {
                    for j in 0..n {
                        let dist = out[i * n + j];
                        let gij = g[i * n + j];
                        if i == j || dist == F::zero() || gij == F::zero() {
                            continue;
                        }
                        let c = gij / dist;
                        for t in 0..d {
                            let diff = c * (xs[i * d + t] - xs[j * d + t]);
                            dx[i * d + t] = dx[i * d + t] + diff;
                            dx[j * d + t] = dx[j * d + t] - diff;
                        }
                    }
                }
                send(*x, dx);
            }
        }
        Ok(())
    }
}

fn check_temperature<F: Float>(t: F) -> Result<()> {
    if t <= F::zero() || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F], temperature: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

pub(crate) fn mean_of<F: Float>(xs: &[F]) -> F {
    xs.iter().copied().sum::<F>() / F::of(xs.len() as f64)
}

pub(crate) fn std_of<F: Float>(xs: &[F]) -> F {
    let m = mean_of(xs);
    mean_of(&xs.iter().map(|&v| (v - m) * (v - m)).collect::<Vec<_>>()).sqrt()
}

fn column_stat<F: Float>(data: &[F], d: usize, f: impl Fn(&[F]) -> F) -> Vec<F> {
    let n = data.len() / d;
    (0..d)
        .map(|j| {
            let col: Vec<F> = (0..n).map(|i| data[i * d + j]).collect();
            f(&col)
        })
        .collect()
}

/// Returns `(output, probs)` where probs is laid out `[seq][head][T][T]`.
pub(crate) fn attention_forward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    seqs: usize,
    t_len: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut out = vec![F::zero(); seqs * t_len * d];
    let mut probs = vec![F::zero(); seqs * heads * t_len * t_len];
    for s in 0..seqs {
        let base = s * t_len * d;
        for h in 0..heads {
            let col = base + h * dh;
            let p = &mut probs[(s * heads + h) * t_len * t_len..(s * heads + h + 1) * t_len * t_len];
            // scores = Q K^T * scale
            unsafe {
                F::gemm(
                    t_len,
                    dh,
                    t_len,
                    scale,
                    q[col..].as_ptr(),
                    d as isize,
                    1,
                    k[col..].as_ptr(),
                    1,
                    d as isize,
                    F::zero(),
                    p.as_mut_ptr(),
                    t_len as isize,
                    1,
                );
            }
            for row in p.chunks_mut(t_len) {
                softmax_in_place(row, F::one());
            }
            // out = P V
            unsafe {
                F::gemm(
                    t_len,
                    t_len,
                    dh,
                    F::one(),
                    p.as_ptr(),
                    t_len as isize,
                    1,
                    v[col..].as_ptr(),
                    d as isize,
                    1,
                    F::zero(),
                    out[col..].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Float>(
    g: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    seqs: usize,
    t_len: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    let mut dp = vec![F::zero(); t_len * t_len];
    for s in 0..seqs {
        let base = s * t_len * d;
        for h in 0..heads {
            let col = base + h * dh;
            let p = &probs[(s * heads + h) * t_len * t_len..(s * heads + h + 1) * t_len * t_len];
            unsafe {
                // dV = P^T dO
                F::gemm(
                    t_len,
                    t_len,
                    dh,
                    F::one(),
                    p.as_ptr(),
                    1,
                    t_len as isize,
                    g[col..].as_ptr(),
                    d as isize,
                    1,
                    F::zero(),
                    dv[col..].as_mut_ptr(),
                    d as isize,
                    1,
                );
                // dP = dO V^T
                F::gemm(
                    t_len,
                    dh,
                    t_len,
                    F::one(),
                    g[col..].as_ptr(),
                    d as isize,
                    1,
                    v[col..].as_ptr(),
                    1,
                    d as isize,
                    F::zero(),
                    dp.as_mut_ptr(),
                    t_len as isize,
                    1,
                );
            }
            // dS = P * (dP - rowsum(dP * P))
            for (drow, prow) in dp.chunks_mut(t_len).zip(p.chunks(t_len)) {
                let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            unsafe {
                // dQ = dS K * scale
                F::gemm(
                    t_len,
                    t_len,
                    dh,
                    scale,
                    dp.as_ptr(),
                    t_len as isize,
                    1,
                    k[col..].as_ptr(),
                    d as isize,
                    1,
                    F::zero(),
                    dq[col..].as_mut_ptr(),
                    d as isize,
                    1,
                );
                // dK = dS^T Q * scale
                F::gemm(
                    t_len,
                    t_len,
                    dh,
                    scale,
                    dp.as_ptr(),
                    1,
                    t_len as isize,
                    q[col..].as_ptr(),
                    d as isize,
                    1,
                    F::zero(),
                    dk[col..].as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        }
    }
    (dq, dk, dv)
}
