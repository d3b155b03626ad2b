//! Gradient tape.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its backward rule. Nodes only ever reference earlier
//! nodes, so reverse insertion order is a valid topological order for the
//! backward sweep.

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    ReduceSum(Var, usize),
    ReduceMean(Var, usize),
    ReduceMax(Var, usize, Vec<usize>),
    SumAll(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    SegmentSoftmax(Var, Vec<usize>),
    L2NormalizeRows(Var, f64),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and runs the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g).expect("gradient shape"),
        None => *slot = Some(g),
    }
}

fn gather(src: &[f64], cols: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
    }
    out
}

fn scatter_add(src: &[f64], cols: usize, idx: &[usize], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for (r, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * cols..(i + 1) * cols];
        for (d, s) in dst.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
            *d += s;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
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

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter's current value into this tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 && s.len() != 3 {
            return Err(TensorError::invalid(
                "transpose_last",
                format!("expected 2-D or 3-D, got {s:?}"),
            ));
        }
        let (bs, m, n) = if s.len() == 2 {
            (1, s[0], s[1])
        } else {
            (s[0], s[1], s[2])
        };
        let out = transpose_data(self.value(a).data(), bs, m, n);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::TransposeLast(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds `bias` (length = last dim of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(a).rows_cols();
        if self.value(bias).len() != cols || self.shape(a).is_empty() {
            return Err(TensorError::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).rows_cols();
        if self.value(col).len() != rows || self.shape(a).is_empty() {
            return Err(TensorError::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).clone();
        if cols > 0 {
            for (row, &s) in out.data_mut().chunks_mut(cols).zip(c) {
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("slice", &s, axis)?;
        if start + len > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} out of bounds for {s:?}", start + len),
            ));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { src: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Selects rows (first axis) of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(TensorError::invalid("gather_rows", "scalar input"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {s:?}"),
            ));
        }
        let cols: usize = s[1..].iter().product();
        let out = gather(self.value(a).data(), cols, idx);
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Adds row `r` of `a` into output row `idx[r]`; rows never targeted stay zero.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || s[0] != idx.len() {
            return Err(TensorError::shape("scatter_add_rows", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "scatter_add_rows",
                format!("target row {bad} >= {rows}"),
            ));
        }
        let cols: usize = s[1..].iter().product();
        let out = scatter_add(self.value(a).data(), cols, idx, rows);
        let mut shape = s;
        shape[0] = rows;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::ScatterAddRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Column-wise maximum of the rows sharing a segment id. Empty segments
    /// produce zeros; ties route the gradient to the first maximal row.
    pub fn segment_max(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != segments.len() {
            return Err(TensorError::shape("segment_max", &s, &[segments.len()]));
        }
        if segments.iter().any(|&g| g >= num_segments) {
            return Err(TensorError::invalid("segment_max", "segment id out of range"));
        }
        let cols = s[1];
        let src = self.value(a).data();
        let mut arg = vec![usize::MAX; num_segments * cols];
        for (r, &g) in segments.iter().enumerate() {
            for c in 0..cols {
                let slot = &mut arg[g * cols + c];
                if *slot == usize::MAX || src[r * cols + c] > src[*slot * cols + c] {
                    *slot = r;
                }
            }
        }
        let out = arg
            .iter()
            .enumerate()
            .map(|(i, &r)| if r == usize::MAX { 0.0 } else { src[r * cols + i % cols] })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[num_segments, cols], out)?,
            Op::SegmentMax(a, arg),
            rg,
        ))
    }

    fn reduce_shape(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let s = self.shape(a).to_vec();
        check_axis(op, &s, axis)?;
        let (outer, len, inner) = split_axis(&s, axis);
        let mut shape = s;
        shape.remove(axis);
        Ok((shape, outer, len, inner))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape("reduce_sum", a, axis)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ReduceSum(a, axis), rg))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape("reduce_mean", a, axis)?;
        if len == 0 {
            return Err(TensorError::invalid("reduce_mean", "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ReduceMean(a, axis), rg))
    }

    /// Maximum along `axis`; ties route the gradient to the first maximal entry.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape("reduce_max", a, axis)?;
        if len == 0 {
            return Err(TensorError::invalid("reduce_max", "empty axis"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for l in 1..len {
                    if src[(o * len + l) * inner + i] > src[(o * len + best) * inner + i] {
                        best = l;
                    }
                }
                arg[o * inner + i] = best;
                out[o * inner + i] = src[(o * len + best) * inner + i];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ReduceMax(a, axis, arg), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).is_empty() {
            return Err(TensorError::invalid("softmax", "scalar input"));
        }
        let mut out = self.value(a).clone();
        let (_, cols) = out.rows_cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Softmax over the rows of `a` (`[E, H]`) that share a segment id, per column.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != segments.len() {
            return Err(TensorError::shape("segment_softmax", &s, &[segments.len()]));
        }
        if segments.iter().any(|&g| g >= num_segments) {
            return Err(TensorError::invalid("segment_softmax", "segment id out of range"));
        }
        let cols = s[1];
        let src = self.value(a).data();
        let mut max = vec![f64::NEG_INFINITY; num_segments * cols];
        for (r, &g) in segments.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[g * cols + c];
                *m = m.max(src[r * cols + c]);
            }
        }
        let mut out = vec![0.0; src.len()];
        let mut denom = vec![0.0; num_segments * cols];
        for (r, &g) in segments.iter().enumerate() {
            for c in 0..cols {
                let e = (src[r * cols + c] - max[g * cols + c]).exp();
                out[r * cols + c] = e;
                denom[g * cols + c] += e;
            }
        }
        for (r, &g) in segments.iter().enumerate() {
            for c in 0..cols {
                out[r * cols + c] /= denom[g * cols + c];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::SegmentSoftmax(a, segments.to_vec()),
            rg,
        ))
    }

    /// Divides each row by `sqrt(|row|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        if self.shape(a).is_empty() {
            return Err(TensorError::invalid("l2_normalize_rows", "scalar input"));
        }
        let mut out = self.value(a).clone();
        let (_, cols) = out.rows_cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                let s = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormalizeRows(a, eps), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::shape("cross_entropy", &s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("label {bad} >= {classes} classes"),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backprop(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass wrt `v`; `None` if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Tape::grad`], with zeros for unreachable nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// `(parameter, gradient)` for every parameter bound into this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => Some((id, self.grad_or_zeros(Var(i)))),
            _ => None,
        })
    }

    fn backprop(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        let out = &nodes[id].value;
        let gd = g.data();
        match &nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, gd, false, val(b).data(), true, &mut ga);
                    send(a, Tensor::new(sa, ga).unwrap());
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, val(a).data(), true, gd, false, &mut gb);
                    send(b, Tensor::new(sb, gb).unwrap());
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(a).data(), val(b).data());
                if wants(a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_acc(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &db[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    send(a, Tensor::new(sa, ga).unwrap());
                }
                if wants(b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_acc(
                            k,
                            m,
                            n,
                            &da[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    send(b, Tensor::new(sb, gb).unwrap());
                }
            }
            &Op::TransposeLast(a) => {
                let s = out.shape();
                let (bs, m, n) = if s.len() == 2 {
                    (1, s[0], s[1])
                } else {
                    (s[0], s[1], s[2])
                };
                let t = transpose_data(gd, bs, m, n);
                send(a, Tensor::new(val(a).shape(), t).unwrap());
            }
            &Op::Add(a, b) => {
                send(a, g.clone());
                send(b, g.clone());
            }
            &Op::Sub(a, b) => {
                send(a, g.clone());
                send(b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    send(a, zip_map(g, val(b), |x, y| x * y));
                }
                if wants(b) {
                    send(b, zip_map(g, val(a), |x, y| x * y));
                }
            }
            &Op::AddBias(a, bias) => {
                send(a, g.clone());
                if wants(bias) {
                    let (_, cols) = g.rows_cols();
                    let mut gb = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    send(bias, Tensor::new(val(bias).shape(), gb).unwrap());
                }
            }
            &Op::MulCol(a, col) => {
                let (rows, cols) = g.rows_cols();
                let c = val(col).data();
                if wants(a) {
                    let mut ga = g.clone();
                    if cols > 0 {
                        for (row, &s) in ga.data_mut().chunks_mut(cols).zip(c) {
                            row.iter_mut().for_each(|x| *x *= s);
                        }
                    }
                    send(a, ga);
                }
                if wants(col) {
                    let ad = val(a).data();
                    let gc = (0..rows)
                        .map(|r| {
                            (0..cols)
                                .map(|j| gd[r * cols + j] * ad[r * cols + j])
                                .sum()
                        })
                        .collect();
                    send(col, Tensor::new(val(col).shape(), gc).unwrap());
                }
            }
            &Op::MulScalar(a, s) => {
                let k = val(s).data()[0];
                if wants(a) {
                    send(a, g.map(|x| x * k));
                }
                if wants(s) {
                    let gs: f64 = gd.iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
                    send(s, Tensor::new(val(s).shape(), vec![gs]).unwrap());
                }
            }
            &Op::Affine(a, scale) => send(a, g.map(|x| x * scale)),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = val(p).shape()[*axis];
                    if wants(p) {
                        let mut gp = Vec::with_capacity(outer * plen * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[base..base + plen * inner]);
                        }
                        send(p, Tensor::new(val(p).shape(), gp).unwrap());
                    }
                    offset += plen;
                }
            }
            &Op::Slice { src, axis, start } => {
                let s = val(src).shape();
                let (outer, alen, inner) = split_axis(s, axis);
                let len = out.shape()[axis];
                let mut gs = vec![0.0; val(src).len()];
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    gs[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                send(src, Tensor::new(s, gs).unwrap());
            }
            &Op::Reshape(a) => send(a, g.clone().reshaped(val(a).shape()).unwrap()),
            Op::GatherRows(a, idx) => {
                let s = val(*a).shape();
                let cols: usize = s[1..].iter().product();
                let ga = scatter_add(gd, cols, idx, s[0]);
                send(*a, Tensor::new(s, ga).unwrap());
            }
            Op::ScatterAddRows(a, idx) => {
                let s = val(*a).shape();
                let cols: usize = s[1..].iter().product();
                let ga = gather(gd, cols, idx);
                send(*a, Tensor::new(s, ga).unwrap());
            }
            Op::SegmentMax(a, arg) => {
                let s = val(*a).shape();
                let cols = s[1];
                let mut ga = vec![0.0; val(*a).len()];
                for (i, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        ga[r * cols + i % cols] += gd[i];
                    }
                }
                send(*a, Tensor::new(s, ga).unwrap());
            }
            &Op::ReduceSum(a, axis) | &Op::ReduceMean(a, axis) => {
                let s = val(a).shape();
                let (outer, len, inner) = split_axis(s, axis);
                let scale = match nodes[id].op {
                    Op::ReduceMean(..) => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut ga = vec![0.0; val(a).len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                send(a, Tensor::new(s, ga).unwrap());
            }
            Op::ReduceMax(a, axis, arg) => {
                let s = val(*a).shape();
                let (_, len, inner) = split_axis(s, *axis);
                let mut ga = vec![0.0; val(*a).len()];
                for (j, &best) in arg.iter().enumerate() {
                    let (o, i) = (j / inner, j % inner);
                    ga[(o * len + best) * inner + i] += gd[j];
                }
                send(*a, Tensor::new(s, ga).unwrap());
            }
            &Op::SumAll(a) => send(a, Tensor::full(val(a).shape(), gd[0])),
            &Op::Relu(a) => send(a, zip_map(g, val(a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            &Op::LeakyRelu(a, slope) => send(
                a,
                zip_map(g, val(a), |gx, x| if x > 0.0 { gx } else { slope * gx }),
            ),
            &Op::Tanh(a) => send(a, zip_map(g, out, |gx, y| gx * (1.0 - y * y))),
            &Op::Sigmoid(a) => send(a, zip_map(g, out, |gx, y| gx * y * (1.0 - y))),
            &Op::Exp(a) => send(a, zip_map(g, out, |gx, y| gx * y)),
            &Op::Softmax(a) => {
                let (_, cols) = out.rows_cols();
                let mut ga = g.clone();
                if cols > 0 {
                    for (gr, yr) in ga.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for (x, y) in gr.iter_mut().zip(yr) {
                            *x = y * (*x - dot);
                        }
                    }
                }
                send(a, ga);
            }
            Op::SegmentSoftmax(a, segments) => {
                let cols = out.shape()[1];
                let y = out.data();
                let num = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; num * cols];
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] += gd[r * cols + c] * y[r * cols + c];
                    }
                }
                let mut ga = vec![0.0; y.len()];
                for (r, &s) in segments.iter().enumerate() {
                    for c in 0..cols {
                        let i = r * cols + c;
                        ga[i] = y[i] * (gd[i] - dot[s * cols + c]);
                    }
                }
                send(*a, Tensor::new(out.shape(), ga).unwrap());
            }
            &Op::L2NormalizeRows(a, eps) => {
                let (_, cols) = out.rows_cols();
                let x = val(a).data();
                let mut ga = vec![0.0; x.len()];
                if let Some(rows) = x.len().checked_div(cols) {
                    for r in 0..rows {
                        let range = r * cols..(r + 1) * cols;
                        let xr = &x[range.clone()];
                        let yr = &out.data()[range.clone()];
                        let gr = &gd[range.clone()];
                        let s = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in ga[range].iter_mut().enumerate() {
                            *o = (gr[j] - yr[j] * dot) / s;
                        }
                    }
                }
                send(a, Tensor::new(val(a).shape(), ga).unwrap());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = val(*logits).shape()[1];
                let scale = gd[0] / labels.len() as f64;
                let mut ga = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    ga[r * classes + l] -= 1.0;
                }
                ga.iter_mut().for_each(|x| *x *= scale);
                send(*logits, Tensor::new(val(*logits).shape(), ga).unwrap());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn transpose_data(src: &[f64], bs: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..bs {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(Tensor::eye(2));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_axis1_widths() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 8]);
        let c = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(tape.concat(&[a, c], 1).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
        tape.reset_grads();
        tape.backward(s).unwrap();
    }

    #[test]
    fn unreachable_var_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.0));
        let unused = tape.var(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let mut tape = Tape::new();
        let z = tape.var(t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn reduce_max_routes_ties_to_first() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1, 3], &[2.0, 2.0, 1.0]));
        let m = tape.reduce_max(x, 1).unwrap();
        let s = tape.sum_all(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn segment_max_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[3, 1], &[-1.0, -3.0, 4.0]));
        let m = tape.segment_max(x, &[0, 0, 2], 3).unwrap();
        assert_eq!(tape.value(m).data(), &[-1.0, 0.0, 4.0]);
    }

    #[test]
    fn scatter_then_gather_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.scatter_add_rows(g, &[1, 1, 0], 3).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0, 6.0, 8.0, 0.0, 0.0]);
        assert!(tape.gather_rows(x, &[3]).is_err());
    }
}
