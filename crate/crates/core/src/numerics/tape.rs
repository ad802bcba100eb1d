//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough of
//! its inputs to replay the adjoint. Nodes are appended in execution order,
//! so walking the tape backwards is a reverse topological traversal.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGrads, ParamId, ParamStore};
use crate::numerics::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MulConst(Var, Vec<S>),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Conv1d { x: Var, kernel: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    replayed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by a backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that was loaded onto the tape.
    pub fn param_grads(&self, n_params: usize) -> ParamGrads<S> {
        let mut out = ParamGrads::empty(n_params);
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                out.accumulate(id, g);
            }
        }
        out
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn batch_of(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(2)].iter().product()
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

// out[m,k] += x[m,n] * y[k,n]^T
fn gemm_bt<S: Scalar>(x: &[S], y: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let xrow = &x[i * n..(i + 1) * n];
        for p in 0..k {
            let yrow = &y[p * n..(p + 1) * n];
            let dot = xrow.iter().zip(yrow).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_at<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), replayed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, node: Op<S>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, node, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, node: Op<S>) -> Var {
        let out = self.nodes[x.0].value.map(f);
        let rg = self.rg(&[x]);
        self.push(out, node, rg)
    }

    /// Matrix product over the last two axes. Leading batch axes of `b` must
    /// either equal those of `a` or be absent.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}: operands must be at least 2-D", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = batch_of(&sa);
        let batch_b = batch_of(&sb);
        if k != k2 || !(sb.len() == 2 || sb[..sb.len() - 2] == sa[..sa.len() - 2]) {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let mut out = vec![S::zero(); batch_a * m * n];
        {
            let da = self.nodes[a.0].value.data();
            let db = self.nodes[b.0].value.data();
            for bi in 0..batch_a {
                let boff = if batch_b == 1 { 0 } else { bi * k * n };
                gemm(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[.., n] + row[n]`, broadcasting the row over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.cols();
        if self.nodes[row.0].value.len() != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(row))));
        }
        let vx = &self.nodes[x.0].value;
        let vr = self.nodes[row.0].value.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + vr[i % n]).collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec()), rg))
    }

    /// Elementwise sum with a constant of the same shape (additive attention masks).
    pub fn add_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("add_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64(1.0 / (1.0 - p)).unwrap();
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { S::zero() } else { keep });
        self.mul_const(x, &mask)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", self.shape(x))));
        }
        let out = self.nodes[x.0].value.transpose2();
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Softmax along the last axis, computed with max subtraction. NaN inputs
    /// propagate to NaN outputs in their row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let n = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| if v > m || v.is_nan() { v } else { m });
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let out = Tensor::new(vx.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.nodes[x.0].value.cols();
        if self.nodes[gain.0].value.len() != n || self.nodes[bias.0].value.len() != n {
            return Err(Error::shape(
                "layernorm",
                format!("input {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = S::from_f64(eps).unwrap();
        let nf = S::from_usize(n).unwrap();
        let vx = &self.nodes[x.0].value;
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let rows = vx.len() / n;
        let mut xhat = vec![S::zero(); vx.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Temporal convolution with same padding: `x[T, Din]`,
    /// `kernel[k, Din, Dout]` → `[T, Dout]`. `k` must be odd.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 3 || sx.len() != 2 || sk[1] != sx[1] {
            return Err(Error::shape("conv1d", format!("input {:?}, kernel {:?}", sx, sk)));
        }
        let (k, din, dout) = (sk[0], sk[1], sk[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {}", k)));
        }
        let t_len = sx[0];
        let pad = (k - 1) / 2;
        let xv = self.nodes[x.0].value.data();
        let kv = self.nodes[kernel.0].value.data();
        let mut out = vec![S::zero(); t_len * dout];
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                gemm(
                    &xv[src * din..(src + 1) * din],
                    &kv[j * din * dout..(j + 1) * din * dout],
                    &mut out[t * dout..(t + 1) * dout],
                    1,
                    din,
                    dout,
                );
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Tensor::new(&[t_len, dout], out)?, Op::Conv1d { x, kernel }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (r, c) = (vx.rows(), vx.cols());
        if vx.rank() != 2 || start + len > c {
            return Err(Error::shape("slice_cols", format!("{:?}[.., {}..{}]", vx.shape(), start, start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&vx.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.nodes[parts[0].0].value.rows();
        if parts.iter().any(|p| self.shape(*p).len() != 2 || self.nodes[p.0].value.rows() != r) {
            let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
            return Err(Error::shape("concat_cols", format!("{:?}", shapes)));
        }
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.rank() != 2 || start + len > vx.rows() {
            return Err(Error::shape("slice_rows", format!("{:?}[{}..{}]", vx.shape(), start, start + len)));
        }
        let out = vx.slice_rows(start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.nodes[parts[0].0].value.cols();
        if parts.iter().any(|p| self.shape(*p).len() != 2 || self.nodes[p.0].value.cols() != c) {
            let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
            return Err(Error::shape("concat_rows", format!("{:?}", shapes)));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let r = out.len() / c.max(1);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.sum() / S::from_usize(v.len()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows: `[T, D]` → `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.rank() != 2 || v.rows() == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.rows(), v.cols());
        let rf = S::from_usize(r).unwrap();
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(v.row(i)) {
                *o = *o + x;
            }
        }
        for o in &mut out {
            *o = *o / rf;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows(x), rg))
    }

    /// Mean softmax cross-entropy of `logits[N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = &self.nodes[logits.0].value;
        let (n, c) = (v.rows(), v.cols());
        if v.rank() != 2 || n != targets.len() || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets (max class {:?})", v.shape(), targets.len(), targets.iter().max()),
            ));
        }
        let mut probs = vec![S::zero(); n * c];
        let mut loss = S::zero();
        for i in 0..n {
            let row = v.row(i);
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let total = row.iter().fold(S::zero(), |a, &x| a + (x - max).exp());
            let lse = max + total.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[targets[i]];
        }
        let loss = loss / S::from_usize(n).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Backpropagates from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::Tape(format!(
                "backward() needs a scalar root, got shape {:?}; use backward_with",
                self.shape(root)
            )));
        }
        self.backward_with(root, Tensor::full(&self.shape(root).to_vec(), S::one()))
    }

    /// Backpropagates an explicit seed adjoint from `root`. A tape may be
    /// replayed only once.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if self.replayed {
            return Err(Error::Tape("backward already replayed on this tape".into()));
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::shape("backward", format!("seed {:?} for root {:?}", seed.shape(), self.shape(root))));
        }
        self.replayed = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let sa = va.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = vb.cols();
                let batch_a = batch_of(sa);
                let shared_b = vb.rank() == 2;
                if wants(*a) {
                    let mut da = vec![S::zero(); va.len()];
                    for bi in 0..batch_a {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        gemm_bt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &vb.data()[boff..boff + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, Tensor::new(sa, da)?);
                }
                if wants(*b) {
                    let mut db = vec![S::zero(); vb.len()];
                    for bi in 0..batch_a {
                        let boff = if shared_b { 0 } else { bi * k * n };
                        gemm_at(
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, Tensor::new(vb.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape(), d)?);
                }
                if wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b).data();
                if wants(*a) {
                    let d = gd.iter().zip(vb).map(|(&x, &y)| x / y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape(), d)?);
                }
                if wants(*b) {
                    let out = node.value.data();
                    let d = gd
                        .iter()
                        .zip(out.iter().zip(vb))
                        .map(|(&x, (&o, &y))| -x * o / y)
                        .collect();
                    accumulate(grads, *b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(*row) {
                    let n = g.cols();
                    let mut d = vec![S::zero(); n];
                    for (i, &v) in gd.iter().enumerate() {
                        d[i % n] = d[i % n] + v;
                    }
                    accumulate(grads, *row, Tensor::new(val(*row).shape(), d)?);
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.map(|v| v * *f)),
            Op::AddScalar(x) | Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::MulConst(x, c) => {
                let d = gd.iter().zip(c).map(|(&a, &b)| a * b).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&a, &v)| if v > S::zero() { a } else { S::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Tanh(x) => {
                let d = gd.iter().zip(node.value.data()).map(|(&a, &y)| a * (S::one() - y * y)).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(node.value.data()).map(|(&a, &y)| a * y * (S::one() - y)).collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Abs(x) => {
                let d = gd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&a, &v)| {
                        if v > S::zero() {
                            a
                        } else if v < S::zero() {
                            -a
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose2()),
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                accumulate(grads, *x, g.clone().reshape(&shape).expect("reshape preserves length"));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = g.cols();
                let mut d = vec![S::zero(); y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let dot = ys.iter().zip(gs).fold(S::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..n {
                        d[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = g.cols();
                let rows = gd.len() / n;
                let gv = val(*gain).data();
                if wants(*x) {
                    let nf = S::from_usize(n).unwrap();
                    let mut d = vec![S::zero(); gd.len()];
                    for r in 0..rows {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..n {
                            let dh = gd[r * n + j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * n + j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dh_h = mean_dh_h / nf;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gv[j];
                            d[r * n + j] = rstd[r] * (dh - mean_dh - xhat[r * n + j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape(), d)?);
                }
                if wants(*gain) {
                    let mut d = vec![S::zero(); n];
                    for (i, &v) in gd.iter().enumerate() {
                        d[i % n] = d[i % n] + v * xhat[i];
                    }
                    accumulate(grads, *gain, Tensor::new(val(*gain).shape(), d)?);
                }
                if wants(*bias) {
                    let mut d = vec![S::zero(); n];
                    for (i, &v) in gd.iter().enumerate() {
                        d[i % n] = d[i % n] + v;
                    }
                    accumulate(grads, *bias, Tensor::new(val(*bias).shape(), d)?);
                }
            }
            Op::Conv1d { x, kernel } => {
                let (vx, vk) = (val(*x), val(*kernel));
                let sk = vk.shape();
                let (k, din, dout) = (sk[0], sk[1], sk[2]);
                let t_len = vx.rows();
                let pad = (k - 1) / 2;
                let mut dx = vec![S::zero(); vx.len()];
                let mut dk = vec![S::zero(); vk.len()];
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        let grow = &gd[t * dout..(t + 1) * dout];
                        if wants(*x) {
                            gemm_bt(
                                grow,
                                &vk.data()[j * din * dout..(j + 1) * din * dout],
                                &mut dx[src * din..(src + 1) * din],
                                1,
                                dout,
                                din,
                            );
                        }
                        gemm_at(
                            &vx.data()[src * din..(src + 1) * din],
                            grow,
                            &mut dk[j * din * dout..(j + 1) * din * dout],
                            1,
                            din,
                            dout,
                        );
                    }
                }
                if wants(*x) {
                    accumulate(grads, *x, Tensor::new(vx.shape(), dx)?);
                }
                if wants(*kernel) {
                    accumulate(grads, *kernel, Tensor::new(vk.shape(), dk)?);
                }
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let len = g.cols();
                let mut d = vec![S::zero(); vx.len()];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, Tensor::new(vx.shape(), d)?);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let vp = val(*p);
                    let c = vp.cols();
                    if wants(*p) {
                        let mut d = Vec::with_capacity(vp.len());
                        for i in 0..vp.rows() {
                            d.extend_from_slice(&gd[i * total + off..i * total + off + c]);
                        }
                        accumulate(grads, *p, Tensor::new(vp.shape(), d)?);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let c = vx.cols();
                let mut d = vec![S::zero(); vx.len()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, Tensor::new(vx.shape(), d)?);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let vp = val(*p);
                    if wants(*p) {
                        accumulate(grads, *p, Tensor::new(vp.shape(), gd[off..off + vp.len()].to_vec())?);
                    }
                    off += vp.len();
                }
            }
            Op::Sum(x) => {
                let vx = val(*x);
                accumulate(grads, *x, Tensor::full(vx.shape(), gd[0]));
            }
            Op::Mean(x) => {
                let vx = val(*x);
                let v = gd[0] / S::from_usize(vx.len()).unwrap();
                accumulate(grads, *x, Tensor::full(vx.shape(), v));
            }
            Op::MeanRows(x) => {
                let vx = val(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let rf = S::from_usize(r).unwrap();
                let d = (0..r * c).map(|i| gd[i % c] / rf).collect();
                accumulate(grads, *x, Tensor::new(vx.shape(), d)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = val(*logits).cols();
                let n = targets.len();
                let scale = gd[0] / S::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - S::one();
                }
                for v in &mut d {
                    *v = *v * scale;
                }
                accumulate(grads, *logits, Tensor::new(val(*logits).shape(), d)?);
            }
        }
        Ok(())
    }
}
