//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value plus whatever the
//! backward pass needs. Node indices are topologically ordered by
//! construction, so `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Conv1d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose1d { x: Var, w: Var, stride: usize, pad: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    L1 { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), track_params: true }
    }

    /// A graph whose parameter leaves do not require gradients.
    pub fn no_grad() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::Numeric(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf node. Its gradient is reported by [`Grads::wrt`] when `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("input", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.get(id).clone();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: self.track_params });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!("matmul ({m}x{k}) by ({k2}x{n})"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), tb, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul { a, b, tb }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let out = transpose_data(self.value(x).data(), r, c);
        let rg = self.any_grad(&[x]);
        self.push("transpose", Tensor::raw(vec![c, r], out), Op::Transpose(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).len() != n {
            return shape_err(format!("row bias of {} for {n} columns", self.value(b).len()));
        }
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v = *v + bv);
        }
        let rg = self.any_grad(&[x, b]);
        self.push("add_row_bias", Tensor::raw(vec![m, n], data), Op::AddRowBias(x, b), rg)
    }

    /// `x[m×n] + b[m]`, broadcasting `b` over columns (per-channel bias).
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).len() != m {
            return shape_err(format!("column bias of {} for {m} rows", self.value(b).len()));
        }
        let mut data = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for (row, &bv) in data.chunks_mut(n.max(1)).zip(bias) {
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
        let rg = self.any_grad(&[x, b]);
        self.push("add_col_bias", Tensor::raw(vec![m, n], data), Op::AddColBias(x, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push("relu", value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push("sigmoid", value, Op::Sigmoid(x), rg)
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} for rank {}", shape.len()));
        }
        let len = shape[axis];
        if len == 0 {
            return shape_err("softmax over an empty axis");
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / sum;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push("softmax", Tensor::raw(shape, out), Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return shape_err("layer norm gain/bias width");
        }
        let eps = T::of(1e-5);
        let nf = T::of(n as f64);
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push("layer_norm", Tensor::raw(vec![m, n], out), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index(format!("row id {bad} outside table of {rows}")));
        }
        let t = self.value(table);
        let data: Vec<T> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let rg = self.any_grad(&[table]);
        self.push("gather", Tensor::raw(vec![ids.len(), d], data), Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return shape_err(format!("concat_rows width {c} vs {cols}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        self.push("concat_rows", Tensor::raw(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r {
            return shape_err(format!("rows {start}..{} of {r}", start + len));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.any_grad(&[x]);
        self.push("slice_rows", Tensor::raw(vec![len, c], data), Op::SliceRows { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return shape_err(format!("concat_cols height {r} vs {rows}"));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        self.push("concat_cols", Tensor::raw(vec![rows, cols], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return shape_err(format!("cols {start}..{} of {c}", start + len));
        }
        let src = self.value(x).data();
        let data: Vec<T> = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        let rg = self.any_grad(&[x]);
        self.push("slice_cols", Tensor::raw(vec![r, len], data), Op::SliceCols { x, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// 1-D convolution of `x[c_in×L]` with `w[c_out×c_in×k]`, zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, len) = self.value(x).dims2()?;
        let (cout, wcin, k) = dims3(self.value(w))?;
        if wcin != cin {
            return shape_err(format!("conv1d kernel expects {wcin} channels, input has {cin}"));
        }
        if k == 0 || stride == 0 {
            return Err(TensorError::Param("conv1d needs k >= 1 and stride >= 1".into()));
        }
        if len + 2 * pad < k {
            return shape_err(format!("kernel {k} wider than padded input {}", len + 2 * pad));
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); cout * lout];
        for co in 0..cout {
            for ci in 0..cin {
                for j in 0..k {
                    let wv = ws[(co * cin + ci) * k + j];
                    for t in 0..lout {
                        let p = t * stride + j;
                        if p >= pad && p - pad < len {
                            out[co * lout + t] = out[co * lout + t] + wv * xs[ci * len + p - pad];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]);
        self.push("conv1d", Tensor::raw(vec![cout, lout], out), Op::Conv1d { x, w, stride, pad }, rg)
    }

    /// Transposed 1-D convolution of `x[c_in×L]` with `w[c_in×c_out×k]`;
    /// the adjoint of [`Graph::conv1d`] for the same kernel tensor.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, stride: usize, pad: usize, output_padding: usize) -> Result<Var> {
        let (cin, len) = self.value(x).dims2()?;
        let (wcin, cout, k) = dims3(self.value(w))?;
        if wcin != cin {
            return shape_err(format!("conv1d_transpose kernel expects {wcin} channels, input has {cin}"));
        }
        if stride == 0 || k == 0 {
            return Err(TensorError::Param("conv1d_transpose needs k >= 1 and stride >= 1".into()));
        }
        if output_padding >= stride {
            return Err(TensorError::Param(format!("output_padding {output_padding} must be < stride {stride}")));
        }
        let full = (len.max(1) - 1) * stride + k + output_padding;
        if len == 0 || full < 2 * pad + 1 {
            return shape_err("conv1d_transpose output would be empty");
        }
        let lout = full - 2 * pad;
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); cout * lout];
        for ci in 0..cin {
            for co in 0..cout {
                for j in 0..k {
                    let wv = ws[(ci * cout + co) * k + j];
                    for i in 0..len {
                        let p = i * stride + j;
                        if p >= pad && p - pad < lout {
                            out[co * lout + p - pad] = out[co * lout + p - pad] + wv * xs[ci * len + i];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]);
        self.push("conv1d_transpose", Tensor::raw(vec![cout, lout], out), Op::ConvTranspose1d { x, w, stride, pad }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return shape_err("mean of an empty tensor");
        }
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v) / T::of(n as f64);
        let rg = self.any_grad(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T×V]`. Positions whose target equals `pad_id` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: Option<usize>) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return shape_err(format!("{} targets for {rows} logit rows", targets.len()));
        }
        let targets: Vec<Option<usize>> = targets.iter().map(|&t| if Some(t) == pad_id { None } else { Some(t) }).collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(TensorError::Index(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * vocab + c] = e;
                z = z + e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p / z;
            }
            total = total + z.ln() + max - row[t];
        }
        let loss = total / T::of(count as f64);
        let rg = self.any_grad(&[logits]);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }, rg)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let n = self.value(pred).len();
        if n == 0 {
            return shape_err("l1 loss of empty tensors");
        }
        let s = self.value(pred).data().iter().zip(self.value(target).data()).fold(T::zero(), |a, (&p, &t)| a + (p - t).abs());
        let rg = self.any_grad(&[pred, target]);
        self.push("l1_loss", Tensor::scalar(s / T::of(n as f64)), Op::L1 { pred, target }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Accumulates into the gradient slot of `v` when it requires one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = node.value.shape()[1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| T::gemm(m, n, k, g, false, bd, !tb, da, true));
                if *tb {
                    acc(*b, &mut |db| T::gemm(n, m, k, g, true, ad, false, db, true));
                } else {
                    acc(*b, &mut |db| T::gemm(k, m, n, ad, true, g, false, db, true));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let gt = transpose_data(g, r, c);
                acc(*x, &mut |dx| add_into(dx, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |da| da.iter_mut().zip(g).zip(bd).for_each(|((d, &gv), &bv)| *d = *d + gv * bv));
                acc(*b, &mut |db| db.iter_mut().zip(g).zip(ad).for_each(|((d, &gv), &av)| *d = *d + gv * av));
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *c)),
            Op::AddRowBias(x, b) => {
                let n = node.value.shape()[1];
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*b, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::AddColBias(x, b) => {
                let n = node.value.shape()[1].max(1);
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*b, &mut |db| {
                    for (d, row) in db.iter_mut().zip(g.chunks(n)) {
                        *d = row.iter().fold(*d, |a, &v| a + v);
                    }
                });
            }
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot = (0..len).fold(T::zero(), |a, l| a + g[at(l)] * y[at(l)]);
                            for l in 0..len {
                                dx[at(l)] = dx[at(l)] + y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = node.value.shape()[1];
                let gd = val(*gain).data();
                let nf = T::of(n as f64);
                acc(*x, &mut |dx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gd[c];
                            mean_dh = mean_dh + dh;
                            mean_dhh = mean_dhh + dh * hr[c];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dhh = mean_dhh / nf;
                        for c in 0..n {
                            let dh = gr[c] * gd[c];
                            dx[r * n + c] = dx[r * n + c] + rs * (dh - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] = dg[c] + gr[c] * hr[c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                let from = start * c;
                acc(*x, &mut |dx| add_into(&mut dx[from..from + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = (val(p).shape()[0], val(p).shape()[1]);
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * cols + offset..r * cols + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = (node.value.shape()[0], node.value.shape()[1]);
                let c = val(*x).shape()[1];
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        add_into(&mut dx[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Conv1d { x, w, stride, pad } => {
                let (cin, len) = (val(*x).shape()[0], val(*x).shape()[1]);
                let (cout, k) = (val(*w).shape()[0], val(*w).shape()[2]);
                let lout = node.value.shape()[1];
                let (xs, ws) = (val(*x).data(), val(*w).data());
                let (stride, pad) = (*stride, *pad);
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
                    for co in 0..cout {
                        for ci in 0..cin {
                            for j in 0..k {
                                for t in 0..lout {
                                    let p = t * stride + j;
                                    if p >= pad && p - pad < len {
                                        f(co, ci, j, t, p - pad);
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |dx| {
                    taps(&mut |co, ci, j, t, src| {
                        dx[ci * len + src] = dx[ci * len + src] + ws[(co * cin + ci) * k + j] * g[co * lout + t];
                    })
                });
                acc(*w, &mut |dw| {
                    taps(&mut |co, ci, j, t, src| {
                        let wi = (co * cin + ci) * k + j;
                        dw[wi] = dw[wi] + xs[ci * len + src] * g[co * lout + t];
                    })
                });
            }
            Op::ConvTranspose1d { x, w, stride, pad } => {
                let (cin, len) = (val(*x).shape()[0], val(*x).shape()[1]);
                let (cout, k) = (val(*w).shape()[1], val(*w).shape()[2]);
                let lout = node.value.shape()[1];
                let (xs, ws) = (val(*x).data(), val(*w).data());
                let (stride, pad) = (*stride, *pad);
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
                    for ci in 0..cin {
                        for co in 0..cout {
                            for j in 0..k {
                                for i in 0..len {
                                    let p = i * stride + j;
                                    if p >= pad && p - pad < lout {
                                        f(ci, co, j, i, p - pad);
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |dx| {
                    taps(&mut |ci, co, j, i, dst| {
                        dx[ci * len + i] = dx[ci * len + i] + ws[(ci * cout + co) * k + j] * g[co * lout + dst];
                    })
                });
                acc(*w, &mut |dw| {
                    taps(&mut |ci, co, j, i, dst| {
                        let wi = (ci * cout + co) * k + j;
                        dw[wi] = dw[wi] + xs[ci * len + i] * g[co * lout + dst];
                    })
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let s = g[0] / T::of(val(*x).len() as f64);
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = val(*logits).shape()[1];
                let s = g[0] / T::of(*count as f64);
                acc(*logits, &mut |dl| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for c in 0..vocab {
                            dl[r * vocab + c] = dl[r * vocab + c] + probs[r * vocab + c] * s;
                        }
                        dl[r * vocab + t] = dl[r * vocab + t] - s;
                    }
                });
            }
            Op::L1 { pred, target } => {
                let s = g[0] / T::of(val(*pred).len() as f64);
                let (pd, td) = (val(*pred).data(), val(*target).data());
                let sign = |p: T, t: T| {
                    if p > t {
                        s
                    } else if p < t {
                        -s
                    } else {
                        T::zero()
                    }
                };
                acc(*pred, &mut |dp| dp.iter_mut().zip(pd.iter().zip(td)).for_each(|(d, (&p, &t))| *d = *d + sign(p, t)));
                acc(*target, &mut |dt| dt.iter_mut().zip(pd.iter().zip(td)).for_each(|(d, (&p, &t))| *d = *d - sign(p, t)));
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Grads::wrt`] but zeros when the node received no gradient.
    pub fn wrt_or_zeros(&self, graph: &Graph<T>, v: Var) -> Vec<T> {
        self.wrt(v).map_or_else(|| vec![T::zero(); graph.value(v).len()], <[T]>::to_vec)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn transpose_data<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => shape_err(format!("expected a rank-3 kernel, got {s:?}")),
    }
}
