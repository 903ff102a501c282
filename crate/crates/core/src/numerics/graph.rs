use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    /// Scales the left-operand gradient of every matmul by 1.01.
    MatmulLhs,
    /// Drops the mean-centering term in the layernorm input gradient.
    LayerNormInput,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Div(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    MeanRows(Var),
    Sum(Var),
    SquaredL2(Var, Var),
    PairwiseSqDist(Var, Var),
    Exp(Var),
    Log(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    WeightedSum(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
}

/// Records primitive operations in creation order, which is a topological order:
/// every operand is created before the node that consumes it.
///
/// `backward` accumulates into the stored gradients. Calling it twice without
/// [`Graph::zero_grad`] doubles every gradient.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<GradFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_values<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_values<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

const GELU_C: f64 = 0.044_715;

fn gelu_inner<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    k * (x + T::lit(GELU_C) * x * x * x)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: GradFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant input. It receives gradients but is not marked trainable.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Adds a trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn require_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn require_scalar(&self, v: Var, what: &str) -> Result<()> {
        if !self.value(v).is_scalar() {
            return Err(Error::Dimension(format!(
                "{what} expects a scalar, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix(a, "matmul")?;
        let (k2, n) = self.require_matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions of [{m}, {k}] and [{k2}, {n}] disagree"
            )));
        }
        let out = matmul_values(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.require_matrix(a, "transpose")?;
        let out = transpose_values(self.value(a).data(), r, c);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        add_into(out.data_mut(), self.value(b).data());
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o - y;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.require_matrix(x, "add_row")?;
        if self.value(row).numel() != c {
            return Err(Error::Dimension(format!(
                "add_row: row of shape {:?} does not fit matrix {:?}",
                self.shape(row),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(c) {
            add_into(chunk, &r);
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x, s))
    }

    /// Scalar division `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_scalar(a, "div")?;
        self.require_scalar(b, "div")?;
        let out = Tensor::scalar(self.value(a).item() / self.value(b).item());
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = Tensor::zeros(t.shape());
        for (src, dst) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            softmax_row(src, dst);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Row-wise normalization to zero mean and unit (population) variance, then
    /// `gain * x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let c = self.value(x).cols();
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).numel() != c {
                return Err(Error::Dimension(format!(
                    "layernorm {what} of shape {:?} does not fit input {:?}",
                    self.shape(v),
                    self.shape(x)
                )));
            }
        }
        let t = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let n = T::lit(c as f64);
        let mut normalized = vec![T::zero(); t.numel()];
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Tensor::zeros(t.shape());
        for ((src, xh), dst) in t
            .data()
            .chunks(c)
            .zip(normalized.chunks_mut(c))
            .zip(out.data_mut().chunks_mut(c))
        {
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                xh[j] = (src[j] - mean) * inv;
                dst[j] = xh[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + gelu_inner(v).tanh()));
        self.push(out, Op::Gelu(x))
    }

    /// Mean over rows: `r × c` to a length-`c` vector.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = super::mean_rows(t.data(), t.rows(), t.cols());
        let out = Tensor::vector(out).expect("non-empty");
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Σ (aᵢ − bᵢ)² over two equally sized tensors.
    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::Dimension(format!(
                "squared_l2: lengths {} and {} differ",
                self.value(a).numel(),
                self.value(b).numel()
            )));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::SquaredL2(a, b)))
    }

    /// Matrix of squared distances between the rows of `a` (`m × d`) and `b` (`n × d`).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.require_matrix(a, "pairwise_sq_dist")?;
        let (n, d2) = self.require_matrix(b, "pairwise_sq_dist")?;
        if d != d2 {
            return Err(Error::Dimension(format!(
                "pairwise_sq_dist: row widths of [{m}, {d}] and [{n}, {d2}] differ"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(
                    av.row(i)
                        .iter()
                        .zip(bv.row(j))
                        .map(|(&x, &y)| (x - y) * (x - y))
                        .sum::<T>(),
                );
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::PairwiseSqDist(a, b)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Log(x))
    }

    /// Stacks matrices (or vectors, treated as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of zero tensors".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c || t.shape().len() > 2 {
                return Err(Error::Dimension(format!(
                    "concat_rows: shape {:?} does not stack under width {c}",
                    t.shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of zero tensors".into()))?;
        let r = self.require_matrix(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.require_matrix(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: {pr} rows do not match {r}"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.require_matrix(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let t = self.value(x);
        let data = (0..r)
            .flat_map(|i| t.row(i)[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(x, start)))
    }

    /// Σ wᵢ xᵢ with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} weights for shape {:?}",
                weights.len(),
                self.shape(x)
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// Reverse sweep from a scalar `loss`, adding this pass's gradients to the stored ones.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(stored) => add_into(stored, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = self.nodes[v.0].value.numel();
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let bt = transpose_values(self.value(*b).data(), k, n);
                let mut da = matmul_values(g, &bt, m, n, k);
                if self.fault == Some(GradFault::MatmulLhs) {
                    da.iter_mut().for_each(|x| *x = *x * T::lit(1.01));
                }
                acc(*a, &mut |s| add_into(s, &da));
                let at = transpose_values(self.value(*a).data(), m, k);
                let db = matmul_values(&at, g, k, m, n);
                acc(*b, &mut |s| add_into(s, &db));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a);
                let ga = transpose_values(g, c, r);
                acc(*a, &mut |s| add_into(s, &ga));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (d, &x) in s.iter_mut().zip(g) {
                        *d = *d - x;
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |s| add_into(s, g));
                let c = self.value(*row).numel();
                acc(*row, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |s| {
                for (d, &v) in s.iter_mut().zip(g) {
                    *d = *d + v * *k;
                }
            }),
            Op::AddScalar(x, _) => acc(*x, &mut |s| add_into(s, g)),
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).item(), self.value(*b).item());
                acc(*a, &mut |s| s[0] = s[0] + g[0] / bv);
                acc(*b, &mut |s| s[0] = s[0] - g[0] * av / (bv * bv));
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for ((d, y), gy) in s.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                        let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            d[j] = d[j] + y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    for ((d, y), gy) in s.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                        let total = gy.iter().copied().sum::<T>();
                        for j in 0..c {
                            d[j] = d[j] + gy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = node.value.cols();
                let n = T::lit(c as f64);
                let gv = self.value(*gain).data();
                acc(*gain, &mut |s| {
                    for (gy, xh) in g.chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            s[j] = s[j] + gy[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for gy in g.chunks(c) {
                        add_into(s, gy);
                    }
                });
                let centered = self.fault != Some(GradFault::LayerNormInput);
                acc(*x, &mut |s| {
                    for (((d, gy), xh), &inv) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(normalized.chunks(c))
                        .zip(inv_std.iter())
                    {
                        let dxh: Vec<T> = (0..c).map(|j| gy[j] * gv[j]).collect();
                        let mean_d = dxh.iter().copied().sum::<T>() / n;
                        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            let m = if centered { mean_d } else { T::zero() };
                            d[j] = d[j] + inv * (dxh[j] - m - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let half = T::lit(0.5);
                let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
                acc(*x, &mut |s| {
                    for ((d, &v), &gy) in s.iter_mut().zip(xv).zip(g) {
                        let t = gelu_inner(v).tanh();
                        let du = k * (T::one() + T::lit(3.0 * GELU_C) * v * v);
                        let deriv = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        *d = *d + gy * deriv;
                    }
                });
            }
            Op::MeanRows(x) => {
                let r = self.value(*x).rows();
                let inv = T::one() / T::lit(r as f64);
                acc(*x, &mut |s| {
                    for chunk in s.chunks_mut(g.len()) {
                        for (d, &gy) in chunk.iter_mut().zip(g) {
                            *d = *d + gy * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::SquaredL2(a, b) => {
                let two = T::lit(2.0) * g[0];
                let diff: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| two * (x - y))
                    .collect();
                acc(*a, &mut |s| add_into(s, &diff));
                acc(*b, &mut |s| {
                    for (d, &v) in s.iter_mut().zip(&diff) {
                        *d = *d - v;
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (m, dim) = self.dims2(*a);
                let n = self.dims2(*b).0;
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![T::zero(); m * dim];
                let mut db = vec![T::zero(); n * dim];
                let two = T::lit(2.0);
                for i in 0..m {
                    for j in 0..n {
                        let w = two * g[i * n + j];
                        if w == T::zero() {
                            continue;
                        }
                        for p in 0..dim {
                            let diff = w * (av.row(i)[p] - bv.row(j)[p]);
                            da[i * dim + p] = da[i * dim + p] + diff;
                            db[j * dim + p] = db[j * dim + p] - diff;
                        }
                    }
                }
                acc(*a, &mut |s| add_into(s, &da));
                acc(*b, &mut |s| add_into(s, &db));
            }
            Op::Exp(x) => acc(*x, &mut |s| {
                for ((d, &y), &gy) in s.iter_mut().zip(out).zip(g) {
                    *d = *d + gy * y;
                }
            }),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for ((d, &v), &gy) in s.iter_mut().zip(xv).zip(g) {
                        *d = *d + gy / v;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let c = node.value.cols();
                let off = start * c;
                acc(*x, &mut |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |s| {
                        for (d, gy) in s.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(d, &gy[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                acc(*x, &mut |s| {
                    for (d, gy) in s.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut d[*start..*start + w], gy);
                    }
                });
            }
            Op::WeightedSum(x, w) => acc(*x, &mut |s| {
                for (d, &wi) in s.iter_mut().zip(w) {
                    *d = *d + wi * g[0];
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(shape: &[usize], seed: &mut u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// Checks the analytic gradient of a scalar function of one input against
    /// central differences. Returns the max relative error.
    fn fd_check(
        input: Tensor<f64>,
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let col = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut seed = 7;
        let a = random(&[3, 4], &mut seed);
        let b = random(&[4, 2], &mut seed);
        let bc = b.clone();
        let err = fd_check(a.clone(), |g, x| {
            let bv = g.constant(bc.clone());
            let c = g.matmul(x, bv).unwrap();
            g.sum(c)
        });
        assert!(err < 1e-6, "dA rel err {err}");
        let err = fd_check(b, |g, x| {
            let av = g.constant(a.clone());
            let c = g.matmul(av, x).unwrap();
            g.sum(c)
        });
        assert!(err < 1e-6, "dB rel err {err}");
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = g.softmax_lastdim(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let y = g.softmax_lastdim(x);
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut seed = 11;
        let x = random(&[5], &mut seed);
        let w = random(&[5], &mut seed).into_data();
        let err = fd_check(x, |g, x| {
            let y = g.softmax_lastdim(x);
            g.weighted_sum(y, w.clone()).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let mut seed = 12;
        let x = random(&[3, 4], &mut seed);
        let w = random(&[3, 4], &mut seed).into_data();
        let err = fd_check(x, |g, x| {
            let y = g.log_softmax_lastdim(x);
            g.weighted_sum(y, w.clone()).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layernorm_values() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::filled(&[4], 1.0));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::matrix(1, 4, vec![5.0; 4]).unwrap());
        let y = g.layernorm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let ones = g.constant(Tensor::filled(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let y = g.layernorm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let mut seed = 3;
        let x = random(&[3, 5], &mut seed);
        let gain = random(&[5], &mut seed);
        let bias = random(&[5], &mut seed);
        let w = random(&[3, 5], &mut seed).into_data();
        let (gc, bc, wc) = (gain.clone(), bias.clone(), w.clone());
        let err = fd_check(x.clone(), move |g, x| {
            let gv = g.constant(gc.clone());
            let bv = g.constant(bc.clone());
            let y = g.layernorm(x, gv, bv, 1e-5).unwrap();
            g.weighted_sum(y, wc.clone()).unwrap()
        });
        assert!(err < 1e-6, "input {err}");
        let (xc, wc) = (x.clone(), w.clone());
        let err = fd_check(gain, move |g, gv| {
            let xv = g.constant(xc.clone());
            let bv = g.constant(bias.clone());
            let y = g.layernorm(xv, gv, bv, 1e-5).unwrap();
            g.weighted_sum(y, wc.clone()).unwrap()
        });
        assert!(err < 1e-6, "gain {err}");
    }

    #[test]
    fn gelu_exp_log_gradients() {
        let mut seed = 5;
        let x = random(&[6], &mut seed);
        let w = random(&[6], &mut seed).into_data();
        let wc = w.clone();
        assert!(
            fd_check(x.clone(), move |g, x| {
                let y = g.gelu(x);
                g.weighted_sum(y, wc.clone()).unwrap()
            }) < 1e-6
        );
        let wc = w.clone();
        assert!(
            fd_check(x.clone(), move |g, x| {
                let y = g.exp(x);
                g.weighted_sum(y, wc.clone()).unwrap()
            }) < 1e-6
        );
        let pos = x.map(|v| v.abs() + 0.5);
        assert!(
            fd_check(pos, move |g, x| {
                let y = g.log(x);
                g.weighted_sum(y, w.clone()).unwrap()
            }) < 1e-6
        );
    }

    #[test]
    fn squared_l2_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![4.0, 6.0]).unwrap());
        let d = g.squared_l2(a, b).unwrap();
        assert_eq!(g.value(d).item(), 25.0);
        let same = g.squared_l2(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let c = g.constant(Tensor::vector(vec![1.0]).unwrap());
        assert!(matches!(g.squared_l2(a, c), Err(Error::Dimension(_))));

        let mut seed = 9;
        let other = random(&[4], &mut seed);
        let err = fd_check(random(&[4], &mut seed), move |g, x| {
            let o = g.constant(other.clone());
            g.squared_l2(x, o).unwrap()
        });
        assert!(err < 1e-6);
    }

    #[test]
    fn pairwise_and_structural_ops_gradients() {
        let mut seed = 21;
        let b = random(&[3, 4], &mut seed);
        let w = random(&[2, 3], &mut seed).into_data();
        let err = fd_check(random(&[2, 4], &mut seed), move |g, x| {
            let bv = g.constant(b.clone());
            let d = g.pairwise_sq_dist(x, bv).unwrap();
            g.weighted_sum(d, w.clone()).unwrap()
        });
        assert!(err < 1e-6, "pairwise {err}");

        let w = random(&[4, 5], &mut seed).into_data();
        let err = fd_check(random(&[4, 3], &mut seed), move |g, x| {
            let t = g.transpose(x).unwrap();
            let left = g.slice_cols(x, 0, 1).unwrap();
            let right = g.slice_cols(x, 1, 2).unwrap();
            let swapped = g.concat_cols(&[right, left]).unwrap();
            let top = g.slice_rows(swapped, 0, 2).unwrap();
            let bottom = g.slice_rows(x, 2, 2).unwrap();
            let stacked = g.concat_rows(&[bottom, top]).unwrap();
            let wide = g.concat_cols(&[stacked, stacked]).unwrap();
            let sq = g.matmul(t, x).unwrap();
            let s = g.sum(sq);
            let part = g.slice_cols(wide, 0, 5).unwrap();
            let ws = g.weighted_sum(part, w.clone()).unwrap();
            g.add(ws, s).unwrap()
        });
        assert!(err < 1e-6, "structural {err}");
    }

    #[test]
    fn scalar_ops_gradients() {
        let mut seed = 31;
        let err = fd_check(random(&[3], &mut seed).map(|v| v + 2.0), |g, x| {
            let s = g.sum(x);
            let s2 = g.scale(s, 0.5);
            let num = g.add_scalar(s2, 1.0);
            let den = g.squared_l2(x, x).unwrap();
            let zero = g.constant(Tensor::zeros(&[3]));
            let sq = g.squared_l2(x, zero).unwrap();
            let den = g.add(den, sq).unwrap();
            let den = g.add_scalar(den, 1.0);
            let q = g.div(num, den).unwrap();
            let m = g.mean_rows(x);
            let ms = g.sum(m);
            let diff = g.sub(q, ms).unwrap();
            g.exp(diff)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn add_row_gradient() {
        let mut seed = 41;
        let x = random(&[3, 2], &mut seed);
        let w = random(&[3, 2], &mut seed).into_data();
        let err = fd_check(random(&[2], &mut seed), move |g, r| {
            let xv = g.constant(x.clone());
            let y = g.add_row(xv, r).unwrap();
            g.weighted_sum(y, w.clone()).unwrap()
        });
        assert!(err < 1e-6);
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![2.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1]));
        let l = g.squared_l2(x, zero).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn diamond_graph_sums_fan_out() {
        // y = exp(x) * 3 + exp(x)^2 style diamond: a = 2x, b = x², loss = sum(a) + sum(b)
        // d/dx = 2 + 2x; at x = 3 that is 8.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![3.0]).unwrap());
        let a = g.scale(x, 2.0);
        let zero = g.constant(Tensor::zeros(&[1]));
        let b = g.squared_l2(x, zero).unwrap();
        let sa = g.sum(a);
        let l = g.add(sa, b).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn operations_are_deterministic() {
        let build = || {
            let mut seed = 77;
            let mut g = Graph::<f32>::new();
            let a = g.param(random(&[4, 8], &mut seed).cast());
            let b = g.param(random(&[8, 8], &mut seed).cast());
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_lastdim(c);
            let l = g.sum(s);
            let e = g.gelu(c);
            let el = g.sum(e);
            let t = g.add(l, el).unwrap();
            g.backward(t).unwrap();
            (g.value(c).clone(), g.grad(a).unwrap(), g.grad(b).unwrap())
        };
        let (x, y) = (build(), build());
        assert_eq!(
            x.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(x.1, y.1);
        assert_eq!(x.2, y.2);
    }
}
