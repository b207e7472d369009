use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumGroups { x: Var, group: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Mse { pred: Var, target: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of primitive operations in execution order.
///
/// Nodes are appended as ops run, so every node's inputs precede it.
/// [`Graph::backward`] may be called once; afterwards the graph only
/// serves its recorded values.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let mut sum = 0.0f64;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (v.as_f64() - max).exp();
        sum += e;
        *o = T::of(e);
    }
    for o in out.iter_mut() {
        *o = T::of(o.as_f64() / sum);
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0].as_f64()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .ok_or_else(|| Error::ShapeMismatch {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            })
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = self.dims2(op, a)?;
        let (br, bc) = self.dims2(op, b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != kb {
            return Err(self.mismatch(op, a, b));
        }
        let b_strides = if trans_b {
            (1, bc as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value.data,
            (k as isize, 1),
            &self.nodes[b.0].value.data,
            b_strides,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op_name, a, b));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row_bias", x)?;
        if self.nodes[bias.0].value.numel() != c {
            return Err(self.mismatch("add_row_bias", x, bias));
        }
        let bv = &self.nodes[bias.0].value.data;
        let mut data = self.nodes[x.0].value.data.clone();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o = *o + b;
            }
        }
        let shape = self.shape(x).to_vec();
        debug_assert_eq!(r * c, data.len());
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRowBias(x, bias), rg))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = &self.nodes[x.0].value;
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| f(e)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.map_unary(x, |e| e * s, Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_unary(x, |e| e * e, Op::Square(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, |e| T::of(gelu(e.as_f64())), Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_unary(x, |e| T::of(softplus(e.as_f64())), Op::Softplus(x))
    }

    /// Row-wise softmax (last dimension) with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2("softmax", x)?;
        let v = &self.nodes[x.0].value;
        let mut data = vec![T::zero(); v.numel()];
        for (row, out) in v.data.chunks(c).zip(data.chunks_mut(c)) {
            softmax_row(row, out);
        }
        let value = Tensor::new(v.shape.clone(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", x)?;
        if self.nodes[gamma.0].value.numel() != c {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.nodes[beta.0].value.numel() != c {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![0.0f64; r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j].as_f64() - mean) * rs;
                xhat[i * c + j] = T::of(h);
                out[i * c + j] = T::of(h * g[j].as_f64() + b[j].as_f64());
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let v = &self.nodes[x.0].value.data;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0]
            .value
            .reshape(shape.to_vec())
            .map_err(|_| Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data.iter().map(|e| e.as_f64()).sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::of(s)), Op::MeanAll(x), rg)
    }

    /// Sums consecutive groups of `group` rows: `[G·group, c] -> [G, c]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims2("sum_row_groups", x)?;
        if group == 0 || r % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "sum_row_groups",
                lhs: self.shape(x).to_vec(),
                rhs: vec![group],
            });
        }
        let v = &self.nodes[x.0].value.data;
        let groups = r / group;
        let mut acc = vec![0.0f64; groups * c];
        for (i, row) in v.chunks(c).enumerate() {
            let dst = &mut acc[(i / group) * c..(i / group + 1) * c];
            for (d, e) in dst.iter_mut().zip(row) {
                *d += e.as_f64();
            }
        }
        let data = acc.into_iter().map(T::of).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![groups, c], data)?,
            Op::SumGroups { x, group },
            rg,
        ))
    }

    /// Selects rows of a matrix by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", x)?;
        if index.is_empty() || index.iter().any(|&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![index.iter().copied().max().unwrap_or(0) + 1],
            });
        }
        let v = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &index)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| {
            Error::InvalidTensor("concat_rows needs at least one input".into())
        })?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let v = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(r * len);
        for row in v.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| {
            Error::InvalidTensor("concat_cols needs at least one input".into())
        })?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let p = &self.nodes[pred.0].value.data;
        let s: f64 = p
            .iter()
            .zip(&target.data)
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(T::of(s)),
            Op::Mse {
                pred,
                target: target.data.clone(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let v = &self.nodes[logits.0].value.data;
        let mut probs = vec![T::zero(); b * c];
        let mut loss = 0.0f64;
        for (i, (row, out)) in v.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, e| m.max(e.as_f64()));
            let lse = max + row.iter().map(|e| (e.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]].as_f64();
            softmax_row(row, out);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::of(loss / b as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = val(a).dims2().unwrap();
                let n = node.value.shape[1];
                if needs(a) {
                    // dA = dC · B (trans) or dC · Bᵀ
                    let bs = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let ga = slot(grads, a, m * k);
                    T::gemm(m, n, k, g, (n as isize, 1), &val(b).data, bs, T::one(), ga);
                }
                if needs(b) {
                    let ga = &val(a).data;
                    let gb = slot(grads, b, n * k);
                    if trans_b {
                        // dB[n,k] = dCᵀ · A
                        T::gemm(n, m, k, g, (1, n as isize), ga, (k as isize, 1), T::one(), gb);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        T::gemm(k, m, n, ga, (1, k as isize), g, (n as isize, 1), T::one(), gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if needs(b) {
                    for (d, &e) in slot(grads, b, g.len()).iter_mut().zip(g) {
                        *d = *d - e;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let other = &val(b).data;
                    for ((d, &e), &o) in slot(grads, a, g.len()).iter_mut().zip(g).zip(other) {
                        *d = *d + e * o;
                    }
                }
                if needs(b) {
                    let other = &val(a).data;
                    for ((d, &e), &o) in slot(grads, b, g.len()).iter_mut().zip(g).zip(other) {
                        *d = *d + e * o;
                    }
                }
            }
            &Op::AddRowBias(x, bias) => {
                if needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if needs(bias) {
                    let c = val(bias).numel();
                    let mut acc = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        for (a, e) in acc.iter_mut().zip(row) {
                            *a += e.as_f64();
                        }
                    }
                    for (d, a) in slot(grads, bias, c).iter_mut().zip(acc) {
                        *d = *d + T::of(a);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if needs(x) {
                    for (d, &e) in slot(grads, x, g.len()).iter_mut().zip(g) {
                        *d = *d + e * s;
                    }
                }
            }
            &Op::Square(x) => {
                if needs(x) {
                    let two = T::of(2.0);
                    let xv = &val(x).data;
                    for ((d, &e), &xe) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        *d = *d + two * xe * e;
                    }
                }
            }
            &Op::Softmax(x) => {
                if needs(x) {
                    let c = *node.value.shape.last().unwrap();
                    let y = &node.value.data;
                    let dx = slot(grads, x, g.len());
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + T::of(yy.as_f64() * (gg.as_f64() - dot));
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).numel();
                let gam = &val(*gamma).data;
                if needs(*beta) {
                    let mut acc = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        for (a, e) in acc.iter_mut().zip(row) {
                            *a += e.as_f64();
                        }
                    }
                    for (d, a) in slot(grads, *beta, c).iter_mut().zip(acc) {
                        *d = *d + T::of(a);
                    }
                }
                if needs(*gamma) {
                    let mut acc = vec![0.0f64; c];
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((a, e), h) in acc.iter_mut().zip(row).zip(hrow) {
                            *a += e.as_f64() * h.as_f64();
                        }
                    }
                    for (d, a) in slot(grads, *gamma, c).iter_mut().zip(acc) {
                        *d = *d + T::of(a);
                    }
                }
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0f64; c];
                    for (r, ((grow, hrow), drow)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            dh[j] = grow[j].as_f64() * gam[j].as_f64();
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j].as_f64();
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let v = rstd[r] * (dh[j] - mean_dh - hrow[j].as_f64() * mean_dh_h);
                            drow[j] = drow[j] + T::of(v);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if needs(x) {
                    let xv = &val(x).data;
                    for ((d, &e), &xe) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        *d = *d + e * T::of(gelu_grad(xe.as_f64()));
                    }
                }
            }
            &Op::Softplus(x) => {
                if needs(x) {
                    let xv = &val(x).data;
                    for ((d, &e), &xe) in slot(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        *d = *d + e * T::of(sigmoid(xe.as_f64()));
                    }
                }
            }
            &Op::Transpose(x) => {
                if needs(x) {
                    let (r, c) = val(x).dims2().unwrap();
                    let dx = slot(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            &Op::SumAll(x) => {
                if needs(x) {
                    let n = val(x).numel();
                    for d in slot(grads, x, n).iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            &Op::MeanAll(x) => {
                if needs(x) {
                    let n = val(x).numel();
                    let e = T::of(g[0].as_f64() / n as f64);
                    for d in slot(grads, x, n).iter_mut() {
                        *d = *d + e;
                    }
                }
            }
            &Op::SumGroups { x, group } => {
                if needs(x) {
                    let c = node.value.shape[1];
                    let n = val(x).numel();
                    let dx = slot(grads, x, n);
                    for (i, row) in dx.chunks_mut(c).enumerate() {
                        add_into(row, &g[(i / group) * c..(i / group + 1) * c]);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if needs(*x) {
                    let c = node.value.shape[1];
                    let n = val(*x).numel();
                    let dx = slot(grads, *x, n);
                    for (k, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::SliceCols { x, start } => {
                if needs(x) {
                    let (r, c) = val(x).dims2().unwrap();
                    let w = node.value.shape[1];
                    let dx = slot(grads, x, r * c);
                    for i in 0..r {
                        add_into(&mut dx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2().unwrap();
                    if needs(p) {
                        let dp = slot(grads, p, r * w);
                        for i in 0..r {
                            add_into(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + off..i * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Mse { pred, target } => {
                if needs(*pred) {
                    let p = &val(*pred).data;
                    let k = 2.0 * g[0].as_f64() / p.len() as f64;
                    for ((d, a), b) in slot(grads, *pred, p.len()).iter_mut().zip(p).zip(target) {
                        *d = *d + T::of(k * (a.as_f64() - b.as_f64()));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let k = g[0].as_f64() / b as f64;
                    let dl = slot(grads, *logits, b * c);
                    for (i, (drow, prow)) in dl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            *d = *d + T::of(k * (p.as_f64() - onehot));
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients produced by one backward pass, indexed by graph node.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros of `like`'s shape when `v`
    /// received no gradient.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
