//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Every primitive appends one node holding its forward value and the
//! information its backward rule needs. Nodes are appended in evaluation
//! order, so walking the tape backwards is a reverse topological order and
//! each node is visited exactly once.
//!
//! Tensors inside a graph are treated as matrices: 1-D tensors are a single
//! row, and row-wise primitives (softmax, layer norm, ...) act on the last
//! axis.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, Real, Tensor};
use crate::transducer::rnnt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op<T> {
    Constant,
    Input,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, axis: Axis, start: usize },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { a: Var, inv_std: Vec<T> },
    DepthwiseConv { x: Var, kernel: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Mean { a: Var, axis: Axis },
    Sum(Var),
    LstmCell { gates: Var, c_prev: Var },
    ReplaceRows { a: Var, emb: Var, rows: Vec<usize> },
    PairAdd(Var, Var),
    L2NormRows { a: Var, eps: T, norms: Vec<T> },
    Gather { a: Var, idx: Vec<usize>, k: usize },
    Dropout { a: Var, mask: Vec<T> },
    Rnnt { lattice: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward/backward computation. Parameters are read from a
/// borrowed [`ParamStore`]; each parameter becomes one leaf node no matter
/// how often it is used, so shared weights accumulate their gradients.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Input | Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// Copies the current value into a fresh constant, cutting the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(data, src.shape().to_vec()).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let value = Tensor::new(out, vec![m, n])?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() || va.dims2() != vb.dims2() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(data, va.shape().to_vec())?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -T::one());
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, n] + [n]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let value = Tensor::new(data, self.shape(a).to_vec())?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `[m, n] * [n]`, elementwise with the row broadcast.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::shape("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x *= y;
            }
        }
        let value = Tensor::new(data, self.shape(a).to_vec())?;
        Ok(self.push(value, Op::MulRow(a, row), &[a, row]))
    }

    /// `[m, n] * [m]`, scaling row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(col).len() != m {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for x in &mut data[i * n..(i + 1) * n] {
                *x *= c[i];
            }
        }
        let value = Tensor::new(data, self.shape(a).to_vec())?;
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat of zero tensors".into()));
        };
        let (m0, n0) = self.dims(first);
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (m, n) = self.dims(p);
                    if n != n0 {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    data.extend_from_slice(self.value(p).data());
                    rows += m;
                }
                Tensor::new(data, vec![rows, n0])?
            }
            Axis::Cols => {
                let mut total = 0;
                for &p in parts {
                    let (m, n) = self.dims(p);
                    if m != m0 {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    total += n;
                }
                let mut data = Vec::with_capacity(m0 * total);
                for i in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(data, vec![m0, total])?
            }
        };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let value = match axis {
            Axis::Rows => {
                if start + len > m {
                    return Err(Error::shape("slice", src.shape(), &[start, len]));
                }
                Tensor::new(src.data()[start * n..(start + len) * n].to_vec(), vec![len, n])?
            }
            Axis::Cols => {
                if start + len > n {
                    return Err(Error::shape("slice", src.shape(), &[start, len]));
                }
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&src.row(i)[start..start + len]);
                }
                Tensor::new(data, vec![m, len])?
            }
        };
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(data, vec![n, m]).expect("transpose shape");
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn rowwise(&mut self, a: Var, f: impl Fn(&[T], &mut [T])) -> Tensor<T> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            f(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        Tensor::new(out, self.shape(a).to_vec()).expect("same shape")
    }

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.rowwise(a, |x, y| {
            let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in y.iter_mut().zip(x) {
                *o = (v - mx).exp();
                s += *o;
            }
            y.iter_mut().for_each(|o| *o /= s);
        });
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = self.rowwise(a, |x, y| {
            let lse = log_sum_exp(x);
            for (o, &v) in y.iter_mut().zip(x) {
                *o = v - lse;
            }
        });
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m, 1]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let data = (0..m).map(|i| log_sum_exp(&src[i * n..(i + 1) * n])).collect();
        let value = Tensor::new(data, vec![m, 1]).expect("lse shape");
        self.push(value, Op::LogSumExp(a), &[a])
    }

    /// Row-wise normalization to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let x = &src[i * n..(i + 1) * n];
            let mean = x.iter().copied().sum::<T>() / nf;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(x) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::new(out, self.shape(a).to_vec()).expect("same shape");
        self.push(value, Op::LayerNorm { a, inv_std }, &[a])
    }

    /// Depthwise 1-D convolution over time with centered zero padding.
    /// `x: [T, D]`, `kernel: [K, D]`, `K` odd.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, d) = self.dims(x);
        let (k, kd) = self.dims(kernel);
        if kd != d || k % 2 == 0 {
            return Err(Error::shape("depthwise_conv", self.shape(x), self.shape(kernel)));
        }
        let pad = k / 2;
        let xs = self.value(x).data();
        let ws = self.value(kernel).data();
        let mut out = vec![T::zero(); t * d];
        for ti in 0..t {
            for ki in 0..k {
                let src = ti + ki;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                let row = &xs[s * d..(s + 1) * d];
                let w = &ws[ki * d..(ki + 1) * d];
                for ((o, &xv), &wv) in out[ti * d..(ti + 1) * d].iter_mut().zip(row).zip(w) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(out, vec![t, d])?;
        Ok(self.push(value, Op::DepthwiseConv { x, kernel }, &[x, kernel]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// `x * sigmoid(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    /// Gated linear unit over the last axis: `[m, 2n] -> [m, n]`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let (m, n2) = self.dims(a);
        if n2 % 2 != 0 {
            return Err(Error::shape("glu", self.shape(a), &[n2 / 2 * 2]));
        }
        let n = n2 / 2;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &src[i * n2..(i + 1) * n2];
            out.extend((0..n).map(|j| row[j] * sigmoid(row[n + j])));
        }
        let value = Tensor::new(out, vec![m, n])?;
        Ok(self.push(value, Op::Glu(a), &[a]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { token: id, vocab: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(out, vec![ids.len(), d])?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over rows (`[m, n] -> [1, n]`) or columns (`[m, n] -> [m, 1]`).
    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let value = match axis {
            Axis::Rows => {
                let mut out = vec![T::zero(); n];
                for i in 0..m {
                    for (o, &x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                let mf = T::of(m as f64);
                out.iter_mut().for_each(|o| *o /= mf);
                Tensor::new(out, vec![1, n])
            }
            Axis::Cols => {
                let nf = T::of(n as f64);
                let out = (0..m)
                    .map(|i| src[i * n..(i + 1) * n].iter().copied().sum::<T>() / nf)
                    .collect();
                Tensor::new(out, vec![m, 1])
            }
        }
        .expect("mean shape");
        self.push(value, Op::Mean { a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// One LSTM cell update. `gates: [n, 4H]` are the pre-activations in
    /// input/forget/cell/output order, `c_prev: [n, H]`. Returns `[n, 2H]`
    /// holding the new hidden state followed by the new cell state.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (n, h4) = self.dims(gates);
        let (n2, h) = self.dims(c_prev);
        if n != n2 || h4 != 4 * h {
            return Err(Error::shape("lstm_cell", self.shape(gates), self.shape(c_prev)));
        }
        let gs = self.value(gates).data();
        let cs = self.value(c_prev).data();
        let mut out = vec![T::zero(); n * 2 * h];
        for r in 0..n {
            let g = &gs[r * h4..(r + 1) * h4];
            for j in 0..h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[h + j]);
                let c_hat = g[2 * h + j].tanh();
                let o = sigmoid(g[3 * h + j]);
                let c = f * cs[r * h + j] + i * c_hat;
                out[r * 2 * h + j] = o * c.tanh();
                out[r * 2 * h + h + j] = c;
            }
        }
        let value = Tensor::new(out, vec![n, 2 * h])?;
        Ok(self.push(value, Op::LstmCell { gates, c_prev }, &[gates, c_prev]))
    }

    /// Replaces the listed rows of `a: [m, n]` with `emb: [n]`.
    pub fn replace_rows(&mut self, a: Var, emb: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(emb).len() != n {
            return Err(Error::shape("replace_rows", self.shape(a), self.shape(emb)));
        }
        let mut data = self.value(a).data().to_vec();
        let e = self.value(emb).data();
        for &r in rows {
            if r >= m {
                return Err(Error::shape("replace_rows", self.shape(a), &[r]));
            }
            data[r * n..(r + 1) * n].copy_from_slice(e);
        }
        let value = Tensor::new(data, self.shape(a).to_vec())?;
        Ok(self.push(
            value,
            Op::ReplaceRows {
                a,
                emb,
                rows: rows.to_vec(),
            },
            &[a, emb],
        ))
    }

    /// All pairwise row sums: `a: [P, d]`, `b: [Q, d]` -> `[P*Q, d]` with
    /// row `p*Q + q` equal to `a[p] + b[q]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, d) = self.dims(a);
        let (q, d2) = self.dims(b);
        if d != d2 {
            return Err(Error::shape("pair_add", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(p * q * d);
        for i in 0..p {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..q {
                out.extend(ar.iter().zip(&bv[j * d..(j + 1) * d]).map(|(&x, &y)| x + y));
            }
        }
        let value = Tensor::new(out, vec![p * q, d])?;
        Ok(self.push(value, Op::PairAdd(a, b), &[a, b]))
    }

    /// Divides each row by its L2 norm plus `eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let x = &src[i * n..(i + 1) * n];
            let nrm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = nrm + eps;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(x) {
                *o = v / d;
            }
            norms.push(nrm);
        }
        let value = Tensor::new(out, self.shape(a).to_vec()).expect("same shape");
        self.push(value, Op::L2NormRows { a, eps, norms }, &[a])
    }

    /// Picks `k` columns per row: output `[m, k]` with
    /// `out[r, j] = a[r, idx[r*k + j]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m * k || idx.iter().any(|&c| c >= n) {
            return Err(Error::shape("gather", self.shape(a), &[m, k]));
        }
        let src = self.value(a).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(p, &c)| src[(p / k.max(1)) * n + c])
            .collect();
        let value = Tensor::new(out, vec![m, k])?;
        Ok(self.push(
            value,
            Op::Gather {
                a,
                idx: idx.to_vec(),
                k,
            },
            &[a],
        ))
    }

    /// Inverted dropout with a caller-supplied RNG. `p == 0` is the identity
    /// and records nothing.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(data, src.shape().to_vec()).expect("same shape");
        self.push(value, Op::Dropout { a, mask }, &[a])
    }

    /// Transducer loss `-log P(y|x)` over a lattice of log-probabilities
    /// laid out `[T*(U+1), V+1]` (row `t*(U+1) + u`). The exact gradient is
    /// computed by the forward-backward recursions at forward time.
    pub fn rnnt_loss(&mut self, lattice: Var, frames: usize, labels: &[usize], blank: usize) -> Result<Var> {
        let (rows, width) = self.dims(lattice);
        let u1 = labels.len() + 1;
        if frames == 0 || rows != frames * u1 {
            return Err(Error::LatticeMismatch {
                lattice: rows.checked_div(frames).unwrap_or(0),
                labels: u1,
            });
        }
        let view = rnnt::LatticeView::new(self.value(lattice).data(), frames, u1, width)?;
        let (loss, grad) = rnnt::loss_and_grad(&view, labels, blank)?;
        Ok(self.push(Tensor::scalar(loss), Op::Rnnt { lattice, grad }, &[lattice]))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Input | Op::Param | Op::Constant);
            if is_leaf {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.dims(*a);
                let (br, bc) = self.dims(*b);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    if !*ta {
                        matmul_into(gy, false, bv, !*tb, m, n, k, ga, true);
                    } else {
                        matmul_into(bv, *tb, gy, true, k, n, m, ga, true);
                    }
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    if !*tb {
                        matmul_into(av, !*ta, gy, false, k, m, n, gb, true);
                    } else {
                        matmul_into(gy, true, av, *ta, n, m, k, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        axpy(slot(grads, *v, gy.len()), gy);
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.needs(*a) {
                    axpy(slot(grads, *a, gy.len()), gy);
                }
                if self.needs(*r) {
                    let n = self.value(*r).len();
                    let g = slot(grads, *r, n);
                    for chunk in gy.chunks(n) {
                        axpy(g, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(bv) {
                        *o += d * x;
                    }
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, gy.len());
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *o += d * x;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let n = self.value(*r).len();
                let rv = self.value(*r).data();
                let av = self.value(*a).data();
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for (i, (o, &d)) in g.iter_mut().zip(gy).enumerate() {
                        *o += d * rv[i % n];
                    }
                }
                if self.needs(*r) {
                    let g = slot(grads, *r, n);
                    for (i, (&d, &x)) in gy.iter().zip(av).enumerate() {
                        g[i % n] += d * x;
                    }
                }
            }
            Op::MulCol(a, c) => {
                let m = self.value(*c).len();
                let n = gy.len() / m.max(1);
                let cv = self.value(*c).data();
                let av = self.value(*a).data();
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for (i, (o, &d)) in g.iter_mut().zip(gy).enumerate() {
                        *o += d * cv[i / n];
                    }
                }
                if self.needs(*c) {
                    let g = slot(grads, *c, m);
                    for (i, (&d, &x)) in gy.iter().zip(av).enumerate() {
                        g[i / n] += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o += d * *c;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (_, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (m, n) = self.dims(p);
                    if self.needs(p) {
                        let g = slot(grads, p, m * n);
                        match axis {
                            Axis::Rows => axpy(g, &gy[offset * n..(offset + m) * n]),
                            Axis::Cols => {
                                for i in 0..m {
                                    axpy(
                                        &mut g[i * n..(i + 1) * n],
                                        &gy[i * total + offset..i * total + offset + n],
                                    );
                                }
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Rows => m,
                        Axis::Cols => n,
                    };
                }
            }
            Op::Slice { a, axis, start } => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let (om, on) = node.value.dims2();
                    let g = slot(grads, *a, m * n);
                    match axis {
                        Axis::Rows => axpy(&mut g[start * n..(start + om) * n], gy),
                        Axis::Cols => {
                            for i in 0..m {
                                axpy(&mut g[i * n + start..i * n + start + on], &gy[i * on..(i + 1) * on]);
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let g = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    axpy(slot(grads, *a, gy.len()), gy);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let (_, n) = node.value.dims2();
                    let g = slot(grads, *a, gy.len());
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((o, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += p * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.needs(*a) {
                    let (_, n) = node.value.dims2();
                    let g = slot(grads, *a, gy.len());
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let total: T = dr.iter().copied().sum();
                        for ((o, &ly), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += d - ly.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let x = self.value(*a).data();
                    let g = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[i] * (x[i * n + j] - y[i]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                if self.needs(*a) {
                    let (_, n) = node.value.dims2();
                    let nf = T::of(n as f64);
                    let g = slot(grads, *a, gy.len());
                    for (i, ((gr, yr), dr)) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)).enumerate() {
                        let mean_d = dr.iter().copied().sum::<T>() / nf;
                        let mean_dy = dr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / nf;
                        for ((o, &d), &v) in gr.iter_mut().zip(dr).zip(yr) {
                            *o += inv_std[i] * (d - mean_d - v * mean_dy);
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let (t, d) = self.dims(*x);
                let (k, _) = self.dims(*kernel);
                let pad = k / 2;
                let xs = self.value(*x).data();
                let ws = self.value(*kernel).data();
                let need_x = self.needs(*x);
                let need_w = self.needs(*kernel);
                let mut gx = if need_x { Some(vec![T::zero(); t * d]) } else { None };
                let mut gw = if need_w { Some(vec![T::zero(); k * d]) } else { None };
                for ti in 0..t {
                    let dy = &gy[ti * d..(ti + 1) * d];
                    for ki in 0..k {
                        let src = ti + ki;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        if let Some(gx) = gx.as_mut() {
                            for ((o, &dv), &wv) in gx[s * d..(s + 1) * d].iter_mut().zip(dy).zip(&ws[ki * d..(ki + 1) * d]) {
                                *o += dv * wv;
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            for ((o, &dv), &xv) in gw[ki * d..(ki + 1) * d].iter_mut().zip(dy).zip(&xs[s * d..(s + 1) * d]) {
                                *o += dv * xv;
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    axpy(slot(grads, *x, t * d), &gx);
                }
                if let Some(gw) = gw {
                    axpy(slot(grads, *kernel, k * d), &gw);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for ((o, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                        *o += d * s * (T::one() - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for ((o, &d), &t) in g.iter_mut().zip(gy).zip(y) {
                        *o += d * (T::one() - t * t);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let g = slot(grads, *a, gy.len());
                    for ((o, &d), &xv) in g.iter_mut().zip(gy).zip(x) {
                        if xv > T::zero() {
                            *o += d;
                        }
                    }
                }
            }
            Op::Swish(a) => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let g = slot(grads, *a, gy.len());
                    for ((o, &d), &xv) in g.iter_mut().zip(gy).zip(x) {
                        let s = sigmoid(xv);
                        *o += d * (s + xv * s * (T::one() - s));
                    }
                }
            }
            Op::Glu(a) => {
                if self.needs(*a) {
                    let (m, n2) = self.dims(*a);
                    let n = n2 / 2;
                    let x = self.value(*a).data();
                    let g = slot(grads, *a, m * n2);
                    for i in 0..m {
                        for j in 0..n {
                            let lin = x[i * n2 + j];
                            let s = sigmoid(x[i * n2 + n + j]);
                            let d = gy[i * n + j];
                            g[i * n2 + j] += d * s;
                            g[i * n2 + n + j] += d * lin * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let (v, d) = self.dims(*table);
                    let g = slot(grads, *table, v * d);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Mean { a, axis } => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let g = slot(grads, *a, m * n);
                    match axis {
                        Axis::Rows => {
                            let mf = T::of(m as f64);
                            for i in 0..m {
                                for j in 0..n {
                                    g[i * n + j] += gy[j] / mf;
                                }
                            }
                        }
                        Axis::Cols => {
                            let nf = T::of(n as f64);
                            for i in 0..m {
                                for j in 0..n {
                                    g[i * n + j] += gy[i] / nf;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).len();
                    let g = slot(grads, *a, n);
                    g.iter_mut().for_each(|o| *o += gy[0]);
                }
            }
            Op::LstmCell { gates, c_prev } => {
                let (n, h4) = self.dims(*gates);
                let h = h4 / 4;
                let gs = self.value(*gates).data();
                let cs = self.value(*c_prev).data();
                let mut dg = vec![T::zero(); n * h4];
                let mut dc_prev = vec![T::zero(); n * h];
                for r in 0..n {
                    let g = &gs[r * h4..(r + 1) * h4];
                    for j in 0..h {
                        let i = sigmoid(g[j]);
                        let f = sigmoid(g[h + j]);
                        let c_hat = g[2 * h + j].tanh();
                        let o = sigmoid(g[3 * h + j]);
                        let c = y[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let dh = gy[r * 2 * h + j];
                        let dc = gy[r * 2 * h + h + j] + dh * o * (T::one() - tc * tc);
                        let base = r * h4;
                        dg[base + j] = dc * c_hat * i * (T::one() - i);
                        dg[base + h + j] = dc * cs[r * h + j] * f * (T::one() - f);
                        dg[base + 2 * h + j] = dc * i * (T::one() - c_hat * c_hat);
                        dg[base + 3 * h + j] = dh * tc * o * (T::one() - o);
                        dc_prev[r * h + j] = dc * f;
                    }
                }
                if self.needs(*gates) {
                    axpy(slot(grads, *gates, n * h4), &dg);
                }
                if self.needs(*c_prev) {
                    axpy(slot(grads, *c_prev, n * h), &dc_prev);
                }
            }
            Op::ReplaceRows { a, emb, rows } => {
                let (m, n) = self.dims(*a);
                if self.needs(*a) {
                    let mut d = gy.to_vec();
                    for &r in rows {
                        d[r * n..(r + 1) * n].iter_mut().for_each(|x| *x = T::zero());
                    }
                    axpy(slot(grads, *a, m * n), &d);
                }
                if self.needs(*emb) {
                    let g = slot(grads, *emb, n);
                    for &r in rows {
                        axpy(g, &gy[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::PairAdd(a, b) => {
                let (p, d) = self.dims(*a);
                let (q, _) = self.dims(*b);
                if self.needs(*a) {
                    let g = slot(grads, *a, p * d);
                    for i in 0..p {
                        for j in 0..q {
                            let r = (i * q + j) * d;
                            axpy(&mut g[i * d..(i + 1) * d], &gy[r..r + d]);
                        }
                    }
                }
                if self.needs(*b) {
                    let g = slot(grads, *b, q * d);
                    for i in 0..p {
                        for j in 0..q {
                            let r = (i * q + j) * d;
                            axpy(&mut g[j * d..(j + 1) * d], &gy[r..r + d]);
                        }
                    }
                }
            }
            Op::L2NormRows { a, eps, norms } => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let x = self.value(*a).data();
                    let g = slot(grads, *a, m * n);
                    for i in 0..m {
                        let nrm = norms[i];
                        let den = nrm + *eps;
                        let xr = &x[i * n..(i + 1) * n];
                        let dr = &gy[i * n..(i + 1) * n];
                        let coef = if nrm > T::zero() {
                            xr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>() / (nrm * den * den)
                        } else {
                            T::zero()
                        };
                        for ((o, &d), &xv) in g[i * n..(i + 1) * n].iter_mut().zip(dr).zip(xr) {
                            *o += d / den - xv * coef;
                        }
                    }
                }
            }
            Op::Gather { a, idx, k } => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let g = slot(grads, *a, m * n);
                    for (p, &c) in idx.iter().enumerate() {
                        g[(p / (*k).max(1)) * n + c] += gy[p];
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(*a) {
                    let g = slot(grads, *a, gy.len());
                    for ((o, &d), &mk) in g.iter_mut().zip(gy).zip(mask) {
                        *o += d * mk;
                    }
                }
            }
            Op::Rnnt { lattice, grad } => {
                if self.needs(*lattice) {
                    let g = slot(grads, *lattice, grad.len());
                    for (o, &d) in g.iter_mut().zip(grad) {
                        *o += gy[0] * d;
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Max-subtracted log-sum-exp of a slice.
pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + x.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, or `None` when the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter touched by the graph, in parameter order.
    pub fn params(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn swish_at_zero_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let x = g.constant(t(&[0.0], &[1]));
        let y = g.swish(x);
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let x = g.constant(t(&[0.0, 0.0], &[1, 2]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let x = g.constant(t(&[1000.0, 1000.0], &[1, 2]));
        let y = g.log_sum_exp(x);
        let v = g.value(y).data()[0];
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9, "{v}");
    }

    #[test]
    fn backward_of_sum_is_ones_and_of_square_is_twice() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let p = g.input(t(&[1.5, -2.0, 3.0], &[3]));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new(&store);
        let p = g.input(t(&[1.5, -2.0, 3.0], &[3]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[3.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let p = g.input(t(&[1.0, 2.0], &[2]));
        assert!(matches!(g.backward(p), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::<f64>::new(&store);
        let a = g.constant(t(&[1.0; 6], &[2, 3]));
        let b = g.constant(t(&[1.0; 6], &[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn shared_param_is_one_leaf() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", t(&[2.0], &[1]));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[4.0]);
    }
}
