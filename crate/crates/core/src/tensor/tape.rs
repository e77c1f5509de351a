use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::gemm;
use super::{axis_layout, ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node recorded on a [`Tape`].
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
    Param(#[allow(dead_code)] ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    VarianceAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Rc<[usize]> },
    ExpandRows(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    Pick { x: Var, cols: Rc<[usize]> },
    KnnScores { q: Var, keys: Var, nbr: Rc<[usize]>, k: usize },
    KnnMix { w: Var, values: Var, nbr: Rc<[usize]>, k: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's parents precede
/// it and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a reverse sweep: gradient of the loss w.r.t. every tracked node.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Parameter gradients in parameter-id order; unreachable parameters are skipped.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].as_deref().map(|g| (*id, g)))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf that is not a parameter (gradient available via [`Gradients::wrt`]).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(TensorError::Rank { op, expected: rank, shape: shape.to_vec() });
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(TensorError::Axis { op, axis, shape: self.shape(v).to_vec() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), t))
    }

    /// `a[m×n] + bias[n]` with the bias repeated over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.expect_rank("add_row", a, 2)?;
        let n = self.shape(a)[1];
        if self.value(bias).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let t = self.tracked(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| c * x);
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, c), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x + c);
        let t = self.tracked(&[a]);
        self.push(value, Op::AddScalar(a), t)
    }

    /// Rectifier; the subgradient at 0 is 0. NaN passes through.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| if x < 0.0 { 0.0 } else { x });
        let t = self.tracked(&[a]);
        self.push(value, Op::Relu(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        let t = self.tracked(&[a]);
        self.push(value, Op::Exp(a), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::ln);
        let t = self.tracked(&[a]);
        self.push(value, Op::Log(a), t)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let mut value = self.value(x).clone();
        softmax_in_place(&mut value, axis, false);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, t))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let mut value = self.value(x).clone();
        softmax_in_place(&mut value, axis, true);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, t))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), t)
    }

    fn reduce_axis(&self, x: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Tensor {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_layout(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..len).map(|a| data[(o * len + a) * inner + i]);
                out.push(f(&mut it));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Tensor::new(out_shape, out).expect("reduced shape")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let value = self.reduce_axis(x, axis, |it| it.sum());
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::SumAxis { x, axis }, t))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let value = self.reduce_axis(x, axis, |it| it.sum::<f64>() / len);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::MeanAxis { x, axis }, t))
    }

    /// Population variance along `axis`.
    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("variance_axis", x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let value = self.reduce_axis(x, axis, |it| {
            let vals: Vec<f64> = it.collect();
            let mean = vals.iter().sum::<f64>() / len;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len
        });
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::VarianceAxis { x, axis }, t))
    }

    /// Maximum along `axis` together with the arg-max (lowest index on ties).
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        self.check_axis("max_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_layout(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = data[o * len * inner + i];
                for a in 1..len {
                    let v = data[(o * len + a) * inner + i];
                    if v > best_v {
                        best = a;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let t = self.tracked(&[x]);
        let v = self.push(value, Op::MaxAxis { x, axis, argmax: argmax.clone() }, t);
        Ok((v, argmax))
    }

    /// Row-wise layer normalization of `x[m×n]` with affine `gamma[n]`, `beta[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.expect_rank("layer_norm", x, 2)?;
        let n = self.shape(x)[1];
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                normed.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let t = self.tracked(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, normed, inv_std }, t))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Index { op: "concat", index: 0, len: 0 })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let t = self.tracked(parts);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, t))
    }

    /// Index-select of rows (first axis).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(TensorError::Rank { op: "gather_rows", expected: 1, shape: vec![] });
        }
        let rows = xv.shape()[0];
        let cols: usize = xv.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index { op: "gather_rows", index: i, len: rows });
            }
            out.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.into() }, t))
    }

    /// Repeats a single row `rows` times: `[n]` or `[1×n]` to `[rows×n]`.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if !(xv.rank() == 1 || (xv.rank() == 2 && xv.shape()[0] == 1)) {
            return Err(TensorError::Rank { op: "expand_rows", expected: 1, shape: xv.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(xv.data());
        }
        let value = Tensor::matrix(rows, n, out);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::ExpandRows(x), t))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("transpose", x, 2)?;
        let xv = self.value(x);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), t))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.expect_rank("slice_cols", x, 2)?;
        let xv = self.value(x);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if start + len > n {
            return Err(TensorError::Index { op: "slice_cols", index: start + len, len: n });
        }
        let mut out = Vec::with_capacity(m * len);
        for row in xv.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::matrix(m, len, out);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, t))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        self.expect_rank("pick", x, 2)?;
        let xv = self.value(x);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if cols.len() != m {
            return Err(TensorError::ShapeMismatch { op: "pick", lhs: vec![m, n], rhs: vec![cols.len()] });
        }
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(TensorError::Index { op: "pick", index: c, len: n });
            }
            out.push(xv.data()[i * n + c]);
        }
        let value = Tensor::vector(out);
        let t = self.tracked(&[x]);
        Ok(self.push(value, Op::Pick { x, cols: cols.into() }, t))
    }

    fn check_neighbors(&self, op: &'static str, rows: usize, nbr: &[usize], k: usize, keys: usize) -> Result<()> {
        if nbr.len() != rows * k {
            return Err(TensorError::ShapeMismatch { op, lhs: vec![rows, k], rhs: vec![nbr.len()] });
        }
        if let Some(&bad) = nbr.iter().find(|&&j| j >= keys) {
            return Err(TensorError::Index { op, index: bad, len: keys });
        }
        Ok(())
    }

    /// Neighborhood dot products: `out[t, j] = q[t] · keys[nbr[t·k + j]]`.
    pub fn knn_scores(&mut self, q: Var, keys: Var, nbr: &Rc<[usize]>, k: usize) -> Result<Var> {
        self.expect_rank("knn_scores", q, 2)?;
        self.expect_rank("knn_scores", keys, 2)?;
        let (qv, kv) = (self.value(q), self.value(keys));
        let (n, h) = (qv.shape()[0], qv.shape()[1]);
        if kv.shape()[1] != h {
            return Err(TensorError::ShapeMismatch {
                op: "knn_scores",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        self.check_neighbors("knn_scores", n, nbr, k, kv.shape()[0])?;
        let mut out = Vec::with_capacity(n * k);
        for t in 0..n {
            let qt = qv.row(t);
            for &j in &nbr[t * k..(t + 1) * k] {
                out.push(dot(qt, kv.row(j)));
            }
        }
        let value = Tensor::matrix(n, k, out);
        let tr = self.tracked(&[q, keys]);
        Ok(self.push(value, Op::KnnScores { q, keys, nbr: nbr.clone(), k }, tr))
    }

    /// Neighborhood mixing: `out[t] = Σ_j w[t, j] · values[nbr[t·k + j]]`.
    pub fn knn_mix(&mut self, w: Var, values: Var, nbr: &Rc<[usize]>, k: usize) -> Result<Var> {
        self.expect_rank("knn_mix", w, 2)?;
        self.expect_rank("knn_mix", values, 2)?;
        let (wv, vv) = (self.value(w), self.value(values));
        let n = wv.shape()[0];
        if wv.shape()[1] != k {
            return Err(TensorError::ShapeMismatch { op: "knn_mix", lhs: wv.shape().to_vec(), rhs: vec![n, k] });
        }
        self.check_neighbors("knn_mix", n, nbr, k, vv.shape()[0])?;
        let h = vv.shape()[1];
        let mut out = vec![0.0; n * h];
        for t in 0..n {
            let o = &mut out[t * h..(t + 1) * h];
            for (jj, &j) in nbr[t * k..(t + 1) * k].iter().enumerate() {
                axpy(wv.data()[t * k + jj], vv.row(j), o);
            }
        }
        let value = Tensor::matrix(n, h, out);
        let tr = self.tracked(&[w, values]);
        Ok(self.push(value, Op::KnnMix { w, values, nbr: nbr.clone(), k }, tr))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            nodes: grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), val(*b), (1, n), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, val(*a), (1, k), g, (n, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(vb).for_each(|((x, gy), y)| *x += gy * y)
                });
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(g).zip(va).for_each(|((x, gy), y)| *x += gy * y)
                });
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                let n = self.value(*bias).numel();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Relu(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((x, gy), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(out).for_each(|((x, gy), y)| *x += gy * y)
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(va).for_each(|((x, gy), v)| *x += gy / v)
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let s: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let s: f64 = (0..len).map(|a| g[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += g[at(a)] - y[at(a)].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_layout(self.shape(*x), *axis);
                let c = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] += c * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::VarianceAxis { x, axis } => {
                let (outer, len, inner) = axis_layout(self.shape(*x), *axis);
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let mean = (0..len).map(|a| xv[at(a)]).sum::<f64>() / len as f64;
                            let go = g[o * inner + i];
                            for a in 0..len {
                                gx[at(a)] += go * 2.0 * (xv[at(a)] - mean) / len as f64;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = axis_layout(self.shape(*x), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let a = argmax[o * inner + i];
                            gx[(o * len + a) * inner + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let n = self.value(*gamma).numel();
                let gm = val(*gamma);
                self.accumulate(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(n).zip(normed.chunks(n)) {
                        gg.iter_mut().zip(grow).zip(hrow).for_each(|((a, gy), h)| *a += gy * h);
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (r, ((gxr, grow), hrow)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(normed.chunks(n)).enumerate() {
                        let dh: Vec<f64> = grow.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gxr[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_layout(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols: usize = self.shape(*x)[1..].iter().product();
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ExpandRows(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, |gx| {
                    for row in g.chunks(n) {
                        add_into(gx, row);
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (gxr, gr) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut gxr[*start..start + len], gr);
                    }
                });
            }
            Op::Pick { x, cols } => {
                let n = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * n + c] += g[i];
                    }
                });
            }
            Op::KnnScores { q, keys, nbr, k } => {
                let (qv, kv) = (self.value(*q), self.value(*keys));
                let (n, h) = (qv.shape()[0], qv.shape()[1]);
                self.accumulate(grads, *q, |gq| {
                    for t in 0..n {
                        let gqt = &mut gq[t * h..(t + 1) * h];
                        for (jj, &j) in nbr[t * k..(t + 1) * k].iter().enumerate() {
                            axpy(g[t * k + jj], kv.row(j), gqt);
                        }
                    }
                });
                self.accumulate(grads, *keys, |gk| {
                    for t in 0..n {
                        for (jj, &j) in nbr[t * k..(t + 1) * k].iter().enumerate() {
                            axpy(g[t * k + jj], qv.row(t), &mut gk[j * h..(j + 1) * h]);
                        }
                    }
                });
            }
            Op::KnnMix { w, values, nbr, k } => {
                let (wv, vv) = (self.value(*w), self.value(*values));
                let n = wv.shape()[0];
                let h = vv.shape()[1];
                self.accumulate(grads, *w, |gw| {
                    for t in 0..n {
                        let gt = &g[t * h..(t + 1) * h];
                        for (jj, &j) in nbr[t * k..(t + 1) * k].iter().enumerate() {
                            gw[t * k + jj] += dot(gt, vv.row(j));
                        }
                    }
                });
                self.accumulate(grads, *values, |gv| {
                    for t in 0..n {
                        let gt = &g[t * h..(t + 1) * h];
                        for (jj, &j) in nbr[t * k..(t + 1) * k].iter().enumerate() {
                            axpy(wv.data()[t * k + jj], gt, &mut gv[j * h..(j + 1) * h]);
                        }
                    }
                });
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(slot) = self.slot(grads, v) {
            f(slot);
        }
    }
}

fn softmax_in_place(t: &mut Tensor, axis: usize, log: bool) {
    let (outer, len, inner) = axis_layout(t.shape(), axis);
    let d = t.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for a in 0..len {
                s += (d[at(a)] - max).exp();
            }
            if log {
                let lse = max + s.ln();
                for a in 0..len {
                    d[at(a)] -= lse;
                }
            } else {
                for a in 0..len {
                    d[at(a)] = (d[at(a)] - max).exp() / s;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
