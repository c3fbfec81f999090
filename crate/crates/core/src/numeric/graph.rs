//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node appended to a tape, so the
//! node order is already a topological order. [`Graph::backward`] walks the
//! tape in reverse, accumulating adjoints, and adds the resulting leaf
//! adjoints into per-leaf gradient accumulators.
//!
//! Nodes derived from a *frozen* value (a stop-gradient constant, or
//! anything built while the graph is in no-grad mode) are tainted. Calling
//! `backward` on a tainted loss is a contract error rather than a silent
//! zero gradient.

use super::tensor::matmul_into;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const PAD: usize = usize::MAX;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, rstd: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SumSq(Var),
    RowMean(Var),
    MaxGather { x: Var, arg: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    frozen: bool,
    param: Option<usize>,
    grad: Option<Vec<T>>,
}

/// Recorded computation. One graph per forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose every value is frozen: nothing built here can be
    /// differentiated.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, frozen: bool, param: Option<usize>) -> Var {
        let frozen = frozen || !self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !frozen,
            frozen,
            param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, false, None)
    }

    /// Trainable leaf tagged with a parameter-store index.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, false, Some(id))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, false, None)
    }

    /// Stop-gradient value: usable in forward computations, but any loss
    /// that depends on it refuses to backpropagate.
    pub fn frozen(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, true, None)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let frozen = !self.grad_enabled || inputs.iter().any(|v| self.nodes[v.0].frozen);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            frozen,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_frozen(&self, v: Var) -> bool {
        self.nodes[v.0].frozen
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `(store index, gradient)` for every parameter leaf holding a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let t = Tensor::new(vec![m, n], transpose(self.value(x).data(), n, m))?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    fn row_broadcast(&mut self, x: Var, r: Var, add: bool) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if self.value(r).numel() != m {
            return Err(Error::dim(format!(
                "row broadcast of {} values over {n}x{m}",
                self.value(r).numel()
            )));
        }
        let rv = self.value(r).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            for (o, &b) in row.iter_mut().zip(rv) {
                if add {
                    *o += b
                } else {
                    *o *= b
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let op = if add { Op::AddRow(x, r) } else { Op::MulRow(x, r) };
        Ok(self.push(t, op, &[x, r]))
    }

    /// `x[i, :] + r` for every row.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, true)
    }

    /// `x[i, :] ⊙ r` for every row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, false)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let m = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row standardization with population variance, no affine part.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let m = src.cols();
        let mut data = src.data().to_vec();
        let mut rstd = Vec::with_capacity(src.rows());
        let mf = T::of(m as f64);
        for row in data.chunks_mut(m.max(1)) {
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::NormalizeRows { x, rstd }, &[x])
    }

    /// Flat gather: `out[i] = x[idx[i]]`, or zero where `idx[i]` is `None`.
    pub fn gather(&mut self, x: Var, idx: &[Option<usize>], shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != idx.len() {
            return Err(Error::dim(format!("gather of {} into {shape:?}", idx.len())));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len());
        let mut flat = Vec::with_capacity(idx.len());
        for i in idx {
            match *i {
                Some(j) if j < src.len() => {
                    data.push(src[j]);
                    flat.push(j);
                }
                Some(j) => return Err(Error::dim(format!("gather index {j} out of range"))),
                None => {
                    data.push(T::zero());
                    flat.push(PAD);
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather { x, idx: flat }, &[x]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let mut idx = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(format!("row {r} out of range for {n} rows")));
            }
            idx.extend((0..m).map(|c| Some(r * m + c)));
        }
        self.gather(x, &idx, &[rows.len(), m])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims2(x);
        if start + len > m {
            return Err(Error::dim(format!("columns {start}..{} of {m}", start + len)));
        }
        let idx: Vec<_> = (0..n)
            .flat_map(|r| (start..start + len).map(move |c| Some(r * m + c)))
            .collect();
        self.gather(x, &idx, &[n, len])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (pn, pm) = self.dims2(p);
            if pm != m {
                return Err(Error::dim(format!("concat_rows: width {pm} vs {m}")));
            }
            n += pn;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = self.dims2(p);
            if pn != n {
                return Err(Error::dim(format!("concat_cols: height {pn} vs {n}")));
            }
            widths.push(pm);
        }
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum of squared entries, `‖x‖²`.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x), &[x])
    }

    /// Mean of each row, giving a vector of length `rows`.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (n, m) = (src.rows(), src.cols());
        let mf = T::of(m as f64);
        let data = (0..n)
            .map(|i| src.row(i).iter().copied().sum::<T>() / mf)
            .collect();
        let t = Tensor::new(vec![n], data).expect("vector");
        self.push(t, Op::RowMean(x), &[x])
    }

    /// `out[i] = max_{j ∈ windows[i]} x_flat[j]`.
    pub fn window_max(&mut self, x: Var, windows: &[Vec<usize>], shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != windows.len() {
            return Err(Error::dim(format!("window_max of {} into {shape:?}", windows.len())));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(windows.len());
        let mut arg = Vec::with_capacity(windows.len());
        for w in windows {
            let mut best = *w
                .first()
                .ok_or_else(|| Error::dim("empty pooling window"))?;
            for &j in w {
                if j >= src.len() {
                    return Err(Error::dim(format!("window index {j} out of range")));
                }
                if src[j] > src[best] {
                    best = j;
                }
            }
            data.push(src[best]);
            arg.push(best);
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::MaxGather { x, arg }, &[x]))
    }

    /// Max over each row (vector of length `rows`).
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x);
        let windows: Vec<Vec<usize>> = (0..n).map(|i| (i * m..(i + 1) * m).collect()).collect();
        self.window_max(x, &windows, &[n])
    }

    /// Mean softmax cross-entropy of `logits[n×k]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits);
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            if y >= k {
                return Err(Error::dim(format!("label {y} out of range for {k} classes")));
            }
            softmax_in_place(row);
            loss -= row[y].max(T::min_positive_value()).ln();
        }
        let loss = loss / T::of(n as f64);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`. Repeated calls add to the accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if node.frozen {
            return Err(Error::Contract(
                "loss depends on a stop-gradient value; refusing to backpropagate".into(),
            ));
        }
        if !node.requires_grad {
            return Ok(());
        }

        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        for (i, a) in adj.into_iter().enumerate() {
            if let Some(g) = a {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.numel();
                adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (n, k) = self.dims2(*a);
                let m = self.dims2(*b).1;
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(val(*b), k, m);
                    matmul_into(g, &bt, acc!(*a), n, m, k);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose(val(*a), n, k);
                    matmul_into(&at, g, acc!(*b), k, n, m);
                }
            }
            Op::Transpose(x) => {
                let (n, m) = self.dims2(*x);
                let gt = transpose(g, m, n);
                add_into(acc!(*x), &gt);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(acc!(*a), g);
                }
                if self.wants(*b) {
                    add_into(acc!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc!(*a), g);
                }
                if self.wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = val(*b);
                    acc!(*a).iter_mut().zip(g).zip(bv).for_each(|((d, &gv), &y)| *d += gv * y);
                }
                if self.wants(*b) {
                    let av = val(*a);
                    acc!(*b).iter_mut().zip(g).zip(av).for_each(|((d, &gv), &x)| *d += gv * x);
                }
            }
            Op::AddRow(x, r) => {
                let m = self.dims2(*x).1.max(1);
                if self.wants(*x) {
                    add_into(acc!(*x), g);
                }
                if self.wants(*r) {
                    let dr = acc!(*r);
                    for row in g.chunks(m) {
                        add_into(dr, row);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let m = self.dims2(*x).1.max(1);
                let rv = val(*r);
                if self.wants(*x) {
                    let dx = acc!(*x);
                    for (drow, grow) in dx.chunks_mut(m).zip(g.chunks(m)) {
                        for ((d, &gv), &s) in drow.iter_mut().zip(grow).zip(rv) {
                            *d += gv * s;
                        }
                    }
                }
                if self.wants(*r) {
                    let xv = val(*x);
                    let dr = acc!(*r);
                    for (grow, xrow) in g.chunks(m).zip(xv.chunks(m)) {
                        for ((d, &gv), &xe) in dr.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xe;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc!(*x).iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * c);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc!(*x)
                    .iter_mut()
                    .zip(g)
                    .zip(xv)
                    .for_each(|((d, &gv), &xe)| *d += gv * gelu_grad(xe));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc!(*x).iter_mut().zip(g).zip(xv).for_each(|((d, &gv), &xe)| {
                    if xe > T::zero() {
                        *d += gv
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let m = self.dims2(*x).1.max(1);
                let dx = acc!(*x);
                for ((drow, grow), yrow) in dx.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }
            Op::NormalizeRows { x, rstd } => {
                let m = self.dims2(*x).1.max(1);
                let mf = T::of(m as f64);
                let dx = acc!(*x);
                for (((drow, grow), yrow), &r) in dx
                    .chunks_mut(m)
                    .zip(g.chunks(m))
                    .zip(out.chunks(m))
                    .zip(rstd)
                {
                    let gmean = grow.iter().copied().sum::<T>() / mf;
                    let gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / mf;
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += r * (gv - gmean - y * gy);
                    }
                }
            }
            Op::Gather { x, idx } => {
                let dx = acc!(*x);
                for (&j, &gv) in idx.iter().zip(g) {
                    if j != PAD {
                        dx[j] += gv;
                    }
                }
            }
            Op::MaxGather { x, arg } => {
                let dx = acc!(*x);
                for (&j, &gv) in arg.iter().zip(g) {
                    dx[j] += gv;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if self.wants(p) {
                        add_into(acc!(p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.dims2(parts[0]).0;
                let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
                let m: usize = widths.iter().sum();
                let mut col = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.wants(p) {
                        let dp = acc!(p);
                        for r in 0..n {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * m + col..r * m + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::Sum(x) => {
                let s = g[0];
                acc!(*x).iter_mut().for_each(|d| *d += s);
            }
            Op::SumSq(x) => {
                let s = g[0] + g[0];
                let xv = val(*x);
                acc!(*x).iter_mut().zip(xv).for_each(|(d, &xe)| *d += s * xe);
            }
            Op::RowMean(x) => {
                let m = self.dims2(*x).1.max(1);
                let mf = T::of(m as f64);
                let dx = acc!(*x);
                for (drow, &gv) in dx.chunks_mut(m).zip(g) {
                    let s = gv / mf;
                    drow.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.dims2(*logits).1;
                let s = g[0] / T::of(labels.len() as f64);
                let dx = acc!(*logits);
                for ((drow, prow), &y) in dx.chunks_mut(k).zip(probs.chunks(k)).zip(labels) {
                    for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let t = if j == y { T::one() } else { T::zero() };
                        *d += s * (p - t);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn transpose<T: Real>(x: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
    out
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
